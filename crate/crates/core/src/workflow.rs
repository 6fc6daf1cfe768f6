//! Staged end-to-end routines shared by the command-line driver and the
//! acceptance suite: dataset rendering, base encoder and visible net
//! fitting, attribute directions, evaluation and ablation runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::composition::{composition_residuals, train_visible_net, Triplet, VisibleNet};
use crate::config::RunConfig;
use crate::encoders::{train_base_encoder, BaseEncoder, RecurrentEncoder};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, EstimatorParams, FlowField};
use crate::generator::{learn_direction, Generator, LatentCode, SemanticDirection};
use crate::imaging::{align, Frame};
use crate::losses::PerceptualExtractor;
use crate::metrics::{mse_x100, perceptual, tl_tg_id, video_features, warp_error, IdentityEmbedder, VideoMetrics};
use crate::pipeline::{random_direction, rollout, train, Ablation, Models, Variant};
use crate::synthdata::{
    render_episode, render_oracle_episode, sample_code_trajectory, Attributes, CodeTrajectoryParams, Episode,
    SceneParams,
};

/// Seed of episode `index` under a run seed (splitmix64 finalizer).
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    let mut z = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one episode: procedural faces, or generator-native frames when
/// `data.oracle` is set (which needs `gen`).
pub fn render_dataset_episode(cfg: &RunConfig, gen: Option<&Generator>, seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = &cfg.data;
    if d.oracle {
        let gen = gen.ok_or_else(|| Error::MissingPrerequisite("oracle episodes need the generator".into()))?;
        let (codes, noises) = sample_code_trajectory(gen, d.frames, &CodeTrajectoryParams::default(), &mut rng)?;
        render_oracle_episode(gen, &codes, &noises)
    } else {
        let params = SceneParams::random(&mut rng, d.frame_resolution, cfg.generator.resolution, d.frames, d.occluder);
        render_episode(&params)
    }
}

/// Episodes `start..start + count` of the run, each with its seed.
pub fn render_dataset(cfg: &RunConfig, gen: Option<&Generator>, start: u64, count: usize) -> Result<Vec<(u64, Episode)>> {
    (start..start + count as u64)
        .map(|i| {
            let s = episode_seed(cfg.seed, i);
            Ok((s, render_dataset_episode(cfg, gen, s)?))
        })
        .collect()
}

/// `(G(w, n), w)` pairs for base encoder regression.
pub fn regression_pairs(gen: &Generator, n: usize, seed: u64) -> Result<Vec<(Frame, LatentCode)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (codes, noises) = sample_code_trajectory(gen, 1, &CodeTrajectoryParams::default(), &mut rng)?;
            Ok((gen.synthesize(&codes[0], &noises[0])?, codes[0].clone()))
        })
        .collect()
}

/// Stage one: regress the base encoder onto generator samples.
pub fn fit_base_encoder(cfg: &RunConfig, gen: &Generator) -> Result<(BaseEncoder, Vec<f64>)> {
    let mut enc = BaseEncoder::new(cfg.base_encoder_config(), Some(gen.mean_code().rows()))?;
    let pairs = regression_pairs(gen, cfg.base_encoder.samples, cfg.seed.wrapping_add(7))?;
    let curve = train_base_encoder(&mut enc, &pairs, &cfg.regression_options())?;
    Ok((enc, curve))
}

/// Stage two: fit and freeze the visible net on episode triplets.
pub fn fit_visnet(cfg: &RunConfig, episodes: &[Episode]) -> Result<(VisibleNet, Vec<(usize, f64)>)> {
    let triplets: Vec<Triplet> = episodes
        .iter()
        .map(Episode::triplets)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut net = VisibleNet::new(cfg.visnet_config())?;
    let curve = train_visible_net(&mut net, &triplets, &cfg.visnet_optimizer())?;
    Ok((net, curve))
}

/// Assembles the model set with a freshly initialised recurrent encoder.
pub fn assemble_models(
    cfg: &RunConfig,
    generator: Generator,
    base_encoder: BaseEncoder,
    visnet: Option<VisibleNet>,
    variant: Variant,
) -> Result<Models> {
    let m = Models {
        generator,
        base_encoder,
        recurrent: RecurrentEncoder::new(cfg.recurrent_config())?,
        visnet,
        variant,
    };
    m.validate()?;
    Ok(m)
}

pub const ATTRIBUTE_NAMES: [&str; 3] = ["chubby", "smile", "eyes"];

/// Directions for the three face attributes: difference of mean inverted
/// codes between faces with the attribute high and low, with the other
/// attributes and the pose random.
pub fn attribute_directions(cfg: &RunConfig, base: &BaseEncoder, per_side: usize) -> Result<Vec<SemanticDirection>> {
    let crop = cfg.generator_config().frame_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(8));
    let mut encode = |attr: usize, value: f64| -> Result<LatentCode> {
        let mut p = SceneParams::random(&mut rng, cfg.data.frame_resolution, crop.height, 1, false);
        let mut a = p.attributes.as_array();
        a[attr] = value;
        p.attributes = Attributes {
            face_width: a[0],
            mouth_curvature: a[1],
            eye_openness: a[2],
        };
        let ep = render_episode(&p)?;
        let aligned = align(&ep.frames[0], &p.alignment(0)?, crop)?;
        base.encode(&aligned.pixels)
    };
    ATTRIBUTE_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut pos = Vec::with_capacity(per_side);
            let mut neg = Vec::with_capacity(per_side);
            for _ in 0..per_side {
                pos.push(encode(i, 0.9)?);
                neg.push(encode(i, 0.1)?);
            }
            learn_direction(name, &pos, &neg)?.normalized()
        })
        .collect()
}

/// `(f_{t=>t+1}, f_{t+1=>t})` for `t = 0..T-1`: ground truth when the
/// episode carries it, estimated otherwise.
pub fn metric_flows(episode: &Episode, est: &EstimatorParams) -> Result<(Vec<FlowField>, Vec<FlowField>)> {
    if let Some(gt) = &episode.gt {
        return Ok((gt.flows_next.clone(), gt.flows_prev.clone()));
    }
    let f = &episode.frames;
    let fwd = (0..f.len().saturating_sub(1))
        .map(|t| estimate_flow(&f[t], &f[t + 1], est))
        .collect::<Result<Vec<_>>>()?;
    let bwd = (0..f.len().saturating_sub(1))
        .map(|t| estimate_flow(&f[t + 1], &f[t], est))
        .collect::<Result<Vec<_>>>()?;
    Ok((fwd, bwd))
}

/// Metric extractors with fixed seeds so every report is comparable.
pub struct Evaluator {
    pub perceptual: PerceptualExtractor,
    pub embedder: IdentityEmbedder,
    pub estimator: EstimatorParams,
}

impl Default for Evaluator {
    fn default() -> Self {
        Self {
            perceptual: PerceptualExtractor::new(0),
            embedder: IdentityEmbedder::new(0),
            estimator: EstimatorParams::default(),
        }
    }
}

impl Evaluator {
    /// Reconstruction metrics use `inverted`; temporal and identity
    /// metrics use `edited`.
    pub fn video(&self, name: &str, inverted: &[Frame], edited: &[Frame], reference: &Episode) -> Result<VideoMetrics> {
        let (fwd, bwd) = metric_flows(reference, &self.estimator)?;
        let we = warp_error(edited, &fwd, &bwd)?;
        let (tl_id, tg_id) = tl_tg_id(edited, &reference.frames, &self.embedder)?;
        Ok(VideoMetrics {
            name: name.to_string(),
            mse_x100: mse_x100(inverted, &reference.frames)?,
            perceptual: perceptual(inverted, &reference.frames, &self.perceptual)?,
            warp_error: we.normalized,
            warp_error_raw: we.raw,
            tl_id,
            tg_id,
        })
    }

    pub fn features(&self, video: &[Frame]) -> Result<Vec<f64>> {
        video_features(video, &self.embedder)
    }
}

/// One ablation training run and its scores on the evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub ablation: Ablation,
    pub seed: u64,
    /// Mean normalized warp error of the edited videos.
    pub warp_error: f64,
    /// Mean `|E_t - E^_t|` over interior frames of the edited videos.
    pub composition_residual: f64,
    pub mse_x100: f64,
}

/// Trains one variant from the shared stage-one/two models and evaluates
/// it on held-out edits. `seed` varies recurrent initialisation, training
/// order and the evaluation directions.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    cfg: &RunConfig,
    generator: &Generator,
    base: &BaseEncoder,
    visnet: &VisibleNet,
    train_eps: &[Episode],
    eval_eps: &[Episode],
    ablation: Ablation,
    seed: u64,
) -> Result<AblationRun> {
    let mut run_cfg = cfg.clone();
    run_cfg.seed = cfg.seed.wrapping_add(seed.wrapping_mul(1000));
    let mut models = Models {
        generator: generator.clone(),
        base_encoder: base.clone(),
        recurrent: RecurrentEncoder::new(run_cfg.recurrent_config())?,
        visnet: Some(visnet.clone()),
        variant: ablation.variant(),
    };
    let mut opts = run_cfg.train_options();
    opts.weights = ablation.weights(cfg.loss_weights());
    let perc = PerceptualExtractor::new(0);
    train(&mut models, train_eps, &perc, &opts, |_| {})?;

    let g = generator.config();
    let mut rng = ChaCha8Rng::seed_from_u64(run_cfg.seed.wrapping_add(9));
    let (mut we, mut res, mut mse) = (0.0, 0.0, 0.0);
    for ep in eval_eps {
        let gt = ep
            .gt
            .as_ref()
            .ok_or_else(|| Error::MissingPrerequisite("ablation evaluation needs ground-truth episodes".into()))?;
        let dir = random_direction(g.latent_layers, g.latent_dim, &mut rng)?;
        let r = rollout(&models, ep, &dir, cfg.ablation.edit_strength)?;
        we += warp_error(&r.edited_full, &gt.flows_next, &gt.flows_prev)?.normalized;
        let n = ep.len();
        let residuals = composition_residuals(
            &r.edited_full,
            &gt.flows_prev[..n - 2],
            &gt.flows_next[1..],
            visnet,
        )?;
        res += residuals.iter().sum::<f64>() / residuals.len() as f64;
        mse += mse_x100(&r.inverted_full, &ep.frames)?;
    }
    let k = eval_eps.len().max(1) as f64;
    Ok(AblationRun {
        ablation,
        seed,
        warp_error: we / k,
        composition_residual: res / k,
        mse_x100: mse / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_seeds_are_distinct_and_stable() {
        let s: Vec<u64> = (0..100).map(|i| episode_seed(3, i)).collect();
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 100);
        assert_eq!(episode_seed(3, 5), s[5]);
        assert_ne!(episode_seed(4, 5), s[5]);
    }

    #[test]
    fn datasets_are_reproducible() {
        let cfg = RunConfig::from_toml("[data]\nframes = 3\n").unwrap();
        let a = render_dataset(&cfg, None, 0, 2).unwrap();
        let b = render_dataset(&cfg, None, 0, 2).unwrap();
        for ((sa, ea), (sb, eb)) in a.iter().zip(&b) {
            assert_eq!(sa, sb);
            assert_eq!(ea.frames, eb.frames);
        }
        assert_ne!(a[0].1.frames, a[1].1.frames);
        let mut oracle = cfg.clone();
        oracle.data.oracle = true;
        assert!(matches!(render_dataset(&oracle, None, 0, 1), Err(Error::MissingPrerequisite(_))));
    }
}
