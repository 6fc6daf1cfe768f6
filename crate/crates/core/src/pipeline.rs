//! Sequential inversion and editing of an episode, training of the
//! recurrent encoder, and streaming inference.
//!
//! Every frame goes through the same tape-level step, whether it is part of
//! a training episode or a stream. Inference records each frame on a fresh
//! tape; training records the whole episode on one tape so gradients reach
//! the recurrent encoder through all frames.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigid_tensor::{Adam, Bound, Tape, Tensor, Var};

use crate::composition::{ibfcc_var, VisibleNet};
use crate::encoders::{BaseEncoder, RecurrentEncoder, RecurrentState, StateVars};
use crate::error::{shape_err, Error, Result};
use crate::flow::{estimate_flow, EstimatorParams, FlowField};
use crate::generator::{lfd_var, Generator, LatentCode, NoiseMap, SemanticDirection};
use crate::imaging::{align, blend_var, mask_union, unalign_var, AffineTransform, Frame, FrameShape, Mask};
use crate::losses::{reconstruction_var, temporal_consistency_var, LossWeights, PerceptualExtractor};
use crate::synthdata::Episode;

/// Which recurrent outputs and code sharing the rollout uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    /// Add the recurrent compensation code `w'_t`.
    pub compensation: bool,
    /// Feed the predicted noise map to the generator (zeros otherwise).
    pub noise: bool,
    /// Share the latter rows of the first frame.
    pub lfd: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            compensation: true,
            noise: true,
            lfd: true,
        }
    }
}

/// Named ablations of the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoCompensation,
    NoNoise,
    NoLfd,
    NoIbfcc,
    NoTc,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoCompensation,
        Ablation::NoNoise,
        Ablation::NoLfd,
        Ablation::NoIbfcc,
        Ablation::NoTc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "RIGID",
            Ablation::NoCompensation => "w/o TCC",
            Ablation::NoNoise => "w/o NM",
            Ablation::NoLfd => "w/o LFD",
            Ablation::NoIbfcc => "w/o L_ibfcc",
            Ablation::NoTc => "w/o L_tc",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCompensation => "no_tcc",
            Ablation::NoNoise => "no_nm",
            Ablation::NoLfd => "no_lfd",
            Ablation::NoIbfcc => "no_ibfcc",
            Ablation::NoTc => "no_tc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.key() == s)
    }

    pub fn variant(self) -> Variant {
        let mut v = Variant::default();
        match self {
            Ablation::NoCompensation => v.compensation = false,
            Ablation::NoNoise => v.noise = false,
            Ablation::NoLfd => v.lfd = false,
            _ => {}
        }
        v
    }

    pub fn weights(self, base: LossWeights) -> LossWeights {
        let mut w = base;
        match self {
            Ablation::NoIbfcc => w.lambda3 = 0.0,
            Ablation::NoTc => w.lambda2 = 0.0,
            _ => {}
        }
        w
    }
}

/// All weights a rollout needs.
#[derive(Clone, Debug)]
pub struct Models {
    pub generator: Generator,
    pub base_encoder: BaseEncoder,
    pub recurrent: RecurrentEncoder,
    pub visnet: Option<VisibleNet>,
    pub variant: Variant,
}

impl Models {
    pub fn crop_shape(&self) -> FrameShape {
        self.generator.config().frame_shape()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.generator.config();
        let b = self.base_encoder.config();
        let r = self.recurrent.config();
        let layout = |res, l, d, k| (res, l, d, k) == (g.resolution, g.latent_layers, g.latent_dim, g.split_index);
        if !layout(b.resolution, b.latent_layers, b.latent_dim, b.split_index)
            || !layout(r.resolution, r.latent_layers, r.latent_dim, r.split_index)
            || r.noise_resolution != g.noise_resolution
        {
            return Err(Error::Config("encoder layouts disagree with the generator".into()));
        }
        Ok(())
    }
}

/// Alignment and face mask of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMeta {
    pub transform: AffineTransform,
    pub mask: Mask,
}

/// Scale-to-fit centred crop, used when no ground-truth alignment exists.
pub fn center_crop(canvas: FrameShape, crop: FrameShape) -> AffineTransform {
    let k = crop.height.min(crop.width) as f64 / canvas.height.min(canvas.width) as f64;
    let (cx, cy) = ((canvas.width as f64 - 1.0) / 2.0, (canvas.height as f64 - 1.0) / 2.0);
    let (mx, my) = ((crop.width as f64 - 1.0) / 2.0, (crop.height as f64 - 1.0) / 2.0);
    AffineTransform::new([[k, 0.0, mx - k * cx], [0.0, k, my - k * cy]]).expect("positive scale is a similarity")
}

/// Default metadata for frames without ground truth: centred crop and a
/// full face mask.
pub fn default_meta(canvas: FrameShape, crop: FrameShape) -> FrameMeta {
    FrameMeta {
        transform: center_crop(canvas, crop),
        mask: Mask::ones(canvas),
    }
}

/// Per-frame metadata: ground truth when present, defaults otherwise.
pub fn episode_meta(episode: &Episode, crop: FrameShape) -> Result<Vec<FrameMeta>> {
    let shape = episode.shape().ok_or(Error::Empty("episode"))?;
    match &episode.gt {
        None => Ok(vec![default_meta(shape, crop); episode.len()]),
        Some(gt) => {
            if gt.transforms.len() != episode.len() || gt.masks.len() != episode.len() {
                return Err(Error::MissingPrerequisite(
                    "episode ground truth lacks per-frame transforms or masks".into(),
                ));
            }
            Ok(gt
                .transforms
                .iter()
                .zip(&gt.masks)
                .map(|(t, m)| FrameMeta {
                    transform: *t,
                    mask: m.clone(),
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub inverted_aligned: Vec<Frame>,
    pub edited_aligned: Vec<Frame>,
    pub inverted_full: Vec<Frame>,
    pub edited_full: Vec<Frame>,
    pub codes: Vec<LatentCode>,
    pub noises: Vec<NoiseMap>,
}

impl RolloutResult {
    fn with_capacity(n: usize) -> Self {
        Self {
            inverted_aligned: Vec::with_capacity(n),
            edited_aligned: Vec::with_capacity(n),
            inverted_full: Vec::with_capacity(n),
            edited_full: Vec::with_capacity(n),
            codes: Vec::with_capacity(n),
            noises: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, s: StepOutput) {
        self.inverted_aligned.push(s.inverted_aligned);
        self.edited_aligned.push(s.edited_aligned);
        self.inverted_full.push(s.inverted);
        self.edited_full.push(s.edited);
        self.codes.push(s.code);
        self.noises.push(s.noise);
    }
}

/// Recurrent inputs carried from one frame to the next, on a tape.
#[derive(Clone, Copy, Debug)]
struct CarryVars {
    state: StateVars,
    prev_aligned: Var,
    prev_inverted: Var,
    prev_edited: Var,
    latter: Option<Var>,
}

struct StepVarsOut {
    inverted: Var,
    edited: Var,
    code: Var,
    noise: Var,
    state: StateVars,
    latter: Var,
}

/// One frame of the method on `tape`: recurrent step, compensation, code
/// sharing, synthesis of the inverted and edited faces.
fn step_on_tape(
    tape: &mut Tape,
    models: &Models,
    gen_p: &Bound,
    rec_p: &Bound,
    carry: CarryVars,
    cur_aligned: Var,
    base_code: Var,
    edit: Option<Var>,
) -> StepVarsOut {
    let cfg = models.generator.config();
    let input = tape.concat(&[carry.prev_aligned, cur_aligned, carry.prev_inverted, carry.prev_edited], 1);
    let rec = models.recurrent.step_var(tape, rec_p, carry.state, input);
    let v = models.variant;
    let code = if v.compensation {
        tape.add(base_code, rec.compensation)
    } else {
        base_code
    };
    let latter = match carry.latter {
        Some(l) => l,
        None => tape.slice(code, 0, cfg.split_index, cfg.latent_layers),
    };
    let code = if v.lfd {
        lfd_var(tape, code, latter, cfg.split_index)
    } else {
        code
    };
    let noise = if v.noise {
        rec.noise
    } else {
        let r = cfg.noise_resolution;
        tape.constant(Tensor::zeros(&[1, 1, r, r]))
    };
    let inverted = models.generator.synthesize_var(tape, gen_p, code, noise);
    let edited = match edit {
        Some(e) => {
            let edited_code = tape.add(code, e);
            models.generator.synthesize_var(tape, gen_p, edited_code, noise)
        }
        None => inverted,
    };
    StepVarsOut {
        inverted,
        edited,
        code,
        noise,
        state: rec.state,
        latter,
    }
}

/// Pastes an aligned face back and blends it into the original frame.
fn compose_full(tape: &mut Tape, aligned: Var, original: Var, meta: &FrameMeta, crop: FrameShape, mask: Var) -> Var {
    let canvas = meta.mask.shape();
    let pasted = unalign_var(tape, aligned, &meta.transform, crop, canvas);
    blend_var(tape, pasted, original, mask)
}

/// Scaled edit `strength * direction`, or `None` when it is a no-op.
fn edit_tensor(models: &Models, direction: &SemanticDirection, strength: f64) -> Result<Option<Tensor>> {
    let cfg = models.generator.config();
    if direction.rows().shape() != [cfg.latent_layers, cfg.latent_dim] {
        return Err(shape_err(format!(
            "direction {:?} does not match the generator code layout [{}, {}]",
            direction.rows().shape(),
            cfg.latent_layers,
            cfg.latent_dim
        )));
    }
    if !strength.is_finite() {
        return Err(Error::InvalidParameter("edit strength must be finite".into()));
    }
    Ok((strength != 0.0).then(|| direction.rows().scaled(strength)))
}

/// Outputs of one streamed frame.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub inverted_aligned: Frame,
    pub edited_aligned: Frame,
    pub inverted: Frame,
    pub edited: Frame,
    pub code: LatentCode,
    pub noise: NoiseMap,
}

struct Carry {
    state: RecurrentState,
    prev_aligned: Tensor,
    prev_inverted: Tensor,
    prev_edited: Tensor,
    latter: Tensor,
}

/// Frame-by-frame driver holding only the recurrent carry, so memory does
/// not grow with the stream length.
pub struct Inverter<'a> {
    models: &'a Models,
    edit: Option<Tensor>,
    carry: Option<Carry>,
    canvas: Option<FrameShape>,
}

impl<'a> Inverter<'a> {
    pub fn new(models: &'a Models, direction: &SemanticDirection, strength: f64) -> Result<Self> {
        models.validate()?;
        Ok(Self {
            models,
            edit: edit_tensor(models, direction, strength)?,
            carry: None,
            canvas: None,
        })
    }

    pub fn frames_seen(&self) -> bool {
        self.carry.is_some()
    }

    pub fn push(&mut self, frame: &Frame, meta: &FrameMeta) -> Result<StepOutput> {
        let canvas = frame.shape();
        if meta.mask.shape() != canvas {
            return Err(shape_err("frame mask differs from the frame shape"));
        }
        if *self.canvas.get_or_insert(canvas) != canvas {
            return Err(shape_err("stream frames change shape"));
        }
        let m = self.models;
        let crop = m.crop_shape();
        let aligned = align(frame, &meta.transform, crop)?.pixels;
        let base = m.base_encoder.encode(&aligned)?;

        let mut tape = Tape::new();
        let gen_p = m.generator.params().bind(&mut tape, false);
        let rec_p = m.recurrent.params().bind(&mut tape, false);
        let cur = tape.constant(aligned.batched());
        let carry = match &self.carry {
            None => {
                // first frame: the current frame stands in for every
                // previous-frame input
                CarryVars {
                    state: StateVars::constant(&mut tape, &m.recurrent.reset_state()),
                    prev_aligned: cur,
                    prev_inverted: cur,
                    prev_edited: cur,
                    latter: None,
                }
            }
            Some(c) => CarryVars {
                state: StateVars::constant(&mut tape, &c.state),
                prev_aligned: tape.constant(c.prev_aligned.clone()),
                prev_inverted: tape.constant(c.prev_inverted.clone()),
                prev_edited: tape.constant(c.prev_edited.clone()),
                latter: Some(tape.constant(c.latter.clone())),
            },
        };
        let base_code = tape.constant(base.into_rows());
        let edit = self.edit.as_ref().map(|e| tape.constant(e.clone()));
        let out = step_on_tape(&mut tape, m, &gen_p, &rec_p, carry, cur, base_code, edit);

        let original = tape.constant(frame.batched());
        let mask_i = tape.constant(meta.mask.batched());
        // no face parser: the edited-face mask is the input mask, so the
        // union equals it
        let mask_e = tape.constant(mask_union(&meta.mask, &meta.mask)?.batched());
        let inv_full = compose_full(&mut tape, out.inverted, original, meta, crop, mask_i);
        let edit_full = compose_full(&mut tape, out.edited, original, meta, crop, mask_e);

        let value = |v: Var| tape.value(v).clone();
        let inverted_aligned = Frame::from_tensor(value(out.inverted))?;
        let edited_aligned = Frame::from_tensor(value(out.edited))?;
        self.carry = Some(Carry {
            state: out.state.value(&tape),
            prev_aligned: aligned.batched(),
            prev_inverted: inverted_aligned.batched(),
            prev_edited: edited_aligned.batched(),
            latter: value(out.latter),
        });
        let split = m.generator.config().split_index;
        Ok(StepOutput {
            inverted_aligned,
            edited_aligned,
            inverted: Frame::from_tensor(value(inv_full))?,
            edited: Frame::from_tensor(value(edit_full))?,
            code: LatentCode::new(value(out.code), split)?,
            noise: NoiseMap::new(value(out.noise))?,
        })
    }
}

/// Inverts and edits every frame of `episode` in order.
pub fn rollout(models: &Models, episode: &Episode, direction: &SemanticDirection, strength: f64) -> Result<RolloutResult> {
    episode.validate()?;
    let meta = episode_meta(episode, models.crop_shape())?;
    let mut inv = Inverter::new(models, direction, strength)?;
    let mut out = RolloutResult::with_capacity(episode.len());
    for (f, m) in episode.frames.iter().zip(&meta) {
        out.push(inv.push(f, m)?);
    }
    Ok(out)
}

/// Lazily inverts a stream of frames with their metadata.
pub fn infer_stream_with_meta<'a, I>(
    models: &'a Models,
    frames: I,
    direction: &SemanticDirection,
    strength: f64,
) -> Result<impl Iterator<Item = Result<StepOutput>> + 'a>
where
    I: IntoIterator<Item = (Frame, FrameMeta)> + 'a,
{
    let mut inv = Inverter::new(models, direction, strength)?;
    Ok(frames.into_iter().map(move |(f, m)| inv.push(&f, &m)))
}

/// Lazily inverts raw frames (centred crop, full mask), yielding
/// `(O_t, E_t)`.
pub fn infer_stream<'a, I>(
    models: &'a Models,
    frames: I,
    direction: &SemanticDirection,
    strength: f64,
) -> Result<impl Iterator<Item = Result<(Frame, Frame)>> + 'a>
where
    I: IntoIterator<Item = Frame> + 'a,
{
    let crop = models.crop_shape();
    let with_meta = frames.into_iter().map(move |f| {
        let m = default_meta(f.shape(), crop);
        (f, m)
    });
    Ok(infer_stream_with_meta(models, with_meta, direction, strength)?.map(|r| r.map(|s| (s.inverted, s.edited))))
}

/// Source of the flows on edited frames used by the composition constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditedFlows {
    /// Run the estimator on the current edited frames.
    Estimated,
    /// Reuse the episode's flows between original frames.
    Original,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Edit strengths are drawn uniformly from `[-max_strength, max_strength]`;
    /// zero trains without editing.
    pub max_strength: f64,
    pub edited_flows: EditedFlows,
    pub estimator: EstimatorParams,
    /// Also update the base encoder (the generator always stays frozen).
    pub train_base_encoder: bool,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            max_strength: 2.0,
            edited_flows: EditedFlows::Estimated,
            estimator: EstimatorParams::default(),
            train_base_encoder: false,
            cosine_decay: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossLog {
    pub step: usize,
    pub l_rec: f64,
    pub l_tc: f64,
    pub l_ibfcc: f64,
    pub total: f64,
}

impl LossLog {
    pub const CSV_HEADER: &'static str = "step,l_rec,l_tc,l_ibfcc,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_rec, self.l_tc, self.l_ibfcc, self.total)
    }
}

/// Random unit-norm direction in code space.
pub fn random_direction<R: Rng + ?Sized>(layers: usize, dim: usize, rng: &mut R) -> Result<SemanticDirection> {
    SemanticDirection::new("random", Tensor::randn(&[layers, dim], 1.0, rng))?.normalized()
}

fn backward_flows(episode: &Episode, est: &EstimatorParams) -> Result<Vec<FlowField>> {
    if let Some(gt) = &episode.gt {
        if gt.flows_prev.len() + 1 == episode.len() {
            return Ok(gt.flows_prev.clone());
        }
    }
    (1..episode.len())
        .map(|t| estimate_flow(&episode.frames[t], &episode.frames[t - 1], est))
        .collect()
}

/// Interior flow pairs `(f_{t=>t-1}, f_{t=>t+1})` for `t = 1..T-1`.
pub fn interior_flows(frames: &[Frame], est: &EstimatorParams) -> Result<(Vec<FlowField>, Vec<FlowField>)> {
    let t = frames.len();
    let mut prev = Vec::with_capacity(t.saturating_sub(2));
    let mut next = Vec::with_capacity(t.saturating_sub(2));
    for i in 1..t.saturating_sub(1) {
        prev.push(estimate_flow(&frames[i], &frames[i - 1], est)?);
        next.push(estimate_flow(&frames[i], &frames[i + 1], est)?);
    }
    Ok((prev, next))
}

/// Trains the recurrent encoder (and optionally the base encoder) on
/// `episodes`, one optimizer step per episode. `on_step` sees every log
/// entry as it is produced.
pub fn train(
    models: &mut Models,
    episodes: &[Episode],
    perceptual: &PerceptualExtractor,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&LossLog),
) -> Result<Vec<LossLog>> {
    models.validate()?;
    opts.weights.validate()?;
    if episodes.is_empty() {
        return Err(Error::Empty("training episodes"));
    }
    let w = opts.weights;
    if w.lambda3 > 0.0 {
        let net = models
            .visnet
            .as_ref()
            .ok_or_else(|| Error::MissingPrerequisite("composition constraint needs a trained visible net".into()))?;
        if !net.is_frozen() {
            return Err(Error::Contract("visible net must be frozen before encoder training".into()));
        }
        if let Some(e) = episodes.iter().find(|e| e.len() < 3) {
            return Err(Error::TooShort {
                what: "training episode with the composition constraint",
                min: 3,
                got: e.len(),
            });
        }
    }
    let crop = models.crop_shape();
    let cfg = models.generator.config().clone();
    // per-episode constants, computed once
    let prepared = episodes
        .iter()
        .map(|e| {
            e.validate()?;
            let meta = episode_meta(e, crop)?;
            let aligned = e
                .frames
                .iter()
                .zip(&meta)
                .map(|(f, m)| Ok(align(f, &m.transform, crop)?.pixels))
                .collect::<Result<Vec<_>>>()?;
            let flows = if w.lambda2 > 0.0 {
                backward_flows(e, &opts.estimator)?
            } else {
                Vec::new()
            };
            Ok((meta, aligned, flows))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam_rec = Adam::new(opts.lr);
    let mut adam_base = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut cursor = order.len();
    let mut logs = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        if opts.cosine_decay {
            let lr = 0.5 * opts.lr * (1.0 + (std::f64::consts::PI * step as f64 / opts.steps as f64).cos());
            adam_rec.lr = lr;
            adam_base.lr = lr;
        }
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = order[cursor];
        cursor += 1;
        let episode = &episodes[idx];
        let (meta, aligned, flows) = &prepared[idx];
        let direction = random_direction(cfg.latent_layers, cfg.latent_dim, &mut rng)?;
        let strength = if opts.max_strength > 0.0 {
            rng.random_range(-opts.max_strength..=opts.max_strength)
        } else {
            0.0
        };

        let mut tape = Tape::new();
        let gen_p = models.generator.params().bind(&mut tape, false);
        let rec_p = models.recurrent.params().bind(&mut tape, true);
        let base_p = models.base_encoder.params().bind(&mut tape, opts.train_base_encoder);
        let edit = edit_tensor(models, &direction, strength)?.map(|e| tape.constant(e));

        let targets: Vec<Var> = aligned.iter().map(|a| tape.constant(a.batched())).collect();
        let mut carry = CarryVars {
            state: StateVars::constant(&mut tape, &models.recurrent.reset_state()),
            prev_aligned: targets[0],
            prev_inverted: targets[0],
            prev_edited: targets[0],
            latter: None,
        };
        let mut inverted = Vec::with_capacity(episode.len());
        let mut edited = Vec::with_capacity(episode.len());
        for t in 0..episode.len() {
            let base_code = if opts.train_base_encoder {
                let raw = models.base_encoder.forward(&mut tape, &base_p, targets[t]);
                tape.reshape(raw, &[cfg.latent_layers, cfg.latent_dim])
            } else {
                let code = models.base_encoder.encode(&aligned[t])?;
                tape.constant(code.into_rows())
            };
            let out = step_on_tape(&mut tape, models, &gen_p, &rec_p, carry, targets[t], base_code, edit);
            inverted.push(out.inverted);
            edited.push(out.edited);
            // recurrence is truncated through the generated frames; the
            // LSTM state keeps its gradient path
            let prev_inverted = tape.detach(out.inverted);
            let prev_edited = tape.detach(out.edited);
            carry = CarryVars {
                state: out.state,
                prev_aligned: targets[t],
                prev_inverted,
                prev_edited,
                latter: Some(out.latter),
            };
        }

        let perc_p = perceptual.params().bind(&mut tape, false);
        let l_rec = reconstruction_var(&mut tape, perceptual, &perc_p, &inverted, &targets, w.alpha)?;
        let mut total = tape.scale(l_rec, w.lambda1);
        let originals: Vec<Var> = episode.frames.iter().map(|f| tape.constant(f.batched())).collect();
        let masks: Vec<Var> = meta.iter().map(|m| tape.constant(m.mask.batched())).collect();
        let mut l_tc = None;
        if w.lambda2 > 0.0 {
            let full: Vec<Var> = (0..episode.len())
                .map(|t| compose_full(&mut tape, inverted[t], originals[t], &meta[t], crop, masks[t]))
                .collect();
            let l = temporal_consistency_var(&mut tape, &originals, &full, flows)?;
            let scaled = tape.scale(l, w.lambda2);
            total = tape.add(total, scaled);
            l_tc = Some(l);
        }
        let mut l_ibfcc = None;
        if w.lambda3 > 0.0 {
            let net = models.visnet.as_ref().expect("checked above");
            let full: Vec<Var> = (0..episode.len())
                .map(|t| compose_full(&mut tape, edited[t], originals[t], &meta[t], crop, masks[t]))
                .collect();
            let (fp, fnx) = match opts.edited_flows {
                EditedFlows::Estimated => {
                    let frames = full
                        .iter()
                        .map(|&v| Frame::from_tensor(tape.value(v).clone()))
                        .collect::<Result<Vec<_>>>()?;
                    interior_flows(&frames, &opts.estimator)?
                }
                EditedFlows::Original => {
                    let gt = episode
                        .gt
                        .as_ref()
                        .filter(|g| g.flows_next.len() + 1 == episode.len())
                        .ok_or_else(|| Error::MissingPrerequisite("episode has no forward flows".into()))?;
                    let prev = backward_flows(episode, &opts.estimator)?;
                    (
                        prev[..episode.len() - 2].to_vec(),
                        gt.flows_next[1..].to_vec(),
                    )
                }
            };
            let vis_p = net.params().bind(&mut tape, false);
            let l = ibfcc_var(&mut tape, net, &vis_p, &full, &fp, &fnx)?;
            let scaled = tape.scale(l, w.lambda3);
            total = tape.add(total, scaled);
            l_ibfcc = Some(l);
        }

        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let log = LossLog {
            step,
            l_rec: tape.value(l_rec).item(),
            l_tc: value(l_tc),
            l_ibfcc: value(l_ibfcc),
            total: tape.value(total).item(),
        };
        if !log.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let grads = tape.backward(total);
        adam_rec.step(models.recurrent.params_mut(), &rec_p.gradients(&tape, &grads));
        if opts.train_base_encoder {
            adam_base.step(models.base_encoder.params_mut(), &base_p.gradients(&tape, &grads));
        }
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::VisibleNetConfig;
    use crate::encoders::{BaseEncoderConfig, RecurrentConfig};
    use crate::generator::GeneratorConfig;
    use crate::synthdata::{render_oracle_episode, sample_code_trajectory, CodeTrajectoryParams};

    pub(crate) fn mini_models(seed: u64) -> Models {
        let g = Generator::new(GeneratorConfig { seed, ..GeneratorConfig::mini() }).unwrap();
        let c = g.config().clone();
        let base = BaseEncoder::new(
            BaseEncoderConfig::new(c.resolution, c.latent_layers, c.latent_dim, c.split_index, seed),
            Some(g.mean_code().rows()),
        )
        .unwrap();
        let mut rc = RecurrentConfig::new(c.resolution, c.noise_resolution, c.latent_layers, c.latent_dim, c.split_index, seed);
        rc.channels = [4, 4, 6, 6, 8, 8, 8];
        rc.hidden = 8;
        rc.head_init_std = 0.01;
        let mut visnet = VisibleNet::new(VisibleNetConfig::mini(seed)).unwrap();
        visnet.freeze();
        Models {
            generator: g,
            base_encoder: base,
            recurrent: RecurrentEncoder::new(rc).unwrap(),
            visnet: Some(visnet),
            variant: Variant::default(),
        }
    }

    fn oracle(models: &Models, seed: u64, t: usize) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (codes, noises) = sample_code_trajectory(&models.generator, t, &CodeTrajectoryParams::default(), &mut rng).unwrap();
        render_oracle_episode(&models.generator, &codes, &noises).unwrap()
    }

    fn direction(models: &Models, seed: u64) -> SemanticDirection {
        let c = models.generator.config();
        random_direction(c.latent_layers, c.latent_dim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_strength_edits_nothing_and_codes_share_latter_rows() {
        let m = mini_models(1);
        let ep = oracle(&m, 2, 5);
        let r = rollout(&m, &ep, &direction(&m, 3), 0.0).unwrap();
        assert_eq!(r.edited_aligned, r.inverted_aligned);
        assert_eq!(r.edited_full, r.inverted_full);
        assert!(r.codes.iter().all(|c| c.latter() == r.codes[0].latter()));
        let e = rollout(&m, &ep, &direction(&m, 3), 1.5).unwrap();
        assert_ne!(e.edited_aligned, e.inverted_aligned);
        assert!(e.codes.iter().all(|c| c.latter() == e.codes[0].latter()));
    }

    #[test]
    fn single_frame_episode_bootstraps() {
        let m = mini_models(1);
        let ep = oracle(&m, 4, 1);
        let r = rollout(&m, &ep, &direction(&m, 3), 0.5).unwrap();
        assert_eq!(r.codes.len(), 1);
        assert_eq!(r.inverted_full.len(), 1);
    }

    #[test]
    fn rollout_is_deterministic_and_stream_matches() {
        let m = mini_models(2);
        let ep = oracle(&m, 5, 5);
        let d = direction(&m, 1);
        let a = rollout(&m, &ep, &d, 1.0).unwrap();
        let b = rollout(&m, &ep, &d, 1.0).unwrap();
        assert_eq!(a.edited_full, b.edited_full);
        assert_eq!(a.codes, b.codes);
        let meta = episode_meta(&ep, m.crop_shape()).unwrap();
        let streamed: Vec<StepOutput> = infer_stream_with_meta(&m, ep.frames.clone().into_iter().zip(meta), &d, 1.0)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        for (t, s) in streamed.iter().enumerate() {
            assert_eq!(s.inverted, a.inverted_full[t]);
            assert_eq!(s.edited, a.edited_full[t]);
            assert_eq!(s.code, a.codes[t]);
        }
    }

    #[test]
    fn stream_is_causal() {
        let m = mini_models(3);
        let ep = oracle(&m, 6, 4);
        let d = direction(&m, 2);
        let mut changed = ep.frames.clone();
        changed[3] = changed[3].map(|v| -v);
        let run = |frames: Vec<Frame>| -> Vec<(Frame, Frame)> {
            infer_stream(&m, frames, &d, 1.0).unwrap().collect::<Result<_>>().unwrap()
        };
        let (a, b) = (run(ep.frames.clone()), run(changed));
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3], b[3]);
    }

    #[test]
    fn without_recurrent_outputs_codes_equal_lfd_base_codes() {
        let mut m = mini_models(4);
        m.variant = Variant {
            compensation: false,
            noise: false,
            lfd: true,
        };
        let ep = oracle(&m, 7, 3);
        let r = rollout(&m, &ep, &direction(&m, 0), 0.0).unwrap();
        let base: Vec<LatentCode> = ep.frames.iter().map(|f| m.base_encoder.encode(f).unwrap()).collect();
        let shared = crate::generator::latent_frequency_disentangle(&base).unwrap();
        assert_eq!(r.codes, shared);
        assert!(r.noises.iter().all(|n| n.tensor().max_abs() == 0.0));
    }

    #[test]
    fn wrong_direction_shape_is_rejected() {
        let m = mini_models(1);
        let ep = oracle(&m, 2, 3);
        let d = SemanticDirection::zeros("bad", 3, 3);
        assert!(matches!(rollout(&m, &ep, &d, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn training_contracts() {
        let m = mini_models(1);
        let ep = oracle(&m, 2, 4);
        let p = PerceptualExtractor::new(0);
        let opts = TrainOptions {
            steps: 1,
            ..TrainOptions::default()
        };
        let mut no_vis = m.clone();
        no_vis.visnet = None;
        assert!(matches!(
            train(&mut no_vis, &[ep.clone()], &p, &opts, |_| {}),
            Err(Error::MissingPrerequisite(_))
        ));
        let mut unfrozen = m.clone();
        unfrozen.visnet = Some(VisibleNet::new(VisibleNetConfig::mini(0)).unwrap());
        assert!(matches!(train(&mut unfrozen, &[ep.clone()], &p, &opts, |_| {}), Err(Error::Contract(_))));
        let short = oracle(&m, 2, 2);
        let mut mm = m.clone();
        assert!(matches!(train(&mut mm, &[short], &p, &opts, |_| {}), Err(Error::TooShort { .. })));
    }

    #[test]
    fn training_step_leaves_frozen_models_untouched() {
        let mut m = mini_models(5);
        let before = m.clone();
        let ep = oracle(&m, 8, 4);
        let p = PerceptualExtractor::new(0);
        let opts = TrainOptions {
            steps: 2,
            lr: 1e-3,
            ..TrainOptions::default()
        };
        let logs = train(&mut m, &[ep], &p, &opts, |_| {}).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.l_ibfcc > 0.0 && l.l_tc >= 0.0));
        assert_eq!(m.generator.params(), before.generator.params());
        assert_eq!(m.base_encoder.params(), before.base_encoder.params());
        let (a, b) = (m.visnet.as_ref().unwrap(), before.visnet.as_ref().unwrap());
        assert_eq!((a.params(), a.buffers()), (b.params(), b.buffers()));
        assert_ne!(m.recurrent.params(), before.recurrent.params());
    }

    #[test]
    fn ablation_table() {
        let w = LossWeights::default();
        assert_eq!(Ablation::NoIbfcc.weights(w).lambda3, 0.0);
        assert_eq!(Ablation::NoTc.weights(w).lambda2, 0.0);
        assert!(!Ablation::NoCompensation.variant().compensation);
        assert!(!Ablation::NoNoise.variant().noise);
        assert!(!Ablation::NoLfd.variant().lfd);
        assert_eq!(Ablation::Full.variant(), Variant::default());
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.key()), Some(a));
        }
    }

    #[test]
    fn center_crop_maps_canvas_centre_to_crop_centre() {
        let t = center_crop(FrameShape::square(64), FrameShape::square(32));
        let (x, y) = t.apply(31.5, 31.5);
        assert!((x - 15.5).abs() < 1e-12 && (y - 15.5).abs() < 1e-12);
        assert_eq!(center_crop(FrameShape::square(8), FrameShape::square(8)), AffineTransform::identity());
    }
}
