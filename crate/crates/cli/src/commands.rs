use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rigid_core::checkpoint::{self, pack_models, Checkpoint};
use rigid_core::config::RunConfig;
use rigid_core::generator::{Generator, SemanticDirection};
use rigid_core::io::{self, EPISODE_MANIFEST, ROLLOUT_MANIFEST};
use rigid_core::losses::PerceptualExtractor;
use rigid_core::metrics::{fvd_like, MetricReport};
use rigid_core::pipeline::{rollout, Ablation, LossLog, Variant};
use rigid_core::synthdata::Episode;
use rigid_core::workflow::{self, AblationRun, Evaluator};
use rigid_core::Error;

pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub force: bool,
    pub out: Option<PathBuf>,
}

/// Maps the first library error in the chain to the documented exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidParameter(_) => 2,
                Error::MissingPrerequisite(_) => 3,
                Error::Shape(_)
                | Error::Format(_)
                | Error::InvalidTransform(_)
                | Error::NotSimilarity(_)
                | Error::TooShort { .. }
                | Error::Empty(_)
                | Error::DegenerateDirection(_) => 4,
                Error::NonFinite(_) => 5,
                Error::Contract(_) | Error::Io(_) => 1,
            };
        }
    }
    1
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let mut cfg = cfg.with_env_seed()?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn output_dir(g: &Global) -> Result<PathBuf> {
    let out = g
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))?;
    if out.exists() {
        let non_empty = std::fs::read_dir(&out)?.next().is_some();
        if non_empty && !g.force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())).into());
        }
    }
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    let dirs = io::list_episodes(dir)?;
    if dirs.is_empty() {
        return Err(Error::MissingPrerequisite(format!("no episodes under {}", dir.display())).into());
    }
    dirs.iter()
        .map(|d| Ok(io::read_episode(d).with_context(|| format!("reading {}", d.display()))?.0))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingPrerequisite(format!("checkpoint {} not found", path.display())).into());
    }
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

pub fn synth(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let out = output_dir(g)?;
    let gen = if cfg.data.oracle {
        Some(Generator::new(cfg.generator_config())?)
    } else {
        None
    };
    let hash = cfg.hash();
    for (i, (seed, ep)) in workflow::render_dataset(&cfg, gen.as_ref(), 0, cfg.data.episodes)?
        .into_iter()
        .enumerate()
    {
        io::write_episode(&out.join(format!("episode_{i:04}")), &ep, Some(seed), Some(&hash))?;
    }
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("wrote {} episodes to {}", cfg.data.episodes, out.display());
    Ok(())
}

pub fn train_visnet(g: &Global, data: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let episodes = load_dataset(data)?;
    let out = output_dir(g)?;
    let (net, curve) = workflow::fit_visnet(&cfg, &episodes)?;
    let mut csv = String::from("iteration,loss\n");
    for (it, l) in &curve {
        writeln!(csv, "{it},{l}")?;
    }
    std::fs::write(out.join("visnet_loss.csv"), csv)?;
    let ck = Checkpoint::new(cfg.to_toml(), pack_models(None, None, None, Some(&net)));
    ck.save(&out.join("visnet.rigid"))?;
    println!("visible net trained for {} iterations, saved to {}", curve.len(), out.join("visnet.rigid").display());
    Ok(())
}

pub fn train(g: &Global, data: &Path, visnet: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let visnet = match visnet {
        Some(p) => Some(checkpoint::load_visnet(&load_checkpoint(p)?, &cfg.visnet_config())?),
        None if cfg.losses.lambda3 > 0.0 => {
            return Err(Error::MissingPrerequisite(
                "training with lambda3 > 0 needs a frozen visible net; run train-visnet and pass --visnet".into(),
            )
            .into())
        }
        None => None,
    };
    let episodes = load_dataset(data)?;
    let out = output_dir(g)?;
    let gen = Generator::new(cfg.generator_config())?;
    let (base, _) = workflow::fit_base_encoder(&cfg, &gen)?;
    let mut models = workflow::assemble_models(&cfg, gen, base, visnet, Variant::default())?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("loss.csv"))?);
    writeln!(log, "{}", LossLog::CSV_HEADER)?;
    let mut write_err = None;
    let result = rigid_core::pipeline::train(
        &mut models,
        &episodes,
        &PerceptualExtractor::new(0),
        &cfg.train_options(),
        |l| {
            if let Err(e) = writeln!(log, "{}", l.csv_row()) {
                write_err.get_or_insert(e);
            }
        },
    );
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let logs = result?;

    let ck = Checkpoint::new(
        cfg.to_toml(),
        pack_models(
            Some(&models.generator),
            Some(&models.base_encoder),
            Some(&models.recurrent),
            models.visnet.as_ref(),
        ),
    );
    ck.save(&out.join("model.rigid"))?;
    let dirs = out.join("directions");
    std::fs::create_dir_all(&dirs)?;
    for d in workflow::attribute_directions(&cfg, &models.base_encoder, 16)? {
        io::save_direction(&dirs.join(format!("{}.rigid", d.name)), &d)?;
    }
    if let Some(last) = logs.last() {
        println!("trained {} steps, final total loss {:.5}", logs.len(), last.total);
    }
    println!("saved {}", out.join("model.rigid").display());
    Ok(())
}

/// Reads an episode directory, or a plain directory of PNG frames.
fn read_video(path: &Path) -> Result<Episode> {
    if path.join(EPISODE_MANIFEST).is_file() {
        return Ok(io::read_episode(path)?.0);
    }
    let frames = io::read_frame_dir(path).with_context(|| format!("reading frames from {}", path.display()))?;
    if frames.is_empty() {
        return Err(Error::Empty("input video").into());
    }
    Ok(Episode { frames, gt: None })
}

pub fn invert(g: &Global, ckpt: &Path, input: &Path, edit: Option<(&Path, f64)>) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let cfg = ck.run_config()?;
    let models = checkpoint::load_models(&ck, &cfg, Variant::default())?;
    let episode = read_video(input)?;
    let shape = episode.shape().ok_or(Error::Empty("input video"))?;
    let r = cfg.data.frame_resolution;
    if shape.height != r || shape.width != r {
        return Err(Error::Shape(format!(
            "input frames are {}x{}, the checkpoint was trained on {r}x{r}",
            shape.height, shape.width
        ))
        .into());
    }
    let gc = models.generator.config();
    let (direction, strength, name) = match edit {
        Some((p, s)) => {
            let d = io::load_direction(p, gc.latent_layers, gc.latent_dim)
                .with_context(|| format!("loading direction {}", p.display()))?;
            let name = d.name.clone();
            (d, s, Some(name))
        }
        None => (SemanticDirection::zeros("none", gc.latent_layers, gc.latent_dim), 0.0, None),
    };
    let out = output_dir(g)?;
    let res = rollout(&models, &episode, &direction, strength)?;
    let edited = edit.map(|_| res.edited_full.as_slice());
    io::write_rollout(
        &out,
        &res.inverted_full,
        edited,
        &res.codes,
        &res.noises,
        strength,
        name.as_deref(),
        &cfg.hash(),
    )?;
    println!("wrote {} frames to {}", res.inverted_full.len(), out.display());
    Ok(())
}

/// Inverted and edited frames of an output directory: a rollout, an
/// episode, or bare PNG frames (used for both).
fn read_output(path: &Path) -> Result<(Vec<rigid_core::imaging::Frame>, Vec<rigid_core::imaging::Frame>, Option<String>)> {
    if path.join(ROLLOUT_MANIFEST).is_file() {
        let m = io::read_rollout_manifest(path)?;
        let read = |names: &[String]| -> Result<Vec<_>> { names.iter().map(|n| Ok(io::read_frame(&path.join(n))?)).collect() };
        let inverted = read(&m.inverted)?;
        let edited = if m.edited.is_empty() { inverted.clone() } else { read(&m.edited)? };
        return Ok((inverted, edited, Some(m.config_hash)));
    }
    let ep = read_video(path)?;
    Ok((ep.frames.clone(), ep.frames, None))
}

fn is_video(path: &Path) -> bool {
    path.join(ROLLOUT_MANIFEST).is_file()
        || path.join(EPISODE_MANIFEST).is_file()
        || std::fs::read_dir(path)
            .map(|mut d| d.any(|e| e.is_ok_and(|e| e.path().extension().is_some_and(|x| x == "png"))))
            .unwrap_or(false)
}

pub fn eval(g: &Global, outputs: &Path, references: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let pairs: Vec<(String, PathBuf, PathBuf)> = if is_video(outputs) {
        let name = outputs.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "video".into());
        vec![(name, outputs.to_path_buf(), references.to_path_buf())]
    } else {
        let mut subs: Vec<PathBuf> = std::fs::read_dir(outputs)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && is_video(p))
            .collect();
        subs.sort();
        subs.into_iter()
            .map(|p| {
                let name = p.file_name().expect("directory entry").to_string_lossy().into_owned();
                let r = references.join(&name);
                (name, p, r)
            })
            .collect()
    };
    if pairs.is_empty() {
        return Err(Error::MissingPrerequisite(format!("no outputs under {}", outputs.display())).into());
    }
    let out = output_dir(g)?;
    let ev = Evaluator::default();
    let mut videos = Vec::new();
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    let mut hash = None;
    for (name, o, r) in &pairs {
        let (inverted, edited, h) = read_output(o)?;
        hash = hash.or(h);
        let reference = read_video(r).with_context(|| format!("reference for {name}"))?;
        videos.push(ev.video(name, &inverted, &edited, &reference)?);
        fa.push(ev.features(&edited)?);
        fb.push(ev.features(&reference.frames)?);
    }
    let fvd = if videos.len() >= 2 { Some(fvd_like(&fa, &fb)?) } else { None };
    let report = MetricReport::new(hash.unwrap_or_else(|| cfg.hash()), videos, fvd)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    let a = &report.aggregate;
    println!(
        "{} videos: mse_x100 {:.4}, warp error {:.5}, TL-ID {:.4}, TG-ID {:.4}",
        report.videos.len(),
        a.mse_x100,
        a.warp_error,
        a.tl_id,
        a.tg_id
    );
    Ok(())
}

fn ablation_table(runs: &[AblationRun], seeds: usize) -> String {
    let mut s = String::from("| variant | warp error | composition residual | mse_x100 |\n|---|---|---|---|\n");
    for a in Ablation::ALL {
        let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.ablation == a).collect();
        let mean = |f: fn(&AblationRun) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / seeds as f64;
        let _ = writeln!(
            s,
            "| {} | {:.5} | {:.5} | {:.4} |",
            a.label(),
            mean(|r| r.warp_error),
            mean(|r| r.composition_residual),
            mean(|r| r.mse_x100)
        );
    }
    s
}

pub fn ablate(g: &Global, data: &Path, visnet: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let net = checkpoint::load_visnet(&load_checkpoint(visnet)?, &cfg.visnet_config())?;
    let episodes = load_dataset(data)?;
    if episodes.len() < 2 {
        return Err(Error::TooShort {
            what: "ablation dataset",
            min: 2,
            got: episodes.len(),
        }
        .into());
    }
    let out = output_dir(g)?;
    let n_train = ((episodes.len() as f64) * 0.85).round().clamp(1.0, episodes.len() as f64 - 1.0) as usize;
    let (train_eps, rest) = episodes.split_at(n_train);
    let eval_eps = &rest[..rest.len().min(cfg.ablation.eval_episodes)];
    let gen = Generator::new(cfg.generator_config())?;
    let (base, _) = workflow::fit_base_encoder(&cfg, &gen)?;
    let mut runs = Vec::new();
    let mut csv = String::from("variant,seed,warp_error,composition_residual,mse_x100\n");
    for seed in 0..cfg.ablation.seeds as u64 {
        for a in Ablation::ALL {
            let r = workflow::run_ablation(&cfg, &gen, &base, &net, train_eps, eval_eps, a, seed)?;
            writeln!(csv, "{},{},{},{},{}", a.key(), seed, r.warp_error, r.composition_residual, r.mse_x100)?;
            eprintln!("{} seed {seed}: warp error {:.5}", a.label(), r.warp_error);
            runs.push(r);
        }
    }
    let table = ablation_table(&runs, cfg.ablation.seeds);
    std::fs::write(out.join("ablation.csv"), csv)?;
    std::fs::write(out.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(())
}
