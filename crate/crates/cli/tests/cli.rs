use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MINI: &str = r#"
seed = 3

[generator]
resolution = 8
latent_layers = 8
latent_dim = 6
split_index = 5
noise_resolution = 4
channels = 4

[data]
episodes = 3
frames = 6
frame_resolution = 8

[base_encoder]
iterations = 4
samples = 8

[visnet]
iterations = 4
channels = [4, 6, 8]

[train]
steps = 3
head_init_std = 0.01

[ablation]
seeds = 1
eval_episodes = 1
"#;

fn rigid(args: &[&str]) -> Output {
    rigid_env(args, None)
}

fn rigid_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rigid"));
    cmd.args(args).env_remove("RIGID_SEED");
    if let Some(s) = seed_env {
        cmd.env("RIGID_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_one_episode_with_flow_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &MINI.replace("episodes = 3", "episodes = 1"));
    let out = tmp.path().join("data");
    ok(&rigid(&["synth", "--config", &cfg, "--out", s(&out)]));
    let ep = out.join("episode_0000");
    let names: Vec<String> = std::fs::read_dir(&ep)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let count = |prefix: &str| names.iter().filter(|n| n.starts_with(prefix)).count();
    assert_eq!(count("frame_"), 6);
    assert_eq!(count("flow_prev_"), 5);
    assert_eq!(count("flow_next_"), 5);
    assert_eq!(count("manifest.txt"), 1);
}

#[test]
fn synth_is_deterministic_and_guards_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINI);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&rigid(&["synth", "--config", &cfg, "--out", s(&a)]));
    ok(&rigid(&["synth", "--config", &cfg, "--out", s(&b)]));
    assert_eq!(files(&a), files(&b));

    let again = rigid(&["synth", "--config", &cfg, "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&rigid(&["synth", "--config", &cfg, "--out", s(&a), "--force"]));
}

#[test]
fn seed_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINI);
    let run = |name: &str, extra: &[&str], env: Option<&str>| {
        let out = tmp.path().join(name);
        let mut args = vec!["synth", "--config", &cfg, "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&rigid_env(&args, env));
        files(&out)
    };
    let base = run("base", &[], None);
    let env = run("env", &[], Some("99"));
    let flag = run("flag", &["--seed", "99"], Some("5"));
    assert_ne!(base, env);
    assert_eq!(env, flag);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nstepz = 3\n");
    let out = rigid(&["synth", "--config", &cfg, "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn train_without_visnet_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINI);
    let data = tmp.path().join("data");
    ok(&rigid(&["synth", "--config", &cfg, "--out", s(&data)]));
    let out = rigid(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = rigid(&[
        "train",
        "--config",
        &cfg,
        "--data",
        s(&data),
        "--visnet",
        s(&tmp.path().join("missing.rigid")),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn diverging_training_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &MINI.replace("[train]\n", "[train]\nlr = 1e300\n").replace("seed = 3", "seed = 3\n[losses]\nlambda3 = 0.0"),
    );
    let data = tmp.path().join("data");
    ok(&rigid(&["synth", "--config", &cfg, "--out", s(&data)]));
    let out = rigid(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

fn validate_report(path: &Path) -> serde_json::Value {
    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../schema/report.schema.json")).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    report
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t, MINI);
    let data = t.join("data");
    ok(&rigid(&["synth", "--config", &cfg, "--out", s(&data)]));
    ok(&rigid(&["train-visnet", "--config", &cfg, "--data", s(&data), "--out", s(&t.join("vis"))]));
    let visnet = t.join("vis/visnet.rigid");
    let model = t.join("model");
    ok(&rigid(&[
        "train",
        "--config",
        &cfg,
        "--data",
        s(&data),
        "--visnet",
        s(&visnet),
        "--out",
        s(&model),
    ]));
    let loss = std::fs::read_to_string(model.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,l_rec,l_tc,l_ibfcc,total"));
    assert_eq!(loss.lines().count(), 4);
    let ckpt = model.join("model.rigid");
    let smile = model.join("directions/smile.rigid");
    assert!(smile.is_file());

    let ep = data.join("episode_0000");
    let inv = t.join("inv");
    ok(&rigid(&["invert", "--checkpoint", s(&ckpt), "--input", s(&ep), "--out", s(&inv)]));
    let edit0 = t.join("edit0");
    ok(&rigid(&[
        "edit",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&ep),
        "--direction",
        s(&smile),
        "--strength",
        "0",
        "--out",
        s(&edit0),
    ]));
    for i in 0..6 {
        let a = std::fs::read(inv.join(format!("inverted/frame_{i:03}.png"))).unwrap();
        let b = std::fs::read(edit0.join(format!("edited/frame_{i:03}.png"))).unwrap();
        assert_eq!(a, b, "frame {i}");
    }
    let edit = t.join("edit");
    ok(&rigid(&[
        "edit",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&ep),
        "--direction",
        s(&smile),
        "--strength",
        "-1.5",
        "--out",
        s(&edit),
    ]));

    // The manifest carries the hash of the checkpoint's configuration.
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(inv.join("manifest.json")).unwrap()).unwrap();
    let snapshot = rigid_core::checkpoint::Checkpoint::load(&ckpt).unwrap().config;
    let ck_hash = rigid_core::config::RunConfig::from_toml(&snapshot).unwrap().hash();
    assert_eq!(manifest["config_hash"], ck_hash.as_str());

    // Wrong-shape direction.
    let bad = t.join("bad.rigid");
    let d = rigid_core::generator::SemanticDirection::zeros("bad", 3, 2);
    rigid_core::io::save_direction(&bad, &d).unwrap();
    let out = rigid(&[
        "edit",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&ep),
        "--direction",
        s(&bad),
        "--strength",
        "1",
        "--out",
        s(&t.join("bad_out")),
    ]);
    assert_eq!(out.status.code(), Some(4));

    // Resolution mismatch with the checkpoint.
    let big = t.join("big");
    std::fs::create_dir_all(&big).unwrap();
    let frame = rigid_core::imaging::Frame::constant(rigid_core::imaging::FrameShape::square(16), 0.1);
    rigid_core::io::write_frame(&big.join("f0.png"), &frame).unwrap();
    let out = rigid(&["invert", "--checkpoint", s(&ckpt), "--input", s(&big), "--out", s(&t.join("big_out"))]);
    assert_eq!(out.status.code(), Some(4));

    // Evaluation: a video against itself, then the edit against its source.
    let self_eval = t.join("self_eval");
    ok(&rigid(&["eval", "--outputs", s(&ep), "--references", s(&ep), "--out", s(&self_eval)]));
    let report = validate_report(&self_eval.join("report.json"));
    assert_eq!(report["videos"][0]["mse_x100"], 0.0);
    assert_eq!(report["videos"][0]["tl_id"], 1.0);
    assert_eq!(report["videos"][0]["tg_id"], 1.0);
    let edit_eval = t.join("edit_eval");
    ok(&rigid(&["eval", "--outputs", s(&edit), "--references", s(&ep), "--out", s(&edit_eval)]));
    let report = validate_report(&edit_eval.join("report.json"));
    assert_eq!(report["config_hash"], ck_hash.as_str());

    // Several videos, matched by directory name, give a Fréchet score.
    let outs = t.join("outs");
    for name in ["episode_0000", "episode_0001"] {
        ok(&rigid(&[
            "invert",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(&data.join(name)),
            "--out",
            s(&outs.join(name)),
        ]));
    }
    let multi = t.join("multi");
    ok(&rigid(&["eval", "--outputs", s(&outs), "--references", s(&data), "--out", s(&multi)]));
    let report = validate_report(&multi.join("report.json"));
    assert_eq!(report["videos"].as_array().unwrap().len(), 2);
    assert!(report["aggregate"]["fvd_like"].is_number());

    // Ablation table.
    let abl = t.join("ablation");
    ok(&rigid(&[
        "ablate",
        "--config",
        &cfg,
        "--data",
        s(&data),
        "--visnet",
        s(&visnet),
        "--out",
        s(&abl),
    ]));
    let table = std::fs::read_to_string(abl.join("ablation.md")).unwrap();
    for label in ["RIGID", "w/o TCC", "w/o NM", "w/o LFD", "w/o L_ibfcc", "w/o L_tc"] {
        assert!(table.contains(&format!("| {label} |")), "{table}");
    }
    assert_eq!(std::fs::read_to_string(abl.join("ablation.csv")).unwrap().lines().count(), 7);
}
