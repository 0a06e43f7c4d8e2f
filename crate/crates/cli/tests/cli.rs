//! The `dehaze` binary end to end on tiny configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dehaze_core::dehazer::{Dehazer, Guide, TinyGuide};
use dehaze_core::encoder::{EncoderConfig, TinyEncoder};
use dehaze_core::ceda::PromptPair;
use dehaze_core::network::{ModelConfig, Network};
use dehaze_core::ParamStore;
use rand::SeedableRng;
use serde_json::Value;

const TINY: &str = r#"{
  "synth": {"crop": 16},
  "pretrain_encoder": {"steps": 5, "encoder": {"widths": [8, 8], "embed_dim": 8, "token_dim": 8, "text_hidden": 16}},
  "train_prompts": {"steps": 5},
  "train": {
    "steps": 3,
    "eval_every": 0,
    "model": {"widths": [4, 8], "blocks": [1, 1], "window": 2, "state_dim": 4, "patch": 4,
              "embed_dim": 8, "semantic_dim": 8, "prompt_len": 4}
  },
  "pipeline": {"n_train": 4, "n_val": 2}
}"#;

fn dehaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dehaze"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dehaze(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn synth_with_no_samples_writes_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    ok(&["synth", "--n", "0", "--out", s(&out)]);
    let m = manifest(&out);
    assert_eq!(m["command"], "synth");
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 0);
}

#[test]
fn synth_is_byte_reproducible_and_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 4, "synth": {"n": 5, "crop": 16}}"#).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["synth", "--config", s(&cfg), "--n", "2", "--out", s(dir)]);
    }
    let m = manifest(&a);
    assert_eq!(m["seed"], 4);
    let files = m["artifacts"].as_array().unwrap();
    assert_eq!(files.len(), 8);
    for f in files.iter().map(|f| f.as_str().unwrap()).chain(["manifest.json"]) {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let other = tmp.path().join("other");
    ok(&["synth", "--config", s(&cfg), "--n", "2", "--seed", "5", "--out", s(&other)]);
    assert_ne!(
        std::fs::read(a.join("000000.hazy.png")).unwrap(),
        std::fs::read(other.join("000000.hazy.png")).unwrap()
    );
}

/// Tiny-backend model whose output convolution is zero, so it returns its input.
fn identity_model(path: &Path) {
    let cfg = ModelConfig {
        widths: vec![4, 8],
        blocks: vec![1, 1],
        window: 2,
        state_dim: 4,
        patch: 4,
        embed_dim: 8,
        semantic_dim: 8,
        prompt_len: 4,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let net = Network::with_seed(&mut store, cfg, 0).unwrap();
    for id in [net.output.weight, net.output.bias] {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut enc_store = ParamStore::new();
    let ecfg = EncoderConfig {
        widths: vec![8, 8],
        embed_dim: 8,
        token_dim: 8,
        text_hidden: 16,
    };
    let encoder = TinyEncoder::new(&mut enc_store, ecfg, &mut rng).unwrap();
    enc_store.freeze_all();
    let mut prompt_store = ParamStore::new();
    let prompts = PromptPair::new(&mut prompt_store, &encoder, &enc_store, 4, &mut rng).unwrap();
    let guide = Guide::Tiny(TinyGuide {
        encoder,
        enc_store,
        prompts,
        prompt_store,
    });
    Dehazer { net, store, guide }.save(path).unwrap();
}

#[test]
fn eval_of_an_identity_model_on_identity_pairs_is_capped() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs");
    ok(&["synth", "--n", "2", "--crop", "16", "--beta-min", "0", "--beta-max", "0", "--out", s(&pairs)]);
    let model = tmp.path().join("identity.tmda");
    identity_model(&model);
    let out = tmp.path().join("eval");
    ok(&["eval", "--model", s(&model), "--input", s(&pairs), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["dehazed"]["psnr"], 100.0);
    assert_eq!(report["hazy"]["psnr"], 100.0);
    assert_eq!(report["count"], 2);
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("nope.tmda");
    assert_eq!(dehaze(&["eval", "--model", s(&missing), "--input", ".", "--out", s(&out)]).status.code(), Some(3));

    let bad_cfg = tmp.path().join("bad.json");
    std::fs::write(&bad_cfg, "{ not json").unwrap();
    assert_eq!(dehaze(&["synth", "--config", s(&bad_cfg), "--out", s(&out)]).status.code(), Some(2));
    std::fs::write(&bad_cfg, r#"{"synth": {"count": 1}}"#).unwrap();
    assert_eq!(dehaze(&["synth", "--config", s(&bad_cfg), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(dehaze(&["train", "--out", s(&out)]).status.code(), Some(2));

    let model = tmp.path().join("m.tmda");
    identity_model(&model);
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[4] = 99;
    std::fs::write(&model, bytes).unwrap();
    let pairs = tmp.path().join("pairs");
    ok(&["synth", "--n", "1", "--crop", "16", "--out", s(&pairs)]);
    assert_eq!(dehaze(&["eval", "--model", s(&model), "--input", s(&pairs), "--out", s(&out)]).status.code(), Some(5));
}

#[test]
fn diverging_training_reports_a_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = s(&cfg);
    let data = tmp.path().join("data");
    ok(&["synth", "--config", c, "--n", "2", "--out", s(&data)]);
    let enc = tmp.path().join("enc");
    ok(&["pretrain-encoder", "--config", c, "--data", s(&data), "--out", s(&enc)]);
    let pr = tmp.path().join("p");
    let enc_file = enc.join("encoder.tmda");
    ok(&["train-prompts", "--config", c, "--data", s(&data), "--encoder", s(&enc_file), "--prompt-len", "4", "--out", s(&pr)]);
    let out = tmp.path().join("model");
    let prompts = pr.join("prompts.tmda");
    let r = dehaze(&[
        "train", "--config", c, "--data", s(&data), "--encoder", s(&enc_file), "--prompts", s(&prompts),
        "--lr-max", "1e30", "--lr-min", "1e30", "--steps", "5", "--out", s(&out),
    ]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn every_stage_runs_on_a_tiny_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = s(&cfg);
    let out = tmp.path().join("run");
    ok(&["pipeline", "--config", c, "--out", s(&out)]);
    let m = manifest(&out);
    assert_eq!(m["command"], "pipeline");
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 7);
    assert!(m["summary"]["above_baseline"].is_boolean());
    assert_eq!(manifest(&out.join("prompts2"))["summary"]["stage"], 2);
    let log = std::fs::read_to_string(out.join("model/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,lr,loss,psnr_val,ssim_val\n"));

    let model = out.join("model/model.tmda");
    let val = out.join("data/val");
    let inf = tmp.path().join("infer");
    ok(&["infer", "--model", s(&model), "--input", s(&val), "--out", s(&inf)]);
    let names: Vec<String> = manifest(&inf)["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert_eq!(names.len(), 2);
    let first = dehaze_core::image::Image::load(&inf.join(&names[0])).unwrap();
    assert_eq!(first.dims(), (16, 16, 3));

    let single = tmp.path().join("single");
    let one = val.join(names[0].replace(".png", ".hazy.png"));
    ok(&["infer", "--model", s(&model), "--input", s(&one), "--out", s(&single)]);
    assert_eq!(std::fs::read(single.join(&names[0])).unwrap(), std::fs::read(inf.join(&names[0])).unwrap());

    let dens = tmp.path().join("density");
    ok(&["density", "--model", s(&model), "--input", s(&val), "--out", s(&dens)]);
    let maps = &manifest(&dens)["summary"]["maps"];
    assert_eq!((maps[0]["hp"].as_u64(), maps[0]["wp"].as_u64()), (Some(4), Some(4)));
    let raw = std::fs::read(dens.join(format!("{}.density.f32", maps[0]["stem"].as_str().unwrap()))).unwrap();
    assert_eq!(raw.len(), 16 * 4);
    let enc = out.join("encoder/encoder.tmda");
    let prompts = out.join("prompts2/prompts.tmda");
    let dens2 = tmp.path().join("density2");
    ok(&["density", "--encoder", s(&enc), "--prompts", s(&prompts), "--input", s(&val), "--out", s(&dens2)]);
    assert_eq!(manifest(&dens2)["summary"]["maps"][0]["hp"], 4);

    let att = tmp.path().join("attention");
    ok(&["analyze-attention", "--model", s(&model), "--input", s(&val), "--out", s(&att)]);
    let csv = std::fs::read_to_string(att.join("attention_profile.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("distance,mean_weight"));
    assert_eq!(csv.lines().count(), 3);
    assert!(att.join("attention_stage2.csv").exists());
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in [
        "synth", "pretrain-encoder", "train-prompts", "train", "infer", "eval", "density", "analyze-attention",
        "pipeline",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
