//! Subcommand implementations. Each writes its artifacts under `out` and
//! returns the manifest describing them.

use std::fs;
use std::path::{Path, PathBuf};

use dehaze_core::attention::DistanceProfile;
use dehaze_core::ceda::{
    evaluate_prompts, samples_from_triplets, train_prompts, Guidance, PromptPair, PromptTrainConfig,
};
use dehaze_core::dehazer::{
    aligned_input, load_encoder, load_prompts, save_encoder, save_prompts, Dehazer, Guide, ImportedConfig,
    ImportedGuide, TinyGuide,
};
use dehaze_core::encoder::tmeb::EmbeddingFile;
use dehaze_core::encoder::{labeled_from_triplets, pretrain, retrieval_accuracy, PretrainConfig, TinyEncoder};
use dehaze_core::haze::{
    list_triplets, load_image_dir, load_triplet, save_triplet, ClearSource, DatasetBuilder, DatasetConfig,
    DepthKind, HazeTriplet,
};
use dehaze_core::image::{write_f32_raw, Image};
use dehaze_core::network::Network;
use dehaze_core::training::loss::FeatureNet;
use dehaze_core::training::metrics::{entropy, Quality};
use dehaze_core::training::trainer::{self, hazy_baseline, prepare, CsvLog, LogRow, TrainConfig};
use dehaze_core::{Error, ParamStore, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::{
    required, DensitySettings, ModelSettings, PipelineSettings, PretrainSettings, PromptSettings, SynthSettings,
    TrainSettings,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub summary: Value,
}

impl Manifest {
    fn new(command: &str, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            seed,
            artifacts: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn load_triplets(dir: &Path) -> Result<(Vec<String>, Vec<HazeTriplet>)> {
    let stems = list_triplets(dir)?;
    if stems.is_empty() {
        return Err(Error::NotFound(format!("no triplets in {}", dir.display())));
    }
    let ts = stems.iter().map(|s| load_triplet(dir, s)).collect::<Result<_>>()?;
    Ok((stems, ts))
}

fn is_image(p: &Path) -> bool {
    p.extension().is_some_and(|e| {
        let e = e.to_string_lossy().to_ascii_lowercase();
        e == "png" || e == "ppm"
    })
}

/// Images to process with their stems: a single file, the hazy halves of a
/// triplet directory, or every image in a directory.
fn input_images(path: &Path) -> Result<Vec<(String, Image)>> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let stem_of = |p: &Path| {
        let name = p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        match name.strip_suffix(".hazy.png") {
            Some(s) => s.to_string(),
            None => p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default(),
        }
    };
    if path.is_file() {
        return Ok(vec![(stem_of(path), Image::load(path)?)]);
    }
    let triplets = list_triplets(path)?;
    if !triplets.is_empty() {
        return triplets
            .into_iter()
            .map(|s| {
                let img = Image::load(&path.join(format!("{s}.hazy.png")))?;
                Ok((s, img))
            })
            .collect();
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NotFound(format!("no images in {}", path.display())));
    }
    files.iter().map(|p| Ok((stem_of(p), Image::load(p)?))).collect()
}

fn relative(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn synth(s: &SynthSettings, out: &Path, seed: u64) -> Result<Manifest> {
    let source = match &s.clear_dir {
        Some(dir) => ClearSource::Images(load_image_dir(dir)?),
        None => ClearSource::Procedural,
    };
    let cfg = DatasetConfig {
        crop: s.crop,
        beta_range: (s.beta_min, s.beta_max),
        airlight_range: (s.airlight_min, s.airlight_max),
        depth_kinds: DepthKind::ALL.to_vec(),
        flip: s.flip,
    };
    let ds = DatasetBuilder::new(source, cfg, seed)?;
    fs::create_dir_all(out)?;
    let mut m = Manifest::new("synth", seed);
    let mut samples = Vec::new();
    for i in 0..s.n as u64 {
        let index = s.start + i;
        let stem = format!("{index:06}");
        let sample = ds.sample(index);
        save_triplet(out, &stem, &sample.triplet)?;
        for ext in ["hazy.png", "clear.png", "density.png", "density.f32"] {
            m.artifacts.push(format!("{stem}.{ext}"));
        }
        samples.push(json!({
            "stem": stem,
            "beta": sample.beta,
            "airlight": sample.airlight,
            "depth": sample.depth_kind,
        }));
    }
    m.summary = json!({ "count": s.n, "samples": samples });
    Ok(m)
}

pub fn pretrain_encoder(s: &PretrainSettings, out: &Path, seed: u64) -> Result<Manifest> {
    let (_, ts) = load_triplets(required(&s.data, "data")?)?;
    let data = labeled_from_triplets(&ts);
    let mut store = ParamStore::new();
    let enc = TinyEncoder::new(&mut store, s.encoder.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let cfg = PretrainConfig {
        steps: s.steps,
        per_class: s.per_class,
        lr: s.lr,
        seed,
    };
    let report = pretrain(&enc, &mut store, &data, &cfg)?;
    let retrieval = retrieval_accuracy(&enc, &store, &data)?;
    fs::create_dir_all(out)?;
    save_encoder(&out.join("encoder.tmda"), &enc, &store)?;
    let mut m = Manifest::new("pretrain-encoder", seed);
    m.artifacts = vec!["encoder.tmda".into(), "encoder.json".into()];
    m.summary = json!({
        "steps": report.losses.len(),
        "final_loss": report.losses.last(),
        "train_retrieval_accuracy": retrieval,
    });
    Ok(m)
}

pub fn train_prompts_cmd(s: &PromptSettings, out: &Path, seed: u64) -> Result<Manifest> {
    let (_, ts) = load_triplets(required(&s.data, "data")?)?;
    let (enc, es) = load_encoder(required(&s.encoder, "encoder")?)?;
    let samples = samples_from_triplets(&enc, &es, &ts)?;
    let (prompts, mut ps) = match &s.init {
        Some(p) => {
            let (pp, mut store) = load_prompts(p)?;
            store.iter_mut().for_each(|(_, p)| p.frozen = false);
            (pp, store)
        }
        None => {
            let mut store = ParamStore::new();
            let pp = PromptPair::new(&mut store, &enc, &es, s.prompt_len, &mut ChaCha8Rng::seed_from_u64(seed))?;
            (pp, store)
        }
    };
    let cfg = PromptTrainConfig {
        steps: s.steps,
        per_class: s.per_class,
        lr: s.lr,
        alpha1: s.alpha1,
        alpha2: s.alpha2,
        regression: s.regression,
        seed,
    };
    let report = train_prompts(&enc, &es, &prompts, &mut ps, &samples, s.stage == 2, &cfg)?;
    ps.freeze_all();
    let eval = evaluate_prompts(&enc, &es, &prompts, &ps, &samples)?;
    fs::create_dir_all(out)?;
    save_prompts(&out.join("prompts.tmda"), &ps)?;
    let mut m = Manifest::new("train-prompts", seed);
    m.artifacts = vec!["prompts.tmda".into()];
    m.summary = json!({
        "stage": s.stage,
        "steps": report.losses.len(),
        "final_loss": report.losses.last(),
        "train_accuracy": eval.accuracy,
        "train_density_mse": eval.density_mse,
    });
    Ok(m)
}

fn load_embeddings(path: &Option<PathBuf>) -> Result<Option<EmbeddingFile>> {
    path.as_deref().map(EmbeddingFile::load).transpose()
}

fn tiny_guide(encoder: &Option<PathBuf>, prompts: &Option<PathBuf>) -> Result<TinyGuide> {
    let (encoder, enc_store) = load_encoder(required(encoder, "encoder")?)?;
    let (prompts, prompt_store) = load_prompts(required(prompts, "prompts")?)?;
    Ok(TinyGuide {
        encoder,
        enc_store,
        prompts,
        prompt_store,
    })
}

fn quality_json(q: &Quality) -> Value {
    json!({ "psnr": q.psnr, "ssim": q.ssim })
}

pub fn train(s: &TrainSettings, out: &Path, seed: u64) -> Result<Manifest> {
    let (stems, ts) = load_triplets(required(&s.data, "data")?)?;
    let (guide, features_enc) = match load_embeddings(&s.embeddings)? {
        Some(file) => {
            let enc = s.encoder.as_deref().map(load_encoder).transpose()?;
            let guide = Guide::Imported(ImportedGuide {
                file,
                cfg: ImportedConfig::default(),
            });
            (guide, enc)
        }
        None => (Guide::Tiny(tiny_guide(&s.encoder, &s.prompts)?), None),
    };
    let features = match (&guide, &features_enc) {
        (Guide::Tiny(t), _) => Some(FeatureNet {
            encoder: &t.encoder,
            store: &t.enc_store,
        }),
        (_, Some((e, st))) => Some(FeatureNet { encoder: e, store: st }),
        _ => None,
    };
    if features.is_none() && s.loss.perceptual_weight > 0.0 && !s.loss.perceptual_stages.is_empty() {
        return Err(Error::Config(
            "the perceptual term needs an encoder; pass one or set loss.perceptual_weight to 0".into(),
        ));
    }
    let mut store = ParamStore::new();
    let net = Network::with_seed(&mut store, s.model.clone(), seed)?;
    let align = s.model.alignment();
    let train_s = prepare(&ts, &stems, &guide, align)?;
    let val_s = match &s.val {
        Some(dir) => {
            let (vs, vt) = load_triplets(dir)?;
            prepare(&vt, &vs, &guide, align)?
        }
        None => Vec::new(),
    };
    let cfg = TrainConfig {
        steps: s.steps,
        batch: s.batch,
        lr_max: s.lr_max,
        lr_min: s.lr_min,
        cycles: s.cycles,
        loss: s.loss.clone(),
        eval_every: s.eval_every,
        target_psnr: s.target_psnr,
        seed,
    };
    fs::create_dir_all(out)?;
    let log_file = std::io::BufWriter::new(fs::File::create(out.join("train_log.csv"))?);
    let mut log = CsvLog::new(log_file)?;
    let report = trainer::train(&net, &mut store, &train_s, &val_s, &cfg, features, |r: &LogRow| log.row(r))?;
    use std::io::Write;
    log.into_inner().flush()?;
    drop(features_enc);
    let dehazer = Dehazer { net, store, guide };
    dehazer.save(&out.join("model.tmda"))?;
    let mut m = Manifest::new("train", seed);
    m.artifacts = vec!["model.tmda".into(), "model.json".into(), "train_log.csv".into()];
    let val_hazy = if val_s.is_empty() { None } else { Some(quality_json(&hazy_baseline(&val_s)?)) };
    m.summary = json!({
        "steps": report.losses.len(),
        "final_loss": report.losses.last(),
        "val": report.evals.last().map(|(step, q)| json!({ "step": step, "psnr": q.psnr, "ssim": q.ssim })),
        "val_hazy": val_hazy,
        "parameters": dehazer.store.num_scalars(),
    });
    Ok(m)
}

fn load_model(model: &Option<PathBuf>, embeddings: &Option<PathBuf>) -> Result<Dehazer> {
    Dehazer::load(required(model, "model")?, load_embeddings(embeddings)?)
}

pub fn infer(s: &ModelSettings, out: &Path, seed: u64) -> Result<Manifest> {
    let d = load_model(&s.model, &s.embeddings)?;
    let inputs = input_images(required(&s.input, "input")?)?;
    fs::create_dir_all(out)?;
    let mut m = Manifest::new("infer", seed);
    for (stem, img) in &inputs {
        let name = format!("{stem}.png");
        d.dehaze(img, stem)?.save(&out.join(&name))?;
        m.artifacts.push(name);
    }
    m.summary = json!({ "count": inputs.len() });
    Ok(m)
}

#[derive(Clone, Debug, Serialize)]
struct ImageReport {
    stem: String,
    psnr: f64,
    ssim: f64,
    entropy: f64,
    hazy_psnr: f64,
    hazy_ssim: f64,
}

pub fn eval(s: &ModelSettings, out: &Path, seed: u64) -> Result<Manifest> {
    let d = load_model(&s.model, &s.embeddings)?;
    let (stems, ts) = load_triplets(required(&s.input, "input")?)?;
    let mut per = Vec::new();
    for (stem, t) in stems.iter().zip(&ts) {
        let y = d.dehaze(&t.hazy, stem)?;
        let q = Quality::of(&y, &t.clear)?;
        let h = Quality::of(&t.hazy, &t.clear)?;
        per.push(ImageReport {
            stem: stem.clone(),
            psnr: q.psnr,
            ssim: q.ssim,
            entropy: entropy(&y),
            hazy_psnr: h.psnr,
            hazy_ssim: h.ssim,
        });
    }
    let n = per.len() as f64;
    let mean = |f: &dyn Fn(&ImageReport) -> f64| per.iter().map(f).sum::<f64>() / n;
    let hazy_entropy = ts.iter().map(|t| entropy(&t.hazy)).sum::<f64>() / n;
    let report = json!({
        "count": per.len(),
        "dehazed": { "psnr": mean(&|r| r.psnr), "ssim": mean(&|r| r.ssim), "entropy": mean(&|r| r.entropy) },
        "hazy": { "psnr": mean(&|r| r.hazy_psnr), "ssim": mean(&|r| r.hazy_ssim), "entropy": hazy_entropy },
        "images": per,
    });
    fs::create_dir_all(out)?;
    write_json(&out.join("eval.json"), &report)?;
    let mut m = Manifest::new("eval", seed);
    m.artifacts = vec!["eval.json".into()];
    m.summary = json!({ "dehazed": report["dehazed"], "hazy": report["hazy"] });
    Ok(m)
}

/// Nearest-neighbor upsampling of a `hp × wp` map covering the aligned
/// input, cropped to the image size.
fn density_image(values: &[f64], hp: usize, wp: usize, patch: usize, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, 1, |y, x, _| values[(y / patch).min(hp - 1) * wp + (x / patch).min(wp - 1)])
}

pub fn density(s: &DensitySettings, out: &Path, seed: u64) -> Result<Manifest> {
    let (tiny, align) = match &s.model {
        Some(path) => {
            let d = Dehazer::load(path, None)?;
            let align = d.cfg().alignment();
            match d.guide {
                Guide::Tiny(t) => (t, align),
                Guide::Imported(_) => {
                    return Err(Error::Config("density maps need a tiny-backend model".into()))
                }
            }
        }
        None => {
            let t = tiny_guide(&s.encoder, &s.prompts)?;
            let a = t.encoder.patch();
            (t, a)
        }
    };
    let patch = tiny.encoder.patch();
    let inputs = input_images(required(&s.input, "input")?)?;
    fs::create_dir_all(out)?;
    let mut m = Manifest::new("density", seed);
    let mut maps = Vec::new();
    for (stem, img) in &inputs {
        let x = aligned_input(img, align);
        let Guidance { density, .. } = tiny.guidance(&x)?;
        let (hp, wp) = (density.shape()[1], density.shape()[2]);
        let values = density.to_f64_vec();
        let png = format!("{stem}.density.png");
        let raw = format!("{stem}.density.f32");
        density_image(&values, hp, wp, patch, img.height(), img.width()).save(&out.join(&png))?;
        write_f32_raw(&out.join(&raw), &values)?;
        m.artifacts.push(png);
        m.artifacts.push(raw);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        maps.push(json!({ "stem": stem, "hp": hp, "wp": wp, "mean": mean }));
    }
    m.summary = json!({ "maps": maps });
    Ok(m)
}

pub fn analyze_attention(s: &ModelSettings, out: &Path, seed: u64) -> Result<Manifest> {
    let d = load_model(&s.model, &s.embeddings)?;
    let inputs = input_images(required(&s.input, "input")?)?;
    let window = d.cfg().window;
    let mut all = DistanceProfile::default();
    let mut stages: Vec<DistanceProfile> = Vec::new();
    for (stem, img) in &inputs {
        for (stage, _, w) in d.attention_maps(img, stem)? {
            let values = w.to_f64_vec();
            all.add(&values, window)?;
            if stages.len() <= stage {
                stages.resize_with(stage + 1, DistanceProfile::default);
            }
            stages[stage].add(&values, window)?;
        }
    }
    fs::create_dir_all(out)?;
    let mut m = Manifest::new("analyze-attention", seed);
    all.write_csv(&out.join("attention_profile.csv"))?;
    m.artifacts.push("attention_profile.csv".into());
    for (i, p) in stages.iter().enumerate() {
        let name = format!("attention_stage{i}.csv");
        p.write_csv(&out.join(&name))?;
        m.artifacts.push(name);
    }
    let far = window / 2;
    m.summary = json!({
        "images": inputs.len(),
        "window": window,
        "profile": all.bins()?,
        "tail_mass_from": far,
        "tail_mass": all.tail_mass(far)?,
    });
    Ok(m)
}

/// Configured stage settings for one pipeline run.
pub struct PipelinePlan {
    pub pipeline: PipelineSettings,
    pub synth: SynthSettings,
    pub pretrain: PretrainSettings,
    pub prompts: PromptSettings,
    pub train: TrainSettings,
}

/// Offset of the validation samples in the generator's index space.
pub const VAL_START: u64 = 1 << 32;

pub fn pipeline(plan: &PipelinePlan, out: &Path, seed: u64) -> Result<Manifest> {
    let stage = |name: &str, m: Result<Manifest>| -> Result<Manifest> {
        let m = m?;
        eprintln!("[pipeline] {name} done");
        Ok(m)
    };
    let run = |dir: &Path, m: Result<Manifest>, name: &str| -> Result<Manifest> {
        let m = stage(name, m)?;
        m.write(dir)?;
        Ok(m)
    };
    let train_dir = out.join("data/train");
    let val_dir = out.join("data/val");
    let synth_train = SynthSettings {
        n: plan.pipeline.n_train,
        start: 0,
        ..plan.synth.clone()
    };
    run(&train_dir, synth(&synth_train, &train_dir, seed), "synth train")?;
    let synth_val = SynthSettings {
        n: plan.pipeline.n_val,
        start: VAL_START,
        ..plan.synth.clone()
    };
    run(&val_dir, synth(&synth_val, &val_dir, seed), "synth val")?;

    let enc_dir = out.join("encoder");
    let pre = PretrainSettings {
        data: Some(train_dir.clone()),
        ..plan.pretrain.clone()
    };
    run(&enc_dir, pretrain_encoder(&pre, &enc_dir, seed), "pretrain-encoder")?;
    let encoder = Some(enc_dir.join("encoder.tmda"));

    let p1_dir = out.join("prompts1");
    let p1 = PromptSettings {
        data: Some(train_dir.clone()),
        encoder: encoder.clone(),
        stage: 1,
        init: None,
        prompt_len: plan.train.model.prompt_len,
        ..plan.prompts.clone()
    };
    run(&p1_dir, train_prompts_cmd(&p1, &p1_dir, seed), "train-prompts stage 1")?;
    let p2_dir = out.join("prompts2");
    let p2 = PromptSettings {
        stage: 2,
        init: Some(p1_dir.join("prompts.tmda")),
        ..p1
    };
    run(&p2_dir, train_prompts_cmd(&p2, &p2_dir, seed), "train-prompts stage 2")?;

    let model_dir = out.join("model");
    let tr = TrainSettings {
        data: Some(train_dir.clone()),
        val: Some(val_dir.clone()),
        encoder,
        prompts: Some(p2_dir.join("prompts.tmda")),
        embeddings: None,
        ..plan.train.clone()
    };
    run(&model_dir, train(&tr, &model_dir, seed), "train")?;

    let eval_dir = out.join("eval");
    let ev = ModelSettings {
        model: Some(model_dir.join("model.tmda")),
        embeddings: None,
        input: Some(val_dir.clone()),
    };
    let em = run(&eval_dir, eval(&ev, &eval_dir, seed), "eval")?;

    let mut m = Manifest::new("pipeline", seed);
    for dir in [&train_dir, &val_dir, &enc_dir, &p1_dir, &p2_dir, &model_dir, &eval_dir] {
        m.artifacts.push(relative(out, &dir.join(MANIFEST)));
    }
    let dehazed = em.summary["dehazed"]["psnr"].as_f64().unwrap_or(f64::NAN);
    let hazy = em.summary["hazy"]["psnr"].as_f64().unwrap_or(f64::NAN);
    m.summary = json!({
        "n_train": plan.pipeline.n_train,
        "n_val": plan.pipeline.n_val,
        "val_psnr": dehazed,
        "val_hazy_psnr": hazy,
        "above_baseline": dehazed > hazy,
    });
    Ok(m)
}
