//! A trained model bundle: network, guidance source and checkpoint files.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint, Graph, ParamStore, Tensor};
use crate::ceda::{guidance, guidance_from_embeddings, Guidance, PromptPair};
use crate::encoder::tmeb::EmbeddingFile;
use crate::encoder::{EncoderConfig, TinyEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{aligned, crop, pad_tensor, ModelConfig, Network};

pub const DEFAULT_IMPORTED_SCALE: f64 = 100.0;

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

/// Saves the encoder weights with an `EncoderConfig` sidecar.
pub fn save_encoder(path: &Path, enc: &TinyEncoder, store: &ParamStore<f32>) -> Result<()> {
    checkpoint::save(path, &store.named_tensors())?;
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&enc.cfg)?)?;
    Ok(())
}

/// Loads an encoder; the returned store is frozen.
pub fn load_encoder(path: &Path) -> Result<(TinyEncoder, ParamStore<f32>)> {
    let cfg: EncoderConfig = read_json(&sidecar(path))?;
    let tensors = checkpoint::load::<f32>(path)?;
    encoder_from_tensors(cfg, &tensors)
}

fn encoder_from_tensors(
    cfg: EncoderConfig,
    tensors: &[(String, Tensor<f32>)],
) -> Result<(TinyEncoder, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = TinyEncoder::new(&mut store, cfg, &mut rng)?;
    let own: Vec<_> = tensors
        .iter()
        .filter(|(n, _)| n.starts_with(TinyEncoder::PREFIX))
        .cloned()
        .collect();
    store.load_named(&own)?;
    store.freeze_all();
    Ok((enc, store))
}

pub fn save_prompts(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    checkpoint::save(path, &store.named_tensors())
}

/// Loads learned prompts; the returned store is frozen.
pub fn load_prompts(path: &Path) -> Result<(PromptPair, ParamStore<f32>)> {
    let tensors = checkpoint::load::<f32>(path)?;
    prompts_from_tensors(&tensors)
}

fn prompts_from_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<(PromptPair, ParamStore<f32>)> {
    let (_, t) = tensors
        .iter()
        .find(|(n, _)| n == PromptPair::NAME)
        .ok_or_else(|| Error::NotFound(format!("tensor {} in checkpoint", PromptPair::NAME)))?;
    let mut store = ParamStore::new();
    store.insert(PromptPair::NAME, t.clone())?;
    store.freeze_all();
    Ok((PromptPair::bind(&store)?, store))
}

/// Frozen encoder plus learned prompts.
pub struct TinyGuide {
    pub encoder: TinyEncoder,
    pub enc_store: ParamStore<f32>,
    pub prompts: PromptPair,
    pub prompt_store: ParamStore<f32>,
}

impl TinyGuide {
    pub fn guidance(&self, x: &Tensor<f32>) -> Result<Guidance<f32>> {
        guidance(&self.encoder, &self.enc_store, &self.prompts, &self.prompt_store, x.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportedConfig {
    pub haze_prompt: String,
    pub clear_prompt: String,
    pub logit_scale: f64,
}

impl Default for ImportedConfig {
    fn default() -> Self {
        ImportedConfig {
            haze_prompt: "hazy image".into(),
            clear_prompt: "clear image".into(),
            logit_scale: DEFAULT_IMPORTED_SCALE,
        }
    }
}

/// Precomputed embeddings looked up by image stem.
pub struct ImportedGuide {
    pub file: EmbeddingFile,
    pub cfg: ImportedConfig,
}

impl ImportedGuide {
    pub fn guidance(&self, stem: &str) -> Result<Guidance<f32>> {
        let e = self.file.grid(stem)?;
        let haze = self.file.prompt(&self.cfg.haze_prompt)?;
        let clear = self.file.prompt(&self.cfg.clear_prompt)?;
        guidance_from_embeddings(&e.data, e.hp, e.wp, haze, clear, self.cfg.logit_scale)
    }
}

pub enum Guide {
    Tiny(TinyGuide),
    Imported(ImportedGuide),
}

impl Guide {
    /// `x` is the aligned network input `[1, h, w, 3]`; `stem` names the
    /// image for imported embeddings.
    pub fn guidance(&self, x: &Tensor<f32>, stem: &str) -> Result<Guidance<f32>> {
        match self {
            Guide::Tiny(t) => t.guidance(x),
            Guide::Imported(i) => i.guidance(stem),
        }
    }

    pub fn tiny(&self) -> Option<&TinyGuide> {
        match self {
            Guide::Tiny(t) => Some(t),
            Guide::Imported(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Tiny,
    Imported,
}

/// JSON sidecar of a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub backend: Backend,
    /// Present when the checkpoint carries encoder and prompt tensors.
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub imported: Option<ImportedConfig>,
}

/// Edge-pads an image to the network alignment.
pub fn aligned_input(img: &Image, alignment: usize) -> Tensor<f32> {
    let t = img.to_tensor::<f32>();
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (aligned(h, alignment), aligned(w, alignment));
    if (ph, pw) == (h, w) {
        return t;
    }
    pad_tensor(&t, ph, pw).expect("padding grows the image")
}

pub struct Dehazer {
    pub net: Network,
    pub store: ParamStore<f32>,
    pub guide: Guide,
}

impl Dehazer {
    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Network output for one image, cropped back to its size and clamped.
    pub fn dehaze(&self, img: &Image, stem: &str) -> Result<Image> {
        if img.channels() != 3 {
            return Err(Error::contract(format!("expected RGB input, got {} channels", img.channels())));
        }
        let x = aligned_input(img, self.cfg().alignment());
        let gd = self.guide.guidance(&x, stem)?;
        let g = Graph::new();
        let xv = g.constant(x);
        let y = self.net.forward(&g, &self.store, xv, &gd)?;
        let y = crop(&g, y, img.height(), img.width())?;
        let out = Image::from_tensor(&g.value(y), 0)?;
        Ok(out.clamped())
    }

    /// Attention weights of every block for one image, as
    /// `(stage, block, weights)` with weights `[n_windows, m*m, m*m]`.
    pub fn attention_maps(&self, img: &Image, stem: &str) -> Result<Vec<(usize, usize, Tensor<f32>)>> {
        let x = aligned_input(img, self.cfg().alignment());
        let gd = self.guide.guidance(&x, stem)?;
        let g = Graph::new();
        let xv = g.constant(x);
        let mut trace = Vec::new();
        self.net.residual_traced(&g, &self.store, xv, &gd, None, &mut trace)?;
        Ok(trace
            .into_iter()
            .map(|t| (t.stage, t.block, g.value(t.weights).clone()))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.store.named_tensors();
        let (backend, encoder, imported) = match &self.guide {
            Guide::Tiny(t) => {
                tensors.extend(t.enc_store.named_tensors());
                tensors.extend(t.prompt_store.named_tensors());
                (Backend::Tiny, Some(t.encoder.cfg.clone()), None)
            }
            Guide::Imported(i) => (Backend::Imported, None, Some(i.cfg.clone())),
        };
        checkpoint::save(path, &tensors)?;
        let meta = ModelMeta {
            model: self.net.cfg.clone(),
            backend,
            encoder,
            imported,
        };
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Loads a checkpoint; imported-backend models need the embedding file.
    pub fn load(path: &Path, embeddings: Option<EmbeddingFile>) -> Result<Dehazer> {
        let meta: ModelMeta = read_json(&sidecar(path))?;
        let tensors = checkpoint::load::<f32>(path)?;
        let mut store = ParamStore::new();
        let net = Network::with_seed(&mut store, meta.model.clone(), 0)?;
        let own: Vec<_> = tensors
            .iter()
            .filter(|(n, _)| store.id(n).is_ok())
            .cloned()
            .collect();
        store.load_named(&own)?;
        let guide = match meta.backend {
            Backend::Tiny => {
                let cfg = meta
                    .encoder
                    .ok_or_else(|| Error::Config("tiny-backend checkpoint without encoder config".into()))?;
                let (encoder, enc_store) = encoder_from_tensors(cfg, &tensors)?;
                let (prompts, prompt_store) = prompts_from_tensors(&tensors)?;
                Guide::Tiny(TinyGuide {
                    encoder,
                    enc_store,
                    prompts,
                    prompt_store,
                })
            }
            Backend::Imported => {
                let file = embeddings.ok_or_else(|| {
                    Error::Config("imported-backend model needs an embedding file".into())
                })?;
                Guide::Imported(ImportedGuide {
                    file,
                    cfg: meta.imported.unwrap_or_default(),
                })
            }
        };
        Ok(Dehazer { net, store, guide })
    }
}
