//! Atmospheric scattering: synthesis, inversion and triplet datasets.

pub mod procedural;

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_f32_raw, write_f32_raw, Image};
pub use procedural::DepthKind;

/// Transmission below this is treated as opaque haze during inversion.
pub const T_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct AsmParams {
    beta: f64,
    airlight: [f64; 3],
    depth: Image,
}

impl AsmParams {
    pub fn new(beta: f64, airlight: [f64; 3], depth: Image) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!("beta must be finite and >= 0, got {beta}")));
        }
        if airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Parameter(format!(
                "atmospheric light must lie in [0,1], got {airlight:?}"
            )));
        }
        if depth.channels() != 1 {
            return Err(Error::Parameter("depth map must have one channel".into()));
        }
        if depth.data().iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::Parameter("depth must be finite and >= 0".into()));
        }
        Ok(AsmParams {
            beta,
            airlight,
            depth,
        })
    }

    pub fn uniform(beta: f64, airlight: f64, depth: f64, h: usize, w: usize) -> Result<Self> {
        AsmParams::new(beta, [airlight; 3], Image::filled(h, w, 1, depth))
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn airlight(&self) -> [f64; 3] {
        self.airlight
    }

    pub fn depth(&self) -> &Image {
        &self.depth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeTriplet {
    pub hazy: Image,
    pub clear: Image,
    pub density: Image,
}

impl HazeTriplet {
    pub fn height(&self) -> usize {
        self.clear.height()
    }

    pub fn width(&self) -> usize {
        self.clear.width()
    }
}

pub fn transmission(params: &AsmParams) -> Image {
    params.depth.map(|d| (-params.beta * d).exp())
}

pub fn synthesize(clear: &Image, params: &AsmParams) -> Result<HazeTriplet> {
    if clear.channels() != 3
        || clear.height() != params.depth.height()
        || clear.width() != params.depth.width()
    {
        return Err(Error::shape(
            "synthesize",
            &[clear.height(), clear.width(), clear.channels()],
            &[params.depth.height(), params.depth.width(), 3],
        ));
    }
    let t = transmission(params);
    let a = params.airlight;
    let hazy = Image::from_fn(clear.height(), clear.width(), 3, |y, x, c| {
        let tv = t.get(y, x, 0);
        (clear.get(y, x, c) * tv + a[c] * (1.0 - tv)).clamp(0.0, 1.0)
    });
    let density = t.map(|tv| 1.0 - tv);
    Ok(HazeTriplet {
        hazy,
        clear: clear.clone(),
        density,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub image: Image,
    /// Set when some transmission fell below [`T_FLOOR`].
    pub approximate: bool,
}

pub fn invert_asm(hazy: &Image, params: &AsmParams) -> Result<Inversion> {
    if hazy.channels() != 3
        || hazy.height() != params.depth.height()
        || hazy.width() != params.depth.width()
    {
        return Err(Error::shape(
            "invert_asm",
            &[hazy.height(), hazy.width(), hazy.channels()],
            &[params.depth.height(), params.depth.width(), 3],
        ));
    }
    let t = transmission(params);
    let approximate = t.data().iter().any(|v| *v < T_FLOOR);
    let a = params.airlight;
    let image = Image::from_fn(hazy.height(), hazy.width(), 3, |y, x, c| {
        let tv = t.get(y, x, 0);
        if tv < T_FLOOR {
            ((hazy.get(y, x, c) - a[c] * (1.0 - T_FLOOR)) / T_FLOOR).clamp(0.0, 1.0)
        } else {
            (hazy.get(y, x, c) - a[c] * (1.0 - tv)) / tv
        }
    });
    Ok(Inversion { image, approximate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub crop: usize,
    pub beta_range: (f64, f64),
    pub airlight_range: (f64, f64),
    pub depth_kinds: Vec<DepthKind>,
    pub flip: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            crop: 64,
            beta_range: (0.6, 1.8),
            airlight_range: (0.7, 1.0),
            depth_kinds: DepthKind::ALL.to_vec(),
            flip: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.beta_range;
        if !(0.0 <= lo && lo <= hi && hi <= 5.0) {
            return Err(Error::Config(format!(
                "beta_range must satisfy 0 <= lo <= hi <= 5, got [{lo}, {hi}]"
            )));
        }
        let (alo, ahi) = self.airlight_range;
        if !(0.0 <= alo && alo <= ahi && ahi <= 1.0) {
            return Err(Error::Config(format!(
                "airlight_range must lie in [0,1], got [{alo}, {ahi}]"
            )));
        }
        if self.crop == 0 {
            return Err(Error::Config("crop must be positive".into()));
        }
        if self.depth_kinds.is_empty() {
            return Err(Error::Config("depth_kinds must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum ClearSource {
    Images(Vec<Image>),
    /// A fresh procedural texture per sample.
    Procedural,
}

/// One SplitMix64 step; decorrelates per-sample seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, random-access triplet generator.
#[derive(Clone, Debug)]
pub struct DatasetBuilder {
    source: ClearSource,
    config: DatasetConfig,
    seed: u64,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub triplet: HazeTriplet,
    pub beta: f64,
    pub airlight: [f64; 3],
    pub depth_kind: DepthKind,
}

impl DatasetBuilder {
    pub fn new(source: ClearSource, config: DatasetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if let ClearSource::Images(images) = &source {
            if images.is_empty() {
                return Err(Error::Config("clear image set is empty".into()));
            }
            for img in images {
                if img.height() < config.crop || img.width() < config.crop {
                    return Err(Error::Config(format!(
                        "clear image {}x{} smaller than crop {}",
                        img.height(),
                        img.width(),
                        config.crop
                    )));
                }
                if img.channels() != 3 {
                    return Err(Error::Config("clear images must be RGB".into()));
                }
            }
        }
        Ok(DatasetBuilder {
            source,
            config,
            seed,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn sample(&self, index: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, index));
        let n = self.config.crop;
        let mut clear = match &self.source {
            ClearSource::Images(images) => {
                let img = &images[rng.random_range(0..images.len())];
                let y0 = rng.random_range(0..=img.height() - n);
                let x0 = rng.random_range(0..=img.width() - n);
                img.crop(y0, x0, n, n).expect("bounds checked at construction")
            }
            ClearSource::Procedural => procedural::texture(n, n, &mut rng),
        };
        if self.config.flip {
            if rng.random::<bool>() {
                clear = clear.flip_horizontal();
            }
            if rng.random::<bool>() {
                clear = clear.flip_vertical();
            }
        }
        let (lo, hi) = self.config.beta_range;
        let beta = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (alo, ahi) = self.config.airlight_range;
        let a = if ahi > alo { rng.random_range(alo..=ahi) } else { alo };
        let airlight = [a; 3];
        let kinds = &self.config.depth_kinds;
        let depth_kind = kinds[rng.random_range(0..kinds.len())];
        let depth = procedural::depth_map(depth_kind, n, n, &mut rng);
        let params = AsmParams::new(beta, airlight, depth).expect("ranges validated");
        let triplet = synthesize(&clear, &params).expect("shapes agree");
        Sample {
            triplet,
            beta,
            airlight,
            depth_kind,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample> + '_ {
        (0u64..).map(move |i| self.sample(i))
    }

    pub fn take(&self, start: u64, count: usize) -> Vec<HazeTriplet> {
        (0..count as u64)
            .map(|i| self.sample(start + i).triplet)
            .collect()
    }
}

pub fn triplet_paths(dir: &Path, stem: &str) -> [PathBuf; 4] {
    [
        dir.join(format!("{stem}.hazy.png")),
        dir.join(format!("{stem}.clear.png")),
        dir.join(format!("{stem}.density.png")),
        dir.join(format!("{stem}.density.f32")),
    ]
}

pub fn save_triplet(dir: &Path, stem: &str, t: &HazeTriplet) -> Result<()> {
    let [hazy, clear, density, raw] = triplet_paths(dir, stem);
    t.hazy.save(&hazy)?;
    t.clear.save(&clear)?;
    t.density.save(&density)?;
    write_f32_raw(&raw, t.density.data())
}

/// Loads a triplet, preferring the lossless density sidecar when present.
pub fn load_triplet(dir: &Path, stem: &str) -> Result<HazeTriplet> {
    let [hazy, clear, density, raw] = triplet_paths(dir, stem);
    let hazy = Image::load(&hazy)?;
    let clear = Image::load(&clear)?;
    if !hazy.same_dims(&clear) {
        return Err(Error::contract(format!("triplet {stem}: hazy and clear sizes differ")));
    }
    let density = if raw.exists() {
        let values = read_f32_raw(&raw)?;
        Image::new(hazy.height(), hazy.width(), 1, values)?
    } else {
        Image::load(&density)?.luma()
    };
    Ok(HazeTriplet {
        hazy,
        clear,
        density,
    })
}

/// Stems of all `<stem>.hazy.png` files in a directory, sorted.
pub fn list_triplets(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        if let Some(stem) = name.to_string_lossy().strip_suffix(".hazy.png") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn load_triplet_dir(dir: &Path) -> Result<Vec<HazeTriplet>> {
    let stems = list_triplets(dir)?;
    if stems.is_empty() {
        return Err(Error::NotFound(format!("no triplets in {}", dir.display())));
    }
    stems.iter().map(|s| load_triplet(dir, s)).collect()
}

/// All PNG/PPM images in a directory, sorted by name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| {
                let e = e.to_string_lossy().to_ascii_lowercase();
                e == "png" || e == "ppm"
            })
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Image::load(p)).collect()
}
