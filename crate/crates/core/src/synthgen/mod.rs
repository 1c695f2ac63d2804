//! Synthetic longitudinal benchmark.
//!
//! Each sample has two visits. Every one of the 14 conditions is
//! independently stable (present at both visits), disappearing (prior
//! only), emerging (current only) or absent. Conditions own a fixed random
//! patch-grid signature; a visit's image is the sum of the signatures of
//! its active conditions plus Gaussian pixel noise. Reports are rendered
//! from the same label sets by the grammar in [`vocab`].
//!
//! Everything derives from one seed: the condition signatures and
//! embeddings come from stream 0 of a ChaCha generator, and sample `i`
//! draws from stream `i + 1`, so samples can be generated independently.

pub mod vocab;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use vocab::{extract_labels, render_labels, LabelSet, NUM_CONDITIONS};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGeometry {
    /// Patches per side.
    pub grid: usize,
    /// Pixels per patch side.
    pub patch: usize,
    pub channels: usize,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self {
            grid: 4,
            patch: 8,
            channels: 1,
        }
    }
}

impl ImageGeometry {
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn num_values(&self) -> usize {
        self.num_patches() * self.patch_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visit {
    Prior,
    Current,
}

/// Probabilities of the per-condition progression states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressionKnobs {
    pub p_stable: f64,
    pub p_disappear: f64,
    pub p_emerge: f64,
}

impl Default for ProgressionKnobs {
    fn default() -> Self {
        Self {
            p_stable: 0.10,
            p_disappear: 0.15,
            p_emerge: 0.20,
        }
    }
}

impl ProgressionKnobs {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_stable, self.p_disappear, self.p_emerge];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "progression probabilities must lie in [0, 1] and sum to at most 1, got {ps:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n: usize,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub knobs: ProgressionKnobs,
    pub geometry: ImageGeometry,
    pub latent_dim: usize,
    pub pixel_noise: f64,
    pub latent_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 0,
            split: [0.8, 0.1, 0.1],
            knobs: ProgressionKnobs::default(),
            geometry: ImageGeometry::default(),
            latent_dim: 8,
            pixel_noise: 0.1,
            latent_noise: 0.05,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if self.split.iter().any(|r| !(0.0..=1.0).contains(r))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split ratios must be in [0, 1] and sum to 1, got {:?}",
                self.split
            )));
        }
        self.knobs.validate()?;
        if self.latent_dim == 0 || self.geometry.num_values() == 0 {
            return Err(Error::Config(
                "latent_dim and geometry must be positive".into(),
            ));
        }
        if !(self.pixel_noise >= 0.0 && self.latent_noise >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }

    /// Sizes of the train, validation and test splits.
    pub fn split_sizes(&self) -> [usize; 3] {
        let train = ((self.n as f64 * self.split[0]).round() as usize).min(self.n);
        let val = ((self.n as f64 * self.split[1]).round() as usize).min(self.n - train);
        [train, val, self.n - train - val]
    }
}

/// Ground truth behind one longitudinal sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    pub z_shared: Vec<f64>,
    pub z_prior_specific: Vec<f64>,
    pub z_current_specific: Vec<f64>,
    pub c_shared: LabelSet,
    pub c_prior_only: LabelSet,
    pub c_current_only: LabelSet,
}

impl LatentFactors {
    /// Conditions visible at `visit`.
    pub fn active_at(&self, visit: Visit) -> LabelSet {
        let specific = match visit {
            Visit::Prior => &self.c_prior_only,
            Visit::Current => &self.c_current_only,
        };
        self.c_shared.union(specific).copied().collect()
    }

    pub fn is_disjoint(&self) -> bool {
        self.c_shared.is_disjoint(&self.c_prior_only)
            && self.c_shared.is_disjoint(&self.c_current_only)
            && self.c_prior_only.is_disjoint(&self.c_current_only)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalSample {
    pub sample_id: u64,
    pub seed: u64,
    /// `S x patch_dim` values, patch-major.
    pub image_current: Vec<f64>,
    pub image_prior: Vec<f64>,
    pub report_prior: Vec<u32>,
    pub report_current: Vec<u32>,
    pub factors: LatentFactors,
}

/// Fixed per-condition signatures and embeddings of a dataset.
#[derive(Debug, Clone)]
pub struct World {
    pub signatures: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl World {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = rng_for(cfg.seed, 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let signatures = (0..NUM_CONDITIONS)
            .map(|_| {
                (0..cfg.geometry.num_values())
                    .map(|_| normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let embeddings = (0..NUM_CONDITIONS)
            .map(|_| {
                (0..cfg.latent_dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Self {
            signatures,
            embeddings,
        }
    }

    /// Noise-free image of a label set.
    pub fn render_clean(&self, labels: &LabelSet) -> Vec<f64> {
        let mut img = vec![0.0; self.signatures[0].len()];
        for &j in labels {
            for (p, s) in img.iter_mut().zip(&self.signatures[j as usize]) {
                *p += s;
            }
        }
        img
    }

    fn latent(&self, labels: &LabelSet, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = self.embeddings[0].len();
        let mut z: Vec<f64> = (0..k).map(|_| noise.sample(rng)).collect();
        for &j in labels {
            for (a, e) in z.iter_mut().zip(&self.embeddings[j as usize]) {
                *a += e;
            }
        }
        z
    }
}

/// Report for `visit`, rendered from the factors' label sets.
pub fn render_report(factors: &LatentFactors, visit: Visit) -> Vec<u32> {
    render_labels(&factors.active_at(visit))
}

pub fn generate_sample(cfg: &GeneratorConfig, world: &World, sample_id: u64) -> LongitudinalSample {
    let mut rng = rng_for(cfg.seed, sample_id + 1);
    let knobs = cfg.knobs;
    let (mut c_shared, mut c_prior_only, mut c_current_only) =
        (LabelSet::new(), LabelSet::new(), LabelSet::new());
    for j in 0..NUM_CONDITIONS as u8 {
        let u: f64 = rng.random();
        if u < knobs.p_stable {
            c_shared.insert(j);
        } else if u < knobs.p_stable + knobs.p_disappear {
            c_prior_only.insert(j);
        } else if u < knobs.p_stable + knobs.p_disappear + knobs.p_emerge {
            c_current_only.insert(j);
        }
    }
    let latent_noise = Normal::new(0.0, cfg.latent_noise).expect("valid sigma");
    let pixel_noise = Normal::new(0.0, cfg.pixel_noise).expect("valid sigma");
    let factors = LatentFactors {
        z_shared: world.latent(&c_shared, &latent_noise, &mut rng),
        z_prior_specific: world.latent(&c_prior_only, &latent_noise, &mut rng),
        z_current_specific: world.latent(&c_current_only, &latent_noise, &mut rng),
        c_shared,
        c_prior_only,
        c_current_only,
    };
    let mut noisy = |labels: &LabelSet| {
        let mut img = world.render_clean(labels);
        img.iter_mut()
            .for_each(|p| *p += pixel_noise.sample(&mut rng));
        img
    };
    let image_prior = noisy(&factors.active_at(Visit::Prior));
    let image_current = noisy(&factors.active_at(Visit::Current));
    LongitudinalSample {
        sample_id,
        seed: cfg.seed,
        image_current,
        image_prior,
        report_prior: render_report(&factors, Visit::Prior),
        report_current: render_report(&factors, Visit::Current),
        factors,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("dataset.{}.jsonl", self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LongitudinalSample>,
    pub val: Vec<LongitudinalSample>,
    pub test: Vec<LongitudinalSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LongitudinalSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates all samples; sample ids `0..n` are assigned to train,
/// validation and test in contiguous blocks.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let world = World::new(cfg);
    let [train, val, _] = cfg.split_sizes();
    let mut all: Vec<LongitudinalSample> = (0..cfg.n as u64)
        .map(|id| generate_sample(cfg, &world, id))
        .collect();
    let test = all.split_off(train + val);
    let val_samples = all.split_off(train);
    Ok(Dataset {
        train: all,
        val: val_samples,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub counts: SplitCounts,
    pub vocab_size: usize,
    pub num_conditions: usize,
}

/// Writes `dataset.{train,val,test}.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(cfg: &GeneratorConfig, dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for s in dataset.split(split) {
            let line = serde_json::to_string(s).map_err(|e| Error::json("sample", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator: cfg.clone(),
        counts: SplitCounts {
            train: dataset.train.len(),
            val: dataset.val.len(),
            test: dataset.test.len(),
        },
        vocab_size: vocab::VOCAB_SIZE,
        num_conditions: NUM_CONDITIONS,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads and version-checks `manifest.json`.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Config(format!("{}: missing format_version", path.display())))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::FormatVersion {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn read_samples(path: &Path) -> Result<Vec<LongitudinalSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(s);
    }
    Ok(out)
}

/// Loads a dataset directory after checking its manifest.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = read_manifest(dir)?;
    let load = |s: Split| read_samples(&dir.join(s.file_name()));
    let dataset = Dataset {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    };
    Ok((manifest, dataset))
}
