use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mobs_core::channels::GaborParams;
use mobs_core::phantom::{DatasetConfig, InteriorSpec, SignalSpec};
use mobs_core::rng::derive_seed;
use mobs_core::stats::AucKind;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: String,
    pub master_seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub observers: Vec<ObserverSpec>,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub stats: StatsSpec,
    #[serde(default)]
    pub gaze: Option<GazeSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub signal_present: usize,
    pub signal_absent: usize,
}

/// Synthetic phantoms, or an existing dataset directory holding
/// `train/manifest.csv` and `test/manifest.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub power_law_beta: f64,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub std: f64,
    pub signal: SignalSpec,
    pub interior: InteriorSpec,
    pub train: SplitCounts,
    pub test: SplitCounts,
}

fn one() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn split(&self, name: &str, master_seed: u64) -> DatasetConfig {
        let (counts, key) = match name {
            "train" => (self.train, 1),
            _ => (self.test, 2),
        };
        DatasetConfig {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            power_law_beta: self.power_law_beta,
            mean: self.mean,
            std: self.std,
            signal: self.signal.clone(),
            n_signal_present: counts.signal_present,
            n_signal_absent: counts.signal_absent,
            interior: self.interior.clone(),
            master_seed: derive_seed(master_seed, &[key]),
            id_prefix: name.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverKind {
    Cho,
    Fco,
    CnnPost,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSpec {
    #[serde(default = "default_orientations")]
    pub orientations: usize,
    #[serde(default = "default_ppc")]
    pub pixels_per_cycle: Vec<f64>,
    #[serde(default = "one")]
    pub envelope_octaves: f64,
}

fn default_orientations() -> usize {
    8
}

fn default_ppc() -> Vec<f64> {
    vec![4.0, 8.0, 16.0, 32.0, 64.0]
}

impl Default for BankSpec {
    fn default() -> Self {
        Self { orientations: default_orientations(), pixels_per_cycle: default_ppc(), envelope_octaves: 1.0 }
    }
}

impl BankSpec {
    pub fn params(&self, extent: usize) -> GaborParams {
        let mut p = GaborParams::from_pixels_per_cycle(self.orientations, &self.pixels_per_cycle, extent);
        p.envelope_octaves = self.envelope_octaves;
        p
    }
}

/// Synthetic probability maps for `cnn_post` observers without maps on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProbMaps {
    pub speckle_max: f64,
    pub blob_radius: f64,
    pub blob_value: f64,
}

impl Default for SyntheticProbMaps {
    fn default() -> Self {
        Self { speckle_max: 0.4, blob_radius: 2.0, blob_value: 0.8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSpec {
    pub name: String,
    pub kind: ObserverKind,
    #[serde(default)]
    pub bank: BankSpec,
    /// 1 for a 2D template; odd > 1 for the slice-weighted 3D template.
    #[serde(default = "one_usize")]
    pub n_slices: usize,
    #[serde(default)]
    pub ridge: f64,
    /// Directory of `<phantom_id>.f32` probability maps (cnn_post only).
    #[serde(default)]
    pub prob_maps: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticProbMaps,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub crop_extent: usize,
    pub absent_per_phantom: usize,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self { crop_extent: 101, absent_per_phantom: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LkeSpec {
    pub n_grid: Vec<usize>,
    #[serde(default = "default_lke_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub neighborhood: Option<[usize; 3]>,
    #[serde(default)]
    pub signal_extra: bool,
}

fn default_lke_iterations() -> usize {
    10_000
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default)]
    pub lke: Option<LkeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSpec {
    #[serde(default = "default_boot")]
    pub iterations: usize,
    #[serde(default = "default_min")]
    pub min_per_class: usize,
    #[serde(default = "default_auc")]
    pub auc: AucKind,
    /// Pairs `"a:b"`; names are observers or `readers=<condition>`.
    #[serde(default)]
    pub compare: Vec<String>,
    /// Reader-rating CSV for `readers=<condition>` names.
    #[serde(default)]
    pub ratings: Option<PathBuf>,
}

fn default_boot() -> usize {
    20_000
}

fn default_min() -> usize {
    6
}

fn default_auc() -> AucKind {
    AucKind::Parametric
}

impl Default for StatsSpec {
    fn default() -> Self {
        Self {
            iterations: default_boot(),
            min_per_class: default_min(),
            auc: default_auc(),
            compare: Vec::new(),
            ratings: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticReaders {
    pub readers: usize,
    pub fixations_per_reader: usize,
    pub hot_share: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeSpec {
    /// Observers whose response maps are compared with reader time.
    pub observers: Vec<String>,
    #[serde(default)]
    pub fixations: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticReaders>,
    #[serde(default)]
    pub support: Option<[usize; 3]>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_boot")]
    pub iterations: usize,
}

fn default_fractions() -> Vec<f64> {
    mobs_core::gaze::FRACTION_GRID.to_vec()
}

impl RunConfig {
    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!("config {} has schema_version {}, expected {SCHEMA_VERSION}", path.display(), cfg.schema_version);
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.dataset.path.as_mut() {
            resolve(p);
        }
        for o in &mut cfg.observers {
            if let Some(p) = o.prob_maps.as_mut() {
                resolve(p);
            }
        }
        if let Some(p) = cfg.stats.ratings.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.gaze.as_mut().and_then(|g| g.fixations.as_mut()) {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observers.is_empty() {
            bail!("config lists no observers");
        }
        let mut names: Vec<&str> = self.observers.iter().map(|o| o.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!("observer names must be unique");
        }
        for o in &self.observers {
            if o.name.is_empty() || o.name.contains([':', '/', '\\']) {
                bail!("observer name {:?} must be non-empty without ':' or path separators", o.name);
            }
            if o.n_slices % 2 == 0 {
                bail!("observer {}: n_slices must be odd", o.name);
            }
        }
        if self.training.crop_extent.is_multiple_of(2) {
            bail!("training.crop_extent must be odd");
        }
        Ok(())
    }

    pub fn observer(&self, name: &str) -> Result<&ObserverSpec> {
        self.observers.iter().find(|o| o.name == name).with_context(|| format!("no observer named {name:?} in config"))
    }
}
