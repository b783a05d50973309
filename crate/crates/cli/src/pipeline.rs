use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mobs_core::channels::{fco_bank, gabor_bank, mean_signal};
use mobs_core::cnn_post::{
    calibrate_threshold, score_map, synthetic_probability_map, CalibrationReport, Connectivity, ProbabilityMap,
    SyntheticProbSpec,
};
use mobs_core::gaze::{
    bootstrap_time_spent, filter_by_mask, gaussian_smooth, support_for, synthetic_fixations, time_spent_map,
    top_fraction_mask, Fixation, FixationLog, SyntheticGaze, TimeSpentTable,
};
use mobs_core::io::load_volume;
use mobs_core::observers::{extract_training_crops, train_template, train_template_3d, CropPlan, TemplateFile};
use mobs_core::phantom::{generate_dataset, DatasetManifest, ManifestEntry};
use mobs_core::rng::derive_seed;
use mobs_core::search::{lke_curve, lke_iteration_scores, search_score, LkeConfig, LkeEntry, LkePoint, StackedKernel};
use mobs_core::stats::{
    bootstrap_compare, read_ratings, BootstrapConfig, BootstrapResult, ObserverScores, PhantomPool, ScoreRow,
    ScoreTable,
};
use mobs_core::{BinaryMask, Volume};
use rayon::prelude::*;
use serde::Serialize;

use crate::cache::MapCache;
use crate::config::{ObserverKind, ObserverSpec, RunConfig};

/// Error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {:#}", self.stage, self.source)
    }
}

impl StageError {
    /// True when the root cause is a numerical failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        self.source.chain().any(|e| e.downcast_ref::<mobs_core::Error>().is_some_and(|e| e.is_numeric()))
    }
}

pub fn tag<T>(stage: &'static str, r: Result<T>) -> Result<T, StageError> {
    r.map_err(|source| StageError { stage, source })
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

struct Loaded {
    entry: ManifestEntry,
    volume: Volume<f32>,
    mask: BinaryMask,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: Option<PathBuf>) -> Self {
        let out = out.unwrap_or_else(|| cfg.output_dir.clone());
        Self { cfg, out }
    }

    fn dataset_root(&self) -> PathBuf {
        self.cfg.dataset.path.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    fn split_dir(&self, split: &str) -> PathBuf {
        self.dataset_root().join(split)
    }

    fn templates_dir(&self) -> PathBuf {
        self.out.join("templates")
    }

    fn scores_path(&self) -> PathBuf {
        self.out.join("scores").join("search_scores.csv")
    }

    fn cache(&self) -> MapCache {
        MapCache::new(self.out.join("cache").join("maps"))
    }

    fn seed(&self, keys: &[u64]) -> u64 {
        derive_seed(self.cfg.master_seed, keys)
    }

    fn load_split(&self, split: &str) -> Result<Vec<Loaded>> {
        let dir = self.split_dir(split);
        let manifest_path = dir.join("manifest.csv");
        if !manifest_path.exists() {
            bail!("dataset manifest {} not found", manifest_path.display());
        }
        let manifest = DatasetManifest::read_csv(&manifest_path)?;
        manifest
            .entries
            .into_par_iter()
            .map(|entry| {
                let path = dir.join(&entry.path);
                let volume = load_volume(&path).with_context(|| format!("loading phantom {}", entry.id))?;
                let mask = self.cfg.dataset.interior.mask(&volume);
                Ok(Loaded { entry, volume, mask })
            })
            .collect()
    }

    /// Writes synthetic train/test splits unless an existing dataset is
    /// configured; an unchanged config skips regeneration.
    pub fn generate(&self) -> Result<DatasetReport> {
        let mut report = DatasetReport::default();
        if let Some(root) = &self.cfg.dataset.path {
            for split in ["train", "test"] {
                let m = root.join(split).join("manifest.csv");
                if !m.exists() {
                    bail!("dataset path {}: missing {}", root.display(), m.display());
                }
                report.count(split, &DatasetManifest::read_csv(&m)?);
            }
            return Ok(report);
        }
        for split in ["train", "test"] {
            let cfg = self.cfg.dataset.split(split, self.cfg.master_seed);
            let dir = self.split_dir(split);
            let stamp = dir.join("dataset_config.json");
            let fingerprint = serde_json::to_string_pretty(&cfg)?;
            let manifest_path = dir.join("manifest.csv");
            let manifest = if manifest_path.exists() && fs::read_to_string(&stamp).is_ok_and(|s| s == fingerprint) {
                log::info!("dataset {split}: reusing {}", dir.display());
                DatasetManifest::read_csv(&manifest_path)?
            } else {
                log::info!("dataset {split}: generating {} phantoms", cfg.count());
                let m = generate_dataset(&cfg, &dir)?;
                fs::write(&stamp, &fingerprint).with_context(|| format!("writing {}", stamp.display()))?;
                m
            };
            report.count(split, &manifest);
        }
        Ok(report)
    }

    fn linear_observers(&self, only: Option<&str>) -> Result<Vec<&ObserverSpec>> {
        self.selected(only, |o| o.kind != ObserverKind::CnnPost)
    }

    fn selected(&self, only: Option<&str>, keep: impl Fn(&ObserverSpec) -> bool) -> Result<Vec<&ObserverSpec>> {
        match only {
            Some(name) => Ok(vec![self.cfg.observer(name)?]),
            None => Ok(self.cfg.observers.iter().filter(|o| keep(o)).collect()),
        }
    }

    pub fn train(&self, only: Option<&str>) -> Result<BTreeMap<String, TrainReport>> {
        let train = self.load_split("train")?;
        let mut reports = BTreeMap::new();
        for obs in self.selected(only, |_| true)? {
            let r = match obs.kind {
                ObserverKind::CnnPost => self.train_cnn(obs, &train),
                _ => self.train_linear(obs, &train),
            }
            .with_context(|| format!("training observer {}", obs.name))?;
            reports.insert(obs.name.clone(), r);
        }
        Ok(reports)
    }

    fn train_linear(&self, obs: &ObserverSpec, train: &[Loaded]) -> Result<TrainReport> {
        let t = &self.cfg.training;
        let plan = CropPlan {
            extent: t.crop_extent,
            depth: obs.n_slices,
            absent_per_phantom: t.absent_per_phantom,
            seed: self.seed(&[3]),
        };
        let inputs: Vec<_> = train.iter().map(|p| (&p.volume, p.entry.center, &p.mask)).collect();
        let crops = extract_training_crops(&inputs, &plan)?;
        let mut bank = gabor_bank(&obs.bank.params(t.crop_extent))?;
        if obs.kind == ObserverKind::Fco {
            let mid = obs.n_slices / 2;
            let central = |v: &[Volume<f32>]| v.iter().map(|c| c.slice(mid)).collect::<Result<Vec<_>, _>>();
            let signal = mean_signal(&central(&crops.present)?, &central(&crops.absent)?)?;
            bank = fco_bank(&bank, &signal)?;
        }
        let file = if obs.n_slices == 1 {
            let tpl = train_template(&bank, &crops.present, &crops.absent, obs.ridge)?;
            let f = TemplateFile::from_2d(&obs.name, &tpl);
            f.save(&self.templates_dir(), &[tpl.spatial_kernel()])?;
            f
        } else {
            let tpl = train_template_3d(&bank, &crops.present, &crops.absent, obs.n_slices, obs.ridge)?;
            let f = TemplateFile::from_3d(&obs.name, &tpl);
            let kernels: Vec<_> = tpl.slice_templates.iter().map(|s| s.spatial_kernel()).collect();
            f.save(&self.templates_dir(), &kernels)?;
            f
        };
        Ok(TrainReport {
            dprime_ch: Some(file.dprime_ch),
            slice_weights: (obs.n_slices > 1).then(|| file.slice_weights.clone()),
            threshold: None,
            n_present: crops.present.len(),
            n_absent: crops.absent.len(),
        })
    }

    fn prob_map(&self, obs: &ObserverSpec, p: &Loaded) -> Result<ProbabilityMap> {
        match &obs.prob_maps {
            Some(dir) => {
                let path = dir.join(format!("{}.f32", p.entry.id));
                let v = load_volume(&path).with_context(|| format!("probability map for {}", p.entry.id))?;
                if v.dims() != p.volume.dims() {
                    bail!("probability map {} has dims {}, phantom has {}", path.display(), v.dims(), p.volume.dims());
                }
                Ok(ProbabilityMap::new(v, &path.to_string_lossy())?)
            }
            None => {
                let s = &obs.synthetic;
                let radius = s.blob_radius;
                Ok(synthetic_probability_map(&SyntheticProbSpec {
                    dims: p.volume.dims(),
                    speckle_max: s.speckle_max,
                    blob: p.entry.center.map(|c| (c, radius, s.blob_value)),
                    seed: derive_seed(p.entry.seed, &[4]),
                })?)
            }
        }
    }

    fn train_cnn(&self, obs: &ObserverSpec, train: &[Loaded]) -> Result<TrainReport> {
        let maps = train.par_iter().map(|p| self.prob_map(obs, p)).collect::<Result<Vec<_>>>()?;
        let validation: Vec<_> = maps.iter().zip(train).map(|(m, p)| (m, p.entry.label)).collect();
        let conn = Connectivity::for_dims(train[0].volume.dims());
        let report = calibrate_threshold(&validation, conn)?;
        fs::create_dir_all(self.templates_dir())?;
        report.save(&self.templates_dir().join(format!("{}.json", obs.name)))?;
        Ok(TrainReport {
            dprime_ch: None,
            slice_weights: None,
            threshold: Some(report.threshold),
            n_present: train.iter().filter(|p| p.entry.label).count(),
            n_absent: train.iter().filter(|p| !p.entry.label).count(),
        })
    }

    fn load_kernel(&self, obs: &ObserverSpec) -> Result<StackedKernel> {
        let path = self.templates_dir().join(format!("{}.json", obs.name));
        if !path.exists() {
            bail!("template {} not found; run the train stage first", path.display());
        }
        let file = TemplateFile::load(&path)?;
        let kernels = file.load_kernels(&path)?;
        Ok(StackedKernel::new(file.slice_weights.iter().copied().zip(kernels).collect())?)
    }

    fn maps(&self, obs: &ObserverSpec, phantoms: &[&Loaded]) -> Result<Vec<Volume<f32>>> {
        let kernel = self.load_kernel(obs)?;
        let cache = self.cache();
        // phantoms run one at a time; each map already uses every worker
        phantoms
            .iter()
            .map(|p| cache.response_map(&p.volume, &kernel).with_context(|| format!("response map for {}", p.entry.id)))
            .collect()
    }

    pub fn score(&self) -> Result<ScoreTable> {
        let test = self.load_split("test")?;
        let mut rows = Vec::new();
        for obs in &self.cfg.observers {
            let scores: Vec<f64> = match obs.kind {
                ObserverKind::CnnPost => {
                    let path = self.templates_dir().join(format!("{}.json", obs.name));
                    let text = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                    let report: CalibrationReport = serde_json::from_slice(&text)?;
                    let conn = Connectivity::for_dims(test[0].volume.dims());
                    test.par_iter()
                        .map(|p| Ok(score_map(self.prob_map(obs, p)?.values(), report.threshold, conn)?))
                        .collect::<Result<_>>()?
                }
                _ => self
                    .maps(obs, &test.iter().collect::<Vec<_>>())?
                    .iter()
                    .zip(&test)
                    .map(|(m, p)| Ok(search_score(m, &p.mask)?.0))
                    .collect::<Result<_>>()?,
            };
            for (p, s) in test.iter().zip(scores) {
                rows.push(ScoreRow {
                    phantom_id: p.entry.id.clone(),
                    label: p.entry.label as u8,
                    score: s,
                    observer: obs.name.clone(),
                    n: None,
                });
            }
        }
        let table = ScoreTable { rows };
        let path = self.scores_path();
        fs::create_dir_all(path.parent().expect("scores dir"))?;
        table.write_csv(&path)?;
        Ok(table)
    }

    pub fn lke(&self, n_override: Option<Vec<usize>>) -> Result<BTreeMap<String, Vec<LkePoint>>> {
        let spec = self.cfg.task.lke.as_ref();
        let ns = match (n_override, spec) {
            (Some(n), _) => n,
            (None, Some(s)) => s.n_grid.clone(),
            (None, None) => bail!("no N grid: pass --n or set task.lke.n_grid"),
        };
        let test = self.load_split("test")?;
        let dims = test[0].volume.dims();
        let mut cfg = LkeConfig::for_dims(dims);
        cfg.seed = self.seed(&[5]);
        if let Some(s) = spec {
            cfg.iterations = s.iterations;
            cfg.signal_extra = s.signal_extra;
            if let Some(n) = s.neighborhood {
                cfg.neighborhood = n;
            }
        }
        let dir = self.out.join("lke");
        fs::create_dir_all(&dir)?;
        let mut curves = BTreeMap::new();
        let mut rows = Vec::new();
        for obs in self.linear_observers(None)? {
            let maps = self.maps(obs, &test.iter().collect::<Vec<_>>())?;
            let entries = test
                .iter()
                .zip(&maps)
                .map(|(p, m)| Ok(LkeEntry::new(&p.entry.id, m, &p.mask, p.entry.center, cfg.neighborhood)?))
                .collect::<Result<Vec<_>>>()?;
            let curve = lke_curve(&entries, &ns, &cfg).with_context(|| format!("LKE curve for {}", obs.name))?;
            write_csv(&dir.join(format!("{}_curve.csv", obs.name)), &curve)?;
            for &n in &ns {
                for (e, s) in entries.iter().zip(lke_iteration_scores(&entries, n, &cfg, 0)?) {
                    rows.push(ScoreRow {
                        phantom_id: e.id.clone(),
                        label: e.present as u8,
                        score: s,
                        observer: obs.name.clone(),
                        n: Some(n),
                    });
                }
            }
            curves.insert(obs.name.clone(), curve);
        }
        ScoreTable { rows }.write_csv(&dir.join("lke_scores.csv"))?;
        Ok(curves)
    }

    pub fn stats(&self, compare: Option<Vec<String>>) -> Result<StatsReport> {
        let path = self.scores_path();
        if !path.exists() {
            bail!("score table {} not found; run the score stage first", path.display());
        }
        let table = ScoreTable::read_csv(&path)?;
        let spec = &self.cfg.stats;
        let mut report = StatsReport::default();
        for o in table.observers() {
            let (e, p) = table.auc(&o, None)?;
            report.auc.insert(o, AucPair { empirical: e, parametric: p });
        }
        let labels = table.labels();
        let pool = PhantomPool::from_labels(&labels);
        let ratings = match &spec.ratings {
            Some(p) => Some(read_ratings(p)?),
            None => None,
        };
        let resolve = |name: &str| -> Result<ObserverScores> {
            if let Some(cond) = name.strip_prefix("readers=") {
                let r = ratings.as_ref().context("readers comparison needs stats.ratings")?;
                return Ok(ObserverScores::panel(r, cond));
            }
            let s = table.scores(name, None);
            if s.is_empty() {
                bail!("no scores for observer {name:?} in {}", path.display());
            }
            Ok(ObserverScores::Model(s))
        };
        let pairs = compare.unwrap_or_else(|| spec.compare.clone());
        let boot = BootstrapConfig {
            iterations: spec.iterations,
            min_per_class: spec.min_per_class,
            seed: self.seed(&[6]),
            auc: spec.auc,
        };
        let dir = self.out.join("stats");
        fs::create_dir_all(&dir)?;
        for pair in pairs {
            let (a, b) = pair.split_once(':').with_context(|| format!("comparison {pair:?} must look like a:b"))?;
            let r = bootstrap_compare(&resolve(a)?, &resolve(b)?, &pool, &boot)
                .with_context(|| format!("bootstrap {a} vs {b}"))?;
            let stem = format!("{}_vs_{}", a.replace('=', "-"), b.replace('=', "-"));
            write_json(&dir.join(format!("{stem}.json")), &r)?;
            r.write_histogram(&dir.join(format!("{stem}_hist.csv")), 50)?;
            report.comparisons.insert(pair.clone(), r);
        }
        Ok(report)
    }

    pub fn gaze(&self) -> Result<GazeReport> {
        let spec = self.cfg.gaze.as_ref().context("config has no gaze section")?;
        if spec.observers.is_empty() {
            bail!("gaze.observers is empty");
        }
        let observers: Vec<&ObserverSpec> =
            spec.observers.iter().map(|n| self.cfg.observer(n)).collect::<Result<_>>()?;
        if let Some(o) = observers.iter().find(|o| o.kind == ObserverKind::CnnPost) {
            bail!("gaze analysis needs template response maps; {} is cnn_post", o.name);
        }
        let test = self.load_split("test")?;
        let absent: Vec<&Loaded> = test.iter().filter(|p| !p.entry.label).collect();
        let dims = absent.first().context("test split has no signal-absent phantoms")?.volume.dims();
        let support = spec.support.unwrap_or_else(|| support_for(dims));
        let dir = self.out.join("gaze");
        fs::create_dir_all(&dir)?;

        let smoothed: Vec<Vec<Volume<f64>>> = observers
            .iter()
            .map(|o| {
                self.maps(o, &absent)?.iter().map(|m| Ok(gaussian_smooth(m, support)?)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        let log = match (&spec.fixations, &spec.synthetic) {
            (Some(path), _) => FixationLog::load(path)?,
            (None, Some(s)) => {
                let mut records = Vec::new();
                for (i, p) in absent.iter().enumerate() {
                    let hot = top_fraction_mask(&smoothed[0][i], 0.001, &p.mask)?;
                    let spots: Vec<_> = hot.indices().into_iter().map(|j| dims.coords(j)).collect();
                    for r in 0..s.readers {
                        records.extend(synthetic_fixations(&SyntheticGaze {
                            reader_id: format!("reader{r}"),
                            phantom_id: p.entry.id.clone(),
                            dims,
                            hot_spots: spots.clone(),
                            hot_share: s.hot_share,
                            spread: s.spread,
                            n_fixations: s.fixations_per_reader,
                            seed: derive_seed(p.entry.seed, &[7, r as u64]),
                        }));
                    }
                }
                let log = FixationLog { records };
                log.save(&dir.join("fixations.csv"))?;
                log
            }
            (None, None) => bail!("gaze section needs fixations or synthetic readers"),
        };
        let readers = log.readers();
        if readers.is_empty() {
            bail!("fixation log has no records");
        }

        let np = absent.len();
        let nf = spec.fractions.len();
        let mut total = vec![vec![0.0; readers.len()]; np];
        // inside[fraction][observer][phantom][reader]
        let mut inside = vec![vec![vec![vec![0.0; readers.len()]; np]; observers.len()]; nf];
        let mut dropped = 0;
        for (pi, p) in absent.iter().enumerate() {
            let fixes = log.for_phantom(&p.entry.id);
            let (kept, d) = filter_by_mask(&fixes, &p.mask);
            dropped += d;
            let masks: Vec<Vec<BinaryMask>> = smoothed
                .iter()
                .map(|maps| spec.fractions.iter().map(|&f| top_fraction_mask(&maps[pi], f, &p.mask)).collect())
                .collect::<Result<_, _>>()?;
            for (ri, r) in readers.iter().enumerate() {
                let mine: Vec<&Fixation> = kept.iter().copied().filter(|f| &f.reader_id == r).collect();
                if mine.is_empty() {
                    continue;
                }
                let t = time_spent_map(&mine, dims, support)?;
                let masked_sum =
                    |m: &BinaryMask| -> f64 { t.data().iter().zip(m.data()).filter(|(_, &b)| b).map(|(v, _)| v).sum() };
                total[pi][ri] = masked_sum(&p.mask);
                for (oi, per_f) in masks.iter().enumerate() {
                    for (fi, m) in per_f.iter().enumerate() {
                        inside[fi][oi][pi][ri] = masked_sum(m);
                    }
                }
            }
        }

        let mut report = GazeReport { dropped_fixations: dropped, ..Default::default() };
        let mut curve_rows = Vec::new();
        let all_r: Vec<usize> = (0..readers.len()).collect();
        for (fi, &f) in spec.fractions.iter().enumerate() {
            for (oi, o) in observers.iter().enumerate() {
                let mut sum = 0.0;
                let mut n = 0;
                for pi in 0..np {
                    let t: f64 = all_r.iter().map(|&r| total[pi][r]).sum();
                    if t > 0.0 {
                        sum += 100.0 * inside[fi][oi][pi].iter().sum::<f64>() / t;
                        n += 1;
                    }
                }
                let mean = if n > 0 { sum / n as f64 } else { f64::NAN };
                curve_rows.push(OverlapRow { observer: o.name.clone(), fraction: f, mean_overlap: mean });
            }
            if observers.len() >= 2 {
                let table = TimeSpentTable {
                    phantoms: absent.iter().map(|p| p.entry.id.clone()).collect(),
                    readers: readers.clone(),
                    total: total.clone(),
                    inside: observers
                        .iter()
                        .enumerate()
                        .map(|(oi, o)| (o.name.clone(), inside[fi][oi].clone()))
                        .collect(),
                };
                let cfg = BootstrapConfig {
                    iterations: spec.iterations,
                    seed: self.seed(&[8, fi as u64]),
                    ..Default::default()
                };
                let r = bootstrap_time_spent(&table, &observers[0].name, &observers[1].name, &cfg)?;
                report.bootstrap.push(GazeBootstrapRow {
                    fraction: f,
                    observed_delta: r.observed_delta,
                    ci_low: r.ci_low,
                    ci_high: r.ci_high,
                    percentile_of_zero: r.percentile_of_zero,
                    p_value: r.p_value,
                });
            }
        }
        write_csv(&dir.join("overlap_curve.csv"), &curve_rows)?;
        if !report.bootstrap.is_empty() {
            write_csv(&dir.join("bootstrap.csv"), &report.bootstrap)?;
        }
        report.overlap = curve_rows;
        Ok(report)
    }
}

#[derive(Debug, Default, Serialize)]
pub struct DatasetReport {
    pub splits: BTreeMap<String, [usize; 2]>,
}

impl DatasetReport {
    fn count(&mut self, split: &str, m: &DatasetManifest) {
        let sp = m.entries.iter().filter(|e| e.label).count();
        self.splits.insert(split.to_string(), [sp, m.entries.len() - sp]);
    }
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dprime_ch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub n_present: usize,
    pub n_absent: usize,
}

#[derive(Debug, Serialize)]
pub struct AucPair {
    pub empirical: f64,
    pub parametric: f64,
}

#[derive(Debug, Default, Serialize)]
pub struct StatsReport {
    pub auc: BTreeMap<String, AucPair>,
    pub comparisons: BTreeMap<String, BootstrapResult>,
}

#[derive(Debug, Serialize)]
pub struct OverlapRow {
    pub observer: String,
    pub fraction: f64,
    pub mean_overlap: f64,
}

#[derive(Debug, Serialize)]
pub struct GazeBootstrapRow {
    pub fraction: f64,
    pub observed_delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub percentile_of_zero: f64,
    pub p_value: f64,
}

#[derive(Debug, Default, Serialize)]
pub struct GazeReport {
    pub dropped_fixations: usize,
    pub overlap: Vec<OverlapRow>,
    pub bootstrap: Vec<GazeBootstrapRow>,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub master_seed: u64,
    pub dataset: DatasetReport,
    pub training: BTreeMap<String, TrainReport>,
    pub stats: StatsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lke: Option<BTreeMap<String, Vec<LkePoint>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaze: Option<GazeReport>,
}

/// Every stage in order, then `summary.json`.
pub fn run_all(ctx: &Ctx) -> Result<Summary, StageError> {
    let dataset = tag("dataset", ctx.generate())?;
    let training = tag("train", ctx.train(None))?;
    tag("score", ctx.score())?;
    let lke = match ctx.cfg.task.lke {
        Some(_) => Some(tag("lke", ctx.lke(None))?),
        None => None,
    };
    let stats = tag("stats", ctx.stats(None))?;
    let gaze = match ctx.cfg.gaze {
        Some(_) => Some(tag("gaze", ctx.gaze())?),
        None => None,
    };
    let summary = Summary {
        schema_version: crate::config::SCHEMA_VERSION,
        experiment: ctx.cfg.experiment.clone(),
        master_seed: ctx.cfg.master_seed,
        dataset,
        training,
        stats,
        lke,
        gaze,
    };
    tag("summary", write_json(&ctx.out.join("summary.json"), &summary))?;
    Ok(summary)
}
