//! AUC estimators, score tables, and the reader-and-case bootstrap.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Wilcoxon AUC with ties counted one half.
pub fn auc_empirical(sp: &[f64], sa: &[f64]) -> Result<f64> {
    if sp.is_empty() || sa.is_empty() {
        return Err(Error::Insufficient("AUC needs scores in both classes".into()));
    }
    if let Some(i) = sp.iter().chain(sa).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut sorted = sa.to_vec();
    sorted.sort_by(f64::total_cmp);
    // twice the Mann-Whitney count, so ties stay integral
    let mut twice: u128 = 0;
    for &s in sp {
        let below = sorted.partition_point(|&a| a < s);
        let upto = sorted.partition_point(|&a| a <= s);
        twice += 2 * below as u128 + (upto - below) as u128;
    }
    let denom = 2 * sp.len() as u128 * sa.len() as u128;
    // evaluate the smaller side directly so auc(a,b) + auc(b,a) == 1
    Ok(if 2 * twice <= denom { twice as f64 / denom as f64 } else { 1.0 - (denom - twice) as f64 / denom as f64 })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn binormal(sp: &[f64], sa: &[f64]) -> (f64, bool) {
    let (m1, v1) = mean_var(sp);
    let (m0, v0) = mean_var(sa);
    let s = (v1 + v0).sqrt();
    if s > 0.0 {
        (normal_cdf((m1 - m0) / s), false)
    } else {
        let a = match m1.partial_cmp(&m0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => 0.0,
            _ => 0.5,
        };
        (a, true)
    }
}

/// Binormal AUC `Φ((μ₁ − μ₀) / sqrt(σ₁² + σ₀²))`.
pub fn auc_parametric(sp: &[f64], sa: &[f64]) -> Result<f64> {
    if sp.len() < 2 || sa.len() < 2 {
        return Err(Error::Insufficient(format!(
            "parametric AUC needs 2 scores per class, got {} / {}",
            sp.len(),
            sa.len()
        )));
    }
    let (a, degenerate) = binormal(sp, sa);
    if degenerate {
        log::warn!("both classes have zero variance; parametric AUC falls back to mean comparison");
    }
    Ok(a)
}

/// Linear-interpolation percentile (`q` in [0, 100]) of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Score CSV row: `phantom_id,label,score,observer,N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub phantom_id: String,
    pub label: u8,
    pub score: f64,
    pub observer: String,
    #[serde(rename = "N")]
    pub n: Option<usize>,
}

/// Reader CSV row: `reader_id,phantom_id,condition,rating`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderRating {
    pub reader_id: String,
    pub phantom_id: String,
    pub condition: String,
    pub rating: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Csv(format!("{} row {}: {e}", path.display(), i + 1))))
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record(header).map_err(|e| Error::Csv(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows: Vec<ScoreRow> = read_rows(path)?;
        let t = Self { rows };
        t.validate()?;
        Ok(t)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows, &["phantom_id", "label", "score", "observer", "N"])
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if r.label > 1 {
                return Err(Error::Csv(format!("label must be 0 or 1, got {} for {}", r.label, r.phantom_id)));
            }
            if !r.score.is_finite() {
                return Err(Error::Csv(format!("non-finite score for {}", r.phantom_id)));
            }
            if !seen.insert((&r.observer, r.n, &r.phantom_id)) {
                return Err(Error::Csv(format!(
                    "duplicate score for observer {} phantom {}",
                    r.observer, r.phantom_id
                )));
            }
        }
        Ok(())
    }

    pub fn observers(&self) -> Vec<String> {
        let set: BTreeSet<_> = self.rows.iter().map(|r| r.observer.clone()).collect();
        set.into_iter().collect()
    }

    /// Scores of one observer (rows with any `N`), keyed by phantom.
    pub fn scores(&self, observer: &str, n: Option<usize>) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .filter(|r| r.observer == observer && r.n == n)
            .map(|r| (r.phantom_id.clone(), r.score))
            .collect()
    }

    /// Phantom labels seen in the table.
    pub fn labels(&self) -> BTreeMap<String, bool> {
        self.rows.iter().map(|r| (r.phantom_id.clone(), r.label == 1)).collect()
    }

    /// Empirical and parametric AUC of one observer.
    pub fn auc(&self, observer: &str, n: Option<usize>) -> Result<(f64, f64)> {
        let (mut sp, mut sa) = (Vec::new(), Vec::new());
        for r in self.rows.iter().filter(|r| r.observer == observer && r.n == n) {
            if r.label == 1 {
                sp.push(r.score)
            } else {
                sa.push(r.score)
            }
        }
        Ok((auc_empirical(&sp, &sa)?, auc_parametric(&sp, &sa)?))
    }
}

pub fn read_ratings(path: &Path) -> Result<Vec<ReaderRating>> {
    let rows: Vec<ReaderRating> = read_rows(path)?;
    if let Some(r) = rows.iter().find(|r| !r.rating.is_finite()) {
        return Err(Error::Csv(format!("non-finite rating from {} on {}", r.reader_id, r.phantom_id)));
    }
    Ok(rows)
}

pub fn write_ratings(path: &Path, rows: &[ReaderRating]) -> Result<()> {
    write_rows(path, rows, &["reader_id", "phantom_id", "condition", "rating"])
}

/// Scores of one observer: a model with one score per phantom, or a reader
/// panel with per-reader scores over the phantoms each reader saw.
#[derive(Debug, Clone)]
pub enum ObserverScores {
    Model(BTreeMap<String, f64>),
    Panel(BTreeMap<String, BTreeMap<String, f64>>),
}

impl ObserverScores {
    /// Reader panel from rating rows of one condition.
    pub fn panel(ratings: &[ReaderRating], condition: &str) -> Self {
        let mut m: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for r in ratings.iter().filter(|r| r.condition == condition) {
            m.entry(r.reader_id.clone()).or_default().insert(r.phantom_id.clone(), r.rating);
        }
        ObserverScores::Panel(m)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PhantomPool {
    pub present: Vec<String>,
    pub absent: Vec<String>,
}

impl PhantomPool {
    pub fn from_labels(labels: &BTreeMap<String, bool>) -> Self {
        let mut p = Self::default();
        for (id, &l) in labels {
            if l {
                p.present.push(id.clone())
            } else {
                p.absent.push(id.clone())
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AucKind {
    Parametric,
    Empirical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub min_per_class: usize,
    pub seed: u64,
    pub auc: AucKind,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { iterations: 20_000, min_per_class: 6, seed: 0, auc: AucKind::Parametric }
    }
}

/// Attempts per valid iteration before the validity rule is declared
/// infeasible.
pub const MAX_ATTEMPT_FACTOR: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub observed_delta: f64,
    pub observed_a: f64,
    pub observed_b: f64,
    pub mean_delta: f64,
    pub std_delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub percentile_of_zero: f64,
    pub p_value: f64,
    pub iterations: usize,
    pub discarded: usize,
    #[serde(skip)]
    pub deltas: Vec<f64>,
}

impl BootstrapResult {
    pub fn from_deltas(observed: (f64, f64), deltas: Vec<f64>, discarded: usize) -> Self {
        let n = deltas.len();
        let mut sorted = deltas.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let pct = percentile_of_zero(&deltas);
        Self {
            observed_delta: observed.0 - observed.1,
            observed_a: observed.0,
            observed_b: observed.1,
            mean_delta: mean,
            std_delta: var.sqrt(),
            ci_low: percentile(&sorted, 2.5),
            ci_high: percentile(&sorted, 97.5),
            percentile_of_zero: pct,
            p_value: two_sided_p(pct, n),
            iterations: n,
            discarded,
            deltas,
        }
    }

    /// Histogram of the bootstrap differences as `bin_low,bin_high,count`.
    pub fn write_histogram(&self, path: &Path, bins: usize) -> Result<()> {
        let lo = self.deltas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = if hi > lo { bins.max(1) } else { 1 };
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 0.0 };
        let mut counts = vec![0usize; bins];
        for &d in &self.deltas {
            let b = if width > 0.0 { (((d - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in counts.iter().enumerate() {
            let a = lo + i as f64 * width;
            let b = if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width };
            out.push_str(&format!("{a},{b},{c}\n"));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Percentile rank of zero in the difference distribution; exact zeros
/// count one half, so an all-zero distribution sits at 50.
pub fn percentile_of_zero(deltas: &[f64]) -> f64 {
    let below = deltas.iter().filter(|&&d| d < 0.0).count() as f64;
    let zero = deltas.iter().filter(|&&d| d == 0.0).count() as f64;
    100.0 * (below + 0.5 * zero) / deltas.len() as f64
}

/// `2 * min(pct, 100 - pct) / 100`, floored at the resolution `1/(n+1)`
/// of an `n`-draw bootstrap and capped at 1.
pub fn two_sided_p(pct: f64, n: usize) -> f64 {
    let p = 2.0 * pct.min(100.0 - pct) / 100.0;
    p.max(1.0 / (n as f64 + 1.0)).min(1.0)
}

/// Runs `attempt(i)` over attempt indices in parallel chunks, keeping the
/// first `iterations` successes in index order.
pub(crate) fn collect_valid<F>(iterations: usize, attempt: F) -> Result<(Vec<f64>, usize)>
where
    F: Fn(usize) -> Option<f64> + Sync,
{
    if iterations == 0 {
        return Err(Error::InvalidParam("iterations must be >= 1".into()));
    }
    let cap = iterations.saturating_mul(MAX_ATTEMPT_FACTOR);
    let chunk = 4096;
    let mut kept = Vec::with_capacity(iterations);
    let mut next = 0;
    while kept.len() < iterations && next < cap {
        let end = (next + chunk).min(cap);
        let results: Vec<Option<f64>> = (next..end).into_par_iter().map(&attempt).collect();
        for (i, r) in results.into_iter().enumerate() {
            if let Some(d) = r {
                kept.push(d);
                if kept.len() == iterations {
                    return Ok((kept, next + i + 1 - iterations));
                }
            }
        }
        next = end;
    }
    Err(Error::Infeasible(format!(
        "only {} of {} attempts satisfied the validity rule ({:.1}% discarded)",
        kept.len(),
        next,
        100.0 * (next - kept.len()) as f64 / next.max(1) as f64
    )))
}

/// Observer scores indexed by pool position.
enum Indexed {
    Model(Vec<f64>),
    Panel(Vec<Option<Vec<Option<f64>>>>),
}

fn index_observer(o: &ObserverScores, ids: &[String], readers: &[String]) -> Result<Indexed> {
    match o {
        ObserverScores::Model(m) => ids
            .iter()
            .map(|id| {
                m.get(id).copied().ok_or_else(|| Error::Insufficient(format!("model has no score for phantom {id}")))
            })
            .collect::<Result<_>>()
            .map(Indexed::Model),
        ObserverScores::Panel(p) => Ok(Indexed::Panel(
            readers.iter().map(|r| p.get(r).map(|s| ids.iter().map(|id| s.get(id).copied()).collect())).collect(),
        )),
    }
}

fn class_auc(kind: AucKind, sp: &[f64], sa: &[f64]) -> f64 {
    match kind {
        AucKind::Parametric => binormal(sp, sa).0,
        AucKind::Empirical => auc_empirical(sp, sa).expect("classes checked non-empty"),
    }
}

/// AUC of an observer on a multiset of pool positions, or None when some
/// reader sees fewer than `min` phantoms of a class.
fn observer_auc(o: &Indexed, sp: &[usize], sa: &[usize], readers: &[usize], min: usize, kind: AucKind) -> Option<f64> {
    let min = min.max(2);
    match o {
        Indexed::Model(s) => {
            if sp.len() < min || sa.len() < min {
                return None;
            }
            let a: Vec<f64> = sp.iter().map(|&i| s[i]).collect();
            let b: Vec<f64> = sa.iter().map(|&i| s[i]).collect();
            Some(class_auc(kind, &a, &b))
        }
        Indexed::Panel(rs) => {
            let mut total = 0.0;
            let mut count = 0;
            for &r in readers {
                let Some(s) = &rs[r] else { continue };
                let a: Vec<f64> = sp.iter().filter_map(|&i| s[i]).collect();
                let b: Vec<f64> = sa.iter().filter_map(|&i| s[i]).collect();
                if a.len() < min || b.len() < min {
                    return None;
                }
                total += class_auc(kind, &a, &b);
                count += 1;
            }
            (count > 0).then(|| total / count as f64)
        }
    }
}

/// Reader-and-case bootstrap of `AUC(a) - AUC(b)`.
pub fn bootstrap_compare(
    a: &ObserverScores,
    b: &ObserverScores,
    pool: &PhantomPool,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if pool.present.is_empty() || pool.absent.is_empty() {
        return Err(Error::Insufficient("phantom pool needs both classes".into()));
    }
    let ids: Vec<String> = pool.present.iter().chain(&pool.absent).cloned().collect();
    let n_sp = pool.present.len();
    let n_sa = pool.absent.len();
    let mut reader_set = BTreeSet::new();
    for o in [a, b] {
        if let ObserverScores::Panel(p) = o {
            reader_set.extend(p.keys().cloned());
        }
    }
    let readers: Vec<String> = reader_set.into_iter().collect();
    let ia = index_observer(a, &ids, &readers)?;
    let ib = index_observer(b, &ids, &readers)?;
    let has_panel = !readers.is_empty();

    let all_sp: Vec<usize> = (0..n_sp).collect();
    let all_sa: Vec<usize> = (n_sp..n_sp + n_sa).collect();
    let all_r: Vec<usize> = (0..readers.len()).collect();
    let observed = |o: &Indexed| observer_auc(o, &all_sp, &all_sa, &all_r, 2, cfg.auc);
    let oa = observed(&ia).ok_or_else(|| Error::Insufficient("observer A lacks 2 scores per class".into()))?;
    let ob = observed(&ib).ok_or_else(|| Error::Insufficient("observer B lacks 2 scores per class".into()))?;

    let (deltas, discarded) = collect_valid(cfg.iterations, |i| {
        let mut rng = rng_from(cfg.seed, &[i as u64]);
        let sp: Vec<usize> = (0..n_sp).map(|_| rng.random_range(0..n_sp)).collect();
        let sa: Vec<usize> = (0..n_sa).map(|_| n_sp + rng.random_range(0..n_sa)).collect();
        let rs: Vec<usize> = if has_panel {
            (0..readers.len()).map(|_| rng.random_range(0..readers.len())).collect()
        } else {
            Vec::new()
        };
        let x = observer_auc(&ia, &sp, &sa, &rs, cfg.min_per_class, cfg.auc)?;
        let y = observer_auc(&ib, &sp, &sa, &rs, cfg.min_per_class, cfg.auc)?;
        Some(x - y)
    })?;
    Ok(BootstrapResult::from_deltas((oa, ob), deltas, discarded))
}

/// Convenience: per-phantom labels joined with model scores.
pub fn split_by_label(scores: &BTreeMap<String, f64>, labels: &HashMap<String, bool>) -> (Vec<f64>, Vec<f64>) {
    let (mut sp, mut sa) = (Vec::new(), Vec::new());
    for (id, &s) in scores {
        match labels.get(id) {
            Some(true) => sp.push(s),
            Some(false) => sa.push(s),
            None => {}
        }
    }
    (sp, sa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn hand_checked_aucs() {
        assert_eq!(auc_empirical(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc_empirical(&[1.0, 3.0], &[0.0, 2.0]).unwrap(), 0.75);
        assert_eq!(auc_empirical(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert!(auc_empirical(&[], &[1.0]).is_err());
    }

    #[test]
    fn parametric_reference_value() {
        // Φ(1/√2) = (1 + erf(1/2)) / 2, erf(1/2) from tables
        let expected = 0.5 * (1.0 + 0.520_499_877_813_046_5);
        // two-point classes with mean 1 / 0 and unit sample variance
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let sp = [1.0 - s, 1.0 + s];
        let sa = [-s, s];
        let a = auc_parametric(&sp, &sa).unwrap();
        assert!((a - expected).abs() < 1e-12, "{a}");
        assert!((expected - 0.7602).abs() < 1e-4);
    }

    #[test]
    fn parametric_degenerate_and_small() {
        assert_eq!(auc_parametric(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc_parametric(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(auc_parametric(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(auc_parametric(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn parametric_matches_empirical_for_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sp: Vec<f64> = (0..10_000).map(|_| 0.8 + rng.sample::<f64, _>(StandardNormal)).collect();
        let sa: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let e = auc_empirical(&sp, &sa).unwrap();
        let p = auc_parametric(&sp, &sa).unwrap();
        assert!((e - p).abs() < 0.01, "{e} vs {p}");
    }

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 100.0), 4.0);
        assert_eq!(percentile(&s, 50.0), 2.5);
    }

    #[test]
    fn p_value_convention() {
        assert_eq!(percentile_of_zero(&[0.0; 10]), 50.0);
        assert_eq!(two_sided_p(50.0, 10), 1.0);
        assert_eq!(two_sided_p(0.0, 19_999), 1.0 / 20_000.0);
        assert_eq!(percentile_of_zero(&[1.0, 2.0, -1.0, 0.0]), 37.5);
    }

    fn normal_model(rng: &mut ChaCha8Rng, ids: &[String], n_sp: usize, shift: f64) -> ObserverScores {
        ObserverScores::Model(
            ids.iter()
                .enumerate()
                .map(|(i, id)| {
                    let mu = if i < n_sp { shift } else { 0.0 };
                    (id.clone(), mu + rng.sample::<f64, _>(StandardNormal))
                })
                .collect(),
        )
    }

    fn pool(n: usize) -> (PhantomPool, Vec<String>) {
        let present: Vec<String> = (0..n).map(|i| format!("sp{i}")).collect();
        let absent: Vec<String> = (0..n).map(|i| format!("sa{i}")).collect();
        let ids = present.iter().chain(&absent).cloned().collect();
        (PhantomPool { present, absent }, ids)
    }

    #[test]
    fn self_comparison_is_degenerate() {
        let (p, ids) = pool(20);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = normal_model(&mut rng, &ids, 20, 1.0);
        let cfg = BootstrapConfig { iterations: 500, ..Default::default() };
        let r = bootstrap_compare(&a, &a, &p, &cfg).unwrap();
        assert!(r.deltas.iter().all(|&d| d == 0.0));
        assert_eq!(r.percentile_of_zero, 50.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let (p, ids) = pool(15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = normal_model(&mut rng, &ids, 15, 1.0);
        let b = normal_model(&mut rng, &ids, 15, 0.5);
        let cfg = BootstrapConfig { iterations: 300, seed: 9, ..Default::default() };
        let r1 = bootstrap_compare(&a, &b, &p, &cfg).unwrap();
        let r2 = bootstrap_compare(&a, &b, &p, &cfg).unwrap();
        assert_eq!(r1.deltas, r2.deltas);
        assert_eq!(r1.iterations, 300);
    }

    #[test]
    fn defaults_follow_protocol() {
        let c = BootstrapConfig::default();
        assert_eq!(c.iterations, 20_000);
        assert_eq!(c.min_per_class, 6);
    }

    #[test]
    fn sparse_readers_force_discards() {
        // Each reader saw only 6 of 12 phantoms per class, so many resamples
        // leave some reader with fewer than 6 of a class and get redrawn.
        let (p, ids) = pool(12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut panel = BTreeMap::new();
        for r in 0..4 {
            let mut s = BTreeMap::new();
            for (i, id) in ids.iter().enumerate() {
                if (i + r) % 2 == 0 {
                    s.insert(id.clone(), rng.random_range(1..=4) as f64 + if i < 12 { 1.0 } else { 0.0 });
                }
            }
            panel.insert(format!("r{r}"), s);
        }
        let readers = ObserverScores::Panel(panel);
        let model = normal_model(&mut rng, &ids, 12, 1.0);
        let cfg = BootstrapConfig { iterations: 50, ..Default::default() };
        let r = bootstrap_compare(&readers, &model, &p, &cfg).unwrap();
        assert_eq!(r.iterations, 50);
        assert!(r.discarded > 0);

        // tiny assignments can never satisfy the rule
        let (small, small_ids) = pool(5);
        let m = normal_model(&mut rng, &small_ids, 5, 1.0);
        let err = bootstrap_compare(&m, &m, &small, &BootstrapConfig { iterations: 10, ..Default::default() });
        assert!(matches!(err, Err(Error::Infeasible(_))));
    }

    #[test]
    fn score_table_roundtrip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let t = ScoreTable {
            rows: vec![
                ScoreRow { phantom_id: "a".into(), label: 1, score: 2.5, observer: "cho".into(), n: Some(1) },
                ScoreRow { phantom_id: "b".into(), label: 0, score: -1.0, observer: "cho".into(), n: None },
            ],
        };
        t.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("phantom_id,label,score,observer,N\n"));
        assert_eq!(ScoreTable::read_csv(&path).unwrap(), t);

        let dup = ScoreTable { rows: vec![t.rows[0].clone(), t.rows[0].clone()] };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn ratings_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![ReaderRating {
            reader_id: "r1".into(),
            phantom_id: "p".into(),
            condition: "2d_calc".into(),
            rating: 3.0,
        }];
        write_ratings(&path, &rows).unwrap();
        assert_eq!(read_ratings(&path).unwrap(), rows);
    }

    #[test]
    fn histogram_counts_everything() {
        let dir = tempfile::tempdir().unwrap();
        let r = BootstrapResult::from_deltas((0.8, 0.7), vec![0.1, 0.2, 0.2, 0.3], 0);
        let path = dir.path().join("h.csv");
        r.write_histogram(&path, 3).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let total: usize = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, 4);
        assert!((r.observed_delta - 0.1).abs() < 1e-15);
    }
}
