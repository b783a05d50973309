//! Fixation time-spent maps and their overlap with the top-scoring
//! locations of model response maps.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::stats::{collect_valid, BootstrapConfig, BootstrapResult};
use crate::volume::{line_starts, BinaryMask, Dims, Sample, Volume, Voxel};

/// Default smoothing support for 3D maps.
pub const DEFAULT_SUPPORT: [usize; 3] = [45, 45, 3];

/// Top-fraction grid for overlap curves.
pub const FRACTION_GRID: [f64; 10] = [0.01, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45];

/// Smoothing support for a map: the default, with depth 1 for 2D maps.
pub fn support_for(dims: Dims) -> [usize; 3] {
    if dims.is_2d() {
        [45, 45, 1]
    } else {
        DEFAULT_SUPPORT
    }
}

/// Fixation CSV row: `reader_id,phantom_id,x,y,slice,onset_ms,duration_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub reader_id: String,
    pub phantom_id: String,
    pub x: f64,
    pub y: f64,
    pub slice: usize,
    pub onset_ms: f64,
    pub duration_ms: f64,
}

impl Fixation {
    /// Nearest voxel, or None when outside `dims`.
    pub fn voxel(&self, dims: Dims) -> Option<Voxel> {
        let (x, y) = (self.x.round(), self.y.round());
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let v = [x as usize, y as usize, self.slice];
        dims.contains(v).then_some(v)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixationLog {
    pub records: Vec<Fixation>,
}

impl FixationLog {
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, row) in r.deserialize::<Fixation>().enumerate() {
            let f = row.map_err(|e| Error::Csv(format!("{} row {}: {e}", path.display(), i + 1)))?;
            if !(f.duration_ms > 0.0) || !f.duration_ms.is_finite() {
                return Err(Error::Csv(format!(
                    "{} row {}: duration must be positive, got {}",
                    path.display(),
                    i + 1,
                    f.duration_ms
                )));
            }
            if !f.x.is_finite() || !f.y.is_finite() || !f.onset_ms.is_finite() {
                return Err(Error::Csv(format!("{} row {}: non-finite coordinate", path.display(), i + 1)));
            }
            records.push(f);
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        if self.records.is_empty() {
            w.write_record(["reader_id", "phantom_id", "x", "y", "slice", "onset_ms", "duration_ms"])
                .map_err(|e| Error::Csv(e.to_string()))?;
        }
        for f in &self.records {
            w.serialize(f).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn for_phantom(&self, phantom_id: &str) -> Vec<&Fixation> {
        self.records.iter().filter(|f| f.phantom_id == phantom_id).collect()
    }

    pub fn readers(&self) -> Vec<String> {
        let mut r: Vec<String> = self.records.iter().map(|f| f.reader_id.clone()).collect();
        r.sort();
        r.dedup();
        r
    }
}

/// Keeps fixations that land on a true mask voxel; returns them with the
/// number dropped.
pub fn filter_by_mask<'a>(fixations: &[&'a Fixation], mask: &BinaryMask) -> (Vec<&'a Fixation>, usize) {
    let (kept, dropped): (Vec<_>, Vec<_>) =
        fixations.iter().partition(|f| f.voxel(mask.dims()).is_some_and(|v| mask.at(v)));
    (kept, dropped.len())
}

/// Unit-sum Gaussian taps with sigma = support / 6.
pub fn gaussian_taps(support: usize) -> Vec<f64> {
    assert!(support % 2 == 1, "support must be odd");
    if support == 1 {
        return vec![1.0];
    }
    let sigma = support as f64 / 6.0;
    let c = (support / 2) as f64;
    let raw: Vec<f64> = (0..support).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn check_support(support: [usize; 3]) -> Result<()> {
    if support.iter().any(|&s| s % 2 == 0) {
        return Err(Error::InvalidParam(format!("smoothing support must be odd, got {support:?}")));
    }
    Ok(())
}

/// Separable Gaussian smoothing with zero boundaries.
pub fn gaussian_smooth<T: Sample>(v: &Volume<T>, support: [usize; 3]) -> Result<Volume<f64>> {
    check_support(support)?;
    let d = v.dims();
    let mut data: Vec<f64> = v.data().iter().map(|x| x.to_f64()).collect();
    let strides = [1, d.nx, d.nx * d.ny];
    for (axis, &s) in support.iter().enumerate() {
        if s == 1 {
            continue;
        }
        let taps = gaussian_taps(s);
        let h = (s / 2) as isize;
        let n = d.as_array()[axis];
        let stride = strides[axis];
        let starts: Vec<usize> = line_starts(d, axis).collect();
        let src = data.clone();
        let lines: Vec<(usize, Vec<f64>)> = starts
            .par_iter()
            .map(|&start| {
                let line: Vec<f64> = (0..n).map(|k| src[start + k * stride]).collect();
                let out = (0..n as isize)
                    .map(|i| {
                        let mut acc = 0.0;
                        for (t, w) in taps.iter().enumerate() {
                            let j = i + t as isize - h;
                            if j >= 0 && (j as usize) < n {
                                acc += w * line[j as usize];
                            }
                        }
                        acc
                    })
                    .collect();
                (start, out)
            })
            .collect();
        for (start, out) in lines {
            for (k, v) in out.into_iter().enumerate() {
                data[start + k * stride] = v;
            }
        }
    }
    Volume::from_vec(d, data).with_spacing(v.spacing_mm())
}

/// Smoothed map of fixation durations. Each fixation deposits its duration
/// spread by the unit-mass Gaussian; mass falling outside the volume is lost.
pub fn time_spent_map(fixations: &[&Fixation], dims: Dims, support: [usize; 3]) -> Result<Volume<f64>> {
    check_support(support)?;
    let taps: Vec<Vec<f64>> = support.iter().map(|&s| gaussian_taps(s)).collect();
    let half = support.map(|s| (s / 2) as isize);
    let mut out = Volume::<f64>::zeros(dims);
    for f in fixations {
        let Some(c) = f.voxel(dims) else { continue };
        for (k, wz) in taps[2].iter().enumerate() {
            let z = c[2] as isize + k as isize - half[2];
            if z < 0 || z >= dims.nz as isize {
                continue;
            }
            for (j, wy) in taps[1].iter().enumerate() {
                let y = c[1] as isize + j as isize - half[1];
                if y < 0 || y >= dims.ny as isize {
                    continue;
                }
                let wzy = f.duration_ms * wz * wy;
                let row = dims.index(0, y as usize, z as usize);
                for (i, wx) in taps[0].iter().enumerate() {
                    let x = c[0] as isize + i as isize - half[0];
                    if x >= 0 && x < dims.nx as isize {
                        out.data_mut()[row + x as usize] += wzy * wx;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Number of voxels selected for a fraction of `n`; products that land on
/// an integer up to rounding are not bumped to the next one.
fn top_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

/// The `ceil(fraction * |interior|)` highest interior voxels; ties at the
/// cut go to the lower linear index.
pub fn top_fraction_mask<T: Sample>(map: &Volume<T>, fraction: f64, interior: &BinaryMask) -> Result<BinaryMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParam(format!("fraction {fraction} outside (0, 1]")));
    }
    if map.dims() != interior.dims() {
        return Err(Error::dims(map.dims(), interior.dims()));
    }
    let mut idx = interior.indices();
    if idx.is_empty() {
        return Err(Error::Insufficient("interior mask is empty".into()));
    }
    let k = top_count(fraction, idx.len());
    let data = map.data();
    let order = |a: &usize, b: &usize| data[*b].to_f64().total_cmp(&data[*a].to_f64()).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
    }
    let mut m = BinaryMask::empty(map.dims());
    for &i in &idx[..k] {
        m.data_mut()[i] = true;
    }
    Ok(m)
}

/// Percent of interior time that falls inside `m`.
pub fn overlap_percentage(t: &Volume<f64>, m: &BinaryMask, interior: &BinaryMask) -> Result<f64> {
    if t.dims() != m.dims() || t.dims() != interior.dims() {
        return Err(Error::dims(t.dims(), m.dims()));
    }
    let (mut inside, mut total) = (0.0, 0.0);
    for ((v, &a), &b) in t.data().iter().zip(m.data()).zip(interior.data()) {
        if b {
            total += v;
            if a {
                inside += v;
            }
        }
    }
    if !(total > 0.0) {
        return Err(Error::Degenerate("no fixation time inside the interior".into()));
    }
    Ok(100.0 * inside / total)
}

/// Smooths the response map, then reports the overlap of the time-spent
/// map with each top fraction of it.
pub fn overlap_curve<T: Sample>(
    response: &Volume<T>,
    time_map: &Volume<f64>,
    interior: &BinaryMask,
    support: [usize; 3],
    fractions: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let smooth = gaussian_smooth(response, support)?;
    fractions
        .iter()
        .map(|&f| {
            let m = top_fraction_mask(&smooth, f, interior)?;
            Ok((f, overlap_percentage(time_map, &m, interior)?))
        })
        .collect()
}

/// Interior time per (phantom, reader) and in-mask time per observer, for
/// one top fraction. Indexed `[phantom][reader]`.
#[derive(Debug, Clone)]
pub struct TimeSpentTable {
    pub phantoms: Vec<String>,
    pub readers: Vec<String>,
    pub total: Vec<Vec<f64>>,
    pub inside: Vec<(String, Vec<Vec<f64>>)>,
}

impl TimeSpentTable {
    fn observer(&self, name: &str) -> Result<&Vec<Vec<f64>>> {
        self.inside
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::InvalidParam(format!("observer {name} not in time-spent table")))
    }

    /// Mean over phantoms of the reader-pooled overlap percentage.
    fn mean_overlap(&self, inside: &[Vec<f64>], phantoms: &[usize], readers: &[usize]) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for &p in phantoms {
            let total: f64 = readers.iter().map(|&r| self.total[p][r]).sum();
            if total > 0.0 {
                sum += 100.0 * readers.iter().map(|&r| inside[p][r]).sum::<f64>() / total;
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// Bootstrap of the mean-overlap difference between two observers,
/// resampling signal-absent phantoms and readers with replacement.
pub fn bootstrap_time_spent(
    table: &TimeSpentTable,
    a: &str,
    b: &str,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let ia = table.observer(a)?;
    let ib = table.observer(b)?;
    let (np, nr) = (table.phantoms.len(), table.readers.len());
    if np == 0 || nr == 0 {
        return Err(Error::Insufficient("time-spent table has no phantoms or readers".into()));
    }
    let all_p: Vec<usize> = (0..np).collect();
    let all_r: Vec<usize> = (0..nr).collect();
    let oa =
        table.mean_overlap(ia, &all_p, &all_r).ok_or_else(|| Error::Degenerate("no fixation time recorded".into()))?;
    let ob = table.mean_overlap(ib, &all_p, &all_r).expect("same totals as observer a");
    let (deltas, discarded) = collect_valid(cfg.iterations, |i| {
        let mut rng = rng_from(cfg.seed, &[i as u64]);
        let ps: Vec<usize> = (0..np).map(|_| rng.random_range(0..np)).collect();
        let rs: Vec<usize> = (0..nr).map(|_| rng.random_range(0..nr)).collect();
        Some(table.mean_overlap(ia, &ps, &rs)? - table.mean_overlap(ib, &ps, &rs)?)
    })?;
    Ok(BootstrapResult::from_deltas((oa, ob), deltas, discarded))
}

/// Synthetic fixations: a share `hot_share` near the given hot spots
/// (Gaussian jitter of `spread` voxels in-plane), the rest uniform.
#[derive(Debug, Clone)]
pub struct SyntheticGaze {
    pub reader_id: String,
    pub phantom_id: String,
    pub dims: Dims,
    pub hot_spots: Vec<Voxel>,
    pub hot_share: f64,
    pub spread: f64,
    pub n_fixations: usize,
    pub seed: u64,
}

pub fn synthetic_fixations(spec: &SyntheticGaze) -> Vec<Fixation> {
    let mut rng = rng_from(spec.seed, &[]);
    let d = spec.dims;
    let mut onset = 0.0;
    (0..spec.n_fixations)
        .map(|_| {
            let (x, y, z) = if !spec.hot_spots.is_empty() && rng.random::<f64>() < spec.hot_share {
                let c = spec.hot_spots[rng.random_range(0..spec.hot_spots.len())];
                let jx: f64 = rng.sample(StandardNormal);
                let jy: f64 = rng.sample(StandardNormal);
                (
                    (c[0] as f64 + spec.spread * jx).clamp(0.0, (d.nx - 1) as f64),
                    (c[1] as f64 + spec.spread * jy).clamp(0.0, (d.ny - 1) as f64),
                    c[2],
                )
            } else {
                (rng.random_range(0..d.nx) as f64, rng.random_range(0..d.ny) as f64, rng.random_range(0..d.nz))
            };
            let duration = rng.random_range(100.0..500.0);
            let f = Fixation {
                reader_id: spec.reader_id.clone(),
                phantom_id: spec.phantom_id.clone(),
                x,
                y,
                slice: z,
                onset_ms: onset,
                duration_ms: duration,
            };
            onset += duration;
            f
        })
        .collect()
}
