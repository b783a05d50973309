//! Template response maps by FFT cross-correlation, masked search scores,
//! and the location-known-exactly protocol with N candidate locations.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::RealPlan2d;
use crate::observers::{LinearTemplate, LinearTemplate3D};
use crate::rng::rng_from;
use crate::stats::{auc_empirical, percentile};
use crate::volume::{BinaryMask, Dims, Sample, Volume, Voxel};

/// Output slices transformed per batch; bounds the number of live spectra.
const BATCH: usize = 8;
/// Spectral block length for the fused multiply-accumulate.
const BLOCK: usize = 256;

/// A stack of 2D kernels applied to consecutive slices around the output
/// slice: tap `s` of `n` reads slice `z + s - n/2`.
#[derive(Debug, Clone)]
pub struct StackedKernel {
    taps: Vec<(f64, Volume<f64>)>,
}

impl StackedKernel {
    pub fn new(taps: Vec<(f64, Volume<f64>)>) -> Result<Self> {
        let Some((_, first)) = taps.first() else {
            return Err(Error::InvalidParam("kernel needs at least one tap".into()));
        };
        let d = first.dims();
        if !d.is_2d() || d.nx % 2 == 0 || d.ny % 2 == 0 {
            return Err(Error::InvalidParam(format!("kernel taps must be odd 2D planes, got {d}")));
        }
        if taps.len().is_multiple_of(2) {
            return Err(Error::InvalidParam(format!("tap count must be odd, got {}", taps.len())));
        }
        if let Some((_, k)) = taps.iter().find(|(_, k)| k.dims() != d) {
            return Err(Error::dims(d, k.dims()));
        }
        Ok(Self { taps })
    }

    pub fn single(kernel: Volume<f64>) -> Result<Self> {
        Self::new(vec![(1.0, kernel)])
    }

    pub fn from_template(t: &LinearTemplate) -> Self {
        Self::single(t.spatial_kernel().clone()).expect("bank kernels are odd 2D planes")
    }

    pub fn from_template_3d(t: &LinearTemplate3D) -> Self {
        Self::new(
            t.slice_weights.iter().zip(&t.slice_templates).map(|(&w, s)| (w, s.spatial_kernel().clone())).collect(),
        )
        .expect("slice templates share odd 2D dims")
    }

    pub fn depth(&self) -> usize {
        self.taps.len()
    }

    pub fn plane_dims(&self) -> Dims {
        self.taps[0].1.dims()
    }

    pub fn taps(&self) -> &[(f64, Volume<f64>)] {
        &self.taps
    }
}

/// Kernel spectra prepared for one in-plane phantom size; reusable across
/// phantoms of that size.
pub struct CorrelationPlan {
    plan: RealPlan2d,
    /// `w_s * conj(FFT(kernel_s))` with the kernel center wrapped to the origin.
    spectra: Vec<Vec<Complex64>>,
}

impl CorrelationPlan {
    pub fn new(nx: usize, ny: usize, kernel: &StackedKernel) -> Result<Self> {
        let kd = kernel.plane_dims();
        if kd.nx > nx || kd.ny > ny {
            return Err(Error::InvalidParam(format!("kernel {}x{} larger than phantom plane {nx}x{ny}", kd.nx, kd.ny)));
        }
        let plan = RealPlan2d::new(nx, ny);
        let (cx, cy) = ((kd.nx / 2) as isize, (kd.ny / 2) as isize);
        let offset = |i: usize, n: usize, c: isize| -> Option<usize> {
            let o = if i as isize <= c { i as isize } else { i as isize - n as isize };
            (o >= -c && o <= c).then(|| (o + c) as usize)
        };
        let spectra = kernel
            .taps()
            .par_iter()
            .map(|(w, k)| {
                let mut spec = vec![Complex64::default(); plan.spectrum_len()];
                plan.forward(
                    |i| match (offset(i % nx, nx, cx), offset(i / nx, ny, cy)) {
                        (Some(u), Some(v)) => k.data()[u + kd.nx * v],
                        _ => 0.0,
                    },
                    &mut spec,
                );
                spec.iter().map(|c| c.conj() * *w).collect()
            })
            .collect();
        Ok(Self { plan, spectra })
    }

    pub fn depth(&self) -> usize {
        self.spectra.len()
    }

    /// Circular correlation of every slice of `phantom`, circular in depth.
    pub fn apply<T: Sample, U: Sample>(&self, phantom: &Volume<T>) -> Result<Volume<U>> {
        let d = phantom.dims();
        if (d.nx, d.ny) != self.plan.dims() {
            return Err(Error::dims(format!("{:?} plane", self.plan.dims()), d));
        }
        let taps = self.depth();
        if taps > d.nz {
            return Err(Error::InvalidParam(format!("kernel depth {taps} exceeds phantom depth {}", d.nz)));
        }
        let plane = d.nx * d.ny;
        let len = self.plan.spectrum_len();
        let c = (taps / 2) as isize;
        let source = |z: usize, s: usize| (z as isize + s as isize - c).rem_euclid(d.nz as isize) as usize;

        let mut out = Volume::<U>::zeros(d).with_spacing(phantom.spacing_mm())?;
        let mut cache: HashMap<usize, Vec<Complex64>> = HashMap::new();
        let batch = BATCH.min(d.nz);
        for z0 in (0..d.nz).step_by(batch) {
            let zs: Vec<usize> = (z0..(z0 + batch).min(d.nz)).collect();
            let mut needed: Vec<usize> = zs.iter().flat_map(|&z| (0..taps).map(move |s| source(z, s))).collect();
            needed.sort_unstable();
            needed.dedup();
            cache.retain(|k, _| needed.binary_search(k).is_ok());
            let missing: Vec<usize> = needed.iter().copied().filter(|k| !cache.contains_key(k)).collect();
            let fresh: Vec<(usize, Vec<Complex64>)> = missing
                .par_iter()
                .map(|&z| {
                    let src = phantom.slice_data(z);
                    let mut spec = vec![Complex64::default(); len];
                    self.plan.forward(|i| src[i].to_f64(), &mut spec);
                    (z, spec)
                })
                .collect();
            cache.extend(fresh);

            // acc layout: [block][slice in batch][entry in block]
            let nb = zs.len();
            let mut acc = vec![Complex64::default(); nb * len];
            let inputs: Vec<Vec<&[Complex64]>> =
                zs.iter().map(|&z| (0..taps).map(|s| cache[&source(z, s)].as_slice()).collect()).collect();
            acc.par_chunks_mut(nb * BLOCK).enumerate().for_each(|(b, chunk)| {
                let start = b * BLOCK;
                let blk = chunk.len() / nb;
                for (j, row) in chunk.chunks_mut(blk).enumerate() {
                    for (s, k) in self.spectra.iter().enumerate() {
                        let x = &inputs[j][s][start..start + blk];
                        let k = &k[start..start + blk];
                        for ((a, xv), kv) in row.iter_mut().zip(x).zip(k) {
                            *a += xv * kv;
                        }
                    }
                }
            });
            let acc = &acc;
            out.data_mut()[z0 * plane..(z0 + nb) * plane].par_chunks_mut(plane).enumerate().for_each(|(j, dst)| {
                let mut spec = vec![Complex64::default(); len];
                for (b, chunk) in acc.chunks(nb * BLOCK).enumerate() {
                    let blk = chunk.len() / nb;
                    spec[b * BLOCK..b * BLOCK + blk].copy_from_slice(&chunk[j * blk..(j + 1) * blk]);
                }
                self.plan.inverse(&mut spec, |i, v| dst[i] = U::from_f64(v));
            });
        }
        Ok(out)
    }
}

/// Response map as f32: value at `v` is the kernel stack centered at `v`
/// dotted with the phantom (circular boundaries).
pub fn response_map<T: Sample>(phantom: &Volume<T>, kernel: &StackedKernel) -> Result<Volume<f32>> {
    response_map_as(phantom, kernel)
}

pub fn response_map_as<T: Sample, U: Sample>(phantom: &Volume<T>, kernel: &StackedKernel) -> Result<Volume<U>> {
    let d = phantom.dims();
    CorrelationPlan::new(d.nx, d.ny, kernel)?.apply(phantom)
}

/// Response map with its provenance.
#[derive(Debug, Clone)]
pub struct ResponseMap {
    pub values: Volume<f32>,
    pub template_id: String,
    pub phantom_id: String,
}

/// Masked maximum and its location; ties go to the lowest linear index.
pub fn search_score<T: Sample>(map: &Volume<T>, mask: &BinaryMask) -> Result<(f64, Voxel)> {
    if map.dims() != mask.dims() {
        return Err(Error::dims(map.dims(), mask.dims()));
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, (v, &m)) in map.data().iter().zip(mask.data()).enumerate() {
        let v = v.to_f64();
        if m && best.is_none_or(|(b, _)| v > b) {
            best = Some((v, i));
        }
    }
    let (v, i) = best.ok_or_else(|| Error::Insufficient("search mask is empty".into()))?;
    Ok((v, map.dims().coords(i)))
}

/// Maximum of `map` over the box of `extent` centered at `center`.
pub fn neighborhood_max<T: Sample>(map: &Volume<T>, center: Voxel, extent: [usize; 3]) -> Result<f64> {
    let d = map.dims();
    let spec = crate::volume::CropSpec::new(center, extent)?;
    let origin = spec
        .origin_in(d)
        .ok_or_else(|| Error::OutOfBounds(format!("neighborhood {extent:?} at {center:?} exceeds {d}")))?;
    let mut m = f64::NEG_INFINITY;
    for z in origin[2]..origin[2] + extent[2] {
        for y in origin[1]..origin[1] + extent[1] {
            let row = d.index(origin[0], y, z);
            for v in &map.data()[row..row + extent[0]] {
                m = m.max(v.to_f64());
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LkeConfig {
    pub n_locations: usize,
    pub neighborhood: [usize; 3],
    pub iterations: usize,
    pub seed: u64,
    /// Draw N random locations in addition to the signal for SP phantoms.
    pub signal_extra: bool,
}

impl Default for LkeConfig {
    fn default() -> Self {
        Self { n_locations: 1, neighborhood: [51, 51, 1], iterations: 10_000, seed: 0, signal_extra: false }
    }
}

impl LkeConfig {
    /// Default neighborhood for the map dimensionality (51x51 or 51x51x7).
    pub fn for_dims(dims: Dims) -> Self {
        let depth = if dims.is_2d() { 1 } else { 7 };
        Self { neighborhood: [51, 51, depth], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_locations == 0 || self.iterations == 0 {
            return Err(Error::InvalidParam("N and iterations must be >= 1".into()));
        }
        if self.neighborhood.iter().any(|&e| e % 2 == 0) {
            return Err(Error::InvalidParam(format!("neighborhood must be odd, got {:?}", self.neighborhood)));
        }
        Ok(())
    }
}

/// Masked map values sorted descending. The maximum over a random subset
/// of k locations is the value at the subset's smallest rank, so sampling
/// ranks without replacement is equivalent to sampling locations.
#[derive(Debug, Clone)]
pub struct LkeSampler {
    values: Vec<f64>,
}

impl LkeSampler {
    pub fn new<T: Sample>(map: &Volume<T>, mask: &BinaryMask) -> Result<Self> {
        if map.dims() != mask.dims() {
            return Err(Error::dims(map.dims(), mask.dims()));
        }
        let mut values: Vec<f64> =
            map.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(v, _)| v.to_f64()).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Max over `k` distinct uniformly drawn locations; None for k = 0.
    pub fn sample_max(&self, k: usize, rng: &mut impl Rng) -> Result<Option<f64>> {
        let m = self.values.len();
        if k > m {
            return Err(Error::Insufficient(format!("N = {k} exceeds {m} masked locations")));
        }
        if k == 0 {
            return Ok(None);
        }
        let rank = if k.saturating_mul(k) <= m {
            // partial Fisher-Yates over a virtual identity array
            let mut swapped: HashMap<usize, usize> = HashMap::with_capacity(2 * k);
            let mut best = usize::MAX;
            for t in 0..k {
                let j = rng.random_range(t..m);
                let pick = *swapped.get(&j).unwrap_or(&j);
                let at_t = *swapped.get(&t).unwrap_or(&t);
                swapped.insert(j, at_t);
                best = best.min(pick);
            }
            best
        } else {
            // selection sampling: rank r is the first chosen with
            // probability k / (m - r) given none before it
            let mut r = 0;
            while rng.random_range(0..m - r) >= k {
                r += 1;
            }
            r
        };
        Ok(Some(self.values[rank]))
    }
}

/// One phantom prepared for LKE resampling.
#[derive(Debug, Clone)]
pub struct LkeEntry {
    pub id: String,
    pub present: bool,
    /// Neighborhood max at the signal for signal-present phantoms.
    pub signal_value: Option<f64>,
    pub sampler: Arc<LkeSampler>,
}

impl LkeEntry {
    pub fn new<T: Sample>(
        id: &str,
        map: &Volume<T>,
        mask: &BinaryMask,
        signal_center: Option<Voxel>,
        neighborhood: [usize; 3],
    ) -> Result<Self> {
        let signal_value = signal_center.map(|c| neighborhood_max(map, c, neighborhood)).transpose()?;
        Ok(Self {
            id: id.to_string(),
            present: signal_center.is_some(),
            signal_value,
            sampler: Arc::new(LkeSampler::new(map, mask)?),
        })
    }

    pub fn score(&self, n: usize, signal_extra: bool, rng: &mut impl Rng) -> Result<f64> {
        match self.signal_value {
            Some(s) => {
                let k = if signal_extra { n } else { n - 1 };
                Ok(self.sampler.sample_max(k, rng)?.map_or(s, |r| r.max(s)))
            }
            None => Ok(self.sampler.sample_max(n, rng)?.expect("n >= 1")),
        }
    }
}

/// LKE score of one map with `cfg.n_locations` candidate locations.
pub fn lke_score<T: Sample>(
    map: &Volume<T>,
    signal_center: Option<Voxel>,
    cfg: &LkeConfig,
    mask: &BinaryMask,
    rng: &mut impl Rng,
) -> Result<f64> {
    cfg.validate()?;
    LkeEntry::new("", map, mask, signal_center, cfg.neighborhood)?.score(cfg.n_locations, cfg.signal_extra, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LkePoint {
    #[serde(rename = "N")]
    pub n: usize,
    pub mean_auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Scores of every entry for one resampling iteration.
pub fn lke_iteration_scores(entries: &[LkeEntry], n: usize, cfg: &LkeConfig, iteration: usize) -> Result<Vec<f64>> {
    let mut rng = rng_from(cfg.seed, &[n as u64, iteration as u64]);
    entries.iter().map(|e| e.score(n, cfg.signal_extra, &mut rng)).collect()
}

/// Mean AUC and 95% percentile interval over `cfg.iterations` resamplings
/// for each N.
pub fn lke_curve(entries: &[LkeEntry], ns: &[usize], cfg: &LkeConfig) -> Result<Vec<LkePoint>> {
    cfg.validate()?;
    if !entries.iter().any(|e| e.present) || entries.iter().all(|e| e.present) {
        return Err(Error::Insufficient("LKE curve needs signal-present and signal-absent phantoms".into()));
    }
    ns.iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::InvalidParam("N must be >= 1".into()));
            }
            let mut aucs = (0..cfg.iterations)
                .into_par_iter()
                .map(|it| {
                    let scores = lke_iteration_scores(entries, n, cfg, it)?;
                    let (mut sp, mut sa) = (Vec::new(), Vec::new());
                    for (e, s) in entries.iter().zip(scores) {
                        if e.present {
                            sp.push(s)
                        } else {
                            sa.push(s)
                        }
                    }
                    auc_empirical(&sp, &sa)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
            aucs.sort_by(f64::total_cmp);
            Ok(LkePoint { n, mean_auc: mean, ci_low: percentile(&aucs, 2.5), ci_high: percentile(&aucs, 97.5) })
        })
        .collect()
}
