//! Channelized linear observers: channel responses, Hotelling templates in
//! channel space, and the two-stage 3D template with per-slice weights.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{BankKind, ChannelBank, GaborParams};
use crate::error::{Error, Result};
use crate::io::{load_volume, save_volume, VolumeKind};
use crate::rng::rng_from;
use crate::volume::{crop, BinaryMask, CropSpec, Dims, Sample, Volume, Voxel};

/// Relative singular-value cutoff of the pseudo-inverse.
pub const PINV_RCOND: f64 = 1e-10;

/// Channel responses, one column per crop: entry `(c, s)` is the dot
/// product of kernel `c` with crop `s`.
pub fn channel_responses<T: Sample>(bank: &ChannelBank, crops: &[Volume<T>]) -> Result<DMatrix<f64>> {
    let kd = bank.kernel_dims();
    if let Some(c) = crops.iter().find(|c| c.dims() != kd) {
        return Err(Error::dims(kd, c.dims()));
    }
    let columns: Vec<Vec<f64>> =
        crops.par_iter().map(|c| bank.kernels().iter().map(|k| k.dot(c).expect("dims checked")).collect()).collect();
    let mut m = DMatrix::zeros(bank.len(), crops.len());
    for (j, col) in columns.iter().enumerate() {
        m.column_mut(j).copy_from_slice(col);
    }
    Ok(m)
}

/// Symmetric pseudo-inverse with eigenvalues below `PINV_RCOND * max|λ|`
/// treated as zero. Returns the inverse and the number of dropped modes.
pub fn pinv_symmetric(k: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(k.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = PINV_RCOND * max;
    let mut dropped = 0;
    let inv_vals = eig.eigenvalues.map(|v| {
        if v.abs() > cutoff && max > 0.0 {
            1.0 / v
        } else {
            dropped += 1;
            0.0
        }
    });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&inv_vals) * v.transpose(), dropped)
}

fn class_stats(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.ncols();
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / (n as f64 - 1.0);
    (mean, cov)
}

/// Hotelling solution in a feature space: mean difference, pooled
/// covariance, weights and detectability.
#[derive(Debug, Clone)]
pub struct Hotelling {
    pub mean_difference: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub dprime: f64,
}

/// `present` and `absent` hold one feature vector per column.
pub fn hotelling(present: &DMatrix<f64>, absent: &DMatrix<f64>, ridge: f64) -> Result<Hotelling> {
    if present.ncols() < 2 || absent.ncols() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 samples per class, got {} present / {} absent",
            present.ncols(),
            absent.ncols()
        )));
    }
    if present.nrows() != absent.nrows() {
        return Err(Error::dims(present.nrows(), absent.nrows()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidParam(format!("ridge must be >= 0, got {ridge}")));
    }
    let (mp, kp) = class_stats(present);
    let (ma, ka) = class_stats(absent);
    let mean_difference = mp - ma;
    let pooled = (kp + ka) * 0.5;
    let covariance = (&pooled + pooled.transpose()) * 0.5;

    let (k_inv, dropped) = pinv_symmetric(&covariance);
    let weights = if ridge > 0.0 {
        let n = covariance.nrows();
        let (reg_inv, _) = pinv_symmetric(&(&covariance + DMatrix::identity(n, n) * ridge));
        &reg_inv * &mean_difference
    } else {
        if dropped > 0 {
            log::warn!("channel covariance is singular: {dropped} modes dropped by the pseudo-inverse");
        }
        &k_inv * &mean_difference
    };
    let d2 = mean_difference.dot(&(&k_inv * &mean_difference));
    Ok(Hotelling { mean_difference, covariance, weights, dprime: d2.max(0.0).sqrt() })
}

/// Trained 2D linear template.
#[derive(Debug, Clone)]
pub struct LinearTemplate {
    pub weights: Vec<f64>,
    pub mean_channel_signal: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub dprime: f64,
    pub ridge: f64,
    pub bank_kind: BankKind,
    pub bank_params: GaborParams,
    pub n_present: usize,
    pub n_absent: usize,
    spatial_kernel: Volume<f64>,
}

impl LinearTemplate {
    /// `sum_c W_c * kernel_c`; scoring a crop with it equals `W . responses`.
    pub fn spatial_kernel(&self) -> &Volume<f64> {
        &self.spatial_kernel
    }

    /// Rebuilds a template from its parts (file import, tests).
    pub fn from_parts(
        bank: &ChannelBank,
        weights: Vec<f64>,
        mean_channel_signal: Vec<f64>,
        covariance: DMatrix<f64>,
        dprime: f64,
        ridge: f64,
    ) -> Result<Self> {
        if weights.len() != bank.len() {
            return Err(Error::dims(bank.len(), weights.len()));
        }
        let spatial_kernel = combine_kernels(bank, &weights);
        Ok(Self {
            weights,
            mean_channel_signal,
            covariance,
            dprime,
            ridge,
            bank_kind: bank.kind(),
            bank_params: bank.params().clone(),
            n_present: 0,
            n_absent: 0,
            spatial_kernel,
        })
    }

    /// Scalar response of one crop.
    pub fn score<T: Sample>(&self, crop: &Volume<T>) -> Result<f64> {
        self.spatial_kernel.dot(crop)
    }
}

/// Weighted sum of bank kernels.
pub fn spatial_kernel(bank: &ChannelBank, weights: &[f64]) -> Result<Volume<f64>> {
    if weights.len() != bank.len() {
        return Err(Error::dims(bank.len(), weights.len()));
    }
    Ok(combine_kernels(bank, weights))
}

fn combine_kernels(bank: &ChannelBank, weights: &[f64]) -> Volume<f64> {
    let dims = bank.kernel_dims();
    let mut acc = vec![0.0; dims.len()];
    for (k, &w) in bank.kernels().iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(k.data()) {
            *a += w * v;
        }
    }
    Volume::from_vec(dims, acc)
}

/// Hotelling template in channel space: `W = pinv(K + ridge I) S_ch` with
/// `K` the average of the two class covariances.
pub fn train_template<T: Sample>(
    bank: &ChannelBank,
    sp_crops: &[Volume<T>],
    sa_crops: &[Volume<T>],
    ridge: f64,
) -> Result<LinearTemplate> {
    if sp_crops.len() < 2 || sa_crops.len() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 crops per class, got {} present / {} absent",
            sp_crops.len(),
            sa_crops.len()
        )));
    }
    let vp = channel_responses(bank, sp_crops)?;
    let va = channel_responses(bank, sa_crops)?;
    let h = hotelling(&vp, &va, ridge)?;
    let weights: Vec<f64> = h.weights.iter().copied().collect();
    let spatial_kernel = combine_kernels(bank, &weights);
    Ok(LinearTemplate {
        weights,
        mean_channel_signal: h.mean_difference.iter().copied().collect(),
        covariance: h.covariance,
        dprime: h.dprime,
        ridge,
        bank_kind: bank.kind(),
        bank_params: bank.params().clone(),
        n_present: sp_crops.len(),
        n_absent: sa_crops.len(),
        spatial_kernel,
    })
}

/// Per-slice 2D templates combined by slice weights.
#[derive(Debug, Clone)]
pub struct LinearTemplate3D {
    pub slice_templates: Vec<LinearTemplate>,
    /// Unit L2 norm, oriented so that `w . mean_difference >= 0`.
    pub slice_weights: Vec<f64>,
    /// Covariance of the per-slice template outputs.
    pub slice_covariance: DMatrix<f64>,
    pub dprime: f64,
}

impl LinearTemplate3D {
    pub fn n_slices(&self) -> usize {
        self.slice_templates.len()
    }

    pub fn score<T: Sample>(&self, stack: &Volume<T>) -> Result<f64> {
        let n = self.n_slices();
        if stack.dims().nz != n {
            return Err(Error::dims(format!("{n} slices"), stack.dims()));
        }
        let mut s = 0.0;
        for (z, (t, w)) in self.slice_templates.iter().zip(&self.slice_weights).enumerate() {
            s += w * t.score(&stack.slice(z)?)?;
        }
        Ok(s)
    }
}

/// Two-stage training: a 2D template per slice, then a Hotelling
/// combination of the per-slice template outputs at the aligned center.
pub fn train_template_3d<T: Sample>(
    bank: &ChannelBank,
    sp_stacks: &[Volume<T>],
    sa_stacks: &[Volume<T>],
    n_slices: usize,
    ridge: f64,
) -> Result<LinearTemplate3D> {
    if n_slices.is_multiple_of(2) {
        return Err(Error::InvalidParam(format!("n_slices must be odd, got {n_slices}")));
    }
    let kd = bank.kernel_dims();
    let want = Dims::d3(kd.nx, kd.ny, n_slices);
    if let Some(s) = sp_stacks.iter().chain(sa_stacks).find(|s| s.dims() != want) {
        return Err(Error::dims(want, s.dims()));
    }
    let slices_of = |stacks: &[Volume<T>], z: usize| -> Vec<Volume<T>> {
        stacks.iter().map(|s| s.slice(z).expect("dims checked")).collect()
    };
    let slice_templates = (0..n_slices)
        .map(|z| train_template(bank, &slices_of(sp_stacks, z), &slices_of(sa_stacks, z), ridge))
        .collect::<Result<Vec<_>>>()?;

    let features = |stacks: &[Volume<T>]| -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = stacks
            .par_iter()
            .map(|s| {
                slice_templates
                    .iter()
                    .enumerate()
                    .map(|(z, t)| {
                        let plane = Volume::from_vec(kd, s.slice_data(z).to_vec());
                        t.score(&plane).expect("dims checked")
                    })
                    .collect()
            })
            .collect();
        DMatrix::from_fn(n_slices, stacks.len(), |r, c| cols[c][r])
    };
    let h = hotelling(&features(sp_stacks), &features(sa_stacks), 0.0)?;
    let slice_weights = if n_slices == 1 {
        vec![1.0]
    } else {
        let norm = h.weights.norm();
        if !(norm > 0.0) {
            return Err(Error::Degenerate("slice weights vanish (no mean difference)".into()));
        }
        h.weights.iter().map(|w| w / norm).collect()
    };
    Ok(LinearTemplate3D { slice_templates, slice_weights, slice_covariance: h.covariance, dprime: h.dprime })
}

/// Crops for training. Signal-present crops are taken at the signal center;
/// signal-absent crops at random interior centers, with their depth drawn
/// from the signal-present centers so 3D stacks are depth-matched.
#[derive(Debug, Clone, Copy)]
pub struct CropPlan {
    pub extent: usize,
    /// 1 for 2D crops, odd depth for 3D stacks.
    pub depth: usize,
    pub absent_per_phantom: usize,
    pub seed: u64,
}

impl Default for CropPlan {
    fn default() -> Self {
        Self { extent: 101, depth: 1, absent_per_phantom: 10, seed: 0 }
    }
}

pub struct TrainingCrops {
    pub present: Vec<Volume<f32>>,
    pub absent: Vec<Volume<f32>>,
}

/// `phantoms` pairs each volume with its signal center (None if absent)
/// and its interior mask.
pub fn extract_training_crops(
    phantoms: &[(&Volume<f32>, Option<Voxel>, &BinaryMask)],
    plan: &CropPlan,
) -> Result<TrainingCrops> {
    if plan.extent.is_multiple_of(2) || plan.depth.is_multiple_of(2) {
        return Err(Error::InvalidParam("crop extent and depth must be odd".into()));
    }
    let extent = [plan.extent, plan.extent, plan.depth];
    let mut present = Vec::new();
    let mut depths = Vec::new();
    for (v, center, _) in phantoms {
        if let Some(c) = center {
            let spec = CropSpec::new(*c, extent)?;
            present.push(crop(v, &spec)?);
            depths.push(c[2]);
        }
    }
    let mut absent = Vec::new();
    for (i, (v, center, mask)) in phantoms.iter().enumerate() {
        if center.is_some() {
            continue;
        }
        let d = v.dims();
        let mut rng = rng_from(plan.seed, &[i as u64]);
        let z_choices: Vec<usize> = if d.nz == 1 {
            vec![0]
        } else if depths.is_empty() {
            vec![d.nz / 2]
        } else {
            depths.clone()
        };
        for _ in 0..plan.absent_per_phantom {
            let z = z_choices[rng.random_range(0..z_choices.len())];
            let candidates: Vec<usize> = (0..d.nx * d.ny)
                .map(|p| p + d.nx * d.ny * z)
                .filter(|&p| mask.data()[p] && CropSpec { center: d.coords(p), extent }.fits(d))
                .collect();
            if candidates.is_empty() {
                return Err(Error::Infeasible(format!("no interior location on slice {z} fits a {extent:?} crop")));
            }
            let c = d.coords(candidates[rng.random_range(0..candidates.len())]);
            absent.push(crop(v, &CropSpec { center: c, extent })?);
        }
    }
    Ok(TrainingCrops { present, absent })
}

#[derive(Debug, Serialize, Deserialize)]
struct TemplateSlice {
    weights: Vec<f64>,
    mean_channel_signal: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    dprime_ch: f64,
    kernel: String,
}

/// JSON template file: weights, detectability and bank parameters, with the
/// spatial kernels as `.f32` volumes beside it.
#[derive(Debug, Serialize, Deserialize)]
pub struct TemplateFile {
    pub observer: String,
    pub bank_kind: BankKind,
    pub bank_params: GaborParams,
    pub ridge: f64,
    pub dprime_ch: f64,
    pub n_present: usize,
    pub n_absent: usize,
    pub slice_weights: Vec<f64>,
    slices: Vec<TemplateSlice>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TemplateFile {
    pub fn from_2d(observer: &str, t: &LinearTemplate) -> Self {
        Self::build(observer, std::slice::from_ref(t), vec![1.0], t.dprime)
    }

    pub fn from_3d(observer: &str, t: &LinearTemplate3D) -> Self {
        Self::build(observer, &t.slice_templates, t.slice_weights.clone(), t.dprime)
    }

    fn build(observer: &str, ts: &[LinearTemplate], slice_weights: Vec<f64>, dprime: f64) -> Self {
        let first = &ts[0];
        Self {
            observer: observer.to_string(),
            bank_kind: first.bank_kind,
            bank_params: first.bank_params.clone(),
            ridge: first.ridge,
            dprime_ch: dprime,
            n_present: first.n_present,
            n_absent: first.n_absent,
            slice_weights,
            slices: ts
                .iter()
                .enumerate()
                .map(|(i, t)| TemplateSlice {
                    weights: t.weights.clone(),
                    mean_channel_signal: t.mean_channel_signal.clone(),
                    covariance: matrix_rows(&t.covariance),
                    dprime_ch: t.dprime,
                    kernel: format!("{observer}_kernel_{i:02}.f32"),
                })
                .collect(),
        }
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    /// Writes `<dir>/<observer>.json` and the kernel volumes.
    pub fn save(&self, dir: &Path, kernels: &[&Volume<f64>]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, k) in self.slices.iter().zip(kernels) {
            save_volume(*k, &dir.join(&s.kernel), VolumeKind::Response)?;
        }
        let path = dir.join(format!("{}.json", self.observer));
        fs::write(&path, serde_json::to_vec_pretty(self).expect("template serializes")).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Metadata { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Loads the per-slice spatial kernels (stored as f32) next to `path`.
    pub fn load_kernels(&self, path: &Path) -> Result<Vec<Volume<f64>>> {
        let dir = path.parent().unwrap_or(Path::new("."));
        self.slices.iter().map(|s| load_volume(&dir.join(&s.kernel)).map(|v| v.cast::<f64>())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{gabor_bank, GaborParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(dims: Dims, rng: &mut ChaCha8Rng) -> Volume<f64> {
        Volume::from_fn(dims, |_, _, _| rng.sample(StandardNormal))
    }

    fn bank(extent: usize) -> ChannelBank {
        gabor_bank(&GaborParams::from_pixels_per_cycle(4, &[4.0, 8.0, 16.0], extent)).unwrap()
    }

    #[test]
    fn zero_crops_give_zero_responses() {
        let b = bank(11);
        let crops = vec![Volume::<f32>::zeros(Dims::d2(11, 11)); 5];
        let r = channel_responses(&b, &crops).unwrap();
        assert_eq!(r.shape(), (24, 5));
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standard_bank_response_shape() {
        let b = gabor_bank(&GaborParams::standard(101)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let crops: Vec<_> = (0..576).map(|_| noise(Dims::d2(101, 101), &mut rng)).collect();
        let r = channel_responses(&b, &crops).unwrap();
        assert_eq!(r.shape(), (80, 576));
        let t = train_template(&b, &crops[..300], &crops[300..], 0.0).unwrap();
        assert_eq!(t.covariance.shape(), (80, 80));
        assert_eq!(t.mean_channel_signal.len(), 80);
    }

    #[test]
    fn kernel_crops_reproduce_gram_matrix() {
        let b = bank(13);
        let r = channel_responses(&b, b.kernels()).unwrap();
        for i in 0..b.len() {
            for j in 0..b.len() {
                let direct: f64 = b.kernels()[i].data().iter().zip(b.kernels()[j].data()).map(|(a, c)| a * c).sum();
                assert!((r[(i, j)] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let b = bank(11);
        let crops = vec![Volume::<f32>::zeros(Dims::d2(9, 9))];
        assert!(channel_responses(&b, &crops).is_err());
    }

    #[test]
    fn identical_classes_give_zero_template() {
        let b = bank(11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let crops: Vec<_> = (0..50).map(|_| noise(Dims::d2(11, 11), &mut rng)).collect();
        let t = train_template(&b, &crops, &crops, 0.0).unwrap();
        assert!(t.weights.iter().all(|&w| w == 0.0));
        assert_eq!(t.dprime, 0.0);
    }

    #[test]
    fn needs_two_crops_per_class() {
        let b = bank(11);
        let one = vec![Volume::<f32>::zeros(Dims::d2(11, 11))];
        let two = vec![Volume::<f32>::zeros(Dims::d2(11, 11)); 2];
        assert!(matches!(train_template(&b, &one, &two, 0.0), Err(Error::Insufficient(_))));
    }

    #[test]
    fn white_noise_template_aligns_with_whitened_signal() {
        // For white noise the channel covariance is the Gram matrix G, so
        // W -> G^-1 S_ch; with 1e4 crops the estimate should sit within 5
        // degrees of the analytic limit.
        let b = bank(15);
        let d = Dims::d2(15, 15);
        let sig = Volume::from_fn(d, |x, y, _| {
            let r2 = (x as f64 - 7.0).powi(2) + (y as f64 - 7.0).powi(2);
            1.5 * (-r2 / 6.0).exp()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let sp: Vec<_> = (0..n)
            .map(|_| {
                let mut c = noise(d, &mut rng);
                c.data_mut().iter_mut().zip(sig.data()).for_each(|(a, s)| *a += s);
                c
            })
            .collect();
        let sa: Vec<_> = (0..n).map(|_| noise(d, &mut rng)).collect();
        let t = train_template(&b, &sp, &sa, 0.0).unwrap();

        let gram = channel_responses(&b, b.kernels()).unwrap();
        let s_true = channel_responses(&b, std::slice::from_ref(&sig)).unwrap().column(0).into_owned();
        let (g_inv, _) = pinv_symmetric(&gram);
        let w_true = &g_inv * &s_true;
        let w = DVector::from_vec(t.weights.clone());
        // compare in the metric where the angle is well conditioned: the
        // spatial templates
        let a = spatial_kernel(&b, w.as_slice()).unwrap();
        let e = spatial_kernel(&b, w_true.as_slice()).unwrap();
        let cos = a.dot(&e).unwrap() / (a.l2_norm() * e.l2_norm());
        let angle = cos.clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 5.0, "angle {angle}");
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let b = bank(11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sp: Vec<_> = (0..40).map(|_| noise(Dims::d2(11, 11), &mut rng)).collect();
        let sa: Vec<_> = (0..40).map(|_| noise(Dims::d2(11, 11), &mut rng)).collect();
        let t = train_template(&b, &sp, &sa, 0.0).unwrap();
        let k = &t.covariance;
        assert_eq!(k, &k.transpose());
        let eig = SymmetricEigen::new(k.clone());
        let tr = k.trace();
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-8 * tr));
    }

    #[test]
    fn ridge_shrinks_weights() {
        let b = bank(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sp: Vec<_> = (0..30).map(|_| noise(Dims::d2(11, 11), &mut rng).map(|v| v + 0.3)).collect();
        let sa: Vec<_> = (0..30).map(|_| noise(Dims::d2(11, 11), &mut rng)).collect();
        let plain = train_template(&b, &sp, &sa, 0.0).unwrap();
        let reg = train_template(&b, &sp, &sa, 100.0).unwrap();
        let n = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n(&reg.weights) < n(&plain.weights));
        assert_eq!(reg.dprime, plain.dprime);
    }

    #[test]
    fn spatial_kernel_linearity() {
        let b = bank(9);
        let zero = spatial_kernel(&b, &vec![0.0; b.len()]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let single =
            ChannelBank::from_kernels(vec![b.kernels()[3].clone()], BankKind::Gabor, b.params().clone()).unwrap();
        let k = spatial_kernel(&single, &[2.0]).unwrap();
        for (a, c) in k.data().iter().zip(b.kernels()[3].data()) {
            assert_eq!(*a, 2.0 * c);
        }
    }

    #[test]
    fn spatial_kernel_matches_channel_route() {
        let b = gabor_bank(&GaborParams::standard(21)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w: Vec<f64> = (0..80).map(|_| rng.sample(StandardNormal)).collect();
        let kernel = spatial_kernel(&b, &w).unwrap();
        let crops: Vec<_> = (0..100).map(|_| noise(Dims::d2(21, 21), &mut rng)).collect();
        let r = channel_responses(&b, &crops).unwrap();
        for (j, c) in crops.iter().enumerate() {
            let direct = kernel.dot(c).unwrap();
            let via: f64 = (0..80).map(|i| w[i] * r[(i, j)]).sum();
            assert!((direct - via).abs() <= 1e-10 * via.abs().max(1e-300), "{direct} vs {via}");
        }
    }

    #[test]
    fn single_slice_3d_reduces_to_2d() {
        let b = bank(11);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sp: Vec<_> = (0..20).map(|_| noise(Dims::d2(11, 11), &mut rng).map(|v| v + 0.2)).collect();
        let sa: Vec<_> = (0..20).map(|_| noise(Dims::d2(11, 11), &mut rng)).collect();
        let t2 = train_template(&b, &sp, &sa, 0.0).unwrap();
        let t3 = train_template_3d(&b, &sp, &sa, 1, 0.0).unwrap();
        assert_eq!(t3.slice_weights, vec![1.0]);
        assert_eq!(t3.slice_templates[0].weights, t2.weights);
        for c in &sp {
            assert_eq!(t3.score(c).unwrap(), t2.score(c).unwrap());
        }
    }

    #[test]
    fn three_d_rejects_even_slices() {
        let b = bank(11);
        let s = vec![Volume::<f32>::zeros(Dims::d3(11, 11, 2)); 3];
        assert!(train_template_3d(&b, &s, &s, 2, 0.0).is_err());
    }

    #[test]
    fn seventeen_slice_shapes() {
        let b = bank(9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Dims::d3(9, 9, 17);
        let sp: Vec<_> = (0..40)
            .map(|_| {
                Volume::from_fn(d, |x, y, z| {
                    let r2 = (x as f64 - 4.0).powi(2) + (y as f64 - 4.0).powi(2) + (z as f64 - 8.0).powi(2);
                    rng.sample::<f64, _>(StandardNormal) + 2.0 * (-r2 / 8.0).exp()
                })
            })
            .collect();
        let sa: Vec<_> = (0..40).map(|_| noise(d, &mut rng)).collect();
        let t = train_template_3d(&b, &sp, &sa, 17, 0.0).unwrap();
        assert_eq!(t.slice_templates.len(), 17);
        assert_eq!(t.slice_weights.len(), 17);
        assert_eq!(t.slice_covariance.shape(), (17, 17));
        let norm: f64 = t.slice_weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_crop_extraction() {
        let d = Dims::d2(60, 60);
        let v = Volume::<f32>::from_fn(d, |x, y, _| (x + y) as f32);
        let mask = BinaryMask::full(d);
        let phantoms = vec![(&v, Some([30, 30, 0]), &mask), (&v, None, &mask), (&v, None, &mask)];
        let plan = CropPlan { extent: 21, depth: 1, absent_per_phantom: 10, seed: 3 };
        let c = extract_training_crops(&phantoms, &plan).unwrap();
        assert_eq!(c.present.len(), 1);
        assert_eq!(c.absent.len(), 20);
        assert_eq!(c.present[0].get(10, 10, 0), 60.0);
        let again = extract_training_crops(&phantoms, &plan).unwrap();
        assert_eq!(c.absent, again.absent);
    }

    #[test]
    fn template_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bank(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sp: Vec<_> = (0..20).map(|_| noise(Dims::d2(9, 9), &mut rng).map(|v| v + 0.5)).collect();
        let sa: Vec<_> = (0..20).map(|_| noise(Dims::d2(9, 9), &mut rng)).collect();
        let t = train_template(&b, &sp, &sa, 0.0).unwrap();
        let f = TemplateFile::from_2d("cho", &t);
        f.save(dir.path(), &[t.spatial_kernel()]).unwrap();
        let path = dir.path().join("cho.json");
        let back = TemplateFile::load(&path).unwrap();
        assert_eq!(back.dprime_ch, t.dprime);
        assert_eq!(back.slice_weights, vec![1.0]);
        let k = back.load_kernels(&path).unwrap();
        assert_eq!(k.len(), 1);
        let json: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert!(json.get("dprime_ch").is_some());
    }
}
