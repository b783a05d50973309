//! Gabor channel banks and filtered-channel (FCO) banks.
//!
//! Kernel ordering is orientation-major, then frequency, then phase:
//! `index = (k * n_freq + l) * n_phase + p`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft_nd, fft_nd_real};
use crate::io::{save_volume, VolumeKind};
use crate::volume::{Dims, Sample, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    /// Orientations in radians, each in `[0, pi)`.
    pub orientations: Vec<f64>,
    pub phases: Vec<f64>,
    /// Center frequencies in cycles/pixel.
    pub frequencies: Vec<f64>,
    /// The same frequencies as pixels per cycle, when given that way.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels_per_cycle: Option<Vec<f64>>,
    /// Full frequency bandwidth of each channel in octaves.
    pub envelope_octaves: f64,
    /// Odd kernel side length in pixels.
    pub extent: usize,
}

impl GaborParams {
    /// `n_orient` orientations equally spaced over `[0, pi)`, phases
    /// `{0, pi/2}` and frequencies given in pixels per cycle.
    pub fn from_pixels_per_cycle(n_orient: usize, pixels_per_cycle: &[f64], extent: usize) -> Self {
        Self {
            orientations: (0..n_orient).map(|k| k as f64 * PI / n_orient as f64).collect(),
            phases: vec![0.0, PI / 2.0],
            frequencies: pixels_per_cycle.iter().map(|p| 1.0 / p).collect(),
            pixels_per_cycle: Some(pixels_per_cycle.to_vec()),
            envelope_octaves: 1.0,
            extent,
        }
    }

    /// 8 orientations, 2 phases, 4/8/16/32/64 pixels per cycle.
    pub fn standard(extent: usize) -> Self {
        Self::from_pixels_per_cycle(8, &[4.0, 8.0, 16.0, 32.0, 64.0], extent)
    }

    pub fn count(&self) -> usize {
        self.orientations.len() * self.phases.len() * self.frequencies.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::InvalidParam("Gabor bank needs at least one channel".into()));
        }
        if self.extent == 0 || self.extent.is_multiple_of(2) {
            return Err(Error::InvalidParam(format!("kernel extent must be odd, got {}", self.extent)));
        }
        if !(self.envelope_octaves > 0.0) {
            return Err(Error::InvalidParam("envelope_octaves must be > 0".into()));
        }
        for &f in &self.frequencies {
            if !(f > 0.0 && f < 0.5) {
                return Err(Error::InvalidParam(format!("frequency {f} cycles/pixel is not below Nyquist")));
            }
        }
        Ok(())
    }

    /// Spatial standard deviation of the Gaussian envelope for center
    /// frequency `fc` under the octave-bandwidth relation
    /// `sigma = sqrt(ln 2 / 2) / (pi fc) * (2^b + 1) / (2^b - 1)`.
    pub fn envelope_sigma(&self, fc: f64) -> f64 {
        let b = 2f64.powf(self.envelope_octaves);
        (std::f64::consts::LN_2 / 2.0).sqrt() / (PI * fc) * (b + 1.0) / (b - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Gabor,
    Fco,
}

#[derive(Debug, Clone)]
pub struct ChannelBank {
    kernels: Vec<Volume<f64>>,
    kind: BankKind,
    params: GaborParams,
}

impl ChannelBank {
    /// Wraps arbitrary kernels of identical dims (used for custom banks).
    pub fn from_kernels(kernels: Vec<Volume<f64>>, kind: BankKind, params: GaborParams) -> Result<Self> {
        let first = kernels.first().ok_or_else(|| Error::InvalidParam("empty channel bank".into()))?.dims();
        if let Some(k) = kernels.iter().find(|k| k.dims() != first) {
            return Err(Error::dims(first, k.dims()));
        }
        Ok(Self { kernels, kind, params })
    }

    pub fn kernels(&self) -> &[Volume<f64>] {
        &self.kernels
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn params(&self) -> &GaborParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernel_dims(&self) -> Dims {
        self.kernels[0].dims()
    }

    /// Writes `kernel_NNN.f32` pairs plus `index.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.len());
        for (i, k) in self.kernels.iter().enumerate() {
            let name = format!("kernel_{i:03}.f32");
            save_volume(k, &dir.join(&name), VolumeKind::Image)?;
            files.push(name);
        }
        let index = BankIndex {
            kind: self.kind,
            params: self.params.clone(),
            ordering: "orientation-major, then frequency, then phase".into(),
            kernels: files,
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_vec_pretty(&index).expect("index serializes")).map_err(|e| Error::io(&path, e))
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: BankIndex = serde_json::from_slice(&text)
            .map_err(|e| Error::Metadata { path: path.clone(), message: e.to_string() })?;
        let kernels = index
            .kernels
            .iter()
            .map(|f| crate::io::load_volume(&dir.join(f)).map(|v| v.cast::<f64>()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_kernels(kernels, index.kind, index.params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankIndex {
    kind: BankKind,
    params: GaborParams,
    ordering: String,
    kernels: Vec<String>,
}

/// Builds one kernel per (orientation, frequency, phase):
/// `exp(-(i^2 + j^2) / 2 sigma^2) * cos(2 pi fc i' + phase)` with
/// `i' = i cos(theta) + j sin(theta)` about the kernel center, truncated at
/// the kernel extent.
pub fn gabor_bank(params: &GaborParams) -> Result<ChannelBank> {
    params.validate()?;
    let n = params.extent;
    let c = (n / 2) as f64;
    let dims = Dims::d2(n, n);
    let mut kernels = Vec::with_capacity(params.count());
    for &theta in &params.orientations {
        let (sin_t, cos_t) = theta.sin_cos();
        for &fc in &params.frequencies {
            let sigma = params.envelope_sigma(fc);
            let two_s2 = 2.0 * sigma * sigma;
            for &phase in &params.phases {
                kernels.push(Volume::from_fn(dims, |x, y, _| {
                    let i = x as f64 - c;
                    let j = y as f64 - c;
                    let ip = i * cos_t + j * sin_t;
                    (-(i * i + j * j) / two_s2).exp() * (2.0 * PI * fc * ip + phase).cos()
                }));
            }
        }
    }
    Ok(ChannelBank { kernels, kind: BankKind::Gabor, params: params.clone() })
}

/// Voxelwise mean of signal-present crops minus mean of signal-absent crops.
pub fn mean_signal<T: Sample>(sp: &[Volume<T>], sa: &[Volume<T>]) -> Result<Volume<f64>> {
    if sp.is_empty() || sa.is_empty() {
        return Err(Error::Insufficient("mean signal needs crops of both classes".into()));
    }
    let dims = sp[0].dims();
    if let Some(c) = sp.iter().chain(sa).find(|c| c.dims() != dims) {
        return Err(Error::dims(dims, c.dims()));
    }
    let class_mean = |stack: &[Volume<T>]| {
        let mut acc = vec![0.0f64; dims.len()];
        for c in stack {
            for (a, v) in acc.iter_mut().zip(c.data()) {
                *a += v.to_f64();
            }
        }
        let inv = 1.0 / stack.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    };
    let p = class_mean(sp);
    let a = class_mean(sa);
    let data = p.iter().zip(&a).map(|(x, y)| x - y).collect();
    Volume::new(dims, sp[0].spacing_mm(), data)
}

/// Relative imaginary residue above which an FCO channel is rejected.
const IMAG_TOLERANCE: f64 = 1e-9;

/// Filters every channel's power spectrum by the mean signal spectrum:
/// `IFFT(|FFT(C_k)|^2 / nxy * FFT(signal))`, then normalizes to unit L2 norm.
pub fn fco_bank(gabor: &ChannelBank, signal: &Volume<f64>) -> Result<ChannelBank> {
    let dims = gabor.kernel_dims();
    if signal.dims() != dims {
        return Err(Error::dims(dims, signal.dims()));
    }
    if signal.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("mean signal is identically zero".into()));
    }
    let nxy = dims.len() as f64;
    let sig_spec = fft_nd_real(signal.data(), dims);
    let mut kernels = Vec::with_capacity(gabor.len());
    for (k, kernel) in gabor.kernels().iter().enumerate() {
        let mut spec = fft_nd_real(kernel.data(), dims);
        for (c, s) in spec.iter_mut().zip(&sig_spec) {
            *c = Complex64::new(c.norm_sqr() / nxy, 0.0) * s;
        }
        fft_nd(&mut spec, dims, true);
        let max_re = spec.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
        let max_im = spec.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        if max_im > IMAG_TOLERANCE * max_re.max(f64::MIN_POSITIVE) {
            return Err(Error::Degenerate(format!(
                "FCO channel {k} has imaginary residue {max_im:e} (real peak {max_re:e})"
            )));
        }
        let norm = spec.iter().map(|c| c.re * c.re).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Degenerate(format!("FCO channel {k} vanishes")));
        }
        kernels.push(Volume::from_vec(dims, spec.iter().map(|c| c.re / norm).collect()));
    }
    Ok(ChannelBank { kernels, kind: BankKind::Fco, params: gabor.params.clone() })
}
