//! Synthetic phantoms: power-law filtered Gaussian backgrounds with inserted
//! sphere (microcalcification) or ellipsoid-cluster (mass) signals.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::fft_nd;
use crate::io::{save_volume, VolumeKind};
use crate::rng::{derive_seed, rng_from};
use crate::volume::{build_interior_mask, BinaryMask, Dims, Sample, Volume, Voxel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Exponent of the isotropic `1/f^beta` power spectrum.
    pub power_law_beta: f64,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

/// Gaussian noise shaped to a `1/f^beta` power spectrum (DC removed), then
/// rescaled so the sample mean and standard deviation are exactly `mean`
/// and `std`.
pub fn synthesize_background(spec: &BackgroundSpec) -> Result<Volume<f32>> {
    let dims = Dims::from_array(spec.dims)?;
    if !(spec.std > 0.0 && spec.std.is_finite()) {
        return Err(Error::InvalidParam(format!("std must be > 0, got {}", spec.std)));
    }
    if !(spec.power_law_beta >= 0.0) {
        return Err(Error::InvalidParam(format!("power_law_beta must be >= 0, got {}", spec.power_law_beta)));
    }
    let mut rng = rng_from(spec.seed, &[]);
    let mut buf: Vec<Complex64> = (0..dims.len()).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect();
    fft_nd(&mut buf, dims, false);

    let n = dims.as_array();
    let freq = |k: usize, a: usize| {
        let signed = if k <= n[a] / 2 { k as f64 } else { k as f64 - n[a] as f64 };
        signed / (n[a] as f64 * spec.spacing_mm[a])
    };
    let half_beta = spec.power_law_beta / 2.0;
    for (i, c) in buf.iter_mut().enumerate() {
        let k = dims.coords(i);
        let f2: f64 = (0..3).map(|a| freq(k[a], a).powi(2)).sum();
        *c *= if f2 == 0.0 { 0.0 } else { f2.sqrt().powf(-half_beta) };
    }
    fft_nd(&mut buf, dims, true);

    let count = dims.len() as f64;
    let mean = buf.iter().map(|c| c.re).sum::<f64>() / count;
    let var = buf.iter().map(|c| (c.re - mean).powi(2)).sum::<f64>() / count;
    if var <= 0.0 {
        return Err(Error::Degenerate("background has zero variance".into()));
    }
    let scale = spec.std / var.sqrt();
    let data = buf.iter().map(|c| ((c.re - mean) * scale + spec.mean) as f32).collect();
    Volume::new(dims, spec.spacing_mm, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Microcalc,
    Mass,
}

impl SignalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SignalKind::Microcalc => "microcalc",
            SignalKind::Mass => "mass",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub kind: SignalKind,
    pub diameter_mm: f64,
    pub amplitude: f64,
    #[serde(default = "default_ellipsoids")]
    pub n_ellipsoids: usize,
    #[serde(default)]
    pub axis_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ellipsoids() -> usize {
    1
}

impl SignalSpec {
    pub fn microcalc(diameter_mm: f64, amplitude: f64) -> Self {
        Self { kind: SignalKind::Microcalc, diameter_mm, amplitude, n_ellipsoids: 1, axis_jitter: 0.0, seed: 0 }
    }

    pub fn mass(diameter_mm: f64, amplitude: f64, n_ellipsoids: usize, axis_jitter: f64, seed: u64) -> Self {
        Self { kind: SignalKind::Mass, diameter_mm, amplitude, n_ellipsoids, axis_jitter, seed }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Renders a compact signal volume centered on its middle voxel. Each voxel
/// holds the fraction of its 2x2x2 sub-samples inside the object (axes on
/// which the object is thinner than one voxel are point-sampled), scaled so
/// the peak equals `amplitude`.
pub fn render_signal(spec: &SignalSpec, spacing_mm: [f64; 3]) -> Result<Volume<f64>> {
    if spacing_mm.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParam(format!("bad spacing {spacing_mm:?}")));
    }
    let d = spec.diameter_mm;
    let min_inplane = spacing_mm[0].min(spacing_mm[1]);
    if !(d >= min_inplane) {
        return Err(Error::InvalidParam(format!(
            "signal diameter {d} mm is smaller than one voxel ({min_inplane} mm)"
        )));
    }
    if spec.amplitude < 0.0 || !spec.amplitude.is_finite() {
        return Err(Error::InvalidParam(format!("amplitude {} must be >= 0", spec.amplitude)));
    }
    if !(0.0..1.0).contains(&spec.axis_jitter) {
        return Err(Error::InvalidParam(format!("axis_jitter {} outside [0, 1)", spec.axis_jitter)));
    }

    let shapes: Vec<Ellipsoid> = match spec.kind {
        SignalKind::Microcalc => vec![Ellipsoid { center: [0.0; 3], semi_axes: [d / 2.0; 3] }],
        SignalKind::Mass => {
            if spec.n_ellipsoids == 0 {
                return Err(Error::InvalidParam("mass needs n_ellipsoids >= 1".into()));
            }
            let mut rng = rng_from(spec.seed, &[]);
            let j = spec.axis_jitter;
            (0..spec.n_ellipsoids)
                .map(|_| Ellipsoid {
                    center: [0; 3].map(|_: u8| rng.random_range(-1.0..=1.0) * d / 4.0),
                    semi_axes: [0; 3].map(|_: u8| {
                        let f = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
                        d * (1.0 + f) / 2.0
                    }),
                })
                .collect()
        }
    };

    // reach in mm along each axis
    let reach: [f64; 3] =
        [0, 1, 2].map(|a| shapes.iter().map(|e| e.center[a].abs() + e.semi_axes[a]).fold(0.0, f64::max));
    let half: [usize; 3] = [0, 1, 2].map(|a| (reach[a] / spacing_mm[a]).ceil() as usize + 1);
    let dims = Dims::d3(2 * half[0] + 1, 2 * half[1] + 1, 2 * half[2] + 1);
    let offsets: [Vec<f64>; 3] = [0, 1, 2].map(|a| {
        if 2.0 * reach[a] < spacing_mm[a] {
            vec![0.0]
        } else {
            vec![-0.25 * spacing_mm[a], 0.25 * spacing_mm[a]]
        }
    });
    let total = (offsets[0].len() * offsets[1].len() * offsets[2].len()) as f64;

    let mut vol = Volume::from_fn(dims, |x, y, z| {
        let c = [
            (x as f64 - half[0] as f64) * spacing_mm[0],
            (y as f64 - half[1] as f64) * spacing_mm[1],
            (z as f64 - half[2] as f64) * spacing_mm[2],
        ];
        let mut inside = 0usize;
        for oz in &offsets[2] {
            for oy in &offsets[1] {
                for ox in &offsets[0] {
                    let p = [c[0] + ox, c[1] + oy, c[2] + oz];
                    if shapes.iter().any(|e| e.contains(p)) {
                        inside += 1;
                    }
                }
            }
        }
        inside as f64 / total
    });
    let peak = vol.max_value();
    let scale = if peak > 0.0 { spec.amplitude / peak } else { 0.0 };
    vol = vol.map(|v| v * scale);
    vol.with_spacing(spacing_mm)
}

/// Half extent of a volume's support window around its center voxel.
fn half_extent(d: Dims) -> [usize; 3] {
    [d.nx / 2, d.ny / 2, d.nz / 2]
}

/// True if `sig` centered at `center` lies fully inside `bg_dims`.
pub fn signal_fits(bg_dims: Dims, sig_dims: Dims, center: Voxel) -> bool {
    let h = half_extent(sig_dims);
    let n = bg_dims.as_array();
    let s = sig_dims.as_array();
    (0..3).all(|a| center[a] >= h[a] && center[a] - h[a] + s[a] <= n[a])
}

/// Additive insertion of `sig` centered at `center`.
pub fn insert_signal<T: Sample>(bg: &Volume<T>, sig: &Volume<f64>, center: Voxel) -> Result<Volume<T>> {
    let bd = bg.dims();
    let sd = sig.dims();
    if !signal_fits(bd, sd, center) {
        return Err(Error::OutOfBounds(format!("signal support {sd} at {center:?} exceeds background {bd}")));
    }
    let h = half_extent(sd);
    let mut out = bg.clone();
    let data = out.data_mut();
    for z in 0..sd.nz {
        for y in 0..sd.ny {
            for x in 0..sd.nx {
                let s = sig.get(x, y, z);
                if s == 0.0 {
                    continue;
                }
                let i = bd.index(center[0] + x - h[0], center[1] + y - h[1], center[2] + z - h[2]);
                data[i] = T::from_f64(data[i].to_f64() + s);
            }
        }
    }
    Ok(out)
}

/// Central slice of a rendered signal, for insertion into 2D images.
pub fn central_slice(sig: &Volume<f64>) -> Volume<f64> {
    sig.slice(sig.dims().nz / 2).expect("center slice exists")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteriorSpec {
    pub erosion_voxels: usize,
    /// Threshold for the interior; `None` keeps every voxel before erosion.
    #[serde(default)]
    pub intensity_floor: Option<f64>,
}

impl InteriorSpec {
    pub fn mask<T: Sample>(&self, v: &Volume<T>) -> BinaryMask {
        build_interior_mask(v, self.erosion_voxels, self.intensity_floor.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub power_law_beta: f64,
    pub mean: f64,
    pub std: f64,
    pub signal: SignalSpec,
    pub n_signal_present: usize,
    pub n_signal_absent: usize,
    pub interior: InteriorSpec,
    pub master_seed: u64,
    /// Prefix for phantom ids, e.g. "train" or "test".
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_prefix() -> String {
    "ph".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: bool,
    pub signal_kind: Option<SignalKind>,
    pub center: Option<Voxel>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub master_seed: u64,
}

/// One generated phantom, in memory.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub id: String,
    pub volume: Volume<f32>,
    pub label: bool,
    pub center: Option<Voxel>,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn count(&self) -> usize {
        self.n_signal_present + self.n_signal_absent
    }

    pub fn background_spec(&self, seed: u64) -> BackgroundSpec {
        BackgroundSpec {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            power_law_beta: self.power_law_beta,
            mean: self.mean,
            std: self.std,
            seed,
        }
    }

    /// Phantom `index`; indices below `n_signal_present` carry a signal.
    pub fn phantom(&self, index: usize) -> Result<Phantom> {
        let seed = derive_seed(self.master_seed, &[index as u64]);
        let label = index < self.n_signal_present;
        let id = if label {
            format!("{}_sp{:04}", self.id_prefix, index)
        } else {
            format!("{}_sa{:04}", self.id_prefix, index - self.n_signal_present)
        };
        let bg = synthesize_background(&self.background_spec(derive_seed(seed, &[0])))?;
        if !label {
            return Ok(Phantom { id, volume: bg, label, center: None, seed });
        }
        let mut sspec = self.signal.clone();
        sspec.seed = derive_seed(seed, &[1]);
        let mut sig = render_signal(&sspec, self.spacing_mm)?;
        if bg.dims().is_2d() {
            sig = central_slice(&sig);
        }
        let mask = self.interior.mask(&bg);
        let candidates: Vec<usize> =
            mask.indices().into_iter().filter(|&i| signal_fits(bg.dims(), sig.dims(), bg.dims().coords(i))).collect();
        if candidates.is_empty() {
            return Err(Error::Infeasible(format!("{id}: interior mask leaves no room for a {} signal", sig.dims())));
        }
        let mut rng = rng_from(seed, &[2]);
        let center = bg.dims().coords(candidates[rng.random_range(0..candidates.len())]);
        let volume = insert_signal(&bg, &sig, center)?;
        Ok(Phantom { id, volume, label, center: Some(center), seed })
    }

    /// All phantoms in memory, generated in parallel.
    pub fn phantoms(&self) -> Result<Vec<Phantom>> {
        if self.n_signal_present == 0 || self.n_signal_absent == 0 {
            return Err(Error::InvalidParam("dataset needs at least one phantom per class".into()));
        }
        (0..self.count()).into_par_iter().map(|i| self.phantom(i)).collect()
    }
}

/// Writes every phantom as a volume pair under `out_dir` and the manifest
/// to `out_dir/manifest.csv`.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.n_signal_present == 0 || config.n_signal_absent == 0 {
        return Err(Error::InvalidParam("dataset needs at least one phantom per class".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = (0..config.count())
        .into_par_iter()
        .map(|i| {
            let p = config.phantom(i)?;
            let rel = PathBuf::from(format!("{}.f32", p.id));
            save_volume(&p.volume, &out_dir.join(&rel), VolumeKind::Image)?;
            Ok(ManifestEntry {
                id: p.id,
                path: rel,
                label: p.label,
                signal_kind: p.label.then_some(config.signal.kind),
                center: p.center,
                seed: p.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { entries, master_seed: config.master_seed };
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

const MANIFEST_HEADER: [&str; 8] = ["id", "path", "label", "signal_kind", "cx", "cy", "cz", "seed"];

impl DatasetManifest {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
        w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
        for e in &self.entries {
            let c = e.center.map(|c| c.map(|v| v.to_string()));
            let c = c.unwrap_or_else(|| [String::new(), String::new(), String::new()]);
            w.write_record([
                e.id.as_str(),
                &e.path.to_string_lossy(),
                if e.label { "1" } else { "0" },
                e.signal_kind.map_or("none", |k| k.as_str()),
                &c[0],
                &c[1],
                &c[2],
                &e.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a manifest; the master seed is not stored in the CSV and is left 0.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Csv(format!("{}: unexpected header {header:?}", path.display())));
        }
        let mut entries = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::Csv(format!("{} row {}: bad {what}", path.display(), line + 2));
            let label = match &rec[2] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label")),
            };
            let signal_kind = match &rec[3] {
                "none" | "" => None,
                "microcalc" => Some(SignalKind::Microcalc),
                "mass" => Some(SignalKind::Mass),
                _ => return Err(bad("signal_kind")),
            };
            let center = if rec[4].is_empty() {
                None
            } else {
                let p = |i: usize| rec[i].parse::<usize>().map_err(|_| bad("center"));
                Some([p(4)?, p(5)?, p(6)?])
            };
            if label != center.is_some() {
                return Err(bad("center (signal-present rows need one, absent rows none)"));
            }
            entries.push(ManifestEntry {
                id: rec[0].to_string(),
                path: PathBuf::from(&rec[1]),
                label,
                signal_kind,
                center,
                seed: rec[7].parse().map_err(|_| bad("seed"))?,
            });
        }
        let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Csv(format!("{}: duplicate phantom ids", path.display())));
        }
        Ok(Self { entries, master_seed: 0 })
    }
}
