//! Phantom-level scores from per-voxel probability maps: thresholding,
//! connected components, and validation-set threshold calibration.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::stats::auc_empirical;
use crate::volume::{BinaryMask, Dims, Sample, Volume, Voxel};

/// Volume with every value in [0, 1].
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    values: Volume<f32>,
    pub source: String,
}

impl ProbabilityMap {
    pub fn new(values: Volume<f32>, source: &str) -> Result<Self> {
        if let Some(i) = values.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParam(format!("probability {} at index {i} outside [0, 1]", values.data()[i])));
        }
        Ok(Self { values, source: source.to_string() })
    }

    pub fn values(&self) -> &Volume<f32> {
        &self.values
    }

    pub fn dims(&self) -> Dims {
        self.values.dims()
    }
}

/// True where `p > threshold`, with the threshold rounded to the map's
/// scalar type before comparing.
pub fn binarize<T: Sample>(p: &Volume<T>, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParam(format!("threshold {threshold} outside [0, 1]")));
    }
    let t = T::from_f64(threshold).to_f64();
    BinaryMask::new(p.dims(), p.data().iter().map(|v| v.to_f64() > t).collect())
}

/// `Eight` links in-plane neighbors only (slice-wise on 3D masks);
/// `TwentySix` links every voxel sharing a face, edge or corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Eight,
    TwentySix,
}

impl Connectivity {
    pub fn for_dims(d: Dims) -> Self {
        if d.is_2d() {
            Connectivity::Eight
        } else {
            Connectivity::TwentySix
        }
    }

    /// Neighbor offsets preceding the current voxel in scan order.
    fn backward(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        let dzs: &[isize] = match self {
            Connectivity::Eight => &[0],
            Connectivity::TwentySix => &[-1, 0],
        };
        for &dz in dzs {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dz, dy, dx) < (0, 0, 0) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    pub dims: Dims,
    /// 0 for background, components numbered from 1 in scan order of
    /// their first voxel.
    pub labels: Vec<u32>,
    /// `sizes[l - 1]` is the voxel count of label `l`.
    pub sizes: Vec<usize>,
    pub connectivity: Connectivity,
}

impl ComponentLabeling {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    let mut root = x;
    while parent[root as usize] != root {
        root = parent[root as usize];
    }
    while parent[x as usize] != root {
        let next = parent[x as usize];
        parent[x as usize] = root;
        x = next;
    }
    root
}

/// Two-pass union-find labeling.
pub fn connected_components(m: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let d = m.dims();
    let offsets = connectivity.backward();
    let mut labels = vec![0u32; d.len()];
    // parent[0] is the unused background slot
    let mut parent: Vec<u32> = vec![0];
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let i = d.index(x, y, z);
                if !m.data()[i] {
                    continue;
                }
                let mut root = 0u32;
                for o in &offsets {
                    let (nx, ny, nz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= d.nx as isize || ny >= d.ny as isize {
                        continue;
                    }
                    let l = labels[d.index(nx as usize, ny as usize, nz as usize)];
                    if l == 0 {
                        continue;
                    }
                    let r = find(&mut parent, l);
                    if root == 0 {
                        root = r;
                    } else if r != root {
                        let (lo, hi) = (root.min(r), root.max(r));
                        parent[hi as usize] = lo;
                        root = lo;
                    }
                }
                if root == 0 {
                    root = parent.len() as u32;
                    parent.push(root);
                }
                labels[i] = root;
            }
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let r = find(&mut parent, *l) as usize;
        if remap[r] == 0 {
            sizes.push(0);
            remap[r] = sizes.len() as u32;
        }
        *l = remap[r];
        sizes[*l as usize - 1] += 1;
    }
    ComponentLabeling { dims: d, labels, sizes, connectivity }
}

/// Size of the largest component, 0 when there is none.
pub fn largest_component_score(l: &ComponentLabeling) -> f64 {
    l.sizes.iter().copied().max().unwrap_or(0) as f64
}

/// Threshold then score by the largest component.
pub fn score_map<T: Sample>(p: &Volume<T>, threshold: f64, connectivity: Connectivity) -> Result<f64> {
    Ok(largest_component_score(&connected_components(&binarize(p, threshold)?, connectivity)))
}

/// Calibration sweep grid: 1.00, 0.95, ..., 0.00.
pub fn threshold_grid() -> Vec<f64> {
    (0..=20).rev().map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub threshold: f64,
    pub thresholds: Vec<f64>,
    pub auc_by_threshold: Vec<f64>,
}

impl CalibrationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self).expect("report serializes")).map_err(|e| Error::io(path, e))
    }
}

/// Picks the grid threshold maximizing validation AUC of the
/// largest-component score; ties go to the largest threshold.
pub fn calibrate_threshold(
    validation: &[(&ProbabilityMap, bool)],
    connectivity: Connectivity,
) -> Result<CalibrationReport> {
    let n_sp = validation.iter().filter(|(_, l)| *l).count();
    if n_sp == 0 || n_sp == validation.len() {
        return Err(Error::Insufficient("validation set needs both labels".into()));
    }
    let grid = threshold_grid();
    let scores: Vec<Vec<f64>> = validation
        .par_iter()
        .map(|(p, _)| grid.iter().map(|&t| score_map(p.values(), t, connectivity)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut aucs = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let (mut sp, mut sa) = (Vec::new(), Vec::new());
        for ((_, label), s) in validation.iter().zip(&scores) {
            if *label {
                sp.push(s[k])
            } else {
                sa.push(s[k])
            }
        }
        aucs.push(auc_empirical(&sp, &sa)?);
    }
    let mut best = 0;
    for (k, &a) in aucs.iter().enumerate() {
        if a > aucs[best] {
            best = k;
        }
    }
    Ok(CalibrationReport { threshold: grid[best], thresholds: grid, auc_by_threshold: aucs })
}

/// Synthetic probability map: uniform speckle in `[0, speckle_max]` plus,
/// when `blob` is given, a ball of radius `radius` voxels set to `value`.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticProbSpec {
    pub dims: Dims,
    pub speckle_max: f64,
    pub blob: Option<(Voxel, f64, f64)>,
    pub seed: u64,
}

pub fn synthetic_probability_map(spec: &SyntheticProbSpec) -> Result<ProbabilityMap> {
    let mut rng = rng_from(spec.seed, &[]);
    let mut v = Volume::from_fn(spec.dims, |_, _, _| (rng.random::<f64>() * spec.speckle_max) as f32);
    if let Some((c, radius, value)) = spec.blob {
        let r2 = radius * radius;
        let d = spec.dims;
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let dist2 = (x as f64 - c[0] as f64).powi(2)
                        + (y as f64 - c[1] as f64).powi(2)
                        + (z as f64 - c[2] as f64).powi(2);
                    if dist2 <= r2 {
                        v.set(x, y, z, value as f32);
                    }
                }
            }
        }
    }
    ProbabilityMap::new(v, "synthetic")
}
