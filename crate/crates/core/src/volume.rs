//! Dense 2D/3D scalar volumes, binary masks, cropping and interior masks.
//!
//! Data is stored x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`. A 2D image is a volume with `nz == 1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel coordinate `[x, y, z]`.
pub type Voxel = [usize; 3];

/// Scalar storage type of a volume.
pub trait Sample: Copy + Default + PartialOrd + Send + Sync + fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Sample for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Sample for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidParam(format!("dims must be positive, got [{nx}, {ny}, {nz}]")));
        }
        Ok(Self { nx, ny, nz })
    }

    /// Shorthand for known-valid dims in tests and internal code.
    pub const fn d3(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn d2(nx: usize, ny: usize) -> Self {
        Self { nx, ny, nz: 1 }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn index_of(&self, v: Voxel) -> usize {
        self.index(v[0], v[1], v[2])
    }

    #[inline]
    pub fn coords(&self, i: usize) -> Voxel {
        let x = i % self.nx;
        let r = i / self.nx;
        [x, r % self.ny, r / self.ny]
    }

    pub fn contains(&self, v: Voxel) -> bool {
        v[0] < self.nx && v[1] < self.ny && v[2] < self.nz
    }

    pub fn is_2d(&self) -> bool {
        self.nz == 1
    }
}

impl fmt::Debug for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense scalar field with physical voxel spacing.
#[derive(Clone, PartialEq)]
pub struct Volume<T: Sample = f32> {
    dims: Dims,
    spacing_mm: [f64; 3],
    data: Vec<T>,
}

impl<T: Sample> fmt::Debug for Volume<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Volume").field("dims", &self.dims).field("spacing_mm", &self.spacing_mm).finish_non_exhaustive()
    }
}

impl<T: Sample> Volume<T> {
    /// Builds a volume, checking length, finiteness and spacing.
    pub fn new(dims: Dims, spacing_mm: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidParam(format!("empty dims {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::dims(format!("{} scalars for {dims}", dims.len()), format!("{} scalars", data.len())));
        }
        check_spacing(spacing_mm)?;
        if let Some(i) = data.iter().position(|v| !v.to_f64().is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, spacing_mm, data })
    }

    /// Unit spacing, no checks beyond length. Panics on length mismatch.
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims.len(), "data length does not match {dims}");
        Self { dims, spacing_mm: [1.0; 3], data }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::default())
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self { dims, spacing_mm: [1.0; 3], data: vec![value; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::from_vec(dims, data)
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Result<Self> {
        check_spacing(spacing_mm)?;
        self.spacing_mm = spacing_mm;
        Ok(self)
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn at(&self, v: Voxel) -> T {
        self.data[self.dims.index_of(v)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = value;
    }

    /// Converts the scalar type, keeping dims and spacing.
    pub fn cast<U: Sample>(&self) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self { dims: self.dims, spacing_mm: self.spacing_mm, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Single slice `z` as a 2D volume.
    pub fn slice(&self, z: usize) -> Result<Self> {
        if z >= self.dims.nz {
            return Err(Error::OutOfBounds(format!("slice {z} of volume with {} slices", self.dims.nz)));
        }
        let plane = self.dims.nx * self.dims.ny;
        Ok(Self {
            dims: Dims::d2(self.dims.nx, self.dims.ny),
            spacing_mm: self.spacing_mm,
            data: self.data[z * plane..(z + 1) * plane].to_vec(),
        })
    }

    pub fn slice_data(&self, z: usize) -> &[T] {
        let plane = self.dims.nx * self.dims.ny;
        &self.data[z * plane..(z + 1) * plane]
    }

    /// Dot product with another volume of identical dims, accumulated in f64.
    pub fn dot<U: Sample>(&self, other: &Volume<U>) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::dims(self.dims, other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.to_f64() * b.to_f64()).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn check_spacing(spacing_mm: [f64; 3]) -> Result<()> {
    if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidParam(format!("spacing must be strictly positive, got {spacing_mm:?}")));
    }
    Ok(())
}

/// Boolean mask with the same dims as the volume it masks.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask").field("dims", &self.dims).field("count", &self.count()).finish()
    }
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::dims(dims.len(), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: Dims) -> Self {
        Self { dims, data: vec![true; dims.len()] }
    }

    pub fn empty(dims: Dims) -> Self {
        Self { dims, data: vec![false; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn at(&self, v: Voxel) -> bool {
        self.data[self.dims.index_of(v)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Linear indices of true voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims != other.dims {
            return Err(Error::dims(self.dims, other.dims));
        }
        Ok(BinaryMask { dims: self.dims, data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect() })
    }

    /// 0.0/1.0 volume, the on-disk mask representation.
    pub fn to_volume(&self) -> Volume<f32> {
        Volume::from_vec(self.dims, self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn from_volume<T: Sample>(v: &Volume<T>) -> Self {
        Self { dims: v.dims(), data: v.data().iter().map(|x| x.to_f64() > 0.5).collect() }
    }

    /// Box erosion by `radius` voxels along every axis with extent > 1.
    /// Voxels outside the volume count as false.
    pub fn eroded(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let mut data = self.data.clone();
        let d = self.dims;
        let axes = [(d.nx, 1usize), (d.ny, d.nx), (d.nz, d.nx * d.ny)];
        let mut line = Vec::new();
        for (axis, &(n, stride)) in axes.iter().enumerate() {
            if n == 1 {
                continue;
            }
            for start in line_starts(d, axis) {
                line.clear();
                line.extend((0..n).map(|k| data[start + k * stride]));
                erode_line(&line, radius, |k, v| data[start + k * stride] = v);
            }
        }
        BinaryMask { dims: d, data }
    }
}

/// Linear index of the first voxel of every line running along `axis`.
pub(crate) fn line_starts(d: Dims, axis: usize) -> impl Iterator<Item = usize> {
    let (a, b) = match axis {
        0 => (d.ny, d.nz),
        1 => (d.nx, d.nz),
        _ => (d.nx, d.ny),
    };
    (0..a * b).map(move |k| {
        let (u, w) = (k % a, k / a);
        match axis {
            0 => d.index(0, u, w),
            1 => d.index(u, 0, w),
            _ => d.index(u, w, 0),
        }
    })
}

/// 1D min-filter over a window of `2 * radius + 1`, out-of-range = false.
fn erode_line(line: &[bool], radius: usize, mut write: impl FnMut(usize, bool)) {
    let n = line.len();
    // prefix count of false voxels
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0usize);
    for &b in line {
        prefix.push(prefix.last().unwrap() + usize::from(!b));
    }
    for k in 0..n {
        let keep = k >= radius && k + radius < n && prefix[k + radius + 1] - prefix[k - radius] == 0;
        write(k, keep);
    }
}

/// Crop window: center voxel plus odd extent per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub center: Voxel,
    pub extent: [usize; 3],
}

impl CropSpec {
    pub fn new(center: Voxel, extent: [usize; 3]) -> Result<Self> {
        if extent.iter().any(|&e| e == 0 || e % 2 == 0) {
            return Err(Error::InvalidParam(format!("crop extent must be odd and positive, got {extent:?}")));
        }
        Ok(Self { center, extent })
    }

    pub fn square(center: Voxel, extent: usize) -> Result<Self> {
        Self::new(center, [extent, extent, 1])
    }

    pub fn half(&self) -> [usize; 3] {
        self.extent.map(|e| e / 2)
    }

    /// Lower corner of the window, or None if the window leaves `dims`.
    pub fn origin_in(&self, dims: Dims) -> Option<Voxel> {
        let h = self.half();
        let n = dims.as_array();
        let mut o = [0; 3];
        for a in 0..3 {
            if self.center[a] < h[a] || self.center[a] + h[a] >= n[a] {
                return None;
            }
            o[a] = self.center[a] - h[a];
        }
        Some(o)
    }

    pub fn fits(&self, dims: Dims) -> bool {
        self.origin_in(dims).is_some()
    }
}

/// Extracts the window described by `spec`. Out-of-bounds windows are an error.
pub fn crop<T: Sample>(v: &Volume<T>, spec: &CropSpec) -> Result<Volume<T>> {
    let dims = v.dims();
    let origin = spec.origin_in(dims).ok_or_else(|| {
        Error::OutOfBounds(format!("crop {:?} at {:?} exceeds volume {dims}", spec.extent, spec.center))
    })?;
    let out_dims = Dims::d3(spec.extent[0], spec.extent[1], spec.extent[2]);
    let mut data = Vec::with_capacity(out_dims.len());
    for z in 0..out_dims.nz {
        for y in 0..out_dims.ny {
            let start = dims.index(origin[0], origin[1] + y, origin[2] + z);
            data.extend_from_slice(&v.data()[start..start + out_dims.nx]);
        }
    }
    Ok(Volume { dims: out_dims, spacing_mm: v.spacing_mm(), data })
}

/// Threshold at `intensity_floor` (strict `>`), then erode by a box of
/// `erosion_voxels`. An empty result is legal and logged.
pub fn build_interior_mask<T: Sample>(v: &Volume<T>, erosion_voxels: usize, intensity_floor: f64) -> BinaryMask {
    let above = BinaryMask { dims: v.dims(), data: v.data().iter().map(|x| x.to_f64() > intensity_floor).collect() };
    let mask = above.eroded(erosion_voxels);
    if mask.count() == 0 {
        log::warn!("interior mask is empty (floor {intensity_floor}, erosion {erosion_voxels})");
    }
    mask
}
