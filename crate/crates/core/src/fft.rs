//! FFT helpers: separable complex N-d transforms and a cached real 2D plan
//! whose half-spectrum is stored column-major (`kx * ny + ky`) so the
//! y-pass runs over contiguous memory.

use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::volume::{line_starts, Dims};

/// In-place separable complex FFT over every axis with extent > 1.
/// The inverse is normalized by `1 / dims.len()`.
pub fn fft_nd(data: &mut [Complex64], dims: Dims, inverse: bool) {
    assert_eq!(data.len(), dims.len());
    let mut planner = FftPlanner::<f64>::new();
    let strides = [1, dims.nx, dims.nx * dims.ny];
    for (axis, &n) in dims.as_array().iter().enumerate() {
        if n == 1 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        if axis == 0 {
            fft.process_with_scratch(data, &mut scratch);
            continue;
        }
        let stride = strides[axis];
        let mut line = vec![Complex64::default(); n];
        for start in line_starts(dims, axis) {
            for (k, c) in line.iter_mut().enumerate() {
                *c = data[start + k * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (k, c) in line.iter().enumerate() {
                data[start + k * stride] = *c;
            }
        }
    }
    if inverse {
        let scale = 1.0 / dims.len() as f64;
        for c in data.iter_mut() {
            *c *= scale;
        }
    }
}

/// Forward complex transform of real data.
pub fn fft_nd_real(data: &[f64], dims: Dims) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_nd(&mut buf, dims, false);
    buf
}

/// Real-to-complex 2D plan for an `nx * ny` plane (x-fastest input).
#[derive(Clone)]
pub struct RealPlan2d {
    nx: usize,
    ny: usize,
    hx: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl RealPlan2d {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut real = RealFftPlanner::<f64>::new();
        let mut cplx = FftPlanner::<f64>::new();
        Self {
            nx,
            ny,
            hx: nx / 2 + 1,
            r2c: real.plan_fft_forward(nx),
            c2r: real.plan_fft_inverse(nx),
            col_fwd: cplx.plan_fft_forward(ny),
            col_inv: cplx.plan_fft_inverse(ny),
        }
    }

    /// Number of complex coefficients in the half spectrum.
    pub fn spectrum_len(&self) -> usize {
        self.hx * self.ny
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Forward transform of one real plane into `out` (column-major half spectrum).
    pub fn forward(&self, plane: impl Fn(usize) -> f64, out: &mut [Complex64]) {
        assert_eq!(out.len(), self.spectrum_len());
        let (nx, ny) = (self.nx, self.ny);
        let mut row = self.r2c.make_input_vec();
        let mut row_spec = self.r2c.make_output_vec();
        let mut scratch = self.r2c.make_scratch_vec();
        for y in 0..ny {
            for (x, r) in row.iter_mut().enumerate() {
                *r = plane(x + nx * y);
            }
            self.r2c
                .process_with_scratch(&mut row, &mut row_spec, &mut scratch)
                .expect("buffer sizes come from the plan");
            for (kx, c) in row_spec.iter().enumerate() {
                out[kx * ny + y] = *c;
            }
        }
        let mut col_scratch = vec![Complex64::default(); self.col_fwd.get_inplace_scratch_len()];
        self.col_fwd.process_with_scratch(out, &mut col_scratch);
    }

    /// Inverse transform; `spec` is consumed as scratch. Normalized so that
    /// `inverse(forward(x)) == x`.
    pub fn inverse(&self, spec: &mut [Complex64], mut write: impl FnMut(usize, f64)) {
        assert_eq!(spec.len(), self.spectrum_len());
        let (nx, ny, hx) = (self.nx, self.ny, self.hx);
        let mut col_scratch = vec![Complex64::default(); self.col_inv.get_inplace_scratch_len()];
        self.col_inv.process_with_scratch(spec, &mut col_scratch);
        let mut row_spec = self.c2r.make_input_vec();
        let mut row = self.c2r.make_output_vec();
        let mut scratch = self.c2r.make_scratch_vec();
        let scale = 1.0 / (nx * ny) as f64;
        for y in 0..ny {
            for (kx, c) in row_spec.iter_mut().enumerate() {
                *c = spec[kx * ny + y];
            }
            // purely real by Hermitian symmetry; drop rounding residue
            row_spec[0].im = 0.0;
            if nx % 2 == 0 {
                row_spec[hx - 1].im = 0.0;
            }
            self.c2r
                .process_with_scratch(&mut row_spec, &mut row, &mut scratch)
                .expect("buffer sizes come from the plan");
            for (x, &r) in row.iter().enumerate() {
                write(x + nx * y, r * scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(data: &[f64], dims: Dims) -> Vec<Complex64> {
        let n = dims.len();
        (0..n)
            .map(|k| {
                let kc = dims.coords(k);
                let mut acc = Complex64::default();
                for (i, &v) in data.iter().enumerate() {
                    let c = dims.coords(i);
                    let phase = -2.0
                        * std::f64::consts::PI
                        * (kc[0] as f64 * c[0] as f64 / dims.nx as f64
                            + kc[1] as f64 * c[1] as f64 / dims.ny as f64
                            + kc[2] as f64 * c[2] as f64 / dims.nz as f64);
                    acc += Complex64::from_polar(v, phase);
                }
                acc
            })
            .collect()
    }

    fn test_data(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3 + (i as f64).sin()).collect()
    }

    #[test]
    fn nd_matches_naive_dft() {
        let dims = Dims::d3(5, 4, 3);
        let data = test_data(dims.len());
        let fast = fft_nd_real(&data, dims);
        let slow = naive_dft(&data, dims);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
        let mut back = fast.clone();
        fft_nd(&mut back, dims, true);
        for (a, b) in back.iter().zip(&data) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn real_plan_matches_complex_and_roundtrips() {
        for &(nx, ny) in &[(8usize, 6usize), (7, 5), (9, 4)] {
            let dims = Dims::d2(nx, ny);
            let data = test_data(dims.len());
            let plan = RealPlan2d::new(nx, ny);
            let mut spec = vec![Complex64::default(); plan.spectrum_len()];
            plan.forward(|i| data[i], &mut spec);
            let full = fft_nd_real(&data, dims);
            for kx in 0..nx / 2 + 1 {
                for ky in 0..ny {
                    let a = spec[kx * ny + ky];
                    let b = full[kx + nx * ky];
                    assert!((a - b).norm() < 1e-9);
                }
            }
            let mut out = vec![0.0; dims.len()];
            plan.inverse(&mut spec, |i, v| out[i] = v);
            for (a, b) in out.iter().zip(&data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
