//! Real spherical harmonics (degree ≤ 3) modulated by a cosine Fourier series
//! in time.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Shape of one gaussian's colour coefficients: `(fourier_order + 1) × basis × 3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShLayout {
    pub degree: usize,
    pub fourier_order: usize,
}

impl ShLayout {
    pub fn new(degree: usize, fourier_order: usize) -> Self {
        assert!(degree <= MAX_SH_DEGREE, "sh degree above {MAX_SH_DEGREE}");
        Self {
            degree,
            fourier_order,
        }
    }

    #[inline]
    pub fn basis_len(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    #[inline]
    pub fn coeffs_per_gaussian(&self) -> usize {
        (self.fourier_order + 1) * self.basis_len() * 3
    }

    #[inline]
    pub fn index(&self, n: usize, b: usize, ch: usize) -> usize {
        (n * self.basis_len() + b) * 3 + ch
    }
}

/// Evaluates the basis at a unit direction into `out[..basis_len]`.
pub fn sh_basis(degree: usize, dir: &Vector3<f64>, out: &mut [f64; 16]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = SH_C0;
    if degree < 1 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * x * y * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// Accumulates `Σ_b g[b] ∂Y_b/∂dir` (direction treated as unconstrained).
pub fn sh_basis_vjp(degree: usize, dir: &Vector3<f64>, g: &[f64; 16]) -> Vector3<f64> {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut d = Vector3::zeros();
    if degree < 1 {
        return d;
    }
    d.y += -SH_C1 * g[1];
    d.z += SH_C1 * g[2];
    d.x += -SH_C1 * g[3];
    if degree < 2 {
        return d;
    }
    d.x += SH_C2[0] * y * g[4];
    d.y += SH_C2[0] * x * g[4];
    d.y += SH_C2[1] * z * g[5];
    d.z += SH_C2[1] * y * g[5];
    d.x += SH_C2[2] * (-2.0 * x) * g[6];
    d.y += SH_C2[2] * (-2.0 * y) * g[6];
    d.z += SH_C2[2] * (4.0 * z) * g[6];
    d.x += SH_C2[3] * z * g[7];
    d.z += SH_C2[3] * x * g[7];
    d.x += SH_C2[4] * (2.0 * x) * g[8];
    d.y += SH_C2[4] * (-2.0 * y) * g[8];
    if degree < 3 {
        return d;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    // y(3xx - yy)
    d.x += SH_C3[0] * 6.0 * x * y * g[9];
    d.y += SH_C3[0] * (3.0 * xx - 3.0 * yy) * g[9];
    // xyz
    d.x += SH_C3[1] * y * z * g[10];
    d.y += SH_C3[1] * x * z * g[10];
    d.z += SH_C3[1] * x * y * g[10];
    // y(4zz - xx - yy)
    d.x += SH_C3[2] * (-2.0 * x * y) * g[11];
    d.y += SH_C3[2] * (4.0 * zz - xx - 3.0 * yy) * g[11];
    d.z += SH_C3[2] * (8.0 * y * z) * g[11];
    // z(2zz - 3xx - 3yy)
    d.x += SH_C3[3] * (-6.0 * x * z) * g[12];
    d.y += SH_C3[3] * (-6.0 * y * z) * g[12];
    d.z += SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy) * g[12];
    // x(4zz - xx - yy)
    d.x += SH_C3[4] * (4.0 * zz - 3.0 * xx - yy) * g[13];
    d.y += SH_C3[4] * (-2.0 * x * y) * g[13];
    d.z += SH_C3[4] * (8.0 * x * z) * g[13];
    // z(xx - yy)
    d.x += SH_C3[5] * (2.0 * x * z) * g[14];
    d.y += SH_C3[5] * (-2.0 * y * z) * g[14];
    d.z += SH_C3[5] * (xx - yy) * g[14];
    // x(xx - 3yy)
    d.x += SH_C3[6] * (3.0 * xx - 3.0 * yy) * g[15];
    d.y += SH_C3[6] * (-6.0 * x * y) * g[15];
    d
}

/// `cos(2π n t / period)` for `n = 0..=order`. The phase is reduced modulo
/// one period first so that `t` and `t + period` give identical weights.
pub fn fourier_weights(order: usize, t: f64, period: f64, out: &mut [f64; 8]) {
    let phase = (t / period).rem_euclid(1.0);
    out[0] = 1.0;
    for (n, w) in out.iter_mut().enumerate().take(order + 1).skip(1) {
        *w = (std::f64::consts::TAU * n as f64 * phase).cos();
    }
}

/// Intermediate values of one colour evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ColorEval {
    pub basis: [f64; 16],
    pub fourier: [f64; 8],
    /// Pre-clamp value per channel.
    pub raw: [f64; 3],
    pub rgb: [f64; 3],
}

/// HDR colour of one gaussian: `max(0.5 + Σ_n φ_n(t) Σ_b a[n,b] Y_b(dir), 0)`.
pub fn eval_color(
    layout: ShLayout,
    coeffs: &[f64],
    dir: &Vector3<f64>,
    t: f64,
    period: f64,
) -> ColorEval {
    debug_assert_eq!(coeffs.len(), layout.coeffs_per_gaussian());
    let mut basis = [0.0; 16];
    sh_basis(layout.degree, dir, &mut basis);
    let mut fourier = [0.0; 8];
    fourier_weights(layout.fourier_order, t, period, &mut fourier);
    let nb = layout.basis_len();
    let mut raw = [0.5; 3];
    for (n, &phi) in fourier.iter().enumerate().take(layout.fourier_order + 1) {
        let mut acc = [0.0; 3];
        for (b, &y) in basis.iter().enumerate().take(nb) {
            let k = (n * nb + b) * 3;
            acc[0] += coeffs[k] * y;
            acc[1] += coeffs[k + 1] * y;
            acc[2] += coeffs[k + 2] * y;
        }
        for c in 0..3 {
            raw[c] += phi * acc[c];
        }
    }
    let rgb = [raw[0].max(0.0), raw[1].max(0.0), raw[2].max(0.0)];
    ColorEval {
        basis,
        fourier,
        raw,
        rgb,
    }
}

/// Backward of [`eval_color`]: accumulates coefficient gradients into
/// `d_coeffs` and returns the gradient w.r.t. the (unnormalized) direction.
pub fn eval_color_backward(
    layout: ShLayout,
    coeffs: &[f64],
    eval: &ColorEval,
    d_rgb: [f64; 3],
    dir: &Vector3<f64>,
    d_coeffs: &mut [f64],
) -> Vector3<f64> {
    let g = [
        if eval.raw[0] > 0.0 { d_rgb[0] } else { 0.0 },
        if eval.raw[1] > 0.0 { d_rgb[1] } else { 0.0 },
        if eval.raw[2] > 0.0 { d_rgb[2] } else { 0.0 },
    ];
    if g == [0.0; 3] {
        return Vector3::zeros();
    }
    let nb = layout.basis_len();
    let mut d_basis = [0.0; 16];
    for n in 0..=layout.fourier_order {
        let phi = eval.fourier[n];
        for b in 0..nb {
            let k = (n * nb + b) * 3;
            let y = eval.basis[b];
            for c in 0..3 {
                d_coeffs[k + c] += g[c] * phi * y;
                d_basis[b] += g[c] * phi * coeffs[k + c];
            }
        }
    }
    sh_basis_vjp(layout.degree, dir, &d_basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_constant_matches_closed_form() {
        let c0 = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        assert!((SH_C0 - c0).abs() < 1e-16);
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let dir = Vector3::new(0.3, -0.5, 0.81);
        let g: [f64; 16] = std::array::from_fn(|i| ((i as f64) * 0.37).sin());
        let analytic = sh_basis_vjp(3, &dir, &g);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = dir;
            let mut m = dir;
            p[axis] += h;
            m[axis] -= h;
            let (mut bp, mut bm) = ([0.0; 16], [0.0; 16]);
            sh_basis(3, &p, &mut bp);
            sh_basis(3, &m, &mut bm);
            let fd: f64 = (0..16).map(|i| g[i] * (bp[i] - bm[i]) / (2.0 * h)).sum();
            assert!((fd - analytic[axis]).abs() < 1e-8, "axis {axis}: {fd} vs {}", analytic[axis]);
        }
    }

    #[test]
    fn fourier_zero_order_is_constant() {
        let mut w = [0.0; 8];
        fourier_weights(0, 0.37, 1.0, &mut w);
        assert_eq!(w[0], 1.0);
        fourier_weights(2, 0.25, 1.0, &mut w);
        assert!((w[1] - 0.0).abs() < 1e-15);
        assert!((w[2] + 1.0).abs() < 1e-15);
    }
}
