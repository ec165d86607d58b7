//! Reconstruction losses, μ-law compression and image metrics, each with an
//! analytic gradient where training needs one.

use crate::error::{Error, Result};
use crate::image::ImageF;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported in tables instead of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// D-SSIM share of the reconstruction loss.
    pub lambda: f64,
    /// Weight of the HDR term.
    pub alpha: f64,
    /// μ-law compression factor.
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            alpha: 0.6,
            mu: 5000.0,
        }
    }
}

pub fn l1(a: &ImageF, b: &ImageF) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data.len() as f64)
}

fn l1_grad(a: &ImageF, b: &ImageF, scale: f64, out: &mut [f64]) {
    let n = a.data.len() as f64;
    for ((o, x), y) in out.iter_mut().zip(&a.data).zip(&b.data) {
        let d = x - y;
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *o += scale * s / n;
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable gaussian filter with zero padding; output has the input size.
/// The kernel is symmetric, so this map is its own adjoint.
fn filter_same(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let tap = |i: isize, n: usize| (0..n as isize).contains(&i).then_some(i as usize);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                if let Some(xx) = tap(x as isize + i as isize - r, w) {
                    acc += kv * plane[y * w + xx];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                if let Some(yy) = tap(y as isize + i as isize - r, h) {
                    acc += kv * tmp[yy * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &ImageF, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

fn check_ssim_shape(a: &ImageF, b: &ImageF) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::contract("ssim of an empty image"));
    }
    Ok(())
}

/// Mean SSIM and, if requested, its gradient with respect to `a`.
fn ssim_impl(a: &ImageF, b: &ImageF, want_grad: bool) -> Result<(f64, Option<ImageF>)> {
    check_ssim_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = gaussian_kernel();
    let npos = (w * h) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageF::new(w, h));
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_same(&x, w, h, &k);
        let my = filter_same(&y, w, h, &k);
        let mxx = filter_same(&xx, w, h, &k);
        let myy = filter_same(&yy, w, h, &k);
        let mxy = filter_same(&xy, w, h, &k);
        let n = mx.len();
        let mut d_mx = vec![0.0; n];
        let mut d_mxx = vec![0.0; n];
        let mut d_mxy = vec![0.0; n];
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = mxx[p] - ux * ux;
            let syy = myy[p] - uy * uy;
            let sxy = mxy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let den = b1 * b2;
                d_mx[p] = (2.0 * uy * a2 - 2.0 * uy * a1) / den - s * (2.0 * ux / b1 - 2.0 * ux / b2);
                d_mxx[p] = -s / b2;
                d_mxy[p] = 2.0 * a1 / den;
            }
        }
        if let Some(g) = grad.as_mut() {
            let gx = filter_same(&d_mx, w, h, &k);
            let gxx = filter_same(&d_mxx, w, h, &k);
            let gxy = filter_same(&d_mxy, w, h, &k);
            let scale = 1.0 / (3.0 * npos);
            for q in 0..w * h {
                g.data[q * 3 + c] = scale * (gx[q] + 2.0 * x[q] * gxx[q] + y[q] * gxy[q]);
            }
        }
    }
    Ok((total / (3.0 * npos), grad))
}

/// Mean local SSIM (11×11 gaussian window, σ = 1.5, zero padded, every
/// pixel position), averaged over channels.
pub fn ssim(a: &ImageF, b: &ImageF) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

pub fn dssim(a: &ImageF, b: &ImageF) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// Min and max over all channels.
pub fn mu_law_bounds(img: &ImageF) -> (f64, f64) {
    (img.min_value(), img.max_value())
}

/// Min-max normalizes over all channels, then `ln(1 + μx) / ln(1 + μ)`.
/// A constant image maps to zeros.
pub fn mu_law(img: &ImageF, mu: f64) -> ImageF {
    mu_law_with(img, mu, mu_law_bounds(img))
}

/// [`mu_law`] with explicit normalization bounds `(lo, hi)`.
pub fn mu_law_with(img: &ImageF, mu: f64, (lo, hi): (f64, f64)) -> ImageF {
    let range = hi - lo;
    let denom = (1.0 + mu).ln();
    let data = if !(range >= 1e-12) {
        vec![0.0; img.data.len()]
    } else {
        img.data
            .iter()
            .map(|v| (1.0 + mu * (v - lo) / range).ln() / denom)
            .collect()
    };
    ImageF {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Backward of [`mu_law`] with the min and max treated as constants.
pub fn mu_law_backward(img: &ImageF, mu: f64, d_out: &ImageF) -> ImageF {
    mu_law_backward_with(img, mu, mu_law_bounds(img), d_out)
}

pub fn mu_law_backward_with(img: &ImageF, mu: f64, (lo, hi): (f64, f64), d_out: &ImageF) -> ImageF {
    let range = hi - lo;
    let mut out = ImageF::new(img.width, img.height);
    if !(range >= 1e-12) {
        return out;
    }
    let denom = (1.0 + mu).ln();
    for ((o, v), g) in out.data.iter_mut().zip(&img.data).zip(&d_out.data) {
        let n = (v - lo) / range;
        *o = g * mu / ((1.0 + mu * n) * denom * range);
    }
    out
}

/// `(1 - λ)·L1 + λ·D-SSIM`.
pub fn recon_loss(a: &ImageF, b: &ImageF, lambda: f64) -> Result<f64> {
    Ok((1.0 - lambda) * l1(a, b)? + lambda * dssim(a, b)?)
}

/// [`recon_loss`] and its gradient with respect to `a`.
pub fn recon_loss_grad(a: &ImageF, b: &ImageF, lambda: f64) -> Result<(f64, ImageF)> {
    let l = l1(a, b)?;
    let (s, sg) = ssim_impl(a, b, true)?;
    let mut g = ImageF::new(a.width, a.height);
    l1_grad(a, b, 1.0 - lambda, &mut g.data);
    if let Some(sg) = sg {
        // d/da of λ(1 - s)/2
        g.data.iter_mut().zip(&sg.data).for_each(|(o, v)| *o -= 0.5 * lambda * v);
    }
    Ok(((1.0 - lambda) * l + lambda * (1.0 - s) / 2.0, g))
}

/// Loss value and gradients for every rendered input.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: f64,
    pub ldr: f64,
    /// Unweighted HDR term (0 when no HDR pair was given).
    pub hdr: f64,
    pub d_ldr_2d: Option<ImageF>,
    pub d_ldr_3d: ImageF,
    pub d_hdr_2d: Option<ImageF>,
}

/// `L_ldr + α·L_hdr` with `L_ldr` over the pixel-level (if given) and
/// tone-mapped-splat renders and `L_hdr` on μ-law compressed HDR.
pub fn total_loss(
    ldr_2d: Option<&ImageF>,
    ldr_3d: &ImageF,
    ldr_gt: &ImageF,
    hdr_2d: Option<&ImageF>,
    hdr_gt: Option<&ImageF>,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    total_loss_with(ldr_2d, ldr_3d, ldr_gt, hdr_2d, hdr_gt, weights, None)
}

/// [`total_loss`] with the μ-law bounds of the HDR prediction optionally
/// fixed (they are detached in the gradient either way).
pub fn total_loss_with(
    ldr_2d: Option<&ImageF>,
    ldr_3d: &ImageF,
    ldr_gt: &ImageF,
    hdr_2d: Option<&ImageF>,
    hdr_gt: Option<&ImageF>,
    weights: &LossWeights,
    pred_bounds: Option<(f64, f64)>,
) -> Result<TotalLoss> {
    let (ldr3, d_ldr_3d) = recon_loss_grad(ldr_3d, ldr_gt, weights.lambda)?;
    let mut ldr = ldr3;
    let d_ldr_2d = match ldr_2d {
        Some(img) => {
            let (l, g) = recon_loss_grad(img, ldr_gt, weights.lambda)?;
            ldr += l;
            Some(g)
        }
        None => None,
    };
    let (hdr, d_hdr_2d, alpha) = match (hdr_2d, hdr_gt) {
        (Some(pred), Some(gt)) => {
            pred.ensure_same_shape(gt)?;
            let bounds = pred_bounds.unwrap_or_else(|| mu_law_bounds(pred));
            let mp = mu_law_with(pred, weights.mu, bounds);
            let mg = mu_law(gt, weights.mu);
            let (l, g) = recon_loss_grad(&mp, &mg, weights.lambda)?;
            let mut g = mu_law_backward_with(pred, weights.mu, bounds, &g);
            g.data.iter_mut().for_each(|v| *v *= weights.alpha);
            (l, Some(g), weights.alpha)
        }
        (None, None) => (0.0, None, 0.0),
        _ => {
            return Err(Error::contract(
                "HDR prediction and HDR ground truth must be given together",
            ))
        }
    };
    Ok(TotalLoss {
        total: ldr + alpha * hdr,
        ldr,
        hdr,
        d_ldr_2d,
        d_ldr_3d,
        d_hdr_2d,
    })
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &ImageF, b: &ImageF, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR with the infinite case replaced by [`PSNR_CAP`].
pub fn psnr_capped(a: &ImageF, b: &ImageF) -> Result<f64> {
    Ok(psnr(a, b, 1.0)?.min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageF::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn l1_golden_values() {
        let a = random_image(5, 4, 1);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(l1(&ImageF::new(3, 3), &ImageF::filled(3, 3, [1.0; 3])).unwrap(), 1.0);
        assert!(l1(&a, &ImageF::new(4, 4)).is_err());
    }

    /// Direct 2D windowed SSIM with zero padding, one pixel at a time.
    fn ssim_oracle(a: &ImageF, b: &ImageF) -> f64 {
        let (w, h) = (a.width as isize, a.height as isize);
        let r = 5isize;
        let g = |d: isize| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp();
        let norm: f64 = (-r..=r).map(g).sum::<f64>().powi(2);
        let mut total = 0.0;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (px, py) = (x + dx, y + dy);
                            if px < 0 || py < 0 || px >= w || py >= h {
                                continue;
                            }
                            let wgt = g(dx) * g(dy) / norm;
                            let p = a.pixel(px as usize, py as usize)[c];
                            let q = b.pixel(px as usize, py as usize)[c];
                            mx += wgt * p;
                            my += wgt * q;
                            mxx += wgt * p * p;
                            myy += wgt * q * q;
                            mxy += wgt * p * q;
                        }
                    }
                    let num = (2.0 * mx * my + SSIM_C1) * (2.0 * (mxy - mx * my) + SSIM_C2);
                    let den = (mx * mx + my * my + SSIM_C1) * (mxx - mx * mx + myy - my * my + SSIM_C2);
                    total += num / den;
                }
            }
        }
        total / (3 * w * h) as f64
    }

    #[test]
    fn ssim_golden_values() {
        let a = random_image(16, 12, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let zero = ImageF::new(24, 24);
        let half = ImageF::filled(24, 24, [0.5; 3]);
        // Zero padding leaves a constant pair below the interior value C1 / (0.25 + C1).
        assert!(ssim(&zero, &half).unwrap() < SSIM_C1 / (0.25 + SSIM_C1));
        let b = random_image(16, 12, 3);
        let (small_a, small_b) = (random_image(8, 8, 4), random_image(8, 8, 5));
        for (x, y) in [(&a, &b), (&small_a, &small_b), (&zero, &half)] {
            let got = ssim(x, y).unwrap();
            let want = ssim_oracle(x, y);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(matches!(ssim(&ImageF::new(10, 20), &ImageF::new(20, 10)), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn mu_law_golden_values() {
        let img = ImageF::from_data(3, 1, vec![0.0, 0.5, 1.0, 0.0, 0.5, 1.0, 0.0, 0.5, 1.0]).unwrap();
        let m = mu_law(&img, 5000.0);
        assert_eq!(m.data[0], 0.0);
        assert!((m.data[2] - 1.0).abs() < 1e-15);
        let oracle = 2501f64.ln() / 5001f64.ln();
        assert!((m.data[1] - oracle).abs() < 1e-12);
        assert!((m.data[1] - 0.918_643_3).abs() < 1e-6);
        assert_eq!(mu_law(&ImageF::filled(2, 2, [3.0; 3]), 5000.0).data, vec![0.0; 12]);
    }

    #[test]
    fn psnr_golden_values() {
        let a = ImageF::new(4, 4);
        let b = ImageF::filled(4, 4, [0.1; 3]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn recon_loss_endpoints_and_mix() {
        let a = random_image(12, 12, 3);
        let b = random_image(12, 12, 4);
        assert_eq!(recon_loss(&a, &b, 0.0).unwrap(), l1(&a, &b).unwrap());
        assert_eq!(recon_loss(&a, &b, 1.0).unwrap(), dssim(&a, &b).unwrap());
        let mixed = 0.8 * l1(&a, &b).unwrap() + 0.2 * dssim(&a, &b).unwrap();
        assert!((recon_loss(&a, &b, 0.2).unwrap() - mixed).abs() < 1e-15);
    }

    #[test]
    fn total_loss_contracts() {
        let gt = random_image(12, 12, 5);
        let w = LossWeights::default();
        let z = total_loss(Some(&gt), &gt, &gt, Some(&gt), Some(&gt), &w).unwrap();
        assert_eq!(z.total, 0.0);
        let r = random_image(12, 12, 6);
        let no_hdr = total_loss(Some(&r), &r, &gt, None, None, &w).unwrap();
        assert_eq!(no_hdr.total, no_hdr.ldr);
        assert!(no_hdr.d_hdr_2d.is_none());
        assert!(matches!(
            total_loss(None, &r, &gt, Some(&r), None, &w),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let ldr2 = random_image(12, 12, 7);
        let ldr3 = random_image(12, 12, 8);
        let gt = random_image(12, 12, 9);
        let mut hdr = random_image(12, 12, 10);
        hdr.data.iter_mut().for_each(|v| *v = 0.05 + 8.0 * *v * *v);
        let mut hgt = random_image(12, 12, 11);
        hgt.data.iter_mut().for_each(|v| *v *= 6.0);
        let w = LossWeights::default();
        let base = total_loss(Some(&ldr2), &ldr3, &gt, Some(&hdr), Some(&hgt), &w).unwrap();
        let h = 1e-6;
        let lo = hdr.min_value();
        let hi = hdr.max_value();
        for (which, analytic) in [(0, &base.d_ldr_2d), (1, &Some(base.d_ldr_3d.clone())), (2, &base.d_hdr_2d)] {
            let analytic = analytic.as_ref().unwrap();
            for k in (0..12 * 12 * 3).step_by(7) {
                let eval = |d: f64| {
                    let (mut a, mut b, mut c) = (ldr2.clone(), ldr3.clone(), hdr.clone());
                    match which {
                        0 => a.data[k] += d,
                        1 => b.data[k] += d,
                        _ => c.data[k] += d,
                    }
                    total_loss(Some(&a), &b, &gt, Some(&c), Some(&hgt), &w).unwrap().total
                };
                if which == 2 && (hdr.data[k] == lo || hdr.data[k] == hi) {
                    continue;
                }
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data[k];
                let denom = fd.abs().max(a.abs()).max(1e-8);
                assert!((fd - a).abs() / denom < 1e-4, "input {which} entry {k}: {fd} vs {a}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ssim_is_symmetric_and_dssim_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_image(13, 11, s1);
            let b = random_image(13, 11, s2);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let d = dssim(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn mu_law_is_affine_invariant(s in any::<u64>(), a in -5.0f64..5.0, b in 0.1f64..10.0) {
            let img = random_image(4, 4, s);
            let mut moved = img.clone();
            moved.data.iter_mut().for_each(|v| *v = a + b * *v);
            let m1 = mu_law(&img, 5000.0);
            let m2 = mu_law(&moved, 5000.0);
            for (x, y) in m1.data.iter().zip(&m2.data) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mu_law_is_monotone_on_grid() {
        let n = 10_000;
        let data: Vec<f64> = (0..n * 3).map(|k| (k / 3) as f64 / (n - 1) as f64).collect();
        let img = ImageF::from_data(n, 1, data).unwrap();
        let m = mu_law(&img, 5000.0);
        for k in 1..n {
            assert!(m.data[k * 3] >= m.data[(k - 1) * 3]);
        }
    }
}
