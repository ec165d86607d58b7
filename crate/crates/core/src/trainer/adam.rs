use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moments for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    lr: f64,
    hyper: &AdamHyper,
    step: u64,
) -> Result<()> {
    adam_step_slices(&mut [params], &[grads], moments, lr, hyper, step, "params")
}

/// Adam over a group stored as several slices. Nothing is modified when any
/// gradient is non-finite.
pub fn adam_step_slices(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    moments: &mut Moments,
    lr: f64,
    hyper: &AdamHyper,
    step: u64,
    group: &str,
) -> Result<()> {
    let n: usize = params.iter().map(|p| p.len()).sum();
    let ng: usize = grads.iter().map(|g| g.len()).sum();
    if n != ng || moments.m.len() != n || moments.v.len() != n || params.len() != grads.len() {
        return Err(Error::contract(format!("adam shape mismatch in group {group}")));
    }
    if step == 0 {
        return Err(Error::contract("adam step counts from 1"));
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient { group: group.to_string() });
    }
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let mut k = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &gi) in p.iter_mut().zip(g.iter()) {
            let m = &mut moments.m[k];
            let v = &mut moments.v[k];
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            // Entries with an exactly zero gradient (e.g. gaussians outside the
            // view) keep their value; their moments still decay.
            if gi != 0.0 {
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + hyper.eps);
            }
            k += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut m = Moments {
            m: vec![0.5, 0.5],
            v: vec![1.0, 1.0],
        };
        let h = AdamHyper::default();
        adam_step(&mut p, &[0.0, 0.0], &mut m, 0.1, &h, 3).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(m.m, vec![0.45, 0.45]);
        assert!((m.v[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_sign() {
        let mut p = vec![0.0; 3];
        let mut m = Moments::zeros(3);
        let h = AdamHyper {
            eps: 0.0,
            ..AdamHyper::default()
        };
        adam_step(&mut p, &[3.0, -1e-6, 42.0], &mut m, 0.01, &h, 1).unwrap();
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn minimizes_square() {
        let mut x = vec![1.0];
        let mut m = Moments::zeros(1);
        let h = AdamHyper::default();
        for step in 1..=100 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut m, 0.1, &h, step).unwrap();
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = vec![1.0, 2.0];
        let mut m = Moments::zeros(2);
        let before = (p.clone(), m.clone());
        let err = adam_step(&mut p, &[f64::NAN, 1.0], &mut m, 0.1, &AdamHyper::default(), 1);
        assert!(matches!(err, Err(Error::NonFiniteGradient { .. })));
        assert_eq!((p, m), before);
    }
}
