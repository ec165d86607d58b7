//! 4D Gaussian primitives: parameterization, SO(4) rotations, covariance,
//! temporal slicing and time/view dependent HDR colour.
//!
//! A gaussian lives in (x, y, z, t). Its covariance is `R diag(s²) Rᵀ` where
//! `R = L(q_l) · P(q_r)` is the product of the left- and right-isoclinic
//! matrices of two unit quaternions. At render time the 4D gaussian is sliced
//! at `t`: the temporal marginal gives a weight in (0, 1] and conditioning on
//! `t` gives a 3D gaussian that is splatted as usual.

pub mod sh;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use sh::ShLayout;

/// Gaussians whose temporal weight falls below this at the query time are skipped.
pub const TEMPORAL_CULL: f64 = 1e-7;
/// Minimum usable temporal variance.
pub const MIN_TEMPORAL_VARIANCE: f64 = 1e-12;
/// Tolerance on quaternion norm accepted by [`build_rotation4`].
pub const UNIT_TOLERANCE: f64 = 1e-3;

/// Learnable record of N 4D gaussians, stored as raw (pre-activation) values.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian4DCloud {
    pub mean4: Vec<[f64; 4]>,
    pub log_scale4: Vec<[f64; 4]>,
    pub quat_left: Vec<[f64; 4]>,
    pub quat_right: Vec<[f64; 4]>,
    pub raw_opacity: Vec<f64>,
    /// `N × (fourier_order + 1) × basis × 3`, flattened.
    pub sh: Vec<f64>,
    pub layout: ShLayout,
    /// Period of the Fourier time basis, in normalized clip time.
    pub period: f64,
}

/// Parameter groups, in checkpoint and optimizer order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneGroup {
    Position,
    Scaling,
    Rotation,
    Opacity,
    Sh,
}

impl SceneGroup {
    pub const ALL: [SceneGroup; 5] = [
        SceneGroup::Position,
        SceneGroup::Scaling,
        SceneGroup::Rotation,
        SceneGroup::Opacity,
        SceneGroup::Sh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneGroup::Position => "position",
            SceneGroup::Scaling => "scaling",
            SceneGroup::Rotation => "rotation",
            SceneGroup::Opacity => "opacity",
            SceneGroup::Sh => "sh",
        }
    }
}

/// Random initialization settings.
#[derive(Clone, Debug)]
pub struct InitSpec {
    pub count: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub spatial_scale: f64,
    pub temporal_scale: f64,
    pub opacity: f64,
    pub dc_jitter: f64,
}

impl Gaussian4DCloud {
    pub fn empty(layout: ShLayout) -> Self {
        Self {
            mean4: Vec::new(),
            log_scale4: Vec::new(),
            quat_left: Vec::new(),
            quat_right: Vec::new(),
            raw_opacity: Vec::new(),
            sh: Vec::new(),
            layout,
            period: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.mean4.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean4.is_empty()
    }

    /// Appends one gaussian given activated values (scales > 0, any nonzero quaternions).
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        mean4: [f64; 4],
        scale4: [f64; 4],
        quat_left: [f64; 4],
        quat_right: [f64; 4],
        opacity: f64,
        sh: &[f64],
    ) {
        assert_eq!(sh.len(), self.layout.coeffs_per_gaussian());
        self.mean4.push(mean4);
        self.log_scale4.push(scale4.map(f64::ln));
        self.quat_left.push(quat_left);
        self.quat_right.push(quat_right);
        self.raw_opacity.push(logit(opacity));
        self.sh.extend_from_slice(sh);
    }

    /// Random gaussians uniformly placed in a box and in time.
    pub fn random<R: Rng>(spec: &InitSpec, layout: ShLayout, rng: &mut R) -> Self {
        let mut cloud = Self::empty(layout);
        let per = layout.coeffs_per_gaussian();
        let mut coeffs = vec![0.0; per];
        for _ in 0..spec.count {
            let mut mean = [0.0; 4];
            for a in 0..3 {
                mean[a] = rng.random_range(spec.bounds_min[a]..=spec.bounds_max[a]);
            }
            mean[3] = rng.random_range(0.0..=1.0);
            coeffs.iter_mut().for_each(|c| *c = 0.0);
            for c in 0..3 {
                coeffs[layout.index(0, 0, c)] = rng.random_range(-spec.dc_jitter..=spec.dc_jitter);
            }
            let s = spec.spatial_scale;
            cloud.push(
                mean,
                [s, s, s, spec.temporal_scale],
                [1.0, 0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0, 0.0],
                spec.opacity,
                &coeffs,
            );
        }
        cloud
    }

    #[inline]
    pub fn sh_of(&self, i: usize) -> &[f64] {
        let per = self.layout.coeffs_per_gaussian();
        &self.sh[i * per..(i + 1) * per]
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.raw_opacity[i])
    }

    #[inline]
    pub fn scales(&self, i: usize) -> [f64; 4] {
        self.log_scale4[i].map(f64::exp)
    }

    pub fn covariance(&self, i: usize) -> Result<Matrix4<f64>> {
        build_covariance4(self.log_scale4[i], self.quat_left[i], self.quat_right[i])
    }

    /// Flat view of one parameter group.
    pub fn group(&self, g: SceneGroup) -> &[f64] {
        match g {
            SceneGroup::Position => self.mean4.as_flattened(),
            SceneGroup::Scaling => self.log_scale4.as_flattened(),
            SceneGroup::Rotation => self.quat_left.as_flattened(),
            SceneGroup::Opacity => &self.raw_opacity,
            SceneGroup::Sh => &self.sh,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.mean4.as_flattened().iter().all(|v| v.is_finite())
            && self.log_scale4.as_flattened().iter().all(|v| v.is_finite())
            && self.quat_left.as_flattened().iter().all(|v| v.is_finite())
            && self.quat_right.as_flattened().iter().all(|v| v.is_finite())
            && self.raw_opacity.iter().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite())
    }
}

/// Gradient with the same layout as [`Gaussian4DCloud`]. Rotation holds both
/// quaternions, left then right, per gaussian (8 values).
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrad {
    pub mean4: Vec<[f64; 4]>,
    pub log_scale4: Vec<[f64; 4]>,
    pub quat_left: Vec<[f64; 4]>,
    pub quat_right: Vec<[f64; 4]>,
    pub raw_opacity: Vec<f64>,
    pub sh: Vec<f64>,
}

impl CloudGrad {
    pub fn zeros_like(cloud: &Gaussian4DCloud) -> Self {
        let n = cloud.len();
        Self {
            mean4: vec![[0.0; 4]; n],
            log_scale4: vec![[0.0; 4]; n],
            quat_left: vec![[0.0; 4]; n],
            quat_right: vec![[0.0; 4]; n],
            raw_opacity: vec![0.0; n],
            sh: vec![0.0; cloud.sh.len()],
        }
    }

    pub fn add_assign(&mut self, other: &CloudGrad) {
        fn add(a: &mut [f64], b: &[f64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        add(self.mean4.as_flattened_mut(), other.mean4.as_flattened());
        add(self.log_scale4.as_flattened_mut(), other.log_scale4.as_flattened());
        add(self.quat_left.as_flattened_mut(), other.quat_left.as_flattened());
        add(self.quat_right.as_flattened_mut(), other.quat_right.as_flattened());
        add(&mut self.raw_opacity, &other.raw_opacity);
        add(&mut self.sh, &other.sh);
    }

    pub fn all_zero(&self) -> bool {
        self.flat_groups().iter().all(|(_, v)| v.iter().all(|x| *x == 0.0))
    }

    /// Gradients per group; rotation concatenates left and right quaternions.
    pub fn flat_groups(&self) -> Vec<(SceneGroup, Vec<f64>)> {
        let mut rot = Vec::with_capacity(self.quat_left.len() * 8);
        rot.extend_from_slice(self.quat_left.as_flattened());
        rot.extend_from_slice(self.quat_right.as_flattened());
        vec![
            (SceneGroup::Position, self.mean4.as_flattened().to_vec()),
            (SceneGroup::Scaling, self.log_scale4.as_flattened().to_vec()),
            (SceneGroup::Rotation, rot),
            (SceneGroup::Opacity, self.raw_opacity.clone()),
            (SceneGroup::Sh, self.sh.clone()),
        ]
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Left-multiplication matrix: `L(q) x = q ⊗ x`.
pub fn left_matrix(q: [f64; 4]) -> Matrix4<f64> {
    let [a, b, c, d] = q;
    Matrix4::new(
        a, -b, -c, -d, //
        b, a, -d, c, //
        c, d, a, -b, //
        d, -c, b, a,
    )
}

/// Right-multiplication matrix: `P(q) x = x ⊗ q`.
pub fn right_matrix(q: [f64; 4]) -> Matrix4<f64> {
    let [p, q1, r, s] = q;
    Matrix4::new(
        p, -q1, -r, -s, //
        q1, p, s, -r, //
        r, -s, p, q1, //
        s, r, -q1, p,
    )
}

fn norm4(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Normalizes a raw quaternion. Zero or non-finite norm is an error.
pub fn normalize_quat(q: [f64; 4]) -> Result<([f64; 4], f64)> {
    let n = norm4(q);
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::DegenerateRotation { norm: n });
    }
    Ok((q.map(|v| v / n), n))
}

/// 4D rotation from a pair of (near-)unit quaternions.
pub fn build_rotation4(quat_left: [f64; 4], quat_right: [f64; 4]) -> Result<Matrix4<f64>> {
    let mut unit = [[0.0; 4]; 2];
    for (slot, q) in unit.iter_mut().zip([quat_left, quat_right]) {
        let n = norm4(q);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::DegenerateRotation { norm: n });
        }
        *slot = q.map(|v| v / n);
    }
    Ok(left_matrix(unit[0]) * right_matrix(unit[1]))
}

/// `Σ = R diag(exp(2·log_scale)) Rᵀ` from raw parameters.
pub fn build_covariance4(
    log_scale4: [f64; 4],
    quat_left: [f64; 4],
    quat_right: [f64; 4],
) -> Result<Matrix4<f64>> {
    if log_scale4
        .iter()
        .chain(&quat_left)
        .chain(&quat_right)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFiniteParameter {
            what: "covariance parameters",
        });
    }
    let (l, _) = normalize_quat(quat_left)?;
    let (r, _) = normalize_quat(quat_right)?;
    let rot = left_matrix(l) * right_matrix(r);
    let d = Matrix4::from_diagonal(&Vector4::from(log_scale4.map(|s| (2.0 * s).exp())));
    Ok(rot * d * rot.transpose())
}

/// Unnormalized temporal marginal `exp(-(t - μt)² / (2 Σ_tt))`.
pub fn temporal_weight(cov: &Matrix4<f64>, mu_t: f64, t: f64) -> Result<f64> {
    let s = cov[(3, 3)];
    if s.is_nan() || s <= MIN_TEMPORAL_VARIANCE {
        return Err(Error::DegenerateTemporalVariance { value: s });
    }
    let dt = t - mu_t;
    Ok((-dt * dt / (2.0 * s)).exp())
}

/// Spatial gaussian conditioned on time `t`.
pub fn conditional_spatial(
    cov: &Matrix4<f64>,
    mean4: [f64; 4],
    t: f64,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let s = cov[(3, 3)];
    if s.is_nan() || s <= MIN_TEMPORAL_VARIANCE {
        return Err(Error::DegenerateTemporalVariance { value: s });
    }
    let col = Vector3::new(cov[(0, 3)], cov[(1, 3)], cov[(2, 3)]);
    let row = Vector3::new(cov[(3, 0)], cov[(3, 1)], cov[(3, 2)]);
    let dt = t - mean4[3];
    let mean3 = Vector3::new(mean4[0], mean4[1], mean4[2]) + col * (dt / s);
    let cov3 = cov.fixed_view::<3, 3>(0, 0).into_owned() - col * row.transpose() / s;
    Ok((mean3, cov3))
}

/// Everything computed when slicing one gaussian at time `t`, kept for backward.
#[derive(Clone, Debug)]
pub struct SlicedGaussian {
    pub unit_left: [f64; 4],
    pub unit_right: [f64; 4],
    pub norm_left: f64,
    pub norm_right: f64,
    pub left: Matrix4<f64>,
    pub right: Matrix4<f64>,
    pub rot: Matrix4<f64>,
    pub var_diag: [f64; 4],
    pub cov4: Matrix4<f64>,
    pub dt: f64,
    pub temporal_weight: f64,
    pub mean3: Vector3<f64>,
    pub cov3: Matrix3<f64>,
}

/// Slices gaussian `i` of `cloud` at time `t`.
pub fn slice_gaussian(cloud: &Gaussian4DCloud, i: usize, t: f64) -> Result<SlicedGaussian> {
    let (unit_left, norm_left) = normalize_quat(cloud.quat_left[i])?;
    let (unit_right, norm_right) = normalize_quat(cloud.quat_right[i])?;
    let left = left_matrix(unit_left);
    let right = right_matrix(unit_right);
    let rot = left * right;
    let var_diag = cloud.log_scale4[i].map(|s| (2.0 * s).exp());
    let cov4 = rot * Matrix4::from_diagonal(&Vector4::from(var_diag)) * rot.transpose();
    let mean4 = cloud.mean4[i];
    let temporal_weight = temporal_weight(&cov4, mean4[3], t)?;
    let (mean3, cov3) = conditional_spatial(&cov4, mean4, t)?;
    Ok(SlicedGaussian {
        unit_left,
        unit_right,
        norm_left,
        norm_right,
        left,
        right,
        rot,
        var_diag,
        cov4,
        dt: t - mean4[3],
        temporal_weight,
        mean3,
        cov3,
    })
}

/// Gradients of one gaussian's raw geometric parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct GeometryGrad {
    pub mean4: [f64; 4],
    pub log_scale4: [f64; 4],
    pub quat_left: [f64; 4],
    pub quat_right: [f64; 4],
}

/// Backward of [`slice_gaussian`] given gradients of the temporal weight,
/// the conditional mean and the conditional covariance (full 3×3, not
/// assumed symmetric).
pub fn slice_backward(
    sliced: &SlicedGaussian,
    d_tw: f64,
    d_mean3: &Vector3<f64>,
    d_cov3: &Matrix3<f64>,
) -> GeometryGrad {
    let cov = &sliced.cov4;
    let s = cov[(3, 3)];
    let dt = sliced.dt;
    let col = Vector3::new(cov[(0, 3)], cov[(1, 3)], cov[(2, 3)]);
    let row = Vector3::new(cov[(3, 0)], cov[(3, 1)], cov[(3, 2)]);

    let mut g = Matrix4::<f64>::zeros();
    // cov3 = Σxx - col rowᵀ / s
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(d_cov3);
    let mut d_col = -(d_cov3 * row) / s;
    let d_row = -(d_cov3.transpose() * col) / s;
    let mut d_s = (col.transpose() * d_cov3 * row)[(0, 0)] / (s * s);
    // mean3 = μ + col dt / s
    d_col += d_mean3 * (dt / s);
    let mut d_dt = d_mean3.dot(&col) / s;
    d_s -= d_mean3.dot(&col) * dt / (s * s);
    // tw = exp(-dt² / 2s)
    let tw = sliced.temporal_weight;
    d_dt += d_tw * tw * (-dt / s);
    d_s += d_tw * tw * dt * dt / (2.0 * s * s);
    for k in 0..3 {
        g[(k, 3)] = d_col[k];
        g[(3, k)] = d_row[k];
    }
    g[(3, 3)] = d_s;

    // Σ = R D Rᵀ
    let rot = &sliced.rot;
    let dmat = Matrix4::from_diagonal(&Vector4::from(sliced.var_diag));
    let d_rot = (g + g.transpose()) * rot * dmat;
    let rgr = rot.transpose() * g * rot;
    let mut log_scale4 = [0.0; 4];
    for k in 0..4 {
        log_scale4[k] = rgr[(k, k)] * 2.0 * sliced.var_diag[k];
    }
    // R = L P
    let d_left = d_rot * sliced.right.transpose();
    let d_right = sliced.left.transpose() * d_rot;
    let dq_l = linear_matrix_vjp(left_matrix, &d_left);
    let dq_r = linear_matrix_vjp(right_matrix, &d_right);
    GeometryGrad {
        mean4: [d_mean3.x, d_mean3.y, d_mean3.z, -d_dt],
        log_scale4,
        quat_left: normalize_vjp(sliced.unit_left, sliced.norm_left, dq_l),
        quat_right: normalize_vjp(sliced.unit_right, sliced.norm_right, dq_r),
    }
}

/// `∂/∂q Σ_ij G_ij M(q)_ij` for a matrix `M` linear in `q`.
fn linear_matrix_vjp(build: fn([f64; 4]) -> Matrix4<f64>, g: &Matrix4<f64>) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (m, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 4];
        e[m] = 1.0;
        *o = build(e).component_mul(g).sum();
    }
    out
}

fn normalize_vjp(unit: [f64; 4], norm: f64, g: [f64; 4]) -> [f64; 4] {
    let dot: f64 = (0..4).map(|k| unit[k] * g[k]).sum();
    std::array::from_fn(|k| (g[k] - unit[k] * dot) / norm)
}

/// HDR colour of gaussian `i` seen along `view_dir` at time `t`.
pub fn eval_color_4dsh(cloud: &Gaussian4DCloud, i: usize, view_dir: &Vector3<f64>, t: f64) -> [f64; 3] {
    sh::eval_color(cloud.layout, cloud.sh_of(i), view_dir, t, cloud.period).rgb
}
