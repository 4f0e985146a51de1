//! Training losses with exact gradients.
//!
//! Every loss comes in a value-only form and a `*_with_grad` form returning
//! the gradient with respect to each prediction input. The training loop
//! feeds these gradients straight into the network's backward pass, so they
//! are the only source of loss derivatives.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{unit_quat_matrix, Quaternion};
use crate::metrics::nearest_squared;
use crate::objects::ObjectModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("predicted quaternion has zero norm")]
    ZeroQuaternion,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("depth mask selects no pixels")]
    EmptyMask,
    #[error("label {label} at ({row}, {col}) is out of range for {classes} classes")]
    LabelOutOfRange {
        label: usize,
        row: usize,
        col: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    /// Use `1 - |<q~, q>|` so both quaternion signs of the target are accepted.
    pub double_cover_abs: bool,
}

/// Pose loss value with gradients w.r.t. the raw quaternion and the translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseLossGrad {
    pub value: f64,
    pub d_quat: [f64; 4],
    pub d_translation: Vector3<f64>,
}

/// Mean squared distance between model points placed by the predicted and
/// ground-truth poses. With `symmetric`, each predicted point is matched to
/// its nearest ground-truth point instead of its counterpart.
pub fn pose_loss(
    model: &ObjectModel,
    q_pred: Quaternion,
    t_pred: &Vector3<f64>,
    q_gt: Quaternion,
    t_gt: &Vector3<f64>,
    symmetric: bool,
) -> Result<f64, LossError> {
    Ok(pose_loss_with_grad(model, q_pred, t_pred, q_gt, t_gt, symmetric)?.value)
}

pub fn pose_loss_with_grad(
    model: &ObjectModel,
    q_pred: Quaternion,
    t_pred: &Vector3<f64>,
    q_gt: Quaternion,
    t_gt: &Vector3<f64>,
    symmetric: bool,
) -> Result<PoseLossGrad, LossError> {
    let q_hat = q_pred.normalized().map_err(|_| LossError::ZeroQuaternion)?;
    let q_gt = q_gt.normalized().map_err(|_| LossError::ZeroQuaternion)?;
    let r_pred = unit_quat_matrix(&q_hat);
    let r_gt = unit_quat_matrix(&q_gt);
    let pts = model.points();
    let m = pts.len() as f64;

    let gt_pts: Vec<Vector3<f64>> = pts.iter().map(|x| r_gt * x + t_gt).collect();
    let mut value = 0.0;
    let mut d_t = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for (i, x) in pts.iter().enumerate() {
        let p = r_pred * x + t_pred;
        let target = if symmetric {
            nearest(&p, &gt_pts)
        } else {
            gt_pts[i]
        };
        let diff = p - target;
        value += diff.norm_squared();
        d_t += diff;
        d_r += diff * x.transpose();
    }
    let scale = 2.0 / m;
    let d_q_hat = rotation_matrix_vjp(&q_hat, &(d_r * scale));
    Ok(PoseLossGrad {
        value: value / m,
        d_quat: normalize_vjp(q_pred, d_q_hat),
        d_translation: d_t * scale,
    })
}

fn nearest(p: &Vector3<f64>, set: &[Vector3<f64>]) -> Vector3<f64> {
    let mut best = set[0];
    let mut best_d = f64::INFINITY;
    for q in set {
        let d = (p - q).norm_squared();
        if d < best_d {
            best_d = d;
            best = *q;
        }
    }
    best
}

/// Symmetric pose loss computed from an explicit nearest-point search; used
/// by property tests that need only the value.
pub fn symmetric_pose_loss_value(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    pred.iter().map(|p| nearest_squared(p, gt)).sum::<f64>() / pred.len() as f64
}

/// Vector-Jacobian product of the unit-quaternion rotation matrix formula:
/// returns `sum_ij G_ij * dR_ij/dq_k` for `q = (w, x, y, z)`.
pub fn rotation_matrix_vjp(q: &Quaternion, g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Pulls a gradient w.r.t. `q / |q|` back to `q`: `(I - q^ q^T) g / |q|`.
pub fn normalize_vjp(q: Quaternion, g: [f64; 4]) -> [f64; 4] {
    let n = q.norm();
    let u = q.scale(1.0 / n).to_array();
    let proj: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (g[k] - u[k] * proj) / n;
    }
    out
}

/// `|1 - |q~||`.
pub fn quat_reg_loss(q: Quaternion) -> f64 {
    (1.0 - q.norm()).abs()
}

/// Gradient of [`quat_reg_loss`]; zero at the origin and on the unit sphere,
/// where the loss is not differentiable.
pub fn quat_reg_loss_with_grad(q: Quaternion) -> (f64, [f64; 4]) {
    let n = q.norm();
    let value = (1.0 - n).abs();
    if n == 0.0 || n == 1.0 {
        return (value, [0.0; 4]);
    }
    let s = if n > 1.0 { 1.0 } else { -1.0 } / n;
    (value, q.scale(s).to_array())
}

/// `1 - <q~, q>`, or `1 - |<q~, q>|` with `double_cover_abs`.
pub fn quat_inner_prod_loss(q_pred: Quaternion, q_gt: Quaternion, opts: &LossOptions) -> f64 {
    quat_inner_prod_loss_with_grad(q_pred, q_gt, opts).0
}

pub fn quat_inner_prod_loss_with_grad(
    q_pred: Quaternion,
    q_gt: Quaternion,
    opts: &LossOptions,
) -> (f64, [f64; 4]) {
    let d = q_pred.dot(&q_gt);
    if opts.double_cover_abs {
        let s = if d >= 0.0 { 1.0 } else { -1.0 };
        (1.0 - d.abs(), q_gt.scale(-s).to_array())
    } else {
        (1.0 - d, q_gt.scale(-1.0).to_array())
    }
}

/// Mean absolute depth error over `mask`.
pub fn depth_loss(
    pred: ArrayView2<f64>,
    gt: ArrayView2<f64>,
    mask: ArrayView2<bool>,
) -> Result<f64, LossError> {
    Ok(depth_loss_with_grad(pred, gt, mask)?.0)
}

pub fn depth_loss_with_grad(
    pred: ArrayView2<f64>,
    gt: ArrayView2<f64>,
    mask: ArrayView2<bool>,
) -> Result<(f64, Array2<f64>), LossError> {
    if pred.dim() != gt.dim() || pred.dim() != mask.dim() {
        return Err(LossError::Shape(format!(
            "depth pred {:?}, gt {:?}, mask {:?}",
            pred.dim(),
            gt.dim(),
            mask.dim()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad)
        .and(pred)
        .and(gt)
        .and(mask)
        .for_each(|g, &p, &t, &m| {
            if m {
                let d = p - t;
                sum += d.abs();
                *g = if d > 0.0 {
                    inv
                } else if d < 0.0 {
                    -inv
                } else {
                    0.0
                };
            }
        });
    Ok((sum * inv, grad))
}

/// Mean per-pixel softmax cross entropy. `logits` is `H x W x C`; class 0 is background.
pub fn label_loss(logits: ArrayView3<f64>, labels: ArrayView2<u8>) -> Result<f64, LossError> {
    Ok(label_loss_with_grad(logits, labels)?.0)
}

pub fn label_loss_with_grad(
    logits: ArrayView3<f64>,
    labels: ArrayView2<u8>,
) -> Result<(f64, Array3<f64>), LossError> {
    let (h, w, c) = logits.dim();
    if labels.dim() != (h, w) {
        return Err(LossError::Shape(format!(
            "logits {:?} vs labels {:?}",
            logits.dim(),
            labels.dim()
        )));
    }
    if h * w == 0 || c == 0 {
        return Err(LossError::Shape("empty label map".into()));
    }
    let inv = 1.0 / (h * w) as f64;
    let mut grad = Array3::zeros((h, w, c));
    let mut total = 0.0;
    for row in 0..h {
        for col in 0..w {
            let label = labels[(row, col)] as usize;
            if label >= c {
                return Err(LossError::LabelOutOfRange {
                    label,
                    row,
                    col,
                    classes: c,
                });
            }
            let z = logits.slice(ndarray::s![row, col, ..]);
            let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - z[label];
            for k in 0..c {
                let p = (z[k] - lse).exp();
                grad[(row, col, k)] = (p - if k == label { 1.0 } else { 0.0 }) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub depth: f64,
    pub label: f64,
    pub pose: f64,
    pub reg: f64,
    pub inner_prod: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            label: 1.0,
            pose: 1.0,
            reg: 1.0,
            inner_prod: 1.0,
        }
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub depth: f64,
    pub label: f64,
    pub pose: f64,
    pub reg: f64,
    pub inner_prod: f64,
}

impl LossTerms {
    pub fn add_assign_scaled(&mut self, o: &LossTerms, s: f64) {
        self.depth += o.depth * s;
        self.label += o.label * s;
        self.pose += o.pose * s;
        self.reg += o.reg * s;
        self.inner_prod += o.inner_prod * s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub depth: f64,
    pub label: f64,
    pub pose: f64,
    pub reg: f64,
    pub inner_prod: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            depth: self.depth,
            label: self.label,
            pose: self.pose,
            reg: self.reg,
            inner_prod: self.inner_prod,
        }
    }
}

/// Weighted sum of the five terms.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> LossBreakdown {
    let total = weights.depth * terms.depth
        + weights.label * terms.label
        + weights.pose * terms.pose
        + weights.reg * terms.reg
        + weights.inner_prod * terms.inner_prod;
    LossBreakdown {
        depth: terms.depth,
        label: terms.label,
        pose: terms.pose,
        reg: terms.reg,
        inner_prod: terms.inner_prod,
        total,
        weights: *weights,
    }
}

/// Prediction and target of one object in one frame.
#[derive(Debug, Clone, Copy)]
pub struct ObjectLossInput<'a> {
    pub model: &'a ObjectModel,
    pub q_pred: Quaternion,
    pub t_pred: Vector3<f64>,
    pub q_gt: Quaternion,
    pub t_gt: Vector3<f64>,
}

/// Everything the frame loss needs. Maps are `H x W`, logits `H x W x C`.
#[derive(Debug, Clone)]
pub struct FrameLossInput<'a> {
    pub depth_pred: ArrayView2<'a, f64>,
    pub depth_gt: ArrayView2<'a, f64>,
    pub depth_mask: ArrayView2<'a, bool>,
    pub logits: ArrayView3<'a, f64>,
    pub labels: ArrayView2<'a, u8>,
    pub objects: Vec<ObjectLossInput<'a>>,
}

#[derive(Debug, Clone)]
pub struct FrameLossGrad {
    pub breakdown: LossBreakdown,
    pub d_depth: Array2<f64>,
    pub d_logits: Array3<f64>,
    /// Per object, in input order: (d raw quaternion, d translation).
    pub d_objects: Vec<([f64; 4], Vector3<f64>)>,
}

/// Frame loss: depth and label terms over the image, pose/reg/inner-product
/// terms averaged over the objects present. An empty depth mask contributes 0.
pub fn frame_loss_with_grad(
    input: &FrameLossInput<'_>,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<FrameLossGrad, LossError> {
    let (depth, mut d_depth) =
        match depth_loss_with_grad(input.depth_pred, input.depth_gt, input.depth_mask) {
            Ok(v) => v,
            Err(LossError::EmptyMask) => (0.0, Array2::zeros(input.depth_pred.dim())),
            Err(e) => return Err(e),
        };
    let (label, mut d_logits) = label_loss_with_grad(input.logits, input.labels)?;
    d_depth *= weights.depth;
    d_logits *= weights.label;

    let mut terms = LossTerms {
        depth,
        label,
        ..Default::default()
    };
    let mut d_objects = Vec::with_capacity(input.objects.len());
    if !input.objects.is_empty() {
        let k = 1.0 / input.objects.len() as f64;
        for o in &input.objects {
            let pose = pose_loss_with_grad(
                o.model,
                o.q_pred,
                &o.t_pred,
                o.q_gt,
                &o.t_gt,
                o.model.symmetric(),
            )?;
            let (reg, d_reg) = quat_reg_loss_with_grad(o.q_pred);
            let (inner, d_inner) = quat_inner_prod_loss_with_grad(o.q_pred, o.q_gt, opts);
            terms.pose += k * pose.value;
            terms.reg += k * reg;
            terms.inner_prod += k * inner;
            let mut dq = [0.0; 4];
            for i in 0..4 {
                dq[i] = k
                    * (weights.pose * pose.d_quat[i]
                        + weights.reg * d_reg[i]
                        + weights.inner_prod * d_inner[i]);
            }
            d_objects.push((dq, pose.d_translation * (k * weights.pose)));
        }
    }
    Ok(FrameLossGrad {
        breakdown: total_loss(&terms, weights),
        d_depth,
        d_logits,
        d_objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_to_matrix;
    use crate::objects::Shape;
    use approx::assert_relative_eq;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-5;
    const FD_RTOL: f64 = 1e-3;

    fn cube() -> ObjectModel {
        ObjectModel::unit_cube("cube", false)
    }

    fn rand_quat(rng: &mut ChaCha8Rng, scale: f64) -> Quaternion {
        Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalized()
        .unwrap()
        .scale(scale)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    /// Central differences of `f` around `x`.
    fn fd_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += FD_STEP;
                m[i] -= FD_STEP;
                (f(&p) - f(&m)) / (2.0 * FD_STEP)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], rtol: f64) {
        let scale = numeric.iter().chain(analytic).fold(0.0f64, |a, b| a.max(b.abs())).max(1e-3);
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            assert!(
                (a - n).abs() <= rtol * scale,
                "component {i}: analytic {a} vs numeric {n} (scale {scale})"
            );
        }
    }

    #[test]
    fn pose_loss_examples() {
        let q = Quaternion::new(0.5, 0.5, -0.5, 0.5);
        let t = Vector3::new(0.1, 0.2, 1.0);
        assert_eq!(pose_loss(&cube(), q, &t, q, &t, false).unwrap(), 0.0);
        let d = 0.03;
        let v = pose_loss(&cube(), q, &(t + Vector3::new(d, 0.0, 0.0)), q, &t, false).unwrap();
        assert_relative_eq!(v, d * d, epsilon = 1e-15);
    }

    #[test]
    fn pose_loss_cube_half_turn() {
        let half = Quaternion::new(0.0, 0.0, 0.0, 1.0);
        let id = Quaternion::identity();
        let t = Vector3::zeros();
        let sym = pose_loss(&cube(), half, &t, id, &t, true).unwrap();
        let plain = pose_loss(&cube(), half, &t, id, &t, false).unwrap();
        assert_eq!(sym, 0.0);
        assert_relative_eq!(plain, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn pose_loss_rejects_zero_quaternion() {
        let t = Vector3::zeros();
        assert_eq!(
            pose_loss(&cube(), Quaternion::new(0.0, 0.0, 0.0, 0.0), &t, Quaternion::identity(), &t, false),
            Err(LossError::ZeroQuaternion)
        );
    }

    #[test]
    fn quaternion_loss_examples() {
        let q = Quaternion::new(0.1, 0.7, -0.1, 0.7).normalized().unwrap();
        assert!(quat_reg_loss(q) < 1e-15);
        assert_relative_eq!(quat_reg_loss(q.scale(2.0)), 1.0, epsilon = 1e-15);
        assert_eq!(quat_reg_loss(Quaternion::new(0.0, 0.0, 0.0, 0.0)), 1.0);

        let opts = LossOptions::default();
        assert_relative_eq!(quat_inner_prod_loss(q, q, &opts), 0.0, epsilon = 1e-15);
        assert_relative_eq!(quat_inner_prod_loss(-q, q, &opts), 2.0, epsilon = 1e-15);
        let e = Quaternion::identity();
        assert_eq!(quat_inner_prod_loss(e, Quaternion::new(0.0, 1.0, 0.0, 0.0), &opts), 1.0);
        let abs = LossOptions { double_cover_abs: true };
        assert_relative_eq!(quat_inner_prod_loss(-q, q, &abs), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn depth_loss_examples() {
        let gt = Array2::from_shape_fn((4, 5), |(r, c)| 0.5 + 0.1 * r as f64 + 0.01 * c as f64);
        let all = Array2::from_elem((4, 5), true);
        assert_eq!(depth_loss(gt.view(), gt.view(), all.view()).unwrap(), 0.0);
        let pred = &gt + 0.05;
        assert_relative_eq!(depth_loss(pred.view(), gt.view(), all.view()).unwrap(), 0.05, epsilon = 1e-12);

        let mut mask = Array2::from_elem((4, 5), true);
        mask[(1, 1)] = false;
        let mut off = gt.clone();
        off[(1, 1)] += 3.0;
        assert_eq!(depth_loss(off.view(), gt.view(), mask.view()).unwrap(), 0.0);

        let none = Array2::from_elem((4, 5), false);
        assert_eq!(depth_loss(gt.view(), gt.view(), none.view()), Err(LossError::EmptyMask));
        let small = Array2::zeros((2, 2));
        assert!(matches!(depth_loss(small.view(), gt.view(), all.view()), Err(LossError::Shape(_))));
    }

    #[test]
    fn label_loss_examples() {
        let uniform = Array3::zeros((3, 2, 4));
        let labels = Array2::from_shape_fn((3, 2), |(r, c)| ((r + c) % 4) as u8);
        assert_relative_eq!(label_loss(uniform.view(), labels.view()).unwrap(), 4f64.ln(), epsilon = 1e-14);

        for l in [0.5, 2.0, 7.0] {
            let logits = Array3::from_shape_vec((1, 1, 2), vec![0.0, l]).unwrap();
            let one = Array2::from_elem((1, 1), 1u8);
            let expected = (1.0 + (-l as f64).exp()).ln();
            assert_relative_eq!(label_loss(logits.view(), one.view()).unwrap(), expected, epsilon = 1e-14);
        }

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = Array3::from_shape_fn((2, 2, 3), |(r, c, k)| if k == (r + c) % 3 { margin } else { 0.0 });
            let lab = Array2::from_shape_fn((2, 2), |(r, c)| ((r + c) % 3) as u8);
            let v = label_loss(logits.view(), lab.view()).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);

        let bad = Array2::from_elem((3, 2), 4u8);
        assert!(matches!(
            label_loss(uniform.view(), bad.view()),
            Err(LossError::LabelOutOfRange { label: 4, .. })
        ));
    }

    #[test]
    fn total_loss_examples() {
        let zero = total_loss(&LossTerms::default(), &LossWeights::default());
        assert_eq!(zero.total, 0.0);
        let terms = LossTerms { depth: 0.1, label: 0.2, pose: 0.3, reg: 0.4, inner_prod: 0.5 };
        let b = total_loss(&terms, &LossWeights::default());
        assert_relative_eq!(b.total, 1.5, epsilon = 1e-12);
        let w = LossWeights { depth: 2.0, label: 0.0, pose: 1.0, reg: 0.5, inner_prod: 3.0 };
        let b = total_loss(&terms, &w);
        assert_relative_eq!(b.total, 0.2 + 0.3 + 0.2 + 1.5, epsilon = 1e-12);
        assert_eq!(b.terms(), terms);
    }

    #[test]
    fn pose_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::Pyramid { base: 0.1, height: 0.08 };
        let model = ObjectModel::from_shape("p", &shape, 40, false).unwrap();
        for symmetric in [false, true] {
            for _ in 0..25 {
                let s = rng.random_range(0.5..1.5);
                let q = rand_quat(&mut rng, s);
                let t = rand_vec(&mut rng, 0.3);
                let q_gt = rand_quat(&mut rng, 1.0);
                let t_gt = rand_vec(&mut rng, 0.3);
                let g = pose_loss_with_grad(&model, q, &t, q_gt, &t_gt, symmetric).unwrap();
                let x: Vec<f64> = q.to_array().iter().chain(t.iter()).copied().collect();
                let num = fd_grad(&x, |v| {
                    pose_loss(
                        &model,
                        Quaternion::new(v[0], v[1], v[2], v[3]),
                        &Vector3::new(v[4], v[5], v[6]),
                        q_gt,
                        &t_gt,
                        symmetric,
                    )
                    .unwrap()
                });
                let ana: Vec<f64> = g.d_quat.iter().chain(g.d_translation.iter()).copied().collect();
                assert_grad_close(&ana, &num, FD_RTOL);
            }
        }
    }

    #[test]
    fn quaternion_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for abs in [false, true] {
            let opts = LossOptions { double_cover_abs: abs };
            for _ in 0..25 {
                let s = rng.random_range(0.2..2.0);
                let q = rand_quat(&mut rng, s);
                let q_gt = rand_quat(&mut rng, 1.0);
                let f = |v: &[f64]| Quaternion::new(v[0], v[1], v[2], v[3]);
                let (_, g) = quat_reg_loss_with_grad(q);
                assert_grad_close(&g, &fd_grad(&q.to_array(), |v| quat_reg_loss(f(v))), FD_RTOL);
                let (_, g) = quat_inner_prod_loss_with_grad(q, q_gt, &opts);
                let num = fd_grad(&q.to_array(), |v| quat_inner_prod_loss(f(v), q_gt, &opts));
                assert_grad_close(&g, &num, FD_RTOL);
            }
        }
    }

    #[test]
    fn map_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w, c) = (3, 4, 3);
            let pred: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.2..1.0)).collect();
            let gt = Array2::from_shape_fn((h, w), |_| rng.random_range(0.2..1.0));
            let mask = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.7));
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let (_, g) = depth_loss_with_grad(
                Array2::from_shape_vec((h, w), pred.clone()).unwrap().view(),
                gt.view(),
                mask.view(),
            )
            .unwrap();
            let num = fd_grad(&pred, |v| {
                depth_loss(Array2::from_shape_vec((h, w), v.to_vec()).unwrap().view(), gt.view(), mask.view())
                    .unwrap()
            });
            assert_grad_close(g.as_slice().unwrap(), &num, FD_RTOL);

            let logits: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let labels = Array2::from_shape_fn((h, w), |_| rng.random_range(0..c as u8));
            let (_, g) = label_loss_with_grad(
                Array3::from_shape_vec((h, w, c), logits.clone()).unwrap().view(),
                labels.view(),
            )
            .unwrap();
            let num = fd_grad(&logits, |v| {
                label_loss(Array3::from_shape_vec((h, w, c), v.to_vec()).unwrap().view(), labels.view()).unwrap()
            });
            assert_grad_close(g.as_slice().unwrap(), &num, FD_RTOL);
        }
    }

    fn frame_fixture(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>, Array2<bool>, Array3<f64>, Array2<u8>) {
        let (h, w, c) = (3, 3, 3);
        (
            Array2::from_shape_fn((h, w), |_| rng.random_range(0.3..1.0)),
            Array2::from_shape_fn((h, w), |_| rng.random_range(0.3..1.0)),
            Array2::from_shape_fn((h, w), |(r, _)| r != 1),
            Array3::from_shape_fn((h, w, c), |_| rng.random_range(-2.0..2.0)),
            Array2::from_shape_fn((h, w), |_| rng.random_range(0..c as u8)),
        )
    }

    #[test]
    fn frame_loss_gradient_respects_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cube_sym = ObjectModel::unit_cube("s", true);
        let plain = cube();
        for weights in [
            LossWeights::default(),
            LossWeights { pose: 0.0, ..Default::default() },
            LossWeights { reg: 0.0, inner_prod: 0.0, ..Default::default() },
            LossWeights { depth: 0.0, label: 2.0, ..Default::default() },
        ] {
            for _ in 0..20 {
                let (dp, dg, mask, logits, labels) = frame_fixture(&mut rng);
                let objs = [
                    (rand_quat(&mut rng, 1.3), rand_vec(&mut rng, 0.2), rand_quat(&mut rng, 1.0), rand_vec(&mut rng, 0.2)),
                    (rand_quat(&mut rng, 0.7), rand_vec(&mut rng, 0.2), rand_quat(&mut rng, 1.0), rand_vec(&mut rng, 0.2)),
                ];
                let models = [&plain, &cube_sym];
                let build = |x: &[f64]| -> f64 {
                    let mut objects = Vec::new();
                    for (i, o) in objs.iter().enumerate() {
                        let b = i * 7;
                        objects.push(ObjectLossInput {
                            model: models[i],
                            q_pred: Quaternion::new(x[b], x[b + 1], x[b + 2], x[b + 3]),
                            t_pred: Vector3::new(x[b + 4], x[b + 5], x[b + 6]),
                            q_gt: o.2,
                            t_gt: o.3,
                        });
                    }
                    let dp = Array2::from_shape_vec(dp.dim(), x[14..23].to_vec()).unwrap();
                    let lg = Array3::from_shape_vec(logits.dim(), x[23..].to_vec()).unwrap();
                    let input = FrameLossInput {
                        depth_pred: dp.view(),
                        depth_gt: dg.view(),
                        depth_mask: mask.view(),
                        logits: lg.view(),
                        labels: labels.view(),
                        objects,
                    };
                    frame_loss_with_grad(&input, &weights, &LossOptions::default()).unwrap().breakdown.total
                };
                let mut x = Vec::new();
                for o in &objs {
                    x.extend(o.0.to_array());
                    x.extend(o.1.iter());
                }
                x.extend(dp.iter());
                x.extend(logits.iter());

                let objects: Vec<_> = objs
                    .iter()
                    .enumerate()
                    .map(|(i, o)| ObjectLossInput { model: models[i], q_pred: o.0, t_pred: o.1, q_gt: o.2, t_gt: o.3 })
                    .collect();
                let input = FrameLossInput {
                    depth_pred: dp.view(),
                    depth_gt: dg.view(),
                    depth_mask: mask.view(),
                    logits: logits.view(),
                    labels: labels.view(),
                    objects,
                };
                let g = frame_loss_with_grad(&input, &weights, &LossOptions::default()).unwrap();
                let b = g.breakdown;
                let recomposed = weights.depth * b.depth + weights.label * b.label + weights.pose * b.pose
                    + weights.reg * b.reg + weights.inner_prod * b.inner_prod;
                assert!((b.total - recomposed).abs() < 1e-9);

                let mut ana = Vec::new();
                for (dq, dt) in &g.d_objects {
                    ana.extend(dq);
                    ana.extend(dt.iter());
                }
                ana.extend(g.d_depth.iter());
                ana.extend(g.d_logits.iter());
                assert_grad_close(&ana, &fd_grad(&x, build), FD_RTOL);

                if weights.pose == 0.0 {
                    // translations only enter through the pose term
                    for (_, dt) in &g.d_objects {
                        assert_eq!(*dt, Vector3::zeros());
                    }
                }
                if weights.depth == 0.0 {
                    assert!(g.d_depth.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    fn arb_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.1..2.0f64)
            .prop_filter("nonzero", |(a, b, c, d, _)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(w, x, y, z, s)| Quaternion::new(w, x, y, z).normalized().unwrap().scale(s))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn symmetric_loss_never_exceeds_matched(q in arb_quat(), q_gt in arb_quat(),
                                                 t in (-0.2..0.2f64, -0.2..0.2f64, 0.3..1.0f64)) {
            let m = ObjectModel::from_shape("p", &Shape::Pyramid { base: 0.1, height: 0.06 }, 30, false).unwrap();
            let t = Vector3::new(t.0, t.1, t.2);
            let t_gt = Vector3::new(0.0, 0.0, 0.6);
            let sym = pose_loss(&m, q, &t, q_gt, &t_gt, true).unwrap();
            let plain = pose_loss(&m, q, &t, q_gt, &t_gt, false).unwrap();
            prop_assert!(sym <= plain + 1e-12);
            // independent check of the matched-to-nearest value
            let r = quat_to_matrix(q).unwrap();
            let rg = quat_to_matrix(q_gt).unwrap();
            let pred: Vec<_> = m.points().iter().map(|x| r * x + t).collect();
            let gt: Vec<_> = m.points().iter().map(|x| rg * x + t_gt).collect();
            prop_assert!((symmetric_pose_loss_value(&pred, &gt) - sym).abs() < 1e-12);
        }

        #[test]
        fn pose_loss_sign_invariant_inner_product_not(q in arb_quat(), q_gt in arb_quat()) {
            let t = Vector3::new(0.0, 0.0, 0.5);
            let m = cube();
            let a = pose_loss(&m, q, &t, q_gt, &t, false).unwrap();
            let b = pose_loss(&m, -q, &t, q_gt, &t, false).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let opts = LossOptions::default();
            let ia = quat_inner_prod_loss(q, q_gt, &opts);
            let ib = quat_inner_prod_loss(-q, q_gt, &opts);
            prop_assert!((ia + ib - 2.0).abs() < 1e-12);
            let d = q.dot(&q_gt);
            if d.abs() > 1e-6 {
                prop_assert!((ia - ib).abs() > 1e-12);
            }
        }

        #[test]
        fn inner_product_bounded_by_norm(q in arb_quat(), q_gt in arb_quat()) {
            let q_gt = q_gt.normalized().unwrap();
            let v = quat_inner_prod_loss(q, q_gt, &LossOptions::default());
            let n = q.norm();
            prop_assert!(v >= 1.0 - n - 1e-12 && v <= 1.0 + n + 1e-12);
        }

        #[test]
        fn reg_loss_zero_only_on_unit_sphere(q in arb_quat()) {
            let n = q.norm();
            let v = quat_reg_loss(q);
            prop_assert!((v - (1.0 - n).abs()).abs() < 1e-15);
            prop_assert!(quat_reg_loss(q.scale(1.0 / n)) < 1e-15);
            if (n - 1.0).abs() > 1e-9 {
                prop_assert!(v > 0.0);
            }
        }
    }
}
