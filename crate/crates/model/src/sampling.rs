//! Fixed bilinear resampling operators.
//!
//! Every spatial resampling in the network (ROI Align, depth lookup, memory
//! warping) is linear in the feature values once the geometry is fixed, so it
//! is expressed as a weight matrix built here in f64 and applied as a matrix
//! product. Only the features carry gradients; the geometry does not.
//!
//! A map of stride `s` has cell `(i, j)` centered on pixel `((j + 0.5) s,
//! (i + 0.5) s)`, so pixel coordinate `x` sits at cell coordinate
//! `x / s - 0.5`.

use nalgebra::{Matrix4, Vector3, Vector4};
use videopose_core::data::BBox;
use videopose_core::geometry::CameraIntrinsics;

use crate::ModelError;

/// Sparse linear map from `inputs` source cells to `outputs` target cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampler {
    pub inputs: usize,
    pub outputs: usize,
    /// `(output, input, weight)`.
    pub entries: Vec<(usize, usize, f64)>,
}

impl Sampler {
    fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            entries: Vec::new(),
        }
    }

    /// Dense `inputs x outputs` matrix, row-major, so that
    /// `features (C x inputs) * matrix` resamples every channel.
    pub fn dense_transposed(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.inputs * self.outputs];
        for &(o, i, w) in &self.entries {
            m[i * self.outputs + o] += w;
        }
        m
    }

    /// Applies the map to one single-channel grid.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs];
        for &(o, i, w) in &self.entries {
            out[o] += w * input[i];
        }
        out
    }
}

/// ROI Align taps: clamp to the border within one cell, zero beyond.
fn roi_taps(u: f64, size: usize) -> Option<[(usize, f64); 2]> {
    if u < -1.0 || u > size as f64 {
        return None;
    }
    let u = u.max(0.0);
    let lo = u.floor() as usize;
    if lo >= size - 1 {
        return Some([(size - 1, 1.0), (size - 1, 0.0)]);
    }
    let f = u - lo as f64;
    Some([(lo, 1.0 - f), (lo + 1, f)])
}

/// Plain bilinear taps with zero fill outside the grid.
fn zero_fill_taps(u: f64, size: usize) -> [(usize, f64); 2] {
    let lo = u.floor();
    let f = u - lo;
    let mut taps = [(0, 0.0); 2];
    for (slot, (idx, w)) in [(lo, 1.0 - f), (lo + 1.0, f)].into_iter().enumerate() {
        if idx >= 0.0 && idx < size as f64 {
            taps[slot] = (idx as usize, w);
        }
    }
    taps
}

/// Resamples the box on a `h x w` map of the given stride onto a `k x k`
/// grid, averaging `ratio x ratio` bilinear samples per bin.
pub fn roi_align_sampler(
    bbox: &BBox,
    stride: usize,
    h: usize,
    w: usize,
    k: usize,
    ratio: usize,
) -> Result<Sampler, ModelError> {
    if !(bbox.width() > 0.0 && bbox.height() > 0.0)
        || !bbox.x0.is_finite()
        || !bbox.y0.is_finite()
        || !bbox.x1.is_finite()
        || !bbox.y1.is_finite()
    {
        return Err(ModelError::InvalidRoi(format!("degenerate box {bbox:?}")));
    }
    let s = stride as f64;
    if bbox.x1 <= 0.0 || bbox.y1 <= 0.0 || bbox.x0 >= w as f64 * s || bbox.y0 >= h as f64 * s {
        return Err(ModelError::InvalidRoi(format!("box {bbox:?} misses the image")));
    }
    let (x0, y0) = (bbox.x0 / s - 0.5, bbox.y0 / s - 0.5);
    let (bin_w, bin_h) = (bbox.width() / s / k as f64, bbox.height() / s / k as f64);
    let norm = 1.0 / (ratio * ratio) as f64;
    let mut out = Sampler::new(h * w, k * k);
    for a in 0..k {
        for b in 0..k {
            let cell = a * k + b;
            for iy in 0..ratio {
                let v = y0 + (a as f64 + (iy as f64 + 0.5) / ratio as f64) * bin_h;
                let Some(ty) = roi_taps(v, h) else { continue };
                for ix in 0..ratio {
                    let u = x0 + (b as f64 + (ix as f64 + 0.5) / ratio as f64) * bin_w;
                    let Some(tx) = roi_taps(u, w) else { continue };
                    for (yi, wy) in ty {
                        for (xi, wx) in tx {
                            let wgt = wy * wx * norm;
                            if wgt != 0.0 {
                                out.entries.push((cell, yi * w + xi, wgt));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pixel position of the center of ROI grid cell `(a, b)`.
pub fn cell_center(bbox: &BBox, k: usize, a: usize, b: usize) -> (f64, f64) {
    (
        bbox.x0 + (b as f64 + 0.5) * bbox.width() / k as f64,
        bbox.y0 + (a as f64 + 0.5) * bbox.height() / k as f64,
    )
}

/// Memory warp from the previous ROI grid to the current one.
///
/// Each current cell is back-projected at its depth, moved into the previous
/// camera by `curr_to_prev = M_prev M_curr^-1`, re-projected and looked up
/// bilinearly in the previous grid. Cells without valid depth, behind the
/// previous camera or outside the previous grid receive zeros.
pub fn geometric_warp_sampler(
    prev_box: &BBox,
    curr_box: &BBox,
    k: usize,
    depth: &[f64],
    intrinsics: &CameraIntrinsics,
    curr_to_prev: &Matrix4<f64>,
) -> Sampler {
    let mut out = Sampler::new(k * k, k * k);
    let (pw, ph) = (prev_box.width() / k as f64, prev_box.height() / k as f64);
    for a in 0..k {
        for b in 0..k {
            let cell = a * k + b;
            let z = depth[cell];
            if !(z > 0.0) {
                continue;
            }
            let (x, y) = cell_center(curr_box, k, a, b);
            let p: Vector3<f64> = intrinsics.back_project(x, y, z);
            let q = curr_to_prev * Vector4::new(p.x, p.y, p.z, 1.0);
            if !(q.z > 1e-9) {
                continue;
            }
            let xp = intrinsics.fx * q.x / q.z + intrinsics.px;
            let yp = intrinsics.fy * q.y / q.z + intrinsics.py;
            let gx = (xp - prev_box.x0) / pw - 0.5;
            let gy = (yp - prev_box.y0) / ph - 0.5;
            for (yi, wy) in zero_fill_taps(gy, k) {
                for (xi, wx) in zero_fill_taps(gx, k) {
                    let wgt = wy * wx;
                    if wgt != 0.0 {
                        out.entries.push((cell, yi * k + xi, wgt));
                    }
                }
            }
        }
    }
    out
}

/// `16 x 16` row-major operator mapping a row-major 4x4 block `F` to
/// `M_curr F M_prev^-1`.
pub fn conjugation_operator(m_curr: &Matrix4<f64>, m_prev_inv: &Matrix4<f64>) -> [f64; 256] {
    let mut k = [0.0; 256];
    for i in 0..4 {
        for j in 0..4 {
            for p in 0..4 {
                for q in 0..4 {
                    k[(4 * i + j) * 16 + 4 * p + q] = m_curr[(i, p)] * m_prev_inv[(q, j)];
                }
            }
        }
    }
    k
}
