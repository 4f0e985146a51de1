use ndarray::{Array3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, FrameRecord};

/// Train-time photometric and box jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Relative half-ranges of the multiplicative jitters.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Largest relative growth of box width and height.
    pub bbox_extend: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            noise_sigma: 0.02,
            bbox_extend: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, half_range: f64) -> f32 {
    if half_range <= 0.0 {
        return 1.0;
    }
    rng.random_range(1.0 - half_range..=1.0 + half_range) as f32
}

fn gray(px: ndarray::ArrayView1<f32>) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Brightness, contrast and saturation jitter followed by Gaussian noise,
/// clamped to `[0, 1]`. Geometry and annotations are left untouched.
pub fn augment_frame<R: Rng + ?Sized>(
    frame: &FrameRecord,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> FrameRecord {
    let mut out = frame.clone();
    if !cfg.enabled {
        return out;
    }
    let b = jitter(rng, cfg.brightness);
    let c = jitter(rng, cfg.contrast);
    let s = jitter(rng, cfg.saturation);
    let rgb: &mut Array3<f32> = &mut out.rgb;

    rgb.mapv_inplace(|v| v * b);

    let n_px = (rgb.dim().0 * rgb.dim().1).max(1) as f32;
    let mean = rgb
        .lanes(Axis(2))
        .into_iter()
        .map(gray)
        .sum::<f32>()
        / n_px;
    rgb.mapv_inplace(|v| (v - mean) * c + mean);

    for mut px in rgb.lanes_mut(Axis(2)) {
        let g = gray(px.view());
        px.mapv_inplace(|v| (v - g) * s + g);
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma as f32).expect("finite sigma");
        Zip::from(&mut *rgb).for_each(|v| *v += normal.sample(rng));
    }
    rgb.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Scales a box about its center by the given factors and clips it to the
/// image.
pub fn augment_bbox_with(bbox: &BBox, sx: f64, sy: f64, width: usize, height: usize) -> BBox {
    bbox.scaled(sx, sy).clip_to(width, height)
}

/// Grows width and height independently by up to `bbox_extend`.
pub fn augment_bbox<R: Rng + ?Sized>(
    bbox: &BBox,
    cfg: &AugmentConfig,
    width: usize,
    height: usize,
    rng: &mut R,
) -> BBox {
    if !cfg.enabled || cfg.bbox_extend <= 0.0 {
        return bbox.clip_to(width, height);
    }
    let sx = 1.0 + rng.random_range(0.0..=cfg.bbox_extend);
    let sy = 1.0 + rng.random_range(0.0..=cfg.bbox_extend);
    augment_bbox_with(bbox, sx, sy, width, height)
}
