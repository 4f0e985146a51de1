use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Frames per training clip.
pub const TRAIN_CLIP_LEN: usize = 10;
/// Largest stride drawn for training clips.
pub const MAX_TRAIN_STRIDE: usize = 10;
/// Stride used to build evaluation clips.
pub const EVAL_STRIDE: usize = 2;

/// Frame positions `start, start + stride, ...` inside one video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub start: usize,
    pub stride: usize,
    pub len: usize,
}

impl ClipSpec {
    pub fn indices(&self) -> Vec<usize> {
        (0..self.len).map(|i| self.start + i * self.stride).collect()
    }

    pub fn last(&self) -> usize {
        self.start + (self.len.max(1) - 1) * self.stride
    }
}

/// Consecutive non-overlapping clips at the evaluation stride; the tail of the
/// video becomes a shorter final clip.
pub fn make_eval_clips(num_frames: usize, length: usize) -> Vec<ClipSpec> {
    make_clips(num_frames, length, EVAL_STRIDE)
}

/// Non-overlapping clips of `length` frames taken every `stride` frames.
pub fn make_clips(num_frames: usize, length: usize, stride: usize) -> Vec<ClipSpec> {
    assert!(length > 0 && stride > 0, "clip length and stride must be positive");
    let span = length * stride;
    (0..num_frames)
        .step_by(span)
        .map(|start| ClipSpec {
            start,
            stride,
            len: ((num_frames - start).div_ceil(stride)).min(length),
        })
        .collect()
}

/// Draws a training clip of [`TRAIN_CLIP_LEN`] frames with stride uniform on
/// `1..=MAX_TRAIN_STRIDE` (strides that do not fit are redrawn) and a uniform
/// start.
pub fn sample_train_clip<R: Rng + ?Sized>(
    num_frames: usize,
    rng: &mut R,
) -> Result<ClipSpec, DataError> {
    if num_frames < TRAIN_CLIP_LEN {
        return Err(DataError::VideoTooShort {
            frames: num_frames,
            needed: TRAIN_CLIP_LEN,
        });
    }
    loop {
        let stride = rng.random_range(1..=MAX_TRAIN_STRIDE);
        let span = (TRAIN_CLIP_LEN - 1) * stride + 1;
        if span > num_frames {
            continue;
        }
        let start = rng.random_range(0..=num_frames - span);
        return Ok(ClipSpec {
            start,
            stride,
            len: TRAIN_CLIP_LEN,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn forty_frames_give_two_alternate_frame_clips() {
        let clips = make_eval_clips(40, 10);
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].indices(), (0..20).step_by(2).collect::<Vec<_>>());
        assert_eq!(clips[1].indices(), (20..40).step_by(2).collect::<Vec<_>>());
    }

    #[test]
    fn short_video_yields_single_tail_clip() {
        let clips = make_eval_clips(5, 10);
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].indices(), vec![0, 2, 4]);
    }

    #[test]
    fn eval_clips_cover_every_alternate_frame_once() {
        for n in 1..60 {
            let all: Vec<usize> = make_eval_clips(n, 10)
                .iter()
                .flat_map(|c| c.indices())
                .collect();
            assert!(all.windows(2).all(|w| w[1] > w[0]));
            assert_eq!(all, (0..n).step_by(2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn unit_stride_clip_is_contiguous() {
        let c = ClipSpec { start: 7, stride: 1, len: 10 };
        assert_eq!(c.indices(), (7..17).collect::<Vec<_>>());
    }

    #[test]
    fn widest_stride_from_zero_spans_hundred_frames() {
        let c = ClipSpec { start: 0, stride: 10, len: 10 };
        assert_eq!(c.indices(), (0..100).step_by(10).collect::<Vec<_>>());
        assert!(c.last() < 100);
    }

    #[test]
    fn training_clips_fit_and_are_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for n in [10, 11, 25, 100, 300] {
            for _ in 0..200 {
                let c = sample_train_clip(n, &mut a).unwrap();
                assert_eq!(c, sample_train_clip(n, &mut b).unwrap());
                assert_eq!(c.len, TRAIN_CLIP_LEN);
                assert!(c.last() < n);
            }
        }
    }

    #[test]
    fn training_clip_needs_ten_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_train_clip(9, &mut rng),
            Err(DataError::VideoTooShort { frames: 9, .. })
        ));
        assert_eq!(sample_train_clip(10, &mut rng).unwrap().stride, 1);
    }

    #[test]
    fn stride_distribution_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 10_000;
        let mut counts = [0usize; MAX_TRAIN_STRIDE];
        for _ in 0..draws {
            counts[sample_train_clip(100, &mut rng).unwrap().stride - 1] += 1;
        }
        let expected = draws as f64 / MAX_TRAIN_STRIDE as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new((MAX_TRAIN_STRIDE - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}, counts = {counts:?}");
    }
}
