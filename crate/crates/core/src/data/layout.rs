//! Portable on-disk layout:
//!
//! ```text
//! root/dataset.json
//! root/models/manifest.json, <id>.xyz
//! root/videos/<video>/NNNNNN.rgb.png     8-bit RGB
//! root/videos/<video>/NNNNNN.depth.png   16-bit, 0.1 mm units, 0 = invalid
//! root/videos/<video>/NNNNNN.label.png   8-bit class ids
//! root/videos/<video>/NNNNNN.meta.json   poses, boxes, camera
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::clips::ClipSpec;
use super::{DataError, FrameRecord, ObjectAnnotation, VideoClip};
use crate::geometry::{CameraExtrinsic, CameraIntrinsics};
use crate::objects::{load_registry, ObjectRegistry};

/// Depth PNG units per meter.
pub const DEPTH_SCALE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub width: usize,
    pub height: usize,
    pub videos: Vec<String>,
}

/// Contents of one `NNNNNN.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera, row-major 4x4.
    pub extrinsic: CameraExtrinsic,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoIndex {
    pub id: String,
    pub dir: PathBuf,
    /// Sorted by frame index.
    pub frames: Vec<FrameMeta>,
}

impl VideoIndex {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Indexed dataset; pixel data is decoded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: DatasetInfo,
    pub registry: ObjectRegistry,
    pub videos: Vec<VideoIndex>,
}

pub(crate) fn video_dir(root: &Path, video: &str) -> PathBuf {
    root.join("videos").join(video)
}

fn frame_path(dir: &Path, frame: usize, kind: &str) -> PathBuf {
    dir.join(format!("{frame:06}.{kind}"))
}

pub(crate) fn write_dataset_info(root: &Path, info: &DatasetInfo) -> Result<(), DataError> {
    let path = root.join("dataset.json");
    let text = serde_json::to_string_pretty(info).expect("serializable") + "\n";
    fs::write(&path, text).map_err(DataError::io(path))
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> DataError + '_ {
    move |e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Writes the four files of one frame into a video directory.
pub fn write_frame(dir: &Path, frame: &FrameRecord) -> Result<(), DataError> {
    let (h, w) = (frame.height(), frame.width());

    let rgb: Vec<u8> = frame
        .rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let path = frame_path(dir, frame.index, "rgb.png");
    RgbImage::from_raw(w as u32, h as u32, rgb)
        .expect("buffer size matches")
        .save(&path)
        .map_err(image_err(&path))?;

    let depth: Vec<u16> = frame
        .depth
        .iter()
        .map(|&d| {
            let q = (d as f64 * DEPTH_SCALE).round();
            if d > 0.0 && q <= u16::MAX as f64 {
                q as u16
            } else {
                0
            }
        })
        .collect();
    let path = frame_path(dir, frame.index, "depth.png");
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, depth)
        .expect("buffer size matches")
        .save(&path)
        .map_err(image_err(&path))?;

    let path = frame_path(dir, frame.index, "label.png");
    GrayImage::from_raw(w as u32, h as u32, frame.labels.iter().copied().collect())
        .expect("buffer size matches")
        .save(&path)
        .map_err(image_err(&path))?;

    let meta = FrameMeta {
        frame: frame.index,
        width: w,
        height: h,
        intrinsics: frame.intrinsics,
        extrinsic: frame.extrinsic,
        objects: frame.objects.clone(),
    };
    let path = frame_path(dir, frame.index, "meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("serializable") + "\n";
    fs::write(&path, text).map_err(DataError::io(path))
}

fn read_meta(path: &Path) -> Result<FrameMeta, DataError> {
    let text = fs::read_to_string(path).map_err(DataError::io(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::invalid(path, e.to_string()))
}

fn index_video(id: &str, dir: PathBuf, registry: &ObjectRegistry) -> Result<VideoIndex, DataError> {
    let entries = fs::read_dir(&dir).map_err(DataError::io(&dir))?;
    let mut metas = Vec::new();
    for entry in entries {
        let path = entry.map_err(DataError::io(&dir))?.path();
        let is_meta = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(".meta.json"));
        if is_meta {
            metas.push(path);
        }
    }
    metas.sort();
    let mut frames: Vec<FrameMeta> = Vec::with_capacity(metas.len());
    for path in &metas {
        let meta = read_meta(path)?;
        if let Some(first) = frames.first() {
            if meta.intrinsics != first.intrinsics {
                return Err(DataError::IntrinsicsMismatch { path: path.clone() });
            }
            if (meta.width, meta.height) != (first.width, first.height) {
                return Err(DataError::invalid(path, "image size differs within the video"));
            }
        }
        let mut ids = BTreeSet::new();
        for o in &meta.objects {
            if registry.get(&o.id).is_none() {
                return Err(DataError::invalid(path, format!("object `{}` is not in the registry", o.id)));
            }
            if !ids.insert(&o.id) {
                return Err(DataError::invalid(path, format!("object `{}` annotated twice", o.id)));
            }
            let b = o.bbox;
            if !(b.x1 > 0.0 && b.y1 > 0.0 && b.x0 < meta.width as f64 && b.y0 < meta.height as f64)
                || b.area() <= 0.0
            {
                return Err(DataError::invalid(path, format!("box of `{}` misses the image", o.id)));
            }
        }
        for kind in ["rgb.png", "depth.png", "label.png"] {
            let p = frame_path(&dir, meta.frame, kind);
            if !p.is_file() {
                return Err(DataError::Image {
                    path: p,
                    msg: "missing file".into(),
                });
            }
        }
        frames.push(meta);
    }
    if frames.windows(2).any(|w| w[1].frame <= w[0].frame) {
        return Err(DataError::invalid(&dir, "duplicate frame indices"));
    }
    Ok(VideoIndex {
        id: id.to_string(),
        dir,
        frames,
    })
}

/// Indexes a dataset root: reads the registry and every frame's metadata.
pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    if !root.is_dir() {
        return Err(DataError::Empty(root.to_path_buf()));
    }
    let info_path = root.join("dataset.json");
    let stored: Option<DatasetInfo> = if info_path.is_file() {
        let text = fs::read_to_string(&info_path).map_err(DataError::io(&info_path))?;
        Some(serde_json::from_str(&text).map_err(|e| DataError::invalid(&info_path, e.to_string()))?)
    } else {
        None
    };
    let video_ids = match &stored {
        Some(info) => info.videos.clone(),
        None => {
            let vroot = root.join("videos");
            let mut ids = Vec::new();
            if vroot.is_dir() {
                for entry in fs::read_dir(&vroot).map_err(DataError::io(&vroot))? {
                    let entry = entry.map_err(DataError::io(&vroot))?;
                    if entry.path().is_dir() {
                        ids.push(entry.file_name().to_string_lossy().into_owned());
                    }
                }
            }
            ids.sort();
            ids
        }
    };
    if video_ids.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }
    let registry = load_registry(&root.join("models"))?;
    let videos = video_ids
        .iter()
        .map(|id| index_video(id, video_dir(root, id), &registry))
        .collect::<Result<Vec<_>, _>>()?;
    let (width, height) = videos
        .iter()
        .find_map(|v| v.frames.first().map(|f| (f.width, f.height)))
        .ok_or_else(|| DataError::Empty(root.to_path_buf()))?;
    let info = stored.unwrap_or_else(|| DatasetInfo {
        name: root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: None,
        width,
        height,
        videos: video_ids,
    });
    Ok(Dataset {
        root: root.to_path_buf(),
        info,
        registry,
        videos,
    })
}

fn open_image(path: &Path) -> Result<DynamicImage, DataError> {
    image::open(path).map_err(image_err(path))
}

impl Dataset {
    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.len()).sum()
    }

    /// Decodes the frame at position `pos` of video `video`.
    pub fn load_frame(&self, video: usize, pos: usize) -> Result<FrameRecord, DataError> {
        let v = &self.videos[video];
        let meta = &v.frames[pos];
        let (w, h) = (meta.width, meta.height);
        let check = |img: &DynamicImage, path: &Path| {
            if (img.width() as usize, img.height() as usize) != (w, h) {
                Err(DataError::Image {
                    path: path.to_path_buf(),
                    msg: format!("expected {w}x{h}, found {}x{}", img.width(), img.height()),
                })
            } else {
                Ok(())
            }
        };

        let path = frame_path(&v.dir, meta.frame, "rgb.png");
        let img = open_image(&path)?;
        check(&img, &path)?;
        let rgb8 = img.to_rgb8();
        let rgb = Array3::from_shape_vec((h, w, 3), rgb8.into_raw().into_iter().map(|b| b as f32 / 255.0).collect())
            .expect("decoded size checked");

        let path = frame_path(&v.dir, meta.frame, "depth.png");
        let img = open_image(&path)?;
        check(&img, &path)?;
        let DynamicImage::ImageLuma16(d16) = img else {
            return Err(DataError::Image {
                path,
                msg: "depth must be 16-bit grayscale".into(),
            });
        };
        let depth = Array2::from_shape_vec(
            (h, w),
            d16.into_raw().into_iter().map(|d| (d as f64 / DEPTH_SCALE) as f32).collect(),
        )
        .expect("decoded size checked");

        let path = frame_path(&v.dir, meta.frame, "label.png");
        let img = open_image(&path)?;
        check(&img, &path)?;
        let DynamicImage::ImageLuma8(l8) = img else {
            return Err(DataError::Image {
                path,
                msg: "labels must be 8-bit grayscale".into(),
            });
        };
        let labels = Array2::from_shape_vec((h, w), l8.into_raw()).expect("decoded size checked");

        let present: BTreeSet<u8> = labels.iter().copied().filter(|&l| l > 0).collect();
        for class in present {
            let model = self
                .registry
                .by_index(class as usize - 1)
                .ok_or_else(|| DataError::invalid(&path, format!("label {class} has no registry entry")))?;
            if !meta.objects.iter().any(|o| o.id == model.id()) {
                return Err(DataError::MissingPose {
                    path: frame_path(&v.dir, meta.frame, "meta.json"),
                    object: model.id().to_string(),
                });
            }
        }

        Ok(FrameRecord {
            index: meta.frame,
            rgb,
            depth,
            labels,
            objects: meta.objects.clone(),
            extrinsic: meta.extrinsic,
            intrinsics: meta.intrinsics,
        })
    }

    pub fn load_video(&self, video: usize) -> Result<Vec<FrameRecord>, DataError> {
        (0..self.videos[video].len())
            .map(|p| self.load_frame(video, p))
            .collect()
    }

    /// Decodes the frames selected by a clip; the stride is expressed in
    /// frame indices of the video.
    pub fn load_clip(&self, video: usize, clip: &ClipSpec) -> Result<VideoClip, DataError> {
        let frames = clip
            .indices()
            .into_iter()
            .map(|p| self.load_frame(video, p))
            .collect::<Result<Vec<_>, _>>()?;
        let stride = match frames.as_slice() {
            [a, b, ..] => b.index - a.index,
            _ => clip.stride,
        };
        Ok(VideoClip {
            video: self.videos[video].id.clone(),
            stride,
            frames,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_dataset, render_video};
    use crate::data::SceneSpec;

    fn toy(dir: &Path) -> (SceneSpec, DatasetInfo) {
        let spec = SceneSpec::desk(40, 32, 6, 2);
        let info = generate_synthetic_dataset(&spec, 3, dir, false).unwrap();
        (spec, info)
    }

    #[test]
    fn empty_root_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(tmp.path()), Err(DataError::Empty(_))));
        assert!(load_dataset(&tmp.path().join("nope")).is_err());
    }

    #[test]
    fn generated_dataset_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let (spec, info) = toy(tmp.path());
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.info, info);
        assert_eq!(ds.videos.len(), 2);
        assert_eq!(ds.total_frames(), 12);
        assert_eq!(ds.registry.content_hash(), spec.registry().unwrap().content_hash());
        for v in 0..2 {
            let rendered = render_video(&spec, &spec.registry().unwrap(), 3, v).unwrap();
            let loaded = ds.load_video(v).unwrap();
            for (r, l) in rendered.iter().zip(&loaded) {
                assert_eq!(r.index, l.index);
                assert_eq!(r.objects, l.objects);
                assert_eq!(r.extrinsic, l.extrinsic);
                assert_eq!(r.intrinsics, l.intrinsics);
                assert_eq!(r.labels, l.labels);
                for (a, b) in r.depth.iter().zip(&l.depth) {
                    assert!((a - b).abs() <= 0.5 / DEPTH_SCALE as f32 + 1e-6);
                }
                for (a, b) in r.rgb.iter().zip(&l.rgb) {
                    assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn frame_carries_every_object_pose() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = SceneSpec::desk(48, 48, 1, 1);
        spec.occluders.clear();
        spec.jitter = Default::default();
        spec.trajectory.control_points = vec![[0.0, -0.6, 0.9]];
        generate_synthetic_dataset(&spec, 0, tmp.path(), false).unwrap();
        let f = load_dataset(tmp.path()).unwrap().load_frame(0, 0).unwrap();
        assert_eq!(f.objects.len(), 3);
    }

    #[test]
    fn loaded_clip_keeps_stride() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        let ds = load_dataset(tmp.path()).unwrap();
        let clip = ds.load_clip(1, &ClipSpec { start: 1, stride: 2, len: 3 }).unwrap();
        assert_eq!(clip.frames.iter().map(|f| f.index).collect::<Vec<_>>(), vec![1, 3, 5]);
        assert!(clip.is_well_formed());
        assert_eq!(clip.video, "video_0001");
    }

    #[test]
    fn parallel_generation_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SceneSpec::desk(24, 24, 2, 3);
        generate_synthetic_dataset(&spec, 9, a.path(), false).unwrap();
        generate_synthetic_dataset(&spec, 9, b.path(), true).unwrap();
        for v in 0..3 {
            let va = video_dir(a.path(), &format!("video_{v:04}"));
            let vb = video_dir(b.path(), &format!("video_{v:04}"));
            for f in 0..2 {
                for kind in ["rgb.png", "depth.png", "label.png", "meta.json"] {
                    let x = fs::read(frame_path(&va, f, kind)).unwrap();
                    let y = fs::read(frame_path(&vb, f, kind)).unwrap();
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn missing_pose_is_reported_with_path() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        let ds = load_dataset(tmp.path()).unwrap();
        let (pos, meta) = ds.videos[0]
            .frames
            .iter()
            .enumerate()
            .find(|(_, m)| !m.objects.is_empty())
            .unwrap();
        let mut meta = meta.clone();
        meta.objects.remove(0);
        let path = frame_path(&ds.videos[0].dir, meta.frame, "meta.json");
        fs::write(&path, serde_json::to_string(&meta).unwrap()).unwrap();
        let ds = load_dataset(tmp.path()).unwrap();
        match ds.load_frame(0, pos) {
            Err(DataError::MissingPose { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected a missing-pose error, got {other:?}"),
        }
    }

    #[test]
    fn intrinsics_mismatch_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        let dir = video_dir(tmp.path(), "video_0000");
        let path = frame_path(&dir, 2, "meta.json");
        let mut meta = read_meta(&path).unwrap();
        meta.intrinsics.fx += 1.0;
        fs::write(&path, serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(matches!(
            load_dataset(tmp.path()),
            Err(DataError::IntrinsicsMismatch { path: p }) if p == path
        ));
    }

    #[test]
    fn corrupt_image_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        toy(tmp.path());
        let dir = video_dir(tmp.path(), "video_0000");
        let path = frame_path(&dir, 0, "rgb.png");
        fs::write(&path, b"not a png").unwrap();
        let ds = load_dataset(tmp.path()).unwrap();
        assert!(matches!(ds.load_frame(0, 0), Err(DataError::Image { path: p, .. }) if p == path));
    }
}
