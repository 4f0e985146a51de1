//! Deterministic desk-scale scene generator: parametric solids resting on a
//! checkered table, seen by a camera moving along a spline.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layout::{video_dir, write_dataset_info, write_frame, DatasetInfo};
use super::raster::{render_scene, RenderTriangle};
use super::{BBox, DataError, FrameRecord, ObjectAnnotation};
use crate::geometry::{CameraExtrinsic, CameraIntrinsics, Pose, Quaternion};
use crate::objects::{save_registry, ObjectModel, ObjectRegistry, Shape, DEFAULT_LOSS_POINTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    pub shape: Shape,
    #[serde(default)]
    pub symmetric: bool,
    /// Table-plane position of the object center.
    pub position: [f64; 2],
    #[serde(default)]
    pub yaw_deg: f64,
    pub color: [f64; 3],
}

/// Unlabeled solid that only hides things.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub shape: Shape,
    pub position: [f64; 2],
    #[serde(default)]
    pub yaw_deg: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Camera positions interpolated by a Catmull-Rom spline.
    pub control_points: Vec<[f64; 3]>,
    pub look_at: [f64; 3],
    /// Wrap the spline back to its first control point.
    #[serde(default)]
    pub closed: bool,
}

/// Per-video uniform perturbations, all half-ranges.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterSpec {
    pub object_position: f64,
    pub object_yaw_deg: f64,
    pub occluder_position: f64,
    /// Rotation of the whole trajectory about the vertical axis.
    pub trajectory_yaw_deg: f64,
    pub control_points: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableSpec {
    pub enabled: bool,
    pub size: f64,
    pub cells: usize,
    pub colors: [[f64; 3]; 2],
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            size: 1.2,
            cells: 8,
            colors: [[0.62, 0.52, 0.40], [0.48, 0.40, 0.31]],
        }
    }
}

fn default_name() -> String {
    "synthetic".into()
}
fn default_videos() -> usize {
    1
}
fn default_samples() -> usize {
    DEFAULT_LOSS_POINTS
}
fn default_light() -> [f64; 3] {
    [0.4, -0.3, 1.0]
}
fn default_background() -> [f64; 3] {
    [0.15, 0.17, 0.2]
}

/// Generator input, read from JSON or TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels; defaults to the image width.
    #[serde(default)]
    pub focal: Option<f64>,
    pub frames: usize,
    #[serde(default = "default_videos")]
    pub videos: usize,
    /// Surface samples added to each model's vertices.
    #[serde(default = "default_samples")]
    pub model_samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub occluders: Vec<OccluderSpec>,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub jitter: JitterSpec,
    #[serde(default)]
    pub table: TableSpec,
    /// Direction towards the light in the world frame.
    #[serde(default = "default_light")]
    pub light: [f64; 3],
    #[serde(default = "default_background")]
    pub background: [f64; 3],
}

impl SceneSpec {
    /// Three objects and one occluder on a table, camera sweeping a 120 degree
    /// arc whose start is randomized per video.
    pub fn desk(width: usize, height: usize, frames: usize, videos: usize) -> Self {
        let arc: Vec<[f64; 3]> = (0..5)
            .map(|i| {
                let a = (-60.0 + 30.0 * i as f64).to_radians();
                [0.55 * a.cos(), 0.55 * a.sin(), 0.38]
            })
            .collect();
        Self {
            name: "desk".into(),
            width,
            height,
            focal: None,
            frames,
            videos,
            model_samples: DEFAULT_LOSS_POINTS,
            seed: 0,
            objects: vec![
                ObjectSpec {
                    id: "cube".into(),
                    shape: Shape::Cube { side: 0.12 },
                    symmetric: false,
                    position: [0.10, -0.10],
                    yaw_deg: 20.0,
                    color: [0.85, 0.2, 0.15],
                },
                ObjectSpec {
                    id: "can".into(),
                    shape: Shape::Cylinder {
                        radius: 0.05,
                        height: 0.16,
                        segments: 16,
                    },
                    symmetric: true,
                    position: [-0.08, 0.12],
                    yaw_deg: 0.0,
                    color: [0.15, 0.35, 0.85],
                },
                ObjectSpec {
                    id: "wedge".into(),
                    shape: Shape::Pyramid {
                        base: 0.13,
                        height: 0.11,
                    },
                    symmetric: false,
                    position: [-0.12, -0.12],
                    yaw_deg: 10.0,
                    color: [0.2, 0.75, 0.25],
                },
            ],
            occluders: vec![OccluderSpec {
                shape: Shape::Box {
                    sx: 0.05,
                    sy: 0.05,
                    sz: 0.3,
                },
                position: [0.17, 0.1],
                yaw_deg: 0.0,
                color: [0.7, 0.7, 0.65],
            }],
            trajectory: TrajectorySpec {
                control_points: arc,
                look_at: [0.0, 0.0, 0.05],
                closed: false,
            },
            jitter: JitterSpec {
                object_position: 0.03,
                object_yaw_deg: 180.0,
                occluder_position: 0.05,
                trajectory_yaw_deg: 180.0,
                control_points: 0.04,
            },
            table: TableSpec::default(),
            light: default_light(),
            background: default_background(),
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = self.focal.unwrap_or(self.width as f64);
        CameraIntrinsics {
            fx: f,
            fy: f,
            px: self.width as f64 / 2.0,
            py: self.height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::Spec(m.into()));
        if self.width == 0 || self.height == 0 {
            return fail("image size must be positive");
        }
        if self.frames == 0 || self.videos == 0 {
            return fail("frame and video counts must be positive");
        }
        if self.objects.is_empty() {
            return fail("at least one object is required");
        }
        if self.objects.len() > 254 {
            return fail("at most 254 objects fit in 8-bit labels");
        }
        if self.trajectory.control_points.is_empty() {
            return fail("trajectory needs at least one control point");
        }
        if let Some(f) = self.focal {
            if !(f > 0.0) {
                return fail("focal length must be positive");
            }
        }
        if self.table.enabled && (self.table.cells == 0 || !(self.table.size > 0.0)) {
            return fail("table needs a positive size and cell count");
        }
        Ok(())
    }

    /// Object models in spec order, which fixes the class indices.
    pub fn registry(&self) -> Result<ObjectRegistry, DataError> {
        let models = self
            .objects
            .iter()
            .map(|o| ObjectModel::from_shape(o.id.clone(), &o.shape, self.model_samples, o.symmetric))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ObjectRegistry::new(models)?)
    }
}

/// A placed solid: world pose plus render attributes.
struct Placed {
    shape: Shape,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    color: [f64; 3],
}

impl Placed {
    fn on_table(shape: Shape, xy: [f64; 2], yaw_deg: f64, color: [f64; 3]) -> Self {
        Self {
            shape,
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_deg.to_radians()).matrix(),
            translation: Vector3::new(xy[0], xy[1], shape.half_height()),
            color,
        }
    }

    fn world_pose(&self) -> Pose {
        Pose {
            rotation: Quaternion::from_rotation_matrix(&self.rotation),
            translation: self.translation,
        }
    }
}

/// Concrete layout of one video after jitter.
struct VideoScene {
    objects: Vec<Placed>,
    occluders: Vec<Placed>,
    trajectory: Vec<Vector3<f64>>,
    look_at: Vector3<f64>,
}

fn sym<R: Rng>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn video_scene(spec: &SceneSpec, seed: u64, video: usize) -> VideoScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(video as u64);
    let j = &spec.jitter;
    let objects = spec
        .objects
        .iter()
        .map(|o| {
            let xy = [
                o.position[0] + sym(&mut rng, j.object_position),
                o.position[1] + sym(&mut rng, j.object_position),
            ];
            let yaw = o.yaw_deg + sym(&mut rng, j.object_yaw_deg);
            Placed::on_table(o.shape, xy, yaw, o.color)
        })
        .collect();
    let occluders = spec
        .occluders
        .iter()
        .map(|o| {
            let xy = [
                o.position[0] + sym(&mut rng, j.occluder_position),
                o.position[1] + sym(&mut rng, j.occluder_position),
            ];
            Placed::on_table(o.shape, xy, o.yaw_deg, o.color)
        })
        .collect();
    let spin = Rotation3::from_axis_angle(
        &Vector3::z_axis(),
        sym(&mut rng, j.trajectory_yaw_deg).to_radians(),
    );
    let trajectory = spec
        .trajectory
        .control_points
        .iter()
        .map(|p| {
            let d = Vector3::new(
                sym(&mut rng, j.control_points),
                sym(&mut rng, j.control_points),
                sym(&mut rng, j.control_points),
            );
            spin * (Vector3::from(*p) + d)
        })
        .collect();
    VideoScene {
        objects,
        occluders,
        trajectory,
        look_at: Vector3::from(spec.trajectory.look_at),
    }
}

/// Uniform Catmull-Rom position at `s` in `[0, 1]`.
fn spline_point(points: &[Vector3<f64>], closed: bool, s: f64) -> Vector3<f64> {
    let n = points.len();
    if n == 1 {
        return points[0];
    }
    let segments = if closed { n } else { n - 1 };
    let t = (s.clamp(0.0, 1.0) * segments as f64).min(segments as f64 - 1e-12);
    let seg = t.floor() as isize;
    let u = t - seg as f64;
    let at = |i: isize| {
        if closed {
            points[i.rem_euclid(n as isize) as usize]
        } else {
            points[i.clamp(0, n as isize - 1) as usize]
        }
    };
    let (p0, p1, p2, p3) = (at(seg - 1), at(seg), at(seg + 1), at(seg + 2));
    let (u2, u3) = (u * u, u * u * u);
    (p1 * 2.0 + (p2 - p0) * u + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * u2
        + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * u3)
        * 0.5
}

/// World-to-camera transform for a camera at `eye` looking at `target` with
/// world +z up (camera x right, y down, z forward).
fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<CameraExtrinsic, DataError> {
    let forward = (target - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| DataError::Spec("camera coincides with its look-at point".into()))?;
    let right = forward
        .cross(&Vector3::z())
        .try_normalize(1e-9)
        .ok_or_else(|| DataError::Spec("camera looks straight up or down".into()))?;
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    Ok(CameraExtrinsic::from_rotation_translation(&r, &(-(r * eye)))?)
}

fn shade(color: [f64; 3], normal: &Vector3<f64>, light: &Vector3<f64>) -> [f64; 3] {
    let k = 0.35 + 0.65 * normal.dot(light).max(0.0);
    color.map(|c| (c * k).clamp(0.0, 1.0))
}

fn placed_triangles(
    p: &Placed,
    ext: &CameraExtrinsic,
    light: &Vector3<f64>,
    label: u8,
    owner: Option<usize>,
) -> Vec<RenderTriangle> {
    p.shape
        .triangles()
        .iter()
        .map(|t| {
            let w = t.map(|v| p.rotation * v + p.translation);
            let n = (w[1] - w[0]).cross(&(w[2] - w[0])).normalize();
            RenderTriangle {
                vertices: w.map(|v| ext.transform_point(&v)),
                color: shade(p.color, &n, light),
                label,
                owner,
            }
        })
        .collect()
}

fn table_triangles(t: &TableSpec, ext: &CameraExtrinsic, light: &Vector3<f64>) -> Vec<RenderTriangle> {
    let mut out = Vec::with_capacity(2 * t.cells * t.cells);
    if !t.enabled {
        return out;
    }
    let cell = t.size / t.cells as f64;
    let origin = -t.size / 2.0;
    for i in 0..t.cells {
        for j in 0..t.cells {
            let (x0, y0) = (origin + i as f64 * cell, origin + j as f64 * cell);
            let (x1, y1) = (x0 + cell, y0 + cell);
            let c = shade(t.colors[(i + j) % 2], &Vector3::z(), light);
            let v = |x: f64, y: f64| ext.transform_point(&Vector3::new(x, y, 0.0));
            for tri in [[v(x0, y0), v(x1, y0), v(x1, y1)], [v(x0, y0), v(x1, y1), v(x0, y1)]] {
                out.push(RenderTriangle {
                    vertices: tri,
                    color: c,
                    label: 0,
                    owner: None,
                });
            }
        }
    }
    out
}

/// Renders every frame of one video. Objects hidden in a frame are left out
/// of its annotations.
pub fn render_video(
    spec: &SceneSpec,
    registry: &ObjectRegistry,
    seed: u64,
    video: usize,
) -> Result<Vec<FrameRecord>, DataError> {
    spec.validate()?;
    let scene = video_scene(spec, seed, video);
    let k = spec.intrinsics();
    let light = Vector3::from(spec.light)
        .try_normalize(1e-12)
        .ok_or_else(|| DataError::Spec("light direction must be non-zero".into()))?;
    let (w, h) = (spec.width, spec.height);
    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let s = if spec.trajectory.closed {
            f as f64 / spec.frames as f64
        } else if spec.frames > 1 {
            f as f64 / (spec.frames - 1) as f64
        } else {
            0.0
        };
        let eye = spline_point(&scene.trajectory, spec.trajectory.closed, s);
        let ext = look_at(&eye, &scene.look_at)?;

        let mut tris = table_triangles(&spec.table, &ext, &light);
        for occ in &scene.occluders {
            tris.extend(placed_triangles(occ, &ext, &light, 0, None));
        }
        let mut per_object = Vec::with_capacity(scene.objects.len());
        for (slot, obj) in scene.objects.iter().enumerate() {
            let t = placed_triangles(obj, &ext, &light, slot as u8 + 1, Some(slot));
            tris.extend(t.iter().copied());
            per_object.push(t);
        }
        let out = render_scene(&tris, &k, w, h, spec.background);

        let mut objects = Vec::new();
        for (slot, obj) in scene.objects.iter().enumerate() {
            let id = &spec.objects[slot].id;
            let pose = obj.world_pose().left_compose(&ext);
            let visible = out.coverage(slot);
            let alone = render_scene(&per_object[slot], &k, w, h, spec.background).coverage(slot);
            let model = registry.get(id).expect("registry built from the same spec");
            let bbox = projected_bbox(model, &pose, &k).map(|b| b.clip_to(w, h));
            match bbox {
                Some(bbox) if visible > 0 && bbox.area() > 0.0 => objects.push(ObjectAnnotation {
                    id: id.clone(),
                    pose,
                    bbox,
                    visible_fraction: visible as f64 / alone.max(1) as f64,
                }),
                _ if alone > 0 => {
                    log::warn!("video {video} frame {f}: `{id}` fully occluded, marked absent")
                }
                _ => log::debug!("video {video} frame {f}: `{id}` outside the view"),
            }
        }
        frames.push(FrameRecord {
            index: f,
            rgb: out.rgb,
            depth: out.depth,
            labels: out.labels,
            objects,
            extrinsic: ext,
            intrinsics: k,
        });
    }
    Ok(frames)
}

/// Bounding rectangle of the projections of all model points in front of the
/// camera.
pub fn projected_bbox(model: &ObjectModel, pose: &Pose, k: &CameraIntrinsics) -> Option<BBox> {
    let r = pose.rotation_matrix();
    BBox::enclosing(model.points().iter().filter_map(|p| {
        let c = r * p + pose.translation;
        k.project(&c).ok()
    }))
}

/// Renders all videos and writes the portable layout under `out`.
pub fn generate_synthetic_dataset(
    spec: &SceneSpec,
    seed: u64,
    out: &Path,
    parallel: bool,
) -> Result<DatasetInfo, DataError> {
    spec.validate()?;
    let registry = spec.registry()?;
    std::fs::create_dir_all(out).map_err(DataError::io(out))?;
    save_registry(&registry, &out.join("models"))?;
    let info = DatasetInfo {
        name: spec.name.clone(),
        seed: Some(seed),
        width: spec.width,
        height: spec.height,
        videos: (0..spec.videos).map(video_name).collect(),
    };
    let job = |v: usize| -> Result<(), DataError> {
        let frames = render_video(spec, &registry, seed, v)?;
        let dir = video_dir(out, &info.videos[v]);
        std::fs::create_dir_all(&dir).map_err(DataError::io(&dir))?;
        for frame in &frames {
            write_frame(&dir, frame)?;
        }
        Ok(())
    };
    if parallel {
        (0..spec.videos).into_par_iter().try_for_each(job)?;
    } else {
        (0..spec.videos).try_for_each(job)?;
    }
    write_dataset_info(out, &info)?;
    Ok(info)
}

pub fn video_name(index: usize) -> String {
    format!("video_{index:04}")
}
