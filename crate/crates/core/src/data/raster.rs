//! Minimal z-buffer triangle rasterizer.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};

use crate::geometry::CameraIntrinsics;

/// Points closer than this to the camera plane are clipped away.
const NEAR: f64 = 1e-3;

/// A camera-frame triangle with a flat color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderTriangle {
    /// Counter-clockwise when seen from the front.
    pub vertices: [Vector3<f64>; 3],
    pub color: [f64; 3],
    pub label: u8,
    /// Index of the owning scene element, reported per pixel.
    pub owner: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Array3<f32>,
    /// Surface z in meters, 0 where nothing was drawn.
    pub depth: Array2<f32>,
    pub labels: Array2<u8>,
    pub owner: Array2<Option<usize>>,
}

impl RenderOutput {
    pub fn coverage(&self, owner: usize) -> usize {
        self.owner.iter().filter(|o| **o == Some(owner)).count()
    }
}

/// Clips a polygon to the half-space `z >= NEAR`.
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for (i, a) in poly.iter().enumerate() {
        let b = &poly[(i + 1) % poly.len()];
        let (ina, inb) = (a.z >= NEAR, b.z >= NEAR);
        if ina {
            out.push(*a);
        }
        if ina != inb {
            let t = (NEAR - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = NEAR;
            out.push(p);
        }
    }
    out
}

/// Renders camera-frame triangles with back-face culling and a depth test.
pub fn render_scene(
    triangles: &[RenderTriangle],
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    background: [f64; 3],
) -> RenderOutput {
    let mut zbuf = Array2::<f64>::from_elem((height, width), f64::INFINITY);
    let mut rgb = Array3::<f32>::zeros((height, width, 3));
    for mut px in rgb.lanes_mut(ndarray::Axis(2)) {
        for c in 0..3 {
            px[c] = background[c] as f32;
        }
    }
    let mut labels = Array2::<u8>::zeros((height, width));
    let mut owner = Array2::<Option<usize>>::from_elem((height, width), None);

    for tri in triangles {
        let [a, b, c] = tri.vertices;
        let normal = (b - a).cross(&(c - a));
        if normal.dot(&a) >= 0.0 {
            continue;
        }
        let poly = clip_near(&tri.vertices);
        if poly.len() < 3 {
            continue;
        }
        // screen position and inverse depth per vertex
        let screen: Vec<(f64, f64, f64)> = poly
            .iter()
            .map(|p| (k.fx * p.x / p.z + k.px, k.fy * p.y / p.z + k.py, 1.0 / p.z))
            .collect();
        for i in 1..screen.len() - 1 {
            let s = [screen[0], screen[i], screen[i + 1]];
            let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[1].1 - s[0].1) * (s[2].0 - s[0].0);
            if area.abs() < 1e-12 {
                continue;
            }
            let min_u = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let max_u = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let min_v = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let max_v = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let j0 = (min_u - 0.5).ceil().max(0.0) as usize;
            let i0 = (min_v - 0.5).ceil().max(0.0) as usize;
            let j1 = (max_u - 0.5).floor().min(width as f64 - 1.0);
            let i1 = (max_v - 0.5).floor().min(height as f64 - 1.0);
            if j1 < 0.0 || i1 < 0.0 {
                continue;
            }
            for row in i0..=i1 as usize {
                let y = row as f64 + 0.5;
                for col in j0..=j1 as usize {
                    let x = col as f64 + 0.5;
                    let edge = |p: (f64, f64, f64), q: (f64, f64, f64)| {
                        ((q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)) / area
                    };
                    let l0 = edge(s[1], s[2]);
                    let l1 = edge(s[2], s[0]);
                    let l2 = edge(s[0], s[1]);
                    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                        continue;
                    }
                    // inverse depth is affine in screen space for planar faces
                    let z = 1.0 / (l0 * s[0].2 + l1 * s[1].2 + l2 * s[2].2);
                    if z < zbuf[[row, col]] {
                        zbuf[[row, col]] = z;
                        for ch in 0..3 {
                            rgb[[row, col, ch]] = tri.color[ch] as f32;
                        }
                        labels[[row, col]] = tri.label;
                        owner[[row, col]] = tri.owner;
                    }
                }
            }
        }
    }
    let depth = zbuf.mapv(|z| if z.is_finite() { z as f32 } else { 0.0 });
    RenderOutput {
        rgb,
        depth,
        labels,
        owner,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 16.0, 16.0).unwrap()
    }

    fn facing_quad(z: f64, half: f64, label: u8) -> Vec<RenderTriangle> {
        // camera looks along +z, so a front face winds counter-clockwise in
        // a right-handed frame with y down when seen from the origin
        let p = |x: f64, y: f64| Vector3::new(x, y, z);
        let (a, b, c, d) = (p(-half, -half), p(half, -half), p(half, half), p(-half, half));
        let mk = |v: [Vector3<f64>; 3]| RenderTriangle {
            vertices: v,
            color: [label as f64 / 10.0; 3],
            label,
            owner: Some(label as usize),
        };
        vec![mk([a, c, b]), mk([a, d, c])]
    }

    #[test]
    fn front_plane_gets_constant_depth() {
        let out = render_scene(&facing_quad(2.0, 0.2, 1), &k(), 32, 32, [0.0; 3]);
        // 0.2 m at 2 m is 5 px each side of the center
        let covered = out.coverage(1);
        assert_eq!(covered, 100);
        for ((i, j), &l) in out.labels.indexed_iter() {
            if l == 1 {
                assert_eq!(out.depth[[i, j]], 2.0);
                assert!((11..21).contains(&i) && (11..21).contains(&j));
            } else {
                assert_eq!(out.depth[[i, j]], 0.0);
            }
        }
    }

    #[test]
    fn nearer_surface_wins_regardless_of_order() {
        let mut tris = facing_quad(3.0, 0.6, 1);
        tris.extend(facing_quad(1.0, 0.05, 2));
        let a = render_scene(&tris, &k(), 32, 32, [0.0; 3]);
        tris.reverse();
        let b = render_scene(&tris, &k(), 32, 32, [0.0; 3]);
        assert_eq!(a, b);
        assert!(a.coverage(2) > 0);
        assert_eq!(a.labels[[16, 16]], 2);
        assert_eq!(a.depth[[16, 16]], 1.0);
    }

    #[test]
    fn back_faces_are_culled() {
        let mut tris = facing_quad(2.0, 0.2, 1);
        for t in &mut tris {
            t.vertices.swap(1, 2);
        }
        let out = render_scene(&tris, &k(), 32, 32, [0.0; 3]);
        assert_eq!(out.coverage(1), 0);
    }

    #[test]
    fn geometry_behind_camera_is_clipped() {
        // a floor-like quad spanning from behind to in front of the camera
        let tri = RenderTriangle {
            vertices: [
                Vector3::new(-1.0, 0.5, -1.0),
                Vector3::new(1.0, 0.5, -1.0),
                Vector3::new(0.0, 0.5, 5.0),
            ],
            color: [1.0; 3],
            label: 0,
            owner: Some(0),
        };
        let out = render_scene(&[tri], &k(), 32, 32, [0.0; 3]);
        assert!(out.coverage(0) > 0);
        for ((i, j), &d) in out.depth.indexed_iter() {
            if d > 0.0 {
                // the plane y = 0.5 seen through pixel row i has z = 0.5 fy / (v - py)
                let v = i as f64 + 0.5 - 16.0;
                assert!(v > 0.0, "pixel ({i}, {j}) above the horizon");
                assert!((d as f64 - 25.0 / v).abs() < 1e-5);
            }
        }
    }
}
