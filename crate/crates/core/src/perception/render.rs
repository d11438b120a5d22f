//! Synthetic RGB-D frame generator.
//!
//! Z-buffered ray casting of fruit ellipsoids, a vertical trunk cylinder
//! and spherical occluders over a green background. The depth image is
//! exact geometric depth, and the emitted ground-truth bounding boxes
//! act as the detector oracle in simulation.

use serde::{Deserialize, Serialize};

use super::{BoundingBox, CameraIntrinsics, Frame};

pub const COLOR_BACKGROUND: [u8; 3] = [40, 160, 60];
pub const COLOR_TRUNK: [u8; 3] = [110, 89, 67];
pub const COLOR_FRUIT: [u8; 3] = [230, 120, 30];
pub const COLOR_OCCLUDER: [u8; 3] = [120, 120, 120];

/// Fraction of a fruit's projected silhouette that must survive the
/// z-buffer for the detector oracle to report it.
const MIN_VISIBLE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFruit {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub d_h: f64,
    pub d_v: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTrunk {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneOccluder {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub radius: f64,
}

fn default_background_depth() -> f64 {
    2.5
}

/// Declarative synthetic scene in the camera frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub trunk: Option<SceneTrunk>,
    #[serde(default)]
    pub fruits: Vec<SceneFruit>,
    #[serde(default)]
    pub occluders: Vec<SceneOccluder>,
    #[serde(default = "default_background_depth")]
    pub background_depth: f64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<(), String> {
        for (i, f) in self.fruits.iter().enumerate() {
            if f.z <= 0.0 {
                return Err(format!("fruits[{i}].z must be positive (in front of the camera)"));
            }
            if f.d_h <= 0.0 || f.d_v <= 0.0 {
                return Err(format!("fruits[{i}]: semi-axes must be positive"));
            }
        }
        if let Some(t) = &self.trunk {
            if t.z <= 0.0 {
                return Err("trunk.z must be positive".into());
            }
            if t.radius <= 0.0 {
                return Err("trunk.radius must be positive".into());
            }
        }
        if self.background_depth <= 0.0 {
            return Err("background_depth must be positive".into());
        }
        Ok(())
    }
}

/// One frame render plus the detector-oracle boxes (fruit index, bbox).
pub struct RenderOutput {
    pub frame: Frame,
    pub detections: Vec<(usize, BoundingBox)>,
}

struct Raster {
    depth: Vec<f64>,
    owner: Vec<i32>,
    width: usize,
}

impl Raster {
    fn put(&mut self, u: usize, v: usize, z: f64, owner: i32) {
        let idx = v * self.width + u;
        if z < self.depth[idx] {
            self.depth[idx] = z;
            self.owner[idx] = owner;
        }
    }
}

/// First positive ray parameter of `a s^2 + b s + c = 0`, if any.
fn first_hit(a: f64, b: f64, c: f64) -> Option<f64> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = (-b - disc.sqrt()) / (2.0 * a);
    (s > 0.0).then_some(s)
}

/// Conservative pixel-space bounds of a sphere/ellipsoid silhouette.
fn pixel_bounds(
    cx_px: f64,
    cy_px: f64,
    half_u: f64,
    half_v: f64,
    k: &CameraIntrinsics,
) -> Option<(usize, usize, usize, usize)> {
    let pad = 2.0;
    let u0 = (cx_px - half_u - pad).floor().max(0.0) as usize;
    let v0 = (cy_px - half_v - pad).floor().max(0.0) as usize;
    let u1 = (cx_px + half_u + pad).ceil().min(k.width as f64 - 1.0) as usize;
    let v1 = (cy_px + half_v + pad).ceil().min(k.height as f64 - 1.0) as usize;
    (u0 <= u1 && v0 <= v1).then_some((u0, v0, u1, v1))
}

/// Render the scene at `frame_index`.
pub fn render_synthetic_frame(
    scene: &SyntheticScene,
    k: &CameraIntrinsics,
    frame_index: u64,
) -> RenderOutput {
    let (w, h) = (k.width, k.height);
    let mut raster = Raster {
        depth: vec![scene.background_depth; w * h],
        owner: vec![-1; w * h],
        width: w,
    };

    // trunk: vertical cylinder, so each column hits at one depth
    if let Some(t) = &scene.trunk {
        for u in 0..w {
            let dx = (u as f64 - k.cx) / k.fx;
            let a = dx * dx + 1.0;
            let b = -2.0 * (dx * t.x + t.z);
            let c = t.x * t.x + t.z * t.z - t.radius * t.radius;
            if let Some(s) = first_hit(a, b, c) {
                for v in 0..h {
                    raster.put(u, v, s, -2);
                }
            }
        }
    }

    // fruits: per-object silhouette rasterization
    let mut potential = vec![0usize; scene.fruits.len()];
    for (fi, f) in scene.fruits.iter().enumerate() {
        let z_min = f.z - f.d_h;
        if z_min <= 0.0 {
            continue; // fruit intersects the camera plane; skip
        }
        let (uc, vc) = super::project(&nalgebra::Point3::new(f.x, f.y, f.z), k);
        let half_u = k.fx * f.d_h / z_min;
        let half_v = k.fy * f.d_v / z_min;
        let Some((u0, v0, u1, v1)) = pixel_bounds(uc, vc, half_u, half_v, k) else {
            continue;
        };
        let (ia2, ib2) = (1.0 / (f.d_h * f.d_h), 1.0 / (f.d_v * f.d_v));
        for v in v0..=v1 {
            let dy = (v as f64 - k.cy) / k.fy;
            for u in u0..=u1 {
                let dx = (u as f64 - k.cx) / k.fx;
                let a = dx * dx * ia2 + dy * dy * ib2 + ia2;
                let b = -2.0 * (dx * f.x * ia2 + dy * f.y * ib2 + f.z * ia2);
                let c = f.x * f.x * ia2 + f.y * f.y * ib2 + f.z * f.z * ia2 - 1.0;
                if let Some(s) = first_hit(a, b, c) {
                    potential[fi] += 1;
                    raster.put(u, v, s, fi as i32);
                }
            }
        }
    }

    for (oi, o) in scene.occluders.iter().enumerate() {
        let z_near = o.z - o.radius;
        if z_near <= 0.0 {
            continue;
        }
        let (uc, vc) = super::project(&nalgebra::Point3::new(o.x, o.y, o.z), k);
        let half_u = k.fx * o.radius / z_near;
        let half_v = k.fy * o.radius / z_near;
        let Some((u0, v0, u1, v1)) = pixel_bounds(uc, vc, half_u, half_v, k) else {
            continue;
        };
        for v in v0..=v1 {
            let dy = (v as f64 - k.cy) / k.fy;
            for u in u0..=u1 {
                let dx = (u as f64 - k.cx) / k.fx;
                let a = dx * dx + dy * dy + 1.0;
                let b = -2.0 * (dx * o.x + dy * o.y + o.z);
                let c = o.x * o.x + o.y * o.y + o.z * o.z - o.radius * o.radius;
                if let Some(s) = first_hit(a, b, c) {
                    raster.put(u, v, s, -3 - oi as i32);
                }
            }
        }
    }

    // visibility per fruit: surviving silhouette pixels vs potential ones
    let mut visible = vec![0usize; scene.fruits.len()];
    for idx in 0..w * h {
        let o = raster.owner[idx];
        if o >= 0 {
            visible[o as usize] += 1;
        }
    }

    let mut detections = Vec::new();
    for (fi, f) in scene.fruits.iter().enumerate() {
        if potential[fi] == 0 {
            continue;
        }
        if (visible[fi] as f64) < MIN_VISIBLE_FRACTION * potential[fi] as f64 {
            continue;
        }
        let z_min = f.z - f.d_h;
        let (uc, vc) = super::project(&nalgebra::Point3::new(f.x, f.y, f.z), k);
        let half_u = k.fx * f.d_h / z_min;
        let half_v = k.fy * f.d_v / z_min;
        let u_tl = (uc - half_u).max(0.0);
        let v_tl = (vc - half_v).max(0.0);
        let u_br = (uc + half_u).min(k.width as f64 - 1.0);
        let v_br = (vc + half_v).min(k.height as f64 - 1.0);
        if let Ok(bbox) = BoundingBox::new(u_tl, v_tl, u_br, v_br) {
            detections.push((fi, bbox));
        }
    }

    let rgb = raster
        .owner
        .iter()
        .map(|&o| match o {
            -1 => COLOR_BACKGROUND,
            -2 => COLOR_TRUNK,
            o if o <= -3 => COLOR_OCCLUDER,
            _ => COLOR_FRUIT,
        })
        .collect();

    RenderOutput {
        frame: Frame {
            rgb,
            depth: raster.depth,
            width: w,
            height: h,
            index: frame_index,
        },
        detections,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::{localize_fruit, localize_tree, HsvRange};
    use approx::assert_relative_eq;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    fn scene() -> SyntheticScene {
        SyntheticScene {
            trunk: None,
            fruits: vec![],
            occluders: vec![],
            background_depth: 2.5,
        }
    }

    #[test]
    fn empty_scene_is_background_only() {
        let out = render_synthetic_frame(&scene(), &intrinsics(), 3);
        assert!(out.detections.is_empty());
        assert!(out.frame.rgb.iter().all(|&c| c == COLOR_BACKGROUND));
        assert!(out.frame.depth.iter().all(|&d| d == 2.5));
        assert_eq!(out.frame.index, 3);
    }

    #[test]
    fn centered_sphere_bbox_matches_analytic_projection() {
        let mut s = scene();
        s.fruits.push(SceneFruit {
            x: 0.0,
            y: 0.0,
            z: 0.5,
            d_h: 0.04,
            d_v: 0.04,
        });
        let out = render_synthetic_frame(&s, &intrinsics(), 0);
        assert_eq!(out.detections.len(), 1);
        let (_, bbox) = out.detections[0];
        let expected_half = 600.0 * 0.04 / 0.46; // ~52.2 px, nearest-surface projection
        let (rh, rv) = bbox.semi_axes();
        assert_relative_eq!(rh, expected_half, epsilon = 1e-9);
        assert_relative_eq!(rv, expected_half, epsilon = 1e-9);
        let (uc, vc) = bbox.center();
        assert_relative_eq!(uc, 320.0, epsilon = 1e-9);
        assert_relative_eq!(vc, 240.0, epsilon = 1e-9);
        // nearest-surface depth at the center pixel
        assert_relative_eq!(out.frame.depth_at(320.0, 240.0).unwrap(), 0.46, epsilon = 1e-9);
    }

    #[test]
    fn occluded_fruit_is_omitted_from_detections() {
        let mut s = scene();
        s.fruits.push(SceneFruit {
            x: 0.0,
            y: 0.0,
            z: 0.8,
            d_h: 0.04,
            d_v: 0.04,
        });
        s.occluders.push(SceneOccluder {
            x: 0.0,
            y: 0.0,
            z: 0.5,
            radius: 0.1,
        });
        let out = render_synthetic_frame(&s, &intrinsics(), 0);
        assert!(out.detections.is_empty(), "covered fruit must not be detected");
    }

    #[test]
    fn rendered_fruit_localizes_to_ground_truth() {
        let mut s = scene();
        s.fruits.push(SceneFruit {
            x: 0.0,
            y: 0.0,
            z: 0.50,
            d_h: 0.04,
            d_v: 0.04,
        });
        let k = intrinsics();
        let out = render_synthetic_frame(&s, &k, 0);
        let (_, bbox) = out.detections[0];
        let obs = localize_fruit(&bbox, &out.frame, &k).unwrap();
        assert!((obs.center.z - 0.50).abs() <= 0.005);
        assert!((obs.d_v - 0.04).abs() <= 0.002);
        assert!((obs.center.x).abs() <= 1e-6);
    }

    #[test]
    fn fruit_size_estimate_is_scale_invariant() {
        let k = intrinsics();
        let mut d_vs = Vec::new();
        for z in [0.5, 1.0] {
            let mut s = scene();
            s.fruits.push(SceneFruit {
                x: 0.02,
                y: -0.01,
                z,
                d_h: 0.04,
                d_v: 0.04,
            });
            let out = render_synthetic_frame(&s, &k, 0);
            let (_, bbox) = out.detections[0];
            d_vs.push(localize_fruit(&bbox, &out.frame, &k).unwrap().d_v);
        }
        let rel = (d_vs[0] - d_vs[1]).abs() / d_vs[1];
        assert!(rel <= 0.05, "d_v not scale invariant: {d_vs:?}");
    }

    #[test]
    fn rendered_trunk_localizes_near_truth() {
        let mut s = scene();
        s.trunk = Some(SceneTrunk {
            x: 0.05,
            y: 0.0,
            z: 1.2,
            radius: 0.01,
        });
        let k = intrinsics();
        let out = render_synthetic_frame(&s, &k, 0);
        let est = localize_tree(&out.frame, &HsvRange::default(), 2.0, 200, &k).unwrap();
        assert!((est.center.x - 0.05).abs() <= 0.01, "x_t off: {}", est.center.x);
        assert!((est.center.z - 1.2).abs() <= 0.01, "z_t off: {}", est.center.z);
    }
}
