//! Geometric fruit localization from detections plus depth, trunk
//! localization via HSV and depth masks, ID tracking and fruit
//! selection.
//!
//! The detector itself is pluggable: anything that produces
//! [`BoundingBox`] lists per frame works. The synthetic renderer in
//! [`render`] plays that role in simulation.

pub mod io;
pub mod render;
pub mod track;

use std::collections::BTreeMap;

use nalgebra::Point3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("invalid depth at pixel ({0:.1}, {1:.1})")]
    InvalidDepth(f64, f64),
    #[error("no valid depth inside detection bbox")]
    NoDepthInBox,
    #[error("tree not found: {0} masked pixels below minimum {1}")]
    TreeNotFound(usize, usize),
    #[error("bounding box outside image or degenerate")]
    BadBoundingBox,
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err("focal lengths must be positive".into());
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 {
            return Err("cx outside image".into());
        }
        if self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err("cy outside image".into());
        }
        Ok(())
    }
}

/// Deproject pixel `(u, v)` at metric depth `z` into the camera frame.
pub fn proj(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Point3<f64>, PerceptionError> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(PerceptionError::InvalidDepth(u, v));
    }
    Ok(Point3::new(
        (u - k.cx) * depth / k.fx,
        (v - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Project a camera-frame point to pixel coordinates; inverse of [`proj`].
pub fn project(p: &Point3<f64>, k: &CameraIntrinsics) -> (f64, f64) {
    (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Axis-aligned detection rectangle, top-left / bottom-right corners in
/// pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub u_tl: f64,
    pub v_tl: f64,
    pub u_br: f64,
    pub v_br: f64,
}

impl BoundingBox {
    pub fn new(u_tl: f64, v_tl: f64, u_br: f64, v_br: f64) -> Result<Self, PerceptionError> {
        if !(u_tl < u_br && v_tl < v_br) {
            return Err(PerceptionError::BadBoundingBox);
        }
        Ok(Self { u_tl, v_tl, u_br, v_br })
    }

    /// Center pixel, the midpoint of the two corners.
    pub fn center(&self) -> (f64, f64) {
        ((self.u_tl + self.u_br) / 2.0, (self.v_tl + self.v_br) / 2.0)
    }

    /// Horizontal and vertical semi-axes of the enclosed ellipse:
    /// `r_h = u_br - u_c`, `r_v = v_br - v_c`.
    pub fn semi_axes(&self) -> (f64, f64) {
        let (uc, vc) = self.center();
        (self.u_br - uc, self.v_br - vc)
    }

    pub fn area(&self) -> f64 {
        (self.u_br - self.u_tl) * (self.v_br - self.v_tl)
    }

    /// Intersection-over-union of two boxes.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.u_br.min(other.u_br) - self.u_tl.max(other.u_tl)).max(0.0);
        let ih = (self.v_br.min(other.v_br) - self.v_tl.max(other.v_tl)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// RGB-D frame: 8-bit color plus metric depth, 0 meaning invalid.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rgb: Vec<[u8; 3]>,
    pub depth: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub index: u64,
}

impl Frame {
    pub fn filled(width: usize, height: usize, index: u64, color: [u8; 3], depth: f64) -> Self {
        Self {
            rgb: vec![color; width * height],
            depth: vec![depth; width * height],
            width,
            height,
            index,
        }
    }

    pub fn depth_at(&self, u: f64, v: f64) -> Option<f64> {
        let ui = u.round() as isize;
        let vi = v.round() as isize;
        if ui < 0 || vi < 0 || ui as usize >= self.width || vi as usize >= self.height {
            return None;
        }
        let d = self.depth[vi as usize * self.width + ui as usize];
        (d > 0.0 && d.is_finite()).then_some(d)
    }
}

/// A localized fruit before ID association.
#[derive(Debug, Clone, Copy)]
pub struct FruitObservation {
    pub center: Point3<f64>,
    pub d_h: f64,
    pub d_v: f64,
    pub cam_distance: f64,
}

/// A tracked, localized fruit.
#[derive(Debug, Clone, Copy)]
pub struct FruitEstimate {
    pub id: u64,
    pub center: Point3<f64>,
    pub d_h: f64,
    pub d_v: f64,
    pub cam_distance: f64,
    pub last_seen: u64,
}

/// Estimated trunk position in the camera frame.
#[derive(Debug, Clone, Copy)]
pub struct TreeEstimate {
    pub center: Point3<f64>,
    pub pixel_count: usize,
}

/// Localize one detection: read the nearest-surface depth at the bbox
/// center, convert the pixel semi-axes into metric semi-axes at that
/// depth, and push the center half a fruit deeper.
///
/// `z_f = z_min + |proj(u_c, v_c) - proj(u_c + r_h, v_c)|`, the second
/// term doubling as the horizontal semi-axis `d_h`; `d_v` comes from the
/// vertical semi-axis the same way. Both deprojections are evaluated at
/// `z_min`. The lateral center position deprojects the center pixel at
/// `z_f`.
pub fn localize_fruit(
    bbox: &BoundingBox,
    frame: &Frame,
    k: &CameraIntrinsics,
) -> Result<FruitObservation, PerceptionError> {
    let (uc, vc) = bbox.center();
    let (r_h, r_v) = bbox.semi_axes();
    let z_min = match frame.depth_at(uc, vc) {
        Some(d) => d,
        None => central_depth_median(bbox, frame).ok_or(PerceptionError::NoDepthInBox)?,
    };
    let p_c = proj(uc, vc, z_min, k)?;
    let d_h = (proj(uc + r_h, vc, z_min, k)? - p_c).norm();
    let d_v = (proj(uc, vc + r_v, z_min, k)? - p_c).norm();
    let z_f = z_min + d_h;
    let center = proj(uc, vc, z_f, k)?;
    Ok(FruitObservation {
        center,
        d_h,
        d_v,
        cam_distance: center.coords.norm(),
    })
}

/// Median of the valid depths in the central 25% (by area) of the bbox.
fn central_depth_median(bbox: &BoundingBox, frame: &Frame) -> Option<f64> {
    let (uc, vc) = bbox.center();
    let (r_h, r_v) = bbox.semi_axes();
    let mut vals = Vec::new();
    let u0 = (uc - r_h / 2.0).floor() as isize;
    let u1 = (uc + r_h / 2.0).ceil() as isize;
    let v0 = (vc - r_v / 2.0).floor() as isize;
    let v1 = (vc + r_v / 2.0).ceil() as isize;
    for v in v0..=v1 {
        for u in u0..=u1 {
            if let Some(d) = frame.depth_at(u as f64, v as f64) {
                vals.push(d);
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.total_cmp(b));
    Some(vals[vals.len() / 2])
}

/// Inclusive HSV range in OpenCV conventions (H in 0..180, S and V in
/// 0..255).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsvRange {
    pub h_min: f64,
    pub h_max: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for HsvRange {
    fn default() -> Self {
        // trunk segmentation defaults
        Self {
            h_min: 10.0,
            h_max: 20.0,
            s_min: 70.0,
            s_max: 130.0,
            v_min: 80.0,
            v_max: 140.0,
        }
    }
}

impl HsvRange {
    pub fn contains(&self, h: f64, s: f64, v: f64) -> bool {
        h >= self.h_min
            && h <= self.h_max
            && s >= self.s_min
            && s <= self.s_max
            && v >= self.v_min
            && v <= self.v_max
    }
}

/// RGB (0..255) to HSV in OpenCV conventions: H in 0..180, S, V in 0..255.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let r = rgb[0] as f64;
    let g = rgb[1] as f64;
    let b = rgb[2] as f64;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let v = max;
    let s = if max > 0.0 { 255.0 * c / max } else { 0.0 };
    let h = if c <= 0.0 {
        0.0
    } else if max == r {
        30.0 * (g - b) / c
    } else if max == g {
        30.0 * (2.0 + (b - r) / c)
    } else {
        30.0 * (4.0 + (r - g) / c)
    };
    let h = if h < 0.0 { h + 180.0 } else { h };
    (h, s, v)
}

/// Trunk localization: intersect an HSV in-range mask with a near-depth
/// mask, then deproject the mean pixel at the mean depth.
pub fn localize_tree(
    frame: &Frame,
    hsv_range: &HsvRange,
    depth_max: f64,
    min_pixels: usize,
    k: &CameraIntrinsics,
) -> Result<TreeEstimate, PerceptionError> {
    let mut count = 0usize;
    let mut sum_u = 0.0;
    let mut sum_v = 0.0;
    let mut sum_z = 0.0;
    for v in 0..frame.height {
        for u in 0..frame.width {
            let idx = v * frame.width + u;
            let d = frame.depth[idx];
            if !(d > 0.0 && d <= depth_max) {
                continue;
            }
            let (h, s, val) = rgb_to_hsv(frame.rgb[idx]);
            if !hsv_range.contains(h, s, val) {
                continue;
            }
            count += 1;
            sum_u += u as f64;
            sum_v += v as f64;
            sum_z += d;
        }
    }
    if count < min_pixels {
        return Err(PerceptionError::TreeNotFound(count, min_pixels));
    }
    let n = count as f64;
    let z_t = sum_z / n;
    let center = proj(sum_u / n, sum_v / n, z_t, k)?;
    Ok(TreeEstimate {
        center,
        pixel_count: count,
    })
}

/// Per-ID registry of fruit estimates backing the selection strategy.
///
/// Positions only update when the new estimate stays within the jump
/// threshold of the stored one, which rides out temporary ID mixups;
/// entries unseen for `expiry_frames` are dropped.
#[derive(Debug, Clone)]
pub struct FruitRegistry {
    entries: BTreeMap<u64, FruitEstimate>,
    pub jump_threshold: f64,
    pub expiry_frames: u64,
}

impl Default for FruitRegistry {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            jump_threshold: 0.10,
            expiry_frames: 100,
        }
    }
}

impl FruitRegistry {
    pub fn new(jump_threshold: f64, expiry_frames: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            jump_threshold,
            expiry_frames,
        }
    }

    pub fn observe(&mut self, frame_index: u64, id: u64, obs: &FruitObservation) {
        match self.entries.get_mut(&id) {
            Some(e) => {
                let jump = (obs.center - e.center).norm();
                if jump < self.jump_threshold {
                    e.center = obs.center;
                    e.d_h = obs.d_h;
                    e.d_v = obs.d_v;
                    e.cam_distance = obs.cam_distance;
                }
                // above the threshold the previous state is kept, but the
                // sighting still refreshes the expiry clock
                e.last_seen = frame_index;
            }
            None => {
                self.entries.insert(
                    id,
                    FruitEstimate {
                        id,
                        center: obs.center,
                        d_h: obs.d_h,
                        d_v: obs.d_v,
                        cam_distance: obs.cam_distance,
                        last_seen: frame_index,
                    },
                );
            }
        }
    }

    /// Drop entries unseen for more than the expiry window.
    pub fn expire(&mut self, frame_index: u64) {
        let expiry = self.expiry_frames;
        self.entries
            .retain(|_, e| frame_index.saturating_sub(e.last_seen) <= expiry);
    }

    pub fn get(&self, id: u64) -> Option<&FruitEstimate> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FruitEstimate> {
        self.entries.values()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Closest stored fruit to the camera, skipping excluded IDs.
    pub fn select(&self, exclude: &dyn Fn(u64) -> bool) -> Option<FruitEstimate> {
        self.entries
            .values()
            .filter(|e| !exclude(e.id))
            .min_by(|a, b| a.cam_distance.total_cmp(&b.cam_distance))
            .copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

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

    fn obs(x: f64, y: f64, z: f64) -> FruitObservation {
        let center = Point3::new(x, y, z);
        FruitObservation {
            center,
            d_h: 0.04,
            d_v: 0.04,
            cam_distance: center.coords.norm(),
        }
    }

    #[test]
    fn bbox_center_and_semi_axes() {
        let b = BoundingBox::new(0.0, 0.0, 100.0, 80.0).unwrap();
        assert_eq!(b.center(), (50.0, 40.0));
        assert_eq!(b.semi_axes(), (50.0, 40.0));
        let b = BoundingBox::new(10.0, 10.0, 12.0, 12.0).unwrap();
        assert_eq!(b.center(), (11.0, 11.0));
    }

    #[test]
    fn proj_principal_point_and_unit_offset() {
        let k = intrinsics();
        let p = proj(320.0, 240.0, 1.0, &k).unwrap();
        assert_relative_eq!(p.x, 0.0);
        assert_relative_eq!(p.y, 0.0);
        assert_relative_eq!(p.z, 1.0);
        let p = proj(320.0 + 600.0, 240.0, 1.0, &k).unwrap();
        assert_relative_eq!(p.x, 1.0);
    }

    #[test]
    fn proj_rejects_invalid_depth() {
        let k = intrinsics();
        assert!(proj(10.0, 10.0, 0.0, &k).is_err());
        assert!(proj(10.0, 10.0, f64::NAN, &k).is_err());
    }

    #[test]
    fn fruit_at_principal_point_centers_at_origin() {
        let k = intrinsics();
        let mut frame = Frame::filled(640, 480, 0, [0, 0, 0], 0.0);
        frame.depth[240 * 640 + 320] = 0.46;
        let b = BoundingBox::new(320.0 - 52.0, 240.0 - 52.0, 320.0 + 52.0, 240.0 + 52.0).unwrap();
        let o = localize_fruit(&b, &frame, &k).unwrap();
        assert_relative_eq!(o.center.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(o.center.y, 0.0, epsilon = 1e-12);
        // z_f = z_min + d_h with d_h = r_h * z_min / fx = 52*0.46/600
        assert_relative_eq!(o.center.z, 0.46 + 52.0 * 0.46 / 600.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_center_depth_falls_back_to_median() {
        let k = intrinsics();
        let mut frame = Frame::filled(640, 480, 0, [0, 0, 0], 0.0);
        // center invalid, but neighbors carry depth
        for dv in -5i32..=5 {
            for du in -5i32..=5 {
                if (du, dv) == (0, 0) {
                    continue;
                }
                frame.depth[((240 + dv) * 640 + 320 + du) as usize] = 0.5;
            }
        }
        let b = BoundingBox::new(300.0, 220.0, 340.0, 260.0).unwrap();
        let o = localize_fruit(&b, &frame, &k).unwrap();
        assert_relative_eq!(o.center.z, 0.5 + 20.0 * 0.5 / 600.0, epsilon = 1e-12);
    }

    #[test]
    fn no_depth_anywhere_rejects_detection() {
        let k = intrinsics();
        let frame = Frame::filled(640, 480, 0, [0, 0, 0], 0.0);
        let b = BoundingBox::new(300.0, 220.0, 340.0, 260.0).unwrap();
        assert!(localize_fruit(&b, &frame, &k).is_err());
    }

    #[test]
    fn registry_selects_closest() {
        let mut reg = FruitRegistry::default();
        reg.observe(0, 1, &obs(0.0, 0.0, 0.8));
        reg.observe(0, 2, &obs(0.1, 0.0, 0.6));
        let sel = reg.select(&|_| false).unwrap();
        assert_eq!(sel.id, 2);
        // single fruit after exclusion
        let sel = reg.select(&|id| id == 2).unwrap();
        assert_eq!(sel.id, 1);
    }

    #[test]
    fn teleporting_fruit_keeps_previous_position() {
        let mut reg = FruitRegistry::default();
        reg.observe(0, 7, &obs(0.0, 0.0, 0.6));
        reg.observe(1, 7, &obs(0.5, 0.0, 0.6)); // 0.5 m jump, above threshold
        let e = reg.get(7).unwrap();
        assert_relative_eq!(e.center.x, 0.0);
        assert_eq!(e.last_seen, 1);
        // a small move is accepted
        reg.observe(2, 7, &obs(0.02, 0.0, 0.6));
        assert_relative_eq!(reg.get(7).unwrap().center.x, 0.02);
    }

    #[test]
    fn registry_expires_stale_ids() {
        let mut reg = FruitRegistry::default();
        reg.observe(0, 1, &obs(0.0, 0.0, 0.6));
        reg.expire(100);
        assert!(reg.get(1).is_some());
        reg.expire(101);
        assert!(reg.get(1).is_none());
        assert!(reg.select(&|_| false).is_none());
    }

    #[test]
    fn tree_not_found_without_pixels() {
        let k = intrinsics();
        let frame = Frame::filled(640, 480, 0, [0, 200, 0], 2.5);
        let err = localize_tree(&frame, &HsvRange::default(), 2.0, 200, &k);
        assert!(matches!(err, Err(PerceptionError::TreeNotFound(0, 200))));
    }

    #[test]
    fn tree_mask_ignores_far_clutter_and_off_hsv_pixels() {
        let k = intrinsics();
        let brown = [110u8, 89, 67];
        let mut frame = Frame::filled(640, 480, 0, [0, 200, 0], 2.5);
        // vertical bar at depth 1.2
        for v in 0..480usize {
            for u in 310..330usize {
                frame.rgb[v * 640 + u] = brown;
                frame.depth[v * 640 + u] = 1.2;
            }
        }
        let base = localize_tree(&frame, &HsvRange::default(), 2.0, 200, &k).unwrap();
        assert_relative_eq!(base.center.z, 1.2, epsilon = 1e-9);
        // in-HSV clutter beyond the depth mask must not shift the result
        let mut cluttered = frame.clone();
        for v in 0..100usize {
            for u in 0..100usize {
                cluttered.rgb[v * 640 + u] = brown;
                cluttered.depth[v * 640 + u] = 2.4;
            }
        }
        let c = localize_tree(&cluttered, &HsvRange::default(), 2.0, 200, &k).unwrap();
        assert_relative_eq!(c.center.x, base.center.x, epsilon = 1e-12);
        assert_relative_eq!(c.center.z, base.center.z, epsilon = 1e-12);
        assert_eq!(c.pixel_count, base.pixel_count);
        // out-of-mask pixel changes are invisible by construction
        let mut repainted = frame.clone();
        for v in 200..250usize {
            for u in 0..200usize {
                repainted.rgb[v * 640 + u] = [255, 0, 255];
            }
        }
        let r = localize_tree(&repainted, &HsvRange::default(), 2.0, 200, &k).unwrap();
        assert_eq!(r.pixel_count, base.pixel_count);
        assert_relative_eq!(r.center.x, base.center.x, epsilon = 1e-12);
    }

    #[test]
    fn reference_colors_fall_on_the_right_side_of_the_mask() {
        let range = HsvRange::default();
        let (h, s, v) = rgb_to_hsv([110, 89, 67]); // trunk brown
        assert!(range.contains(h, s, v), "trunk brown outside mask: {h} {s} {v}");
        let (h, s, v) = rgb_to_hsv([230, 120, 30]); // fruit orange: saturation too high
        assert!(!range.contains(h, s, v));
        let (h, s, v) = rgb_to_hsv([40, 160, 60]); // background green: hue off
        assert!(!range.contains(h, s, v));
    }

    proptest! {
        #[test]
        fn proj_project_roundtrip(
            u in 0.0f64..640.0, v in 0.0f64..480.0, z in 0.05f64..5.0
        ) {
            let k = intrinsics();
            let p = proj(u, v, z, &k).unwrap();
            let (uu, vv) = project(&p, &k);
            prop_assert!((uu - u).abs() < 1e-9);
            prop_assert!((vv - v).abs() < 1e-9);
        }

        #[test]
        fn selection_invariant_under_distance_scaling(
            d1 in 0.2f64..2.0, d2 in 0.2f64..2.0, scale in 0.1f64..10.0
        ) {
            prop_assume!((d1 - d2).abs() > 1e-6);
            let mut reg = FruitRegistry::default();
            reg.observe(0, 1, &obs(0.0, 0.0, d1));
            reg.observe(0, 2, &obs(0.0, 0.0, d2));
            let picked = reg.select(&|_| false).unwrap().id;
            let mut scaled = FruitRegistry::default();
            scaled.observe(0, 1, &obs(0.0, 0.0, d1 * scale));
            scaled.observe(0, 2, &obs(0.0, 0.0, d2 * scale));
            prop_assert_eq!(picked, scaled.select(&|_| false).unwrap().id);
        }
    }
}
