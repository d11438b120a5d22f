//! Frame-pair file format.
//!
//! A frame `k` is the pair `frame_<k:06>_rgb.png` (8-bit RGB) and
//! `frame_<k:06>_depth.png` (16-bit grayscale, millimeters, 0 =
//! invalid) in the same directory.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use thiserror::Error;

use super::Frame;

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("rgb image is {rgb_w}x{rgb_h} but depth image is {depth_w}x{depth_h}")]
    SizeMismatch {
        rgb_w: u32,
        rgb_h: u32,
        depth_w: u32,
        depth_h: u32,
    },
}

pub fn rgb_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("frame_{index:06}_rgb.png"))
}

pub fn depth_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("frame_{index:06}_depth.png"))
}

/// Write the RGB/depth pair for `frame` into `dir`. Depth saturates at
/// the 16-bit millimeter range (~65.5 m); non-finite or non-positive
/// depths store as 0 (invalid).
pub fn save_frame(dir: &Path, frame: &Frame) -> Result<(), FrameIoError> {
    let (w, h) = (frame.width as u32, frame.height as u32);
    let mut rgb = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w, h);
    for (i, px) in frame.rgb.iter().enumerate() {
        rgb.put_pixel(i as u32 % w, i as u32 / w, Rgb(*px));
    }
    let mut depth = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w, h);
    for (i, &d) in frame.depth.iter().enumerate() {
        let mm = if d.is_finite() && d > 0.0 {
            (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
        } else {
            0
        };
        depth.put_pixel(i as u32 % w, i as u32 / w, Luma([mm]));
    }
    rgb.save(rgb_path(dir, frame.index))?;
    depth.save(depth_path(dir, frame.index))?;
    Ok(())
}

/// Load the frame pair with the given index from `dir`.
pub fn load_frame(dir: &Path, index: u64) -> Result<Frame, FrameIoError> {
    let rgb = image::open(rgb_path(dir, index))?.into_rgb8();
    let depth = image::open(depth_path(dir, index))?.into_luma16();
    if rgb.dimensions() != depth.dimensions() {
        let (rgb_w, rgb_h) = rgb.dimensions();
        let (depth_w, depth_h) = depth.dimensions();
        return Err(FrameIoError::SizeMismatch {
            rgb_w,
            rgb_h,
            depth_w,
            depth_h,
        });
    }
    let (w, h) = rgb.dimensions();
    Ok(Frame {
        rgb: rgb.pixels().map(|p| p.0).collect(),
        depth: depth.pixels().map(|p| p.0[0] as f64 / 1000.0).collect(),
        width: w as usize,
        height: h as usize,
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip_preserves_rgb_and_mm_depth() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = Frame::filled(8, 6, 42, [10, 20, 30], 1.234);
        f.rgb[13] = [200, 100, 50];
        f.depth[13] = 0.456;
        f.depth[14] = 0.0; // invalid stays invalid
        f.depth[15] = f64::NAN;
        save_frame(dir.path(), &f).unwrap();
        let g = load_frame(dir.path(), 42).unwrap();
        assert_eq!(g.width, 8);
        assert_eq!(g.height, 6);
        assert_eq!(g.index, 42);
        assert_eq!(g.rgb, f.rgb);
        assert_eq!(g.depth[13], 0.456);
        assert_eq!(g.depth[0], 1.234);
        assert_eq!(g.depth[14], 0.0);
        assert_eq!(g.depth[15], 0.0);
    }

    #[test]
    fn depth_quantization_is_one_millimeter() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = Frame::filled(2, 2, 0, [0, 0, 0], 0.5);
        f.depth[0] = 0.50049; // rounds to 500 mm
        f.depth[1] = 0.50051; // rounds to 501 mm
        save_frame(dir.path(), &f).unwrap();
        let g = load_frame(dir.path(), 0).unwrap();
        assert_eq!(g.depth[0], 0.500);
        assert_eq!(g.depth[1], 0.501);
    }

    #[test]
    fn missing_pair_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_frame(dir.path(), 7).is_err());
    }
}
