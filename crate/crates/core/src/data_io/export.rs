//! Grayscale PNG slices for visual inspection.

use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::tensor::Axis;
use crate::volume::Volume;

/// Display window as centre/width; `None` spans the volume's own range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplayWindow {
    pub level: f64,
    pub width: f64,
}

/// 8-bit rendering of one plane: axial `(H, W)` at depth `index`,
/// coronal `(D, W)` at row `index`, sagittal `(D, H)` at column `index`.
pub fn render_slice(vol: &Volume, axis: Axis, index: usize, window: Option<DisplayWindow>) -> Result<GrayImage> {
    let [d, h, w] = vol.shape;
    let (bound, rows, cols) = match axis {
        Axis::Axial => (d, h, w),
        Axis::Coronal => (h, d, w),
        Axis::Sagittal => (w, d, h),
    };
    if index >= bound {
        return Err(Error::Index { index, bound });
    }
    let win = window.unwrap_or_else(|| {
        let (lo, hi) = vol.min_max();
        DisplayWindow {
            level: 0.5 * (lo + hi),
            width: (hi - lo).max(f64::MIN_POSITIVE),
        }
    });
    if !(win.width > 0.0) {
        return Err(Error::Parameter(format!("window width must be positive, got {}", win.width)));
    }
    let lo = win.level - 0.5 * win.width;
    Ok(GrayImage::from_fn(cols as u32, rows as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        let v = match axis {
            Axis::Axial => vol.get(index, r, c),
            Axis::Coronal => vol.get(r, index, c),
            Axis::Sagittal => vol.get(r, c, index),
        };
        image::Luma([((v - lo) / win.width * 255.0).round().clamp(0.0, 255.0) as u8])
    }))
}

pub fn export_slice(vol: &Volume, axis: Axis, index: usize, window: Option<DisplayWindow>, path: &Path) -> Result<()> {
    render_slice(vol, axis, index, window)?
        .save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_have_expected_sizes_and_window() {
        let v = Volume::from_data([2, 3, 4], 1.0, (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(render_slice(&v, Axis::Axial, 1, None).unwrap().dimensions(), (4, 3));
        assert_eq!(render_slice(&v, Axis::Coronal, 0, None).unwrap().dimensions(), (4, 2));
        assert_eq!(render_slice(&v, Axis::Sagittal, 3, None).unwrap().dimensions(), (3, 2));
        let img = render_slice(&v, Axis::Axial, 1, None).unwrap();
        assert_eq!(img.get_pixel(3, 2).0[0], 255);
        let img = render_slice(&v, Axis::Axial, 0, None).unwrap();
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert!(render_slice(&v, Axis::Axial, 2, None).is_err());
    }

    #[test]
    fn png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        export_slice(&Volume::zeros([1, 4, 4], 1.0), Axis::Axial, 0, None, &p).unwrap();
        assert!(image::open(&p).is_ok());
    }
}
