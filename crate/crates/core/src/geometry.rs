//! Circular cone-beam acquisition geometry and sparse view selection.
//!
//! World frame: the source orbits the `z` axis in the `xy` plane. At gantry
//! angle `β` the source sits at `SID·(cos β, sin β, 0)` and the flat detector
//! is centred at `−(SDD − SID)·(cos β, sin β, 0)`, with its `u` axis along
//! `(−sin β, cos β, 0)` and its `v` axis along `z`. Volumes are indexed
//! `(D, H, W) = (z, y, x)`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ratios (denominators) at which the full view set may be thinned.
pub const SUPPORTED_RATIOS: [usize; 5] = [1, 2, 4, 6, 8];

/// User-facing geometry description. All lengths in millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub source_to_isocenter: f64,
    pub source_to_detector: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch_u: f64,
    pub pixel_pitch_v: f64,
    pub n_views: usize,
    /// `(D, H, W)` voxels.
    pub volume_shape: [usize; 3],
    pub voxel_spacing: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            source_to_isocenter: 500.0,
            source_to_detector: 1000.0,
            detector_rows: 128,
            detector_cols: 128,
            pixel_pitch_u: 1.0,
            pixel_pitch_v: 1.0,
            n_views: 360,
            volume_shape: [64, 64, 64],
            voxel_spacing: 1.0,
        }
    }
}

impl GeometryConfig {
    /// The default geometry scaled to a cubic volume of side `n` (detector `2n`).
    pub fn desk(n: usize, n_views: usize) -> Self {
        GeometryConfig {
            detector_rows: 2 * n,
            detector_cols: 2 * n,
            n_views,
            volume_shape: [n, n, n],
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parameter(format!("geometry config: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("geometry config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    pub source_to_isocenter: f64,
    pub source_to_detector: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch_u: f64,
    pub pixel_pitch_v: f64,
    /// Gantry angles in radians, strictly increasing within `[0, 2π)`.
    pub angles: Vec<f64>,
    pub volume_shape: [usize; 3],
    pub voxel_spacing: f64,
}

impl ConeBeamGeometry {
    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    /// Radius of the largest centred cylinder the detector fan covers at every angle.
    pub fn max_fov_radius(&self) -> f64 {
        let u_half = 0.5 * self.detector_cols as f64 * self.pixel_pitch_u;
        let fan_half = (u_half / self.source_to_detector).atan();
        self.source_to_isocenter * fan_half.sin()
    }

    /// Largest half-height covered at the isocentre plane.
    pub fn max_fov_half_height(&self) -> f64 {
        let v_half = 0.5 * self.detector_rows as f64 * self.pixel_pitch_v;
        v_half * self.source_to_isocenter / self.source_to_detector
    }

    /// In-plane radius of the cylinder inscribed in the voxel-centre grid.
    pub fn volume_radius(&self) -> f64 {
        let [_, h, w] = self.volume_shape;
        0.5 * (h.min(w) - 1) as f64 * self.voxel_spacing
    }

    pub fn volume_half_height(&self) -> f64 {
        0.5 * (self.volume_shape[0] - 1) as f64 * self.voxel_spacing
    }

    /// Quadrature weight of each view: half the angular gap to its two
    /// neighbours around the circle. Weights sum to `2π`.
    pub fn angular_weights(&self) -> Vec<f64> {
        let n = self.angles.len();
        if n == 1 {
            return vec![2.0 * PI];
        }
        (0..n)
            .map(|i| {
                let next = if i + 1 < n { self.angles[i + 1] } else { self.angles[0] + 2.0 * PI };
                let prev = if i > 0 { self.angles[i - 1] } else { self.angles[n - 1] - 2.0 * PI };
                0.5 * (next - prev)
            })
            .collect()
    }

    /// Stable content hash of the geometry (hex SHA-256 of its JSON form).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("geometry serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Same hardware and grid with a different angle set.
    pub fn with_angles(&self, angles: Vec<f64>) -> Result<Self> {
        let g = ConeBeamGeometry { angles, ..self.clone() };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.source_to_isocenter,
            self.source_to_detector,
            self.pixel_pitch_u,
            self.pixel_pitch_v,
            self.voxel_spacing,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Parameter("lengths must be positive and finite".into()));
        }
        if self.detector_rows == 0 || self.detector_cols == 0 {
            return Err(Error::Parameter("detector must have at least one pixel".into()));
        }
        if self.volume_shape.contains(&0) {
            return Err(Error::Parameter("volume shape must be positive".into()));
        }
        if self.source_to_detector <= self.source_to_isocenter {
            return Err(Error::Parameter(
                "source-to-detector distance must exceed source-to-isocentre distance".into(),
            ));
        }
        if self.angles.is_empty() {
            return Err(Error::Parameter("at least one view is required".into()));
        }
        let ordered = self.angles.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.angles.iter().all(|a| (0.0..2.0 * PI).contains(a));
        if !ordered || !in_range {
            return Err(Error::Parameter("angles must increase strictly within [0, 2π)".into()));
        }
        let r_max = self.max_fov_radius();
        if self.volume_radius() > r_max {
            return Err(Error::Geometry {
                detail: format!(
                    "volume radius {:.3} mm exceeds the detector fan",
                    self.volume_radius()
                ),
                max_half_extent_mm: r_max,
            });
        }
        let z_max = self.max_fov_half_height();
        if self.volume_half_height() > z_max {
            return Err(Error::Geometry {
                detail: format!(
                    "volume half-height {:.3} mm exceeds the detector cone",
                    self.volume_half_height()
                ),
                max_half_extent_mm: z_max,
            });
        }
        Ok(())
    }
}

/// Build a full-circle geometry with `n_views` uniformly spaced angles.
pub fn make_geometry(config: &GeometryConfig) -> Result<ConeBeamGeometry> {
    if config.n_views == 0 {
        return Err(Error::Parameter("n_views must be positive".into()));
    }
    let step = 2.0 * PI / config.n_views as f64;
    let g = ConeBeamGeometry {
        source_to_isocenter: config.source_to_isocenter,
        source_to_detector: config.source_to_detector,
        detector_rows: config.detector_rows,
        detector_cols: config.detector_cols,
        pixel_pitch_u: config.pixel_pitch_u,
        pixel_pitch_v: config.pixel_pitch_v,
        angles: (0..config.n_views).map(|i| i as f64 * step).collect(),
        volume_shape: config.volume_shape,
        voxel_spacing: config.voxel_spacing,
    };
    g.validate()?;
    Ok(g)
}

/// Every `keep_ratio`-th view of a parent geometry, starting at view 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSubset {
    pub parent: ConeBeamGeometry,
    pub keep_ratio: usize,
    pub indices: Vec<usize>,
}

impl ViewSubset {
    /// The thinned acquisition as a standalone geometry.
    pub fn geometry(&self) -> ConeBeamGeometry {
        ConeBeamGeometry {
            angles: self.indices.iter().map(|&i| self.parent.angles[i]).collect(),
            ..self.parent.clone()
        }
    }
}

pub fn subsample_views(geom: &ConeBeamGeometry, ratio_denominator: usize) -> Result<ViewSubset> {
    if !SUPPORTED_RATIOS.contains(&ratio_denominator) {
        return Err(Error::Parameter(format!(
            "unsupported view ratio 1/{ratio_denominator}; expected one of {SUPPORTED_RATIOS:?}"
        )));
    }
    Ok(ViewSubset {
        parent: geom.clone(),
        keep_ratio: ratio_denominator,
        indices: (0..geom.n_views()).step_by(ratio_denominator).collect(),
    })
}
