//! Analytic phantoms: ellipsoids painted in order, then lesion spheres and
//! vessel tubes on top. Each voxel averages `supersample³` sub-samples so
//! edges carry partial-volume values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Ellipsoid with semi-axes along its own `(z, y, x)` frame, turned by
/// `rotation` radians about the `z` axis. Positions and lengths in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub rotation: f64,
    pub attenuation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub attenuation: f64,
}

/// Cylinder of `radius` around the segment `start → end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub attenuation: f64,
}

/// Cylindrical region every object has to stay inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOfView {
    pub radius: f64,
    pub half_height: f64,
}

impl FieldOfView {
    /// The cylinder inscribed in a centred voxel grid.
    pub fn of_grid(shape: [usize; 3], spacing: f64) -> Self {
        FieldOfView {
            radius: 0.5 * (shape[1].min(shape[2]) - 1) as f64 * spacing,
            half_height: 0.5 * (shape[0] - 1) as f64 * spacing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub ellipsoids: Vec<Ellipsoid>,
    #[serde(default)]
    pub lesions: Vec<Sphere>,
    #[serde(default)]
    pub vessels: Vec<Tube>,
    /// Sub-samples per voxel edge.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    3
}

/// Ground truth plus region masks for lesions and vessels.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub lesion_mask: Vec<bool>,
    pub vessel_mask: Vec<bool>,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dz, dy, dx) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let (ly, lx) = (c * dy - s * dx, s * dy + c * dx);
        let [a, b, d] = self.semi_axes;
        (dz / a).powi(2) + (ly / b).powi(2) + (lx / d).powi(2) <= 1.0
    }

    /// Axis-aligned box containing the ellipsoid (in-plane extent taken as a disc).
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let r = self.semi_axes[1].max(self.semi_axes[2]);
        let ext = [self.semi_axes[0], r, r];
        ([0, 1, 2].map(|k| self.center[k] - ext[k]), [0, 1, 2].map(|k| self.center[k] + ext[k]))
    }

    fn fits(&self, fov: &FieldOfView) -> bool {
        let r_xy = self.center[1].hypot(self.center[2]) + self.semi_axes[1].max(self.semi_axes[2]);
        r_xy <= fov.radius && self.center[0].abs() + self.semi_axes[0] <= fov.half_height
    }
}

impl Sphere {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|k| (p[k] - self.center[k]).powi(2)).sum::<f64>() <= self.radius * self.radius
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        ([0, 1, 2].map(|k| self.center[k] - self.radius), [0, 1, 2].map(|k| self.center[k] + self.radius))
    }

    fn fits(&self, fov: &FieldOfView) -> bool {
        self.center[1].hypot(self.center[2]) + self.radius <= fov.radius
            && self.center[0].abs() + self.radius <= fov.half_height
    }
}

impl Tube {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|k| self.end[k] - self.start[k]);
        let w = [0, 1, 2].map(|k| p[k] - self.start[k]);
        let dd: f64 = d.iter().map(|v| v * v).sum();
        let t = if dd > 0.0 {
            ((0..3).map(|k| w[k] * d[k]).sum::<f64>() / dd).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3).map(|k| (w[k] - t * d[k]).powi(2)).sum::<f64>() <= self.radius * self.radius
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        (
            [0, 1, 2].map(|k| self.start[k].min(self.end[k]) - self.radius),
            [0, 1, 2].map(|k| self.start[k].max(self.end[k]) + self.radius),
        )
    }

    fn fits(&self, fov: &FieldOfView) -> bool {
        [self.start, self.end].iter().all(|p| {
            p[1].hypot(p[2]) + self.radius <= fov.radius && p[0].abs() + self.radius <= fov.half_height
        })
    }
}

impl PhantomSpec {
    pub fn empty(seed: u64) -> Self {
        PhantomSpec {
            seed,
            ellipsoids: Vec::new(),
            lesions: Vec::new(),
            vessels: Vec::new(),
            supersample: default_supersample(),
        }
    }

    pub fn n_ellipsoids(&self) -> usize {
        self.ellipsoids.len()
    }

    /// Seeded thorax-like phantom. Ellipsoids are laid down as body, two
    /// lungs, spine, then alternating inner organs and ribs until
    /// `n_ellipsoids` are placed; one to three dense nodules sit in the lungs
    /// and one or two thin vessels cross the body.
    pub fn random(seed: u64, n_ellipsoids: usize, fov: FieldOfView) -> Self {
        use std::f64::consts::{PI, TAU};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = PhantomSpec::empty(seed);
        if n_ellipsoids == 0 {
            return spec;
        }
        let (r, hz) = (fov.radius, fov.half_height);
        let body_rot = rng.gen_range(-0.15..0.15);
        let body_axes = [
            hz * rng.gen_range(0.85..0.97),
            r * rng.gen_range(0.72..0.85),
            r * rng.gen_range(0.88..0.97),
        ];
        spec.ellipsoids.push(Ellipsoid {
            center: [0.0; 3],
            semi_axes: body_axes,
            rotation: body_rot,
            attenuation: rng.gen_range(0.18..0.25),
        });
        let (bz, by, bx) = (body_axes[0], body_axes[1], body_axes[2]);
        // body frame → world, in-plane only
        let place = |ly: f64, lx: f64| {
            let (s, c) = body_rot.sin_cos();
            (c * ly + s * lx, -s * ly + c * lx)
        };
        let mut lungs = Vec::new();
        for side in [-1.0, 1.0] {
            if spec.ellipsoids.len() == n_ellipsoids {
                break;
            }
            let axes = [bz * rng.gen_range(0.7..0.85), by * rng.gen_range(0.5..0.62), bx * rng.gen_range(0.3..0.38)];
            let (cy, cx) = place(-0.1 * by, side * bx * rng.gen_range(0.42..0.5));
            let lung = Ellipsoid {
                center: [bz * rng.gen_range(-0.08..0.08), cy, cx],
                semi_axes: axes,
                rotation: body_rot + side * rng.gen_range(0.0..0.2),
                attenuation: rng.gen_range(0.02..0.06),
            };
            lungs.push(lung.clone());
            spec.ellipsoids.push(lung);
        }
        if spec.ellipsoids.len() < n_ellipsoids {
            let rad = by * rng.gen_range(0.14..0.18);
            let (cy, cx) = place(by * 0.72, 0.0);
            spec.ellipsoids.push(Ellipsoid {
                center: [0.0, cy, cx],
                semi_axes: [bz * 0.95, rad, rad * rng.gen_range(0.9..1.2)],
                rotation: body_rot,
                attenuation: rng.gen_range(0.6..0.8),
            });
        }
        let mut k = 0;
        while spec.ellipsoids.len() < n_ellipsoids {
            if k % 2 == 0 {
                // organ, well inside the body
                let axes = [bz * rng.gen_range(0.2..0.5), by * rng.gen_range(0.15..0.3), bx * rng.gen_range(0.12..0.25)];
                let (ang, rr) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..0.35f64));
                let (cy, cx) = place(rr * by * ang.sin(), rr * bx * ang.cos());
                spec.ellipsoids.push(Ellipsoid {
                    center: [(bz - axes[0]) * rng.gen_range(-0.7..0.7), cy, cx],
                    semi_axes: axes,
                    rotation: rng.gen_range(0.0..PI),
                    attenuation: rng.gen_range(0.26..0.4),
                });
            } else {
                // rib cross-section just inside the body outline
                let ang = rng.gen_range(0.0..TAU);
                let rad = r * rng.gen_range(0.035..0.05);
                let (ly, lx) = ((by - 2.2 * rad) * ang.sin(), (bx - 2.2 * rad) * ang.cos());
                let (cy, cx) = place(ly, lx);
                let len = bz * rng.gen_range(0.15..0.3);
                spec.ellipsoids.push(Ellipsoid {
                    center: [(bz - len) * rng.gen_range(-0.8..0.8), cy, cx],
                    semi_axes: [len, rad, rad * rng.gen_range(1.2..1.8)],
                    rotation: body_rot - ang,
                    attenuation: rng.gen_range(0.85..1.0),
                });
            }
            k += 1;
        }
        let host = |rng: &mut ChaCha8Rng, margin: f64| -> [f64; 3] {
            if lungs.is_empty() {
                return [0.0; 3];
            }
            let l = &lungs[rng.gen_range(0..lungs.len())];
            let inner = (l.semi_axes[1].min(l.semi_axes[2]) - margin).max(0.0);
            let (ang, rr) = (rng.gen_range(0.0..TAU), inner * rng.gen_range(0.0..0.8f64).sqrt());
            [
                l.center[0] + (l.semi_axes[0] - margin).max(0.0) * rng.gen_range(-0.6..0.6),
                l.center[1] + rr * ang.sin(),
                l.center[2] + rr * ang.cos(),
            ]
        };
        for _ in 0..rng.gen_range(1..=3) {
            let radius = r * rng.gen_range(0.05..0.09);
            let center = host(&mut rng, radius);
            spec.lesions.push(Sphere {
                center,
                radius,
                attenuation: rng.gen_range(0.7..1.0),
            });
        }
        let inner = by.min(bx);
        for _ in 0..rng.gen_range(1..=2) {
            let radius = r * rng.gen_range(0.03..0.05);
            let reach = 0.75 * (inner - radius);
            let ang = rng.gen_range(0.0..TAU);
            let off = reach * rng.gen_range(-0.6..0.6);
            let (py, px) = (off * ang.cos(), -off * ang.sin());
            let half = (reach * reach - off * off).max(0.0).sqrt();
            let zspan = (bz - radius) * 0.8;
            spec.vessels.push(Tube {
                start: [-zspan * rng.gen_range(0.0..1.0), py - half * ang.sin(), px - half * ang.cos()],
                end: [zspan * rng.gen_range(0.0..1.0), py + half * ang.sin(), px + half * ang.cos()],
                radius,
                attenuation: rng.gen_range(0.55..0.75),
            });
        }
        spec
    }

    pub fn validate(&self, fov: &FieldOfView) -> Result<()> {
        if self.supersample == 0 {
            return Err(Error::Spec("supersample must be at least 1".into()));
        }
        let att = self
            .ellipsoids
            .iter()
            .map(|e| e.attenuation)
            .chain(self.lesions.iter().map(|s| s.attenuation))
            .chain(self.vessels.iter().map(|t| t.attenuation));
        for a in att {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Spec(format!("attenuation {a} outside [0, 1]")));
            }
        }
        for (i, e) in self.ellipsoids.iter().enumerate() {
            if e.semi_axes.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Spec(format!("ellipsoid {i} has a non-positive semi-axis")));
            }
            if !e.fits(fov) {
                return Err(Error::Spec(format!(
                    "ellipsoid {i} leaves the field of view (radius {:.3} mm, half-height {:.3} mm)",
                    fov.radius, fov.half_height
                )));
            }
        }
        if let Some(i) = self.lesions.iter().position(|s| !s.fits(fov)) {
            return Err(Error::Spec(format!("lesion {i} leaves the field of view")));
        }
        if let Some(i) = self.vessels.iter().position(|t| !t.fits(fov)) {
            return Err(Error::Spec(format!("vessel {i} leaves the field of view")));
        }
        Ok(())
    }
}

/// Voxelize `spec` on a centred grid. Masks mark voxels at least half covered.
pub fn generate_phantom(spec: &PhantomSpec, shape: [usize; 3], spacing: f64) -> Result<Phantom> {
    if shape.contains(&0) || !(spacing > 0.0) {
        return Err(Error::Shape(format!("bad phantom grid {shape:?} at {spacing} mm")));
    }
    spec.validate(&FieldOfView::of_grid(shape, spacing))?;
    let mut volume = Volume::zeros(shape, spacing);
    let n = volume.len();
    let mut lesion_mask = vec![false; n];
    let mut vessel_mask = vec![false; n];
    let ss = spec.supersample;
    let offsets: Vec<f64> = (0..ss).map(|i| ((i as f64 + 0.5) / ss as f64 - 0.5) * spacing).collect();
    let total = (ss * ss * ss) as f64;
    let half = 0.5 * spacing;
    let touches = |lo: [f64; 3], hi: [f64; 3], c: [f64; 3]| (0..3).all(|k| c[k] + half >= lo[k] && c[k] - half <= hi[k]);
    let e_boxes: Vec<_> = spec.ellipsoids.iter().map(Ellipsoid::bounds).collect();
    let t_boxes: Vec<_> = spec.vessels.iter().map(Tube::bounds).collect();
    let s_boxes: Vec<_> = spec.lesions.iter().map(Sphere::bounds).collect();
    let (mut es, mut ts, mut ls) = (Vec::new(), Vec::new(), Vec::new());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let c = volume.position(z, y, x);
                es.clear();
                es.extend((0..e_boxes.len()).filter(|&i| touches(e_boxes[i].0, e_boxes[i].1, c)));
                ts.clear();
                ts.extend((0..t_boxes.len()).rev().filter(|&i| touches(t_boxes[i].0, t_boxes[i].1, c)));
                ls.clear();
                ls.extend((0..s_boxes.len()).rev().filter(|&i| touches(s_boxes[i].0, s_boxes[i].1, c)));
                if es.is_empty() && ts.is_empty() && ls.is_empty() {
                    continue;
                }
                let (mut acc, mut in_lesion, mut in_vessel) = (0.0, 0usize, 0usize);
                for oz in &offsets {
                    for oy in &offsets {
                        for ox in &offsets {
                            let p = [c[0] + oz, c[1] + oy, c[2] + ox];
                            let mut v = 0.0;
                            for &i in &es {
                                if spec.ellipsoids[i].contains(p) {
                                    v = spec.ellipsoids[i].attenuation;
                                }
                            }
                            if let Some(&i) = ts.iter().find(|&&i| spec.vessels[i].contains(p)) {
                                v = spec.vessels[i].attenuation;
                                in_vessel += 1;
                            }
                            if let Some(&i) = ls.iter().find(|&&i| spec.lesions[i].contains(p)) {
                                v = spec.lesions[i].attenuation;
                                in_lesion += 1;
                            }
                            acc += v;
                        }
                    }
                }
                let i = volume.index(z, y, x);
                volume.data[i] = acc / total;
                lesion_mask[i] = 2 * in_lesion >= ss * ss * ss;
                vessel_mask[i] = 2 * in_vessel >= ss * ss * ss;
            }
        }
    }
    Ok(Phantom {
        volume,
        lesion_mask,
        vessel_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fov(n: usize) -> FieldOfView {
        FieldOfView::of_grid([n; 3], 1.0)
    }

    #[test]
    fn empty_spec_gives_zero_volume() {
        let p = generate_phantom(&PhantomSpec::empty(0), [8; 3], 1.0).unwrap();
        assert!(p.volume.data.iter().all(|&v| v == 0.0));
        assert!(PhantomSpec::random(5, 0, fov(8)).ellipsoids.is_empty());
    }

    #[test]
    fn same_seed_same_phantom() {
        let a = PhantomSpec::random(11, 6, fov(32));
        assert_eq!(a, PhantomSpec::random(11, 6, fov(32)));
        assert_ne!(a, PhantomSpec::random(12, 6, fov(32)));
        let va = generate_phantom(&a, [32; 3], 1.0).unwrap();
        assert_eq!(va, generate_phantom(&a, [32; 3], 1.0).unwrap());
    }

    #[test]
    fn random_specs_are_valid_and_nontrivial() {
        for seed in 0..40 {
            for n in [16, 32, 64] {
                let s = PhantomSpec::random(seed, 8, fov(n));
                s.validate(&fov(n)).unwrap();
                assert_eq!(s.n_ellipsoids(), 8);
                assert!(!s.lesions.is_empty() && !s.vessels.is_empty());
            }
        }
        let p = generate_phantom(&PhantomSpec::random(3, 8, fov(32)), [32; 3], 1.0).unwrap();
        assert!(p.lesion_mask.iter().any(|&m| m));
        assert!(p.vessel_mask.iter().any(|&m| m));
        let (lo, hi) = p.volume.min_max();
        assert!(lo >= 0.0 && hi <= 1.0 && hi > 0.5);
    }

    #[test]
    fn ball_mass_matches_analytic_volume() {
        let (r, mu) = (10.0, 0.4);
        let mut spec = PhantomSpec::empty(0);
        spec.ellipsoids.push(Ellipsoid {
            center: [0.0; 3],
            semi_axes: [r; 3],
            rotation: 0.0,
            attenuation: mu,
        });
        let p = generate_phantom(&spec, [32; 3], 1.0).unwrap();
        let mass: f64 = p.volume.data.iter().sum();
        let analytic = 4.0 / 3.0 * PI * r.powi(3) * mu;
        assert!((mass - analytic).abs() / analytic < 0.01, "{mass} vs {analytic}");
    }

    #[test]
    fn out_of_fov_and_bad_attenuation_are_spec_errors() {
        let mut spec = PhantomSpec::empty(0);
        spec.ellipsoids.push(Ellipsoid {
            center: [0.0, 10.0, 0.0],
            semi_axes: [4.0, 8.0, 8.0],
            rotation: 0.0,
            attenuation: 0.5,
        });
        assert!(matches!(generate_phantom(&spec, [32; 3], 1.0), Err(Error::Spec(_))));
        spec.ellipsoids[0].center = [0.0; 3];
        spec.ellipsoids[0].attenuation = 1.5;
        assert!(matches!(generate_phantom(&spec, [32; 3], 1.0), Err(Error::Spec(_))));
    }

    #[test]
    fn rotation_turns_the_ellipsoid_in_plane() {
        let e = Ellipsoid {
            center: [0.0; 3],
            semi_axes: [2.0, 1.0, 5.0],
            rotation: PI / 2.0,
            attenuation: 1.0,
        };
        assert!(e.contains([0.0, 4.5, 0.0]));
        assert!(!e.contains([0.0, 0.0, 4.5]));
    }
}
