use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar voxel grid indexed `(z, y, x)`, slice-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// `(D, H, W)`.
    pub shape: [usize; 3],
    /// Isotropic voxel size in millimetres.
    pub spacing: f64,
    /// World position `(z, y, x)` in mm of the centre of voxel `(0, 0, 0)`,
    /// relative to the isocentre.
    pub origin: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume {
    /// Origin that places the grid centre on the isocentre.
    pub fn centered_origin(shape: [usize; 3], spacing: f64) -> [f64; 3] {
        shape.map(|n| -0.5 * (n as f64 - 1.0) * spacing)
    }

    pub fn zeros(shape: [usize; 3], spacing: f64) -> Self {
        Volume {
            shape,
            spacing,
            origin: Self::centered_origin(shape, spacing),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Centred grid holding `data`.
    pub fn from_data(shape: [usize; 3], spacing: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for a {shape:?} volume",
                data.len()
            )));
        }
        if !(spacing > 0.0) {
            return Err(Error::Parameter(format!("voxel spacing must be positive, got {spacing}")));
        }
        Ok(Volume {
            shape,
            spacing,
            origin: Self::centered_origin(shape, spacing),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// World coordinates `(z, y, x)` of a voxel centre.
    #[inline]
    pub fn position(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        [
            self.origin[0] + z as f64 * self.spacing,
            self.origin[1] + y as f64 * self.spacing,
            self.origin[2] + x as f64 * self.spacing,
        ]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the sub-cube starting at `corner` with edge `size`.
    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if corner[a] + size[a] > self.shape[a] || size[a] == 0 {
                return Err(Error::Shape(format!(
                    "crop {size:?} at {corner:?} leaves volume {:?}",
                    self.shape
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(corner[0] + z, corner[1] + y, corner[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        let origin = [0, 1, 2].map(|a| self.origin[a] + corner[a] as f64 * self.spacing);
        Ok(Volume {
            shape: size,
            spacing: self.spacing,
            origin,
            data,
        })
    }

    /// `[1, 1, D, H, W]` constant tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.shape;
        Tensor::new(&[1, 1, d, h, w], self.data.clone()).expect("volume shape is consistent")
    }

    /// Stack same-shaped volumes into a `[N, 1, D, H, W]` constant tensor.
    pub fn batch_tensor(vols: &[&Volume]) -> Result<Tensor> {
        let first = vols
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        if vols.iter().any(|v| v.shape != first.shape) {
            return Err(Error::Shape("batch volumes differ in shape".into()));
        }
        let [d, h, w] = first.shape;
        let data = vols.iter().flat_map(|v| v.data.iter().copied()).collect();
        Tensor::new(&[vols.len(), 1, d, h, w], data)
    }

    /// Sample `n` of a `[N, 1, D, H, W]` tensor, with this volume's grid.
    pub fn with_tensor_sample(&self, t: &Tensor, n: usize) -> Result<Volume> {
        let s = t.shape();
        if s.len() != 5 || s[1] != 1 || s[2..] != self.shape[..] || n >= s[0] {
            return Err(Error::Shape(format!(
                "tensor {s:?} does not hold sample {n} of a {:?} volume",
                self.shape
            )));
        }
        let m = self.len();
        Ok(Volume {
            data: t.data()[n * m..(n + 1) * m].to_vec(),
            ..self.clone()
        })
    }
}
