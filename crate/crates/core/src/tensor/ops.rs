use super::{numel, Backward, Tensor};
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "all",
            format!("{what}: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

struct AddBack;
impl Backward for AddBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct SubBack;
impl Backward for SubBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

struct MulBack;
impl Backward for MulBack {
    fn backward(&self, g: &[f64], p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (p[0].data(), p[1].data());
        let ga = if p[0].requires_grad() {
            Some(g.iter().zip(b.iter()).map(|(g, b)| g * b).collect())
        } else {
            None
        };
        let gb = if p[1].requires_grad() {
            Some(g.iter().zip(a.iter()).map(|(g, a)| g * a).collect())
        } else {
            None
        };
        vec![ga, gb]
    }
}

struct ScaleBack(f64);
impl Backward for ScaleBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct IdentityBack;
impl Backward for IdentityBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// Elementwise rule `dy/dx = f'(x, y)`.
struct PointwiseBack {
    output: Vec<f64>,
    deriv: fn(f64, f64, f64) -> f64,
    param: f64,
}
impl Backward for PointwiseBack {
    fn backward(&self, g: &[f64], p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let x = p[0].data();
        vec![Some(
            g.iter()
                .zip(x.iter())
                .zip(&self.output)
                .map(|((g, &x), &y)| g * (self.deriv)(x, y, self.param))
                .collect(),
        )]
    }
}

struct SumBack {
    n: usize,
    scale: f64,
}
impl Backward for SumBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; self.n])]
    }
}

struct ConcatBack {
    // (channels, inner) per input; outer = N
    splits: Vec<usize>,
    outer: usize,
    inner: usize,
}
impl Backward for ConcatBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.splits.iter().sum();
        let mut out = Vec::with_capacity(self.splits.len());
        let mut offset = 0;
        for &c in &self.splits {
            let mut gi = Vec::with_capacity(self.outer * c * self.inner);
            for n in 0..self.outer {
                let start = (n * total + offset) * self.inner;
                gi.extend_from_slice(&g[start..start + c * self.inner]);
            }
            out.push(Some(gi));
            offset += c;
        }
        out
    }
}

/// Which volume axis is held fixed when extracting an orthogonal plane from
/// a `[N, C, D, H, W]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Fix depth: plane spans (H, W).
    Axial,
    /// Fix height: plane spans (D, W).
    Coronal,
    /// Fix width: plane spans (D, H).
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    fn extent(self, dhw: [usize; 3]) -> usize {
        match self {
            Axis::Axial => dhw[0],
            Axis::Coronal => dhw[1],
            Axis::Sagittal => dhw[2],
        }
    }
}

struct PlaneBack {
    // flat source index per output element
    map: Vec<usize>,
    src_len: usize,
}
impl Backward for PlaneBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let mut gi = vec![0.0; self.src_len];
        for (&s, &gv) in self.map.iter().zip(g) {
            gi[s] += gv;
        }
        vec![Some(gi)]
    }
}

struct StraightThroughBack;
impl Backward for StraightThroughBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), None]
    }
}

struct GatherBack {
    indices: Vec<usize>,
    batch: usize,
    code_dim: usize,
    spatial: usize,
    book_len: usize,
}
impl Backward for GatherBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let mut gb = vec![0.0; self.book_len];
        for n in 0..self.batch {
            for s in 0..self.spatial {
                let code = self.indices[n * self.spatial + s];
                for ch in 0..self.code_dim {
                    gb[code * self.code_dim + ch] +=
                        g[(n * self.code_dim + ch) * self.spatial + s];
                }
            }
        }
        vec![Some(gb)]
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(AddBack),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(SubBack),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(MulBack),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(ScaleBack(factor)),
        )
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], Box::new(IdentityBack))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    fn pointwise(&self, f: fn(f64, f64) -> f64, deriv: fn(f64, f64, f64) -> f64, param: f64) -> Tensor {
        let output: Vec<f64> = self.data().iter().map(|&x| f(x, param)).collect();
        let op = PointwiseBack {
            output: if self.requires_grad() { output.clone() } else { Vec::new() },
            deriv,
            param,
        };
        Tensor::from_op(self.shape().to_vec(), output, vec![self.clone()], Box::new(op))
    }

    pub fn square(&self) -> Tensor {
        self.pointwise(|x, _| x * x, |x, _, _| 2.0 * x, 0.0)
    }

    /// `x` where `x ≥ 0`, `slope · x` elsewhere.
    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Parameter(format!("leaky relu slope {slope} outside [0, 1)")));
        }
        Ok(self.pointwise(
            |x, s| if x >= 0.0 { x } else { s * x },
            |x, _, s| if x >= 0.0 { 1.0 } else { s },
            slope,
        ))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.pointwise(
            |x, _| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y, _| y * (1.0 - y),
            0.0,
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.pointwise(
            |x, _| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _, _| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            0.0,
        )
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(SumBack { n: self.numel(), scale: 1.0 }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(SumBack { n, scale: 1.0 / n as f64 }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(IdentityBack),
        ))
    }

    /// Concatenate along axis 1. All inputs must agree on every other axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = first.shape();
        if s0.len() < 2 {
            return Err(Error::dim("1", "concat needs at least 2 axes"));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::dim("1", format!("concat {:?} with {:?}", s0, s)));
            }
        }
        let outer = s0[0];
        let inner: usize = s0[2..].iter().product();
        let splits: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total: usize = splits.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for n in 0..outer {
            for (g, &c) in guards.iter().zip(&splits) {
                data.extend_from_slice(&g[n * c * inner..(n + 1) * c * inner]);
            }
        }
        drop(guards);
        let mut shape = s0.to_vec();
        shape[1] = total;
        Ok(Tensor::from_op(
            shape,
            data,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(ConcatBack { splits, outer, inner }),
        ))
    }

    /// Extract the plane at `index` orthogonal to `axis` from a
    /// `[N, C, D, H, W]` tensor, as a `[N, C, 1, A, B]` tensor.
    pub fn select_plane(&self, axis: Axis, index: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 5 {
            return Err(Error::dim("rank", format!("expected 5 axes, got {s:?}")));
        }
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let extent = axis.extent([d, h, w]);
        if index >= extent {
            return Err(Error::Index { index, bound: extent });
        }
        let (a, b) = match axis {
            Axis::Axial => (h, w),
            Axis::Coronal => (d, w),
            Axis::Sagittal => (d, h),
        };
        let mut map = Vec::with_capacity(n * c * a * b);
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for i in 0..a {
                for j in 0..b {
                    let (z, y, x) = match axis {
                        Axis::Axial => (index, i, j),
                        Axis::Coronal => (i, index, j),
                        Axis::Sagittal => (i, j, index),
                    };
                    map.push(base + (z * h + y) * w + x);
                }
            }
        }
        let src = self.data();
        let data = map.iter().map(|&k| src[k]).collect();
        drop(src);
        Ok(Tensor::from_op(
            vec![n, c, 1, a, b],
            data,
            vec![self.clone()],
            Box::new(PlaneBack { map, src_len: self.numel() }),
        ))
    }

    /// Forward value of `quantized`, backward identity into `self`.
    ///
    /// `quantized` receives no gradient through this edge.
    pub fn straight_through(&self, quantized: &Tensor) -> Result<Tensor> {
        same_shape(self, quantized, "straight_through")?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            quantized.to_vec(),
            vec![self.clone(), quantized.clone()],
            Box::new(StraightThroughBack),
        ))
    }

    /// Look up rows of a `[K, c]` table for every position of an
    /// `[N, h, w, d]` index grid, producing `[N, c, h, w, d]`.
    ///
    /// Differentiable with respect to the table (scatter-add).
    pub fn gather_codes(&self, indices: &[usize], grid: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim("rank", format!("code table must be [K, c], got {s:?}")));
        }
        let (k, c) = (s[0], s[1]);
        if grid.is_empty() || numel(grid) != indices.len() {
            return Err(Error::Shape(format!(
                "index grid {grid:?} does not hold {} indices",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Index { index: bad, bound: k });
        }
        let batch = grid[0];
        let spatial: usize = grid[1..].iter().product();
        let table = self.data();
        let mut data = vec![0.0; batch * c * spatial];
        for nb in 0..batch {
            for sp in 0..spatial {
                let code = indices[nb * spatial + sp];
                for ch in 0..c {
                    data[(nb * c + ch) * spatial + sp] = table[code * c + ch];
                }
            }
        }
        drop(table);
        let mut shape = vec![batch, c];
        shape.extend_from_slice(&grid[1..]);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(GatherBack {
                indices: indices.to_vec(),
                batch,
                code_dim: c,
                spatial,
                book_len: k * c,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_records_nothing() {
        let w = Tensor::param(&[2], vec![1.0, -2.0]).unwrap();
        let y = crate::tensor::no_grad(|| w.scale(3.0));
        assert!(!y.requires_grad());
        assert_eq!(y.to_vec(), vec![3.0, -6.0]);
        assert!(w.scale(3.0).requires_grad());
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[3], vec![0.0, 3.0, -2.0]).unwrap();
        let y = x.leaky_relu(0.2).unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 3.0);
        assert!((y[2] - (-0.4)).abs() < 1e-15);
        assert!(x.leaky_relu(1.0).is_err());
    }

    #[test]
    fn loss_equal_to_input_has_unit_gradient() {
        let x = Tensor::param(&[1], vec![2.5]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_identity() {
        let vals = vec![1.0, -2.0, 0.5, 4.0];
        let x = Tensor::param(&[4], vals.clone()).unwrap();
        x.square().sum().scale(0.5).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vals);
    }

    #[test]
    fn second_backward_accumulates() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.square().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_accumulate() {
        let c = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let x = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        x.mul(&c).unwrap().sum().backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn diamond_graph_visits_each_node_once() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let a = x.scale(2.0);
        let b = a.mul(&a).unwrap(); // 4x^2
        let c = b.add(&a).unwrap(); // 4x^2 + 2x
        c.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0 * 3.0 + 2.0]);
    }

    #[test]
    fn concat_and_plane_shapes() {
        let a = Tensor::new(&[1, 1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::new(&[1, 2, 2, 2, 2], (0..16).map(f64::from).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2, 2]);
        assert_eq!(&c.data()[8..16], &b.data()[0..8]);
        let p = a.select_plane(Axis::Sagittal, 1).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 2, 2]);
        assert_eq!(p.to_vec(), vec![1.0, 3.0, 5.0, 7.0]);
        assert!(a.select_plane(Axis::Axial, 2).is_err());
    }

    #[test]
    fn gather_scatters_gradient_into_rows() {
        let table = Tensor::param(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let out = table.gather_codes(&[2, 0, 2], &[1, 3]).unwrap();
        assert_eq!(out.shape(), &[1, 2, 3]);
        assert_eq!(out.to_vec(), vec![20.0, 0.0, 20.0, 21.0, 1.0, 21.0]);
        out.sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
