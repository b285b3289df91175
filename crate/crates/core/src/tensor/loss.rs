use super::{Backward, Tensor};
use crate::error::{Error, Result};

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.square().mean())
}

fn class_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim("rank", format!("logits need [N, K, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Softmax over axis 1 of a `[N, K, ...]` tensor, as plain values.
pub fn softmax_channels(logits: &Tensor) -> Result<Vec<f64>> {
    let (n, k, sp) = class_layout(logits.shape())?;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for s in 0..sp {
            let at = |c: usize| (b * k + c) * sp + s;
            let max = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x[at(c)] - max).exp()).sum();
            for c in 0..k {
                out[at(c)] = (x[at(c)] - max).exp() / z;
            }
        }
    }
    Ok(out)
}

struct CrossEntropyBack {
    probs: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    k: usize,
    spatial: usize,
}

impl Backward for CrossEntropyBack {
    fn backward(&self, g: &[f64], _: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let positions = (self.n * self.spatial) as f64;
        let scale = g[0] / positions;
        let mut gx: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for b in 0..self.n {
            for s in 0..self.spatial {
                let label = self.labels[b * self.spatial + s];
                gx[(b * self.k + label) * self.spatial + s] -= scale;
            }
        }
        vec![Some(gx)]
    }
}

/// Mean over positions of `−ln softmax(logits)[label]`, classes on axis 1.
///
/// `labels` holds one class id per position of the `[N, ...]` grid.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k, sp) = class_layout(logits.shape())?;
    if labels.len() != n * sp {
        return Err(Error::Shape(format!(
            "{} labels for {} positions",
            labels.len(),
            n * sp
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index { index: bad, bound: k });
    }
    let probs = softmax_channels(logits)?;
    let x = logits.data();
    let mut total = 0.0;
    for b in 0..n {
        for s in 0..sp {
            let at = |c: usize| (b * k + c) * sp + s;
            let max = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (x[at(c)] - max).exp()).sum::<f64>().ln();
            total += lse - x[at(labels[b * sp + s])];
        }
    }
    drop(x);
    let loss = total / (n * sp) as f64;
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(CrossEntropyBack {
            probs,
            labels: labels.to_vec(),
            n,
            k,
            spatial: sp,
        }),
    ))
}
