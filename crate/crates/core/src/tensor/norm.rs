use super::{Backward, Tensor};
use crate::error::{Error, Result};

struct InstanceNormBack {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    spatial: usize,
}

impl Backward for InstanceNormBack {
    fn backward(&self, g: &[f64], p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let (c, m) = (self.channels, self.spatial);
        let groups = self.inv_std.len();
        let gain = p[1].data();
        let mut gx = p[0].requires_grad().then(|| vec![0.0; g.len()]);
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for grp in 0..groups {
            let ch = grp % c;
            let gs = &g[grp * m..][..m];
            let xh = &self.normalized[grp * m..][..m];
            let sum_g: f64 = gs.iter().sum();
            let sum_gx: f64 = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
            gg[ch] += sum_gx;
            gb[ch] += sum_g;
            if let Some(gx) = gx.as_mut() {
                let k = gain[ch] * self.inv_std[grp] / m as f64;
                for ((o, &gv), &xv) in gx[grp * m..][..m].iter_mut().zip(gs).zip(xh) {
                    *o = k * (m as f64 * gv - sum_g - xv * sum_gx);
                }
            }
        }
        vec![
            gx,
            p[1].requires_grad().then_some(gg),
            p[2].requires_grad().then_some(gb),
        ]
    }
}

/// Per-sample, per-channel normalization of `[N, C, ...]` followed by a
/// channel-wise affine map. Variance is the biased (population) estimate.
pub fn instance_norm3d(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Parameter(format!("instance norm eps must be positive, got {eps}")));
    }
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::dim("rank", format!("instance norm needs [N, C, ...], got {s:?}")));
    }
    let c = s[1];
    let m: usize = s[2..].iter().product();
    if m < 2 {
        return Err(Error::dim("spatial", "instance norm needs more than one voxel"));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::dim("channel", format!("affine parameters must have shape [{c}]")));
    }
    let groups = s[0] * c;
    let xd = x.data();
    let (gd, bd) = (gain.data(), bias.data());
    let mut normalized = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; groups];
    let mut out = vec![0.0; xd.len()];
    for grp in 0..groups {
        let ch = grp % c;
        let xs = &xd[grp * m..][..m];
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[grp] = is;
        for ((n, o), &v) in normalized[grp * m..][..m]
            .iter_mut()
            .zip(&mut out[grp * m..][..m])
            .zip(xs)
        {
            *n = (v - mean) * is;
            *o = gd[ch] * *n + bd[ch];
        }
    }
    drop((xd, gd, bd));
    Ok(Tensor::from_op(
        s.to_vec(),
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(InstanceNormBack {
            normalized,
            inv_std,
            channels: c,
            spatial: m,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check_many;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::full(&[1, 1, 2, 2, 2], 3.5);
        let y = instance_norm3d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_standardization() {
        // mean 2.5, population variance 1.25
        let x = Tensor::new(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = instance_norm3d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), 1e-12).unwrap();
        let sd = 1.25f64.sqrt();
        let expect = [-1.5 / sd, -0.5 / sd, 0.5 / sd, 1.5 / sd];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gain_returns_bias() {
        let x = Tensor::new(&[1, 2, 1, 1, 2], vec![1.0, 5.0, -2.0, 7.0]).unwrap();
        let y = instance_norm3d(&x, &Tensor::zeros(&[2]), &Tensor::new(&[2], vec![0.3, -0.7]).unwrap(), 1e-5)
            .unwrap();
        assert_eq!(y.to_vec(), vec![0.3, 0.3, -0.7, -0.7]);
    }

    #[test]
    fn rejects_bad_eps_and_single_voxel() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let (g, b) = (Tensor::full(&[1], 1.0), Tensor::zeros(&[1]));
        assert!(matches!(instance_norm3d(&x, &g, &b, 0.0), Err(Error::Parameter(_))));
        assert!(instance_norm3d(&Tensor::zeros(&[1, 1, 1, 1, 1]), &g, &b, 1e-5).is_err());
    }

    #[test]
    fn gradient_check() {
        let x = Tensor::param(&[2, 2, 2, 2, 3], (0..48).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect()).unwrap();
        let g = Tensor::param(&[2], vec![1.3, -0.4]).unwrap();
        let b = Tensor::param(&[2], vec![0.2, 0.1]).unwrap();
        let w = Tensor::new(&[2, 2, 2, 2, 3], (0..48).map(|i| (i as f64 * 0.17).sin()).collect()).unwrap();
        let err = finite_difference_check_many(
            || Ok(instance_norm3d(&x, &g, &b, 1e-5)?.mul(&w)?.sum()),
            &[&x, &g, &b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
