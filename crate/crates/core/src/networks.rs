//! Encoders, decoder, code classifier, fusion blocks, patch discriminator and
//! the fixed perceptual feature pyramid.
//!
//! Channel width doubles at every downsampling level: level `l` carries
//! `base_channels · 2^l` channels at `1/2^l` of the input resolution.
//! Residual blocks live at the downsampled levels `1..=levels`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv3d, conv_transpose3d, instance_norm3d, mse, Axis, Checkpoint, CheckpointEntry, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub levels: usize,
    /// Residual blocks per downsampled level, in encoder and decoder alike.
    pub res_blocks: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub leaky_slope: f64,
    pub classifier_hidden: usize,
    /// First-conv kernel of each fusion block, coarsest level first
    /// (`levels + 1` entries).
    pub fusion_kernels: Vec<usize>,
    pub discriminator_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 32,
            levels: 3,
            res_blocks: 2,
            code_dim: 32,
            codebook_size: 256,
            leaky_slope: 0.2,
            classifier_hidden: 64,
            fusion_kernels: vec![3; 4],
            discriminator_channels: 32,
        }
    }
}

impl NetworkConfig {
    /// Small widths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        NetworkConfig {
            base_channels: 8,
            levels: 1,
            res_blocks: 1,
            code_dim: 32,
            codebook_size: 256,
            leaky_slope: 0.2,
            classifier_hidden: 64,
            fusion_kernels: vec![3, 3],
            discriminator_channels: 8,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.code_dim == 0 || self.classifier_hidden == 0 || self.discriminator_channels == 0 {
            return Err(Error::Parameter("channel counts must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Parameter(format!("codebook needs K >= 2, got {}", self.codebook_size)));
        }
        if self.fusion_kernels.len() != self.levels + 1 || self.fusion_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Parameter(format!(
                "fusion_kernels needs {} odd entries, got {:?}",
                self.levels + 1,
                self.fusion_kernels
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Parameter(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Spatial factor between input and feature volume.
    pub fn factor(&self) -> usize {
        1 << self.levels
    }

    /// Shape error unless every extent divides by `2^levels`.
    pub fn check_divisible(&self, shape: &[usize]) -> Result<()> {
        let f = self.factor();
        for (a, &n) in ["depth", "height", "width"].iter().zip(shape) {
            if n % f != 0 {
                let pad = f - n % f;
                return Err(Error::Shape(format!(
                    "{a} {n} is not divisible by {f}; pad by {pad} voxel(s) to {}",
                    n + pad
                )));
            }
        }
        Ok(())
    }
}

/// Named parameter list, visited in a fixed order.
pub type NamedParams = Vec<(String, Tensor)>;

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, slope: f64) -> Tensor {
    let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl Conv {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, padding: usize, slope: f64) -> Self {
        Conv {
            weight: he_normal(rng, &[cout, cin, k, k, k], cin * k * k * k, slope),
            bias: Tensor::param(&[cout], vec![0.0; cout]).unwrap(),
            stride,
            padding,
            transposed: false,
        }
    }

    fn transposed(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, padding: usize, slope: f64) -> Self {
        let fan_in = (cin * k * k * k / (stride * stride * stride)).max(1);
        Conv {
            weight: he_normal(rng, &[cin, cout, k, k, k], fan_in, slope),
            bias: Tensor::param(&[cout], vec![0.0; cout]).unwrap(),
            stride,
            padding,
            transposed: true,
        }
    }

    fn zeroed(cin: usize, cout: usize, k: usize) -> Self {
        Conv {
            weight: Tensor::param(&[cout, cin, k, k, k], vec![0.0; cout * cin * k * k * k]).unwrap(),
            bias: Tensor::param(&[cout], vec![0.0; cout]).unwrap(),
            stride: 1,
            padding: k / 2,
            transposed: false,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.transposed {
            conv_transpose3d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
        } else {
            conv3d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
        }
    }

    fn visit(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(c: usize) -> Self {
        Norm {
            gain: Tensor::param(&[c], vec![1.0; c]).unwrap(),
            bias: Tensor::param(&[c], vec![0.0; c]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        instance_norm3d(x, &self.gain, &self.bias, NORM_EPS)
    }

    fn visit(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Pre-activation residual block: `x + conv(act(norm(conv(act(norm(x))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    norm2: Norm,
    conv2: Conv,
    slope: f64,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, c: usize, slope: f64) -> Self {
        ResBlock {
            norm1: Norm::new(c),
            conv1: Conv::new(rng, c, c, 3, 1, 1, slope),
            norm2: Norm::new(c),
            conv2: Conv::new(rng, c, c, 3, 1, 1, slope),
            slope,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.leaky_relu(self.slope)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.leaky_relu(self.slope)?)?;
        x.add(&h)
    }

    fn visit(&self, prefix: &str, out: &mut NamedParams) {
        self.norm1.visit(&format!("{prefix}.norm1"), out);
        self.conv1.visit(&format!("{prefix}.conv1"), out);
        self.norm2.visit(&format!("{prefix}.norm2"), out);
        self.conv2.visit(&format!("{prefix}.conv2"), out);
    }
}

fn run_blocks(blocks: &[ResBlock], mut x: Tensor) -> Result<Tensor> {
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

/// Convolution (strided or transposed) followed by norm and activation.
#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    norm: Norm,
    res: Vec<ResBlock>,
}

/// Feature volume and per-level skip features (finest first).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub z: Tensor,
    pub skips: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv,
    stages: Vec<Stage>,
    to_code: Conv,
    cfg: NetworkConfig,
}

impl Encoder {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.leaky_slope;
        let conv_in = Conv::new(&mut rng, 1, cfg.channels(0), 3, 1, 1, s);
        let stages = (1..=cfg.levels)
            .map(|l| Stage {
                conv: Conv::new(&mut rng, cfg.channels(l - 1), cfg.channels(l), 3, 2, 1, s),
                norm: Norm::new(cfg.channels(l)),
                res: (0..cfg.res_blocks).map(|_| ResBlock::new(&mut rng, cfg.channels(l), s)).collect(),
            })
            .collect();
        let to_code = Conv::new(&mut rng, cfg.channels(cfg.levels), cfg.code_dim, 1, 1, 0, 0.0);
        Ok(Encoder {
            conv_in,
            stages,
            to_code,
            cfg: cfg.clone(),
        })
    }

    /// `[N, 1, D, H, W]` → `[N, c, D/2^L, H/2^L, W/2^L]` plus skips.
    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        let s = x.shape();
        if s.len() != 5 || s[1] != 1 {
            return Err(Error::dim("rank", format!("encoder input must be [N, 1, D, H, W], got {s:?}")));
        }
        self.cfg.check_divisible(&s[2..])?;
        let slope = self.cfg.leaky_slope;
        let mut h = self.conv_in.forward(x)?.leaky_relu(slope)?;
        let mut skips = vec![h.clone()];
        for st in &self.stages {
            h = st.norm.forward(&st.conv.forward(&h)?)?.leaky_relu(slope)?;
            h = run_blocks(&st.res, h)?;
            skips.push(h.clone());
        }
        Ok(Encoded {
            z: self.to_code.forward(&h)?,
            skips,
        })
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut out = Vec::new();
        self.conv_in.visit(&format!("{prefix}.conv_in"), &mut out);
        for (i, st) in self.stages.iter().enumerate() {
            let p = format!("{prefix}.down{}", i + 1);
            st.conv.visit(&format!("{p}.conv"), &mut out);
            st.norm.visit(&format!("{p}.norm"), &mut out);
            for (j, r) in st.res.iter().enumerate() {
                r.visit(&format!("{p}.res{j}"), &mut out);
            }
        }
        self.to_code.visit(&format!("{prefix}.to_code"), &mut out);
        out
    }

    /// Independent copy with fresh parameter storage.
    pub fn deep_copy(&self) -> Encoder {
        let copy = |c: &Conv| Conv {
            weight: c.weight.deep_clone(),
            bias: c.bias.deep_clone(),
            ..c.clone()
        };
        let norm = |n: &Norm| Norm {
            gain: n.gain.deep_clone(),
            bias: n.bias.deep_clone(),
        };
        let res = |r: &ResBlock| ResBlock {
            norm1: norm(&r.norm1),
            conv1: copy(&r.conv1),
            norm2: norm(&r.norm2),
            conv2: copy(&r.conv2),
            slope: r.slope,
        };
        Encoder {
            conv_in: copy(&self.conv_in),
            stages: self
                .stages
                .iter()
                .map(|st| Stage {
                    conv: copy(&st.conv),
                    norm: norm(&st.norm),
                    res: st.res.iter().map(res).collect(),
                })
                .collect(),
            to_code: copy(&self.to_code),
            cfg: self.cfg.clone(),
        }
    }
}

/// Residual correction `F_D + ξ(concat(F_E, F_D))`, zero at initialization.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    mix: Conv,
    out: Conv,
    slope: f64,
}

impl FusionBlock {
    pub fn forward(&self, f_e: &Tensor, f_d: &Tensor) -> Result<Tensor> {
        if f_e.shape() != f_d.shape() {
            return Err(Error::Shape(format!(
                "fusion inputs differ: encoder {:?}, decoder {:?}",
                f_e.shape(),
                f_d.shape()
            )));
        }
        let h = self.mix.forward(&Tensor::concat_channels(&[f_e, f_d])?)?.leaky_relu(self.slope)?;
        f_d.add(&self.out.forward(&h)?)
    }
}

/// One fusion block per decoder resolution, coarsest first.
#[derive(Clone, Debug)]
pub struct Fusion {
    blocks: Vec<FusionBlock>,
}

impl Fusion {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..=cfg.levels)
            .rev()
            .zip(&cfg.fusion_kernels)
            .map(|(l, &k)| {
                let c = cfg.channels(l);
                FusionBlock {
                    mix: Conv::new(&mut rng, 2 * c, c, k, 1, k / 2, cfg.leaky_slope),
                    out: Conv::zeroed(c, c, 1),
                    slope: cfg.leaky_slope,
                }
            })
            .collect();
        Ok(Fusion { blocks })
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            b.mix.visit(&format!("{prefix}.level{i}.mix"), &mut out);
            b.out.visit(&format!("{prefix}.level{i}.out"), &mut out);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv,
    res_in: Vec<ResBlock>,
    stages: Vec<Stage>,
    conv_out: Conv,
    cfg: NetworkConfig,
}

impl Decoder {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.leaky_slope;
        let top = cfg.channels(cfg.levels);
        let conv_in = Conv::new(&mut rng, cfg.code_dim, top, 3, 1, 1, s);
        let res_in = (0..cfg.res_blocks).map(|_| ResBlock::new(&mut rng, top, s)).collect();
        let stages = (1..=cfg.levels)
            .rev()
            .map(|l| {
                let c = cfg.channels(l - 1);
                let n_res = if l > 1 { cfg.res_blocks } else { 0 };
                Stage {
                    conv: Conv::transposed(&mut rng, cfg.channels(l), c, 4, 2, 1, s),
                    norm: Norm::new(c),
                    res: (0..n_res).map(|_| ResBlock::new(&mut rng, c, s)).collect(),
                }
            })
            .collect();
        let conv_out = Conv::new(&mut rng, cfg.channels(0), 1, 3, 1, 1, 0.0);
        Ok(Decoder {
            conv_in,
            res_in,
            stages,
            conv_out,
            cfg: cfg.clone(),
        })
    }

    /// `[N, c, h, w, d]` → `[N, 1, 2^L h, 2^L w, 2^L d]`; with fusion, each
    /// resolution is corrected from the matching encoder skip features.
    pub fn decode(&self, z_q: &Tensor, fusion: Option<(&Fusion, &[Tensor])>) -> Result<Tensor> {
        let s = z_q.shape();
        if s.len() != 5 || s[1] != self.cfg.code_dim {
            return Err(Error::dim(
                "channel",
                format!("decoder input must be [N, {}, h, w, d], got {s:?}", self.cfg.code_dim),
            ));
        }
        if let Some((f, skips)) = fusion {
            if skips.len() != self.cfg.levels + 1 || f.blocks.len() != self.cfg.levels + 1 {
                return Err(Error::Contract(format!(
                    "fusion needs {} encoder skip features, got {}",
                    self.cfg.levels + 1,
                    skips.len()
                )));
            }
        }
        let slope = self.cfg.leaky_slope;
        let fuse = |i: usize, h: Tensor| -> Result<Tensor> {
            match fusion {
                Some((f, skips)) => f.blocks[i].forward(&skips[self.cfg.levels - i], &h),
                None => Ok(h),
            }
        };
        let mut h = self.conv_in.forward(z_q)?.leaky_relu(slope)?;
        h = run_blocks(&self.res_in, h)?;
        h = fuse(0, h)?;
        for (i, st) in self.stages.iter().enumerate() {
            h = st.norm.forward(&st.conv.forward(&h)?)?.leaky_relu(slope)?;
            h = run_blocks(&st.res, h)?;
            h = fuse(i + 1, h)?;
        }
        self.conv_out.forward(&h)
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut out = Vec::new();
        self.conv_in.visit(&format!("{prefix}.conv_in"), &mut out);
        for (j, r) in self.res_in.iter().enumerate() {
            r.visit(&format!("{prefix}.res_in{j}"), &mut out);
        }
        for (i, st) in self.stages.iter().enumerate() {
            let p = format!("{prefix}.up{}", i + 1);
            st.conv.visit(&format!("{p}.conv"), &mut out);
            st.norm.visit(&format!("{p}.norm"), &mut out);
            for (j, r) in st.res.iter().enumerate() {
                r.visit(&format!("{p}.res{j}"), &mut out);
            }
        }
        self.conv_out.visit(&format!("{prefix}.conv_out"), &mut out);
        out
    }
}

/// Per-voxel code logits from sparse-view features.
#[derive(Clone, Debug)]
pub struct Classifier {
    hidden: Conv,
    logits: Conv,
    slope: f64,
}

impl Classifier {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Classifier {
            hidden: Conv::new(&mut rng, cfg.code_dim, cfg.classifier_hidden, 3, 1, 1, cfg.leaky_slope),
            logits: Conv::new(&mut rng, cfg.classifier_hidden, cfg.codebook_size, 1, 1, 0, 0.0),
            slope: cfg.leaky_slope,
        })
    }

    /// `[N, c, h, w, d]` → `[N, K, h, w, d]`.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        self.logits.forward(&self.hidden.forward(z)?.leaky_relu(self.slope)?)
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut out = Vec::new();
        self.hidden.visit(&format!("{prefix}.hidden"), &mut out);
        self.logits.visit(&format!("{prefix}.logits"), &mut out);
        out
    }
}

/// Most probable class per position of `[N, K, ...]` logits (lowest index on ties).
pub fn argmax_channels(logits: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let s = logits.shape();
    if s.len() < 3 {
        return Err(Error::dim("rank", format!("logits must be [N, K, ...], got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let data = logits.data();
    let mut out = Vec::with_capacity(n * spatial);
    for b in 0..n {
        for p in 0..spatial {
            let mut best = 0;
            for c in 1..k {
                if data[(b * k + c) * spatial + p] > data[(b * k + best) * spatial + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    let mut grid = vec![n];
    grid.extend_from_slice(&s[2..]);
    Ok((out, grid))
}

/// Strided 3D patch classifier: three `k4 s2` stages then a `k3` logit head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv>,
    norms: Vec<Norm>,
    slope: f64,
}

impl Discriminator {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.discriminator_channels;
        let s = cfg.leaky_slope;
        Ok(Discriminator {
            convs: vec![
                Conv::new(&mut rng, 1, d, 4, 2, 1, s),
                Conv::new(&mut rng, d, 2 * d, 4, 2, 1, s),
                Conv::new(&mut rng, 2 * d, 4 * d, 4, 2, 1, s),
                Conv::new(&mut rng, 4 * d, 1, 3, 1, 1, 0.0),
            ],
            norms: vec![Norm::new(2 * d), Norm::new(4 * d)],
            slope: s,
        })
    }

    /// `[N, 1, D, H, W]` → `[N, 1, D/8, H/8, W/8]` real-vs-fake logits.
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.convs[0].forward(x)?.leaky_relu(self.slope)?;
        for i in 1..3 {
            h = self.norms[i - 1].forward(&self.convs[i].forward(&h)?)?.leaky_relu(self.slope)?;
        }
        self.convs[3].forward(&h)
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), &mut out);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.visit(&format!("{prefix}.norm{}", i + 1), &mut out);
        }
        out
    }
}

/// Discriminator loss `softplus(−D(real)) + softplus(D(fake))`, averaged.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    real_logits.neg().softplus().mean().add(&fake_logits.softplus().mean())
}

/// Non-saturating generator loss `−log σ(D(fake)) = softplus(−D(fake))`.
pub fn generator_adversarial_loss(fake_logits: &Tensor) -> Tensor {
    fake_logits.neg().softplus().mean()
}

/// Fixed random 2D convolution pyramid with three feature taps.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    weights: Vec<Tensor>,
    strides: Vec<usize>,
    slope: f64,
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = [(1, 8, 1), (8, 16, 2), (16, 32, 2)];
        let weights = layout
            .iter()
            .map(|&(ci, co, _)| {
                let w = he_normal(&mut rng, &[co, ci, 1, 3, 3], ci * 9, 0.2);
                w.set_requires_grad(false);
                w
            })
            .collect();
        PerceptualExtractor {
            weights,
            strides: layout.iter().map(|l| l.2).collect(),
            slope: 0.2,
        }
    }

    /// Feature taps of `[N, 1, 1, A, B]` planes.
    pub fn features(&self, plane: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = Vec::with_capacity(self.weights.len());
        let mut h = plane.clone();
        for (w, &s) in self.weights.iter().zip(&self.strides) {
            h = conv2d(&h, w, None, s, 1)?.leaky_relu(self.slope)?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    pub fn checksum(&self) -> String {
        let named: NamedParams = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("perceptual.conv{i}.weight"), w.clone()))
            .collect();
        checksum(&named)
    }
}

/// Plane positions `(axial, coronal, sagittal)` drawn from `seed`.
pub fn plane_positions(shape: &[usize], seed: u64) -> [usize; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.gen_range(0..shape[2]), rng.gen_range(0..shape[3]), rng.gen_range(0..shape[4])]
}

/// Sum over three orthogonal planes and every tap of the feature MSE.
pub fn perceptual_loss(a: &Tensor, b: &Tensor, phi: &PerceptualExtractor, seed: u64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("perceptual inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s = a.shape();
    if s.len() != 5 || s[1] != 1 || s[2..].contains(&0) {
        return Err(Error::dim("rank", format!("perceptual loss needs [N, 1, D, H, W] volumes, got {s:?}")));
    }
    let pos = plane_positions(s, seed);
    let mut total: Option<Tensor> = None;
    for (axis, &p) in Axis::ALL.iter().zip(&pos) {
        let fa = phi.features(&a.select_plane(*axis, p)?)?;
        let fb = phi.features(&b.select_plane(*axis, p)?)?;
        for (x, y) in fa.iter().zip(&fb) {
            let term = mse(x, y)?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("three planes"))
}

/// SHA-256 over names, shapes and little-endian values of parameters.
pub fn checksum(params: &NamedParams) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn to_checkpoint_entries(params: &NamedParams) -> Vec<CheckpointEntry> {
    params
        .iter()
        .map(|(name, t)| CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        })
        .collect()
}

/// Copy stored values into `params`; every name must be present with its shape.
pub fn load_params(params: &NamedParams, ckpt: &Checkpoint) -> Result<()> {
    for (name, t) in params {
        let e = ckpt
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter `{name}`")))?;
        if e.shape != t.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?} in checkpoint, {:?} in model",
                e.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&e.data);
    }
    Ok(())
}

pub fn set_trainable(params: &NamedParams, flag: bool) {
    for (_, t) in params {
        t.set_requires_grad(flag);
        if !flag {
            t.zero_grad();
        }
    }
}
