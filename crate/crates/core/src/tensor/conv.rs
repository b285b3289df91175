//! 3D convolution by column unfolding and dense matrix products.
//!
//! Forward, input-gradient and weight-gradient passes share one geometry
//! description; each unfolds a depth slab of the input into a column matrix
//! (`im2col`) and hands the contraction to a GEMM kernel.

use super::{Backward, Tensor};
use crate::error::{Error, Result};

/// Per-axis stride and zero padding, ordered (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvParams {
    pub fn cube(stride: usize, padding: usize) -> Self {
        ConvParams {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// In-plane parameters for `[N, C, 1, H, W]` images.
    pub fn planar(stride: usize, padding: usize) -> Self {
        ConvParams {
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        }
    }
}

const AXES: [&str; 3] = ["depth", "height", "width"];

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    p: ConvParams,
}

impl Geometry {
    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }
    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }
    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output positions `o` along `axis` whose source `o·s + k − p` is inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.p.stride[axis];
        let pad = self.p.padding[axis];
        let in_len = self.input[axis];
        let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
        let hi = if in_len + pad > k {
            ((in_len - 1 + pad - k) / s + 1).min(self.output[axis])
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> usize {
        o * self.p.stride[axis] + k - self.p.padding[axis]
    }
}

fn check_rank5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(Error::dim("rank", format!("{what} must have 5 axes, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

fn check_params(p: &ConvParams) -> Result<()> {
    for (a, &s) in p.stride.iter().enumerate() {
        if s == 0 {
            return Err(Error::dim(AXES[a], "stride must be at least 1"));
        }
    }
    Ok(())
}

/// Visit every (output-row, input-row) pair coupled through kernel tap
/// `(kd, kh, kw)`, restricted to output depths `od_range`.
///
/// `f(out_row_offset, in_row_offset, ow_lo, ow_hi, iw_start)`.
#[inline]
fn for_each_row_pair(
    g: &Geometry,
    [kd, kh, kw]: [usize; 3],
    od_range: (usize, usize),
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let (od_lo, od_hi) = g.valid(0, kd);
    let (od_lo, od_hi) = (od_lo.max(od_range.0), od_hi.min(od_range.1));
    let (oh_lo, oh_hi) = g.valid(1, kh);
    let (ow_lo, ow_hi) = g.valid(2, kw);
    if ow_lo >= ow_hi {
        return;
    }
    let iw_start = g.src(2, ow_lo, kw);
    for od in od_lo..od_hi {
        let id = g.src(0, od, kd);
        for oh in oh_lo..oh_hi {
            let ih = g.src(1, oh, kh);
            let orow = (od * g.output[1] + oh) * g.output[2];
            let irow = (id * g.input[1] + ih) * g.input[2];
            f(orow, irow, ow_lo, ow_hi, iw_start);
        }
    }
}

/// Column buffers are processed in slabs of output depth so that a slab
/// holds at most this many entries.
const COLUMN_BUDGET: usize = 1 << 20;

fn depth_slabs(g: &Geometry) -> impl Iterator<Item = (usize, usize)> {
    let rows = g.c_in * g.kernel_volume();
    let plane = g.output[1] * g.output[2];
    let per = (COLUMN_BUDGET / (rows * plane).max(1)).max(1);
    let depth = g.output[0];
    (0..depth).step_by(per).map(move |lo| (lo, (lo + per).min(depth)))
}

fn kernel_taps(g: &Geometry) -> impl Iterator<Item = [usize; 3]> + '_ {
    (0..g.kernel[0]).flat_map(move |kd| {
        (0..g.kernel[1]).flat_map(move |kh| (0..g.kernel[2]).map(move |kw| [kd, kh, kw]))
    })
}

/// Unfold one sample into `col[(ci, tap), o]` for output depths in `slab`.
fn im2col(g: &Geometry, sample: &[f64], slab: (usize, usize), col: &mut [f64]) {
    let is = g.in_spatial();
    let plane = g.output[1] * g.output[2];
    let cols = (slab.1 - slab.0) * plane;
    let offset = slab.0 * plane;
    let sw = g.p.stride[2];
    col[..g.c_in * g.kernel_volume() * cols].fill(0.0);
    for ci in 0..g.c_in {
        let in_ch = &sample[ci * is..][..is];
        for (t, tap) in kernel_taps(g).enumerate() {
            let row = &mut col[(ci * g.kernel_volume() + t) * cols..][..cols];
            for_each_row_pair(g, tap, slab, |orow, irow, lo, hi, iw| {
                let dst = &mut row[orow - offset + lo..orow - offset + hi];
                if sw == 1 {
                    dst.copy_from_slice(&in_ch[irow + iw..irow + iw + dst.len()]);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = in_ch[irow + iw + j * sw];
                    }
                }
            });
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into one sample.
fn col2im(g: &Geometry, col: &[f64], slab: (usize, usize), sample: &mut [f64]) {
    let is = g.in_spatial();
    let plane = g.output[1] * g.output[2];
    let cols = (slab.1 - slab.0) * plane;
    let offset = slab.0 * plane;
    let sw = g.p.stride[2];
    for ci in 0..g.c_in {
        let in_ch = &mut sample[ci * is..][..is];
        for (t, tap) in kernel_taps(g).enumerate() {
            let row = &col[(ci * g.kernel_volume() + t) * cols..][..cols];
            for_each_row_pair(g, tap, slab, |orow, irow, lo, hi, iw| {
                let src = &row[orow - offset + lo..orow - offset + hi];
                if sw == 1 {
                    for (d, s) in in_ch[irow + iw..irow + iw + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    for (j, s) in src.iter().enumerate() {
                        in_ch[irow + iw + j * sw] += s;
                    }
                }
            });
        }
    }
}

/// Row-major `c[m×n] = a[m×k]·b[k×n] + beta·c`, with explicit row strides and
/// optional transposition of `a` or `b` (given in their stored layout).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    a_ld: usize,
    b: &[f64],
    b_transposed: bool,
    b_ld: usize,
    beta: f64,
    c: &mut [f64],
    c_ld: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, a_ld) } else { (a_ld, 1) };
    let (rsb, csb) = if b_transposed { (1, b_ld) } else { (b_ld, 1) };
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * c_ld + n - 1 < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            c_ld as isize,
            1,
        );
    }
}

/// `out[n, co] += Σ_ci w[co, ci] ⋆ in[n, ci]` (cross-correlation).
fn correlate(g: &Geometry, input: &[f64], weight: &[f64], out: &mut [f64]) {
    let (is, os) = (g.in_spatial(), g.out_spatial());
    let rows = g.c_in * g.kernel_volume();
    let plane = g.output[1] * g.output[2];
    let mut col = Vec::new();
    for n in 0..g.batch {
        let sample = &input[n * g.c_in * is..][..g.c_in * is];
        let out_n = &mut out[n * g.c_out * os..][..g.c_out * os];
        for slab in depth_slabs(g) {
            let cols = (slab.1 - slab.0) * plane;
            col.resize(rows * cols, 0.0);
            im2col(g, sample, slab, &mut col);
            gemm(g.c_out, rows, cols, weight, false, rows, &col, false, cols, 1.0, &mut out_n[slab.0 * plane..], os);
        }
    }
}

/// Adjoint of [`correlate`] in its input: `gin[n, ci] += Σ_co w[co, ci] ⋆ᵀ gout[n, co]`.
fn scatter(g: &Geometry, gout: &[f64], weight: &[f64], gin: &mut [f64]) {
    let (is, os) = (g.in_spatial(), g.out_spatial());
    let rows = g.c_in * g.kernel_volume();
    let plane = g.output[1] * g.output[2];
    let mut col = Vec::new();
    for n in 0..g.batch {
        let go_n = &gout[n * g.c_out * os..][..g.c_out * os];
        let gin_n = &mut gin[n * g.c_in * is..][..g.c_in * is];
        for slab in depth_slabs(g) {
            let cols = (slab.1 - slab.0) * plane;
            col.resize(rows * cols, 0.0);
            gemm(rows, g.c_out, cols, weight, true, rows, &go_n[slab.0 * plane..], false, os, 0.0, &mut col, cols);
            col2im(g, &col, slab, gin_n);
        }
    }
}

/// `gw[co, ci, k] += Σ_n Σ_o gout[n, co, o] · in[n, ci, o·s + k − p]`.
fn weight_grad(g: &Geometry, gout: &[f64], input: &[f64], gw: &mut [f64]) {
    let (is, os) = (g.in_spatial(), g.out_spatial());
    let rows = g.c_in * g.kernel_volume();
    let plane = g.output[1] * g.output[2];
    let mut col = Vec::new();
    for n in 0..g.batch {
        let sample = &input[n * g.c_in * is..][..g.c_in * is];
        let go_n = &gout[n * g.c_out * os..][..g.c_out * os];
        for slab in depth_slabs(g) {
            let cols = (slab.1 - slab.0) * plane;
            col.resize(rows * cols, 0.0);
            im2col(g, sample, slab, &mut col);
            gemm(g.c_out, cols, rows, &go_n[slab.0 * plane..], false, os, &col, true, cols, 1.0, gw, rows);
        }
    }
}

fn bias_grad(g: &Geometry, gout: &[f64]) -> Vec<f64> {
    let os = g.out_spatial();
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.batch {
        for (co, b) in gb.iter_mut().enumerate() {
            *b += gout[(n * g.c_out + co) * os..][..os].iter().sum::<f64>();
        }
    }
    gb
}

fn add_bias(out: &mut [f64], bias: &[f64], batch: usize, spatial: usize) {
    let c = bias.len();
    for n in 0..batch {
        for (ch, &b) in bias.iter().enumerate() {
            out[(n * c + ch) * spatial..][..spatial]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
}

struct ConvBack {
    g: Geometry,
}

impl Backward for ConvBack {
    fn backward(&self, gout: &[f64], p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let g = &self.g;
        let (x, w) = (&p[0], &p[1]);
        let gx = x.requires_grad().then(|| {
            let mut gx = vec![0.0; x.numel()];
            scatter(g, gout, &w.data(), &mut gx);
            gx
        });
        let gw = w.requires_grad().then(|| {
            let mut gw = vec![0.0; w.numel()];
            weight_grad(g, gout, &x.data(), &mut gw);
            gw
        });
        let mut grads = vec![gx, gw];
        if p.len() == 3 {
            grads.push(p[2].requires_grad().then(|| bias_grad(g, gout)));
        }
        grads
    }
}

/// Transposed convolution expressed through the same geometry: the transposed
/// op's input plays the role of the underlying convolution's output.
struct ConvTransposeBack {
    g: Geometry,
}

impl Backward for ConvTransposeBack {
    fn backward(&self, gout: &[f64], p: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let g = &self.g;
        let (x, w) = (&p[0], &p[1]);
        let gx = x.requires_grad().then(|| {
            let mut gx = vec![0.0; x.numel()];
            correlate(g, gout, &w.data(), &mut gx);
            gx
        });
        let gw = w.requires_grad().then(|| {
            let mut gw = vec![0.0; w.numel()];
            weight_grad(g, &x.data(), gout, &mut gw);
            gw
        });
        let mut grads = vec![gx, gw];
        if p.len() == 3 {
            // bias is per underlying-input channel
            grads.push(p[2].requires_grad().then(|| {
                let is = g.in_spatial();
                let mut gb = vec![0.0; g.c_in];
                for n in 0..g.batch {
                    for (c, b) in gb.iter_mut().enumerate() {
                        *b += gout[(n * g.c_in + c) * is..][..is].iter().sum::<f64>();
                    }
                }
                gb
            }));
        }
        grads
    }
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::dim(
                "channel",
                format!("bias shape {:?} does not match {channels} output channels", b.shape()),
            ));
        }
    }
    Ok(())
}

/// General convolution over `[N, Cin, D, H, W]` with weight `[Cout, Cin, kD, kH, kW]`.
pub fn conv_nd(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
    check_params(&p)?;
    let [n, ci, d, h, w] = check_rank5(input, "input")?;
    let [co, wci, kd, kh, kw] = check_rank5(weight, "weight")?;
    if wci != ci {
        return Err(Error::dim(
            "channel",
            format!("input has {ci} channels, weight expects {wci}"),
        ));
    }
    check_bias(bias, co)?;
    let input_dims = [d, h, w];
    let kernel = [kd, kh, kw];
    let mut output = [0; 3];
    for a in 0..3 {
        let padded = input_dims[a] + 2 * p.padding[a];
        if padded < kernel[a] {
            return Err(Error::dim(
                AXES[a],
                format!(
                    "kernel {} does not fit input {} with padding {}",
                    kernel[a], input_dims[a], p.padding[a]
                ),
            ));
        }
        output[a] = (padded - kernel[a]) / p.stride[a] + 1;
    }
    let g = Geometry {
        batch: n,
        c_in: ci,
        c_out: co,
        input: input_dims,
        output,
        kernel,
        p,
    };
    let mut out = vec![0.0; n * co * g.out_spatial()];
    if let Some(b) = bias {
        add_bias(&mut out, &b.data(), n, g.out_spatial());
    }
    correlate(&g, &input.data(), &weight.data(), &mut out);
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![n, co, output[0], output[1], output[2]],
        out,
        parents,
        Box::new(ConvBack { g }),
    ))
}

/// Cubic-kernel 3D convolution with uniform stride and padding.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv_nd(input, weight, bias, ConvParams::cube(stride, padding))
}

/// 2D convolution of `[N, C, 1, H, W]` images with `[Cout, Cin, 1, k, k]` weights.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv_nd(input, weight, bias, ConvParams::planar(stride, padding))
}

/// Transposed 3D convolution, weight layout `[Cin, Cout, k, k, k]`.
///
/// Output extent per axis is `(in − 1)·stride − 2·padding + k`; without bias
/// this is the exact adjoint of [`conv3d`] with the same weight.
pub fn conv_transpose3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let p = ConvParams::cube(stride, padding);
    check_params(&p)?;
    let [n, ci, d, h, w] = check_rank5(input, "input")?;
    let [wci, co, kd, kh, kw] = check_rank5(weight, "weight")?;
    if wci != ci {
        return Err(Error::dim(
            "channel",
            format!("input has {ci} channels, transposed weight expects {wci}"),
        ));
    }
    check_bias(bias, co)?;
    let small = [d, h, w];
    let kernel = [kd, kh, kw];
    let mut large = [0; 3];
    for a in 0..3 {
        let full = (small[a] - 1) * stride + kernel[a];
        if full <= 2 * padding {
            return Err(Error::dim(
                AXES[a],
                format!("padding {padding} consumes the whole transposed output"),
            ));
        }
        large[a] = full - 2 * padding;
    }
    // underlying convolution maps `large` (c = co) onto `small` (c = ci)
    let g = Geometry {
        batch: n,
        c_in: co,
        c_out: ci,
        input: large,
        output: small,
        kernel,
        p,
    };
    let mut out = vec![0.0; n * co * g.in_spatial()];
    scatter(&g, &input.data(), &weight.data(), &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, &b.data(), n, g.in_spatial());
    }
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![n, co, large[0], large[1], large[2]],
        out,
        parents,
        Box::new(ConvTransposeBack { g }),
    ))
}
