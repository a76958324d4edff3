//! Forward and backward passes of the individual layer kinds.
//!
//! Each forward returns its output together with whatever the backward pass needs, so
//! weights stay immutable and a model can be shared across threads during inference.

use rand::Rng;

use crate::error::{Error, Result};
use crate::micronet::tensor::{Real, Tensor};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// One ring of zeros for 3x3 kernels; output keeps the input size.
    Same,
    Valid,
}

/// Inference runs dropout as identity; training draws masks from the given seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
    k: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Vec<T>,
    pub bias: Vec<T>,
}

/// Square-kernel cross-correlation with stride 1. `kernels` is `F x C x k x k`.
pub fn conv_forward<T: Real>(
    input: &Tensor<T>,
    kernels: &[T],
    bias: &[T],
    k: usize,
    padding: Padding,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (c, h, w) = input.shape();
    let f = bias.len();
    if k == 0 || kernels.len() != f * c * k * k {
        return Err(Error::Shape(format!(
            "conv: {} kernel values for {f} filters over {c} channels of {k}x{k}",
            kernels.len()
        )));
    }
    let pad = match padding {
        Padding::Same => k / 2,
        Padding::Valid => 0,
    };
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("conv: input {h}x{w} smaller than kernel {k}")));
    }
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let rows = c * k * k;
    let cols_n = ho * wo;

    // im2col: row (ch, ky, kx), column (oy, ox)
    let mut cols = vec![T::zero(); rows * cols_n];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &input.data[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }

    let mut out = vec![T::zero(); f * cols_n];
    for (fi, &b) in bias.iter().enumerate() {
        out[fi * cols_n..(fi + 1) * cols_n].fill(b);
    }
    T::gemm(
        f,
        rows,
        cols_n,
        T::one(),
        kernels,
        rows as isize,
        1,
        &cols,
        cols_n as isize,
        1,
        T::one(),
        &mut out,
        cols_n as isize,
        1,
    );
    Ok((
        Tensor::from_vec(f, ho, wo, out),
        ConvCache {
            cols,
            in_shape: (c, h, w),
            out_hw: (ho, wo),
            k,
            pad,
        },
    ))
}

pub fn conv_backward<T: Real>(cache: &ConvCache<T>, kernels: &[T], grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (c, h, w) = cache.in_shape;
    let (ho, wo) = cache.out_hw;
    let k = cache.k;
    let rows = c * k * k;
    let cols_n = ho * wo;
    let f = grad_out.c;
    if (grad_out.h, grad_out.w) != (ho, wo) || kernels.len() != f * rows {
        return Err(Error::Shape("conv backward: upstream gradient does not match forward".into()));
    }
    let dy = &grad_out.data;

    let mut d_kernels = vec![T::zero(); f * rows];
    T::gemm(
        f,
        cols_n,
        rows,
        T::one(),
        dy,
        cols_n as isize,
        1,
        &cache.cols,
        1,
        cols_n as isize,
        T::zero(),
        &mut d_kernels,
        rows as isize,
        1,
    );
    let d_bias = (0..f)
        .map(|fi| dy[fi * cols_n..(fi + 1) * cols_n].iter().fold(T::zero(), |a, &v| a + v))
        .collect();

    let mut d_cols = vec![T::zero(); rows * cols_n];
    T::gemm(
        rows,
        f,
        cols_n,
        T::one(),
        kernels,
        1,
        rows as isize,
        dy,
        cols_n as isize,
        1,
        T::zero(),
        &mut d_cols,
        cols_n as isize,
        1,
    );

    // col2im
    let pad = cache.pad;
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &d_cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] = dx[base + ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(c, h, w, dx),
        kernels: d_kernels,
        bias: d_bias,
    })
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(x.c, x.h, x.w, x.data.iter().map(|&v| v.max(T::zero())).collect())
}

/// Gradient of `max(x, 0)` given the forward input; zero at the kink.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.c, input.h, input.w, data)
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`. Returns the output and the
/// per-unit scale (the mask) for the backward pass; `None` in inference mode.
pub fn dropout_forward<T: Real>(x: &Tensor<T>, p: f64, mode: Mode, stream: u64) -> (Tensor<T>, Option<Vec<T>>) {
    match mode {
        Mode::Infer => (x.clone(), None),
        Mode::Train { seed: s } => {
            let mut rng = seed::rng(s, "dropout", stream);
            let keep = T::from_f64(1.0 / (1.0 - p));
            let mask: Vec<T> = (0..x.len())
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect();
            let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (Tensor::from_vec(x.c, x.h, x.w, data), Some(mask))
        }
    }
}

pub fn dropout_backward<T: Real>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => grad_out.clone(),
        Some(m) => Tensor::from_vec(
            grad_out.c,
            grad_out.h,
            grad_out.w,
            grad_out.data.iter().zip(m).map(|(&g, &k)| g * k).collect(),
        ),
    }
}

/// Non-overlapping 2x2 mean; odd trailing rows/columns are dropped.
pub fn avg_pool2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.shape();
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("avg_pool2: input {h}x{w} too small")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let at = |dy: usize, dx: usize| x.data[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter);
            }
        }
    }
    Ok(Tensor::from_vec(c, ho, wo, out))
}

pub fn avg_pool2_backward<T: Real>(in_shape: (usize, usize, usize), grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = in_shape;
    let (ho, wo) = (grad_out.h, grad_out.w);
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = grad_out.data[(ch * ho + oy) * wo + ox] * quarter;
                for dy in 0..2 {
                    for dxx in 0..2 {
                        dx.data[(ch * h + 2 * oy + dy) * w + 2 * ox + dxx] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Stacks two activations along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::Shape(format!(
            "concat: spatial sizes {}x{} and {}x{} differ",
            a.h, a.w, b.h, b.w
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor::from_vec(a.c + b.c, a.h, a.w, data))
}

/// Splits a concatenated gradient back into its first `c_first` channels and the rest.
pub fn split_channels<T: Real>(g: &Tensor<T>, c_first: usize) -> (Tensor<T>, Tensor<T>) {
    let cut = c_first * g.h * g.w;
    (
        Tensor::from_vec(c_first, g.h, g.w, g.data[..cut].to_vec()),
        Tensor::from_vec(g.c - c_first, g.h, g.w, g.data[cut..].to_vec()),
    )
}

/// Dot product with eight interleaved partial sums (fixed order, so results are reproducible).
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `dst += alpha * src`.
fn axpy<T: Real>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}

/// Affine map `y = W x + b` with `W` stored `out x in` row-major.
pub fn dense_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let (n_in, n_out) = (x.len(), bias.len());
    if weight.len() != n_in * n_out {
        return Err(Error::Shape(format!(
            "dense: {} weights for {n_in} -> {n_out}",
            weight.len()
        )));
    }
    let y = weight
        .chunks_exact(n_in.max(1))
        .zip(bias)
        .map(|(row, &b)| b + dot(row, &x.data))
        .collect();
    Ok(Tensor::vector(y))
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Real>(input: &Tensor<T>, weight: &[T], grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let mut d_w = vec![T::zero(); weight.len()];
    let mut d_b = vec![T::zero(); grad_out.len()];
    let d_x = dense_backward_into(input, weight, grad_out, &mut d_w, &mut d_b)?;
    Ok(DenseGrads {
        input: d_x,
        weight: d_w,
        bias: d_b,
    })
}

/// Like [`dense_backward`] but adds the weight and bias gradients into existing buffers;
/// rows with a zero upstream gradient are skipped.
pub fn dense_backward_into<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Result<Tensor<T>> {
    let (n_in, n_out) = (input.len(), grad_out.len());
    if weight.len() != n_in * n_out || d_weight.len() != weight.len() || d_bias.len() != n_out {
        return Err(Error::Shape("dense backward: weight shape mismatch".into()));
    }
    let mut d_x = vec![T::zero(); n_in];
    for (o, &g) in grad_out.data.iter().enumerate() {
        d_bias[o] = d_bias[o] + g;
        if g == T::zero() {
            continue;
        }
        let rows = o * n_in..(o + 1) * n_in;
        axpy(&mut d_weight[rows.clone()], g, &input.data);
        axpy(&mut d_x, g, &weight[rows]);
    }
    Ok(Tensor::from_vec(input.c, input.h, input.w, d_x))
}

pub const L2_EPS: f64 = 1e-12;

/// `x / |x|`; vectors shorter than [`L2_EPS`] are rejected.
pub fn l2norm_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, T)> {
    let norm = x.data.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if !(norm.to_f64().unwrap_or(0.0) >= L2_EPS) {
        return Err(Error::Numerical(format!(
            "cannot normalize vector of norm {:?}",
            norm
        )));
    }
    let data = x.data.iter().map(|&v| v / norm).collect();
    Ok((Tensor::from_vec(x.c, x.h, x.w, data), norm))
}

/// `dx = (dy - y (y . dy)) / |x|`.
pub fn l2norm_backward<T: Real>(y: &Tensor<T>, norm: T, grad_out: &Tensor<T>) -> Tensor<T> {
    let dot = y.data.iter().zip(&grad_out.data).fold(T::zero(), |a, (&u, &g)| a + u * g);
    let data = y
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&u, &g)| (g - u * dot) / norm)
        .collect();
    Tensor::from_vec(y.c, y.h, y.w, data)
}
