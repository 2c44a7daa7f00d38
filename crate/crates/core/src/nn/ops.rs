//! Layer primitives: forward and exact backward passes for convolution, dense,
//! ReLU and dropout. Feature maps are HWC, conv kernels `[kh, kw, c_in, filters]`,
//! dense weights `[units, inputs]`.

use rand::Rng;

use super::tensor::{gemm, DType, Layout, Scalar, Tensor};
use crate::{Error, Result};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    in_w: usize,
    channels: usize,
    kh: usize,
    kw: usize,
    filters: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Self> {
        let (&[in_h, in_w, channels], &[kh, kw, kc, filters]) = (input.shape(), kernel.shape())
        else {
            return Err(Error::Shape(format!(
                "conv2d expects HWC input and 4-D kernel, got {:?} and {:?}",
                input.shape(),
                kernel.shape()
            )));
        };
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be at least 1".into()));
        }
        if kc != channels {
            return Err(Error::Shape(format!(
                "kernel expects {kc} channels, input has {channels}"
            )));
        }
        if kh == 0 || kw == 0 || kh > in_h || kw > in_w {
            return Err(Error::Shape(format!(
                "{kh}x{kw} kernel does not fit {in_h}x{in_w} input"
            )));
        }
        Ok(Self {
            in_w,
            channels,
            kh,
            kw,
            filters,
            stride,
            out_h: (in_h - kh) / stride + 1,
            out_w: (in_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unrolls every receptive field into one row of a `[positions, kh*kw*c]` matrix.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch_len();
    let run = g.kw * g.channels;
    let mut cols = vec![T::zero(); g.positions() * patch];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * patch;
            for u in 0..g.kh {
                let src = ((oy * g.stride + u) * g.in_w + ox * g.stride) * g.channels;
                let dst = row + u * run;
                cols[dst..dst + run].copy_from_slice(&input[src..src + run]);
            }
        }
    }
    cols
}

/// Scatter-adds patch gradients back onto the input grid.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let patch = g.patch_len();
    let run = g.kw * g.channels;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * patch;
            for u in 0..g.kh {
                let dst = ((oy * g.stride + u) * g.in_w + ox * g.stride) * g.channels;
                let src = row + u * run;
                for (o, &c) in out[dst..dst + run].iter_mut().zip(&cols[src..src + run]) {
                    *o += c;
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, n: usize) -> Result<()> {
    if bias.shape() != [n] {
        return Err(Error::Shape(format!(
            "bias shape {:?}, expected [{n}]",
            bias.shape()
        )));
    }
    Ok(())
}

/// Valid (unpadded) strided 2-D convolution:
/// `out[i, j, f] = sum_{u,v,c} input[i*s + u, j*s + v, c] * kernel[u, v, c, f] + bias[f]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernel, stride)?;
    check_bias(bias, g.filters)?;
    let cols = im2col(input.data(), &g);
    let shape = [g.out_h, g.out_w, g.filters];
    if T::DTYPE == DType::F32 {
        // accumulate in f64 and round once, so f32 outputs stay within half an ulp
        let cols: Vec<f64> = cols.iter().map(|v| v.as_f64()).collect();
        let out = conv_contract(&cols, kernel.cast::<f64>().data(), bias.cast::<f64>().data(), &g);
        return Tensor::from_vec(&shape, out.into_iter().map(T::of_f64).collect());
    }
    Tensor::from_vec(&shape, conv_contract(&cols, kernel.data(), bias.data(), &g))
}

/// `cols * kernel + bias` for im2col patches.
fn conv_contract<T: Scalar>(cols: &[T], kernel: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut out = Vec::with_capacity(p * g.filters);
    for _ in 0..p {
        out.extend_from_slice(bias);
    }
    gemm(
        p,
        g.patch_len(),
        g.filters,
        T::one(),
        cols,
        Layout::row_major(g.patch_len()),
        kernel,
        Layout::row_major(g.filters),
        T::one(),
        &mut out,
        Layout::row_major(g.filters),
    );
    out
}

/// Accumulates kernel and bias gradients into `grad_kernel` / `grad_bias` and
/// optionally returns the input gradient.
pub(crate) fn conv2d_backward_accumulate<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let g = ConvGeometry::new(input, kernel, stride)?;
    if grad_out.shape() != [g.out_h, g.out_w, g.filters] {
        return Err(Error::Shape(format!(
            "conv2d grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [g.out_h, g.out_w, g.filters]
        )));
    }
    let p = g.positions();
    let patch = g.patch_len();
    let cols = im2col(input.data(), &g);
    let go = grad_out.data();

    // dK = cols^T * dY
    gemm(
        patch,
        p,
        g.filters,
        T::one(),
        &cols,
        Layout::transposed(patch),
        go,
        Layout::row_major(g.filters),
        T::one(),
        grad_kernel,
        Layout::row_major(g.filters),
    );
    for row in go.chunks_exact(g.filters) {
        for (b, &v) in grad_bias.iter_mut().zip(row) {
            *b += v;
        }
    }
    if !need_input_grad {
        return Ok(None);
    }
    // dcols = dY * K^T, then fold back onto the input grid.
    let mut grad_cols = vec![T::zero(); p * patch];
    gemm(
        p,
        g.filters,
        patch,
        T::one(),
        go,
        Layout::row_major(g.filters),
        kernel.data(),
        Layout::transposed(g.filters),
        T::zero(),
        &mut grad_cols,
        Layout::row_major(patch),
    );
    let mut grad_input = vec![T::zero(); input.len()];
    col2im(&grad_cols, &g, &mut grad_input);
    Ok(Some(Tensor::from_vec(input.shape(), grad_input)?))
}

/// Exact gradients of [`conv2d_forward`]: `(grad_input, grad_kernel, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_bias = Tensor::zeros(&[kernel.shape().last().copied().unwrap_or(0)]);
    let grad_input = conv2d_backward_accumulate(
        input,
        kernel,
        grad_out,
        stride,
        grad_kernel.data_mut(),
        grad_bias.data_mut(),
        true,
    )?
    .expect("input gradient requested");
    Ok((grad_input, grad_kernel, grad_bias))
}

fn dense_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize)> {
    let &[units, n_in] = weight.shape() else {
        return Err(Error::Shape(format!(
            "dense weight must be 2-D, got {:?}",
            weight.shape()
        )));
    };
    if input.len() != n_in {
        return Err(Error::Shape(format!(
            "dense layer expects {n_in} inputs, got {}",
            input.len()
        )));
    }
    Ok((units, n_in))
}

/// Affine map `y = W x + b` on a flattened input.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (units, n_in) = dense_dims(input, weight)?;
    check_bias(bias, units)?;
    let mut out = bias.data().to_vec();
    gemm(
        units,
        n_in,
        1,
        T::one(),
        weight.data(),
        Layout::row_major(n_in),
        input.data(),
        Layout::row_major(1),
        T::one(),
        &mut out,
        Layout::row_major(1),
    );
    Tensor::from_vec(&[units], out)
}

pub(crate) fn dense_backward_accumulate<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (units, n_in) = dense_dims(input, weight)?;
    if grad_out.len() != units {
        return Err(Error::Shape(format!(
            "dense grad_out has {} elements, expected {units}",
            grad_out.len()
        )));
    }
    // dW += g x^T
    gemm(
        units,
        1,
        n_in,
        T::one(),
        grad_out.data(),
        Layout::row_major(1),
        input.data(),
        Layout::row_major(n_in),
        T::one(),
        grad_weight,
        Layout::row_major(n_in),
    );
    for (b, &g) in grad_bias.iter_mut().zip(grad_out.data()) {
        *b += g;
    }
    if !need_input_grad {
        return Ok(None);
    }
    let mut grad_input = vec![T::zero(); n_in];
    gemm(
        n_in,
        units,
        1,
        T::one(),
        weight.data(),
        Layout::transposed(n_in),
        grad_out.data(),
        Layout::row_major(1),
        T::zero(),
        &mut grad_input,
        Layout::row_major(1),
    );
    Ok(Some(Tensor::from_vec(input.shape(), grad_input)?))
}

/// Exact gradients of [`dense_forward`]: `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_bias = Tensor::zeros(&[weight.shape().first().copied().unwrap_or(0)]);
    let grad_input = dense_backward_accumulate(
        input,
        weight,
        grad_out,
        grad_weight.data_mut(),
        grad_bias.data_mut(),
        true,
    )?
    .expect("input gradient requested");
    Ok((grad_input, grad_weight, grad_bias))
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient of ReLU: `grad_out` where `input > 0`, zero elsewhere.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu grad_out {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Inverted dropout. In training mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; evaluation mode is the
/// identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (out, _) = dropout_with_mask(input, rate, mode, rng)?;
    Ok(out)
}

/// Dropout returning the per-element scale mask used, `None` when no mask applies.
pub(crate) fn dropout_with_mask<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep_scale = T::of_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let data = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(&x, &m)| x * m)
        .collect();
    Ok((Tensor::from_vec(input.shape(), data)?, Some(mask)))
}

pub(crate) fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: Tensor<T>) -> Tensor<T> {
    match mask {
        None => grad_out,
        Some(mask) => {
            let mut g = grad_out;
            for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
            g
        }
    }
}
