//! Stride-1, same-padding 2-D convolution. Forward and backward are both
//! expressed as im2col plus a single sgemm call, which keeps the hot loop in
//! the matrix kernel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One convolutional layer: `weights` laid out `(out, in, kh, kw)` row-major,
/// one bias per output channel. Kernel dims must be odd so symmetric zero
/// padding preserves spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid_argument(format!(
                "conv kernel dims must be odd for symmetric same-padding, got {}x{}",
                kh, kw
            )));
        }
        if weights.len() != out_channels * in_channels * kh * kw {
            return Err(Error::invalid_argument(format!(
                "conv weights length {} does not match ({}, {}, {}, {})",
                weights.len(),
                out_channels,
                in_channels,
                kh,
                kw
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::invalid_argument(format!(
                "conv bias length {} does not match out_channels {}",
                bias.len(),
                out_channels
            )));
        }
        Ok(ConvLayer {
            kernel,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(kernel: (usize, usize), in_channels: usize, out_channels: usize) -> Result<Self> {
        let (kh, kw) = kernel;
        ConvLayer::new(
            kernel,
            in_channels,
            out_channels,
            vec![0.0; out_channels * in_channels * kh * kw],
            vec![0.0; out_channels],
        )
    }

    /// `(kh*kw*in + 1) * out`.
    pub fn parameter_count(&self) -> usize {
        (self.kernel.0 * self.kernel.1 * self.in_channels + 1) * self.out_channels
    }
}

/// Gradients of one layer's parameters, congruent to `weights`/`bias`.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrads {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        ConvGrads {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

fn check_input(input: &Tensor, layer: &ConvLayer) -> Result<()> {
    let (_, c, h, w) = input.shape();
    if c != layer.in_channels {
        return Err(Error::invalid_argument(format!(
            "conv input has {} channels but layer expects {}",
            c, layer.in_channels
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid_argument("conv input has empty spatial dims"));
    }
    Ok(())
}

/// Expand one sample into the `(cin*kh*kw) x (h*w)` patch matrix with zero
/// padding, reusing `col` as scratch.
fn im2col(sample: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [f32]) {
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    let plane = h * w;
    debug_assert_eq!(col.len(), c * kh * kw * plane);
    col.fill(0.0);
    for ci in 0..c {
        let src = &sample[ci * plane..(ci + 1) * plane];
        for ky in 0..kh {
            let dy = ky as isize - ph;
            for kx in 0..kw {
                let dx = kx as isize - pw;
                let row = ((ci * kh + ky) * kw + kx) * plane;
                // valid output x range for this kernel offset
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_off = sy as usize * w;
                    let dst = &mut col[row + y * w + x0..row + y * w + x1];
                    dst.copy_from_slice(
                        &src[src_off + (x0 as isize + dx) as usize
                            ..src_off + (x1 as isize + dx) as usize],
                    );
                }
            }
        }
    }
}

/// Scatter-add the patch matrix back into a `(c, h, w)` sample; adjoint of
/// `im2col`.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize, sample: &mut [f32]) {
    let ph = (kh / 2) as isize;
    let pw = (kw / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let dst = &mut sample[ci * plane..(ci + 1) * plane];
        for ky in 0..kh {
            let dy = ky as isize - ph;
            for kx in 0..kw {
                let dx = kx as isize - pw;
                let row = ((ci * kh + ky) * kw + kx) * plane;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &col[row + y * w + x0..row + y * w + x1];
                    let dst_off = sy as usize * w + (x0 as isize + dx) as usize;
                    for (d, &s) in dst[dst_off..dst_off + (x1 - x0)].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `C(m x n) = alpha * A(m x k) * B(k x n) + beta * C`, all row-major.
fn sgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padding stride-1 convolution: output shape equals input shape except
/// for the channel count.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    check_input(input, layer)?;
    let (n, c, h, w) = input.shape();
    let (kh, kw) = layer.kernel;
    let plane = h * w;
    let k = c * kh * kw;
    let m = layer.out_channels;
    let mut col = vec![0.0f32; k * plane];
    let mut out = vec![0.0f32; n * m * plane];
    for ni in 0..n {
        let sample = &input.data()[ni * c * plane..(ni + 1) * c * plane];
        im2col(sample, c, h, w, kh, kw, &mut col);
        let dst = &mut out[ni * m * plane..(ni + 1) * m * plane];
        for (o, chunk) in dst.chunks_exact_mut(plane).enumerate() {
            chunk.fill(layer.bias[o]);
        }
        sgemm_rowmajor(m, k, plane, 1.0, &layer.weights, &col, 1.0, dst);
    }
    Tensor::new((n, m, h, w), out)
}

/// Backward of `conv2d_forward`: gradients for the layer parameters and the
/// input, given the upstream gradient of a scalar loss.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(ConvGrads, Tensor)> {
    check_input(input, layer)?;
    let (n, c, h, w) = input.shape();
    let m = layer.out_channels;
    if grad_out.shape() != (n, m, h, w) {
        return Err(Error::invalid_argument(format!(
            "conv2d_backward: upstream gradient shape {:?} does not match output ({}, {}, {}, {})",
            grad_out.shape(),
            n,
            m,
            h,
            w
        )));
    }
    let (kh, kw) = layer.kernel;
    let plane = h * w;
    let k = c * kh * kw;
    let mut grads = ConvGrads::zeros_like(layer);
    let mut grad_in = Tensor::zeros((n, c, h, w));
    let mut col = vec![0.0f32; k * plane];
    let mut dcol = vec![0.0f32; k * plane];
    // W^T, K x M row-major
    let mut wt = vec![0.0f32; k * m];
    for o in 0..m {
        for ki in 0..k {
            wt[ki * m + o] = layer.weights[o * k + ki];
        }
    }
    for ni in 0..n {
        let sample = &input.data()[ni * c * plane..(ni + 1) * c * plane];
        let dy = &grad_out.data()[ni * m * plane..(ni + 1) * m * plane];
        im2col(sample, c, h, w, kh, kw, &mut col);
        // dW[o, ki] += sum_p dY[o, p] * col[ki, p]  -> dY (m x p) * col^T (p x k)
        unsafe {
            matrixmultiply::sgemm(
                m,
                plane,
                k,
                1.0,
                dy.as_ptr(),
                plane as isize,
                1,
                col.as_ptr(),
                1,
                plane as isize,
                1.0,
                grads.weights.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        for o in 0..m {
            grads.bias[o] += dy[o * plane..(o + 1) * plane].iter().sum::<f32>();
        }
        // dcol = W^T * dY, then scatter back to the input
        sgemm_rowmajor(k, m, plane, 1.0, &wt, dy, 0.0, &mut dcol);
        let gin = &mut grad_in.data_mut()[ni * c * plane..(ni + 1) * c * plane];
        col2im(&dcol, c, h, w, kh, kw, gin);
    }
    Ok((grads, grad_in))
}
