//! Dense rank-4 tensor and the elementwise / structural primitives of the
//! network: ReLU, 2x2 max-pooling, channel concatenation and the per-sample
//! Euclidean loss. Each primitive comes with a matching backward function so
//! the tape can replay them.

use crate::error::{Error, Result};

/// Dense `(batch, channels, height, width)` array of f32, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: (usize, usize, usize, usize),
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let (n, c, h, w) = shape;
        let expected = n * c * h * w;
        if data.len() != expected {
            return Err(Error::invalid_argument(format!(
                "tensor data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        let (n, c, h, w) = shape;
        Tensor {
            shape,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.0
    }

    pub fn channels(&self) -> usize {
        self.shape.1
    }

    pub fn height(&self) -> usize {
        self.shape.2
    }

    pub fn width(&self) -> usize {
        self.shape.3
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// One `(h, w)` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let (_, cc, h, w) = self.shape;
        let start = (n * cc + c) * h * w;
        &self.data[start..start + h * w]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let (_, cc, h, w) = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape,
        data,
    }
}

/// Backward of ReLU: passes gradient where the forward input was > 0.
/// The subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(input.shape, grad_out.shape);
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: input.shape,
        data,
    }
}

/// 2x2 max-pooling with stride 2. Spatial dims must be even.
pub fn maxpool2x2(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid_argument(format!(
            "maxpool2x2 requires even spatial dims, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for nc in 0..n * c {
        let src = &input.data[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let y = oy * 2;
                let x = ox * 2;
                let m = src[y * w + x]
                    .max(src[y * w + x + 1])
                    .max(src[(y + 1) * w + x])
                    .max(src[(y + 1) * w + x + 1]);
                dst[oy * ow + ox] = m;
            }
        }
    }
    Tensor::new((n, c, oh, ow), out)
}

/// Backward of 2x2 max-pooling. The gradient of each window goes to the
/// first maximal element in row-major order.
pub fn maxpool2x2_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let (n, c, h, w) = input.shape;
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(grad_out.shape, (n, c, oh, ow));
    let mut grad_in = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        let src = &input.data[nc * h * w..(nc + 1) * h * w];
        let g = &grad_out.data[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut grad_in[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let y = oy * 2;
                let x = ox * 2;
                let idx = [
                    y * w + x,
                    y * w + x + 1,
                    (y + 1) * w + x,
                    (y + 1) * w + x + 1,
                ];
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[best] += g[oy * ow + ox];
            }
        }
    }
    Tensor {
        shape: (n, c, h, w),
        data: grad_in,
    }
}

/// Concatenate tensors along the channel axis. All inputs must share
/// batch size and spatial dims.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::invalid_argument("concat_channels: no inputs"));
    }
    let (n, _, h, w) = inputs[0].shape;
    for t in inputs {
        let (tn, _, th, tw) = t.shape;
        if (tn, th, tw) != (n, h, w) {
            let shapes: Vec<_> = inputs.iter().map(|t| t.shape).collect();
            return Err(Error::invalid_argument(format!(
                "concat_channels: mismatched batch/spatial dims across inputs {:?}",
                shapes
            )));
        }
    }
    let total_c: usize = inputs.iter().map(|t| t.channels()).sum();
    let mut out = vec![0.0f32; n * total_c * h * w];
    let plane = h * w;
    for bi in 0..n {
        let mut c_off = 0;
        for t in inputs {
            let tc = t.channels();
            let src = &t.data[bi * tc * plane..(bi + 1) * tc * plane];
            let dst_start = (bi * total_c + c_off) * plane;
            out[dst_start..dst_start + tc * plane].copy_from_slice(src);
            c_off += tc;
        }
    }
    Tensor::new((n, total_c, h, w), out)
}

/// Backward of channel concatenation: split the gradient back into the
/// original channel blocks.
pub fn concat_channels_backward(grad_out: &Tensor, channel_splits: &[usize]) -> Vec<Tensor> {
    let (n, total_c, h, w) = grad_out.shape;
    debug_assert_eq!(channel_splits.iter().sum::<usize>(), total_c);
    let plane = h * w;
    let mut grads = Vec::with_capacity(channel_splits.len());
    let mut c_off = 0;
    for &tc in channel_splits {
        let mut data = vec![0.0f32; n * tc * plane];
        for bi in 0..n {
            let src_start = (bi * total_c + c_off) * plane;
            data[bi * tc * plane..(bi + 1) * tc * plane]
                .copy_from_slice(&grad_out.data[src_start..src_start + tc * plane]);
        }
        grads.push(Tensor {
            shape: (n, tc, h, w),
            data,
        });
        c_off += tc;
    }
    grads
}

/// Mean over the batch of the per-sample L2 norms of `pred - gt`:
/// `(1/N) * sum_i sqrt(sum_pixels (pred_i - gt_i)^2)`.
pub fn euclidean_loss(pred: &Tensor, gt: &Tensor) -> Result<f32> {
    if pred.shape != gt.shape {
        return Err(Error::invalid_argument(format!(
            "euclidean_loss: shape mismatch {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    let n = pred.batch();
    if n == 0 {
        return Err(Error::invalid_argument("euclidean_loss: empty batch"));
    }
    let per_sample = pred.data.len() / n;
    let mut total = 0.0f64;
    for i in 0..n {
        let p = &pred.data[i * per_sample..(i + 1) * per_sample];
        let g = &gt.data[i * per_sample..(i + 1) * per_sample];
        let sq: f64 = p
            .iter()
            .zip(g)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        total += sq.sqrt();
    }
    Ok((total / n as f64) as f32)
}

/// Gradient of `euclidean_loss` with respect to `pred`. For a sample whose
/// norm is exactly 0 the gradient is defined as 0.
pub fn euclidean_loss_backward(pred: &Tensor, gt: &Tensor) -> Tensor {
    debug_assert_eq!(pred.shape, gt.shape);
    let n = pred.batch();
    let per_sample = pred.data.len() / n;
    let mut grad = vec![0.0f32; pred.data.len()];
    for i in 0..n {
        let p = &pred.data[i * per_sample..(i + 1) * per_sample];
        let g = &gt.data[i * per_sample..(i + 1) * per_sample];
        let norm: f64 = p
            .iter()
            .zip(g)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            let scale = 1.0 / (n as f64 * norm);
            let out = &mut grad[i * per_sample..(i + 1) * per_sample];
            for (o, (&a, &b)) in out.iter_mut().zip(p.iter().zip(g)) {
                *o = ((a - b) as f64 * scale) as f32;
            }
        }
    }
    Tensor {
        shape: pred.shape,
        data: grad,
    }
}
