//! Shared finite-difference oracle for gradient checks. Evaluates the loss
//! by replaying the forward primitives in f64, independently of the f32
//! production kernels; the backward path under test is never consulted.
//! Running the oracle in f64 keeps the central-difference quotient free of
//! single-precision rounding noise, so disagreements reflect the analytic
//! gradients rather than the measurement.

#![allow(dead_code)]

use ccnn::conv::ConvLayer;
use ccnn::model::Model;
use ccnn::tensor::Tensor;

pub const FD_STEP: f32 = 1e-3;

/// Tolerance verdict over a gradient vector pair.
pub struct GradCheckStats {
    pub total: usize,
    pub rel_ok: usize,
    pub abs_ok_rest: usize,
    pub worst_rel: f64,
    pub worst_abs_rest: f64,
}

impl GradCheckStats {
    /// Every coordinate within relative 1e-3 or absolute 1e-4; for vectors
    /// large enough for the quota to be meaningful, additionally >= 99% of
    /// coordinates must pass the relative gate.
    pub fn passes(&self) -> bool {
        let rest = self.total - self.rel_ok;
        if self.abs_ok_rest != rest {
            return false;
        }
        self.total < 1000 || self.rel_ok as f64 >= 0.99 * self.total as f64
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheckStats {
    assert_eq!(analytic.len(), numeric.len());
    let mut rel_ok = 0;
    let mut abs_ok_rest = 0;
    let mut worst_rel = 0.0f64;
    let mut worst_abs_rest = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        let denom = a.abs().max(n.abs());
        let rel = if denom > 0.0 { abs / denom } else { 0.0 };
        if rel <= 1e-3 {
            rel_ok += 1;
            worst_rel = worst_rel.max(rel);
        } else if abs <= 1e-4 {
            abs_ok_rest += 1;
            worst_abs_rest = worst_abs_rest.max(abs);
        } else {
            worst_rel = worst_rel.max(rel);
            worst_abs_rest = worst_abs_rest.max(abs);
        }
    }
    GradCheckStats {
        total: analytic.len(),
        rel_ok,
        abs_ok_rest,
        worst_rel,
        worst_abs_rest,
    }
}

pub fn loss_f64(pred: &Tensor, gt: &Tensor) -> f64 {
    // same definition as euclidean_loss but kept in f64 to the end, so the
    // finite-difference quotient is not limited by the f32 loss rounding
    let n = pred.batch();
    let per = pred.data().len() / n;
    let mut total = 0.0f64;
    for i in 0..n {
        let sq: f64 = pred.data()[i * per..(i + 1) * per]
            .iter()
            .zip(&gt.data()[i * per..(i + 1) * per])
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        total += sq.sqrt();
    }
    total / n as f64
}

/// Single-sample planar f64 feature map used by the oracle forward pass.
#[derive(Clone)]
pub struct Map64 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map64 {
    pub fn from_tensor(t: &Tensor) -> Self {
        let (n, c, h, w) = t.shape();
        assert_eq!(n, 1, "oracle forward handles single samples");
        Map64 {
            c,
            h,
            w,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Same-padding stride-1 convolution in f64, matching the production kernel's
/// geometry (out(y, x) += w[ky, kx] * in(y + ky - kh/2, x + kx - kw/2)).
pub fn conv64(x: &Map64, l: &ConvLayer) -> Map64 {
    assert_eq!(x.c, l.in_channels);
    let (kh, kw) = l.kernel;
    let (ph, pw) = (kh / 2, kw / 2);
    let (h, w) = (x.h, x.w);
    let plane = h * w;
    let mut out = Map64 {
        c: l.out_channels,
        h,
        w,
        data: vec![0.0; l.out_channels * plane],
    };
    for oc in 0..l.out_channels {
        let ob = oc * plane;
        out.data[ob..ob + plane].fill(l.bias[oc] as f64);
        for ic in 0..x.c {
            let ib = ic * plane;
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                for kx in 0..kw {
                    let dx = kx as isize - pw as isize;
                    let wv = l.weights[((oc * l.in_channels + ic) * kh + ky) * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize).min(w as isize - dx) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = ib + sy as usize * w;
                        let dst = ob + y * w;
                        for xi in x0..x1 {
                            out.data[dst + xi] +=
                                wv * x.data[src + (xi as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn relu64(x: &Map64) -> Map64 {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn maxpool64(x: &Map64) -> Map64 {
    assert!(x.h % 2 == 0 && x.w % 2 == 0);
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Map64 {
        c: x.c,
        h: oh,
        w: ow,
        data: vec![0.0; x.c * oh * ow],
    };
    for c in 0..x.c {
        let ib = c * x.h * x.w;
        let ob = c * oh * ow;
        for y in 0..oh {
            for xi in 0..ow {
                let base = ib + 2 * y * x.w + 2 * xi;
                let m = x.data[base]
                    .max(x.data[base + 1])
                    .max(x.data[base + x.w])
                    .max(x.data[base + x.w + 1]);
                out.data[ob + y * ow + xi] = m;
            }
        }
    }
    out
}

pub fn concat64(parts: &[&Map64]) -> Map64 {
    let (h, w) = (parts[0].h, parts[0].w);
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        assert!(p.h == h && p.w == w);
        data.extend_from_slice(&p.data);
        c += p.c;
    }
    Map64 { c, h, w, data }
}

/// Mean per-sample Euclidean norm of (pred - gt); single-sample here.
pub fn loss64(pred: &Map64, gt: &Map64) -> f64 {
    pred.data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Forward pass with per-stage activation caching so a single-parameter
/// perturbation only recomputes the stages downstream of its layer. All
/// arithmetic is f64.
pub struct CachedForward<'m> {
    model: &'m Model,
    input: Map64,
    gt: Map64,
    /// pooled front branch outputs
    front_pooled: Vec<Map64>,
    /// input activation of each backend layer (index 0 = merged front)
    backend_inputs: Vec<Map64>,
}

impl<'m> CachedForward<'m> {
    pub fn new(model: &'m Model, input: Tensor, gt: Tensor) -> Self {
        let input = Map64::from_tensor(&input);
        let gt = Map64::from_tensor(&gt);
        let n_front = model.config.front_branches.len();
        let front_pooled: Vec<Map64> = (0..n_front)
            .map(|s| maxpool64(&relu64(&conv64(&input, &model.layers[s]))))
            .collect();
        let refs: Vec<&Map64> = front_pooled.iter().collect();
        let mut x = concat64(&refs);
        let mut backend_inputs = vec![x.clone()];
        for (i, layer) in model.layers[n_front..].iter().enumerate() {
            x = relu64(&conv64(&x, layer));
            if Self::pooled_after(model, i + 1) {
                x = maxpool64(&x);
            }
            backend_inputs.push(x.clone());
        }
        CachedForward {
            model,
            input,
            gt,
            front_pooled,
            backend_inputs,
        }
    }

    fn pooled_after(model: &Model, backend_idx: usize) -> bool {
        let mut pools = model.config.pool_after_backend.clone();
        pools.sort_unstable();
        if !model.config.include_last_pool {
            pools.pop();
        }
        pools.contains(&backend_idx)
    }

    pub fn baseline_loss(&self) -> f64 {
        loss64(self.backend_inputs.last().unwrap(), &self.gt)
    }

    fn run_backend_from(&self, start: usize, first_layer: Option<&ConvLayer>) -> f64 {
        let n_front = self.model.config.front_branches.len();
        let mut x = self.backend_inputs[start].clone();
        for (i, layer) in self.model.layers[n_front..].iter().enumerate().skip(start) {
            let layer = if i == start {
                first_layer.unwrap_or(layer)
            } else {
                layer
            };
            x = relu64(&conv64(&x, layer));
            if Self::pooled_after(self.model, i + 1) {
                x = maxpool64(&x);
            }
        }
        loss64(&x, &self.gt)
    }

    /// Loss with one layer's parameters replaced.
    pub fn loss_with_layer(&self, slot: usize, layer: &ConvLayer) -> f64 {
        let n_front = self.model.config.front_branches.len();
        if slot < n_front {
            let pooled = maxpool64(&relu64(&conv64(&self.input, layer)));
            let refs: Vec<&Map64> = self
                .front_pooled
                .iter()
                .enumerate()
                .map(|(i, t)| if i == slot { &pooled } else { t })
                .collect();
            let mut x = concat64(&refs);
            for (i, l) in self.model.layers[n_front..].iter().enumerate() {
                x = relu64(&conv64(&x, l));
                if Self::pooled_after(self.model, i + 1) {
                    x = maxpool64(&x);
                }
            }
            loss64(&x, &self.gt)
        } else {
            self.run_backend_from(slot - n_front, Some(layer))
        }
    }

    /// Central finite differences over every parameter of every layer,
    /// flattened in slot order (weights then bias), matching
    /// `TapeGrads::flatten`.
    pub fn finite_diff_all(&self) -> Vec<f64> {
        let mut numeric = Vec::new();
        for (slot, layer) in self.model.layers.iter().enumerate() {
            let mut scratch = layer.clone();
            let wn = layer.weights.len();
            for wi in 0..wn + layer.bias.len() {
                let set = |l: &mut ConvLayer, v: f32| {
                    if wi < wn {
                        l.weights[wi] = v;
                    } else {
                        l.bias[wi - wn] = v;
                    }
                };
                let orig = if wi < wn {
                    layer.weights[wi]
                } else {
                    layer.bias[wi - wn]
                };
                set(&mut scratch, orig + FD_STEP);
                let up = self.loss_with_layer(slot, &scratch);
                set(&mut scratch, orig - FD_STEP);
                let down = self.loss_with_layer(slot, &scratch);
                set(&mut scratch, orig);
                numeric.push((up - down) / (2.0 * FD_STEP as f64));
            }
        }
        numeric
    }
}

/// Build a model whose weights are all positive with unit per-layer gain
/// (sum of absolute weights per output channel ~= 1) and small positive
/// biases. Together with a positive trending input this places the network
/// in a region with no ReLU or max-pool decision boundary within reach of
/// the finite-difference step, so central differences measure the gradient
/// exactly; see `audit_kink_margins`.
pub fn make_linear_region_model(cfg: &ccnn::model::CCNNConfig, seed: u64) -> Model {
    use rand::{Rng, SeedableRng};
    let mut model = ccnn::model::build(cfg, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for layer in &mut model.layers {
        let fan = (layer.kernel.0 * layer.kernel.1 * layer.in_channels) as f32;
        let w0 = 1.0 / (1.5 * fan);
        for w in &mut layer.weights {
            *w = rng.gen_range(w0..2.0 * w0);
        }
        for b in &mut layer.bias {
            *b = rng.gen_range(0.01..0.02);
        }
    }
    model
}

/// Positive input with a strong diagonal ramp plus mild noise; the ramp
/// gives every max-pool window a decisive winner.
pub fn ramp_input(h: usize, w: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let ramp = 0.8 * (x + y) as f32 / (h + w - 2) as f32;
            data.push(0.15 + ramp + rng.gen_range(0.0..0.05));
        }
    }
    Tensor::new((1, 1, h, w), data).unwrap()
}
