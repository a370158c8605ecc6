//! The compact crowd-counting network: three parallel front filters of
//! different receptive field, each pooled 2x2, channel-merged, then a
//! six-layer backend with pools after layers 3 and 4 and a 1x1 density head.
//! Also owns parameter counting, deterministic initialization, ablation
//! variants and checkpoint serialization.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::tape::{GradTape, NodeId};
use crate::tensor::{concat_channels, maxpool2x2, relu, Tensor};

/// Architecture description. Kernel sizes and channel widths per layer; the
/// defaults reproduce the 0.07M-parameter configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CCNNConfig {
    /// Front branches as `(kernel_size, out_channels)`, descending kernel size.
    pub front_branches: Vec<(usize, usize)>,
    /// Backend layers as `(kernel_size, out_channels)`; the last must be (1, 1).
    pub backend: Vec<(usize, usize)>,
    /// 1-based backend layer indices followed by a 2x2 max-pool.
    pub pool_after_backend: Vec<usize>,
    /// When false, the last pool in `pool_after_backend` is omitted.
    pub include_last_pool: bool,
    pub input_channels: usize,
}

impl Default for CCNNConfig {
    fn default() -> Self {
        CCNNConfig {
            front_branches: vec![(9, 10), (7, 14), (5, 16)],
            backend: vec![(3, 32), (3, 32), (3, 64), (3, 32), (3, 16), (1, 1)],
            pool_after_backend: vec![3, 4],
            include_last_pool: true,
            input_channels: 1,
        }
    }
}

/// Ablation variants: single-branch fronts keep the fused channel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Only5,
    Only7,
    Only9,
    NoLastPool,
    Full,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "only5" => Ok(Variant::Only5),
            "only7" => Ok(Variant::Only7),
            "only9" => Ok(Variant::Only9),
            "no_last_pool" => Ok(Variant::NoLastPool),
            "full" => Ok(Variant::Full),
            other => Err(Error::invalid_argument(format!(
                "unknown variant '{}' (expected only5|only7|only9|no_last_pool|full)",
                other
            ))),
        }
    }
}

/// Build the config for an ablation variant.
pub fn ablation_variant(which: Variant) -> CCNNConfig {
    let base = CCNNConfig::default();
    let fused: usize = base.front_branches.iter().map(|&(_, c)| c).sum();
    match which {
        Variant::Full => base,
        Variant::NoLastPool => CCNNConfig {
            include_last_pool: false,
            ..base
        },
        Variant::Only5 => CCNNConfig {
            front_branches: vec![(5, fused)],
            ..base
        },
        Variant::Only7 => CCNNConfig {
            front_branches: vec![(7, fused)],
            ..base
        },
        Variant::Only9 => CCNNConfig {
            front_branches: vec![(9, fused)],
            ..base
        },
    }
}

impl CCNNConfig {
    pub fn validate(&self) -> Result<()> {
        if self.front_branches.is_empty() {
            return Err(Error::InvalidConfig("no front branches".into()));
        }
        for &(k, c) in &self.front_branches {
            if k % 2 == 0 || c == 0 {
                return Err(Error::InvalidConfig(format!(
                    "front branch ({}, {}) needs an odd kernel and nonzero width",
                    k, c
                )));
            }
        }
        for win in self.front_branches.windows(2) {
            if win[1].0 >= win[0].0 {
                return Err(Error::InvalidConfig(
                    "front branches must have strictly descending kernel sizes".into(),
                ));
            }
        }
        if self.backend.is_empty() {
            return Err(Error::InvalidConfig("empty backend".into()));
        }
        for &(k, c) in &self.backend {
            if k % 2 == 0 || c == 0 {
                return Err(Error::InvalidConfig(format!(
                    "backend layer ({}, {}) needs an odd kernel and nonzero width",
                    k, c
                )));
            }
        }
        let last = *self.backend.last().unwrap();
        if last != (1, 1) {
            return Err(Error::InvalidConfig(format!(
                "last backend layer must be (1, 1) to form the density head, got {:?}",
                last
            )));
        }
        for &i in &self.pool_after_backend {
            if i < 1 || i > self.backend.len() {
                return Err(Error::InvalidConfig(format!(
                    "pool index {} out of backend range 1..={}",
                    i,
                    self.backend.len()
                )));
            }
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidConfig("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Backend pool indices actually applied, honoring `include_last_pool`.
    fn active_pools(&self) -> Vec<usize> {
        let mut pools = self.pool_after_backend.clone();
        pools.sort_unstable();
        if !self.include_last_pool {
            pools.pop();
        }
        pools
    }

    /// Ratio of input to output spatial resolution (8 for the full model).
    pub fn downsampling_factor(&self) -> usize {
        // one pool per front branch (applied in parallel) plus backend pools
        2 * (1 << self.active_pools().len())
    }

    /// Fused channel width after merging the pooled front branches.
    pub fn fused_channels(&self) -> usize {
        self.front_branches.iter().map(|&(_, c)| c).sum()
    }

    /// Canonical JSON bytes (UTF-8, sorted keys).
    pub fn canonical_json(&self) -> Vec<u8> {
        // serde_json::Value orders object keys, which gives the sorted form
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_vec(&value).expect("value serializes")
    }
}

/// Total parameter count: `(kh*kw*cin + 1) * cout` summed over every layer.
pub fn count_parameters(config: &CCNNConfig) -> usize {
    let mut total = 0;
    for &(k, c) in &config.front_branches {
        total += (k * k * config.input_channels + 1) * c;
    }
    let mut cin = config.fused_channels();
    for &(k, c) in &config.backend {
        total += (k * k * cin + 1) * c;
        cin = c;
    }
    total
}

/// A C-CNN instance: config plus every layer's parameters in deterministic
/// order (front branches by descending kernel size, then backend in order).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: CCNNConfig,
    pub layers: Vec<ConvLayer>,
}

/// Initialize a model with N(0, 0.01) weights and zero biases from a
/// deterministic PRNG; identical `(config, seed)` gives identical bytes.
pub fn build(config: &CCNNConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.01).expect("valid std");
    let mut layers = Vec::new();
    let make = |kernel: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
        let weights: Vec<f32> = (0..cout * cin * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        ConvLayer::new((kernel, kernel), cin, cout, weights, vec![0.0; cout])
    };
    for &(k, c) in &config.front_branches {
        layers.push(make(k, config.input_channels, c, &mut rng)?);
    }
    let mut cin = config.fused_channels();
    for &(k, c) in &config.backend {
        layers.push(make(k, cin, c, &mut rng)?);
        cin = c;
    }
    Ok(Model {
        config: config.clone(),
        layers,
    })
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.shape();
        if c != self.config.input_channels {
            return Err(Error::invalid_argument(format!(
                "input has {} channels, model expects {}",
                c, self.config.input_channels
            )));
        }
        let f = self.config.downsampling_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid_argument(format!(
                "input {}x{} not divisible by the downsampling factor {}; crop to a multiple of {} first",
                h, w, f, f
            )));
        }
        Ok(())
    }

    /// Inference forward pass; output is `(n, 1, h/factor, w/factor)`,
    /// nonnegative.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let n_front = self.config.front_branches.len();
        let mut branches = Vec::with_capacity(n_front);
        for slot in 0..n_front {
            let c = crate::conv::conv2d_forward(image, &self.layers[slot])?;
            branches.push(maxpool2x2(&relu(&c))?);
        }
        let refs: Vec<&Tensor> = branches.iter().collect();
        let mut x = concat_channels(&refs)?;
        let pools = self.config.active_pools();
        for (i, layer) in self.layers[n_front..].iter().enumerate() {
            let idx = i + 1; // 1-based backend index
            x = relu(&crate::conv::conv2d_forward(&x, layer)?);
            if pools.contains(&idx) {
                x = maxpool2x2(&x)?;
            }
        }
        Ok(x)
    }

    /// Forward pass recorded on a tape for training; returns the tape and the
    /// output node.
    pub fn forward_tape<'m>(&'m self, image: Tensor) -> Result<(GradTape<'m>, NodeId)> {
        self.check_input(&image)?;
        let mut tape = GradTape::new(&self.layers);
        let input = tape.input(image);
        let n_front = self.config.front_branches.len();
        let mut branch_nodes = Vec::with_capacity(n_front);
        for slot in 0..n_front {
            let c = tape.conv(input, slot)?;
            let r = tape.relu(c);
            branch_nodes.push(tape.maxpool(r)?);
        }
        let mut x = tape.concat(&branch_nodes)?;
        let pools = self.config.active_pools();
        for i in 0..self.config.backend.len() {
            let idx = i + 1;
            let c = tape.conv(x, n_front + i)?;
            x = tape.relu(c);
            if pools.contains(&idx) {
                x = tape.maxpool(x)?;
            }
        }
        Ok((tape, x))
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CCN1";
const CKPT_VERSION: u32 = 1;

/// Checkpoint format: magic "CCN1", version u32 LE, u32 LE config JSON byte
/// length, canonical config JSON, then per layer in deterministic order the
/// weights then bias as f32 LE.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let json = model.config.canonical_json();
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for layer in &model.layers {
        for v in layer.weights.iter().chain(&layer.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let p = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(p.clone(), e))?;
    if buf.len() < 12 {
        return Err(Error::malformed(p, "truncated header"));
    }
    if &buf[0..4] != CKPT_MAGIC {
        return Err(Error::malformed(p, "bad magic (expected CCN1)"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::malformed(
            p,
            format!("unsupported version {} (expected {})", version, CKPT_VERSION),
        ));
    }
    let json_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() < 12 + json_len {
        return Err(Error::malformed(p, "truncated config block"));
    }
    let config: CCNNConfig =
        serde_json::from_slice(&buf[12..12 + json_len]).map_err(|e| Error::Json {
            path: p.clone(),
            source: e,
        })?;
    config
        .validate()
        .map_err(|e| Error::malformed(p.clone(), format!("invalid config in checkpoint: {}", e)))?;

    let expected_params = count_parameters(&config);
    let payload = &buf[12 + json_len..];
    if payload.len() != expected_params * 4 {
        return Err(Error::malformed(
            p,
            format!(
                "layer manifest mismatch: config declares {} parameters but file holds {} bytes of weights",
                expected_params,
                payload.len()
            ),
        ));
    }
    let mut model = build(&config, 0)?;
    let mut off = 0;
    for layer in &mut model.layers {
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            off += 4;
        }
    }
    Ok(model)
}
