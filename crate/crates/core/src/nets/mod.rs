//! The three players: a generator that writes a message into a cover, a
//! discriminator that reads it back (and scores real versus generated), and a
//! steganalyzer whose first layer is a fixed high-pass residual filter.
//!
//! Images enter as `[N, 1, side, side]` tensors in [−1, 1]. Messages enter the
//! generator as `{−1, +1}` vectors; slots beyond a short message are fed 0.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};

use rand_distr::{Distribution, Normal};

use crate::data::{BitMessage, GrayImage};
use crate::metrics::payload_bits;
use crate::rng::keyed_rng;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use crate::Error;

pub const INIT_STD: f64 = 0.02;
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

/// Trainable scalar count of [`NetConfig::default`]: generator 749 425,
/// discriminator 251 479, steganalyzer 205 425.
pub const DEFAULT_PARAM_COUNT: usize = 1_206_329;

/// The KV residual kernel, row-major, before the 1/12 factor.
pub const KV_KERNEL: [f64; 25] = [
    -1.0, 2.0, -2.0, 2.0, -1.0, //
    2.0, -6.0, 8.0, -6.0, 2.0, //
    -2.0, 8.0, -12.0, 8.0, -2.0, //
    2.0, -6.0, 8.0, -6.0, 2.0, //
    -1.0, 2.0, -2.0, 2.0, -1.0,
];

pub fn kv_kernel() -> Tensor {
    Tensor::from_parts(vec![1, 1, 5, 5], KV_KERNEL.iter().map(|v| v / 12.0).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub image_side: usize,
    pub message_len: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_side: 32,
            message_len: 102,
            base_channels: 16,
            leaky_slope: 0.2,
        }
    }
}

impl NetConfig {
    /// Config whose message length is the payload of `side²` pixels at `bpp`.
    pub fn for_payload(image_side: usize, bpp: f64) -> std::result::Result<Self, Error> {
        let cfg = NetConfig {
            image_side,
            message_len: payload_bits(image_side, bpp)?,
            ..NetConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_side;
        if s == 0 || s % 16 != 0 {
            return Err(TensorError::Contract(format!("image side {s} is not a positive multiple of 16")));
        }
        if self.message_len == 0 || self.message_len > s * s {
            return Err(TensorError::Contract(format!(
                "message length {} outside 1..={}",
                self.message_len,
                s * s
            )));
        }
        if self.base_channels == 0 {
            return Err(TensorError::Contract("base_channels must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(TensorError::Contract(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Side of the smallest feature map (after four stride-2 stages).
    pub fn block_side(&self) -> usize {
        self.image_side / 16
    }

    /// Channel widths of the four conv stages: b, 2b, 4b, 8b.
    fn widths(&self) -> [usize; 5] {
        let b = self.base_channels;
        [1, b, 2 * b, 4 * b, 8 * b]
    }

    fn flat_features(&self) -> usize {
        8 * self.base_channels * self.block_side() * self.block_side()
    }
}

/// Weight and bias of one dense or convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn zeroed(weight_shape: &[usize], bias_len: usize) -> Self {
        Layer {
            weight: Tensor::zeros(weight_shape),
            bias: Tensor::zeros(&[bias_len]),
        }
    }
}

/// Graph handles of a [`Layer`].
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

/// Shared plumbing for the three parameter sets.
pub trait Network {
    /// Layer names, in storage order.
    fn layer_names(&self) -> Vec<&'static str>;
    fn layers(&self) -> Vec<&Layer>;
    fn layers_mut(&mut self) -> Vec<&mut Layer>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.layers().into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// `layer.weight`, `layer.bias`, … in the order of [`Network::tensors`].
    fn tensor_names(&self) -> Vec<String> {
        self.layer_names()
            .into_iter()
            .flat_map(|n| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Adds every layer to `g`: as gradient-tracked leaves when `trainable`,
    /// otherwise as constants.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<BoundLayer> {
        self.layers()
            .into_iter()
            .map(|l| {
                let mut add = |t: &Tensor| {
                    if trainable {
                        g.param(t)
                    } else {
                        g.constant(t.clone().with_requires_grad(false))
                    }
                };
                BoundLayer {
                    weight: add(&l.weight),
                    bias: add(&l.bias),
                }
            })
            .collect()
    }

    /// Moves the gradients of `bound` out of `g` into the parameter tensors.
    /// Parameters the loss does not reach get a zero gradient.
    fn collect_grads(&mut self, g: &mut Graph, bound: &[BoundLayer]) -> Result<()> {
        for (layer, b) in self.layers_mut().into_iter().zip(bound) {
            for (t, v) in [(&mut layer.weight, b.weight), (&mut layer.bias, b.bias)] {
                let grad = g.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]);
                t.set_grad(grad)?;
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub fc: Layer,
    pub deconv: [Layer; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub conv: [Layer; 4],
    pub trunk: Layer,
    pub realfake: Layer,
    pub decode: Layer,
}

/// The high-pass kernel is not stored here; see [`kv_kernel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SteganalyzerParams {
    pub conv: [Layer; 4],
    pub hidden: Layer,
    pub out: Layer,
}

impl Network for GeneratorParams {
    fn layer_names(&self) -> Vec<&'static str> {
        vec!["fc", "deconv1", "deconv2", "deconv3", "deconv4"]
    }

    fn layers(&self) -> Vec<&Layer> {
        std::iter::once(&self.fc).chain(&self.deconv).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        std::iter::once(&mut self.fc).chain(&mut self.deconv).collect()
    }
}

impl Network for DiscriminatorParams {
    fn layer_names(&self) -> Vec<&'static str> {
        vec!["conv1", "conv2", "conv3", "conv4", "trunk", "realfake", "decode"]
    }

    fn layers(&self) -> Vec<&Layer> {
        self.conv.iter().chain([&self.trunk, &self.realfake, &self.decode]).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        self.conv
            .iter_mut()
            .chain([&mut self.trunk, &mut self.realfake, &mut self.decode])
            .collect()
    }
}

impl Network for SteganalyzerParams {
    fn layer_names(&self) -> Vec<&'static str> {
        vec!["conv1", "conv2", "conv3", "conv4", "hidden", "out"]
    }

    fn layers(&self) -> Vec<&Layer> {
        self.conv.iter().chain([&self.hidden, &self.out]).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        self.conv.iter_mut().chain([&mut self.hidden, &mut self.out]).collect()
    }
}

fn conv_stack(cfg: &NetConfig) -> [Layer; 4] {
    let w = cfg.widths();
    std::array::from_fn(|i| Layer::zeroed(&[w[i + 1], w[i], KERNEL, KERNEL], w[i + 1]))
}

impl GeneratorParams {
    pub fn zeroed(cfg: &NetConfig) -> Self {
        let w = cfg.widths();
        let side = cfg.image_side;
        // Transposed kernels are stored F×C and map F channels down to C.
        GeneratorParams {
            fc: Layer::zeroed(&[side * side + cfg.message_len, cfg.flat_features()], cfg.flat_features()),
            deconv: std::array::from_fn(|i| Layer::zeroed(&[w[4 - i], w[3 - i], KERNEL, KERNEL], w[3 - i])),
        }
    }
}

impl DiscriminatorParams {
    pub fn zeroed(cfg: &NetConfig) -> Self {
        let hidden = 8 * cfg.base_channels;
        DiscriminatorParams {
            conv: conv_stack(cfg),
            trunk: Layer::zeroed(&[cfg.flat_features(), hidden], hidden),
            realfake: Layer::zeroed(&[hidden, 1], 1),
            decode: Layer::zeroed(&[hidden, cfg.message_len], cfg.message_len),
        }
    }
}

impl SteganalyzerParams {
    pub fn zeroed(cfg: &NetConfig) -> Self {
        let hidden = 4 * cfg.base_channels;
        SteganalyzerParams {
            conv: conv_stack(cfg),
            hidden: Layer::zeroed(&[cfg.flat_features(), hidden], hidden),
            out: Layer::zeroed(&[hidden, 1], 1),
        }
    }
}

/// All three parameter sets under one config.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub config: NetConfig,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub steganalyzer: SteganalyzerParams,
}

fn fill_normal<N: Network>(net: &mut N, seed: u64, domain: &str) {
    let mut rng = keyed_rng(seed, domain);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for layer in net.layers_mut() {
        for w in layer.weight.data_mut() {
            *w = normal.sample(&mut rng);
        }
    }
}

/// Weights ~ N(0, 0.02²), biases 0.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<Nets> {
    config.validate()?;
    let mut nets = Nets::zeroed(config);
    fill_normal(&mut nets.generator, seed, "init-generator");
    fill_normal(&mut nets.discriminator, seed, "init-discriminator");
    fill_normal(&mut nets.steganalyzer, seed, "init-steganalyzer");
    Ok(nets)
}

impl Nets {
    pub fn zeroed(config: &NetConfig) -> Self {
        Nets {
            config: config.clone(),
            generator: GeneratorParams::zeroed(config),
            discriminator: DiscriminatorParams::zeroed(config),
            steganalyzer: SteganalyzerParams::zeroed(config),
        }
    }

    pub fn param_count(&self) -> usize {
        self.generator.param_count() + self.discriminator.param_count() + self.steganalyzer.param_count()
    }

    /// Embeds one message per cover and returns the 8-bit stego images.
    pub fn embed(&self, covers: &[&GrayImage], messages: &[&BitMessage]) -> Result<Vec<GrayImage>> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(cfg, covers)?);
        let m = g.constant(messages_to_tensor(cfg, messages)?);
        let gp = self.generator.bind(&mut g, false);
        let s = generator_forward(&mut g, cfg, &gp, x, m)?;
        tensor_to_images(cfg, g.value(s))
    }

    /// Per-image real/fake probability and decoded bit probabilities.
    pub fn discriminate(&self, images: &[&GrayImage]) -> Result<Vec<(f64, Vec<f64>)>> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(cfg, images)?);
        let dp = self.discriminator.bind(&mut g, false);
        let out = discriminator_forward(&mut g, cfg, &dp, x)?;
        let (rf, dec) = (g.value(out.realfake).data(), g.value(out.decoded).data());
        let l = cfg.message_len;
        Ok((0..images.len()).map(|i| (rf[i], dec[i * l..(i + 1) * l].to_vec())).collect())
    }

    /// Thresholds the decode head at 0.5 and keeps the first `length` bits.
    pub fn extract(&self, images: &[&GrayImage], length: usize) -> Result<Vec<BitMessage>> {
        if length > self.config.message_len {
            return Err(TensorError::Contract(format!(
                "{length} bits requested from a {}-bit decoder",
                self.config.message_len
            )));
        }
        Ok(self
            .discriminate(images)?
            .into_iter()
            .map(|(_, probs)| probs[..length].iter().map(|&p| p >= 0.5).collect())
            .collect())
    }

    /// Per-image probability of being a cover.
    pub fn cover_probability(&self, images: &[&GrayImage]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(cfg, images)?);
        let sp = self.steganalyzer.bind(&mut g, false);
        let p = steganalyzer_forward(&mut g, cfg, &sp, x)?;
        Ok(g.value(p).data().to_vec())
    }
}

/// Stacks images into `[N, 1, side, side]` in [−1, 1].
pub fn images_to_tensor(cfg: &NetConfig, images: &[&GrayImage]) -> Result<Tensor> {
    let side = cfg.image_side;
    if images.is_empty() {
        return Err(TensorError::Contract("empty image batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * side * side);
    for im in images {
        if im.height() != side {
            return Err(TensorError::Dimension {
                op: "images_to_tensor",
                axis: 2,
                expected: side,
                found: im.height(),
            });
        }
        if im.width() != side {
            return Err(TensorError::Dimension {
                op: "images_to_tensor",
                axis: 3,
                expected: side,
                found: im.width(),
            });
        }
        data.extend(im.to_unit_range());
    }
    Tensor::new(vec![images.len(), 1, side, side], data)
}

/// Inverse of [`images_to_tensor`] with 8-bit rounding.
pub fn tensor_to_images(cfg: &NetConfig, t: &Tensor) -> Result<Vec<GrayImage>> {
    let side = cfg.image_side;
    let per = side * side;
    t.data()
        .chunks(per)
        .map(|c| GrayImage::from_unit_range(side, side, c).map_err(|e| TensorError::Contract(e.to_string())))
        .collect()
}

/// `[N, message_len]` of ±1, zero-padded past each message's end.
pub fn messages_to_tensor(cfg: &NetConfig, messages: &[&BitMessage]) -> Result<Tensor> {
    let l = cfg.message_len;
    let mut data = Vec::with_capacity(messages.len() * l);
    for m in messages {
        if m.len() > l {
            return Err(TensorError::Dimension {
                op: "messages_to_tensor",
                axis: 1,
                expected: l,
                found: m.len(),
            });
        }
        data.extend(m.to_signed());
        data.extend(std::iter::repeat(0.0).take(l - m.len()));
    }
    Tensor::new(vec![messages.len(), l], data)
}

fn check_images(op: &'static str, cfg: &NetConfig, shape: &[usize]) -> Result<usize> {
    let want = [0, 1, cfg.image_side, cfg.image_side];
    if shape.len() != 4 {
        return Err(TensorError::Rank {
            op,
            expected: 4,
            found: shape.len(),
        });
    }
    for axis in 1..4 {
        if shape[axis] != want[axis] {
            return Err(TensorError::Dimension {
                op,
                axis,
                expected: want[axis],
                found: shape[axis],
            });
        }
    }
    Ok(shape[0])
}

/// Runtime multiplier applied to a stored weight with `fan_in` inputs per
/// output. Stored weights stay N(0, 0.02²); the effective weights are
/// He-scaled for leaky layers (`leaky = true`) and unit-variance otherwise.
/// Without normalization layers the raw 0.02 scale shrinks the signal
/// geometrically with depth.
pub fn weight_gain(fan_in: usize, leaky: Option<f64>) -> f64 {
    let act = leaky.map_or(1.0, |a| 2.0 / (1.0 + a * a));
    (act / fan_in as f64).sqrt() / INIT_STD
}

fn dense(g: &mut Graph, x: Var, l: &BoundLayer, leaky: Option<f64>) -> Result<Var> {
    let fan_in = g.shape(l.weight)[0];
    let w = g.scale(l.weight, weight_gain(fan_in, leaky))?;
    let y = g.matmul(x, w)?;
    g.bias_add(y, l.bias)
}

fn conv_features(g: &mut Graph, cfg: &NetConfig, layers: &[BoundLayer], mut x: Var, n: usize) -> Result<Var> {
    let slope = cfg.leaky_slope;
    for l in layers {
        let fan_in = g.shape(l.weight)[1] * KERNEL * KERNEL;
        let w = g.scale(l.weight, weight_gain(fan_in, Some(slope)))?;
        x = g.conv2d(x, w, STRIDE, PAD)?;
        x = g.bias_add(x, l.bias)?;
        x = g.leaky_relu(x, slope)?;
    }
    g.reshape(x, &[n, cfg.flat_features()])
}

/// `cover`: `[N, 1, side, side]`; `message`: `[N, message_len]`.
/// Returns the stego tensor, same shape as `cover`, in [−1, 1].
pub fn generator_forward(g: &mut Graph, cfg: &NetConfig, p: &[BoundLayer], cover: Var, message: Var) -> Result<Var> {
    let n = check_images("generator", cfg, g.shape(cover))?;
    let ms = g.shape(message).to_vec();
    if ms != [n, cfg.message_len] {
        let axis = if ms.first() != Some(&n) { 0 } else { 1 };
        return Err(TensorError::Dimension {
            op: "generator",
            axis,
            expected: [n, cfg.message_len][axis],
            found: ms.get(axis).copied().unwrap_or(0),
        });
    }
    let side = cfg.image_side;
    let flat = g.reshape(cover, &[n, side * side])?;
    let input = g.concat(&[flat, message], 1)?;
    let slope = cfg.leaky_slope;
    let h = dense(g, input, &p[0], Some(slope))?;
    let h = g.leaky_relu(h, slope)?;
    let q = cfg.block_side();
    let mut x = g.reshape(h, &[n, 8 * cfg.base_channels, q, q])?;
    for (i, l) in p[1..].iter().enumerate() {
        let last = i == 3;
        // Each output of a stride-2 transposed conv sees (k/s)² taps per channel.
        let fan_in = g.shape(l.weight)[0] * (KERNEL / STRIDE) * (KERNEL / STRIDE);
        let w = g.scale(l.weight, weight_gain(fan_in, (!last).then_some(slope)))?;
        x = g.conv2d_transpose(x, w, STRIDE, PAD)?;
        x = g.bias_add(x, l.bias)?;
        x = if last { g.tanh(x)? } else { g.leaky_relu(x, slope)? };
    }
    Ok(x)
}

/// Graph outputs of the discriminator: `[N, 1]` and `[N, message_len]`.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    pub realfake: Var,
    pub decoded: Var,
}

pub fn discriminator_forward(g: &mut Graph, cfg: &NetConfig, p: &[BoundLayer], image: Var) -> Result<DiscriminatorOutput> {
    let n = check_images("discriminator", cfg, g.shape(image))?;
    let f = conv_features(g, cfg, &p[..4], image, n)?;
    let h = dense(g, f, &p[4], Some(cfg.leaky_slope))?;
    let h = g.leaky_relu(h, cfg.leaky_slope)?;
    let rf = dense(g, h, &p[5], None)?;
    let dec = dense(g, h, &p[6], None)?;
    Ok(DiscriminatorOutput {
        realfake: g.sigmoid(rf)?,
        decoded: g.sigmoid(dec)?,
    })
}

/// KV residual of `image`, `[N, 1, side, side]`. Borders are padded by
/// edge replication so a constant image has a zero residual everywhere.
pub fn high_pass(g: &mut Graph, image: Var) -> Result<Var> {
    // Integer taps first, then the 1/12: the taps then cancel exactly.
    let k = g.constant(Tensor::from_parts(vec![1, 1, 5, 5], KV_KERNEL.to_vec()));
    let padded = g.pad_replicate(image, 2)?;
    let r = g.conv2d(padded, k, 1, 0)?;
    g.scale(r, 1.0 / 12.0)
}

/// `[N, 1]` probabilities that each image is a cover.
pub fn steganalyzer_forward(g: &mut Graph, cfg: &NetConfig, p: &[BoundLayer], image: Var) -> Result<Var> {
    let n = check_images("steganalyzer", cfg, g.shape(image))?;
    let r = high_pass(g, image)?;
    let f = conv_features(g, cfg, &p[..4], r, n)?;
    let h = dense(g, f, &p[4], Some(cfg.leaky_slope))?;
    let h = g.leaky_relu(h, cfg.leaky_slope)?;
    let z = dense(g, h, &p[5], None)?;
    g.sigmoid(z)
}

#[cfg(test)]
mod tests;
