//! U-Net with interchangeable downsampling layers.
//!
//! Three families share one architecture and one parameter layout:
//! max pooling (the baseline), BlurPool with a single blur size at every
//! level, and pyramidal BlurPool where the blur size shrinks with depth.
//! Blur kernels are fixed, so all variants have the same parameter count.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamStore, Tape, Var};
use crate::ops::{binomial_kernel, Conv2dOptions, Padding, PoolKind, PoolSpec};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};

/// Which downsampling layer the encoder uses.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DownsamplingSpec {
    MaxPool,
    BlurPool(usize),
    Pyramidal(Vec<usize>),
}

impl DownsamplingSpec {
    /// Default pyramidal schedule for four downsamplings.
    pub fn pyramidal_default() -> Self {
        DownsamplingSpec::Pyramidal(vec![7, 5, 3, 2])
    }

    /// Pool layer used at encoder level `level` (0 = first downsampling).
    pub fn pool_spec(&self, level: usize) -> PoolSpec {
        match self {
            DownsamplingSpec::MaxPool => PoolSpec::max_pool(),
            DownsamplingSpec::BlurPool(m) => PoolSpec::blur_pool(*m),
            DownsamplingSpec::Pyramidal(sizes) => PoolSpec {
                kind: PoolKind::PyramidalSlot,
                ..PoolSpec::blur_pool(sizes[level])
            },
        }
    }

    fn violations(&self, depth: usize) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            DownsamplingSpec::MaxPool => {}
            DownsamplingSpec::BlurPool(m) => {
                if ![3, 5, 7].contains(m) {
                    v.push(format!("BlurPool size {m} not in {{3, 5, 7}}"));
                }
            }
            DownsamplingSpec::Pyramidal(sizes) => {
                if sizes.len() != depth {
                    v.push(format!(
                        "pyramidal schedule has {} sizes but depth is {depth}",
                        sizes.len()
                    ));
                }
                if let Some(bad) = sizes.iter().find(|m| ![7, 5, 3, 2].contains(*m)) {
                    v.push(format!("pyramidal size {bad} not in {{7, 5, 3, 2}}"));
                }
                if sizes.windows(2).any(|w| w[1] > w[0]) {
                    v.push(format!(
                        "pyramidal schedule {sizes:?} is not non-increasing"
                    ));
                }
            }
        }
        v
    }
}

impl fmt::Display for DownsamplingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DownsamplingSpec::MaxPool => "baseline".to_string(),
            DownsamplingSpec::BlurPool(m) => format!("bp{m}"),
            DownsamplingSpec::Pyramidal(s) if *s == [7, 5, 3, 2] => "pbp".to_string(),
            DownsamplingSpec::Pyramidal(s) => {
                let parts: Vec<String> = s.iter().map(|m| m.to_string()).collect();
                format!("pbp:{}", parts.join("-"))
            }
        };
        f.pad(&name)
    }
}

impl FromStr for DownsamplingSpec {
    type Err = Error;

    /// Accepts `baseline`/`maxpool`, `bp<m>`, `pbp` and `pbp:<m>-<m>-...`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(vec![format!("unknown downsampling variant `{s}`")]);
        match s {
            "baseline" | "maxpool" => return Ok(DownsamplingSpec::MaxPool),
            "pbp" => return Ok(DownsamplingSpec::pyramidal_default()),
            _ => {}
        }
        if let Some(m) = s.strip_prefix("bp") {
            return m.parse().map(DownsamplingSpec::BlurPool).map_err(|_| bad());
        }
        if let Some(list) = s.strip_prefix("pbp:") {
            let sizes: std::result::Result<Vec<usize>, _> =
                list.split('-').map(|p| p.trim().parse()).collect();
            return sizes.map(DownsamplingSpec::Pyramidal).map_err(|_| bad());
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub downsampling: DownsamplingSpec,
    pub input_size: (usize, usize),
    /// Border mode of the 3x3 convolutions and of dense max pooling.
    pub padding: Padding,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 4,
            downsampling: DownsamplingSpec::MaxPool,
            input_size: (128, 128),
            padding: Padding::Zero,
        }
    }
}

impl UNetConfig {
    pub fn with_downsampling(mut self, d: DownsamplingSpec) -> Self {
        self.downsampling = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.base_channels == 0 {
            v.push("base_channels must be >= 1".to_string());
        }
        if self.depth == 0 {
            v.push("depth must be >= 1".to_string());
        }
        let unit = 1usize << self.depth.min(30);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            v.push(format!(
                "input size {h}x{w} is not divisible by 2^depth = {unit}"
            ));
        }
        v.extend(self.downsampling.violations(self.depth));
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Encoder output channels per level; the deepest level is halved so the
    /// decoder can mirror it after bilinear upsampling.
    pub fn encoder_channels(&self) -> Vec<usize> {
        let c = self.base_channels;
        (0..=self.depth)
            .map(|l| {
                if l == self.depth {
                    c << (l - 1)
                } else {
                    c << l
                }
            })
            .collect()
    }

    /// `(in, mid, out)` channels of the decoder block at level `l`.
    pub fn decoder_channels(&self, l: usize) -> (usize, usize, usize) {
        let enc = self.encoder_channels();
        let below = if l + 1 == self.depth {
            enc[self.depth]
        } else {
            self.decoder_channels(l + 1).2
        };
        let cin = below + enc[l];
        let cout = if l == 0 {
            self.base_channels
        } else {
            enc[l - 1]
        };
        (cin, cin / 2, cout)
    }

    /// Input spatial size and pooling layer of each downsampling, shallowest first.
    pub fn downsampling_layers(&self) -> Vec<((usize, usize), PoolSpec)> {
        let (h, w) = self.input_size;
        (0..self.depth)
            .map(|l| ((h >> l, w >> l), self.downsampling.pool_spec(l)))
            .collect()
    }

    fn layers(&self) -> Vec<ConvLayer> {
        let enc = self.encoder_channels();
        let mut layers = Vec::new();
        let mut cin = 1;
        for (l, &c) in enc.iter().enumerate() {
            layers.push(ConvLayer::new(format!("enc{l}.conv1"), cin, c, 3));
            layers.push(ConvLayer::new(format!("enc{l}.conv2"), c, c, 3));
            cin = c;
        }
        for l in (0..self.depth).rev() {
            let (i, m, o) = self.decoder_channels(l);
            layers.push(ConvLayer::new(format!("dec{l}.conv1"), i, m, 3));
            layers.push(ConvLayer::new(format!("dec{l}.conv2"), m, o, 3));
        }
        layers.push(ConvLayer::new("head".into(), self.base_channels, 1, 1));
        layers
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    name: String,
    c_in: usize,
    c_out: usize,
    k: usize,
}

impl ConvLayer {
    fn new(name: String, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            name,
            c_in,
            c_out,
            k,
        }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// The recorded computation of a U-Net; parameters come from a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNetGraph {
    config: UNetConfig,
}

impl UNetGraph {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn conv_opts(&self) -> Conv2dOptions {
        Conv2dOptions {
            stride: 1,
            padding: self.config.padding,
        }
    }

    fn conv<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
        name: &str,
    ) -> crate::autodiff::Result<Var> {
        let w = tape.param_from(params, &format!("{name}.weight"))?;
        let b = tape.param_from(params, &format!("{name}.bias"))?;
        tape.conv2d(x, w, Some(b), self.conv_opts())
    }

    fn double_conv<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
        block: &str,
    ) -> crate::autodiff::Result<Var> {
        let h = self.conv(tape, params, x, &format!("{block}.conv1"))?;
        let h = tape.relu(h)?;
        let h = self.conv(tape, params, h, &format!("{block}.conv2"))?;
        tape.relu(h)
    }

    fn dense_padding(&self) -> Padding {
        match self.config.padding {
            Padding::Circular => Padding::Circular,
            _ => Padding::Replicate,
        }
    }

    fn downsample<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        level: usize,
    ) -> crate::autodiff::Result<Var> {
        let spec = self.config.downsampling.pool_spec(level);
        match spec.kind {
            PoolKind::MaxPool => tape.maxpool(x, spec.window, spec.stride),
            _ => {
                let kernel = binomial_kernel(spec.blur_size.expect("validated config"))
                    .expect("validated config");
                let dense = tape.dense_maxpool_padded(x, spec.window, self.dense_padding())?;
                tape.blur_subsample(dense, &kernel, spec.stride)
            }
        }
    }

    /// Records the stride-1 prefix of the network: the first encoder block
    /// followed by the dense max of the first downsampling layer (before any
    /// subsampling). Max-pool networks stop after the first block.
    pub fn stride1_prefix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
    ) -> crate::autodiff::Result<Var> {
        let h = self.double_conv(tape, params, x, "enc0")?;
        let spec = self.config.downsampling.pool_spec(0);
        match spec.kind {
            PoolKind::MaxPool => Ok(h),
            _ => tape.dense_maxpool_padded(h, spec.window, self.dense_padding()),
        }
    }

    /// Records the network on an existing input node.
    pub fn record<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
    ) -> crate::autodiff::Result<Var> {
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = self.double_conv(tape, params, x, "enc0")?;
        for l in 1..=depth {
            skips.push(h);
            let d = self.downsample(tape, h, l - 1)?;
            h = self.double_conv(tape, params, d, &format!("enc{l}"))?;
        }
        for l in (0..depth).rev() {
            let up = tape.bilinear_upsample(h)?;
            let cat = tape.concat_channels(skips[l], up)?;
            h = self.double_conv(tape, params, cat, &format!("dec{l}"))?;
        }
        let logits = self.conv(tape, params, h, "head")?;
        tape.sigmoid(logits)
    }
}

impl<T: Scalar> Graph<T> for UNetGraph {
    fn build(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> crate::autodiff::Result<Var> {
        let x = tape.bound("image")?;
        self.record(tape, params, x)
    }
}

/// Anything that maps a `[N, 1, H, W]` batch to per-pixel probabilities.
pub trait Segmenter {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A U-Net architecture together with its weights.
#[derive(Debug, Clone)]
pub struct UNet<T: Scalar = f32> {
    graph: UNetGraph,
    params: ParamStore<T>,
}

/// Builds a U-Net and initializes it with [`init_lecun`].
pub fn build_unet<T: Scalar>(config: UNetConfig, seed: u64) -> Result<UNet<T>> {
    let graph = UNetGraph::new(config)?;
    let mut params = ParamStore::new();
    for layer in graph.config.layers() {
        params.insert(
            layer.weight(),
            Tensor::zeros(&[layer.c_out, layer.c_in, layer.k, layer.k]),
        );
        params.insert(layer.bias(), Tensor::zeros(&[layer.c_out]));
    }
    let mut net = UNet { graph, params };
    init_lecun(&mut net, seed);
    Ok(net)
}

/// LeCun normal initialization: weights ~ N(0, 1/fan_in), biases zero.
///
/// Draws follow parameter registration order from a ChaCha8 stream keyed by
/// `seed`, so equal seeds give identical networks regardless of scalar type.
pub fn init_lecun<T: Scalar>(net: &mut UNet<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in net.graph.config.layers() {
        let fan_in = (layer.c_in * layer.k * layer.k) as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
        let w = net.params.get_mut(&layer.weight()).expect("registered");
        for v in w.data_mut() {
            *v = T::from_f64_lossy(normal.sample(&mut rng));
        }
        let b = net.params.get_mut(&layer.bias()).expect("registered");
        b.data_mut().fill(T::zero());
    }
}

impl<T: Scalar> UNet<T> {
    pub fn from_parts(config: UNetConfig, params: ParamStore<T>) -> Result<Self> {
        let graph = UNetGraph::new(config)?;
        for layer in graph.config.layers() {
            for (name, shape) in [
                (
                    layer.weight(),
                    vec![layer.c_out, layer.c_in, layer.k, layer.k],
                ),
                (layer.bias(), vec![layer.c_out]),
            ] {
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Checkpoint(format!(
                            "parameter {name} has shape {:?}, expected {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                }
            }
        }
        Ok(Self { graph, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.graph.config
    }

    pub fn graph(&self) -> &UNetGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            graph: self.graph.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        let (eh, ew) = self.graph.config.input_size;
        if c != 1 || h != eh || w != ew {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                expected: format!("[N, 1, {eh}, {ew}]"),
                actual: batch.shape().to_vec(),
            }
            .into());
        }
        Ok(())
    }

    /// Records the network on `tape` for a `[N, 1, H, W]` batch.
    pub fn forward_on(&self, tape: &mut Tape<T>, batch: &Tensor<T>) -> Result<Var> {
        self.check_input(batch)?;
        Ok(tape.forward(
            &self.graph,
            &self.params,
            [("image".to_string(), batch.clone())],
        )?)
    }

    /// Per-pixel probabilities for a batch, without keeping the tape.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, batch)?;
        Ok(tape.value(out).clone())
    }
}

/// Runs the forward pass on `batch` in chunks of at most `chunk` samples.
pub fn model_forward<T: Scalar>(
    model: &UNet<T>,
    batch: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let samples = batch.unstack();
    let mut out = Vec::with_capacity(samples.len());
    for group in samples.chunks(chunk.max(1)) {
        let y = model.forward(&Tensor::stack(group)?)?;
        out.extend(y.unstack());
    }
    Ok(Tensor::stack(&out)?)
}

impl Segmenter for UNet<f32> {
    fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        model_forward(self, batch, 8)
    }
}
