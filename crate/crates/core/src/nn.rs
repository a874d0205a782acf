//! The screening network: a pluggable feature stem, cascaded dilated
//! residual blocks, global average pooling and a sigmoid head.
//!
//! Each block runs a plain 5x5 convolution and a 5x5 dilation-2 convolution
//! in parallel, concatenates the branches, applies spatial dropout, adds the
//! identity skip and finally an optional ReLU. With `branch_channels` at half
//! the input width the concatenation restores the input width and the skip
//! needs no projection.

use thiserror::Error;

use crate::autodiff::{Graph, Mode, NodeId, Padding};
use crate::rng::RngState;
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(
        "block input has {input} channels but the branches concatenate to {concat}; \
         enable the projection or fix branch_channels"
    )]
    ChannelMismatch { input: usize, concat: usize },
    #[error("batch shape {got:?} does not match expected {expected:?}")]
    BatchShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Where the trunk's input features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemKind {
    /// Three stride-2 5x5 convolutions with ReLU between, randomly
    /// initialized. Channel progression is proportional to out/5, 2*out/5,
    /// out, which at the default width of 320 gives 64, 128, 320. A
    /// 128x128 input yields 16x16 maps.
    RandomStem,
    /// The forward pass consumes an externally produced feature tensor
    /// directly, bypassing the stem.
    PrecomputedFeatures,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub in_channels: usize,
    /// Output channels of each parallel branch.
    pub branch_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub spatial_dropout_rate: f64,
    pub post_add_activation: bool,
    /// Insert a 1x1 projection on the skip path when the concatenated
    /// branch width differs from the input width.
    pub projection: bool,
}

impl BlockConfig {
    pub fn for_width(channels: usize, dropout_rate: f64, post_add_activation: bool) -> Self {
        Self {
            in_channels: channels,
            branch_channels: channels / 2,
            kernel: 5,
            dilation: 2,
            spatial_dropout_rate: dropout_rate,
            post_add_activation,
            projection: false,
        }
    }

    pub fn out_channels(&self) -> usize {
        2 * self.branch_channels
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub stem: StemKind,
    pub stem_out_channels: usize,
    pub num_blocks: usize,
    pub head_dropout_rate: f64,
    pub block_dropout_rate: f64,
    pub noise_sigma: f64,
    pub post_add_activation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (128, 128),
            stem: StemKind::RandomStem,
            stem_out_channels: 320,
            num_blocks: 4,
            head_dropout_rate: 0.5,
            block_dropout_rate: 0.2,
            noise_sigma: 1.0,
            post_add_activation: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(NnError::InvalidConfig("num_blocks must be >= 1".into()));
        }
        if self.stem_out_channels == 0 || self.stem_out_channels % 2 != 0 {
            return Err(NnError::InvalidConfig(format!(
                "stem_out_channels {} must be positive and divisible by 2",
                self.stem_out_channels
            )));
        }
        for (label, rate) in [
            ("head_dropout_rate", self.head_dropout_rate),
            ("block_dropout_rate", self.block_dropout_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(NnError::InvalidConfig(format!("{label} {rate} must be in [0, 1)")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(NnError::InvalidConfig(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(NnError::InvalidConfig("input_size must be positive".into()));
        }
        Ok(())
    }

    /// Stem channel progression, proportional to 64/128/320 at width 320.
    pub fn stem_channels(&self) -> [usize; 3] {
        let out = self.stem_out_channels;
        [(out / 5).max(1), (2 * out / 5).max(1), out]
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig::for_width(
            self.stem_out_channels,
            self.block_dropout_rate,
            self.post_add_activation,
        )
    }

    /// Spatial size of the stem output (three stride-2 stages).
    pub fn feature_size(&self) -> (usize, usize) {
        let mut (_h, _w): (usize, usize);
        let (mut h, mut w) = self.input_size;
        for _ in 0..3 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct BlockParams<E: Element> {
    pub branch_plain: ConvParams<E>,
    pub branch_dilated: ConvParams<E>,
    pub projection: Option<ConvParams<E>>,
}

/// The full trainable network. Confined to one thread while training;
/// shared freely for read-only inference.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    cfg: ModelConfig,
    stem: Option<[ConvParams<E>; 3]>,
    blocks: Vec<BlockParams<E>>,
    head: ConvParams<E>,
}

fn he_conv<E: Element>(
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut RngState,
) -> ConvParams<E> {
    let fan_in = in_c * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..out_c * in_c * k * k)
        .map(|_| E::from_f64(std * rng.next_normal()))
        .collect();
    ConvParams {
        weight: Tensor::new(vec![out_c, in_c, k, k], data).expect("conv init shape"),
        bias: Tensor::zeros(&[out_c]),
    }
}

impl<E: Element> Model<E> {
    /// Fan-in-scaled normal init for weights, zero biases. Parameters are
    /// drawn in registration order, so config plus seed determines every
    /// initial weight.
    pub fn build(cfg: ModelConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let stem = match cfg.stem {
            StemKind::RandomStem => {
                let [c1, c2, c3] = cfg.stem_channels();
                Some([
                    he_conv(c1, 1, 5, rng),
                    he_conv(c2, c1, 5, rng),
                    he_conv(c3, c2, 5, rng),
                ])
            }
            StemKind::PrecomputedFeatures => None,
        };
        let bc = cfg.block_config();
        if !bc.projection && bc.out_channels() != bc.in_channels {
            return Err(NnError::ChannelMismatch {
                input: bc.in_channels,
                concat: bc.out_channels(),
            });
        }
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for _ in 0..cfg.num_blocks {
            blocks.push(BlockParams {
                branch_plain: he_conv(bc.branch_channels, bc.in_channels, bc.kernel, rng),
                branch_dilated: he_conv(bc.branch_channels, bc.in_channels, bc.kernel, rng),
                projection: None,
            });
        }
        let c = cfg.stem_out_channels;
        let std = (2.0 / c as f64).sqrt();
        let wdata = (0..c).map(|_| E::from_f64(std * rng.next_normal())).collect();
        let head = ConvParams {
            weight: Tensor::new(vec![c, 1], wdata).expect("head init shape"),
            bias: Tensor::zeros(&[1]),
        };
        Ok(Self { cfg, stem, blocks, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Every trainable tensor with its archive name, in canonical order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        if let Some(stem) = &self.stem {
            for (i, conv) in stem.iter().enumerate() {
                out.push((format!("stem.conv{i}.weight"), &conv.weight));
                out.push((format!("stem.conv{i}.bias"), &conv.bias));
            }
        }
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.branch_plain.weight"), &block.branch_plain.weight));
            out.push((format!("block{i}.branch_plain.bias"), &block.branch_plain.bias));
            out.push((format!("block{i}.branch_dilated.weight"), &block.branch_dilated.weight));
            out.push((format!("block{i}.branch_dilated.bias"), &block.branch_dilated.bias));
            if let Some(proj) = &block.projection {
                out.push((format!("block{i}.projection.weight"), &proj.weight));
                out.push((format!("block{i}.projection.bias"), &proj.bias));
            }
        }
        out.push(("head.dense.weight".into(), &self.head.weight));
        out.push(("head.dense.bias".into(), &self.head.bias));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = Vec::new();
        if let Some(stem) = &mut self.stem {
            for (i, conv) in stem.iter_mut().enumerate() {
                out.push((format!("stem.conv{i}.weight"), &mut conv.weight));
                out.push((format!("stem.conv{i}.bias"), &mut conv.bias));
            }
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.branch_plain.weight"), &mut block.branch_plain.weight));
            out.push((format!("block{i}.branch_plain.bias"), &mut block.branch_plain.bias));
            out.push((
                format!("block{i}.branch_dilated.weight"),
                &mut block.branch_dilated.weight,
            ));
            out.push((format!("block{i}.branch_dilated.bias"), &mut block.branch_dilated.bias));
            if let Some(proj) = &mut block.projection {
                out.push((format!("block{i}.projection.weight"), &mut proj.weight));
                out.push((format!("block{i}.projection.bias"), &mut proj.bias));
            }
        }
        out.push(("head.dense.weight".into(), &mut self.head.weight));
        out.push(("head.dense.bias".into(), &mut self.head.bias));
        out
    }

    /// Number of parameters whose names start with `stem.`; they lead the
    /// canonical order, which is what `freeze_stem` relies on.
    pub fn stem_param_count(&self) -> usize {
        match &self.stem {
            Some(_) => 6,
            None => 0,
        }
    }

    fn expected_batch_shape(&self, n: usize) -> Vec<usize> {
        match self.cfg.stem {
            StemKind::RandomStem => vec![n, 1, self.cfg.input_size.0, self.cfg.input_size.1],
            StemKind::PrecomputedFeatures => {
                let (h, w) = self.cfg.feature_size();
                vec![n, self.cfg.stem_out_channels, h, w]
            }
        }
    }

    /// Builds the computation graph for one batch and returns the graph,
    /// the probability node `[N,1]` and the parameter leaves in canonical
    /// order. With `PrecomputedFeatures` the batch is consumed as the stem
    /// output, and its spatial size may be anything.
    pub fn forward_graph(
        &self,
        batch: &Tensor<E>,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Graph<E>, NodeId, Vec<NodeId>)> {
        let shape = batch.shape();
        if shape.len() != 4 {
            return Err(NnError::BatchShape {
                expected: self.expected_batch_shape(0),
                got: shape.to_vec(),
            });
        }
        let ok = match self.cfg.stem {
            StemKind::RandomStem => {
                shape[1] == 1
                    && (shape[2], shape[3]) == self.cfg.input_size
            }
            StemKind::PrecomputedFeatures => shape[1] == self.cfg.stem_out_channels,
        };
        if !ok {
            return Err(NnError::BatchShape {
                expected: self.expected_batch_shape(shape[0]),
                got: shape.to_vec(),
            });
        }

        let mut g = Graph::new();
        let mut param_ids = Vec::new();
        let x = g.leaf(batch.clone());

        let mut features = x;
        if let Some(stem) = &self.stem {
            for (i, conv) in stem.iter().enumerate() {
                let w = g.leaf(conv.weight.clone());
                let b = g.leaf(conv.bias.clone());
                param_ids.push(w);
                param_ids.push(b);
                features = g.conv2d(features, w, b, 2, 1, Padding::Same)?;
                if i < 2 {
                    features = g.relu(features);
                }
            }
        }

        let mut trunk = g.gaussian_noise(features, self.cfg.noise_sigma, mode, rng)?;
        let bc = self.cfg.block_config();
        for block in &self.blocks {
            let wa = g.leaf(block.branch_plain.weight.clone());
            let ba = g.leaf(block.branch_plain.bias.clone());
            let wb = g.leaf(block.branch_dilated.weight.clone());
            let bb = g.leaf(block.branch_dilated.bias.clone());
            param_ids.extend([wa, ba, wb, bb]);
            let proj = match &block.projection {
                Some(p) => {
                    let pw = g.leaf(p.weight.clone());
                    let pb = g.leaf(p.bias.clone());
                    param_ids.extend([pw, pb]);
                    Some((pw, pb))
                }
                None => None,
            };
            trunk = block_forward(&mut g, trunk, wa, ba, wb, bb, proj, &bc, mode, rng)?;
        }

        let pooled = g.global_avg_pool(trunk)?;
        let dropped = g.dropout(pooled, self.cfg.head_dropout_rate, mode, rng)?;
        let w = g.leaf(self.head.weight.clone());
        let b = g.leaf(self.head.bias.clone());
        param_ids.push(w);
        param_ids.push(b);
        let logits = g.dense(dropped, w, b)?;
        let probs = g.sigmoid(logits);
        Ok((g, probs, param_ids))
    }

    /// Deterministic inference: probabilities in (0,1), shape `[N,1]`.
    pub fn forward_eval(&self, batch: &Tensor<E>) -> Result<Tensor<E>> {
        let mut rng = RngState::new(0);
        let (g, probs, _) = self.forward_graph(batch, Mode::Eval, &mut rng)?;
        Ok(g.value(probs).clone())
    }
}

/// One dilated residual block on an already-built graph. `x` must carry
/// `cfg.in_channels` channels; the skip is the identity unless a projection
/// is supplied.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    plain_w: NodeId,
    plain_b: NodeId,
    dilated_w: NodeId,
    dilated_b: NodeId,
    projection: Option<(NodeId, NodeId)>,
    cfg: &BlockConfig,
    mode: Mode,
    rng: &mut RngState,
) -> Result<NodeId> {
    let in_c = g.value(x).shape()[1];
    if in_c != cfg.in_channels {
        return Err(NnError::BatchShape {
            expected: vec![cfg.in_channels],
            got: vec![in_c],
        });
    }
    if projection.is_none() && cfg.out_channels() != cfg.in_channels {
        return Err(NnError::ChannelMismatch {
            input: cfg.in_channels,
            concat: cfg.out_channels(),
        });
    }
    let a = g.conv2d(x, plain_w, plain_b, 1, 1, Padding::Same)?;
    let b = g.conv2d(x, dilated_w, dilated_b, 1, cfg.dilation, Padding::Same)?;
    let cat = g.concat_channels(a, b)?;
    let dropped = g.spatial_dropout(cat, cfg.spatial_dropout_rate, mode, rng)?;
    let skip = match projection {
        Some((pw, pb)) => g.conv2d(x, pw, pb, 1, 1, Padding::Same)?,
        None => x,
    };
    let sum = g.add(dropped, skip)?;
    Ok(if cfg.post_add_activation { g.relu(sum) } else { sum })
}
