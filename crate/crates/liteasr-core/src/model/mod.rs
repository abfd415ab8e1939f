//! Depth-parameterized conformer-lite encoder with a strided
//! depthwise-separable subsampling frontend and a linear classifier head.
//!
//! Block layout: half-step feed-forward, multi-head self-attention,
//! depthwise-convolution module, half-step feed-forward, final layer norm.
//! Padded time steps are excluded from attention via additive key masks and
//! zeroed before every time-mixing convolution, so valid outputs are
//! invariant to the amount of trailing padding.

mod checkpoint;
mod prune;
mod slice;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION, SHCK_MAGIC};
pub use prune::{magnitude_prune, PruneReport};
pub use slice::{init_from_slice, SliceReport};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{Bound, ParamId, ParamSet, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Additive mask value for disallowed attention positions. Large but finite
/// so masked logits vanish under softmax without producing NaN/Inf.
pub(crate) const NEG_FILL: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub conv_kernel_width: usize,
    /// Total time subsampling; 1, 2 or 4 (one stride-2 stage per factor of 2).
    pub subsample_factor: usize,
    pub n_mels: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    /// 12-layer reference configuration (feed-forward dim 256), landing at
    /// roughly 18.6 M parameters with a 256-token vocabulary.
    pub fn reference() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 400,
            ff_dim: 256,
            n_heads: 4,
            conv_kernel_width: 15,
            subsample_factor: 4,
            n_mels: 80,
            vocab_size: 256,
            dropout_p: 0.1,
        }
    }

    /// Small configuration for desk-scale experiments.
    pub fn toy(n_layers: usize, d_model: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            ff_dim: 2 * d_model,
            n_heads: 4,
            conv_kernel_width: 7,
            subsample_factor: 4,
            n_mels: 80,
            vocab_size,
            dropout_p: 0.1,
        }
    }

    /// Same architecture at a different depth (lightweight / tiny variants).
    pub fn with_layers(&self, n_layers: usize) -> Self {
        ModelConfig {
            n_layers,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be positive and divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("ff_dim must be >= 1".into()));
        }
        if self.conv_kernel_width % 2 == 0 || self.conv_kernel_width == 0 {
            return Err(Error::Config(format!(
                "conv_kernel_width must be odd, got {}",
                self.conv_kernel_width
            )));
        }
        if !matches!(self.subsample_factor, 1 | 2 | 4) {
            return Err(Error::Config(format!(
                "subsample_factor must be 1, 2 or 4, got {}",
                self.subsample_factor
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2 (blank + symbols)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FeedForwardIds {
    norm: NormIds,
    lin1: LinearIds,
    lin2: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct AttentionIds {
    norm: NormIds,
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    out: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct ConvModuleIds {
    norm: NormIds,
    pw1: LinearIds,
    dw_kernel: ParamId,
    dw_bias: ParamId,
    norm2: NormIds,
    pw2: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ff1: FeedForwardIds,
    attn: AttentionIds,
    conv: ConvModuleIds,
    ff2: FeedForwardIds,
    norm: NormIds,
}

#[derive(Debug, Clone, Copy)]
struct SubsampleIds {
    dw_kernel: ParamId,
    pw: LinearIds,
}

pub struct Model<E: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<E>,
    subsample: Vec<SubsampleIds>,
    input_proj: Option<LinearIds>,
    blocks: Vec<BlockIds>,
    classifier: LinearIds,
}

/// Dropout context for a forward pass; `eval` disables it entirely.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub dropout_rng: Option<&'r mut ChaCha12Rng>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            dropout_rng: None,
        }
    }

    pub fn train(rng: &'r mut ChaCha12Rng) -> Self {
        ForwardCtx {
            training: true,
            dropout_rng: Some(rng),
        }
    }
}

pub struct EncoderOutput {
    /// (B, T', d_model); padded positions are zeroed.
    pub hidden: Var,
    /// Per-item valid lengths after subsampling.
    pub lengths: Vec<usize>,
}

const SUBSAMPLE_KERNEL: usize = 3;

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl<E: Scalar> Model<E> {
    /// Build a model with scaled-uniform fan-in init for linear/conv weights,
    /// zero biases, and gamma=1 / beta=0 layer norms. Deterministic in `rng`.
    pub fn build(config: ModelConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let d = config.d_model;

        let uniform = |rng: &mut ChaCha12Rng, fan_in: usize, shape: Vec<usize>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| E::from_f64c(rng.random_range(-bound..bound)))
                .collect();
            Tensor::from_vec(shape, data).unwrap()
        };

        let linear = |params: &mut ParamSet<E>,
                          rng: &mut ChaCha12Rng,
                          name: &str,
                          d_in: usize,
                          d_out: usize| {
            let w = params.add(format!("{name}.weight"), uniform(rng, d_in, vec![d_in, d_out]));
            let b = params.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]));
            LinearIds { w, b }
        };
        let norm = |params: &mut ParamSet<E>, name: &str, dim: usize| NormIds {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(vec![dim], E::one())),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        };

        let n_stages = match config.subsample_factor {
            1 => 0,
            2 => 1,
            4 => 2,
            _ => unreachable!(),
        };
        let mut subsample = Vec::with_capacity(n_stages);
        for stage in 0..n_stages {
            let ch_in = if stage == 0 { config.n_mels } else { d };
            let dw_kernel = params.add(
                format!("frontend.sub{stage}.dw.kernel"),
                uniform(rng, SUBSAMPLE_KERNEL, vec![ch_in, SUBSAMPLE_KERNEL]),
            );
            let pw = linear(&mut params, rng, &format!("frontend.sub{stage}.pw"), ch_in, d);
            subsample.push(SubsampleIds { dw_kernel, pw });
        }
        let input_proj = (n_stages == 0)
            .then(|| linear(&mut params, rng, "frontend.proj", config.n_mels, d));

        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("blocks.{i}");
            let ff = |params: &mut ParamSet<E>, rng: &mut ChaCha12Rng, name: String| {
                FeedForwardIds {
                    norm: norm(params, &format!("{name}.norm"), d),
                    lin1: linear(params, rng, &format!("{name}.lin1"), d, config.ff_dim),
                    lin2: linear(params, rng, &format!("{name}.lin2"), config.ff_dim, d),
                }
            };
            let ff1 = ff(&mut params, rng, format!("{p}.ff1"));
            let attn = AttentionIds {
                norm: norm(&mut params, &format!("{p}.attn.norm"), d),
                q: linear(&mut params, rng, &format!("{p}.attn.q"), d, d),
                k: linear(&mut params, rng, &format!("{p}.attn.k"), d, d),
                v: linear(&mut params, rng, &format!("{p}.attn.v"), d, d),
                out: linear(&mut params, rng, &format!("{p}.attn.out"), d, d),
            };
            let conv = ConvModuleIds {
                norm: norm(&mut params, &format!("{p}.conv.norm"), d),
                pw1: linear(&mut params, rng, &format!("{p}.conv.pw1"), d, 2 * d),
                dw_kernel: params.add(
                    format!("{p}.conv.dw.kernel"),
                    uniform(rng, config.conv_kernel_width, vec![d, config.conv_kernel_width]),
                ),
                dw_bias: params.add(format!("{p}.conv.dw.bias"), Tensor::zeros(vec![d])),
                norm2: norm(&mut params, &format!("{p}.conv.norm2"), d),
                pw2: linear(&mut params, rng, &format!("{p}.conv.pw2"), d, d),
            };
            let ff2 = ff(&mut params, rng, format!("{p}.ff2"));
            let block_norm = norm(&mut params, &format!("{p}.norm"), d);
            blocks.push(BlockIds {
                ff1,
                attn,
                conv,
                ff2,
                norm: block_norm,
            });
        }
        let classifier = linear(&mut params, rng, "classifier", d, config.vocab_size);

        Ok(Model {
            config,
            params,
            subsample,
            input_proj,
            blocks,
            classifier,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.total_elements()
    }

    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> Result<Bound> {
        self.params.bind(tape, trainable)
    }

    /// Valid length after subsampling.
    pub fn subsampled_len(&self, len: usize) -> usize {
        ceil_div(len, self.config.subsample_factor)
    }

    fn linear_op(&self, tape: &Tape<E>, bound: &Bound, ids: LinearIds, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(ids.w))?;
        tape.add(y, bound.var(ids.b))
    }

    fn norm_op(&self, tape: &Tape<E>, bound: &Bound, ids: NormIds, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(ids.gamma), bound.var(ids.beta), 1e-5)
    }

    fn dropout(&self, tape: &Tape<E>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let p = self.config.dropout_p;
        if !ctx.training || p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = ctx.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        let shape = tape.shape_of(x);
        let keep = 1.0 - p;
        let scale = E::from_f64c(1.0 / keep);
        let numel: usize = shape.iter().product();
        let mask_data: Vec<E> = (0..numel)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    E::zero()
                }
            })
            .collect();
        let mask = tape.constant(Tensor::from_vec(shape, mask_data)?)?;
        tape.mul(x, mask)
    }

    /// (B, T, 1) constant: 1 at valid positions, 0 at padding.
    pub fn pad_mask(&self, tape: &Tape<E>, lengths: &[usize], t: usize) -> Result<Var> {
        let b = lengths.len();
        let mut m = Tensor::zeros(vec![b, t, 1]);
        for (bi, &len) in lengths.iter().enumerate() {
            for ti in 0..len.min(t) {
                m.data_mut()[bi * t + ti] = E::one();
            }
        }
        tape.constant(m)
    }

    /// (B, 1, 1, T) additive attention mask: 0 at valid keys, NEG_FILL at pads.
    fn key_mask(&self, tape: &Tape<E>, lengths: &[usize], t: usize) -> Result<Var> {
        let b = lengths.len();
        let mut m = Tensor::full(vec![b, 1, 1, t], E::from_f64c(NEG_FILL));
        for (bi, &len) in lengths.iter().enumerate() {
            for ti in 0..len.min(t) {
                m.data_mut()[bi * t + ti] = E::zero();
            }
        }
        tape.constant(m)
    }

    fn positional_encoding(&self, tape: &Tape<E>, t: usize) -> Result<Var> {
        let d = self.config.d_model;
        let mut pe = Tensor::zeros(vec![t, d]);
        for ti in 0..t {
            for i in 0..d / 2 {
                let rate = (ti as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
                pe.data_mut()[ti * d + 2 * i] = E::from_f64c(rate.sin());
                pe.data_mut()[ti * d + 2 * i + 1] = E::from_f64c(rate.cos());
            }
        }
        tape.constant(pe)
    }

    fn feed_forward(
        &self,
        tape: &Tape<E>,
        bound: &Bound,
        ids: FeedForwardIds,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let h = self.norm_op(tape, bound, ids.norm, x)?;
        let h = self.linear_op(tape, bound, ids.lin1, h)?;
        let h = tape.swish(h)?;
        let h = self.dropout(tape, h, ctx)?;
        let h = self.linear_op(tape, bound, ids.lin2, h)?;
        self.dropout(tape, h, ctx)
    }

    fn attention(
        &self,
        tape: &Tape<E>,
        bound: &Bound,
        ids: AttentionIds,
        x: Var,
        key_mask: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (d, heads) = (self.config.d_model, self.config.n_heads);
        let dh = d / heads;
        let shape = tape.shape_of(x);
        let (b, t) = (shape[0], shape[1]);

        let h = self.norm_op(tape, bound, ids.norm, x)?;
        let split = |tape: &Tape<E>, v: Var| -> Result<Var> {
            let v = tape.reshape(v, vec![b, t, heads, dh])?;
            tape.permute(v, vec![0, 2, 1, 3])
        };
        let q = split(tape, self.linear_op(tape, bound, ids.q, h)?)?;
        let k = split(tape, self.linear_op(tape, bound, ids.k, h)?)?;
        let v = split(tape, self.linear_op(tape, bound, ids.v, h)?)?;

        let kt = tape.permute(k, vec![0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
        let scores = tape.add(scores, key_mask)?;
        let attn = tape.softmax(scores, 3)?;
        let attn = self.dropout(tape, attn, ctx)?;
        let context = tape.matmul(attn, v)?;
        let context = tape.permute(context, vec![0, 2, 1, 3])?;
        let context = tape.reshape(context, vec![b, t, d])?;
        let out = self.linear_op(tape, bound, ids.out, context)?;
        self.dropout(tape, out, ctx)
    }

    fn conv_module(
        &self,
        tape: &Tape<E>,
        bound: &Bound,
        ids: ConvModuleIds,
        x: Var,
        pad_mask: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let h = self.norm_op(tape, bound, ids.norm, x)?;
        let h = self.linear_op(tape, bound, ids.pw1, h)?;
        // gated linear unit over the doubled channel dim
        let a = tape.slice(h, 2, 0, d)?;
        let g = tape.slice(h, 2, d, d)?;
        let g = tape.sigmoid(g)?;
        let h = tape.mul(a, g)?;
        // zero padded rows so the time-mixing conv cannot leak padding
        let h = tape.mul(h, pad_mask)?;
        let h = tape.depthwise_conv1d(h, bound.var(ids.dw_kernel), 1)?;
        let h = tape.add(h, bound.var(ids.dw_bias))?;
        let h = self.norm_op(tape, bound, ids.norm2, h)?;
        let h = tape.swish(h)?;
        let h = self.linear_op(tape, bound, ids.pw2, h)?;
        self.dropout(tape, h, ctx)
    }

    /// One conformer block; exposed so gradient suites can check it directly.
    pub fn forward_block(
        &self,
        tape: &Tape<E>,
        bound: &Bound,
        index: usize,
        x: Var,
        key_mask: Var,
        pad_mask: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let ids = &self.blocks[index];
        let ff1 = self.feed_forward(tape, bound, ids.ff1, x, ctx)?;
        let ff1 = tape.affine(ff1, 0.5, 0.0)?;
        let x = tape.add(x, ff1)?;

        let attn = self.attention(tape, bound, ids.attn, x, key_mask, ctx)?;
        let x = tape.add(x, attn)?;

        let conv = self.conv_module(tape, bound, ids.conv, x, pad_mask, ctx)?;
        let x = tape.add(x, conv)?;

        let ff2 = self.feed_forward(tape, bound, ids.ff2, x, ctx)?;
        let ff2 = tape.affine(ff2, 0.5, 0.0)?;
        let x = tape.add(x, ff2)?;

        let x = self.norm_op(tape, bound, ids.norm, x)?;
        tape.mul(x, pad_mask)
    }

    /// Encode already-recorded features (B, T, n_mels).
    pub fn forward_encoder_vars(
        &self,
        tape: &Tape<E>,
        bound: &Bound,
        features: Var,
        lengths: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<EncoderOutput> {
        let shape = tape.shape_of(features);
        if shape.len() != 3 || shape[2] != self.config.n_mels {
            return Err(Error::Shape(format!(
                "encoder expects (B, T, {}), got {:?}",
                self.config.n_mels, shape
            )));
        }
        if shape[0] != lengths.len() {
            return Err(Error::Shape(format!(
                "batch size {} does not match {} lengths",
                shape[0],
                lengths.len()
            )));
        }
        let t_in = shape[1];
        if lengths.iter().any(|&l| l == 0 || l > t_in) {
            return Err(Error::Data(format!(
                "valid lengths must be in 1..={t_in}, got {lengths:?}"
            )));
        }

        let mut lengths: Vec<usize> = lengths.to_vec();
        let mut t = t_in;
        let mask = self.pad_mask(tape, &lengths, t)?;
        let mut x = tape.mul(features, mask)?;

        for stage in &self.subsample {
            x = tape.depthwise_conv1d(x, bound.var(stage.dw_kernel), 2)?;
            x = self.linear_op(tape, bound, stage.pw, x)?;
            x = tape.swish(x)?;
            t = ceil_div(t, 2);
            for l in lengths.iter_mut() {
                *l = ceil_div(*l, 2);
            }
            let mask = self.pad_mask(tape, &lengths, t)?;
            x = tape.mul(x, mask)?;
        }
        if let Some(proj) = self.input_proj {
            x = self.linear_op(tape, bound, proj, x)?;
            let mask = self.pad_mask(tape, &lengths, t)?;
            x = tape.mul(x, mask)?;
        }

        let pe = self.positional_encoding(tape, t)?;
        x = tape.add(x, pe)?;
        x = self.dropout(tape, x, ctx)?;

        let pad_mask = self.pad_mask(tape, &lengths, t)?;
        x = tape.mul(x, pad_mask)?;
        let key_mask = self.key_mask(tape, &lengths, t)?;
        for i in 0..self.blocks.len() {
            x = self.forward_block(tape, bound, i, x, key_mask, pad_mask, ctx)?;
        }
        Ok(EncoderOutput {
            hidden: x,
            lengths,
        })
    }

    pub fn forward_encoder(
        &self,
        tape: &Tape<E>,
        bound: &Bound,
        features: &Tensor<E>,
        lengths: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<EncoderOutput> {
        let features = tape.constant(features.clone())?;
        self.forward_encoder_vars(tape, bound, features, lengths, ctx)
    }

    /// Raw logits (B, T', vocab); no softmax.
    pub fn forward_classifier(&self, tape: &Tape<E>, bound: &Bound, hidden: Var) -> Result<Var> {
        self.linear_op(tape, bound, self.classifier, hidden)
    }

    /// Replace the classifier head with a fresh fan-in initialization.
    pub fn reinit_classifier(&mut self, rng: &mut ChaCha12Rng) {
        let d = self.config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let w = self.params.get_mut(self.classifier.w);
        for v in w.value.data_mut() {
            *v = E::from_f64c(rng.random_range(-bound..bound));
        }
        let b = self.params.get_mut(self.classifier.b);
        for v in b.value.data_mut() {
            *v = E::zero();
        }
    }

    /// Parameter names making up block `i`, in declaration order.
    pub(crate) fn block_param_names(&self, i: usize) -> Vec<String> {
        let prefix = format!("blocks.{i}.");
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            dropout_p: 0.0,
            n_mels: 8,
            ..ModelConfig::toy(2, 16, 5)
        }
    }

    fn rand_features(rng: &mut ChaCha12Rng, b: usize, t: usize, m: usize) -> Tensor<f32> {
        let data = (0..b * t * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![b, t, m], data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = toy_config();
        let a: Model<f32> = Model::build(cfg.clone(), &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        let b: Model<f32> = Model::build(cfg, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa
                .value
                .data()
                .iter()
                .zip(pb.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn reference_config_parameter_count_near_18_6m() {
        let cfg = ModelConfig::reference();
        let model: Model<f32> = Model::build(cfg, &mut ChaCha12Rng::seed_from_u64(0)).unwrap();
        let count = model.count_params() as f64;
        let target = 18.6e6;
        assert!(
            (count - target).abs() <= 0.10 * target,
            "parameter count {count} not within 10% of {target}"
        );
    }

    #[test]
    fn toy_model_builds_and_runs_quickly() {
        let start = std::time::Instant::now();
        let cfg = ModelConfig {
            n_mels: 80,
            dropout_p: 0.0,
            ..ModelConfig::toy(2, 32, 8)
        };
        let model: Model<f32> = Model::build(cfg, &mut ChaCha12Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let feats = rand_features(&mut rng, 2, 40, 80);
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        let enc = model
            .forward_encoder(&tape, &bound, &feats, &[40, 33], &mut ForwardCtx::eval())
            .unwrap();
        let logits = model.forward_classifier(&tape, &bound, enc.hidden).unwrap();
        assert_eq!(tape.shape_of(logits), vec![2, 10, 8]);
        assert_eq!(enc.lengths, vec![10, 9]);
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }

    #[test]
    fn subsampled_time_extent_is_ceil() {
        let cfg = toy_config();
        let model: Model<f32> = Model::build(cfg, &mut ChaCha12Rng::seed_from_u64(1)).unwrap();
        assert_eq!(model.subsampled_len(40), 10);
        assert_eq!(model.subsampled_len(41), 11);
        assert_eq!(model.subsampled_len(1), 1);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = toy_config();
        let model: Model<f32> = Model::build(cfg, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = rand_features(&mut rng, 1, 12, 8);
        let b = rand_features(&mut rng, 1, 12, 8);
        let mut ab = Tensor::zeros(vec![2, 12, 8]);
        ab.data_mut()[..96].copy_from_slice(a.data());
        ab.data_mut()[96..].copy_from_slice(b.data());
        let mut ba = Tensor::zeros(vec![2, 12, 8]);
        ba.data_mut()[..96].copy_from_slice(b.data());
        ba.data_mut()[96..].copy_from_slice(a.data());

        let run = |feats: &Tensor<f32>| {
            let tape = Tape::new();
            let bound = model.bind(&tape, false).unwrap();
            let enc = model
                .forward_encoder(&tape, &bound, feats, &[12, 12], &mut ForwardCtx::eval())
                .unwrap();
            tape.value_clone(enc.hidden)
        };
        let out_ab = run(&ab);
        let out_ba = run(&ba);
        let half = out_ab.numel() / 2;
        assert_eq!(out_ab.data()[..half], out_ba.data()[half..]);
        assert_eq!(out_ab.data()[half..], out_ba.data()[..half]);
    }

    #[test]
    fn output_invariant_to_trailing_padding() {
        let cfg = toy_config();
        let model: Model<f32> = Model::build(cfg, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let feats = rand_features(&mut rng, 1, 11, 8);
        let mut padded = Tensor::zeros(vec![1, 19, 8]);
        padded.data_mut()[..11 * 8].copy_from_slice(feats.data());
        // garbage in the padding region must not matter either
        for v in padded.data_mut()[11 * 8..].iter_mut() {
            *v = 42.0;
        }

        let run = |feats: &Tensor<f32>| {
            let tape = Tape::new();
            let bound = model.bind(&tape, false).unwrap();
            let enc = model
                .forward_encoder(&tape, &bound, feats, &[11], &mut ForwardCtx::eval())
                .unwrap();
            (tape.value_clone(enc.hidden), enc.lengths)
        };
        let (out_a, len_a) = run(&feats);
        let (out_b, len_b) = run(&padded);
        assert_eq!(len_a, len_b);
        let d = 16;
        for t in 0..len_a[0] {
            for c in 0..d {
                let va = out_a.data()[t * d + c];
                let vb = out_b.data()[t * d + c];
                assert!(
                    (va - vb).abs() < 1e-5,
                    "padding leaked at t={t} c={c}: {va} vs {vb}"
                );
            }
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let cfg = toy_config();
        let model: Model<f32> = Model::build(cfg, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let feats = rand_features(&mut rng, 2, 9, 8);
        let run = || {
            let tape = Tape::new();
            let bound = model.bind(&tape, false).unwrap();
            let enc = model
                .forward_encoder(&tape, &bound, &feats, &[9, 6], &mut ForwardCtx::eval())
                .unwrap();
            let logits = model.forward_classifier(&tape, &bound, enc.hidden).unwrap();
            tape.value_clone(logits)
        };
        let a = run();
        let b = run();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_weight_classifier_gives_zero_logits() {
        let cfg = toy_config();
        let mut model: Model<f32> = Model::build(cfg, &mut ChaCha12Rng::seed_from_u64(3)).unwrap();
        for p in model.params.iter_mut() {
            if p.name.starts_with("classifier.") {
                p.value = Tensor::zeros(p.value.shape().to_vec());
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let feats = rand_features(&mut rng, 1, 8, 8);
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        let enc = model
            .forward_encoder(&tape, &bound, &feats, &[8], &mut ForwardCtx::eval())
            .unwrap();
        let logits = model.forward_classifier(&tape, &bound, enc.hidden).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_monotone_in_depth_and_width() {
        let count = |cfg: ModelConfig| {
            Model::<f32>::build(cfg, &mut ChaCha12Rng::seed_from_u64(0))
                .unwrap()
                .count_params()
        };
        let base = toy_config();
        let c0 = count(base.clone());
        assert!(count(base.with_layers(3)) > c0);
        let mut wider = base.clone();
        wider.d_model *= 2;
        assert!(count(wider) > c0);
        let mut deeper_ff = base.clone();
        deeper_ff.ff_dim *= 2;
        assert!(count(deeper_ff) > c0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut bad = toy_config();
        bad.n_layers = 0;
        assert!(Model::<f32>::build(bad, &mut ChaCha12Rng::seed_from_u64(0)).is_err());
        let mut bad = toy_config();
        bad.d_model = 10; // not divisible by 4 heads
        assert!(Model::<f32>::build(bad, &mut ChaCha12Rng::seed_from_u64(0)).is_err());
        let mut bad = toy_config();
        bad.conv_kernel_width = 4;
        assert!(Model::<f32>::build(bad, &mut ChaCha12Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn linear_layer_param_count_example() {
        // d_in=2, d_out=3 with bias -> 9 parameters
        let mut params = ParamSet::<f32>::new();
        params.add("w", Tensor::zeros(vec![2, 3]));
        params.add("b", Tensor::zeros(vec![3]));
        assert_eq!(params.total_elements(), 9);
    }
}
