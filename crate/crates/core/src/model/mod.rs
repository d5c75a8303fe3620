//! The intelligibility network.
//!
//! The STFT and LFB streams are concatenated along the feature axis and fused
//! by a 1-D convolution over time. The fused sequence passes through pre-norm
//! attention blocks and a per-frame linear head with a sigmoid; the utterance
//! score is the mean of the frame scores.

pub mod rope;

use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::AudioBuffer;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{
    aligned_frames, lfb_from_half_kernels, signal_tensor, sinc_half_kernels, FeaturePair,
    SincConfig, SincFilterbank, Stft, StftConfig,
};
use crate::tensor::{Scalar, Tensor};

pub use rope::{apply_rope, sinusoidal_table, RopeTable};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const PRELU_INIT: f64 = 0.25;
/// Standard deviation of every initial weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Maxout,
    Relu,
    LeakyRelu,
    Prelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Maxout => "maxout",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Prelu => "prelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "maxout" => Activation::Maxout,
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::LeakyRelu,
            "prelu" => Activation::Prelu,
            other => return Err(Error::Config(format!("unknown activation `{other}`"))),
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalEncoding {
    Rope,
    Sinusoidal,
    Learned,
    None,
}

impl PositionalEncoding {
    pub fn name(self) -> &'static str {
        match self {
            PositionalEncoding::Rope => "rope",
            PositionalEncoding::Sinusoidal => "sinusoidal",
            PositionalEncoding::Learned => "learned",
            PositionalEncoding::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "rope" => PositionalEncoding::Rope,
            "sinusoidal" => PositionalEncoding::Sinusoidal,
            "learned" => PositionalEncoding::Learned,
            "none" => PositionalEncoding::None,
            other => {
                return Err(Error::Config(format!(
                    "unknown positional encoding `{other}`"
                )))
            }
        })
    }
}

impl fmt::Display for PositionalEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub maxout_pieces: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub activation: Activation,
    pub positional_encoding: PositionalEncoding,
    pub max_learned_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_blocks: 2,
            maxout_pieces: 2,
            conv_channels: 128,
            conv_kernel: 3,
            conv_stride: 1,
            activation: Activation::Maxout,
            positional_encoding: PositionalEncoding::Rope,
            max_learned_len: 2000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad(format!(
                "d_model {} must be even and positive",
                self.d_model
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.activation == Activation::Maxout && self.maxout_pieces < 2 {
            return bad(format!(
                "maxout_pieces {} must be at least 2",
                self.maxout_pieces
            ));
        }
        if self.conv_channels == 0 || self.conv_kernel == 0 || self.conv_stride == 0 {
            return bad("conv_channels, conv_kernel and conv_stride must be positive".into());
        }
        if self.positional_encoding == PositionalEncoding::Learned && self.max_learned_len == 0 {
            return bad("max_learned_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of a linear map feeding the activation that yields `width`.
    fn pre_activation(&self, width: usize) -> usize {
        match self.activation {
            Activation::Maxout => width * self.maxout_pieces,
            _ => width,
        }
    }

    /// Frames produced by the fusion convolution from `t` input frames.
    pub fn output_frames(&self, t: usize) -> Result<usize> {
        if t < self.conv_kernel {
            return Err(Error::TooShort(format!(
                "{t} frames is shorter than the {}-frame fusion receptive field",
                self.conv_kernel
            )));
        }
        Ok((t - self.conv_kernel) / self.conv_stride + 1)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Parameters of one [`Model`] placed on a graph, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Scaled, position-encoded queries `[T x d]`.
    pub queries: Var,
    /// Position-encoded keys `[T x d]`.
    pub keys: Var,
    /// Output of the attention operator, before the output projection.
    pub attention: Var,
}

impl BlockTrace {
    /// Attention weights, one `[T x T]` matrix per head. Only kept when the
    /// parameters were bound trainable.
    pub fn weights<'g, T: Scalar>(&self, g: &'g Graph<T>) -> &'g [Tensor<T>] {
        g.attention_weights(self.attention)
            .expect("trace points at an attention node")
    }

    /// Pre-softmax logits, one `[T x T]` matrix per head.
    pub fn logits<T: Scalar>(&self, g: &Graph<T>, heads: usize) -> Vec<Tensor<T>> {
        let (q, k) = (g.value(self.queries), g.value(self.keys));
        let dh = q.cols() / heads;
        let cols =
            |x: &Tensor<T>, h: usize| Tensor::from_fn(x.rows(), dh, |r, c| x.get(r, h * dh + c));
        (0..heads)
            .map(|h| cols(q, h).matmul(&cols(k, h).transpose()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[T' x 1]` frame scores.
    pub frames: Var,
    /// `[1 x 1]` mean of the frame scores.
    pub utterance: Var,
    pub blocks: Vec<BlockTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores<T> {
    pub frames: Vec<T>,
    pub utterance: T,
}

/// Network configuration together with the feature front end it was built
/// for and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub stft: StftConfig,
    pub sinc: SincConfig,
    pub params: ParamStore<T>,
}

fn block_name(i: usize, leaf: &str) -> String {
    format!("blocks.{i}.{leaf}")
}

impl<T: Scalar> Model<T> {
    /// Fresh model: sinc cutoffs on the mel scale, weights drawn from
    /// `N(0, INIT_STD^2)`, biases zero, layer-norm gains one.
    pub fn new(cfg: ModelConfig, stft: StftConfig, sinc: SincConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        stft.validate()?;
        let fb = SincFilterbank::<T>::mel_init(sinc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize| {
            Tensor::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * INIT_STD)
            })
        };
        let d = cfg.d_model;
        let mut p = ParamStore::new();
        p.insert("lfb.low_hz", fb.low_hz);
        p.insert("lfb.band_hz", fb.band_hz);

        let f_in = stft.num_bins() + sinc.num_filters;
        let conv_out = cfg.pre_activation(cfg.conv_channels);
        p.insert("fusion.weight", normal(cfg.conv_kernel * f_in, conv_out));
        p.insert("fusion.bias", Tensor::zeros(1, conv_out));
        if cfg.activation == Activation::Prelu {
            p.insert("fusion.prelu", Tensor::scalar(T::of(PRELU_INIT)));
        }
        if cfg.conv_channels != d {
            p.insert("proj.weight", normal(cfg.conv_channels, d));
            p.insert("proj.bias", Tensor::zeros(1, d));
        }
        if cfg.positional_encoding == PositionalEncoding::Learned {
            p.insert("pos.table", normal(cfg.max_learned_len, d));
        }
        for i in 0..cfg.n_blocks {
            p.insert(block_name(i, "ln1.gain"), Tensor::full(1, d, T::one()));
            p.insert(block_name(i, "ln1.bias"), Tensor::zeros(1, d));
            for proj in ["q", "k", "v", "o"] {
                p.insert(block_name(i, &format!("attn.w{proj}")), normal(d, d));
                p.insert(block_name(i, &format!("attn.b{proj}")), Tensor::zeros(1, d));
            }
            p.insert(block_name(i, "ln2.gain"), Tensor::full(1, d, T::one()));
            p.insert(block_name(i, "ln2.bias"), Tensor::zeros(1, d));
            let hidden = cfg.pre_activation(d);
            p.insert(block_name(i, "ffn.w1"), normal(d, hidden));
            p.insert(block_name(i, "ffn.b1"), Tensor::zeros(1, hidden));
            if cfg.activation == Activation::Prelu {
                p.insert(
                    block_name(i, "ffn.prelu"),
                    Tensor::scalar(T::of(PRELU_INIT)),
                );
            }
            p.insert(block_name(i, "ffn.w2"), normal(d, d));
            p.insert(block_name(i, "ffn.b2"), Tensor::zeros(1, d));
        }
        p.insert("final_ln.gain", Tensor::full(1, d, T::one()));
        p.insert("final_ln.bias", Tensor::zeros(1, d));
        p.insert("head.weight", normal(d, 1));
        p.insert("head.bias", Tensor::zeros(1, 1));
        Ok(Model {
            cfg,
            stft,
            sinc,
            params: p,
        })
    }

    /// Checks that `params` holds exactly the tensors this configuration
    /// needs, with the right shapes, and that all are finite.
    pub fn validate(&self) -> Result<()> {
        let reference = Model::<T>::new(self.cfg, self.stft, self.sinc, 0)?;
        let want: Vec<_> = reference
            .params
            .iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let have: Vec<_> = self.params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want != have {
            let missing = want.iter().find(|w| !have.contains(w));
            let extra = have.iter().find(|h| !want.contains(h));
            return Err(Error::Config(format!(
                "parameter set does not match the model configuration \
                 (expected {missing:?}, found {extra:?})"
            )));
        }
        if let Some((name, _)) = self.params.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Degenerate(format!(
                "parameter `{name}` is not finite"
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.stft.num_bins() + self.sinc.num_filters
    }

    pub fn filterbank(&self) -> SincFilterbank<T> {
        SincFilterbank {
            cfg: self.sinc,
            low_hz: self.params.get("lfb.low_hz").expect("lfb.low_hz").clone(),
            band_hz: self.params.get("lfb.band_hz").expect("lfb.band_hz").clone(),
        }
    }

    /// Places every parameter on `g`; with `trainable` they are leaves that
    /// accumulate gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        Bound { vars }
    }

    fn var(&self, b: &Bound, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("model has no parameter `{name}`"));
        b.vars[i]
    }

    fn activate(&self, g: &mut Graph<T>, b: &Bound, x: Var, prelu: &str) -> Result<Var> {
        match self.cfg.activation {
            Activation::Maxout => g.maxout(x, self.cfg.maxout_pieces),
            Activation::Relu => Ok(g.relu(x)),
            Activation::LeakyRelu => Ok(g.leaky_relu(x, T::of(LEAKY_RELU_SLOPE))),
            Activation::Prelu => g.prelu(x, self.var(b, prelu)),
        }
    }

    fn affine(&self, g: &mut Graph<T>, b: &Bound, x: Var, w: &str, bias: &str) -> Result<Var> {
        let y = g.matmul(x, self.var(b, w))?;
        g.add(y, self.var(b, bias))
    }

    /// `[frames x C]` LFB features of the `[N x 1]` signal, differentiable
    /// with respect to the bound sinc parameters.
    pub fn lfb_graph(&self, g: &mut Graph<T>, b: &Bound, signal: Var) -> Result<Var> {
        let low = self.var(b, "lfb.low_hz");
        let band = self.var(b, "lfb.band_hz");
        let half = sinc_half_kernels(g, low, band, &self.sinc)?;
        lfb_from_half_kernels(g, signal, half, &self.sinc)
    }

    /// One pre-norm attention block on `x: [T x d]`.
    pub fn attention_block(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        block: usize,
    ) -> Result<(Var, BlockTrace)> {
        let rope = self.rope_tables(g.shape(x)[0])?;
        self.block(g, b, x, block, rope.as_ref())
    }

    fn rope_tables(&self, t: usize) -> Result<Option<(Tensor<T>, Tensor<T>)>> {
        if self.cfg.positional_encoding != PositionalEncoding::Rope {
            return Ok(None);
        }
        Ok(Some(RopeTable::new(self.cfg.d_model)?.tables(0, t)))
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        block: usize,
        rope: Option<&(Tensor<T>, Tensor<T>)>,
    ) -> Result<(Var, BlockTrace)> {
        let cfg = &self.cfg;
        let [t, d] = g.shape(x);
        if d != cfg.d_model {
            return Err(Error::Shape {
                op: "attention block input",
                lhs: [t, d],
                rhs: [t, cfg.d_model],
            });
        }
        let n = |leaf: &str| block_name(block, leaf);
        let h = g.layer_norm(x, self.var(b, &n("ln1.gain")), self.var(b, &n("ln1.bias")))?;
        let mut q = self.affine(g, b, h, &n("attn.wq"), &n("attn.bq"))?;
        let mut k = self.affine(g, b, h, &n("attn.wk"), &n("attn.bk"))?;
        let v = self.affine(g, b, h, &n("attn.wv"), &n("attn.bv"))?;
        if let Some((cos, sin)) = rope {
            q = g.rotate_pairs(q, cos.clone(), sin.clone())?;
            k = g.rotate_pairs(k, cos.clone(), sin.clone())?;
        }
        let dh = cfg.head_dim();
        let q = g.mul_scalar(q, T::of(1.0 / (dh as f64).sqrt()));
        let attended = g.multi_head_attention(q, k, v, cfg.n_heads)?;
        let trace = BlockTrace {
            queries: q,
            keys: k,
            attention: attended,
        };
        let attended = self.affine(g, b, attended, &n("attn.wo"), &n("attn.bo"))?;
        let x = g.add(x, attended)?;

        let h = g.layer_norm(x, self.var(b, &n("ln2.gain")), self.var(b, &n("ln2.bias")))?;
        let h = self.affine(g, b, h, &n("ffn.w1"), &n("ffn.b1"))?;
        let h = self.activate(g, b, h, &n("ffn.prelu"))?;
        let h = self.affine(g, b, h, &n("ffn.w2"), &n("ffn.b2"))?;
        Ok((g.add(x, h)?, trace))
    }

    /// Network on aligned `[T x bins]` STFT and `[T x C]` LFB features.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, stft: Var, lfb: Var) -> Result<Forward> {
        let cfg = &self.cfg;
        let ([t, bins], [t_lfb, c]) = (g.shape(stft), g.shape(lfb));
        if t != t_lfb || bins + c != self.input_width() {
            return Err(Error::Shape {
                op: "feature pair",
                lhs: [t, bins],
                rhs: [t_lfb, c],
            });
        }
        let t_out = cfg.output_frames(t)?;
        if cfg.positional_encoding == PositionalEncoding::Learned && t_out > cfg.max_learned_len {
            return Err(Error::TooShort(format!(
                "{t_out} frames exceeds the learned positional table ({} frames)",
                cfg.max_learned_len
            )));
        }

        let x = g.concat_cols(&[stft, lfb])?;
        let h = g.conv1d(x, self.var(b, "fusion.weight"), cfg.conv_stride, 0)?;
        let h = g.add(h, self.var(b, "fusion.bias"))?;
        let mut h = self.activate(g, b, h, "fusion.prelu")?;
        if cfg.conv_channels != cfg.d_model {
            h = self.affine(g, b, h, "proj.weight", "proj.bias")?;
        }
        match cfg.positional_encoding {
            PositionalEncoding::Sinusoidal => {
                let pe = g.constant(sinusoidal_table(t_out, cfg.d_model)?);
                h = g.add(h, pe)?;
            }
            PositionalEncoding::Learned => {
                let pe = g.slice_rows(self.var(b, "pos.table"), 0, t_out)?;
                h = g.add(h, pe)?;
            }
            PositionalEncoding::Rope | PositionalEncoding::None => {}
        }
        let rope = self.rope_tables(t_out)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let (out, trace) = self.block(g, b, h, i, rope.as_ref())?;
            h = out;
            blocks.push(trace);
        }
        let h = g.layer_norm(
            h,
            self.var(b, "final_ln.gain"),
            self.var(b, "final_ln.bias"),
        )?;
        let logits = self.affine(g, b, h, "head.weight", "head.bias")?;
        let frames = g.sigmoid(logits);
        let utterance = g.mean(frames);
        Ok(Forward {
            frames,
            utterance,
            blocks,
        })
    }

    /// Network on a `[T x bins]` STFT matrix and the raw `[N x 1]` signal,
    /// computing the LFB stream on the graph so the sinc cutoffs train.
    pub fn forward_signal(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        stft: Var,
        signal: Var,
    ) -> Result<Forward> {
        let lfb = self.lfb_graph(g, b, signal)?;
        let t = aligned_frames(g.shape(stft)[0], g.shape(lfb)[0])?;
        let stft = trim(g, stft, t)?;
        let lfb = trim(g, lfb, t)?;
        self.forward(g, b, stft, lfb)
    }

    /// Frame and utterance scores for precomputed features.
    pub fn forward_utterance(&self, fp: &FeaturePair<T>) -> Result<Scores<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let stft = g.constant(fp.stft.clone());
        let lfb = g.constant(fp.lfb.clone());
        let out = self.forward(&mut g, &b, stft, lfb)?;
        Ok(Scores {
            frames: g.value(out.frames).data().to_vec(),
            utterance: g.value(out.utterance).item(),
        })
    }

    /// Aligned features of `buf` under the current filterbank.
    pub fn features(&self, buf: &AudioBuffer, stft: &Stft) -> Result<FeaturePair<T>> {
        crate::features::extract(buf, stft, &self.filterbank())
    }

    /// Scores a 16 kHz mono buffer. `stft` must be built from `self.stft`.
    pub fn predict(&self, buf: &AudioBuffer, stft: &Stft) -> Result<Scores<T>> {
        if buf.sample_rate_hz() != self.sinc.sample_rate {
            return Err(Error::Config(format!(
                "{}: sample rate {} Hz, model expects {} Hz",
                buf.source_path,
                buf.sample_rate_hz(),
                self.sinc.sample_rate
            )));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let stft = g.constant(stft.features(buf.samples())?);
        let signal = g.constant(signal_tensor(buf));
        let out = self.forward_signal(&mut g, &b, stft, signal)?;
        Ok(Scores {
            frames: g.value(out.frames).data().to_vec(),
            utterance: g.value(out.utterance).item(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.insert(name, t.cast());
        }
        Model {
            cfg: self.cfg,
            stft: self.stft,
            sinc: self.sinc,
            params,
        }
    }
}

fn trim<T: Scalar>(g: &mut Graph<T>, x: Var, rows: usize) -> Result<Var> {
    if g.shape(x)[0] == rows {
        Ok(x)
    } else {
        g.slice_rows(x, 0, rows)
    }
}
