//! Encoder, context transformer, heads and their parameter layout.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::tensor::{Scalar, Tensor};

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels per block; the last entry is the latent width.
    pub channels: Vec<usize>,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub pool: usize,
    /// Applied after the first block only.
    pub dropout: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128],
            widths: vec![8, 8, 8],
            strides: vec![1, 1, 1],
            pool: 2,
            dropout: 0.35,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn latent_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    /// Time length after all blocks.
    pub fn latent_length(&self, length: usize) -> Result<usize> {
        let mut len = length;
        for (i, &s) in self.strides.iter().enumerate() {
            len = len.div_ceil(s);
            if len < self.pool {
                return Err(Error::shape(format!(
                    "series length {length} too short for encoder: block {} sees {len} steps, pool is {}",
                    i + 1,
                    self.pool
                )));
            }
            len /= self.pool;
        }
        Ok(len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.widths.len() != n || self.strides.len() != n {
            return Err(Error::config("encoder channels, widths and strides must be non-empty and equally long"));
        }
        if self.channels.iter().chain(&self.widths).chain(&self.strides).any(|&v| v == 0) || self.pool == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("encoder dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Predicted future steps as a fraction of the latent length.
    pub horizon_fraction: f64,
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            layers: 4,
            heads: 4,
            dropout: 0.1,
            horizon_fraction: 0.4,
            positional_encoding: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.hidden < 2 {
            return Err(Error::config("hidden width must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("transformer dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.horizon_fraction > 0.0 && self.horizon_fraction < 1.0) {
            return Err(Error::config(format!(
                "horizon_fraction must be in (0, 1), got {}",
                self.horizon_fraction
            )));
        }
        Ok(())
    }

    /// Number of predicted steps for a latent sequence of `latent_len`.
    pub fn horizon(&self, latent_len: usize) -> Result<usize> {
        if latent_len < 2 {
            return Err(Error::shape(format!(
                "latent length {latent_len} leaves no room for future prediction"
            )));
        }
        let k = (self.horizon_fraction * latent_len as f64).floor() as usize;
        Ok(k.clamp(1, latent_len - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
}

/// Concrete sizes for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub in_channels: usize,
    pub length: usize,
    pub latent_dim: usize,
    pub latent_len: usize,
    pub hidden: usize,
    pub horizon: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn new(cfg: &ModelConfig, in_channels: usize, length: usize, num_classes: usize) -> Result<Self> {
        cfg.encoder.validate()?;
        cfg.transformer.validate()?;
        let latent_len = cfg.encoder.latent_length(length)?;
        Ok(Self {
            in_channels,
            length,
            latent_dim: cfg.encoder.latent_dim(),
            latent_len,
            hidden: cfg.transformer.hidden,
            horizon: cfg.transformer.horizon(latent_len)?,
            num_classes,
        })
    }

    /// Flattened encoder output width fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        self.latent_dim * self.latent_len
    }
}

fn uniform<F: Scalar>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..=bound)))
}

fn init_linear(store: &mut ParamStore, name: &str, out: usize, inp: usize, bias: bool, rng: &mut Rng) {
    let bound = 1.0 / (inp as f64).sqrt();
    store.insert(format!("{name}.weight"), uniform(&[out, inp], bound, rng));
    if bias {
        store.insert(format!("{name}.bias"), uniform(&[out], bound, rng));
    }
}

fn init_norm(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(format!("{name}.weight"), Tensor::full(&[width], 1.0));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[width]));
}

/// Fresh encoder parameters and normalization buffers.
pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, in_channels: usize, seeds: SeedStream) {
    let mut rng = seeds.named("init.encoder").rng();
    let mut inp = in_channels;
    for (i, (&out, &w)) in cfg.channels.iter().zip(&cfg.widths).enumerate() {
        let p = format!("encoder.block{}", i + 1);
        let bound = 1.0 / ((inp * w) as f64).sqrt();
        store.insert(format!("{p}.conv.weight"), uniform(&[out, inp, w], bound, &mut rng));
        store.insert(format!("{p}.conv.bias"), uniform(&[out], bound, &mut rng));
        init_norm(store, &format!("{p}.bn"), out);
        store.insert(format!("{p}.bn.running_mean"), Tensor::zeros(&[out]));
        store.insert(format!("{p}.bn.running_var"), Tensor::full(&[out], 1.0));
        inp = out;
    }
}

/// Fresh transformer, token and predictor parameters.
pub fn init_context(store: &mut ParamStore, cfg: &TransformerConfig, dims: &ModelDims, seeds: SeedStream) {
    let mut rng = seeds.named("init.context").rng();
    let (d, h) = (dims.latent_dim, cfg.hidden);
    init_linear(store, "tc.input", h, d, true, &mut rng);
    store.insert(
        "tc.token",
        Tensor::from_fn(&[h], |_| StandardNormal.sample(&mut rng)),
    );
    for l in 1..=cfg.layers {
        let p = format!("tc.layer{l}");
        init_norm(store, &format!("{p}.norm1"), h);
        init_norm(store, &format!("{p}.norm2"), h);
        for part in ["q", "k", "v"] {
            init_linear(store, &format!("{p}.attn.{part}"), h, h, false, &mut rng);
        }
        init_linear(store, &format!("{p}.attn.out"), h, h, true, &mut rng);
        init_linear(store, &format!("{p}.mlp.fc1"), 4 * h, h, true, &mut rng);
        init_linear(store, &format!("{p}.mlp.fc2"), h, 4 * h, true, &mut rng);
    }
    for k in 1..=dims.horizon {
        init_linear(store, &format!("tc.predictor{k}"), d, h, false, &mut rng);
    }
}

/// Fresh projection head.
pub fn init_projection(store: &mut ParamStore, hidden: usize, seeds: SeedStream) {
    let mut rng = seeds.named("init.projection").rng();
    init_linear(store, "head.proj1", hidden, hidden, true, &mut rng);
    init_linear(store, "head.proj2", hidden / 2, hidden, true, &mut rng);
}

/// Fresh linear classifier over flattened encoder features.
pub fn init_classifier(store: &mut ParamStore, dims: &ModelDims, seeds: SeedStream) {
    let mut rng = seeds.named("init.classifier").rng();
    init_linear(store, "classifier", dims.num_classes, dims.feature_dim(), true, &mut rng);
}

/// Every trainable module for the contrastive phases, freshly initialized.
pub fn init_contrastive(cfg: &ModelConfig, dims: &ModelDims, seeds: SeedStream) -> ParamStore {
    let mut store = ParamStore::new();
    init_encoder(&mut store, &cfg.encoder, dims.in_channels, seeds);
    init_context(&mut store, &cfg.transformer, dims, seeds);
    init_projection(&mut store, dims.hidden, seeds);
    store
}

pub fn is_encoder(name: &str) -> bool {
    name.starts_with("encoder.")
}

pub fn is_classifier(name: &str) -> bool {
    name.starts_with("classifier.")
}

/// Normalization statistics observed by one train-mode block.
#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Train/eval switch plus the dropout stream and collected statistics.
pub struct ForwardCtx<'r> {
    train: bool,
    rng: Option<&'r mut Rng>,
    pub observations: Vec<BnObservation>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
            observations: Vec::new(),
        }
    }

    /// Batch statistics in normalization; dropout drawn from `rng`.
    pub fn train(rng: &'r mut Rng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
            observations: Vec::new(),
        }
    }

    /// Batch statistics but no dropout, for exact gradient checks.
    pub fn train_without_dropout() -> Self {
        Self {
            train: true,
            rng: None,
            observations: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn rng(&mut self) -> Option<&mut Rng> {
        self.rng.as_deref_mut()
    }
}

/// Blend collected batch statistics into the running buffers.
pub fn apply_bn_observations<F: Scalar>(store: &mut ParamStore<F>, obs: &[BnObservation], momentum: f64) {
    for o in obs {
        for (suffix, batch) in [("running_mean", &o.mean), ("running_var", &o.var)] {
            if let Some(t) = store.get_mut(&format!("{}.{suffix}", o.prefix)) {
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = F::lit((1.0 - momentum) * r.as_f64() + momentum * b);
                }
            }
        }
    }
}

/// `[B, C, T] -> [B, d, T_z]`.
pub fn encoder_forward<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound<F>,
    cfg: &EncoderConfig,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let mut h = x;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let pre = format!("encoder.block{}", i + 1);
        h = g.conv1d(h, p.var(&format!("{pre}.conv.weight"))?, p.opt_var(&format!("{pre}.conv.bias")), stride)?;
        let gamma = p.var(&format!("{pre}.bn.weight"))?;
        let beta = p.var(&format!("{pre}.bn.bias"))?;
        h = if ctx.train {
            let (v, stats) = g.batch_norm(h, gamma, beta, BN_EPS, None)?;
            let (mean, var) = stats.expect("batch statistics");
            ctx.observations.push(BnObservation {
                prefix: format!("{pre}.bn"),
                mean: mean.iter().map(|v| v.as_f64()).collect(),
                var: var.iter().map(|v| v.as_f64()).collect(),
            });
            v
        } else {
            let mean = p.tensor(&format!("{pre}.bn.running_mean"))?.data();
            let var = p.tensor(&format!("{pre}.bn.running_var"))?.data();
            g.batch_norm(h, gamma, beta, BN_EPS, Some((mean, var)))?.0
        };
        h = g.relu(h);
        h = g.max_pool1d(h, cfg.pool)?;
        if i == 0 && ctx.train {
            h = g.dropout(h, cfg.dropout, ctx.rng());
        }
    }
    Ok(h)
}

/// Sinusoidal position table `[len, width]`.
pub fn positional_table<F: Scalar>(len: usize, width: usize) -> Tensor<F> {
    Tensor::from_fn(&[len, width], |idx| {
        let (pos, i) = (idx / width, idx % width);
        let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / width as f64);
        let a = pos as f64 * freq;
        F::lit(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Summary of the first `prefix_len` latent steps: `[B, d, T_z] -> [B, h]`.
pub fn transformer_context<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound<F>,
    cfg: &TransformerConfig,
    z: Var,
    prefix_len: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    if zs.len() != 3 || prefix_len == 0 || prefix_len > zs[2] {
        return Err(Error::shape(format!("context prefix {prefix_len} of latents {zs:?}")));
    }
    let batch = zs[0];
    let prefix = g.narrow(z, 2, 0, prefix_len)?;
    let steps = g.transpose12(prefix)?;
    let mut tokens = g.linear(steps, p.var("tc.input.weight")?, p.opt_var("tc.input.bias"))?;
    if cfg.positional_encoding {
        let table = positional_table::<F>(prefix_len, cfg.hidden);
        let tiled = Tensor::from_fn(&[batch, prefix_len, cfg.hidden], |i| table.data()[i % table.len()]);
        let pe = g.constant(tiled);
        tokens = g.add(tokens, pe)?;
    }
    let mut psi = g.prepend_token(tokens, p.var("tc.token")?)?;
    let drop = if ctx.train { cfg.dropout } else { 0.0 };
    for l in 1..=cfg.layers {
        let pre = format!("tc.layer{l}");
        let w = |s: &str| p.var(&format!("{pre}.{s}"));
        let n = g.layer_norm(psi, w("norm1.weight")?, w("norm1.bias")?, LN_EPS)?;
        let q = g.linear(n, w("attn.q.weight")?, None)?;
        let k = g.linear(n, w("attn.k.weight")?, None)?;
        let v = g.linear(n, w("attn.v.weight")?, None)?;
        let a = g.attention(q, k, v, cfg.heads, drop, ctx.rng())?;
        let o = g.linear(a, w("attn.out.weight")?, Some(w("attn.out.bias")?))?;
        let o = g.dropout(o, drop, ctx.rng());
        psi = g.add(psi, o)?;

        let n = g.layer_norm(psi, w("norm2.weight")?, w("norm2.bias")?, LN_EPS)?;
        let m = g.linear(n, w("mlp.fc1.weight")?, Some(w("mlp.fc1.bias")?))?;
        let m = g.relu(m);
        let m = g.dropout(m, drop, ctx.rng());
        let m = g.linear(m, w("mlp.fc2.weight")?, Some(w("mlp.fc2.bias")?))?;
        let m = g.dropout(m, drop, ctx.rng());
        psi = g.add(psi, m)?;
    }
    let first = g.narrow(psi, 1, 0, 1)?;
    g.reshape(first, &[batch, cfg.hidden])
}

/// Predicted latent `k` steps ahead (1-based): `[B, h] -> [B, d]`.
pub fn predict_future<F: Scalar>(g: &mut Graph<F>, p: &Bound<F>, c: Var, k: usize) -> Result<Var> {
    let w = p
        .opt_var(&format!("tc.predictor{k}.weight"))
        .ok_or_else(|| Error::config(format!("prediction step {k} out of range")))?;
    if k == 0 {
        return Err(Error::config("prediction step 0 out of range"));
    }
    g.linear(c, w, None)
}

/// `[B, h] -> [B, h/2]`.
pub fn projection_head_forward<F: Scalar>(g: &mut Graph<F>, p: &Bound<F>, c: Var) -> Result<Var> {
    let h = g.linear(c, p.var("head.proj1.weight")?, p.opt_var("head.proj1.bias"))?;
    let h = g.relu(h);
    g.linear(h, p.var("head.proj2.weight")?, p.opt_var("head.proj2.bias"))
}

/// `[B, ...] -> [B, K_cls]`, flattening all trailing axes.
pub fn classifier_forward<F: Scalar>(g: &mut Graph<F>, p: &Bound<F>, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let flat = g.reshape(features, &[s[0], s[1..].iter().product()])?;
    g.linear(flat, p.var("classifier.weight")?, p.opt_var("classifier.bias"))
}

/// Eval-mode flattened encoder features for a whole tensor, in chunks.
pub fn encode_features(store: &ParamStore, cfg: &EncoderConfig, x: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
    let n = x.dim(0);
    let per = x.len() / n.max(1);
    let mut out = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(chunk.max(1)) {
        let b = chunk.max(1).min(n - start);
        let mut shape = x.shape().to_vec();
        shape[0] = b;
        let part = Tensor::new(shape, x.data()[start * per..(start + b) * per].to_vec())?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, store, |_| false);
        let xv = g.constant(part);
        let z = encoder_forward(&mut g, &p, cfg, xv, &mut ForwardCtx::eval())?;
        width = g.value(z).len() / b;
        out.extend_from_slice(g.value(z).data());
    }
    Tensor::new(vec![n, width], out)
}

/// Eval-mode class logits `[N, K_cls]`.
pub fn predict_logits(store: &ParamStore, cfg: &EncoderConfig, x: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
    let feats = encode_features(store, cfg, x, chunk)?;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store, |_| false);
    let f = g.constant(feats);
    let y = classifier_forward(&mut g, &p, f)?;
    Ok(g.value(y).clone())
}
