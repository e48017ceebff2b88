//! The E4mer: per-channel convolutional embeddings, a pre-norm transformer
//! representation module and one swappable head.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{E4merConfig, HeadKind};
use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::ingest::ChannelKind;

pub const BN_MOMENTUM: f64 = 0.1;
const POS_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// θ: channel embeddings, projection, positions, blocks, final norm.
    Encoder,
    /// ξ: the head on top of the encoder.
    Head,
    /// Batch-norm running statistics.
    Buffer,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Head => 1,
            ParamGroup::Buffer => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [ParamGroup::Encoder, ParamGroup::Head, ParamGroup::Buffer].get(c as usize).copied()
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Supervision for one batch; must match the model's head.
pub enum Target<'a> {
    Classes(&'a [usize]),
    Masked { targets: &'a [Vec<Vec<f64>>], masks: &'a [Vec<Vec<bool>>] },
    Transforms(&'a [Vec<usize>]),
}

/// Batch statistics of one batch-norm layer, to be folded into its running
/// averages after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_param: usize,
    pub var_param: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

#[derive(Debug)]
pub struct StepResult {
    pub loss: f64,
    /// Indexed like [`E4mer::params`]; `None` for frozen or unused entries.
    pub grads: Vec<Option<Tensor>>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
pub struct E4mer {
    config: E4merConfig,
    head: HeadKind,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

fn channel_tag(c: usize) -> String {
    ChannelKind::MODEL[c].name().to_ascii_lowercase()
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

struct Ctx<'r> {
    g: Graph,
    nodes: HashMap<usize, NodeId>,
    rng: Option<&'r mut ChaCha8Rng>,
    train_encoder: bool,
    grad_encoder: bool,
    grad_head: bool,
}

impl E4mer {
    pub fn new(config: E4merConfig, head: HeadKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut m = E4mer { config, head, params: Vec::new(), index: HashMap::new() };
        m.init_encoder(rng);
        m.init_head(head, rng);
        Ok(m)
    }

    /// Rebuilds a model from named tensors, checking every expected tensor is
    /// present with the right shape.
    pub fn from_params(config: E4merConfig, head: HeadKind, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = E4mer::new(config.clone(), head, &mut rng)?;
        let mut given: HashMap<String, Param> = params.into_iter().map(|p| (p.name.clone(), p)).collect();
        let mut out = Vec::with_capacity(template.params.len());
        for t in &template.params {
            let p = given
                .remove(&t.name)
                .ok_or_else(|| Error::CheckpointConfigMismatch(format!("missing tensor `{}`", t.name)))?;
            if p.value.shape() != t.value.shape() || p.group != t.group {
                return Err(Error::CheckpointConfigMismatch(format!("tensor `{}` has the wrong shape", t.name)));
            }
            out.push(p);
        }
        if let Some(extra) = given.keys().next() {
            return Err(Error::CheckpointConfigMismatch(format!("unexpected tensor `{extra}`")));
        }
        let index = out.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(E4mer { config, head, params: out, index })
    }

    pub fn config(&self) -> &E4merConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Overrides the dropout rates, e.g. for fine-tuning.
    pub fn set_regularization(&mut self, attention_dropout: f64, drop_path: f64, mlp_dropout: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.attention_dropout = attention_dropout;
        c.drop_path = drop_path;
        c.mlp_dropout = mlp_dropout;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    /// Drops the current head and attaches a freshly initialized one.
    pub fn replace_head(&mut self, head: HeadKind, rng: &mut ChaCha8Rng) {
        self.params.retain(|p| p.group != ParamGroup::Head);
        self.reindex();
        self.head = head;
        self.init_head(head, rng);
    }

    fn reindex(&mut self) {
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    fn add(&mut self, name: String, group: ParamGroup, value: Tensor) {
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value });
    }

    fn init_encoder(&mut self, rng: &mut ChaCha8Rng) {
        let c = self.config.clone();
        let (f, d, m) = (c.num_filters, c.d_model, c.mlp_dim);
        let bias = !c.disable_bias;
        use ParamGroup::{Buffer, Encoder};
        for ch in 0..6 {
            let t = channel_tag(ch);
            let k = c.rates[ch];
            self.add(format!("ce.{t}.conv.w"), Encoder, uniform(f, k, k, rng));
            self.add(format!("ce.{t}.conv.b"), Encoder, uniform(1, f, k, rng));
            self.add(format!("ce.{t}.bn.gamma"), Encoder, Tensor::filled(1, f, 1.0));
            self.add(format!("ce.{t}.bn.beta"), Encoder, Tensor::zeros(1, f));
            self.add(format!("ce.{t}.bn.running_mean"), Buffer, Tensor::zeros(1, f));
            self.add(format!("ce.{t}.bn.running_var"), Buffer, Tensor::filled(1, f, 1.0));
        }
        self.add("proj.w".into(), Encoder, uniform(6 * f, d, 6 * f, rng));
        if bias {
            self.add("proj.b".into(), Encoder, Tensor::zeros(1, d));
        }
        let normal = Normal::new(0.0, POS_INIT_STD).expect("valid std");
        let pos = (0..c.omega_s * d).map(|_| normal.sample(rng)).collect();
        self.add("pos".into(), Encoder, Tensor::from_vec(c.omega_s, d, pos));
        for i in 0..c.num_blocks {
            let p = format!("blocks.{i}");
            self.add(format!("{p}.ln1.gamma"), Encoder, Tensor::filled(1, d, 1.0));
            if bias {
                self.add(format!("{p}.ln1.beta"), Encoder, Tensor::zeros(1, d));
            }
            for w in ["q", "k", "v", "o"] {
                self.add(format!("{p}.attn.{w}.w"), Encoder, uniform(d, d, d, rng));
                if bias {
                    self.add(format!("{p}.attn.{w}.b"), Encoder, Tensor::zeros(1, d));
                }
            }
            self.add(format!("{p}.ln2.gamma"), Encoder, Tensor::filled(1, d, 1.0));
            if bias {
                self.add(format!("{p}.ln2.beta"), Encoder, Tensor::zeros(1, d));
            }
            self.add(format!("{p}.mlp.fc1.w"), Encoder, uniform(d, m, d, rng));
            if bias {
                self.add(format!("{p}.mlp.fc1.b"), Encoder, Tensor::zeros(1, m));
            }
            self.add(format!("{p}.mlp.fc2.w"), Encoder, uniform(m, d, m, rng));
            if bias {
                self.add(format!("{p}.mlp.fc2.b"), Encoder, Tensor::zeros(1, d));
            }
        }
        self.add("norm.gamma".into(), Encoder, Tensor::filled(1, d, 1.0));
        if bias {
            self.add("norm.beta".into(), Encoder, Tensor::zeros(1, d));
        }
    }

    fn init_head(&mut self, head: HeadKind, rng: &mut ChaCha8Rng) {
        let (d, m) = (self.config.d_model, self.config.mlp_dim);
        use ParamGroup::Head;
        match head {
            HeadKind::Classifier => {
                self.add("head.cls.fc1.w".into(), Head, uniform(d, m, d, rng));
                self.add("head.cls.fc1.b".into(), Head, Tensor::zeros(1, m));
                self.add("head.cls.fc2.w".into(), Head, Tensor::zeros(m, 2));
                self.add("head.cls.fc2.b".into(), Head, Tensor::zeros(1, 2));
            }
            HeadKind::Reconstruction => {
                for ch in 0..6 {
                    let t = channel_tag(ch);
                    let r = self.config.rates[ch];
                    self.add(format!("head.recon.{t}.w"), Head, uniform(d, r, d, rng));
                    self.add(format!("head.recon.{t}.b"), Head, Tensor::zeros(1, r));
                }
            }
            HeadKind::Transform => {
                self.add("head.tp.w".into(), Head, Tensor::zeros(d, 36));
                self.add("head.tp.b".into(), Head, Tensor::zeros(1, 36));
            }
        }
    }

    fn p(&self, ctx: &mut Ctx, name: &str) -> NodeId {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        if let Some(&id) = ctx.nodes.get(&i) {
            return id;
        }
        let trainable = match self.params[i].group {
            ParamGroup::Encoder => ctx.grad_encoder,
            ParamGroup::Head => ctx.grad_head,
            ParamGroup::Buffer => false,
        };
        let id = ctx.g.param(i, self.params[i].value.clone(), trainable);
        ctx.nodes.insert(i, id);
        id
    }

    fn opt_p(&self, ctx: &mut Ctx, name: &str) -> Option<NodeId> {
        self.index.contains_key(name).then(|| self.p(ctx, name))
    }

    fn check_inputs<S: AsRef<[Vec<f64>]>>(&self, inputs: &[S]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput);
        }
        for s in inputs {
            let s = s.as_ref();
            if s.len() != 6 {
                return Err(Error::ConfigMismatch(format!("expected 6 channels, got {}", s.len())));
            }
            for (c, ch) in s.iter().enumerate() {
                let want = self.config.channel_len(c);
                if ch.len() != want {
                    return Err(Error::ConfigMismatch(format!(
                        "{} has {} samples, expected {want}",
                        ChannelKind::MODEL[c],
                        ch.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Channel embeddings concatenated to `(B * N) x 6F`.
    fn embed(&self, ctx: &mut Ctx, inputs: &[&[Vec<f64>]], bn: &mut Vec<BnUpdate>) -> NodeId {
        let b = inputs.len();
        let mut parts = Vec::with_capacity(6);
        for ch in 0..6 {
            let t = channel_tag(ch);
            let len = self.config.channel_len(ch);
            let mut data = Vec::with_capacity(b * len);
            inputs.iter().for_each(|s| data.extend_from_slice(&s[ch]));
            let x = ctx.g.input(Tensor::from_vec(b, len, data));
            let w = self.p(ctx, &format!("ce.{t}.conv.w"));
            let bias = self.p(ctx, &format!("ce.{t}.conv.b"));
            let y = ctx.g.channel_conv(x, w, bias);
            let y = ctx.g.gelu(y);
            let gamma = self.p(ctx, &format!("ce.{t}.bn.gamma"));
            let beta = self.p(ctx, &format!("ce.{t}.bn.beta"));
            let mean_name = format!("ce.{t}.bn.running_mean");
            let var_name = format!("ce.{t}.bn.running_var");
            let y = if ctx.train_encoder {
                let (y, stats) = ctx.g.batch_norm(y, gamma, beta, None);
                let (mean, var) = stats.expect("batch statistics");
                bn.push(BnUpdate {
                    mean_param: self.index[&mean_name],
                    var_param: self.index[&var_name],
                    mean,
                    var,
                    rows: b * len,
                });
                y
            } else {
                let rm = &self.params[self.index[&mean_name]].value.data;
                let rv = &self.params[self.index[&var_name]].value.data;
                ctx.g.batch_norm(y, gamma, beta, Some((rm, rv))).0
            };
            parts.push(ctx.g.max_pool_rows(y, self.config.rates[ch]));
        }
        ctx.g.concat_cols(&parts)
    }

    /// Projection, positions, transformer blocks and final norm.
    fn represent(&self, ctx: &mut Ctx, tokens: NodeId, use_pos: bool) -> NodeId {
        let c = &self.config;
        let n = c.omega_s;
        let w = self.p(ctx, "proj.w");
        let b = self.opt_p(ctx, "proj.b");
        let mut x = ctx.g.linear(tokens, w, b);
        if use_pos {
            let pos = self.p(ctx, "pos");
            x = ctx.g.add_positional(x, pos);
        }
        let train = ctx.train_encoder;
        for i in 0..c.num_blocks {
            let pre = format!("blocks.{i}");
            let gamma = self.p(ctx, &format!("{pre}.ln1.gamma"));
            let beta = self.opt_p(ctx, &format!("{pre}.ln1.beta"));
            let h = ctx.g.layer_norm(x, gamma, beta);
            let mut qkv = [0; 3];
            for (slot, name) in qkv.iter_mut().zip(["q", "k", "v"]) {
                let w = self.p(ctx, &format!("{pre}.attn.{name}.w"));
                let b = self.opt_p(ctx, &format!("{pre}.attn.{name}.b"));
                *slot = ctx.g.linear(h, w, b);
            }
            let drop = if train { ctx.rng.as_deref_mut().map(|r| (c.attention_dropout, r)) } else { None };
            let a = ctx.g.attention(qkv[0], qkv[1], qkv[2], c.num_heads, n, drop);
            let w = self.p(ctx, &format!("{pre}.attn.o.w"));
            let b = self.opt_p(ctx, &format!("{pre}.attn.o.b"));
            let o = ctx.g.linear(a, w, b);
            let o = ctx.g.drop_path(o, n, c.drop_path, if train { ctx.rng.as_deref_mut() } else { None });
            x = ctx.g.add(x, o);

            let gamma = self.p(ctx, &format!("{pre}.ln2.gamma"));
            let beta = self.opt_p(ctx, &format!("{pre}.ln2.beta"));
            let h = ctx.g.layer_norm(x, gamma, beta);
            let w = self.p(ctx, &format!("{pre}.mlp.fc1.w"));
            let b = self.opt_p(ctx, &format!("{pre}.mlp.fc1.b"));
            let h = ctx.g.linear(h, w, b);
            let h = ctx.g.gelu(h);
            let h = ctx.g.dropout(h, c.mlp_dropout, if train { ctx.rng.as_deref_mut() } else { None });
            let w = self.p(ctx, &format!("{pre}.mlp.fc2.w"));
            let b = self.opt_p(ctx, &format!("{pre}.mlp.fc2.b"));
            let h = ctx.g.linear(h, w, b);
            let h = ctx.g.dropout(h, c.mlp_dropout, if train { ctx.rng.as_deref_mut() } else { None });
            let h = ctx.g.drop_path(h, n, c.drop_path, if train { ctx.rng.as_deref_mut() } else { None });
            x = ctx.g.add(x, h);
        }
        let gamma = self.p(ctx, "norm.gamma");
        let beta = self.opt_p(ctx, "norm.beta");
        ctx.g.layer_norm(x, gamma, beta)
    }

    /// Head outputs: one node for classifier and transform heads, six for
    /// reconstruction.
    fn head_nodes(&self, ctx: &mut Ctx, repr: NodeId) -> Vec<NodeId> {
        let n = self.config.omega_s;
        match self.head {
            HeadKind::Classifier => {
                let pooled = ctx.g.mean_rows(repr, n);
                let (w, b) = (self.p(ctx, "head.cls.fc1.w"), self.p(ctx, "head.cls.fc1.b"));
                let h = ctx.g.linear(pooled, w, Some(b));
                let h = ctx.g.gelu(h);
                let (w, b) = (self.p(ctx, "head.cls.fc2.w"), self.p(ctx, "head.cls.fc2.b"));
                vec![ctx.g.linear(h, w, Some(b))]
            }
            HeadKind::Reconstruction => (0..6)
                .map(|ch| {
                    let t = channel_tag(ch);
                    let w = self.p(ctx, &format!("head.recon.{t}.w"));
                    let b = self.p(ctx, &format!("head.recon.{t}.b"));
                    ctx.g.linear(repr, w, Some(b))
                })
                .collect(),
            HeadKind::Transform => {
                let pooled = ctx.g.mean_rows(repr, n);
                let (w, b) = (self.p(ctx, "head.tp.w"), self.p(ctx, "head.tp.b"));
                let y = ctx.g.linear(pooled, w, Some(b));
                let rows = ctx.g.value(y).rows;
                vec![ctx.g.reshape(y, rows * 6, 6)]
            }
        }
    }

    fn ctx<'r>(&self, mode: Mode, freeze_encoder: bool, rng: Option<&'r mut ChaCha8Rng>, grads: bool) -> Ctx<'r> {
        let train_encoder = mode == Mode::Train && !freeze_encoder;
        Ctx {
            g: Graph::new(),
            nodes: HashMap::new(),
            rng: if mode == Mode::Train { rng } else { None },
            train_encoder,
            grad_encoder: grads && !freeze_encoder,
            grad_head: grads,
        }
    }

    fn as_refs<S: AsRef<[Vec<f64>]>>(inputs: &[S]) -> Vec<&[Vec<f64>]> {
        inputs.iter().map(|s| s.as_ref()).collect()
    }

    /// Encoder output, `(B * N) x D`. Train mode uses batch statistics and
    /// dropout drawn from `rng` but does not touch running averages.
    pub fn forward_encoder<S: AsRef<[Vec<f64>]>>(
        &self,
        inputs: &[S],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        let mut ctx = self.ctx(mode, false, rng, false);
        let mut bn = Vec::new();
        let tokens = self.embed(&mut ctx, &Self::as_refs(inputs), &mut bn);
        let repr = self.represent(&mut ctx, tokens, true);
        Ok(ctx.g.take_value(repr))
    }

    /// Eval-mode channel embeddings, `(B * N) x 6F`.
    pub fn embed_channels<S: AsRef<[Vec<f64>]>>(&self, inputs: &[S]) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        let mut ctx = self.ctx(Mode::Eval, false, None, false);
        let tokens = self.embed(&mut ctx, &Self::as_refs(inputs), &mut Vec::new());
        Ok(ctx.g.take_value(tokens))
    }

    /// Eval-mode representation module applied to precomputed tokens.
    pub fn encode_tokens(&self, tokens: &Tensor, use_positions: bool) -> Result<Tensor> {
        let c = &self.config;
        if tokens.cols != 6 * c.num_filters || tokens.rows % c.omega_s != 0 || tokens.rows == 0 {
            return Err(Error::ConfigMismatch(format!("token matrix {tokens:?} does not fit the model")));
        }
        let mut ctx = self.ctx(Mode::Eval, false, None, false);
        let x = ctx.g.input(tokens.clone());
        let repr = self.represent(&mut ctx, x, use_positions);
        Ok(ctx.g.take_value(repr))
    }

    fn eval_heads<S: AsRef<[Vec<f64>]>>(&self, inputs: &[S]) -> Result<Vec<Tensor>> {
        self.check_inputs(inputs)?;
        let mut ctx = self.ctx(Mode::Eval, false, None, false);
        let tokens = self.embed(&mut ctx, &Self::as_refs(inputs), &mut Vec::new());
        let repr = self.represent(&mut ctx, tokens, true);
        let outs = self.head_nodes(&mut ctx, repr);
        Ok(outs.into_iter().map(|o| ctx.g.take_value(o)).collect())
    }

    fn require(&self, head: HeadKind) -> Result<()> {
        if self.head != head {
            return Err(Error::ConfigMismatch(format!(
                "model has a {} head, {} requested",
                self.head.as_str(),
                head.as_str()
            )));
        }
        Ok(())
    }

    /// `[p(euthymia), p(acute)]` per sample.
    pub fn predict_proba<S: AsRef<[Vec<f64>]>>(&self, inputs: &[S]) -> Result<Vec<[f64; 2]>> {
        self.require(HeadKind::Classifier)?;
        let logits = self.eval_heads(inputs)?.remove(0);
        Ok((0..logits.rows)
            .map(|r| {
                let l = logits.row(r);
                let m = l[0].max(l[1]);
                let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
                [e0 / (e0 + e1), e1 / (e0 + e1)]
            })
            .collect())
    }

    /// Full-length reconstructions, `[sample][channel][t]`.
    pub fn reconstruct<S: AsRef<[Vec<f64>]>>(&self, inputs: &[S]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.require(HeadKind::Reconstruction)?;
        let outs = self.eval_heads(inputs)?;
        let b = inputs.len();
        Ok((0..b)
            .map(|s| {
                (0..6)
                    .map(|ch| {
                        let len = self.config.channel_len(ch);
                        outs[ch].data[s * len..(s + 1) * len].to_vec()
                    })
                    .collect()
            })
            .collect())
    }

    /// Per-channel transform logits, `[sample][channel][class]`.
    pub fn transform_logits<S: AsRef<[Vec<f64>]>>(&self, inputs: &[S]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.require(HeadKind::Transform)?;
        let out = self.eval_heads(inputs)?.remove(0);
        Ok((0..inputs.len()).map(|s| (0..6).map(|c| out.row(s * 6 + c).to_vec()).collect()).collect())
    }

    fn loss_node(&self, ctx: &mut Ctx, outs: &[NodeId], target: &Target, batch: usize) -> Result<NodeId> {
        let bad = |what: &str| Error::ConfigMismatch(format!("{what} target for a {} head", self.head.as_str()));
        match (self.head, target) {
            (HeadKind::Classifier, Target::Classes(y)) => {
                if y.len() != batch || y.iter().any(|&c| c > 1) {
                    return Err(Error::LengthMismatch { expected: batch, actual: y.len() });
                }
                Ok(ctx.g.cross_entropy(outs[0], y))
            }
            (HeadKind::Transform, Target::Transforms(y)) => {
                if y.len() != batch || y.iter().any(|l| l.len() != 6 || l.iter().any(|&c| c >= 6)) {
                    return Err(Error::LengthMismatch { expected: batch, actual: y.len() });
                }
                let flat: Vec<usize> = y.iter().flatten().copied().collect();
                Ok(ctx.g.cross_entropy(outs[0], &flat))
            }
            (HeadKind::Reconstruction, Target::Masked { targets, masks }) => {
                if targets.len() != batch || masks.len() != batch {
                    return Err(Error::LengthMismatch { expected: batch, actual: targets.len().min(masks.len()) });
                }
                let mut ts = Vec::with_capacity(6);
                let mut ms = Vec::with_capacity(6);
                for ch in 0..6 {
                    let len = self.config.channel_len(ch);
                    let mut t = Vec::with_capacity(batch * len);
                    let mut m = Vec::with_capacity(batch * len);
                    for s in 0..batch {
                        if targets[s].len() != 6 || masks[s].len() != 6 {
                            return Err(Error::LengthMismatch { expected: 6, actual: targets[s].len() });
                        }
                        if targets[s][ch].len() != len || masks[s][ch].len() != len {
                            return Err(Error::LengthMismatch { expected: len, actual: targets[s][ch].len() });
                        }
                        t.extend_from_slice(&targets[s][ch]);
                        m.extend_from_slice(&masks[s][ch]);
                    }
                    ts.push(Tensor::from_vec(batch * self.config.omega_s, self.config.rates[ch], t));
                    ms.push(m);
                }
                if ms.iter().all(|m| !m.contains(&true)) {
                    return Err(Error::EmptyMask);
                }
                Ok(ctx.g.masked_rmse(outs, ts, ms))
            }
            (_, Target::Classes(_)) => Err(bad("class")),
            (_, Target::Transforms(_)) => Err(bad("transform")),
            (_, Target::Masked { .. }) => Err(bad("masked")),
        }
    }

    /// Loss without gradients, in eval mode.
    pub fn loss<S: AsRef<[Vec<f64>]>>(&self, inputs: &[S], target: &Target) -> Result<f64> {
        self.check_inputs(inputs)?;
        let mut ctx = self.ctx(Mode::Eval, false, None, false);
        let tokens = self.embed(&mut ctx, &Self::as_refs(inputs), &mut Vec::new());
        let repr = self.represent(&mut ctx, tokens, true);
        let outs = self.head_nodes(&mut ctx, repr);
        let l = self.loss_node(&mut ctx, &outs, target, inputs.len())?;
        Ok(ctx.g.value(l).data[0])
    }

    /// Loss and gradients for one batch. With `freeze_encoder` the encoder
    /// runs in eval mode and receives no gradient.
    pub fn loss_and_grads<S: AsRef<[Vec<f64>]>>(
        &self,
        inputs: &[S],
        target: &Target,
        mode: Mode,
        freeze_encoder: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepResult> {
        self.check_inputs(inputs)?;
        let mut ctx = self.ctx(mode, freeze_encoder, rng, true);
        let mut bn_updates = Vec::new();
        let tokens = self.embed(&mut ctx, &Self::as_refs(inputs), &mut bn_updates);
        let repr = self.represent(&mut ctx, tokens, true);
        let outs = self.head_nodes(&mut ctx, repr);
        let l = self.loss_node(&mut ctx, &outs, target, inputs.len())?;
        let loss = ctx.g.value(l).data[0];
        let grads = ctx.g.backward(l, self.params.len());
        for (g, p) in grads.iter().zip(&self.params) {
            if g.as_ref().is_some_and(|g| !g.all_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        Ok(StepResult { loss, grads, bn_updates })
    }

    /// Folds batch statistics into the running averages. The running variance
    /// uses the unbiased estimate.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let unbias = if u.rows > 1 { u.rows as f64 / (u.rows - 1) as f64 } else { 1.0 };
            let rm = &mut self.params[u.mean_param].value.data;
            rm.iter_mut().zip(&u.mean).for_each(|(r, m)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            let rv = &mut self.params[u.var_param].value.data;
            rv.iter_mut().zip(&u.var).for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias);
        }
    }

    /// Copies encoder tensors and buffers from `other`.
    pub fn load_encoder_from(&mut self, other: &E4mer) -> Result<()> {
        if !self.config.same_encoder_shape(&other.config) {
            return Err(Error::CheckpointConfigMismatch("encoder shapes differ".into()));
        }
        for p in self.params.iter_mut().filter(|p| p.group != ParamGroup::Head) {
            let src = other
                .param(&p.name)
                .ok_or_else(|| Error::CheckpointConfigMismatch(format!("missing tensor `{}`", p.name)))?;
            p.value = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> E4merConfig {
        E4merConfig {
            num_filters: 2,
            d_model: 8,
            num_heads: 2,
            num_blocks: 1,
            attention_dropout: 0.1,
            drop_path: 0.1,
            mlp_dim: 6,
            mlp_dropout: 0.1,
            disable_bias: false,
            omega_s: 4,
            rates: [2, 2, 2, 4, 2, 1],
        }
    }

    fn sample(cfg: &E4merConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..6).map(|c| (0..cfg.channel_len(c)).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn param_counts_match_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for disable_bias in [false, true] {
            let cfg = E4merConfig { disable_bias, ..tiny() };
            for head in [HeadKind::Classifier, HeadKind::Reconstruction, HeadKind::Transform] {
                let m = E4mer::new(cfg.clone(), head, &mut rng).unwrap();
                assert_eq!(m.param_count(ParamGroup::Encoder), cfg.encoder_param_count());
                assert_eq!(m.param_count(ParamGroup::Head), cfg.head_param_count(head));
                assert_eq!(m.param_count(ParamGroup::Buffer), cfg.buffer_count());
            }
        }
    }

    #[test]
    fn disable_bias_removes_representation_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = E4mer::new(E4merConfig { disable_bias: true, ..tiny() }, HeadKind::Classifier, &mut rng).unwrap();
        assert!(!m
            .params()
            .iter()
            .any(|p| (p.name.starts_with("blocks.") || p.name.starts_with("proj")) && p.name.ends_with(".b")));
        assert!(!m.params().iter().any(|p| p.name.starts_with("blocks.") && p.name.ends_with(".beta")));
    }

    #[test]
    fn zero_head_gives_half_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny();
        let xs = vec![sample(&cfg, &mut rng), sample(&cfg, &mut rng)];
        let m = E4mer::new(cfg.clone(), HeadKind::Classifier, &mut rng).unwrap();
        for p in m.predict_proba(&xs).unwrap() {
            assert_eq!(p, [0.5, 0.5]);
        }
        let l = m.loss(&xs, &Target::Classes(&[0, 1])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let m = E4mer::new(cfg, HeadKind::Transform, &mut rng).unwrap();
        let labels = vec![vec![0, 1, 2, 3, 4, 5], vec![5; 6]];
        let l = m.loss(&xs, &Target::Transforms(&labels)).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn eval_is_deterministic_and_train_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny();
        let xs = vec![sample(&cfg, &mut rng), sample(&cfg, &mut rng)];
        let m = E4mer::new(cfg, HeadKind::Reconstruction, &mut rng).unwrap();
        assert_eq!(m.reconstruct(&xs).unwrap(), m.reconstruct(&xs).unwrap());
        let a = m.forward_encoder(&xs, Mode::Eval, None).unwrap();
        assert_eq!(a, m.forward_encoder(&xs, Mode::Eval, None).unwrap());
        let t1 = m.forward_encoder(&xs, Mode::Train, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        let t2 = m.forward_encoder(&xs, Mode::Train, Some(&mut ChaCha8Rng::seed_from_u64(2))).unwrap();
        assert_ne!(t1, t2);
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny();
        let xs = vec![sample(&cfg, &mut rng), sample(&cfg, &mut rng)];
        let m = E4mer::new(cfg, HeadKind::Classifier, &mut rng).unwrap();
        let r = m
            .loss_and_grads(&xs, &Target::Classes(&[0, 1]), Mode::Train, true, Some(&mut rng))
            .unwrap();
        assert!(r.bn_updates.is_empty());
        for (g, p) in r.grads.iter().zip(m.params()) {
            match p.group {
                ParamGroup::Head => {}
                _ => assert!(g.is_none(), "{} got a gradient", p.name),
            }
        }
        assert!(r.grads.iter().zip(m.params()).any(|(g, p)| p.group == ParamGroup::Head
            && g.as_ref().is_some_and(|g| g.data.iter().any(|v| *v != 0.0))));
    }

    #[test]
    fn wrong_lengths_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny();
        let mut x = sample(&cfg, &mut rng);
        x[3].pop();
        let m = E4mer::new(cfg, HeadKind::Classifier, &mut rng).unwrap();
        assert!(matches!(m.predict_proba(&[x]), Err(Error::ConfigMismatch(_))));
    }
}
