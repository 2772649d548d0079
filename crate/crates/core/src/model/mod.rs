//! BERT-style encoder: embeddings, a stack of post-norm transformer blocks and
//! a task head, with every parameter registered under a [`ParameterTag`].

mod counting;
mod registry;

pub use counting::{static_param_count, Arch, ArchDims, StaticCount};
pub use registry::{
    LoraTarget, ParamEntry, ParamId, ParamSpec, ParameterRegistry, ParameterTag, TagClass,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::PeftConfig;
use crate::tensor::{Tape, Tensor, Var};

/// Additive score for masked attention keys. `exp` of it underflows to exactly 0.
const MASKED_SCORE: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classifier,
    QaSpan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_classes: usize,
    pub head: HeadKind,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-12
}

impl ModelConfig {
    /// The two-block toy encoder used throughout the tests.
    pub fn tiny() -> Self {
        ModelConfig {
            num_blocks: 2,
            hidden: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 11,
            max_positions: 16,
            num_classes: 2,
            head: HeadKind::Classifier,
            layer_norm_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden {} is not divisible by num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Low-rank update `scale · (x A) B` added to a frozen projection.
#[derive(Clone, Copy, Debug)]
pub struct LoraFactors {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

/// Bottleneck module `z + up(gelu(down(z)))`.
#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub index: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub attn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: Norm,
    pub lora: [Option<LoraFactors>; 4],
    pub attn_adapter: Option<Adapter>,
    pub ffn_adapter: Option<Adapter>,
}

impl Block {
    pub fn projection(&self, target: LoraTarget) -> Linear {
        match target {
            LoraTarget::Wq => self.q,
            LoraTarget::Wk => self.k,
            LoraTarget::Wv => self.v,
            LoraTarget::Wo => self.o,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embeddings {
    pub token: ParamId,
    pub position: ParamId,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embeddings: Embeddings,
    pub blocks: Vec<Block>,
    pub head: Linear,
    pub(crate) peft: Option<PeftConfig>,
}

/// Padded token ids `[batch × seq]` with a mask marking real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    /// An unpadded batch.
    pub fn dense(ids: Vec<usize>, batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len {
            return Err(Error::shape("batch", &[batch, seq_len], &[ids.len()]));
        }
        let mask = vec![true; ids.len()];
        Ok(Batch {
            ids,
            mask,
            batch,
            seq_len,
        })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Targets {
    Classes(Vec<usize>),
    Spans(Vec<(usize, usize)>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Class(usize),
    Span(usize, usize),
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    /// Normal(0, 0.02) truncated at two standard deviations.
    fn truncated(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

pub(crate) struct Builder<'a> {
    pub registry: &'a mut ParameterRegistry,
    init: Init,
}

impl<'a> Builder<'a> {
    pub(crate) fn new(registry: &'a mut ParameterRegistry, seed: u64) -> Self {
        Builder {
            registry,
            init: Init::new(seed),
        }
    }

    pub(crate) fn random(&mut self, name: String, tag: ParameterTag, shape: &[usize]) -> ParamId {
        let t = self.init.truncated(shape);
        self.registry.register(name, tag, t)
    }

    pub(crate) fn zeros(&mut self, name: String, tag: ParameterTag, shape: &[usize]) -> ParamId {
        self.registry.register(name, tag, Tensor::zeros(shape))
    }

    pub(crate) fn linear(
        &mut self,
        prefix: &str,
        tag: ParameterTag,
        fan_in: usize,
        fan_out: usize,
        zero_weight: bool,
    ) -> Linear {
        let wname = format!("{prefix}.weight");
        let weight = if zero_weight {
            self.zeros(wname, tag, &[fan_in, fan_out])
        } else {
            self.random(wname, tag, &[fan_in, fan_out])
        };
        let bias = self.zeros(format!("{prefix}.bias"), tag, &[fan_out]);
        Linear { weight, bias }
    }

    fn norm(&mut self, prefix: &str, tag: ParameterTag, d: usize) -> Norm {
        let gamma = self
            .registry
            .register(format!("{prefix}.gamma"), tag, Tensor::full(&[d], 1.0));
        let beta = self.zeros(format!("{prefix}.beta"), tag, &[d]);
        Norm { gamma, beta }
    }
}

/// Builds a freshly initialized encoder. The same `seed` always yields
/// bit-identical weights.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(Model, ParameterRegistry)> {
    config.validate()?;
    let mut registry = ParameterRegistry::new();
    let mut b = Builder::new(&mut registry, seed);
    let d = config.hidden;

    let emb = ParameterTag::Embedding;
    let embeddings = Embeddings {
        token: b.random("embeddings.token".into(), emb, &[config.vocab_size, d]),
        position: b.random("embeddings.position".into(), emb, &[config.max_positions, d]),
        norm: b.norm("embeddings.norm", emb, d),
    };

    let blocks = (1..=config.num_blocks)
        .map(|i| {
            let tag = ParameterTag::Block(i);
            let p = format!("blocks.{i}");
            Block {
                index: i,
                q: b.linear(&format!("{p}.attn.q"), tag, d, d, false),
                k: b.linear(&format!("{p}.attn.k"), tag, d, d, false),
                v: b.linear(&format!("{p}.attn.v"), tag, d, d, false),
                o: b.linear(&format!("{p}.attn.o"), tag, d, d, false),
                attn_norm: b.norm(&format!("{p}.attn_norm"), tag, d),
                ffn_in: b.linear(&format!("{p}.ffn.in"), tag, d, config.ffn_dim, false),
                ffn_out: b.linear(&format!("{p}.ffn.out"), tag, config.ffn_dim, d, false),
                ffn_norm: b.norm(&format!("{p}.ffn_norm"), tag, d),
                lora: [None; 4],
                attn_adapter: None,
                ffn_adapter: None,
            }
        })
        .collect();

    let out_dim = match config.head {
        HeadKind::Classifier => config.num_classes,
        HeadKind::QaSpan => 2,
    };
    let head = b.linear("head", ParameterTag::Head, d, out_dim, false);

    let model = Model {
        config: config.clone(),
        embeddings,
        blocks,
        head,
        peft: None,
    };
    Ok((model, registry))
}

impl Model {
    /// The regime applied by one of the `peft::apply_*` functions, if any.
    pub fn applied_peft(&self) -> Option<&PeftConfig> {
        self.peft.as_ref()
    }

    pub fn block(&self, index: usize) -> Result<&Block> {
        index
            .checked_sub(1)
            .and_then(|i| self.blocks.get(i))
            .ok_or(Error::Index {
                op: "block",
                index,
                bound: self.blocks.len() + 1,
            })
    }

    fn linear(&self, tape: &mut Tape, vars: &[Var], lin: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[lin.weight.0])?;
        tape.add_bias(y, vars[lin.bias.0])
    }

    fn projection(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        block: &Block,
        target: LoraTarget,
        x: Var,
    ) -> Result<Var> {
        let y = self.linear(tape, vars, block.projection(target), x)?;
        match block.lora[target as usize] {
            None => Ok(y),
            Some(f) => {
                let xa = tape.matmul(x, vars[f.a.0])?;
                let xab = tape.matmul(xa, vars[f.b.0])?;
                let delta = tape.scale(xab, f.scale)?;
                tape.add(y, delta)
            }
        }
    }

    fn adapter(&self, tape: &mut Tape, vars: &[Var], adapter: Option<Adapter>, z: Var) -> Result<Var> {
        let Some(a) = adapter else { return Ok(z) };
        let h = self.linear(tape, vars, a.down, z)?;
        let h = tape.gelu(h)?;
        let h = self.linear(tape, vars, a.up, h)?;
        tape.add(z, h)
    }

    /// Additive attention mask `[b·heads × s × s]` hiding padded keys.
    pub fn attention_mask(&self, batch: &Batch) -> Tensor {
        let (b, s, h) = (batch.batch, batch.seq_len, self.config.num_heads);
        let mut data = Vec::with_capacity(b * h * s * s);
        for bi in 0..b {
            let keys = &batch.mask[bi * s..(bi + 1) * s];
            for _ in 0..h * s {
                data.extend(keys.iter().map(|&real| if real { 0.0 } else { MASKED_SCORE }));
            }
        }
        Tensor::new(vec![b * h, s, s], data).expect("mask shape")
    }

    /// One post-norm transformer block on `x[b×s×d]`:
    /// `h = LN(x + attn(x))`, `out = LN(h + ffn(h))`.
    pub fn block_forward(
        &self,
        index: usize,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let block = self.block(index)?;
        let cfg = &self.config;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != cfg.hidden {
            return Err(Error::shape("block_forward", &shape, &[cfg.hidden]));
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (cfg.num_heads, cfg.head_dim());

        let x2 = tape.reshape(x, &[b * s, d])?;
        let split = |tape: &mut Tape, t: Var| -> Result<Var> {
            let t = tape.reshape(t, &[b, s, h, dh])?;
            let t = tape.permute(t, &[0, 2, 1, 3])?;
            tape.reshape(t, &[b * h, s, dh])
        };
        let q = self.projection(tape, vars, block, LoraTarget::Wq, x2)?;
        let q = split(tape, q)?;
        let k = self.projection(tape, vars, block, LoraTarget::Wk, x2)?;
        let k = split(tape, k)?;
        let v = self.projection(tape, vars, block, LoraTarget::Wv, x2)?;
        let v = split(tape, v)?;

        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.batch_matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add_const(scores, m)?;
        }
        let probs = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(probs, v)?;
        let ctx = tape.reshape(ctx, &[b, h, s, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * s, d])?;
        let attn = self.projection(tape, vars, block, LoraTarget::Wo, ctx)?;
        let attn = self.adapter(tape, vars, block.attn_adapter, attn)?;

        let res = tape.add(x2, attn)?;
        let n = block.attn_norm;
        let hidden = tape.layer_norm(res, vars[n.gamma.0], vars[n.beta.0], cfg.layer_norm_eps)?;

        let f = self.linear(tape, vars, block.ffn_in, hidden)?;
        let f = tape.gelu(f)?;
        let f = self.linear(tape, vars, block.ffn_out, f)?;
        let f = self.adapter(tape, vars, block.ffn_adapter, f)?;
        let res = tape.add(hidden, f)?;
        let n = block.ffn_norm;
        let out = tape.layer_norm(res, vars[n.gamma.0], vars[n.beta.0], cfg.layer_norm_eps)?;
        tape.reshape(out, &[b, s, d])
    }

    /// Token + position embeddings followed by layer norm: `[b×s×d]`.
    pub fn embed(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq_len > cfg.max_positions {
            return Err(Error::Length {
                len: batch.seq_len,
                limit: cfg.max_positions,
            });
        }
        let e = &self.embeddings;
        let prefix = [batch.batch, batch.seq_len];
        let tok = tape.embedding(vars[e.token.0], &batch.ids, &prefix)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
        let pos = tape.embedding(vars[e.position.0], &positions, &prefix)?;
        let x = tape.add(tok, pos)?;
        tape.layer_norm(x, vars[e.norm.gamma.0], vars[e.norm.beta.0], cfg.layer_norm_eps)
    }

    /// Full forward pass. Classifier heads read position 0 and return
    /// `[b×K]`; span heads return start/end logits `[b×s×2]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var> {
        if vars.len() < self.head.bias.0 + 1 {
            return Err(Error::contract("parameter binding is too short for this model"));
        }
        let mask = self.attention_mask(batch);
        let mut x = self.embed(tape, vars, batch)?;
        for i in 1..=self.blocks.len() {
            x = self.block_forward(i, tape, vars, x, Some(&mask))?;
        }
        match self.config.head {
            HeadKind::Classifier => {
                let cls = tape.select_position(x, 0)?;
                self.linear(tape, vars, self.head, cls)
            }
            HeadKind::QaSpan => {
                let (b, s, d) = (batch.batch, batch.seq_len, self.config.hidden);
                let flat = tape.reshape(x, &[b * s, d])?;
                let logits = self.linear(tape, vars, self.head, flat)?;
                tape.reshape(logits, &[b, s, 2])
            }
        }
    }

    fn span_logits(&self, tape: &mut Tape, logits: Var, batch: &Batch, which: usize) -> Result<Var> {
        let l = tape.select_last(logits, which)?;
        let mask: Vec<f64> = batch
            .mask
            .iter()
            .map(|&real| if real { 0.0 } else { MASKED_SCORE })
            .collect();
        let mask = Tensor::new(vec![batch.batch, batch.seq_len], mask)?;
        tape.add_const(l, &mask)
    }

    /// Mean cross-entropy; span heads average the start and end losses.
    pub fn loss(&self, tape: &mut Tape, logits: Var, batch: &Batch, targets: &Targets) -> Result<Var> {
        match (self.config.head, targets) {
            (HeadKind::Classifier, Targets::Classes(t)) => tape.softmax_cross_entropy(logits, t),
            (HeadKind::QaSpan, Targets::Spans(spans)) => {
                let s = batch.seq_len;
                for (bi, &(start, end)) in spans.iter().enumerate() {
                    let real = |p: usize| p < s && batch.mask.get(bi * s + p) == Some(&true);
                    if !real(start) || !real(end) {
                        return Err(Error::contract(format!(
                            "span ({start}, {end}) of row {bi} does not lie on real tokens"
                        )));
                    }
                }
                let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
                let ends: Vec<usize> = spans.iter().map(|s| s.1).collect();
                let sl = self.span_logits(tape, logits, batch, 0)?;
                let el = self.span_logits(tape, logits, batch, 1)?;
                let ls = tape.softmax_cross_entropy(sl, &starts)?;
                let le = tape.softmax_cross_entropy(el, &ends)?;
                let total = tape.add(ls, le)?;
                tape.scale(total, 0.5)
            }
            _ => Err(Error::contract("targets do not match the model head")),
        }
    }

    /// Logits as a plain tensor, with no parameter requiring gradients.
    pub fn logits(&self, registry: &ParameterRegistry, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = registry
            .iter()
            .map(|(_, e)| tape.leaf(e.value.clone(), false))
            .collect();
        let out = self.forward(&mut tape, &vars, batch)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, registry: &ParameterRegistry, batch: &Batch) -> Result<Vec<Prediction>> {
        let logits = self.logits(registry, batch)?;
        Ok(self.decode(&logits, batch))
    }

    /// Argmax decoding of forward logits; span heads only consider real tokens.
    pub fn decode(&self, logits: &Tensor, batch: &Batch) -> Vec<Prediction> {
        let argmax = |xs: &mut dyn Iterator<Item = f64>| {
            xs.enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
                .0
        };
        match self.config.head {
            HeadKind::Classifier => logits
                .data()
                .chunks(self.config.num_classes)
                .map(|row| Prediction::Class(argmax(&mut row.iter().copied())))
                .collect(),
            HeadKind::QaSpan => {
                let s = batch.seq_len;
                logits
                    .data()
                    .chunks(2 * s)
                    .enumerate()
                    .map(|(bi, row)| {
                        let mask = &batch.mask[bi * s..(bi + 1) * s];
                        let pick = |which: usize| {
                            argmax(&mut (0..s).map(|j| {
                                if mask[j] {
                                    row[2 * j + which]
                                } else {
                                    f64::NEG_INFINITY
                                }
                            }))
                        };
                        Prediction::Span(pick(0), pick(1))
                    })
                    .collect()
            }
        }
    }
}
