//! Small pre-norm transformers with an EyeLayer hook.
//!
//! Two layouts share one parameter naming scheme:
//!
//! * decoder-only: the whole prompt template is one causal sequence and the
//!   EyeLayer intercepts the output of block `eyelayer_layer`;
//! * encoder-decoder: a bidirectional encoder reads the prompt, the EyeLayer
//!   modulates its final states, and a causal decoder with cross-attention
//!   writes `<BOS> summary <EOS>`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::astalign::FixationTarget;
use crate::error::{dim_err, Error, Result};
use crate::eyelayer::{self, eyelayer_forward, EyeLayerConfig, EyeLayerOutput, SpanMasks};
use crate::numerics::{self, Array, AttentionMask, Graph, Var};
use crate::params::{Bindings, ParamStore};
use crate::tokenizer::{encode_prompt, Vocab, BOS, EOS, PAD};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Blocks per stack (the encoder-decoder has this many in each).
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub arch: Arch,
    /// Block whose output the EyeLayer intercepts. For the encoder-decoder
    /// only the last encoder block is accepted.
    pub eyelayer_layer: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: 4096,
            max_len: 256,
            arch: Arch::DecoderOnly,
            eyelayer_layer: Some(1),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 || self.max_len == 0 {
            return bad("layer, head, ffn and length sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= EOS as usize {
            return bad(format!(
                "vocab_size {} leaves no room for special tokens",
                self.vocab_size
            ));
        }
        match (self.arch, self.eyelayer_layer) {
            (_, None) => Ok(()),
            (Arch::DecoderOnly, Some(l)) if l < self.n_layers => Ok(()),
            (Arch::EncoderDecoder, Some(l)) if l + 1 == self.n_layers => Ok(()),
            (Arch::DecoderOnly, Some(l)) => {
                bad(format!("eyelayer_layer {l} outside 0..{}", self.n_layers))
            }
            (Arch::EncoderDecoder, Some(l)) => bad(format!(
                "encoder-decoder EyeLayer sits after the encoder (layer {}), not {l}",
                self.n_layers - 1
            )),
        }
    }

    /// Fails unless the EyeLayer config is present exactly when a hook layer is set.
    pub fn check_eyelayer(&self, eye: Option<&EyeLayerConfig>) -> Result<()> {
        match (self.eyelayer_layer, eye) {
            (Some(_), None) => Err(Error::Config(
                "eyelayer_layer set without an EyeLayer config".into(),
            )),
            (None, Some(_)) => Err(Error::Config(
                "EyeLayer config given but no eyelayer_layer".into(),
            )),
            (Some(_), Some(e)) if e.width != self.d_model => Err(Error::Config(format!(
                "EyeLayer width {} differs from d_model {}",
                e.width, self.d_model
            ))),
            _ => Ok(()),
        }
    }
}

/// One tokenized training or inference sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub code_start: usize,
    pub code_len: usize,
    /// Everything before the first summary token.
    pub prompt_len: usize,
    pub target: Option<FixationTarget>,
}

impl Example {
    pub fn from_code(code: &str, summary: Option<&str>, vocab: &Vocab) -> Self {
        let enc = encode_prompt(code, summary, vocab);
        Self {
            ids: enc.ids.iter().map(|&i| i as usize).collect(),
            code_start: enc.code_start,
            code_len: enc.code_len,
            prompt_len: enc.prompt_len,
            target: None,
        }
    }

    pub fn has_summary(&self) -> bool {
        self.ids.len() > self.prompt_len
    }

    /// Prompt part only.
    pub fn prompt(&self) -> Example {
        Example {
            ids: self.ids[..self.prompt_len].to_vec(),
            ..self.clone()
        }
    }
}

/// A right-padded batch in the decoder prompt layout.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub masks: SpanMasks,
    /// Token expected at each position (`None` outside summary + EOS).
    pub labels: Vec<Option<usize>>,
    pub prompt_len: Vec<usize>,
    pub real_len: Vec<usize>,
    pub targets: Vec<Option<FixationTarget>>,
}

impl Batch {
    pub fn new(examples: &[Example], max_len: usize) -> Result<Batch> {
        if examples.is_empty() {
            return dim_err("empty batch");
        }
        let len = examples.iter().map(|e| e.ids.len()).max().unwrap();
        if len > max_len {
            return Err(Error::Length { len, max: max_len });
        }
        let b = examples.len();
        let mut ids = vec![PAD as usize; b * len];
        let mut labels = vec![None; b * len];
        let mut special = vec![0.0; b * len];
        for (bi, e) in examples.iter().enumerate() {
            if e.code_len == 0
                || e.code_start + e.code_len > e.prompt_len
                || e.prompt_len > e.ids.len()
            {
                return dim_err(format!("example {bi} has an inconsistent code region"));
            }
            ids[bi * len..][..e.ids.len()].copy_from_slice(&e.ids);
            for i in e.prompt_len..e.ids.len() {
                labels[bi * len + i] = Some(e.ids[i]);
            }
            for (i, &t) in e.ids.iter().enumerate() {
                if t >= PAD as usize && t <= crate::tokenizer::SEP as usize {
                    special[bi * len + i] = 1.0;
                }
            }
        }
        let real_len: Vec<usize> = examples.iter().map(|e| e.ids.len()).collect();
        let starts: Vec<usize> = examples.iter().map(|e| e.code_start).collect();
        let code_lens: Vec<usize> = examples.iter().map(|e| e.code_len).collect();
        let mut masks = SpanMasks::from_regions(len, &real_len, &starts, &code_lens);
        masks.special = special;
        Ok(Batch {
            batch: b,
            len,
            ids,
            masks,
            labels,
            prompt_len: examples.iter().map(|e| e.prompt_len).collect(),
            real_len,
            targets: examples.iter().map(|e| e.target.clone()).collect(),
        })
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }

    pub fn target_refs(&self) -> Vec<Option<&FixationTarget>> {
        self.targets.iter().map(Option::as_ref).collect()
    }

    fn key_valid(&self) -> Vec<bool> {
        self.masks.attn.iter().map(|&a| a > 0.0).collect()
    }

    /// Encoder input: the prompt of each row.
    fn encoder_view(&self, max_len: usize) -> Result<Batch> {
        let ex: Vec<Example> = (0..self.batch)
            .map(|b| Example {
                ids: self.ids[b * self.len..][..self.prompt_len[b]].to_vec(),
                code_start: self.masks.code_start[b],
                code_len: self.masks.code_len[b],
                prompt_len: self.prompt_len[b],
                target: None,
            })
            .collect();
        Batch::new(&ex, max_len)
    }

    /// Decoder input `<BOS> summary <EOS>` with matching labels.
    fn decoder_view(
        &self,
        max_len: usize,
    ) -> Result<(Vec<usize>, usize, Vec<bool>, Vec<Option<usize>>)> {
        let rows: Vec<Vec<usize>> = (0..self.batch)
            .map(|b| {
                let mut r = vec![BOS as usize];
                r.extend_from_slice(
                    &self.ids[b * self.len + self.prompt_len[b]..b * self.len + self.real_len[b]],
                );
                r
            })
            .collect();
        let len = rows.iter().map(Vec::len).max().unwrap();
        if len > max_len {
            return Err(Error::Length { len, max: max_len });
        }
        let mut ids = vec![PAD as usize; self.batch * len];
        let mut valid = vec![false; self.batch * len];
        let mut labels = vec![None; self.batch * len];
        for (b, r) in rows.iter().enumerate() {
            for (i, &t) in r.iter().enumerate() {
                ids[b * len + i] = t;
                valid[b * len + i] = true;
                if i > 0 {
                    labels[b * len + i] = Some(t);
                }
            }
        }
        Ok((ids, len, valid, labels))
    }
}

/// Fresh base-model parameters (plus EyeLayer parameters when configured).
pub fn init_params(
    cfg: &ModelConfig,
    eye: Option<&EyeLayerConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore> {
    cfg.validate()?;
    cfg.check_eyelayer(eye)?;
    let d = cfg.d_model;
    let f = d * cfg.ffn_mult;
    let std_d = 1.0 / (d as f64).sqrt();
    let resid = std_d / (2.0 * cfg.n_layers as f64).sqrt();
    let mut ps = ParamStore::new();
    ps.insert("embed.tok", Array::randn(&[cfg.vocab_size, d], 0.1, rng));
    ps.insert("lm_head", Array::randn(&[d, cfg.vocab_size], std_d, rng));
    let stacks: &[&str] = match cfg.arch {
        Arch::DecoderOnly => &["dec"],
        Arch::EncoderDecoder => &["enc", "dec"],
    };
    for &s in stacks {
        ps.insert(
            format!("{s}.pos"),
            Array::randn(&[cfg.max_len, d], 0.1, rng),
        );
        ps.insert(format!("{s}.ln.gamma"), Array::ones(&[d]));
        ps.insert(format!("{s}.ln.beta"), Array::zeros(&[d]));
        let cross = s == "dec" && cfg.arch == Arch::EncoderDecoder;
        for i in 0..cfg.n_layers {
            let n = |x: &str| format!("{s}.{i}.{x}");
            let attn = |ps: &mut ParamStore, tag: &str, rng: &mut ChaCha8Rng| {
                ps.insert(n(&format!("{tag}.ln.gamma")), Array::ones(&[d]));
                ps.insert(n(&format!("{tag}.ln.beta")), Array::zeros(&[d]));
                for w in ["wq", "wk", "wv"] {
                    ps.insert(n(&format!("{tag}.{w}")), Array::randn(&[d, d], std_d, rng));
                }
                ps.insert(n(&format!("{tag}.wo")), Array::randn(&[d, d], resid, rng));
            };
            attn(&mut ps, "attn", rng);
            if cross {
                attn(&mut ps, "xattn", rng);
            }
            ps.insert(n("ffn.ln.gamma"), Array::ones(&[d]));
            ps.insert(n("ffn.ln.beta"), Array::zeros(&[d]));
            ps.insert(n("ffn.w1"), Array::randn(&[d, f], std_d, rng));
            ps.insert(n("ffn.b1"), Array::zeros(&[f]));
            ps.insert(
                n("ffn.w2"),
                Array::randn(&[f, d], resid * (d as f64 / f as f64).sqrt(), rng),
            );
            ps.insert(n("ffn.b2"), Array::zeros(&[d]));
        }
    }
    if let Some(e) = eye {
        ps.extend(eyelayer::init_params(e, rng)?);
    }
    Ok(ps)
}

/// Self-attention keys and values of one block, `[B, t, d]`.
#[derive(Clone, Debug)]
pub struct LayerKv {
    pub k: Array,
    pub v: Array,
}

fn concat_seq(a: &Array, b: &Array) -> Result<Array> {
    let (bs, ta, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let tb = b.shape()[1];
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..bs {
        data.extend_from_slice(&a.data()[i * ta * d..][..ta * d]);
        data.extend_from_slice(&b.data()[i * tb * d..][..tb * d]);
    }
    Array::new(vec![bs, ta + tb, d], data)
}

struct Stack<'a> {
    p: &'a Bindings,
    cfg: &'a ModelConfig,
    prefix: &'static str,
}

impl Stack<'_> {
    fn var(&self, i: usize, name: &str) -> Result<Var> {
        self.p.var(&format!("{}.{i}.{name}", self.prefix))
    }

    fn ln(&self, g: &mut Graph, x: Var, i: usize, tag: &str) -> Result<Var> {
        let gamma = self.var(i, &format!("{tag}.ln.gamma"))?;
        let beta = self.var(i, &format!("{tag}.ln.beta"))?;
        g.layernorm(x, gamma, beta, LN_EPS)
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], b: usize, l: usize, start: usize) -> Result<Var> {
        if start + l > self.cfg.max_len {
            return Err(Error::Length {
                len: start + l,
                max: self.cfg.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Range(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let tok = g.embed(self.p.var("embed.tok")?, ids, &[b, l])?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| start..start + l).collect();
        let pos = g.embed(
            self.p.var(&format!("{}.pos", self.prefix))?,
            &pos_ids,
            &[b, l],
        )?;
        g.add(tok, pos)
    }

    /// One pre-norm block. Returns the new states and this call's keys/values
    /// (including `past`) when `want_kv` is set.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        x: Var,
        i: usize,
        mask: &AttentionMask,
        past: Option<&LayerKv>,
        memory: Option<(Var, &AttentionMask)>,
        want_kv: bool,
    ) -> Result<(Var, Option<LayerKv>)> {
        let heads = self.cfg.n_heads;
        let h = self.ln(g, x, i, "attn")?;
        let q = g.matmul(h, self.var(i, "attn.wq")?)?;
        let mut k = g.matmul(h, self.var(i, "attn.wk")?)?;
        let mut v = g.matmul(h, self.var(i, "attn.wv")?)?;
        if let Some(kv) = past {
            let kk = concat_seq(&kv.k, g.value(k))?;
            let vv = concat_seq(&kv.v, g.value(v))?;
            k = g.constant(kk);
            v = g.constant(vv);
        }
        let kv = want_kv.then(|| LayerKv {
            k: g.value(k).clone(),
            v: g.value(v).clone(),
        });
        let a = g.attention(q, k, v, heads, mask)?;
        let a = g.matmul(a, self.var(i, "attn.wo")?)?;
        let mut x = g.add(x, a)?;

        if let Some((mem, mem_mask)) = memory {
            let h = self.ln(g, x, i, "xattn")?;
            let q = g.matmul(h, self.var(i, "xattn.wq")?)?;
            let k = g.matmul(mem, self.var(i, "xattn.wk")?)?;
            let v = g.matmul(mem, self.var(i, "xattn.wv")?)?;
            let a = g.attention(q, k, v, heads, mem_mask)?;
            let a = g.matmul(a, self.var(i, "xattn.wo")?)?;
            x = g.add(x, a)?;
        }

        let h = self.ln(g, x, i, "ffn")?;
        let h = g.linear(h, self.var(i, "ffn.w1")?, self.var(i, "ffn.b1")?)?;
        let h = g.gelu(h);
        let h = g.linear(h, self.var(i, "ffn.w2")?, self.var(i, "ffn.b2")?)?;
        Ok((g.add(x, h)?, kv))
    }

    fn final_ln(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = self.p.var(&format!("{}.ln.gamma", self.prefix))?;
        let beta = self.p.var(&format!("{}.ln.beta", self.prefix))?;
        g.layernorm(x, gamma, beta, LN_EPS)
    }
}

/// Per-call knobs for [`forward`].
#[derive(Default)]
pub struct ForwardOptions<'r> {
    /// Enables EyeLayer dropout.
    pub train_rng: Option<&'r mut ChaCha8Rng>,
    /// Skip everything after the EyeLayer (no logits).
    pub stop_after_eyelayer: bool,
}

pub struct ForwardOutput {
    /// `[B, L', V]`; `None` when stopped after the EyeLayer.
    pub logits: Option<Var>,
    /// Expected token per logit position, before the one-step shift.
    pub labels: Vec<Option<usize>>,
    pub eye: Option<EyeLayerOutput>,
}

pub fn forward(
    g: &mut Graph,
    batch: &Batch,
    cfg: &ModelConfig,
    eye: Option<&EyeLayerConfig>,
    p: &Bindings,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    cfg.check_eyelayer(eye)?;
    match cfg.arch {
        Arch::DecoderOnly => forward_decoder(g, batch, cfg, eye, p, opts),
        Arch::EncoderDecoder => forward_encoder_decoder(g, batch, cfg, eye, p, opts),
    }
}

pub fn forward_decoder(
    g: &mut Graph,
    batch: &Batch,
    cfg: &ModelConfig,
    eye: Option<&EyeLayerConfig>,
    p: &Bindings,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    if cfg.arch != Arch::DecoderOnly {
        return Err(Error::Config(
            "forward_decoder needs a decoder-only config".into(),
        ));
    }
    let stack = Stack {
        p,
        cfg,
        prefix: "dec",
    };
    let (hidden, eye_out, _) = decoder_only_stack(
        g,
        &stack,
        batch,
        eye,
        opts.train_rng,
        opts.stop_after_eyelayer,
        false,
    )?;
    if opts.stop_after_eyelayer {
        return Ok(ForwardOutput {
            logits: None,
            labels: batch.labels.clone(),
            eye: eye_out,
        });
    }
    let logits = lm_head(g, &stack, hidden)?;
    Ok(ForwardOutput {
        logits: Some(logits),
        labels: batch.labels.clone(),
        eye: eye_out,
    })
}

/// Runs every decoder-only block on `batch`, applying the EyeLayer after the
/// hook layer. Returns the pre-final-norm states.
fn decoder_only_stack(
    g: &mut Graph,
    stack: &Stack,
    batch: &Batch,
    eye: Option<&EyeLayerConfig>,
    train_rng: Option<&mut ChaCha8Rng>,
    stop_after_eyelayer: bool,
    want_kv: bool,
) -> Result<(Var, Option<EyeLayerOutput>, Vec<LayerKv>)> {
    let cfg = stack.cfg;
    let mut x = stack.embed(g, &batch.ids, batch.batch, batch.len, 0)?;
    let mask = AttentionMask {
        causal: true,
        key_valid: Some(batch.key_valid()),
    };
    let mut eye_out = None;
    let mut kvs = Vec::new();
    let mut rng = train_rng;
    for i in 0..cfg.n_layers {
        let (y, kv) = stack.block(g, x, i, &mask, None, None, want_kv)?;
        x = y;
        kvs.extend(kv);
        if let (Some(layer), Some(e)) = (cfg.eyelayer_layer, eye) {
            if layer == i {
                let out = eyelayer_forward(g, x, &batch.masks, e, stack.p, rng.take())?;
                x = out.hidden;
                eye_out = Some(out);
                if stop_after_eyelayer {
                    break;
                }
            }
        }
    }
    Ok((x, eye_out, kvs))
}

fn lm_head(g: &mut Graph, stack: &Stack, hidden: Var) -> Result<Var> {
    let h = stack.final_ln(g, hidden)?;
    g.matmul(h, stack.p.var("lm_head")?)
}

/// Encodes the prompt, applies the EyeLayer to the encoder output and
/// returns `(memory, memory key mask, eye output)`.
fn encode(
    g: &mut Graph,
    enc: &Batch,
    cfg: &ModelConfig,
    eye: Option<&EyeLayerConfig>,
    p: &Bindings,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, AttentionMask, Option<EyeLayerOutput>)> {
    let stack = Stack {
        p,
        cfg,
        prefix: "enc",
    };
    let mut x = stack.embed(g, &enc.ids, enc.batch, enc.len, 0)?;
    let mask = AttentionMask {
        causal: false,
        key_valid: Some(enc.key_valid()),
    };
    for i in 0..cfg.n_layers {
        x = stack.block(g, x, i, &mask, None, None, false)?.0;
    }
    x = stack.final_ln(g, x)?;
    let mut eye_out = None;
    if let (Some(_), Some(e)) = (cfg.eyelayer_layer, eye) {
        let out = eyelayer_forward(g, x, &enc.masks, e, p, train_rng)?;
        x = out.hidden;
        eye_out = Some(out);
    }
    Ok((x, mask, eye_out))
}

pub fn forward_encoder_decoder(
    g: &mut Graph,
    batch: &Batch,
    cfg: &ModelConfig,
    eye: Option<&EyeLayerConfig>,
    p: &Bindings,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    if cfg.arch != Arch::EncoderDecoder {
        return Err(Error::Config(
            "forward_encoder_decoder needs an encoder-decoder config".into(),
        ));
    }
    let enc = batch.encoder_view(cfg.max_len)?;
    let (memory, mem_mask, eye_out) = encode(g, &enc, cfg, eye, p, opts.train_rng)?;
    let (ids, len, valid, labels) = batch.decoder_view(cfg.max_len)?;
    if opts.stop_after_eyelayer {
        return Ok(ForwardOutput {
            logits: None,
            labels,
            eye: eye_out,
        });
    }
    let stack = Stack {
        p,
        cfg,
        prefix: "dec",
    };
    let mut y = stack.embed(g, &ids, batch.batch, len, 0)?;
    let mask = AttentionMask {
        causal: true,
        key_valid: Some(valid),
    };
    let mem_mask = AttentionMask {
        causal: false,
        key_valid: mem_mask.key_valid,
    };
    for i in 0..cfg.n_layers {
        y = stack
            .block(g, y, i, &mask, None, Some((memory, &mem_mask)), false)?
            .0;
    }
    let logits = lm_head(g, &stack, y)?;
    Ok(ForwardOutput {
        logits: Some(logits),
        labels,
        eye: eye_out,
    })
}

/// Mean next-token cross-entropy: logits at position `i` predict `labels[i + 1]`.
pub fn generation_loss(g: &mut Graph, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] * shape[1] != labels.len() {
        return dim_err(format!("logits {:?} for {} labels", shape, labels.len()));
    }
    let len = shape[1];
    let targets: Vec<Option<usize>> = (0..labels.len())
        .map(|n| {
            if n % len + 1 < len {
                labels[n + 1]
            } else {
                None
            }
        })
        .collect();
    g.cross_entropy(logits, &targets)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Next-token logits from the last position of `hidden` (`[1, L, d]`).
fn last_logits(g: &Graph, p: &ParamStore, prefix: &str, hidden: Var) -> Result<Vec<f64>> {
    let h = g.value(hidden);
    let d = h.last_dim();
    let last = Array::new(vec![1, d], h.data()[h.len() - d..].to_vec())?;
    let n = numerics::layernorm(
        &last,
        p.get(&format!("{prefix}.ln.gamma"))?,
        p.get(&format!("{prefix}.ln.beta"))?,
        LN_EPS,
    )?;
    Ok(numerics::matmul(&n, p.get("lm_head")?)?.into_data())
}

/// Greedy continuation of `example`'s prompt until `<EOS>` or `max_new`
/// tokens. The returned ids exclude `<EOS>`. With `use_cache` the prompt is
/// encoded once and each step only processes the new token; otherwise the
/// whole sequence is re-run every step.
pub fn generate(
    example: &Example,
    cfg: &ModelConfig,
    eye: Option<&EyeLayerConfig>,
    params: &ParamStore,
    max_new: usize,
    use_cache: bool,
) -> Result<Vec<usize>> {
    cfg.check_eyelayer(eye)?;
    let prompt = example.prompt();
    let mut out = Vec::new();
    if max_new == 0 {
        return Ok(out);
    }
    match cfg.arch {
        Arch::DecoderOnly => {
            generate_decoder(&prompt, cfg, eye, params, max_new, use_cache, &mut out)?
        }
        Arch::EncoderDecoder => {
            generate_encdec(&prompt, cfg, eye, params, max_new, use_cache, &mut out)?
        }
    }
    Ok(out)
}

fn generate_decoder(
    prompt: &Example,
    cfg: &ModelConfig,
    eye: Option<&EyeLayerConfig>,
    params: &ParamStore,
    max_new: usize,
    use_cache: bool,
    out: &mut Vec<usize>,
) -> Result<()> {
    let batch = Batch::new(std::slice::from_ref(prompt), cfg.max_len)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let stack = Stack {
        p: &p,
        cfg,
        prefix: "dec",
    };
    let (hidden, _, mut cache) =
        decoder_only_stack(&mut g, &stack, &batch, eye, None, false, use_cache)?;
    let mut next = argmax(&last_logits(&g, params, "dec", hidden)?);
    let mut pos = prompt.ids.len();
    while next != EOS as usize && out.len() < max_new && pos < cfg.max_len {
        out.push(next);
        let hidden = if use_cache {
            // New positions lie outside the code region, where the EyeLayer
            // is the identity, so only the base blocks run here.
            let mut g = Graph::new();
            let p = params.bind(&mut g, |_| false);
            let stack = Stack {
                p: &p,
                cfg,
                prefix: "dec",
            };
            let mut x = stack.embed(&mut g, &[next], 1, 1, pos)?;
            let mask = AttentionMask {
                causal: true,
                key_valid: None,
            };
            for (i, kv) in cache.iter_mut().enumerate() {
                let (y, new_kv) = stack.block(&mut g, x, i, &mask, Some(kv), None, true)?;
                x = y;
                *kv = new_kv.expect("requested");
            }
            last_logits(&g, params, "dec", x)?
        } else {
            let mut ex = prompt.clone();
            ex.ids.extend_from_slice(out);
            let batch = Batch::new(std::slice::from_ref(&ex), cfg.max_len)?;
            let mut g = Graph::new();
            let p = params.bind(&mut g, |_| false);
            let stack = Stack {
                p: &p,
                cfg,
                prefix: "dec",
            };
            let (h, _, _) = decoder_only_stack(&mut g, &stack, &batch, eye, None, false, false)?;
            last_logits(&g, params, "dec", h)?
        };
        next = argmax(&hidden);
        pos += 1;
    }
    Ok(())
}

fn generate_encdec(
    prompt: &Example,
    cfg: &ModelConfig,
    eye: Option<&EyeLayerConfig>,
    params: &ParamStore,
    max_new: usize,
    use_cache: bool,
    out: &mut Vec<usize>,
) -> Result<()> {
    let enc = Batch::new(std::slice::from_ref(prompt), cfg.max_len)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let (memory, mem_mask, _) = encode(&mut g, &enc, cfg, eye, &p, None)?;
    let memory = g.value(memory).clone();
    let mut cache: Vec<LayerKv> = Vec::new();
    let mut seq = vec![BOS as usize];
    loop {
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let stack = Stack {
            p: &p,
            cfg,
            prefix: "dec",
        };
        let mem = g.constant(memory.clone());
        let (ids, start) = if use_cache && !cache.is_empty() {
            (vec![*seq.last().unwrap()], seq.len() - 1)
        } else {
            (seq.clone(), 0)
        };
        let mut y = stack.embed(&mut g, &ids, 1, ids.len(), start)?;
        let mask = AttentionMask {
            causal: true,
            key_valid: None,
        };
        let mut new_cache = Vec::new();
        for i in 0..cfg.n_layers {
            let past = if use_cache { cache.get(i) } else { None };
            let (z, kv) =
                stack.block(&mut g, y, i, &mask, past, Some((mem, &mem_mask)), use_cache)?;
            y = z;
            new_cache.extend(kv);
        }
        cache = new_cache;
        let next = argmax(&last_logits(&g, params, "dec", y)?);
        if next == EOS as usize || out.len() >= max_new || seq.len() >= cfg.max_len {
            break;
        }
        out.push(next);
        seq.push(next);
        if out.len() >= max_new {
            break;
        }
    }
    Ok(())
}

/// Decodes generated ids to text.
pub fn decode_summary(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let ids: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    vocab.decode(&ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{NUM_SPECIAL, SEP};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny(arch: Arch, eyelayer_layer: Option<usize>) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            vocab_size: 300,
            max_len: 40,
            arch,
            eyelayer_layer,
        }
    }

    fn eye_cfg(gate: Option<f64>) -> EyeLayerConfig {
        EyeLayerConfig {
            width: 16,
            rank: 4,
            dropout: 0.0,
            gate_override: gate,
            ..EyeLayerConfig::default()
        }
    }

    fn example(r: &mut ChaCha8Rng, code_len: usize, summary_len: usize) -> Example {
        let mut ids = vec![10, 11];
        ids.extend((0..code_len).map(|_| r.gen_range(20..200)));
        ids.extend([10, SEP as usize, 10]);
        let prompt_len = ids.len();
        ids.extend((0..summary_len).map(|_| r.gen_range(20..200)));
        ids.push(EOS as usize);
        Example {
            ids,
            code_start: 2,
            code_len,
            prompt_len,
            target: None,
        }
    }

    fn logits_of(
        batch: &Batch,
        cfg: &ModelConfig,
        eye: Option<&EyeLayerConfig>,
        ps: &ParamStore,
    ) -> Array {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, |_| false);
        let out = forward(&mut g, batch, cfg, eye, &p, ForwardOptions::default()).unwrap();
        g.value(out.logits.unwrap()).clone()
    }

    #[test]
    fn config_validation() {
        assert!(tiny(Arch::DecoderOnly, Some(1)).validate().is_ok());
        assert!(tiny(Arch::DecoderOnly, Some(2)).validate().is_err());
        assert!(tiny(Arch::EncoderDecoder, Some(1)).validate().is_ok());
        assert!(tiny(Arch::EncoderDecoder, Some(0)).validate().is_err());
        let c = ModelConfig {
            n_heads: 3,
            ..tiny(Arch::DecoderOnly, None)
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn decoder_shape_and_length_error() {
        let cfg = tiny(Arch::DecoderOnly, None);
        let ps = init_params(&cfg, None, &mut rng(1)).unwrap();
        let ex = Example {
            ids: vec![1, 2, 3, 4],
            code_start: 0,
            code_len: 2,
            prompt_len: 3,
            target: None,
        };
        let batch = Batch::new(std::slice::from_ref(&ex), cfg.max_len).unwrap();
        let l = logits_of(&batch, &cfg, None, &ps);
        assert_eq!(l.shape(), &[1, 4, 300]);
        assert!(l.is_finite());
        let long = Example {
            ids: vec![1; 41],
            ..ex
        };
        assert!(matches!(
            Batch::new(&[long], 40),
            Err(Error::Length { len: 41, max: 40 })
        ));
    }

    #[test]
    fn hook_with_closed_gate_is_transparent() {
        for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
            let with = tiny(arch, Some(1));
            let without = tiny(arch, None);
            let eye = eye_cfg(Some(0.0));
            let ps = init_params(&with, Some(&eye), &mut rng(2)).unwrap();
            let mut r = rng(3);
            let batch = Batch::new(&[example(&mut r, 6, 4), example(&mut r, 9, 2)], 40).unwrap();
            let a = logits_of(&batch, &with, Some(&eye), &ps);
            let b = logits_of(&batch, &without, None, &ps);
            assert_eq!(a, b, "{arch:?}");

            let open = eye_cfg(Some(0.5));
            let c = logits_of(&batch, &with, Some(&open), &ps);
            assert_ne!(a, c, "{arch:?}");
        }
    }

    #[test]
    fn summary_positions_are_causal() {
        let cfg = tiny(Arch::DecoderOnly, Some(0));
        let eye = eye_cfg(Some(0.5));
        let ps = init_params(&cfg, Some(&eye), &mut rng(4)).unwrap();
        let ex = example(&mut rng(5), 7, 6);
        let base = Batch::new(std::slice::from_ref(&ex), 40).unwrap();
        let a = logits_of(&base, &cfg, Some(&eye), &ps);
        let t = ex.prompt_len + 3;
        let mut changed = ex.clone();
        changed.ids[t] = if ex.ids[t] == 50 { 51 } else { 50 };
        let b = logits_of(&Batch::new(&[changed], 40).unwrap(), &cfg, Some(&eye), &ps);
        let v = 300;
        for i in 0..ex.ids.len() {
            let row = |x: &Array| x.data()[i * v..(i + 1) * v].to_vec();
            if i < t {
                assert_eq!(row(&a), row(&b), "position {i}");
            }
        }
        assert_ne!(a.data()[t * v..(t + 1) * v], b.data()[t * v..(t + 1) * v]);
    }

    #[test]
    fn encoder_is_bidirectional() {
        let cfg = tiny(Arch::EncoderDecoder, None);
        let ps = init_params(&cfg, None, &mut rng(6)).unwrap();
        let ex = example(&mut rng(7), 6, 3);
        let a = logits_of(
            &Batch::new(std::slice::from_ref(&ex), 40).unwrap(),
            &cfg,
            None,
            &ps,
        );
        let mut changed = ex.clone();
        let last_code = ex.code_start + ex.code_len - 1;
        changed.ids[last_code] = if ex.ids[last_code] == 50 { 51 } else { 50 };
        let b = logits_of(&Batch::new(&[changed], 40).unwrap(), &cfg, None, &ps);
        assert_eq!(a.shape(), &[1, 5, 300]);
        assert_ne!(a.data()[..300], b.data()[..300]);
    }

    #[test]
    fn generation_loss_examples() {
        let mut g = Graph::new();
        let logits = g.constant(Array::zeros(&[1, 3, 7]));
        let loss = generation_loss(&mut g, logits, &[None, Some(2), Some(5)]).unwrap();
        assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);

        let mut sharp = Array::zeros(&[1, 3, 7]);
        sharp.data_mut()[2] = 60.0;
        sharp.data_mut()[7 + 5] = 60.0;
        let logits = g.constant(sharp);
        let loss = generation_loss(&mut g, logits, &[None, Some(2), Some(5)]).unwrap();
        assert!(g.value(loss).item() < 1e-20);

        let loss = generation_loss(&mut g, logits, &[Some(1), None, None]);
        assert!(matches!(loss, Err(Error::EmptyTarget)));
    }

    #[test]
    fn cached_generation_matches_full_reforward() {
        for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
            let cfg = tiny(arch, Some(1));
            let eye = eye_cfg(Some(0.5));
            let ps = init_params(&cfg, Some(&eye), &mut rng(8)).unwrap();
            for s in 0..4 {
                let ex = example(&mut rng(20 + s), 5 + s as usize, 0);
                let a = generate(&ex, &cfg, Some(&eye), &ps, 12, true).unwrap();
                let b = generate(&ex, &cfg, Some(&eye), &ps, 12, false).unwrap();
                assert_eq!(a, b, "{arch:?} sample {s}");
                assert_eq!(a, generate(&ex, &cfg, Some(&eye), &ps, 12, true).unwrap());
                assert!(a.len() <= 12);
                assert!(generate(&ex, &cfg, Some(&eye), &ps, 0, true)
                    .unwrap()
                    .is_empty());
            }
        }
    }

    #[test]
    fn special_tokens_are_masked() {
        let ex = example(&mut rng(9), 4, 2);
        let batch = Batch::new(std::slice::from_ref(&ex), 40).unwrap();
        for (i, &t) in ex.ids.iter().enumerate() {
            let is_special = (PAD as usize..PAD as usize + NUM_SPECIAL).contains(&t);
            assert_eq!(batch.masks.special[i] == 1.0, is_special);
        }
        assert_eq!(batch.labels[..ex.prompt_len], vec![None; ex.prompt_len][..]);
        assert_eq!(batch.labels[ex.ids.len() - 1], Some(EOS as usize));
    }
}
