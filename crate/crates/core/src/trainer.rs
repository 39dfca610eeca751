//! Joint training: generation steps interleaved with gaze steps, gradient
//! surgery on the EyeLayer, alignment-only sweeps and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignloss::{align_loss_graph, AlignLossConfig};
use crate::error::{Error, Result};
use crate::eyelayer::{is_eyelayer_param, AttentionDump, EyeLayerConfig, EyeLayerOutput};
use crate::minilm::{self, forward, generation_loss, Batch, ForwardOptions, ModelConfig};
use crate::numerics::{Array, Gradients, Graph, Precision};
use crate::params::{Bindings, ParamStore};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_gen: usize,
    pub batch_gaze: usize,
    /// Generation steps between consecutive gaze steps.
    pub interleave_k: usize,
    pub lambda_align: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Learning rate of the alignment-only sweeps.
    pub align_lr: f64,
    /// Alignment sweeps run at the end of each epoch, with the rate decaying
    /// linearly across them.
    pub align_sweeps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_gen: 8,
            batch_gaze: 4,
            interleave_k: 200,
            lambda_align: 0.1,
            epochs: 3,
            grad_clip: 1.0,
            seed: 0,
            precision: Precision::F32,
            align_lr: 3e-2,
            align_sweeps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interleave_k == 0 {
            return Err(Error::Config("interleave_k must be at least 1".into()));
        }
        if !(self.lambda_align >= 0.0) {
            return Err(Error::Config("lambda_align must be non-negative".into()));
        }
        if !(self.lr >= 0.0) || !(self.align_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_gen == 0 || self.batch_gaze == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// PCGrad: each task gradient is projected off every other task gradient it
/// conflicts with (negative dot product), visiting the others in random
/// order; the result is the mean of the projected gradients.
pub fn pcgrad_project(grads: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let Some(first) = grads.first() else {
        return Err(Error::Dimension("PCGrad needs at least one task".into()));
    };
    let n = first.len();
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::Dimension("task gradients differ in length".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut out = vec![0.0; n];
    for (i, gi) in grads.iter().enumerate() {
        let mut proj = gi.clone();
        let mut others: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        others.shuffle(rng);
        for j in others {
            let gj = &grads[j];
            let nj = dot(gj, gj);
            if nj == 0.0 {
                continue;
            }
            let d = dot(&proj, gj);
            if d < 0.0 {
                let c = d / nj;
                for (p, x) in proj.iter_mut().zip(gj) {
                    *p -= c * x;
                }
            }
        }
        for (o, p) in out.iter_mut().zip(&proj) {
            *o += p;
        }
    }
    let k = grads.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// Adam moments for a set of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl Adam {
    /// One update of every parameter named in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            }
            cfg.precision.round(m);
            cfg.precision.round(v);
            let data = p.data_mut();
            for i in 0..g.len() {
                data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            }
            cfg.precision.round(data);
        }
        Ok(())
    }
}

fn clip_global(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.values_mut().flatten().for_each(|v| *v *= c);
    }
    norm
}

fn collect(
    grads: &Gradients,
    binds: &Bindings,
    filter: impl Fn(&str) -> bool,
) -> BTreeMap<String, Vec<f64>> {
    binds
        .iter()
        .filter(|(n, _)| filter(n))
        .map(|(n, &v)| (n.clone(), grads.get_or_zeros(v).into_data()))
        .collect()
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelConfig,
    pub eye: Option<EyeLayerConfig>,
    pub align: AlignLossConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub opt: Adam,
    /// Optimizer of the alignment-only sweeps (EyeLayer parameters only).
    pub align_opt: Adam,
    pub step: u64,
    pub gen_steps: u64,
    pub gaze_steps: u64,
    pub rng: ChaCha8Rng,
    pub best_val: Option<f64>,
}

impl TrainState {
    pub fn new(
        model: ModelConfig,
        eye: Option<EyeLayerConfig>,
        align: AlignLossConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        train.validate()?;
        align.validate()?;
        if let Some(e) = &eye {
            e.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let mut params = minilm::init_params(&model, eye.as_ref(), &mut rng)?;
        for (_, a) in params.iter_mut() {
            train.precision.round(a.data_mut());
        }
        Ok(Self {
            model,
            eye,
            align,
            train,
            params,
            opt: Adam::default(),
            align_opt: Adam::default(),
            step: 0,
            gen_steps: 0,
            gaze_steps: 0,
            rng,
            best_val: None,
        })
    }

    pub fn eye_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| is_eyelayer_param(n))
            .collect()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub kind: StepKind,
    pub loss_gen: Option<f64>,
    pub loss_align: Option<f64>,
    pub mean_g: Option<f64>,
    pub mode_weights: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Gen,
    Gaze,
    Sweep,
}

fn eye_summary(g: &Graph, eye: Option<&EyeLayerOutput>) -> (Option<f64>, Option<Vec<f64>>) {
    let Some(e) = eye else { return (None, None) };
    let gate = g.value(e.gate).data();
    let mean_g = gate.iter().sum::<f64>() / gate.len() as f64;
    let w = g.value(e.weights);
    let (b, k) = (w.shape()[0], w.shape()[1]);
    let mut mean_w = vec![0.0; k];
    for row in w.data().chunks(k) {
        for (m, x) in mean_w.iter_mut().zip(row) {
            *m += x / b as f64;
        }
    }
    (Some(mean_g), Some(mean_w))
}

/// One optimizer step on the generation loss over every parameter.
pub fn train_step_gen(state: &mut TrainState, batch: &Batch) -> Result<LogRecord> {
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, |_| true);
    let out = forward(
        &mut g,
        batch,
        &state.model,
        state.eye.as_ref(),
        &p,
        ForwardOptions {
            train_rng: Some(&mut state.rng),
            stop_after_eyelayer: false,
        },
    )?;
    let loss = generation_loss(&mut g, out.logits.expect("full forward"), &out.labels)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "generation loss {value} at step {}",
            state.step
        )));
    }
    let mut grads = collect(&g.backward(loss)?, &p, |_| true);
    clip_global(&mut grads, state.train.grad_clip);
    let lr = state.train.lr;
    state
        .opt
        .step(&mut state.params, &grads, lr, &state.train)?;
    state.step += 1;
    state.gen_steps += 1;
    let (mean_g, mode_weights) = eye_summary(&g, out.eye.as_ref());
    Ok(LogRecord {
        step: state.step,
        kind: StepKind::Gen,
        loss_gen: Some(value),
        loss_align: None,
        mean_g,
        mode_weights,
    })
}

/// One step on a gaze batch. The generation loss is used when the batch
/// carries summaries; the alignment loss when it carries fixation targets.
/// EyeLayer parameters combine the two task gradients with PCGrad (tasks
/// with zero weight are left out); the rest get their sum.
pub fn train_step_joint(
    state: &mut TrainState,
    batch: &Batch,
    lambda_align: f64,
) -> Result<LogRecord> {
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, |_| true);
    let has_gen = batch.has_labels();
    let out = forward(
        &mut g,
        batch,
        &state.model,
        state.eye.as_ref(),
        &p,
        ForwardOptions {
            train_rng: Some(&mut state.rng),
            stop_after_eyelayer: !has_gen,
        },
    )?;
    let gen = match (has_gen, out.logits) {
        (true, Some(l)) => Some(generation_loss(&mut g, l, &out.labels)?),
        _ => None,
    };
    let targets = batch.target_refs();
    let align = match &out.eye {
        Some(e) => align_loss_graph(
            &mut g,
            e.weights,
            e.mu,
            e.sigma,
            e.mode_probs,
            &targets,
            &state.align,
        )?,
        None => None,
    };
    let gen_value = gen.map(|v| g.value(v).item());
    let align_value = align.map(|v| g.value(v).item());
    for v in gen_value.iter().chain(&align_value) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "joint loss {v} at step {}",
                state.step
            )));
        }
    }

    let mut tasks: Vec<BTreeMap<String, Vec<f64>>> = Vec::new();
    if let Some(l) = gen {
        tasks.push(collect(&g.backward(l)?, &p, |_| true));
    }
    if let Some(l) = align.filter(|_| lambda_align > 0.0) {
        let mut a = collect(&g.backward(l)?, &p, |_| true);
        a.values_mut().flatten().for_each(|v| *v *= lambda_align);
        tasks.push(a);
    }

    if !tasks.is_empty() {
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let eye_names: Vec<String> = p
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| is_eyelayer_param(n))
            .collect();
        for (name, _) in p.iter().filter(|(n, _)| !is_eyelayer_param(n)) {
            let mut sum = tasks[0][name].clone();
            for t in &tasks[1..] {
                sum.iter_mut().zip(&t[name]).for_each(|(s, x)| *s += x);
            }
            grads.insert(name.clone(), sum);
        }
        if !eye_names.is_empty() {
            let flat: Vec<Vec<f64>> = tasks
                .iter()
                .map(|t| {
                    eye_names
                        .iter()
                        .flat_map(|n| t[n].iter().copied())
                        .collect()
                })
                .collect();
            let combined = pcgrad_project(&flat, &mut state.rng)?;
            let mut off = 0;
            for n in eye_names {
                let len = tasks[0][&n].len();
                grads.insert(n, combined[off..off + len].to_vec());
                off += len;
            }
        }
        clip_global(&mut grads, state.train.grad_clip);
        let lr = state.train.lr;
        state
            .opt
            .step(&mut state.params, &grads, lr, &state.train)?;
    }
    state.step += 1;
    state.gaze_steps += 1;
    let (mean_g, mode_weights) = eye_summary(&g, out.eye.as_ref());
    Ok(LogRecord {
        step: state.step,
        kind: StepKind::Gaze,
        loss_gen: gen_value,
        loss_align: align_value,
        mean_g,
        mode_weights,
    })
}

/// Step order for `n_gen` generation batches: `k` generation steps, then one
/// gaze step, repeating. No gaze steps when `with_gaze` is false.
pub fn schedule(n_gen: usize, k: usize, with_gaze: bool) -> Vec<StepKind> {
    let mut out = Vec::new();
    for i in 0..n_gen {
        out.push(StepKind::Gen);
        if with_gaze && (i + 1) % k == 0 {
            out.push(StepKind::Gaze);
        }
    }
    out
}

/// One pass over `gen`, inserting a gaze step every `interleave_k` steps and
/// cycling through `gaze`; ends with the configured alignment sweeps.
pub fn interleaved_epoch(
    state: &mut TrainState,
    gen: &[Batch],
    gaze: &[Batch],
) -> Result<Vec<LogRecord>> {
    if gaze.is_empty() {
        log::warn!("no gaze batches: running a generation-only epoch");
    }
    let mut log = Vec::new();
    let mut gen_iter = gen.iter();
    let mut gaze_iter = gaze.iter().cycle();
    let lambda = state.train.lambda_align;
    for kind in schedule(gen.len(), state.train.interleave_k, !gaze.is_empty()) {
        let rec = match kind {
            StepKind::Gen => train_step_gen(state, gen_iter.next().expect("scheduled"))?,
            _ => train_step_joint(state, gaze_iter.next().expect("non-empty"), lambda)?,
        };
        log::debug!(
            "step {} {:?} gen {:?} align {:?}",
            rec.step,
            rec.kind,
            rec.loss_gen,
            rec.loss_align
        );
        log.push(rec);
    }
    if state.eye.is_some() && !gaze.is_empty() {
        let n = state.train.align_sweeps;
        log.extend(alignment_sweeps(state, gaze, n)?);
    }
    Ok(log)
}

fn align_graph(
    g: &mut Graph,
    state: &mut TrainState,
    batch: &Batch,
    train: bool,
) -> Result<(
    Bindings,
    Option<crate::numerics::Var>,
    Option<EyeLayerOutput>,
)> {
    let p = state.params.bind(g, is_eyelayer_param);
    let out = forward(
        g,
        batch,
        &state.model,
        state.eye.as_ref(),
        &p,
        ForwardOptions {
            train_rng: train.then_some(&mut state.rng),
            stop_after_eyelayer: true,
        },
    )?;
    let Some(e) = out.eye else {
        return Err(Error::Config("alignment needs an EyeLayer".into()));
    };
    let loss = align_loss_graph(
        g,
        e.weights,
        e.mu,
        e.sigma,
        e.mode_probs,
        &batch.target_refs(),
        &state.align,
    )?;
    Ok((p, loss, Some(e)))
}

/// One pass over `gaze` that updates only EyeLayer parameters on the
/// alignment loss; base parameters are untouched.
pub fn alignment_sweep(state: &mut TrainState, gaze: &[Batch]) -> Result<LogRecord> {
    let lr = state.train.align_lr;
    sweep_at(state, gaze, lr)
}

/// `n` sweeps with the rate falling linearly from `align_lr` to
/// `align_lr / n`.
pub fn alignment_sweeps(
    state: &mut TrainState,
    gaze: &[Batch],
    n: usize,
) -> Result<Vec<LogRecord>> {
    let base = state.train.align_lr;
    (0..n)
        .map(|i| sweep_at(state, gaze, base * (n - i) as f64 / n as f64))
        .collect()
}

fn sweep_at(state: &mut TrainState, gaze: &[Batch], lr: f64) -> Result<LogRecord> {
    let mut total = 0.0;
    let mut count = 0;
    for batch in gaze {
        let mut g = Graph::new();
        let (p, loss, _) = align_graph(&mut g, state, batch, true)?;
        let Some(loss) = loss else { continue };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("alignment loss {value}")));
        }
        total += value;
        count += 1;
        let mut grads = collect(&g.backward(loss)?, &p, is_eyelayer_param);
        clip_global(&mut grads, state.train.grad_clip);
        state
            .align_opt
            .step(&mut state.params, &grads, lr, &state.train)?;
    }
    Ok(LogRecord {
        step: state.step,
        kind: StepKind::Sweep,
        loss_gen: None,
        loss_align: (count > 0).then(|| total / count as f64),
        mean_g: None,
        mode_weights: None,
    })
}

/// Per-sample alignment outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEval {
    pub loss: f64,
    pub weighted_mu: f64,
    pub mu_human: f64,
}

/// Alignment loss and weight-averaged center for every sample with a target.
pub fn evaluate_alignment(state: &mut TrainState, gaze: &[Batch]) -> Result<Vec<AlignmentEval>> {
    let mut out = Vec::new();
    for batch in gaze {
        for b in 0..batch.batch {
            let Some(t) = &batch.targets[b] else { continue };
            let single = single_row(batch, b);
            let mut g = Graph::new();
            let (_, loss, eye) = align_graph(&mut g, state, &single, false)?;
            let eye = eye.expect("checked");
            out.push(AlignmentEval {
                loss: g.value(loss.expect("target present")).item(),
                weighted_mu: eye.mixture(&g, 0).weighted_mu(),
                mu_human: t.mu_human,
            });
        }
    }
    Ok(out)
}

fn single_row(batch: &Batch, b: usize) -> Batch {
    let ex = minilm::Example {
        ids: batch.ids[b * batch.len..][..batch.real_len[b]].to_vec(),
        code_start: batch.masks.code_start[b],
        code_len: batch.masks.code_len[b],
        prompt_len: batch.prompt_len[b],
        target: batch.targets[b].clone(),
    };
    Batch::new(&[ex], batch.len).expect("row of a valid batch")
}

/// EyeLayer prior and mixture for one code prompt, in evaluation mode.
pub fn inspect_attention(
    state: &TrainState,
    example: &minilm::Example,
    vocab: &Vocab,
) -> Result<AttentionDump> {
    let prompt = example.prompt();
    let batch = Batch::new(std::slice::from_ref(&prompt), prompt.ids.len())?;
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, |_| false);
    let opts = ForwardOptions {
        stop_after_eyelayer: true,
        ..ForwardOptions::default()
    };
    let out = forward(&mut g, &batch, &state.model, state.eye.as_ref(), &p, opts)?;
    let Some(eye) = out.eye else {
        return Err(Error::Config("checkpoint has no EyeLayer".into()));
    };
    let code = &prompt.ids[prompt.code_start..prompt.code_start + prompt.code_len];
    let tokens = code
        .iter()
        .map(|&id| {
            String::from_utf8_lossy(vocab.token_bytes(id as u32).unwrap_or_default()).into_owned()
        })
        .collect();
    let gmm = eye.mixture(&g, 0);
    Ok(AttentionDump {
        tokens,
        prior: eye.prior_row(&g, 0, prompt.code_len),
        w: gmm.w,
        mu: gmm.mu,
        sigma: gmm.sigma,
        g: eye.gate_value(&g, 0),
    })
}

/// Mean generation loss over batches that carry summaries.
pub fn evaluate_gen_loss(state: &TrainState, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for batch in batches.iter().filter(|b| b.has_labels()) {
        let mut g = Graph::new();
        let p = state.params.bind(&mut g, |_| false);
        let out = forward(
            &mut g,
            batch,
            &state.model,
            state.eye.as_ref(),
            &p,
            ForwardOptions::default(),
        )?;
        let loss = generation_loss(&mut g, out.logits.expect("full forward"), &out.labels)?;
        total += g.value(loss).item();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(total / n as f64)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GZPRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    eye: Option<EyeLayerConfig>,
    align: AlignLossConfig,
    train: TrainConfig,
    dtype: Precision,
    step: u64,
    gen_steps: u64,
    gaze_steps: u64,
    opt_t: u64,
    align_opt_t: u64,
    rng: ChaCha8Rng,
    best_val: Option<f64>,
    tensors: Vec<TensorEntry>,
}

/// Writes `state` as magic, version, header length, JSON header and raw
/// little-endian tensor data (32- or 64-bit per the precision mode).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    for (name, a) in state.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            group: "param".into(),
            shape: a.shape().to_vec(),
        });
        payload.push(a.data());
    }
    for (group, opt) in [("opt", &state.opt), ("align_opt", &state.align_opt)] {
        for (moment, map) in [("m", &opt.m), ("v", &opt.v)] {
            for (name, v) in map {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    group: format!("{group}.{moment}"),
                    shape: vec![v.len()],
                });
                payload.push(v);
            }
        }
    }
    let header = Header {
        model: state.model.clone(),
        eye: state.eye.clone(),
        align: state.align.clone(),
        train: state.train.clone(),
        dtype: state.train.precision,
        step: state.step,
        gen_steps: state.gen_steps,
        gaze_steps: state.gaze_steps,
        opt_t: state.opt.t,
        align_opt_t: state.align_opt.t,
        rng: state.rng.clone(),
        best_val: state.best_val,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for data in payload {
        for &v in data {
            match header.dtype {
                Precision::F32 => f.write_all(&(v as f32).to_le_bytes())?,
                Precision::F64 => f.write_all(&v.to_le_bytes())?,
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic string; not a checkpoint".into()));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; hlen];
    f.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let h: Header = serde_json::from_slice(&json)?;
    let width = match h.dtype {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut params = ParamStore::new();
    let mut opt = Adam {
        t: h.opt_t,
        ..Adam::default()
    };
    let mut align_opt = Adam {
        t: h.align_opt_t,
        ..Adam::default()
    };
    for t in h.tensors {
        let n: usize = t.shape.iter().product();
        let mut raw = vec![0u8; n * width];
        f.read_exact(&mut raw)
            .map_err(|_| Error::Format(format!("truncated data for {}", t.name)))?;
        let data: Vec<f64> = match h.dtype {
            Precision::F32 => raw
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        match t.group.as_str() {
            "param" => params.insert(t.name, Array::new(t.shape, data)?),
            "opt.m" => drop(opt.m.insert(t.name, data)),
            "opt.v" => drop(opt.v.insert(t.name, data)),
            "align_opt.m" => drop(align_opt.m.insert(t.name, data)),
            "align_opt.v" => drop(align_opt.v.insert(t.name, data)),
            other => return Err(Error::Format(format!("unknown tensor group {other}"))),
        }
    }
    if f.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Ok(TrainState {
        model: h.model,
        eye: h.eye,
        align: h.align,
        train: h.train,
        params,
        opt,
        align_opt,
        step: h.step,
        gen_steps: h.gen_steps,
        gaze_steps: h.gaze_steps,
        rng: h.rng,
        best_val: h.best_val,
    })
}
