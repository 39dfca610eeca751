//! Gaussian-mixture attention prior and the hidden-state perturbation it shapes.
//!
//! Given hidden states `H [B, L, d]` from some transformer layer, the layer
//!
//! 1. pools the code region into one embedding per sample,
//! 2. gates `K` modes with a small softmax network,
//! 3. predicts a center and spread per mode from a shared head,
//! 4. mixes the per-mode normalized Gaussians into a prior `P` over code tokens,
//! 5. builds a low-rank perturbation of `H`, reweights it by `λ · P` on valid
//!    code positions and clips each position's norm,
//! 6. scales it by a per-sample highway gate and adds it back to `H`.
//!
//! Only code-region positions are perturbed, and the prior depends only on
//! the code region, so a causal decoder stays causal over the summary.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Array, Graph, Var};
use crate::params::{Bindings, ParamStore};

pub const PREFIX: &str = "eyelayer.";
const POOL_EPS: f64 = 1e-8;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EyeLayerConfig {
    /// Number of Gaussian modes `K`.
    pub modes: usize,
    pub width: usize,
    pub rank: usize,
    /// Positional decay used when pooling the code embedding.
    pub gamma: f64,
    pub sigma_min: f64,
    pub g_max: f64,
    pub alpha: f64,
    pub lambda_init: f64,
    /// Weight above which a mode counts as active.
    pub tau: f64,
    pub gate_bias_init: f64,
    pub dropout: f64,
    /// `false` drops the gating network and uses a single mode.
    pub multimodal: bool,
    pub clip_norm: f64,
    pub use_positions: bool,
    /// Replaces the learned highway gate with a constant (diagnostics).
    pub gate_override: Option<f64>,
}

impl Default for EyeLayerConfig {
    fn default() -> Self {
        Self {
            modes: 3,
            width: 128,
            rank: 16,
            gamma: 0.95,
            sigma_min: 1.0,
            g_max: 0.5,
            alpha: 1.0,
            lambda_init: 1.0,
            tau: 0.1,
            gate_bias_init: -3.0,
            dropout: 0.1,
            multimodal: true,
            clip_norm: 1.0,
            use_positions: true,
            gate_override: None,
        }
    }
}

impl EyeLayerConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    /// Modes actually instantiated (1 for the single-mode variant).
    pub fn active_modes(&self) -> usize {
        if self.multimodal {
            self.modes
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.modes == 0 {
            return bad("mode count must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.rank == 0 || self.rank >= self.width {
            return bad(format!(
                "rank {} must lie in (0, {})",
                self.rank, self.width
            ));
        }
        if !(self.g_max > 0.0) {
            return bad(format!("g_max {} must be positive", self.g_max));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if !(self.sigma_min > 0.0) {
            return bad(format!("sigma_min {} must be positive", self.sigma_min));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    fn gate_hidden(&self) -> usize {
        (self.width / 4).max(1)
    }
}

/// Number of weights in the down/up projection pair.
pub fn lowrank_param_count(width: usize, rank: usize) -> usize {
    2 * width * rank
}

/// Per-sample mixture parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureParams {
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianMixtureParams {
    pub fn modes(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self, len: usize, sigma_min: f64) -> Result<()> {
        let k = self.w.len();
        if self.mu.len() != k || self.sigma.len() != k || k == 0 {
            return dim_err("mixture parameter lengths disagree");
        }
        if (self.w.iter().sum::<f64>() - 1.0).abs() > 1e-6 || self.w.iter().any(|&w| w < 0.0) {
            return Err(Error::Range("mode weights are not on the simplex".into()));
        }
        let hi_mu = len.saturating_sub(1) as f64;
        let hi_sigma = (len as f64 / 2.0).max(sigma_min);
        for (&m, &s) in self.mu.iter().zip(&self.sigma) {
            if !(0.0..=hi_mu).contains(&m) || !(sigma_min..=hi_sigma).contains(&s) {
                return Err(Error::Range(format!(
                    "mode (mu {m}, sigma {s}) outside range for L = {len}"
                )));
            }
        }
        Ok(())
    }

    /// Mode-weighted mean center.
    pub fn weighted_mu(&self) -> f64 {
        self.w.iter().zip(&self.mu).map(|(w, m)| w * m).sum()
    }
}

/// Mixture prior over positions `0..len`.
pub fn build_mixture(gmm: &GaussianMixtureParams, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return dim_err("mixture over zero positions");
    }
    let k = gmm.modes();
    let mut g = Graph::new();
    let w = g.constant(Array::new(vec![1, k], gmm.w.clone())?);
    let mu = g.constant(Array::new(vec![1, k], gmm.mu.clone())?);
    let sigma = g.constant(Array::new(vec![1, k], gmm.sigma.clone())?);
    let pk = g.gaussian_modes(mu, sigma, &[len])?;
    let p = g.mix(w, pk)?;
    Ok(g.value(p).data().to_vec())
}

/// Masks and code-region geometry for a padded batch of length `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanMasks {
    pub batch: usize,
    pub len: usize,
    /// 1 for real tokens.
    pub attn: Vec<f64>,
    /// 1 for special tokens.
    pub special: Vec<f64>,
    /// 1 on positions eligible for perturbation (code region, non-special).
    pub valid: Vec<f64>,
    pub code_start: Vec<usize>,
    pub code_len: Vec<usize>,
}

impl SpanMasks {
    /// Masks for rows whose code region is `[start, start + len)` and that
    /// have `lens[b]` real tokens.
    pub fn from_regions(
        width: usize,
        real_lens: &[usize],
        code_start: &[usize],
        code_len: &[usize],
    ) -> Self {
        let b = real_lens.len();
        let mut attn = vec![0.0; b * width];
        let mut valid = vec![0.0; b * width];
        for bi in 0..b {
            attn[bi * width..bi * width + real_lens[bi]].fill(1.0);
            valid[bi * width + code_start[bi]..bi * width + code_start[bi] + code_len[bi]]
                .fill(1.0);
        }
        Self {
            batch: b,
            len: width,
            attn,
            special: vec![0.0; b * width],
            valid,
            code_start: code_start.to_vec(),
            code_len: code_len.to_vec(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.batch * self.len;
        if self.attn.len() != n || self.special.len() != n || self.valid.len() != n {
            return dim_err("mask lengths do not match batch geometry");
        }
        if self.code_start.len() != self.batch || self.code_len.len() != self.batch {
            return dim_err("one code region per row is required");
        }
        for b in 0..self.batch {
            if self.code_len[b] == 0 {
                return dim_err(format!("row {b} has an empty code region"));
            }
            if self.code_start[b] + self.code_len[b] > self.len {
                return dim_err(format!("row {b} code region exceeds the sequence"));
            }
        }
        Ok(())
    }

    /// Zero-based position of each token inside its row's code region.
    pub fn code_positions(&self) -> Vec<f64> {
        let mut pos = vec![0.0; self.batch * self.len];
        for b in 0..self.batch {
            for i in 0..self.len {
                pos[b * self.len + i] = i.saturating_sub(self.code_start[b]) as f64;
            }
        }
        pos
    }
}

/// Pooling weights `M_i D_i / (Σ M + ε)`; also reports rows with an empty mask.
pub fn pool_weights(
    attn: &[f64],
    special: &[f64],
    positions: Option<&[f64]>,
    gamma: f64,
    batch: usize,
    len: usize,
) -> (Array, Vec<bool>) {
    let mut w = vec![0.0; batch * len];
    let mut empty = vec![false; batch];
    for b in 0..batch {
        let row = b * len..(b + 1) * len;
        let m: Vec<f64> = row.clone().map(|i| attn[i] * (1.0 - special[i])).collect();
        let denom = m.iter().sum::<f64>() + POOL_EPS;
        empty[b] = m.iter().all(|&v| v == 0.0);
        for (j, i) in row.enumerate() {
            let decay = positions.map_or(1.0, |p| gamma.powf(p[i]));
            w[i] = m[j] * decay / denom;
        }
    }
    (Array::new(vec![batch, len], w).unwrap(), empty)
}

/// Code-level embedding `e [B, d]`.
pub fn pool_code_embedding(
    g: &mut Graph,
    h: Var,
    attn: &[f64],
    special: &[f64],
    positions: Option<&[f64]>,
    gamma: f64,
) -> Result<(Var, Vec<bool>)> {
    let shape = g.shape(h).to_vec();
    if shape.len() != 3 {
        return dim_err("hidden states must be [B, L, d]");
    }
    let (w, empty) = pool_weights(attn, special, positions, gamma, shape[0], shape[1]);
    Ok((g.weighted_pool(h, &w)?, empty))
}

/// Mode weights `softmax(W2 φ(W1 e + b1) + b2)`, `[B, K]`.
pub fn gate_modes(g: &mut Graph, e: Var, p: &Bindings) -> Result<Var> {
    let hidden = g.linear(e, p.var("eyelayer.gate.w1")?, p.var("eyelayer.gate.b1")?)?;
    let hidden = g.gelu(hidden);
    let logits = g.linear(
        hidden,
        p.var("eyelayer.gate.w2")?,
        p.var("eyelayer.gate.b2")?,
    )?;
    Ok(g.softmax_last(logits))
}

/// Constrained centers and spreads, each `[B, K]`.
pub fn predict_mode_params(
    g: &mut Graph,
    e: Var,
    lens: &[usize],
    p: &Bindings,
    cfg: &EyeLayerConfig,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    if lens.contains(&0) {
        return dim_err("code length L must be at least 1");
    }
    let shared = g.linear(e, p.var("eyelayer.shared.w")?, p.var("eyelayer.shared.b")?)?;
    let shared = g.gelu(shared);
    let shared = g.layernorm(
        shared,
        p.var("eyelayer.shared.ln.gamma")?,
        p.var("eyelayer.shared.ln.beta")?,
        LN_EPS,
    )?;
    let shared = match train_rng {
        Some(rng) => g.dropout(shared, cfg.dropout, true, rng)?,
        None => shared,
    };
    let mu_raw = g.linear(shared, p.var("eyelayer.mu.w")?, p.var("eyelayer.mu.b")?)?;
    let sigma_raw = g.linear(
        shared,
        p.var("eyelayer.sigma.w")?,
        p.var("eyelayer.sigma.b")?,
    )?;
    let k = g.shape(mu_raw)[1];
    let b = lens.len();
    let mu_scale: Vec<f64> = lens
        .iter()
        .flat_map(|&l| std::iter::repeat_n((l - 1) as f64, k))
        .collect();
    let sig_scale: Vec<f64> = lens
        .iter()
        .flat_map(|&l| std::iter::repeat_n((l as f64 / 2.0 - cfg.sigma_min).max(0.0), k))
        .collect();
    let mu = g.sigmoid(mu_raw);
    let mu = g.mul_const(mu, &Array::new(vec![b, k], mu_scale)?)?;
    let sigma = g.sigmoid(sigma_raw);
    let sigma = g.mul_const(sigma, &Array::new(vec![b, k], sig_scale)?)?;
    let sigma = g.affine(sigma, 1.0, cfg.sigma_min);
    Ok((mu, sigma))
}

/// `ReLU(H W_down) W_up`.
pub fn lowrank_perturbation(g: &mut Graph, h: Var, p: &Bindings) -> Result<Var> {
    let z = g.matmul(h, p.var("eyelayer.down")?)?;
    let z = g.relu(z);
    g.matmul(z, p.var("eyelayer.up")?)
}

/// `λ · P(i) · ΔH_base[i] · A_i`, each position's norm clipped to `clip_norm`.
/// `prior` is `[B, L]` over full sequence positions.
pub fn weight_perturbation(
    g: &mut Graph,
    delta_base: Var,
    prior: Var,
    lambda: Var,
    valid: &[f64],
    clip_norm: f64,
) -> Result<Var> {
    let shape = g.shape(delta_base).to_vec();
    let rows = shape[0] * shape[1];
    let masked = g.mul_const(prior, &Array::new(g.shape(prior).to_vec(), valid.to_vec())?)?;
    let scales = g.reshape(masked, &[rows])?;
    let flat = g.reshape(delta_base, &[rows, shape[2]])?;
    let weighted = g.row_scale(flat, scales)?;
    let weighted = g.scalar_mul(weighted, lambda)?;
    let clipped = g.clip_row_norm(weighted, clip_norm);
    g.reshape(clipped, &shape)
}

/// Highway gate `g_max · sigmoid(MLP([LN(h̄); f]))`, `[B]`.
pub fn adaptive_gate(
    g: &mut Graph,
    h: Var,
    prior_code: Var,
    weights: Var,
    masks: &SpanMasks,
    p: &Bindings,
    cfg: &EyeLayerConfig,
) -> Result<Var> {
    if let Some(v) = cfg.gate_override {
        return Ok(g.constant(Array::full(&[masks.batch], v)));
    }
    let zeros = vec![0.0; masks.valid.len()];
    let (w, _) = pool_weights(&masks.valid, &zeros, None, 1.0, masks.batch, masks.len);
    let hbar = g.weighted_pool(h, &w)?;
    let hbar = g.layernorm(
        hbar,
        p.var("eyelayer.highway.ln.gamma")?,
        p.var("eyelayer.highway.ln.beta")?,
        LN_EPS,
    )?;
    let feats = g.gate_features(prior_code, weights, &masks.code_len, cfg.tau)?;
    let x = g.concat_last(hbar, feats)?;
    let x = g.linear(
        x,
        p.var("eyelayer.highway.w1")?,
        p.var("eyelayer.highway.b1")?,
    )?;
    let x = g.gelu(x);
    let x = g.linear(
        x,
        p.var("eyelayer.highway.w2")?,
        p.var("eyelayer.highway.b2")?,
    )?;
    let x = g.sigmoid(x);
    let x = g.scale(x, cfg.g_max);
    g.reshape(x, &[masks.batch])
}

/// `H + α · g_b · ΔH̃`.
pub fn integrate(g: &mut Graph, h: Var, delta: Var, gate: Var, alpha: f64) -> Result<Var> {
    let shape = g.shape(h).to_vec();
    let rows = shape[0] * shape[1];
    let per_row = g.repeat_each(gate, shape[1]);
    let flat = g.reshape(delta, &[rows, shape[2]])?;
    let scaled = g.row_scale(flat, per_row)?;
    let scaled = g.scale(scaled, alpha);
    let scaled = g.reshape(scaled, &shape)?;
    g.add(h, scaled)
}

/// Graph handles for everything the layer produces.
#[derive(Clone, Debug)]
pub struct EyeLayerOutput {
    pub hidden: Var,
    /// Mixture prior over code positions, `[B, max code len]`.
    pub prior: Var,
    /// Per-mode normalized Gaussians, `[B, K, max code len]`.
    pub mode_probs: Var,
    pub weights: Var,
    pub mu: Var,
    pub sigma: Var,
    pub gate: Var,
    /// Rows whose pooling mask was empty (embedding forced to zero).
    pub empty_rows: Vec<bool>,
}

pub fn eyelayer_forward(
    g: &mut Graph,
    h: Var,
    masks: &SpanMasks,
    cfg: &EyeLayerConfig,
    p: &Bindings,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<EyeLayerOutput> {
    masks.check()?;
    let shape = g.shape(h).to_vec();
    if shape != [masks.batch, masks.len, cfg.width] {
        return dim_err(format!(
            "hidden states {:?} do not match masks [{}, {}] and width {}",
            shape, masks.batch, masks.len, cfg.width
        ));
    }
    // Pool over the code region only so the prior never sees summary tokens.
    let pool_attn: Vec<f64> = masks
        .attn
        .iter()
        .zip(&masks.valid)
        .map(|(a, v)| a * v)
        .collect();
    let positions = cfg.use_positions.then(|| masks.code_positions());
    let (e, empty_rows) = pool_code_embedding(
        g,
        h,
        &pool_attn,
        &masks.special,
        positions.as_deref(),
        cfg.gamma,
    )?;

    let k = cfg.active_modes();
    let weights = if cfg.multimodal {
        gate_modes(g, e, p)?
    } else {
        g.constant(Array::ones(&[masks.batch, 1]))
    };
    let (mu, sigma) = predict_mode_params(g, e, &masks.code_len, p, cfg, train_rng)?;
    debug_assert_eq!(g.shape(mu)[1], k);
    let mode_probs = g.gaussian_modes(mu, sigma, &masks.code_len)?;
    let prior = g.mix(weights, mode_probs)?;
    let prior_full = g.place(prior, &masks.code_start, &masks.code_len, masks.len)?;

    let base = lowrank_perturbation(g, h, p)?;
    let delta = weight_perturbation(
        g,
        base,
        prior_full,
        p.var("eyelayer.lambda")?,
        &masks.valid,
        cfg.clip_norm,
    )?;
    let gate = adaptive_gate(g, h, prior, weights, masks, p, cfg)?;
    let hidden = integrate(g, h, delta, gate, cfg.alpha)?;
    Ok(EyeLayerOutput {
        hidden,
        prior,
        mode_probs,
        weights,
        mu,
        sigma,
        gate,
        empty_rows,
    })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fresh parameters. Center biases spread the modes over early, middle and
/// late code positions; the highway gate starts almost closed.
pub fn init_params(cfg: &EyeLayerConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.width;
    let k = cfg.active_modes();
    let hg = cfg.gate_hidden();
    let mut ps = ParamStore::new();
    let std_d = 1.0 / (d as f64).sqrt();
    if cfg.multimodal {
        ps.insert("eyelayer.gate.w1", Array::randn(&[d, d], std_d, rng));
        ps.insert("eyelayer.gate.b1", Array::zeros(&[d]));
        ps.insert("eyelayer.gate.w2", Array::randn(&[d, k], 0.02, rng));
        ps.insert("eyelayer.gate.b2", Array::zeros(&[k]));
    }
    ps.insert("eyelayer.shared.w", Array::randn(&[d, d], std_d, rng));
    ps.insert("eyelayer.shared.b", Array::zeros(&[d]));
    ps.insert("eyelayer.shared.ln.gamma", Array::ones(&[d]));
    ps.insert("eyelayer.shared.ln.beta", Array::zeros(&[d]));
    let fracs: Vec<f64> = if k == 1 {
        vec![0.5]
    } else {
        (0..k)
            .map(|i| 0.2 + 0.6 * i as f64 / (k - 1) as f64)
            .collect()
    };
    ps.insert("eyelayer.mu.w", Array::randn(&[d, k], 0.01, rng));
    ps.insert(
        "eyelayer.mu.b",
        Array::from_vec(fracs.iter().map(|&f| logit(f)).collect()),
    );
    ps.insert("eyelayer.sigma.w", Array::randn(&[d, k], 0.01, rng));
    ps.insert("eyelayer.sigma.b", Array::full(&[k], logit(0.1)));
    ps.insert("eyelayer.down", Array::randn(&[d, cfg.rank], std_d, rng));
    ps.insert(
        "eyelayer.up",
        Array::randn(&[cfg.rank, d], 1.0 / (cfg.rank as f64).sqrt(), rng),
    );
    ps.insert("eyelayer.lambda", Array::scalar(cfg.lambda_init));
    ps.insert("eyelayer.highway.ln.gamma", Array::ones(&[d]));
    ps.insert("eyelayer.highway.ln.beta", Array::zeros(&[d]));
    ps.insert("eyelayer.highway.w1", Array::randn(&[d + 4, hg], 0.02, rng));
    ps.insert("eyelayer.highway.b1", Array::zeros(&[hg]));
    ps.insert("eyelayer.highway.w2", Array::randn(&[hg, 1], 0.02, rng));
    ps.insert("eyelayer.highway.b2", Array::scalar(cfg.gate_bias_init));
    Ok(ps)
}

pub fn is_eyelayer_param(name: &str) -> bool {
    name.starts_with(PREFIX)
}

/// Plain values of one forward pass, for inspection dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    #[serde(rename = "P")]
    pub prior: Vec<f64>,
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub g: f64,
}

impl EyeLayerOutput {
    /// Mixture parameters of row `b`.
    pub fn mixture(&self, g: &Graph, b: usize) -> GaussianMixtureParams {
        let k = g.shape(self.mu)[1];
        let row = |v: Var| g.value(v).data()[b * k..(b + 1) * k].to_vec();
        GaussianMixtureParams {
            w: row(self.weights),
            mu: row(self.mu),
            sigma: row(self.sigma),
        }
    }

    pub fn prior_row(&self, g: &Graph, b: usize, len: usize) -> Vec<f64> {
        let width = g.shape(self.prior)[1];
        g.value(self.prior).data()[b * width..b * width + len].to_vec()
    }

    pub fn gate_value(&self, g: &Graph, b: usize) -> f64 {
        g.value(self.gate).data()[b]
    }
}
