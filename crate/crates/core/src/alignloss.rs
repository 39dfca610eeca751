//! Alignment objective between predicted Gaussian modes and human fixations.
//!
//! Per mode `k` the matching loss combines a centroid term (CAL), a spread
//! term (SML), a concentration term over a window around the fixation
//! centroid (CR) and a hinge against near-uniform modes (AUP), weighted by the
//! mode weight. A separation hinge (MSP) keeps active centers apart.
//!
//! Scalar reference implementations sit next to the graph version used for
//! training; the tests check one against the other.

use serde::{Deserialize, Serialize};

use crate::astalign::FixationTarget;
use crate::error::{dim_err, Error, Result};
use crate::eyelayer::GaussianMixtureParams;
use crate::numerics::{Array, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignLossConfig {
    pub lambda_cal: f64,
    pub lambda_sml: f64,
    pub lambda_cr: f64,
    pub lambda_aup: f64,
    pub lambda_sep: f64,
    /// AUP margin `c`.
    pub margin: f64,
    /// Minimum center distance as a fraction of the code length.
    pub min_distance_frac: f64,
    /// Activation threshold for MSP.
    pub tau: f64,
    pub eps: f64,
}

impl Default for AlignLossConfig {
    fn default() -> Self {
        Self {
            lambda_cal: 1.0,
            lambda_sml: 0.5,
            lambda_cr: 0.5,
            lambda_aup: 0.1,
            lambda_sep: 0.1,
            margin: 0.05,
            min_distance_frac: 0.1,
            tau: 0.1,
            eps: 1e-8,
        }
    }
}

impl AlignLossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_cal,
            self.lambda_sml,
            self.lambda_cr,
            self.lambda_aup,
            self.lambda_sep,
        ];
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.margin > 0.0) || !(self.min_distance_frac > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "margin, minimum distance and eps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// MSP minimum distance `m` for code length `len`.
    pub fn min_distance(&self, len: usize) -> f64 {
        self.min_distance_frac * len as f64
    }
}

pub fn loss_cal(mu: f64, mu_human: f64, eps: f64) -> f64 {
    ((mu - mu_human).powi(2) + eps).sqrt()
}

pub fn loss_sml(sigma: f64, sigma_target: f64, eps: f64) -> f64 {
    ((sigma - sigma_target).powi(2) + eps).sqrt()
}

/// `1 - (mass of pk inside window)^2`.
pub fn loss_cr(pk: &[f64], window: std::ops::RangeInclusive<usize>) -> f64 {
    let inside: f64 = pk
        .iter()
        .enumerate()
        .filter(|(i, _)| window.contains(i))
        .map(|(_, p)| p)
        .sum();
    1.0 - inside * inside
}

/// `KL(U || pk)` with `eps` inside the log.
pub fn kl_uniform(pk: &[f64], eps: f64) -> f64 {
    let u = 1.0 / pk.len() as f64;
    pk.iter().map(|p| u * (u / (p + eps)).ln()).sum()
}

pub fn loss_aup(pk: &[f64], c: f64, eps: f64) -> f64 {
    (c - kl_uniform(pk, eps)).max(0.0)
}

pub fn loss_msp(gmm: &GaussianMixtureParams, m: f64, tau: f64) -> f64 {
    let k = gmm.modes();
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            if gmm.w[a] > tau && gmm.w[b] > tau {
                total += (m - (gmm.mu[a] - gmm.mu[b]).abs()).max(0.0);
            }
        }
    }
    total
}

/// Full objective for one sample. `pk[k]` is mode `k`'s normalized Gaussian.
pub fn loss_align(
    gmm: &GaussianMixtureParams,
    pk: &[Vec<f64>],
    target: &FixationTarget,
    cfg: &AlignLossConfig,
) -> Result<f64> {
    let len = target.len();
    if pk.len() != gmm.modes() || pk.iter().any(|p| p.len() != len) || len == 0 {
        return dim_err("mode distributions do not match the fixation target");
    }
    let mut matching = 0.0;
    for k in 0..gmm.modes() {
        let term = cfg.lambda_cal * loss_cal(gmm.mu[k], target.mu_human, cfg.eps)
            + cfg.lambda_sml * loss_sml(gmm.sigma[k], target.sigma_target, cfg.eps)
            + cfg.lambda_cr * loss_cr(&pk[k], target.window())
            + cfg.lambda_aup * loss_aup(&pk[k], cfg.margin, cfg.eps);
        matching += gmm.w[k] * term;
    }
    Ok(matching + cfg.lambda_sep * loss_msp(gmm, cfg.min_distance(len), cfg.tau))
}

/// Batched objective on the graph, averaged over rows that have a target.
///
/// `weights`, `mu`, `sigma` are `[B, K]`; `mode_probs` is `[B, K, Lmax]`
/// over code positions. Returns `None` when no row has a target.
pub fn align_loss_graph(
    g: &mut Graph,
    weights: Var,
    mu: Var,
    sigma: Var,
    mode_probs: Var,
    targets: &[Option<&FixationTarget>],
    cfg: &AlignLossConfig,
) -> Result<Option<Var>> {
    let pshape = g.shape(mode_probs).to_vec();
    if pshape.len() != 3 || pshape[0] != targets.len() || g.shape(mu) != &pshape[..2] {
        return dim_err(format!(
            "mode probabilities {:?} for {} targets",
            pshape,
            targets.len()
        ));
    }
    let (b, k, lmax) = (pshape[0], pshape[1], pshape[2]);
    let present = targets.iter().filter(|t| t.is_some()).count();
    if present == 0 {
        return Ok(None);
    }

    let mut mu_h = vec![0.0; b * k];
    let mut sigma_t = vec![0.0; b * k];
    let mut window = vec![0.0; b * k * lmax];
    let mut uniform = vec![0.0; b * k * lmax];
    let mut row_w = vec![0.0; b];
    for (bi, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let len = t.len();
        if len == 0 || len > lmax {
            return dim_err(format!(
                "row {bi}: target length {len} vs {lmax} code positions"
            ));
        }
        row_w[bi] = 1.0 / present as f64;
        mu_h[bi * k..][..k].fill(t.mu_human);
        sigma_t[bi * k..][..k].fill(t.sigma_target);
        for ki in 0..k {
            let base = (bi * k + ki) * lmax;
            for i in t.window() {
                window[base + i] = 1.0;
            }
            uniform[base..base + len].fill(1.0 / len as f64);
        }
    }
    let bk = [b, k];

    let cal = {
        let d = g.add_const(
            mu,
            &Array::new(bk.to_vec(), mu_h.iter().map(|v| -v).collect())?,
        )?;
        let d = g.square(d);
        let d = g.affine(d, 1.0, cfg.eps);
        g.sqrt(d)?
    };
    let sml = {
        let d = g.add_const(
            sigma,
            &Array::new(bk.to_vec(), sigma_t.iter().map(|v| -v).collect())?,
        )?;
        let d = g.square(d);
        let d = g.affine(d, 1.0, cfg.eps);
        g.sqrt(d)?
    };
    let cr = {
        let inside = g.weighted_sum_last(mode_probs, &Array::new(pshape.clone(), window)?)?;
        let sq = g.square(inside);
        g.affine(sq, -1.0, 1.0)
    };
    let aup = {
        // KL(U || P) = -ln L - mean_i ln(P_i + eps)
        let logp = g.affine(mode_probs, 1.0, cfg.eps);
        let logp = g.log(logp)?;
        let mean_log = g.weighted_sum_last(logp, &Array::new(pshape.clone(), uniform)?)?;
        let neg_ln_len: Vec<f64> = targets
            .iter()
            .flat_map(|t| std::iter::repeat_n(-(t.map_or(1, |t| t.len()) as f64).ln(), k))
            .collect();
        let kl = g.neg(mean_log);
        let kl = g.add_const(kl, &Array::new(bk.to_vec(), neg_ln_len)?)?;
        let h = g.affine(kl, -1.0, cfg.margin);
        g.relu(h)
    };

    let mut terms = g.scale(cal, cfg.lambda_cal);
    for (v, lam) in [
        (sml, cfg.lambda_sml),
        (cr, cfg.lambda_cr),
        (aup, cfg.lambda_aup),
    ] {
        let s = g.scale(v, lam);
        terms = g.add(terms, s)?;
    }
    let weighted = g.mul(weights, terms)?;
    let per_row = g.weighted_sum_last(weighted, &Array::ones(&bk))?;

    let per_row = if k > 1 && cfg.lambda_sep > 0.0 {
        let msp = msp_graph(g, mu, weights, targets, cfg)?;
        let msp = g.scale(msp, cfg.lambda_sep);
        g.add(per_row, msp)?
    } else {
        per_row
    };
    let rows = Array::new(vec![b], row_w)?;
    Ok(Some(g.weighted_sum_last(per_row, &rows)?))
}

/// Separation hinge per row, `[B]`.
fn msp_graph(
    g: &mut Graph,
    mu: Var,
    weights: Var,
    targets: &[Option<&FixationTarget>],
    cfg: &AlignLossConfig,
) -> Result<Var> {
    let (b, k) = (g.shape(mu)[0], g.shape(mu)[1]);
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|a| (a + 1..k).map(move |c| (a, c)))
        .collect();
    let np = pairs.len();
    let mut diff = vec![0.0; k * np];
    for (j, &(a, c)) in pairs.iter().enumerate() {
        diff[a * np + j] = 1.0;
        diff[c * np + j] = -1.0;
    }
    let wv = g.value(weights).data().to_vec();
    let mut active = vec![0.0; b * np];
    let mut margin = vec![0.0; b * np];
    for bi in 0..b {
        let m = cfg.min_distance(targets[bi].map_or(0, |t| t.len()));
        for (j, &(a, c)) in pairs.iter().enumerate() {
            if wv[bi * k + a] > cfg.tau && wv[bi * k + c] > cfg.tau {
                active[bi * np + j] = 1.0;
            }
            margin[bi * np + j] = m;
        }
    }
    let dmat = g.constant(Array::new(vec![k, np], diff)?);
    let d = g.matmul(mu, dmat)?;
    let d = g.abs(d);
    let d = g.neg(d);
    let h = g.add_const(d, &Array::new(vec![b, np], margin)?)?;
    let h = g.relu(h);
    g.weighted_sum_last(h, &Array::new(vec![b, np], active)?)
}

/// Reads back per-mode distributions for row `b` (first `len` positions).
pub fn mode_rows(g: &Graph, mode_probs: Var, b: usize, len: usize) -> Vec<Vec<f64>> {
    let s = g.shape(mode_probs);
    let (k, l) = (s[1], s[2]);
    let data = g.value(mode_probs).data();
    (0..k)
        .map(|ki| data[(b * k + ki) * l..][..len].to_vec())
        .collect()
}
