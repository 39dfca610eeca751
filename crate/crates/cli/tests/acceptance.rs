//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use gazeprior::alignloss::{align_loss_graph, AlignLossConfig};
use gazeprior::astalign::{compute_targets, FixationTarget};
use gazeprior::data::{batches, fit_length, gaze_examples};
use gazeprior::eyelayer::{
    self, build_mixture, eyelayer_forward, is_eyelayer_param, lowrank_param_count, EyeLayerConfig,
    GaussianMixtureParams, SpanMasks,
};
use gazeprior::metrics::{bleu4, meteor_lite, rouge_l};
use gazeprior::minilm::{
    self, forward, generate, generation_loss, Arch, Batch, Example, ForwardOptions, ModelConfig,
};
use gazeprior::numerics::{grad_check, Array, GradCheckReport, Graph, Var};
use gazeprior::params::{Bindings, ParamStore};
use gazeprior::synth::{code_pairs, gaze_sample, FixationSynthesis};
use gazeprior::tokenizer::{train_bpe, EOS, SEP};
use gazeprior::trainer::{
    alignment_sweeps, evaluate_alignment, pcgrad_project, TrainConfig, TrainState,
};
use gazeprior_cli::{
    cmd_preprocess_gaze, cmd_sweep, cmd_synth, cmd_train, Experiment, RunConfig, SynthSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Mixture evaluated straight from the formula, without the tape kernels.
fn mixture_oracle(gmm: &GaussianMixtureParams, len: usize) -> Vec<f64> {
    let mut p = vec![0.0; len];
    for k in 0..gmm.w.len() {
        let raw: Vec<f64> = (0..len)
            .map(|i| (-0.5 * ((i as f64 - gmm.mu[k]) / gmm.sigma[k]).powi(2)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        for i in 0..len {
            p[i] += gmm.w[k] * raw[i] / s;
        }
    }
    p
}

fn mixture_normalization() -> Outcome {
    let mut r = rng(101);
    let (mut worst, mut worst_oracle) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let len = r.gen_range(1..=256);
        let k = r.gen_range(1..=4);
        let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let gmm = GaussianMixtureParams {
            w: raw.iter().map(|v| v / s).collect(),
            mu: (0..k)
                .map(|_| r.gen_range(0.0..=(len - 1) as f64))
                .collect(),
            sigma: (0..k)
                .map(|_| r.gen_range(1.0..=(len as f64 / 2.0).max(1.0)))
                .collect(),
        };
        let p = build_mixture(&gmm, len).map_err(|e| e.to_string())?;
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        for (a, b) in p.iter().zip(mixture_oracle(&gmm, len)) {
            worst_oracle = worst_oracle.max((a - b).abs());
        }
    }
    check(
        worst <= 1e-6 && worst_oracle <= 1e-12,
        format!("1000 draws, max |sum - 1| = {worst:.2e}, max oracle deviation {worst_oracle:.2e}"),
    )
}

fn random_masks(r: &mut ChaCha8Rng) -> SpanMasks {
    let batch = r.gen_range(1..=3);
    let len = r.gen_range(2..=48);
    let mut real = Vec::new();
    let mut starts = Vec::new();
    let mut lens = Vec::new();
    for _ in 0..batch {
        let n = r.gen_range(2..=len);
        let s = r.gen_range(0..n - 1);
        real.push(n);
        starts.push(s);
        lens.push(r.gen_range(1..=n - s));
    }
    SpanMasks::from_regions(len, &real, &starts, &lens)
}

fn perturbed_eye_params(c: &EyeLayerConfig, r: &mut ChaCha8Rng, scale: f64) -> ParamStore {
    let mut ps = eyelayer::init_params(c, r).unwrap();
    for (_, a) in ps.iter_mut() {
        for v in a.data_mut() {
            *v += r.gen_range(-scale..scale);
        }
    }
    ps
}

fn range_enforcement() -> Outcome {
    let mut r = rng(202);
    let mut rows = 0;
    for draw in 0..1000 {
        let c = EyeLayerConfig {
            width: 8,
            rank: 3,
            dropout: 0.0,
            multimodal: r.gen_bool(0.7),
            sigma_min: r.gen_range(0.5..2.0),
            g_max: r.gen_range(0.1..1.0),
            ..EyeLayerConfig::default()
        };
        let ps = perturbed_eye_params(&c, &mut r, 3.0);
        let masks = random_masks(&mut r);
        let h0 = Array::randn(
            &[masks.batch, masks.len, c.width],
            r.gen_range(0.1..5.0),
            &mut r,
        );
        let mut g = Graph::new();
        let p = ps.bind(&mut g, |_| false);
        let h = g.constant(h0);
        let out = eyelayer_forward(&mut g, h, &masks, &c, &p, None).map_err(|e| e.to_string())?;
        for b in 0..masks.batch {
            let l = masks.code_len[b] as f64;
            let gmm = out.mixture(&g, b);
            let gate = out.gate_value(&g, b);
            let simplex =
                gmm.w.iter().all(|&w| w >= 0.0) && (gmm.w.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
            let mu_ok = gmm.mu.iter().all(|&m| (0.0..=l - 1.0).contains(&m));
            let hi = (l / 2.0).max(c.sigma_min);
            let sigma_ok = gmm.sigma.iter().all(|&s| (c.sigma_min..=hi).contains(&s));
            let gate_ok = (0.0..=c.g_max).contains(&gate);
            if !(simplex && mu_ok && sigma_ok && gate_ok) {
                return Err(format!("draw {draw} row {b}: L {l}, {gmm:?}, g {gate}"));
            }
            rows += 1;
        }
    }
    check(true, format!("1000 forwards, {rows} rows in range"))
}

fn tiny_model(arch: Arch, eyelayer_layer: Option<usize>) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        ffn_mult: 2,
        vocab_size: 300,
        max_len: 48,
        arch,
        eyelayer_layer,
    }
}

fn tiny_eye(width: usize) -> EyeLayerConfig {
    EyeLayerConfig {
        width,
        rank: 4,
        dropout: 0.0,
        ..EyeLayerConfig::default()
    }
}

/// Prompt layout: two prefix tokens, code, a separator block, summary, EOS.
fn example(r: &mut ChaCha8Rng, vocab: usize, code_len: usize, summary_len: usize) -> Example {
    let mut ids = vec![10, 11];
    ids.extend((0..code_len).map(|_| r.gen_range(20..vocab.min(256))));
    ids.extend([10, SEP as usize, 10]);
    let prompt_len = ids.len();
    ids.extend((0..summary_len).map(|_| r.gen_range(20..vocab.min(256))));
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
) -> Result<Array, String> {
    let mut g = Graph::new();
    let p = ps.bind(&mut g, |_| false);
    let out = forward(&mut g, batch, cfg, eye, &p, ForwardOptions::default())
        .map_err(|e| e.to_string())?;
    Ok(g.value(out.logits.expect("full forward")).clone())
}

/// Opens the learned highway gate so the hook actually changes the stream.
fn open_gate(ps: &mut ParamStore) {
    ps.get_mut("eyelayer.highway.b2").unwrap().data_mut()[0] = 1.0;
}

fn identity_degeneration() -> Outcome {
    let mut cases = 0;
    for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
        for seed in 0..5u64 {
            let with = tiny_model(arch, Some(1));
            let without = tiny_model(arch, None);
            let eye = tiny_eye(16);
            let mut r = rng(300 + seed);
            let mut ps =
                minilm::init_params(&with, Some(&eye), &mut r).map_err(|e| e.to_string())?;
            open_gate(&mut ps);
            let batch = Batch::new(
                &[example(&mut r, 300, 7, 4), example(&mut r, 300, 11, 2)],
                48,
            )
            .map_err(|e| e.to_string())?;
            let baseline = logits_of(&batch, &without, None, &ps)?;
            if logits_of(&batch, &with, Some(&eye), &ps)? == baseline {
                return Err(format!(
                    "{arch:?} seed {seed}: open hook left logits unchanged"
                ));
            }
            let closed = EyeLayerConfig {
                gate_override: Some(0.0),
                ..eye.clone()
            };
            let no_alpha = EyeLayerConfig {
                alpha: 0.0,
                ..eye.clone()
            };
            let mut no_lambda = ps.clone();
            no_lambda
                .get_mut("eyelayer.lambda")
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
            for (what, cfg, params) in [
                ("g = 0", &closed, &ps),
                ("alpha = 0", &no_alpha, &ps),
                ("lambda = 0", &eye, &no_lambda),
            ] {
                let got = logits_of(&batch, &with, Some(cfg), params)?;
                let bitwise = got
                    .data()
                    .iter()
                    .zip(baseline.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !bitwise {
                    return Err(format!(
                        "{arch:?} seed {seed}: {what} differs from the baseline"
                    ));
                }
                cases += 1;
            }
        }
    }
    check(
        true,
        format!("{cases} degenerate runs bitwise equal to the baseline"),
    )
}

fn causality() -> Outcome {
    let cfg = tiny_model(Arch::DecoderOnly, Some(0));
    let eye = tiny_eye(16);
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let mut r = rng(400 + trial);
        let mut ps = minilm::init_params(&cfg, Some(&eye), &mut r).map_err(|e| e.to_string())?;
        open_gate(&mut ps);
        let (c, n) = (r.gen_range(3..12), r.gen_range(2..8));
        let ex = example(&mut r, 300, c, n);
        let j = r.gen_range(ex.prompt_len + 1..ex.ids.len());
        let mut changed = ex.clone();
        changed.ids[j] = if ex.ids[j] == 50 { 51 } else { 50 };
        let a = logits_of(
            &Batch::new(std::slice::from_ref(&ex), 48).unwrap(),
            &cfg,
            Some(&eye),
            &ps,
        )?;
        let b = logits_of(&Batch::new(&[changed], 48).unwrap(), &cfg, Some(&eye), &ps)?;
        let v = cfg.vocab_size;
        for i in ex.prompt_len..j {
            for (x, y) in a.data()[i * v..(i + 1) * v]
                .iter()
                .zip(&b.data()[i * v..(i + 1) * v])
            {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let mut mismatches = 0;
    let mut prompts = 0;
    for arch in [Arch::DecoderOnly, Arch::EncoderDecoder] {
        let cfg = tiny_model(arch, Some(1));
        for s in 0..10u64 {
            let mut r = rng(450 + s);
            let mut ps =
                minilm::init_params(&cfg, Some(&eye), &mut r).map_err(|e| e.to_string())?;
            open_gate(&mut ps);
            let c = r.gen_range(3..12);
            let ex = example(&mut r, 300, c, 0);
            let cached =
                generate(&ex, &cfg, Some(&eye), &ps, 16, true).map_err(|e| e.to_string())?;
            let full =
                generate(&ex, &cfg, Some(&eye), &ps, 16, false).map_err(|e| e.to_string())?;
            mismatches += usize::from(cached != full);
            prompts += 1;
        }
    }
    check(
        worst <= 1e-6 && mismatches == 0,
        format!(
            "20 perturbations, max earlier-logit change {worst:.2e}; cached decoding matched full decoding on {}/{prompts} prompts",
            prompts - mismatches
        ),
    )
}

fn random_target(r: &mut ChaCha8Rng, len: usize) -> FixationTarget {
    let mut f: Vec<f64> = (0..len)
        .map(|_| {
            if r.gen_bool(0.4) {
                r.gen_range(0.5..4.0)
            } else {
                0.0
            }
        })
        .collect();
    f[r.gen_range(0..len)] += 1.0;
    compute_targets(&f, 1.0).unwrap()
}

fn gradcheck_align(seed: u64) -> Result<GradCheckReport, String> {
    let mut r = rng(seed);
    let cfg = AlignLossConfig {
        min_distance_frac: 0.6,
        margin: 0.5,
        ..AlignLossConfig::default()
    };
    let lens = [r.gen_range(4..12), r.gen_range(4..12)];
    let targets_owned = [
        random_target(&mut r, lens[0]),
        random_target(&mut r, lens[1]),
    ];
    let targets = [Some(&targets_owned[0]), Some(&targets_owned[1])];
    let k = 3;
    let raw_w = Array::randn(&[2, k], 1.0, &mut r);
    let mu = Array::new(
        vec![2, k],
        (0..2 * k)
            .map(|i| r.gen_range(0.3..(lens[i / k] as f64 - 1.3)))
            .collect(),
    )
    .unwrap();
    let log_sigma = Array::new(
        vec![2, k],
        (0..2 * k).map(|_| r.gen_range(0.1..1.2)).collect(),
    )
    .unwrap();
    let f = |g: &mut Graph, v: &[Var]| {
        let w = g.softmax_last(v[0]);
        let sigma = g.exp(v[2]);
        let pk = g.gaussian_modes(v[1], sigma, &lens)?;
        Ok(align_loss_graph(g, w, v[1], sigma, pk, &targets, &cfg)?.expect("targets present"))
    };
    grad_check(f, &[raw_w, mu, log_sigma], 1e-5).map_err(|e| e.to_string())
}

fn gradcheck_gen(seed: u64) -> Result<GradCheckReport, String> {
    let mut r = rng(seed);
    let arch = if seed.is_multiple_of(2) {
        Arch::DecoderOnly
    } else {
        Arch::EncoderDecoder
    };
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        ffn_mult: 2,
        vocab_size: 262,
        max_len: 24,
        arch,
        eyelayer_layer: Some(0),
    };
    let eye = EyeLayerConfig {
        rank: 2,
        clip_norm: 1e6,
        ..tiny_eye(8)
    };
    let mut ps = minilm::init_params(&cfg, Some(&eye), &mut r).map_err(|e| e.to_string())?;
    for (_, a) in ps.iter_mut() {
        for v in a.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    open_gate(&mut ps);
    let (c, n) = (r.gen_range(2..6), r.gen_range(1..4));
    let ex = example(&mut r, 262, c, n);
    let batch = Batch::new(&[ex], 24).map_err(|e| e.to_string())?;
    let names: Vec<String> = ps.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<Array> = ps.iter().map(|(_, a)| a.clone()).collect();
    let f = |g: &mut Graph, vars: &[Var]| {
        let p = Bindings::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let out = forward(g, &batch, &cfg, Some(&eye), &p, ForwardOptions::default())?;
        generation_loss(g, out.logits.expect("full forward"), &out.labels)
    };
    grad_check(f, &values, 1e-5).map_err(|e| e.to_string())
}

fn gradcheck_eyelayer(seed: u64) -> Result<GradCheckReport, String> {
    let mut r = rng(seed);
    let c = EyeLayerConfig {
        width: 5,
        rank: 3,
        dropout: 0.0,
        multimodal: !seed.is_multiple_of(3),
        clip_norm: if seed % 4 == 1 { 0.2 } else { 1e6 },
        ..EyeLayerConfig::default()
    };
    let mut ps = perturbed_eye_params(&c, &mut r, 0.5);
    ps.get_mut("eyelayer.highway.b2").unwrap().data_mut()[0] = 0.3;
    let batch = r.gen_range(1..=2);
    let len = r.gen_range(3..=9);
    let mut real = Vec::new();
    let mut starts = Vec::new();
    let mut lens = Vec::new();
    for _ in 0..batch {
        let n = r.gen_range(2..=len);
        let s = r.gen_range(0..n - 1);
        real.push(n);
        starts.push(s);
        lens.push(r.gen_range(1..=n - s));
    }
    let masks = SpanMasks::from_regions(len, &real, &starts, &lens);
    let h0 = Array::randn(&[batch, len, c.width], 1.0, &mut r);
    let proj = Array::randn(h0.shape(), 1.0, &mut r);
    let names: Vec<String> = ps.iter().map(|(n, _)| n.clone()).collect();
    let mut values: Vec<Array> = ps.iter().map(|(_, a)| a.clone()).collect();
    values.push(h0);
    let f = |g: &mut Graph, vars: &[Var]| {
        let (h, params) = vars.split_last().expect("hidden input");
        let p = Bindings::from_vars(names.iter().cloned().zip(params.iter().copied()));
        let out = eyelayer_forward(g, *h, &masks, &c, &p, None)?;
        let y = g.mul_const(out.hidden, &proj)?;
        Ok(g.sum(y))
    };
    grad_check(f, &values, 1e-5).map_err(|e| e.to_string())
}

/// Components whose gradients sit below this are compared on an absolute
/// scale: central differences at step 1e-5 resolve them only to ~1e-10.
const GRAD_FLOOR: f64 = 1e-5;

fn gradient_oracle() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    let checks: [(&str, fn(u64) -> Result<GradCheckReport, String>, u64); 3] = [
        ("align", gradcheck_align, 500),
        ("gen", gradcheck_gen, 600),
        ("eyelayer", gradcheck_eyelayer, 700),
    ];
    for (name, f, base) in checks {
        let (mut floored, mut raw) = (0.0f64, 0.0f64);
        for i in 0..20 {
            let report = f(base + i)?;
            floored = floored.max(report.max_rel_err_floored(GRAD_FLOOR));
            raw = raw.max(report.max_rel_err);
        }
        ok &= floored < 1e-4;
        parts.push(format!(
            "{name} 20 instances max rel err {floored:.2e} (unfloored {raw:.2e})"
        ));
    }
    check(ok, parts.join("; "))
}

fn pcgrad() -> Outcome {
    let mut r = rng(800);
    let examples: [(Vec<Vec<f64>>, Vec<f64>); 3] = [
        (vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.5, 0.5]),
        (vec![vec![1.0, 0.0], vec![-1.0, 1.0]], vec![0.25, 0.75]),
        (vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.0, 0.0]),
    ];
    for (grads, want) in &examples {
        let got = pcgrad_project(grads, &mut r).map_err(|e| e.to_string())?;
        if &got != want {
            return Err(format!("{grads:?} gave {got:?}, expected {want:?}"));
        }
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let project = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let d = dot(a, b);
        let nb = dot(b, b);
        if d < 0.0 && nb > 0.0 {
            a.iter().zip(b).map(|(x, y)| x - d / nb * y).collect()
        } else {
            a.to_vec()
        }
    };
    let mut min_dot = f64::INFINITY;
    let mut max_dev = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(2..10);
        let g1: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g2: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let p1 = project(&g1, &g2);
        let p2 = project(&g2, &g1);
        min_dot = min_dot.min(dot(&p1, &g2)).min(dot(&p2, &g1));
        let got = pcgrad_project(&[g1, g2], &mut r).map_err(|e| e.to_string())?;
        for i in 0..n {
            max_dev = max_dev.max((got[i] - (p1[i] + p2[i]) / 2.0).abs());
        }
    }
    let mut unchanged = true;
    for _ in 0..200 {
        let n = r.gen_range(1..8);
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| r.gen_range(0.0..1.0)).collect())
            .collect();
        let got = pcgrad_project(&grads, &mut r).map_err(|e| e.to_string())?;
        let mean: Vec<f64> = (0..n)
            .map(|i| grads.iter().map(|g| g[i]).sum::<f64>() / 3.0)
            .collect();
        unchanged &= got == mean;
    }
    check(
        min_dot >= -1e-8 && max_dev <= 1e-12 && unchanged,
        format!(
            "worked examples exact; min post-projection dot {min_dot:.2e}; oracle deviation {max_dev:.2e}; non-conflicting inputs averaged unchanged: {unchanged}"
        ),
    )
}

fn lowrank_budget() -> Outcome {
    let (d, rank) = (2048, 16);
    let count = lowrank_param_count(d, rank);
    let cfg = EyeLayerConfig {
        rank,
        ..EyeLayerConfig::with_width(d)
    };
    let ps = eyelayer::init_params(&cfg, &mut rng(900)).map_err(|e| e.to_string())?;
    let instantiated =
        ps.get("eyelayer.down").unwrap().len() + ps.get("eyelayer.up").unwrap().len();
    check(
        count == 65_536 && count == d * d / 64 && instantiated == count,
        format!(
            "2dr = {count}, d^2/64 = {}, instantiated {instantiated}",
            d * d / 64
        ),
    )
}

fn alignment_mapping() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SynthSpec {
        train: 60,
        test: 2,
        gaze: 150,
        vocab_size: 420,
        seed: 1000,
    };
    let cfg = cmd_synth(&spec, dir.path()).map_err(|e| e.to_string())?;
    let report = cmd_preprocess_gaze(
        cfg.paths.gaze_corpus.as_deref().unwrap(),
        cfg.paths.vocab.as_deref().unwrap(),
        1.0,
        &dir.path().join("pp"),
    )
    .map_err(|e| e.to_string())?;
    let acc = report.accuracy.unwrap_or(0.0);
    check(
        report.gold_nodes >= 1000 && acc >= 0.98 && report.max_mass_error <= 1e-9,
        format!(
            "{} gold nodes over {} samples, accuracy {acc:.4}, max mass error {:.2e}",
            report.gold_nodes, report.samples, report.max_mass_error
        ),
    )
}

fn alignment_convergence() -> Outcome {
    let mut r = rng(42);
    let pairs = code_pairs(8, &mut r);
    let corpus: Vec<String> = pairs
        .iter()
        .flat_map(|p| [p.code.clone(), p.summary.clone()])
        .collect();
    let vocab = train_bpe(&corpus, 420).map_err(|e| e.to_string())?;
    let gaze_pairs = code_pairs(40, &mut r);
    let samples = gaze_pairs
        .iter()
        .map(|p| gaze_sample(p, &vocab, &FixationSynthesis::default(), &mut r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let mut gaze = fit_length(
        gaze_examples(&samples, &vocab, 1.0).map_err(|e| e.to_string())?,
        128,
    );
    gaze.truncate(10);
    if gaze.len() < 10 {
        return Err(format!("only {} gaze samples fit", gaze.len()));
    }
    let gaze = batches(&gaze, 1, 128, None).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        ffn_mult: 2,
        vocab_size: vocab.len(),
        max_len: 128,
        arch: Arch::DecoderOnly,
        eyelayer_layer: Some(1),
    };
    let eye = EyeLayerConfig {
        rank: 8,
        ..EyeLayerConfig::with_width(32)
    };
    let mut state = TrainState::new(
        model,
        Some(eye),
        AlignLossConfig::default(),
        TrainConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let base: Vec<(String, Array)> = state
        .params
        .iter()
        .filter(|(n, _)| !is_eyelayer_param(n))
        .map(|(n, a)| (n.clone(), a.clone()))
        .collect();
    let before = evaluate_alignment(&mut state, &gaze).map_err(|e| e.to_string())?;
    alignment_sweeps(&mut state, &gaze, 20).map_err(|e| e.to_string())?;
    let after = evaluate_alignment(&mut state, &gaze).map_err(|e| e.to_string())?;
    let mean = |v: &[gazeprior::trainer::AlignmentEval]| {
        v.iter().map(|e| e.loss).sum::<f64>() / v.len() as f64
    };
    let (l0, l1) = (mean(&before), mean(&after));
    let near = after
        .iter()
        .filter(|e| (e.weighted_mu - e.mu_human).abs() <= 2.0)
        .count();
    let frozen = base.iter().all(|(n, a)| {
        let now = state.params.get(n).unwrap();
        now.data()
            .iter()
            .zip(a.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    check(
        l1 <= 0.5 * l0 && near * 10 >= after.len() * 8 && frozen,
        format!(
            "loss {l0:.4} -> {l1:.4} (ratio {:.3}); weighted mu within 2 tokens on {near}/{}; base frozen: {frozen}",
            l1 / l0,
            after.len()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let words = |s: &str| -> Vec<String> { s.split(' ').map(str::to_owned).collect() };
    let same = words("returns the number of elements stored in this list right now");
    let n = same.len() as f64;
    let meteor_same = meteor_lite(&same, &same);
    let rouge_worked = rouge_l(&words("a b c"), &words("a c"));
    let meteor_worked = meteor_lite(&words("a b"), &words("a c"));
    // Hand arithmetic: LCS 2, P 2/3, R 1; one match, one chunk, Fmean 1/2.
    let rouge_expected = 2.0 * (2.0 / 3.0) / (2.0 / 3.0 + 1.0);
    let meteor_expected = 0.5 * (1.0 - 0.5);
    let ok = (bleu4(&same, &same) - 1.0).abs() <= 1e-12
        && (rouge_l(&same, &same) - 1.0).abs() <= 1e-12
        && meteor_same >= 0.99
        && (meteor_same - (1.0 - 0.5 / n.powi(3))).abs() <= 1e-12
        && (rouge_worked - rouge_expected).abs() <= 1e-12
        && (meteor_worked - meteor_expected).abs() <= 1e-12;
    check(
        ok,
        format!(
            "identical: BLEU {:.4}, ROUGE-L {:.4}, METEOR {meteor_same:.6}; worked: ROUGE-L {rouge_worked:.4}, METEOR {meteor_worked:.4}",
            bleu4(&same, &same),
            rouge_l(&same, &same)
        ),
    )
}

fn desk_config(cfg: &mut RunConfig) {
    cfg.model.n_layers = 2;
    cfg.model.d_model = 64;
    cfg.model.n_heads = 4;
    cfg.model.ffn_mult = 2;
    cfg.model.max_len = 128;
    cfg.eyelayer.rank = 16;
    cfg.train.lr = 3e-3;
    cfg.train.batch_gen = 8;
    cfg.train.interleave_k = 10;
    cfg.train.epochs = 1;
    cfg.max_new_tokens = 24;
    cfg.threads = 1;
}

fn smoke_experiment() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SynthSpec {
        train: 500,
        test: 50,
        gaze: 100,
        vocab_size: 512,
        seed: 1100,
    };
    let mut cfg = cmd_synth(&spec, dir.path()).map_err(|e| e.to_string())?;
    desk_config(&mut cfg);
    let mut lines = Vec::new();
    let mut ok = true;
    for (label, experiment) in [
        ("eyelayer", Experiment::Train),
        ("sft", Experiment::SftBaseline),
    ] {
        let run = RunConfig {
            experiment,
            paths: gazeprior_cli::Paths {
                out_dir: dir.path().join(label),
                ..cfg.paths.clone()
            },
            ..cfg.clone()
        };
        let s = cmd_train(&run).map_err(|e| e.to_string())?;
        let halved = s.final_gen_loss <= 0.5 * s.initial_gen_loss;
        ok &= halved;
        let bleu = s.metrics.as_ref().map_or(f64::NAN, |m| m.bleu4);
        lines.push(format!(
            "{label} loss {:.3} -> {:.3} BLEU {bleu:.4}",
            s.initial_gen_loss, s.final_gen_loss
        ));
    }
    for experiment in [Experiment::LayerSweep, Experiment::ModeAblation] {
        let out = dir.path().join(format!("{experiment:?}"));
        let run = RunConfig {
            experiment,
            paths: gazeprior_cli::Paths {
                out_dir: out.clone(),
                ..cfg.paths.clone()
            },
            ..cfg.clone()
        };
        let rows = cmd_sweep(&run).map_err(|e| e.to_string())?;
        let expected = match experiment {
            Experiment::LayerSweep => cfg.model.n_layers,
            _ => 2,
        };
        let complete = rows.len() == expected
            && rows.iter().all(|r| {
                r.final_gen_loss.is_finite()
                    && [r.bleu4, r.rouge_l, r.meteor_lite]
                        .iter()
                        .all(|m| m.is_some_and(f64::is_finite))
            })
            && out.join("table.json").exists()
            && out.join("table.csv").exists();
        ok &= complete;
        lines.push(format!(
            "{experiment:?} {}/{expected} rows complete: {complete}",
            rows.len()
        ));
    }
    check(ok, lines.join("; "))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("mixture normalization", mixture_normalization),
        ("range enforcement", range_enforcement),
        ("identity degeneration", identity_degeneration),
        ("causality", causality),
        ("gradient oracle", gradient_oracle),
        ("pcgrad", pcgrad),
        ("low-rank budget", lowrank_budget),
        ("alignment mapping", alignment_mapping),
        ("alignment convergence", alignment_convergence),
        ("metric oracles", metric_oracles),
        ("end-to-end smoke", smoke_experiment),
    ];
    println!();
    let start = Instant::now();
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                println!("criterion {}: FAIL {name} ({secs:.1}s): {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    println!(
        "acceptance finished in {:.1}s",
        start.elapsed().as_secs_f64()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
