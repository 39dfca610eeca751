//! Commands behind the `gazeprior` binary. Each command reads its inputs,
//! writes JSON/CSV artifacts under an output directory, and returns a
//! serializable summary.

use std::fs;
use std::path::{Path, PathBuf};

use gazeprior::alignloss::AlignLossConfig;
use gazeprior::astalign::preprocess_sample;
use gazeprior::data::{self, batches, fit_length, gaze_examples, gen_examples};
use gazeprior::eyelayer::{AttentionDump, EyeLayerConfig};
use gazeprior::metrics::{self, EvalReport};
use gazeprior::minilm::{decode_summary, generate, Arch, Example, ModelConfig};
use gazeprior::synth::{code_pairs, gaze_sample, CodePair, FixationSynthesis};
use gazeprior::tokenizer::{train_bpe, Vocab};
use gazeprior::trainer::{
    evaluate_gen_loss, inspect_attention, interleaved_epoch, load_checkpoint, save_checkpoint,
    LogRecord, TrainConfig, TrainState,
};
use gazeprior::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    #[default]
    Train,
    SftBaseline,
    LayerSweep,
    ModeAblation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub gen_corpus: Option<PathBuf>,
    pub gaze_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub eyelayer: EyeLayerConfig,
    pub train: TrainConfig,
    pub align: AlignLossConfig,
    pub experiment: Experiment,
    /// Generation budget per test pair.
    pub max_new_tokens: usize,
    /// Worker threads for evaluation.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            paths: Paths {
                out_dir: PathBuf::from("out"),
                ..Paths::default()
            },
            eyelayer: EyeLayerConfig::with_width(model.d_model),
            model,
            train: TrainConfig::default(),
            align: AlignLossConfig::default(),
            experiment: Experiment::Train,
            max_new_tokens: 32,
            threads: 1,
        }
    }
}

impl RunConfig {
    /// Reads TOML or JSON, chosen by extension (`.json` is JSON, anything
    /// else TOML).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::Schema(format!("{}: {}", path.display(), e.message())))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn require<'a>(&self, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        let p = p
            .as_deref()
            .ok_or_else(|| Error::Config(format!("paths.{what} is not set")))?;
        if !p.exists() {
            return Err(Error::Config(format!(
                "paths.{what} does not exist: {}",
                p.display()
            )));
        }
        Ok(p)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn cmd_tokenizer_train(corpus: &Path, vocab_size: usize, out: &Path) -> Result<Vocab> {
    let pairs = data::read_jsonl(corpus)?;
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.code.as_str(), p.summary.as_str()])
        .collect();
    let vocab = train_bpe(&texts, vocab_size)?;
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    vocab.save(out)?;
    log::info!(
        "vocabulary of {} entries written to {}",
        vocab.len(),
        out.display()
    );
    Ok(vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub train: usize,
    pub test: usize,
    pub gaze: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

/// Writes `train.jsonl`, `test.jsonl`, `gaze.json`, `vocab.json` and a
/// ready-to-run `run.toml` under `out`.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<RunConfig> {
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = code_pairs(spec.train, &mut rng);
    let test = code_pairs(spec.test, &mut rng);
    let texts: Vec<&str> = train
        .iter()
        .flat_map(|p| [p.code.as_str(), p.summary.as_str()])
        .collect();
    let vocab = train_bpe(&texts, spec.vocab_size)?;
    let gaze_pairs = code_pairs(spec.gaze, &mut rng);
    let gaze = gaze_pairs
        .iter()
        .map(|p| gaze_sample(p, &vocab, &FixationSynthesis::default(), &mut rng))
        .collect::<Result<Vec<_>>>()?;

    data::write_jsonl(&out.join("train.jsonl"), &train)?;
    data::write_jsonl(&out.join("test.jsonl"), &test)?;
    write_json(&out.join("gaze.json"), &gaze)?;
    vocab.save(&out.join("vocab.json"))?;

    let mut cfg = RunConfig::default();
    cfg.paths = Paths {
        gen_corpus: Some(out.join("train.jsonl")),
        gaze_corpus: Some(out.join("gaze.json")),
        test_corpus: Some(out.join("test.jsonl")),
        vocab: Some(out.join("vocab.json")),
        out_dir: out.join("run"),
    };
    cfg.model.vocab_size = vocab.len();
    cfg.train.seed = spec.seed;
    fs::write(out.join("run.toml"), cfg.to_toml()?)?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeReport {
    pub samples: usize,
    pub rejected: usize,
    /// Node-weighted mapping accuracy over samples that carry gold sets.
    pub accuracy: Option<f64>,
    pub gold_nodes: usize,
    /// Largest |Σ F − Σ mapped counts| over samples.
    pub max_mass_error: f64,
}

/// Runs AST-to-subtoken alignment and fixation projection for every sample.
/// Writes `targets.json` (one entry per sample, `null` for rejected ones)
/// and `report.json`.
pub fn cmd_preprocess_gaze(
    gaze: &Path,
    vocab: &Path,
    sigma_min: f64,
    out: &Path,
) -> Result<GazeReport> {
    let samples = data::read_gaze(gaze)?;
    let vocab = Vocab::load(vocab)?;
    let mut processed = Vec::new();
    let (mut rejected, mut hits, mut gold_nodes, mut max_err) = (0, 0.0, 0, 0.0f64);
    for (i, s) in samples.iter().enumerate() {
        match preprocess_sample(s, &vocab, sigma_min) {
            Ok(p) => {
                if let (Some(acc), Some(gold)) = (p.accuracy, &s.gold) {
                    hits += acc * gold.len() as f64;
                    gold_nodes += gold.len();
                }
                let mapped: f64 = s
                    .fixations
                    .iter()
                    .filter(|f| !p.unmapped_node_ids.contains(&f.node_id))
                    .map(|f| f.count)
                    .sum();
                max_err = max_err.max((p.f.iter().sum::<f64>() - mapped).abs());
                processed.push(Some(p));
            }
            Err(Error::Rejected(msg)) => {
                log::warn!("gaze sample {i} rejected: {msg}");
                rejected += 1;
                processed.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let report = GazeReport {
        samples: samples.len(),
        rejected,
        accuracy: (gold_nodes > 0).then(|| hits / gold_nodes as f64),
        gold_nodes,
        max_mass_error: max_err,
    };
    write_json(&out.join("targets.json"), &processed)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub experiment: Experiment,
    pub eyelayer_layer: Option<usize>,
    pub multimodal: Option<bool>,
    pub initial_gen_loss: f64,
    pub final_gen_loss: f64,
    /// Generation loss after each epoch.
    pub epoch_gen_loss: Vec<f64>,
    pub steps: u64,
    pub metrics: Option<EvalReport>,
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    Vocab::load(cfg.require(&cfg.paths.vocab, "vocab")?)
}

/// The model config with its vocabulary size taken from `vocab`.
fn model_for(cfg: &RunConfig, vocab: &Vocab) -> ModelConfig {
    if cfg.model.vocab_size != vocab.len() {
        log::info!(
            "model.vocab_size {} replaced by vocabulary size {}",
            cfg.model.vocab_size,
            vocab.len()
        );
    }
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

/// Trains one model. `eye = None` gives the plain fine-tuning baseline.
/// Writes `checkpoint.bin`, `train_log.jsonl`, `summary.json` and, with a
/// test corpus, `eval.json` and `pairs.csv` under `out`.
pub fn run_training(
    cfg: &RunConfig,
    eye: Option<EyeLayerConfig>,
    out: &Path,
) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let vocab = load_vocab(cfg)?;
    let model = model_for(cfg, &vocab);
    let max_len = model.max_len;
    let pairs = data::read_jsonl(cfg.require(&cfg.paths.gen_corpus, "gen_corpus")?)?;
    let gen = fit_length(gen_examples(&pairs, &vocab), max_len);
    if gen.is_empty() {
        return Err(Error::Data("no generation examples fit max_len".into()));
    }
    let gaze = match (&eye, &cfg.paths.gaze_corpus) {
        (Some(e), Some(_)) => {
            let samples = data::read_gaze(cfg.require(&cfg.paths.gaze_corpus, "gaze_corpus")?)?;
            fit_length(gaze_examples(&samples, &vocab, e.sigma_min)?, max_len)
        }
        _ => Vec::new(),
    };

    let mut state = TrainState::new(model, eye.clone(), cfg.align.clone(), cfg.train.clone())?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let eval_batches = batches(&gen, cfg.train.batch_gen, max_len, None)?;
    let initial = evaluate_gen_loss(&state, &eval_batches)?;
    log::info!("initial generation loss {initial:.4}");

    let mut log_lines = String::new();
    let mut epoch_loss = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let gen_b = batches(&gen, cfg.train.batch_gen, max_len, Some(&mut shuffle))?;
        let gaze_b = batches(&gaze, cfg.train.batch_gaze, max_len, Some(&mut shuffle))?;
        let records: Vec<LogRecord> = interleaved_epoch(&mut state, &gen_b, &gaze_b)?;
        for r in &records {
            log_lines.push_str(&serde_json::to_string(r)?);
            log_lines.push('\n');
        }
        let loss = evaluate_gen_loss(&state, &eval_batches)?;
        log::info!("epoch {epoch}: generation loss {loss:.4}");
        state.best_val = Some(state.best_val.map_or(loss, |b: f64| b.min(loss)));
        epoch_loss.push(loss);
    }
    fs::write(out.join("train_log.jsonl"), log_lines)?;
    save_checkpoint(&state, &out.join("checkpoint.bin"))?;

    let metrics = match &cfg.paths.test_corpus {
        Some(_) => {
            let test = data::read_jsonl(cfg.require(&cfg.paths.test_corpus, "test_corpus")?)?;
            Some(evaluate_pairs(
                &state,
                &vocab,
                &test,
                cfg.max_new_tokens,
                cfg.threads,
                out,
            )?)
        }
        None => None,
    };
    let summary = TrainSummary {
        experiment: if eye.is_some() {
            Experiment::Train
        } else {
            Experiment::SftBaseline
        },
        eyelayer_layer: eye.as_ref().and(state.model.eyelayer_layer),
        multimodal: eye.as_ref().map(|e| e.multimodal),
        initial_gen_loss: initial,
        final_gen_loss: *epoch_loss.last().unwrap_or(&initial),
        epoch_gen_loss: epoch_loss,
        steps: state.step,
        metrics,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn eye_config(cfg: &RunConfig) -> EyeLayerConfig {
    EyeLayerConfig {
        width: cfg.model.d_model,
        ..cfg.eyelayer.clone()
    }
}

/// `train` or `sft_baseline`, per `cfg.experiment`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    match cfg.experiment {
        Experiment::Train => run_training(cfg, Some(eye_config(cfg)), &cfg.paths.out_dir),
        Experiment::SftBaseline => {
            let model = ModelConfig {
                eyelayer_layer: None,
                ..cfg.model.clone()
            };
            let cfg = RunConfig {
                model,
                ..cfg.clone()
            };
            run_training(&cfg, None, &cfg.paths.out_dir)
        }
        other => Err(Error::Config(format!(
            "{other:?} is run by the sweep command"
        ))),
    }
}

/// Greedy summaries for `codes`, split across `threads` workers.
pub fn summarize(
    state: &TrainState,
    vocab: &Vocab,
    codes: &[&str],
    max_new: usize,
    threads: usize,
) -> Result<Vec<String>> {
    let run = |code: &&str| -> Result<String> {
        let ex = Example::from_code(code, None, vocab);
        let ids = generate(
            &ex,
            &state.model,
            state.eye.as_ref(),
            &state.params,
            max_new,
            true,
        )?;
        decode_summary(&ids, vocab)
    };
    let threads = threads.max(1);
    if threads == 1 || codes.len() < 2 {
        return codes.iter().map(run).collect();
    }
    let chunk = codes.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = codes
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(codes.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn evaluate_pairs(
    state: &TrainState,
    vocab: &Vocab,
    test: &[CodePair],
    max_new: usize,
    threads: usize,
    out: &Path,
) -> Result<EvalReport> {
    let codes: Vec<&str> = test.iter().map(|p| p.code.as_str()).collect();
    let cands = summarize(state, vocab, &codes, max_new, threads)?;
    let refs: Vec<String> = test.iter().map(|p| p.summary.clone()).collect();
    let (report, scored) = metrics::evaluate(&cands, &refs)?;
    write_json(&out.join("eval.json"), &report)?;
    metrics::write_pairs_csv(&out.join("pairs.csv"), &scored)?;
    Ok(report)
}

pub fn cmd_eval(
    checkpoint: &Path,
    test: &Path,
    vocab: &Path,
    max_new: usize,
    threads: usize,
    out: &Path,
) -> Result<EvalReport> {
    fs::create_dir_all(out)?;
    let state = load_checkpoint(checkpoint)?;
    let vocab = Vocab::load(vocab)?;
    let pairs = data::read_jsonl(test)?;
    evaluate_pairs(&state, &vocab, &pairs, max_new, threads, out)
}

pub fn cmd_inspect_attention(
    checkpoint: &Path,
    vocab: &Path,
    code: &str,
    out: &Path,
) -> Result<AttentionDump> {
    let state = load_checkpoint(checkpoint)?;
    let vocab = Vocab::load(vocab)?;
    let ex = Example::from_code(code, None, &vocab);
    let dump = inspect_attention(&state, &ex, &vocab)?;
    write_json(out, &dump)?;
    Ok(dump)
}

/// One row of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub eyelayer_layer: Option<usize>,
    pub multimodal: Option<bool>,
    pub initial_gen_loss: f64,
    pub final_gen_loss: f64,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub meteor_lite: Option<f64>,
}

impl SweepRow {
    fn new(label: String, s: &TrainSummary) -> Self {
        Self {
            label,
            eyelayer_layer: s.eyelayer_layer,
            multimodal: s.multimodal,
            initial_gen_loss: s.initial_gen_loss,
            final_gen_loss: s.final_gen_loss,
            bleu4: s.metrics.as_ref().map(|m| m.bleu4),
            rouge_l: s.metrics.as_ref().map(|m| m.rouge_l),
            meteor_lite: s.metrics.as_ref().map(|m| m.meteor_lite),
        }
    }
}

/// `layer_sweep`: one EyeLayer run per insertion layer. `mode_ablation`:
/// multimodal and single-mode runs. Writes `table.json` and `table.csv`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let out = &cfg.paths.out_dir;
    let mut rows = Vec::new();
    match cfg.experiment {
        Experiment::LayerSweep => {
            if cfg.model.arch == Arch::EncoderDecoder {
                return Err(Error::Config(
                    "layer_sweep needs the decoder-only arch; the encoder-decoder hook sits after the encoder".into(),
                ));
            }
            for layer in 0..cfg.model.n_layers {
                let run = RunConfig {
                    model: ModelConfig {
                        eyelayer_layer: Some(layer),
                        ..cfg.model.clone()
                    },
                    ..cfg.clone()
                };
                let s = run_training(
                    &run,
                    Some(eye_config(&run)),
                    &out.join(format!("layer_{layer}")),
                )?;
                rows.push(SweepRow::new(format!("layer_{layer}"), &s));
            }
        }
        Experiment::ModeAblation => {
            for (label, multimodal) in [("multimodal", true), ("single_mode", false)] {
                let eye = EyeLayerConfig {
                    multimodal,
                    ..eye_config(cfg)
                };
                let s = run_training(cfg, Some(eye), &out.join(label))?;
                rows.push(SweepRow::new(label.into(), &s));
            }
        }
        other => {
            return Err(Error::Config(format!(
                "{other:?} is not a sweep experiment"
            )))
        }
    }
    write_json(&out.join("table.json"), &rows)?;
    let mut w =
        csv::Writer::from_path(out.join("table.csv")).map_err(|e| Error::Data(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(rows)
}
