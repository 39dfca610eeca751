use std::path::Path;
use std::process::Command;

use gazeprior::data::write_jsonl;
use gazeprior::synth::CodePair;
use gazeprior_cli::{
    cmd_eval, cmd_preprocess_gaze, cmd_synth, cmd_train, Experiment, RunConfig, SynthSpec,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gazeprior"))
}

fn tiny(cfg: &mut RunConfig) {
    cfg.model.n_layers = 2;
    cfg.model.d_model = 32;
    cfg.model.ffn_mult = 2;
    cfg.model.max_len = 128;
    cfg.eyelayer.rank = 8;
    cfg.train.lr = 3e-3;
    cfg.train.batch_gen = 4;
    cfg.train.interleave_k = 4;
    cfg.max_new_tokens = 16;
}

fn synth(dir: &Path, train: usize, seed: u64) -> RunConfig {
    let spec = SynthSpec {
        train,
        test: 6,
        gaze: 12,
        vocab_size: 400,
        seed,
    };
    let mut cfg = cmd_synth(&spec, dir).unwrap();
    tiny(&mut cfg);
    cfg.train.epochs = 1;
    cfg
}

#[test]
fn synthetic_gaze_preprocesses_accurately() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 10, 1);
    let report = cmd_preprocess_gaze(
        cfg.paths.gaze_corpus.as_deref().unwrap(),
        cfg.paths.vocab.as_deref().unwrap(),
        1.0,
        &dir.path().join("pp"),
    )
    .unwrap();
    assert_eq!(report.samples, 12);
    assert!(report.accuracy.unwrap() >= 0.98, "{report:?}");
    assert!(report.max_mass_error < 1e-9);
    assert!(dir.path().join("pp/targets.json").exists());
}

#[test]
fn overfit_checkpoint_reproduces_its_pair() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth(dir.path(), 4, 2);
    let pair = CodePair {
        code: "public int getMaxCount() { return maxCount; }".into(),
        summary: "returns the max count".into(),
    };
    let one = dir.path().join("one.jsonl");
    write_jsonl(&one, &[pair]).unwrap();
    cfg.paths.gen_corpus = Some(one.clone());
    cfg.paths.test_corpus = None;
    cfg.paths.gaze_corpus = None;
    cfg.paths.out_dir = dir.path().join("overfit");
    cfg.experiment = Experiment::SftBaseline;
    cfg.train.epochs = 150;
    let summary = cmd_train(&cfg).unwrap();
    assert!(summary.final_gen_loss < 0.05, "{summary:?}");
    let report = cmd_eval(
        &cfg.paths.out_dir.join("checkpoint.bin"),
        &one,
        cfg.paths.vocab.as_deref().unwrap(),
        16,
        1,
        &dir.path().join("eval"),
    )
    .unwrap();
    assert_eq!(report.bleu4, 1.0, "{report:?}");
    assert!(dir.path().join("eval/pairs.csv").exists());
}

#[test]
fn training_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth(dir.path(), 16, 3);
    cfg.paths.out_dir = dir.path().join("a");
    let a = cmd_train(&cfg).unwrap();
    cfg.paths.out_dir = dir.path().join("b");
    let b = cmd_train(&cfg).unwrap();
    assert_eq!(a, b);
    let ca = std::fs::read(dir.path().join("a/checkpoint.bin")).unwrap();
    assert_eq!(
        ca,
        std::fs::read(dir.path().join("b/checkpoint.bin")).unwrap()
    );
    assert!(a.metrics.is_some() && a.eyelayer_layer == Some(1));
}

#[test]
fn configs_load_from_toml_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 4, 4);
    let toml_path = dir.path().join("c.toml");
    std::fs::write(&toml_path, cfg.to_toml().unwrap()).unwrap();
    assert_eq!(RunConfig::load(&toml_path).unwrap(), cfg);
    let json_path = dir.path().join("c.json");
    std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(RunConfig::load(&json_path).unwrap(), cfg);

    let partial = dir.path().join("p.toml");
    std::fs::write(
        &partial,
        "experiment = \"mode_ablation\"\n[model]\nn_layers = 3\n",
    )
    .unwrap();
    let p = RunConfig::load(&partial).unwrap();
    assert_eq!(
        (p.experiment, p.model.n_layers, p.model.d_model),
        (Experiment::ModeAblation, 3, 128)
    );
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"code\": \"a\", \"summary\": \"b\"}\n{oops\n").unwrap();
    let out = bin()
        .args(["tokenizer-train", "--corpus"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("v.json"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: data: line 2"), "{err}");

    let missing = dir.path().join("missing.jsonl");
    std::fs::write(&missing, "{\"code\": \"a\"}\n").unwrap();
    let out = bin()
        .args(["tokenizer-train", "--corpus"])
        .arg(&missing)
        .output()
        .unwrap();
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        !out.status.success() && err.starts_with("error: schema:"),
        "{err}"
    );

    let out = bin().arg("train").output().unwrap();
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        !out.status.success() && err.starts_with("error: config:"),
        "{err}"
    );
}

#[test]
fn binary_runs_synth_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = bin()
        .args([
            "synth",
            "--train",
            "8",
            "--test",
            "2",
            "--gaze",
            "4",
            "--vocab-size",
            "380",
            "--seed",
            "5",
            "--out",
        ])
        .arg(d)
        .output()
        .unwrap();
    assert!(ok.status.success());
    let mut cfg = RunConfig::load(&d.join("run.toml")).unwrap();
    tiny(&mut cfg);
    cfg.train.epochs = 1;
    cfg.paths.out_dir = d.join("run");
    std::fs::write(d.join("tiny.toml"), cfg.to_toml().unwrap()).unwrap();
    let ok = bin()
        .arg("train")
        .arg("--config")
        .arg(d.join("tiny.toml"))
        .output()
        .unwrap();
    assert!(ok.status.success());

    std::fs::write(
        d.join("code.txt"),
        "public int getMaxCount() { return maxCount; }\n",
    )
    .unwrap();
    let ok = bin()
        .arg("inspect-attention")
        .arg("--checkpoint")
        .arg(d.join("run/checkpoint.bin"))
        .arg("--vocab")
        .arg(d.join("vocab.json"))
        .arg("--code")
        .arg(d.join("code.txt"))
        .arg("--out")
        .arg(d.join("att.json"))
        .output()
        .unwrap();
    assert!(ok.status.success());
    let dump: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("att.json")).unwrap()).unwrap();
    let p: Vec<f64> = serde_json::from_value(dump["P"].clone()).unwrap();
    assert_eq!(p.len(), dump["tokens"].as_array().unwrap().len());
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    for key in ["w", "mu", "sigma", "g"] {
        assert!(dump.get(key).is_some(), "{key}");
    }
}
