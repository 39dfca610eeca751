//! Corpus IO and conversion of corpora into model batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::astalign::{preprocess_sample, GazeSample};
use crate::error::{Error, Result};
use crate::minilm::{Batch, Example};
use crate::synth::CodePair;
use crate::tokenizer::Vocab;

/// Parses a `{code, summary}` JSONL stream. Blank lines are skipped;
/// errors name the 1-based line.
pub fn parse_jsonl(text: &str) -> Result<Vec<CodePair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("line {}: malformed JSON: {e}", i + 1)))?;
        let field = |k: &str| -> Result<String> {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(str::to_owned)
                .ok_or_else(|| {
                    Error::Schema(format!("line {}: missing string field \"{k}\"", i + 1))
                })
        };
        out.push(CodePair {
            code: field("code")?,
            summary: field("summary")?,
        });
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CodePair>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

pub fn write_jsonl(path: &Path, pairs: &[CodePair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_gaze(path: &Path) -> Result<Vec<GazeSample>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("gaze corpus: {e}")))
}

pub fn gen_examples(pairs: &[CodePair], vocab: &Vocab) -> Vec<Example> {
    pairs
        .iter()
        .map(|p| Example::from_code(&p.code, Some(&p.summary), vocab))
        .collect()
}

/// Gaze samples with their fixation targets. Samples whose fixations all
/// fall outside the code are dropped with a warning.
pub fn gaze_examples(
    samples: &[GazeSample],
    vocab: &Vocab,
    sigma_min: f64,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let processed = match preprocess_sample(s, vocab, sigma_min) {
            Ok(p) => p,
            Err(Error::Rejected(msg)) => {
                log::warn!("gaze sample {i} skipped: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut ex = Example::from_code(&s.code, s.summary.as_deref(), vocab);
        ex.target = Some(processed.target());
        out.push(ex);
    }
    Ok(out)
}

/// Drops examples longer than `max_len`, logging how many were removed.
pub fn fit_length(examples: Vec<Example>, max_len: usize) -> Vec<Example> {
    let before = examples.len();
    let kept: Vec<Example> = examples
        .into_iter()
        .filter(|e| e.ids.len() <= max_len)
        .collect();
    if kept.len() < before {
        log::warn!(
            "dropped {} examples longer than {max_len} tokens",
            before - kept.len()
        );
    }
    kept
}

/// Consecutive batches of `size` (the last may be smaller), optionally
/// shuffled first.
pub fn batches(
    examples: &[Example],
    size: usize,
    max_len: usize,
    shuffle: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(size.max(1))
        .map(|c| {
            let ex: Vec<Example> = c.iter().map(|&i| examples[i].clone()).collect();
            Batch::new(&ex, max_len)
        })
        .collect()
}
