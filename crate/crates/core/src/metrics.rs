//! Summary metrics: BLEU-4, ROUGE-L and METEOR-lite (exact and stem
//! matches, no synonym stage).
//!
//! Scores live in `[0, 1]`. Corpus BLEU pools n-gram counts over all pairs;
//! ROUGE-L and METEOR-lite are averaged per pair.

use std::collections::HashMap;
use std::path::Path;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngrams<T: AsRef<str>>(toks: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram totals for n = 1..=4.
fn ngram_stats<T: AsRef<str>>(cand: &[T], reference: &[T]) -> [(usize, usize); 4] {
    let mut out = [(0, 0); 4];
    for (i, slot) in out.iter_mut().enumerate() {
        let c = ngrams(cand, i + 1);
        let r = ngrams(reference, i + 1);
        let matched = c
            .iter()
            .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        *slot = (matched, c.values().sum());
    }
    out
}

fn bleu_from_stats(stats: &[(usize, usize); 4], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 || stats[0].0 == 0 {
        return 0.0;
    }
    let log_p: f64 = stats
        .iter()
        .enumerate()
        .map(|(n, &(m, total))| {
            if n > 0 && m == 0 {
                (1.0 / (total as f64 + 1.0)).ln()
            } else {
                (m as f64 / total as f64).ln()
            }
        })
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

/// Sentence BLEU-4 with add-one smoothing on higher-order precisions that
/// have no matches.
pub fn bleu4<T: AsRef<str>>(cand: &[T], reference: &[T]) -> f64 {
    bleu_from_stats(&ngram_stats(cand, reference), cand.len(), reference.len())
}

/// Corpus BLEU-4 from pooled counts and lengths.
pub fn corpus_bleu4<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let mut stats = [(0, 0); 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in pairs {
        for (acc, s) in stats.iter_mut().zip(ngram_stats(c, r)) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        c_len += c.len();
        r_len += r.len();
    }
    bleu_from_stats(&stats, c_len, r_len)
}

fn lcs<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// F1 of LCS precision and recall.
pub fn rouge_l<T: AsRef<str>>(cand: &[T], reference: &[T]) -> f64 {
    let l = lcs(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Greedy one-to-one alignment, exact matches first, then stems. Returns
/// `(candidate index, reference index)` pairs sorted by candidate index.
fn align<T: AsRef<str>>(cand: &[T], reference: &[T], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let exact = |t: &[T]| -> Vec<String> { t.iter().map(|w| w.as_ref().to_owned()).collect() };
    let stem = |t: &[T]| -> Vec<String> {
        t.iter()
            .map(|w| stemmer.stem(w.as_ref()).into_owned())
            .collect()
    };
    let stages = [
        (exact(cand), exact(reference)),
        (stem(cand), stem(reference)),
    ];
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (ck, rk) in &stages {
        for i in 0..cand.len() {
            if used_c[i] {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !used_r[j] && rk[j] == ck[i]) {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// METEOR without synonyms: `Fmean · (1 − 0.5 (chunks / m)³)` with
/// `Fmean = PR / (0.9P + 0.1R)`.
pub fn meteor_lite<T: AsRef<str>>(cand: &[T], reference: &[T]) -> f64 {
    let stemmer = Stemmer::create(Algorithm::English);
    let pairs = align(cand, reference, &stemmer);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (0.9 * p + 0.1 * r);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub candidate: String,
    pub reference: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub n_pairs: usize,
}

/// Scores `candidates` against `references` pairwise and aggregates.
pub fn evaluate(
    candidates: &[String],
    references: &[String],
) -> Result<(EvalReport, Vec<ScoredPair>)> {
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Data("no pairs to score".into()));
    }
    let toks: Vec<(Vec<String>, Vec<String>)> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| (tokenize(c), tokenize(r)))
        .collect();
    let scored: Vec<ScoredPair> = toks
        .iter()
        .zip(candidates.iter().zip(references))
        .map(|((c, r), (cs, rs))| ScoredPair {
            candidate: cs.clone(),
            reference: rs.clone(),
            bleu4: bleu4(c, r),
            rouge_l: rouge_l(c, r),
            meteor_lite: meteor_lite(c, r),
        })
        .collect();
    let n = scored.len() as f64;
    let report = EvalReport {
        bleu4: corpus_bleu4(&toks),
        rouge_l: scored.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        meteor_lite: scored.iter().map(|s| s.meteor_lite).sum::<f64>() / n,
        n_pairs: scored.len(),
    };
    Ok((report, scored))
}

pub fn write_pairs_csv(path: &Path, pairs: &[ScoredPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for p in pairs {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_owned).collect()
    }

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("Returns the MAX-value, fast."),
            t("returns the max value fast")
        );
    }

    #[test]
    fn identical_pairs_score_one() {
        let s = t("returns the largest value in the array of scores today");
        assert!((bleu4(&s, &s) - 1.0).abs() < 1e-12);
        assert!((rouge_l(&s, &s) - 1.0).abs() < 1e-12);
        assert!(meteor_lite(&s, &s) >= 0.99);
    }

    #[test]
    fn worked_examples() {
        assert!((rouge_l(&t("a b c"), &t("a c")) - 0.8).abs() < 1e-12);
        assert!((meteor_lite(&t("a b"), &t("a c")) - 0.25).abs() < 1e-12);
        assert_eq!(meteor_lite(&t("a b"), &t("c d")), 0.0);
        assert_eq!(rouge_l(&t("a b"), &t("c d")), 0.0);
        let empty: Vec<String> = Vec::new();
        assert_eq!(bleu4(&empty, &t("a b")), 0.0);
    }

    #[test]
    fn stems_match_after_exact() {
        // "counts" and "count" share a stem; exact "the" is aligned first.
        let s = meteor_lite(&t("the counts"), &t("the count"));
        assert!((s - (1.0 - 0.5 / 8.0)).abs() < 1e-12, "{s}");
    }

    #[test]
    fn appending_a_match_keeps_rouge_recall() {
        let r = t("sum of the values");
        let mut c = t("sum values");
        let before = lcs(&c, &r);
        c.push("values".into());
        assert!(lcs(&c, &r) >= before);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(matches!(evaluate(&["a".into()], &[]), Err(Error::Data(_))));
    }
}
