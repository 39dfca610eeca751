//! Template-generated code/summary pairs and synthetic fixation data.
//!
//! Everything here is deterministic given the RNG, so corpora can be
//! regenerated from a seed instead of being checked in.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::astalign::{build_leaf_ast, gold_by_ownership, AstNode, FixationRecord, GazeSample};
use crate::error::Result;
use crate::tokenizer::{encode_prompt, Vocab};

/// One line of a generation corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodePair {
    pub code: String,
    pub summary: String,
}

const NOUNS: &[&str] = &[
    "count", "name", "value", "size", "total", "index", "buffer", "cache", "queue", "price",
    "weight", "score", "user", "order", "node", "edge", "item", "record", "token", "limit",
    "offset", "height", "width", "length", "balance", "amount", "level", "rank", "label", "path",
];

const ADJECTIVES: &[&str] = &[
    "max", "min", "total", "current", "default", "next", "last", "first", "active", "pending",
];

const TYPES: &[&str] = &["int", "long", "double", "float"];

fn camel(words: &[&str]) -> String {
    let mut out = String::new();
    for (i, w) in words.iter().enumerate() {
        if i == 0 {
            out.push_str(w);
        } else {
            let mut c = w.chars();
            if let Some(f) = c.next() {
                out.extend(f.to_uppercase());
                out.push_str(c.as_str());
            }
        }
    }
    out
}

fn upper_first(w: &str) -> String {
    camel(&["", w])
}

/// Draws one template-generated pair.
pub fn code_pair<R: Rng + ?Sized>(rng: &mut R) -> CodePair {
    let noun = *NOUNS.choose(rng).unwrap();
    let adj = *ADJECTIVES.choose(rng).unwrap();
    let ty = *TYPES.choose(rng).unwrap();
    let field = camel(&[adj, noun]);
    let phrase = format!("{adj} {noun}");
    let plural = format!("{noun}s");
    let (code, summary) = match rng.gen_range(0..8) {
        0 => (
            format!("public {ty} get{}() {{ return {field}; }}", upper_first(&field)),
            format!("returns the {phrase}"),
        ),
        1 => (
            format!(
                "public void set{}({ty} {field}) {{ this.{field} = {field}; }}",
                upper_first(&field)
            ),
            format!("sets the {phrase}"),
        ),
        2 => (
            format!(
                "public {ty} sum{}({ty}[] {plural}) {{ {ty} total = 0; for (int i = 0; i < {plural}.length; i++) {{ total += {plural}[i]; }} return total; }}",
                upper_first(&plural)
            ),
            format!("computes the sum of the {plural}"),
        ),
        3 => (
            format!(
                "public {ty} max{}({ty}[] {plural}) {{ {ty} best = {plural}[0]; for ({ty} v : {plural}) {{ if (v > best) {{ best = v; }} }} return best; }}",
                upper_first(noun)
            ),
            format!("returns the largest {noun}"),
        ),
        4 => (
            format!(
                "public boolean has{}(List<String> {plural}, String key) {{ return {plural}.contains(key); }}",
                upper_first(noun)
            ),
            format!("checks whether the {plural} contain the key"),
        ),
        5 => (
            format!(
                "public boolean is{}Empty() {{ return {field}.isEmpty(); }}",
                upper_first(&field)
            ),
            format!("checks whether the {phrase} is empty"),
        ),
        6 => (
            format!(
                "public int countPositive{}({ty}[] {plural}) {{ int n = 0; for ({ty} v : {plural}) {{ if (v > 0) {{ n++; }} }} return n; }}",
                upper_first(&plural)
            ),
            format!("counts the positive {plural}"),
        ),
        _ => (
            format!("public void reset{}() {{ {field} = 0; }}", upper_first(&field)),
            format!("resets the {phrase} to zero"),
        ),
    };
    CodePair { code, summary }
}

pub fn code_pairs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<CodePair> {
    (0..n).map(|_| code_pair(rng)).collect()
}

/// Knobs for [`gaze_sample`].
#[derive(Clone, Debug)]
pub struct FixationSynthesis {
    /// Expected fixation count at a focus center.
    pub peak_count: f64,
    /// Focus spread in leaf-node units.
    pub spread: (f64, f64),
}

impl Default for FixationSynthesis {
    fn default() -> Self {
        Self {
            peak_count: 6.0,
            spread: (0.8, 3.0),
        }
    }
}

/// Leaves a reader tends to dwell on: the method name, the first returned
/// expression and the loop header. Falls back to the middle leaf.
fn salient_leaves(nodes: &[AstNode]) -> Vec<usize> {
    let mut out = Vec::new();
    if let Some(open) = nodes.iter().position(|n| n.text == "(") {
        out.extend(open.checked_sub(1));
    }
    if let Some(r) = nodes.iter().position(|n| n.text == "return") {
        if r + 1 < nodes.len() {
            out.push(r + 1);
        }
    }
    out.extend(nodes.iter().position(|n| n.text == "for"));
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        out.push(nodes.len() / 2);
    }
    out
}

/// Gaze sample for `pair`: one to three Gaussian foci anchored on salient
/// leaves of the template, integer counts drawn around them, and gold
/// alignments from byte ownership of the prompt tokenization. A few abstract
/// statement-level nodes are appended so the overlap stage is exercised.
pub fn gaze_sample<R: Rng + ?Sized>(
    pair: &CodePair,
    vocab: &Vocab,
    cfg: &FixationSynthesis,
    rng: &mut R,
) -> Result<GazeSample> {
    let mut nodes = build_leaf_ast(&pair.code)?;
    let leaves = nodes.len();
    let mut next_id = leaves as u64;
    let mut start = 0;
    for (i, n) in nodes.clone().iter().enumerate() {
        if n.text == ";" || n.text == "{" || i + 1 == leaves {
            let first = &nodes[start];
            if i > start {
                nodes.push(AstNode {
                    node_id: next_id,
                    node_type: "Statement".into(),
                    text: String::new(),
                    char_start: first.char_start,
                    char_end: n.char_end,
                });
                next_id += 1;
            }
            start = i + 1;
        }
    }

    let foci: Vec<(f64, f64)> = salient_leaves(&nodes[..leaves])
        .into_iter()
        .map(|c| (c as f64, rng.gen_range(cfg.spread.0..cfg.spread.1)))
        .collect();
    let mut fixations = Vec::new();
    for n in &nodes[..leaves] {
        let i = n.node_id as f64;
        let rate: f64 = foci
            .iter()
            .map(|(c, s)| cfg.peak_count * (-(i - c).powi(2) / (2.0 * s * s)).exp())
            .sum();
        let count = if rate > 1e-3 {
            Poisson::new(rate).unwrap().sample(rng)
        } else {
            0.0
        };
        if count > 0.0 {
            fixations.push(FixationRecord {
                node_id: n.node_id,
                count,
            });
        }
    }
    if fixations.is_empty() {
        let c = foci[0].0.floor() as u64;
        fixations.push(FixationRecord {
            node_id: c,
            count: 1.0,
        });
    }

    let prompt = encode_prompt(&pair.code, None, vocab);
    let gold = gold_by_ownership(&nodes, &prompt.code_spans, prompt.code_offset);
    Ok(GazeSample {
        code: pair.code.clone(),
        ast: nodes,
        fixations,
        summary: Some(pair.summary.clone()),
        gold: Some(gold),
    })
}
