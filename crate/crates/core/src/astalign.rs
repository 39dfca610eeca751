//! Moves fixation counts recorded on AST nodes onto prompt subtokens.
//!
//! Three stages decide which subtokens a node owns: an exact single-token
//! match, an exact run of consecutive tokens, and finally any token whose
//! byte range overlaps the node. Counts are then split evenly over the owned
//! subtokens, so total fixation mass is preserved.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{encode_prompt, TokenSpan, Vocab};

/// Smallest fixation spread, in tokens.
pub const DEFAULT_SIGMA_MIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AstNode {
    pub node_id: u64,
    pub node_type: String,
    /// Empty for abstract nodes.
    #[serde(default)]
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

impl AstNode {
    pub fn is_abstract(&self) -> bool {
        self.text.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub node_id: u64,
    /// Raw or duration-weighted fixation count.
    pub count: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    Exact,
    Aggregate,
    Offset,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlignment {
    pub node_id: u64,
    /// Code-region token indices, contiguous and ascending.
    pub subtoken_indices: Vec<usize>,
    pub strategy: MatchStrategy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub alignments: Vec<TokenAlignment>,
    pub unmapped: Vec<u64>,
}

/// Supervision derived from one sample's fixations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationTarget {
    /// Fixation mass per code-region token.
    #[serde(rename = "F")]
    pub f: Vec<f64>,
    pub mu_human: f64,
    pub sigma_target: f64,
    pub total_mass: f64,
}

impl FixationTarget {
    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    /// Token positions `i` with `|i - round(mu_human)| <= ceil(sigma_target)`.
    pub fn window(&self) -> std::ops::RangeInclusive<usize> {
        let c = self.mu_human.round() as i64;
        let r = self.sigma_target.ceil() as i64;
        let last = self.f.len() as i64 - 1;
        let lo = (c - r).clamp(0, last.max(0)) as usize;
        let hi = (c + r).clamp(0, last.max(0)) as usize;
        lo..=hi
    }
}

const JAVA_KEYWORDS: &[&str] = &[
    "abstract",
    "assert",
    "boolean",
    "break",
    "byte",
    "case",
    "catch",
    "char",
    "class",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extends",
    "final",
    "finally",
    "float",
    "for",
    "goto",
    "if",
    "implements",
    "import",
    "instanceof",
    "int",
    "interface",
    "long",
    "native",
    "new",
    "package",
    "private",
    "protected",
    "public",
    "return",
    "short",
    "static",
    "strictfp",
    "super",
    "switch",
    "synchronized",
    "this",
    "throw",
    "throws",
    "transient",
    "try",
    "void",
    "volatile",
    "while",
    "var",
    "true",
    "false",
    "null",
];

const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<", ">>", "+", "-", "*", "/", "%", "=", "<",
    ">", "!", "~", "?", ":", "&", "|", "^",
];

const SEPARATORS: &[u8] = b"(){}[];,.@";

/// Leaf nodes of a Java-like lexical grammar, or the nodes of a
/// pre-serialized AST when `source` is a JSON node array.
pub fn build_leaf_ast(source: &str) -> Result<Vec<AstNode>> {
    if source.is_empty() {
        return Err(Error::Lex {
            pos: 0,
            msg: "empty source".into(),
        });
    }
    if source.trim_start().starts_with('[') {
        if let Ok(nodes) = serde_json::from_str::<Vec<AstNode>>(source) {
            return Ok(nodes);
        }
    }
    lex(source)
}

fn lex(src: &str) -> Result<Vec<AstNode>> {
    let bytes = src.as_bytes();
    let mut nodes = Vec::new();
    let mut i = 0;
    let push = |nodes: &mut Vec<AstNode>, kind: &str, s: usize, e: usize| {
        nodes.push(AstNode {
            node_id: nodes.len() as u64,
            node_type: kind.to_string(),
            text: src[s..e].to_string(),
            char_start: s,
            char_end: e,
        });
    };
    while i < bytes.len() {
        let b = bytes[i];
        let rest = &src[i..];
        if b.is_ascii_whitespace() {
            i += 1;
        } else if rest.starts_with("//") {
            i += rest.find('\n').unwrap_or(rest.len());
        } else if rest.starts_with("/*") {
            let end = rest[2..].find("*/").ok_or(Error::Lex {
                pos: i,
                msg: "unterminated block comment".into(),
            })?;
            i += end + 4;
        } else if b == b'"' || b == b'\'' {
            let mut j = i + 1;
            loop {
                match bytes.get(j) {
                    None | Some(b'\n') => {
                        return Err(Error::Lex {
                            pos: i,
                            msg: "unterminated literal".into(),
                        })
                    }
                    Some(b'\\') => j += 2,
                    Some(&c) if c == b => break,
                    Some(_) => j += 1,
                }
            }
            push(&mut nodes, "Literal", i, j + 1);
            i = j + 1;
        } else if b.is_ascii_digit() {
            let mut j = i + 1;
            while j < bytes.len()
                && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'.' || bytes[j] == b'_')
            {
                j += 1;
            }
            push(&mut nodes, "Literal", i, j);
            i = j;
        } else if let Some(c) = rest
            .chars()
            .next()
            .filter(|c| c.is_alphabetic() || *c == '_' || *c == '$')
        {
            let mut j = i + c.len_utf8();
            for c in src[j..].chars() {
                if c.is_alphanumeric() || c == '_' || c == '$' {
                    j += c.len_utf8();
                } else {
                    break;
                }
            }
            let kind = if JAVA_KEYWORDS.contains(&&src[i..j]) {
                "Keyword"
            } else {
                "Identifier"
            };
            push(&mut nodes, kind, i, j);
            i = j;
        } else if SEPARATORS.contains(&b) {
            push(&mut nodes, "Separator", i, i + 1);
            i += 1;
        } else if let Some(op) = OPERATORS.iter().find(|op| rest.starts_with(**op)) {
            push(&mut nodes, "Operator", i, i + op.len());
            i += op.len();
        } else {
            let c = rest.chars().next().unwrap();
            return Err(Error::Lex {
                pos: i,
                msg: format!("unexpected character {c:?}"),
            });
        }
    }
    Ok(nodes)
}

/// Checks span sanity and that concrete nodes quote the source verbatim.
pub fn validate_nodes(source: &str, nodes: &[AstNode]) -> Result<()> {
    for n in nodes {
        if n.char_start > n.char_end || n.char_end > source.len() {
            return Err(Error::Data(format!(
                "node {} has span {}..{} outside source of {} bytes",
                n.node_id,
                n.char_start,
                n.char_end,
                source.len()
            )));
        }
        if !n.is_abstract() && source.get(n.char_start..n.char_end) != Some(n.text.as_str()) {
            return Err(Error::Data(format!(
                "node {} text does not match its span",
                n.node_id
            )));
        }
    }
    Ok(())
}

/// Assigns each node the code-region subtokens it covers.
///
/// `spans` are the code-region token spans in prompt coordinates and
/// `code_offset` is where the code starts in the prompt text; returned
/// indices are positions within `spans`.
pub fn map_nodes_to_subtokens(
    nodes: &[AstNode],
    spans: &[TokenSpan],
    code_offset: usize,
    vocab: &Vocab,
) -> AlignmentResult {
    let mut result = AlignmentResult::default();
    let by_start: HashMap<usize, usize> = spans
        .iter()
        .enumerate()
        .map(|(i, s)| (s.char_start, i))
        .collect();
    for node in nodes {
        let (ns, ne) = (node.char_start + code_offset, node.char_end + code_offset);
        let mut found = None;
        if let Some(&first) = by_start.get(&ns) {
            let s = spans[first];
            let text = vocab.decode_bytes(&[s.token_id]).unwrap_or_default();
            if s.char_end == ne && text == node.text.as_bytes() {
                found = Some((vec![first], MatchStrategy::Exact));
            } else {
                let mut last = first;
                while last + 1 < spans.len() && spans[last].char_end < ne {
                    last += 1;
                }
                if last > first && spans[last].char_end == ne {
                    found = Some(((first..=last).collect(), MatchStrategy::Aggregate));
                }
            }
        }
        if found.is_none() {
            let idx: Vec<usize> = spans
                .iter()
                .enumerate()
                .filter(|(_, s)| s.char_start < ne && s.char_end > ns)
                .map(|(i, _)| i)
                .collect();
            if !idx.is_empty() {
                found = Some((idx, MatchStrategy::Offset));
            }
        }
        match found {
            Some((subtoken_indices, strategy)) => result.alignments.push(TokenAlignment {
                node_id: node.node_id,
                subtoken_indices,
                strategy,
            }),
            None => result.unmapped.push(node.node_id),
        }
    }
    result
}

/// Spreads each mapped node's count uniformly over its subtokens.
/// Records for nodes without an alignment are skipped.
pub fn project_fixations(
    records: &[FixationRecord],
    alignments: &[TokenAlignment],
    len: usize,
) -> Result<Vec<f64>> {
    let by_node: HashMap<u64, &TokenAlignment> =
        alignments.iter().map(|a| (a.node_id, a)).collect();
    let mut f = vec![0.0; len];
    for r in records {
        if !(r.count >= 0.0) || !r.count.is_finite() {
            return Err(Error::Data(format!(
                "node {} has fixation count {}",
                r.node_id, r.count
            )));
        }
        let Some(a) = by_node.get(&r.node_id) else {
            continue;
        };
        let share = r.count / a.subtoken_indices.len() as f64;
        for &i in &a.subtoken_indices {
            if i >= len {
                return Err(Error::Range(format!(
                    "subtoken {i} outside code region of {len}"
                )));
            }
            f[i] += share;
        }
    }
    Ok(f)
}

pub fn compute_targets(f: &[f64], sigma_min: f64) -> Result<FixationTarget> {
    let total: f64 = f.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Rejected(
            "no fixation mass on the code region".into(),
        ));
    }
    let mu = f.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / total;
    let var = f
        .iter()
        .enumerate()
        .map(|(i, v)| v * (i as f64 - mu).powi(2))
        .sum::<f64>()
        / total;
    Ok(FixationTarget {
        f: f.to_vec(),
        mu_human: mu,
        sigma_target: var.sqrt().max(sigma_min),
        total_mass: total,
    })
}

/// Gold index set for one node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAlignment {
    pub node_id: u64,
    pub subtoken_indices: Vec<usize>,
}

/// Fraction of gold nodes whose predicted index set matches exactly.
pub fn alignment_accuracy(alignments: &[TokenAlignment], gold: &[GoldAlignment]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Data("no gold alignments to score against".into()));
    }
    let predicted: HashMap<u64, &Vec<usize>> = alignments
        .iter()
        .map(|a| (a.node_id, &a.subtoken_indices))
        .collect();
    let hits = gold
        .iter()
        .filter(|g| {
            predicted
                .get(&g.node_id)
                .is_some_and(|p| **p == g.subtoken_indices)
        })
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// One entry of a gaze corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub code: String,
    /// When empty, leaf nodes are lexed from `code`.
    #[serde(default)]
    pub ast: Vec<AstNode>,
    pub fixations: Vec<FixationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<GoldAlignment>>,
}

/// Per-sample preprocessing output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedSample {
    #[serde(rename = "F")]
    pub f: Vec<f64>,
    pub mu_human: f64,
    pub sigma_target: f64,
    pub unmapped_node_ids: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip)]
    pub alignments: Vec<TokenAlignment>,
    #[serde(skip)]
    pub total_mass: f64,
}

impl ProcessedSample {
    pub fn target(&self) -> FixationTarget {
        FixationTarget {
            f: self.f.clone(),
            mu_human: self.mu_human,
            sigma_target: self.sigma_target,
            total_mass: self.total_mass,
        }
    }
}

/// Runs the whole pipeline for one sample against the decoder prompt layout.
pub fn preprocess_sample(
    sample: &GazeSample,
    vocab: &Vocab,
    sigma_min: f64,
) -> Result<ProcessedSample> {
    let nodes = if sample.ast.is_empty() {
        build_leaf_ast(&sample.code)?
    } else {
        sample.ast.clone()
    };
    validate_nodes(&sample.code, &nodes)?;
    let prompt = encode_prompt(&sample.code, None, vocab);
    let mapping = map_nodes_to_subtokens(&nodes, &prompt.code_spans, prompt.code_offset, vocab);
    let f = project_fixations(&sample.fixations, &mapping.alignments, prompt.code_len)?;
    let target = compute_targets(&f, sigma_min)?;
    let accuracy = match &sample.gold {
        Some(g) if !g.is_empty() => Some(alignment_accuracy(&mapping.alignments, g)?),
        _ => None,
    };
    Ok(ProcessedSample {
        f: target.f,
        mu_human: target.mu_human,
        sigma_target: target.sigma_target,
        unmapped_node_ids: mapping.unmapped,
        accuracy,
        alignments: mapping.alignments,
        total_mass: target.total_mass,
    })
}

/// Gold index sets computed from byte ownership: every byte of the code
/// region is owned by exactly one token, and a node's gold set is the set of
/// owners of its bytes.
pub fn gold_by_ownership(
    nodes: &[AstNode],
    spans: &[TokenSpan],
    code_offset: usize,
) -> Vec<GoldAlignment> {
    let mut owner = BTreeMap::new();
    for (i, s) in spans.iter().enumerate() {
        for b in s.char_start..s.char_end {
            owner.insert(b, i);
        }
    }
    nodes
        .iter()
        .filter(|n| n.char_end > n.char_start)
        .map(|n| {
            let mut idx: Vec<usize> = (n.char_start..n.char_end)
                .filter_map(|b| owner.get(&(b + code_offset)).copied())
                .collect();
            idx.dedup();
            GoldAlignment {
                node_id: n.node_id,
                subtoken_indices: idx,
            }
        })
        .collect()
}
