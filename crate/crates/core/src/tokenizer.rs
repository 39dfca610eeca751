//! Byte-level BPE with byte offsets, plus the summarization prompt template.
//!
//! Ids `0..256` are raw bytes, `256..260` are the special tokens, and every
//! merge appends one id after that. Text is first split into chunks (letter
//! runs, digit runs, whitespace runs, single punctuation bytes); merges never
//! cross a chunk boundary.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const SEP: u32 = 259;
pub const NUM_SPECIAL: usize = 4;
const FIRST_MERGE_ID: u32 = 256 + NUM_SPECIAL as u32;
const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Instruction prefix placed before the code.
pub const PROMPT_PREFIX: &str = "summarize:\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub sep: u32,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            pad: PAD,
            bos: BOS,
            eos: EOS,
            sep: SEP,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    merges: Vec<(u32, u32)>,
    special_tokens: SpecialTokens,
}

const VOCAB_FORMAT: &str = "gazeprior-bpe-v1";

/// Trained merge table.
#[derive(Clone, Debug)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    special: SpecialTokens,
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    ranks: HashMap<(u32, u32), u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.special == other.special
    }
}

/// One encoded token and the half-open byte range it covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub token_id: u32,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Letter,
    Digit,
    Blank,
    Newline,
    NonAscii,
    Punct,
}

fn class(b: u8) -> ByteClass {
    match b {
        b'a'..=b'z' | b'A'..=b'Z' | b'_' => ByteClass::Letter,
        b'0'..=b'9' => ByteClass::Digit,
        b' ' | b'\t' => ByteClass::Blank,
        b'\n' | b'\r' => ByteClass::Newline,
        0x80..=0xff => ByteClass::NonAscii,
        _ => ByteClass::Punct,
    }
}

/// Splits bytes into merge-isolated chunks, returned as byte ranges.
fn chunks(bytes: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        let c = class(bytes[start]);
        let mut end = start + 1;
        if c != ByteClass::Punct {
            while end < bytes.len() && class(bytes[end]) == c {
                end += 1;
            }
        }
        out.push((start, end));
        start = end;
    }
    out
}

impl Vocab {
    /// Rebuilds a vocabulary from an ordered merge list.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.extend(SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()));
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let known = tokens.len() as u32;
            let is_special = |t: u32| (256..FIRST_MERGE_ID).contains(&t);
            if a >= known || b >= known || is_special(a) || is_special(b) {
                return Err(Error::Format(format!(
                    "merge {rank} refers to invalid ids ({a}, {b})"
                )));
            }
            let mut bytes = tokens[a as usize].clone();
            bytes.extend_from_slice(&tokens[b as usize]);
            tokens.push(bytes);
            ranks.insert((a, b), rank as u32);
        }
        let mut token_to_id = HashMap::new();
        for (id, t) in tokens.iter().enumerate() {
            if !(256..FIRST_MERGE_ID as usize).contains(&id) {
                token_to_id.entry(t.clone()).or_insert(id as u32);
            }
        }
        Ok(Self {
            merges,
            special: SpecialTokens::default(),
            tokens,
            token_to_id,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn special(&self) -> &SpecialTokens {
        &self.special
    }

    pub fn is_special(&self, id: u32) -> bool {
        (256..FIRST_MERGE_ID).contains(&id)
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            format: VOCAB_FORMAT.into(),
            merges: self.merges.clone(),
            special_tokens: self.special.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        if f.format != VOCAB_FORMAT {
            return Err(Error::Format(format!(
                "unknown vocab format {:?}",
                f.format
            )));
        }
        if f.special_tokens != SpecialTokens::default() {
            return Err(Error::Format(
                "special token ids do not match this build".into(),
            ));
        }
        Self::from_merges(f.merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn encode_chunk(&self, bytes: &[u8], offset: usize, out: &mut Vec<TokenSpan>) {
        let mut syms: Vec<(u32, usize, usize)> = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| (b as u32, offset + i, offset + i + 1))
            .collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].0, w[1].0)).map(|&r| (r, i)))
                .min();
            let Some((rank, i)) = best else { break };
            let new_id = FIRST_MERGE_ID + rank;
            syms[i] = (new_id, syms[i].1, syms[i + 1].2);
            syms.remove(i + 1);
        }
        out.extend(
            syms.into_iter()
                .map(|(token_id, char_start, char_end)| TokenSpan {
                    token_id,
                    char_start,
                    char_end,
                }),
        );
    }

    /// Encodes raw bytes; spans are byte offsets into `bytes`.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenSpan> {
        let mut out = Vec::new();
        for (s, e) in chunks(bytes) {
            self.encode_chunk(&bytes[s..e], s, &mut out);
        }
        out
    }

    /// Encodes text. Offsets are byte offsets, which coincide with character
    /// offsets for ASCII source.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<TokenSpan> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text)
            .into_iter()
            .map(|t| t.token_id)
            .collect()
    }

    /// Concatenated bytes of the ids; special tokens contribute nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.tokens.get(id as usize).ok_or_else(|| {
                Error::Range(format!(
                    "token id {id} outside vocabulary of {}",
                    self.len()
                ))
            })?;
            if !self.is_special(id) {
                out.extend_from_slice(t);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }
}

/// Trains merges until the vocabulary holds `vocab_size` ids or no pair is left.
/// Equal pair counts are broken by the byte-wise smaller `(left, right)`.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Config("empty tokenizer corpus".into()));
    }
    let base = 256 + NUM_SPECIAL;
    if vocab_size < base {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is below the {base} base ids"
        )));
    }
    let mut word_counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for text in corpus {
        let bytes = text.as_ref().as_bytes();
        for (s, e) in chunks(bytes) {
            *word_counts.entry(bytes[s..e].to_vec()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.into_iter().map(u32::from).collect(), c))
        .collect();
    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    tokens.extend(SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()));
    let mut merges = Vec::new();

    while tokens.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += c;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((a, b), _)) = best else { break };
        let new_id = tokens.len() as u32;
        let mut bytes = tokens[a as usize].clone();
        bytes.extend_from_slice(&tokens[b as usize]);
        tokens.push(bytes);
        merges.push((a, b));
        for (w, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < w.len() {
                if w[i] == a && w[i + 1] == b {
                    w[i] = new_id;
                    w.remove(i + 1);
                }
                i += 1;
            }
        }
    }
    Vocab::from_merges(merges)
}

/// A code (and optional summary) laid out in the decoder prompt template
/// `summarize:\n<code>\n<SEP>\n<summary><EOS>`.
#[derive(Clone, Debug)]
pub struct PromptEncoding {
    /// Prompt ids through the newline after `<SEP>`, followed by the summary
    /// ids and `<EOS>` when a summary was given.
    pub ids: Vec<u32>,
    /// Token index of the first code token.
    pub code_start: usize,
    pub code_len: usize,
    /// Length of the prompt part (everything before the first summary token).
    pub prompt_len: usize,
    /// Code token spans in prompt-text byte coordinates.
    pub code_spans: Vec<TokenSpan>,
    /// Byte offset of the code inside the prompt text.
    pub code_offset: usize,
}

impl PromptEncoding {
    pub fn summary_len(&self) -> usize {
        self.ids.len() - self.prompt_len
    }
}

pub fn encode_prompt(code: &str, summary: Option<&str>, vocab: &Vocab) -> PromptEncoding {
    let mut ids = vocab.encode(PROMPT_PREFIX);
    let code_start = ids.len();
    let code_offset = PROMPT_PREFIX.len();
    let code_spans: Vec<TokenSpan> = vocab
        .encode_with_offsets(code)
        .into_iter()
        .map(|t| TokenSpan {
            char_start: t.char_start + code_offset,
            char_end: t.char_end + code_offset,
            ..t
        })
        .collect();
    ids.extend(code_spans.iter().map(|t| t.token_id));
    ids.extend(vocab.encode("\n"));
    ids.push(SEP);
    ids.extend(vocab.encode("\n"));
    let prompt_len = ids.len();
    if let Some(s) = summary {
        ids.extend(vocab.encode(s));
        ids.push(EOS);
    }
    PromptEncoding {
        ids,
        code_start,
        code_len: code_spans.len(),
        prompt_len,
        code_spans,
        code_offset,
    }
}

/// The full prompt text the code spans index into.
pub fn prompt_text(code: &str) -> String {
    format!("{PROMPT_PREFIX}{code}\n")
}
