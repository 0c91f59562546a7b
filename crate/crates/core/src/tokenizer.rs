//! Tokenizers and region alignment.
//!
//! Two modes are supported:
//!
//! - **lookup**: the text is split into units of an optional leading space
//!   followed by non-space characters (`"The author"` becomes `["The", " author"]`)
//!   and each unit is looked up in a newline-delimited vocabulary.
//! - **byte-level BPE**: GPT-2 style pre-tokenization, the printable-byte
//!   remapping, and ordered merge rules.
//!
//! Interventions are aligned at the last token of every template region, so
//! every region must end on a token boundary.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::EvalExample;

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

fn lookup_units() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s?\S+|\s+").expect("static regex"))
}

fn gpt2_pretokenizer() -> &'static fancy_regex::Regex {
    static RE: OnceLock<fancy_regex::Regex> = OnceLock::new();
    RE.get_or_init(|| fancy_regex::Regex::new(GPT2_PATTERN).expect("static regex"))
}

/// The GPT-2 byte to printable-character table.
pub fn byte_to_char_table() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let printable = |b: u32| {
            (u32::from('!')..=u32::from('~')).contains(&b)
                || (0xA1..=0xAC).contains(&b)
                || (0xAE..=0xFF).contains(&b)
        };
        let mut extra = 0u32;
        for b in 0..256u32 {
            let c = if printable(b) {
                b
            } else {
                extra += 1;
                255 + extra
            };
            table[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        table
    })
}

fn char_to_byte_table() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        byte_to_char_table()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    Lookup,
    ByteLevelBpe,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: HashMap<String, u32>,
    id_to_token: Vec<String>,
    /// Merge priority by pair; lower ranks merge first.
    merge_ranks: HashMap<(String, String), usize>,
}

impl Tokenizer {
    /// Lookup tokenizer; token `i` gets id `i`.
    pub fn lookup(tokens: Vec<String>) -> Result<Self> {
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::TokenizerFile(format!(
                    "empty token at line {}",
                    i + 1
                )));
            }
            if vocab.insert(t.clone(), i as u32).is_some() {
                return Err(Error::TokenizerFile(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            mode: TokenizerMode::Lookup,
            vocab,
            id_to_token: tokens,
            merge_ranks: HashMap::new(),
        })
    }

    /// Parses a newline-delimited vocabulary (one token per line).
    pub fn lookup_from_vocab_text(text: &str) -> Result<Self> {
        // A trailing newline produces no token; interior empty lines are errors.
        let body = text.strip_suffix('\n').unwrap_or(text);
        let tokens = body
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned())
            .collect();
        Self::lookup(tokens)
    }

    /// Smallest lookup vocabulary covering every unit of `texts`, in
    /// first-seen order after `prefix` tokens.
    pub fn lookup_covering<'a, I>(prefix: &[&str], texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut tokens: Vec<String> = prefix.iter().map(|s| (*s).to_owned()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for text in texts {
            for m in lookup_units().find_iter(text) {
                if seen.insert(m.as_str().to_owned()) {
                    tokens.push(m.as_str().to_owned());
                }
            }
        }
        Self::lookup(tokens)
    }

    /// Byte-level BPE from a token→id map and ordered merges.
    pub fn bpe(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let n = vocab.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &vocab {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                Error::TokenizerFile(format!("vocab ids not dense: id {id} >= {n}"))
            })?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::TokenizerFile(format!("duplicate id {id}")));
            }
        }
        let id_to_token = id_to_token
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::TokenizerFile("vocab ids not dense".into()))?;
        let merge_ranks = merges
            .into_iter()
            .enumerate()
            .map(|(rank, pair)| (pair, rank))
            .collect();
        Ok(Self {
            mode: TokenizerMode::ByteLevelBpe,
            vocab,
            id_to_token,
            merge_ranks,
        })
    }

    /// Parses a merges file: one space-separated pair per line, optional
    /// `#version` header.
    pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
        text.lines()
            .enumerate()
            .filter(|(i, l)| !(l.is_empty() || (*i == 0 && l.starts_with("#version"))))
            .map(|(i, l)| {
                let mut parts = l.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                        Ok((a.to_owned(), b.to_owned()))
                    }
                    _ => Err(Error::TokenizerFile(format!(
                        "malformed merge at line {}: {l:?}",
                        i + 1
                    ))),
                }
            })
            .collect()
    }

    pub fn bpe_from_files(vocab_json: &Path, merges_txt: &Path) -> Result<Self> {
        let vocab: HashMap<String, u32> =
            serde_json::from_str(&std::fs::read_to_string(vocab_json)?)?;
        let merges = Self::parse_merges(&std::fs::read_to_string(merges_txt)?)?;
        Self::bpe(vocab, merges)
    }

    /// Reads a Hugging Face `tokenizer.json` with a BPE model.
    pub fn from_tokenizer_json(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            model: BpeModel,
            #[serde(default)]
            added_tokens: Vec<Added>,
        }
        #[derive(Deserialize)]
        struct BpeModel {
            vocab: HashMap<String, u32>,
            merges: Vec<serde_json::Value>,
        }
        #[derive(Deserialize)]
        struct Added {
            id: u32,
            content: String,
        }
        let file: File = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut vocab = file.model.vocab;
        for a in file.added_tokens {
            vocab.entry(a.content).or_insert(a.id);
        }
        let merges = file
            .model
            .merges
            .into_iter()
            .map(|m| match m {
                serde_json::Value::String(s) => match s.split_once(' ') {
                    Some((a, b)) => Ok((a.to_owned(), b.to_owned())),
                    None => Err(Error::TokenizerFile(format!("malformed merge {s:?}"))),
                },
                serde_json::Value::Array(v) if v.len() == 2 => match (&v[0], &v[1]) {
                    (serde_json::Value::String(a), serde_json::Value::String(b)) => {
                        Ok((a.clone(), b.clone()))
                    }
                    _ => Err(Error::TokenizerFile("malformed merge pair".into())),
                },
                other => Err(Error::TokenizerFile(format!("malformed merge {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::bpe(vocab, merges)
    }

    /// Loads whichever tokenizer files `dir` contains: `vocab.txt` (lookup),
    /// `vocab.json` + `merges.txt`, or `tokenizer.json`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let lookup = dir.join("vocab.txt");
        if lookup.exists() {
            return Self::lookup_from_vocab_text(&std::fs::read_to_string(lookup)?);
        }
        let (vocab, merges) = (dir.join("vocab.json"), dir.join("merges.txt"));
        if vocab.exists() && merges.exists() {
            return Self::bpe_from_files(&vocab, &merges);
        }
        let hf = dir.join("tokenizer.json");
        if hf.exists() {
            return Self::from_tokenizer_json(&hf);
        }
        Err(Error::TokenizerFile(format!(
            "no tokenizer files in {}",
            dir.display()
        )))
    }

    /// Vocabulary file content for a lookup tokenizer.
    pub fn to_vocab_text(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        match self.mode {
            TokenizerMode::Lookup => lookup_units()
                .find_iter(text)
                .map(|m| {
                    self.token_to_id(m.as_str())
                        .ok_or_else(|| Error::UnknownToken(m.as_str().to_owned()))
                })
                .collect(),
            TokenizerMode::ByteLevelBpe => {
                let mut ids = Vec::new();
                for piece in gpt2_pretokenizer().find_iter(text) {
                    let piece = piece.map_err(|e| Error::TokenizerFile(e.to_string()))?;
                    for sym in self.bpe_word(piece.as_str()) {
                        ids.push(
                            self.token_to_id(&sym)
                                .ok_or_else(|| Error::UnknownToken(sym.clone()))?,
                        );
                    }
                }
                Ok(ids)
            }
        }
    }

    /// Applies merge rules to one pre-token.
    fn bpe_word(&self, piece: &str) -> Vec<String> {
        let table = byte_to_char_table();
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| table[b as usize].to_string())
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self
                        .merge_ranks
                        .get(&(symbols[i].clone(), symbols[i + 1].clone()))
                        == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Raw bytes spelled by a token.
    pub fn token_bytes(&self, id: u32) -> Result<Vec<u8>> {
        let tok = self.id_to_token(id).ok_or(Error::UnknownId(id))?;
        match self.mode {
            TokenizerMode::Lookup => Ok(tok.as_bytes().to_vec()),
            TokenizerMode::ByteLevelBpe => {
                let table = char_to_byte_table();
                tok.chars()
                    .map(|c| {
                        table.get(&c).copied().ok_or_else(|| {
                            Error::TokenizerFile(format!("token {tok:?} is not byte-level"))
                        })
                    })
                    .collect()
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend(self.token_bytes(id)?);
        }
        String::from_utf8(bytes).map_err(|e| Error::TokenizerFile(e.to_string()))
    }
}

/// Last-token index of every region in the base and source sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAlignment {
    pub base_last: Vec<usize>,
    pub source_last: Vec<usize>,
    pub base_len: usize,
    pub source_len: usize,
}

impl RegionAlignment {
    pub fn n_regions(&self) -> usize {
        self.base_last.len()
    }
}

/// Token ids of a sentence plus the last-token index of each region.
pub fn align_sentence(tok: &Tokenizer, regions: &[String]) -> Result<(Vec<u32>, Vec<usize>)> {
    let sentence = crate::taskgen::join_regions(regions);
    let ids = tok.encode(&sentence)?;
    let mut ends = Vec::with_capacity(ids.len());
    let mut acc = 0usize;
    for &id in &ids {
        acc += tok.token_bytes(id)?.len();
        ends.push(acc);
    }

    let mut last = Vec::with_capacity(regions.len());
    let mut offset = 0usize;
    for (i, region) in regions.iter().enumerate() {
        if i > 0 {
            offset += 1;
        }
        offset += region.len();
        match ends.binary_search(&offset) {
            Ok(t) => last.push(t),
            Err(_) => {
                return Err(Error::BoundaryMismatch {
                    region: format!("#{i} {region:?}"),
                    sentence,
                })
            }
        }
    }
    Ok((ids, last))
}

pub fn align_regions(tok: &Tokenizer, example: &EvalExample) -> Result<RegionAlignment> {
    let (b_ids, base_last) = align_sentence(tok, &example.base_regions)?;
    let (s_ids, source_last) = align_sentence(tok, &example.source_regions)?;
    Ok(RegionAlignment {
        base_last,
        source_last,
        base_len: b_ids.len(),
        source_len: s_ids.len(),
    })
}

pub fn label_token_id(tok: &Tokenizer, label: &str) -> Result<u32> {
    let ids = tok.encode(label)?;
    match ids.as_slice() {
        [id] => Ok(*id),
        _ => Err(Error::MultiTokenLabel {
            label: label.to_owned(),
            n_tokens: ids.len(),
        }),
    }
}
