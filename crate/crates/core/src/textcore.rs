//! Corpus data model, vocabulary and JSON Lines I/O.
//!
//! Documents and summaries are pre-tokenized on whitespace and split into
//! sentences. On disk every example is one JSON object per line:
//!
//! ```text
//! {"id": "ex-1", "document": [["a", "b"], ["c"]], "summary": [["a"]], "oracle": [0]}
//! ```
//!
//! `oracle` is optional and holds 0-based document sentence indices, one per
//! summary sentence.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::OracleAlignment;
use crate::error::{Error, Result};

pub type TokenId = u32;
pub type Tag = u32;

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
/// Closes a sentence in an extended sequence.
pub const SENT_END: &str = "</S>";
/// Terminates a summary; also used as the decoder start symbol.
pub const SUMMARY_END: &str = "</SUM>";

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const SENT_END_ID: TokenId = 2;
pub const SUMMARY_END_ID: TokenId = 3;
const FIRST_IDENTIFIER_ID: TokenId = 4;

pub const DEFAULT_MAX_IDENTIFIER: usize = 64;

/// Spelling of the sentence identifier `<S_k>`.
pub fn identifier_token(k: usize) -> String {
    format!("<S_{k}>")
}

/// Parses `<S_k>` into `k`.
pub fn parse_identifier(tok: &str) -> Option<usize> {
    let digits = tok.strip_prefix("<S_")?.strip_suffix('>')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn is_reserved(tok: &str) -> bool {
    matches!(tok, PAD | UNK | SENT_END | SUMMARY_END) || parse_identifier(tok).is_some()
}

/// How a token participates in group-tag generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Identifier(usize),
    SentEnd,
    Other,
}

impl TokenKind {
    pub fn of_str(tok: &str) -> Self {
        if tok == SENT_END {
            TokenKind::SentEnd
        } else if let Some(k) = parse_identifier(tok) {
            TokenKind::Identifier(k)
        } else {
            TokenKind::Other
        }
    }
}

/// A non-empty run of word tokens free of reserved symbols.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence(Vec<String>);

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        if let Some(bad) = tokens.iter().find(|t| is_reserved(t)) {
            return Err(Error::Invalid(format!("reserved token {bad:?} in sentence")));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::Invalid(format!("token {bad:?} is empty or contains whitespace")));
        }
        Ok(Sentence(tokens))
    }

    /// Splits on whitespace.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.0
    }
}

impl std::fmt::Display for Sentence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl Document {
    pub fn new(id: impl Into<String>, sentences: Vec<Sentence>) -> Result<Self> {
        let id = id.into();
        if sentences.is_empty() {
            return Err(Error::InvalidExample {
                id,
                message: "document has no sentences".into(),
            });
        }
        Ok(Document { id, sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummExample {
    pub document: Document,
    pub summary: Vec<Sentence>,
    pub oracle: Option<OracleAlignment>,
}

impl SummExample {
    pub fn new(document: Document, summary: Vec<Sentence>, oracle: Option<OracleAlignment>) -> Result<Self> {
        let invalid = |message: String| Error::InvalidExample {
            id: document.id.clone(),
            message,
        };
        if summary.is_empty() {
            return Err(invalid("summary has no sentences".into()));
        }
        if let Some(oracle) = &oracle {
            if oracle.len() != summary.len() {
                return Err(invalid(format!(
                    "oracle has {} entries but summary has {} sentences",
                    oracle.len(),
                    summary.len()
                )));
            }
            if let Some(&bad) = oracle.indices().iter().find(|&&i| i >= document.len()) {
                return Err(invalid(format!(
                    "oracle index {bad} out of range for {} document sentences",
                    document.len()
                )));
            }
        }
        Ok(SummExample {
            document,
            summary,
            oracle,
        })
    }

    pub fn id(&self) -> &str {
        &self.document.id
    }
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    id: String,
    document: Vec<Vec<String>>,
    summary: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle: Option<Vec<usize>>,
}

impl RawExample {
    fn into_example(self) -> Result<SummExample> {
        let RawExample {
            id,
            document,
            summary,
            oracle,
        } = self;
        let sentences = |raw: Vec<Vec<String>>, what: &str| -> Result<Vec<Sentence>> {
            raw.into_iter()
                .enumerate()
                .map(|(i, toks)| {
                    Sentence::new(toks).map_err(|e| Error::InvalidExample {
                        id: id.clone(),
                        message: format!("{what} sentence {i}: {e}"),
                    })
                })
                .collect()
        };
        let doc_sents = sentences(document, "document")?;
        let sum_sents = sentences(summary, "summary")?;
        let document = Document::new(id.clone(), doc_sents)?;
        SummExample::new(document, sum_sents, oracle.map(OracleAlignment::new))
    }

    fn from_example(ex: &SummExample) -> Self {
        let raw = |s: &[Sentence]| s.iter().map(|s| s.tokens().to_vec()).collect();
        RawExample {
            id: ex.document.id.clone(),
            document: raw(&ex.document.sentences),
            summary: raw(&ex.summary),
            oracle: ex.oracle.as_ref().map(|o| o.indices().to_vec()),
        }
    }
}

/// Parses one corpus line. `line_no` is 1-based and only used for errors.
pub fn parse_line(line: &str, line_no: usize) -> Result<SummExample> {
    let raw: RawExample = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    raw.into_example()
}

pub fn to_line(ex: &SummExample) -> String {
    serde_json::to_string(&RawExample::from_example(ex)).expect("corpus example serializes")
}

/// Streaming reader over a JSON Lines corpus. Blank lines are skipped.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    path: std::path::PathBuf,
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<SummExample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_line(&line, self.line_no));
        }
    }
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<CorpusReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(CorpusReader {
        lines: BufReader::new(file).lines(),
        line_no: 0,
        path: path.to_path_buf(),
    })
}

/// Reads a whole corpus, failing on the first bad line.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SummExample>> {
    read_corpus(path)?.collect()
}

pub fn write_corpus<'a>(path: impl AsRef<Path>, examples: impl IntoIterator<Item = &'a SummExample>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ex in examples {
        writeln!(out, "{}", to_line(ex)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Token/id mapping. Reserved symbols occupy the lowest ids:
/// `<PAD>`, `<UNK>`, `</S>`, `</SUM>`, then `<S_0>` ... `<S_K>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    max_identifier: usize,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn reserved(max_identifier: usize) -> Vec<String> {
        let mut tokens: Vec<String> = [PAD, UNK, SENT_END, SUMMARY_END]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..=max_identifier).map(identifier_token));
        tokens
    }

    fn from_tokens(max_identifier: usize, tokens: Vec<String>) -> Result<Self> {
        let reserved = Self::reserved(max_identifier);
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(Error::Invalid(
                "vocabulary does not start with the reserved block".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if i >= reserved.len() && is_reserved(t) {
                return Err(Error::Invalid(format!("reserved token {t:?} in word range")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab {
            max_identifier,
            tokens,
            index,
        })
    }

    /// Builds a vocabulary from document and summary tokens. Words are ordered
    /// by descending frequency, ties broken lexicographically.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a SummExample>,
        min_freq: usize,
        max_identifier: usize,
    ) -> Result<Self> {
        if max_identifier < 1 {
            return Err(Error::Config("max identifier must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen = false;
        for ex in corpus {
            seen = true;
            let sents = ex.document.sentences.iter().chain(ex.summary.iter());
            for tok in sents.flat_map(|s| s.tokens()) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !seen {
            return Err(Error::EmptyCorpus);
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = Self::reserved(max_identifier);
        tokens.extend(words.into_iter().map(|(w, _)| w.to_owned()));
        Self::from_tokens(max_identifier, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_identifier(&self) -> usize {
        self.max_identifier
    }

    pub fn id(&self, tok: &str) -> TokenId {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, tok: &str) -> Option<TokenId> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn identifier(&self, k: usize) -> TokenId {
        assert!(
            k <= self.max_identifier,
            "identifier <S_{k}> exceeds K = {}",
            self.max_identifier
        );
        FIRST_IDENTIFIER_ID + k as TokenId
    }

    /// `Some(k)` if `id` is `<S_k>`.
    pub fn identifier_index(&self, id: TokenId) -> Option<usize> {
        let k = id.checked_sub(FIRST_IDENTIFIER_ID)? as usize;
        (k <= self.max_identifier).then_some(k)
    }

    /// First id past the reserved block.
    pub fn first_word_id(&self) -> TokenId {
        FIRST_IDENTIFIER_ID + self.max_identifier as TokenId + 1
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        id >= self.first_word_id() || id == UNK_ID
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        if id == SENT_END_ID {
            TokenKind::SentEnd
        } else if let Some(k) = self.identifier_index(id) {
            TokenKind::Identifier(k)
        } else {
            TokenKind::Other
        }
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_owned()).collect()
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.max_identifier as u64).to_le_bytes());
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Vocab = serde_json::from_str(s).map_err(|e| Error::Invalid(format!("vocab json: {e}")))?;
        Self::from_tokens(v.max_identifier, v.tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
