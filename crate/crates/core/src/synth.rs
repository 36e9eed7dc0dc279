//! Synthetic corpora with exactly decidable rewrites.
//!
//! Every document sentence is an entity token followed by content words,
//! with noise words sprinkled in. The gold summary rewrites a selection of
//! sentences with three symbolic rules:
//!
//! * noise words are dropped;
//! * a `REF` placeholder becomes the entity of the nearest earlier sentence
//!   that was not selected, which only the document context can supply;
//! * from the second summary sentence on, an entity equal to the one opening
//!   the summary becomes `PRON`, which only the summary context can decide.
//!
//! [`rewrite`] is the reference implementation of these rules and is a pure
//! function of the document and the selection.
//!
//! ```
//! use rlab::synth::{generate, rewrite, SynthConfig};
//!
//! let corpus = generate(&SynthConfig::default(), 3).unwrap();
//! for ex in &corpus {
//!     let selection = ex.oracle.as_ref().unwrap().indices();
//!     assert_eq!(rewrite(&ex.document, selection).unwrap(), ex.summary);
//! }
//! ```

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::OracleAlignment;
use crate::error::{Error, Result};
use crate::textcore::{Document, Sentence, SummExample};

pub const REF: &str = "REF";
pub const PRON: &str = "PRON";

/// Word classes of the synthetic lexicon, recognized by spelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Entity,
    Content,
    Cue,
    Noise,
    Ref,
    Pron,
    Foreign,
}

fn numbered(tok: &str, prefix: &str) -> bool {
    tok.strip_prefix(prefix)
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

pub fn word_class(tok: &str) -> WordClass {
    match tok {
        REF => WordClass::Ref,
        PRON => WordClass::Pron,
        t if numbered(t, "E") => WordClass::Entity,
        t if numbered(t, "w") => WordClass::Content,
        t if numbered(t, "k") => WordClass::Cue,
        t if numbered(t, "n") => WordClass::Noise,
        _ => WordClass::Foreign,
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Span { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub entities: usize,
    pub content_words: usize,
    pub noise_words: usize,
    /// Salient words marking selected sentences when `cued_selection` is on.
    pub cue_words: usize,
    pub doc_sentences: Span,
    pub summary_sentences: Span,
    /// Content words per sentence, not counting the entity.
    pub content_len: Span,
    /// Chance of a noise word after each entity or content token.
    pub noise_rate: f64,
    /// Chance that a later summary sentence repeats the first one's entity.
    pub coref_rate: f64,
    /// Chance that an eligible selected sentence carries `REF`.
    pub ref_rate: f64,
    /// Selected sentences open their content with a cue word and are
    /// summarized in document order, so selection is learnable from the
    /// document alone. Off: a uniformly random subset in random order.
    pub cued_selection: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            entities: 24,
            content_words: 200,
            noise_words: 12,
            cue_words: 16,
            doc_sentences: Span::new(4, 6),
            summary_sentences: Span::new(2, 3),
            content_len: Span::new(2, 4),
            noise_rate: 0.2,
            coref_rate: 0.5,
            ref_rate: 0.5,
            cued_selection: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        for (name, rate) in [
            ("noise_rate", self.noise_rate),
            ("coref_rate", self.coref_rate),
            ("ref_rate", self.ref_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, span) in [
            ("doc_sentences", self.doc_sentences),
            ("summary_sentences", self.summary_sentences),
            ("content_len", self.content_len),
        ] {
            if span.min == 0 || span.min > span.max {
                return Err(Error::Config(format!(
                    "{name} must be a non-empty range of positive sizes"
                )));
            }
        }
        if self.summary_sentences.min > self.doc_sentences.min {
            return bad("summaries can be longer than the shortest document");
        }
        if self.entities < self.doc_sentences.max {
            return bad("need at least one entity per document sentence");
        }
        if self.content_words < self.doc_sentences.max * self.content_len.max {
            return bad("content vocabulary too small for unique words per document");
        }
        if self.noise_rate > 0.0 && self.noise_words == 0 {
            return bad("noise_rate > 0 needs noise words");
        }
        if self.cued_selection && self.cue_words < self.summary_sentences.max {
            return bad("cued selection needs a cue word per selected sentence");
        }
        Ok(())
    }
}

/// Per-example stream so examples can be generated independently.
fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate_one(cfg: &SynthConfig, index: usize) -> SummExample {
    let mut rng = example_rng(cfg.seed, index);
    let n = cfg.doc_sentences.sample(&mut rng);
    let m = cfg.summary_sentences.sample(&mut rng).min(n);

    let mut selection: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_vec();
    if cfg.cued_selection {
        selection.sort_unstable();
    } else {
        selection.shuffle(&mut rng);
    }

    let mut entity: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.entities, n).into_vec();
    for &i in &selection[1..] {
        if rng.random_bool(cfg.coref_rate) {
            entity[i] = entity[selection[0]];
        }
    }

    let lens: Vec<usize> = (0..n).map(|_| cfg.content_len.sample(&mut rng)).collect();
    let mut words = rand::seq::index::sample(&mut rng, cfg.content_words, lens.iter().sum()).into_iter();
    let cues = if cfg.cued_selection {
        rand::seq::index::sample(&mut rng, cfg.cue_words, m).into_vec()
    } else {
        Vec::new()
    };

    let noise: Vec<usize> = (0..cfg.noise_words).collect();
    let mut sentences = Vec::with_capacity(n);
    for i in 0..n {
        let mut body: Vec<String> = (0..lens[i]).map(|_| format!("w{}", words.next().unwrap())).collect();
        if let Some(pos) = selection.iter().position(|&s| s == i) {
            if cfg.cued_selection {
                body[0] = format!("k{}", cues[pos]);
            }
            let eligible = i > 0 && !selection.contains(&(i - 1));
            if eligible && rng.random_bool(cfg.ref_rate) {
                let at = rng.random_range(0..=body.len());
                body.insert(at, REF.to_owned());
            }
        }
        let mut tokens = vec![format!("E{}", entity[i])];
        for w in body {
            tokens.push(w);
            if rng.random_bool(cfg.noise_rate) {
                tokens.push(format!("n{}", noise.choose(&mut rng).unwrap()));
            }
        }
        // entity-only sentences get their noise here
        if tokens.len() == 1 && rng.random_bool(cfg.noise_rate) {
            tokens.push(format!("n{}", noise.choose(&mut rng).unwrap()));
        }
        sentences.push(Sentence::new(tokens).expect("generated tokens are plain words"));
    }

    let document = Document::new(format!("syn-{index:06}"), sentences).expect("documents are non-empty");
    let summary = rewrite(&document, &selection).expect("selection is in range");
    SummExample::new(document, summary, Some(OracleAlignment::new(selection))).expect("generated example is consistent")
}

/// Generates `n` labeled examples; identical configs give identical corpora.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<SummExample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("need at least one example".into()));
    }
    Ok((0..n).into_par_iter().map(|i| generate_one(cfg, i)).collect())
}

/// Gold rewrite of `selection` (0-based document sentence indices, in
/// summary order).
pub fn rewrite(doc: &Document, selection: &[usize]) -> Result<Vec<Sentence>> {
    if let Some(&index) = selection.iter().find(|&&i| i >= doc.len()) {
        return Err(Error::IndexOutOfRange { index, len: doc.len() });
    }
    let subject = |i: usize| doc.sentences[i].tokens()[0].as_str();
    let lead = selection.first().map(|&i| subject(i));

    selection
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let antecedent = (0..i).rev().find(|p| !selection.contains(p)).map(subject);
            let mut out = Vec::new();
            for (pos, tok) in doc.sentences[i].tokens().iter().enumerate() {
                let class = word_class(tok);
                let word = match class {
                    WordClass::Noise => continue,
                    WordClass::Ref => antecedent.unwrap_or(REF),
                    WordClass::Entity if pos == 0 && j > 0 && Some(tok.as_str()) == lead => PRON,
                    _ => tok.as_str(),
                };
                out.push(word.to_owned());
            }
            if out.is_empty() {
                out.push(subject(i).to_owned());
            }
            Sentence::new(out)
        })
        .collect()
}
