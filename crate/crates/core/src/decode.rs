//! Constrained beam search over extended sequences.
//!
//! The search itself is generic: a [`StepScorer`] supplies next-token
//! log-probabilities and a [`Grammar`] decides which tokens may follow a
//! prefix. The three decoding modes are grammars over the model vocabulary:
//!
//! * external: the identifier after the start and after every `</S>` is forced
//!   to the next position `<S_1>`, `<S_2>`, ...; decoding ends once every
//!   extracted sentence has been rewritten;
//! * joint: at sentence boundaries the model picks any document identifier or
//!   `</SUM>`; identifiers are masked everywhere else;
//! * two-stage: identifiers first, a `</S>` separator, then one rewritten
//!   sentence per selection in that order, then `</SUM>`.
//!
//! Length bounds are enforced through the grammar: a token is only allowed
//! if the hypothesis can still finish within the maximum length afterwards,
//! and the finishing token is masked until the minimum length.

use serde::{Deserialize, Serialize};

use crate::align::{build_external, natural_source, OracleAlignment, TagTracker, TaggedSequence};
use crate::error::{Error, Result};
use crate::model::{EncoderMemory, RewriterModel, Scalar};
use crate::textcore::{Document, TokenId, TokenKind, Vocab, SENT_END_ID, SUMMARY_END_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    External,
    Joint,
    #[serde(rename = "joint_two_stage")]
    TwoStage,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "external" => Ok(DecodeMode::External),
            "joint" => Ok(DecodeMode::Joint),
            "joint_two_stage" | "two_stage" => Ok(DecodeMode::TwoStage),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl From<crate::model::TrainMode> for DecodeMode {
    fn from(m: crate::model::TrainMode) -> Self {
        use crate::model::TrainMode;
        match m {
            TrainMode::External => DecodeMode::External,
            TrainMode::Joint => DecodeMode::Joint,
            TrainMode::TwoStage => DecodeMode::TwoStage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Bounds on the number of generated tokens, identifiers and `</S>`
    /// included.
    pub min_len: usize,
    pub max_len: usize,
    pub alpha: f64,
    pub block_trigrams: bool,
    pub mode: DecodeMode,
    /// Joint modes: never select the same sentence twice.
    pub dedup: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            min_len: 50,
            max_len: 200,
            alpha: 0.95,
            block_trigrams: true,
            mode: DecodeMode::External,
            dedup: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 0 < min_len <= max_len".into()));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// `((5 + length) / 6)^alpha`.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// Whether any trigram of `words` occurs twice.
pub fn has_repeated_trigram<T: Eq + std::hash::Hash>(words: &[T]) -> bool {
    let mut seen = std::collections::HashSet::new();
    words.windows(3).any(|w| !seen.insert(w))
}

/// [`has_repeated_trigram`] over word tokens, skipping identifiers, `</S>`
/// and `</SUM>`.
pub fn has_repeated_word_trigram(tokens: &[TokenId], vocab: &Vocab) -> bool {
    let words: Vec<TokenId> = tokens.iter().copied().filter(|&t| vocab.is_word(t)).collect();
    has_repeated_trigram(&words)
}

/// Next-token log-probabilities given a generated prefix.
pub trait StepScorer {
    fn log_probs(&self, prefix: &TaggedSequence) -> Vec<f64>;
}

/// A finite-state constraint on generated sequences.
pub trait Grammar {
    type State: Clone + std::fmt::Debug;

    fn start(&self) -> Self::State;
    fn kind(&self, token: TokenId) -> TokenKind;
    /// Counts toward trigram blocking.
    fn is_word(&self, token: TokenId) -> bool;
    /// Tokens the grammar permits after `state`, ignoring length bounds.
    fn allowed(&self, state: &Self::State) -> Vec<TokenId>;
    fn advance(&self, state: &Self::State, token: TokenId) -> Self::State;
    fn is_final(&self, state: &Self::State) -> bool;
    /// Fewest further tokens that reach a final state.
    fn min_to_finish(&self, state: &Self::State) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<S = ModeState> {
    pub seq: TaggedSequence,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
    pub state: S,
}

impl<S> Hypothesis<S> {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn normalized(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.len().max(1), alpha)
    }
}

impl Hypothesis<ModeState> {
    pub fn sentences(&self) -> usize {
        self.state.done
    }

    /// Document sentences picked by the decoder (joint modes).
    pub fn selected(&self) -> &[usize] {
        &self.state.selected
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<S> {
    pub best: Hypothesis<S>,
    /// Trigram blocking emptied the beam and the search was rerun without it.
    pub fallback_used: bool,
}

struct Candidate {
    score: f64,
    parent: usize,
    token: TokenId,
}

/// Words that would complete an already seen trigram when appended.
fn blocked_words<G: Grammar>(g: &G, tokens: &[TokenId]) -> Vec<TokenId> {
    let words: Vec<TokenId> = tokens.iter().copied().filter(|&t| g.is_word(t)).collect();
    let Some(tail) = words.len().checked_sub(2).map(|i| &words[i..]) else {
        return Vec::new();
    };
    words.windows(3).filter(|w| w[..2] == *tail).map(|w| w[2]).collect()
}

fn run<G: Grammar>(
    scorer: &impl StepScorer,
    grammar: &G,
    cfg: &DecodeConfig,
    block: bool,
) -> Option<Hypothesis<G::State>> {
    let mut live = vec![Hypothesis {
        seq: TaggedSequence::default(),
        log_prob: 0.0,
        finished: false,
        state: grammar.start(),
    }];
    let mut trackers = vec![TagTracker::new()];
    let mut finished: Vec<Hypothesis<G::State>> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut cands = Vec::new();
        for (p, h) in live.iter().enumerate() {
            let len = h.len() + 1;
            let mut lp: Option<Vec<f64>> = None;
            let blocked = if block {
                blocked_words(grammar, &h.seq.tokens)
            } else {
                Vec::new()
            };
            for tok in grammar.allowed(&h.state) {
                let next = grammar.advance(&h.state, tok);
                if len + grammar.min_to_finish(&next) > cfg.max_len {
                    continue;
                }
                if grammar.is_final(&next) && len < cfg.min_len {
                    continue;
                }
                if blocked.contains(&tok) {
                    continue;
                }
                let lp = lp.get_or_insert_with(|| scorer.log_probs(&h.seq));
                let step = lp[tok as usize];
                if step == f64::NEG_INFINITY {
                    continue;
                }
                cands.push(Candidate {
                    score: h.log_prob + step,
                    parent: p,
                    token: tok,
                });
            }
        }
        if cands.is_empty() {
            break;
        }
        cands.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        cands.truncate(cfg.beam);

        let mut next_live = Vec::with_capacity(cfg.beam);
        let mut next_trackers = Vec::with_capacity(cfg.beam);
        for c in cands {
            let parent = &live[c.parent];
            let mut tracker = trackers[c.parent];
            let mut seq = parent.seq.clone();
            seq.tags.push(tracker.push(grammar.kind(c.token)));
            seq.tokens.push(c.token);
            let state = grammar.advance(&parent.state, c.token);
            let done = grammar.is_final(&state);
            let h = Hypothesis {
                seq,
                log_prob: c.score,
                finished: done,
                state,
            };
            if done {
                finished.push(h);
            } else {
                next_live.push(h);
                next_trackers.push(tracker);
            }
        }
        live = next_live;
        trackers = next_trackers;
        if finished.len() >= cfg.beam || live.is_empty() {
            break;
        }
    }

    finished
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.normalized(cfg.alpha)
                .total_cmp(&b.normalized(cfg.alpha))
                .then(j.cmp(i))
        })
        .map(|(_, h)| h)
}

/// Highest length-normalized finished hypothesis. When trigram blocking
/// leaves nothing to finish, the search is repeated without blocking and
/// the outcome is flagged.
pub fn search<G: Grammar>(
    scorer: &impl StepScorer,
    grammar: &G,
    cfg: &DecodeConfig,
) -> Result<SearchOutcome<G::State>> {
    cfg.validate()?;
    if let Some(best) = run(scorer, grammar, cfg, cfg.block_trigrams) {
        return Ok(SearchOutcome {
            best,
            fallback_used: false,
        });
    }
    if cfg.block_trigrams {
        if let Some(best) = run(scorer, grammar, cfg, false) {
            return Ok(SearchOutcome {
                best,
                fallback_used: true,
            });
        }
    }
    Err(Error::Invalid(format!(
        "no hypothesis finishes within {}..={} tokens",
        cfg.min_len, cfg.max_len
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Before the first identifier of the next sentence (or the end).
    Boundary,
    /// Right after an identifier; a word must follow.
    Opened,
    /// Inside a sentence with at least one word.
    Words,
    /// Two-stage selection prefix, before its `</S>`.
    Selecting,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeState {
    pub phase: Phase,
    /// Completed sentences.
    pub done: usize,
    /// Document sentences selected so far, 0-based.
    pub selected: Vec<usize>,
}

/// Grammar of one decoding mode over a model vocabulary.
#[derive(Debug, Clone)]
pub struct ModeGrammar<'v> {
    vocab: &'v Vocab,
    mode: DecodeMode,
    /// External: sentences to rewrite. Joint modes: document sentences.
    count: usize,
    dedup: bool,
    words: Vec<TokenId>,
}

impl<'v> ModeGrammar<'v> {
    pub fn new(vocab: &'v Vocab, mode: DecodeMode, count: usize, dedup: bool) -> Result<Self> {
        if count == 0 {
            return Err(Error::Invalid("nothing to decode".into()));
        }
        if count > vocab.max_identifier() {
            return Err(Error::TagOverflow {
                tag: count as u32,
                max: vocab.max_identifier(),
            });
        }
        let words = (vocab.first_word_id()..vocab.len() as TokenId).collect();
        Ok(ModeGrammar {
            vocab,
            mode,
            count,
            dedup,
            words,
        })
    }

    fn selectable(&self, state: &ModeState) -> Vec<TokenId> {
        (0..self.count)
            .filter(|i| !(self.dedup && state.selected.contains(i)))
            .map(|i| self.vocab.identifier(i + 1))
            .collect()
    }

    /// Sentences the rest of the sequence must still open.
    fn planned(&self, state: &ModeState) -> usize {
        match self.mode {
            DecodeMode::External => self.count,
            DecodeMode::TwoStage => state.selected.len(),
            DecodeMode::Joint => state.done + usize::from(state.phase != Phase::Boundary),
        }
    }
}

impl Grammar for ModeGrammar<'_> {
    type State = ModeState;

    fn start(&self) -> ModeState {
        let phase = match self.mode {
            DecodeMode::TwoStage => Phase::Selecting,
            _ => Phase::Boundary,
        };
        ModeState {
            phase,
            done: 0,
            selected: Vec::new(),
        }
    }

    fn kind(&self, token: TokenId) -> TokenKind {
        self.vocab.kind(token)
    }

    fn is_word(&self, token: TokenId) -> bool {
        self.vocab.is_word(token)
    }

    fn allowed(&self, s: &ModeState) -> Vec<TokenId> {
        match (self.mode, s.phase) {
            (_, Phase::Done) => Vec::new(),
            (_, Phase::Opened) => self.words.clone(),
            (_, Phase::Words) => {
                let mut v = self.words.clone();
                v.push(SENT_END_ID);
                v
            }
            (DecodeMode::External, Phase::Boundary) => vec![self.vocab.identifier(s.done + 1)],
            (DecodeMode::Joint, Phase::Boundary) => {
                let mut v = self.selectable(s);
                if s.done > 0 {
                    v.push(SUMMARY_END_ID);
                }
                v
            }
            (DecodeMode::TwoStage, Phase::Boundary) => match s.selected.get(s.done) {
                Some(&i) => vec![self.vocab.identifier(i + 1)],
                None => vec![SUMMARY_END_ID],
            },
            (_, Phase::Selecting) => {
                let mut v = self.selectable(s);
                if !s.selected.is_empty() {
                    v.push(SENT_END_ID);
                }
                v
            }
        }
    }

    fn advance(&self, s: &ModeState, token: TokenId) -> ModeState {
        let mut next = s.clone();
        match s.phase {
            Phase::Selecting => match self.vocab.identifier_index(token) {
                Some(k) => next.selected.push(k - 1),
                None => next.phase = Phase::Boundary,
            },
            Phase::Boundary if token == SUMMARY_END_ID => next.phase = Phase::Done,
            Phase::Boundary => {
                if self.mode == DecodeMode::Joint {
                    next.selected
                        .push(self.vocab.identifier_index(token).expect("identifier") - 1);
                }
                next.phase = Phase::Opened;
            }
            Phase::Opened => next.phase = Phase::Words,
            Phase::Words if token == SENT_END_ID => {
                next.done += 1;
                next.phase = if self.mode == DecodeMode::External && next.done == self.count {
                    Phase::Done
                } else {
                    Phase::Boundary
                };
            }
            Phase::Words | Phase::Done => {}
        }
        next
    }

    fn is_final(&self, s: &ModeState) -> bool {
        s.phase == Phase::Done
    }

    fn min_to_finish(&self, s: &ModeState) -> usize {
        let end = usize::from(self.mode != DecodeMode::External);
        match s.phase {
            Phase::Done => 0,
            Phase::Selecting if s.selected.is_empty() => 1 + 1 + 3 + end,
            Phase::Selecting => 1 + 3 * s.selected.len() + end,
            Phase::Boundary => {
                let rest = self.planned(s).saturating_sub(s.done);
                // joint summaries need at least one sentence
                let rest = if self.mode == DecodeMode::Joint && s.done == 0 {
                    1
                } else {
                    rest
                };
                3 * rest + end
            }
            Phase::Opened | Phase::Words => {
                let open = if s.phase == Phase::Opened { 2 } else { 1 };
                let later = self.planned(s).saturating_sub(s.done + 1);
                open + 3 * later + end
            }
        }
    }
}

/// Step scorer backed by a model and an encoded source.
pub struct ModelScorer<'a, F> {
    model: &'a RewriterModel<F>,
    memory: EncoderMemory<F>,
}

impl<'a, F: Scalar> ModelScorer<'a, F> {
    pub fn new(model: &'a RewriterModel<F>, source: &TaggedSequence) -> Result<Self> {
        Ok(ModelScorer {
            model,
            memory: model.memory(source)?,
        })
    }
}

impl<F: Scalar> StepScorer for ModelScorer<'_, F> {
    fn log_probs(&self, prefix: &TaggedSequence) -> Vec<f64> {
        self.model.decode_step_unchecked(&self.memory, prefix)
    }
}

/// Decodes `source` (X′ built for `cfg.mode`). `count` is the number of
/// extracted sentences in external mode and of document sentences otherwise.
pub fn beam_search<F: Scalar>(
    model: &RewriterModel<F>,
    vocab: &Vocab,
    source: &TaggedSequence,
    count: usize,
    cfg: &DecodeConfig,
) -> Result<SearchOutcome<ModeState>> {
    let grammar = ModeGrammar::new(vocab, cfg.mode, count, cfg.dedup)?;
    let scorer = ModelScorer::new(model, source)?;
    search(&scorer, &grammar, cfg)
}

/// Rewritten sentences with the document sentence each one came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedSummary {
    pub selected: Vec<usize>,
    pub sentences: Vec<Vec<String>>,
    pub tokens: Vec<String>,
    pub fallback_used: bool,
}

/// Splits a decoded extended sequence into `(identifier index, words)`
/// groups; a two-stage selection prefix is skipped.
pub fn split_sentences<S: AsRef<str>>(tokens: &[S]) -> Vec<(Option<usize>, Vec<String>)> {
    let mut toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let sep = toks.iter().position(|t| *t == crate::textcore::SENT_END);
    if let Some(sep) = sep {
        if sep > 0
            && toks[..sep]
                .iter()
                .all(|t| crate::textcore::parse_identifier(t).is_some())
        {
            toks.drain(..=sep);
        }
    }
    let mut out = Vec::new();
    let mut current: Option<(Option<usize>, Vec<String>)> = None;
    for t in toks {
        match TokenKind::of_str(t) {
            TokenKind::Identifier(k) => {
                out.extend(current.take());
                current = Some((k.checked_sub(1), Vec::new()));
            }
            TokenKind::SentEnd => out.extend(current.take()),
            TokenKind::Other if t == crate::textcore::SUMMARY_END => break,
            TokenKind::Other => current.get_or_insert((None, Vec::new())).1.push(t.to_owned()),
        }
    }
    out.extend(current);
    out
}

/// Rewrites `doc`. External mode needs the extraction to rewrite; the joint
/// modes select on their own.
pub fn summarize<F: Scalar>(
    model: &RewriterModel<F>,
    vocab: &Vocab,
    doc: &Document,
    alignment: Option<&OracleAlignment>,
    cfg: &DecodeConfig,
) -> Result<DecodedSummary> {
    let (source, count) = match cfg.mode {
        DecodeMode::External => {
            let alignment =
                alignment.ok_or_else(|| Error::Config("external mode needs an extraction to rewrite".into()))?;
            (build_external(doc, alignment, vocab)?.source, alignment.len())
        }
        _ => (natural_source(doc, vocab)?, doc.len()),
    };
    let outcome = beam_search(model, vocab, &source, count, cfg)?;
    let tokens = vocab.decode(&outcome.best.seq.tokens);
    let groups = split_sentences(&tokens);
    let selected = match cfg.mode {
        DecodeMode::External => alignment.map(|a| a.indices().to_vec()).unwrap_or_default(),
        _ => outcome.best.selected().to_vec(),
    };
    Ok(DecodedSummary {
        selected,
        sentences: groups.into_iter().map(|(_, w)| w).collect(),
        tokens,
        fallback_used: outcome.fallback_used,
    })
}

/// One line of decoder output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    pub summary: Vec<Vec<String>>,
    pub selected: Vec<usize>,
    pub fallback_used: bool,
}

impl SummaryRecord {
    pub fn new(id: impl Into<String>, s: DecodedSummary) -> Self {
        SummaryRecord {
            id: id.into(),
            summary: s.sentences,
            selected: s.selected,
            fallback_used: s.fallback_used,
        }
    }
}
