//! Oracle labeling and group-tag alignments.
//!
//! A group tag is an integer attached to every token of an extended sequence.
//! Sentence identifiers `<S_k>` open a group, `</S>` closes it, and tokens
//! outside any group carry the background tag 0. Document and summary tokens
//! that share a tag are aligned: the summary sentence tagged `k` rewrites the
//! document sentence tagged `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rouge::match_score;
use crate::textcore::{Document, Sentence, Tag, TokenId, TokenKind, Vocab, SENT_END_ID, SUMMARY_END_ID};

/// Document sentence index (0-based) for every summary sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OracleAlignment(Vec<usize>);

impl OracleAlignment {
    pub fn new(indices: Vec<usize>) -> Self {
        OracleAlignment(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, doc_len: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= doc_len) {
            Some(&index) => Err(Error::IndexOutOfRange { index, len: doc_len }),
            None => Ok(()),
        }
    }

    /// Leading `m` sentences, truncated to the document length.
    pub fn lead(m: usize, doc_len: usize) -> Self {
        OracleAlignment((0..m.min(doc_len)).collect())
    }
}

/// Incremental group-tag state. Feeding tokens one at a time yields the same
/// tags as [`group_tag`] over the whole sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TagTracker {
    current: Tag,
}

impl TagTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn replay(kinds: impl IntoIterator<Item = TokenKind>) -> Self {
        let mut t = Self::new();
        for k in kinds {
            t.push(k);
        }
        t
    }

    /// Tag the given token would receive next, without consuming it.
    pub fn peek(&self, kind: TokenKind) -> Tag {
        match kind {
            TokenKind::Identifier(k) => k as Tag,
            _ => self.current,
        }
    }

    pub fn push(&mut self, kind: TokenKind) -> Tag {
        let tag = self.peek(kind);
        self.current = match kind {
            TokenKind::SentEnd => 0,
            _ => tag,
        };
        tag
    }

    /// Tag carried into the next position.
    pub fn current(&self) -> Tag {
        self.current
    }
}

pub fn group_tag(kinds: &[TokenKind]) -> Vec<Tag> {
    let mut tracker = TagTracker::new();
    kinds.iter().map(|&k| tracker.push(k)).collect()
}

/// [`group_tag`] over spelled-out tokens.
pub fn group_tag_str<S: AsRef<str>>(tokens: &[S]) -> Vec<Tag> {
    let kinds: Vec<TokenKind> = tokens.iter().map(|t| TokenKind::of_str(t.as_ref())).collect();
    group_tag(&kinds)
}

/// Tag of `candidate` appended to `prefix`.
pub fn tag_of_next(prefix: &[TokenKind], candidate: TokenKind) -> Tag {
    TagTracker::replay(prefix.iter().copied()).peek(candidate)
}

/// Scores closer than this count as tied. Equal rational scores can differ in
/// the last bit once summed in floating point.
const TIE_EPS: f64 = 1e-12;

/// For each summary sentence independently, the document sentence with the
/// highest mean ROUGE-1/2/L recall; ties go to the lowest index.
pub fn oracle_extract(doc: &Document, summary: &[Sentence]) -> Result<OracleAlignment> {
    let mut indices = Vec::with_capacity(summary.len());
    for reference in summary {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, cand) in doc.sentences.iter().enumerate() {
            let s = match_score(cand.tokens(), reference.tokens())?;
            if s > best.1 + TIE_EPS {
                best = (i, s);
            }
        }
        indices.push(best.0);
    }
    Ok(OracleAlignment(indices))
}

/// Parallel token ids and group tags.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TaggedSequence {
    pub tokens: Vec<TokenId>,
    pub tags: Vec<Tag>,
}

impl TaggedSequence {
    pub fn from_tokens(tokens: Vec<TokenId>, vocab: &Vocab) -> Self {
        let kinds: Vec<TokenKind> = tokens.iter().map(|&t| vocab.kind(t)).collect();
        let tags = group_tag(&kinds);
        TaggedSequence { tokens, tags }
    }

    /// Accepts explicit tags, verifying them against the tokens.
    pub fn with_tags(tokens: Vec<TokenId>, tags: Vec<Tag>, vocab: &Vocab) -> Result<Self> {
        let seq = TaggedSequence { tokens, tags };
        seq.validate(vocab)?;
        Ok(seq)
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.tokens.len() != self.tags.len() {
            return Err(Error::InconsistentTags);
        }
        let mut tracker = TagTracker::new();
        for (&tok, &tag) in self.tokens.iter().zip(&self.tags) {
            if tracker.push(vocab.kind(tok)) != tag {
                return Err(Error::InconsistentTags);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: TokenId, vocab: &Vocab) {
        let tag = self.tracker().peek(vocab.kind(token));
        self.tags.push(tag);
        self.tokens.push(token);
    }

    /// Tracker state after the last token.
    pub fn tracker(&self) -> TagTracker {
        let current = match (self.tokens.last(), self.tags.last()) {
            (Some(&SENT_END_ID), _) | (None, _) => 0,
            (Some(_), Some(&tag)) => tag,
            (Some(_), None) => 0,
        };
        TagTracker { current }
    }

    /// Drops identifiers, `</S>` and `</SUM>`, returning the word ids.
    pub fn words(&self, vocab: &Vocab) -> Vec<TokenId> {
        self.tokens.iter().copied().filter(|&t| vocab.is_word(t)).collect()
    }
}

/// One document sentence that an external extraction selects more than once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DuplicateSelection {
    /// 1-based summary position whose identifier was not written into X′.
    pub position: usize,
    pub sentence: usize,
}

/// Encoder input for a rewriter fed by an external extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalSource {
    /// Document with `<S_{j+1}>` on the sentence extracted for summary
    /// position `j` and `<S_0>` on every other sentence.
    pub source: TaggedSequence,
    /// Decoder skeleton `<S_1> </S> <S_2> </S> ...`, one group per summary
    /// sentence.
    pub template: TaggedSequence,
    pub duplicates: Vec<DuplicateSelection>,
}

impl ExternalSource {
    pub fn sentences(&self) -> usize {
        self.template.tokens.iter().filter(|&&t| t == SENT_END_ID).count()
    }
}

fn check_tag_budget(n: usize, vocab: &Vocab) -> Result<()> {
    if n > vocab.max_identifier() {
        return Err(Error::TagOverflow {
            tag: n as Tag,
            max: vocab.max_identifier(),
        });
    }
    Ok(())
}

fn push_sentence(out: &mut Vec<TokenId>, ident: TokenId, sentence: &Sentence, vocab: &Vocab) {
    out.push(ident);
    out.extend(sentence.tokens().iter().map(|t| vocab.id(t)));
    out.push(SENT_END_ID);
}

pub fn build_external(doc: &Document, alignment: &OracleAlignment, vocab: &Vocab) -> Result<ExternalSource> {
    alignment.check(doc.len())?;
    check_tag_budget(alignment.len(), vocab)?;
    let mut label = vec![0usize; doc.len()];
    let mut duplicates = Vec::new();
    for (j, &i) in alignment.indices().iter().enumerate() {
        if label[i] == 0 {
            label[i] = j + 1;
        } else {
            duplicates.push(DuplicateSelection {
                position: j + 1,
                sentence: i,
            });
        }
    }
    let mut tokens = Vec::new();
    for (sent, &k) in doc.sentences.iter().zip(&label) {
        push_sentence(&mut tokens, vocab.identifier(k), sent, vocab);
    }
    let mut skeleton = Vec::with_capacity(2 * alignment.len());
    for j in 1..=alignment.len() {
        skeleton.push(vocab.identifier(j));
        skeleton.push(SENT_END_ID);
    }
    Ok(ExternalSource {
        source: TaggedSequence::from_tokens(tokens, vocab),
        template: TaggedSequence::from_tokens(skeleton, vocab),
        duplicates,
    })
}

/// Decoder target for external mode: `<S_1> y1 </S> <S_2> y2 </S> ...`.
pub fn external_target(summary: &[Sentence], vocab: &Vocab) -> Result<TaggedSequence> {
    check_tag_budget(summary.len(), vocab)?;
    let mut tokens = Vec::new();
    for (j, s) in summary.iter().enumerate() {
        push_sentence(&mut tokens, vocab.identifier(j + 1), s, vocab);
    }
    Ok(TaggedSequence::from_tokens(tokens, vocab))
}

/// Document with natural identifiers `<S_1>` ... `<S_n>`.
pub fn natural_source(doc: &Document, vocab: &Vocab) -> Result<TaggedSequence> {
    check_tag_budget(doc.len(), vocab)?;
    let mut tokens = Vec::new();
    for (i, s) in doc.sentences.iter().enumerate() {
        push_sentence(&mut tokens, vocab.identifier(i + 1), s, vocab);
    }
    Ok(TaggedSequence::from_tokens(tokens, vocab))
}

fn check_joint(doc: &Document, alignment: &OracleAlignment, summary: &[Sentence]) -> Result<()> {
    alignment.check(doc.len())?;
    if alignment.len() != summary.len() {
        return Err(Error::Invalid(format!(
            "alignment has {} entries for {} summary sentences",
            alignment.len(),
            summary.len()
        )));
    }
    Ok(())
}

/// Joint selection and rewriting: X′ carries natural identifiers and summary
/// sentence `j` opens with the identifier of its source sentence.
pub fn build_joint(
    doc: &Document,
    alignment: &OracleAlignment,
    summary: &[Sentence],
    vocab: &Vocab,
) -> Result<(TaggedSequence, TaggedSequence)> {
    check_joint(doc, alignment, summary)?;
    let source = natural_source(doc, vocab)?;
    let mut tokens = Vec::new();
    for (s, &i) in summary.iter().zip(alignment.indices()) {
        push_sentence(&mut tokens, vocab.identifier(i + 1), s, vocab);
    }
    Ok((source, TaggedSequence::from_tokens(tokens, vocab)))
}

/// Two-stage variant of [`build_joint`]: every selection identifier comes
/// first, then `</S>`, then the rewritten sentences.
pub fn build_two_stage(
    doc: &Document,
    alignment: &OracleAlignment,
    summary: &[Sentence],
    vocab: &Vocab,
) -> Result<(TaggedSequence, TaggedSequence)> {
    let (source, body) = build_joint(doc, alignment, summary, vocab)?;
    let mut tokens: Vec<TokenId> = alignment.indices().iter().map(|&i| vocab.identifier(i + 1)).collect();
    tokens.push(SENT_END_ID);
    tokens.extend(body.tokens);
    Ok((source, TaggedSequence::from_tokens(tokens, vocab)))
}

/// Appends the end-of-summary token used by the free-running decoding modes.
pub fn terminated(mut target: TaggedSequence, vocab: &Vocab) -> TaggedSequence {
    target.push(SUMMARY_END_ID, vocab);
    target
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcore::SummExample;

    fn sent(s: &str) -> Sentence {
        Sentence::parse(s).unwrap()
    }

    fn doc(n: usize, words_per: usize) -> Document {
        let sents = (1..=n)
            .map(|i| {
                sent(
                    &(1..=words_per)
                        .map(|w| format!("w{i}{w}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                )
            })
            .collect();
        Document::new("d", sents).unwrap()
    }

    fn vocab_for(d: &Document, summary: &[Sentence]) -> Vocab {
        let ex = SummExample::new(d.clone(), summary.to_vec(), None).unwrap();
        Vocab::build([&ex], 1, 16).unwrap()
    }

    #[test]
    fn group_tags_of_mixed_sequence() {
        let t = group_tag_str(&"<S_3> w31 w32 </S> <S_5> w52 w54 </S>".split(' ').collect::<Vec<_>>());
        assert_eq!(t, vec![3, 3, 3, 3, 5, 5, 5, 5]);
        assert!(group_tag(&[]).is_empty());
        let t = group_tag_str(&"<S_2> a </S> b <S_1> c".split(' ').collect::<Vec<_>>());
        assert_eq!(t, vec![2, 2, 2, 0, 1, 1]);
    }

    #[test]
    fn tag_of_next_traces() {
        use TokenKind::*;
        assert_eq!(tag_of_next(&[Identifier(2), Other, SentEnd], Identifier(4)), 4);
        assert_eq!(tag_of_next(&[Identifier(2), Other, SentEnd], Other), 0);
        assert_eq!(tag_of_next(&[Identifier(7), Other], Other), 7);
        assert_eq!(tag_of_next(&[Identifier(7), Other], SentEnd), 7);
    }

    #[test]
    fn oracle_picks_identical_sentence() {
        let d = Document::new("d", vec![sent("a b"), sent("c d"), sent("e f g")]).unwrap();
        let a = oracle_extract(&d, &[sent("e f g")]).unwrap();
        assert_eq!(a.indices(), &[2]);
        let a = oracle_extract(&d, &[sent("c d"), sent("c d")]).unwrap();
        assert_eq!(a.indices(), &[1, 1]);
    }

    #[test]
    fn oracle_ties_go_to_lowest_index() {
        let d = Document::new("d", vec![sent("x"), sent("a b"), sent("a b")]).unwrap();
        assert_eq!(oracle_extract(&d, &[sent("a b")]).unwrap().indices(), &[1]);
    }

    #[test]
    fn external_tags_follow_alignment() {
        let d = doc(6, 2);
        let v = vocab_for(&d, &[sent("w11")]);
        let ext = build_external(&d, &OracleAlignment::new(vec![2, 4, 1]), &v).unwrap();
        // each sentence is identifier + 2 words + </S>
        let per_sentence: Vec<u32> = ext.source.tags.chunks(4).map(|c| c[0]).collect();
        assert_eq!(per_sentence, vec![0, 3, 1, 0, 2, 0]);
        for c in ext.source.tags.chunks(4) {
            assert!(c.iter().all(|&t| t == c[0]));
        }
        assert_eq!(ext.sentences(), 3);
        assert!(ext.duplicates.is_empty());
    }

    #[test]
    fn external_single_sentence() {
        let d = doc(1, 3);
        let v = vocab_for(&d, &[sent("w11")]);
        let ext = build_external(&d, &OracleAlignment::new(vec![0]), &v).unwrap();
        assert!(ext.source.tags.iter().all(|&t| t == 1));
    }

    #[test]
    fn external_duplicate_keeps_lowest_position() {
        let d = doc(2, 2);
        let v = vocab_for(&d, &[sent("w11")]);
        let ext = build_external(&d, &OracleAlignment::new(vec![0, 0]), &v).unwrap();
        assert!(ext.source.tags[..4].iter().all(|&t| t == 1));
        assert!(ext.source.tags[4..].iter().all(|&t| t == 0));
        assert_eq!(
            ext.duplicates,
            vec![DuplicateSelection {
                position: 2,
                sentence: 0
            }]
        );
    }

    #[test]
    fn external_rejects_out_of_range() {
        let d = doc(3, 1);
        let v = vocab_for(&d, &[sent("w11")]);
        assert!(matches!(
            build_external(&d, &OracleAlignment::new(vec![3]), &v),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn joint_summary_tags_match_figure_configuration() {
        let d = doc(6, 2);
        let summary = vec![sent("a b"), sent("c d"), sent("e f")];
        let v = vocab_for(&d, &summary);
        let (x, y) = build_joint(&d, &OracleAlignment::new(vec![2, 4, 1]), &summary, &v).unwrap();
        assert_eq!(y.tags, vec![3, 3, 3, 3, 5, 5, 5, 5, 2, 2, 2, 2]);
        let natural: Vec<u32> = x.tags.chunks(4).map(|c| c[0]).collect();
        assert_eq!(natural, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn joint_single_sentence() {
        let d = doc(1, 2);
        let summary = vec![sent("w11")];
        let v = vocab_for(&d, &summary);
        let (x, y) = build_joint(&d, &OracleAlignment::new(vec![0]), &summary, &v).unwrap();
        assert!(x.tags.iter().all(|&t| t == 1));
        assert!(y.tags.iter().all(|&t| t == 1));
    }

    #[test]
    fn two_stage_puts_selection_first() {
        let d = doc(4, 1);
        let summary = vec![sent("a"), sent("b")];
        let v = vocab_for(&d, &summary);
        let (_, y) = build_two_stage(&d, &OracleAlignment::new(vec![3, 1]), &summary, &v).unwrap();
        let spelled = v.decode(&y.tokens).join(" ");
        assert_eq!(spelled, "<S_4> <S_2> </S> <S_4> a </S> <S_2> b </S>");
        assert_eq!(y.tags, vec![4, 2, 2, 4, 4, 4, 2, 2, 2]);
    }

    #[test]
    fn push_keeps_tags_consistent() {
        let d = doc(3, 2);
        let v = vocab_for(&d, &[sent("w11")]);
        let x = natural_source(&d, &v).unwrap();
        let mut grown = TaggedSequence::default();
        for &t in &x.tokens {
            grown.push(t, &v);
        }
        assert_eq!(grown, x);
        assert!(x.validate(&v).is_ok());
        let mut bad = x.clone();
        bad.tags[1] = 9;
        assert!(matches!(bad.validate(&v), Err(Error::InconsistentTags)));
    }
}
