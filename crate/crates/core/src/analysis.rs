//! Diagnostics over decoded summaries: edit categories, extraction
//! distributions, lengths, trigram-blocking sensitivity and the tag-swap
//! coherence probe.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::align::{build_external, OracleAlignment, TaggedSequence};
use crate::decode::{beam_search, split_sentences, summarize, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::model::{RewriterModel, Scalar};
use crate::rouge::{rouge_summary, SummaryRouge};
use crate::synth::PRON;
use crate::textcore::{is_reserved, SummExample, Tag, TokenKind, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EditCategory {
    Rewritten,
    Compressed,
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp<'a, T> {
    Keep(&'a T),
    Delete(&'a T),
    Insert(&'a T),
    Modify(&'a T, &'a T),
}

/// Minimal edit script from `from` to `to` along a longest common
/// subsequence. Adjacent delete/insert pairs collapse into `Modify`.
pub fn edit_script<'a, T: Eq>(from: &'a [T], to: &'a [T]) -> Vec<EditOp<'a, T>> {
    let (n, m) = (from.len(), to.len());
    // suffix table: lcs[i][j] = LCS of from[i..], to[j..]
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if from[i] == to[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut raw = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && from[i] == to[j] {
            raw.push(EditOp::Keep(&from[i]));
            i += 1;
            j += 1;
        } else if j == m || (i < n && lcs[i + 1][j] >= lcs[i][j + 1]) {
            raw.push(EditOp::Delete(&from[i]));
            i += 1;
        } else {
            raw.push(EditOp::Insert(&to[j]));
            j += 1;
        }
    }
    let mut out: Vec<EditOp<'a, T>> = Vec::with_capacity(raw.len());
    for op in raw {
        if let (Some(EditOp::Delete(d)), EditOp::Insert(x)) = (out.last(), &op) {
            let modify = EditOp::Modify(*d, *x);
            *out.last_mut().unwrap() = modify;
        } else {
            out.push(op);
        }
    }
    out
}

/// Any insertion or modification makes a rewrite; deletions alone a
/// compression.
pub fn categorize_edit<T: Eq>(extracted: &[T], rewritten: &[T]) -> EditCategory {
    let script = edit_script(extracted, rewritten);
    if script
        .iter()
        .any(|op| matches!(op, EditOp::Insert(_) | EditOp::Modify(..)))
    {
        EditCategory::Rewritten
    } else if script.iter().any(|op| matches!(op, EditOp::Delete(_))) {
        EditCategory::Compressed
    } else {
        EditCategory::Unchanged
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CategoryShares {
    pub rewritten: f64,
    pub compressed: f64,
    pub unchanged: f64,
    pub pairs: usize,
}

pub fn category_shares<'a, T: Eq + 'a>(pairs: impl IntoIterator<Item = (&'a [T], &'a [T])>) -> CategoryShares {
    let mut counts = [0usize; 3];
    for (a, b) in pairs {
        counts[categorize_edit(a, b) as usize] += 1;
    }
    let total: usize = counts.iter().sum();
    let share = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    CategoryShares {
        rewritten: share(counts[0]),
        compressed: share(counts[1]),
        unchanged: share(counts[2]),
        pairs: total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionHistogram {
    /// Share of selections per document position.
    pub all: Vec<f64>,
    /// Share of duplicate selections per position: a position selected two
    /// or more times in one example counts once.
    pub duplicates: Vec<f64>,
    pub selections: usize,
    pub duplicate_count: usize,
}

fn normalized(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

pub fn extraction_histogram<'a>(
    alignments: impl IntoIterator<Item = &'a [usize]>,
    n_doc_sentences: usize,
) -> Result<ExtractionHistogram> {
    let mut all = vec![0usize; n_doc_sentences];
    let mut dups = vec![0usize; n_doc_sentences];
    for a in alignments {
        let mut seen = vec![0usize; n_doc_sentences];
        for &i in a {
            if i >= n_doc_sentences {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: n_doc_sentences,
                });
            }
            all[i] += 1;
            seen[i] += 1;
            if seen[i] == 2 {
                dups[i] += 1;
            }
        }
    }
    Ok(ExtractionHistogram {
        all: normalized(&all),
        duplicates: normalized(&dups),
        selections: all.iter().sum(),
        duplicate_count: dups.iter().sum(),
    })
}

/// Mean number of words per summary; identifiers, `</S>` and `</SUM>` do
/// not count.
pub fn word_count_stats<S: AsRef<str>>(summaries: &[Vec<S>]) -> Result<f64> {
    if summaries.is_empty() {
        return Err(Error::Invalid("no summaries to count".into()));
    }
    let words: usize = summaries
        .iter()
        .map(|s| s.iter().filter(|t| !is_reserved(t.as_ref())).count())
        .sum();
    Ok(words as f64 / summaries.len() as f64)
}

fn mean_rouge(scores: &[SummaryRouge]) -> [f64; 3] {
    let n = scores.len().max(1) as f64;
    let mut out = [0.0; 3];
    for s in scores {
        out[0] += s.rouge1.f1;
        out[1] += s.rouge2.f1;
        out[2] += s.rouge_l.f1;
    }
    out.map(|x| x / n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockingReport {
    /// Mean R-1/R-2/R-L F1 with blocking on.
    pub blocked: [f64; 3],
    pub unblocked: [f64; 3],
    pub examples: usize,
    pub fallbacks: usize,
    /// Outputs that still repeat a trigram with blocking on.
    pub repeated_with_blocking: usize,
}

impl BlockingReport {
    /// Off minus on, per metric.
    pub fn delta(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.unblocked[i] - self.blocked[i])
    }
}

/// Decodes `corpus` with trigram blocking on and off and compares ROUGE F1
/// against the references. External mode rewrites the oracle extraction.
pub fn blocking_sensitivity<F: Scalar>(
    model: &RewriterModel<F>,
    vocab: &Vocab,
    corpus: &[SummExample],
    cfg: &DecodeConfig,
) -> Result<BlockingReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let decode_all = |block: bool| -> Result<Vec<(SummaryRouge, bool, bool)>> {
        let cfg = DecodeConfig {
            block_trigrams: block,
            ..cfg.clone()
        };
        corpus
            .par_iter()
            .map(|ex| {
                let out = summarize(model, vocab, &ex.document, ex.oracle.as_ref(), &cfg)?;
                let reference: Vec<&[String]> = ex.summary.iter().map(|s| s.tokens()).collect();
                let cand: Vec<&[String]> = out.sentences.iter().map(Vec::as_slice).collect();
                let words: Vec<&String> = cand.iter().flat_map(|s| s.iter()).collect();
                let repeated = crate::decode::has_repeated_trigram(&words);
                Ok((rouge_summary(&cand, &reference)?, out.fallback_used, repeated))
            })
            .collect()
    };
    let on = decode_all(true)?;
    let off = decode_all(false)?;
    let first = |v: &[(SummaryRouge, bool, bool)]| v.iter().map(|x| x.0).collect::<Vec<_>>();
    Ok(BlockingReport {
        blocked: mean_rouge(&first(&on)),
        unblocked: mean_rouge(&first(&off)),
        examples: corpus.len(),
        fallbacks: on.iter().filter(|x| x.1).count(),
        repeated_with_blocking: on.iter().filter(|x| x.2 && !x.1).count(),
    })
}

/// Exchanges the groups `i + 1` and `j + 1` (0-based summary positions) of an
/// external-mode source: both identifier tokens and tags swap.
pub fn swap_tags(source: &TaggedSequence, vocab: &Vocab, i: usize, j: usize) -> Result<TaggedSequence> {
    let (a, b) = ((i + 1) as Tag, (j + 1) as Tag);
    for k in [a, b] {
        if !source.tags.contains(&k) {
            return Err(Error::Invalid(format!("no sentence carries tag {k}")));
        }
    }
    let swap = |t: Tag| {
        if t == a {
            b
        } else if t == b {
            a
        } else {
            t
        }
    };
    let tokens = source
        .tokens
        .iter()
        .map(|&tok| match vocab.kind(tok) {
            TokenKind::Identifier(k) => vocab.identifier(swap(k as Tag) as usize),
            _ => tok,
        })
        .collect();
    let tags = source.tags.iter().map(|&t| swap(t)).collect();
    TaggedSequence::with_tags(tokens, tags, vocab)
}

/// Equal, or equal once a leading `PRON` on either side is allowed to stand
/// for the other side's entity.
pub fn same_up_to_pronoun<S: AsRef<str>>(a: &[S], b: &[S]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).enumerate().all(|(k, (x, y))| {
        let (x, y) = (x.as_ref(), y.as_ref());
        x == y || (k == 0 && (x == PRON || y == PRON))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapProbe {
    pub before: Vec<Vec<String>>,
    pub after: Vec<Vec<String>>,
    /// Output sentence `i` after the swap matches output sentence `j`
    /// before it.
    pub content_swapped: bool,
}

/// Decodes an external-mode source before and after swapping the groups of
/// summary positions `i` and `j`.
pub fn tag_swap_probe<F: Scalar>(
    model: &RewriterModel<F>,
    vocab: &Vocab,
    source: &TaggedSequence,
    i: usize,
    j: usize,
    cfg: &DecodeConfig,
) -> Result<SwapProbe> {
    let sentences = source
        .tags
        .iter()
        .copied()
        .max()
        .filter(|&m| m > 0)
        .ok_or_else(|| Error::Invalid("source has no extracted sentences".into()))? as usize;
    if i >= sentences || j >= sentences {
        return Err(Error::IndexOutOfRange {
            index: i.max(j),
            len: sentences,
        });
    }
    let cfg = DecodeConfig {
        mode: DecodeMode::External,
        ..cfg.clone()
    };
    let run = |src: &TaggedSequence| -> Result<Vec<Vec<String>>> {
        let out = beam_search(model, vocab, src, sentences, &cfg)?;
        let tokens = vocab.decode(&out.best.seq.tokens);
        Ok(split_sentences(&tokens).into_iter().map(|(_, w)| w).collect())
    };
    let before = run(source)?;
    let after = if i == j {
        before.clone()
    } else {
        run(&swap_tags(source, vocab, i, j)?)?
    };
    let content_swapped = same_up_to_pronoun(&after[i], &before[j]);
    Ok(SwapProbe {
        before,
        after,
        content_swapped,
    })
}

/// [`tag_swap_probe`] on the external source built from `doc` and `alignment`.
pub fn tag_swap_probe_example<F: Scalar>(
    model: &RewriterModel<F>,
    vocab: &Vocab,
    ex: &SummExample,
    alignment: &OracleAlignment,
    i: usize,
    j: usize,
    cfg: &DecodeConfig,
) -> Result<SwapProbe> {
    let src = build_external(&ex.document, alignment, vocab)?;
    tag_swap_probe(model, vocab, &src.source, i, j, cfg)
}

/// `position,share,duplicate_share` rows.
pub fn histogram_csv(h: &ExtractionHistogram) -> String {
    let mut out = String::from("position,share,duplicate_share\n");
    for (p, (a, d)) in h.all.iter().zip(&h.duplicates).enumerate() {
        writeln!(out, "{p},{a:.6},{d:.6}").unwrap();
    }
    out
}

pub fn categories_csv(c: &CategoryShares) -> String {
    format!(
        "category,share\nrewritten,{:.6}\ncompressed,{:.6}\nunchanged,{:.6}\n",
        c.rewritten, c.compressed, c.unchanged
    )
}

pub fn blocking_csv(r: &BlockingReport) -> String {
    let d = r.delta();
    let mut out = String::from("metric,blocked,unblocked,delta\n");
    for (k, name) in ["rouge1", "rouge2", "rougeL"].iter().enumerate() {
        writeln!(out, "{name},{:.6},{:.6},{:.6}", r.blocked[k], r.unblocked[k], d[k]).unwrap();
    }
    out
}

/// Plain-text table of the headline numbers.
pub fn text_report(c: &CategoryShares, h: &ExtractionHistogram, mean_words: f64) -> String {
    let mut out = String::new();
    writeln!(out, "pairs        {:>8}", c.pairs).unwrap();
    writeln!(out, "rewritten    {:>8.2}%", 100.0 * c.rewritten).unwrap();
    writeln!(out, "compressed   {:>8.2}%", 100.0 * c.compressed).unwrap();
    writeln!(out, "unchanged    {:>8.2}%", 100.0 * c.unchanged).unwrap();
    writeln!(out, "selections   {:>8}", h.selections).unwrap();
    writeln!(out, "duplicates   {:>8}", h.duplicate_count).unwrap();
    writeln!(out, "mean words   {mean_words:>8.2}").unwrap();
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn categories_by_hand() {
        let a = toks("they returned to find the girl , who has not been named , lying in the road");
        let b = toks("they returned to find the girl lying in the road");
        assert_eq!(categorize_edit(&a, &b), EditCategory::Compressed);
        assert_eq!(categorize_edit(&a, &a), EditCategory::Unchanged);
        assert_eq!(categorize_edit(&toks("a b c"), &toks("a x c")), EditCategory::Rewritten);
        assert_eq!(
            categorize_edit(&toks("a b c"), &toks("a b c d")),
            EditCategory::Rewritten
        );
        assert_eq!(categorize_edit::<&str>(&[], &[]), EditCategory::Unchanged);
    }

    #[test]
    fn script_collapses_substitution() {
        let a = toks("a b c");
        let b = toks("a x c");
        let s = edit_script(&a, &b);
        assert_eq!(s, [EditOp::Keep(&"a"), EditOp::Modify(&"b", &"x"), EditOp::Keep(&"c")]);
    }

    fn apply<'a>(script: &[EditOp<'a, u8>]) -> (Vec<u8>, Vec<u8>) {
        let (mut from, mut to) = (Vec::new(), Vec::new());
        for op in script {
            match *op {
                EditOp::Keep(x) => {
                    from.push(*x);
                    to.push(*x);
                }
                EditOp::Delete(x) => from.push(*x),
                EditOp::Insert(x) => to.push(*x),
                EditOp::Modify(x, y) => {
                    from.push(*x);
                    to.push(*y);
                }
            }
        }
        (from, to)
    }

    proptest! {
        #[test]
        fn script_reconstructs_both_sides(a in prop::collection::vec(0u8..4, 0..12), b in prop::collection::vec(0u8..4, 0..12)) {
            let script = edit_script(&a, &b);
            prop_assert_eq!(apply(&script), (a.clone(), b.clone()));
            let kept = script.iter().filter(|op| matches!(op, EditOp::Keep(_))).count();
            prop_assert_eq!(kept, crate::rouge::lcs_len(&a, &b));
        }

        #[test]
        fn deletions_compress_insertions_rewrite(
            a in prop::collection::vec(0u8..6, 1..15),
            mask in prop::collection::vec(any::<bool>(), 15),
            at in 0usize..16,
        ) {
            prop_assert_eq!(categorize_edit(&a, &a), EditCategory::Unchanged);
            let kept: Vec<u8> = a.iter().zip(&mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect();
            if kept.len() < a.len() {
                prop_assert_eq!(categorize_edit(&a, &kept), EditCategory::Compressed);
            }
            let mut longer = a.clone();
            longer.insert(at.min(a.len()), 9);
            prop_assert_eq!(categorize_edit(&a, &longer), EditCategory::Rewritten);
        }

        #[test]
        fn histograms_normalize(aligns in prop::collection::vec(prop::collection::vec(0usize..6, 0..5), 1..20)) {
            let h = extraction_histogram(aligns.iter().map(Vec::as_slice), 6).unwrap();
            if h.selections > 0 {
                prop_assert!((h.all.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            if h.duplicate_count > 0 {
                prop_assert!((h.duplicates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn histogram_examples() {
        let a = [vec![0], vec![0], vec![0]];
        let h = extraction_histogram(a.iter().map(Vec::as_slice), 3).unwrap();
        assert_eq!(h.all, [1.0, 0.0, 0.0]);
        assert_eq!(h.duplicates, [0.0; 3]);

        let h = extraction_histogram([&[2usize, 2][..], &[0, 1][..]], 3).unwrap();
        assert_eq!(h.duplicate_count, 1);
        assert_eq!(h.duplicates, [0.0, 0.0, 1.0]);
        assert_eq!(h.all, [0.25, 0.25, 0.5]);
        assert!(extraction_histogram([&[3usize][..]], 3).is_err());
        assert!(histogram_csv(&h).starts_with("position,share,duplicate_share\n0,0.250000,0.000000\n"));
    }

    #[test]
    fn word_counts() {
        assert_eq!(word_count_stats(&[toks("a b")]).unwrap(), 2.0);
        assert_eq!(
            word_count_stats(&[toks("<S_1> a b c </S>"), toks("a b c d e </SUM>")]).unwrap(),
            4.0
        );
        assert!(word_count_stats::<&str>(&[]).is_err());
    }

    #[test]
    fn pronoun_equivalence() {
        assert!(same_up_to_pronoun(&toks("E1 w1 w2"), &toks("PRON w1 w2")));
        assert!(same_up_to_pronoun(&toks("PRON w1"), &toks("E4 w1")));
        assert!(!same_up_to_pronoun(&toks("E1 w1"), &toks("E2 w1")));
        assert!(!same_up_to_pronoun(&toks("w1 PRON"), &toks("w1 E2")));
        assert!(!same_up_to_pronoun(&toks("E1 w1"), &toks("E1 w1 w2")));
    }

    mod swaps {
        use super::*;
        use crate::textcore::{Document, Sentence};

        fn setup() -> (Vocab, TaggedSequence) {
            let s = |t: &str| Sentence::parse(t).unwrap();
            let doc = Document::new("d", vec![s("a b"), s("c d"), s("e f"), s("g")]).unwrap();
            let ex = SummExample::new(doc.clone(), vec![s("a")], None).unwrap();
            let vocab = Vocab::build([&ex], 1, 4).unwrap();
            let src = build_external(&doc, &OracleAlignment::new(vec![2, 0, 3]), &vocab)
                .unwrap()
                .source;
            (vocab, src)
        }

        #[test]
        fn swap_is_an_involution() {
            let (vocab, src) = setup();
            assert_eq!(swap_tags(&src, &vocab, 1, 1).unwrap(), src);
            let once = swap_tags(&src, &vocab, 0, 2).unwrap();
            assert_ne!(once, src);
            assert_eq!(swap_tags(&once, &vocab, 0, 2).unwrap(), src);
            // equivalent to swapping the extraction itself
            let doc_src = {
                let s = |t: &str| Sentence::parse(t).unwrap();
                let doc = Document::new("d", vec![s("a b"), s("c d"), s("e f"), s("g")]).unwrap();
                build_external(&doc, &OracleAlignment::new(vec![3, 0, 2]), &vocab)
                    .unwrap()
                    .source
            };
            assert_eq!(once, doc_src);
            assert!(swap_tags(&src, &vocab, 0, 5).is_err());
        }
    }
}
