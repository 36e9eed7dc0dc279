use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use rlab::align::{oracle_extract, OracleAlignment};
use rlab::analysis;
use rlab::decode::{summarize, DecodeConfig, DecodeMode, SummaryRecord};
use rlab::model::{train, Checkpoint, ModelConfig, RewriterModel, TrainConfig, TrainMode};
use rlab::rouge::{rouge_summary, RougeScore};
use rlab::synth::{generate, Span, SynthConfig};
use rlab::textcore::{load_corpus, write_corpus, SummExample, Vocab};

use crate::{AnalyzeArgs, Cli, Command, DecodeArgs, EvaluateArgs, LabelArgs, SummarizeArgs, SynthArgs, TrainArgs};

pub enum Failure {
    /// Bad flags or paths: exit code 1.
    Usage(String),
    /// Unreadable or inconsistent data: exit code 2.
    Data(anyhow::Error),
}

impl From<rlab::Error> for Failure {
    fn from(e: rlab::Error) -> Self {
        match e {
            rlab::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn existing(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn writable(path: &Path) -> Outcome {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(usage(format!("output directory does not exist: {}", dir.display())))
        }
        _ => Ok(()),
    }
}

fn parse_span(flag: &str, text: &str) -> Outcome<Span> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("--{flag}: expected MIN-MAX or N, got {text:?}")))
    };
    match text.split_once('-') {
        Some((a, b)) => Ok(Span::new(parse(a)?, parse(b)?)),
        None => {
            let n = parse(text)?;
            Ok(Span::new(n, n))
        }
    }
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Outcome {
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for line in lines {
            writeln!(w, "{line}")?;
        }
        w.flush()
    };
    write().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Label(a) => label(a),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Summarize(a) => summarize_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze(a, cli.seed),
    }
}

fn synth(a: &SynthArgs, seed: u64) -> Outcome {
    writable(&a.out)?;
    let cfg = SynthConfig {
        seed,
        entities: a.entities,
        content_words: a.content_words,
        noise_words: a.noise_words,
        cue_words: a.cue_words,
        doc_sentences: parse_span("doc-sentences", &a.doc_sentences)?,
        summary_sentences: parse_span("summary-sentences", &a.summary_sentences)?,
        content_len: parse_span("content-len", &a.content_len)?,
        noise_rate: a.noise_rate,
        coref_rate: a.coref_rate,
        ref_rate: a.ref_rate,
        cued_selection: a.cued,
    };
    let corpus = generate(&cfg, a.n)?;
    write_corpus(&a.out, &corpus)?;
    info!("event=synth examples={} path={}", corpus.len(), a.out.display());
    Ok(())
}

fn label(a: &LabelArgs) -> Outcome {
    existing(&a.input)?;
    writable(&a.out)?;
    let corpus = load_corpus(&a.input)?;
    let labeled = corpus
        .into_par_iter()
        .map(|ex| {
            let oracle = oracle_extract(&ex.document, &ex.summary)?;
            SummExample::new(ex.document, ex.summary, Some(oracle))
        })
        .collect::<rlab::Result<Vec<_>>>()?;
    write_corpus(&a.out, &labeled)?;
    info!("event=label examples={} path={}", labeled.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Outcome {
    existing(&a.corpus)?;
    writable(&a.out)?;
    if let Some(dir) = &a.checkpoint_dir {
        if !dir.is_dir() {
            return Err(usage(format!("checkpoint directory does not exist: {}", dir.display())));
        }
    }
    let mode: TrainMode = a.mode.parse()?;
    let corpus = load_corpus(&a.corpus)?;
    let vocab = Vocab::build(corpus.iter(), a.min_freq, a.max_identifier)?;
    let mcfg = ModelConfig {
        d_model: a.d_model,
        heads: a.heads,
        enc_layers: a.enc_layers,
        dec_layers: a.dec_layers,
        ffn_dim: a.ffn_dim,
        max_positions: a.max_positions,
        max_tags: a.max_identifier,
        dropout: a.dropout,
        gamma: a.gamma,
        seed,
    };
    let tcfg = TrainConfig {
        warmup_enc: a.warmup_enc,
        warmup_dec: a.warmup,
        enc_factor: a.enc_factor,
        dec_factor: a.lr_factor,
        separate_encoder_schedule: a.separate_encoder_schedule,
        batch_tokens: a.batch_tokens,
        max_steps: a.steps,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: a.checkpoint_dir.clone(),
        clip_norm: 1.0,
        seed,
        freeze_tags: a.freeze_tags,
        log_every: a.log_every,
    };
    let mut model = RewriterModel::<f32>::for_vocab(mcfg, &vocab)?;
    info!(
        "event=train_start examples={} vocab={} params={} mode={}",
        corpus.len(),
        vocab.len(),
        model.params().count(),
        a.mode
    );
    let log = train(&mut model, &corpus, mode, &tcfg, &vocab, |_| true)?;
    Checkpoint::from_model(&model, &vocab).save(&a.out)?;
    let last = log.steps.last().map_or(f64::NAN, |r| r.loss);
    info!(
        "event=train_done steps={} loss={last:.5} path={}",
        log.steps.len(),
        a.out.display()
    );
    Ok(())
}

fn decode_config(d: &DecodeArgs) -> Outcome<DecodeConfig> {
    let cfg = DecodeConfig {
        beam: d.beam,
        min_len: d.min_len,
        max_len: d.max_len,
        alpha: d.alpha,
        block_trigrams: !d.no_trigram_blocking,
        mode: d.mode.parse::<DecodeMode>()?,
        dedup: d.dedup,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Outcome<(RewriterModel<f32>, Vocab)> {
    let ckpt = Checkpoint::load(path)?;
    let vocab = ckpt.vocab().clone();
    let model = ckpt.into_model(&vocab)?;
    Ok((model, vocab))
}

#[derive(Deserialize)]
struct Selection {
    id: String,
    selected: Vec<usize>,
}

enum Extractor {
    Oracle,
    Lead3,
    File(HashMap<String, Vec<usize>>),
}

impl Extractor {
    fn parse(spec: &str) -> Outcome<Self> {
        match spec {
            "oracle" => Ok(Extractor::Oracle),
            "lead3" => Ok(Extractor::Lead3),
            _ => {
                let path = spec
                    .strip_prefix("file:")
                    .ok_or_else(|| usage(format!("unknown extractor {spec:?}; use oracle, lead3 or file:<path>")))?;
                let path = PathBuf::from(path);
                existing(&path)?;
                let reader = BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?);
                let mut map = HashMap::new();
                for (n, line) in reader.lines().enumerate() {
                    let line = line.with_context(|| format!("reading {}", path.display()))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let s: Selection = serde_json::from_str(&line)
                        .with_context(|| format!("{}: line {}: malformed selection", path.display(), n + 1))?;
                    map.insert(s.id, s.selected);
                }
                Ok(Extractor::File(map))
            }
        }
    }

    fn extract(&self, ex: &SummExample) -> Outcome<OracleAlignment> {
        Ok(match self {
            Extractor::Oracle => match &ex.oracle {
                Some(o) => o.clone(),
                None => oracle_extract(&ex.document, &ex.summary)?,
            },
            Extractor::Lead3 => OracleAlignment::lead(3, ex.document.len()),
            Extractor::File(map) => {
                let sel = map
                    .get(ex.id())
                    .ok_or_else(|| Failure::Data(anyhow::anyhow!("no extraction for example {}", ex.id())))?;
                OracleAlignment::new(sel.clone())
            }
        })
    }
}

fn summarize_cmd(a: &SummarizeArgs) -> Outcome {
    existing(&a.model)?;
    existing(&a.input)?;
    writable(&a.out)?;
    let cfg = decode_config(&a.decode)?;
    let extractor = Extractor::parse(&a.extractor)?;
    let (model, vocab) = load_model(&a.model)?;
    let corpus = load_corpus(&a.input)?;
    let records = corpus
        .par_iter()
        .map(|ex| {
            let alignment = match cfg.mode {
                DecodeMode::External => Some(extractor.extract(ex)?),
                _ => None,
            };
            let out = summarize(&model, &vocab, &ex.document, alignment.as_ref(), &cfg)
                .map_err(|e| Failure::Data(anyhow::anyhow!("example {}: {e}", ex.id())))?;
            Ok(SummaryRecord::new(ex.id(), out))
        })
        .collect::<Outcome<Vec<_>>>()?;
    let fallbacks = records.iter().filter(|r| r.fallback_used).count();
    write_lines(
        &a.out,
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes")),
    )?;
    info!(
        "event=summarize examples={} fallbacks={fallbacks} path={}",
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn load_hypotheses(path: &Path) -> Outcome<Vec<SummaryRecord>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SummaryRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}: malformed summary record", path.display(), n + 1))?;
        out.push(rec);
    }
    Ok(out)
}

/// Hypotheses paired with their reference examples.
fn paired(hyp: &Path, reference: &Path) -> Outcome<(Vec<SummaryRecord>, Vec<SummExample>)> {
    existing(hyp)?;
    existing(reference)?;
    let hyps = load_hypotheses(hyp)?;
    let refs = load_corpus(reference)?;
    let mut by_id: HashMap<String, SummExample> = refs.into_iter().map(|ex| (ex.id().to_owned(), ex)).collect();
    let mut matched = Vec::with_capacity(hyps.len());
    for h in &hyps {
        let ex = by_id
            .remove(&h.id)
            .ok_or_else(|| Failure::Data(anyhow::anyhow!("no reference for {}", h.id)))?;
        matched.push(ex);
    }
    Ok((hyps, matched))
}

fn evaluate(a: &EvaluateArgs) -> Outcome {
    let (hyps, refs) = paired(&a.hyp, &a.reference)?;
    if hyps.is_empty() {
        return Err(Failure::Data(anyhow::anyhow!("no hypotheses in {}", a.hyp.display())));
    }
    let mut sums = [[0.0f64; 3]; 3];
    for (h, ex) in hyps.iter().zip(&refs) {
        let reference: Vec<&[String]> = ex.summary.iter().map(|s| s.tokens()).collect();
        let cand: Vec<&[String]> = h.summary.iter().map(Vec::as_slice).collect();
        let s = rouge_summary(&cand, &reference)?;
        for (k, r) in [s.rouge1, s.rouge2, s.rouge_l].iter().enumerate() {
            let RougeScore { recall, precision, f1 } = *r;
            sums[k][0] += recall;
            sums[k][1] += precision;
            sums[k][2] += f1;
        }
    }
    let n = hyps.len() as f64;
    println!("examples={}", hyps.len());
    for (k, name) in ["rouge1", "rouge2", "rougeL"].iter().enumerate() {
        println!(
            "metric={name} recall={:.6} precision={:.6} f1={:.6}",
            sums[k][0] / n,
            sums[k][1] / n,
            sums[k][2] / n
        );
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs, seed: u64) -> Outcome {
    if !a.out_dir.is_dir() {
        return Err(usage(format!(
            "output directory does not exist: {}",
            a.out_dir.display()
        )));
    }
    if a.probes > 0 && a.model.is_none() {
        return Err(usage("--probes needs --model"));
    }
    if let Some(m) = &a.model {
        existing(m)?;
    }
    let (hyps, refs) = paired(&a.hyp, &a.reference)?;

    let mut pairs: Vec<(&[String], &[String])> = Vec::new();
    for (h, ex) in hyps.iter().zip(&refs) {
        for (&i, sent) in h.selected.iter().zip(&h.summary) {
            let src = ex
                .document
                .sentences
                .get(i)
                .ok_or_else(|| Failure::Data(anyhow::anyhow!("{}: selected sentence {i} out of range", h.id)))?;
            pairs.push((src.tokens(), sent.as_slice()));
        }
    }
    let shares = analysis::category_shares(pairs);
    let positions = refs.iter().map(|ex| ex.document.len()).max().unwrap_or(0);
    let hist = analysis::extraction_histogram(hyps.iter().map(|h| h.selected.as_slice()), positions)?;
    let summaries: Vec<Vec<String>> = hyps.iter().map(|h| h.summary.concat()).collect();
    let words = analysis::word_count_stats(&summaries)?;

    let out = |name: &str| a.out_dir.join(name);
    let write = |name: &str, text: String| -> Outcome {
        std::fs::write(out(name), text).with_context(|| format!("writing {}", out(name).display()))?;
        Ok(())
    };
    write("categories.csv", analysis::categories_csv(&shares))?;
    write("histogram.csv", analysis::histogram_csv(&hist))?;
    let mut report = analysis::text_report(&shares, &hist, words);

    if let Some(path) = &a.model {
        let cfg = decode_config(&a.decode)?;
        let (model, vocab) = load_model(path)?;
        let labeled: Vec<SummExample> = refs
            .iter()
            .map(|ex| match &ex.oracle {
                Some(_) => Ok(ex.clone()),
                None => {
                    let o = oracle_extract(&ex.document, &ex.summary)?;
                    SummExample::new(ex.document.clone(), ex.summary.clone(), Some(o))
                }
            })
            .collect::<rlab::Result<_>>()?;
        let blocking = analysis::blocking_sensitivity(&model, &vocab, &labeled, &cfg)?;
        write("blocking.csv", analysis::blocking_csv(&blocking))?;
        let d = blocking.delta();
        report.push_str(&format!(
            "blocking d-R1 {:+.4}  d-R2 {:+.4}  d-RL {:+.4}  fallbacks {}\n",
            d[0], d[1], d[2], blocking.fallbacks
        ));

        if a.probes > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut jobs = Vec::new();
            for ex in labeled.iter().filter(|ex| ex.summary.len() >= 2).take(a.probes) {
                let pick = sample(&mut rng, ex.summary.len(), 2);
                jobs.push((ex, pick.index(0), pick.index(1)));
            }
            let results = jobs
                .par_iter()
                .map(|&(ex, i, j)| {
                    let al = ex.oracle.as_ref().expect("labeled above");
                    analysis::tag_swap_probe_example(&model, &vocab, ex, al, i, j, &cfg).map(|p| (ex.id(), i, j, p))
                })
                .collect::<rlab::Result<Vec<_>>>()?;
            let swapped = results.iter().filter(|r| r.3.content_swapped).count();
            let mut csv = String::from("id,i,j,content_swapped\n");
            for (id, i, j, p) in &results {
                csv.push_str(&format!("{id},{i},{j},{}\n", p.content_swapped));
            }
            write("probe.csv", csv)?;
            report.push_str(&format!("tag swap     {swapped}/{}\n", results.len()));
        }
    }
    write("report.txt", report.clone())?;
    print!("{report}");
    info!("event=analyze examples={} dir={}", hyps.len(), a.out_dir.display());
    Ok(())
}
