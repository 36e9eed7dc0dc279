//! Teacher-forced training.

use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{self, TaggedSequence};
use crate::error::{Error, Result};
use crate::textcore::{SummExample, Vocab};

use super::graph::{Grads, Scalar};
use super::optim::{lr_at, Adam};
use super::{Checkpoint, Dropout, RewriterModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    External,
    Joint,
    TwoStage,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "external" => Ok(TrainMode::External),
            "joint" => Ok(TrainMode::Joint),
            "joint_two_stage" | "two_stage" => Ok(TrainMode::TwoStage),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_enc: u64,
    pub warmup_dec: u64,
    pub enc_factor: f64,
    pub dec_factor: f64,
    /// Encoder parameters follow their own (smaller) schedule. Off means one
    /// schedule with `dec_factor`/`warmup_dec` for everything.
    pub separate_encoder_schedule: bool,
    /// Source plus target tokens per batch.
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub clip_norm: f64,
    pub seed: u64,
    /// Keep the group-tag table at zero (ablation).
    pub freeze_tags: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_enc: 20_000,
            warmup_dec: 10_000,
            enc_factor: 0.002,
            dec_factor: 0.2,
            separate_encoder_schedule: false,
            batch_tokens: 1024,
            max_steps: 2000,
            checkpoint_every: None,
            checkpoint_dir: None,
            clip_norm: 1.0,
            seed: 0,
            freeze_tags: false,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_enc == 0 || self.warmup_dec == 0 {
            return Err(Error::Config("warmups must be at least 1".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpoint_every needs checkpoint_dir".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mean weighted loss per target token.
    pub loss: f64,
    pub tokens: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Encoder input and decoder target for one example.
pub fn training_pair(ex: &SummExample, mode: TrainMode, vocab: &Vocab) -> Result<(TaggedSequence, TaggedSequence)> {
    let oracle = ex.oracle.as_ref().ok_or_else(|| Error::InvalidExample {
        id: ex.id().to_owned(),
        message: "missing oracle labels; run label first".into(),
    })?;
    let doc = &ex.document;
    match mode {
        TrainMode::External => {
            let src = align::build_external(doc, oracle, vocab)?;
            Ok((src.source, align::external_target(&ex.summary, vocab)?))
        }
        TrainMode::Joint => {
            let (x, y) = align::build_joint(doc, oracle, &ex.summary, vocab)?;
            Ok((x, align::terminated(y, vocab)))
        }
        TrainMode::TwoStage => {
            let (x, y) = align::build_two_stage(doc, oracle, &ex.summary, vocab)?;
            Ok((x, align::terminated(y, vocab)))
        }
    }
}

fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.") || name == "emb.token" || name == "emb.pos"
}

/// Per-example dropout stream, independent of scheduling.
fn example_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    s = s.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ step;
    s = s.wrapping_mul(0x94D0_49BB_1331_11EB) ^ slot as u64;
    ChaCha8Rng::seed_from_u64(s)
}

/// Optimizes the weighted MLE loss on an oracle-labeled corpus. The
/// optional `on_step` callback sees every step record (for logging or early
/// stopping: returning `false` ends training).
pub fn train<F: Scalar>(
    model: &mut RewriterModel<F>,
    corpus: &[SummExample],
    mode: TrainMode,
    cfg: &TrainConfig,
    vocab: &Vocab,
    mut on_step: impl FnMut(&StepRecord) -> bool,
) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let pairs: Vec<(TaggedSequence, TaggedSequence)> = corpus
        .iter()
        .map(|ex| training_pair(ex, mode, vocab))
        .collect::<Result<_>>()?;
    for (x, y) in &pairs {
        model.check_input(x, 0)?;
        model.check_input(y, 0)?;
    }

    let tag_table = model.tag_table();
    if cfg.freeze_tags {
        model.params_mut().get_mut(tag_table).fill(F::zero());
    }
    let encoder_group: Vec<bool> = model
        .params()
        .ids()
        .map(|id| is_encoder_param(model.params().name(id)))
        .collect();

    let mut opt = Adam::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    let gamma = model.config().gamma;
    let dropout = model.config().dropout;

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::new();
        let mut budget = 0;
        while budget < cfg.batch_tokens {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            budget += pairs[i].0.len() + pairs[i].1.len();
            batch.push(i);
            if batch.len() == pairs.len() {
                break;
            }
        }

        let model_ref = &*model;
        let outputs = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut r = example_rng(cfg.seed, step, slot);
                let drop = (dropout > 0.0).then(|| Dropout::new(dropout, &mut r));
                model_ref.loss(&pairs[i].0, &pairs[i].1, gamma, vocab, drop)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads: Grads<F> = model.params().zeros_like();
        let (mut total, mut tokens) = (0.0, 0);
        for out in &outputs {
            grads.add_assign(&out.grads);
            total += out.total;
            tokens += out.tokens;
        }
        if cfg.freeze_tags {
            grads.zero(tag_table);
        }
        let grad_norm = grads.norm();
        if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            grads.scale(F::of(cfg.clip_norm / grad_norm));
        }

        let dec_lr = lr_at(step, cfg.warmup_dec, cfg.dec_factor)?;
        let enc_lr = if cfg.separate_encoder_schedule {
            lr_at(step, cfg.warmup_enc, cfg.enc_factor)?
        } else {
            dec_lr
        };
        let frozen = cfg.freeze_tags.then_some(tag_table.0);
        opt.update(model.params_mut(), &grads, |i| {
            if Some(i) == frozen {
                None
            } else if encoder_group[i] {
                Some(enc_lr)
            } else {
                Some(dec_lr)
            }
        });

        let record = StepRecord {
            step,
            loss: total / tokens.max(1) as f64,
            tokens,
            lr: dec_lr,
            grad_norm,
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            info!(
                "event=train_step step={} loss={:.5} tokens={} lr={:.3e} grad_norm={:.4}",
                record.step, record.loss, record.tokens, record.lr, record.grad_norm
            );
        }
        let keep_going = on_step(&record);
        log.steps.push(record);

        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if step % every == 0 || step == cfg.max_steps || !keep_going {
                let path = dir.join(format!("step-{step:07}.ckpt"));
                Checkpoint::from_model(&*model, vocab).save(&path)?;
                info!("event=checkpoint step={step} path={}", path.display());
                log.checkpoints.push(path);
            }
        }
        if !keep_going {
            break;
        }
    }
    Ok(log)
}
