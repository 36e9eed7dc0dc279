//! Tag-augmented Transformer encoder-decoder.
//!
//! The encoder reads X′ with token and position embeddings only; group-tag
//! embeddings are added to its *output*. The decoder input is the sum of
//! token, position and group-tag embeddings of the shifted target. Both sides
//! read the same tag table, so a summary token tagged `k` and a document
//! token tagged `k` share a vector component that cross-attention can key on.
//!
//! Layers are pre-norm. The output projection is tied to the token table.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::TaggedSequence;
use crate::error::{Error, Result};
use crate::textcore::{TokenId, Vocab, SUMMARY_END_ID};
use graph::{Grads, Graph, Mask, ParamId, Params, Var};

pub use checkpoint::Checkpoint;
pub use graph::{Mat, Scalar};
pub use optim::{lr_at, Adam};
pub use train::{train, TrainConfig, TrainLog, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Largest group tag; the tag table has `max_tags + 1` rows.
    pub max_tags: usize,
    pub dropout: f64,
    /// Loss weight on identifier targets.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 256,
            max_positions: 512,
            max_tags: crate::textcore::DEFAULT_MAX_IDENTIFIER,
            dropout: 0.1,
            gamma: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return bad("gamma must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.max_positions == 0 || self.ffn_dim == 0 {
            return bad("max_positions and ffn_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    token: ParamId,
    pos: ParamId,
    tag: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_bias: ParamId,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<F: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Mat<F> {
        let dist = Normal::new(0.0, std).expect("valid std");
        Mat::from_shape_fn((rows, cols), |_| F::of(dist.sample(&mut self.rng)))
    }
}

impl Layout {
    fn build<F: Scalar>(cfg: &ModelConfig, vocab_size: usize, params: &mut Params<F>) -> Layout {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let d = cfg.d_model;
        let emb_std = (d as f64).powf(-0.5);
        let token = params.add("emb.token", init.normal(vocab_size, d, emb_std));
        let pos = params.add("emb.pos", init.normal(cfg.max_positions, d, emb_std));
        let tag = params.add("emb.tag", init.normal(cfg.max_tags + 1, d, 1.0));

        fn linear<F: Scalar>(p: &mut Params<F>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Linear {
            let w = p.add(
                format!("{name}.w"),
                init.normal(fan_in, fan_out, (fan_in as f64).powf(-0.5)),
            );
            let b = p.add(format!("{name}.b"), Mat::zeros((1, fan_out)));
            Linear { w, b }
        }
        fn norm<F: Scalar>(p: &mut Params<F>, name: &str, d: usize) -> Norm {
            Norm {
                gain: p.add(format!("{name}.gain"), Mat::ones((1, d))),
                bias: p.add(format!("{name}.bias"), Mat::zeros((1, d))),
            }
        }
        fn attention<F: Scalar>(p: &mut Params<F>, init: &mut Init, name: &str, d: usize) -> Attention {
            Attention {
                q: linear(p, init, &format!("{name}.q"), d, d),
                k: linear(p, init, &format!("{name}.k"), d, d),
                v: linear(p, init, &format!("{name}.v"), d, d),
                o: linear(p, init, &format!("{name}.o"), d, d),
            }
        }
        fn ffn<F: Scalar>(p: &mut Params<F>, init: &mut Init, name: &str, d: usize, h: usize) -> Ffn {
            Ffn {
                up: linear(p, init, &format!("{name}.up"), d, h),
                down: linear(p, init, &format!("{name}.down"), h, d),
            }
        }

        let encoder = (0..cfg.enc_layers)
            .map(|l| EncoderLayer {
                norm1: norm(params, &format!("enc.{l}.norm1"), d),
                attn: attention(params, &mut init, &format!("enc.{l}.attn"), d),
                norm2: norm(params, &format!("enc.{l}.norm2"), d),
                ffn: ffn(params, &mut init, &format!("enc.{l}.ffn"), d, cfg.ffn_dim),
            })
            .collect();
        let enc_norm = norm(params, "enc.norm", d);
        let decoder = (0..cfg.dec_layers)
            .map(|l| DecoderLayer {
                norm1: norm(params, &format!("dec.{l}.norm1"), d),
                self_attn: attention(params, &mut init, &format!("dec.{l}.self"), d),
                norm2: norm(params, &format!("dec.{l}.norm2"), d),
                cross_attn: attention(params, &mut init, &format!("dec.{l}.cross"), d),
                norm3: norm(params, &format!("dec.{l}.norm3"), d),
                ffn: ffn(params, &mut init, &format!("dec.{l}.ffn"), d, cfg.ffn_dim),
            })
            .collect();
        let dec_norm = norm(params, "dec.norm", d);
        let out_bias = params.add("out.bias", Mat::zeros((1, vocab_size)));
        Layout {
            token,
            pos,
            tag,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_bias,
        }
    }
}

/// Source of dropout masks during training.
pub struct Dropout<'r> {
    rate: f64,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Dropout<'r> {
    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    fn apply<F: Scalar>(&mut self, g: &mut Graph<'_, F>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let scale = F::of(1.0 / keep);
        let dim = g.value(x).raw_dim();
        let mask = Mat::from_shape_fn(dim, |_| {
            if self.rng.random::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        });
        g.mul_const(x, mask)
    }
}

fn maybe_drop<F: Scalar>(drop: &mut Option<Dropout<'_>>, g: &mut Graph<'_, F>, x: Var) -> Var {
    match drop {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

/// Encoder output prepared for repeated decoding: tagged states plus the
/// cross-attention keys and values of every decoder layer.
#[derive(Debug, Clone)]
pub struct EncoderMemory<F> {
    pub states: Mat<F>,
    cross: Vec<(Mat<F>, Mat<F>)>,
}

impl<F: Scalar> EncoderMemory<F> {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct RewriterModel<F = f32> {
    config: ModelConfig,
    vocab_size: usize,
    params: Params<F>,
    layout: Layout,
}

/// Sum of weighted token losses and its parameter gradients.
#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub total: f64,
    pub tokens: usize,
    pub grads: Grads<F>,
}

impl<F: Scalar> LossOutput<F> {
    pub fn mean(&self) -> f64 {
        self.total / self.tokens.max(1) as f64
    }
}

impl<F: Scalar> RewriterModel<F> {
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut params = Params::default();
        let layout = Layout::build(&config, vocab_size, &mut params);
        Ok(RewriterModel {
            config,
            vocab_size,
            params,
            layout,
        })
    }

    pub fn for_vocab(config: ModelConfig, vocab: &Vocab) -> Result<Self> {
        if vocab.max_identifier() > config.max_tags {
            return Err(Error::Config(format!(
                "vocabulary has identifiers up to {} but the tag table stops at {}",
                vocab.max_identifier(),
                config.max_tags
            )));
        }
        Self::new(config, vocab.len())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    /// The group-tag table read by both encoder and decoder.
    pub fn tag_table(&self) -> ParamId {
        self.layout.tag
    }

    pub fn token_table(&self) -> ParamId {
        self.layout.token
    }

    pub fn cast<G: Scalar>(&self) -> RewriterModel<G> {
        RewriterModel {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, seq: &TaggedSequence, extra_positions: usize) -> Result<()> {
        let len = seq.len() + extra_positions;
        if len > self.config.max_positions {
            return Err(Error::TooManyPositions {
                len,
                max: self.config.max_positions,
            });
        }
        if seq.tokens.len() != seq.tags.len() {
            return Err(Error::InconsistentTags);
        }
        if let Some(&t) = seq.tags.iter().find(|&&t| t as usize > self.config.max_tags) {
            return Err(Error::TagOverflow {
                tag: t,
                max: self.config.max_tags,
            });
        }
        if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph<'_, F>, x: Var, l: Linear) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph<'_, F>, x: Var, n: Norm) -> Var {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        g.layer_norm(x, gain, bias)
    }

    /// Multi-head attention given already projected keys and values.
    fn attend(&self, g: &mut Graph<'_, F>, query_in: Var, k: Var, v: Var, a: &Attention, mask: Mask) -> Var {
        let q = self.linear(g, query_in, a.q);
        let heads = self.config.heads;
        let hd = self.config.d_model / heads;
        let scale = F::of((hd as f64).powf(-0.5));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, mask);
            outs.push(g.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.linear(g, cat, a.o)
    }

    fn ffn(&self, g: &mut Graph<'_, F>, x: Var, f: &Ffn) -> Var {
        let h = self.linear(g, x, f.up);
        let h = g.relu(h);
        self.linear(g, h, f.down)
    }

    fn positions(len: usize) -> Vec<usize> {
        (0..len).collect()
    }

    /// Encoder stack without tag embeddings.
    fn encoder_states(&self, g: &mut Graph<'_, F>, tokens: &[TokenId], drop: &mut Option<Dropout<'_>>) -> Var {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = g.rows(self.layout.token, &idx);
        let pos = g.rows(self.layout.pos, &Self::positions(idx.len()));
        let mut x = g.add(tok, pos);
        x = maybe_drop(drop, g, x);
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, layer.norm1);
            let k = self.linear(g, h, layer.attn.k);
            let v = self.linear(g, h, layer.attn.v);
            let a = self.attend(g, h, k, v, &layer.attn, Mask::None);
            let a = maybe_drop(drop, g, a);
            x = g.add(x, a);
            let h = self.norm(g, x, layer.norm2);
            let f = self.ffn(g, h, &layer.ffn);
            let f = maybe_drop(drop, g, f);
            x = g.add(x, f);
        }
        self.norm(g, x, self.layout.enc_norm)
    }

    fn encode_graph(&self, g: &mut Graph<'_, F>, src: &TaggedSequence, drop: &mut Option<Dropout<'_>>) -> Var {
        let states = self.encoder_states(g, &src.tokens, drop);
        let tags: Vec<usize> = src.tags.iter().map(|&t| t as usize).collect();
        let tag = g.rows(self.layout.tag, &tags);
        g.add(states, tag)
    }

    /// Decoder hidden states for `inputs` (start symbol included).
    fn decoder_hidden(
        &self,
        g: &mut Graph<'_, F>,
        cross: &[(Var, Var)],
        inputs: &[TokenId],
        tags: &[u32],
        drop: &mut Option<Dropout<'_>>,
    ) -> Var {
        let idx: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let tag_idx: Vec<usize> = tags.iter().map(|&t| t as usize).collect();
        let tok = g.rows(self.layout.token, &idx);
        let pos = g.rows(self.layout.pos, &Self::positions(idx.len()));
        let tag = g.rows(self.layout.tag, &tag_idx);
        let y = g.add(tok, pos);
        let mut y = g.add(y, tag);
        y = maybe_drop(drop, g, y);
        for (layer, &(ck, cv)) in self.layout.decoder.iter().zip(cross) {
            let h = self.norm(g, y, layer.norm1);
            let k = self.linear(g, h, layer.self_attn.k);
            let v = self.linear(g, h, layer.self_attn.v);
            let a = self.attend(g, h, k, v, &layer.self_attn, Mask::Causal);
            let a = maybe_drop(drop, g, a);
            y = g.add(y, a);
            let h = self.norm(g, y, layer.norm2);
            let c = self.attend(g, h, ck, cv, &layer.cross_attn, Mask::None);
            let c = maybe_drop(drop, g, c);
            y = g.add(y, c);
            let h = self.norm(g, y, layer.norm3);
            let f = self.ffn(g, h, &layer.ffn);
            let f = maybe_drop(drop, g, f);
            y = g.add(y, f);
        }
        self.norm(g, y, self.layout.dec_norm)
    }

    fn logits(&self, g: &mut Graph<'_, F>, hidden: Var) -> Var {
        let table = g.param(self.layout.token);
        let bias = g.param(self.layout.out_bias);
        let z = g.matmul_t(hidden, table);
        g.add_row(z, bias)
    }

    fn cross_kv(&self, g: &mut Graph<'_, F>, memory: Var) -> Vec<(Var, Var)> {
        self.layout
            .decoder
            .iter()
            .map(|l| {
                let k = self.linear(g, memory, l.cross_attn.k);
                let v = self.linear(g, memory, l.cross_attn.v);
                (k, v)
            })
            .collect()
    }

    /// Encoder output with group-tag embeddings added: `len × d_model`.
    pub fn encode(&self, src: &TaggedSequence) -> Result<Mat<F>> {
        self.check_input(src, 0)?;
        let mut g = Graph::new(&self.params);
        let x = self.encode_graph(&mut g, src, &mut None);
        Ok(g.value(x).clone())
    }

    /// Encoder output of the same tokens with no tag embedding added.
    pub fn encode_without_tags(&self, tokens: &[TokenId]) -> Result<Mat<F>> {
        let probe = TaggedSequence {
            tokens: tokens.to_vec(),
            tags: vec![0; tokens.len()],
        };
        self.check_input(&probe, 0)?;
        let mut g = Graph::new(&self.params);
        let x = self.encoder_states(&mut g, tokens, &mut None);
        Ok(g.value(x).clone())
    }

    /// Encodes once for repeated [`decode_step`](Self::decode_step) calls.
    pub fn memory(&self, src: &TaggedSequence) -> Result<EncoderMemory<F>> {
        self.check_input(src, 0)?;
        let mut g = Graph::new(&self.params);
        let x = self.encode_graph(&mut g, src, &mut None);
        let kv = self.cross_kv(&mut g, x);
        Ok(EncoderMemory {
            states: g.value(x).clone(),
            cross: kv
                .iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect(),
        })
    }

    fn decoder_inputs(prefix: &TaggedSequence) -> (Vec<TokenId>, Vec<u32>) {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(SUMMARY_END_ID);
        inputs.extend_from_slice(&prefix.tokens);
        let mut tags = Vec::with_capacity(prefix.len() + 1);
        tags.push(0);
        tags.extend_from_slice(&prefix.tags);
        (inputs, tags)
    }

    /// Log-probabilities of the next target token after `prefix`.
    pub fn decode_step(&self, memory: &EncoderMemory<F>, prefix: &TaggedSequence, vocab: &Vocab) -> Result<Vec<f64>> {
        prefix.validate(vocab)?;
        self.check_input(prefix, 1)?;
        Ok(self.decode_step_unchecked(memory, prefix))
    }

    pub(crate) fn decode_step_unchecked(&self, memory: &EncoderMemory<F>, prefix: &TaggedSequence) -> Vec<f64> {
        let mut g = Graph::new(&self.params);
        let cross: Vec<(Var, Var)> = memory
            .cross
            .iter()
            .map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())))
            .collect();
        let (inputs, tags) = Self::decoder_inputs(prefix);
        let h = self.decoder_hidden(&mut g, &cross, &inputs, &tags, &mut None);
        let last = g.value(h).nrows() - 1;
        let h_last = g.slice_rows_last(h, last);
        let z = self.logits(&mut g, h_last);
        log_softmax(g.value(z).row(0).iter().map(|x| x.as_f64()))
    }

    /// Teacher-forced weighted negative log-likelihood of `tgt` and its
    /// gradient. Identifier targets are weighted by `gamma`, all others by 1.
    pub fn loss(
        &self,
        src: &TaggedSequence,
        tgt: &TaggedSequence,
        gamma: f64,
        vocab: &Vocab,
        drop: Option<Dropout<'_>>,
    ) -> Result<LossOutput<F>> {
        let weights: Vec<f64> = tgt
            .tokens
            .iter()
            .map(|&t| {
                if vocab.identifier_index(t).is_some() {
                    gamma
                } else {
                    1.0
                }
            })
            .collect();
        self.loss_with_weights(src, tgt, &weights, drop)
    }

    /// `Σ_k -w_k log P(tgt_k | tgt_<k, src)` with explicit per-token weights.
    pub fn loss_with_weights(
        &self,
        src: &TaggedSequence,
        tgt: &TaggedSequence,
        weights: &[f64],
        drop: Option<Dropout<'_>>,
    ) -> Result<LossOutput<F>> {
        self.check_input(src, 0)?;
        self.check_input(tgt, 0)?;
        if tgt.is_empty() || weights.len() != tgt.len() {
            return Err(Error::Invalid(
                "target must be non-empty with one weight per token".into(),
            ));
        }
        let mut drop = drop;
        let mut g = Graph::new(&self.params);
        let memory = self.encode_graph(&mut g, src, &mut drop);
        let cross = self.cross_kv(&mut g, memory);
        let n = tgt.len();
        let inputs: Vec<TokenId> = std::iter::once(SUMMARY_END_ID)
            .chain(tgt.tokens[..n - 1].iter().copied())
            .collect();
        let tags: Vec<u32> = std::iter::once(0).chain(tgt.tags[..n - 1].iter().copied()).collect();
        let h = self.decoder_hidden(&mut g, &cross, &inputs, &tags, &mut drop);
        let z = self.logits(&mut g, h);
        let targets: Vec<usize> = tgt.tokens.iter().map(|&t| t as usize).collect();
        let weights: Vec<F> = weights.iter().map(|&w| F::of(w)).collect();
        let loss = g.weighted_nll(z, &targets, &weights);
        let mut grads = self.params.zeros_like();
        g.backward(loss, &mut grads);
        Ok(LossOutput {
            total: g.value(loss)[(0, 0)].as_f64(),
            tokens: n,
            grads,
        })
    }
}

impl<F: Scalar> Graph<'_, F> {
    fn slice_rows_last(&mut self, x: Var, row: usize) -> Var {
        let v = self.value(x).slice(ndarray::s![row..row + 1, ..]).to_owned();
        self.constant(v)
    }
}

pub fn log_softmax(logits: impl Iterator<Item = f64>) -> Vec<f64> {
    let z: Vec<f64> = logits.collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    z.into_iter().map(|x| x - lse).collect()
}
