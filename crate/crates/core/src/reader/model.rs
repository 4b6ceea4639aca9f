//! Model parameters, forward pass, and hand-rolled backward pass.
//!
//! The network is deliberately small: token + position embeddings, a stack
//! of single-head residual blocks (self-attention + ReLU feed-forward) per
//! document on the encoder side, an autoregressive decoder with causal
//! self-attention and cross-attention over the concatenated encoder states,
//! a vocabulary projection, and an affine discriminator head on mean-pooled
//! document encodings.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{ContraScore, LossBreakdown};
use super::tensor::{dot, softmax_rows_masked, Mat};
use super::vocab::{Vocab, BOS, EOS, PAD};
use super::{ReaderConfig, ReaderError};
use crate::corpus::{Document, QAInstance, RetrievedSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<S> {
    pub wq: Mat<S>,
    pub wk: Mat<S>,
    pub wv: Mat<S>,
    pub wo: Mat<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<S> {
    pub w1: Mat<S>,
    pub b1: Mat<S>,
    pub w2: Mat<S>,
    pub b2: Mat<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<S> {
    pub attn: Attention<S>,
    pub ffn: FeedForward<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<S> {
    pub self_attn: Attention<S>,
    pub cross_attn: Attention<S>,
    pub ffn: FeedForward<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub w: Mat<S>,
    pub b: Mat<S>,
}

/// Every trainable tensor of the reader.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub tok_emb: Mat<S>,
    pub pos_enc: Mat<S>,
    pub pos_dec: Mat<S>,
    pub encoder: Vec<EncoderBlock<S>>,
    pub decoder: Vec<DecoderBlock<S>>,
    pub out_proj: Linear<S>,
    pub disc: Linear<S>,
}

impl<S: Scalar> Attention<S> {
    fn zeros(e: usize) -> Self {
        Attention {
            wq: Mat::zeros(e, e),
            wk: Mat::zeros(e, e),
            wv: Mat::zeros(e, e),
            wo: Mat::zeros(e, e),
        }
    }
}

impl<S: Scalar> FeedForward<S> {
    fn zeros(e: usize) -> Self {
        let hidden = 2 * e;
        FeedForward {
            w1: Mat::zeros(e, hidden),
            b1: Mat::zeros(1, hidden),
            w2: Mat::zeros(hidden, e),
            b2: Mat::zeros(1, e),
        }
    }
}

impl<S: Scalar> Params<S> {
    pub fn zeros(config: &ReaderConfig) -> Self {
        let e = config.embed_dim;
        Params {
            tok_emb: Mat::zeros(config.vocab_size, e),
            pos_enc: Mat::zeros(config.max_seq_len, e),
            pos_dec: Mat::zeros(config.max_answer_len, e),
            encoder: (0..config.encoder_layers)
                .map(|_| EncoderBlock {
                    attn: Attention::zeros(e),
                    ffn: FeedForward::zeros(e),
                })
                .collect(),
            decoder: (0..config.decoder_layers)
                .map(|_| DecoderBlock {
                    self_attn: Attention::zeros(e),
                    cross_attn: Attention::zeros(e),
                    ffn: FeedForward::zeros(e),
                })
                .collect(),
            out_proj: Linear {
                w: Mat::zeros(e, config.vocab_size),
                b: Mat::zeros(1, config.vocab_size),
            },
            disc: Linear {
                w: Mat::zeros(e, 1),
                b: Mat::zeros(1, 1),
            },
        }
    }

    /// Named views of every tensor, in a fixed order shared by
    /// initialization, the optimizer, and the checkpoint format.
    pub fn visit(&self) -> Vec<(String, &Mat<S>)> {
        let mut out: Vec<(String, &Mat<S>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_enc".into(), &self.pos_enc),
            ("pos_dec".into(), &self.pos_dec),
        ];
        for (i, block) in self.encoder.iter().enumerate() {
            for (suffix, mat) in [
                ("attn.wq", &block.attn.wq),
                ("attn.wk", &block.attn.wk),
                ("attn.wv", &block.attn.wv),
                ("attn.wo", &block.attn.wo),
                ("ffn.w1", &block.ffn.w1),
                ("ffn.b1", &block.ffn.b1),
                ("ffn.w2", &block.ffn.w2),
                ("ffn.b2", &block.ffn.b2),
            ] {
                out.push((format!("enc.{i}.{suffix}"), mat));
            }
        }
        for (i, block) in self.decoder.iter().enumerate() {
            for (suffix, mat) in [
                ("self.wq", &block.self_attn.wq),
                ("self.wk", &block.self_attn.wk),
                ("self.wv", &block.self_attn.wv),
                ("self.wo", &block.self_attn.wo),
                ("cross.wq", &block.cross_attn.wq),
                ("cross.wk", &block.cross_attn.wk),
                ("cross.wv", &block.cross_attn.wv),
                ("cross.wo", &block.cross_attn.wo),
                ("ffn.w1", &block.ffn.w1),
                ("ffn.b1", &block.ffn.b1),
                ("ffn.w2", &block.ffn.w2),
                ("ffn.b2", &block.ffn.b2),
            ] {
                out.push((format!("dec.{i}.{suffix}"), mat));
            }
        }
        out.push(("out_proj.w".into(), &self.out_proj.w));
        out.push(("out_proj.b".into(), &self.out_proj.b));
        out.push(("disc.w".into(), &self.disc.w));
        out.push(("disc.b".into(), &self.disc.b));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        let mut out: Vec<(String, &mut Mat<S>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_enc".into(), &mut self.pos_enc),
            ("pos_dec".into(), &mut self.pos_dec),
        ];
        for (i, block) in self.encoder.iter_mut().enumerate() {
            out.push((format!("enc.{i}.attn.wq"), &mut block.attn.wq));
            out.push((format!("enc.{i}.attn.wk"), &mut block.attn.wk));
            out.push((format!("enc.{i}.attn.wv"), &mut block.attn.wv));
            out.push((format!("enc.{i}.attn.wo"), &mut block.attn.wo));
            out.push((format!("enc.{i}.ffn.w1"), &mut block.ffn.w1));
            out.push((format!("enc.{i}.ffn.b1"), &mut block.ffn.b1));
            out.push((format!("enc.{i}.ffn.w2"), &mut block.ffn.w2));
            out.push((format!("enc.{i}.ffn.b2"), &mut block.ffn.b2));
        }
        for (i, block) in self.decoder.iter_mut().enumerate() {
            out.push((format!("dec.{i}.self.wq"), &mut block.self_attn.wq));
            out.push((format!("dec.{i}.self.wk"), &mut block.self_attn.wk));
            out.push((format!("dec.{i}.self.wv"), &mut block.self_attn.wv));
            out.push((format!("dec.{i}.self.wo"), &mut block.self_attn.wo));
            out.push((format!("dec.{i}.cross.wq"), &mut block.cross_attn.wq));
            out.push((format!("dec.{i}.cross.wk"), &mut block.cross_attn.wk));
            out.push((format!("dec.{i}.cross.wv"), &mut block.cross_attn.wv));
            out.push((format!("dec.{i}.cross.wo"), &mut block.cross_attn.wo));
            out.push((format!("dec.{i}.ffn.w1"), &mut block.ffn.w1));
            out.push((format!("dec.{i}.ffn.b1"), &mut block.ffn.b1));
            out.push((format!("dec.{i}.ffn.w2"), &mut block.ffn.w2));
            out.push((format!("dec.{i}.ffn.b2"), &mut block.ffn.b2));
        }
        out.push(("out_proj.w".into(), &mut self.out_proj.w));
        out.push(("out_proj.b".into(), &mut self.out_proj.b));
        out.push(("disc.w".into(), &mut self.disc.w));
        out.push(("disc.b".into(), &mut self.disc.b));
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.visit()
            .iter()
            .flat_map(|(_, m)| m.data().iter())
            .map(|v| v.to_f64_lossy().abs())
            .fold(0.0, f64::max)
    }

    pub fn grad_norm(&self) -> f64 {
        self.visit()
            .iter()
            .map(|(_, m)| m.frobenius_sq().to_f64_lossy())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, factor: S) {
        for (_, m) in self.visit_mut() {
            m.scale(factor);
        }
    }

    pub fn add_all(&mut self, other: &Params<S>) {
        for ((_, a), (_, b)) in self.visit_mut().into_iter().zip(other.visit()) {
            a.add_assign(b);
        }
    }

    pub fn zero_all(&mut self) {
        for (_, m) in self.visit_mut() {
            m.zero_out();
        }
    }
}

/// Which loss components feed a forward/backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentWeights {
    pub qa: bool,
    pub bce: bool,
    pub contra: bool,
}

impl ComponentWeights {
    pub fn all() -> Self {
        ComponentWeights {
            qa: true,
            bce: true,
            contra: true,
        }
    }

    pub fn only_qa() -> Self {
        ComponentWeights {
            qa: true,
            bce: false,
            contra: false,
        }
    }

    pub fn only_bce() -> Self {
        ComponentWeights {
            qa: false,
            bce: true,
            contra: false,
        }
    }

    pub fn only_contra() -> Self {
        ComponentWeights {
            qa: false,
            bce: false,
            contra: true,
        }
    }

    pub fn from_flags(flags: super::LossFlags) -> Self {
        ComponentWeights {
            qa: true,
            bce: flags.use_bce,
            contra: flags.use_contra,
        }
    }
}

/// Per-document encodings plus the discriminator view of them.
#[derive(Debug, Clone)]
pub struct EncodedBatch<S> {
    /// One T x E block per document, in rank order; together they form the
    /// M x T x E concatenation the decoder attends over.
    pub h: Vec<Mat<S>>,
    pub doc_embeddings: Vec<Vec<S>>,
    pub disc_logits: Vec<S>,
    pub disc_probs: Vec<S>,
}

impl<S: Scalar> EncodedBatch<S> {
    pub fn shape(&self) -> (usize, usize, usize) {
        let m = self.h.len();
        let (t, e) = self
            .h
            .first()
            .map(|b| (b.rows(), b.cols()))
            .unwrap_or((0, 0));
        (m, t, e)
    }

    /// The (M*T) x E concatenation along the sequence dimension.
    pub fn h_flat(&self) -> Mat<S> {
        let refs: Vec<&Mat<S>> = self.h.iter().collect();
        Mat::vstack(&refs)
    }
}

/// A tokenized training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub question: Vec<u32>,
    pub docs: Vec<Vec<u32>>,
    pub labels: Vec<bool>,
    /// Answer tokens terminated by the end marker.
    pub target: Vec<u32>,
}

/// Decoded answer plus per-document discriminator outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub answer: String,
    /// `(probability, decision)` per document; the decision applies the
    /// >= rule against the configured threshold.
    pub disc_outputs: Vec<(f64, bool)>,
}

struct AttnCache<S> {
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    probs: Mat<S>,
    ctx: Mat<S>,
}

struct FfnCache<S> {
    pre: Mat<S>,
    hidden: Mat<S>,
}

struct EncBlockCache<S> {
    x_in: Mat<S>,
    attn: AttnCache<S>,
    x_mid: Mat<S>,
    ffn: FfnCache<S>,
}

struct EncoderCache<S> {
    seq: Vec<u32>,
    blocks: Vec<EncBlockCache<S>>,
    h: Mat<S>,
}

struct DecBlockCache<S> {
    x_in: Mat<S>,
    self_attn: AttnCache<S>,
    x_mid: Mat<S>,
    cross: AttnCache<S>,
    x_after_cross: Mat<S>,
    ffn: FfnCache<S>,
}

struct DecoderCache<S> {
    inputs: Vec<u32>,
    blocks: Vec<DecBlockCache<S>>,
    hidden: Mat<S>,
    /// Per-step log-softmax over the vocabulary.
    log_probs: Mat<S>,
}

pub(crate) struct ForwardCache<S> {
    enc: Vec<EncoderCache<S>>,
    h_flat: Mat<S>,
    doc_means: Mat<S>,
    disc_logits: Vec<S>,
    disc_probs: Vec<S>,
    dec: Option<DecoderCache<S>>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn add_bias_rows<S: Scalar>(mat: &mut Mat<S>, bias: &Mat<S>) {
    for r in 0..mat.rows() {
        for (v, b) in mat.row_mut(r).iter_mut().zip(bias.row(0)) {
            *v += *b;
        }
    }
}

fn accumulate_bias_grad<S: Scalar>(grad: &mut Mat<S>, d_out: &Mat<S>) {
    for r in 0..d_out.rows() {
        for (g, &d) in grad.row_mut(0).iter_mut().zip(d_out.row(r)) {
            *g += d;
        }
    }
}

fn attention_forward<S: Scalar>(
    p: &Attention<S>,
    x: &Mat<S>,
    kv: &Mat<S>,
    causal: bool,
) -> (Mat<S>, AttnCache<S>) {
    let e = x.cols();
    let scale = S::one() / S::from_usize(e).sqrt();
    let q = x.matmul(&p.wq);
    let k = kv.matmul(&p.wk);
    let v = kv.matmul(&p.wv);
    let mut probs = q.matmul_nt(&k);
    probs.scale(scale);
    softmax_rows_masked(&mut probs, causal);
    let ctx = probs.matmul(&v);
    let out = ctx.matmul(&p.wo);
    (out, AttnCache { q, k, v, probs, ctx })
}

/// Returns gradients with respect to the query-side and key/value-side
/// inputs; parameter gradients accumulate into `g`.
fn attention_backward<S: Scalar>(
    p: &Attention<S>,
    g: &mut Attention<S>,
    cache: &AttnCache<S>,
    x: &Mat<S>,
    kv: &Mat<S>,
    d_out: &Mat<S>,
) -> (Mat<S>, Mat<S>) {
    let e = x.cols();
    let scale = S::one() / S::from_usize(e).sqrt();

    let d_ctx = d_out.matmul_nt(&p.wo);
    cache.ctx.matmul_tn_into(d_out, &mut g.wo);

    let d_probs = d_ctx.matmul_nt(&cache.v);
    let d_v = cache.probs.matmul_tn(&d_ctx);

    // softmax backward per row: ds = p .* (dp - <dp, p>)
    let mut d_scores = Mat::zeros(d_probs.rows(), d_probs.cols());
    for r in 0..d_probs.rows() {
        let p_row = cache.probs.row(r);
        let dp_row = d_probs.row(r);
        let inner = dot(dp_row, p_row);
        let ds_row = d_scores.row_mut(r);
        for ((ds, &dp), &pv) in ds_row.iter_mut().zip(dp_row).zip(p_row) {
            *ds = pv * (dp - inner);
        }
    }
    d_scores.scale(scale);

    let d_q = d_scores.matmul(&cache.k);
    let d_k = d_scores.matmul_tn(&cache.q);

    let d_x = d_q.matmul_nt(&p.wq);
    let mut d_kv = d_k.matmul_nt(&p.wk);
    d_kv.add_assign(&d_v.matmul_nt(&p.wv));

    x.matmul_tn_into(&d_q, &mut g.wq);
    kv.matmul_tn_into(&d_k, &mut g.wk);
    kv.matmul_tn_into(&d_v, &mut g.wv);
    (d_x, d_kv)
}

fn ffn_forward<S: Scalar>(p: &FeedForward<S>, x: &Mat<S>) -> (Mat<S>, FfnCache<S>) {
    let mut pre = x.matmul(&p.w1);
    add_bias_rows(&mut pre, &p.b1);
    let mut hidden = pre.clone();
    hidden
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(S::zero()));
    let mut out = hidden.matmul(&p.w2);
    add_bias_rows(&mut out, &p.b2);
    (out, FfnCache { pre, hidden })
}

fn ffn_backward<S: Scalar>(
    p: &FeedForward<S>,
    g: &mut FeedForward<S>,
    cache: &FfnCache<S>,
    x: &Mat<S>,
    d_out: &Mat<S>,
) -> Mat<S> {
    cache.hidden.matmul_tn_into(d_out, &mut g.w2);
    accumulate_bias_grad(&mut g.b2, d_out);
    let mut d_hidden = d_out.matmul_nt(&p.w2);
    for (dh, &pre) in d_hidden.data_mut().iter_mut().zip(cache.pre.data()) {
        if pre <= S::zero() {
            *dh = S::zero();
        }
    }
    x.matmul_tn_into(&d_hidden, &mut g.w1);
    accumulate_bias_grad(&mut g.b1, &d_hidden);
    d_hidden.matmul_nt(&p.w1)
}

pub struct ReaderModel<S: Scalar> {
    pub config: ReaderConfig,
    pub vocab: Vocab,
    params: Params<S>,
}

impl<S: Scalar> ReaderModel<S> {
    /// Seeded Xavier-uniform initialization; draws happen in f64 so that
    /// f32 and f64 models see the same underlying sequence.
    pub fn init(config: ReaderConfig, vocab: Vocab) -> Result<Self, ReaderError> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(ReaderError::Config(format!(
                "vocabulary has {} entries, config allows {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut params = Params::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (_, mat) in params.visit_mut() {
            let bound = (6.0 / (mat.rows() + mat.cols()) as f64).sqrt();
            for v in mat.data_mut() {
                *v = S::from_f64(rng.gen_range(-bound..bound));
            }
        }
        Ok(ReaderModel {
            config,
            vocab,
            params,
        })
    }

    pub fn from_parts(config: ReaderConfig, vocab: Vocab, params: Params<S>) -> Self {
        ReaderModel {
            config,
            vocab,
            params,
        }
    }

    pub fn params(&self) -> &Params<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<S> {
        &mut self.params
    }

    /// Question-prepended document sequence, truncated and padded to T.
    fn prep_sequence(&self, question: &[u32], doc: &[u32]) -> Vec<u32> {
        let t = self.config.max_seq_len;
        let mut seq = Vec::with_capacity(t);
        seq.extend(question.iter().take(t));
        let remaining = t - seq.len();
        seq.extend(doc.iter().take(remaining));
        seq.resize(t, PAD);
        seq
    }

    fn embed(&self, seq: &[u32], pos: &Mat<S>) -> Mat<S> {
        let e = self.config.embed_dim;
        Mat::from_fn(seq.len(), e, |r, c| {
            self.params.tok_emb.at(seq[r] as usize, c) + pos.at(r, c)
        })
    }

    fn encode_doc(&self, question: &[u32], doc: &[u32]) -> EncoderCache<S> {
        let seq = self.prep_sequence(question, doc);
        let mut x = self.embed(&seq, &self.params.pos_enc);
        let mut blocks = Vec::with_capacity(self.params.encoder.len());
        for block in &self.params.encoder {
            let x_in = x.clone();
            let (attn_out, attn) = attention_forward(&block.attn, &x_in, &x_in, false);
            let mut x_mid = x;
            x_mid.add_assign(&attn_out);
            let (ffn_out, ffn) = ffn_forward(&block.ffn, &x_mid);
            let mut x_next = x_mid.clone();
            x_next.add_assign(&ffn_out);
            blocks.push(EncBlockCache {
                x_in,
                attn,
                x_mid,
                ffn,
            });
            x = x_next;
        }
        EncoderCache { seq, blocks, h: x }
    }

    fn encode_internal(
        &self,
        question: &[u32],
        docs: &[Vec<u32>],
    ) -> Result<ForwardCache<S>, ReaderError> {
        if docs.is_empty() {
            return Err(ReaderError::Config("need at least one document".into()));
        }
        let t = self.config.max_seq_len;
        let e = self.config.embed_dim;
        let enc: Vec<EncoderCache<S>> = docs
            .iter()
            .map(|doc| self.encode_doc(question, doc))
            .collect();
        for cache in &enc {
            if cache.seq.len() != t {
                return Err(ReaderError::Internal(format!(
                    "sequence length {} after preparation, expected {t}",
                    cache.seq.len()
                )));
            }
        }
        let h_refs: Vec<&Mat<S>> = enc.iter().map(|c| &c.h).collect();
        let h_flat = Mat::vstack(&h_refs);

        let inv_t = S::one() / S::from_usize(t);
        let doc_means = Mat::from_fn(docs.len(), e, |m, c| {
            let mut acc = S::zero();
            for r in 0..t {
                acc += enc[m].h.at(r, c);
            }
            acc * inv_t
        });
        let disc_logits: Vec<S> = (0..docs.len())
            .map(|m| {
                let mut acc = self.params.disc.b.at(0, 0);
                for (c, w) in self.params.disc.w.data().iter().enumerate() {
                    acc += doc_means.at(m, c) * *w;
                }
                acc
            })
            .collect();
        let disc_probs: Vec<S> = disc_logits.iter().map(|&l| sigmoid(l)).collect();
        Ok(ForwardCache {
            enc,
            h_flat,
            doc_means,
            disc_logits,
            disc_probs,
            dec: None,
        })
    }

    /// Encodes the question-prepended documents independently and applies
    /// the discriminator head to each mean-pooled document encoding.
    pub fn encode(
        &self,
        question: &[u32],
        docs: &[Vec<u32>],
    ) -> Result<EncodedBatch<S>, ReaderError> {
        let cache = self.encode_internal(question, docs)?;
        Ok(EncodedBatch {
            h: cache.enc.iter().map(|c| c.h.clone()).collect(),
            doc_embeddings: (0..docs.len())
                .map(|m| cache.doc_means.row(m).to_vec())
                .collect(),
            disc_logits: cache.disc_logits,
            disc_probs: cache.disc_probs,
        })
    }

    fn decode_forward(&self, h_flat: &Mat<S>, inputs: &[u32]) -> DecoderCache<S> {
        let mut x = self.embed(inputs, &self.params.pos_dec);
        let mut blocks = Vec::with_capacity(self.params.decoder.len());
        for block in &self.params.decoder {
            let x_in = x.clone();
            let (self_out, self_attn) = attention_forward(&block.self_attn, &x_in, &x_in, true);
            let mut x_mid = x;
            x_mid.add_assign(&self_out);
            let (cross_out, cross) = attention_forward(&block.cross_attn, &x_mid, h_flat, false);
            let mut x_after_cross = x_mid.clone();
            x_after_cross.add_assign(&cross_out);
            let (ffn_out, ffn) = ffn_forward(&block.ffn, &x_after_cross);
            let mut x_next = x_after_cross.clone();
            x_next.add_assign(&ffn_out);
            blocks.push(DecBlockCache {
                x_in,
                self_attn,
                x_mid,
                cross,
                x_after_cross,
                ffn,
            });
            x = x_next;
        }
        let mut logits = x.matmul(&self.params.out_proj.w);
        add_bias_rows(&mut logits, &self.params.out_proj.b);
        let mut log_probs = logits;
        for r in 0..log_probs.rows() {
            let row = log_probs.row_mut(r);
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter() {
                sum += (*v - max).exp();
            }
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        DecoderCache {
            inputs: inputs.to_vec(),
            blocks,
            hidden: x,
            log_probs,
        }
    }

    fn forward_example(
        &self,
        example: &PreparedExample,
        weights: ComponentWeights,
        contra_score: ContraScore,
    ) -> Result<(LossBreakdown<S>, ForwardCache<S>), ReaderError> {
        if example.target.is_empty() {
            return Err(ReaderError::Internal("empty target sequence".into()));
        }
        if example.target.len() > self.config.max_answer_len {
            return Err(ReaderError::Internal(
                "target longer than max_answer_len".into(),
            ));
        }
        if example.labels.len() != example.docs.len() {
            return Err(ReaderError::Internal("label/doc count mismatch".into()));
        }
        let mut cache = self.encode_internal(&example.question, &example.docs)?;

        let mut l_qa = S::zero();
        if weights.qa {
            let mut inputs = Vec::with_capacity(example.target.len());
            inputs.push(BOS);
            inputs.extend(&example.target[..example.target.len() - 1]);
            let dec = self.decode_forward(&cache.h_flat, &inputs);
            for (step, &token) in example.target.iter().enumerate() {
                l_qa -= dec.log_probs.at(step, token as usize);
            }
            cache.dec = Some(dec);
        }

        let m = S::from_usize(example.docs.len());
        let mut l_bce = S::zero();
        if weights.bce {
            for (&logit, &label) in cache.disc_logits.iter().zip(&example.labels) {
                let t = if label { S::one() } else { S::zero() };
                l_bce += softplus(logit) - t * logit;
            }
            l_bce /= m;
        }

        let mut l_contra = S::zero();
        if weights.contra && example.labels.iter().any(|&t| t) {
            let scores: Vec<S> = match contra_score {
                ContraScore::Logit => cache.disc_logits.clone(),
                ContraScore::Probability => cache.disc_probs.clone(),
            };
            l_contra = super::loss::contrastive_loss(&scores, &example.labels)
                .map_err(ReaderError::Loss)?;
        }

        let breakdown = LossBreakdown {
            l_qa,
            l_bce,
            l_contra,
            total: l_qa + l_bce + l_contra,
        };
        Ok((breakdown, cache))
    }

    /// Loss of one example under the selected components (forward only).
    pub fn example_loss(
        &self,
        example: &PreparedExample,
        weights: ComponentWeights,
        contra_score: ContraScore,
    ) -> Result<LossBreakdown<S>, ReaderError> {
        self.forward_example(example, weights, contra_score)
            .map(|(b, _)| b)
    }

    /// Loss and parameter gradients of one example.
    pub fn example_grads(
        &self,
        example: &PreparedExample,
        weights: ComponentWeights,
        contra_score: ContraScore,
    ) -> Result<(LossBreakdown<S>, Params<S>), ReaderError> {
        let (breakdown, cache) = self.forward_example(example, weights, contra_score)?;
        let mut grads = Params::zeros(&self.config);
        self.backward_example(example, &cache, weights, contra_score, &mut grads);
        Ok((breakdown, grads))
    }

    fn backward_example(
        &self,
        example: &PreparedExample,
        cache: &ForwardCache<S>,
        weights: ComponentWeights,
        contra_score: ContraScore,
        grads: &mut Params<S>,
    ) {
        let m = example.docs.len();
        let t = self.config.max_seq_len;
        let e = self.config.embed_dim;
        let mut d_h_flat = Mat::zeros(m * t, e);

        // QA component: d logits = softmax - onehot, back through the decoder.
        if weights.qa {
            let dec = cache.dec.as_ref().expect("qa weight implies decoder ran");
            let steps = example.target.len();
            let mut d_logits = Mat::zeros(steps, self.config.vocab_size);
            for (step, &token) in example.target.iter().enumerate() {
                let lp_row = dec.log_probs.row(step);
                let d_row = d_logits.row_mut(step);
                for (d, &lp) in d_row.iter_mut().zip(lp_row) {
                    *d = lp.exp();
                }
                d_row[token as usize] -= S::one();
            }

            dec.hidden.matmul_tn_into(&d_logits, &mut grads.out_proj.w);
            accumulate_bias_grad(&mut grads.out_proj.b, &d_logits);
            let mut d_x = d_logits.matmul_nt(&self.params.out_proj.w);

            for i in (0..self.params.decoder.len()).rev() {
                let block = &self.params.decoder[i];
                let bc = &dec.blocks[i];
                let gb = &mut grads.decoder[i];

                let mut d_after_cross =
                    ffn_backward(&block.ffn, &mut gb.ffn, &bc.ffn, &bc.x_after_cross, &d_x);
                d_after_cross.add_assign(&d_x);

                let (d_xmid_cross, d_kv) = attention_backward(
                    &block.cross_attn,
                    &mut gb.cross_attn,
                    &bc.cross,
                    &bc.x_mid,
                    &cache.h_flat,
                    &d_after_cross,
                );
                d_h_flat.add_assign(&d_kv);
                let mut d_x_mid = d_xmid_cross;
                d_x_mid.add_assign(&d_after_cross);

                let (d_q_side, d_kv_side) = attention_backward(
                    &block.self_attn,
                    &mut gb.self_attn,
                    &bc.self_attn,
                    &bc.x_in,
                    &bc.x_in,
                    &d_x_mid,
                );
                let mut d_x_in = d_q_side;
                d_x_in.add_assign(&d_kv_side);
                d_x_in.add_assign(&d_x_mid);
                d_x = d_x_in;
            }

            for (r, &id) in dec.inputs.iter().enumerate() {
                let d_row = d_x.row(r).to_vec();
                for (c, d) in d_row.iter().enumerate() {
                    *grads.tok_emb.at_mut(id as usize, c) += *d;
                    *grads.pos_dec.at_mut(r, c) += *d;
                }
            }
        }

        // Discriminator head components.
        let mut d_disc_logits = vec![S::zero(); m];
        if weights.bce {
            let m_s = S::from_usize(m);
            for (i, (&p, &label)) in cache.disc_probs.iter().zip(&example.labels).enumerate() {
                let target = if label { S::one() } else { S::zero() };
                d_disc_logits[i] += (p - target) / m_s;
            }
        }
        if weights.contra && example.labels.iter().any(|&l| l) {
            let scores: Vec<S> = match contra_score {
                ContraScore::Logit => cache.disc_logits.clone(),
                ContraScore::Probability => cache.disc_probs.clone(),
            };
            let max = scores
                .iter()
                .cloned()
                .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
            let exps: Vec<S> = scores.iter().map(|&s| (s - max).exp()).collect();
            let den: S = exps.iter().cloned().sum();
            let num: S = exps
                .iter()
                .zip(&example.labels)
                .filter(|(_, &l)| l)
                .map(|(&e, _)| e)
                .sum();
            for i in 0..m {
                let mut d_score = exps[i] / den;
                if example.labels[i] {
                    d_score -= exps[i] / num;
                }
                match contra_score {
                    ContraScore::Logit => d_disc_logits[i] += d_score,
                    ContraScore::Probability => {
                        let p = cache.disc_probs[i];
                        d_disc_logits[i] += d_score * p * (S::one() - p);
                    }
                }
            }
        }

        let any_disc = d_disc_logits.iter().any(|&d| d != S::zero());
        if any_disc {
            let inv_t = S::one() / S::from_usize(t);
            for (i, &d_logit) in d_disc_logits.iter().enumerate() {
                if d_logit == S::zero() {
                    continue;
                }
                *grads.disc.b.at_mut(0, 0) += d_logit;
                for c in 0..e {
                    *grads.disc.w.at_mut(c, 0) += d_logit * cache.doc_means.at(i, c);
                }
                // d mean spreads uniformly over the T rows of document i
                let base = i * t;
                for r in 0..t {
                    for c in 0..e {
                        *d_h_flat.at_mut(base + r, c) +=
                            d_logit * self.params.disc.w.at(c, 0) * inv_t;
                    }
                }
            }
        }

        // Encoder backward per document.
        for (doc_idx, enc) in cache.enc.iter().enumerate() {
            let base = doc_idx * t;
            let mut d_x = Mat::from_fn(t, e, |r, c| d_h_flat.at(base + r, c));
            if d_x.data().iter().all(|&v| v == S::zero()) {
                continue;
            }
            for i in (0..self.params.encoder.len()).rev() {
                let block = &self.params.encoder[i];
                let bc = &enc.blocks[i];
                let gb = &mut grads.encoder[i];

                let mut d_x_mid =
                    ffn_backward(&block.ffn, &mut gb.ffn, &bc.ffn, &bc.x_mid, &d_x);
                d_x_mid.add_assign(&d_x);

                let (d_q_side, d_kv_side) = attention_backward(
                    &block.attn,
                    &mut gb.attn,
                    &bc.attn,
                    &bc.x_in,
                    &bc.x_in,
                    &d_x_mid,
                );
                let mut d_x_in = d_q_side;
                d_x_in.add_assign(&d_kv_side);
                d_x_in.add_assign(&d_x_mid);
                d_x = d_x_in;
            }
            for (r, &id) in enc.seq.iter().enumerate() {
                for c in 0..e {
                    let d = d_x.at(r, c);
                    *grads.tok_emb.at_mut(id as usize, c) += d;
                    *grads.pos_enc.at_mut(r, c) += d;
                }
            }
        }
    }

    /// Greedy decode plus per-document discriminator outputs, on token ids.
    pub fn predict_tokens(
        &self,
        question: &[u32],
        docs: &[Vec<u32>],
    ) -> Result<(Vec<u32>, Vec<(f64, bool)>), ReaderError> {
        let cache = self.encode_internal(question, docs)?;
        let disc_outputs: Vec<(f64, bool)> = cache
            .disc_probs
            .iter()
            .map(|p| {
                let p = p.to_f64_lossy();
                (p, p >= self.config.disc_threshold)
            })
            .collect();

        let mut ids = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..self.config.max_answer_len {
            let dec = self.decode_forward(&cache.h_flat, &ids);
            let row = dec.log_probs.row(dec.log_probs.rows() - 1);
            let mut best = 0usize;
            let mut best_v = S::neg_infinity();
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            let next = best as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            if ids.len() < self.config.max_answer_len {
                ids.push(next);
            } else {
                break;
            }
        }
        Ok((out, disc_outputs))
    }

    /// Greedy decode on raw strings.
    pub fn predict(
        &self,
        question: &str,
        docs: &[Document],
    ) -> Result<Prediction, ReaderError> {
        let q = self.vocab.encode(question);
        let doc_tokens: Vec<Vec<u32>> = docs
            .iter()
            .map(|d| self.vocab.encode(&doc_surface(d)))
            .collect();
        let (tokens, disc_outputs) = self.predict_tokens(&q, &doc_tokens)?;
        Ok(Prediction {
            answer: self.vocab.decode(&tokens),
            disc_outputs,
        })
    }

    /// Tokenizes an instance with its labeled retrieved set.
    pub fn prepare(&self, instance: &QAInstance, set: &RetrievedSet) -> PreparedExample {
        let question = self.vocab.encode(&instance.question);
        let docs: Vec<Vec<u32>> = set
            .documents
            .iter()
            .map(|d| self.vocab.encode(&doc_surface(d)))
            .collect();
        let labels: Vec<bool> = set.documents.iter().map(|d| d.perturbed).collect();
        let mut target = self.vocab.encode(instance.primary_answer());
        target.truncate(self.config.max_answer_len - 1);
        target.push(EOS);
        PreparedExample {
            question,
            docs,
            labels,
            target,
        }
    }
}

/// Text the reader sees for one document.
pub fn doc_surface(doc: &Document) -> String {
    if doc.title.is_empty() {
        doc.text.clone()
    } else {
        format!("{} {}", doc.title, doc.text)
    }
}
