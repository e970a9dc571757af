//! Feed-forward neural joint model.
//!
//! Predicts target word `t_i` from the `n−1` preceding target words, an
//! `m`-word source window centred on the source word `t_i` is affiliated
//! with, and a fixed sentence vector for the whole source sentence. The
//! concatenated input passes through two Relu layers to one unnormalized
//! score per output word. Training uses noise-contrastive estimation with
//! the normalizer fixed at 1, or the full softmax at small vocabularies.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use log::{debug, info, warn};
use rayon::prelude::*;

use crate::bilingual::REDUCE_CHUNK;
use crate::corpus::{AlignmentLinks, ParallelExample, SentenceIds, Vocabulary, BOS, EOS, UNK};
use crate::encoder::{EncoderParams, Linear};
use crate::error::{Error, Result};
use crate::math::{axpy, decay_slice, dot_slices, log_sum_exp, relu_in_place, xavier_fill, AliasTable, DenseMatrix, DenseVector, Rng};
use crate::scalar::Scalar;
use crate::snapshot::Snapshot;

/// Attempts to replace a noise draw that equals the gold word.
pub const GOLD_REDRAWS: usize = 10;

/// Architecture of a joint model.
#[derive(Clone, Debug, PartialEq)]
pub struct JointConfig {
    /// n-gram order; the history holds `order − 1` target words.
    pub order: usize,
    /// Source window width `m` (odd).
    pub window: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub source_input_vocab: usize,
    pub target_input_vocab: usize,
    pub output_vocab: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            order: 4,
            window: 11,
            embed_dim: 192,
            hidden: 512,
            source_input_vocab: 16_000,
            target_input_vocab: 16_000,
            output_vocab: 32_000,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order < 1 {
            return Err(Error::InvalidArgument("order must be at least 1".into()));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("source window must be odd, got {}", self.window)));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("embedding and hidden sizes must be positive".into()));
        }
        if self.source_input_vocab <= EOS as usize
            || self.target_input_vocab <= EOS as usize
            || self.output_vocab <= EOS as usize
        {
            return Err(Error::InvalidArgument("vocabulary limits must cover the reserved tokens".into()));
        }
        Ok(())
    }

    /// Width of the concatenated input layer.
    pub fn input_width(&self, sentence_dim: usize) -> usize {
        (self.order - 1 + self.window) * self.embed_dim + sentence_dim
    }
}

/// Everything the model conditions on for one target position.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow<T> {
    /// `order − 1` target input ids, oldest first.
    pub history: Vec<u32>,
    /// `window` source input ids.
    pub window: Vec<u32>,
    pub sentence: Arc<DenseVector<T>>,
    /// Output vocabulary id.
    pub gold: u32,
}

/// Source index each target position is affiliated with.
///
/// One link: that source word. Several: the middle one (lower median).
/// None: the nearest aligned target neighbour's affiliation, looking right
/// first at equal distance. With no links at all, position `i` maps to
/// `min(i, src_len − 1)`.
pub fn affiliations(links: &AlignmentLinks, src_len: usize, tgt_len: usize) -> Vec<usize> {
    let mut direct: Vec<Option<usize>> = vec![None; tgt_len];
    for (t, slot) in direct.iter_mut().enumerate() {
        let mut sources = links.sources_of(t);
        sources.retain(|&s| s < src_len);
        if !sources.is_empty() {
            sources.sort_unstable();
            *slot = Some(sources[(sources.len() - 1) / 2]);
        }
    }
    if direct.iter().all(Option::is_none) {
        return (0..tgt_len).map(|i| i.min(src_len.saturating_sub(1))).collect();
    }
    (0..tgt_len)
        .map(|i| {
            if let Some(a) = direct[i] {
                return a;
            }
            (1..tgt_len)
                .find_map(|d| {
                    let right = (i + d < tgt_len).then(|| direct[i + d]).flatten();
                    right.or_else(|| i.checked_sub(d).and_then(|j| direct[j]))
                })
                .expect("some position is aligned")
        })
        .collect()
}

/// Affiliation of the single target position `i`.
pub fn affiliation(i: usize, links: &AlignmentLinks, src_len: usize, tgt_len: usize) -> Result<usize> {
    if i >= tgt_len {
        return Err(Error::InvalidArgument(format!("target index {i} outside sentence of length {tgt_len}")));
    }
    Ok(affiliations(links, src_len, tgt_len)[i])
}

/// The `m` source ids centred on `centre`, padded with `<s>` on the left and
/// `</s>` on the right.
pub fn extract_window(source: &[u32], centre: usize, m: usize) -> Result<Vec<u32>> {
    if m.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("source window must be odd, got {m}")));
    }
    let half = (m - 1) / 2;
    Ok((0..m)
        .map(|k| {
            let pos = centre as isize + k as isize - half as isize;
            if pos < 0 {
                BOS
            } else if pos as usize >= source.len() {
                EOS
            } else {
                source[pos as usize]
            }
        })
        .collect())
}

/// Pre-projection encoder output for every source sentence, in inference
/// mode. Identical sentences share one allocation.
pub fn encode_sources<T: Scalar>(encoder: &EncoderParams<T>, sources: &[&SentenceIds]) -> Result<Vec<Arc<DenseVector<T>>>> {
    let mut unique: BTreeMap<&[u32], usize> = BTreeMap::new();
    let mut order = Vec::new();
    let slots: Vec<usize> = sources
        .iter()
        .map(|s| {
            let next = unique.len();
            *unique.entry(s.ids()).or_insert_with(|| {
                order.push(*s);
                next
            })
        })
        .collect();
    let vectors: Vec<Arc<DenseVector<T>>> = order
        .par_iter()
        .map(|s| encoder.encode(s).map(Arc::new))
        .collect::<Result<_>>()?;
    Ok(slots.into_iter().map(|i| Arc::clone(&vectors[i])).collect())
}

/// One shared all-zero sentence vector per sentence, for running the model
/// without global context.
pub fn zero_sentence_vectors<T: Scalar>(count: usize, dim: usize) -> Vec<Arc<DenseVector<T>>> {
    let zero = Arc::new(DenseVector::zeros(dim));
    vec![zero; count]
}

/// Unigram noise distribution over the output vocabulary.
#[derive(Clone, Debug)]
pub struct NoiseDistribution {
    probs: Vec<f64>,
    table: AliasTable,
}

impl NoiseDistribution {
    /// `(count + 1)^exponent`, renormalized. The add-one keeps every word,
    /// including `<unk>`, in the support.
    pub fn unigram(counts: &[u64], exponent: f64) -> Result<Self> {
        if !(exponent >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise exponent must be non-negative, got {exponent}")));
        }
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64 + 1.0).powf(exponent)).collect();
        Self::from_weights(&weights)
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Self::from_weights(&vec![1.0; size])
    }

    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let table = AliasTable::new(weights)?;
        let total: f64 = weights.iter().sum();
        Ok(NoiseDistribution {
            probs: weights.iter().map(|w| w / total).collect(),
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, w: u32) -> f64 {
        self.probs.get(w as usize).copied().unwrap_or(0.0)
    }

    pub fn sample(&self, rng: &mut Rng) -> u32 {
        self.table.sample(rng) as u32
    }

    /// `kappa` draws; a draw equal to `gold` is redrawn up to
    /// [`GOLD_REDRAWS`] times when `redraw_gold` is set.
    pub fn draw(&self, kappa: usize, gold: u32, redraw_gold: bool, rng: &mut Rng) -> Vec<u32> {
        (0..kappa)
            .map(|_| {
                let mut w = self.sample(rng);
                if redraw_gold {
                    for _ in 0..GOLD_REDRAWS {
                        if w != gold {
                            break;
                        }
                        w = self.sample(rng);
                    }
                }
                w
            })
            .collect()
    }
}

/// NCE posterior that `w` came from the data: `p̂ / (p̂ + κ·q)` with
/// `p̂ = exp(logit)`.
pub fn nce_posterior(logit: f64, kappa: f64, q: f64) -> f64 {
    sigmoid(logit - (kappa * q).ln())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogProbMode {
    /// Log-softmax over the whole output vocabulary.
    Exact,
    /// The raw gold logit, trusting the trained normalizer to be near 1.
    SelfNorm,
}

impl LogProbMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(LogProbMode::Exact),
            "self_norm" | "self-norm" => Ok(LogProbMode::SelfNorm),
            other => Err(Error::InvalidArgument(format!("unknown log-prob mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointModelParams<T> {
    pub source_embeddings: DenseMatrix<T>,
    pub target_embeddings: DenseMatrix<T>,
    pub hidden1: Linear<T>,
    pub hidden2: Linear<T>,
    pub output: Linear<T>,
    order: usize,
    window: usize,
    source_vocab: Vocabulary,
    target_vocab: Vocabulary,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct JointTrace<T> {
    pub input: Vec<T>,
    pub hidden1: Vec<T>,
    pub hidden2: Vec<T>,
}

/// Gradients of a joint model. Embedding and output rows are sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGrads<T> {
    pub source_rows: BTreeMap<u32, Vec<T>>,
    pub target_rows: BTreeMap<u32, Vec<T>>,
    pub hidden1: Linear<T>,
    pub hidden2: Linear<T>,
    /// Output row id → (weight row gradient, bias gradient).
    pub output_rows: BTreeMap<u32, (Vec<T>, T)>,
    /// Gradient reaching the sentence-vector input slot. Never applied:
    /// the encoder is frozen.
    pub sentence: Vec<T>,
}

impl<T: Scalar> JointGrads<T> {
    pub fn add_scaled(&mut self, other: &JointGrads<T>, s: T) {
        for (mine, theirs) in [
            (&mut self.source_rows, &other.source_rows),
            (&mut self.target_rows, &other.target_rows),
        ] {
            for (&id, g) in theirs {
                axpy(s, g, mine.entry(id).or_insert_with(|| vec![T::zero(); g.len()]));
            }
        }
        self.hidden1.add_scaled(&other.hidden1, s);
        self.hidden2.add_scaled(&other.hidden2, s);
        for (&id, (g, b)) in &other.output_rows {
            let (row, bias) = self
                .output_rows
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); g.len()], T::zero()));
            axpy(s, g, row);
            *bias += s * *b;
        }
        axpy(s, &other.sentence, &mut self.sentence);
    }
}

fn clamp(id: u32, limit: usize) -> u32 {
    if (id as usize) < limit {
        id
    } else {
        UNK
    }
}

impl<T: Scalar> JointModelParams<T> {
    /// Random initialization: uniform embeddings, Xavier hidden layers, small
    /// output weights with every bias at `−ln V` so the untrained model is
    /// already roughly self-normalized.
    pub fn random(
        config: &JointConfig,
        source_vocab: Vocabulary,
        target_vocab: Vocabulary,
        sentence_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.embed_dim;
        let src_rows = config.source_input_vocab.min(source_vocab.len());
        let tgt_rows = config.target_input_vocab.min(target_vocab.len());
        let out_rows = config.output_vocab.min(target_vocab.len());
        let bound = (3.0 / k as f64).sqrt();
        let mut source_embeddings = DenseMatrix::zeros(src_rows, k);
        xavier_fill(source_embeddings.as_mut_slice(), bound, &mut rng.derive(0));
        let mut target_embeddings = DenseMatrix::zeros(tgt_rows, k);
        xavier_fill(target_embeddings.as_mut_slice(), bound, &mut rng.derive(1));
        let input = config.input_width(sentence_dim);
        let hidden1 = Linear::xavier(input, config.hidden, &mut rng.derive(2));
        let hidden2 = Linear::xavier(config.hidden, config.hidden, &mut rng.derive(3));
        let mut output = Linear::xavier(config.hidden, out_rows, &mut rng.derive(4));
        for w in output.weight.as_mut_slice() {
            *w *= T::of(0.1);
        }
        let bias = T::of(-(out_rows as f64).ln());
        output.bias.as_mut_slice().iter_mut().for_each(|b| *b = bias);
        let params = JointModelParams {
            source_embeddings,
            target_embeddings,
            hidden1,
            hidden2,
            output,
            order: config.order,
            window: config.window,
            source_vocab,
            target_vocab,
        };
        params.check_shapes()?;
        Ok(params)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn embed_dim(&self) -> usize {
        self.source_embeddings.cols()
    }

    pub fn sentence_dim(&self) -> usize {
        self.hidden1.inputs() - (self.order - 1 + self.window) * self.embed_dim()
    }

    pub fn output_vocab_size(&self) -> usize {
        self.output.outputs()
    }

    pub fn source_vocab(&self) -> &Vocabulary {
        &self.source_vocab
    }

    pub fn target_vocab(&self) -> &Vocabulary {
        &self.target_vocab
    }

    pub fn config(&self) -> JointConfig {
        JointConfig {
            order: self.order,
            window: self.window,
            embed_dim: self.embed_dim(),
            hidden: self.hidden1.outputs(),
            source_input_vocab: self.source_embeddings.rows(),
            target_input_vocab: self.target_embeddings.rows(),
            output_vocab: self.output.outputs(),
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let k = self.embed_dim();
        if self.target_embeddings.cols() != k {
            return Err(Error::dims("joint target embeddings", k, self.target_embeddings.cols()));
        }
        if self.window.is_multiple_of(2) || self.order < 1 {
            return Err(Error::InvalidArgument("joint model needs order ≥ 1 and an odd window".into()));
        }
        let context = (self.order - 1 + self.window) * k;
        if self.hidden1.inputs() < context {
            return Err(Error::dims("joint hidden1 inputs", context, self.hidden1.inputs()));
        }
        if self.hidden2.inputs() != self.hidden1.outputs() {
            return Err(Error::dims("joint hidden2 inputs", self.hidden1.outputs(), self.hidden2.inputs()));
        }
        if self.output.inputs() != self.hidden2.outputs() {
            return Err(Error::dims("joint output inputs", self.hidden2.outputs(), self.output.inputs()));
        }
        if self.source_embeddings.rows() > self.source_vocab.len() || self.target_embeddings.rows() > self.target_vocab.len() {
            return Err(Error::InvalidArgument("joint input rows exceed vocabulary".into()));
        }
        if self.output.outputs() > self.target_vocab.len() {
            return Err(Error::InvalidArgument("joint output rows exceed target vocabulary".into()));
        }
        Ok(())
    }

    /// Maps a target vocabulary id into the output vocabulary.
    pub fn output_id(&self, id: u32) -> u32 {
        clamp(id, self.output.outputs())
    }

    /// Context for target position `i`, given the affiliation of every
    /// position. Ids are clamped into the input and output vocabularies.
    pub fn context_at(
        &self,
        source: &SentenceIds,
        target: &SentenceIds,
        affiliations: &[usize],
        i: usize,
        sentence: &Arc<DenseVector<T>>,
    ) -> Result<ContextWindow<T>> {
        if sentence.len() != self.sentence_dim() {
            return Err(Error::dims("sentence vector", self.sentence_dim(), sentence.len()));
        }
        let t = target.ids();
        if i >= t.len() || affiliations.len() != t.len() {
            return Err(Error::InvalidArgument(format!("target position {i} outside sentence of length {}", t.len())));
        }
        let tgt_limit = self.target_embeddings.rows();
        let src_limit = self.source_embeddings.rows();
        let history = (0..self.order - 1)
            .map(|k| {
                let back = self.order - 1 - k;
                i.checked_sub(back).map_or(BOS, |j| clamp(t[j], tgt_limit))
            })
            .collect();
        let window = extract_window(source.ids(), affiliations[i], self.window)?
            .into_iter()
            .map(|id| clamp(id, src_limit))
            .collect();
        Ok(ContextWindow {
            history,
            window,
            sentence: Arc::clone(sentence),
            gold: self.output_id(t[i]),
        })
    }

    /// Context for target position `i` of an aligned example.
    pub fn assemble_context(&self, example: &ParallelExample, i: usize, sentence: &Arc<DenseVector<T>>) -> Result<ContextWindow<T>> {
        let links = example
            .alignment
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("joint model contexts need a word alignment".into()))?;
        let aff = affiliations(links, example.source.len(), example.target.len());
        self.context_at(&example.source, &example.target, &aff, i, sentence)
    }

    /// Contexts for every target position of every example.
    pub fn build_contexts(&self, corpus: &[ParallelExample], sentences: &[Arc<DenseVector<T>>]) -> Result<Vec<ContextWindow<T>>> {
        if sentences.len() != corpus.len() {
            return Err(Error::dims("sentence vectors", corpus.len(), sentences.len()));
        }
        let per_sentence: Vec<Vec<ContextWindow<T>>> = corpus
            .par_iter()
            .zip(sentences)
            .enumerate()
            .map(|(n, (ex, sv))| {
                let links = ex.alignment.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("sentence pair {n} has no word alignment"))
                })?;
                let aff = affiliations(links, ex.source.len(), ex.target.len());
                (0..ex.target.len())
                    .map(|i| self.context_at(&ex.source, &ex.target, &aff, i, sv))
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(per_sentence.into_iter().flatten().collect())
    }

    fn check_context(&self, ctx: &ContextWindow<T>) -> Result<()> {
        if ctx.history.len() != self.order - 1 {
            return Err(Error::dims("context history", self.order - 1, ctx.history.len()));
        }
        if ctx.window.len() != self.window {
            return Err(Error::dims("context window", self.window, ctx.window.len()));
        }
        if ctx.sentence.len() != self.sentence_dim() {
            return Err(Error::dims("context sentence vector", self.sentence_dim(), ctx.sentence.len()));
        }
        let bad_t = ctx.history.iter().find(|&&id| id as usize >= self.target_embeddings.rows());
        let bad_s = ctx.window.iter().find(|&&id| id as usize >= self.source_embeddings.rows());
        if let Some(id) = bad_t.or(bad_s) {
            return Err(Error::InvalidArgument(format!("context id {id} outside the input vocabulary")));
        }
        if ctx.gold as usize >= self.output.outputs() {
            return Err(Error::InvalidArgument(format!("gold id {} outside the output vocabulary", ctx.gold)));
        }
        Ok(())
    }

    /// Runs the network up to the last hidden layer.
    pub fn trace(&self, ctx: &ContextWindow<T>) -> Result<JointTrace<T>> {
        self.check_context(ctx)?;
        let mut input = Vec::with_capacity(self.hidden1.inputs());
        for &id in &ctx.history {
            input.extend_from_slice(self.target_embeddings.row(id as usize));
        }
        for &id in &ctx.window {
            input.extend_from_slice(self.source_embeddings.row(id as usize));
        }
        input.extend_from_slice(ctx.sentence.as_slice());
        let mut hidden1 = self.hidden1.forward(&input);
        relu_in_place(&mut hidden1);
        let mut hidden2 = self.hidden2.forward(&hidden1);
        relu_in_place(&mut hidden2);
        Ok(JointTrace { input, hidden1, hidden2 })
    }

    fn row_logit(&self, trace: &JointTrace<T>, w: u32) -> T {
        self.output.bias[w as usize] + dot_slices(self.output.weight.row(w as usize), &trace.hidden2)
    }

    /// Unnormalized score of every output word.
    pub fn forward_logits(&self, ctx: &ContextWindow<T>) -> Result<DenseVector<T>> {
        let trace = self.trace(ctx)?;
        Ok(DenseVector::from(self.output.forward(&trace.hidden2)))
    }

    pub fn log_prob(&self, ctx: &ContextWindow<T>, mode: LogProbMode) -> Result<f64> {
        let trace = self.trace(ctx)?;
        Ok(match mode {
            LogProbMode::SelfNorm => self.row_logit(&trace, ctx.gold).to_f64(),
            LogProbMode::Exact => {
                let logits = self.output.forward(&trace.hidden2);
                (logits[ctx.gold as usize] - log_sum_exp(&logits)).to_f64()
            }
        })
    }

    /// Log-probability of every output word under the exact softmax.
    pub fn log_probs(&self, ctx: &ContextWindow<T>) -> Result<Vec<f64>> {
        let logits = self.forward_logits(ctx)?;
        let z = log_sum_exp(logits.as_slice());
        Ok(logits.as_slice().iter().map(|&l| (l - z).to_f64()).collect())
    }

    pub fn zero_grads(&self) -> JointGrads<T> {
        JointGrads {
            source_rows: BTreeMap::new(),
            target_rows: BTreeMap::new(),
            hidden1: self.hidden1.zeros_like(),
            hidden2: self.hidden2.zeros_like(),
            output_rows: BTreeMap::new(),
            sentence: vec![T::zero(); self.sentence_dim()],
        }
    }

    /// Accumulates `scale ×` the gradient implied by logit gradients
    /// `(row, ∂L/∂logit)` into `grads`.
    fn backward(&self, ctx: &ContextWindow<T>, trace: &JointTrace<T>, logit_grads: &[(u32, T)], scale: T, grads: &mut JointGrads<T>) {
        let hidden = self.hidden2.outputs();
        let mut g_h2 = vec![T::zero(); hidden];
        for &(w, g) in logit_grads {
            let g = g * scale;
            let (row, bias) = grads
                .output_rows
                .entry(w)
                .or_insert_with(|| (vec![T::zero(); hidden], T::zero()));
            axpy(g, &trace.hidden2, row);
            *bias += g;
            axpy(g, self.output.weight.row(w as usize), &mut g_h2);
        }
        for (g, &h) in g_h2.iter_mut().zip(&trace.hidden2) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        let mut g_h1 = self.hidden2.backward(&trace.hidden1, &g_h2, &mut grads.hidden2);
        for (g, &h) in g_h1.iter_mut().zip(&trace.hidden1) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        let g_in = self.hidden1.backward(&trace.input, &g_h1, &mut grads.hidden1);
        let k = self.embed_dim();
        let mut chunks = g_in.chunks(k);
        for &id in &ctx.history {
            let g = chunks.next().expect("history slot");
            axpy(T::one(), g, grads.target_rows.entry(id).or_insert_with(|| vec![T::zero(); k]));
        }
        for &id in &ctx.window {
            let g = chunks.next().expect("window slot");
            axpy(T::one(), g, grads.source_rows.entry(id).or_insert_with(|| vec![T::zero(); k]));
        }
        let offset = (ctx.history.len() + ctx.window.len()) * k;
        axpy(T::one(), &g_in[offset..], &mut grads.sentence);
    }

    fn nce_terms(&self, ctx: &ContextWindow<T>, trace: &JointTrace<T>, noise: &[u32], q: &NoiseDistribution, kappa: f64) -> Result<(f64, Vec<(u32, T)>)> {
        if kappa < 1.0 {
            return Err(Error::InvalidArgument(format!("κ must be at least 1, got {kappa}")));
        }
        let shifted = |w: u32| -> Result<f64> {
            let qw = q.prob(w);
            if !(qw > 0.0) {
                return Err(Error::InvalidArgument(format!("noise distribution gives word {w} zero probability")));
            }
            Ok(self.row_logit(trace, w).to_f64() - (kappa * qw).ln())
        };
        let mut terms = Vec::with_capacity(noise.len() + 1);
        let x = shifted(ctx.gold)?;
        let mut loss = softplus(-x);
        terms.push((ctx.gold, T::of(sigmoid(x) - 1.0)));
        for &w in noise {
            if w as usize >= self.output.outputs() {
                return Err(Error::InvalidArgument(format!("noise id {w} outside the output vocabulary")));
            }
            let x = shifted(w)?;
            loss += softplus(x);
            terms.push((w, T::of(sigmoid(x))));
        }
        Ok((loss, terms))
    }

    fn softmax_terms(&self, ctx: &ContextWindow<T>, trace: &JointTrace<T>) -> (f64, Vec<(u32, T)>) {
        let logits = self.output.forward(&trace.hidden2);
        let z = log_sum_exp(&logits);
        let loss = (z - logits[ctx.gold as usize]).to_f64();
        let terms = logits
            .iter()
            .enumerate()
            .map(|(w, &l)| {
                let p = (l - z).exp();
                let g = if w as u32 == ctx.gold { p - T::one() } else { p };
                (w as u32, g)
            })
            .collect();
        (loss, terms)
    }

    /// NCE loss `−ln P(gold) − Σ ln(1 − P(w))` over the given noise draws,
    /// with its gradient.
    pub fn nce_loss(&self, ctx: &ContextWindow<T>, noise: &[u32], q: &NoiseDistribution, kappa: f64) -> Result<(f64, JointGrads<T>)> {
        let trace = self.trace(ctx)?;
        let (loss, terms) = self.nce_terms(ctx, &trace, noise, q, kappa)?;
        let mut grads = self.zero_grads();
        self.backward(ctx, &trace, &terms, T::one(), &mut grads);
        Ok((loss, grads))
    }

    /// Full-softmax cross-entropy with its gradient.
    pub fn softmax_loss(&self, ctx: &ContextWindow<T>) -> Result<(f64, JointGrads<T>)> {
        let trace = self.trace(ctx)?;
        let (loss, terms) = self.softmax_terms(ctx, &trace);
        let mut grads = self.zero_grads();
        self.backward(ctx, &trace, &terms, T::one(), &mut grads);
        Ok((loss, grads))
    }

    pub fn sq_norm(&self) -> T {
        self.source_embeddings.sq_norm()
            + self.target_embeddings.sq_norm()
            + self.hidden1.sq_norm()
            + self.hidden2.sq_norm()
            + self.output.sq_norm()
    }

    /// SGD step. With `l2 > 0` every parameter decays, touched or not.
    pub fn apply_grads(&mut self, grads: &JointGrads<T>, lr: T, l2: T) {
        if l2 > T::zero() {
            decay_slice(self.source_embeddings.as_mut_slice(), lr, l2);
            decay_slice(self.target_embeddings.as_mut_slice(), lr, l2);
            decay_slice(self.output.weight.as_mut_slice(), lr, l2);
            decay_slice(self.output.bias.as_mut_slice(), lr, l2);
        }
        self.hidden1.sgd(&grads.hidden1, lr, l2);
        self.hidden2.sgd(&grads.hidden2, lr, l2);
        for (&id, g) in &grads.source_rows {
            axpy(-lr, g, self.source_embeddings.row_mut(id as usize));
        }
        for (&id, g) in &grads.target_rows {
            axpy(-lr, g, self.target_embeddings.row_mut(id as usize));
        }
        for (&id, (g, b)) in &grads.output_rows {
            axpy(-lr, g, self.output.weight.row_mut(id as usize));
            self.output.bias.as_mut_slice()[id as usize] -= lr * *b;
        }
    }

    pub fn to_snapshot(&self) -> Snapshot<T> {
        let mut snap = Snapshot::new("nnjm");
        snap.set_meta("order", self.order);
        snap.set_meta("window", self.window);
        put_vocab(&mut snap, "src_vocab", &self.source_vocab);
        put_vocab(&mut snap, "tgt_vocab", &self.target_vocab);
        snap.put_matrix("src_emb", &self.source_embeddings);
        snap.put_matrix("tgt_emb", &self.target_embeddings);
        self.hidden1.store(&mut snap, "hidden1");
        self.hidden2.store(&mut snap, "hidden2");
        self.output.store(&mut snap, "output");
        snap
    }

    pub fn from_snapshot(mut snap: Snapshot<T>) -> Result<Self> {
        snap.expect_kind("nnjm")?;
        let params = JointModelParams {
            order: snap.meta("order")?,
            window: snap.meta("window")?,
            source_vocab: take_vocab(&mut snap, "src_vocab")?,
            target_vocab: take_vocab(&mut snap, "tgt_vocab")?,
            source_embeddings: snap.take_matrix("src_emb")?,
            target_embeddings: snap.take_matrix("tgt_emb")?,
            hidden1: Linear::restore(&mut snap, "hidden1")?,
            hidden2: Linear::restore(&mut snap, "hidden2")?,
            output: Linear::restore(&mut snap, "output")?,
        };
        params.check_shapes()?;
        Ok(params)
    }
}

fn put_vocab<T: Scalar>(snap: &mut Snapshot<T>, name: &str, vocab: &Vocabulary) {
    snap.lists.insert(name.to_string(), vocab.words().to_vec());
    snap.lists
        .insert(format!("{name}_freq"), vocab.freqs().iter().map(u64::to_string).collect());
}

fn take_vocab<T: Scalar>(snap: &mut Snapshot<T>, name: &str) -> Result<Vocabulary> {
    let words = snap.take_list(name)?;
    let freqs = snap
        .take_list(&format!("{name}_freq"))?
        .iter()
        .map(|f| f.parse().map_err(|_| Error::Snapshot(format!("bad frequency {f:?}"))))
        .collect::<Result<Vec<u64>>>()?;
    Vocabulary::from_words(words, freqs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Nce,
    Softmax,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nce" => Ok(Objective::Nce),
            "softmax" => Ok(Objective::Softmax),
            other => Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnjmTrainConfig {
    pub objective: Objective,
    /// Noise samples per example.
    pub kappa: usize,
    pub noise_exponent: f64,
    pub redraw_gold: bool,
    pub lr: f64,
    /// Factor applied to the learning rate whenever held-out cross-entropy
    /// rises; 1 keeps it constant.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub l2: f64,
    pub seed: u64,
    pub heldout_fraction: f64,
    /// Held-out cross-entropy uses the exact softmax up to this output
    /// vocabulary size and the self-normalized logit above it.
    pub exact_eval_limit: usize,
}

impl Default for NnjmTrainConfig {
    fn default() -> Self {
        NnjmTrainConfig {
            objective: Objective::Nce,
            kappa: 100,
            noise_exponent: 0.75,
            redraw_gold: true,
            lr: 0.05,
            lr_decay: 0.5,
            epochs: 5,
            batch: 32,
            l2: 0.0,
            seed: 1,
            heldout_fraction: 0.05,
            exact_eval_limit: 5_000,
        }
    }
}

impl NnjmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 {
            return Err(Error::InvalidArgument("κ must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.l2 >= 0.0) || !(self.noise_exponent >= 0.0) {
            return Err(Error::InvalidArgument("lr must be positive; l2 and noise exponent non-negative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("lr decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidArgument("held-out fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnjmEpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's updates.
    pub train_loss: f64,
    /// Mean held-out `−log p(gold)` in nats.
    pub heldout_cross_entropy: Option<f64>,
    pub exact: bool,
    pub lr: f64,
}

impl fmt::Display for NnjmEpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t", self.epoch, self.train_loss)?;
        match self.heldout_cross_entropy {
            Some(h) => write!(f, "{h:.6}")?,
            None => write!(f, "-")?,
        }
        write!(f, "\t{}\t{:.6}", if self.exact { "exact" } else { "self_norm" }, self.lr)
    }
}

/// Mean `−log p(gold)` over `contexts`.
pub fn cross_entropy<T: Scalar>(model: &JointModelParams<T>, contexts: &[ContextWindow<T>], mode: LogProbMode) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total: f64 = contexts
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| chunk.iter().map(|c| model.log_prob(c, mode)).sum::<Result<f64>>())
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(-total / contexts.len() as f64)
}

/// Trains `model` on the aligned `corpus`. `sentences[j]` is the fixed
/// sentence vector of `corpus[j]`; the last `heldout_fraction` of sentences
/// are held out for the per-epoch cross-entropy.
pub fn train_nnjm<T: Scalar>(
    model: &mut JointModelParams<T>,
    corpus: &[ParallelExample],
    sentences: &[Arc<DenseVector<T>>],
    config: &NnjmTrainConfig,
    mut on_epoch: impl FnMut(&NnjmEpochLog),
) -> Result<Vec<NnjmEpochLog>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if sentences.len() != corpus.len() {
        return Err(Error::dims("sentence vectors", corpus.len(), sentences.len()));
    }
    let held_count = ((corpus.len() as f64) * config.heldout_fraction).floor() as usize;
    let held_count = held_count.min(corpus.len() - 1);
    let split = corpus.len() - held_count;
    let train = model.build_contexts(&corpus[..split], &sentences[..split])?;
    let heldout = model.build_contexts(&corpus[split..], &sentences[split..])?;
    debug!("joint model: {} training and {} held-out contexts", train.len(), heldout.len());

    let mut counts = vec![0u64; model.output_vocab_size()];
    for c in &train {
        counts[c.gold as usize] += 1;
    }
    let noise = NoiseDistribution::unigram(&counts, config.noise_exponent)?;
    let kappa = config.kappa as f64;
    let eval_mode = if model.output_vocab_size() <= config.exact_eval_limit {
        LogProbMode::Exact
    } else {
        LogProbMode::SelfNorm
    };

    let root = Rng::new(config.seed);
    let mut lr = config.lr;
    let mut previous: Option<f64> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let epoch_rng = root.derive(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        epoch_rng.derive(u64::MAX).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let lr_t = T::of(lr);
        let l2 = T::of(config.l2);

        for batch in order.chunks(config.batch) {
            let scale = T::one() / T::of(batch.len() as f64);
            let current = &*model;
            let partials: Vec<(f64, JointGrads<T>)> = batch
                .par_chunks(REDUCE_CHUNK)
                .map(|chunk| {
                    let mut acc = current.zero_grads();
                    let mut loss = 0.0;
                    for &i in chunk {
                        let ctx = &train[i];
                        let trace = current.trace(ctx)?;
                        let (l, terms) = match config.objective {
                            Objective::Nce => {
                                let mut rng = epoch_rng.derive(i as u64);
                                let draws = noise.draw(config.kappa, ctx.gold, config.redraw_gold, &mut rng);
                                current.nce_terms(ctx, &trace, &draws, &noise, kappa)?
                            }
                            Objective::Softmax => current.softmax_terms(ctx, &trace),
                        };
                        loss += l;
                        current.backward(ctx, &trace, &terms, scale, &mut acc);
                    }
                    Ok((loss, acc))
                })
                .collect::<Result<_>>()?;

            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for (l, g) in &partials {
                batch_loss += l;
                grads.add_scaled(g, T::one());
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("joint model minibatch loss {batch_loss} in epoch {epoch}")));
            }
            epoch_loss += batch_loss;
            model.apply_grads(&grads, lr_t, l2);
        }

        let heldout_cross_entropy = if heldout.is_empty() {
            None
        } else {
            let ce = cross_entropy(model, &heldout, eval_mode)?;
            if !ce.is_finite() {
                return Err(Error::NonFinite(format!("held-out cross-entropy after epoch {epoch}")));
            }
            Some(ce)
        };
        let entry = NnjmEpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            heldout_cross_entropy,
            exact: eval_mode == LogProbMode::Exact,
            lr,
        };
        info!("epoch {entry}");
        on_epoch(&entry);
        if let (Some(prev), Some(now)) = (previous, heldout_cross_entropy) {
            if now > prev && config.lr_decay < 1.0 {
                lr *= config.lr_decay;
                warn!("held-out cross-entropy rose from {prev:.4} to {now:.4}; learning rate now {lr}");
            }
        }
        previous = heldout_cross_entropy.or(previous);
        log.push(entry);
    }
    Ok(log)
}
