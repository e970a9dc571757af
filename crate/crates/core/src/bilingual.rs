//! Bilingually-constrained training of two chunk encoders.
//!
//! Each language has its own encoder tower and its own projection into a
//! shared space. Translation pairs are pushed to score higher (dot product)
//! than sampled non-translations by a margin.

use std::fmt;

use log::{debug, info};
use rayon::prelude::*;

use crate::corpus::{ParallelExample, SentenceIds, Vocabulary};
use crate::encoder::{EncoderConfig, EncoderGrads, EncoderParams, Pass};
use crate::error::{Error, Result};
use crate::math::{dot_slices, DenseVector, Rng};
use crate::scalar::Scalar;
use crate::snapshot::Snapshot;

/// Source and target towers.
#[derive(Clone, Debug, PartialEq)]
pub struct BccnnModel<T> {
    pub source: EncoderParams<T>,
    pub target: EncoderParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BccnnGrads<T> {
    pub source: EncoderGrads<T>,
    pub target: EncoderGrads<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    /// L2 weight λ.
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Target-side negatives per pair per epoch.
    pub negatives: usize,
    /// Also draw source-side negatives (`f*` against `e`).
    pub source_negatives: bool,
    pub seed: u64,
    /// Trailing fraction of the corpus held out for logging.
    pub heldout_fraction: f64,
    pub distractors: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 1.0,
            l2: 1e-4,
            lr: 0.01,
            epochs: 10,
            batch: 16,
            negatives: 1,
            source_negatives: false,
            seed: 1,
            heldout_fraction: 0.05,
            distractors: 99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.l2)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.negatives == 0 {
            return Err(Error::InvalidArgument("batch and negatives must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidArgument("held-out fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Dot-product similarity; higher means closer.
pub fn similarity<T: Scalar>(a: &DenseVector<T>, b: &DenseVector<T>) -> Result<T> {
    a.dot(b)
}

/// `max(0, margin + sim_neg − sim_pos)`.
pub fn hinge_loss<T: Scalar>(sim_pos: T, sim_neg: T, margin: T) -> T {
    (margin + sim_neg - sim_pos).max(T::zero())
}

/// Uniform index `j ≠ pair_index` whose sentence differs from
/// `sentences[pair_index]`.
pub fn sample_negative(pair_index: usize, sentences: &[SentenceIds], rng: &mut Rng) -> Result<usize> {
    let n = sentences.len();
    if n < 2 {
        return Err(Error::InvalidArgument("negative sampling needs at least two sentences".into()));
    }
    let own = &sentences[pair_index];
    for _ in 0..64 {
        let mut j = rng.below(n - 1);
        if j >= pair_index {
            j += 1;
        }
        if sentences[j] != *own {
            return Ok(j);
        }
    }
    // Heavy duplication: fall back to drawing from the explicit valid set.
    let valid: Vec<usize> = (0..n).filter(|&j| sentences[j] != *own).collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(
            "every sentence in the corpus is identical; no negative exists".into(),
        ));
    }
    Ok(valid[rng.below(valid.len())])
}

/// Negatives fixed per pair index, for reproducible objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Negatives {
    pub target: Vec<Vec<SentenceIds>>,
    pub source: Vec<Vec<SentenceIds>>,
}

impl Negatives {
    pub fn draw(corpus: &[ParallelExample], count: usize, source_side: bool, root: &Rng) -> Result<Self> {
        let targets: Vec<SentenceIds> = corpus.iter().map(|p| p.target.clone()).collect();
        let sources: Vec<SentenceIds> = corpus.iter().map(|p| p.source.clone()).collect();
        let mut target = Vec::with_capacity(corpus.len());
        let mut source = Vec::with_capacity(corpus.len());
        for i in 0..corpus.len() {
            let mut rng = root.derive(i as u64);
            target.push(
                (0..count)
                    .map(|_| sample_negative(i, &targets, &mut rng).map(|j| targets[j].clone()))
                    .collect::<Result<_>>()?,
            );
            source.push(if source_side {
                (0..count)
                    .map(|_| sample_negative(i, &sources, &mut rng).map(|j| sources[j].clone()))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            });
        }
        Ok(Negatives { target, source })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_objective: f64,
    pub heldout_objective: Option<f64>,
    pub precision_at_1: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        write!(
            f,
            "{}\t{:.6}\t{}\t{}",
            self.epoch,
            self.train_objective,
            opt(self.heldout_objective),
            opt(self.precision_at_1)
        )
    }
}

impl<T: Scalar> BccnnModel<T> {
    pub fn random(
        config: &EncoderConfig,
        source_vocab: Vocabulary,
        target_vocab: Vocabulary,
        rng: &mut Rng,
    ) -> Result<Self> {
        let source = EncoderParams::random(config, source_vocab, rng)?;
        let target = EncoderParams::random(config, target_vocab, rng)?;
        Self::new(source, target)
    }

    pub fn new(source: EncoderParams<T>, target: EncoderParams<T>) -> Result<Self> {
        if source.output_dim() != target.output_dim() {
            return Err(Error::dims("shared space", source.output_dim(), target.output_dim()));
        }
        Ok(BccnnModel { source, target })
    }

    pub fn zero_grads(&self) -> BccnnGrads<T> {
        BccnnGrads {
            source: self.source.zero_grads(),
            target: self.target.zero_grads(),
        }
    }

    pub fn sq_norm(&self) -> T {
        self.source.sq_norm() + self.target.sq_norm()
    }

    pub fn apply_grads(&mut self, grads: &BccnnGrads<T>, lr: T, l2: T) {
        self.source.apply_grads(&grads.source, lr, l2);
        self.target.apply_grads(&grads.target, lr, l2);
    }

    /// Shared-space similarity of a sentence pair in inference mode.
    pub fn pair_similarity(&self, f: &SentenceIds, e: &SentenceIds) -> Result<T> {
        similarity(&self.source.encode_shared(f)?, &self.target.encode_shared(e)?)
    }

    /// Mean hinge loss of one pair over its negatives, with gradients when
    /// `want_grads`. `dropout` switches the towers to train mode with
    /// per-pass generators derived from it.
    pub fn pair_objective(
        &self,
        f: &SentenceIds,
        e: &SentenceIds,
        target_negatives: &[&SentenceIds],
        source_negatives: &[&SentenceIds],
        margin: T,
        dropout: Option<&Rng>,
        want_grads: bool,
    ) -> Result<(T, Option<BccnnGrads<T>>)> {
        let run = |tower: &EncoderParams<T>, s: &SentenceIds, stream: u64| match dropout {
            Some(root) => tower.forward_shared(s, Pass::Train(&mut root.derive(stream))),
            None => tower.forward_shared(s, Pass::Infer),
        };
        let (of, tf) = run(&self.source, f, 0)?;
        let (oe, te) = run(&self.target, e, 1)?;
        let tneg = target_negatives
            .iter()
            .enumerate()
            .map(|(k, s)| run(&self.target, s, 2 + k as u64))
            .collect::<Result<Vec<_>>>()?;
        let sneg = source_negatives
            .iter()
            .enumerate()
            .map(|(k, s)| run(&self.source, s, 1_000 + k as u64))
            .collect::<Result<Vec<_>>>()?;

        let terms = tneg.len() + sneg.len();
        if terms == 0 {
            return Err(Error::InvalidArgument("pair objective needs at least one negative".into()));
        }
        let weight = T::one() / T::of(terms as f64);
        let sim_pos = dot_slices(of.as_slice(), oe.as_slice());
        let dim = of.len();
        let mut g_f = vec![T::zero(); dim];
        let mut g_e = vec![T::zero(); dim];
        let mut g_tneg = vec![vec![T::zero(); dim]; tneg.len()];
        let mut g_sneg = vec![vec![T::zero(); dim]; sneg.len()];
        let mut loss = T::zero();

        for (k, (on, _)) in tneg.iter().enumerate() {
            let l = hinge_loss(sim_pos, dot_slices(of.as_slice(), on.as_slice()), margin);
            loss += weight * l;
            if l > T::zero() {
                for d in 0..dim {
                    g_f[d] += weight * (on[d] - oe[d]);
                    g_e[d] -= weight * of[d];
                    g_tneg[k][d] += weight * of[d];
                }
            }
        }
        for (k, (on, _)) in sneg.iter().enumerate() {
            let l = hinge_loss(sim_pos, dot_slices(on.as_slice(), oe.as_slice()), margin);
            loss += weight * l;
            if l > T::zero() {
                for d in 0..dim {
                    g_e[d] += weight * (on[d] - of[d]);
                    g_f[d] -= weight * oe[d];
                    g_sneg[k][d] += weight * oe[d];
                }
            }
        }

        if !want_grads {
            return Ok((loss, None));
        }
        let mut grads = self.zero_grads();
        if loss > T::zero() {
            self.source.backward(&tf, &g_f, &mut grads.source)?;
            self.target.backward(&te, &g_e, &mut grads.target)?;
            for ((_, trace), g) in tneg.iter().zip(&g_tneg) {
                self.target.backward(trace, g, &mut grads.target)?;
            }
            for ((_, trace), g) in sneg.iter().zip(&g_sneg) {
                self.source.backward(trace, g, &mut grads.source)?;
            }
        }
        Ok((loss, Some(grads)))
    }

    /// `J = 1/N Σ j(f, e, e*) + λ/2 ‖Θ‖²` with fixed negatives, in inference
    /// mode.
    pub fn corpus_objective(&self, corpus: &[ParallelExample], negatives: &Negatives, config: &TrainConfig) -> Result<f64> {
        Ok(self.objective(corpus, negatives, config, None, false)?.0)
    }

    /// Objective and its full gradient (including `λθ`). With
    /// `dropout_seed`, towers run in train mode with masks derived per pair,
    /// so repeated calls see identical masks.
    pub fn objective_with_grads(
        &self,
        corpus: &[ParallelExample],
        negatives: &Negatives,
        config: &TrainConfig,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, BccnnGrads<T>)> {
        let (value, grads) = self.objective(corpus, negatives, config, dropout_seed, true)?;
        let mut grads = grads.expect("gradients requested");
        grads.add_l2(self, T::of(config.l2));
        Ok((value, grads))
    }

    fn objective(
        &self,
        corpus: &[ParallelExample],
        negatives: &Negatives,
        config: &TrainConfig,
        dropout_seed: Option<u64>,
        want_grads: bool,
    ) -> Result<(f64, Option<BccnnGrads<T>>)> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if negatives.target.len() != corpus.len() {
            return Err(Error::dims("corpus objective negatives", corpus.len(), negatives.target.len()));
        }
        let margin = T::of(config.margin);
        let root = dropout_seed.map(Rng::new);
        let per_pair: Vec<(T, Option<BccnnGrads<T>>)> = (0..corpus.len())
            .into_par_iter()
            .map(|i| {
                let tn: Vec<&SentenceIds> = negatives.target[i].iter().collect();
                let sn: Vec<&SentenceIds> = negatives.source.get(i).map(|v| v.iter().collect()).unwrap_or_default();
                let rng = root.as_ref().map(|r| r.derive(i as u64));
                self.pair_objective(&corpus[i].source, &corpus[i].target, &tn, &sn, margin, rng.as_ref(), want_grads)
            })
            .collect::<Result<_>>()?;

        let n = T::of(corpus.len() as f64);
        let mut total = T::zero();
        let mut grads = want_grads.then(|| self.zero_grads());
        for (loss, g) in &per_pair {
            total += *loss;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                acc.add_scaled(g, T::one() / n);
            }
        }
        let value = total / n + T::of(config.l2 / 2.0) * self.sq_norm();
        Ok((value.to_f64(), grads))
    }

    /// Fraction of `pairs` whose source ranks its own target first among
    /// `distractors` other targets drawn from `pairs`. Ties share credit.
    pub fn retrieval_eval(&self, pairs: &[ParallelExample], distractors: usize, seed: u64) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let d = distractors.min(pairs.len() - 1);
        if d < distractors {
            log::warn!("only {} candidates available; using {d} distractors instead of {distractors}", pairs.len());
        }
        let src: Vec<DenseVector<T>> = pairs
            .par_iter()
            .map(|p| self.source.encode_shared(&p.source))
            .collect::<Result<_>>()?;
        let tgt: Vec<DenseVector<T>> = pairs
            .par_iter()
            .map(|p| self.target.encode_shared(&p.target))
            .collect::<Result<_>>()?;
        let root = Rng::new(seed);
        let credit: f64 = (0..pairs.len())
            .map(|i| {
                let mut rng = root.derive(i as u64);
                let truth = dot_slices(src[i].as_slice(), tgt[i].as_slice());
                let others: Vec<T> = rand::seq::index::sample(&mut rng, pairs.len() - 1, d)
                    .into_iter()
                    .map(|j| if j >= i { j + 1 } else { j })
                    .map(|j| dot_slices(src[i].as_slice(), tgt[j].as_slice()))
                    .collect();
                rank_credit(truth, &others)
            })
            .sum();
        Ok(credit / pairs.len() as f64)
    }

    pub fn store(&self, snap: &mut Snapshot<T>) {
        self.source.store(snap, "src.");
        self.target.store(snap, "tgt.");
    }

    pub fn to_snapshot(&self) -> Snapshot<T> {
        let mut snap = Snapshot::new("bccnn");
        self.store(&mut snap);
        snap
    }

    pub fn from_snapshot(mut snap: Snapshot<T>) -> Result<Self> {
        snap.expect_kind("bccnn")?;
        let source = EncoderParams::restore(&mut snap, "src.")?;
        let target = EncoderParams::restore(&mut snap, "tgt.")?;
        Self::new(source, target)
    }
}

/// Precision@1 credit: 1 if `truth` beats every distractor, `1/(t+1)` if it
/// ties `t` of them and beats the rest, 0 otherwise.
pub fn rank_credit<T: Scalar>(truth: T, distractors: &[T]) -> f64 {
    let mut ties = 0usize;
    for &s in distractors {
        if s > truth {
            return 0.0;
        }
        if s == truth {
            ties += 1;
        }
    }
    1.0 / (ties + 1) as f64
}

impl<T: Scalar> BccnnGrads<T> {
    pub fn add_scaled(&mut self, other: &BccnnGrads<T>, s: T) {
        self.source.add_scaled(&other.source, s);
        self.target.add_scaled(&other.target, s);
    }

    /// Adds `λθ` for every trainable parameter of `model`.
    pub fn add_l2(&mut self, model: &BccnnModel<T>, l2: T) {
        add_l2_tower(&mut self.source, &model.source, l2);
        add_l2_tower(&mut self.target, &model.target, l2);
    }
}

fn add_l2_tower<T: Scalar>(g: &mut EncoderGrads<T>, p: &EncoderParams<T>, l2: T) {
    use crate::math::axpy;
    if l2 == T::zero() {
        return;
    }
    axpy(l2, p.conv.filters.as_slice(), g.conv_filters.as_mut_slice());
    axpy(l2, p.conv.bias.as_slice(), g.conv_bias.as_mut_slice());
    for (gl, pl) in [(&mut g.fc1, &p.fc1), (&mut g.fc2, &p.fc2), (&mut g.projection, &p.projection)] {
        axpy(l2, pl.weight.as_slice(), gl.weight.as_mut_slice());
        axpy(l2, pl.bias.as_slice(), gl.bias.as_mut_slice());
    }
    if !p.freeze_embeddings {
        let m = p.embeddings.matrix();
        for id in 0..m.rows() as u32 {
            let row = g.embeddings.entry(id).or_insert_with(|| vec![T::zero(); m.cols()]);
            axpy(l2, m.row(id as usize), row);
        }
    }
}

/// Sub-batch size for deterministic parallel gradient accumulation.
pub(crate) const REDUCE_CHUNK: usize = 4;

/// Splits off the trailing held-out fraction.
pub fn split_heldout(corpus: &[ParallelExample], fraction: f64) -> (&[ParallelExample], &[ParallelExample]) {
    let held = ((corpus.len() as f64) * fraction).floor() as usize;
    let held = held.min(corpus.len().saturating_sub(2));
    corpus.split_at(corpus.len() - held)
}

/// Trains both towers with minibatch SGD. `on_epoch` sees each log line as
/// it is produced.
pub fn train<T: Scalar>(
    model: &mut BccnnModel<T>,
    corpus: &[ParallelExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two sentence pairs".into()));
    }
    let (train_set, heldout) = split_heldout(corpus, config.heldout_fraction);
    let root = Rng::new(config.seed);
    let eval_root = root.derive(u64::MAX);
    let train_negs = Negatives::draw(train_set, 1, config.source_negatives, &eval_root.derive(0))?;
    let held_negs = if heldout.len() >= 2 {
        Some(Negatives::draw(heldout, 1, config.source_negatives, &eval_root.derive(1))?)
    } else {
        None
    };
    let targets: Vec<SentenceIds> = train_set.iter().map(|p| p.target.clone()).collect();
    let sources: Vec<SentenceIds> = train_set.iter().map(|p| p.source.clone()).collect();
    let margin = T::of(config.margin);
    let lr = T::of(config.lr);
    let l2 = T::of(config.l2);

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let epoch_rng = root.derive(epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        epoch_rng.derive(u64::MAX).shuffle(&mut order);

        for batch in order.chunks(config.batch) {
            let partials: Vec<(T, BccnnGrads<T>)> = batch
                .par_chunks(REDUCE_CHUNK)
                .map(|chunk| {
                    let mut acc = model.zero_grads();
                    let mut loss = T::zero();
                    for &i in chunk {
                        let mut rng = epoch_rng.derive(i as u64);
                        let tn = (0..config.negatives)
                            .map(|_| sample_negative(i, &targets, &mut rng).map(|j| &targets[j]))
                            .collect::<Result<Vec<_>>>()?;
                        let sn = if config.source_negatives {
                            (0..config.negatives)
                                .map(|_| sample_negative(i, &sources, &mut rng).map(|j| &sources[j]))
                                .collect::<Result<Vec<_>>>()?
                        } else {
                            Vec::new()
                        };
                        let dropout = rng.derive(0);
                        let (l, g) = model.pair_objective(
                            &train_set[i].source,
                            &train_set[i].target,
                            &tn,
                            &sn,
                            margin,
                            Some(&dropout),
                            true,
                        )?;
                        loss += l;
                        acc.add_scaled(&g.expect("gradients requested"), T::one());
                    }
                    Ok((loss, acc))
                })
                .collect::<Result<_>>()?;

            let scale = T::one() / T::of(batch.len() as f64);
            let mut grads = model.zero_grads();
            let mut batch_loss = T::zero();
            for (l, g) in &partials {
                batch_loss += *l;
                grads.add_scaled(g, scale);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("minibatch loss {batch_loss} in epoch {epoch}")));
            }
            model.apply_grads(&grads, lr, l2);
        }

        let train_objective = model.corpus_objective(train_set, &train_negs, config)?;
        if !train_objective.is_finite() {
            return Err(Error::NonFinite(format!("training objective after epoch {epoch}")));
        }
        let heldout_objective = held_negs
            .as_ref()
            .map(|n| model.corpus_objective(heldout, n, config))
            .transpose()?;
        let precision_at_1 = if heldout.len() >= 2 {
            Some(model.retrieval_eval(heldout, config.distractors, config.seed)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            train_objective,
            heldout_objective,
            precision_at_1,
        };
        info!("epoch {entry}");
        on_epoch(&entry);
        log.push(entry);
    }
    debug!("training finished after {} epochs", config.epochs);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use proptest::prelude::*;
    use crate::math::Rng;

    fn v(xs: &[f64]) -> DenseVector<f64> {
        DenseVector::from(xs.to_vec())
    }

    fn sent(ids: &[u32]) -> SentenceIds {
        SentenceIds::new(ids.to_vec()).unwrap()
    }

    fn toy_corpus(n: usize, seed: u64) -> Vec<ParallelExample> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let len = 3 + rng.below(4);
                let src: Vec<u32> = (0..len).map(|_| 4 + rng.below(8) as u32).collect();
                let tgt: Vec<u32> = src.iter().map(|&w| w + 1).collect();
                ParallelExample::new(sent(&src), sent(&tgt), None).unwrap()
            })
            .collect()
    }

    fn toy_model(seed: u64) -> BccnnModel<f64> {
        let words: Vec<String> = (0..9).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::build(&words, 20).unwrap();
        let cfg = EncoderConfig {
            embed_dim: 4,
            window: 2,
            filters: 3,
            chunks: 2,
            hidden: 5,
            dropout: 0.2,
            init_bias: 0.0,
            ..EncoderConfig::default()
        };
        BccnnModel::random(&cfg, vocab.clone(), vocab, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&v(&[1., 0.]), &v(&[0., 1.])).unwrap(), 0.0);
        assert_eq!(similarity(&v(&[1., 2.]), &v(&[1., 2.])).unwrap(), 5.0);
        assert!(similarity(&v(&[1.]), &v(&[1., 2.])).is_err());
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss(2.0, 0.5, 1.0), 0.0);
        assert_eq!(hinge_loss(0.7, 0.7, 1.0), 1.0);
        assert!((hinge_loss(0.2f64, 0.6, 1.0) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn negative_sampling_rules() {
        let two = vec![sent(&[4]), sent(&[5])];
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            assert_eq!(sample_negative(0, &two, &mut rng).unwrap(), 1);
        }
        assert!(sample_negative(0, &two[..1], &mut rng).is_err());

        let dup = vec![sent(&[4]), sent(&[4]), sent(&[5]), sent(&[4])];
        for _ in 0..200 {
            assert_eq!(sample_negative(0, &dup, &mut rng).unwrap(), 2);
        }
        let same = vec![sent(&[4]), sent(&[4])];
        assert!(sample_negative(0, &same, &mut rng).is_err());
    }

    #[test]
    fn negative_sampling_is_uniform() {
        // Chi-square over the 9 admissible indices, 10^4 draws.
        let sentences: Vec<SentenceIds> = (0..10).map(|i| sent(&[4 + i])).collect();
        let mut rng = Rng::new(77);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_negative(3, &sentences, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[3], 0);
        let expected = draws as f64 / 9.0;
        let sd = (draws as f64 * (1.0 / 9.0) * (8.0 / 9.0)).sqrt();
        let mut chi2 = 0.0;
        for (j, &c) in counts.iter().enumerate() {
            if j != 3 {
                assert!((c as f64 - expected).abs() < 3.0 * sd, "index {j}: {c}");
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
        // 99.9th percentile of chi-square with 8 degrees of freedom.
        assert!(chi2 < 26.12, "chi2 {chi2}");
    }

    #[test]
    fn objective_trivial_cases() {
        let model = toy_model(1);
        let corpus = toy_corpus(6, 2);
        let negs = Negatives::draw(&corpus, 1, false, &Rng::new(3)).unwrap();
        assert!(matches!(
            model.corpus_objective(&[], &negs, &TrainConfig::default()),
            Err(Error::EmptyCorpus)
        ));

        // Huge negative margin is invalid config-wise, but a tiny margin with
        // λ = 0 on a model whose outputs are all zero gives exactly `margin`.
        let mut zero = model.clone();
        for tower in [&mut zero.source, &mut zero.target] {
            tower.projection.weight.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
        let cfg = TrainConfig { l2: 0.0, ..TrainConfig::default() };
        assert_eq!(zero.corpus_objective(&corpus, &negs, &cfg).unwrap(), 1.0);

        // λ > 0 with all-zero parameters: the L2 term vanishes.
        let mut all_zero = zero.clone();
        for tower in [&mut all_zero.source, &mut all_zero.target] {
            tower.fc1.weight.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
            tower.fc2.weight.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
            tower.conv.filters.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
            tower.embeddings.matrix_mut().as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
        let cfg = TrainConfig { l2: 0.5, ..TrainConfig::default() };
        assert_eq!(all_zero.sq_norm(), 0.0);
        assert_eq!(all_zero.corpus_objective(&corpus, &negs, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn single_pair_objective_equals_its_hinge() {
        let model = toy_model(4);
        let corpus = toy_corpus(2, 5);
        let negs = Negatives { target: vec![vec![corpus[1].target.clone()]], source: vec![vec![]] };
        let cfg = TrainConfig { l2: 0.0, ..TrainConfig::default() };
        let f = model.source.encode_shared(&corpus[0].source).unwrap();
        let e = model.target.encode_shared(&corpus[0].target).unwrap();
        let en = model.target.encode_shared(&corpus[1].target).unwrap();
        let want = hinge_loss(f.dot(&e).unwrap(), f.dot(&en).unwrap(), 1.0);
        let got = model.corpus_objective(&corpus[..1], &negs, &cfg).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn margin_satisfied_pair_only_decays() {
        let model = toy_model(6);
        let corpus = toy_corpus(8, 7);
        // Find a (pair, negative) whose similarity gap is positive and use
        // half of it as the margin, so the hinge is inactive.
        let mut found = None;
        'outer: for i in 0..corpus.len() {
            for j in 0..corpus.len() {
                let pos = model.pair_similarity(&corpus[i].source, &corpus[i].target).unwrap();
                let neg = model.pair_similarity(&corpus[i].source, &corpus[j].target).unwrap();
                if i != j && pos - neg > 1e-6 {
                    found = Some((i, j, (pos - neg) / 2.0));
                    break 'outer;
                }
            }
        }
        let (i, j, margin) = found.expect("toy model separates at least one pair");
        let (loss, grads) = model
            .pair_objective(&corpus[i].source, &corpus[i].target, &[&corpus[j].target], &[], margin, None, true)
            .unwrap();
        assert_eq!(loss, 0.0);
        let grads = grads.unwrap();
        assert!(grads.source.is_zero() && grads.target.is_zero());

        let mut zeroed = model.clone();
        zeroed.source.projection.weight.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        zeroed.source.projection.bias.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        // O'_f = 0 makes both similarities 0; margin 1 is violated, but the
        // upstream on O'_f routes through a dead Relu, so the source tower
        // below the projection gets nothing.
        let (_, g) = zeroed
            .pair_objective(&corpus[0].source, &corpus[0].target, &[&corpus[1].target], &[], 1.0, None, true)
            .unwrap();
        let g = g.unwrap();
        assert!(g.source.fc1.weight.as_slice().iter().all(|&x| x == 0.0));

        // Decay-only update: zero gradients, λ > 0.
        let mut decayed = model.clone();
        decayed.apply_grads(&model.zero_grads(), 0.1, 0.5);
        let factor: f64 = 1.0 - 0.1 * 0.5;
        for (a, b) in decayed.source.fc1.weight.as_slice().iter().zip(model.source.fc1.weight.as_slice()) {
            assert!((a - b * factor).abs() < 1e-15);
        }
    }

    #[test]
    fn objective_invariant_to_pair_order() {
        let model = toy_model(8);
        let corpus = toy_corpus(7, 9);
        let negs = Negatives::draw(&corpus, 2, true, &Rng::new(10)).unwrap();
        let cfg = TrainConfig::default();
        let base = model.corpus_objective(&corpus, &negs, &cfg).unwrap();

        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let shuffled: Vec<ParallelExample> = perm.iter().map(|&i| corpus[i].clone()).collect();
        let shuffled_negs = Negatives {
            target: perm.iter().map(|&i| negs.target[i].clone()).collect(),
            source: perm.iter().map(|&i| negs.source[i].clone()).collect(),
        };
        let other = model.corpus_objective(&shuffled, &shuffled_negs, &cfg).unwrap();
        assert!((base - other).abs() < 1e-12, "{base} vs {other}");
    }

    #[test]
    fn zero_distractors_gives_full_precision() {
        let model = toy_model(11);
        let corpus = toy_corpus(5, 12);
        assert_eq!(model.retrieval_eval(&corpus, 0, 1).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = toy_corpus(24, 13);
        let cfg = TrainConfig { epochs: 2, batch: 4, lr: 0.05, ..TrainConfig::default() };
        let mut a = toy_model(14);
        let mut b = toy_model(14);
        let la = train(&mut a, &corpus, &cfg, |_| {}).unwrap();
        let lb = train(&mut b, &corpus, &cfg, |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.to_snapshot().to_bytes(), b.to_snapshot().to_bytes());
        assert_ne!(a, toy_model(14));
    }

    #[test]
    fn training_rejects_tiny_corpus() {
        let corpus = toy_corpus(1, 13);
        let mut m = toy_model(1);
        assert!(train(&mut m, &corpus, &TrainConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn epoch_log_format() {
        let e = EpochLog { epoch: 3, train_objective: 0.5, heldout_objective: Some(0.25), precision_at_1: None };
        assert_eq!(e.to_string(), "3\t0.500000\t0.250000\t-");
    }

    proptest! {
        #[test]
        fn hinge_nonnegative_and_zero_iff_margin_met(pos in -5.0f64..5.0, neg in -5.0f64..5.0, m in 0.01f64..3.0) {
            let l = hinge_loss(pos, neg, m);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, pos - neg >= m);
        }

        #[test]
        fn rank_credit_invariant_under_monotone_transform(
            truth in -3.0f64..3.0,
            others in prop::collection::vec(-3.0f64..3.0, 0..20),
            a in 0.1f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let base = rank_credit(truth, &others);
            let f = |x: f64| (a * x + b).exp();
            let mapped: Vec<f64> = others.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(base, rank_credit(f(truth), &mapped));
        }
    }
}
