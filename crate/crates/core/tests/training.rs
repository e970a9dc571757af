use bccnn::bilingual::{train, Negatives, TrainConfig};
use bccnn::encoder::EncoderConfig;
use bccnn::joint::{cross_entropy, train_nnjm, zero_sentence_vectors, JointConfig, LogProbMode, NnjmTrainConfig};
use bccnn::math::Rng;
use bccnn::synthetic::{generate, CorpusKind, SyntheticConfig};
use bccnn::{Bccnn, JointModel};

#[test]
fn bilingual_training_lowers_the_objective() {
    let corpus = generate(&SyntheticConfig { vocab: 40, ..SyntheticConfig::new(CorpusKind::Dictionary, 150, 3) }, 0).unwrap();
    let (sv, tv) = (corpus.source_vocab().unwrap(), corpus.target_vocab().unwrap());
    let examples = corpus.examples(&sv, &tv).unwrap();
    let enc = EncoderConfig { embed_dim: 8, filters: 6, chunks: 2, hidden: 12, dropout: 0.0, ..EncoderConfig::default() };
    let mut model = Bccnn::random(&enc, sv, tv, &mut Rng::new(2)).unwrap();
    let config = TrainConfig { epochs: 4, batch: 4, lr: 0.02, heldout_fraction: 0.0, ..TrainConfig::default() };
    let negatives = Negatives::draw(&examples, 2, false, &Rng::new(99)).unwrap();
    let before = model.corpus_objective(&examples, &negatives, &config).unwrap();
    let mut logs = Vec::new();
    train(&mut model, &examples, &config, |e| logs.push(e.clone())).unwrap();
    let after = model.corpus_objective(&examples, &negatives, &config).unwrap();
    assert_eq!(logs.len(), 4);
    assert!(after < before, "objective rose from {before} to {after}");
}

#[test]
fn joint_training_lowers_cross_entropy() {
    let corpus = generate(&SyntheticConfig::new(CorpusKind::Noisy, 300, 8), 0).unwrap();
    let (sv, tv) = (corpus.source_vocab().unwrap(), corpus.target_vocab().unwrap());
    let examples = corpus.examples(&sv, &tv).unwrap();
    let sentences = zero_sentence_vectors(examples.len(), 0);
    let jc = JointConfig { order: 2, window: 1, embed_dim: 6, hidden: 12, ..JointConfig::default() };
    let mut model = JointModel::random(&jc, sv, tv, 0, &mut Rng::new(5)).unwrap();
    let contexts = model.build_contexts(&examples, &sentences).unwrap();
    let before = cross_entropy(&model, &contexts, LogProbMode::Exact).unwrap();
    let config = NnjmTrainConfig { kappa: 20, epochs: 3, batch: 8, heldout_fraction: 0.0, ..NnjmTrainConfig::default() };
    train_nnjm(&mut model, &examples, &sentences, &config, |_| {}).unwrap();
    let after = cross_entropy(&model, &contexts, LogProbMode::Exact).unwrap();
    assert!(after < before - 0.1, "cross-entropy {before} -> {after}");
}
