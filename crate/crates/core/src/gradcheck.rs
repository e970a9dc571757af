//! Central finite-difference checks for analytic gradients.

use std::fmt;

/// Relative error floor: entries whose analytic and numeric magnitudes are
/// both below this are compared absolutely against it.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Result of checking one parameter group.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

impl GroupReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

impl fmt::Display for GroupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<28} n={:<6} max_rel_err={:.3e}", self.name, self.checked, self.max_rel_err)?;
        if let Some((i, a, n)) = self.worst {
            write!(f, " (entry {i}: analytic {a:.6e}, numeric {n:.6e})")?;
        }
        Ok(())
    }
}

/// Compares `analytic[i]` with `(f(θᵢ+ε) − f(θᵢ−ε)) / 2ε` for every entry of
/// the slice selected by `slot`, restoring each entry afterwards.
pub fn check_group<P>(
    name: &str,
    params: &mut P,
    slot: impl Fn(&mut P) -> &mut [f64],
    loss: impl Fn(&P) -> f64,
    analytic: &[f64],
    eps: f64,
) -> GroupReport {
    let n = slot(params).len();
    assert_eq!(n, analytic.len(), "{name}: gradient/parameter size mismatch");
    let mut report = GroupReport {
        name: name.to_string(),
        checked: n,
        max_rel_err: 0.0,
        worst: None,
    };
    for i in 0..n {
        let orig = slot(params)[i];
        slot(params)[i] = orig + eps;
        let plus = loss(params);
        slot(params)[i] = orig - eps;
        let minus = loss(params);
        slot(params)[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some((i, analytic[i], numeric));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks() {
        let mut theta = vec![1.0, -2.0, 0.5];
        let loss = |t: &Vec<f64>| t.iter().map(|x| x * x * x).sum::<f64>();
        let grad: Vec<f64> = theta.iter().map(|x| 3.0 * x * x).collect();
        let r = check_group("cube", &mut theta, |t| t.as_mut_slice(), loss, &grad, 1e-5);
        assert!(r.passed(1e-6), "{r}");
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);

        let wrong: Vec<f64> = grad.iter().map(|g| g * 1.01).collect();
        let r = check_group("cube", &mut theta, |t| t.as_mut_slice(), loss, &wrong, 1e-5);
        assert!(!r.passed(1e-4));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 2e-12) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}

/// Toy-scale gradient suites for every network in the crate. Each returns
/// one report per parameter group.
pub mod suites {
    use super::{check_group, GroupReport, DEFAULT_EPSILON};
    use crate::bilingual::{BccnnModel, Negatives, TrainConfig};
    use crate::corpus::{ParallelExample, SentenceIds, Vocabulary};
    use crate::encoder::{EncoderConfig, EncoderGrads, EncoderParams, Pass};
    use crate::joint::{ContextWindow, JointConfig, JointGrads, JointModelParams, NoiseDistribution};
    use crate::math::{DenseVector, Rng};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn vocab(n: usize) -> Vocabulary {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Vocabulary::build(&words, n).expect("non-empty")
    }

    /// Zero biases put ReLU inputs exactly on the kink whenever the layer
    /// below is all zeros; a small positive offset keeps finite differences
    /// off the kink.
    fn lift_biases(p: &mut EncoderParams<f64>) {
        let biases = [
            p.conv.bias.as_mut_slice(),
            p.fc1.bias.as_mut_slice(),
            p.fc2.bias.as_mut_slice(),
            p.projection.bias.as_mut_slice(),
        ];
        for b in biases {
            for x in b.iter_mut() {
                *x = 0.05;
            }
        }
    }

    fn dense_embedding_grad(g: &EncoderGrads<f64>, rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for (&id, row) in &g.embeddings {
            out[id as usize * cols..(id as usize + 1) * cols].copy_from_slice(row);
        }
        out
    }

    /// Checks every group of `tower` given its analytic gradient `g` of `loss`.
    fn tower_groups<P>(
        prefix: &str,
        model: &mut P,
        tower: impl Fn(&mut P) -> &mut EncoderParams<f64> + Copy,
        g: &EncoderGrads<f64>,
        loss: impl Fn(&P) -> f64 + Copy,
    ) -> Vec<GroupReport> {
        let eps = DEFAULT_EPSILON;
        let name = |s: &str| format!("{prefix}{s}");
        let (rows, cols) = {
            let m = tower(model).embeddings.matrix();
            (m.rows(), m.cols())
        };
        let emb = dense_embedding_grad(g, rows, cols);
        vec![
            check_group(&name("conv.filters"), model, move |p| tower(p).conv.filters.as_mut_slice(), loss, g.conv_filters.as_slice(), eps),
            check_group(&name("conv.bias"), model, move |p| tower(p).conv.bias.as_mut_slice(), loss, g.conv_bias.as_slice(), eps),
            check_group(&name("fc1.weight"), model, move |p| tower(p).fc1.weight.as_mut_slice(), loss, g.fc1.weight.as_slice(), eps),
            check_group(&name("fc1.bias"), model, move |p| tower(p).fc1.bias.as_mut_slice(), loss, g.fc1.bias.as_slice(), eps),
            check_group(&name("fc2.weight"), model, move |p| tower(p).fc2.weight.as_mut_slice(), loss, g.fc2.weight.as_slice(), eps),
            check_group(&name("fc2.bias"), model, move |p| tower(p).fc2.bias.as_mut_slice(), loss, g.fc2.bias.as_slice(), eps),
            check_group(&name("projection.weight"), model, move |p| tower(p).projection.weight.as_mut_slice(), loss, g.projection.weight.as_slice(), eps),
            check_group(&name("projection.bias"), model, move |p| tower(p).projection.bias.as_mut_slice(), loss, g.projection.bias.as_slice(), eps),
            check_group(&name("embeddings"), model, move |p| tower(p).embeddings.matrix_mut().as_mut_slice(), loss, &emb, eps),
        ]
    }

    /// One encoder tower on a 5-word sentence (k=4, L=3, C=2), train mode
    /// with a fixed dropout mask, loss `c·O'` for fixed random `c`.
    pub fn encoder(seed: u64) -> Vec<GroupReport> {
        let cfg = EncoderConfig {
            embed_dim: 4,
            window: 3,
            filters: 3,
            chunks: 2,
            hidden: 6,
            dropout: 0.3,
            ..EncoderConfig::default()
        };
        let mut rng = Rng::new(seed);
        let mut params: EncoderParams<f64> = EncoderParams::random(&cfg, vocab(10), &mut rng).expect("valid config");
        lift_biases(&mut params);
        let sentence = SentenceIds::new(vec![4, 7, 5, 12, 9]).expect("non-empty");
        let coeffs: Vec<f64> = (0..cfg.hidden).map(|_| rng.unit() * 2.0 - 1.0).collect();
        let mask_seed = rng.derive(99);

        let loss = |p: &EncoderParams<f64>| {
            let (o, _) = p
                .forward_shared(&sentence, Pass::Train(&mut mask_seed.clone()))
                .expect("forward");
            o.as_slice().iter().zip(&coeffs).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, trace) = params
            .forward_shared(&sentence, Pass::Train(&mut mask_seed.clone()))
            .expect("forward");
        let mut g = params.zero_grads();
        params.backward(&trace, &coeffs, &mut g).expect("backward");
        tower_groups("encoder.", &mut params, |p| p, &g, loss)
    }

    /// Full bilingual objective (hinge over target- and source-side
    /// negatives, dropout on, L2 on) for both towers.
    pub fn bilingual(seed: u64) -> Vec<GroupReport> {
        let cfg = EncoderConfig {
            embed_dim: 4,
            window: 2,
            filters: 3,
            chunks: 2,
            hidden: 5,
            dropout: 0.25,
            ..EncoderConfig::default()
        };
        let mut rng = Rng::new(seed);
        let mut model: BccnnModel<f64> =
            BccnnModel::random(&cfg, vocab(8), vocab(9), &mut rng).expect("valid config");
        lift_biases(&mut model.source);
        lift_biases(&mut model.target);
        let corpus: Vec<ParallelExample> = (0..4)
            .map(|_| {
                let len = 3 + rng.below(3);
                let src = (0..len).map(|_| 4 + rng.below(8) as u32).collect();
                let tgt = (0..len + 1).map(|_| 4 + rng.below(9) as u32).collect();
                ParallelExample::new(SentenceIds::new(src).unwrap(), SentenceIds::new(tgt).unwrap(), None).unwrap()
            })
            .collect();
        let negatives = Negatives::draw(&corpus, 2, true, &rng.derive(5)).expect("distinct sentences");
        // A large margin keeps every hinge active.
        let config = TrainConfig { margin: 5.0, l2: 0.01, ..TrainConfig::default() };
        let dropout_seed = Some(seed ^ 0xD0);

        let loss = |m: &BccnnModel<f64>| {
            m.objective_with_grads(&corpus, &negatives, &config, dropout_seed).expect("objective").0
        };
        let (_, grads) = model
            .objective_with_grads(&corpus, &negatives, &config, dropout_seed)
            .expect("objective");
        let mut reports = tower_groups("bilingual.source.", &mut model, |m| &mut m.source, &grads.source, loss);
        reports.extend(tower_groups("bilingual.target.", &mut model, |m| &mut m.target, &grads.target, loss));
        reports
    }

    fn dense_rows(rows: &BTreeMap<u32, Vec<f64>>, n: usize, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * k];
        for (&id, g) in rows {
            out[id as usize * k..(id as usize + 1) * k].copy_from_slice(g);
        }
        out
    }

    fn joint_groups(
        prefix: &str,
        state: &mut (JointModelParams<f64>, ContextWindow<f64>),
        g: &JointGrads<f64>,
        loss: impl Fn(&(JointModelParams<f64>, ContextWindow<f64>)) -> f64 + Copy,
    ) -> Vec<GroupReport> {
        let eps = DEFAULT_EPSILON;
        let name = |s: &str| format!("{prefix}{s}");
        let model = &state.0;
        let k = model.embed_dim();
        let h = model.hidden2.outputs();
        let v = model.output_vocab_size();
        let src = dense_rows(&g.source_rows, model.source_embeddings.rows(), k);
        let tgt = dense_rows(&g.target_rows, model.target_embeddings.rows(), k);
        let mut out_w = vec![0.0; v * h];
        let mut out_b = vec![0.0; v];
        for (&id, (row, b)) in &g.output_rows {
            out_w[id as usize * h..(id as usize + 1) * h].copy_from_slice(row);
            out_b[id as usize] = *b;
        }
        vec![
            check_group(&name("source_embeddings"), state, |s| s.0.source_embeddings.as_mut_slice(), loss, &src, eps),
            check_group(&name("target_embeddings"), state, |s| s.0.target_embeddings.as_mut_slice(), loss, &tgt, eps),
            check_group(&name("hidden1.weight"), state, |s| s.0.hidden1.weight.as_mut_slice(), loss, g.hidden1.weight.as_slice(), eps),
            check_group(&name("hidden1.bias"), state, |s| s.0.hidden1.bias.as_mut_slice(), loss, g.hidden1.bias.as_slice(), eps),
            check_group(&name("hidden2.weight"), state, |s| s.0.hidden2.weight.as_mut_slice(), loss, g.hidden2.weight.as_slice(), eps),
            check_group(&name("hidden2.bias"), state, |s| s.0.hidden2.bias.as_mut_slice(), loss, g.hidden2.bias.as_slice(), eps),
            check_group(&name("output.weight"), state, |s| s.0.output.weight.as_mut_slice(), loss, &out_w, eps),
            check_group(&name("output.bias"), state, |s| s.0.output.bias.as_mut_slice(), loss, &out_b, eps),
            check_group(&name("sentence_vector"), state, |s| Arc::make_mut(&mut s.1.sentence).as_mut_slice(), loss, &g.sentence, eps),
        ]
    }

    /// Joint model (20-word vocabularies, hidden 8) under both the NCE loss
    /// with fixed noise draws and the full-softmax loss, including the
    /// sentence-vector input slot.
    pub fn joint(seed: u64) -> Vec<GroupReport> {
        let cfg = JointConfig {
            order: 3,
            window: 3,
            embed_dim: 3,
            hidden: 8,
            source_input_vocab: 20,
            target_input_vocab: 20,
            output_vocab: 20,
        };
        let mut rng = Rng::new(seed);
        let mut model: JointModelParams<f64> =
            JointModelParams::random(&cfg, vocab(16), vocab(16), 5, &mut rng).expect("valid config");
        for b in [&mut model.hidden1.bias, &mut model.hidden2.bias] {
            b.as_mut_slice().iter_mut().for_each(|x| *x = 0.05);
        }
        // Spread the output scores so the loss is not flat in them.
        for w in model.output.weight.as_mut_slice() {
            *w *= 10.0;
        }
        let sentence: DenseVector<f64> = (0..5).map(|_| rng.unit() * 2.0 - 1.0).collect();
        let ctx = ContextWindow {
            history: vec![2, 4 + rng.below(16) as u32],
            window: (0..3).map(|_| 4 + rng.below(16) as u32).collect(),
            sentence: Arc::new(sentence),
            gold: 4 + rng.below(16) as u32,
        };
        let q = NoiseDistribution::unigram(&(0..20u64).collect::<Vec<_>>(), 0.75).expect("positive weights");
        let noise: Vec<u32> = (0..6).map(|_| q.sample(&mut rng)).chain([ctx.gold, 7, 7]).collect();
        let kappa = noise.len() as f64;

        let mut state = (model, ctx);
        let nce = |s: &(JointModelParams<f64>, ContextWindow<f64>)| s.0.nce_loss(&s.1, &noise, &q, kappa).expect("nce").0;
        let (_, g) = state.0.nce_loss(&state.1, &noise, &q, kappa).expect("nce");
        let mut reports = joint_groups("joint.nce.", &mut state, &g, nce);

        let soft = |s: &(JointModelParams<f64>, ContextWindow<f64>)| s.0.softmax_loss(&s.1).expect("softmax").0;
        let (_, g) = state.0.softmax_loss(&state.1).expect("softmax");
        reports.extend(joint_groups("joint.softmax.", &mut state, &g, soft));
        reports
    }

    /// Every suite at a fixed seed.
    pub fn all(seed: u64) -> Vec<GroupReport> {
        let mut reports = encoder(seed);
        reports.extend(bilingual(seed));
        reports.extend(joint(seed));
        reports
    }
}
