//! The shared classifier: local mini-batch SGD, weighted aggregation, and
//! loss/accuracy evaluation.
//!
//! Parameters live in a flat vector. Math is f64 throughout; features are
//! widened from f32 at use.

use rand::Rng;
use thiserror::Error;

use crate::data::Sample;
use crate::exec::{self, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LearnerError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("update dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Classifier shape. The parameter vector packs the layers in order:
/// weights row-major, then biases, input-side first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    SoftmaxLinear {
        feature_dim: usize,
        classes: usize,
    },
    /// One tanh hidden layer.
    Mlp {
        feature_dim: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::SoftmaxLinear {
                feature_dim,
                classes,
            } => classes * feature_dim + classes,
            Architecture::Mlp {
                feature_dim,
                hidden,
                classes,
            } => hidden * feature_dim + hidden + classes * hidden + classes,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::SoftmaxLinear { classes, .. } => classes,
            Architecture::Mlp { classes, .. } => classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match *self {
            Architecture::SoftmaxLinear { feature_dim, .. } => feature_dim,
            Architecture::Mlp { feature_dim, .. } => feature_dim,
        }
    }
}

/// The flat global parameter vector together with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    arch: Architecture,
    params: Vec<f64>,
}

impl GlobalModel {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            params: vec![0.0; arch.param_count()],
        }
    }

    /// Small random initialization; breaks hidden-layer symmetry.
    pub fn random_init<R: Rng + ?Sized>(arch: Architecture, scale: f64, rng: &mut R) -> Self {
        let params = (0..arch.param_count())
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self { arch, params }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }
}

/// Local SGD knobs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SgdConfig {
    pub local_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            local_steps: 5,
            batch_size: 32,
            learning_rate: 0.05,
        }
    }
}

/// One device's contribution to a round: parameter delta plus the size of
/// the dataset it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub delta: Vec<f64>,
    pub data_size: usize,
}

fn logits(arch: Architecture, params: &[f64], x: &[f32], hidden_out: &mut Vec<f64>) -> Vec<f64> {
    match arch {
        Architecture::SoftmaxLinear {
            feature_dim,
            classes,
        } => {
            let (w, b) = params.split_at(classes * feature_dim);
            (0..classes)
                .map(|c| {
                    let row = &w[c * feature_dim..(c + 1) * feature_dim];
                    b[c] + row.iter().zip(x).map(|(wi, &xi)| wi * xi as f64).sum::<f64>()
                })
                .collect()
        }
        Architecture::Mlp {
            feature_dim,
            hidden,
            classes,
        } => {
            let (w1, rest) = params.split_at(hidden * feature_dim);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(classes * hidden);
            hidden_out.clear();
            hidden_out.extend((0..hidden).map(|h| {
                let row = &w1[h * feature_dim..(h + 1) * feature_dim];
                (b1[h] + row.iter().zip(x).map(|(wi, &xi)| wi * xi as f64).sum::<f64>()).tanh()
            }));
            (0..classes)
                .map(|c| {
                    let row = &w2[c * hidden..(c + 1) * hidden];
                    b2[c] + row.iter().zip(hidden_out.iter()).map(|(wi, ai)| wi * ai).sum::<f64>()
                })
                .collect()
        }
    }
}

/// Log-sum-exp and per-class probabilities of a logit vector.
fn softmax_stats(z: &[f64]) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    (lse, z.iter().map(|&v| (v - lse).exp()).collect())
}

/// Mean cross-entropy of a batch.
pub fn batch_loss(arch: Architecture, params: &[f64], batch: &[&Sample]) -> f64 {
    let mut hidden = Vec::new();
    let total: f64 = batch
        .iter()
        .map(|s| {
            let z = logits(arch, params, &s.features, &mut hidden);
            let (lse, _) = softmax_stats(&z);
            lse - z[s.label]
        })
        .sum();
    total / batch.len() as f64
}

/// Mean cross-entropy of a batch and its gradient w.r.t. the parameters.
pub fn batch_loss_grad(arch: Architecture, params: &[f64], batch: &[&Sample]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut hidden = Vec::new();
    let mut total = 0.0;
    for s in batch {
        let z = logits(arch, params, &s.features, &mut hidden);
        let (lse, probs) = softmax_stats(&z);
        total += lse - z[s.label];
        match arch {
            Architecture::SoftmaxLinear {
                feature_dim,
                classes,
            } => {
                let (gw, gb) = grad.split_at_mut(classes * feature_dim);
                for c in 0..classes {
                    let gz = probs[c] - f64::from(c == s.label);
                    gb[c] += gz;
                    let row = &mut gw[c * feature_dim..(c + 1) * feature_dim];
                    for (g, &xi) in row.iter_mut().zip(&s.features) {
                        *g += gz * xi as f64;
                    }
                }
            }
            Architecture::Mlp {
                feature_dim,
                hidden: h_dim,
                classes,
            } => {
                let w2_at = h_dim * feature_dim + h_dim;
                let mut ga = vec![0.0; h_dim];
                {
                    let w2 = &params[w2_at..w2_at + classes * h_dim];
                    let (head, tail) = grad.split_at_mut(w2_at);
                    let (gw2, gb2) = tail.split_at_mut(classes * h_dim);
                    let _ = head;
                    for c in 0..classes {
                        let gz = probs[c] - f64::from(c == s.label);
                        gb2[c] += gz;
                        for hh in 0..h_dim {
                            gw2[c * h_dim + hh] += gz * hidden[hh];
                            ga[hh] += gz * w2[c * h_dim + hh];
                        }
                    }
                }
                let (gw1, rest) = grad.split_at_mut(h_dim * feature_dim);
                let gb1 = &mut rest[..h_dim];
                for hh in 0..h_dim {
                    let gz1 = ga[hh] * (1.0 - hidden[hh] * hidden[hh]);
                    gb1[hh] += gz1;
                    let row = &mut gw1[hh * feature_dim..(hh + 1) * feature_dim];
                    for (g, &xi) in row.iter_mut().zip(&s.features) {
                        *g += gz1 * xi as f64;
                    }
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= inv;
    }
    (total * inv, grad)
}

/// Runs the configured number of mini-batch SGD steps on a copy of the
/// model and returns the resulting parameter delta. Batches are drawn
/// uniformly with replacement. The model argument is unmodified.
pub fn local_train<R: Rng + ?Sized>(
    model: &GlobalModel,
    data: &[&Sample],
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<LocalUpdate, LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let mut params = model.params.clone();
    let mut batch = Vec::with_capacity(sgd.batch_size);
    for _ in 0..sgd.local_steps {
        batch.clear();
        batch.extend((0..sgd.batch_size).map(|_| data[rng.random_range(0..data.len())]));
        let (_, grad) = batch_loss_grad(model.arch, &params, &batch);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= sgd.learning_rate * g;
        }
    }
    let delta = params
        .iter()
        .zip(&model.params)
        .map(|(after, before)| after - before)
        .collect();
    Ok(LocalUpdate {
        delta,
        data_size: data.len(),
    })
}

/// Applies the size-weighted sum of the updates to the model. Updates with
/// zero data size carry zero weight; with no effective updates the model is
/// returned unchanged.
pub fn aggregate(model: &GlobalModel, updates: &[LocalUpdate]) -> Result<GlobalModel, LearnerError> {
    let total: usize = updates.iter().map(|u| u.data_size).sum();
    if total == 0 {
        return Ok(model.clone());
    }
    for u in updates {
        if u.delta.len() != model.dim() {
            return Err(LearnerError::DimensionMismatch {
                expected: model.dim(),
                got: u.delta.len(),
            });
        }
    }
    let mut params = model.params.clone();
    for u in updates {
        let w = u.data_size as f64 / total as f64;
        for (p, d) in params.iter_mut().zip(&u.delta) {
            *p += w * d;
        }
    }
    debug_assert!(params.iter().all(|p| p.is_finite()));
    Ok(GlobalModel {
        arch: model.arch,
        params,
    })
}

/// Mean cross-entropy and top-1 accuracy over an evaluation set.
pub fn evaluate(model: &GlobalModel, eval_set: &[&Sample]) -> Result<(f64, f64), LearnerError> {
    evaluate_with_mode(model, eval_set, ExecMode::default())
}

/// [`evaluate`] with an explicit sequential/parallel execution mode. Both
/// modes produce bit-identical results.
pub fn evaluate_with_mode(
    model: &GlobalModel,
    eval_set: &[&Sample],
    mode: ExecMode,
) -> Result<(f64, f64), LearnerError> {
    if eval_set.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let partials = exec::map_chunks(mode, eval_set, 1024, |chunk| {
        let mut hidden = Vec::new();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for s in chunk {
            let z = logits(model.arch, &model.params, &s.features, &mut hidden);
            let (lse, _) = softmax_stats(&z);
            loss += lse - z[s.label];
            let pred = z
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            correct += usize::from(pred == s.label);
        }
        (loss, correct)
    });
    let (loss, correct) = partials
        .into_iter()
        .fold((0.0, 0usize), |(l, c), (pl, pc)| (l + pl, c + pc));
    let n = eval_set.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;
    use crate::rng::{RngFactory, StreamPurpose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn refs(samples: &[Sample]) -> Vec<&Sample> {
        samples.iter().collect()
    }

    fn small_sample(rng: &mut ChaCha8Rng, fd: usize, classes: usize) -> Sample {
        Sample {
            features: (0..fd).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            label: rng.random_range(0..classes),
        }
    }

    #[test]
    fn zero_learning_rate_zero_delta() {
        let arch = Architecture::SoftmaxLinear {
            feature_dim: 4,
            classes: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = GlobalModel::random_init(arch, 0.1, &mut rng);
        let data = vec![small_sample(&mut rng, 4, 3)];
        let sgd = SgdConfig {
            learning_rate: 0.0,
            ..SgdConfig::default()
        };
        let up = local_train(&model, &refs(&data), &sgd, &mut rng).unwrap();
        assert!(up.delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_full_batch_step_matches_closed_form() {
        // For softmax regression on one sample, the gradient is
        // (p - onehot(y)) outer x for the weights and (p - onehot(y)) for
        // the bias; one step moves by -lr times that.
        let fd = 5;
        let classes = 4;
        let arch = Architecture::SoftmaxLinear {
            feature_dim: fd,
            classes,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = GlobalModel::random_init(arch, 0.3, &mut rng);
        let s = small_sample(&mut rng, fd, classes);
        let lr = 0.1;
        let sgd = SgdConfig {
            local_steps: 1,
            batch_size: 1,
            learning_rate: lr,
        };
        let data = vec![s.clone()];
        let up = local_train(&model, &refs(&data), &sgd, &mut rng).unwrap();

        let w = &model.params()[..classes * fd];
        let b = &model.params()[classes * fd..];
        let z: Vec<f64> = (0..classes)
            .map(|c| {
                b[c] + (0..fd).map(|f| w[c * fd + f] * s.features[f] as f64).sum::<f64>()
            })
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        let probs: Vec<f64> = z.iter().map(|&v| (v - max).exp() / denom).collect();
        for c in 0..classes {
            let gz = probs[c] - f64::from(c == s.label);
            for f in 0..fd {
                let expect = -lr * gz * s.features[f] as f64;
                let got = up.delta[c * fd + f];
                assert!((got - expect).abs() < 1e-12, "w[{c},{f}]: {got} vs {expect}");
            }
            let got_b = up.delta[classes * fd + c];
            assert!((got_b + lr * gz).abs() < 1e-12);
        }
    }

    fn finite_diff_check(arch: Architecture, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = GlobalModel::random_init(arch, 0.4, &mut rng);
        let data: Vec<Sample> = (0..6)
            .map(|_| small_sample(&mut rng, arch.feature_dim(), arch.classes()))
            .collect();
        let batch = refs(&data);
        let (_, grad) = batch_loss_grad(arch, model.params(), &batch);
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut params = model.params().to_vec();
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = batch_loss(arch, &params, &batch);
            params[i] = orig - h;
            let down = batch_loss(arch, &params, &batch);
            params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let softmax = Architecture::SoftmaxLinear {
            feature_dim: 4,
            classes: 3,
        };
        let mlp = Architecture::Mlp {
            feature_dim: 4,
            hidden: 5,
            classes: 3,
        };
        for seed in 0..5 {
            assert!(finite_diff_check(softmax, seed) < 1e-6);
            assert!(finite_diff_check(mlp, 100 + seed) < 1e-6);
        }
    }

    #[test]
    fn aggregate_weights() {
        let arch = Architecture::SoftmaxLinear {
            feature_dim: 1,
            classes: 2,
        };
        let model = GlobalModel::zeros(arch);
        let ones = vec![1.0; model.dim()];
        let single = aggregate(
            &model,
            &[LocalUpdate {
                delta: ones.clone(),
                data_size: 10,
            }],
        )
        .unwrap();
        assert!(single.params().iter().all(|&p| p == 1.0));

        let two = aggregate(
            &model,
            &[
                LocalUpdate {
                    delta: vec![1.0; model.dim()],
                    data_size: 100,
                },
                LocalUpdate {
                    delta: vec![-1.0; model.dim()],
                    data_size: 300,
                },
            ],
        )
        .unwrap();
        // weights 0.25 and 0.75
        assert!(two.params().iter().all(|&p| (p + 0.5).abs() < 1e-15));

        let zeroes = aggregate(
            &model,
            &[LocalUpdate {
                delta: vec![0.0; model.dim()],
                data_size: 5,
            }],
        )
        .unwrap();
        assert_eq!(zeroes.params(), model.params());

        assert_eq!(aggregate(&model, &[]).unwrap().params(), model.params());
        let err = aggregate(
            &model,
            &[LocalUpdate {
                delta: vec![0.0; 3],
                data_size: 1,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, LearnerError::DimensionMismatch { .. }));
    }

    #[test]
    fn uniform_predictor_loss_is_ln_c() {
        let arch = Architecture::SoftmaxLinear {
            feature_dim: 3,
            classes: 10,
        };
        let model = GlobalModel::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<Sample> = (0..50).map(|_| small_sample(&mut rng, 3, 10)).collect();
        let (loss, _) = evaluate(&model, &refs(&data)).unwrap();
        assert!((loss - (10f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        // separation 0 makes labels independent of features
        let mut rng = RngFactory::new(8).stream(StreamPurpose::SynthCorpus, 0, 0);
        let eval = synth_corpus(10, 5000, 16, 0.0, &mut rng);
        let arch = Architecture::SoftmaxLinear {
            feature_dim: 16,
            classes: 10,
        };
        let model = GlobalModel::random_init(arch, 0.01, &mut rng);
        let (_, acc) = evaluate(&model, &refs(&eval)).unwrap();
        assert!((acc - 0.1).abs() < 0.02, "accuracy {acc}");
    }

    #[test]
    fn memorizes_single_sample() {
        let arch = Architecture::SoftmaxLinear {
            feature_dim: 4,
            classes: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = GlobalModel::random_init(arch, 0.1, &mut rng);
        let data = vec![small_sample(&mut rng, 4, 3)];
        let sgd = SgdConfig {
            local_steps: 200,
            batch_size: 1,
            learning_rate: 0.5,
        };
        let up = local_train(&model, &refs(&data), &sgd, &mut rng).unwrap();
        model = aggregate(&model, &[up]).unwrap();
        let (_, acc) = evaluate(&model, &refs(&data)).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn local_train_deterministic() {
        let arch = Architecture::Mlp {
            feature_dim: 6,
            hidden: 4,
            classes: 3,
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(9);
        let model = GlobalModel::random_init(arch, 0.2, &mut init_rng);
        let data: Vec<Sample> = (0..20).map(|_| small_sample(&mut init_rng, 6, 3)).collect();
        let sgd = SgdConfig::default();
        let a = local_train(&model, &refs(&data), &sgd, &mut ChaCha8Rng::seed_from_u64(33)).unwrap();
        let b = local_train(&model, &refs(&data), &sgd, &mut ChaCha8Rng::seed_from_u64(33)).unwrap();
        assert_eq!(a.delta, b.delta);
    }

    #[test]
    fn empty_dataset_rejected() {
        let arch = Architecture::SoftmaxLinear {
            feature_dim: 2,
            classes: 2,
        };
        let model = GlobalModel::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            local_train(&model, &[], &SgdConfig::default(), &mut rng).unwrap_err(),
            LearnerError::EmptyDataset
        );
        assert_eq!(evaluate(&model, &[]).unwrap_err(), LearnerError::EmptyDataset);
    }
}
