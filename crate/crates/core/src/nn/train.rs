use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{LabeledDataset, Split};
use super::model::Model;
use super::net::{self, LayerParams};
use super::NnError;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
    Sgd { lr: f32, momentum: f32 },
}

impl Optimizer {
    /// Adam with the usual defaults.
    pub fn adam(lr: f32) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f32, momentum: f32) -> Self {
        Optimizer::Sgd { lr, momentum }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch: usize,
    /// Leading spec layers whose parameters stay fixed.
    #[serde(default)]
    pub frozen_layers: usize,
    /// Shuffle/dropout seed; the model seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            epochs: 10,
            batch: 64,
            frozen_layers: 0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Trigger recovery rate in percent, when a trigger probe was supplied.
    pub trigger_rec: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub runs: Vec<TrainingRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub hyper: Hyper,
    pub samples: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn last_epoch(&self) -> Option<&EpochRecord> {
        self.runs.last().and_then(|r| r.epochs.last())
    }
}

struct OptState {
    m: Vec<LayerParams<f32>>,
    v: Vec<LayerParams<f32>>,
    step: i32,
}

fn apply_update(
    opt: &Optimizer,
    state: &mut OptState,
    params: &mut [LayerParams<f32>],
    grads: &[LayerParams<f32>],
    trainable: &[bool],
) {
    state.step += 1;
    for (p, ((param, grad), (m, v))) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .enumerate()
    {
        if !trainable[p] {
            continue;
        }
        let pairs = [
            (&mut param.w, &grad.w, &mut m.w, &mut v.w),
            (&mut param.b, &grad.b, &mut m.b, &mut v.b),
        ];
        for (x, g, m, v) in pairs {
            match *opt {
                Optimizer::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(state.step);
                    let c2 = 1.0 - beta2.powi(state.step);
                    for i in 0..x.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                Optimizer::Sgd { lr, momentum } => {
                    for i in 0..x.len() {
                        m[i] = momentum * m[i] - lr * g[i];
                        x[i] += m[i];
                    }
                }
            }
        }
    }
}

fn check_hyper(h: &Hyper) -> Result<(), NnError> {
    if h.batch == 0 {
        return Err(NnError::Hyper("batch size must be positive".into()));
    }
    let lr = match h.optimizer {
        Optimizer::Adam { lr, beta1, beta2, eps } => {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(NnError::Hyper("invalid Adam moments".into()));
            }
            lr
        }
        Optimizer::Sgd { lr, momentum } => {
            if !(0.0..1.0).contains(&momentum) {
                return Err(NnError::Hyper("momentum must be in [0, 1)".into()));
            }
            lr
        }
    };
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NnError::Hyper("learning rate must be finite and non-negative".into()));
    }
    Ok(())
}

/// Train on the dataset's training split. See [`train_with_probe`].
pub fn train(model: &Model, data: &LabeledDataset, hyper: &Hyper) -> Result<Model, NnError> {
    train_with_probe(model, data, hyper, None)
}

/// Mini-batch training with softmax cross-entropy. Batches are drawn from a
/// per-epoch shuffle of the training split; validation accuracy is logged
/// when the dataset has a validation split, and trigger recovery when a
/// probe of `(image, label)` pairs is given.
pub fn train_with_probe(
    model: &Model,
    data: &LabeledDataset,
    hyper: &Hyper,
    probe: Option<&[(Image, u32)]>,
) -> Result<Model, NnError> {
    check_hyper(hyper)?;
    if hyper.epochs == 0 {
        return Ok(model.clone());
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(NnError::Data("no training samples".into()));
    }
    if data.classes() as usize != model.classes() {
        return Err(NnError::Data(format!(
            "dataset has {} classes, model {}",
            data.classes(),
            model.classes()
        )));
    }
    for &i in &train_idx {
        model.check_input(data.image(i))?;
    }
    let val_idx = data.indices(Split::Val);
    let plan = model.plan().clone();
    let trainable: Vec<bool> = plan.params.iter().map(|p| p.layer >= hyper.frozen_layers).collect();
    let mut params = model.params().to_vec();
    let mut state = OptState {
        m: params.iter().map(LayerParams::zeros_like).collect(),
        v: params.iter().map(LayerParams::zeros_like).collect(),
        step: 0,
    };
    let seed = hyper.seed.unwrap_or(model.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_d00d_f00d);
    let mut grads: Vec<LayerParams<f32>> = params.iter().map(LayerParams::zeros_like).collect();
    let mut order = train_idx.clone();
    let mut run = TrainingRun {
        hyper: hyper.clone(),
        samples: train_idx.len(),
        epochs: Vec::with_capacity(hyper.epochs),
    };

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(hyper.batch) {
            for g in grads.iter_mut() {
                g.w.fill(0.0);
                g.b.fill(0.0);
            }
            for &i in batch {
                let input = data.image(i).to_chw_unit();
                let trace = net::forward_trace(&plan, &params, &input, Some(&mut dropout_rng), None);
                let logits = trace.logits();
                let label = data.label(i) as usize;
                correct += usize::from(net::argmax(logits) == label);
                let (loss, d) = net::cross_entropy(logits, label);
                loss_sum += loss as f64;
                net::backward(&plan, &params, &trace, &d, &mut grads, &trainable, false);
            }
            let scale = 1.0 / batch.len() as f32;
            for g in grads.iter_mut() {
                g.w.iter_mut().chain(g.b.iter_mut()).for_each(|v| *v *= scale);
            }
            apply_update(&hyper.optimizer, &mut state, &mut params, &grads, &trainable);
        }
        let train_loss = loss_sum / order.len() as f64;
        let params_finite = params
            .iter()
            .all(|p| p.w.iter().chain(p.b.iter()).all(|v| v.is_finite()));
        if !train_loss.is_finite() || !params_finite {
            return Err(NnError::Diverged { epoch });
        }
        let snapshot = model.with_params(params.clone());
        let val_acc = (!val_idx.is_empty()).then(|| {
            let hits = val_idx
                .iter()
                .filter(|&&i| snapshot.predict(data.image(i)).ok() == Some(data.label(i) as usize))
                .count();
            100.0 * hits as f64 / val_idx.len() as f64
        });
        let trigger_rec = probe.filter(|p| !p.is_empty()).map(|p| {
            let hits = p
                .iter()
                .filter(|(x, y)| snapshot.predict(x).ok() == Some(*y as usize))
                .count();
            100.0 * hits as f64 / p.len() as f64
        });
        run.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_acc: 100.0 * correct as f64 / order.len() as f64,
            val_acc,
            trigger_rec,
        });
    }
    let mut out = model.with_params(params);
    out.training_log.runs.push(run);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::ArchitectureSpec;
    use rand::Rng;

    /// Two Gaussian-ish blobs on a 2x1 "image", separable by x0 > x1.
    fn blobs(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u32;
            let (a, b): (u8, u8) = if label == 0 {
                (rng.gen_range(150..255), rng.gen_range(0..100))
            } else {
                (rng.gen_range(0..100), rng.gen_range(150..255))
            };
            imgs.push(Image::new(1, 2, 1, vec![a, b]).unwrap());
            labels.push(label);
        }
        LabeledDataset::new(imgs, labels, 2).unwrap()
    }

    fn accuracy(m: &Model, d: &LabeledDataset) -> f64 {
        let hits = (0..d.len())
            .filter(|&i| m.predict(d.image(i)).unwrap() == d.label(i) as usize)
            .count();
        100.0 * hits as f64 / d.len() as f64
    }

    #[test]
    fn separable_toy_problem() {
        let data = blobs(200, 1);
        let spec = ArchitectureSpec::mlp([1, 2, 1], &[8], 2);
        let m = Model::build(&spec, 3).unwrap();
        let hyper = Hyper {
            epochs: 50,
            batch: 16,
            ..Hyper::default()
        };
        let trained = train(&m, &data, &hyper).unwrap();
        assert!(accuracy(&trained, &data) >= 99.0);
        assert_eq!(trained.predict(data.image(0)).unwrap(), data.label(0) as usize);
        assert_eq!(trained.training_log.runs[0].epochs.len(), 50);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let data = blobs(20, 2);
        let m = Model::build(&ArchitectureSpec::mlp([1, 2, 1], &[4], 2), 0).unwrap();
        let hyper = Hyper {
            epochs: 0,
            ..Hyper::default()
        };
        assert_eq!(train(&m, &data, &hyper).unwrap(), m);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = blobs(20, 2);
        let m = Model::build(&ArchitectureSpec::mlp([1, 2, 1], &[4], 2), 0).unwrap();
        for opt in [Optimizer::adam(0.0), Optimizer::sgd(0.0, 0.9)] {
            let hyper = Hyper {
                optimizer: opt,
                epochs: 2,
                batch: 4,
                ..Hyper::default()
            };
            assert_eq!(train(&m, &data, &hyper).unwrap().params(), m.params());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(64, 5);
        let m = Model::build(&ArchitectureSpec::mlp([1, 2, 1], &[6], 2), 9).unwrap();
        let hyper = Hyper {
            epochs: 3,
            batch: 8,
            ..Hyper::default()
        };
        assert_eq!(train(&m, &data, &hyper).unwrap(), train(&m, &data, &hyper).unwrap());
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let data = blobs(64, 5);
        let m = Model::build(&ArchitectureSpec::mlp([1, 2, 1], &[6, 6], 2), 9).unwrap();
        let hyper = Hyper {
            epochs: 2,
            batch: 8,
            frozen_layers: 1,
            ..Hyper::default()
        };
        let t = train(&m, &data, &hyper).unwrap();
        assert_eq!(t.params()[0], m.params()[0]);
        assert_ne!(t.params()[1], m.params()[1]);
    }

    #[test]
    fn divergence_is_reported() {
        let data = blobs(64, 5);
        let mut m = Model::build(&ArchitectureSpec::mlp([1, 2, 1], &[6], 2), 9).unwrap();
        m.params_mut()[0].w[0] = f32::NAN;
        let err = train(&m, &data, &Hyper::default()).unwrap_err();
        assert!(matches!(err, NnError::Diverged { epoch: 0 }));
    }

    #[test]
    fn bad_hyper_rejected() {
        let data = blobs(8, 1);
        let m = Model::build(&ArchitectureSpec::mlp([1, 2, 1], &[2], 2), 0).unwrap();
        let hyper = Hyper {
            batch: 0,
            ..Hyper::default()
        };
        assert!(matches!(train(&m, &data, &hyper), Err(NnError::Hyper(_))));
    }
}
