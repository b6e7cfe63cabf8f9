//! Supervised training loop, accuracy and confusion matrices.

use learnlock_tensor::{Graph, LrSchedule, Sgd, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, Batch, Targets};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{forward, predict_labels, ClassifierState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Global gradient-norm clip applied before the momentum update.
    pub clip_norm: Option<f32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("bad optimizer settings lr={} momentum={}", self.lr, self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f32,
    pub test_accuracy: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn final_test_accuracy(&self) -> Option<f32> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }
}

/// One SGD step on a prepared batch. Returns the mean loss and the number of
/// samples whose argmax matches the (dominant) target.
pub fn sgd_step(state: &mut ClassifierState, opt: &mut Sgd, batch: &Batch) -> Result<(f32, usize)> {
    state.check_batch(batch.images.shape())?;
    let mut g = Graph::new();
    let params = state.bind(&mut g);
    let x = g.constant(batch.images.clone());
    let logits = forward(&mut g, &state.spec, &params, x)?;
    let loss = match &batch.targets {
        Targets::Hard(y) => g.cross_entropy(logits, y)?,
        Targets::Soft(t) => g.soft_cross_entropy(logits, t.clone())?,
    };
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let correct = count_correct(g.value(logits), &batch.targets);
    g.backward(loss)?;
    let grads: Vec<Option<&[f32]>> = params.iter().map(|&p| g.grad(p)).collect();
    opt.step(&mut state.params, &grads)?;
    Ok((loss_value, correct))
}

fn count_correct(logits: &Tensor, targets: &Targets) -> usize {
    let pred = crate::models::argmax_rows(logits);
    match targets {
        Targets::Hard(y) => pred.iter().zip(y).filter(|(p, y)| p == y).count(),
        Targets::Soft(t) => {
            let k = logits.row_len();
            let dominant = crate::models::argmax_rows(&Tensor::new(logits.shape().to_vec(), t.clone()).expect("shape"));
            debug_assert_eq!(t.len(), pred.len() * k);
            pred.iter().zip(&dominant).filter(|(p, y)| p == y).count()
        }
    }
}

pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

/// Trains with a cross-entropy objective under `augment`.
pub fn train_classifier(
    state: ClassifierState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    augment: &AugmentPolicy,
    test: Option<&Dataset>,
) -> Result<(ClassifierState, History)> {
    augment.validate(None)?;
    let k = dataset.num_classes();
    train_with(state, dataset, cfg, test, |_, x, y, rng| augment.apply(x, y, k, rng))
}

/// Training loop with a caller-supplied batch preparation step, which sees
/// the current model (adversarial training needs it).
pub fn train_with<F>(
    mut state: ClassifierState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    test: Option<&Dataset>,
    mut prepare: F,
) -> Result<(ClassifierState, History)>
where
    F: FnMut(&ClassifierState, Tensor, &[usize], &mut ChaCha8Rng) -> Result<Batch>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    state.check_batch(dataset.images.shape())?;
    if dataset.num_classes() != state.spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            dataset.num_classes(),
            state.spec.num_classes
        )));
    }
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((state, history));
    }
    let n = dataset.len();
    let total = cfg.epochs * cfg.steps_per_epoch(n);
    let mut opt =
        Sgd::new(cfg.lr, cfg.momentum, LrSchedule::Cosine { total_steps: total })?.with_clip_norm(cfg.clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        let order = shuffled(n, &mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let x = dataset.images.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
            let batch = prepare(&state, x, &y, &mut rng)?;
            let (loss, c) = sgd_step(&mut state, &mut opt, &batch)?;
            loss_sum += loss as f64 * idx.len() as f64;
            correct += c;
        }
        let test_accuracy = test.map(|t| accuracy(&state, t)).transpose()?;
        let stats = EpochStats {
            epoch,
            train_loss: (loss_sum / n as f64) as f32,
            train_accuracy: correct as f32 / n as f32,
            test_accuracy,
        };
        log::debug!("epoch {epoch}: {stats:?}");
        history.epochs.push(stats);
    }
    Ok((state, history))
}

pub fn accuracy(state: &ClassifierState, ds: &Dataset) -> Result<f32> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot score an empty dataset".into()));
    }
    let pred = predict_labels(state, &ds.images)?;
    Ok(pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count() as f32 / ds.len() as f32)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(state: &ClassifierState, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    let k = ds.num_classes();
    let mut m = vec![vec![0; k]; k];
    for (p, &y) in predict_labels(state, &ds.images)?.into_iter().zip(&ds.labels) {
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn recalls(confusion: &[Vec<usize>]) -> Vec<f32> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[i] as f32 / n as f32
            }
        })
        .collect()
}
