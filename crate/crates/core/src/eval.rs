//! Experiment harness: accuracy triples, defenses, adversarial training,
//! key uniqueness, reconstruction error and sweeps.
//!
//! Every model is scored on the clean test split.

use std::fs;
use std::path::Path;

use learnlock_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, Batch, Targets};
use crate::crafting::{craft, CraftConfig, CraftTrace};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::locks::{apply_lock, apply_lock_with, apply_unlock_with, FingerprintCheck, LockKey, UnlockOptions};
use crate::models::{forward, init_classifier, Arch, ClassifierSpec, ClassifierState};
use crate::train::{confusion_matrix, recalls, train_classifier, train_with, TrainConfig};

/// How evaluator models are built and trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSetup {
    pub train: TrainConfig,
    /// Seed for evaluator weight initialization.
    pub init_seed: u64,
    pub width: usize,
}

impl Default for EvalSetup {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            init_seed: 7,
            width: 8,
        }
    }
}

impl EvalSetup {
    pub fn fresh_model(&self, arch: Arch, ds: &Dataset) -> Result<ClassifierState> {
        let spec = ClassifierSpec {
            width: self.width,
            ..ClassifierSpec::new(arch, ds.image_shape(), ds.num_classes())
        };
        init_classifier(&spec, self.init_seed)
    }
}

/// One trained evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arch: Arch,
    pub accuracy: f32,
    /// `confusion[true][predicted]` on the test split.
    pub confusion: Vec<Vec<usize>>,
    pub recalls: Vec<f32>,
    /// Test accuracy after each epoch.
    pub curve: Vec<f32>,
}

fn score(arch: Arch, state: &ClassifierState, test: &Dataset, curve: Vec<f32>) -> Result<RunResult> {
    let confusion = confusion_matrix(state, test)?;
    let correct: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    Ok(RunResult {
        arch,
        accuracy: correct as f32 / test.len() as f32,
        recalls: recalls(&confusion),
        confusion,
        curve,
    })
}

/// Trains a fresh `arch` model on `train` and scores it on `test`.
pub fn train_and_score(
    train: &Dataset,
    test: &Dataset,
    arch: Arch,
    setup: &EvalSetup,
    augment: &AugmentPolicy,
) -> Result<RunResult> {
    let state = setup.fresh_model(arch, train)?;
    let (state, history) = train_classifier(state, train, &setup.train, augment, Some(test))?;
    let curve = history.epochs.iter().filter_map(|e| e.test_accuracy).collect();
    score(arch, &state, test, curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub arch: Arch,
    pub clean: RunResult,
    pub locked: RunResult,
    pub unlocked: RunResult,
}

/// Clean, locked and unlocked accuracy for each architecture.
pub fn eval_triple(clean: &Dataset, test: &Dataset, key: &LockKey, archs: &[Arch], setup: &EvalSetup) -> Result<Vec<Triple>> {
    let locked = apply_lock(clean, key)?;
    let unlocked = apply_unlock_with(&locked, key, UnlockOptions::default())?.dataset;
    archs
        .iter()
        .map(|&arch| {
            log::info!("triple: {arch}");
            Ok(Triple {
                arch,
                clean: train_and_score(clean, test, arch, setup, &AugmentPolicy::None)?,
                locked: train_and_score(&locked, test, arch, setup, &AugmentPolicy::None)?,
                unlocked: train_and_score(&unlocked, test, arch, setup, &AugmentPolicy::None)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub policy: AugmentPolicy,
    pub run: RunResult,
}

/// Trains on `locked` under each policy.
pub fn eval_defenses(
    locked: &Dataset,
    test: &Dataset,
    policies: &[AugmentPolicy],
    epsilon: f32,
    arch: Arch,
    setup: &EvalSetup,
) -> Result<Vec<DefenseRow>> {
    for p in policies {
        p.validate(Some(epsilon))?;
    }
    policies
        .iter()
        .map(|p| {
            log::info!("defense: {}", p.name());
            Ok(DefenseRow {
                policy: *p,
                run: train_and_score(locked, test, arch, setup, p)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    pub epsilon: f32,
    pub step_size: f32,
}

impl PgdConfig {
    /// `steps` iterations with step `epsilon / 4` and a random start.
    pub fn new(steps: usize, epsilon: f32) -> Self {
        Self {
            steps,
            epsilon,
            step_size: epsilon / 4.0,
        }
    }
}

/// ℓ∞ PGD against `state`, starting from a uniform point in the ball.
/// With zero steps the input comes back untouched.
pub fn pgd_attack(state: &ClassifierState, x: &Tensor, y: &[usize], pgd: &PgdConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if pgd.steps == 0 {
        return Ok(x.clone());
    }
    let eps = pgd.epsilon;
    let mut adv = x.clone();
    for (a, &c) in adv.data_mut().iter_mut().zip(x.data()) {
        *a = (c + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0);
    }
    for _ in 0..pgd.steps {
        let mut g = Graph::new();
        let params = state.bind_frozen(&mut g);
        let xv = g.leaf(adv.clone(), true);
        let logits = forward(&mut g, &state.spec, &params, xv)?;
        let loss = g.cross_entropy(logits, y)?;
        if !g.value(loss).data()[0].is_finite() {
            return Err(Error::NonFinite("PGD attack loss"));
        }
        g.backward(loss)?;
        let grad = g.grad(xv).ok_or(Error::NonFinite("PGD input gradient"))?.to_vec();
        for ((a, &c), gr) in adv.data_mut().iter_mut().zip(x.data()).zip(grad) {
            let dir = if gr > 0.0 {
                1.0
            } else if gr < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = (*a + pgd.step_size * dir).clamp(c - eps, c + eps).clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

/// Min-max training: every batch is replaced by its PGD examples.
pub fn eval_adv_training(locked: &Dataset, test: &Dataset, pgd: &PgdConfig, arch: Arch, setup: &EvalSetup) -> Result<RunResult> {
    if !(pgd.epsilon >= 0.0 && pgd.step_size >= 0.0) {
        return Err(Error::Config(format!("bad PGD budget {pgd:?}")));
    }
    let state = setup.fresh_model(arch, locked)?;
    let (state, history) = train_with(state, locked, &setup.train, Some(test), |st, x, y, rng| {
        Ok(Batch {
            images: pgd_attack(st, &x, y, pgd, rng)?,
            targets: Targets::Hard(y.to_vec()),
        })
    })?;
    let curve = history.epochs.iter().filter_map(|e| e.test_accuracy).collect();
    score(arch, &state, test, curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessCell {
    /// Key that locked the training data.
    pub lock_key: usize,
    /// Key used to unlock it.
    pub unlock_key: usize,
    pub accuracy: f32,
}

/// Locks with key `i`, unlocks with key `j` for every pair and trains on
/// the result. Mismatched keys are forced through with a warning.
pub fn eval_uniqueness(clean: &Dataset, test: &Dataset, keys: &[&LockKey], arch: Arch, setup: &EvalSetup) -> Result<Vec<UniquenessCell>> {
    let opts = UnlockOptions {
        check: FingerprintCheck::Warn,
        iters: None,
    };
    let mut cells = Vec::new();
    for (i, ki) in keys.iter().enumerate() {
        let locked = apply_lock_with(clean, ki, FingerprintCheck::Warn)?;
        for (j, kj) in keys.iter().enumerate() {
            log::info!("uniqueness: lock {i} unlock {j}");
            let restored = apply_unlock_with(&locked, kj, opts)?.dataset;
            let run = train_and_score(&restored, test, arch, setup, &AugmentPolicy::None)?;
            cells.push(UniquenessCell {
                lock_key: i,
                unlock_key: j,
                accuracy: run.accuracy,
            });
        }
    }
    Ok(cells)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    pub samples: usize,
    pub locked_mean: f64,
    pub locked_std: f64,
    pub unlocked_mean: f64,
    pub unlocked_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn l2_rows(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.shape()[0])
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Per-image L2 of locked and unlocked images against the clean ones over
/// `samples` images drawn without replacement.
pub fn eval_reconstruction(clean: &Dataset, key: &LockKey, samples: usize, seed: u64, iters: Option<usize>) -> Result<ReconStats> {
    if samples == 0 || samples > clean.len() {
        return Err(Error::Config(format!("sample count {samples} outside 1..={}", clean.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = crate::train::shuffled(clean.len(), &mut rng);
    idx.truncate(samples);
    idx.sort_unstable();
    let subset = clean.subset(&idx);
    let locked = apply_lock_with(&subset, key, FingerprintCheck::Warn)?;
    let opts = UnlockOptions {
        check: FingerprintCheck::Warn,
        iters,
    };
    let unlocked = apply_unlock_with(&locked, key, opts)?.dataset;
    let (locked_mean, locked_std) = mean_std(&l2_rows(&locked.images, &subset.images));
    let (unlocked_mean, unlocked_std) = mean_std(&l2_rows(&unlocked.images, &subset.images));
    Ok(ReconStats {
        samples,
        locked_mean,
        locked_std,
        unlocked_mean,
        unlocked_std,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Epsilon,
    Percentage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f32,
    pub converged: bool,
    pub run: RunResult,
}

/// Full craft and locked-training pipeline per value. A percentage of zero
/// trains on the clean data.
pub fn sweep(
    clean: &Dataset,
    test: &Dataset,
    param: SweepParam,
    values: &[f32],
    base: &CraftConfig,
    arch: Arch,
    setup: &EvalSetup,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() || values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep values must be nonempty and sorted".into()));
    }
    values
        .iter()
        .map(|&v| {
            log::info!("sweep {param:?} = {v}");
            let mut cfg = base.clone();
            match param {
                SweepParam::Epsilon => cfg.epsilon = v,
                SweepParam::Percentage if v == 0.0 => {
                    let run = train_and_score(clean, test, arch, setup, &AugmentPolicy::None)?;
                    return Ok(SweepPoint {
                        value: v,
                        converged: true,
                        run,
                    });
                }
                SweepParam::Percentage => cfg.percentage = Some(v),
            }
            let out = craft(clean, &cfg)?;
            let run = train_and_score(&out.locked, test, arch, setup, &AugmentPolicy::None)?;
            Ok(SweepPoint {
                value: v,
                converged: out.trace.converged,
                run,
            })
        })
        .collect()
}

/// Experiments the harness knows by name.
pub const EXPERIMENTS: [&str; 7] = [
    "triple",
    "defenses",
    "advtrain",
    "uniqueness",
    "reconstruction",
    "sweep-epsilon",
    "sweep-percentage",
];

/// Machine-readable result of one or more experiments.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triples: Vec<Triple>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defenses: Vec<DefenseRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_training: Option<AdvTrainingRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uniqueness: Vec<UniquenessCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<ReconStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub craft_trace: Option<CraftTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainingRow {
    pub pgd: PgdConfig,
    pub clean: f32,
    pub standard: f32,
    pub adversarial: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut accs: Vec<f32> = Vec::new();
        for t in &self.triples {
            accs.extend([t.clean.accuracy, t.locked.accuracy, t.unlocked.accuracy]);
        }
        accs.extend(self.defenses.iter().map(|d| d.run.accuracy));
        accs.extend(self.uniqueness.iter().map(|c| c.accuracy));
        if let Some(a) = &self.adv_training {
            accs.extend([a.clean, a.standard, a.adversarial.accuracy]);
        }
        if let Some(s) = &self.sweep {
            accs.extend(s.points.iter().map(|p| p.run.accuracy));
        }
        match accs.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            Some(a) => Err(Error::Config(format!("accuracy {a} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

// ---- CSV tables -----------------------------------------------------------

#[derive(Serialize)]
struct TripleCsv {
    run: String,
    arch: Arch,
    clean: f32,
    locked: f32,
    unlocked: f32,
}

#[derive(Serialize)]
struct DefenseCsv {
    run: String,
    policy: &'static str,
    accuracy: f32,
}

#[derive(Serialize)]
struct AdvCsv {
    run: String,
    steps: usize,
    epsilon: f32,
    clean: f32,
    standard: f32,
    adversarial: f32,
}

#[derive(Serialize)]
struct UniqCsv {
    run: String,
    lock_key: usize,
    unlock_key: usize,
    accuracy: f32,
}

#[derive(Serialize)]
struct ReconCsv {
    run: String,
    samples: usize,
    locked_mean: f64,
    locked_std: f64,
    unlocked_mean: f64,
    unlocked_std: f64,
}

#[derive(Serialize)]
struct SweepCsv {
    param: SweepParam,
    value: f32,
    converged: bool,
    accuracy: f32,
    epoch: usize,
    epoch_accuracy: f32,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Table CSVs written by [`write_tables`].
pub const TABLE_FILES: [&str; 5] = [
    "accuracy_triples.csv",
    "defenses.csv",
    "adversarial_training.csv",
    "uniqueness.csv",
    "reconstruction.csv",
];

/// Merges reports into the five table CSVs under `dir`. Tables with no
/// rows still get a header-only file so the layout is fixed.
pub fn write_tables(reports: &[(String, EvalReport)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut triples = Vec::new();
    let mut defenses = Vec::new();
    let mut adv = Vec::new();
    let mut uniq = Vec::new();
    let mut recon = Vec::new();
    for (name, r) in reports {
        for t in &r.triples {
            triples.push(TripleCsv {
                run: name.clone(),
                arch: t.arch,
                clean: t.clean.accuracy,
                locked: t.locked.accuracy,
                unlocked: t.unlocked.accuracy,
            });
        }
        for d in &r.defenses {
            defenses.push(DefenseCsv {
                run: name.clone(),
                policy: d.policy.name(),
                accuracy: d.run.accuracy,
            });
        }
        if let Some(a) = &r.adv_training {
            adv.push(AdvCsv {
                run: name.clone(),
                steps: a.pgd.steps,
                epsilon: a.pgd.epsilon,
                clean: a.clean,
                standard: a.standard,
                adversarial: a.adversarial.accuracy,
            });
        }
        for c in &r.uniqueness {
            uniq.push(UniqCsv {
                run: name.clone(),
                lock_key: c.lock_key,
                unlock_key: c.unlock_key,
                accuracy: c.accuracy,
            });
        }
        if let Some(s) = &r.reconstruction {
            recon.push(ReconCsv {
                run: name.clone(),
                samples: s.samples,
                locked_mean: s.locked_mean,
                locked_std: s.locked_std,
                unlocked_mean: s.unlocked_mean,
                unlocked_std: s.unlocked_std,
            });
        }
    }
    // csv writes no header for an empty row set; emit one explicitly.
    write_or_header(&dir.join(TABLE_FILES[0]), &triples, "run,arch,clean,locked,unlocked")?;
    write_or_header(&dir.join(TABLE_FILES[1]), &defenses, "run,policy,accuracy")?;
    write_or_header(&dir.join(TABLE_FILES[2]), &adv, "run,steps,epsilon,clean,standard,adversarial")?;
    write_or_header(&dir.join(TABLE_FILES[3]), &uniq, "run,lock_key,unlock_key,accuracy")?;
    write_or_header(
        &dir.join(TABLE_FILES[4]),
        &recon,
        "run,samples,locked_mean,locked_std,unlocked_mean,unlocked_std",
    )
}

fn write_or_header<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<()> {
    if rows.is_empty() {
        fs::write(path, format!("{header}\n")).map_err(|e| Error::io(path, e))
    } else {
        write_csv(path, rows)
    }
}

/// Plot-ready curve: one line per (value, epoch).
pub fn write_sweep_csv(curve: &SweepCurve, path: &Path) -> Result<()> {
    let rows: Vec<SweepCsv> = curve
        .points
        .iter()
        .flat_map(|p| {
            p.run.curve.iter().enumerate().map(move |(epoch, &a)| SweepCsv {
                param: curve.param,
                value: p.value,
                converged: p.converged,
                accuracy: p.run.accuracy,
                epoch,
                epoch_accuracy: a,
            })
        })
        .collect();
    write_csv(path, &rows)
}
