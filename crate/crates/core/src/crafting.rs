//! Alternating min-min optimization of a classifier θ and a class-wise
//! transform ψ that makes the transformed data trivially easy to fit.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use learnlock_tensor::{Graph, LrSchedule, Sgd, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Batch, Targets};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::locks::conv::{perturbation_graph, PowerVector};
use crate::locks::{
    apply_lock, h_layout, spectral_normalize, ConvKey, ConvNet, Family, LinearKey, LockKey, MixturePart, Selection,
    Transform,
};
use crate::models::{forward, init_classifier, Arch, ClassifierSpec, ClassifierState};
use crate::train::{accuracy, sgd_step, shuffled};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Linear,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Linear,
    Conv,
    GlobalLinear,
    GlobalConv,
    /// Ordered `(family, classes)` assignment.
    Mixture(Vec<(FamilyKind, Vec<usize>)>),
}

impl TransformKind {
    /// Odd classes linear, even classes conv.
    pub fn odd_linear_even_conv(k: usize) -> Self {
        TransformKind::Mixture(vec![
            (FamilyKind::Linear, (0..k).filter(|c| c % 2 == 1).collect()),
            (FamilyKind::Conv, (0..k).filter(|c| c % 2 == 0).collect()),
        ])
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformKind::Linear => f.write_str("linear"),
            TransformKind::Conv => f.write_str("conv"),
            TransformKind::GlobalLinear => f.write_str("global-linear"),
            TransformKind::GlobalConv => f.write_str("global-conv"),
            TransformKind::Mixture(parts) => {
                let body: Vec<String> = parts
                    .iter()
                    .map(|(fam, cls)| {
                        let name = match fam {
                            FamilyKind::Linear => "linear",
                            FamilyKind::Conv => "conv",
                        };
                        let list: Vec<String> = cls.iter().map(|c| c.to_string()).collect();
                        format!("{name}={}", list.join(","))
                    })
                    .collect();
                write!(f, "mixture:{}", body.join(";"))
            }
        }
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    /// `linear`, `conv`, `global-linear`, `global-conv`, or an explicit
    /// assignment such as `mixture:linear=1,3;conv=0,2`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => TransformKind::Linear,
            "conv" => TransformKind::Conv,
            "global-linear" => TransformKind::GlobalLinear,
            "global-conv" => TransformKind::GlobalConv,
            _ => {
                let body = s.strip_prefix("mixture:").ok_or_else(|| {
                    Error::Config(format!(
                        "unknown transform {s:?}; expected linear, conv, global-linear, global-conv or mixture:<family>=<classes>;..."
                    ))
                })?;
                let mut parts = Vec::new();
                for item in body.split(';').filter(|p| !p.is_empty()) {
                    let (fam, list) = item
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("mixture part {item:?} lacks '='")))?;
                    let fam = match fam {
                        "linear" => FamilyKind::Linear,
                        "conv" => FamilyKind::Conv,
                        other => return Err(Error::Config(format!("unknown mixture family {other:?}"))),
                    };
                    let classes = list
                        .split(',')
                        .map(|c| c.trim().parse::<usize>().map_err(|e| Error::Config(format!("class {c:?}: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    parts.push((fam, classes));
                }
                TransformKind::Mixture(parts)
            }
        })
    }
}

const FINALIZE_ROUNDS: usize = 10;

/// How per-sample ψ losses in a batch combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiReduction {
    /// Sum: one batch step equals the per-sample updates at a frozen ψ.
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CraftConfig {
    pub transform: TransformKind,
    pub epsilon: f32,
    /// θ batches per round (I).
    pub outer_steps: usize,
    /// Passes over the in-scope data per ψ phase (J).
    pub inner_passes: usize,
    /// When set, the ψ phase runs this many batches instead of full passes.
    pub inner_steps: Option<usize>,
    /// Exit once the train error on D_p falls below this (λ).
    pub exit_error: f32,
    /// Linear ψ learning rates: scale (η1) and shift (η2).
    pub eta_w: f32,
    pub eta_b: f32,
    pub linear_reduction: PsiReduction,
    /// Learning rate for the weights and biases of `h`.
    pub eta_h: f32,
    pub h_reduction: PsiReduction,
    pub theta_lr: f32,
    pub theta_momentum: f32,
    pub theta_clip_norm: Option<f32>,
    pub batch_size: usize,
    pub max_rounds: usize,
    /// Stop after this many rounds without a new best error (0 disables).
    pub patience: usize,
    pub seed: u64,
    /// Controlled classes; `None` means all.
    pub classes: Option<BTreeSet<usize>>,
    /// Fraction of samples perturbed, chosen uniformly by seed.
    pub percentage: Option<f32>,
    pub arch: Arch,
    pub model_width: usize,
    pub fixed_point_iters: usize,
    /// Channel multiplier of `h` relative to the reference layout.
    pub h_width: f32,
    pub h_init_scale: f32,
    pub finalize_power_iters: usize,
}

impl CraftConfig {
    /// Linear defaults: I=20, J=1, ψ rate 0.1, λ=0.1.
    pub fn linear(epsilon: f32) -> Self {
        Self {
            transform: TransformKind::Linear,
            epsilon,
            outer_steps: 20,
            inner_passes: 1,
            inner_steps: None,
            exit_error: 0.1,
            eta_w: 0.1,
            eta_b: 0.1,
            linear_reduction: PsiReduction::Sum,
            eta_h: 1.0,
            h_reduction: PsiReduction::Mean,
            theta_lr: 0.03,
            theta_momentum: 0.9,
            theta_clip_norm: None,
            batch_size: 64,
            max_rounds: 30,
            patience: 0,
            seed: 0,
            classes: None,
            percentage: None,
            arch: Arch::MiniResnet,
            model_width: 8,
            fixed_point_iters: 5,
            h_width: 1.0,
            h_init_scale: 1.0,
            finalize_power_iters: 200,
        }
    }

    /// Conv defaults: I=25, J=3, λ=0.2 with early stopping.
    pub fn conv(epsilon: f32) -> Self {
        Self {
            transform: TransformKind::Conv,
            outer_steps: 25,
            inner_passes: 3,
            exit_error: 0.2,
            theta_lr: 0.01,
            patience: 5,
            ..Self::linear(epsilon)
        }
    }

    /// Defaults for `kind`: anything containing a conv family gets the conv
    /// schedule.
    pub fn for_transform(kind: TransformKind, epsilon: f32) -> Self {
        let has_conv = match &kind {
            TransformKind::Linear | TransformKind::GlobalLinear => false,
            TransformKind::Conv | TransformKind::GlobalConv => true,
            TransformKind::Mixture(parts) => parts.iter().any(|(f, _)| *f == FamilyKind::Conv),
        };
        let base = if has_conv { Self::conv(epsilon) } else { Self::linear(epsilon) };
        Self { transform: kind, ..base }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon {} outside (0, 1)", self.epsilon));
        }
        if self.outer_steps == 0 || (self.inner_passes == 0 && self.inner_steps.is_none()) {
            return bad("I and J must be at least 1".into());
        }
        if self.inner_steps == Some(0) {
            return bad("inner step count must be at least 1".into());
        }
        if !(self.exit_error > 0.0 && self.exit_error < 1.0) {
            return bad(format!("exit error {} outside (0, 1)", self.exit_error));
        }
        if !(self.eta_w > 0.0 && self.eta_b > 0.0 && self.eta_h > 0.0 && self.theta_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(p) = self.percentage {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("percentage {p} outside (0, 1]"));
            }
        }
        let k = ds.num_classes();
        if let Some(c) = &self.classes {
            if c.is_empty() {
                return bad("class scope is empty".into());
            }
            let counts = ds.class_counts();
            if let Some(&y) = c.iter().find(|&&y| y >= k || counts[y] == 0) {
                return bad(format!("scope class {y} is absent from the dataset"));
            }
        }
        if let TransformKind::Mixture(parts) = &self.transform {
            let mut seen = BTreeSet::new();
            for (_, cls) in parts {
                for &c in cls {
                    if c >= k || !seen.insert(c) {
                        return bad(format!("mixture class {c} repeated or outside 0..{k}"));
                    }
                }
            }
            if parts.is_empty() || parts.iter().any(|(_, c)| c.is_empty()) {
                return bad("mixture parts must be nonempty".into());
            }
        }
        if self.fixed_point_iters == 0 && self.uses_conv() {
            return bad("fixed-point iteration count must be positive".into());
        }
        Ok(())
    }

    fn uses_conv(&self) -> bool {
        match &self.transform {
            TransformKind::Conv | TransformKind::GlobalConv => true,
            TransformKind::Mixture(p) => p.iter().any(|(f, _)| *f == FamilyKind::Conv),
            _ => false,
        }
    }

    pub fn model_spec(&self, ds: &Dataset) -> ClassifierSpec {
        ClassifierSpec {
            width: self.model_width,
            ..ClassifierSpec::new(self.arch, ds.image_shape(), ds.num_classes())
        }
    }

    fn scope(&self, k: usize) -> BTreeSet<usize> {
        let all: BTreeSet<usize> = match &self.transform {
            TransformKind::Mixture(parts) => parts.iter().flat_map(|(_, c)| c.iter().copied()).collect(),
            _ => (0..k).collect(),
        };
        match &self.classes {
            Some(c) => all.intersection(c).copied().collect(),
            None => all,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_error: f32,
    pub theta_loss_mean: f32,
    pub psi_loss_mean: f32,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CraftTrace {
    pub rounds: Vec<RoundRecord>,
    pub converged: bool,
    pub early_stopped: bool,
}

impl CraftTrace {
    /// One JSON object per round.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rounds {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn final_error(&self) -> Option<f32> {
        self.rounds.last().map(|r| r.train_error)
    }
}

#[derive(Clone, Debug)]
pub struct CraftOutput {
    pub key: LockKey,
    pub locked: Dataset,
    pub trace: CraftTrace,
    /// Crafting model at exit.
    pub model: ClassifierState,
}

/// ψ under optimization plus the power-iteration vectors of conv layers.
struct Psi {
    key: LockKey,
    power: Vec<Vec<Vec<PowerVector>>>,
}

fn new_family(kind: FamilyKind, cfg: &CraftConfig, slots: usize, ds: &Dataset, rng: &mut ChaCha8Rng) -> Family {
    match kind {
        FamilyKind::Linear => Family::Linear(LinearKey::identity(cfg.epsilon, slots, ds.image_len())),
        FamilyKind::Conv => {
            let layout = h_layout(ds.image_shape()[0], cfg.h_width);
            Family::Conv(ConvKey {
                epsilon: cfg.epsilon,
                iters: cfg.fixed_point_iters,
                nets: (0..slots).map(|_| ConvNet::random(&layout, cfg.h_init_scale, rng)).collect(),
            })
        }
    }
}

fn families_mut(t: &mut Transform) -> Vec<&mut Family> {
    match t {
        Transform::Global(f) => vec![f],
        Transform::Mixture(parts) => parts.iter_mut().map(|p| &mut p.family).collect(),
        Transform::Linear(_) | Transform::Conv(_) => unreachable!("class-wise keys are crafted as a mixture view"),
    }
}

impl Psi {
    fn init(cfg: &CraftConfig, ds: &Dataset, rng: &mut ChaCha8Rng) -> Self {
        let k = ds.num_classes();
        let all: Vec<usize> = (0..k).collect();
        // Class-wise variants are optimized as a single-part mixture and
        // converted back at the end.
        let transform = match &cfg.transform {
            TransformKind::Linear => Transform::Mixture(vec![MixturePart {
                classes: all,
                family: new_family(FamilyKind::Linear, cfg, k, ds, rng),
            }]),
            TransformKind::Conv => Transform::Mixture(vec![MixturePart {
                classes: all,
                family: new_family(FamilyKind::Conv, cfg, k, ds, rng),
            }]),
            TransformKind::GlobalLinear => Transform::Global(new_family(FamilyKind::Linear, cfg, 1, ds, rng)),
            TransformKind::GlobalConv => Transform::Global(new_family(FamilyKind::Conv, cfg, 1, ds, rng)),
            TransformKind::Mixture(parts) => Transform::Mixture(
                parts
                    .iter()
                    .map(|(kind, classes)| MixturePart {
                        classes: classes.clone(),
                        family: new_family(*kind, cfg, classes.len(), ds, rng),
                    })
                    .collect(),
            ),
        };
        let key = LockKey {
            num_classes: k,
            image_shape: ds.image_shape(),
            epsilon: cfg.epsilon,
            scope: cfg.scope(k),
            fingerprint: ds.fingerprint(),
            transform,
            selection: cfg.percentage.filter(|&p| p < 1.0).map(|fraction| Selection {
                fraction,
                seed: cfg.seed ^ 0x5e1e_c7ed,
            }),
        };
        let mut psi = Psi { key, power: Vec::new() };
        psi.power = families_mut(&mut psi.key.transform)
            .iter()
            .map(|f| match f {
                Family::Conv(c) => c.nets.iter().map(|n| vec![PowerVector::default(); n.layers.len()]).collect(),
                Family::Linear(_) => Vec::new(),
            })
            .collect();
        psi
    }

    /// Keeps every family inside its admissible set.
    fn project(&mut self, hw: [usize; 2], power_iters: usize) -> Result<()> {
        let power = &mut self.power;
        for (fi, fam) in families_mut(&mut self.key.transform).into_iter().enumerate() {
            match fam {
                Family::Linear(l) => l.clip(),
                Family::Conv(c) => {
                    for (ni, net) in c.nets.iter_mut().enumerate() {
                        for (li, layer) in net.layers.iter_mut().enumerate() {
                            spectral_normalize(layer, hw, &mut power[fi][ni][li], power_iters)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Final normalization: repeats warm-started power rounds until the
    /// estimate no longer exceeds the cap.
    fn finalize(&mut self, hw: [usize; 2], power_iters: usize) -> Result<()> {
        let power = &mut self.power;
        for (fi, fam) in families_mut(&mut self.key.transform).into_iter().enumerate() {
            match fam {
                Family::Linear(l) => l.clip(),
                Family::Conv(c) => {
                    for (ni, net) in c.nets.iter_mut().enumerate() {
                        for (li, layer) in net.layers.iter_mut().enumerate() {
                            for _ in 0..FINALIZE_ROUNDS {
                                if spectral_normalize(layer, hw, &mut power[fi][ni][li], power_iters)? <= 1.0 + 1e-5 {
                                    break;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// The key in its public shape.
    fn export(&self, cfg: &CraftConfig) -> LockKey {
        let mut key = self.key.clone();
        if matches!(cfg.transform, TransformKind::Linear | TransformKind::Conv) {
            if let Transform::Mixture(mut parts) = key.transform {
                key.transform = match parts.remove(0).family {
                    Family::Linear(l) => Transform::Linear(l),
                    Family::Conv(c) => Transform::Conv(c),
                };
            }
        }
        key
    }
}

/// Differentiable handles for one family on a ψ-phase graph.
enum Bound {
    Linear { w: Var, b: Var },
    Conv(Vec<Vec<(Var, Var, usize)>>),
}

fn bind_families(g: &mut Graph, t: &Transform) -> Vec<Bound> {
    let fams: Vec<&Family> = match t {
        Transform::Global(f) => vec![f],
        Transform::Mixture(parts) => parts.iter().map(|p| &p.family).collect(),
        _ => unreachable!("crafting uses the mixture view"),
    };
    fams.into_iter()
        .map(|f| match f {
            Family::Linear(l) => Bound::Linear {
                w: g.param(l.w.clone()),
                b: g.param(l.b.clone()),
            },
            Family::Conv(c) => Bound::Conv(c.nets.iter().map(|n| n.bind(g, true)).collect()),
        })
        .collect()
}

/// `(family index, slot)` serving class `y` in the mixture view.
fn route(t: &Transform, y: usize) -> Option<(usize, usize)> {
    match t {
        Transform::Global(_) => Some((0, 0)),
        Transform::Mixture(parts) => parts
            .iter()
            .enumerate()
            .find_map(|(fi, p)| p.classes.iter().position(|&c| c == y).map(|s| (fi, s))),
        _ => None,
    }
}

/// One ψ step on the in-scope samples `idx`. Returns the mean loss.
fn psi_step(
    psi: &mut Psi,
    theta: &ClassifierState,
    ds: &Dataset,
    idx: &[usize],
    cfg: &CraftConfig,
) -> Result<f32> {
    let [c, h, w] = ds.image_shape();
    let d = c * h * w;
    let mut g = Graph::new();
    let bound = bind_families(&mut g, &psi.key.transform);
    // Group by (family, slot) so each group shares one transform.
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for &i in idx {
        let y = ds.labels[i];
        let r = route(&psi.key.transform, y).ok_or(Error::OutOfScope(y))?;
        match groups.iter_mut().find(|(k, _)| *k == r) {
            Some((_, v)) => v.push(i),
            None => groups.push((r, vec![i])),
        }
    }
    let mut parts = Vec::with_capacity(groups.len());
    let mut labels = Vec::with_capacity(idx.len());
    for ((fi, slot), members) in &groups {
        let n = members.len();
        labels.extend(members.iter().map(|&i| ds.labels[i]));
        let x = g.constant(ds.images.select_rows(members));
        let locked = match &bound[*fi] {
            Bound::Linear { w: wv, b: bv } => {
                let rows = vec![*slot; n];
                let wr = g.gather_rows(*wv, &rows)?;
                let br = g.gather_rows(*bv, &rows)?;
                let xf = g.reshape(x, &[n, d])?;
                let scaled = g.mul(xf, wr)?;
                let shifted = g.add(scaled, br)?;
                g.reshape(shifted, &[n, c, h, w])?
            }
            Bound::Conv(nets) => {
                let p = perturbation_graph(&mut g, &nets[*slot], x, cfg.epsilon)?;
                g.add(x, p)?
            }
        };
        parts.push(g.clip(locked, 0.0, 1.0));
    }
    let xb = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let params = theta.bind_frozen(&mut g);
    let logits = forward(&mut g, &theta.spec, &params, xb)?;
    let mean = g.cross_entropy(logits, &labels)?;
    let loss_value = g.value(mean).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("ψ-phase loss"));
    }
    g.backward(mean)?;
    let scale = |r: PsiReduction| match r {
        PsiReduction::Sum => idx.len() as f32,
        PsiReduction::Mean => 1.0,
    };
    let (lw, lb) = (cfg.eta_w * scale(cfg.linear_reduction), cfg.eta_b * scale(cfg.linear_reduction));
    let lh = cfg.eta_h * scale(cfg.h_reduction);
    let fams = families_mut(&mut psi.key.transform);
    for (fam, b) in fams.into_iter().zip(&bound) {
        match (fam, b) {
            (Family::Linear(l), Bound::Linear { w: wv, b: bv }) => {
                if let Some(gw) = g.grad(*wv) {
                    l.w.data_mut().iter_mut().zip(gw).for_each(|(p, gr)| *p -= lw * gr);
                }
                if let Some(gb) = g.grad(*bv) {
                    l.b.data_mut().iter_mut().zip(gb).for_each(|(p, gr)| *p -= lb * gr);
                }
            }
            (Family::Conv(ck), Bound::Conv(nets)) => {
                for (net, vars) in ck.nets.iter_mut().zip(nets) {
                    for (layer, &(wv, bv, _)) in net.layers.iter_mut().zip(vars) {
                        if let Some(gw) = g.grad(wv) {
                            layer.weight.data_mut().iter_mut().zip(gw).for_each(|(p, gr)| *p -= lh * gr);
                        }
                        if let Some(gb) = g.grad(bv) {
                            layer.bias.data_mut().iter_mut().zip(gb).for_each(|(p, gr)| *p -= lh * gr);
                        }
                    }
                }
            }
            _ => unreachable!("binding mirrors the transform"),
        }
    }
    psi.project([h, w], 1)?;
    Ok(loss_value)
}

/// Runs the alternating loop for any transform kind and scope.
pub fn craft(ds: &Dataset, cfg: &CraftConfig) -> Result<CraftOutput> {
    cfg.validate(ds)?;
    let [_, h, w] = ds.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init_classifier(&cfg.model_spec(ds), cfg.seed)?;
    let mut psi = Psi::init(cfg, ds, &mut rng);
    psi.project([h, w], 1)?;

    // In-scope samples that ψ sees.
    let selected = psi.key.selection.map(|s| s.mask(ds.len()));
    let psi_pool: Vec<usize> = (0..ds.len())
        .filter(|&i| psi.key.scope.contains(&ds.labels[i]) && selected.as_ref().map_or(true, |m| m[i]))
        .collect();

    let total_theta_steps = (cfg.max_rounds * cfg.outer_steps).max(1);
    let mut opt = Sgd::new(
        cfg.theta_lr,
        cfg.theta_momentum,
        LrSchedule::Cosine {
            total_steps: total_theta_steps,
        },
    )?
    .with_clip_norm(cfg.theta_clip_norm)?;
    let mut trace = CraftTrace::default();
    let mut best: Option<(f32, LockKey, Vec<Vec<Vec<PowerVector>>>)> = None;
    let mut since_best = 0;
    if cfg.max_rounds == 0 {
        log::warn!("max_rounds is 0: emitting the initial transform without crafting");
    }
    for round in 0..cfg.max_rounds {
        let start = Instant::now();
        let current = psi.export(cfg);
        let dp = apply_lock(ds, &current)?;

        let mut theta_loss = 0.0f64;
        for _ in 0..cfg.outer_steps {
            let idx: Vec<usize> = (0..cfg.batch_size.min(dp.len())).map(|_| rng.gen_range(0..dp.len())).collect();
            let batch = Batch {
                images: dp.images.select_rows(&idx),
                targets: Targets::Hard(idx.iter().map(|&i| dp.labels[i]).collect()),
            };
            theta_loss += sgd_step(&mut theta, &mut opt, &batch)?.0 as f64;
        }

        let mut psi_loss = 0.0f64;
        let mut psi_batches = 0usize;
        if !psi_pool.is_empty() {
            let batches: Vec<Vec<usize>> = match cfg.inner_steps {
                Some(steps) => (0..steps)
                    .map(|_| (0..cfg.batch_size).map(|_| psi_pool[rng.gen_range(0..psi_pool.len())]).collect())
                    .collect(),
                None => (0..cfg.inner_passes)
                    .flat_map(|_| {
                        let order = shuffled(psi_pool.len(), &mut rng);
                        order
                            .chunks(cfg.batch_size)
                            .map(|c| c.iter().map(|&j| psi_pool[j]).collect::<Vec<_>>())
                            .collect::<Vec<_>>()
                    })
                    .collect(),
            };
            for b in &batches {
                psi_loss += psi_step(&mut psi, &theta, ds, b, cfg)? as f64;
                psi_batches += 1;
            }
        }

        let dp = apply_lock(ds, &psi.export(cfg))?;
        let train_error = 1.0 - accuracy(&theta, &dp)?;
        let rec = RoundRecord {
            round,
            train_error,
            theta_loss_mean: (theta_loss / cfg.outer_steps as f64) as f32,
            psi_loss_mean: if psi_batches == 0 {
                0.0
            } else {
                (psi_loss / psi_batches as f64) as f32
            },
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {round}: error {:.4} θ-loss {:.4} ψ-loss {:.4} ({:.1}s)",
            rec.train_error,
            rec.theta_loss_mean,
            rec.psi_loss_mean,
            rec.seconds
        );
        trace.rounds.push(rec);
        if train_error < cfg.exit_error {
            trace.converged = true;
            best = None;
            break;
        }
        if cfg.patience > 0 {
            if best.as_ref().map_or(true, |(e, _, _)| train_error < *e) {
                best = Some((train_error, psi.key.clone(), psi.power.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    trace.early_stopped = true;
                    break;
                }
            }
        }
    }
    if let Some((_, key, power)) = best.filter(|_| trace.early_stopped) {
        psi.key = key;
        psi.power = power;
    }
    psi.finalize([h, w], cfg.finalize_power_iters)?;
    let key = psi.export(cfg);
    key.validate()?;
    let locked = apply_lock(ds, &key)?;
    if !trace.converged {
        log::warn!(
            "crafting stopped after {} rounds without reaching error {}",
            trace.rounds.len(),
            cfg.exit_error
        );
    }
    Ok(CraftOutput {
        key,
        locked,
        trace,
        model: theta,
    })
}

pub fn craft_linear(ds: &Dataset, cfg: &CraftConfig) -> Result<CraftOutput> {
    expect_kind(cfg, &[TransformKind::Linear])?;
    craft(ds, cfg)
}

pub fn craft_conv(ds: &Dataset, cfg: &CraftConfig) -> Result<CraftOutput> {
    expect_kind(cfg, &[TransformKind::Conv])?;
    craft(ds, cfg)
}

pub fn craft_global(ds: &Dataset, cfg: &CraftConfig) -> Result<CraftOutput> {
    expect_kind(cfg, &[TransformKind::GlobalLinear, TransformKind::GlobalConv])?;
    craft(ds, cfg)
}

/// Crafting restricted to a class scope and/or a sample percentage.
pub fn craft_scoped(ds: &Dataset, cfg: &CraftConfig) -> Result<CraftOutput> {
    if cfg.classes.is_none() && cfg.percentage.is_none() {
        return Err(Error::Config("scoped crafting needs a class scope or a percentage".into()));
    }
    craft(ds, cfg)
}

fn expect_kind(cfg: &CraftConfig, allowed: &[TransformKind]) -> Result<()> {
    if !allowed.contains(&cfg.transform) {
        return Err(Error::Config(format!("transform {} not valid here", cfg.transform)));
    }
    Ok(())
}

/// Pixel-wise `x' − x` for a batch, handy for inspecting patterns.
pub fn perturbation(clean: &Tensor, locked: &Tensor) -> Tensor {
    let data = locked.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    Tensor::new(clean.shape().to_vec(), data).expect("same shape")
}
