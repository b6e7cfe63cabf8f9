//! Invertible class-wise transforms and their application to datasets.

mod codec;
pub mod conv;
pub mod linear;

use std::collections::BTreeSet;

use learnlock_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Fingerprint};
use crate::error::{Error, Result};

pub use codec::{decode_key, encode_key, header_len, KEY_MAGIC, KEY_VERSION};
pub use conv::{audit_spectral_norms, h_layout, spectral_normalize, ConvKey, ConvLayer, ConvNet, PowerVector};
pub use linear::LinearKey;

/// One transform family holding `slots` independent parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Linear(LinearKey),
    Conv(ConvKey),
}

impl Family {
    pub fn as_ref(&self) -> FamilyRef<'_> {
        match self {
            Family::Linear(k) => FamilyRef::Linear(k),
            Family::Conv(k) => FamilyRef::Conv(k),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum FamilyRef<'a> {
    Linear(&'a LinearKey),
    Conv(&'a ConvKey),
}

impl FamilyRef<'_> {
    pub fn slots(self) -> usize {
        match self {
            FamilyRef::Linear(k) => k.slots(),
            FamilyRef::Conv(k) => k.slots(),
        }
    }

    pub fn epsilon(self) -> f32 {
        match self {
            FamilyRef::Linear(k) => k.epsilon,
            FamilyRef::Conv(k) => k.epsilon,
        }
    }

    pub fn kind(self) -> &'static str {
        match self {
            FamilyRef::Linear(_) => "linear",
            FamilyRef::Conv(_) => "conv",
        }
    }

    /// Pre-clip transform of a batch that all uses `slot`.
    pub fn lock_preclip(self, slot: usize, x: &Tensor) -> Result<Tensor> {
        match self {
            FamilyRef::Linear(k) => {
                let mut out = x.clone();
                let d = x.row_len();
                for (src, dst) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
                    k.lock_preclip(slot, src, dst);
                }
                Ok(out)
            }
            FamilyRef::Conv(k) => k.lock_preclip(slot, x),
        }
    }

    pub fn lock(self, slot: usize, x: &Tensor) -> Result<Tensor> {
        Ok(self.lock_preclip(slot, x)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Inverse for one slot. `iters` overrides the conv key's own count.
    /// The second value is the fixed-point residual (zero for linear).
    pub fn unlock(self, slot: usize, x: &Tensor, iters: Option<usize>) -> Result<(Tensor, f32)> {
        match self {
            FamilyRef::Linear(k) => {
                let mut out = x.clone();
                let d = x.row_len();
                for (src, dst) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
                    k.unlock(slot, src, dst)?;
                }
                Ok((out, 0.0))
            }
            FamilyRef::Conv(k) => k.unlock(slot, x, iters.unwrap_or(k.iters)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixturePart {
    /// Classes served by this part; slot `i` belongs to `classes[i]`.
    pub classes: Vec<usize>,
    pub family: Family,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    /// One slot per class.
    Linear(LinearKey),
    Conv(ConvKey),
    /// Disjoint class sets, each with its own family; part order is kept.
    Mixture(Vec<MixturePart>),
    /// A single class-agnostic slot.
    Global(Family),
}

impl Transform {
    pub fn kind(&self) -> &'static str {
        match self {
            Transform::Linear(_) => "linear",
            Transform::Conv(_) => "conv",
            Transform::Mixture(_) => "mixture",
            Transform::Global(Family::Linear(_)) => "global-linear",
            Transform::Global(Family::Conv(_)) => "global-conv",
        }
    }
}

/// Uniform random subset of samples that a percentage-scoped key touches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub fraction: f32,
    pub seed: u64,
}

impl Selection {
    /// Sorted indices of the `round(fraction * n)` chosen samples.
    pub fn indices(&self, n: usize) -> Vec<usize> {
        let take = ((self.fraction as f64 * n as f64).round() as usize).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut idx = crate::train::shuffled(n, &mut rng);
        idx.truncate(take);
        idx.sort_unstable();
        idx
    }

    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for i in self.indices(n) {
            m[i] = true;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LockKey {
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    pub epsilon: f32,
    pub scope: BTreeSet<usize>,
    pub fingerprint: Fingerprint,
    pub transform: Transform,
    pub selection: Option<Selection>,
}

impl LockKey {
    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Resolves the family and slot serving class `y`, or `None` when the
    /// class is out of scope.
    pub fn slot_for(&self, y: usize) -> Option<(FamilyRef<'_>, usize)> {
        if !self.scope.contains(&y) {
            return None;
        }
        match &self.transform {
            Transform::Linear(k) => Some((FamilyRef::Linear(k), y)),
            Transform::Conv(k) => Some((FamilyRef::Conv(k), y)),
            Transform::Global(f) => Some((f.as_ref(), 0)),
            Transform::Mixture(parts) => parts
                .iter()
                .find_map(|p| p.classes.iter().position(|&c| c == y).map(|slot| (p.family.as_ref(), slot))),
        }
    }

    /// Checks structural invariants of a decoded or crafted key.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        let d = self.image_len();
        let corrupt = |m: String| Err(Error::CorruptKey(m));
        if k < 2 {
            return corrupt(format!("key covers {k} classes"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return corrupt(format!("epsilon {} outside (0, 1)", self.epsilon));
        }
        if let Some(&c) = self.scope.iter().find(|&&c| c >= k) {
            return corrupt(format!("scope class {c} outside 0..{k}"));
        }
        if let Some(s) = self.selection {
            if !(s.fraction > 0.0 && s.fraction <= 1.0) {
                return corrupt(format!("selection fraction {} outside (0, 1]", s.fraction));
            }
        }
        let check_family = |f: FamilyRef<'_>, slots: usize| -> Result<()> {
            if f.slots() != slots {
                return Err(Error::CorruptKey(format!("{} family has {} slots, expected {slots}", f.kind(), f.slots())));
            }
            if f.epsilon() != self.epsilon {
                return Err(Error::CorruptKey("family epsilon differs from key epsilon".into()));
            }
            match f {
                FamilyRef::Linear(l) => {
                    if l.dim() != d {
                        return Err(Error::CorruptKey(format!("linear key dimension {} != image size {d}", l.dim())));
                    }
                    if l.w.data().iter().any(|&v| !(v > 0.0)) {
                        return Err(Error::CorruptKey("non-positive linear scale".into()));
                    }
                }
                FamilyRef::Conv(c) => {
                    for net in &c.nets {
                        let (first, last) = match (net.layers.first(), net.layers.last()) {
                            (Some(a), Some(b)) => (a, b),
                            _ => return Err(Error::CorruptKey("empty residual network".into())),
                        };
                        if first.weight.shape()[1] != self.image_shape[0] || last.weight.shape()[0] != self.image_shape[0] {
                            return Err(Error::CorruptKey("residual network channel mismatch".into()));
                        }
                    }
                }
            }
            Ok(())
        };
        match &self.transform {
            Transform::Linear(l) => check_family(FamilyRef::Linear(l), k)?,
            Transform::Conv(c) => check_family(FamilyRef::Conv(c), k)?,
            Transform::Global(f) => check_family(f.as_ref(), 1)?,
            Transform::Mixture(parts) => {
                let mut seen = BTreeSet::new();
                for p in parts {
                    for &c in &p.classes {
                        if c >= k || !seen.insert(c) {
                            return corrupt(format!("mixture class {c} repeated or out of range"));
                        }
                    }
                    check_family(p.family.as_ref(), p.classes.len())?;
                }
                if !self.scope.is_subset(&seen) {
                    return corrupt("mixture scope includes classes without a transform".into());
                }
            }
        }
        Ok(())
    }

    fn check_dataset(&self, ds: &Dataset, check: FingerprintCheck) -> Result<()> {
        if ds.num_classes() != self.num_classes || ds.image_shape() != self.image_shape {
            return Err(Error::Config(format!(
                "key expects {} classes of {:?}, dataset has {} classes of {:?}",
                self.num_classes,
                self.image_shape,
                ds.num_classes(),
                ds.image_shape()
            )));
        }
        let fp = ds.fingerprint();
        if fp != self.fingerprint {
            let err = Error::FingerprintMismatch {
                key: self.fingerprint.to_hex(),
                dataset: fp.to_hex(),
            };
            match check {
                FingerprintCheck::Strict => return Err(err),
                FingerprintCheck::Warn => log::warn!("{err}; continuing as requested"),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FingerprintCheck {
    #[default]
    Strict,
    Warn,
}

/// Samples of each in-scope class with the family and slot serving them.
fn plan<'a>(key: &'a LockKey, ds: &Dataset) -> Vec<(Vec<usize>, FamilyRef<'a>, usize)> {
    let mask = key.selection.map(|s| s.mask(ds.len()));
    let mut out = Vec::new();
    for (y, idx) in ds.indices_by_class().into_iter().enumerate() {
        let Some((family, slot)) = key.slot_for(y) else { continue };
        let idx: Vec<usize> = match &mask {
            Some(m) => idx.into_iter().filter(|&i| m[i]).collect(),
            None => idx,
        };
        if !idx.is_empty() {
            out.push((idx, family, slot));
        }
    }
    out
}

fn scatter(images: &mut Tensor, idx: &[usize], rows: &Tensor) {
    for (r, &i) in idx.iter().enumerate() {
        images.row_mut(i).copy_from_slice(rows.row(r));
    }
}

pub fn apply_lock(ds: &Dataset, key: &LockKey) -> Result<Dataset> {
    apply_lock_with(ds, key, FingerprintCheck::Strict)
}

/// Transforms in-scope samples; all others pass through bit-identical.
pub fn apply_lock_with(ds: &Dataset, key: &LockKey, check: FingerprintCheck) -> Result<Dataset> {
    key.check_dataset(ds, check)?;
    let mut images = ds.images.clone();
    for (idx, family, slot) in plan(key, ds) {
        let locked = family.lock(slot, &ds.images.select_rows(&idx))?;
        scatter(&mut images, &idx, &locked);
    }
    ds.with_images(images)
}

/// Pre-clip locked images (for bound checks); out-of-scope rows unchanged.
pub fn lock_preclip(ds: &Dataset, key: &LockKey) -> Result<Tensor> {
    key.check_dataset(ds, FingerprintCheck::Warn)?;
    let mut images = ds.images.clone();
    for (idx, family, slot) in plan(key, ds) {
        let locked = family.lock_preclip(slot, &ds.images.select_rows(&idx))?;
        scatter(&mut images, &idx, &locked);
    }
    Ok(images)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnlockOptions {
    pub check: FingerprintCheck,
    /// Overrides the fixed-point iteration count of conv slots.
    pub iters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unlocked {
    pub dataset: Dataset,
    /// Largest fixed-point residual over conv slots (zero for linear).
    pub max_residual: f32,
}

pub fn apply_unlock(ds: &Dataset, key: &LockKey) -> Result<Dataset> {
    Ok(apply_unlock_with(ds, key, UnlockOptions::default())?.dataset)
}

pub fn apply_unlock_with(ds: &Dataset, key: &LockKey, opts: UnlockOptions) -> Result<Unlocked> {
    key.check_dataset(ds, opts.check)?;
    let mut images = ds.images.clone();
    let mut max_residual = 0.0f32;
    for (idx, family, slot) in plan(key, ds) {
        let (restored, r) = family.unlock(slot, &ds.images.select_rows(&idx), opts.iters)?;
        max_residual = max_residual.max(r);
        scatter(&mut images, &idx, &restored);
    }
    // Inverse images can leave [0, 1] slightly; the dataset invariant clamps.
    images.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Unlocked {
        dataset: ds.with_images(images)?,
        max_residual,
    })
}

/// Key whose transform is the identity for every class in `scope`.
pub fn identity_key(ds: &Dataset, epsilon: f32, scope: BTreeSet<usize>) -> LockKey {
    LockKey {
        num_classes: ds.num_classes(),
        image_shape: ds.image_shape(),
        epsilon,
        scope,
        fingerprint: ds.fingerprint(),
        transform: Transform::Linear(LinearKey::identity(epsilon, ds.num_classes(), ds.image_len())),
        selection: None,
    }
}
