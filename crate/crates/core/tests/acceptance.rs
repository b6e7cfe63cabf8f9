//! End-to-end acceptance criteria on the synthetic benchmark (K=3, 3000
//! train / 600 test, 3x32x32, fixed seeds).
//!
//! Each test prints one `criterion N [PASS|FAIL]` line. Expensive artifacts
//! (crafted keys, baseline runs) are built once and shared. Run with
//! `cargo test -p learnlock --test acceptance -- --nocapture --test-threads 1`
//! to see the lines as they come.

#[path = "../../tensor/tests/support/gradcheck.rs"]
mod gradcheck;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use learnlock::augment::AugmentPolicy;
use learnlock::crafting::{craft, CraftConfig, CraftOutput, TransformKind};
use learnlock::dataset::{encode_raw, generate_synthetic, Dataset, SyntheticSpec};
use learnlock::eval::{
    eval_adv_training, eval_defenses, eval_reconstruction, eval_uniqueness, l2_rows, sweep, train_and_score, EvalReport,
    EvalSetup, PgdConfig, RunResult, SweepParam,
};
use learnlock::locks::{
    apply_unlock, apply_unlock_with, audit_spectral_norms, decode_key, encode_key, h_layout, header_len,
    lock_preclip, spectral_normalize, ConvKey, ConvNet, Family, LinearKey, LockKey, MixturePart, PowerVector, Selection,
    Transform, UnlockOptions,
};
use learnlock::models::Arch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f32 = 16.0 / 255.0;
const CHANCE: f32 = 1.0 / 3.0;

fn line(id: u32, name: &str, pass: bool, detail: String) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} [{tag}] {name}: {detail}");
    pass
}

struct Bench {
    train: Dataset,
    test: Dataset,
    setup: EvalSetup,
}

fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let _ = env_logger::builder().is_test(true).try_init();
        let (train, test) = generate_synthetic(&SyntheticSpec::default()).expect("benchmark");
        Bench {
            train,
            test,
            setup: EvalSetup::default(),
        }
    })
}

fn crafted(cell: &'static OnceLock<CraftOutput>, cfg: impl FnOnce() -> CraftConfig) -> &'static CraftOutput {
    cell.get_or_init(|| craft(&bench().train, &cfg()).expect("crafting"))
}

fn linear_key() -> &'static CraftOutput {
    static C: OnceLock<CraftOutput> = OnceLock::new();
    crafted(&C, || CraftConfig::linear(EPS))
}

fn conv_key() -> &'static CraftOutput {
    static C: OnceLock<CraftOutput> = OnceLock::new();
    crafted(&C, || CraftConfig::conv(EPS))
}

fn mixture_key() -> &'static CraftOutput {
    static C: OnceLock<CraftOutput> = OnceLock::new();
    crafted(&C, || CraftConfig::for_transform(TransformKind::odd_linear_even_conv(3), EPS))
}

fn resnet_run(cell: &'static OnceLock<RunResult>, data: impl FnOnce() -> Dataset) -> &'static RunResult {
    cell.get_or_init(|| {
        let b = bench();
        train_and_score(&data(), &b.test, Arch::MiniResnet, &b.setup, &AugmentPolicy::None).expect("training")
    })
}

fn clean_run() -> &'static RunResult {
    static R: OnceLock<RunResult> = OnceLock::new();
    resnet_run(&R, || bench().train.clone())
}

fn linear_locked_run() -> &'static RunResult {
    static R: OnceLock<RunResult> = OnceLock::new();
    resnet_run(&R, || linear_key().locked.clone())
}

fn linear_unlocked_run() -> &'static RunResult {
    static R: OnceLock<RunResult> = OnceLock::new();
    resnet_run(&R, || apply_unlock(&linear_key().locked, &linear_key().key).expect("unlock"))
}

/// Random keys of both families over the benchmark's shape.
fn random_keys(seed: u64, count: usize) -> Vec<LockKey> {
    let b = bench();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = b.train.image_shape();
    let d = c * h * w;
    (0..count)
        .map(|i| {
            let transform = if i % 2 == 0 {
                Transform::Linear(LinearKey::random(EPS, 3, d, &mut rng))
            } else {
                let layout = h_layout(c, 1.0);
                let mut nets: Vec<ConvNet> = (0..3).map(|_| ConvNet::random(&layout, 1.0, &mut rng)).collect();
                for net in &mut nets {
                    for layer in &mut net.layers {
                        // Random biases so the final ReLU is not mostly idle.
                        for v in layer.bias.data_mut() {
                            *v = rng.gen_range(-0.5..0.5);
                        }
                        spectral_normalize(layer, [h, w], &mut PowerVector::default(), 50).unwrap();
                    }
                }
                Transform::Conv(ConvKey {
                    epsilon: EPS,
                    iters: 5,
                    nets,
                })
            };
            LockKey {
                num_classes: 3,
                image_shape: [c, h, w],
                epsilon: EPS,
                scope: (0..3).collect(),
                fingerprint: b.train.fingerprint(),
                transform,
                selection: None,
            }
        })
        .collect()
}

/// Largest `|x' − x|` before clipping over in-scope rows, and the number of
/// (sample, key) pairs checked.
fn preclip_max(ds: &Dataset, key: &LockKey, rows: &[usize]) -> (f32, usize) {
    let sub = ds.subset(rows);
    let pre = lock_preclip(&sub, key).unwrap();
    let mut worst = 0.0f32;
    let mut pairs = 0;
    for i in 0..sub.len() {
        if key.slot_for(sub.labels[i]).is_none() {
            continue;
        }
        pairs += 1;
        for (a, b) in pre.row(i).iter().zip(sub.image(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst, pairs)
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Mean per-image L2 between `unlock_m(lock(x))` and `x` for `m = 1..=8`
/// over the rows of `classes`.
fn conv_curve(out: &CraftOutput, classes: &[usize]) -> Vec<f64> {
    let b = bench();
    let rows: Vec<usize> = (0..b.train.len()).filter(|&i| classes.contains(&b.train.labels[i])).collect();
    let clean = b.train.subset(&rows);
    (1..=8)
        .map(|m| {
            let opts = UnlockOptions {
                iters: Some(m),
                ..Default::default()
            };
            let un = apply_unlock_with(&out.locked, &out.key, opts).unwrap().dataset.subset(&rows);
            let d = l2_rows(&un.images, &clean.images);
            d.iter().sum::<f64>() / d.len() as f64
        })
        .collect()
}

fn conv_keys_of(key: &LockKey) -> Vec<&ConvKey> {
    match &key.transform {
        Transform::Conv(c) => vec![c],
        Transform::Global(Family::Conv(c)) => vec![c],
        Transform::Mixture(parts) => parts
            .iter()
            .filter_map(|p| match &p.family {
                Family::Conv(c) => Some(c),
                _ => None,
            })
            .collect(),
        _ => Vec::new(),
    }
}

fn sn_audit_max(key: &LockKey) -> f32 {
    let [_, h, w] = key.image_shape;
    conv_keys_of(key)
        .into_iter()
        .flat_map(|c| audit_spectral_norms(c, [h, w], 500).unwrap().into_iter().flatten())
        .fold(0.0, f32::max)
}

#[test]
fn c01_gradient_fidelity() {
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut count = 0;
    for seed in [1u64, 2, 3] {
        for r in gradcheck::check_all(seed) {
            worst = worst.max(r.max_rel_err);
            ok &= r.passed();
            count += 1;
        }
    }
    let pass = line(1, "gradient fidelity", ok, format!("{count} primitive checks, max rel err {worst:.2e} (tol 1e-4)"));
    assert!(pass);
}

#[test]
fn c02_epsilon_bound() {
    let b = bench();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pairs = 0;
    let mut worst = 0.0f32;
    // 16 random keys x 500 samples, plus the crafted keys over 1000 samples each.
    for key in random_keys(11, 16) {
        let rows: Vec<usize> = (0..500).map(|_| rng.gen_range(0..b.train.len())).collect();
        let (m, n) = preclip_max(&b.train, &key, &rows);
        worst = worst.max(m);
        pairs += n;
    }
    for out in [linear_key(), conv_key()] {
        let rows: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..b.train.len())).collect();
        let (m, n) = preclip_max(&b.train, &out.key, &rows);
        worst = worst.max(m);
        pairs += n;
    }
    let pass = line(
        2,
        "epsilon bound",
        pairs >= 10_000 && worst <= EPS,
        format!("{pairs} pairs, max |x'-x| {worst:.6} <= eps {EPS:.6}"),
    );
    assert!(pass);
}

#[test]
fn c03_linear_invertibility() {
    let b = bench();
    let out = linear_key();
    // Interior samples: no pixel was clipped when locking.
    let pre = lock_preclip(&b.train, &out.key).unwrap();
    let interior: Vec<usize> = (0..b.train.len())
        .filter(|&i| pre.row(i).iter().all(|v| (0.0..=1.0).contains(v)))
        .collect();
    let un = apply_unlock(&out.locked, &out.key).unwrap();
    let linf = un.images.select_rows(&interior).max_abs_diff(&b.train.images.select_rows(&interior));
    let d = l2_rows(&un.images, &b.train.images);
    let mean_l2 = d.iter().sum::<f64>() / d.len() as f64;
    let pass = line(
        3,
        "linear invertibility",
        !interior.is_empty() && linf <= 1e-6 && mean_l2 <= 1e-4,
        format!("{} interior samples, linf {linf:.2e} (<=1e-6), mean L2 {mean_l2:.2e} (<=1e-4)", interior.len()),
    );
    assert!(pass);
}

#[test]
fn c04_conv_invertibility() {
    let out = conv_key();
    let curve = conv_curve(out, &[0, 1, 2]);
    let sn = sn_audit_max(&out.key);
    let at5 = curve[4];
    let mono = strictly_decreasing(&curve);
    let pass = line(
        4,
        "conv invertibility",
        at5 <= 1e-2 && mono && sn <= 1.0 + 1e-3,
        format!(
            "mean L2 at m=5 {at5:.2e} (<=1e-2), m=1..8 {:?} strictly decreasing={mono}, max spectral norm {sn:.5} (<=1.001)",
            curve.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn c05_linear_learnability_gap() {
    let clean = clean_run().accuracy;
    let locked = linear_locked_run().accuracy;
    let unlocked = linear_unlocked_run().accuracy;
    let pass = line(
        5,
        "linear learnability gap",
        clean >= 0.90 && locked <= CHANCE + 0.10 && unlocked >= clean - 0.03,
        format!("clean {clean:.3} (>=0.90), locked {locked:.3} (<=0.433), unlocked {unlocked:.3} (>=clean-0.03)"),
    );
    assert!(pass);
}

#[test]
fn c06_conv_learnability_gap() {
    static L: OnceLock<RunResult> = OnceLock::new();
    static U: OnceLock<RunResult> = OnceLock::new();
    let out = conv_key();
    let clean = clean_run().accuracy;
    let locked = resnet_run(&L, || out.locked.clone()).accuracy;
    let unlocked = resnet_run(&U, || apply_unlock(&out.locked, &out.key).unwrap()).accuracy;
    let pass = line(
        6,
        "conv learnability gap",
        locked <= 0.48 && unlocked >= clean - 0.03,
        format!("clean {clean:.3}, locked {locked:.3} (<=0.48), unlocked {unlocked:.3} (>=clean-0.03)"),
    );
    assert!(pass);
}

#[test]
fn c07_architecture_transfer() {
    let b = bench();
    let locked = &linear_key().locked;
    let accs: Vec<(Arch, f32)> = [Arch::MiniCnn, Arch::MiniVgg]
        .into_iter()
        .map(|a| (a, train_and_score(locked, &b.test, a, &b.setup, &AugmentPolicy::None).unwrap().accuracy))
        .collect();
    let pass = line(
        7,
        "architecture transfer",
        accs.iter().all(|(_, a)| *a <= 0.50),
        accs.iter().map(|(a, v)| format!("{a} {v:.3}")).collect::<Vec<_>>().join(", ") + " (<=0.50 each)",
    );
    assert!(pass);
}

#[test]
fn c08_single_class_control() {
    let b = bench();
    let controlled = 0usize;
    let cfg = CraftConfig {
        classes: Some(BTreeSet::from([controlled])),
        ..CraftConfig::linear(EPS)
    };
    let out = craft(&b.train, &cfg).unwrap();
    let locked = train_and_score(&out.locked, &b.test, Arch::MiniResnet, &b.setup, &AugmentPolicy::None).unwrap();
    let unlocked_ds = apply_unlock(&out.locked, &out.key).unwrap();
    let unlocked = train_and_score(&unlocked_ds, &b.test, Arch::MiniResnet, &b.setup, &AugmentPolicy::None).unwrap();
    let clean = clean_run();
    let ctl = locked.recalls[controlled];
    let others_ok = (0..3).filter(|&k| k != controlled).all(|k| locked.recalls[k] >= 0.80);
    let restored = unlocked.recalls[controlled];
    let pass = line(
        8,
        "single-class control",
        ctl <= 0.20 && others_ok && restored >= clean.recalls[controlled] - 0.05,
        format!(
            "locked recalls {:?} (class {controlled} <=0.20, others >=0.80), restored {restored:.3} vs clean {:.3} (>=clean-0.05)",
            locked.recalls.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            clean.recalls[controlled]
        ),
    );
    assert!(pass);
}

#[test]
fn c09_percentage_sweep() {
    let b = bench();
    let values = [0.2f32, 0.4, 0.6, 0.8, 1.0];
    let points = sweep(
        &b.train,
        &b.test,
        SweepParam::Percentage,
        &values,
        &CraftConfig::linear(EPS),
        Arch::MiniResnet,
        &b.setup,
    )
    .unwrap();
    let accs: Vec<f32> = points.iter().map(|p| p.run.accuracy).collect();
    let drop = accs[0] - accs[4];
    let monotone = accs.windows(2).all(|w| w[1] <= w[0] + 0.05);
    let pass = line(
        9,
        "percentage sweep",
        drop >= 0.35 && monotone,
        format!(
            "locked acc at 20..100%: {:?}; drop {drop:.3} (>=0.35), monotone within 5 points={monotone}",
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn c10_defense_resistance() {
    let b = bench();
    let rows = eval_defenses(
        &linear_key().locked,
        &b.test,
        &AugmentPolicy::defense_suite(EPS),
        EPS,
        Arch::MiniResnet,
        &b.setup,
    )
    .unwrap();
    let none = rows.iter().find(|r| r.policy == AugmentPolicy::None).unwrap().run.accuracy;
    let reference = linear_locked_run().accuracy;
    let all_ok = rows.len() == 7 && rows.iter().all(|r| r.run.accuracy <= 0.60);
    let pass = line(
        10,
        "defense resistance",
        all_ok && (none - reference).abs() <= 0.02,
        rows.iter().map(|r| format!("{} {:.3}", r.policy.name(), r.run.accuracy)).collect::<Vec<_>>().join(", ")
            + &format!(" (<=0.60 each); none vs criterion 5 locked {reference:.3}"),
    );
    assert!(pass);
}

#[test]
fn c11_adversarial_training() {
    let b = bench();
    let pgd = PgdConfig::new(10, EPS);
    let adv = eval_adv_training(&linear_key().locked, &b.test, &pgd, Arch::MiniResnet, &b.setup).unwrap().accuracy;
    let standard = linear_locked_run().accuracy;
    let clean = clean_run().accuracy;
    let pass = line(
        11,
        "adversarial training",
        adv > standard && adv <= clean - 0.15,
        format!("PGD-10 eps {EPS:.4}: {adv:.3}; standard on locked {standard:.3}; clean {clean:.3} (needs standard < adv <= clean-0.15)"),
    );
    assert!(pass);
}

#[test]
fn c12_uniqueness() {
    let b = bench();
    let first = linear_key();
    let second = craft(
        &b.train,
        &CraftConfig {
            seed: 1,
            ..CraftConfig::linear(EPS)
        },
    )
    .unwrap();
    let distinct = encode_key(&first.key).unwrap() != encode_key(&second.key).unwrap();
    let cells = eval_uniqueness(&b.train, &b.test, &[&first.key, &second.key], Arch::MiniResnet, &b.setup).unwrap();
    let clean = clean_run().accuracy;
    let cross: Vec<f32> = cells.iter().filter(|c| c.lock_key != c.unlock_key).map(|c| c.accuracy).collect();
    let matched: Vec<f32> = cells.iter().filter(|c| c.lock_key == c.unlock_key).map(|c| c.accuracy).collect();
    let pass = line(
        12,
        "uniqueness",
        distinct && cross.iter().all(|&a| a <= CHANCE + 0.15) && matched.iter().all(|&a| a >= clean - 0.03),
        format!(
            "keys distinct={distinct}; cross-key {:?} (<=0.483); matched {:?} (>=clean-0.03, clean {clean:.3})",
            cross.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            matched.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn c13_mixture() {
    let b = bench();
    let out = mixture_key();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut notes = Vec::new();
    let mut ok = true;
    for k in 0..3usize {
        let rows: Vec<usize> = b.train.indices_by_class()[k].clone();
        let sample: Vec<usize> = (0..500).map(|_| rows[rng.gen_range(0..rows.len())]).collect();
        let (worst, _) = preclip_max(&b.train, &out.key, &sample);
        ok &= worst <= EPS;
        if k % 2 == 1 {
            let clean = b.train.subset(&rows);
            let un = apply_unlock(&out.locked, &out.key).unwrap().subset(&rows);
            let linf = un.images.max_abs_diff(&clean.images);
            let d = l2_rows(&un.images, &clean.images);
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            ok &= linf <= 1e-6 && mean <= 1e-4;
            notes.push(format!("class {k} linear: bound {worst:.4}, linf {linf:.1e}, mean L2 {mean:.1e}"));
        } else {
            let curve = conv_curve(out, &[k]);
            let mono = strictly_decreasing(&curve);
            ok &= curve[4] <= 1e-2 && mono;
            notes.push(format!(
                "class {k} conv: bound {worst:.4}, L2 at m=5 {:.1e}, strictly decreasing={mono}",
                curve[4]
            ));
        }
    }
    let sn = sn_audit_max(&out.key);
    ok &= sn <= 1.0 + 1e-3;
    let locked = train_and_score(&out.locked, &b.test, Arch::MiniResnet, &b.setup, &AugmentPolicy::None).unwrap().accuracy;
    let pass = line(
        13,
        "mixture key",
        ok && locked <= 0.50,
        format!("{}; spectral norm {sn:.5}; locked {locked:.3} (<=0.50)", notes.join("; ")),
    );
    assert!(pass);
}

#[test]
fn c14_global_lock() {
    let b = bench();
    let out = craft(&b.train, &CraftConfig::for_transform(TransformKind::GlobalLinear, EPS)).unwrap();
    let locked = train_and_score(&out.locked, &b.test, Arch::MiniResnet, &b.setup, &AugmentPolicy::None).unwrap().accuracy;
    let clean = clean_run().accuracy;
    let pass = line(
        14,
        "global lock",
        clean - locked >= 0.15,
        format!("clean {clean:.3}, global-locked {locked:.3}, drop {:.3} (>=0.15)", clean - locked),
    );
    assert!(pass);
}

#[test]
fn c15_key_codec() {
    let b = bench();
    let mut keys: Vec<LockKey> = random_keys(15, 2);
    let [c, h, w] = b.train.image_shape();
    let d = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let template = keys[0].clone();
    keys.push(LockKey {
        transform: Transform::Global(Family::Linear(LinearKey::random(EPS, 1, d, &mut rng))),
        ..template.clone()
    });
    keys.push(LockKey {
        scope: BTreeSet::from([1]),
        selection: Some(Selection {
            fraction: 0.4,
            seed: 9,
        }),
        ..template.clone()
    });
    let conv = match &keys[1].transform {
        Transform::Conv(k) => k.clone(),
        _ => unreachable!(),
    };
    keys.push(LockKey {
        transform: Transform::Mixture(vec![
            MixturePart {
                classes: vec![1],
                family: Family::Linear(LinearKey::random(EPS, 1, d, &mut rng)),
            },
            MixturePart {
                classes: vec![0, 2],
                family: Family::Conv(ConvKey {
                    nets: conv.nets[..2].to_vec(),
                    ..conv.clone()
                }),
            },
        ]),
        ..template.clone()
    });
    keys.push(LockKey {
        transform: Transform::Global(Family::Conv(ConvKey {
            nets: conv.nets[..1].to_vec(),
            ..conv
        })),
        ..template
    });
    keys.push(linear_key().key.clone());
    let mut ok = true;
    for k in &keys {
        let bytes = encode_key(k).unwrap();
        let back = decode_key(&bytes).unwrap();
        ok &= back == *k && encode_key(&back).unwrap() == bytes;
    }
    // Class-wise linear payload: W then B, K*d values each, no trailer fields.
    let bytes = encode_key(&linear_key().key).unwrap();
    let payload = bytes.len() - header_len(3) - 1;
    let expected = 2 * 3 * d * 4;
    let pass = line(
        15,
        "key codec",
        ok && payload == expected,
        format!(
            "{} variants round-trip bitwise={ok}; linear payload {payload} bytes = {} f32 (expected 2*K*d = {})",
            keys.len(),
            payload / 4,
            expected / 4
        ),
    );
    assert!(pass);
}

/// A reduced but complete pipeline: craft, lock, unlock, train, report.
fn pipeline(seed: u64) -> (Vec<u8>, Vec<u8>, Vec<u8>, String) {
    let spec = SyntheticSpec {
        train_per_class: 200,
        test_per_class: 50,
        seed,
        ..Default::default()
    };
    let (train, test) = generate_synthetic(&spec).unwrap();
    let out = craft(
        &train,
        &CraftConfig {
            seed,
            max_rounds: 3,
            ..CraftConfig::linear(EPS)
        },
    )
    .unwrap();
    let unlocked = apply_unlock(&out.locked, &out.key).unwrap();
    let setup = EvalSetup {
        train: learnlock::train::TrainConfig {
            epochs: 2,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = train_and_score(&out.locked, &test, Arch::MiniCnn, &setup, &AugmentPolicy::None).unwrap();
    let report = EvalReport {
        experiment: "determinism".into(),
        seed,
        reconstruction: Some(eval_reconstruction(&train, &out.key, 100, seed, None).unwrap()),
        defenses: vec![learnlock::eval::DefenseRow {
            policy: AugmentPolicy::None,
            run,
        }],
        ..Default::default()
    };
    (
        encode_key(&out.key).unwrap(),
        encode_raw(&out.locked).unwrap(),
        encode_raw(&unlocked).unwrap(),
        report.to_json().unwrap(),
    )
}

#[test]
fn c16_determinism() {
    let a = pipeline(5);
    let b = pipeline(5);
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3];
    let pass = line(
        16,
        "determinism",
        same.iter().all(|&s| s),
        format!("key/locked/unlocked/report identical: {same:?}"),
    );
    assert!(pass);
}
