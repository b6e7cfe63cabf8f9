use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use learnlock::augment::AugmentPolicy;
use learnlock::crafting::{craft as craft_key, CraftConfig, TransformKind};
use learnlock::dataset::{generate_synthetic, load_dataset, save_dataset, Dataset, Split, SyntheticSpec};
use learnlock::eval::{
    eval_adv_training, eval_defenses, eval_reconstruction, eval_triple, eval_uniqueness, sweep, train_and_score,
    write_sweep_csv, write_tables, AdvTrainingRow, EvalReport, EvalSetup, PgdConfig, SweepCurve, SweepParam, EXPERIMENTS,
};
use learnlock::locks::{
    apply_lock, apply_lock_with, apply_unlock_with, decode_key, encode_key, FingerprintCheck, LockKey, UnlockOptions,
};
use learnlock::models::{encode_checkpoint, Arch};
use learnlock::train::{train_classifier, TrainConfig};
use serde::Serialize;

use crate::args::{
    Cli, CraftArgs, EvalArgs, GenerateArgs, LockArgs, ReportArgs, TrainArgs, TrainOpts, UnlockArgs,
};
use crate::failure::{CliResult, Failure};

const KEY_FILE: &str = "key.llk";

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(learnlock::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn dir(root: &Path, sub: &str) -> CliResult<PathBuf> {
    let p = root.join(sub);
    fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
    Ok(p)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn require(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} does not exist", path.display())))
    }
}

fn load(path: &Path, what: &str) -> CliResult<Dataset> {
    require(path, what)?;
    Ok(load_dataset(path)?)
}

fn load_key(path: &Path) -> CliResult<LockKey> {
    require(path, "key file")?;
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(decode_key(&bytes)?)
}

/// Refuses an output location that equals or contains an input.
fn guard_inputs(target: &Path, inputs: &[&Path]) -> CliResult {
    let abs = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    let target = abs(target);
    for i in inputs {
        if abs(i).starts_with(&target) {
            return Err(config_err(format!(
                "output {} would overwrite input {}",
                target.display(),
                i.display()
            )));
        }
    }
    Ok(())
}

/// Writes the exact invocation beside the outputs so it can be replayed.
fn write_run_config(cli: &Cli, out: &Path, name: &str) -> CliResult {
    #[derive(Serialize)]
    struct RunConfig<'a> {
        tool_version: &'static str,
        #[serde(flatten)]
        cli: &'a Cli,
    }
    let runs = dir(out, "runs")?;
    let text = serde_json::to_string_pretty(&RunConfig {
        tool_version: env!("CARGO_PKG_VERSION"),
        cli,
    })
    .map_err(|e| Failure::Runtime(e.into()))?;
    write_text(&runs.join(format!("{name}-s{}.config.json", cli.seed)), &text)
}

fn parse_arch(s: &str) -> CliResult<Arch> {
    Ok(s.parse()?)
}

fn parse_transform(s: &str) -> CliResult<TransformKind> {
    Ok(s.parse()?)
}

fn setup(cli: &Cli, opts: &TrainOpts, width: usize) -> EvalSetup {
    EvalSetup {
        train: TrainConfig {
            epochs: opts.epochs,
            batch_size: opts.batch_size,
            lr: opts.lr,
            clip_norm: (opts.clip_norm > 0.0).then_some(opts.clip_norm),
            seed: cli.seed,
            ..Default::default()
        },
        init_seed: opts.init_seed,
        width,
    }
}

pub fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        image_shape: [3, a.size, a.size],
        seed: cli.seed,
        ..Default::default()
    };
    let (train, test) = generate_synthetic(&spec)?;
    let data = dir(&a.out.out, "data")?;
    save_dataset(&train, &data.join("train"), a.out.format.into())?;
    save_dataset(&test, &data.join("test"), a.out.format.into())?;
    write_run_config(cli, &a.out.out, "generate")?;
    println!(
        "wrote {} train and {} test images to {}",
        train.len(),
        test.len(),
        data.display()
    );
    Ok(())
}

fn craft_config(cli: &Cli, a: &CraftArgs, k: usize) -> CliResult<CraftConfig> {
    let kind = parse_transform(&a.transform)?;
    let mut cfg = CraftConfig::for_transform(kind, a.epsilon);
    cfg.seed = cli.seed;
    cfg.arch = parse_arch(&a.model.arch)?;
    cfg.model_width = a.model.width;
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => {
            $(if let Some(v) = a.$arg { cfg.$field = v; })*
        };
    }
    set!(outer_steps <- outer_steps, inner_passes <- inner_passes, exit_error <- exit_error, eta_w <- eta_w,
        eta_b <- eta_b, eta_h <- eta_h, theta_lr <- theta_lr, batch_size <- batch_size, max_rounds <- max_rounds,
        patience <- patience, fixed_point_iters <- fixed_point_iters, h_width <- h_width);
    cfg.inner_steps = a.inner_steps.or(cfg.inner_steps);
    cfg.percentage = a.percentage;
    if !a.classes.is_empty() {
        if let Some(&c) = a.classes.iter().find(|&&c| c >= k) {
            return Err(config_err(format!("class {c} outside 0..{k}")));
        }
        cfg.classes = Some(a.classes.iter().copied().collect());
    }
    Ok(cfg)
}

pub fn craft(cli: &Cli, a: &CraftArgs) -> CliResult {
    let ds = load(&a.data, "dataset")?;
    let cfg = craft_config(cli, a, ds.num_classes())?;
    guard_inputs(&a.out.out.join("data").join("locked"), &[&a.data])?;
    let out = craft_key(&ds, &cfg)?;
    let key_dir = dir(&a.out.out, "key")?;
    let bytes = encode_key(&out.key)?;
    let key_path = key_dir.join(KEY_FILE);
    fs::write(&key_path, &bytes).map_err(|e| io_err(&key_path, e))?;
    save_dataset(&out.locked, &dir(&a.out.out, "data")?.join("locked"), a.out.format.into())?;
    let runs = dir(&a.out.out, "runs")?;
    write_text(
        &runs.join(format!("craft-s{}.trace.jsonl", cli.seed)),
        &out.trace.to_jsonl()?,
    )?;
    write_run_config(cli, &a.out.out, "craft")?;
    let rounds = out.trace.rounds.len();
    match out.trace.final_error() {
        Some(e) => println!(
            "{} key after {rounds} rounds: train error {e:.4} (exit at {}), converged={}, early_stopped={}",
            out.key.transform.kind(),
            cfg.exit_error,
            out.trace.converged,
            out.trace.early_stopped
        ),
        None => println!("max_rounds is 0: wrote the initial (identity) key without crafting"),
    }
    if cfg.max_rounds > 0 && !out.trace.converged {
        return Err(Failure::NotConverged {
            rounds,
            target: cfg.exit_error,
            out: a.out.out.display().to_string(),
        });
    }
    Ok(())
}

fn check_mode(force: bool) -> FingerprintCheck {
    if force {
        FingerprintCheck::Warn
    } else {
        FingerprintCheck::Strict
    }
}

pub fn lock(cli: &Cli, a: &LockArgs) -> CliResult {
    let ds = load(&a.data, "dataset")?;
    let mut key = load_key(&a.key)?;
    guard_inputs(&a.out.out.join("data").join("locked"), &[&a.data, &a.key])?;
    if !a.classes.is_empty() {
        let wanted: BTreeSet<usize> = a.classes.iter().copied().collect();
        if let Some(c) = wanted.difference(&key.scope).next() {
            return Err(config_err(format!("class {c} is outside the key scope {:?}", key.scope)));
        }
        key.scope = wanted;
    }
    let locked = apply_lock_with(&ds, &key, check_mode(a.force))?;
    let target = dir(&a.out.out, "data")?.join("locked");
    save_dataset(&locked, &target, a.out.format.into())?;
    write_run_config(cli, &a.out.out, "lock")?;
    println!("locked {} images into {}", ds.len(), target.display());
    Ok(())
}

pub fn unlock(cli: &Cli, a: &UnlockArgs) -> CliResult {
    let ds = load(&a.data, "dataset")?;
    let key = load_key(&a.key)?;
    guard_inputs(&a.out.out.join("data").join("unlocked"), &[&a.data, &a.key])?;
    let opts = UnlockOptions {
        check: check_mode(a.force),
        iters: a.iters,
    };
    let un = apply_unlock_with(&ds, &key, opts)?;
    let target = dir(&a.out.out, "data")?.join("unlocked");
    save_dataset(&un.dataset, &target, a.out.format.into())?;
    write_run_config(cli, &a.out.out, "unlock")?;
    println!(
        "unlocked {} images into {} (max fixed-point residual {:.3e})",
        ds.len(),
        target.display(),
        un.max_residual
    );
    Ok(())
}

fn parse_augment(name: &str) -> CliResult<AugmentPolicy> {
    let short = |p: &AugmentPolicy| match p {
        AugmentPolicy::RandomNoise { .. } => "noise",
        AugmentPolicy::GaussianBlur { .. } => "blur",
        other => other.name(),
    };
    AugmentPolicy::defense_suite(16.0 / 255.0)
        .into_iter()
        .find(|p| short(p) == name || p.name() == name)
        .ok_or_else(|| config_err(format!("unknown augmentation {name:?}")))
}

pub fn train(cli: &Cli, a: &TrainArgs) -> CliResult {
    let ds = load(&a.data, "dataset")?;
    let test = load(&a.test, "test split")?;
    let arch = parse_arch(&a.model.arch)?;
    let augment = parse_augment(&a.augment)?;
    let s = setup(cli, &a.train, a.model.width);
    let state = s.fresh_model(arch, &ds)?;
    let (state, history) = train_classifier(state, &ds, &s.train, &augment, Some(&test))?;
    let runs = dir(&a.out, "runs")?;
    let stem = format!("train-{arch}-s{}", cli.seed);
    let ck = runs.join(format!("{stem}.llck"));
    fs::write(&ck, encode_checkpoint(&state)).map_err(|e| io_err(&ck, e))?;
    let text = serde_json::to_string_pretty(&history).map_err(|e| Failure::Runtime(e.into()))?;
    write_text(&runs.join(format!("{stem}.history.json")), &text)?;
    write_run_config(cli, &a.out, "train")?;
    println!(
        "{arch}: test accuracy {:.4} after {} epochs",
        history.final_test_accuracy().unwrap_or(f32::NAN),
        history.epochs.len()
    );
    Ok(())
}

fn one_key(a: &EvalArgs) -> CliResult<LockKey> {
    match a.key.as_slice() {
        [k] => load_key(k),
        _ => Err(config_err(format!("experiment {} needs exactly one --key", a.experiment))),
    }
}

fn need_test(a: &EvalArgs) -> CliResult<Dataset> {
    let path = a
        .test
        .as_ref()
        .ok_or_else(|| config_err(format!("experiment {} needs --test", a.experiment)))?;
    let mut t = load(path, "test split")?;
    t.split = Split::Test;
    Ok(t)
}

pub fn eval(cli: &Cli, a: &EvalArgs) -> CliResult {
    if !EXPERIMENTS.contains(&a.experiment.as_str()) {
        return Err(config_err(format!(
            "unknown experiment {:?}; valid names: {}",
            a.experiment,
            EXPERIMENTS.join(", ")
        )));
    }
    let clean = load(&a.data, "dataset")?;
    let archs = a.archs.iter().map(|s| parse_arch(s)).collect::<CliResult<Vec<_>>>()?;
    let arch = *archs.first().ok_or_else(|| config_err("no evaluator architecture given"))?;
    let s = setup(cli, &a.train, 8);
    let mut report = EvalReport {
        experiment: a.experiment.clone(),
        seed: cli.seed,
        ..Default::default()
    };
    match a.experiment.as_str() {
        "triple" => {
            let key = one_key(a)?;
            report.triples = eval_triple(&clean, &need_test(a)?, &key, &archs, &s)?;
        }
        "defenses" => {
            let key = one_key(a)?;
            let locked = apply_lock(&clean, &key)?;
            let suite = AugmentPolicy::defense_suite(key.epsilon);
            report.defenses = eval_defenses(&locked, &need_test(a)?, &suite, key.epsilon, arch, &s)?;
        }
        "advtrain" => {
            let key = one_key(a)?;
            let test = need_test(a)?;
            let locked = apply_lock(&clean, &key)?;
            let pgd = PgdConfig::new(a.pgd_steps, a.pgd_epsilon.unwrap_or(key.epsilon));
            let clean_acc = train_and_score(&clean, &test, arch, &s, &AugmentPolicy::None)?.accuracy;
            let standard = train_and_score(&locked, &test, arch, &s, &AugmentPolicy::None)?.accuracy;
            let adversarial = eval_adv_training(&locked, &test, &pgd, arch, &s)?;
            report.adv_training = Some(AdvTrainingRow {
                pgd,
                clean: clean_acc,
                standard,
                adversarial,
            });
        }
        "uniqueness" => {
            if a.key.len() < 2 {
                return Err(config_err("uniqueness needs at least two --key files"));
            }
            let keys = a.key.iter().map(|k| load_key(k)).collect::<CliResult<Vec<_>>>()?;
            let refs: Vec<&LockKey> = keys.iter().collect();
            report.uniqueness = eval_uniqueness(&clean, &need_test(a)?, &refs, arch, &s)?;
        }
        "reconstruction" => {
            let key = one_key(a)?;
            report.reconstruction = Some(eval_reconstruction(&clean, &key, a.samples, cli.seed, None)?);
        }
        "sweep-epsilon" | "sweep-percentage" => {
            if a.values.is_empty() {
                return Err(config_err("sweeps need --values"));
            }
            let param = if a.experiment == "sweep-epsilon" {
                SweepParam::Epsilon
            } else {
                SweepParam::Percentage
            };
            let mut base = CraftConfig::for_transform(parse_transform(&a.transform)?, a.epsilon);
            base.seed = cli.seed;
            let points = sweep(&clean, &need_test(a)?, param, &a.values, &base, arch, &s)?;
            report.sweep = Some(SweepCurve { param, points });
        }
        _ => unreachable!("checked against EXPERIMENTS"),
    }
    report.validate()?;
    let reports = dir(&a.out, "reports")?;
    let stem = format!("{}-s{}", a.experiment, cli.seed);
    write_text(&reports.join(format!("{stem}.json")), &report.to_json()?)?;
    if let Some(curve) = &report.sweep {
        write_sweep_csv(curve, &reports.join(format!("{stem}.csv")))?;
    }
    write_run_config(cli, &a.out, &format!("eval-{}", a.experiment))?;
    println!("{}", summarize(&report));
    Ok(())
}

fn summarize(r: &EvalReport) -> String {
    let mut lines = Vec::new();
    for t in &r.triples {
        lines.push(format!(
            "{}: clean {:.4} locked {:.4} unlocked {:.4}",
            t.arch, t.clean.accuracy, t.locked.accuracy, t.unlocked.accuracy
        ));
    }
    for d in &r.defenses {
        lines.push(format!("{}: {:.4}", d.policy.name(), d.run.accuracy));
    }
    if let Some(a) = &r.adv_training {
        lines.push(format!(
            "clean {:.4} standard {:.4} adversarial {:.4}",
            a.clean, a.standard, a.adversarial.accuracy
        ));
    }
    for c in &r.uniqueness {
        lines.push(format!("lock {} unlock {}: {:.4}", c.lock_key, c.unlock_key, c.accuracy));
    }
    if let Some(s) = &r.reconstruction {
        lines.push(format!(
            "L2 locked {:.4e} ± {:.2e}, unlocked {:.4e} ± {:.2e} over {} images",
            s.locked_mean, s.locked_std, s.unlocked_mean, s.unlocked_std, s.samples
        ));
    }
    if let Some(c) = &r.sweep {
        for p in &c.points {
            lines.push(format!("{:?} {}: {:.4}", c.param, p.value, p.run.accuracy));
        }
    }
    lines.join("\n")
}

pub fn report(cli: &Cli, a: &ReportArgs) -> CliResult {
    let reports = a.out.join("reports");
    require(&reports, "reports directory")?;
    let mut entries: Vec<PathBuf> = fs::read_dir(&reports)
        .map_err(|e| io_err(&reports, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    let mut parsed = Vec::with_capacity(entries.len());
    for p in &entries {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let r = EvalReport::from_json(&text)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        parsed.push((name, r));
    }
    let tables = reports.join("tables");
    write_tables(&parsed, &tables)?;
    write_run_config(cli, &a.out, "report")?;
    println!("merged {} reports into {}", parsed.len(), tables.display());
    Ok(())
}
