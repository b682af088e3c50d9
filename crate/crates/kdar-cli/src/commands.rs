//! Implementations of the subcommands. Each one resolves its configuration
//! (file values overridden by flags), runs, writes its artifacts and a
//! manifest, and reports errors upward for exit-code mapping.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use kdar::datagen::{
    generate, load_jsonl, prior_histogram, save_jsonl, DatasetBundle, SyntheticSpec,
};
use kdar::eval::evaluate;
use kdar::model::load_checkpoint;
use kdar::train::{save_checkpoint, train_student, train_teacher, LossMode, TrainConfig};
use kdar::util::{read_file, sha256_file, write_file};
use kdar::{Error, Result};

use crate::manifest::ManifestBuilder;
use crate::{
    AblateArgs, EvalArgs, GenDataArgs, SweepArgs, TrainCommonArgs, TrainStudentArgs,
    TrainTeacherArgs,
};

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_config_file<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let body = read_file(p)?;
            serde_json::from_str(&body).map_err(|e| {
                Error::Config(format!("config file {}: {e}", p.display()))
            })
        }
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = parse_config_file(args.config.as_ref())?;
    macro_rules! override_field {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = args.$flag { spec.$field = v; })*
        };
    }
    override_field! {
        n_qtypes => n_qtypes,
        n_answers_per_type => n_answers_per_type,
        skew => skew,
        d_v => d_v,
        d_q => d_q,
        noise_sigma => noise_sigma,
        n_train => n_train,
        n_test => n_test,
        annotator_count_max => annotator_count_max,
        seed => seed,
    }
    if let Some(mode) = args.shift_mode {
        spec.shift_mode = mode.into();
    }
    let bundle = generate(&spec)?;
    ensure_out_dir(&args.out_dir)?;
    let mut manifest = ManifestBuilder::new("gen-data").seeds(&[spec.seed]).config(&spec);
    for (name, ds) in [
        ("train.jsonl", &bundle.train),
        ("test_ood.jsonl", &bundle.test_ood),
        ("test_iid.jsonl", &bundle.test_iid),
    ] {
        let path = args.out_dir.join(name);
        save_jsonl(ds, &path)?;
        manifest = manifest.output(&path);
    }
    manifest.write(&args.out_dir)?;
    println!(
        "wrote {} train / {} ood / {} iid samples to {}",
        bundle.train.samples.len(),
        bundle.test_ood.samples.len(),
        bundle.test_iid.samples.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-teacher / train-student
// ---------------------------------------------------------------------------

pub fn load_bundle(data_dir: &Path) -> Result<DatasetBundle> {
    let train = load_jsonl(&data_dir.join("train.jsonl"))?;
    let test_ood = load_jsonl(&data_dir.join("test_ood.jsonl"))?;
    let test_iid = load_jsonl(&data_dir.join("test_iid.jsonl"))?;
    if train.spec != test_ood.spec || train.spec != test_iid.spec {
        return Err(Error::Config(format!(
            "splits in {} were generated from different specs",
            data_dir.display()
        )));
    }
    Ok(DatasetBundle { spec: train.spec.clone(), train, test_ood, test_iid })
}

fn resolve_train_config(common: &TrainCommonArgs, base: TrainConfig) -> TrainConfig {
    let mut cfg = base;
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = common.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.tau {
        cfg.kdar.tau = v;
    }
    if let Some(v) = common.alpha {
        cfg.kdar.alpha = v;
    }
    if let Some(v) = common.beta {
        cfg.kdar.beta = v;
    }
    cfg
}

pub fn train_teacher_cmd(args: &TrainTeacherArgs) -> Result<()> {
    let mut cfg: TrainConfig = parse_config_file(args.common.config.as_ref())?;
    cfg.loss_mode = LossMode::BceOnly;
    cfg = resolve_train_config(&args.common, cfg);
    if let Some(v) = args.teacher_reweight {
        cfg.teacher_reweight = v;
    }
    let bundle = load_bundle(&args.data_dir)?;
    let (params, history) = train_teacher(&bundle, &cfg)?;
    ensure_out_dir(&args.common.out_dir)?;
    let ckpt = args.common.out_dir.join("teacher.ckpt");
    let hist = args.common.out_dir.join("history.csv");
    save_checkpoint(&params, &ckpt)?;
    history.write_csv(&hist)?;
    ManifestBuilder::new("train-teacher")
        .seeds(&[cfg.seed])
        .config(&cfg)
        .input("data_dir", &args.data_dir)
        .output(&ckpt)
        .output(&hist)
        .write(&args.common.out_dir)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "teacher: train {:.4}  iid {:.4}  ood {:.4}  ({} epochs)",
        last.acc_train, last.acc_iid, last.acc_ood, cfg.epochs
    );
    Ok(())
}

pub fn train_student_cmd(args: &TrainStudentArgs) -> Result<()> {
    let mut cfg: TrainConfig = parse_config_file(args.common.config.as_ref())?;
    if let Some(mode) = args.loss_mode {
        cfg.loss_mode = mode.into();
    }
    cfg = resolve_train_config(&args.common, cfg);
    if cfg.loss_mode.needs_teacher() && args.teacher.is_none() {
        return Err(Error::Config(format!(
            "loss mode {} requires --teacher",
            cfg.loss_mode
        )));
    }
    let bundle = load_bundle(&args.data_dir)?;
    let teacher = match &args.teacher {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let (params, history) = train_student(&bundle, teacher.as_ref(), &cfg)?;
    ensure_out_dir(&args.common.out_dir)?;
    let ckpt = args.common.out_dir.join("student.ckpt");
    let hist = args.common.out_dir.join("history.csv");
    save_checkpoint(&params, &ckpt)?;
    history.write_csv(&hist)?;
    let mut manifest = ManifestBuilder::new("train-student")
        .seeds(&[cfg.seed])
        .config(&cfg)
        .input("data_dir", &args.data_dir);
    if let Some(t) = &args.teacher {
        manifest = manifest.input("teacher", t);
    }
    manifest.output(&ckpt).output(&hist).write(&args.common.out_dir)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "student[{}]: train {:.4}  iid {:.4}  ood {:.4}  ({} epochs)",
        cfg.loss_mode, last.acc_train, last.acc_iid, last.acc_ood, cfg.epochs
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let ds = load_jsonl(&args.data)?;
    let train = load_jsonl(&args.train_data)?;
    if ds.spec.d_v != params.dims.d_v
        || ds.spec.d_q != params.dims.d_q
        || ds.spec.n_classes() != params.dims.n_classes
    {
        return Err(Error::Config(format!(
            "checkpoint dims {} do not match dataset dims (d_v={}, d_q={}, n_classes={})",
            params.dims,
            ds.spec.d_v,
            ds.spec.d_q,
            ds.spec.n_classes()
        )));
    }
    let prior = prior_histogram(&train)?;
    let report = evaluate(&params, &ds, &prior)?;
    ensure_out_dir(&args.out_dir)?;
    let csv_path = args.out_dir.join("metrics.csv");
    write_file(&csv_path, &format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    ManifestBuilder::new("eval")
        .config(&report)
        .input("checkpoint", &args.checkpoint)
        .input("data", &args.data)
        .input("train_data", &args.train_data)
        .output(&csv_path)
        .write(&args.out_dir)?;
    println!("split {} of {}:", ds.split, args.data.display());
    print!("{report}");
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct SweepCell {
    beta: f64,
    tau: f64,
    seed: u64,
}

#[derive(Debug, Clone)]
struct SweepRow {
    cell: SweepCell,
    acc_ood: Option<f64>,
    acc_iid: Option<f64>,
    error: Option<String>,
}

impl SweepRow {
    fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.cell.beta,
            self.cell.tau,
            self.cell.seed,
            fmt(self.acc_ood),
            fmt(self.acc_iid),
            if self.error.is_some() { "failed" } else { "ok" }
        )
    }
}

const SWEEP_COLUMNS: &str = "beta,tau,seed,acc_ood,acc_iid,status";

/// Runs the full beta x tau x seed grid. Completed rows are flushed to
/// `sweep.csv` as they finish, so an interruption loses at most one cell;
/// on completion the file is rewritten in canonical grid order. Returns
/// whether any cell failed.
pub fn sweep_cmd(args: &SweepArgs) -> Result<bool> {
    if args.beta.is_empty() || args.tau.is_empty() || args.seeds.is_empty() {
        return Err(Error::Config("sweep requires non-empty --beta, --tau and --seeds lists".into()));
    }
    let bundle = load_bundle(&args.data_dir)?;
    let teacher = load_checkpoint(&args.teacher)?;
    let mut base_cfg: TrainConfig = parse_config_file(args.config.as_ref())?;
    if let Some(v) = args.epochs {
        base_cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        base_cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        base_cfg.learning_rate = v;
    }
    if let Some(v) = args.alpha {
        base_cfg.kdar.alpha = v;
    }

    let mut cells = Vec::new();
    for &beta in &args.beta {
        for &tau in &args.tau {
            for &seed in &args.seeds {
                cells.push(SweepCell { beta, tau, seed });
            }
        }
    }
    ensure_out_dir(&args.out_dir)?;
    let csv_path = args.out_dir.join("sweep.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    {
        use std::io::Write;
        let mut f = &file;
        writeln!(f, "{SWEEP_COLUMNS}").map_err(|e| Error::io(&csv_path, e))?;
        f.flush().map_err(|e| Error::io(&csv_path, e))?;
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    let writer = Mutex::new(file);
    let workers = args.parallel.max(1).min(cells.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= cells.len() {
                    break;
                }
                let cell = cells[idx].clone();
                let mut cfg = base_cfg.clone();
                cfg.loss_mode = LossMode::Kdar;
                cfg.kdar.beta = cell.beta;
                cfg.kdar.tau = cell.tau;
                cfg.seed = cell.seed;
                let row = match train_student(&bundle, Some(&teacher), &cfg) {
                    Ok((_, history)) => {
                        let last = history.last().expect("at least one epoch");
                        SweepRow {
                            cell,
                            acc_ood: Some(last.acc_ood),
                            acc_iid: Some(last.acc_iid),
                            error: None,
                        }
                    }
                    Err(e) => SweepRow {
                        cell,
                        acc_ood: None,
                        acc_iid: None,
                        error: Some(e.to_string()),
                    },
                };
                {
                    use std::io::Write;
                    let mut f = writer.lock().expect("writer lock");
                    let _ = writeln!(f, "{}", row.to_csv());
                    let _ = f.flush();
                }
                results.lock().expect("results lock")[idx] = Some(row);
            });
        }
    });

    // Canonical rewrite: grid order independent of completion order.
    let rows = results.into_inner().expect("results lock");
    let mut body = String::from(SWEEP_COLUMNS);
    body.push('\n');
    let mut any_failed = false;
    for row in rows.iter().flatten() {
        if let Some(e) = &row.error {
            any_failed = true;
            eprintln!(
                "sweep cell (beta={}, tau={}, seed={}) failed: {e}",
                row.cell.beta, row.cell.tau, row.cell.seed
            );
        }
        body.push_str(&row.to_csv());
        body.push('\n');
    }
    write_file(&csv_path, &body)?;
    ManifestBuilder::new("sweep")
        .seeds(&args.seeds)
        .config(&serde_json::json!({
            "beta": args.beta,
            "tau": args.tau,
            "seeds": args.seeds,
            "parallel": args.parallel,
            "train": base_cfg,
        }))
        .input("data_dir", &args.data_dir)
        .input("teacher", &args.teacher)
        .output(&csv_path)
        .write(&args.out_dir)?;
    println!("sweep complete: {} cells -> {}", cells.len(), csv_path.display());
    Ok(any_failed)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

const ABLATION_MODES: [LossMode; 4] =
    [LossMode::BceOnly, LossMode::AptOnly, LossMode::KdOnly, LossMode::Kdar];

/// Runs the four loss-mode rows over the seed list. For each seed a teacher
/// is trained (or the fixed datasets are reused when --data-dir is given),
/// checkpointed, and byte-hash-verified after every student run.
pub fn ablate_cmd(args: &AblateArgs) -> Result<()> {
    if args.seeds.is_empty() {
        return Err(Error::Config("ablate requires a non-empty --seeds list".into()));
    }
    let base_cfg: TrainConfig = parse_config_file(args.common.config.as_ref())?;
    let base_cfg = resolve_train_config(&args.common, base_cfg);
    ensure_out_dir(&args.common.out_dir)?;
    let teacher_dir = args.common.out_dir.join("teachers");
    ensure_out_dir(&teacher_dir)?;

    let fixed_bundle = match &args.data_dir {
        Some(dir) => Some(load_bundle(dir)?),
        None => None,
    };

    let mut per_mode: BTreeMap<&'static str, Vec<(f64, f64)>> = BTreeMap::new();
    for &seed in &args.seeds {
        let bundle = match &fixed_bundle {
            Some(b) => b.clone(),
            None => generate(&SyntheticSpec { seed, ..SyntheticSpec::default() })?,
        };
        let teacher_cfg = TrainConfig {
            loss_mode: LossMode::BceOnly,
            seed,
            teacher_reweight: true,
            ..base_cfg.clone()
        };
        let (teacher, _) = train_teacher(&bundle, &teacher_cfg)?;
        let ckpt = teacher_dir.join(format!("teacher_seed{seed}.ckpt"));
        save_checkpoint(&teacher, &ckpt)?;
        let hash_before = sha256_file(&ckpt)?;

        for mode in ABLATION_MODES {
            let cfg = TrainConfig { loss_mode: mode, seed, ..base_cfg.clone() };
            let teacher_ref = if mode.needs_teacher() { Some(&teacher) } else { None };
            let (_, history) = train_student(&bundle, teacher_ref, &cfg)?;
            let last = history.last().expect("at least one epoch");
            per_mode.entry(mode.as_str()).or_default().push((last.acc_ood, last.acc_iid));
            let hash_after = sha256_file(&ckpt)?;
            if hash_after != hash_before {
                return Err(Error::Integrity(format!(
                    "teacher checkpoint {} changed during a student run",
                    ckpt.display()
                )));
            }
        }
        println!("seed {seed} done (teacher checkpoint hash stable)");
    }

    let mean = |vals: &[(f64, f64)], pick: fn(&(f64, f64)) -> f64| {
        vals.iter().map(pick).sum::<f64>() / vals.len() as f64
    };
    let mut body = String::from("mode,n_seeds,acc_ood_mean,acc_iid_mean\n");
    for mode in ABLATION_MODES {
        let vals = &per_mode[mode.as_str()];
        body.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            mode.as_str(),
            vals.len(),
            mean(vals, |v| v.0),
            mean(vals, |v| v.1)
        ));
    }
    let csv_path = args.common.out_dir.join("ablation.csv");
    write_file(&csv_path, &body)?;
    let mut manifest = ManifestBuilder::new("ablate")
        .seeds(&args.seeds)
        .config(&base_cfg)
        .output(&csv_path);
    if let Some(dir) = &args.data_dir {
        manifest = manifest.input("data_dir", dir);
    }
    manifest.write(&args.common.out_dir)?;
    println!("{body}");
    Ok(())
}

