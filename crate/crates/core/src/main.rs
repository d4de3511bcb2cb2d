use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use cflab::autodiff::Precision;
use cflab::checks::{format_table, run_checks, Scope};
use cflab::config::{ConfigFile, Settings};
use cflab::eval::{evaluate_causal, evaluate_tracking, ComparisonRow};
use cflab::models::{DetectorPair, RegressionCNN};
use cflab::scenes::{
    generate, load_dataset, save_dataset, write_manifest, Dataset, DatasetKind, Split,
};
use cflab::trainer::{
    ablate, ablation_label, output_std, term_count, thread_budget, train, Model, TrainError,
    TrainMode, TruthGuard,
};

/// Label-free constraint supervision lab.
#[derive(Parser)]
#[command(name = "cflab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train with sufficiency terms removed and compare.
    Ablate(AblateArgs),
    /// Finite-difference checks of ops, losses and composed models.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Sectioned `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// freefall|walk|causal; defaults to the config's `experiment`.
    #[arg(long)]
    experiment: Option<DatasetKind>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Skip the start-up gradient check.
    #[arg(long)]
    no_gradcheck: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Supervised checkpoint reported as a comparison row.
    #[arg(long)]
    supervised: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Terms to drop together, e.g. `--drop 1 --drop 1,2`. Defaults to
    /// every single term, plus all terms together for walking.
    #[arg(long, value_delimiter = ';')]
    drop: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ops|losses|models|all
    #[arg(long, default_value = "all")]
    scope: Scope,
    #[arg(long, default_value = "double")]
    precision: Precision,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn numerical(message: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            Failure::numerical(e)
        } else {
            Failure::usage(e)
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    match path {
        Some(p) => ConfigFile::load(p).map_err(Failure::usage),
        None => Ok(ConfigFile::default()),
    }
}

fn settings_for(common: &Common, kind: DatasetKind) -> Result<(ConfigFile, Settings), Failure> {
    let file = load_config(common.config.as_deref())?;
    let mut s = file.settings(kind).map_err(Failure::usage)?;
    if let Some(seed) = common.seed {
        s.gen.seed = seed;
        s.train.seed = seed;
    }
    Ok((file, s))
}

fn prepare_out(dir: &Path) -> Outcome {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".cflab-write-test");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| Failure::usage(format!("{} is not writable: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let mut f = fs::File::open(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    load_dataset(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Provenance of one command: inputs, resolved settings and every file
/// written.
struct RunManifest {
    command: String,
    entries: Vec<(String, String)>,
    artifacts: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &str, config: Option<&Path>) -> Self {
        let mut m = Self {
            command: command.to_string(),
            entries: Vec::new(),
            artifacts: Vec::new(),
        };
        m.set("tool_version", env!("CARGO_PKG_VERSION"));
        m.set(
            "config_path",
            &config.map_or("(defaults)".to_string(), |p| p.display().to_string()),
        );
        m
    }

    fn set(&mut self, key: &str, value: &str) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn artifact(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    fn render(&self) -> String {
        let mut s = format!("command = {}\n", self.command);
        for (k, v) in &self.entries {
            for (i, line) in v.lines().enumerate() {
                if i == 0 && !v.contains('\n') {
                    let _ = writeln!(s, "{k} = {line}");
                } else {
                    let _ = writeln!(s, "{k}.{line}");
                }
            }
        }
        for a in &self.artifacts {
            let _ = writeln!(s, "artifact = {}", a.display());
        }
        s
    }

    fn save(&mut self, dir: &Path) -> Outcome {
        let path = dir.join("manifest.txt");
        if !self.artifacts.contains(&path) {
            self.artifacts.push(path.clone());
        }
        write(&path, &self.render())
    }
}

fn generated_summary(data: &Dataset, split: &Split) -> String {
    match data {
        Dataset::FreeFall(t) | Dataset::Walk(t) => {
            let lo = t.iter().map(|x| x.len()).min().unwrap_or(0);
            let hi = t.iter().map(|x| x.len()).max().unwrap_or(0);
            let per = if lo == hi {
                format!("{lo}")
            } else {
                format!("{lo}-{hi}")
            };
            let mut s = format!(
                "{} trajectories, {} frames ({per}/trajectory)",
                t.len(),
                data.image_count()
            );
            if let Dataset::Walk(_) = data {
                let mut scenes: Vec<u32> = t.iter().map(|x| x.meta.scene).collect();
                scenes.sort_unstable();
                scenes.dedup();
                let _ = write!(s, ", {} scenes", scenes.len());
            } else {
                let _ = write!(s, "; train {}, test {}", split.train.len(), split.test.len());
            }
            s
        }
        Dataset::Causal(c) => format!(
            "{} scenes; train {}, test {}",
            c.len(),
            split.train.len(),
            split.test.len()
        ),
    }
}

fn cmd_generate(a: GenerateArgs) -> Outcome {
    let file = load_config(a.common.config.as_deref())?;
    let kind = a.experiment.or(file.experiment()).ok_or_else(|| {
        Failure::usage("no experiment given: pass --experiment or set `experiment` in the config")
    })?;
    let (_, s) = settings_for(&a.common, kind)?;
    prepare_out(&a.common.out)?;
    let data = generate(kind, &s.gen).map_err(Failure::usage)?;
    let path = a.common.out.join(format!("{}.cfds", kind.name()));
    save_dataset(&data, &path).map_err(Failure::usage)?;
    let split = Split::for_dataset(kind, data.len(), s.gen.holdout);
    write_manifest(&path, &data, &s.gen, &split).map_err(Failure::usage)?;
    let mut m = RunManifest::new("generate", a.common.config.as_deref());
    m.set("experiment", kind.name());
    m.set("seed", &s.gen.seed.to_string());
    m.set("dataset_sha256", &sha256_file(&path)?);
    m.artifact(path.clone());
    let mut sidecar = path.clone().into_os_string();
    sidecar.push(".manifest.txt");
    m.artifact(PathBuf::from(sidecar));
    m.save(&a.common.out)?;
    println!("{}", generated_summary(&data, &split));
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let data_hash = sha256_file(&a.data)?;
    let data = load_data(&a.data)?;
    let file = load_config(a.common.config.as_deref())?;
    let kind = data.kind();
    if let Some(expected) = file.experiment().filter(|&e| e != kind) {
        return Err(Failure::usage(format!(
            "config is for {expected} but the dataset is {kind}"
        )));
    }
    let (_, mut s) = settings_for(&a.common, kind)?;
    if let Some(m) = a.mode {
        s.train.mode = m;
    }
    if let Some(n) = a.iterations {
        s.train.iterations = n;
    }
    if let Some(p) = a.precision {
        s.train.precision = p;
    }
    if a.no_gradcheck {
        s.train.gradcheck = false;
    }
    prepare_out(&a.common.out)?;
    let mut m = RunManifest::new("train", a.common.config.as_deref());
    m.set("dataset", &a.data.display().to_string());
    m.set("dataset_sha256", &data_hash);
    m.set("seed", &s.train.seed.to_string());
    m.set("architecture", &s.arch.to_string());
    m.set("config", &s.train.snapshot());
    m.set("status", "running");
    m.save(&a.common.out)?;

    let mut model = match kind {
        DatasetKind::Causal => DetectorPair::new(s.arch.clone(), s.train.seed).map(Model::Pair),
        _ => RegressionCNN::new(s.arch.clone(), s.train.seed).map(Model::Regression),
    }
    .map_err(Failure::usage)?;
    let guard = TruthGuard::new(&data);
    let result = train(&s.train, &guard, &mut model);
    let record = match result {
        Ok(r) => r,
        Err(e) => {
            m.entries.retain(|(k, _)| k != "status");
            m.set("status", &format!("failed: {e}"));
            m.save(&a.common.out)?;
            return Err(e.into());
        }
    };
    let ckpt = a.common.out.join("checkpoint.cfpm");
    model.save(&ckpt).map_err(Failure::usage)?;
    let loss = a.common.out.join("loss.csv");
    write(&loss, &record.loss_csv())?;
    let metrics = a.common.out.join("metrics.csv");
    write(&metrics, &record.metrics_csv())?;
    let timing = a.common.out.join("timing.csv");
    let mut t = String::from("iteration,seconds\n");
    for (i, sec) in record.seconds.iter().enumerate() {
        let _ = writeln!(t, "{i},{sec}");
    }
    write(&timing, &t)?;
    m.entries.retain(|(k, _)| k != "status");
    m.set("status", "complete");
    m.set("truth_reads", &record.truth_reads.to_string());
    if let Some(e) = record.gradcheck_error {
        m.set("startup_gradcheck_max_rel_error", &format!("{e:e}"));
    }
    m.set("seconds_per_iteration", &format!("{:.4}", record.mean_seconds()));
    for p in [ckpt, loss, metrics, timing] {
        m.artifact(p);
    }
    m.save(&a.common.out)?;
    let losses = record.losses();
    println!(
        "{} {} training: {} iterations, loss {:.6} -> {:.6}, truth reads {}",
        kind,
        s.train.mode.name(),
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        record.truth_reads
    );
    Ok(())
}

fn load_model(path: &Path, kind: DatasetKind) -> Result<Model, Failure> {
    let err = |e: cflab::models::ModelError| {
        Failure::usage(format!(
            "{} does not hold a {} model: {e}",
            path.display(),
            kind
        ))
    };
    match kind {
        DatasetKind::Causal => DetectorPair::load(path).map(Model::Pair).map_err(err),
        _ => RegressionCNN::load(path).map(Model::Regression).map_err(err),
    }
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let data = load_data(&a.data)?;
    let kind = data.kind();
    let (_, s) = settings_for(&a.common, kind)?;
    let model = load_model(&a.checkpoint, kind)?;
    let supervised = a
        .supervised
        .as_deref()
        .map(|p| load_model(p, kind))
        .transpose()?;
    prepare_out(&a.common.out)?;
    let holdout = s.gen.holdout;
    let seed = s.train.seed;
    let (csv, text) = match (&model, &supervised) {
        (Model::Regression(m), sup) => {
            let mut r = evaluate_tracking(m, &data, holdout, seed).map_err(Failure::usage)?;
            r.comparisons.insert(
                0,
                ComparisonRow {
                    label: "constraint".into(),
                    value: r.aggregate,
                    paper: false,
                },
            );
            if let Some(Model::Regression(sm)) = sup {
                let sr = evaluate_tracking(sm, &data, holdout, seed).map_err(Failure::usage)?;
                r.comparisons.insert(
                    1,
                    ComparisonRow {
                        label: "supervised".into(),
                        value: sr.aggregate,
                        paper: false,
                    },
                );
            }
            (r.to_csv(), r.to_text())
        }
        (Model::Pair(p), sup) => {
            let mut r = evaluate_causal(p, &data, holdout).map_err(Failure::usage)?;
            if let Some(Model::Pair(sp)) = sup {
                let sr = evaluate_causal(sp, &data, holdout).map_err(Failure::usage)?;
                r.comparisons.push(ComparisonRow {
                    label: "supervised joint accuracy".into(),
                    value: sr.joint_accuracy,
                    paper: false,
                });
            }
            (r.to_csv(), r.to_text())
        }
    };
    let csv_path = a.common.out.join("report.csv");
    let text_path = a.common.out.join("report.txt");
    write(&csv_path, &csv)?;
    write(&text_path, &text)?;
    let mut m = RunManifest::new("eval", a.common.config.as_deref());
    m.set("dataset", &a.data.display().to_string());
    m.set("dataset_sha256", &sha256_file(&a.data)?);
    m.set("checkpoint", &a.checkpoint.display().to_string());
    m.set("seed", &seed.to_string());
    m.artifact(csv_path);
    m.artifact(text_path);
    m.save(&a.common.out)?;
    print!("{text}");
    Ok(())
}

fn parse_drops(raw: &[String], kind: DatasetKind) -> Result<Vec<Vec<usize>>, Failure> {
    if raw.is_empty() {
        let n = term_count(kind);
        let mut d: Vec<Vec<usize>> = (1..=n).map(|t| vec![t]).collect();
        if kind == DatasetKind::Walk {
            d.push((1..=n).collect());
        }
        return Ok(d);
    }
    raw.iter()
        .map(|set| {
            set.split(',')
                .map(|t| {
                    let t = t.trim().trim_start_matches('h');
                    t.parse::<usize>()
                        .map_err(|_| Failure::usage(format!("bad term '{t}' in --drop {set}")))
                })
                .collect()
        })
        .collect()
}

fn cmd_ablate(a: AblateArgs) -> Outcome {
    let data = load_data(&a.data)?;
    let kind = data.kind();
    if kind == DatasetKind::FreeFall {
        return Err(Failure::usage("free fall has no sufficiency terms to ablate"));
    }
    let (_, mut s) = settings_for(&a.common, kind)?;
    if let Some(n) = a.iterations {
        s.train.iterations = n;
    }
    s.train.mode = TrainMode::Constraint;
    let drops = parse_drops(&a.drop, kind)?;
    prepare_out(&a.common.out)?;
    let initial = match kind {
        DatasetKind::Causal => DetectorPair::new(s.arch.clone(), s.train.seed).map(Model::Pair),
        _ => RegressionCNN::new(s.arch.clone(), s.train.seed).map(Model::Regression),
    }
    .map_err(Failure::usage)?;
    let mut m = RunManifest::new("ablate", a.common.config.as_deref());
    m.set("dataset", &a.data.display().to_string());
    m.set("dataset_sha256", &sha256_file(&a.data)?);
    m.set("seed", &s.train.seed.to_string());
    m.set("config", &s.train.snapshot());
    let runs = ablate(&s.train, &data, &initial, &drops, thread_budget())?;
    let holdout = s.gen.holdout;
    let mut table = match kind {
        DatasetKind::Walk => String::from(
            "ablation,gamma1,gamma2,final_loss,output_std,affine_fit_correlation,mean_trajectory_correlation,truth_reads\n",
        ),
        _ => String::from(
            "ablation,gamma1,gamma2,gamma3,final_loss,output_std_peach,output_std_mario,peach_accuracy,mario_accuracy,violation_rate,truth_reads\n",
        ),
    };
    for run in &runs {
        let w = &run.record.config.weights;
        let last = run.record.losses().last().copied().unwrap_or(f64::NAN);
        let std = output_std(&run.model, &data, holdout)?;
        match &run.model {
            Model::Regression(model) => {
                let r = evaluate_tracking(model, &data, holdout, s.train.seed)
                    .map_err(Failure::usage)?;
                let _ = writeln!(
                    table,
                    "{},{},{},{last},{},{},{},{}",
                    run.label,
                    w.gamma1,
                    w.gamma2,
                    std[0],
                    r.aggregate,
                    r.mean_trajectory_correlation(),
                    run.record.truth_reads
                );
            }
            Model::Pair(pair) => {
                let r = evaluate_causal(pair, &data, holdout).map_err(Failure::usage)?;
                let _ = writeln!(
                    table,
                    "{},{},{},{},{last},{},{},{},{},{},{}",
                    run.label,
                    w.gamma1,
                    w.gamma2,
                    w.gamma3,
                    std[0],
                    std[1],
                    r.accuracy[0],
                    r.accuracy[1],
                    r.violation_rate,
                    run.record.truth_reads
                );
            }
        }
        let dir = a.common.out.join(ablation_label(&run.dropped));
        prepare_out(&dir)?;
        let loss = dir.join("loss.csv");
        write(&loss, &run.record.loss_csv())?;
        m.artifact(loss);
    }
    let table_path = a.common.out.join("ablation.csv");
    write(&table_path, &table)?;
    m.artifact(table_path);
    m.save(&a.common.out)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    let outcomes = run_checks(a.scope, a.precision).map_err(Failure::numerical)?;
    print!("{}", format_table(&outcomes, a.precision));
    if a.precision == Precision::Single {
        println!("single precision: tolerance relaxed to 1e-2 for f32 rounding");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure::numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
