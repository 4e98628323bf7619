//! One function per subcommand. Each opens the run directory, checks its
//! upstream artifacts, does its work, and records the result in the manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hypercell_core::data::{load_split, Split};
use hypercell_core::engine::{
    evaluate, random_search_baseline, restore_store, retrain, store_arrays, EpochEval, EvalMetrics, Searcher, Snapshot,
    TrajectoryLog,
};
use hypercell_core::latency::{bench_table, discrete_latency, required_keys, LatencyTable};
use hypercell_core::space::{ChannelPlan, DerivedArchitecture, Network, OpKind};
use hypercell_core::SearchConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::plots::{depth_series, sweep_table, SweepRow};
use crate::run::{config_to_toml, load_config, names, write_atomic, Run, RunManifest, Stage, StageStatus, CONFIG_FILE};

pub const WEIGHTS_KIND: &str = "retrained-weights";
pub const WEIGHTS_VERSION: u32 = 1;

/// Latency-aware architecture search for real-time segmentation.
///
/// Every flag can also be set through an environment variable with the
/// `HYPERCELL_` prefix, e.g. `HYPERCELL_OUT=runs/a`.
#[derive(Debug, Parser)]
#[command(name = "hypercell", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct GlobalArgs {
    /// TOML config; defaults to the run directory's config, then built-in defaults.
    #[arg(long, global = true, env = "HYPERCELL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true, env = "HYPERCELL_SEED")]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, env = "HYPERCELL_OUT", default_value = "runs/default")]
    pub out: PathBuf,
    /// Latency table path, instead of the one in the run directory.
    #[arg(long, global = true, env = "HYPERCELL_TABLE")]
    pub table: Option<PathBuf>,
    /// Overwrite existing artifacts and accept a changed config.
    #[arg(long, global = true, env = "HYPERCELL_FORCE")]
    pub force: bool,
    /// Print the resolved config as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Benchmark every operation shape of the super-network.
    BenchLat {
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// Run (or resume) the architecture search.
    Search,
    /// Derive a discrete architecture from the search checkpoint.
    Derive,
    /// Train the derived architecture from scratch.
    Retrain,
    /// Evaluate retrained weights.
    Eval {
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Architecture file, instead of the run's.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Weights file, instead of the run's.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Retrain uniformly sampled architectures as a baseline.
    RandomSearch {
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Write depth trajectories and a latency/mIoU sweep table as CSV.
    ExportPlots {
        /// Further run directories to include in the sweep table.
        #[arg(long = "sweep")]
        sweep: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub config_hash: String,
    pub arch: DerivedArchitecture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub best_val_miou: f64,
    pub final_val: EvalMetrics,
    pub history: Vec<EpochEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub miou: f64,
    pub ce: Option<f64>,
    pub pixels: usize,
    pub depths: [usize; 3],
    /// Lookup-table latency of the architecture, when a table is known.
    pub latency_us: Option<f64>,
}

pub fn eval_file(split: &str) -> String {
    format!("eval_{split}.json")
}

/// `--config`, else the run directory's config, else defaults; then `--seed`.
pub fn resolve_config(g: &GlobalArgs) -> CliResult<SearchConfig> {
    let stored = g.out.join(CONFIG_FILE);
    let mut config = match &g.config {
        Some(p) => load_config(p)?,
        None if stored.exists() => load_config(&stored)?,
        None => SearchConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    let config = resolve_config(g)?;
    if g.print_config {
        print!("{}", config_to_toml(&config));
        return Ok(());
    }
    let mut run = Run::open(&g.out, config, g.force)?;
    let stage = stage_of(&cli.command);
    let previous = run.manifest.stages.get(&stage).cloned();
    run.set_stage(stage, StageStatus::Running)?;
    let result = match &cli.command {
        Command::BenchLat { reps } => bench_lat(&mut run, g, *reps),
        Command::Search => search(&mut run, g),
        Command::Derive => derive(&mut run, g),
        Command::Retrain => retrain_cmd(&mut run, g),
        Command::Eval { split, arch, weights } => eval(&mut run, g, *split, arch.as_deref(), weights.as_deref()),
        Command::RandomSearch { count } => random(&mut run, g, *count),
        Command::ExportPlots { sweep } => export_plots(&mut run, sweep),
    };
    let status = match (&result, previous) {
        (Ok(()), _) => StageStatus::Complete,
        // A refused overwrite leaves the earlier result standing.
        (Err(CliError::Exists(_)), Some(prev)) => prev,
        (Err(e), _) => StageStatus::Failed { message: e.to_string() },
    };
    run.set_stage(stage, status)?;
    result
}

fn stage_of(c: &Command) -> Stage {
    match c {
        Command::BenchLat { .. } => Stage::BenchLat,
        Command::Search => Stage::Search,
        Command::Derive => Stage::Derive,
        Command::Retrain => Stage::Retrain,
        Command::Eval { .. } => Stage::Eval,
        Command::RandomSearch { .. } => Stage::RandomSearch,
        Command::ExportPlots { .. } => Stage::ExportPlots,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_atomic(path, text.as_bytes())
}

fn relative(run: &Run, path: &Path) -> PathBuf {
    path.strip_prefix(&run.dir)
        .map_or_else(|_| path.to_path_buf(), Path::to_path_buf)
}

fn table_path(run: &Run, g: &GlobalArgs) -> PathBuf {
    match (&g.table, &run.manifest.artifacts.latency_table) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => run.resolve(p),
        (None, None) => run.path(names::TABLE),
    }
}

fn load_table(run: &mut Run, g: &GlobalArgs) -> CliResult<LatencyTable> {
    let path = table_path(run, g);
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            what: "latency table",
            path,
            producer: "bench-lat",
        });
    }
    let table = LatencyTable::load(&path).map_err(|e| CliError::BadTable {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let stored = if g.table.is_some() {
        fs::canonicalize(&path).map_err(CliError::io(&path))?
    } else {
        relative(run, &path)
    };
    run.manifest.artifacts.latency_table = Some(stored);
    Ok(table)
}

/// Errors from building against a table that lacks entries name the table.
fn table_error(path: PathBuf) -> impl FnOnce(hypercell_core::Error) -> CliError {
    move |e| match e {
        hypercell_core::Error::MissingLatency(_) => CliError::BadTable {
            path,
            msg: format!("{e}; rerun bench-lat for this config"),
        },
        other => other.into(),
    }
}

fn bench_lat(run: &mut Run, g: &GlobalArgs, reps: usize) -> CliResult<()> {
    let path = g.table.clone().unwrap_or_else(|| run.path(names::TABLE));
    run.guard(&path, g.force)?;
    let c = &run.config;
    let d = &c.dataset;
    let keys = required_keys(
        &ChannelPlan::from_config(c),
        c.cells,
        &c.cell_ops,
        &c.agg_ops,
        d.height,
        d.width,
    );
    let table = bench_table(&keys, reps, |done, total| {
        if done % 10 == 0 || done == total {
            eprintln!("benchmarked {done}/{total}");
        }
    })?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    write_atomic(&path, table.to_json().as_bytes())?;
    // Reload through the schema check before reporting success.
    LatencyTable::load(&path).map_err(|e| CliError::BadTable {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let mut cell_ops = BTreeSet::new();
    let mut cell_shapes = BTreeSet::new();
    let mut agg_ops = BTreeSet::new();
    let mut agg_shapes = BTreeSet::new();
    for k in &keys {
        let shape = (k.cin, k.cout, k.h, k.w, k.stride);
        match k.op {
            OpKind::Cell(op) => {
                cell_ops.insert(op.name());
                cell_shapes.insert(shape);
            }
            OpKind::Agg(op) => {
                agg_ops.insert(op.name());
                agg_shapes.insert(shape);
            }
        }
    }
    println!(
        "{} entries: {} cell ops x {} shapes, {} aggregation ops x {} shapes -> {}",
        table.len(),
        cell_ops.len(),
        cell_shapes.len(),
        agg_ops.len(),
        agg_shapes.len(),
        path.display()
    );
    run.manifest.artifacts.latency_table = Some(if g.table.is_some() {
        fs::canonicalize(&path).map_err(CliError::io(&path))?
    } else {
        relative(run, &path)
    });
    Ok(())
}

fn resume_checkpoint(run: &Run, path: &Path) -> CliResult<Searcher> {
    let s = Searcher::resume(path).map_err(|e| CliError::BadArtifact {
        what: "search checkpoint",
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    run.check_hash(&s.config().hash(), "the search checkpoint")?;
    Ok(s)
}

fn write_trajectory(run: &Run, log: &TrajectoryLog) -> CliResult<()> {
    write_atomic(&run.path(names::METRICS), log.to_csv().as_bytes())?;
    write_json(&run.path(names::TRAJECTORY), log)
}

fn search(run: &mut Run, g: &GlobalArgs) -> CliResult<()> {
    let table = load_table(run, g)?;
    let ckpt = run.path(names::CHECKPOINT);
    let mut s = if ckpt.exists() && !g.force {
        let s = resume_checkpoint(run, &ckpt)?;
        if s.is_done() {
            return Err(CliError::Exists(ckpt));
        }
        eprintln!("resuming at epoch {}", s.next_epoch());
        s
    } else {
        Searcher::new(&run.config, &table).map_err(table_error(table_path(run, g)))?
    };
    run.manifest.artifacts.checkpoint = Some(names::CHECKPOINT.into());
    run.manifest.artifacts.metrics_csv = Some(names::METRICS.into());
    run.manifest.artifacts.trajectory = Some(names::TRAJECTORY.into());
    run.save()?;
    while !s.is_done() {
        let r = s.run_epoch()?;
        s.save_checkpoint(&ckpt)?;
        write_trajectory(run, s.trajectory())?;
        eprintln!(
            "epoch {:>3}  ce {:.4}  loss {:.4}  latency {:.1}us  depth {:?}",
            r.epoch, r.ce, r.total_loss, r.expected_latency_us, r.depth
        );
    }
    write_trajectory(run, s.trajectory())?;
    let arch = s.derive()?;
    println!("search finished: depths {:?}", arch.depths());
    Ok(())
}

fn derive(run: &mut Run, g: &GlobalArgs) -> CliResult<()> {
    let ckpt = run.path(names::CHECKPOINT);
    if !ckpt.exists() {
        return Err(CliError::MissingArtifact {
            what: "search checkpoint",
            path: ckpt,
            producer: "search",
        });
    }
    let out = run.path(names::ARCHITECTURE);
    run.guard(&out, g.force)?;
    let s = resume_checkpoint(run, &ckpt)?;
    let arch = s.derive()?;
    let d = &run.config.dataset;
    let latency = discrete_latency(&arch, s.table(), d.height, d.width)?;
    write_atomic(&out, arch.to_json().as_bytes())?;
    write_trajectory(run, s.trajectory())?;
    run.manifest.artifacts.architecture = Some(names::ARCHITECTURE.into());
    run.manifest.artifacts.trajectory = Some(names::TRAJECTORY.into());
    run.manifest.artifacts.metrics_csv = Some(names::METRICS.into());
    println!(
        "derived after {} epochs: depths {:?}, latency {latency:.1}us",
        s.next_epoch(),
        arch.depths()
    );
    Ok(())
}

fn load_arch(path: &Path) -> CliResult<DerivedArchitecture> {
    let bad = |msg: String| CliError::BadArchitecture {
        path: path.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let arch = DerivedArchitecture::from_json(&text).map_err(|e| bad(e.to_string()))?;
    arch.validate().map_err(|e| bad(e.to_string()))?;
    Ok(arch)
}

fn run_arch(run: &Run) -> CliResult<PathBuf> {
    let path = run.path(names::ARCHITECTURE);
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            what: "architecture",
            path,
            producer: "derive",
        });
    }
    Ok(path)
}

fn retrain_cmd(run: &mut Run, g: &GlobalArgs) -> CliResult<()> {
    let arch_path = run_arch(run)?;
    let arch = load_arch(&arch_path)?;
    run.check_hash(&arch.provenance.config_hash, "the architecture file")?;
    let out = run.path(names::WEIGHTS);
    run.guard(&out, g.force)?;
    let c = &run.config;
    let result = retrain(&arch, &c.retrain, &c.dataset, c.seed)?;
    for e in &result.history {
        eprintln!(
            "epoch {:>3}  train ce {:.4}  val mIoU {:.4}",
            e.epoch, e.train_ce, e.val_miou
        );
    }
    let snap = Snapshot {
        meta: WeightsMeta {
            config_hash: run.manifest.config_hash.clone(),
            arch,
        },
        arrays: store_arrays(&result.store),
    };
    snap.write(&out, WEIGHTS_KIND, WEIGHTS_VERSION)?;
    let report = RetrainReport {
        best_val_miou: result.best_val_miou,
        final_val: result.final_val,
        history: result.history,
    };
    write_json(&run.path(names::RETRAIN), &report)?;
    run.manifest.artifacts.weights = Some(names::WEIGHTS.into());
    run.manifest.artifacts.retrain_report = Some(names::RETRAIN.into());
    println!(
        "retrained: final val mIoU {:.4}, best {:.4}",
        report.final_val.miou, report.best_val_miou
    );
    Ok(())
}

fn eval(run: &mut Run, g: &GlobalArgs, split: SplitArg, arch: Option<&Path>, weights: Option<&Path>) -> CliResult<()> {
    let arch_path = match arch {
        Some(p) => p.to_path_buf(),
        None => run_arch(run)?,
    };
    let weights_path = weights.map_or_else(|| run.path(names::WEIGHTS), Path::to_path_buf);
    if !weights_path.exists() {
        return Err(CliError::MissingArtifact {
            what: "weights",
            path: weights_path,
            producer: "retrain",
        });
    }
    let out = run.path(&eval_file(split.name()));
    run.guard(&out, g.force)?;
    let arch = load_arch(&arch_path)?;
    let (net, mut store) = Network::derived(&arch, 0).map_err(|e| CliError::BadArchitecture {
        path: arch_path.clone(),
        msg: e.to_string(),
    })?;
    let bad_weights = |msg: String| CliError::BadWeights {
        path: weights_path.clone(),
        msg,
    };
    let snap: Snapshot<WeightsMeta> =
        Snapshot::read(&weights_path, WEIGHTS_KIND, WEIGHTS_VERSION).map_err(|e| bad_weights(e.to_string()))?;
    if snap.meta.arch != arch {
        return Err(bad_weights("trained for a different architecture".into()));
    }
    restore_store(&snap, &mut store).map_err(|e| bad_weights(e.to_string()))?;
    let c = run.config.clone();
    let samples = load_split(&c.dataset, split.split())?;
    let m = evaluate(&net, &store, &samples, c.dataset.num_classes, c.retrain.batch_size)?;
    let tpath = table_path(run, g);
    let latency_us = if tpath.exists() {
        let table = load_table(run, g)?;
        Some(discrete_latency(&arch, &table, c.dataset.height, c.dataset.width).map_err(table_error(tpath))?)
    } else {
        None
    };
    let report = EvalReport {
        split: split.name().into(),
        miou: m.miou,
        ce: m.ce,
        pixels: m.pixels,
        depths: arch.depths(),
        latency_us,
    };
    write_json(&out, &report)?;
    run.manifest
        .artifacts
        .eval
        .insert(split.name().into(), eval_file(split.name()).into());
    match latency_us {
        Some(l) => println!("{} mIoU {:.4}, latency {l:.1}us", split.name(), m.miou),
        None => println!("{} mIoU {:.4}", split.name(), m.miou),
    }
    Ok(())
}

fn random(run: &mut Run, g: &GlobalArgs, count: usize) -> CliResult<()> {
    let table = load_table(run, g)?;
    let out = run.path(names::RANDOM);
    run.guard(&out, g.force)?;
    let c = &run.config;
    let report = random_search_baseline(c, &table, count, c.seed).map_err(table_error(table_path(run, g)))?;
    write_json(&out, &report)?;
    run.manifest.artifacts.random_search = Some(names::RANDOM.into());
    println!(
        "{count} random architectures: mean val mIoU {:.4} (sd {:.4}), best {:.4}",
        report.mean_miou, report.sd_miou, report.samples[report.best].val_miou
    );
    Ok(())
}

/// The sweep-table row of a finished run directory, if it has a validation
/// report with a latency.
fn sweep_row(dir: &Path) -> CliResult<Option<SweepRow>> {
    let manifest = RunManifest::load(&dir.join(crate::run::MANIFEST_FILE))?;
    let config = load_config(&dir.join(CONFIG_FILE))?;
    let path = dir.join(eval_file("val"));
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(|e| CliError::BadArtifact {
        what: "evaluation report",
        path: path.clone(),
        msg: e.to_string(),
    })?;
    Ok(report.latency_us.map(|latency_us| SweepRow {
        run_id: manifest.run_id,
        gamma: config.gamma,
        seed: config.seed,
        latency_us,
        miou: report.miou,
    }))
}

fn export_plots(run: &mut Run, sweep: &[PathBuf]) -> CliResult<()> {
    let path = run.path(names::TRAJECTORY);
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            what: "trajectory",
            path,
            producer: "search",
        });
    }
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let log: TrajectoryLog = serde_json::from_str(&text).map_err(|e| CliError::BadArtifact {
        what: "trajectory",
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let dir = run.path(names::PLOTS);
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let mut written = Vec::new();
    for s in 0..3 {
        let name = format!("depth_hc{}.csv", s + 1);
        write_atomic(&dir.join(&name), depth_series(&log, s).as_bytes())?;
        written.push(Path::new(names::PLOTS).join(name));
    }
    let mut rows = Vec::new();
    for d in std::iter::once(&run.dir).chain(sweep) {
        match sweep_row(d)? {
            Some(row) => rows.push(row),
            None => eprintln!(
                "{}: no validation report with latency, left out of the sweep",
                d.display()
            ),
        }
    }
    write_atomic(&dir.join("sweep.csv"), sweep_table(&rows).as_bytes())?;
    written.push(Path::new(names::PLOTS).join("sweep.csv"));
    println!("wrote {} files under {}", written.len(), dir.display());
    run.manifest.artifacts.plots = written;
    Ok(())
}
