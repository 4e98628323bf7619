//! End-to-end runs of the `hypercell` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hypercell_cli::commands::EvalReport;
use hypercell_cli::run::{parse_config, Stage, StageStatus, CONFIG_FILE, LOCK_FILE, MANIFEST_FILE};
use hypercell_cli::RunManifest;
use hypercell_core::engine::Searcher;
use hypercell_core::space::DerivedArchitecture;
use hypercell_core::SearchConfig;

const TINY: &str = r#"
cells = [2, 3, 2]
stem_channels = 4
channel_multiplier = 2
epochs = 3
warmup_epochs = 1
batch_size = 4
gamma = 0.1

[arch_optim]
lr = 0.05

[dataset]
height = 32
width = 32
train_count = 8
val_count = 4
test_count = 4

[retrain]
epochs = 1
batch_size = 4
"#;

struct Fixture {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let out = tmp.path().join("run");
        Self { _tmp: tmp, config, out }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hypercell"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .env_remove("HYPERCELL_SEED")
            .env_remove("HYPERCELL_FORCE")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn manifest(&self) -> RunManifest {
        RunManifest::load(&self.out.join(MANIFEST_FILE)).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn print_config_emits_the_resolved_toml() {
    let f = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_hypercell"))
        .args(["search", "--print-config", "--out"])
        .arg(&f.out)
        .env("HYPERCELL_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    let config = parse_config(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(
        config,
        SearchConfig {
            seed: 42,
            ..SearchConfig::default()
        }
    );
    assert!(!f.out.exists(), "printing the config touches nothing");
}

#[test]
fn full_pipeline_produces_consistent_artifacts() {
    let f = Fixture::new();
    let summary = f.ok(&["bench-lat"]);
    assert!(summary.contains("10 cell ops"), "{summary}");
    assert!(summary.contains("5 aggregation ops"), "{summary}");
    assert_eq!(code(&f.cmd(&["bench-lat"])), 6, "refuses to overwrite");

    f.ok(&["search"]);
    assert_eq!(code(&f.cmd(&["search"])), 6, "finished search is not rerun");
    f.ok(&["derive"]);
    f.ok(&["retrain"]);
    let line = f.ok(&["eval"]);
    assert!(line.contains("latency"), "{line}");
    f.ok(&["export-plots"]);

    let m = f.manifest();
    for stage in [
        Stage::BenchLat,
        Stage::Search,
        Stage::Derive,
        Stage::Retrain,
        Stage::Eval,
        Stage::ExportPlots,
    ] {
        assert_eq!(m.stages.get(&stage), Some(&StageStatus::Complete), "{stage:?}");
    }
    let a = &m.artifacts;
    let mut paths = vec![
        a.latency_table.clone().unwrap(),
        a.checkpoint.clone().unwrap(),
        a.metrics_csv.clone().unwrap(),
        a.trajectory.clone().unwrap(),
        a.architecture.clone().unwrap(),
        a.weights.clone().unwrap(),
        a.retrain_report.clone().unwrap(),
        a.eval["val"].clone(),
    ];
    paths.extend(a.plots.iter().cloned());
    for p in paths {
        assert!(f.out.join(&p).exists(), "{} missing", p.display());
    }
    let stored = fs::read_to_string(f.out.join(CONFIG_FILE)).unwrap();
    assert_eq!(parse_config(&stored).unwrap().hash(), m.config_hash);
    assert!(!f.out.join(LOCK_FILE).exists());

    let config = parse_config(TINY).unwrap();
    let arch = DerivedArchitecture::load(&f.out.join("architecture.json")).unwrap();
    let metrics = fs::read_to_string(f.out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), config.epochs + 1);
    for s in 0..3 {
        let rows = read_csv(&f.out.join(format!("plots/depth_hc{}.csv", s + 1)));
        assert_eq!(rows.len(), config.epochs);
        for r in &rows {
            let expected: f64 = r[2].parse().unwrap();
            assert!(expected >= 1.0 && expected <= config.cells[s] as f64, "{expected}");
        }
        let last: usize = rows.last().unwrap()[1].parse().unwrap();
        assert_eq!(last, arch.depths()[s]);
    }
    let sweep = read_csv(&f.out.join("plots/sweep.csv"));
    assert_eq!(sweep.len(), 1);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(f.out.join("eval_val.json")).unwrap()).unwrap();
    assert_eq!(sweep[0][2].parse::<f64>().unwrap(), report.latency_us.unwrap());
    assert_eq!(report.depths, arch.depths());
}

#[test]
fn missing_upstream_artifacts_are_named() {
    let f = Fixture::new();
    let out = f.cmd(&["search"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("latency table"));
    assert_eq!(code(&f.cmd(&["derive"])), 4);
    assert_eq!(code(&f.cmd(&["retrain"])), 4);
    assert_eq!(code(&f.cmd(&["export-plots"])), 4);
    let failed = f.manifest();
    assert!(matches!(
        failed.stages.get(&Stage::ExportPlots),
        Some(StageStatus::Failed { .. })
    ));
}

#[test]
fn eval_tells_bad_weights_from_bad_architecture() {
    let f = Fixture::new();
    f.ok(&["bench-lat"]);
    f.ok(&["search"]);
    f.ok(&["derive"]);
    f.ok(&["retrain"]);
    let junk = f.out.join("junk");
    fs::write(&junk, b"{ not json").unwrap();
    let junk = junk.to_str().unwrap();
    assert_eq!(code(&f.cmd(&["eval", "--weights", junk])), 10);
    assert_eq!(code(&f.cmd(&["eval", "--arch", junk])), 9);

    // A valid architecture that the weights were not trained for.
    let config = parse_config(TINY).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let other = loop {
        let a = hypercell_core::space::random_architecture(&config, &mut rng, 0).unwrap();
        if a != DerivedArchitecture::load(&f.out.join("architecture.json")).unwrap() {
            break a;
        }
    };
    let other_path = f.out.join("other.json");
    other.save(&other_path).unwrap();
    assert_eq!(code(&f.cmd(&["eval", "--arch", other_path.to_str().unwrap()])), 10);
    f.ok(&["eval", "--split", "test"]);
}

#[test]
fn stages_refuse_a_changed_config() {
    let f = Fixture::new();
    f.ok(&["bench-lat"]);
    let out = f.cmd(&["search", "--seed", "5"]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    f.ok(&["search", "--seed", "5", "--force"]);
    assert_eq!(f.manifest().seed, 5);
}

#[test]
fn locked_run_directory_is_refused() {
    let f = Fixture::new();
    fs::create_dir_all(&f.out).unwrap();
    fs::write(f.out.join(LOCK_FILE), "1").unwrap();
    assert_eq!(code(&f.cmd(&["bench-lat"])), 7);
}

#[test]
fn invalid_config_has_its_own_exit_code() {
    let f = Fixture::new();
    fs::write(&f.config, "epochs = 0\n").unwrap();
    assert_eq!(code(&f.cmd(&["search"])), 3);
    fs::write(&f.config, "colour = 1\n").unwrap();
    assert_eq!(code(&f.cmd(&["search"])), 3);
}

#[test]
fn derive_on_a_warmup_only_checkpoint_keeps_one_cell_per_stage() {
    let f = Fixture::new();
    f.ok(&["bench-lat"]);
    let mut config = parse_config(TINY).unwrap();
    // Same file for the CLI and the checkpoint, so the hashes agree.
    config.epochs = 4;
    config.warmup_epochs = 3;
    let text = hypercell_cli::run::config_to_toml(&config);
    fs::write(&f.config, &text).unwrap();
    let f2 = Fixture {
        out: f.out.with_file_name("run2"),
        config: f.config.clone(),
        _tmp: tempfile::tempdir().unwrap(),
    };
    let table_path = f.out.join("latency_table.json");
    let table = hypercell_core::latency::LatencyTable::load(&table_path).unwrap();
    assert_eq!(code(&f2.cmd(&["derive"])), 4);
    let mut s = Searcher::new(&config, &table).unwrap();
    s.run_epoch().unwrap();
    s.run_epoch().unwrap();
    s.save_checkpoint(&f2.out.join("search.ckpt")).unwrap();
    let line = f2.ok(&["derive"]);
    assert!(line.contains("after 2 epochs"), "{line}");
    let arch = DerivedArchitecture::load(&f2.out.join("architecture.json")).unwrap();
    assert_eq!(arch.depths(), [1, 1, 1]);
}
