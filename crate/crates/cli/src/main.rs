use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qbsde_cli::catalog::{find, list_experiments};
use qbsde_cli::config::{ExperimentConfig, Overrides};
use qbsde_cli::runner::{run, RunManifest};
use qbsde_cli::CliError;

#[derive(Parser)]
#[command(name = "qbsde", version, about = "Run quadratic BSDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config file or a built-in experiment id.
    Run {
        target: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Rayon worker threads; defaults to the number of cores.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List built-in experiments.
    List,
    /// Print a built-in experiment's config.
    Describe { id: String },
    /// Summarise a finished run directory.
    Report { dir: PathBuf },
}

fn load_target(target: &str) -> Result<(ExperimentConfig, String), CliError> {
    let p = Path::new(target);
    if p.is_file() {
        let cfg = ExperimentConfig::load(p)?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        Ok((cfg, stem))
    } else {
        Ok((find(target)?.config(), target.to_string()))
    }
}

fn print_manifest(m: &RunManifest) {
    println!("config_hash {}", m.config_hash);
    for s in &m.stages {
        println!("stage {:<12} {:>9.3} s", s.name, s.seconds);
    }
    for (k, v) in &m.metrics {
        println!("metric {k} = {v}");
    }
    for o in &m.outputs {
        println!("output {} {} bytes {}", o.file, o.bytes, &o.sha256[..16]);
    }
    for c in &m.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(f) = &m.failure {
        println!("aborted in `{}`: {}", f.stage, f.message);
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::List => {
            for e in list_experiments() {
                println!("{:<30} [{:>2}] {}", e.id, e.criterion, e.description);
            }
            Ok(())
        }
        Command::Describe { id } => {
            let e = find(&id)?;
            println!("# {} (criterion {})\n# {}\n", e.id, e.criterion, e.description);
            print!("{}", e.toml);
            Ok(())
        }
        Command::Report { dir } => {
            let m = RunManifest::load(&dir)?;
            print_manifest(&m);
            let failed = m.checks.iter().filter(|c| !c.passed).count();
            match (&m.failure, failed) {
                (Some(f), _) => Err(CliError::Stage { stage: f.stage.clone(), message: f.message.clone() }),
                (None, 0) => Ok(()),
                (None, n) => Err(CliError::Check(n)),
            }
        }
        Command::Run { target, seed, paths, steps, workers, out } => {
            if let Some(w) = workers {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build_global()
                    .map_err(|e| CliError::Validation(format!("--workers: {e}")))?;
            }
            let (mut cfg, stem) = load_target(&target)?;
            cfg.apply(&Overrides { seed, paths, steps, out: out.clone() })?;
            let dir = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(stem));
            let (manifest, result) = run(&cfg, &dir);
            print_manifest(&manifest);
            result?;
            let failed = manifest.checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(CliError::Check(failed));
            }
            println!("wrote {}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    const SMALL: &str = r#"
[generator]
id = "pure_quadratic(1)"
[terminal]
id = "sin"
[grid]
steps = 10
[ensemble]
paths = 4000
seed = 5
[diagnostics]
requested = ["oracle_check", "moments"]
[checks]
oracle_gap_max = 0.05
"#;

    fn exec(args: &[&str]) -> i32 {
        let argv = std::iter::once("qbsde").chain(args.iter().copied());
        match execute(Cli::parse_from(argv)) {
            Ok(()) => 0,
            Err(e) => e.exit_code(),
        }
    }

    fn manifest(dir: &Path) -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
    }

    fn files(m: &serde_json::Value) -> Vec<String> {
        m["outputs"].as_array().unwrap().iter().map(|o| o["file"].as_str().unwrap().to_string()).collect()
    }

    fn setup(text: &str) -> (tempfile::TempDir, String) {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("cfg.toml");
        fs::write(&p, text).unwrap();
        let s = p.to_string_lossy().into_owned();
        (tmp, s)
    }

    #[test]
    fn list_and_describe() {
        assert_eq!(exec(&["list"]), 0);
        assert_eq!(exec(&["describe", "thm-5-2-gn-ladder"]), 0);
        assert_eq!(exec(&["describe", "nope"]), 2);
        assert!(Cli::try_parse_from(["qbsde", "run"]).is_err());
    }

    #[test]
    fn run_writes_manifest_and_report_reads_it() {
        let (tmp, cfg) = setup(SMALL);
        let out = tmp.path().join("r1");
        assert_eq!(exec(&["run", &cfg, "--out", out.to_str().unwrap()]), 0);
        let m = manifest(&out);
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        assert_eq!(files(&m), ["solution.csv", "bounds.csv", "metrics.csv"]);
        assert!(m["metrics"]["oracle_gap"].is_number());
        assert_eq!(exec(&["report", out.to_str().unwrap()]), 0);
    }

    #[test]
    fn overrides_change_the_config_hash() {
        let (tmp, cfg) = setup(SMALL);
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        exec(&["run", &cfg, "--out", a.to_str().unwrap()]);
        exec(&["run", &cfg, "--out", b.to_str().unwrap(), "--seed", "6", "--paths", "3000", "--steps", "8"]);
        assert_ne!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
    }

    #[test]
    fn missing_seed_is_exit_2_without_outputs() {
        let (tmp, cfg) = setup(&SMALL.replace("seed = 5", ""));
        let out = tmp.path().join("r");
        assert_eq!(exec(&["run", &cfg, "--out", out.to_str().unwrap()]), 2);
        assert!(!out.exists());
    }

    #[test]
    fn failed_check_is_exit_4() {
        let (tmp, cfg) = setup(&SMALL.replace("oracle_gap_max = 0.05", "oracle_gap_max = 1e-12"));
        let out = tmp.path().join("r");
        assert_eq!(exec(&["run", &cfg, "--out", out.to_str().unwrap()]), 4);
        assert_eq!(exec(&["report", out.to_str().unwrap()]), 4);
    }

    #[test]
    fn stage_failure_is_exit_3_with_partial_manifest() {
        // g' = 0 is below g = |z|^2/2, so the comparison refuses to run.
        let (tmp, cfg) = setup(&format!("{SMALL}\n[compare]\ngenerator_prime = \"zero\"\n"));
        let out = tmp.path().join("r");
        assert_eq!(exec(&["run", &cfg, "--out", out.to_str().unwrap()]), 3);
        let m = manifest(&out);
        assert_eq!(m["failure"]["stage"], "compare");
        let f = files(&m);
        assert!(f.contains(&"solution.csv".to_string()) && f.contains(&"bounds.csv".to_string()));
        assert_eq!(exec(&["report", out.to_str().unwrap()]), 3);
    }
}
