//! `posnegdm` command-line runner.
//!
//! Every subcommand resolves a [`RunConfig`] (flag > `--config` file >
//! default), does its work, and writes `run.json` next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use posnegdm::artifacts::{
    histogram_csv, load_classifier, load_model, save_classifier, save_model, write_ablation, write_eval, write_seeds,
    RunConfig,
};
use posnegdm::classifier::{mc_evaluate, mc_train};
use posnegdm::data::{
    generate_synthetic_cohort, load_trajectories_csv, normalize_states, save_trajectories_csv, split_train_test,
    terminal_states_with_labels, DatasetSplit,
};
use posnegdm::eval::{ablation_sweep, cohort_histograms, evaluate, seed_sensitivity, AblationParam};
use posnegdm::training::{train_baseline, train_posnegdm};
use posnegdm::{FrozenClassifier, ModelKind};
use serde_json::json;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "POSNEGDM_OUT";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";
pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const RUN_JSON: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "posnegdm", version, about = "Sepsis treatment policies from surviving and fatal trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (default: $POSNEGDM_OUT/<subcommand> or out/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort and its train/test split.
    GenerateData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the mortality classifier on terminal training states.
    TrainMc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a decision maker.
    Train {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        /// Classifier checkpoint, required for posnegdm.
        #[arg(long)]
        mc: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained decision maker on the test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mc: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one loss weight over `ablation_values`.
    Ablate {
        #[arg(long)]
        param: AblationParam,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mc: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Retrain PosNegDM under each of `seeds`.
    Seeds {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mc: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-cohort 5x5 action count tables.
    Histogram {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Runs one command line. Returns the process exit code: 0 on success, 2 on
/// usage errors, 1 on anything else.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn split_kv(s: &str) -> Result<(String, String)> {
    let Some((k, v)) = s.split_once('=') else {
        bail!("--set expects KEY=VALUE, got `{s}`");
    };
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut overrides = common.set.iter().map(|s| split_kv(s)).collect::<Result<Vec<_>>>()?;
    overrides.extend(
        flags
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
    );
    Ok(RunConfig::load(common.config.as_deref(), &overrides)?)
}

fn out_dir(common: &Common, default_leaf: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from);
        root.join(default_leaf)
    })
}

fn write_run_json(dir: &Path, subcommand: &str, cfg: &RunConfig, inputs: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let echo = json!({ "subcommand": subcommand, "seed": cfg.seed, "inputs": inputs, "config": cfg });
    fs::write(dir.join(RUN_JSON), serde_json::to_string_pretty(&echo)? + "\n")?;
    Ok(())
}

/// Reads `train.csv`/`test.csv` from `dir` when present, otherwise splits
/// `trajectories.csv` with the configured seed. States come back normalized
/// with training statistics.
fn load_split(dir: &Path, cfg: &RunConfig) -> Result<DatasetSplit> {
    let (train, test) = (dir.join(TRAIN_CSV), dir.join(TEST_CSV));
    let split = if train.exists() && test.exists() {
        DatasetSplit::from_parts(load_trajectories_csv(&train)?, load_trajectories_csv(&test)?)?
    } else {
        let all = dir.join(TRAJECTORIES_CSV);
        let trajs = load_trajectories_csv(&all).with_context(|| format!("reading {}", all.display()))?;
        split_train_test(trajs, cfg.test_fraction, cfg.seed)?
    };
    Ok(normalize_states(split)?)
}

fn load_frozen(path: &Path) -> Result<FrozenClassifier> {
    let mc = load_classifier(path).with_context(|| format!("loading classifier from {}", path.display()))?;
    Ok(mc.freeze())
}

fn path_json(p: &Path) -> serde_json::Value {
    json!(p.display().to_string())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenerateData { n, seed, common } => {
            let cfg = resolve(
                &common,
                &[("n_trajectories", n.map(|v| v.to_string())), ("seed", seed.map(|v| v.to_string()))],
            )?;
            let out = out_dir(&common, "data");
            let cohort = generate_synthetic_cohort(&cfg.cohort())?;
            fs::create_dir_all(&out)?;
            save_trajectories_csv(&cohort, out.join(TRAJECTORIES_CSV))?;
            let split = split_train_test(cohort, cfg.test_fraction, cfg.seed)?;
            save_trajectories_csv(&split.train, out.join(TRAIN_CSV))?;
            save_trajectories_csv(&split.test, out.join(TEST_CSV))?;
            log::info!(
                "{} train / {} test trajectories written to {}",
                split.train.len(),
                split.test.len(),
                out.display()
            );
            write_run_json(&out, "generate-data", &cfg, json!({ "counts": split.counts }))
        }
        Command::TrainMc { data, seed, common } => {
            let cfg = resolve(&common, &[("seed", seed.map(|v| v.to_string()))])?;
            let out = out_dir(&common, "mc");
            let split = load_split(&data, &cfg)?;
            let (states, labels) = terminal_states_with_labels(&split.train);
            let outcome = mc_train(&states, &labels, &cfg.mc_train())?;
            let (test_states, test_labels) = terminal_states_with_labels(&split.test);
            let test_eval = mc_evaluate(&outcome.classifier, &test_states, &test_labels, 0.5)?;
            log::info!("classifier test accuracy {:.4}", test_eval.accuracy);
            save_classifier(&outcome.classifier, &out)?;
            write_run_json(
                &out,
                "train-mc",
                &cfg,
                json!({
                    "data": path_json(&data),
                    "iterations": outcome.iterations,
                    "best_val_accuracy": outcome.best_val_accuracy,
                    "n_synthetic": outcome.n_synthetic,
                    "test_accuracy": test_eval.accuracy,
                }),
            )
        }
        Command::Train {
            model,
            data,
            mc,
            seed,
            common,
        } => {
            let cfg = resolve(&common, &[("seed", seed.map(|v| v.to_string()))])?;
            let out = out_dir(&common, model.as_str());
            let split = load_split(&data, &cfg)?;
            let dm_cfg = cfg.dm_train_for(split.state_dim());
            let trained = match model {
                ModelKind::PosNegDm => {
                    let Some(mc_path) = &mc else {
                        bail!("--mc is required for --model posnegdm");
                    };
                    train_posnegdm(&split, &load_frozen(mc_path)?, &dm_cfg)?
                }
                kind => train_baseline(kind, &split, &dm_cfg)?,
            };
            save_model(&trained.model, &out)?;
            trained.log.write_csv(fs::File::create(out.join("training_log.csv"))?)?;
            write_run_json(
                &out,
                "train",
                &cfg,
                json!({
                    "model": model.as_str(),
                    "data": path_json(&data),
                    "mc": mc.as_deref().map(path_json),
                }),
            )
        }
        Command::Evaluate {
            model,
            mc,
            data,
            seed,
            common,
        } => {
            let cfg = resolve(&common, &[("seed", seed.map(|v| v.to_string()))])?;
            let out = out_dir(&common, "eval");
            let dm = load_model(&model).with_context(|| format!("loading model from {}", model.display()))?;
            let split = load_split(&data, &cfg)?;
            let echo = json!({ "model": dm.config(), "run": cfg });
            let report = evaluate(&dm, &load_frozen(&mc)?, &split.test, cfg.horizon, cfg.seed, echo)?;
            write_eval(&report, &out)?;
            write_run_json(
                &out,
                "evaluate",
                &cfg,
                json!({ "model": path_json(&model), "mc": path_json(&mc), "data": path_json(&data) }),
            )
        }
        Command::Ablate {
            param,
            data,
            mc,
            seed,
            common,
        } => {
            let cfg = resolve(&common, &[("seed", seed.map(|v| v.to_string()))])?;
            let out = out_dir(&common, &format!("ablate-{}", param.as_str()));
            let split = load_split(&data, &cfg)?;
            let rows = ablation_sweep(
                param,
                &cfg.ablation_values,
                &cfg.dm_train_for(split.state_dim()),
                &split,
                &load_frozen(&mc)?,
            )?;
            write_ablation(param, &rows, &out)?;
            write_run_json(
                &out,
                "ablate",
                &cfg,
                json!({ "param": param.as_str(), "data": path_json(&data), "mc": path_json(&mc) }),
            )
        }
        Command::Seeds { data, mc, common } => {
            let cfg = resolve(&common, &[])?;
            let out = out_dir(&common, "seeds");
            let split = load_split(&data, &cfg)?;
            let report = seed_sensitivity(&cfg.dm_train_for(split.state_dim()), &cfg.seeds, &split, &load_frozen(&mc)?)?;
            write_seeds(&report, &out)?;
            write_run_json(&out, "seeds", &cfg, json!({ "data": path_json(&data), "mc": path_json(&mc) }))
        }
        Command::Histogram { model, data, common } => {
            let cfg = resolve(&common, &[])?;
            let out = out_dir(&common, "histogram");
            let dm = load_model(&model).with_context(|| format!("loading model from {}", model.display()))?;
            let split = load_split(&data, &cfg)?;
            fs::create_dir_all(&out)?;
            for (cohort, h) in cohort_histograms(&dm, &split.test)? {
                fs::write(out.join(format!("histogram_{cohort}.csv")), histogram_csv(&h))?;
            }
            write_run_json(&out, "histogram", &cfg, json!({ "model": path_json(&model), "data": path_json(&data) }))
        }
    }
}
