//! The `psearch` command line: data generation, training, evaluation and
//! regime comparison.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` file, then command-line flags (`--seed`, `--regime`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Metrics, PrResult, SearchConfig};
use crate::synthdata::{self, Dataset, SyntheticSpec};
use crate::trainer::{run_regime, Regime, RunConfig, RunDir, RunOutcome};

pub const SOURCE_HASH: &str = env!("PSEARCH_SOURCE_HASH");

#[derive(Debug, Parser)]
#[command(name = "psearch", version, about = "Person search: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one regime and evaluate the result.
    Train {
        #[arg(long)]
        regime: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint; skips detector training.
        #[arg(long)]
        det_ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the gallery and query splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Weight similarities by detection confidence.
        #[arg(long)]
        cws: bool,
        /// Also write metrics.json, metrics.csv and dumps here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train all three regimes over several seeds and tabulate them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub source_hash: String,
}

/// Creates `out`, refusing a non-empty directory unless `force`.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let busy = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if busy && !force {
            return Err(Error::config(format!(
                "{} already exists and is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<()> {
    write_json(&out.join("manifest.json"), m)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// `metrics.json` of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub regime: Regime,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub stage1: Option<PrResult>,
    pub stage1_checksum: Option<String>,
    pub detector_checksum: String,
}

impl TrainMetrics {
    fn from_outcome(o: &RunOutcome, seed: u64) -> Self {
        TrainMetrics {
            regime: o.regime,
            seed,
            metrics: o.metrics.clone(),
            stage1: o.stage1,
            stage1_checksum: o.stage1_checksum.clone(),
            detector_checksum: o.model.detector_checksum(),
        }
    }
}

fn resolve_config(path: &Path, regime: Option<Regime>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(r) = regime {
        cfg.train.regime = r;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One training run into `out` (already prepared).
pub fn train_into(cfg: &RunConfig, data: &Dataset, out: &Path, det_ckpt: Option<&Path>) -> Result<TrainMetrics> {
    let dir = RunDir::new(out)?;
    let outcome = run_regime(cfg, data, Some(&dir), det_ckpt, None)?;
    let tm = TrainMetrics::from_outcome(&outcome, cfg.train.seed);
    write_json(&out.join("metrics.json"), &tm)?;
    let stages: Vec<_> = outcome.stages.iter().collect();
    write_json(&out.join("logs").join("stages.json"), &stages)?;
    Ok(tm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: Regime,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub top1: f64,
    pub runs: Vec<TrainMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    /// Medians over runs.
    pub rows: Vec<RegimeRow>,
    pub checks: Vec<OrderingCheck>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl CompareReport {
    pub fn build(seeds: Vec<u64>, results: Vec<(Regime, Vec<TrainMetrics>)>) -> Self {
        let rows: Vec<RegimeRow> = results
            .into_iter()
            .map(|(regime, runs)| {
                let col = |f: &dyn Fn(&TrainMetrics) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
                RegimeRow {
                    regime,
                    ap: col(&|m| m.metrics.ap),
                    recall: col(&|m| m.metrics.recall),
                    map: col(&|m| m.metrics.map),
                    top1: col(&|m| m.metrics.top1),
                    runs,
                }
            })
            .collect();
        let row = |r: Regime| rows.iter().find(|x| x.regime == r);
        let mut checks = Vec::new();
        if let (Some(inc), Some(joint), Some(hyb)) = (row(Regime::Incremental), row(Regime::Joint), row(Regime::Hybrid)) {
            checks.push(OrderingCheck {
                name: "incremental AP >= joint AP".into(),
                pass: inc.ap >= joint.ap,
                detail: format!("{:.4} vs {:.4}", inc.ap, joint.ap),
            });
            checks.push(OrderingCheck {
                name: "incremental AP > hybrid AP".into(),
                pass: inc.ap > hyb.ap,
                detail: format!("{:.4} vs {:.4}", inc.ap, hyb.ap),
            });
            let frozen = inc
                .runs
                .iter()
                .all(|m| m.stage1.is_some_and(|s| s.ap.to_bits() == m.metrics.ap.to_bits()));
            checks.push(OrderingCheck {
                name: "incremental AP equals stage-1 AP".into(),
                pass: frozen,
                detail: inc
                    .runs
                    .iter()
                    .map(|m| format!("{:?} vs {}", m.stage1.map(|s| s.ap), m.metrics.ap))
                    .collect::<Vec<_>>()
                    .join("; "),
            });
        }
        CompareReport { seeds, rows, checks }
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# Regime comparison\n\nMedians over seeds {:?}.\n\n", self.seeds));
        s.push_str("| Training | AP | Recall | mAP | top-1 |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.regime.name(),
                100.0 * r.ap,
                100.0 * r.recall,
                100.0 * r.map,
                100.0 * r.top1
            ));
        }
        s.push_str("\n| Check | Result | Values |\n|---|---|---|\n");
        for c in &self.checks {
            s.push_str(&format!(
                "| {} | {} | {} |\n",
                c.name,
                if c.pass { "pass" } else { "FAIL" },
                c.detail
            ));
        }
        s
    }
}

/// Trains every regime for `runs` consecutive seeds. Incremental and hybrid
/// runs of one seed share the stage-1 detector.
pub fn compare_into(cfg: &RunConfig, data: &Dataset, out: &Path, runs: usize) -> Result<CompareReport> {
    if runs == 0 {
        return Err(Error::config("--runs must be positive"));
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|k| cfg.train.seed + k).collect();
    let mut results: Vec<(Regime, Vec<TrainMetrics>)> = Regime::ALL.iter().map(|r| (*r, Vec::new())).collect();
    for &seed in &seeds {
        let base = out.join("runs").join(format!("seed{seed}"));
        let mut det_ckpt = None;
        for (regime, acc) in results.iter_mut() {
            let mut c = cfg.clone();
            c.train.seed = seed;
            c.train.regime = *regime;
            let dir = base.join(regime.name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            log::info!("compare: seed {seed}, regime {}", regime.name());
            let ckpt = if *regime == Regime::Hybrid { det_ckpt.as_deref() } else { None };
            let m = train_into(&c, data, &dir, ckpt)?;
            if *regime == Regime::Incremental {
                det_ckpt = Some(RunDir { root: dir.clone() }.checkpoint("detector_last"));
            }
            acc.push(m);
        }
    }
    let report = CompareReport::build(seeds, results);
    write_json(&out.join("compare.json"), &report)?;
    fs::write(out.join("report.md"), report.markdown()).map_err(|e| Error::io(out.join("report.md"), e))?;
    Ok(report)
}

/// Runs a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, force } => {
            let s = SyntheticSpec::load(&spec)?;
            s.validate()?;
            prepare_out(&out, force)?;
            write_manifest(
                &out,
                &RunManifest {
                    command: "gen-data".into(),
                    config_path: Some(spec.clone()),
                    config: to_value(&s),
                    seed: Some(s.seed),
                    out: out.clone(),
                    source_hash: SOURCE_HASH.into(),
                },
            )?;
            let data = synthdata::render(&s)?;
            data.write(&out)?;
            write_json(&out.join("spec.json"), &s)?;
            // hash the dataset proper, not the manifest that names the output path
            let mut h = Vec::new();
            for split in synthdata::SPLITS {
                h.push(synthdata::dir_hash(&out.join(split))?);
            }
            let hash = {
                use sha2::{Digest, Sha256};
                hex::encode(Sha256::digest(h.join("").as_bytes()))
            };
            fs::write(out.join("dataset.sha256"), format!("{hash}\n")).map_err(|e| Error::io(&out, e))?;
            println!("{hash}");
            Ok(())
        }
        Command::Train {
            regime,
            config,
            data,
            out,
            det_ckpt,
            seed,
            force,
        } => {
            let regime: Regime = regime.parse()?;
            let cfg = resolve_config(&config, Some(regime), seed)?;
            prepare_out(&out, force)?;
            write_manifest(
                &out,
                &RunManifest {
                    command: "train".into(),
                    config_path: Some(config),
                    config: to_value(&cfg),
                    seed: Some(cfg.train.seed),
                    out: out.clone(),
                    source_hash: SOURCE_HASH.into(),
                },
            )?;
            let dataset = Dataset::load(&data)?;
            if regime == Regime::Joint && det_ckpt.is_some() {
                return Err(Error::config("--det-ckpt applies to the incremental and hybrid regimes only"));
            }
            let m = train_into(&cfg, &dataset, &out, det_ckpt.as_deref())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&m).map_err(|e| Error::json("metrics", e))?
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            cws,
            out,
            force,
        } => {
            if let Some(o) = &out {
                prepare_out(o, force)?;
                write_manifest(
                    o,
                    &RunManifest {
                        command: "eval".into(),
                        config_path: Some(ckpt.clone()),
                        config: serde_json::json!({"cws": cws}),
                        seed: None,
                        out: o.clone(),
                        source_hash: SOURCE_HASH.into(),
                    },
                )?;
            }
            let (model, _) = checkpoint::load_model(&ckpt)?;
            let dataset = Dataset::load(&data)?;
            let cfg = SearchConfig {
                use_cws: cws,
                ..SearchConfig::default()
            };
            let dumps = out.as_ref().map(|o| o.join("dumps"));
            let m = evaluate(&model, &dataset.gallery, &dataset.query, &cfg, dumps.as_deref())?;
            if let Some(o) = &out {
                write_json(&o.join("metrics.json"), &m)?;
                fs::write(o.join("metrics.csv"), m.to_csv()).map_err(|e| Error::io(o, e))?;
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&m).map_err(|e| Error::json("metrics", e))?
            );
            Ok(())
        }
        Command::Compare {
            config,
            data,
            out,
            runs,
            seed,
            force,
        } => {
            let cfg = resolve_config(&config, None, seed)?;
            prepare_out(&out, force)?;
            write_manifest(
                &out,
                &RunManifest {
                    command: "compare".into(),
                    config_path: Some(config),
                    config: to_value(&cfg),
                    seed: Some(cfg.train.seed),
                    out: out.clone(),
                    source_hash: SOURCE_HASH.into(),
                },
            )?;
            let dataset = Dataset::load(&data)?;
            let report = compare_into(&cfg, &dataset, &out, runs)?;
            print!("{}", report.markdown());
            Ok(())
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_spec_is_usage_error() {
        assert_eq!(main_with(["psearch", "gen-data", "--out", "/nonexistent"]), 2);
    }

    #[test]
    fn out_collision_needs_force() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("x"), "1").unwrap();
        assert!(matches!(prepare_out(d.path(), false), Err(Error::Config(_))));
        prepare_out(d.path(), true).unwrap();
        prepare_out(&d.path().join("fresh"), false).unwrap();
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
