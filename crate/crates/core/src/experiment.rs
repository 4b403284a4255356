//! Seeded ablation sweeps over one configuration axis.

use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{csv_table, format_opt, ExperimentConfig};
use crate::metrics::{EvalReport, EvalScope};
use crate::synth::generate_dataset;
use crate::trainer::{train, EpochLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    FrameCount,
    FrameInterval,
    CvtSupervision,
    None,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::FrameCount => "frame_count",
            SweepAxis::FrameInterval => "frame_interval",
            SweepAxis::CvtSupervision => "cvt_supervision",
            SweepAxis::None => "none",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame_count" => Ok(SweepAxis::FrameCount),
            "frame_interval" => Ok(SweepAxis::FrameInterval),
            "cvt_supervision" => Ok(SweepAxis::CvtSupervision),
            "none" => Ok(SweepAxis::None),
            _ => Err(Error::config(
                "sweep",
                format!("unknown axis `{s}`; expected frame_count, frame_interval, cvt_supervision or none"),
            )),
        }
    }
}

/// A base config, the seeds to repeat over, and the values of one axis.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub axis: SweepAxis,
    pub values: Vec<String>,
    /// Concurrent runs; `0` uses the global pool.
    pub jobs: usize,
}

impl Manifest {
    /// Parses `axis` or `axis=v1,v2,...`.
    pub fn parse_sweep(spec: &str) -> Result<(SweepAxis, Vec<String>)> {
        let (axis, values) = match spec.split_once('=') {
            Some((a, v)) => (a.trim().parse::<SweepAxis>()?, v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()),
            None => (spec.trim().parse::<SweepAxis>()?, Vec::new()),
        };
        let values = match (axis, values.is_empty()) {
            (SweepAxis::None, _) => vec!["-".to_string()],
            (SweepAxis::CvtSupervision, true) => vec!["true".into(), "false".into()],
            (_, true) => return Err(Error::config("sweep", format!("`{}` needs values, e.g. `{}=1,3,7`", axis.key(), axis.key()))),
            (_, false) => values,
        };
        Ok((axis, values))
    }

    /// The config of one (value, seed) run, validated.
    pub fn run_config(&self, value: &str, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        if self.axis != SweepAxis::None {
            cfg.set(self.axis.key(), value)?;
        }
        cfg.set("seed", &seed.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed", "at least one seed is required"));
        }
        for v in &self.values {
            self.run_config(v, self.seeds[0])?;
        }
        Ok(())
    }
}

/// Outcome of training and evaluating one config.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub value: String,
    pub seed: u64,
    /// `None` when training diverged.
    pub report: Option<EvalReport>,
    pub log: Vec<EpochLog>,
}

/// Generates data, trains and evaluates on the eval split. Divergence is an outcome, not an error.
pub fn run_one(cfg: &ExperimentConfig) -> Result<(Option<EvalReport>, Vec<EpochLog>)> {
    let data = generate_dataset(&cfg.scene, cfg.train_samples, cfg.eval_samples)?;
    let classes = cfg.scene.class_set.len();
    match train(&cfg.train, &data.train, &data.eval, classes) {
        Ok((ckpt, log)) => {
            let scope = EvalScope {
                grid: cfg.scene.grid,
                classes,
                excluded: cfg.train.excluded_classes.clone(),
            };
            let eval = if data.eval.is_empty() { &data.train } else { &data.eval };
            Ok((Some(ckpt.model.evaluate(eval, &scope)?), log))
        }
        Err(Error::Divergence { .. }) => Ok((None, Vec::new())),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; `0` for a single run.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

/// One aggregated row per sweep value.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: String,
    pub runs: usize,
    pub diverged: usize,
    pub miou: Option<Stat>,
    pub nonfree_iou: Option<Stat>,
    pub near_miou: Option<Stat>,
    pub far_miou: Option<Stat>,
    pub fast_miou: Option<Stat>,
    pub slow_miou: Option<Stat>,
}

fn stat_by(reports: &[&EvalReport], f: impl Fn(&EvalReport) -> Option<f64>) -> Option<Stat> {
    Stat::of(&reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
}

pub fn aggregate(value: &str, outcomes: &[&RunOutcome]) -> AblationRow {
    let reports: Vec<&EvalReport> = outcomes.iter().filter_map(|o| o.report.as_ref()).collect();
    AblationRow {
        value: value.to_string(),
        runs: outcomes.len(),
        diverged: outcomes.len() - reports.len(),
        miou: stat_by(&reports, |r| r.miou),
        nonfree_iou: stat_by(&reports, |r| r.nonfree_iou),
        near_miou: stat_by(&reports, |r| r.near_miou),
        far_miou: stat_by(&reports, |r| r.far_miou),
        fast_miou: stat_by(&reports, |r| r.fast_miou),
        slow_miou: stat_by(&reports, |r| r.slow_miou),
    }
}

/// Runs every (value, seed) pair and aggregates per value, in manifest order.
pub fn run_ablation(manifest: &Manifest) -> Result<(Vec<AblationRow>, Vec<RunOutcome>)> {
    manifest.validate()?;
    let jobs: Vec<(String, u64)> = manifest
        .values
        .iter()
        .flat_map(|v| manifest.seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|(value, seed)| {
                let cfg = manifest.run_config(value, *seed)?;
                let (report, log) = run_one(&cfg)?;
                log::info!("{}={value} seed={seed}: miou {}", manifest.axis.key(), format_opt(report.as_ref().and_then(|r| r.miou)));
                Ok(RunOutcome {
                    value: value.clone(),
                    seed: *seed,
                    report,
                    log,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    let outcomes = if manifest.jobs == 0 {
        work()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(manifest.jobs)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?
            .install(work)?
    };
    let rows = manifest
        .values
        .iter()
        .map(|v| aggregate(v, &outcomes.iter().filter(|o| &o.value == v).collect::<Vec<_>>()))
        .collect();
    Ok((rows, outcomes))
}

pub const ABLATION_HEADER: &[&str] = &[
    "axis",
    "value",
    "runs",
    "diverged",
    "miou_mean",
    "miou_std",
    "nonfree_iou_mean",
    "nonfree_iou_std",
    "near_miou_mean",
    "near_miou_std",
    "far_miou_mean",
    "far_miou_std",
    "fast_miou_mean",
    "fast_miou_std",
    "slow_miou_mean",
    "slow_miou_std",
];

pub fn ablation_csv(axis: SweepAxis, config_hash: &str, rows: &[AblationRow]) -> String {
    let cells = |s: Option<Stat>| [format_opt(s.map(|s| s.mean)), format_opt(s.map(|s| s.std))];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![axis.key().to_string(), r.value.clone(), r.runs.to_string(), r.diverged.to_string()];
            for s in [r.miou, r.nonfree_iou, r.near_miou, r.far_miou, r.fast_miou, r.slow_miou] {
                row.extend(cells(s));
            }
            row
        })
        .collect();
    csv_table(config_hash, ABLATION_HEADER, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_specs_parse() {
        let (a, v) = Manifest::parse_sweep("frame_count=1,3,7").unwrap();
        assert_eq!(a, SweepAxis::FrameCount);
        assert_eq!(v, ["1", "3", "7"]);
        let (a, v) = Manifest::parse_sweep("cvt_supervision").unwrap();
        assert_eq!(a, SweepAxis::CvtSupervision);
        assert_eq!(v.len(), 2);
        assert_eq!(Manifest::parse_sweep("none").unwrap().1, ["-"]);
        assert!(Manifest::parse_sweep("frame_count").is_err());
        assert!(Manifest::parse_sweep("warp=1").is_err());
    }

    #[test]
    fn stats_use_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-12);
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn diverged_runs_are_counted_not_averaged() {
        let mut base = ExperimentConfig::default();
        for (k, v) in [
            ("grid_height", "12"),
            ("grid_width", "12"),
            ("grid_depth", "8"),
            ("frame_count", "2"),
            ("channels", "4"),
            ("strides", "-1,0,1"),
            ("head_hidden", "4"),
            ("epochs", "1"),
            ("train_samples", "2"),
            ("eval_samples", "1"),
            ("learning_rate", "1e36"),
        ] {
            base.set(k, v).unwrap();
        }
        let m = Manifest {
            base,
            seeds: vec![0, 1],
            axis: SweepAxis::None,
            values: vec!["-".into()],
            jobs: 1,
        };
        let (rows, runs) = run_ablation(&m).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(rows[0].diverged, 2);
        assert!(rows[0].miou.is_none());
        let csv = ablation_csv(m.axis, "h", &rows);
        assert!(csv.lines().nth(2).unwrap().starts_with("none,-,2,2,NA,NA"));
    }
}
