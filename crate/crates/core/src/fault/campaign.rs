use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FaultError, FaultInjector, FaultSpec};
use crate::emulator::Trace;
use crate::engine::ImageSource;
use crate::plugin::Plugin;
use crate::process::{Process, RestoreOptions, Standalone};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Masked,
    #[serde(rename = "sdc")]
    SilentDataCorruption,
    Detected,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Masked => "masked",
            Outcome::SilentDataCorruption => "sdc",
            Outcome::Detected => "detected",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentResult {
    pub spec: FaultSpec,
    pub outcome: Outcome,
    /// Absolute cycle of the first output difference from the golden run.
    pub first_divergence: Option<u64>,
    pub injections: u64,
}

/// One line of the structured report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub spec: String,
    pub outcome: Outcome,
    /// A cycle number, or `-` when the trace never diverged.
    pub first_divergence: String,
}

impl From<&ExperimentResult> for Record {
    fn from(r: &ExperimentResult) -> Self {
        Record {
            spec: r.spec.to_string(),
            outcome: r.outcome,
            first_divergence: r.first_divergence.map_or_else(|| "-".into(), |c| c.to_string()),
        }
    }
}

impl Record {
    pub fn to_result(&self) -> Result<ExperimentResult, String> {
        Ok(ExperimentResult {
            spec: self.spec.parse()?,
            outcome: self.outcome,
            first_divergence: match self.first_divergence.as_str() {
                "-" => None,
                c => Some(c.parse().map_err(|_| format!("bad divergence cycle `{c}`"))?),
            },
            injections: 0,
        })
    }
}

#[derive(Clone)]
pub struct CampaignConfig {
    pub image: ImageSource,
    pub specs: Vec<FaultSpec>,
    pub run_length: u64,
    /// Output port that asserts when the design detects an error.
    pub checker: String,
    pub parallel: usize,
    pub rank: u32,
    pub fast: bool,
}

impl CampaignConfig {
    pub fn new(image: ImageSource, specs: Vec<FaultSpec>, run_length: u64, checker: &str) -> Self {
        Self {
            image,
            specs,
            run_length,
            checker: checker.to_string(),
            parallel: 1,
            rank: FaultInjector::DEFAULT_RANK,
            fast: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub masked: usize,
    pub sdc: usize,
    pub detected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CampaignReport {
    pub golden_hash: u64,
    pub start_cycle: u64,
    pub run_length: u64,
    pub checker: String,
    pub results: Vec<ExperimentResult>,
    /// Set when an experiment failed; `results` then holds the experiments
    /// that completed before it.
    pub error: Option<String>,
}

impl CampaignReport {
    pub fn counts(&self) -> Counts {
        let mut c = Counts::default();
        for r in &self.results {
            match r.outcome {
                Outcome::Masked => c.masked += 1,
                Outcome::SilentDataCorruption => c.sdc += 1,
                Outcome::Detected => c.detected += 1,
            }
        }
        c
    }

    pub fn has_sdc(&self) -> bool {
        self.counts().sdc > 0
    }

    pub fn is_partial(&self) -> bool {
        self.error.is_some()
    }

    pub fn outcome_map(&self) -> BTreeMap<String, Outcome> {
        self.results.iter().map(|r| (r.spec.to_string(), r.outcome)).collect()
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let width = self
            .results
            .iter()
            .map(|r| r.spec.to_string().len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "golden {:016x}  start cycle {}  run length {}  checker {}",
            self.golden_hash, self.start_cycle, self.run_length, self.checker
        );
        let _ = writeln!(out, "{:<width$}  {:<8}  first-divergence", "spec", "outcome");
        for r in &self.results {
            let rec = Record::from(r);
            let _ = writeln!(out, "{:<width$}  {:<8}  {}", rec.spec, rec.outcome.to_string(), rec.first_divergence);
        }
        let c = self.counts();
        let _ = writeln!(out, "masked {}  sdc {}  detected {}", c.masked, c.sdc, c.detected);
        if let Some(e) = &self.error {
            let _ = writeln!(out, "PARTIAL: {e}");
        }
        out
    }

    /// Line-delimited JSON, one record per spec.
    pub fn records(&self) -> String {
        self.results
            .iter()
            .map(|r| serde_json::to_string(&Record::from(r)).unwrap_or_default() + "\n")
            .collect()
    }
}

/// Outcome of one experiment against the golden run. `start` is the absolute
/// cycle of the first trace row.
pub fn classify(trace: &Trace, golden: &Trace, checker: usize, start: u64) -> (Outcome, Option<u64>) {
    let first = trace.first_divergence(golden).map(|i| start + i as u64);
    if first.is_none() {
        return (Outcome::Masked, None);
    }
    let tripped = trace
        .rows()
        .iter()
        .zip(golden.rows())
        .any(|(t, g)| t.get(checker) == Some(&true) && g.get(checker) == Some(&false));
    let outcome = if tripped {
        Outcome::Detected
    } else {
        Outcome::SilentDataCorruption
    };
    (outcome, first)
}

/// Trace of a clean restore run for `run_length` cycles, with the start cycle.
pub fn golden_trace(image: &ImageSource, run_length: u64, fast: bool) -> Result<(Trace, u64), FaultError> {
    let mut p = Process::restore(
        image,
        RestoreOptions {
            fast,
            ..RestoreOptions::default()
        },
        &mut Standalone::new(),
    )
    .map_err(|e| FaultError::Restore(e.to_string()))?;
    p.run(run_length, &mut Standalone::new())
        .map_err(|e| FaultError::Restore(e.to_string()))?;
    Ok((p.trace().clone(), p.start_cycle()))
}

/// Restores `cfg.image` with a fault injector carrying `spec`, runs it and
/// classifies the result.
pub fn run_experiment(
    cfg: &CampaignConfig,
    spec: &FaultSpec,
    golden: &Trace,
    checker: usize,
) -> Result<ExperimentResult, FaultError> {
    let injector = Arc::new(FaultInjector::new(cfg.rank, vec![spec.clone()]));
    let mut p = Process::restore(
        &cfg.image,
        RestoreOptions {
            fast: cfg.fast,
            extra_plugins: vec![injector.clone() as Arc<dyn Plugin>],
            ..RestoreOptions::default()
        },
        &mut Standalone::new(),
    )
    .map_err(|e| FaultError::Restore(format!("{spec}: {e}")))?;
    let start = p.start_cycle();
    p.run(cfg.run_length, &mut Standalone::new())
        .map_err(|e| FaultError::Restore(format!("{spec}: {e}")))?;
    let (outcome, first_divergence) = classify(p.trace(), golden, checker, start);
    Ok(ExperimentResult {
        spec: spec.clone(),
        outcome,
        first_divergence,
        injections: injector.count_faults(),
    })
}

/// One restore per spec; experiments run on `cfg.parallel` threads and the
/// report lists them in spec order regardless.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, FaultError> {
    let (golden, start) = golden_trace(&cfg.image, cfg.run_length, cfg.fast)?;
    let netlist = {
        let p = Process::restore(&cfg.image, RestoreOptions::default(), &mut Standalone::new())
            .map_err(|e| FaultError::Restore(e.to_string()))?;
        p.netlist().clone()
    };
    let checker = netlist
        .output_index(&cfg.checker)
        .ok_or_else(|| FaultError::UnknownChecker(cfg.checker.clone()))?;
    let end = start + cfg.run_length;
    for s in &cfg.specs {
        s.validate(&netlist, start)?;
        if s.first_cycle().is_some_and(|c| c >= end) {
            log::warn!("`{s}` lies beyond the last simulated cycle {}; it has no effect", end.saturating_sub(1));
        }
    }

    let workers = cfg.parallel.max(1).min(cfg.specs.len().max(1));
    let mut outcomes: Vec<Option<Result<ExperimentResult, FaultError>>> = vec![None; cfg.specs.len()];
    if workers == 1 {
        for (i, spec) in cfg.specs.iter().enumerate() {
            let r = run_experiment(cfg, spec, &golden, checker);
            let failed = r.is_err();
            outcomes[i] = Some(r);
            if failed {
                break;
            }
        }
    } else {
        let golden = &golden;
        let done: Vec<Vec<(usize, Result<ExperimentResult, FaultError>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    s.spawn(move || {
                        (w..cfg.specs.len())
                            .step_by(workers)
                            .map(|i| (i, run_experiment(cfg, &cfg.specs[i], golden, checker)))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_default())
                .collect()
        });
        for (i, r) in done.into_iter().flatten() {
            outcomes[i] = Some(r);
        }
    }

    let mut results = Vec::new();
    let mut error = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Some(Ok(r)) => results.push(r),
            Some(Err(e)) => {
                error = Some(e.to_string());
                break;
            }
            None => {
                error = Some(format!("experiment `{}` did not run", cfg.specs[i]));
                break;
            }
        }
    }
    Ok(CampaignReport {
        golden_hash: golden.digest(),
        start_cycle: start,
        run_length: cfg.run_length,
        checker: cfg.checker.clone(),
        results,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[bool]]) -> Trace {
        Trace(rows.iter().map(|r| r.to_vec()).collect())
    }

    #[test]
    fn classification_rules() {
        let golden = t(&[&[false, false], &[true, false]]);
        assert_eq!(classify(&golden, &golden, 1, 10), (Outcome::Masked, None));
        let sdc = t(&[&[false, false], &[false, false]]);
        assert_eq!(classify(&sdc, &golden, 1, 10), (Outcome::SilentDataCorruption, Some(11)));
        let det = t(&[&[false, true], &[true, false]]);
        assert_eq!(classify(&det, &golden, 1, 10), (Outcome::Detected, Some(10)));
    }

    #[test]
    fn records_round_trip() {
        let r = ExperimentResult {
            spec: "flip c3".parse().unwrap(),
            outcome: Outcome::SilentDataCorruption,
            first_divergence: Some(7),
            injections: 1,
        };
        let line = serde_json::to_string(&Record::from(&r)).unwrap();
        assert_eq!(line, r#"{"spec":"flip c3","outcome":"sdc","first_divergence":"7"}"#);
        let back: Record = serde_json::from_str(&line).unwrap();
        assert_eq!(back.to_result().unwrap(), ExperimentResult { injections: 0, ..r });
    }
}
