//! Aggregate statistics over one or more run logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{io_err, Result};

/// Max, mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                max: f64::NAN,
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct RunEnd {
    test: BTreeMap<String, f64>,
    valid: BTreeMap<String, f64>,
    params: BTreeMap<String, f64>,
    flow: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    /// Per task (plus `"mean"`): test accuracy across runs.
    pub test_accuracy: BTreeMap<String, Stat>,
    pub valid_accuracy: BTreeMap<String, Stat>,
    pub accounted_params: BTreeMap<String, Stat>,
    /// `(hyperparameter, value) → count` over all sampled children.
    pub hparam_hist: BTreeMap<(String, String), usize>,
    /// `target → source → fraction`, averaged across runs.
    pub flow: BTreeMap<String, BTreeMap<String, f64>>,
    pub runs: usize,
    pub skipped_lines: usize,
}

fn parse_log(
    text: &str,
    hist: &mut BTreeMap<(String, String), usize>,
    skipped: &mut usize,
) -> Option<RunEnd> {
    let mut end = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping malformed log line {}: {e}", i + 1);
                *skipped += 1;
                continue;
            }
        };
        match v.get("event").and_then(Value::as_str) {
            Some("child") => {
                if let Some(hp) = v.get("hparams").and_then(Value::as_object) {
                    for (k, val) in hp {
                        let s = match val {
                            Value::String(s) => s.clone(),
                            other => other.to_string(),
                        };
                        *hist.entry((k.clone(), s)).or_default() += 1;
                    }
                }
            }
            Some("run_end") => {
                let mut r = RunEnd::default();
                for t in v
                    .get("tasks")
                    .and_then(Value::as_array)
                    .into_iter()
                    .flatten()
                {
                    let Some(name) = t.get("task").and_then(Value::as_str) else {
                        continue;
                    };
                    let num = |k: &str| t.get(k).and_then(Value::as_f64);
                    if let Some(x) = num("test_accuracy") {
                        r.test.insert(name.into(), x);
                    }
                    if let Some(x) = num("valid_accuracy") {
                        r.valid.insert(name.into(), x);
                    }
                    if let Some(x) = num("accounted_params") {
                        r.params.insert(name.into(), x);
                    }
                    if let Some(f) = t.get("knowledge_flow").and_then(Value::as_object) {
                        r.flow.insert(
                            name.into(),
                            f.iter()
                                .filter_map(|(k, v)| v.as_f64().map(|x| (k.clone(), x)))
                                .collect(),
                        );
                    }
                }
                end = Some(r);
            }
            _ => {}
        }
    }
    end
}

fn stats_by_task(
    runs: &[RunEnd],
    pick: impl Fn(&RunEnd) -> &BTreeMap<String, f64>,
) -> BTreeMap<String, Stat> {
    let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut means = Vec::new();
    for r in runs {
        let m = pick(r);
        for (t, &x) in m {
            per.entry(t.clone()).or_default().push(x);
        }
        if !m.is_empty() {
            means.push(m.values().sum::<f64>() / m.len() as f64);
        }
    }
    let mut out: BTreeMap<String, Stat> =
        per.into_iter().map(|(t, xs)| (t, Stat::of(&xs))).collect();
    out.insert("mean".into(), Stat::of(&means));
    out
}

/// Aggregates run logs (the text of each file).
pub fn aggregate(logs: &[String]) -> Report {
    let mut hist = BTreeMap::new();
    let mut skipped = 0;
    let runs: Vec<RunEnd> = logs
        .iter()
        .filter_map(|t| parse_log(t, &mut hist, &mut skipped))
        .collect();

    let mut flow: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut flow_runs: BTreeMap<String, usize> = BTreeMap::new();
    for r in &runs {
        for (target, sources) in &r.flow {
            *flow_runs.entry(target.clone()).or_default() += 1;
            let row = flow.entry(target.clone()).or_default();
            for (s, &x) in sources {
                *row.entry(s.clone()).or_default() += x;
            }
        }
    }
    for (target, row) in &mut flow {
        let n = flow_runs[target] as f64;
        row.values_mut().for_each(|v| *v /= n);
    }

    Report {
        test_accuracy: stats_by_task(&runs, |r| &r.test),
        valid_accuracy: stats_by_task(&runs, |r| &r.valid),
        accounted_params: stats_by_task(&runs, |r| &r.params),
        hparam_hist: hist,
        flow,
        runs: runs.len(),
        skipped_lines: skipped,
    }
}

impl Report {
    pub fn markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# Run report\n\n{} run(s).\n", self.runs).ok();
        s.push_str("| task | test max | test avg ± std | valid avg | params/task |\n");
        s.push_str("|---|---|---|---|---|\n");
        for (task, t) in &self.test_accuracy {
            let v = self.valid_accuracy.get(task).map_or(f64::NAN, |v| v.mean);
            let p = self.accounted_params.get(task).map_or(f64::NAN, |p| p.mean);
            writeln!(
                s,
                "| {task} | {:.2} | {:.2} ± {:.2} | {:.2} | {:.0} |",
                100.0 * t.max,
                100.0 * t.mean,
                100.0 * t.std,
                100.0 * v,
                p
            )
            .ok();
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "task,runs,test_max,test_mean,test_std,valid_mean,accounted_params_mean\n",
        );
        for (task, t) in &self.test_accuracy {
            let v = self.valid_accuracy.get(task).map_or(f64::NAN, |v| v.mean);
            let p = self.accounted_params.get(task).map_or(f64::NAN, |p| p.mean);
            writeln!(s, "{task},{},{},{},{},{v},{p}", t.n, t.max, t.mean, t.std).ok();
        }
        s
    }

    pub fn hparams_csv(&self) -> String {
        let mut s = String::from("name,value,count\n");
        for ((name, value), c) in &self.hparam_hist {
            writeln!(s, "{name},{value},{c}").ok();
        }
        s
    }

    pub fn flow_csv(&self) -> String {
        let mut s = String::from("target,source,fraction\n");
        for (target, row) in &self.flow {
            for (source, f) in row {
                writeln!(s, "{target},{source},{f}").ok();
            }
        }
        s
    }

    /// Writes `report.md`, `summary.csv`, `hparams.csv` and `flow.csv` to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in [
            ("report.md", self.markdown()),
            ("summary.csv", self.summary_csv()),
            ("hparams.csv", self.hparams_csv()),
            ("flow.csv", self.flow_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

pub fn report_from_files(paths: &[PathBuf]) -> Result<Report> {
    let texts = paths
        .iter()
        .map(|p| fs::read_to_string(p).map_err(io_err(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&texts))
}
