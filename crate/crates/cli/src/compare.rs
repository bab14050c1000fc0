//! Final-epoch comparison across runs, grouped by mode.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use sokd_core::trainer::{read_run_csv, read_summary, EpochRow};

use crate::{write, CliResult, Failure};

pub struct RunEntry {
    pub group: String,
    pub rows: Vec<EpochRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Median (mean of the middle pair for even counts), min and max.
pub fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    Some(Stat {
        median,
        min: v[0],
        max: v[n - 1],
    })
}

type Pick = fn(&[EpochRow]) -> Option<f64>;

const METRICS: [(&str, Pick); 6] = [
    ("acc_test_s", |r| r.last().map(|x| x.acc_test_s)),
    ("best_acc_test_s", |r| r.iter().map(|x| x.acc_test_s).reduce(f64::max)),
    ("acc_test_kbm_reconstructed", |r| r.last().and_then(|x| x.acc_test_kbm_reconstructed)),
    ("cka", |r| r.last().and_then(|x| x.cka)),
    ("ier", |r| r.last().and_then(|x| x.ier)),
    ("mr", |r| r.last().and_then(|x| x.mr)),
];

pub struct Table {
    pub groups: Vec<String>,
    pub runs: Vec<usize>,
    pub metrics: Vec<(&'static str, Vec<Option<Stat>>)>,
    /// Distinct epoch counts seen across all runs.
    pub epochs: Vec<usize>,
}

impl Table {
    pub fn build(entries: &[RunEntry]) -> Table {
        let mut groups: Vec<String> = Vec::new();
        for e in entries {
            if !groups.contains(&e.group) {
                groups.push(e.group.clone());
            }
        }
        fn members<'a>(entries: &'a [RunEntry], g: &'a str) -> impl Iterator<Item = &'a RunEntry> {
            entries.iter().filter(move |e| e.group == g)
        }
        let runs = groups.iter().map(|g| members(entries, g).count()).collect();
        let metrics = METRICS
            .iter()
            .map(|(name, pick)| {
                let per_group = groups
                    .iter()
                    .map(|g| {
                        let vals: Vec<f64> = members(entries, g).filter_map(|e| pick(&e.rows)).collect();
                        stat(&vals)
                    })
                    .collect();
                (*name, per_group)
            })
            .collect();
        let mut epochs: Vec<usize> = entries.iter().map(|e| e.rows.len()).collect();
        epochs.sort_unstable();
        epochs.dedup();
        Table {
            groups,
            runs,
            metrics,
            epochs,
        }
    }

    pub fn epochs_differ(&self) -> bool {
        self.epochs.len() > 1
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let mut out = vec![];
        let mut head = vec!["metric".to_string(), "stat".to_string()];
        head.extend(self.groups.iter().cloned());
        out.push(head);
        let mut runs = vec!["runs".to_string(), "count".to_string()];
        runs.extend(self.runs.iter().map(|n| n.to_string()));
        out.push(runs);
        for (name, stats) in &self.metrics {
            if stats.iter().all(Option::is_none) {
                continue;
            }
            for (label, get) in [
                ("median", (|s: &Stat| s.median) as fn(&Stat) -> f64),
                ("min", |s| s.min),
                ("max", |s| s.max),
            ] {
                let mut row = vec![name.to_string(), label.to_string()];
                row.extend(stats.iter().map(|s| s.as_ref().map(|s| format!("{:.4}", get(s))).unwrap_or_default()));
                out.push(row);
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        for row in self.cells() {
            w.write_record(&row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is UTF-8")
    }

    pub fn text(&self) -> String {
        let cells = self.cells();
        let cols = cells[0].len();
        let width: Vec<usize> = (0..cols)
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| if c < 2 { format!("{v:<w$}", w = width[c]) } else { format!("{v:>w$}", w = width[c]) })
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        if self.epochs_differ() {
            s.push_str(&format!(
                "note: runs have different epoch counts {:?}; only final-epoch values are compared\n",
                self.epochs
            ));
        }
        s
    }
}

/// Accepts a `run.csv` or a run directory. The group is the mode recorded in
/// a neighbouring `summary.toml`, else the parent directory name.
fn load_entry(path: &Path) -> CliResult<RunEntry> {
    let csv_path: PathBuf = if path.is_dir() { path.join("run.csv") } else { path.to_path_buf() };
    if !csv_path.exists() {
        return Err(Failure::config("runs", format!("{} does not exist", csv_path.display())));
    }
    let rows = read_run_csv(&csv_path).map_err(|e| Failure::config("runs", e))?;
    let dir = csv_path.parent().unwrap_or(Path::new("."));
    let summary = dir.join("summary.toml");
    let group = if summary.exists() {
        read_summary(&summary).map_err(|e| Failure::config("runs", e))?.mode
    } else {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    };
    Ok(RunEntry { group, rows })
}

pub fn run(paths: &[PathBuf], out: &Path) -> CliResult {
    if paths.len() < 2 {
        return Err(Failure::config("runs", "compare needs at least two runs"));
    }
    let entries = paths.iter().map(|p| load_entry(p)).collect::<CliResult<Vec<_>>>()?;
    let table = Table::build(&entries);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let inputs: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let mut echo = toml::Table::new();
    echo.insert("runs".into(), toml::Value::Array(inputs.into_iter().map(toml::Value::String).collect()));
    write(&out.join("compare.toml"), toml::to_string(&echo).context("encoding compare.toml")?)?;
    write(&out.join("comparison.csv"), table.csv())?;
    let text = table.text();
    write(&out.join("comparison.txt"), &text)?;
    print!("{text}");
    Ok(())
}
