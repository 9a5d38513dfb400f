//! Run directories, summary tables and the cross-run report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use acl::harness::{Method, RunRecord, Summary};
use acl::metrics::megabytes_display;
use anyhow::{bail, Context, Result};

pub const RUN_JSON: &str = "run.json";
pub const R_MATRIX: &str = "r_matrix.csv";
pub const SUMMARY: &str = "summary.txt";

pub fn method_label(m: Method) -> &'static str {
    match m {
        Method::Acl => "ACL",
        Method::OrdFt => "ORD-FT",
        Method::OrdJt => "ORD-JT",
        Method::AclJt => "ACL-JT",
    }
}

/// Writes `run.json`, `r_matrix.csv` and `summary.txt` under
/// `<out>/<experiment>/<seed>/` and returns that directory.
pub fn write_run(out: &Path, rec: &RunRecord) -> Result<PathBuf> {
    let dir = out.join(&rec.experiment).join(rec.seed.to_string());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    rec.write_json(fs::File::create(dir.join(RUN_JSON))?)?;
    rec.r.write_csv(fs::File::create(dir.join(R_MATRIX))?)?;
    fs::write(dir.join(SUMMARY), table(&[Row::from_records(std::slice::from_ref(rec))]))?;
    Ok(dir)
}

/// One line of a results table, aggregated over seeds.
#[derive(Debug, Clone)]
pub struct Row {
    pub label: String,
    pub tasks: usize,
    pub acc: Summary,
    /// `None` for joint training.
    pub bwt: Option<Summary>,
    pub structural_zero: bool,
    pub arch_bytes: usize,
    pub memory_bytes: usize,
    pub runs: usize,
}

impl Row {
    pub fn from_records(recs: &[RunRecord]) -> Self {
        let first = &recs[0];
        let accs: Vec<f64> = recs.iter().map(RunRecord::acc).collect();
        let bwts: Option<Vec<f64>> = recs.iter().map(RunRecord::bwt).collect();
        Self {
            label: format!("{} ({})", method_label(first.method), first.experiment),
            tasks: first.r.tasks(),
            acc: Summary::of(&accs),
            bwt: bwts.map(|b| Summary::of(&b)),
            structural_zero: recs.iter().all(|r| r.metrics.structural_zero),
            arch_bytes: first.arch_bytes,
            memory_bytes: first.memory_bytes,
            runs: recs.len(),
        }
    }

    fn bwt_cell(&self) -> String {
        match (&self.bwt, self.structural_zero) {
            (_, true) => "Zero".into(),
            (Some(b), false) => b.percent(),
            (None, false) => "-".into(),
        }
    }

    fn memory_cell(&self) -> String {
        if self.memory_bytes == 0 {
            "-".into()
        } else {
            megabytes_display(self.memory_bytes)
        }
    }
}

/// Fixed-width table: method, ACC%, BWT%, architecture MB, replay MB.
pub fn table(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>14}  {:>14}  {:>9}  {:>18}",
        "Method", "ACC%", "BWT%", "Arch (MB)", "Replay Buffer (MB)"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>14}  {:>14}  {:>9}  {:>18}",
            r.label,
            r.acc.percent(),
            r.bwt_cell(),
            megabytes_display(r.arch_bytes),
            r.memory_cell()
        );
    }
    s
}

pub fn write_rows_csv(rows: &[Row], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method", "tasks", "runs", "acc_mean", "acc_std", "bwt_mean", "bwt_std", "structural_zero", "arch_mb",
        "replay_mb",
    ])?;
    for r in rows {
        let (bm, bs) = r.bwt.map_or((String::new(), String::new()), |b| (b.mean.to_string(), b.std.to_string()));
        w.write_record([
            r.label.clone(),
            r.tasks.to_string(),
            r.runs.to_string(),
            r.acc.mean.to_string(),
            r.acc.std.to_string(),
            bm,
            bs,
            r.structural_zero.to_string(),
            acl::metrics::megabytes(r.arch_bytes).to_string(),
            acl::metrics::megabytes(r.memory_bytes).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn collect(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let run = dir.join(RUN_JSON);
    if run.is_file() {
        found.push(run);
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        collect(&e, found)?;
    }
    Ok(())
}

/// Loads every `run.json` below `dirs` and groups them by experiment and
/// method, in order of first appearance.
pub fn report_rows(dirs: &[PathBuf]) -> Result<Vec<Row>> {
    let mut files = Vec::new();
    for d in dirs {
        collect(d, &mut files)?;
    }
    if files.is_empty() {
        bail!("no completed runs found");
    }
    let mut groups: Vec<((String, Method), Vec<RunRecord>)> = Vec::new();
    for f in files {
        let rec: RunRecord = serde_json::from_reader(fs::File::open(&f)?)
            .with_context(|| format!("parsing {}", f.display()))?;
        let key = (rec.experiment.clone(), rec.method);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(rec),
            None => groups.push((key, vec![rec])),
        }
    }
    let rows: Vec<Row> = groups.iter().map(|(_, recs)| Row::from_records(recs)).collect();
    if let Some(bad) = rows.iter().find(|r| r.tasks != rows[0].tasks) {
        bail!(
            "report error: {} has {} tasks but {} has {}",
            bad.label,
            bad.tasks,
            rows[0].label,
            rows[0].tasks
        );
    }
    for (_, recs) in &groups {
        if recs.iter().any(|r| r.r.tasks() != recs[0].r.tasks()) {
            bail!("report error: runs of {} disagree on the task count", recs[0].experiment);
        }
    }
    Ok(rows)
}
