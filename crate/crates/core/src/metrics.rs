//! Continual-learning metrics over the accuracy matrix, and storage
//! accounting in decimal megabytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::BYTES_PER_VALUE;
use crate::model::AclModel;

/// `R[n][i]`: test accuracy on task `i` after training through task `n`
/// (both 1-based). Only the lower triangle is ever set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl ResultMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            cells: vec![None; tasks * tasks],
        }
    }

    /// Builds from a lower-triangular list of rows, row `n` holding `n`
    /// entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut r = Self::new(rows.len());
        for (n, row) in rows.iter().enumerate() {
            if row.len() != n + 1 {
                return Err(Error::Contract(format!(
                    "row {} has {} entries, expected {}",
                    n + 1,
                    row.len(),
                    n + 1
                )));
            }
            for (i, &v) in row.iter().enumerate() {
                r.set(n + 1, i + 1, v)?;
            }
        }
        Ok(r)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, n: usize, i: usize, value: f64) -> Result<()> {
        if n == 0 || n > self.tasks || i == 0 || i > n {
            return Err(Error::Contract(format!(
                "R[{n},{i}] is outside the lower triangle of a {0}x{0} matrix",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Contract(format!("accuracy {value} outside [0, 1]")));
        }
        self.cells[(n - 1) * self.tasks + (i - 1)] = Some(value);
        Ok(())
    }

    pub fn get(&self, n: usize, i: usize) -> Option<f64> {
        if n == 0 || i == 0 || n > self.tasks || i > self.tasks {
            return None;
        }
        self.cells[(n - 1) * self.tasks + (i - 1)]
    }

    fn need(&self, n: usize, i: usize) -> Result<f64> {
        self.get(n, i)
            .ok_or_else(|| Error::Contract(format!("R[{n},{i}] is unset")))
    }

    /// Row `n` up to the diagonal; unset entries are `None`.
    pub fn row(&self, n: usize) -> Vec<Option<f64>> {
        (1..=n).map(|i| self.get(n, i)).collect()
    }

    pub fn diagonal(&self) -> Result<Vec<f64>> {
        (1..=self.tasks).map(|k| self.need(k, k)).collect()
    }

    pub fn last_row(&self) -> Result<Vec<f64>> {
        (1..=self.tasks).map(|i| self.need(self.tasks, i)).collect()
    }

    /// CSV with one line per row `n`, values for `i = 1..=n`, no header.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).has_headers(false).from_writer(out);
        for n in 1..=self.tasks {
            let fields: Vec<String> = self
                .row(n)
                .into_iter()
                .map(|v| v.map_or_else(String::new, |v| format!("{v:?}")))
                .collect();
            w.write_record(&fields).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_reader(input);
        let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>().map_err(csv_error)?;
        let mut m = Self::new(rows.len());
        for (n, rec) in rows.iter().enumerate() {
            if rec.len() > n + 1 {
                return Err(Error::Format(format!("row {} has {} fields", n + 1, rec.len())));
            }
            for (i, field) in rec.iter().enumerate() {
                let field = field.trim();
                if field.is_empty() {
                    continue;
                }
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Format(format!("R[{},{}] = {field:?} is not a number", n + 1, i + 1)))?;
                m.set(n + 1, i + 1, v)?;
            }
        }
        Ok(m)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Average accuracy over all tasks after the final task.
pub fn acc(r: &ResultMatrix) -> Result<f64> {
    let last = r.last_row()?;
    if last.is_empty() {
        return Err(Error::UndefinedMetric("ACC of an empty matrix".into()));
    }
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean change in accuracy on tasks `1..T` between learning them and the
/// end of the sequence; negative values mean forgetting.
pub fn bwt(r: &ResultMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric(format!("BWT needs at least 2 tasks, got {t}")));
    }
    let mut sum = 0.0;
    for i in 1..t {
        sum += r.need(t, i)? - r.need(i, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// `a_star[k] − R[k,k]` for each task, `a_star` coming from a jointly
/// trained reference on tasks `1..=k`.
pub fn intransigence(a_star: &[f64], r: &ResultMatrix) -> Result<Vec<f64>> {
    if a_star.len() != r.tasks() {
        return Err(Error::Contract(format!(
            "{} reference accuracies for {} tasks",
            a_star.len(),
            r.tasks()
        )));
    }
    Ok(a_star.iter().zip(r.diagonal()?).map(|(a, d)| a - d).collect())
}

pub const BYTES_PER_MB: f64 = 1e6;

pub fn bytes_for_params(params: usize) -> usize {
    params * BYTES_PER_VALUE
}

pub fn arch_bytes(model: &AclModel) -> usize {
    bytes_for_params(model.total_param_count())
}

pub fn megabytes(bytes: usize) -> f64 {
    bytes as f64 / BYTES_PER_MB
}

/// Megabytes rounded to one decimal as printed in result tables.
pub fn megabytes_display(bytes: usize) -> String {
    format!("{:.1}", megabytes(bytes))
}

/// Everything derived from one accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub bwt: Option<f64>,
    /// Set when no parameter on any evaluation path can change after its
    /// task, so BWT is zero by construction rather than by measurement.
    pub structural_zero: bool,
}

impl MetricReport {
    pub fn from_matrix(r: &ResultMatrix, structural_zero: bool) -> Result<Self> {
        let bwt = match bwt(r) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            acc: acc(r)?,
            bwt,
            structural_zero,
        })
    }
}
