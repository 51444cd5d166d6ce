//! Comparison tables of measured reports and stored reference rows.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use adapterseg::metrics::{MetricKey, MetricReport};
use adapterseg::Task;
use anyhow::{bail, Context, Result};

const REFERENCE_CSV: &str = include_str!("../data/reference_rows.csv");

/// Where a row's numbers come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    /// Published numbers shipped with the tool; never recomputed.
    Reference,
    Measured,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Reference => "reference",
            Source::Measured => "measured",
        })
    }
}

impl FromStr for Source {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Source::Reference),
            "measured" => Ok(Source::Measured),
            other => bail!("unknown row source `{other}`"),
        }
    }
}

/// One table row. Values are kept as rendered text so stored rows are
/// reproduced verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub method: String,
    pub dataset: String,
    pub task: Task,
    pub source: Source,
    pub values: BTreeMap<MetricKey, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportTable {
    pub metrics: Vec<MetricKey>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Markdown,
    Csv,
}

/// The shipped reference rows, in file order.
pub fn reference_rows() -> Result<Vec<TableRow>> {
    let mut reader = csv::Reader::from_reader(REFERENCE_CSV.as_bytes());
    let mut rows: Vec<TableRow> = Vec::new();
    for record in reader.records() {
        let record = record.context("reading reference rows")?;
        let [method, dataset, task, metric, value] =
            [0, 1, 2, 3, 4].map(|i| record.get(i).unwrap_or(""));
        let task: Task = task.parse()?;
        let metric: MetricKey = metric.parse()?;
        match rows
            .iter_mut()
            .find(|r| r.method == method && r.dataset == dataset && r.task == task)
        {
            Some(row) => {
                row.values.insert(metric, value.to_string());
            }
            None => rows.push(TableRow {
                method: method.to_string(),
                dataset: dataset.to_string(),
                task,
                source: Source::Reference,
                values: BTreeMap::from([(metric, value.to_string())]),
            }),
        }
    }
    Ok(rows)
}

pub fn measured_row(method: &str, report: &MetricReport) -> TableRow {
    TableRow {
        method: method.to_string(),
        dataset: report.dataset_id.clone(),
        task: report.task,
        source: Source::Measured,
        values: report
            .metrics()
            .into_iter()
            .map(|(k, v)| (k, format!("{v:.4}")))
            .collect(),
    }
}

impl ReportTable {
    /// Reference rows for the tasks of `measured`, followed by the measured
    /// rows. Columns are the given metrics, or every metric of those tasks.
    pub fn build(measured: Vec<TableRow>, metrics: Option<Vec<MetricKey>>) -> Result<Self> {
        let tasks: Vec<Task> = measured.iter().map(|r| r.task).collect();
        let mut rows: Vec<TableRow> = reference_rows()?
            .into_iter()
            .filter(|r| tasks.contains(&r.task))
            .collect();
        rows.extend(measured);
        let metrics = metrics.unwrap_or_else(|| {
            MetricKey::ALL
                .into_iter()
                .filter(|k| tasks.iter().any(|&t| MetricKey::for_task(t).contains(k)))
                .collect()
        });
        Ok(Self { metrics, rows })
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Markdown => Ok(self.to_markdown()),
            Format::Csv => self.to_csv(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method | Dataset | Source |");
        for k in &self.metrics {
            let arrow = if k.higher_is_better() { "↑" } else { "↓" };
            out.push_str(&format!(" {} {arrow} |", k.label()));
        }
        out.push_str("\n|---|---|---|");
        for _ in &self.metrics {
            out.push_str("---:|");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} | {} | {} |", r.method, r.dataset, r.source));
            for k in &self.metrics {
                out.push_str(&format!(
                    " {} |",
                    r.values.get(k).map_or("-", String::as_str)
                ));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method", "dataset", "task", "source"];
        header.extend(self.metrics.iter().map(|k| k.key()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut record = vec![
                r.method.clone(),
                r.dataset.clone(),
                r.task.to_string(),
                r.source.to_string(),
            ];
            record.extend(
                self.metrics
                    .iter()
                    .map(|k| r.values.get(k).cloned().unwrap_or_default()),
            );
            w.write_record(&record)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    /// Parses the output of [`ReportTable::to_csv`]; unknown metric columns
    /// are rejected.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        let fixed = ["method", "dataset", "task", "source"];
        if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
            bail!("table header must start with {}", fixed.join(","));
        }
        let metrics: Vec<MetricKey> = header
            .iter()
            .skip(fixed.len())
            .map(str::parse)
            .collect::<adapterseg::Result<_>>()?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let values = metrics
                .iter()
                .zip(record.iter().skip(fixed.len()))
                .filter(|(_, v)| !v.is_empty())
                .map(|(&k, v)| (k, v.to_string()))
                .collect();
            rows.push(TableRow {
                method: record[0].to_string(),
                dataset: record[1].to_string(),
                task: record[2].parse()?,
                source: record[3].parse()?,
                values,
            });
        }
        Ok(Self { metrics, rows })
    }
}
