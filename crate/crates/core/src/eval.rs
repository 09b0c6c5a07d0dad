//! Confusion matrices, segmentation metrics, and evaluation over every
//! modality subset.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{restrict, LabelMap, ModalitySample};
use crate::error::{MagicError, Result};
use crate::modality::ModalitySet;
use crate::model::MagicModel;

/// `counts[t * k + p]` pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            k: classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(MagicError::arg(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k: classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn accumulate(&mut self, pred: &[u16], label: &LabelMap) -> Result<()> {
        if pred.len() != label.data.len() {
            return Err(MagicError::arg(format!(
                "prediction has {} pixels, label has {}",
                pred.len(),
                label.data.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(&label.data) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(MagicError::arg(format!(
                    "class id out of range for {} classes",
                    self.k
                )));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(MagicError::arg(
                "cannot merge confusion matrices of different sizes",
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Per-class values; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    /// `TP / (TP + FN)`.
    pub acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub miou: f64,
    pub mf1: f64,
    pub macc: f64,
    /// `trace / total`.
    pub pixel_acc: f64,
    /// Classes excluded from at least one mean.
    pub undefined: Vec<usize>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> f64 {
    let (s, n) = v.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(MagicError::EmptyReport);
    }
    let k = cm.classes();
    let mut per_class = Vec::with_capacity(k);
    let mut undefined = Vec::new();
    for c in 0..k {
        let tp = cm.get(c, c);
        let fp: u64 = (0..k).filter(|&i| i != c).map(|i| cm.get(i, c)).sum();
        let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| cm.get(c, j)).sum();
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let m = ClassMetrics {
            iou: ratio(tp, tp + fp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            acc: ratio(tp, tp + fn_),
        };
        if m.iou.is_none() || m.acc.is_none() {
            undefined.push(c);
        }
        per_class.push(m);
    }
    Ok(Metrics {
        miou: mean_defined(per_class.iter().map(|m| m.iou)),
        mf1: mean_defined(per_class.iter().map(|m| m.f1)),
        macc: mean_defined(per_class.iter().map(|m| m.acc)),
        pixel_acc: cm.trace() as f64 / total as f64,
        per_class,
        undefined,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetRow {
    pub subset: ModalitySet,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetReport {
    pub classes: usize,
    pub rows: Vec<SubsetRow>,
    pub mean_miou: f64,
    pub mean_mf1: f64,
    pub mean_macc: f64,
    pub mean_pixel_acc: f64,
}

impl SubsetReport {
    pub fn from_rows(classes: usize, rows: Vec<SubsetRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(MagicError::EmptyReport);
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        Ok(SubsetReport {
            classes,
            mean_miou: mean(|m| m.miou),
            mean_mf1: mean(|m| m.mf1),
            mean_macc: mean(|m| m.macc),
            mean_pixel_acc: mean(|m| m.pixel_acc),
            rows,
        })
    }

    pub fn row(&self, subset: ModalitySet) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }
}

/// Confusion matrix of `model` on `dataset` using the modalities in
/// `subset`, with no restriction of the samples.
pub fn confusion_for(
    model: &MagicModel,
    dataset: &[ModalitySample],
    subset: ModalitySet,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for s in dataset {
        cm.accumulate(&model.predict_labels(s, subset)?, s.label())?;
    }
    Ok(cm)
}

/// Plain evaluation with the given modalities.
pub fn evaluate(
    model: &MagicModel,
    dataset: &[ModalitySample],
    subset: ModalitySet,
) -> Result<Metrics> {
    metrics(&confusion_for(model, dataset, subset)?)
}

fn evaluate_restricted(
    model: &MagicModel,
    dataset: &[ModalitySample],
    subset: ModalitySet,
) -> Result<SubsetRow> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for s in dataset {
        let r = restrict(s, subset)?;
        cm.accumulate(&model.predict_labels(&r, subset)?, r.label())?;
    }
    Ok(SubsetRow {
        subset,
        metrics: metrics(&cm)?,
        confusion: cm,
    })
}

/// Thread cap from `MAGIC_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("MAGIC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Evaluate every subset in `subsets` (default: all non-empty subsets of the
/// training modalities) with each sample restricted to that subset. Rows are
/// in the order given, or size-then-registry order by default.
pub fn evaluate_subsets(
    model: &MagicModel,
    dataset: &[ModalitySample],
    subsets: Option<&[ModalitySet]>,
) -> Result<SubsetReport> {
    if dataset.is_empty() {
        return Err(MagicError::arg("evaluation dataset is empty"));
    }
    let all = model.config.modalities.non_empty_subsets();
    let subsets: Vec<ModalitySet> = subsets.map_or(all, |s| s.to_vec());
    for s in &subsets {
        if s.is_empty() || !s.is_subset_of(model.config.modalities) {
            return Err(MagicError::arg(format!(
                "subset {s} is not within the training modalities {}",
                model.config.modalities
            )));
        }
    }
    let run = || -> Result<Vec<SubsetRow>> {
        subsets
            .par_iter()
            .map(|&s| evaluate_restricted(model, dataset, s))
            .collect()
    };
    let rows = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| MagicError::arg(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    SubsetReport::from_rows(model.config.classes, rows)
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.8e}"),
        _ => "nan".to_string(),
    }
}

pub fn csv_header(classes: usize) -> String {
    let mut s = String::from("subset");
    for c in 0..classes {
        let _ = write!(s, ",iou_{c},f1_{c},acc_{c}");
    }
    s.push_str(",miou,mf1,macc,pixel_acc,undefined");
    s
}

pub fn report_csv(report: &SubsetReport) -> String {
    let mut s = csv_header(report.classes);
    s.push('\n');
    for r in &report.rows {
        s.push_str(&r.subset.to_string());
        for c in &r.metrics.per_class {
            let _ = write!(
                s,
                ",{},{},{}",
                fmt_value(c.iou),
                fmt_value(c.f1),
                fmt_value(c.acc)
            );
        }
        let m = &r.metrics;
        let undefined = if m.undefined.is_empty() {
            "-".to_string()
        } else {
            m.undefined
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        let _ = writeln!(
            s,
            ",{},{},{},{},{undefined}",
            fmt_value(Some(m.miou)),
            fmt_value(Some(m.mf1)),
            fmt_value(Some(m.macc)),
            fmt_value(Some(m.pixel_acc))
        );
    }
    s
}

/// One parsed CSV row: the subset label and every numeric column by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRow {
    pub subset: String,
    pub values: Vec<(String, f64)>,
    pub undefined: String,
}

impl ParsedRow {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(k, _)| k == column)
            .map(|(_, v)| *v)
    }
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ParsedRow>> {
    let bad = |msg: String| MagicError::format(PathBuf::from("<report>"), msg);
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty report".into()))?
        .split(',')
        .collect();
    if header.first() != Some(&"subset") || header.last() != Some(&"undefined") {
        return Err(bad("unexpected report header".into()));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(bad(format!(
                "row has {} cells, header has {}",
                cells.len(),
                header.len()
            )));
        }
        let mut values = Vec::with_capacity(cells.len() - 2);
        for (name, cell) in header[1..header.len() - 1]
            .iter()
            .zip(&cells[1..cells.len() - 1])
        {
            let v = cell
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number '{cell}' in column {name}")))?;
            values.push((name.to_string(), v));
        }
        rows.push(ParsedRow {
            subset: cells[0].to_string(),
            values,
            undefined: cells[cells.len() - 1].to_string(),
        });
    }
    Ok(rows)
}

/// Text table: one column per subset plus the mean, one row per metric.
pub fn summary_table(rows: &[ParsedRow]) -> String {
    let mut s = String::new();
    s.push_str("# per-class acc = TP/(TP+FN); pixel_acc = correct/total; classes with zero denominators are excluded from means\n");
    let width = rows
        .iter()
        .map(|r| r.subset.len())
        .max()
        .unwrap_or(0)
        .max(7)
        + 2;
    let _ = write!(s, "{:<10}", "metric");
    for r in rows {
        let _ = write!(s, "{:>width$}", r.subset);
    }
    let _ = writeln!(s, "{:>width$}", "Mean");
    for (col, label) in [
        ("miou", "mIoU"),
        ("mf1", "mF1"),
        ("macc", "mAcc"),
        ("pixel_acc", "pixAcc"),
    ] {
        let _ = write!(s, "{label:<10}");
        let vals: Vec<f64> = rows
            .iter()
            .map(|r| r.get(col).unwrap_or(f64::NAN) * 100.0)
            .collect();
        for v in &vals {
            let _ = write!(s, "{v:>width$.2}");
        }
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let _ = writeln!(s, "{mean:>width$.2}");
    }
    s
}

/// Per-subset mIoU as `index subset miou` lines, for external plotting.
pub fn plot_data(rows: &[ParsedRow]) -> String {
    let mut s = String::from("# x=subset_index y=miou\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i} {} {:.8e}",
            r.subset,
            r.get("miou").unwrap_or(f64::NAN)
        );
    }
    s
}

pub fn summary_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("txt")
}

/// Write the CSV at `path` and the text summary next to it.
pub fn emit_report(report: &SubsetReport, path: &Path) -> Result<()> {
    let csv = report_csv(report);
    fs::write(path, &csv).map_err(|e| MagicError::io(path, e))?;
    let summary = summary_table(&parse_report_csv(&csv)?);
    let txt = summary_path(path);
    fs::write(&txt, summary).map_err(|e| MagicError::io(&txt, e))
}
