//! Hard test-time metrics on binarized predictions, and their aggregation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::ExperimentKind;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::models::{Architecture, EncoderKind};

/// Guard term in the ratio denominators.
pub const METRIC_EPS: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Exact header of the metrics table.
pub const METRICS_HEADER: &str =
    "experiment,architecture,encoder,weight_init,sens,spec,dice,params_millions,train_s_per_batch,val_s_per_batch,status";

/// 1 where `pred >= tau`, else 0.
pub fn binarize(pred: &Grid<f64>, tau: f64) -> Grid<u8> {
    pred.map(|v| u8::from(v >= tau))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Pixel tallies of a binary prediction against a binary target.
pub fn confusion(pred: &Grid<u8>, target: &Grid<u8>) -> Result<ConfusionCounts> {
    if !pred.same_shape(target) {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    if !pred.is_binary() || !target.is_binary() {
        return Err(Error::Validation("confusion counts need binary grids".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// What to report when a slice has no predicted foreground (`TP + FP = 0`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyRule {
    /// Every such slice scores 1 on all three metrics.
    #[default]
    PaperLiteral,
    /// The override applies only when the target is empty too (`FN = 0`).
    Strict,
}

impl FromStr for EmptyRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" | "paper-literal" => Ok(EmptyRule::PaperLiteral),
            "strict" => Ok(EmptyRule::Strict),
            _ => Err(Error::Config(format!("unknown empty rule {s:?}"))),
        }
    }
}

/// Sensitivity, specificity and Dice as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HardMetrics {
    pub sens: f64,
    pub spec: f64,
    pub dice: f64,
}

pub fn hard_metrics(c: &ConfusionCounts, eps: f64, rule: EmptyRule) -> HardMetrics {
    let override_all = c.tp + c.fp == 0
        && match rule {
            EmptyRule::PaperLiteral => true,
            EmptyRule::Strict => c.fn_ == 0,
        };
    if override_all {
        return HardMetrics { sens: 1.0, spec: 1.0, dice: 1.0 };
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    HardMetrics {
        sens: tp / (tp + fn_ + eps),
        spec: tn / (tn + fp + eps),
        dice: 2.0 * tp / (2.0 * tp + fp + fn_ + eps),
    }
}

/// Per-slice metrics averaged uniformly over the slices.
pub fn mean_slice_metrics(
    preds: &[Grid<f64>],
    targets: &[Grid<u8>],
    tau: f64,
    eps: f64,
    rule: EmptyRule,
) -> Result<HardMetrics> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no slices to evaluate".into()));
    }
    let mut acc = HardMetrics::default();
    for (p, t) in preds.iter().zip(targets) {
        let m = hard_metrics(&confusion(&binarize(p, tau), t)?, eps, rule);
        acc.sens += m.sens;
        acc.spec += m.spec;
        acc.dice += m.dice;
    }
    let n = preds.len() as f64;
    Ok(HardMetrics { sens: acc.sens / n, spec: acc.spec / n, dice: acc.dice / n })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Failed => "failed",
        }
    }
}

/// One row of the results table. Metrics are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: ExperimentKind,
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub weight_init: String,
    pub sens: f64,
    pub spec: f64,
    pub dice: f64,
    pub params_millions: f64,
    pub train_s_per_batch: f64,
    pub val_s_per_batch: f64,
    pub status: Status,
    /// Why the cell failed; not part of the CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricsRecord {
    pub fn failed(
        experiment: ExperimentKind,
        architecture: Architecture,
        encoder: EncoderKind,
        weight_init: &str,
        error: String,
    ) -> Self {
        Self {
            experiment,
            architecture,
            encoder,
            weight_init: weight_init.to_string(),
            sens: 0.0,
            spec: 0.0,
            dice: 0.0,
            params_millions: 0.0,
            train_s_per_batch: 0.0,
            val_s_per_batch: 0.0,
            status: Status::Failed,
            error: Some(error),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// CSV line (no trailing newline) matching [`METRICS_HEADER`]. Failed cells
    /// leave the numeric columns empty.
    pub fn csv_row(&self) -> String {
        let head = format!(
            "{},{},{},{}",
            self.experiment.slug(),
            self.architecture.name(),
            self.encoder.name(),
            self.weight_init
        );
        match self.status {
            Status::Ok => format!(
                "{head},{:.2},{:.2},{:.2},{:.4},{:.4},{:.4},ok",
                self.sens,
                self.spec,
                self.dice,
                self.params_millions,
                self.train_s_per_batch,
                self.val_s_per_batch
            ),
            Status::Failed => format!("{head},,,,,,,failed"),
        }
    }

    /// Inverse of [`csv_row`](Self::csv_row), up to the printed precision.
    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
        if f.len() != 11 {
            return Err(Error::Validation(format!("expected 11 columns, got {} in {line:?}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            if s.is_empty() {
                return Ok(0.0);
            }
            s.parse().map_err(|_| Error::Validation(format!("not a number: {s:?}")))
        };
        let status = match f[10] {
            "ok" => Status::Ok,
            "failed" => Status::Failed,
            other => return Err(Error::Validation(format!("unknown status {other:?}"))),
        };
        Ok(Self {
            experiment: f[0].parse()?,
            architecture: f[1].parse()?,
            encoder: f[2].parse()?,
            weight_init: f[3].to_string(),
            sens: num(f[4])?,
            spec: num(f[5])?,
            dice: num(f[6])?,
            params_millions: num(f[7])?,
            train_s_per_batch: num(f[8])?,
            val_s_per_batch: num(f[9])?,
            status,
            error: None,
        })
    }
}

/// The whole table, header first, newline-terminated.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Architecture,
    Encoder,
    Experiment,
    WeightInit,
}

impl GroupBy {
    pub const ALL: [GroupBy; 4] = [GroupBy::Architecture, GroupBy::Encoder, GroupBy::Experiment, GroupBy::WeightInit];

    pub fn key(self, r: &MetricsRecord) -> String {
        match self {
            GroupBy::Architecture => r.architecture.name().to_string(),
            GroupBy::Encoder => r.encoder.name().to_string(),
            GroupBy::Experiment => r.experiment.slug().to_string(),
            GroupBy::WeightInit => r.weight_init.clone(),
        }
    }
}

impl fmt::Display for GroupBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupBy::Architecture => "architecture",
            GroupBy::Encoder => "encoder",
            GroupBy::Experiment => "experiment",
            GroupBy::WeightInit => "weight_init",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
    };
    Ok(MeanStd { mean, std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group: String,
    pub n: usize,
    pub sens: MeanStd,
    pub spec: MeanStd,
    pub dice: MeanStd,
    /// Only one record: the std is a placeholder 0.
    pub single: bool,
}

/// Mean and sample std per group over the ok records, groups in order of first
/// appearance.
pub fn aggregate(records: &[MetricsRecord], group_by: GroupBy) -> Result<Vec<AggregateRow>> {
    let mut groups: Vec<(String, Vec<&MetricsRecord>)> = Vec::new();
    for r in records {
        let key = group_by.key(r);
        let pos = match groups.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                groups.push((key, Vec::new()));
                groups.len() - 1
            }
        };
        if r.is_ok() {
            groups[pos].1.push(r);
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput("no records to aggregate".into()));
    }
    groups
        .into_iter()
        .map(|(group, rs)| {
            if rs.is_empty() {
                return Err(Error::EmptyInput(format!("group {group:?} has no ok records")));
            }
            let col = |f: fn(&MetricsRecord) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            Ok(AggregateRow {
                n: rs.len(),
                single: rs.len() == 1,
                sens: col(|r| r.sens)?,
                spec: col(|r| r.spec)?,
                dice: col(|r| r.dice)?,
                group,
            })
        })
        .collect()
}

pub const AGGREGATE_HEADER: &str = "group_by,group,n,sens_mean,sens_std,spec_mean,spec_std,dice_mean,dice_std";

pub fn aggregate_csv(group_by: GroupBy, rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{group_by},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
            r.group, r.n, r.sens.mean, r.sens.std, r.spec.mean, r.spec.std, r.dice.mean, r.dice.std
        ));
    }
    out
}
