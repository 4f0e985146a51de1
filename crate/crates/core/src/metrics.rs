//! ADD / ADD-S pose errors, threshold-accuracy curves and their AUC, and the
//! per-object evaluation report.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle_between, Pose};
use crate::objects::{ObjectModel, ObjectRegistry};

/// Default AUC cap for distance-valued curves, meters.
pub const DEFAULT_MAX_DISTANCE: f64 = 0.10;
/// Default AUC cap for rotation curves, radians.
pub const DEFAULT_MAX_ROTATION: f64 = std::f64::consts::FRAC_PI_2;
/// Default curve resolution.
pub const DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown object id `{0}`")]
    UnknownObject(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean distance between corresponding model points under the two poses.
pub fn add_metric(model: &ObjectModel, gt: &Pose, pred: &Pose) -> f64 {
    let (rg, rp) = (gt.rotation_matrix(), pred.rotation_matrix());
    let d = model
        .points()
        .iter()
        .map(|x| ((rp * x + pred.translation) - (rg * x + gt.translation)).norm());
    compensated_sum(d) / model.len() as f64
}

/// Mean distance from each predicted point to the closest ground-truth point.
/// Exact brute-force nearest neighbour.
pub fn add_s_metric(model: &ObjectModel, gt: &Pose, pred: &Pose) -> f64 {
    let pred_pts = transformed(model, pred);
    let gt_pts = transformed(model, gt);
    let d = pred_pts.iter().map(|p| nearest_squared(p, &gt_pts).sqrt());
    compensated_sum(d) / model.len() as f64
}

/// Neumaier summation, so a mean of identical distances returns that distance.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub(crate) fn transformed(model: &ObjectModel, pose: &Pose) -> Vec<Vector3<f64>> {
    let r = pose.rotation_matrix();
    model
        .points()
        .iter()
        .map(|x| r * x + pose.translation)
        .collect()
}

pub(crate) fn nearest_squared(p: &Vector3<f64>, set: &[Vector3<f64>]) -> f64 {
    set.iter()
        .map(|q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub add: f64,
    pub add_s: f64,
    /// Radians.
    pub rotation_error: f64,
    /// Euclidean distance between translations, meters.
    pub translation_error: f64,
}

pub fn pose_error(model: &ObjectModel, gt: &Pose, pred: &Pose) -> PoseError {
    PoseError {
        add: add_metric(model, gt, pred),
        add_s: add_s_metric(model, gt, pred),
        rotation_error: rotation_angle_between(gt.rotation, pred.rotation)
            .expect("poses hold unit quaternions"),
        translation_error: (pred.translation - gt.translation).norm(),
    }
}

/// Accuracy as a function of the error threshold, with its normalized area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc: f64,
}

/// Builds the accuracy curve on `steps` evenly spaced thresholds spanning
/// `[0, max_threshold]` and integrates it with the trapezoid rule.
///
/// A sample counts as correct at threshold `t` when its error is `<= t`, so a
/// set of exact predictions has AUC exactly 1.
pub fn accuracy_curve(
    errors: &[f64],
    max_threshold: f64,
    steps: usize,
) -> Result<AccuracyCurve, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::InvalidArgument("empty error list".into()));
    }
    if !(max_threshold > 0.0) || !max_threshold.is_finite() {
        return Err(MetricsError::InvalidArgument(format!(
            "max_threshold must be positive, got {max_threshold}"
        )));
    }
    if steps < 2 {
        return Err(MetricsError::InvalidArgument(format!(
            "need at least 2 steps, got {steps}"
        )));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(MetricsError::InvalidArgument("NaN error value".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let dt = max_threshold / (steps - 1) as f64;
    let thresholds: Vec<f64> = (0..steps)
        .map(|i| if i + 1 == steps { max_threshold } else { i as f64 * dt })
        .collect();
    let accuracy: Vec<f64> = thresholds
        .iter()
        .map(|t| sorted.partition_point(|e| e <= t) as f64 / n)
        .collect();
    let area: f64 = accuracy
        .windows(2)
        .zip(thresholds.windows(2))
        .map(|(a, t)| 0.5 * (a[0] + a[1]) * (t[1] - t[0]))
        .sum();
    Ok(AccuracyCurve {
        thresholds,
        accuracy,
        auc: (area / max_threshold).clamp(0.0, 1.0),
    })
}

/// Which error a curve is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Add,
    AddS,
    Rotation,
    Translation,
}

impl ErrorKind {
    pub fn default_max_threshold(self) -> f64 {
        match self {
            ErrorKind::Rotation => DEFAULT_MAX_ROTATION,
            _ => DEFAULT_MAX_DISTANCE,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            ErrorKind::Rotation => "rad",
            _ => "m",
        }
    }

    pub fn select(self, e: &PoseError) -> f64 {
        match self {
            ErrorKind::Add => e.add,
            ErrorKind::AddS => e.add_s,
            ErrorKind::Rotation => e.rotation_error,
            ErrorKind::Translation => e.translation_error,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Add => "add",
            ErrorKind::AddS => "add_s",
            ErrorKind::Rotation => "rotation",
            ErrorKind::Translation => "translation",
        }
    }
}

impl std::str::FromStr for ErrorKind {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, MetricsError> {
        match s {
            "add" => Ok(ErrorKind::Add),
            "add_s" | "add-s" => Ok(ErrorKind::AddS),
            "rotation" => Ok(ErrorKind::Rotation),
            "translation" => Ok(ErrorKind::Translation),
            other => Err(MetricsError::InvalidArgument(format!(
                "unknown curve kind `{other}` (expected add, add_s, rotation or translation)"
            ))),
        }
    }
}

/// One scored prediction: the interchange record between inference and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video: String,
    pub frame: usize,
    pub object: String,
    pub pred: Pose,
    pub gt: Pose,
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_predictions<R: BufRead>(r: R, origin: &str) -> Result<Vec<PredictionRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, MetricsError> {
    let f = std::fs::File::open(path)?;
    read_predictions(std::io::BufReader::new(f), &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_threshold: f64,
    pub steps: usize,
    /// Report ADD-S in the ADD column for symmetric objects (PoseCNN convention).
    pub symmetric_add_substitution: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_threshold: DEFAULT_MAX_DISTANCE,
            steps: DEFAULT_STEPS,
            symmetric_add_substitution: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub count: usize,
    /// AUC fractions in [0, 1]; `None` when the object has no predictions.
    pub add_auc: Option<f64>,
    pub add_s_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    /// Registry order.
    pub rows: Vec<ReportRow>,
    /// Pooled over every prediction (count-weighted).
    pub all: ReportRow,
}

/// Per-record errors, in input order.
pub fn score_records(
    records: &[PredictionRecord],
    registry: &ObjectRegistry,
) -> Result<Vec<PoseError>, MetricsError> {
    records
        .iter()
        .map(|r| {
            let model = registry
                .get(&r.object)
                .ok_or_else(|| MetricsError::UnknownObject(r.object.clone()))?;
            Ok(pose_error(model, &r.gt, &r.pred))
        })
        .collect()
}

/// Per-object and pooled ADD / ADD-S AUC.
pub fn evaluate_dataset(
    records: &[PredictionRecord],
    registry: &ObjectRegistry,
    cfg: &EvalConfig,
) -> Result<DatasetReport, MetricsError> {
    let errors = score_records(records, registry)?;
    evaluate_scored(records, &errors, registry, cfg)
}

pub fn evaluate_scored(
    records: &[PredictionRecord],
    errors: &[PoseError],
    registry: &ObjectRegistry,
    cfg: &EvalConfig,
) -> Result<DatasetReport, MetricsError> {
    let n = registry.len();
    let mut add: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut add_s: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (r, e) in records.iter().zip(errors) {
        let class = registry
            .class_index(&r.object)
            .ok_or_else(|| MetricsError::UnknownObject(r.object.clone()))?;
        let symmetric = registry.by_index(class).map(|m| m.symmetric()).unwrap_or(false);
        let add_value = if cfg.symmetric_add_substitution && symmetric {
            e.add_s
        } else {
            e.add
        };
        add[class].push(add_value);
        add_s[class].push(e.add_s);
    }
    let auc = |v: &[f64]| -> Result<Option<f64>, MetricsError> {
        if v.is_empty() {
            Ok(None)
        } else {
            Ok(Some(accuracy_curve(v, cfg.max_threshold, cfg.steps)?.auc))
        }
    };
    let mut rows = Vec::with_capacity(n);
    for (class, model) in registry.iter().enumerate() {
        rows.push(ReportRow {
            id: model.id().to_string(),
            count: add[class].len(),
            add_auc: auc(&add[class])?,
            add_s_auc: auc(&add_s[class])?,
        });
    }
    let pooled_add: Vec<f64> = add.concat();
    let pooled_add_s: Vec<f64> = add_s.concat();
    let all = ReportRow {
        id: "ALL".into(),
        count: pooled_add.len(),
        add_auc: auc(&pooled_add)?,
        add_s_auc: auc(&pooled_add_s)?,
    };
    Ok(DatasetReport { rows, all })
}

impl DatasetReport {
    /// Human-readable table with percentages, ALL last.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.id.len())
            .chain([3, 6])
            .max()
            .unwrap_or(6);
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>6}", "object", "count", "ADD", "ADD-S");
        for r in self.rows.iter().chain(std::iter::once(&self.all)) {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6}  {:>6}  {:>6}",
                r.id,
                r.count,
                pct(r.add_auc),
                pct(r.add_s_auc)
            );
        }
        s
    }
}

/// Per-object curves for one error kind, followed by the pooled curve (id "ALL").
pub fn curves_by_object(
    records: &[PredictionRecord],
    registry: &ObjectRegistry,
    kind: ErrorKind,
    max_threshold: f64,
    steps: usize,
) -> Result<Vec<(String, AccuracyCurve)>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::InvalidArgument("no predictions".into()));
    }
    let errors = score_records(records, registry)?;
    let mut out = Vec::new();
    for model in registry.iter() {
        let v: Vec<f64> = records
            .iter()
            .zip(&errors)
            .filter(|(r, _)| r.object == model.id())
            .map(|(_, e)| kind.select(e))
            .collect();
        if !v.is_empty() {
            out.push((model.id().to_string(), accuracy_curve(&v, max_threshold, steps)?));
        }
    }
    let pooled: Vec<f64> = errors.iter().map(|e| kind.select(e)).collect();
    out.push(("ALL".into(), accuracy_curve(&pooled, max_threshold, steps)?));
    Ok(out)
}
