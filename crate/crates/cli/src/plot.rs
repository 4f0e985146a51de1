//! Accuracy-vs-threshold curves as SVG plus a JSON copy for diffing.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use videopose_core::metrics::{curves_by_object, load_predictions, AccuracyCurve, ErrorKind};

use crate::{io_err, open_dataset, write_json, CliError, CliResult};

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Predictions file written by `eval`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset holding the object models the predictions refer to.
    #[arg(long)]
    pub data: PathBuf,
    /// add, add_s, rotation or translation.
    #[arg(long, default_value = "add_s")]
    pub kind: String,
    /// Upper end of the threshold axis; defaults to 0.1 m or π/2 rad.
    #[arg(long)]
    pub max: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// SVG path; the curves also go to the same path with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub kind: ErrorKind,
    pub unit: String,
    pub max_threshold: f64,
    /// One entry per object in registry order, then `ALL`.
    pub curves: Vec<NamedCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCurve {
    pub id: String,
    #[serde(flatten)]
    pub curve: AccuracyCurve,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub fn render_svg(set: &CurveSet) -> String {
    let (w, h, left, top, pw, ph) = (640.0, 420.0, 60.0, 20.0, 400.0, 340.0);
    let x = |t: f64| left + pw * t / set.max_threshold;
    let y = |a: f64| top + ph * (1.0 - a);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, x(f * set.max_threshold), top + ph + 16.0, f * set.max_threshold);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.1}</text>"#, left - 6.0, y(f) + 4.0, f);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{} threshold ({})</text>"#,
        left + pw / 2.0,
        h - 8.0,
        set.kind.name(),
        set.unit
    );
    for (i, c) in set.curves.iter().enumerate() {
        let color = if c.id == "ALL" { "black" } else { PALETTE[i % PALETTE.len()] };
        let mut pts = String::new();
        // Steps are drawn explicitly so a perfect curve shows its jump at 0.
        let mut prev = None;
        for (&t, &a) in c.curve.thresholds.iter().zip(&c.curve.accuracy) {
            if let Some(pa) = prev {
                let _ = write!(pts, "{:.2},{:.2} ", x(t), y(pa));
            } else {
                let _ = write!(pts, "{:.2},{:.2} ", x(t), y(0.0));
            }
            let _ = write!(pts, "{:.2},{:.2} ", x(t), y(a));
            prev = Some(a);
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.trim_end());
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{} AUC {:.2}</text>"#,
            left + pw + 12.0,
            top + 14.0 + 16.0 * i as f64,
            c.id,
            100.0 * c.curve.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_plot(args: &PlotArgs) -> CliResult<CurveSet> {
    let kind: ErrorKind = args.kind.parse().map_err(|e: videopose_core::metrics::MetricsError| CliError::Usage(e.to_string()))?;
    let max = args.max.unwrap_or(kind.default_max_threshold());
    if !(max > 0.0 && max.is_finite()) || args.steps < 2 {
        return Err(CliError::Usage("--max must be positive and --steps at least 2".into()));
    }
    let dataset = open_dataset(&args.data)?;
    let records = load_predictions(&args.predictions)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no predictions", args.predictions.display())));
    }
    let curves = curves_by_object(&records, &dataset.registry, kind, max, args.steps)?;
    let set = CurveSet {
        kind,
        unit: kind.unit().into(),
        max_threshold: max,
        curves: curves.into_iter().map(|(id, curve)| NamedCurve { id, curve }).collect(),
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&args.out, render_svg(&set)).map_err(io_err(&args.out))?;
    write_json(&args.out.with_extension("json"), &set)?;
    for c in &set.curves {
        println!("{:<16} {} AUC {:.2}", c.id, kind.name(), 100.0 * c.curve.auc);
    }
    Ok(set)
}
