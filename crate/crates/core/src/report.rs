//! Rendering of benchmark reports: markdown tables in the standard results
//! layout, ROC points and small static SVG plots.

use std::fmt::Write;

use crate::harness::{ClassificationReport, MetricSummary, RegressionReport};

const PALETTE: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

/// Strategy rows by follow-up columns, `mean ± std` across folds. The lowest
/// mean in each column is bold.
pub fn regression_table(report: &RegressionReport) -> String {
    let t = report.num_follow_ups;
    let mut out = String::new();
    out.push_str("| Method |");
    for k in 1..=t {
        let _ = write!(out, " t{k} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(t));
    out.push('\n');
    let best: Vec<Option<usize>> = (0..t)
        .map(|k| rank_order(report.arms.iter().map(|a| Some(a.mean[k])), false).first().copied())
        .collect();
    for (i, arm) in report.arms.iter().enumerate() {
        let _ = write!(out, "| {} |", arm.strategy.display_name());
        for k in 0..t {
            let cell = format!("{:.3} ± {:.4}", arm.mean[k], arm.std[k]);
            if best[k] == Some(i) {
                let _ = write!(out, " **{cell}** |");
            } else {
                let _ = write!(out, " {cell} |");
            }
        }
        out.push('\n');
    }
    out
}

/// Accuracy, sensitivity, specificity and AUC per strategy, averaged over
/// folds. Best is bold, second best underlined.
pub fn classification_table(report: &ClassificationReport) -> String {
    let mut out = String::from("| Method | Accuracy | Sensitivity | Specificity | AUC |\n|---|---|---|---|---|\n");
    let columns: [fn(&crate::harness::ClassificationArmReport) -> &MetricSummary; 4] = [
        |a| &a.accuracy,
        |a| &a.sensitivity,
        |a| &a.specificity,
        |a| &a.auc,
    ];
    let ranks: Vec<Vec<usize>> = columns
        .iter()
        .map(|col| rank_order(report.arms.iter().map(|a| col(a).mean.map(round2)), true))
        .collect();
    for (i, arm) in report.arms.iter().enumerate() {
        let _ = write!(out, "| {} |", arm.strategy.display_name());
        for (c, col) in columns.iter().enumerate() {
            let cell = match col(arm).mean {
                Some(v) => format!("{}", round2(v)),
                None => "n/a".to_string(),
            };
            let first = ranks[c].first() == Some(&i);
            let second = ranks[c].get(1) == Some(&i);
            if first {
                let _ = write!(out, " **{cell}** |");
            } else if second {
                let _ = write!(out, " <u>{cell}</u> |");
            } else {
                let _ = write!(out, " {cell} |");
            }
        }
        out.push('\n');
    }
    out
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Indices of the defined values, best first. Ranking stops at the first
/// tie.
fn rank_order(values: impl Iterator<Item = Option<f64>>, higher_is_better: bool) -> Vec<usize> {
    let vals: Vec<(usize, f64)> = values.enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
    let mut distinct: Vec<f64> = vals.iter().map(|&(_, v)| v).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if higher_is_better {
        distinct.reverse();
    }
    let mut out = Vec::new();
    for d in distinct {
        let holders: Vec<usize> = vals.iter().filter(|&&(_, v)| v == d).map(|&(i, _)| i).collect();
        if holders.len() != 1 {
            break;
        }
        out.push(holders[0]);
    }
    out
}

/// ROC points `(fpr, tpr)` from `(score, is_positive)` pairs, starting at
/// `(0, 0)` and ending at `(1, 1)`. Tied scores form one diagonal step.
/// Returns `None` unless both classes are present.
pub fn roc_curve(scores: &[(f64, bool)]) -> Option<Vec<(f64, f64)>> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Some(points)
}

/// Trapezoidal area under a ROC polyline.
pub fn roc_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

fn svg_open(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

fn legend(out: &mut String, x: f64, y: f64, names: &[&str]) {
    for (k, name) in names.iter().enumerate() {
        let yy = y + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            yy - 9.0,
            PALETTE[k % PALETTE.len()],
            x + 14.0,
            yy
        );
    }
}

/// Grouped bar chart of per-fold test MAE at one follow-up (0-based).
pub fn regression_fold_bars_svg(report: &RegressionReport, follow_up: usize) -> String {
    let folds = report.arms.first().map_or(0, |a| a.fold_mae.len());
    let arms = report.arms.len().max(1);
    let (w, h) = (120.0 + 90.0 * folds as f64 + 170.0, 300.0);
    let (left, top, plot_h) = (60.0, 30.0, 220.0);
    let max = report
        .arms
        .iter()
        .flat_map(|a| a.fold_mae.iter().map(|f| f[follow_up]))
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let mut out = String::new();
    svg_open(&mut out, w, h);
    let _ = writeln!(out, r#"<text x="{left}" y="18">Test MAE per fold, t{}</text>"#, follow_up + 1);
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        left + 90.0 * folds as f64,
        top + plot_h
    );
    let _ = writeln!(out, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + plot_h);
    for tick in 0..=4 {
        let v = max * tick as f64 / 4.0;
        let y = top + plot_h - plot_h * tick as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            left - 4.0,
            y + 4.0
        );
    }
    let bar_w = 70.0 / arms as f64;
    for f in 0..folds {
        let x0 = left + 10.0 + 90.0 * f as f64;
        for (a, arm) in report.arms.iter().enumerate() {
            let v = arm.fold_mae[f][follow_up];
            let bh = plot_h * v / max;
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar_w:.1}" height="{bh:.1}" fill="{}"/>"#,
                x0 + bar_w * a as f64,
                top + plot_h - bh,
                PALETTE[a % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">fold {}</text>"#,
            x0 + 35.0,
            top + plot_h + 16.0,
            f + 1
        );
    }
    let names: Vec<&str> = report.arms.iter().map(|a| a.strategy.display_name()).collect();
    legend(&mut out, left + 90.0 * folds as f64 + 20.0, top + 10.0, &names);
    out.push_str("</svg>\n");
    out
}

/// ROC curves of every arm from the pooled test scores.
pub fn classification_roc_svg(report: &ClassificationReport) -> String {
    let (size, left, top) = (240.0, 50.0, 30.0);
    let mut out = String::new();
    svg_open(&mut out, left + size + 200.0, top + size + 50.0);
    let _ = writeln!(out, r#"<text x="{left}" y="18">ROC, positive class {}</text>"#, report.config.positive_class);
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r##"<line x1="{left}" y1="{}" x2="{}" y2="{top}" stroke="#999" stroke-dasharray="4 3"/>"##,
        top + size,
        left + size
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">false positive rate</text>"#,
        left + size / 2.0,
        top + size + 30.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">true positive rate</text>"#,
        top + size / 2.0,
        top + size / 2.0
    );
    let mut names = Vec::new();
    for (a, arm) in report.arms.iter().enumerate() {
        let Some(points) = roc_curve(&arm.pooled_scores) else {
            names.push(format!("{} (n/a)", arm.strategy.display_name()));
            continue;
        };
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", left + size * x, top + size * (1.0 - y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            path.join(" "),
            PALETTE[a % PALETTE.len()]
        );
        names.push(format!("{} ({:.2})", arm.strategy.display_name(), roc_area(&points)));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    legend(&mut out, left + size + 20.0, top + 10.0, &refs);
    out.push_str("</svg>\n");
    out
}
