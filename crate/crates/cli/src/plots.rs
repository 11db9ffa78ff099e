//! SVG plots. Each plot is drawn from the rows of its companion CSV, so it
//! can be re-rendered from the CSV alone.

use std::fmt::Write as _;

use milda::trainer::{Phase, TrainingHistory};
use serde::{Deserialize, Serialize};

/// One adaptation round of the pseudo-label trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPlotRow {
    pub round: usize,
    pub tau: Option<usize>,
    pub pseudo_positive: usize,
    pub pseudo_negative: usize,
    pub negative_bag_samples: usize,
    pub precision: Option<f64>,
    pub target_pr_auc: Option<f64>,
}

impl LabelPlotRow {
    pub fn labeled(&self) -> usize {
        self.pseudo_positive + self.pseudo_negative
    }
}

pub fn label_plot_rows(history: &TrainingHistory) -> Vec<LabelPlotRow> {
    history
        .records
        .iter()
        .filter(|r| r.phase == Some(Phase::Adapt))
        .enumerate()
        .map(|(round, r)| LabelPlotRow {
            round,
            tau: r.tau,
            pseudo_positive: r.pseudo_positive,
            pseudo_negative: r.pseudo_negative,
            negative_bag_samples: r.negative_bag_samples,
            precision: r.pseudo_label_precision,
            target_pr_auc: r.target_pr_auc,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMapPoint {
    pub bag_id: u64,
    pub index_in_bag: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub oracle_label: Option<u8>,
}

const W: f64 = 640.0;
const H: f64 = 260.0;
const PAD: f64 = 40.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    top: f64,
    height: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x1 - self.x0).max(1e-12);
        PAD + (x - self.x0) / span * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y1 - self.y0).max(1e-12);
        self.top + self.height - (y - self.y0) / span * self.height
    }

    fn axes(&self, s: &mut String, title: &str) {
        let _ = writeln!(
            s,
            r#"<rect x="{PAD}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            self.top,
            W - 2.0 * PAD,
            self.height
        );
        let _ = writeln!(s, r#"<text x="{PAD}" y="{:.1}" font-size="12">{title}</text>"#, self.top - 6.0);
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.1}" font-size="10">{}</text><text x="4" y="{:.1}" font-size="10">{}</text>"#,
            self.top + 10.0,
            fmt_tick(self.y1),
            self.top + self.height,
            fmt_tick(self.y0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{PAD}" y="{:.1}" font-size="10">{}</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
            self.top + self.height + 12.0,
            fmt_tick(self.x0),
            W - PAD,
            self.top + self.height + 12.0,
            fmt_tick(self.x1)
        );
    }

    fn polyline(&self, s: &mut String, pts: &[(f64, f64)], color: &str) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), self.py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(s: &mut String, x: f64, y: f64, items: &[(&str, &str)]) {
    for (i, (name, color)) in items.iter().enumerate() {
        let yy = y + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{yy}" x2="{:.1}" y2="{yy}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="10">{name}</text>"#,
            x + 16.0,
            x + 20.0,
            yy + 3.0
        );
    }
}

/// Two panels: labeled counts per round, then precision and PR-AUC.
pub fn label_plot_svg(rows: &[LabelPlotRow], title: &str) -> String {
    let total_h = 2.0 * H + 3.0 * PAD;
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{total_h}" font-family="sans-serif">"#
    );
    s.push('\n');
    let rounds = rows.len().saturating_sub(1).max(1) as f64;
    let max_count = rows.iter().map(|r| r.labeled()).max().unwrap_or(0).max(1) as f64;
    let counts = Frame {
        x0: 0.0,
        x1: rounds,
        y0: 0.0,
        y1: max_count,
        top: PAD,
        height: H,
    };
    counts.axes(&mut s, &format!("{title}: pseudo-labels per round"));
    let series = |f: &dyn Fn(&LabelPlotRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|v| (r.round as f64, v))).collect()
    };
    counts.polyline(&mut s, &series(&|r| Some(r.labeled() as f64)), "black");
    counts.polyline(&mut s, &series(&|r| Some(r.pseudo_positive as f64)), "crimson");
    counts.polyline(&mut s, &series(&|r| Some(r.pseudo_negative as f64)), "steelblue");
    legend(
        &mut s,
        PAD + 8.0,
        PAD + 12.0,
        &[("labeled", "black"), ("positive", "crimson"), ("negative", "steelblue")],
    );

    let quality = Frame {
        x0: 0.0,
        x1: rounds,
        y0: 0.0,
        y1: 1.0,
        top: 2.0 * PAD + H,
        height: H,
    };
    quality.axes(&mut s, "precision and target PR-AUC");
    quality.polyline(&mut s, &series(&|r| r.precision), "darkorange");
    quality.polyline(&mut s, &series(&|r| r.target_pr_auc), "seagreen");
    legend(
        &mut s,
        PAD + 8.0,
        quality.top + 12.0 + H - 40.0,
        &[("precision", "darkorange"), ("PR-AUC", "seagreen")],
    );
    s.push_str("</svg>\n");
    s
}

/// Scatter of projected test instances shaded by score; oracle positives
/// get a dark outline.
pub fn score_map_svg(points: &[ScoreMapPoint], title: &str) -> String {
    let size = W - 2.0 * PAD;
    let total = size + 2.0 * PAD;
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" font-family="sans-serif">"#
    );
    s.push('\n');
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    if points.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let frame = Frame {
        x0,
        x1,
        y0,
        y1,
        top: PAD,
        height: size,
    };
    frame.axes(&mut s, &format!("{title}: target test scores"));
    for p in points {
        let v = p.score.clamp(0.0, 1.0);
        let r = (255.0 * v).round() as u8;
        let b = (255.0 * (1.0 - v)).round() as u8;
        let stroke = if p.oracle_label == Some(1) { r#" stroke="black" stroke-width="0.8""# } else { "" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="rgb({r},40,{b})" fill-opacity="0.8"{stroke}/>"#,
            frame.px(p.x),
            frame.py(p.y)
        );
    }
    s.push_str("</svg>\n");
    s
}
