//! CSV tables and SVG figures.
//!
//! Files and column orders:
//!
//! | file | columns |
//! |---|---|
//! | `transfer_matrix.csv` | `target`, then one column per source domain (mean surface dice) |
//! | `transfer_matrix_std.csv` | same layout, standard deviations |
//! | `trend.csv` | `availability, method, mean_d_r, pairs, excluded` |
//! | `trend_pairs.csv` | `availability, method, source, target, d_r, surface_dice, seeds` |
//! | `winners.csv` | `availability, method, wins, significant_wins` |
//! | `sign_tests.csv` | `availability, source, target, winner, other, winner_wins, other_wins, n_effective, p_value, significant` |
//!
//! Numbers use six decimals; an undefined gap closure is an empty field.
//! `trend.svg` draws mean gap closure per level with per-pair points,
//! `winners.svg` stacks significant (solid) and other (pale) wins.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adaptation::AvailabilityLevel;
use crate::error::{Result, StudyError};
use crate::evaluation::{
    aggregate_trend, build_transfer_matrix, pair_winners, winner_counts, Method, PairWinner, ScoreRecord,
    TransferMatrix, TrendCell, WinnerRow, GAP_EPSILON,
};

pub const REPORT_FILES: [&str; 8] = [
    "transfer_matrix.csv",
    "transfer_matrix_std.csv",
    "trend.csv",
    "trend_pairs.csv",
    "winners.csv",
    "sign_tests.csv",
    "trend.svg",
    "winners.svg",
];

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| StudyError::format(path, e.to_string());
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| StudyError::format(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| StudyError::io(path, e))
}

pub fn matrix_rows(m: &TransferMatrix, std: bool) -> Vec<Vec<String>> {
    m.domains
        .iter()
        .map(|t| {
            let mut row = vec![t.clone()];
            for s in &m.domains {
                let c = m.get(t, s).expect("complete matrix");
                row.push(num(if std { c.std } else { c.mean }));
            }
            row
        })
        .collect()
}

/// Everything the report is computed from.
#[derive(Debug, Clone)]
pub struct Report {
    pub matrix: TransferMatrix,
    pub trend: Vec<TrendCell>,
    pub winners: Vec<WinnerRow>,
    pub pair_winners: Vec<PairWinner>,
}

impl Report {
    pub fn build(
        records: &[ScoreRecord],
        domains: &[String],
        levels: &[AvailabilityLevel],
        methods: &[Method],
    ) -> Result<Self> {
        Ok(Report {
            matrix: build_transfer_matrix(records, domains)?,
            trend: aggregate_trend(records, levels, methods, GAP_EPSILON)?,
            winners: winner_counts(records, levels, methods, GAP_EPSILON)?,
            pair_winners: pair_winners(records, levels, methods, GAP_EPSILON)?,
        })
    }

    /// Derives domains, levels and methods from the records themselves.
    pub fn from_records(records: &[ScoreRecord]) -> Result<Self> {
        let mut domains: Vec<String> = Vec::new();
        let mut levels: Vec<AvailabilityLevel> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for r in records {
            for d in [&r.source_domain, &r.target_domain] {
                if !domains.contains(d) {
                    domains.push(d.clone());
                }
            }
            if let Some(l) = r.availability {
                if !levels.contains(&l) {
                    levels.push(l);
                }
            }
            if r.method.strategy().is_some() && !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        domains.sort();
        methods.sort();
        if records.is_empty() {
            return Err(StudyError::invalid("no score records"));
        }
        Self::build(records, &domains, &levels, &methods)
    }

    /// Writes all report files into `dir` and returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| StudyError::io(dir, e))?;
        let mut header = vec!["target"];
        header.extend(self.matrix.domains.iter().map(String::as_str));
        write_csv(&dir.join("transfer_matrix.csv"), &header, &matrix_rows(&self.matrix, false))?;
        write_csv(&dir.join("transfer_matrix_std.csv"), &header, &matrix_rows(&self.matrix, true))?;

        let trend: Vec<Vec<String>> = self
            .trend
            .iter()
            .map(|c| {
                vec![
                    c.availability.to_string(),
                    c.method.to_string(),
                    opt(c.mean_d_r),
                    c.pairs.len().to_string(),
                    c.excluded.len().to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("trend.csv"),
            &["availability", "method", "mean_d_r", "pairs", "excluded"],
            &trend,
        )?;

        let mut pairs = Vec::new();
        for c in &self.trend {
            for p in &c.pairs {
                pairs.push(vec![
                    c.availability.to_string(),
                    c.method.to_string(),
                    p.source_domain.clone(),
                    p.target_domain.clone(),
                    opt(p.d_r),
                    num(p.d),
                    p.seeds.len().to_string(),
                ]);
            }
        }
        write_csv(
            &dir.join("trend_pairs.csv"),
            &["availability", "method", "source", "target", "d_r", "surface_dice", "seeds"],
            &pairs,
        )?;

        let winners: Vec<Vec<String>> = self
            .winners
            .iter()
            .map(|w| {
                vec![
                    w.availability.to_string(),
                    w.method.to_string(),
                    w.wins.to_string(),
                    w.significant_wins.to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("winners.csv"),
            &["availability", "method", "wins", "significant_wins"],
            &winners,
        )?;

        let mut tests = Vec::new();
        for w in &self.pair_winners {
            for (other, t) in &w.tests {
                tests.push(vec![
                    w.availability.to_string(),
                    w.source_domain.clone(),
                    w.target_domain.clone(),
                    w.winner.to_string(),
                    other.to_string(),
                    t.wins_a.to_string(),
                    t.wins_b.to_string(),
                    t.n_effective.to_string(),
                    num(t.p_value),
                    (t.winner == Some(layershift_core::Side::A) && t.significant()).to_string(),
                ]);
            }
        }
        write_csv(
            &dir.join("sign_tests.csv"),
            &[
                "availability",
                "source",
                "target",
                "winner",
                "other",
                "winner_wins",
                "other_wins",
                "n_effective",
                "p_value",
                "significant",
            ],
            &tests,
        )?;

        let trend_svg = dir.join("trend.svg");
        fs::write(&trend_svg, trend_svg_text(&self.trend)).map_err(|e| StudyError::io(&trend_svg, e))?;
        let win_svg = dir.join("winners.svg");
        fs::write(&win_svg, winners_svg_text(&self.winners)).map_err(|e| StudyError::io(&win_svg, e))?;
        Ok(REPORT_FILES.iter().map(|f| dir.join(f)).collect())
    }
}

fn color(m: Method) -> &'static str {
    match m {
        Method::AllLayers => "#1f77b4",
        Method::FirstLayers => "#d62728",
        Method::LastLayers => "#2ca02c",
        Method::Baseline => "#7f7f7f",
        Method::Oracle => "#000000",
    }
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn levels_of<T>(items: &[T], level: impl Fn(&T) -> AvailabilityLevel) -> Vec<AvailabilityLevel> {
    let mut out: Vec<AvailabilityLevel> = Vec::new();
    for i in items {
        let l = level(i);
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

fn methods_of<T>(items: &[T], method: impl Fn(&T) -> Method) -> Vec<Method> {
    let mut out: Vec<Method> = Vec::new();
    for i in items {
        let m = method(i);
        if !out.contains(&m) {
            out.push(m);
        }
    }
    out
}

fn svg_open(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
}

fn x_axis(s: &mut String, levels: &[AvailabilityLevel]) -> Vec<f64> {
    let plot_w = W - LEFT - RIGHT;
    let xs: Vec<f64> = (0..levels.len())
        .map(|i| LEFT + plot_w * (i as f64 + 0.5) / levels.len() as f64)
        .collect();
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = H - BOTTOM,
        x2 = W - RIGHT
    );
    for (x, l) in xs.iter().zip(levels) {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y}" text-anchor="middle">{l}</text>"#,
            y = H - BOTTOM + 18.0
        );
    }
    xs
}

fn legend(s: &mut String, methods: &[Method]) {
    for (i, m) in methods.iter().enumerate() {
        let y = TOP + 20.0 * i as f64;
        let x = W - RIGHT + 15.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{}"/>"#, color(*m));
        let _ = writeln!(s, r#"<text x="{}" y="{}">{m}</text>"#, x + 18.0, y + 10.0);
    }
}

pub fn trend_svg_text(trend: &[TrendCell]) -> String {
    let levels = levels_of(trend, |c| c.availability);
    let methods = methods_of(trend, |c| c.method);
    let values: Vec<f64> = trend.iter().flat_map(|c| c.pairs.iter().filter_map(|p| p.d_r)).collect();
    let lo = values.iter().copied().fold(0.0, f64::min).floor();
    let hi = values.iter().copied().fold(1.0, f64::max).ceil();
    let plot_h = H - TOP - BOTTOM;
    let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);
    let mut s = String::new();
    svg_open(&mut s, "Gap closure by availability level");
    let xs = x_axis(&mut s, &levels);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, H - BOTTOM);
    let mut t = lo;
    while t <= hi + 1e-9 {
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{yy:.1}" x2="{x2}" y2="{yy:.1}" stroke="#dddddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{t:.1}</text>"##,
            yy = y(t),
            x2 = W - RIGHT,
            tx = LEFT - 6.0,
            ty = y(t) + 4.0
        );
        t += 0.5;
    }
    let spread = 8.0;
    for (mi, m) in methods.iter().enumerate() {
        let offset = (mi as f64 - (methods.len() as f64 - 1.0) / 2.0) * spread;
        let mut line = Vec::new();
        for (li, l) in levels.iter().enumerate() {
            let Some(c) = trend.iter().find(|c| c.method == *m && c.availability == *l) else { continue };
            for p in c.pairs.iter().filter_map(|p| p.d_r) {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{}" fill-opacity="0.35"/>"#,
                    xs[li] + offset,
                    y(p),
                    color(*m)
                );
            }
            if let Some(v) = c.mean_d_r {
                line.push(format!("{:.1},{:.1}", xs[li] + offset, y(v)));
            }
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            line.join(" "),
            color(*m)
        );
    }
    legend(&mut s, &methods);
    s.push_str("</svg>\n");
    s
}

pub fn winners_svg_text(rows: &[WinnerRow]) -> String {
    let levels = levels_of(rows, |r| r.availability);
    let methods = methods_of(rows, |r| r.method);
    let total = levels
        .iter()
        .map(|l| rows.iter().filter(|r| r.availability == *l).map(|r| r.wins).sum::<usize>())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let plot_h = H - TOP - BOTTOM;
    let mut s = String::new();
    svg_open(&mut s, "Pairs won per availability level");
    let xs = x_axis(&mut s, &levels);
    let bar_w = (W - LEFT - RIGHT) / levels.len().max(1) as f64 * 0.6;
    for (li, l) in levels.iter().enumerate() {
        let mut base = H - BOTTOM;
        for m in &methods {
            let Some(r) = rows.iter().find(|r| r.method == *m && r.availability == *l) else { continue };
            for (n, opacity) in [(r.significant_wins, 1.0), (r.wins - r.significant_wins, 0.35)] {
                if n == 0 {
                    continue;
                }
                let h = plot_h * n as f64 / total;
                base -= h;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}" fill-opacity="{opacity}"/>"#,
                    xs[li] - bar_w / 2.0,
                    base,
                    bar_w,
                    h,
                    color(*m)
                );
            }
        }
    }
    legend(&mut s, &methods);
    s.push_str("</svg>\n");
    s
}
