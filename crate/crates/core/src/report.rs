//! Learning-curve artifacts for a run directory: the per-episode CSV with a
//! trailing moving average and an SVG plot with handover markers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dsppo::{EpisodeRow, EPISODE_HEADER};
use crate::error::Result;
use crate::io::{write_atomic, write_csv_atomic};

pub const SMOOTHING_WINDOW: usize = 10;

pub const CURVE_HEADER: [&str; 4] = ["episode", "mean_rate", "moving_average", "handover"];

/// Trailing mean over up to `window` episodes ending at each index.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Reads `episodic_rate.csv`; a missing file reads as no episodes.
pub fn read_episode_rows(dir: &Path) -> Result<Vec<EpisodeRow>> {
    let path = dir.join("episodic_rate.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Files written by [`emit_curves`].
#[derive(Debug, Clone)]
pub struct CurveFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub episodes: usize,
}

/// Writes `learning_curve.csv` and `learning_curve.svg` next to the run's
/// `episodic_rate.csv`. Works on in-progress runs; an empty run yields
/// header-only files.
pub fn emit_curves(dir: &Path) -> Result<CurveFiles> {
    let rows = read_episode_rows(dir)?;
    if !dir.join("episodic_rate.csv").exists() {
        write_csv_atomic(&dir.join("episodic_rate.csv"), &EPISODE_HEADER, std::iter::empty::<[String; 4]>())?;
    }
    let rates: Vec<f64> = rows.iter().map(|r| r.mean_rate).collect();
    let smooth = moving_average(&rates, SMOOTHING_WINDOW);
    let csv_path = dir.join("learning_curve.csv");
    let csv_rows = rows.iter().zip(&smooth).map(|(r, s)| {
        [r.episode.to_string(), format!("{}", r.mean_rate), format!("{s}"), (r.handover_count > 0).to_string()]
    });
    write_csv_atomic(&csv_path, &CURVE_HEADER, csv_rows)?;
    let svg_path = dir.join("learning_curve.svg");
    write_atomic(&svg_path, render_svg(&rows, &smooth).as_bytes())?;
    Ok(CurveFiles { csv: csv_path, svg: svg_path, episodes: rows.len() })
}

const W: f64 = 800.0;
const H: f64 = 450.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 30.0;
const PAD_B: f64 = 50.0;

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Episode index against average episodic rate (Mbps); dashed verticals mark
/// episodes that contained a cluster handover.
pub fn render_svg(rows: &[EpisodeRow], smooth: &[f64]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (PAD_L, W - PAD_R, H - PAD_B, PAD_T);
    let _ = writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">Episode</text>"#,
        (x0 + x1) / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 18 {})">Average episodic rate (Mbps)</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    if rows.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let n = rows.len();
    let (lo, hi) =
        rows.iter().map(|r| r.mean_rate).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let step = nice_step((hi - lo).max(1.0));
    let ymin = (lo / step).floor() * step;
    let ymax = ((hi / step).ceil() * step).max(ymin + step);
    let xs = |i: usize| if n == 1 { (x0 + x1) / 2.0 } else { x0 + (x1 - x0) * i as f64 / (n - 1) as f64 };
    let ys = |v: f64| y0 - (y0 - y1) * (v - ymin) / (ymax - ymin);

    let mut tick = ymin;
    while tick <= ymax + 1e-9 {
        let y = ys(tick);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#e0e0e0"/>"##);
        let _ =
            writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{tick}</text>"#, x0 - 6.0, y + 4.0);
        tick += step;
    }
    let xstep = nice_step(n.max(2) as f64 - 1.0).max(1.0);
    let mut xt = 0.0;
    while xt <= (n - 1) as f64 + 1e-9 {
        let x = xs(xt as usize);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            y0 + 16.0,
            rows[xt as usize].episode
        );
        xt += xstep;
    }
    for (i, r) in rows.iter().enumerate().filter(|(_, r)| r.handover_count > 0) {
        let x = xs(i);
        let _ = writeln!(
            s,
            r##"<line class="handover" data-episode="{}" x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{y0}" stroke="#d62728" stroke-dasharray="4,3"/>"##,
            r.episode
        );
    }
    let poly = |vals: &mut dyn Iterator<Item = f64>| -> String {
        vals.enumerate().map(|(i, v)| format!("{:.2},{:.2}", xs(i), ys(v))).collect::<Vec<_>>().join(" ")
    };
    let raw = poly(&mut rows.iter().map(|r| r.mean_rate));
    let avg = poly(&mut smooth.iter().copied());
    let _ = writeln!(s, r##"<polyline points="{raw}" fill="none" stroke="#9ecae1" stroke-width="1"/>"##);
    let _ = writeln!(s, r##"<polyline points="{avg}" fill="none" stroke="#08519c" stroke-width="2"/>"##);
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" text-anchor="end" font-size="11" fill="#08519c">{SMOOTHING_WINDOW}-episode moving average</text>"##,
        x1,
        y1 - 10.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_is_trailing() {
        let m = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(m, vec![1.0, 1.5, 2.5, 3.5]);
        assert_eq!(moving_average(&[], 10), Vec::<f64>::new());
    }

    #[test]
    fn empty_run_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let f = emit_curves(dir.path()).unwrap();
        assert_eq!(f.episodes, 0);
        assert_eq!(std::fs::read_to_string(&f.csv).unwrap(), "episode,mean_rate,moving_average,handover\n");
        assert_eq!(
            std::fs::read_to_string(dir.path().join("episodic_rate.csv")).unwrap(),
            "episode,mean_rate,std_rate,handover_count\n"
        );
        assert!(std::fs::read_to_string(&f.svg).unwrap().ends_with("</svg>\n"));
    }

    #[test]
    fn markers_follow_handover_counts() {
        let rows: Vec<EpisodeRow> = (0..12)
            .map(|i| EpisodeRow {
                episode: i,
                mean_rate: 100.0 + i as f64,
                std_rate: 1.0,
                handover_count: usize::from(i % 5 == 3),
            })
            .collect();
        let svg = render_svg(&rows, &moving_average(&rows.iter().map(|r| r.mean_rate).collect::<Vec<_>>(), 10));
        assert_eq!(svg.matches(r#"class="handover""#).count(), 2);
        assert!(svg.contains(r#"data-episode="3""#) && svg.contains(r#"data-episode="8""#));
    }
}
