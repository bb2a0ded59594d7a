//! Candidate-level FROC analysis and report emission.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// False-positive rates averaged by the CPM summary.
pub const CPM_FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

pub const SCORES_HEADER: [&str; 4] = ["candidate_id", "scan_id", "label", "score"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate_id: u64,
    pub scan_id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrocPoint {
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    /// Ascending in `fp_per_scan`, one point per distinct value.
    pub points: Vec<FrocPoint>,
    pub num_scans: usize,
    pub num_positives: usize,
}

/// Sweeps every distinct score as a threshold (rule `score >= t`), highest first.
pub fn compute_froc(scored: &[ScoredCandidate]) -> Result<FrocCurve> {
    if let Some(c) = scored.iter().find(|c| !(0.0..=1.0).contains(&c.score)) {
        return Err(Error::Config(format!(
            "candidate {} score {} outside [0, 1]",
            c.candidate_id, c.score
        )));
    }
    let num_positives = scored.iter().filter(|c| c.label == 1).count();
    if num_positives == 0 {
        return Err(Error::Empty("no positive candidates, sensitivity is undefined".into()));
    }
    let num_scans = scored.iter().map(|c| c.scan_id.as_str()).collect::<BTreeSet<_>>().len();

    let mut order: Vec<&ScoredCandidate> = scored.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points: Vec<FrocPoint> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].score;
        while i < order.len() && order[i].score == t {
            if order[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let point = FrocPoint {
            fp_per_scan: fp as f64 / num_scans as f64,
            sensitivity: tp as f64 / num_positives as f64,
        };
        // the sweep is monotone in both coordinates, so the newest point at a
        // given fp rate carries its highest sensitivity
        match points.last_mut() {
            Some(last) if last.fp_per_scan == point.fp_per_scan => *last = point,
            _ => points.push(point),
        }
    }
    Ok(FrocCurve {
        points,
        num_scans,
        num_positives,
    })
}

/// Step-function reading: best sensitivity among points with `fp_per_scan <= f`, else 0.
pub fn sensitivity_at(curve: &FrocCurve, targets: &[f64]) -> Vec<f64> {
    targets
        .iter()
        .map(|&f| {
            curve
                .points
                .iter()
                .filter(|p| p.fp_per_scan <= f)
                .map(|p| p.sensitivity)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Mean sensitivity over [`CPM_FP_RATES`].
pub fn cpm(curve: &FrocCurve) -> f64 {
    sensitivity_at(curve, &CPM_FP_RATES).iter().sum::<f64>() / CPM_FP_RATES.len() as f64
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredCandidate>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(SCORES_HEADER) {
        return Err(parse_err(1, format!("expected header {}", SCORES_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rows.enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        if row.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, got {}", row.len())));
        }
        let label: u8 = row[2].parse().map_err(|_| parse_err(line, format!("bad label `{}`", &row[2])))?;
        if label > 1 {
            return Err(parse_err(line, format!("label {label} is not 0 or 1")));
        }
        out.push(ScoredCandidate {
            candidate_id: row[0].parse().map_err(|_| parse_err(line, format!("bad candidate_id `{}`", &row[0])))?,
            scan_id: row[1].to_string(),
            label,
            score: row[3].parse().map_err(|_| parse_err(line, format!("bad score `{}`", &row[3])))?,
        });
    }
    Ok(out)
}

pub fn write_scores(scored: &[ScoredCandidate], path: &Path) -> Result<()> {
    let mut out = SCORES_HEADER.join(",");
    out.push('\n');
    for c in scored {
        let _ = writeln!(out, "{},{},{},{}", c.candidate_id, c.scan_id, c.label, c.score);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
/// Points left of this rate are drawn on the axis edge.
const FP_AXIS_MIN: f64 = 1.0 / 16.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Writes `froc.csv` and `froc.svg` into `out_dir`.
pub fn emit_report(curves: &[(String, FrocCurve)], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::from("name,fp_per_scan,sensitivity\n");
    for (name, curve) in curves {
        for p in &curve.points {
            let _ = writeln!(csv, "{name},{},{}", p.fp_per_scan, p.sensitivity);
        }
    }
    let csv_path = out_dir.join("froc.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let svg_path = out_dir.join("froc.svg");
    std::fs::write(&svg_path, render_svg(curves)).map_err(|e| Error::io(&svg_path, e))
}

fn render_svg(curves: &[(String, FrocCurve)]) -> String {
    let max_fp = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.fp_per_scan))
        .fold(8.0, f64::max);
    let fp_axis_max = 2f64.powi(max_fp.log2().ceil() as i32);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let (lo, hi) = (FP_AXIS_MIN.log2(), fp_axis_max.log2());
    let x = |fp: f64| MARGIN_LEFT + (fp.max(FP_AXIS_MIN).log2() - lo) / (hi - lo) * plot_w;
    let y = |s: f64| MARGIN_TOP + (1.0 - s) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="600" viewBox="0 0 800 600" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="800" height="600" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="400" y="24" text-anchor="middle" font-size="15">FROC (candidate-level)</text>"#
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    );
    let mut e = lo as i32;
    while e <= hi as i32 {
        let fp = 2f64.powi(e);
        let px = x(fp);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{MARGIN_TOP}" x2="{px:.2}" y2="{:.2}" stroke="#ddd"/>"##,
            MARGIN_TOP + plot_h
        );
        let label = if e < 0 { format!("1/{}", 1u64 << -e) } else { format!("{}", 1u64 << e) };
        let _ = writeln!(
            svg,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
            MARGIN_TOP + plot_h + 18.0
        );
        e += 1;
    }
    for i in 0..=10 {
        let s = f64::from(i) / 10.0;
        let py = y(s);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#eee"/>"##,
            MARGIN_LEFT + plot_w
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{s:.1}</text>"#,
            MARGIN_LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Average false positives per scan</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">Sensitivity</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    for (k, (name, curve)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts = String::new();
        let mut prev: Option<FrocPoint> = None;
        for p in &curve.points {
            if let Some(q) = prev {
                let _ = write!(pts, "{:.2},{:.2} ", x(p.fp_per_scan), y(q.sensitivity));
            }
            let _ = write!(pts, "{:.2},{:.2} ", x(p.fp_per_scan), y(p.sensitivity));
            prev = Some(*p);
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.trim_end()
        );
        let ly = MARGIN_TOP + plot_h - 20.0 - 20.0 * (curves.len() - 1 - k) as f64;
        let lx = MARGIN_LEFT + plot_w - 220.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 30.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 38.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: u64, scan: &str, label: u8, score: f64) -> ScoredCandidate {
        ScoredCandidate {
            candidate_id: id,
            scan_id: scan.into(),
            label,
            score,
        }
    }

    fn pt(fp_per_scan: f64, sensitivity: f64) -> FrocPoint {
        FrocPoint { fp_per_scan, sensitivity }
    }

    #[test]
    fn perfect_separation_reaches_full_sensitivity_at_zero_fp() {
        let c = compute_froc(&[cand(0, "a", 1, 1.0), cand(1, "a", 0, 0.0), cand(2, "b", 0, 0.0)]).unwrap();
        assert!(c.points.contains(&pt(0.0, 1.0)));
        assert_eq!(cpm(&c), 1.0);
    }

    #[test]
    fn duplicate_fp_rates_collapse_to_best_sensitivity() {
        let c = compute_froc(&[cand(0, "a", 1, 0.6), cand(1, "a", 0, 0.8)]).unwrap();
        assert_eq!(c.points, vec![pt(1.0, 1.0)]);
    }

    #[test]
    fn no_positives_is_an_error() {
        assert!(compute_froc(&[cand(0, "a", 0, 0.5)]).is_err());
        assert!(compute_froc(&[cand(0, "a", 1, 1.5)]).is_err());
    }

    #[test]
    fn step_reading() {
        let c = FrocCurve {
            points: vec![pt(2.0, 0.5), pt(6.0, 0.9)],
            num_scans: 1,
            num_positives: 1,
        };
        assert_eq!(sensitivity_at(&c, &[1.0, 4.0, 6.0, 100.0]), vec![0.0, 0.5, 0.9, 0.9]);
        let perfect = FrocCurve {
            points: vec![pt(0.0, 1.0)],
            num_scans: 1,
            num_positives: 1,
        };
        assert_eq!(sensitivity_at(&perfect, &[4.0]), vec![1.0]);
    }

    #[test]
    fn all_zero_scores_pass_everything_at_once() {
        let scored: Vec<_> = (0..10).map(|i| cand(i, if i < 5 { "a" } else { "b" }, u8::from(i % 3 == 0), 0.0)).collect();
        let c = compute_froc(&scored).unwrap();
        // 6 negatives over 2 scans
        assert_eq!(c.points, vec![pt(3.0, 1.0)]);
        assert_eq!(cpm(&c), 2.0 / 7.0);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let one = FrocCurve {
            points: vec![pt(0.5, 0.25), pt(3.0, 1.0)],
            num_scans: 2,
            num_positives: 4,
        };
        let curves = vec![("cascade".to_string(), one.clone()), ("fusion".to_string(), one)];
        emit_report(&curves, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("froc.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some("name,fp_per_scan,sensitivity"));
        assert_eq!(csv.lines().count(), 5);
        let svg = std::fs::read(dir.path().join("froc.svg")).unwrap();
        assert_eq!(String::from_utf8_lossy(&svg).matches("<polyline").count(), 2);
        emit_report(&curves, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("froc.svg")).unwrap(), svg);
    }

    #[test]
    fn scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let scored = vec![cand(3, "s1", 1, 0.25), cand(7, "s2", 0, 1.0 / 3.0)];
        write_scores(&scored, &path).unwrap();
        assert_eq!(read_scores(&path).unwrap(), scored);
        std::fs::write(&path, "candidate_id,scan_id,label,score\n1,a,3,0.5\n").unwrap();
        assert!(matches!(read_scores(&path), Err(Error::Parse { line: 2, .. })));
    }
}
