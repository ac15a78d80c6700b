//! Curve export: `step,loss` and `epoch,val_dice` CSVs and a standalone SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::train::CurveLog;

/// Trailing moving average; the first `window - 1` entries average what is
/// available so far.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurvePaths {
    pub loss_csv: PathBuf,
    pub val_csv: PathBuf,
    pub svg: Option<PathBuf>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "curves".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn csv(header: &str, rows: &[(u64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (i, v) in rows {
        writeln!(s, "{i},{v}").expect("string write");
    }
    s
}

/// Writes `<stem>_loss.csv` and `<stem>_val.csv` next to `path`.
pub fn write_curves(log: &CurveLog, path: &Path) -> Result<CurvePaths> {
    let loss_csv = sibling(path, "_loss.csv");
    let val_csv = sibling(path, "_val.csv");
    write_atomic(&loss_csv, csv("step,loss", &log.train).as_bytes())?;
    write_atomic(&val_csv, csv("epoch,val_dice", &log.val).as_bytes())?;
    Ok(CurvePaths { loss_csv, val_csv, svg: None })
}

fn read_csv(path: &Path, header: &str) -> Result<Vec<(u64, f64)>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        other => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("expected header {header:?}, got {:?}", other.map(|o| o.1)),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |msg: String| Error::Parse { path: path.into(), line: i + 1, msg };
            let (a, b) = l.split_once(',').ok_or_else(|| err("expected two columns".into()))?;
            Ok((a.parse().map_err(|e| err(format!("{e}")))?, b.parse().map_err(|e| err(format!("{e}")))?))
        })
        .collect()
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(u64, f64)>> {
    read_csv(path, "step,loss")
}

pub fn read_val_csv(path: &Path) -> Result<Vec<(u64, f64)>> {
    read_csv(path, "epoch,val_dice")
}

const W: f64 = 640.0;
const H: f64 = 220.0;
const PAD: f64 = 40.0;

fn panel(svg: &mut String, top: f64, title: &str, rows: &[(u64, f64)], window: usize, colour: &str) {
    writeln!(svg, r#"<text x="{PAD}" y="{}" font-size="13">{title}</text>"#, top + 16.0).unwrap();
    let (x0, x1, y0, y1) = (PAD, W - PAD / 2.0, top + 24.0, top + H - PAD / 2.0);
    writeln!(svg, r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#999"/>"##, x1 - x0, y1 - y0)
        .unwrap();
    if rows.is_empty() {
        return;
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let smooth = moving_average(&ys, window);
    let (xmin, xmax) = (xs[0], xs[xs.len() - 1].max(xs[0] + 1.0));
    let lo = ys.iter().chain(&smooth).cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().chain(&smooth).cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let map = |x: f64, y: f64| (x0 + (x - xmin) / (xmax - xmin) * (x1 - x0), y1 - (y - lo) / span * (y1 - y0));
    for (data, attrs) in
        [(&ys, format!(r#"stroke="{colour}" stroke-opacity="0.35""#)), (&smooth, format!(r#"stroke="{colour}""#))]
    {
        let pts: Vec<String> = xs
            .iter()
            .zip(data.iter())
            .map(|(&x, &y)| {
                let (px, py) = map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        writeln!(svg, r#"<polyline fill="none" {attrs} points="{}"/>"#, pts.join(" ")).unwrap();
    }
    writeln!(svg, r#"<text x="{x0}" y="{}" font-size="10">{lo:.4}</text>"#, y1 + 12.0).unwrap();
    writeln!(svg, r#"<text x="{x0}" y="{}" font-size="10">{hi:.4}</text>"#, y0 - 2.0).unwrap();
}

/// SVG with the training loss and validation Dice panels (raw and smoothed
/// over `window`), plus the two CSVs beside it.
pub fn write_curves_svg(log: &CurveLog, path: &Path, window: usize) -> Result<CurvePaths> {
    if log.train.is_empty() && log.val.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif">"#,
        2.0 * H + 20.0
    )
    .unwrap();
    panel(&mut svg, 0.0, &format!("training loss (smoothing window {window})"), &log.train, window, "#1f77b4");
    panel(&mut svg, H, &format!("validation Dice (smoothing window {window})"), &log.val, window, "#d62728");
    svg.push_str("</svg>\n");
    write_atomic(path, svg.as_bytes())?;
    let mut paths = write_curves(log, path)?;
    paths.svg = Some(path.to_path_buf());
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_matches_direct_sum() {
        let v: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64).collect();
        let m = moving_average(&v, 5);
        for i in 0..v.len() {
            let lo = i.saturating_sub(4);
            let direct = v[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64;
            assert!((m[i] - direct).abs() < 1e-12);
        }
    }
}
