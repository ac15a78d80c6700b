//! Landmark lists: an optional `# spacing sx sy sz` header, then one
//! `x y z` voxel coordinate per line. Other `#` lines are comments.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::metrics::LandmarkSet;

pub fn parse_landmarks(text: &str, path: &Path) -> Result<LandmarkSet> {
    let mut spacing = [1.0; 3];
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse { path: path.into(), line: i + 1, msg };
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            if it.next() == Some("spacing") {
                let v: Vec<f64> = it.map(str::parse).collect::<Result<_, _>>().map_err(|e| err(format!("{e}")))?;
                spacing = v.try_into().map_err(|_| err("spacing needs three values".into()))?;
            }
            continue;
        }
        let v: Vec<f64> =
            line.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|e| err(format!("{e}")))?;
        points.push(v.try_into().map_err(|_| err("expected three coordinates".into()))?);
    }
    Ok(LandmarkSet::new(points, spacing))
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    parse_landmarks(&read_text(path)?, path)
}

pub fn write_landmarks(path: &Path, set: &LandmarkSet) -> Result<()> {
    let mut s = String::new();
    let [a, b, c] = set.spacing;
    writeln!(s, "# spacing {a} {b} {c}").expect("string write");
    for [x, y, z] in &set.points {
        writeln!(s, "{x} {y} {z}").expect("string write");
    }
    write_atomic(path, s.as_bytes())
}
