//! Text serialization of point clouds.
//!
//! Format `GEOPC v1`: a header line `GEOPC v1 <n_points> <n_classes>`,
//! then one `<x> <y> <z> <label>` row per point. The label is `-1` on
//! every row of an unlabeled cloud and a class index in `[0, C)` on every
//! row of a labeled one; mixing the two is a parse error. Coordinates are
//! written with 17 significant digits, which round-trips `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::cloudgen::PointCloud;
use crate::error::{Error, Result};

/// Serializes a cloud to `path` in `GEOPC v1` form.
pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(cloud.n_points() * 80 + 32);
    writeln!(
        out,
        "GEOPC v1 {} {}",
        cloud.n_points(),
        cloud.n_classes()
    )
    .expect("string write");
    for (i, p) in cloud.coords().iter().enumerate() {
        let label: i64 = match cloud.labels() {
            Some(l) => l[i] as i64,
            None => -1,
        };
        writeln!(
            out,
            "{:.16e} {:.16e} {:.16e} {}",
            p[0], p[1], p[2], label
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a `GEOPC v1` file; errors carry the 1-based offending line.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file, expected GEOPC v1 header"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 || head[0] != "GEOPC" || head[1] != "v1" {
        return Err(Error::parse(
            path,
            1,
            format!("expected 'GEOPC v1 <points> <classes>', got '{header}'"),
        ));
    }
    let n_points: usize = head[2]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad point count '{}'", head[2])))?;
    let n_classes: usize = head[3]
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("bad class count '{}'", head[3])))?;
    if n_points == 0 {
        return Err(Error::parse(path, 1, "point count must be >= 1"));
    }
    if n_classes < 2 {
        return Err(Error::parse(path, 1, "class count must be >= 2"));
    }

    let mut coords = Vec::with_capacity(n_points);
    let mut labels: Vec<i64> = Vec::with_capacity(n_points);
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            // Blank lines are tolerated only after all rows.
            continue;
        }
        if coords.len() == n_points {
            return Err(Error::parse(
                path,
                lineno,
                format!("extra row, header declared {n_points} points"),
            ));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 'x y z label', got {} fields", fields.len()),
            ));
        }
        let mut p = [0.0f64; 3];
        for (a, f) in fields[..3].iter().enumerate() {
            p[a] = f
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad coordinate '{f}'")))?;
            if !p[a].is_finite() {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("non-finite coordinate '{f}'"),
                ));
            }
        }
        let label: i64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad label '{}'", fields[3])))?;
        if label < -1 || label >= n_classes as i64 {
            return Err(Error::parse(
                path,
                lineno,
                format!("label {label} outside -1..{}", n_classes - 1),
            ));
        }
        if let Some(&first) = labels.first() {
            if (first == -1) != (label == -1) {
                return Err(Error::parse(
                    path,
                    lineno,
                    "mixed labeled and unlabeled rows",
                ));
            }
        }
        coords.push(p);
        labels.push(label);
    }
    if coords.len() != n_points {
        return Err(Error::parse(
            path,
            coords.len() + 2,
            format!("expected {n_points} points, found {}", coords.len()),
        ));
    }

    let labels = if labels[0] == -1 {
        None
    } else {
        Some(labels.into_iter().map(|l| l as usize).collect())
    };
    PointCloud::new(coords, labels, n_classes)
}
