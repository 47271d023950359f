//! ASCII PLY with per-point part index.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::ShapeRecord;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::shape::PointCloud;

/// Header comments carry the shape id, structure code, `V` and `E`.
pub fn encode_ply(record: &ShapeRecord) -> String {
    let g = &record.graph;
    let bits = |xs: &[bool]| xs.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment shape_id {}", record.shape_id);
    let _ = writeln!(s, "comment structure {}", record.structure_code);
    let _ = writeln!(s, "comment existence {}", bits(g.existence()));
    let _ = writeln!(s, "comment adjacency {}", bits(g.adjacency()));
    let _ = writeln!(s, "element vertex {}", record.cloud.len());
    s.push_str("property float32 x\nproperty float32 y\nproperty float32 z\nproperty uint8 part\nend_header\n");
    for (p, j) in record.cloud.points().iter().zip(g.label_indices()) {
        let _ = writeln!(s, "{} {} {} {}", p[0], p[1], p[2], j);
    }
    s
}

pub fn write_ply(path: &Path, record: &ShapeRecord) -> Result<()> {
    write_atomic(path, encode_ply(record).as_bytes())
}

/// Points and part indices of an ASCII PLY with `x y z part` vertices.
pub fn decode_ply(text: &str) -> Result<(PointCloud, Vec<usize>)> {
    let bad = |why: &str| Error::CorruptRecord(format!("ply: {why}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("format") if it.next() != Some("ascii") => return Err(bad("only ascii is supported")),
            Some("element") if it.next() == Some("vertex") => count = it.next().and_then(|c| c.parse::<usize>().ok()),
            Some("property") => props.push(it.last().unwrap_or_default().to_string()),
            Some("end_header") => break,
            _ => {}
        }
    }
    let n = count.ok_or_else(|| bad("no vertex count"))?;
    let col = |name: &str| props.iter().position(|p| p == name).ok_or_else(|| bad(&format!("no `{name}` property")));
    let (cx, cy, cz, cp) = (col("x")?, col("y")?, col("z")?, col("part")?);
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for line in lines.filter(|l| !l.trim().is_empty()).take(n) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != props.len() {
            return Err(bad("vertex row has the wrong field count"));
        }
        let num = |i: usize| f[i].parse::<f32>().map_err(|_| bad("bad number"));
        pts.push([num(cx)?, num(cy)?, num(cz)?]);
        labels.push(f[cp].parse::<u8>().map_err(|_| bad("bad part index"))? as usize);
    }
    if pts.len() != n {
        return Err(bad("fewer vertices than declared"));
    }
    Ok((PointCloud::new(pts)?, labels))
}
