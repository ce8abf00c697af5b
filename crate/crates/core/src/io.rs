//! ASCII PLY and TSV point-cloud readers and writers.
//!
//! Writers emit shortest round-trip float formatting, so `read(write(c)) == c`
//! and `write(read(write(c)))` is byte-identical to `write(c)`.

use std::fmt::Write as _;
use std::path::Path;

use crate::cloud::{InstanceId, PointCloud, Semantic};
use crate::error::{Error, Result};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("expected a number, found {tok:?}")))
}

fn parse_int(tok: &str, line: usize) -> Result<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Ok(v);
    }
    // PLY files written by other tools sometimes store labels as floats.
    match tok.parse::<f64>() {
        Ok(f) if f.fract() == 0.0 && f.is_finite() => Ok(f as i64),
        _ => Err(parse_err(line, format!("expected an integer, found {tok:?}"))),
    }
}

fn to_instance(v: i64, line: usize) -> Result<InstanceId> {
    InstanceId::try_from(v).map_err(|_| parse_err(line, format!("instance id {v} out of range")))
}

fn to_semantic(v: i64, line: usize) -> Result<Semantic> {
    Semantic::from_index(v).map_err(|e| parse_err(line, e.to_string()))
}

/// Column layout shared by both formats.
#[derive(Debug, Default)]
struct Columns {
    x: Option<usize>,
    y: Option<usize>,
    z: Option<usize>,
    semantic: Option<usize>,
    instance: Option<usize>,
    count: usize,
}

impl Columns {
    fn assign(&mut self, name: &str, idx: usize) {
        match name {
            "x" => self.x = Some(idx),
            "y" => self.y = Some(idx),
            "z" => self.z = Some(idx),
            "semantic" | "semantic_seg" | "label" | "class" => self.semantic = Some(idx),
            "instance" | "treeid" | "tree_id" | "instance_id" => self.instance = Some(idx),
            _ => {}
        }
    }
}

#[derive(Default)]
struct RawColumns {
    positions: Vec<[f64; 3]>,
    semantic: Vec<Semantic>,
    instance: Vec<InstanceId>,
}

fn read_rows<'a>(
    rows: impl Iterator<Item = (usize, &'a str)>,
    cols: &Columns,
    want_xyz: bool,
) -> Result<RawColumns> {
    let mut out = RawColumns::default();
    for (line, text) in rows {
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < cols.count {
            return Err(parse_err(
                line,
                format!("expected {} values, found {}", cols.count, toks.len()),
            ));
        }
        if want_xyz {
            let (x, y, z) = (cols.x.unwrap(), cols.y.unwrap(), cols.z.unwrap());
            let p = [parse_f64(toks[x], line)?, parse_f64(toks[y], line)?, parse_f64(toks[z], line)?];
            if p.iter().any(|c| !c.is_finite()) {
                return Err(parse_err(line, "non-finite coordinate"));
            }
            out.positions.push(p);
        }
        if let Some(s) = cols.semantic {
            out.semantic.push(to_semantic(parse_int(toks[s], line)?, line)?);
        }
        if let Some(i) = cols.instance {
            out.instance.push(to_instance(parse_int(toks[i], line)?, line)?);
        }
    }
    Ok(out)
}

fn build_cloud(raw: RawColumns, cols: &Columns) -> Result<PointCloud> {
    PointCloud::new(
        raw.positions,
        cols.semantic.map(|_| raw.semantic),
        cols.instance.map(|_| raw.instance),
    )
}

/// Parses an ASCII PLY document with a `vertex` element holding `x`, `y`, `z`
/// and optional integer `semantic` and `instance` properties.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        Some((n, l)) => return Err(parse_err(n, format!("expected magic \"ply\", found {l:?}"))),
        None => return Err(parse_err(1, "empty file")),
    }

    let mut cols = Columns::default();
    let mut vertex_count: Option<usize> = None;
    let mut vertices_first = true;
    let mut in_vertex = false;
    let mut header_done = false;
    let mut elements_before = 0usize;

    for (n, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", _] => {}
            ["format", fmt, ..] => {
                return Err(parse_err(n, format!("unsupported PLY format {fmt:?}; only ascii is read")))
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| parse_err(n, format!("invalid element count {count:?}")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                    vertices_first = elements_before == 0;
                }
                elements_before += 1;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(n, "list properties on vertices are not supported"))
            }
            ["property", ty, name] => {
                if !in_vertex {
                    continue;
                }
                if !is_scalar_type(ty) {
                    return Err(parse_err(n, format!("unknown property type {ty:?}")));
                }
                cols.assign(name, cols.count);
                cols.count += 1;
            }
            ["property", ..] => {
                if in_vertex {
                    return Err(parse_err(n, format!("malformed property line {raw:?}")));
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(n, format!("unexpected header line {raw:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(text.lines().count(), "missing end_header"));
    }
    let count = vertex_count.ok_or_else(|| parse_err(1, "no vertex element in header"))?;
    if !vertices_first {
        return Err(parse_err(1, "vertex element must come first"));
    }
    if cols.x.is_none() || cols.y.is_none() || cols.z.is_none() {
        return Err(parse_err(1, "vertex element lacks x, y or z"));
    }

    let mut body = Vec::with_capacity(count);
    for (n, l) in lines {
        if body.len() == count {
            break;
        }
        if l.trim().is_empty() {
            continue;
        }
        body.push((n, l));
    }
    if body.len() < count {
        return Err(parse_err(
            text.lines().count(),
            format!("header declares {count} vertices, found {}", body.len()),
        ));
    }
    let raw = read_rows(body.into_iter(), &cols, true)?;
    build_cloud(raw, &cols)
}

fn is_scalar_type(ty: &str) -> bool {
    matches!(
        ty,
        "char" | "uchar" | "short" | "ushort" | "int" | "uint" | "float" | "double" | "int8"
            | "uint8" | "int16" | "uint16" | "int32" | "uint32" | "float32" | "float64"
    )
}

pub fn write_ply(cloud: &PointCloud) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.semantic().is_some() {
        s.push_str("property uchar semantic\n");
    }
    if cloud.instance().is_some() {
        s.push_str("property int instance\n");
    }
    s.push_str("end_header\n");
    write_rows(&mut s, cloud, ' ');
    s
}

fn write_rows(s: &mut String, cloud: &PointCloud, sep: char) {
    for (i, p) in cloud.positions().iter().enumerate() {
        let _ = write!(s, "{}{sep}{}{sep}{}", p[0], p[1], p[2]);
        if let Some(sem) = cloud.semantic() {
            let _ = write!(s, "{sep}{}", sem[i].index());
        }
        if let Some(ids) = cloud.instance() {
            let _ = write!(s, "{sep}{}", ids[i]);
        }
        s.push('\n');
    }
}

fn looks_numeric(tok: &str) -> bool {
    tok.parse::<f64>().is_ok()
}

fn tsv_header(first: &str) -> Option<Vec<String>> {
    let toks: Vec<&str> = first.split_whitespace().collect();
    if toks.first().is_some_and(|t| !looks_numeric(t)) {
        Some(toks.iter().map(|t| t.to_ascii_lowercase()).collect())
    } else {
        None
    }
}

fn tsv_columns(text: &str) -> Result<(Columns, usize)> {
    let first = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let Some((idx, first)) = first else {
        return Ok((Columns::default(), 0));
    };
    let mut cols = Columns::default();
    match tsv_header(first) {
        Some(names) => {
            for (i, n) in names.iter().enumerate() {
                cols.assign(n, i);
            }
            cols.count = names.len();
            Ok((cols, idx + 1))
        }
        None => {
            let width = first.split_whitespace().count();
            match width {
                3..=5 => {
                    cols.x = Some(0);
                    cols.y = Some(1);
                    cols.z = Some(2);
                    if width >= 4 {
                        cols.semantic = Some(3);
                    }
                    if width == 5 {
                        cols.instance = Some(4);
                    }
                    cols.count = width;
                    Ok((cols, idx))
                }
                _ => Err(parse_err(idx + 1, format!("expected 3 to 5 columns without a header, found {width}"))),
            }
        }
    }
}

fn data_rows(text: &str, skip: usize) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(skip)
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.starts_with('#'))
}

/// Parses a whitespace-separated table `x y z [semantic] [instance]`.
///
/// A first line whose leading token is not a number is taken as a header of
/// column names; otherwise columns are positional.
pub fn parse_tsv(text: &str) -> Result<PointCloud> {
    let (cols, skip) = tsv_columns(text)?;
    if cols.count == 0 {
        return Ok(PointCloud::default());
    }
    if cols.x.is_none() || cols.y.is_none() || cols.z.is_none() {
        return Err(parse_err(skip.max(1), "header lacks x, y or z"));
    }
    let raw = read_rows(data_rows(text, skip), &cols, true)?;
    build_cloud(raw, &cols)
}

pub fn write_tsv(cloud: &PointCloud) -> String {
    let mut s = String::from("x\ty\tz");
    if cloud.semantic().is_some() {
        s.push_str("\tsemantic");
    }
    if cloud.instance().is_some() {
        s.push_str("\tinstance");
    }
    s.push('\n');
    write_rows(&mut s, cloud, '\t');
    s
}

/// Per-point labels without geometry, as produced by a segmentation run.
///
/// Unlike [`PointCloud`], no consistency between the two arrays is required.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointLabels {
    pub semantic: Option<Vec<Semantic>>,
    pub instance: Vec<InstanceId>,
}

/// Reads `instance` (required) and `semantic` (optional) columns from a table
/// with a header line. Headerless input is read positionally like [`parse_tsv`].
pub fn parse_labels_tsv(text: &str) -> Result<PointLabels> {
    let (cols, skip) = tsv_columns(text)?;
    if cols.count == 0 {
        return Err(parse_err(1, "empty label file"));
    }
    if cols.instance.is_none() {
        return Err(parse_err(skip.max(1), "label table lacks an instance column"));
    }
    let raw = read_rows(data_rows(text, skip), &cols, false)?;
    Ok(PointLabels {
        semantic: cols.semantic.map(|_| raw.semantic),
        instance: raw.instance,
    })
}

/// Label table with a header; the `semantic` column is written only when present.
pub fn write_labels_tsv(labels: &PointLabels) -> String {
    let mut s = String::new();
    match &labels.semantic {
        Some(sem) => {
            s.push_str("semantic\tinstance\n");
            for (c, id) in sem.iter().zip(&labels.instance) {
                let _ = writeln!(s, "{}\t{id}", c.index());
            }
        }
        None => {
            s.push_str("instance\n");
            for id in &labels.instance {
                let _ = writeln!(s, "{id}");
            }
        }
    }
    s
}

impl From<&PointCloud> for PointLabels {
    fn from(c: &PointCloud) -> Self {
        PointLabels {
            semantic: c.semantic().map(|s| s.to_vec()),
            instance: c.instance().map(|s| s.to_vec()).unwrap_or_else(|| vec![0; c.len()]),
        }
    }
}

/// Reads a cloud, choosing the format by extension (`.ply`, anything else is TSV).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    if is_ply(path) {
        parse_ply(&text)
    } else {
        parse_tsv(&text)
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let text = if is_ply(path) { write_ply(cloud) } else { write_tsv(cloud) };
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads labels from a label table or from a labeled point cloud file.
pub fn read_labels(path: &Path) -> Result<PointLabels> {
    if is_ply(path) {
        return Ok(PointLabels::from(&read_cloud(path)?));
    }
    parse_labels_tsv(&std::fs::read_to_string(path)?)
}

fn is_ply(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar semantic\nproperty int instance\nend_header\n0.5 1 2 1 4\n-3 0.25 7 0 0\n";

    #[test]
    fn reads_labeled_ply() {
        let c = parse_ply(SAMPLE).unwrap();
        assert_eq!(c.positions(), &[[0.5, 1.0, 2.0], [-3.0, 0.25, 7.0]]);
        assert_eq!(c.semantic().unwrap(), &[Semantic::Wood, Semantic::Ground]);
        assert_eq!(c.instance().unwrap(), &[4, 0]);
    }

    #[test]
    fn extra_properties_and_trailing_elements_are_ignored() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty uchar red\nproperty double y\nproperty double z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 255 2 3\n";
        let c = parse_ply(text).unwrap();
        assert_eq!(c.positions(), &[[1.0, 2.0, 3.0]]);
        assert!(c.semantic().is_none());
    }

    #[test]
    fn malformed_header_names_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex two\nend_header\n";
        assert_eq!(
            parse_ply(text).unwrap_err(),
            Error::Parse { line: 3, message: "invalid element count \"two\"".into() }
        );
        let err = parse_ply("ply\nformat binary_little_endian 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_ply("plx\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_ply("ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 8, .. }));
        let err = parse_ply("ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2 3\n").unwrap_err();
        assert!(err.to_string().contains("declares 3 vertices"));
    }

    #[test]
    fn tsv_with_and_without_header() {
        let c = parse_tsv("x\ty\tz\tinstance\tsemantic\n1\t2\t3\t7\t2\n").unwrap();
        assert_eq!(c.instance().unwrap(), &[7]);
        assert_eq!(c.semantic().unwrap(), &[Semantic::Leaf]);
        let c = parse_tsv("1 2 3 1\n4 5 6 2\n").unwrap();
        assert_eq!(c.semantic().unwrap(), &[Semantic::Wood, Semantic::Leaf]);
        assert!(c.instance().is_none());
        assert!(matches!(parse_tsv("1 2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_tsv("1 2 3\n4 x 6\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn labels_table() {
        let l = PointLabels { semantic: None, instance: vec![0, 3, 3] };
        assert_eq!(write_labels_tsv(&l), "instance\n0\n3\n3\n");
        assert_eq!(parse_labels_tsv(&write_labels_tsv(&l)).unwrap(), l);
        let l2 = parse_labels_tsv("x\ty\tz\tsemantic\tinstance\n0\t0\t0\t0\t0\n1\t1\t1\t2\t5\n").unwrap();
        assert_eq!(l2.instance, vec![0, 5]);
        assert_eq!(l2.semantic.unwrap(), vec![Semantic::Ground, Semantic::Leaf]);
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec((prop::array::uniform3(-1e4f64..1e4), 0u32..6), 0..60).prop_map(|rows| {
            let pos = rows.iter().map(|r| r.0).collect();
            let ids: Vec<u32> = rows.iter().map(|r| r.1).collect();
            let sem = ids
                .iter()
                .map(|&i| if i == 0 { Semantic::Ground } else if i % 2 == 0 { Semantic::Leaf } else { Semantic::Wood })
                .collect();
            PointCloud::new(pos, Some(sem), Some(ids)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn ply_and_tsv_round_trip_bit_exactly(c in arb_cloud()) {
            let ply = write_ply(&c);
            let back = parse_ply(&ply).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(write_ply(&back), ply);
            let tsv = write_tsv(&c);
            let back = parse_tsv(&tsv).unwrap();
            if !c.is_empty() {
                prop_assert_eq!(&back, &c);
            }
            prop_assert_eq!(write_tsv(&back), tsv);
        }
    }
}
