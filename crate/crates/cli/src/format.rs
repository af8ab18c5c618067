//! Frame-pair and flow files.
//!
//! Text pairs start with `# ffp v1 n=<n> has_gt=<0|1>`, may carry a
//! `# case=… seed=… units=…` metadata line, and then hold `n` source rows
//! (`x y z` or `x y z fx fy fz`) followed by `n` target rows (`x y z`).
//! Other `#` lines are comments. Binary pairs are `FFP1`, a little-endian
//! `u64` n, a `u8` ground-truth flag, the source and target positions, the
//! optional flow, and an optional trailing `META` block holding the metadata
//! line.

use std::fs;
use std::io::Write;
use std::path::Path;

use ffe_core::{FlowField, ParticleFrame, Vec3};
use ffe_flow::trainer::TrainSample;

use crate::error::{CliError, FormatError, Location, Result};

pub const TEXT_MAGIC: &str = "ffp";
pub const BINARY_MAGIC: &[u8; 4] = b"FFP1";
const META_MAGIC: &[u8; 4] = b"META";
const FLOW_MAGIC: &str = "fff";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata {
    pub case: Option<String>,
    pub seed: Option<u64>,
    pub units: Option<String>,
}

impl Metadata {
    fn is_empty(&self) -> bool {
        self.case.is_none() && self.seed.is_none() && self.units.is_none()
    }

    fn to_line(&self) -> String {
        let mut parts = Vec::new();
        if let Some(c) = &self.case {
            parts.push(format!("case={c}"));
        }
        if let Some(s) = self.seed {
            parts.push(format!("seed={s}"));
        }
        if let Some(u) = &self.units {
            parts.push(format!("units={u}"));
        }
        parts.join(" ")
    }

    /// Parses `key=value` tokens; `None` when the line is not metadata.
    fn parse(line: &str) -> Option<std::result::Result<Metadata, String>> {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() || !tokens.iter().all(|t| t.contains('=')) {
            return None;
        }
        let mut m = Metadata::default();
        for t in tokens {
            let (k, v) = t.split_once('=').expect("checked above");
            match k {
                "case" => m.case = Some(v.to_string()),
                "units" => m.units = Some(v.to_string()),
                "seed" => match v.parse() {
                    Ok(s) => m.seed = Some(s),
                    Err(_) => return Some(Err(format!("seed must be an integer, got {v:?}"))),
                },
                _ => return Some(Err(format!("unknown metadata key {k:?}"))),
            }
        }
        Some(Ok(m))
    }
}

/// Two frames of equal size, optionally with the true flow of the source.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePairRecord {
    pub source: ParticleFrame,
    pub target: ParticleFrame,
    pub ground_truth: Option<FlowField>,
    pub meta: Metadata,
}

impl FramePairRecord {
    pub fn new(
        source: ParticleFrame,
        target: ParticleFrame,
        ground_truth: Option<FlowField>,
        meta: Metadata,
    ) -> std::result::Result<Self, FormatError> {
        if target.len() != source.len() {
            return Err(FormatError::RowCount {
                expected: source.len(),
                found: target.len(),
            });
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != source.len() {
                return Err(FormatError::RowCount {
                    expected: source.len(),
                    found: gt.len(),
                });
            }
        }
        Ok(Self {
            source,
            target,
            ground_truth,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// The frames alone; training never sees the ground truth.
    pub fn training_sample(&self) -> TrainSample {
        TrainSample {
            source: self.source.clone(),
            target: self.target.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Text,
    Binary,
}

impl Encoding {
    /// Binary for `.ffb` and `.bin`, text otherwise.
    pub fn for_path(path: &Path) -> Encoding {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ffb") | Some("bin") => Encoding::Binary,
            _ => Encoding::Text,
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn encode_text(rec: &FramePairRecord) -> String {
    let n = rec.len();
    let mut out = format!(
        "# {TEXT_MAGIC} v1 n={n} has_gt={}\n",
        rec.ground_truth.is_some() as u8
    );
    if !rec.meta.is_empty() {
        out.push_str(&format!("# {}\n", rec.meta.to_line()));
    }
    out.push_str("# source\n");
    for (i, p) in rec.source.positions().iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|v| num(*v)).collect();
        if let Some(gt) = &rec.ground_truth {
            row.extend(gt.vectors()[i].iter().map(|v| num(*v)));
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out.push_str("# target\n");
    for p in rec.target.positions() {
        out.push_str(&format!("{} {} {}\n", num(p[0]), num(p[1]), num(p[2])));
    }
    out
}

/// Parses `# <magic> v1 key=value…` and returns the key/value pairs.
fn parse_header<'a>(
    line: &'a str,
    magic: &str,
) -> std::result::Result<Vec<(&'a str, &'a str)>, FormatError> {
    let bad = |m: String| FormatError::Header {
        at: Location::Line(1),
        message: m,
    };
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some("#") || tokens.next() != Some(magic) {
        return Err(bad(format!("expected \"# {magic} v1 …\", got {line:?}")));
    }
    if tokens.next() != Some("v1") {
        return Err(bad("unsupported version".into()));
    }
    tokens
        .map(|t| {
            t.split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {t:?}")))
        })
        .collect()
}

fn header_usize(pairs: &[(&str, &str)], key: &str) -> std::result::Result<usize, FormatError> {
    let v = pairs
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| FormatError::Header {
            at: Location::Line(1),
            message: format!("missing {key}"),
        })?;
    v.parse().map_err(|_| FormatError::Header {
        at: Location::Line(1),
        message: format!("{key} must be a non-negative integer, got {v:?}"),
    })
}

fn parse_row(
    line: &str,
    line_no: usize,
    width: usize,
) -> std::result::Result<Vec<f64>, FormatError> {
    let values = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| FormatError::Row {
                at: Location::Line(line_no),
                message: format!("cannot parse {t:?} as a number"),
            })
        })
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    if values.len() != width {
        return Err(FormatError::Row {
            at: Location::Line(line_no),
            message: format!("expected {width} columns, found {}", values.len()),
        });
    }
    Ok(values)
}

pub fn decode_text(text: &str) -> std::result::Result<FramePairRecord, FormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or(FormatError::Header {
        at: Location::Line(1),
        message: "empty file".into(),
    })?;
    let pairs = parse_header(header, TEXT_MAGIC)?;
    let n = header_usize(&pairs, "n")?;
    let has_gt = match header_usize(&pairs, "has_gt")? {
        0 => false,
        1 => true,
        v => {
            return Err(FormatError::Header {
                at: Location::Line(1),
                message: format!("has_gt must be 0 or 1, got {v}"),
            })
        }
    };
    let mut meta = Metadata::default();
    let mut source = Vec::with_capacity(n);
    let mut flow = Vec::with_capacity(if has_gt { n } else { 0 });
    let mut target = Vec::with_capacity(n);
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if source.is_empty() {
                if let Some(m) = Metadata::parse(comment) {
                    meta = m.map_err(|message| FormatError::Header {
                        at: Location::Line(line_no),
                        message,
                    })?;
                }
            }
            continue;
        }
        let (frame, row) = if source.len() < n {
            ("source", source.len())
        } else {
            ("target", target.len())
        };
        if frame == "target" && target.len() == n {
            return Err(FormatError::RowCount {
                expected: 2 * n,
                found: 2 * n + 1,
            });
        }
        let width = if frame == "source" && has_gt { 6 } else { 3 };
        let v = parse_row(line, line_no, width)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite {
                at: Location::Line(line_no),
                frame,
                row,
            });
        }
        let p: Vec3 = [v[0], v[1], v[2]];
        if frame == "source" {
            source.push(p);
            if has_gt {
                flow.push([v[3], v[4], v[5]]);
            }
        } else {
            target.push(p);
        }
    }
    let found = source.len() + target.len();
    if found != 2 * n {
        return Err(FormatError::RowCount {
            expected: 2 * n,
            found,
        });
    }
    build(source, target, has_gt.then_some(flow), meta)
}

fn build(
    source: Vec<Vec3>,
    target: Vec<Vec3>,
    flow: Option<Vec<Vec3>>,
    meta: Metadata,
) -> std::result::Result<FramePairRecord, FormatError> {
    let invalid = |e: ffe_core::CoreError| FormatError::Row {
        at: Location::Line(0),
        message: e.to_string(),
    };
    let source = ParticleFrame::new(source).map_err(invalid)?;
    let target = ParticleFrame::new(target).map_err(invalid)?;
    let gt = flow.map(FlowField::new).transpose().map_err(invalid)?;
    FramePairRecord::new(source, target, gt, meta)
}

pub fn encode_binary(rec: &FramePairRecord) -> Vec<u8> {
    let n = rec.len();
    let mut out = Vec::with_capacity(13 + 8 * 9 * n);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.push(rec.ground_truth.is_some() as u8);
    for frame in [&rec.source, &rec.target] {
        for v in frame.positions().iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(gt) = &rec.ground_truth {
        for v in gt.vectors().iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if !rec.meta.is_empty() {
        let line = rec.meta.to_line();
        out.extend_from_slice(META_MAGIC);
        out.extend_from_slice(&(line.len() as u32).to_le_bytes());
        out.extend_from_slice(line.as_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> std::result::Result<FramePairRecord, FormatError> {
    let actual = bytes.len() as u64;
    if actual < 13 {
        return Err(FormatError::Truncated {
            expected: 13,
            actual,
        });
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(FormatError::Header {
            at: Location::Offset(0),
            message: "missing FFP1 magic".into(),
        });
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let has_gt = match bytes[12] {
        0 => false,
        1 => true,
        v => {
            return Err(FormatError::Header {
                at: Location::Offset(12),
                message: format!("ground-truth flag must be 0 or 1, got {v}"),
            })
        }
    };
    let blocks: u64 = if has_gt { 9 } else { 6 };
    let expected = n
        .checked_mul(8 * blocks)
        .and_then(|b| b.checked_add(13))
        .ok_or(FormatError::Header {
            at: Location::Offset(4),
            message: format!("particle count {n} is too large"),
        })?;
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    let n = n as usize;
    let mut values = bytes[13..expected as usize]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut offset = 13u64;
    let mut read_block = |frame: &'static str| -> std::result::Result<Vec<Vec3>, FormatError> {
        let mut rows = Vec::with_capacity(n);
        for row in 0..n {
            let p: Vec3 = [
                values.next().unwrap(),
                values.next().unwrap(),
                values.next().unwrap(),
            ];
            if p.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite {
                    at: Location::Offset(offset),
                    frame,
                    row,
                });
            }
            offset += 24;
            rows.push(p);
        }
        Ok(rows)
    };
    let source = read_block("source")?;
    let target = read_block("target")?;
    let flow = if has_gt {
        Some(read_block("flow")?)
    } else {
        None
    };
    let meta = decode_meta(&bytes[expected as usize..], expected)?;
    build(source, target, flow, meta)
}

fn decode_meta(rest: &[u8], base: u64) -> std::result::Result<Metadata, FormatError> {
    if rest.is_empty() {
        return Ok(Metadata::default());
    }
    let bad = |message: String| FormatError::Header {
        at: Location::Offset(base),
        message,
    };
    if rest.len() < 8 || &rest[..4] != META_MAGIC {
        return Err(bad(format!("{} unexpected trailing bytes", rest.len())));
    }
    let len = u32::from_le_bytes(rest[4..8].try_into().expect("4 bytes")) as u64;
    if rest.len() as u64 != 8 + len {
        return Err(FormatError::Truncated {
            expected: base + 8 + len,
            actual: base + rest.len() as u64,
        });
    }
    let line = std::str::from_utf8(&rest[8..]).map_err(|_| bad("metadata is not UTF-8".into()))?;
    match Metadata::parse(line) {
        Some(m) => m.map_err(bad),
        None => Err(bad(format!("malformed metadata {line:?}"))),
    }
}

/// Writes through a temporary file in the destination directory so that a
/// failed write leaves nothing behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let err = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(bytes).map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

pub fn save_pair(rec: &FramePairRecord, path: &Path) -> Result<()> {
    let bytes = match Encoding::for_path(path) {
        Encoding::Text => encode_text(rec).into_bytes(),
        Encoding::Binary => encode_binary(rec),
    };
    write_atomic(path, &bytes)
}

/// Reads either encoding, recognised by the leading magic bytes.
pub fn load_pair(path: &Path) -> Result<FramePairRecord> {
    let bytes = fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let fmt = |source| CliError::Format {
        path: path.to_path_buf(),
        source,
    };
    if bytes.starts_with(BINARY_MAGIC) {
        decode_binary(&bytes).map_err(fmt)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| {
            fmt(FormatError::Header {
                at: Location::Offset(0),
                message: "neither FFP1 binary nor UTF-8 text".into(),
            })
        })?;
        decode_text(text).map_err(fmt)
    }
}

/// `# fff v1 n=<n>` followed by `fx fy fz p` rows.
pub fn encode_flow(flow: &FlowField, confidence: &[f64]) -> String {
    let mut out = format!("# {FLOW_MAGIC} v1 n={}\n", flow.len());
    for (f, p) in flow.vectors().iter().zip(confidence) {
        out.push_str(&format!(
            "{} {} {} {}\n",
            num(f[0]),
            num(f[1]),
            num(f[2]),
            num(*p)
        ));
    }
    out
}

/// Flow rows and their confidences.
pub fn decode_flow(text: &str) -> std::result::Result<(FlowField, Vec<f64>), FormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or(FormatError::Header {
        at: Location::Line(1),
        message: "empty file".into(),
    })?;
    let n = header_usize(&parse_header(header, FLOW_MAGIC)?, "n")?;
    let mut rows = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    for (line_no, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_row(line, line_no, 4)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite {
                at: Location::Line(line_no),
                frame: "flow",
                row: rows.len(),
            });
        }
        rows.push([v[0], v[1], v[2]]);
        conf.push(v[3]);
    }
    if rows.len() != n {
        return Err(FormatError::RowCount {
            expected: n,
            found: rows.len(),
        });
    }
    let flow = FlowField::new(rows).map_err(|e| FormatError::Row {
        at: Location::Line(0),
        message: e.to_string(),
    })?;
    Ok((flow, conf))
}

pub fn load_flow(path: &Path) -> Result<(FlowField, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    decode_flow(&text).map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(gt: bool) -> FramePairRecord {
        let src = ParticleFrame::new(vec![[0.1, 0.2, 0.3], [1.0 / 3.0, -2.5e-7, 9.0]]).unwrap();
        let tgt = ParticleFrame::new(vec![[0.0; 3], [1e300, -0.0, 5.0]]).unwrap();
        let flow =
            gt.then(|| FlowField::new(vec![[0.5; 3], [std::f64::consts::PI, 0.0, -1.0]]).unwrap());
        FramePairRecord::new(
            src,
            tgt,
            flow,
            Metadata {
                case: Some("beltrami".into()),
                seed: Some(7),
                units: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn text_and_binary_round_trip() {
        for gt in [false, true] {
            let r = record(gt);
            assert_eq!(decode_text(&encode_text(&r)).unwrap(), r);
            assert_eq!(decode_binary(&encode_binary(&r)).unwrap(), r);
        }
    }

    #[test]
    fn nan_row_is_named() {
        let text = "# ffp v1 n=1 has_gt=0\n0 0 0\nNaN 0 0\n";
        match decode_text(text) {
            Err(FormatError::NonFinite { at, frame, row }) => {
                assert_eq!((at, frame, row), (Location::Line(3), "target", 0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_binary_reports_sizes() {
        let bytes = encode_binary(&record(true));
        let cut = &bytes[..13 + 8 * 9 * 2 - 5];
        match decode_binary(cut) {
            Err(FormatError::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (13 + 144, 152));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_headers_and_rows() {
        assert!(matches!(
            decode_text("x y z\n"),
            Err(FormatError::Header { .. })
        ));
        assert!(matches!(
            decode_text("# ffp v1 n=2 has_gt=0\n0 0 0\n"),
            Err(FormatError::RowCount {
                expected: 4,
                found: 1
            })
        ));
        assert!(matches!(
            decode_text("# ffp v1 n=1 has_gt=1\n0 0 0\n0 0 0\n"),
            Err(FormatError::Row {
                at: Location::Line(2),
                ..
            })
        ));
    }

    #[test]
    fn flow_round_trip() {
        let f = FlowField::new(vec![[0.1, -0.2, 1.0 / 7.0]; 3]).unwrap();
        let (g, p) = decode_flow(&encode_flow(&f, &[0.5, 1.0, 0.0])).unwrap();
        assert_eq!(g, f);
        assert_eq!(p, vec![0.5, 1.0, 0.0]);
    }
}
