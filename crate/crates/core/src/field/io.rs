//! `FLD1` field files and CSV export.
//!
//! Layout: ASCII header lines `FLD1`, the dimension, then one `lo hi nodes`
//! line per axis, followed by the nodal values as little-endian `f64`,
//! row-major. The non-isotropic cylinder variant starts with `FLD1 NONISO`
//! and carries one extra `radius <r>` line before the data.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::field::{build_grid, GridSpec, ScalarField};
use crate::real::Real;

pub const MAGIC: &str = "FLD1";
pub const MAGIC_NONISO: &str = "FLD1 NONISO";

/// Header of a field file.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldHeader {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
    /// Cylinder radius for the non-isotropic variant.
    pub noniso_radius: Option<f64>,
}

pub fn write_raw<W: Write>(mut w: W, header: &FieldHeader, values: &[f64]) -> Result<()> {
    let magic = if header.noniso_radius.is_some() { MAGIC_NONISO } else { MAGIC };
    writeln!(w, "{magic}")?;
    writeln!(w, "{}", header.nodes.len())?;
    for k in 0..header.nodes.len() {
        writeln!(w, "{:?} {:?} {}", header.lo[k], header.hi[k], header.nodes[k])?;
    }
    if let Some(r) = header.noniso_radius {
        writeln!(w, "radius {r:?}")?;
    }
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Format("unexpected end of header".into()));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn parse<F: std::str::FromStr>(s: &str, what: &str) -> Result<F> {
    s.trim().parse().map_err(|_| Error::Format(format!("cannot parse {what} from {s:?}")))
}

pub fn read_raw<R: BufRead>(mut r: R) -> Result<(FieldHeader, Vec<f64>)> {
    let magic = read_line(&mut r)?;
    let noniso = match magic.as_str() {
        MAGIC => false,
        MAGIC_NONISO => true,
        other => return Err(Error::Format(format!("bad magic {other:?}"))),
    };
    let dim: usize = parse(&read_line(&mut r)?, "dimension")?;
    if dim == 0 || dim > 8 {
        return Err(Error::Format(format!("implausible dimension {dim}")));
    }
    let (mut lo, mut hi, mut nodes) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..dim {
        let line = read_line(&mut r)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad axis line {line:?}")));
        }
        lo.push(parse(parts[0], "lo")?);
        hi.push(parse(parts[1], "hi")?);
        nodes.push(parse(parts[2], "nodes")?);
    }
    let noniso_radius = if noniso {
        let line = read_line(&mut r)?;
        let rest = line
            .strip_prefix("radius ")
            .ok_or_else(|| Error::Format(format!("expected radius line, got {line:?}")))?;
        Some(parse(rest, "radius")?)
    } else {
        None
    };
    let count: usize = nodes.iter().product();
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|_| Error::Format(format!("expected {count} values")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after field data".into()));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((FieldHeader { lo, hi, nodes, noniso_radius }, values))
}

/// Writes a half-box field as `FLD1`.
pub fn write_field<T: Real, W: Write>(w: W, field: &ScalarField<T>) -> Result<()> {
    let g = field.grid();
    let header = FieldHeader {
        lo: g.lo().iter().map(|v| v.to_f64_lossy()).collect(),
        hi: g.hi().iter().map(|v| v.to_f64_lossy()).collect(),
        nodes: g.nodes().to_vec(),
        noniso_radius: None,
    };
    let values: Vec<f64> = field.values().iter().map(|v| v.to_f64_lossy()).collect();
    write_raw(w, &header, &values)
}

/// Reads a half-box `FLD1` file into a field.
pub fn read_field<T: Real, R: BufRead>(r: R) -> Result<ScalarField<T>> {
    let (header, values) = read_raw(r)?;
    if header.noniso_radius.is_some() {
        return Err(Error::Format("non-isotropic cylinder file is not a half-box field".into()));
    }
    let grid = build_grid(GridSpec {
        lo: header.lo.iter().map(|&v| T::lit(v)).collect(),
        hi: header.hi.iter().map(|&v| T::lit(v)).collect(),
        nodes: header.nodes,
    })?;
    ScalarField::new(grid, values.into_iter().map(T::lit).collect())
}

/// CSV export: one row per node with the multi-index and the value.
pub fn write_csv<T: Real, W: Write>(mut w: W, field: &ScalarField<T>) -> Result<()> {
    let g = field.grid();
    let cols: Vec<String> = (0..g.dim()).map(|k| format!("i{k}")).collect();
    writeln!(w, "{},value", cols.join(","))?;
    for (flat, v) in field.values().iter().enumerate() {
        let idx = g.multi_index(flat);
        let idx: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{},{:?}", idx.join(","), v.to_f64_lossy())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;

    #[test]
    fn field_file_round_trip_is_bit_exact() {
        let g = Grid::<f64>::half_box(3, 9).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0].sin() + x[1] * x[2] / 3.0).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        assert!(buf.starts_with(b"FLD1\n3\n-1.0 1.0 9\n"));
        let back: ScalarField<f64> = read_field(&buf[..]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn truncated_file_rejected() {
        let g = Grid::<f64>::half_box(2, 9).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0]).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_field::<f64, _>(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn noniso_header_round_trip() {
        let header = FieldHeader { lo: vec![-0.25, -0.5, -0.5], hi: vec![0.25, 0.5, 0.5], nodes: vec![2, 2, 2], noniso_radius: Some(0.5) };
        let vals: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut buf = Vec::new();
        write_raw(&mut buf, &header, &vals).unwrap();
        let (h2, v2) = read_raw(&buf[..]).unwrap();
        assert_eq!(h2, header);
        assert_eq!(v2, vals);
        assert!(read_field::<f64, _>(&buf[..]).is_err());
    }

    #[test]
    fn csv_has_index_columns() {
        let g = Grid::<f64>::half_box(2, 9).unwrap();
        let f = ScalarField::from_fn(g, |x| x[1]).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &f).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("i0,i1,value"));
        assert_eq!(lines.next(), Some("0,0,0.0"));
        assert_eq!(text.lines().count(), 1 + 9 * 5);
    }
}
