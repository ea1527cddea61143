//! File formats: AGF1 binary field dumps, CSV tables and operator triplets.
//!
//! AGF1 layout (little endian):
//!
//! | bytes | content                          |
//! |-------|----------------------------------|
//! | 4     | magic `AGF1`                     |
//! | 12    | dims as 3 x u32                  |
//! | 24    | origin as 3 x f64                |
//! | 8     | spacing as f64                   |
//! | 1     | 0 = scalar, 1 = complex          |
//! | rest  | f64 values, `i` fastest; complex values interleave `(re, im)` |

use std::io::{BufRead, Read, Write};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{ComplexField, Grid, ScalarField};

pub const AGF_MAGIC: &[u8; 4] = b"AGF1";
const HEADER_LEN: usize = 4 + 12 + 24 + 8 + 1;

/// Either kind of field an AGF1 file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldData {
    Scalar(ScalarField),
    Complex(ComplexField),
}

impl FieldData {
    pub fn grid(&self) -> &Grid {
        match self {
            FieldData::Scalar(f) => f.grid(),
            FieldData::Complex(f) => f.grid(),
        }
    }
}

fn write_header<W: Write>(w: &mut W, grid: &Grid, complex: bool) -> Result<()> {
    w.write_all(AGF_MAGIC)?;
    for d in grid.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for o in grid.origin() {
        w.write_all(&o.to_le_bytes())?;
    }
    w.write_all(&grid.spacing().to_le_bytes())?;
    w.write_all(&[complex as u8])?;
    Ok(())
}

pub fn write_scalar<W: Write>(w: &mut W, field: &ScalarField) -> Result<()> {
    write_header(w, field.grid(), false)?;
    let mut buf = Vec::with_capacity(field.values().len() * 8);
    for v in field.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_complex<W: Write>(w: &mut W, field: &ComplexField) -> Result<()> {
    write_header(w, field.grid(), true)?;
    let mut buf = Vec::with_capacity(field.values().len() * 16);
    for v in field.values() {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn f64_at(bytes: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"))
}

pub fn read_field<R: Read>(r: &mut R) -> Result<FieldData> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != AGF_MAGIC {
        return Err(Error::Format("missing AGF1 header".into()));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * a;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    }
    let origin = [f64_at(&bytes, 16), f64_at(&bytes, 24), f64_at(&bytes, 32)];
    let spacing = f64_at(&bytes, 40);
    let flag = bytes[48];
    let grid = Grid::new(dims, origin, spacing)?;
    let body = &bytes[HEADER_LEN..];
    let per = match flag {
        0 => 8,
        1 => 16,
        f => return Err(Error::Format(format!("unknown field flag {f}"))),
    };
    if body.len() != grid.len() * per {
        return Err(Error::Format(format!("expected {} value bytes, found {}", grid.len() * per, body.len())));
    }
    if flag == 0 {
        let values = (0..grid.len()).map(|i| f64_at(body, 8 * i)).collect();
        Ok(FieldData::Scalar(ScalarField::new(grid, values)?))
    } else {
        let values = (0..grid.len()).map(|i| Complex64::new(f64_at(body, 16 * i), f64_at(body, 16 * i + 8))).collect();
        Ok(FieldData::Complex(ComplexField::new(grid, values)?))
    }
}

/// Shortest decimal form that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// One row of a pairwise distance table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceRow {
    pub x_idx: usize,
    pub y_idx: usize,
    pub euclid: f64,
    pub agmon_d: f64,
}

/// One row of an envelope regression table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionRow {
    pub x_idx: usize,
    pub y_idx: usize,
    pub euclid: f64,
    pub agmon_d: f64,
    pub gamma_abs: f64,
    pub log_env: f64,
}

pub fn write_distance_csv<W: Write>(w: &mut W, rows: &[DistanceRow]) -> Result<()> {
    writeln!(w, "x_idx,y_idx,euclid,agmon_d")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.x_idx, r.y_idx, fmt_f64(r.euclid), fmt_f64(r.agmon_d))?;
    }
    Ok(())
}

pub fn write_regression_csv<W: Write>(w: &mut W, rows: &[RegressionRow]) -> Result<()> {
    writeln!(w, "x_idx,y_idx,euclid,agmon_d,gamma_abs,log_env")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.x_idx,
            r.y_idx,
            fmt_f64(r.euclid),
            fmt_f64(r.agmon_d),
            fmt_f64(r.gamma_abs),
            fmt_f64(r.log_env)
        )?;
    }
    Ok(())
}

/// A `(row, col, value)` entry of a sparse matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub row: usize,
    pub col: usize,
    pub value: Complex64,
}

/// Text form: a `# rows cols nnz` header, then one `row col re im` line per entry.
pub fn write_triplets<W: Write>(w: &mut W, n: usize, entries: &[Triplet]) -> Result<()> {
    writeln!(w, "# {n} {n} {}", entries.len())?;
    for t in entries {
        writeln!(w, "{} {} {} {}", t.row, t.col, fmt_f64(t.value.re), fmt_f64(t.value.im))?;
    }
    Ok(())
}

pub fn read_triplets<R: BufRead>(r: R) -> Result<(usize, Vec<Triplet>)> {
    let mut n = None;
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
        if let Some(rest) = line.strip_prefix('#') {
            if n.is_none() {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 || parts[0] != parts[1] {
                    return Err(bad("header must be `# n n nnz`"));
                }
                n = Some(parts[0].parse::<usize>().map_err(|_| bad("bad dimension"))?);
            }
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(bad("expected `row col re im`"));
        }
        let row = parts[0].parse().map_err(|_| bad("bad row"))?;
        let col = parts[1].parse().map_err(|_| bad("bad col"))?;
        let re: f64 = parts[2].parse().map_err(|_| bad("bad real part"))?;
        let im: f64 = parts[3].parse().map_err(|_| bad("bad imaginary part"))?;
        out.push(Triplet { row, col, value: Complex64::new(re, im) });
    }
    let n = n.ok_or_else(|| Error::Format("missing header".into()))?;
    if out.iter().any(|t| t.row >= n || t.col >= n) {
        return Err(Error::Format("entry outside the declared dimension".into()));
    }
    Ok((n, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_header_layout() {
        let g = Grid::new([4, 5, 6], [-1.0, 0.0, 2.5], 0.5).unwrap();
        let f = ScalarField::from_fn(&g, |x| x[0] + 10.0 * x[2]).unwrap();
        let mut buf = Vec::new();
        write_scalar(&mut buf, &f).unwrap();
        assert_eq!(&buf[..4], b"AGF1");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 5);
        assert_eq!(f64_at(&buf, 40), 0.5);
        assert_eq!(buf[48], 0);
        assert_eq!(buf.len(), 49 + 8 * 120);
        // Second value is node (1, 0, 0).
        assert_eq!(f64_at(&buf, 49 + 8), -0.5 + 25.0);
        assert_eq!(read_field(&mut buf.as_slice()).unwrap(), FieldData::Scalar(f));
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        assert!(read_field(&mut &b"AGF2...."[..]).is_err());
        let g = Grid::cube(0.0, 1.0, 4).unwrap();
        let mut buf = Vec::new();
        write_scalar(&mut buf, &ScalarField::constant(&g, 1.0)).unwrap();
        buf.pop();
        assert!(matches!(read_field(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn triplet_errors_name_the_line() {
        let text = "# 2 2 1\n0 0 1.0\n";
        let err = read_triplets(text.as_bytes()).unwrap_err();
        assert_eq!(err, Error::Format("line 2: expected `row col re im`".into()));
    }

    proptest! {
        #[test]
        fn complex_round_trip(vals in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 64)) {
            let g = Grid::cube(-1.0, 1.0, 4).unwrap();
            let f = ComplexField::new(g, vals.iter().map(|&(a, b)| Complex64::new(a, b)).collect()).unwrap();
            let mut buf = Vec::new();
            write_complex(&mut buf, &f).unwrap();
            prop_assert_eq!(read_field(&mut buf.as_slice()).unwrap(), FieldData::Complex(f));
        }

        #[test]
        fn triplet_round_trip(entries in proptest::collection::vec((0usize..9, 0usize..9, any::<f64>(), any::<f64>()), 0..40)) {
            let entries: Vec<Triplet> = entries
                .into_iter()
                .filter(|e| e.2.is_finite() && e.3.is_finite())
                .map(|(row, col, re, im)| Triplet { row, col, value: Complex64::new(re, im) })
                .collect();
            let mut buf = Vec::new();
            write_triplets(&mut buf, 9, &entries).unwrap();
            let (n, back) = read_triplets(buf.as_slice()).unwrap();
            prop_assert_eq!(n, 9);
            prop_assert_eq!(back, entries);
        }

        #[test]
        fn csv_floats_round_trip(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
