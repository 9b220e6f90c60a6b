//! Cube data model: the (maturity × tenor × strike-offset) lattice, the
//! masked volatility cube, parameter transforms and the CSV/JSON formats.
//!
//! Volatilities are held in basis points, exactly as they appear in the cube
//! CSV. Code that feeds them into the SABR or Bachelier formulas converts to
//! decimals with [`bp_to_decimal`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BP: f64 = 1e-4;

#[inline]
pub fn bp_to_decimal(v: f64) -> f64 {
    v * BP
}

#[inline]
pub fn decimal_to_bp(v: f64) -> f64 {
    v / BP
}

/// Axes of a volatility cube. All three axes are strictly increasing;
/// maturities and tenors are year fractions, strike offsets are absolute
/// rate offsets from the ATM strike and must contain 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct CubeGrid {
    maturities: Vec<f64>,
    tenors: Vec<f64>,
    strike_offsets: Vec<f64>,
    atm: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridSpec {
    maturities: Vec<f64>,
    tenors: Vec<f64>,
    strike_offsets: Vec<f64>,
}

impl TryFrom<GridSpec> for CubeGrid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        CubeGrid::new(spec.maturities, spec.tenors, spec.strike_offsets)
    }
}

impl From<CubeGrid> for GridSpec {
    fn from(g: CubeGrid) -> Self {
        GridSpec {
            maturities: g.maturities,
            tenors: g.tenors,
            strike_offsets: g.strike_offsets,
        }
    }
}

fn check_axis(name: &str, axis: &[f64], positive: bool) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Grid(format!("{name} axis is empty")));
    }
    if axis.iter().any(|v| !v.is_finite()) {
        return Err(Error::Grid(format!("{name} axis has non-finite entries")));
    }
    if positive && axis.iter().any(|&v| v <= 0.0) {
        return Err(Error::Grid(format!("{name} must be positive")));
    }
    if axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Grid(format!("{name} axis is not strictly increasing")));
    }
    Ok(())
}

impl CubeGrid {
    pub fn new(maturities: Vec<f64>, tenors: Vec<f64>, strike_offsets: Vec<f64>) -> Result<Self> {
        check_axis("maturities", &maturities, true)?;
        check_axis("tenors", &tenors, true)?;
        check_axis("strike_offsets", &strike_offsets, false)?;
        let atm = strike_offsets
            .iter()
            .position(|&s| s == 0.0)
            .ok_or_else(|| Error::Grid("strike_offsets has no ATM (zero) entry".into()))?;
        Ok(CubeGrid {
            maturities,
            tenors,
            strike_offsets,
            atm,
        })
    }

    /// 21 × 14 × 17 = 4998 points.
    pub fn full_default() -> Self {
        let mut maturities = vec![1.0 / 12.0, 2.0 / 12.0, 0.25, 0.5, 0.75, 1.0, 1.5];
        maturities.extend((2..=10).map(f64::from));
        maturities.extend([12.0, 15.0, 20.0, 25.0, 30.0]);
        let mut tenors: Vec<f64> = (1..=10).map(f64::from).collect();
        tenors.extend([12.0, 15.0, 20.0, 30.0]);
        let wings = [12.5, 25.0, 37.5, 50.0, 75.0, 100.0, 150.0, 200.0];
        let mut strikes: Vec<f64> = wings.iter().rev().map(|w| -w * BP).collect();
        strikes.push(0.0);
        strikes.extend(wings.iter().map(|w| w * BP));
        CubeGrid::new(maturities, tenors, strikes).expect("default grid is valid")
    }

    /// Reduced 8 × 6 × 7 grid used by the desk-scale profile.
    pub fn desk() -> Self {
        let maturities = vec![1.0 / 12.0, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0];
        let tenors = vec![1.0, 2.0, 5.0, 10.0, 20.0, 30.0];
        let strikes = [-200.0, -100.0, -50.0, 0.0, 50.0, 100.0, 200.0]
            .iter()
            .map(|s| s * BP)
            .collect();
        CubeGrid::new(maturities, tenors, strikes).expect("desk grid is valid")
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn tenors(&self) -> &[f64] {
        &self.tenors
    }

    pub fn strike_offsets(&self) -> &[f64] {
        &self.strike_offsets
    }

    /// Index of the zero strike offset.
    pub fn atm_index(&self) -> usize {
        self.atm
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.maturities.len(),
            self.tenors.len(),
            self.strike_offsets.len(),
        )
    }

    pub fn len(&self) -> usize {
        let (a, b, c) = self.dims();
        a * b * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of (maturity, tenor) slices.
    pub fn n_slices(&self) -> usize {
        self.maturities.len() * self.tenors.len()
    }

    /// Maturity-major flat index.
    pub fn flatten_index(&self, i: usize, j: usize, k: usize) -> Result<usize> {
        let (nm, nt, ns) = self.dims();
        if i >= nm || j >= nt || k >= ns {
            return Err(Error::IndexOutOfBounds {
                i,
                j,
                k,
                dims: (nm, nt, ns),
            });
        }
        Ok((i * nt + j) * ns + k)
    }

    pub fn unflatten_index(&self, flat: usize) -> Result<(usize, usize, usize)> {
        let (nm, nt, ns) = self.dims();
        if flat >= self.len() {
            return Err(Error::IndexOutOfBounds {
                i: flat / (nt * ns),
                j: (flat / ns) % nt,
                k: flat % ns,
                dims: (nm, nt, ns),
            });
        }
        Ok((flat / (nt * ns), (flat / ns) % nt, flat % ns))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Normal volatilities (basis points) on a [`CubeGrid`] with an observation
/// mask. Unobserved entries are stored as 0 and must never be read as data.
#[derive(Debug, Clone, PartialEq)]
pub struct VolCube {
    grid: CubeGrid,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl VolCube {
    pub fn new(grid: CubeGrid, mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = grid.len();
        if values.len() != n {
            return Err(Error::Shape {
                expected: n,
                actual: values.len(),
            });
        }
        if mask.len() != n {
            return Err(Error::Shape {
                expected: n,
                actual: mask.len(),
            });
        }
        for (idx, (v, &obs)) in values.iter_mut().zip(&mask).enumerate() {
            if obs {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "observed volatility {v} at flat index {idx} must be finite and positive"
                    )));
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(VolCube { grid, values, mask })
    }

    /// Fully observed cube.
    pub fn full(grid: CubeGrid, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; grid.len()];
        Self::new(grid, values, mask)
    }

    pub fn grid(&self) -> &CubeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, flat: usize) -> Option<f64> {
        self.mask[flat].then(|| self.values[flat])
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn n_missing(&self) -> usize {
        self.mask.len() - self.n_observed()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Same values observed only where `mask` is true (and previously observed).
    pub fn with_mask(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::Shape {
                expected: self.mask.len(),
                actual: mask.len(),
            });
        }
        let mask = mask.iter().zip(&self.mask).map(|(a, b)| *a && *b).collect();
        Self::new(self.grid.clone(), self.values.clone(), mask)
    }

    /// Smile of slice (i, j) as (strike offset, vol bp) for observed strikes.
    pub fn observed_smile(&self, i: usize, j: usize) -> Vec<(f64, f64)> {
        let ns = self.grid.strike_offsets.len();
        let base = (i * self.grid.tenors.len() + j) * ns;
        (0..ns)
            .filter(|k| self.mask[base + k])
            .map(|k| (self.grid.strike_offsets[k], self.values[base + k]))
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["maturity", "tenor", "strike_offset", "vol_bp"])?;
        for (flat, (&v, &obs)) in self.values.iter().zip(&self.mask).enumerate() {
            let (i, j, k) = self.grid.unflatten_index(flat).expect("in range");
            let vol = if obs { v.to_string() } else { String::new() };
            wtr.write_record([
                self.grid.maturities[i].to_string(),
                self.grid.tenors[j].to_string(),
                self.grid.strike_offsets[k].to_string(),
                vol,
            ])?;
        }
        wtr.flush()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv_from(BufReader::new(f), path)
    }

    /// Parses the cube CSV. The grid is inferred from the rows, which must
    /// enumerate every point once in flatten order.
    pub fn read_csv_from<R: std::io::Read>(r: R, label: &Path) -> Result<Self> {
        let schema = |row: usize, message: String| Error::Schema {
            path: label.to_path_buf(),
            row,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr
            .headers()
            .map_err(|e| schema(1, e.to_string()))?
            .clone();
        let expected = ["maturity", "tenor", "strike_offset", "vol_bp"];
        if header.iter().map(str::trim).ne(expected.iter().copied()) {
            return Err(schema(1, format!("expected header {}", expected.join(","))));
        }

        let mut rows: Vec<(f64, f64, f64, Option<f64>)> = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let line = n + 2;
            let rec = rec.map_err(|e| schema(line, e.to_string()))?;
            if rec.len() != 4 {
                return Err(schema(line, format!("expected 4 fields, found {}", rec.len())));
            }
            let num = |idx: usize, name: &str| -> Result<f64> {
                let field = rec[idx].trim();
                field
                    .parse::<f64>()
                    .map_err(|_| schema(line, format!("cannot parse {name} '{field}'")))
            };
            let vol = match rec[3].trim() {
                "" => None,
                _ => {
                    let v = num(3, "vol_bp")?;
                    if !(v.is_finite() && v > 0.0) {
                        return Err(schema(line, format!("observed vol_bp {v} must be positive")));
                    }
                    Some(v)
                }
            };
            rows.push((num(0, "maturity")?, num(1, "tenor")?, num(2, "strike_offset")?, vol));
        }
        if rows.is_empty() {
            return Err(schema(1, "no data rows".into()));
        }

        fn axis(vals: impl Iterator<Item = f64>) -> Vec<f64> {
            let mut out: Vec<f64> = Vec::new();
            for v in vals {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
            out
        }
        let maturities = axis(rows.iter().map(|r| r.0));
        let tenors = axis(rows.iter().map(|r| r.1));
        let strikes = axis(rows.iter().map(|r| r.2));
        let grid = CubeGrid::new(maturities, tenors, strikes)?;
        if rows.len() != grid.len() {
            return Err(Error::Grid(format!(
                "{} rows but the axes span {} points",
                rows.len(),
                grid.len()
            )));
        }

        let mut values = Vec::with_capacity(rows.len());
        let mut mask = Vec::with_capacity(rows.len());
        for (flat, r) in rows.iter().enumerate() {
            let (i, j, k) = grid.unflatten_index(flat)?;
            if r.0 != grid.maturities[i] || r.1 != grid.tenors[j] || r.2 != grid.strike_offsets[k] {
                return Err(schema(flat + 2, "row out of flatten order".into()));
            }
            values.push(r.3.unwrap_or(0.0));
            mask.push(r.3.is_some());
        }
        VolCube::new(grid, values, mask)
    }
}

/// Transform applied to SABR parameters before sampling or interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Log,
    /// Fisher z-transform.
    Artanh,
    Identity,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Log => "log",
            Transform::Artanh => "artanh",
            Transform::Identity => "identity",
        }
    }

    pub fn apply(self, x: f64) -> Result<f64> {
        let bad = || Error::TransformDomain {
            transform: self.name(),
            value: x,
        };
        match self {
            Transform::Log if x > 0.0 && x.is_finite() => Ok(x.ln()),
            Transform::Artanh if x.abs() < 1.0 => Ok(x.atanh()),
            Transform::Identity if !x.is_nan() => Ok(x),
            _ => Err(bad()),
        }
    }

    pub fn inverse(self, y: f64) -> f64 {
        match self {
            Transform::Log => y.exp(),
            Transform::Artanh => y.tanh(),
            Transform::Identity => y,
        }
    }
}
