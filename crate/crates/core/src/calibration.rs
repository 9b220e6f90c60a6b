//! Per-slice shifted-SABR calibration with β fixed, whole-cube calibration
//! and interpolation of calibrated parameter matrices.
//!
//! Fits run a bounded Levenberg–Marquardt search over
//! `(ln α, ln ν, artanh ρ)`; only steps that lower the weighted sum of
//! squared residuals are accepted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sabr::{sabr_normal_vol, SabrParams};
use crate::volcube::{bp_to_decimal, decimal_to_bp, CubeGrid, VolCube};

pub const LN_ALPHA_BOUNDS: (f64, f64) = (-9.210_340_371_976_184, 0.0); // ln 1e-4, ln 1
pub const LN_NU_BOUNDS: (f64, f64) = (-6.907_755_278_982_137, 1.609_437_912_434_100_3); // ln 1e-3, ln 5
pub const Z_RHO_BOUNDS: (f64, f64) = (-3.0, 3.0);

const MAX_ITERATIONS: usize = 500;
const REL_TOLERANCE: f64 = 1e-10;
/// Objective (bp²) below which a fit counts as exact.
const ABS_TOLERANCE: f64 = 1e-22;

/// One (maturity, tenor) smile. Vols are in basis points, strikes are
/// absolute rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SmileSlice {
    pub maturity: f64,
    pub tenor: f64,
    pub forward: f64,
    pub strikes: Vec<f64>,
    pub vols: Vec<Option<f64>>,
    pub weights: Vec<f64>,
}

impl SmileSlice {
    /// Slice (i, j) of `cube` around `forward`, unit weights.
    pub fn from_cube(cube: &VolCube, i: usize, j: usize, forward: f64) -> Self {
        let grid = cube.grid();
        let ns = grid.strike_offsets().len();
        let base = (i * grid.tenors().len() + j) * ns;
        SmileSlice {
            maturity: grid.maturities()[i],
            tenor: grid.tenors()[j],
            forward,
            strikes: grid.strike_offsets().iter().map(|o| forward + o).collect(),
            vols: (0..ns).map(|k| cube.get(base + k)).collect(),
            weights: vec![1.0; ns],
        }
    }

    /// Multiply the weight of the at-the-money quote by `w`.
    pub fn with_atm_weight(mut self, w: f64) -> Self {
        if let Some(k) = self.atm_index() {
            self.weights[k] *= w;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.strikes.len();
        if self.vols.len() != n || self.weights.len() != n {
            return Err(Error::Shape {
                expected: n,
                actual: self.vols.len().min(self.weights.len()),
            });
        }
        if self.strikes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("strikes must be strictly increasing".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidParameter("weights must be non-negative".into()));
        }
        if self.n_observed() == 0 {
            return Err(Error::InsufficientData("slice has no observed quotes".into()));
        }
        Ok(())
    }

    pub fn n_observed(&self) -> usize {
        self.vols.iter().filter(|v| v.is_some()).count()
    }

    fn atm_index(&self) -> Option<usize> {
        self.strikes
            .iter()
            .position(|&k| (k - self.forward).abs() <= 1e-12)
    }

    /// Observed quote nearest to the money: (strike, vol bp).
    fn nearest_atm_quote(&self) -> Option<(f64, f64)> {
        self.observed()
            .min_by(|a, b| {
                (a.0 - self.forward)
                    .abs()
                    .total_cmp(&(b.0 - self.forward).abs())
            })
            .map(|(k, v, _)| (k, v))
    }

    fn observed(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.strikes
            .iter()
            .zip(&self.vols)
            .zip(&self.weights)
            .filter_map(|((&k, v), &w)| v.map(|v| (k, v, w)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    /// α, ν and ρ fitted.
    Full,
    /// Fewer than three quotes: ν and ρ held fixed, only α fitted.
    AlphaOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub maturity: f64,
    pub tenor: f64,
    pub kind: FitKind,
    pub iterations: usize,
    /// Weighted sum of squared residuals, bp².
    pub objective: f64,
    pub mae_bp: f64,
    /// (strike, model − observed in bp) per observed quote.
    pub residuals_bp: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub beta: f64,
    pub shift: f64,
    /// Extra weight on the ATM quote (1 = plain least squares).
    pub atm_weight: f64,
    /// Further starting points tried when the fit from the initial guess
    /// leaves an RMS residual above this (bp). `None` disables restarts.
    pub restart_above_rms_bp: Option<f64>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            beta: 0.5,
            shift: crate::sabr::DEFAULT_SHIFT,
            atm_weight: 1.0,
            restart_above_rms_bp: Some(0.05),
        }
    }
}

fn to_params(x: &Vector3<f64>, beta: f64, shift: f64) -> SabrParams {
    SabrParams {
        alpha: x[0].exp(),
        beta,
        nu: x[1].exp(),
        rho: x[2].tanh(),
        shift,
    }
}

fn to_coords(p: &SabrParams) -> Vector3<f64> {
    project(Vector3::new(
        p.alpha.ln(),
        p.nu.max(1e-300).ln(),
        p.rho.clamp(-0.999_999, 0.999_999).atanh(),
    ))
}

fn project(x: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        x[0].clamp(LN_ALPHA_BOUNDS.0, LN_ALPHA_BOUNDS.1),
        x[1].clamp(LN_NU_BOUNDS.0, LN_NU_BOUNDS.1),
        x[2].clamp(Z_RHO_BOUNDS.0, Z_RHO_BOUNDS.1),
    )
}

struct Problem<'a> {
    slice: &'a SmileSlice,
    beta: f64,
    shift: f64,
    /// (strike, vol bp, sqrt weight)
    quotes: Vec<(f64, f64, f64)>,
}

impl<'a> Problem<'a> {
    fn new(slice: &'a SmileSlice, beta: f64, shift: f64, atm_weight: f64) -> Self {
        let atm = slice.atm_index();
        let quotes = slice
            .strikes
            .iter()
            .zip(&slice.vols)
            .zip(&slice.weights)
            .enumerate()
            .filter_map(|(k, ((&strike, v), &w))| {
                let w = if Some(k) == atm { w * atm_weight } else { w };
                v.map(|v| (strike, v, w.sqrt()))
            })
            .collect();
        Problem {
            slice,
            beta,
            shift,
            quotes,
        }
    }

    fn model_bp(&self, p: &SabrParams, strike: f64) -> Option<f64> {
        sabr_normal_vol(p, self.slice.forward, strike, 0.0, self.slice.maturity)
            .ok()
            .map(decimal_to_bp)
    }

    /// Weighted residuals in bp; `None` if the model is undefined anywhere.
    fn residuals(&self, x: &Vector3<f64>) -> Option<Vec<f64>> {
        let p = to_params(x, self.beta, self.shift);
        self.quotes
            .iter()
            .map(|&(k, v, sw)| self.model_bp(&p, k).map(|m| sw * (m - v)))
            .collect()
    }

    fn objective(&self, x: &Vector3<f64>) -> f64 {
        match self.residuals(x) {
            Some(r) => r.iter().map(|e| e * e).sum(),
            None => f64::INFINITY,
        }
    }
}

struct LmOutcome {
    x: Vector3<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
}

/// Levenberg–Marquardt over the free coordinates (`free[c]`), box-projected.
fn levenberg_marquardt(problem: &Problem, start: Vector3<f64>, free: [bool; 3]) -> LmOutcome {
    let mut x = project(start);
    let mut obj = problem.objective(&x);
    let mut lambda = 1e-3;
    let m = problem.quotes.len();
    let h = 1e-6;

    for iter in 1..=MAX_ITERATIONS {
        if obj <= ABS_TOLERANCE {
            return LmOutcome {
                x,
                objective: obj,
                iterations: iter - 1,
                converged: true,
            };
        }
        let r = match problem.residuals(&x) {
            Some(r) => r,
            None => break,
        };
        // central-difference Jacobian, one-sided at the box faces
        let mut jac = vec![[0.0f64; 3]; m];
        for c in 0..3 {
            if !free[c] {
                continue;
            }
            let mut up = x;
            let mut dn = x;
            up[c] += h;
            dn[c] -= h;
            let (up, dn) = (project(up), project(dn));
            let span = up[c] - dn[c];
            let (ru, rd) = match (problem.residuals(&up), problem.residuals(&dn)) {
                (Some(a), Some(b)) => (a, b),
                _ => continue,
            };
            for q in 0..m {
                jac[q][c] = (ru[q] - rd[q]) / span;
            }
        }
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for q in 0..m {
            for a in 0..3 {
                jtr[a] += jac[q][a] * r[q];
                for b in 0..3 {
                    jtj[(a, b)] += jac[q][a] * jac[q][b];
                }
            }
        }
        for c in 0..3 {
            if !free[c] {
                jtj.row_mut(c).fill(0.0);
                jtj.column_mut(c).fill(0.0);
                jtj[(c, c)] = 1.0;
                jtr[c] = 0.0;
            }
        }

        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for c in 0..3 {
                a[(c, c)] += lambda * jtj[(c, c)].max(1e-12);
            }
            let step = match a.lu().solve(&(-jtr)) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let cand = project(x + step);
            let cand_obj = problem.objective(&cand);
            if cand_obj < obj {
                let rel = (obj - cand_obj) / obj.max(f64::MIN_POSITIVE);
                let moved = (cand - x).norm();
                let gain = obj - cand_obj;
                x = cand;
                obj = cand_obj;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel < REL_TOLERANCE || moved < 1e-10 || gain < ABS_TOLERANCE {
                    return LmOutcome {
                        x,
                        objective: obj,
                        iterations: iter,
                        converged: true,
                    };
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no descent direction left at any damping: stationary point
            return LmOutcome {
                x,
                objective: obj,
                iterations: iter,
                converged: true,
            };
        }
    }
    LmOutcome {
        x,
        objective: obj,
        iterations: MAX_ITERATIONS,
        converged: obj <= ABS_TOLERANCE,
    }
}

/// Starting point for a fit.
///
/// α₀ solves the leading-order ATM relation σ_ATM = α (F+b)^β. ν₀ and ρ₀ come
/// from a quadratic fitted to the quotes nearest the money: to leading order
/// the smile's slope at the money is ρν/2 and its curvature is
/// (2 − 3ρ²)ν²/(6σ_ATM). This is a heuristic stand-in for closed-form
/// initial guesses; without usable wings it falls back to ν₀ = 0.5, ρ₀ = 0.
pub fn initial_guess(slice: &SmileSlice, beta: f64, shift: f64) -> SabrParams {
    const NU_DEFAULT: f64 = 0.5;
    const RHO_DEFAULT: f64 = 0.0;
    let clamp_box = |p: SabrParams| to_params(&to_coords(&p), beta, shift);

    let Some((_, atm_bp)) = slice.nearest_atm_quote() else {
        return clamp_box(SabrParams {
            alpha: 0.01,
            beta,
            nu: NU_DEFAULT,
            rho: RHO_DEFAULT,
            shift,
        });
    };
    let sigma_atm = bp_to_decimal(atm_bp);
    let s = (slice.forward + shift).max(1e-8);
    let alpha = sigma_atm / s.powf(beta);

    // least-squares quadratic in x = K − F through the observed quotes
    let pts: Vec<(f64, f64)> = slice
        .observed()
        .map(|(k, v, _)| (k - slice.forward, bp_to_decimal(v)))
        .collect();
    let (mut nu, mut rho) = (NU_DEFAULT, RHO_DEFAULT);
    if pts.len() >= 3 {
        let mut a = Matrix3::zeros();
        let mut b = Vector3::zeros();
        for &(x, v) in &pts {
            let phi = Vector3::new(1.0, x, x * x);
            a += phi * phi.transpose();
            b += phi * v;
        }
        if let Some(c) = a.lu().solve(&b) {
            let slope = c[1];
            let curvature = 2.0 * c[2];
            let rho_nu = 2.0 * slope;
            let nu_sq = (6.0 * sigma_atm * curvature + 3.0 * rho_nu * rho_nu) / 2.0;
            if nu_sq.is_finite() && nu_sq > 1e-8 {
                nu = nu_sq.sqrt();
                rho = (rho_nu / nu).clamp(-0.9, 0.9);
            } else if rho_nu.is_finite() {
                rho = (rho_nu / nu).clamp(-0.9, 0.9);
            }
        }
    }
    clamp_box(SabrParams {
        alpha,
        beta,
        nu,
        rho,
        shift,
    })
}

fn report(problem: &Problem, p: &SabrParams, kind: FitKind, iterations: usize, objective: f64) -> FitReport {
    let residuals_bp: Vec<(f64, f64)> = problem
        .slice
        .observed()
        .map(|(k, v, _)| {
            let m = problem.model_bp(p, k).unwrap_or(f64::NAN);
            (k, m - v)
        })
        .collect();
    let mae_bp = residuals_bp.iter().map(|r| r.1.abs()).sum::<f64>() / residuals_bp.len() as f64;
    FitReport {
        maturity: problem.slice.maturity,
        tenor: problem.slice.tenor,
        kind,
        iterations,
        objective,
        mae_bp,
        residuals_bp,
    }
}

/// Least-squares fit of (α, ν, ρ) to one smile. Slices with fewer than three
/// quotes fall back to [`calibrate_alpha`] at ν₀, ρ₀ from [`initial_guess`].
pub fn calibrate_slice(slice: &SmileSlice, opts: &CalibrationOptions) -> Result<(SabrParams, FitReport)> {
    slice.validate()?;
    let guess = initial_guess(slice, opts.beta, opts.shift);
    if slice.n_observed() < 3 {
        return calibrate_alpha(slice, guess.nu, guess.rho, opts);
    }
    calibrate_slice_from(slice, guess, opts)
}

/// As [`calibrate_slice`] but starting from `start` (e.g. yesterday's fit).
pub fn calibrate_slice_from(
    slice: &SmileSlice,
    start: SabrParams,
    opts: &CalibrationOptions,
) -> Result<(SabrParams, FitReport)> {
    slice.validate()?;
    let problem = Problem::new(slice, opts.beta, opts.shift, opts.atm_weight);
    let n = problem.quotes.len() as f64;
    let mut best = levenberg_marquardt(&problem, to_coords(&start), [true; 3]);

    if let Some(limit) = opts.restart_above_rms_bp {
        if (best.objective / n).sqrt() > limit {
            let base = to_coords(&start);
            for (nu, rho) in [(0.2, -0.5), (0.2, 0.5), (1.0, -0.3), (1.0, 0.3), (0.05, 0.0)] {
                let x0 = Vector3::new(base[0], f64::ln(nu), f64::atanh(rho));
                let out = levenberg_marquardt(&problem, x0, [true; 3]);
                if out.objective < best.objective {
                    best = out;
                }
                if (best.objective / n).sqrt() <= limit {
                    break;
                }
            }
        }
    }
    let params = to_params(&best.x, opts.beta, opts.shift);
    if !best.converged {
        return Err(Error::NoConvergence {
            iterations: best.iterations,
            objective: best.objective,
            best: params,
        });
    }
    let rep = report(&problem, &params, FitKind::Full, best.iterations, best.objective);
    Ok((params, rep))
}

/// Fit α alone with ν and ρ held at the given values.
pub fn calibrate_alpha(
    slice: &SmileSlice,
    nu: f64,
    rho: f64,
    opts: &CalibrationOptions,
) -> Result<(SabrParams, FitReport)> {
    slice.validate()?;
    let problem = Problem::new(slice, opts.beta, opts.shift, opts.atm_weight);
    let guess = initial_guess(slice, opts.beta, opts.shift);
    let fixed = SabrParams {
        nu,
        rho,
        ..guess
    };
    let out = levenberg_marquardt(&problem, to_coords(&fixed), [true, false, false]);
    let params = to_params(&out.x, opts.beta, opts.shift);
    if !out.converged {
        return Err(Error::NoConvergence {
            iterations: out.iterations,
            objective: out.objective,
            best: params,
        });
    }
    let rep = report(&problem, &params, FitKind::AlphaOnly, out.iterations, out.objective);
    Ok((params, rep))
}

/// Per-(maturity, tenor) field of α, ν, ρ with global β and shift.
/// Entries are stored maturity-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SabrParamMatrix {
    pub maturities: Vec<f64>,
    pub tenors: Vec<f64>,
    pub beta: f64,
    pub shift: f64,
    pub alpha: Vec<f64>,
    pub nu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl SabrParamMatrix {
    pub fn new(
        maturities: Vec<f64>,
        tenors: Vec<f64>,
        beta: f64,
        shift: f64,
        alpha: Vec<f64>,
        nu: Vec<f64>,
        rho: Vec<f64>,
    ) -> Result<Self> {
        let m = SabrParamMatrix {
            maturities,
            tenors,
            beta,
            shift,
            alpha,
            nu,
            rho,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.maturities.len() * self.tenors.len();
        for v in [&self.alpha, &self.nu, &self.rho] {
            if v.len() != n {
                return Err(Error::Shape {
                    expected: n,
                    actual: v.len(),
                });
            }
        }
        for idx in 0..n {
            self.at_flat(idx).validate()?;
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.maturities.len(), self.tenors.len())
    }

    pub fn at(&self, i: usize, j: usize) -> SabrParams {
        self.at_flat(i * self.tenors.len() + j)
    }

    fn at_flat(&self, idx: usize) -> SabrParams {
        SabrParams {
            alpha: self.alpha[idx],
            beta: self.beta,
            nu: self.nu[idx],
            rho: self.rho[idx],
            shift: self.shift,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["maturity", "tenor", "alpha", "nu", "rho"])?;
        let nt = self.tenors.len();
        for (i, &mat) in self.maturities.iter().enumerate() {
            for (j, &ten) in self.tenors.iter().enumerate() {
                let idx = i * nt + j;
                wtr.write_record([
                    mat.to_string(),
                    ten.to_string(),
                    self.alpha[idx].to_string(),
                    self.nu[idx].to_string(),
                    self.rho[idx].to_string(),
                ])?;
            }
        }
        wtr.flush()
    }

    /// Reads the parameter CSV; β and shift are not part of the file.
    pub fn read_csv(path: impl AsRef<Path>, beta: f64, shift: f64) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(BufReader::new(f));
        let schema = |row: usize, message: String| Error::Schema {
            path: path.to_path_buf(),
            row,
            message,
        };
        let mut rows = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| schema(n + 2, e.to_string()))?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| schema(n + 2, e.to_string()))?;
            if vals.len() != 5 {
                return Err(schema(n + 2, "expected 5 fields".into()));
            }
            rows.push(vals);
        }
        let mut maturities: Vec<f64> = Vec::new();
        let mut tenors: Vec<f64> = Vec::new();
        for r in &rows {
            if !maturities.contains(&r[0]) {
                maturities.push(r[0]);
            }
            if !tenors.contains(&r[1]) {
                tenors.push(r[1]);
            }
        }
        if maturities.len() * tenors.len() != rows.len() {
            return Err(Error::Grid("parameter rows do not span a full grid".into()));
        }
        let nt = tenors.len();
        for (idx, r) in rows.iter().enumerate() {
            if r[0] != maturities[idx / nt] || r[1] != tenors[idx % nt] {
                return Err(schema(idx + 2, "row out of maturity-major order".into()));
            }
        }
        SabrParamMatrix::new(
            maturities,
            tenors,
            beta,
            shift,
            rows.iter().map(|r| r[2]).collect(),
            rows.iter().map(|r| r[3]).collect(),
            rows.iter().map(|r| r[4]).collect(),
        )
    }
}

/// Per-slice fit results for a whole cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeFitReport {
    pub slices: Vec<FitReport>,
}

impl CubeFitReport {
    pub fn alpha_only(&self) -> impl Iterator<Item = &FitReport> {
        self.slices.iter().filter(|r| r.kind == FitKind::AlphaOnly)
    }

    pub fn mean_mae_bp(&self) -> f64 {
        self.slices.iter().map(|r| r.mae_bp).sum::<f64>() / self.slices.len() as f64
    }
}

/// Forward swap rates per (maturity, tenor) node, maturity-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardMatrix {
    pub maturities: Vec<f64>,
    pub tenors: Vec<f64>,
    pub values: Vec<f64>,
}

impl ForwardMatrix {
    pub fn flat(grid: &CubeGrid, rate: f64) -> Self {
        ForwardMatrix {
            maturities: grid.maturities().to_vec(),
            tenors: grid.tenors().to_vec(),
            values: vec![rate; grid.n_slices()],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.tenors.len() + j]
    }

    pub fn check_grid(&self, grid: &CubeGrid) -> Result<()> {
        if self.maturities != grid.maturities() || self.tenors != grid.tenors() {
            return Err(Error::Grid("forward matrix axes differ from the cube grid".into()));
        }
        if self.values.len() != grid.n_slices() {
            return Err(Error::Shape {
                expected: grid.n_slices(),
                actual: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv::Writer::from_writer(BufWriter::new(f));
        let io = |e: csv::Error| Error::io(path, e.into());
        wtr.write_record(["maturity", "tenor", "forward"]).map_err(io)?;
        let nt = self.tenors.len();
        for (idx, v) in self.values.iter().enumerate() {
            wtr.write_record([
                self.maturities[idx / nt].to_string(),
                self.tenors[idx % nt].to_string(),
                v.to_string(),
            ])
            .map_err(io)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(BufReader::new(f));
        let mut maturities: Vec<f64> = Vec::new();
        let mut tenors: Vec<f64> = Vec::new();
        let mut values = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let schema = |message: String| Error::Schema {
                path: path.to_path_buf(),
                row: n + 2,
                message,
            };
            let rec = rec.map_err(|e| schema(e.to_string()))?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| schema(e.to_string()))?;
            if vals.len() != 3 {
                return Err(schema("expected 3 fields".into()));
            }
            if !maturities.contains(&vals[0]) {
                maturities.push(vals[0]);
            }
            if !tenors.contains(&vals[1]) {
                tenors.push(vals[1]);
            }
            values.push(vals[2]);
        }
        if maturities.len() * tenors.len() != values.len() {
            return Err(Error::Grid("forward rows do not span a full grid".into()));
        }
        Ok(ForwardMatrix {
            maturities,
            tenors,
            values,
        })
    }
}

/// Calibrates every slice of `cube`. Slices with at least three quotes get a
/// full fit; sparser slices take ν, ρ from the nearest fully fitted slice
/// (grid distance, ties to the lower index) or the defaults, and fit α only.
pub fn calibrate_cube(
    cube: &VolCube,
    forwards: &ForwardMatrix,
    opts: &CalibrationOptions,
) -> Result<(SabrParamMatrix, CubeFitReport)> {
    let grid = cube.grid();
    forwards.check_grid(grid)?;
    let (nm, nt, _) = grid.dims();
    let slices: Vec<SmileSlice> = (0..nm * nt)
        .map(|idx| {
            SmileSlice::from_cube(cube, idx / nt, idx % nt, forwards.values[idx])
                .with_atm_weight(opts.atm_weight)
        })
        .collect();
    let plain = CalibrationOptions {
        atm_weight: 1.0,
        ..*opts
    };

    let full: Vec<Option<Result<(SabrParams, FitReport)>>> = slices
        .par_iter()
        .map(|s| match s.n_observed() {
            0 => Some(Err(Error::InsufficientData("slice has no observed quotes".into()))),
            1 | 2 => None,
            _ => Some(calibrate_slice(s, &plain)),
        })
        .collect();

    let mut fitted: Vec<Option<(SabrParams, FitReport)>> = Vec::with_capacity(nm * nt);
    for (idx, r) in full.into_iter().enumerate() {
        match r {
            Some(Err(e)) => return Err(e.at_slice(slices[idx].maturity, slices[idx].tenor)),
            Some(Ok(v)) => fitted.push(Some(v)),
            None => fitted.push(None),
        }
    }

    let donors: Vec<usize> = (0..nm * nt).filter(|&i| fitted[i].is_some()).collect();
    for idx in 0..nm * nt {
        if fitted[idx].is_some() {
            continue;
        }
        let (i, j) = ((idx / nt) as i64, (idx % nt) as i64);
        let donor = donors
            .iter()
            .min_by_key(|&&d| {
                let (di, dj) = ((d / nt) as i64, (d % nt) as i64);
                ((di - i).pow(2) + (dj - j).pow(2), d)
            })
            .and_then(|&d| fitted[d].as_ref().map(|f| f.0));
        let (nu, rho) = donor.map(|p| (p.nu, p.rho)).unwrap_or((0.5, 0.0));
        let s = &slices[idx];
        let r = calibrate_alpha(s, nu, rho, &plain).map_err(|e| e.at_slice(s.maturity, s.tenor))?;
        fitted[idx] = Some(r);
    }

    let mut alpha = Vec::with_capacity(nm * nt);
    let mut nu = Vec::with_capacity(nm * nt);
    let mut rho = Vec::with_capacity(nm * nt);
    let mut reports = Vec::with_capacity(nm * nt);
    for f in fitted.into_iter() {
        let (p, r) = f.expect("every slice fitted");
        alpha.push(p.alpha);
        nu.push(p.nu);
        rho.push(p.rho);
        reports.push(r);
    }
    let matrix = SabrParamMatrix::new(
        grid.maturities().to_vec(),
        grid.tenors().to_vec(),
        opts.beta,
        opts.shift,
        alpha,
        nu,
        rho,
    )?;
    Ok((matrix, CubeFitReport { slices: reports }))
}

/// Bracketing interval and weight of the upper node; queries outside the
/// axis are clamped to the boundary node.
pub(crate) fn locate(axis: &[f64], x: f64) -> (usize, usize, f64) {
    let n = axis.len();
    if n == 1 || x <= axis[0] {
        return (0, 0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = axis.partition_point(|&a| a <= x);
    let lo = hi - 1;
    if axis[lo] == x {
        return (lo, lo, 0.0);
    }
    (lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo]))
}

/// Nodes (i, j) and weights that [`interpolate_params`] combines for a query.
pub fn interpolation_stencil(matrix: &SabrParamMatrix, maturity: f64, tenor: f64) -> Vec<((usize, usize), f64)> {
    let (i0, i1, wi) = locate(&matrix.maturities, maturity);
    let (j0, j1, wj) = locate(&matrix.tenors, tenor);
    let mut out = Vec::with_capacity(4);
    for (i, a) in [(i0, 1.0 - wi), (i1, wi)] {
        for (j, b) in [(j0, 1.0 - wj), (j1, wj)] {
            let w = a * b;
            if w > 0.0 && !out.iter().any(|(n, _)| *n == (i, j)) {
                out.push(((i, j), w));
            }
        }
    }
    out
}

/// Bilinear interpolation of (ln α, ln ν, artanh ρ) on the (maturity, tenor)
/// grid, clamped to the boundary outside it. Queries on a node return the
/// node's parameters unchanged.
pub fn interpolate_params(matrix: &SabrParamMatrix, maturity: f64, tenor: f64) -> SabrParams {
    let stencil = interpolation_stencil(matrix, maturity, tenor);
    if let [((i, j), _)] = stencil[..] {
        return matrix.at(i, j);
    }
    let mut x = Vector3::zeros();
    for &((i, j), w) in &stencil {
        let p = matrix.at(i, j);
        x += w * Vector3::new(p.alpha.ln(), p.nu.max(1e-300).ln(), p.rho.atanh());
    }
    SabrParams {
        alpha: x[0].exp(),
        beta: matrix.beta,
        nu: x[1].exp(),
        rho: x[2].tanh(),
        shift: matrix.shift,
    }
}
