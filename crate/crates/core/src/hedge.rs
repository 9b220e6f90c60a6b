//! Monte-Carlo delta-hedging study.
//!
//! Forward swap rates for every (start date, tenor) node of a parameter
//! matrix are simulated under SABR dynamics with one pair of normal draws per
//! time step shared by all nodes. A payer swaption on one node is hedged with
//! forward swaps; its delta comes either from the true node parameters or from
//! parameters recalibrated on a masked cube that was refilled by pseudo-Gibbs
//! imputation or by interpolation.
//!
//! The hedger predicts the price change over each rebalancing interval as
//! `m_t · ΔV^Swap`. The score of a path is the gap between `V_0` plus the
//! cumulated predictions and the final option value.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_slice, interpolate_params, locate, CalibrationOptions, ForwardMatrix, SabrParamMatrix, SmileSlice};
use crate::error::{Error, Result};
use crate::gibbs::{impute_many, random_mask, GibbsConfig};
use crate::interp::interpolate_cube;
use crate::sabr::{
    forward_swap_sensitivity, forward_swap_value, sabr_delta, sabr_normal_vol, sabr_price, DiscountCurve, SabrParams, DEFAULT_SHIFT,
    SwaptionKind, SwaptionSpec,
};
use crate::synth::{BootstrapHistory, ParamKind};
use crate::vae::VaeModel;
use crate::volcube::{decimal_to_bp, CubeGrid, VolCube};

/// Paths simulated and hedged together; bounds memory for large studies.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rebalancing {
    Week,
    Day,
    Hour,
    Minute,
}

impl Rebalancing {
    pub const ALL: [Rebalancing; 4] = [Rebalancing::Week, Rebalancing::Day, Rebalancing::Hour, Rebalancing::Minute];

    pub fn name(self) -> &'static str {
        match self {
            Rebalancing::Week => "week",
            Rebalancing::Day => "day",
            Rebalancing::Hour => "hour",
            Rebalancing::Minute => "minute",
        }
    }

    /// Period in simulation steps; it must be a whole number of them.
    pub fn steps(self, steps_per_day: usize) -> Result<usize> {
        let (num, den) = match self {
            Rebalancing::Week => (7 * steps_per_day, 1),
            Rebalancing::Day => (steps_per_day, 1),
            Rebalancing::Hour => (steps_per_day, 24),
            Rebalancing::Minute => (steps_per_day, 1440),
        };
        if num % den != 0 || num == 0 {
            return Err(Error::InvalidParameter(format!(
                "{}ly rebalancing needs a multiple of {den} steps per day, got {steps_per_day}",
                self.name()
            )));
        }
        Ok(num / den)
    }
}

impl std::str::FromStr for Rebalancing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rebalancing::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown rebalancing period '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Theoretical,
    Imputation,
    Interpolation,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Theoretical, Strategy::Imputation, Strategy::Interpolation];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Theoretical => "theoretical",
            Strategy::Imputation => "imputation",
            Strategy::Interpolation => "interpolation",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown hedging strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Hedging horizon in years; the hedged swaption expires at its end.
    pub horizon: f64,
    pub days_per_year: f64,
    /// Simulation steps per day.
    pub steps_per_day: usize,
    pub tiers: Vec<Rebalancing>,
    /// Days between recalibrations of the hedging parameters. Rebalances in
    /// between reuse the latest estimate.
    pub reestimate_every_days: usize,
    pub contract_tenor: f64,
    pub notional: f64,
    pub payments_per_year: u32,
    pub discount_rate: f64,
    pub mask_rate: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Distance above `−b` at which a forward is absorbed.
    pub absorption_epsilon: f64,
    pub gibbs: GibbsConfig,
    pub calibration: CalibrationOptions,
    /// Number of leading paths whose full ledgers are kept.
    pub keep_ledgers: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 1.0,
            days_per_year: 360.0,
            steps_per_day: 24,
            tiers: vec![Rebalancing::Week, Rebalancing::Day, Rebalancing::Hour],
            reestimate_every_days: 1,
            contract_tenor: 1.0,
            notional: 100_000.0,
            payments_per_year: 4,
            discount_rate: 0.01,
            mask_rate: 0.7,
            n_paths: 10_000,
            seed: 0,
            absorption_epsilon: 1e-6,
            gibbs: GibbsConfig {
                chain_length: 500,
                burn_in: 100,
                store_cap: 0,
                ..Default::default()
            },
            // filled cubes are rarely exact SABR smiles, so restarts would
            // fire on every fit for little gain
            calibration: CalibrationOptions {
                restart_above_rms_bp: None,
                ..CalibrationOptions::default()
            },
            keep_ledgers: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.horizon > 0.0 && self.days_per_year > 0.0) {
            return bad("horizon and days per year must be positive".into());
        }
        if self.steps_per_day == 0 {
            return bad("step size must be positive: steps per day is 0".into());
        }
        let days = self.horizon * self.days_per_year;
        if (days - days.round()).abs() > 1e-9 {
            return bad(format!("horizon {} is not a whole number of days", self.horizon));
        }
        if self.reestimate_every_days == 0 {
            return bad("re-estimation period must be at least one day".into());
        }
        for t in &self.tiers {
            t.steps(self.steps_per_day)?;
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask rate {} must lie in (0, 1)", self.mask_rate));
        }
        if !(self.notional > 0.0 && self.contract_tenor > 0.0) || self.payments_per_year == 0 {
            return bad("notional, tenor and payment frequency must be positive".into());
        }
        if !(self.absorption_epsilon > 0.0) {
            return bad("absorption epsilon must be positive".into());
        }
        self.gibbs.validate()
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon * self.days_per_year).round() as usize * self.steps_per_day
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.days_per_year * self.steps_per_day as f64)
    }

    fn reestimate_steps(&self) -> usize {
        self.reestimate_every_days * self.steps_per_day
    }

    fn curve(&self) -> DiscountCurve {
        DiscountCurve::flat(self.discount_rate)
    }
}

/// Parameters, initial forwards and grid of a hedging study. The hedged
/// swaption sits on the node (horizon, contract tenor).
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeSetup {
    pub truth: SabrParamMatrix,
    pub forwards: ForwardMatrix,
    pub grid: CubeGrid,
}

impl HedgeSetup {
    /// Noise-free bootstrap surface on `grid` (β = 0.5, ν = 0.05 at 1y × 1y)
    /// with flat initial forwards of `forward`.
    pub fn synthetic(grid: &CubeGrid, forward: f64) -> Result<Self> {
        let mut fields: [Vec<f64>; 3] = Default::default();
        for (p, kind) in ParamKind::ALL.iter().enumerate() {
            for &t in grid.maturities() {
                for &m in grid.tenors() {
                    fields[p].push(kind.transform().inverse(BootstrapHistory::surface(*kind, t, m)));
                }
            }
        }
        let [alpha, nu, rho] = fields;
        let truth = SabrParamMatrix::new(
            grid.maturities().to_vec(),
            grid.tenors().to_vec(),
            0.5,
            DEFAULT_SHIFT,
            alpha,
            nu,
            rho,
        )?;
        Ok(HedgeSetup {
            truth,
            forwards: ForwardMatrix::flat(grid, forward),
            grid: grid.clone(),
        })
    }

    pub fn validate(&self, config: &SimConfig) -> Result<()> {
        if self.truth.maturities != self.grid.maturities() || self.truth.tenors != self.grid.tenors() {
            return Err(Error::Grid("parameter matrix axes differ from the cube grid".into()));
        }
        self.forwards.check_grid(&self.grid)?;
        self.target_node(config)?;
        Ok(())
    }

    /// Matrix index of the hedged node.
    pub fn target_node(&self, config: &SimConfig) -> Result<(usize, usize)> {
        let find = |axis: &[f64], x: f64| axis.iter().position(|&a| (a - x).abs() < 1e-9);
        match (find(&self.truth.maturities, config.horizon), find(&self.truth.tenors, config.contract_tenor)) {
            (Some(i), Some(j)) => Ok((i, j)),
            _ => Err(Error::Grid(format!(
                "no grid node at maturity {} and tenor {}",
                config.horizon, config.contract_tenor
            ))),
        }
    }
}

/// One simulated scenario: all node forwards at every re-estimation date,
/// and the hedged node's forward at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPath {
    /// Steps between snapshots.
    pub snapshot_every: usize,
    /// `snapshots[s][i * n_tenors + j]` is the forward of node (i, j) at step
    /// `s * snapshot_every`.
    pub snapshots: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for a (purpose, path, date) triple derived from the study seed.
fn derived_seed(seed: u64, purpose: u64, path: u64, date: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ purpose) ^ path) ^ date)
}

/// Simulates paths `first..first + count`. Each path has its own generator;
/// at every step the same `(Z₁, Z₂)` drive every node, with
/// `dW₁ = Z₁√dt` and `dW₂ = (ρZ₁ + √(1−ρ²)Z₂)√dt` for the node's ρ. The
/// forward takes an Euler step with `max(F + b, 0)^β`, the volatility an
/// exact log-normal step; a forward reaching `−b + ε` is absorbed. A node
/// stops moving at its start date.
pub fn simulate_paths(
    matrix: &SabrParamMatrix,
    forwards: &ForwardMatrix,
    target: (usize, usize),
    config: &SimConfig,
    first: usize,
    count: usize,
) -> Result<Vec<SimulatedPath>> {
    config.validate()?;
    let (nm, nt) = matrix.dims();
    if forwards.maturities != matrix.maturities || forwards.tenors != matrix.tenors {
        return Err(Error::Grid("forward matrix axes differ from the parameter matrix".into()));
    }
    if (matrix.beta - 0.5).abs() > 1e-12 {
        log::warn!("simulating with beta {} rather than 0.5", matrix.beta);
    }
    let b = matrix.shift;
    for idx in 0..nm * nt {
        let (a, nu, rho) = (matrix.alpha[idx], matrix.nu[idx], matrix.rho[idx]);
        if !(a >= 0.0 && nu >= 0.0 && rho.abs() < 1.0 && a.is_finite() && nu.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid SABR parameters at node {idx}")));
        }
        if !(forwards.values[idx] + b > 0.0) {
            return Err(Error::NumericalDomain(format!("initial shifted forward at node {idx} is not positive")));
        }
    }
    let n_steps = config.n_steps();
    let dt = config.dt();
    let sq = dt.sqrt();
    let every = config.reestimate_steps();
    let floor = -b + config.absorption_epsilon;
    let target_idx = target.0 * nt + target.1;
    let expiry_step: Vec<usize> = (0..nm * nt)
        .map(|idx| ((matrix.maturities[idx / nt] / dt) - 1e-9).ceil().max(0.0) as usize)
        .collect();
    let corr: Vec<(f64, f64)> = matrix.rho.iter().map(|&r| (r, (1.0 - r * r).sqrt())).collect();

    Ok((first..first + count)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(p as u64);
            let mut f = forwards.values.clone();
            let mut sigma = matrix.alpha.clone();
            let mut absorbed = vec![false; nm * nt];
            let mut snapshots = Vec::with_capacity(n_steps / every + 1);
            let mut path = Vec::with_capacity(n_steps + 1);
            snapshots.push(f.clone());
            path.push(f[target_idx]);
            for n in 0..n_steps {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                for idx in 0..nm * nt {
                    if absorbed[idx] || n >= expiry_step[idx] {
                        continue;
                    }
                    let beta = matrix.beta;
                    let nu = matrix.nu[idx];
                    let (rho, rho_c) = corr[idx];
                    let level = (f[idx] + b).max(0.0).powf(beta);
                    f[idx] += sigma[idx] * level * sq * z1;
                    sigma[idx] *= (nu * sq * (rho * z1 + rho_c * z2) - 0.5 * nu * nu * dt).exp();
                    if f[idx] <= floor {
                        f[idx] = floor;
                        absorbed[idx] = true;
                    }
                }
                path.push(f[target_idx]);
                if (n + 1) % every == 0 {
                    snapshots.push(f.clone());
                }
            }
            SimulatedPath {
                snapshot_every: every,
                snapshots,
                target: path,
            }
        })
        .collect())
}

/// All paths of a study; see [`simulate_paths`].
pub fn simulate_sabr_paths(setup: &HedgeSetup, config: &SimConfig) -> Result<Vec<SimulatedPath>> {
    setup.validate(config)?;
    let target = setup.target_node(config)?;
    simulate_paths(&setup.truth, &setup.forwards, target, config, 0, config.n_paths)
}

/// Cube observed at time `t`: node (i, j) of residual maturity `T_i` gets the
/// forward of the swap starting at `t + T_i`, interpolated linearly in start
/// date between the unexpired simulated nodes of tenor j (flat beyond them),
/// and the vols of the node's true parameters at that forward. Returns the
/// cube with its node forwards.
pub fn theoretical_cube_at(
    t: f64,
    node_forwards: &[f64],
    truth: &SabrParamMatrix,
    grid: &CubeGrid,
) -> Result<(VolCube, ForwardMatrix)> {
    let (nm, nt) = truth.dims();
    if truth.maturities != grid.maturities() || truth.tenors != grid.tenors() {
        return Err(Error::Grid("parameter matrix axes differ from the cube grid".into()));
    }
    if node_forwards.len() != nm * nt {
        return Err(Error::Shape {
            expected: nm * nt,
            actual: node_forwards.len(),
        });
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("time {t} must be non-negative")));
    }
    let live: Vec<usize> = (0..nm).filter(|&i| truth.maturities[i] >= t - 1e-12).collect();
    if live.is_empty() {
        return Err(Error::InvalidParameter(format!("time {t} is past every simulated start date")));
    }
    let starts: Vec<f64> = live.iter().map(|&i| truth.maturities[i]).collect();
    let mut fwd = Vec::with_capacity(nm * nt);
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..nm {
        let (lo, hi, w) = locate(&starts, t + truth.maturities[i]);
        for j in 0..nt {
            let f = (1.0 - w) * node_forwards[live[lo] * nt + j] + w * node_forwards[live[hi] * nt + j];
            fwd.push(f);
            let p = truth.at(i, j);
            let t0 = grid.maturities()[i];
            for &o in grid.strike_offsets() {
                let v = sabr_normal_vol(&p, f, f + o, 0.0, t0).map_err(|e| e.at_slice(t0, grid.tenors()[j]))?;
                values.push(decimal_to_bp(v));
            }
        }
    }
    let cube = VolCube::full(grid.clone(), values)?;
    let forwards = ForwardMatrix {
        maturities: grid.maturities().to_vec(),
        tenors: grid.tenors().to_vec(),
        values: fwd,
    };
    Ok((cube, forwards))
}

/// Fits the slices around (maturity, tenor) on a filled cube and
/// interpolates their parameters there, as [`interpolate_params`] would on
/// a full calibration. A slice whose fit stalls contributes its best point;
/// the second value counts such slices.
pub fn calibrate_at(
    cube: &VolCube,
    forwards: &ForwardMatrix,
    maturity: f64,
    tenor: f64,
    opts: &CalibrationOptions,
) -> Result<(SabrParams, usize)> {
    let grid = cube.grid();
    let (nm, nt, _) = grid.dims();
    let (i0, i1, _) = locate(grid.maturities(), maturity);
    let (j0, j1, _) = locate(grid.tenors(), tenor);
    // entries outside the stencil are never read
    let mut alpha = vec![1.0; nm * nt];
    let mut nu = vec![1.0; nm * nt];
    let mut rho = vec![0.0; nm * nt];
    let mut stalled = 0;
    for i in [i0, i1] {
        for j in [j0, j1] {
            let idx = i * nt + j;
            let slice = SmileSlice::from_cube(cube, i, j, forwards.values[idx]).with_atm_weight(opts.atm_weight);
            let plain = CalibrationOptions {
                atm_weight: 1.0,
                ..*opts
            };
            let p = match calibrate_slice(&slice, &plain) {
                Ok((p, _)) => p,
                Err(Error::NoConvergence { best, .. }) if best.validate().is_ok() => {
                    stalled += 1;
                    best
                }
                Err(e) => return Err(e.at_slice(grid.maturities()[i], grid.tenors()[j])),
            };
            alpha[idx] = p.alpha;
            nu[idx] = p.nu;
            rho[idx] = p.rho;
        }
    }
    let m = SabrParamMatrix::new(
        grid.maturities().to_vec(),
        grid.tenors().to_vec(),
        opts.beta,
        opts.shift,
        alpha,
        nu,
        rho,
    )?;
    Ok((interpolate_params(&m, maturity, tenor), stalled))
}

/// Hedging parameters of each path at each re-estimation date, with the
/// number of slice fits that stalled or failed. A failed date keeps the
/// previous estimate.
fn estimate_params(
    strategy: Strategy,
    model: Option<&VaeModel>,
    setup: &HedgeSetup,
    config: &SimConfig,
    paths: &[SimulatedPath],
    first: usize,
) -> Result<(Vec<Vec<SabrParams>>, usize)> {
    let (ti, tj) = setup.target_node(config)?;
    let truth = setup.truth.at(ti, tj);
    if strategy == Strategy::Theoretical {
        return Ok((paths.iter().map(|_| vec![truth]).collect(), 0));
    }
    let model = match (strategy, model) {
        (Strategy::Imputation, None) => {
            return Err(Error::InvalidParameter("the imputation strategy needs a trained model".into()))
        }
        (_, m) => m,
    };
    let every = config.reestimate_steps();
    let n_dates = config.n_steps().div_ceil(every);
    let dt = config.dt();
    let mut out: Vec<Vec<SabrParams>> = paths.iter().map(|_| Vec::with_capacity(n_dates)).collect();
    let mut failures = 0;
    for d in 0..n_dates {
        let t = (d * every) as f64 * dt;
        let residual = config.horizon - t;
        let observed: Vec<(VolCube, ForwardMatrix)> = paths
            .par_iter()
            .enumerate()
            .map(|(p, path)| {
                let (cube, fwd) = theoretical_cube_at(t, &path.snapshots[d], &setup.truth, &setup.grid)?;
                let mask = random_mask(cube.grid().len(), config.mask_rate, derived_seed(config.seed, 1, (first + p) as u64, d as u64));
                Ok((cube.with_mask(&mask)?, fwd))
            })
            .collect::<Result<_>>()?;
        let filled: Vec<VolCube> = match strategy {
            Strategy::Imputation => {
                let cubes: Vec<VolCube> = observed.iter().map(|(c, _)| c.clone()).collect();
                let seeds: Vec<u64> = (0..paths.len())
                    .map(|p| derived_seed(config.seed, 2, (first + p) as u64, d as u64))
                    .collect();
                impute_many(model.expect("checked above"), &cubes, &config.gibbs, &seeds)?
                    .into_iter()
                    .map(|(c, _)| c)
                    .collect()
            }
            _ => observed.par_iter().map(|(c, _)| interpolate_cube(c)).collect::<Result<_>>()?,
        };
        let fits: Vec<Result<(SabrParams, usize)>> = filled
            .par_iter()
            .zip(&observed)
            .map(|(c, (_, fwd))| calibrate_at(c, fwd, residual, config.contract_tenor, &config.calibration))
            .collect();
        for (p, fit) in fits.into_iter().enumerate() {
            match fit {
                Ok((params, stalled)) => {
                    failures += stalled;
                    out[p].push(params)
                }
                Err(e) => {
                    let prev = *out[p].last().ok_or_else(|| {
                        Error::InvalidParameter(format!("initial calibration failed on path {}: {e}", first + p))
                    })?;
                    log::warn!("path {} day {}: calibration failed ({e}); keeping previous parameters", first + p, d * config.reestimate_every_days);
                    failures += 1;
                    out[p].push(prev);
                }
            }
        }
    }
    Ok((out, failures))
}

/// Value and delta; a zero-volatility model prices the intrinsic value.
fn price_and_delta(params: &SabrParams, spec: &SwaptionSpec, with_delta: bool) -> Result<(f64, f64)> {
    if params.alpha == 0.0 {
        let annuity = spec.notional * spec.pvbp();
        let moneyness = spec.kind.sign() * (spec.forward - spec.strike);
        let delta = if moneyness > 0.0 { spec.kind.sign() * annuity } else { 0.0 };
        return Ok((annuity * moneyness.max(0.0), delta));
    }
    let price = sabr_price(params, spec)?;
    let delta = if with_delta { sabr_delta(params, spec)? } else { 0.0 };
    Ok((price, delta))
}

fn payoff(spec: &SwaptionSpec) -> f64 {
    spec.notional * spec.pvbp() * (spec.kind.sign() * (spec.forward - spec.strike)).max(0.0)
}

/// One rebalancing interval `[t, t + period]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RebalanceRecord {
    pub step: usize,
    pub t: f64,
    pub forward: f64,
    /// Option value under the true parameters.
    pub price: f64,
    pub delta: f64,
    /// Forward swaps held, `m_t`.
    pub position: f64,
    /// `m_t · ΔV^Swap` over the interval.
    pub predicted: f64,
    /// Change of the option value over the interval.
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeLedger {
    pub path: usize,
    pub strategy: Strategy,
    pub tier: Rebalancing,
    pub strike: f64,
    pub records: Vec<RebalanceRecord>,
    pub initial_price: f64,
    pub final_price: f64,
    /// `V_0 + Σ predicted`.
    pub final_predicted: f64,
}

impl HedgeLedger {
    pub fn error(&self) -> f64 {
        self.final_predicted - self.final_price
    }
}

/// Running simple-regression moments.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    n: f64,
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        let dx = x - self.mx;
        self.mx += dx / self.n;
        let dy = y - self.my;
        self.my += dy / self.n;
        self.sxx += dx * (x - self.mx);
        self.syy += dy * (y - self.my);
        self.sxy += dx * (y - self.my);
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let dx = o.mx - self.mx;
        let dy = o.my - self.my;
        self.sxx += o.sxx + dx * dx * self.n * o.n / n;
        self.syy += o.syy + dy * dy * self.n * o.n / n;
        self.sxy += o.sxy + dx * dy * self.n * o.n / n;
        self.mx += dx * o.n / n;
        self.my += dy * o.n / n;
        self.n = n;
    }

    /// R² of the least-squares line of y on x; `None` without variation.
    fn r_squared(&self) -> Option<f64> {
        if self.n < 2.0 || self.sxx <= 0.0 {
            return None;
        }
        if self.syy <= 0.0 {
            return Some(1.0);
        }
        Some((self.sxy * self.sxy / (self.sxx * self.syy)).min(1.0))
    }
}

/// R² of the ordinary least-squares regression of predicted on actual
/// changes. `None` with fewer than two records or constant actual changes.
pub fn hedge_regression(ledger: &HedgeLedger) -> Option<f64> {
    let mut m = Moments::default();
    for r in &ledger.records {
        m.push(r.actual, r.predicted);
    }
    m.r_squared()
}

/// Hedges one path at one rebalancing period. `estimates[d]` is used from
/// re-estimation date `d` until the next one.
fn hedge_path(
    path: &SimulatedPath,
    params: &SabrParams,
    estimates: &[SabrParams],
    period: usize,
    config: &SimConfig,
    keep: bool,
) -> Result<(f64, Moments, Vec<RebalanceRecord>, f64, f64)> {
    let n = config.n_steps();
    let dt = config.dt();
    let every = config.reestimate_steps();
    let strike = path.target[0];
    let spec_at = |step: usize| -> Result<SwaptionSpec> {
        let t = step as f64 * dt;
        let f = path.target[step];
        if step == n {
            let mut s = SwaptionSpec::regular(f, strike, 0.0, config.horizon, config.contract_tenor, config.payments_per_year, config.notional, SwaptionKind::Payer, config.curve())?;
            s.t = config.horizon;
            return Ok(s);
        }
        SwaptionSpec::regular(f, strike, t, config.horizon, config.contract_tenor, config.payments_per_year, config.notional, SwaptionKind::Payer, config.curve())
    };
    let value = |spec: &SwaptionSpec, step: usize| -> Result<f64> {
        if step == n {
            Ok(payoff(spec))
        } else {
            Ok(price_and_delta(params, spec, false)?.0)
        }
    };

    let mut moments = Moments::default();
    let mut records = Vec::new();
    let mut step = 0;
    let mut spec = spec_at(0)?;
    let mut price = value(&spec, 0)?;
    let initial = price;
    let mut cumulated = price;
    while step < n {
        let next = (step + period).min(n);
        let est = &estimates[(step / every).min(estimates.len() - 1)];
        let (_, delta) = price_and_delta(est, &spec, true)?;
        let position = delta / forward_swap_sensitivity(&spec);
        let next_spec = spec_at(next)?;
        let next_price = value(&next_spec, next)?;
        let predicted = position * (forward_swap_value(&next_spec) - forward_swap_value(&spec));
        let actual = next_price - price;
        moments.push(actual, predicted);
        cumulated += predicted;
        if keep {
            records.push(RebalanceRecord {
                step,
                t: step as f64 * dt,
                forward: spec.forward,
                price,
                delta,
                position,
                predicted,
                actual,
            });
        }
        step = next;
        spec = next_spec;
        price = next_price;
    }
    Ok((cumulated - price, moments, records, initial, price))
}

/// Scores of one strategy at one rebalancing period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierResult {
    pub strategy: Strategy,
    pub tier: Rebalancing,
    /// RMSE of final hedging errors in % of notional.
    pub rmse_pct: f64,
    /// Mean final error in % of notional.
    pub mean_error_pct: f64,
    /// R² of predicted on actual changes over the tier's intervals, pooled
    /// across paths; `None` if undefined.
    pub r_squared: Option<f64>,
    /// R² on the first path alone.
    pub r_squared_first_path: Option<f64>,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeReport {
    pub seed: u64,
    pub n_paths: usize,
    pub hedged_params: SabrParams,
    pub results: Vec<TierResult>,
    /// Slice fits that stalled or failed, per strategy.
    pub calibration_failures: Vec<(Strategy, usize)>,
}

impl HedgeReport {
    pub fn get(&self, strategy: Strategy, tier: Rebalancing) -> Option<&TierResult> {
        self.results.iter().find(|r| r.strategy == strategy && r.tier == tier)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }
}

#[derive(Default)]
struct Accumulator {
    sum_sq: f64,
    sum: f64,
    n: usize,
    moments: Moments,
    first_path: Option<f64>,
}

/// Runs `strategies` on the same simulated paths and scores every tier.
/// Ledgers of the first `config.keep_ledgers` paths are returned.
pub fn run_hedge(
    strategies: &[Strategy],
    model: Option<&VaeModel>,
    setup: &HedgeSetup,
    config: &SimConfig,
) -> Result<(HedgeReport, Vec<HedgeLedger>)> {
    config.validate()?;
    setup.validate(config)?;
    if config.tiers.is_empty() || strategies.is_empty() || config.n_paths == 0 {
        return Err(Error::InvalidParameter("need at least one strategy, tier and path".into()));
    }
    if strategies.contains(&Strategy::Imputation) && model.is_none() {
        return Err(Error::InvalidParameter("the imputation strategy needs a trained model".into()));
    }
    let target = setup.target_node(config)?;
    let truth = setup.truth.at(target.0, target.1);
    let periods: Vec<usize> = config.tiers.iter().map(|t| t.steps(config.steps_per_day)).collect::<Result<_>>()?;
    let mut acc: Vec<Vec<Accumulator>> = strategies
        .iter()
        .map(|_| config.tiers.iter().map(|_| Accumulator::default()).collect())
        .collect();
    let mut failures = vec![0; strategies.len()];
    let mut ledgers = Vec::new();

    let mut first = 0;
    while first < config.n_paths {
        let count = CHUNK.min(config.n_paths - first);
        let paths = simulate_paths(&setup.truth, &setup.forwards, target, config, first, count)?;
        for (s, &strategy) in strategies.iter().enumerate() {
            let (estimates, fails) = estimate_params(strategy, model, setup, config, &paths, first)?;
            failures[s] += fails;
            for (k, &period) in periods.iter().enumerate() {
                let results: Vec<_> = paths
                    .par_iter()
                    .zip(&estimates)
                    .enumerate()
                    .map(|(p, (path, est))| hedge_path(path, &truth, est, period, config, first + p < config.keep_ledgers))
                    .collect::<Result<_>>()?;
                let a = &mut acc[s][k];
                for (p, (err, moments, records, initial, fin)) in results.into_iter().enumerate() {
                    a.sum_sq += err * err;
                    a.sum += err;
                    a.n += 1;
                    a.moments.merge(&moments);
                    if first + p == 0 {
                        a.first_path = moments.r_squared();
                    }
                    if first + p < config.keep_ledgers {
                        ledgers.push(HedgeLedger {
                            path: first + p,
                            strategy,
                            tier: config.tiers[k],
                            strike: paths[p].target[0],
                            records,
                            initial_price: initial,
                            final_price: fin,
                            final_predicted: fin + err,
                        });
                    }
                }
            }
        }
        first += count;
    }

    let pct = 100.0 / config.notional;
    let mut results = Vec::new();
    for (s, &strategy) in strategies.iter().enumerate() {
        for (k, &tier) in config.tiers.iter().enumerate() {
            let a = &acc[s][k];
            results.push(TierResult {
                strategy,
                tier,
                rmse_pct: (a.sum_sq / a.n as f64).sqrt() * pct,
                mean_error_pct: a.sum / a.n as f64 * pct,
                r_squared: a.moments.r_squared(),
                r_squared_first_path: a.first_path,
                n_paths: a.n,
            });
        }
    }
    ledgers.sort_by_key(|l| (l.path, l.strategy as u8, l.tier as u8));
    Ok((
        HedgeReport {
            seed: config.seed,
            n_paths: config.n_paths,
            hedged_params: truth,
            results,
            calibration_failures: strategies.iter().copied().zip(failures).collect(),
        },
        ledgers,
    ))
}

/// Ledger rows `path,strategy,tier,step,t,forward,price,delta,position,predicted,actual`.
pub fn write_ledger_csv(path: impl AsRef<Path>, ledgers: &[HedgeLedger]) -> Result<()> {
    let p = path.as_ref();
    let f = File::create(p).map_err(|e| Error::io(p, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(p, e);
    writeln!(w, "path,strategy,tier,step,t,forward,price,delta,position,predicted,actual").map_err(io)?;
    for l in ledgers {
        for r in &l.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                l.path,
                l.strategy.name(),
                l.tier.name(),
                r.step,
                r.t,
                r.forward,
                r.price,
                r.delta,
                r.position,
                r.predicted,
                r.actual
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::cube_from_params;

    fn small_grid() -> CubeGrid {
        CubeGrid::new(vec![0.5, 1.0, 2.0], vec![1.0, 2.0], vec![-0.01, 0.0, 0.01]).unwrap()
    }

    fn quick(n_paths: usize) -> SimConfig {
        SimConfig {
            steps_per_day: 1,
            tiers: vec![Rebalancing::Week, Rebalancing::Day],
            n_paths,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn rebalancing_periods() {
        assert_eq!(Rebalancing::Week.steps(24).unwrap(), 168);
        assert_eq!(Rebalancing::Hour.steps(24).unwrap(), 1);
        assert!(Rebalancing::Hour.steps(1).is_err());
        assert_eq!(Rebalancing::Minute.steps(1440).unwrap(), 1);
        assert_eq!("day".parse::<Rebalancing>().unwrap(), Rebalancing::Day);
        assert!(SimConfig { steps_per_day: 0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { mask_rate: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_vol_keeps_forwards_constant() {
        let g = small_grid();
        let mut s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        s.truth.alpha.iter_mut().for_each(|a| *a = 0.0);
        s.truth.nu.iter_mut().for_each(|a| *a = 0.0);
        let paths = simulate_sabr_paths(&s, &quick(3)).unwrap();
        for p in &paths {
            assert!(p.target.iter().all(|&f| f == 0.01));
            assert!(p.snapshots.iter().flatten().all(|&f| f == 0.01));
        }
    }

    #[test]
    fn nodes_with_equal_parameters_share_paths() {
        let g = small_grid();
        let mut s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        // nodes (1, 0) and (2, 0) get identical parameters
        for v in [&mut s.truth.alpha, &mut s.truth.nu, &mut s.truth.rho] {
            v[4] = v[2];
        }
        let cfg = SimConfig {
            horizon: 0.5,
            ..quick(2)
        };
        let paths = simulate_paths(&s.truth, &s.forwards, (0, 0), &cfg, 0, 2).unwrap();
        for p in &paths {
            for snap in &p.snapshots {
                assert_eq!(snap[2], snap[4]);
            }
        }
        let again = simulate_paths(&s.truth, &s.forwards, (0, 0), &cfg, 1, 1).unwrap();
        assert_eq!(again[0], paths[1]);
    }

    #[test]
    fn forwards_are_martingales_without_vol_of_vol() {
        let g = CubeGrid::new(vec![1.0], vec![1.0], vec![0.0]).unwrap();
        let mut s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        s.truth.nu[0] = 0.0;
        let cfg = SimConfig {
            n_paths: 10_000,
            ..quick(10_000)
        };
        let paths = simulate_sabr_paths(&s, &cfg).unwrap();
        let ends: Vec<f64> = paths.iter().map(|p| *p.target.last().unwrap()).collect();
        let n = ends.len() as f64;
        let mean = ends.iter().sum::<f64>() / n;
        let sd = (ends.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(sd > 0.003, "{sd}");
        assert!((mean - 0.01).abs() < 4.0 * sd / n.sqrt(), "{mean} ± {}", sd / n.sqrt());
    }

    #[test]
    fn forwards_stay_above_the_absorbing_floor() {
        let g = CubeGrid::new(vec![1.0], vec![1.0], vec![0.0]).unwrap();
        let mut s = HedgeSetup::synthetic(&g, -0.035).unwrap();
        s.truth.alpha[0] = 0.2;
        let paths = simulate_sabr_paths(&s, &quick(200)).unwrap();
        let floor = -s.truth.shift + 1e-6;
        assert!(paths.iter().flat_map(|p| &p.target).all(|&f| f >= floor));
        assert!(paths.iter().any(|p| *p.target.last().unwrap() == floor));
    }

    #[test]
    fn theoretical_cube_at_start_matches_cube_from_params() {
        let g = small_grid();
        let s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        let mut fwd = s.forwards.clone();
        for (i, v) in fwd.values.iter_mut().enumerate() {
            *v += 0.001 * i as f64;
        }
        let (cube, f) = theoretical_cube_at(0.0, &fwd.values, &s.truth, &g).unwrap();
        assert_eq!(f, fwd);
        assert_eq!(cube, cube_from_params(&s.truth, &fwd, &g).unwrap());
    }

    #[test]
    fn theoretical_cube_flat_smile_without_skew() {
        let g = small_grid();
        let mut s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        s.truth.beta = 0.0;
        s.truth.nu.iter_mut().for_each(|v| *v = 0.0);
        let (cube, _) = theoretical_cube_at(0.25, &s.forwards.values, &s.truth, &g).unwrap();
        for idx in 0..g.len() {
            let (i, j, _) = g.unflatten_index(idx).unwrap();
            let a = s.truth.at(i, j).alpha;
            assert!((cube.values()[idx] - decimal_to_bp(a)).abs() < 1e-9 * decimal_to_bp(a));
        }
    }

    #[test]
    fn theoretical_cube_interpolates_start_dates() {
        let g = small_grid();
        let s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        // forward of node (i, j) is 0.01 · T_i + 0.001 · j, linear in start date
        let fwd: Vec<f64> = (0..6).map(|idx| 0.01 * g.maturities()[idx / 2] + 0.001 * (idx % 2) as f64).collect();
        let (_, f) = theoretical_cube_at(0.5, &fwd, &s.truth, &g).unwrap();
        // start 1.0 and 1.5 interpolate, 2.5 is flat beyond the last node
        assert!((f.get(0, 1) - (0.01 + 0.001)).abs() < 1e-15);
        assert!((f.get(1, 0) - 0.015).abs() < 1e-15);
        assert!((f.get(2, 0) - 0.02).abs() < 1e-15);
        assert!(theoretical_cube_at(2.5, &fwd, &s.truth, &g).is_err());
    }

    #[test]
    fn unmasked_theoretical_cube_recalibrates_to_truth() {
        let g = CubeGrid::new(vec![0.5, 1.0, 2.0], vec![1.0, 2.0], vec![-0.02, -0.01, 0.0, 0.01, 0.02]).unwrap();
        let s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        let fwd: Vec<f64> = (0..6).map(|i| 0.008 + 0.001 * i as f64).collect();
        let (cube, f) = theoretical_cube_at(0.3, &fwd, &s.truth, &g).unwrap();
        let (p, stalled) = calibrate_at(&cube, &f, 1.0, 1.0, &CalibrationOptions::default()).unwrap();
        assert_eq!(stalled, 0);
        let want = s.truth.at(1, 0);
        assert!((p.alpha / want.alpha - 1.0).abs() < 1e-3, "{p:?} {want:?}");
        assert!((p.nu - want.nu).abs() < 5e-2);
        assert!((p.rho - want.rho).abs() < 5e-2);
    }

    #[test]
    fn regression_r_squared() {
        let recs = |pairs: &[(f64, f64)]| HedgeLedger {
            path: 0,
            strategy: Strategy::Theoretical,
            tier: Rebalancing::Day,
            strike: 0.0,
            records: pairs
                .iter()
                .map(|&(a, p)| RebalanceRecord {
                    step: 0,
                    t: 0.0,
                    forward: 0.0,
                    price: 0.0,
                    delta: 0.0,
                    position: 0.0,
                    predicted: p,
                    actual: a,
                })
                .collect(),
            initial_price: 0.0,
            final_price: 0.0,
            final_predicted: 0.0,
        };
        assert_eq!(hedge_regression(&recs(&[(1.0, 1.0), (2.0, 2.0), (-3.0, -3.0)])), Some(1.0));
        assert_eq!(hedge_regression(&recs(&[(1.0, 1.0)])), None);
        assert_eq!(hedge_regression(&recs(&[(1.0, 1.0), (1.0, 2.0)])), None);
        let r = hedge_regression(&recs(&[(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)])).unwrap();
        assert!((r - 0.25).abs() < 1e-12);

        let mut a = Moments::default();
        let mut b = Moments::default();
        let mut all = Moments::default();
        for i in 0..50 {
            let (x, y) = (i as f64, ((i * 7) % 11) as f64);
            if i < 20 { a.push(x, y) } else { b.push(x, y) }
            all.push(x, y);
        }
        a.merge(&b);
        assert!((a.r_squared().unwrap() - all.r_squared().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_vol_world_hedges_exactly() {
        let g = small_grid();
        let mut s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        s.truth.alpha.iter_mut().for_each(|a| *a = 0.0);
        s.truth.nu.iter_mut().for_each(|a| *a = 0.0);
        let cfg = SimConfig {
            keep_ledgers: 2,
            ..quick(4)
        };
        let (report, ledgers) = run_hedge(&[Strategy::Theoretical], None, &s, &cfg).unwrap();
        for r in &report.results {
            assert_eq!(r.rmse_pct, 0.0);
        }
        for l in &ledgers {
            assert!(l.records.iter().all(|r| r.predicted == 0.0 && r.actual == 0.0));
        }
    }

    #[test]
    fn positions_are_delta_neutral() {
        let g = small_grid();
        let s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        let cfg = SimConfig {
            keep_ledgers: 1,
            ..quick(2)
        };
        let (_, ledgers) = run_hedge(&[Strategy::Theoretical, Strategy::Interpolation], None, &s, &cfg).unwrap();
        for l in &ledgers {
            for r in &l.records {
                let spec = SwaptionSpec::regular(r.forward, l.strike, r.t, 1.0, 1.0, 4, 1e5, SwaptionKind::Payer, cfg.curve()).unwrap();
                let resid = r.position * forward_swap_sensitivity(&spec) - r.delta;
                assert!(resid.abs() <= 1e-12 * r.delta.abs().max(1e-300), "{resid}");
            }
        }
    }

    #[test]
    fn theoretical_hedge_improves_with_frequency_and_is_deterministic() {
        let g = small_grid();
        let s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        let cfg = SimConfig {
            steps_per_day: 24,
            tiers: vec![Rebalancing::Week, Rebalancing::Day, Rebalancing::Hour],
            ..quick(40)
        };
        let (a, ledgers) = run_hedge(&[Strategy::Theoretical], None, &s, &cfg).unwrap();
        let rmse: Vec<f64> = a.results.iter().map(|r| r.rmse_pct).collect();
        assert!(rmse[0] > rmse[1] && rmse[1] > rmse[2], "{rmse:?}");
        let day = a.get(Strategy::Theoretical, Rebalancing::Day).unwrap();
        assert!(day.r_squared.unwrap() > 0.99);
        assert_eq!(ledgers.len(), 3);
        assert_eq!(ledgers[1].records.len(), 360);
        let (b, _) = run_hedge(&[Strategy::Theoretical], None, &s, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strategies_share_the_simulated_paths() {
        let g = small_grid();
        let s = HedgeSetup::synthetic(&g, 0.01).unwrap();
        let cfg = SimConfig {
            keep_ledgers: 1,
            reestimate_every_days: 30,
            ..quick(2)
        };
        let (_, both) = run_hedge(&[Strategy::Theoretical, Strategy::Interpolation], None, &s, &cfg).unwrap();
        let (_, alone) = run_hedge(&[Strategy::Theoretical], None, &s, &cfg).unwrap();
        let pick = |ls: &[HedgeLedger], st| ls.iter().find(|l| l.strategy == st && l.tier == Rebalancing::Day).unwrap().clone();
        let (t, i) = (pick(&both, Strategy::Theoretical), pick(&both, Strategy::Interpolation));
        assert_eq!(t, pick(&alone, Strategy::Theoretical));
        let fwd = |l: &HedgeLedger| l.records.iter().map(|r| (r.forward, r.price, r.actual)).collect::<Vec<_>>();
        assert_eq!(fwd(&t), fwd(&i));
        assert!(run_hedge(&[Strategy::Imputation], None, &s, &cfg).is_err());
    }
}
