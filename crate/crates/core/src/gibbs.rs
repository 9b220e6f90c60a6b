//! Pseudo-Gibbs imputation of missing cube entries.
//!
//! Starting from `x⁰_miss = 0` in standardized space, each step draws
//! `z ~ q(z | x_obs, x_miss)` and then `x_miss ~ p(x_miss | z)` from the
//! decoder, leaving observed coordinates untouched. The imputed value is the
//! average of `x_miss` over steps `M..=T` after a burn-in of `M` steps.
//!
//! Monte-Carlo standard errors come from overlapping batch means. They
//! measure how precisely the chain has estimated `E_q[x_miss | x_obs]`,
//! whatever this value will be; they are not intervals for the true masked
//! quotes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vae::VaeModel;
use crate::volcube::VolCube;

/// Floor for imputed vols, bp.
const MIN_IMPUTED_BP: f64 = 0.01;
/// Largest number of stored post-burn-in values (steps × missing coordinates).
const DEFAULT_STORE_CAP: usize = 20_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    /// Total number of steps `T`.
    pub chain_length: usize,
    /// Steps discarded before averaging, `M`.
    pub burn_in: usize,
    pub seed: u64,
    /// OBM batch length; `None` uses ⌊√n⌋.
    pub obm_batch: Option<usize>,
    /// Record the encoder mean of the running-mean cube every this many
    /// steps (0 disables).
    pub trace_every: usize,
    /// Cap on stored post-burn-in values; beyond it only running statistics
    /// are kept.
    pub store_cap: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            chain_length: 2000,
            burn_in: 100,
            seed: 0,
            obm_batch: None,
            trace_every: 0,
            store_cap: DEFAULT_STORE_CAP,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.chain_length {
            return Err(Error::InvalidParameter(format!(
                "burn-in {} must be below chain length {}",
                self.burn_in, self.chain_length
            )));
        }
        Ok(())
    }

    /// Number of averaged steps, `T − M`.
    pub fn n_kept(&self) -> usize {
        self.chain_length - self.burn_in
    }

    pub fn batch_length(&self) -> usize {
        self.obm_batch
            .unwrap_or_else(|| (self.n_kept() as f64).sqrt().floor() as usize)
            .max(1)
    }
}

/// Overlapping-batch-means standard error of the mean of `values`.
///
/// `σ̂² = n·b / ((n − b)(n − b + 1)) · Σ_j (Ȳ_j − Ȳ)²` over the `n − b + 1`
/// batches of length `b`; the result is `σ̂ / √n`.
pub fn obm_standard_error(values: &[f64], b: usize) -> Result<f64> {
    let n = values.len();
    if b == 0 || n < 2 * b {
        return Err(Error::InsufficientData(format!(
            "OBM needs at least 2b = {} values, got {n}",
            2 * b
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut window: f64 = values[..b].iter().sum();
    let mut ss = (window / b as f64 - mean).powi(2);
    for j in 1..=(n - b) {
        window += values[j + b - 1] - values[j - 1];
        ss += (window / b as f64 - mean).powi(2);
    }
    Ok(obm_se_from_sum(ss, n, b))
}

fn obm_se_from_sum(ss: f64, n: usize, b: usize) -> f64 {
    let (nf, bf) = (n as f64, b as f64);
    let var = nf * bf / ((nf - bf) * (nf - bf + 1.0)) * ss;
    (var.max(0.0) / nf).sqrt()
}

/// Streaming OBM over many coordinates with batch length fixed in advance.
/// Batch means are accumulated relative to the first value of each
/// coordinate to limit cancellation.
#[derive(Debug, Clone)]
pub struct ObmAccumulator {
    b: usize,
    n: usize,
    dim: usize,
    shift: Vec<f64>,
    ring: Vec<f64>,
    window: Vec<f64>,
    total: Vec<f64>,
    sum_bm: Vec<f64>,
    sum_bm2: Vec<f64>,
}

impl ObmAccumulator {
    pub fn new(dim: usize, b: usize) -> Self {
        ObmAccumulator {
            b: b.max(1),
            n: 0,
            dim,
            shift: vec![0.0; dim],
            ring: vec![0.0; dim * b.max(1)],
            window: vec![0.0; dim],
            total: vec![0.0; dim],
            sum_bm: vec![0.0; dim],
            sum_bm2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        if self.n == 0 {
            self.shift.copy_from_slice(x);
        }
        let slot = self.n % self.b;
        let bf = self.b as f64;
        for c in 0..self.dim {
            let v = x[c] - self.shift[c];
            let r = &mut self.ring[c * self.b + slot];
            if self.n >= self.b {
                self.window[c] -= *r;
            }
            *r = v;
            self.window[c] += v;
            self.total[c] += v;
            if self.n + 1 >= self.b {
                let bm = self.window[c] / bf;
                self.sum_bm[c] += bm;
                self.sum_bm2[c] += bm * bm;
            }
        }
        self.n += 1;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|c| self.shift[c] + self.total[c] / self.n as f64)
            .collect()
    }

    /// Per-coordinate standard errors; `None` while `n < 2b`.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        if self.n < 2 * self.b {
            return None;
        }
        let batches = (self.n - self.b + 1) as f64;
        Some(
            (0..self.dim)
                .map(|c| {
                    let m = self.total[c] / self.n as f64;
                    let ss = self.sum_bm2[c] - 2.0 * m * self.sum_bm[c] + batches * m * m;
                    obm_se_from_sum(ss, self.n, self.b)
                })
                .collect(),
        )
    }
}

/// Boolean observation mask with `round(rate · n)` missing entries chosen
/// uniformly, always leaving at least one observed entry.
pub fn random_mask(n: usize, missing_rate: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_mask_with(n, missing_rate, &mut rng)
}

pub fn random_mask_with<R: Rng>(n: usize, missing_rate: f64, rng: &mut R) -> Vec<bool> {
    let n_missing = ((missing_rate.clamp(0.0, 1.0) * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut mask = vec![true; n];
    for &i in &idx[..n_missing] {
        mask[i] = false;
    }
    mask
}

/// Draws from `N(0, 1)` into `buf`.
fn fill_normal<R: Rng>(rng: &mut R, buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// One pseudo-Gibbs step on standardized rows `x` (one chain per row).
/// Missing coordinates of row `r` are `missing[r]`; each chain draws from its
/// own generator. Returns the encoder means used for the latent draw.
pub fn gibbs_step_batch<R: Rng>(
    model: &VaeModel,
    x: &mut Array2<f64>,
    missing: &[Vec<usize>],
    rngs: &mut [R],
) -> Result<Array2<f64>> {
    let (n, d) = (x.nrows(), model.latent_dim());
    let (mu_z, lv_z) = model.encode_batch(x.view())?;
    let mut z = Array2::zeros((n, d));
    let mut eps = vec![0.0; d];
    for r in 0..n {
        fill_normal(&mut rngs[r], &mut eps);
        for u in 0..d {
            z[[r, u]] = mu_z[[r, u]] + (0.5 * lv_z[[r, u]]).exp() * eps[u];
        }
    }
    let (mu_x, lv_x) = model.decode_batch(z.view())?;
    for r in 0..n {
        for &i in &missing[r] {
            let e: f64 = rngs[r].sample(StandardNormal);
            x[[r, i]] = mu_x[[r, i]] + (0.5 * lv_x[[r, i]]).exp() * e;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gibbs state".into()));
    }
    Ok(mu_z)
}

/// Single-chain step on a standardized vector. Returns `(z, x_miss)`.
pub fn gibbs_step<R: Rng>(model: &VaeModel, x: &mut [f64], missing: &[usize], rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = model.data_dim();
    if x.len() != k {
        return Err(Error::Shape {
            expected: k,
            actual: x.len(),
        });
    }
    let d = model.latent_dim();
    let (mu_z, var_z) = model.encode(x)?;
    let mut eps = vec![0.0; d];
    fill_normal(rng, &mut eps);
    let z: Vec<f64> = (0..d).map(|u| mu_z[u] + var_z[u].sqrt() * eps[u]).collect();
    let (mu_x, var_x) = model.decode(&z)?;
    for &i in missing {
        let e: f64 = rng.sample(StandardNormal);
        x[i] = mu_x[i] + var_x[i].sqrt() * e;
    }
    Ok((z, missing.iter().map(|&i| x[i]).collect()))
}

/// Chain output for one cube. Values are in basis points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsChain {
    /// Flat cube indices of the imputed coordinates.
    pub missing: Vec<usize>,
    /// Post-burn-in average of the draws, per missing coordinate (bp).
    pub mean: Vec<f64>,
    /// OBM standard error per missing coordinate.
    pub standard_errors: Vec<f64>,
    pub batch_length: usize,
    pub n_kept: usize,
    /// Kept draws, one vector per step, while under the store cap.
    pub samples: Vec<Vec<f64>>,
    /// `(step, encoder mean of the running-mean cube)` when traced.
    pub latent_path: Vec<(usize, Vec<f64>)>,
}

impl GibbsChain {
    fn empty() -> Self {
        GibbsChain {
            missing: Vec::new(),
            mean: Vec::new(),
            standard_errors: Vec::new(),
            batch_length: 0,
            n_kept: 0,
            samples: Vec::new(),
            latent_path: Vec::new(),
        }
    }

    /// `t,coord,value` for stored draws; `t` counts kept steps from 0 and
    /// `coord` is the flat cube index. At most `max_rows` rows.
    pub fn write_samples_csv(&self, path: impl AsRef<Path>, max_rows: usize) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(f));
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["t", "coord", "value"]).map_err(io)?;
        let mut rows = 0;
        'outer: for (t, s) in self.samples.iter().enumerate() {
            for (c, v) in self.missing.iter().zip(s) {
                if rows >= max_rows {
                    break 'outer;
                }
                w.write_record([t.to_string(), c.to_string(), v.to_string()]).map_err(io)?;
                rows += 1;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn obm_report(&self) -> ObmReport {
        let mean_se = if self.standard_errors.is_empty() {
            0.0
        } else {
            self.standard_errors.iter().sum::<f64>() / self.standard_errors.len() as f64
        };
        ObmReport {
            n_kept: self.n_kept,
            batch_length: self.batch_length,
            mean_standard_error_bp: mean_se,
            max_standard_error_bp: self.standard_errors.iter().cloned().fold(0.0, f64::max),
            coordinates: self
                .missing
                .iter()
                .zip(self.mean.iter().zip(&self.standard_errors))
                .map(|(&coord, (&mean_bp, &se_bp))| ObmEntry { coord, mean_bp, se_bp })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObmEntry {
    pub coord: usize,
    pub mean_bp: f64,
    pub se_bp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObmReport {
    pub n_kept: usize,
    pub batch_length: usize,
    pub mean_standard_error_bp: f64,
    pub max_standard_error_bp: f64,
    pub coordinates: Vec<ObmEntry>,
}

/// Imputes the missing entries of one cube.
pub fn impute(model: &VaeModel, cube: &VolCube, config: &GibbsConfig) -> Result<(VolCube, GibbsChain)> {
    let mut out = impute_many(model, std::slice::from_ref(cube), config, &[config.seed])?;
    Ok(out.pop().expect("one chain"))
}

/// Imputes several cubes with one chain each, advanced in lockstep so that
/// network passes are batched. Chain `c` uses a generator seeded with
/// `seeds[c]`; its result does not depend on the other chains.
pub fn impute_many(
    model: &VaeModel,
    cubes: &[VolCube],
    config: &GibbsConfig,
    seeds: &[u64],
) -> Result<Vec<(VolCube, GibbsChain)>> {
    config.validate()?;
    if seeds.len() != cubes.len() {
        return Err(Error::Shape {
            expected: cubes.len(),
            actual: seeds.len(),
        });
    }
    let k = model.data_dim();
    for c in cubes {
        if c.values().len() != k {
            return Err(Error::Shape {
                expected: k,
                actual: c.values().len(),
            });
        }
        if c.n_observed() == 0 {
            return Err(Error::InsufficientData("cube has no observed values".into()));
        }
    }
    let st = &model.standardizer;
    let mut results: Vec<Option<(VolCube, GibbsChain)>> = cubes
        .iter()
        .map(|c| c.is_fully_observed().then(|| (c.clone(), GibbsChain::empty())))
        .collect();
    let active: Vec<usize> = (0..cubes.len()).filter(|&c| results[c].is_none()).collect();
    if active.is_empty() {
        return Ok(results.into_iter().map(Option::unwrap).collect());
    }

    let missing: Vec<Vec<usize>> = active
        .iter()
        .map(|&c| (0..k).filter(|&i| !cubes[c].mask()[i]).collect())
        .collect();
    let mut x = Array2::zeros((active.len(), k));
    for (r, &c) in active.iter().enumerate() {
        let cube = &cubes[c];
        for i in 0..k {
            if cube.mask()[i] {
                x[[r, i]] = (cube.values()[i] - st.mean[i]) / st.std[i];
            }
        }
    }
    #[cfg(debug_assertions)]
    let observed_snapshot = x.clone();

    let mut rngs: Vec<ChaCha8Rng> = active.iter().map(|&c| ChaCha8Rng::seed_from_u64(seeds[c])).collect();
    let b = config.batch_length();
    let mut acc: Vec<ObmAccumulator> = missing.iter().map(|m| ObmAccumulator::new(m.len(), b)).collect();
    let store = missing.iter().map(|m| config.n_kept() * m.len()).sum::<usize>() <= config.store_cap;
    let mut samples: Vec<Vec<Vec<f64>>> = vec![Vec::new(); active.len()];
    let mut paths: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); active.len()];
    // running mean over all steps so far, for the latent trace
    let mut running = if config.trace_every > 0 { Some(x.clone()) } else { None };
    if let Some(run) = &running {
        record_trace(model, run, 0, &mut paths)?;
    }

    let mut buf = Vec::new();
    for t in 1..=config.chain_length {
        gibbs_step_batch(model, &mut x, &missing, &mut rngs)?;
        #[cfg(debug_assertions)]
        for (r, &c) in active.iter().enumerate() {
            for i in 0..k {
                if cubes[c].mask()[i] {
                    debug_assert_eq!(x[[r, i]], observed_snapshot[[r, i]]);
                }
            }
        }
        if t > config.burn_in {
            for r in 0..active.len() {
                buf.clear();
                buf.extend(missing[r].iter().map(|&i| x[[r, i]]));
                acc[r].push(&buf);
                if store {
                    samples[r].push(missing[r].iter().map(|&i| x[[r, i]] * st.std[i] + st.mean[i]).collect());
                }
            }
        }
        if let Some(run) = running.as_mut() {
            let w = 1.0 / t as f64;
            for r in 0..active.len() {
                for &i in &missing[r] {
                    run[[r, i]] += w * (x[[r, i]] - run[[r, i]]);
                }
            }
            if t % config.trace_every == 0 || t == config.chain_length {
                record_trace(model, run, t, &mut paths)?;
            }
        }
    }

    for (r, &c) in active.iter().enumerate() {
        let cube = &cubes[c];
        let mean_std = acc[r].mean();
        let se_std = acc[r].standard_errors();
        let mut values = cube.values().to_vec();
        let mut mean = Vec::with_capacity(missing[r].len());
        for (&i, &m) in missing[r].iter().zip(&mean_std) {
            let v = m * st.std[i] + st.mean[i];
            mean.push(v);
            if v < MIN_IMPUTED_BP {
                log::warn!("imputed value {v} bp at index {i} floored to {MIN_IMPUTED_BP}");
            }
            values[i] = v.max(MIN_IMPUTED_BP);
        }
        let standard_errors = match se_std {
            Some(se) => missing[r].iter().zip(se).map(|(&i, s)| s * st.std[i]).collect(),
            None => vec![f64::NAN; missing[r].len()],
        };
        let imputed = VolCube::full(cube.grid().clone(), values)?;
        let chain = GibbsChain {
            missing: missing[r].clone(),
            mean,
            standard_errors,
            batch_length: b,
            n_kept: config.n_kept(),
            samples: std::mem::take(&mut samples[r]),
            latent_path: std::mem::take(&mut paths[r]),
        };
        results[c] = Some((imputed, chain));
    }
    Ok(results.into_iter().map(Option::unwrap).collect())
}

fn record_trace(model: &VaeModel, run: &Array2<f64>, t: usize, paths: &mut [Vec<(usize, Vec<f64>)>]) -> Result<()> {
    let mu = model.latent_means(run.view())?;
    for (r, p) in paths.iter_mut().enumerate() {
        p.push((t, mu.row(r).to_vec()));
    }
    Ok(())
}

/// Principal-component view of latent encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrace {
    /// Latent mean of the reference set.
    pub center: Vec<f64>,
    /// Principal directions, largest variance first (at most two).
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
    pub reference: Vec<Vec<f64>>,
    /// `(step, coordinates)` of the chain's running-mean encodings.
    pub path: Vec<(usize, Vec<f64>)>,
}

impl LatentTrace {
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(z.iter().zip(&self.center)).map(|(w, (v, m))| w * (v - m)).sum())
            .collect()
    }

    /// `kind,step,pc1,pc2`; `kind` is `reference`, `path` or `target`.
    pub fn write_csv(&self, path: impl AsRef<Path>, target: Option<&[f64]>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        let fmt = |p: &[f64]| -> String {
            (0..2)
                .map(|i| p.get(i).map(|v| v.to_string()).unwrap_or_default())
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(w, "kind,step,pc1,pc2").map_err(io)?;
        for (i, p) in self.reference.iter().enumerate() {
            writeln!(w, "reference,{i},{}", fmt(p)).map_err(io)?;
        }
        for (t, p) in &self.path {
            writeln!(w, "path,{t},{}", fmt(p)).map_err(io)?;
        }
        if let Some(z) = target {
            writeln!(w, "target,,{}", fmt(&self.project(z))).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// PCA of the encoder means of `reference` rows (standardized data), with
/// the chain's traced latent path projected into the same basis. Directions
/// with no variance are dropped with a warning.
pub fn latent_trace(model: &VaeModel, chain: &GibbsChain, reference: ArrayView2<f64>) -> Result<LatentTrace> {
    if reference.nrows() < 2 {
        return Err(Error::InsufficientData("latent trace needs at least 2 reference rows".into()));
    }
    let mu = model.latent_means(reference)?;
    let center = mu.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let d = mu.ncols();
    let centered = &mu - &ndarray::ArrayView1::from(&center[..]);
    let cov = centered.t().dot(&centered) / (mu.nrows() - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut components = Vec::new();
    let mut variances = Vec::new();
    for &o in order.iter().take(2) {
        let v = eig.eigenvalues[o];
        if v <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            log::warn!("latent covariance is rank-deficient; dropping a component");
            continue;
        }
        let mut c: Vec<f64> = eig.eigenvectors.column(o).iter().copied().collect();
        // fix the sign so the largest loading is positive
        let big = c.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(c);
        variances.push(v);
    }
    let mut trace = LatentTrace {
        center,
        components,
        variances,
        reference: Vec::new(),
        path: Vec::new(),
    };
    trace.reference = mu.rows().into_iter().map(|r| trace.project(r.as_slice().unwrap())).collect();
    trace.path = chain.latent_path.iter().map(|(t, z)| (*t, trace.project(z))).collect();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::{Activation, VaeArch, LOGVAR_MIN};
    use crate::volcube::CubeGrid;

    /// Stationary AR(1) with unit marginal variance.
    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 - phi * phi).sqrt();
        let mut x: f64 = rng.sample(StandardNormal);
        (0..n)
            .map(|_| {
                x = phi * x + sd * rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect()
    }

    #[test]
    fn obm_constant_and_short_chains() {
        assert_eq!(obm_standard_error(&[2.5; 100], 10).unwrap(), 0.0);
        assert!(obm_standard_error(&[1.0; 19], 10).is_err());
    }

    #[test]
    fn obm_iid_and_ar1() {
        let iid = ar1(10_000, 0.0, 1);
        let se = obm_standard_error(&iid, 100).unwrap();
        assert!((se / 0.01 - 1.0).abs() < 0.3, "{se}");

        let phi = 0.9;
        let n = 100_000;
        let xs = ar1(n, phi, 2);
        let se = obm_standard_error(&xs, (n as f64).sqrt() as usize).unwrap();
        let want = ((1.0 + phi) / (1.0 - phi)).sqrt() / (n as f64).sqrt();
        assert!((se / want - 1.0).abs() < 0.3, "{se} vs {want}");
    }

    #[test]
    fn streaming_obm_matches_batch() {
        let a = ar1(5000, 0.5, 3);
        let b: Vec<f64> = ar1(5000, -0.3, 4).iter().map(|v| 100.0 + v).collect();
        let mut acc = ObmAccumulator::new(2, 70);
        for t in 0..a.len() {
            acc.push(&[a[t], b[t]]);
        }
        let se = acc.standard_errors().unwrap();
        assert!((se[0] - obm_standard_error(&a, 70).unwrap()).abs() < 1e-12);
        assert!((se[1] - obm_standard_error(&b, 70).unwrap()).abs() < 1e-12);
        let mean = acc.mean();
        assert!((mean[1] - b.iter().sum::<f64>() / 5000.0).abs() < 1e-10);
    }

    #[test]
    fn mask_generator() {
        let m = random_mask(336, 0.796, 5);
        assert_eq!(m.iter().filter(|&&o| !o).count(), 267);
        assert_eq!(m, random_mask(336, 0.796, 5));
        assert_ne!(m, random_mask(336, 0.796, 6));
        assert_eq!(random_mask(4, 1.0, 0).iter().filter(|&&o| o).count(), 1);
    }

    fn tiny_grid() -> CubeGrid {
        CubeGrid::new(vec![1.0], vec![1.0, 2.0], vec![-0.01, 0.0, 0.01]).unwrap()
    }

    fn random_model(seed: u64) -> VaeModel {
        let arch = VaeArch {
            data_dim: 6,
            latent_dim: 2,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
            activation: Activation::Relu,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = VaeModel::init(arch, crate::vae::Init::Normal { std: 0.4 }, &mut rng).unwrap();
        m.standardizer.mean = vec![50.0; 6];
        m.standardizer.std = vec![5.0; 6];
        m
    }

    fn cube_with_mask(mask: Vec<bool>) -> VolCube {
        VolCube::new(tiny_grid(), vec![48.0, 50.0, 53.0, 47.0, 49.0, 52.0], mask).unwrap()
    }

    #[test]
    fn passthrough_and_errors() {
        let m = random_model(1);
        let full = cube_with_mask(vec![true; 6]);
        let (out, chain) = impute(&m, &full, &GibbsConfig::default()).unwrap();
        assert_eq!(out, full);
        assert!(chain.missing.is_empty());
        let none = cube_with_mask(vec![false; 6]);
        assert!(impute(&m, &none, &GibbsConfig::default()).is_err());
        let bad = GibbsConfig {
            burn_in: 10,
            chain_length: 10,
            ..Default::default()
        };
        assert!(impute(&m, &cube_with_mask(vec![true, false, true, true, true, true]), &bad).is_err());
    }

    #[test]
    fn chain_properties() {
        let m = random_model(2);
        let cube = cube_with_mask(vec![true, false, true, false, false, true]);
        let cfg = GibbsConfig {
            chain_length: 300,
            burn_in: 50,
            seed: 11,
            trace_every: 10,
            ..Default::default()
        };
        let (out, chain) = impute(&m, &cube, &cfg).unwrap();
        // observed entries are bit-identical
        for i in [0, 2, 5] {
            assert_eq!(out.values()[i], cube.values()[i]);
        }
        assert_eq!(chain.samples.len(), 250);
        for (c, &i) in chain.missing.iter().enumerate() {
            let direct = chain.samples.iter().map(|s| s[c]).sum::<f64>() / 250.0;
            assert!((direct - chain.mean[c]).abs() < 1e-12 * direct.abs().max(1.0));
            assert_eq!(out.values()[i], chain.mean[c].max(MIN_IMPUTED_BP));
            let se = obm_standard_error(&chain.samples.iter().map(|s| s[c]).collect::<Vec<_>>(), chain.batch_length).unwrap();
            assert!((se - chain.standard_errors[c]).abs() < 1e-9 * se.max(1.0));
        }
        assert_eq!(chain.latent_path.first().unwrap().0, 0);
        assert_eq!(chain.latent_path.last().unwrap().0, 300);

        let (again, chain2) = impute(&m, &cube, &cfg).unwrap();
        assert_eq!(again, out);
        assert_eq!(chain2, chain);
    }

    #[test]
    fn batched_chains_match_single_chains() {
        let m = random_model(3);
        let a = cube_with_mask(vec![true, false, true, false, false, true]);
        let b = cube_with_mask(vec![false, true, true, true, false, true]);
        let full = cube_with_mask(vec![true; 6]);
        let cfg = GibbsConfig {
            chain_length: 120,
            burn_in: 20,
            ..Default::default()
        };
        let many = impute_many(&m, &[a.clone(), full.clone(), b.clone()], &cfg, &[7, 8, 9]).unwrap();
        let single_a = impute(&m, &a, &GibbsConfig { seed: 7, ..cfg.clone() }).unwrap();
        let single_b = impute(&m, &b, &GibbsConfig { seed: 9, ..cfg.clone() }).unwrap();
        assert_eq!(many[0], single_a);
        assert_eq!(many[1].0, full);
        assert_eq!(many[2], single_b);
    }

    #[test]
    fn degenerate_decoder_variance_follows_mean() {
        let mut m = random_model(4);
        let out = m.decoder.layers.last_mut().unwrap();
        for c in 6..12 {
            out.bias[c] = LOGVAR_MIN - 5.0;
            out.weight.column_mut(c).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = vec![0.1, 0.0, -0.3, 0.0, 0.0, 0.2];
        let (z, xm) = gibbs_step(&m, &mut x, &[1, 3, 4], &mut rng).unwrap();
        let (mu, _) = m.decode(&z).unwrap();
        for (v, i) in xm.iter().zip([1, 3, 4]) {
            assert!((v - mu[i]).abs() < 1e-2);
        }
    }

    #[test]
    fn latent_pca_orders_components() {
        // identity encoder on 3 features: latent means are the data prefix
        let arch = VaeArch {
            data_dim: 3,
            latent_dim: 3,
            encoder_hidden: vec![],
            decoder_hidden: vec![],
            activation: Activation::Identity,
        };
        let mut m = VaeModel::zeros(arch).unwrap();
        for i in 0..3 {
            m.encoder.layers[0].weight[[i, i]] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let refs = Array2::from_shape_fn((200, 3), |(_, c)| [3.0, 1.0, 0.2][c] * rng.sample::<f64, _>(StandardNormal));
        let tr = latent_trace(&m, &GibbsChain::empty(), refs.view()).unwrap();
        assert_eq!(tr.components.len(), 2);
        assert!(tr.variances[0] > tr.variances[1]);
        let var = |k: usize| {
            let xs: Vec<f64> = tr.reference.iter().map(|p| p[k]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        assert!(var(0) > var(1));
        assert!((var(0) - tr.variances[0]).abs() < 1e-9);

        // one-dimensional spread: the second direction carries no variance
        let line = Array2::from_shape_fn((50, 3), |(r, c)| if c == 0 { r as f64 } else { 0.0 });
        let tr = latent_trace(&m, &GibbsChain::empty(), line.view()).unwrap();
        assert_eq!(tr.components.len(), 1);
        assert!(tr.reference.iter().all(|p| p.len() == 1));
    }
}
