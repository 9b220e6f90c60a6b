//! Synthetic SABR parameter matrices and volatility cubes.
//!
//! Each of α, ν, ρ is generated independently in transformed space (log for
//! α and ν, artanh for ρ). The top-left entry is drawn from a normal fitted
//! to the source matrices; the first row and first column are built from
//! sampled increments between neighbours; every interior entry is then
//! placed relative to its north and west neighbours:
//!
//! ```text
//! a[i][j] = a[i-1][j] + r * (a[i-1][j] - a[i][j-1]),
//! r = (a[i][j] - a[i-1][j]) / (a[i-1][j] - a[i][j-1])  fitted per position
//! ```
//!
//! Rows are maturities and columns tenors. Interior entries are filled in
//! row-major order.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{ForwardMatrix, SabrParamMatrix, LN_ALPHA_BOUNDS, LN_NU_BOUNDS, Z_RHO_BOUNDS};
use crate::error::{Error, Result};
use crate::sabr::{sabr_normal_vol, DEFAULT_SHIFT};
use crate::volcube::{decimal_to_bp, CubeGrid, Transform, VolCube};

/// Gaps between neighbours below this are excluded from ratio fits.
const DEGENERATE_GAP: f64 = 1e-12;
/// Redraws allowed when a sampled cube contains a non-positive vol.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Alpha,
    Nu,
    Rho,
}

impl ParamKind {
    pub const ALL: [ParamKind; 3] = [ParamKind::Alpha, ParamKind::Nu, ParamKind::Rho];

    pub fn transform(self) -> Transform {
        match self {
            ParamKind::Alpha | ParamKind::Nu => Transform::Log,
            ParamKind::Rho => Transform::Artanh,
        }
    }

    /// Box on the transformed value, shared with calibration.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ParamKind::Alpha => LN_ALPHA_BOUNDS,
            ParamKind::Nu => LN_NU_BOUNDS,
            ParamKind::Rho => Z_RHO_BOUNDS,
        }
    }

    pub fn values(self, m: &SabrParamMatrix) -> &[f64] {
        match self {
            ParamKind::Alpha => &m.alpha,
            ParamKind::Nu => &m.nu,
            ParamKind::Rho => &m.rho,
        }
    }
}

/// Mean and standard deviation of a fitted normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalFit {
    pub mean: f64,
    pub std: f64,
}

impl NormalFit {
    /// Sample mean and (n − 1)-normalised standard deviation.
    pub fn fit(xs: &[f64]) -> Option<Self> {
        if xs.len() < 2 {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some(NormalFit {
            mean,
            std: var.sqrt(),
        })
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        self.mean + self.std * e
    }
}

/// Fitted increment/ratio distributions for one parameter on an
/// `nm × nt` (maturity × tenor) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementModel {
    pub kind: ParamKind,
    pub n_maturities: usize,
    pub n_tenors: usize,
    /// Top-left transformed value.
    pub anchor: NormalFit,
    /// `a[0][j] − a[0][j−1]`, j = 1..nt.
    pub first_row: Vec<NormalFit>,
    /// `a[i][0] − a[i−1][0]`, i = 1..nm.
    pub first_column: Vec<NormalFit>,
    /// Ratio at (i, j), i, j ≥ 1, row-major over (nm − 1) × (nt − 1).
    pub interior: Vec<NormalFit>,
}

impl IncrementModel {
    fn interior_index(&self, i: usize, j: usize) -> usize {
        (i - 1) * (self.n_tenors - 1) + (j - 1)
    }

    /// Transformed matrix (row-major) grown from `anchor`, with every entry
    /// clamped to the parameter's box.
    pub fn sample_transformed<R: Rng>(&self, rng: &mut R, anchor: f64) -> Vec<f64> {
        let (nm, nt) = (self.n_maturities, self.n_tenors);
        let (lo, hi) = self.kind.bounds();
        let mut a = vec![0.0; nm * nt];
        a[0] = anchor.clamp(lo, hi);
        for j in 1..nt {
            a[j] = (a[j - 1] + self.first_row[j - 1].draw(rng)).clamp(lo, hi);
        }
        for i in 1..nm {
            a[i * nt] = (a[(i - 1) * nt] + self.first_column[i - 1].draw(rng)).clamp(lo, hi);
        }
        for i in 1..nm {
            for j in 1..nt {
                let north = a[(i - 1) * nt + j];
                let west = a[i * nt + j - 1];
                let r = self.interior[self.interior_index(i, j)].draw(rng);
                a[i * nt + j] = (north + r * (north - west)).clamp(lo, hi);
            }
        }
        a
    }
}

/// Fits an [`IncrementModel`] for `kind` to a set of matrices on a common grid.
pub fn fit_increment_model(matrices: &[SabrParamMatrix], kind: ParamKind) -> Result<IncrementModel> {
    if matrices.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 parameter matrices, got {}",
            matrices.len()
        )));
    }
    let (nm, nt) = matrices[0].dims();
    for m in matrices {
        if m.maturities != matrices[0].maturities || m.tenors != matrices[0].tenors {
            return Err(Error::Grid("parameter matrices are on different grids".into()));
        }
    }
    let t = kind.transform();
    let transformed: Vec<Vec<f64>> = matrices
        .iter()
        .map(|m| kind.values(m).iter().map(|&v| t.apply(v)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;

    let fit_at = |what: &str, i: usize, j: usize, xs: Vec<f64>| {
        NormalFit::fit(&xs).ok_or_else(|| {
            Error::InsufficientData(format!(
                "{kind:?} {what} at (maturity {i}, tenor {j}): {} valid samples",
                xs.len()
            ))
        })
    };

    let anchor = fit_at("anchor", 0, 0, transformed.iter().map(|a| a[0]).collect())?;
    let first_row = (1..nt)
        .map(|j| fit_at("row increment", 0, j, transformed.iter().map(|a| a[j] - a[j - 1]).collect()))
        .collect::<Result<Vec<_>>>()?;
    let first_column = (1..nm)
        .map(|i| {
            let xs = transformed.iter().map(|a| a[i * nt] - a[(i - 1) * nt]).collect();
            fit_at("column increment", i, 0, xs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut interior = Vec::with_capacity((nm.saturating_sub(1)) * (nt.saturating_sub(1)));
    for i in 1..nm {
        for j in 1..nt {
            let xs: Vec<f64> = transformed
                .iter()
                .filter_map(|a| {
                    let north = a[(i - 1) * nt + j];
                    let west = a[i * nt + j - 1];
                    let gap = north - west;
                    (gap.abs() >= DEGENERATE_GAP).then(|| (a[i * nt + j] - north) / gap)
                })
                .collect();
            interior.push(fit_at("interior ratio", i, j, xs)?);
        }
    }
    Ok(IncrementModel {
        kind,
        n_maturities: nm,
        n_tenors: nt,
        anchor,
        first_row,
        first_column,
        interior,
    })
}

/// Increment models for α, ν and ρ plus the grid they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModel {
    pub maturities: Vec<f64>,
    pub tenors: Vec<f64>,
    pub beta: f64,
    pub shift: f64,
    pub alpha: IncrementModel,
    pub nu: IncrementModel,
    pub rho: IncrementModel,
}

impl SynthModel {
    pub fn fit(matrices: &[SabrParamMatrix]) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::InsufficientData("no parameter matrices".into()))?;
        Ok(SynthModel {
            maturities: first.maturities.clone(),
            tenors: first.tenors.clone(),
            beta: first.beta,
            shift: first.shift,
            alpha: fit_increment_model(matrices, ParamKind::Alpha)?,
            nu: fit_increment_model(matrices, ParamKind::Nu)?,
            rho: fit_increment_model(matrices, ParamKind::Rho)?,
        })
    }

    pub fn model(&self, kind: ParamKind) -> &IncrementModel {
        match kind {
            ParamKind::Alpha => &self.alpha,
            ParamKind::Nu => &self.nu,
            ParamKind::Rho => &self.rho,
        }
    }

    /// Matrix grown from the given transformed top-left values.
    pub fn sample_with_anchors<R: Rng>(&self, rng: &mut R, anchors: [f64; 3]) -> SabrParamMatrix {
        let mut out = ParamKind::ALL.iter().zip(anchors).map(|(&k, a)| {
            let t = k.transform();
            self.model(k)
                .sample_transformed(rng, a)
                .into_iter()
                .map(|y| t.inverse(y))
                .collect::<Vec<f64>>()
        });
        let (alpha, nu, rho) = (out.next().unwrap(), out.next().unwrap(), out.next().unwrap());
        SabrParamMatrix {
            maturities: self.maturities.clone(),
            tenors: self.tenors.clone(),
            beta: self.beta,
            shift: self.shift,
            alpha,
            nu,
            // tanh(±3) keeps |ρ| < 1; guard against rounding to exactly ±1
            rho: rho.into_iter().map(|r| r.clamp(-0.999_999, 0.999_999)).collect(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> SabrParamMatrix {
        let anchors = [
            self.alpha.anchor.draw(rng),
            self.nu.anchor.draw(rng),
            self.rho.anchor.draw(rng),
        ];
        self.sample_with_anchors(rng, anchors)
    }

    pub fn sample_param_matrix(&self, seed: u64) -> SabrParamMatrix {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// Forward swap rates for synthetic cubes: per node `base + std·ε`, redrawn
/// while below `floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardModel {
    pub maturities: Vec<f64>,
    pub tenors: Vec<f64>,
    pub base: Vec<f64>,
    pub std: Vec<f64>,
    pub floor: f64,
}

impl ForwardModel {
    /// 1% everywhere, 20 bp perturbations, floor 10 bp above −shift.
    pub fn flat(grid: &CubeGrid, shift: f64) -> Self {
        let n = grid.n_slices();
        ForwardModel {
            maturities: grid.maturities().to_vec(),
            tenors: grid.tenors().to_vec(),
            base: vec![0.01; n],
            std: vec![0.002; n],
            floor: -shift + 0.001,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ForwardMatrix {
        let values = self
            .base
            .iter()
            .zip(&self.std)
            .map(|(&b, &s)| loop {
                let e: f64 = rng.sample(StandardNormal);
                let f = b + s * e;
                if f > self.floor {
                    break f;
                }
            })
            .collect();
        ForwardMatrix {
            maturities: self.maturities.clone(),
            tenors: self.tenors.clone(),
            values,
        }
    }
}

/// Fully observed cube of SABR normal vols (bp) at strikes `F + offset`.
pub fn cube_from_params(matrix: &SabrParamMatrix, forwards: &ForwardMatrix, grid: &CubeGrid) -> Result<VolCube> {
    if matrix.maturities != grid.maturities() || matrix.tenors != grid.tenors() {
        return Err(Error::Grid("parameter matrix axes differ from the cube grid".into()));
    }
    forwards.check_grid(grid)?;
    let (nm, nt, _) = grid.dims();
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..nm {
        for j in 0..nt {
            let p = matrix.at(i, j);
            let f = forwards.get(i, j);
            let t0 = grid.maturities()[i];
            for &o in grid.strike_offsets() {
                let v = sabr_normal_vol(&p, f, f + o, 0.0, t0).map_err(|e| e.at_slice(t0, grid.tenors()[j]))?;
                values.push(decimal_to_bp(v));
            }
        }
    }
    VolCube::full(grid.clone(), values)
}

/// One synthetic cube together with the inputs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCube {
    pub params: SabrParamMatrix,
    pub forwards: ForwardMatrix,
    pub cube: VolCube,
}

/// Draws a parameter matrix and forwards from `rng` and builds the cube.
/// Draws whose expansion yields a non-positive vol somewhere are discarded.
pub fn sample_cube<R: Rng>(
    model: &SynthModel,
    forward_model: &ForwardModel,
    grid: &CubeGrid,
    rng: &mut R,
) -> Result<SyntheticCube> {
    let mut last_err = None;
    for _ in 0..MAX_REDRAWS {
        let params = model.sample(rng);
        let forwards = forward_model.sample(rng);
        match cube_from_params(&params, &forwards, grid) {
            Ok(cube) => {
                return Ok(SyntheticCube {
                    params,
                    forwards,
                    cube,
                })
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one draw"))
}

/// `n` independent cubes; cube `c` uses a generator seeded with `seed + c`.
pub fn generate_training_set(
    n: usize,
    model: &SynthModel,
    forward_model: &ForwardModel,
    grid: &CubeGrid,
    seed: u64,
) -> Result<Vec<SyntheticCube>> {
    (0..n)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
            sample_cube(model, forward_model, grid, &mut rng)
        })
        .collect()
}

/// Smooth term structures plus AR(1) daily level moves, standing in for a
/// history of calibrated market matrices. The shapes in transformed space
/// are
///
/// ```text
/// ln α    = ln 0.022 − 0.12 ln T + 0.08 ln τ
/// ln ν    = ln 0.05  − 0.25 ln T + 0.05 ln τ
/// artanh ρ = −0.1    − 0.08 ln T + 0.06 ln τ
/// ```
///
/// for maturity `T` and tenor `τ`; each day adds a per-parameter level
/// factor (stationary std 0.15, autocorrelation 0.9) and independent noise
/// of std 0.004 per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapHistory {
    pub days: usize,
    pub beta: f64,
    pub shift: f64,
    pub level_std: f64,
    pub level_autocorrelation: f64,
    pub noise_std: f64,
}

impl Default for BootstrapHistory {
    fn default() -> Self {
        BootstrapHistory {
            days: 120,
            beta: 0.5,
            shift: DEFAULT_SHIFT,
            level_std: 0.15,
            level_autocorrelation: 0.9,
            noise_std: 0.004,
        }
    }
}

impl BootstrapHistory {
    /// Noise-free transformed value of `kind` at (T, τ).
    pub fn surface(kind: ParamKind, maturity: f64, tenor: f64) -> f64 {
        let (lt, lm) = (maturity.ln(), tenor.ln());
        match kind {
            ParamKind::Alpha => 0.022f64.ln() - 0.12 * lt + 0.08 * lm,
            ParamKind::Nu => 0.05f64.ln() - 0.25 * lt + 0.05 * lm,
            ParamKind::Rho => -0.1 - 0.08 * lt + 0.06 * lm,
        }
    }

    pub fn generate(&self, maturities: &[f64], tenors: &[f64], seed: u64) -> Vec<SabrParamMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = self.level_autocorrelation;
        let innov = self.level_std * (1.0 - phi * phi).sqrt();
        let mut level = [0.0f64; 3];
        for l in level.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *l = self.level_std * e;
        }
        let mut out = Vec::with_capacity(self.days);
        for day in 0..self.days {
            if day > 0 {
                for l in level.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *l = phi * *l + innov * e;
                }
            }
            let mut fields: [Vec<f64>; 3] = Default::default();
            for (p, kind) in ParamKind::ALL.iter().enumerate() {
                let (lo, hi) = kind.bounds();
                for &t in maturities {
                    for &m in tenors {
                        let e: f64 = rng.sample(StandardNormal);
                        let y = (Self::surface(*kind, t, m) + level[p] + self.noise_std * e).clamp(lo, hi);
                        fields[p].push(kind.transform().inverse(y));
                    }
                }
            }
            let [alpha, nu, rho] = fields;
            out.push(SabrParamMatrix {
                maturities: maturities.to_vec(),
                tenors: tenors.to_vec(),
                beta: self.beta,
                shift: self.shift,
                alpha,
                nu,
                rho,
            });
        }
        out
    }
}

/// Directory of per-cube CSVs with a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetManifest {
    pub version: String,
    pub seed: u64,
    pub count: usize,
    pub grid: CubeGrid,
    pub synth_model_sha256: String,
    pub forward_model_sha256: String,
}

pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn cube_file(dir: &Path, c: usize) -> std::path::PathBuf {
    dir.join("cubes").join(format!("cube_{c:05}.csv"))
}

fn forward_file(dir: &Path, c: usize) -> std::path::PathBuf {
    dir.join("forwards").join(format!("forwards_{c:05}.csv"))
}

/// Writes `dir/manifest.json`, `dir/cubes/cube_NNNNN.csv` and
/// `dir/forwards/forwards_NNNNN.csv`.
pub fn write_training_set(
    dir: impl AsRef<Path>,
    set: &[SyntheticCube],
    manifest: &TrainingSetManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["cubes", "forwards"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (c, s) in set.iter().enumerate() {
        s.cube.write_csv(cube_file(dir, c))?;
        s.forwards.write_csv(forward_file(dir, c))?;
    }
    write_json(&dir.join("manifest.json"), manifest)
}

/// Cubes and forwards of a training-set directory, in index order.
pub fn read_training_set(dir: impl AsRef<Path>) -> Result<(TrainingSetManifest, Vec<(VolCube, ForwardMatrix)>)> {
    let dir = dir.as_ref();
    let manifest: TrainingSetManifest = read_json(&dir.join("manifest.json"))?;
    let items = (0..manifest.count)
        .into_par_iter()
        .map(|c| {
            let cube = VolCube::read_csv(cube_file(dir, c))?;
            if cube.grid() != &manifest.grid {
                return Err(Error::Grid(format!("cube {c} is not on the manifest grid")));
            }
            Ok((cube, ForwardMatrix::read_csv(forward_file(dir, c))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate_cube, CalibrationOptions};

    fn desk_history(days: usize, seed: u64) -> Vec<SabrParamMatrix> {
        let g = CubeGrid::desk();
        BootstrapHistory {
            days,
            ..Default::default()
        }
        .generate(g.maturities(), g.tenors(), seed)
    }

    #[test]
    fn identical_matrices_give_deterministic_model() {
        let m = desk_history(1, 3).remove(0);
        let model = fit_increment_model(&[m.clone(), m.clone()], ParamKind::Alpha).unwrap();
        let all = std::iter::once(&model.anchor)
            .chain(&model.first_row)
            .chain(&model.first_column)
            .chain(&model.interior);
        for f in all {
            assert_eq!(f.std, 0.0);
        }
        let la: Vec<f64> = m.alpha.iter().map(|a| a.ln()).collect();
        let nt = m.tenors.len();
        assert!((model.first_row[0].mean - (la[1] - la[0])).abs() < 1e-15);
        assert!((model.first_column[1].mean - (la[2 * nt] - la[nt])).abs() < 1e-15);

        // zero spread: samples reproduce the source for any seed
        let synth = SynthModel::fit(&[m.clone(), m.clone()]).unwrap();
        let a = synth.sample_param_matrix(1);
        let b = synth.sample_param_matrix(2);
        assert_eq!(a, b);
        for (x, y) in a.alpha.iter().zip(&m.alpha) {
            assert!((x / y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn arithmetic_first_row() {
        let mut ms = desk_history(2, 5);
        let nt = ms[0].tenors.len();
        for m in ms.iter_mut() {
            for j in 0..nt {
                m.alpha[j] = (0.01f64.ln() + 0.1 * j as f64).exp();
            }
        }
        let model = fit_increment_model(&ms, ParamKind::Alpha).unwrap();
        for f in &model.first_row {
            assert!((f.mean - 0.1).abs() < 1e-12);
            assert!(f.std < 1e-12);
        }
    }

    #[test]
    fn too_few_matrices_or_ratios() {
        let ms = desk_history(2, 1);
        assert!(fit_increment_model(&ms[..1], ParamKind::Nu).is_err());
        // make north == west at (1, 1) in one matrix: only one valid ratio left
        let mut ms = ms;
        let nt = ms[0].tenors.len();
        for m in ms.iter_mut().take(1) {
            m.rho[1] = m.rho[nt];
        }
        match fit_increment_model(&ms, ParamKind::Rho) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("(maturity 1, tenor 1)"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_valid() {
        let synth = SynthModel::fit(&desk_history(120, 11)).unwrap();
        assert_eq!(synth.sample_param_matrix(42), synth.sample_param_matrix(42));
        assert_ne!(synth.sample_param_matrix(42), synth.sample_param_matrix(43));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut entries = 0;
        while entries < 1_000_000 {
            let m = synth.sample(&mut rng);
            m.validate().unwrap();
            entries += m.alpha.len();
        }
    }

    #[test]
    fn synthetic_alpha_is_overdispersed() {
        let source = desk_history(120, 7);
        let synth = SynthModel::fit(&source).unwrap();
        let n = source[0].alpha.len();
        let var = |rows: &[Vec<f64>], p: usize| {
            let xs: Vec<f64> = rows.iter().map(|r| r[p]).collect();
            let fit = NormalFit::fit(&xs).unwrap();
            fit.std * fit.std
        };
        let src: Vec<Vec<f64>> = source.iter().map(|m| m.alpha.iter().map(|a| a.ln()).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let syn: Vec<Vec<f64>> = (0..10_000)
            .map(|_| synth.sample(&mut rng).alpha.iter().map(|a| a.ln()).collect())
            .collect();
        let over = (0..n).filter(|&p| var(&syn, p) >= var(&src, p)).count();
        assert!(over as f64 >= 0.9 * n as f64, "{over}/{n}");
    }

    #[test]
    fn single_point_cube_with_flat_params() {
        let grid = CubeGrid::new(vec![1.0], vec![1.0], vec![0.0]).unwrap();
        let m = SabrParamMatrix::new(vec![1.0], vec![1.0], 0.0, DEFAULT_SHIFT, vec![0.006], vec![0.0], vec![0.0]).unwrap();
        let cube = cube_from_params(&m, &ForwardMatrix::flat(&grid, 0.01), &grid).unwrap();
        assert!((cube.values()[0] - 60.0).abs() < 1e-9);
    }

    #[test]
    fn reference_smile_shape() {
        // 1y x 1y parameters from a calibrated market smile
        let grid = CubeGrid::new(vec![1.0], vec![1.0], CubeGrid::full_default().strike_offsets().to_vec()).unwrap();
        let m = SabrParamMatrix::new(vec![1.0], vec![1.0], 0.5, DEFAULT_SHIFT, vec![0.0086], vec![1.0732], vec![0.6506])
            .unwrap();
        let f = 0.0;
        let cube = cube_from_params(&m, &ForwardMatrix::flat(&grid, f), &grid).unwrap();
        let v = cube.values();
        let atm = grid.atm_index();
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        // skewed smile with both wings above the minimum, upper wing rising monotonically
        assert!(v.windows(2).skip(atm).all(|w| w[1] > w[0]), "{v:?}");
        assert!(v[0] > min && v[v.len() - 1] > min);
        let atm_model = decimal_to_bp(sabr_normal_vol(&m.at(0, 0), f, f, 0.0, 1.0).unwrap());
        assert!((v[atm] - atm_model).abs() < 1e-12);
    }

    #[test]
    fn training_set_generation() {
        let grid = CubeGrid::desk();
        let synth = SynthModel::fit(&desk_history(40, 2)).unwrap();
        let fm = ForwardModel::flat(&grid, DEFAULT_SHIFT);
        assert!(generate_training_set(0, &synth, &fm, &grid, 1).unwrap().is_empty());
        let a = generate_training_set(2, &synth, &fm, &grid, 1).unwrap();
        let b = generate_training_set(2, &synth, &fm, &grid, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].cube, a[1].cube);
        for s in &a {
            assert!(s.cube.is_fully_observed());
            assert!(s.forwards.values.iter().all(|&f| f > -DEFAULT_SHIFT + 0.001));
        }

        let dir = tempfile::tempdir().unwrap();
        let manifest = TrainingSetManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            seed: 1,
            count: a.len(),
            grid: grid.clone(),
            synth_model_sha256: sha256_json(&synth).unwrap(),
            forward_model_sha256: sha256_json(&fm).unwrap(),
        };
        write_training_set(dir.path(), &a, &manifest).unwrap();
        let (m2, items) = read_training_set(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        for (s, (c, f)) in a.iter().zip(&items) {
            assert_eq!(&s.cube, c);
            assert_eq!(&s.forwards, f);
        }
    }

    #[test]
    fn calibrated_history_yields_finite_model() {
        let grid = CubeGrid::desk();
        let hist = desk_history(120, 21);
        let fm = ForwardModel::flat(&grid, DEFAULT_SHIFT);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let calibrated: Vec<SabrParamMatrix> = hist
            .iter()
            .map(|p| {
                let fwd = fm.sample(&mut rng);
                let cube = cube_from_params(p, &fwd, &grid).unwrap();
                calibrate_cube(&cube, &fwd, &CalibrationOptions::default()).unwrap().0
            })
            .collect();
        let model = SynthModel::fit(&calibrated).unwrap();
        for k in ParamKind::ALL {
            let m = model.model(k);
            let all = std::iter::once(&m.anchor)
                .chain(&m.first_row)
                .chain(&m.first_column)
                .chain(&m.interior);
            for f in all {
                assert!(f.mean.is_finite() && f.std.is_finite());
            }
        }
    }
}
