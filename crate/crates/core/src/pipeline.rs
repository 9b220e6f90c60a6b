//! Command-level workflow shared by the CLI and the Python bindings.
//!
//! Every command reads a [`PipelineConfig`], writes its artifacts into the
//! output directory together with a `<command>_manifest.json` (version, seed,
//! config hash, input and output digests) and returns a short summary.
//! Nothing is time-stamped, so reruns with the same seed reproduce the same
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{calibrate_cube, CalibrationOptions, ForwardMatrix};
use crate::error::{Error, Result};
use crate::gibbs::{impute, latent_trace, random_mask, GibbsConfig};
use crate::hedge::{run_hedge, write_ledger_csv, HedgeReport, HedgeSetup, Rebalancing, SimConfig, Strategy};
use crate::interp::interpolate_cube;
use crate::synth::{
    generate_training_set, read_json, read_training_set, sha256_json, write_json, write_training_set, BootstrapHistory,
    ForwardModel, SynthModel, TrainingSetManifest,
};
use crate::vae::{ACTIVITY_THRESHOLD, count_active, dataset_matrix, latent_activity, train, write_loss_csv, Init, TrainConfig, VaeArch, VaeModel};
use crate::volcube::{CubeGrid, VolCube};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: String,
    pub seed: u64,
    pub grid: CubeGrid,
    /// Grid JSON overriding `grid`.
    #[serde(default)]
    pub grid_path: Option<PathBuf>,
    /// Fitted synthetic-data model; fitted on `history` when absent.
    #[serde(default)]
    pub synth_model_path: Option<PathBuf>,
    #[serde(default)]
    pub forward_model_path: Option<PathBuf>,
    pub history: BootstrapHistory,
    pub n_train: usize,
    pub n_holdout: usize,
    pub latent_dim: usize,
    pub train: TrainConfig,
    pub gibbs: GibbsConfig,
    /// Fraction of quotes hidden when an evaluation masks a full cube.
    pub eval_mask_rate: f64,
    pub calibration: CalibrationOptions,
    pub hedge: SimConfig,
    /// Initial forward of every node in the hedging study, and the forward
    /// assumed when a cube comes without forwards.
    pub default_forward: f64,
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    /// Reduced grid and budgets that finish in minutes on one core.
    pub fn desk() -> Self {
        let mut c = PipelineConfig {
            profile: "desk".into(),
            seed: 0,
            grid: CubeGrid::desk(),
            grid_path: None,
            synth_model_path: None,
            forward_model_path: None,
            history: BootstrapHistory::default(),
            n_train: 500,
            n_holdout: 20,
            latent_dim: 10,
            train: TrainConfig {
                epochs: 2000,
                learning_rate: 1e-3,
                init: Init::FanInPrior,
                ..TrainConfig::default()
            },
            gibbs: GibbsConfig {
                chain_length: 500,
                burn_in: 100,
                ..GibbsConfig::default()
            },
            eval_mask_rate: 0.796,
            calibration: CalibrationOptions::default(),
            hedge: SimConfig {
                n_paths: 200,
                ..SimConfig::default()
            },
            default_forward: 0.01,
            out_dir: PathBuf::from("out"),
        };
        // 200 paths × 120 dates of imputation fit in about two minutes
        c.hedge.gibbs.chain_length = 100;
        c.hedge.gibbs.burn_in = 25;
        c.hedge.reestimate_every_days = 3;
        c.with_seed(0)
    }

    /// Full grid and the 50000-epoch training budget. Not meant for a laptop.
    pub fn full() -> Self {
        let mut c = PipelineConfig {
            profile: "full".into(),
            grid: CubeGrid::full_default(),
            n_train: 10_000,
            n_holdout: 100,
            latent_dim: 50,
            train: TrainConfig::default(),
            gibbs: GibbsConfig::default(),
            hedge: SimConfig {
                steps_per_day: 1440,
                tiers: Rebalancing::ALL.to_vec(),
                ..SimConfig::default()
            },
            ..PipelineConfig::desk()
        };
        c.hedge.gibbs.chain_length = 2000;
        c.hedge.gibbs.burn_in = 100;
        c.with_seed(0)
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::InvalidParameter(format!("unknown profile '{name}' (expected desk or full)"))),
        }
    }

    /// Sets the master seed and the seeds derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed.wrapping_add(1);
        self.gibbs.seed = seed.wrapping_add(2);
        self.hedge.seed = seed.wrapping_add(3);
        self
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.grid_path, &self.synth_model_path, &self.forward_model_path].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::InvalidParameter(format!("{} does not exist", p.display())));
            }
        }
        if self.latent_dim == 0 || self.n_train == 0 {
            return Err(Error::InvalidParameter("latent dimension and training-set size must be positive".into()));
        }
        if !(self.eval_mask_rate > 0.0 && self.eval_mask_rate < 1.0) {
            return Err(Error::InvalidParameter(format!("mask rate {} must lie in (0, 1)", self.eval_mask_rate)));
        }
        self.train.validate()?;
        self.gibbs.validate()?;
        self.hedge.validate()
    }

    pub fn resolved_grid(&self) -> Result<CubeGrid> {
        match &self.grid_path {
            Some(p) => CubeGrid::read_json(p),
            None => Ok(self.grid.clone()),
        }
    }

    fn sha256(&self) -> Result<String> {
        sha256_json(self)
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        Ok(self.out_dir.join(name))
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// SHA-256 of a file, or of a directory's files in path order.
pub fn digest_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            let full = path.join(&rel);
            h.update(fs::read(&full).map_err(|e| Error::io(&full, e))?);
        }
    } else {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(crate::synth::hex(&h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub lines: Vec<String>,
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        for o in &self.outputs {
            writeln!(f, "wrote {}", o.display())?;
        }
        write!(f, "manifest {}", self.manifest.display())
    }
}

fn finish(cfg: &PipelineConfig, command: &str, inputs: &[&Path], outputs: Vec<PathBuf>, lines: Vec<String>) -> Result<Summary> {
    let mut ins = BTreeMap::new();
    for p in inputs {
        ins.insert(p.display().to_string(), digest_path(p)?);
    }
    let mut outs = BTreeMap::new();
    for p in &outputs {
        let name = p.strip_prefix(&cfg.out_dir).unwrap_or(p).display().to_string();
        outs.insert(name, digest_path(p)?);
    }
    let manifest = Manifest {
        command: command.into(),
        version: VERSION.into(),
        seed: cfg.seed,
        config_sha256: cfg.sha256()?,
        inputs: ins,
        outputs: outs,
    };
    let path = cfg.out(&format!("{command}_manifest.json"))?;
    write_json(&path, &manifest)?;
    Ok(Summary {
        lines,
        outputs,
        manifest: path,
    })
}

fn synth_model(cfg: &PipelineConfig, grid: &CubeGrid) -> Result<SynthModel> {
    match &cfg.synth_model_path {
        Some(p) => SynthModel::read_json(p),
        None => SynthModel::fit(&cfg.history.generate(grid.maturities(), grid.tenors(), cfg.seed)),
    }
}

fn forward_model(cfg: &PipelineConfig, grid: &CubeGrid) -> Result<ForwardModel> {
    match &cfg.forward_model_path {
        Some(p) => read_json(p),
        None => Ok(ForwardModel::flat(grid, cfg.calibration.shift)),
    }
}

/// Fits (or loads) the generators and writes `training_set/` and
/// `holdout/`, the latter drawn after the training cubes.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<Summary> {
    cfg.validate()?;
    let grid = cfg.resolved_grid()?;
    let model = synth_model(cfg, &grid)?;
    let fm = forward_model(cfg, &grid)?;
    let all = generate_training_set(cfg.n_train + cfg.n_holdout, &model, &fm, &grid, cfg.seed)?;
    let (train_set, holdout) = all.split_at(cfg.n_train);
    let model_path = cfg.out("synth_model.json")?;
    model.write_json(&model_path)?;
    let fm_path = cfg.out("forward_model.json")?;
    write_json(&fm_path, &fm)?;
    let manifest = |count, seed| -> Result<TrainingSetManifest> {
        Ok(TrainingSetManifest {
            version: VERSION.into(),
            seed,
            count,
            grid: grid.clone(),
            synth_model_sha256: sha256_json(&model)?,
            forward_model_sha256: sha256_json(&fm)?,
        })
    };
    let train_dir = cfg.out("training_set")?;
    write_training_set(&train_dir, train_set, &manifest(cfg.n_train, cfg.seed)?)?;
    let mut outputs = vec![model_path, fm_path, train_dir];
    if cfg.n_holdout > 0 {
        let dir = cfg.out("holdout")?;
        write_training_set(&dir, holdout, &manifest(cfg.n_holdout, cfg.seed + cfg.n_train as u64)?)?;
        outputs.push(dir);
    }
    let (nm, nt, ns) = grid.dims();
    let lines = vec![format!(
        "synth: {} training and {} held-out cubes on a {nm}x{nt}x{ns} grid",
        cfg.n_train, cfg.n_holdout
    )];
    finish(cfg, "synth", &[], outputs, lines)
}

/// Trains a VAE on a training-set directory; writes `model.vgv` and
/// `loss.csv`.
pub fn cmd_train(cfg: &PipelineConfig, dataset: &Path) -> Result<Summary> {
    cfg.validate()?;
    let (_, items) = read_training_set(dataset)?;
    let cubes: Vec<VolCube> = items.into_iter().map(|(c, _)| c).collect();
    let data = dataset_matrix(&cubes)?;
    let model_path = cfg.out("model.vgv")?;
    let checkpoint = (cfg.train.checkpoint_every > 0).then(|| model_path.clone());
    let arch = VaeArch::standard(data.ncols(), cfg.latent_dim);
    let (model, history) = train(data.view(), arch, &cfg.train, checkpoint.as_deref())?;
    model.write(&model_path)?;
    let loss_path = cfg.out("loss.csv")?;
    write_loss_csv(&loss_path, &history)?;
    let x = model.standardizer.standardize_rows(data.view());
    let act = latent_activity(&model, x.view())?;
    let last = history.last().expect("at least one epoch");
    let lines = vec![format!(
        "train: {} epochs on {} cubes, final ELBO {:.4} (KL {:.4}), {} of {} latent units active",
        cfg.train.epochs,
        cubes.len(),
        last.elbo,
        last.kl,
        count_active(&act, ACTIVITY_THRESHOLD),
        cfg.latent_dim
    )];
    finish(cfg, "train", &[dataset], vec![model_path, loss_path], lines)
}

/// Imputes the missing quotes of a cube. With `mask_rate`, a fully observed
/// cube is first masked at that rate and the imputation is scored against
/// the hidden quotes, next to the interpolation baseline.
pub fn cmd_impute(cfg: &PipelineConfig, model: &Path, cube: &Path, mask_rate: Option<f64>) -> Result<Summary> {
    cfg.validate()?;
    let vae = VaeModel::read(model)?;
    let input = VolCube::read_csv(cube)?;
    let (observed, truth) = match mask_rate {
        Some(r) => {
            if !input.is_fully_observed() {
                return Err(Error::InvalidParameter("masking needs a fully observed cube".into()));
            }
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidParameter(format!("mask rate {r} must lie in (0, 1)")));
            }
            let mask = random_mask(input.grid().len(), r, cfg.gibbs.seed);
            (input.with_mask(&mask)?, Some(input))
        }
        None => (input, None),
    };
    let (imputed, chain) = impute(&vae, &observed, &cfg.gibbs)?;
    let imputed_path = cfg.out("imputed.csv")?;
    imputed.write_csv(&imputed_path)?;
    let report = chain.obm_report();
    let report_path = cfg.out("obm_report.json")?;
    write_json(&report_path, &report)?;
    let mut outputs = vec![imputed_path, report_path];
    let mut lines = vec![format!(
        "impute: {} missing of {} quotes; chain {} steps, burn-in {}",
        observed.n_missing(),
        observed.grid().len(),
        cfg.gibbs.chain_length,
        cfg.gibbs.burn_in
    )];
    if observed.n_missing() > 0 {
        lines.push(format!(
            "  Monte-Carlo standard error: mean {:.4} bp, max {:.4} bp (batch length {})",
            report.mean_standard_error_bp, report.max_standard_error_bp, report.batch_length
        ));
    }
    if let Some(truth) = truth {
        let interp = interpolate_cube(&observed)?;
        let (mi, mb) = mad_pair(&truth, &observed, &imputed, &interp);
        lines.push(format!("  mean absolute deviation on hidden quotes: imputation {mi:.4} bp, interpolation {mb:.4} bp"));
        let p = cfg.out("interpolated.csv")?;
        interp.write_csv(&p)?;
        outputs.push(p);
        let p = cfg.out("masked.csv")?;
        observed.write_csv(&p)?;
        outputs.push(p);
    }
    finish(cfg, "impute", &[model, cube], outputs, lines)
}

/// Mean absolute deviation from `truth` over the quotes missing in
/// `observed`, for two filled cubes.
pub fn mad_pair(truth: &VolCube, observed: &VolCube, a: &VolCube, b: &VolCube) -> (f64, f64) {
    let (mut sa, mut sb, mut n) = (0.0, 0.0, 0usize);
    for i in 0..truth.values().len() {
        if !observed.mask()[i] {
            sa += (a.values()[i] - truth.values()[i]).abs();
            sb += (b.values()[i] - truth.values()[i]).abs();
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    (sa / n, sb / n)
}

/// Calibrates SABR on every slice of a cube; writes `params.csv` and
/// `fit_report.json`. Without `forwards`, every node's forward is
/// `default_forward`.
pub fn cmd_calibrate(cfg: &PipelineConfig, cube: &Path, forwards: Option<&Path>) -> Result<Summary> {
    cfg.validate()?;
    let c = VolCube::read_csv(cube)?;
    let fwd = match forwards {
        Some(p) => ForwardMatrix::read_csv(p)?,
        None => {
            log::warn!("no forwards given; using {} at every node", cfg.default_forward);
            ForwardMatrix::flat(c.grid(), cfg.default_forward)
        }
    };
    let (params, report) = calibrate_cube(&c, &fwd, &cfg.calibration)?;
    let params_path = cfg.out("params.csv")?;
    params.write_csv(&params_path)?;
    let report_path = cfg.out("fit_report.json")?;
    write_json(&report_path, &report)?;
    let lines = vec![format!(
        "calibrate: {} slices, {} alpha-only, mean absolute error {:.4} bp",
        report.slices.len(),
        report.alpha_only().count(),
        report.mean_mae_bp()
    )];
    let mut inputs = vec![cube];
    inputs.extend(forwards);
    finish(cfg, "calibrate", &inputs, vec![params_path, report_path], lines)
}

/// Runs the hedging study; writes `hedge_report.json` and, with
/// `ledger`, `hedge_ledger.csv` for the first `hedge.keep_ledgers` paths.
pub fn cmd_hedge(cfg: &PipelineConfig, model: Option<&Path>, strategies: &[Strategy], ledger: bool) -> Result<(Summary, HedgeReport)> {
    cfg.validate()?;
    let grid = cfg.resolved_grid()?;
    let vae = model.map(VaeModel::read).transpose()?;
    if let Some(v) = &vae {
        if v.data_dim() != grid.len() {
            return Err(Error::Shape {
                expected: grid.len(),
                actual: v.data_dim(),
            });
        }
    }
    let setup = HedgeSetup::synthetic(&grid, cfg.default_forward)?;
    let (report, ledgers) = run_hedge(strategies, vae.as_ref(), &setup, &cfg.hedge)?;
    let report_path = cfg.out("hedge_report.json")?;
    report.write_json(&report_path)?;
    let mut outputs = vec![report_path];
    if ledger {
        let p = cfg.out("hedge_ledger.csv")?;
        write_ledger_csv(&p, &ledgers)?;
        outputs.push(p);
    }
    let mut lines = vec![format!("hedge: {} paths, seed {}", report.n_paths, report.seed)];
    for r in &report.results {
        lines.push(format!(
            "  {:<13} {:<6} RMSE {:.4e} % of notional, R² {}",
            r.strategy.name(),
            r.tier.name(),
            r.rmse_pct,
            r.r_squared.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
        ));
    }
    let inputs: Vec<&Path> = model.into_iter().collect();
    Ok((finish(cfg, "hedge", &inputs, outputs, lines)?, report))
}

/// Latent activity over a dataset (`latent_activity.csv`) and the PCA trace
/// of a traced imputation chain on its first cube (`latent_trace.csv`).
pub fn cmd_diagnose(cfg: &PipelineConfig, model: &Path, dataset: &Path) -> Result<Summary> {
    cfg.validate()?;
    let vae = VaeModel::read(model)?;
    let (_, items) = read_training_set(dataset)?;
    let cubes: Vec<VolCube> = items.into_iter().map(|(c, _)| c).collect();
    let data = dataset_matrix(&cubes)?;
    let x = vae.standardizer.standardize_rows(data.view());
    let act = latent_activity(&vae, x.view())?;
    let act_path = cfg.out("latent_activity.csv")?;
    {
        let mut w = csv::Writer::from_path(&act_path).map_err(|e| Error::io(&act_path, e.into()))?;
        let io = |e: csv::Error| Error::io(&act_path, e.into());
        w.write_record(["unit", "activity", "active"]).map_err(io)?;
        for (u, a) in act.iter().enumerate() {
            w.write_record([u.to_string(), a.to_string(), (*a >= ACTIVITY_THRESHOLD).to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&act_path, e))?;
    }
    let truth = &cubes[0];
    let mask = random_mask(truth.grid().len(), cfg.eval_mask_rate, cfg.gibbs.seed);
    let gibbs = GibbsConfig {
        trace_every: cfg.gibbs.trace_every.max(10),
        ..cfg.gibbs.clone()
    };
    let (_, chain) = impute(&vae, &truth.with_mask(&mask)?, &gibbs)?;
    let trace = latent_trace(&vae, &chain, x.view())?;
    let target = vae.latent_means(x.select(Axis(0), &[0]).view())?.row(0).to_vec();
    let trace_path = cfg.out("latent_trace.csv")?;
    trace.write_csv(&trace_path, Some(&target))?;
    let lines = vec![
        format!(
            "diagnose: {} of {} latent units active at threshold {ACTIVITY_THRESHOLD} over {} cubes",
            count_active(&act, ACTIVITY_THRESHOLD),
            act.len(),
            cubes.len()
        ),
        format!("  latent PCA variances {:?}", trace.variances),
    ];
    finish(cfg, "diagnose", &[model, dataset], vec![act_path, trace_path], lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["desk", "full"] {
            let c = PipelineConfig::profile(name).unwrap();
            c.validate().unwrap();
            let p = dir.path().join(format!("{name}.json"));
            c.write(&p).unwrap();
            assert_eq!(PipelineConfig::read(&p).unwrap(), c);
        }
        assert!(PipelineConfig::profile("huge").is_err());
        let c = PipelineConfig::desk().with_seed(9);
        assert_eq!((c.train.seed, c.gibbs.seed, c.hedge.seed), (10, 11, 12));
        assert_eq!(c.grid.dims(), (8, 6, 7));
    }

    #[test]
    fn missing_referenced_path_is_rejected() {
        let c = PipelineConfig {
            synth_model_path: Some("/nonexistent/model.json".into()),
            ..PipelineConfig::desk()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn directory_digest_depends_on_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("d");
        fs::create_dir_all(d.join("sub")).unwrap();
        fs::write(d.join("a.txt"), "1").unwrap();
        fs::write(d.join("sub/b.txt"), "2").unwrap();
        let h1 = digest_path(&d).unwrap();
        assert_eq!(h1, digest_path(&d).unwrap());
        fs::write(d.join("sub/b.txt"), "3").unwrap();
        assert_ne!(h1, digest_path(&d).unwrap());
    }
}
