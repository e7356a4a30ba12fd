//! Two-stage registration: a global affine found by simplex search, then a
//! lattice TPS refined by coordinate descent, both driven by the feature
//! similarity objective. Key-curve RMSE on validation annotations decides
//! early stopping.

mod objective;

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::keycurve::{fit_all, rmse, transform_points, AnnotationSet, CurveScore, DEFAULT_SAMPLES};
use crate::optim::NelderMead;
use crate::volume::{preprocess_pet, ChannelLabel, VoxelGrid, DEFAULT_LOG_EPSILON};
use crate::warp::{lattice, Affine3, AffineParams, SpatialTransform, Tps3, TpsSolver, Transform};

pub use objective::{objective, objective_from_features, FastObjective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineStageConfig {
    /// Multiplies the initial simplex steps (4°, 8 mm, 0.05 log-scale, 0.03 shear).
    pub simplex_scale: f64,
    /// Objective evaluations per restart.
    pub max_evals: usize,
    pub restarts: usize,
    pub seed: u64,
    pub f_tol: f64,
}

impl Default for AffineStageConfig {
    fn default() -> Self {
        AffineStageConfig {
            simplex_scale: 1.0,
            max_evals: 2000,
            restarts: 5,
            seed: 0,
            f_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpsStageConfig {
    pub enabled: bool,
    /// Control lattice spanning the target grid.
    pub lattice: [usize; 3],
    pub lambda: f64,
    /// Initial coordinate-descent step, halved after a sweep without moves.
    pub step_mm: f64,
    pub min_step_mm: f64,
    pub max_sweeps: usize,
}

impl Default for TpsStageConfig {
    fn default() -> Self {
        TpsStageConfig {
            enabled: true,
            lattice: [4, 4, 4],
            lambda: 0.0,
            step_mm: 4.0,
            min_step_mm: 1.0,
            max_sweeps: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingConfig {
    /// Consecutive non-improving validation checks tolerated before halting.
    pub patience: usize,
    pub n_samples: usize,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig {
            patience: 1,
            n_samples: DEFAULT_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub features: FeatureConfig,
    pub w_sim: f64,
    pub w_lcka: f64,
    pub affine: AffineStageConfig,
    pub tps: TpsStageConfig,
    pub stopping: StoppingConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            features: FeatureConfig::default(),
            w_sim: 1.0,
            w_lcka: 0.25,
            affine: AffineStageConfig::default(),
            tps: TpsStageConfig::default(),
            stopping: StoppingConfig::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let cfg: RegistrationConfig = serde_json::from_str(&text).map_err(|e| Error::HeaderParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if !(self.w_sim >= 0.0 && self.w_lcka >= 0.0 && self.w_sim.is_finite() && self.w_lcka.is_finite()) {
            return Err(Error::InvalidConfig("objective weights must be >= 0".into()));
        }
        if !(self.affine.simplex_scale > 0.0) || !(self.affine.f_tol >= 0.0) {
            return Err(Error::InvalidConfig("simplex scale must be positive".into()));
        }
        let t = &self.tps;
        if t.lattice.iter().any(|&d| d < 2) {
            return Err(Error::InvalidConfig("tps lattice dims must be >= 2".into()));
        }
        if !(t.lambda >= 0.0) || !(t.step_mm > 0.0) || !(t.min_step_mm > 0.0) {
            return Err(Error::InvalidConfig("tps lambda, step and min step must be positive".into()));
        }
        if self.stopping.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Validation annotations for the source and target visits.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub src: &'a AnnotationSet,
    pub tgt: &'a AnnotationSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageObjective {
    pub stage: String,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyCurveCheck {
    pub stage: String,
    pub rmse_mm: f64,
}

/// Output of [`register`]; the transform fields sit at the top level so the
/// file also reads as a transform file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    #[serde(flatten)]
    pub transform: Transform,
    /// Every objective evaluation, in order.
    pub objective_trace: Vec<f64>,
    pub stage_objectives: Vec<StageObjective>,
    pub keycurve_trace: Vec<KeyCurveCheck>,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

impl RegistrationResult {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let r: RegistrationResult = serde_json::from_str(&text).map_err(|e| Error::HeaderParse(e.to_string()))?;
        r.transform.validate()?;
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn initial_objective(&self) -> f64 {
        self.stage_objectives.first().map_or(f64::NAN, |s| s.objective)
    }

    pub fn final_objective(&self) -> f64 {
        self.stage_objectives.last().map_or(f64::NAN, |s| s.objective)
    }
}

/// Adds `PET_PREPROCESSED` when the features need it and it is missing.
pub fn prepare(grid: &VoxelGrid, features: &FeatureConfig) -> Result<VoxelGrid> {
    if features.channels.contains(&ChannelLabel::PetPreprocessed) && !grid.has_channel(ChannelLabel::PetPreprocessed) {
        preprocess_pet(grid, DEFAULT_LOG_EPSILON)
    } else {
        Ok(grid.clone())
    }
}

fn base_steps(scale: f64) -> [f64; AffineParams::DIM] {
    let mut s = [0.0; AffineParams::DIM];
    s[0..3].fill(4.0);
    s[3..6].fill(8.0);
    s[6..9].fill(0.05);
    s[9..12].fill(0.03);
    s.map(|v| v * scale)
}

/// Simplex search over the 12 affine parameters about the target center,
/// starting from the identity. Returns the best map and every evaluated
/// objective value.
pub fn register_affine(src: &VoxelGrid, tgt: &VoxelGrid, cfg: &RegistrationConfig) -> Result<(Affine3, Vec<f64>)> {
    cfg.validate()?;
    let fast = FastObjective::new(src, tgt, &cfg.features, cfg.w_sim, cfg.w_lcka)?;
    affine_stage(&fast, tgt, cfg, &mut Vec::new())
}

fn affine_stage(
    fast: &FastObjective,
    tgt: &VoxelGrid,
    cfg: &RegistrationConfig,
    trace: &mut Vec<f64>,
) -> Result<(Affine3, Vec<f64>)> {
    let center: [f64; 3] = tgt.geometry().center().into();
    let a = &cfg.affine;
    if a.max_evals == 0 || a.restarts == 0 {
        return Err(Error::OptimizerBudgetExceeded);
    }
    let nm = NelderMead {
        max_evals: a.max_evals,
        f_tol: a.f_tol,
        x_tol: 1e-3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let base = base_steps(a.simplex_scale);
    let mut local = Vec::new();
    let mut first_error = None;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for restart in 0..a.restarts {
        let x0 = best.as_ref().map_or_else(|| vec![0.0; AffineParams::DIM], |b| b.0.clone());
        let steps: Vec<f64> = if restart == 0 {
            base.to_vec()
        } else {
            base.iter()
                .map(|s| {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * s * rng.gen_range(0.25..1.0)
                })
                .collect()
        };
        let m = nm.minimize(
            |x| {
                let affine = AffineParams::from_vector(x, center).to_affine();
                match fast.eval_affine(&affine) {
                    Ok(v) => {
                        local.push(v);
                        v
                    }
                    Err(e) => {
                        first_error.get_or_insert(e);
                        f64::INFINITY
                    }
                }
            },
            &x0,
            &steps,
        );
        if let Some(m) = m {
            if m.f.is_finite() && best.as_ref().map_or(true, |b| m.f < b.1) {
                best = Some((m.x, m.f));
            }
        }
    }
    trace.extend_from_slice(&local);
    match best {
        Some((x, _)) => Ok((AffineParams::from_vector(&x, center).to_affine(), local)),
        None => Err(first_error.unwrap_or(Error::OptimizerBudgetExceeded)),
    }
}

/// Per-sweep callback result of the TPS stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepDecision {
    Continue,
    Halt,
}

/// Coordinate descent over the control displacements of a lattice TPS
/// composed after the fixed `affine_init`.
pub fn register_tps(
    src: &VoxelGrid,
    tgt: &VoxelGrid,
    affine_init: &Affine3,
    cfg: &RegistrationConfig,
) -> Result<(Tps3, Vec<f64>)> {
    cfg.validate()?;
    let fast = FastObjective::new(src, tgt, &cfg.features, cfg.w_sim, cfg.w_lcka)?;
    let mut trace = Vec::new();
    let out = tps_stage(&fast, tgt, affine_init, cfg, &mut trace, &|_| {}, |_, _| SweepDecision::Continue)?;
    Ok((out.tps, trace))
}

struct TpsOutcome {
    tps: Tps3,
    /// Objective of `tps` with exact inverse pull-back.
    objective: f64,
    halted: bool,
}

/// Inverse of `tps` at every target point, warm-started from `start`.
fn pull_back(tps: &Tps3, points: &[Point3<f64>], start: &[Point3<f64>]) -> Vec<Point3<f64>> {
    points
        .par_iter()
        .zip(start)
        .map(|(q, s)| match tps.invert_point_from(q, *s) {
            Ok(p) => p,
            Err(_) => tps.invert_point(q).unwrap_or(*s),
        })
        .collect()
}

fn tps_stage<C>(
    fast: &FastObjective,
    tgt: &VoxelGrid,
    affine: &Affine3,
    cfg: &RegistrationConfig,
    trace: &mut Vec<f64>,
    progress: &dyn Fn(f64),
    mut on_sweep: C,
) -> Result<TpsOutcome>
where
    C: FnMut(usize, &Tps3) -> SweepDecision,
{
    let t = &cfg.tps;
    let (lo, hi) = tgt.geometry().bounds();
    let controls = lattice(&lo, &hi, t.lattice);
    let solver = TpsSolver::new(controls.clone(), t.lambda)?;
    let affine_inv = affine.invert()?;
    let points = fast.points();
    let n = controls.len();

    let mut disp = vec![Vector3::<f64>::zeros(); n];
    let solve = |disp: &[Vector3<f64>]| {
        let dst: Vec<Point3<f64>> = controls.iter().zip(disp).map(|(c, d)| c + d).collect();
        solver.solve(&dst)
    };

    let mut tps = solve(&disp)?;
    let mut u = pull_back(&tps, points, points);
    let mut f_exact = fast.eval_pulled(&affine_inv, &u)?;
    trace.push(f_exact);
    let mut step = t.step_mm;
    let mut halted = false;

    for sweep in 0..t.max_sweeps {
        progress(sweep as f64 / t.max_sweeps as f64);
        if step < t.min_step_mm {
            break;
        }
        let phi: DMatrix<f64> = solver.cardinal_matrix(&u);
        let mut trial_disp = disp.clone();
        let mut u_trial = u.clone();
        let mut f = f_exact;
        let mut moved = false;
        for k in 0..n {
            for axis in 0..3 {
                for sign in [1.0, -1.0] {
                    let delta = sign * step;
                    let v = fast.eval_pulled_moved(&affine_inv, &u_trial, &phi, k, axis, delta)?;
                    trace.push(v);
                    if v < f {
                        f = v;
                        trial_disp[k][axis] += delta;
                        let m = phi.nrows();
                        let column = &phi.as_slice()[k * m..(k + 1) * m];
                        for (p, c) in u_trial.iter_mut().zip(column) {
                            p[axis] -= delta * c;
                        }
                        moved = true;
                        break;
                    }
                }
            }
        }
        if !moved {
            step *= 0.5;
            continue;
        }
        // Re-anchor on the exact inverse; keep the sweep only if it helps.
        let candidate = solve(&trial_disp)?;
        let u_new = pull_back(&candidate, points, &u_trial);
        let f_new = fast.eval_pulled(&affine_inv, &u_new)?;
        trace.push(f_new);
        if f_new < f_exact {
            disp = trial_disp;
            tps = candidate;
            u = u_new;
            f_exact = f_new;
        } else {
            step *= 0.5;
            continue;
        }
        if on_sweep(sweep, &tps) == SweepDecision::Halt {
            halted = true;
            break;
        }
    }
    Ok(TpsOutcome {
        tps,
        objective: f_exact,
        halted,
    })
}

/// Early-stopping bookkeeping over validation checks.
struct Stopper<'a> {
    validation: Validation<'a>,
    n_samples: usize,
    patience: usize,
    best: Option<(f64, Transform)>,
    bad: usize,
    checks: Vec<KeyCurveCheck>,
}

impl Stopper<'_> {
    /// Records a check; true when the run should halt.
    fn check(&mut self, stage: String, t: &Transform) -> Result<bool> {
        let report = evaluate(self.validation.src, self.validation.tgt, t, self.n_samples)?;
        let value = report.rmse_mm;
        self.checks.push(KeyCurveCheck { stage, rmse_mm: value });
        match &self.best {
            Some((best, _)) if value >= *best => {
                self.bad += 1;
                Ok(self.bad > self.patience)
            }
            _ => {
                self.best = Some((value, t.clone()));
                self.bad = 0;
                Ok(false)
            }
        }
    }
}

/// Full pipeline: preprocessing, affine stage, then TPS stage.
///
/// With validation annotations the key-curve RMSE is checked on the
/// identity, after the affine stage and after every accepted TPS sweep; the
/// run halts after more than `patience` consecutive non-improving checks and
/// returns the best checked state.
pub fn register(
    src: &VoxelGrid,
    tgt: &VoxelGrid,
    cfg: &RegistrationConfig,
    validation: Option<Validation<'_>>,
) -> Result<RegistrationResult> {
    register_with_progress(src, tgt, cfg, validation, &|_| {})
}

/// [`register`], reporting the completed fraction (0 to 1) as it goes.
pub fn register_with_progress(
    src: &VoxelGrid,
    tgt: &VoxelGrid,
    cfg: &RegistrationConfig,
    validation: Option<Validation<'_>>,
    progress: &dyn Fn(f64),
) -> Result<RegistrationResult> {
    let started = Instant::now();
    cfg.validate()?;
    let src = prepare(src, &cfg.features)?;
    let tgt = prepare(tgt, &cfg.features)?;
    let fast = FastObjective::new(&src, &tgt, &cfg.features, cfg.w_sim, cfg.w_lcka)?;
    progress(0.05);

    let mut trace = Vec::new();
    let initial = fast.eval_affine(&Affine3::identity())?;
    trace.push(initial);
    let mut stages = vec![StageObjective {
        stage: "initial".into(),
        objective: initial,
    }];

    let mut stopper = validation.map(|v| Stopper {
        validation: v,
        n_samples: cfg.stopping.n_samples,
        patience: cfg.stopping.patience,
        best: None,
        bad: 0,
        checks: Vec::new(),
    });
    let mut halted = false;
    if let Some(s) = stopper.as_mut() {
        halted = s.check("initial".into(), &Transform::identity())?;
    }

    let (mut affine, _) = affine_stage(&fast, &tgt, cfg, &mut trace)?;
    let mut affine_value = fast.eval_affine(&affine)?;
    if affine_value > initial {
        affine = Affine3::identity();
        affine_value = initial;
    }
    stages.push(StageObjective {
        stage: "affine".into(),
        objective: affine_value,
    });
    progress(0.5);
    let mut transform = Transform::from(affine);
    if let Some(s) = stopper.as_mut() {
        halted = halted || s.check("affine".into(), &transform)?;
    }

    if cfg.tps.enabled && !halted {
        let mut failure = None;
        let sweep_progress = |f: f64| progress(0.5 + 0.5 * f);
        let outcome = tps_stage(&fast, &tgt, &affine, cfg, &mut trace, &sweep_progress, |sweep, tps| match stopper.as_mut() {
            Some(s) => match s.check(format!("tps_sweep_{}", sweep + 1), &Transform::new(affine, Some(tps.clone()))) {
                Ok(true) => SweepDecision::Halt,
                Ok(false) => SweepDecision::Continue,
                Err(e) => {
                    failure = Some(e);
                    SweepDecision::Halt
                }
            },
            None => SweepDecision::Continue,
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        halted = outcome.halted;
        if outcome.objective <= affine_value {
            stages.push(StageObjective {
                stage: "tps".into(),
                objective: outcome.objective,
            });
            transform = Transform::new(affine, Some(outcome.tps));
        }
    }

    progress(1.0);
    let mut keycurve_trace = Vec::new();
    if let Some(s) = stopper {
        keycurve_trace = s.checks;
        if let Some((_, best)) = s.best {
            transform = best;
        }
    }
    Ok(RegistrationResult {
        transform,
        objective_trace: trace,
        stage_objectives: stages,
        keycurve_trace,
        stopped_early: halted,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Key-curve evaluation of a transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pooled RMSE after mapping the source points through the transform.
    pub rmse_mm: f64,
    pub mean_distance_mm: f64,
    pub per_curve: Vec<CurveScore>,
    /// Pooled RMSE of the untouched inputs.
    pub unaligned_rmse_mm: f64,
    pub unaligned_per_curve: Vec<CurveScore>,
    pub skipped: Vec<String>,
    pub n_samples: usize,
}

/// Maps the source points through `t`, refits both sides and scores the
/// shared curves, alongside the unaligned baseline.
pub fn evaluate<T: SpatialTransform + ?Sized>(
    src_points: &AnnotationSet,
    tgt_points: &AnnotationSet,
    t: &T,
    n_samples: usize,
) -> Result<EvalReport> {
    let tgt = fit_all(tgt_points)?;
    let src = fit_all(src_points)?;
    let moved = AnnotationSet {
        visit_id: src_points.visit_id.clone(),
        points: transform_points(&src_points.points, t),
    };
    let aligned = fit_all(&moved)?;
    let after = rmse(&aligned, &tgt, n_samples)?;
    let before = rmse(&src, &tgt, n_samples)?;
    Ok(EvalReport {
        rmse_mm: after.rmse_mm,
        mean_distance_mm: after.mean_distance_mm,
        per_curve: after.per_curve,
        unaligned_rmse_mm: before.rmse_mm,
        unaligned_per_curve: before.per_curve,
        skipped: after.skipped,
        n_samples,
    })
}
