//! Loss-landscape grids along gradient-informed directions, Laplacian
//! shape comparison, cross-sections, basin sweeps and the first-order vs
//! curvature-aware trajectory comparison.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curvature::{harvest, HarvestConfig};
use crate::data::{DataPartition, Part};
use crate::error::{Error, Result};
use crate::influence::{accumulate_forget_grad, influence_direction, retain_constraint_ok};
use crate::math::{laplacian2d, pca2, Grid2, ParamVec, RngState};
use crate::model::{Batch, CheckpointPair, Objective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Half-range of both perturbation coefficients.
    pub alpha: f64,
    pub n: usize,
    /// Examples taken from the head of the evaluation dataset.
    pub eval_samples: usize,
    pub dir_seeds: (u64, u64),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            n: 20,
            eval_samples: 32,
            dir_seeds: (1000, 2000),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::InvalidSpec(format!("grid side {} < 3", self.n)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidSpec(format!("grid half-range {}", self.alpha)));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidSpec("grid needs at least one eval sample".into()));
        }
        Ok(())
    }

    /// `n` values spanning `[−α, α]` inclusive, exactly antisymmetric about
    /// the middle.
    pub fn lambdas(&self) -> Vec<f64> {
        let last = (self.n - 1) as f64;
        (0..self.n)
            .map(|i| self.alpha * (2.0 * i as f64 - last) / last)
            .collect()
    }
}

/// `losses[i][j]` is the loss at `θ + λᵢ·d₁ + λⱼ·d₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub losses: Grid2,
    pub lambdas: Vec<f64>,
    pub d1: ParamVec,
    pub d2: ParamVec,
    pub spec: GridSpec,
    pub origin_loss: f64,
    pub warnings: Vec<String>,
}

/// Per-coordinate factors `±u`, `u ~ U[0.5, 1.5]`, random sign.
pub fn random_scale(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngState::new(seed, 0).rng();
    (0..dim)
        .map(|_| {
            let u: f64 = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                u
            } else {
                -u
            }
        })
        .collect()
}

/// Mean gradient over `probe`, rescaled coordinatewise by two seeded
/// random factor vectors.
pub fn gen_directions<O: Objective>(
    objective: &O,
    params: &ParamVec,
    probe: &[Batch],
    seeds: (u64, u64),
) -> Result<(ParamVec, ParamVec)> {
    let g = match accumulate_forget_grad(objective, params, probe) {
        Err(Error::EmptyForgetSet) => {
            return Err(Error::InsufficientData {
                part: "probe".into(),
                need: 1,
                have: 0,
            })
        }
        other => other?,
    };
    if g.is_zero() {
        return Err(Error::FlatProbe);
    }
    let scale = |seed| ParamVec::new(random_scale(g.dim(), seed)).and_then(|r| g.hadamard(&r));
    Ok((scale(seeds.0)?, scale(seeds.1)?))
}

/// Equal-sized head samples of forget-eval and retain-test.
pub fn mixed_probe(parts: &DataPartition, samples: usize) -> Result<Vec<Batch>> {
    let half = samples / 2;
    let f = parts.part(Part::ForgetEval);
    let r = parts.part(Part::RetainTest);
    let take = |ex: &[crate::data::Example], k: usize| -> Vec<Vec<u32>> {
        ex.iter().take(k).map(|e| e.tokens.clone()).collect()
    };
    let mut seqs = take(f, half);
    seqs.extend(take(r, samples - half));
    Ok(vec![Batch::new(seqs)?])
}

/// The first `samples` examples of one dataset, as a direction probe.
pub fn dataset_probe(parts: &DataPartition, part: Part, samples: usize) -> Result<Vec<Batch>> {
    let seqs: Vec<Vec<u32>> = parts.part(part).iter().take(samples).map(|e| e.tokens.clone()).collect();
    if seqs.is_empty() {
        return Err(Error::InsufficientData {
            part: part.tag().into(),
            need: 1,
            have: 0,
        });
    }
    Ok(vec![Batch::new(seqs)?])
}

/// The first `spec.eval_samples` examples of one dataset.
pub fn eval_set(parts: &DataPartition, part: Part, spec: &GridSpec) -> Result<Vec<Batch>> {
    let ex = parts.part(part);
    if ex.is_empty() {
        return Err(Error::InsufficientData {
            part: part.tag().into(),
            need: 1,
            have: 0,
        });
    }
    let seqs = ex.iter().take(spec.eval_samples).map(|e| e.tokens.clone()).collect();
    Ok(vec![Batch::new(seqs)?])
}

fn mean_loss<O: Objective>(objective: &O, params: &ParamVec, data: &[Batch]) -> Result<f64> {
    let total: usize = data.iter().map(Batch::len).sum();
    if total == 0 {
        return Err(Error::InsufficientData {
            part: "eval".into(),
            need: 1,
            have: 0,
        });
    }
    let mut acc = 0.0;
    for b in data {
        acc += b.len() as f64 * objective.loss(params, b)?;
    }
    Ok(acc / total as f64)
}

pub fn eval_grid<O: Objective + Sync>(
    objective: &O,
    params: &ParamVec,
    d1: &ParamVec,
    d2: &ParamVec,
    spec: &GridSpec,
    eval: &[Batch],
) -> Result<LandscapeGrid> {
    eval_grid_threads(objective, params, d1, d2, spec, eval, 1)
}

/// [`eval_grid`] with rows spread over up to `threads` workers. Each row is
/// written to its own slot, so the result does not depend on `threads`.
pub fn eval_grid_threads<O: Objective + Sync>(
    objective: &O,
    params: &ParamVec,
    d1: &ParamVec,
    d2: &ParamVec,
    spec: &GridSpec,
    eval: &[Batch],
    threads: usize,
) -> Result<LandscapeGrid> {
    spec.validate()?;
    for d in [d1, d2] {
        if d.dim() != params.dim() {
            return Err(Error::DimMismatch {
                expected: params.dim(),
                got: d.dim(),
            });
        }
    }
    let origin_loss = mean_loss(objective, params, eval)?;
    let lambdas = spec.lambdas();
    let row = |i: usize| -> Result<(Vec<f64>, Vec<String>)> {
        let base = params.axpy(lambdas[i], d1)?;
        let mut values = Vec::with_capacity(lambdas.len());
        let mut warnings = Vec::new();
        for (j, &l2) in lambdas.iter().enumerate() {
            let v = match base.axpy(l2, d2).and_then(|p| mean_loss(objective, &p, eval)) {
                Ok(v) if v.is_finite() => v,
                Ok(v) => {
                    warnings.push(format!("cell ({i},{j}) loss {v}"));
                    f64::INFINITY
                }
                Err(e @ Error::NonFinite(_)) => {
                    warnings.push(format!("cell ({i},{j}) {e}"));
                    f64::INFINITY
                }
                Err(e) => return Err(e),
            };
            values.push(v);
        }
        Ok((values, warnings))
    };
    let n = spec.n;
    let workers = threads.clamp(1, n);
    let mut rows: Vec<Option<Result<(Vec<f64>, Vec<String>)>>> = (0..n).map(|_| None).collect();
    if workers == 1 {
        for (i, slot) in rows.iter_mut().enumerate() {
            *slot = Some(row(i));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let row = &row;
                    scope.spawn(move || (w..n).step_by(workers).map(|i| (i, row(i))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("grid worker panicked") {
                    rows[i] = Some(r);
                }
            }
        });
    }
    let mut data = Vec::with_capacity(n * n);
    let mut warnings = Vec::new();
    for r in rows {
        let (values, w) = r.expect("every row evaluated")?;
        data.extend(values);
        warnings.extend(w);
    }
    Ok(LandscapeGrid {
        losses: Grid2::new(n, n, data)?,
        lambdas,
        d1: d1.clone(),
        d2: d2.clone(),
        spec: spec.clone(),
        origin_loss,
        warnings,
    })
}

/// `(1 − |corr(∇²a, ∇²b)|) × 100`, percent.
pub fn struct_diff(a: &LandscapeGrid, b: &LandscapeGrid) -> Result<f64> {
    struct_diff_grids(&a.losses, &b.losses)
}

pub fn struct_diff_grids(a: &Grid2, b: &Grid2) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::DimMismatch {
            expected: a.rows * a.cols,
            got: b.rows * b.cols,
        });
    }
    let (la, lb) = (laplacian2d(a)?, laplacian2d(b)?);
    if is_flat(&la, a) || is_flat(&lb, b) {
        return Err(Error::FlatLandscape);
    }
    let r = match crate::analysis::pearson(&la.data, &lb.data) {
        Err(Error::ZeroVariance(_)) => return Err(Error::FlatLandscape),
        other => other?,
    };
    Ok((1.0 - r.abs()) * 100.0)
}

/// A Laplacian whose spread is at rounding level for the grid's magnitude
/// carries no shape.
fn is_flat(lap: &Grid2, grid: &Grid2) -> bool {
    let scale = grid.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lo = lap.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lap.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= 64.0 * f64::EPSILON * scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    D1,
    D2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSection {
    pub axis: Axis,
    /// Index and value of the other coefficient held fixed. For even `n`
    /// there is no zero cell and the lower of the two nearest indices is
    /// used.
    pub fixed_index: usize,
    pub fixed_lambda: f64,
    pub points: Vec<(f64, f64)>,
}

pub fn cross_section(grid: &LandscapeGrid, axis: Axis) -> CrossSection {
    let n = grid.lambdas.len();
    let fixed_index = (n - 1) / 2;
    let points = (0..n)
        .map(|k| {
            let v = match axis {
                Axis::D1 => grid.losses.get(k, fixed_index),
                Axis::D2 => grid.losses.get(fixed_index, k),
            };
            (grid.lambdas[k], v)
        })
        .collect();
    CrossSection {
        axis,
        fixed_index,
        fixed_lambda: grid.lambdas[fixed_index],
        points,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinResult {
    pub directions: usize,
    pub magnitudes: Vec<f64>,
    /// Mean unsafe fraction at each magnitude.
    pub margin_curve: Vec<f64>,
    /// `losses[direction][magnitude]`
    pub losses: Vec<Vec<f64>>,
    pub threshold: f64,
    /// Percentage of samples classified safe.
    pub score: f64,
}

impl BasinResult {
    /// Rescores the recorded losses against another threshold.
    pub fn rescore(&self, threshold: f64) -> BasinResult {
        let (margin_curve, score) = basin_score(&self.losses, self.magnitudes.len(), threshold);
        BasinResult {
            margin_curve,
            score,
            threshold,
            ..self.clone()
        }
    }
}

/// Midpoint of base and tuned forget losses.
pub fn default_unsafe_threshold(base_forget: f64, tuned_forget: f64) -> f64 {
    0.5 * (base_forget + tuned_forget)
}

fn unsafe_at(loss: f64, threshold: f64) -> bool {
    loss < threshold
}

fn basin_score(losses: &[Vec<f64>], n_mags: usize, threshold: f64) -> (Vec<f64>, f64) {
    let n_dirs = losses.len() as f64;
    let margin_curve = (0..n_mags)
        .map(|m| losses.iter().filter(|row| unsafe_at(row[m], threshold)).count() as f64 / n_dirs)
        .collect();
    let total = losses.len() * n_mags;
    let safe = losses.iter().flatten().filter(|&&l| !unsafe_at(l, threshold)).count();
    (margin_curve, 100.0 * safe as f64 / total as f64)
}

/// Forget loss along random unit directions at magnitudes spanning
/// `[−range, range]`. A sample is unsafe when its forget loss falls below
/// `threshold`.
#[allow(clippy::too_many_arguments)]
pub fn basin_sweep<O: Objective>(
    objective: &O,
    params: &ParamVec,
    forget: &[Batch],
    threshold: f64,
    range: f64,
    n_dirs: usize,
    n_mags: usize,
    rng: RngState,
) -> Result<BasinResult> {
    if n_dirs == 0 || n_mags == 0 {
        return Err(Error::InvalidSpec("basin sweep needs at least one direction and magnitude".into()));
    }
    if !(range >= 0.0 && range.is_finite()) {
        return Err(Error::InvalidSpec(format!("basin range {range}")));
    }
    let magnitudes: Vec<f64> = if n_mags == 1 {
        vec![0.0]
    } else {
        let last = (n_mags - 1) as f64;
        (0..n_mags).map(|k| range * (2.0 * k as f64 - last) / last).collect()
    };
    let mut rng = rng.rng();
    let mut losses = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        let raw: Vec<f64> = (0..params.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let u = ParamVec::new(raw)?.normalized().ok_or(Error::NullDirection(0.0))?;
        let row = magnitudes
            .iter()
            .map(|&m| {
                let p = params.axpy(m, &u)?;
                match mean_loss(objective, &p, forget) {
                    Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
                    other => other,
                }
            })
            .collect::<Result<Vec<_>>>()?;
        losses.push(row);
    }
    let (margin_curve, score) = basin_score(&losses, n_mags, threshold);
    Ok(BasinResult {
        directions: n_dirs,
        magnitudes,
        margin_curve,
        losses,
        threshold,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub step_budget: usize,
    pub lrs: Vec<f64>,
    /// Retain budget over the tuned checkpoint's retain-train loss.
    pub epsilon: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            step_budget: 10,
            lrs: vec![0.01, 0.05],
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `forget − retain` at the start and after every step.
    pub objective: Vec<f64>,
    pub forget: Vec<f64>,
    pub retain: Vec<f64>,
    /// Whether each step passed the retain budget check. A rejected step
    /// leaves the parameters where they were.
    pub accepted: Vec<bool>,
    pub coords: Vec<(f64, f64)>,
}

impl Trajectory {
    /// Steps after which the combined objective is lower than before.
    pub fn decreasing_steps(&self) -> usize {
        self.objective.windows(2).filter(|w| w[1] < w[0]).count()
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("trajectory has a start point")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRun {
    pub lr: f64,
    pub first_order: Trajectory,
    pub curvature: Trajectory,
    pub explained_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub step_budget: usize,
    pub retain_baseline: f64,
    pub epsilon: f64,
    pub runs: Vec<TrajectoryRun>,
}

struct Track {
    points: Vec<ParamVec>,
    forget: Vec<f64>,
    retain: Vec<f64>,
    accepted: Vec<bool>,
}

impl Track {
    fn new(start: &ParamVec, forget: f64, retain: f64) -> Self {
        Self {
            points: vec![start.clone()],
            forget: vec![forget],
            retain: vec![retain],
            accepted: Vec::new(),
        }
    }

    fn push(&mut self, p: ParamVec, forget: f64, retain: f64, accepted: bool) {
        self.points.push(p);
        self.forget.push(forget);
        self.retain.push(retain);
        self.accepted.push(accepted);
    }

    fn finish(self, coords: &[(f64, f64)]) -> Trajectory {
        Trajectory {
            objective: self.forget.iter().zip(&self.retain).map(|(f, r)| f - r).collect(),
            accepted: self.accepted,
            forget: self.forget,
            retain: self.retain,
            coords: coords.to_vec(),
        }
    }
}

/// From the tuned checkpoint, runs gradient ascent on the forget loss,
/// `θ ← θ + lr·∇L_forget`, next to curvature-aware steps
/// `θ ← θ + lr·Δθ` along the unit influence direction with a fresh harvest
/// per step. In both, a step that would push retain-train loss past the
/// budget, or make a loss non-finite, is rejected. The two paths are
/// projected jointly onto their top principal components.
pub fn trajectory_compare<O: Objective>(
    objective: &O,
    ckpt: &CheckpointPair,
    parts: &DataPartition,
    cfg: &TrajectoryConfig,
    hcfg: &HarvestConfig,
    rng: RngState,
) -> Result<TrajectoryReport> {
    if cfg.step_budget == 0 || cfg.lrs.is_empty() {
        return Err(Error::InvalidSpec("trajectory needs a step budget and learning rates".into()));
    }
    let forget_batches = parts.batches(Part::ForgetEval);
    let forget = parts.whole(Part::ForgetEval)?;
    let retain = parts.retain_train()?;
    let start = &ckpt.tuned;
    let retain_baseline = objective.loss(start, &retain)?;
    let forget0 = objective.loss(start, &forget)?;

    let mut runs = Vec::with_capacity(cfg.lrs.len());
    for (k, &lr) in cfg.lrs.iter().enumerate() {
        let step_to = |track: &mut Track, delta: &ParamVec| -> Result<()> {
            let here = track.points.last().expect("track has a start point").clone();
            let trial = here.axpy(lr, delta)?;
            let losses = objective
                .loss(&trial, &forget)
                .and_then(|f| Ok((f, objective.loss(&trial, &retain)?)));
            match losses {
                Ok((f, r)) if retain_constraint_ok(r, retain_baseline, cfg.epsilon) => {
                    track.push(trial, f, r, true);
                }
                Ok(_) | Err(Error::NonFinite(_)) => {
                    let (f, r) = (*track.forget.last().unwrap(), *track.retain.last().unwrap());
                    track.push(here, f, r, false);
                }
                Err(e) => return Err(e),
            }
            Ok(())
        };

        let mut fo = Track::new(start, forget0, retain_baseline);
        for _ in 0..cfg.step_budget {
            let here = fo.points.last().unwrap().clone();
            let g = accumulate_forget_grad(objective, &here, &forget_batches)?;
            step_to(&mut fo, &g)?;
        }

        let mut ca = Track::new(start, forget0, retain_baseline);
        let stream = rng.fork(k as u64 + 1);
        for step in 0..cfg.step_budget {
            let here = ca.points.last().unwrap().clone();
            let (history, _) = harvest(objective, &here, parts, hcfg, stream.fork(step as u64))?;
            let (delta, _) = influence_direction(&history, objective, &here, &forget_batches)?;
            step_to(&mut ca, &delta)?;
        }

        let mut cloud = fo.points.clone();
        cloud.extend(ca.points.iter().cloned());
        let proj = pca2(&cloud)?;
        let m = fo.points.len();
        runs.push(TrajectoryRun {
            lr,
            first_order: fo.finish(&proj.coords[..m]),
            curvature: ca.finish(&proj.coords[m..]),
            explained_variance: proj.explained_ratio(),
        });
    }
    Ok(TrajectoryReport {
        step_budget: cfg.step_budget,
        retain_baseline,
        epsilon: cfg.epsilon,
        runs,
    })
}
