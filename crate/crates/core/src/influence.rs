//! Inverse-Hessian products from curvature pairs and the iterative influence
//! update that pushes forget-set loss back up under a retain-loss budget.

use serde::{Deserialize, Serialize};

use crate::curvature::{harvest, HarvestConfig, HarvestLog, LbfgsHistory};
use crate::data::{DataPartition, Part};
use crate::error::{Error, Result};
use crate::math::{dot, norm, ParamVec, RngState};
use crate::model::{Batch, CheckpointPair, Objective};

pub const RESTORATION_REPORT_SCHEMA: &str = "curvrestore.restoration-report";
pub const RESTORATION_REPORT_SCHEMA_VERSION: u32 = 1;

/// How stored unit pairs enter the recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScaling {
    /// `(ŝ, (‖y‖/‖s‖)·ŷ)`: the raw pair divided by `‖s‖`, so every pair
    /// satisfies the secant equation of the underlying Hessian.
    #[default]
    Secant,
    /// `(ŝ, ŷ)` as stored. Each pair then encodes curvature 1 along `ŝ`.
    Unit,
}

/// `H⁻¹g` by the L-BFGS two-loop recursion with secant scaling.
pub fn two_loop(history: &LbfgsHistory, g: &ParamVec) -> Result<ParamVec> {
    two_loop_with(history, g, PairScaling::Secant)
}

/// Two-loop recursion with `H₀ = γI`, `γ = ⟨s,y⟩/⟨y,y⟩` of the newest pair.
/// An empty history returns `g`.
pub fn two_loop_with(history: &LbfgsHistory, g: &ParamVec, scaling: PairScaling) -> Result<ParamVec> {
    if let Some(d) = history.dim() {
        if d != g.dim() {
            return Err(Error::DimMismatch {
                expected: d,
                got: g.dim(),
            });
        }
    }
    let pairs: Vec<(&ParamVec, ParamVec)> = history
        .pairs()
        .map(|p| {
            let y = match scaling {
                PairScaling::Secant => p.y.scaled(p.curvature_scale()),
                PairScaling::Unit => p.y.clone(),
            };
            (&p.s, y)
        })
        .collect();
    let rho: Vec<f64> = pairs.iter().map(|(s, y)| 1.0 / dot(s, y).expect("same dim")).collect();

    let mut q = g.clone();
    let mut alpha = vec![0.0; pairs.len()];
    for k in (0..pairs.len()).rev() {
        let (s, y) = &pairs[k];
        alpha[k] = rho[k] * dot(s, &q)?;
        q = axpy_checked(&q, -alpha[k], y, k)?;
    }
    let mut r = match pairs.last() {
        Some((s, y)) => {
            let gamma = dot(s, y)? / dot(y, y)?;
            axpy_checked(&ParamVec::zeros(q.dim()), gamma, &q, pairs.len() - 1)?
        }
        None => q,
    };
    for (k, (s, y)) in pairs.iter().enumerate() {
        let beta = rho[k] * dot(y, &r)?;
        r = axpy_checked(&r, alpha[k] - beta, s, k)?;
    }
    Ok(r)
}

fn axpy_checked(x: &ParamVec, a: f64, y: &ParamVec, pair: usize) -> Result<ParamVec> {
    let v: Vec<f64> = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p + a * q).collect();
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NumericalBreakdown { pair });
    }
    ParamVec::new(v)
}

/// Example-weighted mean gradient over `batches`, in order.
pub fn accumulate_forget_grad<O: Objective>(objective: &O, params: &ParamVec, batches: &[Batch]) -> Result<ParamVec> {
    let total: usize = batches.iter().map(Batch::len).sum();
    if total == 0 {
        return Err(Error::EmptyForgetSet);
    }
    let mut acc = ParamVec::zeros(params.dim());
    for b in batches {
        let (_, g) = objective.loss_and_grad(params, b)?;
        acc = acc.axpy(b.len() as f64, &g)?;
    }
    Ok(acc.scaled(1.0 / total as f64))
}

/// Unit ascent direction `H⁻¹∇L_forget / ‖H⁻¹∇L_forget‖` and the norm before
/// normalization.
pub fn influence_direction<O: Objective>(
    history: &LbfgsHistory,
    objective: &O,
    params: &ParamVec,
    forget: &[Batch],
) -> Result<(ParamVec, f64)> {
    let g = accumulate_forget_grad(objective, params, forget)?;
    let raw = two_loop(history, &g)?;
    let n = norm(&raw);
    if !(n >= 1e-12) {
        return Err(Error::NullDirection(n));
    }
    Ok((raw.scaled(1.0 / n), n))
}

/// `θ + η·Δθ − λ·θ`
pub fn apply_update(params: &ParamVec, delta: &ParamVec, eta: f64, lambda: f64) -> Result<ParamVec> {
    params.scaled(1.0 - lambda).axpy(eta, delta)
}

/// Inclusive retain budget check.
pub fn retain_constraint_ok(retain_now: f64, retain_baseline: f64, epsilon: f64) -> bool {
    retain_now <= retain_baseline + epsilon
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationConfig {
    pub iterations: usize,
    /// Step scale used when `eta_grid` is absent.
    pub eta: f64,
    pub lambda: f64,
    pub lambda_anneal: f64,
    pub epsilon: f64,
    pub eta_grid: Option<Vec<f64>>,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            eta: 0.1,
            lambda: 0.1,
            lambda_anneal: 0.95,
            epsilon: 0.1,
            eta_grid: Some(vec![0.01, 0.05, 0.1, 0.2]),
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidSpec("iterations must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidSpec("epsilon must be positive".into()));
        }
        if !(self.lambda_anneal > 0.0 && self.lambda_anneal <= 1.0) {
            return Err(Error::InvalidSpec("lambda-anneal must lie in (0, 1]".into()));
        }
        if matches!(&self.eta_grid, Some(g) if g.is_empty()) {
            return Err(Error::InvalidSpec("eta-grid must be non-empty".into()));
        }
        Ok(())
    }

    /// λ used at each iteration.
    pub fn lambda_trace(&self) -> Vec<f64> {
        let mut l = self.lambda;
        (0..self.iterations)
            .map(|_| {
                let cur = l;
                l *= self.lambda_anneal;
                cur
            })
            .collect()
    }

    fn candidates(&self) -> Vec<f64> {
        self.eta_grid.clone().unwrap_or_else(|| vec![self.eta])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaCandidate {
    pub eta: f64,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub admissible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationStatus {
    Applied,
    ConstraintBlocked,
    /// Every admissible η lowered the forget loss.
    NoGain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub eta: Option<f64>,
    pub forget_before: f64,
    pub forget_after: f64,
    pub retain_before: f64,
    pub retain_after: f64,
    /// `‖H⁻¹g‖` before normalization.
    pub direction_norm: f64,
    pub constraint_satisfied: bool,
    pub status: IterationStatus,
    pub pairs: usize,
    pub harvest_steps: usize,
    pub candidates: Vec<EtaCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    /// Retain loss of the tuned checkpoint, the reference for the budget.
    pub retain_baseline: f64,
    pub epsilon: f64,
    pub records: Vec<IterationRecord>,
    /// Parameters before the first iteration.
    pub start: ParamVec,
    /// Parameters after each iteration.
    pub checkpoints: Vec<ParamVec>,
    /// Curvature harvest of each iteration.
    pub harvests: Vec<HarvestLog>,
}

impl RestorationReport {
    /// Header line with the reference values, then one record per
    /// iteration. Parameters and harvest logs are stored elsewhere.
    pub fn to_jsonl(&self, config_hash: &str) -> String {
        let mut out = serde_json::json!({
            "schema": RESTORATION_REPORT_SCHEMA,
            "version": RESTORATION_REPORT_SCHEMA_VERSION,
            "config_hash": config_hash,
            "retain_baseline": self.retain_baseline,
            "epsilon": self.epsilon,
        })
        .to_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Reads back the header values and iteration records.
    pub fn records_from_jsonl(text: &str) -> std::result::Result<(f64, f64, Vec<IterationRecord>), String> {
        let mut lines = text.lines();
        let header: serde_json::Value =
            serde_json::from_str(lines.next().ok_or("empty report")?).map_err(|e| e.to_string())?;
        if header["schema"] != RESTORATION_REPORT_SCHEMA {
            return Err(format!("unexpected schema {}", header["schema"]));
        }
        let real = |k: &str| header[k].as_f64().ok_or(format!("missing {k}"));
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        Ok((real("retain_baseline")?, real("epsilon")?, records))
    }

    pub fn applied(&self) -> usize {
        self.records.iter().filter(|r| r.status == IterationStatus::Applied).count()
    }

    pub fn final_params(&self) -> Option<&ParamVec> {
        self.checkpoints.last()
    }
}

/// Runs the restoration loop from the tuned checkpoint. The retain budget is
/// measured on retain-1 ∪ retain-2, the forget objective on forget-eval.
pub fn restore<O: Objective>(
    objective: &O,
    ckpt: &CheckpointPair,
    parts: &DataPartition,
    rcfg: &RestorationConfig,
    hcfg: &HarvestConfig,
    rng: RngState,
) -> Result<(ParamVec, RestorationReport)> {
    rcfg.validate()?;
    let forget_batches = parts.batches(Part::ForgetEval);
    if forget_batches.is_empty() {
        return Err(Error::EmptyForgetSet);
    }
    let forget = parts.whole(Part::ForgetEval)?;
    let retain = parts.retain_train()?;
    let retain_baseline = objective.loss(&ckpt.tuned, &retain)?;

    let mut theta = ckpt.tuned.clone();
    let mut records = Vec::with_capacity(rcfg.iterations);
    let mut checkpoints = Vec::with_capacity(rcfg.iterations);
    let mut harvests = Vec::with_capacity(rcfg.iterations);
    for (it, lambda) in rcfg.lambda_trace().into_iter().enumerate() {
        let (history, log) = harvest(objective, &theta, parts, hcfg, rng.fork(it as u64 + 1))?;
        let (delta, direction_norm) = influence_direction(&history, objective, &theta, &forget_batches)?;
        let forget_before = objective.loss(&theta, &forget)?;
        let retain_before = objective.loss(&theta, &retain)?;

        let mut candidates = Vec::new();
        let mut best: Option<(f64, ParamVec)> = None;
        let mut best_gain = f64::NEG_INFINITY;
        for eta in rcfg.candidates() {
            let trial = apply_update(&theta, &delta, eta, lambda)?;
            let forget_loss = objective.loss(&trial, &forget)?;
            let retain_loss = objective.loss(&trial, &retain)?;
            let admissible = retain_constraint_ok(retain_loss, retain_baseline, rcfg.epsilon);
            if admissible && forget_loss - forget_before > best_gain {
                best_gain = forget_loss - forget_before;
                best = Some((eta, trial));
            }
            candidates.push(EtaCandidate {
                eta,
                forget_loss,
                retain_loss,
                admissible,
            });
        }

        let (eta, status) = match best {
            Some(_) if best_gain < 0.0 => (None, IterationStatus::NoGain),
            Some((eta, trial)) => {
                theta = trial;
                (Some(eta), IterationStatus::Applied)
            }
            None => (None, IterationStatus::ConstraintBlocked),
        };
        let forget_after = objective.loss(&theta, &forget)?;
        let retain_after = objective.loss(&theta, &retain)?;
        records.push(IterationRecord {
            iteration: it,
            lambda,
            eta,
            forget_before,
            forget_after,
            retain_before,
            retain_after,
            direction_norm,
            constraint_satisfied: retain_constraint_ok(retain_after, retain_baseline, rcfg.epsilon),
            status,
            pairs: history.len(),
            harvest_steps: log.steps.len(),
            candidates,
        });
        checkpoints.push(theta.clone());
        harvests.push(log);
    }

    let report = RestorationReport {
        retain_baseline,
        epsilon: rcfg.epsilon,
        records,
        start: ckpt.tuned.clone(),
        checkpoints,
        harvests,
    };
    if report
        .records
        .iter()
        .all(|r| r.status == IterationStatus::ConstraintBlocked)
    {
        return Err(Error::ConstraintBlockedAllIterations);
    }
    Ok((theta, report))
}
