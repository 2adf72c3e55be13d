//! Trust-region gradient probing that harvests filtered, normalized L-BFGS
//! curvature pairs.
//!
//! Each probe step samples a batch from the next dataset in round-robin
//! order, proposes `d = −lr·g` clipped to the trust radius, and scores it by
//! the ratio of actual to first-order predicted reduction `−gᵀd`. Steps with
//! ratio below `rho_low` are reverted and shrink the radius; accepted steps
//! yield a pair `(s, y) = (θ' − θ, g' − g)` on the same batch, which is kept
//! only if it passes the curvature and norm filters.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{DataPartition, Example, Part};
use crate::error::{Error, Result};
use crate::math::{dot, norm, ParamVec, RngState};
use crate::model::{Batch, Objective};

pub const HARVEST_LOG_SCHEMA: &str = "curvrestore.harvest-log";
pub const HARVEST_LOG_SCHEMA_VERSION: u32 = 1;

/// Norm below which a step or gradient difference counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustState {
    radius: f64,
    pub last_ratio: Option<f64>,
}

impl TrustState {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidSpec(format!("trust radius must be positive, got {radius}")));
        }
        Ok(Self {
            radius,
            last_ratio: None,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Unit-norm curvature pair. The original norms are kept so the pair can be
/// re-expanded into a secant-consistent form `(ŝ, (‖y‖/‖s‖)·ŷ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvaturePair {
    pub s: ParamVec,
    pub y: ParamVec,
    /// `⟨s, y⟩` before normalization.
    pub raw_sy: f64,
    pub s_norm: f64,
    pub y_norm: f64,
}

impl CurvaturePair {
    pub fn from_raw(s: &ParamVec, y: &ParamVec) -> Result<Self> {
        let raw_sy = dot(s, y)?;
        let (s_norm, y_norm) = (norm(s), norm(y));
        if s_norm < DEGENERATE_NORM || y_norm < DEGENERATE_NORM {
            return Err(Error::InvalidSpec("degenerate-norm curvature pair".into()));
        }
        Ok(Self {
            s: s.scaled(1.0 / s_norm),
            y: y.scaled(1.0 / y_norm),
            raw_sy,
            s_norm,
            y_norm,
        })
    }

    /// `‖y‖ / ‖s‖`, the curvature magnitude along `s`.
    pub fn curvature_scale(&self) -> f64 {
        self.y_norm / self.s_norm
    }

    pub fn dim(&self) -> usize {
        self.s.dim()
    }
}

/// Bounded FIFO of curvature pairs, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbfgsHistory {
    pairs: VecDeque<CurvaturePair>,
    capacity: usize,
}

impl LbfgsHistory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "history capacity must be positive");
        Self {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Appends a pair, evicting the oldest when full.
    pub fn push(&mut self, pair: CurvaturePair) -> Result<()> {
        if let Some(first) = self.pairs.front() {
            if first.dim() != pair.dim() {
                return Err(Error::DimMismatch {
                    expected: first.dim(),
                    got: pair.dim(),
                });
            }
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(pair);
        Ok(())
    }

    pub fn pairs(&self) -> impl DoubleEndedIterator<Item = &CurvaturePair> + ExactSizeIterator {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> Option<usize> {
        self.pairs.front().map(CurvaturePair::dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Damping {
    Off,
    Powell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestConfig {
    pub target_pairs: usize,
    /// History capacity `m`; defaults to `target_pairs`.
    pub memory: usize,
    pub delta_init: f64,
    pub lr_schedule: Vec<f64>,
    pub sy_threshold: f64,
    pub shrink: f64,
    pub expand: f64,
    pub rho_low: f64,
    pub rho_high: f64,
    pub damping: Damping,
    pub max_steps: usize,
    /// Examples per probe batch.
    pub batch_size: usize,
    /// Dataset cycle; repeating a part weights it more heavily.
    pub rounds: Vec<Part>,
    /// Reset the radius to `delta_init` at the start of every harvest.
    pub reset_radius: bool,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            target_pairs: 10,
            memory: 10,
            delta_init: 0.05,
            lr_schedule: vec![0.001, 0.002, 0.005],
            sy_threshold: 1e-6,
            shrink: 0.5,
            expand: 1.5,
            rho_low: 0.25,
            rho_high: 0.75,
            damping: Damping::Powell,
            max_steps: 200,
            batch_size: 64,
            rounds: vec![Part::CurvForget, Part::Retain1, Part::Retain2],
            reset_radius: true,
        }
    }
}

impl HarvestConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if !(0.0 < self.rho_low && self.rho_low < self.rho_high && self.rho_high < 1.0) {
            return bad("need 0 < rho-low < rho-high < 1");
        }
        if !(0.0 < self.shrink && self.shrink < 1.0 && 1.0 < self.expand) {
            return bad("need 0 < shrink < 1 < expand");
        }
        if !(self.delta_init > 0.0) {
            return bad("delta-init must be positive");
        }
        if self.lr_schedule.is_empty() || self.rounds.is_empty() {
            return bad("lr-schedule and rounds must be non-empty");
        }
        if self.target_pairs == 0 || self.memory == 0 || self.batch_size == 0 {
            return bad("target-pairs, memory and batch-size must be positive");
        }
        Ok(())
    }
}

/// Rescales `d` onto the ball of radius `delta` if it lies outside.
pub fn clip_step(d: &ParamVec, delta: f64) -> ParamVec {
    let n = norm(d);
    if n <= delta || n == 0.0 {
        d.clone()
    } else {
        d.scaled(delta / n)
    }
}

/// Ratio of actual to predicted reduction.
pub fn trust_ratio(actual: f64, predicted: f64) -> Result<f64> {
    if predicted.abs() < 1e-12 {
        return Err(Error::FlatPrediction(predicted));
    }
    Ok(actual / predicted)
}

/// First-order predicted reduction `−gᵀd` for step `d` at gradient `g`.
pub fn predicted_reduction(g: &ParamVec, d: &ParamVec) -> Result<f64> {
    Ok(-dot(g, d)?)
}

/// Shrinks and rejects below `rho_low`, expands above `rho_high`, keeps the
/// radius in between. Returns the new state and whether the step stands.
pub fn update_radius(state: TrustState, rho: f64, cfg: &HarvestConfig) -> (TrustState, bool) {
    let (radius, accept) = if rho < cfg.rho_low {
        (state.radius * cfg.shrink, false)
    } else if rho > cfg.rho_high {
        (state.radius * cfg.expand, true)
    } else {
        (state.radius, true)
    };
    (
        TrustState {
            radius,
            last_ratio: Some(rho),
        },
        accept,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairVerdict {
    Accept,
    InsufficientCurvature,
    DegenerateNorm,
}

/// Curvature and norm filters on a raw pair.
pub fn accept_pair(s: &ParamVec, y: &ParamVec, cfg: &HarvestConfig) -> Result<PairVerdict> {
    let sy = dot(s, y)?;
    if norm(s) < DEGENERATE_NORM || norm(y) < DEGENERATE_NORM {
        return Ok(PairVerdict::DegenerateNorm);
    }
    // Strict: stored pairs always satisfy ⟨s,y⟩ > threshold.
    if !(sy > cfg.sy_threshold) {
        return Ok(PairVerdict::InsufficientCurvature);
    }
    Ok(PairVerdict::Accept)
}

/// Powell damping against `B = I`: returns `y' = φy + (1−φ)s` with
/// `⟨s,y'⟩ ≥ 0.2‖s‖²`, leaving `y` untouched when that already holds.
pub fn damp_pair(s: &ParamVec, y: &ParamVec) -> Result<ParamVec> {
    let sy = dot(s, y)?;
    let sbs = dot(s, s)?;
    if sy >= 0.2 * sbs {
        return Ok(y.clone());
    }
    let phi = 0.8 * sbs / (sbs - sy);
    y.scaled(phi).axpy(1.0 - phi, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepOutcome {
    /// Step kept and the pair stored.
    Stored,
    /// Step kept, pair damped then stored.
    DampedStored,
    /// Step kept, pair filtered out.
    InsufficientCurvature,
    DegenerateNorm,
    /// Ratio below `rho_low`: step reverted.
    Reverted,
    /// Predicted reduction too small to form a ratio; radius unchanged.
    FlatPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestStep {
    pub step: usize,
    pub dataset: String,
    pub lr: f64,
    pub loss_init: f64,
    pub loss_final: f64,
    pub actual: f64,
    pub predicted: f64,
    pub rho: Option<f64>,
    pub delta_before: f64,
    pub delta_after: f64,
    pub outcome: StepOutcome,
    pub raw_sy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HarvestLog {
    pub steps: Vec<HarvestStep>,
}

impl HarvestLog {
    pub fn stored(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.outcome, StepOutcome::Stored | StepOutcome::DampedStored))
            .count()
    }

    /// Line-delimited JSON: a header line then one record per step.
    pub fn to_jsonl(&self, config_hash: &str) -> String {
        let mut out = serde_json::json!({
            "schema": HARVEST_LOG_SCHEMA,
            "version": HARVEST_LOG_SCHEMA_VERSION,
            "config_hash": config_hash,
        })
        .to_string();
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<HarvestLog, String> {
        let mut lines = text.lines();
        let header: serde_json::Value =
            serde_json::from_str(lines.next().ok_or("empty log")?).map_err(|e| e.to_string())?;
        if header["schema"] != HARVEST_LOG_SCHEMA {
            return Err(format!("unexpected schema {}", header["schema"]));
        }
        let steps = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(HarvestLog { steps })
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl(config_hash).as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// A named pool of examples probed in round-robin order.
#[derive(Debug, Clone, Copy)]
pub struct CurvatureSource<'a> {
    pub tag: &'a str,
    pub examples: &'a [Example],
}

/// Harvests curvature pairs around `params` using the datasets named in
/// `cfg.rounds`. `params` is never modified.
pub fn harvest<O: Objective>(
    objective: &O,
    params: &ParamVec,
    parts: &DataPartition,
    cfg: &HarvestConfig,
    rng: RngState,
) -> Result<(LbfgsHistory, HarvestLog)> {
    for part in &cfg.rounds {
        if parts.part(*part).is_empty() {
            return Err(Error::InsufficientData {
                part: part.tag().into(),
                need: 1,
                have: 0,
            });
        }
    }
    let sources: Vec<CurvatureSource> = cfg
        .rounds
        .iter()
        .map(|&p| CurvatureSource {
            tag: p.tag(),
            examples: parts.part(p),
        })
        .collect();
    harvest_from(objective, params, &sources, cfg, rng)
}

/// [`harvest`] over explicit sources.
pub fn harvest_from<O: Objective>(
    objective: &O,
    params: &ParamVec,
    sources: &[CurvatureSource],
    cfg: &HarvestConfig,
    rng: RngState,
) -> Result<(LbfgsHistory, HarvestLog)> {
    cfg.validate()?;
    if sources.is_empty() || sources.iter().any(|s| s.examples.is_empty()) {
        return Err(Error::InsufficientData {
            part: "curvature sources".into(),
            need: 1,
            have: 0,
        });
    }
    if params.dim() != objective.dim() {
        return Err(Error::DimMismatch {
            expected: objective.dim(),
            got: params.dim(),
        });
    }
    let mut rng = rng.rng();
    let mut theta = params.clone();
    let mut trust = TrustState::new(cfg.delta_init)?;
    let mut history = LbfgsHistory::new(cfg.memory);
    let mut log = HarvestLog::default();
    let mut stored = 0;
    let mut lr_index = 0;

    for step in 0..cfg.max_steps {
        if stored >= cfg.target_pairs {
            break;
        }
        let source = &sources[step % sources.len()];
        let batch = sample_batch(source.examples, cfg.batch_size, &mut rng)?;
        let lr = cfg.lr_schedule[lr_index % cfg.lr_schedule.len()];

        let (loss_init, g) = objective.loss_and_grad(&theta, &batch)?;
        let d = clip_step(&g.scaled(-lr), trust.radius());
        let candidate = theta.add(&d)?;
        let (loss_final, g_next) = objective.loss_and_grad(&candidate, &batch)?;
        let actual = loss_init - loss_final;
        let predicted = predicted_reduction(&g, &d)?;
        let delta_before = trust.radius();

        let mut record = HarvestStep {
            step,
            dataset: source.tag.to_string(),
            lr,
            loss_init,
            loss_final,
            actual,
            predicted,
            rho: None,
            delta_before,
            delta_after: delta_before,
            outcome: StepOutcome::FlatPrediction,
            raw_sy: None,
        };
        let rho = match trust_ratio(actual, predicted) {
            Ok(rho) => rho,
            Err(Error::FlatPrediction(_)) => {
                log.steps.push(record);
                continue;
            }
            Err(e) => return Err(e),
        };
        let (next_trust, accept) = update_radius(trust, rho, cfg);
        trust = next_trust;
        record.rho = Some(rho);
        record.delta_after = trust.radius();
        if !accept {
            record.outcome = StepOutcome::Reverted;
            log.steps.push(record);
            continue;
        }

        let s = candidate.sub(&theta)?;
        let mut y = g_next.sub(&g)?;
        theta = candidate;
        lr_index += 1;

        let mut damped = false;
        if cfg.damping == Damping::Powell && dot(&s, &y)? <= 0.0 {
            y = damp_pair(&s, &y)?;
            damped = true;
        }
        let raw_sy = dot(&s, &y)?;
        record.raw_sy = Some(raw_sy);
        record.outcome = match accept_pair(&s, &y, cfg)? {
            PairVerdict::Accept => {
                history.push(CurvaturePair::from_raw(&s, &y)?)?;
                stored += 1;
                if damped {
                    StepOutcome::DampedStored
                } else {
                    StepOutcome::Stored
                }
            }
            PairVerdict::InsufficientCurvature => StepOutcome::InsufficientCurvature,
            PairVerdict::DegenerateNorm => StepOutcome::DegenerateNorm,
        };
        log.steps.push(record);
    }

    if stored < cfg.target_pairs {
        return Err(Error::HarvestExhausted {
            target: cfg.target_pairs,
            steps: log.steps.len(),
            partial: Box::new(history),
        });
    }
    Ok((history, log))
}

fn sample_batch(examples: &[Example], size: usize, rng: &mut impl rand::Rng) -> Result<Batch> {
    if examples.len() <= size {
        return Batch::new(examples.iter().map(|e| e.tokens.clone()).collect());
    }
    let mut idx = sample(rng, examples.len(), size).into_vec();
    idx.sort_unstable();
    Batch::new(idx.into_iter().map(|i| examples[i].tokens.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::surrogate::QuadraticObjective;

    fn pv(v: &[f64]) -> ParamVec {
        ParamVec::new(v.to_vec()).unwrap()
    }

    fn dummy_examples() -> Vec<Example> {
        (0..4)
            .map(|i| Example {
                id: i,
                domain: Domain::Retain,
                tokens: vec![0, 1],
            })
            .collect()
    }

    #[test]
    fn clip_step_cases() {
        let small = pv(&[0.01, 0.0]);
        assert_eq!(clip_step(&small, 0.05), small);
        let clipped = clip_step(&pv(&[0.6, 0.8]), 0.05);
        assert!((clipped[0] - 0.03).abs() < 1e-15 && (clipped[1] - 0.04).abs() < 1e-15);
        assert!(norm(&clipped) <= 0.05 + 1e-12);
        let zero = ParamVec::zeros(3);
        assert_eq!(clip_step(&zero, 0.05), zero);
    }

    #[test]
    fn trust_ratio_cases() {
        assert_eq!(trust_ratio(0.2, 0.2).unwrap(), 1.0);
        assert_eq!(trust_ratio(0.05, 0.2).unwrap(), 0.25);
        assert_eq!(trust_ratio(1.0, 1e-13).unwrap_err().code(), "flat-prediction");
    }

    #[test]
    fn trust_ratio_on_one_dimensional_quadratic() {
        // f(x) = x² at x = 1: g = 2, Newton step d = −1 lands on the minimum.
        // actual = 1, predicted = −g·d = 2, so ρ = 1/2.
        let q = QuadraticObjective::diagonal(&[2.0], vec![0.0]).unwrap();
        let x = pv(&[1.0]);
        let d = pv(&[-1.0]);
        let g = q.gradient(&x);
        let actual = q.value(&x) - q.value(&x.add(&d).unwrap());
        let rho = trust_ratio(actual, predicted_reduction(&g, &d).unwrap()).unwrap();
        assert_eq!(rho, 0.5);
    }

    #[test]
    fn radius_update_bands() {
        let cfg = HarvestConfig::default();
        let s = TrustState::new(0.05).unwrap();
        let (a, acc) = update_radius(s, 0.1, &cfg);
        assert_eq!((a.radius(), acc), (0.025, false));
        let (b, acc) = update_radius(s, 0.9, &cfg);
        assert!((b.radius() - 0.075).abs() < 1e-15 && acc);
        let (c, acc) = update_radius(s, 0.5, &cfg);
        assert_eq!((c.radius(), acc), (0.05, true));
        assert!(TrustState::new(0.0).is_err());
    }

    #[test]
    fn pair_filters() {
        let cfg = HarvestConfig::default();
        let s = pv(&[1e-3, 0.0]);
        let y = pv(&[1e-4, 5.0]);
        // ⟨s, y⟩ = 1e-7 < 1e-6
        assert_eq!(accept_pair(&s, &y, &cfg).unwrap(), PairVerdict::InsufficientCurvature);
        let e = pv(&[0.0, 1.0]);
        assert_eq!(accept_pair(&e, &e, &cfg).unwrap(), PairVerdict::Accept);
        let tiny = pv(&[0.0, 1e-12]);
        assert_eq!(accept_pair(&e, &tiny, &cfg).unwrap(), PairVerdict::DegenerateNorm);
        assert_eq!(accept_pair(&e, &pv(&[1.0]), &cfg).unwrap_err().code(), "dim-mismatch");
    }

    #[test]
    fn powell_damping() {
        // ⟨s,y⟩ = −1 with ‖s‖ = 1: φ = 0.8 / 2 = 0.4, ⟨s,y'⟩ = 0.4·(−1) + 0.6 = 0.2.
        let s = pv(&[1.0, 0.0]);
        let y = pv(&[-1.0, 3.0]);
        let yd = damp_pair(&s, &y).unwrap();
        let sy = dot(&s, &yd).unwrap();
        assert!(sy >= 0.2 - 1e-15, "{sy}");
        assert!((yd[0] - 0.2).abs() < 1e-15 && (yd[1] - 1.2).abs() < 1e-15);

        let good = pv(&[0.5, 0.1]);
        assert_eq!(damp_pair(&s, &good).unwrap(), good);

        let anti = s.scaled(-1.0);
        let yd = damp_pair(&s, &anti).unwrap();
        // φ = 0.8/2 = 0.4: y' = −0.4 s + 0.6 s = 0.2 s.
        assert!((cosine_pos(&s, &yd)) > 0.0);
        assert!((yd[0] - 0.2).abs() < 1e-15);
    }

    fn cosine_pos(a: &ParamVec, b: &ParamVec) -> f64 {
        dot(a, b).unwrap() / (norm(a) * norm(b))
    }

    #[test]
    fn history_is_bounded_fifo() {
        let mut h = LbfgsHistory::new(2);
        for k in 1..=3 {
            let s = pv(&[k as f64, 1.0]);
            h.push(CurvaturePair::from_raw(&s, &s).unwrap()).unwrap();
        }
        assert_eq!(h.len(), 2);
        let first = h.pairs().next().unwrap();
        assert!((first.s_norm - (5f64).sqrt()).abs() < 1e-12);
    }

    fn quad8() -> QuadraticObjective {
        let n = 8;
        let mut rng = RngState::new(77, 0).rng();
        use rand::Rng;
        let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    acc += m[i * n + k] * m[j * n + k] * 0.5;
                }
                h[i * n + j] = acc;
            }
        }
        QuadraticObjective::new(h, vec![0.0; n], 0.0).unwrap()
    }

    #[test]
    fn harvest_respects_safeguards_and_is_deterministic() {
        let q = quad8();
        let ex = dummy_examples();
        let sources = [CurvatureSource {
            tag: "q",
            examples: &ex,
        }];
        let cfg = HarvestConfig {
            lr_schedule: vec![0.1, 0.2, 0.5],
            ..HarvestConfig::default()
        };
        let x0 = pv(&[1.0, -2.0, 0.5, 3.0, -1.0, 0.2, 2.0, -0.7]);
        let (hist, log) = harvest_from(&q, &x0, &sources, &cfg, RngState::new(1, 0)).unwrap();
        assert_eq!(hist.len(), 10);
        for p in hist.pairs() {
            assert!(p.raw_sy > 1e-6);
            assert!((norm(&p.s) - 1.0).abs() < 1e-9 && (norm(&p.y) - 1.0).abs() < 1e-9);
        }
        let (_, log2) = harvest_from(&q, &x0, &sources, &cfg, RngState::new(1, 0)).unwrap();
        assert_eq!(log, log2);
        for s in &log.steps {
            let rho = s.rho.unwrap();
            let factor = s.delta_after / s.delta_before;
            let expect = if rho < 0.25 {
                0.5
            } else if rho > 0.75 {
                1.5
            } else {
                1.0
            };
            assert!((factor - expect).abs() < 1e-12, "{factor} vs {expect}");
        }
    }

    #[test]
    fn infinite_threshold_exhausts() {
        let q = quad8();
        let ex = dummy_examples();
        let sources = [CurvatureSource {
            tag: "q",
            examples: &ex,
        }];
        let cfg = HarvestConfig {
            sy_threshold: f64::INFINITY,
            max_steps: 30,
            ..HarvestConfig::default()
        };
        let x0 = pv(&[1.0; 8]);
        match harvest_from(&q, &x0, &sources, &cfg, RngState::new(1, 0)) {
            Err(Error::HarvestExhausted { partial, steps, .. }) => {
                assert!(partial.is_empty());
                assert_eq!(steps, 30);
            }
            other => panic!("expected harvest-exhausted, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = HarvestConfig {
            rho_low: 0.8,
            ..HarvestConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = HarvestConfig {
            expand: 0.9,
            ..HarvestConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
