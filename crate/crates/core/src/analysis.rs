//! Per-example loss correlations between checkpoints, mean-loss tables and
//! the correlation trace across restoration iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::RestorationReport;
use crate::math::ParamVec;
use crate::model::{Batch, Objective};

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::TooFewPoints {
            need: 3,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("ys"));
    }
    let r = sxy / (sxx * syy).sqrt();
    if !r.is_finite() {
        return Err(Error::NonFinite("pearson".into()));
    }
    Ok(r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub tag: String,
    pub losses_a: Vec<f64>,
    pub losses_b: Vec<f64>,
    pub r: f64,
    pub n: usize,
}

/// Per-example losses over a list of batches, in order.
pub fn example_losses<O: Objective>(objective: &O, params: &ParamVec, data: &[Batch]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for b in data {
        out.extend(objective.per_sequence_losses(params, b)?);
    }
    Ok(out)
}

pub fn loss_correlation<O: Objective>(
    objective: &O,
    a: &ParamVec,
    b: &ParamVec,
    data: &[Batch],
    tag: &str,
) -> Result<CorrelationReport> {
    let losses_a = example_losses(objective, a, data)?;
    let losses_b = example_losses(objective, b, data)?;
    let r = pearson(&losses_a, &losses_b)?;
    Ok(CorrelationReport {
        tag: tag.to_string(),
        n: losses_a.len(),
        losses_a,
        losses_b,
        r,
    })
}

/// Mean per-example loss of each checkpoint on each dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGapTable {
    pub checkpoints: Vec<String>,
    pub datasets: Vec<String>,
    /// `values[checkpoint][dataset]`
    pub values: Vec<Vec<f64>>,
}

impl LossGapTable {
    pub fn get(&self, checkpoint: &str, dataset: &str) -> Option<f64> {
        let i = self.checkpoints.iter().position(|c| c == checkpoint)?;
        let j = self.datasets.iter().position(|d| d == dataset)?;
        Some(self.values[i][j])
    }
}

pub fn loss_gap_table<O: Objective>(
    objective: &O,
    ckpts: &[(String, ParamVec)],
    datasets: &[(String, Vec<Batch>)],
) -> Result<LossGapTable> {
    if ckpts.is_empty() || datasets.is_empty() {
        return Err(Error::InvalidSpec("loss-gap table needs checkpoints and datasets".into()));
    }
    let mut values = Vec::with_capacity(ckpts.len());
    for (_, params) in ckpts {
        let mut row = Vec::with_capacity(datasets.len());
        for (tag, data) in datasets {
            let losses = example_losses(objective, params, data)?;
            if losses.is_empty() {
                return Err(Error::InsufficientData {
                    part: tag.clone(),
                    need: 1,
                    have: 0,
                });
            }
            row.push(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        values.push(row);
    }
    Ok(LossGapTable {
        checkpoints: ckpts.iter().map(|c| c.0.clone()).collect(),
        datasets: datasets.iter().map(|d| d.0.clone()).collect(),
        values,
    })
}

/// Correlation with the base checkpoint before restoration and after every
/// iteration, per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTrace {
    pub datasets: Vec<String>,
    /// Pre-restoration correlation per dataset.
    pub initial: Vec<f64>,
    /// `per_iteration[iteration][dataset]`
    pub per_iteration: Vec<Vec<f64>>,
    /// Whether each dataset's sequence (initial, then iterations) never decreases.
    pub monotone: Vec<bool>,
}

pub fn recovery_trace<O: Objective>(
    objective: &O,
    report: &RestorationReport,
    base: &ParamVec,
    data: &[(String, Vec<Batch>)],
) -> Result<RecoveryTrace> {
    if report.checkpoints.is_empty() {
        return Err(Error::NoCheckpoints);
    }
    let corr = |params: &ParamVec| -> Result<Vec<f64>> {
        data.iter()
            .map(|(tag, batches)| Ok(loss_correlation(objective, base, params, batches, tag)?.r))
            .collect()
    };
    let initial = corr(&report.start)?;
    let per_iteration = report.checkpoints.iter().map(corr).collect::<Result<Vec<_>>>()?;
    let monotone = (0..data.len())
        .map(|j| {
            let mut prev = initial[j];
            per_iteration.iter().all(|row| {
                let ok = row[j] >= prev;
                prev = row[j];
                ok
            })
        })
        .collect();
    Ok(RecoveryTrace {
        datasets: data.iter().map(|d| d.0.clone()).collect(),
        initial,
        per_iteration,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::RestorationReport;
    use crate::model::{init_model, ModelSpec};

    #[test]
    fn pearson_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pearson(&xs, &xs).unwrap(), 1.0);
        let neg: Vec<f64> = xs.iter().map(|x| -2.0 * x + 5.0).collect();
        assert_eq!(pearson(&xs, &neg).unwrap(), -1.0);
        // Direct formula: means 2.5 and 2.75; Σdxdy = 5.5, Σdx² = 5, Σdy² = 8.75.
        let oracle = 5.5 / (5.0f64 * 8.75).sqrt();
        assert!((pearson(&xs, &[1.0, 3.0, 2.0, 5.0]).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(pearson(&xs, &[1.0; 4]).unwrap_err().code(), "zero-variance");
        assert_eq!(pearson(&xs, &[1.0; 3]).unwrap_err().code(), "dim-mismatch");
        assert_eq!(pearson(&[1.0, 2.0], &[2.0, 1.0]).unwrap_err().code(), "too-few-points");
    }

    fn tiny() -> (crate::model::MicroModel, ParamVec, Vec<Batch>) {
        let spec = ModelSpec {
            vocab_size: 9,
            context_len: 6,
            hidden_dim: 6,
            n_blocks: 1,
            adapter_rank: 2,
            ..ModelSpec::default()
        };
        let (m, p) = init_model(&spec).unwrap();
        let data = vec![
            Batch::new(vec![vec![1, 2, 3], vec![4, 5, 6, 7]]).unwrap(),
            Batch::new(vec![vec![8, 1], vec![2, 2, 2, 3, 0]]).unwrap(),
        ];
        (m, p, data)
    }

    #[test]
    fn correlation_of_identical_models() {
        let (m, p, data) = tiny();
        let rep = loss_correlation(&m, &p, &p, &data, "x").unwrap();
        assert!((rep.r - 1.0).abs() < 1e-12);
        assert_eq!(rep.n, 4);
        let two = vec![Batch::new(vec![vec![1, 2], vec![3, 4]]).unwrap()];
        assert!(loss_correlation(&m, &p, &p, &two, "x").is_err());
    }

    #[test]
    fn gap_table_shapes() {
        let (m, p, data) = tiny();
        let t = loss_gap_table(&m, &[("a".into(), p.clone())], &[("d".into(), data.clone())]).unwrap();
        let whole = Batch::concat(&data).unwrap();
        assert!((t.values[0][0] - m.forward_loss(&p, &whole).unwrap()).abs() < 1e-12);
        let t = loss_gap_table(&m, &[("a".into(), p)], &[("x".into(), data.clone()), ("y".into(), data)]).unwrap();
        assert_eq!(t.values[0][0], t.values[0][1]);
    }

    #[test]
    fn trace_needs_checkpoints_and_is_constant_without_motion() {
        let (m, p, data) = tiny();
        let mut rep = RestorationReport {
            retain_baseline: 0.0,
            epsilon: 0.1,
            records: vec![],
            start: p.clone(),
            checkpoints: vec![],
            harvests: vec![],
        };
        let ds = vec![("d".to_string(), data)];
        assert_eq!(recovery_trace(&m, &rep, &p, &ds).unwrap_err().code(), "no-checkpoints");
        let q = p.scaled(1.3);
        rep.start = q.clone();
        rep.checkpoints = vec![q.clone(), q];
        let t = recovery_trace(&m, &rep, &p, &ds).unwrap();
        assert_eq!(t.per_iteration.len(), 2);
        assert_eq!(t.per_iteration[0], t.initial);
        assert_eq!(t.per_iteration[1], t.initial);
        assert!(t.monotone[0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pearson_affine_and_symmetric(
                xs in prop::collection::vec(-10.0f64..10.0, 5..30),
                seed in prop::collection::vec(-10.0f64..10.0, 30),
                a in 0.1f64..5.0,
                b in -5.0f64..5.0,
            ) {
                let ys: Vec<f64> = seed[..xs.len()].to_vec();
                prop_assume!(pearson(&xs, &ys).is_ok());
                let r = pearson(&xs, &ys).unwrap();
                let pos: Vec<f64> = ys.iter().map(|y| a * y + b).collect();
                let neg: Vec<f64> = ys.iter().map(|y| -a * y + b).collect();
                prop_assert!((pearson(&xs, &pos).unwrap() - r).abs() < 1e-12);
                prop_assert!((pearson(&xs, &neg).unwrap() + r).abs() < 1e-12);
                prop_assert!((pearson(&ys, &xs).unwrap() - r).abs() < 1e-12);
            }
        }
    }
}
