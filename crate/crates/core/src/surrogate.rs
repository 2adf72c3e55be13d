//! Analytic quadratic objective, used to check the curvature and landscape
//! machinery against closed forms.

use crate::curvature::{CurvaturePair, LbfgsHistory};
use crate::error::{Error, Result};
use crate::influence::two_loop;
use crate::math::{dot, dot_slices, ParamVec};
use crate::model::{Batch, Objective};

/// `f(x) = offset + ½ (x − x*)ᵀ H (x − x*)` with a dense symmetric `H`.
/// Ignores the batch argument.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    dim: usize,
    hessian: Vec<f64>,
    minimizer: Vec<f64>,
    offset: f64,
}

impl QuadraticObjective {
    pub fn new(hessian: Vec<f64>, minimizer: Vec<f64>, offset: f64) -> Result<Self> {
        let dim = minimizer.len();
        if hessian.len() != dim * dim {
            return Err(Error::DimMismatch {
                expected: dim * dim,
                got: hessian.len(),
            });
        }
        for i in 0..dim {
            for j in 0..i {
                if (hessian[i * dim + j] - hessian[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::InvalidSpec("hessian must be symmetric".into()));
                }
            }
        }
        Ok(Self {
            dim,
            hessian,
            minimizer,
            offset,
        })
    }

    pub fn diagonal(diag: &[f64], minimizer: Vec<f64>) -> Result<Self> {
        let n = diag.len();
        let mut h = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            h[i * n + i] = *d;
        }
        Self::new(h, minimizer, 0.0)
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    pub fn minimizer(&self) -> &[f64] {
        &self.minimizer
    }

    /// `H v`
    pub fn hessian_times(&self, v: &[f64]) -> Vec<f64> {
        self.hessian.chunks_exact(self.dim).map(|row| dot_slices(row, v)).collect()
    }

    pub fn value(&self, x: &ParamVec) -> f64 {
        let d: Vec<f64> = x.as_slice().iter().zip(&self.minimizer).map(|(a, b)| a - b).collect();
        self.offset + 0.5 * dot_slices(&d, &self.hessian_times(&d))
    }

    pub fn gradient(&self, x: &ParamVec) -> ParamVec {
        let d: Vec<f64> = x.as_slice().iter().zip(&self.minimizer).map(|(a, b)| a - b).collect();
        ParamVec::new(self.hessian_times(&d)).expect("finite gradient")
    }

    fn check(&self, x: &ParamVec) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: x.dim(),
            });
        }
        Ok(())
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, params: &ParamVec, _batch: &Batch) -> Result<f64> {
        self.check(params)?;
        Ok(self.value(params))
    }

    fn loss_and_grad(&self, params: &ParamVec, _batch: &Batch) -> Result<(f64, ParamVec)> {
        self.check(params)?;
        Ok((self.value(params), self.gradient(params)))
    }
}

/// Pairs from `count` quasi-Newton steps with exact line search from `x0`.
/// On a quadratic these steps are mutually `H`-conjugate and `y = H s`, so
/// with `count == dim` the two-loop operator equals `H⁻¹`.
pub fn conjugate_pairs(q: &QuadraticObjective, x0: &ParamVec, count: usize) -> Result<LbfgsHistory> {
    let mut hist = LbfgsHistory::new(count.max(1));
    let mut x = x0.clone();
    let mut g = q.gradient(&x);
    for _ in 0..count {
        let p = two_loop(&hist, &g)?.scaled(-1.0);
        let hp = q.hessian_times(p.as_slice());
        let curv = dot_slices(p.as_slice(), &hp);
        if !(curv > 0.0) {
            break;
        }
        let alpha = -dot(&g, &p)? / curv;
        let s = p.scaled(alpha);
        let x_next = x.add(&s)?;
        let g_next = q.gradient(&x_next);
        hist.push(CurvaturePair::from_raw(&s, &g_next.sub(&g)?)?)?;
        x = x_next;
        g = g_next;
    }
    Ok(hist)
}
