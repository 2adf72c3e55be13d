//! Vector and small-matrix primitives shared by every other module.
//!
//! All reductions run left-to-right over the flat index with a single
//! accumulator. No pairwise or parallel summation is used anywhere on the
//! default path, so results are bit-reproducible for a fixed input.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat parameter-space vector: adapter parameters, steps, gradients,
/// curvature pairs and perturbation directions all share this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    /// Wraps `values`, rejecting empty input and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidSpec("parameter vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {i} is {}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "ParamVec dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    fn check_dim(&self, other: &ParamVec) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    /// Returns `self * factor`.
    pub fn scaled(&self, factor: f64) -> ParamVec {
        ParamVec(self.0.iter().map(|v| v * factor).collect())
    }

    /// Returns `self + factor * other`.
    pub fn axpy(&self, factor: f64, other: &ParamVec) -> Result<ParamVec> {
        self.check_dim(other)?;
        let out = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a + factor * b)
            .collect::<Vec<_>>();
        ParamVec::new(out)
    }

    pub fn sub(&self, other: &ParamVec) -> Result<ParamVec> {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &ParamVec) -> Result<ParamVec> {
        self.axpy(1.0, other)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &ParamVec) -> Result<ParamVec> {
        self.check_dim(other)?;
        ParamVec::new(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    /// Unit vector along `self`, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<ParamVec> {
        let n = norm(self);
        (n > 0.0).then(|| self.scaled(1.0 / n))
    }
}

impl TryFrom<Vec<f64>> for ParamVec {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVec::new(values)
    }
}

impl From<ParamVec> for Vec<f64> {
    fn from(p: ParamVec) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ParamVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Σ aᵢbᵢ, summed left to right.
pub fn dot(a: &ParamVec, b: &ParamVec) -> Result<f64> {
    a.check_dim(b)?;
    Ok(dot_slices(&a.0, &b.0))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Euclidean norm, `sqrt(dot(a, a))`.
pub fn norm(a: &ParamVec) -> f64 {
    dot_slices(&a.0, &a.0).sqrt()
}

/// Cosine of the angle between `a` and `b`; zero if either is zero.
pub fn cosine(a: &ParamVec, b: &ParamVec) -> Result<f64> {
    let d = dot(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(d / (na * nb))
}

/// Seed plus stream id. Draws come from ChaCha8, whose output is specified
/// bit-for-bit, so a given state yields the same sequence on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// A sibling state on another stream, for independent sub-tasks.
    pub fn fork(&self, stream: u64) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream + 1),
        }
    }
}

/// Projection of a point cloud onto its top two principal directions.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub coords: Vec<(f64, f64)>,
    /// Unit-norm, mutually orthogonal principal directions.
    pub components: [ParamVec; 2],
    /// Variance captured by each component.
    pub variances: [f64; 2],
    pub total_variance: f64,
}

impl Pca2 {
    /// Share of total variance captured by the two components.
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 0.0;
        }
        (self.variances[0] + self.variances[1]) / self.total_variance
    }
}

/// Principal-component projection via eigendecomposition of the
/// `N x N` Gram matrix of the mean-centered points.
///
/// Component signs are fixed so the largest-magnitude entry of each Gram
/// eigenvector is positive, which makes the output deterministic.
pub fn pca2(points: &[ParamVec]) -> Result<Pca2> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints {
            need: 3,
            got: points.len(),
        });
    }
    let dim = points[0].dim();
    for p in points {
        if p.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
    }
    let n = points.len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.as_slice().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g = dot_slices(&centered[i], &centered[j]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let total: f64 = (0..n).map(|i| gram[(i, i)]).sum();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if l1 <= 0.0 || l2 <= 1e-10 * l1 {
        return Err(Error::DegenerateCloud);
    }

    let mut components = Vec::with_capacity(2);
    let mut scores = Vec::with_capacity(2);
    for (&k, lambda) in order.iter().take(2).zip([l1, l2]) {
        let mut u: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = u
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        let sigma = lambda.sqrt();
        let mut dir = vec![0.0; dim];
        for (ui, row) in u.iter().zip(&centered) {
            for (d, x) in dir.iter_mut().zip(row) {
                *d += ui * x;
            }
        }
        dir.iter_mut().for_each(|d| *d /= sigma);
        components.push(dir);
        scores.push(u.into_iter().map(|v| v * sigma).collect::<Vec<_>>());
    }
    // Re-orthonormalize the second direction against the first.
    let proj = dot_slices(&components[1], &components[0]);
    let first = components[0].clone();
    for (d, f) in components[1].iter_mut().zip(&first) {
        *d -= proj * f;
    }
    for c in &mut components {
        let n = dot_slices(c, c).sqrt();
        c.iter_mut().for_each(|v| *v /= n);
    }
    // Coordinates are taken as projections so translation invariance is exact
    // up to rounding in the centering.
    let coords = centered
        .iter()
        .map(|x| (dot_slices(x, &components[0]), dot_slices(x, &components[1])))
        .collect();
    let [c0, c1]: [Vec<f64>; 2] = components.try_into().expect("two components");
    Ok(Pca2 {
        coords,
        components: [ParamVec::new(c0)?, ParamVec::new(c1)?],
        variances: [l1, l2],
        total_variance: total,
    })
}

/// Dense row-major 2-D array of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2 {
        Grid2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Five-point Laplacian stencil on interior cells, unit spacing.
/// The output is `(rows - 2) x (cols - 2)`; boundary cells are dropped.
pub fn laplacian2d(grid: &Grid2) -> Result<Grid2> {
    if grid.rows < 3 || grid.cols < 3 {
        return Err(Error::GridTooSmall {
            rows: grid.rows,
            cols: grid.cols,
        });
    }
    Ok(Grid2::from_fn(grid.rows - 2, grid.cols - 2, |r, c| {
        let (i, j) = (r + 1, c + 1);
        grid.get(i + 1, j) + grid.get(i - 1, j) + grid.get(i, j + 1) + grid.get(i, j - 1)
            - 4.0 * grid.get(i, j)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVec {
        ParamVec::new(v.to_vec()).unwrap()
    }

    fn random_vec(state: RngState, dim: usize) -> ParamVec {
        let mut rng = state.rng();
        ParamVec::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dot_basics() {
        assert_eq!(dot(&pv(&[1., 2., 3.]), &pv(&[1., 2., 3.])).unwrap(), 14.0);
        assert_eq!(dot(&pv(&[1., 0.]), &pv(&[0., 1.])).unwrap(), 0.0);
        let err = dot(&pv(&[1., 0.]), &pv(&[0., 1., 2.])).unwrap_err();
        assert_eq!(err.code(), "dim-mismatch");
    }

    #[test]
    fn dot_matches_direct_sum() {
        let a = random_vec(RngState::new(7, 0), 128);
        let b = random_vec(RngState::new(7, 1), 128);
        let mut oracle = 0.0f64;
        for i in 0..128 {
            oracle += a[i] * b[i];
        }
        assert!((dot(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
    }

    #[test]
    fn norm_basics() {
        assert_eq!(norm(&pv(&[0., 0., 0.])), 0.0);
        assert_eq!(norm(&pv(&[3., 4.])), 5.0);
        let a = random_vec(RngState::new(3, 0), 1000);
        assert!((norm(&a) - dot(&a, &a).unwrap().sqrt()).abs() < 1e-12);
    }

    #[test]
    fn param_vec_rejects_non_finite() {
        assert_eq!(ParamVec::new(vec![1.0, f64::NAN]).unwrap_err().code(), "non-finite");
        assert!(ParamVec::new(vec![]).is_err());
        let parsed: std::result::Result<ParamVec, _> = serde_json::from_str("[1.0, 2.0]");
        assert_eq!(parsed.unwrap().dim(), 2);
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = RngState::new(42, 3).rng();
        let mut b = RngState::new(42, 3).rng();
        let mut c = RngState::new(42, 4).rng();
        let xa: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.random()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.random()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn pca_rejects_collinear() {
        let pts = vec![pv(&[0., 0., 0.]), pv(&[1., 1., 1.]), pv(&[2., 2., 2.])];
        assert_eq!(pca2(&pts).unwrap_err().code(), "degenerate-cloud");
        assert_eq!(pca2(&pts[..2]).unwrap_err().code(), "too-few-points");
    }

    #[test]
    fn pca_recovers_embedded_plane() {
        // Points on the (x3, x7) coordinate plane of a 10-dim space.
        let mut rng = RngState::new(11, 0).rng();
        let plane: Vec<(f64, f64)> = (0..12)
            .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)))
            .collect();
        let pts: Vec<ParamVec> = plane
            .iter()
            .map(|&(u, v)| {
                let mut x = vec![0.5; 10];
                x[3] += u;
                x[7] += v;
                ParamVec::new(x).unwrap()
            })
            .collect();
        let pca = pca2(&pts).unwrap();
        // Pairwise distances in the projection equal those in the plane.
        for i in 0..plane.len() {
            for j in 0..plane.len() {
                let dp = ((plane[i].0 - plane[j].0).powi(2) + (plane[i].1 - plane[j].1).powi(2)).sqrt();
                let (a, b) = (pca.coords[i], pca.coords[j]);
                let dq = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                assert!((dp - dq).abs() < 1e-8, "{dp} vs {dq}");
            }
        }
        let c = &pca.components;
        assert!((norm(&c[0]) - 1.0).abs() < 1e-8);
        assert!((norm(&c[1]) - 1.0).abs() < 1e-8);
        assert!(dot(&c[0], &c[1]).unwrap().abs() < 1e-8);
    }

    #[test]
    fn pca_two_direction_perturbation_is_fully_explained() {
        let base = random_vec(RngState::new(5, 0), 20);
        let e1 = random_vec(RngState::new(5, 1), 20);
        let mut e2 = random_vec(RngState::new(5, 2), 20);
        let proj = dot(&e2, &e1).unwrap() / dot(&e1, &e1).unwrap();
        e2 = e2.axpy(-proj, &e1).unwrap();
        let pts = vec![
            base.clone(),
            base.axpy(1.0, &e1).unwrap(),
            base.axpy(0.3, &e2).unwrap(),
            base.axpy(-0.5, &e1).unwrap().axpy(0.7, &e2).unwrap(),
        ];
        let pca = pca2(&pts).unwrap();
        assert!((pca.explained_ratio() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pca_translation_invariant() {
        let pts: Vec<ParamVec> = (0..6).map(|k| random_vec(RngState::new(9, k), 15)).collect();
        let shift = random_vec(RngState::new(9, 99), 15).scaled(10.0);
        let moved: Vec<ParamVec> = pts.iter().map(|p| p.add(&shift).unwrap()).collect();
        let a = pca2(&pts).unwrap();
        let b = pca2(&moved).unwrap();
        for (p, q) in a.coords.iter().zip(&b.coords) {
            assert!((p.0 - q.0).abs() < 1e-8 && (p.1 - q.1).abs() < 1e-8);
        }
    }

    #[test]
    fn laplacian_constant_and_quadratic() {
        let flat = Grid2::from_fn(5, 5, |_, _| 2.5);
        assert!(laplacian2d(&flat).unwrap().data.iter().all(|&v| v == 0.0));
        let quad = Grid2::from_fn(6, 7, |i, j| (i * i + j * j) as f64);
        let lap = laplacian2d(&quad).unwrap();
        assert_eq!((lap.rows, lap.cols), (4, 5));
        assert!(lap.data.iter().all(|&v| v == 4.0));
        assert_eq!(
            laplacian2d(&Grid2::from_fn(2, 5, |_, _| 0.0)).unwrap_err().code(),
            "grid-too-small"
        );
    }

    #[test]
    fn laplacian_matches_stencil_oracle() {
        let mut rng = RngState::new(1, 0).rng();
        let g = Grid2::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let lap = laplacian2d(&g).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                let oracle = g.data[(i + 1) * 6 + j] + g.data[(i - 1) * 6 + j] + g.data[i * 6 + j + 1]
                    + g.data[i * 6 + j - 1]
                    - 4.0 * g.data[i * 6 + j];
                assert_eq!(lap.get(i - 1, j - 1), oracle);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn laplacian_is_linear(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let mut rng = RngState::new(seed, 0).rng();
                let g1 = Grid2::from_fn(7, 5, |_, _| rng.random_range(-1.0..1.0));
                let g2 = Grid2::from_fn(7, 5, |_, _| rng.random_range(-1.0..1.0));
                let combo = Grid2::from_fn(7, 5, |i, j| a * g1.get(i, j) + b * g2.get(i, j));
                let lhs = laplacian2d(&combo).unwrap();
                let (l1, l2) = (laplacian2d(&g1).unwrap(), laplacian2d(&g2).unwrap());
                for k in 0..lhs.data.len() {
                    prop_assert!((lhs.data[k] - (a * l1.data[k] + b * l2.data[k])).abs() < 1e-10);
                }
            }

            #[test]
            fn dot_is_commutative(seed in 0u64..1000, dim in 1usize..64) {
                let a = random_vec(RngState::new(seed, 0), dim);
                let b = random_vec(RngState::new(seed, 1), dim);
                prop_assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
            }
        }
    }
}
