//! Normal-equation solves for the kernel fits.

use nalgebra::{DMatrix, DVector};

/// Ridge added to the diagonal when the normal matrix is singular.
pub const RIDGE_EPS: f64 = 1e-6;

/// Pivots below this fraction of the largest diagonal entry count as singular.
const PIVOT_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    /// True when the system was singular and `RIDGE_EPS` was added.
    pub ridged: bool,
}

/// Accumulator for `A = sum f f^T`, `b = sum f t`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl NormalEquations {
    pub fn new(dim: usize) -> Self {
        NormalEquations {
            dim,
            a: vec![0.0; dim * dim],
            b: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds one observation with feature vector `f` and target `t`.
    pub fn add(&mut self, f: &[f64], t: f64) {
        debug_assert_eq!(f.len(), self.dim);
        for (i, &fi) in f.iter().enumerate() {
            if fi == 0.0 {
                continue;
            }
            let row = &mut self.a[i * self.dim..(i + 1) * self.dim];
            for (a, &fj) in row.iter_mut().zip(f) {
                *a += fi * fj;
            }
            self.b[i] += fi * t;
        }
    }

    pub fn add_matrix(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.dim + j] += v;
    }

    pub fn add_rhs(&mut self, i: usize, v: f64) {
        self.b[i] += v;
    }

    pub fn solve(&self) -> Solution {
        solve_spd(self.dim, &self.a, &self.b)
    }
}

/// Solves `A x = b` for symmetric positive semi-definite `A` by Cholesky,
/// falling back to `(A + eps I) x = b` when `A` is numerically singular.
pub fn solve_spd(dim: usize, a: &[f64], b: &[f64]) -> Solution {
    let matrix = DMatrix::from_row_slice(dim, dim, a);
    let rhs = DVector::from_column_slice(b);
    let scale = (0..dim).map(|i| matrix[(i, i)]).fold(0.0f64, f64::max);
    if scale > 0.0 {
        if let Some(chol) = matrix.clone().cholesky() {
            let l = chol.l_dirty();
            let min_pivot = (0..dim).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            if min_pivot > PIVOT_RTOL * scale {
                return Solution {
                    x: chol.solve(&rhs).iter().copied().collect(),
                    ridged: false,
                };
            }
        }
    }
    let ridged = matrix + DMatrix::identity(dim, dim) * RIDGE_EPS;
    let chol = ridged
        .cholesky()
        .expect("ridge-regularised PSD matrix is positive definite");
    Solution {
        x: chol.solve(&rhs).iter().copied().collect(),
        ridged: true,
    }
}
