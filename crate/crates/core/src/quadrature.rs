//! Gauss-Hermite rules via Golub-Welsch.
//!
//! Physicists' convention: the rule integrates `e^{-t^2} f(t)` over the
//! real line, weights summing to `sqrt(pi)`. Nodes and weights come from
//! the eigendecomposition of the symmetric tridiagonal Jacobi matrix with
//! zero diagonal and off-diagonal `sqrt(j/2)`.

use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature rule needs at least one node");
        let mut jacobi = DMatrix::from_element(n, n, 0.0);
        for j in 0..n - 1 {
            let off = ((j + 1) as f64 / 2.0).sqrt();
            jacobi[(j, j + 1)] = off;
            jacobi[(j + 1, j)] = off;
        }
        let eigen = nalgebra::linalg::SymmetricEigen::new(jacobi);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| {
                let q0 = eigen.eigenvectors[(0, j)];
                (eigen.eigenvalues[j], sqrt_pi * q0 * q0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrate `e^{-t^2} f(t)` over the real line.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }
}
