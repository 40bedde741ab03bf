//! Legendre–Gauss–Lobatto quadrature and the 1D nodal operators built on it.
//!
//! Everything in 2D is a tensor product of these 1D objects: nodes `ξ_i`,
//! weights `ω_i`, the collocation derivative matrix `D_ij = l_j'(ξ_i)` and the
//! change of basis between nodal values and Legendre coefficients.

use crate::error::{Error, Result};

const NEWTON_TOL: f64 = 1e-14;
const NEWTON_MAX_ITERS: usize = 100;

/// Evaluates `(P_n(x), P_n'(x))` by the three-term recurrence.
pub fn legendre(n: usize, x: f64) -> (f64, f64) {
    match n {
        0 => (1.0, 0.0),
        1 => (x, 1.0),
        _ => {
            let (mut p_prev, mut p) = (1.0, x);
            let (mut dp_prev, mut dp) = (0.0, 1.0);
            for k in 2..=n {
                let kf = k as f64;
                let p_next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
                let dp_next = dp_prev + (2.0 * kf - 1.0) * p;
                p_prev = p;
                p = p_next;
                dp_prev = dp;
                dp = dp_next;
            }
            (p, dp)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of nodes, `P + 1`.
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

    /// Quadrature of `f` over `[-1, 1]`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Builds the `P + 1` point Legendre–Gauss–Lobatto rule.
///
/// Interior nodes are the roots of `P_N'`, found by Newton iteration started
/// from the Chebyshev–Gauss–Lobatto points `-cos(πj/N)`.
pub fn build_lobatto_rule(order: usize) -> Result<QuadratureRule> {
    if order < 1 {
        return Err(Error::InvalidOrder(order));
    }
    let n = order;
    let nf = n as f64;
    let mut nodes = vec![0.0; n + 1];
    nodes[0] = -1.0;
    nodes[n] = 1.0;

    // Left half of the interior; the right half is mirrored.
    for j in 1..=(n - 1) / 2 {
        let mut x = -(std::f64::consts::PI * j as f64 / nf).cos();
        for _ in 0..NEWTON_MAX_ITERS {
            let (p, dp) = legendre(n, x);
            let d2p = (2.0 * x * dp - nf * (nf + 1.0) * p) / (1.0 - x * x);
            let delta = dp / d2p;
            x -= delta;
            if delta.abs() <= NEWTON_TOL * x.abs().max(1.0) {
                break;
            }
        }
        nodes[j] = x;
        nodes[n - j] = -x;
    }
    if n % 2 == 0 {
        nodes[n / 2] = 0.0;
    }

    let weights = nodes
        .iter()
        .map(|&x| {
            let (p, _) = legendre(n, x);
            2.0 / (nf * (nf + 1.0) * p * p)
        })
        .collect();

    Ok(QuadratureRule {
        order,
        nodes,
        weights,
    })
}

/// Row-major dense square matrix, small enough that no linear-algebra crate
/// is warranted for the handful of mat-vec products we need.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.n + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn mul(&self, other: &SquareMatrix) -> SquareMatrix {
        let n = self.n;
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let s = (0..n).map(|k| self.get(i, k) * other.get(k, j)).sum();
                out.set(i, j, s);
            }
        }
        out
    }
}

/// Collocation operators on the Lobatto nodes.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    rule: QuadratureRule,
    barycentric: Vec<f64>,
    derivative: SquareMatrix,
    left: Vec<f64>,
    right: Vec<f64>,
    to_modal: SquareMatrix,
    to_nodal: SquareMatrix,
}

pub fn build_operator_set(rule: QuadratureRule) -> Result<OperatorSet> {
    let n = rule.len();
    if n < 2 {
        return Err(Error::InvalidOrder(rule.order()));
    }
    let x = rule.nodes();

    let barycentric: Vec<f64> = (0..n)
        .map(|j| {
            let prod: f64 = (0..n).filter(|&k| k != j).map(|k| x[j] - x[k]).product();
            1.0 / prod
        })
        .collect();

    let mut derivative = SquareMatrix::zeros(n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let dij = barycentric[j] / barycentric[i] / (x[i] - x[j]);
                derivative.set(i, j, dij);
                diag -= dij;
            }
        }
        // Negative-sum diagonal keeps row sums zero to rounding.
        derivative.set(i, i, diag);
    }

    let mut to_nodal = SquareMatrix::zeros(n);
    for (i, &xi) in x.iter().enumerate() {
        for k in 0..n {
            to_nodal.set(i, k, legendre(k, xi).0);
        }
    }
    // Discrete orthogonality of P_k under the Lobatto rule gives the inverse
    // Vandermonde directly; the top mode uses its discrete norm 2/N.
    let w = rule.weights();
    let mut to_modal = SquareMatrix::zeros(n);
    for k in 0..n {
        let norm: f64 = (0..n).map(|i| w[i] * to_nodal.get(i, k).powi(2)).sum();
        for i in 0..n {
            to_modal.set(k, i, w[i] * to_nodal.get(i, k) / norm);
        }
    }

    let mut ops = OperatorSet {
        rule,
        barycentric,
        derivative,
        left: Vec::new(),
        right: Vec::new(),
        to_modal,
        to_nodal,
    };
    ops.left = ops.lagrange_at(-1.0);
    ops.right = ops.lagrange_at(1.0);
    Ok(ops)
}

impl OperatorSet {
    /// Convenience: rule and operators for order `P` in one call.
    pub fn new(order: usize) -> Result<Self> {
        build_operator_set(build_lobatto_rule(order)?)
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn order(&self) -> usize {
        self.rule.order()
    }

    /// Nodes per direction, `P + 1`.
    pub fn n1d(&self) -> usize {
        self.rule.len()
    }

    pub fn nodes(&self) -> &[f64] {
        self.rule.nodes()
    }

    pub fn weights(&self) -> &[f64] {
        self.rule.weights()
    }

    pub fn derivative(&self) -> &SquareMatrix {
        &self.derivative
    }

    /// `l_i(-1)` for every basis function.
    pub fn left_interpolant(&self) -> &[f64] {
        &self.left
    }

    /// `l_i(+1)` for every basis function.
    pub fn right_interpolant(&self) -> &[f64] {
        &self.right
    }

    pub fn to_modal(&self) -> &SquareMatrix {
        &self.to_modal
    }

    pub fn to_nodal(&self) -> &SquareMatrix {
        &self.to_nodal
    }

    /// Values of every Lagrange basis polynomial at `xi`.
    pub fn lagrange_at(&self, xi: f64) -> Vec<f64> {
        let x = self.rule.nodes();
        if let Some(hit) = x.iter().position(|&node| node == xi) {
            let mut out = vec![0.0; x.len()];
            out[hit] = 1.0;
            return out;
        }
        let terms: Vec<f64> = x
            .iter()
            .zip(&self.barycentric)
            .map(|(&node, &b)| b / (xi - node))
            .collect();
        let total: f64 = terms.iter().sum();
        terms.into_iter().map(|t| t / total).collect()
    }

    /// Derivative on `[-1, 1]` of the interpolant through `values`.
    pub fn differentiate(&self, values: &[f64]) -> Vec<f64> {
        self.derivative.apply(values)
    }

    pub fn nodal_to_modal(&self, values: &[f64]) -> Vec<f64> {
        self.to_modal.apply(values)
    }

    pub fn modal_to_nodal(&self, coeffs: &[f64]) -> Vec<f64> {
        self.to_nodal.apply(coeffs)
    }
}
