//! Discretization of the neuron domain and the depth interval.
//!
//! The neuron domain is an interval `[lo, hi]` sampled with the composite
//! trapezoid rule, so every weight is positive and the discrete pairing
//! `Σ w_i f_i g_i` is a genuine inner product approximating `L²(Y)`.
//!
//! Kernel operators use the weight-on-the-right convention: the integral
//! operator `(Bf)(y) = ∫ b(y,z) f(z) dz` becomes `B ≈ K·diag(w)` where
//! `K_ij = b(y_i, z_j)`. Its adjoint with respect to the weighted pairing is
//! `diag(w)⁻¹ (K diag(w))ᵀ diag(w) = Kᵀ diag(w)`, i.e. the discrete adjoint
//! is obtained by transposing the sample matrix, exactly as `B_b* = B_{bᵀ}`
//! in the continuum.

use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Result};

/// A closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(invalid(format!("degenerate interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Quadrature nodes and weights over the neuron domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    domain: Interval,
}

impl Grid {
    /// Uniform composite-trapezoid grid with `n` nodes including both endpoints.
    pub fn uniform(n: usize, domain: Interval) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("grid needs at least 2 nodes, got {n}")));
        }
        let domain = Interval::new(domain.lo, domain.hi)?;
        let h = domain.length() / (n - 1) as f64;
        let nodes = (0..n)
            .map(|i| {
                if i == n - 1 {
                    domain.hi
                } else {
                    domain.lo + h * i as f64
                }
            })
            .collect();
        let mut weights = vec![h; n];
        weights[0] = 0.5 * h;
        weights[n - 1] = 0.5 * h;
        Ok(Self {
            nodes,
            weights,
            domain,
        })
    }

    /// Grid from explicit nodes and weights; checks positivity, ordering and
    /// that the weights integrate constants exactly.
    pub fn from_parts(nodes: Vec<f64>, weights: Vec<f64>, domain: Interval) -> Result<Self> {
        ensure_len("weights", weights.len(), nodes.len())?;
        if nodes.len() < 2 {
            return Err(invalid("grid needs at least 2 nodes"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(invalid("quadrature weights must be positive"));
        }
        if nodes.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(invalid("grid nodes must be strictly increasing"));
        }
        if nodes[0] < domain.lo || nodes[nodes.len() - 1] > domain.hi {
            return Err(invalid("grid nodes must lie inside the domain"));
        }
        let total: f64 = weights.iter().sum();
        if ((total - domain.length()) / domain.length()).abs() > 1e-12 {
            return Err(invalid(format!(
                "weights sum to {total}, domain length is {}",
                domain.length()
            )));
        }
        Ok(Self {
            nodes,
            weights,
            domain,
        })
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

    pub fn domain(&self) -> Interval {
        self.domain
    }

    /// `|Y|`, the measure of the domain.
    pub fn measure(&self) -> f64 {
        self.domain.length()
    }

    /// Quadrature of a field: `Σ w_i f_i`.
    pub fn integrate(&self, f: &Field) -> Result<f64> {
        ensure_len("field", f.len(), self.len())?;
        Ok(f.iter().zip(&self.weights).map(|(v, w)| v * w).sum())
    }

    /// Discrete `L²(Y)` norm.
    pub fn norm(&self, f: &Field) -> Result<f64> {
        Ok(inner_product(f, f, self)?.sqrt())
    }

    /// Discrete `L¹(Y)` norm.
    pub fn l1_norm(&self, f: &Field) -> Result<f64> {
        ensure_len("field", f.len(), self.len())?;
        Ok(f.iter().zip(&self.weights).map(|(v, w)| v.abs() * w).sum())
    }
}

/// Depth interval `[0, T]` split into `steps` equal Euler steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_final: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(invalid(format!("final time must be positive, got {t_final}")));
        }
        if steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        Ok(Self { t_final, steps })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    /// Time of grid point `l` (`0 ≤ l ≤ steps`).
    pub fn time(&self, l: usize) -> f64 {
        if l == self.steps {
            self.t_final
        } else {
            self.dt() * l as f64
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|l| self.time(l))
    }
}

/// Snapshot of a function on the grid nodes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Field(Vec<f64>);

impl Field {
    /// Field from node values; rejects non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("field entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64) -> f64) -> Self {
        Self(grid.nodes().iter().map(|&y| f(y)).collect())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_len("field", other.len(), self.len())?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Field) -> Result<Self> {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Field {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Deref for Field {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Field {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Kernel samples `K_ij = k(y_i, z_j)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSlice(DMatrix<f64>);

impl KernelSlice {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(invalid(format!(
                "kernel must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel has non-finite entries"));
        }
        Ok(Self(matrix))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self(DMatrix::from_element(n, n, value))
    }

    pub fn from_fn(grid: &Grid, k: impl Fn(f64, f64) -> f64) -> Self {
        let y = grid.nodes();
        Self(DMatrix::from_fn(grid.len(), grid.len(), |i, j| k(y[i], y[j])))
    }

    /// Rank-one kernel `left(y) · right(z)`.
    pub fn rank_one(left: &Field, right: &Field) -> Result<Self> {
        ensure_len("rank-one factor", right.len(), left.len())?;
        let n = left.len();
        Ok(Self(DMatrix::from_fn(n, n, |i, j| left[i] * right[j])))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// `kᵀ(y,z) = k(z,y)`.
    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `‖k‖_{L²(Y×Y)}` under the product quadrature. Upper-bounds the operator
    /// norm of `B_k` on the discrete `L²(Y)`.
    pub fn l2_norm(&self, grid: &Grid) -> Result<f64> {
        ensure_len("kernel", self.dim(), grid.len())?;
        let w = grid.weights();
        let mut s = 0.0;
        for j in 0..self.dim() {
            for i in 0..self.dim() {
                s += w[i] * w[j] * self.0[(i, j)].powi(2);
            }
        }
        Ok(s.sqrt())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    /// Largest entry of `|k − kᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.0 - self.0.transpose()).amax()
    }
}

/// `Σ_i w_i f_i g_i`.
pub fn inner_product(f: &Field, g: &Field, grid: &Grid) -> Result<f64> {
    ensure_len("left field", f.len(), grid.len())?;
    ensure_len("right field", g.len(), grid.len())?;
    Ok(f.iter()
        .zip(g.iter())
        .zip(grid.weights())
        .map(|((a, b), w)| w * a * b)
        .sum())
}

/// `(B_k f)(y_i) = Σ_j k_ij w_j f_j`.
pub fn apply_kernel(k: &KernelSlice, f: &Field, grid: &Grid) -> Result<Field> {
    ensure_len("kernel", k.dim(), grid.len())?;
    ensure_len("field", f.len(), grid.len())?;
    let n = grid.len();
    let w = grid.weights();
    let m = k.matrix();
    let mut out = vec![0.0; n];
    for j in 0..n {
        let wf = w[j] * f[j];
        if wf == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * wf;
        }
    }
    Ok(Field(out))
}

/// `(B_{kᵀ} g)(z_j) = Σ_i k_ij w_i g_i`, the weighted adjoint of [`apply_kernel`].
pub fn apply_kernel_transpose(k: &KernelSlice, g: &Field, grid: &Grid) -> Result<Field> {
    ensure_len("kernel", k.dim(), grid.len())?;
    ensure_len("field", g.len(), grid.len())?;
    let n = grid.len();
    let w = grid.weights();
    let m = k.matrix();
    let out = (0..n)
        .map(|j| (0..n).map(|i| m[(i, j)] * w[i] * g[i]).sum())
        .collect();
    Ok(Field(out))
}
