use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;

/// A differentiable functional on symmetric `N×N` matrices.
///
/// Gradients follow the Frobenius pairing: for symmetric `dX`,
/// `f(X + dX) ≈ f(X) + ⟨∇f(X), dX⟩`, with `∇f` symmetric.
pub trait Functional: Send + Sync {
    fn value(&self, x: &DMatrix<f64>) -> f64;

    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64>;

    /// Restriction to the segment `x + t dir`.
    fn along<'a>(&'a self, x: &'a DMatrix<f64>, dir: &'a DMatrix<f64>) -> Box<dyn Fn(f64) -> f64 + 'a> {
        Box::new(move |t| self.value(&(x + dir * t)))
    }

    /// The affine form of this functional, when it has one.
    fn as_affine(&self) -> Option<&AffineFunctional> {
        None
    }
}

/// `g(X) = Σ c_k (X[i_k, j_k] + X[j_k, i_k]) / 2 + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFunctional {
    dim: usize,
    terms: Vec<(usize, usize, f64)>,
    constant: f64,
}

impl AffineFunctional {
    pub fn new(dim: usize, terms: Vec<(usize, usize, f64)>, constant: f64) -> Self {
        debug_assert!(terms.iter().all(|&(i, j, _)| i < dim && j < dim));
        Self { dim, terms, constant }
    }

    /// `X[i, j] - target`.
    pub fn entry(dim: usize, i: usize, j: usize, target: f64) -> Self {
        Self::new(dim, vec![(i, j, 1.0)], -target)
    }

    /// `coef * tr(X) + constant`.
    pub fn trace(dim: usize, coef: f64, constant: f64) -> Self {
        Self::new(dim, (0..dim).map(|i| (i, i, coef)).collect(), constant)
    }

    pub fn terms(&self) -> &[(usize, usize, f64)] {
        &self.terms
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// Linear part only.
    fn linear(&self, x: &DMatrix<f64>) -> f64 {
        self.terms.iter().map(|&(i, j, c)| c * 0.5 * (x[(i, j)] + x[(j, i)])).sum()
    }

    /// Same functional of `X` rewritten as a functional of `Y` with
    /// `X = scale * Y[0..dim, 0..dim]`, `Y` of side `new_dim`.
    pub fn rescaled(&self, scale: f64, new_dim: usize) -> Self {
        Self {
            dim: new_dim,
            terms: self.terms.iter().map(|&(i, j, c)| (i, j, c * scale)).collect(),
            constant: self.constant,
        }
    }
}

impl Functional for AffineFunctional {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        self.linear(x) + self.constant
    }

    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        for &(i, j, c) in &self.terms {
            g[(i, j)] += 0.5 * c;
            g[(j, i)] += 0.5 * c;
        }
        g
    }

    fn along<'a>(&'a self, x: &'a DMatrix<f64>, dir: &'a DMatrix<f64>) -> Box<dyn Fn(f64) -> f64 + 'a> {
        let v0 = self.value(x);
        let slope = self.linear(dir);
        Box::new(move |t| v0 + t * slope)
    }

    fn as_affine(&self) -> Option<&AffineFunctional> {
        Some(self)
    }
}

/// Linear matrix inequality `L(X) = UᵀXV + VᵀXU + C ⪯ 0` with `U`, `V` of
/// shape `N×m` and `C` symmetric `m×m`. The penalty sees it through the
/// eigenvalues of `L(X)`, one term each.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMatrixIneq {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl LinearMatrixIneq {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        assert_eq!(u.shape(), v.shape(), "U and V must have the same shape");
        assert_eq!(c.shape(), (u.ncols(), u.ncols()), "C must be m×m");
        Self { u, v, c }
    }

    /// `X[rows, rows] ⪯ bound · I`.
    pub fn block_upper(dim: usize, rows: Range<usize>, bound: f64) -> Self {
        let m = rows.len();
        let mut u = DMatrix::zeros(dim, m);
        for (k, r) in rows.enumerate() {
            u[(r, k)] = std::f64::consts::FRAC_1_SQRT_2;
        }
        Self::new(u.clone(), u, DMatrix::identity(m, m) * -bound)
    }

    /// Spectral norm bound `‖G X[rows, cols] H‖₂ <= bound`, through the
    /// symmetric dilation `[[0, M], [Mᵀ, 0]] ⪯ bound · I`.
    pub fn norm_bound(dim: usize, rows: Range<usize>, cols: Range<usize>, g: &DMatrix<f64>, h: &DMatrix<f64>, bound: f64) -> Self {
        assert_eq!(g.ncols(), rows.len());
        assert_eq!(h.nrows(), cols.len());
        let (p, q) = (g.nrows(), h.ncols());
        let mut u = DMatrix::zeros(dim, p + q);
        let mut v = DMatrix::zeros(dim, p + q);
        u.view_mut((rows.start, 0), (rows.len(), p)).copy_from(&g.transpose());
        v.view_mut((cols.start, p), (cols.len(), q)).copy_from(h);
        Self::new(u, v, DMatrix::identity(p + q, p + q) * -bound)
    }

    pub fn size(&self) -> usize {
        self.c.nrows()
    }

    /// `UᵀXV + VᵀXU` without the constant.
    pub fn linear(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.u.transpose() * x * &self.v;
        &m + m.transpose()
    }

    pub fn eval(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.linear(x) + &self.c
    }

    /// Adjoint of the linear part: `⟨E, L₀(X)⟩ = ⟨adjoint(E), X⟩`, symmetric.
    pub fn adjoint(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        let m = &self.u * e * self.v.transpose();
        &m + m.transpose()
    }

    /// The same inequality in `Y` with `X = scale · Y[0..dim, 0..dim]`.
    pub fn rescaled(&self, scale: f64, new_dim: usize) -> Self {
        let pad = |a: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(new_dim, a.ncols());
            out.view_mut((0, 0), a.shape()).copy_from(a);
            out
        };
        Self { u: pad(&self.u) * scale, v: pad(&self.v), c: self.c.clone() }
    }
}

/// Functional assembled from closures.
pub struct FnFunctional<V, G> {
    value: V,
    gradient: G,
}

impl<V, G> FnFunctional<V, G>
where
    V: Fn(&DMatrix<f64>) -> f64 + Send + Sync,
    G: Fn(&DMatrix<f64>) -> DMatrix<f64> + Send + Sync,
{
    pub fn new(value: V, gradient: G) -> Self {
        Self { value, gradient }
    }
}

impl<V, G> Functional for FnFunctional<V, G>
where
    V: Fn(&DMatrix<f64>) -> f64 + Send + Sync,
    G: Fn(&DMatrix<f64>) -> DMatrix<f64> + Send + Sync,
{
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        (self.gradient)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    /// Pinned by equality constraints.
    Fixed,
    /// Read back as a model matrix.
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub role: BlockRole,
}

/// Maps named model matrices onto index ranges of the solver variable.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockLayout {
    dim: usize,
    blocks: Vec<Block>,
}

impl BlockLayout {
    pub fn new(dim: usize) -> Self {
        Self { dim, blocks: Vec::new() }
    }

    pub fn with_block(mut self, name: &str, rows: Range<usize>, cols: Range<usize>, role: BlockRole) -> Self {
        assert!(rows.end <= self.dim && cols.end <= self.dim, "block {name} outside the variable");
        self.blocks.push(Block { name: name.to_string(), rows, cols, role });
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Reads a block, averaging each entry with its mirror image.
    pub fn read(&self, x: &DMatrix<f64>, name: &str) -> DMatrix<f64> {
        let b = self.block(name).unwrap_or_else(|| panic!("unknown block {name}"));
        DMatrix::from_fn(b.rows.len(), b.cols.len(), |i, j| {
            let (r, c) = (b.rows.start + i, b.cols.start + j);
            0.5 * (x[(r, c)] + x[(c, r)])
        })
    }

    /// Writes `m` into the block and its mirror image.
    pub fn write(&self, x: &mut DMatrix<f64>, name: &str, m: &DMatrix<f64>) {
        let b = self.block(name).unwrap_or_else(|| panic!("unknown block {name}"));
        for i in 0..b.rows.len() {
            for j in 0..b.cols.len() {
                let (r, c) = (b.rows.start + i, b.cols.start + j);
                x[(r, c)] = m[(i, j)];
                x[(c, r)] = m[(i, j)];
            }
        }
    }

    /// Places `∂f/∂block` into an `N×N` gradient so that the Frobenius pairing
    /// with a symmetric direction reproduces the directional derivative.
    pub fn scatter_gradient(&self, g: &mut DMatrix<f64>, name: &str, block_grad: &DMatrix<f64>) {
        let b = self.block(name).unwrap_or_else(|| panic!("unknown block {name}"));
        for i in 0..b.rows.len() {
            for j in 0..b.cols.len() {
                let (r, c) = (b.rows.start + i, b.cols.start + j);
                let half = 0.5 * block_grad[(i, j)];
                g[(r, c)] += half;
                g[(c, r)] += half;
            }
        }
    }

    /// Equality constraints pinning every entry of a block to `target`
    /// (upper triangle only for blocks on the diagonal).
    pub fn pin(&self, name: &str, target: &DMatrix<f64>) -> Vec<AffineFunctional> {
        let b = self.block(name).unwrap_or_else(|| panic!("unknown block {name}"));
        let diagonal = b.rows == b.cols;
        let mut out = Vec::new();
        for i in 0..b.rows.len() {
            for j in 0..b.cols.len() {
                if diagonal && j < i {
                    continue;
                }
                out.push(AffineFunctional::entry(self.dim, b.rows.start + i, b.cols.start + j, target[(i, j)]));
            }
        }
        out
    }
}

/// A solver-ready convex program over symmetric `dim×dim` matrices `X ⪰ 0`
/// with `tr(X) <= trace_bound`.
#[derive(Clone)]
pub struct ConvexProblem {
    pub dim: usize,
    pub objective: Arc<dyn Functional>,
    pub ineq: Vec<Arc<dyn Functional>>,
    pub eq: Vec<AffineFunctional>,
    pub lmi: Vec<LinearMatrixIneq>,
    pub trace_bound: f64,
    pub layout: BlockLayout,
    /// A known lower bound on the objective over all PSD `X`. When set the
    /// outer search works on the scale `sqrt(h − floor)`, which has the same
    /// minimizers but turns objective accuracy into accuracy in `X`.
    pub objective_floor: Option<f64>,
}

impl std::fmt::Debug for ConvexProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvexProblem")
            .field("dim", &self.dim)
            .field("n_ineq", &self.ineq.len())
            .field("n_eq", &self.eq.len())
            .field("n_lmi", &self.lmi.len())
            .field("trace_bound", &self.trace_bound)
            .field("objective_floor", &self.objective_floor)
            .field("layout", &self.layout)
            .finish()
    }
}

impl ConvexProblem {
    pub fn n_constraints(&self) -> usize {
        self.ineq.len() + self.eq.len() + self.lmi.len()
    }

    /// Number of scalar terms in the penalty (one per LMI eigenvalue).
    pub fn n_terms(&self) -> usize {
        self.ineq.len() + self.eq.len() + self.lmi.iter().map(|l| l.size()).sum::<usize>()
    }
}
