//! GODE-CF: final embeddings are the terminal state of `dE/dt = P_n(E) - E`
//! where `P_n` is `n` linear propagation hops over the normalized adjacency.
//! Also hosts the LightGCN layer-combination baseline.

use std::sync::Arc;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::graph::{spmm, spmm_into, SparseAdjacency};
use crate::solver::{self, Dynamics, SolverMethod, SolverTape};

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Integration end time; the start is always 0.
    pub t1: f64,
    pub steps: usize,
    pub n_hops: usize,
    pub use_weights: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Euler,
            t1: 0.9,
            steps: 1,
            n_hops: 2,
            use_weights: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let h = self.t1 / self.steps as f64;
        if self.steps == 0 || !(self.t1 > 0.0 && h.is_finite() && h > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "t1 must be positive and t1/steps finite (t1={}, steps={})",
                self.t1, self.steps
            )));
        }
        if self.n_hops == 0 {
            return Err(Error::InvalidConfig("n_hops must be >= 1".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.t1 / self.steps as f64
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalEmbeddings {
    pub e_final: EmbeddingMatrix,
    pub n_users: usize,
}

impl FinalEmbeddings {
    pub fn n_items(&self) -> usize {
        self.e_final.rows() - self.n_users
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.e_final.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.e_final.row(self.n_users + i)
    }

    /// Inner-product score of `user` against every item, in item order.
    pub fn score_all(&self, user: usize) -> Vec<f64> {
        let u = self.user(user);
        (0..self.n_items()).map(|i| dot(u, self.item(i))).collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score of `user` against each of `items`.
pub fn predict_scores(fe: &FinalEmbeddings, user: usize, items: &[usize]) -> Result<Vec<f64>> {
    if user >= fe.n_users {
        return Err(Error::OutOfRange(format!("user {user} (have {})", fe.n_users)));
    }
    let m = fe.n_items();
    items
        .iter()
        .map(|&i| {
            if i >= m {
                Err(Error::OutOfRange(format!("item {i} (have {m})")))
            } else {
                Ok(dot(fe.user(user), fe.item(i)))
            }
        })
        .collect()
}

/// Trainable GODE-CF parameters plus the fixed graph and solver setup.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub e0: EmbeddingMatrix,
    /// One scalar per hop when `solver.use_weights`, empty otherwise.
    pub hop_weights: Vec<f64>,
    pub adjacency: Arc<SparseAdjacency>,
    pub solver: SolverConfig,
}

impl ModelState {
    /// Hop weights start at 1, which makes the weighted path coincide with
    /// the unweighted one.
    pub fn new(e0: EmbeddingMatrix, adjacency: Arc<SparseAdjacency>, solver: SolverConfig) -> Result<Self> {
        solver.validate()?;
        if e0.rows() != adjacency.n_nodes() {
            return Err(Error::DimensionMismatch(format!(
                "e0 has {} rows, graph has {} nodes",
                e0.rows(),
                adjacency.n_nodes()
            )));
        }
        let hop_weights = if solver.use_weights {
            vec![1.0; solver.n_hops]
        } else {
            Vec::new()
        };
        Ok(ModelState {
            e0,
            hop_weights,
            adjacency,
            solver,
        })
    }

    fn dynamics(&self) -> GodeDynamics<'_> {
        GodeDynamics {
            adjacency: &self.adjacency,
            n_hops: self.solver.n_hops,
            weights: if self.solver.use_weights {
                Some(&self.hop_weights)
            } else {
                None
            },
        }
    }

    pub fn solve(&self, tape: Option<&mut SolverTape>) -> Result<FinalEmbeddings> {
        let e_final = solver::integrate(
            &self.dynamics(),
            self.solver.method,
            self.solver.t1,
            self.solver.steps,
            &self.e0,
            tape,
        )?;
        Ok(FinalEmbeddings {
            e_final,
            n_users: self.adjacency.n_users(),
        })
    }
}

/// The GODE-CF right-hand side.
pub struct GodeDynamics<'a> {
    pub adjacency: &'a SparseAdjacency,
    pub n_hops: usize,
    pub weights: Option<&'a [f64]>,
}

impl GodeDynamics<'_> {
    fn weight(&self, k: usize) -> Option<f64> {
        self.weights.map(|w| w[k])
    }

    /// Applies the hop chain, returning every hop input (`Z_0 .. Z_{n-1}`) and
    /// the output `Z_n`.
    fn hops(&self, x: &EmbeddingMatrix, keep_inputs: bool) -> Result<(Vec<EmbeddingMatrix>, EmbeddingMatrix)> {
        let mut inputs = Vec::new();
        let mut z = x.clone();
        let mut next = EmbeddingMatrix::zeros(x.rows(), x.dims());
        for k in 0..self.n_hops {
            spmm_into(self.adjacency, &z, &mut next)?;
            if let Some(w) = self.weight(k) {
                next.scale(w);
            }
            std::mem::swap(&mut z, &mut next);
            if keep_inputs {
                inputs.push(std::mem::replace(&mut next, EmbeddingMatrix::zeros(x.rows(), x.dims())));
            }
        }
        Ok((inputs, z))
    }
}

impl Dynamics for GodeDynamics<'_> {
    fn n_params(&self) -> usize {
        self.weights.map_or(0, <[f64]>::len)
    }

    fn eval(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let (_, mut out) = self.hops(x, false)?;
        out.axpy(-1.0, x)?;
        Ok(out)
    }

    fn vjp(&self, x: &EmbeddingMatrix, adj: &EmbeddingMatrix, param_grad: &mut [f64]) -> Result<EmbeddingMatrix> {
        let inputs = if self.weights.is_some() {
            self.hops(x, true)?.0
        } else {
            Vec::new()
        };
        let mut z_bar = adj.clone();
        let mut t = EmbeddingMatrix::zeros(adj.rows(), adj.dims());
        for k in (0..self.n_hops).rev() {
            // A is symmetric, so A^T z_bar = A z_bar.
            spmm_into(self.adjacency, &z_bar, &mut t)?;
            if let Some(w) = self.weight(k) {
                param_grad[k] += t.dot(&inputs[k])?;
                t.scale(w);
            }
            std::mem::swap(&mut z_bar, &mut t);
        }
        z_bar.axpy(-1.0, adj)?;
        Ok(z_bar)
    }
}

/// `g(E) = P_n(E) - E` for the state's graph and hop weights.
pub fn derivative(e: &EmbeddingMatrix, state: &ModelState) -> Result<EmbeddingMatrix> {
    if e.rows() != state.adjacency.n_nodes() {
        return Err(Error::DimensionMismatch(format!(
            "embedding has {} rows, graph has {} nodes",
            e.rows(),
            state.adjacency.n_nodes()
        )));
    }
    state.dynamics().eval(e)
}

/// Integrates from `state.e0` to `t1`.
pub fn integrate(state: &ModelState) -> Result<FinalEmbeddings> {
    state.solve(None)
}

/// LightGCN readout: `sum_l w_l A^l E_0` for `l = 0..=layers`.
pub fn lightgcn_forward(
    e0: &EmbeddingMatrix,
    a: &SparseAdjacency,
    layers: usize,
    layer_weights: &[f64],
) -> Result<FinalEmbeddings> {
    if layer_weights.len() != layers + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} layer weights for {layers} layers",
            layer_weights.len()
        )));
    }
    let mut out = e0.clone();
    out.scale(layer_weights[0]);
    let mut cur = e0.clone();
    for &w in &layer_weights[1..] {
        cur = spmm(a, &cur)?;
        out.axpy(w, &cur)?;
    }
    Ok(FinalEmbeddings {
        e_final: out,
        n_users: a.n_users(),
    })
}

pub fn uniform_layer_weights(layers: usize) -> Vec<f64> {
    vec![1.0 / (layers + 1) as f64; layers + 1]
}

/// LightGCN parameters. Layer weights are fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct LightGcnState {
    pub e0: EmbeddingMatrix,
    pub adjacency: Arc<SparseAdjacency>,
    pub layers: usize,
    pub layer_weights: Vec<f64>,
}

impl LightGcnState {
    pub fn new(e0: EmbeddingMatrix, adjacency: Arc<SparseAdjacency>, layers: usize) -> Result<Self> {
        if e0.rows() != adjacency.n_nodes() {
            return Err(Error::DimensionMismatch(format!(
                "e0 has {} rows, graph has {} nodes",
                e0.rows(),
                adjacency.n_nodes()
            )));
        }
        Ok(LightGcnState {
            e0,
            adjacency,
            layers,
            layer_weights: uniform_layer_weights(layers),
        })
    }
}

/// A model whose initial embeddings (and optional scalar parameters) are
/// learned by backpropagating through a linear forward map.
pub trait TrainableModel: Clone + Send + Sync {
    type Tape: Default + Send;

    fn e0(&self) -> &EmbeddingMatrix;
    fn e0_mut(&mut self) -> &mut EmbeddingMatrix;
    /// Trainable scalars besides `e0`.
    fn extra_params(&self) -> &[f64];
    fn extra_params_mut(&mut self) -> &mut [f64];
    fn n_users(&self) -> usize;

    fn forward_taped(&self, tape: Option<&mut Self::Tape>) -> Result<FinalEmbeddings>;

    /// Gradient of a loss w.r.t. `e0` and the extra parameters, given its
    /// gradient w.r.t. the final embeddings.
    fn backward(&self, tape: Option<&Self::Tape>, grad_final: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, Vec<f64>)>;

    fn forward(&self) -> Result<FinalEmbeddings> {
        self.forward_taped(None)
    }
}

impl TrainableModel for ModelState {
    type Tape = SolverTape;

    fn e0(&self) -> &EmbeddingMatrix {
        &self.e0
    }

    fn e0_mut(&mut self) -> &mut EmbeddingMatrix {
        &mut self.e0
    }

    fn extra_params(&self) -> &[f64] {
        &self.hop_weights
    }

    fn extra_params_mut(&mut self) -> &mut [f64] {
        &mut self.hop_weights
    }

    fn n_users(&self) -> usize {
        self.adjacency.n_users()
    }

    fn forward_taped(&self, tape: Option<&mut SolverTape>) -> Result<FinalEmbeddings> {
        self.solve(tape)
    }

    fn backward(&self, tape: Option<&SolverTape>, grad_final: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, Vec<f64>)> {
        let tape = tape.ok_or(Error::MissingTape)?;
        solver::integrate_backward(
            &self.dynamics(),
            self.solver.method,
            self.solver.t1,
            self.solver.steps,
            tape,
            grad_final,
        )
    }
}

impl TrainableModel for LightGcnState {
    type Tape = ();

    fn e0(&self) -> &EmbeddingMatrix {
        &self.e0
    }

    fn e0_mut(&mut self) -> &mut EmbeddingMatrix {
        &mut self.e0
    }

    fn extra_params(&self) -> &[f64] {
        &[]
    }

    fn extra_params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn n_users(&self) -> usize {
        self.adjacency.n_users()
    }

    fn forward_taped(&self, _tape: Option<&mut ()>) -> Result<FinalEmbeddings> {
        lightgcn_forward(&self.e0, &self.adjacency, self.layers, &self.layer_weights)
    }

    fn backward(&self, _tape: Option<&()>, grad_final: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, Vec<f64>)> {
        // The readout is a symmetric polynomial in A, so it is its own adjoint.
        let fe = lightgcn_forward(grad_final, &self.adjacency, self.layers, &self.layer_weights)?;
        Ok((fe.e_final, Vec::new()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::init_embeddings;

    fn dense(a: &SparseAdjacency) -> Vec<Vec<f64>> {
        a.to_dense()
    }

    fn dense_apply(a: &[Vec<f64>], e: &EmbeddingMatrix) -> EmbeddingMatrix {
        let n = a.len();
        let mut out = EmbeddingMatrix::zeros(e.rows(), e.dims());
        for r in 0..n {
            for c in 0..n {
                for d in 0..e.dims() {
                    out.row_mut(r)[d] += a[r][c] * e.row(c)[d];
                }
            }
        }
        out
    }

    fn toy_graph() -> Arc<SparseAdjacency> {
        Arc::new(
            SparseAdjacency::from_edges(3, 3, &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2), (2, 1)], Default::default())
                .unwrap(),
        )
    }

    fn state(method: SolverMethod, t1: f64, steps: usize, n_hops: usize, use_weights: bool) -> ModelState {
        let a = toy_graph();
        let e0 = init_embeddings(a.n_nodes(), 3, 1.0, 11).unwrap();
        ModelState::new(
            e0,
            a,
            SolverConfig {
                method,
                t1,
                steps,
                n_hops,
                use_weights,
            },
        )
        .unwrap()
    }

    #[test]
    fn derivative_with_empty_graph_is_negation() {
        let a = Arc::new(SparseAdjacency::empty(2, 2));
        let e0 = init_embeddings(4, 2, 1.0, 3).unwrap();
        let s = ModelState::new(e0.clone(), a, SolverConfig { n_hops: 1, ..Default::default() }).unwrap();
        let g = derivative(&e0, &s).unwrap();
        let mut neg = e0;
        neg.scale(-1.0);
        assert_eq!(g, neg);
    }

    #[test]
    fn derivative_on_eigenvector() {
        // one edge: A = [[0,1],[1,0]], eigenvector (1,1) with eigenvalue 1 and
        // (1,-1) with eigenvalue -1
        let a = Arc::new(SparseAdjacency::from_edges(1, 1, &[(0, 0)], Default::default()).unwrap());
        let cfg = SolverConfig { n_hops: 1, ..Default::default() };
        for (v, lambda) in [([1.0, 1.0], 1.0), ([1.0, -1.0], -1.0)] {
            let e = EmbeddingMatrix::from_vec(2, 1, v.to_vec()).unwrap();
            let s = ModelState::new(e.clone(), a.clone(), cfg.clone()).unwrap();
            let g = derivative(&e, &s).unwrap();
            for r in 0..2 {
                assert_eq!(g.row(r)[0], (lambda - 1.0) * v[r]);
            }
        }
    }

    #[test]
    fn derivative_two_hops_weighted_matches_dense() {
        let mut s = state(SolverMethod::Euler, 1.0, 1, 2, true);
        s.hop_weights = vec![0.7, -1.3];
        let e = init_embeddings(6, 3, 1.0, 4).unwrap();
        let g = derivative(&e, &s).unwrap();
        let d = dense(&s.adjacency);
        let mut h = dense_apply(&d, &e);
        h.scale(0.7);
        let mut expect = dense_apply(&d, &h);
        expect.scale(-1.3);
        expect.axpy(-1.0, &e).unwrap();
        assert!(g.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn derivative_equals_hop_composition_minus_identity() {
        for n_hops in 1..=3 {
            let s = state(SolverMethod::Euler, 1.0, 1, n_hops, false);
            let e = init_embeddings(6, 3, 1.0, n_hops as u64).unwrap();
            let mut p = e.clone();
            for _ in 0..n_hops {
                p = spmm(&s.adjacency, &p).unwrap();
            }
            p.axpy(-1.0, &e).unwrap();
            assert_eq!(derivative(&e, &s).unwrap(), p);
        }
    }

    #[test]
    fn derivative_dimension_mismatch() {
        let s = state(SolverMethod::Euler, 1.0, 1, 1, false);
        let e = init_embeddings(5, 3, 1.0, 0).unwrap();
        assert!(derivative(&e, &s).is_err());
    }

    #[test]
    fn unit_weights_match_unweighted_bitwise() {
        for method in [SolverMethod::Euler, SolverMethod::Rk4] {
            let a = state(method, 0.8, 3, 3, false);
            let b = state(method, 0.8, 3, 3, true);
            assert_eq!(integrate(&a).unwrap(), integrate(&b).unwrap());
        }
    }

    #[test]
    fn tiny_horizon_returns_initial_embeddings() {
        for method in [SolverMethod::Euler, SolverMethod::Rk4] {
            let s = state(method, 1e-30, 1, 2, false);
            let fe = integrate(&s).unwrap();
            assert!(fe.e_final.max_abs_diff(&s.e0).unwrap() < 1e-12);
        }
    }

    #[test]
    fn single_euler_step_is_residual_layer() {
        let s = state(SolverMethod::Euler, 1.0, 1, 1, false);
        let fe = integrate(&s).unwrap();
        let ae = dense_apply(&dense(&s.adjacency), &s.e0);
        assert!(fe.e_final.max_abs_diff(&ae).unwrap() < 1e-15);
    }

    #[test]
    fn forward_is_homogeneous() {
        for method in [SolverMethod::Euler, SolverMethod::Rk4] {
            let s = state(method, 0.9, 2, 2, false);
            let mut scaled = s.clone();
            scaled.e0.scale(-2.5);
            let mut expect = integrate(&s).unwrap().e_final;
            expect.scale(-2.5);
            assert!(integrate(&scaled).unwrap().e_final.max_abs_diff(&expect).unwrap() < 1e-10);
        }
    }

    #[test]
    fn invalid_solver_config() {
        let a = toy_graph();
        let e0 = init_embeddings(6, 2, 1.0, 0).unwrap();
        for cfg in [
            SolverConfig { t1: 0.0, ..Default::default() },
            SolverConfig { steps: 0, ..Default::default() },
            SolverConfig { n_hops: 0, ..Default::default() },
        ] {
            assert!(ModelState::new(e0.clone(), a.clone(), cfg).is_err());
        }
    }

    #[test]
    fn predict_scores_cases() {
        let e = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let fe = FinalEmbeddings { e_final: e, n_users: 1 };
        assert_eq!(predict_scores(&fe, 0, &[0, 1]).unwrap(), vec![1.0, 0.0]);
        assert!(predict_scores(&fe, 1, &[0]).is_err());
        assert!(predict_scores(&fe, 0, &[2]).is_err());

        let e = init_embeddings(7, 5, 1.0, 8).unwrap();
        let fe = FinalEmbeddings { e_final: e.clone(), n_users: 3 };
        let got = predict_scores(&fe, 2, &[0, 1, 2, 3]).unwrap();
        for (i, s) in got.iter().enumerate() {
            let mut expect = 0.0;
            for d in 0..5 {
                expect += e.row(2)[d] * e.row(3 + i)[d];
            }
            assert!((s - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lightgcn_cases() {
        let a = toy_graph();
        let e0 = init_embeddings(6, 3, 1.0, 2).unwrap();
        let fe = lightgcn_forward(&e0, &a, 0, &[0.5]).unwrap();
        let mut half = e0.clone();
        half.scale(0.5);
        assert_eq!(fe.e_final, half);

        let fe = lightgcn_forward(&e0, &SparseAdjacency::empty(3, 3), 3, &uniform_layer_weights(3)).unwrap();
        let mut quarter = e0.clone();
        quarter.scale(0.25);
        assert_eq!(fe.e_final, quarter);

        let w = uniform_layer_weights(2);
        let fe = lightgcn_forward(&e0, &a, 2, &w).unwrap();
        let d = dense(&a);
        let e1 = dense_apply(&d, &e0);
        let e2 = dense_apply(&d, &e1);
        let mut expect = e0.clone();
        expect.axpy(1.0, &e1).unwrap();
        expect.axpy(1.0, &e2).unwrap();
        expect.scale(1.0 / 3.0);
        assert!(fe.e_final.max_abs_diff(&expect).unwrap() < 1e-12);

        assert!(lightgcn_forward(&e0, &a, 2, &[1.0]).is_err());
    }
}
