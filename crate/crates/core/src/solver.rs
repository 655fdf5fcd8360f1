//! Fixed-grid explicit integrators over `[0, t1]` with exact reverse passes.
//!
//! The integrators are generic over a [`Dynamics`] implementation, which
//! supplies the derivative and its vector-Jacobian product. Gradients are
//! computed by running the discrete scheme backwards over the stage inputs
//! recorded in a [`SolverTape`].

use std::fmt;
use std::str::FromStr;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SolverMethod {
    #[default]
    Euler,
    Rk4,
}

impl SolverMethod {
    pub fn stages(self) -> usize {
        match self {
            SolverMethod::Euler => 1,
            SolverMethod::Rk4 => 4,
        }
    }
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Rk4 => "rk4",
        })
    }
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(SolverMethod::Euler),
            "rk4" => Ok(SolverMethod::Rk4),
            _ => Err(Error::InvalidConfig(format!("unknown solver `{s}` (euler|rk4)"))),
        }
    }
}

/// An autonomous right-hand side `dx/dt = f(x; theta)`.
pub trait Dynamics {
    fn n_params(&self) -> usize;

    fn eval(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix>;

    /// Returns `J_x(f)^T adj` and adds `J_theta(f)^T adj` into `param_grad`.
    fn vjp(
        &self,
        x: &EmbeddingMatrix,
        adj: &EmbeddingMatrix,
        param_grad: &mut [f64],
    ) -> Result<EmbeddingMatrix>;
}

/// Stage inputs of every step of one forward integration.
#[derive(Clone, Debug, Default)]
pub struct SolverTape {
    steps: Vec<Vec<EmbeddingMatrix>>,
}

impl SolverTape {
    pub fn clear(&mut self) {
        self.steps.clear();
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn stage_inputs(&self, step: usize) -> &[EmbeddingMatrix] {
        &self.steps[step]
    }
}

fn step_size(t1: f64, steps: usize) -> Result<f64> {
    let h = t1 / steps as f64;
    if steps == 0 || !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "step size t1/steps must be finite and positive (t1={t1}, steps={steps})"
        )));
    }
    Ok(h)
}

/// Integrates `f` from `x0` over `[0, t1]` with `steps` uniform steps.
/// When `tape` is given it is cleared and filled with the stage inputs.
pub fn integrate<D: Dynamics + ?Sized>(
    f: &D,
    method: SolverMethod,
    t1: f64,
    steps: usize,
    x0: &EmbeddingMatrix,
    mut tape: Option<&mut SolverTape>,
) -> Result<EmbeddingMatrix> {
    let h = step_size(t1, steps)?;
    if let Some(t) = tape.as_deref_mut() {
        t.clear();
    }
    let mut x = x0.clone();
    for step in 0..steps {
        let stages = match method {
            SolverMethod::Euler => {
                let k1 = f.eval(&x)?;
                let stages = vec![x.clone()];
                x.axpy(h, &k1)?;
                stages
            }
            SolverMethod::Rk4 => {
                let y1 = x.clone();
                let k1 = f.eval(&y1)?;
                let y2 = y1.added(h / 2.0, &k1)?;
                let k2 = f.eval(&y2)?;
                let y3 = y1.added(h / 2.0, &k2)?;
                let k3 = f.eval(&y3)?;
                let y4 = y1.added(h, &k3)?;
                let k4 = f.eval(&y4)?;
                let mut incr = k1;
                incr.axpy(2.0, &k2)?;
                incr.axpy(2.0, &k3)?;
                incr.axpy(1.0, &k4)?;
                x.axpy(h / 6.0, &incr)?;
                vec![y1, y2, y3, y4]
            }
        };
        if !x.is_finite() {
            return Err(Error::DivergentIntegration { step: step + 1 });
        }
        if let Some(t) = tape.as_deref_mut() {
            t.steps.push(stages);
        }
    }
    Ok(x)
}

/// Pulls the adjoint of the final state back to the initial state and the
/// parameters of `f`, replaying the recorded stages in reverse.
pub fn integrate_backward<D: Dynamics + ?Sized>(
    f: &D,
    method: SolverMethod,
    t1: f64,
    steps: usize,
    tape: &SolverTape,
    final_adjoint: &EmbeddingMatrix,
) -> Result<(EmbeddingMatrix, Vec<f64>)> {
    let h = step_size(t1, steps)?;
    if tape.n_steps() != steps || tape.steps.iter().any(|s| s.len() != method.stages()) {
        return Err(Error::MissingTape);
    }
    let mut param_grad = vec![0.0; f.n_params()];
    let mut x_bar = final_adjoint.clone();
    for stages in tape.steps.iter().rev() {
        match method {
            SolverMethod::Euler => {
                let mut k_bar = x_bar.clone();
                k_bar.scale(h);
                let g = f.vjp(&stages[0], &k_bar, &mut param_grad)?;
                x_bar.axpy(1.0, &g)?;
            }
            SolverMethod::Rk4 => {
                let mut k4_bar = x_bar.clone();
                k4_bar.scale(h / 6.0);
                let mut k3_bar = x_bar.clone();
                k3_bar.scale(h / 3.0);
                let mut k2_bar = k3_bar.clone();
                let mut k1_bar = k4_bar.clone();
                let mut acc = x_bar;

                let y4_bar = f.vjp(&stages[3], &k4_bar, &mut param_grad)?;
                acc.axpy(1.0, &y4_bar)?;
                k3_bar.axpy(h, &y4_bar)?;

                let y3_bar = f.vjp(&stages[2], &k3_bar, &mut param_grad)?;
                acc.axpy(1.0, &y3_bar)?;
                k2_bar.axpy(h / 2.0, &y3_bar)?;

                let y2_bar = f.vjp(&stages[1], &k2_bar, &mut param_grad)?;
                acc.axpy(1.0, &y2_bar)?;
                k1_bar.axpy(h / 2.0, &y2_bar)?;

                let y1_bar = f.vjp(&stages[0], &k1_bar, &mut param_grad)?;
                acc.axpy(1.0, &y1_bar)?;
                x_bar = acc;
            }
        }
    }
    Ok((x_bar, param_grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dx/dt = -theta * x on a 1x1 state.
    struct Decay(f64);

    impl Dynamics for Decay {
        fn n_params(&self) -> usize {
            1
        }

        fn eval(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
            let mut out = x.clone();
            out.scale(-self.0);
            Ok(out)
        }

        fn vjp(&self, x: &EmbeddingMatrix, adj: &EmbeddingMatrix, g: &mut [f64]) -> Result<EmbeddingMatrix> {
            g[0] -= x.dot(adj)?;
            let mut out = adj.clone();
            out.scale(-self.0);
            Ok(out)
        }
    }

    fn scalar(v: f64) -> EmbeddingMatrix {
        EmbeddingMatrix::from_vec(1, 1, vec![v]).unwrap()
    }

    fn run(method: SolverMethod, theta: f64, t1: f64, steps: usize) -> f64 {
        integrate(&Decay(theta), method, t1, steps, &scalar(1.0), None).unwrap().as_slice()[0]
    }

    #[test]
    fn euler_one_step_closed_form() {
        assert_eq!(run(SolverMethod::Euler, 0.5, 1.0, 1), 0.5);
    }

    #[test]
    fn rk4_one_step_matches_taylor_polynomial() {
        // RK4 on a linear ODE reproduces exp(z) truncated at 4th order, z = -theta*h
        let z: f64 = -0.3;
        let expect = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
        assert!((run(SolverMethod::Rk4, 0.3, 1.0, 1) - expect).abs() < 1e-15);
    }

    #[test]
    fn convergence_orders() {
        let exact = (-1.0f64).exp();
        let err = |m, s| (run(m, 1.0, 1.0, s) - exact).abs();
        let euler_slope = (err(SolverMethod::Euler, 8) / err(SolverMethod::Euler, 16)).log2();
        let rk4_slope = (err(SolverMethod::Rk4, 8) / err(SolverMethod::Rk4, 16)).log2();
        assert!((euler_slope - 1.0).abs() < 0.1, "{euler_slope}");
        assert!((rk4_slope - 4.0).abs() < 0.1, "{rk4_slope}");
    }

    #[test]
    fn tape_records_stage_inputs() {
        let mut tape = SolverTape::default();
        integrate(&Decay(1.0), SolverMethod::Rk4, 1.0, 3, &scalar(1.0), Some(&mut tape)).unwrap();
        assert_eq!(tape.n_steps(), 3);
        assert_eq!(tape.stage_inputs(0).len(), 4);
        assert_eq!(tape.stage_inputs(0)[0].as_slice(), &[1.0]);
        assert_eq!(tape.stage_inputs(0)[1].as_slice(), &[1.0 - 1.0 / 6.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for method in [SolverMethod::Euler, SolverMethod::Rk4] {
            let (theta, t1, steps, x0) = (0.7, 0.9, 3, 1.3);
            let mut tape = SolverTape::default();
            let f = Decay(theta);
            integrate(&f, method, t1, steps, &scalar(x0), Some(&mut tape)).unwrap();
            let (xb, pb) = integrate_backward(&f, method, t1, steps, &tape, &scalar(1.0)).unwrap();
            let eps = 1e-6;
            let fx = |x: f64, th: f64| {
                integrate(&Decay(th), method, t1, steps, &scalar(x), None).unwrap().as_slice()[0]
            };
            let dx = (fx(x0 + eps, theta) - fx(x0 - eps, theta)) / (2.0 * eps);
            let dth = (fx(x0, theta + eps) - fx(x0, theta - eps)) / (2.0 * eps);
            assert!((xb.as_slice()[0] - dx).abs() < 1e-8);
            assert!((pb[0] - dth).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_without_tape_fails() {
        let tape = SolverTape::default();
        let err = integrate_backward(&Decay(1.0), SolverMethod::Euler, 1.0, 1, &tape, &scalar(1.0));
        assert!(matches!(err, Err(Error::MissingTape)));
    }

    #[test]
    fn divergence_is_reported() {
        let err = integrate(&Decay(-1e200), SolverMethod::Euler, 1.0, 4, &scalar(1e200), None);
        assert!(matches!(err, Err(Error::DivergentIntegration { .. })));
    }

    #[test]
    fn invalid_step_size() {
        assert!(integrate(&Decay(1.0), SolverMethod::Euler, 1.0, 0, &scalar(1.0), None).is_err());
        assert!(integrate(&Decay(1.0), SolverMethod::Euler, -1.0, 1, &scalar(1.0), None).is_err());
        assert!(integrate(&Decay(1.0), SolverMethod::Euler, f64::NAN, 1, &scalar(1.0), None).is_err());
    }

    #[test]
    fn parse_method() {
        assert_eq!("RK4".parse::<SolverMethod>().unwrap(), SolverMethod::Rk4);
        assert_eq!(SolverMethod::Euler.to_string().parse::<SolverMethod>().unwrap(), SolverMethod::Euler);
        assert!("dopri5".parse::<SolverMethod>().is_err());
    }
}
