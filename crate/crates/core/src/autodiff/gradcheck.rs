//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Finite-difference settings. The per-coordinate error is
/// `|tape - fd| / max(|tape|, |fd|, floor)`; `floor` keeps coordinates whose
/// true gradient is ~0 from dividing rounding noise by zero. The floor used
/// is never below the resolvable gradient `10 eps |f| / (step tol)`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, tol: 1e-4, floor: 1e-6 }
    }
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheck { step, tol, ..Default::default() }
    }

    /// Check every coordinate of every input of a scalar-valued `f`.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
            .collect();
        self.run_on(f, inputs, &coords)
    }

    /// Check only the listed `(input, coordinate)` pairs.
    pub fn run_on<F>(&self, f: F, inputs: &[Tensor], coords: &[(usize, usize)]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        if !(self.step > 0.0) {
            return Err(Error::contract("grad_check", format!("step must be > 0, got {}", self.step)));
        }
        let eval = |xs: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            let v = g.value(out);
            if !v.is_scalar() {
                return Err(Error::contract("grad_check", format!("f must be scalar-valued, got {:?}", v.shape())));
            }
            let y = v.data()[0];
            if !y.is_finite() {
                return Err(Error::Numeric("grad_check objective".into()));
            }
            Ok(y)
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("grad_check objective".into()));
        }
        // Central differences carry rounding noise of about eps*|f|/step; a
        // gradient below noise/tol cannot be resolved, so it sets the floor.
        let f0 = g.value(out).data()[0].abs().max(1.0);
        let floor = self.floor.max(10.0 * f64::EPSILON * f0 / (self.step * self.tol));
        let grads = g.backward(out)?;
        let tape: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

        let mut xs = inputs.to_vec();
        let mut max_rel = 0.0;
        let mut worst = (0, 0);
        for &(i, c) in coords {
            let orig = xs[i].data()[c];
            xs[i].data_mut()[c] = orig + self.step;
            let fp = eval(&xs)?;
            xs[i].data_mut()[c] = orig - self.step;
            let fm = eval(&xs)?;
            xs[i].data_mut()[c] = orig;
            let fd = (fp - fm) / (2.0 * self.step);
            let an = tape[i].data()[c];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, c);
            }
        }
        Ok(GradCheckReport { max_rel_err: max_rel, worst, checked: coords.len(), tol: self.tol, passed: max_rel <= self.tol })
    }
}

/// Single-input convenience wrapper.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    GradCheck::new(step, tol).run(|g, v| f(g, v[0]), std::slice::from_ref(x))
}
