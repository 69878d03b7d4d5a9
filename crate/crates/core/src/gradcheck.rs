//! Central finite-difference checks for weights held in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::params::ParamStore;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub cases: usize,
    pub max_relative_error: f64,
    /// `(param name, flat index or usize::MAX for a direction, analytic, numeric)`
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        self.cases += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(err);
            self.worst = Some((name.to_string(), index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.cases += other.cases;
        if other.max_relative_error >= self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            cases: 0,
            max_relative_error: 0.0,
            worst: None,
        }
    }
}

/// Compares `grads` against central differences of `loss` at `coords_per_param`
/// random coordinates of every weight plus `directions` random directions
/// through the whole store.
pub fn check_params<R: Rng + ?Sized>(
    store: &ParamStore,
    grads: &[Vec<f64>],
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    coords_per_param: usize,
    directions: usize,
    rng: &mut R,
) -> Result<GradCheck> {
    let mut report = GradCheck::default();
    let mut work = store.clone();
    for p in 0..store.len() {
        let n = store.tensor(p).len();
        for _ in 0..coords_per_param.min(n) {
            let i = rng.random_range(0..n);
            let orig = store.tensor(p).data()[i];
            work.tensor_mut(p).data_mut()[i] = orig + FD_STEP;
            let up = loss(&work)?;
            work.tensor_mut(p).data_mut()[i] = orig - FD_STEP;
            let down = loss(&work)?;
            work.tensor_mut(p).data_mut()[i] = orig;
            report.record(&store.names()[p], i, grads[p][i], (up - down) / (2.0 * FD_STEP));
        }
    }
    for _ in 0..directions {
        let dir: Vec<Vec<f64>> = store
            .tensors()
            .iter()
            .map(|t| (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |sign: f64| {
            let mut s = store.clone();
            for (p, d) in dir.iter().enumerate() {
                for (w, x) in s.tensor_mut(p).data_mut().iter_mut().zip(d) {
                    *w += sign * FD_STEP * x;
                }
            }
            s
        };
        let up = loss(&shifted(1.0))?;
        let down = loss(&shifted(-1.0))?;
        report.record("<direction>", usize::MAX, analytic, (up - down) / (2.0 * FD_STEP));
    }
    Ok(report)
}
