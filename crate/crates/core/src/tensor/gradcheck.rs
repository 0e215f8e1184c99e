//! Finite-difference gradient verification.
//!
//! The driver compares analytic gradients (computed by the caller via the
//! tape) against central differences of a scalar-valued evaluation closure.
//! Errors are reported per tensor as
//!
//! ```text
//! rel_err = max_i |analytic_i - numeric_i|
//!           / max(max|analytic|, max|numeric sampled|, 1e-12)
//! ```
//!
//! so tensors whose gradients are legitimately tiny are not penalized by a
//! pointwise ratio. Central differences use `f64` throughout.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum coordinates probed per tensor (evenly spaced; all when the
    /// tensor is smaller).
    pub max_coords: usize,
    /// Denominator floor for the relative error. Gradients whose magnitude
    /// sits below this are effectively zero (some parameters are
    /// structurally gradient-free, e.g. a bias that shifts every softmax
    /// input of a row equally); for them the comparison degenerates to
    /// float-noise over float-noise, so the error is measured against this
    /// absolute scale instead.
    pub zero_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            max_coords: 6,
            zero_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn pass(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Evenly spaced coordinate sample (deterministic, includes first element).
pub fn sample_coords(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut out = Vec::with_capacity(max);
    for i in 0..max {
        let idx = i * numel / max;
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    out
}

/// Compare `analytic` gradients for `params` against central differences of
/// `eval`. `eval` must be a pure function of the supplied parameter values;
/// this is verified by evaluating the base point twice and requiring bitwise
/// identical results.
pub fn check_gradients<F>(
    params: &[(String, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    mut eval: F,
    opts: GradCheckOptions,
) -> Result<CheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Numeric(format!(
            "{} parameter tensors but {} gradient tensors",
            params.len(),
            analytic.len()
        )));
    }
    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.detach()).collect();
    let f0 = eval(&base)?;
    let f0_again = eval(&base)?;
    if f0.to_bits() != f0_again.to_bits() {
        return Err(Error::Numeric(format!(
            "evaluation is not deterministic: {f0:?} vs {f0_again:?}"
        )));
    }
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("loss at base point is {f0}")));
    }

    let mut report = CheckReport::default();
    for (pi, ((name, tensor), grad)) in params.iter().zip(analytic).enumerate() {
        if grad.shape() != tensor.shape() {
            return Err(Error::Numeric(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                grad.shape(),
                tensor.shape()
            )));
        }
        let coords = sample_coords(tensor.numel(), opts.max_coords);
        let ga = grad.to_vec();
        let denom_a = ga.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut max_diff = 0.0f64;
        let mut denom_n = 0.0f64;
        for &ci in &coords {
            let mut plus = tensor.to_vec();
            plus[ci] += opts.step;
            let mut minus = tensor.to_vec();
            minus[ci] -= opts.step;
            let mut vals = base.clone();
            vals[pi] = Tensor::from_vec(tensor.shape(), plus)?;
            let fp = eval(&vals)?;
            vals[pi] = Tensor::from_vec(tensor.shape(), minus)?;
            let fm = eval(&vals)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(format!(
                    "nonfinite loss while perturbing `{name}` coord {ci}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            denom_n = denom_n.max(numeric.abs());
            max_diff = max_diff.max((ga[ci] - numeric).abs());
        }
        let denom = denom_a.max(denom_n).max(opts.zero_floor);
        report.tensors.push(TensorCheck {
            name: name.clone(),
            rel_err: max_diff / denom,
            coords_checked: coords.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::layer_norm;
    use crate::tensor::tape::Tape;
    use crate::SeededRng;

    #[test]
    fn sampling_covers_small_tensors_exactly() {
        assert_eq!(sample_coords(4, 6), vec![0, 1, 2, 3]);
        let s = sample_coords(1000, 6);
        assert_eq!(s.len(), 6);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&i| i < 1000));
    }

    #[test]
    fn quadratic_gradient_passes() {
        // f(x) = sum(x^2), grad = 2x
        let mut rng = SeededRng::new(40);
        let x: Tensor<f64> = rng.normal_tensor(&[10], 0.0, 1.0);
        let grad = x.scale(2.0).unwrap();
        let report = check_gradients(
            &[("x".into(), x)],
            &[grad],
            |vals| {
                Ok(vals[0].data().iter().map(|v| v * v).sum())
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass(1e-6), "rel err {}", report.max_rel_err());
    }

    #[test]
    fn corrupted_gradient_is_rejected() {
        // Negative control: a 10% scale error on the analytic gradient must
        // push the relative error far above the acceptance threshold.
        let mut rng = SeededRng::new(41);
        let x: Tensor<f64> = rng.normal_tensor(&[10], 0.0, 1.0);
        let bad = x.scale(2.2).unwrap(); // truth is 2x
        let report = check_gradients(
            &[("x".into(), x)],
            &[bad],
            |vals| Ok(vals[0].data().iter().map(|v| v * v).sum()),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.pass(1e-4));
        assert_eq!(report.worst().unwrap().name, "x");
    }

    #[test]
    fn nondeterministic_eval_is_an_error() {
        let x = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::<f64>::zeros(&[2]);
        let mut counter = 0.0f64;
        let err = check_gradients(
            &[("x".into(), x)],
            &[g],
            |_| {
                counter += 1.0;
                Ok(counter)
            },
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(format!("{err}").contains("deterministic"));
    }

    #[test]
    fn tape_gradients_of_composite_graph_pass() {
        // matmul -> gelu -> layer_norm -> weighted sum, all through the tape
        let mut rng = SeededRng::new(42);
        let w0: Tensor<f64> = rng.normal_tensor(&[4, 3], 0.0, 1.0);
        let g0: Tensor<f64> = rng.normal_tensor(&[3], 1.0, 0.2);
        let b0: Tensor<f64> = rng.normal_tensor(&[3], 0.0, 0.2);
        let x: Tensor<f64> = rng.normal_tensor(&[5, 4], 0.0, 1.0);
        let wt: Tensor<f64> = rng.normal_tensor(&[5, 3], 0.0, 1.0);

        let eval = |vals: &[Tensor<f64>]| -> crate::Result<f64> {
            let y = x.matmul(&vals[0])?.gelu()?;
            let y = layer_norm(&y, &vals[1], &vals[2], 1e-5)?;
            y.mul(&wt)?.sum_all()?.item()
        };

        let tape = Tape::<f64>::new();
        let w = Tape::leaf(&tape, &w0, true).unwrap();
        let gm = Tape::leaf(&tape, &g0, true).unwrap();
        let bt = Tape::leaf(&tape, &b0, true).unwrap();
        let y = x.matmul(&w).unwrap().gelu().unwrap();
        let y = layer_norm(&y, &gm, &bt, 1e-5).unwrap();
        let loss = y.mul(&wt).unwrap().sum_all().unwrap();
        let grads = Tape::backward(&loss).unwrap();

        let report = check_gradients(
            &[
                ("w".into(), w0),
                ("gamma".into(), g0),
                ("beta".into(), b0),
            ],
            &[
                grads.wrt(&w).unwrap(),
                grads.wrt(&gm).unwrap(),
                grads.wrt(&bt).unwrap(),
            ],
            eval,
            GradCheckOptions {
                step: 1e-5,
                max_coords: 12,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.pass(1e-7), "max rel err {}", report.max_rel_err());
    }
}
