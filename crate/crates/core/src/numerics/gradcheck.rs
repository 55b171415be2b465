//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the numerical gradient is
//! independent of the backward rules it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, Tensor, Var};

/// Relative errors below this denominator are measured as absolute errors.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares autodiff and central differences of `sum(f(inputs) * R)` with a
/// fixed random weighting `R`, for every element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, NumericsError>,
{
    let out_len = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t)).collect();
        f(&g, &vars)?.numel()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let scalar = |ts: &[Tensor]| -> Result<f64, NumericsError> {
        let g = Graph::new();
        let vars: Vec<_> = ts.iter().map(|t| g.constant(t)).collect();
        let out = f(&g, &vars)?.value();
        Ok(out.data().iter().zip(&weights).map(|(a, b)| a * b).sum())
    };

    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(true);
                g.leaf(&t)
            })
            .collect();
        let out = f(&g, &vars)?;
        let shape = out.shape();
        let w = g.constant(&Tensor::new(&shape, weights.clone())?);
        out.mul(w)?.sum().backward()?;
        vars.iter()
            .map(|v| g.grad(*v).expect("tracked leaf"))
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = scalar(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = scalar(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}
