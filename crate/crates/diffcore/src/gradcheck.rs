//! Central finite-difference oracle for tape gradients.

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation of the five-point stencil, scaled by `max(1, |x|)` per element.
    pub step: f64,
    /// Denominator floor of the relative error, so exact zeros compare against
    /// finite-difference noise on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub max_rel_err: f64,
    /// `(input, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fourth-order central difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
fn five_point(mut eval: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let (p1, m1) = (eval(x + h), eval(x - h));
    let (p2, m2) = (eval(x + 2.0 * h), eval(x - 2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// Central difference of a plain function of a flat vector.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step * x[i].abs().max(1.0);
            let d = five_point(
                |v| {
                    probe[i] = v;
                    f(&probe)
                },
                x[i],
                h,
            );
            probe[i] = x[i];
            d
        })
        .collect()
}

/// Compares reverse-mode gradients of `f` at `inputs` against central differences.
///
/// `f` receives the tape and the inputs registered on it and must return a
/// scalar. The numeric side re-evaluates `f` on a non-recording tape.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let vars: Vec<Tensor> = inputs.iter().map(|t| tape.var(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        Ok(f(&mut t, vals)?.item())
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    for (i, input) in inputs.iter().enumerate() {
        let base = input.to_vec();
        let mut col = Vec::with_capacity(base.len());
        for e in 0..base.len() {
            let h = cfg.step * base[e].abs().max(1.0);
            let mut failure = None;
            let d = five_point(
                |v| {
                    let mut moved = base.clone();
                    moved[e] = v;
                    let r = Tensor::new(input.shape(), moved).and_then(|t| {
                        probe[i] = t;
                        eval(&probe)
                    });
                    r.unwrap_or_else(|err| {
                        failure = Some(err);
                        f64::NAN
                    })
                },
                base[e],
                h,
            );
            if let Some(err) = failure {
                return Err(err);
            }
            col.push(d);
        }
        probe[i] = input.detached();
        numeric.push(col);
    }

    let mut max_rel_err = 0.0;
    let mut worst = None;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (e, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let err = relative_error(av, nv, cfg.floor);
            if err > max_rel_err || worst.is_none() {
                max_rel_err = err.max(max_rel_err);
                worst = Some((i, e));
            }
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        worst,
    })
}
