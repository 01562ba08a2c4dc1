//! Central finite differences, the reference for checking backward passes.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Estimates `∂f/∂x_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element.
///
/// `f` must return a one-element tensor.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    central_differences(
        |t| {
            let y = f(t)?;
            y.item().map(f64::from).ok_or_else(|| {
                Error::shape(
                    "finite_difference_gradient",
                    format!("f returned shape {:?}", y.shape()),
                )
            })
        },
        x,
        h,
    )
}

fn central_differences<F>(mut eval: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // Divide by the realised step, which differs from 2h in f32.
        let step = (orig + h) as f64 - (orig - h) as f64;
        grad.push(((up - down) / step) as f32);
    }
    Tensor::new(x.shape(), grad)
}

/// Tape and finite-difference gradients for each input of a graph.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    /// Relative error of each input's gradient on its own.
    pub fn per_input(&self, floor: f64) -> Vec<f64> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(a, n, floor))
            .collect()
    }

    /// Relative error of the full gradient, all inputs concatenated.
    pub fn overall(&self, floor: f64) -> f64 {
        let flat = |ts: &[Tensor]| {
            Tensor::from_vec(ts.iter().flat_map(|t| t.data().iter().copied()).collect())
        };
        relative_error(&flat(&self.analytic), &flat(&self.numeric), floor)
    }
}

/// Computes the tape gradients of the graph recorded by `build` and their
/// central-difference estimates.
///
/// The graph output may have any shape; it is reduced to a scalar by a dot
/// product with `projection`, which must have the same number of elements.
/// The finite-difference side does that reduction in f64.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    projection: &Tensor,
    h: f32,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    if tape.value(out).len() != projection.len() {
        return Err(Error::shape(
            "check_gradients",
            format!(
                "output {:?} vs projection {:?}",
                tape.value(out).shape(),
                projection.shape()
            ),
        ));
    }
    let r = tape.constant(projection.reshape(tape.value(out).shape().to_vec())?)?;
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted)?;
    let mut grads = tape.backward(loss)?;

    let mut check = GradCheck {
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .take(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let numeric = central_differences(
            |t| {
                let mut t2 = Tape::new();
                let vs = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t2.constant(if j == i { t.clone() } else { x.clone() }))
                    .collect::<Result<Vec<_>>>()?;
                let o = build(&mut t2, &vs)?;
                Ok(t2
                    .value(o)
                    .data()
                    .iter()
                    .zip(projection.data())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum())
            },
            &inputs[i],
            h,
        )?;
        check.analytic.push(analytic);
        check.numeric.push(numeric);
    }
    Ok(check)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let mut diff = 0.0f64;
    let (mut na, mut nb) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}
