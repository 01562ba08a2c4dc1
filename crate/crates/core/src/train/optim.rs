use crate::error::{Error, Result};
use crate::quant::ALPHA_FLOOR;
use crate::tensor::Tensor;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First and second moment estimates for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (BETA1 as f64).powi(t);
    let bc2 = 1.0 - (BETA2 as f64).powi(t);
    let step_size = (lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
            *pv -= step_size * *mv / (vv.sqrt() / bc2_sqrt + ADAM_EPS);
        }
    }
    Ok(())
}

/// `α' = max(α − τ_α·(∂L/∂α + 2ηα), floor)`.
pub fn update_alpha(alpha: f32, grad: f32, alpha_lr: f32, alpha_reg: f32) -> f32 {
    (alpha - alpha_lr * (grad + 2.0 * alpha_reg * alpha)).max(ALPHA_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros([2])], &mut st, 1e-3).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::from_vec(vec![1.0])], &mut st, 1e-3).unwrap();
        let expected = 1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] + expected).abs() < 1e-9, "{}", p.data()[0]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new([&p]);
        let g = Tensor::from_vec(vec![0.37]);
        let mut prev = 0.0f32;
        for _ in 0..2000 {
            adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, 1e-3).unwrap();
            let step = prev - p.data()[0];
            prev = p.data()[0];
            assert!((step - 1e-3).abs() < 1e-5, "step {step}");
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = Tensor::from_vec(vec![0.0, 1.0]);
        let mut st = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros([3])], &mut st, 1e-3).is_err());
    }

    #[test]
    fn alpha_update_cases() {
        assert_eq!(update_alpha(2.5, 0.0, 0.1, 0.0), 2.5);
        assert!((update_alpha(1.0, 0.0, 0.1, 0.5) - 0.9).abs() < 1e-7);
        assert_eq!(update_alpha(1.0, 1e9, 0.1, 0.0), ALPHA_FLOOR);
    }

    #[test]
    fn alpha_decays_monotonically_to_floor() {
        let mut a = 6.0f32;
        loop {
            let next = update_alpha(a, 0.0, 0.5, 0.4);
            if a == ALPHA_FLOOR {
                assert_eq!(next, ALPHA_FLOOR);
                break;
            }
            assert!(next < a);
            a = next;
        }
    }
}
