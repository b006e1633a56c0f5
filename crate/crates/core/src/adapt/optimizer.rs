//! AdamW with decoupled weight decay, plus a plain gradient-descent mode.
//!
//! Both read the gradient already accumulated in each tensor's `grad`
//! buffer. Tensors without a gradient buffer are skipped entirely.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adamw,
    PlainSgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adamw" => Ok(Self::Adamw),
            "plain-sgd" | "sgd" => Ok(Self::PlainSgd),
            other => Err(format!("unknown optimizer {other:?} (expected adamw or plain-sgd)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adamw => "adamw",
            Self::PlainSgd => "plain-sgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-tensor first and second moment estimates plus the step count.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Applies one update using the gradients stored on `params`.
pub fn optimizer_step(
    params: &mut [Tensor],
    state: &mut OptimizerState,
    hp: &OptimizerParams,
) -> Result<(), TensorError> {
    if state.m.len() != params.len()
        || params.iter().zip(&state.m).any(|(p, m)| p.numel() != m.len())
    {
        return Err(TensorError::InvalidArgument(
            "optimizer state does not match parameter layout".into(),
        ));
    }
    if params
        .iter()
        .filter_map(Tensor::grad)
        .any(|g| g.iter().any(|v| !v.is_finite()))
    {
        return Err(TensorError::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;

    for (i, p) in params.iter_mut().enumerate() {
        let (data, grad) = p.data_and_grad_mut();
        let Some(grad) = grad else { continue };
        match hp.kind {
            OptimizerKind::PlainSgd => {
                for (w, g) in data.iter_mut().zip(grad.iter()) {
                    *w = *w * decay - hp.lr * g;
                }
            }
            OptimizerKind::Adamw => {
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for j in 0..data.len() {
                    let g = grad[j];
                    m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
                    v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    data[j] = data[j] * decay - hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64) -> Vec<Tensor> {
        let mut t = Tensor::filled(vec![1], value);
        t.accumulate_grad(&[grad]).unwrap();
        vec![t]
    }

    fn hp(kind: OptimizerKind, lr: f64, wd: f64) -> OptimizerParams {
        OptimizerParams {
            kind,
            lr,
            weight_decay: wd,
            ..OptimizerParams::default()
        }
    }

    #[test]
    fn adamw_first_step_is_bias_corrected() {
        let mut ps = one_param(1.0, 1.0);
        let mut st = OptimizerState::new(&ps);
        optimizer_step(&mut ps, &mut st, &hp(OptimizerKind::Adamw, 0.1, 0.0)).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps[0].data()[0] - expected).abs() < 1e-15);
        assert!((ps[0].data()[0] - 0.9).abs() < 2e-9);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut ps = one_param(1.0, 1.0);
        let mut st = OptimizerState::new(&ps);
        optimizer_step(&mut ps, &mut st, &hp(OptimizerKind::Adamw, 0.1, 0.01)).unwrap();
        let expected = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps[0].data()[0] - expected).abs() < 1e-15);
        assert!((ps[0].data()[0] - 0.899).abs() < 2e-9);
    }

    #[test]
    fn adamw_second_step_uses_momentum() {
        let mut ps = one_param(0.0, 1.0);
        let mut st = OptimizerState::new(&ps);
        let h = hp(OptimizerKind::Adamw, 0.01, 0.0);
        optimizer_step(&mut ps, &mut st, &h).unwrap();
        ps[0].zero_grad();
        ps[0].accumulate_grad(&[0.0]).unwrap();
        optimizer_step(&mut ps, &mut st, &h).unwrap();
        let m_hat = 0.09 / (1.0 - 0.81);
        let v_hat = 0.999e-3 / (1.0 - 0.999f64.powi(2));
        let second = 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        let first = 0.01 / (1.0 + 1e-8);
        assert!((ps[0].data()[0] + first + second).abs() < 1e-15);
        assert_eq!(st.steps(), 2);
    }

    #[test]
    fn sgd_zero_gradient_keeps_params() {
        let mut ps = one_param(0.37, 0.0);
        let mut st = OptimizerState::new(&ps);
        optimizer_step(&mut ps, &mut st, &hp(OptimizerKind::PlainSgd, 0.5, 0.0)).unwrap();
        assert_eq!(ps[0].data(), &[0.37]);
    }

    #[test]
    fn sgd_takes_gradient_step() {
        let mut ps = one_param(2.0, 4.0);
        let mut st = OptimizerState::new(&ps);
        optimizer_step(&mut ps, &mut st, &hp(OptimizerKind::PlainSgd, 0.25, 0.0)).unwrap();
        assert_eq!(ps[0].data(), &[1.0]);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        for kind in [OptimizerKind::Adamw, OptimizerKind::PlainSgd] {
            let mut ps = one_param(0.123456789, -3.0);
            let mut st = OptimizerState::new(&ps);
            optimizer_step(&mut ps, &mut st, &hp(kind, 0.0, 0.01)).unwrap();
            assert_eq!(ps[0].data()[0].to_bits(), 0.123456789f64.to_bits());
        }
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let mut ps = vec![Tensor::filled(vec![2], 1.0)];
        let mut st = OptimizerState::new(&ps);
        optimizer_step(&mut ps, &mut st, &hp(OptimizerKind::Adamw, 0.1, 0.5)).unwrap();
        assert_eq!(ps[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_non_finite_and_mismatched_state() {
        let mut ps = one_param(1.0, f64::NAN);
        let mut st = OptimizerState::new(&ps);
        assert_eq!(
            optimizer_step(&mut ps, &mut st, &OptimizerParams::default()),
            Err(TensorError::NonFinite("gradient"))
        );
        assert_eq!(ps[0].data(), &[1.0]);
        let mut other = OptimizerState::new(&[Tensor::zeros(vec![3])]);
        let mut ps = one_param(1.0, 1.0);
        assert!(optimizer_step(&mut ps, &mut other, &OptimizerParams::default()).is_err());
    }

    #[test]
    fn kind_parses() {
        assert_eq!("adamw".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adamw);
        assert_eq!("plain-sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::PlainSgd);
        assert!("lion".parse::<OptimizerKind>().is_err());
    }
}
