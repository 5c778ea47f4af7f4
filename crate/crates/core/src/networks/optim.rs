use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::StateDict;

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity:
/// `v ← μ·v + g + λ·p`, `p ← p − η·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Tensor>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay {weight_decay} is negative"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocities: Vec::new(),
        })
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    pub fn write_state(&self, d: &mut StateDict) {
        d.put_f64("lr", self.learning_rate);
        d.put_f64("momentum", self.momentum);
        d.put_f64("weight_decay", self.weight_decay);
        d.put_scalar("n_velocities", self.velocities.len() as u64);
        for (i, v) in self.velocities.iter().enumerate() {
            d.put_tensor(format!("v.{i}"), v.clone());
        }
    }

    pub fn read_state(d: &StateDict) -> Result<Self> {
        let mut s = Self::new(d.f64("lr")?, d.f64("momentum")?, d.f64("weight_decay")?)?;
        let n = d.scalar("n_velocities")? as usize;
        s.velocities = (0..n)
            .map(|i| d.tensor(&format!("v.{i}")).cloned())
            .collect::<Result<_>>()?;
        Ok(s)
    }
}

/// One SGD update over a parameter group. `grads[i]` pairs with `params[i]`;
/// velocities are created lazily on the first step.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&Tensor>],
    state: &mut SgdState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            "params and grads differ in length",
        ));
    }
    if state.velocities.is_empty() {
        state.velocities = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocities.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            "velocity count does not match params",
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        let g = g.ok_or(Error::MissingGradient(i))?;
        if g.shape() != params[i].shape() || state.velocities[i].shape() != params[i].shape() {
            return Err(Error::shape("sgd_step", format!("param {i} shape")));
        }
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((p, g), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.velocities.iter_mut())
    {
        let g = g.unwrap();
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
