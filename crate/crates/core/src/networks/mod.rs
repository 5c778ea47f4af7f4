//! Learner, predictor, alignment projector and the EMA/frozen twins, plus
//! the optimizer and checkpoint container.

mod checkpoint;
mod mlp;
mod optim;
mod set;

use std::path::Path;

pub use checkpoint::{StateDict, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{Activation, BatchNorm, Dense, Mlp, MlpSpec, MlpVars, Mode, BATCH_NORM_MOMENTUM};
pub use optim::{sgd_step, SgdState};
pub use set::{
    ema_update, snapshot_frozen, FrozenLearner, Learner, LearnerOutput, LearnerVars, NetworkConfig,
    NetworkSet,
};

use crate::error::Result;

/// One optimizer state per trainable parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub theta: SgdState,
    pub predictor: SgdState,
    pub align_proj: SgdState,
}

impl Optimizers {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let s = SgdState::new(learning_rate, momentum, weight_decay)?;
        Ok(Self {
            theta: s.clone(),
            predictor: s.clone(),
            align_proj: s,
        })
    }

    pub fn write_state(&self, d: &mut StateDict) {
        for (name, s) in [
            ("theta", &self.theta),
            ("predictor", &self.predictor),
            ("align_proj", &self.align_proj),
        ] {
            let mut sub = StateDict::new();
            s.write_state(&mut sub);
            d.merge_prefixed(name, sub);
        }
    }

    pub fn read_state(d: &StateDict) -> Result<Self> {
        Ok(Self {
            theta: SgdState::read_state(&d.sub("theta"))?,
            predictor: SgdState::read_state(&d.sub("predictor"))?,
            align_proj: SgdState::read_state(&d.sub("align_proj"))?,
        })
    }
}

pub fn save_checkpoint(
    nets: &NetworkSet,
    optimizers: Option<&Optimizers>,
    path: &Path,
) -> Result<()> {
    let mut d = StateDict::new();
    let mut n = StateDict::new();
    nets.write_state(&mut n);
    d.merge_prefixed("nets", n);
    if let Some(o) = optimizers {
        let mut s = StateDict::new();
        o.write_state(&mut s);
        d.merge_prefixed("optim", s);
    }
    d.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSet, Option<Optimizers>)> {
    let d = StateDict::load(path)?;
    let nets = NetworkSet::read_state(&d.sub("nets"))?;
    let optim = d.sub("optim");
    let optimizers = if optim.has_scalar("theta.n_velocities") {
        Some(Optimizers::read_state(&optim)?)
    } else {
        None
    };
    Ok((nets, optimizers))
}
