//! Alignment regularizers: current features are mapped through the
//! alignment projector `a_φ` and pulled toward constant target features.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::{FrozenLearner, Learner, Mlp, MlpVars, Mode};
use crate::ssl::{neg_cosine, nt_xent, SslObjective, ViewPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentVariant {
    None,
    ClaB,
    ClaE,
    ClaR,
    Cassle,
    CassleR,
}

impl AlignmentVariant {
    pub fn needs_ema(self) -> bool {
        matches!(self, AlignmentVariant::ClaB | AlignmentVariant::ClaE)
    }

    pub fn needs_boundaries(self) -> bool {
        matches!(self, AlignmentVariant::Cassle | AlignmentVariant::CassleR)
    }

    pub fn needs_stored_features(self) -> bool {
        matches!(self, AlignmentVariant::ClaR)
    }
}

/// Which loss compares projected features with their targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignLoss {
    NegCosine,
    /// The SSL objective itself, with the target side held constant.
    SslLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub variant: AlignmentVariant,
    pub omega: f64,
    pub align_loss: AlignLoss,
}

impl AlignmentConfig {
    pub fn none() -> Self {
        Self {
            variant: AlignmentVariant::None,
            omega: 0.0,
            align_loss: AlignLoss::NegCosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "omega {} must be non-negative",
                self.omega
            )));
        }
        Ok(())
    }
}

/// Alignment projector registered on a graph.
#[derive(Clone, Copy)]
pub struct AlignProj<'a> {
    pub net: &'a Mlp,
    pub vars: &'a MlpVars,
}

impl AlignProj<'_> {
    pub fn apply(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.net.forward_frozen(g, self.vars, z, Mode::BatchStats)
    }
}

/// A regularizer value, or an inactive zero when its inputs were
/// unavailable (empty buffer, no snapshot yet).
#[derive(Clone, Debug)]
pub struct RegTerm {
    pub value: Var,
    pub active: bool,
    /// Target-side vars; none may receive a gradient.
    pub targets: Vec<Var>,
}

impl RegTerm {
    pub fn inactive(g: &mut Graph) -> Self {
        Self {
            value: g.constant(Tensor::scalar(0.0)),
            active: false,
            targets: Vec::new(),
        }
    }

    fn active(value: Var, targets: Vec<Var>) -> Self {
        Self {
            value,
            active: true,
            targets,
        }
    }
}

fn ensure_constant(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.requires_grad(v) {
        return Err(Error::Contract(format!(
            "{what} must be a constant (stop-gradient) tensor"
        )));
    }
    Ok(())
}

fn alignment_term(
    g: &mut Graph,
    projected: Var,
    target: Var,
    loss: AlignLoss,
    objective: SslObjective,
) -> Result<Var> {
    match (loss, objective) {
        (AlignLoss::NegCosine, _) | (AlignLoss::SslLoss, SslObjective::SimSiam) => {
            neg_cosine(g, projected, target)
        }
        (AlignLoss::SslLoss, SslObjective::SimClr { temperature }) => {
            let pair = ViewPair::new(g, projected, target)?;
            nt_xent(g, pair, temperature)
        }
    }
}

/// `½·L_alg(a_φ(z1), t1) + ½·L_alg(a_φ(z2), t2)` with constant targets.
pub fn reg_generalized(
    g: &mut Graph,
    z1: Var,
    z2: Var,
    a_phi: AlignProj<'_>,
    target1: Var,
    target2: Var,
    align_loss: AlignLoss,
    objective: SslObjective,
) -> Result<Var> {
    ensure_constant(g, target1, "alignment target")?;
    ensure_constant(g, target2, "alignment target")?;
    let p1 = a_phi.apply(g, z1)?;
    let p2 = a_phi.apply(g, z2)?;
    let l1 = alignment_term(g, p1, target1, align_loss, objective)?;
    let l2 = alignment_term(g, p2, target2, align_loss, objective)?;
    let s = g.add(l1, l2)?;
    Ok(g.scale(s, 0.5))
}

/// CLA-b: align stream features to the EMA twin's outputs on the same views.
pub fn cla_b_reg(
    g: &mut Graph,
    z1: Var,
    z2: Var,
    a_phi: AlignProj<'_>,
    ema: Option<&Learner>,
    x1: Var,
    x2: Var,
) -> Result<RegTerm> {
    let ema = ema.ok_or_else(|| Error::Contract("CLA-b needs an EMA twin".into()))?;
    let t1 = ema.target(g, x1)?;
    let t2 = ema.target(g, x2)?;
    let value = reg_generalized(
        g,
        z1,
        z2,
        a_phi,
        t1,
        t2,
        AlignLoss::NegCosine,
        SslObjective::SimSiam,
    )?;
    Ok(RegTerm::active(value, vec![t1, t2]))
}

/// Replay rows of both views: learner features and the augmented inputs.
#[derive(Clone, Copy, Debug)]
pub struct ReplayRows {
    pub z1: Var,
    pub z2: Var,
    pub x1: Var,
    pub x2: Var,
}

/// CLA-E: align replay features only, against the EMA twin on the replay views.
pub fn cla_e_reg(
    g: &mut Graph,
    replay: Option<ReplayRows>,
    a_phi: AlignProj<'_>,
    ema: Option<&Learner>,
) -> Result<RegTerm> {
    let ema = ema.ok_or_else(|| Error::Contract("CLA-E needs an EMA twin".into()))?;
    let Some(r) = replay else {
        return Ok(RegTerm::inactive(g));
    };
    cla_b_reg(g, r.z1, r.z2, a_phi, Some(ema), r.x1, r.x2)
}

/// CLA-R: align both replay views to the same stored feature `z*`.
pub fn cla_r_reg(
    g: &mut Graph,
    z_r1: Var,
    z_r2: Var,
    a_phi: AlignProj<'_>,
    z_star: Var,
) -> Result<RegTerm> {
    ensure_constant(g, z_star, "stored feature z*")?;
    let value = reg_generalized(
        g,
        z_r1,
        z_r2,
        a_phi,
        z_star,
        z_star,
        AlignLoss::NegCosine,
        SslObjective::SimSiam,
    )?;
    Ok(RegTerm::active(value, vec![z_star]))
}

/// `ssl + ω·reg`.
pub fn total_loss(g: &mut Graph, ssl: Var, reg: Var, omega: f64) -> Result<Var> {
    let weighted = g.scale(reg, omega);
    g.add(ssl, weighted)
}

/// CaSSLe-style alignment to the boundary snapshot with the SSL loss as
/// `L_alg`. Inactive before the first snapshot exists.
pub fn cassle_reg(
    g: &mut Graph,
    z1: Var,
    z2: Var,
    x1: Var,
    x2: Var,
    a_phi: AlignProj<'_>,
    frozen: Option<&FrozenLearner>,
    objective: SslObjective,
) -> Result<RegTerm> {
    let Some(frozen) = frozen else {
        return Ok(RegTerm::inactive(g));
    };
    let t1 = frozen.target(g, x1)?;
    let t2 = frozen.target(g, x2)?;
    let value = reg_generalized(g, z1, z2, a_phi, t1, t2, AlignLoss::SslLoss, objective)?;
    Ok(RegTerm::active(value, vec![t1, t2]))
}
