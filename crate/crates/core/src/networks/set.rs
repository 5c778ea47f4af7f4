use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

use super::mlp::{Activation, BatchNorm, Dense, Mlp, MlpSpec, MlpVars, Mode};
use super::StateDict;

/// Architecture of the desk-scale networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Encoder widths after the input, e.g. `[128, 128]`.
    pub encoder_widths: Vec<usize>,
    pub projector_dim: usize,
    pub predictor_hidden: usize,
    pub align_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            encoder_widths: vec![128, 128],
            projector_dim: 64,
            predictor_hidden: 32,
            align_hidden: 64,
        }
    }
}

impl NetworkConfig {
    pub fn encoder_spec(&self) -> MlpSpec {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.encoder_widths);
        MlpSpec::new(widths, true, Activation::Relu)
    }

    pub fn projector_spec(&self) -> MlpSpec {
        MlpSpec::linear(self.feature_dim(), self.projector_dim)
    }

    pub fn predictor_spec(&self) -> MlpSpec {
        let f = self.projector_dim;
        MlpSpec::new(vec![f, self.predictor_hidden, f], true, Activation::None)
    }

    pub fn align_spec(&self) -> MlpSpec {
        let f = self.projector_dim;
        MlpSpec::new(vec![f, self.align_hidden, f], false, Activation::None)
    }

    /// Width of the encoder representation consumed by probes.
    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&self.input_dim)
    }
}

/// Encoder followed by projector: the network that maps inputs to the
/// feature space where SSL and alignment losses operate.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub encoder: Mlp,
    pub projector: Mlp,
}

#[derive(Clone, Debug)]
pub struct LearnerVars {
    pub encoder: MlpVars,
    pub projector: MlpVars,
}

impl LearnerVars {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .params
            .iter()
            .chain(&self.projector.params)
            .copied()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LearnerOutput {
    /// Encoder representation (pre-projector).
    pub features: Var,
    /// Projector output `z`.
    pub z: Var,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::new(config.encoder_spec(), rng)?,
            projector: Mlp::new(config.projector_spec(), rng)?,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LearnerVars {
        LearnerVars {
            encoder: self.encoder.bind(g, trainable),
            projector: self.projector.bind(g, trainable),
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        vars: &LearnerVars,
        x: Var,
        mode: Mode,
    ) -> Result<LearnerOutput> {
        let features = self.encoder.forward(g, &vars.encoder, x, mode)?;
        let z = self.projector.forward(g, &vars.projector, features, mode)?;
        Ok(LearnerOutput { features, z })
    }

    pub fn forward_frozen(
        &self,
        g: &mut Graph,
        vars: &LearnerVars,
        x: Var,
        mode: Mode,
    ) -> Result<LearnerOutput> {
        let features = self.encoder.forward_frozen(g, &vars.encoder, x, mode)?;
        let z = self
            .projector
            .forward_frozen(g, &vars.projector, features, mode)?;
        Ok(LearnerOutput { features, z })
    }

    /// Target-network forward: parameters enter the graph as constants and
    /// batch norms use batch statistics, so the output carries no gradient.
    pub fn target(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let vars = self.bind(g, false);
        Ok(self.forward_frozen(g, &vars, x, Mode::BatchStats)?.z)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.projector.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.projector.params_mut());
        p
    }

    /// Sum of squared parameter differences against a congruent learner.
    pub fn squared_distance(&self, other: &Learner) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn bitwise_eq(&self, other: &Learner) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y))
    }
}

/// EMA update `p′ ← τ·p′ + (1 − τ)·p` over every trainable parameter of the
/// twin. Batch-norm running statistics are not averaged.
pub fn ema_update(theta: &Learner, ema: &mut Learner, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let src = theta.params();
    let mut dst = ema.params_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(s, d)| s.shape() != d.shape()) {
        return Err(Error::shape(
            "ema_update",
            "twin is not congruent with theta",
        ));
    }
    for (s, d) in src.iter().zip(dst.iter_mut()) {
        for (dv, sv) in d.data_mut().iter_mut().zip(s.data()) {
            *dv = tau * *dv + (1.0 - tau) * sv;
        }
    }
    Ok(())
}

/// Boundary snapshot of the learner. Read-only: it can only be bound as
/// constants, so it never receives gradients or updates.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLearner(Learner);

impl FrozenLearner {
    pub fn learner(&self) -> &Learner {
        &self.0
    }

    pub fn target(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.0.target(g, x)
    }
}

/// Deep copy of `theta` taken at a visible task boundary.
pub fn snapshot_frozen(theta: &Learner, boundaries_visible: bool) -> Result<FrozenLearner> {
    if !boundaries_visible {
        return Err(Error::Protocol(
            "boundary snapshot requested on a stream with hidden boundaries".into(),
        ));
    }
    Ok(FrozenLearner(theta.clone()))
}

/// Every network a strategy may need.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSet {
    pub theta: Learner,
    /// SimSiam predictor head.
    pub predictor: Option<Mlp>,
    /// Alignment projector `Z → Z`.
    pub align_proj: Mlp,
    pub ema_theta: Option<Learner>,
    pub frozen_theta: Option<FrozenLearner>,
}

impl NetworkSet {
    pub fn new<R: Rng + ?Sized>(
        config: &NetworkConfig,
        with_predictor: bool,
        with_ema: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let theta = Learner::new(config, rng)?;
        let predictor = if with_predictor {
            Some(Mlp::new(config.predictor_spec(), rng)?)
        } else {
            None
        };
        let align_proj = Mlp::new(config.align_spec(), rng)?;
        let ema_theta = with_ema.then(|| theta.clone());
        Ok(Self {
            theta,
            predictor,
            align_proj,
            ema_theta,
            frozen_theta: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.theta.encoder.spec().input_width()
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.projector.spec().output_width()
    }

    pub fn write_state(&self, d: &mut StateDict) {
        write_learner(d, "theta", &self.theta);
        if let Some(p) = &self.predictor {
            write_mlp(d, "predictor", p);
        }
        write_mlp(d, "align_proj", &self.align_proj);
        if let Some(e) = &self.ema_theta {
            write_learner(d, "ema_theta", e);
        }
        if let Some(f) = &self.frozen_theta {
            write_learner(d, "frozen_theta", f.learner());
        }
    }

    pub fn read_state(d: &StateDict) -> Result<Self> {
        let opt_mlp = |name: &str| -> Result<Option<Mlp>> {
            if d.has_scalar(&format!("{name}.n_layers")) {
                read_mlp(d, name).map(Some)
            } else {
                Ok(None)
            }
        };
        let opt_learner = |name: &str| -> Result<Option<Learner>> {
            if d.has_scalar(&format!("{name}.encoder.n_layers")) {
                read_learner(d, name).map(Some)
            } else {
                Ok(None)
            }
        };
        let theta = read_learner(d, "theta")?;
        let ema_theta = opt_learner("ema_theta")?;
        if let Some(e) = &ema_theta {
            check_congruent(&theta, e)?;
        }
        Ok(Self {
            theta,
            predictor: opt_mlp("predictor")?,
            align_proj: read_mlp(d, "align_proj")?,
            ema_theta,
            frozen_theta: opt_learner("frozen_theta")?.map(FrozenLearner),
        })
    }
}

fn check_congruent(a: &Learner, b: &Learner) -> Result<()> {
    let (pa, pb) = (a.params(), b.params());
    if pa.len() != pb.len() || pa.iter().zip(&pb).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::Format("ema twin is not congruent with theta".into()));
    }
    Ok(())
}

fn write_learner(d: &mut StateDict, prefix: &str, l: &Learner) {
    write_mlp(d, &format!("{prefix}.encoder"), &l.encoder);
    write_mlp(d, &format!("{prefix}.projector"), &l.projector);
}

fn read_learner(d: &StateDict, prefix: &str) -> Result<Learner> {
    Ok(Learner {
        encoder: read_mlp(d, &format!("{prefix}.encoder"))?,
        projector: read_mlp(d, &format!("{prefix}.projector"))?,
    })
}

fn write_mlp(d: &mut StateDict, prefix: &str, net: &Mlp) {
    d.put_scalar(format!("{prefix}.n_layers"), net.layers().len() as u64);
    d.put_scalar(
        format!("{prefix}.final_relu"),
        u64::from(net.spec().final_activation == Activation::Relu),
    );
    for (i, l) in net.layers().iter().enumerate() {
        d.put_tensor(format!("{prefix}.{i}.weight"), l.weight.clone());
        d.put_tensor(format!("{prefix}.{i}.bias"), l.bias.clone());
        if let Some(n) = &l.norm {
            d.put_tensor(format!("{prefix}.{i}.gamma"), n.gamma.clone());
            d.put_tensor(format!("{prefix}.{i}.beta"), n.beta.clone());
            d.put_vec(format!("{prefix}.{i}.running_mean"), &n.running_mean);
            d.put_vec(format!("{prefix}.{i}.running_var"), &n.running_var);
        }
    }
}

fn read_mlp(d: &StateDict, prefix: &str) -> Result<Mlp> {
    let n = d.scalar(&format!("{prefix}.n_layers"))? as usize;
    let final_activation = if d.scalar(&format!("{prefix}.final_relu"))? == 1 {
        Activation::Relu
    } else {
        Activation::None
    };
    let mut layers = Vec::with_capacity(n);
    let mut widths = Vec::with_capacity(n + 1);
    let mut norms = Vec::new();
    for i in 0..n {
        let weight = d.tensor(&format!("{prefix}.{i}.weight"))?.clone();
        if weight.shape().len() != 2 {
            return Err(Error::Format(format!(
                "{prefix}.{i}.weight is not a matrix"
            )));
        }
        if i == 0 {
            widths.push(weight.shape()[0]);
        }
        widths.push(weight.shape()[1]);
        let bias = d.tensor(&format!("{prefix}.{i}.bias"))?.clone();
        let gamma_key = format!("{prefix}.{i}.gamma");
        let norm = if d.has_tensor(&gamma_key) {
            Some(BatchNorm {
                gamma: d.tensor(&gamma_key)?.clone(),
                beta: d.tensor(&format!("{prefix}.{i}.beta"))?.clone(),
                running_mean: d.vec(&format!("{prefix}.{i}.running_mean"))?,
                running_var: d.vec(&format!("{prefix}.{i}.running_var"))?,
            })
        } else {
            None
        };
        if i + 1 < n {
            norms.push(norm.is_some());
        }
        layers.push(Dense { weight, bias, norm });
    }
    let spec = MlpSpec {
        layer_widths: widths,
        use_batch_norm: norms,
        final_activation,
    };
    Mlp::from_layers(spec, layers).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            input_dim: 6,
            encoder_widths: vec![8, 8],
            projector_dim: 5,
            predictor_hidden: 3,
            align_hidden: 5,
        }
    }

    #[test]
    fn ema_extremes_and_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta = Learner::new(&small(), &mut rng).unwrap();
        let mut ema = Learner::new(&small(), &mut rng).unwrap();
        let original = ema.clone();
        ema_update(&theta, &mut ema, 1.0).unwrap();
        assert_eq!(ema, original);
        ema_update(&theta, &mut ema, 0.0).unwrap();
        assert!(ema
            .params()
            .iter()
            .zip(theta.params())
            .all(|(a, b)| a == &b));

        let mut p = theta.clone();
        let mut twin = theta.clone();
        p.params_mut()
            .into_iter()
            .for_each(|t| t.data_mut().fill(1.0));
        twin.params_mut()
            .into_iter()
            .for_each(|t| t.data_mut().fill(0.0));
        ema_update(&p, &mut twin, 0.999).unwrap();
        for t in twin.params() {
            assert!(t.data().iter().all(|&v| (v - 0.001).abs() < 1e-15));
        }
        assert!(ema_update(&p, &mut twin, 1.5).is_err());
        assert!(ema_update(&p, &mut twin, -0.1).is_err());
    }

    #[test]
    fn snapshot_requires_visible_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = Learner::new(&small(), &mut rng).unwrap();
        assert!(matches!(
            snapshot_frozen(&theta, false),
            Err(Error::Protocol(_))
        ));
        let frozen = snapshot_frozen(&theta, true).unwrap();
        assert!(frozen.learner().bitwise_eq(&theta));
    }

    #[test]
    fn align_projector_maps_feature_space_to_itself() {
        let cfg = NetworkConfig::default();
        let spec = cfg.align_spec();
        assert_eq!(spec.input_width(), cfg.projector_dim);
        assert_eq!(spec.output_width(), cfg.projector_dim);
        assert_eq!(spec.layer_widths, vec![64, 64, 64]);
        assert_eq!(cfg.predictor_spec().layer_widths, vec![64, 32, 64]);
        assert_eq!(cfg.encoder_spec().layer_widths, vec![32, 128, 128]);
    }

    #[test]
    fn state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut nets = NetworkSet::new(&small(), true, true, &mut rng).unwrap();
        nets.frozen_theta = Some(snapshot_frozen(&nets.theta, true).unwrap());
        let mut d = StateDict::new();
        nets.write_state(&mut d);
        let back = NetworkSet::read_state(&StateDict::from_bytes(&d.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, nets);
    }
}
