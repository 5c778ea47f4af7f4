use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, NormStats, Tensor, Var};
use crate::error::{Error, Result};

/// Running-statistics momentum for batch norm layers.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

/// Layer widths `[in, h1, ..., out]`; hidden layers are followed by an
/// optional batch norm and a relu, the last layer by `final_activation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    /// One flag per hidden layer (`layer_widths.len() - 2` entries).
    pub use_batch_norm: Vec<bool>,
    pub final_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_batch_norm: bool,
        final_activation: Activation,
    ) -> Self {
        let hidden = layer_widths.len().saturating_sub(2);
        Self {
            layer_widths,
            use_batch_norm: vec![hidden_batch_norm; hidden],
            final_activation,
        }
    }

    /// Single linear layer.
    pub fn linear(input: usize, output: usize) -> Self {
        Self::new(vec![input, output], false, Activation::None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "mlp needs at least one layer".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("mlp widths must be positive".into()));
        }
        if self.use_batch_norm.len() != self.layer_widths.len() - 2 {
            return Err(Error::InvalidArgument(
                "one batch-norm flag per hidden layer".into(),
            ));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

/// How batch norm layers pick their statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Batch statistics; running averages are left alone (target networks).
    BatchStats,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    fn absorb(&mut self, stats: &BatchStats) {
        let unbias = stats.batch as f64 / (stats.batch as f64 - 1.0);
        let m = BATCH_NORM_MOMENTUM;
        for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Option<BatchNorm>,
}

/// Parameters of an [`Mlp`] registered on a graph, in [`Mlp::params`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

impl Mlp {
    /// He-style uniform fan-in initialization, `U(±√(6/fan_in))`, zero bias.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Dense {
                    weight: Tensor::uniform(&[w[0], w[1]], -bound, bound, rng),
                    bias: Tensor::zeros(&[w[1]]),
                    norm: spec
                        .use_batch_norm
                        .get(i)
                        .copied()
                        .unwrap_or(false)
                        .then(|| BatchNorm::new(w[1])),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Builds an MLP from explicit layers; shapes must chain.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Dense>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layer_widths.len() - 1 {
            return Err(Error::shape("mlp", "layer count does not match spec"));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (fan_in, fan_out) = (spec.layer_widths[i], spec.layer_widths[i + 1]);
            if layer.weight.shape() != [fan_in, fan_out] || layer.bias.len() != fan_out {
                return Err(Error::shape("mlp", format!("layer {i} shape")));
            }
            let wants_norm = spec.use_batch_norm.get(i).copied().unwrap_or(false);
            if wants_norm != layer.norm.is_some() {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i} batch-norm presence"),
                ));
            }
        }
        Ok(Self { spec, layers })
    }

    /// Square linear map initialized to the identity.
    pub fn identity(width: usize) -> Self {
        let layer = Dense {
            weight: Tensor::identity(width),
            bias: Tensor::zeros(&[width]),
            norm: None,
        };
        Self {
            spec: MlpSpec::linear(width, width),
            layers: vec![layer],
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(n) = &l.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers the parameters on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let params = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        MlpVars { params }
    }

    /// Forward pass; in [`Mode::Train`] batch-norm running stats are updated.
    pub fn forward(&mut self, g: &mut Graph, vars: &MlpVars, x: Var, mode: Mode) -> Result<Var> {
        let (out, observed) = self.run(g, vars, x, mode)?;
        if mode == Mode::Train {
            for (layer, stats) in self.layers.iter_mut().zip(observed) {
                if let (Some(norm), Some(stats)) = (&mut layer.norm, stats) {
                    norm.absorb(&stats);
                }
            }
        }
        Ok(out)
    }

    /// Forward pass that never touches running statistics.
    pub fn forward_frozen(&self, g: &mut Graph, vars: &MlpVars, x: Var, mode: Mode) -> Result<Var> {
        if mode == Mode::Train {
            return Err(Error::InvalidArgument(
                "forward_frozen cannot run in train mode".into(),
            ));
        }
        Ok(self.run(g, vars, x, mode)?.0)
    }

    fn run(
        &self,
        g: &mut Graph,
        vars: &MlpVars,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<Option<BatchStats>>)> {
        let width = g.value(x).cols();
        if width != self.spec.input_width() {
            return Err(Error::shape(
                "mlp",
                format!("input width {width}, expected {}", self.spec.input_width()),
            ));
        }
        let mut h = x;
        let mut observed = Vec::with_capacity(self.layers.len());
        let mut p = vars.params.iter().copied();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            h = g.matmul(h, w)?;
            h = g.add_row_bias(h, b)?;
            let mut stats = None;
            if let Some(norm) = &layer.norm {
                let (gamma, beta) = (p.next().unwrap(), p.next().unwrap());
                let source = match mode {
                    Mode::Train | Mode::BatchStats => NormStats::Batch,
                    Mode::Eval => NormStats::Running {
                        mean: &norm.running_mean,
                        var: &norm.running_var,
                    },
                };
                let (y, s) = g.batch_norm(h, gamma, beta, source)?;
                h = y;
                stats = s;
            }
            if i < last || self.spec.final_activation == Activation::Relu {
                h = g.relu(h);
            }
            observed.push(stats);
        }
        Ok((h, observed))
    }

    /// Value-only forward pass on a detached input.
    pub fn infer(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.as_matrix());
        let out = self.forward_frozen(&mut g, &vars, xv, mode)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::identity(3);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -1.0]]).unwrap();
        assert_eq!(net.infer(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(MlpSpec::linear(4, 2), &mut rng).unwrap();
        net.layers_mut()[0].weight = Tensor::zeros(&[4, 2]);
        net.layers_mut()[0].bias = Tensor::vector(&[0.25, -1.5]);
        let x = Tensor::randn(&[3, 4], &mut rng);
        let z = net.infer(&x, Mode::Eval).unwrap();
        for r in 0..3 {
            assert_eq!(z.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn width_mismatch_errors() {
        let net = Mlp::identity(3);
        assert!(net.infer(&Tensor::zeros(&[2, 4]), Mode::Eval).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(
            MlpSpec::new(vec![24, 16, 8], true, Activation::None),
            &mut rng,
        )
        .unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(net.layers()[0]
            .weight
            .data()
            .iter()
            .all(|w| w.abs() <= bound));
        assert!(net.layers()[0].norm.is_some());
        assert!(net.layers()[1].norm.is_none());
        assert_eq!(net.params().len(), 6);
    }

    #[test]
    fn train_mode_updates_running_stats_only_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(
            MlpSpec::new(vec![3, 5, 2], true, Activation::None),
            &mut rng,
        )
        .unwrap();
        let x = Tensor::randn(&[6, 3], &mut rng);
        let before = net.clone();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let xv = g.constant(x.clone());
        net.forward_frozen(&mut g, &vars, xv, Mode::BatchStats)
            .unwrap();
        assert_eq!(net, before);
        net.forward(&mut g, &vars, xv, Mode::Train).unwrap();
        assert_ne!(net.layers()[0].norm, before.layers()[0].norm);
    }

    #[test]
    fn eval_mode_is_independent_of_batch_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(
            MlpSpec::new(vec![3, 5, 2], true, Activation::Relu),
            &mut rng,
        )
        .unwrap();
        // move running stats away from their defaults
        for _ in 0..3 {
            let x = Tensor::randn(&[8, 3], &mut rng);
            let mut g = Graph::new();
            let vars = net.bind(&mut g, false);
            let xv = g.constant(x);
            net.forward(&mut g, &vars, xv, Mode::Train).unwrap();
        }
        let x = Tensor::randn(&[4, 3], &mut rng);
        let full = net.infer(&x, Mode::Eval).unwrap();
        let first = net.infer(&x.slice_rows(0, 1), Mode::Eval).unwrap();
        assert_eq!(full.row(0), first.row(0));
    }
}
