//! Instance-discrimination objectives over two augmented views.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::{Mlp, MlpVars, Mode};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Row-aligned features of two views of the same samples.
#[derive(Clone, Copy, Debug)]
pub struct ViewPair {
    pub z1: Var,
    pub z2: Var,
}

impl ViewPair {
    pub fn new(g: &Graph, z1: Var, z2: Var) -> Result<Self> {
        if g.value(z1).shape() != g.value(z2).shape() {
            return Err(Error::shape(
                "view_pair",
                format!("{:?} vs {:?}", g.value(z1).shape(), g.value(z2).shape()),
            ));
        }
        Ok(Self { z1, z2 })
    }

    pub fn swapped(self) -> Self {
        Self {
            z1: self.z2,
            z2: self.z1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum SslObjective {
    #[default]
    SimSiam,
    SimClr {
        temperature: f64,
    },
}

impl SslObjective {
    pub fn simclr() -> Self {
        SslObjective::SimClr {
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    /// Views per sample entering backward.
    pub fn n_views(&self) -> u64 {
        2
    }

    pub fn needs_predictor(&self) -> bool {
        matches!(self, SslObjective::SimSiam)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SslObjective::SimSiam => "simsiam",
            SslObjective::SimClr { .. } => "simclr",
        }
    }

    /// The objective on a view pair. SimSiam requires its predictor.
    pub fn loss(
        &self,
        g: &mut Graph,
        pair: ViewPair,
        predictor: Option<(&mut Mlp, &MlpVars)>,
    ) -> Result<Var> {
        match self {
            SslObjective::SimSiam => {
                let (net, vars) = predictor.ok_or_else(|| {
                    Error::InvalidArgument("simsiam needs a predictor head".into())
                })?;
                simsiam_loss(g, pair, net, vars, Mode::Train)
            }
            SslObjective::SimClr { temperature } => nt_xent(g, pair, *temperature),
        }
    }
}

/// Mean over rows of `−⟨a_i, b_i⟩ / (‖a_i‖‖b_i‖)`.
pub fn neg_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(
            "neg_cosine",
            format!("{:?} vs {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    let rows = g.value(a).rows();
    let an = g.l2_normalize(a);
    let bn = g.l2_normalize(b);
    let prod = g.mul(an, bn)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// Symmetric SimSiam loss given predictor outputs `p1 = h(z1)`, `p2 = h(z2)`.
/// The `z` branches are detached.
pub fn simsiam_from_predictions(g: &mut Graph, p1: Var, p2: Var, pair: ViewPair) -> Result<Var> {
    let t1 = g.detach(pair.z1);
    let t2 = g.detach(pair.z2);
    let a = neg_cosine(g, p1, t2)?;
    let b = neg_cosine(g, p2, t1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// `½·D(h(z1), sg(z2)) + ½·D(h(z2), sg(z1))` with `D` the negative cosine.
pub fn simsiam_loss(
    g: &mut Graph,
    pair: ViewPair,
    predictor: &mut Mlp,
    vars: &MlpVars,
    mode: Mode,
) -> Result<Var> {
    if predictor.spec().output_width() != g.value(pair.z1).cols() {
        return Err(Error::shape(
            "simsiam_loss",
            "predictor output width differs from features",
        ));
    }
    let p1 = predictor.forward(g, vars, pair.z1, mode)?;
    let p2 = predictor.forward(g, vars, pair.z2, mode)?;
    simsiam_from_predictions(g, p1, p2, pair)
}

/// NT-Xent over the `2b` anchors of a view pair: each anchor's positive is
/// its counterpart view, the other `2b − 2` embeddings are negatives, and
/// self-similarity is excluded.
pub fn nt_xent(g: &mut Graph, pair: ViewPair, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let b = g.value(pair.z1).rows();
    if b < 2 {
        return Err(Error::InvalidArgument(
            "nt_xent needs at least 2 samples for negatives".into(),
        ));
    }
    if g.value(pair.z1).shape() != g.value(pair.z2).shape() {
        return Err(Error::shape("nt_xent", "view shapes differ"));
    }
    let all = g.concat_rows(&[pair.z1, pair.z2])?;
    let unit = g.l2_normalize(all);
    let sim = g.matmul_t(unit, unit)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let targets: Vec<usize> = (0..2 * b)
        .map(|i| if i < b { i + b } else { i - b })
        .collect();
    g.softmax_cross_entropy(logits, &targets, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn neg_cosine_cases() {
        let mut g = Graph::new();
        let a = g.constant(rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]));
        let same = neg_cosine(&mut g, a, a).unwrap();
        assert!((g.value(same).item() + 1.0).abs() < 1e-12);

        let x = g.constant(rows(&[vec![1.0, 0.0]]));
        let y = g.constant(rows(&[vec![0.0, 1.0]]));
        let orth = neg_cosine(&mut g, x, y).unwrap();
        assert!(g.value(orth).item().abs() < 1e-12);

        let p = g.constant(rows(&[vec![3.0, 4.0]]));
        let q = g.constant(rows(&[vec![6.0, 8.0]]));
        let col = neg_cosine(&mut g, p, q).unwrap();
        assert!((g.value(col).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn simsiam_identity_predictor_equal_views() {
        let mut g = Graph::new();
        let z = g.param(rows(&[vec![1.0, 2.0, 0.0], vec![0.0, -1.0, 4.0]]));
        let mut pred = Mlp::identity(3);
        let vars = pred.bind(&mut g, true);
        let pair = ViewPair::new(&g, z, z).unwrap();
        let l = simsiam_loss(&mut g, pair, &mut pred, &vars, Mode::Train).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn simsiam_target_branch_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let z1 = g.param(Tensor::randn(&[4, 3], &mut rng));
        let z2 = g.param(Tensor::randn(&[4, 3], &mut rng));
        // predictor applied only to z1; z2 appears only as a detached target
        let p1 = g.scale(z1, 2.0);
        let t2 = g.detach(z2);
        let l = neg_cosine(&mut g, p1, t2).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.has(z1));
        assert!(!grads.has(z2));
    }

    #[test]
    fn nt_xent_hand_value() {
        let mut g = Graph::new();
        let z1 = g.constant(rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let z2 = g.constant(rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let pair = ViewPair::new(&g, z1, z2).unwrap();
        let l = nt_xent(&mut g, pair, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(l).item() - ((e + 2.0) / e).ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_needs_negatives() {
        let mut g = Graph::new();
        let z = g.constant(rows(&[vec![1.0, 0.0]]));
        let pair = ViewPair::new(&g, z, z).unwrap();
        assert!(nt_xent(&mut g, pair, 0.5).is_err());
    }

    #[test]
    fn objective_dispatch_requires_predictor() {
        let mut g = Graph::new();
        let z = g.constant(rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let pair = ViewPair::new(&g, z, z).unwrap();
        assert!(SslObjective::SimSiam.loss(&mut g, pair, None).is_err());
        assert!(SslObjective::simclr().loss(&mut g, pair, None).is_ok());
    }
}
