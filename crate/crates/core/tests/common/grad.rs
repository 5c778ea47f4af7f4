//! Central-difference oracle over every entry of every leaf, plus the named
//! op and composite checks used by the gradient suite and acceptance.

use cla_core::alignment::{
    cassle_reg, cla_b_reg, cla_e_reg, cla_r_reg, total_loss, AlignProj, ReplayRows,
};
use cla_core::autodiff::{Graph, NormStats, Tensor, Var};
use cla_core::networks::{
    snapshot_frozen, Learner, LearnerVars, Mlp, MlpVars, Mode, NetworkConfig,
};
use cla_core::ssl::{neg_cosine, nt_xent, simsiam_from_predictions, simsiam_loss, ViewPair};
use cla_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const TRIALS: usize = 100;
const FLOOR: f64 = 1e-3;
/// Trial points with a relu input closer than this to zero are resampled.
const KINK_MARGIN: f64 = 5e-3;
const MAX_ATTEMPTS: usize = 20 * TRIALS;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub trials: usize,
    pub resampled: usize,
    pub worst: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.trials >= TRIALS && self.worst < TOL
    }
}

type Build<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>;

/// One trial: leaves, the function differentiated on the tape, and the
/// function differenced numerically (they differ only where the tape
/// deliberately stops gradients).
pub struct Trial<'a> {
    pub leaves: Vec<Tensor>,
    pub tape: Build<'a>,
    pub numeric: Option<Build<'a>>,
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// `None` when the point sits too close to a relu kink or hits the
/// zero-norm guard of a normalization.
fn run_trial(t: &Trial<'_>) -> Option<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = t.leaves.iter().map(|l| g.param(l.clone())).collect();
    let loss = (t.tape)(&mut g, &vars).expect("tape build");
    if g.relu_margin() < KINK_MARGIN || g.degenerate_rows() > 0 {
        return None;
    }
    let grads = g.backward(loss).expect("backward");
    let numeric = t.numeric.as_ref().unwrap_or(&t.tape);
    let eval = |pts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = numeric(&mut g, &vars).expect("numeric build");
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    let mut pts = t.leaves.clone();
    for (k, leaf) in t.leaves.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        for i in 0..leaf.len() {
            let base = leaf.data()[i];
            let mut central = |h: f64| {
                pts[k].data_mut()[i] = base + h;
                let up = eval(&pts);
                pts[k].data_mut()[i] = base - h;
                let down = eval(&pts);
                pts[k].data_mut()[i] = base;
                (up - down) / (2.0 * h)
            };
            // Richardson step on two central differences: O(eps^4) truncation
            let (d1, d2) = (central(EPS), central(EPS / 2.0));
            let numeric = (4.0 * d2 - d1) / 3.0;
            worst = worst.max(rel(analytic.data()[i], numeric));
        }
    }
    Some(worst)
}

fn check<'a>(
    name: &'static str,
    trials: usize,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Trial<'a>,
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    }));
    let (mut done, mut resampled, mut worst) = (0, 0, 0.0f64);
    while done < trials && done + resampled < MAX_ATTEMPTS {
        match run_trial(&make(&mut rng)) {
            Some(w) => {
                worst = worst.max(w);
                done += 1;
            }
            None => resampled += 1,
        }
    }
    CheckReport {
        name,
        trials: done,
        resampled,
        worst,
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng)
}

/// `Σ w ⊙ y` with a fixed random weighting, so every output entry matters.
fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn trial<'a>(
    leaves: Vec<Tensor>,
    tape: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'a,
) -> Trial<'a> {
    Trial {
        leaves,
        tape: Box::new(tape),
        numeric: None,
    }
}

/// Checks of the individual tape operations.
pub fn op_checks(trials: usize) -> Vec<CheckReport> {
    let dims = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(2..6usize),
            rng.random_range(2..6usize),
            rng.random_range(2..6usize),
        )
    };
    vec![
        check("matmul", trials, |rng| {
            let (m, k, n) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(
                vec![randn(rng, &[m, k]), randn(rng, &[k, n])],
                move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    weighted(g, y, &w)
                },
            )
        }),
        check("matmul_t", trials, |rng| {
            let (m, k, n) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(
                vec![randn(rng, &[m, k]), randn(rng, &[n, k])],
                move |g, v| {
                    let y = g.matmul_t(v[0], v[1])?;
                    weighted(g, y, &w)
                },
            )
        }),
        check("add", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(
                vec![randn(rng, &[m, n]), randn(rng, &[m, n])],
                move |g, v| {
                    let y = g.add(v[0], v[1])?;
                    weighted(g, y, &w)
                },
            )
        }),
        check("sub", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(
                vec![randn(rng, &[m, n]), randn(rng, &[m, n])],
                move |g, v| {
                    let y = g.sub(v[0], v[1])?;
                    weighted(g, y, &w)
                },
            )
        }),
        check("mul", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(
                vec![randn(rng, &[m, n]), randn(rng, &[m, n])],
                move |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    weighted(g, y, &w)
                },
            )
        }),
        check("add_row_bias", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(vec![randn(rng, &[m, n]), randn(rng, &[n])], move |g, v| {
                let y = g.add_row_bias(v[0], v[1])?;
                weighted(g, y, &w)
            })
        }),
        check("scale", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            let c: f64 = rng.random_range(-3.0..3.0);
            trial(vec![randn(rng, &[m, n])], move |g, v| {
                let y = g.scale(v[0], c);
                weighted(g, y, &w)
            })
        }),
        check("relu", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(vec![randn(rng, &[m, n])], move |g, v| {
                let y = g.relu(v[0]);
                weighted(g, y, &w)
            })
        }),
        check("l2_normalize", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(vec![randn(rng, &[m, n])], move |g, v| {
                let y = g.l2_normalize(v[0]);
                weighted(g, y, &w)
            })
        }),
        check("batch_norm_batch_stats", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            let gamma = randn(rng, &[n]);
            trial(
                vec![randn(rng, &[m, n]), gamma, randn(rng, &[n])],
                move |g, v| {
                    let (y, _) = g.batch_norm(v[0], v[1], v[2], NormStats::Batch)?;
                    weighted(g, y, &w)
                },
            )
        }),
        check("batch_norm_running_stats", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
            trial(
                vec![randn(rng, &[m, n]), randn(rng, &[n]), randn(rng, &[n])],
                move |g, v| {
                    let (y, _) = g.batch_norm(
                        v[0],
                        v[1],
                        v[2],
                        NormStats::Running {
                            mean: &mean,
                            var: &var,
                        },
                    )?;
                    weighted(g, y, &w)
                },
            )
        }),
        check("sum", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(vec![randn(rng, &[m, n])], move |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let y = weighted(g, sq, &w)?;
                let s = g.sum(y);
                Ok(g.scale(s, 0.5))
            })
        }),
        check("mean", trials, |rng| {
            let (m, n, _) = dims(rng);
            let w = randn(rng, &[m, n]);
            trial(vec![randn(rng, &[m, n])], move |g, v| {
                let wv = g.constant(w.clone());
                let p = g.mul(v[0], wv)?;
                let sq = g.mul(p, v[0])?;
                Ok(g.mean(sq))
            })
        }),
        check("concat_rows", trials, |rng| {
            let (m, k, n) = dims(rng);
            let w = randn(rng, &[m + k, n]);
            trial(
                vec![randn(rng, &[m, n]), randn(rng, &[k, n])],
                move |g, v| {
                    let y = g.concat_rows(&[v[0], v[1]])?;
                    weighted(g, y, &w)
                },
            )
        }),
        check("slice_rows", trials, |rng| {
            let (m, n, _) = dims(rng);
            let start = rng.random_range(0..m);
            let end = rng.random_range(start + 1..=m);
            let w = randn(rng, &[end - start, n]);
            trial(vec![randn(rng, &[m, n])], move |g, v| {
                let y = g.slice_rows(v[0], start, end)?;
                weighted(g, y, &w)
            })
        }),
        check("softmax_cross_entropy", trials, |rng| {
            let (m, n, _) = dims(rng);
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            trial(vec![randn(rng, &[m, n])], move |g, v| {
                g.softmax_cross_entropy(v[0], &targets, false)
            })
        }),
        check("softmax_cross_entropy_masked", trials, |rng| {
            let n = rng.random_range(3..7usize);
            let targets: Vec<usize> = (0..n).map(|i| (i + rng.random_range(1..n)) % n).collect();
            trial(vec![randn(rng, &[n, n])], move |g, v| {
                g.softmax_cross_entropy(v[0], &targets, true)
            })
        }),
    ]
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        input_dim: 4,
        encoder_widths: vec![6, 5],
        projector_dim: 3,
        predictor_hidden: 4,
        align_hidden: 4,
    }
}

fn params_of(nets: &[&Mlp]) -> Vec<Tensor> {
    nets.iter()
        .flat_map(|m| m.params().into_iter().cloned())
        .collect()
}

/// Splits leaf vars into consecutive per-network groups.
fn split(vars: &[Var], nets: &[&Mlp]) -> Vec<MlpVars> {
    let mut at = 0;
    nets.iter()
        .map(|m| {
            let n = m.params().len();
            let out = MlpVars {
                params: vars[at..at + n].to_vec(),
            };
            at += n;
            out
        })
        .collect()
}

fn theta_z(g: &mut Graph, theta: &Learner, lv: &LearnerVars, x: &Tensor) -> Result<Var> {
    let xv = g.constant(x.clone());
    Ok(theta.forward_frozen(g, lv, xv, Mode::BatchStats)?.z)
}

struct Setup {
    theta: Learner,
    other: Learner,
    align: Mlp,
    pred: Mlp,
    x1: Tensor,
    x2: Tensor,
    xr1: Tensor,
    xr2: Tensor,
}

/// Moves every parameter (biases included) off its structured initial value.
fn jitter(params: Vec<&mut Tensor>, rng: &mut ChaCha8Rng) {
    for p in params {
        let noise = Tensor::randn(p.shape(), rng);
        for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * n;
        }
    }
}

fn setup(rng: &mut ChaCha8Rng) -> Setup {
    let cfg = tiny_config();
    let b = rng.random_range(3..6usize);
    let r = rng.random_range(2..5usize);
    let mut theta = Learner::new(&cfg, rng).unwrap();
    let mut other = Learner::new(&cfg, rng).unwrap();
    let mut align = Mlp::new(cfg.align_spec(), rng).unwrap();
    let mut pred = Mlp::new(cfg.predictor_spec(), rng).unwrap();
    jitter(theta.params_mut(), rng);
    jitter(other.params_mut(), rng);
    jitter(align.params_mut(), rng);
    jitter(pred.params_mut(), rng);
    Setup {
        theta,
        other,
        align,
        pred,
        x1: randn(rng, &[b, cfg.input_dim]),
        x2: randn(rng, &[b, cfg.input_dim]),
        xr1: randn(rng, &[r, cfg.input_dim]),
        xr2: randn(rng, &[r, cfg.input_dim]),
    }
}

fn lvars(vs: &[MlpVars]) -> LearnerVars {
    LearnerVars {
        encoder: vs[0].clone(),
        projector: vs[1].clone(),
    }
}

/// Composite losses, differentiated through the alignment projector and the
/// learner's encoder and projector.
pub fn composite_checks(trials: usize) -> Vec<CheckReport> {
    vec![
        check("mlp_forward", trials, |rng| {
            let s = setup(rng);
            let enc = s.theta.encoder.clone();
            let w = randn(rng, &[s.x1.rows(), 5]);
            let mut leaves = vec![s.x1.clone()];
            leaves.extend(params_of(&[&enc]));
            trial(leaves, move |g, v| {
                let vars = MlpVars {
                    params: v[1..].to_vec(),
                };
                let y = enc.forward_frozen(g, &vars, v[0], Mode::BatchStats)?;
                weighted(g, y, &w)
            })
        }),
        check("neg_cosine", trials, |rng| {
            let (m, n) = (rng.random_range(2..6usize), rng.random_range(2..6usize));
            let target = randn(rng, &[m, n]);
            trial(vec![randn(rng, &[m, n])], move |g, v| {
                let t = g.constant(target.clone());
                neg_cosine(g, v[0], t)
            })
        }),
        check("simsiam_loss_predictor", trials, |rng| {
            let s = setup(rng);
            let (b, f) = (s.x1.rows(), 3);
            let (z1, z2) = (randn(rng, &[b, f]), randn(rng, &[b, f]));
            let pred = s.pred.clone();
            let mut leaves = vec![z1.clone(), z2.clone()];
            leaves.extend(params_of(&[&pred]));
            let p2 = pred.clone();
            Trial {
                leaves,
                tape: Box::new(move |g, v| {
                    let mut h = pred.clone();
                    let vars = MlpVars {
                        params: v[2..].to_vec(),
                    };
                    simsiam_loss(
                        g,
                        ViewPair::new(g, v[0], v[1])?,
                        &mut h,
                        &vars,
                        Mode::BatchStats,
                    )
                }),
                // targets held at the unperturbed z: the stop-gradient branch
                numeric: Some(Box::new(move |g, v| {
                    let vars = MlpVars {
                        params: v[2..].to_vec(),
                    };
                    let q1 = p2.forward_frozen(g, &vars, v[0], Mode::BatchStats)?;
                    let q2 = p2.forward_frozen(g, &vars, v[1], Mode::BatchStats)?;
                    let t1 = g.constant(z1.clone());
                    let t2 = g.constant(z2.clone());
                    simsiam_from_predictions(g, q1, q2, ViewPair::new(g, t1, t2)?)
                })),
            }
        }),
        check("simsiam_through_theta", trials, |rng| {
            let s = setup(rng);
            let theta = s.theta.clone();
            let nets = [&s.theta.encoder, &s.theta.projector, &s.pred];
            let leaves = params_of(&nets);
            let (t, x1, x2, pred) = (theta.clone(), s.x1.clone(), s.x2.clone(), s.pred.clone());
            let (n_theta, n_x1, n_x2, n_pred) =
                (theta.clone(), s.x1.clone(), s.x2.clone(), s.pred.clone());
            let counts: Vec<Mlp> = nets.iter().map(|m| (*m).clone()).collect();
            let counts2 = counts.clone();
            Trial {
                leaves,
                tape: Box::new(move |g, v| {
                    let refs: Vec<&Mlp> = counts.iter().collect();
                    let vs = split(v, &refs);
                    let lv = lvars(&vs);
                    let z1 = theta_z(g, &t, &lv, &x1)?;
                    let z2 = theta_z(g, &t, &lv, &x2)?;
                    let mut h = pred.clone();
                    simsiam_loss(
                        g,
                        ViewPair::new(g, z1, z2)?,
                        &mut h,
                        &vs[2],
                        Mode::BatchStats,
                    )
                }),
                numeric: Some(Box::new(move |g, v| {
                    let refs: Vec<&Mlp> = counts2.iter().collect();
                    let vs = split(v, &refs);
                    let lv = lvars(&vs);
                    let z1 = theta_z(g, &n_theta, &lv, &n_x1)?;
                    let z2 = theta_z(g, &n_theta, &lv, &n_x2)?;
                    let q1 = n_pred.forward_frozen(g, &vs[2], z1, Mode::BatchStats)?;
                    let q2 = n_pred.forward_frozen(g, &vs[2], z2, Mode::BatchStats)?;
                    let x1c = g.constant(n_x1.clone());
                    let x2c = g.constant(n_x2.clone());
                    let t1 = n_theta.target(g, x1c)?;
                    let t2 = n_theta.target(g, x2c)?;
                    simsiam_from_predictions(g, q1, q2, ViewPair::new(g, t1, t2)?)
                })),
            }
        }),
        check("nt_xent", trials, |rng| {
            let (b, f) = (rng.random_range(2..6usize), rng.random_range(2..6usize));
            let tau: f64 = rng.random_range(0.1..1.0);
            trial(
                vec![randn(rng, &[b, f]), randn(rng, &[b, f])],
                move |g, v| nt_xent(g, ViewPair::new(g, v[0], v[1])?, tau),
            )
        }),
        check("nt_xent_through_theta", trials, |rng| {
            let s = setup(rng);
            let nets: Vec<Mlp> = vec![s.theta.encoder.clone(), s.theta.projector.clone()];
            let leaves = params_of(&nets.iter().collect::<Vec<_>>());
            let (theta, x1, x2) = (s.theta.clone(), s.x1.clone(), s.x2.clone());
            trial(leaves, move |g, v| {
                let vs = split(v, &nets.iter().collect::<Vec<_>>());
                let lv = lvars(&vs);
                let z1 = theta_z(g, &theta, &lv, &x1)?;
                let z2 = theta_z(g, &theta, &lv, &x2)?;
                nt_xent(g, ViewPair::new(g, z1, z2)?, 0.5)
            })
        }),
        check("cla_b_reg", trials, |rng| {
            let s = setup(rng);
            let nets: Vec<Mlp> = vec![
                s.theta.encoder.clone(),
                s.theta.projector.clone(),
                s.align.clone(),
            ];
            let leaves = params_of(&nets.iter().collect::<Vec<_>>());
            let (theta, ema, x1, x2, align) = (
                s.theta.clone(),
                s.other.clone(),
                s.x1.clone(),
                s.x2.clone(),
                s.align.clone(),
            );
            trial(leaves, move |g, v| {
                let vs = split(v, &nets.iter().collect::<Vec<_>>());
                let lv = lvars(&vs);
                let z1 = theta_z(g, &theta, &lv, &x1)?;
                let z2 = theta_z(g, &theta, &lv, &x2)?;
                let (x1c, x2c) = (g.constant(x1.clone()), g.constant(x2.clone()));
                let a = AlignProj {
                    net: &align,
                    vars: &vs[2],
                };
                Ok(cla_b_reg(g, z1, z2, a, Some(&ema), x1c, x2c)?.value)
            })
        }),
        check("cla_e_reg", trials, |rng| {
            let s = setup(rng);
            let nets: Vec<Mlp> = vec![
                s.theta.encoder.clone(),
                s.theta.projector.clone(),
                s.align.clone(),
            ];
            let leaves = params_of(&nets.iter().collect::<Vec<_>>());
            let (theta, ema, align) = (s.theta.clone(), s.other.clone(), s.align.clone());
            let (x1, x2, xr1, xr2) = (s.x1.clone(), s.x2.clone(), s.xr1.clone(), s.xr2.clone());
            trial(leaves, move |g, v| {
                let vs = split(v, &nets.iter().collect::<Vec<_>>());
                let lv = lvars(&vs);
                // stream and replay rows share one forward, as in training
                let b = x1.rows();
                let all1 = Tensor::concat_rows(&[&x1, &xr1])?;
                let all2 = Tensor::concat_rows(&[&x2, &xr2])?;
                let z1 = theta_z(g, &theta, &lv, &all1)?;
                let z2 = theta_z(g, &theta, &lv, &all2)?;
                let n = all1.rows();
                let zr1 = g.slice_rows(z1, b, n)?;
                let zr2 = g.slice_rows(z2, b, n)?;
                let (xr1c, xr2c) = (g.constant(xr1.clone()), g.constant(xr2.clone()));
                let replay = ReplayRows {
                    z1: zr1,
                    z2: zr2,
                    x1: xr1c,
                    x2: xr2c,
                };
                let a = AlignProj {
                    net: &align,
                    vars: &vs[2],
                };
                Ok(cla_e_reg(g, Some(replay), a, Some(&ema))?.value)
            })
        }),
        check("cla_r_reg", trials, |rng| {
            let s = setup(rng);
            let nets: Vec<Mlp> = vec![
                s.theta.encoder.clone(),
                s.theta.projector.clone(),
                s.align.clone(),
            ];
            let leaves = params_of(&nets.iter().collect::<Vec<_>>());
            let z_star = randn(rng, &[s.xr1.rows(), 3]);
            let (theta, align, xr1, xr2) = (
                s.theta.clone(),
                s.align.clone(),
                s.xr1.clone(),
                s.xr2.clone(),
            );
            trial(leaves, move |g, v| {
                let vs = split(v, &nets.iter().collect::<Vec<_>>());
                let lv = lvars(&vs);
                let z1 = theta_z(g, &theta, &lv, &xr1)?;
                let z2 = theta_z(g, &theta, &lv, &xr2)?;
                let zs = g.constant(z_star.clone());
                let a = AlignProj {
                    net: &align,
                    vars: &vs[2],
                };
                Ok(cla_r_reg(g, z1, z2, a, zs)?.value)
            })
        }),
        check("cassle_reg_simsiam", trials, |rng| {
            let s = setup(rng);
            let nets: Vec<Mlp> = vec![
                s.theta.encoder.clone(),
                s.theta.projector.clone(),
                s.align.clone(),
            ];
            let leaves = params_of(&nets.iter().collect::<Vec<_>>());
            let frozen = snapshot_frozen(&s.other, true).unwrap();
            let (theta, align, x1, x2) =
                (s.theta.clone(), s.align.clone(), s.x1.clone(), s.x2.clone());
            trial(leaves, move |g, v| {
                let vs = split(v, &nets.iter().collect::<Vec<_>>());
                let lv = lvars(&vs);
                let z1 = theta_z(g, &theta, &lv, &x1)?;
                let z2 = theta_z(g, &theta, &lv, &x2)?;
                let (x1c, x2c) = (g.constant(x1.clone()), g.constant(x2.clone()));
                let a = AlignProj {
                    net: &align,
                    vars: &vs[2],
                };
                Ok(cassle_reg(
                    g,
                    z1,
                    z2,
                    x1c,
                    x2c,
                    a,
                    Some(&frozen),
                    cla_core::ssl::SslObjective::SimSiam,
                )?
                .value)
            })
        }),
        check("cassle_reg_simclr", trials, |rng| {
            let s = setup(rng);
            let nets: Vec<Mlp> = vec![
                s.theta.encoder.clone(),
                s.theta.projector.clone(),
                s.align.clone(),
            ];
            let leaves = params_of(&nets.iter().collect::<Vec<_>>());
            let frozen = snapshot_frozen(&s.other, true).unwrap();
            let (theta, align, x1, x2) =
                (s.theta.clone(), s.align.clone(), s.x1.clone(), s.x2.clone());
            trial(leaves, move |g, v| {
                let vs = split(v, &nets.iter().collect::<Vec<_>>());
                let lv = lvars(&vs);
                let z1 = theta_z(g, &theta, &lv, &x1)?;
                let z2 = theta_z(g, &theta, &lv, &x2)?;
                let (x1c, x2c) = (g.constant(x1.clone()), g.constant(x2.clone()));
                let a = AlignProj {
                    net: &align,
                    vars: &vs[2],
                };
                Ok(cassle_reg(
                    g,
                    z1,
                    z2,
                    x1c,
                    x2c,
                    a,
                    Some(&frozen),
                    cla_core::ssl::SslObjective::simclr(),
                )?
                .value)
            })
        }),
        check("total_loss_simclr_cla_e", trials, |rng| {
            let s = setup(rng);
            let nets: Vec<Mlp> = vec![
                s.theta.encoder.clone(),
                s.theta.projector.clone(),
                s.align.clone(),
            ];
            let leaves = params_of(&nets.iter().collect::<Vec<_>>());
            let omega: f64 = rng.random_range(0.1..2.0);
            let (theta, ema, align) = (s.theta.clone(), s.other.clone(), s.align.clone());
            let (x1, x2, xr1, xr2) = (s.x1.clone(), s.x2.clone(), s.xr1.clone(), s.xr2.clone());
            trial(leaves, move |g, v| {
                let vs = split(v, &nets.iter().collect::<Vec<_>>());
                let lv = lvars(&vs);
                let all1 = Tensor::concat_rows(&[&x1, &xr1])?;
                let all2 = Tensor::concat_rows(&[&x2, &xr2])?;
                let z1 = theta_z(g, &theta, &lv, &all1)?;
                let z2 = theta_z(g, &theta, &lv, &all2)?;
                let ssl = nt_xent(g, ViewPair::new(g, z1, z2)?, 0.5)?;
                let (b, n) = (x1.rows(), all1.rows());
                let zr1 = g.slice_rows(z1, b, n)?;
                let zr2 = g.slice_rows(z2, b, n)?;
                let (xr1c, xr2c) = (g.constant(xr1.clone()), g.constant(xr2.clone()));
                let replay = ReplayRows {
                    z1: zr1,
                    z2: zr2,
                    x1: xr1c,
                    x2: xr2c,
                };
                let a = AlignProj {
                    net: &align,
                    vars: &vs[2],
                };
                let reg = cla_e_reg(g, Some(replay), a, Some(&ema))?;
                total_loss(g, ssl, reg.value, omega)
            })
        }),
    ]
}
