use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use super::{StrategyConfig, StrategyKind};
use crate::alignment::{
    cassle_reg, cla_b_reg, cla_e_reg, cla_r_reg, total_loss, AlignProj, AlignmentVariant, RegTerm,
    ReplayRows,
};
use crate::autodiff::{Graph, Tensor};
use crate::budget::BudgetLedger;
use crate::error::{Error, Result};
use crate::networks::{
    ema_update, sgd_step, snapshot_frozen, Mode, NetworkSet, Optimizers, StateDict,
};
use crate::replay::{Buffer, Handle};
use crate::rng::{self, Rng};
use crate::ssl::ViewPair;
use crate::stream::{make_views, BoundaryToken};

/// Loss components and budget position after one training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub loss_total: f64,
    pub loss_ssl: f64,
    pub loss_reg: f64,
    pub reg_active: bool,
    /// Samples that entered backward (per view).
    pub rows: usize,
    pub cbp_so_far: u64,
    /// Target-side tensors that received a gradient or changed during the
    /// optimizer step; always zero unless the stop-gradient contract breaks.
    pub leaked_target_grads: usize,
}

struct PassOutput {
    trace: StepTrace,
    z1: Tensor,
    z2: Tensor,
    handles: Vec<Handle>,
}

/// Drives one strategy over a stream. Strategies see raw minibatches only;
/// boundary events arrive through [`BoundaryToken`]s, which hidden-boundary
/// streams never produce.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: StrategyConfig,
    nets: NetworkSet,
    optim: Optimizers,
    buffer: Option<Buffer>,
    rng: Rng,
    ledger: BudgetLedger,
    step: u64,
    boundaries_visible: bool,
}

impl Trainer {
    pub fn new(config: StrategyConfig, seed: u64, boundaries_visible: bool) -> Result<Self> {
        config.validate()?;
        let mut init = rng::derive(seed, "init");
        let variant = config.kind.alignment_variant();
        let nets = NetworkSet::new(
            &config.network,
            config.objective.needs_predictor(),
            variant.needs_ema(),
            &mut init,
        )?;
        Self::assemble(config, nets, seed, boundaries_visible)
    }

    /// A trainer around existing networks and optimizer state.
    pub fn from_networks(
        config: StrategyConfig,
        nets: NetworkSet,
        optim: Optimizers,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        check_networks(&config, &nets)?;
        let mut t = Self::assemble(config, nets, seed, false)?;
        t.optim = optim;
        Ok(t)
    }

    fn assemble(
        config: StrategyConfig,
        mut nets: NetworkSet,
        seed: u64,
        boundaries_visible: bool,
    ) -> Result<Self> {
        if config.kind.needs_boundaries() && !boundaries_visible {
            return Err(Error::Protocol(format!(
                "{} needs task boundaries, but the stream hides them",
                config.kind.name()
            )));
        }
        if config.kind.alignment_variant().needs_ema() && nets.ema_theta.is_none() {
            nets.ema_theta = Some(nets.theta.clone());
        }
        let buffer = if config.kind.uses_buffer() {
            Some(Buffer::new(
                config.buffer_capacity,
                config.buffer_policy,
                config.kind == StrategyKind::ClaR,
                rng::derive(seed, "buffer"),
            )?)
        } else {
            None
        };
        Ok(Self {
            optim: Optimizers::new(config.learning_rate, config.momentum, config.weight_decay)?,
            config,
            nets,
            buffer,
            rng: rng::derive(seed, "trainer"),
            ledger: BudgetLedger::new(),
            step: 0,
            boundaries_visible,
        })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn nets(&self) -> &NetworkSet {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut NetworkSet {
        &mut self.nets
    }

    pub fn optimizers(&self) -> &Optimizers {
        &self.optim
    }

    pub fn optimizers_mut(&mut self) -> &mut Optimizers {
        &mut self.optim
    }

    pub fn buffer(&self) -> Option<&Buffer> {
        self.buffer.as_ref()
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn into_parts(self) -> (NetworkSet, Optimizers) {
        (self.nets, self.optim)
    }

    /// Replay rows for a stream minibatch of `rows` samples. A short final
    /// minibatch gets proportionally fewer, keeping `b/b_s` fixed.
    fn replay_rows(&self, rows: usize) -> usize {
        if !self.config.kind.replays_rows() {
            return 0;
        }
        let (b_s, b_r) = (self.config.b_s, self.config.b_r);
        if rows == b_s {
            b_r
        } else {
            (rows * (b_s + b_r) + b_s / 2) / b_s - rows
        }
    }

    /// Trains on one stream minibatch: `n_p` passes, then the buffer update
    /// with the last pass's features.
    pub fn observe(&mut self, x: &Tensor) -> Result<Vec<StepTrace>> {
        if self.config.kind == StrategyKind::Iid {
            return Err(Error::Protocol(
                "the i.i.d. trainer does not consume a stream".into(),
            ));
        }
        let x = x.as_matrix();
        self.check_input(&x)?;
        let rows_s = x.rows();
        let replay = self.replay_rows(rows_s);
        let mut traces = Vec::with_capacity(self.config.n_p);
        let mut last = None;
        for _ in 0..self.config.n_p {
            let out = self.pass(&x, replay)?;
            traces.push(out.trace.clone());
            last = Some(out);
        }
        let last = last.expect("n_p is positive");
        if let Some(buf) = &mut self.buffer {
            let stored = if buf.stores_features() {
                let a = last.z1.slice_rows(0, rows_s);
                let b = last.z2.slice_rows(0, rows_s);
                Some(a.zip_map(&b, |p, q| 0.5 * (p + q))?)
            } else {
                None
            };
            buf.insert_batch(&x, stored.as_ref())?;
            if self.config.kind == StrategyKind::ClaR && !last.handles.is_empty() {
                let end = last.z1.rows();
                let zr1 = last.z1.slice_rows(rows_s, end);
                let zr2 = last.z2.slice_rows(rows_s, end);
                buf.update_features(&last.handles, &zr1, &zr2)?;
            }
        }
        Ok(traces)
    }

    /// One plain SSL step on an i.i.d. batch.
    pub fn train_iid_batch(&mut self, x: &Tensor) -> Result<StepTrace> {
        if self.config.kind != StrategyKind::Iid {
            return Err(Error::Protocol(format!(
                "{} trains on a stream",
                self.config.kind.name()
            )));
        }
        let x = x.as_matrix();
        self.check_input(&x)?;
        Ok(self.pass(&x, 0)?.trace)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.nets.input_dim() {
            return Err(Error::shape(
                "trainer input",
                format!(
                    "width {}, networks expect {}",
                    x.cols(),
                    self.nets.input_dim()
                ),
            ));
        }
        if x.rows() < 2 {
            return Err(Error::InvalidArgument(
                "a training minibatch needs at least 2 samples".into(),
            ));
        }
        Ok(())
    }

    /// Snapshot at a visible boundary (CaSSLe variants only).
    pub fn end_experience(&mut self, token: BoundaryToken) -> Result<()> {
        if !self.config.kind.needs_boundaries() {
            return Err(Error::Protocol(format!(
                "{} does not consume task boundaries (experience {})",
                self.config.kind.name(),
                token.experience
            )));
        }
        self.nets.frozen_theta = Some(snapshot_frozen(&self.nets.theta, self.boundaries_visible)?);
        Ok(())
    }

    fn pass(&mut self, x: &Tensor, replay_rows: usize) -> Result<PassOutput> {
        let rows_s = x.rows();
        let kind = self.config.kind;
        let mut handles = Vec::new();
        let mut z_star = None;
        let mut replay_real = false;
        let inputs = if kind.replays_rows() {
            let buf = self
                .buffer
                .as_mut()
                .expect("replay strategies own a buffer");
            match buf.sample(replay_rows) {
                Some(s) => {
                    handles = s.handles;
                    z_star = s.features;
                    replay_real = true;
                    Tensor::concat_rows(&[x, &s.samples])?
                }
                None if replay_rows > 0 => {
                    // empty buffer: keep the batch shape with stream rows
                    let pad: Vec<usize> = (0..replay_rows)
                        .map(|_| self.rng.random_range(0..rows_s))
                        .collect();
                    Tensor::concat_rows(&[x, &x.select_rows(&pad)])?
                }
                None => x.clone(),
            }
        } else if kind == StrategyKind::Lump {
            let buf = self.buffer.as_mut().expect("lump owns a buffer");
            match buf.sample(rows_s) {
                Some(s) => {
                    let lambda = match self.config.lump_lambda {
                        Some(l) => l,
                        None => Beta::new(self.config.lump_alpha, self.config.lump_alpha)
                            .map_err(|e| Error::InvalidArgument(format!("lump alpha: {e}")))?
                            .sample(&mut self.rng),
                    };
                    x.zip_map(&s.samples, |a, b| lambda * a + (1.0 - lambda) * b)?
                }
                None => x.clone(),
            }
        } else {
            x.clone()
        };
        let total_rows = inputs.rows();
        let (x1, x2) = make_views(&inputs, &self.config.augmentation, &mut self.rng);

        let mut g = Graph::new();
        let NetworkSet {
            theta,
            predictor,
            align_proj,
            ema_theta,
            frozen_theta,
        } = &mut self.nets;
        let theta_vars = theta.bind(&mut g, true);
        let x1v = g.constant(x1);
        let x2v = g.constant(x2);
        let o1 = theta.forward(&mut g, &theta_vars, x1v, Mode::Train)?;
        let o2 = theta.forward(&mut g, &theta_vars, x2v, Mode::Train)?;
        let pair = ViewPair::new(&g, o1.z, o2.z)?;
        let pred_vars = predictor.as_ref().map(|p| p.bind(&mut g, true));
        let ssl = match (predictor.as_mut(), pred_vars.as_ref()) {
            (Some(p), Some(v)) => self.config.objective.loss(&mut g, pair, Some((p, v)))?,
            _ => self.config.objective.loss(&mut g, pair, None)?,
        };

        let variant = kind.alignment_variant();
        let align_vars = (variant != AlignmentVariant::None).then(|| align_proj.bind(&mut g, true));
        let reg = match align_vars.as_ref() {
            None => RegTerm::inactive(&mut g),
            Some(av) => {
                let a = AlignProj {
                    net: align_proj,
                    vars: av,
                };
                let replay_slices = |g: &mut Graph| -> Result<ReplayRows> {
                    Ok(ReplayRows {
                        z1: g.slice_rows(o1.z, rows_s, total_rows)?,
                        z2: g.slice_rows(o2.z, rows_s, total_rows)?,
                        x1: g.slice_rows(x1v, rows_s, total_rows)?,
                        x2: g.slice_rows(x2v, rows_s, total_rows)?,
                    })
                };
                match variant {
                    AlignmentVariant::None => unreachable!(),
                    AlignmentVariant::ClaB => {
                        let ema = ema_theta.as_mut().expect("EMA twin present");
                        ema_update(theta, ema, self.config.tau)?;
                        cla_b_reg(&mut g, o1.z, o2.z, a, Some(&*ema), x1v, x2v)?
                    }
                    AlignmentVariant::ClaE => {
                        let ema = ema_theta.as_mut().expect("EMA twin present");
                        ema_update(theta, ema, self.config.tau)?;
                        let rows = if replay_real {
                            Some(replay_slices(&mut g)?)
                        } else {
                            None
                        };
                        cla_e_reg(&mut g, rows, a, Some(&*ema))?
                    }
                    AlignmentVariant::ClaR => match (&z_star, replay_real) {
                        (Some(zs), true) => {
                            let r = replay_slices(&mut g)?;
                            let zs = g.constant(zs.clone());
                            cla_r_reg(&mut g, r.z1, r.z2, a, zs)?
                        }
                        _ => RegTerm::inactive(&mut g),
                    },
                    AlignmentVariant::Cassle => cassle_reg(
                        &mut g,
                        o1.z,
                        o2.z,
                        x1v,
                        x2v,
                        a,
                        frozen_theta.as_ref(),
                        self.config.objective,
                    )?,
                    AlignmentVariant::CassleR => {
                        if replay_real {
                            let r = replay_slices(&mut g)?;
                            cassle_reg(
                                &mut g,
                                r.z1,
                                r.z2,
                                r.x1,
                                r.x2,
                                a,
                                frozen_theta.as_ref(),
                                self.config.objective,
                            )?
                        } else {
                            RegTerm::inactive(&mut g)
                        }
                    }
                }
            }
        };

        let total = total_loss(&mut g, ssl, reg.value, self.config.omega)?;
        let (loss_total, loss_ssl, loss_reg) = (
            g.value(total).item(),
            g.value(ssl).item(),
            g.value(reg.value).item(),
        );
        if !(loss_total.is_finite() && loss_ssl.is_finite() && loss_reg.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite loss at step {} (ssl {loss_ssl}, reg {loss_reg})",
                self.step
            )));
        }
        let grads = g.backward(total)?;
        let mut leaked = reg.targets.iter().filter(|t| grads.has(**t)).count();
        let ema_before = ema_theta.clone();
        let frozen_before = frozen_theta.clone();

        let theta_grads: Vec<Option<&Tensor>> = theta_vars.all().map(|v| grads.get(v)).collect();
        sgd_step(&mut theta.params_mut(), &theta_grads, &mut self.optim.theta)?;
        if let (Some(p), Some(v)) = (predictor.as_mut(), pred_vars.as_ref()) {
            let pg: Vec<Option<&Tensor>> = v.params.iter().map(|&v| grads.get(v)).collect();
            sgd_step(&mut p.params_mut(), &pg, &mut self.optim.predictor)?;
        }
        if let Some(av) = align_vars.as_ref() {
            let ag: Vec<Option<&Tensor>> = av.params.iter().map(|&v| grads.get(v)).collect();
            if reg.active && ag.iter().all(Option::is_some) {
                sgd_step(
                    &mut align_proj.params_mut(),
                    &ag,
                    &mut self.optim.align_proj,
                )?;
            }
        }
        if ema_before != *ema_theta {
            leaked += 1;
        }
        if frozen_before != *frozen_theta {
            leaked += 1;
        }

        self.ledger
            .record(self.config.objective.n_views(), total_rows as u64);
        self.step += 1;
        Ok(PassOutput {
            trace: StepTrace {
                step: self.step,
                loss_total,
                loss_ssl,
                loss_reg,
                reg_active: reg.active,
                rows: total_rows,
                cbp_so_far: self.ledger.backward_examples(),
                leaked_target_grads: leaked,
            },
            z1: g.value(o1.z).clone(),
            z2: g.value(o2.z).clone(),
            handles,
        })
    }

    pub fn write_state(&self, d: &mut StateDict) {
        let mut n = StateDict::new();
        self.nets.write_state(&mut n);
        d.merge_prefixed("nets", n);
        let mut o = StateDict::new();
        self.optim.write_state(&mut o);
        d.merge_prefixed("optim", o);
        if let Some(b) = &self.buffer {
            let mut s = StateDict::new();
            b.write_state(&mut s);
            d.merge_prefixed("buffer", s);
        }
        rng::write_state(&self.rng, d, "rng");
        d.put_scalar("ledger.examples", self.ledger.backward_examples());
        d.put_scalar("ledger.calls", self.ledger.backward_calls());
        d.put_scalar("step", self.step);
        d.put_scalar("boundaries_visible", u64::from(self.boundaries_visible));
        d.put_scalar(
            "kind",
            StrategyKind::STREAMING
                .iter()
                .position(|k| *k == self.config.kind)
                .unwrap_or(8) as u64,
        );
    }

    /// Restores a trainer saved by [`Trainer::write_state`] under `config`.
    pub fn read_state(config: StrategyConfig, d: &StateDict) -> Result<Self> {
        config.validate()?;
        let kind = d.scalar("kind")? as usize;
        let saved = StrategyKind::STREAMING
            .get(kind)
            .copied()
            .unwrap_or(StrategyKind::Iid);
        if saved != config.kind {
            return Err(Error::config(
                "strategy",
                format!(
                    "checkpoint holds {}, config asks for {}",
                    saved.name(),
                    config.kind.name()
                ),
            ));
        }
        let nets = NetworkSet::read_state(&d.sub("nets"))?;
        let optim = Optimizers::read_state(&d.sub("optim"))?;
        check_networks(&config, &nets)?;
        let visible = d.scalar("boundaries_visible")? == 1;
        let mut t = Self::assemble(config, nets, 0, visible)?;
        t.optim = optim;
        t.buffer = if t.config.kind.uses_buffer() {
            Some(Buffer::read_state(&d.sub("buffer"))?)
        } else {
            None
        };
        t.rng = rng::read_state(d, "rng")?;
        t.ledger =
            BudgetLedger::from_counts(d.scalar("ledger.examples")?, d.scalar("ledger.calls")?);
        t.step = d.scalar("step")?;
        Ok(t)
    }
}

fn check_networks(config: &StrategyConfig, nets: &NetworkSet) -> Result<()> {
    if *nets.theta.encoder.spec() != config.network.encoder_spec()
        || *nets.theta.projector.spec() != config.network.projector_spec()
    {
        return Err(Error::config(
            "network",
            format!(
                "networks map {} -> {}, config expects {} -> {}",
                nets.input_dim(),
                nets.feature_dim(),
                config.network.input_dim,
                config.network.projector_dim
            ),
        ));
    }
    if config.objective.needs_predictor() && nets.predictor.is_none() {
        return Err(Error::config(
            "objective",
            "networks carry no predictor head",
        ));
    }
    Ok(())
}
