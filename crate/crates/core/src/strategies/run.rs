use std::path::Path;
use std::time::Instant;

use super::{StrategyConfig, StrategyKind, Trainer};
use crate::autodiff::Tensor;
use crate::budget::{ledger_check, ledger_check_within, LedgerReport};
use crate::error::{Error, Result};
use crate::evaluation::{learner_features, probe_accuracy, AccuracyRecord, ProbeConfig};
use crate::networks::{NetworkSet, Optimizers, StateDict};
use crate::rng;
use crate::stream::{ClassIncrementalSplit, Dataset, IidSchedule, StreamPlan};

/// Inputs of the linear probe: the training split (probe fit) and the
/// stratified holdout (probe score).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    pub class_count: usize,
}

impl ProbeData {
    pub fn new(dataset: &Dataset, split: &ClassIncrementalSplit) -> Self {
        let train = split.train_indices();
        Self {
            train_x: dataset.rows(&train),
            train_y: dataset.labels_of(&train),
            test_x: dataset.rows(&split.holdout),
            test_y: dataset.labels_of(&split.holdout),
            class_count: dataset.class_count(),
        }
    }

    pub fn evaluate(&self, trainer: &Trainer, config: &ProbeConfig, seed: u64) -> Result<f64> {
        let theta = &trainer.nets().theta;
        let train = learner_features(theta, &self.train_x)?;
        let test = learner_features(theta, &self.test_x)?;
        probe_accuracy(
            &train,
            &self.train_y,
            &test,
            &self.test_y,
            self.class_count,
            config,
            seed,
        )
    }
}

/// Everything a run reads but never mutates.
#[derive(Clone, Copy, Debug)]
pub struct RunContext<'a> {
    pub dataset: &'a Dataset,
    pub plan: &'a StreamPlan,
    pub probe: &'a ProbeConfig,
    pub probe_data: &'a ProbeData,
    /// Fill `wall_ms`; zero otherwise so outputs stay byte-identical.
    pub record_wall_time: bool,
}

/// One training step of a run, with the probe accuracy on rows that close
/// an experience (or an i.i.d. checkpoint).
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub experience: usize,
    pub step: u64,
    pub cbp_so_far: u64,
    pub loss_total: f64,
    pub loss_ssl: f64,
    pub loss_reg: f64,
    pub probe_acc: Option<f64>,
    pub wall_ms: u64,
}

fn probe_seed(seed: u64, experience: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (experience as u64 + 1)
}

/// A stream run that can stop after any minibatch and resume from disk.
#[derive(Debug)]
pub struct RunSession {
    trainer: Trainer,
    seed: u64,
    experience: usize,
    offset: usize,
    record: AccuracyRecord,
    rows: Vec<TraceRow>,
    leaked: u64,
    final_probe_seed: Option<u64>,
    wall_offset_ms: u64,
    record_wall: bool,
    started: Instant,
}

impl RunSession {
    pub fn new(config: StrategyConfig, seed: u64, ctx: &RunContext<'_>) -> Result<Self> {
        if config.kind == StrategyKind::Iid {
            return Err(Error::Protocol(
                "an i.i.d. run has no stream session".into(),
            ));
        }
        if config.network.input_dim != ctx.dataset.dim() {
            return Err(Error::config(
                format!("{}.network.input_dim", config.label),
                format!(
                    "{} but the dataset has {} features",
                    config.network.input_dim,
                    ctx.dataset.dim()
                ),
            ));
        }
        if config.b_s != ctx.plan.b_s {
            return Err(Error::config(
                format!("{}.b_s", config.label),
                format!("{} but the stream delivers {}", config.b_s, ctx.plan.b_s),
            ));
        }
        Ok(Self {
            trainer: Trainer::new(config, seed, ctx.plan.boundaries_visible)?,
            seed,
            experience: 0,
            offset: 0,
            record: AccuracyRecord::default(),
            rows: Vec::new(),
            leaked: 0,
            final_probe_seed: None,
            wall_offset_ms: 0,
            record_wall: ctx.record_wall_time,
            started: Instant::now(),
        })
    }

    pub fn trainer(&self) -> &Trainer {
        &self.trainer
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn record(&self) -> &AccuracyRecord {
        &self.record
    }

    pub fn position(&self) -> (usize, usize) {
        (self.experience, self.offset)
    }

    fn wall_ms(&self, ctx: &RunContext<'_>) -> u64 {
        if ctx.record_wall_time || self.record_wall {
            self.wall_offset_ms + self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    /// Trains on the next minibatch; false once the stream is exhausted.
    pub fn advance(&mut self, ctx: &RunContext<'_>) -> Result<bool> {
        let mut cursor = ctx.plan.cursor();
        cursor.seek(self.experience, self.offset)?;
        let mb = match cursor.next_minibatch(ctx.dataset) {
            Ok(mb) => mb,
            Err(Error::EndOfStream) => return Ok(false),
            Err(e) => return Err(e),
        };
        let traces = self.trainer.observe(&mb.x)?;
        let wall = self.wall_ms(ctx);
        for t in &traces {
            self.leaked += t.leaked_target_grads as u64;
            self.rows.push(TraceRow {
                experience: mb.experience,
                step: t.step,
                cbp_so_far: t.cbp_so_far,
                loss_total: t.loss_total,
                loss_ssl: t.loss_ssl,
                loss_reg: t.loss_reg,
                probe_acc: None,
                wall_ms: wall,
            });
        }
        if mb.closes_experience {
            if self.trainer.config().kind.needs_boundaries() {
                if let Some(token) = cursor.boundary_token(&mb)? {
                    self.trainer.end_experience(token)?;
                }
            }
            let seed = probe_seed(self.seed, mb.experience);
            let acc = ctx.probe_data.evaluate(&self.trainer, ctx.probe, seed)?;
            self.record.push(acc)?;
            self.final_probe_seed = Some(seed);
            if let Some(last) = self.rows.last_mut() {
                last.probe_acc = Some(acc);
            }
        }
        (self.experience, self.offset) = cursor.position();
        Ok(true)
    }

    pub fn run_to_end(&mut self, ctx: &RunContext<'_>) -> Result<()> {
        while self.advance(ctx)? {}
        Ok(())
    }

    /// Verifies the budget ledger and packages the results.
    pub fn finish(self, ctx: &RunContext<'_>) -> Result<RunOutcome> {
        let mut cursor = ctx.plan.cursor();
        cursor.seek(self.experience, self.offset)?;
        if !cursor.is_exhausted() {
            return Err(Error::Protocol(format!(
                "run stopped at experience {} offset {} before the stream ended",
                self.experience, self.offset
            )));
        }
        let config = self.trainer.config().clone();
        let spec = config.budget_spec(ctx.plan.train_len())?;
        let ledger = ledger_check(self.trainer.ledger(), &spec)?;
        let (final_acc, avg_acc) = self.record.summary()?;
        Ok(RunOutcome {
            config,
            seed: self.seed,
            rows: self.rows,
            record: self.record,
            final_acc,
            avg_acc,
            ledger,
            leaked_target_grads: self.leaked,
            final_probe_seed: self.final_probe_seed.unwrap_or(0),
            trainer: self.trainer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut d = StateDict::new();
        let mut t = StateDict::new();
        self.trainer.write_state(&mut t);
        d.merge_prefixed("trainer", t);
        d.put_scalar("run.seed", self.seed);
        d.put_scalar("run.experience", self.experience as u64);
        d.put_scalar("run.offset", self.offset as u64);
        d.put_scalar("run.leaked", self.leaked);
        let wall = if self.record_wall {
            self.wall_offset_ms + self.started.elapsed().as_millis() as u64
        } else {
            0
        };
        d.put_scalar("run.wall_ms", wall);
        d.put_vec("run.acc", &self.record.per_experience);
        if let (Some(seed), Some(&acc)) = (self.final_probe_seed, self.record.per_experience.last())
        {
            d.put_scalar("run.final_probe_seed", seed);
            d.put_f64("run.final_acc", acc);
        }
        let col = |f: &dyn Fn(&TraceRow) -> f64| self.rows.iter().map(f).collect::<Vec<f64>>();
        d.put_vec("run.rows.experience", &col(&|r| r.experience as f64));
        d.put_vec("run.rows.step", &col(&|r| r.step as f64));
        d.put_vec("run.rows.cbp", &col(&|r| r.cbp_so_far as f64));
        d.put_vec("run.rows.loss_total", &col(&|r| r.loss_total));
        d.put_vec("run.rows.loss_ssl", &col(&|r| r.loss_ssl));
        d.put_vec("run.rows.loss_reg", &col(&|r| r.loss_reg));
        d.put_vec("run.rows.probe", &col(&|r| r.probe_acc.unwrap_or(f64::NAN)));
        d.put_vec("run.rows.wall_ms", &col(&|r| r.wall_ms as f64));
        d.save(path)
    }

    pub fn load(path: &Path, config: StrategyConfig) -> Result<Self> {
        let d = StateDict::load(path)?;
        let trainer = Trainer::read_state(config, &d.sub("trainer"))?;
        let columns = [
            "experience",
            "step",
            "cbp",
            "loss_total",
            "loss_ssl",
            "loss_reg",
            "probe",
            "wall_ms",
        ]
        .map(|c| d.vec(&format!("run.rows.{c}")));
        let mut cols = Vec::with_capacity(8);
        for c in columns {
            cols.push(c?);
        }
        let n = cols[0].len();
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::Format("trace columns differ in length".into()));
        }
        let rows = (0..n)
            .map(|i| TraceRow {
                experience: cols[0][i] as usize,
                step: cols[1][i] as u64,
                cbp_so_far: cols[2][i] as u64,
                loss_total: cols[3][i],
                loss_ssl: cols[4][i],
                loss_reg: cols[5][i],
                probe_acc: (!cols[6][i].is_nan()).then_some(cols[6][i]),
                wall_ms: cols[7][i] as u64,
            })
            .collect();
        let mut record = AccuracyRecord::default();
        for a in d.vec("run.acc")? {
            record.push(a)?;
        }
        Ok(Self {
            trainer,
            seed: d.scalar("run.seed")?,
            experience: d.scalar("run.experience")? as usize,
            offset: d.scalar("run.offset")? as usize,
            record,
            rows,
            leaked: d.scalar("run.leaked")?,
            final_probe_seed: if d.has_scalar("run.final_probe_seed") {
                Some(d.scalar("run.final_probe_seed")?)
            } else {
                None
            },
            wall_offset_ms: d.scalar("run.wall_ms")?,
            record_wall: d.scalar("run.wall_ms")? > 0,
            started: Instant::now(),
        })
    }
}

/// A finished stream run.
#[derive(Debug)]
pub struct RunOutcome {
    pub config: StrategyConfig,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    pub record: AccuracyRecord,
    pub final_acc: f64,
    pub avg_acc: f64,
    pub ledger: LedgerReport,
    pub leaked_target_grads: u64,
    /// Seed of the probe behind `final_acc`.
    pub final_probe_seed: u64,
    pub trainer: Trainer,
}

pub fn run_experiment(
    ctx: &RunContext<'_>,
    config: StrategyConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let mut s = RunSession::new(config, seed, ctx)?;
    s.run_to_end(ctx)?;
    s.finish(ctx)
}

/// Probe trajectory of an offline run, indexed by backward examples.
#[derive(Debug)]
pub struct IidOutcome {
    pub rows: Vec<TraceRow>,
    /// `(backward examples since the phase began, accuracy)`.
    pub curve: Vec<(u64, f64)>,
    pub ledger: LedgerReport,
    pub trainer: Trainer,
}

impl IidOutcome {
    pub fn final_acc(&self) -> Option<f64> {
        self.curve.last().map(|c| c.1)
    }
}

type Curve = Vec<(u64, f64)>;

/// Offline SSL on shuffled epochs of the training split until the next
/// step would exceed `budget` backward examples. Probes at `checkpoints`
/// evenly spaced steps (plus step zero when `probe_seed` pins a start probe).
fn iid_phase(
    trainer: &mut Trainer,
    ctx: &RunContext<'_>,
    seed: u64,
    budget: u64,
    checkpoints: usize,
    start_probe: Option<u64>,
) -> Result<(Vec<TraceRow>, Curve)> {
    let data = &ctx.probe_data.train_x;
    let b = trainer.config().batch_size();
    let per_step = trainer.config().objective.n_views() * b as u64;
    let steps = budget / per_step;
    let mut schedule = IidSchedule::new(data.rows(), b, None, rng::derive(seed, "iid"))?;
    let marks: Vec<u64> = (1..=checkpoints as u64)
        .map(|j| (steps * j).div_ceil(checkpoints as u64))
        .filter(|&m| m > 0)
        .collect();
    let start = trainer.ledger().backward_examples();
    let started = Instant::now();
    let mut rows = Vec::with_capacity(steps as usize);
    let mut curve = Vec::new();
    if let Some(ps) = start_probe {
        curve.push((0, ctx.probe_data.evaluate(trainer, ctx.probe, ps)?));
    }
    let mut segment = 0;
    for s in 1..=steps {
        let batch = schedule.next().expect("unbounded schedule");
        let t = trainer.train_iid_batch(&data.select_rows(&batch))?;
        let mut row = TraceRow {
            experience: segment,
            step: t.step,
            cbp_so_far: t.cbp_so_far,
            loss_total: t.loss_total,
            loss_ssl: t.loss_ssl,
            loss_reg: t.loss_reg,
            probe_acc: None,
            wall_ms: if ctx.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if marks.contains(&s) {
            let ps = start_probe.unwrap_or_else(|| probe_seed(seed, segment));
            let acc = ctx.probe_data.evaluate(trainer, ctx.probe, ps)?;
            row.probe_acc = Some(acc);
            curve.push((t.cbp_so_far - start, acc));
            segment += 1;
        }
        rows.push(row);
    }
    if curve.is_empty() && checkpoints > 0 {
        let ps = start_probe.unwrap_or_else(|| probe_seed(seed, 0));
        curve.push((0, ctx.probe_data.evaluate(trainer, ctx.probe, ps)?));
    }
    Ok((rows, curve))
}

/// The i.i.d. upper bound under a declared budget, with minibatch size
/// `config.batch_size()`.
pub fn run_iid(
    ctx: &RunContext<'_>,
    config: StrategyConfig,
    seed: u64,
    declared_cbp: u64,
    checkpoints: usize,
) -> Result<IidOutcome> {
    if config.kind != StrategyKind::Iid {
        return Err(Error::config(
            format!("{}.kind", config.label),
            "run_iid needs the iid kind",
        ));
    }
    let mut trainer = Trainer::new(config, seed, false)?;
    let (rows, curve) = iid_phase(&mut trainer, ctx, seed, declared_cbp, checkpoints, None)?;
    let granule = trainer.config().objective.n_views() * trainer.config().batch_size() as u64;
    let ledger = ledger_check_within(trainer.ledger(), declared_cbp, granule)?;
    Ok(IidOutcome {
        rows,
        curve,
        ledger,
        trainer,
    })
}

/// Extends trained networks with `additional_cbp` backward examples of
/// offline SSL. The first curve point re-probes the starting networks with
/// `probe_seed`.
#[allow(clippy::too_many_arguments)]
pub fn continue_iid_with(
    ctx: &RunContext<'_>,
    config: StrategyConfig,
    nets: NetworkSet,
    optim: Optimizers,
    seed: u64,
    additional_cbp: u64,
    checkpoints: usize,
    probe_seed: u64,
) -> Result<IidOutcome> {
    if config.kind != StrategyKind::Iid {
        return Err(Error::config(
            format!("{}.kind", config.label),
            "continue-iid needs the iid kind",
        ));
    }
    if nets.input_dim() != ctx.dataset.dim() {
        return Err(Error::config(
            "checkpoint",
            format!(
                "networks take {} features, the dataset has {}",
                nets.input_dim(),
                ctx.dataset.dim()
            ),
        ));
    }
    let mut trainer = Trainer::from_networks(config, nets, optim, seed)?;
    let (rows, curve) = iid_phase(
        &mut trainer,
        ctx,
        seed,
        additional_cbp,
        checkpoints,
        Some(probe_seed),
    )?;
    let granule = trainer.config().objective.n_views() * trainer.config().batch_size() as u64;
    let ledger = ledger_check_within(trainer.ledger(), additional_cbp, granule)?;
    Ok(IidOutcome {
        rows,
        curve,
        ledger,
        trainer,
    })
}

/// [`continue_iid_with`] from a finished run's checkpoint; the start probe
/// reuses the probe seed behind the recorded final accuracy.
pub fn continue_iid(
    ctx: &RunContext<'_>,
    checkpoint: &Path,
    config: StrategyConfig,
    seed: u64,
    additional_cbp: u64,
    checkpoints: usize,
) -> Result<IidOutcome> {
    let d = StateDict::load(checkpoint)?;
    if !d.has_scalar("run.final_probe_seed") {
        return Err(Error::Protocol(format!(
            "{} holds no finished experience to continue from",
            checkpoint.display()
        )));
    }
    let nets = NetworkSet::read_state(&d.sub("trainer.nets"))?;
    let optim = Optimizers::read_state(&d.sub("trainer.optim"))?;
    let probe_seed = d.scalar("run.final_probe_seed")?;
    continue_iid_with(
        ctx,
        config,
        nets,
        optim,
        seed,
        additional_cbp,
        checkpoints,
        probe_seed,
    )
}

/// Accuracy recorded in a run checkpoint.
pub fn recorded_final_accuracy(checkpoint: &Path) -> Result<f64> {
    StateDict::load(checkpoint)?.f64("run.final_acc")
}
