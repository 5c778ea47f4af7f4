//! Experiment manifests, budget presets, multi-seed orchestration and the
//! CSV artifacts of a run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::{assert_parity, cbp, iid_epochs, Composition, ParityReport};
use crate::error::{Error, Result};
use crate::evaluation::ProbeConfig;
use crate::networks::{NetworkConfig, NetworkSet, StateDict};
use crate::par::{map_ordered, Execution};
use crate::replay::BufferPolicy;
use crate::ssl::SslObjective;
use crate::strategies::{
    continue_iid, run_iid, ProbeData, RunContext, RunSession, StrategyConfig, StrategyKind,
    TraceRow,
};
use crate::stream::{
    split_class_incremental, AugmentationPolicy, ClassIncrementalSplit, Dataset, DatasetSource,
    StreamPlan,
};

/// Relative output directories resolve against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "CLA_OUTPUT_ROOT";

pub const RUN_COLUMNS: [&str; 12] = [
    "run_id",
    "seed",
    "strategy",
    "ssl_objective",
    "experience_idx",
    "step",
    "cbp_so_far",
    "loss_total",
    "loss_ssl",
    "loss_reg",
    "probe_acc_after_experience",
    "wall_ms",
];

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "strategy",
    "ssl_objective",
    "runs",
    "final_acc_mean",
    "final_acc_std",
    "avg_acc_mean",
    "avg_acc_std",
    "cbp_declared",
    "cbp_counted",
    "iid_epochs",
];

pub const CURVE_COLUMNS: [&str; 6] = ["strategy", "point", "cbp", "acc_mean", "acc_std", "runs"];

/// Named budget regimes. `low_cbp` and `high_cbp` fix `(b_r, n_p)` per
/// strategy; `custom` takes them from each entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    LowCbp,
    HighCbp,
    #[default]
    Custom,
}

impl Preset {
    /// `(b_r, n_p)` of a strategy under the preset.
    pub fn shape(self, kind: StrategyKind) -> Option<(usize, usize)> {
        let limited = kind.composition() == Composition::Stream;
        match self {
            Preset::Custom => None,
            Preset::HighCbp => Some(if limited { (0, 3) } else { (128, 3) }),
            Preset::LowCbp => Some(if limited { (0, 3) } else { (20, 1) }),
        }
    }

    /// `(learning rate, ω)` selected for the desk-scale benchmark.
    pub fn tuned(self, kind: StrategyKind) -> Option<(f64, f64)> {
        if self != Preset::HighCbp {
            return None;
        }
        match kind {
            StrategyKind::Finetune => Some((0.05, 0.0)),
            StrategyKind::Er => Some((0.2, 0.0)),
            StrategyKind::ClaE => Some((0.5, 0.3)),
            StrategyKind::ClaR => Some((0.05, 1.0)),
            _ => None,
        }
    }
}

/// One strategy of a manifest; unset fields come from the preset and the
/// strategy defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyEntry {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_policy: Option<BufferPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lump_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lump_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<SslObjective>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationPolicy>,
}

impl StrategyEntry {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            label: None,
            b_r: None,
            n_p: None,
            omega: None,
            learning_rate: None,
            momentum: None,
            weight_decay: None,
            tau: None,
            buffer_policy: None,
            buffer_capacity: None,
            lump_alpha: None,
            lump_lambda: None,
            objective: None,
            augmentation: None,
        }
    }

    fn from_config(c: &StrategyConfig) -> Self {
        Self {
            kind: c.kind,
            label: Some(c.label.clone()),
            b_r: Some(c.b_r),
            n_p: Some(c.n_p),
            omega: Some(c.omega),
            learning_rate: Some(c.learning_rate),
            momentum: Some(c.momentum),
            weight_decay: Some(c.weight_decay),
            tau: Some(c.tau),
            buffer_policy: Some(c.buffer_policy),
            buffer_capacity: Some(c.buffer_capacity),
            lump_alpha: Some(c.lump_alpha),
            lump_lambda: c.lump_lambda,
            objective: Some(c.objective),
            augmentation: Some(c.augmentation),
        }
    }
}

/// Settings of the `continue-iid` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinueIidConfig {
    pub additional_cbp: u64,
    pub checkpoints: usize,
    pub seed: u64,
    /// Also train an i.i.d. learner from scratch on the combined budget.
    pub compare_full_iid: bool,
}

impl Default for ContinueIidConfig {
    fn default() -> Self {
        Self {
            additional_cbp: 0,
            checkpoints: 10,
            seed: 0,
            compare_full_iid: true,
        }
    }
}

fn default_experiences() -> usize {
    10
}

fn default_b_s() -> usize {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

/// The structured-text experiment description. After [`Experiment::new`]
/// every optional field is filled in, so the echoed manifest re-parses to
/// the same experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// `synthetic:key=value,...` or a dataset file path.
    pub dataset: String,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_experiences")]
    pub experiences: usize,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_b_s")]
    pub b_s: usize,
    #[serde(default)]
    pub boundaries_visible: bool,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub execution: Execution,
    /// Worker threads for cells; 0 means one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub continue_iid: ContinueIidConfig,
    pub strategies: Vec<StrategyEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            Error::config(
                "manifest",
                e.message().to_string() + &span_hint(text, e.span()),
            )
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("manifest serialization: {e}")))
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) if r.start <= text.len() => {
            let line = text[..r.start].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        _ => String::new(),
    }
}

/// A validated manifest with its dataset, split and strategy configs.
#[derive(Debug)]
pub struct Experiment {
    pub manifest: Manifest,
    pub dataset: Dataset,
    pub split: ClassIncrementalSplit,
    pub plan: StreamPlan,
    pub probe_data: ProbeData,
    pub configs: Vec<StrategyConfig>,
    pub parity: ParityReport,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        Self::new(Manifest::load(path)?)
    }

    /// Resolves defaults, loads the dataset and checks budget parity.
    pub fn new(mut manifest: Manifest) -> Result<Self> {
        if manifest.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if manifest.strategies.is_empty() {
            return Err(Error::config(
                "strategies",
                "at least one strategy is required",
            ));
        }
        if manifest.b_s < 2 {
            return Err(Error::config("b_s", "minibatches need at least 2 samples"));
        }
        manifest
            .probe
            .validate()
            .map_err(|e| Error::config("probe", e.to_string()))?;
        let dataset = DatasetSource::parse(&manifest.dataset)?.load()?;
        let split = split_class_incremental(&dataset, manifest.experiences, manifest.split_seed)
            .map_err(|e| Error::config("experiences", e.to_string()))?;
        let plan = StreamPlan::new(&split, manifest.b_s, 1, manifest.boundaries_visible)
            .map_err(|e| Error::config("b_s", e.to_string()))?;
        let mut network = manifest.network.clone().unwrap_or_default();
        if manifest.network.is_none() {
            network.input_dim = dataset.dim();
        } else if network.input_dim != dataset.dim() {
            return Err(Error::config(
                "network.input_dim",
                format!(
                    "{} but the dataset has {} features",
                    network.input_dim,
                    dataset.dim()
                ),
            ));
        }
        manifest.network = Some(network.clone());

        let mut labels = BTreeSet::new();
        let mut configs = Vec::with_capacity(manifest.strategies.len());
        for (i, entry) in manifest.strategies.iter().enumerate() {
            let c = resolve_entry(entry, manifest.preset, manifest.b_s, &network, i)?;
            if !labels.insert(c.label.clone()) {
                return Err(Error::config(
                    format!("strategies[{i}].label"),
                    format!("duplicate label `{}`", c.label),
                ));
            }
            if c.kind.needs_boundaries() && !manifest.boundaries_visible {
                return Err(Error::config(
                    format!("{}.kind", c.label),
                    format!("{} needs boundaries_visible = true", c.kind.name()),
                ));
            }
            configs.push(c);
        }
        manifest.strategies = configs.iter().map(StrategyEntry::from_config).collect();

        let n = split.train_len();
        let parity = if configs.len() == 1 {
            let spec = configs[0].budget_spec(n)?;
            ParityReport {
                cbp: cbp(&spec),
                entries: vec![crate::budget::ParityEntry {
                    label: configs[0].label.clone(),
                    cbp: cbp(&spec),
                    composition: spec.composition,
                    b: spec.b,
                    n_p: spec.n_p,
                }],
            }
        } else {
            let specs = configs
                .iter()
                .map(|c| Ok((c.label.clone(), c.budget_spec(n)?)))
                .collect::<Result<Vec<_>>>()?;
            assert_parity(&specs)?
        };
        let probe_data = ProbeData::new(&dataset, &split);
        Ok(Self {
            manifest,
            dataset,
            split,
            plan,
            probe_data,
            configs,
            parity,
        })
    }

    pub fn context(&self) -> RunContext<'_> {
        RunContext {
            dataset: &self.dataset,
            plan: &self.plan,
            probe: &self.manifest.probe,
            probe_data: &self.probe_data,
            record_wall_time: self.manifest.record_wall_time,
        }
    }

    /// The output directory, under `$CLA_OUTPUT_ROOT` when it is relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.manifest.output_dir)
    }

    pub fn run_id(label: &str, seed: u64) -> String {
        format!("{label}-s{seed}")
    }

    /// Runs every (strategy, seed) cell and writes the artifacts. Cell
    /// failures are reported, not propagated; artifacts of finished cells
    /// are kept.
    pub fn run(&self) -> Result<RunReport> {
        let out = self.output_dir();
        let runs_dir = out.join("runs");
        let ckpt_dir = out.join("checkpoints");
        fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
        if self.manifest.save_checkpoints {
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        }
        write_text(&out.join("manifest.toml"), &self.manifest.to_toml()?)?;

        let cells: Vec<(usize, u64)> = (0..self.configs.len())
            .flat_map(|i| self.manifest.seeds.iter().map(move |&s| (i, s)))
            .collect();
        let results = map_ordered(
            cells,
            self.manifest.execution,
            self.manifest.workers,
            |(i, seed)| {
                let config = &self.configs[i];
                let run_id = Self::run_id(&config.label, seed);
                let csv_path = runs_dir.join(format!("{run_id}.csv"));
                let ckpt = self
                    .manifest
                    .save_checkpoints
                    .then(|| ckpt_dir.join(format!("{run_id}.ckpt")));
                let outcome = self.run_cell(config, seed, &run_id, &csv_path, ckpt.as_deref());
                CellResult {
                    run_id,
                    label: config.label.clone(),
                    seed,
                    csv_path,
                    outcome: outcome.map_err(|e| e.to_string()),
                }
            },
        );

        let failures: Vec<&CellResult> = results.iter().filter(|r| r.outcome.is_err()).collect();
        let failure_path = out.join("failures.csv");
        if failures.is_empty() {
            if failure_path.exists() {
                fs::remove_file(&failure_path).map_err(|e| Error::io(&failure_path, e))?;
            }
        } else {
            let mut w = csv_writer(&failure_path)?;
            w.write_record(["run_id", "strategy", "seed", "error"])?;
            for f in &failures {
                let msg = f.outcome.as_ref().err().cloned().unwrap_or_default();
                w.write_record([
                    f.run_id.as_str(),
                    f.label.as_str(),
                    &f.seed.to_string(),
                    &msg,
                ])?;
            }
            flush(w, &failure_path)?;
        }

        let mut groups: BTreeMap<usize, Vec<PathBuf>> = BTreeMap::new();
        for (r, i) in results
            .iter()
            .zip((0..self.configs.len()).flat_map(|i| self.manifest.seeds.iter().map(move |_| i)))
        {
            if r.outcome.is_ok() {
                groups.entry(i).or_default().push(r.csv_path.clone());
            }
        }
        let n = self.split.train_len();
        let mut summaries = Vec::new();
        let mut curves = Vec::new();
        for (i, paths) in &groups {
            let c = &self.configs[*i];
            let spec = c.budget_spec(n)?;
            let runs = paths
                .iter()
                .map(|p| read_run_csv(p))
                .collect::<Result<Vec<_>>>()?;
            summaries.push(summarize(
                &c.label,
                c.objective.name(),
                cbp(&spec),
                iid_epochs(&spec),
                &runs,
            )?);
            curves.extend(curve_rows(&c.label, &runs)?);
        }
        write_summary(&out.join("summary.csv"), &summaries)?;
        write_curves(&out.join("curves.csv"), &curves)?;
        Ok(RunReport {
            output_dir: out,
            cells: results,
            summaries,
        })
    }

    fn run_cell(
        &self,
        config: &StrategyConfig,
        seed: u64,
        run_id: &str,
        csv_path: &Path,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        let ctx = self.context();
        let rows = if config.kind == StrategyKind::Iid {
            let declared = cbp(&config.budget_spec(self.split.train_len())?);
            run_iid(
                &ctx,
                config.clone(),
                seed,
                declared,
                self.plan.experiences.len(),
            )?
            .rows
        } else {
            let mut session = RunSession::new(config.clone(), seed, &ctx)?;
            session.run_to_end(&ctx)?;
            if let Some(p) = checkpoint {
                session.save(p)?;
            }
            session.finish(&ctx)?.rows
        };
        write_run_csv(csv_path, run_id, seed, config, &rows)
    }

    /// Loads a finished run's checkpoint, continues it with i.i.d. SSL and
    /// writes the accuracy-vs-CBP curves. Returns the curve file.
    pub fn continue_iid(&self, checkpoint: &Path) -> Result<PathBuf> {
        let ci = &self.manifest.continue_iid;
        let d = StateDict::load(checkpoint)?;
        let nets = NetworkSet::read_state(&d.sub("trainer.nets"))?;
        let network = self.manifest.network.clone().unwrap_or_default();
        if nets.input_dim() != network.input_dim || nets.feature_dim() != network.projector_dim {
            return Err(Error::config(
                "network",
                format!(
                    "checkpoint/manifest dimension mismatch: checkpoint maps {} -> {}, manifest {} -> {}",
                    nets.input_dim(),
                    nets.feature_dim(),
                    network.input_dim,
                    network.projector_dim
                ),
            ));
        }
        let config = self.iid_config();
        let ctx = self.context();
        let stream_cbp = d.scalar("trainer.ledger.examples")?;
        let cbps = d.vec("run.rows.cbp")?;
        let probes = d.vec("run.rows.probe")?;
        let mut points: Vec<(&str, &str, u64, f64)> = cbps
            .iter()
            .zip(&probes)
            .filter(|(_, p)| !p.is_nan())
            .map(|(c, p)| ("continual_then_iid", "stream", *c as u64, *p))
            .collect();
        let cont = continue_iid(
            &ctx,
            checkpoint,
            config.clone(),
            ci.seed,
            ci.additional_cbp,
            ci.checkpoints,
        )?;
        points.extend(
            cont.curve
                .iter()
                .map(|&(c, a)| ("continual_then_iid", "iid", stream_cbp + c, a)),
        );
        if ci.compare_full_iid {
            let total = stream_cbp + ci.additional_cbp;
            let stream_points = points.iter().filter(|p| p.1 == "stream").count();
            let full = run_iid(&ctx, config, ci.seed, total, stream_points + ci.checkpoints)?;
            points.extend(full.curve.iter().map(|&(c, a)| ("full_iid", "iid", c, a)));
        }
        let out = self.output_dir().join("continue_iid");
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        write_text(&out.join("manifest.toml"), &self.manifest.to_toml()?)?;
        let stem = checkpoint
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("checkpoint");
        let path = out.join(format!("{stem}.csv"));
        let mut w = csv_writer(&path)?;
        w.write_record(["curve", "phase", "cbp", "probe_acc"])?;
        for (curve, phase, c, a) in points {
            w.write_record([curve, phase, &c.to_string(), &a.to_string()])?;
        }
        flush(w, &path)?;
        Ok(path)
    }

    /// The manifest's i.i.d. entry, or an i.i.d. learner shaped like the
    /// preset's replay strategies.
    pub fn iid_config(&self) -> StrategyConfig {
        if let Some(c) = self.configs.iter().find(|c| c.kind == StrategyKind::Iid) {
            return c.clone();
        }
        let (b_r, _) = self
            .manifest
            .preset
            .shape(StrategyKind::Iid)
            .unwrap_or((0, 1));
        let mut c = StrategyConfig::new(StrategyKind::Iid, self.manifest.b_s, b_r, 1);
        c.network = self.manifest.network.clone().unwrap_or_default();
        c
    }
}

fn resolve_entry(
    e: &StrategyEntry,
    preset: Preset,
    b_s: usize,
    network: &NetworkConfig,
    index: usize,
) -> Result<StrategyConfig> {
    let (preset_b_r, preset_n_p) = preset.shape(e.kind).unwrap_or((0, 1));
    let b_r = e.b_r.unwrap_or(preset_b_r);
    let n_p = e.n_p.unwrap_or(preset_n_p);
    let mut c = StrategyConfig::new(e.kind, b_s, b_r, n_p);
    if let Some((lr, omega)) = preset.tuned(e.kind) {
        c.learning_rate = lr;
        c.omega = omega;
    }
    c.label = e.label.clone().unwrap_or_else(|| e.kind.name().to_string());
    if c.label.is_empty() || c.label.contains(['/', '\\', ',']) {
        return Err(Error::config(
            format!("strategies[{index}].label"),
            "labels must be non-empty without / \\ ,",
        ));
    }
    macro_rules! take {
        ($($f:ident),*) => { $(if let Some(v) = e.$f { c.$f = v; })* };
    }
    take!(
        omega,
        learning_rate,
        momentum,
        weight_decay,
        tau,
        buffer_policy,
        buffer_capacity,
        lump_alpha,
        objective,
        augmentation
    );
    c.lump_lambda = e.lump_lambda;
    c.network = network.clone();
    c.validate()?;
    Ok(c)
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub run_id: String,
    pub label: String,
    pub seed: u64,
    pub csv_path: PathBuf,
    pub outcome: std::result::Result<(), String>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<SummaryRow>,
}

impl RunReport {
    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.outcome.is_err())
    }

    pub fn is_success(&self) -> bool {
        self.failures().next().is_none()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_run_csv(
    path: &Path,
    run_id: &str,
    seed: u64,
    config: &StrategyConfig,
    rows: &[TraceRow],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RUN_COLUMNS)?;
    let seed = seed.to_string();
    for r in rows {
        w.write_record([
            run_id,
            &seed,
            &config.label,
            config.objective.name(),
            &r.experience.to_string(),
            &r.step.to_string(),
            &r.cbp_so_far.to_string(),
            &r.loss_total.to_string(),
            &r.loss_ssl.to_string(),
            &r.loss_reg.to_string(),
            &r.probe_acc.map(|a| a.to_string()).unwrap_or_default(),
            &r.wall_ms.to_string(),
        ])?;
    }
    flush(w, path)
}

/// The probe points and final ledger count of one run CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RunCsv {
    /// `(experience_idx, cbp_so_far, accuracy)` at every probe.
    pub probes: Vec<(usize, u64, f64)>,
    pub cbp_counted: u64,
}

pub fn read_run_csv(path: &Path) -> Result<RunCsv> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != RUN_COLUMNS {
        return Err(Error::Format(format!(
            "{}: unexpected columns",
            path.display()
        )));
    }
    let mut probes = Vec::new();
    let mut cbp_counted = 0;
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{}: bad value `{}` in {}",
                    path.display(),
                    &rec[i],
                    RUN_COLUMNS[i]
                ))
            })
        };
        let cbp = num(6)? as u64;
        cbp_counted = cbp_counted.max(cbp);
        if !rec[10].is_empty() {
            probes.push((num(4)? as usize, cbp, num(10)?));
        }
    }
    Ok(RunCsv {
        probes,
        cbp_counted,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub ssl_objective: String,
    pub runs: usize,
    pub final_acc: (f64, f64),
    pub avg_acc: (f64, f64),
    pub cbp_declared: u64,
    pub cbp_counted: u64,
    pub iid_epochs: u64,
}

/// Summary of one strategy from its run CSVs: final accuracy is the last
/// probe, average accuracy the mean of all probes; `cbp_counted` is the
/// largest ledger count across seeds.
pub fn summarize(
    strategy: &str,
    objective: &str,
    declared: u64,
    epochs: u64,
    runs: &[RunCsv],
) -> Result<SummaryRow> {
    let mut finals = Vec::new();
    let mut avgs = Vec::new();
    for r in runs {
        let accs: Vec<f64> = r.probes.iter().map(|p| p.2).collect();
        let Some(&last) = accs.last() else {
            return Err(Error::Format(format!(
                "{strategy}: a run CSV holds no probe"
            )));
        };
        finals.push(last);
        avgs.push(accs.iter().sum::<f64>() / accs.len() as f64);
    }
    Ok(SummaryRow {
        strategy: strategy.to_string(),
        ssl_objective: objective.to_string(),
        runs: runs.len(),
        final_acc: mean_std(&finals),
        avg_acc: mean_std(&avgs),
        cbp_declared: declared,
        cbp_counted: runs.iter().map(|r| r.cbp_counted).max().unwrap_or(0),
        iid_epochs: epochs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub strategy: String,
    pub point: usize,
    pub cbp: u64,
    pub acc: (f64, f64),
    pub runs: usize,
}

fn curve_rows(strategy: &str, runs: &[RunCsv]) -> Result<Vec<CurveRow>> {
    let points = runs.iter().map(|r| r.probes.len()).min().unwrap_or(0);
    Ok((0..points)
        .map(|k| {
            let accs: Vec<f64> = runs.iter().map(|r| r.probes[k].2).collect();
            CurveRow {
                strategy: strategy.to_string(),
                point: runs[0].probes[k].0,
                cbp: runs.iter().map(|r| r.probes[k].1).max().unwrap_or(0),
                acc: mean_std(&accs),
                runs: runs.len(),
            }
        })
        .collect())
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.ssl_objective.clone(),
            r.runs.to_string(),
            r.final_acc.0.to_string(),
            r.final_acc.1.to_string(),
            r.avg_acc.0.to_string(),
            r.avg_acc.1.to_string(),
            r.cbp_declared.to_string(),
            r.cbp_counted.to_string(),
            r.iid_epochs.to_string(),
        ])?;
    }
    flush(w, path)
}

fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(CURVE_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.point.to_string(),
            r.cbp.to_string(),
            r.acc.0.to_string(),
            r.acc.1.to_string(),
            r.runs.to_string(),
        ])?;
    }
    flush(w, path)
}
