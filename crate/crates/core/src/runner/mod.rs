//! Experiment orchestration: configs, the training loop and emitted artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{make_task, DomainDataset, Task, TaskSpec};
use crate::diagnostics::{
    batch_cosine, bound_terms, domain_probe, head_diagnostics, kurtosis, l1_mean, target_accuracy, BoundTerms,
    MetricsRecord, ProbeRecipe,
};
use crate::error::{Error, Result};
use crate::hdan::{
    build_objective, decomposition_residual, Architecture, DiscriminatorInput, DomainBatch, HdanModel, HeuristicNorm,
    Method, ObjectiveSettings,
};
use crate::nn::{lambda_schedule, sgd_step, Module, SgdState};

pub mod cli;
pub mod plot;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "HDA_OUT_DIR";

fn default_mu() -> f64 {
    1.0
}

fn default_independence_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Number of heuristic heads.
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub entropy_conditioning: bool,
    #[serde(default)]
    pub independence_loss: bool,
    #[serde(default = "default_independence_weight")]
    pub independence_weight: f64,
    #[serde(default)]
    pub heuristic_loss_norm: HeuristicNorm,
    #[serde(default)]
    pub discriminator_input: DiscriminatorInput,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_gamma() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Learning-rate multiplier of the shared encoder.
    #[serde(default = "default_encoder_lr_scale")]
    pub encoder_lr_scale: f64,
}

fn default_encoder_lr_scale() -> f64 {
    1.0
}

fn default_probe_interval() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub method: Method,
    /// Record the epoch-0 diagnostics and stop.
    #[serde(default)]
    pub eval_only: bool,
    /// Domain probes run at epoch 0, every this many epochs and at the end.
    #[serde(default = "default_probe_interval")]
    pub probe_interval: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model.m < 1 {
            return bad(format!("M must be >= 1, got {}", self.model.m));
        }
        if self.model.hidden < 1 {
            return bad("hidden must be >= 1".into());
        }
        if self.optim.epochs < 1 {
            return bad(format!("epochs must be >= 1, got {}", self.optim.epochs));
        }
        if self.optim.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.optim.batch_size));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.optim.lr));
        }
        if !(self.optim.gamma > 0.0 && self.optim.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.optim.gamma));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) || self.optim.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be >= 0".into());
        }
        if !(self.optim.encoder_lr_scale >= 0.0 && self.optim.encoder_lr_scale.is_finite()) {
            return bad(format!(
                "encoder_lr_scale must be >= 0, got {}",
                self.optim.encoder_lr_scale
            ));
        }
        if self.model.mu < 0.0 || !self.model.mu.is_finite() {
            return bad(format!("mu must be >= 0, got {}", self.model.mu));
        }
        if self.probe_interval < 1 {
            return bad("probe_interval must be >= 1".into());
        }
        Ok(())
    }

    /// `output_dir` if set, otherwise a per-run directory under
    /// `$HDA_OUT_DIR` (or `runs`).
    pub fn resolved_output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("{}_seed{}", method_name(self.method), self.seed))
    }
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Hdan => "hdan",
        Method::SourceOnly => "source_only",
        Method::DannBaseline => "dann_baseline",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `ok`, or a description of the failure that stopped the run.
    pub status: String,
    pub final_target_acc: f64,
    pub best_target_acc: f64,
    pub final_metrics: Option<MetricsRecord>,
    pub epochs_completed: usize,
    pub max_decomposition_residual: f64,
    pub bound_terms: Option<BoundTerms>,
    pub wall_clock_seconds: f64,
    pub config: ExperimentConfig,
    pub code_version: String,
    /// Every recorded epoch, in order.
    #[serde(skip)]
    pub records: Vec<MetricsRecord>,
}

impl RunSummary {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

// Training domains in domain-id order.
fn training_domains(task: &Task<f64>) -> Vec<&DomainDataset<f64>> {
    let mut d: Vec<&DomainDataset<f64>> = task.sources.iter().collect();
    d.push(&task.target_unlabeled);
    if let Some(l) = &task.target_labeled {
        d.push(l);
    }
    d
}

// Cycles through reshuffled permutations of one domain's rows.
struct RowStream {
    order: Vec<usize>,
    pos: usize,
}

impl RowStream {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn batch_of(ds: &DomainDataset<f64>, rows: &[usize]) -> Result<DomainBatch<f64>> {
    Ok(DomainBatch {
        x: ds.x.select_rows(rows)?,
        labels: ds.y.as_ref().map(|y| rows.iter().map(|&i| y[i]).collect()),
        domain_id: ds.domain_id,
    })
}

fn full_batch(ds: &DomainDataset<f64>) -> DomainBatch<f64> {
    DomainBatch {
        x: ds.x.clone(),
        labels: ds.y.clone(),
        domain_id: ds.domain_id,
    }
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    domains: Vec<&'a DomainDataset<f64>>,
    target_eval: &'a DomainDataset<f64>,
    diag_batches: Vec<DomainBatch<f64>>,
    recipe: ProbeRecipe,
}

impl Trainer<'_> {
    fn settings(&self, lambda: f64) -> ObjectiveSettings<f64> {
        let m = &self.cfg.model;
        ObjectiveSettings {
            method: self.cfg.method,
            mu: m.mu,
            lambda,
            norm: m.heuristic_loss_norm,
            discriminator_input: m.discriminator_input,
            entropy_conditioning: m.entropy_conditioning,
            independence_weight: m.independence_loss.then_some(m.independence_weight),
        }
    }

    fn record(&self, model: &HdanModel<f64>, epoch: usize, lambda: f64, probe: bool) -> Result<(MetricsRecord, f64)> {
        let g = Graph::new();
        let vars = model.bind(&g);
        let obj = build_objective(&g, &vars, &self.diag_batches, &self.settings(lambda))?;
        let residual = obj
            .outputs
            .iter()
            .map(|o| decomposition_residual(&g, o))
            .fold(0.0, f64::max);
        let cat = |pick: &dyn Fn(&crate::hdan::ForwardOut) -> crate::autodiff::Var| -> Result<Tensor<f64>> {
            let vs: Vec<_> = obj.outputs.iter().map(pick).collect();
            Ok(g.tensor(g.concat_rows(&vs)?))
        };
        let f = cat(&|o| o.f)?;
        let gg = cat(&|o| o.g)?;
        let h = cat(&|o| o.h_total)?;
        let m = self.cfg.model.m;
        let (ranges, head_pair_cos) = if model.num_heads() == 0 {
            (vec![0.0; m], f64::NAN)
        } else {
            let parts = (0..model.num_heads())
                .map(|k| cat(&|o| o.h_parts[k]))
                .collect::<Result<Vec<_>>>()?;
            let values = crate::hdan::ForwardValues {
                f: f.clone(),
                h_total: h.clone(),
                h_parts: parts,
                g: gg.clone(),
            };
            let d = head_diagnostics(&values)?;
            let pair = d.mean_pair_cos().unwrap_or(f64::NAN);
            (d.ranges, pair)
        };
        let kurt_f = kurtosis(&f).unwrap_or(f64::NAN);
        let kurt_g = kurtosis(&gg).unwrap_or(f64::NAN);
        let (probe_acc_g, probe_acc_h) = if probe {
            let labels: Vec<usize> = self
                .diag_batches
                .iter()
                .flat_map(|b| std::iter::repeat_n(b.domain_id, b.x.rows()))
                .collect();
            let pseed = self.cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
            let pg = domain_probe(&gg, &labels, &self.recipe, pseed)?;
            let ph = if model.num_heads() == 0 {
                f64::NAN
            } else {
                domain_probe(&h, &labels, &self.recipe, pseed)?
            };
            (pg, ph)
        } else {
            (f64::NAN, f64::NAN)
        };
        let target_h = model.evaluate(&self.target_eval.x)?.h_total;
        let rec = MetricsRecord {
            epoch,
            l_cls: g.item(obj.losses.l_cls)?,
            l_trans: g.item(obj.losses.l_trans)?,
            l_h: g.item(obj.losses.l_h)?,
            cos_gh: batch_cosine(&gg, &h)?,
            kurt_f,
            kurt_g,
            kurt_gap: kurt_f - kurt_g,
            h_part_ranges: ranges,
            head_pair_cos,
            probe_acc_g,
            probe_acc_h,
            target_acc: target_accuracy(model, self.target_eval)?,
            target_h_l1: l1_mean(&target_h),
        };
        Ok((rec, residual))
    }
}

fn build_model(cfg: &ExperimentConfig, task: &Task<f64>) -> Result<HdanModel<f64>> {
    let arch = Architecture {
        d_in: task.target_eval.dim(),
        hidden: cfg.model.hidden,
        num_classes: task.num_classes,
        heads: cfg.model.m,
        num_domains: task.num_domains(),
    };
    match cfg.method {
        Method::DannBaseline => HdanModel::build_without_heuristics(arch, cfg.seed),
        _ => HdanModel::build(arch, cfg.seed),
    }
}

/// Output of [`train`]: the model and everything needed for the summary.
pub struct TrainOutcome {
    pub model: HdanModel<f64>,
    pub task: Task<f64>,
    pub records: Vec<MetricsRecord>,
    pub max_residual: f64,
    /// Set when a non-finite loss or residual stopped training early.
    pub failure: Option<String>,
}

/// Runs the training loop without touching the file system.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = make_task::<f64>(&cfg.task)?;
    let mut model = build_model(cfg, &task)?;
    let domains = training_domains(&task);
    let trainer = Trainer {
        cfg,
        diag_batches: domains.iter().map(|d| full_batch(d)).collect(),
        domains,
        target_eval: &task.target_eval,
        recipe: ProbeRecipe::default(),
    };

    let epochs = cfg.optim.epochs;
    let bs = cfg.optim.batch_size;
    let max_len = trainer.domains.iter().map(|d| d.len()).max().unwrap_or(1);
    let steps_per_epoch = max_len.div_ceil(bs);
    let total_steps = epochs * steps_per_epoch;

    // Data order depends only on the run seed, so every method sees the same
    // batches.
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0da7a04de5);
    let mut streams: Vec<RowStream> = trainer
        .domains
        .iter()
        .map(|d| RowStream::new(d.len(), &mut order_rng))
        .collect();
    let o = &cfg.optim;
    let mut opt = SgdState::new(o.lr, o.momentum, o.weight_decay)?;
    let mut enc_opt = (o.encoder_lr_scale > 0.0)
        .then(|| SgdState::new(o.lr * o.encoder_lr_scale, o.momentum, o.weight_decay))
        .transpose()?;
    let enc_params = model.encoder.params().len();

    let (first, mut max_residual) = trainer.record(&model, 0, 0.0, true)?;
    let mut records = vec![first];
    let mut failure = None;
    if cfg.eval_only {
        return Ok(TrainOutcome {
            model,
            task: task.clone(),
            records,
            max_residual,
            failure,
        });
    }

    let mut step = 0usize;
    'epochs: for epoch in 1..=epochs {
        for _ in 0..steps_per_epoch {
            let lambda = lambda_schedule(step as f64 / total_steps as f64, cfg.optim.gamma)?;
            let batches = trainer
                .domains
                .iter()
                .zip(streams.iter_mut())
                .map(|(d, s)| batch_of(d, &s.take(bs, &mut order_rng)))
                .collect::<Result<Vec<_>>>()?;
            let g = Graph::new();
            let vars = model.bind(&g);
            let obj = build_objective(&g, &vars, &batches, &trainer.settings(lambda))?;
            for o in &obj.outputs {
                max_residual = max_residual.max(decomposition_residual(&g, o));
            }
            let loss = g.item(obj.losses.l_f)?;
            if !loss.is_finite() || !max_residual.is_finite() {
                failure = Some(format!("non-finite loss at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            g.backward(obj.losses.l_f)?;
            model.zero_grad();
            model.absorb_grads(&g, &vars)?;
            let mut params = model.params_mut();
            let (enc, rest) = params.split_at_mut(enc_params);
            if let Some(e) = enc_opt.as_mut() {
                sgd_step(enc, e)?;
            }
            sgd_step(rest, &mut opt)?;
            step += 1;
        }
        let lambda = lambda_schedule(step as f64 / total_steps as f64, cfg.optim.gamma)?;
        let probe = epoch % cfg.probe_interval == 0 || epoch == epochs;
        let (rec, residual) = trainer.record(&model, epoch, lambda, probe)?;
        max_residual = max_residual.max(residual);
        records.push(rec);
    }
    Ok(TrainOutcome {
        model,
        task: task.clone(),
        records,
        max_residual,
        failure,
    })
}

/// `epoch,l_cls,l_trans,l_h,cos_gh,kurt_f,kurt_g,kurt_gap,h_range_1..M,head_pair_cos,probe_acc_g,probe_acc_h,target_acc`
pub fn metrics_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch", "l_cls", "l_trans", "l_h", "cos_gh", "kurt_f", "kurt_g", "kurt_gap",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=m).map(|k| format!("h_range_{k}")));
    h.extend(["head_pair_cos", "probe_acc_g", "probe_acc_h", "target_acc"].map(String::from));
    h
}

pub fn write_metrics_csv(path: &Path, m: usize, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(metrics_header(m)).map_err(io)?;
    for r in records {
        let mut row = vec![r.epoch.to_string()];
        row.extend(
            [r.l_cls, r.l_trans, r.l_h, r.cos_gh, r.kurt_f, r.kurt_g, r.kurt_gap]
                .iter()
                .map(f64::to_string),
        );
        row.extend(r.h_part_ranges.iter().map(f64::to_string));
        row.extend(
            [r.head_pair_cos, r.probe_acc_g, r.probe_acc_h, r.target_acc]
                .iter()
                .map(f64::to_string),
        );
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Trains, then writes `metrics.csv` and `summary.json` to the resolved
/// output directory. `summary.json` is written even when training fails
/// after the directory exists.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let start = Instant::now();
    let mut summary = RunSummary {
        status: "ok".into(),
        final_target_acc: f64::NAN,
        best_target_acc: f64::NAN,
        final_metrics: None,
        epochs_completed: 0,
        max_decomposition_residual: f64::NAN,
        bound_terms: None,
        wall_clock_seconds: 0.0,
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        records: Vec::new(),
    };
    let result = train(cfg).and_then(|out| {
        write_metrics_csv(&dir.join("metrics.csv"), cfg.model.m, &out.records)?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            if let Some(f) = &out.failure {
                summary.status = format!("numerical failure: {f}");
            }
            let last = out.records.last().expect("epoch 0 recorded");
            summary.final_target_acc = last.target_acc;
            summary.best_target_acc = out
                .records
                .iter()
                .map(|r| r.target_acc)
                .fold(f64::NEG_INFINITY, f64::max);
            summary.final_metrics = Some(last.clone());
            summary.epochs_completed = last.epoch;
            summary.max_decomposition_residual = out.max_residual;
            if out.failure.is_none() {
                summary.bound_terms = Some(bound_terms(
                    &out.model,
                    &out.task.sources[0],
                    &out.task.target_eval,
                    cfg.seed ^ 0x0b0_05d,
                )?);
            }
            summary.records = out.records;
        }
        Err(e) => summary.status = format!("error: {e}"),
    }
    summary.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_summary(&dir, &summary)?;
    Ok(summary)
}

/// Mean and population standard deviation of target accuracy for one `M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: usize,
    pub mean_target_acc: f64,
    pub std_target_acc: f64,
    pub seeds: Vec<u64>,
}

/// Seeds used per `M` value.
pub const SWEEP_SEEDS: usize = 3;

/// Runs every `M` with [`SWEEP_SEEDS`] seeds in parallel and writes
/// `sweep.csv` under `out_dir`.
pub fn sweep_m(cfg: &ExperimentConfig, m_values: &[usize], out_dir: &Path) -> Result<Vec<SweepRow>> {
    if m_values.is_empty() {
        return Err(Error::arg("m_values must not be empty"));
    }
    let jobs: Vec<(usize, u64)> = m_values
        .iter()
        .flat_map(|&m| (0..SWEEP_SEEDS as u64).map(move |s| (m, cfg.seed + s)))
        .collect();
    let results: Vec<Result<RunSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(m, seed)| {
                let mut c = cfg.clone();
                c.model.m = m;
                c.seed = seed;
                c.output_dir = Some(out_dir.join(format!("M{m}_seed{seed}")));
                scope.spawn(move || run_experiment(&c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::State("sweep worker panicked".into())))
            })
            .collect()
    });
    let mut rows = Vec::new();
    for &m in m_values {
        let mut accs = Vec::new();
        let mut seeds = Vec::new();
        for ((jm, seed), r) in jobs.iter().zip(&results) {
            if *jm == m {
                let s = r
                    .as_ref()
                    .map_err(|e| Error::State(format!("M={m} seed {seed}: {e}")))?;
                if !s.is_ok() {
                    return Err(Error::Numerical(format!("M={m} seed {seed}: {}", s.status)));
                }
                accs.push(s.final_target_acc);
                seeds.push(*seed);
            }
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        rows.push(SweepRow {
            m,
            mean_target_acc: mean,
            std_target_acc: std,
            seeds,
        });
    }
    let path = out_dir.join("sweep.csv");
    let mut text = String::from("M,mean_target_acc,std_target_acc,seeds\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.m,
            r.mean_target_acc,
            r.std_target_acc,
            r.seeds.len()
        ));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
