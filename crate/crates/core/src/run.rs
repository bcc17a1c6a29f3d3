//! Run configuration files and the commands built on them.
//!
//! A run file is TOML with five sections. Every key is optional and falls
//! back to the reference configuration; unknown keys are errors.
//!
//! ```toml
//! [run]
//! seed = 42
//! output_dir = "runs/hybrid"
//!
//! [architecture]
//! d_model = 64
//! n_layers = 2
//! n_heads = 4
//! head_dim = 16
//! d_hidden = 256
//! vocab_size = 256
//! seq_len = 64
//!
//! [optimization]
//! peak_lr = 3e-3
//! min_lr = 3e-4
//! warmup_steps = 100
//! max_steps = 2000
//! batch_size = 8
//!
//! [hybrid]
//! mode = "hybrid"
//! rank = 16
//! k_groups = 4
//! beta = 0.001
//! hybrid_set = ["q", "k", "v", "gate", "up"]
//!
//! [data]
//! files = ["corpus.txt"]
//! val_fraction = 0.1
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{OpKind, Tape};
use crate::data::{split_corpus, synthetic_text, Corpus};
use crate::error::{Error, Result};
use crate::gradcheck::{check_model_gradients, GradCheckReport};
use crate::hdpl::KlGranularity;
use crate::training::{
    evaluate, load_checkpoint, train_loop, AdamWConfig, LrSchedule, MetricsRecord, ScheduleConfig, TrainConfig,
    TrainState, METRICS_FILE,
};
use crate::transformer::{count_model_params, size_mb, tap_latents, ForwardOptions, Mode, ModelConfig, Projection};

/// Name of the resolved configuration written next to run outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LATENTS_FILE: &str = "latents.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_hidden: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub rms_eps: f64,
    pub rope_base: f64,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        let r = ModelConfig::reference(Mode::Hybrid);
        Self {
            d_model: r.d_model,
            n_layers: r.n_layers,
            n_heads: r.n_heads,
            head_dim: r.head_dim,
            d_hidden: r.d_hidden,
            vocab_size: r.vocab_size,
            seq_len: r.seq_len,
            rms_eps: r.rms_eps,
            rope_base: r.rope_base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationSection {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    /// Horizon of the cosine schedule.
    pub max_steps: u64,
    /// Updates to run; defaults to `max_steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_steps: Option<u64>,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    /// Validation batches per evaluation; 0 means the whole split.
    pub eval_batches: usize,
}

impl Default for OptimizationSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        let a = AdamWConfig::default();
        Self {
            peak_lr: s.peak_lr,
            min_lr: s.min_lr,
            warmup_steps: s.warmup_steps,
            max_steps: s.max_steps,
            train_steps: None,
            batch_size: 8,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            grad_clip: 1.0,
            log_interval: 1,
            eval_interval: 250,
            checkpoint_interval: 250,
            eval_batches: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridSection {
    pub mode: Mode,
    pub rank: usize,
    pub k_groups: usize,
    pub beta: f64,
    pub hybrid_set: BTreeSet<Projection>,
    pub kl_granularity: KlGranularity,
}

impl Default for HybridSection {
    fn default() -> Self {
        let r = ModelConfig::reference(Mode::Hybrid);
        Self {
            mode: r.mode,
            rank: r.rank,
            k_groups: r.k_groups,
            beta: r.beta,
            hybrid_set: r.hybrid_set,
            kl_granularity: r.kl_granularity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub files: Vec<PathBuf>,
    /// When no files are listed, generate this many bytes of synthetic text.
    pub synthetic_bytes: usize,
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            files: Vec::new(),
            synthetic_bytes: 0,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub architecture: ArchitectureSection,
    pub optimization: OptimizationSection,
    pub hybrid: HybridSection,
    pub data: DataSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub kl_granularity: Option<KlGranularity>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// `path`, or the built-in defaults when absent.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(m) = o.mode {
            self.hybrid.mode = m;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(n) = o.max_steps {
            self.optimization.train_steps = Some(n);
        }
        if let Some(d) = &o.output_dir {
            self.run.output_dir = d.clone();
        }
        if let Some(k) = o.kl_granularity {
            self.hybrid.kl_granularity = k;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn model(&self) -> ModelConfig {
        let (a, h) = (&self.architecture, &self.hybrid);
        ModelConfig {
            d_model: a.d_model,
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            head_dim: a.head_dim,
            d_hidden: a.d_hidden,
            vocab_size: a.vocab_size,
            seq_len: a.seq_len,
            rank: h.rank,
            k_groups: h.k_groups,
            beta: h.beta,
            hybrid_set: h.hybrid_set.clone(),
            mode: h.mode,
            kl_granularity: h.kl_granularity,
            rms_eps: a.rms_eps,
            rope_base: a.rope_base,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        let o = &self.optimization;
        ScheduleConfig {
            peak_lr: o.peak_lr,
            min_lr: o.min_lr,
            warmup_steps: o.warmup_steps,
            max_steps: o.max_steps,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let o = &self.optimization;
        AdamWConfig {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optimization;
        TrainConfig {
            batch_size: o.batch_size,
            max_steps: o.train_steps.unwrap_or(o.max_steps),
            log_interval: o.log_interval,
            eval_interval: o.eval_interval,
            checkpoint_interval: o.checkpoint_interval,
            grad_clip: (o.grad_clip > 0.0).then_some(o.grad_clip),
            eval_batches: (o.eval_batches > 0).then_some(o.eval_batches),
            output_dir: Some(self.run.output_dir.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.schedule().validate()?;
        let o = &self.optimization;
        if o.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::config("AdamW needs 0 ≤ beta1, beta2 < 1 and eps > 0"));
        }
        if !(o.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be ≥ 0"));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must be in (0, 1)"));
        }
        Ok(())
    }

    /// The token stream named by `[data]`, split into train and validation.
    pub fn corpora(&self) -> Result<(Corpus, Corpus)> {
        let corpus = if !self.data.files.is_empty() {
            Corpus::load(&self.data.files)?
        } else if self.data.synthetic_bytes > 0 {
            Corpus::from_bytes(&synthetic_text(self.data.synthetic_bytes, self.run.seed))
        } else {
            return Err(Error::config("[data] needs files or synthetic_bytes"));
        };
        if corpus.vocab_size > self.architecture.vocab_size {
            return Err(Error::config(format!(
                "corpus vocabulary {} exceeds vocab_size {}",
                corpus.vocab_size, self.architecture.vocab_size
            )));
        }
        split_corpus(&corpus, self.data.val_fraction, self.architecture.seq_len)
    }
}

/// Final figures of one training run, in the shape of a params/size/loss
/// comparison row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub params: usize,
    pub params_millions: f64,
    pub size_mb: f64,
    pub steps: u64,
    pub final_val_loss: Option<f64>,
    pub min_val_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
}

impl RunSummary {
    pub fn from_metrics(config: &ModelConfig, steps: u64, records: &[MetricsRecord]) -> Self {
        let params = count_model_params(config);
        let vals: Vec<f64> = records.iter().filter_map(|r| r.val_loss).collect();
        Self {
            mode: config.mode,
            params,
            params_millions: params as f64 / 1e6,
            size_mb: size_mb(params),
            steps,
            final_val_loss: vals.last().copied(),
            min_val_loss: vals.iter().copied().reduce(f64::min),
            final_train_loss: records.last().map(|r| r.train_loss),
        }
    }
}

/// Markdown table with one row per run.
pub fn summary_table(rows: &[RunSummary]) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let mut s = String::from("| Model | Params (M) | Size (MB) | Steps | Final Val Loss | Min Val Loss |\n");
    s += "|---|---|---|---|---|---|\n";
    for r in rows {
        s += &format!(
            "| {} | {:.2} | {:.2} | {} | {} | {} |\n",
            r.mode,
            r.params_millions,
            r.size_mb,
            r.steps,
            fmt(r.final_val_loss),
            fmt(r.min_val_loss)
        );
    }
    s
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// Trains as configured, writing metrics, checkpoints, the resolved config
/// and a summary into the output directory.
pub fn cmd_train(config: &RunConfig) -> Result<RunSummary> {
    // read the corpus before touching the output directory
    let (train, val) = config.corpora()?;
    let dir = &config.run.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join(RESOLVED_CONFIG);
    fs::write(&resolved, config.to_toml()).map_err(|e| Error::io(&resolved, e))?;

    let model = config.model();
    let mut state = TrainState::new(model.clone(), LrSchedule::Cosine(config.schedule()), config.optimizer(), config.run.seed)?;
    let tc = config.train_config();
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    let records = train_loop(&mut state, &tc, &train, &val)?;
    let summary = RunSummary::from_metrics(&model, state.step, &records);
    let path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub step: u64,
    pub val_loss: f64,
    pub aux_loss: f64,
    pub batches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latents_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_records: Option<usize>,
}

#[derive(Serialize)]
struct LatentLine<'a> {
    batch: usize,
    layer_id: usize,
    block: usize,
    projection: Projection,
    shape: &'a [usize],
    mu: &'a [f32],
    logvar: &'a [f32],
}

/// Eval-mode validation loss of a checkpoint. With `dump_latents`, writes
/// one JSONL record of `(μ, logvar)` per hybrid layer per batch.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, dump_latents: bool) -> Result<EvalReport> {
    let (_, val) = config.corpora()?;
    let model_cfg = config.model();
    let state = load_checkpoint(checkpoint, Some(&model_cfg))?;
    let o = &config.optimization;
    let cap = (o.eval_batches > 0).then_some(o.eval_batches);
    let val_loss = evaluate(&state.model, &val, o.batch_size, cap)?;

    let mut blocks = val.sequential_blocks(o.batch_size, model_cfg.seq_len)?;
    if let Some(c) = cap {
        blocks.truncate(c.max(1));
    }
    let mut latents_file = None;
    let mut latent_records = None;
    let mut writer = if dump_latents {
        let dir = &config.run.output_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LATENTS_FILE);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        latents_file = Some(path);
        latent_records = Some(0);
        Some(std::io::BufWriter::new(f))
    } else {
        None
    };
    let mut aux_loss = 0.0;
    for (i, b) in blocks.iter().enumerate() {
        let tape = Tape::new();
        let vars = state.model.params.bind_frozen(&tape);
        let opts = if writer.is_some() {
            ForwardOptions::eval().with_latents()
        } else {
            ForwardOptions::eval()
        };
        let out = state.model.forward(&vars, &b.inputs, b.batch, Some(&b.targets), &opts)?;
        aux_loss += out.aux_total.item() as f64;
        if let Some(w) = writer.as_mut() {
            for r in tap_latents(&out)? {
                let line = LatentLine {
                    batch: i,
                    layer_id: r.layer_id,
                    block: r.block,
                    projection: r.projection,
                    shape: r.mu.shape(),
                    mu: r.mu.data(),
                    logvar: r.logvar.data(),
                };
                let path = latents_file.as_ref().expect("set with writer");
                serde_json::to_writer(&mut *w, &line).map_err(|e| Error::io(path, e.into()))?;
                writeln!(w).map_err(|e| Error::io(path, e))?;
                *latent_records.as_mut().expect("set with writer") += 1;
            }
        }
    }
    if let (Some(mut w), Some(path)) = (writer, latents_file.as_ref()) {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if aux_loss != 0.0 {
        return Err(Error::config(format!("eval pass produced auxiliary loss {aux_loss}")));
    }
    Ok(EvalReport {
        mode: model_cfg.mode,
        step: state.step,
        val_loss,
        aux_loss,
        batches: blocks.len(),
        latents_file,
        latent_records,
    })
}

/// Largest model the finite-difference check will accept.
pub const GRAD_CHECK_MAX_PARAMS: usize = 200_000;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub tolerance: f64,
    pub passed: bool,
    pub modes: Vec<(Mode, GradCheckReport)>,
}

impl GradCheckSummary {
    pub fn failures(&self) -> Vec<String> {
        self.modes
            .iter()
            .flat_map(|(m, r)| r.failures(self.tolerance).into_iter().map(move |g| format!("{m}/{}", g.name)))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (mode, report) in &self.modes {
            s += &format!("{mode}\n{:<28} {:>8} {:>14}\n", "group", "elements", "max rel err");
            for g in &report.groups {
                let flag = if g.max_rel_error < self.tolerance { "" } else { "  FAIL" };
                s += &format!("{:<28} {:>8} {:>14.3e}{flag}\n", g.name, g.elements, g.max_rel_error);
            }
        }
        s += if self.passed { "all groups pass\n" } else { "gradient check FAILED\n" };
        s
    }
}

/// Finite-difference check of the configured architecture in both modes.
pub fn cmd_grad_check(config: &RunConfig, fault: Option<(OpKind, f64)>) -> Result<GradCheckSummary> {
    let tolerance = 1e-3;
    let mut modes = Vec::new();
    for mode in [Mode::Baseline, Mode::Hybrid] {
        let cfg = ModelConfig {
            mode,
            ..config.model()
        };
        let n = count_model_params(&cfg);
        if n > GRAD_CHECK_MAX_PARAMS {
            return Err(Error::config(format!(
                "gradient check needs a micro config; {mode} has {n} parameters (limit {GRAD_CHECK_MAX_PARAMS})"
            )));
        }
        modes.push((mode, check_model_gradients(&cfg, config.run.seed, 2, 1e-5, fault)?));
    }
    let passed = modes.iter().all(|(_, r)| r.failures(tolerance).is_empty());
    Ok(GradCheckSummary {
        tolerance,
        passed,
        modes,
    })
}
