//! AdamW training with a warmup-cosine schedule, periodic validation,
//! checkpoints and JSONL metrics.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{clip_grad_norm, global_norm, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, LrSchedule, ScheduleConfig};

use crate::autodiff::Tape;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::transformer::{ForwardOptions, ModelConfig, TransformerModel};

/// Everything needed to continue a run exactly where it stopped.
pub struct TrainState {
    pub model: TransformerModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub schedule: LrSchedule,
    /// `counter` equals `step`: batch offsets and latent noise of update `n`
    /// are drawn at counter `n`.
    pub rng: RngState,
    /// Completed updates.
    pub step: u64,
    pub best_val_loss: Option<f64>,
}

impl TrainState {
    pub fn new(config: ModelConfig, schedule: LrSchedule, optimizer: AdamWConfig, seed: u64) -> Result<Self> {
        let model = TransformerModel::new(config, seed)?;
        let optimizer = OptimizerState::new(optimizer, model.params.tensors());
        Ok(Self {
            model,
            optimizer,
            schedule,
            rng: RngState::new(seed),
            step: 0,
            best_val_loss: None,
        })
    }

    pub fn seed(&self) -> u64 {
        self.rng.seed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Train until this many updates have completed.
    pub max_steps: u64,
    pub log_interval: u64,
    pub eval_interval: u64,
    /// 0 disables periodic checkpoints; best and final are still written.
    pub checkpoint_interval: u64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Cap on validation batches per evaluation; `None` uses the whole split.
    pub eval_batches: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 20_000,
            log_interval: 1,
            eval_interval: 250,
            checkpoint_interval: 250,
            grad_clip: Some(1.0),
            eval_batches: None,
            output_dir: None,
        }
    }
}

/// One line of the metrics stream. `train_loss` is the cross-entropy of the
/// training batch; `aux_loss` is the summed auxiliary loss of that step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
    pub aux_loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
    pub wall_ms: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

/// Losses of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub ce: f64,
    pub aux: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Runs update number `state.step + 1`.
pub fn train_step(state: &mut TrainState, train: &Corpus, batch_size: usize, grad_clip: Option<f64>) -> Result<StepOutcome> {
    let seq_len = state.model.config.seq_len;
    let seed = state.seed();
    let batch = train.batch_for_step(batch_size, seq_len, seed, state.step)?;
    let rng = RngState::at(seed, state.step);

    let tape = Tape::new();
    let vars = state.model.params.bind(&tape);
    let out = state
        .model
        .forward(&vars, &batch.inputs, batch.batch, Some(&batch.targets), &ForwardOptions::train(rng))?;
    let total = out.total_loss()?;
    let ce = out.ce_loss.expect("targets given").item() as f64;
    let aux = out.aux_total.item() as f64;
    let value = total.item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            value,
        });
    }
    let grads = tape.backward(&total)?;
    let mut grads = state.model.params.collect_grads(&vars, &grads);
    drop(vars);
    drop(tape);
    let grad_norm = match grad_clip {
        Some(max) => clip_grad_norm(&mut grads, max),
        None => global_norm(&grads),
    };
    let next = state.step + 1;
    let lr = state.schedule.at(next);
    state.optimizer.step(state.model.params.tensors_mut(), &grads, lr)?;
    state.step = next;
    state.rng.counter = next;
    Ok(StepOutcome { ce, aux, lr, grad_norm })
}

/// Mean eval-mode cross-entropy over consecutive non-overlapping blocks of
/// `corpus`. The auxiliary loss is not included.
pub fn evaluate(model: &TransformerModel<f32>, corpus: &Corpus, batch_size: usize, max_batches: Option<usize>) -> Result<f64> {
    let mut blocks = corpus.sequential_blocks(batch_size, model.config.seq_len)?;
    if let Some(cap) = max_batches {
        blocks.truncate(cap.max(1));
    }
    let losses = blocks
        .par_iter()
        .map(|b| -> Result<(f64, usize)> {
            let tape = Tape::new();
            let vars = model.params.bind_frozen(&tape);
            let out = model.forward(&vars, &b.inputs, b.batch, Some(&b.targets), &ForwardOptions::eval())?;
            debug_assert_eq!(out.aux_total.item(), 0.0);
            Ok((out.ce_loss.expect("targets given").item() as f64, b.tokens()))
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens: usize = losses.iter().map(|l| l.1).sum();
    Ok(losses.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / tokens as f64)
}

struct MetricsSink {
    file: Option<BufWriter<File>>,
}

impl MetricsSink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let file = match dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            let line = serde_json::to_string(record).expect("metrics serialise");
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        Ok(())
    }
}

/// Trains until `config.max_steps` updates have completed, resuming from
/// `state.step`. Returns every metrics record emitted by this call.
pub fn train_loop(state: &mut TrainState, config: &TrainConfig, train: &Corpus, val: &Corpus) -> Result<Vec<MetricsRecord>> {
    let dir = config.output_dir.as_deref();
    let mut sink = MetricsSink::open(dir)?;
    let mut records = Vec::new();
    let start = Instant::now();
    let tokens_per_step = (config.batch_size * state.model.config.seq_len) as f64;

    while state.step < config.max_steps {
        let t0 = Instant::now();
        let outcome = match train_step(state, train, config.batch_size, config.grad_clip) {
            Ok(o) => o,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let Some(dir) = dir {
                    let diag = serde_json::json!({ "error": e.to_string(), "step": state.step + 1 });
                    let path = dir.join("diagnostic.json");
                    std::fs::write(&path, diag.to_string()).map_err(|err| Error::io(&path, err))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let step = state.step;
        let step_secs = t0.elapsed().as_secs_f64();
        let is_last = step == config.max_steps;
        let do_eval = config.eval_interval > 0 && (step % config.eval_interval == 0 || is_last);
        let do_log = do_eval || is_last || (config.log_interval > 0 && step % config.log_interval == 0);

        let val_loss = if do_eval {
            let v = evaluate(&state.model, val, config.batch_size, config.eval_batches)?;
            if state.best_val_loss.is_none_or(|b| v < b) {
                state.best_val_loss = Some(v);
                if let Some(dir) = dir {
                    save_checkpoint(state, &dir.join(BEST_CHECKPOINT))?;
                }
            }
            Some(v)
        } else {
            None
        };
        if let Some(dir) = dir {
            if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 {
                save_checkpoint(state, &dir.join(step_checkpoint_name(step)))?;
            }
        }
        if do_log {
            let record = MetricsRecord {
                step,
                train_loss: outcome.ce,
                val_loss,
                aux_loss: outcome.aux,
                lr: outcome.lr,
                tokens_per_sec: tokens_per_step / step_secs.max(1e-9),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            sink.write(&record)?;
            records.push(record);
        }
    }
    if let Some(dir) = dir {
        save_checkpoint(state, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(records)
}
