//! Dense versus hybrid timing on identical inputs.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::rng::{RngState, DATA_STREAM};
use crate::transformer::{ForwardOptions, Mode, ModelConfig, Projection, TransformerModel};
use rand::Rng;

/// Multiply-add FLOPs per token of one dense projection.
pub fn dense_flops(d_in: usize, d_out: usize) -> usize {
    2 * d_in * d_out
}

/// Multiply-add FLOPs per token of one HDPL projection: the block-diagonal
/// path, both encoders and the decoder.
pub fn hdpl_flops(d_in: usize, d_out: usize, k_groups: usize, rank: usize) -> usize {
    2 * (d_in * d_out / k_groups + 2 * d_in * rank + d_out * rank)
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerFlops {
    pub projection: Projection,
    pub d_in: usize,
    pub d_out: usize,
    pub dense_flops_per_token: usize,
    pub hybrid_flops_per_token: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeTiming {
    pub mode: Mode,
    pub params: usize,
    pub iterations: usize,
    pub seconds: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub baseline: ModeTiming,
    pub hybrid: ModeTiming,
    /// Hybrid tokens/sec divided by baseline tokens/sec.
    pub hybrid_over_baseline: f64,
    pub layers: Vec<LayerFlops>,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<10} {:>12} {:>10} {:>14}\n",
            "mode", "params", "seconds", "tokens/sec"
        );
        for t in [&self.baseline, &self.hybrid] {
            s += &format!("{:<10} {:>12} {:>10.3} {:>14.1}\n", t.mode, t.params, t.seconds, t.tokens_per_sec);
        }
        s += &format!("hybrid/baseline throughput: {:.3}\n\n", self.hybrid_over_baseline);
        s += &format!("{:<6} {:>6} {:>6} {:>14} {:>14}\n", "layer", "d_in", "d_out", "dense flop/tok", "hdpl flop/tok");
        for l in &self.layers {
            s += &format!(
                "{:<6} {:>6} {:>6} {:>14} {:>14}\n",
                l.projection, l.d_in, l.d_out, l.dense_flops_per_token, l.hybrid_flops_per_token
            );
        }
        s
    }
}

/// Times `iterations` training-mode forward+backward passes for both modes
/// of `config` on the same token batch.
pub fn run_bench(config: &ModelConfig, batch_size: usize, iterations: usize, seed: u64) -> Result<BenchReport> {
    let n = batch_size * config.seq_len;
    let mut rng = RngState::new(seed).stream(DATA_STREAM);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.vocab_size)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.vocab_size)).collect();

    let time = |mode: Mode| -> Result<ModeTiming> {
        let cfg = ModelConfig {
            mode,
            ..config.clone()
        };
        let model = TransformerModel::<f32>::new(cfg, seed)?;
        let start = Instant::now();
        for i in 0..iterations {
            let tape = Tape::new();
            let vars = model.params.bind(&tape);
            let opts = ForwardOptions::train(RngState::at(seed, i as u64));
            let loss = model.forward(&vars, &tokens, batch_size, Some(&targets), &opts)?.total_loss()?;
            tape.backward(&loss)?;
        }
        let seconds = start.elapsed().as_secs_f64();
        Ok(ModeTiming {
            mode,
            params: model.num_params(),
            iterations,
            seconds,
            tokens_per_sec: (n * iterations) as f64 / seconds.max(1e-9),
        })
    };
    let baseline = time(Mode::Baseline)?;
    let hybrid = time(Mode::Hybrid)?;
    let layers = config
        .hybrid_set
        .iter()
        .map(|&p| {
            let (d_in, d_out) = p.dims(config.d_model, config.d_hidden);
            LayerFlops {
                projection: p,
                d_in,
                d_out,
                dense_flops_per_token: dense_flops(d_in, d_out),
                hybrid_flops_per_token: hdpl_flops(d_in, d_out, config.k_groups, config.rank),
            }
        })
        .collect();
    Ok(BenchReport {
        batch_size,
        seq_len: config.seq_len,
        seed,
        hybrid_over_baseline: hybrid.tokens_per_sec / baseline.tokens_per_sec,
        baseline,
        hybrid,
        layers,
    })
}
