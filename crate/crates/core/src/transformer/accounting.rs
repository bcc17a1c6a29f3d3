//! Exact parameter accounting, computed from the configuration alone.
//!
//! Nothing here allocates a tensor, so the 49k-vocabulary reference model can
//! be audited instantly.

use serde::Serialize;

use super::config::{ModelConfig, Projection};
use crate::hdpl::count_hdpl_params;

/// Bytes per stored parameter (`f32`).
pub const BYTES_PER_PARAM: usize = 4;

/// Exact stored-float count: embeddings, untied head, every projection
/// (dense or HDPL) and the RMSNorm gains.
pub fn count_model_params(config: &ModelConfig) -> usize {
    let (d, v) = (config.d_model, config.vocab_size);
    let per_block: usize = 2 * d
        + Projection::ALL
            .into_iter()
            .map(|p| projection_params(config, p))
            .sum::<usize>();
    2 * v * d + config.n_layers * per_block + d
}

/// Stored floats of one projection in one block.
pub fn projection_params(config: &ModelConfig, p: Projection) -> usize {
    let (d_in, d_out) = p.dims(config.d_model, config.d_hidden);
    if config.is_hybrid(p) {
        count_hdpl_params(d_in, d_out, config.k_groups, config.rank).unwrap_or(0)
    } else {
        d_in * d_out
    }
}

/// Size in MiB at 4 bytes per parameter.
pub fn size_mb(params: usize) -> f64 {
    (params * BYTES_PER_PARAM) as f64 / (1024.0 * 1024.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: String, shape: &[usize]) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every tensor a model built from `config` stores, in construction order.
pub fn tensor_manifest(config: &ModelConfig) -> Vec<TensorSpec> {
    let (d, v, r, k) = (config.d_model, config.vocab_size, config.rank, config.k_groups);
    let mut out = vec![TensorSpec::new("tok_embedding".into(), &[v, d])];
    for b in 0..config.n_layers {
        for p in Projection::ALL {
            match p {
                Projection::Q => out.push(TensorSpec::new(format!("blocks.{b}.attn_norm"), &[d])),
                Projection::Gate => out.push(TensorSpec::new(format!("blocks.{b}.ffn_norm"), &[d])),
                _ => {}
            }
            let (d_in, d_out) = p.dims(d, config.d_hidden);
            let prefix = format!("blocks.{b}.{p}");
            if config.is_hybrid(p) {
                out.push(TensorSpec::new(format!("{prefix}.blocks"), &[k, d_out / k, d_in / k]));
                out.push(TensorSpec::new(format!("{prefix}.w_mu"), &[r, d_in]));
                out.push(TensorSpec::new(format!("{prefix}.w_logvar"), &[r, d_in]));
                out.push(TensorSpec::new(format!("{prefix}.w_dec"), &[d_out, r]));
            } else {
                out.push(TensorSpec::new(prefix, &[d_out, d_in]));
            }
        }
    }
    out.push(TensorSpec::new("final_norm".into(), &[d]));
    out.push(TensorSpec::new("lm_head".into(), &[v, d]));
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockTotal {
    pub block: usize,
    pub params: usize,
}

/// Per-tensor table plus totals, in the shape of a params/size comparison.
#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub mode: String,
    pub tensors: Vec<ReportRow>,
    pub block_totals: Vec<BlockTotal>,
    pub total: usize,
    pub millions: f64,
    pub size_mb: f64,
}

impl ParamReport {
    pub fn new(config: &ModelConfig) -> Self {
        let manifest = tensor_manifest(config);
        let block_totals = (0..config.n_layers)
            .map(|b| {
                let prefix = format!("blocks.{b}.");
                BlockTotal {
                    block: b,
                    params: manifest
                        .iter()
                        .filter(|t| t.name.starts_with(&prefix))
                        .map(TensorSpec::numel)
                        .sum(),
                }
            })
            .collect();
        let tensors: Vec<ReportRow> = manifest
            .into_iter()
            .map(|t| ReportRow {
                count: t.numel(),
                name: t.name,
                shape: t.shape,
            })
            .collect();
        let total = count_model_params(config);
        Self {
            mode: config.mode.to_string(),
            tensors,
            block_totals,
            total,
            millions: total as f64 / 1e6,
            size_mb: size_mb(total),
        }
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut s = format!("{:<28} {:>20} {:>12}\n", "tensor", "shape", "params");
        for row in &self.tensors {
            s += &format!("{:<28} {:>20} {:>12}\n", row.name, format!("{:?}", row.shape), row.count);
        }
        for b in &self.block_totals {
            s += &format!("block {:<22} {:>33}\n", b.block, b.params);
        }
        s += &format!(
            "total ({}) {:>44}\nparams (M) {:>45.2}\nsize (MB) {:>46.2}\n",
            self.mode, self.total, self.millions, self.size_mb
        );
        s
    }
}
