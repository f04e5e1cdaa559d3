//! Closed-form FLOPs and parameter accounting.
//!
//! One multiply-accumulate counts as one FLOP, the convention of common
//! ViT FLOPs counters. Counted: patch embedding, QKV and output
//! projections, `QKᵀ`, `AV`, both FFN matmuls, adapters, the head, token
//! merging arithmetic, and LayerNorm at [`LN_FLOPS_PER_ELEMENT`]. Softmax,
//! GELU, ReLU, residual additions and bias additions count as zero.

use std::fmt::Write as _;

use crate::adapter::{self, AdapterVariant};
use crate::engine::is_trainable_name;
use crate::error::Result;
use crate::sparsify::{keep_count, Operator, Strategy};
use crate::vit::{param_shapes, predictor_hidden, ModelPlan, ViTConfig};

/// Mean, variance, normalize, scale and shift.
pub const LN_FLOPS_PER_ELEMENT: u64 = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    /// 1-based layer index.
    pub layer: usize,
    pub token_count_in: usize,
    pub token_count_out: usize,
    /// LN1, projections and both attention products on the input tokens.
    pub mha_flops: u64,
    /// LN2 and both FFN matmuls on the output tokens.
    pub ffn_flops: u64,
    pub adapter_flops: u64,
    pub sparsify_flops: u64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.mha_flops + self.ffn_flops + self.adapter_flops + self.sparsify_flops
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub embed_flops: u64,
    /// Final LayerNorm on CLS plus the classifier.
    pub head_flops: u64,
    pub total_flops: u64,
    pub gflops: f64,
    pub total_params: usize,
    pub trainable_params: usize,
    /// Trainable parameters outside the classifier head.
    pub adapter_params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub trainable_excluding_head: usize,
}

/// Token count (CLS included) at the output of every layer.
pub fn token_schedule(cfg: &ViTConfig, plan: &ModelPlan) -> Result<Vec<usize>> {
    cfg.validate()?;
    plan.validate(cfg)?;
    let mut n = cfg.num_tokens();
    let mut out = Vec::with_capacity(cfg.num_layers);
    for layer in 1..=cfg.num_layers {
        if let Some(s) = plan.sparsify.as_ref().filter(|s| s.at(layer)) {
            n = s.output_count(n)?;
        }
        out.push(n);
    }
    Ok(out)
}

fn layer_norm_flops(tokens: usize, c: usize) -> u64 {
    LN_FLOPS_PER_ELEMENT * (tokens * c) as u64
}

fn mha_flops(n: usize, c: usize) -> u64 {
    let (n, c) = (n as u64, c as u64);
    4 * n * c * c + 2 * n * n * c
}

fn sparsify_flops(plan: &crate::sparsify::SparsifyPlan, n_in: usize, c: usize) -> Result<u64> {
    let k = keep_count(n_in, plan.keep_rate)?;
    let non_cls = n_in - 1;
    let c64 = c as u64;
    let merge = |discarded: usize| -> u64 {
        match plan.strategy {
            Strategy::Merge => (discarded * c) as u64,
            Strategy::Drop | Strategy::Argmax => 0,
        }
    };
    Ok(match plan.operator {
        Operator::Evit => merge(non_cls - k),
        Operator::DynamicVit => {
            let h = predictor_hidden(c) as u64;
            non_cls as u64 * (c64 * h + h) + merge(non_cls - k)
        }
        Operator::Tome => {
            if k >= non_cls {
                0
            } else {
                let a = non_cls.div_ceil(2) as u64;
                let b = (non_cls / 2) as u64;
                let merged = (non_cls - k).min(non_cls.div_ceil(2)) as u64;
                a * b * c64 + merged * c64
            }
        }
    })
}

fn adapter_flops(plan: &crate::adapter::AdapterPlan, layer: usize, n: usize, c: usize) -> u64 {
    let k = adapter::source_count(layer) as u64;
    let cd = (c * plan.bottleneck) as u64;
    let per_token = match plan.variant {
        AdapterVariant::Inner => k * cd + cd,
        AdapterVariant::Input => 2 * cd,
        AdapterVariant::Output => 2 * k * cd,
    };
    n as u64 * per_token
}

/// Exact parameter counts from the shape table.
pub fn count_params(cfg: &ViTConfig, plan: &ModelPlan) -> Result<ParamCount> {
    cfg.validate()?;
    plan.validate(cfg)?;
    let mut pc = ParamCount {
        total: 0,
        trainable: 0,
        trainable_excluding_head: 0,
    };
    for (name, shape) in param_shapes(cfg, plan) {
        let n: usize = shape.iter().product();
        pc.total += n;
        if is_trainable_name(&name) {
            pc.trainable += n;
            if !name.starts_with("head.") {
                pc.trainable_excluding_head += n;
            }
        }
    }
    Ok(pc)
}

/// Analytic cost of one forward pass on a single image.
pub fn count_flops(cfg: &ViTConfig, plan: &ModelPlan) -> Result<CostReport> {
    let schedule = token_schedule(cfg, plan)?;
    let c = cfg.embed_dim;
    let (n0, h) = (cfg.num_tokens(), cfg.ffn_hidden as u64);
    let embed_flops = (cfg.num_patches() * cfg.patch_dim() * c) as u64;
    let head_flops = layer_norm_flops(1, c) + (c * cfg.num_classes) as u64;

    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut n_in = n0;
    for (i, &n_out) in schedule.iter().enumerate() {
        let layer = i + 1;
        let mha = layer_norm_flops(n_in, c) + mha_flops(n_in, c);
        let ffn = layer_norm_flops(n_out, c) + 2 * n_out as u64 * c as u64 * h;
        let sparsify = match plan.sparsify.as_ref().filter(|s| s.at(layer)) {
            Some(s) => sparsify_flops(s, n_in, c)?,
            None => 0,
        };
        let adapter = plan
            .adapter
            .as_ref()
            .map_or(0, |a| adapter_flops(a, layer, n_out, c));
        layers.push(LayerCost {
            layer,
            token_count_in: n_in,
            token_count_out: n_out,
            mha_flops: mha,
            ffn_flops: ffn,
            adapter_flops: adapter,
            sparsify_flops: sparsify,
        });
        n_in = n_out;
    }
    let total_flops = embed_flops + head_flops + layers.iter().map(LayerCost::total).sum::<u64>();
    let params = count_params(cfg, plan)?;
    Ok(CostReport {
        layers,
        embed_flops,
        head_flops,
        total_flops,
        gflops: total_flops as f64 / 1e9,
        total_params: params.total,
        trainable_params: params.trainable,
        adapter_params: params.trainable_excluding_head,
    })
}

impl CostReport {
    /// Human-readable table, one row per layer.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>6} {:>14} {:>14} {:>12} {:>10}",
            "layer", "tok_in", "tok_out", "mha_flops", "ffn_flops", "adapter", "sparsify"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>6} {:>14} {:>14} {:>12} {:>10}",
                l.layer,
                l.token_count_in,
                l.token_count_out,
                l.mha_flops,
                l.ffn_flops,
                l.adapter_flops,
                l.sparsify_flops
            );
        }
        let _ = writeln!(s, "embed_flops  {}", self.embed_flops);
        let _ = writeln!(s, "head_flops   {}", self.head_flops);
        let _ = writeln!(s, "total_flops  {}", self.total_flops);
        let _ = writeln!(s, "GFLOPs       {:.2}", self.gflops);
        let _ = writeln!(
            s,
            "params       {:.2} M total, {:.2} M trainable, {:.2} M adapter",
            self.total_params as f64 / 1e6,
            self.trainable_params as f64 / 1e6,
            self.adapter_params as f64 / 1e6
        );
        s
    }

    /// `key=value` lines for machine diffing. Per-layer keys are
    /// `layer.<i>.<field>`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let i = l.layer;
            let _ = writeln!(s, "layer.{i}.token_count_in={}", l.token_count_in);
            let _ = writeln!(s, "layer.{i}.token_count_out={}", l.token_count_out);
            let _ = writeln!(s, "layer.{i}.mha_flops={}", l.mha_flops);
            let _ = writeln!(s, "layer.{i}.ffn_flops={}", l.ffn_flops);
            let _ = writeln!(s, "layer.{i}.adapter_flops={}", l.adapter_flops);
            let _ = writeln!(s, "layer.{i}.sparsify_flops={}", l.sparsify_flops);
        }
        let _ = writeln!(s, "embed_flops={}", self.embed_flops);
        let _ = writeln!(s, "head_flops={}", self.head_flops);
        let _ = writeln!(s, "total_flops={}", self.total_flops);
        let _ = writeln!(s, "gflops={:.4}", self.gflops);
        let _ = writeln!(s, "total_params={}", self.total_params);
        let _ = writeln!(s, "trainable_params={}", self.trainable_params);
        let _ = writeln!(s, "adapter_params={}", self.adapter_params);
        s
    }
}
