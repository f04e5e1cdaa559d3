//! ViT encoder with pluggable token sparsification and dense adapters.
//!
//! Layers are pre-norm. Within a layer the order is: attention with
//! residual, optional sparsification, optional adapter on the sparsified
//! tokens, then `ffn(norm(x)) + x + adapter`.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::{self, AdapterPlan, AdapterVariant, AdapterVars, DenseAdapterState};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparsify::{self, Operator, PredictorVars, SparsifyEvent, SparsifyPlan, SparsifyRecord};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// ViT-B/16 at 224 px.
    pub fn vit_b16(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_heads: 12,
            num_layers: 12,
            ffn_hidden: 3072,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "model.image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "model.embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus CLS.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Which optional components are attached to the backbone.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelPlan {
    pub sparsify: Option<SparsifyPlan>,
    pub adapter: Option<AdapterPlan>,
}

impl ModelPlan {
    pub fn plain() -> Self {
        ModelPlan::default()
    }

    /// EViT at r = 0.7 on layers 4, 7, 10 with inner dense adapters, d = 32.
    pub fn sparse_tuning() -> Self {
        ModelPlan {
            sparsify: Some(SparsifyPlan::default()),
            adapter: Some(AdapterPlan::default()),
        }
    }

    /// Default plan with positions rescaled to a shallower encoder:
    /// layer p of 12 maps to ⌈p·L/12⌉, duplicates removed.
    pub fn sparse_tuning_for(num_layers: usize) -> Self {
        let mut plan = ModelPlan::sparse_tuning();
        if let Some(s) = plan.sparsify.as_mut() {
            let mut pos: Vec<usize> = s
                .positions
                .iter()
                .map(|&p| (p * num_layers).div_ceil(12).clamp(1, num_layers.max(1)))
                .collect();
            pos.dedup();
            s.positions = pos;
        }
        plan
    }

    pub fn validate(&self, cfg: &ViTConfig) -> Result<()> {
        if let Some(s) = &self.sparsify {
            s.validate(cfg.num_layers)?;
        }
        if let Some(a) = &self.adapter {
            if a.bottleneck == 0 {
                return Err(Error::config("adapter.d must be positive"));
            }
            if !a.scale.is_finite() {
                return Err(Error::config("adapter.s must be finite"));
            }
        }
        Ok(())
    }

    /// Whether layer `layer` (1-based) sparsifies.
    pub fn sparsifies(&self, layer: usize) -> bool {
        self.sparsify.as_ref().is_some_and(|s| s.at(layer))
    }
}

/// Hidden width of the DynamicViT score head.
pub fn predictor_hidden(dim: usize) -> usize {
    (dim / 4).max(1)
}

/// Ordered named parameter set with per-tensor frozen flags
/// (`frozen == !requires_grad`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Tensor<T>>,
}

pub type ViTWeights<T> = ParamStore<T>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get_index(&self, i: usize) -> Option<(&str, &Tensor<T>)> {
        self.params.get_index(i).map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_index_mut(&mut self, i: usize) -> Option<(&str, &mut Tensor<T>)> {
        self.params.get_index_mut(i).map(|(k, v)| (k.as_str(), v))
    }

    /// Removes and re-inserts a tensor under a new name (keeps position).
    pub fn rename(&mut self, from: &str, to: &str) -> Result<()> {
        let idx = self
            .params
            .get_index_of(from)
            .ok_or_else(|| Error::Contract(format!("no parameter named {from}")))?;
        if self.params.contains_key(to) {
            return Err(Error::Contract(format!("duplicate parameter name {to}")));
        }
        let (_, t) = self.params.shift_remove_index(idx).expect("index exists");
        self.params.shift_insert(idx, to.to_string(), t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Lazily binds store parameters into a graph, one node per parameter.
#[derive(Clone, Debug)]
pub struct ParamBinding {
    vars: Vec<Option<Var>>,
}

impl ParamBinding {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        ParamBinding {
            vars: vec![None; store.len()],
        }
    }

    pub fn get<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        name: &str,
    ) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars[idx] {
            return Ok(v);
        }
        let (_, t) = store.get_index(idx).expect("valid index");
        let v = g.leaf(t);
        self.vars[idx] = Some(v);
        Ok(v)
    }

    /// `(store index, gradient)` for every bound parameter that received one.
    pub fn gradients<'g, T: Scalar>(&self, g: &'g Graph<T>) -> Vec<(usize, &'g [T])> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| g.grad(v)).map(|gr| (i, gr)))
            .collect()
    }

    pub fn var(&self, idx: usize) -> Option<Var> {
        self.vars[idx]
    }
}

/// Head-averaged attention from CLS to every other current token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnTrace<T: Scalar> {
    /// 1-based layer index.
    pub layer: usize,
    pub avg_cls_attn: Vec<T>,
    /// Full CLS attention row (CLS self-term first) for each head.
    pub per_head_cls: Vec<Vec<T>>,
    /// Original patch index of each non-CLS token, `None` for fused tokens.
    pub origins: Vec<Option<usize>>,
    /// Non-CLS positions that leave this layer as themselves (everything
    /// unless the layer sparsifies).
    pub survivors: Vec<usize>,
}

impl<T: Scalar> AttnTrace<T> {
    pub fn from_scores(layer: usize, scores: Vec<T>) -> Self {
        let n = scores.len();
        AttnTrace {
            layer,
            avg_cls_attn: scores,
            per_head_cls: Vec::new(),
            origins: (0..n).map(Some).collect(),
            survivors: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.avg_cls_attn.len()
    }

    pub fn is_empty(&self) -> bool {
        self.avg_cls_attn.is_empty()
    }
}

/// A backbone, its plan and all parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ViTConfig,
    pub plan: ModelPlan,
    pub params: ParamStore<T>,
}

fn block(i: usize) -> String {
    format!("blocks.{i}")
}

/// Every named parameter shape of a configuration, in canonical order.
pub fn param_shapes(cfg: &ViTConfig, plan: &ModelPlan) -> Vec<(String, Vec<usize>)> {
    let c = cfg.embed_dim;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![cfg.patch_dim(), c]),
        ("patch_embed.bias".into(), vec![c]),
        ("cls_token".into(), vec![1, c]),
        ("pos_embed".into(), vec![cfg.num_tokens(), c]),
    ];
    for i in 0..cfg.num_layers {
        let b = block(i);
        out.push((format!("{b}.norm1.weight"), vec![c]));
        out.push((format!("{b}.norm1.bias"), vec![c]));
        for p in ["q", "k", "v", "proj"] {
            out.push((format!("{b}.attn.{p}.weight"), vec![c, c]));
            out.push((format!("{b}.attn.{p}.bias"), vec![c]));
        }
        out.push((format!("{b}.norm2.weight"), vec![c]));
        out.push((format!("{b}.norm2.bias"), vec![c]));
        out.push((format!("{b}.mlp.fc1.weight"), vec![c, cfg.ffn_hidden]));
        out.push((format!("{b}.mlp.fc1.bias"), vec![cfg.ffn_hidden]));
        out.push((format!("{b}.mlp.fc2.weight"), vec![cfg.ffn_hidden, c]));
        out.push((format!("{b}.mlp.fc2.bias"), vec![c]));
        if let Some(s) = &plan.sparsify {
            if s.operator == Operator::DynamicVit && s.at(i + 1) {
                let h = predictor_hidden(c);
                out.push((format!("{b}.adapter.predictor.fc1.weight"), vec![c, h]));
                out.push((format!("{b}.adapter.predictor.fc1.bias"), vec![h]));
                out.push((format!("{b}.adapter.predictor.fc2.weight"), vec![h, 1]));
                out.push((format!("{b}.adapter.predictor.fc2.bias"), vec![1]));
            }
        }
        if let Some(a) = &plan.adapter {
            out.extend(adapter::param_shapes(&format!("{b}.adapter"), i + 1, a, c));
        }
    }
    out.push(("norm.weight".into(), vec![c]));
    out.push(("norm.bias".into(), vec![c]));
    out.push(("head.weight".into(), vec![c, cfg.num_classes]));
    out.push(("head.bias".into(), vec![cfg.num_classes]));
    out
}

/// Fixed 2-D sin-cos positional table (`grid² + 1` rows, CLS row zero).
/// Half the channels encode the column, half the row, each as sin/cos
/// pairs over geometric frequencies.
pub fn sincos_pos_embed<T: Scalar>(grid: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); (grid * grid + 1) * dim];
    let quarter = dim / 4;
    for gy in 0..grid {
        for gx in 0..grid {
            let row = &mut out[(1 + gy * grid + gx) * dim..][..dim];
            for (half, pos) in [(0, gx), (1, gy)] {
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter.max(1) as f64);
                    let a = pos as f64 * omega;
                    row[half * 2 * quarter + k] = T::from_f64_lossy(a.sin());
                    row[half * 2 * quarter + quarter + k] = T::from_f64_lossy(a.cos());
                }
            }
        }
    }
    out
}

fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        })
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Random initialization. Weight matrices draw from a truncated normal
    /// with std `1/√fan_in`, `cls_token` with std 0.02; `pos_embed` is the
    /// fixed 2-D sin-cos table; norms start at one, biases and adapter
    /// up-projections at zero.
    pub fn init(config: ViTConfig, plan: ModelPlan, seed: u64) -> Result<Self> {
        config.validate()?;
        plan.validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&config, &plan) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else if name.contains("norm") {
                vec![T::one(); n]
            } else if name.contains(".adapter.up") {
                vec![T::zero(); n]
            } else if name == "pos_embed" {
                sincos_pos_embed(config.grid(), config.embed_dim)
            } else if name == "cls_token" {
                trunc_normal(&mut rng, n, INIT_STD)
            } else {
                trunc_normal(&mut rng, n, 1.0 / (shape[0] as f64).sqrt())
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Model {
            config,
            plan,
            params,
        })
    }

    /// Builds a model around an existing parameter set, checking that every
    /// expected name is present with the right shape.
    pub fn from_params(config: ViTConfig, plan: ModelPlan, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        plan.validate(&config)?;
        for (name, shape) in param_shapes(&config, &plan) {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::dim("parameter", &shape, t.shape())),
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        Ok(Model {
            config,
            plan,
            params,
        })
    }

    /// Overwrites every parameter whose name satisfies `pred` with small
    /// random values (used to move adapters off their zero start).
    pub fn randomize_where(&mut self, seed: u64, std: f64, pred: impl Fn(&str) -> bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in self.params.iter_mut() {
            if pred(name) {
                let n = t.numel();
                let vals: Vec<T> = (0..n)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0) * std))
                    .collect();
                t.data_mut().copy_from_slice(&vals);
            }
        }
    }
}

/// Splits a `[channels, H, W]` image into row-major flattened patches,
/// each ordered `(channel, row, col)`.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != want {
        return Err(Error::config(format!(
            "image shape {:?} does not match the model's {:?}",
            image.shape(),
            want
        )));
    }
    let (p, s, g) = (cfg.patch_size, cfg.image_size, cfg.grid());
    let data = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..cfg.channels {
                for py in 0..p {
                    let row = (ch * s + gy * p + py) * s + gx * p;
                    out.extend_from_slice(&data[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Forward-pass bookkeeping shared by the layers.
#[derive(Debug)]
pub struct ForwardState<T: Scalar> {
    pub binding: ParamBinding,
    pub traces: Vec<AttnTrace<T>>,
    pub records: Vec<SparsifyRecord<T>>,
    /// Token count (CLS included) at the output of each layer.
    pub token_counts: Vec<usize>,
    pub adapter_state: DenseAdapterState<T>,
    /// Original patch index of each current non-CLS token.
    pub origins: Vec<Option<usize>>,
}

impl<T: Scalar> ForwardState<T> {
    pub fn new(model: &Model<T>) -> Self {
        ForwardState {
            binding: ParamBinding::new(&model.params),
            traces: Vec::new(),
            records: Vec::new(),
            token_counts: Vec::new(),
            adapter_state: DenseAdapterState::new(),
            origins: (0..model.config.num_patches()).map(Some).collect(),
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput<T: Scalar> {
    pub logits: Var,
    pub state: ForwardState<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn traces(&self) -> &[AttnTrace<T>] {
        &self.state.traces
    }

    pub fn token_counts(&self) -> &[usize] {
        &self.state.token_counts
    }
}

fn p<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    st: &mut ForwardState<T>,
    name: &str,
) -> Result<Var> {
    st.binding.get(g, &model.params, name)
}

/// Patch projection, CLS prepend and positional embedding: `[N × C]`.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    st: &mut ForwardState<T>,
    image: &Tensor<T>,
) -> Result<Var> {
    let patches = extract_patches(image, &model.config)?;
    let x = g.constant(&patches);
    let w = p(g, model, st, "patch_embed.weight")?;
    let b = p(g, model, st, "patch_embed.bias")?;
    let tokens = g.linear(x, w, b)?;
    let cls = p(g, model, st, "cls_token")?;
    let all = g.concat_rows(&[cls, tokens])?;
    let pos = p(g, model, st, "pos_embed")?;
    g.add(all, pos)
}

/// Pre-norm multi-head attention with residual. Returns the output tokens,
/// the graph node of the head-averaged CLS attention (`1 × (N−1)`) and its
/// numeric trace.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    st: &mut ForwardState<T>,
    x: Var,
    layer: usize,
) -> Result<(Var, Var, AttnTrace<T>)> {
    let cfg = &model.config;
    if !cfg.embed_dim.is_multiple_of(cfg.num_heads) {
        return Err(Error::config("embed_dim is not divisible by num_heads"));
    }
    let n = g.rows(x);
    if n < 2 {
        return Err(Error::Contract(format!(
            "attention needs at least 2 tokens, got {n}"
        )));
    }
    let b = block(layer - 1);
    let gamma = p(g, model, st, &format!("{b}.norm1.weight"))?;
    let beta = p(g, model, st, &format!("{b}.norm1.bias"))?;
    let h = g.layer_norm(x, gamma, beta, T::from_f64_lossy(LN_EPS))?;
    let proj = |g: &mut Graph<T>, st: &mut ForwardState<T>, which: &str| -> Result<Var> {
        let w = p(g, model, st, &format!("{b}.attn.{which}.weight"))?;
        let bias = p(g, model, st, &format!("{b}.attn.{which}.bias"))?;
        g.linear(h, w, bias)
    };
    let q = proj(g, st, "q")?;
    let k = proj(g, st, "k")?;
    let v = proj(g, st, "v")?;

    let hd = cfg.head_dim();
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut cls_rows: Option<Var> = None;
    let mut per_head_cls = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let qh = g.slice(q, 0, n, i * hd, hd)?;
        let kh = g.slice(k, 0, n, i * hd, hd)?;
        let vh = g.slice(v, 0, n, i * hd, hd)?;
        let scores = g.matmul_nt(qh, kh)?;
        let attn = g.softmax_rows(scores, scale)?;
        per_head_cls.push(g.value(attn)[..n].to_vec());
        heads.push(g.matmul(attn, vh)?);
        let row = g.slice(attn, 0, 1, 1, n - 1)?;
        cls_rows = Some(match cls_rows {
            Some(acc) => g.add(acc, row)?,
            None => row,
        });
    }
    let avg = g.scale(
        cls_rows.expect("num_heads > 0"),
        T::one() / T::from_usize_lossy(cfg.num_heads),
    );
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let wp = p(g, model, st, &format!("{b}.attn.proj.weight"))?;
    let bp = p(g, model, st, &format!("{b}.attn.proj.bias"))?;
    let out = g.linear(concat, wp, bp)?;
    let out = g.add(out, x)?;
    let trace = AttnTrace {
        layer,
        avg_cls_attn: g.value(avg).to_vec(),
        per_head_cls,
        origins: st.origins.clone(),
        survivors: (0..n - 1).collect(),
    };
    Ok((out, avg, trace))
}

#[allow(clippy::too_many_arguments)]
fn sparsify_tokens<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    st: &mut ForwardState<T>,
    plan: &SparsifyPlan,
    x: Var,
    avg: Var,
    trace: &AttnTrace<T>,
    layer: usize,
) -> Result<(Var, SparsifyEvent<T>)> {
    match plan.operator {
        Operator::Evit => sparsify::evit_sparsify_graph(
            g,
            x,
            Some(avg),
            &trace.avg_cls_attn,
            plan.keep_rate,
            plan.strategy,
            layer,
        ),
        Operator::DynamicVit => {
            let b = block(layer - 1);
            let pv = PredictorVars {
                w1: p(g, model, st, &format!("{b}.adapter.predictor.fc1.weight"))?,
                b1: p(g, model, st, &format!("{b}.adapter.predictor.fc1.bias"))?,
                w2: p(g, model, st, &format!("{b}.adapter.predictor.fc2.weight"))?,
                b2: p(g, model, st, &format!("{b}.adapter.predictor.fc2.bias"))?,
            };
            sparsify::dynamicvit_sparsify_graph(g, x, pv, plan.keep_rate, plan.strategy, layer)
        }
        Operator::Tome => {
            let n = g.rows(x);
            let target = sparsify::keep_count(n, plan.keep_rate)?;
            if target >= n - 1 {
                let rec = SparsifyRecord::identity(layer, Operator::Tome, n);
                let out = g.combine_rows(x, Arc::clone(rec.row_plan()))?;
                return Ok((
                    out,
                    SparsifyEvent {
                        record: rec,
                        fused_weights: None,
                    },
                ));
            }
            sparsify::tome_merge_graph(g, x, target, layer)
        }
    }
}

fn bind_adapter<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    st: &mut ForwardState<T>,
    plan: &AdapterPlan,
    layer: usize,
) -> Result<AdapterVars> {
    let prefix = format!("{}.adapter", block(layer - 1));
    let mut vars = AdapterVars::default();
    let k = adapter::source_count(layer);
    let downs = if plan.variant == AdapterVariant::Input {
        1
    } else {
        k
    };
    for i in 1..=downs {
        vars.down.push((
            p(g, model, st, &format!("{prefix}.down{i}.weight"))?,
            p(g, model, st, &format!("{prefix}.down{i}.bias"))?,
        ));
    }
    if plan.variant == AdapterVariant::Output {
        for i in 1..=k {
            vars.up.push((
                p(g, model, st, &format!("{prefix}.up{i}.weight"))?,
                p(g, model, st, &format!("{prefix}.up{i}.bias"))?,
            ));
        }
    } else {
        vars.up.push((
            p(g, model, st, &format!("{prefix}.up.weight"))?,
            p(g, model, st, &format!("{prefix}.up.bias"))?,
        ));
    }
    Ok(vars)
}

/// One encoder layer (1-based `layer`), following the model plan.
pub fn encoder_layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    st: &mut ForwardState<T>,
    x: Var,
    layer: usize,
) -> Result<Var> {
    let (mut x, avg, mut trace) = multi_head_attention(g, model, st, x, layer)?;

    if let Some(plan) = model.plan.sparsify.as_ref().filter(|s| s.at(layer)) {
        let (out, event) = sparsify_tokens(g, model, st, plan, x, avg, &trace, layer)?;
        let provenance = event.record.provenance();
        trace.survivors = provenance.iter().flatten().copied().collect();
        st.origins = provenance
            .into_iter()
            .map(|src| src.and_then(|i| st.origins[i]))
            .collect();
        st.records.push(event.record.clone());
        st.adapter_state.observe(event)?;
        x = out;
    }
    st.traces.push(trace);

    let adapter_out = match &model.plan.adapter {
        Some(plan) => {
            let vars = bind_adapter(g, model, st, plan, layer)?;
            let scale = T::from_f64_lossy(plan.scale);
            Some(adapter::adapter_forward(
                g,
                plan.variant,
                &vars,
                x,
                &mut st.adapter_state,
                layer,
                scale,
            )?)
        }
        None => None,
    };

    let b = block(layer - 1);
    let gamma = p(g, model, st, &format!("{b}.norm2.weight"))?;
    let beta = p(g, model, st, &format!("{b}.norm2.bias"))?;
    let h = g.layer_norm(x, gamma, beta, T::from_f64_lossy(LN_EPS))?;
    let w1 = p(g, model, st, &format!("{b}.mlp.fc1.weight"))?;
    let b1 = p(g, model, st, &format!("{b}.mlp.fc1.bias"))?;
    let h = g.linear(h, w1, b1)?;
    let h = g.gelu(h);
    let w2 = p(g, model, st, &format!("{b}.mlp.fc2.weight"))?;
    let b2 = p(g, model, st, &format!("{b}.mlp.fc2.bias"))?;
    let h = g.linear(h, w2, b2)?;
    let mut out = g.add(h, x)?;
    if let Some(a) = adapter_out {
        out = g.add(out, a)?;
    }
    st.token_counts.push(g.rows(out));
    Ok(out)
}

/// Full forward pass to class logits (`1 × num_classes`).
pub fn vit_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    image: &Tensor<T>,
) -> Result<ForwardOutput<T>> {
    let mut st = ForwardState::new(model);
    let mut x = patch_embed(g, model, &mut st, image)?;
    for layer in 1..=model.config.num_layers {
        x = encoder_layer_forward(g, model, &mut st, x, layer)?;
    }
    let c = model.config.embed_dim;
    let cls = g.slice(x, 0, 1, 0, c)?;
    let gamma = p(g, model, &mut st, "norm.weight")?;
    let beta = p(g, model, &mut st, "norm.bias")?;
    let cls = g.layer_norm(cls, gamma, beta, T::from_f64_lossy(LN_EPS))?;
    let hw = p(g, model, &mut st, "head.weight")?;
    let hb = p(g, model, &mut st, "head.bias")?;
    let logits = g.linear(cls, hw, hb)?;
    Ok(ForwardOutput { logits, state: st })
}

/// Logits, per-layer traces and per-layer token counts.
pub type Inference<T> = (Vec<T>, Vec<AttnTrace<T>>, Vec<usize>);

/// Convenience: logits and per-layer traces without keeping the graph.
pub fn infer<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<Inference<T>> {
    let mut g = Graph::new();
    let out = vit_forward(&mut g, model, image)?;
    Ok((
        g.value(out.logits).to_vec(),
        out.state.traces,
        out.state.token_counts,
    ))
}
