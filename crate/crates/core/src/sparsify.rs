//! Token sparsification operators: CLS-attention top-K with background
//! fusion (EViT), learned score pruning (DynamicViT) and bipartite soft
//! matching (ToMe).
//!
//! Every operator produces a [`SparsifyRecord`] describing exactly which
//! input rows feed each output row, so the same selection can be replayed
//! on other per-token features (the dense-adapter skip connections).
//!
//! Token tensors always carry the CLS token in row 0. Indices stored in a
//! record refer to the *non-CLS* tokens, i.e. row `i + 1` of the input.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::autograd::{combine_rows, normalize_weights, Graph, RowPlan, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::AttnTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Operator {
    #[default]
    Evit,
    DynamicVit,
    Tome,
}

/// What happens to the tokens that are not kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Fuse them into one weighted background token.
    #[default]
    Merge,
    /// Discard them.
    Drop,
    /// Keep only the highest-scoring one of them.
    Argmax,
}

impl FromStr for Operator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evit" => Ok(Operator::Evit),
            "dynamicvit" => Ok(Operator::DynamicVit),
            "tome" => Ok(Operator::Tome),
            other => Err(Error::config(format!(
                "sparsify.operator: unknown operator {other:?} (expected evit|dynamicvit|tome)"
            ))),
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::Evit => "evit",
            Operator::DynamicVit => "dynamicvit",
            Operator::Tome => "tome",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge" => Ok(Strategy::Merge),
            "drop" => Ok(Strategy::Drop),
            "argmax" => Ok(Strategy::Argmax),
            other => Err(Error::config(format!(
                "sparsify.strategy: unknown strategy {other:?} (expected merge|drop|argmax)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Merge => "merge",
            Strategy::Drop => "drop",
            Strategy::Argmax => "argmax",
        })
    }
}

/// Where and how tokens are sparsified. Positions are 1-based layer indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsifyPlan {
    pub operator: Operator,
    pub keep_rate: f64,
    pub positions: Vec<usize>,
    pub strategy: Strategy,
}

impl Default for SparsifyPlan {
    fn default() -> Self {
        SparsifyPlan {
            operator: Operator::Evit,
            keep_rate: 0.7,
            positions: vec![4, 7, 10],
            strategy: Strategy::Merge,
        }
    }
}

impl SparsifyPlan {
    pub fn at(&self, layer: usize) -> bool {
        self.positions.contains(&layer)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        check_keep_rate(self.keep_rate)?;
        for &p in &self.positions {
            if p == 0 || p > num_layers {
                return Err(Error::config(format!(
                    "sparsify.positions: layer {p} outside 1..={num_layers}"
                )));
            }
        }
        let mut sorted = self.positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.positions.len() {
            return Err(Error::config("sparsify.positions: duplicate layer"));
        }
        Ok(())
    }

    /// Token count (CLS included) after one sparsification event on `n`
    /// tokens.
    pub fn output_count(&self, n: usize) -> Result<usize> {
        let k = keep_count(n, self.keep_rate)?;
        let non_cls = n - 1;
        Ok(match self.operator {
            Operator::Tome => 1 + k.max(non_cls - non_cls.div_ceil(2)),
            _ if k == non_cls => n,
            _ => match self.strategy {
                Strategy::Merge | Strategy::Argmax => k + 2,
                Strategy::Drop => k + 1,
            },
        })
    }
}

fn check_keep_rate(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!(
            "keep rate must lie in (0, 1], got {r}"
        )))
    }
}

/// Number of non-CLS tokens kept: `⌈r·(n_tokens − 1)⌉`.
///
/// A relative slack of 1e-9 absorbs binary rounding in `r·(n−1)` (for
/// example `0.7·10 = 7.000000000000001` must give 7, not 8).
pub fn keep_count(n_tokens: usize, r: f64) -> Result<usize> {
    check_keep_rate(r)?;
    if n_tokens < 2 {
        return Err(Error::Contract(format!(
            "keep_count needs CLS plus at least one token, got {n_tokens}"
        )));
    }
    let x = r * (n_tokens - 1) as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil() as usize;
    Ok(k.clamp(1, n_tokens - 1))
}

/// Indices sorted by descending score; ties go to the lower index.
pub fn argsort_descending<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// The extra (non-kept) output row of a sparsification event, if any.
#[derive(Clone, Debug, PartialEq)]
pub enum ExtraToken<T: Scalar> {
    /// Weighted fusion of the discarded tokens; weights sum to one and are
    /// aligned with [`SparsifyRecord::discarded`].
    Fused(Vec<T>),
    /// A single discarded token carried through unchanged.
    Retained(usize),
}

/// Immutable description of one sparsification event.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsifyRecord<T: Scalar> {
    pub layer_index: usize,
    pub operator: Operator,
    /// Token count before the event, CLS included.
    pub input_count: usize,
    /// Non-CLS indices of the surviving tokens, in output order.
    pub kept_indices: Vec<usize>,
    /// Non-CLS indices of the tokens that did not survive on their own.
    pub discarded: Vec<usize>,
    pub extra: Option<ExtraToken<T>>,
    /// ToMe `(a, b)` pairs: token `a` was averaged into token `b`.
    pub merge_pairs: Vec<(usize, usize)>,
    pub output_count: usize,
    plan: Arc<RowPlan<T>>,
}

impl<T: Scalar> SparsifyRecord<T> {
    /// Identity record: nothing removed.
    pub fn identity(layer_index: usize, operator: Operator, input_count: usize) -> Self {
        let kept: Vec<usize> = (0..input_count - 1).collect();
        let plan = (0..input_count).map(|i| vec![(i, T::one())]).collect();
        SparsifyRecord {
            layer_index,
            operator,
            input_count,
            kept_indices: kept,
            discarded: Vec::new(),
            extra: None,
            merge_pairs: Vec::new(),
            output_count: input_count,
            plan: Arc::new(plan),
        }
    }

    pub fn merge_weights(&self) -> &[T] {
        match &self.extra {
            Some(ExtraToken::Fused(w)) => w,
            _ => &[],
        }
    }

    pub fn has_fused_token(&self) -> bool {
        matches!(self.extra, Some(ExtraToken::Fused(_)))
    }

    /// Row plan over the full token rows (CLS included).
    pub fn row_plan(&self) -> &Arc<RowPlan<T>> {
        &self.plan
    }

    /// For each output non-CLS row, the input non-CLS index it represents;
    /// `None` for a fused background token.
    pub fn provenance(&self) -> Vec<Option<usize>> {
        let mut out: Vec<Option<usize>> = self.kept_indices.iter().map(|&i| Some(i)).collect();
        match &self.extra {
            Some(ExtraToken::Fused(_)) => out.push(None),
            Some(ExtraToken::Retained(i)) => out.push(Some(*i)),
            None => {}
        }
        out
    }

    fn from_selection(
        layer_index: usize,
        operator: Operator,
        input_count: usize,
        kept: Vec<usize>,
        discarded: Vec<usize>,
        extra: Option<ExtraToken<T>>,
    ) -> Self {
        let mut plan: RowPlan<T> = vec![vec![(0, T::one())]];
        plan.extend(kept.iter().map(|&i| vec![(i + 1, T::one())]));
        match &extra {
            Some(ExtraToken::Fused(w)) => {
                plan.push(discarded.iter().zip(w).map(|(&i, &w)| (i + 1, w)).collect());
            }
            Some(ExtraToken::Retained(i)) => plan.push(vec![(i + 1, T::one())]),
            None => {}
        }
        let output_count = plan.len();
        SparsifyRecord {
            layer_index,
            operator,
            input_count,
            kept_indices: kept,
            discarded,
            extra,
            merge_pairs: Vec::new(),
            output_count,
            plan: Arc::new(plan),
        }
    }
}

/// A record together with the graph handle of its differentiable fusion
/// weights (EViT only), so replay inside a graph keeps the gradient path.
#[derive(Clone, Debug)]
pub struct SparsifyEvent<T: Scalar> {
    pub record: SparsifyRecord<T>,
    /// Unnormalized weights over `record.discarded`, as a graph node.
    pub fused_weights: Option<Var>,
}

/// Replays a record on any per-token feature matrix (any channel width).
pub fn apply_record<T: Scalar>(
    features: &Tensor<T>,
    record: &SparsifyRecord<T>,
) -> Result<Tensor<T>> {
    let rows = features.rows();
    if rows != record.input_count || features.shape().len() != 2 {
        return Err(Error::Alignment {
            expected: record.input_count,
            found: rows,
        });
    }
    let c = features.cols();
    Tensor::new(
        vec![record.output_count, c],
        combine_rows(features.data(), c, &record.plan),
    )
}

/// In-graph replay of an event on `features`.
pub fn apply_event<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    event: &SparsifyEvent<T>,
) -> Result<Var> {
    let rec = &event.record;
    let rows = g.rows(features);
    if rows != rec.input_count {
        return Err(Error::Alignment {
            expected: rec.input_count,
            found: rows,
        });
    }
    match (event.fused_weights, &rec.extra) {
        (Some(w), Some(ExtraToken::Fused(_))) => {
            let mut head = vec![0];
            head.extend(rec.kept_indices.iter().map(|i| i + 1));
            let kept = g.gather_rows(features, &head)?;
            let disc: Vec<usize> = rec.discarded.iter().map(|i| i + 1).collect();
            let disc_rows = g.gather_rows(features, &disc)?;
            let fused = g.weighted_mean(disc_rows, w)?;
            g.concat_rows(&[kept, fused])
        }
        _ => g.combine_rows(features, Arc::clone(&rec.plan)),
    }
}

/// CLS-attention guided top-K with background fusion.
///
/// `trace` is a graph node holding the head-averaged CLS attention over the
/// `N − 1` non-CLS tokens (any shape with `N − 1` elements); `scores` are
/// its values. Returns the sparsified tokens and the event.
pub fn evit_sparsify_graph<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    trace: Option<Var>,
    scores: &[T],
    keep_rate: f64,
    strategy: Strategy,
    layer_index: usize,
) -> Result<(Var, SparsifyEvent<T>)> {
    let n = g.rows(tokens);
    if scores.len() + 1 != n {
        return Err(Error::Alignment {
            expected: n - 1,
            found: scores.len(),
        });
    }
    let k = keep_count(n, keep_rate)?;
    let order = argsort_descending(scores);
    let kept = order[..k].to_vec();
    let discarded = order[k..].to_vec();
    if discarded.is_empty() {
        let rec = SparsifyRecord::identity_ordered(layer_index, Operator::Evit, n, kept);
        let out = g.combine_rows(tokens, Arc::clone(&rec.plan))?;
        return Ok((
            out,
            SparsifyEvent {
                record: rec,
                fused_weights: None,
            },
        ));
    }
    let (extra, weights_var) = match strategy {
        Strategy::Merge => {
            let raw: Vec<T> = discarded.iter().map(|&i| scores[i]).collect();
            let (normalized, _) = normalize_weights(&raw);
            let wv = match trace {
                Some(t) => {
                    let col = if g.cols(t) == 1 { t } else { g.transpose(t) };
                    Some(g.gather_rows(col, &discarded)?)
                }
                None => None,
            };
            (Some(ExtraToken::Fused(normalized)), wv)
        }
        Strategy::Drop => (None, None),
        Strategy::Argmax => (Some(ExtraToken::Retained(discarded[0])), None),
    };
    let rec =
        SparsifyRecord::from_selection(layer_index, Operator::Evit, n, kept, discarded, extra);
    let event = SparsifyEvent {
        record: rec,
        fused_weights: weights_var,
    };
    let out = apply_event(g, tokens, &event)?;
    Ok((out, event))
}

impl<T: Scalar> SparsifyRecord<T> {
    fn identity_ordered(
        layer_index: usize,
        operator: Operator,
        n: usize,
        kept: Vec<usize>,
    ) -> Self {
        SparsifyRecord::from_selection(layer_index, operator, n, kept, Vec::new(), None)
    }
}

/// Tensor-level EViT: tokens `[N×C]`, trace over the `N − 1` non-CLS tokens.
pub fn evit_sparsify<T: Scalar>(
    tokens: &Tensor<T>,
    trace: &AttnTrace<T>,
    keep_rate: f64,
) -> Result<(Tensor<T>, SparsifyRecord<T>)> {
    evit_sparsify_with(tokens, trace, keep_rate, Strategy::Merge)
}

pub fn evit_sparsify_with<T: Scalar>(
    tokens: &Tensor<T>,
    trace: &AttnTrace<T>,
    keep_rate: f64,
    strategy: Strategy,
) -> Result<(Tensor<T>, SparsifyRecord<T>)> {
    let mut g = Graph::new();
    let x = g.constant(tokens);
    let (out, ev) = evit_sparsify_graph(
        &mut g,
        x,
        None,
        &trace.avg_cls_attn,
        keep_rate,
        strategy,
        trace.layer,
    )?;
    Ok((g.tensor(out), ev.record))
}

/// Parameters of the DynamicViT score head `s = W2·gelu(W1·x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct PredictorWeights<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Graph handles for a bound predictor.
#[derive(Clone, Copy, Debug)]
pub struct PredictorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Learned-score top-K. Kept rows pass through a straight-through gate so
/// their scores receive gradients; merge weights (softmax of the discarded
/// scores) are treated as constants.
pub fn dynamicvit_sparsify_graph<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    predictor: PredictorVars,
    keep_rate: f64,
    strategy: Strategy,
    layer_index: usize,
) -> Result<(Var, SparsifyEvent<T>)> {
    let n = g.rows(tokens);
    let c = g.cols(tokens);
    if g.rows(predictor.w1) != c {
        return Err(Error::dim(
            "dynamicvit predictor",
            g.shape(tokens),
            g.shape(predictor.w1),
        ));
    }
    let k = keep_count(n, keep_rate)?;
    let patch = g.slice(tokens, 1, n - 1, 0, c)?;
    let h = g.linear(patch, predictor.w1, predictor.b1)?;
    let h = g.gelu(h);
    let scores = g.linear(h, predictor.w2, predictor.b2)?;
    let s: Vec<T> = g.value(scores).to_vec();
    let order = argsort_descending(&s);
    let kept = order[..k].to_vec();
    let discarded = order[k..].to_vec();

    let extra = if discarded.is_empty() {
        None
    } else {
        match strategy {
            Strategy::Merge => {
                let max = discarded
                    .iter()
                    .fold(T::neg_infinity(), |m, &i| m.max(s[i]));
                let e: Vec<T> = discarded.iter().map(|&i| (s[i] - max).exp()).collect();
                Some(ExtraToken::Fused(normalize_weights(&e).0))
            }
            Strategy::Drop => None,
            Strategy::Argmax => Some(ExtraToken::Retained(discarded[0])),
        }
    };
    let rec = SparsifyRecord::from_selection(
        layer_index,
        Operator::DynamicVit,
        n,
        kept,
        discarded,
        extra,
    );

    let cls = g.slice(tokens, 0, 1, 0, c)?;
    let kept_rows: Vec<usize> = rec.kept_indices.iter().map(|i| i + 1).collect();
    let kept_x = g.gather_rows(tokens, &kept_rows)?;
    let kept_s = g.gather_rows(scores, &rec.kept_indices)?;
    let gated = g.straight_through(kept_x, kept_s)?;
    let mut parts = vec![cls, gated];
    if let Some(extra) = rec.plan.get(1 + rec.kept_indices.len()) {
        let extra_row = g.combine_rows(tokens, Arc::new(vec![extra.clone()]))?;
        parts.push(extra_row);
    }
    let out = g.concat_rows(&parts)?;
    Ok((
        out,
        SparsifyEvent {
            record: rec,
            fused_weights: None,
        },
    ))
}

pub fn dynamicvit_sparsify<T: Scalar>(
    tokens: &Tensor<T>,
    predictor: &PredictorWeights<T>,
    keep_rate: f64,
) -> Result<(Tensor<T>, SparsifyRecord<T>)> {
    let mut g = Graph::new();
    let x = g.constant(tokens);
    let p = PredictorVars {
        w1: g.constant(&predictor.w1),
        b1: g.constant(&predictor.b1),
        w2: g.constant(&predictor.w2),
        b2: g.constant(&predictor.b2),
    };
    let (out, ev) = dynamicvit_sparsify_graph(&mut g, x, p, keep_rate, Strategy::Merge, 0)?;
    Ok((g.tensor(out), ev.record))
}

/// Cosine similarity; zero vectors are dissimilar to everything.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(x, y)| *x * *y).sum();
    let na = a.iter().map(|x| *x * *x).sum::<T>().sqrt();
    let nb = b.iter().map(|x| *x * *x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot / (na * nb)
    }
}

/// Bipartite soft matching selection over the non-CLS rows of `data`.
///
/// Tokens at even positions form set A, odd positions set B. Each A token
/// proposes its most similar B token; the `m` strongest proposals are merged.
/// Returns the chosen `(a, b)` pairs in proposal-rank order.
pub fn bipartite_matches<T: Scalar>(data: &[T], cols: usize, m: usize) -> Vec<(usize, usize)> {
    let n = data.len() / cols - 1;
    let row = |i: usize| &data[(i + 1) * cols..(i + 2) * cols];
    let a_set: Vec<usize> = (0..n).step_by(2).collect();
    let b_set: Vec<usize> = (1..n).step_by(2).collect();
    if b_set.is_empty() {
        return Vec::new();
    }
    let mut proposals: Vec<(usize, usize, T)> = a_set
        .iter()
        .map(|&a| {
            let mut best = (b_set[0], cosine(row(a), row(b_set[0])));
            for &b in &b_set[1..] {
                let s = cosine(row(a), row(b));
                if s > best.1 {
                    best = (b, s);
                }
            }
            (a, best.0, best.1)
        })
        .collect();
    proposals.sort_by(|x, y| {
        y.2.partial_cmp(&x.2)
            .unwrap_or(Ordering::Equal)
            .then(x.0.cmp(&y.0))
    });
    proposals
        .into_iter()
        .take(m)
        .map(|(a, b, _)| (a, b))
        .collect()
}

/// Merges non-CLS tokens down to `target_count` by bipartite soft matching.
///
/// Surviving tokens keep their relative order; a B token that received
/// merges becomes the mean of itself and every A token merged into it.
/// When fewer than `current − target` merges are possible the reduction is
/// capped at `|A|` and the record reports the achieved count.
pub fn tome_merge_graph<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    target_count: usize,
    layer_index: usize,
) -> Result<(Var, SparsifyEvent<T>)> {
    let n = g.rows(tokens);
    let current = n - 1;
    if target_count >= current {
        return Err(Error::Contract(format!(
            "tome target {target_count} must be below the current count {current}"
        )));
    }
    let a_size = current.div_ceil(2);
    let m = (current - target_count).min(a_size);
    let c = g.cols(tokens);
    let pairs = bipartite_matches(g.value(tokens), c, m);

    let mut absorbed_into = vec![None; current];
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); current];
    for &(a, b) in &pairs {
        absorbed_into[a] = Some(b);
        groups[b].push(a);
    }
    let mut plan: RowPlan<T> = vec![vec![(0, T::one())]];
    let mut kept = Vec::new();
    let mut discarded = Vec::new();
    for i in 0..current {
        if absorbed_into[i].is_some() {
            discarded.push(i);
            continue;
        }
        kept.push(i);
        if groups[i].is_empty() {
            plan.push(vec![(i + 1, T::one())]);
        } else {
            let mut members = vec![i];
            let mut others = groups[i].clone();
            others.sort_unstable();
            members.extend(others);
            let w = T::one() / T::from_usize_lossy(members.len());
            plan.push(members.into_iter().map(|j| (j + 1, w)).collect());
        }
    }
    let output_count = plan.len();
    let rec = SparsifyRecord {
        layer_index,
        operator: Operator::Tome,
        input_count: n,
        kept_indices: kept,
        discarded,
        extra: None,
        merge_pairs: pairs,
        output_count,
        plan: Arc::new(plan),
    };
    let out = g.combine_rows(tokens, Arc::clone(&rec.plan))?;
    Ok((
        out,
        SparsifyEvent {
            record: rec,
            fused_weights: None,
        },
    ))
}

pub fn tome_merge<T: Scalar>(
    tokens: &Tensor<T>,
    target_count: usize,
) -> Result<(Tensor<T>, SparsifyRecord<T>)> {
    let mut g = Graph::new();
    let x = g.constant(tokens);
    let (out, ev) = tome_merge_graph(&mut g, x, target_count, 0)?;
    Ok((g.tensor(out), ev.record))
}
