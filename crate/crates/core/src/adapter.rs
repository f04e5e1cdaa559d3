//! Dense adapters: bottleneck adapters placed in parallel to the FFN that
//! also receive the (re-aligned) outputs of the adapters one and three
//! layers back.
//!
//! For layer `N` (1-based) the inner variant computes
//!
//! ```text
//! down = x_N·Wd1 + b1                     N = 1
//!      + a_{N−1}·Wd2 + b2                 N ≥ 2
//!      + a_{N−3}·Wd3 + b3                 N ≥ 4
//! a_N  = s · (relu(down)·Wu + bu)
//! ```
//!
//! where `a_j` is the adapter output of layer `j`, replayed through every
//! sparsification event that happened after layer `j`. `x_N` is the token
//! tensor after attention and after this layer's own sparsification.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparsify::{apply_event, SparsifyEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AdapterVariant {
    /// Project each input separately, fuse in the bottleneck.
    #[default]
    Inner,
    /// Sum the inputs first, then one bottleneck.
    Input,
    /// One full bottleneck per input, outputs summed.
    Output,
}

impl FromStr for AdapterVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(AdapterVariant::Inner),
            "input" => Ok(AdapterVariant::Input),
            "output" => Ok(AdapterVariant::Output),
            other => Err(Error::config(format!(
                "adapter.variant: unknown variant {other:?} (expected inner|input|output)"
            ))),
        }
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterVariant::Inner => "inner",
            AdapterVariant::Input => "input",
            AdapterVariant::Output => "output",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPlan {
    pub variant: AdapterVariant,
    pub bottleneck: usize,
    pub scale: f64,
}

impl Default for AdapterPlan {
    fn default() -> Self {
        AdapterPlan {
            variant: AdapterVariant::Inner,
            bottleneck: 32,
            scale: 1.0,
        }
    }
}

/// Number of inputs the adapter at 1-based layer `n` reads: the current
/// tokens plus the available skip sources.
pub fn source_count(layer: usize) -> usize {
    match layer {
        1 => 1,
        2 | 3 => 2,
        _ => 3,
    }
}

/// Named parameter shapes of the adapter at 1-based `layer`, with the
/// `prefix` (e.g. `blocks.3.adapter`) prepended.
pub fn param_shapes(
    prefix: &str,
    layer: usize,
    plan: &AdapterPlan,
    dim: usize,
) -> Vec<(String, Vec<usize>)> {
    let d = plan.bottleneck;
    let k = source_count(layer);
    let mut out = Vec::new();
    let down = |out: &mut Vec<(String, Vec<usize>)>, i: usize| {
        out.push((format!("{prefix}.down{i}.weight"), vec![dim, d]));
        out.push((format!("{prefix}.down{i}.bias"), vec![d]));
    };
    match plan.variant {
        AdapterVariant::Inner => {
            (1..=k).for_each(|i| down(&mut out, i));
            out.push((format!("{prefix}.up.weight"), vec![d, dim]));
            out.push((format!("{prefix}.up.bias"), vec![dim]));
        }
        AdapterVariant::Input => {
            down(&mut out, 1);
            out.push((format!("{prefix}.up.weight"), vec![d, dim]));
            out.push((format!("{prefix}.up.bias"), vec![dim]));
        }
        AdapterVariant::Output => {
            for i in 1..=k {
                down(&mut out, i);
                out.push((format!("{prefix}.up{i}.weight"), vec![d, dim]));
                out.push((format!("{prefix}.up{i}.bias"), vec![dim]));
            }
        }
    }
    out
}

/// Graph handles of one layer's adapter weights, `(weight, bias)` pairs.
#[derive(Clone, Debug, Default)]
pub struct AdapterVars {
    pub down: Vec<(Var, Var)>,
    pub up: Vec<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
struct CacheEntry {
    layer: usize,
    output: Var,
    tokens: usize,
}

/// Per-forward-pass cache of adapter outputs and of the sparsification
/// events seen so far.
#[derive(Clone, Debug, Default)]
pub struct DenseAdapterState<T: Scalar> {
    cache: Vec<CacheEntry>,
    events: Vec<SparsifyEvent<T>>,
}

impl<T: Scalar> DenseAdapterState<T> {
    pub fn new() -> Self {
        DenseAdapterState {
            cache: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Registers a sparsification event. Events must arrive in layer order.
    pub fn observe(&mut self, event: SparsifyEvent<T>) -> Result<()> {
        if let Some(last) = self.events.last() {
            if last.record.layer_index >= event.record.layer_index {
                return Err(Error::State(format!(
                    "sparsification event for layer {} after layer {}",
                    event.record.layer_index, last.record.layer_index
                )));
            }
        }
        self.events.push(event);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// `(layer, token count)` of every cached adapter output.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        self.cache.iter().map(|e| (e.layer, e.tokens)).collect()
    }

    pub fn output(&self, layer: usize) -> Option<Var> {
        self.cache
            .iter()
            .find(|e| e.layer == layer)
            .map(|e| e.output)
    }

    /// Cached output of `layer`, replayed through every later event.
    pub fn aligned(&self, g: &mut Graph<T>, layer: usize) -> Result<Var> {
        let entry = self
            .cache
            .iter()
            .find(|e| e.layer == layer)
            .ok_or_else(|| Error::State(format!("no cached adapter output for layer {layer}")))?;
        let mut v = entry.output;
        for ev in self.events.iter().filter(|e| e.record.layer_index > layer) {
            v = apply_event(g, v, ev)?;
        }
        Ok(v)
    }

    fn push(&mut self, layer: usize, output: Var, tokens: usize) {
        self.cache.push(CacheEntry {
            layer,
            output,
            tokens,
        });
    }
}

fn skip_inputs<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    state: &DenseAdapterState<T>,
    layer: usize,
) -> Result<Vec<Var>> {
    let mut inputs = vec![x];
    if layer > 1 {
        inputs.push(state.aligned(g, layer - 1)?);
    }
    if layer > 3 {
        inputs.push(state.aligned(g, layer - 3)?);
    }
    let n = g.rows(x);
    for v in &inputs[1..] {
        if g.rows(*v) != n {
            return Err(Error::Alignment {
                expected: n,
                found: g.rows(*v),
            });
        }
    }
    Ok(inputs)
}

fn check_vars(vars: &AdapterVars, downs: usize, ups: usize, layer: usize) -> Result<()> {
    if vars.down.len() != downs || vars.up.len() != ups {
        return Err(Error::State(format!(
            "adapter at layer {layer} expects {downs} down / {ups} up projections, got {} / {}",
            vars.down.len(),
            vars.up.len()
        )));
    }
    Ok(())
}

fn finish<T: Scalar>(
    g: &mut Graph<T>,
    out: Var,
    scale: T,
    state: &mut DenseAdapterState<T>,
    layer: usize,
) -> Var {
    let out = if scale == T::one() {
        out
    } else {
        g.scale(out, scale)
    };
    state.push(layer, out, g.rows(out));
    out
}

/// Inner-fusion dense adapter at 1-based `layer`.
pub fn dense_adapter_forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &AdapterVars,
    x: Var,
    state: &mut DenseAdapterState<T>,
    layer: usize,
    scale: T,
) -> Result<Var> {
    let inputs = skip_inputs(g, x, state, layer)?;
    check_vars(vars, inputs.len(), 1, layer)?;
    let mut down: Option<Var> = None;
    for (inp, &(w, b)) in inputs.iter().zip(&vars.down) {
        let term = g.linear(*inp, w, b)?;
        down = Some(match down {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let h = g.relu(down.expect("at least one input"));
    let (wu, bu) = vars.up[0];
    let out = g.linear(h, wu, bu)?;
    Ok(finish(g, out, scale, state, layer))
}

/// Early fusion: inputs are summed before a single bottleneck.
pub fn variant_a_forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &AdapterVars,
    x: Var,
    state: &mut DenseAdapterState<T>,
    layer: usize,
    scale: T,
) -> Result<Var> {
    let inputs = skip_inputs(g, x, state, layer)?;
    check_vars(vars, 1, 1, layer)?;
    let mut fused = inputs[0];
    for v in &inputs[1..] {
        fused = g.add(fused, *v)?;
    }
    let (wd, bd) = vars.down[0];
    let h = g.linear(fused, wd, bd)?;
    let h = g.relu(h);
    let (wu, bu) = vars.up[0];
    let out = g.linear(h, wu, bu)?;
    Ok(finish(g, out, scale, state, layer))
}

/// Late fusion: an independent bottleneck per input, outputs summed.
pub fn variant_b_forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &AdapterVars,
    x: Var,
    state: &mut DenseAdapterState<T>,
    layer: usize,
    scale: T,
) -> Result<Var> {
    let inputs = skip_inputs(g, x, state, layer)?;
    check_vars(vars, inputs.len(), inputs.len(), layer)?;
    let mut total: Option<Var> = None;
    for ((inp, &(wd, bd)), &(wu, bu)) in inputs.iter().zip(&vars.down).zip(&vars.up) {
        let h = g.linear(*inp, wd, bd)?;
        let h = g.relu(h);
        let path = g.linear(h, wu, bu)?;
        total = Some(match total {
            Some(acc) => g.add(acc, path)?,
            None => path,
        });
    }
    let out = total.expect("at least one path");
    Ok(finish(g, out, scale, state, layer))
}

/// Dispatches on the variant.
pub fn adapter_forward<T: Scalar>(
    g: &mut Graph<T>,
    variant: AdapterVariant,
    vars: &AdapterVars,
    x: Var,
    state: &mut DenseAdapterState<T>,
    layer: usize,
    scale: T,
) -> Result<Var> {
    match variant {
        AdapterVariant::Inner => dense_adapter_forward(g, vars, x, state, layer, scale),
        AdapterVariant::Input => variant_a_forward(g, vars, x, state, layer, scale),
        AdapterVariant::Output => variant_b_forward(g, vars, x, state, layer, scale),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mat(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Var {
        g.constant(&Tensor::from_rows(rows).unwrap())
    }

    fn vars(g: &mut Graph<f64>, downs: &[f64], ups: &[f64]) -> AdapterVars {
        let mut v = AdapterVars::default();
        for &w in downs {
            v.down.push((mat(g, &[vec![w]]), mat(g, &[vec![0.0]])));
        }
        for &w in ups {
            v.up.push((mat(g, &[vec![w]]), mat(g, &[vec![0.0]])));
        }
        v
    }

    #[test]
    fn zero_input_layer_one_gives_zero() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[vec![0.0], vec![0.0]]);
        let v = vars(&mut g, &[0.7], &[1.3]);
        let mut st = DenseAdapterState::new();
        let out = dense_adapter_forward(&mut g, &v, x, &mut st, 1, 1.0).unwrap();
        assert_eq!(g.value(out), &[0.0, 0.0]);
        assert_eq!(st.schedule(), vec![(1, 2)]);
    }

    #[test]
    fn scalar_recurrence_layer_four() {
        // C = d = 1, every weight 1, biases 0, positive activations:
        // a_N = x_N + a_{N-1} + a_{N-3} (terms present per layer).
        let xs = [1.0, 2.0, 0.5, 3.0];
        let mut g = Graph::new();
        let mut st = DenseAdapterState::new();
        let mut outs = Vec::new();
        for (i, &xv) in xs.iter().enumerate() {
            let layer = i + 1;
            let v = vars(&mut g, &vec![1.0; source_count(layer)], &[1.0]);
            let x = mat(&mut g, &[vec![xv]]);
            let o = dense_adapter_forward(&mut g, &v, x, &mut st, layer, 1.0).unwrap();
            outs.push(g.value(o)[0]);
        }
        // hand recurrence: a1 = 1, a2 = 2 + 1 = 3, a3 = 0.5 + 3 = 3.5,
        // a4 = 3 + a3 + a1 = 3 + 3.5 + 1 = 7.5
        assert_eq!(outs, vec![1.0, 3.0, 3.5, 7.5]);
        assert_eq!(st.len(), 4);
    }

    #[test]
    fn missing_cache_is_state_error() {
        let mut g = Graph::new();
        let x = mat(&mut g, &[vec![1.0]]);
        let v = vars(&mut g, &[1.0, 1.0], &[1.0]);
        let mut st = DenseAdapterState::new();
        let err = dense_adapter_forward(&mut g, &v, x, &mut st, 2, 1.0).unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err}");
    }

    #[test]
    fn misaligned_skip_is_alignment_error() {
        let mut g = Graph::new();
        let mut st = DenseAdapterState::new();
        let x1 = mat(&mut g, &[vec![1.0], vec![1.0], vec![1.0]]);
        let v1 = vars(&mut g, &[1.0], &[1.0]);
        dense_adapter_forward(&mut g, &v1, x1, &mut st, 1, 1.0).unwrap();
        let x2 = mat(&mut g, &[vec![1.0], vec![1.0]]);
        let v2 = vars(&mut g, &[1.0, 1.0], &[1.0]);
        let err = dense_adapter_forward(&mut g, &v2, x2, &mut st, 2, 1.0).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Alignment {
                    expected: 2,
                    found: 3
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn param_counts_per_variant() {
        let plan = |variant| AdapterPlan {
            variant,
            bottleneck: 4,
            scale: 1.0,
        };
        let count = |p: &AdapterPlan, layer| -> usize {
            param_shapes("a", layer, p, 10)
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum()
        };
        // inner, layer > 3: three down (10·4 + 4) and one up (4·10 + 10)
        assert_eq!(count(&plan(AdapterVariant::Inner), 5), 3 * 44 + 50);
        assert_eq!(count(&plan(AdapterVariant::Inner), 1), 44 + 50);
        assert_eq!(count(&plan(AdapterVariant::Input), 5), 44 + 50);
        assert_eq!(count(&plan(AdapterVariant::Output), 5), 3 * (44 + 50));
        assert!(count(&plan(AdapterVariant::Output), 5) > count(&plan(AdapterVariant::Inner), 5));
        for (name, _) in param_shapes("blocks.0.adapter", 4, &plan(AdapterVariant::Output), 10) {
            assert!(name.contains("adapter"));
        }
    }
}
