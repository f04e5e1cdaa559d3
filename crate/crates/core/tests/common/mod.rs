#![allow(dead_code)]

use sparse_tuning::autograd::Graph;
use sparse_tuning::data::noise_image;
use sparse_tuning::engine::freeze_parameters;
use sparse_tuning::vit::{vit_forward, Model, ModelPlan, ViTConfig};
use sparse_tuning::Tensor;

pub mod contracts;
pub mod oracle;

/// 2 layers, C = 8, 2 heads, 8×8 single-channel images in 4×4 patches
/// (5 tokens with CLS).
pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        ffn_hidden: 16,
        num_classes: 3,
    }
}

pub fn loss_of(model: &Model<f64>, image: &Tensor<f64>, label: usize) -> f64 {
    let mut g = Graph::new();
    let out = vit_forward(&mut g, model, image).unwrap();
    let l = g.cross_entropy(out.logits, label).unwrap();
    g.value(l)[0]
}

/// Analytic gradient of every parameter requiring one, by name.
pub fn analytic_grads(
    model: &Model<f64>,
    image: &Tensor<f64>,
    label: usize,
) -> Vec<(String, Vec<f64>)> {
    let mut g = Graph::new();
    let out = vit_forward(&mut g, model, image).unwrap();
    let l = g.cross_entropy(out.logits, label).unwrap();
    g.backward(l).unwrap();
    out.state
        .binding
        .gradients(&g)
        .into_iter()
        .map(|(i, gr)| {
            (
                model.params.get_index(i).unwrap().0.to_string(),
                gr.to_vec(),
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Central differences with step `h`; relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    model: &Model<f64>,
    image: &Tensor<f64>,
    label: usize,
    h: f64,
    floor: f64,
) -> (usize, Option<GradMismatch>) {
    let grads = analytic_grads(model, image, label);
    let mut probe = model.clone();
    let mut worst: Option<GradMismatch> = None;
    let mut checked = 0;
    for (name, ga) in grads {
        for (i, &a) in ga.iter().enumerate() {
            let orig = probe.params.get(&name).unwrap().data()[i];
            probe.params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = loss_of(&probe, image, label);
            probe.params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = loss_of(&probe, image, label);
            probe.params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let n = (up - down) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            checked += 1;
            if worst.as_ref().is_none_or(|w| rel > w.rel) {
                worst = Some(GradMismatch {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric: n,
                    rel,
                });
            }
        }
    }
    (checked, worst)
}

/// Tiny model with every adapter and head tensor randomized so that no
/// gradient path is trivially zero.
pub fn tiny_model(plan: ModelPlan, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(tiny_config(), plan, seed).unwrap();
    m.randomize_where(seed + 100, 0.5, |n| {
        n.contains("adapter") || n.contains("head")
    });
    freeze_parameters(&mut m.params);
    m
}

pub fn tiny_image(seed: u64) -> Tensor<f64> {
    noise_image(&[1, 8, 8], seed)
}
