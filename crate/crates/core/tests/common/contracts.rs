//! Contract checks shared by the focused tests and the acceptance suite.

use sparse_tuning::adapter::{AdapterPlan, AdapterVariant};
use sparse_tuning::data::{synth_dataset, Dataset};
use sparse_tuning::engine::{
    freeze_parameters, frozen_checksum, is_trainable_name, TrainConfig, Trainer,
};
use sparse_tuning::sparsify::SparsifyPlan;
use sparse_tuning::vit::{infer, Model, ModelPlan, ParamStore, ViTConfig};

use super::tiny_config;

pub fn small_config(classes: usize) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        embed_dim: 16,
        num_heads: 2,
        num_layers: 3,
        ffn_hidden: 32,
        num_classes: classes,
    }
}

pub fn small_plan() -> ModelPlan {
    ModelPlan {
        sparsify: Some(SparsifyPlan {
            positions: vec![1, 2],
            keep_rate: 0.7,
            ..SparsifyPlan::default()
        }),
        adapter: Some(AdapterPlan {
            bottleneck: 8,
            ..AdapterPlan::default()
        }),
    }
}

pub fn data(classes: usize, samples: usize, seed: u64) -> Dataset<f32> {
    synth_dataset(classes, samples, seed, 1, 16).unwrap()
}

pub fn train_cfg(epochs: usize, workers: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        base_lr: 3e-3,
        seed: 5,
        workers,
        ..TrainConfig::default()
    }
}

pub fn deeper_config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        num_layers: 4,
        ..tiny_config()
    }
}

pub fn sparse_plan() -> SparsifyPlan {
    SparsifyPlan {
        positions: vec![1, 3],
        keep_rate: 0.5,
        ..SparsifyPlan::default()
    }
}

/// A model with adapters whose up-projections are zero produces the same
/// logits as the same backbone without adapters.
pub fn zero_up_projection_is_identity() {
    let cfg = deeper_config();
    let image =
        sparse_tuning::data::noise_image(&[cfg.channels, cfg.image_size, cfg.image_size], 3);
    for variant in [
        AdapterVariant::Inner,
        AdapterVariant::Input,
        AdapterVariant::Output,
    ] {
        for sparsify in [None, Some(sparse_plan())] {
            let adapter = AdapterPlan {
                variant,
                bottleneck: 4,
                ..AdapterPlan::default()
            };
            let with = ModelPlan {
                sparsify: sparsify.clone(),
                adapter: Some(adapter),
            };
            let mut model = Model::<f64>::init(cfg.clone(), with, 11).unwrap();
            model.randomize_where(12, 0.5, |n| n.contains(".adapter.down"));
            model.randomize_where(13, 0.5, |n| n.contains("norm") || n.ends_with("bias"));
            model
                .params
                .iter_mut()
                .filter(|(n, _)| n.contains(".adapter.up"))
                .for_each(|(_, t)| {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                });

            let mut backbone = ParamStore::new();
            for (n, t) in model
                .params
                .iter()
                .filter(|(n, _)| !n.contains(".adapter."))
            {
                backbone.insert(n, t.clone()).unwrap();
            }
            let without = ModelPlan {
                sparsify,
                adapter: None,
            };
            let plain = Model::from_params(cfg.clone(), without, backbone).unwrap();

            let (a, _, ca) = infer(&model, &image).unwrap();
            let (b, _, cb) = infer(&plain, &image).unwrap();
            assert_eq!(ca, cb);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6, "{variant:?}: {x} vs {y}");
            }
        }
    }
}

/// Trains `steps` steps and checks that frozen tensors are untouched and
/// that exactly the trainable tensors changed.
pub fn freezing_contract(steps: usize) {
    let mut model = Model::<f32>::init(small_config(3), small_plan(), 3).unwrap();
    freeze_parameters(&mut model.params);
    let before_sum = frozen_checksum(&model.params);
    let before = model.params.clone();
    let set = data(3, 16, 4);
    let mut trainer = Trainer::new(train_cfg(1, 1), &model, steps).unwrap();
    for step in 0..steps {
        let idx = [(2 * step) % 16, (2 * step + 1) % 16];
        let images: Vec<_> = idx.iter().map(|&i| &set.images[i]).collect();
        let labels: Vec<_> = idx.iter().map(|&i| set.labels[i]).collect();
        trainer.train_step(&mut model, &images, &labels).unwrap();
    }
    assert_eq!(frozen_checksum(&model.params), before_sum);
    let changed: Vec<&str> = model
        .params
        .iter()
        .zip(before.iter())
        .filter(|((_, a), (_, b))| a.data() != b.data())
        .map(|((n, _), _)| n)
        .collect();
    let trainable: Vec<&str> = model
        .params
        .names()
        .filter(|n| is_trainable_name(n))
        .collect();
    assert_eq!(changed, trainable);
    assert!(trainable
        .iter()
        .all(|n| n.contains("adapter") || n.starts_with("head")));
}
