#![allow(dead_code)]

use posnegdm::classifier::{mc_train, FrozenClassifier, McArch, McTrainConfig, MortalityClassifier};
use posnegdm::data::{
    generate_synthetic_cohort, normalize_states, split_train_test, terminal_states_with_labels, CohortConfig,
    DatasetSplit,
};
use posnegdm::model::DualSightConfig;
use posnegdm::rng::{stream, Stream};
use posnegdm::training::DMTrainConfig;

pub const D: usize = 16;

pub fn small_split(n: usize, seed: u64) -> DatasetSplit {
    let cohort = generate_synthetic_cohort(&CohortConfig {
        n_trajectories: n,
        state_dim: D,
        min_len: 4,
        max_len: 8,
        mortality_target: 0.3,
        seed,
    })
    .unwrap();
    normalize_states(split_train_test(cohort, 0.3, seed).unwrap()).unwrap()
}

pub fn tiny_model_config(d: usize) -> DualSightConfig {
    DualSightConfig {
        n_layers: 2,
        n_heads: 2,
        embed_dim: 8,
        context_length: 3,
        dropout: 0.1,
        state_dim: d,
        n_actions: 25,
        max_timestep: 12,
    }
}

pub fn tiny_train_config(d: usize, iterations: usize) -> DMTrainConfig {
    DMTrainConfig {
        model: tiny_model_config(d),
        batch_size: 8,
        learning_rate: 1e-3,
        warmup_steps: 5,
        iterations,
        ..DMTrainConfig::new(d)
    }
}

pub fn random_classifier(d: usize, seed: u64) -> FrozenClassifier {
    MortalityClassifier::init(McArch::new(d), &mut stream(seed, Stream::Init))
        .unwrap()
        .freeze()
}

pub fn trained_classifier(split: &DatasetSplit) -> FrozenClassifier {
    let (x, y) = terminal_states_with_labels(&split.train);
    let cfg = McTrainConfig {
        max_iterations: 300,
        ..McTrainConfig::default()
    };
    mc_train(&x, &y, &cfg).unwrap().classifier.freeze()
}

/// Classifier whose output is the constant `sigmoid(bias)`.
pub fn constant_classifier(d: usize, bias: f32) -> FrozenClassifier {
    let mut mc = MortalityClassifier::init(McArch::new(d), &mut stream(0, Stream::Init)).unwrap();
    mc.zero_output_layer().unwrap();
    let mut params = mc.params().clone();
    let i = params.find("fc4.bias").unwrap();
    params.get_mut(i).data_mut()[0] = bias;
    MortalityClassifier::from_params(mc.arch().clone(), params).unwrap().freeze()
}
