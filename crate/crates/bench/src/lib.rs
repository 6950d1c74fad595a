//! Shared fixtures for the benchmark targets.

use routembed_core::model::{BackboneConfig, Model};
use routembed_core::world::{annotate_and_filter, generate_corpus, Corpus, JudgeAssignment, WorldSpec};

/// Desk-scale model with non-zero adapters, as after a little training.
pub fn bench_model() -> Model {
    let model = Model::new(BackboneConfig::default(), 7).unwrap();
    let mut rng = routembed_core::Rng::new(7, routembed_core::Stream::Init);
    for prefix in ["adapter.reasoning", "adapter.embedding"] {
        for (_, p) in model.params_with_prefix(prefix) {
            let bumped: Vec<f64> = p
                .to_vec()
                .iter()
                .map(|x| x + 0.02 * rng.next_gaussian())
                .collect();
            p.set_data(&bumped);
        }
    }
    model
}

pub fn bench_corpus() -> Corpus {
    let spec = WorldSpec {
        n_attributes: 32,
        n_targets: 64,
        n_easy: 32,
        n_hard: 32,
        hard_rule_depth: 2,
        teacher_noise: 0.0,
        seed: 7,
    };
    let mut corpus = generate_corpus(&spec).unwrap();
    annotate_and_filter(&mut corpus, &spec, JudgeAssignment::default());
    corpus
}
