//! Shared fixtures for the benchmarks.

use lcat_core::data::SyntheticSpec;
use lcat_core::{
    generate_synthetic, rng, sample_episode, DatasetStore, Episode, HeadConfig, ModelConfig, ModelParams,
    SamplerConfig, Split,
};

pub struct Fixture {
    pub dataset: DatasetStore,
    pub model: ModelConfig,
    pub params: ModelParams,
    pub episode: Episode,
}

/// Default synthetic dataset, desk-size network and one 5-way 1-shot
/// episode with 5 queries per class.
pub fn desk_fixture(head: HeadConfig) -> Fixture {
    let dataset = generate_synthetic(&SyntheticSpec::default()).expect("synthetic dataset");
    let [c, h, w] = dataset.image_dims();
    let model = ModelConfig {
        net: lcat_core::EmbeddingNetConfig::desk(c, h, w),
        head,
    };
    let mut r = rng::seeded(1);
    let params = model.init_params(&mut r).expect("init");
    let episode = sample_episode(&dataset, &SamplerConfig::new(5, 1, 5, Split::Train), &mut r).expect("episode");
    Fixture {
        dataset,
        model,
        params,
        episode,
    }
}
