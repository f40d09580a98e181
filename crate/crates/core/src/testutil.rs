//! Small fixtures shared by unit tests.

use crate::collab::CfEmbeddings;
use crate::corpus::synthetic::{generate, SyntheticSpec};
use crate::corpus::{Corpus, SplitSpec, Task};
use crate::lm::LmConfig;
use crate::numerics::Tensor;
use crate::rng::SplitMix64;
use crate::trainer::{CkfModel, Context, ModelSpec, Variant};

pub fn tiny_corpus(comments: bool) -> Corpus {
    let data = generate(&SyntheticSpec {
        users: 16,
        items: 40,
        per_user: (14, 16),
        comments,
        seed: 3,
    });
    Corpus::build(
        &data,
        &SplitSpec {
            k_core: 0,
            ..SplitSpec::default()
        },
    )
    .unwrap()
}

pub fn random_cf(corpus: &Corpus, d_cf: usize, seed: u64) -> CfEmbeddings {
    let mut rng = SplitMix64::new(seed);
    CfEmbeddings::new(
        Tensor::randn(&[corpus.n_users() + 1, d_cf], 0.5, &mut rng),
        Tensor::randn(&[corpus.n_items(), d_cf], 0.5, &mut rng),
    )
    .unwrap()
}

pub fn tiny_spec(corpus: &Corpus, variant: Variant, tasks: &[Task]) -> ModelSpec {
    ModelSpec {
        lm: LmConfig {
            n_layers: 1,
            n_heads: 2,
            d_llm: 16,
            vocab: corpus.vocab.len(),
            max_len: 192,
            rank: 2,
            ..LmConfig::default()
        },
        h: 4,
        w2_std: 0.02,
        d_cf: 8,
        variant,
        tasks: tasks.to_vec(),
    }
}

pub fn tiny_model(corpus: &Corpus, variant: Variant, tasks: &[Task], seed: u64) -> CkfModel {
    CkfModel::init(tiny_spec(corpus, variant, tasks), None, seed).unwrap()
}

pub fn ctx<'a>(corpus: &'a Corpus, cf: &'a CfEmbeddings) -> Context<'a> {
    Context {
        titles: &corpus.titles,
        vocab: &corpus.vocab,
        cf,
    }
}
