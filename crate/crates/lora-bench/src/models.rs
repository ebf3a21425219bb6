use lora_construct::fnn::random_fnn;
use lora_construct::linear::LinearChain;
use lora_construct::matrix::{random_matrix, seeded_rng, InitScheme};
use lora_construct::tfn::{random_tfn, HeadType};
use lora_construct::train::{pretrain_toward, Model, PretrainConfig};

use crate::config::{ModelKind, Variant};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dim: usize,
    pub depth: usize,
    pub target_depth: usize,
    pub heads: usize,
    pub head_type: HeadType,
}

/// Frozen and target models for one seed. Attention models use the same depth
/// for both; chains and ReLU models use `target_depth` for the target.
pub fn generate_models(spec: &ModelSpec, variant: Variant, seed: u64, pretrain: &PretrainConfig) -> Result<(Model, Model), BenchError> {
    let mut rng = seeded_rng(seed);
    let (d, l) = (spec.dim, spec.depth);
    let (frozen, target) = match spec.kind {
        ModelKind::Linear => {
            let mut chain = |n: usize| {
                let ws = (0..n).map(|_| random_matrix(d, d, InitScheme::XavierUniform, &mut rng)).collect();
                LinearChain::new(ws).expect("square factors")
            };
            let f = chain(l);
            let t = chain(spec.target_depth);
            (Model::Linear(f), Model::Linear(t))
        }
        ModelKind::Fnn => {
            let f = random_fnn(d, l, &mut rng);
            let t = random_fnn(d, spec.target_depth, &mut rng);
            (Model::Fnn(f), Model::Fnn(t))
        }
        ModelKind::Tfn => {
            let f = random_tfn(d, l, spec.heads, spec.head_type, &mut rng);
            let t = random_tfn(d, l, spec.heads, spec.head_type, &mut rng);
            (Model::Tfn(f), Model::Tfn(t))
        }
    };
    match variant {
        Variant::Random => Ok((frozen, target)),
        Variant::Pretrained => {
            let cfg = PretrainConfig {
                seed,
                ..pretrain.clone()
            };
            let out = pretrain_toward(&frozen, &target, 1.0 / 3.0, &cfg)?;
            Ok((out.model, target))
        }
    }
}
