//! Glue shared by the CLI and the acceptance suite: deterministic corpus
//! and split construction from an [`ExperimentConfig`].

use rayon::prelude::*;

use crate::data::{build_splits, generate_sample, GeneratorFamily, SampleRecord, Splits};
use crate::eval::RunMeta;
use crate::io::ExperimentConfig;
use crate::model::{pretrain_toy, DualEncoder, PretrainOptions, Vocabulary};

/// Pre-training sample seeds live far away from the adapt/eval ranges so the
/// corpora never overlap.
const PRETRAIN_SEED_OFFSET: u64 = 1 << 32;

/// Captioned pre-training corpus over all four families (the stand-in for
/// web-scale pre-training exposure); adaptation itself only ever sees
/// REAL + GAN_LIKE.
pub fn pretrain_corpus(config: &ExperimentConfig) -> Vec<SampleRecord> {
    let side = config.image_side;
    let base = config.seed.wrapping_add(PRETRAIN_SEED_OFFSET);
    (0..config.pretrain_size)
        .into_par_iter()
        .map(|i| {
            let family = GeneratorFamily::ALL[i % 4];
            let category = ((i / 4) as u32) % config.categories;
            generate_sample(family, category, base.wrapping_add(i as u64), side)
        })
        .collect()
}

/// Train/eval splits for the adapt-on-one-generator protocol, with the
/// evaluation sets filtered to the configured families.
pub fn splits_from_config(config: &ExperimentConfig) -> crate::data::Result<Splits> {
    let mut splits = build_splits(&crate::data::SplitSpec {
        train_size: config.train_size,
        eval_size: config.eval_size,
        categories: config.categories,
        seed: config.seed,
    })?;
    let wanted: Vec<GeneratorFamily> = config
        .families
        .iter()
        .map(|f| GeneratorFamily::parse(f))
        .collect::<crate::data::Result<_>>()?;
    splits.eval.retain(|(family, _)| wanted.contains(family));
    Ok(splits)
}

pub fn run_meta(config: &ExperimentConfig, strategy: &str) -> RunMeta {
    RunMeta {
        strategy: strategy.to_string(),
        seed: config.seed,
        config_digest: config.digest(),
    }
}

/// Initialize and contrastively pre-train a backbone per the config.
pub fn pretrain_from_config(
    config: &ExperimentConfig,
) -> crate::model::Result<(DualEncoder<f32>, Vec<f64>)> {
    let mut model = DualEncoder::init(config.encoder_config(), Vocabulary::standard(), config.seed)?;
    let corpus = pretrain_corpus(config);
    let curve = pretrain_toy(
        &mut model,
        &corpus,
        &PretrainOptions {
            epochs: config.pretrain_epochs,
            batch: config.batch,
            lr: config.pretrain_lr,
            seed: config.seed,
        },
    )?;
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrain_corpus_is_deterministic_and_disjoint_from_splits() {
        let mut config = ExperimentConfig::default();
        config.set("train.pretrain_size", "16").unwrap();
        config.set("data.train_size", "8").unwrap();
        config.set("data.eval_size", "4").unwrap();
        let a = pretrain_corpus(&config);
        let b = pretrain_corpus(&config);
        assert_eq!(a.len(), 16);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bits_eq(&y.image));
        }
        let splits = splits_from_config(&config).unwrap();
        let split_seeds: std::collections::BTreeSet<u64> = splits
            .train
            .iter()
            .chain(splits.eval.iter().flat_map(|(_, s)| s.iter()))
            .map(|k| k.seed)
            .collect();
        assert!(a.iter().all(|s| !split_seeds.contains(&s.seed)));
    }
}
