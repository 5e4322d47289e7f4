use rayon::prelude::*;

use crate::adapt::{train_adaptation, AdaptedModel, StrategySpec, TrainOptions};
use crate::data::{build_splits, gaussian_blur, jpeg_roundtrip, GeneratorFamily, Image, SampleKey, SplitSpec};
use crate::model::DualEncoder;
use crate::tensor::Element;

use super::metrics::{accuracy_at_threshold, average_precision, ScoredItem};
use super::{EvalError, MetricsReport, ReportRow, Result, RunMeta, SweepCell, SweepResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Identity,
    Jpeg(u32),
    Blur(f64),
}

impl Perturbation {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Perturbation::Identity => "identity",
            Perturbation::Jpeg(_) => "jpeg",
            Perturbation::Blur(_) => "blur",
        }
    }

    pub fn parameter(&self) -> f64 {
        match self {
            Perturbation::Identity => 0.0,
            Perturbation::Jpeg(q) => *q as f64,
            Perturbation::Blur(s) => *s,
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        Ok(match self {
            Perturbation::Identity => img.clone(),
            Perturbation::Jpeg(q) => jpeg_roundtrip(img, *q)?,
            Perturbation::Blur(s) => gaussian_blur(img, *s)?,
        })
    }
}

/// Score every sample of an eval set, optionally after a perturbation.
/// Images are generated, perturbed, and classified independently, so the
/// fan-out is parallel with deterministic, order-preserving results.
pub fn score_eval_set<E: Element>(
    model: &AdaptedModel<E>,
    keys: &[SampleKey],
    perturb: Perturbation,
) -> Result<Vec<ScoredItem>> {
    let side = model.backbone.config.image_side;
    keys.par_iter()
        .map(|key| {
            let img = key.generate(side).image;
            let img = perturb.apply(&img)?;
            let score = model.classify(&img)?;
            Ok(ScoredItem::new(score, key.label(), key.source_id()))
        })
        .collect()
}

/// Unperturbed per-family evaluation with mAP/mean-accuracy aggregates.
pub fn evaluate_families<E: Element>(
    model: &AdaptedModel<E>,
    eval: &[(GeneratorFamily, Vec<SampleKey>)],
    meta: RunMeta,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(eval.len());
    for (family, keys) in eval {
        let items = score_eval_set(model, keys, Perturbation::Identity)?;
        rows.push(report_row(family, keys, &items)?);
    }
    Ok(MetricsReport::from_rows(meta, rows))
}

fn report_row(
    family: &GeneratorFamily,
    keys: &[SampleKey],
    items: &[ScoredItem],
) -> Result<ReportRow> {
    let n_fake = keys.iter().filter(|k| k.label() == 1).count();
    Ok(ReportRow {
        dataset: format!("real_vs_{}", family.name()),
        family: family.name().to_string(),
        n_real: keys.len() - n_fake,
        n_fake,
        ap: average_precision(items)?,
        acc: accuracy_at_threshold(items, 0.5)?,
    })
}

/// The post-processing grid: identity baseline plus every JPEG quality and
/// blur sigma, for every eval family. Failures are captured per cell and the
/// sweep continues.
pub fn robustness_sweep<E: Element>(
    model: &AdaptedModel<E>,
    eval: &[(GeneratorFamily, Vec<SampleKey>)],
    qualities: &[u32],
    sigmas: &[f64],
    meta: RunMeta,
) -> SweepResult {
    let mut perturbations = vec![Perturbation::Identity];
    perturbations.extend(qualities.iter().map(|&q| Perturbation::Jpeg(q)));
    perturbations.extend(sigmas.iter().map(|&s| Perturbation::Blur(s)));

    let mut cells = Vec::with_capacity(perturbations.len() * eval.len());
    for (family, keys) in eval {
        let n_fake = keys.iter().filter(|k| k.label() == 1).count();
        for &p in &perturbations {
            let mut cell = SweepCell {
                family: family.name().to_string(),
                perturbation: p.kind_name().to_string(),
                parameter: p.parameter(),
                n_real: keys.len() - n_fake,
                n_fake,
                ap: None,
                acc: None,
                error: None,
            };
            let outcome = score_eval_set(model, keys, p).and_then(|items| {
                Ok((
                    average_precision(&items)?,
                    accuracy_at_threshold(&items, 0.5)?,
                ))
            });
            match outcome {
                Ok((ap, acc)) => {
                    cell.ap = Some(ap);
                    cell.acc = Some(acc);
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cells.push(cell);
        }
    }
    SweepResult { meta, cells }
}

/// Train-size ablation over nested subsets: under one seed, smaller train
/// sets are exact prefixes of larger ones. Each size trains a fresh strategy
/// and evaluates on every family.
#[allow(clippy::too_many_arguments)]
pub fn size_ablation<E: Element>(
    backbone: &DualEncoder<E>,
    spec: StrategySpec,
    sizes: &[usize],
    eval_size: usize,
    categories: u32,
    split_seed: u64,
    opts: &TrainOptions,
    meta: &RunMeta,
) -> Result<Vec<(usize, MetricsReport)>> {
    let ascending_even = sizes.windows(2).all(|w| w[0] < w[1])
        && sizes.iter().all(|s| s % 2 == 0)
        && !sizes.is_empty();
    if !ascending_even {
        return Err(EvalError::BadAblationSizes(sizes.to_vec()));
    }
    let max = *sizes.last().expect("non-empty");
    let splits = build_splits(&SplitSpec {
        train_size: max,
        eval_size,
        categories,
        seed: split_seed,
    })?;

    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let train = &splits.train[..size];
        let (model, _) = train_adaptation(backbone.clone(), spec, train, opts)
            .map_err(|e| EvalError::AblationSize {
                size,
                source: Box::new(e),
            })?;
        let mut run_meta = meta.clone();
        run_meta.strategy = format!("{}@{}", spec.kind_name(), size);
        out.push((size, evaluate_families(&model, &splits.eval, run_meta)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::AdaptedModel;
    use crate::model::{EncoderConfig, Vocabulary};

    fn tiny_model() -> AdaptedModel<f32> {
        let config = EncoderConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            d_embed: 16,
            patch_size: 8,
            image_side: 16,
            context_len: 16,
        };
        let backbone = DualEncoder::init(config, Vocabulary::standard(), 3).unwrap();
        AdaptedModel::new(backbone, StrategySpec::PromptTune { m: 4 }, 1).unwrap()
    }

    fn tiny_eval() -> Vec<(GeneratorFamily, Vec<SampleKey>)> {
        build_splits(&SplitSpec {
            train_size: 4,
            eval_size: 8,
            categories: 4,
            seed: 21,
        })
        .unwrap()
        .eval
    }

    #[test]
    fn identity_cell_matches_plain_report_bitwise() {
        let model = tiny_model();
        let eval = tiny_eval();
        let report = evaluate_families(&model, &eval, RunMeta::default()).unwrap();
        let sweep = robustness_sweep(&model, &eval, &[75], &[1.0], RunMeta::default());
        for row in &report.rows {
            let cell = sweep
                .cells
                .iter()
                .find(|c| c.family == row.family && c.perturbation == "identity")
                .unwrap();
            assert_eq!(cell.ap.unwrap().to_bits(), row.ap.to_bits());
            assert_eq!(cell.acc.unwrap().to_bits(), row.acc.to_bits());
        }
    }

    #[test]
    fn grid_shape() {
        let model = tiny_model();
        let eval = tiny_eval();
        let sweep = robustness_sweep(&model, &eval, &[75, 50], &[1.0, 2.0], RunMeta::default());
        // (identity + 2 jpeg + 2 blur) per family
        assert_eq!(sweep.cells.len(), 5 * eval.len());
        for cell in &sweep.cells {
            assert!(cell.error.is_none(), "{:?}", cell.error);
            assert!(cell.ap.is_some() && cell.acc.is_some());
        }
    }

    #[test]
    fn scoring_is_deterministic() {
        let model = tiny_model();
        let eval = tiny_eval();
        let a = score_eval_set(&model, &eval[0].1, Perturbation::Jpeg(75)).unwrap();
        let b = score_eval_set(&model, &eval[0].1, Perturbation::Jpeg(75)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_rejects_bad_sizes() {
        let model = tiny_model();
        let opts = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        for sizes in [vec![], vec![4, 2], vec![3, 5], vec![2, 2]] {
            let err = size_ablation(
                &model.backbone,
                StrategySpec::LinearProbe,
                &sizes,
                4,
                4,
                9,
                &opts,
                &RunMeta::default(),
            )
            .unwrap_err();
            assert!(matches!(err, EvalError::BadAblationSizes(_)), "{sizes:?}");
        }
    }

    #[test]
    fn ablation_runs_and_is_reproducible() {
        let model = tiny_model();
        let opts = TrainOptions {
            epochs: 1,
            batch: 4,
            seed: 3,
            lr: None,
            augment: false,
        };
        let run = || {
            size_ablation(
                &model.backbone,
                StrategySpec::LinearProbe,
                &[4, 8],
                4,
                4,
                9,
                &opts,
                &RunMeta::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 2);
        for ((sa, ra), (sb, rb)) in a.iter().zip(&b) {
            assert_eq!(sa, sb);
            assert_eq!(ra, rb);
        }
    }
}
