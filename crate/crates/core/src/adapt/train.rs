use rayon::prelude::*;

use crate::data::{gaussian_blur, jpeg_roundtrip, Image, SampleKey};
use crate::model::DualEncoder;
use crate::tensor::{Adam, AdamConfig, Element, SeededRng, Tape, Tensor};

use super::model::{assemble_prompt, class_word_seq, AdaptedModel, StrategyKind, StrategySpec};
use super::{AdaptError, Result};

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Overrides the strategy's default learning rate when set.
    pub lr: Option<f64>,
    /// Apply random blur/JPEG to training images before feature extraction.
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            seed: 7,
            lr: None,
            augment: false,
        }
    }
}

/// Train one adaptation strategy on a REAL/fake key list. Only the spec's
/// trainable partition is updated; the frozen digest recorded at start makes
/// that verifiable. Returns the adapted model and the per-epoch loss curve.
pub fn train_adaptation<E: Element>(
    backbone: DualEncoder<E>,
    spec: StrategySpec,
    train: &[SampleKey],
    opts: &TrainOptions,
) -> Result<(AdaptedModel<E>, Vec<f64>)> {
    if train.is_empty() {
        return Err(AdaptError::EmptyTrainSet);
    }
    let has_real = train.iter().any(|k| k.label() == 0);
    let has_fake = train.iter().any(|k| k.label() == 1);
    if !(has_real && has_fake) {
        return Err(AdaptError::SingleClassTrainSet);
    }

    let mut model = AdaptedModel::new(backbone, spec, opts.seed)?;
    let lr = opts.lr.unwrap_or_else(|| spec.default_lr());
    let labels: Vec<u8> = train.iter().map(|k| k.label()).collect();

    let curve = match spec.kind() {
        StrategyKind::LinearProbe => {
            let feats = precompute_features(&model.backbone, train, opts, true)?;
            train_on_features(&mut model, &feats, &labels, opts, lr, FeatureLoss::Probe)?
        }
        StrategyKind::PromptTune => {
            let feats = precompute_features(&model.backbone, train, opts, false)?;
            train_on_features(&mut model, &feats, &labels, opts, lr, FeatureLoss::Prompt)?
        }
        StrategyKind::Adapter => {
            let feats = precompute_features(&model.backbone, train, opts, false)?;
            train_on_features(&mut model, &feats, &labels, opts, lr, FeatureLoss::Adapter)?
        }
        StrategyKind::FineTune => train_finetune(&mut model, train, opts, lr)?,
    };

    model.rebuild_class_embeddings()?;
    Ok((model, curve))
}

fn maybe_augment(img: Image, rng: &mut SeededRng) -> Image {
    if rng.next_f64() < 0.5 {
        return img;
    }
    match rng.next_index(4) {
        0 => jpeg_roundtrip(&img, 75).expect("valid quality"),
        1 => jpeg_roundtrip(&img, 50).expect("valid quality"),
        2 => gaussian_blur(&img, 1.0).expect("valid sigma"),
        _ => gaussian_blur(&img, 2.0).expect("valid sigma"),
    }
}

/// Embed every training image once through the frozen backbone.
/// `penultimate` selects the probe feature (pre-projection [CLS]); otherwise
/// the unit image embedding is returned.
fn precompute_features<E: Element>(
    backbone: &DualEncoder<E>,
    train: &[SampleKey],
    opts: &TrainOptions,
    penultimate: bool,
) -> Result<Vec<Vec<E>>> {
    let side = backbone.config.image_side;
    let aug_root = SeededRng::new(opts.seed).derive("augment");
    train
        .par_iter()
        .enumerate()
        .map(|(i, key)| {
            let mut img = key.generate(side).image;
            if opts.augment {
                let mut rng = aug_root.derive_u64(i as u64);
                img = maybe_augment(img, &mut rng);
            }
            let pair = backbone.embed_image(&img)?;
            Ok(if penultimate {
                pair.penultimate
            } else {
                pair.image_emb
            })
        })
        .collect()
}

enum FeatureLoss {
    Probe,
    Prompt,
    Adapter,
}

fn train_on_features<E: Element>(
    model: &mut AdaptedModel<E>,
    feats: &[Vec<E>],
    labels: &[u8],
    opts: &TrainOptions,
    lr: f64,
    loss_kind: FeatureLoss,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let rng = SeededRng::new(opts.seed).derive("train");
    let dim = feats[0].len();
    let scale_val = E::from_f64(model.backbone.logit_scale_value());
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut step: u64 = 0;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..feats.len()).collect();
        rng.derive_u64(epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch) {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                x.extend_from_slice(&feats[i]);
                y.push(labels[i]);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(chunk.len(), dim, x)?)?;

            let loss = match loss_kind {
                FeatureLoss::Probe => {
                    let w = tape.leaf(model.head.tensor("probe.w").clone(), true)?;
                    let b = tape.leaf(model.head.tensor("probe.b").clone(), true)?;
                    let z = tape.matmul(x, w)?;
                    let z = tape.add_row(z, b)?;
                    let loss = tape.binary_cross_entropy_with_logit(z, &y)?;
                    tape.backward(loss)?;
                    copy_head_grads(model, &tape, &[("probe.w", w), ("probe.b", b)]);
                    loss
                }
                FeatureLoss::Prompt => {
                    let vars = model.backbone.register_frozen(&mut tape)?;
                    let ctx = tape.leaf(model.head.tensor("prompt.ctx").clone(), true)?;
                    let (real_seq, real_eos) =
                        assemble_prompt(&mut tape, &model.backbone, &vars, ctx, "real")?;
                    let (fake_seq, fake_eos) =
                        assemble_prompt(&mut tape, &model.backbone, &vars, ctx, "fake")?;
                    let real = model
                        .backbone
                        .encode_embedded(&mut tape, &vars, real_seq, real_eos)?;
                    let fake = model
                        .backbone
                        .encode_embedded(&mut tape, &vars, fake_seq, fake_eos)?;
                    let t = tape.concat_rows(&[real, fake])?;
                    let tt = tape.transpose(t)?;
                    let logits = tape.matmul(x, tt)?;
                    let scale = tape.constant(Tensor::scalar(scale_val))?;
                    let logits = tape.mul_scalar(logits, scale)?;
                    let targets: Vec<usize> = y.iter().map(|&l| l as usize).collect();
                    let loss = tape.cross_entropy_with_logits(logits, &targets)?;
                    tape.backward(loss)?;
                    copy_head_grads(model, &tape, &[("prompt.ctx", ctx)]);
                    loss
                }
                FeatureLoss::Adapter => {
                    let StrategySpec::Adapter { alpha, .. } = model.spec else {
                        unreachable!("adapter loss only built for adapter specs")
                    };
                    let w1 = tape.leaf(model.head.tensor("adapter.w1").clone(), true)?;
                    let b1 = tape.leaf(model.head.tensor("adapter.b1").clone(), true)?;
                    let w2 = tape.leaf(model.head.tensor("adapter.w2").clone(), true)?;
                    let b2 = tape.leaf(model.head.tensor("adapter.b2").clone(), true)?;
                    let h = tape.matmul(x, w1)?;
                    let h = tape.add_row(h, b1)?;
                    let h = tape.relu(h)?;
                    let a = tape.matmul(h, w2)?;
                    let a = tape.add_row(a, b2)?;
                    let scaled_a = tape.scale(a, alpha)?;
                    let kept = tape.scale(x, 1.0 - alpha)?;
                    let blended = tape.add(scaled_a, kept)?;
                    let blended = tape.l2_normalize_rows(blended)?;

                    let embs = model.class_embs.as_ref().expect("built at attach");
                    let mut t_data = embs.real.clone();
                    t_data.extend_from_slice(&embs.fake);
                    let t = tape.constant(Tensor::from_rows(2, dim, t_data)?)?;
                    let tt = tape.transpose(t)?;
                    let logits = tape.matmul(blended, tt)?;
                    let scale = tape.constant(Tensor::scalar(scale_val))?;
                    let logits = tape.mul_scalar(logits, scale)?;
                    let targets: Vec<usize> = y.iter().map(|&l| l as usize).collect();
                    let loss = tape.cross_entropy_with_logits(logits, &targets)?;
                    tape.backward(loss)?;
                    copy_head_grads(
                        model,
                        &tape,
                        &[
                            ("adapter.w1", w1),
                            ("adapter.b1", b1),
                            ("adapter.w2", w2),
                            ("adapter.b2", b2),
                        ],
                    );
                    loss
                }
            };

            let loss_val = tape.scalar(loss)?.to_f64();
            if !loss_val.is_finite() {
                return Err(AdaptError::NanLoss { step, lr });
            }
            adam.step(&mut model.head)?;
            epoch_loss += loss_val;
            batches += 1;
            step += 1;
        }
        curve.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(curve)
}

fn copy_head_grads<E: Element>(
    model: &mut AdaptedModel<E>,
    tape: &Tape<E>,
    vars: &[(&str, crate::tensor::Var)],
) {
    for (name, var) in vars {
        if let Some(g) = tape.grad(*var) {
            model.head.get_mut(name).expect("head param").tensor.grad = Some(g.to_vec());
        }
    }
}

/// CLIP-style fine-tuning with single-word captions. The batch collapses to
/// two unique texts, so the text→image direction treats every same-class
/// image as a positive (mean log-softmax over the class's images).
fn train_finetune<E: Element>(
    model: &mut AdaptedModel<E>,
    train: &[SampleKey],
    opts: &TrainOptions,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let rng = SeededRng::new(opts.seed).derive("train");
    let side = model.backbone.config.image_side;
    let aug_root = SeededRng::new(opts.seed).derive("augment");
    let real_seq = class_word_seq(&model.backbone, "real")?;
    let fake_seq = class_word_seq(&model.backbone, "fake")?;
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut step: u64 = 0;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.derive_u64(epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch) {
            let mut tape = Tape::new();
            let vars = model.backbone.register(&mut tape)?;
            let mut rows = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut img = train[i].generate(side).image;
                if opts.augment {
                    let mut arng = aug_root.derive_u64(i as u64);
                    img = maybe_augment(img, &mut arng);
                }
                let (emb, _) = model.backbone.encode_image(&mut tape, &vars, &img)?;
                rows.push(emb);
                targets.push(train[i].label() as usize);
            }
            let image_embs = tape.concat_rows(&rows)?;
            let real = model.backbone.encode_tokens(&mut tape, &vars, &real_seq)?;
            let fake = model.backbone.encode_tokens(&mut tape, &vars, &fake_seq)?;
            let texts = tape.concat_rows(&[real, fake])?;
            let tt = tape.transpose(texts)?;
            let sim = tape.matmul(image_embs, tt)?;
            let scale = tape.exp(vars.logit_scale)?;
            let sim = tape.mul_scalar(sim, scale)?;

            let i2t = tape.cross_entropy_with_logits(sim, &targets)?;
            let mut positives = vec![Vec::new(), Vec::new()];
            for (row, &t) in targets.iter().enumerate() {
                positives[t].push(row);
            }
            let sim_t = tape.transpose(sim)?;
            let t2i = tape.multi_positive_cross_entropy(sim_t, &positives)?;
            let total = tape.add(i2t, t2i)?;
            let loss = tape.scale(total, 0.5)?;

            let loss_val = tape.scalar(loss)?.to_f64();
            if !loss_val.is_finite() {
                return Err(AdaptError::NanLoss { step, lr });
            }
            tape.backward(loss)?;
            model.backbone.collect_grads(&tape, &vars);
            adam.step(&mut model.backbone.params)?;
            model.backbone.clamp_logit_scale();
            epoch_loss += loss_val;
            batches += 1;
            step += 1;
        }
        curve.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(curve)
}
