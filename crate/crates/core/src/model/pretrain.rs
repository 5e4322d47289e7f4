use crate::data::SampleRecord;
use crate::tensor::{Adam, AdamConfig, Element, SeededRng, Tape, Var};

use super::encoder::DualEncoder;
use super::vocab::{tokenize, TokenSeq};
use super::{ModelError, Result};

/// Symmetric InfoNCE over a batch of matched pairs: cross entropy of
/// image→text similarities with diagonal targets, plus the text→image
/// direction, averaged. `scale` is exp(logit_scale) as a tape variable.
pub fn clip_contrastive_loss<E: Element>(
    tape: &mut Tape<E>,
    image_embs: Var,
    text_embs: Var,
    scale: Var,
) -> Result<Var> {
    let (b, _) = tape.value(image_embs).as_rows();
    let (bt, _) = tape.value(text_embs).as_rows();
    if b < 2 || bt != b {
        return Err(ModelError::BatchTooSmall(b.min(bt)));
    }
    let tt = tape.transpose(text_embs)?;
    let sim = tape.matmul(image_embs, tt)?;
    let sim = tape.mul_scalar(sim, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    let i2t = tape.cross_entropy_with_logits(sim, &targets)?;
    let simt = tape.transpose(sim)?;
    let t2i = tape.cross_entropy_with_logits(simt, &targets)?;
    let total = tape.add(i2t, t2i)?;
    Ok(tape.scale(total, 0.5)?)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch: 32,
            lr: 3e-4,
            seed: 7,
        }
    }
}

/// Contrastive pre-training over captioned samples. Everything trains,
/// including the logit scale (clamped after every step). Returns the
/// per-epoch mean loss curve. Trailing batches smaller than 2 are dropped.
pub fn pretrain_toy<E: Element>(
    model: &mut DualEncoder<E>,
    dataset: &[SampleRecord],
    opts: &PretrainOptions,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if opts.epochs > 0 && dataset.len() < 2 {
        return Err(ModelError::BatchTooSmall(dataset.len()));
    }
    let tokenized: Vec<TokenSeq> = dataset
        .iter()
        .map(|s| tokenize(&s.caption, &model.vocab, model.config.context_len))
        .collect::<Result<_>>()?;

    model.params.set_all_trainable(true);
    let mut opt = Adam::new(AdamConfig::with_lr(opts.lr));
    let rng = SeededRng::new(opts.seed).derive("pretrain");
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut step: u64 = 0;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.derive_u64(epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let vars = model.register(&mut tape)?;
            let mut img_rows = Vec::with_capacity(chunk.len());
            let mut txt_rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (emb, _) = model.encode_image(&mut tape, &vars, &dataset[i].image)?;
                img_rows.push(emb);
                txt_rows.push(model.encode_tokens(&mut tape, &vars, &tokenized[i])?);
            }
            let image_embs = tape.concat_rows(&img_rows)?;
            let text_embs = tape.concat_rows(&txt_rows)?;
            let scale = tape.exp(vars.logit_scale)?;
            let loss = clip_contrastive_loss(&mut tape, image_embs, text_embs, scale)?;
            let loss_val = tape.scalar(loss)?.to_f64();
            if !loss_val.is_finite() {
                return Err(ModelError::NanLoss {
                    step,
                    lr: opts.lr,
                });
            }
            tape.backward(loss)?;
            model.collect_grads(&tape, &vars);
            opt.step(&mut model.params)?;
            model.clamp_logit_scale();
            epoch_loss += loss_val;
            batches += 1;
            step += 1;
        }
        if batches == 0 {
            return Err(ModelError::BatchTooSmall(dataset.len()));
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok(curve)
}
