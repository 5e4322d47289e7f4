use crate::data::Image;
use crate::model::{tokenize, DualEncoder, ModelVars, EOS_ID, PAD_ID, SOS_ID};
use crate::tensor::{Element, ParamSet, SeededRng, Tape, Tensor, Var};

use super::digest::{freeze_digest, FreezeCheck, FrozenDigest};
use super::{AdaptError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    LinearProbe,
    FineTune,
    PromptTune,
    Adapter,
}

/// One of the four adaptation strategies with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategySpec {
    LinearProbe,
    FineTune { lr: f64 },
    PromptTune { m: usize },
    Adapter { reduction: usize, alpha: f64 },
}

impl StrategySpec {
    pub fn kind(&self) -> StrategyKind {
        match self {
            StrategySpec::LinearProbe => StrategyKind::LinearProbe,
            StrategySpec::FineTune { .. } => StrategyKind::FineTune,
            StrategySpec::PromptTune { .. } => StrategyKind::PromptTune,
            StrategySpec::Adapter { .. } => StrategyKind::Adapter,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind() {
            StrategyKind::LinearProbe => "probe",
            StrategyKind::FineTune => "finetune",
            StrategyKind::PromptTune => "prompt",
            StrategyKind::Adapter => "adapter",
        }
    }

    /// Defaults: prompt M=16, adapter r=2 / alpha=0.2, fine-tune lr=1e-5.
    pub fn from_kind_name(kind: &str) -> Result<Self> {
        match kind {
            "probe" => Ok(StrategySpec::LinearProbe),
            "finetune" => Ok(StrategySpec::FineTune { lr: 1e-5 }),
            "prompt" => Ok(StrategySpec::PromptTune { m: 16 }),
            "adapter" => Ok(StrategySpec::Adapter {
                reduction: 2,
                alpha: 0.2,
            }),
            other => Err(AdaptError::InvalidSpec(format!(
                "unknown strategy kind '{other}'"
            ))),
        }
    }

    pub fn validate(&self, config: &crate::model::EncoderConfig) -> Result<()> {
        match self {
            StrategySpec::LinearProbe => Ok(()),
            StrategySpec::FineTune { lr } => {
                if *lr > 0.0 {
                    Ok(())
                } else {
                    Err(AdaptError::InvalidSpec(format!(
                        "fine-tune lr must be positive, got {lr}"
                    )))
                }
            }
            StrategySpec::PromptTune { m } => {
                if *m == 0 {
                    return Err(AdaptError::InvalidSpec("M must be >= 1".into()));
                }
                if m + 3 > config.context_len {
                    return Err(AdaptError::PromptCapacity {
                        m: *m,
                        context_len: config.context_len,
                    });
                }
                Ok(())
            }
            StrategySpec::Adapter { reduction, alpha } => {
                if *reduction == 0 || config.d_embed % reduction != 0 {
                    return Err(AdaptError::InvalidSpec(format!(
                        "reduction {reduction} must divide d_embed {}",
                        config.d_embed
                    )));
                }
                if !(0.0..=1.0).contains(alpha) {
                    return Err(AdaptError::InvalidSpec(format!(
                        "alpha must be in [0,1], got {alpha}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn default_lr(&self) -> f64 {
        match self {
            StrategySpec::LinearProbe => 1e-2,
            StrategySpec::PromptTune { .. } => 1e-2,
            StrategySpec::Adapter { .. } => 1e-3,
            StrategySpec::FineTune { lr } => *lr,
        }
    }
}

/// Cached class-direction embeddings used by the cosine-based classifiers.
#[derive(Debug, Clone)]
pub(crate) struct ClassEmbeddings<E: Element> {
    pub real: Vec<E>,
    pub fake: Vec<E>,
    pub scale: E,
}

/// A backbone plus one trained adaptation strategy. The frozen digest is
/// taken over the non-trainable partition when the strategy is attached;
/// full fine-tuning has no frozen partition.
#[derive(Debug, Clone)]
pub struct AdaptedModel<E: Element> {
    pub backbone: DualEncoder<E>,
    pub spec: StrategySpec,
    pub head: ParamSet<E>,
    pub frozen_digest: Option<FrozenDigest>,
    pub(crate) class_embs: Option<ClassEmbeddings<E>>,
}

impl<E: Element> AdaptedModel<E> {
    /// Attach a strategy to a backbone: set the trainable partition,
    /// initialize strategy parameters, and record the frozen digest.
    pub fn new(mut backbone: DualEncoder<E>, spec: StrategySpec, seed: u64) -> Result<Self> {
        spec.validate(&backbone.config)?;
        let finetune = spec.kind() == StrategyKind::FineTune;
        backbone.params.set_all_trainable(finetune);

        let root = SeededRng::new(seed).derive("adapt");
        let mut head = ParamSet::new();
        fn add_normal<E: Element>(
            head: &mut ParamSet<E>,
            root: &SeededRng,
            name: &str,
            shape: Vec<usize>,
            sigma: f64,
        ) {
            let mut rng = root.derive(name);
            let n: usize = shape.iter().product();
            let data: Vec<E> = (0..n)
                .map(|_| E::from_f64(rng.next_normal() * sigma))
                .collect();
            head.insert(name, Tensor::new(shape, data).expect("shape"), true);
        }
        let config = backbone.config;
        match spec {
            StrategySpec::LinearProbe => {
                head.insert("probe.w", Tensor::zeros(vec![config.d_model, 1]), true);
                head.insert("probe.b", Tensor::zeros(vec![1]), true);
            }
            StrategySpec::PromptTune { m } => {
                add_normal(&mut head, &root, "prompt.ctx", vec![m, config.d_model], 0.02);
            }
            StrategySpec::Adapter { reduction, .. } => {
                let hidden = config.d_embed / reduction;
                add_normal(&mut head, &root, "adapter.w1", vec![config.d_embed, hidden], 0.02);
                head.insert("adapter.b1", Tensor::zeros(vec![hidden]), true);
                add_normal(&mut head, &root, "adapter.w2", vec![hidden, config.d_embed], 0.02);
                head.insert("adapter.b2", Tensor::zeros(vec![config.d_embed]), true);
            }
            StrategySpec::FineTune { .. } => {}
        }

        let frozen_digest = (!finetune).then(|| freeze_digest(&backbone.params));
        let mut model = Self {
            backbone,
            spec,
            head,
            frozen_digest,
            class_embs: None,
        };
        model.rebuild_class_embeddings()?;
        Ok(model)
    }

    /// Trainable scalars currently registered (head plus any trainable
    /// backbone parameters); matches `trainable_parameter_count` exactly.
    pub fn runtime_trainable_count(&self) -> usize {
        self.head.trainable_elements() + self.backbone.params.trainable_elements()
    }

    /// Recompute the cached class-text embeddings from the current
    /// parameters. Deterministic, so reloading a checkpoint reproduces the
    /// caches bitwise.
    pub fn rebuild_class_embeddings(&mut self) -> Result<()> {
        let scale = E::from_f64(self.backbone.logit_scale_value());
        self.class_embs = match self.spec {
            StrategySpec::LinearProbe => None,
            StrategySpec::PromptTune { .. } => {
                let (real, fake) = self.prompt_embeddings()?;
                Some(ClassEmbeddings { real, fake, scale })
            }
            StrategySpec::Adapter { .. } | StrategySpec::FineTune { .. } => {
                let real = self.backbone.embed_text("real")?;
                let fake = self.backbone.embed_text("fake")?;
                Some(ClassEmbeddings { real, fake, scale })
            }
        };
        Ok(())
    }

    fn prompt_embeddings(&self) -> Result<(Vec<E>, Vec<E>)> {
        let mut tape = Tape::new();
        let vars = self.backbone.register_frozen(&mut tape)?;
        let ctx = tape.leaf(self.head.tensor("prompt.ctx").clone(), false)?;
        let (seq_real, eos_real) =
            assemble_prompt(&mut tape, &self.backbone, &vars, ctx, "real")?;
        let (seq_fake, eos_fake) =
            assemble_prompt(&mut tape, &self.backbone, &vars, ctx, "fake")?;
        let real = self
            .backbone
            .encode_embedded(&mut tape, &vars, seq_real, eos_real)?;
        let fake = self
            .backbone
            .encode_embedded(&mut tape, &vars, seq_fake, eos_fake)?;
        Ok((
            tape.value(real).data().to_vec(),
            tape.value(fake).data().to_vec(),
        ))
    }

    /// Probability that the image is fake, in [0, 1].
    pub fn classify(&self, img: &Image) -> Result<f64> {
        let pair = self.backbone.embed_image(img)?;
        match self.spec {
            StrategySpec::LinearProbe => {
                let w = self.head.tensor("probe.w").data();
                let b = self.head.tensor("probe.b").data()[0];
                let z = pair
                    .penultimate
                    .iter()
                    .zip(w)
                    .map(|(&x, &wv)| x * wv)
                    .sum::<E>()
                    + b;
                Ok(sigmoid(z.to_f64()))
            }
            StrategySpec::PromptTune { .. } | StrategySpec::FineTune { .. } => {
                let embs = self.class_embs.as_ref().expect("caches built");
                Ok(two_class_fake_probability(
                    &pair.image_emb,
                    &embs.real,
                    &embs.fake,
                    embs.scale,
                ))
            }
            StrategySpec::Adapter { alpha, .. } => {
                let embs = self.class_embs.as_ref().expect("caches built");
                let blended = self.adapter_blend(&pair.image_emb, alpha);
                Ok(two_class_fake_probability(
                    &blended, &embs.real, &embs.fake, embs.scale,
                ))
            }
        }
    }

    /// `normalize(alpha * A(f) + (1 - alpha) * f)` on the image embedding.
    pub(crate) fn adapter_blend(&self, emb: &[E], alpha: f64) -> Vec<E> {
        let w1 = self.head.tensor("adapter.w1");
        let b1 = self.head.tensor("adapter.b1").data();
        let w2 = self.head.tensor("adapter.w2");
        let b2 = self.head.tensor("adapter.b2").data();
        let (d, hidden) = (w1.shape()[0], w1.shape()[1]);

        let mut h = vec![E::ZERO; hidden];
        for (j, hv) in h.iter_mut().enumerate() {
            let mut acc = b1[j];
            for (i, &x) in emb.iter().enumerate() {
                acc += x * w1.data()[i * hidden + j];
            }
            *hv = acc.maximum(E::ZERO);
        }
        let alpha_e = E::from_f64(alpha);
        let keep = E::from_f64(1.0 - alpha);
        let mut out = vec![E::ZERO; d];
        for (j, ov) in out.iter_mut().enumerate() {
            let mut acc = b2[j];
            for (i, &hv) in h.iter().enumerate() {
                acc += hv * w2.data()[i * d + j];
            }
            *ov = alpha_e * acc + keep * emb[j];
        }
        let norm = out.iter().map(|&v| v * v).sum::<E>().sqrt();
        for v in &mut out {
            *v = *v / norm;
        }
        out
    }

    /// Recompute the frozen-partition digest and compare bitwise.
    pub fn verify_frozen(&self) -> FreezeCheck {
        match &self.frozen_digest {
            None => FreezeCheck::NotApplicable,
            Some(digest) => digest.verify(&self.backbone.params),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the two scaled cosine logits, fake component.
fn two_class_fake_probability<E: Element>(
    emb: &[E],
    real: &[E],
    fake: &[E],
    scale: E,
) -> f64 {
    let dot = |a: &[E], b: &[E]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<E>();
    let l_real = (scale * dot(emb, real)).to_f64();
    let l_fake = (scale * dot(emb, fake)).to_f64();
    sigmoid(l_fake - l_real)
}

/// Build the embedded prompt sequence
/// `emb(SOS), V_1..V_M, emb(class_word), emb(EOS), emb(PAD)...` on the tape.
/// Context rows are shared across classes; the class-word embedding comes
/// from the (frozen) vocabulary table. Returns the sequence and
/// `eos_pos = M + 2`.
pub fn assemble_prompt<E: Element>(
    tape: &mut Tape<E>,
    model: &DualEncoder<E>,
    vars: &ModelVars,
    ctx: Var,
    class_word: &str,
) -> Result<(Var, usize)> {
    let (m, d) = tape.value(ctx).as_rows();
    if m == 0 {
        return Err(AdaptError::InvalidSpec("M must be >= 1".into()));
    }
    if d != model.config.d_model {
        return Err(AdaptError::InvalidSpec(format!(
            "context dimension {d} does not match d_model {}",
            model.config.d_model
        )));
    }
    let l = model.config.context_len;
    if m + 3 > l {
        return Err(AdaptError::PromptCapacity { m, context_len: l });
    }
    let class_id = model
        .vocab
        .id(class_word)
        .ok_or_else(|| AdaptError::MissingClassWord(class_word.to_string()))? as usize;

    let tok_emb = vars.text.tok_emb.expect("text branch");
    let sos = tape.gather_rows(tok_emb, &[SOS_ID as usize])?;
    let class = tape.gather_rows(tok_emb, &[class_id])?;
    let eos = tape.gather_rows(tok_emb, &[EOS_ID as usize])?;
    let mut parts = vec![sos, ctx, class, eos];
    let pad_count = l - m - 3;
    if pad_count > 0 {
        let pads = vec![PAD_ID as usize; pad_count];
        parts.push(tape.gather_rows(tok_emb, &pads)?);
    }
    let seq = tape.concat_rows(&parts)?;
    Ok((seq, m + 2))
}

/// Convenience used by training and tests: tokenizer path for a bare class
/// word (no learned context).
pub(crate) fn class_word_seq<E: Element>(
    model: &DualEncoder<E>,
    word: &str,
) -> Result<crate::model::TokenSeq> {
    Ok(tokenize(word, &model.vocab, model.config.context_len)?)
}
