use crate::data::Image;
use crate::tensor::{Element, ParamSet, SeededRng, Tape, Tensor, Var};

use super::config::EncoderConfig;
use super::vocab::{TokenSeq, Vocabulary};
use super::{ModelError, Result};

/// ln(1/0.07), the CLIP convention for the initial temperature.
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778;
/// exp(logit_scale) is clamped to [1, 100] after every optimizer step.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
pub const MIN_LOGIT_SCALE: f64 = 1.0;

/// Output of the vision tower for one image.
#[derive(Debug, Clone)]
pub struct EmbeddingPair<E: Element> {
    /// Unit vector in the shared space.
    pub image_emb: Vec<E>,
    pub text_emb: Option<Vec<E>>,
    /// Pre-projection [CLS] activation (dimension `d_model`), the feature
    /// the linear probe trains on.
    pub penultimate: Vec<E>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for one encoder tower. The text tower uses `tok_emb`; the
/// vision tower uses `patch_w`/`patch_b`/`cls`.
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub tok_emb: Option<Var>,
    pub patch_w: Option<Var>,
    pub patch_b: Option<Var>,
    pub cls: Option<Var>,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_gamma: Var,
    pub lnf_beta: Var,
    pub proj: Var,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub text: BranchVars,
    pub image: BranchVars,
    pub logit_scale: Var,
    named: Vec<(String, Var)>,
}

impl ModelVars {
    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }
}

/// Paired text and image encoders with a learned logit scale. All state
/// lives in the named parameter set; forward passes run on an external
/// [`Tape`] so the same code serves training, inference, and gradient
/// checking.
#[derive(Debug, Clone)]
pub struct DualEncoder<E: Element> {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet<E>,
}

const LN_EPS: f64 = 1e-5;

impl<E: Element> DualEncoder<E> {
    pub fn init(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let root = SeededRng::new(seed).derive("init");
        let d = config.d_model;

        let mut add = |name: String, shape: Vec<usize>, kind: InitKind| {
            let n: usize = shape.iter().product();
            let mut rng = root.derive(&name);
            let data: Vec<E> = match kind {
                // Mixing weights need enough scale at this width for
                // per-sample signal to reach the pooled token; tiny inits
                // leave the [CLS]/[EOS] residual stream dominated by its
                // shared embedding and contrastive training collapses.
                InitKind::Weight => (0..n)
                    .map(|_| E::from_f64(rng.next_normal() * 0.08))
                    .collect(),
                InitKind::Embedding => (0..n)
                    .map(|_| E::from_f64(rng.next_normal() * 0.02))
                    .collect(),
                InitKind::Zero => vec![E::ZERO; n],
                InitKind::One => vec![E::ONE; n],
                InitKind::Value(v) => vec![E::from_f64(v); n],
            };
            params.insert(&name, Tensor::new(shape, data).expect("shape matches"), true);
        };

        add(
            "text.tok_emb".into(),
            vec![vocab.len(), d],
            InitKind::Embedding,
        );
        add(
            "text.pos_emb".into(),
            vec![config.context_len, d],
            InitKind::Embedding,
        );
        add(
            "image.patch.w".into(),
            vec![config.patch_dim(), d],
            InitKind::Weight,
        );
        add("image.patch.b".into(), vec![d], InitKind::Zero);
        add("image.cls".into(), vec![1, d], InitKind::Embedding);
        add(
            "image.pos_emb".into(),
            vec![config.image_seq_len(), d],
            InitKind::Embedding,
        );
        for branch in ["text", "image"] {
            for i in 0..config.n_layers {
                let p = format!("{branch}.blocks.{i}");
                add(format!("{p}.ln1.gamma"), vec![d], InitKind::One);
                add(format!("{p}.ln1.beta"), vec![d], InitKind::Zero);
                for w in ["wq", "wk", "wv", "wo"] {
                    add(format!("{p}.attn.{w}"), vec![d, d], InitKind::Weight);
                }
                // no key bias: a constant added to every key shifts each
                // softmax row uniformly and cancels exactly
                for b in ["bq", "bv", "bo"] {
                    add(format!("{p}.attn.{b}"), vec![d], InitKind::Zero);
                }
                add(format!("{p}.ln2.gamma"), vec![d], InitKind::One);
                add(format!("{p}.ln2.beta"), vec![d], InitKind::Zero);
                add(format!("{p}.mlp.w1"), vec![d, config.d_mlp()], InitKind::Weight);
                add(format!("{p}.mlp.b1"), vec![config.d_mlp()], InitKind::Zero);
                add(format!("{p}.mlp.w2"), vec![config.d_mlp(), d], InitKind::Weight);
                add(format!("{p}.mlp.b2"), vec![d], InitKind::Zero);
            }
            add(format!("{branch}.ln_f.gamma"), vec![d], InitKind::One);
            add(format!("{branch}.ln_f.beta"), vec![d], InitKind::Zero);
            add(
                format!("{branch}.proj"),
                vec![d, config.d_embed],
                InitKind::Weight,
            );
        }
        add(
            "logit_scale".into(),
            vec![1],
            InitKind::Value(LOGIT_SCALE_INIT),
        );

        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn total_parameters(&self) -> usize {
        self.params.total_elements()
    }

    /// exp of the stored log scale.
    pub fn logit_scale_value(&self) -> f64 {
        self.params.tensor("logit_scale").data()[0].to_f64().exp()
    }

    /// Project the stored log scale back into [ln 1, ln 100].
    pub fn clamp_logit_scale(&mut self) {
        let p = self.params.get_mut("logit_scale").expect("logit_scale");
        let v = p.tensor.data()[0].to_f64();
        let clamped = v.clamp(MIN_LOGIT_SCALE.ln(), MAX_LOGIT_SCALE.ln());
        p.tensor.data_mut()[0] = E::from_f64(clamped);
    }

    /// Register every parameter on a tape. Gradient tracking follows each
    /// parameter's `trainable` flag.
    pub fn register(&self, tape: &mut Tape<E>) -> Result<ModelVars> {
        let mut named = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            let var = tape.leaf(p.tensor.clone(), p.trainable)?;
            named.push((p.name.clone(), var));
        }
        Self::resolve_vars(&self.config, named)
    }

    /// Copy gradients from a tape back onto the trainable parameters.
    pub fn collect_grads(&mut self, tape: &Tape<E>, vars: &ModelVars) {
        for (name, var) in &vars.named {
            if let Some(g) = tape.grad(*var) {
                if let Some(p) = self.params.get_mut(name) {
                    if p.trainable {
                        p.tensor.grad = Some(g.to_vec());
                    }
                }
            }
        }
    }

    fn transformer_block(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        block: &BlockVars,
        causal: bool,
    ) -> Result<Var> {
        let n_heads = self.config.n_heads;
        let dh = self.config.d_model / n_heads;

        let h = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, LN_EPS)?;
        let q = tape.matmul(h, block.wq)?;
        let q = tape.add_row(q, block.bq)?;
        let k = tape.matmul(h, block.wk)?;
        let v = tape.matmul(h, block.wv)?;
        let v = tape.add_row(v, block.bv)?;

        let mut heads = Vec::with_capacity(n_heads);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for head in 0..n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let attn = tape.softmax(scores, causal)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let o = tape.matmul(merged, block.wo)?;
        let o = tape.add_row(o, block.bo)?;
        let x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta, LN_EPS)?;
        let m = tape.matmul(h2, block.w1)?;
        let m = tape.add_row(m, block.b1)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, block.w2)?;
        let m = tape.add_row(m, block.b2)?;
        Ok(tape.add(x, m)?)
    }

    /// Encode an already-embedded text sequence (`context_len × d_model`):
    /// positions, causal blocks, final norm, pooling at `eos_pos`,
    /// projection, unit normalization.
    pub fn encode_embedded(
        &self,
        tape: &mut Tape<E>,
        vars: &ModelVars,
        x: Var,
        eos_pos: usize,
    ) -> Result<Var> {
        let (rows, _) = tape.value(x).as_rows();
        if rows != self.config.context_len {
            return Err(ModelError::SequenceLength {
                expected: self.config.context_len,
                got: rows,
            });
        }
        if eos_pos >= self.config.context_len {
            return Err(ModelError::SequenceLength {
                expected: self.config.context_len,
                got: eos_pos,
            });
        }
        let mut x = tape.add(x, vars.text.pos_emb)?;
        let blocks = vars.text.blocks.clone();
        for block in &blocks {
            x = self.transformer_block(tape, x, block, true)?;
        }
        let x = tape.layer_norm(x, vars.text.lnf_gamma, vars.text.lnf_beta, LN_EPS)?;
        let pooled = tape.gather_rows(x, &[eos_pos])?;
        let projected = tape.matmul(pooled, vars.text.proj)?;
        Ok(tape.l2_normalize_rows(projected)?)
    }

    /// Token-id entry point for the text tower.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape<E>,
        vars: &ModelVars,
        seq: &TokenSeq,
    ) -> Result<Var> {
        if seq.ids.len() != self.config.context_len {
            return Err(ModelError::SequenceLength {
                expected: self.config.context_len,
                got: seq.ids.len(),
            });
        }
        let tok_emb = vars.text.tok_emb.expect("text branch has tok_emb");
        let indices: Vec<usize> = seq.ids.iter().map(|&id| id as usize).collect();
        let embedded = tape.gather_rows(tok_emb, &indices)?;
        self.encode_embedded(tape, vars, embedded, seq.eos_pos)
    }

    /// Vision tower: patchify, project, prepend [CLS], transformer blocks,
    /// final norm. Returns `(unit embedding, penultimate [CLS] activation)`.
    pub fn encode_image(
        &self,
        tape: &mut Tape<E>,
        vars: &ModelVars,
        img: &Image,
    ) -> Result<(Var, Var)> {
        let patches = patchify::<E>(img, &self.config)?;
        let patches = tape.constant(patches)?;
        let projected = tape.matmul(patches, vars.image.patch_w.expect("image branch"))?;
        let projected = tape.add_row(projected, vars.image.patch_b.expect("image branch"))?;
        let cls = vars.image.cls.expect("image branch");
        let mut x = tape.concat_rows(&[cls, projected])?;
        x = tape.add(x, vars.image.pos_emb)?;
        let blocks = vars.image.blocks.clone();
        for block in &blocks {
            x = self.transformer_block(tape, x, block, false)?;
        }
        let x = tape.layer_norm(x, vars.image.lnf_gamma, vars.image.lnf_beta, LN_EPS)?;
        let penult = tape.gather_rows(x, &[0])?;
        let projected = tape.matmul(penult, vars.image.proj)?;
        let emb = tape.l2_normalize_rows(projected)?;
        Ok((emb, penult))
    }

    /// Convenience single-image inference on a throwaway tape.
    pub fn embed_image(&self, img: &Image) -> Result<EmbeddingPair<E>> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let (emb, penult) = self.encode_image(&mut tape, &vars, img)?;
        Ok(EmbeddingPair {
            image_emb: tape.value(emb).data().to_vec(),
            text_emb: None,
            penultimate: tape.value(penult).data().to_vec(),
        })
    }

    /// Convenience single-string inference on a throwaway tape.
    pub fn embed_text(&self, text: &str) -> Result<Vec<E>> {
        let seq = super::vocab::tokenize(text, &self.vocab, self.config.context_len)?;
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let emb = self.encode_tokens(&mut tape, &vars, &seq)?;
        Ok(tape.value(emb).data().to_vec())
    }

    /// Register with gradient tracking disabled everywhere (inference).
    pub fn register_frozen(&self, tape: &mut Tape<E>) -> Result<ModelVars> {
        let mut named = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            let var = tape.leaf(p.tensor.clone(), false)?;
            named.push((p.name.clone(), var));
        }
        Self::resolve_vars(&self.config, named)
    }

    fn resolve_vars(config: &EncoderConfig, named: Vec<(String, Var)>) -> Result<ModelVars> {
        let lookup = |name: &str| -> Var {
            named
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
                .1
        };
        let branch = |prefix: &str| -> BranchVars {
            let blocks = (0..config.n_layers)
                .map(|i| {
                    let p = format!("{prefix}.blocks.{i}");
                    BlockVars {
                        ln1_gamma: lookup(&format!("{p}.ln1.gamma")),
                        ln1_beta: lookup(&format!("{p}.ln1.beta")),
                        wq: lookup(&format!("{p}.attn.wq")),
                        bq: lookup(&format!("{p}.attn.bq")),
                        wk: lookup(&format!("{p}.attn.wk")),
                        wv: lookup(&format!("{p}.attn.wv")),
                        bv: lookup(&format!("{p}.attn.bv")),
                        wo: lookup(&format!("{p}.attn.wo")),
                        bo: lookup(&format!("{p}.attn.bo")),
                        ln2_gamma: lookup(&format!("{p}.ln2.gamma")),
                        ln2_beta: lookup(&format!("{p}.ln2.beta")),
                        w1: lookup(&format!("{p}.mlp.w1")),
                        b1: lookup(&format!("{p}.mlp.b1")),
                        w2: lookup(&format!("{p}.mlp.w2")),
                        b2: lookup(&format!("{p}.mlp.b2")),
                    }
                })
                .collect();
            BranchVars {
                tok_emb: (prefix == "text").then(|| lookup("text.tok_emb")),
                patch_w: (prefix == "image").then(|| lookup("image.patch.w")),
                patch_b: (prefix == "image").then(|| lookup("image.patch.b")),
                cls: (prefix == "image").then(|| lookup("image.cls")),
                pos_emb: lookup(&format!("{prefix}.pos_emb")),
                blocks,
                lnf_gamma: lookup(&format!("{prefix}.ln_f.gamma")),
                lnf_beta: lookup(&format!("{prefix}.ln_f.beta")),
                proj: lookup(&format!("{prefix}.proj")),
            }
        };
        Ok(ModelVars {
            text: branch("text"),
            image: branch("image"),
            logit_scale: lookup("logit_scale"),
            named,
        })
    }
}

enum InitKind {
    Weight,
    Embedding,
    Zero,
    One,
    Value(f64),
}

/// Split an image into non-overlapping patches, row-major over the patch
/// grid; within a patch values are ordered channel-major, then row, then
/// column. Output shape: `[n_patches × patch_size²·3]`.
pub fn patchify<E: Element>(img: &Image, config: &EncoderConfig) -> Result<Tensor<E>> {
    if img.width() != config.image_side || img.height() != config.image_side {
        return Err(ModelError::ImageSize {
            expected: config.image_side,
            got_w: img.width(),
            got_h: img.height(),
        });
    }
    let ps = config.patch_size;
    let grid = config.image_side / ps;
    let mut data = Vec::with_capacity(config.n_patches() * config.patch_dim());
    for py in 0..grid {
        for px in 0..grid {
            for c in 0..3 {
                for dy in 0..ps {
                    for dx in 0..ps {
                        // centered so the projection is not dominated by the
                        // shared DC component of natural pixel data
                        data.push(E::from_f64(
                            img.get(c, py * ps + dy, px * ps + dx) as f64 - 0.5,
                        ));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![config.n_patches(), config.patch_dim()], data).expect("shape"))
}

/// Temperature-scaled cosine similarities of one image embedding against a
/// set of class text embeddings. All inputs must be unit vectors.
pub fn cosine_logits<E: Element>(
    image_emb: &[E],
    class_embs: &[Vec<E>],
    scale: E,
) -> Result<Vec<E>> {
    let check_unit = |v: &[E]| -> Result<()> {
        let norm = v.iter().map(|&x| x * x).sum::<E>().sqrt().to_f64();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(ModelError::NonUnitNorm { norm });
        }
        Ok(())
    };
    check_unit(image_emb)?;
    let mut logits = Vec::with_capacity(class_embs.len());
    for class_emb in class_embs {
        check_unit(class_emb)?;
        let dot: E = image_emb
            .iter()
            .zip(class_emb)
            .map(|(&a, &b)| a * b)
            .sum();
        logits.push(scale * dot);
    }
    Ok(logits)
}
