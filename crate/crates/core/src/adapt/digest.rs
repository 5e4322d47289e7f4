use sha2::{Digest, Sha256};

use crate::tensor::{Element, ParamSet};

/// Content hash of the frozen parameter partition, taken at training start.
/// Per-parameter digests allow naming the first mismatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenDigest {
    pub combined: [u8; 32],
    pub per_param: Vec<(String, [u8; 32])>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FreezeCheck {
    Intact,
    Mismatch { first_param: String },
    /// Full fine-tuning has no frozen partition.
    NotApplicable,
}

fn param_hash<E: Element>(name: &str, shape: &[usize], data: &[E]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for &d in shape {
        h.update((d as u32).to_le_bytes());
    }
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for &v in data {
        v.write_le(&mut bytes);
    }
    h.update(&bytes);
    h.finalize().into()
}

/// Digest every non-trainable parameter of the set, in sorted name order.
pub fn freeze_digest<E: Element>(params: &ParamSet<E>) -> FrozenDigest {
    let mut per_param = Vec::new();
    let mut combined = Sha256::new();
    for p in params.iter() {
        if p.trainable {
            continue;
        }
        let h = param_hash(&p.name, p.tensor.shape(), p.tensor.data());
        combined.update(h);
        per_param.push((p.name.clone(), h));
    }
    FrozenDigest {
        combined: combined.finalize().into(),
        per_param,
    }
}

impl FrozenDigest {
    /// Recompute over the current frozen partition and compare bitwise.
    pub fn verify<E: Element>(&self, params: &ParamSet<E>) -> FreezeCheck {
        let now = freeze_digest(params);
        if now.combined == self.combined {
            return FreezeCheck::Intact;
        }
        for ((name_then, hash_then), (name_now, hash_now)) in
            self.per_param.iter().zip(now.per_param.iter())
        {
            if name_then != name_now || hash_then != hash_now {
                return FreezeCheck::Mismatch {
                    first_param: name_then.clone(),
                };
            }
        }
        // partition membership itself changed
        FreezeCheck::Mismatch {
            first_param: self
                .per_param
                .first()
                .map(|(n, _)| n.clone())
                .unwrap_or_default(),
        }
    }
}
