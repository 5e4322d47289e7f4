use super::synth::{generate_sample, GeneratorFamily, SampleRecord};
use super::{DataError, Result};
use crate::tensor::SeededRng;

/// Compact handle for a generatable sample; the image itself is materialized
/// on demand so large splits stay cheap to hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub family: GeneratorFamily,
    pub category: u32,
    pub seed: u64,
}

impl SampleKey {
    pub fn label(&self) -> u8 {
        self.family.label()
    }

    pub fn generate(&self, side: usize) -> SampleRecord {
        generate_sample(self.family, self.category, self.seed, side)
    }

    pub fn source_id(&self) -> String {
        format!("{}-{}-{}", self.family.name(), self.category, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct SplitSpec {
    /// Total training samples (REAL + GAN_LIKE, exactly balanced).
    pub train_size: usize,
    /// Samples per evaluation set (family fakes + fresh REAL, balanced).
    pub eval_size: usize,
    pub categories: u32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Splits {
    /// Interleaved real/fake so that every even-length prefix stays balanced;
    /// nested-subset ablations rely on this.
    pub train: Vec<SampleKey>,
    /// One balanced eval set per fake family, in `GeneratorFamily::FAKES` order.
    pub eval: Vec<(GeneratorFamily, Vec<SampleKey>)>,
}

/// Build the train-on-one-generator protocol: training sees REAL and
/// GAN_LIKE only; each eval set pairs a fake family with fresh REAL samples.
/// Sample seeds are allocated from disjoint contiguous ranges off the split
/// seed, so train and eval never share a generator seed.
pub fn build_splits(spec: &SplitSpec) -> Result<Splits> {
    if spec.train_size % 2 != 0 {
        return Err(DataError::OddSplitSize(spec.train_size));
    }
    if spec.eval_size % 2 != 0 {
        return Err(DataError::OddSplitSize(spec.eval_size));
    }
    if spec.categories == 0 {
        return Err(DataError::NoCategories);
    }

    let base = spec.seed;
    let mut train = Vec::with_capacity(spec.train_size);
    for i in 0..spec.train_size {
        let family = if i % 2 == 0 {
            GeneratorFamily::Real
        } else {
            GeneratorFamily::GanLike
        };
        train.push(SampleKey {
            family,
            category: ((i / 2) as u32) % spec.categories,
            seed: base.wrapping_add(1 + i as u64),
        });
    }

    let mut eval = Vec::new();
    for (fi, family) in GeneratorFamily::FAKES.iter().enumerate() {
        let mut set = Vec::with_capacity(spec.eval_size);
        for j in 0..spec.eval_size {
            let fam = if j % 2 == 0 {
                GeneratorFamily::Real
            } else {
                *family
            };
            let offset = spec.train_size + fi * spec.eval_size + j;
            set.push(SampleKey {
                family: fam,
                category: ((j / 2) as u32) % spec.categories,
                seed: base.wrapping_add(1 + offset as u64),
            });
        }
        eval.push((*family, set));
    }

    Ok(Splits { train, eval })
}

/// Line-oriented split manifest: `family,category,seed,label`, one sample
/// per line.
pub fn manifest_lines(keys: &[SampleKey]) -> String {
    let mut out = String::new();
    for k in keys {
        out.push_str(&format!(
            "{},{},{},{}\n",
            k.family.name(),
            k.category,
            k.seed,
            k.label()
        ));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<SampleKey>> {
    let mut keys = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(DataError::UnknownFamily(format!(
                "malformed manifest line '{line}'"
            )));
        }
        let family = GeneratorFamily::parse(fields[0])?;
        let category: u32 = fields[1]
            .parse()
            .map_err(|_| DataError::UnknownFamily(format!("bad category in '{line}'")))?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| DataError::UnknownFamily(format!("bad seed in '{line}'")))?;
        keys.push(SampleKey {
            family,
            category,
            seed,
        });
    }
    Ok(keys)
}

/// Keep exactly `k` real and `k` fake samples per category, drawn uniformly
/// without replacement.
pub fn kshot_subset(train: &[SampleKey], k: usize, seed: u64) -> Result<Vec<SampleKey>> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(u32, u8), Vec<SampleKey>> = BTreeMap::new();
    for key in train {
        groups
            .entry((key.category, key.label()))
            .or_default()
            .push(*key);
    }

    let rng = SeededRng::new(seed).derive("kshot");
    let mut out = Vec::new();
    for ((category, label), members) in &groups {
        if members.len() < k {
            return Err(DataError::KshotShortfall {
                category: *category,
                needed: k,
                available: members.len(),
                shortfall: k - members.len(),
            });
        }
        let mut pick_rng = rng.derive_u64(((*category as u64) << 1) | *label as u64);
        for ix in pick_rng.sample_indices(members.len(), k) {
            out.push(members[ix]);
        }
    }
    // restore the interleaved real/fake ordering so prefixes stay balanced
    out.sort_by_key(|key| key.seed);
    Ok(out)
}
