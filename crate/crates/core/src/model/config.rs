use super::{ModelError, Result};

/// Shape of both encoder towers. The defaults are a deliberately small
/// stand-in for a ViT-scale dual encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Shared projection dimension of the joint embedding space.
    pub d_embed: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub context_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_embed: 64,
            patch_size: 8,
            image_side: 64,
            context_len: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_embed == 0
            || self.patch_size == 0
            || self.image_side == 0
            || self.context_len < 3
        {
            return Err(ModelError::Config(
                "all dimensions must be positive (context_len >= 3)".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Vision sequence length: patches plus the [CLS] slot.
    pub fn image_seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_arithmetic() {
        let c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_patches(), 64);
        assert_eq!(c.image_seq_len(), 65);
        assert_eq!(c.patch_dim(), 192);
    }

    #[test]
    fn divisibility_enforced() {
        let mut c = EncoderConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.image_side = 60;
        assert!(c.validate().is_err());
    }
}
