use crate::error::{Error, Result};

/// Architecture hyper-parameters shared by the image encoder, source
/// encoder, target decoder and selective attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_img_layers: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub max_len: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_img_layers: 2,
            dropout_p: 0.1,
            vocab_size: 64,
            image_side: 24,
            patch_side: 8,
            max_len: 16,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Per-head key width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Flattened width of one RGB patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_side * self.patch_side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return fail("model widths must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if self.d_model < 2 {
            return fail("d_model must be at least 2");
        }
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return fail("image_side must be divisible by patch_side");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout_p must lie in [0, 1)");
        }
        if self.vocab_size < 5 {
            return fail("vocab_size must cover the special tokens");
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2");
        }
        if self.ln_eps <= 0.0 {
            return fail("ln_eps must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.d_k() * c.n_heads, c.d_model);
        assert_eq!(c.n_patches(), 9);
        assert_eq!(c.patch_dim(), 192);
    }

    #[test]
    fn rejects_bad_divisibility() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            patch_side: 7,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
