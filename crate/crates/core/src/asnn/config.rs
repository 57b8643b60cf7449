use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::GumbelOptions;

/// Architecture hyperparameters shared by the schema and control variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsnnConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    /// Per-head query/key/value width; heads are concatenated and projected
    /// back to `embed_dim`, so `embed_dim` need not divide by `n_heads`.
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub has_schema: bool,
    pub task_weight: f64,
    pub schema_weight: f64,
    pub n_classes: usize,
    pub gumbel_temperature: f64,
    pub gumbel_hard: bool,
    /// Initial logit margin of the keep category in each mask logit pair.
    pub keep_bias: f64,
    pub init_std: f64,
}

impl AsnnConfig {
    /// 64 px images, 8 px patches, 64-wide embedding.
    pub fn desk(has_schema: bool) -> Self {
        Self::with_schema(
            Self {
                image_size: 64,
                channels: 3,
                patch_size: 8,
                embed_dim: 64,
                n_heads: 6,
                head_dim: 16,
                mlp_ratio: 4,
                has_schema: false,
                task_weight: 1.0,
                schema_weight: 0.0,
                n_classes: 2,
                gumbel_temperature: 1.0,
                gumbel_hard: true,
                keep_bias: 2.0,
                init_std: 0.02,
            },
            has_schema,
        )
    }

    /// 256 px images with 16 px patches (257 tokens).
    pub fn paper(has_schema: bool) -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            embed_dim: 192,
            head_dim: 32,
            ..Self::desk(has_schema)
        }
    }

    /// Sets the variant and the matching loss weights (0.95/0.05 with a schema).
    pub fn with_schema(mut self, has_schema: bool) -> Self {
        self.has_schema = has_schema;
        if has_schema {
            self.task_weight = 0.95;
            self.schema_weight = 0.05;
        } else {
            self.task_weight = 1.0;
            self.schema_weight = 0.0;
        }
        self
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Patch tokens plus the class token.
    pub fn token_count(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn gumbel(&self) -> GumbelOptions {
        GumbelOptions {
            temperature: self.gumbel_temperature,
            hard: self.gumbel_hard,
            noise: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return bad("channels, embed_dim, n_heads and head_dim must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if !(self.gumbel_temperature > 0.0) {
            return bad(format!(
                "gumbel_temperature must be positive, got {}",
                self.gumbel_temperature
            ));
        }
        if self.has_schema {
            if (self.task_weight + self.schema_weight - 1.0).abs() > 1e-9
                || self.task_weight < 0.0
                || self.schema_weight < 0.0
            {
                return bad(format!(
                    "task_weight + schema_weight must equal 1, got {} + {}",
                    self.task_weight, self.schema_weight
                ));
            }
        } else if self.task_weight != 1.0 {
            return bad(format!(
                "control variant requires task_weight 1, got {}",
                self.task_weight
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(AsnnConfig::desk(true).token_count(), 65);
        assert_eq!(AsnnConfig::paper(true).token_count(), 257);
    }

    #[test]
    fn weights_follow_variant() {
        let s = AsnnConfig::desk(true);
        assert_eq!((s.task_weight, s.schema_weight), (0.95, 0.05));
        let c = AsnnConfig::desk(false);
        assert_eq!((c.task_weight, c.schema_weight), (1.0, 0.0));
        s.validate().unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = AsnnConfig::desk(true);
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = AsnnConfig::desk(true);
        c.schema_weight = 0.2;
        assert!(c.validate().is_err());
        let mut c = AsnnConfig::desk(false);
        c.task_weight = 0.5;
        assert!(c.validate().is_err());
    }
}
