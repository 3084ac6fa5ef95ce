use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a ViT encoder with a linear classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub cls_token: bool,
}

impl ModelConfig {
    pub fn new(
        layers: usize,
        embed_dim: usize,
        heads: usize,
        mlp_dim: usize,
        patch_size: usize,
        image_size: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            layers,
            embed_dim,
            heads,
            mlp_dim,
            patch_size,
            image_size,
            num_classes,
            cls_token: true,
        }
    }

    /// 6 layers, 256 dim, 8 heads, 1024 MLP; patch 4.
    pub fn base_student(image_size: usize, num_classes: usize) -> Self {
        Self::new(6, 256, 8, 1024, 4, image_size, num_classes)
    }

    /// 10 layers, 512 dim, 8 heads, 2048 MLP; patch 4.
    pub fn large_student(image_size: usize, num_classes: usize) -> Self {
        Self::new(10, 512, 8, 2048, 4, image_size, num_classes)
    }

    /// ViT-Base at 224×224 with the given patch size (16 or 32).
    pub fn base_teacher(patch_size: usize, num_classes: usize) -> Self {
        Self::new(12, 768, 12, 3072, patch_size, 224, num_classes)
    }

    /// ViT-Large at 224×224 with the given patch size (16 or 32).
    pub fn large_teacher(patch_size: usize, num_classes: usize) -> Self {
        Self::new(24, 1024, 16, 4096, patch_size, 224, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.cls_token {
            return Err(Error::Config("cls_token must be enabled".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the CLS token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Number of learnable parameters.
    ///
    /// With D = embed_dim, M = mlp_dim, P = 3·patch², N = num_patches,
    /// C = num_classes and L = layers:
    ///
    /// ```text
    /// (P·D + D)                      patch projection
    /// + D + (N + 1)·D                CLS token, positional embeddings
    /// + L·(4·(D² + D) + 4·D          attention, two layer norms
    ///      + D·M + M + M·D + D)      MLP
    /// + 2·D                          final layer norm
    /// + D·C + C                      classifier head
    /// ```
    pub fn param_count(&self) -> u64 {
        let d = self.embed_dim as u64;
        let m = self.mlp_dim as u64;
        let p = self.patch_dim() as u64;
        let n = self.num_patches() as u64;
        let c = self.num_classes as u64;
        let l = self.layers as u64;
        let per_layer = 4 * (d * d + d) + 4 * d + d * m + m + m * d + d;
        (p * d + d) + d + (n + 1) * d + l * per_layer + 2 * d + d * c + c
    }
}
