use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters. Everything except `patch_input_size`
/// is a desk-scale choice; scaling up is a config change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Voxels per axis of the cubic network input.
    pub patch_input_size: usize,
    /// Voxels per axis covered by one image token.
    pub token_patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    /// Number of two-way attention blocks.
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    /// Transposed-convolution stages from the token grid back to voxels.
    /// Each stage has kernel = stride, and the strides multiply to
    /// `token_patch_size`.
    pub mask_upsample_stages: usize,
    /// Output channels per upsampling stage.
    pub upsample_channels: Vec<usize>,
    /// Hidden width of the transformer MLPs as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Internal width divisor of the decoder's cross-attention.
    pub cross_attention_downsample: usize,
}

impl NetConfig {
    /// Full-size configuration at the 128³ input the interactive protocol uses.
    pub fn reference() -> Self {
        NetConfig {
            patch_input_size: 128,
            token_patch_size: 16,
            embed_dim: 384,
            encoder_depth: 6,
            encoder_heads: 6,
            decoder_depth: 2,
            decoder_heads: 6,
            mask_upsample_stages: 2,
            upsample_channels: vec![96, 48],
            mlp_ratio: 4,
            cross_attention_downsample: 2,
        }
    }

    /// Laptop-trainable configuration on 64³ inputs.
    pub fn desk() -> Self {
        NetConfig {
            patch_input_size: 64,
            token_patch_size: 8,
            embed_dim: 128,
            encoder_depth: 2,
            encoder_heads: 4,
            decoder_depth: 2,
            decoder_heads: 4,
            mask_upsample_stages: 3,
            upsample_channels: vec![64, 32, 16],
            mlp_ratio: 4,
            cross_attention_downsample: 2,
        }
    }

    /// Small configuration for unit tests.
    pub fn test() -> Self {
        NetConfig {
            patch_input_size: 32,
            token_patch_size: 8,
            embed_dim: 32,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_depth: 2,
            decoder_heads: 2,
            mask_upsample_stages: 3,
            upsample_channels: vec![16, 8, 8],
            mlp_ratio: 4,
            cross_attention_downsample: 2,
        }
    }

    /// Smallest useful configuration, used for finite-difference checks.
    pub fn tiny() -> Self {
        NetConfig {
            patch_input_size: 16,
            token_patch_size: 4,
            embed_dim: 8,
            encoder_depth: 1,
            encoder_heads: 2,
            decoder_depth: 2,
            decoder_heads: 2,
            mask_upsample_stages: 2,
            upsample_channels: vec![4, 4],
            mlp_ratio: 2,
            cross_attention_downsample: 2,
        }
    }

    /// Tokens per axis.
    pub fn grid(&self) -> usize {
        self.patch_input_size / self.token_patch_size
    }

    pub fn token_count(&self) -> usize {
        self.grid().pow(3)
    }

    /// Stride of every upsampling stage.
    pub fn stage_stride(&self) -> usize {
        let n = self.mask_upsample_stages as u32;
        let t = self.token_patch_size;
        (1..=t).find(|s| s.pow(n) == t).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_input_size == 0 || self.token_patch_size == 0 {
            return bad("patch sizes must be positive".into());
        }
        if !self.patch_input_size.is_multiple_of(self.token_patch_size) {
            return bad(format!(
                "patch_input_size {} is not divisible by token_patch_size {}",
                self.patch_input_size, self.token_patch_size
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!("embed_dim {} must be even and positive", self.embed_dim));
        }
        if self.encoder_heads == 0 || !self.embed_dim.is_multiple_of(self.encoder_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by encoder_heads {}",
                self.embed_dim, self.encoder_heads
            ));
        }
        if self.decoder_heads == 0 || !self.embed_dim.is_multiple_of(self.decoder_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by decoder_heads {}",
                self.embed_dim, self.decoder_heads
            ));
        }
        let cross = self.embed_dim / self.cross_attention_downsample.max(1);
        if self.cross_attention_downsample == 0
            || !self.embed_dim.is_multiple_of(self.cross_attention_downsample)
            || !cross.is_multiple_of(self.decoder_heads)
        {
            return bad(format!(
                "cross-attention width {} is not divisible by decoder_heads {}",
                cross, self.decoder_heads
            ));
        }
        if self.mask_upsample_stages == 0 || self.stage_stride() == 0 {
            return bad(format!(
                "token_patch_size {} is not an exact power with {} upsampling stages",
                self.token_patch_size, self.mask_upsample_stages
            ));
        }
        if self.upsample_channels.len() != self.mask_upsample_stages || self.upsample_channels.contains(&0) {
            return bad("upsample_channels needs one positive entry per stage".into());
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 || self.mlp_ratio == 0 {
            return bad("depths and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}
