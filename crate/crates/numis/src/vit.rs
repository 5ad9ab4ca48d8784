//! Vision Transformer classifier: patch embedding, pre-norm encoder stack,
//! class token, and a multi-label linear head that can be replaced and
//! fine-tuned over a frozen backbone.

use image::GrayImage;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VitError {
    #[error("image size {0}x{1} does not match configured {2}x{2}")]
    WrongImageSize(u32, u32, usize),
    #[error("image dimensions {0}x{1} not divisible by patch size {2}")]
    IndivisiblePatches(u32, u32, usize),
    #[error("num_labels must be at least 1")]
    NoLabels,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_labels: usize,
}

impl ViTConfig {
    /// Tiny configuration used by the desk-scale tests.
    pub fn tiny(num_labels: usize) -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            depth: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            num_labels,
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        if self.image_size % self.patch_size != 0 {
            return Err(VitError::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(VitError::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.num_labels == 0 {
            return Err(VitError::NoLabels);
        }
        Ok(())
    }

    /// N = (image_size / P)^2
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }
}

/// Truncated normal init, sigma 0.02, resampling outside two sigma.
pub fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, sigma: f32) -> Vec<f32> {
    use rand::Rng;
    (0..n)
        .map(|_| loop {
            // Box-Muller from two uniforms
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                break (z * sigma as f64) as f32;
            }
        })
        .collect()
}

pub struct EncoderLayer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

pub struct ViTModel {
    pub config: ViTConfig,
    pub patch_proj_w: Tensor,
    pub patch_proj_b: Tensor,
    pub class_token: Tensor,
    pub positional: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Row-major P x P patches of a greyscale image, pixel values scaled to [0,1].
///
/// Row i of the result is the row-major flattening of patch i, with patches
/// ordered row-major across the patch grid.
pub fn patchify(image: &GrayImage, patch: usize) -> Result<Tensor, VitError> {
    let (w, h) = image.dimensions();
    if w as usize % patch != 0 || h as usize % patch != 0 {
        return Err(VitError::IndivisiblePatches(w, h, patch));
    }
    let (gw, gh) = (w as usize / patch, h as usize / patch);
    let n = gw * gh;
    let p2 = patch * patch;
    let mut data = vec![0.0f32; n * p2];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for py in 0..patch {
                for px in 0..patch {
                    let v = image.get_pixel((gx * patch + px) as u32, (gy * patch + py) as u32)[0];
                    data[row * p2 + py * patch + px] = v as f32 / 255.0;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n, p2], data)?)
}

impl ViTModel {
    /// Fresh model with truncated-normal (sigma 0.02) projections, unit layer
    /// norm gains, and zero biases.
    pub fn new(config: ViTConfig, rng: &mut ChaCha8Rng) -> Result<ViTModel, VitError> {
        config.validate()?;
        let d = config.d_model;
        let p2 = config.patch_size * config.patch_size;
        let n = config.num_patches();
        let sigma = 0.02;
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            layers.push(EncoderLayer {
                ln1_gain: Tensor::param(&[d], vec![1.0; d])?,
                ln1_bias: Tensor::param(&[d], vec![0.0; d])?,
                wq: Tensor::param(&[d, d], trunc_normal(rng, d * d, sigma))?,
                wk: Tensor::param(&[d, d], trunc_normal(rng, d * d, sigma))?,
                wv: Tensor::param(&[d, d], trunc_normal(rng, d * d, sigma))?,
                wo: Tensor::param(&[d, d], trunc_normal(rng, d * d, sigma))?,
                ln2_gain: Tensor::param(&[d], vec![1.0; d])?,
                ln2_bias: Tensor::param(&[d], vec![0.0; d])?,
                ff1_w: Tensor::param(&[d, config.d_ff], trunc_normal(rng, d * config.d_ff, sigma))?,
                ff1_b: Tensor::param(&[config.d_ff], vec![0.0; config.d_ff])?,
                ff2_w: Tensor::param(&[config.d_ff, d], trunc_normal(rng, config.d_ff * d, sigma))?,
                ff2_b: Tensor::param(&[d], vec![0.0; d])?,
            });
        }
        Ok(ViTModel {
            patch_proj_w: Tensor::param(&[p2, d], trunc_normal(rng, p2 * d, sigma))?,
            patch_proj_b: Tensor::param(&[d], vec![0.0; d])?,
            class_token: Tensor::param(&[1, d], trunc_normal(rng, d, sigma))?,
            positional: Tensor::param(&[n + 1, d], trunc_normal(rng, (n + 1) * d, sigma))?,
            layers,
            head_w: Tensor::param(&[d, config.num_labels], trunc_normal(rng, d * config.num_labels, sigma))?,
            head_b: Tensor::param(&[config.num_labels], vec![0.0; config.num_labels])?,
            config,
        })
    }

    /// Per-head scaled dot-product attention over head-projected Q/K/V,
    /// concatenated and projected back to d_model.
    pub fn multi_head_self_attention(
        x: &Tensor,
        layer: &EncoderLayer,
        heads: usize,
    ) -> Result<Tensor, TensorError> {
        let d = x.shape()[1];
        let dh = d / heads;
        let q = tensor::matmul(x, &layer.wq)?;
        let k = tensor::matmul(x, &layer.wk)?;
        let v = tensor::matmul(x, &layer.wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tensor::slice_cols(&q, h * dh, dh)?;
            let kh = tensor::slice_cols(&k, h * dh, dh)?;
            let vh = tensor::slice_cols(&v, h * dh, dh)?;
            outs.push(tensor::scaled_dot_attention(&qh, &kh, &vh)?);
        }
        let concat = tensor::concat_cols(&outs)?;
        tensor::matmul(&concat, &layer.wo)
    }

    /// Pre-norm block: x1 = x + MSA(LN(x)); x2 = x1 + FFN(LN(x1)).
    pub fn encoder_block(&self, x: &Tensor, layer: &EncoderLayer) -> Result<Tensor, TensorError> {
        let normed = tensor::layer_norm(x, &layer.ln1_gain, &layer.ln1_bias)?;
        let attn = Self::multi_head_self_attention(&normed, layer, self.config.heads)?;
        let x1 = tensor::add(x, &attn)?;
        let normed2 = tensor::layer_norm(&x1, &layer.ln2_gain, &layer.ln2_bias)?;
        let h = tensor::gelu(&tensor::add_bias(
            &tensor::matmul(&normed2, &layer.ff1_w)?,
            &layer.ff1_b,
        )?);
        let ffn = tensor::add_bias(&tensor::matmul(&h, &layer.ff2_w)?, &layer.ff2_b)?;
        tensor::add(&x1, &ffn)
    }

    /// Logits for a greyscale image of the configured size.
    pub fn forward(&self, image: &GrayImage) -> Result<Tensor, VitError> {
        let (w, h) = image.dimensions();
        if w as usize != self.config.image_size || h as usize != self.config.image_size {
            return Err(VitError::WrongImageSize(w, h, self.config.image_size));
        }
        let patches = patchify(image, self.config.patch_size)?;
        self.forward_patches(&patches)
    }

    /// Forward pass from a pre-built `[N, P^2]` patch matrix.
    pub fn forward_patches(&self, patches: &Tensor) -> Result<Tensor, VitError> {
        let embedded = tensor::add_bias(
            &tensor::matmul(patches, &self.patch_proj_w)?,
            &self.patch_proj_b,
        )?;
        // class token prepended at position 0, positional table added before layer 1
        let mut x = tensor::add(
            &tensor::concat_rows(&self.class_token, &embedded)?,
            &self.positional,
        )?;
        for layer in &self.layers {
            x = self.encoder_block(&x, layer)?;
        }
        let cls = tensor::row(&x, 0)?;
        let logits = tensor::add_bias(&tensor::matmul(&cls, &self.head_w)?, &self.head_b)?;
        Ok(tensor::reshape(&logits, &[self.config.num_labels])?)
    }

    /// Replaces the classification head with a freshly initialized one; the
    /// backbone is untouched.
    pub fn replace_head(&mut self, num_labels: usize, rng: &mut ChaCha8Rng) -> Result<(), VitError> {
        if num_labels == 0 {
            return Err(VitError::NoLabels);
        }
        let d = self.config.d_model;
        self.head_w = Tensor::param(&[d, num_labels], trunc_normal(rng, d * num_labels, 0.02))?;
        self.head_b = Tensor::param(&[num_labels], vec![0.0; num_labels])?;
        self.config.num_labels = num_labels;
        Ok(())
    }

    /// Clears gradient tracking on everything except the head.
    pub fn freeze_backbone(&self) {
        for (name, p) in self.parameters() {
            if !name.starts_with("head.") {
                p.set_requires_grad(false);
            }
        }
    }

    pub fn unfreeze(&self) {
        for (_, p) in self.parameters() {
            p.set_requires_grad(true);
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|(_, p)| p.requires_grad())
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// Named parameters, stable order (checkpoint and optimizer contract).
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("patch_proj.w".to_string(), self.patch_proj_w.clone()),
            ("patch_proj.b".to_string(), self.patch_proj_b.clone()),
            ("class_token".to_string(), self.class_token.clone()),
            ("positional".to_string(), self.positional.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
                ("ff1.w", &l.ff1_w),
                ("ff1.b", &l.ff1_b),
                ("ff2.w", &l.ff2_w),
                ("ff2.b", &l.ff2_b),
            ] {
                out.push((format!("layer{}.{}", i, suffix), t.clone()));
            }
        }
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out
    }

    /// Bytes of every backbone parameter, for isolation checks.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for (name, p) in self.parameters() {
            if name.starts_with("head.") {
                continue;
            }
            for v in p.data().iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        bytes
    }
}
