//! Convolutional baseline trained from scratch per concept.
//!
//! Hidden conv and fully connected layers use ReLU; the final layer carries
//! no activation, since applying ReLU there drives training toward constant
//! outputs. A dying-ReLU probe reports the per-layer fraction of units that
//! stay at zero across a whole batch.

use image::GrayImage;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("image size {0}x{1} does not match configured {2}x{2}")]
    WrongImageSize(u32, u32, usize),
    #[error("probe batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CnnConfig {
    pub input_size: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_widths: Vec<usize>,
    /// Binary classification via two raw logits.
    pub num_outputs: usize,
}

impl CnnConfig {
    /// Default full-scale topology: a documented stand-in, not a transcription
    /// of any published figure.
    pub fn default_full() -> Self {
        CnnConfig {
            input_size: 224,
            conv_blocks: vec![
                ConvBlock { out_channels: 32, kernel: 3, stride: 1, pool: 2 },
                ConvBlock { out_channels: 64, kernel: 3, stride: 1, pool: 2 },
                ConvBlock { out_channels: 128, kernel: 3, stride: 1, pool: 2 },
            ],
            fc_widths: vec![256, 64],
            num_outputs: 2,
        }
    }

    /// Small topology for desk-scale training tests on 32x32 inputs.
    pub fn tiny() -> Self {
        CnnConfig {
            input_size: 32,
            conv_blocks: vec![
                ConvBlock { out_channels: 8, kernel: 3, stride: 1, pool: 2 },
                ConvBlock { out_channels: 16, kernel: 3, stride: 1, pool: 2 },
            ],
            fc_widths: vec![32],
            num_outputs: 2,
        }
    }
}

pub struct CnnModel {
    pub config: CnnConfig,
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    pub fc_w: Vec<Tensor>,
    pub fc_b: Vec<Tensor>,
}

fn he_normal(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    use rand::Rng;
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (z * std) as f32
        })
        .collect()
}

impl CnnModel {
    /// He fan-in init so that a fresh network is unlikely to start dead.
    pub fn new(config: CnnConfig, rng: &mut ChaCha8Rng) -> Result<CnnModel, CnnError> {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut channels = 1usize;
        let mut side = config.input_size;
        for b in &config.conv_blocks {
            let fan_in = channels * b.kernel * b.kernel;
            conv_w.push(Tensor::param(
                &[b.out_channels, channels, b.kernel, b.kernel],
                he_normal(rng, b.out_channels * fan_in, fan_in),
            )?);
            conv_b.push(Tensor::param(&[b.out_channels], vec![0.0; b.out_channels])?);
            channels = b.out_channels;
            side = (side + 2 * (b.kernel / 2) - b.kernel) / b.stride + 1;
            side /= b.pool;
        }
        let mut fc_w = Vec::new();
        let mut fc_b = Vec::new();
        let mut width = channels * side * side;
        for &w in config.fc_widths.iter().chain([config.num_outputs].iter()) {
            fc_w.push(Tensor::param(&[width, w], he_normal(rng, width * w, width))?);
            fc_b.push(Tensor::param(&[w], vec![0.0; w])?);
            width = w;
        }
        Ok(CnnModel { config, conv_w, conv_b, fc_w, fc_b })
    }

    fn image_tensor(&self, image: &GrayImage) -> Result<Tensor, CnnError> {
        let (w, h) = image.dimensions();
        if w as usize != self.config.input_size || h as usize != self.config.input_size {
            return Err(CnnError::WrongImageSize(w, h, self.config.input_size));
        }
        let data: Vec<f32> = image.pixels().map(|p| p[0] as f32 / 255.0).collect();
        Ok(Tensor::from_vec(&[1, h as usize, w as usize], data)?)
    }

    /// Two raw logits (no activation on the final layer).
    pub fn forward(&self, image: &GrayImage) -> Result<Tensor, CnnError> {
        Ok(self.forward_traced(image, None)?)
    }

    /// Forward pass; when `trace` is given, each ReLU layer's activations are
    /// appended to it in layer order.
    fn forward_traced(
        &self,
        image: &GrayImage,
        mut trace: Option<&mut Vec<Vec<f32>>>,
    ) -> Result<Tensor, CnnError> {
        let mut x = self.image_tensor(image)?;
        for (i, b) in self.config.conv_blocks.iter().enumerate() {
            let conv = tensor::conv2d(&x, &self.conv_w[i], &self.conv_b[i], b.stride, b.kernel / 2)?;
            let act = tensor::relu(&conv);
            if let Some(t) = trace.as_deref_mut() {
                t.push(act.to_vec());
            }
            x = tensor::max_pool2d(&act, b.pool)?;
        }
        let mut x = tensor::reshape(&x, &[1, x.numel()])?;
        let n_fc = self.fc_w.len();
        for i in 0..n_fc {
            let lin = tensor::add_bias(&tensor::matmul(&x, &self.fc_w[i])?, &self.fc_b[i])?;
            if i + 1 < n_fc {
                let act = tensor::relu(&lin);
                if let Some(t) = trace.as_deref_mut() {
                    t.push(act.to_vec());
                }
                x = act;
            } else {
                x = lin;
            }
        }
        Ok(tensor::reshape(&x, &[self.config.num_outputs])?)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            out.push((format!("conv{}.w", i), w.clone()));
            out.push((format!("conv{}.b", i), b.clone()));
        }
        for (i, (w, b)) in self.fc_w.iter().zip(&self.fc_b).enumerate() {
            out.push((format!("fc{}.w", i), w.clone()));
            out.push((format!("fc{}.b", i), b.clone()));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }
}

/// Dead-unit fraction of one ReLU layer over a probe batch.
#[derive(Debug, Clone)]
pub struct DeadReluReport {
    pub layer: String,
    pub dead_fraction: f64,
    pub flagged: bool,
}

/// Fraction of units in each ReLU layer whose activation is zero across the
/// entire probe batch; a layer is flagged at >= 0.99.
pub fn detect_dying_relu(
    model: &CnnModel,
    probe_batch: &[GrayImage],
) -> Result<Vec<DeadReluReport>, CnnError> {
    if probe_batch.is_empty() {
        return Err(CnnError::EmptyBatch);
    }
    let mut alive: Vec<Vec<bool>> = Vec::new();
    for img in probe_batch {
        let mut trace = Vec::new();
        model.forward_traced(img, Some(&mut trace))?;
        if alive.is_empty() {
            alive = trace.iter().map(|t| vec![false; t.len()]).collect();
        }
        for (layer, acts) in trace.iter().enumerate() {
            for (u, &v) in acts.iter().enumerate() {
                if v > 0.0 {
                    alive[layer][u] = true;
                }
            }
        }
    }
    let mut names: Vec<String> = (0..model.config.conv_blocks.len())
        .map(|i| format!("conv{}", i))
        .collect();
    names.extend((0..model.config.fc_widths.len()).map(|i| format!("fc{}", i)));
    Ok(alive
        .iter()
        .zip(names)
        .map(|(units, layer)| {
            let dead = units.iter().filter(|&&a| !a).count();
            let dead_fraction = dead as f64 / units.len() as f64;
            DeadReluReport { layer, dead_fraction, flagged: dead_fraction >= 0.99 }
        })
        .collect())
}
