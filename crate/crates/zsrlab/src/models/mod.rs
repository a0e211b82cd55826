//! The trainable vision encoder (a tiny vision transformer), its adaptation
//! wrappers (visual prompts, partial freezing, linear head), and parameter
//! interpolation.

mod checkpoint;
mod encoder;
mod textbank;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use encoder::{encode_images, Encoded, EncoderConfig, VisionEncoderParams};
pub use textbank::{build_text_bank, BankMode, BankProvenance, TextBank, COMPOSITIONAL_NOISE_SIGMA};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_vec, rng_from};

/// A parameter tensor with a stable name, used for freeze masks, checkpoints
/// and interpolation manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = NamedTensor { name: name.into(), shape, data };
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        t
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        NamedTensor::new(name, shape, vec![0.0; n])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Visual prompt parameters: either tokens appended to the input sequence or
/// an additive pixel pattern. Token prompts carry their positional component
/// in the token values themselves, so the frozen base stays untouched under
/// prompt-only adaptation.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptParams {
    Token { tokens: NamedTensor },
    Pixel { pixels: NamedTensor },
}

impl PromptParams {
    /// k learnable tokens, seeded normal init with sigma 0.02.
    pub fn token(k: usize, d_model: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("token prompt requires k >= 1"));
        }
        let mut rng = rng_from(derive_seed(seed, "prompt.tokens"));
        Ok(PromptParams::Token {
            tokens: NamedTensor::new("prompt.tokens", vec![k, d_model], normal_vec(&mut rng, k * d_model, 0.02)),
        })
    }

    /// Image-shaped additive prompt, zero-initialized so the baseline forward
    /// is reproduced exactly before training.
    pub fn pixel(image_shape: [usize; 3]) -> Self {
        let [c, h, w] = image_shape;
        PromptParams::Pixel { pixels: NamedTensor::zeros("prompt.pixels", vec![c, h, w]) }
    }

    pub fn tensor(&self) -> &NamedTensor {
        match self {
            PromptParams::Token { tokens } => tokens,
            PromptParams::Pixel { pixels } => pixels,
        }
    }

    pub fn tensor_mut(&mut self) -> &mut NamedTensor {
        match self {
            PromptParams::Token { tokens } => tokens,
            PromptParams::Pixel { pixels } => pixels,
        }
    }

    pub fn token_count(&self) -> usize {
        match self {
            PromptParams::Token { tokens } => tokens.shape[0],
            PromptParams::Pixel { .. } => 0,
        }
    }
}

/// Linear readout head on top of the image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: NamedTensor, // d_embed × classes
    pub bias: NamedTensor,   // classes
}

impl LinearHead {
    pub fn init(d_embed: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, "head.weight"));
        LinearHead {
            weight: NamedTensor::new("head.weight", vec![d_embed, classes], normal_vec(&mut rng, d_embed * classes, 0.02)),
            bias: NamedTensor::zeros("head.bias", vec![classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }
}

/// Which parameter groups a training run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    Full,
    LastKBlocks(usize),
    HeadOnly,
    PromptOnly,
}

/// Trainability mask over encoder tensors plus the prompt and head groups.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    pub encoder: Vec<bool>,
    pub prompt: bool,
    pub head: bool,
}

impl FreezeMask {
    pub fn all_frozen(params: &VisionEncoderParams) -> Self {
        FreezeMask { encoder: vec![false; params.tensors.len()], prompt: false, head: false }
    }

    /// Trainable parameter count within the encoder itself.
    pub fn trainable_encoder_params(&self, params: &VisionEncoderParams) -> usize {
        params
            .tensors
            .iter()
            .zip(&self.encoder)
            .filter(|(_, &on)| on)
            .map(|(t, _)| t.numel())
            .sum()
    }
}

/// Build the trainability mask for an adaptation policy and report which
/// tensors it covers.
pub fn freeze_mask(params: &VisionEncoderParams, policy: FreezePolicy) -> Result<FreezeMask> {
    let n = params.tensors.len();
    match policy {
        FreezePolicy::Full => Ok(FreezeMask { encoder: vec![true; n], prompt: true, head: true }),
        FreezePolicy::LastKBlocks(k) => {
            let layers = params.cfg.layers;
            if k > layers {
                return Err(Error::invalid(format!("last_k_blocks: k={k} exceeds {layers} blocks")));
            }
            let encoder = params
                .tensors
                .iter()
                .map(|t| {
                    t.name
                        .strip_prefix("enc.block")
                        .and_then(|rest| rest.split('.').next())
                        .and_then(|s| s.parse::<usize>().ok())
                        .map(|b| b >= layers - k)
                        .unwrap_or(false)
                })
                .collect();
            Ok(FreezeMask { encoder, prompt: false, head: true })
        }
        FreezePolicy::HeadOnly => Ok(FreezeMask { encoder: vec![false; n], prompt: false, head: true }),
        FreezePolicy::PromptOnly => Ok(FreezeMask { encoder: vec![false; n], prompt: true, head: false }),
    }
}

/// Elementwise (1−w)·a + w·b over matching tensor manifests. The endpoints
/// return exact copies.
pub fn interpolate_params(a: &[NamedTensor], b: &[NamedTensor], w: f32) -> Result<Vec<NamedTensor>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op: "interpolate_params", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("interpolate_params: w must be in [0,1], got {w}")));
    }
    let mut out = Vec::with_capacity(a.len());
    for (ta, tb) in a.iter().zip(b) {
        if ta.name != tb.name || ta.shape != tb.shape {
            return Err(Error::invalid(format!(
                "interpolate_params: manifest mismatch at {} {:?} vs {} {:?}",
                ta.name, ta.shape, tb.name, tb.shape
            )));
        }
        if w == 0.0 {
            out.push(ta.clone());
        } else if w == 1.0 {
            out.push(tb.clone());
        } else {
            let data = ta
                .data
                .iter()
                .zip(&tb.data)
                .map(|(&x, &y)| (1.0 - w) * x + w * y)
                .collect();
            out.push(NamedTensor::new(ta.name.clone(), ta.shape.clone(), data));
        }
    }
    Ok(out)
}
