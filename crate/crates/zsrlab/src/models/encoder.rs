//! Tiny vision transformer encoder with differentiable forward pass.

use serde::{Deserialize, Serialize};

use super::{FreezeMask, NamedTensor, PromptParams};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_vec, rng_from};
use crate::tensor::{Id, Scalar, Tape};

/// Architecture hyperparameters. The parameter manifest is a pure function of
/// these values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_shape: [usize; 3], // C, H, W
    pub patch: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_embed: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { image_shape: [3, 32, 32], patch: 4, d_model: 64, layers: 4, heads: 4, d_embed: 32 }
    }
}

impl EncoderConfig {
    /// A 2-block, width-8 encoder on 8×8 inputs, small enough for exhaustive
    /// finite-difference checks.
    pub fn micro() -> Self {
        EncoderConfig { image_shape: [3, 8, 8], patch: 4, d_model: 8, layers: 2, heads: 2, d_embed: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        let [_, h, w] = self.image_shape;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let [_, h, w] = self.image_shape;
        (h / self.patch) * (w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.image_shape[0] * self.patch * self.patch
    }

    /// Sequence length before any prompt tokens: patches plus class token.
    pub fn base_seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn image_len(&self) -> usize {
        let [c, h, w] = self.image_shape;
        c * h * w
    }

    /// Parameters in one transformer block.
    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        12 * d * d + 13 * d
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.patch_dim() * d + d // patch embed
            + d // class token
            + self.base_seq_len() * d // positional
            + self.layers * self.block_param_count()
            + 2 * d // final layer norm
            + d * self.d_embed // projection
    }
}

/// All learnable parameters of the encoder as an ordered named-tensor list.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderParams {
    pub cfg: EncoderConfig,
    pub tensors: Vec<NamedTensor>,
}

impl VisionEncoderParams {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut tensors = Vec::new();
        let norm = |name: &str, shape: Vec<usize>, sigma: f64| {
            let n = shape.iter().product();
            let mut rng = rng_from(derive_seed(seed, name));
            NamedTensor::new(name, shape, normal_vec(&mut rng, n, sigma))
        };
        // weight matrices use fan-in scaling so activations and SGD gradients
        // stay O(1) at desk scale; tokens/positions keep a small sigma
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        tensors.push(norm("enc.patch_embed.weight", vec![cfg.patch_dim(), d], fan(cfg.patch_dim())));
        tensors.push(NamedTensor::zeros("enc.patch_embed.bias", vec![d]));
        tensors.push(norm("enc.class_token", vec![1, d], 0.02));
        tensors.push(norm("enc.pos_embed", vec![cfg.base_seq_len(), d], 0.02));
        for b in 0..cfg.layers {
            let p = |s: &str| format!("enc.block{b}.{s}");
            tensors.push(NamedTensor::new(p("ln1.gamma"), vec![d], vec![1.0; d]));
            tensors.push(NamedTensor::zeros(p("ln1.beta"), vec![d]));
            tensors.push(norm(&p("attn.qkv.weight"), vec![d, 3 * d], fan(d)));
            tensors.push(NamedTensor::zeros(p("attn.qkv.bias"), vec![3 * d]));
            tensors.push(norm(&p("attn.out.weight"), vec![d, d], fan(d)));
            tensors.push(NamedTensor::zeros(p("attn.out.bias"), vec![d]));
            tensors.push(NamedTensor::new(p("ln2.gamma"), vec![d], vec![1.0; d]));
            tensors.push(NamedTensor::zeros(p("ln2.beta"), vec![d]));
            tensors.push(norm(&p("mlp.up.weight"), vec![d, 4 * d], fan(d)));
            tensors.push(NamedTensor::zeros(p("mlp.up.bias"), vec![4 * d]));
            tensors.push(norm(&p("mlp.down.weight"), vec![4 * d, d], fan(4 * d)));
            tensors.push(NamedTensor::zeros(p("mlp.down.bias"), vec![d]));
        }
        tensors.push(NamedTensor::new("enc.ln_final.gamma", vec![d], vec![1.0; d]));
        tensors.push(NamedTensor::zeros("enc.ln_final.beta", vec![d]));
        tensors.push(norm("enc.proj.weight", vec![d, cfg.d_embed], fan(d)));
        Ok(VisionEncoderParams { cfg, tensors })
    }

    pub fn get(&self, name: &str) -> &NamedTensor {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Result of a batched encoder forward on a tape.
pub struct Encoded {
    /// N × d_embed image embeddings.
    pub z: Id,
    /// One flat image leaf per batch element.
    pub image_leaves: Vec<Id>,
    /// Tape leaves aligned with `params.tensors`.
    pub encoder_leaves: Vec<Id>,
    pub prompt_leaf: Option<Id>,
}

fn leaf_for<T: Scalar>(tape: &mut Tape<T>, t: &NamedTensor, requires: bool) -> Result<Id> {
    let data: Vec<T> = t.data.iter().map(|&v| T::c(v as f64)).collect();
    tape.leaf(&t.shape, data, requires)
}

/// Encode a batch of images into the joint embedding space.
///
/// `mask` controls which parameter leaves receive gradients; pass `None` for
/// pure inference. Pixel prompts are applied as clamp(x + P, 0, 1); token
/// prompts are appended after the class and patch tokens.
pub fn encode_images<T: Scalar>(
    tape: &mut Tape<T>,
    params: &VisionEncoderParams,
    prompt: Option<&PromptParams>,
    mask: Option<&FreezeMask>,
    images: &[T],
    n: usize,
    images_require_grad: bool,
) -> Result<Encoded> {
    let cfg = &params.cfg;
    cfg.validate()?;
    let [c, h, w] = cfg.image_shape;
    let img_len = cfg.image_len();
    if images.len() != n * img_len {
        return Err(Error::ShapeMismatch { op: "encode_images", lhs: vec![n, c, h, w], rhs: vec![images.len()] });
    }
    let d = cfg.d_model;
    let dh = d / cfg.heads;

    let mut encoder_leaves = Vec::with_capacity(params.tensors.len());
    for (i, t) in params.tensors.iter().enumerate() {
        let req = mask.map(|m| m.encoder[i]).unwrap_or(false);
        encoder_leaves.push(leaf_for(tape, t, req)?);
    }
    let by_name = |name: &str| -> Id {
        let idx = params.tensors.iter().position(|t| t.name == name).expect("tensor name");
        encoder_leaves[idx]
    };

    let prompt_leaf = match prompt {
        Some(p) => {
            let req = mask.map(|m| m.prompt).unwrap_or(false);
            if let PromptParams::Pixel { pixels } = p {
                if pixels.shape != vec![c, h, w] {
                    return Err(Error::ShapeMismatch { op: "pixel_prompt", lhs: pixels.shape.clone(), rhs: vec![c, h, w] });
                }
                // flattened so it adds directly onto the flat image leaf
                let data: Vec<T> = pixels.data.iter().map(|&v| T::c(v as f64)).collect();
                Some(tape.leaf(&[img_len], data, req)?)
            } else {
                Some(leaf_for(tape, p.tensor(), req)?)
            }
        }
        None => None,
    };

    // Per-head row slices of each block's output projection, shared by the batch.
    let mut out_proj_heads: Vec<Vec<Id>> = Vec::with_capacity(cfg.layers);
    for b in 0..cfg.layers {
        let w_out = by_name(&format!("enc.block{b}.attn.out.weight"));
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let rows: Vec<usize> = (hd * dh..(hd + 1) * dh).collect();
            heads.push(tape.gather_rows(w_out, &rows)?);
        }
        out_proj_heads.push(heads);
    }

    let w_pe = by_name("enc.patch_embed.weight");
    let b_pe = by_name("enc.patch_embed.bias");
    let cls_tok = by_name("enc.class_token");
    let pos = by_name("enc.pos_embed");
    let scale = T::c(1.0 / (dh as f64).sqrt());

    let mut image_leaves = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let x_leaf = tape.leaf(&[img_len], images[i * img_len..(i + 1) * img_len].to_vec(), images_require_grad)?;
        image_leaves.push(x_leaf);
        let x = match (prompt, prompt_leaf) {
            (Some(PromptParams::Pixel { .. }), Some(pl)) => {
                let sum = tape.add(x_leaf, pl)?;
                tape.clamp(sum, T::zero(), T::one())?
            }
            _ => x_leaf,
        };
        let patches = tape.extract_patches(x, c, h, w, cfg.patch)?;
        let pe = tape.matmul(patches, w_pe)?;
        let emb = tape.add_row(pe, b_pe)?;
        let mut seq = tape.concat_rows(&[cls_tok, emb])?;
        seq = tape.add(seq, pos)?;
        if let (Some(PromptParams::Token { .. }), Some(pl)) = (prompt, prompt_leaf) {
            seq = tape.concat_rows(&[seq, pl])?;
        }

        for b in 0..cfg.layers {
            let p = |s: &str| format!("enc.block{b}.{s}");
            let h1 = tape.layer_norm_last(seq, by_name(&p("ln1.gamma")), by_name(&p("ln1.beta")))?;
            let qkv_w = by_name(&p("attn.qkv.weight"));
            let qkv_b = by_name(&p("attn.qkv.bias"));
            let qkv0 = tape.matmul(h1, qkv_w)?;
            let qkv = tape.add_row(qkv0, qkv_b)?;
            let mut attn_sum: Option<Id> = None;
            for hd in 0..cfg.heads {
                let q = tape.slice_cols(qkv, hd * dh, dh)?;
                let k = tape.slice_cols(qkv, d + hd * dh, dh)?;
                let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh)?;
                let raw = tape.matmul_nt(q, k)?;
                let scores = tape.scalar_mul(raw, scale)?;
                let a = tape.softmax_last(scores)?;
                let oh = tape.matmul(a, v)?;
                let ph = tape.matmul(oh, out_proj_heads[b][hd])?;
                attn_sum = Some(match attn_sum {
                    Some(acc) => tape.add(acc, ph)?,
                    None => ph,
                });
            }
            let attn = tape.add_row(attn_sum.unwrap(), by_name(&p("attn.out.bias")))?;
            seq = tape.add(seq, attn)?;

            let h2 = tape.layer_norm_last(seq, by_name(&p("ln2.gamma")), by_name(&p("ln2.beta")))?;
            let up0 = tape.matmul(h2, by_name(&p("mlp.up.weight")))?;
            let up = tape.add_row(up0, by_name(&p("mlp.up.bias")))?;
            let act = tape.gelu(up)?;
            let down0 = tape.matmul(act, by_name(&p("mlp.down.weight")))?;
            let down = tape.add_row(down0, by_name(&p("mlp.down.bias")))?;
            seq = tape.add(seq, down)?;
        }

        let fin = tape.layer_norm_last(seq, by_name("enc.ln_final.gamma"), by_name("enc.ln_final.beta"))?;
        let cls = tape.gather_rows(fin, &[0])?;
        zs.push(tape.matmul(cls, by_name("enc.proj.weight"))?);
    }
    let z = tape.concat_rows(&zs)?;
    Ok(Encoded { z, image_leaves, encoder_leaves, prompt_leaf })
}
