//! Adversarial adaptation: one training loop parameterized by loss variant
//! and adaptation method, plus few-shot subsetting and pseudo-labeling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::attacks::{pgd_attack, AttackConfig, BatchObjective, ObjectiveEval};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, coadv_loss, contrastive_with_rows, imgcoadv_loss, per_example_nll, EmbeddingDictionary, LossVariant,
    DEFAULT_TAU,
};
use crate::models::{
    encode_images, freeze_mask, Checkpoint, CheckpointMeta, EncoderConfig, FreezeMask, FreezePolicy, LinearHead,
    PromptParams, TextBank, VisionEncoderParams,
};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{sgd_momentum_step, Id, Tape};

/// Clean epochs the adv variant spends fitting its linear head before the
/// adversarial phase starts.
pub const ADV_HEAD_PRETRAIN_EPOCHS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    FullFt,
    PartialFt(usize),
    LinearProbe,
    VptToken(usize),
    VptPixel,
}

impl Adaptation {
    pub fn policy(self) -> FreezePolicy {
        match self {
            Adaptation::FullFt => FreezePolicy::Full,
            Adaptation::PartialFt(k) => FreezePolicy::LastKBlocks(k),
            Adaptation::LinearProbe => FreezePolicy::HeadOnly,
            Adaptation::VptToken(_) | Adaptation::VptPixel => FreezePolicy::PromptOnly,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_variant: LossVariant,
    pub adaptation: Adaptation,
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Defaults to 1e-3 for fine-tuning methods and 1e-1 for prompt methods.
    #[serde(default)]
    pub lr: Option<f32>,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "AttackConfig::training_default")]
    pub attack: AttackConfig,
    /// Optional per-class cap on training examples.
    #[serde(default)]
    pub shots: Option<usize>,
    /// Ignore dataset labels and pseudo-label from the text bank instead.
    #[serde(default)]
    pub unlabeled: bool,
    /// Freeze the adv variant's head after its clean pre-training phase.
    #[serde(default)]
    pub head_frozen_after_pretrain: bool,
    /// Let the coadv dictionary receive gradient updates.
    #[serde(default)]
    pub dict_trainable: bool,
}

fn default_momentum() -> f32 {
    0.9
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    64
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl TrainConfig {
    pub fn new(loss_variant: LossVariant, adaptation: Adaptation) -> Self {
        serde_json::from_value(serde_json::json!({
            "loss_variant": loss_variant,
            "adaptation": adaptation,
        }))
        .expect("minimal config")
    }

    pub fn effective_lr(&self) -> f32 {
        self.lr.unwrap_or(match self.adaptation {
            Adaptation::VptToken(_) | Adaptation::VptPixel => 1e-1,
            _ => 1e-3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attack.validate()?;
        if self.adaptation == Adaptation::LinearProbe
            && !matches!(self.loss_variant, LossVariant::Ce | LossVariant::Adv)
        {
            return Err(Error::config(format!(
                "adaptation=linear_probe requires loss_variant ce or adv, got {:?}",
                self.loss_variant
            )));
        }
        if self.unlabeled && self.loss_variant != LossVariant::Tecoa {
            return Err(Error::config("unlabeled=true requires loss_variant=tecoa"));
        }
        if let Adaptation::PartialFt(k) | Adaptation::VptToken(k) = self.adaptation {
            if k == 0 {
                return Err(Error::config("adaptation: k must be positive"));
            }
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0) {
                return Err(Error::config(format!("lr must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.shots == Some(0) {
            return Err(Error::config("shots must be positive"));
        }
        Ok(())
    }

    fn uses_head(&self) -> bool {
        matches!(self.loss_variant, LossVariant::Ce | LossVariant::Adv)
    }
}

/// All trainable state of one model: encoder plus any prompt, head, or
/// dictionary the configuration calls for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: VisionEncoderParams,
    pub prompt: Option<PromptParams>,
    pub head: Option<LinearHead>,
    pub dict: Option<EmbeddingDictionary>,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let encoder = VisionEncoderParams::init(cfg.encoder, derive_seed(cfg.seed, "init/encoder"))?;
        let prompt = match cfg.adaptation {
            Adaptation::VptToken(k) => {
                Some(PromptParams::token(k, cfg.encoder.d_model, derive_seed(cfg.seed, "init/prompt"))?)
            }
            Adaptation::VptPixel => Some(PromptParams::pixel(cfg.encoder.image_shape)),
            _ => None,
        };
        let head = cfg
            .uses_head()
            .then(|| LinearHead::init(cfg.encoder.d_embed, n_classes, derive_seed(cfg.seed, "init/head")));
        let dict = (cfg.loss_variant == LossVariant::CoAdv).then(|| {
            let mut d = EmbeddingDictionary::init(n_classes, cfg.encoder.d_embed, derive_seed(cfg.seed, "init/dict"));
            d.trainable = cfg.dict_trainable;
            d
        });
        Ok(ModelState { encoder, prompt, head, dict })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.encoder.tensors.clone();
        let mut meta = CheckpointMeta::default();
        if let Some(p) = &self.prompt {
            meta.prompt = Some(match p {
                PromptParams::Token { .. } => "token".to_string(),
                PromptParams::Pixel { .. } => "pixel".to_string(),
            });
            tensors.push(p.tensor().clone());
        }
        if let Some(h) = &self.head {
            meta.head_classes = Some(h.classes());
            tensors.push(h.weight.clone());
            tensors.push(h.bias.clone());
        }
        if let Some(d) = &self.dict {
            meta.dict_classes = Some(d.classes());
            tensors.push(d.rows.clone());
        }
        Checkpoint { arch: self.encoder.cfg, meta, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let take = |name: &str| -> Result<crate::models::NamedTensor> {
            ckpt.tensors
                .iter()
                .find(|t| t.name == name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("checkpoint missing tensor {name}")))
        };
        let enc_tensors: Vec<_> = ckpt
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("enc."))
            .cloned()
            .collect();
        let reference = VisionEncoderParams::init(ckpt.arch, 0)?;
        if enc_tensors.len() != reference.tensors.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} encoder tensors, arch needs {}",
                enc_tensors.len(),
                reference.tensors.len()
            )));
        }
        // keep canonical ordering and verify shapes
        let mut ordered = Vec::with_capacity(reference.tensors.len());
        for r in &reference.tensors {
            let t = take(&r.name)?;
            if t.shape != r.shape {
                return Err(Error::ShapeMismatch { op: "from_checkpoint", lhs: t.shape, rhs: r.shape.clone() });
            }
            ordered.push(t);
        }
        let encoder = VisionEncoderParams { cfg: ckpt.arch, tensors: ordered };
        let prompt = match ckpt.meta.prompt.as_deref() {
            Some("token") => {
                let t = take("prompt.tokens")?;
                Some(PromptParams::Token { tokens: t })
            }
            Some("pixel") => Some(PromptParams::Pixel { pixels: take("prompt.pixels")? }),
            Some(other) => return Err(Error::invalid(format!("unknown prompt kind {other:?}"))),
            None => None,
        };
        let head = match ckpt.meta.head_classes {
            Some(_) => Some(LinearHead { weight: take("head.weight")?, bias: take("head.bias")? }),
            None => None,
        };
        let dict = match ckpt.meta.dict_classes {
            Some(_) => Some(EmbeddingDictionary { rows: take("dict.rows")?, trainable: false, seed: 0 }),
            None => None,
        };
        Ok(ModelState { encoder, prompt, head, dict })
    }
}

/// Parameter groups a phase may update, in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Encoder(usize),
    Prompt,
    HeadWeight,
    HeadBias,
    Dict,
}

fn slots_for(model: &ModelState, mask: &FreezeMask, dict_trainable: bool) -> Vec<Slot> {
    let mut out = Vec::new();
    for (i, &on) in mask.encoder.iter().enumerate() {
        if on {
            out.push(Slot::Encoder(i));
        }
    }
    if mask.prompt && model.prompt.is_some() {
        out.push(Slot::Prompt);
    }
    if mask.head && model.head.is_some() {
        out.push(Slot::HeadWeight);
        out.push(Slot::HeadBias);
    }
    if dict_trainable && model.dict.is_some() {
        out.push(Slot::Dict);
    }
    out
}

fn slot_len(model: &ModelState, slot: Slot) -> usize {
    match slot {
        Slot::Encoder(i) => model.encoder.tensors[i].numel(),
        Slot::Prompt => model.prompt.as_ref().unwrap().tensor().numel(),
        Slot::HeadWeight => model.head.as_ref().unwrap().weight.numel(),
        Slot::HeadBias => model.head.as_ref().unwrap().bias.numel(),
        Slot::Dict => model.dict.as_ref().unwrap().rows.numel(),
    }
}

fn slot_data_mut(model: &mut ModelState, slot: Slot) -> &mut [f32] {
    match slot {
        Slot::Encoder(i) => &mut model.encoder.tensors[i].data,
        Slot::Prompt => &mut model.prompt.as_mut().unwrap().tensor_mut().data,
        Slot::HeadWeight => &mut model.head.as_mut().unwrap().weight.data,
        Slot::HeadBias => &mut model.head.as_mut().unwrap().bias.data,
        Slot::Dict => &mut model.dict.as_mut().unwrap().rows.data,
    }
}

/// Tape leaves holding the model parameters for one forward/backward pass.
struct BatchGraph {
    encoder_leaves: Vec<Id>,
    prompt_leaf: Option<Id>,
    head_leaves: Option<(Id, Id)>,
    dict_leaf: Option<Id>,
    loss: Id,
    /// Extra encoder/prompt leaves from a second view, if any; their
    /// gradients add to the first view's.
    second_view: Option<(Vec<Id>, Option<Id>)>,
}

fn head_logits(tape: &mut Tape<f32>, head: &LinearHead, z: Id, requires: bool) -> Result<(Id, Id, Id)> {
    let w = tape.leaf(&head.weight.shape, head.weight.data.clone(), requires)?;
    let b = tape.leaf(&head.bias.shape, head.bias.data.clone(), requires)?;
    let zw = tape.matmul(z, w)?;
    let logits = tape.add_row(zw, b)?;
    Ok((logits, w, b))
}

/// Build the training loss for one batch on a fresh tape.
fn batch_graph(
    tape: &mut Tape<f32>,
    model: &ModelState,
    mask: &FreezeMask,
    cfg: &TrainConfig,
    images: &[f32],
    labels: &[usize],
    bank: &TextBank,
    view_b: Option<&[f32]>,
) -> Result<BatchGraph> {
    let n = labels.len();
    let enc = encode_images(tape, &model.encoder, model.prompt.as_ref(), Some(mask), images, n, false)?;
    let mut head_leaves = None;
    let mut dict_leaf = None;
    let mut second_view = None;
    let loss = match cfg.loss_variant {
        LossVariant::Ce | LossVariant::Adv => {
            let head = model.head.as_ref().ok_or_else(|| Error::invalid("ce/adv variant needs a head"))?;
            let (logits, w, b) = head_logits(tape, head, enc.z, mask.head)?;
            head_leaves = Some((w, b));
            ce_loss(tape, logits, labels)?
        }
        LossVariant::Tecoa => {
            let rows: Vec<f32> = bank.rows.clone();
            let rows = tape.constant(&[bank.len(), bank.d_embed], rows)?;
            contrastive_with_rows(tape, enc.z, rows, labels, cfg.tau)?
        }
        LossVariant::CoAdv => {
            let dict = model.dict.as_ref().ok_or_else(|| Error::invalid("coadv variant needs a dictionary"))?;
            let (loss, rows) = coadv_loss(tape, enc.z, dict, labels, cfg.tau)?;
            if dict.trainable {
                dict_leaf = Some(rows);
            }
            loss
        }
        LossVariant::ImgCoAdv => {
            let vb = view_b.ok_or_else(|| Error::invalid("imgcoadv needs a second view"))?;
            let enc_b = encode_images(tape, &model.encoder, model.prompt.as_ref(), Some(mask), vb, n, false)?;
            second_view = Some((enc_b.encoder_leaves, enc_b.prompt_leaf));
            imgcoadv_loss(tape, enc.z, enc_b.z, cfg.tau)?
        }
    };
    Ok(BatchGraph {
        encoder_leaves: enc.encoder_leaves,
        prompt_leaf: enc.prompt_leaf,
        head_leaves,
        dict_leaf,
        loss,
        second_view,
    })
}

fn leaf_grad(tape: &Tape<f32>, id: Id, len: usize) -> Vec<f32> {
    tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
}

fn slot_grad(tape: &Tape<f32>, graph: &BatchGraph, model: &ModelState, slot: Slot) -> Vec<f32> {
    let len = slot_len(model, slot);
    let mut g = match slot {
        Slot::Encoder(i) => leaf_grad(tape, graph.encoder_leaves[i], len),
        Slot::Prompt => leaf_grad(tape, graph.prompt_leaf.expect("prompt leaf"), len),
        Slot::HeadWeight => leaf_grad(tape, graph.head_leaves.expect("head leaves").0, len),
        Slot::HeadBias => leaf_grad(tape, graph.head_leaves.expect("head leaves").1, len),
        Slot::Dict => leaf_grad(tape, graph.dict_leaf.expect("dict leaf"), len),
    };
    if let Some((enc_b, prompt_b)) = &graph.second_view {
        let extra = match slot {
            Slot::Encoder(i) => Some(leaf_grad(tape, enc_b[i], len)),
            Slot::Prompt => prompt_b.map(|id| leaf_grad(tape, id, len)),
            _ => None,
        };
        if let Some(extra) = extra {
            for (a, b) in g.iter_mut().zip(extra) {
                *a += b;
            }
        }
    }
    g
}

/// Attack-time objective: the variant's own per-example loss as a function of
/// the images, with all parameters frozen at their current values.
pub struct PgdObjective<'a> {
    pub model: &'a ModelState,
    pub kind: ObjectiveKind,
    pub labels: Vec<usize>,
    pub tau: f64,
}

/// Which logits the per-example cross-entropy runs over.
pub enum ObjectiveKind {
    /// Linear-head logits (ce/adv).
    Head,
    /// Cosine similarities against fixed rows, scaled by 1/τ (contrastive
    /// variants and zero-shot evaluation).
    Rows { rows: Vec<f32>, count: usize },
}

impl PgdObjective<'_> {
    pub fn for_variant<'a>(
        model: &'a ModelState,
        cfg: &TrainConfig,
        bank: &TextBank,
        labels: &[usize],
        zb: Option<Vec<f32>>,
    ) -> Result<PgdObjective<'a>> {
        let d_e = model.encoder.cfg.d_embed;
        let kind = match cfg.loss_variant {
            LossVariant::Ce | LossVariant::Adv => ObjectiveKind::Head,
            LossVariant::Tecoa => ObjectiveKind::Rows { rows: bank.rows.clone(), count: bank.len() },
            LossVariant::CoAdv => {
                let dict = model.dict.as_ref().ok_or_else(|| Error::invalid("coadv needs a dictionary"))?;
                ObjectiveKind::Rows { rows: dict.rows.data.clone(), count: dict.classes() }
            }
            LossVariant::ImgCoAdv => {
                let rows = zb.ok_or_else(|| Error::invalid("imgcoadv objective needs view-b embeddings"))?;
                let count = rows.len() / d_e;
                ObjectiveKind::Rows { rows, count }
            }
        };
        Ok(PgdObjective { model, kind, labels: labels.to_vec(), tau: cfg.tau })
    }

    fn logits(&self, tape: &mut Tape<f32>, z: Id) -> Result<Id> {
        match &self.kind {
            ObjectiveKind::Head => {
                let head = self.model.head.as_ref().ok_or_else(|| Error::invalid("head objective without head"))?;
                let (logits, _, _) = head_logits(tape, head, z, false)?;
                Ok(logits)
            }
            ObjectiveKind::Rows { rows, count } => {
                let d_e = self.model.encoder.cfg.d_embed;
                let r = tape.constant(&[*count, d_e], rows.clone())?;
                let cos = tape.cosine_similarity_matrix(z, r)?;
                tape.scalar_mul(cos, (1.0 / self.tau) as f32)
            }
        }
    }

    /// Class decisions on a batch under this objective's logits; ties go to
    /// the lowest index.
    pub fn predict(&self, images: &[f32]) -> Result<Vec<usize>> {
        let n = images.len() / self.model.encoder.cfg.image_len();
        let mut tape = Tape::new();
        let enc = encode_images(&mut tape, &self.model.encoder, self.model.prompt.as_ref(), None, images, n, false)?;
        let logits = self.logits(&mut tape, enc.z)?;
        let cols = *tape.shape(logits).last().unwrap();
        let data = tape.data(logits);
        Ok((0..n).map(|i| argmax_lowest(&data[i * cols..(i + 1) * cols])).collect())
    }
}

impl BatchObjective for PgdObjective<'_> {
    fn image_len(&self) -> usize {
        self.model.encoder.cfg.image_len()
    }

    fn eval(&self, images: &[f32], want_grad: bool) -> Result<ObjectiveEval> {
        let n = self.labels.len();
        let mut tape = Tape::new();
        let enc = encode_images(
            &mut tape,
            &self.model.encoder,
            self.model.prompt.as_ref(),
            None,
            images,
            n,
            want_grad,
        )?;
        let logits = self.logits(&mut tape, enc.z)?;
        let nll = per_example_nll(&mut tape, logits, &self.labels)?;
        let per_example: Vec<f64> = tape.data(nll).iter().map(|&v| v as f64).collect();
        let grad = if want_grad {
            let mean = tape.mean(nll)?;
            tape.backward(mean)?;
            let il = self.image_len();
            let mut g = Vec::with_capacity(n * il);
            for &leaf in &enc.image_leaves {
                g.extend_from_slice(tape.grad(leaf).ok_or_else(|| Error::invalid("image gradient missing"))?);
            }
            Some(g)
        } else {
            None
        };
        Ok(ObjectiveEval { per_example, grad })
    }
}

fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-epoch record written to the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    /// Fraction of attacked training examples misclassified under the
    /// variant's own decision rule; absent for clean phases/variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_success: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    word_pos_hi: u64,
    word_pos_lo: u64,
}

/// Resumable training state: model, optimizer velocities, RNG position, and
/// the metric log so far.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    velocities: Vec<Vec<f32>>,
    rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    cfg: TrainConfig,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
    rng: RngState,
    velocity_lens: Vec<usize>,
}

impl TrainState {
    pub fn init(cfg: TrainConfig, n_classes: usize) -> Result<TrainState> {
        let model = ModelState::init(&cfg, n_classes)?;
        let rng = rng_from(derive_seed(cfg.seed, "train/loop"));
        let mut st = TrainState { cfg, model, epoch: 0, metrics: Vec::new(), velocities: Vec::new(), rng };
        st.reset_velocities()?;
        Ok(st)
    }

    /// Total epochs including any head pre-training phase.
    pub fn total_epochs(&self) -> usize {
        self.cfg.epochs + self.pretrain_epochs()
    }

    fn pretrain_epochs(&self) -> usize {
        if self.cfg.loss_variant == LossVariant::Adv {
            ADV_HEAD_PRETRAIN_EPOCHS
        } else {
            0
        }
    }

    fn in_pretrain(&self) -> bool {
        self.epoch < self.pretrain_epochs()
    }

    fn current_mask(&self) -> Result<FreezeMask> {
        if self.in_pretrain() {
            let mut m = FreezeMask::all_frozen(&self.model.encoder);
            m.head = true;
            return Ok(m);
        }
        let mut m = freeze_mask(&self.model.encoder, self.cfg.adaptation.policy())?;
        if self.cfg.head_frozen_after_pretrain && self.cfg.loss_variant == LossVariant::Adv {
            m.head = false;
        }
        Ok(m)
    }

    fn current_slots(&self) -> Result<Vec<Slot>> {
        let mask = self.current_mask()?;
        let dict_on = !self.in_pretrain() && self.cfg.dict_trainable;
        Ok(slots_for(&self.model, &mask, dict_on))
    }

    fn reset_velocities(&mut self) -> Result<()> {
        self.velocities = self
            .current_slots()?
            .iter()
            .map(|&s| vec![0.0; slot_len(&self.model, s)])
            .collect();
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.to_checkpoint().save(&dir.join("model.ckpt"))?;
        let header = StateHeader {
            cfg: self.cfg.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            rng: RngState {
                seed: derive_seed(self.cfg.seed, "train/loop"),
                word_pos_hi: (self.rng.get_word_pos() >> 64) as u64,
                word_pos_lo: self.rng.get_word_pos() as u64,
            },
            velocity_lens: self.velocities.iter().map(|v| v.len()).collect(),
        };
        std::fs::write(dir.join("state.json"), serde_json::to_vec_pretty(&header)?)?;
        let mut buf = Vec::new();
        for v in &self.velocities {
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(dir.join("velocities.bin"), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<TrainState> {
        let header: StateHeader = serde_json::from_slice(&std::fs::read(dir.join("state.json"))?)?;
        let model = ModelState::from_checkpoint(&Checkpoint::load(&dir.join("model.ckpt"))?)?;
        let vbytes = std::fs::read(dir.join("velocities.bin"))?;
        let total: usize = header.velocity_lens.iter().sum();
        if vbytes.len() != total * 4 {
            return Err(Error::invalid(format!(
                "velocities.bin has {} bytes, expected {}",
                vbytes.len(),
                total * 4
            )));
        }
        let flat: Vec<f32> = vbytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let mut velocities = Vec::new();
        let mut off = 0;
        for &len in &header.velocity_lens {
            velocities.push(flat[off..off + len].to_vec());
            off += len;
        }
        let mut rng = rng_from(header.rng.seed);
        rng.set_word_pos(((header.rng.word_pos_hi as u128) << 64) | header.rng.word_pos_lo as u128);
        let mut dict_flag_model = model;
        if let Some(d) = &mut dict_flag_model.dict {
            d.trainable = header.cfg.dict_trainable;
        }
        Ok(TrainState {
            cfg: header.cfg,
            model: dict_flag_model,
            epoch: header.epoch,
            metrics: header.metrics,
            velocities,
            rng,
        })
    }

    /// Run one epoch: per minibatch, attack with the current parameters, then
    /// take one momentum step on the variant's loss.
    pub fn run_epoch(&mut self, data: &Dataset, bank: &TextBank) -> Result<()> {
        let pretrain = self.in_pretrain();
        let slots = self.current_slots()?;
        let mask = self.current_mask()?;
        if self.velocities.len() != slots.len() {
            self.reset_velocities()?;
        }
        let il = data.image_len();
        let n = data.len();
        if n == 0 {
            return Err(Error::invalid("empty training dataset"));
        }

        // labels for this epoch: dataset labels, or fresh pseudo-labels from
        // the clean images under the current parameters
        let labels: Vec<usize> = if self.cfg.unlabeled {
            pseudo_label(&self.model, &data.images, n, bank, self.cfg.tau)?
                .into_iter()
                .map(|l| l as usize)
                .collect()
        } else {
            data.labels
                .as_ref()
                .ok_or_else(|| Error::invalid("dataset has no labels; set unlabeled=true for tecoa"))?
                .iter()
                .map(|&l| l as usize)
                .collect()
        };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let attack_on = !pretrain && self.cfg.loss_variant != LossVariant::Ce;
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        let mut adv_hits = 0usize;
        let mut adv_total = 0usize;

        for chunk in order.chunks(self.cfg.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * il);
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                x.extend_from_slice(data.image(i));
                y.push(labels[i]);
            }

            // second view for imgcoadv: clean, lightly augmented
            let view_b = (!pretrain && self.cfg.loss_variant == LossVariant::ImgCoAdv).then(|| {
                let mut vb = Vec::with_capacity(x.len());
                for &i in chunk {
                    vb.extend(augment(data.image(i), data.image_shape, &mut self.rng));
                }
                vb
            });

            let x_train = if attack_on {
                let zb = match &view_b {
                    Some(vb) => Some(embed_images(&self.model, vb, chunk.len())?),
                    None => None,
                };
                let obj_labels: Vec<usize> = if self.cfg.loss_variant == LossVariant::ImgCoAdv {
                    (0..chunk.len()).collect()
                } else {
                    y.clone()
                };
                let obj = PgdObjective::for_variant(&self.model, &self.cfg, bank, &obj_labels, zb)?;
                let seed = self.rng.gen::<u64>();
                let batch = pgd_attack(&obj, &x, &self.cfg.attack, seed)?;
                let preds = obj.predict(&batch.x_adv)?;
                adv_hits += preds.iter().zip(&obj_labels).filter(|(p, l)| p != l).count();
                adv_total += chunk.len();
                batch.x_adv
            } else {
                x
            };

            let variant_cfg = if pretrain {
                // head pre-training is plain cross-entropy on clean images
                TrainConfig { loss_variant: LossVariant::Ce, ..self.cfg.clone() }
            } else {
                self.cfg.clone()
            };
            let mut tape = Tape::new();
            let graph = batch_graph(&mut tape, &self.model, &mask, &variant_cfg, &x_train, &y, bank, view_b.as_deref())?;
            tape.backward(graph.loss)?;
            loss_sum += tape.item(graph.loss) as f64;
            batches += 1;

            let lr = self.cfg.effective_lr();
            for (si, &slot) in slots.iter().enumerate() {
                let mut g = slot_grad(&tape, &graph, &self.model, slot);
                let v = &mut self.velocities[si];
                sgd_momentum_step(slot_data_mut(&mut self.model, slot), &mut g, v, lr, self.cfg.momentum)?;
            }
        }

        self.metrics.push(EpochMetrics {
            epoch: self.epoch,
            phase: if pretrain { "pretrain".into() } else { "train".into() },
            train_loss: loss_sum / batches as f64,
            attack_success: (adv_total > 0).then(|| adv_hits as f64 / adv_total as f64),
        });
        self.epoch += 1;
        if pretrain && !self.in_pretrain() {
            // phase change: the trainable set is different now
            self.reset_velocities()?;
        }
        Ok(())
    }
}

/// Train from scratch for `cfg.epochs` (plus any pre-training phase).
pub fn run_training(cfg: &TrainConfig, data: &Dataset, bank: &TextBank) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.loss_variant == LossVariant::Tecoa || cfg.unlabeled {
        if bank.len() != data.classes.len() {
            return Err(Error::config(format!(
                "text bank has {} rows but dataset has {} classes",
                bank.len(),
                data.classes.len()
            )));
        }
        if bank.d_embed != cfg.encoder.d_embed {
            return Err(Error::config(format!(
                "bank d_embed {} != encoder d_embed {}",
                bank.d_embed, cfg.encoder.d_embed
            )));
        }
    }
    let data = match cfg.shots {
        Some(s) => few_shot_subset(data, s, derive_seed(cfg.seed, "train/fewshot"))?,
        None => data.clone(),
    };
    let mut st = TrainState::init(cfg.clone(), data.classes.len())?;
    for _ in 0..st.total_epochs() {
        st.run_epoch(&data, bank)?;
    }
    Ok(st)
}

/// Horizontal flip (p=½), ≤2px translation with edge padding, and ±0.02
/// uniform pixel noise — the light augmentation for imgcoadv's clean view.
fn augment(image: &[f32], shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    let flip = rng.gen::<bool>();
    let dx = rng.gen_range(-2i64..=2);
    let dy = rng.gen_range(-2i64..=2);
    let mut out = vec![0.0f32; image.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x } as i64;
                let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                let sx = (sx - dx).clamp(0, w as i64 - 1) as usize;
                let v = image[ch * h * w + sy * w + sx] + rng.gen_range(-0.02..0.02f32);
                out[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Inference-only embedding of a flat image batch.
pub fn embed_images(model: &ModelState, images: &[f32], n: usize) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let enc = encode_images(&mut tape, &model.encoder, model.prompt.as_ref(), None, images, n, false)?;
    Ok(tape.data(enc.z).to_vec())
}

/// Argmax-cosine labels against the bank rows; ties break to the lowest class
/// index. This is exactly the zero-shot decision rule.
pub fn pseudo_label(model: &ModelState, images: &[f32], n: usize, bank: &TextBank, tau: f64) -> Result<Vec<u32>> {
    if bank.is_empty() {
        return Err(Error::invalid("pseudo_label: empty text bank"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("pseudo_label: tau must be positive, got {tau}")));
    }
    let mut tape = Tape::new();
    let enc = encode_images(&mut tape, &model.encoder, model.prompt.as_ref(), None, images, n, false)?;
    let rows = tape.constant(&[bank.len(), bank.d_embed], bank.rows.clone())?;
    let cos = tape.cosine_similarity_matrix(enc.z, rows)?;
    let data = tape.data(cos);
    let c = bank.len();
    Ok((0..n).map(|i| argmax_lowest(&data[i * c..(i + 1) * c]) as u32).collect())
}

/// Uniform per-class subsample of at most `shots` examples, deterministic in
/// the seed. Selected indices keep dataset order.
pub fn few_shot_subset(data: &Dataset, shots: usize, seed: u64) -> Result<Dataset> {
    if shots == 0 {
        return Err(Error::invalid("few_shot_subset: shots must be positive"));
    }
    let labels = data.labels.as_ref().ok_or_else(|| Error::invalid("few_shot_subset: dataset has no labels"))?;
    let mut keep = Vec::new();
    for class in 0..data.classes.len() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| labels[i] as usize == class).collect();
        let mut rng = rng_from(derive_seed(seed, &format!("fewshot/{class}")));
        idx.shuffle(&mut rng);
        idx.truncate(shots);
        keep.extend(idx);
    }
    keep.sort_unstable();
    Ok(data.subset(&keep))
}
