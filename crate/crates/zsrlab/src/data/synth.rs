//! Synthetic compositional shape data: every class name is "<color> <shape>",
//! so class pairs can share attributes. The train/held-out split is a Latin
//! square over the color×shape grid, which guarantees every held-out class
//! shares both its color and its shape with some training class.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{build_text_bank, BankMode, TextBank};
use crate::rng::{derive_seed, rng_from};

pub const DEFAULT_COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const DEFAULT_SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_colors")]
    pub colors: Vec<String>,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<String>,
    /// Images per class in the train split.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    /// Images per class in the train-class test split and in each held-out set.
    #[serde(default = "default_eval_per_class")]
    pub eval_per_class: usize,
    /// Number of held-out class groups.
    #[serde(default = "default_groups")]
    pub heldout_groups: usize,
    #[serde(default = "default_image_shape")]
    pub image_shape: [usize; 3],
    /// Gaussian render noise sigma.
    #[serde(default = "default_noise")]
    pub noise_sigma: f32,
    /// Text-embedding width for the generated banks.
    #[serde(default = "default_d_embed")]
    pub d_embed: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_colors() -> Vec<String> {
    DEFAULT_COLORS.iter().map(|s| s.to_string()).collect()
}
fn default_shapes() -> Vec<String> {
    DEFAULT_SHAPES.iter().map(|s| s.to_string()).collect()
}
fn default_per_class() -> usize {
    64
}
fn default_eval_per_class() -> usize {
    32
}
fn default_groups() -> usize {
    3
}
fn default_image_shape() -> [usize; 3] {
    [3, 32, 32]
}
fn default_noise() -> f32 {
    0.05
}
fn default_d_embed() -> usize {
    32
}

impl Default for SynthSpec {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.colors.len() < 2 || self.shapes.len() < 2 {
            return Err(Error::config("need at least 2 colors and 2 shapes"));
        }
        if self.image_shape[0] != 3 {
            return Err(Error::config("image_shape: first dim must be 3 (rgb)"));
        }
        if self.image_shape[1] < 8 || self.image_shape[2] < 8 {
            return Err(Error::config("image_shape: spatial dims must be >= 8"));
        }
        if self.per_class == 0 || self.eval_per_class == 0 {
            return Err(Error::config("per_class and eval_per_class must be positive"));
        }
        if self.heldout_groups == 0 {
            return Err(Error::config("heldout_groups must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        if self.d_embed == 0 || self.d_embed % 2 != 0 {
            return Err(Error::config("d_embed must be positive and even"));
        }
        let n_held = self.heldout_class_names().len();
        if n_held < self.heldout_groups {
            return Err(Error::config(format!(
                "heldout_groups={} but only {} held-out classes",
                self.heldout_groups, n_held
            )));
        }
        Ok(())
    }

    /// Latin-square split: cell (color i, shape j) trains when
    /// (j - i) mod n_shapes falls in the first half of the row.
    fn cell_is_train(&self, i: usize, j: usize) -> bool {
        let n = self.shapes.len();
        (j + n - i % n) % n < n.div_ceil(2)
    }

    pub fn train_class_names(&self) -> Vec<String> {
        self.class_names(true)
    }

    pub fn heldout_class_names(&self) -> Vec<String> {
        self.class_names(false)
    }

    fn class_names(&self, train: bool) -> Vec<String> {
        let mut out = Vec::new();
        for (i, c) in self.colors.iter().enumerate() {
            for (j, s) in self.shapes.iter().enumerate() {
                if self.cell_is_train(i, j) == train {
                    out.push(format!("{c} {s}"));
                }
            }
        }
        out
    }
}

fn color_rgb(name: &str) -> [f32; 3] {
    match name {
        "red" => [0.90, 0.10, 0.10],
        "green" => [0.10, 0.80, 0.15],
        "blue" => [0.15, 0.25, 0.90],
        "yellow" => [0.90, 0.85, 0.10],
        "magenta" => [0.85, 0.15, 0.80],
        "cyan" => [0.10, 0.80, 0.85],
        // unknown color names get a deterministic hue from the name hash
        other => {
            let h = derive_seed(0, other);
            let f = |k: u64| 0.15 + 0.7 * ((h >> (k * 8)) & 0xff) as f32 / 255.0;
            [f(0), f(1), f(2)]
        }
    }
}

fn inside_shape(shape: &str, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        "square" => dx.abs().max(dy.abs()) <= 0.82 * r,
        "triangle" => {
            // upward-pointing isoceles triangle
            dy >= -r && dy <= 0.75 * r && dx.abs() <= 0.62 * (dy + r)
        }
        "cross" => (dx.abs() <= 0.34 * r && dy.abs() <= r) || (dy.abs() <= 0.34 * r && dx.abs() <= r),
        // circle and any unknown shape name
        _ => dx * dx + dy * dy <= r * r,
    }
}

/// Render one image of the given class into `out` (C·H·W, CHW order).
fn render(spec: &SynthSpec, color: &str, shape: &str, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let [_, h, w] = spec.image_shape;
    let (hf, wf) = (h as f32, w as f32);
    let rgb = color_rgb(color);
    // cap the radius so the center always has at least a pixel of slack on
    // tiny canvases
    let r = (rng.gen_range(0.24..0.38) * hf).min(0.5 * hf.min(wf) - 1.5);
    let cx = rng.gen_range(r + 1.0..wf - r - 1.0);
    let cy = rng.gen_range(r + 1.0..hf - r - 1.0);
    let bg = 0.05 + 0.05 * rng.gen_range(0.0..1.0f32);
    for y in 0..h {
        for x in 0..w {
            let hit = inside_shape(shape, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
            for c in 0..3 {
                let base = if hit { rgb[c] } else { bg };
                let noise = spec.noise_sigma * crate::rng::normal(rng) as f32;
                out[c * h * w + y * w + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
}

fn make_split(spec: &SynthSpec, classes: &[String], per_class: usize, split: &str, seed: u64) -> Dataset {
    let il = spec.image_shape.iter().product::<usize>();
    let mut images = vec![0.0f32; classes.len() * per_class * il];
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    let mut idx = 0;
    for (label, name) in classes.iter().enumerate() {
        let (color, shape) = name.split_once(' ').expect("class names are '<color> <shape>'");
        let mut rng = rng_from(derive_seed(seed, &format!("synth/{split}/{name}")));
        for _ in 0..per_class {
            render(spec, color, shape, &mut rng, &mut images[idx * il..(idx + 1) * il]);
            labels.push(label as u32);
            idx += 1;
        }
    }
    Dataset {
        classes: classes.to_vec(),
        image_shape: spec.image_shape,
        split: split.to_string(),
        images,
        labels: Some(labels),
    }
}

/// Full synthetic corpus: train split, a same-class test split, and held-out
/// class groups, each with a matching compositional text bank.
pub struct SynthData {
    pub train: Dataset,
    pub train_test: Dataset,
    pub train_bank: TextBank,
    pub heldout: Vec<(Dataset, TextBank)>,
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let train_classes = spec.train_class_names();
    let held_classes = spec.heldout_class_names();

    let train = make_split(spec, &train_classes, spec.per_class, "train", spec.seed);
    let train_test = make_split(spec, &train_classes, spec.eval_per_class, "train_test", spec.seed);
    let bank_seed = derive_seed(spec.seed, "synth/bank");
    let train_bank = build_text_bank(&train_classes, spec.d_embed, BankMode::Compositional, bank_seed)?;

    // round-robin assignment of held-out classes to groups
    let mut groups: Vec<Vec<String>> = vec![Vec::new(); spec.heldout_groups];
    for (i, name) in held_classes.into_iter().enumerate() {
        groups[i % spec.heldout_groups].push(name);
    }
    let mut heldout = Vec::new();
    for (g, names) in groups.iter().enumerate() {
        let ds = make_split(spec, names, spec.eval_per_class, &format!("heldout_{g}"), spec.seed);
        let bank = build_text_bank(names, spec.d_embed, BankMode::Compositional, bank_seed)?;
        heldout.push((ds, bank));
    }
    Ok(SynthData { train, train_test, train_bank, heldout })
}
