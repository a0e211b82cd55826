//! Acceptance suite. Each test verifies one numbered claim about the lab with
//! pinned tolerances and prints a single pass line on success:
//!
//!  1. autodiff gradients of all five loss variants match a 64-bit central
//!     finite-difference oracle (rel err < 1e-3, 20 seeds, < 2 min)
//!  2. closed-form loss values on orthonormal fixtures (± 1e-5)
//!  3. PGD contract over 10,000 randomized trials: ball, box, grid,
//!     best-iterate monotonicity — zero violations, < 1 min
//!  4. PGD finds the exact grid optimum on exhaustively enumerable fixtures
//!  5. freeze discipline: prompt/linear-probe training leaves the encoder and
//!     the text bank bit-identical
//!  6. end-to-end determinism: same seeds → byte-identical artifacts
//!  7. directional trend: text-guided contrastive adversarial training beats
//!     both the non-adapted baseline and the label-only variants on held-out
//!     robust accuracy
//!  8. more shots → non-decreasing held-out robust accuracy
//!  9. interpolation endpoints match standalone evaluation exactly, and the
//!     adapted endpoint is at least as robust as the vanilla one
//! 10. pseudo-labeling equals the zero-shot decision rule on every input

use std::time::Instant;

use rand::Rng;
use zsrlab::attacks::{pgd_attack, AttackConfig, BatchObjective, ObjectiveEval, StepMode, PIXEL_LEVEL};
use zsrlab::cli::{cmd_eval, cmd_gen_data, cmd_train, EvalArgs, GenDataArgs, TrainArgs};
use zsrlab::data::{gen_synthetic, SynthData, SynthSpec};
use zsrlab::eval::{evaluate, interpolation_sweep, zero_shot_classify};
use zsrlab::losses::{
    ce_loss, coadv_loss, contrastive_image_text, imgcoadv_loss, EmbeddingDictionary, LossVariant,
};
use zsrlab::models::{
    build_text_bank, encode_images, freeze_mask, BankMode, EncoderConfig, FreezePolicy, LinearHead,
    NamedTensor, TextBank, VisionEncoderParams,
};
use zsrlab::rng::{derive_seed, rng_from};
use zsrlab::tensor::{rel_err, Tape};
use zsrlab::training::{run_training, Adaptation, ModelState, TrainConfig};

// ---------------------------------------------------------------------------
// criterion 1: gradient suite
// ---------------------------------------------------------------------------

/// One differentiable training-loss instance with every parameter (and the
/// input pixels) flattened into a single coordinate vector.
#[derive(Clone)]
struct GradFixture {
    variant: LossVariant,
    encoder: VisionEncoderParams,
    head: Option<LinearHead>,
    dict: Option<EmbeddingDictionary>,
    bank: TextBank,
    images_a: Vec<f32>,
    images_b: Vec<f32>,
    labels: Vec<usize>,
    tau: f64,
}

impl GradFixture {
    fn new(variant: LossVariant, seed: u64) -> Self {
        let cfg = EncoderConfig::micro();
        let n = 4usize;
        let classes = 4usize;
        let encoder = VisionEncoderParams::init(cfg, derive_seed(seed, "grad/encoder")).unwrap();
        let mut rng = rng_from(derive_seed(seed, "grad/data"));
        let images_a: Vec<f32> = (0..n * cfg.image_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let images_b: Vec<f32> = if variant == LossVariant::ImgCoAdv {
            (0..n * cfg.image_len()).map(|_| rng.gen_range(0.0..1.0)).collect()
        } else {
            Vec::new()
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let head = matches!(variant, LossVariant::Ce | LossVariant::Adv)
            .then(|| LinearHead::init(cfg.d_embed, classes, derive_seed(seed, "grad/head")));
        let dict = (variant == LossVariant::CoAdv).then(|| {
            let mut d = EmbeddingDictionary::init(classes, cfg.d_embed, derive_seed(seed, "grad/dict"));
            d.trainable = true;
            d
        });
        let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
        let bank = build_text_bank(&names, cfg.d_embed, BankMode::Hashed, derive_seed(seed, "grad/bank")).unwrap();
        GradFixture { variant, encoder, head, dict, bank, images_a, images_b, labels, tau: 0.07 }
    }

    fn coord_count(&self) -> usize {
        let mut n: usize = self.encoder.tensors.iter().map(|t| t.data.len()).sum();
        if let Some(h) = &self.head {
            n += h.weight.data.len() + h.bias.data.len();
        }
        if let Some(d) = &self.dict {
            n += d.rows.data.len();
        }
        n + self.images_a.len() + self.images_b.len()
    }

    fn coord_mut(&mut self, mut j: usize) -> &mut f32 {
        for t in &mut self.encoder.tensors {
            if j < t.data.len() {
                return &mut t.data[j];
            }
            j -= t.data.len();
        }
        if let Some(h) = &mut self.head {
            if j < h.weight.data.len() {
                return &mut h.weight.data[j];
            }
            j -= h.weight.data.len();
            if j < h.bias.data.len() {
                return &mut h.bias.data[j];
            }
            j -= h.bias.data.len();
        }
        if let Some(d) = &mut self.dict {
            if j < d.rows.data.len() {
                return &mut d.rows.data[j];
            }
            j -= d.rows.data.len();
        }
        if j < self.images_a.len() {
            return &mut self.images_a[j];
        }
        j -= self.images_a.len();
        &mut self.images_b[j]
    }

    /// Loss value (f64 tape end to end) and, on request, the full gradient in
    /// coordinate order.
    fn eval(&self, want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let mut tape: Tape<f64> = Tape::new();
        let mask = freeze_mask(&self.encoder, FreezePolicy::Full).unwrap();
        let n = self.labels.len();
        let imgs: Vec<f64> = self.images_a.iter().map(|&v| v as f64).collect();
        let enc = encode_images(&mut tape, &self.encoder, None, Some(&mask), &imgs, n, true).unwrap();
        let mut head_ids = None;
        let mut dict_id = None;
        let mut enc_b = None;
        let loss = match self.variant {
            LossVariant::Ce | LossVariant::Adv => {
                let h = self.head.as_ref().unwrap();
                let wd: Vec<f64> = h.weight.data.iter().map(|&v| v as f64).collect();
                let bd: Vec<f64> = h.bias.data.iter().map(|&v| v as f64).collect();
                let w = tape.leaf(&h.weight.shape, wd, true).unwrap();
                let b = tape.leaf(&h.bias.shape, bd, true).unwrap();
                let zw = tape.matmul(enc.z, w).unwrap();
                let logits = tape.add_row(zw, b).unwrap();
                head_ids = Some((w, b));
                ce_loss(&mut tape, logits, &self.labels).unwrap()
            }
            LossVariant::Tecoa => {
                contrastive_image_text(&mut tape, enc.z, &self.bank, &self.labels, self.tau).unwrap()
            }
            LossVariant::CoAdv => {
                let (l, rows) =
                    coadv_loss(&mut tape, enc.z, self.dict.as_ref().unwrap(), &self.labels, self.tau).unwrap();
                dict_id = Some(rows);
                l
            }
            LossVariant::ImgCoAdv => {
                let imgs_b: Vec<f64> = self.images_b.iter().map(|&v| v as f64).collect();
                let eb = encode_images(&mut tape, &self.encoder, None, Some(&mask), &imgs_b, n, true).unwrap();
                let l = imgcoadv_loss(&mut tape, enc.z, eb.z, self.tau).unwrap();
                enc_b = Some(eb);
                l
            }
        };
        let value = tape.item(loss);
        if !want_grad {
            return (value, None);
        }
        tape.backward(loss).unwrap();
        let leaf_grad = |id, len: usize| -> Vec<f64> {
            tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
        };
        let mut g = Vec::with_capacity(self.coord_count());
        for (i, t) in self.encoder.tensors.iter().enumerate() {
            let mut gi = leaf_grad(enc.encoder_leaves[i], t.data.len());
            if let Some(eb) = &enc_b {
                for (a, b) in gi.iter_mut().zip(leaf_grad(eb.encoder_leaves[i], t.data.len())) {
                    *a += b;
                }
            }
            g.extend(gi);
        }
        if let Some(h) = &self.head {
            let (w, b) = head_ids.unwrap();
            g.extend(leaf_grad(w, h.weight.data.len()));
            g.extend(leaf_grad(b, h.bias.data.len()));
        }
        if let Some(d) = &self.dict {
            g.extend(leaf_grad(dict_id.unwrap(), d.rows.data.len()));
        }
        let il = self.encoder.cfg.image_len();
        for &leaf in &enc.image_leaves {
            g.extend(leaf_grad(leaf, il));
        }
        if let Some(eb) = &enc_b {
            for &leaf in &eb.image_leaves {
                g.extend(leaf_grad(leaf, il));
            }
        }
        assert_eq!(g.len(), self.coord_count());
        (value, Some(g))
    }
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let variants = [
        LossVariant::Ce,
        LossVariant::Adv,
        LossVariant::CoAdv,
        LossVariant::ImgCoAdv,
        LossVariant::Tecoa,
    ];
    let mut max_re = 0.0f64;
    let mut checked = 0usize;
    for &variant in &variants {
        for seed in 0..20u64 {
            let fixture = GradFixture::new(variant, seed);
            let (_, grad) = fixture.eval(true);
            let grad = grad.unwrap();
            let total = fixture.coord_count();
            let mut rng = rng_from(derive_seed(seed, "grad/coords"));
            for _ in 0..12 {
                let j = rng.gen_range(0..total);
                let mut fp = fixture.clone();
                let base = *fp.coord_mut(j) as f64;
                // parameters are stored in f32: take the step the storage can
                // actually represent and divide by the realized width
                let vp = (base + 1e-4) as f32;
                let vm = (base - 1e-4) as f32;
                let denom = vp as f64 - vm as f64;
                assert!(denom > 0.0, "degenerate step at coord {j}");
                *fp.coord_mut(j) = vp;
                let (lp, _) = fp.eval(false);
                *fp.coord_mut(j) = vm;
                let (lm, _) = fp.eval(false);
                let fd = (lp - lm) / denom;
                let re = rel_err(grad[j], fd, 1e-4);
                assert!(
                    re < 1e-3,
                    "{variant:?} seed {seed} coord {j}: autodiff {} vs fd {fd} (rel {re})",
                    grad[j]
                );
                max_re = max_re.max(re);
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient suite took {secs:.1}s (budget 120s)");
    println!("criterion 01 gradient suite: PASS ({checked} coords, max rel err {max_re:.2e}, {secs:.1}s)");
}

// ---------------------------------------------------------------------------
// criterion 2: closed-form loss values
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_closed_form_losses() {
    let two_pair = (1.0 + (-1.0f64).exp()).ln(); // 0.313262...
    let ln4 = 4.0f64.ln();
    let tol = 1e-5;

    let orthonormal_bank = |c: usize, d: usize| -> TextBank {
        let mut rows = vec![0.0f32; c * d];
        for i in 0..c {
            rows[i * d + i] = 1.0;
        }
        let names: Vec<String> = (0..c).map(|i| format!("class{i}")).collect();
        let mut bank = build_text_bank(&names, d, BankMode::Hashed, 0).unwrap();
        bank.rows = rows;
        bank
    };

    // image-text contrastive, two orthonormal pairs
    let mut t: Tape<f32> = Tape::new();
    let z = t.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let l = contrastive_image_text(&mut t, z, &orthonormal_bank(2, 4), &[0, 1], 1.0).unwrap();
    assert!((t.item(l) as f64 - two_pair).abs() < tol, "two-pair contrastive {}", t.item(l));

    // image-text contrastive, embeddings orthogonal to all four rows → ln 4
    let mut t: Tape<f32> = Tape::new();
    let mut zdata = vec![0.0f32; 2 * 8];
    zdata[7] = 1.0;
    zdata[15] = 1.0;
    let z = t.constant(&[2, 8], zdata).unwrap();
    let l = contrastive_image_text(&mut t, z, &orthonormal_bank(4, 8), &[0, 3], 1.0).unwrap();
    assert!((t.item(l) as f64 - ln4).abs() < tol, "uniform contrastive {}", t.item(l));

    // dictionary variant on the identical fixtures
    let dict2 = EmbeddingDictionary {
        rows: NamedTensor::new("dict.rows", vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        trainable: false,
        seed: 0,
    };
    let mut t: Tape<f32> = Tape::new();
    let z = t.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let (l, _) = coadv_loss(&mut t, z, &dict2, &[0, 1], 1.0).unwrap();
    assert!((t.item(l) as f64 - two_pair).abs() < tol, "two-pair dict {}", t.item(l));

    let mut rows4 = vec![0.0f32; 4 * 8];
    for i in 0..4 {
        rows4[i * 8 + i] = 1.0;
    }
    let dict4 = EmbeddingDictionary {
        rows: NamedTensor::new("dict.rows", vec![4, 8], rows4),
        trainable: false,
        seed: 0,
    };
    let mut t: Tape<f32> = Tape::new();
    let mut zdata = vec![0.0f32; 2 * 8];
    zdata[7] = 1.0;
    zdata[15] = 1.0;
    let z = t.constant(&[2, 8], zdata).unwrap();
    let (l, _) = coadv_loss(&mut t, z, &dict4, &[0, 3], 1.0).unwrap();
    assert!((t.item(l) as f64 - ln4).abs() < tol, "uniform dict {}", t.item(l));

    // image-image variant: identical orthonormal views → two-pair value
    let mut t: Tape<f32> = Tape::new();
    let za = t.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let zb = t.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let l = imgcoadv_loss(&mut t, za, zb, 1.0).unwrap();
    assert!((t.item(l) as f64 - two_pair).abs() < tol, "two-pair views {}", t.item(l));

    // image-image variant: views mutually orthogonal → ln 4
    let mut t: Tape<f32> = Tape::new();
    let mut a = vec![0.0f32; 4 * 8];
    let mut b = vec![0.0f32; 4 * 8];
    for i in 0..4 {
        a[i * 8 + i] = 1.0;
        b[i * 8 + 4 + i] = 1.0;
    }
    let za = t.constant(&[4, 8], a).unwrap();
    let zb = t.constant(&[4, 8], b).unwrap();
    let l = imgcoadv_loss(&mut t, za, zb, 1.0).unwrap();
    assert!((t.item(l) as f64 - ln4).abs() < tol, "uniform views {}", t.item(l));

    println!("criterion 02 closed-form losses: PASS (six fixtures within 1e-5)");
}

// ---------------------------------------------------------------------------
// criterion 3: PGD contract under randomized configurations
// ---------------------------------------------------------------------------

enum ToyObjective {
    /// f_i(x) = <coef, x_i>
    Linear(Vec<f32>),
    /// f_i(x) = -||x_i - target||² / 2 (maximum at the target point)
    Pull(Vec<f32>),
}

impl BatchObjective for ToyObjective {
    fn image_len(&self) -> usize {
        match self {
            ToyObjective::Linear(c) => c.len(),
            ToyObjective::Pull(t) => t.len(),
        }
    }
    fn eval(&self, images: &[f32], want_grad: bool) -> zsrlab::Result<ObjectiveEval> {
        let len = self.image_len();
        let n = images.len() / len;
        let mut per_example = Vec::with_capacity(n);
        let mut grad = want_grad.then(|| Vec::with_capacity(images.len()));
        for i in 0..n {
            let x = &images[i * len..(i + 1) * len];
            match self {
                ToyObjective::Linear(c) => {
                    per_example.push(x.iter().zip(c).map(|(&xv, &cv)| (xv as f64) * (cv as f64)).sum());
                    if let Some(g) = &mut grad {
                        g.extend_from_slice(c);
                    }
                }
                ToyObjective::Pull(t) => {
                    per_example
                        .push(-x.iter().zip(t).map(|(&xv, &tv)| ((xv - tv) as f64).powi(2)).sum::<f64>() / 2.0);
                    if let Some(g) = &mut grad {
                        g.extend(x.iter().zip(t).map(|(&xv, &tv)| tv - xv));
                    }
                }
            }
        }
        Ok(ObjectiveEval { per_example, grad })
    }
}

#[test]
fn criterion_03_pgd_contract_randomized() {
    let start = Instant::now();
    let mut rng = rng_from(derive_seed(0, "acceptance/pgd-contract"));
    let trials = 10_000usize;
    let mut violations = 0usize;
    for trial in 0..trials {
        let len = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=2);
        let obj: ToyObjective = if rng.gen_bool(0.5) {
            ToyObjective::Linear((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
        } else {
            ToyObjective::Pull((0..len).map(|_| rng.gen_range(-0.5..1.5)).collect())
        };
        let epsilon = match rng.gen_range(0..3) {
            0 => PIXEL_LEVEL * rng.gen_range(0..=8) as f32,
            1 => rng.gen_range(0.0..0.05),
            _ => 0.0,
        };
        let cfg = AttackConfig {
            epsilon,
            alpha: if rng.gen_bool(0.5) { PIXEL_LEVEL } else { rng.gen_range(0.001..0.02) },
            steps: rng.gen_range(1..=5),
            random_start: rng.gen_bool(0.5),
            best_iterate: rng.gen_bool(0.5),
            step_mode: if rng.gen_bool(0.5) { StepMode::PixelGrid } else { StepMode::Fractional },
            restarts: rng.gen_range(1..=3),
            ..AttackConfig::training_default()
        };
        let x: Vec<f32> = (0..n * len).map(|_| rng.gen_range(0.0..1.0)).collect();
        let out = pgd_attack(&obj, &x, &cfg, trial as u64).unwrap();
        for i in 0..out.n() {
            for (j, d) in out.delta(i).iter().enumerate() {
                let xa = out.x_adv[i * len + j];
                if d.abs() > cfg.epsilon + 1e-7 || !(0.0..=1.0).contains(&xa) {
                    violations += 1;
                }
                if cfg.step_mode == StepMode::PixelGrid {
                    let q = d * 255.0;
                    if (q - q.round()).abs() > 1e-3 {
                        violations += 1;
                    }
                }
            }
            if cfg.best_iterate && out.objective[i] < out.start_objective[i] - 1e-12 {
                violations += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(violations, 0, "{violations} constraint violations in {trials} trials");
    assert!(secs < 60.0, "contract suite took {secs:.1}s (budget 60s)");
    println!("criterion 03 pgd contract: PASS ({trials} trials, 0 violations, {secs:.1}s)");
}

// ---------------------------------------------------------------------------
// criterion 4: exact grid optimality on enumerable fixtures
// ---------------------------------------------------------------------------

/// Two-pixel quadratic f(x) = a·x + x^T B x / 2 with analytic gradient.
struct Quad2 {
    a: [f32; 2],
    b: [[f32; 2]; 2],
}

impl BatchObjective for Quad2 {
    fn image_len(&self) -> usize {
        2
    }
    fn eval(&self, images: &[f32], want_grad: bool) -> zsrlab::Result<ObjectiveEval> {
        let n = images.len() / 2;
        let mut per_example = Vec::with_capacity(n);
        let mut grad = want_grad.then(Vec::new);
        for i in 0..n {
            let (x0, x1) = (images[2 * i] as f64, images[2 * i + 1] as f64);
            let (a0, a1) = (self.a[0] as f64, self.a[1] as f64);
            let b = &self.b;
            per_example.push(
                a0 * x0
                    + a1 * x1
                    + (b[0][0] as f64 * x0 * x0 + b[1][1] as f64 * x1 * x1) / 2.0
                    + b[0][1] as f64 * x0 * x1,
            );
            if let Some(g) = &mut grad {
                g.push(self.a[0] + self.b[0][0] * images[2 * i] + self.b[0][1] * images[2 * i + 1]);
                g.push(self.a[1] + self.b[1][1] * images[2 * i + 1] + self.b[0][1] * images[2 * i]);
            }
        }
        Ok(ObjectiveEval { per_example, grad })
    }
}

#[test]
fn criterion_04_pgd_exact_on_enumerable_grid() {
    let mut rng = rng_from(derive_seed(0, "acceptance/pgd-enum"));
    let cfg = AttackConfig {
        epsilon: PIXEL_LEVEL,
        alpha: PIXEL_LEVEL,
        steps: 4,
        random_start: true,
        best_iterate: true,
        step_mode: StepMode::PixelGrid,
        restarts: 60,
        ..AttackConfig::training_default()
    };
    for case in 0..10u64 {
        let obj = Quad2 {
            a: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            b: [
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                [0.0, rng.gen_range(-2.0..2.0)],
            ],
        };
        let x = vec![0.5f32, 0.47];
        let out = pgd_attack(&obj, &x, &cfg, derive_seed(case, "enum/attack")).unwrap();
        // exhaustive 9-point enumeration over the ±1/255 grid around x
        let mut best = f64::NEG_INFINITY;
        for k0 in -1i32..=1 {
            for k1 in -1i32..=1 {
                let xg = vec![x[0] + k0 as f32 / 255.0, x[1] + k1 as f32 / 255.0];
                best = best.max(obj.eval(&xg, false).unwrap().per_example[0]);
            }
        }
        assert!(
            (out.objective[0] - best).abs() < 1e-12,
            "case {case}: attack {} vs enumerated max {best}",
            out.objective[0]
        );
    }
    println!("criterion 04 pgd grid optimality: PASS (10 fixtures, exact enumeration match)");
}

// ---------------------------------------------------------------------------
// criterion 5: freeze discipline
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_freeze_discipline() {
    let spec = SynthSpec {
        per_class: 2,
        eval_per_class: 1,
        image_shape: [3, 8, 8],
        d_embed: 8,
        seed: 7,
        ..SynthSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    let cases = [
        (LossVariant::Tecoa, Adaptation::VptToken(2)),
        (LossVariant::Tecoa, Adaptation::VptPixel),
        (LossVariant::Ce, Adaptation::LinearProbe),
    ];
    for (variant, adaptation) in cases {
        let mut cfg = TrainConfig::new(variant, adaptation);
        cfg.encoder = EncoderConfig::micro();
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.seed = 3;
        let reference = ModelState::init(&cfg, data.train.classes.len()).unwrap();
        let bank_before = data.train_bank.to_json_bytes().unwrap();
        let state = run_training(&cfg, &data.train, &data.train_bank).unwrap();
        let bank_after = data.train_bank.to_json_bytes().unwrap();
        assert_eq!(bank_before, bank_after, "{adaptation:?}: text bank bytes changed");
        for (before, after) in reference.encoder.tensors.iter().zip(&state.model.encoder.tensors) {
            assert_eq!(before.name, after.name);
            let eq = before
                .data
                .iter()
                .zip(&after.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(eq, "{adaptation:?}: frozen tensor {} changed", before.name);
        }
        // the trainable group must actually have moved
        let moved = match adaptation {
            Adaptation::LinearProbe => {
                state.model.head.as_ref().unwrap().weight.data != reference.head.as_ref().unwrap().weight.data
            }
            _ => {
                state.model.prompt.as_ref().unwrap().tensor().data
                    != reference.prompt.as_ref().unwrap().tensor().data
            }
        };
        assert!(moved, "{adaptation:?}: trainable parameters did not change");
    }
    println!("criterion 05 freeze discipline: PASS (3 adaptations, encoder and bank bit-identical)");
}

// ---------------------------------------------------------------------------
// criterion 6: end-to-end determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_end_to_end_determinism() {
    let run = |root: &std::path::Path| {
        let data_dir = root.join("data");
        cmd_gen_data(&GenDataArgs {
            out: data_dir.clone(),
            seed: 11,
            spec: Some(write_json(
                root,
                "spec.json",
                &serde_json::json!({
                    "per_class": 4, "eval_per_class": 2, "heldout_groups": 1,
                    "image_shape": [3, 8, 8], "d_embed": 8
                }),
            )),
        })
        .unwrap();
        let ckpt = root.join("model.ckpt");
        cmd_train(&TrainArgs {
            config: write_json(
                root,
                "train.json",
                &serde_json::json!({
                    "loss_variant": "tecoa", "adaptation": "full_ft",
                    "encoder": {"image_shape": [3,8,8], "patch": 4, "d_model": 8, "layers": 2, "heads": 2, "d_embed": 8},
                    "epochs": 2, "batch_size": 8, "seed": 5,
                    "attack": {"epsilon": 0.00392156862745098, "steps": 1}
                }),
            ),
            data: data_dir.join("train"),
            bank: data_dir.join("banks/train.json"),
            out: ckpt.clone(),
            seed: None,
        })
        .unwrap();
        cmd_eval(&EvalArgs {
            checkpoint: ckpt.clone(),
            data_dir: data_dir.clone(),
            banks_dir: data_dir.join("banks"),
            attack: Some(write_json(
                root,
                "attack.json",
                &serde_json::json!({"epsilon": 0.00392156862745098, "steps": 2, "best_iterate": true}),
            )),
            out: root.join("report.json"),
            seed: 9,
            tau: 0.07,
        })
        .unwrap();
        (
            std::fs::read(ckpt.with_extension("metrics.jsonl")).unwrap(),
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(root.join("report.json")).unwrap(),
            std::fs::read(root.join("report.csv")).unwrap(),
        )
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (m1, c1, rj1, rc1) = run(dir_a.path());
    let (m2, c2, rj2, rc2) = run(dir_b.path());
    assert_eq!(m1, m2, "metric logs differ between identical runs");
    assert_eq!(c1, c2, "checkpoints differ between identical runs");
    assert_eq!(rj1, rj2, "JSON reports differ between identical runs");
    assert_eq!(rc1, rc2, "CSV reports differ between identical runs");
    println!("criterion 06 determinism: PASS (metrics, checkpoint, and reports byte-identical)");
}

fn write_json(dir: &std::path::Path, name: &str, value: &serde_json::Value) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    p
}

// ---------------------------------------------------------------------------
// criteria 7-9 share the calibrated 16×16 compositional task
// ---------------------------------------------------------------------------

fn trend_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        per_class: 64,
        eval_per_class: 16,
        image_shape: [3, 16, 16],
        d_embed: 16,
        seed: 100 + seed,
        ..SynthSpec::default()
    }
}

fn trend_encoder() -> EncoderConfig {
    EncoderConfig { image_shape: [3, 16, 16], patch: 4, d_model: 32, layers: 2, heads: 4, d_embed: 16 }
}

fn trend_cfg(variant: LossVariant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(variant, Adaptation::FullFt);
    cfg.encoder = trend_encoder();
    cfg.epochs = 12;
    cfg.lr = Some(0.01);
    cfg.batch_size = 32;
    cfg.seed = seed;
    cfg
}

fn trend_attack() -> AttackConfig {
    let mut atk = AttackConfig::eval_default(PIXEL_LEVEL);
    atk.steps = 10;
    atk
}

/// Robust zero-shot accuracy averaged over the held-out class groups.
fn heldout_robust(model: &ModelState, data: &SynthData, seed: u64) -> f64 {
    let atk = trend_attack();
    let mut sum = 0.0;
    for (g, (ds, bank)) in data.heldout.iter().enumerate() {
        let (_, robust) =
            evaluate(model, ds, bank, 0.07, Some(&atk), derive_seed(seed, &format!("trend/heldout{g}"))).unwrap();
        sum += robust;
    }
    sum / data.heldout.len() as f64
}

#[test]
fn criterion_07_adaptation_trend_on_heldout_robustness() {
    let start = Instant::now();
    let seeds = [0u64, 1, 2];
    let mut rows = Vec::new();
    for &seed in &seeds {
        let data = gen_synthetic(&trend_spec(seed)).unwrap();
        let baseline = ModelState::init(&trend_cfg(LossVariant::Tecoa, seed), data.train.classes.len()).unwrap();
        let tecoa = run_training(&trend_cfg(LossVariant::Tecoa, seed), &data.train, &data.train_bank).unwrap();
        let adv = run_training(&trend_cfg(LossVariant::Adv, seed), &data.train, &data.train_bank).unwrap();
        let imgco = run_training(&trend_cfg(LossVariant::ImgCoAdv, seed), &data.train, &data.train_bank).unwrap();
        rows.push((
            heldout_robust(&baseline, &data, seed),
            heldout_robust(&tecoa.model, &data, seed),
            heldout_robust(&adv.model, &data, seed),
            heldout_robust(&imgco.model, &data, seed),
        ));
    }
    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (base_m, tecoa_m, adv_m, imgco_m) =
        (mean(|r| r.0), mean(|r| r.1), mean(|r| r.2), mean(|r| r.3));
    assert!(
        tecoa_m - base_m >= 0.10,
        "adapted mean robust {tecoa_m:.3} not ≥ baseline {base_m:.3} + 0.10"
    );
    assert!(tecoa_m > adv_m, "text-guided {tecoa_m:.3} not above label-CE variant {adv_m:.3}");
    assert!(imgco_m < tecoa_m, "image-image {imgco_m:.3} not below text-guided {tecoa_m:.3}");
    let ordered = rows
        .iter()
        .filter(|(b, t, a, i)| t - b >= 0.10 && t > a && i < t)
        .count();
    assert!(ordered >= 2, "ordering holds in only {ordered}/3 seeds: {rows:?}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 900.0, "trend suite took {secs:.0}s (budget 900s)");
    println!(
        "criterion 07 adaptation trend: PASS (robust means: baseline {base_m:.3}, text-guided {tecoa_m:.3}, \
         label-CE {adv_m:.3}, image-image {imgco_m:.3}; ordering {ordered}/3 seeds, {secs:.0}s)"
    );
}

#[test]
fn criterion_08_more_shots_do_not_hurt() {
    let seeds = [0u64, 1, 2];
    let shots = [1usize, 5, 50];
    let mut good = 0usize;
    let mut table = Vec::new();
    for &seed in &seeds {
        let data = gen_synthetic(&trend_spec(seed)).unwrap();
        let mut robust = Vec::new();
        for &s in &shots {
            let mut cfg = trend_cfg(LossVariant::Tecoa, seed);
            cfg.shots = Some(s);
            let state = run_training(&cfg, &data.train, &data.train_bank).unwrap();
            robust.push(heldout_robust(&state.model, &data, seed));
        }
        if robust[0] <= robust[1] + 1e-9 && robust[1] <= robust[2] + 1e-9 {
            good += 1;
        }
        table.push((seed, robust));
    }
    assert!(good >= 2, "non-decreasing in only {good}/3 seeds: {table:?}");
    println!("criterion 08 shots sweep: PASS (non-decreasing robust accuracy in {good}/3 seeds)");
}

#[test]
fn criterion_09_interpolation_endpoints() {
    let seed = 0u64;
    let data = gen_synthetic(&trend_spec(seed)).unwrap();
    let cfg = trend_cfg(LossVariant::Tecoa, seed);
    let vanilla = ModelState::init(&cfg, data.train.classes.len()).unwrap();
    let adapted = run_training(&cfg, &data.train, &data.train_bank).unwrap().model;
    let atk = trend_attack();
    let sweep_seed = derive_seed(seed, "acceptance/interp");
    let sets = [(&data.train_test, &data.train_bank)];
    let rows = interpolation_sweep(
        &vanilla.to_checkpoint(),
        &adapted.to_checkpoint(),
        &[0.0, 0.5, 1.0],
        &sets,
        0.07,
        Some(&atk),
        sweep_seed,
    )
    .unwrap();
    // standalone evaluations with the per-weight seeds the sweep derives
    let (c0, r0) = evaluate(&vanilla, &data.train_test, &data.train_bank, 0.07, Some(&atk), derive_seed(sweep_seed, "interp/0")).unwrap();
    let (c1, r1) = evaluate(&adapted, &data.train_test, &data.train_bank, 0.07, Some(&atk), derive_seed(sweep_seed, "interp/1")).unwrap();
    assert_eq!(rows[0].clean, c0, "w=0 clean differs from standalone evaluation");
    assert_eq!(rows[0].robust, r0, "w=0 robust differs from standalone evaluation");
    assert_eq!(rows[2].clean, c1, "w=1 clean differs from standalone evaluation");
    assert_eq!(rows[2].robust, r1, "w=1 robust differs from standalone evaluation");
    assert!(
        rows[2].robust >= rows[0].robust,
        "adapted endpoint robust {:.3} below vanilla {:.3}",
        rows[2].robust,
        rows[0].robust
    );
    println!(
        "criterion 09 interpolation endpoints: PASS (exact endpoint match, robust {:.3} → {:.3})",
        rows[0].robust, rows[2].robust
    );
}

// ---------------------------------------------------------------------------
// criterion 10: pseudo-labeling equals the zero-shot rule
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_pseudo_labels_equal_zero_shot_rule() {
    let cfg = EncoderConfig::micro();
    let encoder = VisionEncoderParams::init(cfg, derive_seed(0, "acceptance/pl-encoder")).unwrap();
    let model = ModelState { encoder, prompt: None, head: None, dict: None };
    let classes: Vec<String> = (0..7).map(|c| format!("class{c}")).collect();
    let bank = build_text_bank(&classes, cfg.d_embed, BankMode::Hashed, 21).unwrap();
    let n = 1000usize;
    let mut rng = rng_from(derive_seed(0, "acceptance/pl-images"));
    let images: Vec<f32> = (0..n * cfg.image_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let pseudo = zsrlab::training::pseudo_label(&model, &images, n, &bank, 0.07).unwrap();
    let zs = zero_shot_classify(&model, &images, n, &bank, 0.07).unwrap();
    assert_eq!(pseudo.len(), n);
    for i in 0..n {
        assert_eq!(pseudo[i] as usize, zs[i], "disagreement at image {i}");
    }
    println!("criterion 10 pseudo-label equivalence: PASS ({n} images, exact agreement)");
}
