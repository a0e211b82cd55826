//! The five training objectives: cross-entropy (ce), adversarial CE over a
//! linear head (adv), one-hot contrastive with a random code dictionary
//! (coadv), image-image contrastive (imgcoadv), and text-guided contrastive
//! (tecoa).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{NamedTensor, TextBank};
use crate::rng::{derive_seed, rng_from, unit_vec};
use crate::tensor::{Id, Scalar, Tape};

/// Default contrastive temperature; conventional fixed value for dual-encoder
/// pretraining.
pub const DEFAULT_TAU: f64 = 0.07;

/// Loss variant names as used by configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Ce,
    Adv,
    CoAdv,
    ImgCoAdv,
    Tecoa,
}

/// Binary positive-pair indicator derived from integer labels: row i is
/// positive with column j iff labels[i] == j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndicator {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl PairIndicator {
    pub fn from_labels(labels: &[usize], cols: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::invalid(format!("label {bad} out of range for {cols} classes")));
        }
        let mut data = vec![false; labels.len() * cols];
        for (i, &l) in labels.iter().enumerate() {
            data[i * cols + l] = true;
        }
        Ok(PairIndicator { rows: labels.len(), cols, data })
    }

    /// Views augmented from the same instance: positives on the diagonal.
    pub fn diagonal(n: usize) -> Self {
        let mut data = vec![false; n * n];
        for i in 0..n {
            data[i * n + i] = true;
        }
        PairIndicator { rows: n, cols: n, data }
    }
}

/// Dictionary of per-class code embeddings, randomly initialized on the unit
/// sphere. Frozen by default.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDictionary {
    pub rows: NamedTensor, // C × d_embed
    pub trainable: bool,
    pub seed: u64,
}

impl EmbeddingDictionary {
    pub fn init(classes: usize, d_embed: usize, seed: u64) -> Self {
        let mut data = Vec::with_capacity(classes * d_embed);
        for i in 0..classes {
            let mut rng = rng_from(derive_seed(seed, &format!("dict.row.{i}")));
            data.extend(unit_vec(&mut rng, d_embed));
        }
        EmbeddingDictionary {
            rows: NamedTensor::new("dict.rows", vec![classes, d_embed], data),
            trainable: false,
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        self.rows.shape[0]
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Contrastive cross-entropy of image embeddings against a fixed row matrix
/// already present on the tape: softmax over cos(z_i, row_k)/τ, positives at
/// labels[i].
pub fn contrastive_with_rows<T: Scalar>(
    tape: &mut Tape<T>,
    z: Id,
    rows: Id,
    labels: &[usize],
    tau: f64,
) -> Result<Id> {
    check_tau(tau)?;
    let n_rows = tape.shape(rows)[0];
    PairIndicator::from_labels(labels, n_rows)?;
    if tape.shape(z)[0] != labels.len() {
        return Err(Error::ShapeMismatch { op: "contrastive", lhs: tape.shape(z).to_vec(), rhs: vec![labels.len()] });
    }
    let cos = tape.cosine_similarity_matrix(z, rows)?;
    let logits = tape.scalar_mul(cos, T::c(1.0 / tau))?;
    let p = tape.softmax_last(logits)?;
    let logp = tape.log(p)?;
    let picked = tape.pick_per_row(logp, labels)?;
    let m = tape.mean(picked)?;
    tape.scalar_mul(m, T::c(-1.0))
}

/// Image-to-text contrastive loss against a frozen text bank (tecoa).
pub fn contrastive_image_text<T: Scalar>(
    tape: &mut Tape<T>,
    z: Id,
    bank: &TextBank,
    labels: &[usize],
    tau: f64,
) -> Result<Id> {
    if bank.is_empty() {
        return Err(Error::invalid("contrastive_image_text: empty text bank"));
    }
    let rows_data: Vec<T> = bank.rows.iter().map(|&v| T::c(v as f64)).collect();
    let rows = tape.constant(&[bank.len(), bank.d_embed], rows_data)?;
    contrastive_with_rows(tape, z, rows, labels, tau)
}

/// One-hot contrastive loss against a code dictionary (coadv). When the
/// dictionary is trainable its leaf id is returned for gradient extraction.
pub fn coadv_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: Id,
    dict: &EmbeddingDictionary,
    labels: &[usize],
    tau: f64,
) -> Result<(Id, Id)> {
    let rows_data: Vec<T> = dict.rows.data.iter().map(|&v| T::c(v as f64)).collect();
    let rows = tape.leaf(&dict.rows.shape, rows_data, dict.trainable)?;
    let loss = contrastive_with_rows(tape, z, rows, labels, tau)?;
    Ok((loss, rows))
}

/// Image-image contrastive loss between two views of the same batch
/// (imgcoadv). Positives sit on the diagonal; negatives come from the
/// counterpart view only.
pub fn imgcoadv_loss<T: Scalar>(tape: &mut Tape<T>, z_view_a: Id, z_view_b: Id, tau: f64) -> Result<Id> {
    check_tau(tau)?;
    let n = tape.shape(z_view_a)[0];
    if tape.shape(z_view_b)[0] != n {
        return Err(Error::ShapeMismatch {
            op: "imgcoadv",
            lhs: tape.shape(z_view_a).to_vec(),
            rhs: tape.shape(z_view_b).to_vec(),
        });
    }
    let labels: Vec<usize> = (0..n).collect();
    let cos = tape.cosine_similarity_matrix(z_view_a, z_view_b)?;
    let logits = tape.scalar_mul(cos, T::c(1.0 / tau))?;
    let p = tape.softmax_last(logits)?;
    let logp = tape.log(p)?;
    let picked = tape.pick_per_row(logp, &labels)?;
    let m = tape.mean(picked)?;
    tape.scalar_mul(m, T::c(-1.0))
}

/// Mean negative log-softmax of the true class over raw logits.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Id, labels: &[usize]) -> Result<Id> {
    let cols = *tape.shape(logits).last().unwrap();
    PairIndicator::from_labels(labels, cols)?;
    if tape.shape(logits)[0] != labels.len() {
        return Err(Error::ShapeMismatch { op: "ce_loss", lhs: tape.shape(logits).to_vec(), rhs: vec![labels.len()] });
    }
    let p = tape.softmax_last(logits)?;
    let logp = tape.log(p)?;
    let picked = tape.pick_per_row(logp, labels)?;
    let m = tape.mean(picked)?;
    tape.scalar_mul(m, T::c(-1.0))
}

/// Per-example negative log-softmax terms (for per-image attack objectives):
/// same math as the batch losses, without the mean.
pub fn per_example_nll<T: Scalar>(tape: &mut Tape<T>, logits: Id, labels: &[usize]) -> Result<Id> {
    let p = tape.softmax_last(logits)?;
    let logp = tape.log(p)?;
    let picked = tape.pick_per_row(logp, labels)?;
    tape.scalar_mul(picked, T::c(-1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_text_bank, BankMode, BankProvenance};

    const TWO_PAIR_CLOSED_FORM: f64 = 0.31326168751822286; // ln(1 + e^-1)

    fn orthonormal_bank(c: usize, d: usize) -> TextBank {
        let mut rows = vec![0.0f32; c * d];
        for i in 0..c {
            rows[i * d + i] = 1.0;
        }
        TextBank {
            names: (0..c).map(|i| format!("class{i}")).collect(),
            d_embed: d,
            rows,
            provenance: BankProvenance::Generated,
        }
    }

    /// Independent recomputation in f64 straight from the definition.
    fn brute_force_contrastive(z: &[f32], rows: &[f32], n: usize, c: usize, d: usize, labels: &[usize], tau: f64) -> f64 {
        let norm = |v: &[f32]| -> Vec<f64> {
            let n2: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
            let den = n2.sqrt().max(1e-12);
            v.iter().map(|&x| x as f64 / den).collect()
        };
        let mut total = 0.0;
        for i in 0..n {
            let zi = norm(&z[i * d..(i + 1) * d]);
            let sims: Vec<f64> = (0..c)
                .map(|k| {
                    let rk = norm(&rows[k * d..(k + 1) * d]);
                    zi.iter().zip(&rk).map(|(a, b)| a * b).sum::<f64>() / tau
                })
                .collect();
            let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + sims.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
            total += lse - sims[labels[i]];
        }
        total / n as f64
    }

    fn eval_tecoa(z: Vec<f32>, n: usize, bank: &TextBank, labels: &[usize], tau: f64) -> f32 {
        let mut t: Tape<f32> = Tape::new();
        let zi = t.constant(&[n, bank.d_embed], z).unwrap();
        let l = contrastive_image_text(&mut t, zi, bank, labels, tau).unwrap();
        t.item(l)
    }

    #[test]
    fn two_pair_orthonormal_closed_form() {
        let bank = orthonormal_bank(2, 4);
        let z = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let loss = eval_tecoa(z, 2, &bank, &[0, 1], 1.0);
        assert!((loss as f64 - TWO_PAIR_CLOSED_FORM).abs() < 1e-5, "{loss}");
    }

    #[test]
    fn uniform_four_way_is_ln4() {
        let bank = orthonormal_bank(4, 8);
        // all embeddings identical and orthogonal to every bank row
        let mut z = vec![0.0f32; 2 * 8];
        z[7] = 1.0;
        z[15] = 1.0;
        let loss = eval_tecoa(z, 2, &bank, &[0, 3], 1.0);
        assert!((loss as f64 - 4.0f64.ln()).abs() < 1e-5, "{loss}");
    }

    #[test]
    fn label_out_of_range_is_error() {
        let bank = orthonormal_bank(2, 4);
        let mut t: Tape<f32> = Tape::new();
        let z = t.constant(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(contrastive_image_text(&mut t, z, &bank, &[2], 1.0).is_err());
    }

    #[test]
    fn tecoa_matches_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(42);
        let (n, c, d) = (8, 5, 6);
        let bank = build_text_bank(
            &(0..c).map(|i| format!("name{i}")).collect::<Vec<_>>(),
            d,
            BankMode::Hashed,
            9,
        )
        .unwrap();
        let z: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let got = eval_tecoa(z.clone(), n, &bank, &labels, DEFAULT_TAU) as f64;
        let want = brute_force_contrastive(&z, &bank.rows, n, c, d, &labels, DEFAULT_TAU);
        assert!((got - want).abs() < 1e-6, "got {got} want {want}");
    }

    #[test]
    fn coadv_orthonormal_closed_form() {
        let dict = EmbeddingDictionary {
            rows: NamedTensor::new("dict.rows", vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            trainable: false,
            seed: 0,
        };
        let mut t: Tape<f32> = Tape::new();
        let z = t.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (loss, _) = coadv_loss(&mut t, z, &dict, &[0, 1], 1.0).unwrap();
        assert!((t.item(loss) as f64 - TWO_PAIR_CLOSED_FORM).abs() < 1e-5);
    }

    #[test]
    fn coadv_equals_tecoa_on_identical_rows() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(3);
        let (n, c, d) = (4, 3, 8);
        let bank = build_text_bank(
            &(0..c).map(|i| format!("n{i}")).collect::<Vec<_>>(),
            d,
            BankMode::Hashed,
            1,
        )
        .unwrap();
        let dict = EmbeddingDictionary {
            rows: NamedTensor::new("dict.rows", vec![c, d], bank.rows.clone()),
            trainable: false,
            seed: 0,
        };
        let z: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = vec![0, 1, 2, 0];
        let a = eval_tecoa(z.clone(), n, &bank, &labels, DEFAULT_TAU);
        let mut t: Tape<f32> = Tape::new();
        let zi = t.constant(&[n, d], z).unwrap();
        let (l, _) = coadv_loss(&mut t, zi, &dict, &labels, DEFAULT_TAU).unwrap();
        assert_eq!(a.to_bits(), t.item(l).to_bits());
    }

    #[test]
    fn coadv_matches_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(17);
        let (n, c, d) = (6, 4, 5);
        let dict = EmbeddingDictionary::init(c, d, 8);
        let z: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mut t: Tape<f32> = Tape::new();
        let zi = t.constant(&[n, d], z.clone()).unwrap();
        let (l, _) = coadv_loss(&mut t, zi, &dict, &labels, DEFAULT_TAU).unwrap();
        let want = brute_force_contrastive(&z, &dict.rows.data, n, c, d, &labels, DEFAULT_TAU);
        assert!((t.item(l) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn imgcoadv_identical_views_closed_form() {
        let mut t: Tape<f32> = Tape::new();
        let za = t.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let zb = t.constant(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let l = imgcoadv_loss(&mut t, za, zb, 1.0).unwrap();
        assert!((t.item(l) as f64 - TWO_PAIR_CLOSED_FORM).abs() < 1e-5);
    }

    #[test]
    fn imgcoadv_single_example_is_zero() {
        let mut t: Tape<f32> = Tape::new();
        let za = t.constant(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let zb = t.constant(&[1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let l = imgcoadv_loss(&mut t, za, zb, 1.0).unwrap();
        assert!(t.item(l).abs() < 1e-7);
    }

    #[test]
    fn imgcoadv_matches_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(23);
        let (n, d) = (8, 6);
        let za: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zb: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t: Tape<f32> = Tape::new();
        let a = t.constant(&[n, d], za.clone()).unwrap();
        let b = t.constant(&[n, d], zb.clone()).unwrap();
        let l = imgcoadv_loss(&mut t, a, b, DEFAULT_TAU).unwrap();
        let labels: Vec<usize> = (0..n).collect();
        let want = brute_force_contrastive(&za, &zb, n, n, d, &labels, DEFAULT_TAU);
        assert!((t.item(l) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn ce_symmetric_logits() {
        let mut t: Tape<f32> = Tape::new();
        let logits = t.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let l = ce_loss(&mut t, logits, &[0]).unwrap();
        assert!((t.item(l) as f64 - 2.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_saturated_logits_near_zero() {
        let mut t: Tape<f32> = Tape::new();
        let logits = t.constant(&[1, 2], vec![20.0, 0.0]).unwrap();
        let l = ce_loss(&mut t, logits, &[0]).unwrap();
        assert!((t.item(l) as f64) < 1e-8);
    }

    #[test]
    fn ce_matches_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(31);
        let (n, c) = (4, 3);
        let logits: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let mut t: Tape<f32> = Tape::new();
        let li = t.constant(&[n, c], logits.clone()).unwrap();
        let l = ce_loss(&mut t, li, &labels).unwrap();
        let mut want = 0.0f64;
        for i in 0..n {
            let row: Vec<f64> = logits[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            want += lse - row[labels[i]];
        }
        want /= n as f64;
        assert!((t.item(l) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn permutation_equivariance() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(5);
        let (n, c, d) = (6, 4, 8);
        let bank = build_text_bank(&(0..c).map(|i| format!("p{i}")).collect::<Vec<_>>(), d, BankMode::Hashed, 2).unwrap();
        let z: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let base = eval_tecoa(z.clone(), n, &bank, &labels, DEFAULT_TAU);
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let zp: Vec<f32> = perm.iter().flat_map(|&i| z[i * d..(i + 1) * d].to_vec()).collect();
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = eval_tecoa(zp, n, &bank, &lp, DEFAULT_TAU);
        assert!((base - permuted).abs() < 1e-6);
    }

    #[test]
    fn scale_invariance_of_embeddings() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(6);
        let (n, c, d) = (4, 3, 8);
        let bank = build_text_bank(&(0..c).map(|i| format!("s{i}")).collect::<Vec<_>>(), d, BankMode::Hashed, 2).unwrap();
        let z: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = vec![0, 1, 2, 1];
        let base = eval_tecoa(z.clone(), n, &bank, &labels, DEFAULT_TAU);
        let scaled: Vec<f32> = z.iter().map(|&v| v * 7.5).collect();
        let got = eval_tecoa(scaled, n, &bank, &labels, DEFAULT_TAU);
        assert!((base - got).abs() < 1e-6);
    }

    #[test]
    fn loss_bounds() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(7);
        let (n, c, d) = (8, 4, 8);
        let bank = build_text_bank(&(0..c).map(|i| format!("b{i}")).collect::<Vec<_>>(), d, BankMode::Hashed, 2).unwrap();
        for _ in 0..20 {
            let z: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let l = eval_tecoa(z, n, &bank, &labels, DEFAULT_TAU) as f64;
            assert!(l >= 0.0);
            assert!(l <= (c as f64).ln() + 2.0 / DEFAULT_TAU);
        }
    }
}
