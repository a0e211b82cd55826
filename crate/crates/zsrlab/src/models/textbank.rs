//! Frozen class-name → unit-norm embedding bank standing in for a text encoder.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_vec, rng_from, unit_vec};

/// Noise scale applied to compositional embeddings before renormalization.
pub const COMPOSITIONAL_NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankProvenance {
    Generated,
    Loaded,
}

/// How class-name embeddings are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMode {
    /// Names of the form "<attr1> <attr2>"; each attribute gets a seeded
    /// unit-sphere code of dimension d_e/2, shared across classes.
    Compositional,
    /// One seeded unit vector per full class name.
    Hashed,
}

/// Frozen class-name embedding matrix; each row has unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub names: Vec<String>,
    pub d_embed: usize,
    /// C × d_embed, row-major.
    pub rows: Vec<f32>,
    pub provenance: BankProvenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    d_e: usize,
    names: Vec<String>,
    rows: Vec<Vec<f32>>,
}

impl TextBank {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d_embed..(i + 1) * self.d_embed]
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let file = BankFile {
            d_e: self.d_embed,
            names: self.names.clone(),
            rows: (0..self.len()).map(|i| self.row(i).to_vec()).collect(),
        };
        Ok(serde_json::to_vec_pretty(&file)?)
    }

    /// Parse and re-normalize a bank file (the `file` construction mode).
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let file: BankFile = serde_json::from_slice(bytes)?;
        if file.names.len() != file.rows.len() {
            return Err(Error::invalid(format!(
                "bank: {} names but {} rows",
                file.names.len(),
                file.rows.len()
            )));
        }
        check_unique(&file.names)?;
        let mut rows = Vec::with_capacity(file.names.len() * file.d_e);
        for (i, r) in file.rows.iter().enumerate() {
            if r.len() != file.d_e {
                return Err(Error::ShapeMismatch { op: "bank_row", lhs: vec![i, r.len()], rhs: vec![file.d_e] });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("bank row {i}")));
            }
            rows.extend(normalize(r)?);
        }
        Ok(TextBank { names: file.names, d_embed: file.d_e, rows, provenance: BankProvenance::Loaded })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_bytes(&std::fs::read(path)?)
    }
}

fn check_unique(names: &[String]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::invalid(format!("duplicate class name: {n}")));
        }
    }
    Ok(())
}

fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::invalid("bank row has near-zero norm"));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Build a frozen text bank for the given class names.
pub fn build_text_bank(class_names: &[String], d_embed: usize, mode: BankMode, seed: u64) -> Result<TextBank> {
    if class_names.is_empty() {
        return Err(Error::invalid("text bank needs at least one class"));
    }
    check_unique(class_names)?;
    let mut rows = Vec::with_capacity(class_names.len() * d_embed);
    match mode {
        BankMode::Compositional => {
            if d_embed % 2 != 0 {
                return Err(Error::invalid(format!("compositional bank needs even d_e, got {d_embed}")));
            }
            let half = d_embed / 2;
            for name in class_names {
                let attrs: Vec<&str> = name.split_whitespace().collect();
                if attrs.len() != 2 {
                    return Err(Error::invalid(format!(
                        "compositional class name must be \"<attr1> <attr2>\", got \"{name}\""
                    )));
                }
                let mut v = Vec::with_capacity(d_embed);
                for a in &attrs {
                    let mut rng = rng_from(derive_seed(seed, &format!("bank.attr.{a}")));
                    v.extend(unit_vec(&mut rng, half));
                }
                let mut rng = rng_from(derive_seed(seed, &format!("bank.noise.{name}")));
                let noise = normal_vec(&mut rng, d_embed, COMPOSITIONAL_NOISE_SIGMA);
                for (x, n) in v.iter_mut().zip(noise) {
                    *x += n;
                }
                rows.extend(normalize(&v)?);
            }
        }
        BankMode::Hashed => {
            for name in class_names {
                let mut rng = rng_from(derive_seed(seed, &format!("bank.name.{name}")));
                rows.extend(unit_vec(&mut rng, d_embed));
            }
        }
    }
    Ok(TextBank { names: class_names.to_vec(), d_embed, rows, provenance: BankProvenance::Generated })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rows_are_unit_norm() {
        let bank = build_text_bank(&names(&["red circle", "blue square"]), 32, BankMode::Compositional, 7).unwrap();
        for i in 0..bank.len() {
            let n: f32 = bank.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hashed_mode_is_deterministic() {
        let a = build_text_bank(&names(&["cat", "dog"]), 16, BankMode::Hashed, 3).unwrap();
        let b = build_text_bank(&names(&["cat", "dog"]), 16, BankMode::Hashed, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(build_text_bank(&names(&["cat", "cat"]), 16, BankMode::Hashed, 3).is_err());
    }

    #[test]
    fn compositional_requires_two_attributes() {
        assert!(build_text_bank(&names(&["red"]), 16, BankMode::Compositional, 3).is_err());
    }

    #[test]
    fn shared_attribute_raises_similarity() {
        // Averaged over 100 seeds, classes sharing "red" must be closer than
        // classes sharing nothing.
        let mut shared = 0.0f64;
        let mut disjoint = 0.0f64;
        for seed in 0..100 {
            let bank = build_text_bank(
                &names(&["red circle", "red square", "blue triangle"]),
                32,
                BankMode::Compositional,
                seed,
            )
            .unwrap();
            let cos = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| (x * y) as f64).sum::<f64>();
            shared += cos(bank.row(0), bank.row(1));
            disjoint += cos(bank.row(0), bank.row(2));
        }
        assert!(shared / 100.0 > disjoint / 100.0, "shared {shared} disjoint {disjoint}");
    }

    #[test]
    fn json_round_trip() {
        let bank = build_text_bank(&names(&["red circle", "blue square"]), 8, BankMode::Compositional, 1).unwrap();
        let bytes = bank.to_json_bytes().unwrap();
        let loaded = TextBank::from_json_bytes(&bytes).unwrap();
        assert_eq!(bank.names, loaded.names);
        assert_eq!(bank.d_embed, loaded.d_embed);
        for (a, b) in bank.rows.iter().zip(&loaded.rows) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
