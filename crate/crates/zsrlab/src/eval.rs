//! Zero-shot classification, clean/robust accuracy, weight-interpolation
//! sweeps, and report emission.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::attacks::{pgd_attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{interpolate_params, Checkpoint, TextBank};
use crate::rng::derive_seed;
use crate::training::{ModelState, ObjectiveKind, PgdObjective};

const EVAL_BATCH: usize = 32;

/// Zero-shot decision rule: argmax_j cos(z_i, bank_j)/τ, ties to the lowest
/// class index.
pub fn zero_shot_classify(
    model: &ModelState,
    images: &[f32],
    n: usize,
    bank: &TextBank,
    tau: f64,
) -> Result<Vec<usize>> {
    let labels = crate::training::pseudo_label(model, images, n, bank, tau)?;
    Ok(labels.into_iter().map(|l| l as usize).collect())
}

pub fn accuracy(preds: &[usize], labels: &[u32]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|&(&p, &l)| p == l as usize).count() as f64 / preds.len() as f64
}

/// Clean and robust accuracy of the zero-shot rule over one dataset. The
/// attacker gets the ground-truth labels and maximizes cross-entropy over the
/// cosine logits at this task's bank. Without an attack config the robust
/// number equals the clean one.
pub fn evaluate(
    model: &ModelState,
    data: &Dataset,
    bank: &TextBank,
    tau: f64,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<(f64, f64)> {
    if bank.len() != data.classes.len() {
        return Err(Error::invalid(format!(
            "bank has {} rows but dataset has {} classes",
            bank.len(),
            data.classes.len()
        )));
    }
    if let Some(a) = attack {
        a.validate()?;
    }
    let labels = data.labels.as_ref().ok_or_else(|| Error::invalid("evaluate: dataset has no labels"))?;
    let il = data.image_len();
    let n = data.len();
    let mut clean_hits = 0usize;
    let mut robust_hits = 0usize;
    for (b, chunk) in (0..n).collect::<Vec<_>>().chunks(EVAL_BATCH).enumerate() {
        let x: Vec<f32> = chunk.iter().flat_map(|&i| data.image(i).iter().copied()).collect();
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
        let preds = zero_shot_classify(model, &x, chunk.len(), bank, tau)?;
        clean_hits += preds.iter().zip(&y).filter(|(p, l)| p == l).count();
        match attack {
            None => robust_hits = clean_hits,
            Some(cfg) if cfg.epsilon == 0.0 => robust_hits = clean_hits,
            Some(cfg) => {
                let obj = PgdObjective {
                    model,
                    kind: ObjectiveKind::Rows { rows: bank.rows.clone(), count: bank.len() },
                    labels: y.clone(),
                    tau,
                };
                let batch = pgd_attack(&obj, &x, cfg, derive_seed(seed, &format!("eval/batch{b}")))?;
                // spot-check the attack invariants on the emitted examples
                for (i, (&xa, &xc)) in batch.x_adv.iter().zip(&batch.x).enumerate() {
                    let d = xa - xc;
                    if d.abs() > cfg.epsilon + 1e-6 || !(0.0..=1.0).contains(&xa) {
                        return Err(Error::invalid(format!("attack constraint violated at pixel {i}: delta {d}")));
                    }
                }
                let adv_preds = obj.predict(&batch.x_adv)?;
                robust_hits += adv_preds.iter().zip(&y).filter(|(p, l)| p == l).count();
            }
        }
        let _ = il;
    }
    Ok((clean_hits as f64 / n as f64, robust_hits as f64 / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub dataset: String,
    pub clean: f64,
    pub robust: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<DatasetRecord>,
    pub average_clean: f64,
    pub average_robust: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(records: Vec<DatasetRecord>, attack: Option<AttackConfig>, config_hash: String, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("report needs at least one record"));
        }
        let k = records.len() as f64;
        let average_clean = records.iter().map(|r| r.clean).sum::<f64>() / k;
        let average_robust = records.iter().map(|r| r.robust).sum::<f64>() / k;
        Ok(EvalReport { records, average_clean, average_robust, attack, config_hash, seed })
    }

    /// CSV rendering with a fixed column order; the aggregate row is last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,clean,robust\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.dataset, r.clean, r.robust));
        }
        out.push_str(&format!("average,{},{}\n", self.average_clean, self.average_robust));
        out
    }
}

/// Parse a report CSV back into (dataset, clean, robust) rows, including the
/// trailing average row.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("dataset,clean,robust") => {}
        other => return Err(Error::invalid(format!("bad csv header: {other:?}"))),
    }
    let mut rows = Vec::new();
    for line in lines {
        let mut parts = line.splitn(3, ',');
        let (name, c, r) = (
            parts.next().ok_or_else(|| Error::invalid("short csv row"))?,
            parts.next().ok_or_else(|| Error::invalid("short csv row"))?,
            parts.next().ok_or_else(|| Error::invalid("short csv row"))?,
        );
        let c: f64 = c.parse().map_err(|_| Error::invalid(format!("bad clean value {c:?}")))?;
        let r: f64 = r.parse().map_err(|_| Error::invalid(format!("bad robust value {r:?}")))?;
        rows.push((name.to_string(), c, r));
    }
    if rows.is_empty() {
        return Err(Error::invalid("csv has no data rows"));
    }
    Ok(rows)
}

/// Write the JSON and CSV forms of a report next to each other.
pub fn emit_report(report: &EvalReport, json_path: &Path) -> Result<()> {
    if let Some(dir) = json_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(json_path, serde_json::to_vec_pretty(report)?)?;
    std::fs::write(json_path.with_extension("csv"), report.to_csv())?;
    Ok(())
}

/// Stable hash of any serializable config, for report provenance.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub w: f32,
    pub clean: f64,
    pub robust: f64,
}

/// Evaluate interpolations (1−w)·a + w·b across a weight grid, averaging
/// clean/robust accuracy over the given eval sets.
pub fn interpolation_sweep(
    a: &Checkpoint,
    b: &Checkpoint,
    grid: &[f32],
    sets: &[(&Dataset, &TextBank)],
    tau: f64,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<Vec<FrontierRow>> {
    if a.arch != b.arch || a.meta != b.meta {
        return Err(Error::invalid("interpolation endpoints have different architectures"));
    }
    if sets.is_empty() {
        return Err(Error::invalid("interpolation_sweep needs at least one eval set"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &w in grid {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::invalid(format!("interpolation weight {w} outside [0,1]")));
        }
        let tensors = interpolate_params(&a.tensors, &b.tensors, w)?;
        let ckpt = Checkpoint { arch: a.arch, meta: a.meta.clone(), tensors };
        let model = ModelState::from_checkpoint(&ckpt)?;
        let mut clean = 0.0;
        let mut robust = 0.0;
        for (ds, bank) in sets {
            let (c, r) = evaluate(&model, ds, bank, tau, attack, derive_seed(seed, &format!("interp/{w}")))?;
            clean += c;
            robust += r;
        }
        rows.push(FrontierRow { w, clean: clean / sets.len() as f64, robust: robust / sets.len() as f64 });
    }
    Ok(rows)
}

/// CSV form of a frontier table (w, clean, robust).
pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut out = String::from("w,clean,robust\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.w, r.clean, r.robust));
    }
    out
}
