//! Command-line entry point: data generation, training, attacking,
//! evaluation, interpolation, pseudo-labeling, and named experiment recipes.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attacks::{pgd_attack, AttackConfig};
use crate::data::{gen_synthetic, load_dataset, parse_config, save_dataset, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{
    config_hash, emit_report, evaluate, frontier_csv, interpolation_sweep, DatasetRecord, EvalReport,
};
use crate::losses::LossVariant;
use crate::models::{Checkpoint, TextBank};
use crate::rng::derive_seed;
use crate::training::{run_training, Adaptation, ModelState, ObjectiveKind, PgdObjective, TrainConfig};

#[derive(Parser)]
#[command(name = "zsrlab", about = "Adversarial adaptation lab for dual-encoder zero-shot classifiers", disable_help_subcommand = true)]
pub struct Cli {
    /// Force fully serialized execution (runs are already deterministic; this
    /// pins reduction order if parallel evaluation is ever enabled).
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic compositional-shapes corpus.
    GenData(GenDataArgs),
    /// Train a model per a JSON config.
    Train(TrainArgs),
    /// Attack a dataset with PGD and archive the adversarial batch.
    Attack(AttackArgs),
    /// Measure clean/robust zero-shot accuracy over dataset directories.
    Eval(EvalArgs),
    /// Sweep weight interpolations between two checkpoints.
    Interpolate(InterpolateArgs),
    /// Emit zero-shot pseudo-labels for a dataset.
    PseudoLabel(PseudoLabelArgs),
    /// Run a named end-to-end recipe.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional SynthSpec JSON; defaults fill anything omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// AttackConfig JSON; defaults to the evaluation attack at ε=1/255.
    #[arg(long)]
    pub attack: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory whose subdirectories are datasets.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Directory of <dataset>.json text banks matching the dataset names.
    #[arg(long)]
    pub banks_dir: PathBuf,
    #[arg(long)]
    pub attack: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
}

#[derive(Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    pub grid: String,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub banks_dir: PathBuf,
    #[arg(long)]
    pub attack: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
}

#[derive(Args)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
}

#[derive(Args)]
pub struct ExperimentArgs {
    /// One of: fig4, fig5, fig5b, fig6, table1-toy.
    pub recipe: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Interpolation endpoints, fig6 only.
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 24)]
    pub per_class: usize,
    /// Evaluation PGD steps (the full 100 is slow on one core).
    #[arg(long, default_value_t = 10)]
    pub eval_steps: usize,
}

/// Reproducibility record written beside every artifact-producing run.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(std::fs::read(path)?)))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config_hash: String,
    seed: u64,
    inputs: &[&Path],
    artifacts: &[String],
) -> Result<()> {
    let mut input_hashes = BTreeMap::new();
    for p in inputs {
        input_hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash,
        seed,
        inputs: input_hashes,
        artifacts: artifacts.to_vec(),
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn load_bank(path: &Path) -> Result<TextBank> {
    TextBank::load(path)
}

fn load_model(path: &Path) -> Result<ModelState> {
    ModelState::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_attack(path: Option<&Path>, default: AttackConfig) -> Result<AttackConfig> {
    let cfg = match path {
        Some(p) => parse_config::<AttackConfig>(&std::fs::read(p)?)?,
        None => default,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Datasets and matching banks found under a data/banks directory pair, in
/// name order.
fn load_eval_sets(data_dir: &Path, banks_dir: &Path) -> Result<Vec<(String, Dataset, TextBank)>> {
    let mut names: Vec<String> = std::fs::read_dir(data_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("meta.json").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::invalid(format!("no datasets under {}", data_dir.display())));
    }
    let mut out = Vec::new();
    for name in names {
        let ds = load_dataset(&data_dir.join(&name))?;
        let bank = load_bank(&banks_dir.join(format!("{name}.json")))?;
        out.push((name, ds, bank));
    }
    Ok(out)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => parse_config::<SynthSpec>(&std::fs::read(p)?)?,
        None => SynthSpec::default(),
    };
    spec.seed = args.seed;
    let data = gen_synthetic(&spec)?;
    let out = &args.out;
    let banks = out.join("banks");
    std::fs::create_dir_all(&banks)?;
    let mut artifacts = Vec::new();
    let mut save = |ds: &Dataset, bank: Option<&TextBank>, name: &str| -> Result<()> {
        save_dataset(ds, &out.join(name))?;
        artifacts.push(format!("{name}/"));
        if let Some(b) = bank {
            b.save(&banks.join(format!("{name}.json")))?;
            artifacts.push(format!("banks/{name}.json"));
        }
        Ok(())
    };
    save(&data.train, Some(&data.train_bank), "train")?;
    save(&data.train_test, Some(&data.train_bank), "train_test")?;
    for (g, (ds, bank)) in data.heldout.iter().enumerate() {
        save(ds, Some(bank), &format!("heldout_{g}"))?;
    }
    write_manifest(out, "gen-data", config_hash(&spec)?, args.seed, &[], &artifacts)?;
    println!("wrote {} datasets under {}", 2 + data.heldout.len(), out.display());
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = parse_config::<TrainConfig>(&std::fs::read(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let data = load_dataset(&args.data)?;
    let bank = load_bank(&args.bank)?;
    let state = run_training(&cfg, &data, &bank)?;
    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    state.model.to_checkpoint().save(&args.out)?;
    let log_path = args.out.with_extension("metrics.jsonl");
    let mut log = String::new();
    for m in &state.metrics {
        log.push_str(&serde_json::to_string(m)?);
        log.push('\n');
    }
    std::fs::write(&log_path, log)?;
    write_manifest(
        &out_dir,
        "train",
        config_hash(&cfg)?,
        cfg.seed,
        &[args.config.as_path(), args.data.join("meta.json").as_path(), args.bank.as_path()],
        &[args.out.display().to_string(), log_path.display().to_string()],
    )?;
    let last = state.metrics.last();
    println!(
        "trained {} epochs, final loss {:.6}",
        state.metrics.len(),
        last.map(|m| m.train_loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_attack(args: &AttackArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let bank = load_bank(&args.bank)?;
    let cfg = load_attack(args.attack.as_deref(), AttackConfig::eval_default(1.0 / 255.0))?;
    let labels: Vec<usize> = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("attack needs a labeled dataset"))?
        .iter()
        .map(|&l| l as usize)
        .collect();
    let obj = PgdObjective {
        model: &model,
        kind: ObjectiveKind::Rows { rows: bank.rows.clone(), count: bank.len() },
        labels,
        tau: args.tau,
    };
    let batch = pgd_attack(&obj, &data.images, &cfg, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let flat = |v: &[f32]| -> Vec<u8> { v.iter().flat_map(|x| x.to_le_bytes()).collect() };
    std::fs::write(args.out.join("x.bin"), flat(&batch.x))?;
    std::fs::write(args.out.join("x_adv.bin"), flat(&batch.x_adv))?;
    let meta = serde_json::json!({
        "count": batch.n(),
        "image_shape": data.image_shape,
        "dtype": "f32le",
        "attack": cfg,
        "objective": batch.objective,
        "start_objective": batch.start_objective,
    });
    std::fs::write(args.out.join("batch.json"), serde_json::to_vec_pretty(&meta)?)?;
    write_manifest(
        &args.out,
        "attack",
        config_hash(&cfg)?,
        args.seed,
        &[args.checkpoint.as_path(), args.data.join("meta.json").as_path(), args.bank.as_path()],
        &["x.bin".into(), "x_adv.bin".into(), "batch.json".into()],
    )?;
    println!("attacked {} images", batch.n());
    Ok(())
}

fn eval_report(
    model: &ModelState,
    sets: &[(String, Dataset, TextBank)],
    tau: f64,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<EvalReport> {
    let mut records = Vec::new();
    for (name, ds, bank) in sets {
        let (clean, robust) = evaluate(model, ds, bank, tau, attack, derive_seed(seed, name))?;
        records.push(DatasetRecord { dataset: name.clone(), clean, robust, n_examples: ds.len() });
    }
    EvalReport::new(records, attack.cloned(), config_hash(&attack)?, seed)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let sets = load_eval_sets(&args.data_dir, &args.banks_dir)?;
    let attack = match &args.attack {
        Some(p) => Some(load_attack(Some(p), AttackConfig::eval_default(1.0 / 255.0))?),
        None => None,
    };
    let report = eval_report(&model, &sets, args.tau, attack.as_ref(), args.seed)?;
    emit_report(&report, &args.out)?;
    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_manifest(
        &out_dir,
        "eval",
        report.config_hash.clone(),
        args.seed,
        &[args.checkpoint.as_path()],
        &[args.out.display().to_string()],
    )?;
    println!("average clean {:.4} robust {:.4}", report.average_clean, report.average_robust);
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<f32>> {
    grid.split(',')
        .map(|s| s.trim().parse::<f32>().map_err(|_| Error::invalid(format!("bad grid value {s:?}"))))
        .collect()
}

pub fn cmd_interpolate(args: &InterpolateArgs) -> Result<()> {
    let a = Checkpoint::load(&args.a)?;
    let b = Checkpoint::load(&args.b)?;
    let grid = parse_grid(&args.grid)?;
    let sets = load_eval_sets(&args.data_dir, &args.banks_dir)?;
    let refs: Vec<(&Dataset, &TextBank)> = sets.iter().map(|(_, d, t)| (d, t)).collect();
    let attack = match &args.attack {
        Some(p) => Some(load_attack(Some(p), AttackConfig::eval_default(1.0 / 255.0))?),
        None => None,
    };
    let rows = interpolation_sweep(&a, &b, &grid, &refs, args.tau, attack.as_ref(), args.seed)?;
    if let Some(dir) = args.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, frontier_csv(&rows))?;
    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_manifest(
        &out_dir,
        "interpolate",
        config_hash(&(&grid, &attack))?,
        args.seed,
        &[args.a.as_path(), args.b.as_path()],
        &[args.out.display().to_string()],
    )?;
    println!("wrote {} frontier rows to {}", rows.len(), args.out.display());
    Ok(())
}

pub fn cmd_pseudo_label(args: &PseudoLabelArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let bank = load_bank(&args.bank)?;
    let labels = crate::training::pseudo_label(&model, &data.images, data.len(), &bank, args.tau)?;
    if let Some(dir) = args.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, serde_json::to_vec_pretty(&labels)?)?;
    let bin: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    std::fs::write(args.out.with_extension("bin"), bin)?;
    println!("labeled {} images", labels.len());
    Ok(())
}

/// Desk-scale base config shared by the experiment recipes.
fn recipe_train_cfg(variant: LossVariant, adaptation: Adaptation, seed: u64, args: &ExperimentArgs) -> TrainConfig {
    let mut cfg = TrainConfig::new(variant, adaptation);
    cfg.epochs = args.epochs;
    cfg.batch_size = 32;
    cfg.seed = seed;
    cfg
}

fn recipe_eval_attack(epsilon: f32, steps: usize) -> AttackConfig {
    let mut a = AttackConfig::eval_default(epsilon);
    a.steps = steps;
    a
}

fn recipe_data(args: &ExperimentArgs, seed: u64) -> Result<crate::data::SynthData> {
    let spec = SynthSpec { per_class: args.per_class, eval_per_class: 16, seed, ..SynthSpec::default() };
    gen_synthetic(&spec)
}

/// Train one model and return its held-out clean/robust averages.
fn heldout_scores(
    cfg: &TrainConfig,
    data: &crate::data::SynthData,
    attack: &AttackConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let st = run_training(cfg, &data.train, &data.train_bank)?;
    let mut clean = 0.0;
    let mut robust = 0.0;
    for (g, (ds, bank)) in data.heldout.iter().enumerate() {
        let (c, r) = evaluate(&st.model, ds, bank, cfg.tau, Some(attack), derive_seed(seed, &format!("held{g}")))?;
        clean += c;
        robust += r;
    }
    let k = data.heldout.len() as f64;
    Ok((clean / k, robust / k))
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let attack = recipe_eval_attack(1.0 / 255.0, args.eval_steps);
    let mut rows = vec!["setting,clean,robust".to_string()];
    match args.recipe.as_str() {
        "table1-toy" => {
            let data = recipe_data(args, args.seed)?;
            let methods: [(&str, LossVariant); 4] = [
                ("none", LossVariant::Ce),
                ("tecoa", LossVariant::Tecoa),
                ("adv-ce", LossVariant::Adv),
                ("imgcoadv", LossVariant::ImgCoAdv),
            ];
            for (name, variant) in methods {
                let (clean, robust) = if name == "none" {
                    // non-adapted baseline: evaluate the initialization
                    let cfg = recipe_train_cfg(LossVariant::Tecoa, Adaptation::FullFt, args.seed, args);
                    let model = ModelState::init(&cfg, data.train.classes.len())?;
                    let mut c = 0.0;
                    let mut r = 0.0;
                    for (g, (ds, bank)) in data.heldout.iter().enumerate() {
                        let (ci, ri) =
                            evaluate(&model, ds, bank, cfg.tau, Some(&attack), derive_seed(args.seed, &format!("b{g}")))?;
                        c += ci;
                        r += ri;
                    }
                    (c / data.heldout.len() as f64, r / data.heldout.len() as f64)
                } else {
                    let cfg = recipe_train_cfg(variant, Adaptation::FullFt, args.seed, args);
                    heldout_scores(&cfg, &data, &attack, args.seed)?
                };
                rows.push(format!("{name},{clean},{robust}"));
            }
        }
        "fig4" => {
            let data = recipe_data(args, args.seed)?;
            for shots in [1usize, 5, 50] {
                let mut cfg = recipe_train_cfg(LossVariant::Tecoa, Adaptation::FullFt, args.seed, args);
                cfg.shots = Some(shots);
                let (clean, robust) = heldout_scores(&cfg, &data, &attack, args.seed)?;
                rows.push(format!("shots={shots},{clean},{robust}"));
            }
        }
        "fig5" => {
            let data = recipe_data(args, args.seed)?;
            for k in [1u32, 2, 4] {
                let eps = k as f32 / 255.0;
                let mut cfg = recipe_train_cfg(LossVariant::Tecoa, Adaptation::FullFt, args.seed, args);
                cfg.attack.epsilon = eps;
                cfg.attack.alpha = eps.min(1.0 / 255.0);
                let eval_atk = recipe_eval_attack(eps, args.eval_steps);
                let (clean, robust) = heldout_scores(&cfg, &data, &eval_atk, args.seed)?;
                rows.push(format!("eps={k}/255,{clean},{robust}"));
            }
        }
        "fig5b" => {
            // parameter-matched adaptation comparison
            let data = recipe_data(args, args.seed)?;
            let methods = [
                ("vpt_token_4", Adaptation::VptToken(4)),
                ("vpt_pixel", Adaptation::VptPixel),
                ("partial_ft_1", Adaptation::PartialFt(1)),
            ];
            for (name, adaptation) in methods {
                let cfg = recipe_train_cfg(LossVariant::Tecoa, adaptation, args.seed, args);
                let (clean, robust) = heldout_scores(&cfg, &data, &attack, args.seed)?;
                rows.push(format!("{name},{clean},{robust}"));
            }
        }
        "fig6" => {
            let (a, b) = match (&args.a, &args.b) {
                (Some(a), Some(b)) => (Checkpoint::load(a)?, Checkpoint::load(b)?),
                _ => return Err(Error::config("fig6 needs --a and --b checkpoints")),
            };
            let data = recipe_data(args, args.seed)?;
            let refs: Vec<(&Dataset, &TextBank)> = data.heldout.iter().map(|(d, t)| (d, t)).collect();
            let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
            let frontier = interpolation_sweep(&a, &b, &grid, &refs, 0.07, Some(&attack), args.seed)?;
            rows = vec!["w,clean,robust".to_string()];
            for r in &frontier {
                rows.push(format!("{},{},{}", r.w, r.clean, r.robust));
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown recipe {other:?}; expected fig4, fig5, fig5b, fig6, or table1-toy"
            )))
        }
    }
    let out = args.out.join(format!("{}.csv", args.recipe));
    std::fs::write(&out, rows.join("\n") + "\n")?;
    write_manifest(
        &args.out,
        &format!("experiment {}", args.recipe),
        config_hash(&(args.seed, args.epochs, args.per_class, args.eval_steps))?,
        args.seed,
        &[],
        &[out.display().to_string()],
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Exit status policy: 0 success, 1 usage, 2 validation, 3 runtime.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Invalid(_) | Error::ShapeMismatch { .. } => 2,
        Error::Io(_) | Error::Json(_) | Error::NonFinite(_) => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::PseudoLabel(a) => cmd_pseudo_label(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}
