//! Subcommand implementations. Every stage resolves the same experiment
//! config, drops a frozen manifest into the output directory, reads
//! prior-stage checkpoints by path, and writes its own artifacts: training
//! logs and search traces as JSONL, analyses as CSV/SVG, models as binary
//! checkpoints.

use crate::config::{ConfigError, DataSource, ExperimentConfig, MoleMode, RouterInit};
use loramix_core::ckpt::{self, CkptError};
use loramix_core::data::{load_idx, synth_data, DataError};
use loramix_core::evo::{self, EvoError, ModelForEval};
use loramix_core::mole::{merge_subnet, MoleError};
use loramix_core::probe::{self, ProbeError};
use loramix_core::router::RouterError;
use loramix_core::space::SpaceError;
use loramix_core::train::{self, EvalMetrics, TrainError};
use loramix_core::vit::VitError;
use loramix_core::{
    Dataset, ExpertBank, ExpertMixture, Grouping, MolePath, Router, SubnetConfig, SupernetWeights,
    Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("search: {0}")]
    Evo(#[from] EvoError),
    #[error("probe: {0}")]
    Probe(#[from] ProbeError),
    #[error("checkpoint does not fit the configured model: {0}")]
    Vit(#[from] VitError),
    #[error("checkpoint does not fit the configured experts: {0}")]
    Mole(#[from] MoleError),
    #[error("checkpoint does not fit the configured router: {0}")]
    Router(#[from] RouterError),
    #[error("{0}")]
    Space(#[from] SpaceError),
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Exit codes: 2 missing input file, 3 schema/shape violation,
    /// 4 checksum mismatch, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(e) => e.exit_code(),
            CliError::Ckpt(e) => e.exit_code(),
            CliError::Data(DataError::Io(e)) => {
                if e.kind() == std::io::ErrorKind::NotFound {
                    2
                } else {
                    1
                }
            }
            CliError::Data(_) => 3,
            CliError::Vit(_) | CliError::Mole(_) | CliError::Router(_) | CliError::Invalid(_) => 3,
            CliError::Space(_) => 3,
            CliError::Train(_) | CliError::Evo(_) | CliError::Probe(_) | CliError::Io(_) => 1,
        }
    }
}

pub fn supernet_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("supernet.tlra")
}

pub fn mole_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("mole.tlra")
}

pub fn finetune_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("finetune.tlra")
}

pub fn merged_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("merged.tlra")
}

/// The most-derived model available: expert checkpoint if it exists, else
/// the pretrained supernet.
fn default_model_path(cfg: &ExperimentConfig) -> PathBuf {
    let mole = mole_path(cfg);
    if mole.exists() {
        mole
    } else {
        supernet_path(cfg)
    }
}

/// Create the output directory and freeze the resolved config into it.
fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("manifest.ini"), cfg.manifest_ini())?;
    Ok(())
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Ok(synth_data(
                cfg.data.classes,
                cfg.data.samples,
                cfg.space.image_size,
                cfg.data.noise as f32,
                &mut rng,
            ))
        }
        DataSource::Idx => {
            let images = cfg.data.train_images.as_ref().expect("validated");
            let labels = cfg.data.train_labels.as_ref().expect("validated");
            let data = load_idx(images, labels, cfg.space.num_classes)?;
            if data.image_size != cfg.space.image_size {
                return Err(CliError::Invalid(format!(
                    "dataset images are {0}x{0} but the model expects {1}x{1}",
                    data.image_size, cfg.space.image_size
                )));
            }
            Ok(data)
        }
    }
}

/// Deterministic (train, validation) partition shared by every stage.
pub fn train_val(cfg: &ExperimentConfig, data: &Dataset) -> (Dataset, Dataset) {
    data.split(cfg.data.val_fraction, cfg.seed)
}

fn save_ckpt(path: &Path, pairs: &[(String, Tensor)]) -> Result<(), CkptError> {
    ckpt::save(path, pairs.iter().map(|(n, t)| (n.as_str(), t)))
}

fn owned(tensors: Vec<(String, &Tensor)>) -> Vec<(String, Tensor)> {
    tensors.into_iter().map(|(n, t)| (n, t.clone())).collect()
}

fn check_supernet_shape(
    weights: &SupernetWeights,
    cfg: &ExperimentConfig,
) -> Result<(), CliError> {
    let want = (
        cfg.space.max_embed(),
        cfg.space.patch_dim(),
        cfg.space.max_depth(),
    );
    let got = (
        weights.patch_w.shape()[0],
        weights.patch_w.shape()[1],
        weights.blocks.len(),
    );
    if want != got {
        return Err(CliError::Invalid(format!(
            "checkpoint shape (embed {}, patch dim {}, blocks {}) does not match the configured space (embed {}, patch dim {}, blocks {})",
            got.0, got.1, got.2, want.0, want.1, want.2
        )));
    }
    Ok(())
}

pub struct MoleParts {
    pub bank: ExpertBank,
    pub router: Router,
}

pub struct LoadedModel {
    pub weights: SupernetWeights,
    pub mole: Option<MoleParts>,
}

/// Load a checkpoint as supernet weights plus, when `lora.*` tensors are
/// present, the expert bank and router shaped by the config.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<LoadedModel, CliError> {
    let map = ckpt::load(path)?;
    let weights = SupernetWeights::from_tensors(&map)?;
    check_supernet_shape(&weights, cfg)?;
    let has_experts = map.keys().any(|k| k.starts_with("lora."));
    let mole = if has_experts {
        if cfg.mole.experts == 0 {
            return Err(CliError::Invalid(
                "checkpoint contains expert tensors but mole.mode = none".to_string(),
            ));
        }
        let bank = ExpertBank::from_tensors(&cfg.space, cfg.mole.rank, cfg.mole.experts, &map)?;
        let router =
            Router::from_tensors(&cfg.router_config(), &cfg.space, cfg.mole.experts, &map)?;
        Some(MoleParts { bank, router })
    } else {
        None
    };
    Ok(LoadedModel { weights, mole })
}

pub fn grouping(cfg: &ExperimentConfig) -> Grouping {
    Grouping::new(&cfg.space, cfg.mole.grouping)
}

/// Probe subnets: the configured list, or a deterministic six-subnet sample.
pub fn probe_subnets(cfg: &ExperimentConfig) -> Vec<SubnetConfig> {
    if let Some(list) = &cfg.probe.subnets {
        return list.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4f42);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    while out.len() < 6 {
        let s = loramix_core::space::sample_subnet(&cfg.space, &mut rng);
        if seen.insert(s.canonical_text()) {
            out.push(s);
        }
    }
    out
}

fn probe_subset(data: &Dataset, n: usize) -> Dataset {
    let take = n.min(data.len());
    let idx: Vec<usize> = (0..take).collect();
    let (images, labels) = data.gather(&idx);
    Dataset {
        images,
        labels,
        num_classes: data.num_classes,
        image_size: data.image_size,
    }
}

#[derive(Default)]
struct Jsonl(String);

impl Jsonl {
    fn push<T: Serialize>(&mut self, rec: &T) {
        self.0
            .push_str(&serde_json::to_string(rec).expect("log records serialize"));
        self.0.push('\n');
    }
}

fn print_summary<T: Serialize>(summary: &T) {
    println!(
        "{}",
        serde_json::to_string(summary).expect("summaries serialize")
    );
}

// ---------------------------------------------------------------- pretrain

#[derive(Serialize)]
struct TrainSummary<'a> {
    cmd: &'a str,
    checkpoint: String,
    epochs: usize,
    final_epoch_loss: f64,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let (train_set, _) = train_val(cfg, &data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = SupernetWeights::init(&cfg.space, &mut rng);
    let mut log = Jsonl::default();
    let mut hook_err: Option<CkptError> = None;
    let total = cfg.train.supernet_epochs;
    let every = cfg.checkpoint_every;
    let final_path = supernet_path(cfg);
    let stats = train::pretrain_supernet_hooked(
        &mut weights,
        &cfg.space,
        &train_set,
        &cfg.train,
        &mut |r| log.push(r),
        &mut |epoch, w, adam| {
            if hook_err.is_some() {
                return;
            }
            let done = epoch + 1;
            let last = done == total;
            if !(last || (every > 0 && done % every == 0)) {
                return;
            }
            let mut pairs = owned(w.tensors());
            pairs.extend(adam.tensors());
            let path = if last {
                final_path.clone()
            } else {
                cfg.out_dir.join(format!("supernet.ep{done}.tlra"))
            };
            if let Err(e) = save_ckpt(&path, &pairs) {
                hook_err = Some(e);
            }
        },
    )?;
    if let Some(e) = hook_err {
        return Err(e.into());
    }
    if total == 0 {
        save_ckpt(&final_path, &owned(weights.tensors()))?;
    }
    std::fs::write(cfg.out_dir.join("pretrain.jsonl"), log.0)?;
    print_summary(&TrainSummary {
        cmd: "pretrain",
        checkpoint: final_path.display().to_string(),
        epochs: total,
        final_epoch_loss: stats.epoch_losses.last().copied().unwrap_or(f64::NAN),
    });
    Ok(())
}

// --------------------------------------------------------------- train-mole

pub fn cmd_train_mole(
    cfg: &ExperimentConfig,
    checkpoint: Option<PathBuf>,
) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let (train_set, _) = train_val(cfg, &data);
    let from = checkpoint.unwrap_or_else(|| supernet_path(cfg));
    let map = ckpt::load(&from)?;
    let mut weights = SupernetWeights::from_tensors(&map)?;
    check_supernet_shape(&weights, cfg)?;

    if cfg.mole.mode == MoleMode::Off {
        let mut log = Jsonl::default();
        let mut hook_err: Option<CkptError> = None;
        let total = cfg.train.mole_epochs;
        let every = cfg.checkpoint_every;
        let final_path = finetune_path(cfg);
        let stats = train::full_finetune_hooked(
            &mut weights,
            &cfg.space,
            &train_set,
            &cfg.train,
            &mut |r| log.push(r),
            &mut |epoch, w, adam| {
                if hook_err.is_some() {
                    return;
                }
                let done = epoch + 1;
                let last = done == total;
                if !(last || (every > 0 && done % every == 0)) {
                    return;
                }
                let mut pairs = owned(w.tensors());
                pairs.extend(adam.tensors());
                let path = if last {
                    final_path.clone()
                } else {
                    cfg.out_dir.join(format!("finetune.ep{done}.tlra"))
                };
                if let Err(e) = save_ckpt(&path, &pairs) {
                    hook_err = Some(e);
                }
            },
        )?;
        if let Some(e) = hook_err {
            return Err(e.into());
        }
        std::fs::write(cfg.out_dir.join("finetune.jsonl"), log.0)?;
        print_summary(&TrainSummary {
            cmd: "train-mole",
            checkpoint: final_path.display().to_string(),
            epochs: total,
            final_epoch_loss: stats.epoch_losses.last().copied().unwrap_or(f64::NAN),
        });
        return Ok(());
    }

    let k = cfg.mole.experts;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bank = ExpertBank::init(&cfg.space, k, cfg.mole.rank, &mut rng);
    let rc = cfg.router_config();
    // A single expert leaves the softmax constant, so the router is inert
    // and its initialization style is irrelevant.
    let mut router = if cfg.mole.mode == MoleMode::SingleLora {
        Router::random_init(&rc, &cfg.space, k, &mut rng)?
    } else {
        match cfg.mole.router_init {
            RouterInit::GroupWise => Router::group_wise_init(&rc, &cfg.space, k, &mut rng)?,
            RouterInit::Random => Router::random_init(&rc, &cfg.space, k, &mut rng)?,
        }
    };
    let grp = grouping(cfg);
    let mut log = Jsonl::default();
    let mut hook_err: Option<CkptError> = None;
    let total = cfg.train.mole_epochs;
    let every = cfg.checkpoint_every;
    let final_path = mole_path(cfg);
    let frozen = &weights;
    let (stats, _) = train::train_mole_hooked(
        frozen,
        &mut bank,
        &mut router,
        &grp,
        &cfg.space,
        &train_set,
        &cfg.train,
        &mut |r| log.push(r),
        &mut |epoch, b, r, opt| {
            if hook_err.is_some() {
                return;
            }
            let done = epoch + 1;
            let last = done == total;
            if !(last || (every > 0 && done % every == 0)) {
                return;
            }
            let mut pairs = owned(frozen.tensors());
            pairs.extend(owned(b.tensors()));
            pairs.extend(owned(r.tensors()));
            pairs.extend(opt.adam.tensors());
            pairs.extend(opt.sgd.tensors());
            let path = if last {
                final_path.clone()
            } else {
                cfg.out_dir.join(format!("mole.ep{done}.tlra"))
            };
            if let Err(e) = save_ckpt(&path, &pairs) {
                hook_err = Some(e);
            }
        },
    )?;
    if let Some(e) = hook_err {
        return Err(e.into());
    }
    std::fs::write(cfg.out_dir.join("mole.jsonl"), log.0)?;
    print_summary(&TrainSummary {
        cmd: "train-mole",
        checkpoint: final_path.display().to_string(),
        epochs: total,
        final_epoch_loss: stats.epoch_losses.last().copied().unwrap_or(f64::NAN),
    });
    Ok(())
}

// ------------------------------------------------------- search / bruteforce

#[derive(Serialize)]
struct RankedRow {
    rank: usize,
    subnet: String,
    val_loss: f64,
    params: u64,
    flops: u64,
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    cmd: &'a str,
    checkpoint: String,
    evaluated: usize,
    best_subnet: String,
    best_val_loss: f64,
}

fn ranked_rows(ranked: &[evo::Candidate]) -> Vec<RankedRow> {
    ranked
        .iter()
        .enumerate()
        .map(|(i, c)| RankedRow {
            rank: i,
            subnet: c.subnet.canonical_text(),
            val_loss: c.val_loss,
            params: c.params,
            flops: c.flops,
        })
        .collect()
}

pub fn cmd_search(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let (_, val_set) = train_val(cfg, &data);
    let path = checkpoint.unwrap_or_else(|| default_model_path(cfg));
    let model = load_model(cfg, &path)?;
    let grp = grouping(cfg);
    let for_eval = ModelForEval {
        weights: &model.weights,
        mole: model.mole.as_ref().map(|m| (&m.bank, &m.router, &grp)),
    };
    let mut trace = Jsonl::default();
    let ranked = evo::evolve(&for_eval, &cfg.space, &val_set, &cfg.search, &mut |r| {
        trace.push(r)
    })?;
    std::fs::write(cfg.out_dir.join("search.jsonl"), trace.0)?;
    let rows = ranked_rows(&ranked);
    std::fs::write(
        cfg.out_dir.join("search_result.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    print_summary(&SearchSummary {
        cmd: "search",
        checkpoint: path.display().to_string(),
        evaluated: rows.len(),
        best_subnet: rows[0].subnet.clone(),
        best_val_loss: rows[0].val_loss,
    });
    Ok(())
}

pub fn cmd_bruteforce(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let (_, val_set) = train_val(cfg, &data);
    let path = checkpoint.unwrap_or_else(|| default_model_path(cfg));
    let model = load_model(cfg, &path)?;
    let grp = grouping(cfg);
    let for_eval = ModelForEval {
        weights: &model.weights,
        mole: model.mole.as_ref().map(|m| (&m.bank, &m.router, &grp)),
    };
    let ranked = evo::brute_force(&for_eval, &cfg.space, &val_set, &cfg.search.constraints)?;
    let rows = ranked_rows(&ranked);
    let mut trace = Jsonl::default();
    for row in &rows {
        trace.push(&serde_json::json!({
            "iter": 0,
            "rank": row.rank,
            "subnet": row.subnet,
            "val_loss": row.val_loss,
            "params": row.params,
            "flops": row.flops,
        }));
    }
    std::fs::write(cfg.out_dir.join("bruteforce.jsonl"), trace.0)?;
    std::fs::write(
        cfg.out_dir.join("bruteforce_result.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    if rows.is_empty() {
        return Err(CliError::Invalid(
            "no subnet satisfies the resource constraints".to_string(),
        ));
    }
    print_summary(&SearchSummary {
        cmd: "bruteforce",
        checkpoint: path.display().to_string(),
        evaluated: rows.len(),
        best_subnet: rows[0].subnet.clone(),
        best_val_loss: rows[0].val_loss,
    });
    Ok(())
}

// -------------------------------------------------------------------- merge

fn mixture_csv(mixture: &ExpertMixture) -> String {
    mixture.to_csv()
}

#[derive(Serialize)]
struct MergeSummary<'a> {
    cmd: &'a str,
    subnet: String,
    checkpoint: String,
    out: String,
    tensors: usize,
}

pub fn cmd_merge(
    cfg: &ExperimentConfig,
    subnet_text: &str,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let subnet = SubnetConfig::parse_text(subnet_text)?;
    subnet.validate(&cfg.space)?;
    let path = checkpoint.unwrap_or_else(|| mole_path(cfg));
    let model = load_model(cfg, &path)?;
    let Some(parts) = model.mole else {
        return Err(CliError::Invalid(format!(
            "{} holds no expert tensors; merge needs a trained expert checkpoint",
            path.display()
        )));
    };
    let grp = grouping(cfg);
    let mixture = parts.router.mixture_for(&subnet, &cfg.space, &grp)?;
    let (merged, _) = merge_subnet(&model.weights, &subnet, &cfg.space, &parts.bank, &mixture)?;
    let out_path = out.unwrap_or_else(|| merged_path(cfg));
    let pairs = owned(merged.tensors());
    save_ckpt(&out_path, &pairs)?;
    let mix_path = out_path.with_extension("mixture.csv");
    std::fs::write(&mix_path, mixture_csv(&mixture))?;
    print_summary(&MergeSummary {
        cmd: "merge",
        subnet: subnet.canonical_text(),
        checkpoint: path.display().to_string(),
        out: out_path.display().to_string(),
        tensors: pairs.len(),
    });
    Ok(())
}

// --------------------------------------------------------------------- eval

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Val,
    Train,
    All,
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    cmd: &'a str,
    checkpoint: String,
    subnet: String,
    split: &'a str,
    mode: &'a str,
    loss: f64,
    accuracy: f64,
    correct: usize,
    total: usize,
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    subnet_text: &str,
    split: EvalSplit,
    predictions: Option<PathBuf>,
) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let subnet = SubnetConfig::parse_text(subnet_text)?;
    subnet.validate(&cfg.space)?;
    let data = load_dataset(cfg)?;
    let (train_set, val_set) = train_val(cfg, &data);
    let (eval_set, split_name) = match split {
        EvalSplit::Val => (&val_set, "val"),
        EvalSplit::Train => (&train_set, "train"),
        EvalSplit::All => (&data, "all"),
    };
    let batch = cfg.train.batch_size;

    let map = ckpt::load(checkpoint)?;
    let has_experts = map.keys().any(|k| k.starts_with("lora."));
    let (mode, metrics, preds): (&str, EvalMetrics, Vec<usize>) = if has_experts {
        let model = load_model(cfg, checkpoint)?;
        let parts = model.mole.expect("expert tensors present");
        let grp = grouping(cfg);
        let metrics = train::evaluate_mole(
            &model.weights,
            &subnet,
            &cfg.space,
            &parts.bank,
            &parts.router,
            &grp,
            eval_set,
            batch,
            MolePath::Factored,
        )?;
        let preds = train::predict(
            &model.weights,
            &subnet,
            &cfg.space,
            Some((&parts.bank, &parts.router, &grp)),
            eval_set,
            batch,
        )?;
        ("mole", metrics, preds)
    } else {
        let weights = SupernetWeights::from_tensors(&map)?;
        let full_layout = weights.blocks.len() == cfg.space.max_depth()
            && weights.patch_w.shape()[0] == cfg.space.max_embed();
        if full_layout {
            let metrics = train::evaluate(&weights, &subnet, &cfg.space, eval_set, batch)?;
            let preds = train::predict(&weights, &subnet, &cfg.space, None, eval_set, batch)?;
            ("supernet", metrics, preds)
        } else {
            let restricted = cfg.space.restricted_to(&subnet);
            if weights.blocks.len() != subnet.depth
                || weights.patch_w.shape()[0] != subnet.embed
            {
                return Err(CliError::Invalid(format!(
                    "checkpoint layout (embed {}, blocks {}) matches neither the supernet nor subnet {}",
                    weights.patch_w.shape()[0],
                    weights.blocks.len(),
                    subnet.canonical_text()
                )));
            }
            let metrics = train::evaluate(&weights, &subnet, &restricted, eval_set, batch)?;
            let preds = train::predict(&weights, &subnet, &restricted, None, eval_set, batch)?;
            ("merged", metrics, preds)
        }
    };

    if let Some(pred_path) = predictions {
        let mut csv = String::from("index,label,pred\n");
        for (i, (&label, &pred)) in eval_set.labels.iter().zip(preds.iter()).enumerate() {
            csv.push_str(&format!("{i},{label},{pred}\n"));
        }
        std::fs::write(pred_path, csv)?;
    }

    let summary = EvalSummary {
        cmd: "eval",
        checkpoint: checkpoint.display().to_string(),
        subnet: subnet.canonical_text(),
        split: split_name,
        mode,
        loss: metrics.loss,
        accuracy: metrics.accuracy,
        correct: metrics.correct,
        total: metrics.total,
    };
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().replace('.', "_"))
        .unwrap_or_else(|| "eval".to_string());
    std::fs::write(
        cfg.out_dir.join(format!("eval_{stem}.json")),
        serde_json::to_string_pretty(&summary).expect("summaries serialize"),
    )?;
    print_summary(&summary);
    Ok(())
}

// -------------------------------------------------------------------- probe

/// Subnet count used to average router assignments into the heatmap.
const ASSIGNMENT_SUBNETS: usize = 100;

#[derive(Serialize)]
struct ProbeSummary<'a> {
    cmd: &'a str,
    checkpoint: String,
    subnets: Vec<String>,
    mean_offdiag_similarity: f64,
    frozen_mean_offdiag_similarity: Option<f64>,
    mean_expert_similarity: Option<f64>,
    files: Vec<String>,
}

pub fn cmd_probe(
    cfg: &ExperimentConfig,
    checkpoint: Option<PathBuf>,
    with_accuracy: bool,
) -> Result<(), CliError> {
    ensure_out_dir(cfg)?;
    let data = load_dataset(cfg)?;
    let (train_set, val_set) = train_val(cfg, &data);
    let probe_set = probe_subset(&val_set, cfg.probe.samples);
    let path = checkpoint.unwrap_or_else(|| default_model_path(cfg));
    let model = load_model(cfg, &path)?;
    let grp = grouping(cfg);
    let subnets = probe_subnets(cfg);
    let mut files = Vec::new();
    let mut write = |name: &str, contents: String| -> Result<(), CliError> {
        std::fs::write(cfg.out_dir.join(name), contents)?;
        files.push(name.to_string());
        Ok(())
    };

    let mole_ref = model
        .mole
        .as_ref()
        .map(|m| (&m.bank, &m.router, &grp));
    let sim =
        probe::subnet_feature_similarity(&model.weights, mole_ref, &cfg.space, &subnets, &probe_set)?;
    write("sim_matrix.csv", sim.to_csv())?;
    write(
        "sim_matrix.svg",
        probe::heatmap_svg(
            "subnet feature similarity",
            &sim.labels,
            &sim.labels,
            &sim.values,
            -1.0,
            1.0,
        ),
    )?;

    let mut frozen_mean = None;
    let mut expert_mean = None;
    if let Some(parts) = &model.mole {
        let frozen = probe::subnet_feature_similarity(
            &model.weights,
            None,
            &cfg.space,
            &subnets,
            &probe_set,
        )?;
        frozen_mean = Some(frozen.mean_off_diagonal());
        write("sim_matrix_frozen.csv", frozen.to_csv())?;

        let maximal = SubnetConfig::maximal(&cfg.space);
        if parts.bank.expert_count() >= 2 {
            let rows = probe::expert_similarity_by_layer(
                &model.weights,
                &parts.bank,
                &maximal,
                &cfg.space,
                &probe_set,
            )?;
            expert_mean = Some(probe::mean_layer_similarity(&rows));
            write("expert_sim_by_layer.csv", probe::layer_similarity_csv(&rows))?;
        }

        let heat = probe::assignment_heatmap(
            &parts.router,
            &cfg.space,
            &grp,
            ASSIGNMENT_SUBNETS,
            cfg.seed,
        )?;
        write("assignment.csv", heat.to_csv("group", "expert", "weight"))?;
        write(
            "assignment.svg",
            probe::heatmap_svg(
                "router assignment by group",
                &heat.row_labels,
                &heat.col_labels,
                &heat.values,
                0.0,
                1.0,
            ),
        )?;

        let mut mixtures = String::from("subnet,layer,expert,weight\n");
        for s in &subnets {
            let mixture = parts.router.mixture_for(s, &cfg.space, &grp)?;
            let text = s.canonical_text();
            for l in 0..mixture.layer_rows() {
                for (k, &w) in mixture.row(l).iter().enumerate() {
                    mixtures.push_str(&format!("{text},{l},{k},{w:.6}\n"));
                }
            }
        }
        write("mixtures.csv", mixtures)?;

        if with_accuracy {
            let table = probe::accuracy_table(
                &model.weights,
                &parts.bank,
                &parts.router,
                &grp,
                &cfg.space,
                &subnets,
                &train_set,
                &val_set,
                &cfg.train,
            )?;
            write("accuracy_table.csv", table.to_csv())?;
        }
    } else if with_accuracy {
        return Err(CliError::Invalid(
            "accuracy table needs a checkpoint with expert tensors".to_string(),
        ));
    }

    print_summary(&ProbeSummary {
        cmd: "probe",
        checkpoint: path.display().to_string(),
        subnets: subnets.iter().map(|s| s.canonical_text()).collect(),
        mean_offdiag_similarity: sim.mean_off_diagonal(),
        frozen_mean_offdiag_similarity: frozen_mean,
        mean_expert_similarity: expert_mean,
        files,
    });
    Ok(())
}

