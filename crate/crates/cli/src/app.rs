//! Argument parsing and the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use seco_core::checkpoint;
use seco_core::config::RunConfig;
use seco_core::dataset::Split;
use seco_core::evaluation::{
    feature_dim, lift_the_flap, memory_probe, priming_map, read_map, rmse, train_probe, write_map, LinearProbe,
    ProbedModel,
};
use seco_core::humanmaps::{clicks_to_map, human_agreement, read_logs, validate_log, ClickLog};
use seco_core::model::SecoModel;
use seco_core::pairs::PairRecord;
use seco_core::synthworld::generate_dataset;
use seco_core::trainer::{fit, FitOptions};
use serde_json::json;

use crate::server::{serve, Collection, Manifest};

#[derive(Parser, Debug)]
#[command(name = "seco", version, about = "Context-object association learning: data, training and evaluation")]
pub struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset applied before `--set` (repeatable).
    #[arg(long = "preset", value_name = "NAME")]
    pub presets: Vec<String>,
    /// Dotted-path override such as `trainer.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic train and test splits.
    SynthGen {
        #[arg(long)]
        overwrite: bool,
    },
    /// Discover regions of interest on a split and write the pair list.
    MakePairs {
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Train the model on the pair list.
    Train {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Fit a linear classifier on flapped training contexts.
    Probe {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Lift-the-flap accuracy on a split.
    FlapEval {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        probe: Option<PathBuf>,
        /// Freshly initialized model with an all-zero probe.
        #[arg(long)]
        untrained: bool,
    },
    /// Occlusion priming map of one image for one class.
    PrimingMap {
        #[arg(long)]
        image: u64,
        #[arg(long)]
        class: String,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// RMSE between two map blobs.
    CompareMaps {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Pairwise KL matrix of per-class memory slot usage.
    MemoryProbe {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Turn click logs into human priming maps.
    ProcessClicks {
        #[arg(long)]
        logs: PathBuf,
    },
    /// Run the click-collection HTTP service.
    ServeCollection {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen { .. } => "synth-gen",
            Command::MakePairs { .. } => "make-pairs",
            Command::Train { .. } => "train",
            Command::Probe { .. } => "probe",
            Command::FlapEval { .. } => "flap-eval",
            Command::PrimingMap { .. } => "priming-map",
            Command::CompareMaps { .. } => "compare-maps",
            Command::MemoryProbe { .. } => "memory-probe",
            Command::ProcessClicks { .. } => "process-clicks",
            Command::ServeCollection { .. } => "serve-collection",
        }
    }
}

/// Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let invalid = err.chain().any(|e| {
        matches!(e.downcast_ref::<seco_core::Error>(), Some(seco_core::Error::InvalidConfig(_)))
    });
    if invalid {
        1
    } else {
        2
    }
}

pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Loads the config, applies presets then overrides, and validates.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for p in &cli.presets {
        cfg.apply_preset(p)?;
    }
    for s in &cli.overrides {
        cfg.apply_override(s)?;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    if cli.print_config || cli.command.is_none() {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let command = cli.command.expect("checked above");
    let out = cfg.output_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    record_run(&out, command.name(), &cfg)?;
    let paths = Layout { out: out.clone() };

    match command {
        Command::SynthGen { overwrite } => {
            let m = generate_dataset(
                &cfg.synthworld.world,
                cfg.synthworld.train_images as usize,
                cfg.synthworld.test_images as usize,
                &paths.synth(),
                overwrite,
            )?;
            println!(
                "wrote {} train and {} test scenes to {} (bayes accuracy {:.4})",
                m.train.count,
                m.test.count,
                paths.synth().display(),
                m.bayes_optimal_accuracy
            );
        }
        Command::MakePairs { split } => {
            let split = load_split(&split.unwrap_or_else(|| paths.train_split()))?;
            let records = split.propose(&cfg.pairs, cfg.seed)?;
            PairRecord::write_jsonl(&records, &paths.pairs())?;
            println!("{} pairs from {} images -> {}", records.len(), split.len(), paths.pairs().display());
        }
        Command::Train { split, pairs } => {
            let split = load_split(&split.unwrap_or_else(|| paths.train_split()))?;
            let pairs_path = pairs.unwrap_or_else(|| paths.pairs());
            let records = PairRecord::read_jsonl(&pairs_path).with_context(|| format!("reading {}", pairs_path.display()))?;
            let data = split.pair_set(&records)?;
            let outcome = fit(
                &data,
                &FitOptions {
                    model: &cfg.model,
                    train: &cfg.trainer,
                    augment: &cfg.augment,
                    weights: &cfg.objective,
                    out_dir: Some(&paths.train()),
                },
            )?;
            println!(
                "trained {} steps; final mean std of s_c {:.4}; checkpoint {}",
                outcome.log.len(),
                outcome.final_std_c(),
                paths.checkpoint().display()
            );
        }
        Command::Probe { split, checkpoint } => {
            let split = load_split(&split.unwrap_or_else(|| paths.train_split()))?;
            let model = load_model(&checkpoint.unwrap_or_else(|| paths.checkpoint()))?;
            let samples = split.flap_samples()?;
            let probe = train_probe(&model, &split, &samples, &cfg.evaluation.probe, &cfg.augment)?;
            probe.save(&paths.probe())?;
            let report = lift_the_flap(&model, &probe, &split, &samples, &cfg.augment)?;
            println!("probe trained on {} flaps (train accuracy {:.4}) -> {}", samples.len(), report.accuracy, paths.probe().display());
        }
        Command::FlapEval { split, checkpoint, probe, untrained } => {
            let split = load_split(&split.unwrap_or_else(|| paths.test_split()))?;
            let (model, probe) = if untrained {
                let model = SecoModel::<f32>::new(&cfg.model, cfg.seed)?;
                let mode = cfg.evaluation.probe.input_mode;
                let probe = LinearProbe::zeros(feature_dim(&model, mode), split.class_names(), mode);
                (model, probe)
            } else {
                let model = load_model(&checkpoint.unwrap_or_else(|| paths.checkpoint()))?;
                (model, LinearProbe::load(&probe.unwrap_or_else(|| paths.probe()))?)
            };
            let report = lift_the_flap(&model, &probe, &split, &split.flap_samples()?, &cfg.augment)?;
            fs::write(paths.out.join("flap_eval.json"), serde_json::to_vec_pretty(&report)?)?;
            println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
        }
        Command::PrimingMap { image, class, split, checkpoint, probe } => {
            let split = load_split(&split.unwrap_or_else(|| paths.test_split()))?;
            let model = load_model(&checkpoint.unwrap_or_else(|| paths.checkpoint()))?;
            let probe = LinearProbe::load(&probe.unwrap_or_else(|| paths.probe()))?;
            let index = split
                .annotations
                .images
                .iter()
                .position(|e| e.id == image)
                .ok_or_else(|| seco_core::Error::InvalidConfig(vec![format!("image {image} is not in the split")]))?;
            let class_index = probe
                .class_index(&class)
                .map_err(|_| seco_core::Error::InvalidConfig(vec![format!("probe has no class {class:?}")]))?;
            let scorer = ProbedModel {
                model: &model,
                probe: &probe,
                augment: &cfg.augment,
            };
            let map = priming_map(&scorer, &split.images[index], class_index, &cfg.evaluation.grids)?;
            let stem = paths.out.join("maps").join(format!("priming_{image}_{class}"));
            write_map(&map, &stem)?;
            println!("wrote {}.bin and .png", stem.display());
        }
        Command::CompareMaps { a, b } => {
            let (a, b) = (read_map(&a)?, read_map(&b)?);
            println!("rmse {:?}", rmse(a.view(), b.view())?);
        }
        Command::MemoryProbe { split, checkpoint } => {
            let split = load_split(&split.unwrap_or_else(|| paths.test_split()))?;
            let model = load_model(&checkpoint.unwrap_or_else(|| paths.checkpoint()))?;
            let kl = memory_probe(&model, &split, &split.flap_samples()?, &cfg.augment)?;
            let stem = paths.out.join("memory_kl");
            kl.write(&stem)?;
            // Needs at least one context with two classes.
            if let Some(Ok((within, between))) = context_groups(&split)?.map(|g| kl.grouped_means(&g)) {
                println!("mean KL within context {within:.4}, between contexts {between:.4}");
            }
            println!("wrote {}.csv and .png", stem.display());
        }
        Command::ProcessClicks { logs } => {
            let summary = process_clicks(&read_logs(&logs)?, &cfg, &paths.out.join("human_maps"))?;
            println!("{} maps, {} invalid trials skipped", summary.maps, summary.skipped);
        }
        Command::ServeCollection { split, manifest, log, port } => {
            let split = load_split(&split.unwrap_or_else(|| paths.test_split()))?;
            let manifest = match manifest {
                Some(p) => Manifest::load(&p)?,
                None => Manifest::from_split(&split),
            };
            fs::write(paths.out.join("collection_manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
            let log = log.unwrap_or_else(|| paths.out.join("clicks.jsonl"));
            let collection = Arc::new(Collection::new(&split, manifest, &log)?);
            tokio::runtime::Runtime::new()?.block_on(serve(collection, port))?;
        }
    }
    Ok(())
}

struct Layout {
    out: PathBuf,
}

impl Layout {
    fn synth(&self) -> PathBuf {
        self.out.join("synth")
    }
    fn train_split(&self) -> PathBuf {
        self.synth().join("train")
    }
    fn test_split(&self) -> PathBuf {
        self.synth().join("test")
    }
    fn pairs(&self) -> PathBuf {
        self.out.join("pairs.jsonl")
    }
    fn train(&self) -> PathBuf {
        self.out.join("train")
    }
    fn checkpoint(&self) -> PathBuf {
        self.train().join("checkpoint")
    }
    fn probe(&self) -> PathBuf {
        self.out.join("probe.json")
    }
}

fn load_split(dir: &Path) -> Result<Split> {
    Split::load(dir).with_context(|| format!("loading split {}", dir.display()))
}

fn load_model(dir: &Path) -> Result<SecoModel<f32>> {
    Ok(checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?.0)
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Adds this subcommand's provenance to `run.json`, keeping the others.
fn record_run(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let path = out.join("run.json");
    let mut runs: BTreeMap<String, serde_json::Value> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    runs.insert(
        command.to_string(),
        json!({
            "config_sha256": cfg.sha256(),
            "git_revision": git_revision(),
            "seed": cfg.seed,
            "config": cfg,
        }),
    );
    fs::write(&path, serde_json::to_vec_pretty(&runs)?)?;
    Ok(())
}

/// Class index to the context it most often appears in, when the split
/// records contexts.
fn context_groups(split: &Split) -> Result<Option<Vec<usize>>> {
    let Some(contexts) = split.contexts() else {
        return Ok(None);
    };
    let classes = split.class_names();
    let n_ctx = contexts.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; n_ctx]; classes.len()];
    for s in split.flap_samples()? {
        counts[s.label][contexts[s.image]] += 1;
    }
    Ok(Some(
        counts
            .iter()
            .map(|row| row.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i))).map_or(0, |(i, _)| i))
            .collect(),
    ))
}

pub struct ClickSummary {
    pub maps: usize,
    pub skipped: usize,
}

/// One map per image/target pair from its valid trials, plus per-pair
/// subject agreement in `summary.json`.
pub fn process_clicks(logs: &[ClickLog], cfg: &RunConfig, dir: &Path) -> Result<ClickSummary> {
    if logs.is_empty() {
        bail!(seco_core::Error::Empty("click logs"));
    }
    let mut groups: BTreeMap<(u64, String), Vec<ClickLog>> = BTreeMap::new();
    let mut skipped = 0;
    for log in logs {
        let v = validate_log(log);
        if v.is_empty() {
            groups.entry((log.image_id, log.target_class.clone())).or_default().push(log.clone());
        } else {
            log::warn!(
                "skipping trial of {} on image {}: {}",
                log.subject_id,
                log.image_id,
                v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
            );
            skipped += 1;
        }
    }
    fs::create_dir_all(dir)?;
    let mut summary = Vec::new();
    for ((image, class), group) in &groups {
        let map = clicks_to_map(group, &cfg.humanmaps)?;
        write_map(&map, &dir.join(format!("{image}_{class}")))?;
        let agreement = if group.len() >= 2 {
            let subject_maps = group
                .iter()
                .map(|l| clicks_to_map(std::slice::from_ref(l), &cfg.humanmaps))
                .collect::<seco_core::Result<Vec<_>>>()?;
            Some(human_agreement(&subject_maps)?)
        } else {
            None
        };
        summary.push(json!({
            "image_id": image,
            "target_class": class,
            "subjects": group.len(),
            "clicks": group.iter().map(|l| l.clicks.len()).sum::<usize>(),
            "human_agreement": agreement,
        }));
    }
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(ClickSummary {
        maps: groups.len(),
        skipped,
    })
}
