//! `genrec` — config-driven pipeline runner: synthesize or ingest a
//! corpus, build semantic IDs, pre-train, build retrieval artifacts,
//! fine-tune, evaluate, probe exposure bias, and run the component
//! ablation grid. Exit codes: 0 ok, 1 user error, 2 internal error.

mod dirs;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dirs::ExperimentDir;
use genrec_core::config::ExperimentConfig;
use genrec_core::corpus;
use genrec_core::experiments::{self, PreparedCorpus, RetrievalArtifacts, Variant};
use genrec_core::retrieval::{self, PreferenceCache};
use genrec_core::semid;
use genrec_core::textembed::{self, Extractor};
use genrec_core::trainer::{self, Model};
use genrec_core::util::seed_for;

#[derive(Parser)]
#[command(name = "genrec", about = "Generative recommendation experiments", version)]
struct Cli {
    /// Experiment config (JSON). Defaults apply for missing keys; unknown
    /// keys are fatal.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Re-run the stage even when its artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,

    /// Experiment directory.
    #[arg(long, global = true, default_value = "exp")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic corpus and write the split manifest.
    SynthData,
    /// Ingest external JSONL interaction + metadata files.
    Ingest {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        meta: PathBuf,
    },
    /// Extract text embeddings and build semantic IDs.
    BuildIds,
    /// Pre-train the dual-encoder / shared-decoder model.
    Pretrain,
    /// Build BM25, collaborative profiles, the preference cache, and
    /// per-user retrieval contexts.
    BuildRetrieval,
    /// Fine-tune the decoder with retrieval-augmented memory.
    Finetune,
    /// Generate recommendations and report ranking metrics.
    Evaluate {
        /// Which checkpoint to evaluate (default: finetune when present).
        #[arg(long)]
        checkpoint: Option<Stage>,
    },
    /// Teacher-forced vs free-running token accuracy per ID level.
    ProbeBias {
        #[arg(long)]
        checkpoint: Option<Stage>,
    },
    /// Run the component on/off grid and print a comparison table.
    Ablate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Pretrain,
    Finetune,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("internal error (panic); re-run with RUST_BACKTRACE=1");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, Option<Vec<u8>>)> {
    let (mut cfg, raw) = match &cli.config {
        Some(path) => {
            let raw = std::fs::read(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            (ExperimentConfig::load(path)?, Some(raw))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, raw))
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, raw_config) = load_config(cli)?;
    let dir = ExperimentDir::create(&cli.out)?;

    // Snapshot the input config byte-for-byte (or the canonical defaults
    // when none was given), plus the resolved view used for hashing.
    match &raw_config {
        Some(raw) => std::fs::write(dir.path("config.json"), raw)?,
        None => cfg.save(&dir.path("config.json"))?,
    }
    cfg.save(&dir.path("config.resolved.json"))?;
    let hash = cfg.hash();

    match &cli.command {
        Command::SynthData => synth_data(&dir, &cfg, cli.force),
        Command::Ingest { interactions, meta } => {
            ingest(&dir, &cfg, interactions, meta, cli.force)
        }
        Command::BuildIds => build_ids(&dir, &cfg, cli.force),
        Command::Pretrain => pretrain_stage(&dir, &cfg, cli.force),
        Command::BuildRetrieval => build_retrieval_stage(&dir, &cfg, cli.force),
        Command::Finetune => finetune_stage(&dir, &cfg, cli.force),
        Command::Evaluate { checkpoint } => evaluate_stage(&dir, &cfg, *checkpoint),
        Command::ProbeBias { checkpoint } => probe_stage(&dir, &cfg, *checkpoint),
        Command::Ablate => ablate_stage(&dir, &cfg),
    }?;
    let _ = hash;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn write_corpus_artifacts(
    dir: &ExperimentDir,
    cfg: &ExperimentConfig,
    corpus: &corpus::Corpus,
) -> Result<()> {
    corpus::write_interactions_jsonl(&dir.path("corpus/interactions.jsonl"), corpus)?;
    corpus::write_meta_jsonl(&dir.path("corpus/meta.jsonl"), corpus)?;
    std::fs::write(
        dir.path("corpus/corpus.json"),
        serde_json::to_string(corpus)?,
    )?;
    let split =
        corpus::split_leave_one_out_with_mode(corpus, cfg.max_seq_len, cfg.popularity_mode_parsed()?)?;
    corpus::write_split_manifest(&dir.path("corpus/splits.json"), &split)?;
    Ok(())
}

fn synth_data(dir: &ExperimentDir, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let hash = cfg.hash();
    if dir.up_to_date("corpus", &hash, force) {
        println!("corpus: up-to-date");
        return Ok(());
    }
    let raw = corpus::synth_generate(&corpus::SynthConfig::new(
        cfg.synth_users,
        cfg.synth_items,
        cfg.synth_clusters,
        cfg.synth_skew,
        seed_for(cfg.seed, "data"),
    ))?;
    let (filtered, report) = corpus::five_core_filter(&raw)?;
    write_corpus_artifacts(dir, cfg, &filtered)?;
    dir.write_stamp("corpus", &hash)?;
    println!(
        "corpus: {} users, {} items, {} interactions ({} users / {} items filtered)",
        filtered.n_users(),
        filtered.n_items(),
        filtered.n_interactions(),
        report.users_removed,
        report.items_removed,
    );
    Ok(())
}

fn ingest(
    dir: &ExperimentDir,
    cfg: &ExperimentConfig,
    interactions: &Path,
    meta: &Path,
    force: bool,
) -> Result<()> {
    let hash = cfg.hash();
    if dir.up_to_date("corpus", &hash, force) {
        println!("corpus: up-to-date");
        return Ok(());
    }
    let raw = corpus::ingest(interactions, meta)?;
    let (filtered, report) = corpus::five_core_filter(&raw)?;
    write_corpus_artifacts(dir, cfg, &filtered)?;
    dir.write_stamp("corpus", &hash)?;
    println!(
        "corpus: {} users, {} items after 5-core ({} users / {} items removed)",
        filtered.n_users(),
        filtered.n_items(),
        report.users_removed,
        report.items_removed,
    );
    Ok(())
}

fn load_corpus(dir: &ExperimentDir) -> Result<corpus::Corpus> {
    let path = dir.path("corpus/corpus.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn build_ids(dir: &ExperimentDir, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let hash = cfg.hash();
    dir.require("corpus", &hash)?;
    if dir.up_to_date("build-ids", &hash, force) {
        println!("build-ids: up-to-date");
        return Ok(());
    }
    let corpus = load_corpus(dir)?;
    let embeddings = textembed::extract_cached(
        &corpus.items,
        &Extractor::DeterministicHash {
            dim: cfg.text_embed_dim,
            seed: seed_for(cfg.seed, "extract"),
        },
        &corpus.content_hash(),
        &dir.path("embeddings"),
    )?;
    let v = cfg.codebook_size.min(corpus.n_items());
    let codebooks = semid::fit_codebooks(&embeddings.matrix, cfg.id_levels, v, cfg.seed)?;
    let assignment = semid::assign_ids(&codebooks, &embeddings.matrix);
    let item_ids: Vec<String> = corpus.items.iter().map(|m| m.id.clone()).collect();
    semid::write_id_manifest(&dir.path("ids/ids.json"), &assignment, &item_ids)?;
    semid::write_codebooks(&dir.path("ids/codebooks"), &codebooks)?;
    dir.write_stamp("build-ids", &hash)?;
    println!(
        "build-ids: {} items, {} levels (+{} disambiguation slots), quantization error {:.4}",
        assignment.ids.len(),
        assignment.k,
        assignment.vocab.n_levels() - assignment.k,
        codebooks.level_errors.last().copied().unwrap_or(0.0),
    );
    Ok(())
}

/// Rebuild the prepared in-memory state from on-disk artifacts.
fn load_prepared(dir: &ExperimentDir, cfg: &ExperimentConfig) -> Result<PreparedCorpus> {
    let corpus = load_corpus(dir)?;
    let split = corpus::split_leave_one_out_with_mode(
        &corpus,
        cfg.max_seq_len,
        cfg.popularity_mode_parsed()?,
    )?;
    let embeddings = textembed::read_embedding_cache(&dir.path("embeddings"))?;
    let codebooks = semid::read_codebooks(&dir.path("ids/codebooks"))?;
    let assignment = semid::assign_ids(&codebooks, &embeddings.matrix);
    Ok(PreparedCorpus {
        split,
        embeddings,
        assignment,
    })
}

fn pretrain_stage(dir: &ExperimentDir, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let hash = cfg.hash();
    dir.require("build-ids", &hash)?;
    if dir.up_to_date("pretrain", &hash, force) {
        println!("pretrain: up-to-date");
        return Ok(());
    }
    let prep = load_prepared(dir, cfg)?;
    let data = prep.data();
    let (model, report) = trainer::pretrain(&data, cfg)?;
    trainer::save_checkpoint(
        &dir.path("checkpoints/pretrain.ckpt"),
        &model.store,
        &hash,
        "pretrain",
    )?;
    trainer::write_training_log(&dir.path("logs/pretrain.csv"), &report)?;
    dir.write_stamp("pretrain", &hash)?;
    let last = report.epochs.last().map(|e| e.val_total).unwrap_or(f64::NAN);
    println!(
        "pretrain: {} epochs, best epoch {} (stop: {:?}), final val loss {:.4}",
        report.epochs.len(),
        report.best_epoch,
        report.stop_reason,
        last,
    );
    Ok(())
}

fn load_model(
    dir: &ExperimentDir,
    cfg: &ExperimentConfig,
    prep: &PreparedCorpus,
    stage: Stage,
) -> Result<Model> {
    let name = match stage {
        Stage::Pretrain => "checkpoints/pretrain.ckpt",
        Stage::Finetune => "checkpoints/finetune.ckpt",
    };
    let loaded = trainer::load_checkpoint(&dir.path(name))?;
    if loaded.config_hash != cfg.hash() {
        bail!(
            "checkpoint {name} was trained with a different config: re-run `{}`",
            match stage {
                Stage::Pretrain => "pretrain",
                Stage::Finetune => "finetune",
            }
        );
    }
    let mut model = Model::new(cfg, &prep.assignment, prep.embeddings.dim());
    model.load_values(&loaded)?;
    Ok(model)
}

fn build_retrieval_stage(dir: &ExperimentDir, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let hash = cfg.hash();
    dir.require("pretrain", &hash)?;
    if dir.up_to_date("build-retrieval", &hash, force) {
        println!("build-retrieval: up-to-date");
        return Ok(());
    }
    let prep = load_prepared(dir, cfg)?;
    let model = load_model(dir, cfg, &prep, Stage::Pretrain)?;
    let artifacts = experiments::build_retrieval(&prep, &model, cfg);
    artifacts.bm25.write(&dir.path("retrieval/bm25.json"))?;
    artifacts.cache.write(&dir.path("retrieval"))?;
    retrieval::write_contexts(&dir.path("retrieval/contexts.json"), &artifacts.contexts)?;
    dir.write_stamp("build-retrieval", &hash)?;
    let forced: usize = artifacts
        .contexts
        .iter()
        .map(|c| c.content.iter().filter(|u| c.collab.contains(u)).count())
        .sum();
    println!(
        "build-retrieval: contexts for {} users (z={}, v={}, {} dual-path hits)",
        artifacts.contexts.len(),
        cfg.retrieve_z,
        cfg.rerank_v,
        forced,
    );
    Ok(())
}

fn load_retrieval(dir: &ExperimentDir, model: &Model) -> Result<RetrievalArtifacts> {
    let bm25 = retrieval::Bm25Index::read(&dir.path("retrieval/bm25.json"))?;
    let cache = PreferenceCache::read(&dir.path("retrieval"))?;
    cache.verify(&model.encoder_hash())?;
    let contexts = retrieval::read_contexts(&dir.path("retrieval/contexts.json"))?;
    Ok(RetrievalArtifacts {
        bm25,
        cache,
        contexts,
    })
}

fn finetune_stage(dir: &ExperimentDir, cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let hash = cfg.hash();
    dir.require("build-retrieval", &hash)?;
    if dir.up_to_date("finetune", &hash, force) {
        println!("finetune: up-to-date");
        return Ok(());
    }
    let prep = load_prepared(dir, cfg)?;
    let mut model = load_model(dir, cfg, &prep, Stage::Pretrain)?;
    let artifacts = load_retrieval(dir, &model)?;
    let data = prep.data();
    let report = trainer::finetune(&mut model, &data, &artifacts.contexts, &artifacts.cache, cfg)?;
    trainer::save_checkpoint(
        &dir.path("checkpoints/finetune.ckpt"),
        &model.store,
        &hash,
        "finetune",
    )?;
    trainer::write_training_log(&dir.path("logs/finetune.csv"), &report)?;
    dir.write_stamp("finetune", &hash)?;
    println!(
        "finetune: {} epochs, best epoch {} (stop: {:?})",
        report.epochs.len(),
        report.best_epoch,
        report.stop_reason,
    );
    Ok(())
}

fn evaluate_stage(
    dir: &ExperimentDir,
    cfg: &ExperimentConfig,
    checkpoint: Option<Stage>,
) -> Result<()> {
    let hash = cfg.hash();
    let stage = match checkpoint {
        Some(s) => s,
        None if dir.stamp_state("finetune", &hash) == dirs::StampState::UpToDate => {
            Stage::Finetune
        }
        None => Stage::Pretrain,
    };
    match stage {
        Stage::Pretrain => dir.require("pretrain", &hash)?,
        Stage::Finetune => dir.require("finetune", &hash)?,
    }
    let prep = load_prepared(dir, cfg)?;
    let model = load_model(dir, cfg, &prep, stage)?;
    let artifacts = match stage {
        Stage::Finetune => Some(load_retrieval(dir, &model)?),
        Stage::Pretrain => None,
    };
    let (report, evals) = experiments::evaluate_model(&model, &prep, cfg, artifacts.as_ref())?;
    genrec_core::evalkit::write_report_json(&dir.path("reports/metrics.json"), &report)?;
    genrec_core::evalkit::write_report_csv(&dir.path("reports/metrics.csv"), &report)?;

    // ranked item-id lists, one user per line
    let mut f = std::fs::File::create(dir.path("reports/recommendations.jsonl"))?;
    for e in &evals {
        let items: Vec<&str> = e
            .ranked
            .iter()
            .map(|&it| prep.split.corpus.items[it].id.as_str())
            .collect();
        let line = serde_json::json!({
            "user": prep.split.corpus.users[e.user].user_id,
            "items": items,
        });
        writeln!(f, "{line}")?;
    }

    println!(
        "evaluate [{}]: H@5 {:.4}  H@10 {:.4}  N@5 {:.4}  N@10 {:.4}  ({} users)",
        match stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        },
        report.overall.h5,
        report.overall.h10,
        report.overall.n5,
        report.overall.n10,
        report.overall.n_users,
    );
    if let (Some(h), Some(t)) = (&report.head, &report.tail) {
        println!(
            "  head: H@10 {:.4} ({} users)   tail: H@10 {:.4} ({} users)",
            h.h10, h.n_users, t.h10, t.n_users
        );
    }
    Ok(())
}

fn probe_stage(dir: &ExperimentDir, cfg: &ExperimentConfig, checkpoint: Option<Stage>) -> Result<()> {
    let hash = cfg.hash();
    let stage = checkpoint.unwrap_or(Stage::Pretrain);
    match stage {
        Stage::Pretrain => dir.require("pretrain", &hash)?,
        Stage::Finetune => dir.require("finetune", &hash)?,
    }
    let prep = load_prepared(dir, cfg)?;
    let model = load_model(dir, cfg, &prep, stage)?;
    let data = prep.data();
    let users: Vec<usize> = (0..prep.split.n_users()).collect();
    let probe = genrec_core::evalkit::exposure_probe(&model, &data, &users)
        .map_err(|e| anyhow!("{e}"))?;
    std::fs::write(
        dir.path("reports/probe.json"),
        serde_json::to_string_pretty(&probe)? + "\n",
    )?;
    println!("probe-bias: per-level teacher-forced vs free-running accuracy");
    for (l, ((tf, fr), gap)) in probe
        .teacher_forced_acc
        .iter()
        .zip(&probe.free_running_acc)
        .zip(&probe.gap)
        .enumerate()
    {
        println!("  level {}: tf {:.4}  fr {:.4}  gap {:+.4}", l + 1, tf, fr, gap);
    }
    println!("  mean gap over levels 2..k: {:+.4}", probe.mean_gap_after_first());
    Ok(())
}

fn ablate_stage(dir: &ExperimentDir, cfg: &ExperimentConfig) -> Result<()> {
    let hash = cfg.hash();
    dir.require("build-ids", &hash)?;
    let prep = load_prepared(dir, cfg)?;
    println!("ablate: training the component grid (4 variants)...");
    let mut rows = Vec::new();
    for variant in Variant::grid() {
        let out = experiments::run_variant(&prep, cfg, variant)?;
        println!(
            "  {:>12}: H@10 {:.4}  N@10 {:.4}",
            out.variant, out.report.overall.h10, out.report.overall.n10
        );
        rows.push(out);
    }
    let table: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "variant": r.variant,
                "h5": r.report.overall.h5,
                "h10": r.report.overall.h10,
                "n5": r.report.overall.n5,
                "n10": r.report.overall.n10,
                "tail_h10": r.report.tail.as_ref().map(|t| t.h10),
                "head_h10": r.report.head.as_ref().map(|h| h.h10),
                "mean_exposure_gap": r.probe.mean_gap_after_first(),
            })
        })
        .collect();
    std::fs::write(
        dir.path("reports/ablation.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;

    println!("\n  {:<14} {:>8} {:>8} {:>10} {:>10}", "variant", "H@10", "N@10", "tail H@10", "gap 2..k");
    for r in &rows {
        println!(
            "  {:<14} {:>8.4} {:>8.4} {:>10.4} {:>+10.4}",
            r.variant,
            r.report.overall.h10,
            r.report.overall.n10,
            r.report.tail.as_ref().map(|t| t.h10).unwrap_or(f64::NAN),
            r.probe.mean_gap_after_first(),
        );
    }
    Ok(())
}
