//! End-to-end experiment plumbing shared by the CLI and the acceptance
//! suite: corpus preparation, the component on/off grid, and full
//! pretrain → (retrieval) → (fine-tune) → evaluate runs.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{
    build_pseudo_documents, five_core_filter, split_leave_one_out_with_mode, synth_generate,
    SplitDataset, SynthConfig,
};
use crate::error::Result;
use crate::evalkit::{exposure_probe, group_report, ExposureProbe, MetricsReport, PerUserEval};
use crate::retrieval::{
    build_cache, build_contexts, train_collab_encoder, Bm25Index, PreferenceCache,
    RetrievalContext,
};
use crate::semid::{assign_ids, fit_codebooks, IdAssignment};
use crate::textembed::{extract, Extractor, TextEmbeddings};
use crate::trainer::{finetune, infer, pretrain, Model, TrainData, TrainReport};
use crate::util::seed_for;

/// Which plugin components are active. The grid rows are cumulative:
/// nothing, dual-view alignment, + substitution guidance, + retrieval
/// augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub dsa: bool,
    pub ssg: bool,
    pub rar: bool,
}

impl Variant {
    pub const BACKBONE: Variant = Variant {
        dsa: false,
        ssg: false,
        rar: false,
    };
    pub const DSA: Variant = Variant {
        dsa: true,
        ssg: false,
        rar: false,
    };
    pub const DSA_SSG: Variant = Variant {
        dsa: true,
        ssg: true,
        rar: false,
    };
    pub const FULL: Variant = Variant {
        dsa: true,
        ssg: true,
        rar: true,
    };

    pub fn grid() -> [Variant; 4] {
        [Self::BACKBONE, Self::DSA, Self::DSA_SSG, Self::FULL]
    }

    pub fn name(&self) -> String {
        match (self.dsa, self.ssg, self.rar) {
            (false, _, _) => "backbone".into(),
            (true, false, _) => "dsa".into(),
            (true, true, false) => "dsa+ssg".into(),
            (true, true, true) => "dsa+ssg+rar".into(),
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        cfg.use_language_view = self.dsa;
        cfg.ssg_enabled = self.dsa && self.ssg;
    }
}

/// Everything derived from the raw corpus before any training: the
/// filtered split, frozen text embeddings, and semantic IDs.
pub struct PreparedCorpus {
    pub split: SplitDataset,
    pub embeddings: TextEmbeddings,
    pub assignment: IdAssignment,
}

impl PreparedCorpus {
    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            split: &self.split,
            embeddings: &self.embeddings,
            assignment: &self.assignment,
        }
    }
}

/// Synthetic corpus → 5-core → leave-one-out split → embeddings → IDs.
pub fn prepare_synthetic(cfg: &ExperimentConfig) -> Result<PreparedCorpus> {
    let corpus = synth_generate(&SynthConfig::new(
        cfg.synth_users,
        cfg.synth_items,
        cfg.synth_clusters,
        cfg.synth_skew,
        seed_for(cfg.seed, "data"),
    ))?;
    let (corpus, _) = five_core_filter(&corpus)?;
    prepare_from_corpus(cfg, &corpus)
}

/// Split and derive artifacts from an already-filtered corpus.
pub fn prepare_from_corpus(
    cfg: &ExperimentConfig,
    corpus: &crate::corpus::Corpus,
) -> Result<PreparedCorpus> {
    let split =
        split_leave_one_out_with_mode(corpus, cfg.max_seq_len, cfg.popularity_mode_parsed()?)?;
    let embeddings = extract(
        &split.corpus.items,
        &Extractor::DeterministicHash {
            dim: cfg.text_embed_dim,
            seed: seed_for(cfg.seed, "extract"),
        },
        &split.corpus.content_hash(),
    )?;
    let v = cfg.codebook_size.min(split.n_items());
    let codebooks = fit_codebooks(&embeddings.matrix, cfg.id_levels, v, cfg.seed)?;
    let assignment = assign_ids(&codebooks, &embeddings.matrix);
    Ok(PreparedCorpus {
        split,
        embeddings,
        assignment,
    })
}

/// Retrieval artifacts built against a frozen pre-trained model.
pub struct RetrievalArtifacts {
    pub bm25: Bm25Index,
    pub cache: PreferenceCache,
    pub contexts: Vec<RetrievalContext>,
}

pub fn build_retrieval(
    prep: &PreparedCorpus,
    model: &Model,
    cfg: &ExperimentConfig,
) -> RetrievalArtifacts {
    let docs = build_pseudo_documents(&prep.split);
    let bm25 = Bm25Index::build(&docs);
    let profiles = train_collab_encoder(
        &prep.split,
        cfg.collab_dim,
        cfg.collab_layers,
        cfg.collab_epochs,
        cfg.collab_lr,
        seed_for(cfg.seed, "collab"),
    );
    let cache = build_cache(
        |u| model.preference_q(&prep.assignment, &prep.split.user_splits[u].train),
        prep.split.n_users(),
        &model.encoder_hash(),
    );
    let contexts = build_contexts(&bm25, &profiles, &cache, cfg.retrieve_z, cfg.rerank_v);
    RetrievalArtifacts {
        bm25,
        cache,
        contexts,
    }
}

/// Evaluate a model on every user's test target.
pub fn evaluate_model(
    model: &Model,
    prep: &PreparedCorpus,
    cfg: &ExperimentConfig,
    retrieval: Option<&RetrievalArtifacts>,
) -> Result<(MetricsReport, Vec<PerUserEval>)> {
    let data = prep.data();
    let users: Vec<usize> = (0..prep.split.n_users()).collect();
    let generations = infer(
        model,
        &data,
        &users,
        retrieval.map(|r| r.contexts.as_slice()),
        retrieval.map(|r| &r.cache),
        cfg.beam_width,
    )?;
    let evals: Vec<PerUserEval> = users
        .iter()
        .zip(&generations)
        .map(|(&u, recs)| PerUserEval {
            user: u,
            ranked: recs.iter().map(|s| s.item).collect(),
            target: prep.split.user_splits[u].test,
        })
        .collect();
    let report = group_report(&evals, &prep.split, cfg.popularity_bins)?;
    Ok((report, evals))
}

#[derive(Serialize)]
pub struct VariantOutcome {
    pub variant: String,
    pub report: MetricsReport,
    #[serde(skip)]
    pub evals: Vec<PerUserEval>,
    pub probe: ExposureProbe,
    #[serde(skip)]
    pub train_report: TrainReport,
}

/// Pretrain (per the variant's toggles), optionally build retrieval and
/// fine-tune, then evaluate and probe.
pub fn run_variant(
    prep: &PreparedCorpus,
    base_cfg: &ExperimentConfig,
    variant: Variant,
) -> Result<VariantOutcome> {
    let mut cfg = base_cfg.clone();
    variant.apply(&mut cfg);
    let data = prep.data();
    let (mut model, train_report) = pretrain(&data, &cfg)?;

    let retrieval = if variant.rar {
        let artifacts = build_retrieval(prep, &model, &cfg);
        finetune(&mut model, &data, &artifacts.contexts, &artifacts.cache, &cfg)?;
        Some(artifacts)
    } else {
        None
    };

    let (report, evals) = evaluate_model(&model, prep, &cfg, retrieval.as_ref())?;
    let users: Vec<usize> = (0..prep.split.n_users()).collect();
    let probe = exposure_probe(&model, &data, &users)?;
    Ok(VariantOutcome {
        variant: variant.name(),
        report,
        evals,
        probe,
        train_report,
    })
}
