//! One function per subcommand. Each reads its inputs from the run
//! directory and writes its artifacts next to them.

use std::collections::HashMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crosscoherence::crosscoherence::{fit, RunMetadata, ScorerConfig, ShapeInput};
use crosscoherence::datasets::{generate_synthetic, load_manifest, save_manifest, AttributeOracle, DatasetManifest, Split};
use crosscoherence::distractors::{load_jsonl, save_jsonl, MiningConfig, MiningOutput, Role, Triplet};
use crosscoherence::encoders::autoencoder::{AutoencoderConfig, ReconstructionLoss};
use crosscoherence::encoders::{
    load_checkpoint, save_checkpoint, train_autoencoder, BuiltinTextConfig, BuiltinTextEncoder, EncoderConfig,
    FileEmbeddings, TextProvider, Vocabulary,
};
use crosscoherence::pipeline::{self, split_name, SPLITS};
use crosscoherence::protocols::{
    eval_pairwise as run_pairwise, eval_rprecision as run_rprecision, render_table, ModelScorer, RandomScorer, Scorer,
};
use crosscoherence::refine::{refine_captions, CompletionProvider, LiveProvider, MockProvider, PromptCache, RefineRun};
use crosscoherence::{CrossCoherenceModel, EvalReport, ParamStore};

use crate::config::{ProviderKind, RunConfig};
use crate::workspace::{read_json, write_json, Workspace};
use crate::ScorerKind;

fn open_manifest(ws: &Workspace) -> Result<DatasetManifest> {
    let path = ws.manifest();
    if !path.exists() {
        bail!(
            "manifest {} does not exist; run `gen-synthetic` first or pass --manifest",
            path.display()
        );
    }
    Ok(load_manifest(&path)?)
}

pub fn gen_synthetic(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    let synth = cfg.synthetic.resolve(cfg.seed);
    let manifest = generate_synthetic(&synth, &ws.data_dir())?;
    if ws.manifest() != ws.data_dir().join("manifest.jsonl") {
        save_manifest(&manifest, &ws.manifest())?;
    }
    let count = |s| manifest.split(s).count();
    log::info!(
        "wrote {} shapes to {} (train {}, val {}, test {})",
        manifest.records.len(),
        ws.data_dir().display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AutoencoderMeta {
    config: AutoencoderConfig,
    initial_loss: Option<ReconstructionLoss>,
    final_loss: ReconstructionLoss,
    training_shapes: usize,
    run: RunConfig,
}

fn ae_config(cfg: &RunConfig) -> AutoencoderConfig {
    AutoencoderConfig {
        encoder: cfg.encoder.clone(),
        decoder: cfg.autoencoder.decoder.clone(),
        color_weight: cfg.autoencoder.color_weight,
        steps: cfg.autoencoder.steps,
        batch_size: cfg.autoencoder.batch_size,
        learning_rate: cfg.autoencoder.learning_rate,
        seed: cfg.seed,
        zero_final_layer: false,
    }
}

pub fn train_ae(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    let manifest = open_manifest(ws)?;
    let clouds = manifest
        .split(Split::Train)
        .map(|r| manifest.load_cloud(&r.shape_id))
        .collect::<crosscoherence::Result<Vec<_>>>()?;
    let config = ae_config(cfg);
    let run = train_autoencoder(&clouds, &config)?;
    save_checkpoint(&run.params, &ws.autoencoder_ckpt())?;
    let meta = AutoencoderMeta {
        config,
        initial_loss: run.history.first().map(|s| s.loss),
        final_loss: run.final_loss,
        training_shapes: clouds.len(),
        run: cfg.clone(),
    };
    write_json(&ws.autoencoder_meta(), &meta)?;
    log::info!(
        "autoencoder trained on {} shapes, final loss {:.4}; saved {}",
        clouds.len(),
        run.final_loss.total,
        ws.autoencoder_ckpt().display()
    );
    Ok(())
}

fn load_autoencoder(ws: &Workspace) -> Result<(ParamStore, EncoderConfig)> {
    let path = ws.autoencoder_ckpt();
    if !path.exists() {
        bail!("autoencoder checkpoint {} does not exist; run `train-ae` first", path.display());
    }
    let meta: AutoencoderMeta = read_json(&ws.autoencoder_meta())?;
    Ok((load_checkpoint(&path)?, meta.config.encoder))
}

#[derive(Debug, Serialize, Deserialize)]
struct MiningMeta {
    config: MiningConfig,
    splits: Vec<(String, MiningOutput)>,
}

pub fn mine(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    let mut manifest = open_manifest(ws)?;
    let (params, encoder) = load_autoencoder(ws)?;
    let latents = pipeline::manifest_latents(&manifest, &params, &encoder)?;
    let config = MiningConfig {
        seed: cfg.seed,
        easy_percentile: cfg.mining.easy_percentile,
    };
    let outputs = pipeline::mine_by_split(&mut manifest, &latents, &config)?;
    save_manifest(&manifest, &ws.manifest())?;
    let sets: Vec<_> = outputs.iter().flat_map(|(_, o)| o.sets.iter().cloned()).collect();
    save_jsonl(&sets, &ws.distractors())?;
    for (split, out) in &outputs {
        for skipped in &out.skipped {
            log::warn!(
                "{}: class `{}` skipped ({} shapes, {})",
                split_name(*split),
                skipped.class_label,
                skipped.members,
                skipped.reason
            );
        }
    }
    let meta = MiningMeta {
        config,
        splits: outputs.into_iter().map(|(s, o)| (split_name(s).to_string(), o)).collect(),
    };
    write_json(&ws.mining_meta(), &meta)?;
    log::info!("mined {} distractor sets; updated {}", sets.len(), ws.manifest().display());
    Ok(())
}

pub fn build_triplets(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    let manifest = open_manifest(ws)?;
    if manifest.records.iter().all(|r| r.distractors.is_none()) {
        bail!("manifest {} has no distractor sets; run `mine` first", ws.manifest().display());
    }
    for split in SPLITS {
        let triplets = pipeline::split_triplets(&manifest, split, cfg.triplets.group_size, cfg.seed)?;
        save_jsonl(&triplets, &ws.triplets(split_name(split)))?;
        log::info!("{}: {} triplets", split_name(split), triplets.len());
    }
    Ok(())
}

fn load_triplets(ws: &Workspace, split: Split) -> Result<Vec<Triplet>> {
    let path = ws.triplets(split_name(split));
    if !path.exists() {
        bail!("triplet file {} does not exist; run `build-triplets` first", path.display());
    }
    Ok(load_jsonl(&path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TextSpec {
    Builtin { config: BuiltinTextConfig, trainable: bool },
    File { path: std::path::PathBuf },
}

#[derive(Debug, Serialize, Deserialize)]
struct ScorerMeta {
    scorer: ScorerConfig,
    encoder: EncoderConfig,
    text: TextSpec,
    metadata: RunMetadata,
    run: RunConfig,
}

fn scorer_config(cfg: &RunConfig, encoder: &EncoderConfig, text_dim: usize) -> ScorerConfig {
    ScorerConfig {
        attention: cfg.scorer.attention,
        depth: cfg.scorer.depth,
        head_widths: cfg.scorer.head_widths.clone(),
        shape_dim: encoder.local_width(),
        region_positions: cfg.scorer.region_positions,
        shape_hidden: cfg.scorer.shape_hidden.clone(),
        text_dim,
        zero_init_head: true,
        freeze_encoder: true,
    }
}

fn text_provider(text_spec: &TextSpec, vocab: Option<Vocabulary>) -> Result<TextProvider> {
    Ok(match text_spec {
        TextSpec::Builtin { config, trainable } => TextProvider::Builtin(BuiltinTextEncoder {
            vocab: vocab.context("built-in text encoder needs a vocabulary")?,
            config: config.clone(),
            frozen: !trainable,
        }),
        TextSpec::File { path } => TextProvider::File(FileEmbeddings::load(path)?),
    })
}

pub fn train_cc(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    let manifest = open_manifest(ws)?;
    let (ae_params, encoder) = load_autoencoder(ws)?;
    let train = load_triplets(ws, Split::Train)?;
    let val: Vec<Triplet> = load_triplets(ws, Split::Val)?.iter().flat_map(Triplet::pairs).collect();
    let (text_spec, vocab) = match &cfg.scorer.embeddings {
        Some(path) => (TextSpec::File { path: path.clone() }, None),
        None => (
            TextSpec::Builtin {
                config: cfg.scorer.text.clone(),
                trainable: cfg.scorer.train_text,
            },
            Some(pipeline::caption_vocabulary(&manifest, &[Split::Train])),
        ),
    };
    if let Some(v) = &vocab {
        v.save(&ws.scorer_vocab())?;
    }
    let text = text_provider(&text_spec, vocab)?;
    let config = scorer_config(cfg, &encoder, text.dim());
    let mut model = CrossCoherenceModel::new(config, encoder.clone(), text, Some(&ae_params), cfg.seed)?;
    let ids = pipeline::referenced_ids(&[train.as_slice(), val.as_slice()].concat());
    let shapes = pipeline::shape_inputs(&model, &manifest, &ids)?;
    calibrate(&mut model, &manifest, &shapes)?;
    let out = fit(model, &train, &val, &shapes, &cfg.fit.resolve(cfg.seed))?;
    save_checkpoint(&out.model.params, &ws.scorer_ckpt())?;
    log::info!(
        "best validation accuracy {:.4} at epoch {}; saved {}",
        out.metadata.best_val_accuracy,
        out.metadata.best_epoch,
        ws.scorer_ckpt().display()
    );
    let meta = ScorerMeta {
        scorer: out.model.config.clone(),
        encoder,
        text: text_spec,
        metadata: out.metadata,
        run: cfg.clone(),
    };
    write_json(&ws.scorer_meta(), &meta)
}

/// Fits the shape-feature normalization on the training shapes.
fn calibrate(model: &mut CrossCoherenceModel, manifest: &DatasetManifest, shapes: &HashMap<String, ShapeInput>) -> Result<()> {
    let train_ids: Vec<&str> = manifest
        .split(Split::Train)
        .map(|r| r.shape_id.as_str())
        .filter(|id| shapes.contains_key(*id))
        .collect();
    let features = train_ids
        .iter()
        .map(|id| match &shapes[*id] {
            ShapeInput::Features(f) => Ok(f.as_ref().clone()),
            ShapeInput::Cloud(c) => Ok(model.local_features(c)?),
        })
        .collect::<crosscoherence::Result<Vec<_>>>()?;
    model.calibrate_shape_norm(&features)?;
    Ok(())
}

fn load_model(ws: &Workspace) -> Result<CrossCoherenceModel> {
    let path = ws.scorer_ckpt();
    if !path.exists() {
        bail!("scorer checkpoint {} does not exist; run `train-cc` first", path.display());
    }
    let meta: ScorerMeta = read_json(&ws.scorer_meta())?;
    let vocab = match meta.text {
        TextSpec::Builtin { .. } => Some(Vocabulary::load(&ws.scorer_vocab())?),
        TextSpec::File { .. } => None,
    };
    let text = text_provider(&meta.text, vocab)?;
    Ok(CrossCoherenceModel::from_params(meta.scorer, meta.encoder, text, load_checkpoint(&path)?)?)
}

/// Runs `f` with the requested scorer over the shapes in `ids`.
fn with_scorer<T>(
    ws: &Workspace,
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    kind: ScorerKind,
    ids: &[String],
    f: impl FnOnce(&dyn Scorer) -> Result<T>,
) -> Result<T> {
    match kind {
        ScorerKind::Model => {
            let model = load_model(ws)?;
            let shapes = pipeline::shape_inputs(&model, manifest, ids)?;
            f(&ModelScorer {
                model: &model,
                shapes: &shapes,
            })
        }
        ScorerKind::Oracle => {
            let attributes = manifest.attributes();
            if attributes.is_empty() {
                bail!("the oracle scorer needs shape attributes; {} has none", ws.manifest().display());
            }
            f(&AttributeOracle::new(attributes))
        }
        ScorerKind::Random => f(&RandomScorer { seed: cfg.seed }),
    }
}

pub fn eval_pairwise(ws: &Workspace, cfg: &RunConfig, kind: ScorerKind) -> Result<Vec<EvalReport>> {
    let manifest = open_manifest(ws)?;
    let split = cfg.eval.split.split();
    let triplets = load_triplets(ws, split)?;
    let (pairs, dropped) = if cfg.eval.unambiguous_only {
        pipeline::unambiguous_pairs(&manifest, &triplets)?
    } else {
        (triplets.iter().flat_map(Triplet::pairs).collect(), 0)
    };
    if pairs.is_empty() {
        bail!("no {} pairs to evaluate", split_name(split));
    }
    let ids = pipeline::referenced_ids(&pairs);
    let name = kind.name();
    let reports = with_scorer(ws, cfg, &manifest, kind, &ids, |scorer| {
        let mut reports = vec![run_pairwise(scorer, &pairs)?.with_label(format!("{name}/{}/all", split_name(split)))];
        for (role, tag) in [(Role::Hard, "hard"), (Role::Easy, "easy")] {
            let subset = pipeline::pairs_with_role(&pairs, role);
            if !subset.is_empty() {
                reports.push(run_pairwise(scorer, &subset)?.with_label(format!("{name}/{}/{tag}", split_name(split))));
            }
        }
        Ok(reports)
    })?;
    if dropped > 0 {
        log::info!("{dropped} ambiguous pairs left out");
    }
    let path = ws.eval_dir().join(format!("pairwise-{name}.json"));
    write_json(&path, &reports)?;
    println!("{}", render_table(&reports));
    Ok(reports)
}

pub fn eval_rprecision(ws: &Workspace, cfg: &RunConfig, kind: ScorerKind) -> Result<Vec<EvalReport>> {
    let manifest = open_manifest(ws)?;
    let split = cfg.eval.split.split();
    let pairs = pipeline::retrieval_pairs(&manifest, split);
    let pool = pipeline::caption_pool(&manifest, split);
    if pairs.is_empty() {
        bail!("the {} split has no captioned shapes", split_name(split));
    }
    let ids: Vec<String> = manifest.split(split).map(|r| r.shape_id.clone()).collect();
    let name = kind.name();
    let report = with_scorer(ws, cfg, &manifest, kind, &ids, |scorer| {
        Ok(run_rprecision(scorer, &pairs, &pool, cfg.eval.set_size, cfg.seed)?
            .with_label(format!("{name}/{}", split_name(split))))
    })?;
    let reports = vec![report];
    write_json(&ws.eval_dir().join(format!("rprecision-{name}.json")), &reports)?;
    println!("{}", render_table(&reports));
    Ok(reports)
}

pub fn refine(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    let manifest = open_manifest(ws)?;
    let refine_cfg = cfg.refine.resolve();
    let provider: Box<dyn CompletionProvider> = match cfg.refine.provider {
        ProviderKind::Mock => Box::new(MockProvider::new(refine_cfg.template.clone())),
        ProviderKind::Live => Box::new(LiveProvider::new(cfg.refine.live.clone())),
    };
    let cache = PromptCache::open(ws.refine_dir().join("cache"))?;
    let run: RefineRun = refine_captions(&manifest, provider.as_ref(), Some(&cache), &refine_cfg);
    write_json(&ws.refine_dir().join("results.json"), &run)?;
    log::info!(
        "refined {} shapes: {} provider calls, {} cache hits, {} failures",
        run.outcomes.len(),
        run.provider_calls,
        run.cache_hits,
        run.failures()
    );
    if run.failures() == run.outcomes.len() && !run.outcomes.is_empty() {
        bail!("every refinement failed; see {}", ws.refine_dir().join("results.json").display());
    }
    Ok(())
}

pub fn report(ws: &Workspace) -> Result<()> {
    let dir = ws.eval_dir();
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .with_context(|| format!("cannot read {}; run an evaluation first", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut reports = Vec::new();
    for path in files {
        let batch: Vec<EvalReport> = read_json(&path)?;
        reports.extend(batch);
    }
    if reports.is_empty() {
        bail!("no evaluation reports in {}", dir.display());
    }
    let table = render_table(&reports);
    std::fs::write(ws.report(), format!("# Evaluation\n\n```\n{table}```\n"))
        .with_context(|| format!("cannot write {}", ws.report().display()))?;
    println!("{table}");
    Ok(())
}

pub fn run_all(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    gen_synthetic(ws, cfg)?;
    train_ae(ws, cfg)?;
    mine(ws, cfg)?;
    build_triplets(ws, cfg)?;
    train_cc(ws, cfg)?;
    for kind in [ScorerKind::Model, ScorerKind::Oracle, ScorerKind::Random] {
        eval_pairwise(ws, cfg, kind)?;
        eval_rprecision(ws, cfg, kind)?;
    }
    refine(ws, cfg)?;
    report(ws)
}
