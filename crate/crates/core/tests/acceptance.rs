//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line with
//! the measured quantities; the process exits non-zero if any criterion
//! fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p crosscoherence --test acceptance -- 4 9`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crosscoherence::crosscoherence::attention::{
    cross_attention_with_weights, init_attention, AttentionConfig,
};
use crosscoherence::crosscoherence::{batch_loss, fit, train_step, ScorerConfig, TrainGroup};
use crosscoherence::datasets::attributes::ShapeClass;
use crosscoherence::datasets::cloud_io::{encode_cloud, load_cloud, save_cloud};
use crosscoherence::datasets::manifest::{load_manifest, save_manifest};
use crosscoherence::datasets::synthetic::{generate_synthetic, synthesize, SyntheticConfig};
use crosscoherence::datasets::AttributeOracle;
use crosscoherence::datasets::Mentions;
use crosscoherence::distractors::{
    derive_seed, mine_distractors, MiningConfig, MiningOutput, Role, Triplet, MIN_CLASS_SIZE,
};
use crosscoherence::encoders::{
    train_autoencoder, AutoencoderConfig, BuiltinTextConfig, BuiltinTextEncoder, DecoderConfig,
    EncoderConfig, LatentCode, SetAbstractionConfig, TextItem, TextProvider, Vocabulary,
};
use crosscoherence::geometry::{ball_query, chamfer_distance};
use crosscoherence::nn::{Adam, AdamConfig, Graph, ParamStore};
use crosscoherence::pipeline::{
    caption_vocabulary, manifest_latents, mine_by_split, pairs_with_role, shape_inputs,
    split_triplets, unambiguous_pairs,
};
use crosscoherence::protocols::{
    eval_pairwise, eval_rprecision, EvalReport, MappedScorer, ModelScorer, RandomScorer,
    RetrievalPair, Scorer, DEFAULT_SET_SIZE,
};
use crosscoherence::refine::{
    build_refine_prompt, refine_captions, CompletionProvider, MockProvider, PromptCache,
    RefineConfig, RefineRequest, DEFAULT_TEMPLATE,
};
use crosscoherence::{ColoredPointCloud, CrossCoherenceModel, Point3, ShapeInput, Split};

type Outcome = Result<String, String>;

struct Criterion {
    number: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria = [
        Criterion {
            number: 1,
            name: "gradient correctness",
            budget: Some(Duration::from_secs(120)),
            run: gradient_correctness,
        },
        Criterion {
            number: 2,
            name: "attention invariants",
            budget: None,
            run: attention_invariants,
        },
        Criterion {
            number: 3,
            name: "permutation invariance",
            budget: None,
            run: permutation_invariance,
        },
        Criterion {
            number: 4,
            name: "uniform-initialization loss",
            budget: None,
            run: uniform_initialization_loss,
        },
        Criterion {
            number: 5,
            name: "overfit",
            budget: Some(Duration::from_secs(600)),
            run: overfit,
        },
        Criterion {
            number: 6,
            name: "desk-scale learning",
            budget: Some(Duration::from_secs(45 * 60)),
            run: desk_scale_learning,
        },
        Criterion {
            number: 7,
            name: "protocol oracles",
            budget: None,
            run: protocol_oracles,
        },
        Criterion {
            number: 8,
            name: "mining oracle",
            budget: None,
            run: mining_oracle,
        },
        Criterion {
            number: 9,
            name: "geometry oracles",
            budget: None,
            run: geometry_oracles,
        },
        Criterion {
            number: 10,
            name: "monotone-transform invariance",
            budget: None,
            run: monotone_invariance,
        },
        Criterion {
            number: 11,
            name: "refinement pipeline",
            budget: None,
            run: refinement_pipeline,
        },
        Criterion {
            number: 12,
            name: "format round-trips",
            budget: None,
            run: format_round_trips,
        },
    ];
    let mut failed = Vec::new();
    for c in criteria
        .iter()
        .filter(|c| wanted.is_empty() || wanted.contains(&c.number))
    {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(detail), Some(budget)) if elapsed > budget => {
                Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}"))
            }
            (other, _) => other,
        };
        match outcome {
            Ok(detail) => println!(
                "criterion {:>2} {}: PASS ({detail}; {elapsed:.1?})",
                c.number, c.name
            ),
            Err(detail) => {
                println!(
                    "criterion {:>2} {}: FAIL ({detail}; {elapsed:.1?})",
                    c.number, c.name
                );
                failed.push(c.number);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

/// `Ok(detail)` when `ok`, otherwise `Err(detail)`.
fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn check<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> ColoredPointCloud {
    let points = (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let colors = (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    ColoredPointCloud::new(points, colors).unwrap()
}

fn builtin_text(corpus: &[&str], dim: usize, heads: usize, frozen: bool) -> TextProvider {
    TextProvider::Builtin(BuiltinTextEncoder {
        vocab: Vocabulary::build(corpus.iter().copied()),
        config: BuiltinTextConfig { dim, heads },
        frozen,
    })
}

/// Every width at most 16, meant for 64-point clouds.
fn reduced_encoder() -> EncoderConfig {
    EncoderConfig {
        stage1: SetAbstractionConfig {
            num_centers: 24,
            radius: 0.5,
            group_size: 8,
            mlp_widths: vec![8, 12],
        },
        stage2: SetAbstractionConfig {
            num_centers: 8,
            radius: 0.9,
            group_size: 6,
            mlp_widths: vec![12],
        },
        global_mlp: vec![16],
        min_points: 16,
    }
}

fn reduced_scorer(
    encoder: &EncoderConfig,
    zero_init_head: bool,
    freeze_encoder: bool,
) -> ScorerConfig {
    ScorerConfig {
        attention: AttentionConfig {
            d_model: 8,
            heads: 2,
            use_residual_norm: true,
        },
        depth: 2,
        head_widths: vec![8],
        shape_dim: encoder.local_width(),
        region_positions: true,
        shape_hidden: vec![10],
        text_dim: 8,
        zero_init_head,
        freeze_encoder,
    }
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Outcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let caption = "a tall red chair with four thin legs";
    let encoder = reduced_encoder();
    let text = builtin_text(&[caption], 8, 2, false);
    let mut model = check(CrossCoherenceModel::new(
        reduced_scorer(&encoder, false, false),
        encoder,
        text,
        None,
        11,
    ))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = ShapeInput::Cloud(Arc::new(random_cloud(&mut rng, 64)));
    let item = TextItem::new("c", caption);
    // Zero-initialized biases leave some ReLU inputs exactly at the kink,
    // where no derivative exists; move to a generic point first.
    for idx in 0..model.params.len() {
        model.params.value_at_mut(idx).mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
    }
    let tokens = crosscoherence::encoders::text::words(caption).len();
    if tokens > 8 {
        return Err(format!("caption has {tokens} tokens, at most 8 allowed"));
    }

    let analytic = {
        let mut graph = model.graph();
        let logit = check(model.pair_logit(&mut graph, &shape, &item))?;
        let mut grads = graph.tape.backward(logit);
        graph.collect(&mut grads)
    };
    let names: Vec<String> = model.params.names().to_vec();
    let mut worst = (0.0f64, String::new());
    let mut worst_abs = 0.0f64;
    let mut checked = 0;
    let mut skipped = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        let Some(grad) = analytic.by_name(&model.params, name).cloned() else {
            skipped.push(name.clone());
            continue;
        };
        checked += 1;
        let dims = model.params.value_at(idx).dim();
        let mut numeric = Array2::zeros(dims);
        for r in 0..dims.0 {
            for c in 0..dims.1 {
                let original = model.params.value_at(idx)[[r, c]];
                model.params.value_at_mut(idx)[[r, c]] = original + STEP;
                let plus = check(model.score_pair(&shape, &item))?;
                model.params.value_at_mut(idx)[[r, c]] = original - STEP;
                let minus = check(model.score_pair(&shape, &item))?;
                model.params.value_at_mut(idx)[[r, c]] = original;
                numeric[[r, c]] = (plus - minus) / (2.0 * STEP);
            }
        }
        // Relative to the tensor's gradient scale so that near-zero entries
        // do not dominate. The floor keeps tensors whose exact gradient is
        // zero (key biases under softmax) from dividing round-off noise by
        // almost nothing.
        let scale = grad.iter().chain(numeric.iter()).fold(1e-5f64, |m, v| m.max(v.abs()));
        let abs_err = grad.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst_abs = worst_abs.max(abs_err);
        let err = abs_err / scale;
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    // The global stage feeds only the autoencoder, and the feature
    // standardization is frozen.
    let frozen_ok = skipped.iter().all(|n| n.starts_with("cc.shape_norm.") || n.starts_with("encoder.sa3."));
    verdict(
        worst.0 < TOL && frozen_ok && checked > 0,
        format!(
            "{checked} tensors, max relative error {:.2e} in `{}`, max absolute error {worst_abs:.1e}, without gradient {:?}",
            worst.0, worst.1, skipped
        ),
    )
}

// ---------------------------------------------------------------- 2

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_row = 0.0f64;
    let (mut masked_entries, mut single_keys) = (0usize, 0usize);
    for instance in 0..1000 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d_model = heads * rng.random_range(1..=4);
        let cfg = AttentionConfig {
            d_model,
            heads,
            use_residual_norm: rng.random_bool(0.5),
        };
        let mut store = ParamStore::new();
        init_attention(&mut store, "att", &cfg, &mut rng);
        let lq = rng.random_range(1..=6);
        let lkv = if instance % 10 == 0 {
            1
        } else {
            rng.random_range(1..=9)
        };
        let mut mask: Vec<bool> = (0..lkv).map(|_| rng.random_bool(0.6)).collect();
        if instance % 7 == 0 {
            mask.iter_mut().for_each(|m| *m = false);
        }
        if !mask.iter().any(|&m| m) {
            let keep = rng.random_range(0..lkv);
            mask[keep] = true;
        }
        let use_mask = rng.random_bool(0.8);
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let q = Array2::from_shape_fn((lq, d_model), |_| scale * rng.random_range(-1.0..1.0));
        let kv = Array2::from_shape_fn((lkv, d_model), |_| scale * rng.random_range(-1.0..1.0));
        let mut graph = Graph::new(&store);
        let qv = graph.tape.constant(q);
        let kvv = graph.tape.constant(kv);
        let out = check(cross_attention_with_weights(
            &mut graph,
            "att",
            qv,
            kvv,
            use_mask.then_some(mask.as_slice()),
            &cfg,
        ))?;
        let live: Vec<bool> = if use_mask {
            mask.clone()
        } else {
            vec![true; lkv]
        };
        let live_count = live.iter().filter(|&&m| m).count();
        for w in &out.weights {
            let w = graph.tape.value(*w);
            for row in w.rows() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
                for (j, &x) in row.iter().enumerate() {
                    if !live[j] {
                        masked_entries += 1;
                        if x != 0.0 {
                            return Err(format!(
                                "instance {instance}: masked key {j} has weight {x:e}"
                            ));
                        }
                    }
                    if live_count == 1 && live[j] {
                        single_keys += 1;
                        if x != 1.0 {
                            return Err(format!(
                                "instance {instance}: single live key has weight {x:.17}"
                            ));
                        }
                    }
                }
            }
        }
    }
    verdict(
        worst_row <= 1e-6,
        format!("1000 instances, max |row sum − 1| {worst_row:.1e}, {masked_entries} masked weights all 0, {single_keys} single-key weights all 1"),
    )
}

// ---------------------------------------------------------------- 3

fn permutation_invariance() -> Outcome {
    let encoder = EncoderConfig::desk();
    let captions = ["a red chair with four legs", "a round blue table"];
    let text = builtin_text(&captions, 16, 4, false);
    let scorer = ScorerConfig {
        attention: AttentionConfig {
            d_model: 16,
            heads: 4,
            use_residual_norm: true,
        },
        depth: 2,
        head_widths: vec![16],
        shape_dim: encoder.local_width(),
        region_positions: true,
        shape_hidden: vec![16],
        text_dim: 16,
        zero_init_head: false,
        freeze_encoder: true,
    };
    let model = check(CrossCoherenceModel::new(scorer, encoder, text, None, 3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.random_range(200..=600);
        let cloud = random_cloud(&mut rng, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let item = TextItem::new("t", captions[i % 2]);
        let a = check(model.score_pair(&ShapeInput::Cloud(Arc::new(cloud.clone())), &item))?;
        let b =
            check(model.score_pair(&ShapeInput::Cloud(Arc::new(cloud.permuted(&order))), &item))?;
        worst = worst.max((a - b).abs());
    }
    verdict(
        worst <= 1e-5,
        format!("100 clouds, max |Δ logit| {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn uniform_initialization_loss() -> Outcome {
    let encoder = reduced_encoder();
    let captions = [
        "a red chair",
        "a blue table with three legs",
        "a green wooden stool",
        "a plain yellow desk",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut details = Vec::new();
    let mut ok = true;
    for g in 2..=4usize {
        let text = builtin_text(&captions, 8, 2, false);
        let mut model = check(CrossCoherenceModel::new(
            reduced_scorer(&encoder, true, false),
            encoder.clone(),
            text,
            None,
            g as u64,
        ))?;
        let batch: Vec<TrainGroup> = captions
            .iter()
            .enumerate()
            .map(|(i, c)| TrainGroup {
                shapes: (0..g)
                    .map(|_| ShapeInput::Cloud(Arc::new(random_cloud(&mut rng, 64))))
                    .collect(),
                text: TextItem::new(format!("t{i}"), *c),
                target: i % g,
            })
            .collect();
        let forward = check(batch_loss(&model, &batch))?;
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 1e-3,
            ..Default::default()
        });
        let loss = check(train_step(&mut model, &mut opt, &batch))?;
        let expected = (g as f64).ln();
        ok &= (loss - expected).abs() <= 1e-6 && (forward - loss).abs() <= 1e-12;
        details.push(format!("G={g}: {loss:.9} vs ln G {expected:.9}"));
    }
    verdict(ok, details.join(", "))
}

// ---------------------------------------------------------------- 5

/// Reference and one distractor of the same class that contradicts the
/// caption, for the first `count` shapes of a small synthetic set.
fn overfit_triplets(count: usize) -> (Vec<Triplet>, HashMap<String, ColoredPointCloud>) {
    let cfg = SyntheticConfig {
        chairs: count,
        tables: count,
        points: 512,
        captions_per_shape: 3,
        seed: 5,
        ..Default::default()
    };
    let shapes: Vec<_> = [ShapeClass::Chair, ShapeClass::Table]
        .into_iter()
        .flat_map(|class| (0..count).map(move |i| (class, i)))
        .map(|(class, i)| synthesize(class, i, &cfg))
        .collect();
    let mut triplets = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (i, reference) in shapes.iter().enumerate() {
        if triplets.len() == count {
            break;
        }
        let caption = &reference.captions[i % reference.captions.len()];
        let mentions = Mentions::parse(caption);
        let Some(distractor) = shapes
            .iter()
            .cycle()
            .skip(i + 1)
            .take(shapes.len() - 1)
            .find(|s| {
                s.attributes.class == reference.attributes.class
                    && mentions.mismatches(&s.attributes) > 0
            })
        else {
            continue;
        };
        let target = rng.random_range(0..2);
        let mut ids = vec![distractor.shape_id.clone()];
        ids.insert(target, reference.shape_id.clone());
        let mut roles = vec![Role::Hard];
        roles.insert(target, Role::Reference);
        triplets.push(Triplet {
            id: format!("overfit{i}"),
            shape_ids: ids,
            roles,
            text_id: format!("{}#o", reference.shape_id),
            text: caption.clone(),
            target,
        });
    }
    let clouds = shapes.into_iter().map(|s| (s.shape_id, s.cloud)).collect();
    (triplets, clouds)
}

fn overfit() -> Outcome {
    let (triplets, clouds) = overfit_triplets(32);
    if triplets.len() != 32 {
        return Err(format!("only {} triplets", triplets.len()));
    }
    let encoder = EncoderConfig::desk();
    let corpus: Vec<&str> = triplets.iter().map(|t| t.text.as_str()).collect();
    let text = builtin_text(&corpus, 32, 4, false);
    let scorer = ScorerConfig {
        attention: AttentionConfig {
            d_model: 32,
            heads: 4,
            use_residual_norm: true,
        },
        depth: 2,
        head_widths: vec![64, 32],
        shape_dim: encoder.local_width(),
        region_positions: true,
        shape_hidden: vec![64],
        text_dim: 32,
        zero_init_head: true,
        freeze_encoder: true,
    };
    let mut model = check(CrossCoherenceModel::new(scorer, encoder, text, None, 5))?;
    let features: HashMap<String, ShapeInput> = clouds
        .iter()
        .map(|(id, c)| {
            Ok((
                id.clone(),
                ShapeInput::Features(Arc::new(model.local_features(c)?)),
            ))
        })
        .collect::<crosscoherence::Result<_>>()
        .map_err(|e| e.to_string())?;
    let sets: Vec<_> = features
        .values()
        .map(|s| match s {
            ShapeInput::Features(f) => (**f).clone(),
            ShapeInput::Cloud(_) => unreachable!(),
        })
        .collect();
    check(model.calibrate_shape_norm(&sets))?;
    let batch: Vec<TrainGroup> = triplets
        .iter()
        .map(|t| TrainGroup::from_triplet(t, &features))
        .collect::<crosscoherence::Result<_>>()
        .map_err(|e| e.to_string())?;
    let mut opt = Adam::new(AdamConfig {
        learning_rate: 1e-3,
        ..Default::default()
    });
    let mut steps = 0;
    let (loss, accuracy, min_prob) = loop {
        let loss = check(batch_loss(&model, &batch))?;
        let probs: Vec<f64> = batch
            .iter()
            .map(|g| {
                model
                    .score_group(&g.text, &g.shapes)
                    .map(|s| s.probabilities[g.target])
            })
            .collect::<crosscoherence::Result<_>>()
            .map_err(|e| e.to_string())?;
        let accuracy = probs.iter().filter(|&&p| p > 0.5).count() as f64 / probs.len() as f64;
        let min_prob = probs.iter().copied().fold(1.0, f64::min);
        if (loss < 0.05 && accuracy == 1.0 && min_prob > 0.95) || steps == 2000 {
            break (loss, accuracy, min_prob);
        }
        check(train_step(&mut model, &mut opt, &batch))?;
        steps += 1;
    };
    verdict(
        loss < 0.05 && accuracy == 1.0 && min_prob > 0.95,
        format!("{steps} steps, cross-entropy {loss:.4}, pairwise accuracy {:.1}%, lowest reference probability {min_prob:.3}", 100.0 * accuracy),
    )
}

// ---------------------------------------------------------------- 6

fn desk_scale_learning() -> Outcome {
    const SEED: u64 = 7;
    let dir = check(tempfile::tempdir())?;
    let data = SyntheticConfig {
        chairs: 300,
        tables: 300,
        points: 512,
        captions_per_shape: 3,
        seed: SEED,
        ..Default::default()
    };
    let mut manifest = check(generate_synthetic(&data, dir.path()))?;
    let train_clouds: Vec<_> = manifest
        .split(Split::Train)
        .map(|r| manifest.load_cloud(&r.shape_id))
        .collect::<crosscoherence::Result<_>>()
        .map_err(|e| e.to_string())?;
    let ae = AutoencoderConfig {
        encoder: EncoderConfig::desk(),
        decoder: DecoderConfig::desk(),
        steps: 300,
        batch_size: 8,
        seed: SEED,
        ..Default::default()
    };
    let run = check(train_autoencoder(&train_clouds, &ae))?;
    let latents = check(manifest_latents(&manifest, &run.params, &ae.encoder))?;
    check(mine_by_split(
        &mut manifest,
        &latents,
        &MiningConfig {
            seed: SEED,
            ..Default::default()
        },
    ))?;
    let train = check(split_triplets(&manifest, Split::Train, 4, SEED))?;
    let val = check(split_triplets(&manifest, Split::Val, 4, SEED))?;
    let test = check(split_triplets(&manifest, Split::Test, 4, SEED))?;
    let (val_pairs, _) = check(unambiguous_pairs(&manifest, &val))?;
    let (test_pairs, dropped) = check(unambiguous_pairs(&manifest, &test))?;
    let total_triplets = train.len() + val.len() + test.len();

    let d = 32;
    let text = TextProvider::Builtin(BuiltinTextEncoder {
        vocab: caption_vocabulary(&manifest, &[Split::Train]),
        config: BuiltinTextConfig { dim: d, heads: 4 },
        frozen: false,
    });
    let scorer = ScorerConfig {
        attention: AttentionConfig {
            d_model: d,
            heads: 4,
            use_residual_norm: true,
        },
        depth: 2,
        head_widths: vec![2 * d, d],
        shape_dim: ae.encoder.local_width(),
        region_positions: true,
        shape_hidden: vec![64],
        text_dim: d,
        zero_init_head: true,
        freeze_encoder: true,
    };
    let mut model = check(CrossCoherenceModel::new(
        scorer.clone(),
        ae.encoder.clone(),
        text.clone(),
        Some(&run.params),
        SEED,
    ))?;
    let shapes = check(shape_inputs(&model, &manifest, &manifest.ids()))?;
    let train_features: Vec<_> = manifest
        .split(Split::Train)
        .map(|r| match &shapes[&r.shape_id] {
            ShapeInput::Features(f) => (**f).clone(),
            ShapeInput::Cloud(_) => unreachable!(),
        })
        .collect();
    check(model.calibrate_shape_norm(&train_features))?;

    // A randomly initialized head, for the chance-level reference.
    let random_head = CrossCoherenceModel::new(
        ScorerConfig {
            zero_init_head: false,
            ..scorer
        },
        ae.encoder.clone(),
        text,
        Some(&run.params),
        SEED,
    )
    .map_err(|e| e.to_string())?;
    let untrained = check(eval_pairwise(
        &ModelScorer {
            model: &random_head,
            shapes: &shapes,
        },
        &test_pairs,
    ))?
    .accuracy;

    let fit_cfg = crosscoherence::FitConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 1e-3,
        group_size: 2,
        patience: None,
        seed: SEED,
    };
    let trained = check(fit(model, &train, &val_pairs, &shapes, &fit_cfg))?;
    let scorer = ModelScorer {
        model: &trained.model,
        shapes: &shapes,
    };
    let all = check(eval_pairwise(&scorer, &test_pairs))?;
    let hard = check(eval_pairwise(
        &scorer,
        &pairs_with_role(&test_pairs, Role::Hard),
    ))?;
    let easy = check(eval_pairwise(
        &scorer,
        &pairs_with_role(&test_pairs, Role::Easy),
    ))?;
    verdict(
        all.accuracy >= 0.90 && hard.accuracy <= easy.accuracy,
        format!(
            "{total_triplets} triplets, {} held-out pairs ({dropped} ambiguous dropped): accuracy {:.2}% (target ≥ 90%), hard {:.2}% ≤ easy {:.2}%, untrained random head {:.2}%",
            all.count,
            100.0 * all.accuracy,
            100.0 * hard.accuracy,
            100.0 * easy.accuracy,
            100.0 * untrained
        ),
    )
}

// ---------------------------------------------------------------- 7

fn retrieval_pairs_of(
    manifest: &crosscoherence::DatasetManifest,
) -> (Vec<RetrievalPair>, Vec<TextItem>) {
    let captions = manifest.captions();
    let pairs: Vec<RetrievalPair> = manifest
        .records
        .iter()
        .flat_map(|r| {
            captions[&r.shape_id].iter().map(|t| RetrievalPair {
                shape_id: r.shape_id.clone(),
                text: t.clone(),
            })
        })
        .collect();
    let pool = crosscoherence::protocols::text_pool(&pairs);
    (pairs, pool)
}

fn protocol_oracles() -> Outcome {
    let dir = check(tempfile::tempdir())?;

    // Pairwise: mined hard and easy pairs on a synthetic set, filtered to
    // captions that rule out the distractor.
    let cfg = SyntheticConfig {
        chairs: 60,
        tables: 60,
        points: 64,
        captions_per_shape: 3,
        seed: 71,
        ..Default::default()
    };
    let mut manifest = check(generate_synthetic(&cfg, &dir.path().join("pairwise")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let latents: BTreeMap<String, LatentCode> = manifest
        .ids()
        .into_iter()
        .map(|id| (id, LatentCode((0..8).map(|_| rng.random()).collect())))
        .collect();
    check(mine_by_split(
        &mut manifest,
        &latents,
        &MiningConfig {
            seed: 71,
            ..Default::default()
        },
    ))?;
    let mut pairs = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let triplets = check(split_triplets(&manifest, split, 4, 71))?;
        pairs.extend(check(unambiguous_pairs(&manifest, &triplets))?.0);
    }
    let oracle = AttributeOracle::new(manifest.attributes());
    let pairwise = check(eval_pairwise(&oracle, &pairs))?;

    // R-precision: one full caption per shape, so every other caption in
    // the set contradicts the shape somewhere.
    let cfg = SyntheticConfig {
        chairs: 200,
        tables: 200,
        points: 16,
        captions_per_shape: 1,
        seed: 72,
        ..Default::default()
    };
    let manifest = check(generate_synthetic(&cfg, &dir.path().join("rprecision")))?;
    let (rp_pairs, pool) = retrieval_pairs_of(&manifest);
    let oracle = AttributeOracle::new(manifest.attributes());
    let rprecision = check(eval_rprecision(
        &oracle,
        &rp_pairs,
        &pool,
        DEFAULT_SET_SIZE,
        72,
    ))?;

    // Random scorer over at least 2000 retrieval items.
    let cfg = SyntheticConfig {
        chairs: 350,
        tables: 350,
        points: 16,
        captions_per_shape: 3,
        seed: 73,
        ..Default::default()
    };
    let manifest = check(generate_synthetic(&cfg, &dir.path().join("random")))?;
    let (random_pairs, pool) = retrieval_pairs_of(&manifest);
    let random = check(eval_rprecision(
        &RandomScorer { seed: 73 },
        &random_pairs,
        &pool,
        DEFAULT_SET_SIZE,
        73,
    ))?;
    let n = random.count as f64;
    let p = 1.0 / DEFAULT_SET_SIZE as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    let (lo, hi) = (n * p - 3.0 * sigma, n * p + 3.0 * sigma);
    let hits = random.correct as f64;

    verdict(
        pairwise.accuracy == 1.0 && rprecision.accuracy == 1.0 && random.count >= 2000 && (lo..=hi).contains(&hits),
        format!(
            "oracle pairwise {}/{}, oracle R-precision {}/{} at set size {DEFAULT_SET_SIZE}, random R-precision {}/{} within [{lo:.1}, {hi:.1}]",
            pairwise.correct, pairwise.count, rprecision.correct, rprecision.count, random.correct, random.count
        ),
    )
}

// ---------------------------------------------------------------- 8

fn percentile_oracle(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let below = rank.floor();
    let frac = rank - below;
    let i = below as usize;
    if frac == 0.0 {
        sorted[i]
    } else {
        sorted[i] + (sorted[i + 1] - sorted[i]) * frac
    }
}

/// Quadratic reference: full distance table per class, explicit sorting by
/// (distance, id).
fn brute_force_mining(
    latents: &BTreeMap<String, LatentCode>,
    classes: &BTreeMap<String, String>,
    cfg: &MiningConfig,
) -> Vec<(String, [String; 2], String)> {
    let mut out = Vec::new();
    for (reference, class) in classes {
        let members: Vec<&String> = classes
            .iter()
            .filter(|(_, c)| *c == class)
            .map(|(id, _)| id)
            .collect();
        if members.len() < MIN_CLASS_SIZE {
            continue;
        }
        let r = &latents[reference].0;
        let mut table: Vec<(f64, &String)> = members
            .iter()
            .filter(|m| **m != reference)
            .map(|m| {
                let d2: f64 = r
                    .iter()
                    .zip(&latents[*m].0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2.sqrt(), *m)
            })
            .collect();
        table.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        let hard = [table[0].1.clone(), table[1].1.clone()];
        let mut dists: Vec<f64> = table.iter().map(|t| t.0).collect();
        dists.sort_by(f64::total_cmp);
        let cut = percentile_oracle(&dists, cfg.easy_percentile);
        let mut far: Vec<&String> = table[2..]
            .iter()
            .filter(|t| t.0 > cut)
            .map(|t| t.1)
            .collect();
        far.sort();
        let easy = if far.is_empty() {
            let max = table[2..]
                .iter()
                .map(|t| t.0)
                .fold(f64::NEG_INFINITY, f64::max);
            table[2..]
                .iter()
                .filter(|t| t.0 == max)
                .map(|t| t.1)
                .min()
                .unwrap()
                .clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, reference));
            far[rng.random_range(0..far.len())].clone()
        };
        out.push((reference.clone(), hard, easy));
    }
    out
}

fn mining_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut compared = 0;
    for instance in 0..20 {
        let n = rng.random_range(5..=200);
        let dim = rng.random_range(1..=6);
        let class_count = rng.random_range(1..=4);
        // Coarse grids make exact distance ties common.
        let grid = if instance % 3 == 0 {
            Some(rng.random_range(2..=4) as f64)
        } else {
            None
        };
        let mut latents = BTreeMap::new();
        let mut classes = BTreeMap::new();
        for i in 0..n {
            let id = format!("s{:03}", rng.random_range(0..1000) * 1000 + i);
            let code: Vec<f64> = (0..dim)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    grid.map_or(v, |g| (v * g).round() / g)
                })
                .collect();
            latents.insert(id.clone(), LatentCode(code));
            classes.insert(id, format!("class{}", rng.random_range(0..class_count)));
        }
        let cfg = MiningConfig {
            seed: rng.random(),
            easy_percentile: [75.0, 50.0, 90.0][instance % 3],
        };
        let got: MiningOutput = check(mine_distractors(&latents, &classes, &cfg))?;
        let got: Vec<(String, [String; 2], String)> = got
            .sets
            .into_iter()
            .map(|s| (s.reference_id, s.hard_ids, s.easy_id))
            .collect();
        let want = brute_force_mining(&latents, &classes, &cfg);
        if got != want {
            let first = got.iter().zip(&want).find(|(a, b)| a != b);
            return Err(format!("instance {instance} (n = {n}) differs: {first:?}"));
        }
        compared += want.len();
    }
    Ok(format!(
        "20 instances, {compared} distractor sets identical"
    ))
}

// ---------------------------------------------------------------- 9

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let n = rng.random_range(1..40);
        let a = random_points(&mut rng, n);
        let n = rng.random_range(1..40);
        let b = random_points(&mut rng, n);
        let sq = |p: &Point3, q: &Point3| {
            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
        };
        let one_way = |x: &[Point3], y: &[Point3]| {
            x.iter()
                .map(|p| y.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        let expected = one_way(&a, &b) + one_way(&b, &a);
        worst = worst.max((check(chamfer_distance(&a, &b))? - expected).abs());

        let n = rng.random_range(1..60);
        let points = random_points(&mut rng, n);
        let centers: Vec<usize> = (0..rng.random_range(1..=points.len()))
            .map(|_| rng.random_range(0..points.len()))
            .collect();
        let radius = rng.random_range(0.05..1.5);
        let k = rng.random_range(1..12);
        let got = check(ball_query(&points, &centers, radius, k))?;
        for (g, &c) in got.iter().zip(&centers) {
            let inside: Vec<usize> = (0..points.len())
                .filter(|&i| sq(&points[i], &points[c]) <= radius * radius)
                .collect();
            let mut want: Vec<usize> = inside.iter().copied().take(k).collect();
            let pad = want.first().copied().unwrap_or(c);
            while want.len() < k {
                want.push(pad);
            }
            if *g != want {
                return Err(format!(
                    "instance {instance}: ball query {g:?}, brute force {want:?}"
                ));
            }
        }
    }
    verdict(
        worst <= 1e-9,
        format!("100 instances, max chamfer error {worst:.1e}, ball query identical"),
    )
}

// ---------------------------------------------------------------- 10

fn monotone_invariance() -> Outcome {
    let dir = check(tempfile::tempdir())?;
    let cfg = SyntheticConfig {
        chairs: 120,
        tables: 120,
        points: 16,
        captions_per_shape: 3,
        seed: 10,
        ..Default::default()
    };
    let mut manifest = check(generate_synthetic(&cfg, dir.path()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let latents: BTreeMap<String, LatentCode> = manifest
        .ids()
        .into_iter()
        .map(|id| (id, LatentCode((0..4).map(|_| rng.random()).collect())))
        .collect();
    check(mine_by_split(
        &mut manifest,
        &latents,
        &MiningConfig {
            seed: 10,
            ..Default::default()
        },
    ))?;
    let triplets = check(split_triplets(&manifest, Split::Train, 4, 10))?;
    let pairs: Vec<Triplet> = triplets.iter().flat_map(Triplet::pairs).collect();
    let (rp_pairs, pool) = retrieval_pairs_of(&manifest);

    let random = RandomScorer { seed: 10 };
    let oracle = AttributeOracle::new(manifest.attributes());
    let bases: [(&str, &dyn Scorer); 2] = [("random", &random), ("oracle", &oracle)];
    let flags = |r: &EvalReport| r.items.iter().map(|i| i.correct).collect::<Vec<_>>();
    let mut evaluations = 0;
    for (name, base) in bases {
        let pw = check(eval_pairwise(base, &pairs))?;
        let rp = check(eval_rprecision(base, &rp_pairs, &pool, 20, 10))?;
        for t in 0..10 {
            let a = rng.random_range(0.1..10.0);
            let b = rng.random_range(-5.0..5.0);
            let c = rng.random_range(0.1..2.0);
            let transform = move |x: f64| match t % 5 {
                0 => a * x + b,
                1 => (c * x).exp(),
                2 => x * x * x + a * x,
                3 => (c * x).atan() + b,
                _ => (a * x + b).exp() + c * x,
            };
            let mapped = MappedScorer {
                inner: base,
                f: transform,
            };
            let pw_t = check(eval_pairwise(&mapped, &pairs))?;
            let rp_t = check(eval_rprecision(&mapped, &rp_pairs, &pool, 20, 10))?;
            if flags(&pw_t) != flags(&pw) || pw_t.accuracy != pw.accuracy {
                return Err(format!(
                    "{name} pairwise changed under transform {t}: {} vs {}",
                    pw_t.accuracy, pw.accuracy
                ));
            }
            if flags(&rp_t) != flags(&rp) || rp_t.accuracy != rp.accuracy {
                return Err(format!(
                    "{name} R-precision changed under transform {t}: {} vs {}",
                    rp_t.accuracy, rp.accuracy
                ));
            }
            evaluations += 2;
        }
    }
    Ok(format!(
        "{evaluations} transformed evaluations over {} pairs and {} retrieval items match item by item",
        pairs.len(),
        rp_pairs.len()
    ))
}

// ---------------------------------------------------------------- 11

fn golden(name: &str) -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn directory_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in check(std::fs::read_dir(dir))? {
        let path = check(entry)?.path();
        files.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            check(std::fs::read(&path))?,
        );
    }
    Ok(files)
}

fn refinement_pipeline() -> Outcome {
    // Prompt assembly against hand-written golden files.
    let three = vec![
        "a red chair with four legs".to_string(),
        "it has a tall solid backrest".to_string(),
        "  the seat is made of   wood".to_string(),
    ];
    let prompt = check(build_refine_prompt(&three, DEFAULT_TEMPLATE))?;
    if prompt != golden("prompt_three_captions.txt")? {
        return Err(format!(
            "three-caption prompt differs from golden file:\n{prompt}"
        ));
    }
    let request = check(RefineRequest::new(
        "s",
        vec!["a small blue table".to_string()],
        "Rewrite this description.",
    ))?;
    if request.rendered_prompt != golden("prompt_single_caption.txt")? {
        return Err(format!(
            "single-caption prompt differs from golden file:\n{}",
            request.rendered_prompt
        ));
    }
    let mock = MockProvider::new(DEFAULT_TEMPLATE);
    if check(mock.complete(&prompt))? != golden("completion_three_captions.txt")? {
        return Err("mock completion differs from golden file".into());
    }

    // Full runs over a 50-shape manifest.
    let dir = check(tempfile::tempdir())?;
    let cfg = SyntheticConfig {
        chairs: 25,
        tables: 25,
        points: 16,
        captions_per_shape: 3,
        seed: 11,
        ..Default::default()
    };
    let manifest = check(generate_synthetic(&cfg, &dir.path().join("data")))?;
    let refine = RefineConfig::default();
    let cache_a = check(PromptCache::open(dir.path().join("cache-a")))?;
    let cache_b = check(PromptCache::open(dir.path().join("cache-b")))?;
    let first = refine_captions(&manifest, &mock, Some(&cache_a), &refine);
    let second = refine_captions(&manifest, &mock, Some(&cache_b), &refine);
    let rerun = refine_captions(&manifest, &mock, Some(&cache_a), &refine);
    let json = |r: &crosscoherence::refine::RefineRun| serde_json::to_vec(r).unwrap();
    let reproducible = json(&first) == json(&second)
        && directory_bytes(cache_a.dir())? == directory_bytes(cache_b.dir())?
        && first.failures() == 0
        && first.outcomes.len() == 50;
    let rerun_texts = |r: &crosscoherence::refine::RefineRun| {
        r.outcomes
            .values()
            .map(|o| match o {
                crosscoherence::refine::RefineOutcome::Ok(res) => {
                    Some(res.refined_captions.clone())
                }
                crosscoherence::refine::RefineOutcome::Failed { .. } => None,
            })
            .collect::<Vec<_>>()
    };
    let all_hits = rerun.cache_hits == 50
        && rerun.provider_calls == 0
        && rerun_texts(&rerun) == rerun_texts(&first);
    verdict(
        reproducible && all_hits,
        format!(
            "golden prompts match, two fresh runs identical: {reproducible}, re-run {} cache hits and {} provider calls for 50 shapes",
            rerun.cache_hits, rerun.provider_calls
        ),
    )
}

// ---------------------------------------------------------------- 12

fn format_round_trips() -> Outcome {
    let dir = check(tempfile::tempdir())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut clouds = 0;
    for i in 0..50 {
        let n = rng.random_range(1..300);
        let mut cloud = ColoredPointCloud {
            points: (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1e3..1e3),
                        rng.random(),
                        -rng.random::<f64>(),
                    ]
                })
                .collect(),
            colors: (0..n).map(|_| [rng.random(), 0.0, 1.0]).collect(),
        };
        if n > 2 {
            cloud.points[0] = [-0.0, f64::from(f32::MIN_POSITIVE) / 4.0, 1e-30];
            cloud.points[1] = [f64::from(f32::MAX), f64::from(f32::MIN), 0.1];
        }
        let first = dir.path().join(format!("c{i}.cpc"));
        let second = dir.path().join(format!("c{i}-again.cpc"));
        check(save_cloud(&cloud, &first))?;
        check(save_cloud(&check(load_cloud(&first))?, &second))?;
        if check(std::fs::read(&first))? != check(std::fs::read(&second))?
            || encode_cloud(&check(load_cloud(&second))?) != check(std::fs::read(&first))?
        {
            return Err(format!("cloud {i} ({n} points) changed on round trip"));
        }
        clouds += 1;
    }

    let cfg = SyntheticConfig {
        chairs: 20,
        tables: 20,
        points: 32,
        seed: 12,
        ..Default::default()
    };
    let mut manifest = check(generate_synthetic(&cfg, &dir.path().join("data")))?;
    let latents: BTreeMap<String, LatentCode> = manifest
        .ids()
        .into_iter()
        .map(|id| (id, LatentCode(vec![rng.random(), rng.random()])))
        .collect();
    check(mine_by_split(
        &mut manifest,
        &latents,
        &MiningConfig::default(),
    ))?;
    manifest.generator =
        Some(serde_json::json!({ "note": "unicode ✓ \"quoted\"", "values": [0.1, 1e-300] }));
    let first = dir.path().join("data/manifest-1.jsonl");
    let second = dir.path().join("data/manifest-2.jsonl");
    check(save_manifest(&manifest, &first))?;
    let loaded = check(load_manifest(&first))?;
    check(save_manifest(&loaded, &second))?;
    let same = check(std::fs::read(&first))? == check(std::fs::read(&second))?;
    let with_distractors = loaded
        .records
        .iter()
        .filter(|r| r.distractors.is_some())
        .count();
    verdict(
        same && loaded.records == manifest.records,
        format!("{clouds} cloud files and a {}-record manifest ({with_distractors} with distractors) byte-identical", loaded.records.len()),
    )
}
