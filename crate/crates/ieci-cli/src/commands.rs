//! Implementations of the five subcommands.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use ieci_core::corpus::{
    load_corpus, synth_generate, write_corpus, GoldAnnotation, GroundingCorpus, PairedSample,
    Split, SynthConfig,
};
use ieci_core::eval::{predict_pairs, prediction_dump, stratified_report, EvalReport};
use ieci_core::model::{load_checkpoint, save_checkpoint, Ablation, Model, ModelConfig};
use ieci_core::tensor::gradcheck::finite_diff_check;
use ieci_core::tensor::Tensor;
use ieci_core::training::{
    full_loss_gradient_check, train, StepRecord, TrainConfig, TrainOutcome,
};

use crate::manifest::{ensure_dir, RunTracker};
use crate::{
    AblateArgs, CliError, EvalArgs, GradcheckArgs, Result, SplitArg, SynthArgs, TrainArgs,
};

// ── synth ────────────────────────────────────────────────────────────

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let config = SynthConfig {
        train_pairs: args.train_pairs,
        val_pairs: args.val_pairs,
        test_pairs: args.test_pairs,
        phrases_per_pair: args.phrases,
        regions_per_pair: args.regions,
        dim: args.dim,
        implicit_fraction: args.implicit_fraction,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
        context_clusters: args.context_clusters,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&config)?;
    ensure_dir(&args.out)?;
    let mut tracker = RunTracker::new("synth", Some(args.seed));
    write_corpus(&corpus, &args.out)?;
    tracker.note_output(&args.out.join("manifest.json"));
    tracker.note_output(&args.out.join("features.bin"));
    println!(
        "wrote corpus: {} train / {} val / {} test pairs, dim {}, {} annotations",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        corpus.d_p,
        corpus.annotations.len()
    );
    tracker.finish(
        &args.out,
        serde_json::to_value(&config).expect("config serializes"),
    )
}

// ── train ────────────────────────────────────────────────────────────

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.display().to_string(),
                source,
            })?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| {
                CliError::Config(format!("config file {}: {e}", path.display()))
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(ablation) = args.ablation {
        config.ablation = ablation.into();
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(wd) = args.weight_decay {
        config.weight_decay = wd;
    }
    if let Some(batch) = args.batch_size {
        config.batch_size = batch;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    config.validate()?;
    Ok(config)
}

fn resolve_model_config(args: &TrainArgs, corpus: &GroundingCorpus) -> ModelConfig {
    ModelConfig {
        dim: corpus.d_p,
        heads: args.heads,
        ida_layers: args.layers,
        dict_entries: args.dict_size,
        symmetric_contrastive: args.symmetric,
    }
}

fn loss_history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("epoch,step,wpg,kl,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.step, r.wpg, r.kl, r.total
        ));
    }
    out
}

fn run_training(
    corpus: &GroundingCorpus,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    Ok(train(corpus, model_config, train_config)?)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let train_config = resolve_train_config(args)?;
    let model_config = resolve_model_config(args, &corpus);
    ensure_dir(&args.out)?;
    let mut tracker = RunTracker::new("train", Some(train_config.seed));

    let outcome = run_training(&corpus, &model_config, &train_config)?;
    let echo = json!({
        "model": model_config,
        "train": train_config,
        "corpus": args.corpus.display().to_string(),
    });
    let checkpoint_path = args.out.join(format!("model-{}.ckpt", train_config.ablation));
    save_checkpoint(&checkpoint_path, &outcome.model, &echo)?;
    tracker.note_output(&checkpoint_path);
    tracker.write_output(
        &args.out.join("loss_history.csv"),
        loss_history_csv(&outcome.history),
    )?;

    match outcome.history.last() {
        Some(last) => println!(
            "trained {} for {} epochs ({} steps); final wpg {:.6} kl {:.6} total {:.6}",
            train_config.ablation,
            train_config.epochs,
            outcome.history.len(),
            last.wpg,
            last.kl,
            last.total
        ),
        None => println!("training produced no steps (empty schedule)"),
    }
    tracker.finish(&args.out, echo)
}

// ── eval ─────────────────────────────────────────────────────────────

fn checkpoint_train_config(echo: &serde_json::Value, path: &Path) -> Result<TrainConfig> {
    let section = echo.get("train").cloned().ok_or_else(|| {
        CliError::Config(format!(
            "checkpoint {} has no train section in its config echo",
            path.display()
        ))
    })?;
    serde_json::from_value(section).map_err(|e| {
        CliError::Config(format!(
            "checkpoint {}: invalid train config echo: {e}",
            path.display()
        ))
    })
}

fn eval_pool<'c>(
    corpus: &'c GroundingCorpus,
    split: SplitArg,
) -> (&'c [PairedSample], Vec<GoldAnnotation>) {
    match split {
        SplitArg::Val => (&corpus.val, corpus.annotations_for_split(Split::Val)),
        SplitArg::Test | SplitArg::Full => {
            (&corpus.test, corpus.annotations_for_split(Split::Test))
        }
        SplitArg::Implicit => {
            let annotations = corpus
                .annotations_for_split(Split::Test)
                .into_iter()
                .filter(|a| a.relation_tag.is_implicit())
                .collect();
            (&corpus.test, annotations)
        }
        SplitArg::Explicit => {
            let annotations = corpus
                .annotations_for_split(Split::Test)
                .into_iter()
                .filter(|a| !a.relation_tag.is_implicit())
                .collect();
            (&corpus.test, annotations)
        }
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, echo) = load_checkpoint(&args.checkpoint)?;
    let train_config = checkpoint_train_config(&echo, &args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let (pairs, annotations) = eval_pool(&corpus, args.split);

    ensure_dir(&args.out)?;
    let mut tracker = RunTracker::new("eval", None);
    let predictions = predict_pairs(&model, train_config.ablation, pairs)?;
    let report = if annotations.is_empty() {
        eprintln!(
            "warning: no annotations in the '{}' pool; writing an empty report",
            args.split.as_str()
        );
        EvalReport::empty(&args.k, args.iou_threshold)
    } else {
        stratified_report(&predictions, &annotations, &args.k, args.iou_threshold)?
    };

    tracker.write_output(&args.out.join("report.json"), report.to_json())?;
    tracker.write_output(&args.out.join("report.csv"), report.to_csv())?;
    tracker.write_output(
        &args.out.join("predictions.jsonl"),
        prediction_dump(&predictions),
    )?;
    print!("{}", report.to_csv());
    tracker.finish(
        &args.out,
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "corpus": args.corpus.display().to_string(),
            "split": args.split.as_str(),
            "k": args.k,
            "iou_threshold": args.iou_threshold,
            "ablation": train_config.ablation,
        }),
    )
}

// ── ablate ───────────────────────────────────────────────────────────

const TABLE_CELLS: [(&str, usize); 6] = [
    ("implicit", 1),
    ("implicit", 5),
    ("explicit", 1),
    ("explicit", 5),
    ("full", 1),
    ("full", 5),
];

fn cell_name(stratum: &str, k: usize) -> String {
    format!("{stratum}_r{k}")
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    if args.seeds.is_empty() {
        return Err(CliError::Config("--seeds needs at least one seed".into()));
    }
    let corpus = load_corpus(&args.train.corpus)?;
    let base = resolve_train_config(&args.train)?;
    let model_config = resolve_model_config(&args.train, &corpus);
    let annotations = corpus.annotations_for_split(Split::Test);

    ensure_dir(&args.train.out)?;
    let mut tracker = RunTracker::new("ablate", Some(base.seed));

    // per_seed[ablation] = one sample array per cell across seeds.
    let mut per_seed: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for ablation in Ablation::ALL {
        let ablation_cells = per_seed.entry(ablation.to_string()).or_default();
        for &seed in &args.seeds {
            let config = TrainConfig {
                seed,
                ablation,
                ..base.clone()
            };
            let outcome = run_training(&corpus, &model_config, &config)?;
            let predictions = predict_pairs(&outcome.model, ablation, &corpus.test)?;
            let report =
                stratified_report(&predictions, &annotations, &[1, 5], args.iou_threshold)?;
            for (stratum, k) in TABLE_CELLS {
                if let Some(metrics) = report.splits.get(stratum) {
                    ablation_cells
                        .entry(cell_name(stratum, k))
                        .or_default()
                        .push(metrics.recall[&k]);
                }
            }
            eprintln!("ablate: finished {ablation} seed {seed}");
        }
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut table_rows = Vec::new();
    let mut csv = String::from("ablation");
    for (stratum, k) in TABLE_CELLS {
        csv.push_str(&format!(",{}", cell_name(stratum, k)));
    }
    csv.push('\n');
    for ablation in Ablation::ALL {
        let cells = &per_seed[&ablation.to_string()];
        let mut row = serde_json::Map::new();
        row.insert("ablation".into(), json!(ablation.to_string()));
        csv.push_str(&ablation.to_string());
        for (stratum, k) in TABLE_CELLS {
            let name = cell_name(stratum, k);
            match cells.get(&name) {
                Some(samples) => {
                    let m = mean(samples);
                    row.insert(name, json!(m));
                    csv.push_str(&format!(",{m}"));
                }
                None => {
                    row.insert(name, serde_json::Value::Null);
                    csv.push(',');
                }
            }
        }
        csv.push('\n');
        table_rows.push(serde_json::Value::Object(row));
    }

    let report = json!({
        "seeds": args.seeds,
        "iou_threshold": args.iou_threshold,
        "per_seed": per_seed,
        "table": table_rows,
    });
    tracker.write_output(
        &args.train.out.join("ablation_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    tracker.write_output(&args.train.out.join("ablation_table.csv"), &csv)?;
    print!("{csv}");
    tracker.finish(
        &args.train.out,
        json!({
            "model": model_config,
            "train": base,
            "seeds": args.seeds,
            "corpus": args.train.corpus.display().to_string(),
        }),
    )
}

// ── gradcheck ────────────────────────────────────────────────────────

fn toy_heads(dim: usize) -> usize {
    [4usize, 2, 1]
        .into_iter()
        .find(|h| dim % h == 0)
        .unwrap_or(1)
}

/// Deliberately wrong gradient: the analytic pass treats one factor of
/// x⊙x as a constant, so it reports d/dx = x/n instead of 2x/n.
fn negative_control_error(eps: f64) -> Result<f64> {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, -1.5]).expect("literal shape");
    let worst = finite_diff_check(
        |tape, node| {
            let frozen = tape.detach(node);
            let squared = tape.mul(node, frozen)?;
            tape.mean_all(squared)
        },
        &x,
        eps,
    )?;
    Ok(worst)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let result: Result<f64> = if args.negative_control {
        let error = negative_control_error(args.eps)?;
        if error >= args.tolerance {
            Err(CliError::NegativeControlDetected(error))
        } else {
            Err(CliError::NegativeControlMissed(error))
        }
    } else {
        let synth = SynthConfig {
            train_pairs: 4,
            val_pairs: 2,
            test_pairs: 2,
            phrases_per_pair: args.phrases,
            regions_per_pair: args.regions,
            dim: args.dim,
            context_clusters: 8,
            seed: args.seed,
            ..SynthConfig::default()
        };
        let corpus = synth_generate(&synth)?;
        let model_config = ModelConfig {
            dim: args.dim,
            heads: toy_heads(args.dim),
            ida_layers: args.layers,
            dict_entries: args.dict_size,
            symmetric_contrastive: false,
        };
        let model = Model::init(&model_config, &corpus, args.seed)?;
        let batch: Vec<&PairedSample> = corpus.train.iter().take(2).collect();
        let worst = full_loss_gradient_check(&model, &batch, args.alpha, args.eps)?;
        println!(
            "gradient check: max relative error {worst:.3e} (tolerance {:.1e})",
            args.tolerance
        );
        if worst < args.tolerance {
            Ok(worst)
        } else {
            Err(CliError::GradcheckFailed {
                worst,
                tolerance: args.tolerance,
            })
        }
    };

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let tracker = RunTracker::new("gradcheck", Some(args.seed));
        let (error, passed) = match &result {
            Ok(worst) => (Some(*worst), true),
            Err(CliError::NegativeControlDetected(e)) => (Some(*e), true),
            Err(CliError::GradcheckFailed { worst, .. }) => (Some(*worst), false),
            Err(CliError::NegativeControlMissed(e)) => (Some(*e), false),
            Err(_) => (None, false),
        };
        tracker.finish(
            out,
            json!({
                "dim": args.dim,
                "layers": args.layers,
                "dict_size": args.dict_size,
                "phrases": args.phrases,
                "regions": args.regions,
                "seed": args.seed,
                "eps": args.eps,
                "tolerance": args.tolerance,
                "alpha": args.alpha,
                "negative_control": args.negative_control,
                "max_relative_error": error,
                "passed": passed,
            }),
        )?;
    }
    result.map(|_| ())
}
