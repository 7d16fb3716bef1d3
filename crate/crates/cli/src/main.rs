//! Command-line pipeline: synthesize data, match recaps, smooth labels,
//! train, predict, evaluate, measure agreement, and select summaries.
//!
//! Exit codes: 0 on success, 1 for validation problems (bad flags, missing
//! or malformed files), 2 for internal failures. Log verbosity comes from
//! the `STORYSUMM_LOG` environment variable.

mod reports;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use storysumm::error::Error as CoreError;
use storysumm::io::{
    load_checkpoint, load_labels, load_manifest, load_scores, save_checkpoint, save_labels,
    save_scores, synth_generate, write_synth, CheckpointMeta, SynthConfig,
};
use storysumm::labeling::{
    binary_labels_from_matches, inherit_dialog_labels, match_recap_shot, triangle_smooth, LabelSet,
    MatchConfig, MatchResult, Provenance, SmoothConfig,
};
use storysumm::metrics::{
    average_precision, cronbach_alpha, fleiss_kappa, knapsack_select, pairwise_f1,
    rank_correlation, CorrelationKind, RaterMatrix,
};
use storysumm::model::{train as train_model, EpisodeScores, ModelConfig, TrainConfig};

use reports::*;

#[derive(Parser)]
#[command(
    name = "storysumm",
    version,
    about = "Recap-driven story summarization pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode/recap pair with planted ground truth.
    Synth(SynthArgs),
    /// Match recap shots back into an episode.
    Match(MatchArgs),
    /// Turn matches into soft labels (triangle smoothing + dialog inheritance).
    Smooth(SmoothArgs),
    /// Train the importance model on manifest lists.
    Train(TrainArgs),
    /// Score an episode with a trained checkpoint.
    Predict(PredictArgs),
    /// Evaluate scores against labels (AP, rank correlations, F1).
    Eval(EvalArgs),
    /// Agreement statistics across label sources.
    Consistency(ConsistencyArgs),
    /// Budgeted summary selection from scores.
    Select(SelectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MatchArgs {
    /// Episode manifest JSON.
    #[arg(long)]
    episode: PathBuf,
    /// Recap manifest JSON.
    #[arg(long)]
    recap: PathBuf,
    /// Cosine similarity threshold in (0, 1].
    #[arg(long, default_value_t = 0.85)]
    threshold: f64,
    /// Matched frames scored per recap frame.
    #[arg(long, default_value_t = 3)]
    topk: usize,
    /// Shot-index radius of the windowed closure.
    #[arg(long, default_value_t = 10)]
    window_radius: usize,
    /// Backbone used for matching (0..3).
    #[arg(long, default_value_t = 0)]
    backbone: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SmoothArgs {
    /// matches.json written by the match subcommand.
    #[arg(long)]
    matches: PathBuf,
    #[arg(long)]
    episode: PathBuf,
    /// Odd triangle window width.
    #[arg(long, default_value_t = 17)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Text file with one episode manifest path per line.
    #[arg(long)]
    train_list: PathBuf,
    /// Validation manifest list; may be an empty file.
    #[arg(long)]
    val_list: Option<PathBuf>,
    /// Model config JSON.
    #[arg(long)]
    model_config: PathBuf,
    #[arg(long, default_value_t = 65)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    episode: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Binarization threshold for AP and F1.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Omit the timestamp so reruns are byte-identical.
    #[arg(long)]
    no_timestamp: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConsistencyArgs {
    /// Two or more label files over the same episode.
    #[arg(long, num_args = 2..)]
    labels: Vec<PathBuf>,
    #[arg(long)]
    no_timestamp: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    episode: PathBuf,
    /// Summary budget as a fraction of total shot duration.
    #[arg(long, default_value_t = 0.15)]
    budget: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter("STORYSUMM_LOG")
            .default_filter_or("warn"),
    )
    .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and exit cleanly.
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };

    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Match(a) => cmd_match(a),
        Command::Smooth(a) => cmd_smooth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Consistency(a) => cmd_consistency(a),
        Command::Select(a) => cmd_select(a),
    };

    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}

/// Validation problems exit 1, internal failures exit 2.
fn exit_code(e: &anyhow::Error) -> i32 {
    if let Some(core) = e.downcast_ref::<CoreError>() {
        return match core {
            CoreError::Invalid(_)
            | CoreError::Shape { .. }
            | CoreError::Manifest(_)
            | CoreError::TensorFormat { .. }
            | CoreError::UnsupportedVersion { .. }
            | CoreError::ConfigMismatch(_)
            | CoreError::Checkpoint(_)
            | CoreError::Metric(_)
            | CoreError::Json(_) => 1,
            CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 1,
            _ => 2,
        };
    }
    if let Some(io) = e.downcast_ref::<std::io::Error>() {
        return if io.kind() == std::io::ErrorKind::NotFound {
            1
        } else {
            2
        };
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return 1;
    }
    2
}

fn now_unix(suppress: bool) -> Option<u64> {
    if suppress {
        return None;
    }
    Some(
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    )
}

fn read_json_file<D: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<D> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", path.display())))?;
    let value = serde_json::from_str(&text)
        .map_err(|e| anyhow::Error::new(e).context(format!("parsing {}", path.display())))?;
    Ok(value)
}

fn write_json_file<S: serde::Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = read_json_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = synth_generate(&cfg)?;
    write_synth(&args.out_dir, &out)?;
    log::info!(
        "wrote synthetic episode ({} shots, {} planted) under {}",
        out.episode.num_shots(),
        out.planted_shots.len(),
        args.out_dir.display()
    );
    println!(
        "episode: {}",
        args.out_dir.join("episode/manifest.json").display()
    );
    println!(
        "recap: {}",
        args.out_dir.join("recap/manifest.json").display()
    );
    Ok(())
}

fn cmd_match(args: MatchArgs) -> anyhow::Result<()> {
    let cfg = MatchConfig {
        sim_threshold: args.threshold,
        top_k: args.topk,
        window_radius: args.window_radius,
        ..Default::default()
    };
    cfg.validate()?;

    let episode = load_manifest(&args.episode)?;
    let recap = load_manifest(&args.recap)?;
    let episode_bank = episode.frame_bank(args.backbone)?;
    let recap_bank = recap.frame_bank(args.backbone)?;

    let mut results = Vec::with_capacity(recap_bank.num_shots());
    for (i, shot) in recap_bank.shots().iter().enumerate() {
        let r: MatchResult = match_recap_shot(shot, &episode_bank, &cfg)?;
        results.push(MatchReportEntry {
            recap_shot: i as u32,
            candidates: r.candidates.iter().map(|&s| s as u32).collect(),
            scores: r.scores.iter().map(|&(s, v)| (s as u32, v)).collect(),
            best_shot: r.best_shot.map(|s| s as u32),
            matched: r.matched.iter().map(|&s| s as u32).collect(),
            truncated: r.truncated,
        });
    }
    let matched_total: usize = results.iter().map(|r| r.matched.len()).sum();
    log::info!(
        "matched {} recap shots onto {} episode shot slots",
        results.len(),
        matched_total
    );

    let report = MatchReport {
        episode_id: episode.manifest.episode_id.clone(),
        recap_id: recap.manifest.episode_id.clone(),
        config: MatchCliConfig {
            sim_threshold: cfg.sim_threshold,
            top_k: cfg.top_k,
            window_radius: cfg.window_radius,
            backbone: args.backbone,
        },
        results,
    };
    write_json_file(&args.out, &report)
}

fn cmd_smooth(args: SmoothArgs) -> anyhow::Result<()> {
    let matches: MatchReportIn = read_json_file(&args.matches)?;
    let episode = load_manifest(&args.episode)?;
    if matches.episode_id != episode.manifest.episode_id {
        anyhow::bail!(CoreError::Manifest(format!(
            "matches were computed for episode {} but the manifest is {}",
            matches.episode_id, episode.manifest.episode_id
        )));
    }

    let results: Vec<MatchResult> = matches
        .results
        .iter()
        .map(|e| MatchResult {
            matched: e.matched.iter().map(|&s| s as usize).collect(),
            ..Default::default()
        })
        .collect();
    let n = episode.features.num_shots();
    let binary = binary_labels_from_matches(&results, n)?;
    let smooth_cfg = SmoothConfig {
        window: args.window,
    };
    let shot_scores = triangle_smooth(&binary, &smooth_cfg)?;
    let dialog_scores = inherit_dialog_labels(
        &shot_scores,
        &episode.shot_spans(),
        &episode.utterance_spans(),
    )?;
    let labels = LabelSet {
        shot_scores,
        dialog_scores,
        provenance: Provenance::RecapDerived,
        binarize_threshold: 0.5,
    };
    save_labels(&args.out, &episode.manifest.episode_id, &labels)?;
    Ok(())
}

/// Manifest paths resolve relative to the list file's directory.
fn read_manifest_list(list: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(list)
        .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", list.display())))?;
    let base = list.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

fn load_training_set(
    paths: &[PathBuf],
) -> anyhow::Result<Vec<(storysumm::model::EpisodeFeatures<f32>, LabelSet)>> {
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let episode = load_manifest(path)?;
        let label_path = episode.label_path().ok_or_else(|| {
            CoreError::Manifest(format!(
                "manifest {} does not reference a label file",
                path.display()
            ))
        })?;
        let (label_episode, labels) = load_labels(&label_path)?;
        if label_episode != episode.manifest.episode_id {
            anyhow::bail!(CoreError::Manifest(format!(
                "label file {} belongs to episode {label_episode}, not {}",
                label_path.display(),
                episode.manifest.episode_id
            )));
        }
        out.push((episode.features, labels));
    }
    Ok(out)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let model_cfg: ModelConfig = read_json_file(&args.model_config)?;
    model_cfg.validate()?;
    let train_paths = read_manifest_list(&args.train_list)?;
    if train_paths.is_empty() {
        anyhow::bail!(CoreError::Invalid("train list is empty".into()));
    }
    let val_paths = match &args.val_list {
        Some(p) => read_manifest_list(p)?,
        None => Vec::new(),
    };
    let train_set = load_training_set(&train_paths)?;
    let val_set = load_training_set(&val_paths)?;

    let train_cfg = TrainConfig {
        max_epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        ..Default::default()
    };
    log::info!(
        "training on {} episodes ({} validation) for {} epochs",
        train_set.len(),
        val_set.len(),
        args.epochs
    );
    let out = train_model(&train_set, &val_set, &model_cfg, &train_cfg)?;

    save_checkpoint(
        &args.out,
        &out.params,
        &model_cfg,
        &CheckpointMeta {
            seed: args.seed,
            epoch: out.best_epoch,
        },
        None,
    )?;
    write_json_file(&args.out.join("history.json"), &out.history)?;
    let last = out.history.last().expect("at least one epoch");
    println!(
        "best epoch {} (final train loss {:.6}), checkpoint at {}",
        out.best_epoch,
        last.train_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.ckpt, None)?;
    let episode = load_manifest(&args.episode)?;
    let scores = storysumm::model::predict(&episode.features, &ckpt.params, &ckpt.config)?;
    save_scores(&args.out, &episode.manifest.episode_id, &scores)?;
    Ok(())
}

fn metric_block(predicted: &[f64], target: &[f64], threshold: f64) -> anyhow::Result<MetricBlock> {
    let binary: Vec<bool> = target.iter().map(|&y| y >= threshold).collect();
    let ap = average_precision(predicted, &binary).map_err(anyhow::Error::new)?;
    let kendall = rank_correlation(predicted, target, CorrelationKind::Kendall).ok();
    let spearman = rank_correlation(predicted, target, CorrelationKind::Spearman).ok();
    let pred_sel: Vec<bool> = predicted.iter().map(|&p| p >= threshold).collect();
    let inter = pred_sel
        .iter()
        .zip(&binary)
        .filter(|&(&a, &b)| a && b)
        .count();
    let denom = pred_sel.iter().filter(|&&b| b).count() + binary.iter().filter(|&&b| b).count();
    let f1 = (denom > 0).then(|| 2.0 * inter as f64 / denom as f64);
    Ok(MetricBlock {
        ap,
        kendall,
        spearman,
        f1,
    })
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        anyhow::bail!(CoreError::Invalid(format!(
            "--threshold must be in (0, 1), got {}",
            args.threshold
        )));
    }
    let (score_episode, scores): (String, EpisodeScores) =
        load_scores(&args.scores).or_else(|_| {
            // Labels are valid score sources too (e.g. recap-derived labels
            // evaluated against planted truth).
            let (id, l) = load_labels(&args.scores)?;
            let clamp = |v: &[f64]| {
                v.iter()
                    .map(|&x| x.clamp(1e-7, 1.0 - 1e-7))
                    .collect::<Vec<_>>()
            };
            Ok::<_, CoreError>((
                id,
                EpisodeScores {
                    shot_scores: clamp(&l.shot_scores),
                    dialog_scores: clamp(&l.dialog_scores),
                },
            ))
        })?;
    let (label_episode, labels) = load_labels(&args.labels)?;
    if score_episode != label_episode {
        anyhow::bail!(CoreError::Manifest(format!(
            "scores are for episode {score_episode} but labels are for {label_episode}"
        )));
    }
    if scores.shot_scores.len() != labels.shot_scores.len()
        || scores.dialog_scores.len() != labels.dialog_scores.len()
    {
        anyhow::bail!(CoreError::Manifest(format!(
            "scores and labels disagree on sizes: {}/{} vs {}/{}",
            scores.shot_scores.len(),
            scores.dialog_scores.len(),
            labels.shot_scores.len(),
            labels.dialog_scores.len()
        )));
    }

    let video = metric_block(&scores.shot_scores, &labels.shot_scores, args.threshold)?;
    let dialog = if scores.dialog_scores.is_empty() {
        None
    } else {
        metric_block(&scores.dialog_scores, &labels.dialog_scores, args.threshold).ok()
    };

    let macro_video_ap = video.ap;
    let macro_dialog_ap = dialog.as_ref().map(|d| d.ap);
    let mut episodes = BTreeMap::new();
    episodes.insert(score_episode, EpisodeReport { video, dialog });

    let report = EvalReport {
        generated_at_unix: now_unix(args.no_timestamp),
        config: EvalConfig {
            scores: args.scores.display().to_string(),
            labels: args.labels.display().to_string(),
            binarize_threshold: args.threshold,
        },
        episodes,
        macro_video_ap,
        macro_dialog_ap,
    };
    write_json_file(&args.out, &report)?;
    println!("video_ap: {macro_video_ap:.6}");
    if let Some(d) = macro_dialog_ap {
        println!("dialog_ap: {d:.6}");
    }
    Ok(())
}

fn agreement_block(rows: Vec<Vec<f64>>, thresholds: Vec<f64>) -> anyhow::Result<AgreementBlock> {
    let m = RaterMatrix::new(rows, thresholds).map_err(anyhow::Error::new)?;
    Ok(AgreementBlock {
        cronbach_alpha: cronbach_alpha(&m).ok(),
        pairwise_f1: pairwise_f1(&m).ok(),
        fleiss_kappa: fleiss_kappa(&m).ok(),
    })
}

fn cmd_consistency(args: ConsistencyArgs) -> anyhow::Result<()> {
    let mut episode_id: Option<String> = None;
    let mut shot_rows = Vec::new();
    let mut dialog_rows = Vec::new();
    let mut thresholds = Vec::new();
    for path in &args.labels {
        let (id, labels) = load_labels(path)?;
        if let Some(prev) = &episode_id {
            if *prev != id {
                anyhow::bail!(CoreError::Manifest(format!(
                    "label files mix episodes {prev} and {id}"
                )));
            }
        } else {
            episode_id = Some(id);
        }
        shot_rows.push(labels.shot_scores.clone());
        dialog_rows.push(labels.dialog_scores.clone());
        thresholds.push(labels.binarize_threshold);
    }

    let video = agreement_block(shot_rows, thresholds.clone())?;
    let dialog = if dialog_rows.iter().all(|r| !r.is_empty()) {
        Some(agreement_block(dialog_rows, thresholds)?)
    } else {
        None
    };

    let report = ConsistencyReport {
        generated_at_unix: now_unix(args.no_timestamp),
        config: ConsistencyConfig {
            labels: args
                .labels
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
        },
        video,
        dialog,
    };
    write_json_file(&args.out, &report)
}

fn cmd_select(args: SelectArgs) -> anyhow::Result<()> {
    let (score_episode, scores) = load_scores(&args.scores).or_else(|_| {
        let (id, l) = load_labels(&args.scores)?;
        let clamp = |v: &[f64]| {
            v.iter()
                .map(|&x| x.clamp(1e-7, 1.0 - 1e-7))
                .collect::<Vec<_>>()
        };
        Ok::<_, CoreError>((
            id,
            EpisodeScores {
                shot_scores: clamp(&l.shot_scores),
                dialog_scores: clamp(&l.dialog_scores),
            },
        ))
    })?;
    let episode = load_manifest(&args.episode)?;
    if score_episode != episode.manifest.episode_id {
        anyhow::bail!(CoreError::Manifest(format!(
            "scores are for episode {score_episode} but the manifest is {}",
            episode.manifest.episode_id
        )));
    }
    let durations: Vec<f64> = episode
        .shot_spans()
        .iter()
        .map(|&(s, e)| (e - s).max(1e-9))
        .collect();
    if durations.len() != scores.shot_scores.len() {
        anyhow::bail!(CoreError::Manifest(format!(
            "{} scores for {} shots",
            scores.shot_scores.len(),
            durations.len()
        )));
    }
    let selected = knapsack_select(&scores.shot_scores, &durations, args.budget)?;
    let selected_duration: f64 = selected.iter().map(|&i| durations[i]).sum();
    let report = SummaryReport {
        episode_id: episode.manifest.episode_id.clone(),
        config: SelectConfig {
            scores: args.scores.display().to_string(),
            episode: args.episode.display().to_string(),
            budget_fraction: args.budget,
        },
        total_duration_s: durations.iter().sum(),
        selected_duration_s: selected_duration,
        selected_shots: selected.iter().map(|&i| i as u32).collect(),
    };
    write_json_file(&args.out, &report)?;
    println!(
        "selected {} of {} shots ({:.1}s)",
        report.selected_shots.len(),
        durations.len(),
        selected_duration
    );
    Ok(())
}
