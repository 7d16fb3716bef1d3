//! JSON report bodies emitted by `eval`, `consistency`, and `select`.

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct MetricBlock {
    pub ap: f64,
    /// Rank correlations against the soft label scores; absent when
    /// undefined (constant vectors).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kendall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    /// F1 between the binarized prediction and the binarized labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EpisodeReport {
    pub video: MetricBlock,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dialog: Option<MetricBlock>,
}

#[derive(Debug, Serialize)]
pub struct EvalConfig {
    pub scores: String,
    pub labels: String,
    pub binarize_threshold: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
    pub config: EvalConfig,
    pub episodes: BTreeMap<String, EpisodeReport>,
    pub macro_video_ap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_dialog_ap: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct AgreementBlock {
    pub cronbach_alpha: Option<f64>,
    pub pairwise_f1: Option<f64>,
    pub fleiss_kappa: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ConsistencyConfig {
    pub labels: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct ConsistencyReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
    pub config: ConsistencyConfig,
    pub video: AgreementBlock,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dialog: Option<AgreementBlock>,
}

#[derive(Debug, Serialize)]
pub struct SelectConfig {
    pub scores: String,
    pub episode: String,
    pub budget_fraction: f64,
}

#[derive(Debug, Serialize)]
pub struct SummaryReport {
    pub episode_id: String,
    pub config: SelectConfig,
    pub total_duration_s: f64,
    pub selected_duration_s: f64,
    pub selected_shots: Vec<u32>,
}

#[derive(Debug, Serialize)]
pub struct MatchReportEntry {
    pub recap_shot: u32,
    pub candidates: Vec<u32>,
    pub scores: Vec<(u32, f64)>,
    pub best_shot: Option<u32>,
    pub matched: Vec<u32>,
    pub truncated: bool,
}

#[derive(Debug, Serialize)]
pub struct MatchReport {
    pub episode_id: String,
    pub recap_id: String,
    pub config: MatchCliConfig,
    pub results: Vec<MatchReportEntry>,
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct MatchCliConfig {
    pub sim_threshold: f64,
    pub top_k: usize,
    pub window_radius: usize,
    pub backbone: usize,
}

/// `matches.json` is both written by `match` and read back by `smooth`.
#[derive(Debug, serde::Deserialize)]
pub struct MatchReportIn {
    pub episode_id: String,
    pub results: Vec<MatchEntryIn>,
}

#[derive(Debug, serde::Deserialize)]
pub struct MatchEntryIn {
    pub matched: Vec<u32>,
}
