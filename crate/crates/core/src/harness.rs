//! Experiment runner: configuration, synthetic workload, per-variant traces,
//! and the metrics report.
//!
//! Every request is generated from its own seeded stream, so all variants see
//! the same prompts, RTT samples and token streams. Outputs are CSV with
//! millisecond values rounded to the microsecond.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudsim::{
    serve_tokenized, simulate_batch, BatchModel, CloudError, Decision, Horizon,
};
use crate::devicesim::{run_session_tokenized, CorrectionPolicy, DeviceError, ScrubRule, Scrubber};
use crate::planner::{build_plan_table, PlanConstraints, PlanError, PlanTable, DEFAULT_BUCKETS};
use crate::protocol::{AssistRequest, TokenLimit};
use crate::refiner::{SyntheticScorer, TokenizedPrompt};
use crate::sim::{splitmix64, SimTime, TokenSource};
use crate::timing::{AffineCost, DeltaModel, RttClass, TimingModel};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("request {request}: {source}")]
    Cloud { request: String, source: CloudError },
    #[error("request {request}: {source}")]
    Device { request: String, source: DeviceError },
    #[error("trace {file}: missing column {column}")]
    MissingColumn { file: String, column: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(path: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudConfig {
    pub k_c: f64,
    pub tpot_c: f64,
    /// Batch capacity `B`.
    pub slots: usize,
    pub compress: AffineCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub k_d: f64,
    pub tpot_d: f64,
    pub decompress: AffineCost,
    #[serde(default)]
    pub policy: CorrectionPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub buckets: Vec<u64>,
    #[serde(default)]
    pub delta: DeltaModel,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            buckets: DEFAULT_BUCKETS.to_vec(),
            delta: DeltaModel::Conservative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Prompt lengths in tokens, drawn uniformly.
    pub prompt_lengths: Vec<u64>,
    pub prefix_tokens: u64,
    pub suffix_tokens: u64,
    pub mean_sentence_tokens: u64,
    /// Inclusive range of output lengths `n`.
    pub output_tokens: [u64; 2],
    /// Per-position chance that the device model disagrees with the cloud.
    pub divergence_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrubConfig {
    pub rules: Vec<ScrubRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Serve with the plan table.
    pub include_planned: bool,
    /// Serve the whole prompt and stream to the end.
    pub include_unbounded: bool,
    /// Fixed `L` values, with the planned `r`.
    pub assisted: Vec<u64>,
    /// Fixed `r` values, with the planned `L`.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Requests per variant.
    pub requests: usize,
    pub cloud: CloudConfig,
    pub network: RttClass,
    pub devices: BTreeMap<String, DeviceConfig>,
    pub scenes: BTreeMap<String, PlanConstraints>,
    #[serde(default)]
    pub planner: PlannerConfig,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub scrub: ScrubConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let base = TimingModel::default();
        Self {
            seed: 7,
            requests: 48,
            cloud: CloudConfig {
                k_c: base.k_c,
                tpot_c: base.tpot_c,
                slots: 64,
                compress: base.compress,
            },
            network: RttClass::wifi(),
            devices: BTreeMap::from([(
                "phone".to_owned(),
                DeviceConfig {
                    k_d: base.k_d,
                    tpot_d: base.tpot_d,
                    decompress: base.decompress,
                    policy: CorrectionPolicy::CloudWins,
                },
            )]),
            scenes: BTreeMap::from([
                ("qa".to_owned(), PlanConstraints { xi_scene: 0.5, tau: 100.0 }),
                ("summary".to_owned(), PlanConstraints { xi_scene: 0.25, tau: 100.0 }),
            ]),
            planner: PlannerConfig::default(),
            workload: WorkloadConfig {
                prompt_lengths: vec![4096, 8192, 16384, 32768],
                prefix_tokens: 64,
                suffix_tokens: 32,
                mean_sentence_tokens: 24,
                output_tokens: [64, 256],
                divergence_rate: 0.02,
            },
            scrub: ScrubConfig::default(),
            sweep: SweepConfig {
                include_planned: true,
                include_unbounded: true,
                assisted: vec![2, 5, 10, 20],
                ratios: vec![0.25, 0.5, 0.75, 1.0],
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn timing_model(&self, device: &DeviceConfig) -> TimingModel {
        TimingModel {
            k_c: self.cloud.k_c,
            k_d: device.k_d,
            tpot_c: self.cloud.tpot_c,
            tpot_d: device.tpot_d,
            rtt: self.network.clone(),
            compress: self.cloud.compress,
            decompress: device.decompress,
            delta: self.planner.delta,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.cloud.slots == 0 {
            return Err(config_err("cloud.slots", "must be >= 1"));
        }
        if !(self.network.mean_ms >= 0.0 && self.network.jitter_ms >= 0.0) {
            return Err(config_err("network", "mean_ms and jitter_ms must be >= 0"));
        }
        if self.devices.is_empty() {
            return Err(config_err("devices", "at least one device class is required"));
        }
        if self.scenes.is_empty() {
            return Err(config_err("scenes", "at least one scene is required"));
        }
        for (name, dev) in &self.devices {
            let model = self.timing_model(dev);
            model
                .validate()
                .map_err(|e| config_err(format!("devices.{name}"), e.to_string()))?;
            for (scene, c) in &self.scenes {
                c.validate(&model)
                    .map_err(|e| config_err(format!("scenes.{scene}"), format!("{e} (device {name})")))?;
            }
        }
        let w = &self.workload;
        if w.prompt_lengths.is_empty() {
            return Err(config_err("workload.prompt_lengths", "must not be empty"));
        }
        let fixed = w.prefix_tokens + w.suffix_tokens;
        if let Some(l) = w.prompt_lengths.iter().find(|&&l| l <= fixed) {
            return Err(config_err(
                "workload.prompt_lengths",
                format!("{l} leaves no room for content after {fixed} prefix and suffix tokens"),
            ));
        }
        if w.mean_sentence_tokens < 2 {
            return Err(config_err("workload.mean_sentence_tokens", "must be >= 2"));
        }
        let [lo, hi] = w.output_tokens;
        if lo == 0 || lo > hi {
            return Err(config_err("workload.output_tokens", format!("bad range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&w.divergence_rate) {
            return Err(config_err("workload.divergence_rate", "must lie in [0, 1]"));
        }
        let s = &self.sweep;
        if let Some(i) = s.assisted.iter().position(|&l| l == 0) {
            return Err(config_err(format!("sweep.assisted[{i}]"), "must be >= 1"));
        }
        if let Some(i) = s.ratios.iter().position(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(config_err(format!("sweep.ratios[{i}]"), "must lie in (0, 1]"));
        }
        if !s.include_planned && !s.include_unbounded && s.assisted.is_empty() && s.ratios.is_empty() {
            return Err(config_err("sweep", "no variants to run"));
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<Variant> {
        let s = &self.sweep;
        let mut out = Vec::new();
        if s.include_planned {
            out.push(Variant {
                name: "planned".into(),
                r: None,
                limit: None,
            });
        }
        for &l in &s.assisted {
            out.push(Variant {
                name: format!("L{l}"),
                r: None,
                limit: Some(TokenLimit::Tokens(l)),
            });
        }
        for &r in &s.ratios {
            out.push(Variant {
                name: format!("r{r}"),
                r: Some(r),
                limit: None,
            });
        }
        if s.include_unbounded {
            out.push(Variant {
                name: "unbounded".into(),
                r: Some(1.0),
                limit: Some(TokenLimit::Unbounded),
            });
        }
        out
    }

    pub fn plan_table(&self) -> Result<PlanTable, HarnessError> {
        let devices: Vec<(String, TimingModel)> = self
            .devices
            .iter()
            .map(|(n, d)| (n.clone(), self.timing_model(d)))
            .collect();
        let scenes: Vec<(String, PlanConstraints)> =
            self.scenes.iter().map(|(n, c)| (n.clone(), *c)).collect();
        Ok(build_plan_table(&devices, &scenes, &self.planner.buckets)?)
    }
}

/// One sweep point. `None` fields come from the plan table.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub r: Option<f64>,
    pub limit: Option<TokenLimit>,
}

impl Variant {
    fn decision(&self, table: &PlanTable, req: &AssistRequest, l: u64) -> Decision {
        let mut d = Decision::from_table(table, req, l);
        if let Some(r) = self.r {
            d.r = r;
        }
        if let Some(limit) = self.limit {
            d.limit = limit;
        }
        d
    }
}

/// A generated request together with everything random about it.
#[derive(Debug, Clone)]
pub struct Workitem {
    pub request: AssistRequest,
    pub prompt: TokenizedPrompt,
    pub rtt_sample: f64,
    pub output_tokens: u64,
    pub token_seed: u64,
    pub scorer_seed: u64,
    pub divergence: BTreeSet<u64>,
}

fn words(rng: &mut ChaCha8Rng, tag: char, n: u64, out: &mut String) {
    for _ in 0..n {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push(tag);
        out.push_str(&rng.random_range(0..5000u32).to_string());
    }
}

/// Content of exactly `n` tokens in sentences of mean length `mean`.
fn content_text(rng: &mut ChaCha8Rng, n: u64, mean: u64) -> String {
    let mut out = String::new();
    let mut left = n;
    while left > 0 {
        let len = rng.random_range(2..=2 * mean - 2).min(left);
        words(rng, 'w', len - 1, &mut out);
        out.push_str(if out.is_empty() { "." } else { " ." });
        left -= len;
    }
    out
}

pub fn generate_workitem(
    cfg: &ExperimentConfig,
    scrubber: &Scrubber,
    index: usize,
) -> Workitem {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(index as u64)));
    let scenes: Vec<&String> = cfg.scenes.keys().collect();
    let devices: Vec<&String> = cfg.devices.keys().collect();
    let scene = scenes[rng.random_range(0..scenes.len())].clone();
    let device_class = devices[rng.random_range(0..devices.len())].clone();
    let w = &cfg.workload;
    let l = w.prompt_lengths[rng.random_range(0..w.prompt_lengths.len())];
    let [n_lo, n_hi] = w.output_tokens;
    let output_tokens = rng.random_range(n_lo..=n_hi);
    let jitter = Normal::new(cfg.network.mean_ms, cfg.network.jitter_ms).expect("validated jitter");
    let rtt_sample = jitter.sample(&mut rng).max(0.0);
    let token_seed = rng.random();
    let scorer_seed = rng.random();
    let divergence = (1..output_tokens)
        .filter(|_| rng.random_bool(w.divergence_rate))
        .collect();

    let mut prefix = String::new();
    words(&mut rng, 'p', w.prefix_tokens, &mut prefix);
    let content = content_text(&mut rng, l - w.prefix_tokens - w.suffix_tokens, w.mean_sentence_tokens);
    let mut suffix = String::new();
    words(&mut rng, 'q', w.suffix_tokens, &mut suffix);

    let request = scrubber.scrub_request(&AssistRequest {
        scene,
        model_version_label: "sim-1".into(),
        device_class,
        prefix,
        content,
        suffix,
        request_id: format!("req-{index:06}"),
    });
    let prompt = TokenizedPrompt::from_text(&request.prefix, &request.content, &request.suffix);
    Workitem {
        request,
        prompt,
        rtt_sample,
        output_tokens,
        token_seed,
        scorer_seed,
        divergence,
    }
}

/// Round to the microsecond so that CSV text and in-memory values agree.
fn us(ms: f64) -> f64 {
    (ms * 1000.0).round() / 1000.0
}

/// One request under one variant. Column order is the file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub request_id: String,
    pub l: u64,
    pub r: f64,
    #[serde(rename = "L")]
    pub limit: String,
    pub ttft_c: f64,
    pub occupancy: f64,
    pub tokens_emitted: u64,
    pub scene: String,
    pub device_class: String,
    pub rtt_ms: f64,
    pub user_ttft: f64,
    pub ttft_d: f64,
    pub tpot_smooth: Option<f64>,
    pub max_display_gap: Option<f64>,
    pub mean_display_gap: Option<f64>,
    pub handoff_gap: Option<f64>,
    pub tau: f64,
    /// Largest assisted display gap exceeds `tau` by more than one tick.
    pub over_tau: bool,
    pub corrections: u64,
    pub common_prefix_len: u64,
    pub mask_bytes: u64,
    pub popcount: u64,
    pub stalls: u64,
    pub planning_miss: bool,
}

/// Display gaps up to this multiple of `tau` count as slightly over.
pub const SLIGHT: f64 = 1.1;

pub const TRACE_COLUMNS: [&str; 24] = [
    "request_id",
    "l",
    "r",
    "L",
    "ttft_c",
    "occupancy",
    "tokens_emitted",
    "scene",
    "device_class",
    "rtt_ms",
    "user_ttft",
    "ttft_d",
    "tpot_smooth",
    "max_display_gap",
    "mean_display_gap",
    "handoff_gap",
    "tau",
    "over_tau",
    "corrections",
    "common_prefix_len",
    "mask_bytes",
    "popcount",
    "stalls",
    "planning_miss",
];

pub fn run_variant(
    cfg: &ExperimentConfig,
    table: &PlanTable,
    variant: &Variant,
    items: &[Workitem],
) -> Result<Vec<TraceRow>, HarnessError> {
    items
        .iter()
        .map(|item| {
            let req = &item.request;
            let device = &cfg.devices[&req.device_class];
            let model = cfg.timing_model(device);
            let l = item.prompt.len() as u64;
            let decision = variant.decision(table, req, l);
            let cloud_source = TokenSource::new(item.token_seed, item.output_tokens);
            let device_source = cloud_source.clone().with_divergence(item.divergence.iter().copied());
            let scorer = SyntheticScorer {
                seed: item.scorer_seed,
            };
            let cloud = serve_tokenized(
                req,
                &item.prompt,
                decision,
                &model,
                &cloud_source,
                &scorer,
                item.rtt_sample,
            )
            .map_err(|source| HarnessError::Cloud {
                request: req.request_id.clone(),
                source,
            })?;
            let trace = run_session_tokenized(&item.prompt, &cloud.wire, &model, &device_source, device.policy)
                .map_err(|source| HarnessError::Device {
                    request: req.request_id.clone(),
                    source,
                })?;
            let tau = cfg.scenes[&req.scene].tau;
            let max_gap = trace.max_assisted_gap();
            let rec = &cloud.record;
            Ok(TraceRow {
                request_id: req.request_id.clone(),
                l,
                r: rec.decision.r,
                limit: rec.decision.limit.to_string(),
                ttft_c: us(rec.ttft_c),
                occupancy: us(rec.occupancy),
                tokens_emitted: rec.tokens_emitted,
                scene: req.scene.clone(),
                device_class: req.device_class.clone(),
                rtt_ms: us(item.rtt_sample),
                user_ttft: us(trace.user_ttft),
                ttft_d: us(trace.ttft_d),
                tpot_smooth: trace.tpot_smooth.map(us),
                max_display_gap: max_gap.map(us),
                mean_display_gap: trace.mean_assisted_gap().map(us),
                handoff_gap: trace.handoff_gap().map(us),
                tau,
                over_tau: rec.decision.limit != TokenLimit::Unbounded
                    && max_gap.is_some_and(|g| g > tau + SimTime::TICK_MS),
                corrections: trace.corrections,
                common_prefix_len: trace.common_prefix_len,
                mask_bytes: rec.mask_bytes as u64,
                popcount: rec.popcount,
                stalls: trace.stalls,
                planning_miss: rec.decision.planning_miss,
            })
        })
        .collect()
}

pub fn write_traces<W: Write>(rows: &[TraceRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces<R: Read>(input: R, file: &str) -> Result<Vec<TraceRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    for col in TRACE_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(HarnessError::MissingColumn {
                file: file.to_owned(),
                column: col.to_owned(),
            });
        }
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Read every `trace_<variant>.csv` in `dir`.
pub fn read_trace_dir(dir: &Path) -> Result<Vec<(String, Vec<TraceRow>)>, HarnessError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(variant) = name.strip_prefix("trace_").and_then(|n| n.strip_suffix(".csv")) {
            let rows = read_traces(fs::File::open(&path)?, name)?;
            out.push((variant.to_owned(), rows));
        }
    }
    Ok(out)
}

/// Per-variant aggregates. Percentiles use the nearest-rank method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub requests: u64,
    pub mean_user_ttft: f64,
    pub p50_user_ttft: f64,
    pub p95_user_ttft: f64,
    pub mean_ttft_d: f64,
    pub p95_ttft_d: f64,
    pub mean_tpot_smooth: Option<f64>,
    pub max_display_gap: Option<f64>,
    pub mean_display_gap: Option<f64>,
    pub over_tau: u64,
    /// Of `over_tau`, requests whose largest gap is more than 10% over.
    pub far_over_tau: u64,
    pub mean_occupancy: f64,
    pub cloud_tps: f64,
    pub analytic_tps: f64,
    pub corrections: u64,
    pub mean_common_prefix: f64,
    pub mean_mask_bytes: f64,
    pub p50_mask_bytes: f64,
    pub planning_misses: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub slots: usize,
    pub variants: Vec<VariantSummary>,
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the sample at or below it.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(p > 0.0 && p <= 100.0) {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn sorted(xs: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = xs.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Measurement length for cloud throughput: at least 1000 completions, in
/// whole rounds of the batch.
pub fn throughput_horizon(slots: usize) -> Horizon {
    let b = slots as u64;
    Horizon {
        warmup: 2 * b,
        completions: 1000u64.max(20 * b).div_ceil(b) * b,
    }
}

/// Aggregate traces per variant. Variants with no rows are left out; output
/// is ordered by variant name.
pub fn report(traces: &[(String, Vec<TraceRow>)], slots: usize) -> Result<MetricsReport, HarnessError> {
    if slots == 0 {
        return Err(config_err("cloud.slots", "must be >= 1"));
    }
    let mut variants = Vec::new();
    for (name, rows) in traces {
        if rows.is_empty() {
            continue;
        }
        let occupancies: Vec<f64> = rows.iter().map(|r| r.occupancy).collect();
        let tps = simulate_batch(&BatchModel::closed_loop(slots), &occupancies, throughput_horizon(slots), 0)
            .map_err(|source| HarnessError::Cloud {
                request: format!("{name} throughput"),
                source,
            })?;
        let user = sorted(rows.iter().map(|r| r.user_ttft));
        let ttft_d = sorted(rows.iter().map(|r| r.ttft_d));
        let masks = sorted(rows.iter().map(|r| r.mask_bytes as f64));
        variants.push(VariantSummary {
            variant: name.clone(),
            requests: rows.len() as u64,
            mean_user_ttft: us(mean(user.iter().copied()).unwrap_or_default()),
            p50_user_ttft: percentile(&user, 50.0).unwrap_or_default(),
            p95_user_ttft: percentile(&user, 95.0).unwrap_or_default(),
            mean_ttft_d: us(mean(ttft_d.iter().copied()).unwrap_or_default()),
            p95_ttft_d: percentile(&ttft_d, 95.0).unwrap_or_default(),
            mean_tpot_smooth: mean(rows.iter().filter_map(|r| r.tpot_smooth)).map(us),
            max_display_gap: rows.iter().filter_map(|r| r.max_display_gap).reduce(f64::max),
            mean_display_gap: mean(rows.iter().filter_map(|r| r.mean_display_gap)).map(us),
            over_tau: rows.iter().filter(|r| r.over_tau).count() as u64,
            far_over_tau: rows
                .iter()
                .filter(|r| r.over_tau && r.max_display_gap.is_some_and(|g| g > SLIGHT * r.tau))
                .count() as u64,
            mean_occupancy: us(tps.mean_occupancy),
            cloud_tps: us(tps.tps),
            analytic_tps: us(tps.analytic_tps),
            corrections: rows.iter().map(|r| r.corrections).sum(),
            mean_common_prefix: us(mean(rows.iter().map(|r| r.common_prefix_len as f64)).unwrap_or_default()),
            mean_mask_bytes: us(mean(masks.iter().copied()).unwrap_or_default()),
            p50_mask_bytes: percentile(&masks, 50.0).unwrap_or_default(),
            planning_misses: rows.iter().filter(|r| r.planning_miss).count() as u64,
        });
    }
    variants.sort_by(|a, b| a.variant.cmp(&b.variant));
    Ok(MetricsReport { slots, variants })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_owned(), |v| format!("{v:.3}"))
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        for v in &self.variants {
            w.serialize(v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("cloud slots: {}\n", self.slots);
        if self.variants.is_empty() {
            s.push_str("no requests\n");
            return s;
        }
        s.push_str(&format!(
            "{:<12} {:>5} {:>10} {:>10} {:>10} {:>11} {:>9} {:>9} {:>10} {:>9} {:>7}\n",
            "variant", "n", "user_ttft", "p95_ttft", "ttft_d", "tpot_smooth", "max_gap", "tps", "occupancy", "mask_B", "fixes"
        ));
        for v in &self.variants {
            s.push_str(&format!(
                "{:<12} {:>5} {:>10.3} {:>10.3} {:>10.3} {:>11} {:>9} {:>9.3} {:>10.3} {:>9.1} {:>7}\n",
                v.variant,
                v.requests,
                v.mean_user_ttft,
                v.p95_user_ttft,
                v.mean_ttft_d,
                opt(v.mean_tpot_smooth),
                opt(v.max_display_gap),
                v.cloud_tps,
                v.mean_occupancy,
                v.mean_mask_bytes,
                v.corrections,
            ));
        }
        for v in &self.variants {
            let slight = v.over_tau - v.far_over_tau;
            if slight > 0 {
                s.push_str(&format!(
                    "{}: display TPOT slightly larger than tau in {} of {} requests\n",
                    v.variant, slight, v.requests
                ));
            }
            if v.far_over_tau > 0 {
                s.push_str(&format!(
                    "{}: display TPOT more than 10% over tau in {} of {} requests\n",
                    v.variant, v.far_over_tau, v.requests
                ));
            }
            if v.planning_misses > 0 {
                s.push_str(&format!("{}: {} requests had no plan\n", v.variant, v.planning_misses));
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub plan_table: PlanTable,
    pub traces: Vec<(String, Vec<TraceRow>)>,
    pub report: MetricsReport,
}

/// Run every variant over the same generated workload. With `out`, write
/// `plan.csv`, one `trace_<variant>.csv` per variant, `summary.csv` and
/// `summary.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let table = cfg.plan_table()?;
    let scrubber = Scrubber::new(&cfg.scrub.rules).map_err(|e| config_err("scrub.rules", e.to_string()))?;
    let items: Vec<Workitem> = (0..cfg.requests)
        .map(|i| generate_workitem(cfg, &scrubber, i))
        .collect();
    let traces = cfg
        .variants()
        .iter()
        .map(|v| Ok((v.name.clone(), run_variant(cfg, &table, v, &items)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let report = report(&traces, cfg.cloud.slots)?;

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        table.write_csv(fs::File::create(dir.join("plan.csv"))?)?;
        for (name, rows) in &traces {
            write_traces(rows, fs::File::create(dir.join(format!("trace_{name}.csv")))?)?;
        }
        report.write_csv(fs::File::create(dir.join("summary.csv"))?)?;
        fs::write(dir.join("summary.txt"), report.to_text())?;
    }
    Ok(ExperimentOutput {
        plan_table: table,
        traces,
        report,
    })
}
