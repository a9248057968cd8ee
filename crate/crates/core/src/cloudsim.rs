//! Cloud side of an assisted request: prefill, refinement, first frame, and
//! early-terminated decoding; plus slot-occupancy throughput simulation.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::maskcodec::{self, CompressedMask};
use crate::planner::{Plan, PlanTable};
use crate::protocol::{
    encode_done, encode_first_frame, encode_stream_event, AssistRequest, FirstTokenFrame,
    ProtocolError, StreamEvent, TokenLimit,
};
use crate::refiner::{refine, ImportanceScorer, RefineError, TokenizedPrompt};
use crate::sim::{Scheduler, SimTime, TokenSource};
use crate::timing::{request_occupancy, TimingError, TimingModel};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("invalid batch model: {0}")]
    Batch(String),
}

/// What the cloud does for one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub r: f64,
    pub limit: TokenLimit,
    pub plan: Option<Plan>,
    pub planning_miss: bool,
}

impl Decision {
    pub fn fixed(r: f64, limit: TokenLimit) -> Self {
        Self {
            r,
            limit,
            plan: None,
            planning_miss: false,
        }
    }

    /// Look up the plan for this request; without one, serve the whole
    /// prompt and stream to the end.
    pub fn from_table(table: &PlanTable, req: &AssistRequest, prompt_len: u64) -> Self {
        match table.lookup(&req.scene, &req.device_class, prompt_len) {
            Some(plan) => Self {
                r: plan.r,
                limit: TokenLimit::Tokens(plan.assisted),
                plan: Some(*plan),
                planning_miss: false,
            },
            None => Self {
                r: 1.0,
                limit: TokenLimit::Unbounded,
                plan: None,
                planning_miss: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub request_id: String,
    pub prompt_len: u64,
    pub decision: Decision,
    pub tokens_emitted: u64,
    pub ttft_c: f64,
    /// Slot hold time, `ttft_c + tpot_c * (tokens_emitted - 1)`.
    pub occupancy: f64,
    /// Container size of the compressed mask.
    pub mask_bytes: usize,
    pub popcount: u64,
}

/// Bytes put on the wire at a simulated instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireChunk {
    pub at: SimTime,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct CloudSession {
    pub frame: FirstTokenFrame,
    pub events: Vec<StreamEvent>,
    pub wire: Vec<WireChunk>,
    pub record: SessionRecord,
}

/// Serve with the plan from `table`.
pub fn serve_request(
    req: &AssistRequest,
    table: &PlanTable,
    model: &TimingModel,
    source: &TokenSource,
    scorer: &dyn ImportanceScorer,
    rtt_sample: f64,
) -> Result<CloudSession, CloudError> {
    req.validate()?;
    let prompt = TokenizedPrompt::from_text(&req.prefix, &req.content, &req.suffix);
    let decision = Decision::from_table(table, req, prompt.len() as u64);
    serve_tokenized(req, &prompt, decision, model, source, scorer, rtt_sample)
}

/// Serve with an explicit decision, e.g. a sweep override. Times are
/// measured from the moment the request was issued.
pub fn serve_tokenized(
    req: &AssistRequest,
    prompt: &TokenizedPrompt,
    decision: Decision,
    model: &TimingModel,
    source: &TokenSource,
    scorer: &dyn ImportanceScorer,
    rtt_sample: f64,
) -> Result<CloudSession, CloudError> {
    let l = prompt.len() as u64;
    let mask = refine(prompt, scorer, decision.r)?;
    let compressed: CompressedMask = maskcodec::pack(&mask);
    let ttft_c = model.ttft_cloud(l, decision.r, rtt_sample)?;

    let n = source.length();
    let emitted = decision.limit.emitted(n);
    let mut tokens = source.stream();
    let first = tokens.next().expect("source yields at least one token");
    let events: Vec<StreamEvent> = (1..emitted)
        .zip(tokens)
        .map(|(index, token)| StreamEvent { index, token })
        .collect();

    let frame = FirstTokenFrame {
        token: first,
        mask: compressed.clone(),
        limit: decision.limit,
    };
    let at = SimTime::from_ms;
    let mut wire = Vec::with_capacity(events.len() + 2);
    wire.push(WireChunk {
        at: at(ttft_c),
        bytes: encode_first_frame(&frame),
    });
    for e in &events {
        wire.push(WireChunk {
            at: at(ttft_c + e.index as f64 * model.tpot_c),
            bytes: encode_stream_event(e),
        });
    }
    let occupancy = request_occupancy(ttft_c, model.tpot_c, emitted);
    wire.push(WireChunk {
        at: at(occupancy),
        bytes: encode_done(),
    });

    let record = SessionRecord {
        request_id: req.request_id.clone(),
        prompt_len: l,
        decision,
        tokens_emitted: emitted,
        ttft_c,
        occupancy,
        mask_bytes: compressed.as_bytes().len(),
        popcount: mask.popcount() as u64,
    };
    Ok(CloudSession {
        frame,
        events,
        wire,
        record,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalProcess {
    /// Every freed slot is refilled at once; measures capacity.
    ClosedLoop,
    /// Open arrivals, `rate_per_s` requests per second.
    Poisson { rate_per_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchModel {
    pub slots: usize,
    pub arrival: ArrivalProcess,
}

impl BatchModel {
    pub fn closed_loop(slots: usize) -> Self {
        Self {
            slots,
            arrival: ArrivalProcess::ClosedLoop,
        }
    }

    fn validate(&self) -> Result<(), CloudError> {
        if self.slots == 0 {
            return Err(CloudError::Batch("slots must be >= 1".into()));
        }
        if let ArrivalProcess::Poisson { rate_per_s } = self.arrival {
            if !(rate_per_s.is_finite() && rate_per_s > 0.0) {
                return Err(CloudError::Batch(format!(
                    "arrival rate must be finite and > 0, got {rate_per_s}"
                )));
            }
        }
        Ok(())
    }
}

/// Run length of a throughput measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizon {
    /// Completions discarded before measuring.
    pub warmup: u64,
    /// Completions measured.
    pub completions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub completions: u64,
    pub window_ms: f64,
    /// Completed requests per second.
    pub tps: f64,
    /// `B / mean(T)`, capped by the arrival rate for open arrivals.
    pub analytic_tps: f64,
    pub mean_occupancy: f64,
    pub max_active: usize,
    pub max_queued: usize,
}

enum BatchEvent {
    Arrival,
    Completion,
}

/// Slot-level simulation. Job `k` holds a slot for `occupancies[k % len]` ms.
pub fn simulate_batch(
    batch: &BatchModel,
    occupancies: &[f64],
    horizon: Horizon,
    seed: u64,
) -> Result<BatchStats, CloudError> {
    batch.validate()?;
    if occupancies.is_empty() {
        return Err(CloudError::Batch("no occupancy samples".into()));
    }
    if let Some(bad) = occupancies.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(CloudError::Batch(format!("occupancy must be > 0, got {bad}")));
    }
    if horizon.completions == 0 {
        return Err(CloudError::Batch("nothing to measure".into()));
    }
    let total = horizon.warmup + horizon.completions;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sched = Scheduler::new();
    let mut next_job = 0usize;
    let mut queue: VecDeque<()> = VecDeque::new();
    let (mut admitted, mut completed, mut active) = (0u64, 0u64, 0usize);
    let (mut max_active, mut max_queued) = (0, 0);
    let mut occupancy_sum = 0.0;
    let mut window_start = SimTime(0);
    let mut window_end = SimTime(0);

    let mut admit = |sched: &mut Scheduler<BatchEvent>, now: SimTime, active: &mut usize| {
        let t = occupancies[next_job % occupancies.len()];
        next_job += 1;
        occupancy_sum += t;
        *active += 1;
        sched.schedule(SimTime(now.0 + SimTime::from_ms(t).0.max(1)), BatchEvent::Completion);
    };

    let exp = match batch.arrival {
        ArrivalProcess::ClosedLoop => {
            for _ in 0..batch.slots.min(total as usize) {
                admit(&mut sched, SimTime(0), &mut active);
                admitted += 1;
            }
            None
        }
        ArrivalProcess::Poisson { rate_per_s } => {
            sched.schedule(SimTime(0), BatchEvent::Arrival);
            Some(Exp::new(rate_per_s / 1000.0).expect("validated rate"))
        }
    };
    let mut arrivals = 0u64;

    while let Some((now, event)) = sched.pop() {
        match event {
            BatchEvent::Arrival => {
                arrivals += 1;
                if active < batch.slots {
                    admit(&mut sched, now, &mut active);
                    admitted += 1;
                } else {
                    queue.push_back(());
                }
                if arrivals < total {
                    let gap = exp.as_ref().expect("open arrivals").sample(&mut rng);
                    sched.schedule(SimTime(now.0 + SimTime::from_ms(gap).0), BatchEvent::Arrival);
                }
            }
            BatchEvent::Completion => {
                active -= 1;
                completed += 1;
                if completed == horizon.warmup {
                    window_start = now;
                }
                if completed == total {
                    window_end = now;
                    break;
                }
                let refill = match batch.arrival {
                    ArrivalProcess::ClosedLoop => admitted < total,
                    ArrivalProcess::Poisson { .. } => queue.pop_front().is_some(),
                };
                if refill {
                    admit(&mut sched, now, &mut active);
                    admitted += 1;
                }
            }
        }
        assert_eq!(admitted, completed + active as u64, "slot accounting broke");
        assert!(active <= batch.slots);
        max_active = max_active.max(active);
        max_queued = max_queued.max(queue.len());
    }

    let window_ms = (window_end.0 - window_start.0) as f64 / 1000.0;
    let mean_occupancy = occupancy_sum / next_job as f64;
    let capacity = batch.slots as f64 * 1000.0 / mean_occupancy;
    let analytic_tps = match batch.arrival {
        ArrivalProcess::ClosedLoop => capacity,
        ArrivalProcess::Poisson { rate_per_s } => capacity.min(rate_per_s),
    };
    Ok(BatchStats {
        completions: horizon.completions,
        window_ms,
        tps: horizon.completions as f64 * 1000.0 / window_ms,
        analytic_tps,
        mean_occupancy,
        max_active,
        max_queued,
    })
}

/// Throughput of each variant's occupancy sample under the same batch model
/// and seed.
pub fn run_throughput(
    batch: &BatchModel,
    variants: &[(String, Vec<f64>)],
    horizon: Horizon,
    seed: u64,
) -> Result<Vec<(String, BatchStats)>, CloudError> {
    variants
        .iter()
        .map(|(name, occ)| Ok((name.clone(), simulate_batch(batch, occ, horizon, seed)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{check_session, StreamDecoder, StreamMessage, EOT};
    use crate::refiner::SyntheticScorer;

    fn request() -> AssistRequest {
        AssistRequest {
            scene: "qa".into(),
            model_version_label: "v1".into(),
            device_class: "phone".into(),
            prefix: "You are helpful .".into(),
            content: "One fact here . Another fact there . A third one !".into(),
            suffix: "Answer briefly .".into(),
            request_id: "r1".into(),
        }
    }

    fn serve(limit: TokenLimit, n: u64) -> CloudSession {
        let req = request();
        let prompt = TokenizedPrompt::from_text(&req.prefix, &req.content, &req.suffix);
        serve_tokenized(
            &req,
            &prompt,
            Decision::fixed(0.5, limit),
            &TimingModel::default(),
            &TokenSource::new(9, n),
            &SyntheticScorer { seed: 1 },
            20.0,
        )
        .unwrap()
    }

    #[test]
    fn early_termination_at_l() {
        let s = serve(TokenLimit::Tokens(21), 500);
        assert_eq!(s.events.len(), 20);
        assert_eq!(s.record.tokens_emitted, 21);
        let m = TimingModel::default();
        assert!((s.record.occupancy - (s.record.ttft_c + 20.0 * m.tpot_c)).abs() < 1e-9);
        assert_eq!(s.wire.len(), 22);
    }

    #[test]
    fn natural_finish_before_l() {
        let s = serve(TokenLimit::Tokens(21), 3);
        assert_eq!(s.events.len(), 2);
        assert_eq!(s.events[1].token, EOT);
        assert_eq!(s.record.tokens_emitted, 3);
    }

    #[test]
    fn unbounded_streams_to_eot() {
        let s = serve(TokenLimit::Unbounded, 40);
        assert_eq!(s.events.len(), 39);
        assert_eq!(s.events.last().unwrap().token, EOT);
    }

    #[test]
    fn single_token_limit_has_no_events() {
        let s = serve(TokenLimit::Tokens(1), 40);
        assert!(s.events.is_empty());
        assert_eq!(s.record.occupancy, s.record.ttft_c);
    }

    #[test]
    fn wire_decodes_to_a_valid_session() {
        let s = serve(TokenLimit::Tokens(6), 100);
        let mut dec = StreamDecoder::new();
        for c in &s.wire {
            dec.push(&c.bytes);
        }
        let msgs: Vec<StreamMessage> = dec.drain().into_iter().map(Result::unwrap).collect();
        assert_eq!(check_session(&msgs).unwrap(), 5);
        assert!(s.wire.windows(2).all(|w| w[0].at <= w[1].at));
    }

    #[test]
    fn missing_plan_falls_back() {
        let table = crate::planner::build_plan_table(
            &[("phone".into(), TimingModel::default())],
            &[("qa".into(), crate::planner::PlanConstraints { xi_scene: 0.3, tau: 100.0 })],
            &[4],
        )
        .unwrap();
        let s = serve_request(
            &request(),
            &table,
            &TimingModel::default(),
            &TokenSource::new(1, 10),
            &SyntheticScorer { seed: 1 },
            0.0,
        )
        .unwrap();
        assert!(s.record.decision.planning_miss);
        assert_eq!(s.frame.limit, TokenLimit::Unbounded);
        assert_eq!(s.record.decision.r, 1.0);
    }

    #[test]
    fn closed_loop_constant_occupancy_is_exact() {
        let stats = simulate_batch(
            &BatchModel::closed_loop(64),
            &[1100.0],
            Horizon { warmup: 128, completions: 64 * 20 },
            0,
        )
        .unwrap();
        assert!((stats.tps - 64.0 / 1.1).abs() < 1e-9, "{}", stats.tps);
        assert_eq!(stats.max_active, 64);
    }

    #[test]
    fn single_slot_single_request() {
        let stats = simulate_batch(
            &BatchModel::closed_loop(1),
            &[6500.0],
            Horizon { warmup: 0, completions: 1 },
            0,
        )
        .unwrap();
        assert!((stats.tps - 1.0 / 6.5).abs() < 1e-12);
    }

    #[test]
    fn poisson_below_capacity_tracks_arrival_rate() {
        let stats = simulate_batch(
            &BatchModel {
                slots: 8,
                arrival: ArrivalProcess::Poisson { rate_per_s: 2.0 },
            },
            &[1000.0],
            Horizon { warmup: 100, completions: 4000 },
            3,
        )
        .unwrap();
        assert!((stats.tps / 2.0 - 1.0).abs() < 0.05, "{}", stats.tps);
        assert!(stats.max_active <= 8);
    }

    #[test]
    fn rejects_bad_batches() {
        let h = Horizon { warmup: 0, completions: 1 };
        assert!(simulate_batch(&BatchModel::closed_loop(0), &[1.0], h, 0).is_err());
        assert!(simulate_batch(&BatchModel::closed_loop(1), &[], h, 0).is_err());
        assert!(simulate_batch(&BatchModel::closed_loop(1), &[-1.0], h, 0).is_err());
    }
}
