//! Device side of an assisted request.
//!
//! Two branches share one event loop. The display branch shows the cloud's
//! first token on arrival and paces the next `L - 1` cloud tokens at the
//! smoothed TPOT, then shows device tokens. The decode branch prefills the
//! refined prompt and decodes at `tpot_d`; at positions `1..L` a correction
//! policy decides whether the cloud token replaces the device's own.

use std::collections::{BTreeMap, VecDeque};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudsim::WireChunk;
use crate::maskcodec;
use crate::protocol::{AssistRequest, ProtocolError, StreamDecoder, StreamMessage, TokenLimit, EOT};
use crate::refiner::{SelectionMask, TokenizedPrompt};
use crate::sim::{Scheduler, SimTime, TokenSource, TokenStream};
use crate::timing::{TimingError, TimingModel};

/// A waiting display branch reports a stall after this many smoothed TPOTs.
pub const STALL_FACTOR: f64 = 5.0;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("stream stalled waiting for token {position} at {at_ms} ms")]
    Stall { position: u64, at_ms: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorrectionPolicy {
    /// The device keeps its own tokens.
    Off,
    /// Cloud tokens replace the device's at positions `1..L`.
    #[default]
    CloudWins,
    /// The device keeps its own tokens and shows them where the cloud token
    /// has not been shown yet.
    DeviceDisplay,
}

impl std::str::FromStr for CorrectionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "OFF" => Ok(Self::Off),
            "CLOUD_WINS" => Ok(Self::CloudWins),
            "DEVICE_DISPLAY" => Ok(Self::DeviceDisplay),
            _ => Err(format!("unknown correction policy {s:?}")),
        }
    }
}

/// `k_d * popcount(mask)`.
pub fn estimate_device_prefill(mask: &SelectionMask, k_d: f64) -> f64 {
    k_d * mask.popcount() as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisplayedToken {
    pub position: u64,
    pub token: String,
    pub at: SimTime,
    pub from_cloud: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTrace {
    /// First-frame arrival.
    pub user_ttft: f64,
    /// End of the device's own prefill.
    pub ttft_d: f64,
    pub limit: TokenLimit,
    pub tpot_smooth: Option<f64>,
    pub displayed: Vec<DisplayedToken>,
    pub corrections: u64,
    /// Leading decoding positions where the device proposed the cloud token.
    pub common_prefix_len: u64,
    /// Times the display branch waited more than `STALL_FACTOR` smoothed
    /// TPOTs for a token.
    pub stalls: u64,
    /// When the device decoded position `L - 1`.
    pub device_assisted_end: Option<f64>,
}

impl DeviceTrace {
    pub fn output(&self) -> Vec<&str> {
        self.displayed.iter().map(|d| d.token.as_str()).collect()
    }

    /// Largest gap between consecutive tokens among positions `0..L`.
    pub fn max_assisted_gap(&self) -> Option<f64> {
        let end = self.limit.get().unwrap_or(u64::MAX);
        self.displayed
            .windows(2)
            .filter(|w| w[1].position < end)
            .map(|w| (w[1].at.0 - w[0].at.0) as f64 / 1000.0)
            .reduce(f64::max)
    }

    pub fn mean_assisted_gap(&self) -> Option<f64> {
        let end = self.limit.get().unwrap_or(u64::MAX);
        let gaps: Vec<f64> = self
            .displayed
            .windows(2)
            .filter(|w| w[1].position < end)
            .map(|w| (w[1].at.0 - w[0].at.0) as f64 / 1000.0)
            .collect();
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }

    /// Gap between the last cloud-paced token and the first device token.
    pub fn handoff_gap(&self) -> Option<f64> {
        let l = self.limit.get()?;
        let i = self.displayed.iter().position(|d| d.position == l)?;
        (i > 0).then(|| (self.displayed[i].at.0 - self.displayed[i - 1].at.0) as f64 / 1000.0)
    }
}

enum Event {
    Wire(usize),
    PrefillDone,
    Decode,
    ShowCloud(u64),
    ShowDevice,
    StallCheck(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    AwaitingFrame,
    /// Waiting to show cloud position `i`; `true` once its slot has come.
    Assisted(u64, bool),
    Device,
    Finished,
}

struct Session<'a> {
    model: &'a TimingModel,
    policy: CorrectionPolicy,
    prompt_len: usize,
    wire: &'a [WireChunk],
    delivered: usize,
    decoder: StreamDecoder,
    sched: Scheduler<Event>,

    limit: TokenLimit,
    tpot_smooth: f64,
    user_ttft: f64,
    ttft_d: f64,
    cloud: BTreeMap<u64, String>,
    done: bool,

    phase: Phase,
    display_clock: f64,
    displayed: Vec<DisplayedToken>,
    device_tick_pending: bool,
    stalls: u64,

    device: TokenStream<'a>,
    decode_blocked: bool,
    device_tokens: BTreeMap<u64, String>,
    device_queue: VecDeque<(u64, String, f64)>,
    corrections: u64,
    common_prefix: u64,
    prefix_broken: bool,
    assisted_end: Option<f64>,
}

/// Replay the cloud's wire bytes against a device timeline. `req` is the
/// request as sent, after scrubbing.
pub fn run_session(
    req: &AssistRequest,
    wire: &[WireChunk],
    model: &TimingModel,
    device_source: &TokenSource,
    policy: CorrectionPolicy,
) -> Result<DeviceTrace, DeviceError> {
    let prompt = TokenizedPrompt::from_text(&req.prefix, &req.content, &req.suffix);
    run_session_tokenized(&prompt, wire, model, device_source, policy)
}

/// [`run_session`] over an already tokenized prompt.
pub fn run_session_tokenized(
    prompt: &TokenizedPrompt,
    wire: &[WireChunk],
    model: &TimingModel,
    device_source: &TokenSource,
    policy: CorrectionPolicy,
) -> Result<DeviceTrace, DeviceError> {
    let mut s = Session {
        model,
        policy,
        prompt_len: prompt.len(),
        wire,
        delivered: 0,
        decoder: StreamDecoder::new(),
        sched: Scheduler::new(),
        limit: TokenLimit::Unbounded,
        tpot_smooth: 0.0,
        user_ttft: 0.0,
        ttft_d: 0.0,
        cloud: BTreeMap::new(),
        done: false,
        phase: Phase::AwaitingFrame,
        display_clock: 0.0,
        displayed: Vec::new(),
        device_tick_pending: false,
        stalls: 0,
        device: device_source.stream(),
        decode_blocked: false,
        device_tokens: BTreeMap::new(),
        device_queue: VecDeque::new(),
        corrections: 0,
        common_prefix: 0,
        prefix_broken: false,
        assisted_end: None,
    };
    for (i, c) in wire.iter().enumerate() {
        s.sched.schedule(c.at, Event::Wire(i));
    }
    while let Some((now, event)) = s.sched.pop() {
        match event {
            Event::Wire(i) => s.on_wire(i, now)?,
            Event::PrefillDone => s.sched.schedule(s.after(now, model.tpot_d), Event::Decode),
            Event::Decode => s.on_decode(now),
            Event::ShowCloud(i) => s.on_show_cloud(i, now),
            Event::ShowDevice => s.on_show_device(now),
            Event::StallCheck(i) => s.on_stall_check(i, now)?,
        }
        if s.phase == Phase::Finished {
            break;
        }
    }
    if s.phase == Phase::AwaitingFrame {
        return Err(ProtocolError::Sequence("stream ended before the first frame".into()).into());
    }
    Ok(DeviceTrace {
        user_ttft: s.user_ttft,
        ttft_d: s.ttft_d,
        limit: s.limit,
        tpot_smooth: (s.limit.get().is_some_and(|l| l >= 2)).then_some(s.tpot_smooth),
        displayed: s.displayed,
        corrections: s.corrections,
        common_prefix_len: s.common_prefix,
        stalls: s.stalls,
        device_assisted_end: s.assisted_end,
    })
}

impl Session<'_> {
    fn after(&self, now: SimTime, ms: f64) -> SimTime {
        SimTime::from_ms(now.as_ms() + ms)
    }

    /// End of the assisted range, exclusive. Unbounded streams are all
    /// assisted.
    fn assisted_end(&self) -> u64 {
        self.limit.get().unwrap_or(u64::MAX)
    }

    fn show(&mut self, position: u64, token: String, now: SimTime, from_cloud: bool) {
        let eot = token == EOT;
        self.displayed.push(DisplayedToken {
            position,
            token,
            at: now,
            from_cloud,
        });
        self.display_clock = now.as_ms();
        if eot {
            self.phase = Phase::Finished;
        }
    }

    fn on_wire(&mut self, i: usize, now: SimTime) -> Result<(), DeviceError> {
        self.delivered = i + 1;
        self.decoder.push(&self.wire[i].bytes);
        while let Some(msg) = self.decoder.next_message() {
            match msg? {
                StreamMessage::First(frame) => {
                    if self.phase != Phase::AwaitingFrame {
                        return Err(ProtocolError::Sequence("second first frame".into()).into());
                    }
                    self.on_first(frame, now)?;
                }
                StreamMessage::Token(e) => {
                    if self.phase == Phase::AwaitingFrame {
                        return Err(ProtocolError::Sequence("token before first frame".into()).into());
                    }
                    if e.index == 0 || e.index >= self.assisted_end() || self.cloud.contains_key(&e.index) {
                        return Err(ProtocolError::Sequence(format!("unexpected index {}", e.index)).into());
                    }
                    self.cloud.insert(e.index, e.token);
                    self.on_cloud_token(e.index, now);
                }
                StreamMessage::Done => self.done = true,
            }
        }
        Ok(())
    }

    fn on_first(&mut self, frame: crate::protocol::FirstTokenFrame, now: SimTime) -> Result<(), DeviceError> {
        let mask = maskcodec::unpack(&frame.mask).map_err(ProtocolError::from)?;
        if mask.len() != self.prompt_len {
            return Err(ProtocolError::Field {
                field: "mask_b64",
                reason: format!("mask has {} bits, prompt has {} tokens", mask.len(), self.prompt_len),
            }
            .into());
        }
        let l = self.prompt_len as u64;
        let prefill = estimate_device_prefill(&mask, self.model.k_d);
        self.user_ttft = now.as_ms();
        self.ttft_d = self.user_ttft + self.model.decompress_cost(l) + prefill;
        self.limit = frame.limit;
        let first_is_eot = frame.token == EOT;
        self.show(0, frame.token.clone(), now, true);
        self.device.commit(&frame.token);
        if first_is_eot {
            return Ok(());
        }
        match frame.limit {
            TokenLimit::Unbounded => {
                self.phase = Phase::Assisted(1, true);
            }
            TokenLimit::Tokens(1) => {
                self.phase = Phase::Device;
                self.sched.schedule(SimTime::from_ms(self.ttft_d), Event::PrefillDone);
            }
            TokenLimit::Tokens(big_l) => {
                self.tpot_smooth = self.model.smoothed_tpot(prefill, self.user_ttft, big_l)?;
                self.phase = Phase::Assisted(1, false);
                self.sched.schedule(self.after(now, self.tpot_smooth), Event::ShowCloud(1));
                self.sched.schedule(SimTime::from_ms(self.ttft_d), Event::PrefillDone);
            }
        }
        Ok(())
    }

    fn on_cloud_token(&mut self, index: u64, now: SimTime) {
        if self.phase == Phase::Assisted(index, true) {
            self.show_cloud(index, now);
        }
        if self.decode_blocked && index == self.device.position() {
            self.decode_blocked = false;
            self.on_decode(now);
        }
    }

    fn on_show_cloud(&mut self, i: u64, now: SimTime) {
        if self.phase != Phase::Assisted(i, false) {
            return;
        }
        let own = match self.policy {
            CorrectionPolicy::DeviceDisplay => self.device_tokens.get(&i).cloned(),
            _ => None,
        };
        if let Some(token) = own {
            if self.cloud.get(&i).is_some_and(|c| *c != token) {
                self.corrections += 1;
            }
            self.show(i, token, now, false);
            self.advance_assisted(i, now);
        } else if self.cloud.contains_key(&i) {
            self.show_cloud(i, now);
        } else {
            self.phase = Phase::Assisted(i, true);
            let check = self.after(now, STALL_FACTOR * self.tpot_smooth.max(self.model.tpot_c));
            self.sched.schedule(check, Event::StallCheck(i));
        }
    }

    fn show_cloud(&mut self, i: u64, now: SimTime) {
        let token = self.cloud[&i].clone();
        self.show(i, token, now, true);
        self.advance_assisted(i, now);
    }

    fn advance_assisted(&mut self, i: u64, now: SimTime) {
        if self.phase == Phase::Finished {
            return;
        }
        match self.limit {
            TokenLimit::Unbounded => self.phase = Phase::Assisted(i + 1, true),
            TokenLimit::Tokens(l) if i + 1 < l => {
                self.phase = Phase::Assisted(i + 1, false);
                let next = SimTime::from_ms(self.display_clock + self.tpot_smooth);
                self.sched.schedule(next.max(now), Event::ShowCloud(i + 1));
            }
            TokenLimit::Tokens(_) => {
                self.phase = Phase::Device;
                self.schedule_device_display(now);
            }
        }
    }

    fn on_stall_check(&mut self, i: u64, now: SimTime) -> Result<(), DeviceError> {
        if self.phase != Phase::Assisted(i, true) {
            return Ok(());
        }
        self.stalls += 1;
        if self.delivered == self.wire.len() {
            return Err(DeviceError::Stall {
                position: i,
                at_ms: now.as_ms(),
            });
        }
        let check = self.after(now, STALL_FACTOR * self.tpot_smooth.max(self.model.tpot_c));
        self.sched.schedule(check, Event::StallCheck(i));
        Ok(())
    }

    fn on_decode(&mut self, now: SimTime) {
        if self.device.finished() {
            return;
        }
        let i = self.device.position();
        let proposed = self.device.propose();
        let assisted = i < self.assisted_end();
        let committed = if assisted {
            let cloud = self.cloud.get(&i).cloned();
            if self.policy == CorrectionPolicy::CloudWins && cloud.is_none() && !self.done {
                // The corrector needs the cloud token before it can go on.
                self.decode_blocked = true;
                return;
            }
            if !self.prefix_broken {
                match &cloud {
                    Some(c) if *c == proposed => self.common_prefix += 1,
                    _ => self.prefix_broken = true,
                }
            }
            match (self.policy, cloud) {
                (CorrectionPolicy::CloudWins, Some(c)) => {
                    if c != proposed {
                        self.corrections += 1;
                    }
                    c
                }
                _ => proposed,
            }
        } else {
            proposed
        };
        self.device.commit(&committed);
        if assisted {
            self.device_tokens.insert(i, committed.clone());
            if i + 1 == self.assisted_end() {
                self.assisted_end = Some(now.as_ms());
            }
        } else {
            self.device_queue.push_back((i, committed, now.as_ms()));
            if self.phase == Phase::Device {
                self.schedule_device_display(now);
            }
        }
        if !self.device.finished() {
            self.sched.schedule(self.after(now, self.model.tpot_d), Event::Decode);
        }
    }

    fn schedule_device_display(&mut self, now: SimTime) {
        if self.device_tick_pending {
            return;
        }
        if let Some((_, _, ready)) = self.device_queue.front() {
            let at = ready.max(self.display_clock + self.model.tpot_d);
            self.sched.schedule(SimTime::from_ms(at).max(now), Event::ShowDevice);
            self.device_tick_pending = true;
        }
    }

    fn on_show_device(&mut self, now: SimTime) {
        self.device_tick_pending = false;
        if let Some((position, token, _)) = self.device_queue.pop_front() {
            self.show(position, token, now, false);
            if self.phase != Phase::Finished {
                self.schedule_device_display(now);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubRule {
    pub pattern: String,
    pub replacement: String,
}

/// Pattern substitutions applied to every prompt section before it leaves
/// the device. Rules are reapplied until the text stops changing, so a rule
/// set that converges gives an idempotent scrub.
#[derive(Debug, Clone, Default)]
pub struct Scrubber {
    rules: Vec<(Regex, String)>,
}

const MAX_SCRUB_PASSES: usize = 16;

impl Scrubber {
    pub fn new(rules: &[ScrubRule]) -> Result<Self, regex::Error> {
        let rules = rules
            .iter()
            .map(|r| Ok((Regex::new(&r.pattern)?, r.replacement.clone())))
            .collect::<Result<_, regex::Error>>()?;
        Ok(Self { rules })
    }

    pub fn scrub(&self, text: &str) -> String {
        let mut cur = text.to_owned();
        for _ in 0..MAX_SCRUB_PASSES {
            let mut next = cur.clone();
            for (re, rep) in &self.rules {
                next = re.replace_all(&next, rep.as_str()).into_owned();
            }
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    }

    pub fn scrub_request(&self, req: &AssistRequest) -> AssistRequest {
        AssistRequest {
            prefix: self.scrub(&req.prefix),
            content: self.scrub(&req.content),
            suffix: self.scrub(&req.suffix),
            ..req.clone()
        }
    }
}
