//! Offline choice of the refinement ratio `r` and the assisted-token count
//! `L` for every (scene, device class, prompt-length bucket).
//!
//! The objective (device-side TTFT) is strictly increasing in `r` and does
//! not depend on `L`, so the optimum is the smallest admissible `r` followed
//! by the smallest `L` that keeps the smoothed display pace under `tau`.
//! Integer boundaries are computed in closed form and then re-checked by
//! direct substitution so that rounding never lands one step off.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timing::{TimingError, TimingModel};

/// Smallest ratio the planner will emit when a scene allows `xi_scene = 0`.
pub const MIN_RATIO: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("plan table needs at least one {0}")]
    Empty(&'static str),
    #[error("bucket boundaries must be strictly increasing and > 0: {0:?}")]
    BadBuckets(Vec<u64>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-scene quality floor on `r` and ceiling on display TPOT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConstraints {
    pub xi_scene: f64,
    pub tau: f64,
}

impl PlanConstraints {
    pub fn validate(&self, model: &TimingModel) -> Result<(), PlanError> {
        if !(0.0..=1.0).contains(&self.xi_scene) {
            return Err(PlanError::InvalidConstraints(format!(
                "xi_scene must lie in [0, 1], got {}",
                self.xi_scene
            )));
        }
        if !(self.tau.is_finite() && self.tau > model.tpot_d) {
            return Err(PlanError::InvalidConstraints(format!(
                "tau ({}) must exceed the device TPOT ({})",
                self.tau, model.tpot_d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub r: f64,
    /// Tokens the cloud produces before terminating: the first token plus
    /// `assisted - 1` decoding tokens.
    pub assisted: u64,
    pub feasible: bool,
    /// Display pace of the assisted tokens. With `assisted == 1` this is the
    /// single gap between the first token and the first device token.
    pub achieved_tpot_smooth: f64,
    pub ttft_c_estimate: f64,
    pub ttft_d_estimate: f64,
}

impl Plan {
    pub fn exceeds_tau(&self, tau: f64) -> bool {
        self.achieved_tpot_smooth > tau
    }
}

/// `[xi_scene, 1 - (k_c + delta(l)/l) / k_d]`. The interval may be empty.
pub fn r_bounds(model: &TimingModel, constraints: &PlanConstraints, l: u64) -> (f64, f64) {
    let l = l.max(1);
    let r_hi = 1.0 - (model.k_c + model.delta(l) / l as f64) / model.k_d;
    (constraints.xi_scene, r_hi)
}

fn pace_ok(model: &TimingModel, tau: f64, prefill_d: f64, ttft_c: f64, assisted: u64) -> bool {
    model.tpot_d + (prefill_d - ttft_c) / (assisted - 1) as f64 <= tau
}

fn occupancy_ok(model: &TimingModel, ttft_c: f64, ttft_d: f64, assisted: u64) -> bool {
    ttft_c + (assisted - 1) as f64 * model.tpot_c <= ttft_d
}

fn to_count(x: f64) -> u64 {
    if x.is_nan() || x <= 0.0 {
        0
    } else if x >= u64::MAX as f64 {
        u64::MAX / 2
    } else {
        x as u64
    }
}

/// Admissible range of `L` at ratio `r`, as `(L_lo, L_hi)`. `L_lo >= 2`
/// always; the interval is empty when `L_lo > L_hi`. `L_hi == 0` means not
/// even the first token fits before the device finishes its prefill.
pub fn l_bounds(
    model: &TimingModel,
    constraints: &PlanConstraints,
    l: u64,
    r: f64,
    ttft_c: f64,
    ttft_d: f64,
) -> (u64, u64) {
    let tau = constraints.tau;
    let prefill_d = model.prefill_device_refined(l, r);

    let surplus = prefill_d - ttft_c;
    let mut lo = if surplus <= 0.0 {
        2
    } else {
        (1 + to_count((surplus / (tau - model.tpot_d)).ceil())).max(2)
    };
    while lo > 2 && pace_ok(model, tau, prefill_d, ttft_c, lo - 1) {
        lo -= 1;
    }
    while !pace_ok(model, tau, prefill_d, ttft_c, lo) {
        lo += 1;
    }

    let slack = ttft_d - ttft_c;
    let mut hi = if slack < 0.0 {
        0
    } else {
        1 + to_count((slack / model.tpot_c).floor())
    };
    if hi > 0 {
        while hi > 1 && !occupancy_ok(model, ttft_c, ttft_d, hi) {
            hi -= 1;
        }
        while occupancy_ok(model, ttft_c, ttft_d, hi + 1) {
            hi += 1;
        }
    }
    (lo, hi)
}

/// Solve for `(r, L)` at prompt length `l` with planning RTT `rtt` (the
/// class mean). Infeasibility is reported in [`Plan::feasible`]:
///
/// * empty `r` interval: `r = 1`, refinement disabled, `L` still planned;
/// * empty `L` interval: `L = max(L_hi, 1)`, the display pace goes over `tau`.
pub fn solve_plan(
    model: &TimingModel,
    constraints: &PlanConstraints,
    l: u64,
    rtt: f64,
) -> Result<Plan, PlanError> {
    constraints.validate(model)?;
    if l == 0 {
        return Err(TimingError::InvalidArgument("prompt length must be > 0".into()).into());
    }
    let (r_lo, r_hi) = r_bounds(model, constraints, l);
    let r_floor = r_lo.max(MIN_RATIO);
    let (r, r_ok) = if r_floor <= r_hi {
        (r_floor, true)
    } else {
        (1.0, false)
    };

    let ttft_c = model.ttft_cloud(l, r, rtt)?;
    let ttft_d = model.ttft_device(l, r, ttft_c)?;
    let prefill_d = model.prefill_device_refined(l, r);
    let (lo, hi) = l_bounds(model, constraints, l, r, ttft_c, ttft_d);

    let (assisted, l_ok) = if lo <= hi { (lo, true) } else { (hi.max(1), false) };
    let achieved_tpot_smooth = if assisted >= 2 {
        model.smoothed_tpot(prefill_d, ttft_c, assisted)?
    } else {
        ttft_d + model.tpot_d - ttft_c
    };

    Ok(Plan {
        r,
        assisted,
        feasible: r_ok && l_ok,
        achieved_tpot_smooth,
        ttft_c_estimate: ttft_c,
        ttft_d_estimate: ttft_d,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlanKey {
    pub scene: String,
    pub device_class: String,
    pub bucket: u64,
}

/// Default prompt-length bucket upper bounds, in tokens.
pub const DEFAULT_BUCKETS: [u64; 6] = [1024, 2048, 4096, 8192, 16384, 32768];

/// One row of the plan table, also the on-disk record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub scene: String,
    pub device_class: String,
    pub bucket: u64,
    pub r: f64,
    #[serde(rename = "L")]
    pub assisted: u64,
    pub feasible: bool,
    pub achieved_tpot_smooth: f64,
    pub over_tau: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanTable {
    buckets: Vec<u64>,
    taus: BTreeMap<String, f64>,
    plans: BTreeMap<PlanKey, Plan>,
}

impl PlanTable {
    /// Nearest bucket at or above `l`. Lengths beyond the last bucket have no
    /// plan.
    pub fn bucket_for(&self, l: u64) -> Option<u64> {
        let idx = self.buckets.partition_point(|&b| b < l);
        self.buckets.get(idx).copied()
    }

    pub fn lookup(&self, scene: &str, device_class: &str, l: u64) -> Option<&Plan> {
        let bucket = self.bucket_for(l)?;
        self.plans.get(&PlanKey {
            scene: scene.to_owned(),
            device_class: device_class.to_owned(),
            bucket,
        })
    }

    pub fn get(&self, key: &PlanKey) -> Option<&Plan> {
        self.plans.get(key)
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn buckets(&self) -> &[u64] {
        &self.buckets
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PlanKey, &Plan)> {
        self.plans.iter()
    }

    pub fn records(&self) -> Vec<PlanRecord> {
        self.plans
            .iter()
            .map(|(k, p)| PlanRecord {
                scene: k.scene.clone(),
                device_class: k.device_class.clone(),
                bucket: k.bucket,
                r: p.r,
                assisted: p.assisted,
                feasible: p.feasible,
                achieved_tpot_smooth: p.achieved_tpot_smooth,
                over_tau: self
                    .taus
                    .get(&k.scene)
                    .is_some_and(|&tau| p.exceeds_tau(tau)),
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PlanError> {
        let mut w = csv::Writer::from_writer(out);
        for rec in self.records() {
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solve every (scene, device class, bucket) combination.
pub fn build_plan_table(
    devices: &[(String, TimingModel)],
    scenes: &[(String, PlanConstraints)],
    buckets: &[u64],
) -> Result<PlanTable, PlanError> {
    if buckets.is_empty() {
        return Err(PlanError::Empty("bucket"));
    }
    if devices.is_empty() {
        return Err(PlanError::Empty("device class"));
    }
    if scenes.is_empty() {
        return Err(PlanError::Empty("scene"));
    }
    if buckets[0] == 0 || buckets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PlanError::BadBuckets(buckets.to_vec()));
    }
    let mut plans = BTreeMap::new();
    for (device_class, model) in devices {
        model.validate()?;
        for (scene, constraints) in scenes {
            for &bucket in buckets {
                let plan = solve_plan(model, constraints, bucket, model.rtt.mean_ms)?;
                plans.insert(
                    PlanKey {
                        scene: scene.clone(),
                        device_class: device_class.clone(),
                        bucket,
                    },
                    plan,
                );
            }
        }
    }
    Ok(PlanTable {
        buckets: buckets.to_vec(),
        taus: scenes.iter().map(|(s, c)| (s.clone(), c.tau)).collect(),
        plans,
    })
}
