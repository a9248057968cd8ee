//! Latency model for cloud-assisted on-device inference.
//!
//! Every cost is linear in prompt length. Times are `f64` milliseconds and
//! token counts are `u64`. The functions here are pure; the simulators and the
//! planner all route through them so that a simulated trace can be checked
//! against the closed-form prediction exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// z-score of the 95th percentile of a standard normal.
const Z_P95: f64 = 1.644_853_626_951_472_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimingError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("amortization undefined for L = {0} (needs L >= 2)")]
    AmortizationUndefined(u64),
    #[error("invalid timing model: {0}")]
    InvalidModel(String),
}

/// `base + per_token * l + per_selected_token * r * l`, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineCost {
    #[serde(default)]
    pub base_ms: f64,
    #[serde(default)]
    pub per_token_ms: f64,
    #[serde(default)]
    pub per_selected_token_ms: f64,
}

impl AffineCost {
    pub const fn per_token(per_token_ms: f64) -> Self {
        Self {
            base_ms: 0.0,
            per_token_ms,
            per_selected_token_ms: 0.0,
        }
    }

    pub fn eval(&self, l: u64, r: f64) -> f64 {
        let l = l as f64;
        self.base_ms + self.per_token_ms * l + self.per_selected_token_ms * r * l
    }

    fn is_nonnegative(&self) -> bool {
        [self.base_ms, self.per_token_ms, self.per_selected_token_ms]
            .iter()
            .all(|c| c.is_finite() && *c >= 0.0)
    }
}

/// Network round-trip class. Jitter is the standard deviation of a normal
/// distribution around `mean_ms`, clipped at zero when sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RttClass {
    pub name: String,
    pub mean_ms: f64,
    pub jitter_ms: f64,
}

impl RttClass {
    pub fn wifi() -> Self {
        Self {
            name: "wifi".into(),
            mean_ms: 50.0,
            jitter_ms: 15.0,
        }
    }

    pub fn lte() -> Self {
        Self {
            name: "lte".into(),
            mean_ms: 120.0,
            jitter_ms: 40.0,
        }
    }

    /// Clipping at zero only moves mass from the lower tail, so the upper
    /// percentile is that of the unclipped normal.
    pub fn p95_ms(&self) -> f64 {
        (self.mean_ms + Z_P95 * self.jitter_ms).max(0.0)
    }
}

/// Upper bound on compress + decompress + RTT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeltaModel {
    /// Worst compress cost over `r in [0, 1]`, plus decompress, plus the
    /// 95th-percentile RTT of the class.
    Conservative,
    /// Explicit affine bound in `l`.
    Affine { base_ms: f64, per_token_ms: f64 },
}

impl Default for DeltaModel {
    fn default() -> Self {
        Self::Conservative
    }
}

/// Timing coefficients for one (cloud, device class, network class) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingModel {
    /// Cloud prefill, ms per prompt token.
    pub k_c: f64,
    /// Device prefill, ms per prompt token.
    pub k_d: f64,
    pub tpot_c: f64,
    pub tpot_d: f64,
    pub rtt: RttClass,
    /// Cloud-side mask build and compression.
    pub compress: AffineCost,
    /// Device-side mask recovery.
    pub decompress: AffineCost,
    #[serde(default)]
    pub delta: DeltaModel,
}

impl Default for TimingModel {
    /// Calibrated so that an 8k-token prompt takes 10 s to prefill on the
    /// device and 0.8 s in the cloud; compression of an 8k mask costs
    /// 100 ms and recovery 50 ms.
    fn default() -> Self {
        Self {
            k_c: 0.1,
            k_d: 1.25,
            tpot_c: 30.0,
            tpot_d: 30.0,
            rtt: RttClass::wifi(),
            compress: AffineCost::per_token(0.0125),
            decompress: AffineCost::per_token(0.00625),
            delta: DeltaModel::Conservative,
        }
    }
}

/// Largest prompt length the dominance check covers by default.
pub const MAX_SUPPORTED_LEN: u64 = 1 << 20;

impl TimingModel {
    pub fn validate(&self) -> Result<(), TimingError> {
        let positive = [
            ("k_c", self.k_c),
            ("k_d", self.k_d),
            ("tpot_c", self.tpot_c),
            ("tpot_d", self.tpot_d),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TimingError::InvalidModel(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if self.k_d <= self.k_c {
            return Err(TimingError::InvalidModel(format!(
                "device prefill must be slower than cloud prefill (k_d = {} <= k_c = {})",
                self.k_d, self.k_c
            )));
        }
        if !(self.rtt.mean_ms.is_finite() && self.rtt.mean_ms >= 0.0)
            || !(self.rtt.jitter_ms.is_finite() && self.rtt.jitter_ms >= 0.0)
        {
            return Err(TimingError::InvalidModel(format!(
                "rtt class {:?} needs finite, non-negative mean and jitter",
                self.rtt.name
            )));
        }
        if !self.compress.is_nonnegative() || !self.decompress.is_nonnegative() {
            return Err(TimingError::InvalidModel(
                "compress/decompress coefficients must be finite and >= 0".into(),
            ));
        }
        self.check_delta_dominance(1..=MAX_SUPPORTED_LEN)
    }

    /// Costs are affine in `l` and `r`, so checking both ends of the range at
    /// both ends of `r` covers every point in between.
    pub fn check_delta_dominance(
        &self,
        range: std::ops::RangeInclusive<u64>,
    ) -> Result<(), TimingError> {
        for l in [*range.start(), *range.end()] {
            for r in [0.0, 1.0] {
                let need = self.compress_cost(l, r) + self.decompress_cost(l) + self.rtt.mean_ms;
                let have = self.delta(l);
                if have + 1e-9 < need {
                    return Err(TimingError::InvalidModel(format!(
                        "delta({l}) = {have} ms does not bound compress + decompress + rtt = {need} ms at r = {r}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn compress_cost(&self, l: u64, r: f64) -> f64 {
        self.compress.eval(l, r)
    }

    pub fn decompress_cost(&self, l: u64) -> f64 {
        self.decompress.eval(l, 0.0)
    }

    pub fn delta(&self, l: u64) -> f64 {
        match self.delta {
            DeltaModel::Conservative => {
                let worst = self.compress_cost(l, 0.0).max(self.compress_cost(l, 1.0));
                worst + self.decompress_cost(l) + self.rtt.p95_ms()
            }
            DeltaModel::Affine {
                base_ms,
                per_token_ms,
            } => base_ms + per_token_ms * l as f64,
        }
    }

    pub fn prefill_cloud(&self, tokens: u64) -> f64 {
        self.k_c * tokens as f64
    }

    pub fn prefill_device(&self, tokens: u64) -> f64 {
        self.k_d * tokens as f64
    }

    /// Device prefill over the refined prompt, `k_d * r * l`.
    pub fn prefill_device_refined(&self, l: u64, r: f64) -> f64 {
        self.k_d * r * l as f64
    }

    /// Time until the device holds the first token:
    /// `k_c * l + compress(l, r) + rtt`.
    pub fn ttft_cloud(&self, l: u64, r: f64, rtt_sample: f64) -> Result<f64, TimingError> {
        check_domain(l, r)?;
        if !(rtt_sample.is_finite() && rtt_sample >= 0.0) {
            return Err(TimingError::InvalidArgument(format!(
                "rtt sample must be finite and >= 0, got {rtt_sample}"
            )));
        }
        Ok(self.prefill_cloud(l) + self.compress_cost(l, r) + rtt_sample)
    }

    /// Time until the device finishes its own prefill on the refined prompt:
    /// `ttft_c + decompress(l) + k_d * r * l`.
    pub fn ttft_device(&self, l: u64, r: f64, ttft_c: f64) -> Result<f64, TimingError> {
        check_domain(l, r)?;
        if !(ttft_c.is_finite() && ttft_c >= 0.0) {
            return Err(TimingError::InvalidArgument(format!(
                "ttft_c must be finite and >= 0, got {ttft_c}"
            )));
        }
        Ok(ttft_c + self.decompress_cost(l) + self.prefill_device_refined(l, r))
    }

    /// Display pace for the `L - 1` cloud-assisted tokens:
    /// `tpot_d + (prefill_d - ttft_c) / (L - 1)`.
    pub fn smoothed_tpot(
        &self,
        prefill_d_refined: f64,
        ttft_c: f64,
        assisted: u64,
    ) -> Result<f64, TimingError> {
        if assisted < 2 {
            return Err(TimingError::AmortizationUndefined(assisted));
        }
        if !(prefill_d_refined >= 0.0 && ttft_c >= 0.0) {
            return Err(TimingError::InvalidArgument(format!(
                "prefill ({prefill_d_refined}) and ttft_c ({ttft_c}) must be >= 0"
            )));
        }
        Ok(self.tpot_d + (prefill_d_refined - ttft_c) / (assisted - 1) as f64)
    }

    /// Difference between the device-only timeline and the assisted one over
    /// the first `L` tokens. Zero when `tpot_smooth` satisfies the amortization
    /// identity.
    pub fn amortization_residual(
        &self,
        prefill_d_refined: f64,
        ttft_c: f64,
        assisted: u64,
        tpot_smooth: f64,
    ) -> f64 {
        let decode = assisted.saturating_sub(1) as f64;
        (prefill_d_refined + self.tpot_d * decode) - (ttft_c + tpot_smooth * decode)
    }
}

fn check_domain(l: u64, r: f64) -> Result<(), TimingError> {
    if l == 0 {
        return Err(TimingError::InvalidArgument("prompt length must be > 0".into()));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(TimingError::InvalidArgument(format!(
            "refinement ratio must be in (0, 1], got {r}"
        )));
    }
    Ok(())
}

/// Time a request holds a batch slot: `ttft + tpot * (L - 1)`.
pub fn request_occupancy(ttft: f64, tpot: f64, tokens: u64) -> f64 {
    ttft + tpot * tokens.saturating_sub(1) as f64
}

/// Breakdown of one assisted request's first-token path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub ttft_c: f64,
    pub ttft_d: f64,
    pub prefill_c: f64,
    pub prefill_d: f64,
    pub rtt_sample: f64,
    pub compress: f64,
    pub decompress: f64,
}

impl LatencyBreakdown {
    pub fn compute(
        model: &TimingModel,
        l: u64,
        r: f64,
        rtt_sample: f64,
    ) -> Result<Self, TimingError> {
        let ttft_c = model.ttft_cloud(l, r, rtt_sample)?;
        let ttft_d = model.ttft_device(l, r, ttft_c)?;
        Ok(Self {
            ttft_c,
            ttft_d,
            prefill_c: model.prefill_cloud(l),
            prefill_d: model.prefill_device_refined(l, r),
            rtt_sample,
            compress: model.compress_cost(l, r),
            decompress: model.decompress_cost(l),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn model() -> TimingModel {
        TimingModel::default()
    }

    #[test]
    fn default_model_is_valid() {
        model().validate().unwrap();
    }

    #[test]
    fn prefill_device_examples() {
        let m = model();
        assert_eq!(m.prefill_device(8000), 10_000.0);
        assert_eq!(m.prefill_device(0), 0.0);
        assert_eq!(m.prefill_device(2000), 2500.0);
    }

    #[test]
    fn ttft_cloud_examples() {
        let m = model();
        // compress(8000) = 100 ms under the default calibration.
        assert!(close(m.ttft_cloud(8000, 0.25, 50.0).unwrap(), 950.0, 1e-9));
        assert!(close(m.ttft_cloud(32_000, 0.25, 50.0).unwrap(), 3650.0, 1e-9));

        let unit = TimingModel {
            compress: AffineCost::per_token(0.0),
            ..model()
        };
        assert!(close(unit.ttft_cloud(1, 1.0, 0.0).unwrap(), 0.1, 1e-12));
    }

    #[test]
    fn ttft_cloud_rejects_out_of_domain() {
        let m = model();
        assert!(m.ttft_cloud(0, 0.5, 0.0).is_err());
        assert!(m.ttft_cloud(10, 0.0, 0.0).is_err());
        assert!(m.ttft_cloud(10, 1.5, 0.0).is_err());
        assert!(m.ttft_cloud(10, f64::NAN, 0.0).is_err());
        assert!(m.ttft_cloud(10, 0.5, -1.0).is_err());
    }

    #[test]
    fn ttft_device_examples() {
        let m = model();
        // decompress(8000) = 50 ms
        assert!(close(m.ttft_device(8000, 0.6, 950.0).unwrap(), 7000.0, 1e-9));
        let ttft_d = m.ttft_device(8000, 0.25, 950.0).unwrap();
        assert!(close(ttft_d, 3500.0, 1e-9));
        let reduction = 1.0 - ttft_d / m.prefill_device(8000);
        assert!(close(reduction, 0.65, 1e-12));

        let bare = TimingModel {
            decompress: AffineCost::per_token(0.0),
            ..model()
        };
        assert_eq!(bare.ttft_device(4096, 1.0, 0.0).unwrap(), bare.prefill_device(4096));
        assert!(m.ttft_device(10, 0.5, -1.0).is_err());
    }

    #[test]
    fn smoothed_tpot_examples() {
        let m = model();
        assert!(close(m.smoothed_tpot(2000.0, 500.0, 21).unwrap(), 105.0, 1e-12));
        assert_eq!(m.smoothed_tpot(700.0, 700.0, 9).unwrap(), m.tpot_d);
        let v = m.smoothed_tpot(6000.0, 950.0, 74).unwrap();
        assert!(close(v, 30.0 + 5050.0 / 73.0, 1e-12));
        assert!(v <= 100.0);
        // One fewer assisted token pushes the pace over 100 ms.
        assert!(m.smoothed_tpot(6000.0, 950.0, 73).unwrap() > 100.0);
    }

    #[test]
    fn smoothed_tpot_needs_two_tokens() {
        let m = model();
        assert_eq!(
            m.smoothed_tpot(1.0, 0.0, 1),
            Err(TimingError::AmortizationUndefined(1))
        );
        assert!(m.smoothed_tpot(1.0, 0.0, 0).is_err());
    }

    #[test]
    fn amortization_residual_examples() {
        let m = model();
        let s = m.smoothed_tpot(2000.0, 500.0, 21).unwrap();
        assert!(close(m.amortization_residual(2000.0, 500.0, 21, s), 0.0, 1e-9));
        assert!(close(m.amortization_residual(2000.0, 500.0, 21, s + 1.0), -20.0, 1e-9));
        let s2 = m.smoothed_tpot(1234.5, 321.0, 2).unwrap();
        assert!(close(m.amortization_residual(1234.5, 321.0, 2, s2), 0.0, 1e-9));
    }

    #[test]
    fn occupancy_examples() {
        assert_eq!(request_occupancy(500.0, 30.0, 201), 6500.0);
        assert_eq!(request_occupancy(500.0, 30.0, 1), 500.0);
        assert_eq!(request_occupancy(500.0, 30.0, 21), 1100.0);
        let ratio = 6500.0 / 1100.0;
        assert!(ratio > 1.6 && ratio < 15.0);
    }

    #[test]
    fn breakdown_structure() {
        let m = model();
        let b = LatencyBreakdown::compute(&m, 8000, 0.25, 42.0).unwrap();
        assert!(close(b.ttft_c, b.prefill_c + b.compress + b.rtt_sample, 1e-9));
        assert!(close(b.ttft_d, b.ttft_c + b.decompress + b.prefill_d, 1e-9));
    }

    #[test]
    fn delta_dominates_extra_costs() {
        let m = model();
        for l in [1, 1000, 8000, 32_000, 500_000] {
            for r in [0.0, 0.25, 0.5, 1.0] {
                assert!(m.delta(l) >= m.compress_cost(l, r) + m.decompress_cost(l) + m.rtt.mean_ms);
            }
        }
        // 8k: 100 + 50 + p95(wifi) stays under a quarter second.
        assert!(m.delta(8000) <= 250.0);
    }

    #[test]
    fn rejects_bad_models() {
        let mut m = model();
        m.k_d = 0.05;
        assert!(m.validate().is_err());
        let mut m = model();
        m.tpot_d = 0.0;
        assert!(m.validate().is_err());
        let mut m = model();
        m.delta = DeltaModel::Affine {
            base_ms: 0.0,
            per_token_ms: 0.001,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn r_dependent_compress_is_bounded_by_conservative_delta() {
        let m = TimingModel {
            compress: AffineCost {
                base_ms: 5.0,
                per_token_ms: 0.01,
                per_selected_token_ms: 0.02,
            },
            ..model()
        };
        m.validate().unwrap();
        assert!(m.delta(8000) >= m.compress_cost(8000, 1.0) + m.decompress_cost(8000) + 50.0);
    }
}
