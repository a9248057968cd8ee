//! Cloud-device disaggregated LLM serving: the cloud prefills a refined
//! prompt and streams the first few tokens while the device catches up on its
//! own prefill, then the device takes over decoding.
//!
//! The crate has no model inside it. Latencies come from a calibrated
//! [`timing::TimingModel`], tokens from a seeded [`sim::TokenSource`], and
//! both sides run on a deterministic discrete-event clock.
//!
//! ```
//! use pd_device::planner::{solve_plan, PlanConstraints};
//! use pd_device::timing::TimingModel;
//!
//! let model = TimingModel::default();
//! let scene = PlanConstraints { xi_scene: 0.25, tau: 100.0 };
//! let plan = solve_plan(&model, &scene, 8192, model.rtt.mean_ms).unwrap();
//! assert!(plan.feasible);
//! assert_eq!(plan.r, 0.25);
//! assert!(plan.achieved_tpot_smooth <= 100.0);
//! ```

pub mod cloudsim;
pub mod devicesim;
pub mod harness;
pub mod maskcodec;
pub mod planner;
pub mod protocol;
pub mod refiner;
pub mod sim;
pub mod timing;

pub use cloudsim::{serve_request, BatchModel, CloudSession, SessionRecord};
pub use devicesim::{run_session, CorrectionPolicy, DeviceTrace};
pub use harness::{report, run_experiment, ExperimentConfig, MetricsReport};
pub use maskcodec::CompressedMask;
pub use planner::{solve_plan, Plan, PlanConstraints, PlanTable};
pub use protocol::{AssistRequest, FirstTokenFrame, StreamEvent, TokenLimit};
pub use refiner::{refine, SelectionMask, TokenizedPrompt};
pub use timing::TimingModel;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/timing.md")]
    mod timing {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
