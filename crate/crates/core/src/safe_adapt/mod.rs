//! Safe adaptation: the region switch between reward and cost updates, the
//! tabular NPG harness, and the policy extraction loop.

pub mod region;
pub mod schedule;
pub mod tabular;
pub mod train;

pub use region::{
    mixture_weight, safe_adaptation, select_branch, Adapted, Branch, Region, RegionLog,
    RegionRecord,
};
pub use schedule::{BetaSchedule, SlackBand};
pub use tabular::{
    auto_slack, run_tabular, tabular_theorem_harness, HarnessConfig, HarnessReport, HarnessRow,
    SlackMode, SoftmaxTabularPolicy, TabularRun,
};
pub use train::{
    evaluate_policy, policy_gradients, train, write_metrics, ExtractionMode, MetricRow, Normalizer,
    TrainConfig, TrainOutput,
};
