//! lethe-core: a desk-scale laboratory for continual unlearning in language
//! models. Everything is f64, single-threaded, and seeded — a run with the
//! same config is bit-for-bit reproducible.

pub mod attack;
pub mod attribution;
pub mod corpus;
pub mod engine;
pub mod filter;
pub mod metrics;
pub mod importance;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod seeded;
pub mod tensor;
pub mod tokenizer;

pub use attack::{AttackOutcome, AttackSpec, QuantizeSpec, RelearnData, RelearnSpec};
pub use attribution::AttributionReport;
pub use corpus::{Category, Request, Sample, Split};
pub use engine::{BaselineMode, RunConfig, RunOutcome, TrainConfig};
pub use filter::FilterConfig;
pub use importance::MethodMap;
pub use metrics::{BaseMetrics, MetricBundle};
pub use model::{load_checkpoint, save_checkpoint, ModelConfig, ToyLm};
pub use objectives::{ObjectiveConfig, ObjectiveKind};
