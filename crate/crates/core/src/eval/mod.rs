//! Echo-cancellation metrics, the PESQ adapter, an NLMS baseline and dataset evaluation.

mod erle;
mod nlms;
mod pesq;
mod report;

pub use erle::{erle, pooled_erle_db, ERLE_CAP_DB, POWER_FLOOR};
pub use nlms::{nlms_cancel, NlmsConfig};
pub use pesq::{delta_pesq, parse_score, PesqOutcome, PesqScorer};
pub use report::{evaluate_dataset, Aggregate, EvalReport, EvalRow, Method};
