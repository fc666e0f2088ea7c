//! Retrieval metrics, the mutual-information bound check and the gradient checker.

mod gradcheck;
mod mi;
mod retrieval;

pub use gradcheck::{gradcheck, relative_error, GradcheckConfig, GradcheckReport, TermCheck, TERMS};
pub use mi::{
    exact_mi, nce_bound_check, regression_suite, run_regression_suite, BoundReport, CriticConfig, DiscreteJoint, SuiteRow, BOUND_SLACK, MASS_TOL,
};
pub use retrieval::{
    embed_pairs, retrieval_eval, retrieval_eval_model, retrieval_from_similarity, save_similarity, write_similarity, Recall,
    RetrievalResult, SIMILARITY_MAGIC,
};

use serde_json::{json, Value};

use crate::training::TrainConfig;

/// `git describe` of the source tree at build time.
pub const BUILD_ID: &str = env!("TCL_BUILD_ID");

/// The `results.json` document: command, metrics, resolved config and build id.
pub fn results_document(command: &str, cfg: &TrainConfig, r: &RetrievalResult) -> Value {
    let config: serde_json::Map<String, Value> = cfg.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
    json!({
        "command": command,
        "build": BUILD_ID,
        "seed": cfg.seed,
        "retrieval": r,
        "config": config,
    })
}
