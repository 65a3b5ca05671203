//! Conformal prediction sets over precomputed classifier scores.
//!
//! The crate consumes an `n × K` score matrix (logits or probabilities) with
//! labels and produces prediction sets whose marginal coverage is guaranteed
//! to be at least `1 - alpha` on exchangeable data. Supported set families:
//!
//! - `naive`: shortest prefix of the sorted scores with mass `>= 1 - alpha`
//! - `aps`: cumulative-mass conformal sets
//! - `raps`: `aps` with a rank penalty `lambda * (o - k_reg)^+`
//! - `lac`: threshold on the raw class probability
//! - `fixed_k`: randomized top-`k*` / top-`(k* - 1)` sets
//!
//! Module map:
//!
//! - [`score_store`]: score matrices, file formats, softmax, sorting, splits
//! - [`platt`]: temperature scaling by NLL minimization
//! - [`conformal`]: conformity scores, calibration and set construction
//! - [`tuning`]: `k*` estimation, fixed-k baseline, `lambda` selection
//! - [`eval`]: coverage, size, SSCV, stratified tables and multi-trial runs
//! - [`synth`]: synthetic problems with known conditional probabilities
//! - [`report`]: aligned-text and CSV renderings of evaluation results

pub mod conformal;
pub mod error;
pub mod eval;
pub mod platt;
pub mod report;
pub mod score_store;
pub mod seeding;
pub mod synth;
pub mod tuning;

pub use conformal::{ConformalModel, Method, MethodSpec, PredictionSet};
pub use error::{Error, Result};
pub use score_store::{ScoreKind, ScoreMatrix, SortedScores, SplitSpec};
