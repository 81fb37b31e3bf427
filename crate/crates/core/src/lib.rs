//! Homophone slang generation and quality-estimation robustness probing.
//!
//! The crate is organised as a pipeline:
//!
//! - [`lexicon`] builds the character/string frequency dictionary, loads the
//!   toneless pinyin table and segments text by greedy longest match.
//! - [`homogen`] extracts error-causing slang from annotated data and
//!   enumerates homophone candidates filtered by corpus frequency.
//! - [`scoring`] ranks candidates by percentile score or by self-information
//!   under a pluggable log-probability provider.
//! - [`dataset`] and [`perturb`] load the annotated MT data and build the
//!   perturbation groups.
//! - [`probe`] sends groups to external QE scorers and emotion predictors over
//!   [`wire`], which also provides record/replay cassettes.
//! - [`metrics`] and [`report`] compute and render the robustness tables.
//! - [`annotate`] exports rating tasks and imports the ratings back.
//! - [`pipeline`] wires the stages together with deterministic artifacts.

pub mod annotate;
pub mod dataset;
pub mod homogen;
pub mod lexicon;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod scoring;
pub mod wire;

mod parallel;

pub use dataset::{Dataset, EmotionLabel, Instance, Span};
pub use homogen::{Candidate, CandidateSet, SlangEntry};
pub use lexicon::{FrequencyDict, PinyinTable, Segmenter};
pub use perturb::{PerturbationGroup, SubstitutionRule};
