//! Annotation and analysis pipeline for mental-health discourse in social
//! media posts.
//!
//! Posts are ingested from local dumps, sampled, gated by a yes/no relevance
//! call, and labeled by a lexicon matcher and any number of chat-completion
//! backends. Labeled posts are exported for classifier training; imported
//! predictions are scored per fold; and the records feed the distribution
//! reports.

pub mod analyze;
pub mod annotate;
pub mod corpus;
pub mod evaluate;
pub mod gateway;
pub mod labels;
pub mod lexicon;
pub mod pipeline;
pub mod rng;
pub mod tasks;

pub use annotate::{AnnotationRecord, AnnotatorId, RecordStore, TrainingExample};
pub use corpus::{CorpusFilter, IngestStats, Post, SampleSpec};
pub use evaluate::{ComparisonTable, FoldAssignment, MetricsReport};
pub use gateway::{BackendConfig, CompletionResult, Gateway};
pub use labels::{DisorderLabel, LabelSet};
pub use lexicon::{DictionaryMatcher, Lexicon, MatchResult};
pub use tasks::{
    BinaryVerdict, SeverityLevel, TaskKind, TemplatePack, TherapyCode, TherapyRecommendation,
};
