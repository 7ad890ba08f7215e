//! Object-hallucination metrics, CHAIR-ranked preference data and DPO
//! training for a small synthetic captioner.
//!
//! The crate is organized along the pipeline:
//!
//! * [`lexicon`]: synonym lexicon and mention extraction.
//! * [`metrics`]: `CHAIR_i`, `CHAIR_s`, coverage and cognition.
//! * [`preference`]: sampling completion pairs and ranking them by `CHAIR_i`.
//! * [`toy_world`]: synthetic scenes and the log-linear captioner.
//! * [`dpo`]: the DPO objective, Adam and the training loop.
//! * [`pipeline`]: end-to-end runs with on-disk artifacts.

pub mod dpo;
pub mod error;
pub mod io;
pub mod lexicon;
pub mod metrics;
pub mod pipeline;
pub mod preference;
pub mod seed;
pub mod toy_world;

pub use error::{Error, Result};
pub use lexicon::{extract_mentions, Mention, MentionList, Span, SynonymLexicon};
pub use metrics::{aggregate, score_sample, Aggregation, ChairRatio, EvalReport, GroundTruth, SampleScore};
pub use preference::{PreferenceDataset, PreferencePair, TiePolicy};
pub use toy_world::{SamplingConfig, ToyPolicy, Vocabulary, World};
