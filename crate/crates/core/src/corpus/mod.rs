//! Interaction ingestion, filtering, splitting, per-task examples, prompt
//! rendering and tokenization.

mod dataset;
mod examples;
mod filter;
mod interaction;
mod prompt;
mod split;
pub mod synthetic;
pub mod vocab;

pub use dataset::{Corpus, DatasetStats};
pub use examples::{build_examples, Candidate, ExampleOptions, Label, NeighborSource, Sampler, Task, TaskExample};
pub use filter::k_core_filter;
pub use interaction::{parse_interactions, parse_interactions_str, Catalog, InputFormat, Interaction, ParsedData};
pub use prompt::{answer_ids, render_prompt, render_text, template_vocabulary, PromptTemplate, RenderedPrompt};
pub use split::{leave_one_out_split, Partition, Split, SplitMode, SplitSpec};
pub use vocab::Vocab;
