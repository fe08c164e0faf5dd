//! Self-contradiction detection for encyclopedia articles.
//!
//! An article is split into sentences, every in-paragraph sentence pair is
//! scored by a pairwise contradiction layer, the `K` most contradictory
//! pairs are pooled with self-attention and a small feed-forward classifier
//! decides whether the article contradicts itself. The ranked pair list
//! doubles as the explanation.
//!
//! ```no_run
//! use pcnn::{corpus, trainer};
//!
//! let model = trainer::load_checkpoint("model.ckpt")?;
//! let article = corpus::Article::from_text(1, 1, "Ada", 0, "Ada was born in Lakewood. Ada was born in Renton.")?;
//! let pred = model.predict(&article)?;
//! println!("p = {:.3}, top pair = {:?}", pred.prob, pred.explanation.first().map(|p| p.pair));
//! # Ok::<(), pcnn::Error>(())
//! ```

pub mod aggregator;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalm;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pcl;
pub mod pipeline;
pub mod seed;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use model::{Model, ModelConfig};
