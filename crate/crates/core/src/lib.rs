//! Sequential recommendation with intent contrastive learning.
//!
//! A causal self-attention encoder is trained on next-item prediction,
//! a sequence-level contrastive loss between augmented views, and an
//! intent-level contrastive loss against k-means prototypes that are
//! refitted once per epoch.
//!
//! ```no_run
//! use iclrec::{data, trainer};
//!
//! let raw = data::load_interactions("beauty.txt".as_ref(), data::FileFormat::UserPerLine)?;
//! let split = data::split_leave_one_out(&raw);
//! let cfg = trainer::TrainConfig::new(split.vocab_size);
//! let out = trainer::train(&split, &cfg)?;
//! println!("test NDCG@20 {:.4}", out.report.test.ndcg_at(20));
//! # Ok::<(), iclrec::Error>(())
//! ```

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod clustering;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use clustering::IntentModel;
pub use data::{InteractionDataset, ItemId, PaddedSequence, SplitDataset, SplitUser};
pub use encoder::{EncoderConfig, EncoderParams, Mode};
pub use error::{Error, Result};
pub use eval::{EvalOptions, EvalResult, Phase};
pub use tensor::Matrix;
pub use trainer::{TrainConfig, TrainOutput, TrainReport};
