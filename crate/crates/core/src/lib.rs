//! Training-free vision-language reward models by checkpoint merging.
//!
//! A text reward model (RM) and a vision-language model (LVLM) fine-tuned
//! from the same pre-trained language model share a transformer. Merging
//! the two transformers and pairing the result with the LVLM's vision
//! encoder and adapter and the RM's reward head yields a reward model that
//! scores image-grounded responses.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`vocab`] read and write checkpoints and vocab sidecars;
//! * [`manifest`] assigns component roles to tensors and validates a triple;
//! * [`merge`] implements the merge kernels (linear, task arithmetic, TIES,
//!   DARE variants);
//! * [`embed`] merges embedding matrices by token;
//! * [`assemble`] composes the merged checkpoint;
//! * [`sweep`] runs hyperparameter grids and selects a winner;
//! * [`eval`] and [`scorer`] compute accuracies from external rewards;
//! * [`toy`] builds a small synthetic triple.
//!
//! ```
//! use vlrm_merge::merge::{merge_tensor, MergeRecipe};
//!
//! let pre = [0.0_f32, 0.0];
//! let lvlm = [1.0_f32, 2.0];
//! let rm = [3.0_f32, -2.0];
//! let out = merge_tensor(&MergeRecipe::task_arithmetic(0.5), "w", Some(&pre), &lvlm, &rm).unwrap();
//! assert_eq!(out, vec![2.0, 0.0]);
//! ```

pub mod assemble;
pub mod embed;
pub mod eval;
pub mod manifest;
pub mod merge;
pub mod scorer;
pub mod sweep;
pub mod tensor;
pub mod toy;
pub mod vocab;

pub use assemble::{assemble_vlrm, AssemblyPlan};
pub use manifest::{ComponentRole, ManifestConfig, ModelTriple};
pub use merge::{MergeMethod, MergeRecipe};
pub use tensor::{read_checkpoint, write_checkpoint, Checkpoint, DType, Tensor};
