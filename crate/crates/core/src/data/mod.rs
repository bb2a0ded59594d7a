//! Candidate records, patch storage, scan-level folds and the synthetic
//! imbalanced dataset generator.

mod folds;
mod patch;
mod records;
mod synthetic;

pub use folds::{split_folds, FoldAssignment};
pub use patch::{
    patch_input_shape, patches_to_tensor,
    load_patch_store, save_patch_store, Patch, PatchStore, PATCH_CHANNELS, PATCH_LEN, PATCH_SIDE,
    PATCH_STORE_VERSION,
};
pub use records::{class_counts, load_candidates, write_candidates, CandidateRecord, CANDIDATE_HEADER};
pub use synthetic::{generate_synthetic, SyntheticConfig};
