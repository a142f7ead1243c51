//! Dataset generation, training, evaluation and ablation drivers.

pub mod ablate;
pub mod data;
pub mod eval;
pub mod train;

pub use ablate::{ablate, grid, naive_baseline, AblationAxis, AblationRow, GridPoint};
pub use data::{load_sample, load_split, make_synthetic, Manifest, ManifestEntry, Sample, Split, MANIFEST_FILE};
pub use eval::{enhance_files, evaluate, evaluate_samples, Enhancer, IdentityEnhancer, ModelEnhancer};
pub use train::{train, StepRecord, TrainOutcome, CHECKPOINT_FILE, LOG_FILE};
