//! Time-series preprocessing, synthetic data, splits, augmentation and
//! on-disk datasets.

pub mod augment;
pub mod discretize;
pub mod instance;
pub mod io;
pub mod labels;
pub mod registry;
pub mod split;
pub mod synthetic;

pub use augment::{augment_image, AugmentConfig, AugmentMode};
pub use discretize::{discretize, Event, EventValue, RawTimeSeries};
pub use instance::{replicate_channels, CxrSample, Example, MultimodalInstance};
pub use io::{load_dataset, save_dataset, DatasetMeta};
pub use labels::PhenotypeCategory;
pub use registry::{Variable, VariableKind, VariableRegistry};
pub use split::{split_by_subject, DatasetSplit, SplitFractions, SplitName};
pub use synthetic::{generate_synthetic, generate_synthetic_with, Latents, SyntheticConfig, SyntheticWorld};
