//! Scene preprocessing and evaluation for Gaussian-splatting pipelines.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`scene_io`]: COLMAP models, PLY clouds, label masks, embeddings.
//! * [`hull_filter`]: convex-hull outlier removal over a trusted core.
//! * [`view_select`]: camera clustering and representative-view choice.
//! * [`segment_fusion`]: projection of points into views and global segment ids.
//! * [`densify`]: mask-area-guided point augmentation.
//! * [`metrics`]: image, embedding and point-set metrics and losses.
//! * [`synth`]: synthetic scenes with known ground truth.

pub mod densify;
pub mod hull_filter;
pub mod metrics;
pub mod scene_io;
pub mod segment_fusion;
pub mod spatial;
pub mod synth;
pub mod view_select;
