//! Coarse-to-fine 3D vessel segmentation for CT volumes: NIfTI I/O, voxel
//! grids, HU windowing, a small U-Net inference engine, sliding-window
//! multi-view inference, connected-component refinement, metrics and a
//! synthetic phantom generator.

pub mod fixpoint;
pub mod grid;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod unet;
pub mod windowing;

pub use fixpoint::{connected_components, fixpoint_refine, max_component, Connectivity, FixpointConfig};
pub use grid::{bounding_box, BBox3, Grid3, GridError, Mask3, Shape3, Spacing3, ViewAxis, Volume3};
pub use metrics::{dice, directed_hausdorff, evaluate_set, hausdorff, EvalReport};
pub use nifti::{read_mask, read_volume, write_mask, write_volume, NiftiError};
pub use phantom::{generate_phantom, PhantomError, PhantomSpec};
pub use pipeline::{segment, Fusion, PipelineError, SegConfig, Segmentation};
pub use unet::{AnalyticBackend, Backend, ModelWeights, Tensor5, UNet, UNetError};
pub use windowing::{WindowError, WindowSpec};
