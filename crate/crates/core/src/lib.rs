//! Interpolation-based semi-supervised learning for a toy single-stage detector.
//!
//! Images are mixed with their horizontally flipped, shuffled counterparts and
//! the detector is trained to keep its predictions on mixed images consistent
//! with the predictions on the sources. Locations are split by objectness:
//! where both sources look like objects the mixed class distribution is
//! matched with a Jensen-Shannon loss (Type-I); where only one does, the mixed
//! prediction is pulled towards that source with KL and L2 losses (Type-II).
//! A flip-consistency loss and the supervised multibox loss complete the
//! objective.

pub mod annotation;
pub mod augment;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod masks;
mod plot;
pub mod ssl_losses;
pub mod tensor;
pub mod trainer;

pub use annotation::{AnnotatedObject, Annotation};
pub use error::{Error, Result};
pub use geometry::{BBox, CenterBox, Detection};
pub use tensor::Image;
