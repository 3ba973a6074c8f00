use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// One ground-truth object. `class_id` is 1-based; 0 is reserved for background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub class_id: usize,
    pub bbox: BBox,
    #[serde(default)]
    pub difficult: bool,
}

/// Ground truth for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub objects: Vec<AnnotatedObject>,
}

impl Annotation {
    pub fn new(objects: Vec<AnnotatedObject>) -> Self {
        Self { objects }
    }

    /// Checks class ids against `num_classes` and box ordering.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.class_id == 0 || obj.class_id > num_classes {
                return Err(Error::Data(format!(
                    "object {i} has class id {} outside 1..={num_classes}",
                    obj.class_id
                )));
            }
            if !obj.bbox.is_valid() {
                return Err(Error::Data(format!("object {i} has an empty or inverted box")));
            }
        }
        Ok(())
    }

    /// Objects used for training: everything not flagged `difficult`.
    pub fn training_objects(&self) -> Annotation {
        Annotation {
            objects: self.objects.iter().filter(|o| !o.difficult).cloned().collect(),
        }
    }
}
