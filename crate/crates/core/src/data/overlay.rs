use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask, RgbImage};

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Grayscale image replicated into RGB with the pixels of `class_id`
/// alpha-blended towards pure green.
pub fn make_overlay(image: &GrayImage, mask: &LabelMask, class_id: u8) -> Result<RgbImage> {
    if !mask.same_shape_as(image) {
        return Err(Error::Shape("overlay mask and image differ in size".into()));
    }
    if class_id == 0 || class_id > mask.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} outside 1..={}",
            mask.num_classes()
        )));
    }
    let a = OVERLAY_ALPHA;
    let mut data = Vec::with_capacity(image.pixels().len() * 3);
    for (g, l) in image.pixels().iter().zip(mask.labels()) {
        if *l == class_id {
            data.extend_from_slice(&[(1.0 - a) * g, (1.0 - a) * g + a, (1.0 - a) * g]);
        } else {
            data.extend_from_slice(&[*g, *g, *g]);
        }
    }
    Ok(RgbImage {
        height: image.height(),
        width: image.width(),
        data,
    })
}
