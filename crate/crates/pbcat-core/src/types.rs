use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Axis-aligned box in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: usize,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize) -> Result<Self> {
        let b = Self {
            x1,
            y1,
            x2,
            y2,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox(format!("non-finite coordinates {self:?}")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::InvalidBox(format!("empty extent {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f32 {
        libm::hypotf(self.width(), self.height())
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f32 && self.y2 <= height as f32
    }
}

/// One image with its ground truth. The image is `[3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub boxes: Vec<BBox>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Image, boxes: Vec<BBox>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            boxes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self
            .image
            .as_slice()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidSample(format!(
                "{}: pixel value {v} outside [0, 1]",
                self.id
            )));
        }
        for b in &self.boxes {
            b.validate()?;
            if !b.within(self.image.height(), self.image.width()) {
                return Err(Error::InvalidSample(format!(
                    "{}: box {b:?} outside {}x{} image",
                    self.id,
                    self.image.width(),
                    self.image.height()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_and_non_finite_boxes() {
        assert!(BBox::new(5.0, 0.0, 5.0, 3.0, 0).is_err());
        assert!(BBox::new(0.0, 4.0, 3.0, 1.0, 0).is_err());
        assert!(BBox::new(f32::NAN, 0.0, 3.0, 1.0, 0).is_err());
        assert!(BBox::new(0.0, 0.0, 3.0, 1.0, 2).is_ok());
    }

    #[test]
    fn center_and_size_are_derived_from_corners() {
        let b = BBox::new(10.0, 20.0, 40.0, 60.0, 0).unwrap();
        assert_eq!(b.center(), (25.0, 40.0));
        assert_eq!((b.width(), b.height()), (30.0, 40.0));
        assert_eq!(b.diagonal(), 50.0);
    }

    #[test]
    fn sample_rejects_out_of_range_pixels_and_boxes() {
        let img = Image::filled(8, 8, 0.5);
        let inside = BBox::new(0.0, 0.0, 8.0, 8.0, 0).unwrap();
        assert!(ImageSample::new("a", img.clone(), alloc::vec![inside]).is_ok());
        let outside = BBox::new(0.0, 0.0, 9.0, 8.0, 0).unwrap();
        assert!(ImageSample::new("b", img, alloc::vec![outside]).is_err());
        let bright = Image::filled(8, 8, 1.5);
        assert!(ImageSample::new("c", bright, alloc::vec![]).is_err());
    }
}
