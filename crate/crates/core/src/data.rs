//! Images, label maps and batching.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

/// A single-channel intensity image with its dataset-wide id.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: u32,
    /// Shape `(1, 1, h, w)`.
    pub pixels: Tensor4,
}

impl Image {
    pub fn new(id: u32, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Image {
            id,
            pixels: Tensor4::from_vec(Shape::new(1, 1, height, width), data)?,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape().h
    }

    pub fn width(&self) -> usize {
        self.pixels.shape().w
    }
}

/// A class-index map (the segmentation mask type).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

pub type SegMask = LabelMap;

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Config(alloc::format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: alloc::vec![class; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: LabelMap,
}

impl Sample {
    pub fn id(&self) -> u32 {
        self.image.id
    }
}

/// Stacks single images into one `(n, 1, h, w)` batch.
pub fn batch_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor4> {
    let parts: Vec<&Tensor4> = images.into_iter().map(|i| &i.pixels).collect();
    Tensor4::stack(&parts)
}

/// Splits `0..len` into consecutive chunks of at most `batch_size`.
pub fn batch_ranges(len: usize, batch_size: usize) -> impl Iterator<Item = core::ops::Range<usize>> {
    let b = batch_size.max(1);
    (0..len.div_ceil(b)).map(move |i| i * b..((i + 1) * b).min(len))
}
