//! Binary spatial masks (`K × H × W`, stored as bytes).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mask {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let inter = (iy * ix) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union == 0.0 { 0.0 } else { inter / union }
    }
}

impl Mask {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0; channels * height * width] }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch { expected: channels * height * width, actual: data.len() });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidGuidance("mask values must be 0 or 1".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_rect(height: usize, width: usize, r: Rect) -> Self {
        let mut m = Self::zeros(1, height, width);
        for y in r.y0..r.y1.min(height) {
            for x in r.x0..r.x1.min(width) {
                m.data[y * width + x] = 1;
            }
        }
        m
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Every pixel has exactly one active channel.
    pub fn is_one_hot(&self) -> bool {
        let hw = self.height * self.width;
        (0..hw).all(|p| (0..self.channels).map(|c| self.data[c * hw + p] as usize).sum::<usize>() == 1)
    }

    /// Tight bounding rectangle of channel `c`, or `None` if it is empty.
    pub fn bounding_rect(&self, c: usize) -> Option<Rect> {
        let mut r: Option<Rect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(c, y, x) == 1 {
                    let b = r.get_or_insert(Rect { y0: y, y1: y + 1, x0: x, x1: x + 1 });
                    b.y0 = b.y0.min(y);
                    b.y1 = b.y1.max(y + 1);
                    b.x0 = b.x0.min(x);
                    b.x1 = b.x1.max(x + 1);
                }
            }
        }
        r
    }

    /// Single-channel mask whose ones form exactly one filled rectangle.
    pub fn is_single_rectangle(&self) -> bool {
        if self.channels != 1 {
            return false;
        }
        match self.bounding_rect(0) {
            None => false,
            Some(r) => self.data.iter().filter(|&&v| v == 1).count() == r.area(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Spatial max pooling of a `K × H × W` mask into a multi-hot vector.
pub fn mask_to_multihot(mask: &Mask) -> Vec<u8> {
    (0..mask.channels).map(|c| mask.plane(c).iter().copied().max().unwrap_or(0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multihot_cases() {
        assert_eq!(mask_to_multihot(&Mask::zeros(4, 3, 3)), vec![0, 0, 0, 0]);
        let mut m = Mask::zeros(4, 3, 3);
        m.set(2, 1, 1, 1);
        assert_eq!(mask_to_multihot(&m), vec![0, 0, 1, 0]);
        m.set(2, 1, 1, 0);
        m.set(0, 0, 2, 1);
        m.set(3, 2, 0, 1);
        m.set(3, 2, 1, 1);
        assert_eq!(mask_to_multihot(&m), vec![1, 0, 0, 1]);
    }

    #[test]
    fn rect_helpers() {
        let r = Rect { y0: 1, y1: 3, x0: 2, x1: 5 };
        let m = Mask::from_rect(4, 6, r);
        assert!(m.is_single_rectangle());
        assert_eq!(m.bounding_rect(0), Some(r));
        assert_eq!(r.iou(&r), 1.0);
        assert_eq!(r.iou(&Rect { y0: 1, y1: 3, x0: 5, x1: 6 }), 0.0);
        // Half overlap: inter 2x1... intersection 2 rows x 2 cols = 4, union 6 + 6 - 4 = 8.
        assert_eq!(r.iou(&Rect { y0: 1, y1: 3, x0: 3, x1: 6 }), 0.5);
        let mut holes = m.clone();
        holes.set(0, 2, 3, 0);
        assert!(!holes.is_single_rectangle());
    }
}
