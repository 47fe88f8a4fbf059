use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary H×W mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                len: bits.len(),
            });
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    /// Axis-aligned rectangle covering rows `top..top+h` and columns `left..left+w`.
    pub fn rectangle(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut m = Self::empty(height, width);
        for r in top..(top + h).min(height) {
            for c in left..(left + w).min(width) {
                m.bits[r * width + c] = true;
            }
        }
        m
    }

    /// Builds a mask from 0/1 values; any other value is rejected.
    pub fn from_values(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::format("mask", format!("non-binary value {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same_size(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape {
                op,
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Self) -> Result<usize> {
        self.check_same_size(other, "mask intersection")?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count())
    }

    pub fn overlaps(&self, other: &Self) -> Result<bool> {
        Ok(self.intersection_area(other)? > 0)
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &Self) -> Result<f64> {
        let inter = self.intersection_area(other)?;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return Ok(0.0);
        }
        Ok(inter as f64 / union as f64)
    }
}

/// Run-length encoding of a [`BinaryMask`]: alternating runs of 0s and 1s in
/// row-major order, starting with a (possibly empty) run of 0s.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u32>,
}

pub fn encode_rle(mask: &BinaryMask) -> RleMask {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for &bit in &mask.bits {
        if bit != current {
            runs.push(count);
            current = bit;
            count = 0;
        }
        count += 1;
    }
    runs.push(count);
    RleMask {
        height: mask.height,
        width: mask.width,
        runs,
    }
}

pub fn decode_rle(rle: &RleMask) -> Result<BinaryMask> {
    let total: u64 = rle.runs.iter().map(|&r| u64::from(r)).sum();
    let expected = (rle.height * rle.width) as u64;
    if total != expected {
        return Err(Error::format(
            "rle",
            format!("runs sum to {total}, expected {}x{}={expected}", rle.height, rle.width),
        ));
    }
    let mut bits = Vec::with_capacity(expected as usize);
    for (k, &run) in rle.runs.iter().enumerate() {
        bits.extend(std::iter::repeat_n(k % 2 == 1, run as usize));
    }
    BinaryMask::new(rle.height, rle.width, bits)
}
