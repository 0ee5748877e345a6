use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

/// Dense `height x width` real field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Raw mask decoder output.
pub type MaskLogits = Field2D;
/// Per-pixel foreground probability.
pub type ProbabilityMap = Field2D;

impl Field2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "field of {} values is not {height}x{width}",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn from_mask(m: &BinaryMask) -> Self {
        Self {
            height: m.height(),
            width: m.width(),
            values: m.to_f64(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn same_dims(&self, o: &Field2D) -> Result<()> {
        if (self.height, self.width) != (o.height, o.width) {
            return Err(Error::DimMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, o.height, o.width
            )));
        }
        Ok(())
    }

    pub fn sigmoid(&self) -> ProbabilityMap {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    /// Pixels with value `>= threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        let data = self.values.iter().map(|&v| v >= threshold).collect();
        BinaryMask::from_vec(self.height, self.width, data).expect("dims match")
    }
}
