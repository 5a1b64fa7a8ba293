use crate::error::{Result, VtiError};
use crate::numerics::Tensor;

pub const CHANNELS: usize = 3;

/// RGB image, `[H, W, 3]` row-major, values clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Tensor,
}

impl Image {
    /// Values outside `[0, 1]` are clamped; non-finite values are rejected.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(VtiError::dim("image dimensions must be positive"));
        }
        for v in &mut data {
            if v.is_finite() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        let data = Tensor::new(vec![height, width, CHANNELS], data)?;
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        self.data.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        let d = self.data.data();
        [d[i], d[i + 1], d[i + 2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps_and_rejects_nan() {
        let img = Image::new(1, 1, vec![-0.5, 0.5, 2.0]).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.5, 1.0]);
        assert!(Image::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }
}
