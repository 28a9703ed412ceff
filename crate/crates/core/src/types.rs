//! Value types shared across modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape { channels, height, width }
    }

    /// Pixel count `C*H*W`.
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An image in `[-1, 1]`, stored `(C, H, W)` row-major, with its label set.
/// Single-label data has exactly one label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub shape: ImageShape,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImage {
    pub fn new(shape: ImageShape, pixels: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::Shape(format!("{} pixels for shape {:?}", pixels.len(), shape)));
        }
        if let Some(bad) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {bad} outside [-1, 1]")));
        }
        if labels.is_empty() {
            return Err(Error::Data("image without a label".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(LabeledImage { shape, pixels, labels })
    }

    pub fn label(&self) -> usize {
        self.labels[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn new(z: Vec<f64>, dim: usize) -> Result<Self> {
        if z.len() != dim {
            return Err(Error::Shape(format!("latent code of length {} (expected {dim})", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite latent code".into()));
        }
        Ok(LatentCode(z))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `sign` with the tie at zero sent to `+1`.
pub fn sign(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

/// Real hash-head output and its `{-1, +1}` binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct HashCode {
    pub real_code: Vec<f64>,
    pub binary_code: Vec<i8>,
}

impl HashCode {
    pub fn from_real(real_code: Vec<f64>) -> Self {
        let binary_code = real_code.iter().map(|&v| sign(v)).collect();
        HashCode { real_code, binary_code }
    }

    pub fn bits(&self) -> usize {
        self.real_code.len()
    }
}

/// Everything the descriptor says about one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorOutput {
    pub energy: f64,
    pub post_mean: Vec<f64>,
    pub post_var: Vec<f64>,
    pub hash: Vec<f64>,
    pub logits: Vec<f64>,
}

impl DescriptorOutput {
    pub fn is_finite(&self) -> bool {
        self.energy.is_finite()
            && [&self.post_mean, &self.post_var, &self.hash, &self.logits].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_maps_to_plus_one() {
        assert_eq!(HashCode::from_real(vec![0.0, -0.0, -1e-300, 2.0]).binary_code, vec![1, 1, -1, 1]);
    }

    #[test]
    fn labeled_image_rejects_out_of_range() {
        let shape = ImageShape::new(1, 1, 2);
        assert!(LabeledImage::new(shape, vec![0.0, 1.5], vec![0], 2).is_err());
        assert!(matches!(
            LabeledImage::new(shape, vec![0.0, 1.0], vec![2], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(LabeledImage::new(shape, vec![-1.0, 1.0], vec![1], 2).is_ok());
    }

    #[test]
    fn latent_code_checks_dim_and_finiteness() {
        assert!(LatentCode::new(vec![0.0; 3], 4).is_err());
        assert!(LatentCode::new(vec![0.0, f64::NAN], 2).is_err());
        assert_eq!(LatentCode::new(vec![1.0, 2.0], 2).unwrap().dim(), 2);
    }

    proptest! {
        #[test]
        fn binarization_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let once = HashCode::from_real(v).binary_code;
            let twice = HashCode::from_real(once.iter().map(|&b| b as f64).collect()).binary_code;
            prop_assert_eq!(once, twice);
        }
    }
}
