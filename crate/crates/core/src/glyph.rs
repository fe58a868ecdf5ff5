//! Binary 28×28 observations.

use crate::error::{GmnError, Result};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
/// Bytes of a bit-packed image.
pub const PACKED_LEN: usize = PIXELS / 8;

/// A 28×28 grid of {0, 1} pixels, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    pixels: Box<[u8; PIXELS]>,
}

impl std::fmt::Debug for BinaryImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryImage({} on)", self.count_on())
    }
}

impl BinaryImage {
    pub fn zeros() -> Self {
        BinaryImage { pixels: Box::new([0; PIXELS]) }
    }

    pub fn ones() -> Self {
        BinaryImage { pixels: Box::new([1; PIXELS]) }
    }

    pub fn from_pixels(pixels: &[u8]) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(GmnError::Shape(format!("expected {PIXELS} pixels, got {}", pixels.len())));
        }
        if let Some(bad) = pixels.iter().find(|&&p| p > 1) {
            return Err(GmnError::Contract(format!("pixel value {bad} is not binary")));
        }
        let mut out = [0u8; PIXELS];
        out.copy_from_slice(pixels);
        Ok(BinaryImage { pixels: Box::new(out) })
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut out = [0u8; PIXELS];
        for y in 0..SIDE {
            for x in 0..SIDE {
                out[y * SIDE + x] = f(y, x) as u8;
            }
        }
        BinaryImage { pixels: Box::new(out) }
    }

    pub fn pixels(&self) -> &[u8; PIXELS] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * SIDE + x]
    }

    pub fn count_on(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    /// Row-major, most significant bit first.
    pub fn pack(&self) -> [u8; PACKED_LEN] {
        let mut out = [0u8; PACKED_LEN];
        for (i, &p) in self.pixels.iter().enumerate() {
            if p == 1 {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != PACKED_LEN {
            return Err(GmnError::Shape(format!("packed image needs {PACKED_LEN} bytes, got {}", bytes.len())));
        }
        let mut out = [0u8; PIXELS];
        for (i, p) in out.iter_mut().enumerate() {
            *p = (bytes[i / 8] >> (7 - i % 8)) & 1;
        }
        Ok(BinaryImage { pixels: Box::new(out) })
    }

    pub fn to_real<F: crate::real::Real>(&self) -> impl Iterator<Item = F> + '_ {
        self.pixels.iter().map(|&p| if p == 1 { F::one() } else { F::zero() })
    }
}
