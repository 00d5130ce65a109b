//! Plain 2-D image and binary mask buffers used outside the autodiff engine.

/// Grayscale slice, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image2 {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(h * w, data.len(), "image data length must match h*w");
        Image2 { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image2 { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Image2 { h, w, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    pub fn flip_h(&self) -> Image2 {
        Image2::from_fn(self.h, self.w, |y, x| self.get(y, self.w - 1 - x))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Binary mask, row-major, values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask2 {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(h * w, data.len(), "mask data length must match h*w");
        debug_assert!(data.iter().all(|&v| v <= 1), "mask values must be 0/1");
        Mask2 { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask2 { h, w, data: vec![0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x) as u8);
            }
        }
        Mask2 { h, w, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn complement(&self) -> Mask2 {
        Mask2 {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn flip_h(&self) -> Mask2 {
        Mask2::from_fn(self.h, self.w, |y, x| self.get(y, self.w - 1 - x) != 0)
    }
}
