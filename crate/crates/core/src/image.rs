//! In-memory image with a linear sky mapping.
//!
//! Pixels are row-major f64 intensities. The world mapping is deliberately
//! affine: offsets from the sky position of pixel (0,0) scale by the pixel
//! size, with the RA axis compressed by cos(dec) evaluated once at the field
//! center. Fields of interest are arcminutes wide, so projection terms beyond
//! that are ignored.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, length width * height.
    pub data: Vec<f64>,
    /// Arcseconds per pixel, square pixels.
    pub pixel_scale_arcsec: f64,
    /// (ra_deg, dec_deg) of pixel (0, 0).
    pub origin_sky: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageError {
    BadDimensions { width: usize, height: usize },
    BadPixelScale(f64),
    DataLength { expected: usize, actual: usize },
    NonFiniteIntensity { index: usize },
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::BadDimensions { width, height } => {
                write!(f, "image dimensions must be at least 1x1, got {width}x{height}")
            }
            ImageError::BadPixelScale(s) => write!(f, "pixel scale must be positive, got {s}"),
            ImageError::DataLength { expected, actual } => {
                write!(f, "data length {actual} does not match width*height {expected}")
            }
            ImageError::NonFiniteIntensity { index } => {
                write!(f, "non-finite intensity at pixel index {index}")
            }
        }
    }
}

impl std::error::Error for ImageError {}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<f64>,
        pixel_scale_arcsec: f64,
        origin_sky: (f64, f64),
    ) -> Result<Self, ImageError> {
        if width < 1 || height < 1 {
            return Err(ImageError::BadDimensions { width, height });
        }
        if !(pixel_scale_arcsec > 0.0) || !pixel_scale_arcsec.is_finite() {
            return Err(ImageError::BadPixelScale(pixel_scale_arcsec));
        }
        if data.len() != width * height {
            return Err(ImageError::DataLength {
                expected: width * height,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFiniteIntensity { index });
        }
        Ok(Image {
            width,
            height,
            data,
            pixel_scale_arcsec,
            origin_sky,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_scale_arcsec: f64) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
            pixel_scale_arcsec,
            origin_sky: (0.0, 0.0),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Declination at the vertical center of the frame; fixes the RA
    /// compression factor for both mapping directions.
    pub fn dec_center(&self) -> f64 {
        self.origin_sky.1 + 0.5 * self.height as f64 * self.pixel_scale_arcsec / 3600.0
    }

    /// Sky to fractional pixel coordinates. Out-of-frame results are
    /// returned unclamped; callers decide about bounds.
    pub fn sky_to_pixel(&self, ra_deg: f64, dec_deg: f64) -> (f64, f64) {
        let cosd = self.dec_center().to_radians().cos();
        let x = (ra_deg - self.origin_sky.0) * cosd * 3600.0 / self.pixel_scale_arcsec;
        let y = (dec_deg - self.origin_sky.1) * 3600.0 / self.pixel_scale_arcsec;
        (x, y)
    }

    /// Inverse of [`Image::sky_to_pixel`] with the same fixed cos(dec).
    pub fn pixel_to_sky(&self, x: f64, y: f64) -> (f64, f64) {
        let cosd = self.dec_center().to_radians().cos();
        let ra = self.origin_sky.0 + x * self.pixel_scale_arcsec / 3600.0 / cosd;
        let dec = self.origin_sky.1 + y * self.pixel_scale_arcsec / 3600.0;
        (ra, dec)
    }
}
