//! Sliding-window patch extraction and image normalization.
//!
//! The training protocol cuts each image into square patches at several
//! scales with 50% overlap (stride = size/2). Patches are plain views:
//! values are copied untransformed, so reassembling by geometry reproduces
//! the source exactly on covered pixels. Normalization happens once per
//! image, before extraction, because per-patch scaling would erase the
//! brightness contrast between patches that the clustering relies on.

use crate::image::Image;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub patch_size: usize,
    pub stride: usize,
    /// Flattened row-major patch vectors, each of length patch_size^2.
    pub patches: Vec<Vec<f64>>,
    /// Top-left (x0, y0) of each patch in the source image.
    pub geometry: Vec<(usize, usize)>,
    pub source_dims: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchError {
    PatchTooLarge {
        patch_size: usize,
        width: usize,
        height: usize,
    },
    BadStride,
}

impl fmt::Display for PatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchError::PatchTooLarge {
                patch_size,
                width,
                height,
            } => write!(
                f,
                "patch size {patch_size} exceeds image dimensions {width}x{height}"
            ),
            PatchError::BadStride => write!(f, "stride must be at least 1"),
        }
    }
}

impl std::error::Error for PatchError {}

/// Number of patch positions along one axis: floor((dim - size)/stride) + 1.
pub fn patch_count_1d(dim: usize, patch_size: usize, stride: usize) -> usize {
    if patch_size > dim {
        return 0;
    }
    (dim - patch_size) / stride + 1
}

/// Enumerates patches row-major over top-left positions {0, stride, ...}
/// while the whole patch fits; trailing pixels are dropped.
pub fn extract_patches(
    img: &Image,
    patch_size: usize,
    stride: usize,
) -> Result<PatchDataset, PatchError> {
    if stride == 0 {
        return Err(PatchError::BadStride);
    }
    if patch_size == 0 || patch_size > img.width || patch_size > img.height {
        return Err(PatchError::PatchTooLarge {
            patch_size,
            width: img.width,
            height: img.height,
        });
    }
    let nx = patch_count_1d(img.width, patch_size, stride);
    let ny = patch_count_1d(img.height, patch_size, stride);
    let mut patches = Vec::with_capacity(nx * ny);
    let mut geometry = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        let y0 = iy * stride;
        for ix in 0..nx {
            let x0 = ix * stride;
            let mut p = Vec::with_capacity(patch_size * patch_size);
            for dy in 0..patch_size {
                let row = (y0 + dy) * img.width + x0;
                p.extend_from_slice(&img.data[row..row + patch_size]);
            }
            patches.push(p);
            geometry.push((x0, y0));
        }
    }
    Ok(PatchDataset {
        patch_size,
        stride,
        patches,
        geometry,
        source_dims: (img.width, img.height),
    })
}

/// Percentile by linear interpolation between order statistics:
/// rank = p/100 * (n-1), result = v[lo] + frac * (v[lo+1] - v[lo]).
/// `sorted` must be ascending.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=100.0).contains(&p));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Rescales intensities to [0, 1]: v' = clamp((v - min) / (p_high - min), 0, 1)
/// where p_high is the clip_percentile-th percentile. A constant image maps
/// to all zeros. Sky mapping metadata is preserved.
pub fn normalize(img: &Image, clip_percentile: f64) -> Image {
    assert!(
        clip_percentile > 0.0 && clip_percentile <= 100.0,
        "clip percentile must be in (0, 100]"
    );
    let mut sorted = img.data.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("intensities are finite"));
    let p_low = sorted[0];
    let p_high = percentile(&sorted, clip_percentile);
    let range = p_high - p_low;
    let data = if range > 0.0 {
        img.data
            .iter()
            .map(|v| ((v - p_low) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; img.data.len()]
    };
    Image {
        width: img.width,
        height: img.height,
        data,
        pixel_scale_arcsec: img.pixel_scale_arcsec,
        origin_sky: img.origin_sky,
    }
}
