//! Synthetic star fields with exact ground truth.
//!
//! A planted cluster draws star positions from an isotropic 2-D Gaussian
//! around a chosen center; background stars are uniform over the frame inset
//! by the PSF truncation radius (so no star bleeds off the edge and total
//! flux stays accountable). Every star is rendered as a circular Gaussian
//! PSF truncated at 5 sigma, with flux = flux_scale * 10^(-0.4 (mag -
//! bright)). Optional zero-mean Gaussian pixel noise is added last.
//!
//! One RNG stream seeded from the spec is consumed in this order:
//! 1. cluster positions (one normal pair per star),
//! 2. background positions (one uniform pair per star),
//! 3. magnitudes (one uniform per star, cluster stars first),
//! 4. pixel noise (normal pairs, row-major pixel order).

use crate::catalogue::{Catalogue, Source, Survey};
use crate::image::Image;
use crate::rng::Rng64;
use std::fmt;

/// Sky position assigned to pixel (0,0) of generated fields.
pub const FIELD_ORIGIN_SKY: (f64, f64) = (180.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub width: usize,
    pub height: usize,
    pub n_cluster: usize,
    pub n_background: usize,
    pub cluster_center_px: (f64, f64),
    pub cluster_sigma_px: f64,
    pub psf_sigma_px: f64,
    /// (bright, faint) magnitude endpoints; brighter = numerically smaller.
    pub mag_range: (f64, f64),
    pub noise_sigma: f64,
    pub pixel_scale_arcsec: f64,
    /// ADU carried by a star at the bright end of the magnitude range;
    /// sizes intensities for 16-bit storage.
    pub flux_scale: f64,
    pub survey: Survey,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            width: 512,
            height: 512,
            n_cluster: 150,
            n_background: 500,
            cluster_center_px: (256.0, 256.0),
            cluster_sigma_px: 20.0,
            psf_sigma_px: 1.5,
            mag_range: (10.0, 16.0),
            noise_sigma: 0.0,
            pixel_scale_arcsec: 1.0,
            flux_scale: 20000.0,
            survey: Survey::Ukidss,
            seed: 1,
        }
    }
}

/// Everything the acceptance tests need to score a detection.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// True for the first n_cluster catalogue rows.
    pub cluster_member_flags: Vec<bool>,
    pub true_center_px: (f64, f64),
    /// Defined as 2 x cluster_sigma_px (~86% of members enclosed).
    pub true_radius_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    InvalidSpec(String),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::InvalidSpec(m) => write!(f, "invalid field spec: {m}"),
        }
    }
}

impl std::error::Error for SynthError {}

fn validate(spec: &FieldSpec) -> Result<(), SynthError> {
    let fail = |m: String| Err(SynthError::InvalidSpec(m));
    if spec.width < 1 || spec.height < 1 {
        return fail(format!("frame {}x{} is empty", spec.width, spec.height));
    }
    let (cx, cy) = spec.cluster_center_px;
    if !(0.0..spec.width as f64).contains(&cx) || !(0.0..spec.height as f64).contains(&cy) {
        return fail(format!("cluster center ({cx}, {cy}) outside frame"));
    }
    if !(spec.cluster_sigma_px > 0.0) {
        return fail(format!("cluster sigma {} must be positive", spec.cluster_sigma_px));
    }
    if !(spec.psf_sigma_px > 0.0) {
        return fail(format!("psf sigma {} must be positive", spec.psf_sigma_px));
    }
    if spec.mag_range.0 > spec.mag_range.1 {
        return fail(format!(
            "magnitude range ({}, {}) is inverted",
            spec.mag_range.0, spec.mag_range.1
        ));
    }
    if !(spec.noise_sigma >= 0.0) {
        return fail(format!("noise sigma {} must be non-negative", spec.noise_sigma));
    }
    if !(spec.pixel_scale_arcsec > 0.0) {
        return fail(format!("pixel scale {} must be positive", spec.pixel_scale_arcsec));
    }
    if !(spec.flux_scale > 0.0) {
        return fail(format!("flux scale {} must be positive", spec.flux_scale));
    }
    Ok(())
}

/// Flux of one star in ADU: flux_scale * 10^(-0.4 (mag - bright)).
pub fn star_flux(spec: &FieldSpec, mag: f64) -> f64 {
    spec.flux_scale * 10f64.powf(-0.4 * (mag - spec.mag_range.0))
}

fn render_star(img: &mut Image, x: f64, y: f64, flux: f64, psf_sigma: f64) {
    let trunc = 5.0 * psf_sigma;
    let trunc2 = trunc * trunc;
    let amp = flux / (2.0 * std::f64::consts::PI * psf_sigma * psf_sigma);
    let inv_two_s2 = 1.0 / (2.0 * psf_sigma * psf_sigma);
    let x_lo = ((x - trunc).floor().max(0.0)) as usize;
    let x_hi = ((x + trunc).ceil()).min((img.width - 1) as f64) as usize;
    let y_lo = ((y - trunc).floor().max(0.0)) as usize;
    let y_hi = ((y + trunc).ceil()).min((img.height - 1) as f64) as usize;
    if x + trunc < 0.0 || y + trunc < 0.0 {
        return;
    }
    for py in y_lo..=y_hi {
        let dy = py as f64 - y;
        for px in x_lo..=x_hi {
            let dx = px as f64 - x;
            let d2 = dx * dx + dy * dy;
            if d2 <= trunc2 {
                img.data[py * img.width + px] += amp * (-d2 * inv_two_s2).exp();
            }
        }
    }
}

/// Generates the field, its catalogue (rows pass the spec's survey filter,
/// cluster members first) and the ground truth. Deterministic given the
/// seed.
pub fn generate_field(spec: &FieldSpec) -> Result<(Image, Catalogue, GroundTruth), SynthError> {
    validate(spec)?;
    let mut rng = Rng64::new(spec.seed);

    // 1. cluster positions
    let mut positions: Vec<(f64, f64)> = Vec::with_capacity(spec.n_cluster + spec.n_background);
    for _ in 0..spec.n_cluster {
        let (dx, dy) = rng.normal_pair();
        positions.push((
            spec.cluster_center_px.0 + spec.cluster_sigma_px * dx,
            spec.cluster_center_px.1 + spec.cluster_sigma_px * dy,
        ));
    }

    // 2. background positions, inset so full PSFs stay in frame
    let mut margin = (5.0 * spec.psf_sigma_px).ceil();
    if 2.0 * margin >= spec.width as f64 || 2.0 * margin >= spec.height as f64 {
        margin = 0.0;
    }
    for _ in 0..spec.n_background {
        let x = rng.uniform(margin, spec.width as f64 - margin);
        let y = rng.uniform(margin, spec.height as f64 - margin);
        positions.push((x, y));
    }

    // 3. magnitudes, cluster stars first
    let mags: Vec<f64> = (0..positions.len())
        .map(|_| rng.uniform(spec.mag_range.0, spec.mag_range.1))
        .collect();

    let mut img = Image {
        width: spec.width,
        height: spec.height,
        data: vec![0.0; spec.width * spec.height],
        pixel_scale_arcsec: spec.pixel_scale_arcsec,
        origin_sky: FIELD_ORIGIN_SKY,
    };
    for (&(x, y), &mag) in positions.iter().zip(&mags) {
        render_star(&mut img, x, y, star_flux(spec, mag), spec.psf_sigma_px);
    }

    // 4. pixel noise, row-major
    if spec.noise_sigma > 0.0 {
        let mut noise = vec![0.0; img.data.len()];
        rng.fill_normal(&mut noise);
        for (v, n) in img.data.iter_mut().zip(&noise) {
            *v += spec.noise_sigma * n;
        }
    }

    let flag = spec.survey.representative_flag();
    let sources: Vec<Source> = positions
        .iter()
        .zip(&mags)
        .map(|(&(x, y), &mag)| {
            let (ra_deg, dec_deg) = img.pixel_to_sky(x, y);
            Source {
                ra_deg,
                dec_deg,
                mag,
                class_flag: flag,
            }
        })
        .collect();

    let truth = GroundTruth {
        cluster_member_flags: (0..positions.len()).map(|i| i < spec.n_cluster).collect(),
        true_center_px: spec.cluster_center_px,
        true_radius_px: 2.0 * spec.cluster_sigma_px,
    };

    Ok((img, Catalogue { sources }, truth))
}

impl GroundTruth {
    /// key=value sidecar; member flags as a 0/1 string in row order.
    pub fn to_sidecar(&self) -> String {
        let flags: String = self
            .cluster_member_flags
            .iter()
            .map(|&f| if f { '1' } else { '0' })
            .collect();
        format!(
            "true_center_px_x={}\ntrue_center_px_y={}\ntrue_radius_px={}\nn_members={}\nmember_flags={}\n",
            self.true_center_px.0,
            self.true_center_px.1,
            self.true_radius_px,
            self.cluster_member_flags.iter().filter(|&&f| f).count(),
            flags
        )
    }

    pub fn from_sidecar(text: &str) -> Result<GroundTruth, SynthError> {
        let mut cx = None;
        let mut cy = None;
        let mut radius = None;
        let mut flags = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SynthError::InvalidSpec(format!("bad sidecar line '{line}'")))?;
            match key {
                "true_center_px_x" => cx = value.parse::<f64>().ok(),
                "true_center_px_y" => cy = value.parse::<f64>().ok(),
                "true_radius_px" => radius = value.parse::<f64>().ok(),
                "member_flags" => {
                    flags = Some(
                        value
                            .chars()
                            .map(|c| c == '1')
                            .collect::<Vec<bool>>(),
                    )
                }
                _ => {}
            }
        }
        match (cx, cy, radius, flags) {
            (Some(x), Some(y), Some(r), Some(f)) => Ok(GroundTruth {
                cluster_member_flags: f,
                true_center_px: (x, y),
                true_radius_px: r,
            }),
            _ => Err(SynthError::InvalidSpec("incomplete sidecar".into())),
        }
    }
}
