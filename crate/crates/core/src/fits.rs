//! Reader and writer for the strict FITS subset the pipeline uses:
//! primary HDU only, BITPIX=16, NAXIS=2, big-endian data in 2880-byte
//! blocks of 80-character header cards.
//!
//! Physical values are `BZERO + BSCALE * raw` (defaults 0 and 1). The pixel
//! scale travels in a `PIXSCALE` card (arcseconds per pixel, written by
//! [`write_fits`]); `CDELT1`/`CDELT2` in degrees are accepted on read for
//! files from elsewhere. `CRVAL1`/`CRVAL2` carry the sky position of pixel
//! (0,0). Data rows are stored top-down: the first row of the data block is
//! image row 0.

use crate::image::Image;
use std::fmt;

const BLOCK: usize = 2880;
const CARD: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub enum FitsError {
    MalformedHeader(String),
    UnsupportedFormat(String),
    TruncatedData { expected: usize, actual: usize },
    MissingPixelScale,
}

impl fmt::Display for FitsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitsError::MalformedHeader(m) => write!(f, "malformed FITS header: {m}"),
            FitsError::UnsupportedFormat(m) => write!(f, "unsupported FITS format: {m}"),
            FitsError::TruncatedData { expected, actual } => {
                write!(f, "truncated FITS data: expected {expected} bytes, got {actual}")
            }
            FitsError::MissingPixelScale => {
                write!(f, "no pixel scale card in header and no caller override")
            }
        }
    }
}

impl std::error::Error for FitsError {}

/// Output of [`write_fits`]; `clipped` counts pixels that fell outside the
/// signed 16-bit range and were clamped.
#[derive(Debug, Clone)]
pub struct FitsWrite {
    pub bytes: Vec<u8>,
    pub clipped: usize,
}

struct Card {
    keyword: String,
    value: String,
}

fn parse_cards(bytes: &[u8]) -> Result<(Vec<Card>, usize), FitsError> {
    let mut cards = Vec::new();
    let mut block_start = 0;
    loop {
        if block_start + BLOCK > bytes.len() {
            return Err(FitsError::MalformedHeader(
                "header ended without END card".into(),
            ));
        }
        let block = &bytes[block_start..block_start + BLOCK];
        for c in 0..BLOCK / CARD {
            let raw = &block[c * CARD..(c + 1) * CARD];
            if !raw.iter().all(|b| (0x20..=0x7e).contains(b)) {
                return Err(FitsError::MalformedHeader(
                    "non-ASCII byte in header card".into(),
                ));
            }
            let text = std::str::from_utf8(raw).expect("checked ASCII");
            let keyword = text[..8].trim_end().to_string();
            if keyword == "END" {
                return Ok((cards, block_start + BLOCK));
            }
            if keyword.is_empty() {
                continue;
            }
            if &text[8..10] == "= " {
                let value_part = &text[10..];
                let value = match value_part.find('/') {
                    Some(pos) => value_part[..pos].trim(),
                    None => value_part.trim(),
                };
                cards.push(Card {
                    keyword,
                    value: value.to_string(),
                });
            }
            // keyword-only cards (COMMENT, HISTORY) carry no value; skip
        }
        block_start += BLOCK;
    }
}

fn find<'a>(cards: &'a [Card], key: &str) -> Option<&'a str> {
    cards
        .iter()
        .find(|c| c.keyword == key)
        .map(|c| c.value.as_str())
}

fn require_i64(cards: &[Card], key: &str) -> Result<i64, FitsError> {
    let v = find(cards, key)
        .ok_or_else(|| FitsError::MalformedHeader(format!("missing {key} card")))?;
    v.parse::<i64>()
        .map_err(|_| FitsError::MalformedHeader(format!("{key} value '{v}' is not an integer")))
}

fn optional_f64(cards: &[Card], key: &str) -> Result<Option<f64>, FitsError> {
    match find(cards, key) {
        None => Ok(None),
        Some(v) => v
            .parse::<f64>()
            .map(Some)
            .map_err(|_| FitsError::MalformedHeader(format!("{key} value '{v}' is not a number"))),
    }
}

/// Parses a FITS byte stream into an [`Image`]. The pixel scale comes from
/// the header (`PIXSCALE` arcsec, or `CDELT2`/`CDELT1` degrees) when present,
/// from `fallback_pixel_scale` otherwise.
pub fn read_fits(bytes: &[u8], fallback_pixel_scale: Option<f64>) -> Result<Image, FitsError> {
    let (cards, data_start) = parse_cards(bytes)?;

    match find(&cards, "SIMPLE") {
        Some("T") => {}
        Some(v) => {
            return Err(FitsError::MalformedHeader(format!(
                "SIMPLE is '{v}', expected T"
            )))
        }
        None => return Err(FitsError::MalformedHeader("missing SIMPLE card".into())),
    }

    let bitpix = require_i64(&cards, "BITPIX")?;
    if bitpix != 16 {
        return Err(FitsError::UnsupportedFormat(format!(
            "BITPIX {bitpix}, only 16 supported"
        )));
    }
    let naxis = require_i64(&cards, "NAXIS")?;
    if naxis != 2 {
        return Err(FitsError::UnsupportedFormat(format!(
            "NAXIS {naxis}, only 2 supported"
        )));
    }
    let width = require_i64(&cards, "NAXIS1")?;
    let height = require_i64(&cards, "NAXIS2")?;
    if width < 1 || height < 1 {
        return Err(FitsError::MalformedHeader(format!(
            "non-positive axis length {width}x{height}"
        )));
    }
    let (width, height) = (width as usize, height as usize);

    let bscale = optional_f64(&cards, "BSCALE")?.unwrap_or(1.0);
    let bzero = optional_f64(&cards, "BZERO")?.unwrap_or(0.0);

    let pixel_scale = if let Some(p) = optional_f64(&cards, "PIXSCALE")? {
        p
    } else if let Some(c) = optional_f64(&cards, "CDELT2")? {
        c.abs() * 3600.0
    } else if let Some(c) = optional_f64(&cards, "CDELT1")? {
        c.abs() * 3600.0
    } else if let Some(p) = fallback_pixel_scale {
        p
    } else {
        return Err(FitsError::MissingPixelScale);
    };
    if !(pixel_scale > 0.0) || !pixel_scale.is_finite() {
        return Err(FitsError::MalformedHeader(format!(
            "pixel scale {pixel_scale} is not positive"
        )));
    }

    let ra0 = optional_f64(&cards, "CRVAL1")?.unwrap_or(0.0);
    let dec0 = optional_f64(&cards, "CRVAL2")?.unwrap_or(0.0);

    let need = width * height * 2;
    if bytes.len() < data_start + need {
        return Err(FitsError::TruncatedData {
            expected: need,
            actual: bytes.len().saturating_sub(data_start),
        });
    }

    let mut data = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let off = data_start + 2 * i;
        let raw = i16::from_be_bytes([bytes[off], bytes[off + 1]]);
        data.push(bzero + bscale * raw as f64);
    }

    Image::new(width, height, data, pixel_scale, (ra0, dec0))
        .map_err(|e| FitsError::MalformedHeader(e.to_string()))
}

fn push_card(out: &mut Vec<u8>, keyword: &str, value: &str) {
    let card = format!("{keyword:<8}= {value:>20}");
    let mut b = card.into_bytes();
    b.resize(CARD, b' ');
    out.extend_from_slice(&b);
}

fn pad_to_block(out: &mut Vec<u8>, fill: u8) {
    while out.len() % BLOCK != 0 {
        out.push(fill);
    }
}

/// Serializes an image with BSCALE=1, BZERO=0: raw values are intensities
/// rounded to the nearest integer and clamped to the signed 16-bit range.
/// Integer-valued in-range images therefore round-trip exactly.
pub fn write_fits(img: &Image) -> FitsWrite {
    let mut bytes = Vec::with_capacity(BLOCK + img.data.len() * 2 + BLOCK);
    push_card(&mut bytes, "SIMPLE", "T");
    push_card(&mut bytes, "BITPIX", "16");
    push_card(&mut bytes, "NAXIS", "2");
    push_card(&mut bytes, "NAXIS1", &img.width.to_string());
    push_card(&mut bytes, "NAXIS2", &img.height.to_string());
    push_card(&mut bytes, "BSCALE", "1");
    push_card(&mut bytes, "BZERO", "0");
    // f64 Display is the shortest round-tripping form, so read-back is exact
    push_card(&mut bytes, "PIXSCALE", &img.pixel_scale_arcsec.to_string());
    push_card(&mut bytes, "CRVAL1", &img.origin_sky.0.to_string());
    push_card(&mut bytes, "CRVAL2", &img.origin_sky.1.to_string());
    let mut end = b"END".to_vec();
    end.resize(CARD, b' ');
    bytes.extend_from_slice(&end);
    pad_to_block(&mut bytes, b' ');

    let mut clipped = 0usize;
    for &v in &img.data {
        let r = v.round();
        let raw = if r < i16::MIN as f64 {
            clipped += 1;
            i16::MIN
        } else if r > i16::MAX as f64 {
            clipped += 1;
            i16::MAX
        } else {
            r as i16
        };
        bytes.extend_from_slice(&raw.to_be_bytes());
    }
    pad_to_block(&mut bytes, 0);

    FitsWrite { bytes, clipped }
}
