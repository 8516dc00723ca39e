//! From per-patch labels to a measured cluster detection.
//!
//! Positive patches vote into per-scale heatmaps; the four scale maps are
//! max-normalized and summed; the ensemble is cut at 0.7 x its maximum; the
//! largest 8-connected region is the detection. From that region come the
//! intensity-weighted center, the equivalent-circle radius, the member count
//! against the catalogue, and a source-count intersection-over-union against
//! a reference region.

use crate::catalogue::Catalogue;
use crate::image::Image;
use crate::patch::PatchDataset;
use std::fmt;

/// Fraction of the maximum ensemble vote kept by [`threshold_map`].
pub const THRESHOLD_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major vote grid, non-negative.
    pub votes: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Heatmap {
            width,
            height,
            votes: vec![0.0; width * height],
        }
    }

    pub fn max(&self) -> f64 {
        self.votes.iter().cloned().fold(0.0, f64::max)
    }
}

/// A non-empty 8-connected pixel set with its bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Sorted row-major: by (y, x).
    pixels: Vec<(usize, usize)>,
    /// (x0, y0, x1, y1), inclusive.
    pub bbox: (usize, usize, usize, usize),
}

impl Region {
    /// Builds a region from arbitrary (x, y) pixels; caller guarantees
    /// connectivity. Duplicates are removed.
    pub fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Result<Region, DetectError> {
        if pixels.is_empty() {
            return Err(DetectError::EmptyRegion);
        }
        pixels.sort_by_key(|&(x, y)| (y, x));
        pixels.dedup();
        let mut bbox = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &pixels {
            bbox.0 = bbox.0.min(x);
            bbox.1 = bbox.1.min(y);
            bbox.2 = bbox.2.max(x);
            bbox.3 = bbox.3.max(y);
        }
        Ok(Region { pixels, bbox })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.pixels
            .binary_search_by_key(&(y, x), |&(px, py)| (py, px))
            .is_ok()
    }

    fn contains_signed(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && self.contains(x as usize, y as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectError {
    EmptyClass { class: usize },
    DimMismatch(String),
    EmptyMask,
    EmptyRegion,
    EmptyUnion,
}

impl fmt::Display for DetectError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectError::EmptyClass { class } => {
                write!(f, "GMM class {class} holds no patches; run is degenerate")
            }
            DetectError::DimMismatch(m) => write!(f, "heatmap dimension mismatch: {m}"),
            DetectError::EmptyMask => write!(f, "thresholded mask is empty"),
            DetectError::EmptyRegion => write!(f, "region is empty"),
            DetectError::EmptyUnion => write!(f, "no catalogue source falls in the union"),
        }
    }
}

impl std::error::Error for DetectError {}

/// Which GMM component is the cluster, with the evidence for the call.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterChoice {
    pub class_id: usize,
    /// Difference of mean patch intensities, cluster minus background.
    pub margin: f64,
    pub tie: bool,
}

/// Declares the class whose patches have the higher mean normalized pixel
/// intensity to be the cluster. Exact ties go to class 0.
pub fn select_cluster_component(
    labels: &[u8],
    dataset: &PatchDataset,
) -> Result<ClusterChoice, DetectError> {
    assert_eq!(labels.len(), dataset.patches.len(), "label/patch count");
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (patch, &label) in dataset.patches.iter().zip(labels) {
        let mean: f64 = patch.iter().sum::<f64>() / patch.len() as f64;
        sums[label as usize] += mean;
        counts[label as usize] += 1;
    }
    for class in 0..2 {
        if counts[class] == 0 {
            return Err(DetectError::EmptyClass { class });
        }
    }
    let means = [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64];
    let (class_id, tie) = if means[0] == means[1] {
        (0, true)
    } else if means[0] > means[1] {
        (0, false)
    } else {
        (1, false)
    };
    Ok(ClusterChoice {
        class_id,
        margin: means[class_id] - means[1 - class_id],
        tie,
    })
}

/// Each positive patch adds one vote to every pixel it covers.
pub fn build_heatmap(
    positive_geometry: &[(usize, usize)],
    patch_size: usize,
    dims: (usize, usize),
) -> Heatmap {
    let (width, height) = dims;
    let mut map = Heatmap::zeros(width, height);
    for &(x0, y0) in positive_geometry {
        debug_assert!(x0 + patch_size <= width && y0 + patch_size <= height);
        for y in y0..y0 + patch_size {
            let row = y * width;
            for x in x0..x0 + patch_size {
                map.votes[row + x] += 1.0;
            }
        }
    }
    map
}

/// Divides each map by its own maximum (all-zero maps stay zero) and sums.
/// The result is bounded by the number of maps.
pub fn ensemble(maps: &[Heatmap]) -> Result<Heatmap, DetectError> {
    let first = maps.first().ok_or_else(|| {
        DetectError::DimMismatch("ensemble of zero heatmaps".into())
    })?;
    let mut out = Heatmap::zeros(first.width, first.height);
    for (i, m) in maps.iter().enumerate() {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(DetectError::DimMismatch(format!(
                "map {i} is {}x{}, expected {}x{}",
                m.width, m.height, first.width, first.height
            )));
        }
        let max = m.max();
        if max == 0.0 {
            continue;
        }
        for (o, v) in out.votes.iter_mut().zip(&m.votes) {
            *o += v / max;
        }
    }
    Ok(out)
}

/// Keeps pixels with vote >= 0.7 x maximum; an all-zero map keeps nothing.
pub fn threshold_map(map: &Heatmap) -> Vec<bool> {
    let max = map.max();
    if max == 0.0 {
        return vec![false; map.votes.len()];
    }
    let threshold = THRESHOLD_FRACTION * max;
    map.votes.iter().map(|&v| v >= threshold).collect()
}

/// Largest 8-connected true component; ties resolved by the smallest
/// bounding-box corner in row-major order.
pub fn largest_region(
    mask: &[bool],
    width: usize,
    height: usize,
) -> Result<Region, DetectError> {
    assert_eq!(mask.len(), width * height, "mask length");
    let mut visited = vec![false; mask.len()];
    let mut best: Option<Region> = None;
    let mut stack = Vec::new();

    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut pixels = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let x = idx % width;
            let y = idx / width;
            pixels.push((x, y));
            let x_lo = x.saturating_sub(1);
            let y_lo = y.saturating_sub(1);
            for ny in y_lo..=(y + 1).min(height - 1) {
                for nx in x_lo..=(x + 1).min(width - 1) {
                    let nidx = ny * width + nx;
                    if mask[nidx] && !visited[nidx] {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        let region = Region::from_pixels(pixels).expect("component is non-empty");
        let better = match &best {
            None => true,
            Some(b) => {
                region.len() > b.len()
                    || (region.len() == b.len()
                        && (region.bbox.1, region.bbox.0) < (b.bbox.1, b.bbox.0))
            }
        };
        if better {
            best = Some(region);
        }
    }
    best.ok_or(DetectError::EmptyMask)
}

/// Intensity-weighted centroid over the region; an all-zero weight sum
/// falls back to the unweighted centroid.
pub fn cluster_center(region: &Region, img: &Image) -> Result<(f64, f64), DetectError> {
    if region.is_empty() {
        return Err(DetectError::EmptyRegion);
    }
    let mut wx = 0.0;
    let mut wy = 0.0;
    let mut wsum = 0.0;
    for &(x, y) in region.pixels() {
        let w = img.get(x, y);
        wx += w * x as f64;
        wy += w * y as f64;
        wsum += w;
    }
    if wsum > 0.0 {
        Ok((wx / wsum, wy / wsum))
    } else {
        let n = region.len() as f64;
        let (sx, sy) = region
            .pixels()
            .iter()
            .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x as f64, ay + y as f64));
        Ok((sx / n, sy / n))
    }
}

/// Radius of the circle with the region's pixel area:
/// pixel_scale * sqrt(N / pi).
pub fn cluster_radius(region: &Region, pixel_scale_arcsec: f64) -> Result<f64, DetectError> {
    if region.is_empty() {
        return Err(DetectError::EmptyRegion);
    }
    Ok(pixel_scale_arcsec * (region.len() as f64 / std::f64::consts::PI).sqrt())
}

fn source_pixel(img: &Image, ra: f64, dec: f64) -> (i64, i64) {
    let (x, y) = img.sky_to_pixel(ra, dec);
    (x.round() as i64, y.round() as i64)
}

/// Number of catalogue sources whose pixel position rounds into the region.
pub fn count_members(region: &Region, cat: &Catalogue, img: &Image) -> usize {
    cat.sources
        .iter()
        .filter(|s| {
            let (x, y) = source_pixel(img, s.ra_deg, s.dec_deg);
            region.contains_signed(x, y)
        })
        .count()
}

/// Source-count IoU: sources in the intersection of the two regions over
/// sources in their union. Undefined (error) when the union holds none.
pub fn iou(
    region_a: &Region,
    region_b: &Region,
    cat: &Catalogue,
    img: &Image,
) -> Result<f64, DetectError> {
    let mut inter = 0usize;
    let mut union = 0usize;
    for s in &cat.sources {
        let (x, y) = source_pixel(img, s.ra_deg, s.dec_deg);
        let in_a = region_a.contains_signed(x, y);
        let in_b = region_b.contains_signed(x, y);
        if in_a && in_b {
            inter += 1;
        }
        if in_a || in_b {
            union += 1;
        }
    }
    if union == 0 {
        return Err(DetectError::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Rasterizes the disk of the given center and radius clipped to the frame;
/// the reference region for IoU scoring.
pub fn disk_region(
    center: (f64, f64),
    radius_px: f64,
    dims: (usize, usize),
) -> Result<Region, DetectError> {
    let (width, height) = dims;
    let (cx, cy) = center;
    let r2 = radius_px * radius_px;
    let x_lo = ((cx - radius_px).floor().max(0.0)) as usize;
    let y_lo = ((cy - radius_px).floor().max(0.0)) as usize;
    let x_hi = ((cx + radius_px).ceil().min((width - 1) as f64)).max(0.0) as usize;
    let y_hi = ((cy + radius_px).ceil().min((height - 1) as f64)).max(0.0) as usize;
    let mut pixels = Vec::new();
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r2 {
                pixels.push((x, y));
            }
        }
    }
    Region::from_pixels(pixels)
}

/// Votes scaled linearly to 0..255 as a binary PGM (P5).
pub fn heatmap_to_pgm(map: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    let max = map.max();
    for &v in &map.votes {
        let byte = if max > 0.0 {
            (255.0 * v / max).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.push(byte);
    }
    out
}

/// Raw vote grid as CSV, one row per image row.
pub fn heatmap_to_csv(map: &Heatmap) -> String {
    let mut out = String::new();
    for y in 0..map.height {
        let row = &map.votes[y * map.width..(y + 1) * map.width];
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Per-scale diagnostics for the report.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStat {
    pub patch_size: usize,
    pub positive_patches: usize,
    pub total_patches: usize,
    /// True when the scale's GMM left one class empty and the scale
    /// contributed nothing.
    pub degenerate: bool,
}

/// Final measurement of one detection run.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub center_px: (f64, f64),
    pub center_sky: (f64, f64),
    pub radius_arcsec: f64,
    pub members: usize,
    pub iou: Option<f64>,
    pub scales: Vec<ScaleStat>,
}

impl DetectionReport {
    /// Fixed-schema JSON document. Field order and float formatting are
    /// deterministic so identical runs serialize byte-identically.
    pub fn to_json(&self) -> String {
        let iou = match self.iou {
            Some(v) => v.to_string(),
            None => "null".to_string(),
        };
        let scales: Vec<String> = self
            .scales
            .iter()
            .map(|s| {
                format!(
                    "{{\"patch_size\":{},\"positive_patches\":{},\"total_patches\":{},\"degenerate\":{}}}",
                    s.patch_size, s.positive_patches, s.total_patches, s.degenerate
                )
            })
            .collect();
        format!(
            "{{\n  \"center_px\": [{}, {}],\n  \"center_sky\": [{}, {}],\n  \"radius_arcsec\": {},\n  \"members\": {},\n  \"iou\": {},\n  \"scales\": [{}]\n}}\n",
            self.center_px.0,
            self.center_px.1,
            self.center_sky.0,
            self.center_sky.1,
            self.radius_arcsec,
            self.members,
            iou,
            scales.join(", ")
        )
    }

    /// key=value rendering for logs and quick reading.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("center_px_x={}\n", self.center_px.0));
        out.push_str(&format!("center_px_y={}\n", self.center_px.1));
        out.push_str(&format!("center_sky_ra={}\n", self.center_sky.0));
        out.push_str(&format!("center_sky_dec={}\n", self.center_sky.1));
        out.push_str(&format!("radius_arcsec={}\n", self.radius_arcsec));
        out.push_str(&format!("members={}\n", self.members));
        match self.iou {
            Some(v) => out.push_str(&format!("iou={v}\n")),
            None => out.push_str("iou=\n"),
        }
        for s in &self.scales {
            out.push_str(&format!(
                "scale.{}.positive_patches={}\nscale.{}.total_patches={}\nscale.{}.degenerate={}\n",
                s.patch_size, s.positive_patches, s.patch_size, s.total_patches, s.patch_size, s.degenerate
            ));
        }
        out
    }
}
