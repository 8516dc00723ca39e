//! The three subcommands: synthesize a field, run the detection pipeline,
//! compare reports.

use crate::config::RunConfig;
use starclust_core::catalogue::{parse_catalogue, write_catalogue, Catalogue};
use starclust_core::detect::{
    build_heatmap, cluster_center, cluster_radius, count_members, disk_region, ensemble,
    heatmap_to_csv, heatmap_to_pgm, iou, largest_region, select_cluster_component,
    threshold_map, DetectError, DetectionReport, Heatmap, ScaleStat,
};
use starclust_core::fits::{read_fits, write_fits};
use starclust_core::gmm::{gmm_fit, gmm_predict, model_to_text};
use starclust_core::image::Image;
use starclust_core::patch::{extract_patches, normalize};
use starclust_core::synth::generate_field;
use starclust_core::vae::{latent_stats, save_checkpoint, train};
use std::fmt;
use std::path::{Path, PathBuf};

/// Keeps the GMM's random stream distinct from the VAE's, which consumes
/// the same per-scale seed.
const GMM_SEED_SALT: u64 = 0x6D6D_672D_7365_6564;

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    BadConfig(String),
    /// Exit code 4.
    UnreadableInput(String),
    /// Exit code 4.
    Io(PathBuf, std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::BadConfig(m) => write!(f, "{m}"),
            CliError::UnreadableInput(m) => write!(f, "{m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadConfig(_) => 2,
            CliError::UnreadableInput(_) | CliError::Io(_, _) => 4,
        }
    }
}

/// Detection either measured a region or ended with an empty mask
/// (exit code 3, diagnostic report written).
#[derive(Debug, Clone, PartialEq)]
pub enum DetectOutcome {
    Complete(DetectionReport),
    Degenerate,
}

/// Writes via a temp file in the same directory plus rename, so readers
/// never observe a truncated file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    tmp_name.push(".tmp~");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::Io(tmp.clone(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Generates and writes `field.fits`, `catalogue.csv` and `truth.txt`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    spec.survey = cfg.survey;
    let (img, cat, truth) =
        generate_field(&spec).map_err(|e| CliError::BadConfig(e.to_string()))?;

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Io(cfg.out_dir.clone(), e))?;
    let fits = write_fits(&img);
    if fits.clipped > 0 {
        eprintln!(
            "warning: {} pixel(s) clipped to the signed 16-bit range",
            fits.clipped
        );
    }
    atomic_write(&cfg.out_dir.join("field.fits"), &fits.bytes)?;
    atomic_write(
        &cfg.out_dir.join("catalogue.csv"),
        write_catalogue(&cat).as_bytes(),
    )?;
    atomic_write(
        &cfg.out_dir.join("truth.txt"),
        truth.to_sidecar().as_bytes(),
    )?;
    Ok(())
}

struct ScaleResult {
    patch_size: usize,
    heatmap: Heatmap,
    positive_patches: usize,
    total_patches: usize,
    degenerate: bool,
    checkpoint: Vec<u8>,
    gmm_text: Option<String>,
    /// Diagnostic: first two latent mean coordinates and the hard label
    /// per patch, for scatter plots of the embedding space.
    latents_csv: String,
}

/// Trains one scale end to end: patches -> VAE -> latents -> GMM -> labels
/// -> positive-patch heatmap. Degenerate scales (too few patches for the
/// mixture, or an empty GMM class) contribute an all-zero heatmap.
fn run_scale(
    normalized: &Image,
    cfg: &RunConfig,
    scale_index: usize,
    patch_size: usize,
) -> Result<ScaleResult, CliError> {
    let stride = (patch_size / 2).max(1);
    let dataset = extract_patches(normalized, patch_size, stride)
        .map_err(|e| CliError::BadConfig(e.to_string()))?;
    let total_patches = dataset.patches.len();

    let train_cfg = cfg.train_for_scale(scale_index, patch_size);
    let (params, _trace) =
        train(&dataset, &train_cfg).map_err(|e| CliError::BadConfig(e.to_string()))?;
    let checkpoint =
        save_checkpoint(&params, patch_size).map_err(|e| CliError::BadConfig(e.to_string()))?;
    let stats = latent_stats(&params, &dataset)
        .map_err(|e| CliError::BadConfig(e.to_string()))?;

    // GMM input: concatenated (mu, log sigma^2) per patch
    let points: Vec<Vec<f64>> = stats
        .mu
        .iter()
        .zip(&stats.log_var)
        .map(|(m, lv)| {
            let mut v = Vec::with_capacity(m.len() + lv.len());
            v.extend_from_slice(m);
            v.extend_from_slice(lv);
            v
        })
        .collect();

    let dims = (normalized.width, normalized.height);
    let latents_header = "x0,y0,mu0,mu1,label\n";
    let gmm_seed = train_cfg.seed ^ GMM_SEED_SALT;
    let (model, _report) = match gmm_fit(&points, gmm_seed, &cfg.gmm) {
        Ok(fit) => fit,
        Err(e) => {
            eprintln!("scale {patch_size}: GMM degenerate ({e}); scale contributes nothing");
            return Ok(ScaleResult {
                patch_size,
                heatmap: Heatmap::zeros(dims.0, dims.1),
                positive_patches: 0,
                total_patches,
                degenerate: true,
                checkpoint,
                gmm_text: None,
                latents_csv: latents_header.to_string(),
            });
        }
    };
    let gmm_text = model_to_text(&model);
    let labels = gmm_predict(&model, &points);

    // first two latent mean coordinates per patch; the embedding diagnostic
    let mut latents_csv = String::from(latents_header);
    for ((&(x0, y0), mu), &label) in dataset.geometry.iter().zip(&stats.mu).zip(&labels) {
        let mu0 = mu.first().copied().unwrap_or(0.0);
        let mu1 = mu.get(1).copied().unwrap_or(0.0);
        latents_csv.push_str(&format!("{x0},{y0},{mu0},{mu1},{label}\n"));
    }

    let choice = match select_cluster_component(&labels, &dataset) {
        Ok(c) => c,
        Err(DetectError::EmptyClass { class }) => {
            eprintln!(
                "scale {patch_size}: GMM class {class} is empty; scale contributes nothing"
            );
            return Ok(ScaleResult {
                patch_size,
                heatmap: Heatmap::zeros(dims.0, dims.1),
                positive_patches: 0,
                total_patches,
                degenerate: true,
                checkpoint,
                gmm_text: Some(gmm_text),
                latents_csv,
            });
        }
        Err(e) => return Err(CliError::BadConfig(e.to_string())),
    };

    let positives: Vec<(usize, usize)> = dataset
        .geometry
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l as usize == choice.class_id)
        .map(|(&g, _)| g)
        .collect();
    let heatmap = build_heatmap(&positives, patch_size, dims);

    Ok(ScaleResult {
        patch_size,
        heatmap,
        positive_patches: positives.len(),
        total_patches,
        degenerate: false,
        checkpoint,
        gmm_text: Some(gmm_text),
        latents_csv,
    })
}

fn read_inputs(cfg: &RunConfig) -> Result<(Image, Catalogue), CliError> {
    let image_path = cfg
        .input_image
        .as_ref()
        .ok_or_else(|| CliError::BadConfig("input.image is not set".into()))?;
    let bytes = std::fs::read(image_path)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", image_path.display())))?;
    let img = read_fits(&bytes, cfg.pixel_scale_override).map_err(|e| {
        CliError::UnreadableInput(format!("{}: {e}", image_path.display()))
    })?;

    let cat_path = cfg
        .input_catalogue
        .as_ref()
        .ok_or_else(|| CliError::BadConfig("input.catalogue is not set".into()))?;
    let text = std::fs::read_to_string(cat_path)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", cat_path.display())))?;
    let parsed = parse_catalogue(&text, cfg.survey)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", cat_path.display())))?;
    for row in &parsed.skipped {
        eprintln!(
            "warning: {} line {}: {} (row skipped)",
            cat_path.display(),
            row.line,
            row.reason
        );
    }
    Ok((img, parsed.catalogue))
}

/// Runs the full pipeline and writes checkpoints, GMM models, the ensemble
/// heatmap (PGM + CSV) and the report (JSON + text).
pub fn cmd_detect(cfg: &RunConfig) -> Result<DetectOutcome, CliError> {
    cfg.validate().map_err(|e| CliError::BadConfig(e.to_string()))?;
    let (img, cat) = read_inputs(cfg)?;

    let min_dim = img.width.min(img.height);
    for &size in &cfg.patch_sizes {
        if size > min_dim {
            return Err(CliError::BadConfig(format!(
                "patch size {size} exceeds the smaller image dimension {min_dim}"
            )));
        }
    }

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Io(cfg.out_dir.clone(), e))?;
    let normalized = normalize(&img, cfg.clip_percentile);

    // per-scale results, in declared scale order regardless of execution mode
    let results: Vec<ScaleResult> = if cfg.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .patch_sizes
                .iter()
                .enumerate()
                .map(|(i, &size)| {
                    let normalized = &normalized;
                    scope.spawn(move || run_scale(normalized, cfg, i, size))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scale thread panicked"))
                .collect::<Result<Vec<_>, CliError>>()
        })?
    } else {
        let mut out = Vec::with_capacity(cfg.patch_sizes.len());
        for (i, &size) in cfg.patch_sizes.iter().enumerate() {
            out.push(run_scale(&normalized, cfg, i, size)?);
        }
        out
    };

    for r in &results {
        atomic_write(
            &cfg.out_dir.join(format!("vae_s{}.ckpt", r.patch_size)),
            &r.checkpoint,
        )?;
        if let Some(text) = &r.gmm_text {
            atomic_write(
                &cfg.out_dir.join(format!("gmm_s{}.txt", r.patch_size)),
                text.as_bytes(),
            )?;
        }
        atomic_write(
            &cfg.out_dir.join(format!("latents_s{}.csv", r.patch_size)),
            r.latents_csv.as_bytes(),
        )?;
    }

    let maps: Vec<Heatmap> = results.iter().map(|r| r.heatmap.clone()).collect();
    let combined = ensemble(&maps).map_err(|e| CliError::BadConfig(e.to_string()))?;
    atomic_write(&cfg.out_dir.join("heatmap.pgm"), &heatmap_to_pgm(&combined))?;
    atomic_write(
        &cfg.out_dir.join("heatmap.csv"),
        heatmap_to_csv(&combined).as_bytes(),
    )?;

    let scales: Vec<ScaleStat> = results
        .iter()
        .map(|r| ScaleStat {
            patch_size: r.patch_size,
            positive_patches: r.positive_patches,
            total_patches: r.total_patches,
            degenerate: r.degenerate,
        })
        .collect();

    let mask = threshold_map(&combined);
    let region = match largest_region(&mask, combined.width, combined.height) {
        Ok(region) => region,
        Err(DetectError::EmptyMask) => {
            write_degenerate_report(cfg, &scales)?;
            return Ok(DetectOutcome::Degenerate);
        }
        Err(e) => return Err(CliError::BadConfig(e.to_string())),
    };

    let center_px =
        cluster_center(&region, &normalized).map_err(|e| CliError::BadConfig(e.to_string()))?;
    let center_sky = img.pixel_to_sky(center_px.0, center_px.1);
    let radius_arcsec = cluster_radius(&region, img.pixel_scale_arcsec)
        .map_err(|e| CliError::BadConfig(e.to_string()))?;
    let members = count_members(&region, &cat, &img);

    let iou_value = match &cfg.reference {
        Some(r) => {
            let radius_px = match (r.radius_px, r.radius_arcsec) {
                (Some(px), _) => px,
                (None, Some(arcsec)) => arcsec / img.pixel_scale_arcsec,
                (None, None) => {
                    return Err(CliError::BadConfig(
                        "reference circle needs radius_px or radius_arcsec".into(),
                    ))
                }
            };
            let disk = disk_region(
                (r.center_x_px, r.center_y_px),
                radius_px,
                (img.width, img.height),
            )
            .map_err(|e| CliError::BadConfig(format!("reference circle: {e}")))?;
            match iou(&region, &disk, &cat, &img) {
                Ok(v) => Some(v),
                Err(DetectError::EmptyUnion) => {
                    eprintln!("warning: no catalogue source in detection/reference union; IoU undefined");
                    None
                }
                Err(e) => return Err(CliError::BadConfig(e.to_string())),
            }
        }
        None => None,
    };

    let report = DetectionReport {
        center_px,
        center_sky,
        radius_arcsec,
        members,
        iou: iou_value,
        scales,
    };
    atomic_write(&cfg.out_dir.join("report.json"), report.to_json().as_bytes())?;
    atomic_write(&cfg.out_dir.join("report.txt"), report.to_text().as_bytes())?;
    Ok(DetectOutcome::Complete(report))
}

fn write_degenerate_report(cfg: &RunConfig, scales: &[ScaleStat]) -> Result<(), CliError> {
    let scale_json: Vec<String> = scales
        .iter()
        .map(|s| {
            format!(
                "{{\"patch_size\":{},\"positive_patches\":{},\"total_patches\":{},\"degenerate\":{}}}",
                s.patch_size, s.positive_patches, s.total_patches, s.degenerate
            )
        })
        .collect();
    let json = format!(
        "{{\n  \"degenerate\": true,\n  \"scales\": [{}]\n}}\n",
        scale_json.join(", ")
    );
    atomic_write(&cfg.out_dir.join("report.json"), json.as_bytes())?;
    let mut text = String::from("degenerate=true\n");
    for s in scales {
        text.push_str(&format!(
            "scale.{}.positive_patches={}\nscale.{}.total_patches={}\nscale.{}.degenerate={}\n",
            s.patch_size, s.positive_patches, s.patch_size, s.total_patches, s.patch_size, s.degenerate
        ));
    }
    atomic_write(&cfg.out_dir.join("report.txt"), text.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval: compare a report against a reference
// ---------------------------------------------------------------------------

struct EvalRow {
    name: String,
    radius_our: f64,
    radius_ref: f64,
    members_our: i64,
    members_ref: i64,
    iou_our: Option<f64>,
    iou_ref: Option<f64>,
}

fn rows_of(value: &serde_json::Value) -> Vec<&serde_json::Value> {
    match value {
        serde_json::Value::Array(items) => items.iter().collect(),
        other => vec![other],
    }
}

fn field_f64(v: &serde_json::Value, key: &str) -> Option<f64> {
    v.get(key).and_then(|x| x.as_f64())
}

fn load_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::BadConfig(format!("{} is not valid JSON: {e}", path.display())))
}

/// Renders the comparison table (our vs reference radius, members, IoU) for
/// one or many fields. Reports and references use the same JSON schema; a
/// reference without `iou` simply drops that column.
pub fn cmd_eval(report_path: &Path, reference_path: &Path) -> Result<String, CliError> {
    let report = load_json(report_path)?;
    let reference = load_json(reference_path)?;
    let ours = rows_of(&report);
    let refs = rows_of(&reference);
    if ours.len() != refs.len() {
        return Err(CliError::BadConfig(format!(
            "report has {} entries, reference has {}",
            ours.len(),
            refs.len()
        )));
    }

    let mut rows = Vec::with_capacity(ours.len());
    for (i, (our, reference)) in ours.iter().zip(&refs).enumerate() {
        let name = our
            .get("name")
            .and_then(|v| v.as_str())
            .map(|s| s.to_string())
            .unwrap_or_else(|| i.to_string());
        let pick = |v: &serde_json::Value, key: &str, side: &str| -> Result<f64, CliError> {
            field_f64(v, key).ok_or_else(|| {
                CliError::BadConfig(format!("{side} entry {i} lacks numeric '{key}'"))
            })
        };
        rows.push(EvalRow {
            name,
            radius_our: pick(our, "radius_arcsec", "report")?,
            radius_ref: pick(reference, "radius_arcsec", "reference")?,
            members_our: pick(our, "members", "report")? as i64,
            members_ref: pick(reference, "members", "reference")? as i64,
            iou_our: field_f64(our, "iou"),
            iou_ref: field_f64(reference, "iou"),
        });
    }

    let any_ref_iou = rows.iter().any(|r| r.iou_ref.is_some());
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>12} {:>12} {:>10} {:>12} {:>12} {:>10} {:>8}",
        "field", "radius_our", "radius_ref", "radius_d", "members_our", "members_ref", "members_d", "iou"
    ));
    if any_ref_iou {
        out.push_str(&format!(" {:>8}", "iou_ref"));
    }
    out.push('\n');
    for r in &rows {
        let iou_our = r
            .iou_our
            .map(|v| format!("{:.4}", v))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<12} {:>12} {:>12} {:>10.2} {:>12} {:>12} {:>10} {:>8}",
            r.name,
            r.radius_our,
            r.radius_ref,
            r.radius_our - r.radius_ref,
            r.members_our,
            r.members_ref,
            r.members_our - r.members_ref,
            iou_our
        ));
        if any_ref_iou {
            let iou_ref = r
                .iou_ref
                .map(|v| format!("{:.4}", v))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(" {:>8}", iou_ref));
        }
        out.push('\n');
    }
    Ok(out)
}
