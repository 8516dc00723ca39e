//! Run configuration: a flat key=value file with section-prefixed keys,
//! overridable by command-line flags. One file captures every knob of a
//! run, so a config plus the code pins the outputs bit for bit.

use starclust_core::catalogue::Survey;
use starclust_core::gmm::EmConfig;
use starclust_core::synth::FieldSpec;
use starclust_core::vae::{MogPrior, Prior, TrainConfig};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    BadLine { line: usize, text: String },
    BadValue { key: String, value: String, expected: &'static str },
    UnknownKey(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(path, e) => write!(f, "cannot read config {}: {e}", path.display()),
            ConfigError::BadLine { line, text } => {
                write!(f, "config line {line} is not key=value: '{text}'")
            }
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "config key {key}: '{value}' is not {expected}")
            }
            ConfigError::UnknownKey(k) => write!(f, "unknown config key '{k}'"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Per-scale training settings; `epochs`, `batch_size` and `learning_rate`
/// accept `train.<key>.<patch_size>` overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub survey: Survey,
    pub out_dir: PathBuf,
    pub parallel: bool,

    pub input_image: Option<PathBuf>,
    pub input_catalogue: Option<PathBuf>,
    pub pixel_scale_override: Option<f64>,

    pub patch_sizes: Vec<usize>,
    pub clip_percentile: f64,

    pub train: TrainConfig,
    pub train_overrides: BTreeMap<(String, usize), f64>,

    pub gmm: EmConfig,

    pub reference: Option<ReferenceCircle>,

    pub synth: FieldSpec,
}

/// Reference circle for IoU scoring, in pixel coordinates of the input
/// image. The radius may come in as arcseconds and is converted once the
/// pixel scale is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCircle {
    pub center_x_px: f64,
    pub center_y_px: f64,
    pub radius_px: Option<f64>,
    pub radius_arcsec: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            survey: Survey::Ukidss,
            out_dir: PathBuf::from("out"),
            parallel: false,
            input_image: None,
            input_catalogue: None,
            pixel_scale_override: None,
            patch_sizes: vec![8, 16, 32, 64],
            clip_percentile: 99.5,
            train: TrainConfig::default(),
            train_overrides: BTreeMap::new(),
            gmm: EmConfig::default(),
            reference: None,
            synth: FieldSpec::default(),
        }
    }
}

impl RunConfig {
    /// Training config for one scale with per-scale overrides applied and
    /// the per-scale seed (master seed + scale index) installed.
    pub fn train_for_scale(&self, scale_index: usize, patch_size: usize) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = self.seed.wrapping_add(scale_index as u64);
        if let Some(&v) = self.train_overrides.get(&("epochs".to_string(), patch_size)) {
            cfg.epochs = v as usize;
        }
        if let Some(&v) = self
            .train_overrides
            .get(&("batch_size".to_string(), patch_size))
        {
            cfg.batch_size = v as usize;
        }
        if let Some(&v) = self
            .train_overrides
            .get(&("learning_rate".to_string(), patch_size))
        {
            cfg.learning_rate = v;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch_sizes.is_empty() {
            return Err(ConfigError::Invalid("patch.sizes is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.patch_sizes {
            if s < 2 {
                return Err(ConfigError::Invalid(format!("patch size {s} is too small")));
            }
            if !seen.insert(s) {
                return Err(ConfigError::Invalid(format!("patch size {s} repeats")));
            }
        }
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return Err(ConfigError::Invalid(format!(
                "normalize.clip_percentile {} outside (0, 100]",
                self.clip_percentile
            )));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.trim().parse::<T>().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

/// Applies one key=value pair to the config.
pub fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let v = value.trim();
    match key {
        "seed" => cfg.seed = parse_num(key, v, "an unsigned integer")?,
        "survey" => {
            cfg.survey = Survey::parse(v).ok_or_else(|| ConfigError::BadValue {
                key: key.into(),
                value: v.into(),
                expected: "ukidss or 2mass",
            })?;
            cfg.synth.survey = cfg.survey;
        }
        "out" => cfg.out_dir = PathBuf::from(v),
        "parallel" => cfg.parallel = parse_num(key, v, "true or false")?,
        "input.image" => cfg.input_image = Some(PathBuf::from(v)),
        "input.catalogue" => cfg.input_catalogue = Some(PathBuf::from(v)),
        "input.pixel_scale_arcsec" => {
            cfg.pixel_scale_override = Some(parse_num(key, v, "a positive number")?)
        }
        "patch.sizes" => {
            let mut sizes = Vec::new();
            for tok in v.split(',') {
                sizes.push(parse_num(key, tok, "a comma-separated list of integers")?);
            }
            cfg.patch_sizes = sizes;
        }
        "normalize.clip_percentile" => cfg.clip_percentile = parse_num(key, v, "a number")?,
        "train.epochs" => cfg.train.epochs = parse_num(key, v, "an integer")?,
        "train.batch_size" => cfg.train.batch_size = parse_num(key, v, "an integer")?,
        "train.learning_rate" => cfg.train.learning_rate = parse_num(key, v, "a number")?,
        "train.mc_samples" => cfg.train.mc_samples = parse_num(key, v, "an integer")?,
        "train.latent_dim" => cfg.train.latent_dim = parse_num(key, v, "an integer")?,
        "train.prior" => {
            cfg.train.prior = match v {
                "standard" => Prior::StandardNormal,
                "mog" => Prior::MixtureOfGaussians(MogPrior::default_two_component()),
                _ => {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                        expected: "standard or mog",
                    })
                }
            }
        }
        "gmm.max_iter" => cfg.gmm.max_iter = parse_num(key, v, "an integer")?,
        "gmm.tol" => cfg.gmm.tol = parse_num(key, v, "a number")?,
        "gmm.w_floor" => cfg.gmm.w_floor = parse_num(key, v, "a number")?,
        "gmm.delta_sep" => cfg.gmm.delta_sep = parse_num(key, v, "a number")?,
        "gmm.mahalanobis_floor" => cfg.gmm.mahalanobis_floor = parse_num(key, v, "a number")?,
        "gmm.reinit_cap" => cfg.gmm.reinit_cap = parse_num(key, v, "an integer")?,
        "reference.center_x_px" => {
            reference_mut(cfg).center_x_px = parse_num(key, v, "a number")?
        }
        "reference.center_y_px" => {
            reference_mut(cfg).center_y_px = parse_num(key, v, "a number")?
        }
        "reference.radius_px" => {
            reference_mut(cfg).radius_px = Some(parse_num(key, v, "a number")?)
        }
        "reference.radius_arcsec" => {
            reference_mut(cfg).radius_arcsec = Some(parse_num(key, v, "a number")?)
        }
        "synth.width" => cfg.synth.width = parse_num(key, v, "an integer")?,
        "synth.height" => cfg.synth.height = parse_num(key, v, "an integer")?,
        "synth.n_cluster" => cfg.synth.n_cluster = parse_num(key, v, "an integer")?,
        "synth.n_background" => cfg.synth.n_background = parse_num(key, v, "an integer")?,
        "synth.center_x_px" => cfg.synth.cluster_center_px.0 = parse_num(key, v, "a number")?,
        "synth.center_y_px" => cfg.synth.cluster_center_px.1 = parse_num(key, v, "a number")?,
        "synth.cluster_sigma_px" => cfg.synth.cluster_sigma_px = parse_num(key, v, "a number")?,
        "synth.psf_sigma_px" => cfg.synth.psf_sigma_px = parse_num(key, v, "a number")?,
        "synth.mag_bright" => cfg.synth.mag_range.0 = parse_num(key, v, "a number")?,
        "synth.mag_faint" => cfg.synth.mag_range.1 = parse_num(key, v, "a number")?,
        "synth.noise_sigma" => cfg.synth.noise_sigma = parse_num(key, v, "a number")?,
        "synth.pixel_scale_arcsec" => {
            cfg.synth.pixel_scale_arcsec = parse_num(key, v, "a number")?
        }
        "synth.flux_scale" => cfg.synth.flux_scale = parse_num(key, v, "a number")?,
        _ => {
            // per-scale train overrides: train.<field>.<patch_size>
            if let Some(rest) = key.strip_prefix("train.") {
                if let Some((field, size)) = rest.rsplit_once('.') {
                    if matches!(field, "epochs" | "batch_size" | "learning_rate") {
                        let size: usize = parse_num(key, size, "a patch size suffix")?;
                        let val: f64 = parse_num(key, v, "a number")?;
                        cfg.train_overrides.insert((field.to_string(), size), val);
                        return Ok(());
                    }
                }
            }
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
    }
    Ok(())
}

pub fn parse_config_text(text: &str, cfg: &mut RunConfig) -> Result<(), ConfigError> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::BadLine {
            line: i + 1,
            text: line.to_string(),
        })?;
        apply_key(cfg, key.trim(), value)?;
    }
    Ok(())
}

pub fn load_config_file(path: &Path, cfg: &mut RunConfig) -> Result<(), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
    parse_config_text(&text, cfg)
}

fn reference_mut(cfg: &mut RunConfig) -> &mut ReferenceCircle {
    cfg.reference.get_or_insert(ReferenceCircle {
        center_x_px: 0.0,
        center_y_px: 0.0,
        radius_px: None,
        radius_arcsec: None,
    })
}
