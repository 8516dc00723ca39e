//! Two-component Gaussian mixture over latent embeddings, fit by
//! expectation-maximization with full covariances.
//!
//! Initialization picks two distinct data points as means, the global data
//! covariance (plus a scale-aware floor) for both components, and equal
//! class probabilities. After every M-step the fit reinitializes when a
//! component weight collapses or the means nearly coincide; convergence is
//! a relative change test on the log-likelihood. All densities go through
//! Cholesky factors and log-sum-exp.

use crate::linalg::{cholesky, forward_solve, log_sum_exp, Mat};
use crate::rng::Rng64;
use std::fmt;

/// Relative covariance floor: eps = `COV_FLOOR_REL` x mean per-coordinate
/// data variance, added as eps*I to every covariance estimate.
pub const COV_FLOOR_REL: f64 = 1e-6;
/// Absolute fallback when the data has zero variance everywhere.
pub const COV_FLOOR_ABS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    /// Class probabilities p(c); simplex.
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Mat>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map(|m| m.len()).unwrap_or(0)
    }
}

/// Fit diagnostics; the log-likelihood trace has one entry per EM
/// iteration and `reinit_iterations` marks trace positions where the model
/// was re-drawn (monotonicity holds between, not across, those marks).
#[derive(Debug, Clone, PartialEq)]
pub struct EmReport {
    pub iterations: usize,
    pub log_likelihood_trace: Vec<f64>,
    pub reinit_count: usize,
    pub reinit_iterations: Vec<usize>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Converged when |LL_t - LL_{t-1}| < tol * |LL_t|.
    pub tol: f64,
    /// Reinitialize when min weight drops below this.
    pub w_floor: f64,
    /// Reinitialize when ||mu_0 - mu_1|| < delta_sep * sqrt(mean data variance).
    pub delta_sep: f64,
    /// Reinitialize when the means are closer than this in Mahalanobis
    /// units of the average component covariance. Random init can converge
    /// to a local maximum where both wide components straddle the true
    /// clusters with nearly coincident means; that state is exactly "very
    /// similar means" measured in the components' own metric, and the
    /// Euclidean test above never fires there.
    pub mahalanobis_floor: f64,
    /// Reinitializations are counted and capped here.
    pub reinit_cap: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-6,
            w_floor: 0.02,
            delta_sep: 1e-3,
            mahalanobis_floor: 1.0,
            reinit_cap: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GmmError {
    TooFewPoints { distinct: usize, needed: usize },
    BadData(String),
}

impl fmt::Display for GmmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GmmError::TooFewPoints { distinct, needed } => {
                write!(f, "need at least {needed} distinct points, found {distinct}")
            }
            GmmError::BadData(m) => write!(f, "bad GMM input: {m}"),
        }
    }
}

impl std::error::Error for GmmError {}

fn check_data(data: &[Vec<f64>]) -> Result<usize, GmmError> {
    let dim = data
        .first()
        .map(|v| v.len())
        .ok_or_else(|| GmmError::BadData("empty dataset".into()))?;
    if dim == 0 {
        return Err(GmmError::BadData("zero-dimensional points".into()));
    }
    for (i, p) in data.iter().enumerate() {
        if p.len() != dim {
            return Err(GmmError::BadData(format!(
                "point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GmmError::BadData(format!("point {i} has non-finite values")));
        }
    }
    Ok(dim)
}

fn count_distinct(data: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = data.iter().collect();
    sorted.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    1 + sorted.windows(2).filter(|w| w[0] != w[1]).count()
}

fn global_mean(data: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for p in data {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= data.len() as f64);
    mean
}

fn global_covariance(data: &[Vec<f64>], dim: usize) -> Mat {
    let mean = global_mean(data, dim);
    let mut cov = Mat::zeros(dim, dim);
    for p in data {
        for i in 0..dim {
            let di = p[i] - mean[i];
            for j in 0..=i {
                *cov.at_mut(i, j) += di * (p[j] - mean[j]);
            }
        }
    }
    let n = data.len() as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = cov.at(i, j) / n;
            *cov.at_mut(i, j) = v;
            *cov.at_mut(j, i) = v;
        }
    }
    cov
}

/// eps for the covariance floor: relative to the mean per-coordinate
/// variance so the floor tracks the data scale.
fn covariance_floor(data: &[Vec<f64>], dim: usize) -> f64 {
    let cov = global_covariance(data, dim);
    let mean_var: f64 = (0..dim).map(|i| cov.at(i, i)).sum::<f64>() / dim as f64;
    if mean_var > 0.0 {
        COV_FLOOR_REL * mean_var
    } else {
        COV_FLOOR_ABS
    }
}

/// Typical coordinate scale of the data, used by the mean-separation
/// reinitialization test.
fn data_scale(data: &[Vec<f64>], dim: usize) -> f64 {
    let cov = global_covariance(data, dim);
    let mean_var: f64 = (0..dim).map(|i| cov.at(i, i)).sum::<f64>() / dim as f64;
    mean_var.max(0.0).sqrt()
}

fn add_eye(m: &mut Mat, eps: f64) {
    for i in 0..m.rows {
        *m.at_mut(i, i) += eps;
    }
}

/// Random initialization: two distinct data points as means, global
/// covariance + floor for both components, weights (1/2, 1/2).
pub fn gmm_init(data: &[Vec<f64>], rng: &mut Rng64) -> Result<GmmModel, GmmError> {
    let dim = check_data(data)?;
    let distinct = count_distinct(data);
    if distinct < 4 {
        return Err(GmmError::TooFewPoints {
            distinct,
            needed: 4,
        });
    }
    let first = rng.index(data.len());
    let second = loop {
        let c = rng.index(data.len());
        if data[c] != data[first] {
            break c;
        }
    };
    let eps = covariance_floor(data, dim);
    let mut cov = global_covariance(data, dim);
    add_eye(&mut cov, eps);
    Ok(GmmModel {
        weights: vec![0.5, 0.5],
        means: vec![data[first].clone(), data[second].clone()],
        covariances: vec![cov.clone(), cov],
    })
}

struct Component {
    chol: Mat,
    log_det: f64,
    log_weight: f64,
}

fn prepare(model: &GmmModel) -> Vec<Component> {
    model
        .weights
        .iter()
        .zip(&model.covariances)
        .map(|(&w, cov)| {
            let chol = cholesky(cov).expect("covariance is positive definite (floored)");
            let log_det = 2.0 * (0..chol.rows).map(|i| chol.at(i, i).ln()).sum::<f64>();
            Component {
                chol,
                log_det,
                log_weight: if w > 0.0 { w.ln() } else { f64::NEG_INFINITY },
            }
        })
        .collect()
}

fn log_density(comp: &Component, mean: &[f64], z: &[f64]) -> f64 {
    let dim = mean.len();
    let diff: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    let y = forward_solve(&comp.chol, &diff);
    let quad: f64 = y.iter().map(|v| v * v).sum();
    -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + comp.log_det + quad)
}

/// Responsibilities r_ic = p(c) N(z_i | mu_c, Sigma_c) / sum_c', computed in
/// log space; each row sums to 1.
pub fn e_step(model: &GmmModel, data: &[Vec<f64>]) -> Mat {
    let comps = prepare(model);
    let k = model.k();
    let mut resp = Mat::zeros(data.len(), k);
    let mut logs = vec![0.0; k];
    for (i, z) in data.iter().enumerate() {
        for (c, comp) in comps.iter().enumerate() {
            logs[c] = comp.log_weight + log_density(comp, &model.means[c], z);
        }
        let norm = log_sum_exp(&logs);
        let row = resp.row_mut(i);
        for c in 0..k {
            row[c] = (logs[c] - norm).exp();
        }
    }
    resp
}

/// Weighted maximum-likelihood updates. Weights are floored at a tiny
/// positive value so the simplex invariant survives total collapse; a
/// component with no responsibility falls back to the global mean and
/// covariance (the reinit rule in [`gmm_fit`] will catch it).
pub fn m_step(data: &[Vec<f64>], resp: &Mat) -> GmmModel {
    let dim = data[0].len();
    let n = data.len();
    assert_eq!(resp.rows, n, "responsibility rows must match data");
    let k = resp.cols;
    let eps = covariance_floor(data, dim);

    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);

    for c in 0..k {
        let nc: f64 = (0..n).map(|i| resp.at(i, c)).sum();
        weights.push(nc / n as f64);

        if nc > 1e-12 {
            let mut mean = vec![0.0; dim];
            for (i, p) in data.iter().enumerate() {
                let r = resp.at(i, c);
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += r * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nc);

            let mut cov = Mat::zeros(dim, dim);
            for (i, p) in data.iter().enumerate() {
                let r = resp.at(i, c);
                if r == 0.0 {
                    continue;
                }
                for a in 0..dim {
                    let da = p[a] - mean[a];
                    for b in 0..=a {
                        *cov.at_mut(a, b) += r * da * (p[b] - mean[b]);
                    }
                }
            }
            for a in 0..dim {
                for b in 0..=a {
                    let v = cov.at(a, b) / nc;
                    *cov.at_mut(a, b) = v;
                    *cov.at_mut(b, a) = v;
                }
            }
            add_eye(&mut cov, eps);
            means.push(mean);
            covariances.push(cov);
        } else {
            let mut cov = global_covariance(data, dim);
            add_eye(&mut cov, eps);
            means.push(global_mean(data, dim));
            covariances.push(cov);
        }
    }

    // keep every weight strictly positive
    let floor = 1e-12;
    let mut total = 0.0;
    for w in weights.iter_mut() {
        if *w < floor {
            *w = floor;
        }
        total += *w;
    }
    weights.iter_mut().for_each(|w| *w /= total);

    GmmModel {
        weights,
        means,
        covariances,
    }
}

/// Total log-likelihood sum_i log sum_c p(c) N(z_i | mu_c, Sigma_c).
pub fn log_likelihood(model: &GmmModel, data: &[Vec<f64>]) -> f64 {
    let comps = prepare(model);
    let k = model.k();
    let mut logs = vec![0.0; k];
    let mut total = 0.0;
    for z in data {
        for (c, comp) in comps.iter().enumerate() {
            logs[c] = comp.log_weight + log_density(comp, &model.means[c], z);
        }
        total += log_sum_exp(&logs);
    }
    total
}

fn mean_separation(model: &GmmModel) -> f64 {
    let a = &model.means[0];
    let b = &model.means[1];
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distance between the two means in Mahalanobis units of the average
/// component covariance.
fn mahalanobis_separation(model: &GmmModel) -> f64 {
    let dim = model.dim();
    let mut avg = Mat::zeros(dim, dim);
    for i in 0..dim * dim {
        avg.data[i] = 0.5 * (model.covariances[0].data[i] + model.covariances[1].data[i]);
    }
    let diff: Vec<f64> = model.means[0]
        .iter()
        .zip(&model.means[1])
        .map(|(a, b)| a - b)
        .collect();
    match cholesky(&avg) {
        Some(l) => {
            let y = forward_solve(&l, &diff);
            y.iter().map(|v| v * v).sum::<f64>().sqrt()
        }
        None => f64::INFINITY,
    }
}

/// Alternates E and M steps with the reinitialize-on-degeneracy rule until
/// the log-likelihood change falls under `cfg.tol` relative or `cfg.max_iter`
/// is reached. Non-convergence is reported, not fatal.
pub fn gmm_fit(
    data: &[Vec<f64>],
    seed: u64,
    cfg: &EmConfig,
) -> Result<(GmmModel, EmReport), GmmError> {
    let dim = check_data(data)?;
    let mut rng = Rng64::new(seed);
    let mut model = gmm_init(data, &mut rng)?;
    let scale = data_scale(data, dim);

    let mut trace = Vec::new();
    let mut reinit_iterations = Vec::new();
    let mut reinit_count = 0usize;
    let mut converged = false;
    let mut prev_ll: Option<f64> = None;

    for iter in 0..cfg.max_iter {
        let resp = e_step(&model, data);
        model = m_step(data, &resp);

        let degenerate = model.weights.iter().cloned().fold(f64::MAX, f64::min) < cfg.w_floor
            || mean_separation(&model) < cfg.delta_sep * scale
            || mahalanobis_separation(&model) < cfg.mahalanobis_floor;
        if degenerate && reinit_count < cfg.reinit_cap {
            model = gmm_init(data, &mut rng)?;
            reinit_count += 1;
            reinit_iterations.push(iter);
            trace.push(log_likelihood(&model, data));
            prev_ll = None;
            continue;
        }

        let ll = log_likelihood(&model, data);
        trace.push(ll);
        if let Some(prev) = prev_ll {
            if (ll - prev).abs() < cfg.tol * ll.abs() {
                converged = true;
                break;
            }
        }
        prev_ll = Some(ll);
    }

    Ok((
        model,
        EmReport {
            iterations: trace.len(),
            log_likelihood_trace: trace,
            reinit_count,
            reinit_iterations,
            converged,
        },
    ))
}

/// Hard labels by responsibility argmax; ties go to component 0.
pub fn gmm_predict(model: &GmmModel, data: &[Vec<f64>]) -> Vec<u8> {
    let resp = e_step(model, data);
    (0..data.len())
        .map(|i| if resp.at(i, 1) > resp.at(i, 0) { 1 } else { 0 })
        .collect()
}

/// Structured-text serialization: `key=value` lines with f64 Display
/// (shortest round-trip form) and space-separated vectors.
pub fn model_to_text(model: &GmmModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("k={}\n", model.k()));
    out.push_str(&format!("dim={}\n", model.dim()));
    for (c, w) in model.weights.iter().enumerate() {
        out.push_str(&format!("weight.{c}={w}\n"));
    }
    for (c, mean) in model.means.iter().enumerate() {
        let v: Vec<String> = mean.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("mean.{c}={}\n", v.join(" ")));
    }
    for (c, cov) in model.covariances.iter().enumerate() {
        let v: Vec<String> = cov.data.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("cov.{c}={}\n", v.join(" ")));
    }
    out
}

pub fn model_from_text(text: &str) -> Result<GmmModel, GmmError> {
    let mut k = None;
    let mut dim = None;
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| GmmError::BadData(format!("bad model line '{line}'")))?;
        match key {
            "k" => k = value.parse::<usize>().ok(),
            "dim" => dim = value.parse::<usize>().ok(),
            _ => {
                fields.insert(key.to_string(), value.to_string());
            }
        }
    }
    let k = k.ok_or_else(|| GmmError::BadData("missing k".into()))?;
    let dim = dim.ok_or_else(|| GmmError::BadData("missing dim".into()))?;
    let parse_vec = |s: &str| -> Result<Vec<f64>, GmmError> {
        s.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| GmmError::BadData(format!("bad number '{t}'")))
            })
            .collect()
    };
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for c in 0..k {
        let w = fields
            .get(&format!("weight.{c}"))
            .ok_or_else(|| GmmError::BadData(format!("missing weight.{c}")))?;
        weights.push(
            w.parse::<f64>()
                .map_err(|_| GmmError::BadData(format!("bad weight '{w}'")))?,
        );
        let mean = parse_vec(
            fields
                .get(&format!("mean.{c}"))
                .ok_or_else(|| GmmError::BadData(format!("missing mean.{c}")))?,
        )?;
        if mean.len() != dim {
            return Err(GmmError::BadData(format!("mean.{c} has wrong length")));
        }
        means.push(mean);
        let cov = parse_vec(
            fields
                .get(&format!("cov.{c}"))
                .ok_or_else(|| GmmError::BadData(format!("missing cov.{c}")))?,
        )?;
        if cov.len() != dim * dim {
            return Err(GmmError::BadData(format!("cov.{c} has wrong length")));
        }
        covariances.push(Mat::from_vec(dim, dim, cov));
    }
    Ok(GmmModel {
        weights,
        means,
        covariances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: &[f64], sigma: f64, n: usize, rng: &mut Rng64) -> Vec<Vec<f64>> {
        let dim = center.len();
        (0..n)
            .map(|_| {
                let mut p = vec![0.0; dim];
                rng.fill_normal(&mut p);
                for (v, c) in p.iter_mut().zip(center) {
                    *v = c + sigma * *v;
                }
                p
            })
            .collect()
    }

    fn two_blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = Rng64::new(seed);
        let mut data = blob(&[0.0, 0.0], 1.0, 100, &mut rng);
        data.extend(blob(&[10.0, 0.0], 1.0, 100, &mut rng));
        let labels: Vec<u8> = (0..200).map(|i| if i < 100 { 0 } else { 1 }).collect();
        (data, labels)
    }

    #[test]
    fn init_has_half_half_weights_and_distinct_means() {
        let (data, _) = two_blobs(1);
        let mut rng = Rng64::new(2);
        let model = gmm_init(&data, &mut rng).unwrap();
        assert_eq!(model.weights, vec![0.5, 0.5]);
        assert_ne!(model.means[0], model.means[1]);
    }

    #[test]
    fn init_is_deterministic_given_seed() {
        let (data, _) = two_blobs(1);
        let a = gmm_init(&data, &mut Rng64::new(7)).unwrap();
        let b = gmm_init(&data, &mut Rng64::new(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_floors_zero_variance_coordinate() {
        // second coordinate is constant; the floor keeps the covariance PD
        let mut rng = Rng64::new(3);
        let data: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.next_f64(), 5.0]).collect();
        let model = gmm_init(&data, &mut rng).unwrap();
        assert!(cholesky(&model.covariances[0]).is_some());
    }

    #[test]
    fn init_rejects_too_few_distinct_points() {
        let data = vec![vec![1.0, 2.0]; 10];
        let err = gmm_init(&data, &mut Rng64::new(1)).unwrap_err();
        assert!(matches!(err, GmmError::TooFewPoints { distinct: 1, .. }));
    }

    #[test]
    fn e_step_identical_components_gives_half() {
        let model = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0], vec![0.0]],
            covariances: vec![Mat::from_vec(1, 1, vec![1.0]); 2],
        };
        let resp = e_step(&model, &[vec![0.3], vec![-2.0]]);
        for i in 0..2 {
            assert!((resp.at(i, 0) - 0.5).abs() < 1e-15);
            assert!((resp.at(i, 1) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn e_step_well_separated_point_is_certain() {
        // means 20 sigma apart; a point at mu_0 belongs to component 0
        let model = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0], vec![20.0]],
            covariances: vec![Mat::from_vec(1, 1, vec![1.0]); 2],
        };
        let resp = e_step(&model, &[vec![0.0]]);
        assert!(resp.at(0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn e_step_rows_sum_to_one() {
        let (data, _) = two_blobs(4);
        let mut rng = Rng64::new(5);
        let model = gmm_init(&data, &mut rng).unwrap();
        let resp = e_step(&model, &data);
        for i in 0..data.len() {
            let s = resp.at(i, 0) + resp.at(i, 1);
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn m_step_all_responsibility_on_one_component() {
        let data = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let mut resp = Mat::zeros(4, 2);
        for i in 0..4 {
            *resp.at_mut(i, 0) = 1.0;
        }
        let model = m_step(&data, &resp);
        assert!(model.weights[0] > 1.0 - 1e-9);
        assert!(model.weights[1] > 0.0); // floored, never exactly zero
        assert!((model.means[0][0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn m_step_uniform_responsibilities_give_global_stats() {
        let data = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let mut resp = Mat::zeros(4, 2);
        resp.data.iter_mut().for_each(|v| *v = 0.5);
        let model = m_step(&data, &resp);
        let gmean = 2.5;
        let gvar = (1.5f64.powi(2) + 0.5f64.powi(2) + 0.5f64.powi(2) + 1.5f64.powi(2)) / 4.0;
        let eps = COV_FLOOR_REL * gvar;
        for c in 0..2 {
            assert!((model.weights[c] - 0.5).abs() < 1e-12);
            assert!((model.means[c][0] - gmean).abs() < 1e-12);
            assert!((model.covariances[c].at(0, 0) - gvar - eps).abs() < 1e-12);
        }
    }

    // Hand-worked 4-point, 1-D example.
    #[test]
    fn m_step_hand_worked_example() {
        let data = vec![vec![0.0], vec![1.0], vec![4.0], vec![5.0]];
        let resp = Mat::from_vec(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let model = m_step(&data, &resp);
        // weights (0.5, 0.5); means (0.5, 4.5); variances 0.25 + eps
        // where eps = 1e-6 * global variance 4.25
        assert!((model.weights[0] - 0.5).abs() < 1e-12);
        assert!((model.means[0][0] - 0.5).abs() < 1e-12);
        assert!((model.means[1][0] - 4.5).abs() < 1e-12);
        let eps = COV_FLOOR_REL * 4.25;
        assert!((model.covariances[0].at(0, 0) - 0.25 - eps).abs() < 1e-12);
        assert!((model.covariances[1].at(0, 0) - 0.25 - eps).abs() < 1e-12);
    }

    #[test]
    fn covariance_eigenvalues_stay_above_floor() {
        // random responsibilities; check Sigma - 0.999 eps I stays PD
        let mut rng = Rng64::new(11);
        let data: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)])
            .collect();
        let mut resp = Mat::zeros(40, 2);
        for i in 0..40 {
            let r = rng.next_f64();
            *resp.at_mut(i, 0) = r;
            *resp.at_mut(i, 1) = 1.0 - r;
        }
        let eps = covariance_floor(&data, 2);
        let model = m_step(&data, &resp);
        for cov in &model.covariances {
            let mut shifted = cov.clone();
            add_eye(&mut shifted, -0.999 * eps);
            assert!(cholesky(&shifted).is_some());
        }
    }

    // Single point at the mean of a unit 1-D Gaussian: log N = -ln(2 pi)/2.
    #[test]
    fn log_likelihood_hand_value() {
        let model = GmmModel {
            weights: vec![1.0, 0.0],
            means: vec![vec![3.0], vec![100.0]],
            covariances: vec![Mat::from_vec(1, 1, vec![1.0]); 2],
        };
        let ll = log_likelihood(&model, &[vec![3.0]]);
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_is_additive_over_duplication() {
        let (data, _) = two_blobs(6);
        let mut rng = Rng64::new(8);
        let model = gmm_init(&data, &mut rng).unwrap();
        let ll = log_likelihood(&model, &data);
        let mut doubled = data.clone();
        doubled.extend(data.iter().cloned());
        let ll2 = log_likelihood(&model, &doubled);
        assert!((ll2 - 2.0 * ll).abs() < 1e-9 * ll.abs());
    }

    // Brute-force oracle: 2-D density via the closed-form inverse.
    #[test]
    fn log_likelihood_matches_direct_density_evaluation() {
        let model = GmmModel {
            weights: vec![0.3, 0.7],
            means: vec![vec![1.0, -1.0], vec![-2.0, 0.5]],
            covariances: vec![
                Mat::from_vec(2, 2, vec![2.0, 0.3, 0.3, 1.0]),
                Mat::from_vec(2, 2, vec![1.5, -0.4, -0.4, 0.8]),
            ],
        };
        let mut rng = Rng64::new(10);
        let data: Vec<Vec<f64>> = (0..10)
            .map(|_| vec![rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)])
            .collect();
        let direct: f64 = data
            .iter()
            .map(|z| {
                let mut p = 0.0;
                for c in 0..2 {
                    let cov = &model.covariances[c];
                    let (a, b, d) = (cov.at(0, 0), cov.at(0, 1), cov.at(1, 1));
                    let det = a * d - b * b;
                    let dx = z[0] - model.means[c][0];
                    let dy = z[1] - model.means[c][1];
                    let quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                    p += model.weights[c]
                        * (1.0 / (2.0 * std::f64::consts::PI * det.sqrt()))
                        * (-0.5 * quad).exp();
                }
                p.ln()
            })
            .sum();
        let ll = log_likelihood(&model, &data);
        assert!((ll - direct).abs() < 1e-9, "ll {ll} direct {direct}");
    }

    #[test]
    fn fit_recovers_two_separated_blobs() {
        let (data, labels) = two_blobs(12);
        let (model, report) = gmm_fit(&data, 99, &EmConfig::default()).unwrap();
        assert!(report.converged);

        // construction oracle: sample means per generating blob
        let mean_of = |lo: usize, hi: usize, k: usize| -> f64 {
            data[lo..hi].iter().map(|p| p[k]).sum::<f64>() / (hi - lo) as f64
        };
        let blob_means = [
            [mean_of(0, 100, 0), mean_of(0, 100, 1)],
            [mean_of(100, 200, 0), mean_of(100, 200, 1)],
        ];
        // match components to blobs by x coordinate
        let (c0, c1) = if model.means[0][0] < model.means[1][0] {
            (0, 1)
        } else {
            (1, 0)
        };
        for k in 0..2 {
            assert!((model.means[c0][k] - blob_means[0][k]).abs() < 0.1);
            assert!((model.means[c1][k] - blob_means[1][k]).abs() < 0.1);
        }
        for w in &model.weights {
            assert!((w - 0.5).abs() < 0.02, "weights {:?}", model.weights);
        }

        // 100% label agreement up to component relabeling
        let pred = gmm_predict(&model, &data);
        let agree: usize = pred
            .iter()
            .zip(&labels)
            .filter(|(p, l)| {
                let mapped = if c0 == 0 { **p } else { 1 - **p };
                mapped == **l
            })
            .count();
        assert_eq!(agree, 200);
    }

    #[test]
    fn fit_on_tight_blob_reinitializes_or_converges() {
        let mut rng = Rng64::new(14);
        let data = blob(&[0.0, 0.0], 0.01, 100, &mut rng);
        let (_, report) = gmm_fit(&data, 15, &EmConfig::default()).unwrap();
        assert!(report.reinit_count >= 1 || report.converged);
    }

    #[test]
    fn log_likelihood_trace_is_nondecreasing_between_reinits() {
        for seed in 0..20u64 {
            let (data, _) = two_blobs(seed + 30);
            let (_, report) = gmm_fit(&data, seed, &EmConfig::default()).unwrap();
            let t = &report.log_likelihood_trace;
            for i in 1..t.len() {
                if report.reinit_iterations.contains(&i) || report.reinit_iterations.contains(&(i - 1)) {
                    continue;
                }
                assert!(
                    t[i] >= t[i - 1] - 1e-9,
                    "seed {seed}: LL fell from {} to {} at {i}",
                    t[i - 1],
                    t[i]
                );
            }
        }
    }

    #[test]
    fn predict_labels_and_ties() {
        let model = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0], vec![10.0]],
            covariances: vec![Mat::from_vec(1, 1, vec![1.0]); 2],
        };
        assert_eq!(gmm_predict(&model, &[vec![0.0], vec![10.0]]), vec![0, 1]);

        // symmetric model: every point is a tie, resolved to component 0
        let sym = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![vec![1.0], vec![1.0]],
            covariances: vec![Mat::from_vec(1, 1, vec![1.0]); 2],
        };
        assert_eq!(gmm_predict(&sym, &[vec![0.0], vec![2.0]]), vec![0, 0]);
    }

    // Argmax is invariant under strictly increasing per-class transforms;
    // scaling both weights equally is one such transform.
    #[test]
    fn predict_invariant_under_weight_rescaling() {
        let (data, _) = two_blobs(40);
        let mut rng = Rng64::new(41);
        let model = gmm_init(&data, &mut rng).unwrap();
        let mut scaled = model.clone();
        scaled.weights = vec![0.25, 0.25]; // same ratio, not normalized
        assert_eq!(gmm_predict(&model, &data), gmm_predict(&scaled, &data));
    }

    #[test]
    fn text_serialization_round_trips() {
        let (data, _) = two_blobs(50);
        let (model, _) = gmm_fit(&data, 51, &EmConfig::default()).unwrap();
        let text = model_to_text(&model);
        let back = model_from_text(&text).unwrap();
        assert_eq!(back, model);
        assert!(model_from_text("k=2\n").is_err());
    }
}
