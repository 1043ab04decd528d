//! Concrete estimating equations: mean, linear, logistic, and Poisson
//! regression, plus seeded synthetic data generation.
//!
//! Each model's `g_n` is the gradient of a per-datum loss (squared error or
//! negative log-likelihood) and `h_n` its analytic Hessian. Finite
//! differences are used only as a check, never as the implementation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimating::{EstimatingEquation, Parameter};

/// Rates above `exp(POISSON_CAP)` abort synthetic generation instead of
/// overflowing.
const POISSON_CAP: f64 = 30.0;

/// A regression dataset: `N×P` features and a length-`N` response.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: DMatrix<f64>,
    response: DVector<f64>,
    has_bias: bool,
}

impl Dataset {
    /// Build from row-major features. `has_bias` appends a constant-1 feature
    /// at evaluation time.
    pub fn new(features: Vec<Vec<f64>>, response: Vec<f64>, has_bias: bool) -> Result<Self> {
        let n = features.len();
        if n != response.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} responses",
                n,
                response.len()
            )));
        }
        let p = features.first().map_or(0, |r| r.len());
        if features.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput("ragged feature rows".into()));
        }
        if features.iter().flatten().any(|v| !v.is_finite())
            || response.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite dataset entry".into()));
        }
        let features = DMatrix::from_row_iterator(n, p, features.into_iter().flatten());
        Ok(Dataset {
            features,
            response: DVector::from_vec(response),
            has_bias,
        })
    }

    pub fn n_points(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn has_bias(&self) -> bool {
        self.has_bias
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    /// Feature vector for datum `n`, with the bias column appended when
    /// configured.
    pub fn row(&self, n: usize) -> DVector<f64> {
        let p = self.n_features();
        let d = p + usize::from(self.has_bias);
        let mut x = DVector::zeros(d);
        for j in 0..p {
            x[j] = self.features[(n, j)];
        }
        if self.has_bias {
            x[p] = 1.0;
        }
        x
    }

    /// Write as CSV with header `x1..xP,y`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        let p = self.n_features();
        let header: Vec<String> = (1..=p)
            .map(|j| format!("x{j}"))
            .chain(std::iter::once("y".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for n in 0..self.n_points() {
            let mut row: Vec<String> = (0..p)
                .map(|j| format_f64(self.features[(n, j)]))
                .collect();
            row.push(format_f64(self.response[n]));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Read from the CSV format produced by [`Dataset::write_csv`].
    pub fn read_csv<R: std::io::Read>(reader: R, has_bias: bool) -> Result<Self> {
        use std::io::BufRead;
        let mut lines = std::io::BufReader::new(reader).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty CSV".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.last() != Some(&"y") {
            return Err(Error::InvalidInput(
                "CSV header must end with column 'y'".into(),
            ));
        }
        let p = cols.len() - 1;
        let mut features = Vec::new();
        let mut response = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .trim()
                .split(',')
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::InvalidInput(format!(
                            "bad number {s:?} on data row {}",
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != p + 1 {
                return Err(Error::InvalidInput(format!(
                    "row {} has {} columns, expected {}",
                    lineno + 1,
                    vals.len(),
                    p + 1
                )));
            }
            features.push(vals[..p].to_vec());
            response.push(vals[p]);
        }
        Dataset::new(features, response, has_bias)
    }
}

/// Lossless round-trip formatting for CSV output.
fn format_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// The supported model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmKind {
    Mean,
    Linear,
    Logistic,
    Poisson,
}

impl GlmKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(GlmKind::Mean),
            "linear" => Ok(GlmKind::Linear),
            "logistic" => Ok(GlmKind::Logistic),
            "poisson" => Ok(GlmKind::Poisson),
            other => Err(Error::InvalidInput(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for GlmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GlmKind::Mean => "mean",
            GlmKind::Linear => "linear",
            GlmKind::Logistic => "logistic",
            GlmKind::Poisson => "poisson",
        };
        f.write_str(s)
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// A GLM-style estimating equation over a [`Dataset`].
#[derive(Debug, Clone)]
pub struct GlmModel {
    kind: GlmKind,
    dataset: Dataset,
}

impl GlmModel {
    pub fn new(kind: GlmKind, dataset: Dataset) -> Result<Self> {
        match kind {
            GlmKind::Logistic => {
                if dataset.response.iter().any(|&y| y != 0.0 && y != 1.0) {
                    return Err(Error::InvalidInput(
                        "logistic response must be 0 or 1".into(),
                    ));
                }
            }
            GlmKind::Poisson => {
                if dataset
                    .response
                    .iter()
                    .any(|&y| y < 0.0 || y.fract() != 0.0)
                {
                    return Err(Error::InvalidInput(
                        "poisson response must be a nonnegative integer".into(),
                    ));
                }
            }
            GlmKind::Mean | GlmKind::Linear => {}
        }
        Ok(GlmModel { kind, dataset })
    }

    /// The one-dimensional location model `g_n(θ) = θ − x_n` over the given
    /// observations.
    pub fn mean(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        GlmModel::new(
            GlmKind::Mean,
            Dataset::new(vec![vec![]; n], values, false)?,
        )
    }

    pub fn kind(&self) -> GlmKind {
        self.kind
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Linear predictor `θᵀx_n`.
    fn eta(&self, n: usize, theta: &Parameter) -> f64 {
        self.dataset.row(n).dot(theta.values())
    }

    /// Per-datum loss: squared error for mean/linear, negative log-likelihood
    /// for logistic/Poisson (constants in `y` dropped).
    pub fn loss(&self, n: usize, theta: &Parameter) -> f64 {
        let y = self.dataset.response[n];
        match self.kind {
            GlmKind::Mean => {
                let r = theta.values()[0] - y;
                0.5 * r * r
            }
            GlmKind::Linear => {
                let r = self.eta(n, theta) - y;
                0.5 * r * r
            }
            GlmKind::Logistic => {
                let eta = self.eta(n, theta);
                // -[y*log σ + (1-y)*log(1-σ)] in a softplus form stable for large |eta|
                let softplus = if eta > 0.0 {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                };
                softplus - y * eta
            }
            GlmKind::Poisson => {
                let eta = self.eta(n, theta);
                eta.exp() - y * eta
            }
        }
    }

    /// Mean per-datum loss over an index set.
    pub fn held_out_loss(&self, theta: &Parameter, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty held-out index set".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.dataset.n_points()) {
            return Err(Error::InvalidInput(format!(
                "held-out index {i} out of range"
            )));
        }
        let total: f64 = indices.iter().map(|&i| self.loss(i, theta)).sum();
        Ok(total / indices.len() as f64)
    }
}

impl EstimatingEquation for GlmModel {
    fn n_points(&self) -> usize {
        self.dataset.n_points()
    }

    fn dim(&self) -> usize {
        match self.kind {
            GlmKind::Mean => 1,
            _ => self.dataset.n_features() + usize::from(self.dataset.has_bias),
        }
    }

    fn eval_g(&self, index: usize, theta: &Parameter) -> DVector<f64> {
        let y = self.dataset.response[index];
        match self.kind {
            GlmKind::Mean => DVector::from_element(1, theta.values()[0] - y),
            GlmKind::Linear => {
                let x = self.dataset.row(index);
                let r = x.dot(theta.values()) - y;
                x * r
            }
            GlmKind::Logistic => {
                let x = self.dataset.row(index);
                let r = sigmoid(x.dot(theta.values())) - y;
                x * r
            }
            GlmKind::Poisson => {
                let x = self.dataset.row(index);
                let r = x.dot(theta.values()).exp() - y;
                x * r
            }
        }
    }

    fn eval_h(&self, index: usize, theta: &Parameter) -> DMatrix<f64> {
        match self.kind {
            GlmKind::Mean => DMatrix::identity(1, 1),
            GlmKind::Linear => {
                let x = self.dataset.row(index);
                &x * x.transpose()
            }
            GlmKind::Logistic => {
                let x = self.dataset.row(index);
                let s = sigmoid(x.dot(theta.values()));
                (&x * x.transpose()) * (s * (1.0 - s))
            }
            GlmKind::Poisson => {
                let x = self.dataset.row(index);
                let rate = x.dot(theta.values()).exp();
                (&x * x.transpose()) * rate
            }
        }
    }
}

/// Recipe for a seeded synthetic dataset in the style of standard
/// logistic/Poisson simulation studies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: GlmKind,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    /// Regression coefficients; must have length `p`.
    pub true_theta: Vec<f64>,
    pub true_bias: f64,
    /// Standard deviation of the Gaussian features (identity covariance
    /// scaled by this).
    pub feature_scale: f64,
}

impl SyntheticSpec {
    /// Desk-scale preset: modest sizes and coefficients decaying as 1/(1+j).
    pub fn desk(kind: GlmKind, n: usize, p: usize, seed: u64) -> Self {
        let true_theta: Vec<f64> = (0..p).map(|j| 0.5 / (1.0 + j as f64)).collect();
        SyntheticSpec {
            kind,
            n,
            p,
            seed,
            true_theta,
            true_bias: 0.1,
            feature_scale: 1.0,
        }
    }

    /// Wide preset with `P = 100` features.
    pub fn wide(kind: GlmKind, n: usize, seed: u64) -> Self {
        Self::desk(kind, n, 100, seed)
    }
}

/// Draw a dataset from a [`SyntheticSpec`]. Identical recipes (including the
/// seed) give identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 || (spec.p == 0 && spec.kind != GlmKind::Mean) {
        return Err(Error::InvalidInput("n and p must be at least 1".into()));
    }
    if spec.true_theta.len() != spec.p {
        return Err(Error::DimensionMismatch(format!(
            "true_theta has length {}, expected p = {}",
            spec.true_theta.len(),
            spec.p
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Vec::with_capacity(spec.n);
    let mut response = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x: Vec<f64> = (0..spec.p)
            .map(|_| spec.feature_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let eta: f64 =
            x.iter().zip(&spec.true_theta).map(|(a, b)| a * b).sum::<f64>() + spec.true_bias;
        let y = match spec.kind {
            GlmKind::Mean => spec.true_bias + rng.sample::<f64, _>(StandardNormal),
            GlmKind::Linear => eta + rng.sample::<f64, _>(StandardNormal),
            GlmKind::Logistic => {
                if rng.gen::<f64>() < sigmoid(eta) {
                    1.0
                } else {
                    0.0
                }
            }
            GlmKind::Poisson => {
                if eta > POISSON_CAP {
                    return Err(Error::InvalidInput(format!(
                        "poisson rate exp({eta:.2}) exceeds the overflow cap"
                    )));
                }
                let pois = Poisson::new(eta.exp())
                    .map_err(|e| Error::InvalidInput(format!("poisson rate: {e}")))?;
                pois.sample(&mut rng)
            }
        };
        features.push(x);
        response.push(y);
    }
    let has_bias = spec.kind != GlmKind::Mean;
    Dataset::new(features, response, has_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::estimating::{eval_g_weighted, WeightVector};

    #[test]
    fn linear_exact_interpolation_has_zero_gradient() {
        let ds = Dataset::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 2.0], false)
            .unwrap();
        let eq = GlmModel::new(GlmKind::Linear, ds).unwrap();
        let theta = Parameter::from_slice(&[1.0, 2.0]).unwrap();
        let g = eval_g_weighted(&eq, &theta, &WeightVector::ones(2)).unwrap();
        assert_abs_diff_eq!(g.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn logistic_at_zero_theta() {
        let ds = Dataset::new(vec![vec![2.0], vec![-1.0]], vec![1.0, 0.0], false).unwrap();
        let eq = GlmModel::new(GlmKind::Logistic, ds).unwrap();
        let theta = Parameter::from_slice(&[0.0]).unwrap();
        // g_n = (0.5 - y_n) x_n
        let g0 = eq.eval_g(0, &theta);
        assert_abs_diff_eq!(g0[0], (0.5 - 1.0) * 2.0, epsilon = 1e-15);
        let g1 = eq.eval_g(1, &theta);
        assert_abs_diff_eq!(g1[0], (0.5 - 0.0) * -1.0, epsilon = 1e-15);
    }

    #[test]
    fn poisson_single_datum_hand_check() {
        let ds = Dataset::new(vec![vec![1.0]], vec![1.0], false).unwrap();
        let eq = GlmModel::new(GlmKind::Poisson, ds).unwrap();
        let theta = Parameter::from_slice(&[0.0]).unwrap();
        assert_abs_diff_eq!(eq.eval_g(0, &theta)[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eq.eval_h(0, &theta)[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn response_range_validation() {
        let ds = Dataset::new(vec![vec![1.0]], vec![0.5], false).unwrap();
        assert!(GlmModel::new(GlmKind::Logistic, ds.clone()).is_err());
        assert!(GlmModel::new(GlmKind::Poisson, ds).is_err());
        let ds = Dataset::new(vec![vec![1.0]], vec![-1.0], false).unwrap();
        assert!(GlmModel::new(GlmKind::Poisson, ds).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::desk(GlmKind::Logistic, 50, 3, 7);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.response(), b.response());
        for n in 0..a.n_points() {
            assert_eq!(a.row(n), b.row(n));
        }
    }

    #[test]
    fn logistic_balanced_at_zero_coefficients() {
        let mut spec = SyntheticSpec::desk(GlmKind::Logistic, 10_000, 2, 11);
        spec.true_theta = vec![0.0, 0.0];
        spec.true_bias = 0.0;
        let ds = generate_synthetic(&spec).unwrap();
        let mean_y = ds.response().sum() / ds.n_points() as f64;
        assert!((0.45..=0.55).contains(&mean_y), "mean(y) = {mean_y}");
    }

    #[test]
    fn poisson_unit_rate_mean() {
        let mut spec = SyntheticSpec::desk(GlmKind::Poisson, 10_000, 2, 13);
        spec.true_theta = vec![0.0, 0.0];
        spec.true_bias = 0.0;
        let ds = generate_synthetic(&spec).unwrap();
        let mean_y = ds.response().sum() / ds.n_points() as f64;
        assert!((0.9..=1.1).contains(&mean_y), "mean(y) = {mean_y}");
    }

    #[test]
    fn held_out_loss_log2_for_logistic_at_zero() {
        let ds = Dataset::new(vec![vec![1.0], vec![2.0]], vec![0.0, 1.0], false).unwrap();
        let eq = GlmModel::new(GlmKind::Logistic, ds).unwrap();
        let theta = Parameter::from_slice(&[0.0]).unwrap();
        let loss = eq.held_out_loss(&theta, &[0, 1]).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn held_out_loss_rejects_empty_and_out_of_range() {
        let eq = GlmModel::mean(vec![1.0, 2.0]).unwrap();
        let theta = Parameter::from_slice(&[0.0]).unwrap();
        assert!(eq.held_out_loss(&theta, &[]).is_err());
        assert!(eq.held_out_loss(&theta, &[5]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::new(
            vec![vec![1.5, -2.0], vec![0.25, 3.0]],
            vec![0.0, 1.0],
            true,
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), true).unwrap();
        assert_eq!(back.response(), ds.response());
        for n in 0..ds.n_points() {
            assert_eq!(back.row(n), ds.row(n));
        }
        // byte-exact on rewrite
        let mut buf2 = Vec::new();
        back.write_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
