//! Column weights for a feature matrix.
//!
//! The production method is least squares against the target (with a bias
//! column): rank check by pivoted QR, QR solve at full rank, ridge fallback
//! otherwise. The attention-style scorers (dot product, cosine, Pearson, and
//! their softmax variants) exist for the weighting comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, NodeId, ScoreKind};
use crate::basis::{Column, FeatureMatrix};
use crate::linalg::{self, LinalgError, SolvePolicy};

pub use crate::linalg::{RankReport, SolvePath};

pub const DEFAULT_RIDGE: f64 = 0.1;
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightingError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate score: {0}")]
    Degenerate(&'static str),
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
    #[error("unknown weighting method `{0}` (expected linear-regression, dot-softmax, cosine, pearson or pearson-softmax)")]
    UnknownMethod(String),
    #[error(transparent)]
    Solve(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingMethod {
    LinearRegression,
    DotSoftmax,
    Cosine,
    Pearson,
    PearsonSoftmax,
}

impl WeightingMethod {
    pub const ALL: [WeightingMethod; 5] = [
        WeightingMethod::LinearRegression,
        WeightingMethod::DotSoftmax,
        WeightingMethod::Cosine,
        WeightingMethod::Pearson,
        WeightingMethod::PearsonSoftmax,
    ];

    /// Default method set for `compare-weighting`.
    pub const COMPARISON: [WeightingMethod; 4] = [
        WeightingMethod::LinearRegression,
        WeightingMethod::Pearson,
        WeightingMethod::PearsonSoftmax,
        WeightingMethod::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightingMethod::LinearRegression => "linear-regression",
            WeightingMethod::DotSoftmax => "dot-softmax",
            WeightingMethod::Cosine => "cosine",
            WeightingMethod::Pearson => "pearson",
            WeightingMethod::PearsonSoftmax => "pearson-softmax",
        }
    }

    /// Whether the matrix gets a bias column. Scorers cannot weigh a constant column.
    pub fn uses_bias(self) -> bool {
        self == WeightingMethod::LinearRegression
    }

    pub fn is_softmax(self) -> bool {
        matches!(self, WeightingMethod::DotSoftmax | WeightingMethod::PearsonSoftmax)
    }

    fn score_kind(self) -> Option<ScoreKind> {
        match self {
            WeightingMethod::LinearRegression => None,
            WeightingMethod::DotSoftmax => Some(ScoreKind::Dot),
            WeightingMethod::Cosine => Some(ScoreKind::Cosine),
            WeightingMethod::Pearson | WeightingMethod::PearsonSoftmax => Some(ScoreKind::Pearson),
        }
    }
}

impl fmt::Display for WeightingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightingMethod {
    type Err = WeightingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WeightingMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| WeightingError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub lambda: f64,
    pub rank_tolerance: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_RIDGE,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
        }
    }
}

impl RegressionConfig {
    fn policy(&self) -> SolvePolicy {
        SolvePolicy::Auto {
            ridge: self.lambda,
            rank_tol: self.rank_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub w: Vec<f64>,
    pub method: WeightingMethod,
    /// Ridge parameter actually applied; `None` when no ridge term was used.
    pub lambda: Option<f64>,
}

/// Least-squares weights over all columns of `f` (bias included when present).
pub fn solve_weights_regression(
    f: &FeatureMatrix,
    y: &[f64],
    config: &RegressionConfig,
) -> Result<(AttentionWeights, RankReport), WeightingError> {
    if f.rows() == 0 {
        return Err(WeightingError::EmptyBatch);
    }
    if y.len() != f.rows() {
        return Err(WeightingError::LengthMismatch {
            left: f.rows(),
            right: y.len(),
        });
    }
    let sol = linalg::least_squares(&f.values, y, config.policy())?;
    let report = sol.report.expect("auto policy always reports rank");
    let lambda = (report.path_taken == SolvePath::Ridge).then_some(sol.lambda);
    Ok((
        AttentionWeights {
            w: sol.w,
            method: WeightingMethod::LinearRegression,
            lambda,
        },
        report,
    ))
}

/// Weights by any method. Scorer methods give the bias column weight 0.
pub fn solve_weights(
    f: &FeatureMatrix,
    y: &[f64],
    method: WeightingMethod,
    config: &RegressionConfig,
) -> Result<AttentionWeights, WeightingError> {
    let Some(kind) = method.score_kind() else {
        return solve_weights_regression(f, y, config).map(|(w, _)| w);
    };
    if f.rows() == 0 {
        return Err(WeightingError::EmptyBatch);
    }
    let scorer: fn(&[f64], &[f64]) -> Result<f64, WeightingError> = match kind {
        ScoreKind::Dot => score_dot,
        ScoreKind::Cosine => score_cosine,
        ScoreKind::Pearson => score_pearson,
    };
    let scored: Vec<usize> = (0..f.width()).filter(|&c| f.columns[c] != Column::Bias).collect();
    let scores = scored
        .iter()
        .map(|&c| scorer(y, &f.values.col(c)))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = if method.is_softmax() { softmax_weights(&scores)? } else { scores };
    let mut w = vec![0.0; f.width()];
    for (&c, s) in scored.iter().zip(scores) {
        w[c] = s;
    }
    Ok(AttentionWeights { w, method, lambda: None })
}

/// Graph node of the weights. `f` must already carry the bias column exactly
/// when `method.uses_bias()`.
pub fn weights_node(g: &mut Graph, f: NodeId, y: NodeId, method: WeightingMethod, config: &RegressionConfig) -> NodeId {
    match method.score_kind() {
        None => g.least_squares(f, y, config.lambda, config.rank_tolerance),
        Some(kind) => {
            let s = g.column_scores(f, y, kind);
            if method.is_softmax() {
                g.softmax(s)
            } else {
                s
            }
        }
    }
}

fn check_len(y: &[f64], g: &[f64]) -> Result<(), WeightingError> {
    if y.len() != g.len() {
        return Err(WeightingError::LengthMismatch {
            left: y.len(),
            right: g.len(),
        });
    }
    Ok(())
}

pub fn score_dot(y: &[f64], g: &[f64]) -> Result<f64, WeightingError> {
    check_len(y, g)?;
    Ok(y.iter().zip(g).map(|(a, b)| a * b).sum())
}

pub fn score_cosine(y: &[f64], g: &[f64]) -> Result<f64, WeightingError> {
    check_len(y, g)?;
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ny == 0.0 || ng == 0.0 {
        return Err(WeightingError::Degenerate("zero vector"));
    }
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok((dot / (ny * ng)).clamp(-1.0, 1.0))
}

pub fn score_pearson(y: &[f64], g: &[f64]) -> Result<f64, WeightingError> {
    check_len(y, g)?;
    if y.is_empty() {
        return Err(WeightingError::EmptyBatch);
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mg = g.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(g) {
        let (da, db) = (a - my, b - mg);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(WeightingError::Degenerate("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn softmax_weights(scores: &[f64]) -> Result<Vec<f64>, WeightingError> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(WeightingError::NonFinite(i));
    }
    Ok(autodiff::softmax(scores))
}

/// `F · w`.
pub fn predict(f: &FeatureMatrix, weights: &AttentionWeights) -> Result<Vec<f64>, WeightingError> {
    if weights.w.len() != f.width() {
        return Err(WeightingError::LengthMismatch {
            left: f.width(),
            right: weights.w.len(),
        });
    }
    Ok(linalg::mat_vec(&f.values, &weights.w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::single_columns;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(values: Tensor) -> FeatureMatrix {
        let m = values.cols();
        FeatureMatrix {
            values,
            columns: single_columns(m, 1),
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn exact_line_fit() {
        let f = matrix(Tensor::column(vec![0.0, 1.0, 2.0])).with_bias().unwrap();
        let y = [1.0, 3.0, 5.0];
        let (w, report) = solve_weights_regression(&f, &y, &RegressionConfig::default()).unwrap();
        assert!((w.w[0] - 2.0).abs() < 1e-12 && (w.w[1] - 1.0).abs() < 1e-12);
        assert_eq!(report.path_taken, SolvePath::Qr);
        assert_eq!(report.estimated_rank, 2);
        assert_eq!(w.lambda, None);
        let p = predict(&f, &w).unwrap();
        for (a, b) in p.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_columns_take_the_ridge_path_with_equal_weights() {
        let base = random(30, 2, 1);
        let dup = Tensor::hstack(&[&base, &Tensor::column(base.col(0))]);
        let f = matrix(dup).with_bias().unwrap();
        let y: Vec<f64> = random(30, 1, 2).into_vec();
        let (w, report) = solve_weights_regression(&f, &y, &RegressionConfig::default()).unwrap();
        assert_eq!(report.path_taken, SolvePath::Ridge);
        assert_eq!(report.estimated_rank, 3);
        assert_eq!(w.lambda, Some(0.1));
        assert!((w.w[0] - w.w[2]).abs() < 1e-12);
    }

    #[test]
    fn qr_path_matches_dense_normal_equations() {
        let f = matrix(random(50, 6, 3));
        let y: Vec<f64> = random(50, 1, 4).into_vec();
        let (w, report) = solve_weights_regression(&f, &y, &RegressionConfig::default()).unwrap();
        assert_eq!(report.path_taken, SolvePath::Qr);
        let a = linalg::gram(&f.values);
        let oracle = linalg::Cholesky::new(&a).unwrap().solve(&linalg::at_vec(&f.values, &y));
        for (p, q) in w.w.iter().zip(&oracle) {
            assert!((p - q).abs() < 1e-8);
        }
        // Residual orthogonality.
        let r: Vec<f64> = predict(&f, &w).unwrap().iter().zip(&y).map(|(p, t)| p - t).collect();
        let ft_r = linalg::at_vec(&f.values, &r);
        let scale = linalg::at_vec(&f.values, &y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(ft_r.iter().all(|v| v.abs() < 1e-8 * scale.max(1.0)));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let f = matrix(Tensor::zeros(0, 2));
        assert_eq!(
            solve_weights_regression(&f, &[], &RegressionConfig::default()).unwrap_err(),
            WeightingError::EmptyBatch
        );
    }

    #[test]
    fn dot_examples() {
        assert_eq!(score_dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score_dot(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(score_dot(&[2.0, 3.0], &[4.0, -1.0]).unwrap(), 5.0);
        assert!(score_dot(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let y = [0.3, -1.2, 2.0];
        assert!((score_cosine(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((score_cosine(&y, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((score_cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(score_cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(WeightingError::Degenerate("zero vector")));
    }

    #[test]
    fn pearson_examples() {
        let y = [1.0, 4.0, -2.0, 0.5];
        let g: Vec<f64> = y.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((score_pearson(&y, &g).unwrap() - 1.0).abs() < 1e-14);
        let g: Vec<f64> = y.iter().map(|v| -v + 5.0).collect();
        assert!((score_pearson(&y, &g).unwrap() + 1.0).abs() < 1e-14);
        // Direct formula: centered (−1,0,1)·(−1,1,0) = 1, norms √2·√2.
        assert!((score_pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(score_pearson(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_weights(&[0.5; 4]).unwrap(), vec![0.25; 4]);
        let s = softmax_weights(&[0.0, 1e3]).unwrap();
        assert!(s[0] < 1e-300 && (s[1] - 1.0).abs() < 1e-15);
        let s = softmax_weights(&[1.0, 2.0, 3.0]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((s[2] - 3f64.exp() / z).abs() < 1e-15);
        assert_eq!(softmax_weights(&[0.0, f64::NAN]), Err(WeightingError::NonFinite(1)));
    }

    #[test]
    fn predict_examples() {
        let f = matrix(Tensor::identity(2));
        let zero = AttentionWeights {
            w: vec![0.0, 0.0],
            method: WeightingMethod::LinearRegression,
            lambda: None,
        };
        assert_eq!(predict(&f, &zero).unwrap(), vec![0.0, 0.0]);
        let w = AttentionWeights { w: vec![2.5, -1.0], ..zero.clone() };
        assert_eq!(predict(&f, &w).unwrap(), vec![2.5, -1.0]);
        let bad = AttentionWeights { w: vec![1.0], ..zero };
        assert!(predict(&f, &bad).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in WeightingMethod::ALL {
            assert_eq!(m.name().parse::<WeightingMethod>().unwrap(), m);
        }
        assert!(matches!("general".parse::<WeightingMethod>(), Err(WeightingError::UnknownMethod(_))));
    }

    #[test]
    fn scorer_dispatch_matches_graph_scores() {
        let base = random(20, 4, 5);
        let f = matrix(base.clone()).with_bias().unwrap();
        let y: Vec<f64> = random(20, 1, 6).into_vec();
        for method in [WeightingMethod::Cosine, WeightingMethod::PearsonSoftmax, WeightingMethod::DotSoftmax] {
            let direct = solve_weights(&f, &y, method, &RegressionConfig::default()).unwrap();
            assert_eq!(direct.w[4], 0.0);
            let mut g = Graph::new();
            let fi = g.input(base.clone());
            let yi = g.input(Tensor::column(y.clone()));
            let w = weights_node(&mut g, fi, yi, method, &RegressionConfig::default());
            let v = g.forward(w).unwrap();
            for (a, b) in v.as_slice().iter().zip(&direct.w[..4]) {
                assert!((a - b).abs() < 1e-12, "{method}");
            }
            if method.is_softmax() {
                assert!((direct.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn pearson_is_shift_and_sign_scale_invariant(
            y in proptest::collection::vec(-10.0f64..10.0, 8),
            g in proptest::collection::vec(-10.0f64..10.0, 8),
            c in -100.0f64..100.0,
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        ) {
            let base = score_pearson(&y, &g);
            prop_assume!(base.is_ok());
            let base = base.unwrap();
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            prop_assert!((score_pearson(&shifted, &g).unwrap() - base).abs() < 1e-9);
            let scaled: Vec<f64> = y.iter().map(|v| a * v + c).collect();
            prop_assert!((score_pearson(&scaled, &g).unwrap() - a.signum() * base).abs() < 1e-9);
        }

        #[test]
        fn softmax_is_a_distribution(scores in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let s = softmax_weights(&scores).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|v| *v > 0.0));
        }

        #[test]
        fn ridge_residual_is_small(seed in 0u64..500) {
            let base = random(15, 3, seed);
            let f = matrix(Tensor::hstack(&[&base, &Tensor::column(base.col(1))]));
            let y: Vec<f64> = random(15, 1, seed + 1).into_vec();
            let (w, report) = solve_weights_regression(&f, &y, &RegressionConfig::default()).unwrap();
            prop_assert_eq!(report.path_taken, SolvePath::Ridge);
            let mut a = linalg::gram(&f.values);
            for i in 0..4 { a.set(i, i, a.get(i, i) + 0.1); }
            let lhs = linalg::mat_vec(&a, &w.w);
            let rhs = linalg::at_vec(&f.values, &y);
            let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() < 1e-8 * (1.0 + scale));
            }
            let again = solve_weights_regression(&f, &y, &RegressionConfig::default()).unwrap().0;
            prop_assert_eq!(again, w);
        }
    }
}
