//! Local explanations with a trained, frozen model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{pair_layout, BasisError};
use crate::linalg::RankReport;
use crate::oracle::{BlackBox, OracleError};
use crate::tensor::Tensor;
use crate::trainer::Model;
use crate::weighting::{predict, solve_weights_regression, AttentionWeights, RegressionConfig, WeightingError};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("invalid explain request: {0}")]
    Request(String),
    #[error("model was trained without pairwise terms; pair heatmaps are unavailable")]
    PairsUnavailable,
    #[error("feature {feature} out of range for {d} features")]
    FeatureOutOfRange { feature: usize, d: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Neighborhood {
    /// Half-width per coordinate.
    Box { half_widths: Vec<f64> },
    /// Half-width `fraction · (max − min) / 2` per coordinate.
    FractionOfRange { fraction: f64, min: Vec<f64>, max: Vec<f64> },
}

impl Neighborhood {
    pub fn cube(d: usize, half_width: f64) -> Self {
        Neighborhood::Box {
            half_widths: vec![half_width; d],
        }
    }

    pub fn half_widths(&self) -> Vec<f64> {
        match self {
            Neighborhood::Box { half_widths } => half_widths.clone(),
            Neighborhood::FractionOfRange { fraction, min, max } => {
                min.iter().zip(max).map(|(lo, hi)| fraction * (hi - lo) / 2.0).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairSelection {
    All(AllPairs),
    List(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllPairs {
    All,
}

impl Default for PairSelection {
    fn default() -> Self {
        PairSelection::List(Vec::new())
    }
}

impl PairSelection {
    pub fn all() -> Self {
        PairSelection::All(AllPairs::All)
    }

    pub fn resolve(&self, d: usize) -> Vec<(usize, usize)> {
        match self {
            PairSelection::All(_) => (0..d).flat_map(|i| (i + 1..d).map(move |s| (i, s))).collect(),
            PairSelection::List(list) => list.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, PairSelection::List(l) if l.is_empty())
    }
}

fn default_samples() -> usize {
    1000
}

fn default_grid() -> usize {
    101
}

fn default_heatmap() -> usize {
    51
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub center: Vec<f64>,
    pub neighborhood: Neighborhood,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_grid")]
    pub grid_resolution: usize,
    #[serde(default = "default_heatmap")]
    pub heatmap_resolution: usize,
    #[serde(default)]
    pub pairs: PairSelection,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ExplainRequest {
    pub fn new(center: Vec<f64>, neighborhood: Neighborhood) -> Self {
        Self {
            center,
            neighborhood,
            samples: default_samples(),
            grid_resolution: default_grid(),
            heatmap_resolution: default_heatmap(),
            pairs: PairSelection::default(),
            regression: RegressionConfig::default(),
            seed: 0,
        }
    }

    fn validate(&self, model: &Model) -> Result<Vec<f64>, ExplainError> {
        let d = model.d();
        let bad = |m: String| Err(ExplainError::Request(m));
        if self.center.len() != d {
            return bad(format!("center has {} coordinates, model has {d} features", self.center.len()));
        }
        if self.center.iter().any(|v| !v.is_finite()) {
            return bad("center must be finite".into());
        }
        let h = self.neighborhood.half_widths();
        if h.len() != d {
            return bad(format!("neighborhood has {} coordinates, model has {d} features", h.len()));
        }
        if h.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("neighborhood half-widths must be positive".into());
        }
        let width = model.feature_width() + 1;
        if self.samples <= width {
            return bad(format!("samples {} must exceed the feature-matrix width {width}", self.samples));
        }
        if self.grid_resolution < 2 || self.heatmap_resolution < 2 {
            return bad("grid resolutions must be at least 2".into());
        }
        if !self.pairs.is_empty() && !model.pairwise {
            return Err(ExplainError::PairsUnavailable);
        }
        for (i, s) in self.pairs.resolve(d) {
            if !(i < s && s < d) {
                return bad(format!("pair ({i}, {s}) must satisfy i < s < {d}"));
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCurve {
    pub feature: usize,
    pub grid: Vec<f64>,
    pub contributions: Vec<f64>,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairHeatmap {
    pub features: (usize, usize),
    pub grid_a: Vec<f64>,
    pub grid_b: Vec<f64>,
    /// `adjusted[a][b]`: both marginal terms plus the weighted cross terms.
    /// Cross terms with other features use their values at the center.
    pub adjusted: Vec<Vec<f64>>,
    /// Cross terms of the pair only.
    pub raw: Vec<Vec<f64>>,
    /// `raw` with its row and column means removed.
    pub interaction: Vec<Vec<f64>>,
}

fn span(m: &[Vec<f64>]) -> f64 {
    let (lo, hi) = m
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

impl PairHeatmap {
    pub fn adjusted_range(&self) -> f64 {
        span(&self.adjusted)
    }

    pub fn raw_range(&self) -> f64 {
        span(&self.raw)
    }

    pub fn interaction_range(&self) -> f64 {
        span(&self.interaction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub request: ExplainRequest,
    pub weights: AttentionWeights,
    pub rank: RankReport,
    pub curves: Vec<ShapeCurve>,
    pub heatmaps: Vec<PairHeatmap>,
    pub residual_mse: f64,
}

impl Explanation {
    pub fn heatmap(&self, i: usize, s: usize) -> Option<&PairHeatmap> {
        self.heatmaps.iter().find(|h| h.features == (i, s))
    }
}

/// `n` evenly spaced points from `lo` to `hi`, both included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|t| if t == n - 1 { hi } else { lo + step * t as f64 }).collect()
}

pub fn explain_point(model: &Model, oracle: &dyn BlackBox, request: &ExplainRequest) -> Result<Explanation, ExplainError> {
    let half = request.validate(model)?;
    if oracle.dim() != model.d() {
        return Err(ExplainError::Request(format!(
            "oracle expects {} features, model has {}",
            oracle.dim(),
            model.d()
        )));
    }
    let d = model.d();
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut data = Vec::with_capacity(request.samples * d);
    for _ in 0..request.samples {
        for (c, h) in request.center.iter().zip(&half) {
            data.push(c + h * rng.random_range(-1.0..=1.0));
        }
    }
    let x = Tensor::from_vec(request.samples, d, data).expect("shape");
    let y = oracle.predict(&x)?;
    let f = model.feature_matrix(&x)?.with_bias()?;
    let (weights, rank) = solve_weights_regression(&f, &y, &request.regression)?;
    let fitted = predict(&f, &weights)?;
    let residual_mse = fitted.iter().zip(&y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64;

    let grids: Vec<Vec<f64>> = (0..d)
        .map(|i| linspace(request.center[i] - half[i], request.center[i] + half[i], request.grid_resolution))
        .collect();
    let curves = (0..d)
        .map(|i| shape_curve(model, &weights, i, &grids[i], &request.center))
        .collect::<Result<Vec<_>, _>>()?;
    let heatmaps = request
        .pairs
        .resolve(d)
        .into_iter()
        .map(|(i, s)| {
            let ga = linspace(request.center[i] - half[i], request.center[i] + half[i], request.heatmap_resolution);
            let gb = linspace(request.center[s] - half[s], request.center[s] + half[s], request.heatmap_resolution);
            pair_heatmap(model, &weights, i, s, &ga, &gb, &request.center)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Explanation {
        request: request.clone(),
        weights,
        rank,
        curves,
        heatmaps,
        residual_mse,
    })
}

fn check_feature(model: &Model, feature: usize) -> Result<(), ExplainError> {
    if feature >= model.d() {
        return Err(ExplainError::FeatureOutOfRange { feature, d: model.d() });
    }
    Ok(())
}

fn check_weights(model: &Model, weights: &AttentionWeights) -> Result<(), ExplainError> {
    let want = model.feature_width();
    if weights.w.len() != want && weights.w.len() != want + 1 {
        return Err(ExplainError::Request(format!(
            "{} weights do not match a feature matrix of width {want}",
            weights.w.len()
        )));
    }
    Ok(())
}

/// Basis values of a feature at raw feature values.
fn basis_values(model: &Model, feature: usize, grid: &[f64]) -> Result<Vec<Vec<f64>>, ExplainError> {
    let t: Vec<f64> = grid.iter().map(|&v| model.transform.apply_value(feature, v)).collect();
    Ok(model.bank.feature_basis(feature, &t)?)
}

fn combine(basis: &[Vec<f64>], w: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (b, &wj) in basis.iter().zip(w) {
        for (o, v) in out.iter_mut().zip(b) {
            *o += wj * v;
        }
    }
    out
}

/// Cross terms between `feature` (on `grid`) and every other feature except
/// `skip`, each other feature held at `center`.
fn cross_at_center(
    model: &Model,
    weights: &AttentionWeights,
    feature: usize,
    grid_basis: &[Vec<f64>],
    center: &[f64],
    skip: Option<usize>,
) -> Result<Vec<f64>, ExplainError> {
    let (k, d) = (model.k(), model.d());
    let len = grid_basis.first().map_or(0, Vec::len);
    let mut out = vec![0.0; len];
    if !model.pairwise {
        return Ok(out);
    }
    let mut at_center: Vec<Option<Vec<Vec<f64>>>> = vec![None; d];
    let singles = k * d;
    for (t, &(a, b)) in pair_layout(d, k).iter().enumerate() {
        let (fa, fb) = (a / k, b / k);
        let (own, other, other_col) = if fa == feature {
            (a % k, fb, b % k)
        } else if fb == feature {
            (b % k, fa, a % k)
        } else {
            continue;
        };
        if Some(other) == skip {
            continue;
        }
        let w = weights.w[singles + t];
        if w == 0.0 {
            continue;
        }
        if at_center[other].is_none() {
            at_center[other] = Some(basis_values(model, other, &center[other..=other])?);
        }
        let g_other = at_center[other].as_ref().expect("filled")[other_col][0];
        for (o, v) in out.iter_mut().zip(&grid_basis[own]) {
            *o += w * v * g_other;
        }
    }
    Ok(out)
}

fn marginal(
    model: &Model,
    weights: &AttentionWeights,
    feature: usize,
    grid: &[f64],
    center: &[f64],
    skip: Option<usize>,
) -> Result<Vec<f64>, ExplainError> {
    let k = model.k();
    let basis = basis_values(model, feature, grid)?;
    let mut out = combine(&basis, &weights.w[feature * k..(feature + 1) * k], grid.len());
    let cross = cross_at_center(model, weights, feature, &basis, center, skip)?;
    for (o, c) in out.iter_mut().zip(cross) {
        *o += c;
    }
    Ok(out)
}

fn check_center(model: &Model, center: &[f64]) -> Result<(), ExplainError> {
    if center.len() != model.d() {
        return Err(ExplainError::Request(format!(
            "center has {} coordinates, model has {} features",
            center.len(),
            model.d()
        )));
    }
    Ok(())
}

/// Contribution of one feature on `grid`: `Σ_j w_(i,j) g_i^j`, plus, for
/// pairwise models, its cross terms with every other feature held at
/// `center`. The bias weight is not included.
pub fn shape_curve(
    model: &Model,
    weights: &AttentionWeights,
    feature: usize,
    grid: &[f64],
    center: &[f64],
) -> Result<ShapeCurve, ExplainError> {
    check_feature(model, feature)?;
    check_weights(model, weights)?;
    check_center(model, center)?;
    if grid.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(ExplainError::Request("curve grid must be strictly increasing".into()));
    }
    let contributions = marginal(model, weights, feature, grid, center, None)?;
    let (lo, hi) = contributions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(ShapeCurve {
        feature,
        grid: grid.to_vec(),
        contributions,
        importance: if grid.is_empty() { 0.0 } else { hi - lo },
    })
}

/// Heatmaps of pair `(i, s)` over `grid_a × grid_b`, remaining features held
/// at `center`.
pub fn pair_heatmap(
    model: &Model,
    weights: &AttentionWeights,
    i: usize,
    s: usize,
    grid_a: &[f64],
    grid_b: &[f64],
    center: &[f64],
) -> Result<PairHeatmap, ExplainError> {
    if !model.pairwise {
        return Err(ExplainError::PairsUnavailable);
    }
    check_feature(model, i)?;
    check_feature(model, s)?;
    check_weights(model, weights)?;
    check_center(model, center)?;
    if i >= s {
        return Err(ExplainError::Request(format!("pair ({i}, {s}) must satisfy i < s")));
    }
    if grid_a.is_empty() || grid_b.is_empty() {
        return Err(ExplainError::Request("heatmap grids must not be empty".into()));
    }
    let ma = marginal(model, weights, i, grid_a, center, Some(s))?;
    let mb = marginal(model, weights, s, grid_b, center, Some(i))?;
    let (k, d) = (model.k(), model.d());
    let ba = basis_values(model, i, grid_a)?;
    let bb = basis_values(model, s, grid_b)?;
    let singles = k * d;
    let mut raw = vec![vec![0.0; grid_b.len()]; grid_a.len()];
    for (t, &(a, b)) in pair_layout(d, k).iter().enumerate() {
        if a / k != i || b / k != s {
            continue;
        }
        let w = weights.w[singles + t];
        let (ga, gb) = (&ba[a % k], &bb[b % k]);
        for (row, va) in raw.iter_mut().zip(ga) {
            for (cell, vb) in row.iter_mut().zip(gb) {
                *cell += w * va * vb;
            }
        }
    }
    let adjusted = raw
        .iter()
        .zip(&ma)
        .map(|(row, a)| row.iter().zip(&mb).map(|(r, b)| a + b + r).collect())
        .collect();
    Ok(PairHeatmap {
        features: (i, s),
        grid_a: grid_a.to_vec(),
        grid_b: grid_b.to_vec(),
        adjusted,
        interaction: double_center(&raw),
        raw,
    })
}

fn double_center(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (na, nb) = (m.len() as f64, m[0].len() as f64);
    let row_mean: Vec<f64> = m.iter().map(|r| r.iter().sum::<f64>() / nb).collect();
    let col_mean: Vec<f64> = (0..m[0].len()).map(|b| m.iter().map(|r| r[b]).sum::<f64>() / na).collect();
    let mean = row_mean.iter().sum::<f64>() / na;
    m.iter()
        .zip(&row_mean)
        .map(|(r, rm)| r.iter().zip(&col_mean).map(|(v, cm)| v - rm - cm + mean).collect())
        .collect()
}

/// Features by descending importance; ties go to the lower index.
pub fn rank_features(explanation: &Explanation) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = explanation.curves.iter().map(|c| (c.feature, c.importance)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::SubnetArchitecture;
    use crate::oracle::{AnalyticFunction, AnalyticOracle};
    use crate::trainer::{fit, initialize, TrainConfig};
    use crate::weighting::WeightingMethod;

    struct Affine;

    impl BlackBox for Affine {
        fn dim(&self) -> usize {
            1
        }
        fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
            Ok(x.col(0).iter().map(|v| 3.0 * v + 1.0).collect())
        }
        fn describe(&self) -> String {
            "3x+1".into()
        }
    }

    fn identity_model(d: usize, k: usize, pairwise: bool) -> Model {
        let cfg = TrainConfig {
            k,
            pairwise_enabled: pairwise,
            architecture: SubnetArchitecture {
                alpha_init: 1.0,
                ..SubnetArchitecture::default()
            },
            ..TrainConfig::default()
        };
        initialize(d, &cfg).unwrap().0
    }

    fn random_model(d: usize, k: usize, pairwise: bool, seed: u64) -> Model {
        let cfg = TrainConfig {
            k,
            pairwise_enabled: pairwise,
            seed,
            ..TrainConfig::default()
        };
        let mut model = initialize(d, &cfg).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        model.visit_params_mut(|p| p.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)));
        model
    }

    fn weights(w: Vec<f64>) -> AttentionWeights {
        AttentionWeights {
            w,
            method: WeightingMethod::LinearRegression,
            lambda: None,
        }
    }

    #[test]
    fn identity_bank_recovers_a_line() {
        let model = identity_model(1, 1, false);
        let req = ExplainRequest::new(vec![0.3], Neighborhood::cube(1, 1.0));
        let e = explain_point(&model, &Affine, &req).unwrap();
        assert!(e.residual_mse < 1e-8);
        let c = &e.curves[0];
        let offset = c.contributions[0] - 3.0 * c.grid[0];
        for (x, v) in c.grid.iter().zip(&c.contributions) {
            assert!((v - (3.0 * x + offset)).abs() < 1e-8);
        }
        assert_eq!(c.grid.len(), 101);
        assert!((c.grid[0] + 0.7).abs() < 1e-15 && (c.grid[100] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_a_zero_curve() {
        let model = random_model(2, 3, false, 1);
        let c = shape_curve(&model, &weights(vec![0.0; 7]), 1, &linspace(-1.0, 1.0, 11), &[0.0; 2]).unwrap();
        assert!(c.contributions.iter().all(|&v| v == 0.0));
        assert_eq!(c.importance, 0.0);
    }

    #[test]
    fn identity_curve_equals_grid() {
        let model = identity_model(1, 1, false);
        let grid = linspace(-2.0, 2.0, 9);
        let c = shape_curve(&model, &weights(vec![1.0]), 0, &grid, &[0.0]).unwrap();
        assert_eq!(c.contributions, grid);
    }

    #[test]
    fn curve_matches_feature_matrix_columns() {
        let model = random_model(3, 2, false, 4);
        let w: Vec<f64> = (0..7).map(|t| 0.3 * t as f64 - 1.0).collect();
        let grid = linspace(-1.5, 1.5, 25);
        let center = [0.2, -0.4, 0.9];
        let rows: Vec<Vec<f64>> = grid
            .iter()
            .map(|&v| {
                let mut r = center.to_vec();
                r[1] = v;
                r
            })
            .collect();
        let f = model.feature_matrix(&Tensor::from_rows(&rows)).unwrap();
        let c = shape_curve(&model, &weights(w.clone()), 1, &grid, &center).unwrap();
        for (r, v) in c.contributions.iter().enumerate() {
            let expected = w[2] * f.values.get(r, 2) + w[3] * f.values.get(r, 3);
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_errors() {
        let model = random_model(2, 1, false, 2);
        assert!(matches!(
            shape_curve(&model, &weights(vec![1.0; 3]), 2, &[0.0, 1.0], &[0.0; 2]),
            Err(ExplainError::FeatureOutOfRange { .. })
        ));
        assert!(shape_curve(&model, &weights(vec![1.0; 3]), 0, &[1.0, 0.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn heatmap_without_pair_weights_is_additive() {
        let model = random_model(3, 2, true, 5);
        let width = model.feature_width() + 1;
        let mut w = vec![0.0; width];
        for (t, v) in w.iter_mut().take(6).enumerate() {
            *v = 1.0 - 0.4 * t as f64;
        }
        let w = weights(w);
        let (ga, gb) = (linspace(-1.0, 1.0, 7), linspace(0.0, 2.0, 5));
        let center = [0.3, -0.2, 0.7];
        let h = pair_heatmap(&model, &w, 0, 2, &ga, &gb, &center).unwrap();
        let ca = shape_curve(&model, &w, 0, &ga, &center).unwrap();
        let cb = shape_curve(&model, &w, 2, &gb, &center).unwrap();
        for a in 0..7 {
            for b in 0..5 {
                assert_eq!(h.raw[a][b], 0.0);
                assert_eq!(h.adjusted[a][b], ca.contributions[a] + cb.contributions[b]);
            }
        }
    }

    #[test]
    fn heatmap_cross_terms_match_pair_columns() {
        let model = random_model(3, 2, true, 6);
        let width = model.feature_width() + 1;
        let w: Vec<f64> = (0..width).map(|t| ((t * 7) % 5) as f64 - 2.0).collect();
        let w = weights(w);
        let (ga, gb) = (linspace(-1.0, 1.0, 4), linspace(-0.5, 0.5, 3));
        let center = [0.1, 0.0, 0.0];
        let h = pair_heatmap(&model, &w, 1, 2, &ga, &gb, &center).unwrap();
        for a in 0..4 {
            for b in 0..3 {
                let row = [center[0], ga[a], gb[b]];
                let f = model.feature_matrix(&Tensor::from_rows(&[row])).unwrap();
                let mut expected = 0.0;
                for (c, col) in f.columns.iter().enumerate() {
                    if let crate::basis::Column::Pair { feature_a: 1, feature_b: 2, .. } = col {
                        expected += w.w[c] * f.values.get(0, c);
                    }
                }
                assert!((h.raw[a][b] - expected).abs() < 1e-12);
            }
        }
    }

    fn slice_predictions(model: &Model, w: &AttentionWeights, rows: Vec<Vec<f64>>) -> Vec<f64> {
        let f = model.feature_matrix(&Tensor::from_rows(&rows)).unwrap().with_bias().unwrap();
        predict(&f, w).unwrap()
    }

    fn assert_constant_gap(a: &[f64], b: &[f64]) {
        let gap = a[0] - b[0];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y - gap).abs() < 1e-9, "{x} vs {y} + {gap}");
        }
    }

    #[test]
    fn pairwise_curve_is_a_slice_of_the_fit() {
        let model = random_model(4, 2, true, 11);
        let width = model.feature_width() + 1;
        let w = weights((0..width).map(|t| ((t * 5) % 7) as f64 * 0.3 - 1.0).collect());
        let center = [0.4, -0.3, 0.1, 0.8];
        let grid = linspace(-1.0, 1.0, 9);
        let c = shape_curve(&model, &w, 2, &grid, &center).unwrap();
        let rows = grid
            .iter()
            .map(|&v| {
                let mut r = center.to_vec();
                r[2] = v;
                r
            })
            .collect();
        assert_constant_gap(&slice_predictions(&model, &w, rows), &c.contributions);
    }

    #[test]
    fn adjusted_heatmap_is_a_slice_of_the_fit() {
        let model = random_model(4, 2, true, 12);
        let width = model.feature_width() + 1;
        let w = weights((0..width).map(|t| ((t * 3) % 11) as f64 * 0.2 - 1.0).collect());
        let center = [0.4, -0.3, 0.1, 0.8];
        let (ga, gb) = (linspace(-1.0, 1.0, 5), linspace(-0.5, 1.5, 4));
        let h = pair_heatmap(&model, &w, 1, 3, &ga, &gb, &center).unwrap();
        let mut rows = Vec::new();
        let mut flat = Vec::new();
        for (a, &va) in ga.iter().enumerate() {
            for (b, &vb) in gb.iter().enumerate() {
                let mut r = center.to_vec();
                r[1] = va;
                r[3] = vb;
                rows.push(r);
                flat.push(h.adjusted[a][b]);
            }
        }
        assert_constant_gap(&slice_predictions(&model, &w, rows), &flat);
    }

    #[test]
    fn interaction_has_zero_margins() {
        let model = random_model(3, 2, true, 13);
        let width = model.feature_width() + 1;
        let w = weights((0..width).map(|t| (t as f64).sin()).collect());
        let (ga, gb) = (linspace(-1.0, 1.0, 6), linspace(-1.0, 1.0, 4));
        let h = pair_heatmap(&model, &w, 0, 1, &ga, &gb, &[0.0; 3]).unwrap();
        for row in &h.interaction {
            assert!(row.iter().sum::<f64>().abs() < 1e-9);
        }
        for b in 0..4 {
            assert!(h.interaction.iter().map(|r| r[b]).sum::<f64>().abs() < 1e-9);
        }
        // Removing margins keeps the raw surface's mixed differences.
        let mixed = |m: &Vec<Vec<f64>>| m[0][0] - m[0][3] - m[5][0] + m[5][3];
        assert!((mixed(&h.interaction) - mixed(&h.raw)).abs() < 1e-9);
    }

    #[test]
    fn pairs_require_a_pairwise_model() {
        let model = random_model(3, 2, false, 7);
        let w = weights(vec![0.0; 7]);
        assert!(matches!(
            pair_heatmap(&model, &w, 0, 1, &[0.0, 1.0], &[0.0, 1.0], &[0.0; 3]),
            Err(ExplainError::PairsUnavailable)
        ));
        let mut req = ExplainRequest::new(vec![0.0; 3], Neighborhood::cube(3, 0.5));
        req.pairs = PairSelection::all();
        let oracle = AnalyticOracle::new(AnalyticFunction::Product, 3).unwrap();
        assert!(matches!(explain_point(&model, &oracle, &req), Err(ExplainError::PairsUnavailable)));
    }

    #[test]
    fn request_validation() {
        let model = random_model(2, 2, false, 8);
        let oracle = AnalyticOracle::new(AnalyticFunction::Product, 2).unwrap();
        let mut req = ExplainRequest::new(vec![0.0, 0.0], Neighborhood::cube(2, 0.5));
        req.samples = 5;
        assert!(matches!(explain_point(&model, &oracle, &req), Err(ExplainError::Request(_))));
        let mut req = ExplainRequest::new(vec![0.0], Neighborhood::cube(1, 0.5));
        assert!(explain_point(&model, &oracle, &req).is_err());
        req.center = vec![0.0, 0.0];
        req.neighborhood = Neighborhood::cube(2, 0.0);
        assert!(explain_point(&model, &oracle, &req).is_err());
    }

    #[test]
    fn fraction_of_range_half_widths() {
        let n = Neighborhood::FractionOfRange {
            fraction: 0.1,
            min: vec![0.0, -5.0],
            max: vec![10.0, 5.0],
        };
        assert_eq!(n.half_widths(), vec![0.5, 0.5]);
    }

    #[test]
    fn ranking_order_and_ties() {
        let model = random_model(3, 1, false, 9);
        let oracle = AnalyticOracle::new(AnalyticFunction::Product, 3).unwrap();
        let req = ExplainRequest::new(vec![0.0; 3], Neighborhood::cube(3, 0.5));
        let mut e = explain_point(&model, &oracle, &req).unwrap();
        e.curves[0].importance = 1.0;
        e.curves[1].importance = 2.0;
        e.curves[2].importance = 1.0;
        assert_eq!(rank_features(&e), vec![(1, 2.0), (0, 1.0), (2, 1.0)]);
        e.curves.truncate(1);
        assert_eq!(rank_features(&e)[0].0, 0);
    }

    #[test]
    fn explanation_leaves_the_model_untouched_and_reports_its_residual() {
        let cfg = TrainConfig {
            batch_size: 200,
            iterations: 20,
            k: 3,
            pairwise_enabled: true,
            seed: 2,
            ..TrainConfig::default()
        };
        let oracle = AnalyticOracle::new(AnalyticFunction::Product, 2).unwrap();
        let trained = fit(&oracle, &cfg).unwrap();
        let before = serde_json::to_string(&trained.model).unwrap();
        let mut req = ExplainRequest::new(vec![0.5, 0.5], Neighborhood::cube(2, 0.5));
        req.pairs = PairSelection::all();
        req.samples = 300;
        let e = explain_point(&trained.model, &oracle, &req).unwrap();
        assert_eq!(serde_json::to_string(&trained.model).unwrap(), before);

        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let rows: Vec<Vec<f64>> = (0..req.samples)
            .map(|_| (0..2).map(|c| req.center[c] + 0.5 * rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let x = Tensor::from_rows(&rows);
        let y = oracle.predict(&x).unwrap();
        let f = trained.model.feature_matrix(&x).unwrap().with_bias().unwrap();
        let mut total = 0.0;
        for r in 0..f.rows() {
            let p: f64 = f.values.row(r).iter().zip(&e.weights.w).map(|(a, b)| a * b).sum();
            total += (p - y[r]).powi(2);
        }
        assert!((total / y.len() as f64 - e.residual_mse).abs() < 1e-12);
        assert!(e.residual_mse >= 0.0);

        let again = explain_point(&trained.model, &oracle, &req).unwrap();
        assert_eq!(again, e);
        let h = e.heatmap(0, 1).unwrap();
        assert_eq!((h.adjusted.len(), h.adjusted[0].len()), (51, 51));
    }

    #[test]
    fn pair_selection_json() {
        let all: PairSelection = serde_json::from_str(r#""all""#).unwrap();
        assert_eq!(all.resolve(3), vec![(0, 1), (0, 2), (1, 2)]);
        let list: PairSelection = serde_json::from_str("[[0, 2]]").unwrap();
        assert_eq!(list.resolve(3), vec![(0, 2)]);
    }
}
