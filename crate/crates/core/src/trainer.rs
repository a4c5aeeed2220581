//! Training loop for the basis bank and the optional surrogate network.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::basis::{flatten_node_grads, pair_count, pair_layout, BankBinding, BasisBank, BasisError, FeatureMatrix, SubnetArchitecture};
use crate::linalg::SolvePath;
use crate::nn::{Activation, Adam, Mlp, MlpBinding};
use crate::oracle::{BlackBox, OracleError};
use crate::tensor::Tensor;
use crate::weighting::{weights_node, RegressionConfig, WeightingMethod, DEFAULT_RANK_TOLERANCE, DEFAULT_RIDGE};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("oracle failed on the batch of iteration {iteration}: {source}")]
    Oracle {
        iteration: usize,
        #[source]
        source: OracleError,
    },
    #[error("training aborted at iteration {iteration}: {source}")]
    Step {
        iteration: usize,
        #[source]
        source: AutodiffError,
    },
    #[error("training aborted at iteration {iteration}: non-finite loss {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error(transparent)]
    Basis(#[from] BasisError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![10; 5],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub center_stddev: f64,
    /// Half-width of the uniform sampling box per coordinate.
    pub local_radius: f64,
    pub k: usize,
    pub lambda_ridge: f64,
    pub rank_tolerance: f64,
    pub surrogate_enabled: bool,
    pub lambda_surrogate: f64,
    pub surrogate: SurrogateConfig,
    pub pairwise_enabled: bool,
    pub method: WeightingMethod,
    pub architecture: SubnetArchitecture,
    /// Standardize inputs with a per-feature affine map estimated from the
    /// sampling region before training.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            iterations: 2000,
            learning_rate: 1e-3,
            center_stddev: 1.0,
            local_radius: 0.5,
            k: 5,
            lambda_ridge: DEFAULT_RIDGE,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
            surrogate_enabled: false,
            lambda_surrogate: 1.0,
            surrogate: SurrogateConfig::default(),
            pairwise_enabled: false,
            method: WeightingMethod::LinearRegression,
            architecture: SubnetArchitecture::default(),
            standardize: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn regression(&self) -> RegressionConfig {
        RegressionConfig {
            lambda: self.lambda_ridge,
            rank_tolerance: self.rank_tolerance,
        }
    }

    /// Width of the matrix the weights are solved over.
    pub fn solve_width(&self, d: usize) -> usize {
        let pairs = if self.pairwise_enabled { pair_count(d, self.k) } else { 0 };
        self.k * d + pairs + usize::from(self.method.uses_bias())
    }

    pub fn validate(&self, d: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if d == 0 || self.k == 0 {
            return bad("feature count and k must be positive".into());
        }
        let width = self.solve_width(d);
        if self.batch_size <= width {
            return bad(format!("batch_size {} must exceed the feature-matrix width {width}", self.batch_size));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("center_stddev", self.center_stddev),
            ("local_radius", self.local_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lambda_ridge.is_finite() && self.lambda_ridge > 0.0) {
            return bad(format!("lambda_ridge must be positive, got {}", self.lambda_ridge));
        }
        if !(self.lambda_surrogate.is_finite() && self.lambda_surrogate >= 0.0) {
            return bad(format!("lambda_surrogate must be non-negative, got {}", self.lambda_surrogate));
        }
        if !(self.rank_tolerance > 0.0 && self.rank_tolerance < 1.0) {
            return bad(format!("rank_tolerance must lie in (0, 1), got {}", self.rank_tolerance));
        }
        if self.architecture.hidden.contains(&0) || self.surrogate.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn rngs(&self) -> (ChaCha8Rng, ChaCha8Rng) {
        let init = ChaCha8Rng::seed_from_u64(self.seed);
        let mut sample = ChaCha8Rng::seed_from_u64(self.seed);
        sample.set_stream(1);
        (init, sample)
    }
}

/// Per-feature `(x − shift) / scale` applied before the subnets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputTransform {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputTransform {
    pub fn identity(d: usize) -> Self {
        Self {
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Mean and standard deviation per column; constant columns keep scale 1.
    pub fn fit(x: &Tensor) -> Self {
        let n = x.rows() as f64;
        let (mut shift, mut scale) = (Vec::new(), Vec::new());
        for c in 0..x.cols() {
            let col = x.col(c);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            shift.push(mean);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { shift, scale }
    }

    pub fn is_identity(&self) -> bool {
        self.shift.iter().all(|&s| s == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }

    pub fn apply_value(&self, feature: usize, v: f64) -> f64 {
        (v - self.shift[feature]) / self.scale[feature]
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        if self.is_identity() {
            return x.clone();
        }
        let mut out = x.clone();
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                out.set(r, c, self.apply_value(c, x.get(r, c)));
            }
        }
        out
    }
}

/// Everything needed to build feature matrices: the bank, the pairwise flag,
/// the input transform and, when enabled, the surrogate network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub bank: BasisBank,
    pub pairwise: bool,
    pub transform: InputTransform,
    pub surrogate: Option<Mlp>,
}

pub(crate) struct ModelBinding {
    bank: BankBinding,
    surrogate: Option<MlpBinding>,
    /// `n × d` transformed input, fed to the surrogate.
    inputs: NodeId,
    /// Singles then pairs, without bias.
    pub features: NodeId,
}

impl Model {
    pub fn new<R: Rng>(d: usize, config: &TrainConfig, rng: &mut R) -> Self {
        let bank = BasisBank::new(d, config.k, &config.architecture, rng);
        let surrogate = config.surrogate_enabled.then(|| {
            let mut sizes = vec![d];
            sizes.extend(&config.surrogate.hidden);
            sizes.push(1);
            Mlp::new(&sizes, config.surrogate.activation, false, rng)
        });
        Self {
            bank,
            pairwise: config.pairwise_enabled,
            transform: InputTransform::identity(d),
            surrogate,
        }
    }

    pub fn d(&self) -> usize {
        self.bank.d
    }

    pub fn k(&self) -> usize {
        self.bank.k
    }

    /// Width of [`Model::feature_matrix`].
    pub fn feature_width(&self) -> usize {
        let pairs = if self.pairwise { pair_count(self.d(), self.k()) } else { 0 };
        self.bank.single_width() + pairs
    }

    pub fn parameter_count(&self) -> usize {
        self.bank.parameter_count() + self.surrogate.as_ref().map_or(0, Mlp::parameter_count)
    }

    pub(crate) fn bind(&self, g: &mut Graph, x: &Tensor) -> Result<ModelBinding, BasisError> {
        let xt = self.transform.apply(x);
        let columns = self.bank.input_columns(g, &xt)?;
        let bank = self.bank.bind(g);
        let singles = self.bank.feature_node(g, &bank, &columns);
        let features = if self.pairwise {
            let pairs = g.pair_products(singles, pair_layout(self.d(), self.k()));
            g.concat(&[singles, pairs])
        } else {
            singles
        };
        let inputs = g.input(xt);
        let surrogate = self.surrogate.as_ref().map(|s| s.bind(g));
        Ok(ModelBinding {
            bank,
            surrogate,
            inputs,
            features,
        })
    }

    /// Feature matrix (singles, then pairs when enabled), without bias.
    pub fn feature_matrix(&self, x: &Tensor) -> Result<FeatureMatrix, BasisError> {
        let fm = self.bank.feature_matrix(&self.transform.apply(x))?;
        if self.pairwise {
            fm.with_pairs()
        } else {
            Ok(fm)
        }
    }

    /// Surrogate predictions on raw inputs, if a surrogate exists.
    pub fn surrogate_predict(&self, x: &Tensor) -> Option<Vec<f64>> {
        let net = self.surrogate.as_ref()?;
        let xt = self.transform.apply(x);
        Some((0..xt.rows()).map(|r| net.eval_row(xt.row(r))[0]).collect())
    }

    /// Visits bank parameters, then surrogate parameters.
    pub fn visit_params_mut(&mut self, mut visit: impl FnMut(&mut [f64])) {
        self.bank.visit_params_mut(&mut visit);
        if let Some(s) = &mut self.surrogate {
            s.visit_params_mut(&mut visit);
        }
    }

    /// All trainable values flattened in visiting order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut copy = self.clone();
        let mut out = Vec::with_capacity(self.parameter_count());
        copy.visit_params_mut(|p| out.extend_from_slice(p));
        out
    }
}

/// Draws one batch around a random center.
pub fn sample_batch<R: Rng>(
    config: &TrainConfig,
    rng: &mut R,
    oracle: &dyn BlackBox,
) -> Result<(Tensor, Vec<f64>), OracleError> {
    let d = oracle.dim();
    let x = sample_points(config, d, rng);
    let y = oracle.predict(&x)?;
    Ok((x, y))
}

fn sample_points<R: Rng>(config: &TrainConfig, d: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, config.center_stddev).expect("finite stddev");
    let center: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let r = config.local_radius;
    let mut data = Vec::with_capacity(config.batch_size * d);
    for _ in 0..config.batch_size {
        for c in &center {
            data.push(c + r * rng.random_range(-1.0..=1.0));
        }
    }
    Tensor::from_vec(config.batch_size, d, data).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Joint loss before the update.
    pub loss: f64,
    /// `mean((F w − y)²)`.
    pub fit_mse: f64,
    /// Population variance of the batch targets.
    pub target_variance: f64,
    /// Solve path for the regression method, `None` for scorers.
    pub path: Option<SolvePath>,
}

/// Evaluates the loss on a batch and the gradient of every trainable
/// parameter, flattened like [`Model::visit_params_mut`].
pub fn loss_and_gradients(
    model: &Model,
    x: &Tensor,
    y: &[f64],
    config: &TrainConfig,
) -> Result<(StepStats, Vec<f64>), TrainError> {
    let step = |source| TrainError::Step { iteration: 0, source };
    let mut g = Graph::new();
    let b = model.bind(&mut g, x)?;
    let n = x.rows();
    let yn = g.input(Tensor::column(y.to_vec()));
    g.set_label(yn, "y");
    let f = if config.method.uses_bias() {
        let ones = g.input(Tensor::ones(n, 1));
        g.concat(&[b.features, ones])
    } else {
        b.features
    };
    let z = match (&model.surrogate, &b.surrogate) {
        (Some(net), Some(binding)) => Some(net.apply(&mut g, binding, b.inputs)),
        _ => None,
    };
    let w = weights_node(&mut g, f, z.unwrap_or(yn), config.method, &config.regression());
    g.set_label(w, "weights");
    let pred = g.matmul(f, w);
    let resid = g.sub(pred, yn);
    let sq = g.square(resid);
    let fit = g.mean(sq);
    let loss = match z {
        Some(z) => {
            let gap = g.sub(yn, z);
            let gap_sq = g.square(gap);
            let gap_mean = g.mean(gap_sq);
            let term = g.scale(gap_mean, config.lambda_surrogate);
            g.add(fit, term)
        }
        None => fit,
    };
    g.set_label(loss, "loss");
    let value = g.forward(loss).map_err(step)?.item();
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss { iteration: 0, loss: value });
    }
    let grads = g.backward(loss).map_err(step)?;
    let mut flat = Vec::with_capacity(model.parameter_count());
    model.bank.flatten_grads(&b.bank, &grads, &g, &mut flat);
    if let Some(sb) = &b.surrogate {
        flatten_node_grads(&sb.params, &grads, &g, &mut flat);
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let stats = StepStats {
        loss: value,
        fit_mse: g.value(fit).expect("evaluated").item(),
        target_variance: y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64,
        path: g.rank_report(w).map(|r| r.path_taken),
    };
    Ok((stats, flat))
}

/// One optimizer update on a batch; returns the pre-update statistics.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    x: &Tensor,
    y: &[f64],
    config: &TrainConfig,
) -> Result<StepStats, TrainError> {
    let (stats, grads) = loss_and_gradients(model, x, y, config)?;
    optimizer.begin(grads.len());
    let mut offset = 0;
    model.visit_params_mut(|p| {
        optimizer.update(offset, p, &grads[offset..offset + p.len()]);
        offset += p.len();
    });
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: WeightingMethod,
    pub losses: Vec<f64>,
    pub fit_mse: Vec<f64>,
    pub target_variance: Vec<f64>,
    pub final_loss: Option<f64>,
    pub wall_time_secs: f64,
    pub qr_steps: usize,
    pub ridge_steps: usize,
}

fn decile_mean(v: &[f64], last: bool) -> f64 {
    let m = (v.len() / 10).max(1).min(v.len());
    let part = if last { &v[v.len() - m..] } else { &v[..m] };
    part.iter().sum::<f64>() / part.len() as f64
}

impl TrainReport {
    /// Mean fit MSE over the last tenth of the run.
    pub fn final_mse(&self) -> f64 {
        decile_mean(&self.fit_mse, true)
    }

    /// Last-decile fit MSE over the last-decile mean target variance.
    pub fn final_mse_ratio(&self) -> f64 {
        self.final_mse() / decile_mean(&self.target_variance, true)
    }

    /// Last-decile mean joint loss below the first-decile mean.
    pub fn eventually_decreasing(&self) -> bool {
        !self.losses.is_empty() && decile_mean(&self.losses, true) < decile_mean(&self.losses, false)
    }
}

/// A trained model together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: Model,
    pub optimizer: Adam,
    pub report: TrainReport,
}

/// Fresh model and optimizer for `config`, plus the sampling stream.
pub fn initialize(d: usize, config: &TrainConfig) -> Result<(Model, Adam, ChaCha8Rng), TrainError> {
    config.validate(d)?;
    let (mut init, sample) = config.rngs();
    let mut model = Model::new(d, config, &mut init);
    if config.standardize {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed);
        probe_rng.set_stream(2);
        let probes: Vec<Tensor> = (0..10).map(|_| sample_points(config, d, &mut probe_rng)).collect();
        model.transform = InputTransform::fit(&Tensor::vstack(&probes.iter().collect::<Vec<_>>()));
    }
    Ok((model, Adam::new(config.learning_rate), sample))
}

/// Runs `iterations` more steps on an existing model.
pub fn train(
    model: &mut Model,
    optimizer: &mut Adam,
    rng: &mut ChaCha8Rng,
    oracle: &dyn BlackBox,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate(model.d())?;
    if oracle.dim() != model.d() {
        return Err(TrainError::Config(format!(
            "oracle expects {} features, model has {}",
            oracle.dim(),
            model.d()
        )));
    }
    let start = Instant::now();
    let mut report = TrainReport {
        method: config.method,
        losses: Vec::with_capacity(config.iterations),
        fit_mse: Vec::with_capacity(config.iterations),
        target_variance: Vec::with_capacity(config.iterations),
        final_loss: None,
        wall_time_secs: 0.0,
        qr_steps: 0,
        ridge_steps: 0,
    };
    for iteration in 0..config.iterations {
        let (x, y) = sample_batch(config, rng, oracle).map_err(|source| TrainError::Oracle { iteration, source })?;
        let stats = train_step(model, optimizer, &x, &y, config).map_err(|e| with_iteration(e, iteration))?;
        report.losses.push(stats.loss);
        report.fit_mse.push(stats.fit_mse);
        report.target_variance.push(stats.target_variance);
        match stats.path {
            Some(SolvePath::Qr) => report.qr_steps += 1,
            Some(SolvePath::Ridge) => report.ridge_steps += 1,
            None => {}
        }
    }
    report.final_loss = report.losses.last().copied();
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

fn with_iteration(e: TrainError, iteration: usize) -> TrainError {
    match e {
        TrainError::Step { source, .. } => TrainError::Step { iteration, source },
        TrainError::NonFiniteLoss { loss, .. } => TrainError::NonFiniteLoss { iteration, loss },
        other => other,
    }
}

/// Initializes from `config.seed` and trains to completion.
pub fn fit(oracle: &dyn BlackBox, config: &TrainConfig) -> Result<Trained, TrainError> {
    let (mut model, mut optimizer, mut rng) = initialize(oracle.dim(), config)?;
    let report = train(&mut model, &mut optimizer, &mut rng, oracle, config)?;
    Ok(Trained {
        model,
        optimizer,
        report,
    })
}

/// Trains one independent system per method from the same seed.
pub fn compare_weighting(
    oracle: &dyn BlackBox,
    config: &TrainConfig,
    methods: &[WeightingMethod],
) -> Result<Vec<TrainReport>, TrainError> {
    if methods.is_empty() {
        return Err(TrainError::Config("no weighting methods listed".into()));
    }
    methods
        .iter()
        .map(|&method| {
            let cfg = TrainConfig {
                method,
                ..config.clone()
            };
            fit(oracle, &cfg).map(|t| t.report)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{AnalyticFunction, AnalyticOracle};
    use crate::weighting::solve_weights;

    struct Linear0;

    impl BlackBox for Linear0 {
        fn dim(&self) -> usize {
            1
        }
        fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
            Ok(x.col(0))
        }
        fn describe(&self) -> String {
            "x0".into()
        }
    }

    fn small(iterations: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 200,
            iterations,
            k: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn quad_linear() -> AnalyticOracle {
        AnalyticOracle::new(AnalyticFunction::QuadLinear, 2).unwrap()
    }

    #[test]
    fn degenerate_box_repeats_the_center() {
        let cfg = TrainConfig {
            local_radius: 0.0,
            batch_size: 50,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = sample_batch(&cfg, &mut rng, &quad_linear()).unwrap();
        for r in 1..50 {
            assert_eq!(x.row(r), x.row(0));
            assert_eq!(y[r], y[0]);
        }
    }

    #[test]
    fn batches_are_seeded() {
        let cfg = TrainConfig::default();
        let draw = || sample_batch(&cfg, &mut ChaCha8Rng::seed_from_u64(5), &quad_linear()).unwrap();
        let (a, ya) = draw();
        let (b, yb) = draw();
        assert_eq!(a, b);
        assert_eq!(ya, yb);
        assert_eq!(a.shape(), [1000, 2]);
    }

    #[test]
    fn batches_stay_in_the_box() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, _) = sample_batch(&cfg, &mut rng, &quad_linear()).unwrap();
        for c in 0..2 {
            let col = x.col(c);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn identity_bank_fits_a_linear_oracle_exactly() {
        let cfg = TrainConfig {
            k: 1,
            batch_size: 100,
            architecture: SubnetArchitecture {
                alpha_init: 1.0,
                ..SubnetArchitecture::default()
            },
            ..TrainConfig::default()
        };
        let (mut model, mut adam, mut rng) = initialize(1, &cfg).unwrap();
        let (x, y) = sample_batch(&cfg, &mut rng, &Linear0).unwrap();
        let stats = train_step(&mut model, &mut adam, &x, &y, &cfg).unwrap();
        assert!(stats.loss < 1e-10, "{}", stats.loss);
        assert_eq!(stats.path, Some(SolvePath::Qr));
    }

    #[test]
    fn disabled_surrogate_leaves_only_the_fit_term() {
        let mut cfg = small(0);
        cfg.lambda_surrogate = 123.0;
        let (model, _, mut rng) = initialize(2, &cfg).unwrap();
        let (x, y) = sample_batch(&cfg, &mut rng, &quad_linear()).unwrap();
        let (stats, _) = loss_and_gradients(&model, &x, &y, &cfg).unwrap();
        assert_eq!(stats.loss, stats.fit_mse);
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let cfg = small(0);
        let (mut model, mut adam, mut rng) = initialize(2, &cfg).unwrap();
        let before = model.clone();
        let report = train(&mut model, &mut adam, &mut rng, &quad_linear(), &cfg).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(model, before);
        assert_eq!(report.final_loss, None);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small(15);
        let a = fit(&quad_linear(), &cfg).unwrap();
        let b = fit(&quad_linear(), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report.losses, b.report.losses);
        assert_eq!(a.report.losses.len(), 15);
    }

    #[test]
    fn single_method_comparison_matches_train() {
        let cfg = small(10);
        let traces = compare_weighting(&quad_linear(), &cfg, &[WeightingMethod::LinearRegression]).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].losses, fit(&quad_linear(), &cfg).unwrap().report.losses);
        let again = compare_weighting(&quad_linear(), &cfg, &[WeightingMethod::LinearRegression]).unwrap();
        assert_eq!(traces[0].losses, again[0].losses);
    }

    #[test]
    fn unknown_method_is_rejected() {
        assert!("softplus".parse::<WeightingMethod>().is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate(2).is_ok());
        let cfg = TrainConfig {
            batch_size: 10,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(2), Err(TrainError::Config(_))));
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        let cfg = TrainConfig {
            pairwise_enabled: true,
            batch_size: 276,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(5).is_err());
    }

    #[test]
    fn non_finite_oracle_output_aborts_with_iteration() {
        struct Blowup;
        impl BlackBox for Blowup {
            fn dim(&self) -> usize {
                2
            }
            fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
                Ok(vec![f64::NAN; x.rows()])
            }
            fn describe(&self) -> String {
                "nan".into()
            }
        }
        let err = fit(&Blowup, &small(3)).unwrap_err();
        assert!(matches!(err, TrainError::Step { iteration: 0, .. }), "{err}");
    }

    #[test]
    fn gradients_reach_every_parameter_block() {
        for seed in 0..3 {
            let cfg = TrainConfig {
                seed,
                pairwise_enabled: true,
                surrogate_enabled: true,
                ..small(0)
            };
            let (mut model, mut adam, mut rng) = initialize(2, &cfg).unwrap();
            let oracle = AnalyticOracle::new(AnalyticFunction::Conditional, 2).unwrap();
            let (x, y) = sample_batch(&cfg, &mut rng, &oracle).unwrap();
            train_step(&mut model, &mut adam, &x, &y, &cfg).unwrap();
            let (_, grads) = loss_and_gradients(&model, &x, &y, &cfg).unwrap();
            let mut offset = 0;
            model.bank.clone().visit_params_mut(|p| {
                let block = &grads[offset..offset + p.len()];
                assert!(block.iter().any(|&v| v != 0.0), "zero gradient block at offset {offset}");
                offset += p.len();
            });
            // relu units may be dead on a batch, so the surrogate is checked as a whole
            assert!(grads[offset..].iter().any(|&v| v != 0.0));
            assert_eq!(grads.len(), model.parameter_count());
        }
    }

    #[test]
    fn first_step_gradient_reaches_output_layers_and_alpha() {
        let cfg = small(0);
        let (model, _, mut rng) = initialize(2, &cfg).unwrap();
        let (x, y) = sample_batch(&cfg, &mut rng, &quad_linear()).unwrap();
        let (_, grads) = loss_and_gradients(&model, &x, &y, &cfg).unwrap();
        let sub = model.bank.subnets[0].net.parameter_count() + 1;
        for s in 0..model.bank.subnets.len() {
            let block = &grads[s * sub..(s + 1) * sub];
            // output layer: 16 weights + 1 bias, then alpha
            assert!(block[sub - 18..].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn whole_pipeline_gradients_match_finite_differences() {
        let cfg = TrainConfig {
            pairwise_enabled: true,
            surrogate_enabled: true,
            surrogate: SurrogateConfig {
                hidden: vec![4],
                activation: Activation::Tanh,
            },
            architecture: SubnetArchitecture {
                hidden: vec![4],
                ..SubnetArchitecture::default()
            },
            k: 2,
            batch_size: 60,
            ..small(0)
        };
        let (mut model, mut adam, mut rng) = initialize(2, &cfg).unwrap();
        let oracle = quad_linear();
        let (x, y) = sample_batch(&cfg, &mut rng, &oracle).unwrap();
        for _ in 0..3 {
            train_step(&mut model, &mut adam, &x, &y, &cfg).unwrap();
        }
        let (_, grads) = loss_and_gradients(&model, &x, &y, &cfg).unwrap();
        let base = model.flat_params();
        let loss_at = |params: &[f64]| {
            let mut m = model.clone();
            let mut off = 0;
            m.visit_params_mut(|p| {
                p.copy_from_slice(&params[off..off + p.len()]);
                off += p.len();
            });
            loss_and_gradients(&m, &x, &y, &cfg).unwrap().0.loss
        };
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += h;
            let up = loss_at(&p);
            p[i] -= 2.0 * h;
            let down = loss_at(&p);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grads[i]).abs() / (fd.abs().max(grads[i].abs()).max(1e-6));
            assert!(err < 1e-3 || (fd - grads[i]).abs() < 1e-8, "param {i}: analytic {} fd {fd}", grads[i]);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn converged_surrogate_gives_the_same_weights() {
        let cfg = TrainConfig {
            surrogate_enabled: true,
            ..small(0)
        };
        let (model, _, mut rng) = initialize(2, &cfg).unwrap();
        let (x, y) = sample_batch(&cfg, &mut rng, &quad_linear()).unwrap();
        let f = model.feature_matrix(&x).unwrap().with_bias().unwrap();
        let reg = cfg.regression();
        let w_y = solve_weights(&f, &y, WeightingMethod::LinearRegression, &reg).unwrap();
        let z: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + 1e-6 * ((i % 7) as f64 - 3.0)).collect();
        let w_z = solve_weights(&f, &z, WeightingMethod::LinearRegression, &reg).unwrap();
        for (a, b) in w_y.w.iter().zip(&w_z.w) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn standardization_is_recorded() {
        let cfg = TrainConfig {
            standardize: true,
            ..small(0)
        };
        let (model, _, _) = initialize(2, &cfg).unwrap();
        assert!(!model.transform.is_identity());
        assert!(model.transform.scale.iter().all(|&s| s > 0.5 && s < 2.0));
    }
}
