//! One-feature subnetworks and assembly of the feature matrix.
//!
//! Every feature `i` owns `k` subnetworks. Subnet `(i, j)` maps a single
//! feature value `x` to the basis value `g = (1 − α) h(x) + α x`, where `h`
//! is a small tanh network and `α` a trainable mix. Columns of the feature
//! matrix are laid out as:
//!
//! 1. singles `(i, j)`, feature-major then basis index;
//! 2. optional pair products `(i, j) ⊙ (s, l)` for `i < s`, ordered by
//!    `(i, s)` and then `(j, l)` lexicographically;
//! 3. an optional trailing all-ones bias column.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Gradients, Graph, NodeId};
use crate::nn::{Activation, Mlp, MlpBinding};
use crate::tensor::Tensor;

/// Tag stored in checkpoints; bump whenever the column layout changes.
pub const COLUMN_ORDER_VERSION: &str = "singles-feature-major/pairs-lexicographic/bias-last/v1";

pub const DEFAULT_ALPHA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BasisError {
    #[error("non-finite input at row {row}, feature {feature}")]
    NonFiniteInput { row: usize, feature: usize },
    #[error("input has {got} feature columns, bank expects {expected}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("invalid feature matrix state: {0}")]
    State(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetArchitecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub alpha_init: f64,
}

impl Default for SubnetArchitecture {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            alpha_init: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subnet {
    pub feature: usize,
    pub basis: usize,
    pub alpha: f64,
    pub net: Mlp,
}

impl Subnet {
    /// Basis values `(1 − α) h(x) + α x` for a column of feature values.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, BasisError> {
        if let Some(row) = x.iter().position(|v| !v.is_finite()) {
            return Err(BasisError::NonFiniteInput {
                row,
                feature: self.feature,
            });
        }
        let mut g = Graph::new();
        let binding = self.bind(&mut g);
        let xc = g.input(Tensor::column(x.to_vec()));
        let out = self.apply(&mut g, &binding, xc);
        Ok(g.forward(out)?.into_vec())
    }

    fn bind(&self, g: &mut Graph) -> SubnetBinding {
        SubnetBinding {
            net: self.net.bind(g),
            alpha: g.input(Tensor::scalar(self.alpha)),
        }
    }

    fn apply(&self, g: &mut Graph, binding: &SubnetBinding, x: NodeId) -> NodeId {
        let h = self.net.apply(g, &binding.net, x);
        g.shortcut(h, x, binding.alpha)
    }
}

#[derive(Debug, Clone)]
struct SubnetBinding {
    net: MlpBinding,
    alpha: NodeId,
}

/// Parameter nodes of a whole bank inside one graph.
#[derive(Debug, Clone)]
pub struct BankBinding {
    subnets: Vec<SubnetBinding>,
}

impl BankBinding {
    /// Parameter nodes in the same order as [`BasisBank::visit_params_mut`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.subnets
            .iter()
            .flat_map(|s| s.net.params.iter().copied().chain(std::iter::once(s.alpha)))
            .collect()
    }

    pub fn alpha_node(&self, subnet: usize) -> NodeId {
        self.subnets[subnet].alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisBank {
    pub d: usize,
    pub k: usize,
    pub subnets: Vec<Subnet>,
}

impl BasisBank {
    /// Fresh bank: Glorot hidden layers, zero output layers, `α = alpha_init`.
    pub fn new<R: Rng>(d: usize, k: usize, arch: &SubnetArchitecture, rng: &mut R) -> Self {
        let mut sizes = vec![1];
        sizes.extend(&arch.hidden);
        sizes.push(1);
        let subnets = (0..d)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .map(|(feature, basis)| Subnet {
                feature,
                basis,
                alpha: arch.alpha_init,
                net: Mlp::new(&sizes, arch.activation, true, rng),
            })
            .collect();
        Self { d, k, subnets }
    }

    pub fn subnet(&self, feature: usize, basis: usize) -> &Subnet {
        &self.subnets[feature * self.k + basis]
    }

    pub fn subnet_mut(&mut self, feature: usize, basis: usize) -> &mut Subnet {
        &mut self.subnets[feature * self.k + basis]
    }

    pub fn single_width(&self) -> usize {
        self.k * self.d
    }

    pub fn parameter_count(&self) -> usize {
        self.subnets.iter().map(|s| s.net.parameter_count() + 1).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BankBinding {
        BankBinding {
            subnets: self.subnets.iter().map(|s| s.bind(g)).collect(),
        }
    }

    /// Feature-matrix node from one `n × 1` input node per feature.
    pub fn feature_node(&self, g: &mut Graph, binding: &BankBinding, columns: &[NodeId]) -> NodeId {
        assert_eq!(columns.len(), self.d);
        let outs: Vec<NodeId> = self
            .subnets
            .iter()
            .zip(&binding.subnets)
            .map(|(s, b)| s.apply(g, b, columns[s.feature]))
            .collect();
        g.concat(&outs)
    }

    /// Validates `x` and feeds each of its columns into the graph.
    pub fn input_columns(&self, g: &mut Graph, x: &Tensor) -> Result<Vec<NodeId>, BasisError> {
        if x.cols() != self.d {
            return Err(BasisError::ColumnMismatch {
                expected: self.d,
                got: x.cols(),
            });
        }
        for r in 0..x.rows() {
            if let Some(feature) = x.row(r).iter().position(|v| !v.is_finite()) {
                return Err(BasisError::NonFiniteInput { row: r, feature });
            }
        }
        Ok((0..self.d).map(|c| g.input(Tensor::column(x.col(c)))).collect())
    }

    /// Base-form `n × (k·d)` feature matrix.
    pub fn feature_matrix(&self, x: &Tensor) -> Result<FeatureMatrix, BasisError> {
        let mut g = Graph::new();
        let columns = self.input_columns(&mut g, x)?;
        let binding = self.bind(&mut g);
        let f = self.feature_node(&mut g, &binding, &columns);
        let values = g.forward(f)?;
        Ok(FeatureMatrix {
            values,
            columns: single_columns(self.d, self.k),
        })
    }

    /// Basis values `g_i^j(grid)` for every `j`, as `k` vectors.
    pub fn feature_basis(&self, feature: usize, grid: &[f64]) -> Result<Vec<Vec<f64>>, BasisError> {
        (0..self.k).map(|j| self.subnet(feature, j).forward(grid)).collect()
    }

    /// Visits every trainable block: per subnet, its network then `α`.
    pub fn visit_params_mut(&mut self, mut visit: impl FnMut(&mut [f64])) {
        for s in &mut self.subnets {
            s.net.visit_params_mut(&mut visit);
            visit(std::slice::from_mut(&mut s.alpha));
        }
    }

    /// Gradients of the bound parameters, flattened in visiting order.
    pub fn flatten_grads(&self, binding: &BankBinding, grads: &Gradients, g: &Graph, out: &mut Vec<f64>) {
        flatten_node_grads(&binding.param_nodes(), grads, g, out);
    }
}

/// Appends each node's gradient (zeros when the node received none).
pub(crate) fn flatten_node_grads(nodes: &[NodeId], grads: &Gradients, g: &Graph, out: &mut Vec<f64>) {
    for &id in nodes {
        match grads.get(id) {
            Some(t) => out.extend_from_slice(t.as_slice()),
            None => {
                let len = g.value(id).map_or(0, Tensor::len);
                out.extend(std::iter::repeat_n(0.0, len));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Column {
    Single { feature: usize, basis: usize },
    Pair {
        feature_a: usize,
        basis_a: usize,
        feature_b: usize,
        basis_b: usize,
    },
    Bias,
}

pub fn single_columns(d: usize, k: usize) -> Vec<Column> {
    (0..d)
        .flat_map(|feature| (0..k).map(move |basis| Column::Single { feature, basis }))
        .collect()
}

/// `k² · d(d−1)/2`.
pub fn pair_count(d: usize, k: usize) -> usize {
    k * k * d * d.saturating_sub(1) / 2
}

/// Pairs of base-column indices multiplied into the pair block, in storage order.
pub fn pair_layout(d: usize, k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(pair_count(d, k));
    for i in 0..d {
        for s in i + 1..d {
            for j in 0..k {
                for l in 0..k {
                    out.push((i * k + j, s * k + l));
                }
            }
        }
    }
    out
}

fn pair_columns(d: usize, k: usize) -> Vec<Column> {
    pair_layout(d, k)
        .into_iter()
        .map(|(a, b)| Column::Pair {
            feature_a: a / k,
            basis_a: a % k,
            feature_b: b / k,
            basis_b: b % k,
        })
        .collect()
}

/// Full column layout for a system with the given capabilities.
pub fn column_layout(d: usize, k: usize, pairwise: bool, bias: bool) -> Vec<Column> {
    let mut cols = single_columns(d, k);
    if pairwise {
        cols.extend(pair_columns(d, k));
    }
    if bias {
        cols.push(Column::Bias);
    }
    cols
}

/// Values plus a descriptor per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor,
    pub columns: Vec<Column>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn has_bias(&self) -> bool {
        self.columns.iter().any(|c| matches!(c, Column::Bias))
    }

    pub fn has_pairs(&self) -> bool {
        self.columns.iter().any(|c| matches!(c, Column::Pair { .. }))
    }

    fn base_dims(&self) -> Result<(usize, usize), BasisError> {
        if self.has_bias() || self.has_pairs() {
            return Err(BasisError::State("pair block needs a base-form matrix"));
        }
        let d = self
            .columns
            .iter()
            .filter_map(|c| match c {
                Column::Single { feature, .. } => Some(feature + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let k = self.columns.len().checked_div(d).unwrap_or(0);
        if self.columns != single_columns(d, k) {
            return Err(BasisError::State("columns are not in feature-major order"));
        }
        Ok((d, k))
    }

    /// The pair-product block `G` of a base-form matrix.
    pub fn pair_block(&self) -> Result<FeatureMatrix, BasisError> {
        let (d, k) = self.base_dims()?;
        let layout = pair_layout(d, k);
        let n = self.rows();
        let mut values = Tensor::zeros(n, layout.len());
        for r in 0..n {
            let src = self.values.row(r);
            for (c, &(a, b)) in layout.iter().enumerate() {
                values.set(r, c, src[a] * src[b]);
            }
        }
        Ok(FeatureMatrix {
            values,
            columns: pair_columns(d, k),
        })
    }

    /// `(F, G)`.
    pub fn with_pairs(self) -> Result<FeatureMatrix, BasisError> {
        let block = self.pair_block()?;
        let mut columns = self.columns;
        columns.extend(block.columns);
        Ok(FeatureMatrix {
            values: Tensor::hstack(&[&self.values, &block.values]),
            columns,
        })
    }

    /// Appends the all-ones bias column.
    pub fn with_bias(self) -> Result<FeatureMatrix, BasisError> {
        if self.has_bias() {
            return Err(BasisError::State("bias column already present"));
        }
        let mut columns = self.columns;
        columns.push(Column::Bias);
        Ok(FeatureMatrix {
            values: Tensor::hstack(&[&self.values, &Tensor::ones(self.values.rows(), 1)]),
            columns,
        })
    }
}
