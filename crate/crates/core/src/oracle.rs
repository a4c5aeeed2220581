//! Black-box prediction sources.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("unknown analytic function `{0}` (expected conditional, chessboard, product, wedge or quad-linear)")]
    UnknownFunction(String),
    #[error("{what} expects {expected} features, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("prediction file {path} has no rows")]
    EmptyFile { path: PathBuf },
    #[error("prediction file {path}: {detail}")]
    File { path: PathBuf, detail: String },
    #[error("command `{program}` failed: {detail}")]
    Command { program: String, detail: String },
    #[error("oracle returned a non-finite value at row {row}")]
    NonFinite { row: usize },
}

/// Anything that predicts one real per input row.
pub trait BlackBox: Send + Sync {
    fn dim(&self) -> usize;
    fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError>;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyticFunction {
    /// `I[x₁ ≥ 0]·x₀² + I[x₁ < 0]·x₀`
    Conditional,
    /// `I[(sin(x₀π/2) > 0) ≠ (sin(x₁π/2) > 0)]`
    Chessboard,
    /// `x₀·x₁`
    Product,
    /// `I[2|x₀| > |x₁|]`
    Wedge,
    /// `x₀² + 0.5·x₁`
    QuadLinear,
}

impl AnalyticFunction {
    pub const ALL: [AnalyticFunction; 5] = [
        AnalyticFunction::Conditional,
        AnalyticFunction::Chessboard,
        AnalyticFunction::Product,
        AnalyticFunction::Wedge,
        AnalyticFunction::QuadLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalyticFunction::Conditional => "conditional",
            AnalyticFunction::Chessboard => "chessboard",
            AnalyticFunction::Product => "product",
            AnalyticFunction::Wedge => "wedge",
            AnalyticFunction::QuadLinear => "quad-linear",
        }
    }

    /// Feature count used by the reference experiments.
    pub fn default_dim(self) -> usize {
        match self {
            AnalyticFunction::Chessboard | AnalyticFunction::Product | AnalyticFunction::Wedge => 5,
            AnalyticFunction::Conditional | AnalyticFunction::QuadLinear => 2,
        }
    }

    pub fn min_dim(self) -> usize {
        2
    }

    /// Value at one point; coordinates past the second are ignored.
    pub fn eval_point(self, x: &[f64]) -> f64 {
        let (x0, x1) = (x[0], x[1]);
        let indicator = |b: bool| if b { 1.0 } else { 0.0 };
        match self {
            AnalyticFunction::Conditional => {
                if x1 >= 0.0 {
                    x0 * x0
                } else {
                    x0
                }
            }
            AnalyticFunction::Chessboard => {
                indicator(((x0 * FRAC_PI_2).sin() > 0.0) != ((x1 * FRAC_PI_2).sin() > 0.0))
            }
            AnalyticFunction::Product => x0 * x1,
            AnalyticFunction::Wedge => indicator(2.0 * x0.abs() > x1.abs()),
            AnalyticFunction::QuadLinear => x0 * x0 + 0.5 * x1,
        }
    }
}

impl fmt::Display for AnalyticFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnalyticFunction {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AnalyticFunction::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| OracleError::UnknownFunction(s.to_string()))
    }
}

pub fn eval_analytic(function: AnalyticFunction, x: &Tensor) -> Result<Vec<f64>, OracleError> {
    if x.cols() < function.min_dim() {
        return Err(OracleError::Dimension {
            what: function.name().to_string(),
            expected: function.min_dim(),
            got: x.cols(),
        });
    }
    Ok((0..x.rows()).map(|r| function.eval_point(x.row(r))).collect())
}

#[derive(Debug, Clone)]
pub struct AnalyticOracle {
    pub function: AnalyticFunction,
    pub d: usize,
}

impl AnalyticOracle {
    pub fn new(function: AnalyticFunction, d: usize) -> Result<Self, OracleError> {
        if d < function.min_dim() {
            return Err(OracleError::Dimension {
                what: function.name().to_string(),
                expected: function.min_dim(),
                got: d,
            });
        }
        Ok(Self { function, d })
    }
}

impl BlackBox for AnalyticOracle {
    fn dim(&self) -> usize {
        self.d
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
        check_dim(&self.describe(), self.d, x)?;
        eval_analytic(self.function, x)
    }

    fn describe(&self) -> String {
        format!("analytic:{}", self.function)
    }
}

fn check_dim(what: &str, d: usize, x: &Tensor) -> Result<(), OracleError> {
    if x.cols() != d {
        return Err(OracleError::Dimension {
            what: what.to_string(),
            expected: d,
            got: x.cols(),
        });
    }
    Ok(())
}

/// Stored `(x, y)` rows answered by Euclidean nearest neighbour.
#[derive(Debug, Clone)]
pub struct NearestTable {
    pub path: PathBuf,
    pub x: Tensor,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    pub y: f64,
    pub distance: f64,
    pub row: usize,
}

impl NearestTable {
    pub fn new(path: impl Into<PathBuf>, x: Tensor, y: Vec<f64>) -> Result<Self, OracleError> {
        let path = path.into();
        if x.rows() == 0 {
            return Err(OracleError::EmptyFile { path });
        }
        assert_eq!(x.rows(), y.len());
        Ok(Self { path, x, y })
    }

    /// Loads `x₁..x_d, y` rows from a CSV file.
    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let (x, y) = crate::io::load_csv_dataset(path).map_err(|e| OracleError::File {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::new(path, x, y)
    }

    pub fn lookup(&self, x: &Tensor) -> Result<Vec<Lookup>, OracleError> {
        check_dim(&format!("file:{}", self.path.display()), self.x.cols(), x)?;
        Ok((0..x.rows())
            .map(|r| {
                let q = x.row(r);
                let mut best = Lookup {
                    y: self.y[0],
                    distance: f64::INFINITY,
                    row: 0,
                };
                for s in 0..self.x.rows() {
                    let d2: f64 = self.x.row(s).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 < best.distance {
                        best = Lookup {
                            y: self.y[s],
                            distance: d2,
                            row: s,
                        };
                    }
                }
                best.distance = best.distance.sqrt();
                best
            })
            .collect())
    }
}

impl BlackBox for NearestTable {
    fn dim(&self) -> usize {
        self.x.cols()
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
        Ok(self.lookup(x)?.into_iter().map(|l| l.y).collect())
    }

    fn describe(&self) -> String {
        format!("file:{}", self.path.display())
    }
}

/// External program: CSV rows on stdin, one real per line on stdout.
#[derive(Debug)]
pub struct CommandOracle {
    pub argv: Vec<String>,
    pub d: usize,
    lock: Mutex<()>,
}

impl CommandOracle {
    pub fn new(argv: Vec<String>, d: usize) -> Result<Self, OracleError> {
        if argv.is_empty() {
            return Err(OracleError::Command {
                program: String::new(),
                detail: "empty argv".into(),
            });
        }
        Ok(Self {
            argv,
            d,
            lock: Mutex::new(()),
        })
    }

    fn fail(&self, detail: impl Into<String>) -> OracleError {
        OracleError::Command {
            program: self.argv[0].clone(),
            detail: detail.into(),
        }
    }
}

impl BlackBox for CommandOracle {
    fn dim(&self) -> usize {
        self.d
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
        check_dim(&self.describe(), self.d, x)?;
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut input = String::with_capacity(x.len() * 20);
        for r in 0..x.rows() {
            let row: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
            input.push_str(&row.join(","));
            input.push('\n');
        }
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| self.fail(format!("spawn: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped");
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let output = child.wait_with_output().map_err(|e| self.fail(format!("wait: {e}")))?;
        let _ = writer.join();
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(self.fail(format!("exit status {}: {}", output.status, stderr.trim())));
        }
        let text = String::from_utf8(output.stdout).map_err(|_| self.fail("output is not UTF-8"))?;
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.parse::<f64>()
                    .map_err(|_| self.fail(format!("line {}: cannot parse `{l}` as a number", i + 1)))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != x.rows() {
            return Err(self.fail(format!("expected {} values, got {}", x.rows(), values.len())));
        }
        Ok(values)
    }

    fn describe(&self) -> String {
        format!("command:{}", self.argv.join(" "))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Nearest,
}

/// Serialized oracle description, as found in run configs and requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OracleSpec {
    Analytic {
        name: AnalyticFunction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d: Option<usize>,
    },
    File {
        path: PathBuf,
        #[serde(default)]
        interpolation: Interpolation,
    },
    Command { argv: Vec<String>, d: usize },
}

/// A built oracle.
#[derive(Debug)]
pub enum Oracle {
    Analytic(AnalyticOracle),
    File(NearestTable),
    Command(CommandOracle),
}

impl OracleSpec {
    pub fn build(&self) -> Result<Oracle, OracleError> {
        match self {
            OracleSpec::Analytic { name, d } => {
                Ok(Oracle::Analytic(AnalyticOracle::new(*name, d.unwrap_or(name.default_dim()))?))
            }
            OracleSpec::File { path, .. } => Ok(Oracle::File(NearestTable::load(path)?)),
            OracleSpec::Command { argv, d } => Ok(Oracle::Command(CommandOracle::new(argv.clone(), *d)?)),
        }
    }
}

impl Oracle {
    fn inner(&self) -> &dyn BlackBox {
        match self {
            Oracle::Analytic(o) => o,
            Oracle::File(o) => o,
            Oracle::Command(o) => o,
        }
    }
}

impl BlackBox for Oracle {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
        let y = self.inner().predict(x)?;
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite { row });
        }
        Ok(y)
    }

    fn describe(&self) -> String {
        self.inner().describe()
    }
}
