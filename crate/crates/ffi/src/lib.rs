//! C interface to `afex`.
//!
//! Every function returns an [`AfexStatus`]. On failure a message describing
//! the error is kept per thread and can be fetched with
//! [`afex_last_error_message`]. Handles are opaque; each has a matching
//! `_free` function. Strings returned by the library must be released with
//! [`afex_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use afex::checkpoint::Checkpoint;
use afex::config::RunConfig;
use afex::explain::{explain_point, ExplainRequest, Explanation};
use afex::oracle::{AnalyticFunction, AnalyticOracle, BlackBox, OracleError};
use afex::trainer::{fit, TrainConfig};
use afex::Tensor;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfexStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Oracle = 5,
    Train = 6,
    Explain = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

struct Failure(AfexStatus, String);

impl Failure {
    fn new(status: AfexStatus, message: impl std::fmt::Display) -> Self {
        Failure(status, message.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> AfexStatus {
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(AfexStatus::Panic, format!("internal panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AfexStatus::Ok
        }
        Err(Failure(status, message)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
            status
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(AfexStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn string_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(AfexStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(AfexStatus::InvalidArgument, "string contains a NUL byte"))
}

/// Copy of the calling thread's last error message, or NULL if the most
/// recent call succeeded. Free with [`afex_string_free`].
#[no_mangle]
pub extern "C" fn afex_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(m) => CString::new(m.replace('\0', " ")).map_or(std::ptr::null_mut(), CString::into_raw),
        None => std::ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn afex_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A trained model with its training configuration and optimizer state.
pub struct AfexModel {
    checkpoint: Checkpoint,
}

/// A black box that can be queried and explained.
pub struct AfexOracle {
    inner: Box<dyn BlackBox>,
}

pub struct AfexExplanation {
    inner: Explanation,
}

/// Batch callback: `x` holds `rows × d` row-major inputs, and the callback
/// writes `rows` outputs to `out`. A nonzero return marks failure.
pub type AfexPredictFn =
    Option<unsafe extern "C" fn(user_data: *mut c_void, x: *const f64, rows: usize, d: usize, out: *mut f64) -> c_int>;

struct CallbackOracle {
    predict: unsafe extern "C" fn(*mut c_void, *const f64, usize, usize, *mut f64) -> c_int,
    user_data: *mut c_void,
    d: usize,
}

// The caller promises, in `afex_oracle_from_callback`, that the callback may
// be invoked from any thread.
unsafe impl Send for CallbackOracle {}
unsafe impl Sync for CallbackOracle {}

impl BlackBox for CallbackOracle {
    fn dim(&self) -> usize {
        self.d
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>, OracleError> {
        let mut out = vec![f64::NAN; x.rows()];
        let code = unsafe { (self.predict)(self.user_data, x.as_slice().as_ptr(), x.rows(), x.cols(), out.as_mut_ptr()) };
        if code != 0 {
            return Err(OracleError::Command {
                program: "callback".into(),
                detail: format!("returned status {code}"),
            });
        }
        if let Some(row) = out.iter().position(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite { row });
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("C callback on {} features", self.d)
    }
}

/// Built-in analytic function by name (`conditional`, `chessboard`,
/// `product`, `wedge`, `quad-linear`). `d = 0` selects the default dimension.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn afex_oracle_analytic(name: *const c_char, d: usize, out: *mut *mut AfexOracle) -> AfexStatus {
    guard(|| {
        non_null(out, "out")?;
        let name = string_arg(name, "name")?;
        let f: AnalyticFunction = name.parse().map_err(|e| Failure::new(AfexStatus::InvalidArgument, e))?;
        let d = if d == 0 { f.default_dim() } else { d };
        let oracle = AnalyticOracle::new(f, d).map_err(|e| Failure::new(AfexStatus::InvalidArgument, e))?;
        *out = Box::into_raw(Box::new(AfexOracle {
            inner: Box::new(oracle),
        }));
        Ok(())
    })
}

/// Oracle backed by a C function.
///
/// # Safety
/// `predict` must stay callable with `user_data` until the oracle is freed,
/// and must tolerate calls from any thread.
#[no_mangle]
pub unsafe extern "C" fn afex_oracle_from_callback(
    d: usize,
    predict: AfexPredictFn,
    user_data: *mut c_void,
    out: *mut *mut AfexOracle,
) -> AfexStatus {
    guard(|| {
        non_null(out, "out")?;
        let predict = predict.ok_or_else(|| Failure::new(AfexStatus::NullPointer, "predict is null"))?;
        if d == 0 {
            return Err(Failure::new(AfexStatus::InvalidArgument, "d must be positive"));
        }
        *out = Box::into_raw(Box::new(AfexOracle {
            inner: Box::new(CallbackOracle { predict, user_data, d }),
        }));
        Ok(())
    })
}

/// # Safety
/// `oracle` must be NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn afex_oracle_free(oracle: *mut AfexOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Evaluates `rows × d` row-major inputs into `out[rows]`.
///
/// # Safety
/// `x` must hold `rows · d` values and `out` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn afex_oracle_predict(
    oracle: *const AfexOracle,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> AfexStatus {
    guard(|| {
        non_null(oracle, "oracle")?;
        non_null(x, "x")?;
        non_null(out, "out")?;
        let o = &(*oracle).inner;
        let d = o.dim();
        let input = Tensor::from_vec(rows, d, std::slice::from_raw_parts(x, rows * d).to_vec())
            .map_err(|e| Failure::new(AfexStatus::InvalidArgument, e))?;
        let y = o.predict(&input).map_err(|e| Failure::new(AfexStatus::Oracle, e))?;
        std::slice::from_raw_parts_mut(out, rows).copy_from_slice(&y);
        Ok(())
    })
}

/// # Safety
/// `oracle` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn afex_oracle_dim(oracle: *const AfexOracle) -> usize {
    if oracle.is_null() {
        0
    } else {
        (*oracle).inner.dim()
    }
}

/// Trains on `oracle`. `config_json` is a training configuration object;
/// NULL or `"{}"` uses the defaults.
///
/// # Safety
/// Pointers must be valid; `config_json` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn afex_train(
    oracle: *const AfexOracle,
    config_json: *const c_char,
    out: *mut *mut AfexModel,
) -> AfexStatus {
    guard(|| {
        non_null(oracle, "oracle")?;
        non_null(out, "out")?;
        let config: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(string_arg(config_json, "config_json")?)
                .map_err(|e| Failure::new(AfexStatus::Parse, format!("training configuration: {e}")))?
        };
        let trained = fit(&*(*oracle).inner, &config).map_err(|e| Failure::new(AfexStatus::Train, e))?;
        *out = Box::into_raw(Box::new(AfexModel {
            checkpoint: Checkpoint::new(config, trained.model, trained.optimizer),
        }));
        Ok(())
    })
}

/// Loads a run configuration file, builds its oracle and trains.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn afex_train_from_config(path: *const c_char, out: *mut *mut AfexModel) -> AfexStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = string_arg(path, "path")?;
        let cfg = RunConfig::load(Path::new(path)).map_err(|e| Failure::new(AfexStatus::Parse, e))?;
        let oracle = cfg.oracle.build().map_err(|e| Failure::new(AfexStatus::Oracle, e))?;
        let trained = fit(&oracle, &cfg.train).map_err(|e| Failure::new(AfexStatus::Train, e))?;
        *out = Box::into_raw(Box::new(AfexModel {
            checkpoint: Checkpoint::new(cfg.train, trained.model, trained.optimizer),
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn afex_model_load(path: *const c_char, out: *mut *mut AfexModel) -> AfexStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = string_arg(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path)).map_err(|e| match e {
            afex::checkpoint::CheckpointError::Io(_) => Failure::new(AfexStatus::Io, e),
            _ => Failure::new(AfexStatus::Parse, e),
        })?;
        *out = Box::into_raw(Box::new(AfexModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a valid handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn afex_model_save(model: *const AfexModel, path: *const c_char) -> AfexStatus {
    guard(|| {
        non_null(model, "model")?;
        let path = string_arg(path, "path")?;
        (*model)
            .checkpoint
            .save(Path::new(path))
            .map_err(|e| Failure::new(AfexStatus::Io, e))
    })
}

/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn afex_model_dim(model: *const AfexModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).checkpoint.d
    }
}

/// # Safety
/// `model` must be NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn afex_model_free(model: *mut AfexModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Explains `oracle` around a point. `request_json` is an explain request
/// object (center, neighborhood, and optional settings).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn afex_explain(
    model: *const AfexModel,
    oracle: *const AfexOracle,
    request_json: *const c_char,
    out: *mut *mut AfexExplanation,
) -> AfexStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(oracle, "oracle")?;
        non_null(out, "out")?;
        let request: ExplainRequest = serde_json::from_str(string_arg(request_json, "request_json")?)
            .map_err(|e| Failure::new(AfexStatus::Parse, format!("explain request: {e}")))?;
        let e = explain_point(&(*model).checkpoint.model, &*(*oracle).inner, &request)
            .map_err(|e| Failure::new(AfexStatus::Explain, e))?;
        *out = Box::into_raw(Box::new(AfexExplanation { inner: e }));
        Ok(())
    })
}

/// Curve length for `feature`, or 0 if it is out of range.
///
/// # Safety
/// `explanation` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn afex_explanation_curve_len(explanation: *const AfexExplanation, feature: usize) -> usize {
    if explanation.is_null() {
        return 0;
    }
    let e = &*explanation;
    e.inner.curves.get(feature).map_or(0, |c| c.grid.len())
}

/// Copies the shape curve of `feature` into `grid` and `values`, each with
/// room for `capacity` entries, and its importance into `importance`.
///
/// # Safety
/// Output buffers must hold `capacity` values; `importance` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn afex_explanation_curve(
    explanation: *const AfexExplanation,
    feature: usize,
    grid: *mut f64,
    values: *mut f64,
    capacity: usize,
    importance: *mut f64,
) -> AfexStatus {
    guard(|| {
        non_null(explanation, "explanation")?;
        non_null(grid, "grid")?;
        non_null(values, "values")?;
        let curves = &(*explanation).inner.curves;
        let c = curves.get(feature).ok_or_else(|| {
            Failure::new(
                AfexStatus::InvalidArgument,
                format!("feature {feature} out of range for {} features", curves.len()),
            )
        })?;
        if capacity < c.grid.len() {
            return Err(Failure::new(
                AfexStatus::InvalidArgument,
                format!("capacity {capacity} is below the curve length {}", c.grid.len()),
            ));
        }
        std::slice::from_raw_parts_mut(grid, c.grid.len()).copy_from_slice(&c.grid);
        std::slice::from_raw_parts_mut(values, c.grid.len()).copy_from_slice(&c.contributions);
        if !importance.is_null() {
            *importance = c.importance;
        }
        Ok(())
    })
}

/// The whole explanation as JSON. Free the string with [`afex_string_free`].
///
/// # Safety
/// `explanation` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn afex_explanation_to_json(
    explanation: *const AfexExplanation,
    out: *mut *mut c_char,
) -> AfexStatus {
    guard(|| {
        non_null(explanation, "explanation")?;
        non_null(out, "out")?;
        let text = serde_json::to_string(&(*explanation).inner).map_err(|e| Failure::new(AfexStatus::Explain, e))?;
        *out = to_c_string(text)?;
        Ok(())
    })
}

/// # Safety
/// `explanation` must be NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn afex_explanation_free(explanation: *mut AfexExplanation) {
    if !explanation.is_null() {
        drop(Box::from_raw(explanation));
    }
}
