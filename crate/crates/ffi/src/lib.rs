//! C ABI over the core library: opaque graph and map handles, integer status
//! codes and a per-thread last-error message.
//!
//! Every function returns a [`SparcStatus`]. On failure the message is
//! available from [`sparc_last_error`] until the next call on the same thread.
//! Matrices cross the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{ArrayView1, ArrayView2};
use sparc::coldstart::knn;
use sparc::graph::{load_dataset, Graph};
use sparc::nn::OptimizerConfig;
use sparc::rng::SeedStreams;
use sparc::spectral_map::{train_spectral_map, SpectralMap, SpectralMapConfig};
use sparc::SparcError;

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MalformedInput = 3,
    Dimension = 4,
    Domain = 5,
    Capacity = 6,
    State = 7,
    Divergence = 8,
    Degenerate = 9,
    Invariant = 10,
    Config = 11,
    Io = 12,
    Panic = 13,
}

/// A loaded graph with node features and optional labels.
pub struct SparcGraph(Graph);

/// A trained spectral map.
pub struct SparcMap(SpectralMap);

/// Training parameters for [`sparc_map_train`]. Obtain defaults from
/// [`sparc_map_params_default`] and override fields as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SparcMapParams {
    /// Embedding dimension.
    pub k: usize,
    /// Width of each hidden layer.
    pub hidden_width: usize,
    /// Number of hidden layers.
    pub hidden_layers: usize,
    /// Nodes per training batch; must exceed `k`.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SparcError) -> SparcStatus {
    match e {
        SparcError::MalformedInput(_) => SparcStatus::MalformedInput,
        SparcError::Dimension(_) | SparcError::Shape(_) => SparcStatus::Dimension,
        SparcError::Domain(_) => SparcStatus::Domain,
        SparcError::Capacity(_) => SparcStatus::Capacity,
        SparcError::State(_) => SparcStatus::State,
        SparcError::Divergence(_) => SparcStatus::Divergence,
        SparcError::DegenerateBatch(_) | SparcError::DegenerateInput(_) => SparcStatus::Degenerate,
        SparcError::Invariant(_) => SparcStatus::Invariant,
        SparcError::Config(_) => SparcStatus::Config,
        SparcError::Io(_) | SparcError::Json(_) => SparcStatus::Io,
    }
}

struct Failure(SparcStatus, String);

impl From<SparcError> for Failure {
    fn from(e: SparcError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SparcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SparcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SparcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SparcStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(SparcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn matrix_arg<'a>(data: *const f64, rows: usize, cols: usize) -> Result<ArrayView2<'a, f64>, Failure> {
    if data.is_null() {
        return Err(null("matrix data"));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(SparcStatus::InvalidArgument, "matrix size overflows".into()))?;
    ArrayView2::from_shape((rows, cols), std::slice::from_raw_parts(data, len))
        .map_err(|e| Failure(SparcStatus::Dimension, e.to_string()))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn sparc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a graph from an edge file, a feature file and an optional labels
/// file (pass null to skip).
///
/// # Safety
/// Path arguments must be null or NUL-terminated strings; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn sparc_graph_load(
    edges: *const c_char,
    features: *const c_char,
    labels: *const c_char,
    out: *mut *mut SparcGraph,
) -> SparcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let edges = path_arg(edges, "edges path")?;
        let features = path_arg(features, "features path")?;
        let labels = if labels.is_null() { None } else { Some(path_arg(labels, "labels path")?) };
        let g = load_dataset(&edges, &features, labels.as_deref())?;
        *out = Box::into_raw(Box::new(SparcGraph(g)));
        Ok(())
    })
}

/// Writes the node count and feature dimension of `graph`.
///
/// # Safety
/// `graph` must come from [`sparc_graph_load`]; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sparc_graph_shape(
    graph: *const SparcGraph,
    nodes: *mut usize,
    feature_dim: *mut usize,
) -> SparcStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        if nodes.is_null() || feature_dim.is_null() {
            return Err(null("output"));
        }
        *nodes = g.0.node_count();
        *feature_dim = g.0.feature_dim();
        Ok(())
    })
}

/// Releases a graph. Null is ignored.
///
/// # Safety
/// `graph` must be null or come from [`sparc_graph_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sparc_graph_free(graph: *mut SparcGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Default training parameters.
#[no_mangle]
pub extern "C" fn sparc_map_params_default() -> SparcMapParams {
    let d = SpectralMapConfig::desk_defaults();
    SparcMapParams {
        k: d.k,
        hidden_width: d.hidden[0],
        hidden_layers: d.hidden.len(),
        batch_size: d.batch_size,
        epochs: d.epochs,
        learning_rate: d.optimizer.learning_rate,
        seed: 0,
    }
}

/// Trains a spectral map on the whole graph.
///
/// # Safety
/// `graph` must come from [`sparc_graph_load`]; `params` must be readable and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sparc_map_train(
    graph: *const SparcGraph,
    params: *const SparcMapParams,
    out: *mut *mut SparcMap,
) -> SparcStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let defaults = SpectralMapConfig::desk_defaults();
        let cfg = SpectralMapConfig {
            k: p.k,
            hidden: vec![p.hidden_width; p.hidden_layers],
            batch_size: p.batch_size,
            epochs: p.epochs,
            optimizer: OptimizerConfig { learning_rate: p.learning_rate, ..defaults.optimizer },
            ..defaults
        };
        cfg.validate(g.0.node_count())?;
        let (map, _) = train_spectral_map(&g.0, &cfg, &SeedStreams::new(p.seed))?;
        *out = Box::into_raw(Box::new(SparcMap(map)));
        Ok(())
    })
}

/// Loads a map checkpoint written by [`sparc_map_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sparc_map_load(path: *const c_char, out: *mut *mut SparcMap) -> SparcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let map = SpectralMap::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SparcMap(map)));
        Ok(())
    })
}

/// Writes a map checkpoint.
///
/// # Safety
/// `map` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sparc_map_save(map: *const SparcMap, path: *const c_char) -> SparcStatus {
    guard(|| {
        let m = map.as_ref().ok_or_else(|| null("map"))?;
        m.0.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Writes the feature dimension the map expects and its embedding dimension.
///
/// # Safety
/// `map` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sparc_map_shape(map: *const SparcMap, input_dim: *mut usize, k: *mut usize) -> SparcStatus {
    guard(|| {
        let m = map.as_ref().ok_or_else(|| null("map"))?;
        if input_dim.is_null() || k.is_null() {
            return Err(null("output"));
        }
        *input_dim = m.0.input_dim();
        *k = m.0.k();
        Ok(())
    })
}

/// Embeds `rows` feature vectors of width `cols` into `out`, which must hold
/// `rows * k` doubles. Works for nodes the map never saw, edges or not.
///
/// # Safety
/// `features` must hold `rows * cols` doubles and `out` `rows * k`.
#[no_mangle]
pub unsafe extern "C" fn sparc_map_embed(
    map: *const SparcMap,
    features: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> SparcStatus {
    guard(|| {
        let m = map.as_ref().ok_or_else(|| null("map"))?;
        let x = matrix_arg(features, rows, cols)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let emb = m.0.embed(x)?;
        let dst = std::slice::from_raw_parts_mut(out, rows * m.0.k());
        for (d, v) in dst.iter_mut().zip(emb.values.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Releases a map. Null is ignored.
///
/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sparc_map_free(map: *mut SparcMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Exact Euclidean k nearest neighbors of `query` among the `rows` pool
/// vectors, ascending by distance with ties broken by lower index.
///
/// # Safety
/// `pool` must hold `rows * cols` doubles, `query` `cols`, and both outputs `k`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn sparc_knn(
    pool: *const f64,
    rows: usize,
    cols: usize,
    query: *const f64,
    k: usize,
    out_ids: *mut usize,
    out_distances: *mut f64,
) -> SparcStatus {
    guard(|| {
        let p = matrix_arg(pool, rows, cols)?;
        if query.is_null() || out_ids.is_null() || out_distances.is_null() {
            return Err(null("query or output"));
        }
        let q = ArrayView1::from(std::slice::from_raw_parts(query, cols));
        let found = knn(p, q, k)?;
        for (i, n) in found.iter().enumerate() {
            *out_ids.add(i) = n.id;
            *out_distances.add(i) = n.distance;
        }
        Ok(())
    })
}
