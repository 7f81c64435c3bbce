//! C ABI over `dpgraph`.
//!
//! Fallible functions return a [`DpgStatus`] and write results through out
//! pointers. On failure the message is available from [`dpg_last_error`] on
//! the same thread. Graphs and subgraph samples are opaque handles released
//! with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dpgraph::accountant::{calibrate_sigma, default_alpha_grid, rdp_to_dp, PrivacySpec};
use dpgraph::drop::drop_probability;
use dpgraph::graph::{generate_sbm, load_graph_dir, GraphDataset, SbmConfig};
use dpgraph::sampler::{max_occurrence, n_bound, sample_edgelists, subgraphs_from_edgelists, SamplerConfig, Subgraph};
use dpgraph::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidGraph = 3,
    Parse = 4,
    Io = 5,
    Overflow = 6,
    BudgetOverflow = 7,
    TargetUnreachable = 8,
    Runtime = 9,
    Panic = 10,
}

impl From<&Error> for DpgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::Config(_) | Error::Shape(_) => DpgStatus::InvalidArgument,
            Error::InvalidGraph(_) => DpgStatus::InvalidGraph,
            Error::Parse { .. } | Error::Json(_) => DpgStatus::Parse,
            Error::Io { .. } => DpgStatus::Io,
            Error::Overflow(_) => DpgStatus::Overflow,
            Error::BudgetOverflow { .. } => DpgStatus::BudgetOverflow,
            Error::TargetUnreachable { .. } => DpgStatus::TargetUnreachable,
            _ => DpgStatus::Runtime,
        }
    }
}

/// A loaded or generated graph dataset.
pub struct DpgGraph {
    inner: GraphDataset,
}

/// Training subgraphs from one run of constrained sampling.
pub struct DpgSubgraphs {
    subgraphs: Vec<Subgraph>,
    dropped: usize,
    n_bound: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), DpgStatus>) -> DpgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DpgStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            DpgStatus::Panic
        }
    }
}

fn fail(e: Error) -> DpgStatus {
    set_error(&e.to_string());
    DpgStatus::from(&e)
}

fn null(what: &str) -> DpgStatus {
    set_error(&format!("{what} is null"));
    DpgStatus::NullPointer
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), DpgStatus> {
    if out.is_null() {
        return Err(null(what));
    }
    unsafe { out.write(value) };
    Ok(())
}

unsafe fn graph_ref<'a>(g: *const DpgGraph) -> Result<&'a DpgGraph, DpgStatus> {
    unsafe { g.as_ref() }.ok_or_else(|| null("graph"))
}

unsafe fn subgraphs_ref<'a>(s: *const DpgSubgraphs) -> Result<&'a DpgSubgraphs, DpgStatus> {
    unsafe { s.as_ref() }.ok_or_else(|| null("subgraphs"))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn dpg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `N(K, r) = 1 + K + ... + K^r`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpg_n_bound(k: u64, r: u32, out: *mut u64) -> DpgStatus {
    guard(|| {
        let v = n_bound(k, r).map_err(fail)?;
        unsafe { write(out, v, "out") }
    })
}

/// Loads `edges.csv`, `features.csv`, `labels.csv` and `splits.csv` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpg_graph_load_dir(dir: *const c_char, has_header: bool, out: *mut *mut DpgGraph) -> DpgStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        let dir = unsafe { CStr::from_ptr(dir) }.to_str().map_err(|_| {
            set_error("dir is not valid UTF-8");
            DpgStatus::InvalidArgument
        })?;
        let (g, _) = load_graph_dir(Path::new(dir), has_header).map_err(fail)?;
        unsafe { write(out, Box::into_raw(Box::new(DpgGraph { inner: g })), "out") }
    })
}

/// Generates a stochastic block model graph.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpg_graph_generate_sbm(
    n: usize,
    num_classes: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    feature_noise: f64,
    seed: u64,
    out: *mut *mut DpgGraph,
) -> DpgStatus {
    guard(|| {
        let g = generate_sbm(&SbmConfig {
            n,
            num_classes,
            p_in,
            p_out,
            feature_dim,
            feature_noise,
            seed,
        })
        .map_err(fail)?;
        unsafe { write(out, Box::into_raw(Box::new(DpgGraph { inner: g })), "out") }
    })
}

/// # Safety
/// `g` must come from this library and not have been freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dpg_graph_free(g: *mut DpgGraph) {
    if !g.is_null() {
        drop(unsafe { Box::from_raw(g) });
    }
}

/// Node count, or 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpg_graph_num_nodes(g: *const DpgGraph) -> usize {
    unsafe { g.as_ref() }.map_or(0, |g| g.inner.num_nodes())
}

/// Edge count after deduplication, or 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpg_graph_num_edges(g: *const DpgGraph) -> usize {
    unsafe { g.as_ref() }.map_or(0, |g| g.inner.edges().len())
}

/// Training set size, or 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpg_graph_num_train(g: *const DpgGraph) -> usize {
    unsafe { g.as_ref() }.map_or(0, |g| g.inner.train_set().len())
}

/// Samples in-degree-capped edge lists and unrolls one depth-`r` tree per
/// training node.
///
/// # Safety
/// `g` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpg_sample_subgraphs(g: *const DpgGraph, k: usize, r: usize, seed: u64, out: *mut *mut DpgSubgraphs) -> DpgStatus {
    guard(|| {
        let g = unsafe { graph_ref(g) }?;
        let cfg = SamplerConfig { k, r, seed };
        let el = sample_edgelists(&g.inner, &cfg).map_err(fail)?;
        let handle = DpgSubgraphs {
            subgraphs: subgraphs_from_edgelists(&g.inner, &el, r),
            dropped: el.dropped().len(),
            n_bound: n_bound(k as u64, r as u32).map_err(fail)?,
        };
        unsafe { write(out, Box::into_raw(Box::new(handle)), "out") }
    })
}

/// # Safety
/// `s` must come from this library and not have been freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dpg_subgraphs_free(s: *mut DpgSubgraphs) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Number of subgraphs, or 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpg_subgraphs_count(s: *const DpgSubgraphs) -> usize {
    unsafe { s.as_ref() }.map_or(0, |s| s.subgraphs.len())
}

/// Summary counts of a sample.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DpgSampleStats {
    pub num_subgraphs: usize,
    pub dropped_count: usize,
    pub max_occurrence: usize,
    pub n_bound: u64,
}

/// # Safety
/// `s` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpg_subgraphs_stats(s: *const DpgSubgraphs, out: *mut DpgSampleStats) -> DpgStatus {
    guard(|| {
        let s = unsafe { subgraphs_ref(s) }?;
        let stats = DpgSampleStats {
            num_subgraphs: s.subgraphs.len(),
            dropped_count: s.dropped,
            max_occurrence: max_occurrence(&s.subgraphs).map_or(0, |o| o.count),
            n_bound: s.n_bound,
        };
        unsafe { write(out, stats, "out") }
    })
}

/// Shape of one tree.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DpgSubgraphInfo {
    pub root: usize,
    pub size: usize,
    pub depth: usize,
    pub max_fanout: usize,
}

/// # Safety
/// `s` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpg_subgraph_info(s: *const DpgSubgraphs, index: usize, out: *mut DpgSubgraphInfo) -> DpgStatus {
    guard(|| {
        let s = unsafe { subgraphs_ref(s) }?;
        let t = s.subgraphs.get(index).ok_or_else(|| {
            set_error(&format!("index {index} out of range for {} subgraphs", s.subgraphs.len()));
            DpgStatus::InvalidArgument
        })?;
        let info = DpgSubgraphInfo {
            root: t.root(),
            size: t.size(),
            depth: t.depth(),
            max_fanout: t.max_fanout(),
        };
        unsafe { write(out, info, "out") }
    })
}

fn spec(n: u64, k: u64, r: u32, m: u64, lambda: f64, t: u64, delta: f64) -> Result<PrivacySpec, DpgStatus> {
    PrivacySpec::from_lambda(n, k, r, m, lambda, t, delta, default_alpha_grid()).map_err(fail)
}

/// Epsilon after `t` steps with noise multiplier `lambda`, minimised over the
/// default order grid. `best_alpha` may be null.
///
/// # Safety
/// `epsilon` must be valid for writes; `best_alpha` null or valid.
#[no_mangle]
pub unsafe extern "C" fn dpg_epsilon(
    n: u64,
    k: u64,
    r: u32,
    m: u64,
    lambda: f64,
    t: u64,
    delta: f64,
    epsilon: *mut f64,
    best_alpha: *mut f64,
) -> DpgStatus {
    guard(|| {
        let res = rdp_to_dp(&spec(n, k, r, m, lambda, t, delta)?).map_err(fail)?;
        unsafe { write(epsilon, res.epsilon, "epsilon") }?;
        if !best_alpha.is_null() {
            unsafe { best_alpha.write(res.best_alpha) };
        }
        Ok(())
    })
}

/// Noise multiplier whose epsilon after `t` steps is within `1e-3` relative
/// of `target_epsilon`.
///
/// # Safety
/// `lambda` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpg_calibrate_noise_multiplier(
    n: u64,
    k: u64,
    r: u32,
    m: u64,
    t: u64,
    delta: f64,
    target_epsilon: f64,
    lambda: *mut f64,
) -> DpgStatus {
    guard(|| {
        let s = spec(n, k, r, m, 1.0, t, delta)?;
        let sigma = calibrate_sigma(&s, target_epsilon).map_err(fail)?;
        let nb = n_bound(k, r).map_err(fail)? as f64;
        unsafe { write(lambda, sigma / (2.0 * s.c * nb), "lambda") }
    })
}

/// Probability that a node with `d_v` training in-edges is dropped by the
/// in-degree cap `k`.
#[no_mangle]
pub extern "C" fn dpg_drop_probability(d_v: u64, k: u64) -> f64 {
    drop_probability(d_v, k)
}
