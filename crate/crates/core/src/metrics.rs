//! Resource accounting and report files.
//!
//! Peak memory comes from [`TrackingAllocator`], a counting wrapper around the
//! system allocator. A binary opts in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: edkd::TrackingAllocator = edkd::TrackingAllocator;
//! ```
//!
//! Without it, profiles are marked estimate-only.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::embed_cache::load_cache;
use crate::error::{Error, Result};
use crate::trainer::TrainingReport;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// Global allocator that tracks live bytes and their high-water mark.
pub struct TrackingAllocator;

impl TrackingAllocator {
    fn grew(size: usize) {
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(now, Ordering::Relaxed);
        if !INSTALLED.load(Ordering::Relaxed) {
            INSTALLED.store(true, Ordering::Relaxed);
        }
    }

    fn shrank(size: usize) {
        CURRENT.fetch_sub(size, Ordering::Relaxed);
    }

    pub fn is_installed() -> bool {
        INSTALLED.load(Ordering::Relaxed)
    }

    pub fn current_bytes() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Restarts the high-water mark from the current live total.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            Self::grew(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            Self::grew(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        Self::shrank(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            Self::shrank(layout.size());
            Self::grew(new_size);
        }
        p
    }
}

/// Closed-form bytes per role. Roles absent from a mode are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub student: Option<u64>,
    pub teacher: Option<u64>,
    pub projection: Option<u64>,
    pub embedding_table: Option<u64>,
}

impl MemoryBreakdown {
    pub fn total(&self) -> u64 {
        [self.student, self.teacher, self.projection, self.embedding_table]
            .into_iter()
            .flatten()
            .sum()
    }

    /// Bytes spent standing in for the teacher: the frozen model or the table.
    pub fn teacher_side(&self) -> u64 {
        self.teacher.unwrap_or(0) + self.embedding_table.unwrap_or(0)
    }
}

const F32_BYTES: u64 = 4;
/// Parameters plus two Adam moments.
const TRAINABLE_COPIES: u64 = 3;

/// Static memory estimate for a run, assuming `f32` storage:
///
/// * student: `param_count · 4 · 3` (weights and two optimizer moments),
/// * teacher (regular-kd, clip-teacher): `param_count · 4`, frozen,
/// * projection (clip modes): `D_s · D_t · 4 · 3`,
/// * embedding table (clip-embed): `N_c · D_t · 4`.
///
/// In clip-embed mode `D_t` comes from the teacher spec, or from the cache
/// header when no teacher is configured.
pub fn static_memory_estimate(config: &ExperimentConfig) -> Result<MemoryBreakdown> {
    let student = config.student_config();
    let teacher = config.teacher_config();
    let teacher_dim = match (&teacher, config.mode) {
        (Some(t), _) => Some(t.embed_dim as u64),
        (None, Mode::ClipEmbed) => {
            let path = config
                .cache_path
                .as_ref()
                .ok_or_else(|| Error::Validation("clip-embed estimate needs a teacher or cache".into()))?;
            Some(load_cache(path)?.embed_dim() as u64)
        }
        (None, _) => None,
    };
    let mut out = MemoryBreakdown {
        student: Some(student.param_count() * F32_BYTES * TRAINABLE_COPIES),
        ..Default::default()
    };
    if config.mode.needs_teacher_model() {
        let t = teacher.ok_or_else(|| Error::Validation(format!("mode {} requires a teacher", config.mode)))?;
        out.teacher = Some(t.param_count() * F32_BYTES);
    }
    if config.mode.uses_projection() {
        let dt = teacher_dim.expect("clip modes resolve a teacher dim");
        out.projection = Some(student.embed_dim as u64 * dt * F32_BYTES * TRAINABLE_COPIES);
    }
    if config.mode == Mode::ClipEmbed {
        let dt = teacher_dim.expect("clip modes resolve a teacher dim");
        out.embedding_table = Some(config.num_classes() as u64 * dt * F32_BYTES);
    }
    Ok(out)
}

/// Measured and estimated resources of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub mode: Mode,
    /// High-water mark of bytes allocated by the run above its starting
    /// baseline; `None` when the tracking allocator is not installed.
    pub peak_bytes_measured: Option<u64>,
    pub estimate_only: bool,
    pub bytes_model_params: MemoryBreakdown,
    pub wall_seconds: f64,
    pub mean_epoch_seconds: f64,
}

/// Runs `f` and records its allocation high-water mark and wall time.
pub fn measure_run<R>(
    mode: Mode,
    estimate: MemoryBreakdown,
    f: impl FnOnce() -> Result<(R, f64)>,
) -> Result<(R, ResourceProfile)> {
    let installed = TrackingAllocator::is_installed();
    let baseline = TrackingAllocator::current_bytes();
    TrackingAllocator::reset_peak();
    let start = Instant::now();
    let (out, mean_epoch_seconds) = f()?;
    let wall_seconds = start.elapsed().as_secs_f64();
    let peak = installed.then(|| TrackingAllocator::peak_bytes().saturating_sub(baseline) as u64);
    Ok((
        out,
        ResourceProfile {
            mode,
            peak_bytes_measured: peak,
            estimate_only: !installed,
            bytes_model_params: estimate,
            wall_seconds,
            mean_epoch_seconds,
        },
    ))
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub report: TrainingReport,
    pub resource_profile: ResourceProfile,
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kd: Option<f64>,
    pub loss_clip: Option<f64>,
    pub val_accuracy: f64,
    pub lr: f64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

pub fn metrics_rows(report: &TrainingReport) -> Vec<MetricsRow> {
    report
        .epochs
        .iter()
        .map(|e| MetricsRow {
            epoch: e.epoch,
            loss_total: e.losses.loss_total,
            loss_ce: e.losses.loss_ce,
            loss_kd: e.losses.loss_kd,
            loss_clip: e.losses.loss_clip,
            val_accuracy: e.val_accuracy,
            lr: e.lr,
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Writes `metrics.csv` and `report.json` into `dir`, creating it if needed.
pub fn write_report(report: &TrainingReport, profile: &ResourceProfile, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let csv_path = dir.join(METRICS_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for row in metrics_rows(report) {
        w.serialize(row).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join(REPORT_FILE);
    let run = RunReport {
        report: report.clone(),
        resource_profile: profile.clone(),
    };
    let text = serde_json::to_string_pretty(&run).expect("report serializes");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Side-by-side resource table, one row per run. `mem_ratio` is each run's
/// measured peak over the smallest measured peak in the table.
pub fn render_resource_table(runs: &[RunReport]) -> String {
    let min_peak = runs
        .iter()
        .filter_map(|r| r.resource_profile.peak_bytes_measured)
        .filter(|&p| p > 0)
        .min();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:<16} {:>9} {:>14} {:>16} {:>10} {:>10} {:>9}",
        "run", "mode", "accuracy", "peak_bytes", "teacher_side_b", "wall_s", "epoch_s", "mem_ratio"
    );
    for r in runs {
        let p = &r.resource_profile;
        let peak = p.peak_bytes_measured.map_or("n/a".to_string(), |b| b.to_string());
        let ratio = match (p.peak_bytes_measured, min_peak) {
            (Some(b), Some(m)) => format!("{:.2}x", b as f64 / m as f64),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            out,
            "{:<24} {:<16} {:>9.4} {:>14} {:>16} {:>10.3} {:>10.3} {:>9}",
            r.report.config.name,
            p.mode.as_str(),
            r.report.final_accuracy,
            peak,
            p.bytes_model_params.teacher_side(),
            p.wall_seconds,
            p.mean_epoch_seconds,
            ratio
        );
    }
    out
}
