//! Raw accelerometer logs to normalized `[3, 100]` segments.
//!
//! Stages, in order: merge duplicate timestamps, split into continuous
//! sessions, keep sessions with a stable sampling rate, trim label sessions,
//! window, split train/test, z-score with training statistics, clip and
//! rescale to `[-1, 1]`, drop flat segments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::rng::{rng_for, Stream};
use crate::segment::{DataSegment, Origin, AXES, WINDOW};
use crate::tensor::{Tensor, TensorError};

pub const GAP_THRESHOLD_MS: i64 = 300;
pub const DEFAULT_TARGET_RATES: [u32; 4] = [5, 10, 20, 50];
pub const RATE_TOLERANCE: f64 = 0.25;
pub const MIN_DURATION_MS: i64 = 30_000;
pub const TRIM_MS: i64 = 10_000;
pub const MAX_LABEL_MS: i64 = 30 * 60_000;
pub const CLIP: f64 = 2.0;
pub const FLAT_WINDOW: usize = 20;
pub const FLAT_THRESHOLD: f64 = 0.001;
pub const TEST_FRACTION: f64 = 0.15;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("points are not sorted by timestamp at index {index}")]
    Unsorted { index: usize },
    #[error("negative timestamp {0}")]
    NegativeTimestamp(i64),
    #[error("axis {axis} has zero standard deviation in the training data")]
    ZeroStd { axis: usize },
    #[error("cannot compute normalization statistics from an empty training set")]
    EmptyStats,
    #[error("overlap fraction {0} outside [0, 0.99]")]
    InvalidOverlap(f64),
    #[error("label session [{start_ms}, {end_ms}] is empty or inverted")]
    InvalidLabelSession { start_ms: i64, end_ms: i64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorPoint {
    pub timestamp: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SensorPoint {
    pub fn new(timestamp: i64, x: f64, y: f64, z: f64) -> Self {
        Self { timestamp, x, y, z }
    }

    fn axis(&self, a: usize) -> f64 {
        [self.x, self.y, self.z][a]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSession {
    pub points: Vec<SensorPoint>,
    /// Set once the session passes [`validate_rate`].
    pub rate_hz: Option<u32>,
}

impl DataSession {
    pub fn duration_ms(&self) -> i64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSession {
    pub start_ms: i64,
    pub end_ms: i64,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; AXES],
    pub std: [f64; AXES],
    pub clip_min: f64,
    pub clip_max: f64,
}

/// Replaces each run of equal timestamps with one point carrying the per-axis mean.
pub fn merge_duplicates(points: &[SensorPoint]) -> Result<Vec<SensorPoint>> {
    let mut out: Vec<SensorPoint> = Vec::with_capacity(points.len());
    let mut run = 0usize;
    for (i, p) in points.iter().enumerate() {
        if p.timestamp < 0 {
            return Err(PipelineError::NegativeTimestamp(p.timestamp));
        }
        if i > 0 && p.timestamp < points[i - 1].timestamp {
            return Err(PipelineError::Unsorted { index: i });
        }
        match out.last_mut() {
            Some(last) if last.timestamp == p.timestamp => {
                // running mean keeps the sum exact enough and avoids a second pass
                run += 1;
                let n = run as f64;
                last.x += (p.x - last.x) / n;
                last.y += (p.y - last.y) / n;
                last.z += (p.z - last.z) / n;
            }
            _ => {
                out.push(*p);
                run = 1;
            }
        }
    }
    Ok(out)
}

/// Maximal runs whose consecutive gaps are at most `gap_threshold_ms`.
pub fn split_sessions(points: &[SensorPoint], gap_threshold_ms: i64) -> Vec<DataSession> {
    let mut sessions = Vec::new();
    let mut current: Vec<SensorPoint> = Vec::new();
    for p in points {
        if let Some(last) = current.last() {
            if p.timestamp - last.timestamp > gap_threshold_ms {
                sessions.push(DataSession {
                    points: std::mem::take(&mut current),
                    rate_hz: None,
                });
            }
        }
        current.push(*p);
    }
    if !current.is_empty() {
        sessions.push(DataSession {
            points: current,
            rate_hz: None,
        });
    }
    sessions
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateRejection {
    TooFewPoints(usize),
    NonIncreasing,
    GapTooLarge { gap_ms: i64 },
    TooShort { duration_ms: i64 },
    NoMatchingRate { mean_hz: f64, median_hz: f64 },
}

impl std::fmt::Display for RateRejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TooFewPoints(n) => write!(f, "session has {n} point(s), need at least 2"),
            Self::NonIncreasing => write!(f, "timestamps are not strictly increasing"),
            Self::GapTooLarge { gap_ms } => write!(f, "gap of {gap_ms} ms exceeds {GAP_THRESHOLD_MS} ms"),
            Self::TooShort { duration_ms } => {
                write!(f, "duration {duration_ms} ms is not above {MIN_DURATION_MS} ms")
            }
            Self::NoMatchingRate { mean_hz, median_hz } => write!(
                f,
                "mean rate {mean_hz:.2} Hz / median rate {median_hz:.2} Hz match no target"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateCriteria {
    pub targets: Vec<u32>,
    pub tolerance: f64,
    pub min_duration_ms: i64,
}

impl Default for RateCriteria {
    fn default() -> Self {
        Self {
            targets: DEFAULT_TARGET_RATES.to_vec(),
            tolerance: RATE_TOLERANCE,
            min_duration_ms: MIN_DURATION_MS,
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Accepts at the first target `r` for which both the mean-gap and the
/// median-gap rates lie within `r·(1 ± tolerance)`. Never alters the points.
pub fn validate_rate(session: &DataSession, criteria: &RateCriteria) -> std::result::Result<u32, RateRejection> {
    let pts = &session.points;
    if pts.len() < 2 {
        return Err(RateRejection::TooFewPoints(pts.len()));
    }
    let mut gaps: Vec<f64> = Vec::with_capacity(pts.len() - 1);
    for w in pts.windows(2) {
        let g = w[1].timestamp - w[0].timestamp;
        if g <= 0 {
            return Err(RateRejection::NonIncreasing);
        }
        if g > GAP_THRESHOLD_MS {
            return Err(RateRejection::GapTooLarge { gap_ms: g });
        }
        gaps.push(g as f64);
    }
    let duration_ms = session.duration_ms();
    if duration_ms <= criteria.min_duration_ms {
        return Err(RateRejection::TooShort { duration_ms });
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    gaps.sort_by(f64::total_cmp);
    let median_gap = median(&gaps);
    let (mean_hz, median_hz) = (1000.0 / mean_gap, 1000.0 / median_gap);
    let within = |hz: f64, r: f64| (hz - r).abs() <= criteria.tolerance * r;
    criteria
        .targets
        .iter()
        .copied()
        .find(|&r| within(mean_hz, r as f64) && within(median_hz, r as f64))
        .ok_or(RateRejection::NoMatchingRate { mean_hz, median_hz })
}

/// Drops the first and last 10 s of every label session, discards sessions
/// with nothing left, and caps the remainder at 30 minutes.
pub fn trim_labels(labels: &[LabelSession]) -> Vec<LabelSession> {
    labels
        .iter()
        .filter_map(|l| {
            let start = l.start_ms + TRIM_MS;
            let end = l.end_ms - TRIM_MS;
            (end > start).then(|| LabelSession {
                start_ms: start,
                end_ms: end.min(start + MAX_LABEL_MS),
                label: l.label,
            })
        })
        .collect()
}

pub fn stride_for(overlap: f64) -> Result<usize> {
    if !(0.0..=0.99).contains(&overlap) {
        return Err(PipelineError::InvalidOverlap(overlap));
    }
    Ok(((WINDOW as f64 * (1.0 - overlap)).round() as usize).max(1))
}

/// Start offsets of every full window over `n` points.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    if n < window {
        return Vec::new();
    }
    (0..=n - window).step_by(stride).collect()
}

/// Windows a validated session. A window is emitted only if all of its
/// points fall inside a single label session. Values are left raw.
pub fn segment(
    session: &DataSession,
    labels: &[LabelSession],
    overlap_by_class: &BTreeMap<usize, f64>,
    stream: u64,
) -> Result<Vec<DataSegment>> {
    let rate = session.rate_hz.unwrap_or(0);
    let pts = &session.points;
    let mut out = Vec::new();
    for l in labels {
        let overlap = overlap_by_class.get(&l.label).copied().unwrap_or(0.25);
        let stride = stride_for(overlap)?;
        let lo = pts.partition_point(|p| p.timestamp < l.start_ms);
        let hi = pts.partition_point(|p| p.timestamp <= l.end_ms);
        if hi <= lo {
            continue;
        }
        for s in window_starts(hi - lo, WINDOW, stride) {
            let win = &pts[lo + s..lo + s + WINDOW];
            let mut data = Vec::with_capacity(AXES * WINDOW);
            for a in 0..AXES {
                data.extend(win.iter().map(|p| p.axis(a)));
            }
            out.push(
                DataSegment::new(Tensor::new(vec![AXES, WINDOW], data)?, l.label, rate).with_origin(Origin {
                    stream,
                    start_ms: win[0].timestamp,
                    end_ms: win[WINDOW - 1].timestamp,
                }),
            );
        }
    }
    Ok(out)
}

/// 25% overlap for the `majority` classes with the most labelled points,
/// 90% for every other class seen.
pub fn default_overlaps(points_per_class: &BTreeMap<usize, usize>, majority: usize) -> BTreeMap<usize, f64> {
    let mut ranked: Vec<(usize, usize)> = points_per_class.iter().map(|(&c, &n)| (c, n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .iter()
        .enumerate()
        .map(|(rank, &(c, _))| (c, if rank < majority { 0.25 } else { 0.90 }))
        .collect()
}

/// Per-axis mean and population standard deviation over every point of
/// every training segment.
pub fn compute_stats(train: &[DataSegment]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(PipelineError::EmptyStats);
    }
    let mut mean = [0.0; AXES];
    let mut std = [0.0; AXES];
    for a in 0..AXES {
        let n = (train.len() * WINDOW) as f64;
        let m = train.iter().map(|s| s.values.row(a).iter().sum::<f64>()).sum::<f64>() / n;
        let v = train
            .iter()
            .map(|s| s.values.row(a).iter().map(|x| (x - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        if v <= 0.0 {
            return Err(PipelineError::ZeroStd { axis: a });
        }
        mean[a] = m;
        std[a] = v.sqrt();
    }
    Ok(NormStats {
        mean,
        std,
        clip_min: -CLIP,
        clip_max: CLIP,
    })
}

/// `x = 2·[(x − min)/(max − min) − 1/2]`, mapping `[min, max]` onto `[-1, 1]`.
pub fn rescale(x: f64, min: f64, max: f64) -> f64 {
    2.0 * ((x - min) / (max - min) - 0.5)
}

/// Z-score per axis, clip, rescale.
pub fn normalize_value(x: f64, axis: usize, stats: &NormStats) -> f64 {
    let z = (x - stats.mean[axis]) / stats.std[axis];
    rescale(z.clamp(stats.clip_min, stats.clip_max), stats.clip_min, stats.clip_max)
}

pub fn normalize(seg: &DataSegment, stats: &NormStats) -> DataSegment {
    let mut out = seg.clone();
    let len = seg.values.shape()[1];
    for (a, row) in out.values.data_mut().chunks_mut(len).enumerate() {
        for v in row {
            *v = normalize_value(*v, a, stats);
        }
    }
    out
}

/// Mean over axes and length-`roll_window` windows (stride 1) of the
/// population variance.
pub fn mean_rolling_variance(seg: &DataSegment, roll_window: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..seg.values.shape()[0] {
        for w in seg.values.row(a).windows(roll_window) {
            let m = w.iter().sum::<f64>() / roll_window as f64;
            total += w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / roll_window as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn filter_flat(segments: Vec<DataSegment>, roll_window: usize, threshold: f64) -> Vec<DataSegment> {
    segments
        .into_iter()
        .filter(|s| mean_rolling_variance(s, roll_window) >= threshold)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<DataSegment>,
    pub test: Vec<DataSegment>,
    pub warnings: Vec<String>,
}

/// Stratified split. Per class, segments are ordered by origin and a
/// contiguous block of `round(n·test_fraction)` starting at a seeded offset
/// goes to test. Train segments whose source span overlaps any test segment
/// are then discarded so no raw point is shared.
pub fn split_train_test(segments: Vec<DataSegment>, test_fraction: f64, seed: u64) -> Split {
    let mut by_class: BTreeMap<usize, Vec<DataSegment>> = BTreeMap::new();
    for s in segments {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut split = Split::default();
    let mut train_candidates = Vec::new();
    for (class, mut segs) in by_class {
        if segs.len() < 2 {
            split.warnings.push(format!(
                "class {class} has {} segment(s); all assigned to train",
                segs.len()
            ));
            train_candidates.extend(segs);
            continue;
        }
        segs.sort_by_key(|s| s.origin);
        let n = segs.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 1);
        let mut rng = rng_for(seed, Stream::Split, &[class as u64]);
        let start = rng.random_range(0..=n - n_test);
        for (i, s) in segs.into_iter().enumerate() {
            if (start..start + n_test).contains(&i) {
                split.test.push(s);
            } else {
                train_candidates.push(s);
            }
        }
    }
    let test_origins: Vec<Origin> = split.test.iter().filter_map(|s| s.origin).collect();
    let before = train_candidates.len();
    split.train = train_candidates
        .into_iter()
        .filter(|s| match s.origin {
            Some(o) => !test_origins.iter().any(|t| t.overlaps(&o)),
            None => true,
        })
        .collect();
    let purged = before - split.train.len();
    if purged > 0 {
        split.warnings.push(format!(
            "{purged} train segment(s) overlapping the test split were removed"
        ));
    }
    split
}

/// One device's raw log.
#[derive(Debug, Clone, Default)]
pub struct RawClient {
    pub name: String,
    pub points: Vec<SensorPoint>,
    pub labels: Vec<LabelSession>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub rate: RateCriteria,
    pub gap_threshold_ms: i64,
    pub majority_classes: usize,
    /// Overrides the frequency-based defaults when set.
    pub overlap_by_class: Option<BTreeMap<usize, f64>>,
    pub test_fraction: f64,
    pub flat_window: usize,
    pub flat_threshold: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rate: RateCriteria::default(),
            gap_threshold_ms: GAP_THRESHOLD_MS,
            majority_classes: 3,
            overlap_by_class: None,
            test_fraction: TEST_FRACTION,
            flat_window: FLAT_WINDOW,
            flat_threshold: FLAT_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    /// Normalized training segments, indexed like the input clients.
    pub train_by_client: Vec<Vec<DataSegment>>,
    pub test: Vec<DataSegment>,
    pub stats: Option<NormStats>,
    pub sessions_total: usize,
    pub sessions_accepted: usize,
    pub dropped_flat: usize,
    pub warnings: Vec<String>,
}

/// Runs every stage over a set of clients. Normalization statistics come
/// from the pooled training split only.
pub fn run_pipeline(clients: &[RawClient], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let mut out = PipelineOutput::default();
    let mut accepted: Vec<(usize, DataSession, Vec<LabelSession>)> = Vec::new();
    let mut points_per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for (ci, client) in clients.iter().enumerate() {
        for l in &client.labels {
            if l.start_ms >= l.end_ms {
                return Err(PipelineError::InvalidLabelSession {
                    start_ms: l.start_ms,
                    end_ms: l.end_ms,
                });
            }
        }
        let mut pts = client.points.clone();
        pts.sort_by_key(|p| p.timestamp);
        let pts = merge_duplicates(&pts)?;
        let labels = trim_labels(&client.labels);
        for mut session in split_sessions(&pts, cfg.gap_threshold_ms) {
            out.sessions_total += 1;
            match validate_rate(&session, &cfg.rate) {
                Ok(r) => {
                    session.rate_hz = Some(r);
                    for l in &labels {
                        let n = session
                            .points
                            .iter()
                            .filter(|p| (l.start_ms..=l.end_ms).contains(&p.timestamp))
                            .count();
                        *points_per_class.entry(l.label).or_default() += n;
                    }
                    out.sessions_accepted += 1;
                    accepted.push((ci, session, labels.clone()));
                }
                Err(reason) => out.warnings.push(format!(
                    "client {}: session at {} ms rejected: {reason}",
                    client.name,
                    session.points.first().map_or(0, |p| p.timestamp)
                )),
            }
        }
    }
    let overlaps = cfg
        .overlap_by_class
        .clone()
        .unwrap_or_else(|| default_overlaps(&points_per_class, cfg.majority_classes));
    let mut all = Vec::new();
    for (ci, session, labels) in &accepted {
        all.extend(segment(session, labels, &overlaps, *ci as u64)?);
    }
    let split = split_train_test(all, cfg.test_fraction, cfg.seed);
    out.warnings.extend(split.warnings);
    if split.train.is_empty() {
        out.train_by_client = vec![Vec::new(); clients.len()];
        return Ok(out);
    }
    let stats = compute_stats(&split.train)?;
    let finish = |segs: Vec<DataSegment>| -> (Vec<DataSegment>, usize) {
        let normalized: Vec<DataSegment> = segs.iter().map(|s| normalize(s, &stats)).collect();
        let n = normalized.len();
        let kept = filter_flat(normalized, cfg.flat_window, cfg.flat_threshold);
        let dropped = n - kept.len();
        (kept, dropped)
    };
    let (train, d1) = finish(split.train);
    let (test, d2) = finish(split.test);
    out.dropped_flat = d1 + d2;
    out.train_by_client = vec![Vec::new(); clients.len()];
    for s in train {
        let ci = s.origin.map_or(0, |o| o.stream as usize);
        out.train_by_client[ci].push(s);
    }
    out.test = test;
    out.stats = Some(stats);
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, reason: impl std::fmt::Display) -> PipelineError {
    PipelineError::Parse {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Deserialize)]
struct PointRow {
    timestamp_ms: i64,
    x: f64,
    y: f64,
    z: f64,
}

/// CSV with header `timestamp_ms,x,y,z`.
pub fn read_points(path: &Path) -> Result<Vec<SensorPoint>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    rdr.deserialize::<PointRow>()
        .map(|r| {
            let r = r.map_err(|e| parse_err(path, e))?;
            Ok(SensorPoint::new(r.timestamp_ms, r.x, r.y, r.z))
        })
        .collect()
}

/// CSV with header `start_ms,end_ms,label`.
pub fn read_labels(path: &Path) -> Result<Vec<LabelSession>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    rdr.deserialize::<LabelSession>()
        .map(|r| r.map_err(|e| parse_err(path, e)))
        .collect()
}

/// Reads every subdirectory of `dir` holding `sensor.csv` and `labels.csv`,
/// in name order.
pub fn read_raw_dir(dir: &Path) -> Result<Vec<RawClient>> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("sensor.csv").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(parse_err(dir, "no client directories containing sensor.csv"));
    }
    subdirs
        .iter()
        .map(|d| {
            Ok(RawClient {
                name: d
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                points: read_points(&d.join("sensor.csv"))?,
                labels: read_labels(&d.join("labels.csv"))?,
            })
        })
        .collect()
}

/// Packs segments into one container: `values [N,3,100]`, `labels [N]`,
/// `rates [N]`, and `origins [N,3]` when every segment has one.
pub fn segments_to_container(segments: &[DataSegment], kind: &str) -> Container {
    let n = segments.len();
    let mut c = Container::new();
    c.set_meta("kind", kind);
    c.set_meta("count", n as u64);
    let values = segments.iter().flat_map(|s| s.values.data().iter().copied()).collect();
    c.push("values", Tensor::from_parts(vec![n, AXES, WINDOW], values));
    c.push(
        "labels",
        Tensor::from_parts(vec![n], segments.iter().map(|s| s.label as f64).collect()),
    );
    c.push(
        "rates",
        Tensor::from_parts(vec![n], segments.iter().map(|s| s.source_rate_hz as f64).collect()),
    );
    if segments.iter().all(|s| s.origin.is_some()) {
        let o = segments
            .iter()
            .flat_map(|s| {
                let o = s.origin.expect("checked above");
                [o.stream as f64, o.start_ms as f64, o.end_ms as f64]
            })
            .collect();
        c.push("origins", Tensor::from_parts(vec![n, 3], o));
    }
    c
}

pub fn segments_from_container(c: &Container) -> Result<Vec<DataSegment>> {
    let values = c.tensor("values")?;
    let labels = c.tensor("labels")?;
    let rates = c.tensor("rates")?;
    let origins = c.tensor("origins").ok();
    let n = labels.len();
    let shape_ok = values.shape() == [n, AXES, WINDOW] && rates.len() == n;
    if !shape_ok {
        return Err(TensorError::ShapeMismatch {
            op: "segment file",
            dim: "segment count",
            expected: n,
            got: values.shape().first().copied().unwrap_or(0),
        }
        .into());
    }
    let per = AXES * WINDOW;
    (0..n)
        .map(|i| {
            let v = Tensor::new(vec![AXES, WINDOW], values.data()[i * per..(i + 1) * per].to_vec())?;
            let mut s = DataSegment::new(v, labels.data()[i] as usize, rates.data()[i] as u32);
            if let Some(o) = origins {
                let r = &o.data()[i * 3..i * 3 + 3];
                s = s.with_origin(Origin {
                    stream: r[0] as u64,
                    start_ms: r[1] as i64,
                    end_ms: r[2] as i64,
                });
            }
            Ok(s)
        })
        .collect()
}

pub fn write_segments(path: &Path, segments: &[DataSegment], kind: &str) -> Result<()> {
    Ok(segments_to_container(segments, kind).write(path)?)
}

pub fn read_segments(path: &Path) -> Result<Vec<DataSegment>> {
    segments_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(t: i64, v: f64) -> SensorPoint {
        SensorPoint::new(t, v, v, v)
    }

    fn spaced(n: usize, step: i64) -> DataSession {
        DataSession {
            points: (0..n).map(|i| pt(i as i64 * step, i as f64)).collect(),
            rate_hz: None,
        }
    }

    #[test]
    fn merge_examples() {
        let out = merge_duplicates(&[pt(1, 1.0), pt(1, 3.0)]).unwrap();
        assert_eq!(out, vec![pt(1, 2.0)]);
        let ident = vec![pt(1, 1.0), pt(2, 5.0)];
        assert_eq!(merge_duplicates(&ident).unwrap(), ident);
        let three = [
            SensorPoint::new(5, 0.0, 0.0, 0.0),
            SensorPoint::new(5, 3.0, 0.0, 0.0),
            SensorPoint::new(5, 6.0, 0.0, 0.0),
        ];
        assert_eq!(merge_duplicates(&three).unwrap()[0].x, 3.0);
        assert!(matches!(
            merge_duplicates(&[pt(2, 0.0), pt(1, 0.0)]),
            Err(PipelineError::Unsorted { index: 1 })
        ));
    }

    #[test]
    fn split_examples() {
        let ts = [0, 100, 200, 700, 800];
        let pts: Vec<_> = ts.iter().map(|&t| pt(t, 0.0)).collect();
        let s = split_sessions(&pts, 300);
        assert_eq!(s.iter().map(|s| s.points.len()).collect::<Vec<_>>(), vec![3, 2]);
        assert_eq!(split_sessions(&spaced(10, 200).points, 300).len(), 1);
        assert_eq!(split_sessions(&[pt(0, 0.0)], 300)[0].points.len(), 1);
        assert!(split_sessions(&[], 300).is_empty());
        // exactly at the threshold stays together
        assert_eq!(split_sessions(&[pt(0, 0.0), pt(300, 0.0)], 300).len(), 1);
    }

    #[test]
    fn rate_examples() {
        let c = RateCriteria::default();
        assert_eq!(validate_rate(&spaced(700, 50), &c), Ok(20));
        let fast = DataSession {
            points: (0..8000).map(|i| pt((i as f64 * 7.5) as i64, 0.0)).collect(),
            rate_hz: None,
        };
        assert!(matches!(
            validate_rate(&fast, &c),
            Err(RateRejection::NoMatchingRate { .. })
        ));
        assert!(matches!(
            validate_rate(&spaced(100, 50), &c),
            Err(RateRejection::TooShort { duration_ms: 4950 })
        ));
        assert!(matches!(
            validate_rate(&spaced(1, 50), &c),
            Err(RateRejection::TooFewPoints(1))
        ));
    }

    #[test]
    fn trim_examples() {
        let l = |s, e| LabelSession {
            start_ms: s,
            end_ms: e,
            label: 0,
        };
        assert_eq!(trim_labels(&[l(0, 25_000)]), vec![l(10_000, 15_000)]);
        assert!(trim_labels(&[l(0, 15_000)]).is_empty());
        let t = trim_labels(&[l(0, 45 * 60_000)]);
        assert_eq!(t[0].end_ms - t[0].start_ms, 30 * 60_000);
    }

    #[test]
    fn segment_counts() {
        assert_eq!(stride_for(0.25).unwrap(), 75);
        assert_eq!(stride_for(0.90).unwrap(), 10);
        assert_eq!(window_starts(250, 100, 75), vec![0, 75, 150]);
        assert_eq!(window_starts(120, 100, 10), vec![0, 10, 20]);
        assert!(window_starts(99, 100, 10).is_empty());
        assert!(stride_for(1.0).is_err());

        let session = spaced(250, 50);
        let labels = [LabelSession {
            start_ms: 0,
            end_ms: 249 * 50,
            label: 1,
        }];
        let overlaps = BTreeMap::from([(1, 0.25)]);
        assert_eq!(segment(&session, &labels, &overlaps, 0).unwrap().len(), 3);
        // label session ends one point early: only windows fully inside count
        let labels = [LabelSession {
            start_ms: 0,
            end_ms: 248 * 50,
            label: 1,
        }];
        assert_eq!(segment(&session, &labels, &overlaps, 0).unwrap().len(), 2);
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale(-2.0, -2.0, 2.0), -1.0);
        assert_eq!(rescale(0.0, -2.0, 2.0), 0.0);
        assert_eq!(rescale(2.0, -2.0, 2.0), 1.0);
        assert_eq!(rescale(1.0, -2.0, 2.0), 0.5);
        let stats = NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
            clip_min: -2.0,
            clip_max: 2.0,
        };
        assert_eq!(normalize_value(5.0, 0, &stats), 1.0);
    }

    #[test]
    fn zero_std_is_an_error() {
        let s = DataSegment::new(Tensor::filled(&[3, 100], 4.0), 0, 20);
        assert!(matches!(compute_stats(&[s]), Err(PipelineError::ZeroStd { axis: 0 })));
        assert!(matches!(compute_stats(&[]), Err(PipelineError::EmptyStats)));
    }

    #[test]
    fn flat_filter_examples() {
        let flat = DataSegment::new(Tensor::zeros(&[3, 100]), 0, 20);
        let alt: Vec<f64> = (0..300).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let alt = DataSegment::new(Tensor::new(vec![3, 100], alt).unwrap(), 0, 20);
        assert!((mean_rolling_variance(&alt, 20) - 1.0).abs() < 1e-12);
        let kept = filter_flat(vec![flat, alt.clone()], 20, 0.001);
        assert_eq!(kept, vec![alt]);
    }

    fn seg_at(i: i64, label: usize) -> DataSegment {
        DataSegment::new(Tensor::zeros(&[3, 100]), label, 20).with_origin(Origin {
            stream: 0,
            start_ms: i * 10_000,
            end_ms: i * 10_000 + 4_950,
        })
    }

    #[test]
    fn split_examples_and_determinism() {
        let segs: Vec<_> = (0..100).map(|i| seg_at(i, 0)).collect();
        let s = split_train_test(segs.clone(), 0.15, 3);
        assert_eq!((s.test.len(), s.train.len()), (15, 85));
        let again = split_train_test(segs, 0.15, 3);
        assert_eq!(s.test, again.test);
        let empty = split_train_test(Vec::new(), 0.15, 3);
        assert!(empty.train.is_empty() && empty.test.is_empty());
        let lone = split_train_test(vec![seg_at(0, 4)], 0.15, 3);
        assert_eq!(lone.train.len(), 1);
        assert_eq!(lone.warnings.len(), 1);
    }

    #[test]
    fn split_purges_overlapping_neighbours() {
        // windows every 1 s, each 5 s long: neighbours overlap
        let segs: Vec<_> = (0..40)
            .map(|i| {
                DataSegment::new(Tensor::zeros(&[3, 100]), 0, 20).with_origin(Origin {
                    stream: 0,
                    start_ms: i * 1_000,
                    end_ms: i * 1_000 + 4_950,
                })
            })
            .collect();
        let s = split_train_test(segs, 0.15, 1);
        for t in &s.test {
            assert!(s.train.iter().all(|r| !r.origin.unwrap().overlaps(&t.origin.unwrap())));
        }
    }

    #[test]
    fn segment_file_round_trip() {
        let segs: Vec<_> = (0..3).map(|i| seg_at(i, i as usize)).collect();
        let c = segments_to_container(&segs, "train");
        let back = segments_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, segs);
    }
}
