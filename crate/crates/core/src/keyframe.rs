//! Keyframe selection: gray histograms, k-means with the cluster count picked
//! by scaled inertia, and the sharpest (highest Laplacian variance) frame of
//! each cluster.

use std::ops::RangeInclusive;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pipeline::{Pipe, PipeError};
use crate::window::{keys, DataWindow, FrameRef, ImageBuffer, InferenceSlot, SlotPayload};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyframeError {
    #[error("zero-area image")]
    ZeroArea,
    #[error("image {width}x{height} is smaller than the 3x3 kernel")]
    TooSmall { width: u32, height: u32 },
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("points have mixed dimensions")]
    Dimension,
    #[error("k range {lo}..={hi} is invalid for {n} points")]
    InvalidRange { lo: usize, hi: usize, n: usize },
    #[error("alpha must be positive, got {0}")]
    Alpha(f64),
    #[error("window has no frames")]
    NoFrames,
    #[error("frame {0}: {1}")]
    Image(u64, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramVector {
    pub bins: Vec<f64>,
    pub normalized: bool,
    pub source: Option<FrameRef>,
}

impl HistogramVector {
    /// L1-normalized copy (bins sum to 1).
    pub fn normalize(&self) -> HistogramVector {
        let total: f64 = self.bins.iter().sum();
        let bins = if total > 0.0 {
            self.bins.iter().map(|b| b / total).collect()
        } else {
            self.bins.clone()
        };
        HistogramVector {
            bins,
            normalized: true,
            source: self.source.clone(),
        }
    }
}

/// 256-bin count histogram of the luma channel.
pub fn gray_histogram(image: &ImageBuffer) -> Result<HistogramVector, KeyframeError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(KeyframeError::ZeroArea);
    }
    let mut bins = vec![0.0; 256];
    for y in 0..image.height() {
        for x in 0..image.width() {
            bins[image.luma(x, y) as usize] += 1.0;
        }
    }
    Ok(HistogramVector {
        bins,
        normalized: false,
        source: None,
    })
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance(image: &ImageBuffer) -> Result<f64, KeyframeError> {
    let (w, h) = (image.width(), image.height());
    if w < 3 || h < 3 {
        return Err(KeyframeError::TooSmall { width: w, height: h });
    }
    let px = |x: u32, y: u32| image.luma(x, y) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let r = px(x, y - 1) + px(x - 1, y) + px(x + 1, y) + px(x, y + 1) - 4.0 * px(x, y);
            sum += r;
            sum_sq += r * r;
            n += 1.0;
        }
    }
    let mean = sum / n;
    Ok((sum_sq / n - mean * mean).max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each centroid update.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Nearest centroid, keeping `current` when it ties for nearest.
fn reassign(point: &[f64], centroids: &[Vec<f64>], current: usize) -> usize {
    let best = nearest(point, centroids);
    if sq_dist(point, &centroids[current]) <= sq_dist(point, &centroids[best]) {
        current
    } else {
        best
    }
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    sums
}

pub fn inertia(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<(), KeyframeError> {
    if k < 1 || k > points.len() {
        return Err(KeyframeError::InvalidK { k, n: points.len() });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(KeyframeError::Dimension);
    }
    Ok(())
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d <= 0.0 {
                    continue;
                }
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            if d2[idx] <= 0.0 {
                // rounding ran past the end; take the last positive weight
                idx = d2.iter().rposition(|d| *d > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            // every point coincides with a centroid; any unused index works
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.gen_range(0..unused.len())]
        };
        chosen.push(pick);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Gives every empty cluster the point farthest from the centroid of the
/// currently largest cluster.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if assignments[i] == largest {
                let d = sq_dist(p, &centroids[largest]);
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        assignments[far.expect("largest cluster is non-empty")] = empty;
    }
}

/// Relative inertia gain below which Lloyd iterations stop. Duplicate points
/// otherwise let rounding in the means shuffle them between equal centroids.
const CONVERGENCE_TOL: f64 = 1e-12;

/// One seeded k-means++ / Lloyd run to an assignment fixpoint, a stalled
/// inertia or `max_iters`.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<ClusteringResult, KeyframeError> {
    check_points(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = seed_plus_plus(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &seeds)).collect();
    repair_empty(points, &mut assignments, &seeds, k);
    let mut centroids = means(points, &assignments, k);
    let mut history = vec![inertia(points, &assignments, &centroids)];
    for _ in 1..max_iters.max(1) {
        let mut next: Vec<usize> = points.iter().zip(&assignments).map(|(p, &a)| reassign(p, &centroids, a)).collect();
        if next == assignments {
            break;
        }
        repair_empty(points, &mut next, &centroids, k);
        let next_centroids = means(points, &next, k);
        let h = inertia(points, &next, &next_centroids);
        let last = *history.last().unwrap();
        if h > last {
            // rounding noise only; keep the previous state
            break;
        }
        assignments = next;
        centroids = next_centroids;
        history.push(h);
        if last - h <= CONVERGENCE_TOL * last {
            break;
        }
    }
    Ok(ClusteringResult {
        k,
        assignments,
        centroids,
        inertia: *history.last().unwrap(),
        history,
    })
}

/// Best of `restarts` seeded runs by inertia; ties keep the earliest run.
pub fn kmeans_restarts(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusteringResult, KeyframeError> {
    let mut best: Option<ClusteringResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(points, k, max_iters, seed.wrapping_mul(1_000_003).wrapping_add(r as u64))?;
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KChoice {
    pub k: usize,
    pub curve: Vec<(usize, f64)>,
    pub clustering: ClusteringResult,
}

/// Scaled inertia `inertia(k) / inertia(1) + alpha * k`, minimized over
/// `k_range`; ties go to the smaller k.
pub fn choose_k(
    points: &[Vec<f64>],
    k_range: RangeInclusive<usize>,
    alpha: f64,
    opts: KMeansOptions,
) -> Result<KChoice, KeyframeError> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo < 1 || hi < lo || hi > points.len() {
        return Err(KeyframeError::InvalidRange { lo, hi, n: points.len() });
    }
    if !(alpha > 0.0) {
        return Err(KeyframeError::Alpha(alpha));
    }
    let run = |k: usize| kmeans_restarts(points, k, opts.max_iters, opts.seed.wrapping_add(k as u64), opts.restarts);
    let base = run(1)?;
    if base.inertia == 0.0 {
        let chosen = run(lo)?;
        return Ok(KChoice {
            k: 1.max(lo),
            curve: vec![(lo, alpha * lo as f64)],
            clustering: chosen,
        });
    }
    let mut curve = Vec::new();
    let mut best: Option<(f64, ClusteringResult)> = None;
    for k in k_range {
        let result = if k == 1 { base.clone() } else { run(k)? };
        let scaled = result.inertia / base.inertia + alpha * k as f64;
        curve.push((k, scaled));
        if best.as_ref().map_or(true, |(s, _)| scaled < *s) {
            best = Some((scaled, result));
        }
    }
    let (_, clustering) = best.unwrap();
    Ok(KChoice {
        k: clustering.k,
        curve,
        clustering,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeConfig {
    pub alpha: f64,
    pub max_k: usize,
    pub kmeans: KMeansOptions,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            max_k: 25,
            kmeans: KMeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame: FrameRef,
    pub cluster: usize,
    pub laplacian_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSelection {
    /// One per cluster, ordered by frame index.
    pub keyframes: Vec<Keyframe>,
    pub chosen_k: usize,
    pub scaled_inertia_curve: Vec<(usize, f64)>,
}

/// Picks keyframes among decoded frames.
pub fn select_keyframes_from(
    frames: &[(FrameRef, Arc<ImageBuffer>)],
    config: &KeyframeConfig,
) -> Result<KeyframeSelection, KeyframeError> {
    if frames.is_empty() {
        return Err(KeyframeError::NoFrames);
    }
    let mut points = Vec::with_capacity(frames.len());
    let mut sharpness = Vec::with_capacity(frames.len());
    for (fr, img) in frames {
        let wrap = |e: KeyframeError| KeyframeError::Image(fr.frame_index, e.to_string());
        points.push(gray_histogram(img).map_err(wrap)?.normalize().bins);
        // frames too small for the kernel count as fully blurred
        sharpness.push(laplacian_variance(img).unwrap_or(0.0));
    }
    let hi = config.max_k.max(1).min(points.len());
    let choice = choose_k(&points, 1..=hi, config.alpha, config.kmeans)?;
    let mut best: Vec<Option<usize>> = vec![None; choice.k];
    for (i, &c) in choice.clustering.assignments.iter().enumerate() {
        let better = match best[c] {
            None => true,
            Some(j) => {
                sharpness[i] > sharpness[j]
                    || (sharpness[i] == sharpness[j] && frames[i].0.frame_index < frames[j].0.frame_index)
            }
        };
        if better {
            best[c] = Some(i);
        }
    }
    let mut keyframes: Vec<Keyframe> = best
        .into_iter()
        .enumerate()
        .filter_map(|(cluster, i)| {
            i.map(|i| Keyframe {
                frame: frames[i].0.clone(),
                cluster,
                laplacian_variance: sharpness[i],
            })
        })
        .collect();
    keyframes.sort_by_key(|k| k.frame.frame_index);
    Ok(KeyframeSelection {
        keyframes,
        chosen_k: choice.k,
        scaled_inertia_curve: choice.curve,
    })
}

/// Selects keyframes of a window and writes them to the `keyframes` slot.
/// A window without frames gets an empty selection.
pub fn select_keyframes(window: DataWindow, config: &KeyframeConfig, producer: &str) -> Result<DataWindow, PipeError> {
    let selection = if window.frames().is_empty() {
        KeyframeSelection {
            keyframes: vec![],
            chosen_k: 0,
            scaled_inertia_curve: vec![],
        }
    } else {
        let mut decoded = Vec::with_capacity(window.frames().len());
        for f in window.frames() {
            decoded.push((f.frame_ref.clone(), f.image.load()?));
        }
        select_keyframes_from(&decoded, config)?
    };
    Ok(window.put_slot(InferenceSlot::new(keys::KEYFRAMES, SlotPayload::Keyframes(selection), producer))?)
}

/// The `KeyFrameExtractor` pipe.
#[derive(Debug, Clone, Default)]
pub struct KeyframeExtractor {
    pub config: KeyframeConfig,
}

impl Pipe for KeyframeExtractor {
    fn name(&self) -> &str {
        "keyframes"
    }

    fn writes(&self) -> Vec<String> {
        vec![keys::KEYFRAMES.into()]
    }

    fn process(&self, window: DataWindow) -> Result<DataWindow, PipeError> {
        select_keyframes(window, &self.config, "keyframes")
    }
}
