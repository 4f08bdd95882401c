//! Cluster-wise sparse-layer codec and the tiled matmul benchmark.
//!
//! A binary support mask is decomposed into axis-aligned rectangles (plus
//! leftover singletons), and the surviving weights are shipped block-wise:
//! four 16-bit coordinate fields per cluster, two per singleton, values as
//! fixed-point codes over the layer's min/max range (the range itself costs
//! two 32-bit floats per layer). The same decomposition drives a tiled
//! matrix-multiply that only touches active blocks.
//!
//! Wire layout, little-endian, in this order: cluster coordinate fields
//! (row, col, height, width as u16 each), singleton coordinates (row, col),
//! range (min f32, max f32), then one code per value — cluster cells
//! row-major within each cluster, clusters in listed order, singletons last.
//! Codes occupy u16 when `bits_per_value` ≤ 16, u32 otherwise; the bit
//! accounting uses the exact cost model, byte padding is a wire detail.

use ndarray::Array2;
use rand::Rng;

use crate::prior::LayerShape;
use crate::rng::{role, stream};
use crate::{Error, Result};

/// Bits for transmitting a layer's quantization range (two f32 endpoints).
pub const RANGE_BITS: u64 = 64;
/// Bits per rectangle header: four u16 coordinate fields.
pub const CLUSTER_HEADER_BITS: u64 = 64;
/// Bits per singleton header: two u16 coordinate fields.
pub const SINGLETON_HEADER_BITS: u64 = 32;

/// An axis-aligned all-active rectangle within a layer mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// A support mask decomposed into rectangular clusters plus singletons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMask {
    pub shape: LayerShape,
    pub clusters: Vec<Rect>,
    pub singletons: Vec<(usize, usize)>,
}

impl ClusterMask {
    pub fn active_count(&self) -> usize {
        self.clusters.iter().map(Rect::area).sum::<usize>() + self.singletons.len()
    }

    /// Rebuild the binary mask covered by this decomposition.
    pub fn to_mask(&self) -> Array2<bool> {
        let mut m = Array2::from_elem((self.shape.rows, self.shape.cols), false);
        for r in &self.clusters {
            for i in r.row..r.row + r.height {
                for j in r.col..r.col + r.width {
                    m[[i, j]] = true;
                }
            }
        }
        for &(i, j) in &self.singletons {
            m[[i, j]] = true;
        }
        m
    }
}

/// Greedy maximal-rectangle decomposition of a binary mask.
///
/// Repeatedly removes the largest-area all-active rectangle whose sides both
/// exceed `min_side`; whatever active cells remain become singletons. Ties
/// are broken toward the earliest rectangle in a top-to-bottom, left-to-right
/// scan, so the decomposition is deterministic.
pub fn extract_clusters(mask: &Array2<bool>, min_side: usize) -> ClusterMask {
    let (k, m) = mask.dim();
    assert!(
        k <= u16::MAX as usize && m <= u16::MAX as usize,
        "coordinate fields are 16-bit; layer side exceeds 65535"
    );
    let shape = LayerShape::new(k.max(1), m.max(1)).expect("non-degenerate shape");
    let mut work = mask.clone();
    let mut clusters = Vec::new();
    while let Some(best) = largest_feasible_rect(&work, min_side) {
        for i in best.row..best.row + best.height {
            for j in best.col..best.col + best.width {
                work[[i, j]] = false;
            }
        }
        clusters.push(best);
    }
    let mut singletons = Vec::new();
    for i in 0..k {
        for j in 0..m {
            if work[[i, j]] {
                singletons.push((i, j));
            }
        }
    }
    let cm = ClusterMask { shape: LayerShape { rows: k, cols: m }, clusters, singletons };
    debug_assert!(coverage_is_exact(mask, &cm));
    let _ = shape;
    cm
}

/// Largest-area all-active rectangle with both sides strictly greater than
/// `min_side`, via the row-by-row histogram-of-heights sweep. Every maximal
/// rectangle appears as a stack pop, and any feasible rectangle is contained
/// in a maximal one of no smaller area.
fn largest_feasible_rect(mask: &Array2<bool>, min_side: usize) -> Option<Rect> {
    let (k, m) = mask.dim();
    let mut heights = vec![0usize; m];
    let mut best: Option<Rect> = None;
    let consider = |cand: Rect, best: &mut Option<Rect>| {
        if cand.height > min_side && cand.width > min_side {
            let better = match best {
                None => true,
                Some(b) => cand.area() > b.area(),
            };
            if better {
                *best = Some(cand);
            }
        }
    };
    for r in 0..k {
        for c in 0..m {
            heights[c] = if mask[[r, c]] { heights[c] + 1 } else { 0 };
        }
        // Monotonic stack of (start column, height).
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for c in 0..=m {
            let h = if c < m { heights[c] } else { 0 };
            let mut start = c;
            while let Some(&(s, sh)) = stack.last() {
                if sh <= h {
                    break;
                }
                stack.pop();
                let width = c - s;
                consider(
                    Rect { row: r + 1 - sh, col: s, height: sh, width },
                    &mut best,
                );
                start = s;
            }
            if h > 0 && stack.last().map(|&(_, sh)| sh < h).unwrap_or(true) {
                stack.push((start, h));
            }
        }
    }
    best
}

fn coverage_is_exact(mask: &Array2<bool>, cm: &ClusterMask) -> bool {
    let (k, m) = mask.dim();
    let mut seen = Array2::from_elem((k, m), 0u8);
    for r in &cm.clusters {
        for i in r.row..r.row + r.height {
            for j in r.col..r.col + r.width {
                seen[[i, j]] += 1;
            }
        }
    }
    for &(i, j) in &cm.singletons {
        seen[[i, j]] += 1;
    }
    for i in 0..k {
        for j in 0..m {
            let want = u8::from(mask[[i, j]]);
            if seen[[i, j]] != want {
                return false;
            }
        }
    }
    true
}

/// An encoded layer: exact bit accounting plus the wire image.
#[derive(Debug, Clone)]
pub struct EncodedLayer {
    /// Coordinate fields plus the 64-bit range header.
    pub header_bits: u64,
    /// Value payload: `bits_per_value` per transmitted weight.
    pub payload_bits: u64,
    pub total_bits: u64,
    pub bytes: Vec<u8>,
}

fn quantize_code(v: f64, rmin: f64, rmax: f64, levels: u64) -> u64 {
    if rmax <= rmin {
        return 0;
    }
    let t = ((v - rmin) / (rmax - rmin) * (levels - 1) as f64).round();
    (t.max(0.0) as u64).min(levels - 1)
}

fn dequantize_code(code: u64, rmin: f64, rmax: f64, levels: u64) -> f64 {
    if rmax <= rmin {
        return rmin;
    }
    rmin + code as f64 * (rmax - rmin) / (levels - 1) as f64
}

/// Cell coordinates in transmission order: cluster cells row-major within
/// each cluster, then singletons.
fn transmission_order(cm: &ClusterMask) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(cm.active_count());
    for r in &cm.clusters {
        for i in r.row..r.row + r.height {
            for j in r.col..r.col + r.width {
                cells.push((i, j));
            }
        }
    }
    cells.extend(cm.singletons.iter().copied());
    cells
}

/// Encode the active cells of `values` under the decomposition `cm`.
pub fn encode_layer(values: &Array2<f64>, cm: &ClusterMask, bits_per_value: u32) -> EncodedLayer {
    assert!((1..=32).contains(&bits_per_value));
    assert_eq!(values.dim(), (cm.shape.rows, cm.shape.cols), "values shape mismatch");
    let cells = transmission_order(cm);
    let (rmin, rmax) = range_f32(values, &cells);
    let levels = 1u64 << bits_per_value;

    let mut bytes = Vec::new();
    for r in &cm.clusters {
        for field in [r.row, r.col, r.height, r.width] {
            bytes.extend_from_slice(&(field as u16).to_le_bytes());
        }
    }
    for &(i, j) in &cm.singletons {
        bytes.extend_from_slice(&(i as u16).to_le_bytes());
        bytes.extend_from_slice(&(j as u16).to_le_bytes());
    }
    bytes.extend_from_slice(&(rmin as f32).to_le_bytes());
    bytes.extend_from_slice(&(rmax as f32).to_le_bytes());
    for &(i, j) in &cells {
        let code = quantize_code(values[[i, j]], rmin, rmax, levels);
        if bits_per_value <= 16 {
            bytes.extend_from_slice(&(code as u16).to_le_bytes());
        } else {
            bytes.extend_from_slice(&(code as u32).to_le_bytes());
        }
    }

    let header_bits = CLUSTER_HEADER_BITS * cm.clusters.len() as u64
        + SINGLETON_HEADER_BITS * cm.singletons.len() as u64
        + RANGE_BITS;
    let payload_bits = bits_per_value as u64 * cells.len() as u64;
    EncodedLayer { header_bits, payload_bits, total_bits: header_bits + payload_bits, bytes }
}

fn range_f32(values: &Array2<f64>, cells: &[(usize, usize)]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(i, j) in cells {
        lo = lo.min(values[[i, j]]);
        hi = hi.max(values[[i, j]]);
    }
    if cells.is_empty() {
        return (0.0, 0.0);
    }
    // The endpoints travel as f32, so quantization uses the rounded values.
    ((lo as f32) as f64, (hi as f32) as f64)
}

/// Decode a wire image produced by [`encode_layer`] back into a dense layer
/// (inactive cells are zero). The decoder shares the decomposition, so the
/// byte stream needs no framing.
pub fn decode_layer(encoded: &EncodedLayer, cm: &ClusterMask, bits_per_value: u32) -> Array2<f64> {
    let cells = transmission_order(cm);
    let mut cursor = 8 * cm.clusters.len() + 4 * cm.singletons.len();
    let rmin = f32::from_le_bytes(encoded.bytes[cursor..cursor + 4].try_into().unwrap()) as f64;
    let rmax =
        f32::from_le_bytes(encoded.bytes[cursor + 4..cursor + 8].try_into().unwrap()) as f64;
    cursor += 8;
    let levels = 1u64 << bits_per_value;
    let mut out = Array2::zeros((cm.shape.rows, cm.shape.cols));
    for &(i, j) in &cells {
        let code = if bits_per_value <= 16 {
            let c = u16::from_le_bytes(encoded.bytes[cursor..cursor + 2].try_into().unwrap());
            cursor += 2;
            c as u64
        } else {
            let c = u32::from_le_bytes(encoded.bytes[cursor..cursor + 4].try_into().unwrap());
            cursor += 4;
            c as u64
        };
        out[[i, j]] = dequantize_code(code, rmin, rmax, levels);
    }
    out
}

/// The quantized ground truth: what the decoder must reproduce exactly.
pub fn quantize_reference(
    values: &Array2<f64>,
    cm: &ClusterMask,
    bits_per_value: u32,
) -> Array2<f64> {
    let cells = transmission_order(cm);
    let (rmin, rmax) = range_f32(values, &cells);
    let levels = 1u64 << bits_per_value;
    let mut out = Array2::zeros((cm.shape.rows, cm.shape.cols));
    for &(i, j) in &cells {
        let code = quantize_code(values[[i, j]], rmin, rmax, levels);
        out[[i, j]] = dequantize_code(code, rmin, rmax, levels);
    }
    out
}

/// Timing comparison between a dense multiply and the cluster-tiled one.
#[derive(Debug, Clone, Copy)]
pub struct BenchReport {
    pub dense_secs: f64,
    pub clustered_secs: f64,
    pub max_abs_diff: f64,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.dense_secs / self.clustered_secs
    }
}

/// Inner kernel shared by both benchmark paths so the comparison is about
/// skipped work, not about kernel quality.
#[inline]
fn tile_mul(
    x: &Array2<f64>,
    w: &Array2<f64>,
    out: &mut Array2<f64>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) {
    let batch = x.nrows();
    for bi in 0..batch {
        for i in rows.clone() {
            let xv = x[[bi, i]];
            if xv == 0.0 {
                continue;
            }
            for j in cols.clone() {
                out[[bi, j]] += xv * w[[i, j]];
            }
        }
    }
}

/// Time `input · W` with W masked dense versus restricted to cluster tiles.
/// Both paths produce the same output (checked, reported as `max_abs_diff`).
pub fn masked_matmul_bench(
    cm: &ClusterMask,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if batch == 0 || reps == 0 {
        return Err(Error::Domain("bench needs batch > 0 and reps > 0".into()));
    }
    let (k, m) = (cm.shape.rows, cm.shape.cols);
    let mut rng = stream(seed, &[role::BENCH]);
    let x = Array2::from_shape_fn((batch, k), |_| rng.random_range(-1.0..1.0));
    let mask = cm.to_mask();
    let w = Array2::from_shape_fn((k, m), |(i, j)| {
        if mask[[i, j]] {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });

    let dense = |out: &mut Array2<f64>| {
        out.fill(0.0);
        tile_mul(&x, &w, out, 0..k, 0..m);
    };
    let clustered = |out: &mut Array2<f64>| {
        out.fill(0.0);
        for r in &cm.clusters {
            tile_mul(&x, &w, out, r.row..r.row + r.height, r.col..r.col + r.width);
        }
        for &(i, j) in &cm.singletons {
            for bi in 0..batch {
                out[[bi, j]] += x[[bi, i]] * w[[i, j]];
            }
        }
    };

    let mut out_dense = Array2::zeros((batch, m));
    let mut out_clustered = Array2::zeros((batch, m));
    // Warmup plus correctness check.
    dense(&mut out_dense);
    clustered(&mut out_clustered);
    let max_abs_diff = out_dense
        .iter()
        .zip(out_clustered.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        dense(&mut out_dense);
    }
    let dense_secs = t0.elapsed().as_secs_f64();
    let t1 = std::time::Instant::now();
    for _ in 0..reps {
        clustered(&mut out_clustered);
    }
    let clustered_secs = t1.elapsed().as_secs_f64();
    std::hint::black_box((&out_dense, &out_clustered));

    Ok(BenchReport { dense_secs, clustered_secs, max_abs_diff })
}
