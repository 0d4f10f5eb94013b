//! Mask and box arithmetic: the RLE codec, polygon rasterization, IoU counts,
//! object-centric mask preprocessing, the box positional embedding, and the
//! segmentation loss reference implementations.
//!
//! Everything here is pure and deterministic; callers may invoke these
//! functions from any number of threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("run-length counts sum to {got}, expected {expected} (h*w)")]
    RleSumMismatch { got: u64, expected: u64 },
    #[error("dimension mismatch: {a_h}x{a_w} vs {b_h}x{b_w}")]
    DimMismatch { a_h: u32, a_w: u32, b_h: u32, b_w: u32 },
    #[error("probability {value} at pixel {index} lies outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("reference mask is empty")]
    EmptyMask,
    #[error("invalid compressed RLE text at byte {0}")]
    BadRleText(usize),
    #[error("degenerate box: ({x1},{y1},{x2},{y2})")]
    DegenerateBox { x1: u32, y1: u32, x2: u32, y2: u32 },
}

/// Half-open pixel rectangle: `x1 <= x < x2`, `y1 <= y < y2`.
///
/// Image coordinates have the origin at the top-left corner with y growing
/// downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self, MaskError> {
        if x1 > x2 || y1 > y2 {
            return Err(MaskError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_degenerate(&self) -> bool {
        self.x1 >= self.x2 || self.y1 >= self.y2
    }

    /// Intersection area of two half-open rectangles.
    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let iw = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let ih = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        iw as u64 * ih as u64
    }

    /// Box-level IoU as a ratio.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn contains_box(&self, inner: &BBox) -> bool {
        self.x1 <= inner.x1 && self.y1 <= inner.y1 && self.x2 >= inner.x2 && self.y2 >= inner.y2
    }
}

/// Dense binary mask of one instance on the image lattice, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    height: u32,
    width: u32,
    data: Vec<u8>,
}

impl MaskGrid {
    pub fn zeros(height: u32, width: u32) -> Self {
        Self {
            height,
            width,
            data: vec![0; height as usize * width as usize],
        }
    }

    pub fn from_data(height: u32, width: u32, data: Vec<u8>) -> Self {
        assert_eq!(
            data.len(),
            height as usize * width as usize,
            "bit count must equal height*width"
        );
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.data[y as usize * self.width as usize + x as usize] = u8::from(value != 0);
    }

    /// Number of set pixels.
    pub fn area(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    pub fn same_dims(&self, other: &MaskGrid) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Real-valued grid of per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    height: u32,
    width: u32,
    data: Vec<f64>,
}

impl ProbGrid {
    pub fn from_data(height: u32, width: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height as usize * width as usize);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: u32, width: u32, p: f64) -> Self {
        Self::from_data(height, width, vec![p; height as usize * width as usize])
    }

    /// Binary grid with probability 1 on set pixels and 0 elsewhere.
    pub fn from_mask(mask: &MaskGrid) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            data: mask.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Plain RGB pixel buffer, row-major. Stands in for decoded image content in
/// the mask-encoding preprocessing path; no codec I/O happens here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    height: u32,
    width: u32,
    data: Vec<[u8; 3]>,
}

impl PixelImage {
    pub fn filled(height: u32, width: u32, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            data: vec![rgb; height as usize * width as usize],
        }
    }

    pub fn from_data(height: u32, width: u32, data: Vec<[u8; 3]>) -> Self {
        assert_eq!(data.len(), height as usize * width as usize);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn data(&self) -> &[[u8; 3]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        self.data[y as usize * self.width as usize + x as usize] = rgb;
    }
}

/// Weighting of the DICE term in the combined segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// Shape of the sinusoidal box embedding: total dimension (divisible by 8,
/// four coordinates with sine/cosine pairs) and the geometric frequency base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub dim: usize,
    pub frequency_base: f64,
}

impl EmbeddingSpec {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0 && dim % 8 == 0, "dim must be positive and divisible by 8");
        Self {
            dim,
            frequency_base: 10_000.0,
        }
    }
}

const DICE_EPSILON: f64 = 1e-6;
const CE_CLAMP: f64 = 1e-7;

/// Expand column-major run-length counts (leading zero-run convention) into a
/// row-major mask grid.
pub fn rle_decode(counts: &[u32], height: u32, width: u32) -> Result<MaskGrid, MaskError> {
    let expected = height as u64 * width as u64;
    let got: u64 = counts.iter().map(|&c| c as u64).sum();
    if got != expected {
        return Err(MaskError::RleSumMismatch { got, expected });
    }
    let mut grid = MaskGrid::zeros(height, width);
    let h = height as usize;
    let mut pos = 0usize; // column-major flat index
    let mut value = 0u8;
    for &count in counts {
        if value == 1 {
            for p in pos..pos + count as usize {
                let x = (p / h) as u32;
                let y = (p % h) as u32;
                grid.set(x, y, 1);
            }
        }
        pos += count as usize;
        value ^= 1;
    }
    Ok(grid)
}

/// Inverse of [`rle_decode`]: column-major runs, first count may be 0.
pub fn rle_encode(mask: &MaskGrid) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut prev = 0u8;
    let mut run = 0u32;
    for x in 0..mask.width() {
        for y in 0..mask.height() {
            let v = mask.get(x, y);
            if v != prev {
                counts.push(run);
                run = 0;
                prev = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

/// Decompress COCO compressed-count text into a run-length counts list.
///
/// The format is a LEB128-like base-48 printable encoding with stride-2 delta
/// accumulation from the third count onward.
pub fn rle_counts_from_text(s: &str) -> Result<Vec<u32>, MaskError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let mut x: i64 = 0;
        let mut shift = 0u32;
        let mut more = true;
        while more {
            if i >= bytes.len() || bytes[i] < 48 {
                return Err(MaskError::BadRleText(i));
            }
            let c = (bytes[i] - 48) as i64;
            i += 1;
            x |= (c & 0x1f) << shift;
            more = (c & 0x20) != 0;
            shift += 5;
        }
        if shift > 0 && (x & (1 << (shift - 1))) != 0 {
            x |= !0i64 << shift;
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2] as i64;
        }
        if x < 0 || x > u32::MAX as i64 {
            return Err(MaskError::BadRleText(i));
        }
        counts.push(x as u32);
    }
    Ok(counts)
}

/// Compress a run-length counts list into COCO compressed-count text.
pub fn rle_counts_to_text(counts: &[u32]) -> String {
    let mut s = String::new();
    for (i, &count) in counts.iter().enumerate() {
        let mut x = if i > 2 {
            count as i64 - counts[i - 2] as i64
        } else {
            count as i64
        };
        loop {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            s.push((c + 48) as char);
            if !more {
                break;
            }
        }
    }
    s
}

/// Rasterize a union of closed polygon rings onto an `h x w` grid.
///
/// A pixel is set iff its center `(x + 0.5, y + 0.5)` lies inside at least one
/// ring under the even-odd rule. Rings are flat `[x0, y0, x1, y1, ...]`
/// coordinate lists.
pub fn rasterize(rings: &[Vec<f64>], height: u32, width: u32) -> MaskGrid {
    let mut grid = MaskGrid::zeros(height, width);
    for ring in rings {
        if ring.len() < 6 {
            continue;
        }
        fill_ring(&mut grid, ring);
    }
    grid
}

fn fill_ring(grid: &mut MaskGrid, ring: &[f64]) {
    let n = ring.len() / 2;
    let mut crossings: Vec<f64> = Vec::new();
    for row in 0..grid.height() {
        let yc = row as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (ax, ay) = (ring[2 * i], ring[2 * i + 1]);
            let j = (i + 1) % n;
            let (bx, by) = (ring[2 * j], ring[2 * j + 1]);
            // Half-open vertex rule keeps each crossing counted exactly once.
            if (ay <= yc) != (by <= yc) {
                crossings.push(ax + (yc - ay) * (bx - ax) / (by - ay));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
        for pair in crossings.chunks_exact(2) {
            // Pixel centers x+0.5 in [pair0, pair1).
            let start = (pair[0] - 0.5).ceil().max(0.0) as i64;
            let end = (pair[1] - 0.5).ceil().min(grid.width() as f64) as i64;
            for col in start..end {
                grid.set(col as u32, row, 1);
            }
        }
    }
}

/// Tight half-open bounding box over the set pixels; `None` for an empty mask.
pub fn bbox_of(mask: &MaskGrid) -> Option<BBox> {
    let mut min_x = u32::MAX;
    let mut min_y = u32::MAX;
    let mut max_x = 0u32;
    let mut max_y = 0u32;
    let mut any = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) != 0 {
                any = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if any {
        Some(BBox {
            x1: min_x,
            y1: min_y,
            x2: max_x + 1,
            y2: max_y + 1,
        })
    } else {
        None
    }
}

/// Exact intersection and union pixel counts of two same-sized masks.
///
/// Callers form ratios; keeping integers makes downstream accumulation exact.
pub fn iou(a: &MaskGrid, b: &MaskGrid) -> Result<(u64, u64), MaskError> {
    if !a.same_dims(b) {
        return Err(MaskError::DimMismatch {
            a_h: a.height(),
            a_w: a.width(),
            b_h: b.height(),
            b_w: b.width(),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&va, &vb) in a.data().iter().zip(b.data().iter()) {
        inter += (va & vb) as u64;
        union += (va | vb) as u64;
    }
    Ok((inter, union))
}

/// Black out pixels outside the reference mask, then crop to the mask's
/// bounding box, yielding an object-centric image.
pub fn blackout_crop(image: &PixelImage, mask: &MaskGrid) -> Result<PixelImage, MaskError> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(MaskError::DimMismatch {
            a_h: image.height(),
            a_w: image.width(),
            b_h: mask.height(),
            b_w: mask.width(),
        });
    }
    let bbox = bbox_of(mask).ok_or(MaskError::EmptyMask)?;
    let mut out = PixelImage::filled(bbox.height(), bbox.width(), [0, 0, 0]);
    for y in bbox.y1..bbox.y2 {
        for x in bbox.x1..bbox.x2 {
            if mask.get(x, y) != 0 {
                out.set(x - bbox.x1, y - bbox.y1, image.get(x, y));
            }
        }
    }
    Ok(out)
}

/// Sinusoidal positional embedding of a box.
///
/// Coordinates are normalized to [0, 1] by the image dimensions; each of
/// (x1, y1, x2, y2) gets a block of `dim/4` components with sine/cosine
/// interleaved over geometric frequencies of `frequency_base`, and the four
/// blocks are concatenated in that order.
pub fn bbox_embedding(
    bbox: &BBox,
    image_width: u32,
    image_height: u32,
    spec: &EmbeddingSpec,
) -> Vec<f64> {
    assert!(spec.dim > 0 && spec.dim % 8 == 0, "dim must be divisible by 8");
    let w = image_width as f64;
    let h = image_height as f64;
    let coords = [
        bbox.x1 as f64 / w,
        bbox.y1 as f64 / h,
        bbox.x2 as f64 / w,
        bbox.y2 as f64 / h,
    ];
    let block = spec.dim / 4;
    let pairs = block / 2;
    let mut out = Vec::with_capacity(spec.dim);
    for &c in &coords {
        for j in 0..pairs {
            let omega = spec
                .frequency_base
                .powf(-(2.0 * j as f64) / block as f64);
            out.push((c * omega).sin());
            out.push((c * omega).cos());
        }
    }
    out
}

fn check_prob_dims(pred: &ProbGrid, gt: &MaskGrid) -> Result<(), MaskError> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MaskError::DimMismatch {
            a_h: pred.height(),
            a_w: pred.width(),
            b_h: gt.height(),
            b_w: gt.width(),
        });
    }
    Ok(())
}

/// Soft DICE loss: `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`,
/// `eps = 1e-6`. Probabilities outside [0, 1] are rejected.
pub fn dice_loss(pred: &ProbGrid, gt: &MaskGrid) -> Result<f64, MaskError> {
    check_prob_dims(pred, gt)?;
    let mut overlap = 0.0;
    let mut pred_sum = 0.0;
    let mut gt_sum = 0.0;
    for (index, (&p, &g)) in pred.data().iter().zip(gt.data().iter()).enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(MaskError::ProbabilityOutOfRange { index, value: p });
        }
        overlap += p * g as f64;
        pred_sum += p;
        gt_sum += g as f64;
    }
    Ok(1.0 - (2.0 * overlap + DICE_EPSILON) / (pred_sum + gt_sum + DICE_EPSILON))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn ce_loss(pred: &ProbGrid, gt: &MaskGrid) -> Result<f64, MaskError> {
    check_prob_dims(pred, gt)?;
    let n = pred.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        let p = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        total -= if g != 0 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / n as f64)
}

/// Combined per-mask loss: cross entropy plus `lambda` times DICE.
pub fn seg_loss(pred: &ProbGrid, gt: &MaskGrid, cfg: &LossConfig) -> Result<f64, MaskError> {
    Ok(ce_loss(pred, gt)? + cfg.lambda * dice_loss(pred, gt)?)
}

/// Total decoding loss over the (reference, target) mask pair.
pub fn mask_pair_loss(
    ref_pred: &ProbGrid,
    ref_gt: &MaskGrid,
    tgt_pred: &ProbGrid,
    tgt_gt: &MaskGrid,
    cfg: &LossConfig,
) -> Result<f64, MaskError> {
    Ok(seg_loss(ref_pred, ref_gt, cfg)? + seg_loss(tgt_pred, tgt_gt, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: u32, w: u32) -> MaskGrid {
        let data = (0..h as usize * w as usize)
            .map(|_| u8::from(rng.random_bool(0.5)))
            .collect();
        MaskGrid::from_data(h, w, data)
    }

    #[test]
    fn rle_decode_all_zero() {
        let m = rle_decode(&[48], 6, 8).unwrap();
        assert_eq!(m.area(), 0);
    }

    #[test]
    fn rle_decode_all_one() {
        let m = rle_decode(&[0, 48], 6, 8).unwrap();
        assert_eq!(m.area(), 48);
        assert_eq!(rle_encode(&m), vec![0, 48]);
    }

    #[test]
    fn rle_encode_all_zero() {
        assert_eq!(rle_encode(&MaskGrid::zeros(6, 8)), vec![48]);
    }

    #[test]
    fn rle_sum_mismatch_rejected() {
        assert!(matches!(
            rle_decode(&[3, 4], 2, 2),
            Err(MaskError::RleSumMismatch { got: 7, expected: 4 })
        ));
    }

    #[test]
    fn rle_is_column_major() {
        // Single set pixel at (x=2, y=1) on 3x4: column-major flat index 2*3+1=7.
        let mut m = MaskGrid::zeros(3, 4);
        m.set(2, 1, 1);
        assert_eq!(rle_encode(&m), vec![7, 1, 4]);
        assert_eq!(rle_decode(&[7, 1, 4], 3, 4).unwrap(), m);
    }

    #[test]
    fn rle_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = random_mask(&mut rng, 8, 8);
            let counts = rle_encode(&m);
            assert_eq!(rle_decode(&counts, 8, 8).unwrap(), m);
        }
    }

    #[test]
    fn rle_text_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let m = random_mask(&mut rng, 13, 7);
            let counts = rle_encode(&m);
            let text = rle_counts_to_text(&counts);
            assert_eq!(rle_counts_from_text(&text).unwrap(), counts);
        }
    }

    #[test]
    fn rle_text_known_values() {
        // Leading-zero run and large trailing run both survive the text form.
        for counts in [vec![0u32, 3, 22], vec![100, 200, 9700], vec![5, 3, 92]] {
            let text = rle_counts_to_text(&counts);
            assert_eq!(rle_counts_from_text(&text).unwrap(), counts);
        }
    }

    /// Brute-force even-odd point-in-polygon: parity of edge crossings strictly
    /// to the right of the point.
    fn point_in_ring(ring: &[f64], px: f64, py: f64) -> bool {
        let n = ring.len() / 2;
        let mut inside = false;
        for i in 0..n {
            let (ax, ay) = (ring[2 * i], ring[2 * i + 1]);
            let j = (i + 1) % n;
            let (bx, by) = (ring[2 * j], ring[2 * j + 1]);
            if (ay <= py) != (by <= py) {
                let x_cross = ax + (py - ay) * (bx - ax) / (by - ay);
                if x_cross > px {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn brute_rasterize(rings: &[Vec<f64>], h: u32, w: u32) -> MaskGrid {
        let mut grid = MaskGrid::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let inside = rings
                    .iter()
                    .any(|r| point_in_ring(r, x as f64 + 0.5, y as f64 + 0.5));
                if inside {
                    grid.set(x, y, 1);
                }
            }
        }
        grid
    }

    #[test]
    fn rasterize_square_counts_16_pixels() {
        let ring = vec![0.0, 0.0, 4.0, 0.0, 4.0, 4.0, 0.0, 4.0];
        let grid = rasterize(std::slice::from_ref(&ring), 8, 8);
        assert_eq!(grid.area(), 16);
        assert_eq!(grid, brute_rasterize(&[ring], 8, 8));
    }

    #[test]
    fn rasterize_ring_outside_grid() {
        let ring = vec![20.0, 20.0, 30.0, 20.0, 30.0, 30.0, 20.0, 30.0];
        assert_eq!(rasterize(&[ring], 8, 8).area(), 0);
    }

    #[test]
    fn rasterize_disjoint_rectangles_add() {
        let a = vec![0.0, 0.0, 3.0, 0.0, 3.0, 3.0, 0.0, 3.0];
        let b = vec![5.0, 5.0, 8.0, 5.0, 8.0, 8.0, 5.0, 8.0];
        let both = rasterize(&[a.clone(), b.clone()], 8, 8);
        let only_a = rasterize(&[a], 8, 8);
        let only_b = rasterize(&[b], 8, 8);
        assert_eq!(both.area(), only_a.area() + only_b.area());
    }

    #[test]
    fn rasterize_matches_brute_force_on_random_triangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let ring: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..16.0)).collect();
            let fast = rasterize(std::slice::from_ref(&ring), 16, 16);
            let brute = brute_rasterize(&[ring], 16, 16);
            assert_eq!(fast, brute);
        }
    }

    #[test]
    fn bbox_of_single_pixel() {
        let mut m = MaskGrid::zeros(10, 10);
        m.set(3, 5, 1);
        assert_eq!(bbox_of(&m), Some(BBox { x1: 3, y1: 5, x2: 4, y2: 6 }));
    }

    #[test]
    fn bbox_of_empty_is_none() {
        assert_eq!(bbox_of(&MaskGrid::zeros(4, 4)), None);
    }

    #[test]
    fn bbox_of_matches_min_max_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let m = random_mask(&mut rng, 9, 11);
            let brute = {
                let set: Vec<(u32, u32)> = (0..11u32)
                    .flat_map(|x| (0..9u32).map(move |y| (x, y)))
                    .filter(|&(x, y)| m.get(x, y) != 0)
                    .collect();
                if set.is_empty() {
                    None
                } else {
                    Some(BBox {
                        x1: set.iter().map(|p| p.0).min().unwrap(),
                        y1: set.iter().map(|p| p.1).min().unwrap(),
                        x2: set.iter().map(|p| p.0).max().unwrap() + 1,
                        y2: set.iter().map(|p| p.1).max().unwrap() + 1,
                    })
                }
            };
            assert_eq!(bbox_of(&m), brute);
        }
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let mut a = MaskGrid::zeros(4, 4);
        a.set(0, 0, 1);
        a.set(1, 1, 1);
        let (i, u) = iou(&a, &a).unwrap();
        assert_eq!(i, u);
        let mut b = MaskGrid::zeros(4, 4);
        b.set(3, 3, 1);
        let (i, u) = iou(&a, &b).unwrap();
        assert_eq!(i, 0);
        assert_eq!(u, 3);
    }

    #[test]
    fn iou_dim_mismatch_is_error() {
        let a = MaskGrid::zeros(4, 4);
        let b = MaskGrid::zeros(4, 5);
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn iou_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let a = random_mask(&mut rng, 8, 8);
            let b = random_mask(&mut rng, 8, 8);
            let (i, u) = iou(&a, &b).unwrap();
            let mut bi = 0u64;
            let mut bu = 0u64;
            for y in 0..8 {
                for x in 0..8 {
                    if a.get(x, y) != 0 && b.get(x, y) != 0 {
                        bi += 1;
                    }
                    if a.get(x, y) != 0 || b.get(x, y) != 0 {
                        bu += 1;
                    }
                }
            }
            assert_eq!((i, u), (bi, bu));
        }
    }

    #[test]
    fn blackout_crop_full_mask_is_identity() {
        let mut img = PixelImage::filled(3, 3, [10, 20, 30]);
        img.set(1, 1, [200, 0, 0]);
        let mask = MaskGrid::from_data(3, 3, vec![1; 9]);
        assert_eq!(blackout_crop(&img, &mask).unwrap(), img);
    }

    #[test]
    fn blackout_crop_single_pixel() {
        let mut img = PixelImage::filled(4, 4, [1, 2, 3]);
        img.set(2, 1, [90, 91, 92]);
        let mut mask = MaskGrid::zeros(4, 4);
        mask.set(2, 1, 1);
        let out = blackout_crop(&img, &mask).unwrap();
        assert_eq!((out.height(), out.width()), (1, 1));
        assert_eq!(out.get(0, 0), [90, 91, 92]);
    }

    #[test]
    fn blackout_crop_empty_mask_is_error() {
        let img = PixelImage::filled(4, 4, [1, 2, 3]);
        assert!(matches!(
            blackout_crop(&img, &MaskGrid::zeros(4, 4)),
            Err(MaskError::EmptyMask)
        ));
    }

    #[test]
    fn blackout_crop_checkerboard() {
        let img = PixelImage::filled(4, 4, [7, 7, 7]);
        let mut mask = MaskGrid::zeros(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 0 {
                    mask.set(x, y, 1);
                }
            }
        }
        let out = blackout_crop(&img, &mask).unwrap();
        assert_eq!((out.height(), out.width()), (4, 4));
        for y in 0..4 {
            for x in 0..4 {
                let expected = if (x + y) % 2 == 0 { [7, 7, 7] } else { [0, 0, 0] };
                assert_eq!(out.get(x, y), expected, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn embedding_is_deterministic_and_bounded() {
        let spec = EmbeddingSpec::new(64);
        let b = BBox::new(2, 3, 6, 7).unwrap();
        let v1 = bbox_embedding(&b, 10, 10, &spec);
        let v2 = bbox_embedding(&b, 10, 10, &spec);
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), 64);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..1000 {
            let x1 = rng.random_range(0..64);
            let y1 = rng.random_range(0..64);
            let x2 = rng.random_range(x1 + 1..=64);
            let y2 = rng.random_range(y1 + 1..=64);
            let v = bbox_embedding(&BBox::new(x1, y1, x2, y2).unwrap(), 64, 64, &spec);
            assert!(v.iter().all(|c| (-1.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn embedding_distinguishes_boxes() {
        let spec = EmbeddingSpec::new(32);
        let full = bbox_embedding(&BBox::new(0, 0, 10, 10).unwrap(), 10, 10, &spec);
        let half = bbox_embedding(&BBox::new(0, 0, 5, 10).unwrap(), 10, 10, &spec);
        assert_ne!(full, half);
    }

    #[test]
    fn dice_loss_perfect_prediction() {
        let mut gt = MaskGrid::zeros(4, 4);
        gt.set(1, 1, 1);
        gt.set(2, 2, 1);
        let pred = ProbGrid::from_mask(&gt);
        assert!(dice_loss(&pred, &gt).unwrap() <= 1e-6);
    }

    #[test]
    fn dice_loss_total_miss() {
        let gt = MaskGrid::zeros(4, 4);
        let pred = ProbGrid::constant(4, 4, 1.0);
        assert!(dice_loss(&pred, &gt).unwrap() >= 1.0 - 1e-5);
    }

    #[test]
    fn dice_loss_half_prediction_closed_form() {
        // pred = 0.5 everywhere, gt sets half of a 4x4 grid:
        // overlap = 0.5*8 = 4, pred_sum = 8, gt_sum = 8
        // loss = 1 - (2*4 + eps) / (8 + 8 + eps)
        let mut gt = MaskGrid::zeros(4, 4);
        for i in 0..8u32 {
            gt.set(i % 4, i / 4, 1);
        }
        let pred = ProbGrid::constant(4, 4, 0.5);
        let expected = 1.0 - (8.0 + 1e-6) / (16.0 + 1e-6);
        assert!((dice_loss(&pred, &gt).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn dice_loss_rejects_bad_probability() {
        let gt = MaskGrid::zeros(2, 2);
        let pred = ProbGrid::from_data(2, 2, vec![0.0, 0.5, 1.2, 0.1]);
        assert!(matches!(
            dice_loss(&pred, &gt),
            Err(MaskError::ProbabilityOutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn ce_loss_perfect_prediction() {
        let mut gt = MaskGrid::zeros(4, 4);
        gt.set(0, 3, 1);
        let pred = ProbGrid::from_mask(&gt);
        assert!(ce_loss(&pred, &gt).unwrap() <= 1e-6);
    }

    #[test]
    fn ce_loss_uniform_half_is_ln2() {
        let mut gt = MaskGrid::zeros(4, 4);
        gt.set(1, 2, 1);
        let pred = ProbGrid::constant(4, 4, 0.5);
        assert!((ce_loss(&pred, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn ce_loss_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let gt = random_mask(&mut rng, 4, 4);
        let probs: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let pred = ProbGrid::from_data(4, 4, probs.clone());
        let mut expected = 0.0;
        for (p, &g) in probs.iter().zip(gt.data()) {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            expected += -(g as f64 * p.ln() + (1.0 - g as f64) * (1.0 - p).ln());
        }
        expected /= 16.0;
        assert!((ce_loss(&pred, &gt).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mask_pair_loss_perfect_is_tiny() {
        let mut ref_gt = MaskGrid::zeros(4, 4);
        ref_gt.set(0, 0, 1);
        let mut tgt_gt = MaskGrid::zeros(4, 4);
        tgt_gt.set(3, 3, 1);
        let total = mask_pair_loss(
            &ProbGrid::from_mask(&ref_gt),
            &ref_gt,
            &ProbGrid::from_mask(&tgt_gt),
            &tgt_gt,
            &LossConfig::default(),
        )
        .unwrap();
        assert!(total <= 1e-5);
    }

    #[test]
    fn mask_pair_loss_lambda_zero_is_ce_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let ref_gt = random_mask(&mut rng, 4, 4);
        let tgt_gt = random_mask(&mut rng, 4, 4);
        let ref_pred = ProbGrid::constant(4, 4, 0.3);
        let tgt_pred = ProbGrid::constant(4, 4, 0.8);
        let total = mask_pair_loss(
            &ref_pred,
            &ref_gt,
            &tgt_pred,
            &tgt_gt,
            &LossConfig { lambda: 0.0 },
        )
        .unwrap();
        let expected = ce_loss(&ref_pred, &ref_gt).unwrap() + ce_loss(&tgt_pred, &tgt_gt).unwrap();
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn mask_pair_loss_components_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let ref_gt = random_mask(&mut rng, 4, 4);
        let tgt_gt = random_mask(&mut rng, 4, 4);
        let ref_pred = ProbGrid::constant(4, 4, 0.6);
        let tgt_pred = ProbGrid::constant(4, 4, 0.4);
        let cfg = LossConfig { lambda: 1.0 };
        let total = mask_pair_loss(&ref_pred, &ref_gt, &tgt_pred, &tgt_gt, &cfg).unwrap();
        let by_hand = ce_loss(&ref_pred, &ref_gt).unwrap()
            + dice_loss(&ref_pred, &ref_gt).unwrap()
            + ce_loss(&tgt_pred, &tgt_gt).unwrap()
            + dice_loss(&tgt_pred, &tgt_gt).unwrap();
        assert!((total - by_hand).abs() < 1e-12);
    }
}
