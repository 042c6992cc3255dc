//! Measurement probes: edge extraction and F1, per-class attention weights,
//! attention-map divergence, image distances, the nearest-template alignment
//! classifier, min-max relative scores, and guidance-gap norms.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;

use crate::engine::{AttentionMap, Trajectory};
use crate::grid::LatentGrid;
use crate::prompt::{PromptSpec, TokenTag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeError {
    ShapeMismatch,
    /// Canny thresholds must satisfy `0 < t_low < t_high <= 1`.
    BadThresholds,
    /// The trajectory has no usable attention maps or its terminal F1 is 0.
    DegenerateTrajectory,
    /// Template bank is empty.
    EmptyBank,
    /// All values equal: no min-max range to normalize by.
    DegenerateRange,
    /// Cosine of two zero vectors.
    UndefinedInput,
    /// Gap norms need both branch predictions recorded.
    MissingPredictions,
}

impl fmt::Display for ProbeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeError::ShapeMismatch => write!(f, "probe inputs differ in shape"),
            ProbeError::BadThresholds => write!(f, "thresholds must satisfy 0 < low < high <= 1"),
            ProbeError::DegenerateTrajectory => write!(f, "trajectory lacks usable attention records"),
            ProbeError::EmptyBank => write!(f, "template bank is empty"),
            ProbeError::DegenerateRange => write!(f, "relative score needs max > min"),
            ProbeError::UndefinedInput => write!(f, "cosine of two zero vectors is undefined"),
            ProbeError::MissingPredictions => write!(f, "trajectory lacks recorded branch predictions"),
        }
    }
}

impl core::error::Error for ProbeError {}

/// Binary edge membership over an `M x N` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    m: usize,
    n: usize,
    mask: Vec<bool>,
}

impl EdgeMap {
    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    /// Edge pixel coordinates in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        (0..self.m)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.contains(i, j))
            .collect()
    }
}

/// Smoothing, threshold fractions, and the F1 matching radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    /// Low hysteresis threshold as a fraction of the max gradient magnitude.
    pub t_low: f64,
    /// High hysteresis threshold as a fraction of the max gradient magnitude.
    pub t_high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            t_low: 0.1,
            t_high: 0.2,
        }
    }
}

/// Default Chebyshev matching radius for edge F1.
pub const DEFAULT_F1_TOL_PX: usize = 1;

fn grayscale(img: &LatentGrid) -> Vec<f64> {
    let (c, m, n) = img.shape();
    let mut out = vec![0.0; m * n];
    for ch in 0..c {
        for (dst, src) in out.iter_mut().zip(img.channel(ch)) {
            *dst += src;
        }
    }
    let inv = 1.0 / c as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

fn gaussian_blur(data: &[f64], m: usize, n: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for k in -radius..=radius {
        kernel.push((-(k * k) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= norm);

    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let jj = clamp(j as i64 + ki as i64 - radius, n);
                acc += w * data[i * n + jj];
            }
            tmp[i * n + j] = acc;
        }
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let ii = clamp(i as i64 + ki as i64 - radius, m);
                acc += w * tmp[ii * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Canny edge extraction: grayscale, Gaussian blur, Sobel gradients,
/// non-maximum suppression along the quantized gradient direction, then
/// double-threshold hysteresis with 8-connectivity. Thresholds are fractions
/// of the post-suppression maximum magnitude. A constant image yields an
/// empty map.
pub fn canny_edges(img: &LatentGrid, params: &CannyParams) -> Result<EdgeMap, ProbeError> {
    if !(params.t_low > 0.0 && params.t_low < params.t_high && params.t_high <= 1.0) {
        return Err(ProbeError::BadThresholds);
    }
    let (m, n) = (img.rows(), img.cols());
    let gray = grayscale(img);
    let blurred = gaussian_blur(&gray, m, n, params.sigma);

    let at = |i: i64, j: i64| -> f64 {
        let ii = i.clamp(0, m as i64 - 1) as usize;
        let jj = j.clamp(0, n as i64 - 1) as usize;
        blurred[ii * n + jj]
    };
    let mut gx = vec![0.0; m * n];
    let mut gy = vec![0.0; m * n];
    let mut mag = vec![0.0; m * n];
    for i in 0..m as i64 {
        for j in 0..n as i64 {
            let dx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            let dy = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
            let idx = i as usize * n + j as usize;
            gx[idx] = dx;
            gy[idx] = dy;
            mag[idx] = (dx * dx + dy * dy).sqrt();
        }
    }

    // Non-maximum suppression. Ties along the gradient direction keep the
    // pixel whose negative-side neighbor is strictly smaller, so plateaus
    // thin to a single line deterministically.
    let mag_at = |i: i64, j: i64| -> f64 {
        if i < 0 || i >= m as i64 || j < 0 || j >= n as i64 {
            0.0
        } else {
            mag[i as usize * n + j as usize]
        }
    };
    let mut thinned = vec![0.0; m * n];
    for i in 0..m as i64 {
        for j in 0..n as i64 {
            let idx = i as usize * n + j as usize;
            let g = mag[idx];
            if g == 0.0 {
                continue;
            }
            let mut angle = gy[idx].atan2(gx[idx]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                (mag_at(i, j - 1), mag_at(i, j + 1))
            } else if angle < 67.5 {
                (mag_at(i - 1, j - 1), mag_at(i + 1, j + 1))
            } else if angle < 112.5 {
                (mag_at(i - 1, j), mag_at(i + 1, j))
            } else {
                (mag_at(i - 1, j + 1), mag_at(i + 1, j - 1))
            };
            if g > n1 && g >= n2 {
                thinned[idx] = g;
            }
        }
    }

    let max = thinned.iter().cloned().fold(0.0, f64::max);
    let mut mask = vec![false; m * n];
    if max > 0.0 {
        let high = params.t_high * max;
        let low = params.t_low * max;
        let mut stack = Vec::new();
        for idx in 0..m * n {
            if thinned[idx] >= high && !mask[idx] {
                mask[idx] = true;
                stack.push(idx);
                while let Some(cur) = stack.pop() {
                    let (ci, cj) = (cur / n, cur % n);
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            if di == 0 && dj == 0 {
                                continue;
                            }
                            let (ni, nj) = (ci as i64 + di, cj as i64 + dj);
                            if ni < 0 || ni >= m as i64 || nj < 0 || nj >= n as i64 {
                                continue;
                            }
                            let nidx = ni as usize * n + nj as usize;
                            if !mask[nidx] && thinned[nidx] >= low {
                                mask[nidx] = true;
                                stack.push(nidx);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(EdgeMap { m, n, mask })
}

/// F1 between a reference map `a` and a candidate map `b`.
///
/// Each `a` pixel greedily matches the first unused `b` pixel within
/// Chebyshev radius `tol_px` (row-major scan). Precision is the matched
/// fraction of `b`, recall the matched fraction of `a`. Two empty maps score
/// 1 (identical emptiness).
pub fn edge_f1(a: &EdgeMap, b: &EdgeMap, tol_px: usize) -> Result<f64, ProbeError> {
    if a.m != b.m || a.n != b.n {
        return Err(ProbeError::ShapeMismatch);
    }
    let a_pixels = a.pixels();
    let b_pixels = b.pixels();
    if a_pixels.is_empty() && b_pixels.is_empty() {
        return Ok(1.0);
    }
    if a_pixels.is_empty() || b_pixels.is_empty() {
        return Ok(0.0);
    }
    let mut used = vec![false; b_pixels.len()];
    let mut matched = 0usize;
    for &(ai, aj) in &a_pixels {
        for (idx, &(bi, bj)) in b_pixels.iter().enumerate() {
            if used[idx] {
                continue;
            }
            let dist = ai.abs_diff(bi).max(aj.abs_diff(bj));
            if dist <= tol_px {
                used[idx] = true;
                matched += 1;
                break;
            }
        }
    }
    let precision = matched as f64 / b_pixels.len() as f64;
    let recall = matched as f64 / a_pixels.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Turns one attention column into a min-max normalized single-channel image.
fn token_heatmap(map: &AttentionMap, token: usize, m: usize, n: usize) -> LatentGrid {
    let column = map.token_column(token);
    let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = if range > 0.0 {
        column.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; column.len()]
    };
    LatentGrid::from_vec(1, m, n, data).expect("attention map matches image dims")
}

/// Relative F1 curve: per sampled step, the mean-over-tokens F1 between the
/// canny edges of each token's attention heatmap and the edges of the final
/// generated image, normalized by the value at the last step (rank 1). The
/// terminal point is exactly 1.
pub fn relative_f1_curve(
    traj: &Trajectory,
    params: &CannyParams,
    tol_px: usize,
) -> Result<Vec<(usize, f64)>, ProbeError> {
    let final_img = traj.final_x0();
    let (m, n) = (final_img.rows(), final_img.cols());
    let final_edges = canny_edges(final_img, params)?;

    let mut raw = Vec::new();
    for (rank, record) in traj.steps() {
        if record.attention.is_empty() {
            return Err(ProbeError::DegenerateTrajectory);
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for map in &record.attention {
            if map.pixels() != m * n {
                return Err(ProbeError::ShapeMismatch);
            }
            for token in 0..map.tokens() {
                let heat = token_heatmap(map, token, m, n);
                let edges = canny_edges(&heat, params)?;
                acc += edge_f1(&final_edges, &edges, tol_px)?;
                count += 1;
            }
        }
        raw.push((rank, acc / count as f64));
    }
    let f1_terminal = raw.last().ok_or(ProbeError::DegenerateTrajectory)?.1;
    if f1_terminal == 0.0 {
        return Err(ProbeError::DegenerateTrajectory);
    }
    Ok(raw.into_iter().map(|(rank, f1)| (rank, f1 / f1_terminal)).collect())
}

/// Mean attention weight per token class at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub rank: usize,
    pub sos: f64,
    pub sem: f64,
    pub eos: f64,
}

/// Per-step average attention weight per token, averaged within each class
/// and over layers. The class means weighted by class counts always total 1.
pub fn attention_class_weights(traj: &Trajectory, tags: &[TokenTag]) -> Result<Vec<ClassWeights>, ProbeError> {
    let mut out = Vec::new();
    for (rank, record) in traj.steps() {
        if record.attention.is_empty() {
            return Err(ProbeError::DegenerateTrajectory);
        }
        let mut acc = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for map in &record.attention {
            if map.tokens() != tags.len() {
                return Err(ProbeError::ShapeMismatch);
            }
            for (token, tag) in tags.iter().enumerate() {
                let column = map.token_column(token);
                let mean = column.iter().sum::<f64>() / column.len() as f64;
                let slot = match tag {
                    TokenTag::Sos => 0,
                    TokenTag::Sem => 1,
                    TokenTag::Eos => 2,
                };
                acc[slot] += mean;
                counts[slot] += 1;
            }
        }
        let class_mean = |slot: usize| {
            if counts[slot] == 0 {
                0.0
            } else {
                acc[slot] / counts[slot] as f64
            }
        };
        out.push(ClassWeights {
            rank,
            sos: class_mean(0),
            sem: class_mean(1),
            eos: class_mean(2),
        });
    }
    Ok(out)
}

/// Additive smoothing used before row-wise KL divergence.
pub const KL_SMOOTHING: f64 = 1e-8;

/// Mean over pixels of `KL(P_row || Q_row)` with additive smoothing and
/// renormalization.
pub fn attention_kl(p: &AttentionMap, q: &AttentionMap) -> Result<f64, ProbeError> {
    if p.pixels() != q.pixels() || p.tokens() != q.tokens() {
        return Err(ProbeError::ShapeMismatch);
    }
    let l = p.tokens() as f64;
    let mut total = 0.0;
    for pixel in 0..p.pixels() {
        let pr = p.row(pixel);
        let qr = q.row(pixel);
        let mut kl = 0.0;
        for (a, b) in pr.iter().zip(qr) {
            let pa = (a + KL_SMOOTHING) / (1.0 + l * KL_SMOOTHING);
            let qb = (b + KL_SMOOTHING) / (1.0 + l * KL_SMOOTHING);
            kl += pa * (pa / qb).ln();
        }
        total += kl;
    }
    Ok(total / p.pixels() as f64)
}

/// Mean absolute per-element difference.
pub fn l1_distance(a: &LatentGrid, b: &LatentGrid) -> Result<f64, ProbeError> {
    a.mean_abs_diff(b).map_err(|_| ProbeError::ShapeMismatch)
}

/// Cosine of the flattened pixel vectors. Two zero inputs are undefined;
/// exactly one zero input scores 0.
pub fn cosine_alignment(a: &LatentGrid, b: &LatentGrid) -> Result<f64, ProbeError> {
    if a.shape() != b.shape() {
        return Err(ProbeError::ShapeMismatch);
    }
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na == 0.0 && nb == 0.0 {
        return Err(ProbeError::UndefinedInput);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Shape and attribute accuracy of one image (or batch means) against the
/// template bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    pub shape_accuracy: f64,
    pub attribute_accuracy: f64,
    pub combined: f64,
}

impl AlignmentReport {
    fn new(shape: f64, attribute: f64) -> Self {
        Self {
            shape_accuracy: shape,
            attribute_accuracy: attribute,
            combined: (shape + attribute) / 2.0,
        }
    }

    /// Mean over a batch of reports.
    pub fn mean(reports: &[AlignmentReport]) -> AlignmentReport {
        let n = reports.len().max(1) as f64;
        let shape = reports.iter().map(|r| r.shape_accuracy).sum::<f64>() / n;
        let attr = reports.iter().map(|r| r.attribute_accuracy).sum::<f64>() / n;
        AlignmentReport::new(shape, attr)
    }
}

/// Nearest-rendered-template classifier.
///
/// The predicted noun is the one whose best template (minimum L1 over that
/// noun's attribute variants) is globally minimal; the predicted attribute is
/// defined symmetrically over (kind, attribute) groups.
pub fn prompt_alignment(
    img: &LatentGrid,
    p: &PromptSpec,
    bank: &[(PromptSpec, LatentGrid)],
) -> Result<AlignmentReport, ProbeError> {
    if bank.is_empty() {
        return Err(ProbeError::EmptyBank);
    }
    let mut best_noun = (usize::MAX, f64::INFINITY);
    let mut best_attr = ((crate::prompt::AttributeKind::Color, usize::MAX), f64::INFINITY);
    for (spec, template) in bank {
        let d = l1_distance(img, template)?;
        if d < best_noun.1 {
            best_noun = (spec.noun_id, d);
        }
        if d < best_attr.1 {
            best_attr = ((spec.kind, spec.attribute_id), d);
        }
    }
    let shape = (best_noun.0 == p.noun_id) as u8 as f64;
    let attribute = (best_attr.0 == (p.kind, p.attribute_id)) as u8 as f64;
    Ok(AlignmentReport::new(shape, attribute))
}

/// Min-max rescaling: "current minus worst" over "best minus worst".
pub fn relative_score(values: &[f64]) -> Result<Vec<f64>, ProbeError> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(max > min) {
        return Err(ProbeError::DegenerateRange);
    }
    Ok(values.iter().map(|v| (v - min) / (max - min)).collect())
}

/// Per-step root-mean-square norms of the unconditional prediction and of
/// the guidance gap `w * (eps_cond - eps_uncond)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapNorms {
    pub rank: usize,
    pub uncond_rms: f64,
    pub gap_rms: f64,
}

/// Requires a trajectory whose steps recorded the unconditional branch (and
/// the conditional branch unless `w = 0`, where the gap is identically 0).
pub fn guidance_gap_norms(traj: &Trajectory) -> Result<Vec<GapNorms>, ProbeError> {
    let w = traj.policy.w;
    let mut out = Vec::new();
    for (rank, record) in traj.steps() {
        let uncond = record.eps_uncond.as_ref().ok_or(ProbeError::MissingPredictions)?;
        let gap_rms = if w == 0.0 {
            0.0
        } else {
            let cond = record.eps_cond.as_ref().ok_or(ProbeError::MissingPredictions)?;
            cond.sub(uncond).map_err(|_| ProbeError::ShapeMismatch)?.scaled(w).rms()
        };
        out.push(GapNorms {
            rank,
            uncond_rms: uncond.rms(),
            gap_rms,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{GuidancePolicy, StepRecord};
    use crate::prompt::render::{render_example, template_bank};
    use crate::prompt::AttributeKind;
    use crate::rng;
    use proptest::prelude::*;

    fn step_image() -> LatentGrid {
        let mut g = LatentGrid::zeros(1, 16, 16);
        for i in 0..16 {
            for j in 8..16 {
                g.set(0, i, j, 1.0);
            }
            for j in 0..8 {
                g.set(0, i, j, -1.0);
            }
        }
        g
    }

    #[test]
    fn constant_image_has_no_edges() {
        let g = LatentGrid::filled(3, 16, 16, 0.3);
        let edges = canny_edges(&g, &CannyParams::default()).unwrap();
        assert_eq!(edges.count(), 0);
    }

    #[test]
    fn vertical_step_yields_a_single_vertical_line() {
        let g = step_image();
        let edges = canny_edges(&g, &CannyParams::default()).unwrap();
        let expected: Vec<(usize, usize)> = (0..16).map(|i| (i, 7)).collect();
        assert_eq!(edges.pixels(), expected);
    }

    #[test]
    fn canny_is_deterministic() {
        let img = render_example(
            &PromptSpec::new(0, 0, AttributeKind::Color).unwrap(),
            3,
            16,
            16,
        )
        .unwrap();
        let a = canny_edges(&img, &CannyParams::default()).unwrap();
        let b = canny_edges(&img, &CannyParams::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.count() > 0);
    }

    #[test]
    fn bad_thresholds_error() {
        let g = step_image();
        let bad = CannyParams {
            sigma: 1.0,
            t_low: 0.3,
            t_high: 0.2,
        };
        assert!(matches!(canny_edges(&g, &bad), Err(ProbeError::BadThresholds)));
    }

    fn map_from(pixels: &[(usize, usize)], m: usize, n: usize) -> EdgeMap {
        let mut mask = vec![false; m * n];
        for &(i, j) in pixels {
            mask[i * n + j] = true;
        }
        EdgeMap { m, n, mask }
    }

    #[test]
    fn f1_identity_disjoint_and_half() {
        let a = map_from(&[(1, 1), (2, 2), (3, 3), (4, 4)], 8, 8);
        assert_eq!(edge_f1(&a, &a, 0).unwrap(), 1.0);

        let far = map_from(&[(7, 7)], 8, 8);
        assert_eq!(edge_f1(&a, &far, 0).unwrap(), 0.0);

        // b holds half of a's pixels: precision 1, recall 0.5, F1 = 2/3.
        let b = map_from(&[(1, 1), (2, 2)], 8, 8);
        let f1 = edge_f1(&a, &b, 0).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);

        let empty = map_from(&[], 8, 8);
        assert_eq!(edge_f1(&empty, &empty, 0).unwrap(), 1.0);
        assert_eq!(edge_f1(&a, &empty, 0).unwrap(), 0.0);

        let wrong = map_from(&[], 4, 4);
        assert!(edge_f1(&a, &wrong, 0).is_err());
    }

    proptest! {
        #[test]
        fn f1_is_symmetric_at_zero_tolerance(seed in 0u64..300) {
            let mut r = rng::stream(seed, 0);
            let mut pix_a = alloc::vec::Vec::new();
            let mut pix_b = alloc::vec::Vec::new();
            for i in 0..8usize {
                for j in 0..8usize {
                    if rand::Rng::random::<f64>(&mut r) < 0.3 {
                        pix_a.push((i, j));
                    }
                    if rand::Rng::random::<f64>(&mut r) < 0.3 {
                        pix_b.push((i, j));
                    }
                }
            }
            let a = map_from(&pix_a, 8, 8);
            let b = map_from(&pix_b, 8, 8);
            let ab = edge_f1(&a, &b, 0).unwrap();
            let ba = edge_f1(&b, &a, 0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }

    fn uniform_map(pixels: usize, tokens: usize) -> AttentionMap {
        AttentionMap::from_rows(pixels, tokens, vec![1.0 / tokens as f64; pixels * tokens])
    }

    fn random_rows(pixels: usize, tokens: usize, seed: u64) -> AttentionMap {
        let mut r = rng::stream(seed, 1);
        let mut weights = Vec::with_capacity(pixels * tokens);
        for _ in 0..pixels {
            let raw: Vec<f64> = (0..tokens).map(|_| rand::Rng::random::<f64>(&mut r) + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            weights.extend(raw.into_iter().map(|v| v / sum));
        }
        AttentionMap::from_rows(pixels, tokens, weights)
    }

    #[test]
    fn kl_identity_nonnegativity_and_entropy_oracle() {
        let p = random_rows(32, 8, 3);
        assert!(attention_kl(&p, &p).unwrap().abs() < 1e-12);

        for seed in 0..20 {
            let a = random_rows(16, 8, 100 + seed);
            let b = random_rows(16, 8, 200 + seed);
            assert!(attention_kl(&a, &b).unwrap() >= 0.0);
        }

        // KL(P || uniform) = ln(L) - mean row entropy, up to smoothing.
        let p = random_rows(64, 8, 9);
        let u = uniform_map(64, 8);
        let kl = attention_kl(&p, &u).unwrap();
        let mut entropy_sum = 0.0;
        for pixel in 0..64 {
            entropy_sum += -p.row(pixel).iter().map(|w| w * w.ln()).sum::<f64>();
        }
        let expected = (8.0f64).ln() - entropy_sum / 64.0;
        assert!((kl - expected).abs() < 1e-6, "kl {kl} vs oracle {expected}");
    }

    #[test]
    fn l1_and_cosine_basics() {
        let a = LatentGrid::filled(1, 4, 4, 0.5);
        let b = LatentGrid::filled(1, 4, 4, -0.25);
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert!((l1_distance(&a, &b).unwrap() - 0.75).abs() < 1e-15);

        assert!((cosine_alignment(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.scaled(-1.0);
        assert!((cosine_alignment(&a, &neg).unwrap() + 1.0).abs() < 1e-12);

        let mut u = LatentGrid::zeros(1, 2, 2);
        let mut v = LatentGrid::zeros(1, 2, 2);
        u.set(0, 0, 0, 1.0);
        v.set(0, 0, 1, 1.0);
        assert!(cosine_alignment(&u, &v).unwrap().abs() < 1e-9);

        let zero = LatentGrid::zeros(1, 2, 2);
        assert!(matches!(
            cosine_alignment(&zero, &zero),
            Err(ProbeError::UndefinedInput)
        ));
    }

    #[test]
    fn relative_score_contract() {
        let scores = relative_score(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(scores, vec![1.0, 0.0, 0.5]);
        assert!(matches!(
            relative_score(&[2.0, 2.0]),
            Err(ProbeError::DegenerateRange)
        ));
    }

    proptest! {
        #[test]
        fn relative_score_is_affine_invariant(seed in 0u64..200) {
            let mut r = rng::stream(seed, 4);
            let values: alloc::vec::Vec<f64> = (0..12).map(|_| rand::Rng::random::<f64>(&mut r) * 10.0 - 5.0).collect();
            prop_assume!(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                > values.iter().cloned().fold(f64::INFINITY, f64::min));
            let base = relative_score(&values).unwrap();
            let transformed: alloc::vec::Vec<f64> = values.iter().map(|v| 2.5 * v + 7.0).collect();
            let scaled = relative_score(&transformed).unwrap();
            for (x, y) in base.iter().zip(&scaled) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn template_classifier_is_self_consistent() {
        let bank = template_bank(16, 16);
        for (spec, img) in &bank {
            let report = prompt_alignment(img, spec, &bank).unwrap();
            assert_eq!(report.combined, 1.0, "misclassified {spec:?}");
        }
        assert!(matches!(
            prompt_alignment(&bank[0].1, &bank[0].0, &[]),
            Err(ProbeError::EmptyBank)
        ));
    }

    #[test]
    fn noise_images_score_near_chance() {
        // Chance-level Monte-Carlo: pure-noise images carry no information
        // about their prompts, so over a batch with uniformly drawn target
        // prompts the mean shape accuracy sits at 1/n_nouns.
        let bank = template_bank(16, 16);
        let prompts = crate::prompt::PromptSpec::all();
        let mut hits = 0usize;
        let trials = 800;
        for trial in 0..trials {
            let mut r = rng::stream(9000 + trial as u64, 0);
            let target = prompts[rand::Rng::random_range(&mut r, 0..prompts.len())];
            let noise = LatentGrid::standard_normal(3, 16, 16, &mut r);
            let report = prompt_alignment(&noise, &target, &bank).unwrap();
            if report.shape_accuracy == 1.0 {
                hits += 1;
            }
        }
        let rate = hits as f64 / trials as f64;
        let chance = 1.0 / crate::prompt::N_NOUNS as f64;
        // Binomial 4-sigma band around 1/8 at 800 trials.
        assert!(
            (rate - chance).abs() < 0.05,
            "noise shape-accuracy {rate} vs chance {chance}"
        );
    }

    fn synthetic_trajectory(w: f64, with_cond: bool) -> Trajectory {
        let mut records = alloc::vec::Vec::new();
        records.push(StepRecord {
            step_rank: 2,
            t: 1000,
            x: LatentGrid::zeros(1, 4, 4),
            eps_hat: None,
            eps_cond: None,
            eps_uncond: None,
            attention: alloc::vec::Vec::new(),
            cond_evals: 0,
            uncond_evals: 0,
        });
        for (idx, rank) in [2usize, 1].iter().enumerate() {
            let mut r = rng::stream(50 + idx as u64, 0);
            let x = LatentGrid::standard_normal(1, 4, 4, &mut r);
            let uncond = LatentGrid::standard_normal(1, 4, 4, &mut r);
            let cond = LatentGrid::standard_normal(1, 4, 4, &mut r);
            records.push(StepRecord {
                step_rank: rank - 1,
                t: 0,
                x,
                eps_hat: Some(uncond.clone()),
                eps_cond: with_cond.then(|| cond.clone()),
                eps_uncond: Some(uncond),
                attention: alloc::vec![random_rows(16, 4, 70 + idx as u64)],
                cond_evals: with_cond as u32,
                uncond_evals: 1,
            });
        }
        Trajectory {
            policy: GuidancePolicy::full(w),
            seed: 0,
            records,
        }
    }

    #[test]
    fn gap_norms_zero_guidance_and_missing_records() {
        let traj = synthetic_trajectory(0.0, false);
        let norms = guidance_gap_norms(&traj).unwrap();
        assert!(norms.iter().all(|g| g.gap_rms == 0.0));
        assert!(norms.iter().all(|g| g.uncond_rms >= 0.0 && g.uncond_rms.is_finite()));

        let traj = synthetic_trajectory(7.5, false);
        assert!(matches!(
            guidance_gap_norms(&traj),
            Err(ProbeError::MissingPredictions)
        ));

        let traj = synthetic_trajectory(7.5, true);
        let norms = guidance_gap_norms(&traj).unwrap();
        assert_eq!(norms.len(), 2);
        assert!(norms.iter().all(|g| g.gap_rms > 0.0));
    }

    #[test]
    fn class_weights_of_uniform_attention() {
        let mut traj = synthetic_trajectory(7.5, true);
        for record in traj.records.iter_mut().skip(1) {
            record.attention = alloc::vec![uniform_map(16, 4)];
        }
        let tags = [TokenTag::Sos, TokenTag::Sem, TokenTag::Sem, TokenTag::Eos];
        let weights = attention_class_weights(&traj, &tags).unwrap();
        for w in &weights {
            assert!((w.sos - 0.25).abs() < 1e-12);
            assert!((w.sem - 0.25).abs() < 1e-12);
            assert!((w.eos - 0.25).abs() < 1e-12);
            // Class totals weighted by class counts recover a full
            // distribution.
            let total = w.sos * 1.0 + w.sem * 2.0 + w.eos * 1.0;
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn class_weight_totals_are_a_distribution_for_random_maps() {
        let traj = synthetic_trajectory(7.5, true);
        let tags = [TokenTag::Sos, TokenTag::Sem, TokenTag::Sem, TokenTag::Eos];
        let weights = attention_class_weights(&traj, &tags).unwrap();
        for w in &weights {
            let total = w.sos + 2.0 * w.sem + w.eos;
            assert!((total - 1.0).abs() < 1e-6, "total {total}");
        }
    }

    #[test]
    fn relative_f1_terminal_point_is_one() {
        // Build a trajectory whose final image and attention maps produce
        // non-degenerate edges.
        let img = render_example(&PromptSpec::new(0, 0, AttributeKind::Color).unwrap(), 0, 16, 16).unwrap();
        let mut traj = synthetic_trajectory(7.5, true);
        for record in traj.records.iter_mut() {
            record.x = img.clone();
        }
        for (idx, record) in traj.records.iter_mut().skip(1).enumerate() {
            // Attention concentrated on the glyph so edges exist.
            let mut weights = alloc::vec::Vec::new();
            for p in 0..256usize {
                let (i, j) = (p / 16, p % 16);
                let inside = img.get(0, i, j) > 0.0;
                let focus = if inside { 0.9 } else { 0.1 };
                weights.extend([focus, (1.0 - focus) / 3.0, (1.0 - focus) / 3.0, (1.0 - focus) / 3.0]);
            }
            let _ = idx;
            record.attention = alloc::vec![AttentionMap::from_rows(256, 4, weights)];
        }
        let curve = relative_f1_curve(&traj, &CannyParams::default(), DEFAULT_F1_TOL_PX).unwrap();
        assert_eq!(curve.last().unwrap().0, 1);
        assert_eq!(curve.last().unwrap().1, 1.0);
        assert_eq!(curve.len(), 2);
    }
}
