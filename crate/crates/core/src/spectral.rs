//! 2D discrete Fourier analysis of latents.
//!
//! The transform carries the `1/(MN)` normalization,
//! `F(u,v) = (1/MN) sum_{k,l} x_{kl} exp(-2*pi*i*(ku/M + lv/N))`,
//! under which a real grid satisfies Parseval as
//! `sum |F|^2 = (1/MN) sum x^2` and a standard-Gaussian grid has expected
//! per-bin power exactly `1/(MN)`. The implementation factorizes the double
//! sum row-column with precomputed twiddle tables; the defining double sum
//! stays the correctness oracle in the tests.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;
use num_traits::Float;

use crate::engine;
use crate::grid::LatentGrid;
use crate::rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpectralError {
    /// dft2/idft2 operate on one channel at a time.
    SingleChannelRequired,
    /// Band fraction outside (0, 1).
    FractionOutOfRange,
    /// Zero-sized grid or zero trial count.
    DegenerateParameters,
    /// Batch empty or shapes inconsistent.
    BadBatch,
}

impl fmt::Display for SpectralError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralError::SingleChannelRequired => write!(f, "operation requires a single-channel grid"),
            SpectralError::FractionOutOfRange => write!(f, "band fraction must lie strictly between 0 and 1"),
            SpectralError::DegenerateParameters => write!(f, "grid dimensions and trial count must be positive"),
            SpectralError::BadBatch => write!(f, "batch must be non-empty with matching shapes"),
        }
    }
}

impl core::error::Error for SpectralError {}

/// Compensated (Kahan) accumulator so reported means do not depend on
/// reduction order beyond 1e-12.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub(crate) fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum
    }
}

/// Complex spectrum of an `M x N` real grid under the `1/(MN)` normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    m: usize,
    n: usize,
    coeffs: Vec<Complex64>, // row-major, index u * n + v
}

impl Spectrum {
    pub fn from_coeffs(m: usize, n: usize, coeffs: Vec<Complex64>) -> Result<Self, SpectralError> {
        if m == 0 || n == 0 || coeffs.len() != m * n {
            return Err(SpectralError::DegenerateParameters);
        }
        Ok(Self { m, n, coeffs })
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn bin(&self, u: usize, v: usize) -> Complex64 {
        self.coeffs[u * self.n + v]
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    /// Sum of squared bin magnitudes.
    pub fn total_power(&self) -> f64 {
        let mut acc = KahanSum::default();
        for c in &self.coeffs {
            acc.add(c.norm_sqr());
        }
        acc.value()
    }
}

/// Twiddle table `exp(-2*pi*i*r/len)` for `r in 0..len`.
fn twiddles(len: usize, sign: f64) -> Vec<Complex64> {
    (0..len)
        .map(|r| {
            let angle = sign * core::f64::consts::TAU * r as f64 / len as f64;
            Complex64::new(angle.cos(), angle.sin())
        })
        .collect()
}

fn plane_dft(data: &[f64], m: usize, n: usize) -> Vec<Complex64> {
    let wn = twiddles(n, -1.0);
    let wm = twiddles(m, -1.0);
    // Transform rows: G[k][v] = sum_l x[k][l] * wn[(l*v) % n]
    let mut rows = vec![Complex64::ZERO; m * n];
    for k in 0..m {
        for v in 0..n {
            let mut acc = Complex64::ZERO;
            for l in 0..n {
                acc += data[k * n + l] * wn[(l * v) % n];
            }
            rows[k * n + v] = acc;
        }
    }
    // Transform columns and normalize.
    let scale = 1.0 / (m * n) as f64;
    let mut out = vec![Complex64::ZERO; m * n];
    for u in 0..m {
        for v in 0..n {
            let mut acc = Complex64::ZERO;
            for k in 0..m {
                acc += rows[k * n + v] * wm[(k * u) % m];
            }
            out[u * n + v] = acc * scale;
        }
    }
    out
}

fn plane_idft(coeffs: &[Complex64], m: usize, n: usize) -> Vec<Complex64> {
    let wn = twiddles(n, 1.0);
    let wm = twiddles(m, 1.0);
    let mut rows = vec![Complex64::ZERO; m * n];
    for u in 0..m {
        for l in 0..n {
            let mut acc = Complex64::ZERO;
            for v in 0..n {
                acc += coeffs[u * n + v] * wn[(v * l) % n];
            }
            rows[u * n + l] = acc;
        }
    }
    let mut out = vec![Complex64::ZERO; m * n];
    for k in 0..m {
        for l in 0..n {
            let mut acc = Complex64::ZERO;
            for u in 0..m {
                acc += rows[u * n + l] * wm[(u * k) % m];
            }
            out[k * n + l] = acc;
        }
    }
    out
}

/// Forward transform of a single-channel grid.
pub fn dft2(x: &LatentGrid) -> Result<Spectrum, SpectralError> {
    if x.channels() != 1 {
        return Err(SpectralError::SingleChannelRequired);
    }
    let (m, n) = (x.rows(), x.cols());
    Ok(Spectrum {
        m,
        n,
        coeffs: plane_dft(x.channel(0), m, n),
    })
}

/// Inverse transform; returns the real part. Imaginary residue of a
/// roundtrip stays below 1e-9.
pub fn idft2(s: &Spectrum) -> LatentGrid {
    let values = plane_idft(&s.coeffs, s.m, s.n);
    let data = values.iter().map(|c| c.re).collect();
    LatentGrid::from_vec(1, s.m, s.n, data).expect("spectrum dimensions are valid")
}

/// Largest absolute imaginary component of the inverse transform, for
/// checking the roundtrip contract.
pub fn idft2_imag_residue(s: &Spectrum) -> f64 {
    plane_idft(&s.coeffs, s.m, s.n)
        .iter()
        .map(|c| c.im.abs())
        .fold(0.0, f64::max)
}

/// Normalized radial frequency of bin `(u, v)`:
/// `sqrt((min(u, M-u)/M)^2 + (min(v, N-v)/N)^2)`.
fn radial_frequency(u: usize, v: usize, m: usize, n: usize) -> f64 {
    let fu = u.min(m - u) as f64 / m as f64;
    let fv = v.min(n - v) as f64 / n as f64;
    (fu * fu + fv * fv).sqrt()
}

/// Boolean low-band membership over all `M x N` bins.
///
/// The low band holds the `floor(fraction * M * N)` bins of smallest
/// normalized radial frequency, ties broken lexicographically by `(u, v)`
/// into the low band; the DC bin always qualifies. The high band is the
/// complement, so the two masks partition the bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMask {
    m: usize,
    n: usize,
    fraction: f64,
    membership: Vec<bool>,
}

impl BandMask {
    pub fn low(m: usize, n: usize, fraction: f64) -> Result<Self, SpectralError> {
        if m == 0 || n == 0 {
            return Err(SpectralError::DegenerateParameters);
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(SpectralError::FractionOutOfRange);
        }
        let mut order: Vec<(usize, usize)> = (0..m)
            .flat_map(|u| (0..n).map(move |v| (u, v)))
            .collect();
        order.sort_by(|&(ua, va), &(ub, vb)| {
            radial_frequency(ua, va, m, n)
                .partial_cmp(&radial_frequency(ub, vb, m, n))
                .expect("radial frequencies are finite")
                .then((ua, va).cmp(&(ub, vb)))
        });
        let take = ((fraction * (m * n) as f64).floor() as usize).max(1);
        let mut membership = vec![false; m * n];
        for &(u, v) in order.iter().take(take) {
            membership[u * n + v] = true;
        }
        Ok(Self {
            m,
            n,
            fraction,
            membership,
        })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        self.membership[u * self.n + v]
    }

    pub fn len(&self) -> usize {
        self.m * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn bin_count(&self) -> usize {
        self.membership.iter().filter(|b| **b).count()
    }

    fn apply(&self, s: &Spectrum, keep_member: bool) -> Spectrum {
        let coeffs = s
            .coeffs
            .iter()
            .zip(&self.membership)
            .map(|(c, &inside)| if inside == keep_member { *c } else { Complex64::ZERO })
            .collect();
        Spectrum {
            m: s.m,
            n: s.n,
            coeffs,
        }
    }
}

/// Splits every channel of `x` into low- and high-frequency parts that sum
/// back to `x`.
pub fn band_split(x: &LatentGrid, fraction: f64) -> Result<(LatentGrid, LatentGrid), SpectralError> {
    let mask = BandMask::low(x.rows(), x.cols(), fraction)?;
    band_split_with(x, &mask)
}

/// Split against a prebuilt mask (saves recomputing the sort per call).
pub fn band_split_with(x: &LatentGrid, mask: &BandMask) -> Result<(LatentGrid, LatentGrid), SpectralError> {
    let (c, m, n) = x.shape();
    if mask.m != m || mask.n != n {
        return Err(SpectralError::BadBatch);
    }
    band_split_with_shape(x, mask, c, m, n)
}

fn band_split_with_shape(
    x: &LatentGrid,
    mask: &BandMask,
    c: usize,
    m: usize,
    n: usize,
) -> Result<(LatentGrid, LatentGrid), SpectralError> {
    let mut low = LatentGrid::zeros(c, m, n);
    let mut high = LatentGrid::zeros(c, m, n);
    for ch in 0..c {
        let spectrum = Spectrum {
            m,
            n,
            coeffs: plane_dft(x.channel(ch), m, n),
        };
        let low_plane = plane_idft(&mask.apply(&spectrum, true).coeffs, m, n);
        let high_plane = plane_idft(&mask.apply(&spectrum, false).coeffs, m, n);
        for (dst, src) in low.channel_mut(ch).iter_mut().zip(&low_plane) {
            *dst = src.re;
        }
        for (dst, src) in high.channel_mut(ch).iter_mut().zip(&high_plane) {
            *dst = src.re;
        }
    }
    Ok((low, high))
}

/// Statistics from the Monte-Carlo verification of the per-bin noise power.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub m: usize,
    pub n: usize,
    pub trials: usize,
    /// Grand mean of `|F_eps(u,v)|^2` over all bins and trials.
    pub mean_bin_power: f64,
    /// Exact expectation `1/(MN)`.
    pub expected_bin_power: f64,
    /// Maximum over bins of the per-bin trial mean.
    pub max_bin_power: f64,
    /// Fraction of `(trial, bin)` samples exceeding the Bernstein-style
    /// bound `(1/MN) * (1 + sqrt(8 ln(2MN/delta)))` at `delta = 0.05`.
    pub bound_violation_rate: f64,
}

/// Confidence parameter of the concentration bound.
pub const CONCENTRATION_DELTA: f64 = 0.05;

/// Draws standard-Gaussian grids and measures per-bin spectral power.
pub fn verify_noise_concentration(
    m: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport, SpectralError> {
    if m == 0 || n == 0 || trials == 0 {
        return Err(SpectralError::DegenerateParameters);
    }
    let bins = m * n;
    let expected = 1.0 / bins as f64;
    let threshold = expected * (1.0 + (8.0 * (2.0 * bins as f64 / CONCENTRATION_DELTA).ln()).sqrt());

    let mut grand = KahanSum::default();
    let mut per_bin = vec![KahanSum::default(); bins];
    let mut violations: u64 = 0;
    for trial in 0..trials {
        let mut r = rng::stream(seed, trial as u64);
        let eps = LatentGrid::standard_normal(1, m, n, &mut r);
        let coeffs = plane_dft(eps.channel(0), m, n);
        for (bin, c) in coeffs.iter().enumerate() {
            let power = c.norm_sqr();
            grand.add(power);
            per_bin[bin].add(power);
            if power > threshold {
                violations += 1;
            }
        }
    }

    let samples = (trials * bins) as f64;
    let max_bin_power = per_bin
        .iter()
        .map(|k| k.value() / trials as f64)
        .fold(0.0, f64::max);
    Ok(ConcentrationReport {
        m,
        n,
        trials,
        mean_bin_power: grand.value() / samples,
        expected_bin_power: expected,
        max_bin_power,
        bound_violation_rate: violations as f64 / samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

impl Band {
    pub fn as_str(&self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::High => "high",
        }
    }
}

/// Band norms at or below this are treated as zero when deciding ratio
/// exclusions (a constant image's high band is zero up to DFT rounding).
pub const BAND_NORM_FLOOR: f64 = 1e-9;

/// One averaged measurement of the forward corruption at a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub t: usize,
    pub band: Band,
    /// Mean over the batch of `sqrt(alpha_bar_t) * ||x0_band||`.
    pub signal_norm: f64,
    /// Mean over the batch of `sqrt(1 - alpha_bar_t) * ||eps_band||`.
    pub noise_norm: f64,
    /// Mean over the batch of `||x_t_band - x0_band|| / ||x0_band||`.
    pub variation_ratio: f64,
    /// Images contributing to the ratio (those with `||x0_band|| > 0`).
    pub n_images: usize,
}

/// Forward-corruption measurements over `{0} + sampled timesteps`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
    /// `(image index, band)` pairs excluded from ratios for zero band norm.
    pub excluded: Vec<(usize, Band)>,
}

/// Measures band-wise signal/noise norms and variation ratios of the forward
/// process over a batch, with a fresh seeded noise draw per `(image, t)`.
pub fn corruption_curves(
    x0_batch: &[LatentGrid],
    sched: &NoiseSchedule,
    fraction: f64,
    seed: u64,
) -> Result<CurveTable, SpectralError> {
    let first = x0_batch.first().ok_or(SpectralError::BadBatch)?;
    let (c, m, n) = first.shape();
    if x0_batch.iter().any(|x| x.shape() != (c, m, n)) {
        return Err(SpectralError::BadBatch);
    }
    let mask = BandMask::low(m, n, fraction)?;

    let x0_bands: Vec<(LatentGrid, LatentGrid)> = x0_batch
        .iter()
        .map(|x| band_split_with(x, &mask))
        .collect::<Result<_, _>>()?;

    let mut table = CurveTable::default();
    for (idx, (low, high)) in x0_bands.iter().enumerate() {
        if low.l2_norm() <= BAND_NORM_FLOOR {
            table.excluded.push((idx, Band::Low));
        }
        if high.l2_norm() <= BAND_NORM_FLOOR {
            table.excluded.push((idx, Band::High));
        }
    }

    let mut timesteps = Vec::with_capacity(sched.num_sampled_steps() + 1);
    timesteps.push(0);
    timesteps.extend_from_slice(sched.ddim_steps());

    for &t in &timesteps {
        let sqrt_ab = sched.sqrt_alpha_bar(t);
        let sqrt_1mab = sched.sqrt_one_minus_alpha_bar(t);
        let mut acc = [[KahanSum::default(); 3]; 2]; // [band][signal, noise, ratio]
        let mut counted = [0usize; 2];

        for (idx, x0) in x0_batch.iter().enumerate() {
            let (x0_low, x0_high) = &x0_bands[idx];
            let (eps_low, eps_high, xt_low, xt_high);
            if t == 0 {
                eps_low = None;
                eps_high = None;
                xt_low = x0_low.clone();
                xt_high = x0_high.clone();
            } else {
                let mut r = rng::stream2(seed, idx as u64, t as u64);
                let eps = LatentGrid::standard_normal(c, m, n, &mut r);
                let x_t = engine::forward_noise(x0, t, &eps, sched).expect("validated shapes");
                let (el, eh) = band_split_with(&eps, &mask)?;
                let (xl, xh) = band_split_with(&x_t, &mask)?;
                eps_low = Some(el);
                eps_high = Some(eh);
                xt_low = xl;
                xt_high = xh;
            }

            for (b, (x0_band, xt_band, eps_band)) in [
                (x0_low, &xt_low, eps_low.as_ref()),
                (x0_high, &xt_high, eps_high.as_ref()),
            ]
            .into_iter()
            .enumerate()
            {
                let base = x0_band.l2_norm();
                acc[b][0].add(sqrt_ab * base);
                acc[b][1].add(sqrt_1mab * eps_band.map_or(0.0, LatentGrid::l2_norm));
                if base > BAND_NORM_FLOOR {
                    let diff = xt_band.sub(x0_band).expect("same shape").l2_norm();
                    acc[b][2].add(diff / base);
                    counted[b] += 1;
                }
            }
        }

        for (b, band) in [Band::Low, Band::High].into_iter().enumerate() {
            let n_total = x0_batch.len() as f64;
            table.rows.push(CurveRow {
                t,
                band,
                signal_norm: acc[b][0].value() / n_total,
                noise_norm: acc[b][1].value() / n_total,
                variation_ratio: if counted[b] > 0 {
                    acc[b][2].value() / counted[b] as f64
                } else {
                    0.0
                },
                n_images: counted[b],
            });
        }
    }
    Ok(table)
}
