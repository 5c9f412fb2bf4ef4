//! Bit functions and word calculators.
//!
//! A bit function compares two fractionally offset samples of one input
//! channel against a learned margin; `K` of them in a fixed order form a
//! word calculator mapping a patch to a `K`-bit word. The hard path
//! thresholds with a Heaviside step. The soft path replaces the step with
//! a clamped linear ramp, which turns the word choice into a probability
//! distribution: the activity of word `b` is the product over bits of the
//! ramp evaluated with the sign that bit takes in `b`. Only bits whose
//! pre-threshold value falls inside the ramp's soft zone are undecided,
//! so the distribution is enumerated over those bits alone.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CtError, Result};
use crate::tensor::Tensor3;

/// Hard word calculators support at most this many bits; voting tables
/// have `2^K` rows, so larger `K` is a memory mistake, not a feature.
pub const MAX_BITS: usize = 16;

/// One bit function: compare the samples at `(+dx1, +dy1)` and
/// `(+dx2, +dy2)` of a fixed channel, against a margin threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct BitFunctionParams {
    pub dx1: f64,
    pub dy1: f64,
    pub dx2: f64,
    pub dy2: f64,
    pub threshold: f64,
    /// Input channel read by both samples. Fixed at construction, never
    /// trained.
    pub channel: usize,
}

impl BitFunctionParams {
    /// Gaussian draw for the trainable scalars, offsets clamped to the
    /// patch radius. Values are quantized through `f32` so a freshly
    /// built model survives 32-bit serialization bit-exactly.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, radius: f64, channel: usize) -> Self {
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let mut draw = || (normal.sample(rng) as f32) as f64;
        let mut p = BitFunctionParams {
            dx1: draw(),
            dy1: draw(),
            dx2: draw(),
            dy2: draw(),
            threshold: draw(),
            channel,
        };
        p.clamp_to_radius(radius);
        p
    }

    /// Clamps all four offsets into `[-radius, radius]`.
    pub fn clamp_to_radius(&mut self, radius: f64) {
        self.dx1 = self.dx1.clamp(-radius, radius);
        self.dy1 = self.dy1.clamp(-radius, radius);
        self.dx2 = self.dx2.clamp(-radius, radius);
        self.dy2 = self.dy2.clamp(-radius, radius);
    }
}

/// An ordered list of `K` bit functions over an `l x l` patch.
#[derive(Debug, Clone, PartialEq)]
pub struct WordCalculator {
    bits: Vec<BitFunctionParams>,
    patch_size: usize,
}

impl WordCalculator {
    pub fn new(bits: Vec<BitFunctionParams>, patch_size: usize) -> Result<Self> {
        if bits.is_empty() || bits.len() > MAX_BITS {
            return Err(CtError::BitBudget(bits.len(), 1, MAX_BITS));
        }
        if patch_size % 2 == 0 {
            return Err(CtError::BuildError {
                index: 0,
                reason: format!("patch size must be odd so the center pixel is integral, got {patch_size}"),
            });
        }
        Ok(WordCalculator { bits, patch_size })
    }

    /// Seeded construction: offsets and thresholds from `N(0, 1)`,
    /// channels taken from `channel_order` round-robin.
    pub fn random<R: Rng + ?Sized>(
        k: usize,
        patch_size: usize,
        channel_order: &[usize],
        next_channel: &mut usize,
        rng: &mut R,
    ) -> Result<Self> {
        let radius = (patch_size - 1) as f64 / 2.0;
        let bits = (0..k)
            .map(|_| {
                let c = channel_order[*next_channel % channel_order.len()];
                *next_channel += 1;
                BitFunctionParams::random(rng, radius, c)
            })
            .collect();
        WordCalculator::new(bits, patch_size)
    }

    pub fn k(&self) -> usize {
        self.bits.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn radius(&self) -> f64 {
        (self.patch_size - 1) as f64 / 2.0
    }

    pub fn bits(&self) -> &[BitFunctionParams] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [BitFunctionParams] {
        &mut self.bits
    }

    pub fn word_count(&self) -> usize {
        1 << self.bits.len()
    }

    /// Pre-threshold values of every bit function at patch center
    /// `(px, py)`, written into `out[..K]`.
    pub fn bit_values_into(&self, t_in: &Tensor3, px: usize, py: usize, out: &mut [f64]) {
        debug_assert!(out.len() >= self.bits.len());
        for (slot, params) in out.iter_mut().zip(&self.bits) {
            *slot = bit_value_unchecked(t_in, px, py, params);
        }
    }
}

#[inline]
pub(crate) fn bit_value_unchecked(
    t_in: &Tensor3,
    px: usize,
    py: usize,
    params: &BitFunctionParams,
) -> f64 {
    let (x, y) = (px as f64, py as f64);
    let a = t_in.sample_unchecked(x + params.dx1, y + params.dy1, params.channel);
    let b = t_in.sample_unchecked(x + params.dx2, y + params.dy2, params.channel);
    a - b - params.threshold
}

/// Pre-threshold bit value: difference of the two offset samples minus
/// the margin threshold.
pub fn bit_value(t_in: &Tensor3, px: usize, py: usize, params: &BitFunctionParams) -> Result<f64> {
    if params.channel >= t_in.depth() {
        return Err(CtError::InvalidChannel { channel: params.channel, depth: t_in.depth() });
    }
    Ok(bit_value_unchecked(t_in, px, py, params))
}

/// Heaviside step with the tie broken upward: `Q(0) = 1`.
#[inline]
pub fn bit_hard(value: f64) -> u32 {
    if value >= 0.0 {
        1
    } else {
        0
    }
}

/// The clamped linear ramp `q(x; t) = min(max((t + x) / 2t, 0), 1)`.
pub fn soft_sigmoid(x: f64, t: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(CtError::NonPositiveHalfWidth(t));
    }
    Ok(ramp(x, t))
}

#[inline]
fn ramp(x: f64, t: f64) -> f64 {
    ((t + x) / (2.0 * t)).clamp(0.0, 1.0)
}

/// Hard word index at `(px, py)`: bit 1 is the most significant bit, so
/// bits `(1, 1, 0)` read as the word `0b110 = 6`.
pub fn word_hard(t_in: &Tensor3, px: usize, py: usize, calc: &WordCalculator) -> u32 {
    let mut word = 0u32;
    for params in calc.bits() {
        word = (word << 1) | bit_hard(bit_value_unchecked(t_in, px, py, params));
    }
    word
}

/// Sign of bit `k` (1-based, MSB first) inside the `kbits`-bit word `b`:
/// `+1` when the bit is set, `-1` when clear.
#[inline]
pub fn bit_sign(b: u32, k: usize, kbits: usize) -> f64 {
    debug_assert!(k >= 1 && k <= kbits);
    if (b >> (kbits - k)) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Soft-mode configuration: ramp half-width and the activity floor below
/// which words are dropped from the sparse distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftConfig {
    t: f64,
    prune_eps: f64,
}

impl SoftConfig {
    pub fn new(t: f64, prune_eps: f64) -> Result<Self> {
        if t <= 0.0 {
            return Err(CtError::NonPositiveHalfWidth(t));
        }
        if !(prune_eps >= 0.0) {
            return Err(CtError::BadQuantileFraction(prune_eps));
        }
        Ok(SoftConfig { t, prune_eps })
    }

    /// Half-width 0.5, pruning floor 1e-8.
    pub fn default_training() -> Self {
        SoftConfig { t: 0.5, prune_eps: 1e-8 }
    }

    pub fn with_t(self, t: f64) -> Result<Self> {
        SoftConfig::new(t, self.prune_eps)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn prune_eps(&self) -> f64 {
        self.prune_eps
    }

    /// Whether the pruning floor is small enough (`< 2^-K`) that pruning
    /// can never remove a word a hard calculator would have chosen.
    pub fn prune_is_conservative_for(&self, k: usize) -> bool {
        self.prune_eps < (0.5f64).powi(k as i32)
    }

    /// The ramp at this configuration's half-width.
    #[inline]
    pub fn q(&self, x: f64) -> f64 {
        ramp(x, self.t)
    }
}

/// Sparse probability distribution over the `2^K` words.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftWordActivity {
    entries: Vec<(u32, f64)>,
}

impl SoftWordActivity {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }

    pub fn weight_of(&self, word: u32) -> f64 {
        self.entries
            .iter()
            .find(|(b, _)| *b == word)
            .map(|(_, w)| *w)
            .unwrap_or(0.0)
    }
}

/// Soft word activity at `(px, py)` from precomputed bit values.
///
/// Bits outside the soft zone are pinned to their hard value; each
/// ambiguous bit (|value| < t) doubles the set of reachable words, and
/// the weight of a word is the product of its bits' ramp activities.
/// Words never pick the zero side of a saturated bit, so the whole
/// `2^K`-way product never materializes.
pub fn word_soft_from_values(values: &[f64], cfg: &SoftConfig) -> SoftWordActivity {
    let k = values.len();
    debug_assert!(k <= MAX_BITS);
    let mut base = 0u32;
    let mut ambiguous: Vec<(usize, f64)> = Vec::new(); // (bit position from MSB, p1)
    for (i, &v) in values.iter().enumerate() {
        let p1 = cfg.q(v);
        if v.abs() < cfg.t {
            ambiguous.push((i, p1));
        } else if p1 >= 1.0 {
            base |= 1 << (k - 1 - i);
        }
    }
    let a = ambiguous.len();
    let mut entries = Vec::with_capacity(1 << a);
    for choice in 0u32..(1 << a) {
        let mut word = base;
        let mut weight = 1.0;
        for (j, &(i, p1)) in ambiguous.iter().enumerate() {
            if (choice >> j) & 1 == 1 {
                word |= 1 << (k - 1 - i);
                weight *= p1;
            } else {
                weight *= cfg.q(-values[i]);
            }
        }
        if weight >= cfg.prune_eps && weight > 0.0 {
            entries.push((word, weight));
        }
    }
    SoftWordActivity { entries }
}

/// Soft word activity of `calc` at `(px, py)`.
pub fn word_soft(
    t_in: &Tensor3,
    px: usize,
    py: usize,
    calc: &WordCalculator,
    cfg: &SoftConfig,
) -> SoftWordActivity {
    let mut values = [0.0f64; MAX_BITS];
    calc.bit_values_into(t_in, px, py, &mut values);
    word_soft_from_values(&values[..calc.k()], cfg)
}

/// The `f`-quantile of observed |bit values|: the half-width `t` that
/// puts a fraction `f` of the observations inside the soft zone
/// `[-t, t]`.
pub fn calibrate_t(observed_abs_values: &[f64], f: f64) -> Result<f64> {
    if observed_abs_values.is_empty() {
        return Err(CtError::EmptySample);
    }
    if !(f > 0.0 && f < 1.0) {
        return Err(CtError::BadQuantileFraction(f));
    }
    let mut sorted = observed_abs_values.to_vec();
    let n = sorted.len();
    let idx = ((f * n as f64).ceil() as usize).saturating_sub(1).min(n - 1);
    let (_, t, _) = sorted.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
    Ok(*t)
}
