//! Executable capacity constructions over `[0, 1]^d` with single-entry
//! bit functions, each paired with a brute-force verifier.
//!
//! Two constructions live here. The shattering instance puts `2^K`
//! points on a cube so that a `K`-bit fern maps each point to its own
//! word; any labeling is then realized by writing the labels straight
//! into a `{-1, +1}` table, which witnesses a VC dimension of at least
//! `2^K`. The rectangle network builds, from `2d` one-bit ferns per
//! rectangle plus one combining fern each, a two-layer net computing an
//! exact weighted sum of rectangle indicators — the step functions that
//! make two-layer fern networks universal approximators.

use crate::error::{CtError, Result};

/// A bit function over a plain vector: compare one coordinate against a
/// threshold, in either direction. `Q(0) = 1`, so "at least" fires on
/// equality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleBitFunction {
    /// Fires on `x[dim] >= thresh` when true, on `x[dim] <= thresh`
    /// when false.
    pub at_least: bool,
    pub dim: usize,
    pub thresh: f64,
}

impl SimpleBitFunction {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> u32 {
        let v = x[self.dim] - self.thresh;
        let signed = if self.at_least { v } else { -v };
        (signed >= 0.0) as u32
    }
}

/// A flat `K`-bit fern over vectors; word index is MSB-first in bit
/// order, matching the image-based calculators.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleFern {
    pub bits: Vec<SimpleBitFunction>,
}

impl SimpleFern {
    pub fn k(&self) -> usize {
        self.bits.len()
    }

    pub fn word(&self, x: &[f64]) -> u32 {
        let mut word = 0;
        for bit in &self.bits {
            word = (word << 1) | bit.eval(x);
        }
        word
    }
}

/// A fern plus the sample of cube vertices it shatters.
#[derive(Debug, Clone, PartialEq)]
pub struct ShatterInstance {
    pub fern: SimpleFern,
    pub sample: Vec<Vec<f64>>,
}

/// Largest `K` the exhaustive/brute-force verifiers are budgeted for.
pub const MAX_SHATTER_BITS: usize = 6;

/// The `2^K` vertices of a cube embedded at coordinates 0.25/0.75 in
/// `[0, 1]^K`, with one threshold-at-0.5 bit per dimension. Each vertex
/// lands in its own word.
pub fn build_shatter_instance(k: usize) -> Result<ShatterInstance> {
    if k < 1 || k > MAX_SHATTER_BITS {
        return Err(CtError::BitBudget(k, 1, MAX_SHATTER_BITS));
    }
    let bits = (0..k)
        .map(|dim| SimpleBitFunction { at_least: true, dim, thresh: 0.5 })
        .collect();
    let sample = (0..1u32 << k)
        .map(|c| {
            (0..k)
                .map(|i| if (c >> (k - 1 - i)) & 1 == 1 { 0.75 } else { 0.25 })
                .collect()
        })
        .collect();
    Ok(ShatterInstance { fern: SimpleFern { bits }, sample })
}

/// Checks that every supplied labeling is realizable by some table in
/// `{-1, +1}^{2^K}` over the fern's words — constructively, by writing
/// each point's label into its word's cell and rejecting collisions.
///
/// Labelings are bitmasks: bit `i` set means sample point `i` is labeled
/// `+1`.
pub fn verify_shatter<I>(fern: &SimpleFern, sample: &[Vec<f64>], labelings: I) -> bool
where
    I: IntoIterator<Item = u64>,
{
    assert!(sample.len() <= 64, "bitmask labelings support at most 64 points");
    let words: Vec<u32> = sample.iter().map(|x| fern.word(x)).collect();
    let cells = 1usize << fern.k();
    for labeling in labelings {
        let mut table = vec![0i8; cells];
        let mut ok = true;
        for (i, &word) in words.iter().enumerate() {
            let label: i8 = if (labeling >> i) & 1 == 1 { 1 } else { -1 };
            let cell = &mut table[word as usize];
            if *cell == 0 {
                *cell = label;
            } else if *cell != label {
                ok = false;
                break;
            }
        }
        if !(ok && words.iter().enumerate().all(|(i, &w)| {
            let label: i8 = if (labeling >> i) & 1 == 1 { 1 } else { -1 };
            table[w as usize] == label
        })) {
            return false;
        }
    }
    true
}

/// An axis-aligned box in `[0, 1]^d` carrying a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RectangleSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub value: f64,
}

impl RectangleSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.lo.len() != d || self.hi.len() != d {
            return Err(CtError::InvalidRectangle(format!(
                "bounds have {}/{} entries, expected {d}",
                self.lo.len(),
                self.hi.len()
            )));
        }
        for i in 0..d {
            if !(0.0..=1.0).contains(&self.lo[i]) || !(0.0..=1.0).contains(&self.hi[i]) {
                return Err(CtError::InvalidRectangle(format!("bounds in dim {i} leave [0,1]")));
            }
            if self.lo[i] > self.hi[i] {
                return Err(CtError::InvalidRectangle(format!("lo > hi in dim {i}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// Distance of `x` to the nearest face (0 on a boundary).
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (lo, hi))| (v - lo).abs().min((v - hi).abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// A one-bit fern: a bit function choosing one of two output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBitFern {
    pub bit: SimpleBitFunction,
    /// `rows[0]` votes when the bit is 0, `rows[1]` when it is 1.
    pub rows: [Vec<f64>; 2],
}

impl OneBitFern {
    #[inline]
    fn vote(&self, x: &[f64], out: &mut [f64]) {
        let row = &self.rows[self.bit.eval(x) as usize];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Two layers of one-bit ferns computing `sum_p v_p * 1[x in R_p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RectangleNetwork {
    dims: usize,
    rects: Vec<RectangleSpec>,
    layer1: Vec<OneBitFern>,
    layer2: Vec<OneBitFern>,
}

/// Builds the two-layer construction for `rects` over `[0, 1]^dims`.
///
/// Layer 1 holds, per rectangle `p`, the `2 * dims` one-bit ferns
/// testing `x_i >= lo_i` and `x_i <= hi_i`, each voting the indicator of
/// output channel `p`, so channel `p` counts satisfied face constraints.
/// Layer 2 holds one fern per rectangle thresholding that count at
/// `2 * dims - 1/2` and voting `[0, v_p]`.
pub fn build_rectangle_network(rects: &[RectangleSpec], dims: usize) -> Result<RectangleNetwork> {
    if rects.is_empty() {
        return Err(CtError::InvalidRectangle("need at least one rectangle".into()));
    }
    let p_count = rects.len();
    let mut layer1 = Vec::with_capacity(p_count * 2 * dims);
    for (p, rect) in rects.iter().enumerate() {
        rect.validate(dims)?;
        let mut indicator = vec![0.0; p_count];
        indicator[p] = 1.0;
        for dim in 0..dims {
            layer1.push(OneBitFern {
                bit: SimpleBitFunction { at_least: true, dim, thresh: rect.lo[dim] },
                rows: [vec![0.0; p_count], indicator.clone()],
            });
            layer1.push(OneBitFern {
                bit: SimpleBitFunction { at_least: false, dim, thresh: rect.hi[dim] },
                rows: [vec![0.0; p_count], indicator.clone()],
            });
        }
    }
    let face_threshold = 2.0 * dims as f64 - 0.5;
    let layer2 = rects
        .iter()
        .enumerate()
        .map(|(p, rect)| OneBitFern {
            bit: SimpleBitFunction { at_least: true, dim: p, thresh: face_threshold },
            rows: [vec![0.0], vec![rect.value]],
        })
        .collect();
    Ok(RectangleNetwork { dims, rects: rects.to_vec(), layer1, layer2 })
}

impl RectangleNetwork {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn rectangles(&self) -> &[RectangleSpec] {
        &self.rects
    }

    /// Per-rectangle satisfied-face counts (the layer-1 output vector).
    pub fn face_counts(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dims);
        let mut y = vec![0.0; self.rects.len()];
        for fern in &self.layer1 {
            fern.vote(x, &mut y);
        }
        y
    }

    /// The network output `sum_p v_p * 1[x in R_p]`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let y = self.face_counts(x);
        let mut out = [0.0];
        for fern in &self.layer2 {
            fern.vote(&y, &mut out);
        }
        out[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shatter_instance_words_are_a_permutation() {
        for k in 1..=MAX_SHATTER_BITS {
            let inst = build_shatter_instance(k).unwrap();
            assert_eq!(inst.sample.len(), 1 << k);
            let mut words: Vec<u32> = inst.sample.iter().map(|x| inst.fern.word(x)).collect();
            words.sort_unstable();
            let expect: Vec<u32> = (0..1u32 << k).collect();
            assert_eq!(words, expect);
        }
        assert!(build_shatter_instance(0).is_err());
        assert!(build_shatter_instance(7).is_err());
    }

    #[test]
    fn small_instances_shatter_exhaustively() {
        for k in 1..=3usize {
            let inst = build_shatter_instance(k).unwrap();
            let n = inst.sample.len();
            assert!(verify_shatter(&inst.fern, &inst.sample, 0..(1u64 << n)));
        }
    }

    #[test]
    fn random_labelings_shatter_at_k5() {
        let inst = build_shatter_instance(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labelings: Vec<u64> = (0..200).map(|_| rng.gen::<u64>() & u64::MAX >> (64 - 32)).collect();
        assert!(verify_shatter(&inst.fern, &inst.sample, labelings));
    }

    #[test]
    fn coincident_points_cannot_be_split() {
        let inst = build_shatter_instance(2).unwrap();
        let mut sample = inst.sample.clone();
        sample[1] = sample[0].clone(); // duplicate point
        // labeling 0b01 splits the coincident pair
        assert!(!verify_shatter(&inst.fern, &sample, [0b01u64]));
        // but a labeling agreeing on the pair is still realizable
        assert!(verify_shatter(&inst.fern, &sample, [0b11u64]));
    }

    #[test]
    fn single_rectangle_membership() {
        let rect = RectangleSpec { lo: vec![0.2, 0.2], hi: vec![0.8, 0.8], value: 1.0 };
        let net = build_rectangle_network(&[rect], 2).unwrap();
        assert_eq!(net.evaluate(&[0.5, 0.5]), 1.0);
        assert_eq!(net.evaluate(&[0.9, 0.5]), 0.0);
        assert_eq!(net.evaluate(&[0.1, 0.1]), 0.0);
    }

    #[test]
    fn face_counts_hit_two_d_exactly_inside() {
        let rect = RectangleSpec { lo: vec![0.1, 0.3, 0.2], hi: vec![0.6, 0.9, 0.7], value: 2.0 };
        let net = build_rectangle_network(&[rect.clone()], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            if rect.boundary_distance(&x) < 1e-9 {
                continue;
            }
            let y = net.face_counts(&x)[0];
            if rect.contains(&x) {
                assert_eq!(y, 6.0);
            } else {
                assert!(y < 5.5);
            }
        }
    }

    #[test]
    fn disjoint_rectangles_sum_their_values() {
        let rects = vec![
            RectangleSpec { lo: vec![0.0, 0.0], hi: vec![0.4, 0.4], value: 2.0 },
            RectangleSpec { lo: vec![0.6, 0.6], hi: vec![1.0, 1.0], value: -1.0 },
        ];
        let net = build_rectangle_network(&rects, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();
            if rects.iter().any(|r| r.boundary_distance(&x) < 1e-9) {
                continue;
            }
            let expect: f64 = rects.iter().filter(|r| r.contains(&x)).map(|r| r.value).sum();
            assert_eq!(net.evaluate(&x), expect);
        }
    }

    #[test]
    fn overlapping_rectangles_accumulate() {
        let rects = vec![
            RectangleSpec { lo: vec![0.0], hi: vec![0.6], value: 1.5 },
            RectangleSpec { lo: vec![0.4], hi: vec![1.0], value: 0.25 },
        ];
        let net = build_rectangle_network(&rects, 1).unwrap();
        assert_eq!(net.evaluate(&[0.5]), 1.75);
        assert_eq!(net.evaluate(&[0.1]), 1.5);
        assert_eq!(net.evaluate(&[0.9]), 0.25);
    }

    #[test]
    fn invalid_rectangles_are_rejected() {
        let bad = RectangleSpec { lo: vec![0.5], hi: vec![0.2], value: 1.0 };
        assert!(build_rectangle_network(&[bad], 1).is_err());
        let outside = RectangleSpec { lo: vec![-0.1], hi: vec![0.5], value: 1.0 };
        assert!(build_rectangle_network(&[outside], 1).is_err());
        let wrong_dims = RectangleSpec { lo: vec![0.1], hi: vec![0.5], value: 1.0 };
        assert!(build_rectangle_network(&[wrong_dims], 2).is_err());
        assert!(build_rectangle_network(&[], 1).is_err());
    }
}
