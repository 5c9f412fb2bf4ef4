//! Operation-count and memory models comparing CT layers to convolution,
//! plus a small wall-clock harness.
//!
//! Per output location a convolution costs `l^2 * D_i * D_o` while a CT
//! layer costs `M * (C_b * K + D_o)` with `C_b` the fixed price of one
//! bit function (offset adds, threshold subtract, loads) — ten in the
//! accounting used throughout. The CT cost does not contain `l` at all,
//! which is the whole bargain: patch size is free, memory is what you
//! pay with.

use std::time::Instant;

use crate::network::Network;
use crate::tensor::Tensor3;

/// Default per-bit operation cost.
pub const DEFAULT_C_B: u64 = 10;

/// Cost summary for one network under both cost models.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    /// Total ops for a convolutional layer stack of the same geometry.
    pub ops_cnn: u64,
    /// Total ops for the CT layer stack.
    pub ops_ct: u64,
    /// `ops_cnn / ops_ct`.
    pub ratio: f64,
    /// Learnable scalar count (table entries plus bit parameters).
    pub params: u64,
    /// Model bytes with 32-bit tables.
    pub bytes_f32: u64,
    /// Model bytes with 8-bit tables (bit parameters stay 32-bit).
    pub bytes_i8: u64,
}

/// Storage precision for voting-table entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    I8,
}

impl Precision {
    pub fn table_entry_bytes(self) -> u64 {
        match self {
            Precision::F32 => 4,
            Precision::I8 => 1,
        }
    }
}

/// Convolution ops per output location: `l^2 * d_in * d_out`.
pub fn cost_cnn(l: u64, d_in: u64, d_out: u64) -> u64 {
    l * l * d_in * d_out
}

/// CNN:CT complexity ratio at shared representation width `D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupRatio {
    /// `l^2 D^2 / (c_b D R + D^2 R / K)`, the full expression.
    pub exact: f64,
    /// `K l^2 / R`, the large-`D` limit.
    pub asymptotic: f64,
}

/// Evaluates the complexity ratio for patch size `l`, `K` bits, channel
/// reuse factor `R`, width `D`, and per-bit cost `c_b`.
pub fn speedup_ratio(l: f64, k: f64, r: f64, d: f64, c_b: f64) -> SpeedupRatio {
    let exact = (l * l * d * d) / (c_b * d * r + d * d * r / k);
    SpeedupRatio { exact, asymptotic: k * l * l / r }
}

/// Table/bit-parameter dimensions of one CT layer, for the memory model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub m: u64,
    pub k: u32,
    pub d_out: u64,
    /// Learnable scalars in the layer's bit functions (5 per bit).
    pub bit_params: u64,
}

impl LayerDims {
    pub fn table_entries(&self) -> u64 {
        self.m * (1u64 << self.k) * self.d_out
    }
}

/// Model bytes: voting tables at the chosen precision plus bit
/// parameters, which stay 32-bit in both variants (quantizing fractional
/// offsets would move the sample points themselves).
pub fn memory_model(layers: &[LayerDims], precision: Precision) -> u64 {
    layers
        .iter()
        .map(|l| l.table_entries() * precision.table_entry_bytes() + l.bit_params * 4)
        .sum()
}

/// Wall-clock figures for hard-mode inference, normalized per output
/// location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallTiming {
    pub median_ns_per_location: f64,
    pub p10_ns_per_location: f64,
    pub p90_ns_per_location: f64,
    pub total_ns_median: f64,
    pub locations_per_pass: u64,
    pub repetitions: usize,
}

/// Times hard-mode forward passes of `net` on a seeded random input.
///
/// Runs single-threaded so repetitions measure the same execution
/// context; one warmup pass precedes timing. Figures are reported, not
/// asserted — wall time is environment noise by nature.
pub fn wall_bench(net: &Network, repetitions: usize, seed: u64) -> WallTiming {
    assert!(repetitions >= 3, "need at least 3 repetitions");
    use rand::{Rng, SeedableRng};
    let (h, w, d) = net.spec().input;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * d).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = Tensor3::from_data(h, w, d, data).expect("finite random input");

    let locations = net.ct_output_locations();
    let _ = net.forward_hard_serial(&image).expect("warmup forward");
    let mut samples: Vec<f64> = (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            let _ = net.forward_hard_serial(&image).expect("timed forward");
            start.elapsed().as_nanos() as f64
        })
        .collect();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| samples[((q * samples.len() as f64) as usize).min(samples.len() - 1)];
    let median = samples[samples.len() / 2];
    WallTiming {
        median_ns_per_location: median / locations as f64,
        p10_ns_per_location: pick(0.10) / locations as f64,
        p90_ns_per_location: pick(0.90) / locations as f64,
        total_ns_median: median,
        locations_per_pass: locations,
        repetitions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_cost_formula() {
        assert_eq!(cost_cnn(3, 512, 512), 2_359_296);
        assert_eq!(cost_cnn(1, 1, 1), 1);
        assert_eq!(cost_cnn(5, 3, 32), 2400);
    }

    #[test]
    fn speedup_asymptote_and_exact_form() {
        let s = speedup_ratio(3.0, 8.0, 2.0, 512.0, 10.0);
        assert_eq!(s.asymptotic, 36.0);
        // exact middle form at D=512: 9*512^2 / (10*512*2 + 512^2*2/8)
        let expect = 2_359_296.0 / 75_776.0;
        assert!((s.exact - expect).abs() < 1e-9);
        assert!((s.exact - 31.1).abs() < 0.1);
    }

    #[test]
    fn speedup_dimensional_sanity() {
        // K = R and l = 1: the asymptote collapses to 1
        let s = speedup_ratio(1.0, 4.0, 4.0, 1e12, 10.0);
        assert_eq!(s.asymptotic, 1.0);
        assert!((s.exact - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exact_form_converges_to_asymptote() {
        let s = speedup_ratio(3.0, 8.0, 2.0, 8192.0, 10.0);
        let gap = (s.asymptotic - s.exact) / s.asymptotic;
        assert!(gap.abs() < 0.05, "gap {gap} at D=8192");
    }

    #[test]
    fn memory_model_matches_compact_network_example() {
        // fifty layers of M=10, K=6, D_o=60 at 8-bit, tables only
        let layer = LayerDims { m: 10, k: 6, d_out: 60, bit_params: 0 };
        let layers = vec![layer; 50];
        assert_eq!(memory_model(&layers, Precision::I8), 1_920_000);
    }

    #[test]
    fn memory_model_empty_and_single_layer() {
        assert_eq!(memory_model(&[], Precision::F32), 0);
        let one = LayerDims { m: 8, k: 8, d_out: 32, bit_params: 0 };
        assert_eq!(memory_model(&[one], Precision::F32), 262_144);
    }

    #[test]
    fn memory_model_is_additive_and_linear_in_width() {
        let a = LayerDims { m: 4, k: 5, d_out: 16, bit_params: 4 * 5 * 5 };
        let b = LayerDims { m: 2, k: 3, d_out: 8, bit_params: 2 * 3 * 5 };
        let sum = memory_model(&[a], Precision::I8) + memory_model(&[b], Precision::I8);
        assert_eq!(memory_model(&[a, b], Precision::I8), sum);
        let doubled = LayerDims { d_out: 32, ..a };
        let tables = |l: LayerDims| memory_model(&[l], Precision::F32) - l.bit_params * 4;
        assert_eq!(tables(doubled), 2 * tables(a));
    }
}
