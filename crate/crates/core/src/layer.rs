//! The convolutional-table layer: `M` (word calculator, voting table)
//! pairs applied at every output location, their selected rows summed.
//!
//! `forward_hard` is the inference path: one word per calculator, one
//! table row lookup each, `M` vector adds. `forward_soft` is the
//! training path: each calculator yields a sparse distribution over
//! words and the vote is the weighted row sum; bit values and word
//! activities are cached for the backward pass.

use std::borrow::Cow;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{CtError, Result};
use crate::fern::{
    word_soft_from_values, SoftConfig, SoftWordActivity, WordCalculator, MAX_BITS,
};
use crate::tensor::{pad_tensor, PadMode, PadSpec, Tensor3};

/// The `2^K x D_o` matrix whose row `b` is the output vector voted for
/// word `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct VotingTable {
    rows: usize,
    d_out: usize,
    data: Vec<f64>,
}

impl VotingTable {
    pub fn zeros(k: usize, d_out: usize) -> Self {
        let rows = 1 << k;
        VotingTable { rows, d_out, data: vec![0.0; rows * d_out] }
    }

    /// Gaussian `N(0, 1)` entries, quantized through `f32` like the bit
    /// parameters.
    pub fn random<R: rand::Rng + ?Sized>(k: usize, d_out: usize, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let rows = 1 << k;
        let data = (0..rows * d_out).map(|_| (normal.sample(rng) as f32) as f64).collect();
        VotingTable { rows, d_out, data }
    }

    pub fn from_rows(k: usize, d_out: usize, data: Vec<f64>) -> Result<Self> {
        let rows = 1usize << k;
        if data.len() != rows * d_out {
            return Err(CtError::DataLength { h: rows, w: d_out, d: 1, got: data.len() });
        }
        Ok(VotingTable { rows, d_out, data })
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    #[inline]
    pub fn row(&self, b: u32) -> &[f64] {
        let start = b as usize * self.d_out;
        &self.data[start..start + self.d_out]
    }

    #[inline]
    pub fn row_mut(&mut self, b: u32) -> &mut [f64] {
        let start = b as usize * self.d_out;
        &mut self.data[start..start + self.d_out]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// One convolutional table: a word calculator plus its voting table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTable {
    pub calculator: WordCalculator,
    pub table: VotingTable,
}

impl ConvTable {
    pub fn new(calculator: WordCalculator, table: VotingTable) -> Result<Self> {
        if table.row_count() != calculator.word_count() {
            return Err(CtError::ShapeMismatch {
                expected: format!("{} table rows for K={}", calculator.word_count(), calculator.k()),
                got: format!("{}", table.row_count()),
            });
        }
        Ok(ConvTable { calculator, table })
    }
}

/// A CT layer: `M` convolutional tables sharing `K`, `l`, and `D_o`,
/// plus output geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CtLayerConfig {
    tables: Vec<ConvTable>,
    stride: usize,
    pad: PadSpec,
    d_out: usize,
}

impl CtLayerConfig {
    pub fn new(tables: Vec<ConvTable>, stride: usize, pad: PadSpec, d_out: usize) -> Result<Self> {
        if tables.is_empty() {
            return Err(CtError::BuildError { index: 0, reason: "a CT layer needs M >= 1 tables".into() });
        }
        if stride == 0 {
            return Err(CtError::BuildError { index: 0, reason: "stride must be positive".into() });
        }
        let k = tables[0].calculator.k();
        let l = tables[0].calculator.patch_size();
        for (i, ct) in tables.iter().enumerate() {
            if ct.calculator.k() != k || ct.calculator.patch_size() != l {
                return Err(CtError::BuildError {
                    index: i,
                    reason: "all tables in a layer must share K and patch size".into(),
                });
            }
            if ct.table.d_out() != d_out {
                return Err(CtError::BuildError {
                    index: i,
                    reason: format!("table outputs {} values, layer declares {}", ct.table.d_out(), d_out),
                });
            }
        }
        Ok(CtLayerConfig { tables, stride, pad, d_out })
    }

    pub fn tables(&self) -> &[ConvTable] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [ConvTable] {
        &mut self.tables
    }

    pub fn m(&self) -> usize {
        self.tables.len()
    }

    pub fn k(&self) -> usize {
        self.tables[0].calculator.k()
    }

    pub fn patch_size(&self) -> usize {
        self.tables[0].calculator.patch_size()
    }

    pub fn radius(&self) -> usize {
        (self.patch_size() - 1) / 2
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> PadSpec {
        self.pad
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (h, w, _) = input;
        let l = self.patch_size();
        Ok((
            self.pad.output_extent(h, l, self.stride)?,
            self.pad.output_extent(w, l, self.stride)?,
            self.d_out,
        ))
    }

    fn check_input(&self, t_in: &Tensor3) -> Result<()> {
        let depth = t_in.depth();
        for (i, ct) in self.tables.iter().enumerate() {
            for bits in ct.calculator.bits() {
                if bits.channel >= depth {
                    return Err(CtError::BuildError {
                        index: i,
                        reason: format!(
                            "bit function reads channel {} but input has depth {}",
                            bits.channel, depth
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// The tensor bit functions actually sample: the input itself for
    /// valid padding, a radius-padded copy for same padding.
    pub fn prepared_input<'a>(&self, t_in: &'a Tensor3) -> Cow<'a, Tensor3> {
        match self.pad.mode {
            PadMode::Valid => Cow::Borrowed(t_in),
            PadMode::Same => Cow::Owned(pad_tensor(t_in, self.radius(), self.pad.fill)),
        }
    }
}

/// Operations per output location: `M * (c_b * K + D_o)`. Independent of
/// the patch size.
pub fn layer_op_count(layer: &CtLayerConfig, c_b: u64) -> u64 {
    layer.m() as u64 * (c_b * layer.k() as u64 + layer.d_out() as u64)
}

/// Weighted row sum of a sparse word distribution.
pub fn sparse_vote(activity: &SoftWordActivity, table: &VotingTable) -> Result<Vec<f64>> {
    if activity.is_empty() {
        return Err(CtError::EmptyActivity);
    }
    let mut out = vec![0.0; table.d_out()];
    accumulate_vote(activity, table, &mut out);
    Ok(out)
}

#[inline]
fn accumulate_vote(activity: &SoftWordActivity, table: &VotingTable, out: &mut [f64]) {
    for &(word, weight) in activity.entries() {
        for (o, v) in out.iter_mut().zip(table.row(word)) {
            *o += weight * v;
        }
    }
}

#[inline]
fn fill_hard_row(
    layer: &CtLayerConfig,
    src: &Tensor3,
    oy: usize,
    ow: usize,
    row: &mut [f64],
) {
    let r = layer.radius();
    let stride = layer.stride;
    let d = layer.d_out;
    let cy = oy * stride + r;
    for ox in 0..ow {
        let cx = ox * stride + r;
        let col = &mut row[ox * d..(ox + 1) * d];
        for ct in &layer.tables {
            let word = crate::fern::word_hard(src, cx, cy, &ct.calculator);
            for (o, v) in col.iter_mut().zip(ct.table.row(word)) {
                *o += v;
            }
        }
    }
}

/// Hard-mode forward: at every output location, each calculator picks a
/// word and the selected table rows are summed.
pub fn forward_hard(t_in: &Tensor3, layer: &CtLayerConfig) -> Result<Tensor3> {
    #[cfg(feature = "parallel")]
    {
        layer.check_input(t_in)?;
        let (oh, ow, d) = layer.output_shape(t_in.shape())?;
        let src = layer.prepared_input(t_in);
        let mut out = Tensor3::zeros(oh, ow, d);
        out.data_mut()
            .par_chunks_mut(ow * d)
            .enumerate()
            .for_each(|(oy, row)| fill_hard_row(layer, &src, oy, ow, row));
        Ok(out)
    }
    #[cfg(not(feature = "parallel"))]
    {
        forward_hard_serial(t_in, layer)
    }
}

/// Single-threaded [`forward_hard`]; also the timing baseline for the
/// bench suite.
pub fn forward_hard_serial(t_in: &Tensor3, layer: &CtLayerConfig) -> Result<Tensor3> {
    layer.check_input(t_in)?;
    let (oh, ow, d) = layer.output_shape(t_in.shape())?;
    let src = layer.prepared_input(t_in);
    let mut out = Tensor3::zeros(oh, ow, d);
    for (oy, row) in out.data_mut().chunks_mut(ow * d).enumerate() {
        fill_hard_row(layer, &src, oy, ow, row);
    }
    Ok(out)
}

/// Everything the backward pass needs from a soft forward: per location
/// and table, the `K` pre-threshold bit values and the sparse word
/// activity.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input_shape: (usize, usize, usize),
    out_h: usize,
    out_w: usize,
    m: usize,
    k: usize,
    cfg: SoftConfig,
    stamp: LayerStamp,
    bit_values: Vec<f64>,
    activities: Vec<SoftWordActivity>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerStamp {
    m: usize,
    k: usize,
    l: usize,
    stride: usize,
    pad: PadSpec,
    d_out: usize,
}

impl LayerStamp {
    fn of(layer: &CtLayerConfig) -> Self {
        LayerStamp {
            m: layer.m(),
            k: layer.k(),
            l: layer.patch_size(),
            stride: layer.stride(),
            pad: layer.pad(),
            d_out: layer.d_out(),
        }
    }
}

impl ForwardCache {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn output_extent(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn soft_config(&self) -> &SoftConfig {
        &self.cfg
    }

    /// Bit values of table `m` at output location `(oy, ox)`.
    #[inline]
    pub fn bit_values(&self, oy: usize, ox: usize, m: usize) -> &[f64] {
        let loc = oy * self.out_w + ox;
        let start = (loc * self.m + m) * self.k;
        &self.bit_values[start..start + self.k]
    }

    /// Word activity of table `m` at output location `(oy, ox)`.
    #[inline]
    pub fn activity(&self, oy: usize, ox: usize, m: usize) -> &SoftWordActivity {
        &self.activities[(oy * self.out_w + ox) * self.m + m]
    }

    /// Mean number of active words per table over all locations.
    pub fn mean_active_words(&self) -> f64 {
        if self.activities.is_empty() {
            return 0.0;
        }
        let total: usize = self.activities.iter().map(|a| a.len()).sum();
        total as f64 / self.activities.len() as f64
    }

    /// Errors unless the cache was produced by a layer with identical
    /// structure.
    pub fn check_matches(&self, layer: &CtLayerConfig) -> Result<()> {
        if self.stamp != LayerStamp::of(layer) {
            return Err(CtError::CacheMismatch(format!(
                "cache built for M={} K={} l={}, layer has M={} K={} l={}",
                self.stamp.m,
                self.stamp.k,
                self.stamp.l,
                layer.m(),
                layer.k(),
                layer.patch_size()
            )));
        }
        Ok(())
    }
}

type SoftRow = (Vec<f64>, Vec<f64>, Vec<SoftWordActivity>);

fn soft_row(layer: &CtLayerConfig, src: &Tensor3, cfg: &SoftConfig, oy: usize, ow: usize) -> SoftRow {
    let r = layer.radius();
    let stride = layer.stride;
    let d = layer.d_out;
    let m = layer.m();
    let k = layer.k();
    let cy = oy * stride + r;
    let mut out_row = vec![0.0; ow * d];
    let mut values_row = vec![0.0; ow * m * k];
    let mut acts_row = Vec::with_capacity(ow * m);
    let mut scratch = [0.0f64; MAX_BITS];
    for ox in 0..ow {
        let cx = ox * stride + r;
        let col = &mut out_row[ox * d..(ox + 1) * d];
        for (mi, ct) in layer.tables.iter().enumerate() {
            ct.calculator.bit_values_into(src, cx, cy, &mut scratch);
            let values = &scratch[..k];
            values_row[(ox * m + mi) * k..(ox * m + mi + 1) * k].copy_from_slice(values);
            let act = word_soft_from_values(values, cfg);
            accumulate_vote(&act, &ct.table, col);
            acts_row.push(act);
        }
    }
    (out_row, values_row, acts_row)
}

/// Soft-mode forward: votes are weighted by each word's activity. The
/// returned cache feeds the backward pass.
pub fn forward_soft(
    t_in: &Tensor3,
    layer: &CtLayerConfig,
    cfg: &SoftConfig,
) -> Result<(Tensor3, ForwardCache)> {
    layer.check_input(t_in)?;
    let (oh, ow, d) = layer.output_shape(t_in.shape())?;
    let src = layer.prepared_input(t_in);

    #[cfg(feature = "parallel")]
    let rows: Vec<SoftRow> = (0..oh)
        .into_par_iter()
        .map(|oy| soft_row(layer, &src, cfg, oy, ow))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<SoftRow> = (0..oh).map(|oy| soft_row(layer, &src, cfg, oy, ow)).collect();

    let m = layer.m();
    let k = layer.k();
    let mut out = Tensor3::zeros(oh, ow, d);
    let mut bit_values = Vec::with_capacity(oh * ow * m * k);
    let mut activities = Vec::with_capacity(oh * ow * m);
    for (oy, (out_row, values_row, acts_row)) in rows.into_iter().enumerate() {
        out.data_mut()[oy * ow * d..(oy + 1) * ow * d].copy_from_slice(&out_row);
        bit_values.extend_from_slice(&values_row);
        activities.extend(acts_row);
    }
    let cache = ForwardCache {
        input_shape: t_in.shape(),
        out_h: oh,
        out_w: ow,
        m,
        k,
        cfg: *cfg,
        stamp: LayerStamp::of(layer),
        bit_values,
        activities,
    };
    Ok((out, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fern::{bit_sign, soft_sigmoid, BitFunctionParams, WordCalculator};
    use crate::tensor::PadSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(h: usize, w: usize, d: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor3::from_data(h, w, d, data).unwrap()
    }

    fn random_layer(
        m: usize,
        k: usize,
        l: usize,
        d_in: usize,
        d_out: usize,
        stride: usize,
        pad: PadSpec,
        seed: u64,
    ) -> CtLayerConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order: Vec<usize> = (0..d_in).collect();
        let mut next = 0;
        let tables = (0..m)
            .map(|_| {
                let calc = WordCalculator::random(k, l, &order, &mut next, &mut rng).unwrap();
                let table = VotingTable::random(k, d_out, &mut rng);
                ConvTable::new(calc, table).unwrap()
            })
            .collect();
        CtLayerConfig::new(tables, stride, pad, d_out).unwrap()
    }

    #[test]
    fn valid_geometry_matches_convolution_arithmetic() {
        let layer = random_layer(2, 3, 7, 3, 32, 1, PadSpec::valid(), 1);
        assert_eq!(layer.output_shape((32, 32, 3)).unwrap(), (26, 26, 32));
        let t = random_tensor(32, 32, 3, 2);
        assert_eq!(forward_hard(&t, &layer).unwrap().shape(), (26, 26, 32));
    }

    #[test]
    fn geometry_formula_across_strides_and_modes() {
        for &(h, w) in &[(9usize, 12usize), (15, 15), (8, 11)] {
            for l in [3usize, 5] {
                for stride in 1..=3usize {
                    let layer = random_layer(1, 2, l, 2, 3, stride, PadSpec::valid(), 7);
                    let (oh, ow, _) = layer.output_shape((h, w, 2)).unwrap();
                    assert_eq!((oh, ow), ((h - l) / stride + 1, (w - l) / stride + 1));
                    let same = random_layer(1, 2, l, 2, 3, stride, PadSpec::same(), 7);
                    let (oh, ow, _) = same.output_shape((h, w, 2)).unwrap();
                    assert_eq!((oh, ow), ((h - 1) / stride + 1, (w - 1) / stride + 1));
                }
            }
        }
    }

    #[test]
    fn zero_input_with_positive_threshold_votes_row_zero() {
        let calc = WordCalculator::new(
            vec![BitFunctionParams { dx1: 1.0, dy1: 0.0, dx2: -1.0, dy2: 0.0, threshold: 0.5, channel: 0 }],
            3,
        )
        .unwrap();
        let mut table = VotingTable::zeros(1, 4);
        table.row_mut(0).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        table.row_mut(1).copy_from_slice(&[-9.0; 4]);
        let layer = CtLayerConfig::new(
            vec![ConvTable::new(calc, table).unwrap()],
            1,
            PadSpec::valid(),
            4,
        )
        .unwrap();
        let out = forward_hard(&Tensor3::zeros(5, 5, 1), &layer).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.column(y, x), &[1.0, 2.0, 3.0, 4.0]);
            }
        }
    }

    #[test]
    fn multi_table_output_is_sum_of_single_table_layers() {
        let t = random_tensor(10, 9, 2, 5);
        let layer = random_layer(3, 3, 5, 2, 6, 1, PadSpec::valid(), 6);
        let whole = forward_hard(&t, &layer).unwrap();
        let mut summed = Tensor3::zeros(whole.height(), whole.width(), whole.depth());
        for ct in layer.tables() {
            let single = CtLayerConfig::new(vec![ct.clone()], 1, PadSpec::valid(), 6).unwrap();
            let part = forward_hard(&t, &single).unwrap();
            for (acc, v) in summed.data_mut().iter_mut().zip(part.data()) {
                *acc += v;
            }
        }
        for (a, b) in whole.data().iter().zip(summed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn table_order_does_not_change_output() {
        let t = random_tensor(8, 8, 2, 9);
        let layer = random_layer(4, 3, 3, 2, 5, 1, PadSpec::valid(), 10);
        let mut reversed_tables = layer.tables().to_vec();
        reversed_tables.reverse();
        let reversed = CtLayerConfig::new(reversed_tables, 1, PadSpec::valid(), 5).unwrap();
        let a = forward_hard(&t, &layer).unwrap();
        let b = forward_hard(&t, &reversed).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_initialized_extra_tables_change_nothing() {
        let t = random_tensor(8, 8, 2, 11);
        let layer = random_layer(2, 3, 3, 2, 5, 1, PadSpec::valid(), 12);
        let mut padded_tables = layer.tables().to_vec();
        for ct in layer.tables() {
            padded_tables.push(ConvTable::new(ct.calculator.clone(), VotingTable::zeros(3, 5)).unwrap());
        }
        let padded = CtLayerConfig::new(padded_tables, 1, PadSpec::valid(), 5).unwrap();
        let a = forward_hard(&t, &layer).unwrap();
        let b = forward_hard(&t, &padded).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_and_serial_paths_agree() {
        let t = random_tensor(16, 13, 3, 13);
        let layer = random_layer(3, 4, 5, 3, 8, 2, PadSpec::same(), 14);
        let a = forward_hard(&t, &layer).unwrap();
        let b = forward_hard_serial(&t, &layer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn soft_equals_hard_when_all_bits_saturated() {
        let t = random_tensor(9, 9, 2, 15);
        let layer = random_layer(3, 4, 5, 2, 6, 1, PadSpec::valid(), 16);
        let cfg = SoftConfig::new(1e-12, 0.0).unwrap();
        let hard = forward_hard(&t, &layer).unwrap();
        let (soft, cache) = forward_soft(&t, &layer, &cfg).unwrap();
        for (a, b) in hard.data().iter().zip(soft.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((cache.mean_active_words() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_ambiguous_bit_votes_mean_of_candidate_rows() {
        // K=1, constant zero input, zero threshold: bit value is exactly 0
        let calc = WordCalculator::new(
            vec![BitFunctionParams { dx1: 1.0, dy1: 0.0, dx2: 0.0, dy2: 0.0, threshold: 0.0, channel: 0 }],
            3,
        )
        .unwrap();
        let mut table = VotingTable::zeros(1, 2);
        table.row_mut(0).copy_from_slice(&[2.0, 4.0]);
        table.row_mut(1).copy_from_slice(&[6.0, 0.0]);
        let layer = CtLayerConfig::new(
            vec![ConvTable::new(calc, table).unwrap()],
            1,
            PadSpec::valid(),
            2,
        )
        .unwrap();
        let cfg = SoftConfig::new(0.5, 0.0).unwrap();
        let (out, cache) = forward_soft(&Tensor3::zeros(3, 3, 1), &layer, &cfg).unwrap();
        assert_eq!(out.column(0, 0), &[4.0, 2.0]);
        assert_eq!(cache.activity(0, 0, 0).len(), 2);
    }

    #[test]
    fn soft_forward_matches_dense_enumeration_oracle() {
        // oracle: sum over all 2^K words of the full ramp product times the row
        let t = random_tensor(7, 7, 2, 21);
        let layer = random_layer(2, 3, 3, 2, 4, 1, PadSpec::valid(), 22);
        let cfg = SoftConfig::new(0.4, 0.0).unwrap();
        let (out, _) = forward_soft(&t, &layer, &cfg).unwrap();
        let (oh, ow, d) = out.shape();
        let k = layer.k();
        let r = layer.radius();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut expect = vec![0.0; d];
                for ct in layer.tables() {
                    let mut values = [0.0; MAX_BITS];
                    ct.calculator.bit_values_into(&t, ox + r, oy + r, &mut values);
                    for b in 0..(1u32 << k) {
                        let weight: f64 = (1..=k)
                            .map(|i| soft_sigmoid(bit_sign(b, i, k) * values[i - 1], 0.4).unwrap())
                            .product();
                        for (e, v) in expect.iter_mut().zip(ct.table.row(b)) {
                            *e += weight * v;
                        }
                    }
                }
                for (a, b) in out.column(oy, ox).iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sparse_vote_basics() {
        let mut table = VotingTable::zeros(2, 3);
        table.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0]);
        table.row_mut(2).copy_from_slice(&[0.0, 2.0, 4.0]);
        let one_hot = word_soft_from_values(&[0.9, -0.9], &SoftConfig::new(0.1, 0.0).unwrap());
        assert_eq!(sparse_vote(&one_hot, &table).unwrap(), table.row(2));
        let pair = word_soft_from_values(&[0.0, -0.9], &SoftConfig::new(0.1, 0.0).unwrap());
        assert_eq!(sparse_vote(&pair, &table).unwrap(), &[0.5, 1.0, 2.0]);
        let pruned = word_soft_from_values(&[0.9], &SoftConfig::new(0.1, 2.0).unwrap());
        assert!(matches!(sparse_vote(&pruned, &table), Err(CtError::EmptyActivity)));
    }

    #[test]
    fn sparse_vote_matches_dense_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let table = VotingTable::random(3, 5, &mut rng);
        let values = [0.1, -0.05, 0.3];
        let cfg = SoftConfig::new(0.5, 0.0).unwrap();
        let act = word_soft_from_values(&values, &cfg);
        let sparse = sparse_vote(&act, &table).unwrap();
        let mut dense = vec![0.0; 5];
        for b in 0..8u32 {
            let w = act.weight_of(b);
            for (o, v) in dense.iter_mut().zip(table.row(b)) {
                *o += w * v;
            }
        }
        for (a, b) in sparse.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn op_count_formula() {
        let layer = random_layer(10, 6, 3, 3, 60, 1, PadSpec::valid(), 40);
        assert_eq!(layer_op_count(&layer, 10), 1200);
        let layer = random_layer(8, 8, 5, 3, 32, 1, PadSpec::valid(), 41);
        assert_eq!(layer_op_count(&layer, 10), 896);
    }

    #[test]
    fn op_count_independent_of_patch_size() {
        let counts: Vec<u64> = [3usize, 5, 7, 9]
            .iter()
            .map(|&l| layer_op_count(&random_layer(4, 5, l, 3, 16, 1, PadSpec::valid(), 50), 10))
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn cache_mismatch_is_detected() {
        let t = random_tensor(8, 8, 2, 60);
        let layer = random_layer(2, 3, 3, 2, 4, 1, PadSpec::valid(), 61);
        let other = random_layer(3, 3, 3, 2, 4, 1, PadSpec::valid(), 62);
        let cfg = SoftConfig::new(0.5, 0.0).unwrap();
        let (_, cache) = forward_soft(&t, &layer, &cfg).unwrap();
        assert!(cache.check_matches(&layer).is_ok());
        assert!(matches!(cache.check_matches(&other), Err(CtError::CacheMismatch(_))));
    }

    #[test]
    fn layer_rejects_mismatched_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let order = [0usize];
        let mut next = 0;
        let c3 = WordCalculator::random(3, 3, &order, &mut next, &mut rng).unwrap();
        let c4 = WordCalculator::random(4, 3, &order, &mut next, &mut rng).unwrap();
        let t3 = VotingTable::random(3, 2, &mut rng);
        let t4 = VotingTable::random(4, 2, &mut rng);
        assert!(ConvTable::new(c3.clone(), t4.clone()).is_err());
        let a = ConvTable::new(c3, t3).unwrap();
        let b = ConvTable::new(c4, t4).unwrap();
        assert!(CtLayerConfig::new(vec![a, b], 1, PadSpec::valid(), 2).is_err());
    }
}
