//! Reverse-mode gradients for a soft CT layer.
//!
//! Three chains meet here. Table entries see `activity x upstream`
//! directly. Bit values see the upstream gradient through each active
//! word's weight: the derivative of the ramp product with respect to
//! bit `k` is `weight * sign(b, k) / (2 t q_k)`, nonzero only while the
//! bit sits inside the soft zone. Bit values then fan out to the
//! trainable offsets through the exact derivative of the bilinear
//! sample, to the threshold with factor -1, and to the input tensor
//! through the bilinear adjoint (four pixels per sampled point, eight
//! per bit function).

use convtab_core::error::CtError;
use convtab_core::fern::bit_sign;
use convtab_core::layer::{CtLayerConfig, ForwardCache};
use convtab_core::tensor::{
    bilinear_sample_grad, bilinear_scatter_add, crop_tensor, PadMode, Tensor3,
};

use crate::Result;

/// Gradients of one bit function's five trainable scalars.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BitGrad {
    pub dx1: f64,
    pub dy1: f64,
    pub dx2: f64,
    pub dy2: f64,
    pub threshold: f64,
}

impl BitGrad {
    fn add(&mut self, other: &BitGrad) {
        self.dx1 += other.dx1;
        self.dy1 += other.dy1;
        self.dx2 += other.dx2;
        self.dy2 += other.dy2;
        self.threshold += other.threshold;
    }

    fn scale(&mut self, s: f64) {
        self.dx1 *= s;
        self.dy1 *= s;
        self.dx2 *= s;
        self.dy2 *= s;
        self.threshold *= s;
    }

    pub fn abs_max(&self) -> f64 {
        self.dx1
            .abs()
            .max(self.dy1.abs())
            .max(self.dx2.abs())
            .max(self.dy2.abs())
            .max(self.threshold.abs())
    }
}

/// Parameter gradients of one CT layer, shaped like the layer itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    m: usize,
    k: usize,
    rows: usize,
    d_out: usize,
    /// Per-bit gradients, table-major: index `m * K + k`.
    pub bits: Vec<BitGrad>,
    /// Per-table voting gradients, flattened `m, row, channel`.
    pub tables: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_for(layer: &CtLayerConfig) -> Self {
        let (m, k, d_out) = (layer.m(), layer.k(), layer.d_out());
        let rows = 1usize << k;
        LayerGrads {
            m,
            k,
            rows,
            d_out,
            bits: vec![BitGrad::default(); m * k],
            tables: vec![0.0; m * rows * d_out],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn bit(&self, m: usize, k: usize) -> &BitGrad {
        &self.bits[m * self.k + k]
    }

    #[inline]
    pub fn bit_mut(&mut self, m: usize, k: usize) -> &mut BitGrad {
        &mut self.bits[m * self.k + k]
    }

    /// The `2^K x D_o` gradient block of table `m`.
    #[inline]
    pub fn table(&self, m: usize) -> &[f64] {
        let len = self.rows * self.d_out;
        &self.tables[m * len..(m + 1) * len]
    }

    #[inline]
    pub fn table_mut(&mut self, m: usize) -> &mut [f64] {
        let len = self.rows * self.d_out;
        &mut self.tables[m * len..(m + 1) * len]
    }

    #[inline]
    fn table_row_mut(&mut self, m: usize, word: u32) -> &mut [f64] {
        let start = (m * self.rows + word as usize) * self.d_out;
        &mut self.tables[start..start + self.d_out]
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        debug_assert_eq!(self.bits.len(), other.bits.len());
        debug_assert_eq!(self.tables.len(), other.tables.len());
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            a.add(b);
        }
        for (a, b) in self.tables.iter_mut().zip(&other.tables) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.bits {
            b.scale(s);
        }
        for t in &mut self.tables {
            *t *= s;
        }
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.bits.iter().all(|b| b.abs_max().is_finite()) && self.tables.iter().all(|t| t.is_finite())
    }
}

/// Input and parameter gradients from one soft-layer backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_input: Tensor3,
    pub grads: LayerGrads,
}

/// Propagates `d_out` back through a soft CT forward recorded in
/// `cache`, producing table, bit-parameter, and input gradients.
///
/// `t_in` must be the tensor the forward consumed, and the layer
/// parameters must not have changed since; both are checked against the
/// cache's stamp.
pub fn backward_soft_ct(
    layer: &CtLayerConfig,
    t_in: &Tensor3,
    cache: &ForwardCache,
    d_out: &Tensor3,
) -> Result<GradientBundle> {
    cache.check_matches(layer)?;
    if cache.input_shape() != t_in.shape() {
        return Err(CtError::CacheMismatch(format!(
            "cache recorded input {:?}, got {:?}",
            cache.input_shape(),
            t_in.shape()
        ))
        .into());
    }
    let (oh, ow) = cache.output_extent();
    if d_out.shape() != (oh, ow, layer.d_out()) {
        return Err(CtError::ShapeMismatch {
            expected: format!("{}x{}x{}", oh, ow, layer.d_out()),
            got: format!("{:?}", d_out.shape()),
        }
        .into());
    }

    let cfg = cache.soft_config();
    let t = cfg.t();
    let k = layer.k();
    let r = layer.radius();
    let stride = layer.stride();
    let prepared = layer.prepared_input(t_in);
    let mut d_prepared = Tensor3::zeros(prepared.height(), prepared.width(), prepared.depth());
    let mut grads = LayerGrads::zeros_for(layer);
    let mut word_scores: Vec<f64> = Vec::new();

    for oy in 0..oh {
        let cy = oy * stride + r;
        for ox in 0..ow {
            let cx = ox * stride + r;
            let col = d_out.column(oy, ox);
            for (mi, ct) in layer.tables().iter().enumerate() {
                let activity = cache.activity(oy, ox, mi);
                let values = cache.bit_values(oy, ox, mi);

                // d_tables[b, :] += weight_b * d_out and score_b = <row_b, d_out>
                word_scores.clear();
                for &(word, weight) in activity.entries() {
                    let row = ct.table.row(word);
                    let mut score = 0.0;
                    let target = grads.table_row_mut(mi, word);
                    for (i, g) in col.iter().enumerate() {
                        target[i] += weight * g;
                        score += row[i] * g;
                    }
                    word_scores.push(score);
                }

                for (ki, &v) in values.iter().enumerate() {
                    if v.abs() >= t {
                        continue; // ramp saturated: no gradient reaches this bit
                    }
                    let mut g_bit = 0.0;
                    for (&(word, weight), &score) in activity.entries().iter().zip(&word_scores) {
                        let sign = bit_sign(word, ki + 1, k);
                        let q = cfg.q(sign * v);
                        g_bit += score * weight * sign / (2.0 * t * q);
                    }
                    if g_bit == 0.0 {
                        continue;
                    }
                    let params = &ct.calculator.bits()[ki];
                    let (x1, y1) = (cx as f64 + params.dx1, cy as f64 + params.dy1);
                    let (x2, y2) = (cx as f64 + params.dx2, cy as f64 + params.dy2);
                    let (gx1, gy1) = bilinear_sample_grad(&prepared, x1, y1, params.channel)?;
                    let (gx2, gy2) = bilinear_sample_grad(&prepared, x2, y2, params.channel)?;
                    let bg = grads.bit_mut(mi, ki);
                    bg.dx1 += g_bit * gx1;
                    bg.dy1 += g_bit * gy1;
                    bg.dx2 -= g_bit * gx2;
                    bg.dy2 -= g_bit * gy2;
                    bg.threshold -= g_bit;
                    bilinear_scatter_add(&mut d_prepared, x1, y1, params.channel, g_bit)?;
                    bilinear_scatter_add(&mut d_prepared, x2, y2, params.channel, -g_bit)?;
                }
            }
        }
    }

    let d_input = match layer.pad().mode {
        PadMode::Valid => d_prepared,
        PadMode::Same => crop_tensor(&d_prepared, r),
    };
    Ok(GradientBundle { d_input, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_layer_gradients, GradCheckSettings};
    use convtab_core::fern::{BitFunctionParams, SoftConfig, WordCalculator};
    use convtab_core::layer::{forward_soft, ConvTable, VotingTable};
    use convtab_core::tensor::PadSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(h: usize, w: usize, d: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor3::from_data(h, w, d, data).unwrap()
    }

    fn random_layer(m: usize, k: usize, l: usize, d_in: usize, d_out: usize, seed: u64) -> CtLayerConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order: Vec<usize> = (0..d_in).collect();
        let mut next = 0;
        let tables = (0..m)
            .map(|_| {
                let calc = WordCalculator::random(k, l, &order, &mut next, &mut rng).unwrap();
                ConvTable::new(calc, VotingTable::random(k, d_out, &mut rng)).unwrap()
            })
            .collect();
        CtLayerConfig::new(tables, 1, PadSpec::valid(), d_out).unwrap()
    }

    #[test]
    fn saturated_bits_get_no_parameter_gradient() {
        let t_in = random_tensor(8, 8, 2, 1);
        let layer = random_layer(2, 3, 3, 2, 4, 2);
        // tiny half-width saturates every bit
        let cfg = SoftConfig::new(1e-12, 0.0).unwrap();
        let (out, cache) = forward_soft(&t_in, &layer, &cfg).unwrap();
        let d_out = random_tensor(out.height(), out.width(), 4, 3);
        let bundle = backward_soft_ct(&layer, &t_in, &cache, &d_out).unwrap();
        for bg in &bundle.grads.bits {
            assert_eq!(bg.abs_max(), 0.0);
        }
        assert!(bundle.grads.tables.iter().any(|g| g.abs() > 0.0));
        assert!(bundle.d_input.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn threshold_gradient_is_negated_bit_gradient() {
        // single table, single ambiguous bit: d th must equal -sum(g_bit),
        // checked against finite differences of the threshold alone
        let t_in = random_tensor(6, 6, 1, 5);
        let calc = WordCalculator::new(
            vec![BitFunctionParams { dx1: 0.6, dy1: -0.4, dx2: -0.3, dy2: 0.2, threshold: 0.05, channel: 0 }],
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = CtLayerConfig::new(
            vec![ConvTable::new(calc, VotingTable::random(1, 3, &mut rng)).unwrap()],
            1,
            PadSpec::valid(),
            3,
        )
        .unwrap();
        let cfg = SoftConfig::new(0.5, 0.0).unwrap();
        let (out, cache) = forward_soft(&t_in, &layer, &cfg).unwrap();
        let probe = random_tensor(out.height(), out.width(), 3, 7);
        let bundle = backward_soft_ct(&layer, &t_in, &cache, &probe).unwrap();

        let h = 1e-6;
        let objective = |layer: &CtLayerConfig| {
            let (out, _) = forward_soft(&t_in, layer, &cfg).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut plus = layer.clone();
        plus.tables_mut()[0].calculator.bits_mut()[0].threshold += h;
        let mut minus = layer.clone();
        minus.tables_mut()[0].calculator.bits_mut()[0].threshold -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let got = bundle.grads.bit(0, 0).threshold;
        assert!((fd - got).abs() < 1e-6, "fd {fd} vs analytic {got}");
    }

    #[test]
    fn full_gradient_check_on_a_small_layer() {
        let t_in = random_tensor(8, 8, 3, 11);
        let layer = random_layer(2, 4, 5, 3, 4, 12);
        let cfg = SoftConfig::new(0.5, 0.0).unwrap();
        let report = check_layer_gradients(&layer, &t_in, &cfg, 13, &GradCheckSettings::default()).unwrap();
        assert_eq!(report.failures, Vec::<String>::new());
        assert!(report.checked > 100, "only {} scalars checked", report.checked);
        // exclusions near kinks and cell edges must stay a small minority
        assert!(report.skipped * 5 < report.checked, "{} skipped", report.skipped);
    }

    #[test]
    fn backward_rejects_mismatched_inputs() {
        let t_in = random_tensor(8, 8, 2, 21);
        let layer = random_layer(2, 3, 3, 2, 4, 22);
        let other_layer = random_layer(3, 3, 3, 2, 4, 23);
        let cfg = SoftConfig::new(0.5, 0.0).unwrap();
        let (out, cache) = forward_soft(&t_in, &layer, &cfg).unwrap();
        let d_out = random_tensor(out.height(), out.width(), 4, 24);
        assert!(backward_soft_ct(&other_layer, &t_in, &cache, &d_out).is_err());
        let wrong_input = random_tensor(9, 8, 2, 25);
        assert!(backward_soft_ct(&layer, &wrong_input, &cache, &d_out).is_err());
        let wrong_grad = random_tensor(2, 2, 4, 26);
        assert!(backward_soft_ct(&layer, &t_in, &cache, &wrong_grad).is_err());
    }

    #[test]
    fn bundle_arithmetic_scales_and_adds() {
        let layer = random_layer(2, 3, 3, 2, 4, 31);
        let t_in = random_tensor(8, 8, 2, 32);
        let cfg = SoftConfig::new(0.5, 0.0).unwrap();
        let (out, cache) = forward_soft(&t_in, &layer, &cfg).unwrap();
        let d_out = random_tensor(out.height(), out.width(), 4, 33);
        let bundle = backward_soft_ct(&layer, &t_in, &cache, &d_out).unwrap();
        let mut doubled = bundle.grads.clone();
        doubled.add_assign(&bundle.grads);
        let mut scaled = bundle.grads.clone();
        scaled.scale(2.0);
        assert_eq!(doubled, scaled);
        assert!(bundle.grads.is_finite());
    }
}
