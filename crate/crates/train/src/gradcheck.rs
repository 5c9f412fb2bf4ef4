//! Finite-difference verification of the soft-layer gradients.
//!
//! The objective is `L = <forward_soft(input), probe>` for a fixed
//! random probe tensor, so every parameter's analytic gradient can be
//! compared against a central difference of two extra forwards. The
//! soft forward is piecewise smooth: it kinks where a bit value crosses
//! the ramp edges at +-t and where a sample coordinate crosses a
//! bilinear cell edge. Scalars whose perturbation sits within the
//! margin of such a kink, or whose two perturbed forwards disagree with
//! the base forward on any saturation class or interpolation cell, are
//! skipped and counted rather than compared.
//!
//! Run with a pruning floor of zero: pruning introduces jumps the
//! differences would see.

use convtab_core::fern::SoftConfig;
use convtab_core::layer::{forward_soft, CtLayerConfig};
use convtab_core::tensor::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backward::backward_soft_ct;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { step: 1e-4, rel_tol: 1e-3, abs_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// One line per scalar whose analytic and numeric gradients
    /// disagree beyond tolerance.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    Table { m: usize, idx: usize },
    Bit { m: usize, k: usize, field: usize }, // dx1, dy1, dx2, dy2, threshold
    Pixel { idx: usize },
}

const FIELD_NAMES: [&str; 5] = ["dx1", "dy1", "dx2", "dy2", "threshold"];

fn apply(layer: &mut CtLayerConfig, input: &mut Tensor3, scalar: Scalar, delta: f64) {
    match scalar {
        Scalar::Table { m, idx } => layer.tables_mut()[m].table.data_mut()[idx] += delta,
        Scalar::Bit { m, k, field } => {
            let b = &mut layer.tables_mut()[m].calculator.bits_mut()[k];
            match field {
                0 => b.dx1 += delta,
                1 => b.dy1 += delta,
                2 => b.dx2 += delta,
                3 => b.dy2 += delta,
                _ => b.threshold += delta,
            }
        }
        Scalar::Pixel { idx } => input.data_mut()[idx] += delta,
    }
}

/// Saturation class of every (location, table, bit) plus the clamped
/// interpolation-cell corner of every sampled point. Two forwards on
/// the same smooth piece share this signature exactly.
fn signature(layer: &CtLayerConfig, input: &Tensor3, cfg: &SoftConfig) -> Result<Vec<i64>> {
    let (_, cache) = forward_soft(input, layer, cfg)?;
    let (oh, ow) = cache.output_extent();
    let t = cfg.t();
    let src = layer.prepared_input(input);
    let (h, w) = (src.height() as i64, src.width() as i64);
    let cell = |coord: f64, extent: i64| (coord.floor() as i64).clamp(-1, extent - 1);
    let r = layer.radius();
    let stride = layer.stride();
    let mut sig = Vec::with_capacity(oh * ow * layer.m() * layer.k() * 5);
    for oy in 0..oh {
        for ox in 0..ow {
            let (cx, cy) = ((ox * stride + r) as f64, (oy * stride + r) as f64);
            for (mi, ct) in layer.tables().iter().enumerate() {
                let values = cache.bit_values(oy, ox, mi);
                for (ki, params) in ct.calculator.bits().iter().enumerate() {
                    let v = values[ki];
                    sig.push(if v <= -t { 0 } else if v >= t { 2 } else { 1 });
                    sig.push(cell(cx + params.dx1, w));
                    sig.push(cell(cy + params.dy1, h));
                    sig.push(cell(cx + params.dx2, w));
                    sig.push(cell(cy + params.dy2, h));
                }
            }
        }
    }
    Ok(sig)
}

/// Margin test for the scalars that can move a kink: bit values of the
/// perturbed bit (or of all bits, for pixel scalars) must keep
/// `2 * step` clearance from the ramp edges, and perturbed sample
/// coordinates the same clearance from integer cell edges.
fn base_margins_ok(
    layer: &CtLayerConfig,
    cache_values: &[Vec<f64>],
    cfg: &SoftConfig,
    scalar: Scalar,
    step: f64,
) -> bool {
    let margin = 2.0 * step;
    let t = cfg.t();
    let kink_ok = |v: f64| (v.abs() - t).abs() > margin;
    match scalar {
        Scalar::Table { .. } => true,
        Scalar::Pixel { .. } => cache_values.iter().flatten().all(|&v| kink_ok(v)),
        Scalar::Bit { m, k, field } => {
            let bit_idx = m * layer.k() + k;
            if !cache_values.iter().all(|loc| kink_ok(loc[bit_idx])) {
                return false;
            }
            if field == 4 {
                return true; // threshold moves no coordinate
            }
            let params = &layer.tables()[m].calculator.bits()[k];
            let moved_offset = [params.dx1, params.dy1, params.dx2, params.dy2][field];
            let r = layer.radius();
            let stride = layer.stride();
            // the moved coordinate is center + offset; centers are integers,
            // so clearance only depends on the offset's fractional position
            let _ = (r, stride);
            let fract = (moved_offset - moved_offset.floor()).abs();
            fract > margin && (1.0 - fract) > margin
        }
    }
}

/// Runs the full analytic-vs-central-difference comparison over every
/// table entry, bit parameter, and input pixel of one layer.
pub fn check_layer_gradients(
    layer: &CtLayerConfig,
    t_in: &Tensor3,
    cfg: &SoftConfig,
    probe_seed: u64,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let (out, cache) = forward_soft(t_in, layer, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe_data: Vec<f64> = (0..out.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let probe = Tensor3::from_data(out.height(), out.width(), out.depth(), probe_data)
        .map_err(convtab_core::CtError::from)?;
    let bundle = backward_soft_ct(layer, t_in, &cache, &probe)?;

    // base bit values per location for the margin tests
    let (oh, ow) = cache.output_extent();
    let mut cache_values: Vec<Vec<f64>> = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut loc = Vec::with_capacity(layer.m() * layer.k());
            for mi in 0..layer.m() {
                loc.extend_from_slice(cache.bit_values(oy, ox, mi));
            }
            cache_values.push(loc);
        }
    }

    let base_sig = signature(layer, t_in, cfg)?;
    let objective = |layer: &CtLayerConfig, input: &Tensor3| -> Result<f64> {
        let (out, _) = forward_soft(input, layer, cfg)?;
        Ok(out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let mut scalars: Vec<(Scalar, f64, String)> = Vec::new();
    for (mi, ct) in layer.tables().iter().enumerate() {
        for idx in 0..ct.table.data().len() {
            scalars.push((Scalar::Table { m: mi, idx }, bundle.grads.table(mi)[idx], format!("table[{mi}][{idx}]")));
        }
        for ki in 0..layer.k() {
            let bg = bundle.grads.bit(mi, ki);
            for (field, &g) in [bg.dx1, bg.dy1, bg.dx2, bg.dy2, bg.threshold].iter().enumerate() {
                scalars.push((
                    Scalar::Bit { m: mi, k: ki, field },
                    g,
                    format!("bit[{mi}][{ki}].{}", FIELD_NAMES[field]),
                ));
            }
        }
    }
    for idx in 0..t_in.data().len() {
        scalars.push((Scalar::Pixel { idx }, bundle.d_input.data()[idx], format!("pixel[{idx}]")));
    }

    let mut report = GradCheckReport::default();
    let h = settings.step;
    for (scalar, analytic, name) in scalars {
        if !base_margins_ok(layer, &cache_values, cfg, scalar, h) {
            report.skipped += 1;
            continue;
        }
        let mut layer_plus = layer.clone();
        let mut input_plus = t_in.clone();
        apply(&mut layer_plus, &mut input_plus, scalar, h);
        let mut layer_minus = layer.clone();
        let mut input_minus = t_in.clone();
        apply(&mut layer_minus, &mut input_minus, scalar, -h);
        // both perturbed forwards must stay on the base smooth piece
        if signature(&layer_plus, &input_plus, cfg)? != base_sig
            || signature(&layer_minus, &input_minus, cfg)? != base_sig
        {
            report.skipped += 1;
            continue;
        }
        let numeric =
            (objective(&layer_plus, &input_plus)? - objective(&layer_minus, &input_minus)?) / (2.0 * h);
        let err = (analytic - numeric).abs();
        let tol = settings.abs_floor.max(settings.rel_tol * analytic.abs().max(numeric.abs()));
        let rel = err / analytic.abs().max(numeric.abs()).max(settings.abs_floor);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
        if err > tol {
            report.failures.push(format!("{name}: analytic {analytic:.9e} vs numeric {numeric:.9e}"));
        }
    }
    Ok(report)
}
