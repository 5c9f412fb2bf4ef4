//! The three-phase training driver.
//!
//! Phase 1 trains the lower half of the CT layers under a temporary
//! head (global average pool, first `classes` channels as logits).
//! Phase 2 trains the upper half with the lower layers frozen. Phase 3
//! unfreezes everything for fine-tuning, optionally against a teacher's
//! distillation loss. One annealing clock runs across all phases: the
//! ambiguous-bit fraction decays per epoch, the sigmoid half-width is
//! recalibrated per layer from bit values observed on a fixed
//! calibration batch, and once the fraction floors out the remaining
//! epochs train hard (single active word, table updates only).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use convtab_core::fern::{calibrate_t, SoftConfig};
use convtab_core::layer::{forward_soft, ForwardCache};
use convtab_core::network::{argmax, ForwardMode, Layer, Network};
use convtab_core::tensor::{avg_pool, avg_pool_backward, Tensor3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anneal::AnnealSchedule;
use crate::backward::{backward_soft_ct, LayerGrads};
use crate::loss::{cross_entropy, cross_entropy_grad, distill_grad, distill_loss, DistillConfig};
use crate::sgd::{sgd_step, sgd_step_scalar, SgdConfig};
use crate::{Result, TeacherLogits, TrainError};

/// Effective half-width used once annealing floors out: every bit
/// saturates, so word choice is hard and only tables keep training.
const HARD_T: f64 = 1e-9;

/// Epochs spent in each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhasePlan {
    pub phase1: usize,
    pub phase2: usize,
    pub phase3: usize,
}

impl PhasePlan {
    pub fn total(&self) -> usize {
        self.phase1 + self.phase2 + self.phase3
    }
}

impl Default for PhasePlan {
    fn default() -> Self {
        PhasePlan { phase1: 3, phase2: 2, phase3: 5 }
    }
}

/// Everything the driver needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub anneal: AnnealSchedule,
    pub phases: PhasePlan,
    /// Distillation settings for phase 3; applied only when teacher
    /// logits are supplied.
    pub distill: Option<DistillConfig>,
    /// Sigmoid half-width used only if calibration is impossible.
    pub initial_t: f64,
    /// Element-wise bound on the gradient passed down between CT layers
    /// (0 disables). The ramp slope grows as 1/(2t) while annealing, so
    /// an unbounded chain feeds lower layers ever larger updates.
    pub chain_clip: f64,
    pub prune_eps: f64,
    /// Size of the fixed calibration batch (taken from the head of the
    /// training set) used for recalibration and active-word metrics.
    pub calibration_examples: usize,
    pub seed: u64,
    /// Print each epoch's metrics row to stderr as it completes.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            anneal: AnnealSchedule::default(),
            phases: PhasePlan::default(),
            distill: None,
            initial_t: 0.5,
            chain_clip: 1.0,
            prune_eps: 1e-8,
            calibration_examples: 64,
            seed: 0,
            verbose: false,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: usize,
    pub loss: f64,
    pub train_err: f64,
    pub val_err: Option<f64>,
    pub f: f64,
    pub t_mean: f64,
    pub mean_active_words: f64,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,phase,loss,train_err,val_err,f,t,mean_active_words"
    }

    pub fn csv_row(&self) -> String {
        let val = self.val_err.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{},{:.6},{:.6},{:.4}",
            self.epoch, self.phase, self.loss, self.train_err, val, self.f, self.t_mean, self.mean_active_words
        )
    }
}

/// Number of CT layers belonging to the lower half for phase purposes.
pub fn lower_half_split(ct_count: usize) -> usize {
    (ct_count / 2).max(1)
}

enum Trace {
    Ct { input: Tensor3, cache: ForwardCache },
    Pool { in_shape: (usize, usize, usize), l: usize, stride: usize },
    Marker,
}

struct ItemOutcome {
    loss: f64,
    correct: bool,
    grads: Vec<Option<LayerGrads>>,
}

struct Scope {
    /// Layers to run (prefix of the chain).
    layer_end: usize,
    /// CT layers (by ct order) that receive updates.
    first_trainable_ct: usize,
    /// Whether the temporary pooled head replaces the upper chain.
    temporary_head: bool,
}

fn global_mean_pool(t: &Tensor3) -> Vec<f64> {
    let (h, w, d) = t.shape();
    let mut out = vec![0.0; d];
    for y in 0..h {
        for x in 0..w {
            for (o, v) in out.iter_mut().zip(t.column(y, x)) {
                *o += v;
            }
        }
    }
    let norm = 1.0 / (h * w) as f64;
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

/// Runs the scoped forward, evaluates the loss, and backpropagates down
/// to the lowest trainable CT layer.
#[allow(clippy::too_many_arguments)]
fn train_item(
    layers: &[Layer],
    cfgs: &[SoftConfig],
    scope: &Scope,
    classes: usize,
    image: &Tensor3,
    label: usize,
    teacher: Option<(&[f64], &DistillConfig, f64)>,
    ct_count_in_scope: usize,
    chain_clip: f64,
) -> Result<ItemOutcome> {
    let mut current = image.clone();
    let mut traces: Vec<Trace> = Vec::with_capacity(scope.layer_end);
    let mut ct_i = 0usize;
    for layer in &layers[..scope.layer_end] {
        match layer {
            Layer::Ct(ct) => {
                let (out, cache) = forward_soft(&current, ct, &cfgs[ct_i])?;
                traces.push(Trace::Ct { input: std::mem::replace(&mut current, out), cache });
                ct_i += 1;
            }
            Layer::AvgPool { l, stride } => {
                let out = avg_pool(&current, *l, *stride)?;
                traces.push(Trace::Pool { in_shape: current.shape(), l: *l, stride: *stride });
                current = out;
            }
            Layer::Softmax => traces.push(Trace::Marker),
        }
    }

    let logits: Vec<f64> = if scope.temporary_head {
        global_mean_pool(&current).into_iter().take(classes).collect()
    } else {
        current.data().to_vec()
    };

    let (loss, d_logits) = match teacher {
        Some((teacher_logits, cfg, temp)) => (
            distill_loss(&logits, teacher_logits, cfg, temp, label)?,
            distill_grad(&logits, teacher_logits, cfg, temp, label)?,
        ),
        None => (cross_entropy(&logits, label)?, cross_entropy_grad(&logits, label)?),
    };
    let correct = argmax(&logits) == label;

    // gradient with respect to the scoped chain's output tensor
    let mut d_current = if scope.temporary_head {
        let (h, w, d) = current.shape();
        let norm = 1.0 / (h * w) as f64;
        let mut grad = Tensor3::zeros(h, w, d);
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * d;
                for (c, g) in d_logits.iter().enumerate() {
                    grad.data_mut()[base + c] = g * norm;
                }
            }
        }
        grad
    } else {
        let (h, w, d) = current.shape();
        Tensor3::from_data(h, w, d, d_logits).map_err(convtab_core::CtError::from)?
    };

    let mut grads: Vec<Option<LayerGrads>> = (0..ct_count_in_scope).map(|_| None).collect();
    let mut ct_i = ct_count_in_scope;
    let mut layer_iter = layers[..scope.layer_end].iter().rev();
    for trace in traces.iter().rev() {
        let layer = layer_iter.next().expect("traces align with layers");
        match trace {
            Trace::Ct { input, cache } => {
                ct_i -= 1;
                let Layer::Ct(ct) = layer else { unreachable!("trace/layer mismatch") };
                let bundle = backward_soft_ct(ct, input, cache, &d_current)?;
                grads[ct_i] = Some(bundle.grads);
                if ct_i == scope.first_trainable_ct {
                    break; // everything below is frozen
                }
                d_current = bundle.d_input;
                if chain_clip > 0.0 {
                    for v in d_current.data_mut() {
                        *v = v.clamp(-chain_clip, chain_clip);
                    }
                }
            }
            Trace::Pool { in_shape, l, stride } => {
                d_current = avg_pool_backward(&d_current, *in_shape, *l, *stride)?;
            }
            Trace::Marker => {}
        }
    }

    Ok(ItemOutcome { loss, correct, grads })
}

/// Full-network soft forward over the calibration batch, collecting
/// |bit values| per CT layer (kept in whole word-calculator groups of
/// `K` so ambiguity counts can be recomputed under any half-width).
fn calibration_pass(net: &Network, images: &[Tensor3], cfgs: &[SoftConfig]) -> Result<Vec<Vec<f64>>> {
    let run = |image: &Tensor3| -> Result<Vec<Vec<f64>>> {
        let mut current = image.clone();
        let mut per_layer = Vec::new();
        let mut ct_i = 0;
        for layer in net.layers() {
            match layer {
                Layer::Ct(ct) => {
                    let (out, cache) = forward_soft(&current, ct, &cfgs[ct_i])?;
                    let (oh, ow) = cache.output_extent();
                    let mut values = Vec::with_capacity(oh * ow * ct.m() * ct.k());
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for mi in 0..ct.m() {
                                values.extend(cache.bit_values(oy, ox, mi).iter().map(|v| v.abs()));
                            }
                        }
                    }
                    per_layer.push(values);
                    current = out;
                    ct_i += 1;
                }
                Layer::AvgPool { l, stride } => current = avg_pool(&current, *l, *stride)?,
                Layer::Softmax => {}
            }
        }
        Ok(per_layer)
    };

    #[cfg(feature = "parallel")]
    let results: Result<Vec<_>> = images.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<_>> = images.iter().map(run).collect();
    let results = results?;

    let ct_count = net.ct_layer_indices().len();
    let mut abs_values_per_layer = vec![Vec::new(); ct_count];
    for per_layer in results {
        for (acc, values) in abs_values_per_layer.iter_mut().zip(per_layer) {
            acc.extend(values);
        }
    }
    Ok(abs_values_per_layer)
}

/// Mean reachable words per calculator under half-width `t`: each
/// ambiguous bit doubles the word set.
fn expected_active_words(abs_values: &[Vec<f64>], ks: &[usize], ts: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut groups = 0usize;
    for ((values, &k), &t) in abs_values.iter().zip(ks).zip(ts) {
        for group in values.chunks_exact(k) {
            let ambiguous = group.iter().filter(|v| **v < t).count();
            total += (1u64 << ambiguous) as f64;
            groups += 1;
        }
    }
    if groups > 0 {
        total / groups as f64
    } else {
        0.0
    }
}

/// Trains `net` in place through the three phases and returns the
/// per-epoch log. `val` supplies a held-out set evaluated in hard mode
/// each epoch; `teacher` enables the distillation loss during phase 3.
pub fn train_three_phase(
    net: &mut Network,
    images: &[Tensor3],
    labels: &[usize],
    val: Option<(&[Tensor3], &[usize])>,
    teacher: Option<&TeacherLogits>,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(TrainError::EmptyDataset);
    }
    config.anneal.validate()?;
    let classes = net.classes();
    for &label in labels {
        if label >= classes {
            return Err(TrainError::BadLabel { label, classes });
        }
    }
    let ct_indices = net.ct_layer_indices();
    if ct_indices.len() < 2 {
        return Err(TrainError::TooShallow(ct_indices.len()));
    }
    let lower = lower_half_split(ct_indices.len());
    let lower_end_layer = ct_indices[lower - 1] + 1;
    let head_channels = match &net.layers()[ct_indices[lower - 1]] {
        Layer::Ct(ct) => ct.d_out(),
        _ => unreachable!(),
    };
    if head_channels < classes {
        return Err(TrainError::HeadTooNarrow { classes, channels: head_channels });
    }

    // per-CT-layer half-widths and momentum state
    let mut half_widths = vec![config.initial_t; ct_indices.len()];
    let mut velocities: Vec<LayerGrads> = ct_indices
        .iter()
        .map(|&i| match &net.layers()[i] {
            Layer::Ct(ct) => LayerGrads::zeros_for(ct),
            _ => unreachable!(),
        })
        .collect();

    let calibration: Vec<Tensor3> =
        images.iter().take(config.calibration_examples.max(1).min(images.len())).cloned().collect();

    let mut metrics = Vec::with_capacity(config.phases.total());
    let mut epoch = 0usize;
    for (phase, phase_epochs) in [config.phases.phase1, config.phases.phase2, config.phases.phase3]
        .into_iter()
        .enumerate()
    {
        let phase_no = phase + 1;
        let scope = match phase_no {
            1 => Scope { layer_end: lower_end_layer, first_trainable_ct: 0, temporary_head: true },
            2 => Scope {
                layer_end: net.layers().len(),
                first_trainable_ct: lower,
                temporary_head: false,
            },
            _ => Scope { layer_end: net.layers().len(), first_trainable_ct: 0, temporary_head: false },
        };
        let ct_in_scope = match phase_no {
            1 => lower,
            _ => ct_indices.len(),
        };

        for phase_epoch in 0..phase_epochs {
            let f = config.anneal.fraction_at(epoch);
            let hard = config.anneal.is_hard_at(epoch);

            // calibrate against the current parameters before training:
            // bit values do not depend on the half-width, so the
            // collection pass may run under the previous widths
            let collect_cfgs: Vec<SoftConfig> = half_widths
                .iter()
                .map(|&t| SoftConfig::new(t, config.prune_eps))
                .collect::<std::result::Result<_, _>>()
                .map_err(TrainError::from)?;
            let abs_values = calibration_pass(net, &calibration, &collect_cfgs)?;
            if epoch % config.anneal.recalib_period == 0 {
                for (t, values) in half_widths.iter_mut().zip(&abs_values) {
                    *t = calibrate_t(values, f)?;
                }
            }
            let effective: Vec<f64> =
                half_widths.iter().map(|&t| if hard { HARD_T } else { t }).collect();
            let ks: Vec<usize> = ct_indices
                .iter()
                .map(|&i| match &net.layers()[i] {
                    Layer::Ct(ct) => ct.k(),
                    _ => unreachable!(),
                })
                .collect();
            let mean_active_words = expected_active_words(&abs_values, &ks, &effective);
            let cfgs: Vec<SoftConfig> = effective
                .iter()
                .map(|&t| SoftConfig::new(t, config.prune_eps))
                .collect::<std::result::Result<_, _>>()
                .map_err(TrainError::from)?;

            let temp = config.distill.map(|d| {
                let span = config.phases.phase3.saturating_sub(1).max(1) as f64;
                d.temperature_at(phase_epoch as f64 / span)
            });

            let mut order: Vec<usize> = (0..images.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            let mut errors = 0usize;
            for batch in order.chunks(config.sgd.batch_size.max(1)) {
                let item = |&idx: &usize| -> Result<ItemOutcome> {
                    let teacher_entry = match (phase_no, teacher, &config.distill) {
                        (3, Some(map), Some(d)) => {
                            let logits = map
                                .get(&(idx as u32))
                                .ok_or(TrainError::MissingTeacher(idx as u32))?;
                            Some((logits.as_slice(), d, temp.unwrap_or(1.0)))
                        }
                        _ => None,
                    };
                    train_item(
                        net.layers(),
                        &cfgs,
                        &scope,
                        classes,
                        &images[idx],
                        labels[idx],
                        teacher_entry,
                        ct_in_scope,
                        config.chain_clip,
                    )
                };
                #[cfg(feature = "parallel")]
                let outcomes: Result<Vec<ItemOutcome>> = batch.par_iter().map(item).collect();
                #[cfg(not(feature = "parallel"))]
                let outcomes: Result<Vec<ItemOutcome>> = batch.iter().map(item).collect();
                let outcomes = outcomes?;

                // deterministic reduction in batch order
                let mut batch_grads: Vec<Option<LayerGrads>> = (0..ct_in_scope).map(|_| None).collect();
                for outcome in &outcomes {
                    loss_sum += outcome.loss;
                    errors += !outcome.correct as usize;
                    for (acc, g) in batch_grads.iter_mut().zip(&outcome.grads) {
                        match (acc, g) {
                            (acc @ None, Some(g)) => *acc = Some(g.clone()),
                            (Some(acc), Some(g)) => acc.add_assign(g),
                            _ => {}
                        }
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                for (ct_i, maybe_grads) in batch_grads.into_iter().enumerate() {
                    let Some(mut grads) = maybe_grads else { continue };
                    if ct_i < scope.first_trainable_ct {
                        continue;
                    }
                    grads.scale(scale);
                    let lr = config.sgd.learning_rate;
                    // bit-value gradients carry a 1/(2t) ramp-slope factor, so
                    // the bit-parameter step scales with 2t: bits move freely
                    // while wide, then crystallize as annealing sharpens them
                    let lr_bits = lr * 2.0 * cfgs[ct_i].t();
                    let momentum = config.sgd.momentum;
                    let velocity = &mut velocities[ct_i];
                    let Layer::Ct(ct) = &mut net.layers_mut()[ct_indices[ct_i]] else { unreachable!() };
                    let radius = ct.radius() as f64;
                    for mi in 0..ct.m() {
                        let table = ct.tables_mut()[mi].table.data_mut();
                        sgd_step(table, velocity.table_mut(mi), grads.table(mi), lr, momentum);
                    }
                    if !hard {
                        for mi in 0..ct.m() {
                            for ki in 0..grads.k() {
                                let g = *grads.bit(mi, ki);
                                let v = velocity.bit_mut(mi, ki);
                                let p = &mut ct.tables_mut()[mi].calculator.bits_mut()[ki];
                                sgd_step_scalar(&mut p.dx1, &mut v.dx1, g.dx1, lr_bits, momentum);
                                sgd_step_scalar(&mut p.dy1, &mut v.dy1, g.dy1, lr_bits, momentum);
                                sgd_step_scalar(&mut p.dx2, &mut v.dx2, g.dx2, lr_bits, momentum);
                                sgd_step_scalar(&mut p.dy2, &mut v.dy2, g.dy2, lr_bits, momentum);
                                sgd_step_scalar(&mut p.threshold, &mut v.threshold, g.threshold, lr_bits, momentum);
                                p.clamp_to_radius(radius);
                            }
                        }
                    }
                }
            }

            let val_err = match val {
                Some((vi, vl)) => Some(net.evaluate(vi, vl, ForwardMode::Hard)?),
                None => None,
            };
            let row = EpochMetrics {
                epoch,
                phase: phase_no,
                loss: loss_sum / images.len() as f64,
                train_err: errors as f64 / images.len() as f64,
                val_err,
                f,
                t_mean: if hard {
                    0.0
                } else {
                    half_widths.iter().sum::<f64>() / half_widths.len() as f64
                },
                mean_active_words,
            };
            if config.verbose {
                eprintln!("{}", row.csv_row());
            }
            metrics.push(row);
            epoch += 1;
        }
    }
    Ok(metrics)
}
