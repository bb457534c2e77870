//! Test-time adaptation: the harmonizer is tuned so that a frozen flow
//! assigns high likelihood to its outputs on unlabeled target images.
//!
//! Criteria are evaluated after step 1 and then every `eval_every` steps on
//! a fixed subset of the target images. Labels, when supplied, are used only
//! to record DSC for oracle selection and reporting.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::harmonizer::Harmonizer;
use crate::image::ImageBatch;
use crate::nn::{accumulate, clip_global_norm, Adam, ParamSet};
use crate::rng::{child_seed, child_seed_idx, rng};
use crate::scalar::Scalar;
use crate::seg::{evaluate_segmenter, LabelMask, Segmenter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    EntropyPlateau,
    SourceBpd,
    OracleBest,
    FixedSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingCriterion {
    pub kind: CriterionKind,
    /// Evaluations in the entropy moving average.
    pub window: usize,
    /// Entropy decrease (nats) below which the plateau is declared.
    pub tolerance: f64,
    /// Bits per dimension allowed above the source reference.
    pub slack: f64,
}

impl Default for StoppingCriterion {
    fn default() -> Self {
        StoppingCriterion { kind: CriterionKind::SourceBpd, window: 5, tolerance: 1e-3, slack: 0.02 }
    }
}

impl StoppingCriterion {
    pub fn of(kind: CriterionKind) -> Self {
        StoppingCriterion { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::invalid(format!("stopping window must be at least 2, got {}", self.window)));
        }
        if !(self.tolerance >= 0.0 && self.slack >= 0.0) {
            return Err(Error::invalid("stopping tolerance and slack must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub criterion: StoppingCriterion,
    pub lr: f64,
    /// Step budget; also the exact step count for `fixed_steps`.
    pub max_steps: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    /// Size of the fixed evaluation subset.
    pub eval_images: usize,
    pub clip_norm: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            criterion: StoppingCriterion::default(),
            lr: 1e-4,
            max_steps: 200,
            eval_every: 10,
            batch_size: 4,
            micro_batch: 4,
            eval_images: 8,
            clip_norm: 100.0,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.criterion.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::invalid("adaptation lr must be positive"));
        }
        if self.eval_every == 0 || self.batch_size == 0 || self.micro_batch == 0 || self.eval_images == 0 {
            return Err(Error::invalid("adaptation cadence, batch sizes and eval_images must be positive"));
        }
        Ok(())
    }

    fn is_eval_step(&self, step: usize) -> bool {
        step == 0 || step == 1 || step.is_multiple_of(self.eval_every) || step == self.max_steps
    }
}

/// True once the trailing `window`-point moving average of `history` has
/// stopped decreasing: `MA(n−2) − MA(n−1) < tolerance`, where `MA(t)`
/// averages the (up to) `window` values ending at `t`. Needs at least
/// `window` values.
pub fn entropy_plateau_check(history: &[f64], window: usize, tolerance: f64) -> bool {
    assert!(window >= 2, "plateau window must be at least 2");
    let n = history.len();
    if n < window {
        return false;
    }
    let ma = |t: usize| {
        let lo = (t + 1).saturating_sub(window);
        history[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
    };
    ma(n - 2) - ma(n - 1) < tolerance
}

/// `current ≤ reference + slack`; an infinite reference is always reached.
pub fn source_bpd_check(current: f64, reference: f64, slack: f64) -> bool {
    current <= reference + slack
}

/// One evaluation of the adaptation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Mean bits per dimension of the harmonized evaluation subset.
    pub bpd: f64,
    /// Mean training-batch loss since the previous evaluation.
    pub train_loss: Option<f64>,
    pub entropy: Option<f64>,
    /// Mean DSC (%) on the labelled images, when labels are supplied.
    pub dsc: Option<f64>,
    pub alpha_mean: f64,
    pub source_bpd_reached: bool,
    pub entropy_plateau: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    Criterion,
    Budget,
    /// A non-finite loss or gradient at `step`; the last good snapshot is returned.
    NumericFailure { step: usize },
}

/// Parameters at one evaluation with the metric that ranks them.
#[derive(Clone, Debug)]
pub struct Snapshot<T> {
    pub step: usize,
    pub theta: ParamSet<T>,
    pub metric: f64,
}

/// Mutable state of one adaptation run.
pub struct AdaptationState<T> {
    pub theta: ParamSet<T>,
    pub step: usize,
    pub bpd_history: Vec<f64>,
    pub entropy_history: Vec<f64>,
    pub source_bpd_ref: f64,
    pub best_snapshot: Option<Snapshot<T>>,
}

pub struct AdaptOutcome<T> {
    pub net: Harmonizer<T>,
    pub trace: Vec<TraceRecord>,
    pub stop_step: usize,
    pub reason: StopReason,
}

/// Target images plus optional labels for DSC recording.
pub struct AdaptTargets<'a, T> {
    /// Unlabeled pool the gradient batches are drawn from (continuous).
    pub pool: &'a ImageBatch<T>,
    /// Labelled images and masks whose DSC is recorded at each evaluation.
    pub labelled: Option<(&'a ImageBatch<T>, &'a [LabelMask])>,
}

/// Mean bits per dimension the frozen `flow` assigns to `h(x)`.
pub fn adaptation_loss<T: Scalar>(batch: &ImageBatch<T>, net: &Harmonizer<T>, flow: &FlowModel<T>) -> Result<f64> {
    let h = net.harmonize(batch)?;
    let bpd = flow.bits_per_dim(&h.images, 0)?;
    Ok(bpd.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / bpd.len() as f64)
}

/// Gradient of the mean adaptation loss with respect to the harmonizer
/// parameters only. Returns `(loss, grads, mean α)`.
fn loss_and_grads<T: Scalar>(
    batch: &ImageBatch<T>,
    net: &Harmonizer<T>,
    flow: &FlowModel<T>,
    micro: usize,
) -> Result<(f64, Vec<crate::tensor::Tensor<T>>, f64)> {
    let n = batch.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut grads = Vec::new();
    let (mut loss, mut alpha) = (0.0, 0.0);
    for chunk in idx.chunks(micro) {
        let mut g = Graph::new();
        let hp = net.params().bind(&mut g, true);
        let fp = flow.params().bind(&mut g, false);
        let x = g.input(batch.tensor().select(chunk));
        let pass = net.forward_graph(&mut g, &hp, x)?;
        let bpd = flow.bpd_graph(&mut g, &fp, pass.y, false, None)?;
        let total = g.sum_all(bpd);
        loss += g.value(total).data()[0].to_f64_lossy();
        alpha += g.value(pass.alpha).data().iter().map(|a| a.to_f64_lossy()).sum::<f64>();
        let scaled = g.scale(total, T::lit(1.0 / n as f64));
        let gr = g.backward(scaled);
        accumulate(&mut grads, hp.gradients(&g, &gr));
    }
    Ok((loss / n as f64, grads, alpha / n as f64))
}

struct Evaluator<'a, T> {
    subset: ImageBatch<T>,
    segmenter: Option<&'a Segmenter<T>>,
    labelled: Option<(&'a ImageBatch<T>, &'a [LabelMask])>,
}

impl<T: Scalar> Evaluator<'_, T> {
    fn run(&self, net: &Harmonizer<T>, flow: &FlowModel<T>) -> Result<(f64, Option<f64>, Option<f64>, f64)> {
        let h = net.harmonize(&self.subset)?;
        let bpd = flow.bits_per_dim(&h.images, 0)?;
        let bpd = bpd.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / bpd.len() as f64;
        let alpha = h.alpha.iter().map(|a| a.to_f64_lossy()).sum::<f64>() / h.alpha.len() as f64;
        let entropy = match self.segmenter {
            Some(s) => Some(s.mean_entropy(&h.images)?),
            None => None,
        };
        let dsc = match (self.segmenter, self.labelled) {
            (Some(s), Some((x, masks))) => Some(evaluate_segmenter(s, &net.harmonize(x)?.images, masks)?.0),
            _ => None,
        };
        Ok((bpd, entropy, dsc, alpha))
    }
}

/// Step at which `criterion` would stop on an existing trace.
pub fn stop_step_on_trace(trace: &[TraceRecord], criterion: &StoppingCriterion, max_steps: usize) -> Option<usize> {
    match criterion.kind {
        CriterionKind::FixedSteps => trace.iter().find(|r| r.step == max_steps).map(|r| r.step),
        CriterionKind::SourceBpd => trace.iter().find(|r| r.step > 0 && r.source_bpd_reached).map(|r| r.step),
        CriterionKind::EntropyPlateau => trace.iter().find(|r| r.step > 0 && r.entropy_plateau).map(|r| r.step),
        CriterionKind::OracleBest => trace
            .iter()
            .filter_map(|r| r.dsc.map(|d| (r.step, d)))
            .fold(None, |best: Option<(usize, f64)>, (s, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((s, d)),
            })
            .map(|(s, _)| s),
    }
}

/// Adapts a copy of `init` to `targets` under the frozen `flow`.
///
/// `segmenter` is needed for the entropy plateau and oracle criteria; for
/// the oracle, `targets.labelled` must be present as well.
pub fn adapt<T: Scalar>(
    init: &Harmonizer<T>,
    flow: &FlowModel<T>,
    targets: &AdaptTargets<'_, T>,
    source_bpd_ref: f64,
    segmenter: Option<&Segmenter<T>>,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome<T>> {
    cfg.validate()?;
    let crit = &cfg.criterion;
    if crit.kind == CriterionKind::EntropyPlateau && segmenter.is_none() {
        return Err(Error::invalid("the entropy plateau criterion needs a segmenter"));
    }
    if crit.kind == CriterionKind::OracleBest && (segmenter.is_none() || targets.labelled.is_none()) {
        return Err(Error::invalid("the oracle criterion needs a segmenter and labelled targets"));
    }
    let pool = targets.pool;
    if pool.is_empty() {
        return Err(Error::invalid("no target images to adapt on"));
    }
    if pool.is_discrete() {
        return Err(Error::invalid("adaptation expects continuous target images"));
    }
    let mut subset_idx: Vec<usize> = (0..pool.len()).collect();
    subset_idx.shuffle(&mut rng(child_seed(cfg.seed, "eval-subset")));
    subset_idx.truncate(cfg.eval_images);
    subset_idx.sort_unstable();
    let eval = Evaluator { subset: pool.select(&subset_idx), segmenter, labelled: targets.labelled };

    let mut net = init.clone();
    let mut state = AdaptationState {
        theta: net.params().clone(),
        step: 0,
        bpd_history: Vec::new(),
        entropy_history: Vec::new(),
        source_bpd_ref,
        best_snapshot: None,
    };
    let mut adam = Adam::new(net.params());
    let mut trace = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let (mut loss_acc, mut loss_n) = (0.0, 0usize);

    let mut record = |state: &mut AdaptationState<T>, net: &Harmonizer<T>, train_loss: Option<f64>| -> Result<bool> {
        let (bpd, entropy, dsc, alpha_mean) = eval.run(net, flow)?;
        state.bpd_history.push(bpd);
        if let Some(h) = entropy {
            state.entropy_history.push(h);
        }
        let reached = source_bpd_check(bpd, state.source_bpd_ref, crit.slack);
        let plateau = entropy.is_some() && entropy_plateau_check(&state.entropy_history, crit.window, crit.tolerance);
        let metric = match crit.kind {
            CriterionKind::OracleBest => dsc.unwrap_or(f64::NEG_INFINITY),
            _ => -bpd,
        };
        if state.best_snapshot.as_ref().is_none_or(|b| metric > b.metric) {
            state.best_snapshot = Some(Snapshot { step: state.step, theta: net.params().clone(), metric });
        }
        let rec = TraceRecord {
            step: state.step,
            bpd,
            train_loss,
            entropy,
            dsc,
            alpha_mean,
            source_bpd_reached: reached,
            entropy_plateau: plateau,
        };
        info!(
            "adapt step {} bpd {:.4} entropy {:?} dsc {:?} alpha {:.4}",
            rec.step, bpd, entropy, dsc, alpha_mean
        );
        trace.push(rec);
        let fire = state.step > 0
            && match crit.kind {
                CriterionKind::SourceBpd => reached,
                CriterionKind::EntropyPlateau => plateau,
                _ => false,
            };
        Ok(fire)
    };

    let mut reason = StopReason::Budget;
    if cfg.max_steps > 0 {
        record(&mut state, &net, None)?;
    }
    while state.step < cfg.max_steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..pool.len()).collect();
            fresh.shuffle(&mut rng(child_seed_idx(cfg.seed, "order", epoch)));
            epoch += 1;
            order.extend(fresh);
        }
        let take: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let batch = pool.select(&take);
        let (loss, mut grads, alpha) = match loss_and_grads(&batch, &net, flow, cfg.micro_batch) {
            Ok(v) => v,
            Err(Error::NonFiniteTransform { .. } | Error::NonFiniteLoss { .. }) => (f64::NAN, Vec::new(), f64::NAN),
            Err(e) => return Err(e),
        };
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !loss.is_finite() || !norm.is_finite() {
            warn!("non-finite adaptation loss at step {}; keeping the last good parameters", state.step + 1);
            reason = StopReason::NumericFailure { step: state.step + 1 };
            break;
        }
        if alpha <= 0.0 {
            warn!("mean harmonizer alpha {alpha:.4} is not positive at step {}", state.step + 1);
        }
        adam.step(net.params_mut(), &grads, cfg.lr);
        state.step += 1;
        state.theta = net.params().clone();
        loss_acc += loss;
        loss_n += 1;
        debug!("adapt step {} loss {:.5} grad norm {:.3e}", state.step, loss, norm);
        if cfg.is_eval_step(state.step) {
            let train_loss = Some(loss_acc / loss_n as f64);
            (loss_acc, loss_n) = (0.0, 0);
            if record(&mut state, &net, train_loss)? {
                reason = StopReason::Criterion;
                break;
            }
        }
    }

    if crit.kind == CriterionKind::OracleBest {
        if let Some(best) = &state.best_snapshot {
            *net.params_mut() = best.theta.clone();
            return Ok(AdaptOutcome { net, trace, stop_step: best.step, reason: StopReason::Criterion });
        }
    }
    *net.params_mut() = state.theta;
    Ok(AdaptOutcome { net, trace, stop_step: state.step, reason })
}
