//! Losses, the Adam optimizer with its step-decay schedule, and the
//! training loop with per-epoch validation.

use crate::det::{subseed, DetRng};
use crate::metrics::{self, MetricsConfig, MetricsError};
use crate::models::{Model, ModelError};
use crate::tensor::{Mode, NodeId, ParamStore, Scalar, Shape, Tape, TensorError};
use crate::TargetMode;
use std::time::Instant;
use thiserror::Error;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    /// Epochs between decay steps.
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub target_mode: TargetMode,
}

impl TrainConfig {
    pub fn new(target_mode: TargetMode) -> TrainConfig {
        let epochs = match target_mode {
            TargetMode::Components => 100,
            TargetMode::Magnitude => 75,
        };
        TrainConfig {
            initial_lr: 4e-4,
            decay_factor: 0.9,
            decay_every: 25,
            batch_size: 16,
            epochs,
            seed: 0,
            target_mode,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.initial_lr > 0.0) {
            return Err(TrainError::BadConfig("initial_lr must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        if self.decay_every < 1 {
            return Err(TrainError::BadConfig("decay_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train: {0}")]
    BadConfig(String),
    #[error("train: {0} set is empty")]
    EmptyDataset(&'static str),
    #[error("train: {detail}")]
    ShapeMismatch { detail: String },
    #[error("train: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Step-decay schedule: the rate drops by `decay_factor` once every
/// `decay_every` epochs and is constant in between.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Two-channel training loss: summed absolute error over both velocity
/// components with the 1/(2 m h w) prefactor.
pub fn l1_components<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    truth: NodeId,
) -> Result<NodeId, TensorError> {
    let s = tape.shape(pred);
    if s.c != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "l1_components",
            detail: format!("expected 2 channels, got {}", s),
        });
    }
    tape.l1_loss(pred, truth)
}

/// Magnitude training loss: same normalization applied to the single
/// magnitude channel.
pub fn l1_magnitude<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    truth: NodeId,
) -> Result<NodeId, TensorError> {
    let s = tape.shape(pred);
    if s.c != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "l1_magnitude",
            detail: format!("expected 1 channel, got {}", s),
        });
    }
    tape.l1_loss(pred, truth)
}

fn loss_for<T: Scalar>(
    mode: TargetMode,
    tape: &mut Tape<T>,
    pred: NodeId,
    truth: NodeId,
) -> Result<NodeId, TensorError> {
    match mode {
        TargetMode::Components => l1_components(tape, pred, truth),
        TargetMode::Magnitude => l1_magnitude(tape, pred, truth),
    }
}

/// Adam moment buffers, one pair per store entry (empty for frozen
/// entries). Moments are kept in f64; parameters stay f32.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> AdamState {
        let m = store
            .entries
            .iter()
            .map(|e| if e.trainable { vec![0.0; e.data.len()] } else { Vec::new() })
            .collect::<Vec<_>>();
        AdamState { v: m.clone(), m, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over the listed gradients. Entries
/// without a gradient this step keep their moments untouched.
pub fn adam_step(
    store: &mut ParamStore<f32>,
    grads: &[(usize, Vec<f32>)],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (ix, g) in grads {
        let ix = *ix;
        if ix >= store.entries.len() || !store.entries[ix].trainable {
            return Err(TrainError::ShapeMismatch {
                detail: format!("gradient for entry {} which is not a trainable parameter", ix),
            });
        }
        let entry = &mut store.entries[ix];
        if g.len() != entry.data.len() {
            return Err(TrainError::ShapeMismatch {
                detail: format!(
                    "gradient length {} against parameter {} of length {}",
                    g.len(),
                    entry.name,
                    entry.data.len()
                ),
            });
        }
        let m = &mut state.m[ix];
        let v = &mut state.v[ix];
        for i in 0..g.len() {
            let gi = g[i] as f64;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            entry.data[i] = (entry.data[i] as f64 - lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
        }
    }
    Ok(())
}

/// One labeled sample: a mask plane and its target planes, both row-major.
#[derive(Clone, Debug)]
pub struct Example {
    pub mask: Vec<f32>,
    pub target: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalStats {
    pub loss: f64,
    pub mre: f64,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_mre: f64,
    pub val_mre: f64,
    pub train_dice: f64,
    pub val_dice: f64,
    pub train_iou: f64,
    pub val_iou: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Plain-text table for plotting, one epoch per line. Wall-clock and
    /// step counts are bookkeeping, not columns.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "epoch lr train_loss val_loss train_mre val_mre train_dice val_dice train_iou val_iou\n",
        );
        for r in &self.epochs {
            out.push_str(&format!(
                "{} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6} {:.6} {:.6} {:.6}\n",
                r.epoch,
                r.lr,
                r.train_loss,
                r.val_loss,
                r.train_mre,
                r.val_mre,
                r.train_dice,
                r.val_dice,
                r.train_iou,
                r.val_iou,
            ));
        }
        out
    }

    pub fn best_val_loss(&self) -> Option<(usize, f64)> {
        self.epochs
            .iter()
            .map(|r| (r.epoch, r.val_loss))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn check_examples(
    set: &[Example],
    which: &'static str,
    hw: usize,
    cout: usize,
) -> Result<(), TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyDataset(which));
    }
    for (i, ex) in set.iter().enumerate() {
        if ex.mask.len() != hw || ex.target.len() != cout * hw {
            return Err(TrainError::ShapeMismatch {
                detail: format!(
                    "{} sample {}: mask {} target {} against plane {} with {} channels",
                    which,
                    i,
                    ex.mask.len(),
                    ex.target.len(),
                    hw,
                    cout
                ),
            });
        }
    }
    Ok(())
}

fn stack(set: &[Example], order: &[usize], hw: usize, cout: usize) -> (Vec<f32>, Vec<f32>) {
    let mut masks = Vec::with_capacity(order.len() * hw);
    let mut targets = Vec::with_capacity(order.len() * cout * hw);
    for &i in order {
        masks.extend_from_slice(&set[i].mask);
        targets.extend_from_slice(&set[i].target);
    }
    (masks, targets)
}

/// Loss and score accumulators weighted by batch length, so uneven final
/// batches average exactly as one pass over the whole set.
#[derive(Default)]
struct Accum {
    loss: f64,
    mre: f64,
    dice: f64,
    iou: f64,
    count: usize,
}

impl Accum {
    fn add(
        &mut self,
        loss: f64,
        pred: &[f32],
        target: &[f32],
        m: usize,
        mcfg: &MetricsConfig,
    ) -> Result<(), MetricsError> {
        self.loss += loss * m as f64;
        self.mre += metrics::mre(pred, target, m)? * m as f64;
        self.dice += metrics::dice(pred, target, m, mcfg)? * m as f64;
        self.iou += metrics::iou(pred, target, m, mcfg)? * m as f64;
        self.count += m;
        Ok(())
    }

    fn stats(&self) -> EvalStats {
        let k = self.count.max(1) as f64;
        EvalStats {
            loss: self.loss / k,
            mre: self.mre / k,
            dice: self.dice / k,
            iou: self.iou / k,
        }
    }
}

/// Batched eval-mode pass: running statistics, no dropout, no updates.
pub fn evaluate(
    model: &Model,
    set: &[Example],
    batch_size: usize,
    target_mode: TargetMode,
    mcfg: &MetricsConfig,
) -> Result<EvalStats, TrainError> {
    let (h, w) = model.spec.input_hw;
    let hw = h * w;
    let cout = target_mode.channel_count();
    check_examples(set, "evaluation", hw, cout)?;
    let order: Vec<usize> = (0..set.len()).collect();
    let mut acc = Accum::default();
    for chunk in order.chunks(batch_size.max(1)) {
        let m = chunk.len();
        let (masks, targets) = stack(set, chunk, hw, cout);
        let mut tape: Tape<f32> = Tape::new(Mode::Eval);
        let x = tape.constant(Shape::nchw(m, 1, h, w), masks);
        let t = tape.constant(Shape::nchw(m, cout, h, w), targets.clone());
        let out = model.forward_on(&mut tape, &model.store, x)?;
        let loss = loss_for(target_mode, &mut tape, out, t)?;
        let lv = tape.value(loss)[0] as f64;
        acc.add(lv, tape.value(out), &targets, m, mcfg)?;
    }
    Ok(acc.stats())
}

/// Trains in place and returns the per-epoch history. Each epoch shuffles
/// with a seed derived from (cfg.seed, epoch), steps over ⌈k/batch⌉
/// batches (final short batch kept, its actual length normalizes the
/// loss), then scores the validation set in eval mode. The weights left
/// on the model are those of the best validation loss seen.
pub fn fit(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<History, TrainError> {
    cfg.validate()?;
    let (h, w) = model.spec.input_hw;
    let hw = h * w;
    let cout = cfg.target_mode.channel_count();
    if model.spec.out_channels != cout {
        return Err(TrainError::BadConfig(format!(
            "model emits {} channels but the target mode needs {}",
            model.spec.out_channels, cout
        )));
    }
    check_examples(train_set, "training", hw, cout)?;
    check_examples(val_set, "validation", hw, cout)?;

    let mcfg = MetricsConfig::default();
    let drop_stream = subseed(cfg.seed, 0xd71f);
    let mut adam = AdamState::new(&model.store);
    let mut history = History::default();
    let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
    let mut global_step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        DetRng::seeded(subseed(cfg.seed, epoch as u64)).shuffle(&mut order);

        let mut acc = Accum::default();
        let mut steps = 0usize;
        for (batch_ix, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let m = chunk.len();
            let (masks, targets) = stack(train_set, chunk, hw, cout);
            let mut tape: Tape<f32> =
                Tape::new(Mode::Train { seed: subseed(drop_stream, global_step) });
            let x = tape.constant(Shape::nchw(m, 1, h, w), masks);
            let t = tape.constant(Shape::nchw(m, cout, h, w), targets.clone());
            let out = model.forward_on(&mut tape, &model.store, x)?;
            let loss = loss_for(cfg.target_mode, &mut tape, out, t)?;
            let lv = tape.value(loss)[0] as f64;
            if !lv.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_ix });
            }
            tape.backward(loss)?;

            let grads: Vec<(usize, Vec<f32>)> = tape
                .param_links()
                .iter()
                .filter(|&&(ix, _)| model.store.entries[ix].trainable)
                .map(|&(ix, node)| {
                    let len = model.store.entries[ix].data.len();
                    let g = match tape.grad(node) {
                        Some(g) => g.to_vec(),
                        None => vec![0.0; len],
                    };
                    (ix, g)
                })
                .collect();
            acc.add(lv, tape.value(out), &targets, m, &mcfg)?;
            for (ix, data) in tape.take_stat_updates() {
                model.store.entries[ix].data = data;
            }
            adam_step(&mut model.store, &grads, &mut adam, lr)?;
            global_step += 1;
            steps += 1;
        }
        let train_stats = acc.stats();

        let val = evaluate(model, val_set, cfg.batch_size, cfg.target_mode, &mcfg)?;
        if !val.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        if best.as_ref().map_or(true, |(b, _)| val.loss < *b) {
            let snap = model.store.entries.iter().map(|e| e.data.clone()).collect();
            best = Some((val.loss, snap));
        }

        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: train_stats.loss,
            val_loss: val.loss,
            train_mre: train_stats.mre,
            val_mre: val.mre,
            train_dice: train_stats.dice,
            val_dice: val.dice,
            train_iou: train_stats.iou,
            val_iou: val.iou,
            steps,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    if let Some((_, snap)) = best {
        for (entry, data) in model.store.entries.iter_mut().zip(snap) {
            entry.data = data;
        }
    }
    Ok(history)
}
