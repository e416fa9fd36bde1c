//! L1 regression loss, Adam, the learning-rate schedule, flip augmentation
//! and the epoch loop.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamSet, Tape, Tensor, TensorError, Var};
use crate::data::{normalize_2d, temporal_windows, PoseSample};
use crate::error::TrainError;
use crate::metrics::{evaluate, EvalReport, Joint, MetricsConfig};
use crate::model::Model;
use crate::rng;
use crate::skeleton::SkeletonTopology;

/// Mean absolute difference over every coordinate.
pub fn l1_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var, TensorError> {
    if tape.shape(pred) != tape.shape(gt) {
        return Err(TensorError::ShapeMismatch {
            op: "l1_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(gt).to_vec(),
        });
    }
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        OptimState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with learning rate `lr`. Frozen parameters and parameters
    /// without a gradient are left alone.
    pub fn adam_step(&mut self, params: &mut ParamSet, grads: &ParamGrads, lr: f64) -> Result<(), TensorError> {
        if self.m.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            let Some(g) = grads.get(id) else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if g.len() != m.len() || m.len() != p.value.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative decay applied once per epoch.
    pub lr_decay: f64,
    /// Random horizontal flips while training and flip averaging at test time.
    pub flip_augment: bool,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 256,
            lr0: 1e-3,
            lr_decay: 0.95,
            flip_augment: true,
            seed: 0,
            eval_batch_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::ConfigInvalid(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be a nonnegative number");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }
}

/// `lr0 * lr_decay^epoch`, epochs counted from 0.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// Negates x and swaps mirrored joints.
pub fn flip_2d(joints: &[[f64; 2]], perm: &[usize]) -> Vec<[f64; 2]> {
    perm.iter().map(|&j| [-joints[j][0], joints[j][1]]).collect()
}

pub fn flip_3d(joints: &[Joint], perm: &[usize]) -> Vec<Joint> {
    perm.iter()
        .map(|&j| [-joints[j][0], joints[j][1], joints[j][2]])
        .collect()
}

/// Mirrors a sample about the vertical axis through the origin. Intended
/// for centred coordinates; training flips the normalized inputs.
pub fn flip_sample(sample: &PoseSample, topo: &SkeletonTopology) -> PoseSample {
    let perm = topo.mirror_permutation();
    PoseSample {
        joints_2d: flip_2d(&sample.joints_2d, &perm),
        joints_3d: sample.joints_3d.as_ref().map(|j| flip_3d(j, &perm)),
        ..sample.clone()
    }
}

/// Samples converted to network units: normalized 2D inputs, root-relative
/// 3D targets and the frame window of every sample.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: Vec<Vec<[f64; 2]>>,
    pub targets: Option<Vec<Vec<Joint>>>,
    pub windows: Vec<Vec<usize>>,
    pub actions: Vec<Option<String>>,
}

impl Prepared {
    pub fn new(samples: &[PoseSample], topo: &SkeletonTopology, temporal_frames: usize) -> Result<Self, TrainError> {
        let inputs = samples
            .iter()
            .map(|s| normalize_2d(&s.joints_2d, s.image_size))
            .collect::<Result<Vec<_>, _>>()?;
        let root = topo.root();
        let targets = samples
            .iter()
            .map(|s| s.joints_3d.as_ref().map(|j| crate::metrics::root_relative(j, root)))
            .collect::<Option<Vec<_>>>();
        Ok(Prepared {
            inputs,
            targets,
            windows: temporal_windows(samples, temporal_frames.max(1)),
            actions: samples.iter().map(|s| s.action.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Model input for `idx`, flipping the samples marked in `flip`.
    pub fn batch_input(&self, model: &Model, idx: &[usize], flip: &[bool]) -> Tensor {
        let n = model.num_nodes();
        let perm = model.topology.mirror_permutation();
        let get = |i: usize, f: bool| {
            if f {
                flip_2d(&self.inputs[i], &perm)
            } else {
                self.inputs[i].clone()
            }
        };
        let shape = model.input_shape(idx.len());
        let mut data = Vec::with_capacity(shape.iter().product());
        match &self.windows {
            windows if model.config.is_temporal() => {
                let t = model.config.temporal_frames;
                let frames: Vec<Vec<Vec<[f64; 2]>>> = idx
                    .iter()
                    .zip(flip)
                    .map(|(&i, &f)| windows[i].iter().map(|&w| get(w, f)).collect())
                    .collect();
                for fr in &frames {
                    for c in 0..2 {
                        for k in 0..t {
                            data.extend((0..n).map(|j| fr[k][j][c]));
                        }
                    }
                }
            }
            _ => {
                for (&i, &f) in idx.iter().zip(flip) {
                    data.extend(get(i, f).iter().flatten());
                }
            }
        }
        Tensor::new(shape, data).expect("batch input matches model shape")
    }

    pub fn batch_target(&self, idx: &[usize], flip: &[bool], perm: &[usize]) -> Result<Tensor, TrainError> {
        let targets = self.targets.as_ref().ok_or(TrainError::MissingTarget)?;
        let n = perm.len();
        let mut data = Vec::with_capacity(idx.len() * n * 3);
        for (&i, &f) in idx.iter().zip(flip) {
            if f {
                data.extend(flip_3d(&targets[i], perm).iter().flatten());
            } else {
                data.extend(targets[i].iter().flatten());
            }
        }
        Ok(Tensor::new(vec![idx.len(), n, 3], data)?)
    }
}

fn to_poses(t: &Tensor, n: usize) -> Vec<Vec<Joint>> {
    t.data()
        .chunks(n * 3)
        .map(|c| c.chunks(3).map(|j| [j[0], j[1], j[2]]).collect())
        .collect()
}

/// Eval-mode predictions for every prepared sample. With `flip_test` each
/// prediction is the mean of the direct output and the un-flipped output
/// for the mirrored input.
pub fn predict_prepared(
    model: &Model,
    data: &Prepared,
    flip_test: bool,
    batch_size: usize,
) -> Result<Vec<Vec<Joint>>, TrainError> {
    let n = model.num_nodes();
    let perm = model.topology.mirror_permutation();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for idx in all.chunks(batch_size.max(1)) {
        let direct = model.predict(&data.batch_input(model, idx, &vec![false; idx.len()]))?;
        let mut poses = to_poses(&direct, n);
        if flip_test {
            let mirrored = model.predict(&data.batch_input(model, idx, &vec![true; idx.len()]))?;
            for (p, m) in poses.iter_mut().zip(to_poses(&mirrored, n)) {
                for (a, b) in p.iter_mut().zip(flip_3d(&m, &perm)) {
                    for k in 0..3 {
                        a[k] = 0.5 * (a[k] + b[k]);
                    }
                }
            }
        }
        out.extend(poses);
    }
    Ok(out)
}

/// Scores a model on samples that carry 3D ground truth.
pub fn evaluate_model(
    model: &Model,
    data: &Prepared,
    flip_test: bool,
    batch_size: usize,
    metrics: &MetricsConfig,
) -> Result<EvalReport, TrainError> {
    let targets = data.targets.as_ref().ok_or(TrainError::MissingTarget)?;
    let preds = predict_prepared(model, data, flip_test, batch_size)?;
    Ok(evaluate(
        &preds,
        targets,
        &data.actions,
        model.topology.root(),
        metrics,
    )?)
}

/// Shuffled mini-batches for one epoch. A trailing batch of a single sample
/// joins the previous batch so batch statistics stay defined.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(last);
        }
    }
    batches
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// MPJPE on the evaluation set (the training set when none is given).
    pub mpjpe: f64,
    pub lr: f64,
}

/// Runs one optimization step on a batch and returns its loss.
pub fn train_step(
    model: &mut Model,
    optim: &mut OptimState,
    input: &Tensor,
    target: &Tensor,
    lr: f64,
) -> Result<f64, TrainError> {
    let mut state = model.state.clone();
    let (loss, grads) = {
        let mut tape = Tape::with_params(&model.params);
        let pred = model.forward(&mut tape, input, &mut state, true)?;
        let gt = tape.constant(target.clone());
        let loss = l1_loss(&mut tape, pred, gt)?;
        tape.backward(loss)?;
        (tape.value(loss)[0], tape.param_grads())
    };
    model.state = state;
    optim.adam_step(&mut model.params, &grads, lr)?;
    Ok(loss)
}

/// Trains `model` on `train`, calling `on_epoch` after every epoch.
pub fn fit(
    model: &mut Model,
    train: &[PoseSample],
    eval: Option<&[PoseSample]>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model) -> Result<(), TrainError>,
) -> Result<Vec<EpochRecord>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let frames = model.config.temporal_frames;
    let train_data = Prepared::new(train, &model.topology, frames)?;
    if train_data.targets.is_none() {
        return Err(TrainError::MissingTarget);
    }
    let eval_data = match eval {
        Some(e) if !e.is_empty() => Some(Prepared::new(e, &model.topology, frames)?),
        _ => None,
    };
    let perm = model.topology.mirror_permutation();
    let mut optim = OptimState::new(&model.params);
    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle");
    let mut flip_rng = rng::stream(cfg.seed, "flip");
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut total = 0.0;
        for idx in epoch_batches(train_data.len(), cfg.batch_size, &mut shuffle_rng) {
            let flip: Vec<bool> = idx
                .iter()
                .map(|_| cfg.flip_augment && flip_rng.random::<bool>())
                .collect();
            let input = train_data.batch_input(model, &idx, &flip);
            let target = train_data.batch_target(&idx, &flip, &perm)?;
            total += train_step(model, &mut optim, &input, &target, lr)? * idx.len() as f64;
        }
        let scored = eval_data.as_ref().unwrap_or(&train_data);
        let preds = predict_prepared(model, scored, cfg.flip_augment, cfg.eval_batch_size)?;
        let targets = scored.targets.as_ref().ok_or(TrainError::MissingTarget)?;
        let mut err = 0.0;
        for (p, g) in preds.iter().zip(targets) {
            err += crate::metrics::mpjpe(&crate::metrics::root_relative(p, model.topology.root()), g)?;
        }
        let record = EpochRecord {
            epoch,
            loss: total / train_data.len() as f64,
            mpjpe: err / preds.len() as f64,
            lr,
        };
        on_epoch(&record, model)?;
        log.push(record);
    }
    Ok(log)
}
