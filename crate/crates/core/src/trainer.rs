//! Training loop: Adam on the mean per-joint position loss with per-epoch
//! exponential learning-rate decay, flip augmentation, periodic evaluation
//! and checkpointing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::Pass;
use crate::data::{mirror_map, window_frames, MotionClip};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{MetricReport, Pose3D};
use crate::model::{mpjpe_loss, write_atomic, ConvFormerModel};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

/// Clip coordinates are millimeters; the network regresses meters.
pub const MM_PER_UNIT: f64 = 1000.0;

/// Windows per inference batch during evaluation.
const EVAL_BATCH: usize = 128;

pub const LOG_HEADER: &str = "epoch,lr,train_loss,eval_mpjpe,eval_pmpjpe,eval_mpjve";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment_flip: bool,
    /// Evaluate (and checkpoint) every this many epochs, and after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr0: 1e-3,
            decay: 0.95,
            batch_size: 64,
            seed: 0,
            augment_flip: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}

/// Adam moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero. Any
/// non-finite gradient aborts before a single parameter moves.
pub fn adam_step(params: &mut ParamStore, grads: &[Option<&[f64]>], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.len() != params.get(id).len() {
                return Err(Error::dim("adam_step", params.get(id).shape(), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, p) in t.data_mut().iter_mut().enumerate() {
            let g = grads[i].map_or(0.0, |g| g[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            *p -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// One row per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training-mode loss over the epoch's batches, mm.
    pub train_loss: f64,
    pub eval: Option<MetricReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochLog>,
}

impl TrainLog {
    /// CSV with [`LOG_HEADER`]; epochs without evaluation leave the metric
    /// columns empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        let num = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        for r in &self.rows {
            let e = r.eval.as_ref();
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{},{},{}\n",
                r.epoch,
                r.lr,
                r.train_loss,
                num(e.map(|e| e.mpjpe)),
                num(e.map(|e| e.p_mpjpe)),
                num(e.and_then(|e| e.mpjve)),
            ));
        }
        out
    }

    pub fn last_eval(&self) -> Option<&MetricReport> {
        self.rows.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join(CHECKPOINT_FILE)
    }

    pub fn log(&self) -> PathBuf {
        self.0.join(LOG_FILE)
    }
}

/// Writes window `center` of `clip` into `input` (`T·J·2`) and its target
/// in network units into `target` (`J·3`), mirrored when `flip` is given.
fn fill_sample(clip: &MotionClip, t: usize, center: usize, flip: Option<&[usize]>, input: &mut [f64], target: &mut [f64]) {
    let j = clip.num_joints();
    let copy = |src: &[f32], c: usize, dst: &mut [f64], scale: f64| match flip {
        None => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s as f64 / scale),
        Some(map) => {
            for (i, &from) in map.iter().enumerate() {
                for k in 0..c {
                    let v = src[from * c + k] as f64 / scale;
                    dst[i * c + k] = if k == 0 { -v } else { v };
                }
            }
        }
    };
    for (slot, f) in window_frames(clip.len(), t, center).enumerate() {
        copy(clip.frame2d(f), 2, &mut input[slot * j * 2..(slot + 1) * j * 2], 1.0);
    }
    copy(clip.frame3d(center), 3, target, MM_PER_UNIT);
}

fn check_clips(model: &ConvFormerModel, clips: &[MotionClip]) -> Result<()> {
    let j = model.config().joints;
    for c in clips {
        if c.num_joints() != j {
            return Err(Error::Config(format!("clip has {} joints, model expects {j}", c.num_joints())));
        }
    }
    Ok(())
}

/// Trains `model` in place on every window of `train_clips`, evaluating on
/// `eval_clips` every `cfg.eval_every` epochs and after the final one. When
/// `out` is given, the log and a checkpoint are rewritten at each
/// evaluation.
pub fn train(
    model: &mut ConvFormerModel,
    train_clips: &[MotionClip],
    eval_clips: &[MotionClip],
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_clips(model, train_clips)?;
    check_clips(model, eval_clips)?;
    let (t, j) = (model.config().frames, model.config().joints);
    let mut samples: Vec<(usize, usize)> = train_clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| (0..clip.len()).map(move |k| (c, k)))
        .collect();
    if samples.is_empty() {
        return Err(Error::Usage("no training windows".into()));
    }
    let maps = train_clips
        .iter()
        .map(|c| mirror_map(c.num_joints(), &c.meta().symmetry))
        .collect::<Result<Vec<_>>>()?;
    let mut data_rng = rng::stream(cfg.seed, 1);
    let mut model_rng = rng::stream(cfg.seed, 2);
    let mut state = OptimizerState::new(model.params());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        samples.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in samples.chunks(cfg.batch_size) {
            let b = batch.len();
            let mut input = vec![0.0; b * t * j * 2];
            let mut target = vec![0.0; b * j * 3];
            for (s, &(c, k)) in batch.iter().enumerate() {
                let flip = cfg.augment_flip && data_rng.random_bool(0.5);
                fill_sample(
                    &train_clips[c],
                    t,
                    k,
                    flip.then_some(maps[c].as_slice()),
                    &mut input[s * t * j * 2..(s + 1) * t * j * 2],
                    &mut target[s * j * 3..(s + 1) * j * 3],
                );
            }
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g, true);
            let x = g.constant(Tensor::new([b, t, j, 2], input)?);
            let y = g.constant(Tensor::new([b, j, 3], target)?);
            let mut pass = Pass {
                params: &bound,
                rng: &mut model_rng,
                training: true,
            };
            let pred = model.forward_graph(&mut g, x, &mut pass, &mut Vec::new())?;
            let loss = mpjpe_loss(&mut g, pred, y)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).item();
            batches += 1;
            let grads: Vec<Option<&[f64]>> = bound.vars().iter().map(|&v| g.grad(v)).collect();
            adam_step(model.params_mut(), &grads, &mut state, lr)?;
        }
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let eval = if evaluate_now && !eval_clips.is_empty() {
            Some(evaluate(model, eval_clips)?)
        } else {
            None
        };
        log.rows.push(EpochLog {
            epoch,
            lr,
            train_loss: MM_PER_UNIT * loss_sum / batches as f64,
            eval,
        });
        if let (true, Some(dir)) = (evaluate_now, out) {
            model.save(dir.checkpoint())?;
            write_atomic(&dir.log(), log.to_csv().as_bytes())?;
        }
    }
    Ok(log)
}

/// Per-frame predictions (mm) for every window of `clip`, in frame order.
pub fn predict_clip(model: &ConvFormerModel, clip: &MotionClip) -> Result<Vec<Pose3D>> {
    check_clips(model, std::slice::from_ref(clip))?;
    let (t, j) = (model.config().frames, model.config().joints);
    let mut out = Vec::with_capacity(clip.len());
    let mut scratch = vec![0.0; j * 3];
    let centers: Vec<usize> = (0..clip.len()).collect();
    for chunk in centers.chunks(EVAL_BATCH) {
        let mut input = vec![0.0; chunk.len() * t * j * 2];
        for (s, &k) in chunk.iter().enumerate() {
            fill_sample(clip, t, k, None, &mut input[s * t * j * 2..(s + 1) * t * j * 2], &mut scratch);
        }
        let pred = model.predict(&Tensor::new([chunk.len(), t, j, 2], input)?)?;
        for p in pred.data().chunks_exact(j * 3) {
            let mm: Vec<f64> = p.iter().map(|v| v * MM_PER_UNIT).collect();
            out.push(Pose3D::from_flat(&mm)?);
        }
    }
    Ok(out)
}

fn ground_truth(clip: &MotionClip) -> Vec<Pose3D> {
    (0..clip.len()).map(|i| clip.pose(i)).collect()
}

fn report(clips: &[MotionClip], predictions: &[Vec<Pose3D>]) -> Result<MetricReport> {
    let truth: Vec<Vec<Pose3D>> = clips.iter().map(ground_truth).collect();
    let pairs: Vec<(&[Pose3D], &[Pose3D])> = truth.iter().zip(predictions).map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    MetricReport::compute_sequences(&pairs)
}

/// Metric report of `model` over every window of `clips`.
pub fn evaluate(model: &ConvFormerModel, clips: &[MotionClip]) -> Result<MetricReport> {
    let predictions = clips.iter().map(|c| predict_clip(model, c)).collect::<Result<Vec<_>>>()?;
    report(clips, &predictions)
}

/// Per-joint mean of every 3D pose in `clips`.
pub fn mean_pose(clips: &[MotionClip]) -> Result<Pose3D> {
    let j = clips.first().map(|c| c.num_joints()).ok_or_else(|| Error::Usage("mean pose of no clips".into()))?;
    let mut sum = vec![0.0; j * 3];
    let mut n = 0usize;
    for c in clips {
        if c.num_joints() != j {
            return Err(Error::Config("clips disagree on joint count".into()));
        }
        for f in 0..c.len() {
            sum.iter_mut().zip(c.frame3d(f)).for_each(|(s, &v)| *s += v as f64);
        }
        n += c.len();
    }
    if n == 0 {
        return Err(Error::Usage("mean pose of empty clips".into()));
    }
    Pose3D::from_flat(&sum.iter().map(|s| s / n as f64).collect::<Vec<_>>())
}

/// Metric report of a predictor that always answers `pose`.
pub fn evaluate_constant(pose: &Pose3D, clips: &[MotionClip]) -> Result<MetricReport> {
    let predictions: Vec<Vec<Pose3D>> = clips.iter().map(|c| vec![pose.clone(); c.len()]).collect();
    report(clips, &predictions)
}

/// Metric report of the truth against itself, useful as a sanity floor.
pub fn evaluate_oracle(clips: &[MotionClip]) -> Result<MetricReport> {
    let predictions: Vec<Vec<Pose3D>> = clips.iter().map(ground_truth).collect();
    report(clips, &predictions)
}

/// Loads a checkpoint and evaluates it, as the CLI `eval` command does.
pub fn evaluate_checkpoint(path: &Path, clips: &[MotionClip]) -> Result<MetricReport> {
    evaluate(&ConvFormerModel::load(path)?, clips)
}
