//! Multi-task loss, ADAM with global-norm gradient clipping, plateau
//! learning-rate schedule, validation-best checkpointing and the
//! three-phase mirroring curriculum.

use crate::data::{make_clips, mirror_augment, DrivingSequence, Standardizer};
use crate::error::{Error, Result};
use crate::eval::rmse;
use crate::model::{model_backprop, model_forward, ClipInput, ModelConfig, ModelParams, VehicleTriple};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_steer: f64,
    pub l_speed: f64,
    pub l_torque: f64,
    pub gamma: f64,
    pub j: f64,
}

/// J = gamma * L_steer + L_speed + L_torque, each term a mean of per-frame
/// squared errors.
pub fn compute_loss(
    predictions: &[VehicleTriple],
    targets: &[VehicleTriple],
    gamma: f64,
) -> Result<LossBundle> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss over {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = predictions.len() as f64;
    let mut l_speed = 0.0;
    let mut l_torque = 0.0;
    let mut l_steer = 0.0;
    for (p, t) in predictions.iter().zip(targets.iter()) {
        l_speed += (p.speed - t.speed).powi(2);
        l_torque += (p.torque - t.torque).powi(2);
        l_steer += (p.angle - t.angle).powi(2);
    }
    l_speed /= n;
    l_torque /= n;
    l_steer /= n;
    Ok(LossBundle {
        l_steer,
        l_speed,
        l_torque,
        gamma,
        j: gamma * l_steer + l_speed + l_torque,
    })
}

/// dJ/d(prediction) per clip, matching `compute_loss`.
pub fn loss_gradients(
    predictions: &[VehicleTriple],
    targets: &[VehicleTriple],
    gamma: f64,
) -> Vec<[f64; 3]> {
    let n = predictions.len() as f64;
    predictions
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| {
            [
                2.0 * (p.speed - t.speed) / n,
                2.0 * (p.torque - t.torque) / n,
                gamma * 2.0 * (p.angle - t.angle) / n,
            ]
        })
        .collect()
}

/// Global-norm clipping with the norm averaged over the parameter count:
/// global_norm = (1/m) * sqrt(sum g_i^2), scale = clip_norm /
/// max(clip_norm, global_norm). When global_norm <= clip_norm the slice is
/// left untouched (bit-identical). Returns the pre-clip global norm.
pub fn clip_gradients(grads: &mut [f64], clip_norm: f64) -> Result<f64> {
    if clip_norm <= 0.0 {
        return Err(Error::Config(format!("clip_norm must be > 0, got {clip_norm}")));
    }
    let m = grads.len() as f64;
    let global_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt() / m;
    if global_norm > clip_norm {
        let scale = clip_norm / global_norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    Ok(global_norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One ADAM update in place. Weight decay enters as lambda * w added to the
/// gradient before the moment update (classic L2 coupling).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam over {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Plateau schedule: halve the learning rate after `patience` consecutive
/// evaluations without an absolute improvement of at least `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub reference: f64,
    pub stalled: usize,
}

impl Default for PlateauState {
    fn default() -> Self {
        PlateauState {
            reference: f64::INFINITY,
            stalled: 0,
        }
    }
}

pub fn lr_plateau(
    state: &mut PlateauState,
    lr: &mut f64,
    validation_rmse: f64,
    threshold: f64,
    patience: usize,
) {
    if validation_rmse <= state.reference - threshold {
        state.reference = validation_rmse;
        state.stalled = 0;
    } else {
        state.stalled += 1;
        if state.stalled >= patience {
            *lr /= 2.0;
            state.stalled = 0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    /// Stride between successive clip windows within a sequence.
    pub clip_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr: 1e-4,
            gamma: 10.0,
            clip_norm: 1.0,
            weight_decay: 5e-5,
            val_fraction: 0.05,
            plateau_patience: 3,
            plateau_threshold: 1e-4,
            clip_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: usize,
    pub train_j: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

/// Append rows as `epoch,phase,train_J,val_rmse,lr` CSV; writes the header
/// only when creating the file.
pub fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let new = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Data(format!("open {}: {e}", path.display())))?;
    let wr = |e: std::io::Error| Error::Data(format!("write log: {e}"));
    if new {
        writeln!(file, "epoch,phase,train_J,val_rmse,lr").map_err(wr)?;
    }
    for r in rows {
        writeln!(file, "{},{},{},{},{}", r.epoch, r.phase, r.train_j, r.val_rmse, r.lr).map_err(wr)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    /// Best-validation snapshot.
    pub params: ModelParams,
    pub standardizer: Standardizer,
    pub best_val_rmse: f64,
    pub log: Vec<LogRow>,
}

/// Split whole sequences (seeded order) into validation until it holds at
/// least `val_fraction` of the frames. With a single sequence or zero
/// fraction there is nothing to hold out and validation falls back to the
/// training data itself.
pub fn split_sequences<'a>(
    sequences: &'a [DrivingSequence],
    val_fraction: f64,
    seed: u64,
) -> (Vec<&'a DrivingSequence>, Vec<&'a DrivingSequence>) {
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5117);
    order.shuffle(&mut rng);
    let total_frames: usize = sequences.iter().map(|s| s.len()).sum();
    let target = (val_fraction * total_frames as f64).ceil() as usize;
    let mut val_ids = Vec::new();
    let mut held = 0usize;
    if target > 0 && sequences.len() > 1 {
        for &i in &order {
            if held >= target || val_ids.len() + 1 >= sequences.len() {
                break;
            }
            val_ids.push(i);
            held += sequences[i].len();
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        if val_ids.contains(&i) {
            val.push(seq);
        } else {
            train.push(seq);
        }
    }
    (train, val)
}

fn build_clips(
    sequences: &[&DrivingSequence],
    config: &ModelConfig,
    stride: usize,
    standardizer: &Standardizer,
) -> Vec<ClipInput> {
    sequences
        .iter()
        .flat_map(|s| make_clips(s, config.clip_length, stride, standardizer))
        .collect()
}

fn forward_clips(
    clips: &[&ClipInput],
    params: &ModelParams,
    config: &ModelConfig,
    training: bool,
    seed: u64,
) -> Result<Vec<(VehicleTriple, Vec<crate::model::ClipCache>)>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let (preds, caches) =
                model_forward(std::slice::from_ref(*clip), params, config, training, false, &mut rng)?;
            Ok((preds[0], caches))
        })
        .collect()
}

fn validation_rmse(
    clips: &[ClipInput],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<f64> {
    let refs: Vec<&ClipInput> = clips.iter().collect();
    let results = forward_clips(&refs, params, config, false, 0)?;
    let pred: Vec<f64> = results.iter().map(|(p, _)| p.angle).collect();
    let gt: Vec<f64> = clips.iter().map(|c| c.target.angle).collect();
    rmse(&pred, &gt)
}

/// Core loop over pre-built clips, warm-started from `init`.
pub fn train_clips(
    init: ModelParams,
    train_clips: &[ClipInput],
    val_clips: &[ClipInput],
    config: &ModelConfig,
    cfg: &TrainConfig,
    phase: usize,
    seed: u64,
) -> Result<(ModelParams, f64, Vec<LogRow>)> {
    if train_clips.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let val: &[ClipInput] = if val_clips.is_empty() { train_clips } else { val_clips };
    let mut params = init;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut lr = cfg.lr;
    let mut plateau = PlateauState::default();
    let mut best_rmse = f64::INFINITY;
    let mut best_params = params.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_clips.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(phase as u64));

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_j = 0.0;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let clips: Vec<&ClipInput> = batch.iter().map(|&i| &train_clips[i]).collect();
            let targets: Vec<VehicleTriple> = clips.iter().map(|c| c.target).collect();
            let drop_seed = seed
                .wrapping_add((epoch as u64) << 20)
                .wrapping_add((batch_idx as u64) << 4);
            let results = forward_clips(&clips, &params, config, true, drop_seed)?;
            let preds: Vec<VehicleTriple> = results.iter().map(|(p, _)| *p).collect();
            let loss = compute_loss(&preds, &targets, cfg.gamma)?;
            if !loss.j.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let d_preds = loss_gradients(&preds, &targets, cfg.gamma);
            // per-clip backprop in parallel, summed in fixed clip order
            let per_clip: Vec<Vec<f64>> = results
                .par_iter()
                .zip(d_preds.par_iter())
                .map(|((_, caches), d)| {
                    let mut g = ModelParams::zeros(config)?;
                    model_backprop(caches, &[*d], &params, config, &mut g)?;
                    Ok(g.flatten())
                })
                .collect::<Result<_>>()?;
            let mut grads = vec![0.0; flat.len()];
            for g in &per_clip {
                for (a, b) in grads.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            clip_gradients(&mut grads, cfg.clip_norm)?;
            adam_step(&mut flat, &grads, &mut adam, lr, cfg.weight_decay)?;
            params.assign_from_flat(&flat);
            epoch_j += loss.j;
            batches += 1;
        }
        let train_j = epoch_j / batches as f64;
        let val_rmse = validation_rmse(val, &params, config)?;
        if val_rmse < best_rmse {
            best_rmse = val_rmse;
            best_params = params.clone();
        }
        lr_plateau(&mut plateau, &mut lr, val_rmse, cfg.plateau_threshold, cfg.plateau_patience);
        log.push(LogRow {
            epoch,
            phase,
            train_j,
            val_rmse,
            lr,
        });
    }
    Ok((best_params, best_rmse, log))
}

/// Split, fit the standardizer on the training side, build clips and run the
/// core loop from a fresh seeded initialization.
pub fn train(
    sequences: &[DrivingSequence],
    config: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let (train_seqs, val_seqs) = split_sequences(sequences, cfg.val_fraction, seed);
    let train_owned: Vec<DrivingSequence> = train_seqs.iter().map(|s| (*s).clone()).collect();
    let standardizer = Standardizer::fit(&train_owned)?;
    let tr = build_clips(&train_seqs, config, cfg.clip_stride, &standardizer);
    let va = build_clips(&val_seqs, config, cfg.clip_stride, &standardizer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = ModelParams::init(config, &mut rng)?;
    let (params, best_val_rmse, log) = train_clips(init, &tr, &va, config, cfg, 1, seed)?;
    Ok(TrainOutcome {
        params,
        standardizer,
        best_val_rmse,
        log,
    })
}

pub struct ThreePhaseOutcome {
    pub params: ModelParams,
    pub standardizer: Standardizer,
    /// Best validation RMSE after each phase.
    pub phase_rmse: [f64; 3],
    pub log: Vec<LogRow>,
}

/// Phase 1 trains on the original data, phase 2 only on the mirrored data,
/// phase 3 on the original again; each phase warm-starts from the previous
/// best snapshot with fresh ADAM moments. The standardizer is fitted once
/// on the phase-1 training split and reused verbatim.
pub fn three_phase_train(
    original: &[DrivingSequence],
    config: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ThreePhaseOutcome> {
    let mirrored: Vec<DrivingSequence> = original.iter().map(mirror_augment).collect();
    let (train_o, val_o) = split_sequences(original, cfg.val_fraction, seed);
    let (train_m, val_m) = split_sequences(&mirrored, cfg.val_fraction, seed);
    let train_owned: Vec<DrivingSequence> = train_o.iter().map(|s| (*s).clone()).collect();
    let standardizer = Standardizer::fit(&train_owned)?;
    let tr_o = build_clips(&train_o, config, cfg.clip_stride, &standardizer);
    let va_o = build_clips(&val_o, config, cfg.clip_stride, &standardizer);
    let tr_m = build_clips(&train_m, config, cfg.clip_stride, &standardizer);
    let va_m = build_clips(&val_m, config, cfg.clip_stride, &standardizer);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(config, &mut rng)?;
    let mut phase_rmse = [0.0; 3];
    let mut log = Vec::new();
    for phase in 1..=3 {
        let (tr, va) = if phase == 2 { (&tr_m, &va_m) } else { (&tr_o, &va_o) };
        let (best, rmse, rows) = train_clips(params, tr, va, config, cfg, phase, seed)?;
        params = best;
        phase_rmse[phase - 1] = rmse;
        log.extend(rows);
    }
    Ok(ThreePhaseOutcome {
        params,
        standardizer,
        phase_rmse,
        log,
    })
}
