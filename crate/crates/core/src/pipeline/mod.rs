//! Training stages: source pretraining, continued pretraining, stable
//! distillation and CTC fine-tuning.

mod adam;
mod report;

use std::time::Instant;

use log::{debug, info};

pub use adam::{adam_update, global_norm, AdamState, TrainHyper, UpdateInfo, MAX_NONFINITE_STREAK};
pub use report::StageReport;

use crate::checkpoint::{Checkpoint, Stage};
use crate::corpus::{eval_batches, make_batches, mix64, Batch, Corpus, Utterance};
use crate::ctc::{ctc_greedy_decode, ctc_loss_graph};
use crate::distill::{distill_step, DistillConfig};
use crate::evaluate::{decode, wer};
use crate::graph::{Graph, Segment};
use crate::model::{ctc_head, encode_graph, init_params, pretext_head, ModelConfig, Parameters, CTC_BIAS, CTC_WEIGHT};
use crate::tensor::Tensor;
use crate::pretext::{masked_rows, pretext_loss_graph, sample_batch_masks, PretextConfig};
use crate::{Error, Result};

/// Training losses above this abort the stage.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

const EVAL_BATCH: usize = 32;

/// Result of an unsupervised stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub report: StageReport,
    /// Intermediate checkpoints every `snapshot_every` steps, the final step
    /// included, in step order.
    pub snapshots: Vec<Checkpoint>,
}

/// Result of CTC fine-tuning.
#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    /// Checkpoint with the lowest periodic dev WER.
    pub checkpoint: Checkpoint,
    pub report: StageReport,
    pub best_dev_wer: f64,
    /// `(step, dev WER)` for every periodic evaluation.
    pub evaluations: Vec<(u64, f64)>,
}

fn step_seed(seed: u64, salt: u64, step: u64) -> u64 {
    mix64(seed ^ mix64(salt ^ mix64(step)))
}

fn check_loss(step: u64, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss} at step {step}")));
    }
    if loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

fn eval_interval(hyper: &TrainHyper, steps_per_epoch: usize) -> usize {
    if hyper.eval_every == 0 {
        steps_per_epoch
    } else {
        hyper.eval_every
    }
}

fn base_report(stage: Stage, seed: u64, cfg: &ModelConfig, hyper: &TrainHyper) -> StageReport {
    let mut r = StageReport::new(stage, seed);
    r.config.merge(&cfg.to_kv());
    r.config.merge(&hyper.to_kv("train"));
    r
}

/// Masked-prediction loss of one batch; returns the graph so callers may
/// differentiate it.
fn pretext_forward(
    params: &Parameters,
    batch: &Batch,
    pcfg: &PretextConfig,
    mask_seed: u64,
    trainable: bool,
) -> Result<(Graph<f32>, crate::model::BoundParams, crate::graph::NodeId)> {
    let cfg = params.config();
    let (frames, segments) = batch.packed();
    let items = sample_batch_masks(&segments, pcfg, mask_seed)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, trainable);
    let x = g.constant(frames);
    let out = encode_graph(&mut g, cfg, &bound, x, &segments, &masked_rows(&items))?;
    let pred = pretext_head(&mut g, &bound, out.hidden)?;
    let loss = pretext_loss_graph(&mut g, cfg.pretext, pred, out.latents, &items, pcfg)?;
    Ok((g, bound, loss))
}

fn pretext_step(
    params: &mut Parameters,
    batch: &Batch,
    pcfg: &PretextConfig,
    mask_seed: u64,
    state: &mut AdamState,
    hyper: &TrainHyper,
) -> Result<(f64, UpdateInfo)> {
    let (g, bound, loss) = pretext_forward(params, batch, pcfg, mask_seed, true)?;
    let value = g.value(loss).item() as f64;
    check_loss(state.step + 1, value)?;
    let mut grads = g.backward(loss)?;
    let grads = bound.collect_grads(&mut grads);
    let info = adam_update(params, &grads, state, hyper)?;
    Ok((value, info))
}

/// Mean pretext loss over `utts` with masks fixed by `seed`, weighted by
/// batch size.
pub fn pretext_loss_on(params: &Parameters, utts: &[Utterance], pcfg: &PretextConfig, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, b) in eval_batches(utts, EVAL_BATCH).iter().enumerate() {
        let (g, _, loss) = pretext_forward(params, b, pcfg, step_seed(seed, 0xde7, i as u64), false)?;
        total += g.value(loss).item() as f64 * b.len() as f64;
        n += b.len();
    }
    if n == 0 {
        return Err(Error::Config("empty evaluation set".into()));
    }
    Ok(total / n as f64)
}

/// Trains a freshly initialized encoder on the pretext task over the
/// source training split (labels unused). Keeps the checkpoint with the
/// lowest dev pretext loss.
pub fn pretrain(
    config: &ModelConfig,
    source: &Corpus,
    hyper: &TrainHyper,
    pcfg: &PretextConfig,
    seed: u64,
) -> Result<StageOutput> {
    config.validate()?;
    hyper.validate()?;
    pcfg.validate()?;
    let start = Instant::now();
    let mut params = init_params(config, seed)?;
    let mut state = AdamState::new(&params);
    let mut report = base_report(Stage::Pretrained, seed, config, hyper);
    report.config.merge(&pcfg.to_kv());
    let mut best: Option<(f64, u64, Parameters)> = None;
    let mut step = 0u64;
    for epoch in 0..hyper.epochs as u64 {
        let batches = make_batches(&source.train, hyper.batch_size, seed, epoch)?;
        let every = eval_interval(hyper, batches.len());
        for b in &batches {
            let (loss, info) = pretext_step(&mut params, b, pcfg, step_seed(seed, 1, step), &mut state, hyper)?;
            step += 1;
            let rec = report.record(step);
            rec.set("epoch", epoch).set("pretext", loss).set("grad_norm", info.grad_norm);
            if step as usize % every == 0 || step as usize == hyper.epochs * batches.len() {
                let dev = pretext_loss_on(&params, &source.dev, pcfg, seed)?;
                report.record(step).set("dev_pretext", dev);
                debug!("pretrain step {step} loss {loss:.4} dev {dev:.4}");
                if best.as_ref().map_or(true, |(b, _, _)| dev < *b) {
                    best = Some((dev, step, params.clone()));
                }
            }
        }
        info!("pretrain epoch {} done at step {step}", epoch + 1);
    }
    let (dev, best_step, params) = best.expect("at least one evaluation");
    report.config.set("selected.step", best_step).set("selected.dev_pretext", dev);
    report.wall_time = start.elapsed().as_secs_f64();
    let mut ckpt = Checkpoint::new(Stage::Pretrained, best_step, params);
    ckpt.meta.set("run.seed", seed);
    Ok(StageOutput {
        checkpoint: ckpt,
        report,
        snapshots: Vec::new(),
    })
}

fn is_snapshot_step(step: u64, total: u64, every: usize) -> bool {
    every > 0 && (step % every as u64 == 0 || step == total)
}

/// Resumes pretext training from a pretrained checkpoint on the target
/// training split for the full budget. `tag` is either
/// [`Stage::TeacherCp`] or [`Stage::BaselineCp`]; the computation is the
/// same for both.
pub fn continued_pretrain(
    init: &Checkpoint,
    target: &Corpus,
    hyper: &TrainHyper,
    pcfg: &PretextConfig,
    seed: u64,
    tag: Stage,
) -> Result<StageOutput> {
    init.require_stage(&[Stage::Pretrained])?;
    if !matches!(tag, Stage::TeacherCp | Stage::BaselineCp) {
        return Err(Error::Config(format!("continued pretraining cannot produce `{tag}`")));
    }
    hyper.validate()?;
    pcfg.validate()?;
    let start = Instant::now();
    let mut params = init.params.clone();
    params.drop_ctc_head();
    let mut state = AdamState::new(&params);
    let mut report = base_report(tag, seed, params.config(), hyper);
    report.config.merge(&pcfg.to_kv());
    let mut snapshots = Vec::new();
    let per_epoch = target.train.len().div_ceil(hyper.batch_size);
    let total = (per_epoch * hyper.epochs) as u64;
    let mut step = 0u64;
    for epoch in 0..hyper.epochs as u64 {
        for b in make_batches(&target.train, hyper.batch_size, seed, epoch)? {
            let (loss, info) = pretext_step(&mut params, &b, pcfg, step_seed(seed, 2, step), &mut state, hyper)?;
            step += 1;
            report
                .record(step)
                .set("epoch", epoch)
                .set("pretext", loss)
                .set("grad_norm", info.grad_norm);
            if is_snapshot_step(step, total, hyper.snapshot_every) {
                snapshots.push(Checkpoint::new(tag, step, params.clone()));
            }
        }
        debug!("{tag} epoch {} done at step {step}", epoch + 1);
    }
    report.wall_time = start.elapsed().as_secs_f64();
    let mut ckpt = Checkpoint::new(tag, step, params);
    ckpt.meta.set("run.seed", seed);
    Ok(StageOutput {
        checkpoint: ckpt,
        report,
        snapshots,
    })
}

/// Continued pretraining of a copy of `init` regularized toward the frozen
/// `teacher`'s final-layer representations.
pub fn stable_distillation(
    init: &Checkpoint,
    teacher: &Checkpoint,
    target: &Corpus,
    dcfg: &DistillConfig,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<StageOutput> {
    init.require_stage(&[Stage::Pretrained])?;
    teacher.require_stage(&[Stage::TeacherCp])?;
    if init.config() != teacher.config() {
        return Err(Error::Config(
            "pretrained and teacher checkpoints have different model configurations".into(),
        ));
    }
    dcfg.validate()?;
    hyper.validate()?;
    let start = Instant::now();
    let mut student = init.params.clone();
    student.drop_ctc_head();
    let mut teacher_params = teacher.params.clone();
    teacher_params.drop_ctc_head();
    let mut state = AdamState::new(&student);
    let mut report = base_report(Stage::StudentSd, seed, student.config(), hyper);
    report.config.merge(&dcfg.to_kv());
    report.config.merge(&dcfg.pretext.to_kv());
    let mut snapshots = Vec::new();
    let per_epoch = target.train.len().div_ceil(hyper.batch_size);
    let total = (per_epoch * hyper.epochs) as u64;
    let mut step = 0u64;
    for epoch in 0..hyper.epochs as u64 {
        for b in make_batches(&target.train, hyper.batch_size, seed, epoch)? {
            let r = distill_step(
                &mut student,
                &teacher_params,
                &b,
                &mut state,
                hyper,
                dcfg,
                step_seed(seed, 3, step),
            )?;
            step += 1;
            check_loss(step, r.total)?;
            report
                .record(step)
                .set("epoch", epoch)
                .set("total", r.total)
                .set("mse", r.mse)
                .set("pretext", r.pretext)
                .set("grad_norm", r.grad_norm);
            if is_snapshot_step(step, total, hyper.snapshot_every) {
                snapshots.push(Checkpoint::new(Stage::StudentSd, step, student.clone()));
            }
        }
        debug!("distill epoch {} done at step {step}", epoch + 1);
    }
    report.wall_time = start.elapsed().as_secs_f64();
    let mut ckpt = Checkpoint::new(Stage::StudentSd, step, student);
    ckpt.meta.set("run.seed", seed);
    Ok(StageOutput {
        checkpoint: ckpt,
        report,
        snapshots,
    })
}

fn ctc_step(params: &mut Parameters, batch: &Batch, state: &mut AdamState, hyper: &TrainHyper) -> Result<(f64, UpdateInfo)> {
    let cfg = params.config().clone();
    let (frames, segments) = batch.packed();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(frames);
    let out = encode_graph(&mut g, &cfg, &bound, x, &segments, &[])?;
    let logits = ctc_head(&mut g, &bound, out.hidden)?;
    let lp = g.log_softmax(logits)?;
    let labels: Vec<&[u32]> = batch.labels.iter().map(Vec::as_slice).collect();
    let (loss, _) = ctc_loss_graph(&mut g, lp, &segments, &labels)?;
    let value = g.value(loss).item() as f64;
    check_loss(state.step + 1, value)?;
    let mut grads = g.backward(loss)?;
    let grads = bound.collect_grads(&mut grads);
    let info = adam_update(params, &grads, state, hyper)?;
    Ok((value, info))
}

/// Token error rate of greedy CTC decoding on `utts`.
pub fn wer_on(params: &Parameters, utts: &[Utterance]) -> Result<f64> {
    let hyps = decode(params, utts)?;
    let refs: Vec<Vec<u32>> = utts.iter().map(|u| u.labels.clone()).collect();
    Ok(wer(&refs, &hyps)?.wer())
}

/// Adds a fresh CTC head to any encoder checkpoint and trains all weights
/// on the labeled training split, returning the best dev-WER checkpoint.
pub fn finetune_ctc(init: &Checkpoint, labeled: &Corpus, hyper: &TrainHyper, seed: u64) -> Result<FinetuneOutput> {
    init.require_stage(&[Stage::Pretrained, Stage::StudentSd, Stage::BaselineCp])?;
    hyper.validate()?;
    if labeled.dev.is_empty() {
        return Err(Error::Config("fine-tuning needs a non-empty dev split".into()));
    }
    let start = Instant::now();
    let mut params = init.params.clone();
    params.reset_ctc_head(mix64(seed ^ 0xc7c));
    let mut state = AdamState::new(&params);
    let mut report = base_report(Stage::Finetuned, seed, params.config(), hyper);
    report.config.set("init.stage", init.stage).set("init.step", init.step);
    let mut best: Option<(f64, u64, Parameters)> = None;
    let mut evaluations = Vec::new();
    let mut step = 0u64;
    for epoch in 0..hyper.epochs as u64 {
        let batches = make_batches(&labeled.train, hyper.batch_size, seed, epoch)?;
        let every = eval_interval(hyper, batches.len());
        let total = hyper.epochs * batches.len();
        for b in &batches {
            let (loss, info) = ctc_step(&mut params, b, &mut state, hyper)?;
            step += 1;
            report
                .record(step)
                .set("epoch", epoch)
                .set("ctc", loss)
                .set("grad_norm", info.grad_norm);
            if step as usize % every == 0 || step as usize == total {
                let dev = wer_on(&params, &labeled.dev)?;
                report.record(step).set("dev_wer", dev);
                evaluations.push((step, dev));
                if best.as_ref().map_or(true, |(b, _, _)| dev < *b) {
                    best = Some((dev, step, params.clone()));
                }
            }
        }
        debug!("finetune epoch {} done at step {step}", epoch + 1);
    }
    let (best_dev_wer, best_step, params) = best.expect("at least one evaluation");
    report
        .config
        .set("selected.step", best_step)
        .set("selected.dev_wer", best_dev_wer);
    report.wall_time = start.elapsed().as_secs_f64();
    let mut ckpt = Checkpoint::new(Stage::Finetuned, best_step, params);
    ckpt.meta.set("run.seed", seed).set("init.stage", init.stage);
    Ok(FinetuneOutput {
        checkpoint: ckpt,
        report,
        best_dev_wer,
        evaluations,
    })
}

/// Final-layer features of every utterance, one `T×h` tensor each.
fn frozen_features(params: &Parameters, utts: &[Utterance]) -> Result<Vec<Tensor<f32>>> {
    let cfg = params.config();
    let h = cfg.hidden_dim;
    let mut out = Vec::with_capacity(utts.len());
    for b in eval_batches(utts, EVAL_BATCH) {
        let (frames, segments) = b.packed();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(frames);
        let enc = encode_graph(&mut g, cfg, &bound, x, &segments, &[])?;
        let v = g.value(enc.hidden);
        for s in &segments {
            out.push(Tensor::from_vec([s.len, h], v.data()[s.start * h..s.end() * h].to_vec()));
        }
    }
    Ok(out)
}

fn pack_features(feats: &[Tensor<f32>], indices: &[usize]) -> (Tensor<f32>, Vec<Segment>) {
    let h = feats[indices[0]].dims2().1;
    let mut data = Vec::new();
    let mut segments = Vec::with_capacity(indices.len());
    for &i in indices {
        segments.push(Segment::new(data.len() / h, feats[i].dims2().0));
        data.extend_from_slice(feats[i].data());
    }
    (Tensor::from_vec([data.len() / h, h], data), segments)
}

fn head_index(params: &Parameters, name: &str) -> usize {
    params
        .tensors()
        .iter()
        .position(|(n, _)| n == name)
        .expect("CTC head present after reset")
}

fn probe_wer(feats: &[Tensor<f32>], refs: &[Vec<u32>], w: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let mut hyps = Vec::with_capacity(feats.len());
    for f in feats {
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = g.matmul(x, w)?;
        let logits = g.add_bias(y, b)?;
        hyps.push(ctc_greedy_decode(g.value(logits)));
    }
    Ok(wer(refs, &hyps)?.wer())
}

/// Trains a fresh linear CTC head on frozen encoder features, leaving the
/// encoder untouched, and returns the best dev-WER head. The encoder runs
/// once per utterance, so this is far cheaper than [`finetune_ctc`] and
/// measures the representation itself rather than what fine-tuning can
/// recover from it.
pub fn probe_ctc(init: &Checkpoint, labeled: &Corpus, hyper: &TrainHyper, seed: u64) -> Result<FinetuneOutput> {
    init.require_stage(&[Stage::Pretrained, Stage::StudentSd, Stage::BaselineCp])?;
    hyper.validate()?;
    if labeled.dev.is_empty() {
        return Err(Error::Config("probing needs a non-empty dev split".into()));
    }
    let start = Instant::now();
    let mut params = init.params.clone();
    params.reset_ctc_head(mix64(seed ^ 0xc7c));
    let train = frozen_features(&params, &labeled.train)?;
    let dev = frozen_features(&params, &labeled.dev)?;
    let dev_refs: Vec<Vec<u32>> = labeled.dev.iter().map(|u| u.labels.clone()).collect();
    let (iw, ib) = (head_index(&params, CTC_WEIGHT), head_index(&params, CTC_BIAS));
    let mut state = AdamState::new(&params);
    let mut report = base_report(Stage::Finetuned, seed, params.config(), hyper);
    report
        .config
        .set("init.stage", init.stage)
        .set("init.step", init.step)
        .set("probe.frozen_encoder", true);
    let mut best: Option<(f64, u64, Tensor<f32>, Tensor<f32>)> = None;
    let mut evaluations = Vec::new();
    let mut step = 0u64;
    for epoch in 0..hyper.epochs as u64 {
        let batches = make_batches(&labeled.train, hyper.batch_size, seed, epoch)?;
        let every = eval_interval(hyper, batches.len());
        let total = hyper.epochs * batches.len();
        for batch in &batches {
            let (x, segments) = pack_features(&train, &batch.indices);
            let mut g = Graph::new();
            let x = g.constant(x);
            let w = g.param(params.tensors()[iw].1.clone());
            let b = g.param(params.tensors()[ib].1.clone());
            let y = g.matmul(x, w)?;
            let logits = g.add_bias(y, b)?;
            let lp = g.log_softmax(logits)?;
            let labels: Vec<&[u32]> = batch.labels.iter().map(Vec::as_slice).collect();
            let (loss, _) = ctc_loss_graph(&mut g, lp, &segments, &labels)?;
            let value = g.value(loss).item() as f64;
            check_loss(step + 1, value)?;
            let mut grads = g.backward(loss)?;
            let mut aligned: Vec<Option<Tensor<f32>>> = vec![None; params.tensors().len()];
            aligned[iw] = grads.take(w);
            aligned[ib] = grads.take(b);
            let info = adam_update(&mut params, &aligned, &mut state, hyper)?;
            step += 1;
            report
                .record(step)
                .set("epoch", epoch)
                .set("ctc", value)
                .set("grad_norm", info.grad_norm);
            if step as usize % every == 0 || step as usize == total {
                let (w, b) = (&params.tensors()[iw].1, &params.tensors()[ib].1);
                let wer_dev = probe_wer(&dev, &dev_refs, w, b)?;
                report.record(step).set("dev_wer", wer_dev);
                evaluations.push((step, wer_dev));
                if best.as_ref().map_or(true, |(d, ..)| wer_dev < *d) {
                    best = Some((wer_dev, step, w.clone(), b.clone()));
                }
            }
        }
    }
    let (best_dev_wer, best_step, w, b) = best.expect("at least one evaluation");
    params.tensors_mut().nth(iw).expect("head weight").1.data_mut().copy_from_slice(w.data());
    params.tensors_mut().nth(ib).expect("head bias").1.data_mut().copy_from_slice(b.data());
    report
        .config
        .set("selected.step", best_step)
        .set("selected.dev_wer", best_dev_wer);
    report.wall_time = start.elapsed().as_secs_f64();
    let mut ckpt = Checkpoint::new(Stage::Finetuned, best_step, params);
    ckpt.meta.set("run.seed", seed).set("init.stage", init.stage);
    Ok(FinetuneOutput {
        checkpoint: ckpt,
        report,
        best_dev_wer,
        evaluations,
    })
}
