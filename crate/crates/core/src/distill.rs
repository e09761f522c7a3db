//! Self-distillation objective: representation matching against a frozen
//! teacher plus the student's own pretext loss.

use std::fmt;
use std::str::FromStr;

use crate::corpus::Batch;
use crate::graph::{Graph, NodeId, Segment};
use crate::kv::KvMap;
use crate::model::{encode_graph, pretext_head, BoundParams, Parameters};
use crate::pipeline::{adam_update, AdamState, TrainHyper};
use crate::pretext::{masked_rows, pretext_loss_graph, sample_batch_masks, PretextConfig};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Reduction of the representation-matching term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillNorm {
    /// Mean squared difference over all frames and channels.
    Mse,
    /// Unsquared Frobenius norm of the difference, averaged over sequences.
    L2,
}

impl DistillNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillNorm::Mse => "mse",
            DistillNorm::L2 => "l2",
        }
    }
}

impl FromStr for DistillNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(DistillNorm::Mse),
            "l2" => Ok(DistillNorm::L2),
            _ => Err(Error::Config(format!("unknown distill norm `{s}` (mse|l2)"))),
        }
    }
}

/// What the teacher sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherInput {
    /// Same masked input as the student.
    SharedMask,
    /// Unmasked input.
    Clean,
}

impl TeacherInput {
    pub fn as_str(self) -> &'static str {
        match self {
            TeacherInput::SharedMask => "shared",
            TeacherInput::Clean => "clean",
        }
    }
}

impl FromStr for TeacherInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(TeacherInput::SharedMask),
            "clean" => Ok(TeacherInput::Clean),
            _ => Err(Error::Config(format!("unknown teacher input `{s}` (shared|clean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub norm: DistillNorm,
    pub teacher_input: TeacherInput,
    pub pretext: PretextConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            norm: DistillNorm::Mse,
            teacher_input: TeacherInput::SharedMask,
            pretext: PretextConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        self.pretext.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("distill.alpha", self.alpha)
            .set("distill.norm", self.norm.as_str())
            .set("distill.teacher_input", self.teacher_input.as_str());
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillStepReport {
    pub step: u64,
    pub mse: f64,
    pub pretext: f64,
    pub total: f64,
    /// Global gradient norm before clipping; 0 when no update was taken.
    pub grad_norm: f64,
}

impl fmt::Display for DistillStepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} total {:.6} mse {:.6} pretext {:.6} grad_norm {:.4}",
            self.step, self.total, self.mse, self.pretext, self.grad_norm
        )
    }
}

/// Mean squared difference; the teacher operand is detached first.
pub fn distillation_mse<T: Element>(g: &mut Graph<T>, student: NodeId, teacher: NodeId) -> Result<NodeId> {
    let t = g.detach(teacher);
    Ok(g.mse(student, t)?)
}

/// Value-level [`distillation_mse`].
pub fn distillation_mse_values<T: Element>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let t = g.constant(teacher.clone());
    let l = distillation_mse(&mut g, s, t)?;
    Ok(g.value(l).item().to_f64_lossy())
}

fn l2_term(g: &mut Graph<f32>, student: NodeId, teacher: NodeId, segments: &[Segment]) -> Result<NodeId> {
    let t = g.detach(teacher);
    let diff = g.sub(student, t)?;
    let mut acc: Option<NodeId> = None;
    for s in segments {
        let d = g.slice_rows(diff, s.start, s.end())?;
        let sq = g.mul(d, d)?;
        let ss = g.sum(sq);
        // sqrt via exp(½·log); the log is guarded at zero.
        let lg = g.log(ss);
        let half = g.scale(lg, 0.5);
        let norm = g.exp(half);
        acc = Some(match acc {
            Some(a) => g.add(a, norm)?,
            None => norm,
        });
    }
    let sum = acc.ok_or(Error::EmptyMask { what: "distillation batch" })?;
    Ok(g.scale(sum, 1.0 / segments.len() as f32))
}

struct Forward {
    g: Graph<f32>,
    bound: BoundParams,
    total: NodeId,
    mse: f64,
    pretext: f64,
    alpha: f64,
}

impl Forward {
    /// Reported objective, composed in f64 from the reported parts; the f32
    /// graph value differs from it only by rounding.
    fn total(&self) -> f64 {
        self.mse + self.alpha * self.pretext
    }
}

fn check_pair(student: &Parameters, teacher: &Parameters) -> Result<()> {
    if student.config() != teacher.config() {
        return Err(Error::Config(
            "student and teacher model configurations differ".into(),
        ));
    }
    Ok(())
}

fn forward(
    student: &Parameters,
    teacher: &Parameters,
    batch: &Batch,
    mask_seed: u64,
    cfg: &DistillConfig,
    trainable: bool,
) -> Result<Forward> {
    check_pair(student, teacher)?;
    cfg.validate()?;
    let mcfg = student.config();
    let (frames, segments) = batch.packed();
    let items = sample_batch_masks(&segments, &cfg.pretext, mask_seed)?;
    let rows = masked_rows(&items);

    let teacher_hidden = {
        let mut tg = Graph::new();
        let tb = teacher.bind(&mut tg, false);
        let x = tg.constant(frames.clone());
        let t_rows: &[usize] = match cfg.teacher_input {
            TeacherInput::SharedMask => &rows,
            TeacherInput::Clean => &[],
        };
        let out = encode_graph(&mut tg, mcfg, &tb, x, &segments, t_rows)?;
        tg.value(out.hidden).clone()
    };

    let mut g = Graph::new();
    let bound = student.bind(&mut g, trainable);
    let x = g.constant(frames);
    let out = encode_graph(&mut g, mcfg, &bound, x, &segments, &rows)?;
    let t = g.constant(teacher_hidden);
    let match_term = match cfg.norm {
        DistillNorm::Mse => distillation_mse(&mut g, out.hidden, t)?,
        DistillNorm::L2 => l2_term(&mut g, out.hidden, t, &segments)?,
    };
    let pred = pretext_head(&mut g, &bound, out.hidden)?;
    let pretext = pretext_loss_graph(&mut g, mcfg.pretext, pred, out.latents, &items, &cfg.pretext)?;
    let weighted = g.scale(pretext, cfg.alpha as f32);
    let total = g.add(match_term, weighted)?;

    let mse = g.value(match_term).item() as f64;
    let pretext = g.value(pretext).item() as f64;
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "distillation loss is {value} (mse {mse}, pretext {pretext})"
        )));
    }
    Ok(Forward {
        g,
        bound,
        total,
        mse,
        pretext,
        alpha: cfg.alpha,
    })
}

/// Evaluates the joint objective on one batch without updating anything.
/// Both networks see masks drawn from `mask_seed`.
pub fn stable_distill_loss(
    student: &Parameters,
    teacher: &Parameters,
    batch: &Batch,
    mask_seed: u64,
    cfg: &DistillConfig,
) -> Result<(f64, DistillStepReport)> {
    let f = forward(student, teacher, batch, mask_seed, cfg, false)?;
    let total = f.total();
    Ok((
        total,
        DistillStepReport {
            step: 0,
            mse: f.mse,
            pretext: f.pretext,
            total,
            grad_norm: 0.0,
        },
    ))
}

/// One Adam update of the student on the joint objective. The teacher is
/// borrowed immutably and never written.
pub fn distill_step(
    student: &mut Parameters,
    teacher: &Parameters,
    batch: &Batch,
    state: &mut AdamState,
    hyper: &TrainHyper,
    cfg: &DistillConfig,
    mask_seed: u64,
) -> Result<DistillStepReport> {
    let f = forward(student, teacher, batch, mask_seed, cfg, true)?;
    let total = f.total();
    let mut grads = f.g.backward(f.total)?;
    let grads = f.bound.collect_grads(&mut grads);
    let info = adam_update(student, &grads, state, hyper)?;
    Ok(DistillStepReport {
        step: state.step,
        mse: f.mse,
        pretext: f.pretext,
        total,
        grad_norm: info.grad_norm,
    })
}
