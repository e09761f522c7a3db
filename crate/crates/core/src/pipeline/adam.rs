use log::warn;

use crate::model::Parameters;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Consecutive non-finite gradient steps tolerated before aborting.
pub const MAX_NONFINITE_STREAK: u32 = 10;

/// Optimizer and loop settings for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Periodic dev evaluation interval in steps; 0 means once per epoch.
    pub eval_every: usize,
    /// Snapshot interval in steps for continued pretraining; 0 disables.
    pub snapshot_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 50,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 5.0,
            eval_every: 0,
            snapshot_every: 0,
        }
    }
}

impl TrainHyper {
    /// Initial source-domain pretraining.
    pub fn pretrain() -> Self {
        Self {
            lr: 2e-3,
            epochs: 30,
            ..Self::default()
        }
    }

    /// Continued pretraining and stable distillation.
    pub fn continued() -> Self {
        Self::default()
    }

    pub fn finetune() -> Self {
        Self {
            lr: 1.5e-3,
            epochs: 40,
            ..Self::default()
        }
    }

    /// Frozen-encoder head training used to score each snapshot of a curve.
    pub fn probe() -> Self {
        Self {
            lr: 2e-2,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("eps must be positive and clip_norm non-negative");
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> crate::kv::KvMap {
        let mut m = crate::kv::KvMap::new();
        m.set(format!("{prefix}.lr"), self.lr)
            .set(format!("{prefix}.epochs"), self.epochs)
            .set(format!("{prefix}.batch_size"), self.batch_size)
            .set(format!("{prefix}.beta1"), self.beta1)
            .set(format!("{prefix}.beta2"), self.beta2)
            .set(format!("{prefix}.eps"), self.eps)
            .set(format!("{prefix}.clip_norm"), self.clip_norm)
            .set(format!("{prefix}.eval_every"), self.eval_every)
            .set(format!("{prefix}.snapshot_every"), self.snapshot_every);
        m
    }

    /// Reads `{prefix}.*` keys, falling back to `self` for absent ones.
    pub fn overridden_by(&self, m: &crate::kv::KvMap, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}.{s}");
        let h = Self {
            lr: m.get_or(&k("lr"), self.lr)?,
            epochs: m.get_or(&k("epochs"), self.epochs)?,
            batch_size: m.get_or(&k("batch_size"), self.batch_size)?,
            beta1: m.get_or(&k("beta1"), self.beta1)?,
            beta2: m.get_or(&k("beta2"), self.beta2)?,
            eps: m.get_or(&k("eps"), self.eps)?,
            clip_norm: m.get_or(&k("clip_norm"), self.clip_norm)?,
            eval_every: m.get_or(&k("eval_every"), self.eval_every)?,
            snapshot_every: m.get_or(&k("snapshot_every"), self.snapshot_every)?,
        };
        h.validate()?;
        Ok(h)
    }
}

/// First and second moments aligned with a parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    nonfinite_streak: u32,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Tensor<f32>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            nonfinite_streak: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
}

/// Global L2 norm over all present gradients.
pub fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads.iter().flatten().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Bias-corrected Adam with global-norm clipping applied first. Missing
/// gradients (frozen tensors) leave the tensor and its moments untouched.
pub fn adam_update(
    params: &mut Parameters,
    grads: &[Option<Tensor<f32>>],
    state: &mut AdamState,
    hyper: &TrainHyper,
) -> Result<UpdateInfo> {
    let n = params.tensors().len();
    if grads.len() != n || state.m.len() != n {
        return Err(Error::Config(format!(
            "optimizer alignment: {n} parameters, {} gradients, {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.tensors().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Config(format!(
                    "gradient for `{name}` has shape {:?}, expected {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        state.nonfinite_streak += 1;
        warn!("non-finite gradient at step {}; update skipped", state.step + 1);
        if state.nonfinite_streak > MAX_NONFINITE_STREAK {
            return Err(Error::NonFinite(format!(
                "gradients non-finite for {} consecutive steps",
                state.nonfinite_streak
            )));
        }
        return Ok(UpdateInfo {
            grad_norm: norm,
            clipped: false,
            skipped: true,
        });
    }
    state.nonfinite_streak = 0;
    let clipped = hyper.clip_norm > 0.0 && norm > hyper.clip_norm;
    let scale = if clipped { hyper.clip_norm / norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (_, p)) in params.tensors_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gr = gr as f64 * scale;
            let mi = b1 * *m as f64 + (1.0 - b1) * gr;
            let vi = b2 * *v as f64 + (1.0 - b2) * gr * gr;
            *m = mi as f32;
            *v = vi as f32;
            let step = hyper.lr * (mi / c1) / ((vi / c2).sqrt() + hyper.eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(UpdateInfo {
        grad_norm: norm,
        clipped,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn setup() -> (Parameters, AdamState) {
        let cfg = ModelConfig {
            hidden_dim: 8,
            ffn_dim: 0,
            num_layers: 1,
            num_heads: 2,
            max_time: 8,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, 1).unwrap();
        let s = AdamState::new(&p);
        (p, s)
    }

    fn grads_like(p: &Parameters, f: impl Fn(usize) -> f32) -> Vec<Option<Tensor<f32>>> {
        p.tensors()
            .iter()
            .map(|(_, t)| {
                let data = (0..t.numel()).map(&f).collect();
                Some(Tensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect()
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let (mut p, mut s) = setup();
        let before = p.clone();
        let g = grads_like(&p, |_| 0.0);
        adam_update(&mut p, &g, &mut s, &TrainHyper::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let (mut p, mut s) = setup();
        let before = p.clone();
        let g = grads_like(&p, |i| if i % 2 == 0 { 0.003 } else { -0.002 });
        let h = TrainHyper {
            clip_norm: 0.0,
            ..TrainHyper::default()
        };
        adam_update(&mut p, &g, &mut s, &h).unwrap();
        for (((_, a), (_, b)), gr) in before.tensors().iter().zip(p.tensors()).zip(&g) {
            for ((x, y), gv) in a.data().iter().zip(b.data()).zip(gr.as_ref().unwrap().data()) {
                let expected = -h.lr * gv.signum() as f64;
                assert!(((y - x) as f64 - expected).abs() < 1e-6, "{x} {y} {gv}");
            }
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let (mut p, mut s) = setup();
        let n = p.num_scalars() as f32;
        let g = grads_like(&p, |_| 100.0 / n.sqrt());
        assert!((global_norm(&g) - 100.0).abs() < 1e-3);
        let info = adam_update(&mut p, &g, &mut s, &TrainHyper::default()).unwrap();
        assert!(info.clipped);
        // After clipping each entry is 5/sqrt(n); first moment is (1-β1) times that.
        let applied: f64 = s.m.iter().map(|m| m.sum_sq()).sum::<f64>().sqrt() / 0.1;
        assert!((applied - 5.0).abs() < 1e-3, "{applied}");
    }

    #[test]
    fn nonfinite_grads_skip_then_abort() {
        let (mut p, mut s) = setup();
        let before = p.clone();
        let g = grads_like(&p, |i| if i == 0 { f32::NAN } else { 1.0 });
        for _ in 0..MAX_NONFINITE_STREAK {
            let info = adam_update(&mut p, &g, &mut s, &TrainHyper::default()).unwrap();
            assert!(info.skipped);
        }
        assert_eq!(p, before);
        assert!(matches!(
            adam_update(&mut p, &g, &mut s, &TrainHyper::default()),
            Err(Error::NonFinite(_))
        ));
    }
}
