//! Connectionist Temporal Classification: log-space forward-backward loss,
//! greedy decoding, and an exhaustive path-sum oracle for small lattices.
//!
//! Lattices are `T×V` per-frame log-probabilities with the blank at id 0.

use crate::graph::{Graph, NodeId, Segment};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub const BLANK: u32 = 0;

/// Loss of one sequence. Infeasible labels report `nll = +inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcOutcome {
    pub nll: f64,
    pub feasible: bool,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames needed to emit `labels`: one per label plus a separating blank
/// between equal neighbours.
pub fn min_frames(labels: &[u32]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels(labels: &[u32], vocab: usize) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l == BLANK || l as usize >= vocab) {
        return Err(Error::Config(format!("label {l} outside [1, {vocab})")));
    }
    Ok(())
}

/// Negative log-likelihood and its gradient w.r.t. every lattice entry.
fn forward_backward(lp: &[f64], t_len: usize, vocab: usize, labels: &[u32]) -> (CtcOutcome, Vec<f64>) {
    let mut grad = vec![0.0; t_len * vocab];
    if t_len < min_frames(labels) {
        return (
            CtcOutcome {
                nll: f64::INFINITY,
                feasible: false,
            },
            grad,
        );
    }
    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { BLANK as usize } else { labels[s / 2] as usize })
        .collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK as usize && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * vocab + ext[s]];
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_z = alpha[last + s_len - 1];
    if s_len > 1 {
        log_z = lse2(log_z, alpha[last + s_len - 2]);
    }
    if log_z == ninf {
        return (
            CtcOutcome {
                nll: f64::INFINITY,
                feasible: false,
            },
            grad,
        );
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp[(t_len - 1) * vocab + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(t_len - 1) * vocab + ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp[t * vocab + ext[s]];
        }
    }

    let mut occ = vec![ninf; vocab];
    for t in 0..t_len {
        occ.fill(ninf);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = lse2(occ[ext[s]], v);
        }
        for k in 0..vocab {
            if occ[k] != ninf {
                // alpha and beta both include the emission at (t, s).
                grad[t * vocab + k] = -(occ[k] - lp[t * vocab + k] - log_z).exp();
            }
        }
    }
    (
        CtcOutcome {
            nll: -log_z,
            feasible: true,
        },
        grad,
    )
}

/// CTC negative log-likelihood of `labels` under a `T×V` lattice.
pub fn ctc_loss<T: Element>(lattice: &Tensor<T>, labels: &[u32]) -> Result<CtcOutcome> {
    let (t_len, vocab) = lattice.dims2();
    check_labels(labels, vocab)?;
    let lp: Vec<f64> = lattice.data().iter().map(|x| x.to_f64_lossy()).collect();
    Ok(forward_backward(&lp, t_len, vocab, labels).0)
}

/// Batch CTC on the graph: mean NLL over the feasible sequences of a packed
/// `N×V` log-probability node. Returns the loss node and per-sequence outcomes.
pub fn ctc_loss_graph<T: Element>(
    g: &mut Graph<T>,
    log_probs: NodeId,
    segments: &[Segment],
    labels: &[&[u32]],
) -> Result<(NodeId, Vec<CtcOutcome>)> {
    if segments.len() != labels.len() {
        return Err(Error::Config("one label sequence per segment required".into()));
    }
    let lattice = g.value(log_probs);
    let (rows, vocab) = lattice.dims2();
    let mut jac = vec![T::zero(); rows * vocab];
    let mut outcomes = Vec::with_capacity(segments.len());
    let mut grads = Vec::with_capacity(segments.len());
    for (seg, lab) in segments.iter().zip(labels) {
        check_labels(lab, vocab)?;
        let lp: Vec<f64> = lattice.data()[seg.start * vocab..seg.end() * vocab]
            .iter()
            .map(|x| x.to_f64_lossy())
            .collect();
        let (o, gr) = forward_backward(&lp, seg.len, vocab, lab);
        outcomes.push(o);
        grads.push(gr);
    }
    let feasible = outcomes.iter().filter(|o| o.feasible).count();
    if feasible == 0 {
        return Err(Error::Infeasible(format!(
            "no sequence in a batch of {} admits a CTC alignment",
            segments.len()
        )));
    }
    let scale = 1.0 / feasible as f64;
    let mut total = 0.0;
    for ((seg, o), gr) in segments.iter().zip(&outcomes).zip(&grads) {
        if !o.feasible {
            continue;
        }
        total += o.nll * scale;
        for (j, &v) in jac[seg.start * vocab..seg.end() * vocab].iter_mut().zip(gr) {
            *j = T::from_f64_lossy(v * scale);
        }
    }
    let shape = g.value(log_probs).shape().to_vec();
    let node = g.custom_scalar(log_probs, T::from_f64_lossy(total), Tensor::from_vec(shape, jac))?;
    Ok((node, outcomes))
}

/// Per-frame argmax (ties to the lowest id), repeats collapsed, blanks dropped.
pub fn ctc_greedy_decode<T: Element>(lattice: &Tensor<T>) -> Vec<u32> {
    let (t_len, _) = lattice.dims2();
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..t_len {
        let row = lattice.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        let best = best as u32;
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn collapse(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

pub const BRUTE_FORCE_MAX_T: usize = 8;
pub const BRUTE_FORCE_MAX_V: usize = 5;

/// Exact CTC negative log-likelihood by enumerating all `V^T` frame paths.
pub fn ctc_brute_force<T: Element>(lattice: &Tensor<T>, labels: &[u32]) -> Result<CtcOutcome> {
    let (t_len, vocab) = lattice.dims2();
    if t_len > BRUTE_FORCE_MAX_T || vocab > BRUTE_FORCE_MAX_V {
        return Err(Error::Config(format!(
            "brute force limited to T<={BRUTE_FORCE_MAX_T}, V<={BRUTE_FORCE_MAX_V}; got {t_len}x{vocab}"
        )));
    }
    check_labels(labels, vocab)?;
    let lp: Vec<f64> = lattice.data().iter().map(|x| x.to_f64_lossy()).collect();
    let mut path = vec![0u32; t_len];
    let mut log_total = f64::NEG_INFINITY;
    let total_paths = vocab.pow(t_len as u32);
    for code in 0..total_paths {
        let mut c = code;
        let mut score = 0.0;
        for (t, p) in path.iter_mut().enumerate() {
            *p = (c % vocab) as u32;
            c /= vocab;
            score += lp[t * vocab + *p as usize];
        }
        if collapse(&path) == labels {
            log_total = lse2(log_total, score);
        }
    }
    Ok(if log_total == f64::NEG_INFINITY {
        CtcOutcome {
            nll: f64::INFINITY,
            feasible: false,
        }
    } else {
        CtcOutcome {
            nll: -log_total,
            feasible: true,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, v: usize) -> Tensor<f64> {
        Tensor::full([t, v], -(v as f64).ln())
    }

    fn lattice_from_argmax(path: &[u32], v: usize) -> Tensor<f64> {
        let mut d = vec![-5.0; path.len() * v];
        for (t, &p) in path.iter().enumerate() {
            d[t * v + p as usize] = 0.0;
        }
        Tensor::from_vec([path.len(), v], d)
    }

    #[test]
    fn single_frame_single_label() {
        let o = ctc_loss(&uniform(1, 3), &[1]).unwrap();
        assert!((o.nll - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_has_three_paths() {
        let o = ctc_loss(&uniform(2, 3), &[2]).unwrap();
        assert!((o.nll - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separator() {
        let o = ctc_loss(&uniform(2, 3), &[1, 1]).unwrap();
        assert!(!o.feasible && o.nll.is_infinite());
        assert!(ctc_loss(&uniform(3, 3), &[1, 1]).unwrap().feasible);
    }

    #[test]
    fn empty_label_is_all_blank_path() {
        let lat = Tensor::from_vec([2, 2], vec![0.2f64.ln(), 0.8f64.ln(), 0.6f64.ln(), 0.4f64.ln()]);
        let o = ctc_loss(&lat, &[]).unwrap();
        assert!((o.nll + (0.2f64 * 0.6).ln()).abs() < 1e-12);
        let b = ctc_brute_force(&lat, &[]).unwrap();
        assert!((b.nll - o.nll).abs() < 1e-12);
    }

    #[test]
    fn greedy_collapse_rules() {
        assert_eq!(ctc_greedy_decode(&lattice_from_argmax(&[0, 1, 1, 0, 2], 3)), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&lattice_from_argmax(&[0, 0, 0], 3)), Vec::<u32>::new());
        assert_eq!(ctc_greedy_decode(&lattice_from_argmax(&[1, 0, 1], 3)), vec![1, 1]);
        // Ties resolve toward the lowest id.
        assert_eq!(ctc_greedy_decode(&Tensor::<f64>::zeros([2, 3])), Vec::<u32>::new());
    }

    #[test]
    fn rejects_blank_labels_and_oversized_brute_force() {
        assert!(ctc_loss(&uniform(3, 3), &[0]).is_err());
        assert!(ctc_brute_force(&uniform(9, 3), &[1]).is_err());
        assert!(ctc_brute_force(&uniform(3, 6), &[1]).is_err());
    }
}
