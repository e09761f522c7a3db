//! Token error rate, weight-distance diagnostics and snapshot curves.

use std::collections::BTreeMap;
use std::fmt;

use crate::checkpoint::Checkpoint;
use crate::corpus::{eval_batches, Corpus, Utterance};
use crate::ctc::ctc_greedy_decode;
use crate::graph::Graph;
use crate::kv::KvMap;
use crate::model::{ctc_head, encode_graph, Parameters};
use crate::pipeline::{probe_ctc, TrainHyper};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`; may exceed 1.
    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_tokens as f64
    }
}

impl fmt::Display for WerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "WER {:.2}% (S {} D {} I {} N {})",
            100.0 * self.wer(),
            self.substitutions,
            self.deletions,
            self.insertions,
            self.ref_tokens
        )
    }
}

/// Unit-cost alignment counts `(S, D, I)` for one pair.
pub fn align_counts(r: &[u32], h: &[u32]) -> (usize, usize, usize) {
    // Each cell holds (cost, S, D, I); ties prefer substitution, then deletion.
    let w = h.len() + 1;
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..w).map(|j| (j, 0, 0, j)).collect();
    for i in 1..=r.len() {
        let mut cur = Vec::with_capacity(w);
        cur.push((i, 0, i, 0));
        for j in 1..w {
            let (c, s, d, ins) = prev[j - 1];
            let diag = if r[i - 1] == h[j - 1] {
                (c, s, d, ins)
            } else {
                (c + 1, s + 1, d, ins)
            };
            let (c, s, d, ins) = prev[j];
            let del = (c + 1, s, d + 1, ins);
            let (c, s, d, ins) = cur[j - 1];
            let insert = (c + 1, s, d, ins + 1);
            let best = [diag, del, insert].into_iter().min_by_key(|x| x.0).unwrap();
            cur.push(best);
        }
        prev = cur;
    }
    let (_, s, d, i) = prev[h.len()];
    (s, d, i)
}

/// Corpus-level error counts; pairs are aligned independently and summed.
pub fn wer(refs: &[Vec<u32>], hyps: &[Vec<u32>]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::Config(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut rep = WerReport::default();
    for (r, h) in refs.iter().zip(hyps) {
        let (s, d, i) = align_counts(r, h);
        rep.substitutions += s;
        rep.deletions += d;
        rep.insertions += i;
        rep.ref_tokens += r.len();
    }
    if rep.ref_tokens == 0 {
        return Err(Error::Config("reference corpus has no tokens".into()));
    }
    Ok(rep)
}

/// Greedy CTC transcriptions of `utts`.
pub fn decode(params: &Parameters, utts: &[Utterance]) -> Result<Vec<Vec<u32>>> {
    if !params.has_ctc_head() {
        return Err(Error::Config("checkpoint has no CTC head".into()));
    }
    let cfg = params.config();
    if let Some(u) = utts.first() {
        let d = u.frames.dims2().1;
        if d != cfg.feature_dim {
            return Err(Error::Config(format!(
                "corpus feature dim {d} does not match model feature dim {}",
                cfg.feature_dim
            )));
        }
    }
    let mut out = Vec::with_capacity(utts.len());
    for b in eval_batches(utts, 32) {
        let (frames, segments) = b.packed();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(frames);
        let enc = encode_graph(&mut g, cfg, &bound, x, &segments, &[])?;
        let logits = ctc_head(&mut g, &bound, enc.hidden)?;
        let v = g.value(logits);
        let vocab = v.dims2().1;
        for s in &segments {
            let rows = v.data()[s.start * vocab..s.end() * vocab].to_vec();
            out.push(ctc_greedy_decode(&Tensor::from_vec([s.len, vocab], rows)));
        }
    }
    Ok(out)
}

/// Frobenius distances between two parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDistanceReport {
    /// Per tensor, in canonical order.
    pub per_tensor: Vec<(String, f64)>,
    pub total: f64,
}

impl WeightDistanceReport {
    /// Distances aggregated by top-level block: `input`, `layers.{l}`,
    /// `pretext`, and so on.
    pub fn per_group(&self) -> Vec<(String, f64)> {
        let mut groups: BTreeMap<String, f64> = BTreeMap::new();
        let mut order = Vec::new();
        for (name, d) in &self.per_tensor {
            let key = match name.split('.').collect::<Vec<_>>().as_slice() {
                ["layers", l, ..] => format!("layers.{l}"),
                [first, ..] => first.to_string(),
                [] => String::new(),
            };
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            *groups.entry(key).or_default() += d * d;
        }
        order.into_iter().map(|k| (k.clone(), groups[&k].sqrt())).collect()
    }

    pub fn to_records(&self) -> Vec<KvMap> {
        let mut out: Vec<KvMap> = self
            .per_tensor
            .iter()
            .map(|(n, d)| {
                let mut m = KvMap::new();
                m.set("kind", "tensor").set("name", n).set("distance", d);
                m
            })
            .collect();
        for (n, d) in self.per_group() {
            let mut m = KvMap::new();
            m.set("kind", "group").set("name", n).set("distance", d);
            out.push(m);
        }
        let mut m = KvMap::new();
        m.set("kind", "total").set("distance", self.total);
        out.push(m);
        out
    }
}

/// Distances over the tensors both sets hold; a CTC head present on only
/// one side is left out.
pub fn weight_distance_params(a: &Parameters, b: &Parameters) -> Result<WeightDistanceReport> {
    if a.config() != b.config() {
        return Err(Error::Config("weight distance needs matching model configurations".into()));
    }
    let mut per_tensor = Vec::new();
    for (name, ta) in a.tensors() {
        let Some(tb) = b.get(name) else { continue };
        let ss: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        per_tensor.push((name.clone(), ss.sqrt()));
    }
    let total = per_tensor.iter().map(|(_, d)| d * d).sum::<f64>().sqrt();
    Ok(WeightDistanceReport { per_tensor, total })
}

pub fn weight_distance(a: &Checkpoint, b: &Checkpoint) -> Result<WeightDistanceReport> {
    weight_distance_params(&a.params, &b.params)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub dev_wer: f64,
}

/// Scores every snapshot with the same frozen-encoder CTC probe (same hyper
/// and seed) and reports its best dev WER.
pub fn wer_vs_steps(
    snapshots: &[Checkpoint],
    labeled: &Corpus,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    snapshots
        .iter()
        .map(|s| {
            let out = probe_ctc(s, labeled, hyper, seed)?;
            Ok(CurvePoint {
                step: s.step,
                dev_wer: out.best_dev_wer,
            })
        })
        .collect()
}

/// `WER(final) − min WER` of a curve.
pub fn overfit_gap(curve: &[CurvePoint]) -> Option<f64> {
    let last = curve.last()?.dev_wer;
    let min = curve.iter().map(|p| p.dev_wer).fold(f64::INFINITY, f64::min);
    Some(last - min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn wer_examples() {
        let r = vec![vec![1, 2, 3]];
        assert_eq!(wer(&r, &r).unwrap().wer(), 0.0);
        let del = wer(&r, &[vec![]]).unwrap();
        assert_eq!((del.deletions, del.wer()), (3, 1.0));
        let sub = wer(&r, &[vec![1, 9, 3]]).unwrap();
        assert_eq!(sub.substitutions, 1);
        assert!((sub.wer() - 1.0 / 3.0).abs() < 1e-15);
        let ins = wer(&[vec![1]], &[vec![1, 2, 2]]).unwrap();
        assert_eq!((ins.insertions, ins.errors()), (2, 2));
        assert!(ins.wer() > 1.0);
        assert!(wer(&[vec![]], &[vec![1]]).is_err());
        assert!(wer(&r, &[]).is_err());
    }

    #[test]
    fn distance_examples() {
        let p = init_params(&ModelConfig::default(), 1).unwrap();
        assert_eq!(weight_distance_params(&p, &p).unwrap().total, 0.0);
        let mut q = p.clone();
        q.reset_ctc_head(3);
        let bias = q.get_mut("input.bias").unwrap();
        bias.data_mut()[0] += 1.0;
        bias.data_mut()[1] += 1.0;
        let d = weight_distance_params(&p, &q).unwrap();
        assert!(d.per_tensor.iter().all(|(n, _)| !n.starts_with("ctc")));
        assert!((d.total - 2f64.sqrt()).abs() < 1e-6);
        let back = weight_distance_params(&q, &p).unwrap();
        assert_eq!(d.total, back.total);
        let groups = d.per_group();
        assert_eq!(groups[0].0, "input");
        let sq: f64 = groups.iter().map(|(_, x)| x * x).sum();
        assert!((sq.sqrt() - d.total).abs() < 1e-12);
    }

    #[test]
    fn gap_of_curve() {
        let c = [(0, 0.5), (10, 0.3), (20, 0.4)].map(|(step, dev_wer)| CurvePoint { step, dev_wer });
        assert!((overfit_gap(&c).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(overfit_gap(&[]), None);
    }
}
