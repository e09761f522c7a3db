//! Masked-prediction self-supervised objectives.
//!
//! Span masks follow the wav2vec2 convention: every frame starts a span of
//! `M` masked frames with probability `p`. The contrastive loss asks the
//! representation at each masked frame to pick out that frame's pre-mask
//! latent among `K` distractor latents drawn from other masked frames of
//! the same utterance. Targets are detached: no gradient flows into them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId, Segment};
use crate::kv::KvMap;
use crate::model::PretextKind;
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Sorted, deduplicated masked time indices of one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    len: usize,
    indices: Vec<usize>,
}

impl MaskSpec {
    pub fn from_indices(len: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&i) = indices.last() {
            if i >= len {
                return Err(Error::Config(format!("mask index {i} out of range for length {len}")));
            }
        }
        Ok(Self { len, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        self.indices.len() as f64 / self.len as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretextConfig {
    /// Span-start probability.
    pub mask_prob: f64,
    /// Span length.
    pub span: usize,
    pub num_negatives: usize,
    pub temperature: f64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.25,
            span: 3,
            num_negatives: 10,
            temperature: 0.1,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config("mask_prob must be in (0, 1)".into()));
        }
        if self.span == 0 || self.num_negatives == 0 || self.temperature <= 0.0 {
            return Err(Error::Config("span, num_negatives and temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("pretext.mask_prob", self.mask_prob)
            .set("pretext.span", self.span)
            .set("pretext.num_negatives", self.num_negatives)
            .set("pretext.temperature", self.temperature);
        m
    }
}

/// Samples a span mask for a sequence of length `len`.
///
/// Spans starting near the end are truncated. If no frame was selected a
/// single span is placed at a uniformly drawn start.
pub fn sample_mask(len: usize, cfg: &PretextConfig, seed: u64) -> Result<MaskSpec> {
    if len < cfg.span {
        return Err(Error::Config(format!(
            "sequence length {len} shorter than mask span {}",
            cfg.span
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; len];
    for start in 0..len {
        if rng.gen_bool(cfg.mask_prob.clamp(0.0, 1.0)) {
            for m in masked.iter_mut().skip(start).take(cfg.span) {
                *m = true;
            }
        }
    }
    if !masked.iter().any(|&m| m) {
        let start = rng.gen_range(0..len);
        for m in masked.iter_mut().skip(start).take(cfg.span) {
            *m = true;
        }
    }
    let indices = masked.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    Ok(MaskSpec { len, indices })
}

/// Draws `k` distractor indices for every masked position.
///
/// Distractors come from the other masked positions, without replacement
/// when there are at least `k` of them. A single-position mask falls back
/// to the unmasked positions of the sequence.
pub fn sample_negatives(mask: &MaskSpec, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask { what: "sample_negatives" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(mask.len());
    for &t in mask.indices() {
        let mut pool: Vec<usize> = mask.indices().iter().copied().filter(|&i| i != t).collect();
        if pool.is_empty() {
            pool = (0..mask.seq_len()).filter(|&i| i != t).collect();
        }
        if pool.is_empty() {
            // Length-1 sequence: the target is its own only candidate.
            pool.push(t);
        }
        let negs = if pool.len() >= k {
            sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
        } else {
            (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        out.push(negs);
    }
    Ok(out)
}

/// One sequence's slice of a packed batch together with its mask and
/// distractors (all indices local to the sequence).
#[derive(Clone, Debug)]
pub struct MaskedSegment {
    pub segment: Segment,
    pub mask: MaskSpec,
    pub negatives: Vec<Vec<usize>>,
}

impl MaskedSegment {
    /// Samples mask and distractors for `segment` from one seed.
    pub fn sample(segment: Segment, cfg: &PretextConfig, seed: u64) -> Result<Self> {
        let mask = sample_mask(segment.len, cfg, seed)?;
        let negatives = sample_negatives(&mask, cfg.num_negatives, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(Self {
            segment,
            mask,
            negatives,
        })
    }

    pub fn global_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.indices().iter().map(move |&t| self.segment.start + t)
    }
}

/// Global masked rows of every segment, in order.
pub fn masked_rows(items: &[MaskedSegment]) -> Vec<usize> {
    items.iter().flat_map(|m| m.global_rows()).collect()
}

/// Masks for every segment of a packed batch; segment `i` draws from a
/// seed derived from `(seed, i)`.
pub fn sample_batch_masks(segments: &[Segment], cfg: &PretextConfig, seed: u64) -> Result<Vec<MaskedSegment>> {
    segments
        .iter()
        .enumerate()
        .map(|(i, &s)| MaskedSegment::sample(s, cfg, crate::corpus::mix64(seed ^ crate::corpus::mix64(i as u64))))
        .collect()
}

/// Contrastive loss over a packed batch, averaged per sequence and then
/// across sequences.
pub fn contrastive_loss_graph<T: Element>(
    g: &mut Graph<T>,
    repr: NodeId,
    targets: NodeId,
    items: &[MaskedSegment],
    temperature: f64,
) -> Result<NodeId> {
    let k = items
        .first()
        .and_then(|m| m.negatives.first())
        .map(Vec::len)
        .ok_or(Error::EmptyMask { what: "contrastive loss" })?;
    let mut rows_r = Vec::new();
    let mut rows_y = Vec::new();
    let mut weights = Vec::new();
    for item in items {
        if item.mask.is_empty() {
            return Err(Error::EmptyMask { what: "contrastive loss" });
        }
        let w = 1.0 / (items.len() as f64 * item.mask.len() as f64);
        for (&t, negs) in item.mask.indices().iter().zip(&item.negatives) {
            if negs.len() != k {
                return Err(Error::Config("inconsistent distractor count".into()));
            }
            let base = item.segment.start;
            rows_r.extend(std::iter::repeat(base + t).take(k + 1));
            rows_y.push(base + t);
            rows_y.extend(negs.iter().map(|&n| base + n));
            weights.push(T::from_f64_lossy(w));
        }
    }
    let m = weights.len();
    let r = g.gather_rows(repr, &rows_r)?;
    let y = g.gather_rows(targets, &rows_y)?;
    let cos = g.row_cosine(r, y)?;
    let logits = g.scale(cos, T::from_f64_lossy(1.0 / temperature));
    let logits = g.reshape(logits, [m, k + 1])?;
    let lp = g.log_softmax(logits)?;
    let lp_t = g.transpose(lp)?;
    let positive = g.slice_rows(lp_t, 0, 1)?;
    let positive = g.reshape(positive, [m])?;
    let w = g.constant(Tensor::from_vec([m], weights));
    let weighted = g.mul(positive, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -T::one()))
}

/// Masked-row MSE between predictions and latents, averaged per sequence
/// over masked rows × width and then across sequences.
pub fn reconstruction_loss_graph<T: Element>(
    g: &mut Graph<T>,
    repr: NodeId,
    latents: NodeId,
    items: &[MaskedSegment],
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::EmptyMask { what: "reconstruction loss" });
    }
    let width = g.value(repr).dims2().1;
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for item in items {
        if item.mask.is_empty() {
            return Err(Error::EmptyMask { what: "reconstruction loss" });
        }
        let w = T::from_f64_lossy(1.0 / (items.len() as f64 * (item.mask.len() * width) as f64));
        for r in item.global_rows() {
            rows.push(r);
            weights.extend(std::iter::repeat(w).take(width));
        }
    }
    let a = g.gather_rows(repr, &rows)?;
    let b = g.gather_rows(latents, &rows)?;
    let d = g.sub(a, b)?;
    let d2 = g.mul(d, d)?;
    let w = g.constant(Tensor::from_vec([rows.len(), width], weights));
    let weighted = g.mul(d2, w)?;
    Ok(g.sum(weighted))
}

/// Dispatches on the pretext kind.
pub fn pretext_loss_graph<T: Element>(
    g: &mut Graph<T>,
    kind: PretextKind,
    repr: NodeId,
    latents: NodeId,
    items: &[MaskedSegment],
    cfg: &PretextConfig,
) -> Result<NodeId> {
    match kind {
        PretextKind::Contrastive => contrastive_loss_graph(g, repr, latents, items, cfg.temperature),
        PretextKind::Reconstruction => reconstruction_loss_graph(g, repr, latents, items),
    }
}

/// Contrastive loss of one sequence with explicit distractors.
pub fn contrastive_loss_with_negatives<T: Element>(
    repr: &Tensor<T>,
    targets: &Tensor<T>,
    mask: &MaskSpec,
    negatives: &[Vec<usize>],
    temperature: f64,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask { what: "contrastive loss" });
    }
    let mut g = Graph::new();
    let r = g.constant(repr.clone());
    let y = g.constant(targets.clone());
    let item = MaskedSegment {
        segment: Segment::new(0, repr.dims2().0),
        mask: mask.clone(),
        negatives: negatives.to_vec(),
    };
    let l = contrastive_loss_graph(&mut g, r, y, &[item], temperature)?;
    Ok(g.value(l).item().to_f64_lossy())
}

/// Contrastive loss of one sequence; distractors drawn from `seed`.
pub fn contrastive_pretext_loss<T: Element>(
    repr: &Tensor<T>,
    targets: &Tensor<T>,
    mask: &MaskSpec,
    cfg: &PretextConfig,
    seed: u64,
) -> Result<f64> {
    let negatives = sample_negatives(mask, cfg.num_negatives, seed)?;
    contrastive_loss_with_negatives(repr, targets, mask, &negatives, cfg.temperature)
}

pub fn reconstruction_pretext_loss<T: Element>(
    repr: &Tensor<T>,
    latents: &Tensor<T>,
    mask: &MaskSpec,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask { what: "reconstruction loss" });
    }
    let mut g = Graph::new();
    let r = g.constant(repr.clone());
    let y = g.constant(latents.clone());
    let item = MaskedSegment {
        segment: Segment::new(0, repr.dims2().0),
        mask: mask.clone(),
        negatives: Vec::new(),
    };
    let l = reconstruction_loss_graph(&mut g, r, y, &[item])?;
    Ok(g.value(l).item().to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn near_certain_start_masks_everything() {
        let cfg = PretextConfig {
            mask_prob: 0.999_999,
            ..Default::default()
        };
        let m = sample_mask(40, &cfg, 3).unwrap();
        assert_eq!(m.len(), 40);
    }

    #[test]
    fn mask_is_reproducible_and_nonempty() {
        let cfg = PretextConfig {
            mask_prob: 0.01,
            ..Default::default()
        };
        for seed in 0..50 {
            let a = sample_mask(5, &cfg, seed).unwrap();
            assert_eq!(a, sample_mask(5, &cfg, seed).unwrap());
            assert!(!a.is_empty());
        }
        assert!(sample_mask(2, &cfg, 0).is_err());
    }

    #[test]
    fn perfect_match_with_orthogonal_negatives() {
        // Rows 0..11 are one-hot basis vectors, so every distractor is
        // orthogonal to the target.
        let k = 10;
        let t = 11;
        let mut data = vec![0.0f64; t * t];
        for i in 0..t {
            data[i * t + i] = 1.0;
        }
        let x = Tensor::from_vec([t, t], data);
        let mask = MaskSpec::from_indices(t, (0..t).collect()).unwrap();
        let negs = sample_negatives(&mask, k, 1).unwrap();
        let loss = contrastive_loss_with_negatives(&x, &x, &mask, &negs, 0.1).unwrap();
        let expect = (1.0 + k as f64 * (-10.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn identical_candidates_give_log_k_plus_one() {
        let x = Tensor::from_vec([6, 3], [0.3, -0.2, 0.9].repeat(6));
        let r = rand_tensor(6, 3, 4);
        let mask = MaskSpec::from_indices(6, vec![0, 2, 3, 5]).unwrap();
        let cfg = PretextConfig::default();
        let loss = contrastive_pretext_loss(&r, &x, &mask, &cfg, 8).unwrap();
        assert!((loss - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let x = rand_tensor(4, 3, 0);
        let m = MaskSpec::from_indices(4, vec![]).unwrap();
        assert!(matches!(
            reconstruction_pretext_loss(&x, &x, &m),
            Err(Error::EmptyMask { .. })
        ));
        assert!(contrastive_pretext_loss(&x, &x, &m, &PretextConfig::default(), 0).is_err());
    }

    #[test]
    fn reconstruction_offset_and_restriction() {
        let y = rand_tensor(8, 4, 1);
        let m = MaskSpec::from_indices(8, vec![1, 2, 6]).unwrap();
        assert_eq!(reconstruction_pretext_loss(&y, &y, &m).unwrap(), 0.0);
        let mut r = y.clone();
        for &t in m.indices() {
            for j in 0..4 {
                r.data_mut()[t * 4 + j] += 0.5;
            }
        }
        // Perturbing unmasked rows changes nothing.
        r.data_mut()[0] += 100.0;
        r.data_mut()[7 * 4 + 2] -= 3.0;
        let l = reconstruction_pretext_loss(&r, &y, &m).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn contrastive_ignores_unmasked_targets() {
        let r = rand_tensor(9, 5, 2);
        let y = rand_tensor(9, 5, 3);
        let m = MaskSpec::from_indices(9, vec![1, 4, 5, 8]).unwrap();
        let cfg = PretextConfig::default();
        let a = contrastive_pretext_loss(&r, &y, &m, &cfg, 11).unwrap();
        let mut y2 = y.clone();
        for t in [0usize, 2, 3, 6, 7] {
            for j in 0..5 {
                y2.data_mut()[t * 5 + j] = 42.0 * (j as f64 - 2.0);
            }
        }
        let b = contrastive_pretext_loss(&r, &y2, &m, &cfg, 11).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.0);
    }
}
