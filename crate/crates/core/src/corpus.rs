//! Synthetic two-domain "speech" corpora.
//!
//! Each domain renders a phoneme sequence as feature frames
//! `x = A·prototype + b + N(0, σ²I)`, holding every phoneme for a sampled
//! number of frames. Prototypes are shared by all domains; the transform
//! `A = I + s·G`, the bias `b = s·β`, and the noise level are per-domain,
//! so the shift dial `s` moves the target away from the source.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};

use crate::binio::{read_exact, Reader, Writer};
use crate::kv::{fnv1a, KvMap};
use crate::tensor::Tensor;
use crate::{Error, FormatError, Result, Segment};

pub const CORPUS_MAGIC: [u8; 4] = *b"SDCP";
pub const CORPUS_VERSION: u8 = 1;
const MAX_CONDITION: f64 = 50.0;
/// Relative noise increase per unit of shift.
const NOISE_PER_SHIFT: f64 = 0.25;

/// Generating parameters of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub feature_dim: usize,
    pub num_phonemes: usize,
    /// Distance from the reference domain; 0 gives `A = I`, `b = 0` and
    /// the base noise level.
    pub shift: f64,
    /// Frame noise at zero shift; see [`DomainSpec::effective_noise_std`].
    pub noise_std: f64,
    pub dur_min: usize,
    pub dur_max: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Seed of the phoneme prototypes; keep equal across domains.
    pub prototype_seed: u64,
    /// Seed of the domain transform direction `G`, `β` and the prior.
    pub transform_seed: u64,
    /// Zero gives a uniform phoneme prior; larger values skew it.
    pub prior_skew: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            domain_id: 0,
            feature_dim: 16,
            num_phonemes: 12,
            shift: 0.0,
            noise_std: 0.3,
            dur_min: 4,
            dur_max: 8,
            len_min: 8,
            len_max: 24,
            prototype_seed: 1,
            transform_seed: 2,
            prior_skew: 0.0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 || self.num_phonemes == 0 {
            return bad("feature_dim and num_phonemes must be positive");
        }
        if self.noise_std <= 0.0 {
            return bad("noise_std must be positive");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("need 1 <= dur_min <= dur_max");
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return bad("need 1 <= len_min <= len_max");
        }
        if self.shift < 0.0 || self.prior_skew < 0.0 {
            return bad("shift and prior_skew must be non-negative");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("domain.id", self.domain_id)
            .set("domain.feature_dim", self.feature_dim)
            .set("domain.num_phonemes", self.num_phonemes)
            .set("domain.shift", self.shift)
            .set("domain.noise_std", self.noise_std)
            .set("domain.dur_min", self.dur_min)
            .set("domain.dur_max", self.dur_max)
            .set("domain.len_min", self.len_min)
            .set("domain.len_max", self.len_max)
            .set("domain.prototype_seed", self.prototype_seed)
            .set("domain.transform_seed", self.transform_seed)
            .set("domain.prior_skew", self.prior_skew);
        m
    }

    /// Reads `domain.*` keys over the defaults.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            domain_id: m.get_or("domain.id", d.domain_id)?,
            feature_dim: m.get_or("domain.feature_dim", d.feature_dim)?,
            num_phonemes: m.get_or("domain.num_phonemes", d.num_phonemes)?,
            shift: m.get_or("domain.shift", d.shift)?,
            noise_std: m.get_or("domain.noise_std", d.noise_std)?,
            dur_min: m.get_or("domain.dur_min", d.dur_min)?,
            dur_max: m.get_or("domain.dur_max", d.dur_max)?,
            len_min: m.get_or("domain.len_min", d.len_min)?,
            len_max: m.get_or("domain.len_max", d.len_max)?,
            prototype_seed: m.get_or("domain.prototype_seed", d.prototype_seed)?,
            transform_seed: m.get_or("domain.transform_seed", d.transform_seed)?,
            prior_skew: m.get_or("domain.prior_skew", d.prior_skew)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn digest(&self) -> u64 {
        self.to_kv().digest()
    }

    /// Realizes prototypes, transform, bias, and prior.
    /// Noise std of rendered frames: grows linearly with the shift.
    pub fn effective_noise_std(&self) -> f64 {
        self.noise_std * (1.0 + NOISE_PER_SHIFT * self.shift)
    }

    pub fn materialize(&self) -> Result<DomainModel> {
        self.validate()?;
        let (d, p) = (self.feature_dim, self.num_phonemes);
        let std = Normal::new(0.0, 1.0).expect("unit normal");

        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let mut prototypes = Vec::with_capacity(p * d);
        for _ in 0..p {
            let v: Vec<f64> = (0..d).map(|_| std.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            prototypes.extend(v.iter().map(|x| x / norm));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.transform_seed);
        let g_scale = 1.0 / (d as f64).sqrt();
        let transform = loop {
            let g = DMatrix::from_fn(d, d, |_, _| std.sample(&mut rng) * g_scale);
            let a = DMatrix::identity(d, d) + g * self.shift;
            let sv = a.singular_values();
            let (mx, mn) = (sv.max(), sv.min());
            if mn > 0.0 && mx / mn < MAX_CONDITION {
                break a;
            }
        };
        let bias_dir = DVector::from_fn(d, |_, _| std.sample(&mut rng) * 0.5);
        let bias = bias_dir * self.shift;
        let weights: Vec<f64> = (0..p)
            .map(|_| (self.prior_skew * std.sample(&mut rng)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let prior = weights.iter().map(|w| w / total).collect();

        Ok(DomainModel {
            spec: self.clone(),
            prototypes,
            transform,
            bias,
            prior,
        })
    }
}

/// A domain with its random quantities realized.
#[derive(Clone, Debug)]
pub struct DomainModel {
    pub spec: DomainSpec,
    /// `P×d`, row-major unit vectors.
    pub prototypes: Vec<f64>,
    pub transform: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub prior: Vec<f64>,
}

impl DomainModel {
    /// Mean frame of 0-based phoneme `ph` (its label id is `ph + 1`).
    pub fn phoneme_mean(&self, ph: usize) -> DVector<f64> {
        let d = self.spec.feature_dim;
        let proto = DVector::from_column_slice(&self.prototypes[ph * d..(ph + 1) * d]);
        &self.transform * proto + &self.bias
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.transform.singular_values();
        sv.max() / sv.min()
    }

    /// Renders one utterance from its own seed.
    pub fn utterance(&self, id: u64, seed: u64) -> Utterance {
        self.aligned_utterance(id, seed).0
    }

    /// [`DomainModel::utterance`] plus the phoneme label of every frame.
    pub fn aligned_utterance(&self, id: u64, seed: u64) -> (Utterance, Vec<u32>) {
        let s = &self.spec;
        let d = s.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, s.effective_noise_std()).expect("positive std");
        let prior = WeightedIndex::new(&self.prior).expect("valid prior");
        let len = rng.gen_range(s.len_min..=s.len_max);
        let phones: Vec<usize> = (0..len).map(|_| prior.sample(&mut rng)).collect();
        let means: Vec<DVector<f64>> = (0..s.num_phonemes).map(|p| self.phoneme_mean(p)).collect();
        let mut frames = Vec::new();
        let mut align = Vec::new();
        for &ph in &phones {
            let dur = rng.gen_range(s.dur_min..=s.dur_max);
            for _ in 0..dur {
                frames.extend((0..d).map(|j| (means[ph][j] + noise.sample(&mut rng)) as f32));
                align.push(ph as u32 + 1);
            }
        }
        let t = frames.len() / d;
        let utt = Utterance {
            id,
            domain: s.domain_id,
            frames: Tensor::from_vec([t, d], frames),
            labels: phones.iter().map(|&p| p as u32 + 1).collect(),
        };
        (utt, align)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub domain: u32,
    /// `T×d` feature frames.
    pub frames: Tensor<f32>,
    /// Phoneme ids in `[1, P]`; 0 is reserved for the CTC blank.
    pub labels: Vec<u32>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.dims2().0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, dev: usize, test: usize) -> Self {
        Self { train, dev, test }
    }

    fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

/// All splits of one generated domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub domain: u32,
    pub seed: u64,
    pub spec_digest: u64,
    pub feature_dim: usize,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Utterance> {
        match s {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy whose training split keeps only its first `n` utterances.
    pub fn with_train_prefix(&self, n: usize) -> Corpus {
        let mut c = self.clone();
        c.train.truncate(n);
        c
    }
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-utterance seed; independent of generation order.
pub fn utterance_seed(root: u64, domain: u32, id: u64) -> u64 {
    mix64(mix64(root ^ mix64(domain as u64)) ^ id)
}

/// Generates every split. Utterance ids run consecutively across
/// train, dev and test, so splits are disjoint by id.
pub fn generate_corpus(spec: &DomainSpec, counts: SplitCounts, seed: u64) -> Result<Corpus> {
    if counts.train == 0 || counts.dev == 0 || counts.test == 0 {
        return Err(Error::Config("every split needs at least one utterance".into()));
    }
    let model = spec.materialize()?;
    let mut corpus = Corpus {
        domain: spec.domain_id,
        seed,
        spec_digest: spec.digest(),
        feature_dim: spec.feature_dim,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let mut next_id = 0u64;
    for split in Split::ALL {
        let n = counts.get(split);
        let utts = (next_id..next_id + n as u64)
            .map(|id| model.utterance(id, utterance_seed(seed, spec.domain_id, id)))
            .collect();
        *corpus.split_mut(split) = utts;
        next_id += n as u64;
    }
    Ok(corpus)
}

/// Mean over feature dimensions of the gap between per-dimension means,
/// using the first `max_frames` training frames of each corpus.
pub fn mean_gap(a: &Corpus, b: &Corpus, max_frames: usize) -> f64 {
    let means = |c: &Corpus| {
        let d = c.feature_dim;
        let mut sum = vec![0.0f64; d];
        let mut n = 0usize;
        'outer: for u in &c.train {
            for t in 0..u.num_frames() {
                if n == max_frames {
                    break 'outer;
                }
                for (s, &x) in sum.iter_mut().zip(u.frames.row(t)) {
                    *s += x as f64;
                }
                n += 1;
            }
        }
        sum.iter().map(|s| s / n.max(1) as f64).collect::<Vec<_>>()
    };
    let (ma, mb) = (means(a), means(b));
    ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ma.len() as f64
}

/// Accuracy of a least-squares linear classifier (one-hot targets, bias
/// column) fit on `train` frames and scored on `test`.
pub fn linear_probe_accuracy(
    train: &[(Vec<f32>, u32)],
    test: &[(Vec<f32>, u32)],
    num_classes: usize,
) -> f64 {
    let d = train[0].0.len() + 1;
    let design = |rows: &[(Vec<f32>, u32)]| {
        DMatrix::from_fn(rows.len(), d, |i, j| if j + 1 == d { 1.0 } else { rows[i].0[j] as f64 })
    };
    let x = design(train);
    let y = DMatrix::from_fn(train.len(), num_classes, |i, k| {
        if train[i].1 as usize == k {
            1.0
        } else {
            0.0
        }
    });
    let xtx = x.transpose() * &x + DMatrix::identity(d, d) * 1e-6;
    let w = xtx
        .lu()
        .solve(&(x.transpose() * y))
        .expect("regularized normal equations are solvable");
    let pred = design(test) * w;
    let correct = (0..test.len())
        .filter(|&i| pred.row(i).transpose().argmax().0 == test[i].1 as usize)
        .count();
    correct as f64 / test.len() as f64
}

/// Renders frames with their per-frame phoneme class (0-based), for probing.
pub fn frame_labels(model: &DomainModel, count: usize, seed: u64) -> Vec<(Vec<f32>, u32)> {
    let s = &model.spec;
    let d = s.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, s.effective_noise_std()).expect("positive std");
    let prior = WeightedIndex::new(&model.prior).expect("valid prior");
    (0..count)
        .map(|_| {
            let ph = prior.sample(&mut rng);
            let m = model.phoneme_mean(ph);
            let x = (0..d).map(|j| (m[j] + noise.sample(&mut rng)) as f32).collect();
            (x, ph as u32)
        })
        .collect()
}

/// Padded minibatch; rows beyond each sequence's length are zero frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into the split the batch was drawn from.
    pub indices: Vec<usize>,
    /// `B×T_pad×d` frames.
    pub frames: Tensor<f32>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Vec<u32>>,
}

impl Batch {
    /// Valid frames of every sequence stacked into `N×d`, with segments.
    pub fn packed(&self) -> (Tensor<f32>, Vec<Segment>) {
        let (t_pad, d) = (self.frames.shape()[1], self.frames.shape()[2]);
        let mut data = Vec::with_capacity(self.lengths.iter().sum::<usize>() * d);
        let mut segs = Vec::with_capacity(self.lengths.len());
        let mut start = 0;
        for (b, &len) in self.lengths.iter().enumerate() {
            let off = b * t_pad * d;
            data.extend_from_slice(&self.frames.data()[off..off + len * d]);
            segs.push(Segment::new(start, len));
            start += len;
        }
        (Tensor::from_vec([start, d], data), segs)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn pad_batch(utts: &[Utterance], indices: Vec<usize>) -> Batch {
    let d = utts[indices[0]].frames.dims2().1;
    let t_pad = indices.iter().map(|&i| utts[i].num_frames()).max().unwrap_or(1);
    let mut data = vec![0.0f32; indices.len() * t_pad * d];
    for (b, &i) in indices.iter().enumerate() {
        let f = utts[i].frames.data();
        data[b * t_pad * d..b * t_pad * d + f.len()].copy_from_slice(f);
    }
    Batch {
        lengths: indices.iter().map(|&i| utts[i].num_frames()).collect(),
        labels: indices.iter().map(|&i| utts[i].labels.clone()).collect(),
        frames: Tensor::from_vec([indices.len(), t_pad, d], data),
        indices,
    }
}

/// Length-bucketed batches; order is a function of `(seed, epoch)` only.
pub fn make_batches(utts: &[Utterance], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(epoch.wrapping_add(1))));
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut rng);
    // Stable sort keeps the shuffled order among equal lengths.
    order.sort_by_key(|&i| utts[i].num_frames());
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|c| pad_batch(utts, c.to_vec()))
        .collect();
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Fixed-order batches for evaluation.
pub fn eval_batches(utts: &[Utterance], batch_size: usize) -> Vec<Batch> {
    let idx: Vec<usize> = (0..utts.len()).collect();
    idx.chunks(batch_size.max(1)).map(|c| pad_batch(utts, c.to_vec())).collect()
}

pub fn write_corpus(c: &Corpus, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(&CORPUS_MAGIC);
    w.u8(CORPUS_VERSION);
    w.u64(c.spec_digest);
    w.u64(c.seed);
    w.u32(c.domain);
    w.u32(c.feature_dim as u32);
    for split in Split::ALL {
        let utts = c.split(split);
        w.u8(split.tag());
        w.u32(utts.len() as u32);
        for u in utts {
            let mut r = Writer::new();
            r.u64(u.id);
            r.u32(u.domain);
            r.u32(u.num_frames() as u32);
            r.u32(u.labels.len() as u32);
            for &l in &u.labels {
                r.u32(l);
            }
            for &x in u.frames.data() {
                r.f32(x);
            }
            let rec = r.into_inner();
            w.u32(rec.len() as u32);
            w.bytes(&rec);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&w.into_inner()).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Format(FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| io_err(path, e))?;
    Ok(decode_corpus(&buf)?)
}

pub fn decode_corpus(buf: &[u8]) -> std::result::Result<Corpus, FormatError> {
    let mut r = Reader::new(buf);
    let magic = read_exact(&mut r, 4, "magic")?;
    if magic != CORPUS_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CORPUS_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = r.u8("version")?;
    if version != CORPUS_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let spec_digest = r.u64("spec digest")?;
    let seed = r.u64("seed")?;
    let domain = r.u32("domain")?;
    let feature_dim = r.u32("feature dim")? as usize;
    if feature_dim == 0 {
        return Err(FormatError::Malformed("zero feature dimension".into()));
    }
    let mut c = Corpus {
        domain,
        seed,
        spec_digest,
        feature_dim,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        let tag = r.u8("split tag")?;
        if tag != split.tag() {
            return Err(FormatError::Malformed(format!("unexpected split tag {tag}")));
        }
        let n = r.u32("utterance count")? as usize;
        let mut utts = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32("record length")? as usize;
            let rec = read_exact(&mut r, len, "utterance record")?;
            let mut u = Reader::new(rec);
            let id = u.u64("utterance id")?;
            let dom = u.u32("utterance domain")?;
            let t = u.u32("frame count")? as usize;
            let l = u.u32("label count")? as usize;
            if 20 + 4 * l + 4 * t * feature_dim != len || t == 0 {
                return Err(FormatError::Malformed(format!("utterance {id}: inconsistent record length")));
            }
            let labels = (0..l).map(|_| u.u32("label")).collect::<std::result::Result<_, _>>()?;
            let frames = (0..t * feature_dim)
                .map(|_| u.f32("frame"))
                .collect::<std::result::Result<_, _>>()?;
            utts.push(Utterance {
                id,
                domain: dom,
                frames: Tensor::from_vec([t, feature_dim], frames),
                labels,
            });
        }
        *c.split_mut(split) = utts;
    }
    if !r.is_empty() {
        return Err(FormatError::Malformed("trailing bytes after corpus".into()));
    }
    Ok(c)
}

/// Digest used to name a generated dataset in reports.
pub fn corpus_digest(c: &Corpus) -> u64 {
    let mut h = Vec::new();
    h.extend_from_slice(&c.spec_digest.to_le_bytes());
    h.extend_from_slice(&c.seed.to_le_bytes());
    h.extend_from_slice(&(c.len() as u64).to_le_bytes());
    fnv1a(&h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Corpus {
        generate_corpus(&DomainSpec::default(), SplitCounts::new(20, 5, 5), 3).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(), small());
        let other = generate_corpus(&DomainSpec::default(), SplitCounts::new(20, 5, 5), 4).unwrap();
        assert_ne!(small(), other);
    }

    #[test]
    fn utterances_respect_length_and_duration_bounds() {
        let spec = DomainSpec::default();
        for u in &small().train {
            assert!((spec.len_min..=spec.len_max).contains(&u.labels.len()));
            let t = u.num_frames();
            assert!(t >= spec.dur_min * u.labels.len() && t <= spec.dur_max * u.labels.len());
            assert!(u.labels.iter().all(|&l| l >= 1 && l as usize <= spec.num_phonemes));
        }
    }

    #[test]
    fn shift_raises_frame_noise() {
        let residual_std = |shift: f64| {
            let spec = DomainSpec {
                shift,
                ..DomainSpec::default()
            };
            let model = spec.materialize().unwrap();
            let (mut sum, mut n) = (0.0, 0usize);
            for id in 0..40 {
                let (u, align) = model.aligned_utterance(id, 100 + id);
                let d = spec.feature_dim;
                for (t, &ph) in align.iter().enumerate() {
                    let mean = model.phoneme_mean(ph as usize - 1);
                    for j in 0..d {
                        sum += (u.frames.data()[t * d + j] as f64 - mean[j]).powi(2);
                        n += 1;
                    }
                }
            }
            (sum / n as f64).sqrt()
        };
        let (calm, shifted) = (residual_std(0.0), residual_std(2.0));
        assert!((calm - 0.3).abs() < 0.01, "{calm}");
        assert!((shifted - 0.45).abs() < 0.015, "{shifted}");
    }

    #[test]
    fn noiseless_frames_of_a_phoneme_coincide() {
        let spec = DomainSpec {
            noise_std: 1e-300,
            dur_min: 2,
            dur_max: 2,
            ..DomainSpec::default()
        };
        let c = generate_corpus(&spec, SplitCounts::new(3, 1, 1), 0).unwrap();
        let mut seen: std::collections::HashMap<u32, Vec<f32>> = Default::default();
        for u in &c.train {
            for (i, &l) in u.labels.iter().enumerate() {
                for t in [2 * i, 2 * i + 1] {
                    let row = u.frames.row(t).to_vec();
                    let first = seen.entry(l).or_insert_with(|| row.clone());
                    assert_eq!(first, &row);
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let c = small();
        let mut ids: Vec<u64> = Split::ALL.iter().flat_map(|&s| c.split(s).iter().map(|u| u.id)).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn batches_cover_each_utterance_once_and_repeat_per_epoch() {
        let c = small();
        let a = make_batches(&c.train, 6, 9, 0).unwrap();
        assert_eq!(a, make_batches(&c.train, 6, 9, 0).unwrap());
        assert_ne!(a, make_batches(&c.train, 6, 9, 1).unwrap());
        let mut seen: Vec<usize> = a.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        for b in &a {
            let (packed, segs) = b.packed();
            assert_eq!(packed.dims2().0, b.lengths.iter().sum::<usize>());
            for (s, &i) in segs.iter().zip(&b.indices) {
                assert_eq!(&packed.data()[s.start * 16..s.end() * 16], c.train[i].frames.data());
            }
        }
    }

    #[test]
    fn condition_number_bounded() {
        for shift in [0.0, 0.5, 1.0, 2.0] {
            let m = DomainSpec {
                shift,
                ..DomainSpec::default()
            }
            .materialize()
            .unwrap();
            assert!(m.condition_number() < MAX_CONDITION);
        }
    }
}
