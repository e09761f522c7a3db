//! End-to-end comparison of no continued pretraining, vanilla continued
//! pretraining and stable distillation on the synthetic two-domain task.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use log::info;

use crate::checkpoint::{Checkpoint, Stage};
use crate::corpus::{generate_corpus, Corpus, DomainSpec, SplitCounts};
use crate::distill::DistillConfig;
use crate::evaluate::{overfit_gap, weight_distance, wer_vs_steps, CurvePoint, WeightDistanceReport};
use crate::kv::KvMap;
use crate::model::ModelConfig;
use crate::pipeline::{continued_pretrain, finetune_ctc, pretrain, stable_distillation, wer_on, TrainHyper};
use crate::pretext::PretextConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Fine-tune the pretrained model directly.
    NoCp,
    /// Continued pretraining for the standard budget.
    VanillaCp,
    /// Continued pretraining for twice the standard budget.
    VanillaCpLong,
    /// Teacher continued pretraining followed by a distilled student.
    StableDistill,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::NoCp, Arm::VanillaCp, Arm::VanillaCpLong, Arm::StableDistill];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::NoCp => "no_cp",
            Arm::VanillaCp => "vanilla_cp",
            Arm::VanillaCpLong => "vanilla_cp_long",
            Arm::StableDistill => "sd",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}` (no_cp|vanilla_cp|vanilla_cp_long|sd)")))
    }
}

/// Parses a comma-separated arm list.
pub fn parse_arms(s: &str) -> Result<Vec<Arm>> {
    let mut arms: Vec<Arm> = s.split(',').map(|a| a.trim().parse()).collect::<Result<_>>()?;
    arms.sort();
    arms.dedup();
    Ok(arms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub pretext: PretextConfig,
    pub distill: DistillConfig,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub source_counts: SplitCounts,
    pub target_counts: SplitCounts,
    pub pretrain: TrainHyper,
    /// Teacher, student and vanilla continued-pretraining budget.
    pub cp: TrainHyper,
    /// Epochs of the long vanilla arm.
    pub long_cp_epochs: usize,
    pub finetune: TrainHyper,
    /// Frozen-encoder probe used to score curve snapshots.
    pub probe: TrainHyper,
    /// Epochs between curve snapshots; 0 skips the curves.
    pub curve_every_epochs: usize,
    /// Labeled source utterances for the cross-domain probe; 0 skips it.
    pub source_probe_train: usize,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub pretrain_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretext: PretextConfig::default(),
            distill: DistillConfig::default(),
            source: DomainSpec::default(),
            target: DomainSpec {
                domain_id: 1,
                shift: 1.0,
                ..DomainSpec::default()
            },
            source_counts: SplitCounts::new(2000, 100, 100),
            target_counts: SplitCounts::new(400, 100, 100),
            pretrain: TrainHyper::pretrain(),
            cp: TrainHyper::continued(),
            long_cp_epochs: 100,
            finetune: TrainHyper::finetune(),
            probe: TrainHyper::probe(),
            curve_every_epochs: 0,
            source_probe_train: 400,
            arms: Arm::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            data_seed: 7,
            pretrain_seed: 11,
        }
    }
}

fn counts_kv(m: &mut KvMap, prefix: &str, c: &SplitCounts) {
    m.set(format!("{prefix}.train"), c.train)
        .set(format!("{prefix}.dev"), c.dev)
        .set(format!("{prefix}.test"), c.test);
}

fn counts_from(m: &KvMap, prefix: &str, d: SplitCounts) -> Result<SplitCounts> {
    Ok(SplitCounts::new(
        m.get_or(&format!("{prefix}.train"), d.train)?,
        m.get_or(&format!("{prefix}.dev"), d.dev)?,
        m.get_or(&format!("{prefix}.test"), d.test)?,
    ))
}

fn domain_from(m: &KvMap, prefix: &str, base: &DomainSpec) -> Result<DomainSpec> {
    let mut k = base.to_kv();
    k.merge(&m.rebase(prefix, "domain"));
    DomainSpec::from_kv(&k)
}

impl BenchConfig {
    /// A larger gap between source and target, with curve snapshots, for
    /// studying how continued pretraining overfits.
    pub fn high_shift() -> Self {
        let d = Self::default();
        Self {
            target: DomainSpec {
                shift: 2.0,
                ..d.target.clone()
            },
            curve_every_epochs: 5,
            source_probe_train: 0,
            arms: vec![Arm::VanillaCp, Arm::StableDistill],
            ..d
        }
    }

    /// Flat key-value view; the inverse of [`BenchConfig::from_kv`].
    pub fn to_kv(&self) -> KvMap {
        let mut m = self.model.to_kv();
        m.merge(&self.pretext.to_kv());
        m.merge(&self.distill.to_kv());
        m.merge(&self.source.to_kv().rebase("domain", "source"));
        m.merge(&self.target.to_kv().rebase("domain", "target"));
        counts_kv(&mut m, "source.count", &self.source_counts);
        counts_kv(&mut m, "target.count", &self.target_counts);
        m.merge(&self.pretrain.to_kv("pretrain"));
        m.merge(&self.cp.to_kv("cp"));
        m.merge(&self.finetune.to_kv("finetune"));
        m.merge(&self.probe.to_kv("probe"));
        m.set("bench.long_cp_epochs", self.long_cp_epochs)
            .set("bench.curve_every_epochs", self.curve_every_epochs)
            .set("bench.source_probe_train", self.source_probe_train)
            .set(
                "bench.arms",
                self.arms.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(","),
            )
            .set(
                "bench.seeds",
                self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            )
            .set("bench.data_seed", self.data_seed)
            .set("bench.pretrain_seed", self.pretrain_seed);
        m
    }

    /// Applies the keys present in `m` over `self`.
    pub fn overridden_by(&self, m: &KvMap) -> Result<Self> {
        let mut model = self.model.to_kv();
        model.merge(m);
        let pretext = PretextConfig {
            mask_prob: m.get_or("pretext.mask_prob", self.pretext.mask_prob)?,
            span: m.get_or("pretext.span", self.pretext.span)?,
            num_negatives: m.get_or("pretext.num_negatives", self.pretext.num_negatives)?,
            temperature: m.get_or("pretext.temperature", self.pretext.temperature)?,
        };
        let distill = DistillConfig {
            alpha: m.get_or("distill.alpha", self.distill.alpha)?,
            norm: m.get_or("distill.norm", self.distill.norm)?,
            teacher_input: m.get_or("distill.teacher_input", self.distill.teacher_input)?,
            pretext: pretext.clone(),
        };
        let arms = match m.get("bench.arms") {
            Some(s) => parse_arms(s)?,
            None => self.arms.clone(),
        };
        let seeds = match m.get("bench.seeds") {
            Some(s) => parse_seeds(s)?,
            None => self.seeds.clone(),
        };
        let c = Self {
            model: ModelConfig::from_kv(&model)?,
            pretext,
            distill,
            source: domain_from(m, "source", &self.source)?,
            target: domain_from(m, "target", &self.target)?,
            source_counts: counts_from(m, "source.count", self.source_counts)?,
            target_counts: counts_from(m, "target.count", self.target_counts)?,
            pretrain: self.pretrain.overridden_by(m, "pretrain")?,
            cp: self.cp.overridden_by(m, "cp")?,
            long_cp_epochs: m.get_or("bench.long_cp_epochs", self.long_cp_epochs)?,
            finetune: self.finetune.overridden_by(m, "finetune")?,
            probe: self.probe.overridden_by(m, "probe")?,
            curve_every_epochs: m.get_or("bench.curve_every_epochs", self.curve_every_epochs)?,
            source_probe_train: m.get_or("bench.source_probe_train", self.source_probe_train)?,
            arms,
            seeds,
            data_seed: m.get_or("bench.data_seed", self.data_seed)?,
            pretrain_seed: m.get_or("bench.pretrain_seed", self.pretrain_seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        Self::default().overridden_by(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        self.source.validate()?;
        self.target.validate()?;
        if self.source.feature_dim != self.model.feature_dim || self.target.feature_dim != self.model.feature_dim {
            return Err(Error::Config("domain feature_dim must equal model feature_dim".into()));
        }
        if self.source.num_phonemes.max(self.target.num_phonemes) + 1 > self.model.vocab_size {
            return Err(Error::Config("vocab_size too small for the phoneme inventory".into()));
        }
        if self.seeds.is_empty() || self.arms.is_empty() {
            return Err(Error::Config("need at least one seed and one arm".into()));
        }
        if self.long_cp_epochs < self.cp.epochs {
            return Err(Error::Config("long_cp_epochs must be at least cp epochs".into()));
        }
        Ok(())
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed `{x}`")))
        })
        .collect()
}

/// Corpora used by the benchmark.
#[derive(Clone, Debug)]
pub struct BenchData {
    pub source: Corpus,
    pub target: Corpus,
}

pub fn bench_data(cfg: &BenchConfig) -> Result<BenchData> {
    Ok(BenchData {
        source: generate_corpus(&cfg.source, cfg.source_counts, cfg.data_seed)?,
        target: generate_corpus(&cfg.target, cfg.target_counts, cfg.data_seed.wrapping_add(1))?,
    })
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    /// Unsupervised target-domain steps before fine-tuning.
    pub cp_steps: u64,
    pub dev_wer: f64,
    pub test_wer: f64,
    /// Pretrained checkpoint vs fine-tuned model.
    pub distance: WeightDistanceReport,
    /// Pretrained checkpoint vs the encoder before fine-tuning.
    pub encoder_distance: f64,
    /// Source-domain test WER after fine-tuning on source labels.
    pub source_test_wer: Option<f64>,
    /// Seconds spent on the source-domain fine-tune.
    pub source_probe_secs: f64,
    pub finetuned: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    pub vanilla_curve: Vec<CurvePoint>,
    pub sd_curve: Vec<CurvePoint>,
    /// Per-step mse / pretext from the distillation run.
    pub distill_mse: Vec<(u64, f64)>,
    pub wall_time: f64,
}

impl SeedRun {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub pretrained: Checkpoint,
    pub runs: Vec<SeedRun>,
    pub wall_time: f64,
}

/// Encoders produced by the unsupervised stages for one seed.
#[derive(Clone, Debug)]
pub struct SeedEncoders {
    pub vanilla: Checkpoint,
    pub vanilla_long: Option<Checkpoint>,
    pub teacher: Checkpoint,
    pub student: Checkpoint,
    /// Pretrained checkpoint followed by vanilla snapshots up to the
    /// standard budget.
    pub vanilla_snapshots: Vec<Checkpoint>,
    pub sd_snapshots: Vec<Checkpoint>,
    pub distill_mse: Vec<(u64, f64)>,
}

/// Runs one vanilla continued pretraining (long enough for the long arm if
/// requested) and one distillation. The standard-budget vanilla model is
/// the snapshot of the same run at the standard budget, which is
/// bit-identical to a separate shorter run; it also serves as the teacher.
pub fn train_encoders(
    cfg: &BenchConfig,
    pretrained: &Checkpoint,
    target: &Corpus,
    seed: u64,
    long: bool,
) -> Result<SeedEncoders> {
    let per_epoch = target.train.len().div_ceil(cfg.cp.batch_size);
    let budget = (per_epoch * cfg.cp.epochs) as u64;
    let every = if cfg.curve_every_epochs > 0 {
        per_epoch * cfg.curve_every_epochs
    } else {
        0
    };
    let epochs = if long { cfg.long_cp_epochs } else { cfg.cp.epochs };
    // Snapshot at the standard budget is always needed.
    let snap = if every > 0 && budget % every as u64 == 0 {
        every
    } else {
        budget as usize
    };
    let hyper = TrainHyper {
        epochs,
        snapshot_every: snap,
        ..cfg.cp.clone()
    };
    let cp = continued_pretrain(pretrained, target, &hyper, &cfg.pretext, seed, Stage::BaselineCp)?;
    let at_budget = cp
        .snapshots
        .iter()
        .find(|s| s.step == budget)
        .cloned()
        .ok_or_else(|| Error::Config("missing snapshot at the standard budget".into()))?;
    let mut teacher = at_budget.clone();
    teacher.stage = Stage::TeacherCp;
    let vanilla_long = long.then(|| cp.checkpoint.clone());

    let sd_hyper = TrainHyper {
        snapshot_every: every,
        ..cfg.cp.clone()
    };
    let sd = stable_distillation(pretrained, &teacher, target, &cfg.distill, &sd_hyper, seed)?;

    let mut vanilla_snapshots = Vec::new();
    let mut sd_snapshots = Vec::new();
    if every > 0 {
        // Curves count continued-pretraining steps, so the start is step 0.
        let mut origin = pretrained.clone();
        origin.step = 0;
        vanilla_snapshots.push(origin.clone());
        vanilla_snapshots.extend(cp.snapshots.iter().filter(|s| s.step <= budget).cloned());
        sd_snapshots.push(origin);
        sd_snapshots.extend(sd.snapshots.iter().cloned());
    }
    Ok(SeedEncoders {
        vanilla: at_budget,
        vanilla_long,
        teacher,
        student: sd.checkpoint,
        vanilla_snapshots,
        sd_snapshots,
        distill_mse: sd.report.series("mse"),
    })
}

fn score_arm(
    cfg: &BenchConfig,
    data: &BenchData,
    pretrained: &Checkpoint,
    encoder: &Checkpoint,
    arm: Arm,
    seed: u64,
) -> Result<ArmResult> {
    let ft = finetune_ctc(encoder, &data.target, &cfg.finetune, seed)?;
    let test_wer = wer_on(&ft.checkpoint.params, &data.target.test)?;
    let distance = weight_distance(pretrained, &ft.checkpoint)?;
    let probe_start = Instant::now();
    let source_test_wer = if cfg.source_probe_train > 0 && arm != Arm::VanillaCpLong {
        let src = data.source.with_train_prefix(cfg.source_probe_train);
        let ft_src = finetune_ctc(encoder, &src, &cfg.finetune, seed)?;
        Some(wer_on(&ft_src.checkpoint.params, &src.test)?)
    } else {
        None
    };
    info!(
        "seed {seed} arm {arm}: dev {:.4} test {:.4} distance {:.4}",
        ft.best_dev_wer, test_wer, distance.total
    );
    Ok(ArmResult {
        arm,
        seed,
        cp_steps: encoder.step * (encoder.stage != Stage::Pretrained) as u64,
        dev_wer: ft.best_dev_wer,
        test_wer,
        distance,
        encoder_distance: weight_distance(pretrained, encoder)?.total,
        source_test_wer,
        source_probe_secs: probe_start.elapsed().as_secs_f64(),
        finetuned: ft.checkpoint,
    })
}

/// Runs every configured arm for one seed.
pub fn run_seed(cfg: &BenchConfig, data: &BenchData, pretrained: &Checkpoint, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let wants = |a| cfg.arms.contains(&a);
    let needs_cp = wants(Arm::VanillaCp) || wants(Arm::VanillaCpLong) || wants(Arm::StableDistill);
    let enc = if needs_cp {
        Some(train_encoders(cfg, pretrained, &data.target, seed, wants(Arm::VanillaCpLong))?)
    } else {
        None
    };
    let mut arms = Vec::new();
    for &arm in &cfg.arms {
        let encoder = match (arm, &enc) {
            (Arm::NoCp, _) => pretrained,
            (Arm::VanillaCp, Some(e)) => &e.vanilla,
            (Arm::VanillaCpLong, Some(e)) => e.vanilla_long.as_ref().expect("long run requested"),
            (Arm::StableDistill, Some(e)) => &e.student,
            _ => unreachable!("encoders trained whenever a CP arm is requested"),
        };
        arms.push(score_arm(cfg, data, pretrained, encoder, arm, seed)?);
    }
    let (mut vanilla_curve, mut sd_curve, mut distill_mse) = (Vec::new(), Vec::new(), Vec::new());
    if let Some(e) = enc {
        if cfg.curve_every_epochs > 0 {
            vanilla_curve = wer_vs_steps(&e.vanilla_snapshots, &data.target, &cfg.probe, seed)?;
            sd_curve = wer_vs_steps(&e.sd_snapshots, &data.target, &cfg.probe, seed)?;
        }
        distill_mse = e.distill_mse;
    }
    Ok(SeedRun {
        seed,
        arms,
        vanilla_curve,
        sd_curve,
        distill_mse,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Pretrains once on the source domain, then runs every seed.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let start = Instant::now();
    let data = bench_data(cfg)?;
    let pre = pretrain(&cfg.model, &data.source, &cfg.pretrain, &cfg.pretext, cfg.pretrain_seed)?;
    info!("pretraining done in {:.1}s", pre.report.wall_time);
    run_bench_with(cfg, &data, pre.checkpoint, start)
}

/// [`run_bench`] from an existing pretrained checkpoint.
pub fn run_bench_with(cfg: &BenchConfig, data: &BenchData, pretrained: Checkpoint, start: Instant) -> Result<BenchResult> {
    pretrained.require_stage(&[Stage::Pretrained])?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        runs.push(run_seed(cfg, data, &pretrained, seed)?);
    }
    Ok(BenchResult {
        config: cfg.clone(),
        pretrained,
        runs,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl BenchResult {
    pub fn arm_results(&self, arm: Arm) -> impl Iterator<Item = &ArmResult> {
        self.runs.iter().filter_map(move |r| r.arm(arm))
    }

    pub fn mean_test_wer(&self, arm: Arm) -> Option<f64> {
        mean(self.arm_results(arm).map(|a| a.test_wer))
    }

    pub fn mean_dev_wer(&self, arm: Arm) -> Option<f64> {
        mean(self.arm_results(arm).map(|a| a.dev_wer))
    }

    pub fn mean_distance(&self, arm: Arm) -> Option<f64> {
        mean(self.arm_results(arm).map(|a| a.distance.total))
    }

    pub fn mean_source_test_wer(&self, arm: Arm) -> Option<f64> {
        mean(self.arm_results(arm).filter_map(|a| a.source_test_wer))
    }

    /// Seed-mean per-group distance of an arm.
    pub fn mean_encoder_distance(&self, arm: Arm) -> Option<f64> {
        mean(self.arm_results(arm).map(|a| a.encoder_distance))
    }

    /// Wall time minus the source-domain fine-tunes, which only serve the
    /// cross-domain comparison.
    pub fn target_wall_time(&self) -> f64 {
        let probes: f64 = self.runs.iter().flat_map(|r| &r.arms).map(|a| a.source_probe_secs).sum();
        self.wall_time - probes
    }

    pub fn mean_group_distance(&self, arm: Arm) -> Vec<(String, f64)> {
        let per: Vec<Vec<(String, f64)>> = self.arm_results(arm).map(|a| a.distance.per_group()).collect();
        let Some(first) = per.first() else { return Vec::new() };
        first
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), per.iter().map(|g| g[i].1).sum::<f64>() / per.len() as f64))
            .collect()
    }

    /// Seed-mean of `WER(final) − min WER` for the vanilla and SD curves.
    pub fn mean_curve_gaps(&self) -> Option<(f64, f64)> {
        let v = mean(self.runs.iter().filter_map(|r| overfit_gap(&r.vanilla_curve)))?;
        let s = mean(self.runs.iter().filter_map(|r| overfit_gap(&r.sd_curve)))?;
        Some((v, s))
    }

    /// Human-readable table: one row per arm and seed, then seed means.
    pub fn summary_table(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(
            t,
            "{:<16} {:>6} {:>9} {:>9} {:>9} {:>10} {:>10} {:>10}",
            "arm", "seed", "cp_steps", "dev_wer", "test_wer", "enc_dist", "w_dist", "src_wer"
        );
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        for r in &self.runs {
            for a in &r.arms {
                let _ = writeln!(
                    t,
                    "{:<16} {:>6} {:>9} {:>9} {:>9} {:>10.4} {:>10.4} {:>10}",
                    a.arm.as_str(),
                    a.seed,
                    a.cp_steps,
                    pct(a.dev_wer),
                    pct(a.test_wer),
                    a.encoder_distance,
                    a.distance.total,
                    a.source_test_wer.map(pct).unwrap_or_else(|| "-".into())
                );
            }
        }
        for &arm in &self.config.arms {
            let (Some(d), Some(te), Some(e), Some(w)) = (
                self.mean_dev_wer(arm),
                self.mean_test_wer(arm),
                self.mean_encoder_distance(arm),
                self.mean_distance(arm),
            ) else {
                continue;
            };
            let _ = writeln!(
                t,
                "{:<16} {:>6} {:>9} {:>9} {:>9} {:>10.4} {:>10.4} {:>10}",
                arm.as_str(),
                "mean",
                "",
                pct(d),
                pct(te),
                e,
                w,
                self.mean_source_test_wer(arm).map(pct).unwrap_or_else(|| "-".into())
            );
        }
        if let Some((v, s)) = self.mean_curve_gaps() {
            let _ = writeln!(t, "curve gap (final - min, WER points): vanilla {} sd {}", pct(v), pct(s));
        }
        t
    }

    /// Line-delimited records: one per arm and seed, plus curve points.
    pub fn to_records(&self) -> Vec<KvMap> {
        let mut out = Vec::new();
        let digest = format!("{:016x}", self.config.to_kv().digest());
        for r in &self.runs {
            for a in &r.arms {
                let mut m = KvMap::new();
                m.set("kind", "arm")
                    .set("arm", a.arm)
                    .set("seed", a.seed)
                    .set("cp_steps", a.cp_steps)
                    .set("dev_wer", a.dev_wer)
                    .set("test_wer", a.test_wer)
                    .set("weight_distance", a.distance.total)
                    .set("encoder_distance", a.encoder_distance)
                    .set("config.digest", &digest);
                if let Some(s) = a.source_test_wer {
                    m.set("source_test_wer", s);
                }
                out.push(m);
            }
            for (name, curve) in [("vanilla_cp", &r.vanilla_curve), ("sd", &r.sd_curve)] {
                for p in curve {
                    let mut m = KvMap::new();
                    m.set("kind", "curve")
                        .set("arm", name)
                        .set("seed", r.seed)
                        .set("step", p.step)
                        .set("dev_wer", p.dev_wer)
                        .set("config.digest", &digest);
                    out.push(m);
                }
            }
        }
        out
    }
}
