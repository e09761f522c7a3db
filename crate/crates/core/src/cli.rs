//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then the
//! `key = value` file given with `--config`, then individual flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{bench_data, parse_arms, parse_seeds, run_bench_with, BenchConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use crate::corpus::{generate_corpus, read_corpus, write_corpus, Corpus, Split};
use crate::evaluate::{decode, overfit_gap, weight_distance, wer, wer_vs_steps};
use crate::kv::KvMap;
use crate::pipeline::{continued_pretrain, finetune_ctc, pretrain, stable_distillation, StageReport};
use crate::{Error, FormatError, Result};

/// Exit code for malformed invocations and configuration.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for failures while running a stage.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "sdistill",
    version,
    about = "Continued pretraining with stable distillation on a synthetic two-domain benchmark",
    after_help = "Precedence: flags override the --config file, which overrides built-in defaults."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Key-value config file (`key = value` per line, `#` comments)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the stage (shuffling, masks, head initialization)
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct Hyper {
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Utterances per batch
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (train/dev/test splits) for one domain
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output corpus file
        #[arg(long)]
        out: PathBuf,
        /// Which domain of the benchmark configuration to generate
        #[arg(long, value_enum, default_value_t = Domain::Target)]
        domain: Domain,
    },
    /// Pretrain an encoder with the masked pretext task on an unlabeled corpus
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: Hyper,
        /// Training corpus (its train split is used, dev for model selection)
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue pretraining a pretrained checkpoint on target data
    Cp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: Hyper,
        /// Pretrained checkpoint
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Steps between saved snapshots (0 keeps only the final one)
        #[arg(long)]
        snapshot_every: Option<usize>,
        /// Tag the result as a baseline instead of a teacher
        #[arg(long)]
        baseline: bool,
    },
    /// Continue pretraining a fresh student toward a frozen teacher
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: Hyper,
        /// Pretrained checkpoint the student starts from
        #[arg(long)]
        init: PathBuf,
        /// Teacher checkpoint produced by `cp`
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Weight of the pretext term
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        snapshot_every: Option<usize>,
    },
    /// Fine-tune with CTC on a labeled corpus, keeping the best dev checkpoint
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: Hyper,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a split and report its error rate
    Eval {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Score snapshots by a frozen-encoder CTC probe each and report the curve
    Curve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: Hyper,
        /// Snapshot checkpoints, in step order
        #[arg(required = true)]
        snapshots: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Write line-delimited records here as well
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frobenius distance between two checkpoints, per tensor, group and total
    Wdist {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full benchmark and print the comparison table
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated arms: no_cp, vanilla_cp, vanilla_cp_long, sd
        #[arg(long)]
        arms: Option<String>,
        /// Seed list `1,2,3`, or a count `N` meaning seeds 1..=N
        #[arg(long)]
        seeds: Option<String>,
        /// Write line-delimited result records here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `argv` (program name first), runs one subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Reads a config file; every key must be one the benchmark configuration
/// knows.
pub fn read_config_file(path: &Path) -> Result<KvMap> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        Error::Format(FormatError::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    let m = KvMap::parse(&text)?;
    let known = BenchConfig::default().to_kv();
    if let Some((k, _)) = m.iter().find(|(k, _)| !known.contains(k)) {
        return Err(Error::Config(format!("unknown config key `{k}` in {}", path.display())));
    }
    Ok(m)
}

struct Resolved {
    cfg: BenchConfig,
    seed: u64,
}

fn resolve(common: &Common, flags: KvMap, default_seed: u64) -> std::result::Result<Resolved, Failure> {
    let mut m = match &common.config {
        Some(p) => read_config_file(p).map_err(|e| match e {
            Error::Config(_) => usage(e),
            other => Failure::Runtime(other),
        })?,
        None => KvMap::new(),
    };
    m.merge(&flags);
    let cfg = BenchConfig::from_kv(&m).map_err(usage)?;
    Ok(Resolved {
        cfg,
        seed: common.seed.unwrap_or(default_seed),
    })
}

fn hyper_flags(h: &Hyper, prefix: &str, snapshot_every: Option<usize>) -> KvMap {
    let mut m = KvMap::new();
    if let Some(e) = h.epochs {
        m.set(format!("{prefix}.epochs"), e);
    }
    if let Some(lr) = h.lr {
        m.set(format!("{prefix}.lr"), lr);
    }
    if let Some(b) = h.batch_size {
        m.set(format!("{prefix}.batch_size"), b);
    }
    if let Some(s) = snapshot_every {
        m.set(format!("{prefix}.snapshot_every"), s);
    }
    m
}

fn provenance(report: &StageReport) -> KvMap {
    let mut m = report.config.clone();
    m.set("config.digest", format!("{:016x}", report.config.digest()))
        .set("run.seed", report.seed);
    m
}

fn save_stage(ckpt: &Checkpoint, report: &StageReport, out: &Path) -> Result<()> {
    let mut c = ckpt.clone();
    c.meta.merge(&provenance(report));
    save_checkpoint(&c, out)?;
    report.write(&report_path(out))?;
    println!("{} step {} -> {}", c.stage, c.step, out.display());
    Ok(())
}

fn report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report");
    PathBuf::from(s)
}

fn snapshot_path(out: &Path, step: u64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.step{step}.sdck"))
}

fn save_snapshots(snaps: &[Checkpoint], report: &StageReport, out: &Path, every: usize) -> Result<()> {
    if every == 0 {
        return Ok(());
    }
    for s in snaps {
        let mut c = s.clone();
        c.meta.merge(&provenance(report));
        save_checkpoint(&c, &snapshot_path(out, s.step))?;
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<Corpus> {
    read_corpus(path)
}

fn write_records(records: &[KvMap], out: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_record());
        text.push('\n');
    }
    std::fs::write(out, text).map_err(|source| {
        Error::Format(FormatError::Io {
            path: out.to_path_buf(),
            source,
        })
    })
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData { common, out, domain } => {
            let r = resolve(&common, KvMap::new(), 0)?;
            let seed = common.seed.unwrap_or(r.cfg.data_seed);
            let (spec, counts) = match domain {
                Domain::Source => (&r.cfg.source, r.cfg.source_counts),
                Domain::Target => (&r.cfg.target, r.cfg.target_counts),
            };
            let c = generate_corpus(spec, counts, seed)?;
            write_corpus(&c, &out)?;
            println!(
                "domain {} seed {seed} spec {:016x}: {}/{}/{} utterances -> {}",
                c.domain,
                c.spec_digest,
                c.train.len(),
                c.dev.len(),
                c.test.len(),
                out.display()
            );
        }
        Command::Pretrain { common, hyper, data, out } => {
            let r = resolve(&common, hyper_flags(&hyper, "pretrain", None), 0)?;
            let seed = common.seed.unwrap_or(r.cfg.pretrain_seed);
            let corpus = load_data(&data)?;
            let o = pretrain(&r.cfg.model, &corpus, &r.cfg.pretrain, &r.cfg.pretext, seed)?;
            save_stage(&o.checkpoint, &o.report, &out)?;
        }
        Command::Cp {
            common,
            hyper,
            init,
            data,
            out,
            snapshot_every,
            baseline,
        } => {
            let r = resolve(&common, hyper_flags(&hyper, "cp", snapshot_every), 1)?;
            let init = load_checkpoint(&init)?;
            let corpus = load_data(&data)?;
            let tag = if baseline { Stage::BaselineCp } else { Stage::TeacherCp };
            let o = continued_pretrain(&init, &corpus, &r.cfg.cp, &r.cfg.pretext, r.seed, tag)?;
            save_snapshots(&o.snapshots, &o.report, &out, r.cfg.cp.snapshot_every)?;
            save_stage(&o.checkpoint, &o.report, &out)?;
        }
        Command::Distill {
            common,
            hyper,
            init,
            teacher,
            data,
            out,
            alpha,
            snapshot_every,
        } => {
            let mut flags = hyper_flags(&hyper, "cp", snapshot_every);
            if let Some(a) = alpha {
                flags.set("distill.alpha", a);
            }
            let r = resolve(&common, flags, 1)?;
            let init = load_checkpoint(&init)?;
            let teacher = load_checkpoint(&teacher)?;
            let corpus = load_data(&data)?;
            let o = stable_distillation(&init, &teacher, &corpus, &r.cfg.distill, &r.cfg.cp, r.seed)?;
            save_snapshots(&o.snapshots, &o.report, &out, r.cfg.cp.snapshot_every)?;
            save_stage(&o.checkpoint, &o.report, &out)?;
        }
        Command::Finetune {
            common,
            hyper,
            init,
            data,
            out,
        } => {
            let r = resolve(&common, hyper_flags(&hyper, "finetune", None), 1)?;
            let init = load_checkpoint(&init)?;
            let corpus = load_data(&data)?;
            let o = finetune_ctc(&init, &corpus, &r.cfg.finetune, r.seed)?;
            println!("best dev WER {:.2}%", 100.0 * o.best_dev_wer);
            save_stage(&o.checkpoint, &o.report, &out)?;
        }
        Command::Eval { common, init, data, split } => {
            resolve(&common, KvMap::new(), 0)?;
            let ckpt = load_checkpoint(&init)?;
            ckpt.require_stage(&[Stage::Finetuned])?;
            let corpus = load_data(&data)?;
            let split: Split = split.into();
            let utts = corpus.split(split);
            let hyps = decode(&ckpt.params, utts)?;
            let refs: Vec<Vec<u32>> = utts.iter().map(|u| u.labels.clone()).collect();
            let rep = wer(&refs, &hyps)?;
            println!("{} {}: {rep}", init.display(), split.as_str());
        }
        Command::Curve {
            common,
            hyper,
            snapshots,
            data,
            out,
        } => {
            let r = resolve(&common, hyper_flags(&hyper, "probe", None), 1)?;
            let corpus = load_data(&data)?;
            let snaps = snapshots.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
            let curve = wer_vs_steps(&snaps, &corpus, &r.cfg.probe, r.seed)?;
            let digest = format!("{:016x}", r.cfg.to_kv().digest());
            let mut records = Vec::new();
            for (p, path) in curve.iter().zip(&snapshots) {
                println!("step {:>6}  dev WER {:6.2}%  {}", p.step, 100.0 * p.dev_wer, path.display());
                let mut m = KvMap::new();
                m.set("kind", "curve")
                    .set("step", p.step)
                    .set("dev_wer", p.dev_wer)
                    .set("config.digest", &digest);
                records.push(m);
            }
            if let Some(gap) = overfit_gap(&curve) {
                println!("final minus best: {:.2} points", 100.0 * gap);
                let mut m = KvMap::new();
                m.set("kind", "gap").set("gap", gap).set("config.digest", &digest);
                records.push(m);
            }
            if let Some(out) = out {
                write_records(&records, &out)?;
            }
        }
        Command::Wdist { common, a, b, out } => {
            resolve(&common, KvMap::new(), 0)?;
            let rep = weight_distance(&load_checkpoint(&a)?, &load_checkpoint(&b)?)?;
            for (name, d) in rep.per_group() {
                println!("{name:<12} {d:.6}");
            }
            println!("{:<12} {:.6}", "total", rep.total);
            if let Some(out) = out {
                write_records(&rep.to_records(), &out)?;
            }
        }
        Command::Bench {
            common,
            arms,
            seeds,
            out,
        } => {
            let mut flags = KvMap::new();
            if let Some(a) = arms {
                parse_arms(&a).map_err(usage)?;
                flags.set("bench.arms", a);
            }
            if let Some(s) = seeds {
                flags.set("bench.seeds", seed_list(&s).map_err(usage)?);
            }
            let r = resolve(&common, flags, 0)?;
            let mut cfg = r.cfg;
            if let Some(s) = common.seed {
                cfg.pretrain_seed = s;
            }
            let start = std::time::Instant::now();
            let data = bench_data(&cfg)?;
            let pre = pretrain(&cfg.model, &data.source, &cfg.pretrain, &cfg.pretext, cfg.pretrain_seed)?;
            let result = run_bench_with(&cfg, &data, pre.checkpoint, start)?;
            print!("{}", result.summary_table());
            if let Some(out) = out {
                write_records(&result.to_records(), &out)?;
            }
        }
    }
    Ok(())
}

/// `"3"` means seeds 1, 2, 3; a comma list is taken literally.
fn seed_list(s: &str) -> Result<String> {
    if !s.contains(',') {
        let n: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad seed count `{s}`")))?;
        if n == 0 {
            return Err(Error::Config("seed count must be positive".into()));
        }
        return Ok((1..=n).map(|i| i.to_string()).collect::<Vec<_>>().join(","));
    }
    parse_seeds(s)?;
    Ok(s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_count_expands() {
        assert_eq!(seed_list("3").unwrap(), "1,2,3");
        assert_eq!(seed_list("4,9").unwrap(), "4,9");
        assert!(seed_list("0").is_err());
        assert!(seed_list("x").is_err());
    }

    #[test]
    fn help_and_bad_flags() {
        assert_eq!(run(["sdistill", "--help"]), 0);
        for sub in ["gen-data", "pretrain", "cp", "distill", "finetune", "eval", "curve", "wdist", "bench"] {
            assert_eq!(run(["sdistill", sub, "--help"]), 0, "{sub}");
        }
        assert_eq!(run(["sdistill", "gen-data", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["sdistill", "nope"]), EXIT_USAGE);
    }
}
