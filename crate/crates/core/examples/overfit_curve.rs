//! WER as a function of continued-pretraining steps: every snapshot gets
//! the same frozen-encoder CTC probe and is scored on the target dev split.
//!
//! `cargo run --release --example overfit_curve -- [pretrained.sdck]`

use sdistill::checkpoint::{load_checkpoint, Checkpoint, Stage};
use sdistill::corpus::{generate_corpus, Corpus, DomainSpec, SplitCounts};
use sdistill::evaluate::{overfit_gap, wer_vs_steps};
use sdistill::model::ModelConfig;
use sdistill::pipeline::{continued_pretrain, pretrain, TrainHyper};
use sdistill::pretext::PretextConfig;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let source = generate_corpus(&DomainSpec::default(), SplitCounts::new(400, 50, 50), 7)?;
    let target_spec = DomainSpec {
        domain_id: 1,
        shift: 2.0,
        ..DomainSpec::default()
    };
    let target = generate_corpus(&target_spec, SplitCounts::new(200, 50, 50), 7)?;
    let pcfg = PretextConfig::default();

    let mut pre = pretrained(std::env::args().nth(1), &source, &pcfg)?;
    let cp = TrainHyper {
        epochs: 40,
        snapshot_every: 50,
        ..TrainHyper::continued()
    };
    let run = continued_pretrain(&pre, &target, &cp, &pcfg, 1, Stage::BaselineCp)?;
    pre.step = 0;
    let snapshots: Vec<_> = std::iter::once(pre).chain(run.snapshots).collect();

    let curve = wer_vs_steps(&snapshots, &target, &TrainHyper::probe(), 1)?;
    for p in &curve {
        println!("cp step {:>4}  dev WER {:>6.2}%", p.step, 100.0 * p.dev_wer);
    }
    if let Some(gap) = overfit_gap(&curve) {
        println!("final minus best: {:.2} points", 100.0 * gap);
    }
    Ok(())
}

/// Loads `path` if given, otherwise pretrains like the `pretrain_encoder` example.
fn pretrained(path: Option<String>, source: &Corpus, pcfg: &PretextConfig) -> anyhow::Result<Checkpoint> {
    if let Some(p) = path {
        return Ok(load_checkpoint(std::path::Path::new(&p))?);
    }
    let hyper = TrainHyper {
        epochs: 24,
        ..TrainHyper::pretrain()
    };
    Ok(pretrain(&ModelConfig::default(), source, &hyper, pcfg, 11)?.checkpoint)
}
