//! One seed of the method at reduced scale: pretrain on the source,
//! continue pretraining a teacher on the target, distill a student from
//! the pretrained weights toward it, then fine-tune both with CTC.
//!
//! `cargo run --release --example stable_distillation -- [pretrained.sdck]`

use sdistill::checkpoint::{load_checkpoint, Checkpoint, Stage};
use sdistill::corpus::{generate_corpus, Corpus, DomainSpec, SplitCounts};
use sdistill::distill::DistillConfig;
use sdistill::evaluate::weight_distance;
use sdistill::model::ModelConfig;
use sdistill::pipeline::{continued_pretrain, finetune_ctc, pretrain, stable_distillation, wer_on, TrainHyper};
use sdistill::pretext::PretextConfig;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let source = generate_corpus(&DomainSpec::default(), SplitCounts::new(400, 50, 50), 7)?;
    let target_spec = DomainSpec {
        domain_id: 1,
        shift: 1.0,
        ..DomainSpec::default()
    };
    let target = generate_corpus(&target_spec, SplitCounts::new(200, 50, 50), 7)?;
    let pcfg = PretextConfig::default();
    let short = |h: TrainHyper, epochs| TrainHyper { epochs, ..h };

    let pre = pretrained(std::env::args().nth(1), &source, &pcfg)?;
    let cp = short(TrainHyper::continued(), 10);
    let teacher = continued_pretrain(&pre, &target, &cp, &pcfg, 1, Stage::TeacherCp)?.checkpoint;
    let vanilla = continued_pretrain(&pre, &target, &cp, &pcfg, 1, Stage::BaselineCp)?.checkpoint;

    let dcfg = DistillConfig::default();
    let sd = stable_distillation(&pre, &teacher, &target, &dcfg, &cp, 1)?;
    println!("alpha {}", dcfg.alpha);
    let (mse, pretext) = (sd.report.series("mse"), sd.report.series("pretext"));
    for (m, p) in mse.iter().zip(&pretext).step_by(25) {
        println!("step {:>4}  distill mse {:.5}  pretext {:.4}", m.0, m.1, p.1);
    }

    let ft = short(TrainHyper::finetune(), 30);
    for (name, enc) in [("no continued pretraining", &pre), ("vanilla", &vanilla), ("distilled", &sd.checkpoint)] {
        let tuned = finetune_ctc(enc, &target, &ft, 1)?.checkpoint;
        let wer = wer_on(&tuned.params, &target.test)?;
        let before = weight_distance(&pre, enc)?.total;
        let after = weight_distance(&pre, &tuned)?.total;
        println!("{name:<26} test WER {:>6.2}%  distance from pretrained {before:.3} -> {after:.3}", 100.0 * wer);
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
