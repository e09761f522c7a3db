//! Masked contrastive pretraining of an encoder on the source domain.
//!
//! `cargo run --release --example pretrain_encoder -- [epochs] [out.sdck]`

use sdistill::checkpoint::save_checkpoint;
use sdistill::corpus::{generate_corpus, DomainSpec, SplitCounts};
use sdistill::model::ModelConfig;
use sdistill::pipeline::{pretrain, TrainHyper};
use sdistill::pretext::PretextConfig;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(24);
    let out = args.next();

    let source = generate_corpus(&DomainSpec::default(), SplitCounts::new(400, 50, 50), 7)?;
    let hyper = TrainHyper {
        epochs,
        ..TrainHyper::pretrain()
    };
    let run = pretrain(&ModelConfig::default(), &source, &hyper, &PretextConfig::default(), 11)?;

    for (step, dev) in run.report.series("dev_pretext") {
        println!("step {step:>5}  dev pretext {dev:.4}");
    }
    println!(
        "kept step {} ({:.1}s); chance level is ln(K+1) = {:.4}",
        run.checkpoint.step,
        run.report.wall_time,
        ((PretextConfig::default().num_negatives + 1) as f64).ln()
    );
    if let Some(path) = out {
        save_checkpoint(&run.checkpoint, std::path::Path::new(&path))?;
        println!("wrote {path}");
    }
    Ok(())
}
