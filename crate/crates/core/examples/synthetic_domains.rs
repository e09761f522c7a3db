//! The two-domain synthetic corpus: how far the shift dial moves the
//! target away from the source, and a file round trip.

use sdistill::corpus::{
    frame_labels, generate_corpus, linear_probe_accuracy, mean_gap, read_corpus, write_corpus, DomainSpec, SplitCounts,
};

fn main() -> anyhow::Result<()> {
    let source_spec = DomainSpec::default();
    let source = generate_corpus(&source_spec, SplitCounts::new(200, 20, 20), 7)?;
    let model = source_spec.materialize()?;
    let acc = linear_probe_accuracy(
        &frame_labels(&model, 2000, 1),
        &frame_labels(&model, 1000, 2),
        source_spec.num_phonemes,
    );
    println!("source: {} utterances, frame-level linear probe accuracy {acc:.3}", source.len());

    for shift in [0.5, 1.0, 2.0] {
        let spec = DomainSpec {
            domain_id: 1,
            shift,
            ..DomainSpec::default()
        };
        let target = generate_corpus(&spec, SplitCounts::new(200, 20, 20), 7)?;
        let cond = spec.materialize()?.condition_number();
        println!(
            "shift {shift:.1}: mean gap to source {:.3}, transform condition number {cond:.2}",
            mean_gap(&source, &target, 4000)
        );
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("source.sdcp");
    write_corpus(&source, &path)?;
    let back = read_corpus(&path)?;
    println!("round trip through {} identical: {}", path.display(), back == source);
    Ok(())
}

