//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.
//!
//! The benchmark criteria share one pretrained encoder and one benchmark
//! run; the whole target takes tens of minutes on one core.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdistill::bench::{bench_data, run_bench_with, train_encoders, Arm, BenchConfig, BenchData};
use sdistill::checkpoint::{Checkpoint, Stage};
use sdistill::corpus::{decode_corpus, generate_corpus, make_batches, read_corpus, write_corpus, DomainSpec, SplitCounts};
use sdistill::ctc::{ctc_brute_force, ctc_loss, ctc_loss_graph, min_frames};
use sdistill::distill::{distill_step, DistillConfig};
use sdistill::evaluate::{overfit_gap, wer_vs_steps};
use sdistill::gradcheck::{finite_difference_check, max_relative_error, CHECKED_PRIMITIVES};
use sdistill::model::ModelConfig;
use sdistill::pipeline::{continued_pretrain, pretrain, stable_distillation, AdamState, TrainHyper};
use sdistill::pretext::{contrastive_loss_graph, reconstruction_loss_graph, MaskedSegment, PretextConfig};
use sdistill::{FormatError, Segment, Tensor};

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, id: &'static str, pass: bool, detail: String) {
    println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, pass, detail });
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec([rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn log_softmax_rows(logits: &[f64], vocab: usize) -> Vec<f64> {
    logits
        .chunks(vocab)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            r.iter().map(move |x| x - lse).collect::<Vec<_>>()
        })
        .collect()
}

fn ac1() -> (bool, String) {
    let start = Instant::now();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut worst_what = String::new();
    let mut note = |what: String, e: f64| {
        if e > worst {
            worst = e;
            worst_what = what;
        }
    };
    for &kind in CHECKED_PRIMITIVES {
        for seed in 0..20 {
            let e = finite_difference_check(kind, seed, eps).expect("primitive check");
            note(format!("{kind:?}"), e);
        }
    }
    let pcfg = PretextConfig {
        mask_prob: 0.4,
        num_negatives: 3,
        ..PretextConfig::default()
    };
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (t, h) = (9, 4);
        let items = vec![MaskedSegment::sample(Segment::new(0, t), &pcfg, seed).unwrap()];
        let inputs = [random(&mut rng, t, h), random(&mut rng, t, h)];
        let e = max_relative_error(&inputs, eps, |g, x| contrastive_loss_graph(g, x[0], x[1], &items, 0.1)).unwrap();
        note("contrastive".into(), e);
        let e = max_relative_error(&inputs, eps, |g, x| reconstruction_loss_graph(g, x[0], x[1], &items)).unwrap();
        note("reconstruction".into(), e);

        let (t, v) = (6, 4);
        let labels: Vec<u32> = (0..3).map(|_| rng.gen_range(1..v as u32)).collect();
        let frames = t.max(min_frames(&labels));
        let logits = [random(&mut rng, frames, v)];
        let e = max_relative_error(&logits, eps, |g, x| {
            let lp = g.log_softmax(x[0])?;
            Ok(ctc_loss_graph(g, lp, &[Segment::new(0, frames)], &[&labels])?.0)
        })
        .unwrap();
        note("ctc".into(), e);
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} ({worst_what}), {secs:.1}s"),
    )
}

fn ac2() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut infeasible, mut mismatched) = (0.0f64, 0, 0);
    for i in 0..100 {
        let vocab = rng.gen_range(2..=5usize);
        let len = rng.gen_range(0..=4usize);
        let labels: Vec<u32> = (0..len).map(|_| rng.gen_range(1..vocab as u32)).collect();
        // Every fifth instance is one frame short of feasible when possible.
        let frames = if i % 5 == 0 && min_frames(&labels) > 1 {
            min_frames(&labels) - 1
        } else {
            rng.gen_range(1..=8usize)
        };
        let logits: Vec<f64> = (0..frames * vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lattice = Tensor::from_vec([frames, vocab], log_softmax_rows(&logits, vocab));
        let fast = ctc_loss(&lattice, &labels).unwrap();
        let slow = ctc_brute_force(&lattice, &labels).unwrap();
        if fast.feasible != slow.feasible {
            mismatched += 1;
        } else if fast.feasible {
            worst = worst.max((fast.nll - slow.nll).abs());
        } else {
            infeasible += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        mismatched == 0 && worst < 1e-8 && infeasible > 0 && secs < 60.0,
        format!("max |diff| {worst:.1e}, {infeasible} infeasible agreed, {mismatched} feasibility mismatches"),
    )
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        ..ModelConfig::default()
    }
}

fn tiny_corpus() -> sdistill::corpus::Corpus {
    let spec = DomainSpec {
        domain_id: 1,
        shift: 1.0,
        ..DomainSpec::default()
    };
    generate_corpus(&spec, SplitCounts::new(16, 4, 4), 5).unwrap()
}

fn tiny_hyper() -> TrainHyper {
    TrainHyper {
        epochs: 2,
        batch_size: 4,
        ..TrainHyper::continued()
    }
}

fn ac7() -> (bool, String) {
    let corpus = tiny_corpus();
    let pcfg = PretextConfig::default();
    let run = || {
        let pre = pretrain(&tiny_model(), &corpus, &tiny_hyper(), &pcfg, 3).unwrap().checkpoint;
        let cp = continued_pretrain(&pre, &corpus, &tiny_hyper(), &pcfg, 4, Stage::TeacherCp).unwrap();
        (pre.encode(), cp.checkpoint.encode())
    };
    let (a, b) = (run(), run());
    let reproducible = a == b;

    let ckpt = Checkpoint::decode(&a.1).unwrap();
    let ckpt_round_trip = ckpt.encode() == a.1;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sdcp");
    write_corpus(&corpus, &path).unwrap();
    let corpus_round_trip = read_corpus(&path).unwrap() == corpus;
    let bytes = std::fs::read(&path).unwrap();

    let codes = |bytes: &[u8], decode: &dyn Fn(&[u8]) -> Option<FormatError>| -> Vec<u8> {
        let mut magic = bytes.to_vec();
        magic[0] ^= 0xff;
        let mut version = bytes.to_vec();
        version[4] = 99;
        let cut = &bytes[..bytes.len() - 5];
        [decode(&magic), decode(&version), decode(cut)]
            .into_iter()
            .map(|e| e.map_or(0, |e| e.code()))
            .collect()
    };
    let expected = vec![
        FormatError::BadMagic {
            expected: *b"SDCK",
            found: vec![],
        }
        .code(),
        FormatError::UnsupportedVersion(0).code(),
        FormatError::Truncated("").code(),
    ];
    let ck_codes = codes(&a.1, &|b| Checkpoint::decode(b).err());
    let co_codes = codes(&bytes, &|b| decode_corpus(b).err());
    let rejects = ck_codes == expected && co_codes == expected;
    (
        reproducible && ckpt_round_trip && corpus_round_trip && rejects,
        format!(
            "reproducible {reproducible}, checkpoint round trip {ckpt_round_trip}, corpus round trip {corpus_round_trip}, corruption codes checkpoint {ck_codes:?} corpus {co_codes:?}"
        ),
    )
}

fn ac8() -> (bool, String) {
    let corpus = tiny_corpus();
    let pcfg = PretextConfig::default();
    let pre = pretrain(&tiny_model(), &corpus, &tiny_hyper(), &pcfg, 3).unwrap().checkpoint;
    let teacher = continued_pretrain(&pre, &corpus, &tiny_hyper(), &pcfg, 4, Stage::TeacherCp)
        .unwrap()
        .checkpoint;
    let before = teacher.encode();
    let dcfg = DistillConfig::default();
    let hyper = TrainHyper {
        epochs: 3,
        ..tiny_hyper()
    };
    let sd = stable_distillation(&pre, &teacher, &corpus, &dcfg, &hyper, 9).unwrap();
    let mut worst = 0.0f64;
    let mut steps = 0;
    for (_, r) in &sd.report.records {
        let get = |k| r.get(k).and_then(|v| v.parse::<f64>().ok());
        if let (Some(t), Some(m), Some(p)) = (get("total"), get("mse"), get("pretext")) {
            worst = worst.max((t - (m + dcfg.alpha * p)).abs());
            steps += 1;
        }
    }
    // Direct steps as well, with a non-default weight.
    let dcfg2 = DistillConfig {
        alpha: 0.37,
        ..DistillConfig::default()
    };
    let mut student = pre.params.clone();
    let mut state = AdamState::new(&student);
    for (i, b) in make_batches(&corpus.train, 4, 1, 0).unwrap().iter().enumerate() {
        let r = distill_step(&mut student, &teacher.params, b, &mut state, &hyper, &dcfg2, i as u64).unwrap();
        worst = worst.max((r.total - (r.mse + 0.37 * r.pretext)).abs());
        steps += 1;
    }
    let untouched = teacher.encode() == before;
    (
        worst < 1e-6 && untouched && steps > 0,
        format!("{steps} steps, max |total - (mse + alpha*pretext)| {worst:.1e}, teacher unchanged {untouched}"),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn main() {
    let mut out = Vec::new();
    let (p, d) = ac1();
    record(&mut out, "AC-1", p, d);
    let (p, d) = ac2();
    record(&mut out, "AC-2", p, d);

    let start = Instant::now();
    let cfg = BenchConfig::default();
    let data = bench_data(&cfg).unwrap();
    let pre = pretrain(&cfg.model, &data.source, &cfg.pretrain, &cfg.pretext, cfg.pretrain_seed)
        .unwrap()
        .checkpoint;
    let pretrain_secs = start.elapsed().as_secs_f64();
    let bench = run_bench_with(&cfg, &data, pre.clone(), start).unwrap();
    println!("{}", bench.summary_table().trim_end());

    let pct = |arm| 100.0 * bench.mean_test_wer(arm).unwrap();
    let (sd, van, long, none) = (
        pct(Arm::StableDistill),
        pct(Arm::VanillaCp),
        pct(Arm::VanillaCpLong),
        pct(Arm::NoCp),
    );
    // The source-domain fine-tunes belong to AC-6 and are timed apart.
    let minutes = bench.target_wall_time() / 60.0;
    record(
        &mut out,
        "AC-3",
        sd <= van - 1.0 && sd <= long - 1.0 && sd < none && minutes < 45.0,
        format!(
            "mean test WER sd {sd:.2} vanilla {van:.2} vanilla_long {long:.2} no_cp {none:.2}; {minutes:.1} min including pretraining ({pretrain_secs:.0}s), {:.1} min with the source probes",
            bench.wall_time / 60.0
        ),
    );

    let (dsd, dvan) = (
        bench.mean_distance(Arm::StableDistill).unwrap(),
        bench.mean_distance(Arm::VanillaCp).unwrap(),
    );
    let groups = |arm| {
        bench
            .mean_group_distance(arm)
            .iter()
            .map(|(n, d)| format!("{n}={d:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("  sd groups: {}", groups(Arm::StableDistill));
    println!("  vanilla groups: {}", groups(Arm::VanillaCp));
    record(
        &mut out,
        "AC-4",
        dsd < dvan,
        format!(
            "mean total distance sd {dsd:.4} vanilla {dvan:.4}; before fine-tuning sd {:.4} vanilla {:.4}",
            bench.mean_encoder_distance(Arm::StableDistill).unwrap(),
            bench.mean_encoder_distance(Arm::VanillaCp).unwrap()
        ),
    );

    let (gv, gs, detail) = curve_gaps(&pre);
    record(
        &mut out,
        "AC-5",
        gv >= 1.0 && gs < gv,
        format!("mean final-minus-best gap vanilla {gv:.2} sd {gs:.2}; {detail}"),
    );

    let (ssd, svan) = (
        100.0 * bench.mean_source_test_wer(Arm::StableDistill).unwrap(),
        100.0 * bench.mean_source_test_wer(Arm::VanillaCp).unwrap(),
    );
    record(
        &mut out,
        "AC-6",
        ssd <= svan,
        format!("mean source test WER after source fine-tuning sd {ssd:.2} vanilla {svan:.2}"),
    );

    let (p, d) = ac7();
    record(&mut out, "AC-7", p, d);
    let (p, d) = ac8();
    record(&mut out, "AC-8", p, d);

    out.sort_by_key(|o| o.id);
    let failed: Vec<_> = out.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} passed, {} failed",
        out.len() - failed.len(),
        failed.len()
    );
    for o in &failed {
        println!("  failed {}: {}", o.id, o.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

/// Vanilla and distillation curves on the high-shift target, scored in WER
/// points.
fn curve_gaps(pre: &Checkpoint) -> (f64, f64, String) {
    let cfg = BenchConfig::high_shift();
    let data: BenchData = bench_data(&cfg).unwrap();
    let (mut gv, mut gs) = (Vec::new(), Vec::new());
    let mut shapes = Vec::new();
    for &seed in &cfg.seeds {
        let enc = train_encoders(&cfg, pre, &data.target, seed, false).unwrap();
        let v = wer_vs_steps(&enc.vanilla_snapshots, &data.target, &cfg.probe, seed).unwrap();
        let s = wer_vs_steps(&enc.sd_snapshots, &data.target, &cfg.probe, seed).unwrap();
        let fmt = |c: &[sdistill::evaluate::CurvePoint]| {
            c.iter().map(|p| format!("{:.1}", 100.0 * p.dev_wer)).collect::<Vec<_>>().join("/")
        };
        println!("  seed {seed} vanilla curve {}  sd curve {}", fmt(&v), fmt(&s));
        shapes.push(seed);
        gv.push(100.0 * overfit_gap(&v).unwrap());
        gs.push(100.0 * overfit_gap(&s).unwrap());
    }
    (mean(&gv), mean(&gs), format!("shift {} over seeds {shapes:?}", cfg.target.shift))
}
