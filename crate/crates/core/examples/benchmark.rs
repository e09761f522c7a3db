//! The full comparison: no continued pretraining, vanilla (standard and
//! doubled budget) and stable distillation, over several seeds.
//!
//! Settings are `key=value` overrides of the default benchmark, e.g.
//! `cargo run --release --example benchmark -- bench.seeds=1 target.shift=2.0`.
//! The default run takes well over half an hour on one core.

use std::time::Instant;

use sdistill::bench::{bench_data, run_bench_with, BenchConfig};
use sdistill::kv::KvMap;
use sdistill::pipeline::pretrain;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut overrides = KvMap::new();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("expected key=value, got {arg:?}"))?;
        overrides.set(k, v);
    }
    let cfg = BenchConfig::from_kv(&overrides)?;
    let start = Instant::now();
    let data = bench_data(&cfg)?;
    let pre = pretrain(&cfg.model, &data.source, &cfg.pretrain, &cfg.pretext, cfg.pretrain_seed)?.checkpoint;
    eprintln!("pretrained in {:.0}s", start.elapsed().as_secs_f64());

    let result = run_bench_with(&cfg, &data, pre, start)?;
    println!("{}", result.summary_table());
    for &arm in &cfg.arms {
        let groups: Vec<String> = result
            .mean_group_distance(arm)
            .iter()
            .map(|(g, d)| format!("{g} {d:.3}"))
            .collect();
        println!("{arm} distance by group: {}", groups.join(", "));
    }
    if let Some((vanilla, sd)) = result.mean_curve_gaps() {
        println!("mean overfitting gap: vanilla {:.2}, distilled {:.2}", 100.0 * vanilla, 100.0 * sd);
    }
    println!("wall {:.0}s", result.wall_time);
    Ok(())
}
