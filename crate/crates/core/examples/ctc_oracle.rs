//! CTC by dynamic programming next to the path-enumeration oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdistill::ctc::{ctc_brute_force, ctc_greedy_decode, ctc_loss, min_frames};
use sdistill::tensor::Tensor;

fn random_lattice(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|x| x - z));
    }
    Tensor::from_vec([t, v], data)
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, v) = (6, 4);
    let lattice = random_lattice(t, v, &mut rng);
    println!("lattice {t}x{v}, greedy decode {:?}", ctc_greedy_decode(&lattice));
    // [2, 2, 2, 2] needs 7 frames, so the last case is infeasible.
    for labels in [vec![1], vec![1, 2], vec![3, 3], vec![1, 2, 3], vec![2, 2, 2, 2]] {
        let dp = ctc_loss(&lattice, &labels)?;
        let brute = ctc_brute_force(&lattice, &labels)?;
        println!(
            "labels {:<14} min frames {}  dp nll {:>10.6} feasible {:<5}  brute nll {:>10.6} feasible {}",
            format!("{labels:?}"),
            min_frames(&labels),
            dp.nll,
            dp.feasible,
            brute.nll,
            brute.feasible
        );
    }
    Ok(())
}
