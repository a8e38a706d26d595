//! Checks shared by the dedicated test files and the acceptance runner. Each
//! panics on failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigma_core::eval::{evaluate, Split};
use sigma_core::interest::split_subsequences;
use sigma_core::{SigmaModel, Trainer, Variant};

use super::*;

pub const BATCHES: usize = 50;
const ITEMS: usize = 9;
pub const GRAD_TOL: f64 = 1e-3;

pub fn gradients(term: Term, seed: u64) {
    let model = relaxed_model(seed, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let batch = random_batch(&mut rng, 3, 5, 7);
    let (worst, n, at) = gradient_check(&model, &batch, term, 6);
    eprintln!("{term:?}: {n} coords, worst {worst:.2e} {at}");
    assert!(n > 0);
    assert!(worst <= GRAD_TOL, "{term:?}: worst relative error {worst:.3e} at {at}");
}

fn model(seed: u64) -> SigmaModel<f64> {
    SigmaModel::new(&tiny_config(Variant::Full), ITEMS, seed).unwrap()
}

pub fn outputs_ignore_later_items() {
    let m = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let k = m.config.k;
    for _ in 0..BATCHES {
        let batch = random_batch(&mut rng, 3, 6, ITEMS);
        let w = batch.width;
        let row = rng.random_range(0..batch.rows());
        let first = batch.row_mask(row).iter().position(|&v| v).unwrap();
        let cut = rng.random_range(first..w);
        let mut changed = batch.clone();
        for t in cut + 1..w {
            let p = row * w + t;
            changed.ids[p] = changed.ids[p] % ITEMS as u32 + 1;
        }
        let a = probe(&m, &batch);
        let b = probe(&m, &changed);
        for t in 0..=cut {
            let p = row * w + t;
            assert!(
                rows_equal(&a.decoded, p, &b.decoded, p, 0.0),
                "decoder saw the future at {t}"
            );
            assert!(rows_equal(&a.seq_mean, p, &b.seq_mean, p, 0.0));
            for j in 0..k {
                assert!(rows_equal(
                    &a.interest_mean,
                    p * k + j,
                    &b.interest_mean,
                    p * k + j,
                    0.0
                ));
            }
        }
        if cut + 1 < w {
            let p = row * w + cut + 1;
            assert!(
                !rows_equal(&a.decoded, p, &b.decoded, p, 0.0),
                "perturbation had no effect"
            );
        }
    }
}

pub fn front_padding_leaves_scores_unchanged() {
    let m = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..BATCHES {
        let n = rng.random_range(1..=4);
        let short: Vec<u32> = (0..n).map(|_| rng.random_range(1..=ITEMS as u32)).collect();
        let long: Vec<u32> = (0..6).map(|_| rng.random_range(1..=ITEMS as u32)).collect();
        let alone = m.score(&[&short], 4).unwrap();
        let padded = m.score(&[&long, &short], 4).unwrap();
        assert!(
            rows_equal(&alone, 0, &padded, 1, 1e-10),
            "padding changed the scores of {short:?}"
        );
    }
}

pub fn subsequences_conserve_length_and_order() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = m.config.k;
    for _ in 0..BATCHES {
        let batch = random_batch(&mut rng, 4, 6, ITEMS);
        let pr = probe(&m, &batch);
        let w = batch.width;
        for r in 0..batch.rows() {
            let ids = batch.row_ids(r);
            let mask = batch.row_mask(r);
            let subs = split_subsequences(ids, mask, &pr.picks[r * w..(r + 1) * w], k);
            let real: Vec<u32> = ids.iter().zip(mask).filter(|(_, &v)| v).map(|(&i, _)| i).collect();
            assert_eq!(subs.iter().map(Vec::len).sum::<usize>(), real.len());
            // each subsequence is a subsequence of the row, in order
            for (j, sub) in subs.iter().enumerate() {
                let expect: Vec<u32> = (0..w)
                    .filter(|&t| mask[t] && pr.picks[r * w + t] == j)
                    .map(|t| ids[t])
                    .collect();
                assert_eq!(sub, &expect);
            }
        }
    }
}

pub fn assignment_and_intensity_rows_lie_on_the_simplex() {
    let m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..BATCHES {
        let batch = random_batch(&mut rng, 4, 6, ITEMS);
        let pr = probe(&m, &batch);
        for (p, &valid) in batch.mask.iter().enumerate() {
            if !valid {
                continue;
            }
            for mat in [&pr.probs, &pr.alpha] {
                let row = mat.row(p);
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{row:?}");
            }
        }
    }
}

pub fn determinism() {
    let c = toy_corpus(30, 15, 8);
    let run = || {
        let mut t = Trainer::<f32>::new(&small_config(Variant::Full), &c).unwrap();
        let s = t.fit(&c, None, None).unwrap();
        let r = evaluate(&t.model, &c, &[5, 10], Split::Test, None, 16).unwrap();
        (s.history.iter().map(|h| h.loss).collect::<Vec<_>>(), r)
    };
    let (la, ra) = run();
    let (lb, rb) = run();
    assert_eq!(la.len(), 3);
    assert_eq!(la, lb);
    assert_eq!(ra, rb);

    let mut other = small_config(Variant::Full);
    other.seed = 7;
    let mut t = Trainer::<f32>::new(&other, &c).unwrap();
    let s = t.fit(&c, None, None).unwrap();
    assert_ne!(
        s.history[0].loss, la[0],
        "a different seed should change the trajectory"
    );
}
