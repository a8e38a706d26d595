#![allow(dead_code)]

pub mod checks;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sigma_core::autograd::ParamStore;
use sigma_core::config::Precision;
use sigma_core::corpus::{SequenceBatch, UserSequence};
use sigma_core::interest::orthogonality_loss;
use sigma_core::nn::{Mode, SeqLayout, Session};
use sigma_core::{Matrix, PreparedCorpus, Scalar, SigmaModel, TrainConfig, Variant};

pub fn tiny_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        k: 2,
        dim: 4,
        heads: 2,
        blocks: 1,
        max_len: 6,
        batch_size: 8,
        dropout: 0.0,
        precision: Precision::F64,
        ..Default::default()
    }
}

pub fn small_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        k: 2,
        dim: 8,
        heads: 2,
        blocks: 1,
        max_len: 8,
        batch_size: 16,
        dropout: 0.1,
        patience: 3,
        max_epochs: 3,
        ..Default::default()
    }
}

/// Users walking the catalog with a user-specific stride, so the next item is
/// learnable.
pub fn toy_corpus(users: usize, items: usize, len: usize) -> PreparedCorpus {
    let seqs: Vec<Vec<u32>> = (0..users)
        .map(|u| {
            let stride = 1 + u % 3;
            (0..len).map(|t| ((u + t * stride) % items) as u32 + 1).collect()
        })
        .collect();
    PreparedCorpus::from_sequences("toy", items, &seqs).unwrap()
}

/// Random training batch of `seqs` sequences of length 2..=max_len+1.
pub fn random_batch(rng: &mut ChaCha8Rng, seqs: usize, max_len: usize, items: usize) -> SequenceBatch {
    let owned: Vec<UserSequence> = (0..seqs)
        .map(|u| {
            let n = rng.random_range(2..=max_len + 1);
            UserSequence {
                user: u as u32,
                items: (0..n).map(|_| rng.random_range(1..=items as u32)).collect(),
            }
        })
        .collect();
    let refs: Vec<&UserSequence> = owned.iter().collect();
    SequenceBatch::for_training(&refs, max_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Orth,
    MieRecon,
    SgmRecon,
}

/// One loss term evaluated with `params`, noise drawn from a fixed seed so that
/// repeated calls see the same samples. Returns the value and, if asked, the
/// parameter gradients.
pub fn term_loss(
    model: &SigmaModel<f64>,
    params: &ParamStore<f64>,
    batch: &SequenceBatch,
    term: Term,
    grad: bool,
) -> (f64, Vec<Option<Matrix<f64>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut s = Session::new(params, Mode::Train { dropout: 0.0 }, &mut rng);
    let seqs = batch.rows();
    let steps = batch.width;
    let n = model.num_items();
    let table = s.p(model.items);
    let emb = s
        .graph
        .gather_rows(table, Rc::new(batch.ids.iter().map(|&i| i as usize).collect()));
    let catalog = s.graph.gather_rows(table, Rc::new((1..=n).collect()));
    let positions = batch.target_positions();
    let targets: Vec<u32> = positions.iter().map(|&p| batch.targets[p]).collect();
    let loss = match term {
        Term::Orth => {
            let enc = model.interest.as_ref().unwrap();
            let bank = s.p(enc.bank);
            orthogonality_loss(&mut s.graph, bank, enc.config.abs_orthogonality)
        }
        Term::MieRecon => {
            let enc = model.interest.as_ref().unwrap();
            let post = enc.forward(&mut s, emb, &batch.mask, seqs, steps).unwrap();
            enc.recon_loss(&mut s, &post, catalog, &positions, &targets).unwrap()
        }
        Term::SgmRecon => {
            let seq = model.sequence.as_ref().unwrap();
            let layout = SeqLayout::new(&mut s.graph, &batch.mask, seqs, steps);
            let post = seq.encode(&mut s, emb, &batch.relative_positions(), layout.clone());
            let z = seq.sample(&mut s, &post);
            let dec = seq.decode(&mut s, z, &layout);
            seq.recon_loss(&mut s, dec, catalog, &positions, &targets).unwrap()
        }
    };
    let value = s.graph.scalar_value(loss);
    let grads = if grad {
        s.graph.backward(loss).into_param_grads(params.len())
    } else {
        Vec::new()
    };
    (value, grads)
}

/// Worst relative disagreement between analytic and central-difference gradients
/// over a sample of coordinates of every parameter. Also returns the number of
/// coordinates compared.
pub fn gradient_check(
    model: &SigmaModel<f64>,
    batch: &SequenceBatch,
    term: Term,
    per_tensor: usize,
) -> (f64, usize, String) {
    let (_, grads) = term_loss(model, &model.params, batch, term, true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut count = 0;
    for (id, name, value) in model.params.iter() {
        let len = value.len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for c in coords {
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[c]);
            let mut plus = model.params.clone();
            plus.value_mut(id).data_mut()[c] += h;
            let mut minus = model.params.clone();
            minus.value_mut(id).data_mut()[c] -= h;
            let fp = term_loss(model, &plus, batch, term, false).0;
            let fm = term_loss(model, &minus, batch, term, false).0;
            let numeric = (fp - fm) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-7 {
                0.0
            } else {
                (analytic - numeric).abs() / scale
            };
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{c}]: analytic {analytic:.6e}, numeric {numeric:.6e}");
            }
            count += 1;
        }
    }
    (worst, count, worst_at)
}

/// Tiny f64 model with the relaxed (differentiable) category assignment.
pub fn relaxed_model(seed: u64, items: usize) -> SigmaModel<f64> {
    let mut model = SigmaModel::<f64>::new(&tiny_config(Variant::Full), items, seed).unwrap();
    model.interest.as_mut().unwrap().config.straight_through = false;
    model
}

/// Eval-mode internals at every position of a batch.
pub struct Probe {
    pub decoded: Matrix<f64>,
    pub seq_mean: Matrix<f64>,
    pub interest_mean: Matrix<f64>,
    pub probs: Matrix<f64>,
    pub alpha: Matrix<f64>,
    pub picks: Vec<usize>,
}

pub fn probe(model: &SigmaModel<f64>, batch: &SequenceBatch) -> Probe {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Session::new(&model.params, Mode::Eval, &mut rng);
    let (seqs, steps) = (batch.rows(), batch.width);
    let table = s.p(model.items);
    let emb = s
        .graph
        .gather_rows(table, Rc::new(batch.ids.iter().map(|&i| i as usize).collect()));
    let enc = model.interest.as_ref().unwrap();
    let post = enc.forward(&mut s, emb, &batch.mask, seqs, steps).unwrap();
    let seq = model.sequence.as_ref().unwrap();
    let layout = SeqLayout::new(&mut s.graph, &batch.mask, seqs, steps);
    let sp = seq.encode(&mut s, emb, &batch.relative_positions(), layout.clone());
    let dec = seq.decode(&mut s, sp.mean, &layout);
    Probe {
        decoded: s.graph.value(dec).clone(),
        seq_mean: s.graph.value(sp.mean).clone(),
        interest_mean: s.graph.value(post.mean).clone(),
        probs: s.graph.value(post.probs).clone(),
        alpha: s.graph.value(post.alpha).clone(),
        picks: post.assignment.picks.clone(),
    }
}

pub fn rows_equal<T: Scalar>(a: &Matrix<T>, ra: usize, b: &Matrix<T>, rb: usize, tol: f64) -> bool {
    a.row(ra)
        .iter()
        .zip(b.row(rb))
        .all(|(x, y)| (x.as_f64() - y.as_f64()).abs() <= tol)
}
