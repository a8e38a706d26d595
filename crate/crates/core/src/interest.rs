//! Multi-interest encoder: orthogonal category bank, soft and hard interests per
//! prefix, Gaussian interest posteriors and the max-over-interests reconstruction.
//!
//! Per-interest tensors use the row layout `(sequence, step, interest)`, i.e. row
//! `(b·T + t)·k + j`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{CumsumLayout, Graph, ParamId, Var};
use crate::error::{Result, SigmaError};
use crate::gaussian::{argmax, gumbel_from_uniform, LOG_STD_MAX, LOG_STD_MIN};
use crate::nn::{GruCell, Init, Mlp, Session};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterestConfig {
    /// Number of latent categories `k`.
    pub categories: usize,
    /// Softmax temperature for item-to-category probabilities.
    pub category_temperature: f64,
    pub gumbel_temperature: f64,
    /// Temperature of the max-over-interests scoring softmax.
    pub score_temperature: f64,
    /// Sum `|g_iᵀ g_j|` instead of the signed sum.
    pub abs_orthogonality: bool,
    /// Hard one-hot forward pass. When off the relaxed sample gates the GRU.
    pub straight_through: bool,
}

impl Default for InterestConfig {
    fn default() -> Self {
        InterestConfig {
            categories: 4,
            category_temperature: 0.1,
            gumbel_temperature: 0.5,
            score_temperature: 1.0,
            abs_orthogonality: false,
            straight_through: true,
        }
    }
}

impl InterestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 {
            return Err(SigmaError::Domain("need at least one category".into()));
        }
        for (name, v) in [
            ("category_temperature", self.category_temperature),
            ("gumbel_temperature", self.gumbel_temperature),
            ("score_temperature", self.score_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SigmaError::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Category logits `l2norm(v)·Gᵀ / τ`, one row per item.
pub fn category_scores<T: Scalar>(g: &mut Graph<T>, items: Var, bank: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(SigmaError::Domain(format!("category temperature {temperature} ≤ 0")));
    }
    let v = g.l2_normalize_rows(items);
    let s = g.matmul_nt(v, bank);
    Ok(g.scale(s, T::of(1.0 / temperature)))
}

/// `Σ_{i≠j} g_iᵀ g_j`, or the sum of absolute values.
pub fn orthogonality_loss<T: Scalar>(g: &mut Graph<T>, bank: Var, absolute: bool) -> Var {
    let k = g.shape(bank).0;
    let gram = g.matmul_nt(bank, bank);
    let off = Matrix::from_vec(
        k,
        k,
        (0..k * k)
            .map(|i| if i / k == i % k { T::zero() } else { T::one() })
            .collect(),
    );
    let off = g.constant(off);
    let gram = if absolute { g.abs(gram) } else { gram };
    let masked = g.mul(gram, off);
    g.sum_all(masked)
}

/// Renormalizes every category embedding to unit length in place.
pub fn renormalize_rows<T: Scalar>(bank: &mut Matrix<T>) {
    for r in 0..bank.rows() {
        let row = bank.row_mut(r);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n > T::zero() {
            for v in row {
                *v /= n;
            }
        }
    }
}

fn interest_rows(seqs: usize, steps: usize, k: usize) -> Rc<Vec<usize>> {
    Rc::new((0..seqs * steps).flat_map(|p| std::iter::repeat_n(p, k)).collect())
}

fn mask_column<T: Scalar>(valid: &[bool], repeat: usize) -> Matrix<T> {
    Matrix::column(
        valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, repeat))
            .collect(),
    )
}

/// Soft interests `h_t^j = Σ_{i≤t} a_i^j v_i` in interest layout and intensities
/// `α_t^j` (one row per position). Rows at pad positions are zero.
pub fn soft_interests<T: Scalar>(
    g: &mut Graph<T>,
    items: Var,
    probs: Var,
    valid: &[bool],
    seqs: usize,
    steps: usize,
) -> (Var, Var) {
    let k = g.shape(probs).1;
    let n = seqs * steps;
    assert_eq!(valid.len(), n, "mask length");
    let mask = g.constant(mask_column(valid, 1));
    let a = g.mul(probs, mask);

    let weights = g.reshape(a, n * k, 1);
    let rep = g.gather_rows(items, interest_rows(seqs, steps, k));
    let weighted = g.mul(rep, weights);
    let h = g.cumsum_groups(weighted, CumsumLayout { seqs, steps, groups: k });

    let layout = CumsumLayout { seqs, steps, groups: 1 };
    let mass = g.cumsum_groups(a, layout);
    let mut counts = Vec::with_capacity(n);
    for b in 0..seqs {
        let mut c = 0usize;
        for t in 0..steps {
            if valid[b * steps + t] {
                c += 1;
            }
            counts.push(T::of(c.max(1) as f64));
        }
    }
    let counts = g.constant(Matrix::column(counts));
    let alpha = g.div(mass, counts);
    (h, alpha)
}

/// Gating matrix used to route items to the recurrent encoder, and its forward value.
#[derive(Clone, Debug)]
pub struct HardAssignment<T> {
    pub gates: Var,
    pub one_hot: Matrix<T>,
    pub picks: Vec<usize>,
}

/// Gumbel-softmax category pick per row of `log_probs`. Without `uniform` noise the
/// pick is the argmax. With `straight_through` the forward value is one-hot.
pub fn hard_assign<T: Scalar>(
    g: &mut Graph<T>,
    log_probs: Var,
    temperature: f64,
    uniform: Option<&[T]>,
    straight_through: bool,
) -> Result<HardAssignment<T>> {
    if !(temperature > 0.0) {
        return Err(SigmaError::Domain(format!("gumbel temperature {temperature} ≤ 0")));
    }
    let (n, k) = g.shape(log_probs);
    let perturbed = match uniform {
        Some(u) => {
            assert_eq!(u.len(), n * k, "one uniform draw per logit");
            let noise = g.constant(Matrix::from_vec(
                n,
                k,
                u.iter().map(|&x| gumbel_from_uniform(x)).collect(),
            ));
            g.add(log_probs, noise)
        }
        None => log_probs,
    };
    let scaled = g.scale(perturbed, T::of(1.0 / temperature));
    let soft = g.softmax_rows(scaled);
    let values = g.value(scaled);
    let picks: Vec<usize> = (0..n).map(|r| argmax(values.row(r))).collect();
    let mut one_hot = Matrix::zeros(n, k);
    for (r, &j) in picks.iter().enumerate() {
        one_hot.set(r, j, T::one());
    }
    let gates = if straight_through {
        g.straight_through(soft, one_hot.clone())
    } else {
        soft
    };
    Ok(HardAssignment { gates, one_hot, picks })
}

/// Splits the real items of one padded row by their assigned category.
pub fn split_subsequences(ids: &[u32], mask: &[bool], picks: &[usize], k: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); k];
    for ((&id, &m), &j) in ids.iter().zip(mask).zip(picks) {
        if m {
            out[j].push(id);
        }
    }
    out
}

/// Interest posterior for every position of a batch.
#[derive(Clone, Debug)]
pub struct InterestPosterior<T> {
    pub seqs: usize,
    pub steps: usize,
    pub k: usize,
    /// Category probabilities `a`, one row per position.
    pub probs: Var,
    /// Intensities `α`, one row per position.
    pub alpha: Var,
    pub soft: Var,
    pub hard: Var,
    pub mean: Var,
    pub log_std: Var,
    pub assignment: HardAssignment<T>,
    /// `1` on interest rows at real positions.
    pub row_mask: Var,
    pub kl: Var,
}

/// `½ Σ (ω² + m² − 1 − log ω²)` over rows where `row_mask` is one.
pub fn kl_to_standard_rows<T: Scalar>(g: &mut Graph<T>, mean: Var, log_std: Var, row_mask: Var) -> Var {
    let two_log = g.scale(log_std, T::of(2.0));
    let var = g.exp(two_log);
    let m2 = g.square(mean);
    let s = g.add(var, m2);
    let s = g.sub(s, two_log);
    let s = g.add_scalar(s, -T::one());
    let s = g.mul(s, row_mask);
    let total = g.sum_all(s);
    g.scale(total, T::of(0.5))
}

/// Logits `max_j ⟨u^j, v⟩ / ε` for every catalog row; `interests` holds `k`
/// consecutive rows per query.
pub fn multi_interest_logits<T: Scalar>(
    g: &mut Graph<T>,
    interests: Var,
    catalog: Var,
    k: usize,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(SigmaError::Domain(format!("score temperature {temperature} ≤ 0")));
    }
    let all = g.matmul_nt(interests, catalog);
    let best = g.group_max_rows(all, k);
    Ok(g.scale(best, T::of(1.0 / temperature)))
}

#[derive(Clone, Debug)]
pub struct InterestEncoder {
    pub bank: ParamId,
    pub gru: GruCell,
    pub omega: Mlp,
    pub project: Mlp,
    pub config: InterestConfig,
}

impl InterestEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, config: InterestConfig) -> Result<Self> {
        config.validate()?;
        let k = config.categories;
        let mut g = Matrix::randn(k, dim, 1.0, init.rng);
        renormalize_rows(&mut g);
        Ok(InterestEncoder {
            bank: init.store.add("interest.bank", g),
            gru: GruCell::new(init, "interest.gru", dim, dim),
            omega: Mlp::new(init, "interest.omega", 2 * dim, dim, dim),
            project: Mlp::new(init, "interest.project", dim, dim, dim),
            config,
        })
    }

    pub fn k(&self) -> usize {
        self.config.categories
    }

    /// Posterior over interests at every prefix of the batch. `items` holds the
    /// item embeddings of the padded batch, one row per position.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        items: Var,
        valid: &[bool],
        seqs: usize,
        steps: usize,
    ) -> Result<InterestPosterior<T>> {
        let k = self.k();
        let n = seqs * steps;
        let bank = s.p(self.bank);
        let scores = category_scores(&mut s.graph, items, bank, self.config.category_temperature)?;
        let probs = s.graph.softmax_rows(scores);
        let log_probs = s.graph.log_softmax_rows(scores);
        let (soft, alpha) = soft_interests(&mut s.graph, items, probs, valid, seqs, steps);

        let uniform: Option<Vec<T>> = if s.is_training() {
            Some((0..n * k).map(|_| T::of(s.rng.random::<f64>())).collect())
        } else {
            None
        };
        let assignment = hard_assign(
            &mut s.graph,
            log_probs,
            self.config.gumbel_temperature,
            uniform.as_deref(),
            self.config.straight_through,
        )?;
        let mask = s.graph.constant(mask_column(valid, 1));
        let gates = s.graph.mul(assignment.gates, mask);
        let hard = self.hard_interests(s, items, gates, seqs, steps);

        // categories with no item yet fall back to the soft interest
        let mut empty = Vec::with_capacity(n * k);
        for b in 0..seqs {
            let mut seen = vec![false; k];
            for t in 0..steps {
                let p = b * steps + t;
                if valid[p] {
                    seen[assignment.picks[p]] = true;
                }
                empty.extend(seen.iter().map(|&x| if x { T::zero() } else { T::one() }));
            }
        }
        let empty_m = Matrix::column(empty);
        let filled = s.graph.constant(empty_m.map(|e| T::one() - e));
        let empty = s.graph.constant(empty_m);
        let r = s.graph.mul(hard, filled);
        let h_part = s.graph.mul(soft, empty);
        let hard = s.graph.add(r, h_part);

        let sum = s.graph.add(soft, hard);
        let mean = s.graph.scale(sum, T::of(0.5));

        let bank_rows = s.graph.gather_rows(bank, Rc::new((0..n * k).map(|r| r % k).collect()));
        let cat = s.graph.concat_cols(&[bank_rows, mean]);
        let raw = self.omega.forward(s, cat);
        let log_std = s.graph.clamp(raw, T::of(LOG_STD_MIN), T::of(LOG_STD_MAX));

        let row_mask = s.graph.constant(mask_column(valid, k));
        let kl = kl_to_standard_rows(&mut s.graph, mean, log_std, row_mask);
        Ok(InterestPosterior {
            seqs,
            steps,
            k,
            probs,
            alpha,
            soft,
            hard,
            mean,
            log_std,
            assignment,
            row_mask,
            kl,
        })
    }

    /// Runs the shared GRU over all `seqs·k` subsequences at once; at each step only
    /// the state of the gated category moves. Output in interest layout.
    fn hard_interests<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        items: Var,
        gates: Var,
        seqs: usize,
        steps: usize,
    ) -> Var {
        let k = self.k();
        let d = self.gru.dim();
        let gx_all = self.gru.project_input(s, items);
        let gate_col = s.graph.reshape(gates, seqs * steps * k, 1);
        let mut state = s.graph.constant(Matrix::zeros(seqs * k, d));
        let mut per_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let rows: Vec<usize> = (0..seqs * k).map(|r| (r / k) * steps + t).collect();
            let gx = s.graph.gather_rows(gx_all, Rc::new(rows));
            let gate_rows: Vec<usize> = (0..seqs * k).map(|r| ((r / k) * steps + t) * k + r % k).collect();
            let c = s.graph.gather_rows(gate_col, Rc::new(gate_rows));
            let next = self.gru.step_projected(s, gx, state);
            let delta = s.graph.sub(next, state);
            let delta = s.graph.mul(delta, c);
            state = s.graph.add(state, delta);
            per_step.push(state);
        }
        let stacked = s.graph.concat_rows(&per_step);
        let order: Vec<usize> = (0..seqs * steps * k)
            .map(|r| {
                let (p, j) = (r / k, r % k);
                let (b, t) = (p / steps, p % steps);
                (t * seqs + b) * k + j
            })
            .collect();
        s.graph.gather_rows(stacked, Rc::new(order))
    }

    /// Projected interests `u = MLP(x)` for the given positions, `k` rows each.
    /// Training samples `x = m + ω⊙ε`; eval uses `x = m`.
    pub fn project_interests<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        post: &InterestPosterior<T>,
        positions: &[usize],
    ) -> Var {
        let k = post.k;
        let rows: Vec<usize> = positions.iter().flat_map(|&p| (0..k).map(move |j| p * k + j)).collect();
        let rows = Rc::new(rows);
        let m = s.graph.gather_rows(post.mean, rows.clone());
        let x = if s.is_training() {
            let ls = s.graph.gather_rows(post.log_std, rows);
            let std = s.graph.exp(ls);
            let (r, c) = s.graph.shape(m);
            let eps = Matrix::randn(r, c, 1.0, s.rng);
            let eps = s.graph.constant(eps);
            let noise = s.graph.mul(std, eps);
            s.graph.add(m, noise)
        } else {
            m
        };
        self.project.forward(s, x)
    }

    /// `Σ_t −log p(v_{t+1} | X_t)` summed over the given positions. `catalog` holds
    /// the item embeddings of items `1..=N`; targets are catalog ids (≥ 1).
    pub fn recon_loss<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        post: &InterestPosterior<T>,
        catalog: Var,
        positions: &[usize],
        targets: &[u32],
    ) -> Result<Var> {
        assert_eq!(positions.len(), targets.len());
        if positions.is_empty() {
            return Ok(s.graph.scalar(T::zero()));
        }
        let u = self.project_interests(s, post, positions);
        let logits = multi_interest_logits(&mut s.graph, u, catalog, post.k, self.config.score_temperature)?;
        let tg = Rc::new(targets.iter().map(|&t| t as usize - 1).collect());
        let ce = s.graph.cross_entropy_rows(logits, tg);
        Ok(s.graph.sum_all(ce))
    }
}
