//! Sequence VAE: causal Transformer posterior over a per-position latent, KL
//! against the interest mixture, and a Transformer decoder scoring the catalog.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, Var};
use crate::error::{Result, SigmaError};
use crate::gaussian::{LOG_STD_MAX, LOG_STD_MIN};
use crate::nn::{Init, Linear, SeqLayout, Session, TransformerStack};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward width; 0 means the hidden dimension.
    pub ffn_dim: usize,
    pub decoder_temperature: f64,
    /// Stop gradients from the KL term into the interest prior.
    pub detach_prior: bool,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            blocks: 2,
            heads: 4,
            ffn_dim: 0,
            decoder_temperature: 1.0,
            detach_prior: false,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(SigmaError::Config(format!(
                "hidden dim {dim} must be divisible by heads {}",
                self.heads
            )));
        }
        if !(self.decoder_temperature > 0.0 && self.decoder_temperature.is_finite()) {
            return Err(SigmaError::Domain(format!(
                "decoder temperature {} must be positive",
                self.decoder_temperature
            )));
        }
        Ok(())
    }
}

/// Per-position diagonal Gaussian `N(μ_t, σ_t²)`.
#[derive(Clone, Debug)]
pub struct SequencePosterior {
    pub mean: Var,
    pub log_std: Var,
    pub layout: SeqLayout,
}

/// Mixture prior per position, as produced by the interest encoder.
#[derive(Clone, Copy, Debug)]
pub struct MixturePrior {
    /// Interest layout, `positions·k × d`.
    pub means: Var,
    pub log_stds: Var,
    /// `positions × k`.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct SequenceModel {
    pub positions: ParamId,
    pub enc_mean: TransformerStack,
    pub mean_head: Linear,
    pub enc_std: TransformerStack,
    pub std_head: Linear,
    pub decoder: TransformerStack,
    pub config: SequenceConfig,
}

impl SequenceModel {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, max_len: usize, config: SequenceConfig) -> Result<Self> {
        config.validate(dim)?;
        let ffn = if config.ffn_dim == 0 { dim } else { config.ffn_dim };
        let depth = config.blocks;
        let heads = config.heads;
        let std = 1.0 / (dim as f64).sqrt();
        Ok(SequenceModel {
            positions: init.normal("sequence.positions", max_len, dim, std),
            enc_mean: TransformerStack::new(init, "sequence.enc_mean", depth, dim, ffn, heads),
            mean_head: Linear::new(init, "sequence.mean_head", dim, dim),
            enc_std: TransformerStack::new(init, "sequence.enc_std", depth, dim, ffn, heads),
            std_head: Linear::new(init, "sequence.std_head", dim, dim),
            decoder: TransformerStack::new(init, "sequence.decoder", depth, dim, ffn, heads),
            config,
        })
    }

    pub fn max_len<T: Scalar>(&self, s: &Session<'_, T>) -> usize {
        s.params.value(self.positions).rows()
    }

    /// Posterior at every position. `positions` are offsets from the first real
    /// item of each row, so front padding does not shift them.
    pub fn encode<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        items: Var,
        positions: &[usize],
        layout: SeqLayout,
    ) -> SequencePosterior {
        let table = s.p(self.positions);
        let pos = s.graph.gather_rows(table, Rc::new(positions.to_vec()));
        let x = s.graph.add(items, pos);

        let xm = s.dropout(x);
        let hm = self.enc_mean.forward(s, xm, &layout);
        let mean = self.mean_head.forward(s, hm);

        let xs = s.dropout(x);
        let hs = self.enc_std.forward(s, xs, &layout);
        let raw = self.std_head.forward(s, hs);
        let log_std = s.graph.clamp(raw, T::of(LOG_STD_MIN), T::of(LOG_STD_MAX));
        SequencePosterior { mean, log_std, layout }
    }

    /// `z = μ + σ⊙ε` in training mode, `μ` otherwise.
    pub fn sample<T: Scalar>(&self, s: &mut Session<'_, T>, post: &SequencePosterior) -> Var {
        if !s.is_training() {
            return post.mean;
        }
        let std = s.graph.exp(post.log_std);
        let (r, c) = s.graph.shape(std);
        let eps = Matrix::randn(r, c, 1.0, s.rng);
        let eps = s.graph.constant(eps);
        let noise = s.graph.mul(std, eps);
        s.graph.add(post.mean, noise)
    }

    pub fn decode<T: Scalar>(&self, s: &mut Session<'_, T>, z: Var, layout: &SeqLayout) -> Var {
        self.decoder.forward(s, z, layout)
    }

    /// `Σ_t −log p(v_{t+1} | z_t)` over the given flat positions.
    pub fn recon_loss<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        decoded: Var,
        catalog: Var,
        positions: &[usize],
        targets: &[u32],
    ) -> Result<Var> {
        assert_eq!(positions.len(), targets.len());
        if positions.is_empty() {
            return Ok(s.graph.scalar(T::zero()));
        }
        let rows = s.graph.gather_rows(decoded, Rc::new(positions.to_vec()));
        let logits = item_logits(&mut s.graph, rows, catalog, self.config.decoder_temperature)?;
        let tg = Rc::new(targets.iter().map(|&t| t as usize - 1).collect());
        let ce = s.graph.cross_entropy_rows(logits, tg);
        Ok(s.graph.sum_all(ce))
    }
}

/// `û·Eᵀ / τ` over the catalog rows.
pub fn item_logits<T: Scalar>(g: &mut Graph<T>, decoded: Var, catalog: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(SigmaError::Domain(format!("decoder temperature {temperature} ≤ 0")));
    }
    let l = g.matmul_nt(decoded, catalog);
    Ok(g.scale(l, T::of(1.0 / temperature)))
}

/// Per-row `log N(x | μ, σ²)` as an `r×1` column.
pub fn log_density_rows<T: Scalar>(g: &mut Graph<T>, x: Var, mean: Var, log_std: Var) -> Var {
    let d = g.shape(x).1;
    let diff = g.sub(x, mean);
    let inv = g.neg(log_std);
    let inv = g.exp(inv);
    let std_diff = g.mul(diff, inv);
    let sq = g.square(std_diff);
    let half = g.scale(sq, T::of(0.5));
    let terms = g.add(half, log_std);
    let s = g.sum_cols(terms);
    let s = g.neg(s);
    g.add_scalar(s, T::of(-HALF_LN_2PI * d as f64))
}

/// Single-sample KL estimate `Σ_t [log q(z_t) − log Σ_i α_t^i N(z_t | m_t^i, ω_t^i)]`
/// over valid positions. Fails if a valid weight row is off the simplex.
pub fn mixture_kl<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    post: &SequencePosterior,
    prior: MixturePrior,
    detach_prior: bool,
) -> Result<Var> {
    let (n, k) = g.shape(prior.weights);
    let valid = post.layout.valid.clone();
    {
        let w = g.value(prior.weights);
        let tol = if T::BYTES == 4 { 1e-4 } else { 1e-8 };
        for (p, &ok) in valid.iter().enumerate() {
            if !ok {
                continue;
            }
            let row = w.row(p);
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > tol || row.iter().any(|v| *v < T::zero()) {
                return Err(SigmaError::Domain(format!(
                    "mixture weights at position {p} off the simplex (sum {sum})"
                )));
            }
        }
    }
    let (means, log_stds, weights) = if detach_prior {
        (g.detach(prior.means), g.detach(prior.log_stds), g.detach(prior.weights))
    } else {
        (prior.means, prior.log_stds, prior.weights)
    };
    let log_q = log_density_rows(g, z, post.mean, post.log_std);

    let rep: Vec<usize> = (0..n).flat_map(|p| std::iter::repeat_n(p, k)).collect();
    let z_rep = g.gather_rows(z, Rc::new(rep));
    let comp = log_density_rows(g, z_rep, means, log_stds);
    let comp = g.reshape(comp, n, k);
    let w = g.clamp(weights, T::of(1e-30).max(T::min_positive_value()), T::one());
    let lw = g.ln(w);
    let joint = g.add(comp, lw);
    let log_p = g.logsumexp_rows(joint);

    let per = g.sub(log_q, log_p);
    let per = g.mul(per, post.layout.mask_col);
    Ok(g.sum_all(per))
}

/// Closed-form `Σ_t KL(N(μ_t, σ_t²) ‖ N(0, I))` over valid positions.
pub fn standard_kl<T: Scalar>(g: &mut Graph<T>, post: &SequencePosterior) -> Var {
    crate::interest::kl_to_standard_rows(g, post.mean, post.log_std, post.layout.mask_col)
}
