//! The joint model: shared item table, interest encoder, sequence VAE, and the
//! three-part training objective.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Gradients, ParamId, ParamStore, Var};
use crate::config::{TrainConfig, Variant};
use crate::corpus::SequenceBatch;
use crate::error::{Result, SigmaError};
use crate::interest::{orthogonality_loss, renormalize_rows, InterestConfig, InterestEncoder};
use crate::nn::{Init, Mode, SeqLayout, Session};
use crate::scalar::Scalar;
use crate::sequence::{item_logits, mixture_kl, standard_kl, MixturePrior, SequenceConfig, SequenceModel};
use crate::tensor::Matrix;

/// Per-sequence loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub sgm_recon: f64,
    pub sgm_kl: f64,
    pub mie_recon: f64,
    pub mie_kl: f64,
    pub orth: f64,
    pub total: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("sgm_recon", self.sgm_recon),
            ("sgm_kl", self.sgm_kl),
            ("mie_recon", self.mie_recon),
            ("mie_kl", self.mie_kl),
            ("orth", self.orth),
            ("total", self.total),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (part, value) in self.named() {
            if !value.is_finite() {
                return Err(SigmaError::NonFinite { part, value });
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &LossParts, w: f64) {
        self.sgm_recon += w * other.sgm_recon;
        self.sgm_kl += w * other.sgm_kl;
        self.mie_recon += w * other.mie_recon;
        self.mie_kl += w * other.mie_kl;
        self.orth += w * other.orth;
        self.total += w * other.total;
    }
}

/// Weights applied to the loss parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub interest: f64,
    pub orth: f64,
}

pub struct SigmaModel<T: Scalar> {
    pub params: ParamStore<T>,
    pub items: ParamId,
    pub interest: Option<InterestEncoder>,
    pub sequence: Option<SequenceModel>,
    pub config: TrainConfig,
    num_items: usize,
}

impl<T: Scalar> SigmaModel<T> {
    /// Builds a freshly initialized model for a catalog of `num_items` items
    /// (ids `1..=num_items`, 0 is padding).
    pub fn new(config: &TrainConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(SigmaError::Config("catalog is empty".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut table = Matrix::randn(num_items + 1, d, 1.0 / (d as f64).sqrt(), &mut rng);
        table.row_mut(0).fill(T::zero());
        let items = params.add("items", table);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let interest = if config.variant.uses_interest_model() {
            Some(InterestEncoder::new(&mut init, d, interest_config(config))?)
        } else {
            None
        };
        let sequence = if config.variant.uses_sequence_model() {
            Some(SequenceModel::new(
                &mut init,
                d,
                config.max_len,
                sequence_config(config),
            )?)
        } else {
            None
        };
        Ok(SigmaModel {
            params,
            items,
            interest,
            sequence,
            config: config.clone(),
            num_items,
        })
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            kl: self.config.effective_lambda(),
            interest: self.config.beta1,
            orth: self.config.effective_beta2(),
        }
    }

    /// Builds the loss of one batch on `s`. Every part is summed over positions and
    /// divided by the number of sequences; the orthogonality term is per batch.
    pub fn loss(
        &self,
        s: &mut Session<'_, T>,
        batch: &SequenceBatch,
        weights: LossWeights,
    ) -> Result<(Var, LossParts)> {
        let seqs = batch.rows();
        let steps = batch.width;
        let per_seq = T::of(1.0 / seqs.max(1) as f64);
        let table = s.p(self.items);
        let ids = Rc::new(batch.ids.iter().map(|&i| i as usize).collect());
        let emb = s.graph.gather_rows(table, ids);
        let catalog = s.graph.gather_rows(table, Rc::new((1..=self.num_items).collect()));
        let positions = batch.target_positions();
        let targets: Vec<u32> = positions.iter().map(|&p| batch.targets[p]).collect();
        for &t in &targets {
            if t as usize > self.num_items {
                return Err(SigmaError::Shape(format!(
                    "item id {t} outside catalog of {}",
                    self.num_items
                )));
            }
        }

        let mut parts = LossParts::default();
        let mut terms: Vec<Var> = Vec::new();

        let post_i = match &self.interest {
            Some(enc) => Some(enc.forward(s, emb, &batch.mask, seqs, steps)?),
            None => None,
        };

        if let (Some(enc), Some(post)) = (&self.interest, &post_i) {
            let recon = enc.recon_loss(s, post, catalog, &positions, &targets)?;
            let recon = s.graph.scale(recon, per_seq);
            let kl = s.graph.scale(post.kl, per_seq);
            let bank = s.p(enc.bank);
            let orth = orthogonality_loss(&mut s.graph, bank, enc.config.abs_orthogonality);
            parts.mie_recon = s.graph.scalar_value(recon).as_f64();
            parts.mie_kl = s.graph.scalar_value(kl).as_f64();
            parts.orth = s.graph.scalar_value(orth).as_f64();
            let w_i = if self.sequence.is_some() { weights.interest } else { 1.0 };
            let elbo = s.graph.add(recon, kl);
            terms.push(s.graph.scale(elbo, T::of(w_i)));
            if weights.orth != 0.0 {
                terms.push(s.graph.scale(orth, T::of(weights.orth)));
            }
        }

        if let Some(seq) = &self.sequence {
            let layout = SeqLayout::new(&mut s.graph, &batch.mask, seqs, steps);
            let rel = batch.relative_positions();
            let post = seq.encode(s, emb, &rel, layout.clone());
            let z = seq.sample(s, &post);
            let kl = match &post_i {
                Some(pi) => {
                    let prior = MixturePrior {
                        means: pi.mean,
                        log_stds: pi.log_std,
                        weights: pi.alpha,
                    };
                    mixture_kl(&mut s.graph, z, &post, prior, seq.config.detach_prior)?
                }
                None => standard_kl(&mut s.graph, &post),
            };
            let decoded = seq.decode(s, z, &layout);
            let recon = seq.recon_loss(s, decoded, catalog, &positions, &targets)?;
            let recon = s.graph.scale(recon, per_seq);
            let kl = s.graph.scale(kl, per_seq);
            parts.sgm_recon = s.graph.scalar_value(recon).as_f64();
            parts.sgm_kl = s.graph.scalar_value(kl).as_f64();
            terms.push(recon);
            if weights.kl != 0.0 {
                terms.push(s.graph.scale(kl, T::of(weights.kl)));
            }
        }

        let mut total = terms[0];
        for &t in &terms[1..] {
            total = s.graph.add(total, t);
        }
        parts.total = s.graph.scalar_value(total).as_f64();
        parts.check_finite()?;
        Ok((total, parts))
    }

    /// Gradients of the loss with the padding row of the item table zeroed.
    pub fn param_grads(&self, grads: Gradients<T>) -> Vec<Option<Matrix<T>>> {
        let mut g = grads.into_param_grads(self.params.len());
        if let Some(items) = g[self.items.index()].as_mut() {
            items.row_mut(0).fill(T::zero());
        }
        g
    }

    /// Keeps category embeddings on the unit sphere.
    pub fn after_step(&mut self) {
        if let Some(enc) = &self.interest {
            renormalize_rows(self.params.value_mut(enc.bank));
        }
    }

    /// Catalog scores for each history, one row per history, column `i` scoring
    /// item `i + 1`. Evaluation mode, no sampling.
    pub fn score(&self, histories: &[&[u32]], chunk: usize) -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(histories.len(), self.num_items);
        let chunk = chunk.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (c, part) in histories.chunks(chunk).enumerate() {
            let rows: Vec<(u32, &[u32])> = part.iter().map(|h| (0, *h)).collect();
            let batch = SequenceBatch::for_inference(&rows, self.config.max_len);
            let mut s = Session::new(&self.params, Mode::Eval, &mut rng);
            let scores = match &self.sequence {
                Some(seq) => self.sequence_scores(&mut s, seq, &batch)?,
                None => self.interest_scores(&mut s, &batch)?,
            };
            let v = s.graph.value(scores);
            for r in 0..part.len() {
                out.row_mut(c * chunk + r).copy_from_slice(v.row(r));
            }
        }
        Ok(out)
    }

    fn embed(&self, s: &mut Session<'_, T>, batch: &SequenceBatch) -> (Var, Var) {
        let table = s.p(self.items);
        let ids = Rc::new(batch.ids.iter().map(|&i| i as usize).collect());
        let emb = s.graph.gather_rows(table, ids);
        let catalog = s.graph.gather_rows(table, Rc::new((1..=self.num_items).collect()));
        (emb, catalog)
    }

    /// `z_T = μ_T`, decoded and scored against the catalog.
    fn sequence_scores(&self, s: &mut Session<'_, T>, seq: &SequenceModel, batch: &SequenceBatch) -> Result<Var> {
        let (emb, catalog) = self.embed(s, batch);
        let layout = SeqLayout::new(&mut s.graph, &batch.mask, batch.rows(), batch.width);
        let post = seq.encode(s, emb, &batch.relative_positions(), layout.clone());
        let decoded = seq.decode(s, post.mean, &layout);
        let last = s.graph.gather_rows(decoded, Rc::new(batch.last_positions()));
        item_logits(&mut s.graph, last, catalog, seq.config.decoder_temperature)
    }

    /// Max over interests of `⟨u^j, v⟩` at the last position, with `x = m`.
    /// Ranking the catalog by this score and cutting at K ≤ 40 gives the same list
    /// as pooling the top 40 items of every interest and re-ranking the pool.
    fn interest_scores(&self, s: &mut Session<'_, T>, batch: &SequenceBatch) -> Result<Var> {
        let enc = self
            .interest
            .as_ref()
            .ok_or_else(|| SigmaError::Incompatible("model has neither sequence nor interest part".into()))?;
        let (emb, catalog) = self.embed(s, batch);
        let post = enc.forward(s, emb, &batch.mask, batch.rows(), batch.width)?;
        let u = enc.project_interests(s, &post, &batch.last_positions());
        crate::interest::multi_interest_logits(&mut s.graph, u, catalog, enc.k(), enc.config.score_temperature)
    }

    /// Per-interest catalog scores at the last position of one history, `k × N`.
    pub fn interest_score_table(&self, history: &[u32]) -> Result<Matrix<T>> {
        let enc = self
            .interest
            .as_ref()
            .ok_or_else(|| SigmaError::Incompatible("model has no interest part".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = SequenceBatch::for_inference(&[(0, history)], self.config.max_len);
        let mut s = Session::new(&self.params, Mode::Eval, &mut rng);
        let (emb, catalog) = self.embed(&mut s, &batch);
        let post = enc.forward(&mut s, emb, &batch.mask, 1, batch.width)?;
        let u = enc.project_interests(&mut s, &post, &batch.last_positions());
        let all = s.graph.matmul_nt(u, catalog);
        let all = s.graph.scale(all, T::of(1.0 / enc.config.score_temperature));
        Ok(s.graph.value(all).clone())
    }
}

pub fn interest_config(c: &TrainConfig) -> InterestConfig {
    InterestConfig {
        categories: c.k,
        category_temperature: c.category_temperature,
        gumbel_temperature: c.gumbel_temperature,
        score_temperature: c.score_temperature,
        abs_orthogonality: c.abs_orthogonality,
        straight_through: true,
    }
}

pub fn sequence_config(c: &TrainConfig) -> SequenceConfig {
    SequenceConfig {
        blocks: c.blocks,
        heads: c.heads,
        ffn_dim: c.ffn_dim,
        decoder_temperature: c.decoder_temperature,
        detach_prior: c.detach_prior,
    }
}

/// Recognized variant names, for error messages and the ablation harness.
pub fn build_variant(name: &str, base: &TrainConfig) -> Result<TrainConfig> {
    let variant: Variant = name.parse()?;
    Ok(TrainConfig {
        variant,
        ..base.clone()
    })
}
