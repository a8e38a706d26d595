//! Joint training loop with validation-based early stopping.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig, ParamStore};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{BatchIter, PreparedCorpus};
use crate::error::{Result, SigmaError};
use crate::eval::{evaluate, Split};
use crate::model::{LossParts, SigmaModel};
use crate::nn::{Mode, Session};
use crate::scalar::Scalar;

/// Progress that survives a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_recall: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            epoch: 0,
            // below any attainable recall
            best_recall: -1.0,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    pub val_recall: f64,
    pub improved: bool,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer<T: Scalar> {
    pub model: SigmaModel<T>,
    pub optimizer: Adam<T>,
    pub state: TrainState,
    /// Skip parameter updates (losses are still computed).
    pub frozen: bool,
    pub validation_k: usize,
    batch_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    best: Option<ParamStore<T>>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &TrainConfig, corpus: &PreparedCorpus) -> Result<Self> {
        if corpus.splits.is_empty() {
            return Err(SigmaError::EmptyCorpus(format!(
                "corpus `{}` has no users",
                corpus.dataset
            )));
        }
        if !corpus.splits.iter().any(|s| s.train.items.len() >= 2) {
            return Err(SigmaError::EmptyCorpus(format!(
                "corpus `{}` has no training sequence with a next-item target",
                corpus.dataset
            )));
        }
        let model = SigmaModel::new(config, corpus.num_items(), config.seed)?;
        let optimizer = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &model.params,
        );
        Ok(Trainer {
            model,
            optimizer,
            state: TrainState::default(),
            frozen: false,
            validation_k: 20,
            batch_rng: stream(config.seed, 1),
            noise_rng: stream(config.seed, 2),
            best: None,
        })
    }

    fn kl_scale(&self) -> f64 {
        let w = self.model.config.kl_warmup_epochs;
        if w == 0 {
            1.0
        } else {
            ((self.state.epoch + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// One pass over the shuffled training sequences; returns losses averaged over
    /// batches.
    pub fn train_epoch(&mut self, corpus: &PreparedCorpus) -> Result<LossParts> {
        let cfg = &self.model.config;
        let mut weights = self.model.weights();
        weights.kl *= self.kl_scale();
        let mode = Mode::Train { dropout: cfg.dropout };
        let batches: Vec<_> =
            BatchIter::new(&corpus.splits, cfg.batch_size, cfg.max_len, &mut self.batch_rng).collect();
        let mut mean = LossParts::default();
        let n = batches.len().max(1) as f64;
        for batch in &batches {
            let (parts, grads) = {
                let mut s = Session::new(&self.model.params, mode, &mut self.noise_rng);
                let (loss, parts) = self.model.loss(&mut s, batch, weights)?;
                let grads = if self.frozen {
                    None
                } else {
                    Some(self.model.param_grads(s.graph.backward(loss)))
                };
                (parts, grads)
            };
            if let Some(g) = grads {
                self.optimizer.step(&mut self.model.params, &g);
                self.model.after_step();
            }
            mean.add_scaled(&parts, 1.0 / n);
        }
        Ok(mean)
    }

    pub fn validate(&self, corpus: &PreparedCorpus) -> Result<f64> {
        let k = self.validation_k;
        let r = evaluate(
            &self.model,
            corpus,
            &[k],
            Split::Validation,
            None,
            self.model.config.batch_size,
        )?;
        Ok(r.metrics[0].recall)
    }

    /// Trains one epoch, validates, and updates the early-stopping state.
    pub fn run_epoch(&mut self, corpus: &PreparedCorpus) -> Result<EpochRecord> {
        let start = Instant::now();
        let loss = self.train_epoch(corpus)?;
        let val_recall = self.validate(corpus)?;
        let improved = val_recall > self.state.best_recall;
        if improved {
            self.state.best_recall = val_recall;
            self.state.best_epoch = self.state.epoch;
            self.state.epochs_since_best = 0;
            self.best = Some(self.model.params.clone());
        } else {
            self.state.epochs_since_best += 1;
        }
        let record = EpochRecord {
            epoch: self.state.epoch,
            loss,
            val_recall,
            improved,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        self.state.epoch += 1;
        Ok(record)
    }

    pub fn should_stop(&self) -> bool {
        self.state.epochs_since_best >= self.model.config.patience.max(1)
            || self.state.epoch >= self.model.config.max_epochs
    }

    /// Runs until patience or the epoch cap is reached. Each epoch is appended to
    /// `log` as one JSON line; the best model so far is written to `checkpoint`.
    pub fn fit(
        &mut self,
        corpus: &PreparedCorpus,
        mut log: Option<&mut dyn Write>,
        checkpoint_path: Option<&Path>,
    ) -> Result<TrainSummary> {
        let mut history = Vec::new();
        while !self.should_stop() {
            let rec = self.run_epoch(corpus)?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| SigmaError::io("metrics log", e))?;
            }
            if rec.improved {
                if let Some(p) = checkpoint_path {
                    checkpoint::save(p, &self.model, corpus, Some(&self.optimizer), self.state)?;
                }
            }
            history.push(rec);
        }
        let summary = TrainSummary {
            epochs: self.state.epoch,
            best_epoch: self.state.best_epoch,
            best_recall: self.state.best_recall,
            stopped_early: self.state.epochs_since_best >= self.model.config.patience.max(1),
            history,
        };
        self.restore_best();
        Ok(summary)
    }

    /// Puts the best parameters seen so far back into the model.
    pub fn restore_best(&mut self) {
        if let Some(b) = self.best.take() {
            self.model.params = b;
        }
    }
}
