//! Training loop: encode, partition, retrieve once per example, then a
//! per-block noise-prediction loss with gradients accumulated across blocks.

use std::time::Instant;

use rayon::prelude::*;

use crate::blocks::{flatten_block, partition};
use crate::denoiser::{CondMode, DenoiserModel, GradientTape};
use crate::error::{Error, Result};
use crate::retrieval::{NeighborSet, QueryMode, RetrievalDB};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub step_size: f64,
    pub k: usize,
    pub exclude_self: bool,
    pub seed: u64,
    /// Compute per-block gradient contributions concurrently. Results are
    /// identical to sequential execution (summation order is canonical).
    pub parallel_blocks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 1,
            step_size: 1e-3,
            k: 5,
            exclude_self: true,
            seed: 7,
            parallel_blocks: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub wall_secs: f64,
}

/// Query vector for a latent under the database's query mode.
pub fn query_vector(db: &RetrievalDB, z: &Tensor) -> Result<Vec<f64>> {
    let blocks = partition(db.layout(), z)?;
    Ok(match db.query_mode() {
        QueryMode::FirstBlock => flatten_block(&blocks[0]),
        QueryMode::FullLatent => blocks.iter().flat_map(flatten_block).collect(),
    })
}

fn block_loss(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    blocks: &[Tensor],
    neighbors: Option<&NeighborSet>,
    i: usize,
    rng: &Rng,
) -> Result<(f64, GradientTape)> {
    let mut r = rng.clone();
    let t = 1 + r.next_below(schedule.t_max);
    let eps = Tensor::randn(&mut r, blocks[i].shape())?;
    let z_t = schedule.forward_diffuse(&blocks[i], t, &eps)?;
    let nbr_rows: &[Vec<f64>] = match neighbors {
        Some(ns) => &ns.per_block[i],
        None => &[],
    };
    let prev_holder;
    let prev = match model.cfg.cond_mode {
        CondMode::RagPlusPrev => {
            prev_holder = if i == 0 {
                Tensor::zeros(blocks[0].shape())
            } else {
                blocks[i - 1].clone()
            };
            Some(&prev_holder)
        }
        _ => None,
    };
    let (eps_hat, cache) = model.forward_cached(&z_t, t, nbr_rows, i, prev)?;
    let diff = eps_hat.sub(&eps)?;
    let loss = diff.sq_norm();
    let mut tape = model.zero_tape();
    model.backward(&cache, &diff.scale(2.0), &mut tape);
    Ok((loss, tape))
}

/// Loss and gradients for one training latent. Retrieval runs exactly once;
/// the resulting neighbor set is reused for every block. The per-(example,
/// block) noise streams are split from `rng`, so sequential and parallel
/// execution consume identical randomness.
pub fn loss_for_example(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    db: Option<&RetrievalDB>,
    z: &Tensor,
    row_id: Option<usize>,
    rng: &Rng,
    config: &TrainConfig,
) -> Result<(f64, GradientTape)> {
    let layout_b = model.cfg.b;
    let neighbors = if model.cfg.cond_mode.uses_retrieval() {
        let db = db.ok_or_else(|| {
            Error::EmptyInput("retrieval-conditioned training requires a database".into())
        })?;
        if db.is_empty() {
            return Err(Error::EmptyInput("retrieval database".into()));
        }
        let query = query_vector(db, z)?;
        let exclude = if config.exclude_self { row_id } else { None };
        Some(db.query_knn(&query, config.k, exclude)?)
    } else {
        None
    };
    let blocks = if let Some(db) = db.filter(|_| neighbors.is_some()) {
        partition(db.layout(), z)?
    } else {
        // NoRag path never touches the database; partition via the model shape.
        let layout = crate::blocks::BlockLayout::new(
            layout_b,
            z.shape()[0],
            z.shape()[1],
            z.shape()[2],
        )?;
        partition(&layout, z)?
    };

    let per_block: Vec<Result<(f64, GradientTape)>> = if config.parallel_blocks {
        (0..layout_b)
            .into_par_iter()
            .map(|i| block_loss(model, schedule, &blocks, neighbors.as_ref(), i, &rng.split(i as u64)))
            .collect()
    } else {
        (0..layout_b)
            .map(|i| block_loss(model, schedule, &blocks, neighbors.as_ref(), i, &rng.split(i as u64)))
            .collect()
    };

    let mut total_loss = 0.0;
    let mut total_tape = model.zero_tape();
    for item in per_block {
        let (loss, tape) = item?;
        total_loss += loss;
        total_tape.add_assign(&tape);
    }
    Ok((total_loss, total_tape))
}

/// Plain SGD over `epochs` passes through the dataset. `latents[j]` is
/// assumed to occupy database row j (used for self-exclusion).
pub fn train(
    model: &mut DenoiserModel,
    schedule: &NoiseSchedule,
    db: Option<&RetrievalDB>,
    latents: &[Tensor],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if latents.is_empty() {
        return Err(Error::EmptyInput("training latents".into()));
    }
    let start = Instant::now();
    let root = Rng::new(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let epoch_rng = root.split(epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batch_tape = model.zero_tape();
        let mut batch_fill = 0usize;
        for (j, z) in latents.iter().enumerate() {
            let (loss, tape) = loss_for_example(
                model,
                schedule,
                db,
                z,
                Some(j),
                &epoch_rng.split(j as u64),
                config,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss non-finite at epoch {epoch}, example {j}"
                )));
            }
            epoch_loss += loss;
            batch_tape.add_assign(&tape);
            batch_fill += 1;
            if batch_fill == config.batch.max(1) || j + 1 == latents.len() {
                model.sgd_step(&batch_tape, config.step_size / batch_fill as f64);
                batch_tape = model.zero_tape();
                batch_fill = 0;
            }
        }
        if !model.params.is_finite() {
            return Err(Error::Diverged(format!("parameters non-finite after epoch {epoch}")));
        }
        epoch_losses.push(epoch_loss / latents.len() as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}
