//! Generation: pseudo-query retrieval, independent per-block reverse
//! diffusion from pure noise, reassembly, decode.

use rayon::prelude::*;

use crate::blocks::{reassemble, BlockLayout};
use crate::codec::CodecModel;
use crate::denoiser::{CondMode, DenoiserModel};
use crate::error::{Error, Result};
use crate::retrieval::{NeighborSet, RetrievalDB};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub k: usize,
    pub seed: u64,
    /// Keep the sigma_t noise term at t == 1 (the literal update); off by
    /// default so the final step is noiseless.
    pub noise_at_t1: bool,
    pub parallel_blocks: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_samples: 16,
            k: 5,
            seed: 11,
            noise_at_t1: false,
            parallel_blocks: false,
        }
    }
}

/// One generated latent plus the retrieval bookkeeping behind it.
#[derive(Debug, Clone)]
pub struct SampleLatent {
    pub latent: Tensor,
    pub neighbors: Option<NeighborSet>,
    pub pseudo_row: Option<usize>,
}

/// The reverse update z_{t-1} = (z_t - beta_t/sqrt(1-abar_t) * eps_hat) /
/// sqrt(alpha_t) [+ sigma_t * noise].
pub fn reverse_update(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let beta = schedule.beta_at(t)?;
    let alpha = schedule.alpha_at(t)?;
    let abar = schedule.alpha_bar_at(t)?;
    let mut out = z_t
        .sub(&eps_hat.scale(beta / (1.0 - abar).sqrt()))?
        .scale(1.0 / alpha.sqrt());
    if let Some(noise) = noise {
        out = out.add(&noise.scale(schedule.sigma_at(t)?))?;
    }
    Ok(out)
}

/// One denoising step for block `i`, drawing the sigma_t noise from `rng`
/// (omitted at t == 1 unless `noise_at_t1`).
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    t: usize,
    neighbors: &[Vec<f64>],
    i: usize,
    rng: &mut Rng,
    prev: Option<&Tensor>,
    noise_at_t1: bool,
) -> Result<Tensor> {
    let eps_hat = model.predict_noise(z_t, t, neighbors, i, prev)?;
    let noise = if t > 1 || noise_at_t1 {
        Some(Tensor::randn(rng, z_t.shape())?)
    } else {
        None
    };
    reverse_update(schedule, z_t, t, &eps_hat, noise.as_ref())
}

fn run_block_chain(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    neighbors: &[Vec<f64>],
    i: usize,
    mut rng: Rng,
    prev: Option<&Tensor>,
    config: &SampleConfig,
) -> Result<Tensor> {
    let mut z = Tensor::randn(&mut rng, &model.cfg.block_shape())?;
    for t in (1..=schedule.t_max).rev() {
        z = reverse_step(
            model,
            schedule,
            &z,
            t,
            neighbors,
            i,
            &mut rng,
            prev,
            config.noise_at_t1,
        )?;
    }
    Ok(z)
}

/// Generate `n_samples` latents. Each sample seeds retrieval with a random
/// pseudo-query row; every block conditions on the same retrieved rows.
/// Block 0 is generated like any other block, never copied from the query.
pub fn sample_latents(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    db: Option<&RetrievalDB>,
    layout: &BlockLayout,
    config: &SampleConfig,
) -> Result<Vec<SampleLatent>> {
    let uses_db = model.cfg.cond_mode.uses_retrieval();
    if uses_db {
        let db = db.ok_or_else(|| {
            Error::EmptyInput("retrieval-conditioned sampling requires a database".into())
        })?;
        if db.is_empty() {
            return Err(Error::EmptyInput("retrieval database".into()));
        }
    }
    let root = Rng::new(config.seed);
    let mut out = Vec::with_capacity(config.n_samples);
    for s in 0..config.n_samples {
        let sample_rng = root.split(s as u64);
        let (neighbors, pseudo_row) = if uses_db {
            let db = db.unwrap();
            let mut query_rng = sample_rng.split(layout.b as u64);
            let (query, row) = db.pseudo_query(&mut query_rng)?;
            (Some(db.query_knn(&query, config.k, None)?), Some(row))
        } else {
            (None, None)
        };
        let empty: Vec<Vec<f64>> = Vec::new();
        let blocks: Vec<Tensor> = match model.cfg.cond_mode {
            CondMode::RagPlusPrev => {
                // Each block conditions on the finished previous block, so the
                // chain is inherently sequential.
                let ns = neighbors.as_ref().unwrap();
                let mut blocks: Vec<Tensor> = Vec::with_capacity(layout.b);
                for i in 0..layout.b {
                    let prev = if i == 0 {
                        Tensor::zeros(&model.cfg.block_shape())
                    } else {
                        blocks[i - 1].clone()
                    };
                    blocks.push(run_block_chain(
                        model,
                        schedule,
                        &ns.per_block[i],
                        i,
                        sample_rng.split(i as u64),
                        Some(&prev),
                        config,
                    )?);
                }
                blocks
            }
            _ => {
                let chain = |i: usize| {
                    let rows = neighbors
                        .as_ref()
                        .map_or(empty.as_slice(), |ns| ns.per_block[i].as_slice());
                    run_block_chain(
                        model,
                        schedule,
                        rows,
                        i,
                        sample_rng.split(i as u64),
                        None,
                        config,
                    )
                };
                if config.parallel_blocks {
                    (0..layout.b)
                        .into_par_iter()
                        .map(chain)
                        .collect::<Result<_>>()?
                } else {
                    (0..layout.b).map(chain).collect::<Result<_>>()?
                }
            }
        };
        out.push(SampleLatent {
            latent: reassemble(layout, &blocks)?,
            neighbors,
            pseudo_row,
        });
    }
    Ok(out)
}

/// Full generation path: sample latents, then decode to images.
pub fn sample(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    db: Option<&RetrievalDB>,
    codec: &CodecModel,
    layout: &BlockLayout,
    config: &SampleConfig,
) -> Result<Vec<Tensor>> {
    sample_latents(model, schedule, db, layout, config)?
        .into_iter()
        .map(|s| codec.decode(&s.latent))
        .collect()
}
