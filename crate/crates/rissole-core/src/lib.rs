//! Block-wise retrieval-augmented latent diffusion at desk scale.
//!
//! A latent image is generated one spatial block at a time; cross-block
//! coherence comes from conditioning each block on the matching blocks of k
//! nearest neighbors retrieved from an external database.

pub mod blocks;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use blocks::BlockLayout;
pub use error::{Error, Result};
pub use retrieval::{NeighborSet, QueryMode, RetrievalDB};
pub use rng::Rng;
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
