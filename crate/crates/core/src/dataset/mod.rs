//! Synthetic "video" trajectories, training quadruplets and their on-disk
//! container.

pub mod container;
pub mod quadruplet;
pub mod trajectory;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use container::{dataset_roundtrip, read_container, write_container, ContainerReader};
pub use quadruplet::{build_quadruplet, draw_pair, QuadMeta, Quadruplet};
pub use trajectory::{generate_trajectory, Trajectory};

use crate::rng::mix;
use crate::Result;

/// Layout of a generated corpus. Training and held-out identities come from
/// disjoint index ranges of the same master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub master_seed: u64,
    pub identities: usize,
    pub held_out: usize,
    pub frames: usize,
    pub pairs_per_identity: usize,
    pub res: usize,
    pub reconstruction_mode: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            master_seed: 0,
            identities: 200,
            held_out: 20,
            frames: 32,
            pairs_per_identity: 32,
            res: 64,
            reconstruction_mode: false,
        }
    }
}

impl CorpusSpec {
    /// Identity seed of the `index`-th identity; indices at or past
    /// `identities` are the held-out ones.
    pub fn identity_seed(&self, index: usize) -> u64 {
        mix(self.master_seed, index as u64)
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.identities).map(|i| self.identity_seed(i)).collect()
    }

    pub fn held_out_seeds(&self) -> Vec<u64> {
        (self.identities..self.identities + self.held_out)
            .map(|i| self.identity_seed(i))
            .collect()
    }

    fn pair_seed(identity_seed: u64, pair: usize) -> u64 {
        mix(identity_seed, 0x5041_4952_0000_0000 | pair as u64)
    }
}

/// Quadruplets for the given identity seeds, `pairs_per_identity` each, in
/// seed order. Generation runs in parallel; the output does not depend on
/// the number of worker threads.
pub fn generate_quadruplets(spec: &CorpusSpec, seeds: &[u64]) -> Result<Vec<Quadruplet>> {
    let per_identity: Vec<Vec<Quadruplet>> = seeds
        .par_iter()
        .map(|&seed| {
            let traj = generate_trajectory(seed, spec.frames)?;
            (0..spec.pairs_per_identity)
                .map(|k| {
                    build_quadruplet(
                        &traj,
                        CorpusSpec::pair_seed(seed, k),
                        spec.reconstruction_mode,
                        spec.res,
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_identity.into_iter().flatten().collect())
}

/// The training split of a corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Quadruplet>> {
    generate_quadruplets(spec, &spec.train_seeds())
}
