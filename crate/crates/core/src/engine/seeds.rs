//! Per-role random streams derived from a run seed.
//!
//! Every consumer of randomness gets its own ChaCha stream, so changing one
//! axis of an experiment (say the perturbation scale) never shifts the draws
//! seen by another (say the noise batches).

use crate::nn::LayerId;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Teacher layer initialization; layers shared with the student reuse these draws.
    TeacherInit(LayerId),
    /// Student layers that are not shared with the teacher.
    StudentInit(LayerId),
    TeacherBatching,
    /// Training noise, one stream per global student batch index.
    Noise(u64),
    /// Held-out noise for the aux-loss evaluation, one stream per batch.
    EvalNoise(u64),
    /// Pre-distillation head perturbation.
    Perturbation,
    /// Post-hoc class-head perturbation at evaluation.
    PosthocPerturb,
    Bootstrap,
}

impl Stream {
    fn id(self) -> u64 {
        let (role, index) = match self {
            Stream::TeacherInit(l) => (1, l.stream_index()),
            Stream::StudentInit(l) => (2, l.stream_index()),
            Stream::TeacherBatching => (3, 0),
            Stream::Noise(i) => (4, i),
            Stream::EvalNoise(i) => (5, i),
            Stream::Perturbation => (6, 0),
            Stream::PosthocPerturb => (7, 0),
            Stream::Bootstrap => (8, 0),
        };
        debug_assert!(index < 1 << 56);
        (role << 56) | index
    }

    pub fn rng(self, seed: u64) -> Rng {
        Rng::with_stream(seed, self.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        let ids = [
            Stream::TeacherInit(LayerId::Feature(0)),
            Stream::TeacherInit(LayerId::AuxHead),
            Stream::StudentInit(LayerId::Feature(0)),
            Stream::TeacherBatching,
            Stream::Noise(0),
            Stream::Noise(1),
            Stream::EvalNoise(0),
            Stream::Perturbation,
            Stream::PosthocPerturb,
            Stream::Bootstrap,
        ];
        let mut firsts: Vec<u64> = ids.iter().map(|s| s.rng(7).next_u64()).collect();
        firsts.sort_unstable();
        firsts.dedup();
        assert_eq!(firsts.len(), ids.len());
    }
}
