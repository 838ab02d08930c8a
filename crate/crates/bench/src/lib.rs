//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toolforge_core::agents::AgentKind;
use toolforge_core::hitl::{InterventionCandidate, Phase};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` triggered intervention candidates with mixed agents and costs.
pub fn interventions(n: usize, seed: u64) -> Vec<InterventionCandidate> {
    let mut rng = rng(seed);
    (0..n)
        .map(|index| InterventionCandidate {
            index,
            agent: AgentKind::ALL[index % 4],
            phase: if index % 2 == 0 { Phase::PreInference } else { Phase::PostInference },
            benefit: rng.gen_range(0.0..5.0),
            time_cost: rng.gen_range(10.0..120.0),
            triggered: true,
            reliability_after: 0.95,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn inputs_are_seeded() {
        assert_eq!(super::interventions(6, 1), super::interventions(6, 1));
    }
}
