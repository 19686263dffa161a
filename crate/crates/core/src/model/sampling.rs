use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::ProposalLabel;

/// Anchor indices chosen for one image's loss, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProposalSample {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl ProposalSample {
    /// Positives followed by negatives.
    pub fn all(&self) -> Vec<usize> {
        self.positives.iter().chain(&self.negatives).copied().collect()
    }
}

/// Draws at most `floor(n_total · pos_fraction)` positives and fills the rest of
/// `n_total` with negatives, both without replacement. `Ignore` anchors never appear.
pub fn sample_proposals(
    labels: &[ProposalLabel],
    n_total: usize,
    pos_fraction: f64,
    seed: u64,
) -> ProposalSample {
    assert!(n_total >= 1, "n_total must be positive");
    assert!(
        pos_fraction > 0.0 && pos_fraction < 1.0,
        "pos_fraction must lie in (0, 1)"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == ProposalLabel::Positive).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == ProposalLabel::Negative).collect();

    let pos_quota = (n_total as f64 * pos_fraction).floor() as usize;
    let positives = pick(&pos, pos_quota, &mut rng);
    let negatives = pick(&neg, n_total - positives.len(), &mut rng);
    ProposalSample {
        positives,
        negatives,
    }
}

fn pick(pool: &[usize], amount: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    let mut chosen: Vec<usize> = index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    chosen
}
