//! Feature-similarity pairing attack: a curious client tries to re-pair
//! permuted intermediate representations across blocks by nearest-distance
//! matching, quantifying how much the permutation and block-sampling
//! defenses actually hide.

use crate::error::{Error, Result};
use crate::model::{block_forward_approx, embed_forward, TransformerModel};
use crate::privacy::{gen_permutations, sbs_mask, Permutation};
use crate::seeding::derive_seed;
use crate::tensor::Tensor;
use serde::Serialize;

/// Matrix of pairwise L2 distances: entry (i, j) = ||A_i - B_j||_2 over
/// flattened per-sample tensors.
pub fn pairwise_l2(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "pairwise_l2 over {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] = a[i].l2_distance(&b[j])?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MatchStrategy {
    /// Minimum-total-cost assignment (shortest augmenting paths).
    Optimal,
    /// Row-by-row nearest unmatched column.
    Greedy,
}

/// Recover a sample correspondence from a square distance matrix. The
/// returned permutation maps each row of the first batch to its matched
/// column in the second. Ties break deterministically by index.
pub fn match_permutation(distances: &Tensor, strategy: MatchStrategy) -> Result<Permutation> {
    if distances.shape().len() != 2 || distances.shape()[0] != distances.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "assignment needs a square matrix, got {:?}",
            distances.shape()
        )));
    }
    let assignment = match strategy {
        MatchStrategy::Optimal => min_cost_assignment(distances),
        MatchStrategy::Greedy => greedy_assignment(distances),
    };
    Permutation::new(assignment)
}

fn greedy_assignment(cost: &Tensor) -> Vec<usize> {
    let n = cost.shape()[0];
    let mut taken = vec![false; n];
    let mut out = vec![0usize; n];
    for i in 0..n {
        let row = &cost.data()[i * n..(i + 1) * n];
        let mut best = None;
        for (j, &c) in row.iter().enumerate() {
            if taken[j] {
                continue;
            }
            match best {
                None => best = Some((j, c)),
                Some((_, bc)) if c < bc => best = Some((j, c)),
                _ => {}
            }
        }
        let (j, _) = best.expect("column available");
        taken[j] = true;
        out[i] = j;
    }
    out
}

/// O(n^3) shortest-augmenting-path assignment (Jonker-Volgenant style) on a
/// dense cost matrix.
fn min_cost_assignment(cost: &Tensor) -> Vec<usize> {
    let n = cost.shape()[0];
    let c = |i: usize, j: usize| cost.data()[i * n + j];
    // potentials and matching over a virtual 0th column/row offset
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assigned_row = vec![n; n + 1]; // column -> row
    for i in 0..n {
        let mut j0 = n; // virtual start column
        assigned_row[j0] = i;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        let mut way = vec![n; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0 + 1] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    if assigned_row[j] != n {
                        u[assigned_row[j] + 1] += delta;
                    }
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == n {
                break;
            }
        }
        // augment along the alternating path
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for (j, &i) in assigned_row.iter().enumerate().take(n) {
        out[i] = j;
    }
    out
}

/// Outcome of attacking one block pair.
#[derive(Debug, Clone, Serialize)]
pub struct PairingResult {
    pub block_lo: usize,
    pub block_hi: usize,
    #[serde(skip)]
    pub distance_matrix: Tensor,
    pub inferred_mapping: Vec<usize>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AttackDefenses {
    /// Restrict visible blocks with a fresh sampling mask per trial.
    pub stochastic_blocks: bool,
    pub constrained: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackSummary {
    pub gap: usize,
    pub batch_size: usize,
    pub chance: f64,
    pub mean_accuracy: f64,
    pub pairs_attacked: usize,
    pub results: Vec<PairingResult>,
    pub degenerate_batch: bool,
}

/// Mount the pairing attack on the client-visible views of one batch.
///
/// The attacker sees each available block's per-sample outputs in that
/// block's own permutation frame and tries to re-pair samples between the
/// closest pair of visible blocks separated by `gap`. Accuracy is the
/// fraction of correctly re-paired samples; chance for a uniform random
/// bijection is 1/n.
pub fn attack_experiment(
    model: &TransformerModel,
    batch: &[Tensor],
    gap: usize,
    defenses: AttackDefenses,
    trials: usize,
    seed: u64,
) -> Result<AttackSummary> {
    if gap == 0 {
        return Err(Error::InvalidParam("gap must be >= 1".into()));
    }
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let num_blocks = model.config.num_blocks;
    // plaintext block outputs per sample, exactly what a client could
    // assemble from relayed ciphertexts
    let mut per_block: Vec<Vec<Tensor>> = vec![Vec::with_capacity(n); num_blocks];
    for x in batch {
        let mut cur = embed_forward(x, &model.embed)?;
        for (l, p) in model.blocks.iter().enumerate() {
            let step = block_forward_approx(&cur, p, &model.config, &model.kernels)?;
            cur = step.out.clone();
            per_block[l].push(step.out);
        }
    }
    let mut results = Vec::new();
    let mut total_acc = 0.0;
    let mut attacked = 0usize;
    for trial in 0..trials.max(1) {
        let trial_seed = derive_seed(seed, "attack-trial", &[trial as u64]);
        let perms = gen_permutations(n, num_blocks, trial_seed)?;
        let visible: Vec<bool> = if defenses.stochastic_blocks {
            sbs_mask(num_blocks, defenses.constrained, trial_seed)?
                .selected
        } else {
            vec![true; num_blocks]
        };
        let visible_idx: Vec<usize> = (0..num_blocks).filter(|&l| visible[l]).collect();
        for w in visible_idx.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi - lo != gap {
                continue;
            }
            let view_lo = perms.block(lo + 1).apply_items(&per_block[lo])?;
            let view_hi = perms.block(hi + 1).apply_items(&per_block[hi])?;
            let distances = pairwise_l2(&view_lo, &view_hi)?;
            let inferred = match_permutation(&distances, MatchStrategy::Optimal)?;
            // ground truth: row i of view_lo is sample pi_lo(i); its partner
            // sits at the row of view_hi holding the same sample
            let pi_lo = perms.block(lo + 1);
            let pi_hi_inv = perms.block(hi + 1).inverse();
            let mut correct = 0usize;
            for i in 0..n {
                let truth = pi_hi_inv.mapping()[pi_lo.mapping()[i]];
                if inferred.mapping()[i] == truth {
                    correct += 1;
                }
            }
            let accuracy = correct as f64 / n as f64;
            total_acc += accuracy;
            attacked += 1;
            results.push(PairingResult {
                block_lo: lo + 1,
                block_hi: hi + 1,
                distance_matrix: distances,
                inferred_mapping: inferred.mapping().to_vec(),
                accuracy,
            });
        }
    }
    Ok(AttackSummary {
        gap,
        batch_size: n,
        chance: 1.0 / n as f64,
        mean_accuracy: if attacked == 0 {
            0.0
        } else {
            total_acc / attacked as f64
        },
        pairs_attacked: attacked,
        results,
        degenerate_batch: n == 1,
    })
}

/// Distance matrix as CSV rows for external heatmap plotting.
pub fn distance_matrix_csv(m: &Tensor) -> String {
    let n = m.shape()[1];
    let mut out = String::new();
    for (i, v) in m.data().iter().enumerate() {
        out.push_str(&format!("{v:.6}"));
        if (i + 1) % n == 0 {
            out.push('\n');
        } else {
            out.push(',');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_matrix_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
        let d = pairwise_l2(&a, &a).unwrap();
        for i in 0..4 {
            assert_eq!(d.data()[i * 4 + i], 0.0);
        }
        // orthonormal rows: off-diagonal distance sqrt(2)
        let e: Vec<Tensor> = (0..3)
            .map(|i| {
                let mut t = Tensor::zeros(&[1, 3]);
                t.data_mut()[i] = 1.0;
                t
            })
            .collect();
        let d = pairwise_l2(&e, &e).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 2f64.sqrt() };
                assert!((d.data()[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
        // brute-force check on random batches
        let b: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
        let d = pairwise_l2(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let brute = a[i]
                    .data()
                    .iter()
                    .zip(b[j].data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!((d.data()[i * 4 + j] - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assignment_recovers_planted_permutation() {
        let n = 6;
        let planted = Permutation::new(vec![3, 0, 5, 1, 4, 2]).unwrap();
        let mut cost = Tensor::full(&[n, n], 10.0);
        for i in 0..n {
            cost.data_mut()[i * n + planted.mapping()[i]] = 0.1;
        }
        for strategy in [MatchStrategy::Optimal, MatchStrategy::Greedy] {
            let got = match_permutation(&cost, strategy).unwrap();
            assert_eq!(got.mapping(), planted.mapping(), "{strategy:?}");
        }
    }

    #[test]
    fn optimal_assignment_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cost = Tensor::uniform(&[3, 3], 0.0, 1.0, &mut rng);
            let got = match_permutation(&cost, MatchStrategy::Optimal).unwrap();
            let got_cost: f64 = (0..3).map(|i| cost.data()[i * 3 + got.mapping()[i]]).sum();
            let mut best = f64::INFINITY;
            for p in [
                [0, 1, 2],
                [0, 2, 1],
                [1, 0, 2],
                [1, 2, 0],
                [2, 0, 1],
                [2, 1, 0],
            ] {
                let c: f64 = (0..3).map(|i| cost.data()[i * 3 + p[i]]).sum();
                best = best.min(c);
            }
            assert!((got_cost - best).abs() < 1e-12, "{got_cost} vs {best}");
        }
    }

    #[test]
    fn equal_costs_yield_valid_bijection() {
        let cost = Tensor::ones(&[4, 4]);
        let got = match_permutation(&cost, MatchStrategy::Optimal).unwrap();
        assert_eq!(got.len(), 4);
        let greedy = match_permutation(&cost, MatchStrategy::Greedy).unwrap();
        // greedy tie-break by index is the identity
        assert!(greedy.is_identity());
    }

    #[test]
    fn non_square_rejected() {
        let cost = Tensor::zeros(&[2, 3]);
        assert!(match_permutation(&cost, MatchStrategy::Optimal).is_err());
    }
}
