//! Model-privacy defenses: per-block sample permutations with
//! relative-product disclosure, the stochastic block sampling chain, and
//! homomorphic noise masking for non-selected blocks.
//!
//! Convention: a permutation acts on the sample axis of a batch so that
//! output slot `i` holds input sample `mapping[i]`. All relative products
//! are expressed in this convention; `Permutation::then` composes two
//! applications in application order.

use crate::adapter::AdapterParams;
use crate::error::{Error, Result};
use crate::he::{he_add_plain, Ciphertext};
use crate::kernels::ExactValue;
use crate::model::{head_forward, HeadParams};
use crate::seeding::derive_rng;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::InvalidParam("mapping is not a bijection".into()));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    /// Composition in application order: applying `self` then `next` to a
    /// batch equals applying `self.then(next)` once.
    pub fn then(&self, next: &Permutation) -> Result<Permutation> {
        if self.len() != next.len() {
            return Err(Error::ShapeMismatch("composing permutations of different sizes".into()));
        }
        Ok(Permutation {
            mapping: next.mapping.iter().map(|&j| self.mapping[j]).collect(),
        })
    }

    /// Relative product `self^{-1} . other`: applied to a batch in
    /// `self`-permuted order, restores it to `other`-permuted order.
    pub fn relative_to(&self, other: &Permutation) -> Result<Permutation> {
        self.inverse().then(other)
    }

    /// Reorder a slice of per-sample items.
    pub fn apply_items<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        if items.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "permutation of size {} applied to {} items",
                self.len(),
                items.len()
            )));
        }
        Ok(self.mapping.iter().map(|&m| items[m].clone()).collect())
    }

    /// Permute the rows of a 2-D tensor whose leading axis is the sample
    /// axis.
    pub fn apply_rows(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() != 2 || batch.shape()[0] != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "permutation of size {} on rows of {:?}",
                self.len(),
                batch.shape()
            )));
        }
        let rows: Vec<Tensor> = self
            .mapping
            .iter()
            .map(|&m| batch.slice_rows(m, m + 1))
            .collect::<Result<_>>()?;
        Tensor::stack_rows(&rows)
    }
}

/// Per-round permutations for the L blocks plus the label frame, together
/// with the only products ever disclosed to clients.
#[derive(Debug, Clone)]
pub struct PermutationSet {
    /// Block permutations 1..=L followed by the label permutation L+1.
    pub per_block: Vec<Permutation>,
    /// Disclosed frame steps: entry l is per_block[l]^{-1} . per_block[l+1]
    /// for l in 0..L, i.e. every product needed to walk from the frame of
    /// block l+1 to the next frame, ending at the label frame.
    pub steps: Vec<Permutation>,
    /// Disclosed wraparound product per_block[L-1]^{-1} . per_block[0] that
    /// moves the final block output into the frame of block 1.
    pub wrap: Permutation,
}

impl PermutationSet {
    pub fn num_blocks(&self) -> usize {
        self.per_block.len() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.per_block[0].len()
    }

    pub fn block(&self, l: usize) -> &Permutation {
        &self.per_block[l]
    }

    pub fn label_frame(&self) -> &Permutation {
        self.per_block.last().unwrap()
    }

    /// Identity defenses: every permutation is the identity.
    pub fn identity(n: usize, num_blocks: usize) -> Self {
        let per_block = vec![Permutation::identity(n); num_blocks + 1];
        let steps = vec![Permutation::identity(n); num_blocks];
        Self {
            per_block,
            steps,
            wrap: Permutation::identity(n),
        }
    }

    /// Product of the disclosed relatives around the block cycle
    /// (wrap, then every block-to-block step); the identity for any
    /// correctly derived set.
    pub fn cycle_product(&self) -> Result<Permutation> {
        let mut acc = self.wrap.clone();
        for step in &self.steps[..self.num_blocks() - 1] {
            acc = acc.then(step)?;
        }
        Ok(acc)
    }
}

/// Fresh uniform permutations for one round: L block permutations plus the
/// label permutation, with the disclosed relative products derived.
pub fn gen_permutations(n: usize, num_blocks: usize, seed: u64) -> Result<PermutationSet> {
    if n == 0 || num_blocks == 0 {
        return Err(Error::InvalidParam("empty permutation set".into()));
    }
    let mut rng = derive_rng(seed, "permutations", &[]);
    let per_block: Vec<Permutation> = (0..=num_blocks)
        .map(|_| Permutation::random(n, &mut rng))
        .collect();
    let steps: Vec<Permutation> = (0..num_blocks)
        .map(|l| per_block[l].relative_to(&per_block[l + 1]))
        .collect::<Result<_>>()?;
    let wrap = per_block[num_blocks - 1].relative_to(&per_block[0])?;
    Ok(PermutationSet {
        per_block,
        steps,
        wrap,
    })
}

/// Reorder a batch of per-sample items by a block permutation.
pub fn apply_permutation<T: Clone>(batch: &[T], p: &Permutation) -> Result<Vec<T>> {
    p.apply_items(batch)
}

/// Run the adapter chain over permuted per-sample block outputs using only
/// the disclosed relative products, never an individual block permutation.
///
/// `received[l]` holds the per-sample outputs of block l+1 in that block's
/// frame (masked blocks may carry arbitrary placeholders; they are zeroed).
/// Returns per-sample logits in the label frame.
pub fn client_align_chain(
    received: &[Vec<Tensor>],
    mask: &[bool],
    perms: &PermutationSet,
    theta: &AdapterParams,
    eta: &HeadParams,
) -> Result<Vec<Tensor>> {
    align_chain_generic(received, mask, perms, theta, eta, |t| t.clone())
}

/// Same alignment walk for any plaintext carrier (used by the training path
/// to build gradients through the aligned chain).
pub fn align_chain_generic<V: ExactValue>(
    received: &[Vec<Tensor>],
    mask: &[bool],
    perms: &PermutationSet,
    theta: &AdapterParams<V::Param>,
    eta: &HeadParams<V::Param>,
    lift: impl Fn(&Tensor) -> V,
) -> Result<Vec<V>> {
    let num_blocks = perms.num_blocks();
    if received.len() != num_blocks || mask.len() != num_blocks {
        return Err(Error::Protocol(format!(
            "expected {} blocks, got {} (mask {})",
            num_blocks,
            received.len(),
            mask.len()
        )));
    }
    let n = perms.batch_size();
    let seq_len = received
        .iter()
        .flat_map(|b| b.first())
        .map(|t| t.shape()[0])
        .next()
        .ok_or_else(|| Error::Protocol("empty batch".into()))?;
    let zeros = |b: &Vec<Tensor>| -> Vec<Tensor> {
        b.iter().map(|t| Tensor::zeros(t.shape())).collect()
    };
    // h frame: wrap moves B_L . Pi_L into the Pi_1 frame
    let last = received.last().unwrap();
    let h_source = if mask[num_blocks - 1] {
        last.clone()
    } else {
        zeros(last)
    };
    let aligned_h0 = perms.wrap.apply_items(&h_source)?;
    let mut h_vars: Vec<V> = aligned_h0.iter().map(&lift).collect();
    for l in 0..num_blocks {
        let block_list = if mask[l] {
            received[l].clone()
        } else {
            zeros(&received[l])
        };
        if block_list.len() != n {
            return Err(Error::Protocol("batch size mismatch".into()));
        }
        // combine in the frame of block l+1, per sample
        let mut next_vars = Vec::with_capacity(n);
        for (b_t, h_v) in block_list.iter().zip(&h_vars) {
            let b_v = lift(b_t);
            let combined = b_v.add(h_v)?;
            let g = crate::adapter::adapter_g(&combined, l, theta)?;
            next_vars.push(g.add(h_v)?);
        }
        // advance to the next frame with the disclosed step product
        h_vars = perms.steps[l].apply_items(&next_vars)?;
    }
    // label frame reached; classify per sample
    let mut logits = Vec::with_capacity(n);
    for h in &h_vars {
        logits.push(head_forward(h, eta, seq_len)?);
    }
    Ok(logits)
}

/// Exhaustively count permutation triples consistent with the disclosed
/// products of a random triple. For any (P, Q, R) the count is n!, the
/// left-coset orbit size.
pub fn proposition1_witnesses(n: usize, trials: usize, seed: u64) -> Result<u64> {
    if n == 0 || n > 8 {
        return Err(Error::InvalidParam(
            "exhaustive witness counting supports 1 <= n <= 8".into(),
        ));
    }
    let all = all_permutations(n);
    let mut rng = derive_rng(seed, "prop1", &[]);
    let mut counts = Vec::with_capacity(trials);
    for _ in 0..trials.max(1) {
        let a = Permutation::random(n, &mut rng);
        let b = Permutation::random(n, &mut rng);
        let c = Permutation::random(n, &mut rng);
        let p = a.relative_to(&b)?;
        let q = b.relative_to(&c)?;
        let r = c.relative_to(&a)?;
        let mut count = 0u64;
        for cand in &all {
            // candidate A'; derive B' and C' from the disclosed products
            let b2 = cand.then(&p)?;
            let c2 = b2.then(&q)?;
            if c2.relative_to(cand)? == r {
                count += 1;
            }
        }
        counts.push(count);
    }
    if counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Protocol("witness count varied across trials".into()));
    }
    Ok(counts[0])
}

fn all_permutations(n: usize) -> Vec<Permutation> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    fn heap(k: usize, arr: &mut Vec<usize>, out: &mut Vec<Permutation>) {
        if k <= 1 {
            out.push(Permutation {
                mapping: arr.clone(),
            });
            return;
        }
        for i in 0..k {
            heap(k - 1, arr, out);
            if k % 2 == 0 {
                arr.swap(i, k - 1);
            } else {
                arr.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut current, &mut out);
    out
}

/// Size of the brute-force search space an attacker faces: n!.
pub fn brute_force_search_space(n: u32) -> u128 {
    (1..=n as u128).product()
}

// ---------------------------------------------------------------------------
// Stochastic block sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    pub selected: Vec<bool>,
    pub constrained: bool,
}

impl SamplingMask {
    pub fn all_true(num_blocks: usize) -> Self {
        Self {
            selected: vec![true; num_blocks],
            constrained: false,
        }
    }

    pub fn no_consecutive(&self) -> bool {
        self.selected.windows(2).all(|w| !(w[0] && w[1]))
    }

    pub fn first_or_last(&self) -> bool {
        *self.selected.first().unwrap_or(&false) || *self.selected.last().unwrap_or(&false)
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Markov-chain block selection: the first block is selected with
/// probability 0.5; after a selected block the next is never selected;
/// after a skipped block the next is selected with probability 0.5. The
/// constrained variant resamples until the first or the last block is
/// selected.
pub fn sbs_mask(num_blocks: usize, constrained: bool, seed: u64) -> Result<SamplingMask> {
    if num_blocks == 0 {
        return Err(Error::InvalidParam("sbs over zero blocks".into()));
    }
    let mut rng = derive_rng(seed, "sbs-mask", &[]);
    loop {
        let mut selected = Vec::with_capacity(num_blocks);
        let mut prev = false;
        for _ in 0..num_blocks {
            let take = if prev { false } else { rng.gen_bool(0.5) };
            selected.push(take);
            prev = take;
        }
        let mask = SamplingMask {
            selected,
            constrained,
        };
        if !constrained || mask.first_or_last() {
            return Ok(mask);
        }
    }
}

/// Exact expected number of selected blocks over T rounds via the
/// recurrence p_l = 0.5 (1 - p_{l-1}), p_1 = 0.5.
pub fn sbs_expected_count(num_blocks: usize, rounds: usize) -> f64 {
    let mut p = 0.5;
    let mut total = 0.0;
    for l in 0..num_blocks {
        if l > 0 {
            p = 0.5 * (1.0 - p);
        }
        total += p;
    }
    total * rounds as f64
}

/// Per-block selection probabilities of the unconstrained chain.
pub fn sbs_block_probabilities(num_blocks: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(num_blocks);
    let mut p = 0.5;
    for l in 0..num_blocks {
        if l > 0 {
            p = 0.5 * (1.0 - p);
        }
        out.push(p);
    }
    out
}

// ---------------------------------------------------------------------------
// Noise masking
// ---------------------------------------------------------------------------

/// Server-held record of the noise added to each non-selected block, keyed
/// by (client, round, block, sample).
#[derive(Debug, Default)]
pub struct NoiseMaskLedger {
    entries: HashMap<(String, u64, usize, usize), Tensor>,
}

impl NoiseMaskLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Homomorphically add fresh uniform noise in [-10 scale, 10 scale],
    /// where `scale` is the calibrated activation magnitude bound, and
    /// remember the noise for removal.
    pub fn mask(
        &mut self,
        client: &str,
        round: u64,
        block: usize,
        sample: usize,
        c: &Ciphertext,
        scale: f64,
        seed: u64,
    ) -> Result<Ciphertext> {
        let key = (client.to_string(), round, block, sample);
        if self.entries.contains_key(&key) {
            return Err(Error::Ledger(format!(
                "noise already recorded for {client} round {round} block {block} sample {sample}"
            )));
        }
        let mut rng = derive_rng(seed, "noise-mask", &[round, block as u64, sample as u64]);
        let amplitude = 10.0 * scale;
        let noise = Tensor::uniform(c.shape(), -amplitude, amplitude, &mut rng);
        let masked = he_add_plain(c, &noise)?;
        self.entries.insert(key, noise);
        Ok(masked)
    }

    /// Subtract the recorded noise; consumes the ledger entry.
    pub fn unmask(
        &mut self,
        client: &str,
        round: u64,
        block: usize,
        sample: usize,
        c: &Ciphertext,
    ) -> Result<Ciphertext> {
        let key = (client.to_string(), round, block, sample);
        let noise = self.entries.remove(&key).ok_or_else(|| {
            Error::Ledger(format!(
                "no noise entry for {client} round {round} block {block} sample {sample}"
            ))
        })?;
        he_add_plain(c, &noise.neg())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::{EncryptionParams, KeyRegistry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn permutation_apply_and_inverse() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let items = vec!["a", "b", "c"];
        assert_eq!(p.apply_items(&items).unwrap(), vec!["c", "a", "b"]);
        let back = p.inverse().apply_items(&p.apply_items(&items).unwrap()).unwrap();
        assert_eq!(back, items);
        let id = Permutation::identity(3);
        assert_eq!(id.apply_items(&items).unwrap(), items);
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn relative_products_realign_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Permutation::random(5, &mut rng);
        let b = Permutation::random(5, &mut rng);
        let items: Vec<usize> = (0..5).collect();
        let in_a = a.apply_items(&items).unwrap();
        let rel = a.relative_to(&b).unwrap();
        let realigned = rel.apply_items(&in_a).unwrap();
        assert_eq!(realigned, b.apply_items(&items).unwrap());
    }

    #[test]
    fn size_one_permutations_are_identity() {
        let set = gen_permutations(1, 4, 7).unwrap();
        assert!(set.per_block.iter().all(|p| p.is_identity()));
    }

    #[test]
    fn cycle_of_disclosed_relatives_is_identity() {
        for seed in 0..50 {
            let set = gen_permutations(6, 5, seed).unwrap();
            assert!(set.cycle_product().unwrap().is_identity());
        }
    }

    #[test]
    fn empirical_uniformity_n3() {
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for seed in 0..6000u64 {
            let set = gen_permutations(3, 1, seed).unwrap();
            *counts.entry(set.per_block[0].mapping().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (perm, count) in counts {
            assert!(
                (count as i64 - 1000).abs() <= 100,
                "permutation {perm:?} drawn {count} times"
            );
        }
    }

    #[test]
    fn witnesses_match_factorial() {
        assert_eq!(proposition1_witnesses(1, 2, 0).unwrap(), 1);
        assert_eq!(proposition1_witnesses(3, 3, 1).unwrap(), 6);
        assert_eq!(brute_force_search_space(16), 20_922_789_888_000);
    }

    #[test]
    fn left_coset_invariance_of_disclosed_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = gen_permutations(5, 4, 11).unwrap();
        let s = Permutation::random(5, &mut rng);
        // left-multiplying every block permutation by S leaves relatives fixed
        let shifted: Vec<Permutation> = set
            .per_block
            .iter()
            .map(|p| s.then(p).unwrap())
            .collect();
        for l in 0..set.num_blocks() {
            let rel = shifted[l].relative_to(&shifted[l + 1]).unwrap();
            assert_eq!(rel, set.steps[l]);
        }
        let wrap = shifted[set.num_blocks() - 1].relative_to(&shifted[0]).unwrap();
        assert_eq!(wrap, set.wrap);
    }

    #[test]
    fn sbs_masks_never_select_consecutive_blocks() {
        for seed in 0..2000u64 {
            let m = sbs_mask(12, false, seed).unwrap();
            assert!(m.no_consecutive());
            let c = sbs_mask(12, true, seed).unwrap();
            assert!(c.no_consecutive());
            assert!(c.first_or_last());
        }
    }

    #[test]
    fn sbs_single_block_frequency() {
        let mut hits = 0;
        let draws = 10_000;
        for seed in 0..draws {
            if sbs_mask(1, false, seed).unwrap().selected[0] {
                hits += 1;
            }
        }
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn sbs_expected_count_values() {
        assert_eq!(sbs_expected_count(1, 1), 0.5);
        let e12 = sbs_expected_count(12, 1);
        assert!((e12 - 4.0).abs() <= 0.15, "E[S] {e12}");
        // Monte-Carlo agreement within 3 sigma
        let draws = 20_000u64;
        let mut total = 0usize;
        for seed in 0..draws {
            total += sbs_mask(12, false, seed).unwrap().count();
        }
        let mean = total as f64 / draws as f64;
        // per-draw variance is bounded by L/4
        let sigma = (12.0f64 / 4.0 / draws as f64).sqrt();
        assert!(
            (mean - e12).abs() <= 3.0 * sigma,
            "MC mean {mean} vs exact {e12}"
        );
    }

    #[test]
    fn noise_mask_round_trip_and_ledger_contract() {
        let reg = KeyRegistry::new();
        let key = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let ct = reg.encrypt(&key, &x, &mut rng).unwrap();
        let mut ledger = NoiseMaskLedger::new();
        let masked = ledger.mask("c", 0, 2, 0, &ct, 1.0, 5).unwrap();
        // masked payload differs from the original
        assert!(
            reg.decrypt(&key, &masked).unwrap().max_abs_diff(&x) > 0.5,
            "noise should dominate"
        );
        let unmasked = ledger.unmask("c", 0, 2, 0, &masked).unwrap();
        assert!(reg.decrypt(&key, &unmasked).unwrap().allclose(&x, 2e-6));
        // double unmask is an error
        assert!(ledger.unmask("c", 0, 2, 0, &masked).is_err());
        // double mask of the same slot is an error
        ledger.mask("c", 1, 2, 0, &ct, 1.0, 6).unwrap();
        assert!(ledger.mask("c", 1, 2, 0, &ct, 1.0, 7).is_err());
    }

    #[test]
    fn masked_payload_uncorrelated_with_signal() {
        let reg = KeyRegistry::new();
        let key = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = Tensor::randn(&[40, 25], 1.0, &mut rng);
        let ct = reg.encrypt(&key, &x, &mut rng).unwrap();
        let mut ledger = NoiseMaskLedger::new();
        // scale is the activation magnitude bound of the signal
        let masked = ledger.mask("c", 0, 0, 0, &ct, x.max_abs(), 8).unwrap();
        let m = reg.decrypt(&key, &masked).unwrap();
        let (xs, ms) = (x.data(), m.data());
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let mm = ms.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(ms).map(|(a, b)| (a - mx) * (b - mm)).sum::<f64>() / n;
        let sx = (xs.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n).sqrt();
        let sm = (ms.iter().map(|b| (b - mm) * (b - mm)).sum::<f64>() / n).sqrt();
        let corr = cov / (sx * sm);
        assert!(corr.abs() < 0.1, "correlation {corr}");
    }
}
