//! Leveled homomorphic arithmetic simulator.
//!
//! Ciphertexts wrap a hidden tensor and expose only additions and
//! multiplications. The simulator enforces the three contracts that a real
//! leveled scheme would: a bounded multiplicative depth per ciphertext, key
//! ownership (arithmetic across keys and decryption with the wrong key are
//! rejected), and ciphertext expansion for communication accounting. It does
//! not implement lattice cryptography; the privacy guarantee at simulator
//! level is that no code path can reach `hidden` values except [`decrypt`]
//! with the matching key.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

/// Parameters of one simulated encryption context.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EncryptionParams {
    /// Maximum multiplicative depth a ciphertext may accumulate.
    pub max_depth: u32,
    /// Ciphertext bytes per plaintext byte (rho >= 1).
    pub expansion_ratio: f64,
    /// Maximum absolute error injected per element at encryption time.
    pub noise_tolerance: f64,
    /// Encoded plaintext bytes per tensor element. Raw single precision is
    /// 4.0; the calibrated packing profile of the reference FHE stack is
    /// 14.0 per element.
    pub plain_bytes_per_elem: f64,
    /// When set, plaintext multiplies also consume one depth level.
    pub plain_mul_costs_level: bool,
}

impl Default for EncryptionParams {
    fn default() -> Self {
        Self {
            max_depth: 64,
            expansion_ratio: 2.79,
            noise_tolerance: 1e-6,
            plain_bytes_per_elem: 4.0,
            plain_mul_costs_level: false,
        }
    }
}

impl EncryptionParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::InvalidParam("max_depth must be >= 1".into()));
        }
        if !(self.expansion_ratio >= 1.0) {
            return Err(Error::InvalidParam("expansion_ratio must be >= 1".into()));
        }
        if !(self.noise_tolerance >= 0.0) {
            return Err(Error::InvalidParam("noise_tolerance must be >= 0".into()));
        }
        if !(self.plain_bytes_per_elem > 0.0) {
            return Err(Error::InvalidParam("plain_bytes_per_elem must be > 0".into()));
        }
        Ok(())
    }
}

/// Decryption capability for one keypair. Whoever holds the handle can
/// decrypt ciphertexts produced under it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyHandle {
    pub party_id: String,
    pub key_id: u64,
}

/// Operation counters shared by all ciphertexts of a registry.
#[derive(Debug, Default)]
pub struct HeStats {
    pub ct_add: AtomicU64,
    pub ct_add_plain: AtomicU64,
    pub ct_mul: AtomicU64,
    pub ct_mul_plain: AtomicU64,
    pub ct_matmul: AtomicU64,
    pub ct_matmul_plain: AtomicU64,
    pub encryptions: AtomicU64,
    pub decryptions: AtomicU64,
    pub max_depth_seen: AtomicU32,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct HeStatsSnapshot {
    pub ct_add: u64,
    pub ct_add_plain: u64,
    pub ct_mul: u64,
    pub ct_mul_plain: u64,
    pub ct_matmul: u64,
    pub ct_matmul_plain: u64,
    pub encryptions: u64,
    pub decryptions: u64,
    pub max_depth_seen: u32,
}

impl HeStats {
    fn bump_depth(&self, depth: u32) {
        self.max_depth_seen.fetch_max(depth, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> HeStatsSnapshot {
        HeStatsSnapshot {
            ct_add: self.ct_add.load(Ordering::Relaxed),
            ct_add_plain: self.ct_add_plain.load(Ordering::Relaxed),
            ct_mul: self.ct_mul.load(Ordering::Relaxed),
            ct_mul_plain: self.ct_mul_plain.load(Ordering::Relaxed),
            ct_matmul: self.ct_matmul.load(Ordering::Relaxed),
            ct_matmul_plain: self.ct_matmul_plain.load(Ordering::Relaxed),
            encryptions: self.encryptions.load(Ordering::Relaxed),
            decryptions: self.decryptions.load(Ordering::Relaxed),
            max_depth_seen: self.max_depth_seen.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.ct_add.store(0, Ordering::Relaxed);
        self.ct_add_plain.store(0, Ordering::Relaxed);
        self.ct_mul.store(0, Ordering::Relaxed);
        self.ct_mul_plain.store(0, Ordering::Relaxed);
        self.ct_matmul.store(0, Ordering::Relaxed);
        self.ct_matmul_plain.store(0, Ordering::Relaxed);
        self.encryptions.store(0, Ordering::Relaxed);
        self.decryptions.store(0, Ordering::Relaxed);
        self.max_depth_seen.store(0, Ordering::Relaxed);
    }
}

/// One audited decryption.
#[derive(Debug, Clone)]
pub struct DecryptEvent {
    pub caller: String,
    pub key_owner: String,
    pub key_id: u64,
}

/// Append-only record of audited decryptions, used to check the
/// double-blind property of protocol runs.
#[derive(Debug, Default)]
pub struct AuditLog {
    events: Mutex<Vec<DecryptEvent>>,
}

impl AuditLog {
    pub fn record(&self, caller: &str, key_owner: &str, key_id: u64) {
        self.events.lock().unwrap().push(DecryptEvent {
            caller: caller.to_string(),
            key_owner: key_owner.to_string(),
            key_id,
        });
    }

    pub fn decrypts_by(&self, caller: &str) -> usize {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.caller == caller)
            .count()
    }

    /// Decryptions performed by a party other than the key owner.
    pub fn violations(&self) -> Vec<String> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.caller != e.key_owner)
            .map(|e| {
                format!(
                    "party '{}' decrypted under key {} owned by '{}'",
                    e.caller, e.key_id, e.key_owner
                )
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.events.lock().unwrap().len()
    }
}

struct KeyInfo {
    party: String,
    params: EncryptionParams,
}

struct RegistryInner {
    next_key_id: AtomicU64,
    keys: RwLock<HashMap<u64, KeyInfo>>,
    stats: Arc<HeStats>,
    audit: Arc<AuditLog>,
}

/// Append-only key registry. Cloning shares the registry.
#[derive(Clone)]
pub struct KeyRegistry {
    inner: Arc<RegistryInner>,
}

impl Default for KeyRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(RegistryInner {
                next_key_id: AtomicU64::new(1),
                keys: RwLock::new(HashMap::new()),
                stats: Arc::new(HeStats::default()),
                audit: Arc::new(AuditLog::default()),
            }),
        }
    }

    pub fn keygen(&self, party_id: &str, params: EncryptionParams) -> Result<KeyHandle> {
        params.validate()?;
        let key_id = self.inner.next_key_id.fetch_add(1, Ordering::Relaxed);
        self.inner.keys.write().unwrap().insert(
            key_id,
            KeyInfo {
                party: party_id.to_string(),
                params,
            },
        );
        Ok(KeyHandle {
            party_id: party_id.to_string(),
            key_id,
        })
    }

    pub fn params_of(&self, key_id: u64) -> Result<EncryptionParams> {
        self.inner
            .keys
            .read()
            .unwrap()
            .get(&key_id)
            .map(|k| k.params)
            .ok_or_else(|| Error::InvalidParam(format!("unknown key id {key_id}")))
    }

    /// Registered owner of a key.
    pub fn owner_of(&self, key_id: u64) -> Result<String> {
        self.inner
            .keys
            .read()
            .unwrap()
            .get(&key_id)
            .map(|k| k.party.clone())
            .ok_or_else(|| Error::InvalidParam(format!("unknown key id {key_id}")))
    }

    pub fn encrypt<R: Rng>(&self, key: &KeyHandle, x: &Tensor, rng: &mut R) -> Result<Ciphertext> {
        if !x.is_finite() {
            return Err(Error::NonFinite("encrypt input".into()));
        }
        let params = self.params_of(key.key_id)?;
        let eps = params.noise_tolerance;
        let values = if eps > 0.0 {
            x.map(|v| v + rng.gen_range(-eps..=eps))
        } else {
            x.clone()
        };
        self.inner.stats.encryptions.fetch_add(1, Ordering::Relaxed);
        let plain_bytes = (x.len() as f64 * params.plain_bytes_per_elem).ceil() as u64;
        Ok(Ciphertext {
            values,
            key_id: key.key_id,
            owner: key.party_id.clone(),
            depth_used: 0,
            params,
            plain_bytes,
            stats: Arc::clone(&self.inner.stats),
        })
    }

    /// Decrypt without audit attribution; intended for tests and oracles.
    pub fn decrypt(&self, key: &KeyHandle, c: &Ciphertext) -> Result<Tensor> {
        if key.key_id != c.key_id {
            return Err(Error::KeyMismatch {
                ct_key: c.key_id,
                attempted: key.key_id,
            });
        }
        self.inner.stats.decryptions.fetch_add(1, Ordering::Relaxed);
        Ok(c.values.clone())
    }

    /// Decrypt on behalf of `caller`, recording the access in the audit log.
    /// A caller other than the key owner still obtains the plaintext (a
    /// leaked key cannot be stopped by arithmetic) but the event is flagged
    /// as a violation.
    pub fn decrypt_as(&self, caller: &str, key: &KeyHandle, c: &Ciphertext) -> Result<Tensor> {
        self.inner.audit.record(caller, &key.party_id, key.key_id);
        self.decrypt(key, c)
    }

    pub fn stats(&self) -> &HeStats {
        &self.inner.stats
    }

    pub fn audit(&self) -> &AuditLog {
        &self.inner.audit
    }
}

/// Encrypted tensor. Supports only additions and multiplications; its
/// payload is reachable solely through [`KeyRegistry::decrypt`].
#[derive(Clone)]
pub struct Ciphertext {
    values: Tensor,
    key_id: u64,
    owner: String,
    depth_used: u32,
    params: EncryptionParams,
    plain_bytes: u64,
    stats: Arc<HeStats>,
}

impl std::fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ciphertext")
            .field("shape", &self.values.shape())
            .field("key_id", &self.key_id)
            .field("owner", &self.owner)
            .field("depth_used", &self.depth_used)
            .field("plain_bytes", &self.plain_bytes)
            .finish()
    }
}

impl Ciphertext {
    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn depth_used(&self) -> u32 {
        self.depth_used
    }

    pub fn plain_bytes(&self) -> u64 {
        self.plain_bytes
    }

    pub fn params(&self) -> &EncryptionParams {
        &self.params
    }

    fn derive(&self, values: Tensor, depth: u32) -> Result<Ciphertext> {
        if depth > self.params.max_depth {
            return Err(Error::DepthExceeded {
                reached: depth,
                budget: self.params.max_depth,
            });
        }
        self.stats.bump_depth(depth);
        let plain_bytes = (values.len() as f64 * self.params.plain_bytes_per_elem).ceil() as u64;
        Ok(Ciphertext {
            values,
            key_id: self.key_id,
            owner: self.owner.clone(),
            depth_used: depth,
            params: self.params,
            plain_bytes,
            stats: Arc::clone(&self.stats),
        })
    }

    fn check_same_key(&self, other: &Ciphertext) -> Result<()> {
        if self.key_id != other.key_id {
            return Err(Error::KeyMismatch {
                ct_key: self.key_id,
                attempted: other.key_id,
            });
        }
        Ok(())
    }

    fn plain_mul_cost(&self) -> u32 {
        u32::from(self.params.plain_mul_costs_level)
    }
}

/// Ciphertext bytes after expansion: `ceil(rho * plain_bytes)`.
pub fn ciphertext_bytes(c: &Ciphertext) -> u64 {
    (c.params.expansion_ratio * c.plain_bytes as f64).ceil() as u64
}

pub fn he_add(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    a.check_same_key(b)?;
    a.stats.ct_add.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.add(&b.values)?, a.depth_used.max(b.depth_used))
}

pub fn he_add_plain(a: &Ciphertext, p: &Tensor) -> Result<Ciphertext> {
    a.stats.ct_add_plain.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.add(p)?, a.depth_used)
}

pub fn he_sub(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    a.check_same_key(b)?;
    a.stats.ct_add.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.sub(&b.values)?, a.depth_used.max(b.depth_used))
}

/// Elementwise ciphertext-ciphertext product; consumes one depth level.
pub fn he_mul(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    a.check_same_key(b)?;
    a.stats.ct_mul.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.mul(&b.values)?, a.depth_used.max(b.depth_used) + 1)
}

pub fn he_mul_plain(a: &Ciphertext, p: &Tensor) -> Result<Ciphertext> {
    a.stats.ct_mul_plain.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.mul(p)?, a.depth_used + a.plain_mul_cost())
}

pub fn he_mul_scalar(a: &Ciphertext, s: f64) -> Result<Ciphertext> {
    a.stats.ct_mul_plain.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.mul_scalar(s), a.depth_used + a.plain_mul_cost())
}

pub fn he_add_scalar(a: &Ciphertext, s: f64) -> Result<Ciphertext> {
    a.stats.ct_add_plain.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.add_scalar(s), a.depth_used)
}

/// Matrix product of two ciphertexts; one depth level.
pub fn he_matmul(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    a.check_same_key(b)?;
    a.stats.ct_matmul.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.matmul(&b.values)?, a.depth_used.max(b.depth_used) + 1)
}

/// `a · bᵀ` for ciphertexts; one depth level.
pub fn he_matmul_t(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    a.check_same_key(b)?;
    a.stats.ct_matmul.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.matmul_t(&b.values)?, a.depth_used.max(b.depth_used) + 1)
}

/// Ciphertext times plaintext matrix; free of ciphertext depth by default.
pub fn he_matmul_plain(a: &Ciphertext, p: &Tensor) -> Result<Ciphertext> {
    a.stats.ct_matmul_plain.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.matmul(p)?, a.depth_used + a.plain_mul_cost())
}

/// Sum over the last axis (keepdim); additions only.
pub fn he_sum_last(a: &Ciphertext) -> Result<Ciphertext> {
    a.stats.ct_add.fetch_add(1, Ordering::Relaxed);
    a.derive(a.values.sum_last(), a.depth_used)
}

/// Column slice; pure data movement in the simulator.
pub fn he_slice_cols(a: &Ciphertext, lo: usize, hi: usize) -> Result<Ciphertext> {
    a.derive(a.values.slice_cols(lo, hi)?, a.depth_used)
}

pub fn he_concat_cols(parts: &[Ciphertext]) -> Result<Ciphertext> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("he_concat_cols of nothing".into()))?;
    for p in parts.iter().skip(1) {
        first.check_same_key(p)?;
    }
    let tensors: Vec<Tensor> = parts.iter().map(|p| p.values.clone()).collect();
    let depth = parts.iter().map(|p| p.depth_used).max().unwrap();
    first.derive(Tensor::concat_cols(&tensors)?, depth)
}

pub fn he_mean_pool_rows(a: &Ciphertext, group: usize) -> Result<Ciphertext> {
    a.stats.ct_add.fetch_add(1, Ordering::Relaxed);
    let cost = a.plain_mul_cost();
    a.derive(a.values.mean_pool_rows(group)?, a.depth_used + cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn keygen_ids_unique() {
        let reg = KeyRegistry::new();
        let p = EncryptionParams {
            max_depth: 8,
            ..Default::default()
        };
        let k1 = reg.keygen("client0", p).unwrap();
        let k2 = reg.keygen("client0", p).unwrap();
        assert_ne!(k1.key_id, k2.key_id);
    }

    #[test]
    fn keygen_carries_expansion_ratio() {
        let reg = KeyRegistry::new();
        let p = EncryptionParams {
            expansion_ratio: 2.79,
            ..Default::default()
        };
        let k = reg.keygen("server", p).unwrap();
        assert_eq!(reg.params_of(k.key_id).unwrap().expansion_ratio, 2.79);
    }

    #[test]
    fn zero_max_depth_rejected() {
        let reg = KeyRegistry::new();
        let p = EncryptionParams {
            max_depth: 0,
            ..Default::default()
        };
        assert!(reg.keygen("c", p).is_err());
    }

    #[test]
    fn round_trip_within_noise() {
        let reg = KeyRegistry::new();
        let k = reg.keygen("c", EncryptionParams::default()).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        let c = reg.encrypt(&k, &x, &mut rng()).unwrap();
        let back = reg.decrypt(&k, &c).unwrap();
        assert!(back.allclose(&x, 1e-6));
        assert_eq!(c.depth_used(), 0);
    }

    #[test]
    fn vit_sized_ciphertext_matches_reported_sizes() {
        // 577x768 single-precision sample under the calibrated packing
        // profile: ~6.21 MB plaintext, ~17.33 MB ciphertext.
        let reg = KeyRegistry::new();
        let p = EncryptionParams {
            plain_bytes_per_elem: 14.0,
            expansion_ratio: 2.79,
            ..Default::default()
        };
        let k = reg.keygen("c", p).unwrap();
        let x = Tensor::zeros(&[577, 768]);
        let c = reg.encrypt(&k, &x, &mut rng()).unwrap();
        let plain_mb = c.plain_bytes() as f64 / 1e6;
        let ct_mb = ciphertext_bytes(&c) as f64 / 1e6;
        assert!((plain_mb - 6.21).abs() / 6.21 < 0.01, "plain {plain_mb} MB");
        assert!((ct_mb - 17.33).abs() / 17.33 < 0.01, "ct {ct_mb} MB");
    }

    #[test]
    fn two_encryptions_same_plaintext_independent_noise() {
        let reg = KeyRegistry::new();
        let k = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut r = rng();
        let x = Tensor::ones(&[3, 3]);
        let c1 = reg.encrypt(&k, &x, &mut r).unwrap();
        let c2 = reg.encrypt(&k, &x, &mut r).unwrap();
        let d1 = reg.decrypt(&k, &c1).unwrap();
        let d2 = reg.decrypt(&k, &c2).unwrap();
        assert!(d1.allclose(&x, 1e-6));
        assert!(d2.allclose(&x, 1e-6));
        assert!(d1 != d2, "noise should be independent per encryption");
    }

    #[test]
    fn wrong_key_decrypt_rejected() {
        let reg = KeyRegistry::new();
        let k1 = reg.keygen("alice", EncryptionParams::default()).unwrap();
        let k2 = reg.keygen("bob", EncryptionParams::default()).unwrap();
        let c = reg.encrypt(&k1, &Tensor::ones(&[2]), &mut rng()).unwrap();
        match reg.decrypt(&k2, &c) {
            Err(Error::KeyMismatch { .. }) => {}
            other => panic!("expected key mismatch, got {other:?}"),
        }
    }

    #[test]
    fn cross_key_arithmetic_rejected() {
        let reg = KeyRegistry::new();
        let k1 = reg.keygen("alice", EncryptionParams::default()).unwrap();
        let k2 = reg.keygen("bob", EncryptionParams::default()).unwrap();
        let mut r = rng();
        let a = reg.encrypt(&k1, &Tensor::ones(&[2]), &mut r).unwrap();
        let b = reg.encrypt(&k2, &Tensor::ones(&[2]), &mut r).unwrap();
        assert!(he_add(&a, &b).is_err());
        assert!(he_mul(&a, &b).is_err());
    }

    #[test]
    fn add_identities() {
        let reg = KeyRegistry::new();
        let k = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut r = rng();
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let cx = reg.encrypt(&k, &x, &mut r).unwrap();
        let cz = reg.encrypt(&k, &Tensor::zeros(&[2, 2]), &mut r).unwrap();
        let sum = he_add(&cx, &cz).unwrap();
        assert!(reg.decrypt(&k, &sum).unwrap().allclose(&x, 2e-6));
        let cancelled = he_add_plain(&cx, &x.neg()).unwrap();
        assert!(reg
            .decrypt(&k, &cancelled)
            .unwrap()
            .allclose(&Tensor::zeros(&[2, 2]), 2e-6));
    }

    #[test]
    fn random_sum_matches_plain_oracle() {
        let reg = KeyRegistry::new();
        let k = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut r = rng();
        let a = Tensor::randn(&[3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3, 3], 1.0, &mut r);
        let ca = reg.encrypt(&k, &a, &mut r).unwrap();
        let cb = reg.encrypt(&k, &b, &mut r).unwrap();
        let got = reg.decrypt(&k, &he_add(&ca, &cb).unwrap()).unwrap();
        assert!(got.allclose(&a.add(&b).unwrap(), 2e-6));
    }

    #[test]
    fn mul_identity_costs_one_level() {
        let reg = KeyRegistry::new();
        let k = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut r = rng();
        let x = Tensor::new(vec![2], vec![0.25, -0.75]).unwrap();
        let cx = reg.encrypt(&k, &x, &mut r).unwrap();
        let ones = reg.encrypt(&k, &Tensor::ones(&[2]), &mut r).unwrap();
        let prod = he_mul(&cx, &ones).unwrap();
        assert_eq!(prod.depth_used(), 1);
        assert!(reg.decrypt(&k, &prod).unwrap().allclose(&x, 1e-5));
    }

    #[test]
    fn depth_budget_enforced_at_nine() {
        let reg = KeyRegistry::new();
        let p = EncryptionParams {
            max_depth: 8,
            noise_tolerance: 0.0,
            ..Default::default()
        };
        let k = reg.keygen("c", p).unwrap();
        let mut r = rng();
        let one = reg.encrypt(&k, &Tensor::ones(&[2]), &mut r).unwrap();
        let mut acc = reg.encrypt(&k, &Tensor::ones(&[2]), &mut r).unwrap();
        for step in 1..=8 {
            acc = he_mul(&acc, &one).unwrap();
            assert_eq!(acc.depth_used(), step);
        }
        match he_mul(&acc, &one) {
            Err(Error::DepthExceeded { reached, budget }) => {
                assert_eq!(reached, 9);
                assert_eq!(budget, 8);
            }
            other => panic!("expected depth error, got {other:?}"),
        }
    }

    #[test]
    fn encrypted_matmul_matches_plain_oracle() {
        let reg = KeyRegistry::new();
        let k = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut r = rng();
        let a = Tensor::randn(&[4, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 4], 1.0, &mut r);
        let ca = reg.encrypt(&k, &a, &mut r).unwrap();
        let cb = reg.encrypt(&k, &b, &mut r).unwrap();
        let prod = he_matmul(&ca, &cb).unwrap();
        assert_eq!(prod.depth_used(), 1);
        let got = reg.decrypt(&k, &prod).unwrap();
        assert!(got.allclose(&a.matmul(&b).unwrap(), 1e-4));
    }

    #[test]
    fn byte_accounting() {
        let reg = KeyRegistry::new();
        let mut r = rng();
        // rho = 1: ciphertext equals plaintext size
        let k1 = reg
            .keygen(
                "c",
                EncryptionParams {
                    expansion_ratio: 1.0,
                    ..Default::default()
                },
            )
            .unwrap();
        let c1 = reg.encrypt(&k1, &Tensor::zeros(&[10]), &mut r).unwrap();
        assert_eq!(ciphertext_bytes(&c1), c1.plain_bytes());
        // 100-element single precision at rho = 2 -> 800 bytes
        let k2 = reg
            .keygen(
                "c",
                EncryptionParams {
                    expansion_ratio: 2.0,
                    ..Default::default()
                },
            )
            .unwrap();
        let c2 = reg.encrypt(&k2, &Tensor::zeros(&[100]), &mut r).unwrap();
        assert_eq!(c2.plain_bytes(), 400);
        assert_eq!(ciphertext_bytes(&c2), 800);
    }

    #[test]
    fn audit_flags_cross_party_decrypt() {
        let reg = KeyRegistry::new();
        let k = reg.keygen("client0", EncryptionParams::default()).unwrap();
        let c = reg.encrypt(&k, &Tensor::ones(&[2]), &mut rng()).unwrap();
        reg.decrypt_as("client0", &k, &c).unwrap();
        assert!(reg.audit().violations().is_empty());
        reg.decrypt_as("server", &k, &c).unwrap();
        let v = reg.audit().violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("server"));
    }
}
