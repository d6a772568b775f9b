//! Block-wise encrypted split-learning protocol with secure aggregation.
//!
//! One round per client: the server walks its frozen approximated blocks
//! over the client's encrypted batch; after every block the ciphertexts are
//! (optionally noise-masked,) sample-permuted, sent to the client, decrypted,
//! re-encrypted fresh, and returned; the server restores order, removes the
//! noise, and continues. The client keeps plaintext copies only of selected
//! blocks, runs its adapter chain through the disclosed relative products,
//! and gets an encrypted squared-error loss gradient back for its local
//! step. Adapters and heads are combined with pairwise-masked secure
//! aggregation; everything that crosses the channel is charged to a byte
//! ledger.

use crate::adapter::{flatten_params, unflatten_params, AdapterParams};
use crate::autodiff::Var;
use crate::data::{argmax, balanced_accuracy, one_hot, Dataset};
use crate::error::{Error, Result};
use crate::he::{
    ciphertext_bytes, he_add, he_mul, he_mul_scalar, he_sub, he_sum_last, Ciphertext,
    EncryptionParams, KeyHandle, KeyRegistry,
};
use crate::kernels::KernelConfig;
use crate::model::{
    block_forward_approx, embed_forward, head_forward, BlockParams, EmbedParams, HeadParams,
    ModelConfig, TransformerModel,
};
use crate::privacy::{
    gen_permutations, sbs_expected_count, sbs_mask, NoiseMaskLedger, PermutationSet, SamplingMask,
};
use crate::seeding::{derive_rng, derive_seed};
use crate::tensor::Tensor;
use crate::{adapter, optim::Sgd};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;

pub const SERVER_PARTY: &str = "server";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SbsMode {
    Off,
    Plain,
    Constrained,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub dirichlet_alpha: f64,
    pub adapter_rank: usize,
    pub adapter_lr: f64,
    /// Sample-level permutation defense.
    pub permute: bool,
    pub sbs: SbsMode,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 3,
            rounds: 10,
            batch_size: 8,
            dirichlet_alpha: 100.0,
            adapter_rank: 4,
            adapter_lr: 0.001,
            permute: true,
            sbs: SbsMode::Off,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam("clients and batch size must be >= 1".into()));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::InvalidParam("dirichlet alpha must be > 0".into()));
        }
        if !(self.adapter_lr > 0.0) {
            return Err(Error::InvalidParam("adapter lr must be > 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Messages and the byte ledger
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToClient,
    ToServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// Intermediate-representation ciphertexts (per block, per direction).
    CiphertextIr,
    /// One-off encrypted dataset upload (inputs and labels).
    CiphertextUpload,
    /// Encrypted logits, losses, and loss gradients.
    CiphertextLossGrad,
    /// Disclosed relative permutation products (u16 index per sample).
    RelativeProducts,
    /// Sampling-mask metadata.
    MaskMeta,
    /// Secure-aggregation submissions and global parameter broadcasts.
    Aggregate,
}

#[derive(Debug, Clone, Serialize)]
pub struct Message {
    pub round: u64,
    pub client: String,
    pub direction: Direction,
    pub kind: PayloadKind,
    pub block: Option<usize>,
    pub bytes: u64,
}

/// Append-only record of every message that crossed the simulated channel.
#[derive(Debug, Default)]
pub struct CommLedger {
    messages: Vec<Message>,
}

impl CommLedger {
    pub fn record(&mut self, m: Message) {
        self.messages.push(m);
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn total_bytes(&self) -> u64 {
        self.messages.iter().map(|m| m.bytes).sum()
    }

    pub fn bytes_where(&self, pred: impl Fn(&Message) -> bool) -> u64 {
        self.messages.iter().filter(|m| pred(m)).map(|m| m.bytes).sum()
    }
}

// ---------------------------------------------------------------------------
// Parties
// ---------------------------------------------------------------------------

pub struct ClientState {
    pub id: String,
    pub key: KeyHandle,
    pub data: Dataset,
    pub theta: AdapterParams,
    pub eta: HeadParams,
}

impl ClientState {
    pub fn num_samples(&self) -> usize {
        self.data.len()
    }
}

struct ClientStore {
    inputs: Vec<Ciphertext>,
    labels: Vec<Ciphertext>,
    b0: Vec<Ciphertext>,
}

/// Records every access to the frozen block parameters; any party other
/// than the server is a violation.
#[derive(Debug, Default)]
pub struct BlockAccessAudit {
    accesses: Mutex<Vec<String>>,
}

impl BlockAccessAudit {
    fn record(&self, party: &str) {
        self.accesses.lock().unwrap().push(party.to_string());
    }

    pub fn reads_by(&self, party: &str) -> usize {
        self.accesses
            .lock()
            .unwrap()
            .iter()
            .filter(|p| p.as_str() == party)
            .count()
    }

    pub fn violations(&self) -> Vec<String> {
        self.accesses
            .lock()
            .unwrap()
            .iter()
            .filter(|p| p.as_str() != SERVER_PARTY)
            .map(|p| format!("party '{p}' read frozen block parameters"))
            .collect()
    }
}

pub struct ServerState {
    pub registry: KeyRegistry,
    pub model_cfg: ModelConfig,
    pub kernels: KernelConfig,
    pub he_params: EncryptionParams,
    pub embed: EmbedParams,
    blocks: Vec<BlockParams>,
    stores: HashMap<String, ClientStore>,
    pub noise_ledger: NoiseMaskLedger,
    pub comm: CommLedger,
    pub block_audit: BlockAccessAudit,
    /// Calibrated activation scale driving the masking-noise amplitude.
    pub activation_scale: f64,
}

impl ServerState {
    pub fn new(
        registry: KeyRegistry,
        model: &TransformerModel,
        he_params: EncryptionParams,
    ) -> Self {
        Self {
            registry,
            model_cfg: model.config,
            kernels: model.kernels,
            he_params,
            embed: model.embed.clone(),
            blocks: model.blocks.clone(),
            stores: HashMap::new(),
            noise_ledger: NoiseMaskLedger::new(),
            comm: CommLedger::default(),
            block_audit: BlockAccessAudit::default(),
            activation_scale: 1.0,
        }
    }

    /// Audited access to the frozen blocks. Only the server may read them;
    /// anyone else is recorded and refused.
    pub fn blocks_for(&self, party: &str) -> Result<&[BlockParams]> {
        self.block_audit.record(party);
        if party != SERVER_PARTY {
            return Err(Error::Audit(format!(
                "party '{party}' attempted to read frozen block parameters"
            )));
        }
        Ok(&self.blocks)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Stored ciphertext count for one client: raw inputs, labels, and
    /// embedded representations.
    pub fn stored_ciphertexts(&self, client: &str) -> usize {
        self.stores
            .get(client)
            .map(|s| s.inputs.len() + s.labels.len() + s.b0.len())
            .unwrap_or(0)
    }

    /// Bit-exact snapshot of the frozen blocks (for the frozen-backbone
    /// invariant checks in tests).
    pub fn blocks_snapshot(&self) -> Vec<BlockParams> {
        self.blocks.clone()
    }

    /// Ciphertext size of one intermediate representation under the
    /// configured parameters.
    pub fn ir_ciphertext_bytes(&self) -> u64 {
        let elems = (self.model_cfg.seq_len * self.model_cfg.model_dim) as f64;
        let plain = (elems * self.he_params.plain_bytes_per_elem).ceil();
        (plain * self.he_params.expansion_ratio).ceil() as u64
    }
}

// ---------------------------------------------------------------------------
// Dirichlet partitioning
// ---------------------------------------------------------------------------

/// Split sample indices across `k` clients with per-class proportions drawn
/// from Dirichlet(alpha). Empty clients are resampled up to 100 times, then
/// topped up from the largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 || !(alpha > 0.0) {
        return Err(Error::InvalidParam("need k >= 1 and alpha > 0".into()));
    }
    if labels.len() < k {
        return Err(Error::InvalidParam(format!(
            "cannot give {} clients non-empty shares of {} samples",
            k,
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = derive_rng(seed, "dirichlet", &[]);
    for attempt in 0..100 {
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
        for idxs in by_class.iter().filter(|c| !c.is_empty()) {
            let mut pool = idxs.clone();
            pool.shuffle(&mut rng);
            let props = dirichlet_draw(k, alpha, &mut rng);
            let counts = proportion_counts(&props, pool.len());
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                parts[client].extend_from_slice(&pool[cursor..cursor + count]);
                cursor += count;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            return Ok(parts);
        }
        if attempt == 99 {
            // spill over: move singles from the largest partitions
            loop {
                let Some(empty) = parts.iter().position(|p| p.is_empty()) else {
                    break;
                };
                let largest = (0..k)
                    .max_by_key(|&i| parts[i].len())
                    .expect("non-empty partition exists");
                let moved = parts[largest].pop().expect("largest non-empty");
                parts[empty].push(moved);
            }
            return Ok(parts);
        }
    }
    unreachable!("partition loop returns within 100 attempts")
}

fn dirichlet_draw<R: Rng>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("valid gamma");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        // alpha -> 0 underflow limit: all mass on one random client
        let winner = rng.gen_range(0..k);
        draws = vec![0.0; k];
        draws[winner] = 1.0;
        return draws;
    }
    draws.iter().map(|d| d / sum).collect()
}

/// Largest-remainder rounding of proportions into integer counts.
fn proportion_counts(props: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = props
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for i in 0..total - assigned {
        counts[remainders[i % props.len()].0] += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// Protocol operations
// ---------------------------------------------------------------------------

/// Client encrypts inputs and one-hot labels under its own key; the server
/// stores them and derives the encrypted embedding outputs b0 (affine, so
/// no depth is consumed). The upload is charged to the ledger.
pub fn upload_encrypted_dataset(
    client: &ClientState,
    server: &mut ServerState,
    seed: u64,
) -> Result<()> {
    let mut rng = derive_rng(seed, "upload-noise", &[]);
    let mut inputs = Vec::with_capacity(client.data.len());
    let mut labels = Vec::with_capacity(client.data.len());
    let mut b0 = Vec::with_capacity(client.data.len());
    let mut bytes = 0u64;
    for (x, &y) in client.data.inputs.iter().zip(&client.data.labels) {
        let cx = server.registry.encrypt(&client.key, x, &mut rng)?;
        let cy = server
            .registry
            .encrypt(&client.key, &one_hot(y, client.data.num_classes), &mut rng)?;
        bytes += ciphertext_bytes(&cx) + ciphertext_bytes(&cy);
        let embedded = embed_forward(&cx, &server.embed)?;
        inputs.push(cx);
        labels.push(cy);
        b0.push(embedded);
    }
    server.comm.record(Message {
        round: 0,
        client: client.id.clone(),
        direction: Direction::ToServer,
        kind: PayloadKind::CiphertextUpload,
        block: None,
        bytes,
    });
    server.stores.insert(
        client.id.clone(),
        ClientStore { inputs, labels, b0 },
    );
    Ok(())
}

/// Evaluate one approximated block homomorphically on a batch of per-sample
/// ciphertexts, noise-masking the output when the block is not selected,
/// then permuting the batch for transit. `block` is 1-based.
pub fn server_block_eval(
    server: &mut ServerState,
    client_id: &str,
    round: u64,
    block: usize,
    inputs: &[Ciphertext],
    perms: &PermutationSet,
    mask: &SamplingMask,
    seed: u64,
) -> Result<Vec<Ciphertext>> {
    let blocks = server.blocks_for(SERVER_PARTY)?;
    let params = &blocks[block - 1];
    let mut outputs = Vec::with_capacity(inputs.len());
    for ct in inputs {
        let out = block_forward_approx(ct, params, &server.model_cfg, &server.kernels)?;
        outputs.push(out.out);
    }
    let selected = mask.selected[block - 1];
    let scale = server.activation_scale;
    if !selected {
        let mut masked = Vec::with_capacity(outputs.len());
        for (i, ct) in outputs.iter().enumerate() {
            masked.push(server.noise_ledger.mask(
                client_id,
                round,
                block,
                i,
                ct,
                scale,
                derive_seed(seed, "block-noise", &[round, block as u64, i as u64]),
            )?);
        }
        outputs = masked;
    }
    perms.block(block).apply_items(&outputs)
}

/// Client-side relay: decrypt (audited under the client's identity) and
/// re-encrypt fresh, resetting the depth budget. Returns the new ciphertext
/// and the plaintext view the client just saw.
pub fn client_relay<R: Rng>(
    client: &ClientState,
    registry: &KeyRegistry,
    ct: &Ciphertext,
    rng: &mut R,
) -> Result<(Ciphertext, Tensor)> {
    let plain = registry.decrypt_as(&client.id, &client.key, ct)?;
    let fresh = registry.encrypt(&client.key, &plain, rng)?;
    Ok((fresh, plain))
}

/// Encrypted squared-error loss and gradient. The stored labels of the
/// selected batch are permuted into the label frame before the comparison:
/// loss = mean over samples and classes of (logit - y)^2, gradient rows
/// 2 (logit - y) / (n * classes). Both stay encrypted under the client key.
pub fn encrypted_loss_and_grad(
    server: &ServerState,
    client_id: &str,
    logits: &[Ciphertext],
    batch: &[usize],
    perms: &PermutationSet,
) -> Result<(Ciphertext, Vec<Ciphertext>)> {
    let store = server
        .stores
        .get(client_id)
        .ok_or_else(|| Error::Protocol(format!("no dataset stored for {client_id}")))?;
    let n = logits.len();
    if n == 0 {
        return Err(Error::Protocol("empty logit batch".into()));
    }
    if n != batch.len() || n != perms.batch_size() {
        return Err(Error::Protocol(
            "logit batch does not match selection or permutation size".into(),
        ));
    }
    let batch_labels: Vec<Ciphertext> = batch.iter().map(|&i| store.labels[i].clone()).collect();
    let framed_labels = perms.label_frame().apply_items(&batch_labels)?;
    let classes = server.model_cfg.num_classes;
    let scale = 1.0 / (n * classes) as f64;
    let mut grads = Vec::with_capacity(n);
    let mut loss_sum: Option<Ciphertext> = None;
    for (logit, label) in logits.iter().zip(&framed_labels) {
        let diff = he_sub(logit, label)?;
        let sq = he_mul(&diff, &diff)?;
        let per_sample = he_sum_last(&sq)?;
        loss_sum = Some(match loss_sum {
            Some(acc) => he_add(&acc, &per_sample)?,
            None => per_sample,
        });
        grads.push(he_mul_scalar(&diff, 2.0 * scale)?);
    }
    let avg_loss = he_mul_scalar(&loss_sum.unwrap(), scale)?;
    Ok((avg_loss, grads))
}

// ---------------------------------------------------------------------------
// FedAvg and secure aggregation
// ---------------------------------------------------------------------------

/// Weighted elementwise mean of adapter + head parameters.
pub fn fedavg(
    params: &[(AdapterParams, HeadParams)],
    weights: &[f64],
) -> Result<(AdapterParams, HeadParams)> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::InvalidParam("fedavg needs one weight per client".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "fedavg weights sum to {wsum}, expected 1"
        )));
    }
    let flat0 = flatten_params(&params[0].0, &params[0].1);
    let mut acc = vec![0.0f64; flat0.len()];
    for ((theta, eta), &w) in params.iter().zip(weights) {
        let flat = flatten_params(theta, eta);
        if flat.len() != acc.len() {
            return Err(Error::ShapeMismatch("client parameter shapes differ".into()));
        }
        for (a, v) in acc.iter_mut().zip(flat) {
            *a += w * v;
        }
    }
    let mut theta = params[0].0.clone();
    let mut eta = params[0].1.clone();
    unflatten_params(&mut theta, &mut eta, &acc)?;
    Ok((theta, eta))
}

const FIXED_POINT_BITS: u32 = 40;
const FIXED_POINT_RANGE: f64 = (1u64 << 18) as f64;

#[derive(Debug)]
pub struct SecureAggregateOutcome {
    pub aggregate: Vec<f64>,
    /// What the server actually received from each client.
    pub submissions: Vec<Vec<i64>>,
    /// True when fewer than two parties forced a direct (unmasked) path.
    pub degraded_privacy: bool,
}

/// Pairwise-masked secure sum of pre-weighted update vectors in two's
/// complement fixed point. Each pair (i, j), i < j, derives the same mask
/// stream from the shared seed; i adds it and j subtracts it, so the
/// server-side wrapping sum telescopes to the exact fixed-point total.
pub fn secure_aggregate(updates: &[Vec<f64>], seed: u64) -> Result<SecureAggregateOutcome> {
    let k = updates.len();
    if k == 0 {
        return Err(Error::InvalidParam("no updates to aggregate".into()));
    }
    let len = updates[0].len();
    if updates.iter().any(|u| u.len() != len) {
        return Err(Error::ShapeMismatch("update vectors differ in length".into()));
    }
    for u in updates {
        for &v in u {
            if !v.is_finite() || v.abs() >= FIXED_POINT_RANGE {
                return Err(Error::InvalidParam(format!(
                    "update value {v} outside fixed-point range"
                )));
            }
        }
    }
    let quantize = |v: f64| -> i64 { (v * (1u64 << FIXED_POINT_BITS) as f64).round() as i64 };
    let mut submissions: Vec<Vec<i64>> = updates
        .iter()
        .map(|u| u.iter().map(|&v| quantize(v)).collect())
        .collect();
    let degraded = k < 2;
    if !degraded {
        for i in 0..k {
            for j in (i + 1)..k {
                let mut rng = derive_rng(seed, "pair-mask", &[i as u64, j as u64]);
                for idx in 0..len {
                    let m = rng.gen::<i64>();
                    submissions[i][idx] = submissions[i][idx].wrapping_add(m);
                    submissions[j][idx] = submissions[j][idx].wrapping_sub(m);
                }
            }
        }
    }
    let mut total = vec![0i64; len];
    for s in &submissions {
        for (t, &v) in total.iter_mut().zip(s) {
            *t = t.wrapping_add(v);
        }
    }
    let dequant = 1.0 / (1u64 << FIXED_POINT_BITS) as f64;
    Ok(SecureAggregateOutcome {
        aggregate: total.iter().map(|&q| q as f64 * dequant).collect(),
        submissions,
        degraded_privacy: degraded,
    })
}

/// Transmitted bytes for moving `n_k` samples through `l` blocks at
/// ciphertext size `c_bytes`; under stochastic block sampling only the
/// expected number of selected blocks transits (the optimized skip
/// accounting; the faithful protocol still transmits noised blocks).
pub fn comm_cost_model(n_k: u64, l: usize, c_bytes: f64, sbs: bool) -> f64 {
    let blocks = if sbs {
        sbs_expected_count(l, 1)
    } else {
        l as f64
    };
    n_k as f64 * blocks * c_bytes
}

// ---------------------------------------------------------------------------
// Round orchestration
// ---------------------------------------------------------------------------

/// Deterministic batch selection shared by the protocol and its plaintext
/// oracle: sample `n` indices without replacement.
pub fn select_batch(total: usize, n: usize, seed: u64, round: u64, client_idx: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut derive_rng(seed, "batch", &[round, client_idx]));
    order.truncate(n.min(total));
    order
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientRoundLog {
    pub client: String,
    pub loss: f64,
    pub mask: Vec<bool>,
    pub batch: Vec<usize>,
    pub bytes_to_client: u64,
    pub bytes_to_server: u64,
    pub perm_seed: u64,
    pub mask_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundLog {
    pub round: u64,
    pub clients: Vec<ClientRoundLog>,
}

/// One communication round for every client: encrypted block-wise inference
/// with the configured defenses, aligned adapter inference, encrypted loss
/// and gradient, and one local SGD step on adapter + head.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    round: u64,
    fed: &FederationConfig,
    seed: u64,
) -> Result<RoundLog> {
    let num_blocks = server.num_blocks();
    let mut logs = Vec::with_capacity(clients.len());
    for (ci, client) in clients.iter_mut().enumerate() {
        let store_len = server
            .stores
            .get(&client.id)
            .ok_or_else(|| Error::Protocol(format!("client {} never uploaded", client.id)))?
            .b0
            .len();
        let batch = select_batch(store_len, fed.batch_size, seed, round, ci as u64);
        let n = batch.len();
        let perm_seed = derive_seed(seed, "perm", &[round, ci as u64]);
        let mask_seed = derive_seed(seed, "mask", &[round, ci as u64]);
        let perms = if fed.permute {
            gen_permutations(n, num_blocks, perm_seed)?
        } else {
            PermutationSet::identity(n, num_blocks)
        };
        let mask = match fed.sbs {
            SbsMode::Off => SamplingMask::all_true(num_blocks),
            SbsMode::Plain => sbs_mask(num_blocks, false, mask_seed)?,
            SbsMode::Constrained => sbs_mask(num_blocks, true, mask_seed)?,
        };

        let mut current: Vec<Ciphertext> = {
            let store = server.stores.get(&client.id).unwrap();
            batch.iter().map(|&i| store.b0[i].clone()).collect()
        };
        let bytes_before_down = server.comm.bytes_where(|m| m.direction == Direction::ToClient);
        let bytes_before_up = server.comm.bytes_where(|m| m.direction == Direction::ToServer);

        let mut retained: Vec<Vec<Tensor>> = Vec::with_capacity(num_blocks);
        let ir_shape = [server.model_cfg.seq_len, server.model_cfg.model_dim];
        for block in 1..=num_blocks {
            let noise_seed = derive_seed(seed, "eval-noise", &[round, ci as u64]);
            let sent = server_block_eval(
                server, &client.id, round, block, &current, &perms, &mask, noise_seed,
            )?;
            server.comm.record(Message {
                round,
                client: client.id.clone(),
                direction: Direction::ToClient,
                kind: PayloadKind::CiphertextIr,
                block: Some(block),
                bytes: sent.iter().map(ciphertext_bytes).sum(),
            });
            let mut relay_rng = derive_rng(seed, "relay", &[round, ci as u64, block as u64]);
            let mut returned = Vec::with_capacity(n);
            let mut views = Vec::with_capacity(n);
            for ct in &sent {
                let (fresh, plain) = client_relay(client, &server.registry, ct, &mut relay_rng)?;
                returned.push(fresh);
                views.push(plain);
            }
            server.comm.record(Message {
                round,
                client: client.id.clone(),
                direction: Direction::ToServer,
                kind: PayloadKind::CiphertextIr,
                block: Some(block),
                bytes: returned.iter().map(ciphertext_bytes).sum(),
            });
            // client keeps usable plaintext only for selected blocks
            retained.push(if mask.selected[block - 1] {
                views
            } else {
                (0..n).map(|_| Tensor::zeros(&ir_shape)).collect()
            });
            // server restores canonical order and strips the noise
            let mut restored = perms.block(block).inverse().apply_items(&returned)?;
            if !mask.selected[block - 1] {
                for (i, ct) in restored.iter_mut().enumerate() {
                    *ct = server.noise_ledger.unmask(&client.id, round, block, i, ct)?;
                }
            }
            current = restored;
        }
        // round metadata: disclosed relative products and the sampling mask
        server.comm.record(Message {
            round,
            client: client.id.clone(),
            direction: Direction::ToClient,
            kind: PayloadKind::RelativeProducts,
            block: None,
            bytes: ((num_blocks + 1) * n * 2) as u64,
        });
        server.comm.record(Message {
            round,
            client: client.id.clone(),
            direction: Direction::ToClient,
            kind: PayloadKind::MaskMeta,
            block: None,
            bytes: (num_blocks + 8) as u64,
        });

        // client: aligned adapter chain with trainable parameters
        let lifted_theta = client.theta.map(|t| Var::param(t.clone()));
        let lifted_eta = client.eta.map(|t| Var::param(t.clone()));
        let logit_vars = crate::privacy::align_chain_generic(
            &retained,
            &mask.selected,
            &perms,
            &lifted_theta,
            &lifted_eta,
            |t| Var::constant(t.clone()),
        )?;
        // encrypt predictions and hand them to the server
        let mut logit_rng = derive_rng(seed, "logit-noise", &[round, ci as u64]);
        let mut logit_cts = Vec::with_capacity(n);
        for lv in &logit_vars {
            logit_cts.push(server.registry.encrypt(&client.key, lv.value(), &mut logit_rng)?);
        }
        server.comm.record(Message {
            round,
            client: client.id.clone(),
            direction: Direction::ToServer,
            kind: PayloadKind::CiphertextLossGrad,
            block: None,
            bytes: logit_cts.iter().map(ciphertext_bytes).sum(),
        });
        let (loss_ct, grad_cts) = encrypted_loss_and_grad(server, &client.id, &logit_cts, &batch, &perms)?;
        server.comm.record(Message {
            round,
            client: client.id.clone(),
            direction: Direction::ToClient,
            kind: PayloadKind::CiphertextLossGrad,
            block: None,
            bytes: ciphertext_bytes(&loss_ct) + grad_cts.iter().map(ciphertext_bytes).sum::<u64>(),
        });
        // client decrypts loss and per-sample gradients, then steps
        let loss_val = server
            .registry
            .decrypt_as(&client.id, &client.key, &loss_ct)?
            .data()[0];
        let mut surrogate: Option<Var> = None;
        for (lv, g_ct) in logit_vars.iter().zip(&grad_cts) {
            let g = server.registry.decrypt_as(&client.id, &client.key, g_ct)?;
            let term = lv.mul(&Var::constant(g))?.sum_all()?;
            surrogate = Some(match surrogate {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let surrogate = surrogate.ok_or_else(|| Error::Protocol("empty batch".into()))?;
        surrogate.backward()?;
        let vars: Vec<Var> = lifted_theta
            .fields()
            .into_iter()
            .chain(lifted_eta.fields())
            .cloned()
            .collect();
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "adapter gradient for {} in round {round}",
                client.id
            )));
        }
        let mut params: Vec<&mut Tensor> = client
            .theta
            .fields_mut()
            .into_iter()
            .chain(client.eta.fields_mut())
            .collect();
        Sgd::new(fed.adapter_lr).step(&mut params, &grads);

        logs.push(ClientRoundLog {
            client: client.id.clone(),
            loss: loss_val,
            mask: mask.selected.clone(),
            batch,
            bytes_to_client: server.comm.bytes_where(|m| m.direction == Direction::ToClient)
                - bytes_before_down,
            bytes_to_server: server.comm.bytes_where(|m| m.direction == Direction::ToServer)
                - bytes_before_up,
            perm_seed,
            mask_seed,
        });
    }
    Ok(RoundLog {
        round,
        clients: logs,
    })
}

// ---------------------------------------------------------------------------
// Full adaptation runs and reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: u64,
    pub mean_client_loss: f64,
    pub balanced_accuracy: f64,
    pub bytes_to_clients: u64,
    pub bytes_to_server: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub server_decrypts: usize,
    pub client_block_reads: usize,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub rounds: Vec<RoundReport>,
    pub round_logs: Vec<RoundLog>,
    pub total_bytes: u64,
    /// Intermediate-representation ciphertext bytes sent to clients.
    pub ir_bytes_to_clients: u64,
    /// Cost-model prediction for the same traffic.
    pub predicted_ir_bytes: f64,
    /// Non-IR share of the downlink (loss/grad ciphertexts + metadata).
    pub downlink_overhead_ratio: f64,
    pub audit: AuditReport,
}

/// Shared initial adapter/head parameters broadcast to every client.
pub fn init_client_params(
    model_cfg: &ModelConfig,
    rank: usize,
    seed: u64,
) -> Result<(AdapterParams, HeadParams)> {
    let theta = AdapterParams::init(model_cfg.num_blocks, model_cfg.model_dim, rank, seed)?;
    let mut rng = derive_rng(seed, "head-init", &[]);
    let std = (2.0 / (model_cfg.model_dim + model_cfg.num_classes) as f64).sqrt();
    let eta = HeadParams {
        w: Tensor::randn(&[model_cfg.model_dim, model_cfg.num_classes], std, &mut rng),
        b: Tensor::zeros(&[model_cfg.num_classes]),
    };
    Ok((theta, eta))
}

pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

/// Build a server around a frozen approximated model and one client per
/// dataset, all starting from the same broadcast adapter/head parameters.
pub fn setup_federation(
    model: &TransformerModel,
    datasets: Vec<Dataset>,
    he_params: EncryptionParams,
    rank: usize,
    seed: u64,
) -> Result<Federation> {
    he_params.validate()?;
    let registry = KeyRegistry::new();
    let (theta0, eta0) = init_client_params(&model.config, rank, seed)?;
    let mut clients = Vec::with_capacity(datasets.len());
    for (i, data) in datasets.into_iter().enumerate() {
        let id = format!("client{i}");
        let key = registry.keygen(&id, he_params)?;
        clients.push(ClientState {
            id,
            key,
            data,
            theta: theta0.clone(),
            eta: eta0.clone(),
        });
    }
    let server = ServerState::new(registry, model, he_params);
    Ok(Federation { server, clients })
}

/// Global balanced accuracy of (frozen blocks + adapter + head) on a
/// held-out set, evaluated in plaintext.
pub fn evaluate_global(
    server: &ServerState,
    theta: &AdapterParams,
    eta: &HeadParams,
    data: &Dataset,
) -> Result<f64> {
    let blocks = server.blocks_for(SERVER_PARTY)?.to_vec();
    let mut predictions = Vec::with_capacity(data.len());
    for x in &data.inputs {
        let mut cur = embed_forward(x, &server.embed)?;
        let mut outs = Vec::with_capacity(blocks.len());
        for p in &blocks {
            let step = block_forward_approx(&cur, p, &server.model_cfg, &server.kernels)?;
            cur = step.out.clone();
            outs.push(step.out);
        }
        let h = adapter::adapter_chain(&outs, theta)?;
        let logits = head_forward(&h, eta, server.model_cfg.seq_len)?;
        predictions.push(argmax(logits.data()));
    }
    Ok(balanced_accuracy(&predictions, &data.labels, data.num_classes))
}

/// Run `fed.rounds` rounds of the full protocol: per-client encrypted
/// inference and local updates, secure aggregation weighted by sample
/// counts, and a broadcast of the global parameters. Clients upload their
/// encrypted datasets on first use.
pub fn run_adaptation(
    server: &mut ServerState,
    clients: &mut [ClientState],
    fed: &FederationConfig,
    eval_data: &Dataset,
    seed: u64,
) -> Result<ExperimentReport> {
    fed.validate()?;
    for (i, client) in clients.iter().enumerate() {
        if !server.stores.contains_key(&client.id) {
            upload_encrypted_dataset(client, server, derive_seed(seed, "upload", &[i as u64]))?;
        }
    }
    let total_samples: usize = clients.iter().map(|c| c.num_samples()).sum();
    let weights: Vec<f64> = clients
        .iter()
        .map(|c| c.num_samples() as f64 / total_samples as f64)
        .collect();

    let initial_accuracy = evaluate_global(server, &clients[0].theta, &clients[0].eta, eval_data)?;
    let mut rounds = Vec::with_capacity(fed.rounds);
    let mut round_logs = Vec::with_capacity(fed.rounds);
    for round in 0..fed.rounds as u64 {
        let log = run_round(server, clients, round, fed, seed)?;
        // secure aggregation of pre-weighted updates
        let updates: Vec<Vec<f64>> = clients
            .iter()
            .zip(&weights)
            .map(|(c, &w)| {
                flatten_params(&c.theta, &c.eta)
                    .into_iter()
                    .map(|v| v * w)
                    .collect()
            })
            .collect();
        let outcome = secure_aggregate(&updates, derive_seed(seed, "secure-agg", &[round]))?;
        let submission_bytes = (outcome.aggregate.len() * 8) as u64;
        for c in clients.iter() {
            server.comm.record(Message {
                round,
                client: c.id.clone(),
                direction: Direction::ToServer,
                kind: PayloadKind::Aggregate,
                block: None,
                bytes: submission_bytes,
            });
            server.comm.record(Message {
                round,
                client: c.id.clone(),
                direction: Direction::ToClient,
                kind: PayloadKind::Aggregate,
                block: None,
                bytes: submission_bytes,
            });
        }
        let mut theta_g = clients[0].theta.clone();
        let mut eta_g = clients[0].eta.clone();
        unflatten_params(&mut theta_g, &mut eta_g, &outcome.aggregate)?;
        for c in clients.iter_mut() {
            c.theta = theta_g.clone();
            c.eta = eta_g.clone();
        }
        let accuracy = evaluate_global(server, &theta_g, &eta_g, eval_data)?;
        let mean_loss =
            log.clients.iter().map(|c| c.loss).sum::<f64>() / log.clients.len() as f64;
        rounds.push(RoundReport {
            round,
            mean_client_loss: mean_loss,
            balanced_accuracy: accuracy,
            bytes_to_clients: log.clients.iter().map(|c| c.bytes_to_client).sum(),
            bytes_to_server: log.clients.iter().map(|c| c.bytes_to_server).sum(),
        });
        round_logs.push(log);
    }

    let final_accuracy = rounds.last().map_or(initial_accuracy, |r| r.balanced_accuracy);
    let ir_down = server.comm.bytes_where(|m| {
        m.direction == Direction::ToClient && m.kind == PayloadKind::CiphertextIr
    });
    let down_total = server
        .comm
        .bytes_where(|m| m.direction == Direction::ToClient);
    let agg_down = server.comm.bytes_where(|m| {
        m.direction == Direction::ToClient && m.kind == PayloadKind::Aggregate
    });
    // cost-model prediction for the IR downlink actually exercised
    let transmitted_samples: u64 = round_logs
        .iter()
        .flat_map(|r| r.clients.iter())
        .map(|c| c.batch.len() as u64)
        .sum();
    let predicted_ir_bytes = comm_cost_model(
        transmitted_samples,
        server.num_blocks(),
        server.ir_ciphertext_bytes() as f64,
        false,
    );
    let overhead = (down_total - ir_down - agg_down) as f64 / ir_down.max(1) as f64;
    let audit = AuditReport {
        server_decrypts: server.registry.audit().decrypts_by(SERVER_PARTY),
        client_block_reads: clients
            .iter()
            .map(|c| server.block_audit.reads_by(&c.id))
            .sum(),
        violations: server
            .registry
            .audit()
            .violations()
            .into_iter()
            .chain(server.block_audit.violations())
            .collect(),
    };
    Ok(ExperimentReport {
        initial_accuracy,
        final_accuracy,
        rounds,
        round_logs,
        total_bytes: server.comm.total_bytes(),
        ir_bytes_to_clients: ir_down,
        predicted_ir_bytes,
        downlink_overhead_ratio: overhead,
        audit,
    })
}

// ---------------------------------------------------------------------------
// Plaintext split-learning oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub accuracy_per_round: Vec<f64>,
    pub mean_loss_per_round: Vec<f64>,
}

/// Reference implementation of the same adaptation without encryption,
/// permutations, masking, or secure aggregation: plaintext block walks,
/// local squared-error updates, plain weighted averaging. Shares only the
/// batch-selection and parameter-initialization seeds with the protocol.
pub fn run_oracle_adaptation(
    model: &TransformerModel,
    datasets: &[Dataset],
    fed: &FederationConfig,
    eval_data: &Dataset,
    seed: u64,
    init_seed: u64,
) -> Result<(OracleReport, Vec<(AdapterParams, HeadParams)>)> {
    fed.validate()?;
    let (theta0, eta0) = init_client_params(&model.config, fed.adapter_rank, init_seed)?;
    let mut params: Vec<(AdapterParams, HeadParams)> =
        datasets.iter().map(|_| (theta0.clone(), eta0.clone())).collect();
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    let weights: Vec<f64> = datasets.iter().map(|d| d.len() as f64 / total as f64).collect();

    let block_outputs = |x: &Tensor| -> Result<Vec<Tensor>> {
        let mut cur = embed_forward(x, &model.embed)?;
        let mut outs = Vec::with_capacity(model.blocks.len());
        for p in &model.blocks {
            let step = block_forward_approx(&cur, p, &model.config, &model.kernels)?;
            cur = step.out.clone();
            outs.push(step.out);
        }
        Ok(outs)
    };
    let evaluate = |theta: &AdapterParams, eta: &HeadParams| -> Result<f64> {
        let mut predictions = Vec::with_capacity(eval_data.len());
        for x in &eval_data.inputs {
            let outs = block_outputs(x)?;
            let h = adapter::adapter_chain(&outs, theta)?;
            let logits = head_forward(&h, eta, model.config.seq_len)?;
            predictions.push(argmax(logits.data()));
        }
        Ok(balanced_accuracy(&predictions, &eval_data.labels, eval_data.num_classes))
    };

    let initial_accuracy = evaluate(&theta0, &eta0)?;
    let mut accuracy_per_round = Vec::with_capacity(fed.rounds);
    let mut mean_loss_per_round = Vec::with_capacity(fed.rounds);
    let all_true = vec![true; model.config.num_blocks];
    for round in 0..fed.rounds as u64 {
        let mut losses = Vec::with_capacity(datasets.len());
        for (ci, data) in datasets.iter().enumerate() {
            let batch = select_batch(data.len(), fed.batch_size, seed, round, ci as u64);
            // stack per-block outputs for the whole batch
            let mut stacked: Vec<Vec<Tensor>> = vec![Vec::new(); model.config.num_blocks];
            let mut labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let outs = block_outputs(&data.inputs[i])?;
                for (l, o) in outs.into_iter().enumerate() {
                    stacked[l].push(o);
                }
                labels.push(data.labels[i]);
            }
            let blocks: Vec<Tensor> = stacked
                .iter()
                .map(|rows| Tensor::stack_rows(rows))
                .collect::<Result<_>>()?;
            let (theta, eta) = &mut params[ci];
            let loss = adapter::local_update(
                &blocks,
                &all_true,
                adapter::UpdateTarget::Labels(&labels),
                theta,
                eta,
                fed.adapter_lr,
                model.config.seq_len,
            )?
            .expect("labels target yields a loss");
            losses.push(loss);
        }
        let (theta_g, eta_g) = fedavg(&params, &weights)?;
        for p in params.iter_mut() {
            *p = (theta_g.clone(), eta_g.clone());
        }
        accuracy_per_round.push(evaluate(&theta_g, &eta_g)?);
        mean_loss_per_round.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    let final_accuracy = accuracy_per_round.last().copied().unwrap_or(initial_accuracy);
    Ok((
        OracleReport {
            initial_accuracy,
            final_accuracy,
            accuracy_per_round,
            mean_loss_per_round,
        },
        params,
    ))
}
