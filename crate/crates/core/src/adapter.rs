//! Low-rank parallel adapter and classification head: the only trainable
//! client-side state.
//!
//! The adapter reads frozen-block outputs through a residual chain and never
//! backpropagates into the backbone. It runs client-side in plaintext, so it
//! uses the exact GELU.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::ExactValue;
use crate::model::{
    head_forward, read_header, read_tensor, write_header, write_tensor, HeadParams, KIND_ADAPTER,
};
use crate::optim::Sgd;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct AdapterBlock<P = Tensor> {
    pub down: P,
    pub up: P,
    /// Learnable scalar scaling, shape (1,).
    pub alpha: P,
}

#[derive(Debug, Clone)]
pub struct AdapterParams<P = Tensor> {
    pub rank: usize,
    pub blocks: Vec<AdapterBlock<P>>,
}

impl<P> AdapterParams<P> {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> AdapterParams<Q> {
        AdapterParams {
            rank: self.rank,
            blocks: self
                .blocks
                .iter()
                .map(|b| AdapterBlock {
                    down: f(&b.down),
                    up: f(&b.up),
                    alpha: f(&b.alpha),
                })
                .collect(),
        }
    }

    pub fn fields(&self) -> Vec<&P> {
        let mut out = Vec::with_capacity(self.blocks.len() * 3);
        for b in &self.blocks {
            out.push(&b.down);
            out.push(&b.up);
            out.push(&b.alpha);
        }
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::with_capacity(self.blocks.len() * 3);
        for b in &mut self.blocks {
            out.push(&mut b.down);
            out.push(&mut b.up);
            out.push(&mut b.alpha);
        }
        out
    }
}

impl AdapterParams<Tensor> {
    /// Alpha starts at zero so the chain begins as the pure residual path.
    pub fn init(num_blocks: usize, model_dim: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank >= model_dim {
            return Err(Error::InvalidParam(format!(
                "adapter rank {rank} must satisfy 1 <= rank < model_dim {model_dim}"
            )));
        }
        let mut rng = derive_rng(seed, "adapter-init", &[]);
        let std_d = (2.0 / (model_dim + rank) as f64).sqrt();
        let blocks = (0..num_blocks)
            .map(|_| AdapterBlock {
                down: Tensor::randn(&[model_dim, rank], std_d, &mut rng),
                up: Tensor::randn(&[rank, model_dim], std_d, &mut rng),
                alpha: Tensor::zeros(&[1]),
            })
            .collect();
        Ok(Self { rank, blocks })
    }
}

/// Adapter transform for one block: alpha * GELU(z W_d) W_u.
pub fn adapter_g<V: ExactValue>(z: &V, block: usize, theta: &AdapterParams<V::Param>) -> Result<V> {
    let b = theta
        .blocks
        .get(block)
        .ok_or_else(|| Error::InvalidParam(format!("adapter block {block} out of range")))?;
    z.matmul_param(&b.down)?
        .gelu()?
        .matmul_param(&b.up)?
        .mul_param(&b.alpha)
}

/// Residual adapter chain over block outputs b_1..b_L:
/// h_0 = b_L, h_l = g_l(b_l + h_{l-1}) + h_{l-1}; returns h_L.
///
/// Row-local throughout, so it applies unchanged to one sample
/// (seq_len, dim) or to a whole stacked batch (n * seq_len, dim).
pub fn adapter_chain<V: ExactValue>(blocks: &[V], theta: &AdapterParams<V::Param>) -> Result<V> {
    if blocks.len() != theta.num_blocks() {
        return Err(Error::ShapeMismatch(format!(
            "{} block outputs for {} adapter blocks",
            blocks.len(),
            theta.num_blocks()
        )));
    }
    let last = blocks
        .last()
        .ok_or_else(|| Error::ShapeMismatch("empty adapter chain".into()))?;
    let mut h = last.clone();
    for (idx, b) in blocks.iter().enumerate() {
        let g = adapter_g(&b.add(&h)?, idx, theta)?;
        h = g.add(&h)?;
    }
    Ok(h)
}

/// Chain with non-selected block outputs replaced by zeros.
pub fn adapter_chain_masked<V: ExactValue>(
    blocks: &[V],
    mask: &[bool],
    theta: &AdapterParams<V::Param>,
) -> Result<V> {
    if mask.len() != blocks.len() {
        return Err(Error::ShapeMismatch("mask length != block count".into()));
    }
    let zeroed: Vec<V> = blocks
        .iter()
        .zip(mask)
        .map(|(b, &keep)| if keep { Ok(b.clone()) } else { b.mul_scalar(0.0) })
        .collect::<Result<_>>()?;
    adapter_chain(&zeroed, theta)
}

/// What a local step optimizes against.
pub enum UpdateTarget<'a> {
    /// dLoss/dLogits rows delivered by the protocol, shape (n, classes).
    LossGrad(&'a Tensor),
    /// Hard labels; the client forms the squared-error loss itself.
    Labels(&'a [usize]),
}

/// One plaintext SGD step on adapter + head from stacked block outputs.
/// `blocks[l]` holds the (n * seq_len, dim) stacked output of block l+1 for
/// the batch; nothing propagates into any backbone parameter. Returns the
/// monitored loss when labels are the target.
pub fn local_update(
    blocks: &[Tensor],
    mask: &[bool],
    target: UpdateTarget<'_>,
    theta: &mut AdapterParams,
    eta: &mut HeadParams,
    lr: f64,
    seq_len: usize,
) -> Result<Option<f64>> {
    if lr <= 0.0 {
        return Err(Error::InvalidParam("learning rate must be > 0".into()));
    }
    let lifted_theta = theta.map(|t| Var::param(t.clone()));
    let lifted_eta = eta.map(|t| Var::param(t.clone()));
    let block_vars: Vec<Var> = blocks.iter().map(|t| Var::constant(t.clone())).collect();
    let h = adapter_chain_masked(&block_vars, mask, &lifted_theta)?;
    let logits = head_forward(&h, &lifted_eta, seq_len)?;
    let n = logits.shape()[0];
    let classes = logits.shape()[1];
    let (loss_node, monitored) = match target {
        UpdateTarget::LossGrad(g) => {
            if g.shape() != logits.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "loss gradient {:?} vs logits {:?}",
                    g.shape(),
                    logits.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("delivered loss gradient".into()));
            }
            // surrogate whose gradient w.r.t. parameters is J^T g
            (logits.mul(&Var::constant(g.clone()))?.sum_all()?, None)
        }
        UpdateTarget::Labels(labels) => {
            if labels.len() != n {
                return Err(Error::ShapeMismatch("label count != batch".into()));
            }
            let mut onehot = Tensor::zeros(&[n, classes]);
            for (i, &y) in labels.iter().enumerate() {
                onehot.data_mut()[i * classes + y] = 1.0;
            }
            let diff = logits.sub(&Var::constant(onehot))?;
            let loss = diff
                .mul(&diff)?
                .sum_all()?
                .scale(1.0 / (n * classes) as f64);
            let v = loss.scalar_value();
            (loss, Some(v))
        }
    };
    loss_node.backward()?;
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
        return Err(Error::NonFinite("adapter gradient".into()));
    }
    let mut params: Vec<&mut Tensor> = theta
        .fields_mut()
        .into_iter()
        .chain(eta.fields_mut())
        .collect();
    Sgd::new(lr).step(&mut params, &grads);
    Ok(monitored)
}

/// Flatten adapter + head parameters into one vector (aggregation order).
pub fn flatten_params(theta: &AdapterParams, eta: &HeadParams) -> Vec<f64> {
    let mut out = Vec::new();
    for t in theta.fields().into_iter().chain(eta.fields()) {
        out.extend_from_slice(t.data());
    }
    out
}

pub fn unflatten_params(theta: &mut AdapterParams, eta: &mut HeadParams, flat: &[f64]) -> Result<()> {
    let mut offset = 0;
    for t in theta.fields_mut().into_iter().chain(eta.fields_mut()) {
        let n = t.len();
        if offset + n > flat.len() {
            return Err(Error::ShapeMismatch("flat parameter vector too short".into()));
        }
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    if offset != flat.len() {
        return Err(Error::ShapeMismatch("flat parameter vector too long".into()));
    }
    Ok(())
}

/// Adapter + head checkpoint sharing the model checkpoint layout: header
/// dims are (num_blocks, model_dim, rank, num_classes), then per block
/// down/up/alpha and finally head w/b as little-endian f64.
pub fn save_adapter(path: &Path, theta: &AdapterParams, eta: &HeadParams) -> Result<()> {
    let model_dim = theta
        .blocks
        .first()
        .map(|b| b.down.shape()[0])
        .unwrap_or(0);
    let num_classes = eta.w.shape()[1];
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(
        &mut w,
        KIND_ADAPTER,
        &[
            theta.num_blocks() as u64,
            model_dim as u64,
            theta.rank as u64,
            num_classes as u64,
        ],
    )?;
    for t in theta.fields().into_iter().chain(eta.fields()) {
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<(AdapterParams, HeadParams)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let dims = read_header(&mut r, KIND_ADAPTER)?;
    if dims.len() != 4 {
        return Err(Error::Checkpoint("bad adapter header".into()));
    }
    let (num_blocks, model_dim, rank, num_classes) = (
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
    );
    let mut theta = AdapterParams::init(num_blocks, model_dim, rank, 0)?;
    let mut eta = HeadParams {
        w: Tensor::zeros(&[model_dim, num_classes]),
        b: Tensor::zeros(&[num_classes]),
    };
    let shapes: Vec<Vec<usize>> = theta
        .fields()
        .into_iter()
        .chain(eta.fields())
        .map(|t| t.shape().to_vec())
        .collect();
    let mut tensors = Vec::with_capacity(shapes.len());
    for s in &shapes {
        tensors.push(read_tensor(&mut r, s)?);
    }
    for (slot, t) in theta
        .fields_mut()
        .into_iter()
        .chain(eta.fields_mut())
        .zip(tensors)
    {
        *slot = t;
    }
    Ok((theta, eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, gelu_exact_scalar, grad_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta_with_alpha(alpha: f64, seed: u64) -> AdapterParams {
        let mut theta = AdapterParams::init(3, 8, 2, seed).unwrap();
        for b in &mut theta.blocks {
            b.alpha = Tensor::new(vec![1], vec![alpha]).unwrap();
        }
        theta
    }

    fn random_blocks(l: usize, rows: usize, dim: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..l).map(|_| Tensor::randn(&[rows, dim], 1.0, &mut rng)).collect()
    }

    #[test]
    fn alpha_zero_gives_zero_adapter_and_residual_chain() {
        let theta = theta_with_alpha(0.0, 1);
        let blocks = random_blocks(3, 4, 8, 2);
        let g = adapter_g(&blocks[0], 0, &theta).unwrap();
        assert!(g.allclose(&Tensor::zeros(&[4, 8]), 0.0));
        let h = adapter_chain(&blocks, &theta).unwrap();
        assert!(h.allclose(&blocks[2], 0.0));
    }

    #[test]
    fn zero_up_projection_gives_zero_output() {
        let mut theta = theta_with_alpha(1.0, 3);
        for b in &mut theta.blocks {
            b.up = Tensor::zeros(b.up.shape());
        }
        let blocks = random_blocks(3, 4, 8, 4);
        let g = adapter_g(&blocks[1], 1, &theta).unwrap();
        assert!(g.allclose(&Tensor::zeros(&[4, 8]), 0.0));
    }

    #[test]
    fn rank_one_matches_hand_computation() {
        let mut theta = AdapterParams::init(1, 3, 1, 0).unwrap();
        theta.blocks[0].down = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        theta.blocks[0].up = Tensor::new(vec![1, 3], vec![0.3, 0.7, -1.0]).unwrap();
        theta.blocks[0].alpha = Tensor::new(vec![1], vec![2.0]).unwrap();
        let z = Tensor::new(vec![1, 3], vec![0.4, 0.1, -0.6]).unwrap();
        let inner = 0.4 * 1.0 + 0.1 * (-2.0) + (-0.6) * 0.5;
        let act = gelu_exact_scalar(inner);
        let expected =
            Tensor::new(vec![1, 3], vec![2.0 * act * 0.3, 2.0 * act * 0.7, 2.0 * act * -1.0])
                .unwrap();
        let got = adapter_g(&z, 0, &theta).unwrap();
        assert!(got.allclose(&expected, 1e-12));
    }

    #[test]
    fn single_block_chain_matches_direct_evaluation() {
        let mut theta = AdapterParams::init(1, 8, 2, 5).unwrap();
        theta.blocks[0].alpha = Tensor::new(vec![1], vec![0.7]).unwrap();
        let blocks = random_blocks(1, 4, 8, 6);
        let h0 = blocks[0].clone();
        let direct = adapter_g(&blocks[0].add(&h0).unwrap(), 0, &theta)
            .unwrap()
            .add(&h0)
            .unwrap();
        let chained = adapter_chain(&blocks, &theta).unwrap();
        assert!(chained.allclose(&direct, 1e-12));
    }

    #[test]
    fn chain_is_permutation_equivariant_over_samples() {
        let theta = theta_with_alpha(0.5, 7);
        // batch of 3 samples, seq 2: rows grouped per sample
        let blocks = random_blocks(3, 6, 8, 8);
        let full = adapter_chain(&blocks, &theta).unwrap();
        // permute samples (row groups of 2) the same way in every block
        let perm = [2usize, 0, 1];
        let permute = |t: &Tensor| {
            let rows: Vec<Tensor> = perm
                .iter()
                .map(|&s| t.slice_rows(s * 2, (s + 1) * 2).unwrap())
                .collect();
            Tensor::stack_rows(&rows).unwrap()
        };
        let permuted_blocks: Vec<Tensor> = blocks.iter().map(permute).collect();
        let permuted_out = adapter_chain(&permuted_blocks, &theta).unwrap();
        assert!(permuted_out.allclose(&permute(&full), 1e-12));
    }

    #[test]
    fn masked_chain_matches_substitution_oracle() {
        let theta = theta_with_alpha(0.4, 9);
        let blocks = random_blocks(3, 4, 8, 10);
        let mask = [true, false, true];
        let masked = adapter_chain_masked(&blocks, &mask, &theta).unwrap();
        let substituted: Vec<Tensor> = blocks
            .iter()
            .zip(mask)
            .map(|(b, keep)| if keep { b.clone() } else { Tensor::zeros(b.shape()) })
            .collect();
        let oracle = adapter_chain(&substituted, &theta).unwrap();
        assert!(masked.allclose(&oracle, 0.0));
        // all-true equals the unmasked chain
        let all = adapter_chain_masked(&blocks, &[true, true, true], &theta).unwrap();
        assert!(all.allclose(&adapter_chain(&blocks, &theta).unwrap(), 0.0));
        // all-false with alpha = 0 collapses to h_0 = zeroed b_L
        let theta0 = theta_with_alpha(0.0, 9);
        let none = adapter_chain_masked(&blocks, &[false, false, false], &theta0).unwrap();
        assert!(none.allclose(&Tensor::zeros(&[4, 8]), 0.0));
    }

    #[test]
    fn batched_chain_equals_per_sample_rows() {
        let theta = theta_with_alpha(0.3, 11);
        let n = 3;
        let seq = 2;
        let blocks = random_blocks(3, n * seq, 8, 12);
        let batched = adapter_chain(&blocks, &theta).unwrap();
        for s in 0..n {
            let per_sample: Vec<Tensor> = blocks
                .iter()
                .map(|b| b.slice_rows(s * seq, (s + 1) * seq).unwrap())
                .collect();
            let h = adapter_chain(&per_sample, &theta).unwrap();
            assert!(h.allclose(&batched.slice_rows(s * seq, (s + 1) * seq).unwrap(), 0.0));
        }
    }

    #[test]
    fn head_selects_features_and_grads_check() {
        let eta = HeadParams {
            w: Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            b: Tensor::zeros(&[2]),
        };
        let h = Tensor::new(vec![2, 2], vec![3.0, 5.0, 7.0, 9.0]).unwrap();
        // one sample of seq 2; pooled features are (5, 7)
        let logits = head_forward(&h, &eta, 2).unwrap();
        assert!(logits.allclose(&Tensor::new(vec![1, 2], vec![7.0, 5.0]).unwrap(), 1e-12));

        let zero_w = HeadParams {
            w: Tensor::zeros(&[2, 2]),
            b: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
        };
        let logits = head_forward(&h, &zero_w, 2).unwrap();
        assert!(logits.allclose(&Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap(), 1e-12));

        // gradient of a squared-logit loss w.r.t. head weight
        let w0 = Tensor::new(vec![2, 2], vec![0.2, -0.1, 0.4, 0.3]).unwrap();
        let f = |w: &Tensor| {
            let eta = HeadParams {
                w: w.clone(),
                b: Tensor::zeros(&[2]),
            };
            head_forward(&h, &eta, 2).unwrap().frobenius_sq()
        };
        let w = Var::param(w0.clone());
        let eta_v = HeadParams {
            w: w.clone(),
            b: Var::param(Tensor::zeros(&[2])),
        };
        let logits = head_forward(&Var::constant(h.clone()), &eta_v, 2).unwrap();
        let loss = logits.mul(&logits).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let numeric = finite_diff_grad(f, &w0, 1e-6);
        assert!(grad_rel_error(&w.grad().unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn zero_loss_gradient_leaves_parameters_unchanged() {
        let mut theta = theta_with_alpha(0.2, 13);
        let mut eta = HeadParams {
            w: Tensor::ones(&[8, 2]),
            b: Tensor::zeros(&[2]),
        };
        let before_theta = theta.clone();
        let before_eta = eta.clone();
        let blocks = random_blocks(3, 4, 8, 14);
        let zero_grad = Tensor::zeros(&[2, 2]);
        local_update(
            &blocks,
            &[true, true, true],
            UpdateTarget::LossGrad(&zero_grad),
            &mut theta,
            &mut eta,
            0.1,
            2,
        )
        .unwrap();
        for (a, b) in theta.fields().iter().zip(before_theta.fields()) {
            assert!(a.allclose(b, 0.0));
        }
        for (a, b) in eta.fields().iter().zip(before_eta.fields()) {
            assert!(a.allclose(b, 0.0));
        }
    }

    #[test]
    fn sgd_step_matches_hand_derivation_on_head_bias() {
        // One sample, seq 1, all-zero adapter: logits = pooled h W + b.
        // Squared-error loss against one-hot label; check the bias step.
        let mut theta = theta_with_alpha(0.0, 15);
        let mut eta = HeadParams {
            w: Tensor::zeros(&[8, 2]),
            b: Tensor::zeros(&[2]),
        };
        let blocks = vec![
            Tensor::ones(&[1, 8]),
            Tensor::ones(&[1, 8]),
            Tensor::ones(&[1, 8]),
        ];
        let labels = [1usize];
        let lr = 0.5;
        let loss = local_update(
            &blocks,
            &[true, true, true],
            UpdateTarget::Labels(&labels),
            &mut theta,
            &mut eta,
            lr,
            1,
        )
        .unwrap()
        .unwrap();
        // logits were (0, 0), target (0, 1): loss = (0 + 1)/2
        assert!((loss - 0.5).abs() < 1e-12);
        // dL/db = 2(logits - y)/(n * c) = (0, -1); b <- b - lr * grad
        assert!(eta
            .b
            .allclose(&Tensor::new(vec![2], vec![0.0, 0.5]).unwrap(), 1e-12));
    }

    #[test]
    fn repeated_updates_learn_separable_task() {
        let mut theta = theta_with_alpha(0.0, 17);
        let mut eta = HeadParams {
            w: Tensor::zeros(&[8, 2]),
            b: Tensor::zeros(&[2]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut blocks_per_class = Vec::new();
        for c in 0..2 {
            let center = Tensor::full(&[2, 8], if c == 0 { 1.0 } else { -1.0 });
            let sample = center.add(&Tensor::randn(&[2, 8], 0.1, &mut rng)).unwrap();
            blocks_per_class.push(sample);
        }
        let mut last_loss = f64::INFINITY;
        for _ in 0..200 {
            let stacked = Tensor::stack_rows(&blocks_per_class).unwrap();
            let blocks = vec![stacked.clone(), stacked.clone(), stacked.clone()];
            last_loss = local_update(
                &blocks,
                &[true, true, true],
                UpdateTarget::Labels(&[0, 1]),
                &mut theta,
                &mut eta,
                0.3,
                2,
            )
            .unwrap()
            .unwrap();
        }
        assert!(last_loss < 0.1, "final loss {last_loss}");
    }

    #[test]
    fn adapter_checkpoint_round_trip_and_flatten() {
        let theta = theta_with_alpha(0.9, 19);
        let eta = HeadParams {
            w: Tensor::ones(&[8, 4]),
            b: Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.ckpt");
        save_adapter(&path, &theta, &eta).unwrap();
        let (theta2, eta2) = load_adapter(&path).unwrap();
        assert_eq!(theta2.rank, theta.rank);
        assert_eq!(
            flatten_params(&theta2, &eta2),
            flatten_params(&theta, &eta)
        );
        let mut theta3 = AdapterParams::init(3, 8, 2, 99).unwrap();
        let mut eta3 = HeadParams {
            w: Tensor::zeros(&[8, 4]),
            b: Tensor::zeros(&[4]),
        };
        unflatten_params(&mut theta3, &mut eta3, &flatten_params(&theta, &eta)).unwrap();
        assert_eq!(flatten_params(&theta3, &eta3), flatten_params(&theta, &eta));
    }
}
