//! FHE-friendly nonlinearity replacements.
//!
//! Every kernel here is a straight-line composition of additions and
//! multiplications, written once against the [`CipherValue`] trait and
//! therefore evaluable identically over plaintext tensors, autodiff
//! variables, and simulated ciphertexts. Kernels never branch on values;
//! domain checks run only where values are legitimately visible (plaintext
//! and autodiff carriers) and are no-ops under encryption.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::he::{self, Ciphertext};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// A value supporting the arithmetic available under leveled homomorphic
/// encryption: additions, multiplications, and affine data movement.
///
/// `Param` is the carrier for model parameters: plaintext tensors when the
/// data is encrypted (server-held weights stay in the clear), and autodiff
/// variables when the whole computation is a training graph.
pub trait CipherValue: Sized + Clone {
    type Param: Clone;

    fn shape(&self) -> &[usize];
    fn add(&self, rhs: &Self) -> Result<Self>;
    fn sub(&self, rhs: &Self) -> Result<Self>;
    /// Elementwise product at ciphertext cost (one depth level under HE).
    fn mul(&self, rhs: &Self) -> Result<Self>;
    fn matmul(&self, rhs: &Self) -> Result<Self>;
    /// `self · rhsᵀ`.
    fn matmul_t(&self, rhs: &Self) -> Result<Self>;
    fn add_scalar(&self, s: f64) -> Result<Self>;
    fn mul_scalar(&self, s: f64) -> Result<Self>;
    fn add_param(&self, p: &Self::Param) -> Result<Self>;
    fn mul_param(&self, p: &Self::Param) -> Result<Self>;
    fn matmul_param(&self, p: &Self::Param) -> Result<Self>;
    /// Add a public plaintext constant.
    fn add_const(&self, t: &Tensor) -> Result<Self>;
    /// Multiply by a public plaintext constant (free depth under HE).
    fn mul_const(&self, t: &Tensor) -> Result<Self>;
    fn sum_last(&self) -> Result<Self>;
    fn slice_cols(&self, lo: usize, hi: usize) -> Result<Self>;
    fn concat_cols(parts: &[Self]) -> Result<Self>;
    fn mean_pool_rows(&self, group: usize) -> Result<Self>;

    /// Value-domain assertion. Carriers with visible values verify that all
    /// entries lie in `(lo, hi)`; the ciphertext carrier cannot inspect
    /// values and always passes.
    fn domain_guard(&self, lo: f64, hi: f64, what: &str) -> Result<()>;
}

/// Additional transcendental operations available only in plaintext
/// computation. Deliberately not implemented for ciphertexts: code generic
/// over [`CipherValue`] alone is guaranteed polynomial.
pub trait ExactValue: CipherValue {
    fn exp(&self) -> Result<Self>;
    fn ln(&self) -> Result<Self>;
    fn sqrt(&self) -> Result<Self>;
    fn div(&self, rhs: &Self) -> Result<Self>;
    fn gelu(&self) -> Result<Self>;
    /// Row-wise maximum as a detached plaintext constant (for numerically
    /// stable softmax; shift invariance makes it gradient-free).
    fn max_last_const(&self) -> Tensor;
}

/// Configuration of the polynomial kernels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct KernelConfig {
    /// Taylor degree of the exponential approximation.
    pub exp_degree: u32,
    /// Iteration degree of the Goldschmidt inverse.
    pub inv_degree: u32,
    /// Quadratic GELU coefficients (a, b, c) for a*x^2 + b*x + c.
    pub gelu_coeffs: (f64, f64, f64),
    /// Calibrated bound M mapping inverse arguments into (0, 2) via x/M.
    pub rescale_max: f64,
    /// Calibrated constant subtracted from logits before the Taylor
    /// exponential so its argument stays in the accurate range.
    pub logit_shift: f64,
    /// Initial guess for the Newton inverse-square-root iteration.
    pub rsqrt_init: f64,
    /// Newton iterations for the inverse square root.
    pub rsqrt_iters: u32,
    /// Variance floor added before normalization.
    pub ln_eps: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            exp_degree: 6,
            inv_degree: 7,
            gelu_coeffs: (0.125, 0.25, 0.5),
            rescale_max: 1.0,
            logit_shift: 0.0,
            rsqrt_init: 1.0,
            rsqrt_iters: 4,
            ln_eps: 1e-5,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exp_degree < 1 || self.inv_degree < 1 {
            return Err(Error::InvalidParam("kernel degrees must be >= 1".into()));
        }
        if !(self.rescale_max > 0.0) {
            return Err(Error::InvalidParam("rescale_max must be > 0".into()));
        }
        if self.rsqrt_iters < 1 {
            return Err(Error::InvalidParam("rsqrt_iters must be >= 1".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidParam("ln_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Plaintext statistics gathered from a calibration pass of the exact
/// model; see [`KernelConfig::calibrated`].
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// Largest argument ever handed to an inverse (softmax denominator or
    /// layer-norm standard deviation).
    pub max_inverse_arg: f64,
    /// Mean variance seen by normalization layers.
    pub mean_variance: f64,
    /// Largest variance seen by normalization layers.
    pub max_variance: f64,
    /// Largest pre-softmax logit.
    pub max_logit: f64,
    /// Largest absolute activation in the residual stream (drives the
    /// masking-noise amplitude).
    pub max_abs_activation: f64,
}

impl CalibrationStats {
    pub fn observe_inverse_arg(&mut self, v: f64) {
        if v > self.max_inverse_arg {
            self.max_inverse_arg = v;
        }
    }

    pub fn observe_variance(&mut self, v: f64) {
        if v > self.max_variance {
            self.max_variance = v;
        }
    }

    pub fn observe_logit(&mut self, v: f64) {
        if v > self.max_logit {
            self.max_logit = v;
        }
    }

    pub fn observe_activation(&mut self, v: f64) {
        let a = v.abs();
        if a > self.max_abs_activation {
            self.max_abs_activation = a;
        }
    }
}

impl KernelConfig {
    /// Derive the runtime scaling constants from plaintext calibration:
    /// `rescale_max` gets a 1.25x margin over the largest observed inverse
    /// argument, the logit shift becomes the largest observed logit, and the
    /// inverse-square-root seed is centered on the typical variance.
    pub fn calibrated(mut self, stats: &CalibrationStats) -> Self {
        if stats.max_inverse_arg > 0.0 {
            self.rescale_max = 1.25 * stats.max_inverse_arg;
        }
        self.logit_shift = stats.max_logit;
        if stats.mean_variance > 0.0 {
            // The Newton iteration for 1/sqrt(v) converges iff
            // v * y0^2 < 3. Seed at the typical variance for accuracy but
            // clamp so the largest observed variance stays well inside the
            // basin (with headroom for drift after calibration).
            let target = stats.mean_variance.max(stats.max_variance / 2.0);
            self.rsqrt_init = 1.0 / target.sqrt();
        } else {
            self.rsqrt_init = 1.0 / self.rescale_max.sqrt();
        }
        self
    }
}

/// Truncated Taylor series of the exponential, sum_{i=0}^{d} x^i / i!.
///
/// Powers are built by a balanced ladder (x^i = x^(i/2) * x^(i-i/2)) so the
/// multiplicative depth is ceil(log2 d) instead of d.
pub fn approx_exp<V: CipherValue>(x: &V, d: u32) -> Result<V> {
    if d == 0 {
        return x.mul_scalar(0.0)?.add_scalar(1.0);
    }
    let d = d as usize;
    let mut powers: Vec<V> = Vec::with_capacity(d);
    powers.push(x.clone());
    for i in 2..=d {
        let a = i / 2;
        let b = i - a;
        powers.push(powers[a - 1].mul(&powers[b - 1])?);
    }
    let mut acc = powers[0].clone();
    let mut factorial = 1.0f64;
    for (i, p) in powers.iter().enumerate().skip(1) {
        factorial *= (i + 1) as f64;
        acc = acc.add(&p.mul_scalar(1.0 / factorial)?)?;
    }
    acc.add_scalar(1.0)
}

/// Lagrange remainder bound for the degree-d Taylor exponential:
/// e^{max(0,x)} * |x|^{d+1} / (d+1)!.
pub fn exp_remainder_bound(x: f64, d: u32) -> f64 {
    let mut factorial = 1.0f64;
    for i in 2..=(d as u64 + 1) {
        factorial *= i as f64;
    }
    x.max(0.0).exp() * x.abs().powi(d as i32 + 1) / factorial
}

/// Quadratic GELU replacement a*x^2 + b*x + c; one depth level.
pub fn quad_gelu<V: CipherValue>(x: &V, coeffs: (f64, f64, f64)) -> Result<V> {
    let (a, b, c) = coeffs;
    let sq = x.mul(x)?;
    sq.mul_scalar(a)?
        .add(&x.mul_scalar(b)?)?
        .add_scalar(c)
}

/// Iterative product expansion of 1/x on (0, 2):
/// a0 = 2 - x, b0 = 1 - x, then b <- b^2, a <- a * (1 + b), d times.
/// Equals (1 - (1-x)^(2^(d+1))) / x.
pub fn goldschmidt_inverse<V: CipherValue>(x: &V, d: u32) -> Result<V> {
    x.domain_guard(0.0, 2.0, "goldschmidt inverse argument")?;
    goldschmidt_inverse_unchecked(x, d)
}

/// Same iteration without the plaintext domain check; used inside kernels
/// that have already rescaled their argument.
pub fn goldschmidt_inverse_unchecked<V: CipherValue>(x: &V, d: u32) -> Result<V> {
    let mut a = x.mul_scalar(-1.0)?.add_scalar(2.0)?;
    let mut b = x.mul_scalar(-1.0)?.add_scalar(1.0)?;
    for _ in 0..d {
        b = b.mul(&b)?;
        a = a.mul(&b.add_scalar(1.0)?)?;
    }
    Ok(a)
}

/// Last-axis softmax built from the Taylor exponential and the Goldschmidt
/// inverse: p_i = P_d(z_i - c) * inv((sum_j P_d(z_j - c)) / M) / M.
pub fn approx_softmax<V: CipherValue>(z: &V, cfg: &KernelConfig) -> Result<V> {
    let shifted = z.add_scalar(-cfg.logit_shift)?;
    let e = approx_exp(&shifted, cfg.exp_degree)?;
    let sum = e.sum_last()?;
    let scaled = sum.mul_scalar(1.0 / cfg.rescale_max)?;
    scaled.domain_guard(0.0, 2.0, "softmax denominator / rescale_max")?;
    let inv = goldschmidt_inverse_unchecked(&scaled, cfg.inv_degree)?;
    e.mul(&inv)?.mul_scalar(1.0 / cfg.rescale_max)
}

/// Normalization with polynomial machinery only. The standard deviation
/// comes from a Newton inverse-square-root iteration
/// y <- y * (3 - v * y^2) / 2 seeded with a calibrated plaintext constant,
/// and the division by it goes through the Goldschmidt inverse.
pub fn approx_layernorm<V: CipherValue>(
    x: &V,
    gain: &V::Param,
    bias: &V::Param,
    cfg: &KernelConfig,
) -> Result<V> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::ShapeMismatch("layernorm on scalar".into()))? as f64;
    let mu = x.sum_last()?.mul_scalar(1.0 / n)?;
    let centered = x.sub(&mu)?;
    let var = centered
        .mul(&centered)?
        .sum_last()?
        .mul_scalar(1.0 / n)?
        .add_scalar(cfg.ln_eps)?;
    // Newton inverse square root; first step folds the plaintext seed.
    let y0 = cfg.rsqrt_init;
    var.domain_guard(0.0, 3.0 / (y0 * y0), "normalization variance (rsqrt basin)")?;
    let mut y = var.mul_scalar(-0.5 * y0 * y0 * y0)?.add_scalar(1.5 * y0)?;
    for _ in 1..cfg.rsqrt_iters {
        let y_sq = y.mul(&y)?;
        let v_y_sq = var.mul(&y_sq)?;
        let half = v_y_sq.mul_scalar(-0.5)?.add_scalar(1.5)?;
        y = y.mul(&half)?;
    }
    let std = var.mul(&y)?;
    let scaled = std.mul_scalar(1.0 / cfg.rescale_max)?;
    scaled.domain_guard(0.0, 2.0, "normalization std / rescale_max")?;
    let inv_std = goldschmidt_inverse_unchecked(&scaled, cfg.inv_degree)?
        .mul_scalar(1.0 / cfg.rescale_max)?;
    centered.mul(&inv_std)?.mul_param(gain)?.add_param(bias)
}

/// Exact last-axis softmax (plaintext carriers only).
pub fn exact_softmax<V: ExactValue>(z: &V) -> Result<V> {
    let shift = z.max_last_const().neg();
    let e = z.add_const(&shift)?.exp()?;
    let sum = e.sum_last()?;
    e.div(&sum)
}

/// Exact layer normalization (plaintext carriers only).
pub fn exact_layernorm<V: ExactValue>(
    x: &V,
    gain: &V::Param,
    bias: &V::Param,
    eps: f64,
) -> Result<V> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::ShapeMismatch("layernorm on scalar".into()))? as f64;
    let mu = x.sum_last()?.mul_scalar(1.0 / n)?;
    let centered = x.sub(&mu)?;
    let var = centered
        .mul(&centered)?
        .sum_last()?
        .mul_scalar(1.0 / n)?
        .add_scalar(eps)?;
    let std = var.sqrt()?;
    centered.div(&std)?.mul_param(gain)?.add_param(bias)
}

// ---------------------------------------------------------------------------
// Carrier implementations
// ---------------------------------------------------------------------------

impl CipherValue for Tensor {
    type Param = Tensor;

    fn shape(&self) -> &[usize] {
        Tensor::shape(self)
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        Tensor::add(self, rhs)
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        Tensor::sub(self, rhs)
    }
    fn mul(&self, rhs: &Self) -> Result<Self> {
        Tensor::mul(self, rhs)
    }
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        Tensor::matmul(self, rhs)
    }
    fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        Tensor::matmul_t(self, rhs)
    }
    fn add_scalar(&self, s: f64) -> Result<Self> {
        Ok(Tensor::add_scalar(self, s))
    }
    fn mul_scalar(&self, s: f64) -> Result<Self> {
        Ok(Tensor::mul_scalar(self, s))
    }
    fn add_param(&self, p: &Tensor) -> Result<Self> {
        Tensor::add(self, p)
    }
    fn mul_param(&self, p: &Tensor) -> Result<Self> {
        Tensor::mul(self, p)
    }
    fn matmul_param(&self, p: &Tensor) -> Result<Self> {
        Tensor::matmul(self, p)
    }
    fn add_const(&self, t: &Tensor) -> Result<Self> {
        Tensor::add(self, t)
    }
    fn mul_const(&self, t: &Tensor) -> Result<Self> {
        Tensor::mul(self, t)
    }
    fn sum_last(&self) -> Result<Self> {
        Ok(Tensor::sum_last(self))
    }
    fn slice_cols(&self, lo: usize, hi: usize) -> Result<Self> {
        Tensor::slice_cols(self, lo, hi)
    }
    fn concat_cols(parts: &[Self]) -> Result<Self> {
        Tensor::concat_cols(parts)
    }
    fn mean_pool_rows(&self, group: usize) -> Result<Self> {
        Tensor::mean_pool_rows(self, group)
    }
    fn domain_guard(&self, lo: f64, hi: f64, what: &str) -> Result<()> {
        for &v in self.data() {
            if !(v > lo && v < hi) {
                return Err(Error::Domain(format!(
                    "{what}: value {v} outside ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

impl ExactValue for Tensor {
    fn exp(&self) -> Result<Self> {
        Ok(self.map(f64::exp))
    }
    fn ln(&self) -> Result<Self> {
        Ok(self.map(f64::ln))
    }
    fn sqrt(&self) -> Result<Self> {
        Ok(self.map(f64::sqrt))
    }
    fn div(&self, rhs: &Self) -> Result<Self> {
        Tensor::div(self, rhs)
    }
    fn gelu(&self) -> Result<Self> {
        Ok(self.map(crate::autodiff::gelu_exact_scalar))
    }
    fn max_last_const(&self) -> Tensor {
        self.max_last()
    }
}

impl CipherValue for Var {
    type Param = Var;

    fn shape(&self) -> &[usize] {
        Var::shape(self)
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        Var::add(self, rhs)
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        Var::sub(self, rhs)
    }
    fn mul(&self, rhs: &Self) -> Result<Self> {
        Var::mul(self, rhs)
    }
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        Var::matmul(self, rhs)
    }
    fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        Var::matmul_t(self, rhs)
    }
    fn add_scalar(&self, s: f64) -> Result<Self> {
        Ok(Var::add_scalar(self, s))
    }
    fn mul_scalar(&self, s: f64) -> Result<Self> {
        Ok(Var::scale(self, s))
    }
    fn add_param(&self, p: &Var) -> Result<Self> {
        Var::add(self, p)
    }
    fn mul_param(&self, p: &Var) -> Result<Self> {
        Var::mul(self, p)
    }
    fn matmul_param(&self, p: &Var) -> Result<Self> {
        Var::matmul(self, p)
    }
    fn add_const(&self, t: &Tensor) -> Result<Self> {
        Var::add(self, &Var::constant(t.clone()))
    }
    fn mul_const(&self, t: &Tensor) -> Result<Self> {
        Var::mul(self, &Var::constant(t.clone()))
    }
    fn sum_last(&self) -> Result<Self> {
        Ok(Var::sum_last(self))
    }
    fn slice_cols(&self, lo: usize, hi: usize) -> Result<Self> {
        Var::slice_cols(self, lo, hi)
    }
    fn concat_cols(parts: &[Self]) -> Result<Self> {
        Var::concat_cols(parts)
    }
    fn mean_pool_rows(&self, group: usize) -> Result<Self> {
        Var::mean_pool_rows(self, group)
    }
    fn domain_guard(&self, lo: f64, hi: f64, what: &str) -> Result<()> {
        self.value().domain_guard(lo, hi, what)
    }
}

impl ExactValue for Var {
    fn exp(&self) -> Result<Self> {
        Ok(Var::exp(self))
    }
    fn ln(&self) -> Result<Self> {
        Ok(Var::ln(self))
    }
    fn sqrt(&self) -> Result<Self> {
        Ok(Var::sqrt(self))
    }
    fn div(&self, rhs: &Self) -> Result<Self> {
        Var::div(self, rhs)
    }
    fn gelu(&self) -> Result<Self> {
        Ok(Var::gelu_exact(self))
    }
    fn max_last_const(&self) -> Tensor {
        self.value().max_last()
    }
}

impl CipherValue for Ciphertext {
    type Param = Tensor;

    fn shape(&self) -> &[usize] {
        Ciphertext::shape(self)
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        he::he_add(self, rhs)
    }
    fn sub(&self, rhs: &Self) -> Result<Self> {
        he::he_sub(self, rhs)
    }
    fn mul(&self, rhs: &Self) -> Result<Self> {
        he::he_mul(self, rhs)
    }
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        he::he_matmul(self, rhs)
    }
    fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        he::he_matmul_t(self, rhs)
    }
    fn add_scalar(&self, s: f64) -> Result<Self> {
        he::he_add_scalar(self, s)
    }
    fn mul_scalar(&self, s: f64) -> Result<Self> {
        he::he_mul_scalar(self, s)
    }
    fn add_param(&self, p: &Tensor) -> Result<Self> {
        he::he_add_plain(self, p)
    }
    fn mul_param(&self, p: &Tensor) -> Result<Self> {
        he::he_mul_plain(self, p)
    }
    fn matmul_param(&self, p: &Tensor) -> Result<Self> {
        he::he_matmul_plain(self, p)
    }
    fn add_const(&self, t: &Tensor) -> Result<Self> {
        he::he_add_plain(self, t)
    }
    fn mul_const(&self, t: &Tensor) -> Result<Self> {
        he::he_mul_plain(self, t)
    }
    fn sum_last(&self) -> Result<Self> {
        he::he_sum_last(self)
    }
    fn slice_cols(&self, lo: usize, hi: usize) -> Result<Self> {
        he::he_slice_cols(self, lo, hi)
    }
    fn concat_cols(parts: &[Self]) -> Result<Self> {
        he::he_concat_cols(parts)
    }
    fn mean_pool_rows(&self, group: usize) -> Result<Self> {
        he::he_mean_pool_rows(self, group)
    }
    fn domain_guard(&self, _lo: f64, _hi: f64, _what: &str) -> Result<()> {
        // Encrypted values cannot be inspected; callers are responsible for
        // calibrating inputs into the valid range.
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::{EncryptionParams, KeyRegistry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn approx_exp_at_zero_and_one() {
        let z = Tensor::scalar(0.0);
        assert!((approx_exp(&z, 6).unwrap().data()[0] - 1.0).abs() < 1e-15);
        let one = Tensor::scalar(1.0);
        let got = approx_exp(&one, 6).unwrap().data()[0];
        assert!((got - 1957.0 / 720.0).abs() < 1e-12);
    }

    #[test]
    fn taylor_error_within_lagrange_bound() {
        for i in 0..=400 {
            let x = -2.0 + 4.0 * i as f64 / 400.0;
            let approx = approx_exp(&Tensor::scalar(x), 6).unwrap().data()[0];
            let err = (approx - x.exp()).abs();
            assert!(
                err <= exp_remainder_bound(x, 6) + 1e-15,
                "x={x}: err {err} > bound {}",
                exp_remainder_bound(x, 6)
            );
        }
    }

    #[test]
    fn remainder_bound_values() {
        assert_eq!(exp_remainder_bound(0.0, 6), 0.0);
        let e1 = exp_remainder_bound(1.0, 6);
        assert!((e1 - 1f64.exp() / 5040.0).abs() < 1e-15);
        assert!((e1 - 5.393e-4).abs() < 1e-6);
    }

    #[test]
    fn quad_gelu_values() {
        let coeffs = KernelConfig::default().gelu_coeffs;
        let x = Tensor::new(vec![3], vec![0.0, -1.0, 2.0]).unwrap();
        let y = quad_gelu(&x, coeffs).unwrap();
        assert_eq!(y.data(), &[0.5, 0.375, 1.5]);
    }

    #[test]
    fn goldschmidt_fixed_point_at_one() {
        for d in 0..=10 {
            let y = goldschmidt_inverse(&Tensor::scalar(1.0), d).unwrap();
            assert_eq!(y.data()[0], 1.0);
        }
    }

    #[test]
    fn goldschmidt_known_values() {
        let y3 = goldschmidt_inverse(&Tensor::scalar(0.5), 3).unwrap();
        assert_eq!(y3.data()[0], 1.999969482421875);
        let y7 = goldschmidt_inverse(&Tensor::scalar(0.5), 7).unwrap();
        assert!((y7.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn goldschmidt_domain_checked_in_plaintext() {
        assert!(goldschmidt_inverse(&Tensor::scalar(2.5), 3).is_err());
        assert!(goldschmidt_inverse(&Tensor::scalar(0.0), 3).is_err());
    }

    fn softmax_cfg_for(rows: &Tensor, d_exp: u32) -> KernelConfig {
        let mut stats = CalibrationStats::default();
        for &v in rows.data() {
            stats.observe_logit(v);
        }
        // Denominator bound from the exact exponential of shifted logits.
        let shifted = rows.add_scalar(-stats.max_logit);
        let sums = shifted.map(f64::exp).sum_last();
        for &s in sums.data() {
            stats.observe_inverse_arg(s * 1.1);
        }
        KernelConfig {
            exp_degree: d_exp,
            ..KernelConfig::default().calibrated(&stats)
        }
    }

    #[test]
    fn softmax_constant_row_uniform() {
        let z = Tensor::full(&[1, 4], 0.3);
        let cfg = softmax_cfg_for(&z, 6);
        let p = approx_softmax(&z, &cfg).unwrap();
        for &v in p.data() {
            assert!((v - p.data()[0]).abs() < 1e-12);
        }
        assert!((p.sum_all() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::uniform(&[6, 5], -1.0, 1.0, &mut rng);
        let cfg = softmax_cfg_for(&z, 6);
        let p = approx_softmax(&z, &cfg).unwrap();
        let sums = p.sum_last();
        for &s in sums.data() {
            assert!((s - 1.0).abs() < 1e-3, "row sum {s}");
        }
    }

    #[test]
    fn softmax_degree_sweep_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = Tensor::uniform(&[8, 6], -1.0, 1.0, &mut rng);
        let exact = exact_softmax(&z).unwrap();
        let mut last = f64::INFINITY;
        for d in [2u32, 4, 6, 8] {
            let cfg = softmax_cfg_for(&z, d);
            let p = approx_softmax(&z, &cfg).unwrap();
            let dev = p.max_abs_diff(&exact);
            assert!(
                dev <= last + 1e-9,
                "degree {d} deviation {dev} above previous {last}"
            );
            last = dev;
        }
    }

    fn layernorm_cfg_for(x: &Tensor) -> KernelConfig {
        let n = x.cols() as f64;
        let mu = x.mean_last();
        let centered = x.sub(&mu).unwrap();
        let var = centered
            .mul(&centered)
            .unwrap()
            .sum_last()
            .mul_scalar(1.0 / n)
            .add_scalar(1e-5);
        let mut stats = CalibrationStats::default();
        for &v in var.data() {
            stats.observe_inverse_arg(v.sqrt());
            stats.observe_variance(v);
        }
        stats.mean_variance = var.mean_all();
        KernelConfig::default().calibrated(&stats)
    }

    #[test]
    fn layernorm_fixed_point_on_normalized_input() {
        // construct a row with exact mean 0 and variance 1
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let raw = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let centered = raw.sub(&raw.mean_last()).unwrap();
        let var = centered.mul(&centered).unwrap().mean_last().data()[0];
        let x = centered.mul_scalar(1.0 / var.sqrt());
        let mu = x.mean_last().data()[0];
        assert!(mu.abs() < 1e-12);
        let cfg = layernorm_cfg_for(&x);
        let gain = Tensor::ones(&[4]);
        let bias = Tensor::zeros(&[4]);
        let y = approx_layernorm(&x, &gain, &bias, &cfg).unwrap();
        assert!(y.allclose(&x, 1e-3), "got {:?}", y.data());
    }

    #[test]
    fn layernorm_constant_input_returns_bias() {
        let x = Tensor::full(&[2, 4], 3.7);
        let mut cfg = KernelConfig::default();
        cfg.rescale_max = 1.0;
        cfg.rsqrt_init = 1.0;
        let gain = Tensor::ones(&[4]);
        let bias = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = approx_layernorm(&x, &gain, &bias, &cfg).unwrap();
        let expected = Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(y.allclose(&expected, 1e-9));
    }

    #[test]
    fn layernorm_close_to_exact_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let cfg = layernorm_cfg_for(&x);
        let mut g = ChaCha8Rng::seed_from_u64(14);
        let gain = Tensor::uniform(&[8], 0.5, 1.5, &mut g);
        let bias = Tensor::uniform(&[8], -0.2, 0.2, &mut g);
        let approx = approx_layernorm(&x, &gain, &bias, &cfg).unwrap();
        let exact = exact_layernorm(&x, &gain, &bias, cfg.ln_eps).unwrap();
        let err = approx.max_abs_diff(&exact);
        assert!(err <= 1e-2, "max abs error {err}");
    }

    #[test]
    fn kernels_agree_between_plaintext_and_ciphertext() {
        let reg = KeyRegistry::new();
        let params = EncryptionParams {
            noise_tolerance: 1e-9,
            ..Default::default()
        };
        let key = reg.keygen("c", params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let cfg = softmax_cfg_for(&x, 6);

        let ct = reg.encrypt(&key, &x, &mut rng).unwrap();
        // tolerance: per-element encryption noise propagated through the
        // polynomial, a few orders above epsilon
        let tol = 1e-5;
        let plain_gelu = quad_gelu(&x, cfg.gelu_coeffs).unwrap();
        let enc_gelu = reg.decrypt(&key, &quad_gelu(&ct, cfg.gelu_coeffs).unwrap()).unwrap();
        assert!(enc_gelu.allclose(&plain_gelu, tol));

        let plain_sm = approx_softmax(&x, &cfg).unwrap();
        let enc_sm = reg.decrypt(&key, &approx_softmax(&ct, &cfg).unwrap()).unwrap();
        assert!(enc_sm.allclose(&plain_sm, tol));
    }

    #[test]
    fn approx_exp_depth_is_logarithmic() {
        let reg = KeyRegistry::new();
        let key = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for d in [2u32, 4, 6, 8, 12] {
            let ct = reg
                .encrypt(&key, &Tensor::uniform(&[3], -1.0, 1.0, &mut rng), &mut rng)
                .unwrap();
            let out = approx_exp(&ct, d).unwrap();
            let bound = (d as f64).log2().ceil() as u32 + 1;
            assert!(
                out.depth_used() <= bound,
                "degree {d}: depth {} > {bound}",
                out.depth_used()
            );
        }
    }

    #[test]
    fn quad_gelu_depth_one() {
        let reg = KeyRegistry::new();
        let key = reg.keygen("c", EncryptionParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ct = reg
            .encrypt(&key, &Tensor::uniform(&[3], -1.0, 1.0, &mut rng), &mut rng)
            .unwrap();
        assert_eq!(quad_gelu(&ct, (0.125, 0.25, 0.5)).unwrap().depth_used(), 1);
    }
}
