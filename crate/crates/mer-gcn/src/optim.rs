//! Named trainable parameters, SGD with momentum, global-norm gradient
//! clipping, and the finite-difference gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{AutodiffError, Tape, TensorId};
use crate::tensor::Tensor;

/// A named trainable tensor with its optimizer state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    /// Always constructed with `requires_grad = true`.
    pub value: Tensor,
    /// Momentum buffer; allocated lazily on the first update.
    pub momentum_buffer: Option<Vec<f64>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value: value.with_requires_grad(),
            momentum_buffer: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Maps the parameters bound onto a tape back to their gradients.
pub struct TapeBinding {
    ids: Vec<TensorId>,
}

impl TapeBinding {
    /// Registers every parameter as a gradient-carrying leaf, in order.
    pub fn bind(tape: &mut Tape, params: &[&Parameter]) -> Self {
        let ids = params
            .iter()
            .map(|p| tape.leaf(p.value.clone().with_requires_grad()))
            .collect();
        TapeBinding { ids }
    }

    pub fn id(&self, index: usize) -> TensorId {
        self.ids[index]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Copies gradients off the tape into the parameters. Parameters the
    /// loss never touched receive zeros.
    pub fn harvest(&self, tape: &Tape, params: &mut [&mut Parameter]) {
        assert_eq!(self.ids.len(), params.len());
        for (&id, param) in self.ids.iter().zip(params.iter_mut()) {
            let grad = match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; param.numel()],
            };
            param.value.grad = Some(grad);
        }
    }
}

/// One SGD-with-momentum update: `v ← momentum·v + g; θ ← θ − lr·v`.
/// Consumes (zeroes) the gradients.
pub fn sgd_step(
    params: &mut [&mut Parameter],
    lr: f64,
    momentum: f64,
) -> Result<(), AutodiffError> {
    assert!(lr > 0.0, "learning rate must be positive, got {lr}");
    assert!(
        (0.0..1.0).contains(&momentum),
        "momentum must lie in [0, 1), got {momentum}"
    );
    for param in params.iter_mut() {
        let grad = param
            .value
            .grad
            .take()
            .ok_or_else(|| AutodiffError::MissingGradient {
                name: param.name.clone(),
            })?;
        let velocity = param
            .momentum_buffer
            .get_or_insert_with(|| vec![0.0; grad.len()]);
        for (v, g) in velocity.iter_mut().zip(&grad) {
            *v = momentum * *v + g;
        }
        let data = param.value.data_mut();
        for (x, v) in data.iter_mut().zip(velocity.iter()) {
            *x -= lr * *v;
        }
    }
    Ok(())
}

/// Euclidean norm of all gradients taken together.
pub fn global_grad_norm(params: &[&mut Parameter]) -> Result<f64, AutodiffError> {
    let mut sq = 0.0;
    for param in params {
        let grad = param
            .value
            .grad
            .as_ref()
            .ok_or_else(|| AutodiffError::MissingGradient {
                name: param.name.clone(),
            })?;
        for g in grad {
            sq += g * g;
        }
    }
    Ok(sq.sqrt())
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm; errors when the norm is not finite.
pub fn clip_global_norm(
    params: &mut [&mut Parameter],
    max_norm: f64,
) -> Result<f64, AutodiffError> {
    assert!(max_norm > 0.0, "clip norm must be positive, got {max_norm}");
    let norm = global_grad_norm(params)?;
    if !norm.is_finite() {
        return Err(AutodiffError::NonFinite {
            what: format!("gradient norm ({norm})"),
        });
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for param in params.iter_mut() {
            if let Some(grad) = param.value.grad.as_deref_mut() {
                for g in grad {
                    *g *= scale;
                }
            }
        }
    }
    Ok(norm)
}

/// A differentiable scalar objective over named parameters.
///
/// `eval` and `eval_with_grads` must run the same forward computation;
/// the gradient checker verifies determinism by evaluating twice.
pub trait DiffTarget {
    fn n_params(&self) -> usize;
    fn param_name(&self, p: usize) -> String;
    fn param_numel(&self, p: usize) -> usize;
    /// Adds `delta` to one parameter coordinate.
    fn nudge(&mut self, p: usize, i: usize, delta: f64);
    /// Loss at the current parameters.
    fn eval(&mut self) -> Result<f64, AutodiffError>;
    /// Loss at the current parameters, leaving analytic gradients readable
    /// through [`DiffTarget::grad`].
    fn eval_with_grads(&mut self) -> Result<f64, AutodiffError>;
    fn grad(&self, p: usize, i: usize) -> f64;
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter (all of them when the parameter
    /// is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            coords_per_param: 2,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoordinate>,
}

/// Relative disagreement with a floor that keeps finite-difference noise on
/// near-zero gradients from dominating.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients against central finite differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` on a seeded sample of coordinates per
/// parameter, returning the worst relative error.
pub fn grad_check(
    target: &mut dyn DiffTarget,
    config: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError> {
    assert!(config.eps > 0.0, "eps must be positive, got {}", config.eps);
    let first = target.eval()?;
    let second = target.eval()?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministicClosure { first, second });
    }
    target.eval_with_grads()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for p in 0..target.n_params() {
        let numel = target.param_numel(p);
        let coords: Vec<usize> = if numel <= config.coords_per_param {
            (0..numel).collect()
        } else {
            // Sampling with replacement is fine; duplicates just re-check.
            (0..config.coords_per_param)
                .map(|_| rng.random_range(0..numel))
                .collect()
        };
        for i in coords {
            target.nudge(p, i, config.eps);
            let plus = target.eval()?;
            target.nudge(p, i, -2.0 * config.eps);
            let minus = target.eval()?;
            target.nudge(p, i, config.eps);
            let numeric = (plus - minus) / (2.0 * config.eps);
            let analytic = target.grad(p, i);
            let rel = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some(WorstCoordinate {
                    param: target.param_name(p),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Convenience for tests: a target whose loss is built by a closure over a
/// tape with all parameters bound.
pub struct ClosureTarget<F>
where
    F: Fn(&mut Tape, &TapeBinding) -> Result<TensorId, AutodiffError>,
{
    pub params: Vec<Parameter>,
    pub build_loss: F,
    pub corrupt_backward: bool,
}

impl<F> ClosureTarget<F>
where
    F: Fn(&mut Tape, &TapeBinding) -> Result<TensorId, AutodiffError>,
{
    pub fn new(params: Vec<Parameter>, build_loss: F) -> Self {
        ClosureTarget {
            params,
            build_loss,
            corrupt_backward: false,
        }
    }

    fn run(&mut self, with_grads: bool) -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        if self.corrupt_backward {
            tape.corrupt_leaky_backward();
        }
        let refs: Vec<&Parameter> = self.params.iter().collect();
        let binding = TapeBinding::bind(&mut tape, &refs);
        let loss = (self.build_loss)(&mut tape, &binding)?;
        let value = tape.value(loss).item();
        if with_grads {
            tape.backward(loss)?;
            let mut muts: Vec<&mut Parameter> = self.params.iter_mut().collect();
            binding.harvest(&tape, &mut muts);
        }
        Ok(value)
    }
}

impl<F> DiffTarget for ClosureTarget<F>
where
    F: Fn(&mut Tape, &TapeBinding) -> Result<TensorId, AutodiffError>,
{
    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn param_name(&self, p: usize) -> String {
        self.params[p].name.clone()
    }

    fn param_numel(&self, p: usize) -> usize {
        self.params[p].numel()
    }

    fn nudge(&mut self, p: usize, i: usize, delta: f64) {
        self.params[p].value.data_mut()[i] += delta;
    }

    fn eval(&mut self) -> Result<f64, AutodiffError> {
        self.run(false)
    }

    fn eval_with_grads(&mut self) -> Result<f64, AutodiffError> {
        self.run(true)
    }

    fn grad(&self, p: usize, i: usize) -> f64 {
        self.params[p]
            .value
            .grad
            .as_ref()
            .expect("eval_with_grads must run before grad()")[i]
    }
}

// ── Seeding and initializers ────────────────────────────────────────────

/// Derives an independent stream seed from a base seed (splitmix64 step),
/// e.g. one rng per fold or per model component.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Zero-mean normal draw with `std = sqrt(2 / fan_in)` (rectifier gain).
pub fn he_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = rand_distr::Normal::new(0.0, std).expect("std is finite and positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(dist)).collect();
    Tensor::new(shape, data).expect("sampled values are finite")
}

/// Uniform draw on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sampled values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Parameter {
        Parameter::new(name, Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn sgd_single_step_no_momentum() {
        let mut p = param("w", vec![1], vec![1.0]);
        p.value.grad = Some(vec![2.0]);
        sgd_step(&mut [&mut p], 0.1, 0.0).unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
        assert!(p.value.grad.is_none(), "gradient must be cleared");
    }

    #[test]
    fn sgd_zero_grad_leaves_value() {
        let mut p = param("w", vec![2], vec![3.0, -1.0]);
        p.value.grad = Some(vec![0.0, 0.0]);
        sgd_step(&mut [&mut p], 0.5, 0.9).unwrap();
        assert_eq!(p.value.data(), &[3.0, -1.0]);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        // start 0, grad 1 each step, lr 1, momentum 0.9: -1 then -2.9.
        let mut p = param("w", vec![1], vec![0.0]);
        p.value.grad = Some(vec![1.0]);
        sgd_step(&mut [&mut p], 1.0, 0.9).unwrap();
        assert!((p.value.data()[0] + 1.0).abs() < 1e-15);
        p.value.grad = Some(vec![1.0]);
        sgd_step(&mut [&mut p], 1.0, 0.9).unwrap();
        assert!((p.value.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_missing_gradient_names_parameter() {
        let mut p = param("head.weight", vec![1], vec![0.0]);
        let err = sgd_step(&mut [&mut p], 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("head.weight"), "{err}");
    }

    #[test]
    fn clip_rescales_to_bound() {
        let mut p = param("w", vec![2], vec![0.0, 0.0]);
        p.value.grad = Some(vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut [&mut p], 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let g = p.value.grad.as_ref().unwrap();
        let clipped = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!(clipped <= 1.0 + 1e-9, "post-clip norm {clipped}");
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut p = param("w", vec![2], vec![0.0, 0.0]);
        p.value.grad = Some(vec![0.3, 0.4]);
        clip_global_norm(&mut [&mut p], 5.0).unwrap();
        assert_eq!(p.value.grad.as_ref().unwrap(), &vec![0.3, 0.4]);
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        // loss = 0.5 * ||x||^2, analytic grad = x.
        let params = vec![param("x", vec![3], vec![0.7, -1.3, 2.1])];
        let mut target = ClosureTarget::new(params, |tape, binding| {
            let x = binding.id(0);
            // ||x||^2 as a 1×3 by 3×1 product, halved through a fixed linear.
            let row = tape.reshape(x, vec![1, 3])?;
            let col = tape.reshape(x, vec![3, 1])?;
            let sq = tape.matmul(row, col)?; // [1,1] = ||x||^2
            let s = tape.reshape(sq, vec![1])?;
            // 0.5*s: linear with weight 0.5.
            let w = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
            let b = tape.constant(Tensor::zeros(vec![1]));
            let half = tape.linear(s, w, b)?;
            tape.sum(half)
        });
        let report = grad_check(
            &mut target,
            &GradCheckConfig {
                eps: 1e-5,
                coords_per_param: 3,
                seed: 1,
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_detects_corrupted_backward() {
        let params = vec![param("x", vec![4], vec![0.5, -0.8, 1.2, -0.3])];
        let mut target = ClosureTarget::new(params, |tape, binding| {
            let x = binding.id(0);
            let y = tape.leaky_relu(x, 0.2)?;
            tape.sum(y)
        });
        target.corrupt_backward = true;
        let report = grad_check(&mut target, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err > 1e-1, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_rejects_nondeterministic_closure() {
        use std::sync::atomic::{AtomicU64, Ordering};
        static CALLS: AtomicU64 = AtomicU64::new(0);
        let params = vec![param("x", vec![1], vec![1.0])];
        let mut target = ClosureTarget::new(params, |tape, binding| {
            let drift = CALLS.fetch_add(1, Ordering::SeqCst) as f64 * 0.1;
            let x = binding.id(0);
            let shift = tape.constant(Tensor::new(vec![1], vec![drift]).unwrap());
            let y = tape.add(x, shift)?;
            tape.sum(y)
        });
        let err = grad_check(&mut target, &GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, AutodiffError::NonDeterministicClosure { .. }));
    }

    #[test]
    fn initializers_are_seed_deterministic() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let a = he_normal(&mut rng1, vec![4, 3], 3);
        let b = he_normal(&mut rng2, vec![4, 3], 3);
        assert_eq!(a.data(), b.data());
        let u = xavier_uniform(&mut rng1, 5, 2);
        let bound = (6.0 / 7.0f64).sqrt();
        assert!(u.data().iter().all(|v| v.abs() <= bound));
    }
}
