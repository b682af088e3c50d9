//! A two-branch fused classifier: the visual and question features are each
//! passed through a ReLU encoder, fused by elementwise product followed by a
//! linear layer, and read out by a linear classifier head.
//!
//! Backpropagation is hand-derived and verified against the central
//! finite-difference oracle. The optimizer is a bias-corrected
//! adaptive-moment update.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LogitVector;
use crate::util::{read_file, sha256_hex, write_file};

/// Default hidden width of both encoders and the fusion layer.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_q: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_q == 0 || self.hidden == 0 || self.n_classes == 0 {
            return Err(Error::Config(format!("all model dimensions must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for ModelDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(d_v={}, d_q={}, hidden={}, n_classes={})",
            self.d_v, self.d_q, self.hidden, self.n_classes
        )
    }
}

/// One visual/question feature pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub visual: Vec<f64>,
    pub question: Vec<f64>,
}

/// The weight matrices and bias vectors of the classifier. Shared shape
/// container for parameters, gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensors {
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_f: Array2<f64>,
    pub b_f: Array1<f64>,
    pub w_c: Array2<f64>,
    pub b_c: Array1<f64>,
}

impl ParamTensors {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            w_v: Array2::zeros((dims.hidden, dims.d_v)),
            b_v: Array1::zeros(dims.hidden),
            w_q: Array2::zeros((dims.hidden, dims.d_q)),
            b_q: Array1::zeros(dims.hidden),
            w_f: Array2::zeros((dims.hidden, dims.hidden)),
            b_f: Array1::zeros(dims.hidden),
            w_c: Array2::zeros((dims.n_classes, dims.hidden)),
            b_c: Array1::zeros(dims.n_classes),
        }
    }

    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.w_v.as_slice().unwrap(),
            self.b_v.as_slice().unwrap(),
            self.w_q.as_slice().unwrap(),
            self.b_q.as_slice().unwrap(),
            self.w_f.as_slice().unwrap(),
            self.b_f.as_slice().unwrap(),
            self.w_c.as_slice().unwrap(),
            self.b_c.as_slice().unwrap(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w_v.as_slice_mut().unwrap(),
            self.b_v.as_slice_mut().unwrap(),
            self.w_q.as_slice_mut().unwrap(),
            self.b_q.as_slice_mut().unwrap(),
            self.w_f.as_slice_mut().unwrap(),
            self.b_f.as_slice_mut().unwrap(),
            self.w_c.as_slice_mut().unwrap(),
            self.b_c.as_slice_mut().unwrap(),
        ]
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn shapes_match(&self, other: &Self) -> bool {
        self.slices()
            .iter()
            .zip(other.slices().iter())
            .all(|(a, b)| a.len() == b.len())
    }
}

/// Classifier parameters plus provenance: the init seed and a version counter
/// incremented by every optimizer step, used to detect stale forward caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: ModelDims,
    pub seed: u64,
    pub version: u64,
    pub tensors: ParamTensors,
}

/// Intermediate activations of one forward pass, everything backward needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    visual: Array1<f64>,
    question: Array1<f64>,
    pre_v: Array1<f64>,
    pre_q: Array1<f64>,
    act_v: Array1<f64>,
    act_q: Array1<f64>,
    fused_in: Array1<f64>,
    fused: Array1<f64>,
}

impl ForwardCache {
    /// Encoded-branch product before the fusion linear layer.
    pub fn fused_in(&self) -> &Array1<f64> {
        &self.fused_in
    }
}

/// First/second moment accumulators and step counter of the adaptive-moment
/// optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: ParamTensors,
    pub v: ParamTensors,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(dims: &ModelDims, learning_rate: f64) -> Self {
        Self {
            m: ParamTensors::zeros(dims),
            v: ParamTensors::zeros(dims),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Deterministic initialization: weights uniform in +-1/sqrt(fan_in), biases
/// zero. The draw stream is ChaCha8 seeded with `seed`; matrices are filled
/// row-major in the order w_v, w_q, w_f, w_c.
pub fn init_params(seed: u64, dims: &ModelDims) -> Result<MlpParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = ParamTensors::zeros(dims);
    for w in [&mut tensors.w_v, &mut tensors.w_q, &mut tensors.w_f, &mut tensors.w_c] {
        let fan_in = w.ncols() as f64;
        let bound = 1.0 / fan_in.sqrt();
        let dist = Uniform::new(-bound, bound);
        for v in w.iter_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(MlpParams { dims: *dims, seed, version: 0, tensors })
}

fn relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

/// logits = W_c (W_f (relu(W_v v + b_v) * relu(W_q q + b_q)) + b_f) + b_c.
pub fn forward(params: &MlpParams, x: &FeaturePair) -> Result<(LogitVector, ForwardCache)> {
    let t = &params.tensors;
    if x.visual.len() != params.dims.d_v || x.question.len() != params.dims.d_q {
        return Err(Error::Domain(format!(
            "feature dims (v={}, q={}) do not match model dims {}",
            x.visual.len(),
            x.question.len(),
            params.dims
        )));
    }
    let visual = ArrayView1::from(&x.visual);
    let question = ArrayView1::from(&x.question);
    let pre_v = t.w_v.dot(&visual) + &t.b_v;
    let pre_q = t.w_q.dot(&question) + &t.b_q;
    let act_v = relu(&pre_v);
    let act_q = relu(&pre_q);
    let fused_in = &act_v * &act_q;
    let fused = t.w_f.dot(&fused_in) + &t.b_f;
    let logits = t.w_c.dot(&fused) + &t.b_c;
    let logits = LogitVector::new(logits.to_vec())?;
    let cache = ForwardCache {
        version: params.version,
        visual: visual.to_owned(),
        question: question.to_owned(),
        pre_v,
        pre_q,
        act_v,
        act_q,
        fused_in,
        fused,
    };
    Ok((logits, cache))
}

/// Logits only; used on evaluation paths that never call backward.
pub fn forward_logits(params: &MlpParams, x: &FeaturePair) -> Result<LogitVector> {
    forward(params, x).map(|(logits, _)| logits)
}

/// Exact reverse-mode gradients of `logits . grad_logits` with respect to
/// every parameter, accumulated into `acc` (linear in `grad_logits`, so
/// per-sample batch weights can be folded into it).
pub fn backward_into(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_logits: &[f64],
    acc: &mut ParamTensors,
) -> Result<()> {
    let t = &params.tensors;
    if cache.version != params.version {
        return Err(Error::Domain(format!(
            "stale forward cache: built at parameter version {}, parameters now at {}",
            cache.version, params.version
        )));
    }
    if grad_logits.len() != params.dims.n_classes {
        return Err(Error::Domain(format!(
            "grad_logits length {} does not match {} classes",
            grad_logits.len(),
            params.dims.n_classes
        )));
    }
    let g_logits = ArrayView1::from(grad_logits);

    // Head: logits = W_c u + b_c.
    for (i, &g) in grad_logits.iter().enumerate() {
        if g != 0.0 {
            acc.w_c.row_mut(i).scaled_add(g, &cache.fused);
        }
    }
    acc.b_c += &g_logits;
    let g_fused = t.w_c.t().dot(&g_logits);

    // Fusion: u = W_f m + b_f.
    for (i, &g) in g_fused.iter().enumerate() {
        if g != 0.0 {
            acc.w_f.row_mut(i).scaled_add(g, &cache.fused_in);
        }
    }
    acc.b_f += &g_fused;
    let g_fused_in = t.w_f.t().dot(&g_fused);

    // Elementwise product m = a_v * a_q, then the ReLU masks.
    let g_pre_v =
        ndarray::Zip::from(&g_fused_in).and(&cache.act_q).and(&cache.pre_v).map_collect(
            |&g, &aq, &pre| if pre > 0.0 { g * aq } else { 0.0 },
        );
    let g_pre_q =
        ndarray::Zip::from(&g_fused_in).and(&cache.act_v).and(&cache.pre_q).map_collect(
            |&g, &av, &pre| if pre > 0.0 { g * av } else { 0.0 },
        );

    for (i, &g) in g_pre_v.iter().enumerate() {
        if g != 0.0 {
            acc.w_v.row_mut(i).scaled_add(g, &cache.visual);
        }
    }
    acc.b_v += &g_pre_v;
    for (i, &g) in g_pre_q.iter().enumerate() {
        if g != 0.0 {
            acc.w_q.row_mut(i).scaled_add(g, &cache.question);
        }
    }
    acc.b_q += &g_pre_q;
    Ok(())
}

/// Fresh gradient tensors for one sample.
pub fn backward(params: &MlpParams, cache: &ForwardCache, grad_logits: &[f64]) -> Result<ParamTensors> {
    let mut acc = ParamTensors::zeros(&params.dims);
    backward_into(params, cache, grad_logits, &mut acc)?;
    Ok(acc)
}

/// One bias-corrected adaptive-moment update. Deterministic given inputs;
/// bumps the parameter version.
pub fn optimizer_step(
    params: &mut MlpParams,
    grads: &ParamTensors,
    state: &mut OptimizerState,
) -> Result<()> {
    if !params.tensors.shapes_match(grads) || !params.tensors.shapes_match(&state.m) {
        return Err(Error::Domain("optimizer_step shape mismatch between params, grads and state".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    let ps = params.tensors.slices_mut();
    let gs = grads.slices();
    let ms = state.m.slices_mut();
    let vs = state.v.slices_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.version += 1;
    Ok(())
}

/// Checkpoint container: line 1 is the SHA-256 of line 2, line 2 is the JSON
/// body (dims, seed, version, tensors with explicit shape headers).
pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    let body = serde_json::to_string(params)
        .map_err(|e| Error::Integrity(format!("checkpoint serialization failed: {e}")))?;
    let hash = sha256_hex(body.as_bytes());
    write_file(path, &format!("{hash}\n{body}\n"))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let contents = read_file(path)?;
    let (hash, body) = contents.split_once('\n').ok_or_else(|| {
        Error::Integrity(format!("checkpoint {} is truncated: missing body line", path.display()))
    })?;
    let body = body.strip_suffix('\n').unwrap_or(body);
    if sha256_hex(body.as_bytes()) != hash.trim() {
        return Err(Error::Integrity(format!(
            "checkpoint {} content hash does not match its header",
            path.display()
        )));
    }
    let params: MlpParams = serde_json::from_str(body).map_err(|e| {
        Error::Integrity(format!("checkpoint {} body is not parseable: {e}", path.display()))
    })?;
    params.dims.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_gradient;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn dims(d_v: usize, d_q: usize, hidden: usize, k: usize) -> ModelDims {
        ModelDims { d_v, d_q, hidden, n_classes: k }
    }

    fn random_pair(rng: &mut ChaCha8Rng, d: &ModelDims) -> FeaturePair {
        FeaturePair {
            visual: (0..d.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            question: (0..d.d_q).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let d = dims(3, 4, 5, 2);
        let a = init_params(9, &d).unwrap();
        let b = init_params(9, &d).unwrap();
        assert_eq!(a, b);
        let c = init_params(10, &d).unwrap();
        assert_ne!(a.tensors, c.tensors);
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let d = dims(2, 2, 2, 2);
        let p = init_params(1, &d).unwrap();
        assert_eq!(p.tensors.w_v.dim(), (2, 2));
        assert_eq!(p.tensors.w_c.dim(), (2, 2));
        assert!(p.tensors.b_v.iter().all(|&v| v == 0.0));
        assert!(p.tensors.b_c.iter().all(|&v| v == 0.0));
        let bound = 1.0 / (2.0f64).sqrt();
        assert!(p.tensors.w_v.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(matches!(init_params(0, &dims(0, 1, 1, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn forward_zero_everything_gives_zero_logits() {
        let d = dims(3, 3, 4, 2);
        let mut p = init_params(0, &d).unwrap();
        p.tensors = ParamTensors::zeros(&d);
        let x = FeaturePair { visual: vec![0.0; 3], question: vec![0.0; 3] };
        let (logits, _) = forward(&p, &x).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_is_linear_in_its_weights() {
        let d = dims(3, 3, 4, 2);
        let p = init_params(5, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_pair(&mut rng, &d);
        let (logits, _) = forward(&p, &x).unwrap();
        let mut doubled = p.clone();
        doubled.tensors.w_c *= 2.0;
        doubled.tensors.b_c *= 2.0;
        let (logits2, _) = forward(&doubled, &x).unwrap();
        for (a, b) in logits.as_slice().iter().zip(logits2.as_slice()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-12);
        }
    }

    /// Straight-line reimplementation of the forward pass with scalar loops.
    #[allow(clippy::needless_range_loop)]
    fn forward_reference(p: &MlpParams, x: &FeaturePair) -> Vec<f64> {
        let d = &p.dims;
        let t = &p.tensors;
        let mut act_v = vec![0.0; d.hidden];
        let mut act_q = vec![0.0; d.hidden];
        for h in 0..d.hidden {
            let mut s = t.b_v[h];
            for i in 0..d.d_v {
                s += t.w_v[[h, i]] * x.visual[i];
            }
            act_v[h] = s.max(0.0);
            let mut s = t.b_q[h];
            for i in 0..d.d_q {
                s += t.w_q[[h, i]] * x.question[i];
            }
            act_q[h] = s.max(0.0);
        }
        let mut fused = vec![0.0; d.hidden];
        for h in 0..d.hidden {
            let mut s = t.b_f[h];
            for j in 0..d.hidden {
                s += t.w_f[[h, j]] * act_v[j] * act_q[j];
            }
            fused[h] = s;
        }
        let mut logits = vec![0.0; d.n_classes];
        for c in 0..d.n_classes {
            let mut s = t.b_c[c];
            for h in 0..d.hidden {
                s += t.w_c[[c, h]] * fused[h];
            }
            logits[c] = s;
        }
        logits
    }

    #[test]
    fn forward_matches_duplicate_implementation() {
        let d = dims(6, 5, 8, 4);
        let p = init_params(12, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let x = random_pair(&mut rng, &d);
            let (logits, _) = forward(&p, &x).unwrap();
            let reference = forward_reference(&p, &x);
            for (a, b) in logits.as_slice().iter().zip(&reference) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let d = dims(3, 3, 4, 2);
        let p = init_params(0, &d).unwrap();
        let x = FeaturePair { visual: vec![0.0; 2], question: vec![0.0; 3] };
        assert!(matches!(forward(&p, &x), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_zero_upstream_gradient_is_zero() {
        let d = dims(3, 3, 4, 2);
        let p = init_params(3, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_pair(&mut rng, &d);
        let (_, cache) = forward(&p, &x).unwrap();
        let grads = backward(&p, &cache, &[0.0, 0.0]).unwrap();
        assert!(grads.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_head_gradient_is_outer_product() {
        // With the fusion weights held at identity-like values the head
        // gradient has the closed form g (x) u.
        let d = dims(2, 2, 3, 2);
        let p = init_params(8, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_pair(&mut rng, &d);
        let (_, cache) = forward(&p, &x).unwrap();
        let g = [0.7, -0.3];
        let grads = backward(&p, &cache, &g).unwrap();
        #[allow(clippy::needless_range_loop)]
        for c in 0..2 {
            for h in 0..3 {
                assert_abs_diff_eq!(grads.w_c[[c, h]], g[c] * cache.fused[h], epsilon = 1e-14);
            }
            assert_abs_diff_eq!(grads.b_c[c], g[c], epsilon = 1e-14);
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let d = dims(2, 2, 3, 2);
        let mut p = init_params(8, &d).unwrap();
        let x = FeaturePair { visual: vec![0.1, 0.2], question: vec![0.3, 0.4] };
        let (_, cache) = forward(&p, &x).unwrap();
        let grads = backward(&p, &cache, &[1.0, 0.0]).unwrap();
        let mut state = OptimizerState::new(&d, 1e-3);
        optimizer_step(&mut p, &grads, &mut state).unwrap();
        assert!(matches!(backward(&p, &cache, &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let d = dims(4, 4, 6, 3);
        let p = init_params(21, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_pair(&mut rng, &d);
        let upstream: Vec<f64> = (0..d.n_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, cache) = forward(&p, &x).unwrap();
        let analytic = backward(&p, &cache, &upstream).unwrap();

        // f(theta) = logits(theta) . upstream, probed on a sample of coordinates
        // from every tensor.
        let tensor_idx = [0usize, 1, 2, 3, 4, 5, 6, 7];
        for &ti in &tensor_idx {
            let n = analytic.slices()[ti].len();
            for probe in 0..n.min(5) {
                let coord = (probe * 7) % n;
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    q.tensors.slices_mut()[ti][coord] += delta;
                    let (logits, _) = forward(&q, &x).unwrap();
                    logits.as_slice().iter().zip(&upstream).map(|(l, u)| l * u).sum::<f64>()
                };
                let h = 1e-5;
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.slices()[ti][coord];
                let tol = (1e-4 * a.abs().max(numeric.abs())).max(1e-7);
                assert!(
                    (a - numeric).abs() <= tol,
                    "tensor {ti} coord {coord}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn fusion_is_multiplicative() {
        // Kill the visual branch activations; the fused input must be zero
        // and the logits must not depend on the question at all.
        let d = dims(3, 3, 4, 2);
        let mut p = init_params(30, &d).unwrap();
        p.tensors.w_v.fill(0.0);
        p.tensors.b_v.fill(-1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x1 = random_pair(&mut rng, &d);
        let x2 = FeaturePair { visual: x1.visual.clone(), question: vec![5.0, -2.0, 0.3] };
        let (l1, c1) = forward(&p, &x1).unwrap();
        let (l2, _) = forward(&p, &x2).unwrap();
        assert!(c1.fused_in.iter().all(|&v| v == 0.0));
        assert_eq!(l1.as_slice(), l2.as_slice());
    }

    #[test]
    fn optimizer_zero_gradient_leaves_params_unchanged() {
        let d = dims(3, 3, 4, 2);
        let mut p = init_params(2, &d).unwrap();
        let before = p.tensors.clone();
        let mut state = OptimizerState::new(&d, 1e-3);
        optimizer_step(&mut p, &ParamTensors::zeros(&d), &mut state).unwrap();
        assert_eq!(p.tensors, before);
        assert_eq!(state.step, 1);
        assert_eq!(p.version, 1);
    }

    #[test]
    fn optimizer_first_step_moves_against_gradient_sign() {
        let d = dims(2, 2, 2, 2);
        let mut p = init_params(2, &d).unwrap();
        let before = p.tensors.clone();
        let mut grads = ParamTensors::zeros(&d);
        for s in grads.slices_mut() {
            for (i, v) in s.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 0.5 } else { -1.5 };
            }
        }
        let mut state = OptimizerState::new(&d, 1e-3);
        optimizer_step(&mut p, &grads, &mut state).unwrap();
        for ((after, before), g) in
            p.tensors.slices().into_iter().zip(before.slices()).zip(grads.slices())
        {
            for i in 0..after.len() {
                let delta = after[i] - before[i];
                assert!((delta + g[i].signum() * state.learning_rate).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn optimizer_descends_a_quadratic_bowl() {
        // Treat the b_c vector as the optimization variable of f(b) = |b - t|^2.
        let d = dims(1, 1, 1, 4);
        let mut p = init_params(0, &d).unwrap();
        let target = [1.0, -2.0, 0.5, 3.0];
        let mut state = OptimizerState::new(&d, 0.05);
        let objective = |b: &Array1<f64>| -> f64 {
            b.iter().zip(&target).map(|(v, t)| (v - t) * (v - t)).sum()
        };
        let mut last = objective(&p.tensors.b_c);
        for _ in 0..10 {
            let mut grads = ParamTensors::zeros(&d);
            for (i, g) in grads.b_c.iter_mut().enumerate() {
                *g = 2.0 * (p.tensors.b_c[i] - target[i]);
            }
            optimizer_step(&mut p, &grads, &mut state).unwrap();
            let now = objective(&p.tensors.b_c);
            assert!(now < last, "objective did not decrease: {now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let d = dims(5, 4, 6, 3);
        let p = init_params(77, &d).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(p, loaded);
        for (a, b) in p.tensors.slices().into_iter().zip(loaded.tensors.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_checkpoint_is_an_integrity_error() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let d = dims(3, 3, 4, 2);
        let p = init_params(5, &d).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let contents = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &contents[..contents.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
        std::fs::write(&path, "justonelinenonewline").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn checkpoint_tampering_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let d = dims(3, 3, 4, 2);
        let p = init_params(5, &d).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let contents = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, contents.replace("\"seed\":5", "\"seed\":6")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn finite_diff_oracle_composes_with_forward() {
        // Sanity link between the model and the generic oracle: gradient of
        // the first logit with respect to the visual feature entries.
        let d = dims(3, 3, 4, 2);
        let p = init_params(14, &d).unwrap();
        let question = vec![0.2, -0.1, 0.4];
        let base = vec![0.3, 0.6, -0.2];
        let g = finite_diff_gradient(
            |v| {
                let x = FeaturePair { visual: v.to_vec(), question: question.clone() };
                forward_logits(&p, &x).unwrap()[0]
            },
            &base,
            1e-6,
        )
        .unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
