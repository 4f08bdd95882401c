//! Server-side variational mathematics: closed-form updates of the support
//! and precision posteriors, parameter aggregation, the turbo messages
//! toward the support grid, and evaluation of the negative evidence lower
//! bound.
//!
//! All mixture bookkeeping runs in log space: the spike shape can sit in the
//! thousands, where Γ(ā) and b̄^ā overflow any linear-space representation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::grid::{build_grid, run_spmp, BernoulliMessage, SupportGrid};
use crate::net::NetArch;
use crate::prior::HierPrior;
use crate::rng::stream;
use crate::special::{digamma, gamma_expectations, ln_gamma, sigmoid, GammaParams};
use crate::{Error, Result};

/// Probability clamp used when forming messages and KL terms.
const PROB_FLOOR: f64 = 1e-12;

/// The server's posterior state, arrays aligned to the network layout
/// (one matrix per layer, row-major node order matching the support grid).
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub arch: NetArch,
    pub prior: HierPrior,
    /// Aggregated weight means μ_G.
    pub mu: Vec<Array2<f64>>,
    /// Aggregated bias means.
    pub bias_mu: Vec<Array1<f64>>,
    /// Aggregated scalar posterior std σ_G.
    pub sigma: f64,
    /// Support posterior π̃ per weight.
    pub pi_tilde: Vec<Array2<f64>>,
    /// Precision posterior shape ã per weight.
    pub gamma_shape: Vec<Array2<f64>>,
    /// Precision posterior rate b̃ per weight.
    pub gamma_rate: Vec<Array2<f64>>,
    /// Support prior π per weight, refreshed from the grid's extrinsics.
    pub pi_prior: Vec<Array2<f64>>,
    /// Last downward messages from the grid, v_{h→s}, per layer node.
    pub v_h: Vec<Vec<BernoulliMessage>>,
}

impl ServerState {
    /// Fresh state: π̃ = 1/2, π = init_active, uniform grid messages. The
    /// precision posterior starts at the slab with a unit pseudo-variance
    /// (ã = a + 1, b̃ = b + 1 + σ₀²): the first support update then keeps
    /// everything alive, and pruning decisions wait for aggregated means
    /// that have actually seen data.
    pub fn init(arch: NetArch, prior: HierPrior, sigma0: f64) -> Result<Self> {
        arch.validate()?;
        let prior = prior.validate()?;
        if !(sigma0 > 0.0) {
            return Err(Error::Domain(format!("sigma0 must be positive, got {sigma0}")));
        }
        let shapes = arch.layer_shapes();
        let mk = |v: f64| -> Vec<Array2<f64>> {
            shapes.iter().map(|s| Array2::from_elem((s.rows, s.cols), v)).collect()
        };
        let shape0 = prior.a + 1.0;
        let rate0 = prior.b + 1.0 + sigma0 * sigma0;
        let state = Self {
            mu: mk(0.0),
            bias_mu: shapes.iter().map(|s| Array1::zeros(s.cols)).collect(),
            sigma: sigma0,
            pi_tilde: mk(0.5),
            gamma_shape: mk(shape0),
            gamma_rate: mk(rate0),
            pi_prior: mk(prior.init_active),
            v_h: shapes
                .iter()
                .map(|s| vec![BernoulliMessage::uniform(); s.count()])
                .collect(),
            arch,
            prior,
        };
        Ok(state)
    }

    /// Downloaded prior std per weight: σ̃ = sqrt(b̃/ã).
    pub fn prior_std(&self) -> Vec<Array2<f64>> {
        self.gamma_shape
            .iter()
            .zip(&self.gamma_rate)
            .map(|(a, b)| {
                let mut s = b / a;
                s.mapv_inplace(f64::sqrt);
                s
            })
            .collect()
    }

    /// Bayes-decision support mask: weight active iff π̃ ≥ 1/2.
    pub fn support_mask(&self) -> Vec<Array2<bool>> {
        self.pi_tilde.iter().map(|p| p.mapv(|v| v >= 0.5)).collect()
    }

    /// Fraction of weights whose π̃ is within `margin` of 0 or 1.
    pub fn saturation_fraction(&self, margin: f64) -> f64 {
        let mut saturated = 0usize;
        let mut total = 0usize;
        for layer in &self.pi_tilde {
            total += layer.len();
            saturated += layer.iter().filter(|&&p| p.min(1.0 - p) < margin).count();
        }
        saturated as f64 / total as f64
    }
}

/// Log masses of the two support states under the current precision
/// posterior: (ln C₁, ln C₂) with
/// ln C₁ = ln π + a ln b − ln Γ(a) + (a−1)⟨ln ρ⟩ − b⟨ρ⟩ and ln C₂ the
/// spike analogue at weight prior probability 1 − π.
pub fn support_log_masses(
    prior: &HierPrior,
    pi: f64,
    gamma: GammaParams,
) -> (f64, f64) {
    let (mean_rho, mean_ln_rho) = gamma_expectations(gamma);
    let ln_c1 = pi.ln() + prior.a * prior.b.ln() - ln_gamma(prior.a)
        + (prior.a - 1.0) * mean_ln_rho
        - prior.b * mean_rho;
    let ln_c2 = (1.0 - pi).ln() + prior.a_bar * prior.b_bar.ln() - ln_gamma(prior.a_bar)
        + (prior.a_bar - 1.0) * mean_ln_rho
        - prior.b_bar * mean_rho;
    (ln_c1, ln_c2)
}

/// The support-block objective: KL of a Bernoulli(π̃) against the
/// unnormalized two-point mass (C₁, C₂), in log space. The closed-form
/// update is its exact minimizer.
pub fn support_objective(pi_tilde: f64, ln_c1: f64, ln_c2: f64) -> f64 {
    let xlnx = |x: f64| if x <= 0.0 { 0.0 } else { x * x.ln() };
    let mut acc = xlnx(pi_tilde) + xlnx(1.0 - pi_tilde);
    if pi_tilde > 0.0 {
        acc -= pi_tilde * ln_c1;
    }
    if pi_tilde < 1.0 {
        acc -= (1.0 - pi_tilde) * ln_c2;
    }
    acc
}

/// Closed-form support update: π̃ = C₁/(C₁ + C₂), evaluated stably as a
/// logistic of ln C₁ − ln C₂. Overwrites `pi_tilde` in the state.
pub fn update_support_posterior(state: &mut ServerState) {
    let prior = state.prior.clone();
    for l in 0..state.pi_tilde.len() {
        for idx in 0..state.pi_tilde[l].len() {
            let g = GammaParams {
                shape: state.gamma_shape[l].as_slice().unwrap()[idx],
                rate: state.gamma_rate[l].as_slice().unwrap()[idx],
            };
            let pi = state.pi_prior[l].as_slice().unwrap()[idx];
            let (ln_c1, ln_c2) = support_log_masses(&prior, pi, g);
            state.pi_tilde[l].as_slice_mut().unwrap()[idx] = sigmoid(ln_c1 - ln_c2);
        }
    }
}

/// Targets of the precision block under the current π̃ and aggregated
/// moments: shape target ã = π̃a + (1−π̃)ā + 1 and rate target
/// b̃ = μ² + σ² + π̃b + (1−π̃)b̄.
pub fn precision_targets(prior: &HierPrior, pi_tilde: f64, mu: f64, sigma: f64) -> (f64, f64) {
    let shape = pi_tilde * prior.a + (1.0 - pi_tilde) * prior.a_bar + 1.0;
    let rate = mu * mu + sigma * sigma + pi_tilde * prior.b + (1.0 - pi_tilde) * prior.b_bar;
    (shape, rate)
}

/// The precision-block objective: KL of Gamma(ã, b̃) against the
/// unnormalized Gamma-shaped target with shape α and rate β. Minimized
/// exactly at (α, β), which is what [`update_precision_posterior`] assigns.
pub fn precision_objective(shape: f64, rate: f64, alpha: f64, beta: f64) -> f64 {
    let mean_ln_rho = digamma(shape).expect("positive shape") - rate.ln();
    let neg_entropy = shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * mean_ln_rho - shape;
    neg_entropy - ((alpha - 1.0) * mean_ln_rho - beta * shape / rate)
}

/// Closed-form precision update, applied with the global scalar σ_G for
/// every weight.
pub fn update_precision_posterior(state: &mut ServerState) {
    let prior = state.prior.clone();
    let sigma = state.sigma;
    for l in 0..state.gamma_shape.len() {
        for idx in 0..state.gamma_shape[l].len() {
            let pi_t = state.pi_tilde[l].as_slice().unwrap()[idx];
            let mu = state.mu[l].as_slice().unwrap()[idx];
            let (shape, rate) = precision_targets(&prior, pi_t, mu, sigma);
            state.gamma_shape[l].as_slice_mut().unwrap()[idx] = shape;
            state.gamma_rate[l].as_slice_mut().unwrap()[idx] = rate;
        }
    }
}

/// One client's uploaded parameters with its aggregation weight.
#[derive(Debug, Clone)]
pub struct ClientUpload {
    pub mu: Vec<Array2<f64>>,
    pub bias_mu: Vec<Array1<f64>>,
    pub sigma: f64,
    pub weight: f64,
}

/// Weighted aggregation μ_G = Σ p_t μ_t (element-wise) and σ_G = Σ p_t σ_t.
/// Weights must sum to one within 1e-9.
pub fn aggregate(
    uploads: &[ClientUpload],
) -> Result<(Vec<Array2<f64>>, Vec<Array1<f64>>, f64)> {
    if uploads.is_empty() {
        return Err(Error::Sim("aggregate needs at least one upload".into()));
    }
    let total: f64 = uploads.iter().map(|u| u.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Sim(format!("aggregation weights sum to {total}, expected 1")));
    }
    let mut mu: Vec<Array2<f64>> =
        uploads[0].mu.iter().map(|m| Array2::zeros(m.dim())).collect();
    let mut bias: Vec<Array1<f64>> =
        uploads[0].bias_mu.iter().map(|b| Array1::zeros(b.len())).collect();
    let mut sigma = 0.0;
    for u in uploads {
        for (acc, m) in mu.iter_mut().zip(&u.mu) {
            acc.scaled_add(u.weight, m);
        }
        for (acc, b) in bias.iter_mut().zip(&u.bias_mu) {
            acc.scaled_add(u.weight, b);
        }
        sigma += u.weight * u.sigma;
    }
    Ok((mu, bias, sigma))
}

/// Turbo messages toward the grid: v_{η→s}(k) ∝ q(s = k) / v_{h→s}(k), with
/// q clamped away from exact 0/1 and the division floored at 1e-12.
pub fn compute_upward_messages(state: &ServerState) -> Vec<Vec<BernoulliMessage>> {
    state
        .pi_tilde
        .iter()
        .zip(&state.v_h)
        .map(|(pi_t, vh)| {
            pi_t.iter()
                .zip(vh)
                .map(|(&p, down)| {
                    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    let q = BernoulliMessage::from_p_active(p).expect("clamped probability");
                    q.divide(down)
                })
                .collect()
        })
        .collect()
}

/// Refresh the support prior from the grid's extrinsic messages:
/// π = v_h(1) / (v_h(0) + v_h(1)).
pub fn refresh_support_prior(state: &mut ServerState, extrinsic: Vec<Vec<BernoulliMessage>>) {
    for (l, layer_msgs) in extrinsic.iter().enumerate() {
        for (idx, msg) in layer_msgs.iter().enumerate() {
            state.pi_prior[l].as_slice_mut().unwrap()[idx] =
                msg.p_active() / (msg.v0() + msg.v1());
        }
    }
    state.v_h = extrinsic;
}

/// Settings for the grid exchange.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpmpSettings {
    pub max_iters: usize,
    pub damping: f64,
    pub tol: f64,
}

impl Default for SpmpSettings {
    fn default() -> Self {
        Self { max_iters: 50, damping: 0.5, tol: 1e-6 }
    }
}

/// Largest deviation between normalize(v_h ⊙ v_η) and the support
/// posterior q(s); zero up to flooring right after messages are formed.
pub fn turbo_residual(state: &ServerState, upward: &[Vec<BernoulliMessage>]) -> f64 {
    let mut worst = 0.0f64;
    for (l, layer_up) in upward.iter().enumerate() {
        for (idx, up) in layer_up.iter().enumerate() {
            let recovered = up.product(&state.v_h[l][idx]);
            let q = state.pi_tilde[l].as_slice().unwrap()[idx];
            worst = worst.max((recovered.p_active() - q).abs());
        }
    }
    worst
}

/// Outcome of one turbo exchange with the grid.
#[derive(Debug, Clone, Copy)]
pub struct ExchangeStats {
    pub converged: bool,
    pub turbo_residual: f64,
}

/// One full turbo exchange: send v_{η→s} into each layer's grid, run
/// sum-product, install the extrinsic v_{h→s} and the refreshed π.
pub fn exchange_with_grid(state: &mut ServerState, settings: SpmpSettings) -> Result<ExchangeStats> {
    let upward = compute_upward_messages(state);
    let residual = turbo_residual(state, &upward);
    let shapes = state.arch.layer_shapes();
    let mut extrinsics = Vec::with_capacity(shapes.len());
    let mut all_converged = true;
    for (shape, inputs) in shapes.into_iter().zip(upward) {
        let grid: SupportGrid = build_grid(shape, &state.prior, inputs)?;
        let out = run_spmp(&grid, settings.max_iters, settings.damping, settings.tol);
        all_converged &= out.converged;
        extrinsics.push(out.extrinsic);
    }
    refresh_support_prior(state, extrinsics);
    Ok(ExchangeStats { converged: all_converged, turbo_residual: residual })
}

/// Negative evidence lower bound: the Bernoulli, Gamma, and Gaussian KL
/// blocks in closed form plus a single-sample estimate of the data term
/// scaled to the full dataset.
///
/// The Gaussian block uses the plug-in prior std σ̃ = sqrt(b̃/ã) — the same
/// form the clients optimize — so a posterior equal to the prior scores
/// exactly zero KL. The data sample is drawn from the stream `seed`.
pub fn nelb(
    state: &ServerState,
    eval_features: &ndarray::Array2<f64>,
    eval_labels: &[usize],
    data_scale: f64,
    seed: u64,
) -> f64 {
    let mut kl = 0.0;
    let prior = &state.prior;
    for l in 0..state.pi_tilde.len() {
        let pi_t_layer = state.pi_tilde[l].as_slice().unwrap();
        let pi_layer = state.pi_prior[l].as_slice().unwrap();
        let shape_layer = state.gamma_shape[l].as_slice().unwrap();
        let rate_layer = state.gamma_rate[l].as_slice().unwrap();
        let mu_layer = state.mu[l].as_slice().unwrap();
        for idx in 0..pi_t_layer.len() {
            let pi_t = pi_t_layer[idx].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            let pi = pi_layer[idx].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            // Bernoulli block.
            kl += pi_t * (pi_t / pi).ln() + (1.0 - pi_t) * ((1.0 - pi_t) / (1.0 - pi)).ln();
            // Gamma block: E_q ln q(ρ) − E_{q(s)q(ρ)} ln p(ρ|s).
            let g = GammaParams { shape: shape_layer[idx], rate: rate_layer[idx] };
            let (mean_rho, mean_ln_rho) = gamma_expectations(g);
            let neg_entropy = g.shape * g.rate.ln() - ln_gamma(g.shape)
                + (g.shape - 1.0) * mean_ln_rho
                - g.shape;
            let slab = prior.a * prior.b.ln() - ln_gamma(prior.a)
                + (prior.a - 1.0) * mean_ln_rho
                - prior.b * mean_rho;
            let spike = prior.a_bar * prior.b_bar.ln() - ln_gamma(prior.a_bar)
                + (prior.a_bar - 1.0) * mean_ln_rho
                - prior.b_bar * mean_rho;
            kl += neg_entropy - (pi_t * slab + (1.0 - pi_t) * spike);
            // Gaussian block with the plug-in prior std.
            let prior_std = (g.rate / g.shape).sqrt();
            kl += crate::special::kl_gauss_to_centered(
                crate::special::GaussianParams { mean: mu_layer[idx], std: state.sigma },
                prior_std,
            );
        }
    }
    for b in &state.bias_mu {
        kl += b.iter().map(|&x| 0.5 * x * x).sum::<f64>();
    }

    if eval_labels.is_empty() {
        return kl;
    }
    // Single reparameterized sample of the global weights.
    let mut rng = stream(seed, &[]);
    let weights: Vec<Array2<f64>> = state
        .mu
        .iter()
        .map(|mu| {
            mu.mapv(|m| {
                let e: f64 = rng.sample(StandardNormal);
                m + state.sigma * e
            })
        })
        .collect();
    let logits = crate::net::forward_logits(&weights, &state.bias_mu, eval_features);
    let mut total_ce = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total_ce += lse - row[eval_labels[i]];
    }
    kl + data_scale * total_ce / eval_labels.len() as f64
}
