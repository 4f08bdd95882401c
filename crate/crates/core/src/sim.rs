//! End-to-end federated simulation: data partitioning, the round loop with
//! a fork-join client phase, communication accounting, and the baseline
//! methods.
//!
//! Structural compression is applied for real — pruned weights download as
//! zero, uploads carry only active cells once the mask saturates, top-k and
//! quantization transforms hit the transmitted values — while scalar
//! quantization of surviving values is accounted (via the codec's exact cost
//! model) without perturbing them. Every random choice draws from a stream
//! keyed by (seed, role, round, client), so results are bit-identical across
//! thread counts.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{topk_mask, uniform_quantize};
use crate::codec::{encode_layer, extract_clusters, ClusterMask, RANGE_BITS};
use crate::config::{DatasetConfig, ExperimentConfig, Method};
use crate::data::{load_csv, load_idx, Dataset};
use crate::net::{
    accuracy, ce_forward_backward, local_sgd, ClientWeighting, Minibatch, NetArch,
    VariationalNetState,
};
use crate::results::{
    trailing_average_violations, ConvergenceReport, ResultsBundle, RoundMetrics, RunSummary,
    StructureMetrics,
};
use crate::rng::{derive_seed, role, stream};
use crate::server::{
    aggregate, exchange_with_grid, nelb, update_precision_posterior, update_support_posterior,
    ClientUpload, ServerState,
};
use crate::synthetic::{iid_gaussian_classification, mask_iou, planted_teacher};
use crate::{Error, Result};

/// One client's shard: indices into the global training set plus its
/// aggregation weight p_t = |D_t| / |D|.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub indices: Vec<usize>,
    pub weight: f64,
}

/// Dirichlet(α) label-skew partition: each class's mass across clients is
/// drawn from Dirichlet(α·1_T). Resamples (up to 100 tries) until every
/// client holds at least one record. Deterministic per seed.
pub fn dirichlet_partition(
    dataset: &Dataset,
    t: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if dataset.is_empty() {
        return Err(Error::Sim("cannot partition an empty dataset".into()));
    }
    if t == 0 {
        return Err(Error::Sim("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Sim(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let n = dataset.len();
    if n < t {
        return Err(Error::Sim(format!("{n} records cannot cover {t} clients")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = stream(seed, &[role::PARTITION]);
    let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");

    for _attempt in 0..100 {
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); t];
        for class_indices in by_class.iter().filter(|c| !c.is_empty()) {
            // Class proportions across clients.
            let mut props: Vec<f64> = (0..t).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
            let z: f64 = props.iter().sum();
            for p in &mut props {
                *p /= z;
            }
            // Shuffle the class, split by largest remainder.
            let mut pool = class_indices.clone();
            for i in (1..pool.len()).rev() {
                let j = rng.random_range(0..=i);
                pool.swap(i, j);
            }
            let m = pool.len();
            let mut counts: Vec<usize> = props.iter().map(|p| (p * m as f64) as usize).collect();
            let assigned: usize = counts.iter().sum();
            let mut fractional: Vec<(usize, f64)> = props
                .iter()
                .enumerate()
                .map(|(i, p)| (i, p * m as f64 - counts[i] as f64))
                .collect();
            fractional.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for k in 0..m - assigned {
                counts[fractional[k % t].0] += 1;
            }
            let mut cursor = 0;
            for (client, &c) in counts.iter().enumerate() {
                assignment[client].extend_from_slice(&pool[cursor..cursor + c]);
                cursor += c;
            }
        }
        if assignment.iter().all(|a| !a.is_empty()) {
            let mut out = Vec::with_capacity(t);
            for mut indices in assignment {
                indices.sort_unstable();
                let weight = indices.len() as f64 / n as f64;
                out.push(ClientDataset { indices, weight });
            }
            return Ok(out);
        }
    }
    Err(Error::Sim(format!(
        "could not give every one of {t} clients a record after 100 tries (alpha = {alpha})"
    )))
}

/// Cumulative communication record. Downstream is a broadcast counted once
/// per round; upstream is per client.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    pub down_per_round: Vec<u64>,
    pub up_per_round: Vec<Vec<u64>>,
}

impl CommLedger {
    pub fn push_round(&mut self, down: u64, ups: Vec<u64>) {
        self.down_per_round.push(down);
        self.up_per_round.push(ups);
    }

    pub fn cumulative_down(&self) -> u64 {
        self.down_per_round.iter().sum()
    }

    pub fn cumulative_up(&self) -> u64 {
        self.up_per_round.iter().flatten().sum()
    }
}

fn dense_bits(count: usize, bits_per_value: u32) -> u64 {
    count as u64 * bits_per_value as u64 + RANGE_BITS
}

fn bias_bits(arch: &NetArch, bits_per_value: u32) -> u64 {
    arch.bias_count() as u64 * bits_per_value as u64 + RANGE_BITS
}

/// The experiment's data: train/test split plus the planted ground truth
/// when the task provides one.
#[derive(Debug, Clone)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    pub planted_masks: Option<Vec<Array2<bool>>>,
}

/// Materialize the configured dataset.
pub fn build_task(cfg: &ExperimentConfig) -> Result<Task> {
    let arch = cfg.arch.to_arch();
    match &cfg.dataset {
        DatasetConfig::Planted { samples, test_samples, label_noise, .. } => {
            let spec = cfg.dataset.planted_spec(&arch)?.expect("planted config");
            let total = samples + test_samples;
            let t = planted_teacher(&arch, &spec, *label_noise, total, cfg.seed)?;
            let (train, test) = split_dataset(&t.dataset, *samples);
            Ok(Task {
                train,
                test,
                planted_masks: Some(t.masks.iter().map(|m| m.to_mask()).collect()),
            })
        }
        DatasetConfig::Blobs { dim, classes, samples, test_samples, scale } => {
            let total = samples + test_samples;
            let all = iid_gaussian_classification(*dim, *classes, total, *scale, cfg.seed)?;
            let (train, test) = split_dataset(&all, *samples);
            Ok(Task { train, test, planted_masks: None })
        }
        DatasetConfig::Idx { train_images, train_labels, test_images, test_labels } => {
            let mut train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            let classes = train.n_classes.max(test.n_classes).max(arch.classes);
            train.n_classes = classes;
            test.n_classes = classes;
            Ok(Task { train, test, planted_masks: None })
        }
        DatasetConfig::Csv { train, test } => {
            let mut train_ds = load_csv(train)?;
            let mut test_ds = load_csv(test)?;
            let classes = train_ds.n_classes.max(test_ds.n_classes).max(arch.classes);
            train_ds.n_classes = classes;
            test_ds.n_classes = classes;
            Ok(Task { train: train_ds, test: test_ds, planted_masks: None })
        }
    }
}

fn split_dataset(ds: &Dataset, n_train: usize) -> (Dataset, Dataset) {
    let n = ds.len();
    let n_train = n_train.min(n);
    let train = Dataset {
        features: ds.features.slice(ndarray::s![..n_train, ..]).to_owned(),
        labels: ds.labels[..n_train].to_vec(),
        n_classes: ds.n_classes,
    };
    let test = Dataset {
        features: ds.features.slice(ndarray::s![n_train.., ..]).to_owned(),
        labels: ds.labels[n_train..].to_vec(),
        n_classes: ds.n_classes,
    };
    (train, test)
}

/// Per-round turbo diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub turbo_residual: f64,
    pub spmp_converged: bool,
    pub max_grad_norm: f64,
    pub saturated: bool,
}

/// What the server broadcasts at the start of a round.
struct Download {
    mu: Vec<Array2<f64>>,
    bias: Vec<Array1<f64>>,
    sigma: f64,
    prior_std: Vec<Array2<f64>>,
    masks: Option<Vec<ClusterMask>>,
    bits: u64,
}

/// The variational-method simulator, driven one round at a time.
pub struct TurboSim {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientDataset>,
    pub server: ServerState,
    pub ledger: CommLedger,
    pub nelb_history: Vec<f64>,
    pub diagnostics: Vec<RoundDiagnostics>,
    round_index: usize,
    nelb_eval_count: usize,
    prev_mask: Option<Vec<Array2<bool>>>,
    stable_rounds: usize,
}

impl TurboSim {
    pub fn new(cfg: &ExperimentConfig, task: &Task, clients: Vec<ClientDataset>) -> Result<Self> {
        let arch = cfg.arch.to_arch();
        let mut server = ServerState::init(arch.clone(), cfg.prior.clone(), cfg.init.sigma0)?;
        let init = VariationalNetState::random_init(
            arch,
            cfg.init.sigma0,
            cfg.init.weight_scale,
            derive_seed(cfg.seed, &[role::INIT_WEIGHTS]),
        )?;
        server.mu = init.mu;
        server.bias_mu = init.bias_mu;
        Ok(Self {
            cfg: cfg.clone(),
            train: task.train.clone(),
            test: task.test.clone(),
            clients,
            server,
            ledger: CommLedger::default(),
            nelb_history: Vec::new(),
            diagnostics: Vec::new(),
            round_index: 0,
            nelb_eval_count: cfg.nelb_sample,
            prev_mask: None,
            stable_rounds: 0,
        })
    }

    /// Deployed model: posterior-mean weights with pruned entries zeroed.
    pub fn deployed_model(&self) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let masks = self.server.support_mask();
        let weights = self
            .server
            .mu
            .iter()
            .zip(&masks)
            .map(|(mu, m)| {
                Array2::from_shape_fn(mu.dim(), |ij| if m[ij] { mu[ij] } else { 0.0 })
            })
            .collect();
        (weights, self.server.bias_mu.clone())
    }

    pub fn deployed_accuracy(&self) -> f64 {
        let (w, b) = self.deployed_model();
        accuracy(&w, &b, &self.test.features, &self.test.labels)
    }

    pub fn sparsity(&self) -> f64 {
        let masks = self.server.support_mask();
        let active: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        let total: usize = masks.iter().map(|m| m.len()).sum();
        active as f64 / total as f64
    }

    /// Mask churn since the previous round, as a fraction of all cells.
    fn mask_churn(&self, mask: &[Array2<bool>]) -> f64 {
        let Some(prev) = &self.prev_mask else { return 1.0 };
        let mut changed = 0usize;
        let mut total = 0usize;
        for (a, b) in mask.iter().zip(prev) {
            total += a.len();
            changed += a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
        }
        changed as f64 / total as f64
    }

    fn make_download(&self) -> Download {
        let cfg = &self.cfg;
        let server = &self.server;
        let support = server.support_mask();
        // Two independent compression switches. The prior stds collapse to
        // one value per support state as soon as the support posterior
        // saturates. Cluster-coded means additionally require a settled,
        // nonempty mask: zeroing cells of a still-moving mask ratchets
        // their means away permanently, and an empty layer would broadcast
        // all zeros.
        let pi_saturated =
            server.saturation_fraction(cfg.saturation_margin) >= cfg.saturation_fraction;
        let mask_stable = pi_saturated
            && self.stable_rounds >= 1
            && support.iter().all(|m| m.iter().any(|&b| b));
        let exact_std = server.prior_std();
        let mut bits = 32u64 + bias_bits(&server.arch, cfg.bits_per_value);

        let prior_std = if pi_saturated {
            // Two representative prior stds per layer: the mean over each
            // support state.
            bits += 2 * cfg.bits_per_value as u64 * support.len() as u64;
            support
                .iter()
                .zip(&exact_std)
                .map(|(mask, std)| {
                    let (mut act_sum, mut act_n, mut inact_sum, mut inact_n) =
                        (0.0, 0usize, 0.0, 0usize);
                    for (&m, &s) in mask.iter().zip(std.iter()) {
                        if m {
                            act_sum += s;
                            act_n += 1;
                        } else {
                            inact_sum += s;
                            inact_n += 1;
                        }
                    }
                    let act =
                        if act_n > 0 { act_sum / act_n as f64 } else { inact_sum / inact_n as f64 };
                    let inact = if inact_n > 0 {
                        inact_sum / inact_n as f64
                    } else {
                        act_sum / act_n as f64
                    };
                    Array2::from_shape_fn(mask.dim(), |ij| if mask[ij] { act } else { inact })
                })
                .collect()
        } else {
            for shape in server.arch.layer_shapes() {
                bits += dense_bits(shape.count(), cfg.bits_per_value);
            }
            exact_std
        };

        if !mask_stable {
            for shape in server.arch.layer_shapes() {
                bits += dense_bits(shape.count(), cfg.bits_per_value);
            }
            return Download {
                mu: server.mu.clone(),
                bias: server.bias_mu.clone(),
                sigma: server.sigma,
                prior_std,
                masks: None,
                bits,
            };
        }

        let masks: Vec<ClusterMask> =
            support.iter().map(|m| extract_clusters(m, cfg.min_cluster)).collect();
        let mut mu = Vec::with_capacity(masks.len());
        for (l, cm) in masks.iter().enumerate() {
            let mask = cm.to_mask();
            let masked = Array2::from_shape_fn(server.mu[l].dim(), |ij| {
                if mask[ij] {
                    server.mu[l][ij]
                } else {
                    0.0
                }
            });
            bits += encode_layer(&masked, cm, cfg.bits_per_value).total_bits;
            mu.push(masked);
        }
        Download {
            mu,
            bias: server.bias_mu.clone(),
            sigma: server.sigma,
            prior_std,
            masks: Some(masks),
            bits,
        }
    }

    /// One full communication round.
    pub fn round(&mut self) -> Result<RoundMetrics> {
        let t0 = std::time::Instant::now();
        let round = self.round_index;
        let cfg = self.cfg.clone();
        let download = self.make_download();
        let arch = self.server.arch.clone();

        // Client phase: fork, train, join in client order.
        let results: Vec<Result<(ClientUpload, f64, u64)>> = self
            .clients
            .par_iter()
            .enumerate()
            .map(|(cid, client)| {
                let mut state = VariationalNetState {
                    arch: arch.clone(),
                    mu: download.mu.clone(),
                    bias_mu: download.bias.clone(),
                    sigma: download.sigma,
                    prior_std: download.prior_std.clone(),
                };
                let weighting = ClientWeighting::new(client.weight, client.indices.len())?;
                let stats = local_sgd(
                    &mut state,
                    &self.train,
                    &client.indices,
                    weighting,
                    cfg.schedule,
                    cfg.local_steps,
                    cfg.batch_size,
                    round * cfg.local_steps,
                    derive_seed(cfg.seed, &[role::LOCAL_SGD, round as u64, cid as u64]),
                )?;
                // Upload: masked cluster coding once saturated, dense before.
                let mut up_bits = 32u64 + bias_bits(&arch, cfg.bits_per_value);
                let mu = match &download.masks {
                    Some(masks) => {
                        let mut masked = Vec::with_capacity(masks.len());
                        for (l, cm) in masks.iter().enumerate() {
                            let m = cm.to_mask();
                            let layer = Array2::from_shape_fn(state.mu[l].dim(), |ij| {
                                if m[ij] {
                                    state.mu[l][ij]
                                } else {
                                    0.0
                                }
                            });
                            up_bits += encode_layer(&layer, cm, cfg.bits_per_value).total_bits;
                            masked.push(layer);
                        }
                        masked
                    }
                    None => {
                        for s in arch.layer_shapes() {
                            up_bits += dense_bits(s.count(), cfg.bits_per_value);
                        }
                        state.mu
                    }
                };
                let upload = ClientUpload {
                    mu,
                    bias_mu: state.bias_mu,
                    sigma: state.sigma,
                    weight: client.weight,
                };
                Ok((upload, stats.last_grad_norm, up_bits))
            })
            .collect();

        let mut uploads = Vec::with_capacity(results.len());
        let mut up_bits = Vec::with_capacity(results.len());
        let mut max_grad_norm = 0.0f64;
        for r in results {
            let (u, g, b) = r?;
            uploads.push(u);
            up_bits.push(b);
            max_grad_norm = max_grad_norm.max(g);
        }
        self.ledger.push_round(download.bits, up_bits);

        // Server phase: aggregate, closed-form updates, grid exchange.
        let (mu, bias, sigma) = aggregate(&uploads)?;
        self.server.mu = mu;
        self.server.bias_mu = bias;
        self.server.sigma = sigma;
        update_support_posterior(&mut self.server);
        update_precision_posterior(&mut self.server);
        let stats = exchange_with_grid(&mut self.server, cfg.spmp)?;

        self.diagnostics.push(RoundDiagnostics {
            turbo_residual: stats.turbo_residual,
            spmp_converged: stats.converged,
            max_grad_norm,
            saturated: download.masks.is_some(),
        });

        // Track mask stability for the transmission-mode switch.
        let mask = self.server.support_mask();
        if self.mask_churn(&mask) <= 0.02 {
            self.stable_rounds += 1;
        } else {
            self.stable_rounds = 0;
        }
        self.prev_mask = Some(mask);

        // Round metrics.
        let eval_n = self.nelb_eval_count.min(self.train.len());
        let eval_idx: Vec<usize> = (0..eval_n).collect();
        let eval = Minibatch::gather(&self.train, &eval_idx);
        // Common random numbers: the same weight-sample stream every round,
        // so the single-sample noise cancels when rounds are compared.
        let nelb_value = nelb(
            &self.server,
            &eval.features,
            &eval.labels,
            self.train.len() as f64,
            derive_seed(cfg.seed, &[role::NELB_EVAL]),
        );
        self.nelb_history.push(nelb_value);

        self.round_index += 1;
        Ok(RoundMetrics {
            round,
            acc: self.deployed_accuracy(),
            bits_up: self.ledger.cumulative_up(),
            bits_down: self.ledger.cumulative_down(),
            sparsity: self.sparsity(),
            nelb: Some(nelb_value),
            seconds: t0.elapsed().as_secs_f64(),
        })
    }
}

/// Point-estimate comparators: plain SGD clients with top-k, quantized, or
/// uncompressed uploads.
pub struct BaselineSim {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientDataset>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub ledger: CommLedger,
    round_index: usize,
}

impl BaselineSim {
    pub fn new(cfg: &ExperimentConfig, task: &Task, clients: Vec<ClientDataset>) -> Result<Self> {
        let arch = cfg.arch.to_arch();
        let init = VariationalNetState::random_init(
            arch,
            cfg.init.sigma0,
            cfg.init.weight_scale,
            derive_seed(cfg.seed, &[role::INIT_WEIGHTS]),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            train: task.train.clone(),
            test: task.test.clone(),
            clients,
            weights: init.mu,
            biases: init.bias_mu,
            ledger: CommLedger::default(),
            round_index: 0,
        })
    }

    pub fn accuracy(&self) -> f64 {
        accuracy(&self.weights, &self.biases, &self.test.features, &self.test.labels)
    }

    pub fn sparsity(&self) -> f64 {
        let nonzero: usize =
            self.weights.iter().map(|w| w.iter().filter(|&&v| v != 0.0).count()).sum();
        let total: usize = self.weights.iter().map(|w| w.len()).sum();
        nonzero as f64 / total as f64
    }

    fn down_bits(&self) -> u64 {
        let arch = self.cfg.arch.to_arch();
        let mut bits;
        match self.cfg.method {
            Method::Fedavg => {
                bits = 32 * arch.bias_count() as u64;
                for s in arch.layer_shapes() {
                    bits += 32 * s.count() as u64;
                }
            }
            _ => {
                bits = bias_bits(&arch, self.cfg.bits_per_value);
                for s in arch.layer_shapes() {
                    bits += dense_bits(s.count(), self.cfg.bits_per_value);
                }
            }
        }
        bits
    }

    pub fn round(&mut self) -> Result<RoundMetrics> {
        let t0 = std::time::Instant::now();
        let round = self.round_index;
        let cfg = self.cfg.clone();
        let method = cfg.method;
        let down = self.down_bits();
        let weights0 = self.weights.clone();
        let biases0 = self.biases.clone();

        let results: Vec<Result<(Vec<Array2<f64>>, Vec<Array1<f64>>, f64, u64)>> = self
            .clients
            .par_iter()
            .enumerate()
            .map(|(cid, client)| {
                let mut w = weights0.clone();
                let mut b = biases0.clone();
                let seed = derive_seed(cfg.seed, &[role::LOCAL_SGD, round as u64, cid as u64]);
                let mut pool = client.indices.clone();
                for l in 0..cfg.local_steps {
                    let global_l = round * cfg.local_steps + l;
                    let eta = cfg.schedule.step_size(global_l);
                    let take = cfg.batch_size.min(pool.len());
                    let mut rng = stream(seed, &[0x_ba, global_l as u64]);
                    for i in 0..take {
                        let j = rng.random_range(i..pool.len());
                        pool.swap(i, j);
                    }
                    let batch = Minibatch::gather(&self.train, &pool[..take]);
                    let (_, dw, db) = ce_forward_backward(&w, &b, &batch, 1.0);
                    for (wl, g) in w.iter_mut().zip(&dw) {
                        wl.scaled_add(-eta, g);
                    }
                    for (bl, g) in b.iter_mut().zip(&db) {
                        bl.scaled_add(-eta, g);
                    }
                }
                // Upload transform and bit accounting.
                let arch2 = cfg.arch.to_arch();
                let mut bits = match method {
                    Method::Fedavg => 32 * arch2.bias_count() as u64,
                    _ => bias_bits(&arch2, cfg.bits_per_value),
                };
                match method {
                    Method::TopkBaseline => {
                        for wl in w.iter_mut() {
                            let flat: Vec<f64> = wl.iter().copied().collect();
                            let kept = topk_mask(&flat, cfg.topk_fraction)?;
                            let nnz = kept.iter().filter(|&&v| v != 0.0).count() as u64;
                            bits += nnz * (32 + cfg.bits_per_value as u64) + RANGE_BITS;
                            *wl = Array2::from_shape_vec(wl.dim(), kept)
                                .expect("shape is preserved");
                        }
                    }
                    Method::QuantBaseline => {
                        for wl in w.iter_mut() {
                            let flat: Vec<f64> = wl.iter().copied().collect();
                            let q = uniform_quantize(&flat, cfg.bits_per_value)?;
                            bits += dense_bits(flat.len(), cfg.bits_per_value);
                            *wl = Array2::from_shape_vec(wl.dim(), q)
                                .expect("shape is preserved");
                        }
                    }
                    Method::Fedavg => {
                        for wl in w.iter() {
                            bits += 32 * wl.len() as u64;
                        }
                    }
                    Method::TurboVbi => unreachable!("turbo runs in TurboSim"),
                }
                Ok((w, b, client.weight, bits))
            })
            .collect();

        let mut agg_w: Vec<Array2<f64>> =
            self.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
        let mut agg_b: Vec<Array1<f64>> =
            self.biases.iter().map(|b| Array1::zeros(b.len())).collect();
        let mut up_bits = Vec::with_capacity(results.len());
        for r in results {
            let (w, b, p, bits) = r?;
            for (acc, wl) in agg_w.iter_mut().zip(&w) {
                acc.scaled_add(p, wl);
            }
            for (acc, bl) in agg_b.iter_mut().zip(&b) {
                acc.scaled_add(p, bl);
            }
            up_bits.push(bits);
        }
        self.weights = agg_w;
        self.biases = agg_b;
        self.ledger.push_round(down, up_bits);
        self.round_index += 1;

        Ok(RoundMetrics {
            round,
            acc: self.accuracy(),
            bits_up: self.ledger.cumulative_up(),
            bits_down: self.ledger.cumulative_down(),
            sparsity: self.sparsity(),
            nelb: None,
            seconds: t0.elapsed().as_secs_f64(),
        })
    }
}

/// Run a full experiment as configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsBundle> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Sim(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment_inner(cfg))
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<ResultsBundle> {
    let t0 = std::time::Instant::now();
    let task = build_task(cfg)?;
    let clients = dirichlet_partition(
        &task.train,
        cfg.clients,
        cfg.dirichlet_alpha,
        derive_seed(cfg.seed, &[role::PARTITION]),
    )?;
    let client_sizes: Vec<usize> = clients.iter().map(|c| c.indices.len()).collect();

    let mut rounds = Vec::with_capacity(cfg.rounds);
    let (initial_acc, final_acc, final_sparsity, ledger, structure, convergence);
    match cfg.method {
        Method::TurboVbi => {
            let mut sim = TurboSim::new(cfg, &task, clients)?;
            initial_acc = sim.deployed_accuracy();
            for _ in 0..cfg.rounds {
                rounds.push(sim.round()?);
            }
            final_acc = if cfg.rounds == 0 { initial_acc } else { sim.deployed_accuracy() };
            final_sparsity = sim.sparsity();
            structure = task.planted_masks.as_ref().map(|planted| {
                structure_metrics(&sim.server.support_mask(), planted)
            });
            let violations = trailing_average_violations(&sim.nelb_history, 5);
            convergence = Some(ConvergenceReport {
                trailing_violations: violations.iter().map(|&(r, _)| r).collect(),
                max_violation_rel: violations
                    .iter()
                    .map(|&(_, v)| v)
                    .fold(0.0f64, f64::max),
                max_grad_norm: sim
                    .diagnostics
                    .iter()
                    .map(|d| d.max_grad_norm)
                    .fold(0.0f64, f64::max),
                spmp_always_converged: sim.diagnostics.iter().all(|d| d.spmp_converged),
                max_turbo_residual: sim
                    .diagnostics
                    .iter()
                    .map(|d| d.turbo_residual)
                    .fold(0.0f64, f64::max),
            });
            ledger = sim.ledger;
        }
        _ => {
            let mut sim = BaselineSim::new(cfg, &task, clients)?;
            initial_acc = sim.accuracy();
            for _ in 0..cfg.rounds {
                rounds.push(sim.round()?);
            }
            final_acc = if cfg.rounds == 0 { initial_acc } else { sim.accuracy() };
            final_sparsity = sim.sparsity();
            structure = task.planted_masks.as_ref().map(|planted| {
                let masks: Vec<Array2<bool>> =
                    sim.weights.iter().map(|w| w.mapv(|v| v != 0.0)).collect();
                structure_metrics(&masks, planted)
            });
            convergence = None;
            ledger = sim.ledger;
        }
    }

    let summary = RunSummary {
        method: cfg.method.label().to_string(),
        effective_config: cfg.clone(),
        client_sizes,
        initial_acc,
        final_acc,
        final_sparsity,
        total_bits_up: ledger.cumulative_up(),
        total_bits_down: ledger.cumulative_down(),
        structure,
        convergence,
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    Ok(ResultsBundle { rounds, summary, ledger })
}

fn structure_metrics(found: &[Array2<bool>], planted: &[Array2<bool>]) -> StructureMetrics {
    let per_layer_iou: Vec<f64> =
        found.iter().zip(planted).map(|(f, p)| mask_iou(f, p)).collect();
    let mut inter = 0usize;
    let mut union = 0usize;
    for (f, p) in found.iter().zip(planted) {
        for (&a, &b) in f.iter().zip(p.iter()) {
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
    }
    let overall_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    StructureMetrics { per_layer_iou, overall_iou }
}
