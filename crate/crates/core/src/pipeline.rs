//! The two training stages, the baselines built from them, multi-seed
//! experiments, and validation-based configuration selection.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{load_dataset_dir, DatasetSplits, SiteDataset};
use crate::error::{Error, Result};
use crate::lie_group::{GroupLookup, GroupParam};
use crate::losses::{mean_sq_error, mmd_multisite, phi, recon_x_loss, stage1_loss, stage2_terms, KernelConfig, PairBatch};
use crate::metrics::{evaluate, AggregateReport, EvalConfig, MetricsReport};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, ModelBundle, ModelDims};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Equivariant first stage followed by the site-invariant second stage.
    #[default]
    Ours,
    /// No equivariance, no site penalty.
    Naive,
    /// Site MMD over each whole batch.
    Mmd,
    /// Site MMD within covariate quantile bins.
    Ss,
    /// Penalty on codes of samples matched across sites.
    Rm,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ours, Method::Naive, Method::Mmd, Method::Ss, Method::Rm];

    pub fn is_baseline(self) -> bool {
        self != Method::Ours
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Naive => "naive",
            Method::Mmd => "mmd",
            Method::Ss => "ss",
            Method::Rm => "rm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected ours, naive, mmd, ss or rm)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda_eq: f64,
    pub lambda_recx: f64,
    pub lambda_mmd: f64,
    pub lambda_pred: f64,
    pub lambda_recl: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub kappa: f64,
    pub group_param: GroupParam,
    /// Sphere ambient dimension.
    pub n: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub kernel: KernelConfig,
    /// Quantile bins of the stratified-MMD and matching baselines.
    pub bins: usize,
    /// Stop a stage when its loss has not improved by `early_stop_tol`
    /// within this many epochs; 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    /// Let the second stage also update the encoder and τ.
    pub finetune_stage1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Ours,
            lambda_eq: 1.0,
            lambda_recx: 0.02,
            lambda_mmd: 0.1,
            lambda_pred: 1.0,
            lambda_recl: 0.1,
            epochs_stage1: 200,
            epochs_stage2: 200,
            batch: 128,
            lr: 1e-3,
            seed: 0,
            kappa: 1.0,
            group_param: GroupParam::Expm,
            n: 8,
            hidden: 64,
            activation: Activation::Relu,
            kernel: KernelConfig::default(),
            bins: 4,
            early_stop_window: 20,
            early_stop_tol: 1e-6,
            finetune_stage1: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_eq", self.lambda_eq),
            ("lambda_recx", self.lambda_recx),
            ("lambda_mmd", self.lambda_mmd),
            ("lambda_pred", self.lambda_pred),
            ("lambda_recl", self.lambda_recl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("epochs_stage1", self.epochs_stage1),
            ("epochs_stage2", self.epochs_stage2),
            ("batch", self.batch),
            ("hidden", self.hidden),
            ("bins", self.bins),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        Ok(())
    }

    /// Weight of the equivariance term actually used: baselines skip it.
    pub fn effective_lambda_eq(&self) -> f64 {
        if self.method == Method::Ours {
            self.lambda_eq
        } else {
            0.0
        }
    }

    /// Weight of the site penalty actually used: the naive baseline has none.
    pub fn effective_lambda_mmd(&self) -> f64 {
        if self.method == Method::Naive {
            0.0
        } else {
            self.lambda_mmd
        }
    }

    pub fn dims(&self, d: usize) -> ModelDims {
        ModelDims {
            d,
            n: self.n,
            hidden: self.hidden,
            activation: self.activation,
        }
    }
}

/// One per-epoch value of one loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

/// Per-stage running sums of the loss terms.
struct EpochLog {
    terms: Vec<(&'static str, f64)>,
    batches: usize,
}

impl EpochLog {
    fn new(names: &[&'static str]) -> Self {
        EpochLog {
            terms: names.iter().map(|&n| (n, 0.0)).collect(),
            batches: 0,
        }
    }

    fn add(&mut self, values: &[f64]) {
        for (t, v) in self.terms.iter_mut().zip(values) {
            t.1 += v;
        }
        self.batches += 1;
    }

    fn flush(&self, stage: &str, epoch: usize, out: &mut Vec<TraceRow>) -> f64 {
        let b = self.batches.max(1) as f64;
        for (name, sum) in &self.terms {
            out.push(TraceRow {
                epoch,
                term: format!("{stage}/{name}"),
                value: sum / b,
            });
        }
        self.terms[0].1 / b
    }
}

struct EarlyStop {
    window: usize,
    tol: f64,
    best: f64,
    since: usize,
}

impl EarlyStop {
    fn new(cfg: &TrainConfig) -> Self {
        EarlyStop {
            window: cfg.early_stop_window,
            tol: cfg.early_stop_tol,
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// True when training should stop after this epoch.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.tol {
            self.best = loss;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.window > 0 && self.since >= self.window
    }
}

fn non_finite(stage: &str, epoch: usize, step: usize, detail: String, trace: &[TraceRow]) -> Error {
    let prefix = format!("{stage}/total");
    Error::NonFinite {
        stage: stage.into(),
        epoch,
        step,
        detail,
        trace: trace.iter().filter(|r| r.term == prefix).map(|r| r.value).collect(),
    }
}

/// Re-tags an optimizer failure with the training position and trace.
fn locate(e: Error, stage: &str, epoch: usize, step: usize, trace: &[TraceRow]) -> Error {
    match e {
        Error::NonFinite { detail, .. } => non_finite(stage, epoch, step, detail, trace),
        other => other,
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

fn update(net: &mut Mlp, state: &mut AdamState, grads: &crate::autodiff::Gradients) -> Result<()> {
    let g = net.grads(grads);
    state.update(net.params_mut(), &g)
}

/// Stage one: Adam on λ_eq·(equivariance loss) + λ_recX·(reconstruction)
/// over the encoder, decoder and τ. Each shuffled minibatch is split into
/// consecutive pairs for the equivariance term.
pub fn train_stage1(model: &mut ModelBundle, data: &SiteDataset, cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("stage one on an empty dataset".into()));
    }
    let lambda_eq = cfg.effective_lambda_eq();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut st_e = AdamState::new(model.encoder.params(), adam);
    let mut st_d = AdamState::new(model.decoder.params(), adam);
    let mut st_t = AdamState::new(model.tau.params(), adam);
    let mut lookup = GroupLookup::new(cfg.n, cfg.kappa, cfg.group_param)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    let mut stop = EarlyStop::new(cfg);
    let mut step = 0;

    for epoch in 0..cfg.epochs_stage1 {
        order.shuffle(&mut rng);
        let mut log = EpochLog::new(&["total", "eq", "recon_x"]);
        for chunk in order.chunks(cfg.batch) {
            let at = |e| locate(e, "stage1", epoch, step, &trace);
            let mut g = Graph::new();
            let x = g.constant(data.features.select_rows(chunk));
            let rec = recon_x_loss(&mut g, x, &model.encoder, &model.decoder, true).map_err(at)?;
            let mut total = g.scale(rec, cfg.lambda_recx);
            let mut eq_value = 0.0;
            let p = chunk.len() / 2;
            if lambda_eq > 0.0 && p > 0 {
                let (a, b): (Vec<usize>, Vec<usize>) = (0..p).map(|k| (chunk[2 * k], chunk[2 * k + 1])).unzip();
                let pairs = PairBatch {
                    xi: data.features.select_rows(&a),
                    ci: a.iter().map(|&i| data.covariates[i]).collect(),
                    xj: data.features.select_rows(&b),
                    cj: b.iter().map(|&i| data.covariates[i]).collect(),
                };
                let eq = stage1_loss(&mut g, &pairs, &model.encoder, &model.tau, &mut lookup).map_err(at)?;
                eq_value = g.value(eq).item();
                let weighted = g.scale(eq, lambda_eq);
                total = g.add(total, weighted)?;
            }
            let loss = g.value(total).item();
            if !loss.is_finite() {
                return Err(non_finite("stage1", epoch, step, format!("loss is {loss}"), &trace));
            }
            let grads = g.backward(total)?;
            update(&mut model.encoder, &mut st_e, &grads).map_err(at)?;
            update(&mut model.decoder, &mut st_d, &grads).map_err(at)?;
            if lambda_eq > 0.0 {
                update(&mut model.tau, &mut st_t, &grads).map_err(at)?;
            }
            log.add(&[loss, eq_value, g.value(rec).item()]);
            step += 1;
        }
        let total = log.flush("stage1", epoch, &mut trace);
        if stop.observe(total) {
            log::debug!("stage one stopped early after epoch {epoch}");
            break;
        }
    }
    Ok(trace)
}

/// Mean equivariance loss over a fixed random pairing of all samples.
pub fn stage1_eval_loss(model: &ModelBundle, data: &SiteDataset, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let p = order.len() / 2;
    let (a, b): (Vec<usize>, Vec<usize>) = (0..p).map(|k| (order[2 * k], order[2 * k + 1])).unzip();
    let pairs = PairBatch {
        xi: data.features.select_rows(&a),
        ci: a.iter().map(|&i| data.covariates[i]).collect(),
        xj: data.features.select_rows(&b),
        cj: b.iter().map(|&i| data.covariates[i]).collect(),
    };
    let mut lookup = GroupLookup::new(cfg.n, cfg.kappa, cfg.group_param)?;
    let mut g = Graph::new();
    let l = stage1_loss(&mut g, &pairs, &model.encoder, &model.tau, &mut lookup)?;
    Ok(g.value(l).item())
}

/// Quantile bin edges of the covariate: `bins − 1` interior cut points.
pub fn quantile_edges(covariates: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = covariates.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..bins)
        .filter_map(|q| {
            let pos = q * sorted.len() / bins;
            sorted.get(pos).copied()
        })
        .collect()
}

pub fn bin_of(c: f64, edges: &[f64]) -> usize {
    edges.iter().filter(|&&e| c >= e).count()
}

/// Greedy cross-site matching: samples are visited in covariate order and
/// each unmatched one is paired with the nearest-covariate unmatched sample
/// of another site in the same (label, bin) cell. Returns each sample's
/// partner.
pub fn match_across_sites(data: &SiteDataset, edges: &[f64]) -> Vec<Option<usize>> {
    let mut partner = vec![None; data.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.covariates[a].total_cmp(&data.covariates[b]).then(a.cmp(&b)));
    let cell = |i: usize| (data.labels[i].to_bits(), bin_of(data.covariates[i], edges));
    let mut cells: std::collections::BTreeMap<(u64, usize), Vec<usize>> = Default::default();
    for &i in &order {
        cells.entry(cell(i)).or_default().push(i);
    }
    for members in cells.values() {
        for (k, &a) in members.iter().enumerate() {
            if partner[a].is_some() {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for &b in &members[k + 1..] {
                if partner[b].is_some() || data.sites[b] == data.sites[a] {
                    continue;
                }
                let d = (data.covariates[b] - data.covariates[a]).abs();
                if best.is_none_or(|(bd, bi)| d < bd || (d == bd && b < bi)) {
                    best = Some((d, b));
                }
                // members are sorted by covariate, so distances only grow
                if d > best.map_or(f64::INFINITY, |x| x.0) {
                    break;
                }
            }
            if let Some((_, b)) = best {
                partner[a] = Some(b);
                partner[b] = Some(a);
            }
        }
    }
    partner
}

/// Site MMD over groups of batch rows. Within a group only sites with at
/// least two rows take part, and a group counts only when two or more sites
/// take part. Returns `None` when no group counts.
fn grouped_site_mmd(
    g: &mut Graph,
    codes: Var,
    sites: &[usize],
    groups: &[usize],
    n_groups: usize,
    n_sites: usize,
    kernel: &KernelConfig,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for grp in 0..n_groups {
        let mut by_site = Vec::new();
        for s in 0..n_sites {
            let rows: Vec<usize> = (0..sites.len()).filter(|&r| groups[r] == grp && sites[r] == s).collect();
            if rows.len() >= 2 {
                by_site.push(g.select_rows(codes, &rows)?);
            }
        }
        if by_site.len() >= 2 {
            terms.push(mmd_multisite(g, &by_site, kernel)?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let count = terms.len() as f64;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / count)))
}

/// Stage two: Adam on λ_recL·‖ℓ − Ψ(Φ)‖² + λ_pred·(Y − h(Φ))² plus the
/// method's site penalty, over b, Ψ and h with Φ(ℓ) = τ(ℓ)b(τ(ℓ)ᵀℓ). The
/// encoder and τ stay frozen unless `finetune_stage1` is set. Warnings about
/// degenerate penalties are appended to `warnings`.
pub fn train_stage2(
    model: &mut ModelBundle,
    data: &SiteDataset,
    cfg: &TrainConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("stage two on an empty dataset".into()));
    }
    let lambda_mmd = cfg.effective_lambda_mmd();
    let finetune = cfg.finetune_stage1;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut st_b = AdamState::new(model.b.params(), adam);
    let mut st_p = AdamState::new(model.psi.params(), adam);
    let mut st_h = AdamState::new(model.head.params(), adam);
    let mut st_e = AdamState::new(model.encoder.params(), adam);
    let mut st_t = AdamState::new(model.tau.params(), adam);
    let frozen_latents = if finetune { None } else { Some(model.encode(&data.features)?) };

    let bins = match cfg.method {
        Method::Ss | Method::Rm => cfg.bins,
        _ => 1,
    };
    let edges = quantile_edges(&data.covariates, bins);
    let bin: Vec<usize> = data.covariates.iter().map(|&c| bin_of(c, &edges)).collect();
    let partner = if cfg.method == Method::Rm {
        let p = match_across_sites(data, &edges);
        if p.iter().all(Option::is_none) {
            warnings.push("matching baseline found no cross-site matches; its penalty is zero".into());
        }
        p
    } else {
        vec![None; data.len()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    let mut stop = EarlyStop::new(cfg);
    let mut step = 0;
    let mut penalty_seen = false;

    for epoch in 0..cfg.epochs_stage2 {
        order.shuffle(&mut rng);
        let mut log = EpochLog::new(&["total", "recon_l", "pred", "penalty"]);
        for chunk in order.chunks(cfg.batch) {
            let at = |e| locate(e, "stage2", epoch, step, &trace);
            let mut g = Graph::new();
            let latents_of = |g: &mut Graph, rows: &[usize]| -> Result<Var> {
                match &frozen_latents {
                    Some(l) => Ok(g.constant(l.select_rows(rows))),
                    None => {
                        let x = g.constant(data.features.select_rows(rows));
                        model.encoder.forward(g, x, true)
                    }
                }
            };
            let l = latents_of(&mut g, chunk).map_err(at)?;
            let y: Vec<f64> = chunk.iter().map(|&i| data.labels[i]).collect();
            let terms =
                stage2_terms(&mut g, l, &y, &model.tau, &model.b, &model.psi, &model.head, finetune).map_err(at)?;
            let rl = g.scale(terms.recon, cfg.lambda_recl);
            let pr = g.scale(terms.pred, cfg.lambda_pred);
            let mut total = g.add(rl, pr)?;

            let mut penalty_value = 0.0;
            if lambda_mmd > 0.0 {
                let penalty = match cfg.method {
                    Method::Naive => None,
                    Method::Ours | Method::Mmd | Method::Ss => {
                        let sites: Vec<usize> = chunk.iter().map(|&i| data.sites[i]).collect();
                        let groups: Vec<usize> = chunk.iter().map(|&i| bin[i]).collect();
                        grouped_site_mmd(&mut g, terms.phi, &sites, &groups, bins, data.n_sites(), &cfg.kernel)?
                    }
                    Method::Rm => {
                        let (pos, mates): (Vec<usize>, Vec<usize>) = chunk
                            .iter()
                            .enumerate()
                            .filter_map(|(k, &i)| partner[i].map(|j| (k, j)))
                            .unzip();
                        if pos.is_empty() {
                            None
                        } else {
                            let lm = latents_of(&mut g, &mates).map_err(at)?;
                            let phi_m = phi(&mut g, lm, &model.tau, &model.b, finetune, true).map_err(at)?;
                            let phi_a = g.select_rows(terms.phi, &pos)?;
                            let rows = pos.len() as f64;
                            let diff = g.sub(phi_a, phi_m)?;
                            let s = g.frobenius_sq(diff);
                            Some(g.scale(s, 1.0 / rows))
                        }
                    }
                };
                if let Some(p) = penalty {
                    penalty_seen = true;
                    penalty_value = g.value(p).item();
                    let w = g.scale(p, lambda_mmd);
                    total = g.add(total, w)?;
                }
            }

            let loss = g.value(total).item();
            if !loss.is_finite() {
                return Err(non_finite("stage2", epoch, step, format!("loss is {loss}"), &trace));
            }
            let grads = g.backward(total)?;
            update(&mut model.b, &mut st_b, &grads).map_err(at)?;
            update(&mut model.psi, &mut st_p, &grads).map_err(at)?;
            update(&mut model.head, &mut st_h, &grads).map_err(at)?;
            if finetune {
                update(&mut model.encoder, &mut st_e, &grads).map_err(at)?;
                update(&mut model.tau, &mut st_t, &grads).map_err(at)?;
            }
            log.add(&[loss, g.value(terms.recon).item(), g.value(terms.pred).item(), penalty_value]);
            step += 1;
        }
        let total = log.flush("stage2", epoch, &mut trace);
        if stop.observe(total) {
            log::debug!("stage two stopped early after epoch {epoch}");
            break;
        }
    }
    if lambda_mmd > 0.0 && cfg.method != Method::Naive && !penalty_seen {
        warnings.push(format!(
            "{} penalty never had cross-site support in any batch; it stayed zero",
            cfg.method
        ));
    }
    Ok(trace)
}

/// Mean squared distance between the codes of matched samples; zero when
/// nothing matched.
pub fn matched_code_gap(codes: &Tensor, partner: &[Option<usize>]) -> Result<f64> {
    let (a, b): (Vec<usize>, Vec<usize>) = partner.iter().enumerate().filter_map(|(i, p)| p.map(|j| (i, j))).unzip();
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(codes.select_rows(&a));
    let y = g.constant(codes.select_rows(&b));
    let v = mean_sq_error(&mut g, x, y)?;
    Ok(g.value(v).item())
}

/// A trained model and how it got there.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub model: ModelBundle,
    pub trace: Vec<TraceRow>,
    pub metrics: Option<MetricsReport>,
    pub config: TrainConfig,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl RunResult {
    /// Writes the trace as `epoch,term,value` CSV.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema(format!("{other:?}")),
        })?;
        w.write_record(["epoch", "term", "value"])?;
        for r in &self.trace {
            w.write_record([r.epoch.to_string(), r.term.clone(), format!("{:e}", r.value)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loss values of one term, one per epoch.
    pub fn term(&self, name: &str) -> Vec<f64> {
        self.trace.iter().filter(|r| r.term == name).map(|r| r.value).collect()
    }
}

/// Builds a fresh model and runs both stages for `cfg.method`.
pub fn run_method(train: &SiteDataset, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mut model = ModelBundle::build(cfg.dims(train.d()), cfg.seed)?;
    let mut warnings = Vec::new();
    let mut trace = train_stage1(&mut model, train, cfg)?;
    trace.extend(train_stage2(&mut model, train, cfg, &mut warnings)?);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(RunResult {
        model,
        trace,
        metrics: None,
        config: cfg.clone(),
        seed: cfg.seed,
        warnings,
    })
}

pub fn run_baseline(train: &SiteDataset, cfg: &TrainConfig) -> Result<RunResult> {
    if !cfg.method.is_baseline() {
        return Err(Error::Config(format!("'{}' is not a baseline method", cfg.method)));
    }
    run_method(train, cfg)
}

/// Trains and evaluates one seed on already loaded splits.
pub fn run_seed(splits: &DatasetSplits, cfg: &TrainConfig, eval: &EvalConfig) -> Result<RunResult> {
    let mut run = run_method(&splits.train, cfg)?;
    let eval = EvalConfig { seed: cfg.seed, ..*eval };
    run.metrics = Some(evaluate(&run.model, &splits.train, &splits.test, &eval)?);
    Ok(run)
}

/// Runs every seed (up to `jobs` at once; results do not depend on `jobs`)
/// and aggregates the test metrics.
pub fn run_experiment_on(
    splits: &DatasetSplits,
    seeds: &[u64],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    jobs: usize,
) -> Result<(AggregateReport, Vec<RunResult>)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let cfgs: Vec<TrainConfig> = seeds.iter().map(|&seed| TrainConfig { seed, ..cfg.clone() }).collect();
    let mut results: Vec<Option<Result<RunResult>>> = (0..seeds.len()).map(|_| None).collect();
    for (batch_cfgs, batch_out) in cfgs.chunks(jobs.max(1)).zip(results.chunks_mut(jobs.max(1))) {
        std::thread::scope(|s| {
            let handles: Vec<_> = batch_cfgs
                .iter()
                .map(|c| s.spawn(move || run_seed(splits, c, eval)))
                .collect();
            for (slot, h) in batch_out.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("training thread panicked"));
            }
        });
    }
    let runs = results.into_iter().map(|r| r.expect("every seed ran")).collect::<Result<Vec<_>>>()?;
    let reports = runs.iter().map(|r| r.metrics.expect("evaluated")).collect();
    let agg = AggregateReport::new(cfg.method.name(), &splits.name, seeds, reports)?;
    Ok((agg, runs))
}

/// Loads `dataset_dir` and runs [`run_experiment_on`].
pub fn run_experiment(
    dataset_dir: &Path,
    seeds: &[u64],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    jobs: usize,
) -> Result<(AggregateReport, Vec<RunResult>)> {
    if !dataset_dir.is_dir() {
        return Err(Error::io(
            dataset_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let splits = load_dataset_dir(dataset_dir, 0)?;
    run_experiment_on(&splits, seeds, cfg, eval, jobs)
}

/// Validation scores of one candidate configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub acc: f64,
    pub mmd: f64,
    pub adv: f64,
}

/// Width of the accuracy window around the best candidate (5 points).
pub const SELECTION_WINDOW: f64 = 0.05;

/// Among candidates within [`SELECTION_WINDOW`] of the best validation
/// accuracy, picks the lowest validation MMD, then the lowest adversary
/// score, then the first configuration in lexicographic JSON order.
pub fn hyperparam_select(candidates: &[(TrainConfig, ValidationScore)]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate configurations to select from".into()));
    }
    let best = candidates.iter().map(|(_, s)| s.acc).fold(f64::NEG_INFINITY, f64::max);
    let keys: Vec<String> = candidates
        .iter()
        .map(|(c, _)| serde_json::to_string(c))
        .collect::<std::result::Result<_, _>>()?;
    let chosen = (0..candidates.len())
        .filter(|&i| candidates[i].1.acc >= best - SELECTION_WINDOW - 1e-12)
        .min_by(|&a, &b| {
            let (sa, sb) = (candidates[a].1, candidates[b].1);
            sa.mmd
                .total_cmp(&sb.mmd)
                .then(sa.adv.total_cmp(&sb.adv))
                .then(keys[a].cmp(&keys[b]))
        })
        .expect("the best candidate is always inside the window");
    Ok(chosen)
}

/// Trains a candidate on the training split and scores it on validation.
pub fn validate_candidate(splits: &DatasetSplits, cfg: &TrainConfig, eval: &EvalConfig) -> Result<(RunResult, ValidationScore)> {
    let mut run = run_method(&splits.train, cfg)?;
    let eval = EvalConfig { seed: cfg.seed, ..*eval };
    let m = evaluate(&run.model, &splits.train, &splits.val, &eval)?;
    run.metrics = Some(m);
    Ok((
        run,
        ValidationScore {
            acc: m.acc,
            mmd: m.mmd.raw,
            adv: m.adv,
        },
    ))
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
