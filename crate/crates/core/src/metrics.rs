//! Evaluation measures: Δ_Eq, adversarial site prediction, test MMD, and
//! accuracy, plus embedding export and seed aggregation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamKey};
use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::losses::{mmd_multisite_value, KernelConfig};
use crate::nn::{owner, AdamConfig, AdamState, ModelBundle};
use crate::tensor::Tensor;

/// Default pair budget for Δ_Eq.
pub const PAIR_BUDGET: usize = 50_000;

/// `(z − min)/(max − min)`; a constant vector is reported as degenerate.
pub fn minmax_normalize(z: &[f64]) -> Result<Vec<f64>> {
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Contract(format!(
            "degenerate feature: min {lo} equals max {hi}, cannot min-max normalize"
        )));
    }
    Ok(z.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Column-wise min–max normalization. Constant columns become zeros.
pub fn minmax_columns(t: &Tensor) -> Tensor {
    let (r, c) = t.shape();
    let mut out = Tensor::zeros(r, c);
    for j in 0..c {
        let col: Vec<f64> = (0..r).map(|i| t.get(i, j)).collect();
        match minmax_normalize(&col) {
            Ok(v) => v.into_iter().enumerate().for_each(|(i, x)| out.set(i, j, x)),
            Err(_) => log::debug!("column {j} is constant; substituting zeros"),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaEq {
    /// Mean over evaluated pairs.
    pub mean: f64,
    /// Sum over evaluated pairs.
    pub sum: f64,
    pub pairs: usize,
}

/// Covariate-weighted spread of τ outputs: over sample pairs, the mean of
/// |cᵢ − cⱼ|·‖τᵢ − τⱼ‖² on per-coordinate min–max normalized, flattened
/// τ rows. Samples are ordered by id first, so the result does not depend
/// on row order. All pairs are used when there are at most `budget`;
/// otherwise `budget` pairs are drawn uniformly with the given seed.
pub fn delta_eq(ids: &[usize], covariates: &[f64], tau_flat: &Tensor, budget: usize, seed: u64) -> Result<DeltaEq> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::Contract(format!("Δ_Eq needs at least 2 samples, got {n}")));
    }
    if covariates.len() != n || tau_flat.rows() != n {
        return Err(Error::dim("delta_eq", n, format!("{}/{}", covariates.len(), tau_flat.rows())));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ids[i]);
    let norm = minmax_columns(&tau_flat.select_rows(&order));
    let cov: Vec<f64> = order.iter().map(|&i| covariates[i]).collect();
    let term = |i: usize, j: usize| {
        let d: f64 = norm
            .row_slice(i)
            .iter()
            .zip(norm.row_slice(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (cov[i] - cov[j]).abs() * d
    };
    let all = n * (n - 1) / 2;
    let mut sum = 0.0;
    let pairs = if all <= budget {
        for i in 0..n {
            for j in i + 1..n {
                sum += term(i, j);
            }
        }
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..budget {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            sum += term(i, j);
        }
        budget
    };
    if pairs == 0 {
        return Err(Error::Config("Δ_Eq pair budget must be positive".into()));
    }
    Ok(DeltaEq {
        mean: sum / pairs as f64,
        sum,
        pairs,
    })
}

/// Area under the ROC curve of `scores` for the `positive` flags, with tied
/// scores receiving averaged ranks.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::dim("roc_auc", scores.len(), positive.len()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract("ROC-AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut e = k;
        while e + 1 < order.len() && scores[order[e + 1]] == scores[order[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &i in &order[k..=e] {
            if positive[i] {
                rank_sum += avg;
            }
        }
        k = e + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Settings of the site adversary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            hidden: 64,
            layers: 3,
            epochs: 150,
            batch: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Fully connected classifier with batch normalization after every hidden
/// linear layer.
struct Adversary {
    /// Per hidden layer: W, b, γ, β; then the output W, b.
    params: Vec<Tensor>,
    running: Vec<(Vec<f64>, Vec<f64>)>,
    layers: usize,
}

impl Adversary {
    fn new(input: usize, classes: usize, cfg: &AdversaryConfig, rng: &mut ChaCha8Rng) -> Adversary {
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-lim..=lim)).collect();
            Tensor::from_vec(fan_in, fan_out, data).expect("shape")
        };
        let mut width = input;
        for _ in 0..cfg.layers {
            params.push(glorot(width, cfg.hidden));
            params.push(Tensor::zeros(1, cfg.hidden));
            params.push(Tensor::filled(1, cfg.hidden, 1.0));
            params.push(Tensor::zeros(1, cfg.hidden));
            running.push((vec![0.0; cfg.hidden], vec![1.0; cfg.hidden]));
            width = cfg.hidden;
        }
        params.push(glorot(width, classes));
        params.push(Tensor::zeros(1, classes));
        Adversary {
            params,
            running,
            layers: cfg.layers,
        }
    }

    fn key(i: usize) -> ParamKey {
        ParamKey {
            owner: owner::ADVERSARY,
            index: i as u32,
        }
    }

    fn train_step(&mut self, x: &Tensor, y: &[usize], adam: &mut AdamState) -> Result<f64> {
        let mut g = Graph::new();
        let p: Vec<_> = self.params.iter().enumerate().map(|(i, t)| g.param(Self::key(i), t)).collect();
        let mut h = g.constant(x.clone());
        for l in 0..self.layers {
            let z = g.matmul(h, p[4 * l])?;
            let z = g.add_row(z, p[4 * l + 1])?;
            let (bn, mean, var) = g.batch_norm(z, p[4 * l + 2], p[4 * l + 3])?;
            let (rm, rv) = &mut self.running[l];
            let b = x.rows() as f64;
            for k in 0..rm.len() {
                rm[k] = (1.0 - BN_MOMENTUM) * rm[k] + BN_MOMENTUM * mean[k];
                // running variance tracks the unbiased batch estimate
                rv[k] = (1.0 - BN_MOMENTUM) * rv[k] + BN_MOMENTUM * var[k] * b / (b - 1.0);
            }
            h = g.relu(bn);
        }
        let o = 4 * self.layers;
        let z = g.matmul(h, p[o])?;
        let logits = g.add_row(z, p[o + 1])?;
        let loss = g.softmax_cross_entropy(logits, y)?;
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor> = (0..self.params.len())
            .map(|i| grads.param(Self::key(i)).cloned().expect("every parameter is used"))
            .collect();
        adam.update(&mut self.params, &gs)?;
        Ok(g.value(loss).item())
    }

    /// Class probabilities with batch norm in inference mode.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in 0..self.layers {
            let mut z = h.matmul(&self.params[4 * l])?;
            let (rm, rv) = &self.running[l];
            let (b, gam, bet) = (&self.params[4 * l + 1], &self.params[4 * l + 2], &self.params[4 * l + 3]);
            for r in 0..z.rows() {
                for (k, v) in z.row_slice_mut(r).iter_mut().enumerate() {
                    let pre = *v + b.data()[k];
                    let bn = (pre - rm[k]) / (rv[k] + BN_EPS).sqrt() * gam.data()[k] + bet.data()[k];
                    *v = bn.max(0.0);
                }
            }
            h = z;
        }
        let o = 4 * self.layers;
        let mut logits = h.matmul(&self.params[o])?;
        for r in 0..logits.rows() {
            let row = logits.row_slice_mut(r);
            for (v, b) in row.iter_mut().zip(self.params[o + 1].data()) {
                *v += b;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - max).exp() / z);
        }
        Ok(logits)
    }
}

/// How the adversary's success is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvKind {
    Accuracy,
    /// Macro one-vs-rest ROC-AUC, for heavily skewed site distributions.
    RocAuc,
}

/// Trains a fresh site classifier on the training codes and scores it on
/// the test codes.
pub fn adv_metric(
    train_codes: &Tensor,
    train_sites: &[usize],
    test_codes: &Tensor,
    test_sites: &[usize],
    kind: AdvKind,
    cfg: &AdversaryConfig,
) -> Result<f64> {
    if train_codes.rows() != train_sites.len() || test_codes.rows() != test_sites.len() {
        return Err(Error::dim(
            "adv_metric",
            format!("{}/{}", train_codes.rows(), test_codes.rows()),
            format!("{}/{}", train_sites.len(), test_sites.len()),
        ));
    }
    if test_sites.is_empty() {
        return Err(Error::Contract("adversary evaluation on an empty test set".into()));
    }
    let classes = train_sites.iter().chain(test_sites).max().map_or(0, |m| m + 1);
    let present = {
        let mut seen = vec![false; classes];
        train_sites.iter().for_each(|&s| seen[s] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        return Err(Error::Contract("adversary needs at least 2 sites in the training codes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adv = Adversary::new(train_codes.cols(), classes, cfg, &mut rng);
    let mut adam = AdamState::new(&adv.params, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..train_sites.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let x = train_codes.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_sites[i]).collect();
            adv.train_step(&x, &y, &mut adam)?;
        }
    }
    let probs = adv.predict(test_codes)?;
    match kind {
        AdvKind::Accuracy => {
            let correct = (0..probs.rows())
                .filter(|&r| {
                    let row = probs.row_slice(r);
                    let arg = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                    arg == test_sites[r]
                })
                .count();
            Ok(correct as f64 / probs.rows() as f64)
        }
        AdvKind::RocAuc => {
            let mut aucs = Vec::new();
            for k in 0..classes {
                let pos: Vec<bool> = test_sites.iter().map(|&s| s == k).collect();
                if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
                    continue;
                }
                let scores: Vec<f64> = (0..probs.rows()).map(|r| probs.get(r, k)).collect();
                aucs.push(roc_auc(&scores, &pos)?);
                if classes == 2 {
                    break;
                }
            }
            if aucs.is_empty() {
                return Err(Error::Contract("ROC-AUC needs at least two sites in the test set".into()));
            }
            Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdValue {
    pub raw: f64,
    pub x100: f64,
}

/// Multi-site MMD of min–max normalized test codes (normalization pooled
/// over all sites).
pub fn mmd_test_metric(codes: &Tensor, sites: &[usize], cfg: &KernelConfig) -> Result<MmdValue> {
    if codes.rows() != sites.len() {
        return Err(Error::dim("mmd_test_metric", codes.rows(), sites.len()));
    }
    let norm = minmax_columns(codes);
    let n_sites = sites.iter().max().map_or(0, |m| m + 1);
    let mut by_site = Vec::new();
    for s in 0..n_sites {
        let idx: Vec<usize> = (0..sites.len()).filter(|&i| sites[i] == s).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Contract(format!("site {s} has only {} test sample", idx.len())));
        }
        by_site.push(norm.select_rows(&idx));
    }
    if by_site.len() < 2 {
        return Err(Error::Contract("test MMD needs at least 2 sites with 2 samples each".into()));
    }
    let raw = mmd_multisite_value(&by_site, cfg)?;
    Ok(MmdValue { raw, x100: 100.0 * raw })
}

/// Head outputs are regressed onto {0, 1}; a prediction is 1 when the
/// output exceeds 0.5.
pub fn acc_metric(outputs: &[f64], labels: &[f64]) -> Result<f64> {
    if outputs.len() != labels.len() {
        return Err(Error::dim("acc_metric", labels.len(), outputs.len()));
    }
    if outputs.is_empty() {
        return Err(Error::Contract("accuracy of an empty test set".into()));
    }
    let correct = outputs
        .iter()
        .zip(labels)
        .filter(|(o, y)| (**o > 0.5) == (**y > 0.5))
        .count();
    Ok(correct as f64 / outputs.len() as f64)
}

/// Model outputs for every sample of a split.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub latents: Tensor,
    pub tau: Tensor,
    pub phi: Tensor,
    pub outputs: Vec<f64>,
}

pub fn embed(model: &ModelBundle, ds: &SiteDataset) -> Result<Embeddings> {
    if ds.d() != model.dims.d {
        return Err(Error::dim("model input width", model.dims.d, ds.d()));
    }
    let latents = model.encode(&ds.features)?;
    let tau = model.tau_rows(&latents)?;
    let phi = model.phi_rows(&latents)?;
    let outputs = model.predict_raw(&phi)?.into_data();
    Ok(Embeddings {
        latents,
        tau,
        phi,
        outputs,
    })
}

/// Writes `id, site, covariate, label, phi_*, tau_*` rows.
pub fn export_embeddings(path: &Path, ds: &SiteDataset, emb: &Embeddings) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{other:?}")),
    })?;
    let mut header = vec!["id".to_string(), "site".into(), "covariate".into(), "label".into()];
    header.extend((0..emb.phi.cols()).map(|k| format!("phi_{k}")));
    header.extend((0..emb.tau.cols()).map(|k| format!("tau_{k}")));
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = vec![
            ds.ids[i].to_string(),
            ds.site_names[ds.sites[i]].clone(),
            format!("{}", ds.raw_covariates[i]),
            format!("{}", ds.labels[i]),
        ];
        rec.extend(emb.phi.row_slice(i).iter().map(|v| format!("{v:e}")));
        rec.extend(emb.tau.row_slice(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Options of a full evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub pair_budget: usize,
    pub adv_kind: AdvKind,
    pub adversary: AdversaryConfig,
    pub kernel: KernelConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pair_budget: PAIR_BUDGET,
            adv_kind: AdvKind::Accuracy,
            adversary: AdversaryConfig::default(),
            kernel: KernelConfig::default(),
            seed: 0,
        }
    }
}

/// Metrics of one trained model on one held-out split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub delta_eq: f64,
    pub delta_eq_sum: f64,
    pub delta_eq_pairs: usize,
    pub adv: f64,
    pub adv_kind: AdvKind,
    pub mmd: MmdValue,
    pub acc: f64,
}

/// Computes all four measures. The adversary trains on `train` codes; every
/// score is taken on `test`.
pub fn evaluate(model: &ModelBundle, train: &SiteDataset, test: &SiteDataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    let tr = embed(model, train)?;
    let te = embed(model, test)?;
    let de = delta_eq(&test.ids, &test.covariates, &te.tau, cfg.pair_budget, cfg.seed)?;
    let adversary = AdversaryConfig {
        seed: cfg.seed,
        ..cfg.adversary
    };
    let adv = adv_metric(&tr.phi, &train.sites, &te.phi, &test.sites, cfg.adv_kind, &adversary)?;
    let mmd = mmd_test_metric(&te.phi, &test.sites, &cfg.kernel)?;
    let acc = acc_metric(&te.outputs, &test.labels)?;
    Ok(MetricsReport {
        delta_eq: de.mean,
        delta_eq_sum: de.sum,
        delta_eq_pairs: de.pairs,
        adv,
        adv_kind: cfg.adv_kind,
        mmd,
        acc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvStat {
    pub mean: f64,
    pub std: f64,
    pub kind: AdvKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdStat {
    pub raw: Stat,
    pub x100: Stat,
}

/// Seed-wise summary written as the metrics JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: String,
    pub dataset: String,
    pub seed: Vec<u64>,
    pub delta_eq: Stat,
    pub delta_eq_sum: Stat,
    pub adv: AdvStat,
    pub mmd: MmdStat,
    pub acc: Stat,
    pub runs: Vec<MetricsReport>,
}

impl AggregateReport {
    pub fn new(method: &str, dataset: &str, seeds: &[u64], runs: Vec<MetricsReport>) -> Result<AggregateReport> {
        if runs.is_empty() || runs.len() != seeds.len() {
            return Err(Error::Contract(format!(
                "aggregating {} runs for {} seeds",
                runs.len(),
                seeds.len()
            )));
        }
        let col = |f: fn(&MetricsReport) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        let adv = col(|r| r.adv);
        Ok(AggregateReport {
            method: method.into(),
            dataset: dataset.into(),
            seed: seeds.to_vec(),
            delta_eq: col(|r| r.delta_eq),
            delta_eq_sum: col(|r| r.delta_eq_sum),
            adv: AdvStat {
                mean: adv.mean,
                std: adv.std,
                kind: runs[0].adv_kind,
            },
            mmd: MmdStat {
                raw: col(|r| r.mmd.raw),
                x100: col(|r| r.mmd.x100),
            },
            acc: col(|r| r.acc),
            runs,
        })
    }
}
