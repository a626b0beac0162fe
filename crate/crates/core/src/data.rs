//! Tabular ingestion, train-only preprocessing, stratified splits, and a
//! synthetic generator whose covariate acts on the latent by a known
//! rotation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lie_group::{generator, expm};
use crate::tensor::Tensor;

/// Column roles of a tabular CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub label_col: String,
    pub site_col: String,
    pub covariate_col: String,
    pub positive_label: String,
    #[serde(default)]
    pub categorical_cols: Vec<String>,
    /// Rows containing this cell value anywhere are dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_token: Option<String>,
    /// Fixed bounds for covariate normalization instead of the train min/max.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_range: Option<[f64; 2]>,
    /// Keep the covariate out of the feature matrix.
    #[serde(default)]
    pub drop_covariate_feature: bool,
}

impl Schema {
    pub fn read(path: &Path) -> Result<Schema> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Schema = serde_json::from_str(&text)?;
        if let Some([lo, hi]) = schema.covariate_range {
            if !(hi > lo) {
                return Err(Error::Schema(format!("covariate_range [{lo}, {hi}] is empty")));
            }
        }
        Ok(schema)
    }
}

/// A CSV parsed according to a schema but not yet encoded.
#[derive(Clone, Debug)]
pub struct RawTable {
    pub path: PathBuf,
    pub schema: Schema,
    pub headers: Vec<String>,
    /// Trimmed cells of every kept row.
    pub rows: Vec<Vec<String>>,
    /// 1-based file line of every kept row.
    pub lines: Vec<usize>,
    /// Rows skipped for containing the missing token.
    pub dropped: usize,
}

impl RawTable {
    pub fn read(path: &Path, schema: &Schema) -> Result<RawTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::Parse {
                    path: path.into(),
                    line: 1,
                    msg: format!("{other:?}"),
                },
            })?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let required = [&schema.label_col, &schema.site_col, &schema.covariate_col]
            .into_iter()
            .chain(&schema.categorical_cols);
        for col in required {
            if !headers.contains(col) {
                return Err(Error::Schema(format!("column '{col}' missing from {}", path.display())));
            }
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        let mut dropped = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.into(),
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if let Some(tok) = &schema.missing_token {
                if rec.iter().any(|c| c == tok) {
                    dropped += 1;
                    continue;
                }
            }
            rows.push(rec.iter().map(str::to_owned).collect());
            lines.push(line);
        }
        Ok(RawTable {
            path: path.into(),
            schema: schema.clone(),
            headers,
            rows,
            lines,
            dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn col(&self, name: &str) -> usize {
        self.headers.iter().position(|h| h == name).expect("checked on read")
    }

    fn number(&self, row: usize, col: usize) -> Result<f64> {
        let cell = &self.rows[row][col];
        cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            line: self.lines[row],
            msg: format!("column '{}': '{cell}' is not a number", self.headers[col]),
        })
    }

    pub fn labels(&self) -> Vec<f64> {
        let c = self.col(&self.schema.label_col);
        self.rows
            .iter()
            .map(|r| if r[c] == self.schema.positive_label { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn site_values(&self) -> Vec<&str> {
        let c = self.col(&self.schema.site_col);
        self.rows.iter().map(|r| r[c].as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum ColumnCoding {
    Continuous { mean: f64, std: f64 },
    Categorical { levels: Vec<String> },
}

/// Encoding fitted on training rows only: z-scored continuous columns,
/// one-hot categoricals (unseen levels encode as all zeros), site ids and
/// covariate bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    columns: Vec<(String, ColumnCoding)>,
    sites: Vec<String>,
    covariate_range: [f64; 2],
}

impl Preprocessor {
    pub fn fit(table: &RawTable, rows: &[usize]) -> Result<Preprocessor> {
        if rows.is_empty() {
            return Err(Error::Contract("cannot fit preprocessing on zero rows".into()));
        }
        let s = &table.schema;
        let mut columns = Vec::new();
        for (c, name) in table.headers.iter().enumerate() {
            if name == &s.label_col || name == &s.site_col {
                continue;
            }
            if name == &s.covariate_col && s.drop_covariate_feature {
                continue;
            }
            let coding = if s.categorical_cols.contains(name) {
                let levels: BTreeSet<&str> = rows.iter().map(|&r| table.rows[r][c].as_str()).collect();
                ColumnCoding::Categorical {
                    levels: levels.into_iter().map(str::to_owned).collect(),
                }
            } else {
                let vals = rows.iter().map(|&r| table.number(r, c)).collect::<Result<Vec<_>>>()?;
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                ColumnCoding::Continuous { mean, std }
            };
            columns.push((name.clone(), coding));
        }
        let site_c = table.col(&s.site_col);
        let sites: BTreeSet<&str> = rows.iter().map(|&r| table.rows[r][site_c].as_str()).collect();
        let covariate_range = match s.covariate_range {
            Some(r) => r,
            None => {
                let c = table.col(&s.covariate_col);
                let vals = rows.iter().map(|&r| table.number(r, c)).collect::<Result<Vec<_>>>()?;
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if !(hi > lo) {
                    return Err(Error::Schema(format!(
                        "covariate '{}' is constant on the training rows",
                        s.covariate_col
                    )));
                }
                [lo, hi]
            }
        };
        Ok(Preprocessor {
            columns,
            sites: sites.into_iter().map(str::to_owned).collect(),
            covariate_range,
        })
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.columns
            .iter()
            .flat_map(|(name, coding)| match coding {
                ColumnCoding::Continuous { .. } => vec![name.clone()],
                ColumnCoding::Categorical { levels } => levels.iter().map(|l| format!("{name}={l}")).collect(),
            })
            .collect()
    }

    pub fn site_names(&self) -> &[String] {
        &self.sites
    }

    pub fn covariate_range(&self) -> [f64; 2] {
        self.covariate_range
    }

    pub fn transform(&self, table: &RawTable, rows: &[usize]) -> Result<SiteDataset> {
        let s = &table.schema;
        let names = self.feature_names();
        let d = names.len();
        let col_idx: Vec<usize> = self.columns.iter().map(|(n, _)| table.col(n)).collect();
        let site_c = table.col(&s.site_col);
        let cov_c = table.col(&s.covariate_col);
        let label_c = table.col(&s.label_col);
        let [lo, hi] = self.covariate_range;

        let mut features = Vec::with_capacity(rows.len() * d);
        let mut ds = SiteDataset {
            features: Tensor::zeros(0, d),
            labels: Vec::with_capacity(rows.len()),
            covariates: Vec::with_capacity(rows.len()),
            raw_covariates: Vec::with_capacity(rows.len()),
            sites: Vec::with_capacity(rows.len()),
            ids: rows.to_vec(),
            site_names: self.sites.clone(),
            feature_names: names,
        };
        for &r in rows {
            for ((_, coding), &c) in self.columns.iter().zip(&col_idx) {
                match coding {
                    ColumnCoding::Continuous { mean, std } => features.push((table.number(r, c)? - mean) / std),
                    ColumnCoding::Categorical { levels } => {
                        let cell = &table.rows[r][c];
                        features.extend(levels.iter().map(|l| if l == cell { 1.0 } else { 0.0 }));
                    }
                }
            }
            let site = &table.rows[r][site_c];
            let id = self.sites.iter().position(|v| v == site).ok_or_else(|| {
                Error::Schema(format!(
                    "{}:{}: site '{site}' not present in the training rows",
                    table.path.display(),
                    table.lines[r]
                ))
            })?;
            let raw = table.number(r, cov_c)?;
            ds.sites.push(id);
            ds.raw_covariates.push(raw);
            ds.covariates.push(((raw - lo) / (hi - lo)).clamp(0.0, 1.0));
            ds.labels.push(if table.rows[r][label_c] == s.positive_label { 1.0 } else { 0.0 });
        }
        ds.features = Tensor::from_vec(rows.len(), d, features)?;
        Ok(ds)
    }
}

/// Encoded samples: features, binary label, normalized covariate, site id.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteDataset {
    pub features: Tensor,
    pub labels: Vec<f64>,
    /// Covariate on the normalized [0, 1] scale.
    pub covariates: Vec<f64>,
    pub raw_covariates: Vec<f64>,
    pub sites: Vec<usize>,
    /// Stable sample ids (row positions in the source file).
    pub ids: Vec<usize>,
    pub site_names: Vec<String>,
    pub feature_names: Vec<String>,
}

impl SiteDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn n_sites(&self) -> usize {
        self.site_names.len()
    }

    pub fn subset(&self, idx: &[usize]) -> SiteDataset {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        SiteDataset {
            features: self.features.select_rows(idx),
            labels: pick(&self.labels),
            covariates: pick(&self.covariates),
            raw_covariates: pick(&self.raw_covariates),
            sites: idx.iter().map(|&i| self.sites[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            site_names: self.site_names.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Row indices of every site, in site-id order.
    pub fn indices_by_site(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_sites()];
        for (i, &s) in self.sites.iter().enumerate() {
            out[s].push(i);
        }
        out
    }
}

/// Reads and encodes a whole file, fitting preprocessing on all its rows.
pub fn load_tabular(path: &Path, schema: &Schema) -> Result<SiteDataset> {
    let table = RawTable::read(path, schema)?;
    let rows: Vec<usize> = (0..table.len()).collect();
    Preprocessor::fit(&table, &rows)?.transform(&table, &rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec { train, val, test, seed }
    }
}

/// Index sets of a three-way split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: every (label, site) cell is shuffled with the seed and
/// divided by the fractions, so each part keeps the cell proportions.
pub fn make_splits(labels: &[f64], sites: &[usize], spec: &SplitSpec) -> Result<SplitIndices> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fr:?} must lie in [0,1] and sum to 1")));
    }
    if labels.len() != sites.len() {
        return Err(Error::dim("make_splits", labels.len(), sites.len()));
    }
    if labels.is_empty() {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    let mut cells: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (i, (&y, &s)) in labels.iter().zip(sites).enumerate() {
        cells.entry((y.to_bits(), s)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut idx) in cells {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (spec.train * n).round() as usize;
        let n_val = (((spec.train + spec.val) * n).round() as usize).saturating_sub(n_train);
        let (a, rest) = idx.split_at(n_train.min(idx.len()));
        let (b, c) = rest.split_at(n_val.min(rest.len()));
        out.train.extend_from_slice(a);
        out.val.extend_from_slice(b);
        out.test.extend_from_slice(c);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Train/validation/test partitions with a shared encoding.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub name: String,
    pub train: SiteDataset,
    pub val: SiteDataset,
    pub test: SiteDataset,
    pub preprocessor: Preprocessor,
    pub schema: Schema,
    /// Rows removed for missing values across all files.
    pub dropped: usize,
}

/// Loads `dir/{schema.json, train.csv[, test.csv]}`. With a test file the
/// training file is split 85/15 into train/validation; without one it is
/// split 70/15/15. Both splits are stratified on (label, site) and all
/// preprocessing is fitted on the training part alone.
pub fn load_dataset_dir(dir: &Path, seed: u64) -> Result<DatasetSplits> {
    let schema = Schema::read(&dir.join("schema.json"))?;
    let train_table = RawTable::read(&dir.join("train.csv"), &schema)?;
    let test_path = dir.join("test.csv");
    let test_table = if test_path.exists() {
        Some(RawTable::read(&test_path, &schema)?)
    } else {
        None
    };
    let labels = train_table.labels();
    let site_vals = train_table.site_values();
    let distinct: BTreeSet<&str> = site_vals.iter().copied().collect();
    let sites: Vec<usize> = site_vals
        .iter()
        .map(|v| distinct.iter().position(|d| d == v).expect("present"))
        .collect();
    let spec = if test_table.is_some() {
        SplitSpec::new(0.85, 0.15, 0.0, seed)
    } else {
        SplitSpec::new(0.70, 0.15, 0.15, seed)
    };
    let split = make_splits(&labels, &sites, &spec)?;
    let pre = Preprocessor::fit(&train_table, &split.train)?;
    let train = pre.transform(&train_table, &split.train)?;
    let val = pre.transform(&train_table, &split.val)?;
    let (test, dropped) = match &test_table {
        Some(t) => {
            let all: Vec<usize> = (0..t.len()).collect();
            (pre.transform(t, &all)?, train_table.dropped + t.dropped)
        }
        None => (pre.transform(&train_table, &split.test)?, train_table.dropped),
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(DatasetSplits {
        name,
        train,
        val,
        test,
        preprocessor: pre,
        schema,
        dropped,
    })
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Latent sphere ambient dimension.
    pub n: usize,
    /// Observed feature width.
    pub d: usize,
    pub kappa: f64,
    pub n_sites: usize,
    /// Norm of each site's additive feature shift.
    pub site_bias: f64,
    pub noise: f64,
    pub label_margin: f64,
    /// Covariate support overlap between neighbouring sites: 1 gives every
    /// site the full [0, 1] range, 0 gives disjoint consecutive intervals.
    pub overlap: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 1200,
            n: 4,
            d: 12,
            kappa: 1.0,
            n_sites: 2,
            site_bias: 0.5,
            noise: 0.05,
            label_margin: 0.0,
            overlap: 1.0,
            flip_prob: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("synthetic config field '{field}' {why}")));
        if self.n_samples < 2 {
            return bad("n_samples", "must be at least 2");
        }
        if self.n < 2 {
            return bad("n", "must be at least 2");
        }
        if self.d == 0 {
            return bad("d", "must be positive");
        }
        if self.n_sites == 0 {
            return bad("n_sites", "must be positive");
        }
        for (f, v) in [
            ("kappa", self.kappa),
            ("site_bias", self.site_bias),
            ("noise", self.noise),
            ("label_margin", self.label_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(f, "must be finite and non-negative");
            }
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// Covariate interval of site `s`.
    pub fn site_range(&self, s: usize) -> (f64, f64) {
        let k = self.n_sites as f64;
        let o = self.overlap;
        let lo = (s as f64 / k) * (1.0 - o);
        (lo, lo + 1.0 / k + o * (1.0 - 1.0 / k))
    }
}

/// Hidden quantities of a synthetic draw.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    /// Base points z₀, one unit row per sample.
    pub base: Tensor,
    /// exp(κ c A₀) z₀, one row per sample.
    pub latents: Tensor,
    /// `d×n` mixing matrix.
    pub mixing: Tensor,
    /// Label direction.
    pub label_dir: Vec<f64>,
    /// `n_sites×d` additive shifts.
    pub site_shift: Tensor,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub config: SynthConfig,
    pub dataset: SiteDataset,
    pub truth: SynthTruth,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a dataset whose latent for covariate c is exp(κ c A₀) z₀, with
/// features `W·latent + site shift + noise` and labels from the sign of
/// ⟨w, z₀⟩ against the margin.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let SynthConfig { n, d, .. } = *cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mixing = Tensor::from_vec(
        d,
        n,
        (0..d * n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>(),
    )?
    .scale(1.0 / (n as f64).sqrt());
    let label_dir = unit_gaussian(&mut rng, n);
    let mut site_shift = Tensor::zeros(cfg.n_sites, d);
    for s in 0..cfg.n_sites {
        let dir = unit_gaussian(&mut rng, d);
        site_shift
            .row_slice_mut(s)
            .iter_mut()
            .zip(dir)
            .for_each(|(a, b)| *a = cfg.site_bias * b);
    }

    let a0 = generator(n);
    let total = cfg.n_samples;
    let mut base = Tensor::zeros(total, n);
    let mut latents = Tensor::zeros(total, n);
    let mut features = Tensor::zeros(total, d);
    let mut labels = Vec::with_capacity(total);
    let mut covariates = Vec::with_capacity(total);
    let mut sites = Vec::with_capacity(total);
    for i in 0..total {
        let s = i % cfg.n_sites;
        let (lo, hi) = cfg.site_range(s);
        let c = lo + (hi - lo) * rng.random::<f64>();
        let z0 = unit_gaussian(&mut rng, n);
        let rot = expm(&a0.scale(cfg.kappa * c));
        let z = Tensor::from_vec(n, 1, z0.clone())?;
        let lat = rot.matmul(&z)?;
        let x = mixing.matmul(&lat)?;
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.set(i, j, x.data()[j] + site_shift.get(s, j) + cfg.noise * noise);
        }
        let score: f64 = z0.iter().zip(&label_dir).map(|(a, b)| a * b).sum();
        let mut y = score > cfg.label_margin;
        if rng.random::<f64>() < cfg.flip_prob {
            y = !y;
        }
        base.row_slice_mut(i).copy_from_slice(&z0);
        latents.row_slice_mut(i).copy_from_slice(lat.data());
        labels.push(if y { 1.0 } else { 0.0 });
        covariates.push(c);
        sites.push(s);
    }
    let dataset = SiteDataset {
        features,
        labels,
        raw_covariates: covariates.clone(),
        covariates,
        sites,
        ids: (0..total).collect(),
        site_names: (0..cfg.n_sites).map(|s| s.to_string()).collect(),
        feature_names: (0..d).map(|j| format!("x{j}")).collect(),
    };
    Ok(SyntheticData {
        config: cfg.clone(),
        dataset,
        truth: SynthTruth {
            base,
            latents,
            mixing,
            label_dir,
            site_shift,
        },
    })
}

fn digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Contents of the generator sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub seed: u64,
    pub kappa: f64,
    pub mixing_sha256: String,
    pub label_dir_sha256: String,
    pub config: SynthConfig,
}

impl SyntheticData {
    pub fn schema() -> Schema {
        Schema {
            label_col: "label".into(),
            site_col: "site".into(),
            covariate_col: "covariate".into(),
            positive_label: "1".into(),
            categorical_cols: Vec::new(),
            missing_token: None,
            covariate_range: Some([0.0, 1.0]),
            drop_covariate_feature: false,
        }
    }

    pub fn sidecar(&self) -> SynthSidecar {
        SynthSidecar {
            seed: self.config.seed,
            kappa: self.config.kappa,
            mixing_sha256: digest(self.truth.mixing.data()),
            label_dir_sha256: digest(&self.truth.label_dir),
            config: self.config.clone(),
        }
    }

    /// Writes `train.csv`, `schema.json` and `truth.json` into `dir`.
    /// Returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("train.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&csv_path, io),
            other => Error::Schema(format!("{other:?}")),
        })?;
        let ds = &self.dataset;
        let mut header: Vec<String> = ds.feature_names.clone();
        header.extend(["covariate", "site", "label"].map(String::from));
        w.write_record(&header)?;
        for i in 0..ds.len() {
            let mut rec: Vec<String> = ds.features.row_slice(i).iter().map(|v| format!("{v:e}")).collect();
            rec.push(format!("{:e}", ds.covariates[i]));
            rec.push(ds.sites[i].to_string());
            rec.push((ds.labels[i] as u8).to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let write_json = |name: &str, text: String| -> Result<PathBuf> {
            let p = dir.join(name);
            fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
            Ok(p)
        };
        let schema = write_json("schema.json", serde_json::to_string_pretty(&Self::schema())?)?;
        let truth = write_json("truth.json", serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(vec![csv_path, schema, truth])
    }
}
