//! Synthetic multi-domain classification data with a controllable spurious
//! cue, plus splits and the grid batch sampler.
//!
//! Every (category, domain) cell draws from the same latent recipe: a
//! category *signal* template the classifier should rely on, and a domain
//! *style* template plus a category-specific *nuisance* offset that it should
//! not. The nuisance offset is gated by a per-domain Bernoulli rate `rho`:
//! where `rho` is high, category identity leaks into the style coordinates
//! and a lazy model can classify from them; where `rho` is zero the leak
//! vanishes, so models that learned the shortcut fall over. A fixed random
//! mixing matrix projects the latent vector to the observed space so nothing
//! is axis-aligned.
//!
//! Determinism: everything derives from `spec.seed` through labeled child
//! streams (`templates/signal/<y>`, `samples/<cell>/<n>`, ...). Within one
//! sample the draw order is: signal noise coordinates, style noise
//! coordinates, then the gate. Regenerating with the same spec is
//! byte-identical, and samples are emitted in `(category, domain, index)`
//! order.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::rng::Stream;
use crate::{Error, Result};

/// Per-domain nuisance gate rate: a single shared scalar or one rate per
/// domain. Serializes back to whichever form it was given in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum RhoSpec {
    Shared(f64),
    PerDomain(Vec<f64>),
}

impl Default for RhoSpec {
    fn default() -> Self {
        RhoSpec::Shared(0.9)
    }
}

impl RhoSpec {
    /// Expand to one rate per domain, validating range and length.
    pub fn resolve(&self, domains: usize) -> Result<Vec<f64>> {
        let rates = match self {
            RhoSpec::Shared(r) => vec![*r; domains],
            RhoSpec::PerDomain(v) => {
                if v.len() != domains {
                    return Err(Error::Config(format!(
                        "rho has {} entries but the spec declares {domains} domains",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        for (d, r) in rates.iter().enumerate() {
            if !(r.is_finite() && (0.0..=1.0).contains(r)) {
                return Err(Error::Config(format!("rho for domain {d} must lie in [0, 1], got {r}")));
            }
        }
        Ok(rates)
    }
}

/// Everything that defines a dataset. Two specs that compare equal generate
/// byte-identical data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_categories")]
    pub categories: usize,
    #[serde(default = "default_domains")]
    pub domains: usize,
    /// Latent dimension of the category signal.
    #[serde(default = "default_latent_dim")]
    pub signal_dim: usize,
    /// Latent dimension of the style/nuisance coordinates.
    #[serde(default = "default_latent_dim")]
    pub nuisance_dim: usize,
    /// Observed dimension after mixing.
    #[serde(default = "default_observed_dim")]
    pub observed_dim: usize,
    /// Standard deviation of the additive latent noise.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Per-domain rate at which the category nuisance leaks into the style
    /// coordinates.
    #[serde(default)]
    pub rho: RhoSpec,
    #[serde(default = "default_samples_per_cell")]
    pub samples_per_cell: usize,
    #[serde(default)]
    pub seed: u64,
    /// Norm the category signal templates are scaled to.
    #[serde(default = "default_template_norm")]
    pub signal_norm: f64,
    /// Norm of the per-category nuisance offsets.
    #[serde(default = "default_template_norm")]
    pub nuisance_norm: f64,
    /// Norm of the per-domain style templates.
    #[serde(default = "default_template_norm")]
    pub domain_norm: f64,
}

fn default_categories() -> usize {
    5
}

fn default_domains() -> usize {
    4
}

fn default_latent_dim() -> usize {
    8
}

fn default_observed_dim() -> usize {
    32
}

fn default_noise_std() -> f64 {
    0.5
}

fn default_samples_per_cell() -> usize {
    200
}

fn default_template_norm() -> f64 {
    3.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            categories: default_categories(),
            domains: default_domains(),
            signal_dim: default_latent_dim(),
            nuisance_dim: default_latent_dim(),
            observed_dim: default_observed_dim(),
            noise_std: default_noise_std(),
            rho: RhoSpec::default(),
            samples_per_cell: default_samples_per_cell(),
            seed: 0,
            signal_norm: default_template_norm(),
            nuisance_norm: default_template_norm(),
            domain_norm: default_template_norm(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Config(format!("categories must be >= 2, got {}", self.categories)));
        }
        if self.domains < 3 {
            return Err(Error::Config(format!(
                "domains must be >= 3 (leave-one-out still needs 2 source domains), got {}",
                self.domains
            )));
        }
        if self.signal_dim == 0 || self.nuisance_dim == 0 {
            return Err(Error::Config("signal_dim and nuisance_dim must be >= 1".into()));
        }
        if self.observed_dim < self.signal_dim + self.nuisance_dim {
            return Err(Error::Config(format!(
                "observed_dim ({}) must be >= signal_dim + nuisance_dim ({})",
                self.observed_dim,
                self.signal_dim + self.nuisance_dim
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        if self.samples_per_cell < 2 {
            return Err(Error::Config(format!(
                "samples_per_cell must be >= 2 (ranking needs same-cell pairs), got {}",
                self.samples_per_cell
            )));
        }
        for (name, v) in [("signal_norm", self.signal_norm), ("nuisance_norm", self.nuisance_norm), ("domain_norm", self.domain_norm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        self.rho.resolve(self.domains)?;
        Ok(())
    }

    fn latent_dim(&self) -> usize {
        self.signal_dim + self.nuisance_dim
    }
}

/// One observation: mixed features, category label, domain label.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: usize,
}

/// Ground truth of a generated dataset: the spec plus every template and the
/// mixing matrix. Enough to regenerate or to analyze what a model recovered.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub spec: DatasetSpec,
    /// Per-category signal templates, `categories x signal_dim`.
    pub signal_templates: Vec<Vec<f64>>,
    /// Per-category nuisance offsets in style space, `categories x nuisance_dim`.
    pub nuisance_templates: Vec<Vec<f64>>,
    /// Per-domain style templates, `domains x nuisance_dim`.
    pub domain_templates: Vec<Vec<f64>>,
    /// Mixing matrix, `observed_dim x (signal_dim + nuisance_dim)`, row-major rows.
    pub mixing: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Dataset-order index of cell `(category, domain)`.
    pub fn cell_of(&self, sample: &Sample) -> usize {
        sample.y * self.meta.spec.domains + sample.d
    }
}

/// Scale `v` to Euclidean norm `target`. A (probability-zero) all-zero draw
/// falls back to the first axis so the result always has the right norm.
fn normalize_to(v: &mut [f64], target: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v.fill(0.0);
        v[0] = target;
    } else {
        let s = target / norm;
        for x in v {
            *x *= s;
        }
    }
}

fn draw_template(stream: &mut Stream, dim: usize, norm: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    stream.fill_gaussian(&mut v);
    normalize_to(&mut v, norm);
    v
}

/// Generate a dataset from a spec, drawing the mixing matrix randomly.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    generate_with_mixing(spec, None)
}

/// Generate with an injected mixing matrix (tests use this to make the
/// observation map exactly known). `None` draws Gaussian entries with
/// standard deviation `1/sqrt(latent_dim)`.
pub fn generate_with_mixing(spec: &DatasetSpec, mixing: Option<Vec<Vec<f64>>>) -> Result<Dataset> {
    spec.validate()?;
    let rho = spec.rho.resolve(spec.domains)?;
    let root = Stream::from_seed(spec.seed);
    let templates = root.child("templates");

    let signal_templates: Vec<Vec<f64>> = (0..spec.categories)
        .map(|y| draw_template(&mut templates.child("signal").child_index(y as u64), spec.signal_dim, spec.signal_norm))
        .collect();
    let nuisance_templates: Vec<Vec<f64>> = (0..spec.categories)
        .map(|y| draw_template(&mut templates.child("nuisance").child_index(y as u64), spec.nuisance_dim, spec.nuisance_norm))
        .collect();
    let domain_templates: Vec<Vec<f64>> = (0..spec.domains)
        .map(|d| draw_template(&mut templates.child("domain").child_index(d as u64), spec.nuisance_dim, spec.domain_norm))
        .collect();

    let latent = spec.latent_dim();
    let mixing = match mixing {
        Some(m) => {
            if m.len() != spec.observed_dim || m.iter().any(|row| row.len() != latent) {
                return Err(Error::DimensionMismatch {
                    expected: spec.observed_dim * latent,
                    actual: m.iter().map(|r| r.len()).sum(),
                });
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("injected mixing matrix".into()));
            }
            m
        }
        None => {
            let mut s = root.child("mixing");
            let std = 1.0 / (latent as f64).sqrt();
            (0..spec.observed_dim)
                .map(|_| {
                    let mut row = vec![0.0; latent];
                    s.fill_gaussian(&mut row);
                    for v in row.iter_mut() {
                        *v *= std;
                    }
                    row
                })
                .collect()
        }
    };

    let sample_streams = root.child("samples");
    let mut samples = Vec::with_capacity(spec.categories * spec.domains * spec.samples_per_cell);
    let mut z = vec![0.0; latent];
    for y in 0..spec.categories {
        for d in 0..spec.domains {
            let cell = (y * spec.domains + d) as u64;
            let cell_stream = sample_streams.child_index(cell);
            for n in 0..spec.samples_per_cell {
                let mut s = cell_stream.child_index(n as u64);
                // Latent vector: signal part then style part.
                for (k, zk) in z.iter_mut().take(spec.signal_dim).enumerate() {
                    *zk = signal_templates[y][k] + s.next_gaussian() * spec.noise_std;
                }
                for k in 0..spec.nuisance_dim {
                    z[spec.signal_dim + k] = domain_templates[d][k] + s.next_gaussian() * spec.noise_std;
                }
                // The gate draw comes last so noise draws stay aligned
                // across rho settings.
                if s.next_bernoulli(rho[d]) {
                    for k in 0..spec.nuisance_dim {
                        z[spec.signal_dim + k] += nuisance_templates[y][k];
                    }
                }
                let x: Vec<f64> = mixing.iter().map(|row| row.iter().zip(&z).map(|(w, zk)| w * zk).sum()).collect();
                samples.push(Sample { x, y, d });
            }
        }
    }

    Ok(Dataset {
        samples,
        meta: DatasetMeta { spec: spec.clone(), signal_templates, nuisance_templates, domain_templates, mixing },
    })
}

/// Index sets for leave-one-domain-out training.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub target_domain: usize,
    /// Source-domain training indices.
    pub train: Vec<usize>,
    /// Source-domain held-out indices (checkpoint selection).
    pub val: Vec<usize>,
    /// Every sample of the target domain.
    pub target_test: Vec<usize>,
}

/// Split a dataset for leave-one-domain-out evaluation: the target domain is
/// held out entirely; each source (category, domain) cell contributes
/// `floor(len * val_fraction)` samples to validation and the rest to
/// training. Membership is a seeded draw; the emitted index lists are sorted.
pub fn leave_one_domain_out(data: &Dataset, target_domain: usize, val_fraction: f64, seed: u64) -> Result<Splits> {
    let spec = &data.meta.spec;
    if target_domain >= spec.domains {
        return Err(Error::InvalidArgument(format!(
            "target domain {target_domain} out of range for {} domains",
            spec.domains
        )));
    }
    if !(val_fraction.is_finite() && val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }

    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> = std::collections::BTreeMap::new();
    let mut target_test = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        if s.d == target_domain {
            target_test.push(i);
        } else {
            cells.entry((s.y, s.d)).or_default().push(i);
        }
    }
    if target_test.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset has no samples in target domain {target_domain}")));
    }
    let source_domains: std::collections::BTreeSet<usize> = cells.keys().map(|&(_, d)| d).collect();
    if source_domains.len() < 2 {
        return Err(Error::InvalidArgument(
            "leave-one-domain-out needs at least 2 source domains with samples".into(),
        ));
    }

    let root = Stream::from_seed(seed).child("split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ((y, d), mut idxs) in cells {
        let mut s = root.child_index((y * spec.domains + d) as u64);
        s.shuffle(&mut idxs);
        let n_val = (idxs.len() as f64 * val_fraction).floor() as usize;
        val.extend_from_slice(&idxs[..n_val]);
        train.extend_from_slice(&idxs[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    target_test.sort_unstable();
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    Ok(Splits { target_domain, train, val, target_test })
}

/// Deterministic batch sampler guaranteeing the label structure the ranking
/// loss requires.
///
/// The sampler requires the training split to form a *complete* grid: every
/// (category, domain) combination present with at least 2 samples. Each batch
/// selects a window of at least 2 categories and 2 domains (the whole grid
/// when it fits in the batch size) and draws a near-equal quota from every
/// cell of the window, so every anchor in every batch has all four relation
/// groups populated. An epoch ends once every cell has been drawn at least
/// its own size — the whole training split is visited every epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    batch_size: usize,
    seed: u64,
    /// Row-major over (category rank, domain rank).
    cells: Vec<Vec<usize>>,
    categories: Vec<usize>,
    domains: Vec<usize>,
    grid_cats: usize,
    grid_doms: usize,
}

impl BatchSampler {
    pub fn new(samples: &[Sample], train: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 8 {
            return Err(Error::Config(format!(
                "batch_size must be >= 8 (a 2x2 grid with 2 samples per cell), got {batch_size}"
            )));
        }
        if train.is_empty() {
            return Err(Error::Config("batch sampler got an empty training split".into()));
        }
        let mut by_cell: std::collections::BTreeMap<(usize, usize), Vec<usize>> = std::collections::BTreeMap::new();
        for &i in train {
            let s = samples.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("training index {i} out of range for {} samples", samples.len()))
            })?;
            by_cell.entry((s.y, s.d)).or_default().push(i);
        }
        let categories: Vec<usize> = by_cell.keys().map(|&(y, _)| y).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let domains: Vec<usize> = by_cell.keys().map(|&(_, d)| d).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        if categories.len() < 2 || domains.len() < 2 {
            return Err(Error::Config(format!(
                "batch sampler needs >= 2 categories and >= 2 domains in the training split, got {} and {}",
                categories.len(),
                domains.len()
            )));
        }
        let mut cells = Vec::with_capacity(categories.len() * domains.len());
        for &y in &categories {
            for &d in &domains {
                match by_cell.get(&(y, d)) {
                    Some(v) if v.len() >= 2 => cells.push(v.clone()),
                    Some(v) => {
                        return Err(Error::Config(format!(
                            "cell (category {y}, domain {d}) has only {} training sample(s); every cell needs >= 2",
                            v.len()
                        )))
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "cell (category {y}, domain {d}) has no training samples; the sampler needs a complete grid"
                        )))
                    }
                }
            }
        }

        // Largest category x domain window whose minimum occupancy (2 per
        // cell) fits the batch.
        let mut grid_cats = 0;
        let mut grid_doms = 0;
        for gc in 2..=categories.len() {
            for gd in 2..=domains.len() {
                if 2 * gc * gd <= batch_size && (gc * gd > grid_cats * grid_doms || (gc * gd == grid_cats * grid_doms && gc > grid_cats)) {
                    grid_cats = gc;
                    grid_doms = gd;
                }
            }
        }
        debug_assert!(grid_cats >= 2 && grid_doms >= 2);

        Ok(BatchSampler { batch_size, seed, cells, categories, domains, grid_cats, grid_doms })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// All batches of one epoch, as dataset indices. A pure function of
    /// `(seed, epoch)`.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        let root = Stream::from_seed(self.seed).child("epoch").child_index(epoch);
        let n_cats = self.categories.len();
        let n_doms = self.domains.len();

        let orders: Vec<Vec<usize>> = self
            .cells
            .iter()
            .enumerate()
            .map(|(ci, cell)| {
                let mut v = cell.clone();
                let mut s = root.child("cell").child_index(ci as u64);
                s.shuffle(&mut v);
                v
            })
            .collect();
        let mut cat_order: Vec<usize> = (0..n_cats).collect();
        let mut dom_order: Vec<usize> = (0..n_doms).collect();
        {
            let mut s = root.child("window");
            s.shuffle(&mut cat_order);
            s.shuffle(&mut dom_order);
        }

        let mut cursors = vec![0usize; self.cells.len()];
        let mut consumed = vec![0usize; self.cells.len()];
        let mut batches = Vec::new();
        let mut t = 0usize;
        loop {
            // Window of cell ids for this batch (rotating when the grid does
            // not cover every category/domain at once).
            let mut chosen = Vec::with_capacity(self.grid_cats * self.grid_doms);
            for a in 0..self.grid_cats {
                let cat_rank = cat_order[(t * self.grid_cats + a) % n_cats];
                for b in 0..self.grid_doms {
                    let dom_rank = dom_order[(t * self.grid_doms + b) % n_doms];
                    chosen.push(cat_rank * n_doms + dom_rank);
                }
            }
            chosen.sort_unstable();

            let n_chosen = chosen.len();
            let base = self.batch_size / n_chosen;
            let rem = self.batch_size % n_chosen;
            let mut quota = vec![base; n_chosen];
            for j in 0..rem {
                quota[(t + j) % n_chosen] += 1;
            }

            let mut batch = Vec::with_capacity(self.batch_size);
            for (j, &ci) in chosen.iter().enumerate() {
                let order = &orders[ci];
                for _ in 0..quota[j] {
                    batch.push(order[cursors[ci] % order.len()]);
                    cursors[ci] += 1;
                }
                consumed[ci] += quota[j];
            }
            batches.push(batch);
            t += 1;

            if consumed.iter().zip(&self.cells).all(|(&c, cell)| c >= cell.len()) {
                break;
            }
            assert!(t < 1_000_000, "batch sampler failed to cover the training split");
        }
        batches
    }
}

// ---------------------------------------------------------------------------
// File formats: samples as JSON lines, metadata as a single JSON document.

/// Write samples, one JSON object per line, in dataset order.
pub fn write_samples_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: no samples", path.display())));
    }
    Ok(samples)
}

pub fn write_metadata(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, meta)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<DatasetMeta> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let meta: DatasetMeta =
        serde_json::from_reader(reader).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    meta.spec.validate()?;
    Ok(meta)
}

/// Read samples + metadata and cross-validate them: every feature vector must
/// match the observed dimension and every label must be in range.
pub fn load_dataset(data_path: &Path, meta_path: &Path) -> Result<Dataset> {
    let meta = read_metadata(meta_path)?;
    let samples = read_samples_jsonl(data_path)?;
    for (i, s) in samples.iter().enumerate() {
        if s.x.len() != meta.spec.observed_dim {
            return Err(Error::Format(format!(
                "sample {i}: feature length {} does not match observed_dim {}",
                s.x.len(),
                meta.spec.observed_dim
            )));
        }
        if s.y >= meta.spec.categories || s.d >= meta.spec.domains {
            return Err(Error::Format(format!(
                "sample {i}: labels (y={}, d={}) out of range for {} categories x {} domains",
                s.y, s.d, meta.spec.categories, meta.spec.domains
            )));
        }
        if s.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("sample {i}: non-finite feature value")));
        }
    }
    Ok(Dataset { samples, meta })
}
