//! End-to-end training, evaluation, auditing, and export.
//!
//! The trainer owns the composite objective
//!
//! ```text
//! total = classification + alpha * (rank_weight  * sum of per-block ranking losses
//!                                 + cluster_weight * sum of per-block cluster losses)
//! ```
//!
//! where `alpha` steps from its early to its late value at a configured
//! epoch, and the two weight knobs exist so ablations can switch a term off
//! without inventing a different loss configuration. When a term's effective
//! weight is zero it is genuinely skipped — not computed and multiplied by
//! zero — which the metrics counters make observable.
//!
//! Reproducibility: a run is a pure function of `(config, dataset, splits)`.
//! All randomness (init, batch order, split membership) derives from
//! `config.seed` via labeled streams.
//!
//! Checkpoint selection keeps the latest post-burn-in epoch whose validation
//! accuracy is within one validation sample of the best seen. Validation
//! accuracy is a count divided by the split size, so one sample is its
//! resolution: on small validation splits the metric saturates, and selecting
//! the strict maximum would let a single flipped sample pin the checkpoint to
//! an early epoch and discard the rest of the learning-rate and alpha
//! schedule. With a validation set large enough that accuracy never
//! saturates, the rule coincides with ordinary best-validation selection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::energy::{pair_potential, EnergyConfig, FeatureBatch};
use crate::gradcheck::LossProbe;
use crate::losses::{cluster_loss_with_grad, rank_loss_with_grad, relation_groups, LossConfig, RelationGroups};
use crate::net::{self, ExtractorConfig, ExtractorState, Gradients, ModelParams};
use crate::optim::{adamw_step, lr_schedule, OptimizerHyper};
use crate::prototypes::{classification_batch_with_grad, predict};
use crate::rng::Stream;
use crate::synth::{BatchSampler, Dataset, Splits};
use crate::{Error, Result};

/// Full training configuration. The defaults are sized for the bundled
/// synthetic task (a few thousand samples, ~30 epochs); the optimizer's own
/// default learning rate suits much longer schedules, so the default here
/// overrides it upward.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Regularizer weight before the switch epoch.
    #[serde(default = "default_alpha_early")]
    pub alpha_early: f64,
    /// Regularizer weight from the switch epoch on.
    #[serde(default = "default_alpha_late")]
    pub alpha_late: f64,
    #[serde(default = "default_switch_epoch")]
    pub alpha_switch_epoch: usize,
    /// Epochs between halvings of the learning rate.
    #[serde(default = "default_half_life")]
    pub lr_half_life: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prototypes_per_class")]
    pub prototypes_per_class: usize,
    /// Ablation knob: scales the ranking term inside the regularizer.
    #[serde(default = "default_unit_weight")]
    pub rank_weight: f64,
    /// Ablation knob: scales the cluster term inside the regularizer.
    #[serde(default = "default_unit_weight")]
    pub cluster_weight: f64,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default = "default_desk_loss")]
    pub loss: LossConfig,
    #[serde(default = "default_desk_optimizer")]
    pub optimizer: OptimizerHyper,
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    128
}

fn default_alpha_early() -> f64 {
    0.1
}

fn default_alpha_late() -> f64 {
    0.2
}

fn default_switch_epoch() -> usize {
    20
}

fn default_half_life() -> usize {
    20
}

fn default_prototypes_per_class() -> usize {
    3
}

fn default_unit_weight() -> f64 {
    1.0
}

fn default_desk_optimizer() -> OptimizerHyper {
    OptimizerHyper { learning_rate: 1e-3, ..OptimizerHyper::default() }
}

/// Loss defaults for desk-scale data. The kernel default `beta = 1` is sized
/// for normalized deep features; on the raw synthetic features used here the
/// initial pairwise distances run into the exponent clamp, which zeroes the
/// regularizer gradients and destabilizes the first epochs. A softer kernel
/// keeps every energy in a differentiable range.
fn default_desk_loss() -> LossConfig {
    LossConfig { energy: EnergyConfig { beta: 0.1, ..EnergyConfig::default() }, ..LossConfig::default() }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            alpha_early: default_alpha_early(),
            alpha_late: default_alpha_late(),
            alpha_switch_epoch: default_switch_epoch(),
            lr_half_life: default_half_life(),
            seed: 0,
            prototypes_per_class: default_prototypes_per_class(),
            rank_weight: default_unit_weight(),
            cluster_weight: default_unit_weight(),
            extractor: ExtractorConfig::default(),
            loss: default_desk_loss(),
            optimizer: default_desk_optimizer(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 8 {
            return Err(Error::Config(format!("batch_size must be >= 8, got {}", self.batch_size)));
        }
        for (name, a) in [("alpha_early", self.alpha_early), ("alpha_late", self.alpha_late)] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {a}")));
            }
        }
        if self.lr_half_life == 0 {
            return Err(Error::Config("lr_half_life must be >= 1".into()));
        }
        if self.prototypes_per_class == 0 {
            return Err(Error::Config("prototypes_per_class must be >= 1".into()));
        }
        for (name, w) in [("rank_weight", self.rank_weight), ("cluster_weight", self.cluster_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        self.extractor.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        let blocks = self.extractor.blocks();
        for &b in self.loss.rank_blocks.iter().chain(&self.loss.cluster_blocks) {
            if b >= blocks {
                return Err(Error::Config(format!("loss refers to block {b} but the extractor has {blocks} blocks")));
            }
        }
        Ok(())
    }

    /// Regularizer weight in force at a given epoch.
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch < self.alpha_switch_epoch {
            self.alpha_early
        } else {
            self.alpha_late
        }
    }

    /// Epochs excluded from checkpoint selection (first 10%, floored).
    pub fn burn_in_epochs(&self) -> usize {
        self.epochs / 10
    }
}

/// Loss values for one batch at one parameter point.
#[derive(Debug, Clone)]
pub struct BatchTerms {
    pub total: f64,
    pub cls: f64,
    /// Unweighted per-block ranking losses; empty when the term was skipped.
    pub rank: Vec<(usize, f64)>,
    /// Unweighted per-block cluster losses; empty when the term was skipped.
    pub cluster: Vec<(usize, f64)>,
    /// Distance to the nearest non-differentiability over the whole
    /// composite objective.
    pub smooth_margin: f64,
}

/// Evaluate the composite objective and its gradients on one batch. This is
/// the single code path used by the training loop, the gradient checker, and
/// the oracle tests — there is no second implementation to drift.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grads(
    params: &ModelParams,
    inputs: &FeatureBatch,
    categories: &[usize],
    domains: &[usize],
    loss_cfg: &LossConfig,
    alpha: f64,
    rank_weight: f64,
    cluster_weight: f64,
) -> Result<(BatchTerms, Gradients)> {
    if categories.len() != inputs.rows() || domains.len() != inputs.rows() {
        return Err(Error::DimensionMismatch { expected: inputs.rows(), actual: categories.len().min(domains.len()) });
    }
    let fwd = net::forward(params, inputs)?;
    let n_blocks = fwd.blocks.len();
    let mut block_grads: Vec<FeatureBatch> =
        fwd.blocks.iter().map(|b| FeatureBatch::zeros(b.rows(), b.dim())).collect();
    let mut smooth_margin = fwd.min_preact_abs;

    let rank_scale = alpha * rank_weight;
    let cluster_scale = alpha * cluster_weight;
    let groups: Option<RelationGroups> = if rank_scale > 0.0 || cluster_scale > 0.0 {
        Some(relation_groups(categories, domains)?)
    } else {
        None
    };

    let mut rank_terms = Vec::new();
    if rank_scale > 0.0 {
        let groups = groups.as_ref().unwrap();
        for &b in &loss_cfg.rank_blocks {
            if b >= n_blocks {
                return Err(Error::Config(format!("rank block {b} out of range ({n_blocks} blocks)")));
            }
            let eval = rank_loss_with_grad(&fwd.blocks[b], groups, loss_cfg)?;
            smooth_margin = smooth_margin.min(eval.smooth_margin);
            for (acc, g) in block_grads[b].data_mut().iter_mut().zip(eval.grad.data()) {
                *acc += rank_scale * g;
            }
            rank_terms.push((b, eval.value));
        }
    }
    let mut cluster_terms = Vec::new();
    if cluster_scale > 0.0 {
        let groups = groups.as_ref().unwrap();
        for &b in &loss_cfg.cluster_blocks {
            if b >= n_blocks {
                return Err(Error::Config(format!("cluster block {b} out of range ({n_blocks} blocks)")));
            }
            let eval = cluster_loss_with_grad(&fwd.blocks[b], groups, loss_cfg)?;
            smooth_margin = smooth_margin.min(eval.smooth_margin);
            for (acc, g) in block_grads[b].data_mut().iter_mut().zip(eval.grad.data()) {
                *acc += cluster_scale * g;
            }
            cluster_terms.push((b, eval.value));
        }
    }

    let cls_eval = classification_batch_with_grad(fwd.last(), categories, &params.prototypes)?;
    smooth_margin = smooth_margin.min(cls_eval.smooth_margin);
    {
        let last = n_blocks - 1;
        for (acc, g) in block_grads[last].data_mut().iter_mut().zip(cls_eval.grad_features.data()) {
            *acc += g;
        }
    }

    let mut grads = net::backward(params, &fwd, &block_grads)?;
    grads.prototypes = cls_eval.grad_prototypes;

    let reg: f64 = rank_weight * rank_terms.iter().map(|(_, v)| v).sum::<f64>()
        + cluster_weight * cluster_terms.iter().map(|(_, v)| v).sum::<f64>();
    let total = cls_eval.mean_loss + alpha * reg;
    if !total.is_finite() {
        return Err(Error::NonFinite("composite batch loss".into()));
    }
    Ok((
        BatchTerms { total, cls: cls_eval.mean_loss, rank: rank_terms, cluster: cluster_terms, smooth_margin },
        grads,
    ))
}

/// Probe adapter for the gradient checker: the full objective on a fixed
/// batch as a function of the parameters.
pub fn objective_probe(
    params: &ModelParams,
    inputs: &FeatureBatch,
    categories: &[usize],
    domains: &[usize],
    loss_cfg: &LossConfig,
    alpha: f64,
) -> Result<LossProbe> {
    let (terms, grads) = batch_loss_and_grads(params, inputs, categories, domains, loss_cfg, alpha, 1.0, 1.0)?;
    Ok(LossProbe { value: terms.total, grads, smooth_margin: terms.smooth_margin })
}

/// Per-domain accuracy of one evaluation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainAccuracy {
    pub domain: usize,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// Correctly classified sample count; `mean_accuracy = correct / total`.
    pub correct: usize,
    pub total: usize,
    pub per_domain: Vec<DomainAccuracy>,
}

/// Assemble a feature batch plus label vectors from dataset indices.
pub fn batch_from_indices(data: &Dataset, indices: &[usize]) -> Result<(FeatureBatch, Vec<usize>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty index list".into()));
    }
    let dim = data.meta.spec.observed_dim;
    let mut batch = FeatureBatch::zeros(indices.len(), dim);
    let mut cats = Vec::with_capacity(indices.len());
    let mut doms = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let s = data
            .samples
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("index {i} out of range for {} samples", data.samples.len())))?;
        if s.x.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: s.x.len() });
        }
        batch.row_mut(row).copy_from_slice(&s.x);
        cats.push(s.y);
        doms.push(s.d);
    }
    Ok((batch, cats, doms))
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy of the prototype classifier over the given indices.
pub fn evaluate(params: &ModelParams, data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty index list".into()));
    }
    let mut tallies: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (batch, cats, doms) = batch_from_indices(data, chunk)?;
        let fwd = net::forward(params, &batch)?;
        let last = fwd.last();
        for row in 0..last.rows() {
            let predicted = predict(last.row(row), &params.prototypes)?;
            let entry = tallies.entry(doms[row]).or_insert((0, 0));
            entry.1 += 1;
            if predicted == cats[row] {
                entry.0 += 1;
                correct_total += 1;
            }
        }
    }
    let per_domain = tallies
        .into_iter()
        .map(|(domain, (correct, count))| DomainAccuracy { domain, accuracy: correct as f64 / count as f64, count })
        .collect();
    Ok(EvalReport {
        mean_accuracy: correct_total as f64 / indices.len() as f64,
        correct: correct_total,
        total: indices.len(),
        per_domain,
    })
}

/// Mean and 95% half-width over per-seed results: `mean +/- 1.96 * s / sqrt(k)`
/// with the sample standard deviation (k - 1 denominator).
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let k = values.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("confidence interval needs >= 2 values, got {k}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("confidence interval input".into()));
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64;
    let half = 1.96 * var.sqrt() / (k as f64).sqrt();
    Ok((mean, half))
}

/// Features of one extractor block over arbitrary dataset indices.
pub fn block_features(params: &ModelParams, data: &Dataset, indices: &[usize], block: usize) -> Result<FeatureBatch> {
    if block >= params.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "block {block} out of range ({} blocks)",
            params.layers.len()
        )));
    }
    if indices.is_empty() {
        return Err(Error::InvalidArgument("block_features: empty index list".into()));
    }
    let dim = params.layers[block].out_dim;
    let mut out = FeatureBatch::zeros(indices.len(), dim);
    for (offset, chunk) in indices.chunks(EVAL_CHUNK).scan(0usize, |acc, c| {
        let o = *acc;
        *acc += c.len();
        Some((o, c))
    }) {
        let (batch, _, _) = batch_from_indices(data, chunk)?;
        let fwd = net::forward(params, &batch)?;
        for row in 0..chunk.len() {
            out.row_mut(offset + row).copy_from_slice(fwd.blocks[block].row(row));
        }
    }
    Ok(out)
}

/// Everything the training loop records. Disabled loss terms appear as
/// `null` entries in the per-epoch curves and contribute nothing to the
/// gradient-batch counters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockCurve {
    pub block: usize,
    pub per_epoch: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub categories: usize,
    pub target_domain: usize,
    pub selected_epoch: usize,
    /// Validation accuracy at the selected epoch (within one validation
    /// sample of the best epoch seen after burn-in).
    pub selected_val_accuracy: f64,
    pub final_val_accuracy: f64,
    /// Accuracy on the held-out domain at the selected checkpoint.
    pub target_accuracy: f64,
    pub val_accuracy_per_epoch: Vec<f64>,
    /// Validation accuracy per source domain at the selected checkpoint.
    pub val_per_domain: Vec<DomainAccuracy>,
    pub cls_loss_per_epoch: Vec<f64>,
    pub rank_curves: Vec<BlockCurve>,
    pub cluster_curves: Vec<BlockCurve>,
    /// Mean total loss per batch, grouped by epoch.
    pub total_loss_per_batch: Vec<Vec<f64>>,
    /// Batches in which the ranking term contributed gradient.
    pub rank_grad_batches: u64,
    /// Batches in which the cluster term contributed gradient.
    pub cluster_grad_batches: u64,
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    serde_json::from_reader(reader).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Initial state for a config: deterministic in `config.seed`. The training
/// loop starts from exactly this state, so audits of "before training" use it
/// too.
pub fn init_state(config: &TrainConfig, classes: usize) -> Result<ExtractorState> {
    config.validate()?;
    let root = Stream::from_seed(config.seed);
    let params = ModelParams::init(&config.extractor, classes, config.prototypes_per_class, &root.child("init"))?;
    Ok(ExtractorState::new(params))
}

/// Train on the given splits and return the selected checkpoint plus the full
/// metrics record.
///
/// Checkpoint selection: latest post-burn-in epoch within one validation
/// sample of the best validation accuracy seen (see the module docs for the
/// rationale). Divergence (non-finite loss, gradient, or parameter) aborts
/// with the offending term and batch.
pub fn train(config: &TrainConfig, data: &Dataset, splits: &Splits) -> Result<(Checkpoint, MetricsReport)> {
    config.validate()?;
    let spec = &data.meta.spec;
    if config.extractor.input_dim != spec.observed_dim {
        return Err(Error::Config(format!(
            "extractor input_dim {} does not match dataset observed_dim {}",
            config.extractor.input_dim, spec.observed_dim
        )));
    }
    if splits.val.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty; checkpoint selection needs one".into()));
    }
    let classes = spec.categories;

    let root = Stream::from_seed(config.seed);
    let mut state = init_state(config, classes)?;
    let sampler = BatchSampler::new(&data.samples, &splits.train, config.batch_size, root.derive_seed("sampler"))?;

    let n_epochs = config.epochs;
    let burn_in = config.burn_in_epochs();
    let mut val_accuracy_per_epoch = Vec::with_capacity(n_epochs);
    let mut cls_loss_per_epoch = Vec::with_capacity(n_epochs);
    let mut rank_curves: Vec<BlockCurve> =
        config.loss.rank_blocks.iter().map(|&b| BlockCurve { block: b, per_epoch: Vec::new() }).collect();
    let mut cluster_curves: Vec<BlockCurve> =
        config.loss.cluster_blocks.iter().map(|&b| BlockCurve { block: b, per_epoch: Vec::new() }).collect();
    let mut total_loss_per_batch = Vec::with_capacity(n_epochs);
    let mut rank_grad_batches = 0u64;
    let mut cluster_grad_batches = 0u64;
    let mut best: Option<(ExtractorState, usize, f64)> = None;
    let mut best_correct = 0usize;

    for epoch in 0..n_epochs {
        let lr = lr_schedule(epoch, config.optimizer.learning_rate, config.lr_half_life);
        let alpha = config.alpha_at(epoch);
        let batches = sampler.epoch_batches(epoch as u64);

        let mut cls_sum = 0.0;
        let mut rank_sums = vec![0.0; rank_curves.len()];
        let mut cluster_sums = vec![0.0; cluster_curves.len()];
        let mut epoch_totals = Vec::with_capacity(batches.len());
        let mut rank_active = false;
        let mut cluster_active = false;

        for (bi, batch_indices) in batches.iter().enumerate() {
            let (inputs, cats, doms) = batch_from_indices(data, batch_indices)?;
            let (terms, grads) = batch_loss_and_grads(
                &state.params,
                &inputs,
                &cats,
                &doms,
                &config.loss,
                alpha,
                config.rank_weight,
                config.cluster_weight,
            )
            .map_err(|e| into_divergence(e, bi))?;
            adamw_step(&mut state.params, &mut state.opt, &grads, &config.optimizer, lr)
                .map_err(|e| into_divergence(e, bi))?;

            cls_sum += terms.cls;
            if !terms.rank.is_empty() {
                rank_grad_batches += 1;
                rank_active = true;
                for (sum, (_, v)) in rank_sums.iter_mut().zip(&terms.rank) {
                    *sum += v;
                }
            }
            if !terms.cluster.is_empty() {
                cluster_grad_batches += 1;
                cluster_active = true;
                for (sum, (_, v)) in cluster_sums.iter_mut().zip(&terms.cluster) {
                    *sum += v;
                }
            }
            epoch_totals.push(terms.total);
        }

        let n_batches = epoch_totals.len() as f64;
        cls_loss_per_epoch.push(cls_sum / n_batches);
        for (curve, sum) in rank_curves.iter_mut().zip(&rank_sums) {
            curve.per_epoch.push(if rank_active { Some(sum / n_batches) } else { None });
        }
        for (curve, sum) in cluster_curves.iter_mut().zip(&cluster_sums) {
            curve.per_epoch.push(if cluster_active { Some(sum / n_batches) } else { None });
        }
        total_loss_per_batch.push(epoch_totals);

        let val = evaluate(&state.params, data, &splits.val)?;
        val_accuracy_per_epoch.push(val.mean_accuracy);
        if epoch >= burn_in {
            best_correct = best_correct.max(val.correct);
            // Latest epoch within one validation sample of the best: see the
            // module docs for why exact-maximum selection is not used.
            if val.correct + 1 >= best_correct {
                best = Some((state.clone(), epoch, val.mean_accuracy));
            }
        }
    }

    let (best_state, selected_epoch, selected_val_accuracy) =
        best.expect("burn-in is always shorter than the run");
    let val_report = evaluate(&best_state.params, data, &splits.val)?;
    let target_report = evaluate(&best_state.params, data, &splits.target_test)?;

    let report = MetricsReport {
        schema_version: 1,
        config: config.clone(),
        categories: classes,
        target_domain: splits.target_domain,
        selected_epoch,
        selected_val_accuracy,
        final_val_accuracy: *val_accuracy_per_epoch.last().unwrap(),
        target_accuracy: target_report.mean_accuracy,
        val_accuracy_per_epoch,
        val_per_domain: val_report.per_domain,
        cls_loss_per_epoch,
        rank_curves,
        cluster_curves,
        total_loss_per_batch,
        rank_grad_batches,
        cluster_grad_batches,
    };
    let checkpoint = Checkpoint {
        config: config.clone(),
        state: best_state,
        selected_epoch,
        selected_val_accuracy,
        rng_state: root.state(),
    };
    Ok((checkpoint, report))
}

fn into_divergence(e: Error, batch: usize) -> Error {
    match e {
        Error::NonFinite(term) => Error::Divergence { term, batch },
        other => other,
    }
}

/// Result of a ranking-order audit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuditReport {
    pub block: usize,
    /// Fraction of checked quadruples violating the strict energy order.
    pub violation_rate: f64,
    pub checked: u64,
    /// Whether every admissible quadruple was enumerated (vs sampled).
    pub exhaustive: bool,
}

/// Estimate how often the strict order `E(ss) < E(sd) < E(ds) < E(dd)` fails
/// across anchor quadruples in block `block`'s feature space. Quadruples are
/// drawn uniformly over all admissible (anchor, ss, sd, ds, dd) combinations;
/// if `budget` covers them all, enumeration is exhaustive. Equality anywhere
/// counts as a violation.
pub fn rank_violation_audit(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    block: usize,
    budget: u64,
    seed: u64,
    loss_cfg: &LossConfig,
) -> Result<AuditReport> {
    loss_cfg.validate()?;
    if budget == 0 {
        return Err(Error::InvalidArgument("audit budget must be >= 1".into()));
    }
    let features = block_features(params, data, indices, block)?;
    let (_, cats, doms) = batch_from_indices(data, indices)?;
    let groups = relation_groups(&cats, &doms)?;

    // Quadruple counts per anchor, as cumulative offsets.
    let n = groups.len();
    let mut cumulative: Vec<u128> = Vec::with_capacity(n + 1);
    cumulative.push(0);
    for a in 0..n {
        let count = groups.same_cat_same_dom(a).len() as u128
            * groups.same_cat_diff_dom(a).len() as u128
            * groups.diff_cat_same_dom(a).len() as u128
            * groups.diff_cat_diff_dom(a).len() as u128;
        cumulative.push(cumulative[a] + count);
    }
    let total = *cumulative.last().unwrap();
    if total == 0 {
        return Err(Error::Config(
            "audit split lacks anchors with all four relation groups; cannot assess ranking order".into(),
        ));
    }

    let energy = |i: usize, j: usize| pair_potential(features.row(i), features.row(j), &loss_cfg.energy);
    let check = |anchor: usize, flat: u128| -> Result<bool> {
        let ss = groups.same_cat_same_dom(anchor);
        let sd = groups.same_cat_diff_dom(anchor);
        let ds = groups.diff_cat_same_dom(anchor);
        let dd = groups.diff_cat_diff_dom(anchor);
        let mut rest = flat;
        let l = (rest % dd.len() as u128) as usize;
        rest /= dd.len() as u128;
        let k = (rest % ds.len() as u128) as usize;
        rest /= ds.len() as u128;
        let j = (rest % sd.len() as u128) as usize;
        let i = (rest / sd.len() as u128) as usize;
        let e_ss = energy(anchor, ss[i])?;
        let e_sd = energy(anchor, sd[j])?;
        let e_ds = energy(anchor, ds[k])?;
        let e_dd = energy(anchor, dd[l])?;
        Ok(!(e_ss < e_sd && e_sd < e_ds && e_ds < e_dd))
    };

    let mut violations = 0u64;
    let checked;
    let exhaustive = total <= budget as u128;
    if exhaustive {
        for a in 0..n {
            let span = cumulative[a + 1] - cumulative[a];
            for flat in 0..span {
                if check(a, flat)? {
                    violations += 1;
                }
            }
        }
        checked = total as u64;
    } else {
        let mut stream = Stream::from_seed(seed).child("audit");
        for _ in 0..budget {
            let r = next_below_u128(&mut stream, total);
            // Find the anchor owning this flat index.
            let a = match cumulative.binary_search(&r) {
                Ok(exact) => exact,
                Err(insertion) => insertion - 1,
            };
            if check(a, r - cumulative[a])? {
                violations += 1;
            }
        }
        checked = budget;
    }

    Ok(AuditReport { block, violation_rate: violations as f64 / checked as f64, checked, exhaustive })
}

/// Unbiased uniform draw in `0..n` for 128-bit ranges.
fn next_below_u128(stream: &mut Stream, n: u128) -> u128 {
    debug_assert!(n > 0);
    let zone = n * (u128::MAX / n);
    loop {
        let x = ((stream.next_u64() as u128) << 64) | stream.next_u64() as u128;
        if x < zone || zone == 0 {
            return x % n;
        }
    }
}

/// One exported embedding point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub pc1: f64,
    pub pc2: f64,
    pub category: usize,
    pub domain: usize,
}

/// Project one block's features onto their top two principal components.
pub fn export_embeddings(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    block: usize,
) -> Result<Vec<EmbeddingRow>> {
    let features = block_features(params, data, indices, block)?;
    let (_, cats, doms) = batch_from_indices(data, indices)?;
    let projection = crate::pca::top2_projection(&features)?;
    Ok(projection
        .coords
        .iter()
        .zip(cats.iter().zip(&doms))
        .map(|(c, (&category, &domain))| EmbeddingRow { pc1: c[0], pc2: c[1], category, domain })
        .collect())
}

/// CSV with the fixed header `pc1,pc2,category,domain`.
pub fn write_embeddings_csv<W: Write>(mut w: W, rows: &[EmbeddingRow]) -> Result<()> {
    writeln!(w, "pc1,pc2,category,domain")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.pc1, r.pc2, r.category, r.domain)?;
    }
    Ok(())
}

/// Accuracy of a nearest-centroid classifier fit on `train` and scored on
/// `eval`. Used as a linear-ish probe of how much label information a frozen
/// feature space retains (for domains: high accuracy means domain identity is
/// still encoded; chance means it has been scrubbed).
pub fn centroid_probe_accuracy(
    train_features: &FeatureBatch,
    train_labels: &[usize],
    eval_features: &FeatureBatch,
    eval_labels: &[usize],
) -> Result<f64> {
    if train_features.rows() != train_labels.len() {
        return Err(Error::DimensionMismatch { expected: train_features.rows(), actual: train_labels.len() });
    }
    if eval_features.rows() != eval_labels.len() {
        return Err(Error::DimensionMismatch { expected: eval_features.rows(), actual: eval_labels.len() });
    }
    if eval_features.dim() != train_features.dim() {
        return Err(Error::DimensionMismatch { expected: train_features.dim(), actual: eval_features.dim() });
    }
    let dim = train_features.dim();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &label) in train_labels.iter().enumerate() {
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, x) in entry.0.iter_mut().zip(train_features.row(row)) {
            *s += x;
        }
        entry.1 += 1;
    }
    if sums.len() < 2 {
        return Err(Error::InvalidArgument("centroid probe needs at least 2 distinct training labels".into()));
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(label, (mut sum, count))| {
            for v in sum.iter_mut() {
                *v /= count as f64;
            }
            (label, sum)
        })
        .collect();

    let mut correct = 0usize;
    for (row, &label) in eval_labels.iter().enumerate() {
        let x = eval_features.row(row);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (slot, (_, c)) in centroids.iter().enumerate() {
            let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = slot;
            }
        }
        if centroids[best].0 == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_labels.len() as f64)
}
