//! Relation groups and the two energy-structure losses.
//!
//! Every sample in a batch acts as an anchor. Relative to an anchor, every
//! other sample falls into one of four groups by (category match, domain
//! match). The ranking loss hinges the *mean* energies of those groups into
//! the order
//!
//! ```text
//! same-cat/same-dom  <  same-cat/diff-dom  <  diff-cat/same-dom  <  diff-cat/diff-dom
//! ```
//!
//! so domain separation is tolerated only below category separation. The
//! cluster loss is `exp(mean_same_cat - mean_diff_cat)`, a smooth pull that
//! shrinks same-category energies (domain notwithstanding) relative to
//! cross-category ones.
//!
//! Reduction order: all sums over set members and over anchors accumulate in
//! ascending *value* order. Floating-point addition is not associative, so
//! summing in index order would make the loss depend on how the batch happens
//! to be laid out; value-ordered accumulation makes the reported loss
//! bit-identical under any permutation of the batch. Gradients carry no such
//! guarantee (they are accumulated in index order) — only reported loss
//! values do.

use crate::energy::{kernel_slope, pair_tables, EnergyConfig, FeatureBatch, PairTables, ZERO_DISTANCE_EPS};
use crate::{Error, Result};

/// Sum `values` in ascending order, mutating the slice. The reordering is the
/// point: it buys permutation invariance of the result.
pub(crate) fn sum_value_ordered(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-anchor membership lists for the four relation groups. Indices refer to
/// positions in the originating batch; an anchor is never a member of its own
/// groups.
#[derive(Debug, Clone)]
pub struct RelationGroups {
    n: usize,
    same_cat_same_dom: Vec<Vec<usize>>,
    same_cat_diff_dom: Vec<Vec<usize>>,
    diff_cat_same_dom: Vec<Vec<usize>>,
    diff_cat_diff_dom: Vec<Vec<usize>>,
}

impl RelationGroups {
    /// Number of anchors (the batch size).
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn same_cat_same_dom(&self, anchor: usize) -> &[usize] {
        &self.same_cat_same_dom[anchor]
    }

    pub fn same_cat_diff_dom(&self, anchor: usize) -> &[usize] {
        &self.same_cat_diff_dom[anchor]
    }

    pub fn diff_cat_same_dom(&self, anchor: usize) -> &[usize] {
        &self.diff_cat_same_dom[anchor]
    }

    pub fn diff_cat_diff_dom(&self, anchor: usize) -> &[usize] {
        &self.diff_cat_diff_dom[anchor]
    }

    /// True when all four groups are non-empty, i.e. the anchor can
    /// participate in the ranking loss.
    pub fn is_fully_populated(&self, anchor: usize) -> bool {
        !self.same_cat_same_dom[anchor].is_empty()
            && !self.same_cat_diff_dom[anchor].is_empty()
            && !self.diff_cat_same_dom[anchor].is_empty()
            && !self.diff_cat_diff_dom[anchor].is_empty()
    }
}

/// Classify every ordered pair of batch positions into relation groups.
pub fn relation_groups(categories: &[usize], domains: &[usize]) -> Result<RelationGroups> {
    if categories.len() != domains.len() {
        return Err(Error::DimensionMismatch { expected: categories.len(), actual: domains.len() });
    }
    let n = categories.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("relation groups need at least 2 samples, got {n}")));
    }
    let mut groups = RelationGroups {
        n,
        same_cat_same_dom: vec![Vec::new(); n],
        same_cat_diff_dom: vec![Vec::new(); n],
        diff_cat_same_dom: vec![Vec::new(); n],
        diff_cat_diff_dom: vec![Vec::new(); n],
    };
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let list = match (categories[i] == categories[j], domains[i] == domains[j]) {
                (true, true) => &mut groups.same_cat_same_dom[i],
                (true, false) => &mut groups.same_cat_diff_dom[i],
                (false, true) => &mut groups.diff_cat_same_dom[i],
                (false, false) => &mut groups.diff_cat_diff_dom[i],
            };
            list.push(j);
        }
    }
    Ok(groups)
}

/// Configuration for both structure losses.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub energy: EnergyConfig,
    /// Hinge margin between adjacent group means in the ranking loss.
    #[serde(default)]
    pub margin: f64,
    /// Extractor blocks whose features feed the ranking loss.
    #[serde(default = "default_rank_blocks")]
    pub rank_blocks: Vec<usize>,
    /// Extractor blocks whose features feed the cluster loss.
    #[serde(default = "default_cluster_blocks")]
    pub cluster_blocks: Vec<usize>,
}

fn default_rank_blocks() -> Vec<usize> {
    vec![0, 1, 2]
}

fn default_cluster_blocks() -> Vec<usize> {
    vec![3, 4, 5]
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            energy: EnergyConfig::default(),
            margin: 0.0,
            rank_blocks: default_rank_blocks(),
            cluster_blocks: default_cluster_blocks(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        for (name, blocks) in [("rank_blocks", &self.rank_blocks), ("cluster_blocks", &self.cluster_blocks)] {
            if blocks.is_empty() {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
            let mut sorted = blocks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != blocks.len() {
                return Err(Error::Config(format!("{name} contains duplicate block indices")));
            }
        }
        if self.rank_blocks.iter().any(|b| self.cluster_blocks.contains(b)) {
            return Err(Error::Config("rank_blocks and cluster_blocks must be disjoint".into()));
        }
        Ok(())
    }
}

/// A loss value together with its gradient with respect to the input features
/// and the distance to the nearest point of non-differentiability seen during
/// the computation (hinge activations flipping, the exponent clamp engaging,
/// a pair distance hitting zero). The gradient checker uses `smooth_margin`
/// to decide whether finite differences are trustworthy at this input.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grad: FeatureBatch,
    pub smooth_margin: f64,
}

/// Per-block breakdown of the combined structure regularizer.
#[derive(Debug, Clone)]
pub struct RegularizerBreakdown {
    pub total: f64,
    /// `(block index, ranking loss on that block)`.
    pub rank_terms: Vec<(usize, f64)>,
    /// `(block index, cluster loss on that block)`.
    pub cluster_terms: Vec<(usize, f64)>,
}

fn check_features(features: &FeatureBatch, groups: &RelationGroups, what: &str) -> Result<()> {
    if features.rows() != groups.len() {
        return Err(Error::DimensionMismatch { expected: groups.len(), actual: features.rows() });
    }
    features.ensure_finite(what)
}

/// Mean of the energies between `anchor` and every member of `members`,
/// summed in ascending value order. `scratch` is reused across calls.
fn group_mean(tables: &PairTables, anchor: usize, members: &[usize], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(members.iter().map(|&j| tables.energy(anchor, j)));
    sum_value_ordered(scratch) / members.len() as f64
}

/// Mean over the union of two member lists.
fn union_mean(tables: &PairTables, anchor: usize, lists: [&[usize]; 2], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    for list in lists {
        scratch.extend(list.iter().map(|&j| tables.energy(anchor, j)));
    }
    sum_value_ordered(scratch) / scratch.len() as f64
}

/// Accumulate `weight * dE/df` for the pair `(anchor, member)` into `grad`.
/// Also folds the pair's kink distances (zero-distance, exponent clamp) into
/// `smooth_margin`, since a pair only matters for smoothness when its energy
/// actually receives gradient.
#[allow(clippy::too_many_arguments)]
fn accumulate_pair_grad(
    features: &FeatureBatch,
    tables: &PairTables,
    cfg: &EnergyConfig,
    anchor: usize,
    member: usize,
    weight: f64,
    grad: &mut FeatureBatch,
    smooth_margin: &mut f64,
) {
    if weight == 0.0 {
        return;
    }
    let d = tables.dist(anchor, member);
    if d == 0.0 {
        // Coincident embeddings are a stable plateau, not a kink edge: a
        // rectifier collapse that maps two rows to the same point keeps them
        // coincident under any small parameter change (reviving a dead unit
        // needs a pre-activation near zero, which the forward pass tracks
        // separately), so the pair's energy is locally constant and skipping
        // its gradient is exact. Only a small *nonzero* distance sits on the
        // cone tip where finite differences go bad.
        return;
    }
    *smooth_margin = smooth_margin.min(d).min((cfg.beta * d - cfg.exponent_clamp).abs());
    if d < ZERO_DISTANCE_EPS {
        return;
    }
    let scale = weight * kernel_slope(d, cfg) / d;
    if scale == 0.0 {
        return;
    }
    let dim = features.dim();
    let fa = anchor * dim;
    let fm = member * dim;
    let data = grad.data_mut();
    for k in 0..dim {
        let diff = features.data()[fa + k] - features.data()[fm + k];
        data[fa + k] += scale * diff;
        data[fm + k] -= scale * diff;
    }
}

struct LossAccum {
    value: f64,
    grad: Option<FeatureBatch>,
    smooth_margin: f64,
}

fn rank_loss_impl(features: &FeatureBatch, groups: &RelationGroups, cfg: &LossConfig, want_grad: bool) -> Result<LossAccum> {
    cfg.validate()?;
    check_features(features, groups, "ranking loss features")?;
    let tables = pair_tables(features, &cfg.energy);
    let mut grad = want_grad.then(|| FeatureBatch::zeros(features.rows(), features.dim()));
    let mut smooth_margin = f64::INFINITY;
    let mut values = Vec::new();
    let mut scratch = Vec::new();

    for anchor in 0..groups.len() {
        if !groups.is_fully_populated(anchor) {
            continue;
        }
        let ss = groups.same_cat_same_dom(anchor);
        let sd = groups.same_cat_diff_dom(anchor);
        let ds = groups.diff_cat_same_dom(anchor);
        let dd = groups.diff_cat_diff_dom(anchor);
        let m_ss = group_mean(&tables, anchor, ss, &mut scratch);
        let m_sd = group_mean(&tables, anchor, sd, &mut scratch);
        let m_ds = group_mean(&tables, anchor, ds, &mut scratch);
        let m_dd = group_mean(&tables, anchor, dd, &mut scratch);

        let args = [m_ss - m_sd + cfg.margin, m_sd - m_ds + cfg.margin, m_ds - m_dd + cfg.margin];
        let mut anchor_value = 0.0;
        let mut active = [false; 3];
        for (k, a) in args.iter().enumerate() {
            smooth_margin = smooth_margin.min(a.abs());
            if *a > 0.0 {
                anchor_value += a;
                active[k] = true;
            }
        }
        values.push(anchor_value);

        if let Some(g) = grad.as_mut() {
            let h = |b: bool| if b { 1.0 } else { 0.0 };
            // d(anchor loss)/d(group mean), from the three hinges.
            let coeffs = [
                (ss, h(active[0])),
                (sd, h(active[1]) - h(active[0])),
                (ds, h(active[2]) - h(active[1])),
                (dd, -h(active[2])),
            ];
            for (members, c) in coeffs {
                if c == 0.0 {
                    continue;
                }
                let w = c / members.len() as f64;
                for &member in members {
                    accumulate_pair_grad(features, &tables, &cfg.energy, anchor, member, w, g, &mut smooth_margin);
                }
            }
        }
    }

    if values.is_empty() {
        return Err(Error::DegenerateBatch(
            "ranking loss: no anchor has all four relation groups populated".into(),
        ));
    }
    let n_valid = values.len() as f64;
    let value = sum_value_ordered(&mut values) / n_valid;
    if let Some(g) = grad.as_mut() {
        for v in g.data_mut() {
            *v /= n_valid;
        }
    }
    Ok(LossAccum { value, grad, smooth_margin })
}

/// Ranking loss averaged over all fully populated anchors.
pub fn rank_loss(features: &FeatureBatch, groups: &RelationGroups, cfg: &LossConfig) -> Result<f64> {
    Ok(rank_loss_impl(features, groups, cfg, false)?.value)
}

/// Ranking loss plus gradient with respect to the features.
pub fn rank_loss_with_grad(features: &FeatureBatch, groups: &RelationGroups, cfg: &LossConfig) -> Result<LossEval> {
    let acc = rank_loss_impl(features, groups, cfg, true)?;
    Ok(LossEval { value: acc.value, grad: acc.grad.unwrap(), smooth_margin: acc.smooth_margin })
}

fn cluster_loss_impl(
    features: &FeatureBatch,
    groups: &RelationGroups,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<LossAccum> {
    cfg.validate()?;
    check_features(features, groups, "cluster loss features")?;
    let tables = pair_tables(features, &cfg.energy);
    let clamp = cfg.energy.exponent_clamp;
    let mut grad = want_grad.then(|| FeatureBatch::zeros(features.rows(), features.dim()));
    let mut smooth_margin = f64::INFINITY;
    let mut values = Vec::new();
    let mut scratch = Vec::new();

    for anchor in 0..groups.len() {
        let ss = groups.same_cat_same_dom(anchor);
        let sd = groups.same_cat_diff_dom(anchor);
        let ds = groups.diff_cat_same_dom(anchor);
        let dd = groups.diff_cat_diff_dom(anchor);
        let n_same = ss.len() + sd.len();
        let n_diff = ds.len() + dd.len();
        if n_same == 0 || n_diff == 0 {
            continue;
        }
        let m_same = union_mean(&tables, anchor, [ss, sd], &mut scratch);
        let m_diff = union_mean(&tables, anchor, [ds, dd], &mut scratch);

        // The argument is clamped symmetrically: the positive cap prevents
        // overflow, the negative cap prevents underflow to zero so the loss
        // stays strictly positive. Both caps are gradient plateaus.
        let arg = m_same - m_diff;
        let value = arg.clamp(-clamp, clamp).exp();
        smooth_margin = smooth_margin.min((arg.abs() - clamp).abs());
        values.push(value);

        if let Some(g) = grad.as_mut() {
            if arg.abs() < clamp {
                for (members, sign) in [(ss, 1.0), (sd, 1.0), (ds, -1.0), (dd, -1.0)] {
                    if members.is_empty() {
                        continue;
                    }
                    let w = sign * value / if sign > 0.0 { n_same as f64 } else { n_diff as f64 };
                    for &member in members {
                        accumulate_pair_grad(features, &tables, &cfg.energy, anchor, member, w, g, &mut smooth_margin);
                    }
                }
            }
        }
    }

    if values.is_empty() {
        return Err(Error::DegenerateBatch(
            "cluster loss: no anchor has both a same-category and a different-category member".into(),
        ));
    }
    let n_valid = values.len() as f64;
    let value = sum_value_ordered(&mut values) / n_valid;
    if let Some(g) = grad.as_mut() {
        for v in g.data_mut() {
            *v /= n_valid;
        }
    }
    Ok(LossAccum { value, grad, smooth_margin })
}

/// Cluster loss averaged over all anchors with members on both sides of the
/// category split. Always strictly positive.
pub fn cluster_loss(features: &FeatureBatch, groups: &RelationGroups, cfg: &LossConfig) -> Result<f64> {
    Ok(cluster_loss_impl(features, groups, cfg, false)?.value)
}

/// Cluster loss plus gradient with respect to the features.
pub fn cluster_loss_with_grad(features: &FeatureBatch, groups: &RelationGroups, cfg: &LossConfig) -> Result<LossEval> {
    let acc = cluster_loss_impl(features, groups, cfg, true)?;
    Ok(LossEval { value: acc.value, grad: acc.grad.unwrap(), smooth_margin: acc.smooth_margin })
}

/// Combined regularizer: ranking loss on `cfg.rank_blocks`, cluster loss on
/// `cfg.cluster_blocks`, summed. `blocks` holds one feature batch per
/// extractor block, in block order.
pub fn regularizer_loss(blocks: &[FeatureBatch], groups: &RelationGroups, cfg: &LossConfig) -> Result<RegularizerBreakdown> {
    cfg.validate()?;
    let mut out = RegularizerBreakdown { total: 0.0, rank_terms: Vec::new(), cluster_terms: Vec::new() };
    for &b in &cfg.rank_blocks {
        let features = blocks
            .get(b)
            .ok_or_else(|| Error::Config(format!("rank block {b} out of range ({} blocks)", blocks.len())))?;
        let v = rank_loss(features, groups, cfg)?;
        out.total += v;
        out.rank_terms.push((b, v));
    }
    for &b in &cfg.cluster_blocks {
        let features = blocks
            .get(b)
            .ok_or_else(|| Error::Config(format!("cluster block {b} out of range ({} blocks)", blocks.len())))?;
        let v = cluster_loss(features, groups, cfg)?;
        out.total += v;
        out.cluster_terms.push((b, v));
    }
    Ok(out)
}
