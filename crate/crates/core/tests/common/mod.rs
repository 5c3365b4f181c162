//! Shared helpers for the integration tests: brute-force reference
//! implementations of the structure losses, and random labeled batches to
//! feed them.
//!
//! The references are deliberately naive — nested loops straight from the
//! definitions, index-order sums, no shared distance tables — so agreement
//! with the optimized implementations actually means something.

#![allow(dead_code)]

use enrank_core::{DatasetSpec, EnergyConfig, FeatureBatch, LossConfig, RhoSpec, Stream, TrainConfig};

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn energy_of(a: &[f64], b: &[f64], cfg: &EnergyConfig) -> f64 {
    (cfg.beta * euclid(a, b)).min(cfg.exponent_clamp).exp() - 1.0
}

fn mean_energy(batch: &FeatureBatch, anchor: usize, members: &[usize], cfg: &EnergyConfig) -> f64 {
    let sum: f64 = members.iter().map(|&j| energy_of(batch.row(anchor), batch.row(j), cfg)).sum();
    sum / members.len() as f64
}

fn members_where(
    cats: &[usize],
    doms: &[usize],
    anchor: usize,
    same_cat: bool,
    same_dom: Option<bool>,
) -> Vec<usize> {
    (0..cats.len())
        .filter(|&j| j != anchor)
        .filter(|&j| (cats[j] == cats[anchor]) == same_cat)
        .filter(|&j| same_dom.is_none_or(|sd| (doms[j] == doms[anchor]) == sd))
        .collect()
}

/// Reference ranking loss. `None` when no anchor has all four relation
/// groups, mirroring the library's degenerate-batch error.
pub fn brute_rank_loss(batch: &FeatureBatch, cats: &[usize], doms: &[usize], cfg: &LossConfig) -> Option<f64> {
    let mut sum = 0.0;
    let mut anchors = 0usize;
    for a in 0..batch.rows() {
        let ss = members_where(cats, doms, a, true, Some(true));
        let sd = members_where(cats, doms, a, true, Some(false));
        let ds = members_where(cats, doms, a, false, Some(true));
        let dd = members_where(cats, doms, a, false, Some(false));
        if ss.is_empty() || sd.is_empty() || ds.is_empty() || dd.is_empty() {
            continue;
        }
        let m_ss = mean_energy(batch, a, &ss, &cfg.energy);
        let m_sd = mean_energy(batch, a, &sd, &cfg.energy);
        let m_ds = mean_energy(batch, a, &ds, &cfg.energy);
        let m_dd = mean_energy(batch, a, &dd, &cfg.energy);
        sum += (m_ss - m_sd + cfg.margin).max(0.0)
            + (m_sd - m_ds + cfg.margin).max(0.0)
            + (m_ds - m_dd + cfg.margin).max(0.0);
        anchors += 1;
    }
    (anchors > 0).then(|| sum / anchors as f64)
}

/// Reference cluster loss. `None` when no anchor sees both a same-category
/// and a different-category member.
pub fn brute_cluster_loss(batch: &FeatureBatch, cats: &[usize], doms: &[usize], cfg: &LossConfig) -> Option<f64> {
    let clamp = cfg.energy.exponent_clamp;
    let mut sum = 0.0;
    let mut anchors = 0usize;
    for a in 0..batch.rows() {
        let same = members_where(cats, doms, a, true, None);
        let diff = members_where(cats, doms, a, false, None);
        if same.is_empty() || diff.is_empty() {
            continue;
        }
        let m_same = mean_energy(batch, a, &same, &cfg.energy);
        let m_diff = mean_energy(batch, a, &diff, &cfg.energy);
        sum += (m_same - m_diff).clamp(-clamp, clamp).exp();
        anchors += 1;
    }
    (anchors > 0).then(|| sum / anchors as f64)
}

/// Reference ranking-order violation rate: enumerate every admissible
/// (anchor, ss, sd, ds, dd) quadruple and count the ones whose energies are
/// not strictly increasing. `None` when no anchor admits a quadruple.
pub fn brute_violation_rate(batch: &FeatureBatch, cats: &[usize], doms: &[usize], cfg: &EnergyConfig) -> Option<f64> {
    let mut violations = 0u64;
    let mut total = 0u64;
    for a in 0..batch.rows() {
        let ss = members_where(cats, doms, a, true, Some(true));
        let sd = members_where(cats, doms, a, true, Some(false));
        let ds = members_where(cats, doms, a, false, Some(true));
        let dd = members_where(cats, doms, a, false, Some(false));
        for &i in &ss {
            let e_ss = energy_of(batch.row(a), batch.row(i), cfg);
            for &j in &sd {
                let e_sd = energy_of(batch.row(a), batch.row(j), cfg);
                for &k in &ds {
                    let e_ds = energy_of(batch.row(a), batch.row(k), cfg);
                    for &l in &dd {
                        let e_dd = energy_of(batch.row(a), batch.row(l), cfg);
                        total += 1;
                        if !(e_ss < e_sd && e_sd < e_ds && e_ds < e_dd) {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    (total > 0).then(|| violations as f64 / total as f64)
}

/// Random labeled batch: 4–16 rows, 2–5 feature dimensions, 2–3 categories,
/// 2–3 domains, labels drawn independently. Degenerate label layouts occur
/// naturally and are part of what gets compared.
pub fn random_labeled_batch(seed: u64) -> (FeatureBatch, Vec<usize>, Vec<usize>) {
    random_labeled_batch_scaled(seed, 1.0)
}

/// Random batch with features drawn from N(0, scale^2). Oracle comparisons
/// at absolute tolerances need `scale * beta` small enough that the cluster
/// exponential stays well under the magnitude where one f64 ulp exceeds the
/// tolerance.
pub fn random_labeled_batch_scaled(seed: u64, scale: f64) -> (FeatureBatch, Vec<usize>, Vec<usize>) {
    let mut s = Stream::from_seed(seed).child("oracle-batch");
    let rows = 4 + s.next_below(13) as usize;
    let dim = 2 + s.next_below(4) as usize;
    let n_cats = 2 + s.next_below(2) as usize;
    let n_doms = 2 + s.next_below(2) as usize;
    let cats: Vec<usize> = (0..rows).map(|_| s.next_below(n_cats as u64) as usize).collect();
    let doms: Vec<usize> = (0..rows).map(|_| s.next_below(n_doms as u64) as usize).collect();
    let mut rows_data = vec![vec![0.0; dim]; rows];
    for r in rows_data.iter_mut() {
        s.fill_gaussian(r);
        for v in r.iter_mut() {
            *v *= scale;
        }
    }
    (FeatureBatch::from_rows(&rows_data).unwrap(), cats, doms)
}

/// The dataset spec the acceptance experiments run on: the default recipe
/// with the spurious-cue rate zeroed in the held-out domain.
pub fn held_out_spec(target: usize, seed: u64) -> DatasetSpec {
    let base = DatasetSpec::default();
    let mut rho = match base.rho.resolve(base.domains) {
        Ok(r) => r,
        Err(e) => panic!("default rho must resolve: {e}"),
    };
    rho[target] = 0.0;
    DatasetSpec { rho: RhoSpec::PerDomain(rho), seed, ..base }
}

/// Default training config with only the seed changed.
pub fn seeded_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::default() }
}

/// The α=0 arm of the same config: identical in everything except that the
/// structure regularizer never fires.
pub fn baseline_of(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { alpha_early: 0.0, alpha_late: 0.0, ..cfg.clone() }
}
