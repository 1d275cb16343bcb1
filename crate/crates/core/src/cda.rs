//! Conditional distribution alignment: discriminative and structural
//! pseudo-labels, their consistency filter, confidence-scheduled fusion
//! and the prototype-guided alignment loss.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mda::PrototypeBank;
use crate::numerics::tensor::{argmax, softmax_in_place, squared_dist, Tensor};
use crate::numerics::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub sample_id: usize,
    pub p_disc: Vec<f64>,
    pub p_struct: Vec<f64>,
    pub y_disc: usize,
    pub y_struct: usize,
    pub consistent: bool,
    pub fused_p: Vec<f64>,
    pub fused_y: usize,
    pub confidence: f64,
    pub selected: bool,
}

/// How the two pseudo-label views are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    /// Discriminative and structural labels must agree.
    #[default]
    Dual,
    /// Only the discriminative view; every sample is eligible.
    SingleDiscriminative,
}

/// Row-wise `softmax(-d(x, center_c))`.
pub fn distance_softmax(feats: &Tensor, centers: &Tensor) -> Result<Tensor> {
    if feats.cols() != centers.cols() {
        return Err(Error::dim("distance_softmax", feats.shape_str(), centers.shape_str()));
    }
    let c = centers.rows();
    let mut out = Tensor::zeros(feats.rows(), c);
    for (i, row) in feats.iter_rows().enumerate() {
        let o = out.row_mut(i);
        for (k, center) in centers.iter_rows().enumerate() {
            o[k] = -squared_dist(row, center).sqrt();
        }
        softmax_in_place(o);
    }
    Ok(out)
}

/// Discriminative pseudo-label probabilities: per-branch softmax over
/// negative prototype distances, mixed by the branch weights.
///
/// `target_feats[m]` holds the target features as seen by branch `m`.
pub fn disc_pseudo_probs(
    target_feats: &[Tensor],
    banks: &[PrototypeBank],
    weights: &[f64],
) -> Result<Tensor> {
    if target_feats.len() != banks.len() || banks.len() != weights.len() || banks.is_empty() {
        return Err(Error::dim(
            "disc_pseudo_probs",
            format!("{} feature sets / {} banks", target_feats.len(), banks.len()),
            format!("{} weights", weights.len()),
        ));
    }
    let mut out: Option<Tensor> = None;
    for ((feats, bank), &w) in target_feats.iter().zip(banks).zip(weights) {
        let p = distance_softmax(feats, &bank.matrix()?)?;
        match out.as_mut() {
            None => out = Some(p.map(|v| w * v)),
            Some(acc) => {
                if acc.shape() != p.shape() {
                    return Err(Error::dim("disc_pseudo_probs", acc.shape_str(), p.shape_str()));
                }
                for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                    *a += w * v;
                }
            }
        }
    }
    Ok(out.expect("at least one branch"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub centers: Tensor,
    pub assignment: Vec<usize>,
    pub iteration_count: usize,
    pub converged: bool,
    /// Sum of squared distances to assigned centers after each iteration.
    pub objective_history: Vec<f64>,
}

fn nearest(row: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter_rows().enumerate() {
        let d = squared_dist(row, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn objective(feats: &Tensor, centers: &Tensor, assignment: &[usize]) -> f64 {
    feats
        .iter_rows()
        .zip(assignment)
        .map(|(r, &k)| squared_dist(r, centers.row(k)))
        .sum()
}

/// Lloyd's algorithm from the given centers.
///
/// Each iteration assigns samples to the nearest center (ties to the lowest
/// index) and moves centers to their cluster means. An empty cluster is
/// re-seeded at the sample farthest from its former center. Stops once the
/// largest center shift falls below `tol` or after `max_iter` iterations.
pub fn cluster_target(feats: &Tensor, init_centers: &Tensor, max_iter: usize, tol: f64) -> Result<ClusterState> {
    let (n, c) = (feats.rows(), init_centers.rows());
    if c > n || c == 0 {
        return Err(Error::InfeasibleClustering {
            clusters: c,
            samples: n,
        });
    }
    if feats.cols() != init_centers.cols() {
        return Err(Error::dim("cluster_target", feats.shape_str(), init_centers.shape_str()));
    }
    let d = feats.cols();
    let mut centers = init_centers.clone();
    let mut assignment = vec![0; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        for (i, row) in feats.iter_rows().enumerate() {
            assignment[i] = nearest(row, &centers).0;
        }
        let mut sums = vec![0.0; c * d];
        let mut counts = vec![0usize; c];
        for (row, &k) in feats.iter_rows().zip(&assignment) {
            counts[k] += 1;
            for (s, v) in sums[k * d..(k + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for k in 0..c {
            let new: Vec<f64> = if counts[k] > 0 {
                sums[k * d..(k + 1) * d]
                    .iter()
                    .map(|s| s / counts[k] as f64)
                    .collect()
            } else {
                let old = centers.row(k);
                let far = feats
                    .iter_rows()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, r)| {
                        let dist = squared_dist(r, old);
                        if dist > best.1 {
                            (i, dist)
                        } else {
                            best
                        }
                    })
                    .0;
                feats.row(far).to_vec()
            };
            shift = shift.max(squared_dist(centers.row(k), &new).sqrt());
            centers.row_mut(k).copy_from_slice(&new);
        }
        history.push(objective(feats, &centers, &assignment));
        if shift < tol {
            converged = true;
            break;
        }
    }
    for (i, row) in feats.iter_rows().enumerate() {
        assignment[i] = nearest(row, &centers).0;
    }
    Ok(ClusterState {
        centers,
        assignment,
        iteration_count: iterations,
        converged,
        objective_history: history,
    })
}

/// Structural pseudo-label probabilities from cluster centers.
pub fn struct_pseudo_probs(target_feats: &Tensor, state: &ClusterState) -> Result<Tensor> {
    distance_softmax(target_feats, &state.centers)
}

/// Fusion schedule `1 / (1 + exp(-k (t - T/2)))`.
pub fn fusion_chi(epoch: f64, total_epochs: f64, k: f64) -> f64 {
    1.0 / (1.0 + (-k * (epoch - total_epochs / 2.0)).exp())
}

/// `chi * p_struct + (1 - chi) * p_disc` and its argmax (ties to the lowest class).
pub fn fuse_pseudo(p_disc: &[f64], p_struct: &[f64], chi: f64) -> (Vec<f64>, usize) {
    let fused: Vec<f64> = p_disc
        .iter()
        .zip(p_struct)
        .map(|(d, s)| chi * s + (1.0 - chi) * d)
        .collect();
    let y = argmax(&fused);
    (fused, y)
}

/// One record per target row. In single mode the structural view is
/// ignored and every record counts as consistent.
pub fn build_records(p_disc: &Tensor, p_struct: &Tensor, chi: f64, mode: PseudoLabelMode) -> Result<Vec<PseudoLabelRecord>> {
    if p_disc.shape() != p_struct.shape() {
        return Err(Error::dim("build_records", p_disc.shape_str(), p_struct.shape_str()));
    }
    let records = (0..p_disc.rows())
        .map(|i| {
            let pd = p_disc.row(i).to_vec();
            let ps = p_struct.row(i).to_vec();
            let y_disc = argmax(&pd);
            let y_struct = argmax(&ps);
            let (fused_p, fused_y, consistent) = match mode {
                PseudoLabelMode::Dual => {
                    let (f, y) = fuse_pseudo(&pd, &ps, chi);
                    (f, y, y_disc == y_struct)
                }
                PseudoLabelMode::SingleDiscriminative => (pd.clone(), y_disc, true),
            };
            let confidence = fused_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            PseudoLabelRecord {
                sample_id: i,
                p_disc: pd,
                p_struct: ps,
                y_disc,
                y_struct,
                consistent,
                fused_p,
                fused_y,
                confidence,
                selected: false,
            }
        })
        .collect();
    Ok(records)
}

/// Marks the `min(floor(t N / T), |consistent|)` most confident consistent
/// records as selected (ties to the lower sample id) and returns their ids.
pub fn select_consistent(records: &mut [PseudoLabelRecord], epoch: usize, total_epochs: usize) -> Vec<usize> {
    let n = records.len();
    let quota = (epoch.min(total_epochs) * n).checked_div(total_epochs).unwrap_or(0);
    let mut eligible: Vec<usize> = (0..n).filter(|&i| records[i].consistent).collect();
    eligible.sort_by(|&a, &b| {
        records[b]
            .confidence
            .total_cmp(&records[a].confidence)
            .then(records[a].sample_id.cmp(&records[b].sample_id))
    });
    eligible.truncate(quota);
    records.iter_mut().for_each(|r| r.selected = false);
    for &i in &eligible {
        records[i].selected = true;
    }
    let mut ids: Vec<usize> = eligible.iter().map(|&i| records[i].sample_id).collect();
    ids.sort_unstable();
    ids
}

/// Prototype-guided alignment for one branch over the rows of `target`
/// listed in `rows` with pseudo-labels `labels`:
/// `mean(d(f, mu_y)) - beta * mean(sum_{c != y} d(f, mu_c))`.
pub fn pgca_loss(
    g: &mut Graph,
    target: Var,
    rows: &[usize],
    labels: &[usize],
    bank: &PrototypeBank,
    beta: f64,
) -> Result<Var> {
    if rows.len() != labels.len() {
        return Err(Error::dim("pgca_loss", rows.len(), labels.len()));
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let protos = bank.matrix()?;
    let c = protos.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Label {
            label: bad,
            classes: c,
        });
    }
    let picked = g.gather_rows(target, rows)?;
    let dist = g.proto_dist(picked, &protos)?;
    let n = rows.len() as f64;
    let mut w = Tensor::filled(rows.len(), c, -beta / n);
    for (i, &y) in labels.iter().enumerate() {
        w.set(i, y, 1.0 / n);
    }
    g.weighted_sum(dist, w)
}

/// Value of the branch-averaged alignment loss; `target_feats[m]` are the
/// target features seen by branch `m`.
pub fn pgca_loss_value(
    target_feats: &[Tensor],
    rows: &[usize],
    labels: &[usize],
    banks: &[PrototypeBank],
    beta: f64,
) -> Result<f64> {
    if target_feats.len() != banks.len() || banks.is_empty() {
        return Err(Error::dim("pgca_loss", target_feats.len(), banks.len()));
    }
    let mut g = Graph::new();
    let mut total = 0.0;
    for (f, bank) in target_feats.iter().zip(banks) {
        let v = g.constant(f.clone());
        let l = pgca_loss(&mut g, v, rows, labels, bank, beta)?;
        total += g.scalar(l);
    }
    Ok(total / banks.len() as f64)
}

/// Writes the per-epoch pseudo-label audit. `true_labels` is used only
/// for the diagnostic column.
pub fn write_pseudo_audit(
    path: &Path,
    rounds: &[(usize, Vec<PseudoLabelRecord>)],
    true_labels: Option<&[usize]>,
) -> Result<()> {
    let mut out = String::from("epoch,sample_id,y_disc,y_struct,consistent,confidence,selected,fused_y");
    if true_labels.is_some() {
        out.push_str(",true_label");
    }
    out.push('\n');
    for (epoch, records) in rounds {
        for r in records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.16e},{},{}",
                epoch,
                r.sample_id,
                r.y_disc,
                r.y_struct,
                r.consistent,
                r.confidence,
                r.selected,
                r.fused_y
            ));
            if let Some(t) = true_labels {
                out.push_str(&format!(",{}", t[r.sample_id]));
            }
            out.push('\n');
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn disc_probs_examples() {
        let bank = PrototypeBank::from_matrix(&t(&[&[0.0], &[1.0]]));
        let x = t(&[&[0.0]]);
        let p = disc_pseudo_probs(std::slice::from_ref(&x), std::slice::from_ref(&bank), &[1.0]).unwrap();
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((p.get(0, 1) - 0.2689).abs() < 1e-4);

        let two = disc_pseudo_probs(&[x.clone(), x.clone()], &[bank.clone(), bank], &[0.8, 0.2]).unwrap();
        for (a, b) in two.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        let eq = PrototypeBank::from_matrix(&t(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]));
        let p = disc_pseudo_probs(&[t(&[&[0.0, 0.0]])], &[eq], &[1.0]).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn lloyd_one_dimensional() {
        let x = t(&[&[0.0], &[1.0], &[10.0], &[11.0]]);
        let s = cluster_target(&x, &t(&[&[0.5], &[10.5]]), 50, 1e-9).unwrap();
        assert_eq!(s.centers.data(), &[0.5, 10.5]);
        assert_eq!(s.assignment, vec![0, 0, 1, 1]);
        assert!(s.converged);
        assert_eq!(s.iteration_count, 1);
    }

    #[test]
    fn lloyd_identical_points() {
        let x = t(&[&[2.0, 2.0], &[2.0, 2.0], &[2.0, 2.0]]);
        let s = cluster_target(&x, &t(&[&[0.0, 0.0], &[5.0, 5.0]]), 50, 1e-9).unwrap();
        assert!(s.converged);
        assert_eq!(s.assignment, vec![0, 0, 0]);
        assert_eq!(s.centers.row(0), &[2.0, 2.0]);
    }

    #[test]
    fn lloyd_infeasible() {
        let x = t(&[&[0.0]]);
        assert!(matches!(
            cluster_target(&x, &t(&[&[0.0], &[1.0]]), 10, 1e-9),
            Err(Error::InfeasibleClustering { clusters: 2, samples: 1 })
        ));
    }

    #[test]
    fn struct_probs() {
        let s = ClusterState {
            centers: t(&[&[1.0], &[2.0]]),
            assignment: vec![],
            iteration_count: 0,
            converged: true,
            objective_history: vec![],
        };
        let p = struct_pseudo_probs(&t(&[&[0.0]]), &s).unwrap();
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn chi_values() {
        assert_eq!(fusion_chi(50.0, 100.0, 0.08), 0.5);
        let chi0 = fusion_chi(0.0, 100.0, 8.0 / 100.0);
        assert!((chi0 - 1.0 / (1.0 + 4f64.exp())).abs() < 1e-15);
        assert!((chi0 - 0.0180).abs() < 1e-4);
    }

    #[test]
    fn fuse_example() {
        let (p, y) = fuse_pseudo(&[0.6, 0.4], &[0.8, 0.2], 0.5);
        assert!((p[0] - 0.7).abs() < 1e-15 && (p[1] - 0.3).abs() < 1e-15);
        assert_eq!(y, 0);
    }

    fn records_with(consistent: &[bool], conf: &[f64]) -> Vec<PseudoLabelRecord> {
        consistent
            .iter()
            .zip(conf)
            .enumerate()
            .map(|(i, (&c, &p))| PseudoLabelRecord {
                sample_id: i,
                p_disc: vec![p, 1.0 - p],
                p_struct: vec![p, 1.0 - p],
                y_disc: 0,
                y_struct: usize::from(!c),
                consistent: c,
                fused_p: vec![p, 1.0 - p],
                fused_y: 0,
                confidence: p,
                selected: false,
            })
            .collect()
    }

    #[test]
    fn selection_quota() {
        let mut r = records_with(&[true; 100], &[0.9; 100]);
        assert_eq!(select_consistent(&mut r, 1, 50).len(), 2);
        assert_eq!(select_consistent(&mut r, 50, 50).len(), 100);
        let mut none = records_with(&[false; 10], &[0.9; 10]);
        assert!(select_consistent(&mut none, 10, 10).is_empty());
    }

    #[test]
    fn selection_prefers_confidence_then_id() {
        let mut r = records_with(&[true, true, false, true], &[0.6, 0.9, 0.99, 0.9]);
        let ids = select_consistent(&mut r, 2, 4);
        assert_eq!(ids, vec![1, 3]);
        assert!(!r[2].selected);
    }

    #[test]
    fn pgca_examples() {
        let bank = PrototypeBank::from_matrix(&t(&[&[2.0, 0.0], &[0.0, 5.0]]));
        let x = t(&[&[0.0, 0.0]]);
        let l = pgca_loss_value(std::slice::from_ref(&x), &[0], &[0], std::slice::from_ref(&bank), 0.1).unwrap();
        assert!((l - 1.5).abs() < 1e-12);
        let at = t(&[&[2.0, 0.0]]);
        assert_eq!(pgca_loss_value(&[at], &[0], &[0], std::slice::from_ref(&bank), 0.0).unwrap(), 0.0);
        let l0 = pgca_loss_value(&[x], &[0], &[0], &[bank], 0.0).unwrap();
        assert!((l0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pgca_empty_selection_is_zero() {
        let bank = PrototypeBank::from_matrix(&t(&[&[2.0, 0.0], &[0.0, 5.0]]));
        let l = pgca_loss_value(&[t(&[&[1.0, 1.0]])], &[], &[], &[bank], 0.1).unwrap();
        assert_eq!(l, 0.0);
    }
}
