//! Cross-camera association: the constrained distance matrix, greedy
//! hierarchical clustering into global identities, and an exhaustive
//! correlation-clustering solver for small instances.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::clm::{order_consistent, CameraLinkModel, MatchTimes};
use crate::error::{Error, Result};
use crate::fusion::pair_distance;
use crate::sct::Trajectory;

/// Largest instance [`brute_force_bip`] accepts.
pub const BIP_MAX_NODES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct NodeKey {
    pub camera_id: u32,
    pub local_id: u64,
}

/// Link bookkeeping for a finite matrix entry: `src` leaves the source camera
/// at `t_src`, `dst` reaches the destination camera at `t_dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkedPair {
    pub link_index: usize,
    pub src: usize,
    pub dst: usize,
    pub t_src: i64,
    pub t_dst: i64,
}

/// Symmetric trajectory distance matrix. Excluded entries hold `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    nodes: Vec<NodeKey>,
    dist: Vec<f64>,
    links: BTreeMap<(usize, usize), LinkedPair>,
}

impl DistanceMatrix {
    /// All entries excluded.
    pub fn new(nodes: Vec<NodeKey>) -> Self {
        let n = nodes.len();
        Self {
            nodes,
            dist: vec![f64::INFINITY; n * n],
            links: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeKey] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> NodeKey {
        self.nodes[i]
    }

    /// Finite distance, or `None` when excluded.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let d = self.dist[i * self.len() + j];
        d.is_finite().then_some(d)
    }

    /// Sets a symmetric entry. Diagonal and same-camera entries stay excluded.
    pub fn set(&mut self, i: usize, j: usize, d: Option<f64>) {
        if i == j || self.nodes[i].camera_id == self.nodes[j].camera_id {
            return;
        }
        let n = self.len();
        let v = d.filter(|d| d.is_finite()).unwrap_or(f64::INFINITY);
        self.dist[i * n + j] = v;
        self.dist[j * n + i] = v;
        if v.is_infinite() {
            self.links.remove(&(i.min(j), i.max(j)));
        }
    }

    pub fn set_link(&mut self, pair: LinkedPair) {
        let key = (pair.src.min(pair.dst), pair.src.max(pair.dst));
        self.links.insert(key, pair);
    }

    pub fn link(&self, i: usize, j: usize) -> Option<&LinkedPair> {
        self.links.get(&(i.min(j), i.max(j)))
    }

    /// Upper-triangle finite entries sorted by distance, then `(i, j)`.
    pub fn sorted_entries(&self) -> Vec<(f64, usize, usize)> {
        let n = self.len();
        let mut out: Vec<(f64, usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).filter_map(move |j| self.get(i, j).map(|d| (d, i, j))))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        out
    }

    pub fn finite_count(&self) -> usize {
        let n = self.len();
        (0..n)
            .map(|i| ((i + 1)..n).filter(|&j| self.get(i, j).is_some()).count())
            .sum()
    }

    /// Upper-triangle pairs from different cameras.
    pub fn cross_camera_count(&self) -> usize {
        let n = self.len();
        (0..n)
            .map(|i| {
                ((i + 1)..n)
                    .filter(|&j| self.nodes[i].camera_id != self.nodes[j].camera_id)
                    .count()
            })
            .sum()
    }
}

/// Builds the matrix over `trajectories`. With a link model an entry is
/// finite only when the pair is a valid transition in one direction; without
/// one every cross-camera pair is a candidate.
pub fn build_distance_matrix(trajectories: &[Trajectory], model: Option<&CameraLinkModel>) -> Result<DistanceMatrix> {
    let features: Vec<&[f64]> = trajectories
        .iter()
        .map(|t| {
            t.fused.as_ref().map(|f| f.full.as_slice()).ok_or_else(|| {
                Error::validation(format!(
                    "trajectory {} in camera {} has no fused feature",
                    t.local_id, t.camera_id
                ))
            })
        })
        .collect::<Result<_>>()?;
    let nodes: Vec<NodeKey> = trajectories
        .iter()
        .map(|t| NodeKey {
            camera_id: t.camera_id,
            local_id: t.local_id,
        })
        .collect();
    let n = nodes.len();

    let rows: Vec<Vec<(usize, f64, Option<LinkedPair>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .filter(|&j| nodes[i].camera_id != nodes[j].camera_id)
                .filter_map(|j| {
                    let link = match model {
                        None => None,
                        Some(m) => {
                            let fwd = m
                                .valid_transition(&trajectories[i], &trajectories[j])
                                .map(|t| (i, j, t));
                            let (src, dst, t) = fwd.or_else(|| {
                                m.valid_transition(&trajectories[j], &trajectories[i])
                                    .map(|t| (j, i, t))
                            })?;
                            Some(LinkedPair {
                                link_index: t.link_index,
                                src,
                                dst,
                                t_src: t.t_src,
                                t_dst: t.t_dst,
                            })
                        }
                    };
                    Some(pair_distance(features[i], features[j]).map(|d| (j, d, link)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut m = DistanceMatrix::new(nodes);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, d, link) in row {
            m.set(i, j, Some(d));
            if let Some(l) = link {
                m.set_link(l);
            }
        }
    }
    Ok(m)
}

/// A partition of the matrix nodes into global identities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GlobalAssignment {
    /// Global ID per node index, numbered from 1 in order of each cluster's
    /// lowest node index.
    pub labels: Vec<u64>,
    pub ids: BTreeMap<NodeKey, u64>,
    /// Accepted `(src, dst)` node pairs per link.
    pub link_matches: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl GlobalAssignment {
    fn from_roots(nodes: &[NodeKey], roots: &[usize], link_matches: BTreeMap<usize, Vec<(usize, usize)>>) -> Self {
        let mut next = 1u64;
        let mut id_of_root: BTreeMap<usize, u64> = BTreeMap::new();
        let labels: Vec<u64> = roots
            .iter()
            .map(|r| {
                *id_of_root.entry(*r).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        let ids = nodes.iter().copied().zip(labels.iter().copied()).collect();
        Self {
            labels,
            ids,
            link_matches,
        }
    }

    pub fn cluster_count(&self) -> usize {
        self.labels.iter().max().copied().unwrap_or(0) as usize
    }

    pub fn same(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Greedy agglomerative assignment: entries are scanned in ascending order and
/// a pair below `delta` joins its two clusters unless that would put two
/// trajectories of the same camera together or break the vehicle order on
/// its link. Rejected entries are excluded from later passes.
pub fn hierarchical_cluster(m: &DistanceMatrix, delta: f64, iterations: usize) -> GlobalAssignment {
    let n = m.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut cameras: Vec<Vec<u32>> = m.nodes.iter().map(|k| vec![k.camera_id]).collect();
    let mut link_matches: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    let mut entries = m.sorted_entries();

    for _ in 0..iterations.max(1) {
        let mut kept = Vec::with_capacity(entries.len());
        for (d, i, j) in entries {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri == rj {
                kept.push((d, i, j));
                continue;
            }
            let camera_conflict = cameras[ri].iter().any(|c| cameras[rj].contains(c));
            let order_ok = m.link(i, j).is_none_or(|l| {
                let this = MatchTimes {
                    t_src: l.t_src,
                    t_dst: l.t_dst,
                };
                link_matches.get(&l.link_index).is_none_or(|prev| {
                    prev.iter().all(|&(s, t)| {
                        let p = m.link(s, t).expect("accepted pair has link");
                        order_consistent(
                            this,
                            MatchTimes {
                                t_src: p.t_src,
                                t_dst: p.t_dst,
                            },
                        )
                    })
                })
            });
            if d >= delta || camera_conflict || !order_ok {
                continue;
            }
            parent[rj] = ri;
            let moved = std::mem::take(&mut cameras[rj]);
            cameras[ri].extend(moved);
            if let Some(l) = m.link(i, j) {
                link_matches.entry(l.link_index).or_default().push((l.src, l.dst));
            }
            kept.push((d, i, j));
        }
        entries = kept;
    }

    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    GlobalAssignment::from_roots(&m.nodes, &roots, link_matches)
}

/// `Σ (delta − M_ij)` over co-clustered pairs, or `None` if an excluded pair
/// shares a cluster. `labels` may use any cluster naming.
pub fn partition_objective<L: PartialEq>(m: &DistanceMatrix, delta: f64, labels: &[L]) -> Option<f64> {
    let n = m.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                total += delta - m.get(i, j)?;
            }
        }
    }
    Some(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BipSolution {
    pub assignment: GlobalAssignment,
    pub objective: f64,
}

/// Exact correlation clustering by enumerating every set partition (as
/// restricted growth strings, in lexicographic order). The first partition
/// reaching the best objective wins.
pub fn brute_force_bip(m: &DistanceMatrix, delta: f64) -> Result<BipSolution> {
    let n = m.len();
    if n > BIP_MAX_NODES {
        return Err(Error::Size(format!(
            "exhaustive assignment supports at most {BIP_MAX_NODES} trajectories, got {n}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut rgs = vec![0usize; n];
    let mut maxes = vec![0usize; n];
    loop {
        if let Some(obj) = partition_objective(m, delta, &rgs) {
            if best.as_ref().is_none_or(|(b, _)| obj > *b + 1e-12) {
                best = Some((obj, rgs.clone()));
            }
        }
        // next restricted growth string
        let mut k = n;
        loop {
            if k <= 1 {
                let (objective, labels) = best.unwrap_or((0.0, (0..n).collect()));
                return Ok(BipSolution {
                    assignment: GlobalAssignment::from_roots(&m.nodes, &labels, BTreeMap::new()),
                    objective,
                });
            }
            k -= 1;
            if rgs[k] <= maxes[k - 1] {
                rgs[k] += 1;
                let mx = maxes[k - 1].max(rgs[k]);
                maxes[k] = mx;
                for t in (k + 1)..n {
                    rgs[t] = 0;
                    maxes[t] = mx;
                }
                break;
            }
        }
    }
}
