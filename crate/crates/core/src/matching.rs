//! Cross-frame object identification: Hungarian assignment on embedding
//! distances with class, scale and symmetry gates, top-k selection by
//! surviving NOC constraints, and union-find track building.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observations::ObjectObservation;
use crate::procrustes::{kabsch_filter, FilterConfig};
use crate::scalar::Real;

/// Minimum NOC-depth pairs an observation must keep after filtering.
pub const MIN_NOC_PAIRS: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("embedding length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid match config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub embed_threshold: f64,
    pub fallback_threshold: f64,
    pub sequence_loop_threshold: f64,
    pub max_scale_ratio: f64,
    pub drop_symmetric: bool,
    pub top_k: usize,
    /// Filter used to count surviving NOC-depth constraints per candidate.
    pub noc_filter: FilterConfig,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            embed_threshold: 0.05,
            fallback_threshold: 0.15,
            sequence_loop_threshold: 0.04,
            max_scale_ratio: 1.5,
            drop_symmetric: true,
            top_k: 1,
            noc_filter: FilterConfig::pairwise().with_min_pairs(MIN_NOC_PAIRS),
        }
    }
}

impl MatchConfig {
    /// Same gates with the sequence threshold as the strict threshold.
    pub fn for_sequence(&self) -> Self {
        Self { embed_threshold: self.sequence_loop_threshold, ..*self }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let bad = |m: String| Err(MatchError::InvalidConfig(m));
        if !(self.embed_threshold > 0.0 && self.embed_threshold <= self.fallback_threshold) {
            return bad(format!(
                "need 0 < embed_threshold <= fallback_threshold, got {} and {}",
                self.embed_threshold, self.fallback_threshold
            ));
        }
        if !(self.sequence_loop_threshold > 0.0) {
            return bad(format!("sequence_loop_threshold must be positive, got {}", self.sequence_loop_threshold));
        }
        if !(self.max_scale_ratio > 1.0) {
            return bad(format!("max_scale_ratio must exceed 1, got {}", self.max_scale_ratio));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        self.noc_filter.validate().map_err(|e| MatchError::InvalidConfig(e.to_string()))
    }
}

/// Euclidean distance between two embeddings.
pub fn embedding_distance(a: &[f64], b: &[f64]) -> Result<f64, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Minimum-cost maximum matching of a rectangular cost matrix.
///
/// Returns, for each row, the assigned column. Exactly `min(rows, cols)` rows
/// are assigned.
pub fn hungarian<T: Real>(cost: &DMatrix<T>) -> Vec<Option<usize>> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let by_col = hungarian(&cost.transpose());
        let mut rows = vec![None; n];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                rows[r] = Some(c);
            }
        }
        return rows;
    }

    // Shortest augmenting paths with potentials; 1-based, column 0 is virtual.
    let inf = T::lit(f64::INFINITY);
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            rows[owner[j] - 1] = Some(j - 1);
        }
    }
    rows
}

/// Total cost of an assignment produced by [`hungarian`].
pub fn assignment_cost<T: Real>(cost: &DMatrix<T>, assignment: &[Option<usize>]) -> T {
    assignment.iter().enumerate().filter_map(|(r, c)| c.map(|c| cost[(r, c)])).fold(T::zero(), |acc, c| acc + c)
}

/// A gated candidate pair between two frames' observation lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectMatch {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    /// NOC-depth pairs surviving the filter in both observations combined;
    /// zero when either observation keeps fewer than the filter minimum.
    pub constraint_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchOutcome {
    pub matches: Vec<ObjectMatch>,
    pub used_fallback: bool,
}

impl MatchOutcome {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.a, m.b)).collect()
    }
}

/// Largest per-axis ratio between two scale estimates.
pub fn scale_ratio(a: &ObjectObservation, b: &ObjectObservation) -> f64 {
    (0..3)
        .map(|k| {
            let (x, y) = (a.scale_estimate[k], b.scale_estimate[k]);
            (x / y).max(y / x)
        })
        .fold(1.0, f64::max)
}

/// Filtered constraint count of a single observation.
pub fn surviving_constraints(obs: &ObjectObservation, filter: &FilterConfig) -> usize {
    kabsch_filter(&obs.scaled_noc(), &obs.depth_points, filter).map(|r| r.inlier_count()).unwrap_or(0)
}

fn candidates(
    a: &[ObjectObservation],
    b: &[ObjectObservation],
    cfg: &MatchConfig,
    threshold: f64,
) -> Vec<(usize, usize, f64)> {
    let keep = |o: &ObjectObservation| !(cfg.drop_symmetric && o.symmetry.is_symmetric());
    let mut classes: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, o) in a.iter().enumerate().filter(|(_, o)| keep(o)) {
        classes.entry(o.class_label).or_default().0.push(i);
    }
    for (j, o) in b.iter().enumerate().filter(|(_, o)| keep(o)) {
        classes.entry(o.class_label).or_default().1.push(j);
    }

    let mut out = Vec::new();
    for (rows, cols) in classes.values() {
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let dist = DMatrix::from_fn(rows.len(), cols.len(), |r, c| {
            embedding_distance(&a[rows[r]].embedding, &b[cols[c]].embedding).unwrap_or(f64::INFINITY)
        });
        // Length mismatches never match; keep the matrix finite for the solver.
        let cost = dist.map(|d| if d.is_finite() { d } else { f64::MAX / 4.0 });
        for (r, c) in hungarian(&cost).into_iter().enumerate() {
            let Some(c) = c else { continue };
            let (i, j, d) = (rows[r], cols[c], dist[(r, c)]);
            if d < threshold && scale_ratio(&a[i], &b[j]) < cfg.max_scale_ratio {
                out.push((i, j, d));
            }
        }
    }
    out.sort_by_key(|&(i, j, _)| (i, j));
    out
}

/// Matches the objects of two frames.
///
/// Candidates come from per-class Hungarian assignment on embedding distance,
/// gated by `embed_threshold` and `max_scale_ratio`; when none pass and no
/// keypoints are available the gate is relaxed to `fallback_threshold`. The
/// `top_k` candidates with the most surviving NOC constraints are returned
/// (ties by smaller distance, then lower indices).
pub fn match_pair(
    frame_a: &[ObjectObservation],
    frame_b: &[ObjectObservation],
    cfg: &MatchConfig,
    keypoints_present: bool,
) -> MatchOutcome {
    let mut used_fallback = false;
    let mut found = candidates(frame_a, frame_b, cfg, cfg.embed_threshold);
    if found.is_empty() && !keypoints_present {
        found = candidates(frame_a, frame_b, cfg, cfg.fallback_threshold);
        used_fallback = !found.is_empty();
    }

    let mut counts: HashMap<(bool, usize), usize> = HashMap::new();
    let mut count = |side: bool, idx: usize, obs: &ObjectObservation| {
        *counts.entry((side, idx)).or_insert_with(|| surviving_constraints(obs, &cfg.noc_filter))
    };
    let mut matches: Vec<ObjectMatch> = found
        .into_iter()
        .map(|(a, b, distance)| {
            let ca = count(false, a, &frame_a[a]);
            let cb = count(true, b, &frame_b[b]);
            let constraint_count = if ca == 0 || cb == 0 { 0 } else { ca + cb };
            ObjectMatch { a, b, distance, constraint_count }
        })
        .collect();
    matches.sort_by(|x, y| {
        y.constraint_count
            .cmp(&x.constraint_count)
            .then(x.distance.total_cmp(&y.distance))
            .then((x.a, x.b).cmp(&(y.a, y.b)))
    });
    matches.truncate(cfg.top_k.max(1));
    MatchOutcome { matches, used_fallback }
}

/// Observation key: `(frame, detection_id)`.
pub type ObsKey = (usize, u32);

/// An accepted match between two observations in different frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackEdge {
    pub a: ObsKey,
    pub b: ObsKey,
    pub distance: f64,
}

/// One physical object followed across frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub track_id: usize,
    /// Members ordered by frame, at most one per frame.
    pub members: Vec<ObsKey>,
    pub class_label: u32,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

fn components(n: usize, edges: &[(usize, usize)], active: &[bool]) -> Vec<usize> {
    let mut uf = UnionFind::new(n);
    for (e, &(a, b)) in edges.iter().enumerate() {
        if active[e] {
            uf.union(a, b);
        }
    }
    (0..n).map(|i| uf.find(i)).collect()
}

/// Groups observations into tracks from pairwise matches.
///
/// Every observation ends up in exactly one track. Components holding two
/// observations of the same frame lose their highest-distance edge (the later
/// edge on ties) until no such conflict remains. Edges between different
/// classes, unknown observations or the same frame are ignored.
pub fn build_tracks(observations: &[ObjectObservation], edges: &[TrackEdge]) -> Vec<ObjectTrack> {
    let mut keys: Vec<ObsKey> = observations.iter().map(|o| (o.frame, o.detection_id)).collect();
    keys.sort();
    keys.dedup();
    let index: HashMap<ObsKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let class: HashMap<ObsKey, u32> = observations.iter().map(|o| ((o.frame, o.detection_id), o.class_label)).collect();

    let mut ids = Vec::new();
    let mut dist = Vec::new();
    for e in edges {
        let (Some(&ia), Some(&ib)) = (index.get(&e.a), index.get(&e.b)) else { continue };
        if e.a.0 == e.b.0 || class[&e.a] != class[&e.b] {
            continue;
        }
        ids.push((ia, ib));
        dist.push(e.distance);
    }
    let mut active = vec![true; ids.len()];

    let comp = loop {
        let comp = components(keys.len(), &ids, &active);
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        let mut conflicted = None;
        for (i, k) in keys.iter().enumerate() {
            if seen.insert((comp[i], k.0), i).is_some() {
                conflicted = Some(comp[i]);
                break;
            }
        }
        let Some(root) = conflicted else { break comp };
        let worst = (0..ids.len())
            .filter(|&e| active[e] && comp[ids[e].0] == root)
            .max_by(|&x, &y| dist[x].total_cmp(&dist[y]).then(x.cmp(&y)))
            .expect("conflicting component has an edge");
        active[worst] = false;
    };

    let mut groups: BTreeMap<usize, Vec<ObsKey>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(comp[i]).or_default().push(*k);
    }
    let mut members: Vec<Vec<ObsKey>> = groups.into_values().collect();
    members.sort();
    members
        .into_iter()
        .enumerate()
        .map(|(track_id, m)| ObjectTrack { track_id, class_label: class[&m[0]], members: m })
        .collect()
}
