//! IoU-based multi-object tracker.
//!
//! Stands in for appearance-based tracking with the same lifecycle
//! parameters: a track is confirmed after `n_init` consecutive hits,
//! survives `max_age` missed frames, and detections associate to tracks
//! by minimum-cost assignment on `1 - IoU` gated at the overlap
//! threshold.

use super::BoundingBox;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerParams {
    pub iou_threshold: f64,
    pub max_age: u32,
    pub n_init: u32,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            max_age: 300,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone)]
struct Track {
    id: u64,
    bbox: BoundingBox,
    hits: u32,
    misses: u32,
    confirmed: bool,
}

/// Tracker state across frames. IDs are monotonically increasing and
/// never reused within a run.
#[derive(Debug, Clone)]
pub struct IouTracker {
    params: TrackerParams,
    tracks: Vec<Track>,
    next_id: u64,
}

impl IouTracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    /// Advance one frame. Returns `(id, bbox)` for every detection that
    /// associated with a confirmed track.
    pub fn update(&mut self, detections: &[BoundingBox]) -> Vec<(u64, BoundingBox)> {
        let n = self.tracks.len();
        let m = detections.len();

        // cost matrix on 1 - IoU; pairs below the overlap threshold are gated
        let big = 1e6;
        let assignment = if n > 0 && m > 0 {
            let mut cost = vec![vec![big; m]; n];
            for (ti, t) in self.tracks.iter().enumerate() {
                for (di, d) in detections.iter().enumerate() {
                    let iou = t.bbox.iou(d);
                    if iou >= self.params.iou_threshold {
                        cost[ti][di] = 1.0 - iou;
                    }
                }
            }
            hungarian(&cost)
        } else {
            vec![None; n]
        };

        let mut det_used = vec![false; m];
        let mut out = Vec::new();
        for (ti, assigned) in assignment.iter().enumerate() {
            let t = &mut self.tracks[ti];
            match assigned {
                Some(di) => {
                    det_used[*di] = true;
                    t.bbox = detections[*di];
                    t.hits += 1;
                    t.misses = 0;
                    if t.hits >= self.params.n_init {
                        t.confirmed = true;
                    }
                    if t.confirmed {
                        out.push((t.id, t.bbox));
                    }
                }
                None => {
                    t.misses += 1;
                }
            }
        }

        // tentative tracks need consecutive hits; a single miss discards them
        let max_age = self.params.max_age;
        self.tracks
            .retain(|t| if t.confirmed { t.misses <= max_age } else { t.misses == 0 });

        for (di, d) in detections.iter().enumerate() {
            if det_used[di] {
                continue;
            }
            let confirmed = self.params.n_init <= 1;
            self.tracks.push(Track {
                id: self.next_id,
                bbox: *d,
                hits: 1,
                misses: 0,
                confirmed,
            });
            if confirmed {
                out.push((self.next_id, *d));
            }
            self.next_id += 1;
        }
        out
    }

    pub fn confirmed_count(&self) -> usize {
        self.tracks.iter().filter(|t| t.confirmed).count()
    }
}

/// Minimum-cost assignment (Jonker-Volgenant style shortest augmenting
/// paths). Returns, per row, the assigned column; entries with cost
/// >= 1e6 are treated as forbidden and reported as `None`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    let dim = n.max(m);
    let big = 1e6;
    // square padded matrix
    let c = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            cost[i][j]
        } else {
            big
        }
    };

    // potentials and matching, 1-based sentinel at index 0
    let mut u = vec![0.0; dim + 1];
    let mut v = vec![0.0; dim + 1];
    let mut p = vec![0usize; dim + 1]; // column -> row
    let mut way = vec![0usize; dim + 1];
    for i in 1..=dim {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=dim {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=dim {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut result = vec![None; n];
    for j in 1..=dim {
        let i = p[j];
        if i >= 1 && i <= n && j <= m && cost[i - 1][j - 1] < big {
            result[i - 1] = Some(j - 1);
        }
    }
    result
}
