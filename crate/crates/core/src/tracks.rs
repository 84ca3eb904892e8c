//! Multi-view correspondence tracks, key-view selection and covisibility score.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use log::{debug, warn};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, ViewId};
use crate::union_find::UnionFind;

/// One correspondence reported by a pairwise matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatch {
    pub view_a: ViewId,
    pub view_b: ViewId,
    pub pixel_a: Vector2<f64>,
    pub pixel_b: Vector2<f64>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    1.0
}

impl PairwiseMatch {
    pub fn new(view_a: ViewId, pixel_a: Vector2<f64>, view_b: ViewId, pixel_b: Vector2<f64>) -> Self {
        PairwiseMatch {
            view_a,
            view_b,
            pixel_a,
            pixel_b,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }
}

/// A query pixel together with the pixels that observe the same point in
/// other views, at most one per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    observations: BTreeMap<ViewId, Vector2<f64>>,
    anchor: ViewId,
}

impl Track {
    /// Builds a track anchored at its lowest view id.
    pub fn new(observations: BTreeMap<ViewId, Vector2<f64>>) -> Result<Self> {
        if observations.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a track needs at least 2 observations, got {}",
                observations.len()
            )));
        }
        let anchor = *observations.keys().next().expect("non-empty");
        Ok(Track {
            observations,
            anchor,
        })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (ViewId, Vector2<f64>)>) -> Result<Self> {
        let mut observations = BTreeMap::new();
        for (view, pixel) in pairs {
            if observations.insert(view, pixel).is_some() {
                return Err(Error::InvalidInput(format!(
                    "track has two observations in view {view}"
                )));
            }
        }
        Track::new(observations)
    }

    pub fn observations(&self) -> &BTreeMap<ViewId, Vector2<f64>> {
        &self.observations
    }

    pub fn anchor(&self) -> (ViewId, Vector2<f64>) {
        (self.anchor, self.observations[&self.anchor])
    }

    pub fn pixel_in(&self, view: ViewId) -> Option<Vector2<f64>> {
        self.observations.get(&view).copied()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Adds or replaces the observation in `view`.
    pub fn insert(&mut self, view: ViewId, pixel: Vector2<f64>) {
        self.observations.insert(view, pixel);
        self.anchor = *self.observations.keys().next().expect("non-empty");
    }
}

/// The key views chosen for one query view, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewNeighborhood {
    pub query: ViewId,
    pub keys: Vec<ViewId>,
    pub distances: Vec<f64>,
}

/// Azimuth, elevation and radius of a camera center about the world origin.
pub fn spherical_coords(camera: &Camera) -> (f64, f64, f64) {
    let c = camera.center();
    let r = c.norm();
    let azimuth = c.y.atan2(c.x);
    let elevation = if r > 0.0 { (c.z / r).clamp(-1.0, 1.0).asin() } else { 0.0 };
    (azimuth, elevation, r)
}

/// Distance between two camera centers in (azimuth, elevation, radius) space.
pub fn spherical_distance(a: &Camera, b: &Camera) -> f64 {
    let (aa, ea, ra) = spherical_coords(a);
    let (ab, eb, rb) = spherical_coords(b);
    ((aa - ab).powi(2) + (ea - eb).powi(2) + (ra - rb).powi(2)).sqrt()
}

/// Number of key views per query: 2 with three training views, 4 otherwise.
pub fn default_key_view_count(n_views: usize) -> usize {
    if n_views <= 3 {
        n_views.saturating_sub(1)
    } else {
        4.min(n_views - 1)
    }
}

/// Picks the `k` views closest to `query` in spherical camera-center coordinates.
pub fn select_key_views(cameras: &[Camera], query: ViewId, k: usize) -> Result<ViewNeighborhood> {
    if k >= cameras.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} key views requested from {} cameras",
            cameras.len()
        )));
    }
    let q = cameras
        .iter()
        .find(|c| c.id == query)
        .ok_or_else(|| Error::InvalidInput(format!("query view {query} not among cameras")))?;
    let mut candidates: Vec<(f64, ViewId)> = cameras
        .iter()
        .filter(|c| c.id != query)
        .map(|c| (spherical_distance(q, c), c.id))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(k);
    Ok(ViewNeighborhood {
        query,
        keys: candidates.iter().map(|c| c.1).collect(),
        distances: candidates.iter().map(|c| c.0).collect(),
    })
}

/// Keeps matches between each view and one of its key views (in either direction).
pub fn filter_matches_by_key_views(
    matches: &[PairwiseMatch],
    neighborhoods: &[ViewNeighborhood],
) -> Vec<PairwiseMatch> {
    let keys: HashMap<ViewId, &[ViewId]> = neighborhoods
        .iter()
        .map(|n| (n.query, n.keys.as_slice()))
        .collect();
    let linked = |a: ViewId, b: ViewId| keys.get(&a).is_some_and(|k| k.contains(&b));
    matches
        .iter()
        .filter(|m| linked(m.view_a, m.view_b) || linked(m.view_b, m.view_a))
        .cloned()
        .collect()
}

type NodeKey = (ViewId, i64, i64);

#[derive(Debug)]
struct Node {
    key: NodeKey,
    pixel: Vector2<f64>,
    confidence: f64,
}

fn cmp_pixel(a: &Vector2<f64>, b: &Vector2<f64>) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Higher confidence wins; ties go to the lexicographically smaller pixel.
fn better(conf_a: f64, pix_a: &Vector2<f64>, conf_b: f64, pix_b: &Vector2<f64>) -> bool {
    match conf_a.total_cmp(&conf_b) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => cmp_pixel(pix_a, pix_b) == Ordering::Less,
    }
}

/// Chains pairwise matches into tracks.
///
/// Pixels are snapped to a grid of `quantization` pixels to form nodes; each
/// connected component of the match graph becomes one track. When a
/// component holds several nodes in the same view, the one with the highest
/// incident match confidence is kept.
pub fn build_tracks(matches: &[PairwiseMatch], quantization: f64) -> Vec<Track> {
    let step = if quantization > 0.0 && quantization.is_finite() {
        quantization
    } else {
        warn!("invalid quantization step {quantization}; using 1.0");
        1.0
    };
    let mut index: HashMap<NodeKey, usize> = HashMap::new();
    let mut nodes: Vec<Node> = Vec::new();
    let mut uf = UnionFind::new(0);
    let mut skipped = 0usize;

    let mut node_for = |view: ViewId, pixel: &Vector2<f64>, conf: f64, uf: &mut UnionFind| -> usize {
        let key = (
            view,
            (pixel.x / step).round() as i64,
            (pixel.y / step).round() as i64,
        );
        match index.get(&key) {
            Some(&idx) => {
                let node = &mut nodes[idx];
                if better(conf, pixel, node.confidence, &node.pixel) {
                    node.pixel = *pixel;
                    node.confidence = conf;
                }
                idx
            }
            None => {
                let idx = uf.push();
                index.insert(key, idx);
                nodes.push(Node {
                    key,
                    pixel: *pixel,
                    confidence: conf,
                });
                idx
            }
        }
    };

    for m in matches {
        let finite = m.pixel_a.iter().chain(m.pixel_b.iter()).all(|v| v.is_finite());
        if m.view_a == m.view_b || !finite || !m.confidence.is_finite() {
            skipped += 1;
            continue;
        }
        let a = node_for(m.view_a, &m.pixel_a, m.confidence, &mut uf);
        let b = node_for(m.view_b, &m.pixel_b, m.confidence, &mut uf);
        uf.union(a, b);
    }
    if skipped > 0 {
        warn!("skipped {skipped} malformed matches");
    }

    // root -> view -> chosen node
    let mut components: HashMap<usize, BTreeMap<ViewId, usize>> = HashMap::new();
    let mut conflicts = 0usize;
    for idx in 0..nodes.len() {
        let root = uf.find(idx);
        let per_view = components.entry(root).or_default();
        let view = nodes[idx].key.0;
        match per_view.get(&view) {
            Some(&cur) => {
                conflicts += 1;
                let (n, c) = (&nodes[idx], &nodes[cur]);
                if better(n.confidence, &n.pixel, c.confidence, &c.pixel) {
                    per_view.insert(view, idx);
                }
            }
            None => {
                per_view.insert(view, idx);
            }
        }
    }
    if conflicts > 0 {
        debug!("resolved {conflicts} same-view conflicts while building tracks");
    }

    let mut tracks: Vec<Track> = components
        .into_values()
        .filter(|per_view| per_view.len() >= 2)
        .map(|per_view| {
            let obs = per_view
                .into_iter()
                .map(|(view, idx)| (view, nodes[idx].pixel))
                .collect();
            Track::new(obs).expect("component has two views")
        })
        .collect();
    tracks.sort_by(|a, b| {
        let (va, pa) = a.anchor();
        let (vb, pb) = b.anchor();
        va.cmp(&vb).then(cmp_pixel(&pa, &pb))
    });
    tracks
}

/// Fraction of tracks observed by at least three views.
pub fn multiview_score(tracks: &[Track]) -> f64 {
    if tracks.is_empty() {
        return 0.0;
    }
    let covisible = tracks.iter().filter(|t| t.len() >= 3).count();
    covisible as f64 / tracks.len() as f64
}
