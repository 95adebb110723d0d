//! Superpixel/supervoxel graphs.
//!
//! [`slic_segment`] clusters a grayscale image or volume in joint
//! (intensity, scaled position) space, [`build_graph`] turns the segments into
//! nodes with k-nearest-neighbour edges, and [`graph_metrics`] /
//! [`cohort_difference`] summarize graphs and cohorts of graphs.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::CsrMatrix;
use crate::tensor::Tensor;

/// Default SLIC compactness for intensities in `[0, 1]`.
pub const DEFAULT_COMPACTNESS: f64 = 0.1;
pub const DEFAULT_SLIC_ITERATIONS: usize = 10;
pub const DEFAULT_NEIGHBOURS: usize = 6;

/// One label per pixel/voxel, labels dense in `[0, segment_count)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabels {
    pub labels: Vec<usize>,
    pub shape: Vec<usize>,
    pub segment_count: usize,
}

impl SegmentLabels {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.segment_count];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

fn unravel(mut i: usize, shape: &[usize], out: &mut [usize]) {
    for a in (0..shape.len()).rev() {
        out[a] = i % shape[a];
        i /= shape[a];
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

fn image_shape(image: &Tensor) -> Result<Vec<usize>> {
    match image.rank() {
        2 | 3 => Ok(image.shape().to_vec()),
        r => Err(Error::Dimension(format!(
            "expected a 2D or 3D image, got rank {r}"
        ))),
    }
}

/// Simple linear iterative clustering on a grayscale image or volume.
///
/// Distance between a pixel and a cluster centre is
/// `sqrt(Δintensity² + (Δposition / S)² · m²)` with grid interval
/// `S = (N / n_segments)^(1/dim)` and compactness `m`. Centres start on a
/// regular grid; each iteration assigns pixels within `±S` of a centre and
/// recomputes centres as means. A final pass relabels connected components
/// and merges fragments smaller than half the nominal segment size into the
/// previously labelled neighbour.
pub fn slic_segment(
    image: &Tensor,
    n_segments: usize,
    compactness: f64,
    iterations: usize,
) -> Result<SegmentLabels> {
    let shape = image_shape(image)?;
    let npix = image.numel();
    if n_segments == 0 || n_segments > npix {
        return Err(Error::Config(format!(
            "n_segments must be in [1, {npix}], got {n_segments}"
        )));
    }
    if let Some(bad) = image.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite intensity {bad}")));
    }
    if !(compactness >= 0.0) {
        return Err(Error::Config(format!(
            "compactness must be ≥ 0, got {compactness}"
        )));
    }
    let dim = shape.len();
    let step = (npix as f64 / n_segments as f64).powf(1.0 / dim as f64);
    let counts: Vec<usize> = shape
        .iter()
        .map(|&e| ((e as f64 / step).round() as usize).clamp(1, e))
        .collect();
    let st = strides(&shape);
    let data = image.data();

    // centres: (intensity, position...)
    let mut centres: Vec<Vec<f64>> = Vec::new();
    let total: usize = counts.iter().product();
    let mut idx = vec![0usize; dim];
    for c in 0..total {
        unravel(c, &counts, &mut idx);
        let pos: Vec<f64> = (0..dim)
            .map(|a| (idx[a] as f64 + 0.5) * shape[a] as f64 / counts[a] as f64 - 0.5)
            .collect();
        let flat: usize = (0..dim)
            .map(|a| (pos[a].round() as usize).min(shape[a] - 1) * st[a])
            .sum();
        let mut v = vec![data[flat]];
        v.extend(pos);
        centres.push(v);
    }

    let spatial_w = compactness / step;
    let mut labels = vec![usize::MAX; npix];
    let mut best = vec![f64::INFINITY; npix];
    let mut coord = vec![0usize; dim];
    for _ in 0..iterations.max(1) {
        best.iter_mut().for_each(|b| *b = f64::INFINITY);
        for (ci, c) in centres.iter().enumerate() {
            let lo: Vec<usize> = (0..dim)
                .map(|a| (c[a + 1] - step).floor().max(0.0) as usize)
                .collect();
            let hi: Vec<usize> = (0..dim)
                .map(|a| ((c[a + 1] + step).ceil() as usize).min(shape[a] - 1))
                .collect();
            let ext: Vec<usize> = (0..dim).map(|a| hi[a] - lo[a] + 1).collect();
            let n: usize = ext.iter().product();
            let mut off = vec![0usize; dim];
            for j in 0..n {
                unravel(j, &ext, &mut off);
                let mut flat = 0;
                let mut ds = 0.0;
                for a in 0..dim {
                    let p = lo[a] + off[a];
                    flat += p * st[a];
                    let d = p as f64 - c[a + 1];
                    ds += d * d;
                }
                let di = data[flat] - c[0];
                let dist = di * di + ds * spatial_w * spatial_w;
                if dist < best[flat] {
                    best[flat] = dist;
                    labels[flat] = ci;
                }
            }
        }
        let mut sums = vec![vec![0.0; dim + 1]; centres.len()];
        let mut n = vec![0usize; centres.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == usize::MAX {
                continue;
            }
            unravel(i, &shape, &mut coord);
            sums[l][0] += data[i];
            for a in 0..dim {
                sums[l][a + 1] += coord[a] as f64;
            }
            n[l] += 1;
        }
        for (c, (s, &cnt)) in centres.iter_mut().zip(sums.iter().zip(&n)) {
            if cnt > 0 {
                for (cv, sv) in c.iter_mut().zip(s) {
                    *cv = sv / cnt as f64;
                }
            }
        }
    }
    // pixels out of every window (possible on coarse grids) join the nearest centre
    for i in 0..npix {
        if labels[i] == usize::MAX {
            unravel(i, &shape, &mut coord);
            labels[i] = nearest_centre(&centres, &coord, data[i], spatial_w);
        }
    }
    let min_size = (0.5 * npix as f64 / n_segments as f64).floor() as usize;
    Ok(enforce_connectivity(&labels, &shape, min_size))
}

fn nearest_centre(centres: &[Vec<f64>], coord: &[usize], v: f64, w: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (ci, c) in centres.iter().enumerate() {
        let di = v - c[0];
        let ds: f64 = coord
            .iter()
            .enumerate()
            .map(|(a, &p)| (p as f64 - c[a + 1]).powi(2))
            .sum();
        let d = di * di + ds * w * w;
        if d < best.0 {
            best = (d, ci);
        }
    }
    best.1
}

/// Splits clusters into face-connected components. The largest component of
/// every cluster survives, as does any other component of at least
/// `min_size`; remaining fragments join an adjacent surviving segment.
fn enforce_connectivity(labels: &[usize], shape: &[usize], min_size: usize) -> SegmentLabels {
    let dim = shape.len();
    let st = strides(shape);
    let n = labels.len();
    let mut comp = vec![usize::MAX; n];
    let mut sizes: Vec<usize> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    let mut coord = vec![0usize; dim];
    let mut queue = VecDeque::new();
    let neighbours = |p: usize, coord: &mut [usize], out: &mut Vec<usize>| {
        out.clear();
        unravel(p, shape, coord);
        for a in 0..dim {
            if coord[a] > 0 {
                out.push(p - st[a]);
            }
            if coord[a] + 1 < shape[a] {
                out.push(p + st[a]);
            }
        }
    };
    let mut nb = Vec::with_capacity(2 * dim);
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let orig = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            neighbours(p, &mut coord, &mut nb);
            for &q in &nb {
                if comp[q] == usize::MAX && labels[q] == orig {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
        owner.push(orig);
    }
    let mut largest: HashMap<usize, usize> = HashMap::new();
    for (id, (&o, &s)) in owner.iter().zip(&sizes).enumerate() {
        let e = largest.entry(o).or_insert(id);
        if s > sizes[*e] {
            *e = id;
        }
    }
    let mut target = vec![usize::MAX; sizes.len()];
    let mut next = 0;
    for id in 0..sizes.len() {
        if largest[&owner[id]] == id || sizes[id] >= min_size {
            target[id] = next;
            next += 1;
        }
    }
    // fragments adopt the segment of the first labelled neighbour, in sweeps
    let mut pending = target.contains(&usize::MAX);
    while pending {
        pending = false;
        let mut progressed = false;
        for p in 0..n {
            let c = comp[p];
            if target[c] != usize::MAX {
                continue;
            }
            neighbours(p, &mut coord, &mut nb);
            if let Some(&q) = nb.iter().find(|&&q| target[comp[q]] != usize::MAX) {
                target[c] = target[comp[q]];
                progressed = true;
            } else {
                pending = true;
            }
        }
        if pending && !progressed {
            break;
        }
    }
    let out = comp.iter().map(|&c| target[c]).collect();
    SegmentLabels {
        labels: out,
        shape: shape.to_vec(),
        segment_count: next,
    }
}

/// Node feature layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// Mean intensity, relative size, normalized centroid (x, y[, z]).
    #[default]
    WithCentroids,
    /// Mean intensity and relative size only.
    IntensityArea,
}

impl FeatureSet {
    pub fn arity(self, dim: usize) -> usize {
        match self {
            FeatureSet::WithCentroids => 2 + dim,
            FeatureSet::IntensityArea => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphProvenance {
    pub source: String,
    pub segment_count: usize,
    pub k: usize,
    pub feature_set: FeatureSet,
}

/// Node features plus an undirected weighted edge list (`u < v`, no duplicates).
#[derive(Debug, Clone)]
pub struct Graph {
    pub node_features: Tensor,
    pub edges: Vec<(usize, usize, f64)>,
    /// Centroids in pixel/voxel index coordinates, axis order of the image.
    pub centroids: Vec<Vec<f64>>,
    pub provenance: GraphProvenance,
}

impl Graph {
    pub fn node_count(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn feature_count(&self) -> usize {
        self.node_features.shape()[1]
    }

    pub fn neighbours(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.node_count()];
        for &(u, v, _) in &self.edges {
            adj[u].insert(v);
            adj[v].insert(u);
        }
        adj
    }
}

/// Builds a graph with one node per segment.
///
/// Edges join each node to its `k` nearest centroids (Euclidean distance in
/// pixel units, ties to the lower index), symmetrized, weighted
/// `1 / (1 + distance)`.
pub fn build_graph(
    labels: &SegmentLabels,
    image: &Tensor,
    k: usize,
    features: FeatureSet,
) -> Result<Graph> {
    if labels.shape != image.shape() {
        return Err(Error::Dimension(format!(
            "labels {:?} vs image {:?}",
            labels.shape,
            image.shape()
        )));
    }
    let shape = &labels.shape;
    let dim = shape.len();
    let n = labels.segment_count;
    if k >= n {
        return Err(Error::Config(format!("k = {k} needs more than {n} nodes")));
    }
    let npix = labels.labels.len();
    let mut count = vec![0usize; n];
    let mut sum_i = vec![0.0; n];
    let mut sum_c = vec![vec![0.0; dim]; n];
    let mut coord = vec![0usize; dim];
    for (i, &l) in labels.labels.iter().enumerate() {
        unravel(i, shape, &mut coord);
        count[l] += 1;
        sum_i[l] += image.data()[i];
        for a in 0..dim {
            sum_c[l][a] += coord[a] as f64;
        }
    }
    let centroids: Vec<Vec<f64>> = (0..n)
        .map(|l| sum_c[l].iter().map(|s| s / count[l] as f64).collect())
        .collect();
    let f = features.arity(dim);
    let mut feats = Vec::with_capacity(n * f);
    for l in 0..n {
        feats.push(sum_i[l] / count[l] as f64);
        feats.push(count[l] as f64 / npix as f64);
        if features == FeatureSet::WithCentroids {
            // x is the last (fastest) axis, then y, then z
            for a in (0..dim).rev() {
                let ext = shape[a];
                feats.push(if ext > 1 {
                    centroids[l][a] / (ext - 1) as f64
                } else {
                    0.0
                });
            }
        }
    }
    let mut edges = BTreeSet::new();
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for u in 0..n {
        dists.clear();
        for v in 0..n {
            if v != u {
                dists.push((euclid(&centroids[u], &centroids[v]), v));
            }
        }
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, v) in dists.iter().take(k) {
            edges.insert((u.min(v), u.max(v)));
        }
    }
    let edges = edges
        .into_iter()
        .map(|(u, v)| (u, v, 1.0 / (1.0 + euclid(&centroids[u], &centroids[v]))))
        .collect();
    Ok(Graph {
        node_features: Tensor::new(feats, &[n, f])?,
        edges,
        centroids,
        provenance: GraphProvenance {
            source: String::new(),
            segment_count: n,
            k,
            feature_set: features,
        },
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub avg_degree: f64,
    pub avg_clustering: f64,
    /// NaN when undefined (every edge joins equal degrees).
    pub assortativity: f64,
    pub assortativity_defined: bool,
}

/// Average degree, average local clustering (unweighted) and degree
/// assortativity of the simple undirected graph.
pub fn graph_metrics(graph: &Graph) -> Result<GraphMetrics> {
    let n = graph.node_count();
    if n == 0 {
        return Err(Error::Input("graph has no nodes".into()));
    }
    let adj = graph.neighbours();
    let deg: Vec<usize> = adj.iter().map(|s| s.len()).collect();
    let m: usize = deg.iter().sum::<usize>() / 2;
    let avg_degree = 2.0 * m as f64 / n as f64;
    let mut clust = 0.0;
    for u in 0..n {
        let d = deg[u];
        if d < 2 {
            continue;
        }
        let nb: Vec<usize> = adj[u].iter().copied().collect();
        let mut links = 0usize;
        for i in 0..nb.len() {
            for j in i + 1..nb.len() {
                if adj[nb[i]].contains(&nb[j]) {
                    links += 1;
                }
            }
        }
        clust += 2.0 * links as f64 / (d * (d - 1)) as f64;
    }
    // Pearson over both orientations of every edge
    let mut xs = Vec::with_capacity(2 * m);
    let mut ys = Vec::with_capacity(2 * m);
    for u in 0..n {
        for &v in &adj[u] {
            xs.push(deg[u] as f64);
            ys.push(deg[v] as f64);
        }
    }
    let r = pearson(&xs, &ys);
    Ok(GraphMetrics {
        avg_degree,
        avg_clustering: clust / n as f64,
        assortativity: r.unwrap_or(f64::NAN),
        assortativity_defined: r.is_some(),
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortDifference {
    /// Euclidean distance between the cohorts' mean node feature vectors.
    pub feature_difference: f64,
    /// `|E_a − E_b| / (E_a + E_b)` over total edge counts.
    pub edge_count_difference: f64,
    /// `|N_a − N_b| / (N_a + N_b)` over total node counts.
    pub node_count_difference: f64,
}

pub fn cohort_difference(cohort_a: &[Graph], cohort_b: &[Graph]) -> Result<CohortDifference> {
    if cohort_a.is_empty() || cohort_b.is_empty() {
        return Err(Error::Input("both cohorts need at least one graph".into()));
    }
    let f = cohort_a[0].feature_count();
    if let Some(g) = cohort_a
        .iter()
        .chain(cohort_b)
        .find(|g| g.feature_count() != f)
    {
        return Err(Error::Dimension(format!(
            "feature arity {} vs {}",
            g.feature_count(),
            f
        )));
    }
    let summarize = |c: &[Graph]| {
        let mut mean = vec![0.0; f];
        let (mut nodes, mut edges) = (0usize, 0usize);
        for g in c {
            for row in g.node_features.data().chunks_exact(f) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            nodes += g.node_count();
            edges += g.edges.len();
        }
        mean.iter_mut().for_each(|m| *m /= nodes as f64);
        (mean, nodes as f64, edges as f64)
    };
    let (ma, na, ea) = summarize(cohort_a);
    let (mb, nb, eb) = summarize(cohort_b);
    let ratio = |a: f64, b: f64| {
        if a + b > 0.0 {
            (a - b).abs() / (a + b)
        } else {
            0.0
        }
    };
    Ok(CohortDifference {
        feature_difference: euclid(&ma, &mb),
        edge_count_difference: ratio(ea, eb),
        node_count_difference: ratio(na, nb),
    })
}

/// Disjoint union of graphs with the symmetric-normalized, self-looped
/// adjacency `D^{-1/2}(A + I)D^{-1/2}` used by graph convolutions.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub features: Tensor,
    pub adjacency: Rc<CsrMatrix>,
    /// Graph index of every node.
    pub membership: Vec<usize>,
    pub graphs: usize,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph], use_edge_weights: bool) -> Result<GraphBatch> {
        if graphs.is_empty() {
            return Err(Error::Input("empty graph batch".into()));
        }
        let f = graphs[0].feature_count();
        let mut feats = Vec::new();
        let mut membership = Vec::new();
        let mut triples = Vec::new();
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.feature_count() != f {
                return Err(Error::Dimension(format!(
                    "graph {gi} has {} features, expected {f}",
                    g.feature_count()
                )));
            }
            feats.extend_from_slice(g.node_features.data());
            let n = g.node_count();
            membership.extend(std::iter::repeat_n(gi, n));
            for i in 0..n {
                triples.push((offset + i, offset + i, 1.0));
            }
            for &(u, v, w) in &g.edges {
                let w = if use_edge_weights { w } else { 1.0 };
                triples.push((offset + u, offset + v, w));
                triples.push((offset + v, offset + u, w));
            }
            offset += n;
        }
        let mut degree = vec![0.0; offset];
        for &(r, _, w) in &triples {
            degree[r] += w;
        }
        let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / f64::sqrt(*d)).collect();
        let normalized = triples
            .into_iter()
            .map(|(r, c, w)| (r, c, w * inv_sqrt[r] * inv_sqrt[c]))
            .collect();
        Ok(GraphBatch {
            features: Tensor::new(feats, &[offset, f])?,
            adjacency: Rc::new(CsrMatrix::from_triples(offset, normalized)),
            membership,
            graphs: graphs.len(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    node_features: Vec<Vec<f64>>,
    edges: Vec<(usize, usize, f64)>,
    centroids: Vec<Vec<f64>>,
    provenance: GraphProvenance,
}

impl Graph {
    pub fn to_json(&self) -> Result<String> {
        let f = self.feature_count();
        let file = GraphFile {
            node_features: self
                .node_features
                .data()
                .chunks(f)
                .map(|r| r.to_vec())
                .collect(),
            edges: self.edges.clone(),
            centroids: self.centroids.clone(),
            provenance: self.provenance.clone(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Graph> {
        let file: GraphFile = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let n = file.node_features.len();
        let f = file.node_features.first().map_or(0, |r| r.len());
        if file.node_features.iter().any(|r| r.len() != f) {
            return Err(Error::Format("ragged node feature matrix".into()));
        }
        if let Some(&(u, v, w)) = file
            .edges
            .iter()
            .find(|&&(u, v, w)| u >= v || v >= n || !(w > 0.0 && w <= 1.0))
        {
            return Err(Error::Format(format!("invalid edge ({u}, {v}, {w})")));
        }
        Ok(Graph {
            node_features: Tensor::new(file.node_features.concat(), &[n, f])?,
            edges: file.edges,
            centroids: file.centroids,
            provenance: file.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Graph> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Graph::from_json(&s)
    }
}
