//! HDBSCAN: mutual-reachability distances, Prim's minimum spanning tree,
//! condensed cluster tree and excess-of-mass selection.
//!
//! Equal-weight MST edges are merged as one level, so a component that
//! splits into several pieces at the same distance yields one multiway
//! split rather than an order-dependent cascade.

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::nn::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Neighbour rank for core distances, counting the point itself.
    pub min_samples: usize,
}

impl HdbscanParams {
    pub fn new(min_cluster_size: usize) -> Self {
        HdbscanParams {
            min_cluster_size,
            min_samples: min_cluster_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster id per point, `-1` for noise. Ids are ordered by each
    /// cluster's smallest member index.
    pub labels: Vec<i32>,
    pub core_distances: Vec<f64>,
    pub num_clusters: usize,
    /// Distance at which each cluster appeared; the root uses the largest MST edge.
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Death-to-birth scale of the condensed tree.
pub fn lambda(distance: f64) -> f64 {
    1.0 / distance.max(1e-12)
}

/// Distance to the `k`-th nearest point, the point itself being the first.
pub fn core_distances(points: &Mat, k: usize) -> Vec<f64> {
    let n = points.nrows();
    let mut row = vec![0.0; n];
    (0..n)
        .map(|i| {
            for (j, r) in row.iter_mut().enumerate() {
                *r = euclidean(points.row(i), points.row(j));
            }
            *row.select_nth_unstable_by(k - 1, f64::total_cmp).1
        })
        .collect()
}

/// Prim's algorithm on the implicit complete mutual-reachability graph.
/// Ties pick the lowest vertex index.
pub fn minimum_spanning_tree(points: &Mat, core: &[f64]) -> Vec<MstEdge> {
    let n = points.nrows();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = euclidean(points.row(current), points.row(j)).max(core[current]).max(core[j]);
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
            if next == usize::MAX || best[j] < best[next] {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next],
            b: next,
            weight: best[next],
        });
        current = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Multiway single-linkage dendrogram. Nodes `0..n` are points.
struct Dendrogram {
    n: usize,
    children: Vec<Vec<usize>>,
    level: Vec<f64>,
    size: Vec<usize>,
}

impl Dendrogram {
    fn build(n: usize, mst: &[MstEdge]) -> Self {
        let mut edges = mst.to_vec();
        edges.sort_by(|x, y| x.weight.total_cmp(&y.weight).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
        let mut d = Dendrogram {
            n,
            children: Vec::new(),
            level: Vec::new(),
            size: Vec::new(),
        };
        let mut uf = UnionFind::new(n);
        let mut node_of: Vec<usize> = (0..n).collect();
        let mut i = 0;
        while i < edges.len() {
            let w = edges[i].weight;
            let mut j = i;
            while j < edges.len() && edges[j].weight == w {
                j += 1;
            }
            let mut roots: Vec<usize> = Vec::new();
            for e in &edges[i..j] {
                roots.push(uf.find(e.a));
                roots.push(uf.find(e.b));
            }
            roots.sort_unstable();
            roots.dedup();
            let old_nodes: Vec<(usize, usize)> = roots.iter().map(|&r| (r, node_of[r])).collect();
            for e in &edges[i..j] {
                uf.union(e.a, e.b);
            }
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for (r, node) in old_nodes {
                let top = uf.find(r);
                match groups.iter_mut().find(|(t, _)| *t == top) {
                    Some((_, g)) => g.push(node),
                    None => groups.push((top, vec![node])),
                }
            }
            for (top, kids) in groups {
                let size = kids.iter().map(|&k| d.node_size(k)).sum();
                d.children.push(kids);
                d.level.push(w);
                d.size.push(size);
                node_of[top] = n + d.children.len() - 1;
            }
            i = j;
        }
        d
    }

    fn node_size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.size[node - self.n]
        }
    }

    fn root(&self) -> usize {
        if self.children.is_empty() {
            0
        } else {
            self.n + self.children.len() - 1
        }
    }

    fn leaves(&self, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < self.n {
                out.push(x);
            } else {
                stack.extend(&self.children[x - self.n]);
            }
        }
    }
}

struct CondensedCluster {
    parent: Option<usize>,
    birth_lambda: f64,
    birth_distance: f64,
    stability: f64,
    children: Vec<usize>,
}

pub fn hdbscan(points: &Mat, params: HdbscanParams) -> Result<Clustering> {
    let n = points.nrows();
    let mcs = params.min_cluster_size;
    if mcs < 2 {
        return Err(Error::config(format!("min_cluster_size must be at least 2, got {mcs}")));
    }
    if params.min_samples == 0 {
        return Err(Error::config("min_samples must be positive"));
    }
    if n < mcs || n < params.min_samples {
        return Err(Error::validation(format!(
            "{n} points are fewer than min_cluster_size {mcs} / min_samples {}",
            params.min_samples
        )));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("non-finite coordinate in clustering input"));
    }
    let core = core_distances(points, params.min_samples);
    let mst = minimum_spanning_tree(points, &core);
    let max_edge = mst.iter().map(|e| e.weight).fold(0.0, f64::max);
    let dendro = Dendrogram::build(n, &mst);

    let mut clusters = vec![CondensedCluster {
        parent: None,
        birth_lambda: 0.0,
        birth_distance: max_edge,
        stability: 0.0,
        children: Vec::new(),
    }];
    let mut fell_from = vec![0usize; n];
    let mut stack = vec![(dendro.root(), 0usize)];
    let mut buf = Vec::new();
    while let Some((node, c)) = stack.pop() {
        if node < n {
            // Only reachable when the whole input is a single point.
            fell_from[node] = c;
            continue;
        }
        let w = dendro.level[node - n];
        let lam = lambda(w);
        let kids = &dendro.children[node - n];
        let big: Vec<usize> = kids.iter().copied().filter(|&k| dendro.node_size(k) >= mcs).collect();
        let gain = lam - clusters[c].birth_lambda;
        for &k in kids {
            let size = dendro.node_size(k);
            // A lone surviving child continues the cluster and books nothing yet.
            if !(big.len() == 1 && size >= mcs) {
                clusters[c].stability += gain * size as f64;
            }
            if size >= mcs {
                continue;
            }
            buf.clear();
            dendro.leaves(k, &mut buf);
            for &p in &buf {
                fell_from[p] = c;
            }
        }
        match big.len() {
            0 => {}
            1 => stack.push((big[0], c)),
            _ => {
                for &k in big.iter().rev() {
                    clusters.push(CondensedCluster {
                        parent: Some(c),
                        birth_lambda: lam,
                        birth_distance: w,
                        stability: 0.0,
                        children: Vec::new(),
                    });
                    let id = clusters.len() - 1;
                    clusters[c].children.push(id);
                    stack.push((k, id));
                }
            }
        }
    }

    // Excess of mass, children before parents.
    let m = clusters.len();
    let mut selected = vec![false; m];
    let mut best = vec![0.0; m];
    for c in (1..m).rev() {
        let sub: f64 = clusters[c].children.iter().map(|&k| best[k]).sum();
        if clusters[c].children.is_empty() || clusters[c].stability >= sub {
            selected[c] = true;
            best[c] = clusters[c].stability;
        } else {
            best[c] = sub;
        }
    }
    selected[0] = clusters[0].children.is_empty();

    let mut chosen = Vec::new();
    let mut todo = vec![0usize];
    while let Some(c) = todo.pop() {
        if selected[c] {
            chosen.push(c);
        } else {
            todo.extend(&clusters[c].children);
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; m];
    for &c in &chosen {
        owner[c] = Some(c);
    }
    let mut point_cluster = vec![None; n];
    for p in 0..n {
        let mut c = fell_from[p];
        loop {
            if let Some(s) = owner[c] {
                point_cluster[p] = Some(s);
                break;
            }
            match clusters[c].parent {
                Some(parent) => c = parent,
                None => break,
            }
        }
    }
    // Relabel by smallest member index.
    let mut order: Vec<usize> = Vec::new();
    for pc in point_cluster.iter().flatten() {
        if !order.contains(pc) {
            order.push(*pc);
        }
    }
    let labels = point_cluster
        .iter()
        .map(|pc| pc.map_or(-1, |c| order.iter().position(|&o| o == c).expect("ordered") as i32))
        .collect();
    let thresholds = order.iter().map(|&c| clusters[c].birth_distance).collect();
    Ok(Clustering {
        labels,
        core_distances: core,
        num_clusters: order.len(),
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn core_distance_counts_self() {
        let pts = array![[0.0], [1.0], [3.0]];
        assert_eq!(core_distances(&pts, 1), vec![0.0, 0.0, 0.0]);
        assert_eq!(core_distances(&pts, 2), vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn mst_total_weight() {
        let pts = array![[0.0], [1.0], [3.0], [7.0]];
        let core = vec![0.0; 4];
        let mst = minimum_spanning_tree(&pts, &core);
        assert_eq!(mst.len(), 3);
        assert_eq!(mst.iter().map(|e| e.weight).sum::<f64>(), 7.0);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = Mat::from_elem((20, 3), 0.5);
        let c = hdbscan(&pts, HdbscanParams::new(15)).unwrap();
        assert_eq!(c.num_clusters, 1);
        assert!(c.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn too_few_points() {
        let pts = Mat::zeros((10, 2));
        assert!(matches!(hdbscan(&pts, HdbscanParams::new(15)), Err(Error::Validation(_))));
        assert!(matches!(hdbscan(&pts, HdbscanParams::new(1)), Err(Error::Config(_))));
    }

    #[test]
    fn two_groups_and_an_outlier() {
        let mut rows = Vec::new();
        for i in 0..6 {
            rows.push([i as f64 * 0.1, 0.0]);
            rows.push([10.0 + i as f64 * 0.1, 0.0]);
        }
        rows.push([100.0, 100.0]);
        let pts = Mat::from_shape_vec((13, 2), rows.concat()).unwrap();
        let c = hdbscan(&pts, HdbscanParams::new(3)).unwrap();
        assert_eq!(c.num_clusters, 2);
        assert_eq!(c.labels[0], 0);
        assert_eq!(c.labels[1], 1);
        assert_eq!(c.labels[12], -1);
        assert!(c.thresholds.iter().all(|&t| t > 0.1 && t < 100.0));
    }
}
