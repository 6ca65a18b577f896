//! Brute-force reference implementations shared by the integration tests.
//! Each one is written from the definitions, without calling the code it checks.
#![allow(dead_code)]

use mesc::chunker::{Chunk, ChunkSet, SentenceAssignment};
use mesc::corpus::Task;
use mesc::encoder::ChunkEncoder;
use mesc::head::{Head, HeadExample};
use mesc::nn::ParamId;
use mesc::trainer::Trainable;
use mesc::nn::Mat;
use mesc::tokenizer::SPECIAL;

// ---------------------------------------------------------------- chunking

/// Number of windows when one starts at every stride offset inside the
/// stream, unless the whole stream fits in a single window.
pub fn simulate_chunk_count(len: usize, c: usize, o: usize) -> usize {
    if len <= c {
        return 1;
    }
    let mut n = 0;
    let mut start = 0;
    while start < len {
        n += 1;
        start += c - o;
    }
    n
}

// ---------------------------------------------------------------- losses

pub fn task_loss(o: &[f64], target: &[usize], task: Task) -> f64 {
    let clamp = |q: f64| q.clamp(1e-12, 1.0 - 1e-12);
    match task {
        Task::Multiclass => -clamp(o[target[0]]).ln(),
        Task::Binary | Task::Multilabel => {
            let mut sum = 0.0;
            for (j, &q) in o.iter().enumerate() {
                let q = clamp(q);
                sum += if target.contains(&j) { q.ln() } else { (1.0 - q).ln() };
            }
            -sum / o.len() as f64
        }
    }
}

pub fn argmax_prediction(o: &[f64], task: Task) -> Vec<usize> {
    if task == Task::Multilabel {
        return (0..o.len()).filter(|&j| o[j] >= 0.5).collect();
    }
    let mut best = 0;
    for j in 0..o.len() {
        if o[j] > o[best] {
            best = j;
        }
    }
    vec![best]
}

// ---------------------------------------------------------------- ORSE

/// Histogram over {noise, 0, .., k_cap - 1}, normalized by the chunk count.
pub fn structure_histogram(labels: &[i32], k_cap: usize) -> Vec<f64> {
    let mut h = vec![0.0; k_cap + 1];
    for &l in labels {
        let b = if l < 0 { 0 } else { (l as usize + 1).min(k_cap) };
        h[b] += 1.0;
    }
    if !labels.is_empty() {
        for v in &mut h {
            *v /= labels.len() as f64;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRanking {
    pub prediction: Vec<usize>,
    /// (chunk, score) in ranked order.
    pub chunks: Vec<(usize, f64)>,
    /// (chunk, sentence, score) in the order they were scored.
    pub sentences: Vec<(usize, usize, f64)>,
}

fn shifted(raw: &[f64]) -> Vec<f64> {
    let eps = 1e-6;
    let mut m = f64::INFINITY;
    for &r in raw {
        if r < m {
            m = r;
        }
    }
    let delta = if m < eps { eps - m } else { eps };
    raw.iter().map(|r| r + delta).collect()
}

/// Insertion sort by decreasing key; equal keys keep input order.
fn stable_desc<T: Clone>(items: &[T], key: impl Fn(&T) -> f64) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for it in items {
        let k = key(it);
        let pos = out.iter().position(|o| key(o) < k).unwrap_or(out.len());
        out.insert(pos, it.clone());
    }
    out
}

fn pad_out(chunk: &Chunk, start: usize, end: usize) -> Chunk {
    let mut c = chunk.clone();
    for t in start..end.min(c.n_real) {
        c.token_ids[t] = SPECIAL.pad_id;
    }
    c
}

/// Chunk ranking then sentence ranking, one occlusion at a time.
pub fn orse_brute_force(
    head: &Head,
    encoder: &dyn ChunkEncoder,
    x: &Mat,
    structure: Option<&[i32]>,
    chunk_set: &ChunkSet,
    assignments: &[SentenceAssignment],
) -> OracleRanking {
    let task = head.config.task;
    let k_cap = head.config.k_cap;
    let hist = |l: Option<&[i32]>| match l {
        Some(l) => structure_histogram(l, k_cap),
        None => vec![0.0; k_cap + 1],
    };
    let full = head.forward(x, &hist(structure), None).unwrap().o;
    let p = argmax_prediction(&full, task);

    let n = x.nrows();
    let mut raw = Vec::new();
    for i in 0..n {
        let mut xm = x.clone();
        for v in xm.row_mut(i).iter_mut() {
            *v = 0.0;
        }
        let rest: Option<Vec<i32>> = structure.map(|l| {
            let mut r = Vec::new();
            for (j, &v) in l.iter().enumerate() {
                if j != i {
                    r.push(v);
                }
            }
            r
        });
        let o = head.forward(&xm, &hist(rest.as_deref()), None).unwrap().o;
        raw.push(task_loss(&o, &p, task));
    }
    let scores = shifted(&raw);
    let chunks = stable_desc(&(0..n).map(|i| (i, scores[i])).collect::<Vec<_>>(), |c| c.1);

    let mut sraw = Vec::new();
    for &(ci, weight) in &chunks {
        let chunk = &chunk_set.chunks[ci];
        let mut reference = None;
        for a in assignments.iter().filter(|a| a.chunk == ci) {
            let r = *reference
                .get_or_insert_with(|| task_loss(&encoder.classify_chunk(chunk).unwrap().probs, &p, task));
            let occ = encoder.classify_chunk(&pad_out(chunk, a.start, a.end)).unwrap().probs;
            sraw.push((ci, a.sentence, weight, task_loss(&occ, &p, task) - r));
        }
    }
    let shifted_s = shifted(&sraw.iter().map(|s| s.3).collect::<Vec<_>>());
    let sentences = sraw
        .iter()
        .zip(shifted_s)
        .map(|(&(c, s, w, _), v)| (c, s, w * v))
        .collect();
    OracleRanking {
        prediction: p,
        chunks,
        sentences,
    }
}

/// Top `ceil(num / den * n)` sentence ids in document order.
pub fn top_sentences(sentences: &[(usize, usize, f64)], num: usize, den: usize, n: usize) -> Vec<usize> {
    let count = (num * n).div_ceil(den).min(sentences.len());
    let ranked = stable_desc(sentences, |s| s.2);
    let mut keep: Vec<usize> = ranked[..count].iter().map(|s| s.1).collect();
    keep.sort_unstable();
    keep
}

// ---------------------------------------------------------------- HDBSCAN

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mutual-reachability matrix with core distance = k-th smallest distance
/// including the zero self-distance.
pub fn mutual_reachability(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).map(|j| dist(&points[i], &points[j])).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = dist(&points[i], &points[j]).max(core[i]).max(core[j]);
            }
        }
    }
    m
}

/// Kruskal over all pairs; returns the total weight.
pub fn mst_weight(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((m[i][j], i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for (w, i, j) in edges {
        let (ci, cj) = (comp[i], comp[j]);
        if ci != cj {
            total += w;
            for c in comp.iter_mut() {
                if *c == cj {
                    *c = ci;
                }
            }
        }
    }
    total
}

/// Connected components of `set` using edges with weight strictly below `w`.
fn components_below(m: &[Vec<f64>], set: &[usize], w: f64) -> Vec<Vec<usize>> {
    let mut seen = vec![false; set.len()];
    let mut out = Vec::new();
    for s in 0..set.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![set[s]];
        let mut q = vec![s];
        while let Some(a) = q.pop() {
            for b in 0..set.len() {
                if !seen[b] && m[set[a]][set[b]] < w {
                    seen[b] = true;
                    comp.push(set[b]);
                    q.push(b);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Smallest level at which `set` is connected.
fn connect_level(m: &[Vec<f64>], set: &[usize]) -> f64 {
    let mut levels: Vec<f64> = Vec::new();
    for &a in set {
        for &b in set {
            if a < b {
                levels.push(m[a][b]);
            }
        }
    }
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for &w in &levels {
        let next = levels.iter().copied().find(|&x| x > w).unwrap_or(f64::INFINITY);
        if components_below(m, set, next).len() == 1 {
            return w;
        }
    }
    0.0
}

struct OracleCluster {
    members: Vec<usize>,
    stability: f64,
    children: Vec<usize>,
}

fn lam(w: f64) -> f64 {
    1.0 / w.max(1e-12)
}

fn grow(m: &[Vec<f64>], mcs: usize, set: Vec<usize>, id: usize, birth: f64, tree: &mut Vec<OracleCluster>) {
    let mut current = set;
    loop {
        if current.len() < 2 {
            // A lone point can only be the whole input.
            return;
        }
        let w = connect_level(m, &current);
        let l = lam(w);
        let comps = components_below(m, &current, w);
        let big: Vec<Vec<usize>> = comps.iter().filter(|c| c.len() >= mcs).cloned().collect();
        if big.len() == 1 {
            let leaving = current.len() - big[0].len();
            tree[id].stability += (l - birth) * leaving as f64;
            current = big[0].clone();
            continue;
        }
        tree[id].stability += (l - birth) * current.len() as f64;
        for c in big {
            tree.push(OracleCluster {
                members: c.clone(),
                stability: 0.0,
                children: Vec::new(),
            });
            let child = tree.len() - 1;
            tree[id].children.push(child);
            grow(m, mcs, c, child, l, tree);
        }
        return;
    }
}

fn select(tree: &[OracleCluster], c: usize, out: &mut Vec<usize>) -> f64 {
    let mut picked = Vec::new();
    let mut sum = 0.0;
    for &k in &tree[c].children {
        sum += select(tree, k, &mut picked);
    }
    if tree[c].children.is_empty() || tree[c].stability >= sum {
        out.push(c);
        tree[c].stability
    } else {
        out.extend(picked);
        sum
    }
}

/// Labels from the top-down threshold-graph cluster tree with excess-of-mass selection.
pub fn hdbscan_brute_force(points: &[Vec<f64>], mcs: usize, min_samples: usize) -> Vec<i32> {
    let n = points.len();
    let m = mutual_reachability(points, min_samples);
    let mut tree = vec![OracleCluster {
        members: (0..n).collect(),
        stability: 0.0,
        children: Vec::new(),
    }];
    grow(&m, mcs, (0..n).collect(), 0, 0.0, &mut tree);
    let mut chosen = Vec::new();
    if tree[0].children.is_empty() {
        chosen.push(0);
    } else {
        for &k in &tree[0].children.clone() {
            select(&tree, k, &mut chosen);
        }
    }
    let mut labels = vec![-1; n];
    for (i, &c) in chosen.iter().enumerate() {
        for &p in &tree[c].members {
            labels[p] = i as i32;
        }
    }
    labels
}

/// Equality of two labelings up to renaming of the non-noise ids.
pub fn same_partition(a: &[i32], b: &[i32]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x < 0) != (y < 0) {
            return false;
        }
        if x < 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------- LCS

/// Longest common subsequence by enumerating every subsequence of the shorter input.
pub fn lcs_enumerate(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |sub: &[&String]| {
        let mut it = long.iter();
        sub.iter().all(|s| it.any(|x| x == *s))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

// ---------------------------------------------------------------- gradients

/// Mean task loss of `head` over `examples`, from plain forward passes.
pub fn head_loss(head: &Head, examples: &[HeadExample]) -> f64 {
    let mut total = 0.0;
    for ex in examples {
        let o = head.forward(&ex.x, &ex.s_vec, None).unwrap().o;
        total += task_loss(&o, &ex.target, head.config.task);
    }
    total / examples.len() as f64
}

/// Central differences `(f(w + eps) - f(w - eps)) / 2 eps` plus the two
/// one-sided quotients, for coordinate `(r, c)` of parameter `id`.
pub fn finite_difference(head: &mut Head, examples: &[HeadExample], id: ParamId, r: usize, c: usize, eps: f64) -> (f64, f64, f64) {
    let orig = Trainable::params(head).get(id)[[r, c]];
    let base = head_loss(head, examples);
    head.params_mut().get_mut(id)[[r, c]] = orig + eps;
    let plus = head_loss(head, examples);
    head.params_mut().get_mut(id)[[r, c]] = orig - eps;
    let minus = head_loss(head, examples);
    head.params_mut().get_mut(id)[[r, c]] = orig;
    ((plus - minus) / (2.0 * eps), (plus - base) / eps, (base - minus) / eps)
}
