//! Document head: positional embeddings, transformer layers over chunk rows,
//! max-pool, `FFN_T`, concatenation with the structure encoding, `FFN_i`
//! (softmax) and the output layer `FFN_e`.

use std::path::Path;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Mat, ParamId, ParamSet, TransformerLayer, Var};
use crate::store::Checkpoint;
use crate::structurer::encode_for_head;
use crate::trainer::{graph_loss, Trainable};

pub const HEAD_MAGIC: &[u8; 4] = b"MSHD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// `p * d`; also the width of the transformer feed-forward layers.
    pub input_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_t_width: usize,
    pub ffn_i_width: usize,
    pub num_labels: usize,
    pub task: Task,
    pub max_positions: usize,
    pub k_cap: usize,
    pub use_positions: bool,
    /// Skip the transformer layers (test mode).
    pub bypass_attention: bool,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            input_dim: 256,
            layers: 2,
            heads: 8,
            ffn_t_width: 128,
            ffn_i_width: 32,
            num_labels: 2,
            task: Task::Binary,
            max_positions: 512,
            k_cap: 32,
            use_positions: true,
            bypass_attention: false,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.heads == 0 || !self.input_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "head input width {} not divisible by {} heads",
                self.input_dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("head needs at least one transformer layer"));
        }
        if self.ffn_t_width == 0 || self.ffn_i_width == 0 || self.max_positions == 0 || self.k_cap == 0 {
            return Err(Error::config("head widths, max_positions and k_cap must be positive"));
        }
        crate::corpus::check_label_count(self.task, self.num_labels)
    }

    pub fn structure_len(&self) -> usize {
        self.k_cap + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `FFN_T` output.
    pub g: Vec<f64>,
    pub o: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadExample {
    pub x: Mat,
    pub s_vec: Vec<f64>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    params: ParamSet,
    positions: ParamId,
    blocks: Vec<TransformerLayer>,
    ffn_t: Linear,
    ffn_i: Linear,
    ffn_e: Linear,
}

impl Head {
    pub fn new(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let d = config.input_dim;
        let positions = params.normal(&mut rng, "head.position", config.max_positions, d, 0.02);
        let blocks = (0..config.layers)
            .map(|i| TransformerLayer::new(&mut params, &mut rng, &format!("head.layer{i}"), d, config.heads, d))
            .collect();
        let ffn_t = Linear::new(&mut params, &mut rng, "head.ffn_t", d, config.ffn_t_width);
        let ffn_i = Linear::new(
            &mut params,
            &mut rng,
            "head.ffn_i",
            config.ffn_t_width + config.structure_len(),
            config.ffn_i_width,
        );
        let ffn_e = Linear::new(&mut params, &mut rng, "head.ffn_e", config.ffn_i_width, config.num_labels);
        Ok(Head {
            config,
            params,
            positions,
            blocks,
            ffn_t,
            ffn_i,
            ffn_e,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn zero_structure(&self) -> Vec<f64> {
        vec![0.0; self.config.structure_len()]
    }

    fn build(&self, g: &mut Graph, x: &Mat, s_vec: &[f64], mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let n = x.nrows();
        if n == 0 {
            return Err(Error::validation("document has no chunk rows"));
        }
        if x.ncols() != cfg.input_dim {
            return Err(Error::validation(format!(
                "chunk rows have width {}, head expects {}",
                x.ncols(),
                cfg.input_dim
            )));
        }
        if s_vec.len() != cfg.structure_len() {
            return Err(Error::validation(format!(
                "structure encoding has length {}, head expects {}",
                s_vec.len(),
                cfg.structure_len()
            )));
        }
        let keep: Vec<usize> = match mask {
            Some(m) if m.len() != n => {
                return Err(Error::validation(format!("mask length {} for {n} chunks", m.len())))
            }
            Some(m) => (0..n).filter(|&i| !m[i]).collect(),
            None => (0..n).collect(),
        };
        if keep.is_empty() {
            return Err(Error::validation("every chunk is masked"));
        }
        if n > cfg.max_positions {
            log::warn!("{n} chunks exceed max_positions {}; positions clamped", cfg.max_positions);
        }
        let rows = if keep.len() == n { x.clone() } else { x.select(Axis(0), &keep) };
        let mut h = g.input(rows);
        if cfg.use_positions {
            let idx: Vec<usize> = keep.iter().map(|&i| i.min(cfg.max_positions - 1)).collect();
            let table = g.param(self.positions);
            let pos = g.gather_rows(table, &idx);
            h = g.add(h, pos);
        }
        if !cfg.bypass_attention {
            for block in &self.blocks {
                h = block.forward(g, h, false).output;
            }
        }
        let pooled = g.max_pool_rows(h);
        let t = self.ffn_t.forward(g, pooled);
        let big_g = g.gelu(t);
        let s = g.input(Mat::from_shape_vec((1, s_vec.len()), s_vec.to_vec()).expect("row shape"));
        let cat = g.concat_cols(&[big_g, s]);
        let hidden = self.ffn_i.forward(g, cat);
        let hidden = g.softmax_rows(hidden);
        let logits = self.ffn_e.forward(g, hidden);
        let o = match cfg.task {
            Task::Multilabel => g.sigmoid(logits),
            Task::Binary | Task::Multiclass => g.softmax_rows(logits),
        };
        Ok((big_g, o))
    }

    pub fn forward(&self, x: &Mat, s_vec: &[f64], mask: Option<&[bool]>) -> Result<HeadOutput> {
        let mut g = Graph::new(&self.params);
        let (gv, o) = self.build(&mut g, x, s_vec, mask)?;
        Ok(HeadOutput {
            g: g.value(gv).row(0).to_vec(),
            o: g.value(o).row(0).to_vec(),
        })
    }

    /// Structure encoding for a document; zeros when labels are disabled.
    pub fn structure_vector(&self, labels: Option<&[i32]>) -> Vec<f64> {
        match labels {
            Some(l) => encode_for_head(l, self.config.k_cap),
            None => self.zero_structure(),
        }
    }

    pub fn forward_doc(&self, x: &Mat, labels: Option<&[i32]>) -> Result<HeadOutput> {
        self.forward(x, &self.structure_vector(labels), None)
    }

    /// Forward pass with row `occlude` zeroed and its structure label removed.
    pub fn forward_masked(&self, x: &Mat, labels: Option<&[i32]>, occlude: usize) -> Result<HeadOutput> {
        if occlude >= x.nrows() {
            return Err(Error::validation(format!(
                "occluded chunk {occlude} out of range for {} chunks",
                x.nrows()
            )));
        }
        let mut xm = x.clone();
        xm.row_mut(occlude).fill(0.0);
        let s_vec = match labels {
            Some(l) => {
                let rest: Vec<i32> = l.iter().enumerate().filter(|&(i, _)| i != occlude).map(|(_, &v)| v).collect();
                encode_for_head(&rest, self.config.k_cap)
            }
            None => self.zero_structure(),
        };
        self.forward(&xm, &s_vec, None)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            magic: *HEAD_MAGIC,
            meta: serde_json::to_string(&self.config)?,
            tensors: self.params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: HeadConfig = serde_json::from_str(&ck.meta)?;
        let mut head = Head::new(config)?;
        crate::encoder::load_tensors(&mut head.params, ck)?;
        Ok(head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, HEAD_MAGIC)?)
    }
}

impl Trainable for Head {
    type Example = HeadExample;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn example_loss(&self, g: &mut Graph, ex: &HeadExample) -> Result<Var> {
        let (_, o) = self.build(g, &ex.x, &ex.s_vec, None)?;
        graph_loss(g, o, &ex.target, self.config.task)
    }
}

/// Argmax with lowest-index ties for single-label tasks; `O_j >= 0.5` for multi-label.
pub fn predict(o: &[f64], task: Task) -> Vec<usize> {
    match task {
        Task::Multilabel => (0..o.len()).filter(|&j| o[j] >= 0.5).collect(),
        Task::Binary | Task::Multiclass => {
            let mut best = 0;
            for j in 1..o.len() {
                if o[j] > o[best] {
                    best = j;
                }
            }
            if o.is_empty() {
                Vec::new()
            } else {
                vec![best]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gelu, LN_EPS};
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal};

    fn cfg(task: Task, u: usize) -> HeadConfig {
        HeadConfig {
            input_dim: 8,
            heads: 2,
            ffn_t_width: 6,
            ffn_i_width: 5,
            num_labels: u,
            task,
            max_positions: 4,
            k_cap: 3,
            seed: 11,
            ..HeadConfig::default()
        }
    }

    fn rows(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((n, d), |_| dist.sample(&mut rng))
    }

    fn param<'a>(h: &'a Head, name: &str) -> &'a Mat {
        h.params().iter().find(|(n, _)| *n == name).unwrap().1
    }

    fn linear(h: &Head, name: &str, x: &Mat) -> Mat {
        x.dot(param(h, &format!("{name}.weight"))) + param(h, &format!("{name}.bias"))
    }

    fn norm(h: &Head, name: &str, x: &Mat) -> Mat {
        let mean = x.mean().unwrap();
        let var = x.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let n = x.mapv(|v| (v - mean) / (var + LN_EPS).sqrt());
        n * param(h, &format!("{name}.gamma")) + param(h, &format!("{name}.beta"))
    }

    fn softmax(x: &Mat) -> Mat {
        let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e = x.mapv(|v| (v - m).exp());
        let s = e.sum();
        e / s
    }

    /// One position attends only to itself, so attention reduces to the
    /// value and output projections.
    #[test]
    fn single_position_matches_closed_form() {
        let head = Head::new(HeadConfig { layers: 1, ..cfg(Task::Multiclass, 3) }).unwrap();
        let x = rows(1, 8, 1);
        let s_vec = vec![0.25, 0.25, 0.5, 0.0];
        let out = head.forward(&x, &s_vec, None).unwrap();

        let x0 = &x + &param(&head, "head.position").slice(ndarray::s![0..1, ..]);
        let v = linear(&head, "head.layer0.attention.value", &x0);
        let a = linear(&head, "head.layer0.attention.output", &v);
        let h = norm(&head, "head.layer0.attention_norm", &(&x0 + &a));
        let f = linear(&head, "head.layer0.ffn.inner", &h).mapv(gelu);
        let f = linear(&head, "head.layer0.ffn.outer", &f);
        let t = norm(&head, "head.layer0.ffn_norm", &(&h + &f));
        let g = linear(&head, "head.ffn_t", &t).mapv(gelu);
        let mut cat = g.iter().copied().collect::<Vec<_>>();
        cat.extend(&s_vec);
        let cat = Mat::from_shape_vec((1, cat.len()), cat).unwrap();
        let hid = softmax(&linear(&head, "head.ffn_i", &cat));
        let o = softmax(&linear(&head, "head.ffn_e", &hid));
        for (a, b) in out.g.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.o.iter().zip(o.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_per_task() {
        let x = rows(3, 8, 2);
        let bin = Head::new(cfg(Task::Binary, 2)).unwrap();
        let o = bin.forward_doc(&x, None).unwrap().o;
        assert_eq!(o.len(), 2);
        assert!((o.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ml = Head::new(cfg(Task::Multilabel, 3)).unwrap();
        assert!(ml.forward_doc(&x, Some(&[0, -1, 1])).unwrap().o.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn mask_all_but_first_equals_first_alone() {
        let head = Head::new(cfg(Task::Multiclass, 3)).unwrap();
        let x = rows(3, 8, 3);
        let s = head.zero_structure();
        let masked = head.forward(&x, &s, Some(&[false, true, true])).unwrap();
        let alone = head.forward(&x.slice(ndarray::s![0..1, ..]).to_owned(), &s, None).unwrap();
        assert_eq!(masked, alone);
        let nopos = Head::new(HeadConfig { use_positions: false, ..cfg(Task::Multiclass, 3) }).unwrap();
        let masked = nopos.forward(&x, &s, Some(&[true, false, true])).unwrap();
        let alone = nopos.forward(&x.slice(ndarray::s![1..2, ..]).to_owned(), &s, None).unwrap();
        assert_eq!(masked, alone);
        assert!(head.forward(&x, &s, Some(&[true, true, true])).is_err());
    }

    #[test]
    fn zero_occlusion_is_a_noop() {
        let head = Head::new(cfg(Task::Binary, 2)).unwrap();
        let mut x = rows(3, 8, 4);
        x.row_mut(1).fill(0.0);
        assert_eq!(head.forward_masked(&x, None, 1).unwrap(), head.forward_doc(&x, None).unwrap());
        let one = rows(1, 8, 5);
        let o = head.forward_masked(&one, Some(&[2]), 0).unwrap();
        assert!(o.o.iter().all(|p| p.is_finite()));
        assert!(head.forward_masked(&one, None, 1).is_err());
    }

    #[test]
    fn pooled_features_are_permutation_invariant_without_positions() {
        let head = Head::new(HeadConfig {
            use_positions: false,
            bypass_attention: true,
            ..cfg(Task::Binary, 2)
        })
        .unwrap();
        let x = rows(4, 8, 6);
        let perm = x.select(Axis(0), &[2, 0, 3, 1]);
        assert_eq!(head.forward_doc(&x, None).unwrap().g, head.forward_doc(&perm, None).unwrap().g);
        let with_attention = Head::new(HeadConfig { use_positions: false, ..cfg(Task::Binary, 2) }).unwrap();
        let a = with_attention.forward_doc(&x, None).unwrap().g;
        let b = with_attention.forward_doc(&perm, None).unwrap().g;
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_clamp_beyond_max() {
        let head = Head::new(cfg(Task::Binary, 2)).unwrap();
        let x = rows(7, 8, 7);
        assert!(head.forward_doc(&x, None).unwrap().o.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn predict_rules() {
        assert_eq!(predict(&[0.9, 0.1], Task::Binary), vec![0]);
        assert_eq!(predict(&[0.6, 0.4, 0.7], Task::Multilabel), vec![0, 2]);
        assert_eq!(predict(&[0.4, 0.4, 0.2], Task::Multiclass), vec![0]);
        assert_eq!(predict(&[0.2, 0.4, 0.4], Task::Multiclass), vec![1]);
    }

    #[test]
    fn checkpoint_round_trip_and_config_validation() {
        let head = Head::new(cfg(Task::Multilabel, 3)).unwrap();
        let again = Head::from_checkpoint(&Checkpoint::from_bytes(&head.to_checkpoint().unwrap().to_bytes(), HEAD_MAGIC).unwrap()).unwrap();
        assert_eq!(head, again);
        assert!(Head::new(HeadConfig { heads: 3, ..cfg(Task::Binary, 2) }).is_err());
        assert!(Head::new(HeadConfig { layers: 0, ..cfg(Task::Binary, 2) }).is_err());
        assert!(Head::new(cfg(Task::Binary, 3)).is_err());
    }
}
