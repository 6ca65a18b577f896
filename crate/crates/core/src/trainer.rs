//! Task losses, Adam, the seeded training loop and finite-difference
//! gradient verification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::nn::{clamp_prob, Grads, Graph, Mat, ParamSet, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Cce,
}

impl LossKind {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Multiclass => LossKind::Cce,
            Task::Binary | Task::Multilabel => LossKind::Bce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
}

/// 0/1 indicator vector of length `u`.
pub fn binarize(target: &[usize], u: usize) -> Vec<f64> {
    let mut y = vec![0.0; u];
    for &t in target {
        if t < u {
            y[t] = 1.0;
        }
    }
    y
}

fn check_target(target: &[usize], task: Task, u: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&t| t >= u) {
        return Err(Error::validation(format!("target label {bad} outside 0..{u}")));
    }
    if task != Task::Multilabel && target.len() != 1 {
        return Err(Error::validation(format!(
            "{task} target needs exactly one label, got {}",
            target.len()
        )));
    }
    Ok(())
}

pub fn loss(o: &[f64], target: &[usize], task: Task) -> Result<LossValue> {
    let u = o.len();
    check_target(target, task, u)?;
    let kind = LossKind::for_task(task);
    let value = match kind {
        LossKind::Cce => -clamp_prob(o[target[0]]).ln(),
        LossKind::Bce => {
            let y = binarize(target, u);
            -y.iter()
                .zip(o)
                .map(|(&y, &q)| {
                    let q = clamp_prob(q);
                    y * q.ln() + (1.0 - y) * (1.0 - q).ln()
                })
                .sum::<f64>()
                / u as f64
        }
    };
    Ok(LossValue { value, kind })
}

/// Differentiable counterpart of [`loss`] on a `1 x u` probability node.
pub fn graph_loss(g: &mut Graph, probs: Var, target: &[usize], task: Task) -> Result<Var> {
    let u = g.value(probs).ncols();
    check_target(target, task, u)?;
    Ok(match LossKind::for_task(task) {
        LossKind::Cce => g.cce(probs, target[0]),
        LossKind::Bce => g.bce(probs, &binarize(target, u)),
    })
}

pub trait Trainable: Sync {
    type Example: Sync;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Records the forward pass of one example and returns its scalar loss.
    fn example_loss(&self, g: &mut Graph, example: &Self::Example) -> Result<Var>;
}

fn finite_loss(value: f64, index: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {value} on example {index} of the batch")));
    }
    Ok(value)
}

/// Mean loss of `batch` without differentiation.
pub fn batch_loss<M: Trainable>(model: &M, batch: &[&M::Example]) -> Result<f64> {
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let mut g = Graph::new(model.params());
        let l = model.example_loss(&mut g, ex)?;
        total += finite_loss(g.scalar(l), i)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean batch loss and its exact gradients. Examples are differentiated in
/// parallel and summed in batch order.
pub fn backward<M: Trainable>(model: &M, batch: &[&M::Example]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let parts: Vec<Result<(f64, Grads)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut g = Graph::new(model.params());
            let l = model.example_loss(&mut g, ex)?;
            let value = finite_loss(g.scalar(l), i)?;
            Ok((value, g.backward(l)))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Grads::new(model.params().len());
    for part in parts {
        let (value, gr) = part?;
        total += value;
        grads.accumulate(&gr);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    if !grads.all_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok((total / n, grads))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are left alone.
    pub fn update(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Training aborts once a batch loss exceeds this value.
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 3.5e-6,
            seed: 0,
            batch_size: 1,
            max_loss: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Seeded mini-batch Adam. After every epoch `on_epoch(epoch, mean_loss, model)`
/// returns the history lines for that epoch.
pub fn train<M, F>(model: &mut M, data: &[M::Example], cfg: &TrainConfig, mut on_epoch: F) -> Result<Vec<HistoryRecord>>
where
    M: Trainable,
    F: FnMut(usize, f64, &M) -> Result<Vec<HistoryRecord>>,
{
    if data.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config(format!("learning rate {} must be finite and non-negative", cfg.lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&M::Example> = idx.iter().map(|&i| &data[i]).collect();
            let (l, grads) = backward(model, &batch)?;
            if l > cfg.max_loss {
                return Err(Error::Numerical(format!(
                    "loss diverged to {l:.3e} in epoch {epoch} (limit {:.1e})",
                    cfg.max_loss
                )));
            }
            total += l * batch.len() as f64;
            adam.update(model.params_mut(), &grads);
        }
        let mean = total / data.len() as f64;
        log::info!("epoch {epoch}: train loss {mean:.6}");
        history.extend(on_epoch(epoch, mean, model)?);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter and coordinate with the largest error.
    pub worst: String,
}

/// Compares analytic gradients with central differences of step `eps`.
/// At most `per_tensor` coordinates of each parameter are probed, chosen
/// with `seed`. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check<M: Trainable>(
    model: &mut M,
    batch: &[&M::Example],
    eps: f64,
    floor: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(&*model, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let size = model.params().get(id).len();
        let mut coords: Vec<usize> = (0..size).collect();
        if size > per_tensor {
            coords.shuffle(&mut rng);
            coords.truncate(per_tensor);
        }
        let cols = model.params().get(id).ncols();
        for k in coords {
            let (r, c) = (k / cols, k % cols);
            let orig = model.params().get(id)[[r, c]];
            model.params_mut().get_mut(id)[[r, c]] = orig + eps;
            let plus = batch_loss(&*model, batch)?;
            model.params_mut().get_mut(id)[[r, c]] = orig - eps;
            let minus = batch_loss(&*model, batch)?;
            model.params_mut().get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!(
                    "{}[{r},{c}] analytic {analytic:.6e} numeric {numeric:.6e}",
                    model.params().name(id)
                );
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;

    #[test]
    fn golden_losses() {
        let cce = loss(&[0.7, 0.3], &[0], Task::Multiclass).unwrap();
        assert_eq!(cce.kind, LossKind::Cce);
        assert!((cce.value - 0.356_675).abs() < 1e-6);
        let bce = loss(&[0.5, 0.5], &[0], Task::Binary).unwrap();
        assert_eq!(bce.kind, LossKind::Bce);
        assert!((bce.value - std::f64::consts::LN_2).abs() < 1e-12);
        let exact = loss(&[1.0, 0.0, 1.0], &[0, 2], Task::Multilabel).unwrap();
        assert!(exact.value >= 0.0 && exact.value <= 1e-11);
        assert!(loss(&[0.5, 0.5], &[], Task::Multiclass).is_err());
        assert!(loss(&[0.5, 0.5], &[2], Task::Binary).is_err());
    }

    /// Logistic regression on one fixed input.
    struct Toy {
        params: ParamSet,
        lin: Linear,
        task: Task,
    }

    impl Toy {
        fn new(seed: u64, task: Task) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParamSet::new();
            let lin = Linear::new(&mut params, &mut rng, "lin", 3, 2);
            Toy { params, lin, task }
        }
    }

    impl Trainable for Toy {
        type Example = (Mat, usize);
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn example_loss(&self, g: &mut Graph, ex: &Self::Example) -> Result<Var> {
            let x = g.input(ex.0.clone());
            let z = self.lin.forward(g, x);
            let p = g.softmax_rows(z);
            graph_loss(g, p, &[ex.1], self.task)
        }
    }

    fn data() -> Vec<(Mat, usize)> {
        vec![(array![[0.5, -1.0, 2.0]], 1), (array![[-0.3, 0.2, 0.1]], 0)]
    }

    #[test]
    fn lr_zero_and_zero_epochs_keep_weights() {
        for (epochs, lr) in [(0, 0.1), (3, 0.0)] {
            let mut m = Toy::new(1, Task::Multiclass);
            let before = m.params.clone();
            let cfg = TrainConfig { epochs, lr, ..TrainConfig::default() };
            train(&mut m, &data(), &cfg, |_, _, _| Ok(vec![])).unwrap();
            assert_eq!(m.params, before);
        }
    }

    #[test]
    fn zero_gradient_step_is_noop() {
        let mut m = Toy::new(2, Task::Multiclass);
        let before = m.params.clone();
        let mut adam = Adam::new(&m.params, 0.5);
        let mut grads = Grads::new(m.params.len());
        for id in m.params.ids() {
            grads.set(id, Mat::zeros(m.params.get(id).dim()));
        }
        adam.update(&mut m.params, &grads);
        assert_eq!(m.params, before);
    }

    #[test]
    fn duplicated_example_doubles_summed_gradient() {
        let m = Toy::new(3, Task::Binary);
        let d = data();
        let (_, one) = backward(&m, &[&d[0]]).unwrap();
        let (_, two) = backward(&m, &[&d[0], &d[0]]).unwrap();
        for id in m.params.ids() {
            assert_eq!(one.get(id), two.get(id));
        }
    }

    #[test]
    fn memorizes_single_sample() {
        let mut m = Toy::new(4, Task::Multiclass);
        let d = vec![data().remove(0)];
        let cfg = TrainConfig { epochs: 400, lr: 0.05, ..TrainConfig::default() };
        train(&mut m, &d, &cfg, |_, _, _| Ok(vec![])).unwrap();
        assert!(batch_loss(&m, &[&d[0]]).unwrap() <= 1e-3);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = TrainConfig { epochs: 5, lr: 0.01, seed: 9, ..TrainConfig::default() };
        let mut a = Toy::new(5, Task::Multiclass);
        let mut b = Toy::new(5, Task::Multiclass);
        train(&mut a, &data(), &cfg, |_, _, _| Ok(vec![])).unwrap();
        train(&mut b, &data(), &cfg, |_, _, _| Ok(vec![])).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_aborts() {
        let mut m = Toy::new(6, Task::Multiclass);
        let cfg = TrainConfig { epochs: 1, lr: 0.0, max_loss: 1e-9, ..TrainConfig::default() };
        let err = train(&mut m, &data(), &cfg, |_, _, _| Ok(vec![]));
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn toy_gradients_check() {
        let mut m = Toy::new(7, Task::Binary);
        let d = data();
        let rep = gradient_check(&mut m, &[&d[0], &d[1]], 1e-4, 1e-6, 100, 0).unwrap();
        assert_eq!(rep.checked, 8);
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
