//! Two-network classifier: a linear mapper pulling an image histogram
//! toward its category histogram, followed by a softmax head over
//! categories.
//!
//! Parameters are f64 while training and persisted as f32 tensors.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::Prediction;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store::{self, Tensor};

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `ŷ = W·x + b` with square `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMapper {
    dim: usize,
    /// Row-major `(dim, dim)`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl LinearMapper {
    pub fn new(dim: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_len("W", w.len(), dim * dim)?;
        check_len("b", b.len(), dim)?;
        if !all_finite(&w) || !all_finite(&b) {
            return Err(Error::Parameter("mapper parameters must be finite".into()));
        }
        Ok(Self { dim, w, b })
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self {
            dim,
            w,
            b: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn w_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn b_mut(&mut self) -> &mut [f64] {
        &mut self.b
    }
}

/// `p = softmax(U·x + c)`; class `i` is reported as `category_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    dim: usize,
    category_ids: Vec<u32>,
    /// Row-major `(C, dim)`.
    u: Vec<f64>,
    c: Vec<f64>,
}

impl SoftmaxHead {
    pub fn new(category_ids: Vec<u32>, dim: usize, u: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let n = category_ids.len();
        if n == 0 {
            return Err(Error::Parameter("softmax head needs at least one class".into()));
        }
        check_len("U", u.len(), n * dim)?;
        check_len("c", c.len(), n)?;
        if !all_finite(&u) || !all_finite(&c) {
            return Err(Error::Parameter("head parameters must be finite".into()));
        }
        Ok(Self {
            dim,
            category_ids,
            u,
            c,
        })
    }

    pub fn zeros(category_ids: Vec<u32>, dim: usize) -> Result<Self> {
        let n = category_ids.len();
        Self::new(category_ids, dim, vec![0.0; n * dim], vec![0.0; n])
    }

    pub fn n_classes(&self) -> usize {
        self.category_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn category_ids(&self) -> &[u32] {
        &self.category_ids
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn u_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn c_mut(&mut self) -> &mut [f64] {
        &mut self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            batch_size: 16,
            epochs: 100,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Zero epochs is allowed and returns the initial model.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Indices and values of the nonzero entries.
fn nonzeros(x: &[f64]) -> Vec<(usize, f64)> {
    x.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(j, &v)| (j, v))
        .collect()
}

fn mapper_forward_sparse(m: &LinearMapper, nz: &[(usize, f64)]) -> Vec<f64> {
    let d = m.dim;
    (0..d)
        .map(|i| {
            let row = &m.w[i * d..(i + 1) * d];
            nz.iter().fold(0.0, |acc, &(j, v)| acc + row[j] * v) + m.b[i]
        })
        .collect()
}

pub fn mapper_forward(m: &LinearMapper, x: &[f64]) -> Result<Vec<f64>> {
    check_len("mapper input", x.len(), m.dim)?;
    Ok(mapper_forward_sparse(m, &nonzeros(x)))
}

/// `½ Σ (target − ŷ)²`.
pub fn mapper_loss(y_hat: &[f64], target: &[f64]) -> Result<f64> {
    check_len("target", target.len(), y_hat.len())?;
    Ok(0.5 * y_hat.iter().zip(target).map(|(y, t)| (t - y) * (t - y)).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperGradients {
    /// Row-major `(V, V)`.
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// `dW = (ŷ − t)·xᵀ`, `db = ŷ − t`.
pub fn mapper_gradients(m: &LinearMapper, x: &[f64], target: &[f64]) -> Result<MapperGradients> {
    let y = mapper_forward(m, x)?;
    check_len("target", target.len(), m.dim)?;
    let e: Vec<f64> = y.iter().zip(target).map(|(y, t)| y - t).collect();
    let d = m.dim;
    let mut dw = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            dw[i * d + j] = e[i] * x[j];
        }
    }
    Ok(MapperGradients { dw, db: e })
}

/// Model plus the mean training loss of each epoch.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub loss_trace: Vec<f64>,
}

impl<M> Trained<M> {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Mini-batch SGD on the squared error from an identity start. Each batch
/// uses the mean gradient at the parameters as they stood before the batch.
pub fn train_mapper(pairs: &[(&[f64], &[f64])], cfg: &TrainConfig) -> Result<Trained<LinearMapper>> {
    cfg.validate()?;
    let Some(&(first, _)) = pairs.first() else {
        return Err(Error::InsufficientData("no training pairs".into()));
    };
    let d = first.len();
    for (i, (x, t)) in pairs.iter().enumerate() {
        if x.len() != d || t.len() != d {
            return Err(Error::Item {
                index: i,
                source: Box::new(Error::Dimension(format!(
                    "pair has lengths ({}, {}), expected {d}",
                    x.len(),
                    t.len()
                ))),
            });
        }
    }
    let sparse: Vec<Vec<(usize, f64)>> = pairs.iter().map(|(x, _)| nonzeros(x)).collect();
    let mut m = LinearMapper::identity(d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut errors: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in epoch_order(pairs.len(), &mut rng).chunks(cfg.batch_size) {
            errors.clear();
            for &s in batch {
                let y = mapper_forward_sparse(&m, &sparse[s]);
                let t = pairs[s].1;
                let e: Vec<f64> = y.iter().zip(t).map(|(y, t)| y - t).collect();
                epoch_loss += 0.5 * e.iter().map(|v| v * v).sum::<f64>();
                errors.push(e);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (e, &s) in errors.iter().zip(batch) {
                for i in 0..d {
                    let g = step * e[i];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut m.w[i * d..(i + 1) * d];
                    for &(j, v) in &sparse[s] {
                        row[j] -= g * v;
                    }
                    m.b[i] -= g;
                }
            }
        }
        trace.push(epoch_loss / pairs.len() as f64);
    }
    if !all_finite(&m.w) || !all_finite(&m.b) {
        return Err(Error::Parameter(
            "mapper training diverged; lower the learning rate".into(),
        ));
    }
    Ok(Trained {
        model: m,
        loss_trace: trace,
    })
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Class probabilities, computed with the maximum logit subtracted.
pub fn head_forward(h: &SoftmaxHead, x: &[f64]) -> Result<Vec<f64>> {
    check_len("head input", x.len(), h.dim)?;
    let d = h.dim;
    let mut z: Vec<f64> = (0..h.n_classes())
        .map(|k| {
            let row = &h.u[k * d..(k + 1) * d];
            row.iter().zip(x).map(|(u, x)| u * x).sum::<f64>() + h.c[k]
        })
        .collect();
    softmax_in_place(&mut z);
    Ok(z)
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

/// Cross-entropy `−ln p[label]`.
pub fn head_loss(h: &SoftmaxHead, x: &[f64], label: usize) -> Result<f64> {
    check_label(label, h.n_classes())?;
    let p = head_forward(h, x)?;
    Ok(-p[label].ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    /// Row-major `(C, V)`.
    pub du: Vec<f64>,
    pub dc: Vec<f64>,
}

/// `dU = (p − onehot)·xᵀ`, `dc = p − onehot`.
pub fn head_gradients(h: &SoftmaxHead, x: &[f64], label: usize) -> Result<HeadGradients> {
    check_label(label, h.n_classes())?;
    let mut g = head_forward(h, x)?;
    g[label] -= 1.0;
    let d = h.dim;
    let mut du = vec![0.0; g.len() * d];
    for (k, &gk) in g.iter().enumerate() {
        for (dst, &xj) in du[k * d..(k + 1) * d].iter_mut().zip(x) {
            *dst = gk * xj;
        }
    }
    Ok(HeadGradients { du, dc: g })
}

/// Mini-batch SGD on cross-entropy from a zero start. `labels[i]` indexes
/// `category_ids`.
pub fn train_head(
    inputs: &[&[f64]],
    labels: &[usize],
    category_ids: Vec<u32>,
    cfg: &TrainConfig,
) -> Result<Trained<SoftmaxHead>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::InsufficientData("no training inputs".into()));
    }
    check_len("labels", labels.len(), inputs.len())?;
    let d = inputs[0].len();
    let mut h = SoftmaxHead::zeros(category_ids, d)?;
    let c = h.n_classes();
    for (i, (x, &l)) in inputs.iter().zip(labels).enumerate() {
        let item = |e| Error::Item {
            index: i,
            source: Box::new(e),
        };
        check_label(l, c).map_err(item)?;
        check_len("input", x.len(), d).map_err(item)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut residuals: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in epoch_order(inputs.len(), &mut rng).chunks(cfg.batch_size) {
            residuals.clear();
            for &s in batch {
                let mut g = head_forward(&h, inputs[s])?;
                epoch_loss -= g[labels[s]].ln();
                g[labels[s]] -= 1.0;
                residuals.push(g);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (g, &s) in residuals.iter().zip(batch) {
                let x = inputs[s];
                for k in 0..c {
                    let gk = step * g[k];
                    for (u, &xj) in h.u[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *u -= gk * xj;
                    }
                    h.c[k] -= gk;
                }
            }
        }
        trace.push(epoch_loss / inputs.len() as f64);
    }
    if !all_finite(&h.u) || !all_finite(&h.c) {
        return Err(Error::Parameter(
            "head training diverged; lower the learning rate".into(),
        ));
    }
    Ok(Trained {
        model: h,
        loss_trace: trace,
    })
}

/// Rank classes by `head(mapper(x))`, most probable first; ties go to the
/// lower category id. The distance slot of each entry holds `1 − p`.
pub fn predict_neural(m: &LinearMapper, h: &SoftmaxHead, x: &[f64], top_k: usize) -> Result<Prediction> {
    if top_k == 0 {
        return Err(Error::Parameter("top_k must be at least 1".into()));
    }
    if m.dim != h.dim {
        return Err(Error::Dimension(format!(
            "mapper outputs {} values but head expects {}",
            m.dim, h.dim
        )));
    }
    let p = head_forward(h, &mapper_forward(m, x)?)?;
    Ok(rank_probabilities(&p, h.category_ids(), top_k))
}

pub(crate) fn rank_probabilities(p: &[f64], ids: &[u32], top_k: usize) -> Prediction {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(top_k);
    Prediction {
        ranked: order.into_iter().map(|i| (ids[i], 1.0 - p[i])).collect(),
    }
}

/// Metadata stored next to the model tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub seed: u64,
    pub epochs: usize,
    /// Final mean epoch loss of the mapper.
    pub final_loss: Option<f64>,
    pub head_final_loss: Option<f64>,
    pub category_ids: Vec<u32>,
}

/// Mapper and head together.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    pub mapper: LinearMapper,
    pub head: SoftmaxHead,
    pub meta: ModelMeta,
}

const META_FILE: &str = "meta.json";

fn model_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.{}", store::TENSOR_EXT))
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: Vec<f32>) -> Vec<f64> {
    v.into_iter().map(f64::from).collect()
}

impl NeuralModel {
    pub fn predict(&self, x: &[f64], top_k: usize) -> Result<Prediction> {
        predict_neural(&self.mapper, &self.head, x, top_k)
    }

    /// Write `W`, `b`, `U`, `c` tensors and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let v = self.mapper.dim;
        let c = self.head.n_classes();
        store::write_matrix(model_file(dir, "W"), &Matrix::from_vec(v, v, to_f32(&self.mapper.w))?)?;
        store::write_tensor(model_file(dir, "b"), &Tensor::vector_f32(to_f32(&self.mapper.b)))?;
        store::write_matrix(
            model_file(dir, "U"),
            &Matrix::from_vec(c, self.head.dim, to_f32(&self.head.u))?,
        )?;
        store::write_tensor(model_file(dir, "c"), &Tensor::vector_f32(to_f32(&self.head.c)))?;
        let meta = serde_json::to_vec_pretty(&self.meta)
            .map_err(|e| Error::Parameter(format!("cannot encode model metadata: {e}")))?;
        let meta_path = dir.join(META_FILE);
        store::write_atomic(&meta_path, |w| w.write_all(&meta))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ModelMeta = serde_json::from_slice(&text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: format!("{}: {e}", meta_path.display()),
        })?;
        let w = store::read_matrix(model_file(dir, "W"))?;
        let b = store::read_tensor(model_file(dir, "b"))?.into_f32_vec()?;
        let u = store::read_matrix(model_file(dir, "U"))?;
        let c = store::read_tensor(model_file(dir, "c"))?.into_f32_vec()?;
        if w.rows() != meta.v || w.cols() != meta.v || u.rows() != meta.c || u.cols() != meta.v {
            return Err(Error::Dimension(format!(
                "model tensors W {}x{}, U {}x{} disagree with V = {}, C = {}",
                w.rows(),
                w.cols(),
                u.rows(),
                u.cols(),
                meta.v,
                meta.c
            )));
        }
        if meta.category_ids.len() != meta.c {
            return Err(Error::Dimension(format!(
                "{} category ids for C = {}",
                meta.category_ids.len(),
                meta.c
            )));
        }
        Ok(Self {
            mapper: LinearMapper::new(meta.v, to_f64(w.into_vec()), to_f64(b))?,
            head: SoftmaxHead::new(meta.category_ids.clone(), meta.v, to_f64(u.into_vec()), to_f64(c))?,
            meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_mapper(d: usize, rng: &mut ChaCha8Rng) -> LinearMapper {
        LinearMapper::new(d, random_vec(d * d, rng), random_vec(d, rng)).unwrap()
    }

    fn random_head(c: usize, d: usize, rng: &mut ChaCha8Rng) -> SoftmaxHead {
        SoftmaxHead::new((0..c as u32).collect(), d, random_vec(c * d, rng), random_vec(c, rng)).unwrap()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
    }

    #[test]
    fn identity_and_constant_mappers() {
        let x = [0.25, 0.0, 0.75];
        assert_eq!(mapper_forward(&LinearMapper::identity(3), &x).unwrap(), x);
        let t = vec![0.1, 0.2, 0.3];
        let m = LinearMapper::new(3, vec![0.0; 9], t.clone()).unwrap();
        assert_eq!(mapper_forward(&m, &x).unwrap(), t);
        assert!(matches!(mapper_forward(&m, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn forward_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mapper(8, &mut rng);
        let x = random_vec(8, &mut rng);
        let y = mapper_forward(&m, &x).unwrap();
        for i in 0..8 {
            let mut acc = 0.0;
            for j in 0..8 {
                acc += m.w()[i * 8 + j] * x[j];
            }
            assert!((y[i] - (acc + m.b()[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_values() {
        let t = [0.5, 0.5, 0.0];
        assert_eq!(mapper_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(mapper_loss(&[1.5, 0.5, 0.0], &t).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_vec(16, &mut rng), random_vec(16, &mut rng));
        let mut s = 0.0;
        for i in 0..16 {
            s += (b[i] - a[i]) * (b[i] - a[i]);
        }
        assert!((mapper_loss(&a, &b).unwrap() - 0.5 * s).abs() <= 1e-12);
    }

    #[test]
    fn mapper_gradient_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mapper(4, &mut rng);
        let x = random_vec(4, &mut rng);
        let y = mapper_forward(&m, &x).unwrap();
        let g = mapper_gradients(&m, &x, &y).unwrap();
        assert!(g.dw.iter().chain(&g.db).all(|&v| v == 0.0));
        let t = random_vec(4, &mut rng);
        let g = mapper_gradients(&m, &[0.0; 4], &t).unwrap();
        assert!(g.dw.iter().all(|&v| v == 0.0));
        for i in 0..4 {
            assert_eq!(g.db[i], m.b()[i] - t[i]);
        }
    }

    #[test]
    fn mapper_gradient_matches_finite_differences() {
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mapper(4, &mut rng);
        let x = random_vec(4, &mut rng);
        let t = random_vec(4, &mut rng);
        let g = mapper_gradients(&m, &x, &t).unwrap();
        let loss = |m: &LinearMapper| mapper_loss(&mapper_forward(m, &x).unwrap(), &t).unwrap();
        for p in 0..16 {
            let (mut a, mut b) = (m.clone(), m.clone());
            a.w_mut()[p] += eps;
            b.w_mut()[p] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!(rel_err(g.dw[p], fd) < 1e-6, "W[{p}]: {} vs {fd}", g.dw[p]);
        }
        for p in 0..4 {
            let (mut a, mut b) = (m.clone(), m.clone());
            a.b_mut()[p] += eps;
            b.b_mut()[p] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!(rel_err(g.db[p], fd) < 1e-6);
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_head(3, 5, &mut rng);
        let x = random_vec(5, &mut rng);
        let g = head_gradients(&h, &x, 1).unwrap();
        let loss = |h: &SoftmaxHead| head_loss(h, &x, 1).unwrap();
        for p in 0..15 {
            let (mut a, mut b) = (h.clone(), h.clone());
            a.u_mut()[p] += eps;
            b.u_mut()[p] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!(rel_err(g.du[p], fd) < 1e-6, "U[{p}]: {} vs {fd}", g.du[p]);
        }
        for p in 0..3 {
            let (mut a, mut b) = (h.clone(), h.clone());
            a.c_mut()[p] += eps;
            b.c_mut()[p] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!(rel_err(g.dc[p], fd) < 1e-6);
        }
    }

    #[test]
    fn single_pair_converges() {
        let x = [0.5, 0.25, 0.25, 0.0];
        let t = [0.0, 0.1, 0.4, 0.5];
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 1,
            epochs: 2000,
            seed: 0,
        };
        let r = train_mapper(&[(&x, &t)], &cfg).unwrap();
        let y = mapper_forward(&r.model, &x).unwrap();
        assert!(mapper_loss(&y, &t).unwrap() < 1e-6);
    }

    #[test]
    fn identity_targets_stay_at_zero_loss() {
        let a = [0.5, 0.5, 0.0];
        let b = [0.0, 0.2, 0.8];
        let r = train_mapper(&[(&a, &a), (&b, &b)], &TrainConfig::default()).unwrap();
        assert!(r.loss_trace.iter().all(|&l| l == 0.0));
        assert_eq!(r.model, LinearMapper::identity(3));
    }

    #[test]
    fn tiny_dataset_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..4)
            .map(|_| {
                let x: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
                let t: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
                (x, t)
            })
            .collect();
        let pairs: Vec<(&[f64], &[f64])> = data.iter().map(|(x, t)| (&x[..], &t[..])).collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            epochs: 200,
            seed: 1,
        };
        let r = train_mapper(&pairs, &cfg).unwrap();
        assert!(r.loss_trace[199] < r.loss_trace[0]);
        let again = train_mapper(&pairs, &cfg).unwrap();
        assert_eq!(again.model, r.model);
        assert_eq!(again.loss_trace, r.loss_trace);
    }

    #[test]
    fn empty_training_sets_are_rejected() {
        assert!(matches!(
            train_mapper(&[], &TrainConfig::default()),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            train_head(&[], &[], vec![0], &TrainConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let h = SoftmaxHead::zeros(vec![0, 1, 2, 3], 2).unwrap();
        assert_eq!(head_forward(&h, &[3.0, -1.0]).unwrap(), [0.25; 4]);
        let h = SoftmaxHead::new(vec![0, 1, 2], 1, vec![0.0; 3], vec![10.0, 0.0, 0.0]).unwrap();
        let p = head_forward(&h, &[1.0]).unwrap();
        let e = (-10.0f64).exp();
        assert!((p[0] - 1.0 / (1.0 + 2.0 * e)).abs() < 1e-15);
        assert!(p[0] > 0.9999);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_gives_ln_c() {
        let xs = [vec![0.3, 0.7], vec![1.0, 0.0], vec![0.0, 1.0]];
        let inputs: Vec<&[f64]> = xs.iter().map(|x| &x[..]).collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let r = train_head(&inputs, &[0, 1, 4], (0..5).collect(), &cfg).unwrap();
        for (x, l) in xs.iter().zip([0, 1, 4]) {
            assert_eq!(head_loss(&r.model, x, l).unwrap(), 5f64.ln());
        }
    }

    #[test]
    fn out_of_range_label() {
        let x = [1.0, 0.0];
        let r = train_head(&[&x], &[2], vec![0, 1], &TrainConfig::default());
        match r {
            Err(Error::Item { index: 0, source }) => {
                assert!(matches!(*source, Error::Label { label: 2, classes: 2 }))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separable_classes_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            let mut x: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..0.2)).collect();
            x[class * 2] += 0.6;
            xs.push(x);
            labels.push(class);
        }
        let inputs: Vec<&[f64]> = xs.iter().map(|x| &x[..]).collect();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 8,
            epochs: 500,
            seed: 3,
        };
        let h = train_head(&inputs, &labels, vec![10, 20], &cfg).unwrap().model;
        let m = LinearMapper::identity(4);
        for (x, &l) in xs.iter().zip(&labels) {
            let p = predict_neural(&m, &h, x, 1).unwrap();
            assert_eq!(p.top(), Some([10, 20][l]));
        }
    }

    #[test]
    fn identity_mapper_matches_head_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_head(5, 6, &mut rng);
        for _ in 0..20 {
            let x = random_vec(6, &mut rng);
            let p = head_forward(&h, &x).unwrap();
            let pred = predict_neural(&LinearMapper::identity(6), &h, &x, 5).unwrap();
            assert_eq!(pred, rank_probabilities(&p, h.category_ids(), 5));
            let argmax = (0..5).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(pred.top(), Some(argmax as u32));
        }
    }

    #[test]
    fn spectrum_rows_as_head_weights() {
        let spectra = [
            vec![0.7, 0.3, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.6, 0.4, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.1, 0.5, 0.4],
        ];
        let u: Vec<f64> = spectra.iter().flat_map(|r| r.iter().map(|v| v * 20.0)).collect();
        let h = SoftmaxHead::new(vec![3, 4, 5], 6, u, vec![0.0; 3]).unwrap();
        for (j, s) in spectra.iter().enumerate() {
            let p = predict_neural(&LinearMapper::identity(6), &h, s, 3).unwrap();
            assert_eq!(p.top(), Some(3 + j as u32));
            assert_eq!(p.ranked.len(), 3);
            assert!(p.ranked.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect::<Vec<_>>();
        let mapper = LinearMapper::new(3, to32(random_vec(9, &mut rng)), to32(random_vec(3, &mut rng))).unwrap();
        let head = SoftmaxHead::new(vec![1, 7], 3, to32(random_vec(6, &mut rng)), to32(random_vec(2, &mut rng))).unwrap();
        let model = NeuralModel {
            mapper,
            head,
            meta: ModelMeta {
                v: 3,
                c: 2,
                seed: 5,
                epochs: 10,
                final_loss: Some(0.25),
                head_final_loss: None,
                category_ids: vec![1, 7],
            },
        };
        model.save(dir.path()).unwrap();
        assert_eq!(NeuralModel::load(dir.path()).unwrap(), model);
    }

    proptest! {
        #[test]
        fn softmax_contract(seed in 0u64..1000, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_head(4, 3, &mut rng);
            let x = random_vec(3, &mut rng);
            let p = head_forward(&h, &x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let mut shifted = h.clone();
            for c in shifted.c_mut() {
                *c += shift;
            }
            let q = head_forward(&shifted, &x).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
