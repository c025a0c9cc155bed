//! Modality-specific GRU encoders, the shared prediction head and their
//! analytic gradients.
//!
//! GRU recurrence (row-vector convention, `x` is one input frame):
//!
//! ```text
//! z  = sigmoid(x W_z + h U_z + b_z)          update gate
//! r  = sigmoid(x W_r + h U_r + b_r)          reset gate
//! n  = tanh(x W_n + (r * h) U_n + b_n)       candidate
//! h' = (1 - z) * n + z * h
//! ```
//!
//! Weights are initialised uniformly in `±sqrt(6 / (fan_in + fan_out))`,
//! biases at zero.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{softmax, Task};
use crate::numkit::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix, SeededRng};
use crate::Modality;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-limit, limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes match")
}

/// One gated recurrent layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_n: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_n: Matrix,
    pub b_z: Matrix,
    pub b_r: Matrix,
    pub b_n: Matrix,
}

/// Activations kept by [`GruLayer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    x: Matrix,
    /// Row 0 is `h0`, row `t + 1` the state after frame `t`.
    h: Matrix,
    z: Matrix,
    r: Matrix,
    n: Matrix,
}

impl GruCache {
    /// Hidden states after each frame, `T × hidden`.
    pub fn outputs(&self) -> Matrix {
        self.h.slice_rows(1, self.h.rows())
    }
}

impl GruLayer {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        let (i, h) = (input_dim, hidden_dim);
        Self {
            input_dim,
            hidden_dim,
            w_z: glorot(i, h, rng),
            w_r: glorot(i, h, rng),
            w_n: glorot(i, h, rng),
            u_z: glorot(h, h, rng),
            u_r: glorot(h, h, rng),
            u_n: glorot(h, h, rng),
            b_z: Matrix::zeros(1, h),
            b_r: Matrix::zeros(1, h),
            b_n: Matrix::zeros(1, h),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let (i, h) = (input_dim, hidden_dim);
        Self {
            input_dim,
            hidden_dim,
            w_z: Matrix::zeros(i, h),
            w_r: Matrix::zeros(i, h),
            w_n: Matrix::zeros(i, h),
            u_z: Matrix::zeros(h, h),
            u_r: Matrix::zeros(h, h),
            u_n: Matrix::zeros(h, h),
            b_z: Matrix::zeros(1, h),
            b_r: Matrix::zeros(1, h),
            b_n: Matrix::zeros(1, h),
        }
    }

    pub fn tensors(&self) -> [&Matrix; 9] {
        [&self.w_z, &self.w_r, &self.w_n, &self.u_z, &self.u_r, &self.u_n, &self.b_z, &self.b_r, &self.b_n]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_n,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_n,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_n,
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        let expect = [(i, h), (i, h), (i, h), (h, h), (h, h), (h, h), (1, h), (1, h), (1, h)];
        for (t, s) in self.tensors().iter().zip(expect) {
            if t.shape() != s {
                return Err(Error::shape(format!(
                    "GRU tensor is {:?}, expected {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, h0: &[f64]) -> Result<GruCache> {
        let (t_len, hd) = (x.rows(), self.hidden_dim);
        if x.cols() != self.input_dim {
            return Err(Error::shape(format!(
                "GRU expects {} input features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        if h0.len() != hd {
            return Err(Error::shape(format!("h0 has {} entries, expected {hd}", h0.len())));
        }
        let mut az = Matrix::zeros(t_len, hd);
        let mut ar = Matrix::zeros(t_len, hd);
        let mut an = Matrix::zeros(t_len, hd);
        for (pre, w, b) in [(&mut az, &self.w_z, &self.b_z), (&mut ar, &self.w_r, &self.b_r), (&mut an, &self.w_n, &self.b_n)] {
            matmul_acc(x.as_slice(), t_len, self.input_dim, w, pre.as_mut_slice());
            for row in 0..t_len {
                for (p, bv) in pre.row_mut(row).iter_mut().zip(b.as_slice()) {
                    *p += bv;
                }
            }
        }

        let mut h = Matrix::zeros(t_len + 1, hd);
        h.row_mut(0).copy_from_slice(h0);
        let mut rh = vec![0.0; hd];
        for t in 0..t_len {
            let hp = h.row(t).to_vec();
            matmul_acc(&hp, 1, hd, &self.u_z, az.row_mut(t));
            matmul_acc(&hp, 1, hd, &self.u_r, ar.row_mut(t));
            az.row_mut(t).iter_mut().for_each(|v| *v = sigmoid(*v));
            ar.row_mut(t).iter_mut().for_each(|v| *v = sigmoid(*v));
            for ((o, r), p) in rh.iter_mut().zip(ar.row(t)).zip(&hp) {
                *o = r * p;
            }
            matmul_acc(&rh, 1, hd, &self.u_n, an.row_mut(t));
            an.row_mut(t).iter_mut().for_each(|v| *v = v.tanh());
            let (zr, nr) = (az.row(t), an.row(t));
            let out = h.row_mut(t + 1);
            for j in 0..hd {
                out[j] = (1.0 - zr[j]) * nr[j] + zr[j] * hp[j];
            }
        }
        Ok(GruCache { x: x.clone(), h, z: az, r: ar, n: an })
    }

    /// Backpropagates `d_h` (gradient w.r.t. every output state) through the
    /// sequence, accumulating parameter gradients into `grads`. Returns the
    /// gradient w.r.t. the input frames.
    pub fn backward(&self, cache: &GruCache, d_h: &Matrix, grads: &mut GruLayer) -> Matrix {
        let hd = self.hidden_dim;
        let t_len = cache.x.rows();
        debug_assert_eq!(d_h.shape(), (t_len, hd));
        let mut da_z = Matrix::zeros(t_len, hd);
        let mut da_r = Matrix::zeros(t_len, hd);
        let mut da_n = Matrix::zeros(t_len, hd);
        let mut dh_next = vec![0.0; hd];
        let mut d_rh = vec![0.0; hd];
        let mut rh = vec![0.0; hd];

        for t in (0..t_len).rev() {
            let hp = cache.h.row(t);
            let (z, r, n) = (cache.z.row(t), cache.r.row(t), cache.n.row(t));
            let mut dh_prev = vec![0.0; hd];
            {
                let (dz_row, dn_row) = (da_z.row_mut(t), da_n.row_mut(t));
                for j in 0..hd {
                    let dh = d_h.get(t, j) + dh_next[j];
                    dn_row[j] = dh * (1.0 - z[j]) * (1.0 - n[j] * n[j]);
                    dz_row[j] = dh * (hp[j] - n[j]) * z[j] * (1.0 - z[j]);
                    dh_prev[j] = dh * z[j];
                }
            }
            d_rh.iter_mut().for_each(|v| *v = 0.0);
            matmul_nt_acc(da_n.row(t), 1, &self.u_n, &mut d_rh);
            {
                let dr_row = da_r.row_mut(t);
                for j in 0..hd {
                    dr_row[j] = d_rh[j] * hp[j] * r[j] * (1.0 - r[j]);
                    dh_prev[j] += d_rh[j] * r[j];
                    rh[j] = r[j] * hp[j];
                }
            }
            matmul_nt_acc(da_z.row(t), 1, &self.u_z, &mut dh_prev);
            matmul_nt_acc(da_r.row(t), 1, &self.u_r, &mut dh_prev);

            matmul_tn_acc(hp, da_z.row(t), 1, hd, hd, &mut grads.u_z);
            matmul_tn_acc(hp, da_r.row(t), 1, hd, hd, &mut grads.u_r);
            matmul_tn_acc(&rh, da_n.row(t), 1, hd, hd, &mut grads.u_n);
            dh_next = dh_prev;
        }

        let xs = cache.x.as_slice();
        let id = self.input_dim;
        let mut dx = Matrix::zeros(t_len, id);
        for (da, w, gw, gb) in [
            (&da_z, &self.w_z, &mut grads.w_z, &mut grads.b_z),
            (&da_r, &self.w_r, &mut grads.w_r, &mut grads.b_r),
            (&da_n, &self.w_n, &mut grads.w_n, &mut grads.b_n),
        ] {
            matmul_tn_acc(xs, da.as_slice(), t_len, id, hd, gw);
            for row in da.row_iter() {
                for (g, v) in gb.as_mut_slice().iter_mut().zip(row) {
                    *g += v;
                }
            }
            matmul_nt_acc(da.as_slice(), t_len, w, dx.as_mut_slice());
        }
        dx
    }
}

/// Stateless GRU pass returning the `T × hidden` state sequence.
pub fn gru_forward(layer: &GruLayer, sequence: &Matrix, h0: &[f64]) -> Result<Matrix> {
    if !sequence.is_finite() {
        return Err(Error::Numeric("input sequence contains non-finite values".into()));
    }
    Ok(layer.forward(sequence, h0)?.outputs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

/// Fully connected layer `y = act(x W + b)` applied to every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Matrix,
    y: Matrix,
}

impl DenseCache {
    pub fn outputs(&self) -> &Matrix {
        &self.y
    }
}

impl DenseLayer {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
            w: glorot(input_dim, output_dim, rng),
            b: Matrix::zeros(1, output_dim),
        }
    }

    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
            w: Matrix::zeros(input_dim, output_dim),
            b: Matrix::zeros(1, output_dim),
        }
    }

    pub fn tensors(&self) -> [&Matrix; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn forward(&self, x: &Matrix) -> Result<DenseCache> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(format!(
                "dense layer expects {} inputs, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        let mut y = Matrix::zeros(x.rows(), self.output_dim);
        matmul_acc(x.as_slice(), x.rows(), self.input_dim, &self.w, y.as_mut_slice());
        for row in 0..x.rows() {
            for (v, b) in y.row_mut(row).iter_mut().zip(self.b.as_slice()) {
                *v += b;
                if self.activation == Activation::Tanh {
                    *v = v.tanh();
                }
            }
        }
        Ok(DenseCache { x: x.clone(), y })
    }

    pub fn backward(&self, cache: &DenseCache, d_y: &Matrix, grads: &mut DenseLayer) -> Matrix {
        let d_pre = match self.activation {
            Activation::Identity => d_y.clone(),
            Activation::Tanh => {
                let mut d = d_y.clone();
                for (g, y) in d.as_mut_slice().iter_mut().zip(cache.y.as_slice()) {
                    *g *= 1.0 - y * y;
                }
                d
            }
        };
        let rows = cache.x.rows();
        matmul_tn_acc(cache.x.as_slice(), d_pre.as_slice(), rows, self.input_dim, self.output_dim, &mut grads.w);
        for row in d_pre.row_iter() {
            for (g, v) in grads.b.as_mut_slice().iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = Matrix::zeros(rows, self.input_dim);
        matmul_nt_acc(d_pre.as_slice(), rows, &self.w, dx.as_mut_slice());
        dx
    }
}

/// Stack of GRU layers mapping one modality into the embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub modality: Modality,
    pub input_dim: usize,
    pub layers: Vec<GruLayer>,
}

impl Encoder {
    pub fn new(modality: Modality, input_dim: usize, units: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::usage("an encoder needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(units.len());
        let mut width = input_dim;
        for &u in units {
            layers.push(GruLayer::new(width, u, rng));
            width = u;
        }
        Ok(Self { modality, input_dim, layers })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.hidden_dim)
    }

    fn zeros_like(&self) -> Self {
        Self {
            modality: self.modality,
            input_dim: self.input_dim,
            layers: self.layers.iter().map(|l| GruLayer::zeros(l.input_dim, l.hidden_dim)).collect(),
        }
    }

    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    fn validate(&self) -> Result<()> {
        let mut width = self.input_dim;
        for l in &self.layers {
            if l.input_dim != width {
                return Err(Error::shape("encoder layers are not chained"));
            }
            l.check_shapes()?;
            width = l.hidden_dim;
        }
        if self.layers.is_empty() {
            return Err(Error::usage("an encoder needs at least one layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadLayerKind {
    /// Recurrent shared layers.
    #[default]
    Gru,
    /// Frame-wise tanh dense layers.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadLayer {
    Gru(GruLayer),
    Dense(DenseLayer),
}

#[derive(Debug, Clone)]
enum HeadLayerCache {
    Gru(GruCache),
    Dense(DenseCache),
}

impl HeadLayer {
    fn output_dim(&self) -> usize {
        match self {
            HeadLayer::Gru(l) => l.hidden_dim,
            HeadLayer::Dense(l) => l.output_dim,
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            HeadLayer::Gru(l) => l.input_dim,
            HeadLayer::Dense(l) => l.input_dim,
        }
    }
}

/// Shared layers plus a linear output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedHead {
    pub input_dim: usize,
    pub layers: Vec<HeadLayer>,
    pub output: DenseLayer,
    pub task: Task,
}

#[derive(Debug, Clone)]
struct HeadCache {
    layers: Vec<HeadLayerCache>,
    output: DenseCache,
}

impl SharedHead {
    pub fn new(input_dim: usize, units: &[usize], kind: HeadLayerKind, task: Task, rng: &mut SeededRng) -> Self {
        let mut layers = Vec::with_capacity(units.len());
        let mut width = input_dim;
        for &u in units {
            layers.push(match kind {
                HeadLayerKind::Gru => HeadLayer::Gru(GruLayer::new(width, u, rng)),
                HeadLayerKind::Dense => HeadLayer::Dense(DenseLayer::new(width, u, Activation::Tanh, rng)),
            });
            width = u;
        }
        let output = DenseLayer::new(width, task.output_dim(), Activation::Identity, rng);
        Self { input_dim, layers, output, task }
    }

    fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    HeadLayer::Gru(g) => HeadLayer::Gru(GruLayer::zeros(g.input_dim, g.hidden_dim)),
                    HeadLayer::Dense(d) => HeadLayer::Dense(DenseLayer::zeros(d.input_dim, d.output_dim, d.activation)),
                })
                .collect(),
            output: DenseLayer::zeros(self.output.input_dim, self.output.output_dim, self.output.activation),
            task: self.task,
        }
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        for l in &self.layers {
            match l {
                HeadLayer::Gru(g) => out.extend(g.tensors()),
                HeadLayer::Dense(d) => out.extend(d.tensors()),
            }
        }
        out.extend(self.output.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for l in &mut self.layers {
            match l {
                HeadLayer::Gru(g) => out.extend(g.tensors_mut()),
                HeadLayer::Dense(d) => out.extend(d.tensors_mut()),
            }
        }
        out.extend(self.output.tensors_mut());
        out
    }

    fn validate(&self) -> Result<()> {
        let mut width = self.input_dim;
        for l in &self.layers {
            if l.input_dim() != width {
                return Err(Error::shape("head layers are not chained"));
            }
            if let HeadLayer::Gru(g) = l {
                g.check_shapes()?;
            }
            width = l.output_dim();
        }
        if self.output.input_dim != width || self.output.output_dim != self.task.output_dim() {
            return Err(Error::shape("head output layer does not match the task"));
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::usage("classification head needs at least 2 classes"));
            }
        }
        Ok(())
    }

    fn forward(&self, x: &Matrix) -> Result<HeadCache> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for l in &self.layers {
            match l {
                HeadLayer::Gru(g) => {
                    let c = g.forward(&current, &vec![0.0; g.hidden_dim])?;
                    current = c.outputs();
                    caches.push(HeadLayerCache::Gru(c));
                }
                HeadLayer::Dense(d) => {
                    let c = d.forward(&current)?;
                    current = c.y.clone();
                    caches.push(HeadLayerCache::Dense(c));
                }
            }
        }
        let output = self.output.forward(&current)?;
        Ok(HeadCache { layers: caches, output })
    }

    fn backward(&self, cache: &HeadCache, d_out: &Matrix, grads: &mut SharedHead) -> Matrix {
        let mut d = self.output.backward(&cache.output, d_out, &mut grads.output);
        for ((layer, c), g) in self.layers.iter().zip(&cache.layers).zip(&mut grads.layers).rev() {
            d = match (layer, c, g) {
                (HeadLayer::Gru(l), HeadLayerCache::Gru(c), HeadLayer::Gru(g)) => l.backward(c, &d, g),
                (HeadLayer::Dense(l), HeadLayerCache::Dense(c), HeadLayer::Dense(g)) => l.backward(c, &d, g),
                _ => unreachable!("gradient container mirrors the head"),
            };
        }
        d
    }
}

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Encoder(Modality),
    Head,
}

/// All learnable tensors. Also used as the gradient and optimizer-moment
/// container, mirroring the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub audio: Option<Encoder>,
    pub video: Option<Encoder>,
    pub head: SharedHead,
}

impl Params {
    pub fn encoder(&self, modality: Modality) -> Option<&Encoder> {
        match modality {
            Modality::Audio => self.audio.as_ref(),
            Modality::Video => self.video.as_ref(),
        }
    }

    fn encoder_mut(&mut self, modality: Modality) -> Option<&mut Encoder> {
        match modality {
            Modality::Audio => self.audio.as_mut(),
            Modality::Video => self.video.as_mut(),
        }
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            audio: self.audio.as_ref().map(Encoder::zeros_like),
            video: self.video.as_ref().map(Encoder::zeros_like),
            head: self.head.zeros_like(),
        }
    }

    /// Tensors of the listed parts, in a fixed order. Missing encoders are skipped.
    pub fn tensors(&self, parts: &[Part]) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for p in parts {
            match p {
                Part::Encoder(m) => {
                    if let Some(e) = self.encoder(*m) {
                        out.extend(e.tensors());
                    }
                }
                Part::Head => out.extend(self.head.tensors()),
            }
        }
        out
    }

    pub fn tensors_mut(&mut self, parts: &[Part]) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        let Params { audio, video, head } = self;
        let (mut a, mut v, mut h) = (audio.as_mut(), video.as_mut(), Some(head));
        for p in parts {
            match p {
                Part::Encoder(Modality::Audio) => {
                    if let Some(e) = a.take() {
                        out.extend(e.tensors_mut());
                    }
                }
                Part::Encoder(Modality::Video) => {
                    if let Some(e) = v.take() {
                        out.extend(e.tensors_mut());
                    }
                }
                Part::Head => {
                    if let Some(hd) = h.take() {
                        out.extend(hd.tensors_mut());
                    }
                }
            }
        }
        out
    }

    pub fn flatten(&self, parts: &[Part]) -> Vec<f64> {
        self.tensors(parts).iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, parts: &[Part], values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for t in self.tensors_mut(parts) {
            let n = t.as_slice().len();
            let chunk = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::shape("flat parameter vector is too short"))?;
            t.as_mut_slice().copy_from_slice(chunk);
            offset += n;
        }
        if offset != values.len() {
            return Err(Error::shape("flat parameter vector is too long"));
        }
        Ok(())
    }

    pub fn sum_squares(&self, parts: &[Part]) -> f64 {
        self.tensors(parts).iter().map(|t| t.sum_squares()).sum()
    }

    pub fn len(&self, parts: &[Part]) -> usize {
        self.tensors(parts).iter().map(|t| t.as_slice().len()).sum()
    }
}

/// Per-feature training-set statistics used to standardise inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!(
                "standardizer has {} features, input has {}",
                self.dim(),
                x.cols()
            )));
        }
        let inv_std: Vec<f64> = self.var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        Ok(out)
    }
}

/// Layer sizes and task of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub video_dim: usize,
    /// Hidden sizes of each encoder's GRU stack; the last entry is the
    /// embedding width.
    pub encoder_units: Vec<usize>,
    pub head_units: Vec<usize>,
    #[serde(default)]
    pub head_layer: HeadLayerKind,
    pub task: Task,
}

impl ModelConfig {
    /// Two encoder and two shared GRU layers of 120 units.
    pub fn continuous_default(audio_dim: usize, video_dim: usize, task: Task) -> Self {
        Self {
            audio_dim,
            video_dim,
            encoder_units: vec![120, 120],
            head_units: vec![120, 120],
            head_layer: HeadLayerKind::Gru,
            task,
        }
    }

    /// One encoder and one shared GRU layer of 120 units.
    pub fn categorical_default(audio_dim: usize, video_dim: usize, classes: usize) -> Self {
        Self {
            audio_dim,
            video_dim,
            encoder_units: vec![120],
            head_units: vec![120],
            head_layer: HeadLayerKind::Gru,
            task: Task::Classification { classes },
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder_units.last().copied().unwrap_or(0)
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Audio => self.audio_dim,
            Modality::Video => self.video_dim,
        }
    }
}

/// Forward activations of one sequence through an encoder and, optionally,
/// the shared head.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub modality: Modality,
    encoder: Vec<GruCache>,
    /// Frame-level embeddings, `T × E`.
    pub embeddings: Matrix,
    /// What the head consumes: the frame embeddings for regression, their
    /// mean (`1 × E`) for classification.
    pub head_input: Matrix,
    head: Option<HeadCache>,
}

impl ForwardPass {
    /// Raw head outputs: one value per frame (regression) or one row of
    /// logits (classification). `None` when the head was skipped.
    pub fn outputs(&self) -> Option<&Matrix> {
        self.head.as_ref().map(|h| &h.output.y)
    }
}

/// Predictions for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// One value per frame.
    Regression(Vec<f64>),
    /// Class probabilities for the pooled sequence.
    Classification(Vec<f64>),
}

/// Encoders, shared head and input statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: Params,
    pub audio_stats: Standardizer,
    pub video_stats: Standardizer,
}

pub const CHECKPOINT_FORMAT: &str = "emobed-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: TrainedModel,
}

impl TrainedModel {
    /// Initialises audio encoder, video encoder, then head from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.encoder_units.is_empty() {
            return Err(Error::usage("encoder_units must not be empty"));
        }
        if config.audio_dim == 0 || config.video_dim == 0 || config.encoder_units.contains(&0) || config.head_units.contains(&0) {
            return Err(Error::usage("layer widths must be positive"));
        }
        if let Task::Classification { classes } = config.task {
            if classes < 2 {
                return Err(Error::usage("classification needs at least 2 classes"));
            }
        }
        let mut rng = SeededRng::new(seed);
        let audio = Encoder::new(Modality::Audio, config.audio_dim, &config.encoder_units, &mut rng)?;
        let video = Encoder::new(Modality::Video, config.video_dim, &config.encoder_units, &mut rng)?;
        let head = SharedHead::new(config.embedding_dim(), &config.head_units, config.head_layer, config.task, &mut rng);
        Ok(Self {
            audio_stats: Standardizer::identity(config.audio_dim),
            video_stats: Standardizer::identity(config.video_dim),
            params: Params { audio: Some(audio), video: Some(video), head },
            config,
        })
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn stats(&self, modality: Modality) -> &Standardizer {
        match modality {
            Modality::Audio => &self.audio_stats,
            Modality::Video => &self.video_stats,
        }
    }

    pub fn set_stats(&mut self, modality: Modality, stats: Standardizer) -> Result<()> {
        if stats.dim() != self.config.input_dim(modality) {
            return Err(Error::shape(format!(
                "{modality} statistics have {} features, model expects {}",
                stats.dim(),
                self.config.input_dim(modality)
            )));
        }
        if stats.var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::usage("standardization variances must be positive"));
        }
        match modality {
            Modality::Audio => self.audio_stats = stats,
            Modality::Video => self.video_stats = stats,
        }
        Ok(())
    }

    /// Drops the encoder of the modality that is not `target`.
    pub fn discard_auxiliary(&mut self, target: Modality) {
        match target {
            Modality::Audio => self.params.video = None,
            Modality::Video => self.params.audio = None,
        }
    }

    fn encoder(&self, modality: Modality) -> Result<&Encoder> {
        self.params
            .encoder(modality)
            .ok_or_else(|| Error::usage(format!("model has no {modality} encoder")))
    }

    pub fn standardize(&self, modality: Modality, sequence: &Matrix) -> Result<Matrix> {
        self.stats(modality).apply(sequence)
    }

    /// Forward pass on already-standardised input.
    pub fn forward(&self, modality: Modality, standardized: &Matrix, with_head: bool) -> Result<ForwardPass> {
        let encoder = self.encoder(modality)?;
        if standardized.cols() != encoder.input_dim {
            return Err(Error::shape(format!(
                "{modality} encoder expects {} features, got {}",
                encoder.input_dim,
                standardized.cols()
            )));
        }
        if standardized.rows() == 0 {
            return Err(Error::degenerate("empty sequence"));
        }
        let mut caches = Vec::with_capacity(encoder.layers.len());
        let mut current = standardized.clone();
        for layer in &encoder.layers {
            let c = layer.forward(&current, &vec![0.0; layer.hidden_dim])?;
            current = c.outputs();
            caches.push(c);
        }
        let head_input = self.head_input(&current);
        let head = if with_head {
            Some(self.params.head.forward(&head_input)?)
        } else {
            None
        };
        Ok(ForwardPass { modality, encoder: caches, embeddings: current, head_input, head })
    }

    fn head_input(&self, embeddings: &Matrix) -> Matrix {
        match self.task() {
            Task::Regression { .. } => embeddings.clone(),
            Task::Classification { .. } => Matrix::row_vector(&embeddings.col_means()),
        }
    }

    /// Backpropagates through a cached pass.
    ///
    /// `d_outputs` is the loss gradient w.r.t. the head outputs (required
    /// if the head ran); `d_head_input` is an extra gradient w.r.t.
    /// `pass.head_input`, e.g. from the triplet loss.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_outputs: Option<&Matrix>,
        d_head_input: Option<&Matrix>,
        grads: &mut Params,
    ) -> Result<()> {
        let mut d_in = Matrix::zeros(pass.head_input.rows(), pass.head_input.cols());
        if let Some(d_out) = d_outputs {
            let cache = pass
                .head
                .as_ref()
                .ok_or_else(|| Error::State("head gradient given but the head was not run".into()))?;
            if d_out.shape() != cache.output.y.shape() {
                return Err(Error::shape("output gradient does not match head outputs"));
            }
            d_in = self.params.head.backward(cache, d_out, &mut grads.head);
        }
        if let Some(extra) = d_head_input {
            if extra.shape() != d_in.shape() {
                return Err(Error::shape("embedding gradient does not match head input"));
            }
            d_in.add_scaled(extra, 1.0);
        }
        let t_len = pass.embeddings.rows();
        let mut d = match self.task() {
            Task::Regression { .. } => d_in,
            Task::Classification { .. } => {
                let mut d = Matrix::zeros(t_len, pass.embeddings.cols());
                let scale = 1.0 / t_len as f64;
                for r in 0..t_len {
                    for (o, g) in d.row_mut(r).iter_mut().zip(d_in.row(0)) {
                        *o = g * scale;
                    }
                }
                d
            }
        };
        let encoder = self.encoder(pass.modality)?;
        let genc = grads
            .encoder_mut(pass.modality)
            .ok_or_else(|| Error::usage(format!("gradient container has no {} encoder", pass.modality)))?;
        for ((layer, cache), g) in encoder.layers.iter().zip(&pass.encoder).zip(&mut genc.layers).rev() {
            d = layer.backward(cache, &d, g);
        }
        Ok(())
    }

    /// Embeddings (`T × E`) of a raw, unstandardised sequence.
    pub fn encode(&self, modality: Modality, sequence: &Matrix) -> Result<Matrix> {
        let x = self.standardize(modality, sequence)?;
        Ok(self.forward(modality, &x, false)?.embeddings)
    }

    /// Head predictions from frame embeddings (`T × E`).
    pub fn predict(&self, embeddings: &Matrix, task: Task) -> Result<Predictions> {
        if task != self.task() {
            return Err(Error::usage(format!(
                "model was built for {:?}, asked for {:?}",
                self.task(),
                task
            )));
        }
        if embeddings.cols() != self.embedding_dim() {
            return Err(Error::shape(format!(
                "embeddings have width {}, expected {}",
                embeddings.cols(),
                self.embedding_dim()
            )));
        }
        if embeddings.rows() == 0 {
            return Err(Error::degenerate("no embeddings to predict from"));
        }
        let cache = self.params.head.forward(&self.head_input(embeddings))?;
        Ok(outputs_to_predictions(task, &cache.output.y))
    }

    /// Encode then predict a raw sequence.
    pub fn infer(&self, modality: Modality, sequence: &Matrix) -> Result<Predictions> {
        let x = self.standardize(modality, sequence)?;
        let pass = self.forward(modality, &x, true)?;
        Ok(outputs_to_predictions(self.task(), pass.outputs().expect("head ran")))
    }

    pub fn validate(&self) -> Result<()> {
        for m in [Modality::Audio, Modality::Video] {
            if let Some(e) = self.params.encoder(m) {
                e.validate()?;
                if e.modality != m || e.input_dim != self.config.input_dim(m) {
                    return Err(Error::shape(format!("{m} encoder does not match the config")));
                }
                if e.output_dim() != self.embedding_dim() {
                    return Err(Error::shape(format!("{m} encoder does not output the embedding width")));
                }
            }
            let s = self.stats(m);
            if s.dim() != self.config.input_dim(m) || s.var.iter().any(|v| !(*v > 0.0)) || s.var.len() != s.mean.len() {
                return Err(Error::usage(format!("invalid {m} standardization statistics")));
            }
        }
        self.params.head.validate()?;
        if self.params.head.input_dim != self.embedding_dim() || self.params.head.task != self.task() {
            return Err(Error::shape("head does not match the config"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::usage(format!("not a checkpoint: format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::usage(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        ckpt.model.validate()?;
        Ok(ckpt.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Single-slot cache of a forward pass; `backward` consumes it.
#[derive(Debug, Default)]
pub struct Tape {
    pass: Option<ForwardPass>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        model: &TrainedModel,
        modality: Modality,
        standardized: &Matrix,
        with_head: bool,
    ) -> Result<&ForwardPass> {
        Ok(self.pass.insert(model.forward(modality, standardized, with_head)?))
    }

    pub fn backward(
        &mut self,
        model: &TrainedModel,
        d_outputs: Option<&Matrix>,
        d_head_input: Option<&Matrix>,
        grads: &mut Params,
    ) -> Result<()> {
        let pass = self
            .pass
            .take()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        model.backward(&pass, d_outputs, d_head_input, grads)
    }
}

fn outputs_to_predictions(task: Task, y: &Matrix) -> Predictions {
    match task {
        Task::Regression { .. } => Predictions::Regression(y.as_slice().to_vec()),
        Task::Classification { .. } => Predictions::Classification(softmax(y.row(0))),
    }
}
