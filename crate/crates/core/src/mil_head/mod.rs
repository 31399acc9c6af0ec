//! Two-branch MIL scorer: a rectified two-layer trunk feeding a
//! classification head (softmax over classes) and an instance head
//! (softmax over the proposals of a bag).

mod backprop;
pub mod gradcheck;
mod loss;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::ProposalBag;
use crate::error::{Error, Result};

pub use backprop::{
    combined_loss, prm_loss_and_grads, psm_loss_and_grads, LossBreakdown, PrmBatch, PrmObject,
    PsmBatch, PsmObject,
};
pub use loss::{
    bce, focal_loss, loss_neg, loss_pos, loss_prm, loss_psm, EPS,
};
pub use train::{sgd_train, TrainOutcome};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }
}

/// Affine map `y = W x + b`, `W` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            inputs,
            outputs,
            weight: draw(inputs * outputs),
            bias: draw(outputs),
        }
    }

    fn forward(&self, x: &Mat) -> Mat {
        debug_assert_eq!(x.cols, self.inputs);
        let mut y = Mat::zeros(x.rows, self.outputs);
        for r in 0..x.rows {
            let xr = x.row(r);
            for o in 0..self.outputs {
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                *y.at_mut(r, o) = self.bias[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        y
    }
}

/// Parameters of one MIL head. The same struct doubles as the gradient record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilHeadParams {
    pub fc1: Affine,
    pub fc2: Affine,
    pub cls: Affine,
    pub ins: Affine,
}

const LAYER_NAMES: [&str; 4] = ["fc1", "fc2", "cls", "ins"];

impl MilHeadParams {
    pub fn new(feature_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            fc1: Affine::init(feature_dim, hidden, &mut rng),
            fc2: Affine::init(hidden, hidden, &mut rng),
            cls: Affine::init(hidden, num_classes, &mut rng),
            ins: Affine::init(hidden, num_classes, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: Affine::zeros(self.fc1.inputs, self.fc1.outputs),
            fc2: Affine::zeros(self.fc2.inputs, self.fc2.outputs),
            cls: Affine::zeros(self.cls.inputs, self.cls.outputs),
            ins: Affine::zeros(self.ins.inputs, self.ins.outputs),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc1.inputs
    }

    pub fn num_classes(&self) -> usize {
        self.cls.outputs
    }

    fn layers(&self) -> [&Affine; 4] {
        [&self.fc1, &self.fc2, &self.cls, &self.ins]
    }

    fn layers_mut(&mut self) -> [&mut Affine; 4] {
        [&mut self.fc1, &mut self.fc2, &mut self.cls, &mut self.ins]
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers().iter().enumerate() {
            if index < l.weight.len() {
                return (li, true, index);
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return (li, false, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access, in `fc1.w, fc1.b, fc2.w, ..., ins.b` order.
    pub fn get(&self, index: usize) -> f64 {
        let (li, is_weight, i) = self.locate(index);
        let l = self.layers()[li];
        if is_weight {
            l.weight[i]
        } else {
            l.bias[i]
        }
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let (li, is_weight, i) = self.locate(index);
        let l = &mut self.layers_mut()[li];
        if is_weight {
            l.weight[i] = value;
        } else {
            l.bias[i] = value;
        }
    }

    /// Human-readable coordinate name, e.g. `fc2.weight[3,7]`.
    pub fn coordinate_name(&self, index: usize) -> String {
        let (li, is_weight, i) = self.locate(index);
        let l = self.layers()[li];
        if is_weight {
            format!("{}.weight[{},{}]", LAYER_NAMES[li], i / l.inputs, i % l.inputs)
        } else {
            format!("{}.bias[{}]", LAYER_NAMES[li], i)
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers()
            .into_iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MilHeadParams, scale: f64) {
        for (dst, src) in self.layers_mut().into_iter().zip(other.layers()) {
            for (a, b) in dst.weight.iter_mut().zip(&src.weight) {
                *a += scale * b;
            }
            for (a, b) in dst.bias.iter_mut().zip(&src.bias) {
                *a += scale * b;
            }
        }
    }

    /// Errors with the first non-finite coordinate.
    pub fn check_finite(&self) -> Result<()> {
        match self.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFiniteGradient(self.coordinate_name(i))),
            None => Ok(()),
        }
    }
}

pub(crate) struct TrunkCache {
    pub x: Mat,
    pub z1: Mat,
    pub a1: Mat,
    pub z2: Mat,
    pub a2: Mat,
}

fn relu(z: &Mat) -> Mat {
    Mat {
        rows: z.rows,
        cols: z.cols,
        data: z.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

impl MilHeadParams {
    pub(crate) fn trunk(&self, x: &Mat) -> TrunkCache {
        let z1 = self.fc1.forward(x);
        let a1 = relu(&z1);
        let z2 = self.fc2.forward(&a1);
        let a2 = relu(&z2);
        TrunkCache {
            x: x.clone(),
            z1,
            a1,
            z2,
            a2,
        }
    }
}

/// Softmax along each row, with max subtraction.
pub fn softmax_rows(z: &Mat) -> Mat {
    let mut out = z.clone();
    for r in 0..z.rows {
        let row = &mut out.data[r * z.cols..(r + 1) * z.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Softmax along each column, with max subtraction.
pub fn softmax_cols(z: &Mat) -> Mat {
    let mut out = z.clone();
    for c in 0..z.cols {
        let max = (0..z.rows).map(|r| z.at(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in 0..z.rows {
            let e = (z.at(r, c) - max).exp();
            *out.at_mut(r, c) = e;
            sum += e;
        }
        for r in 0..z.rows {
            *out.at_mut(r, c) /= sum;
        }
    }
    out
}

/// Per-proposal and per-bag scores of one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    /// `M × K`, rows sum to 1.
    pub s_cls: Mat,
    /// `M × K`, columns sum to 1.
    pub s_ins: Mat,
    pub s_dis: Vec<f64>,
    /// `s_cls ⊙ s_ins ⊙ s_dis`.
    pub s: Mat,
    /// Column sums of `s`.
    pub bag: Vec<f64>,
}

impl ScoreTensor {
    pub(crate) fn from_logits(w_cls: &Mat, w_ins: &Mat, s_dis: &[f64]) -> Self {
        let s_cls = softmax_rows(w_cls);
        let s_ins = softmax_cols(w_ins);
        let (m, k) = (s_cls.rows, s_cls.cols);
        let mut s = Mat::zeros(m, k);
        let mut bag = vec![0.0; k];
        for r in 0..m {
            for c in 0..k {
                let v = s_cls.at(r, c) * s_ins.at(r, c) * s_dis[r];
                *s.at_mut(r, c) = v;
                bag[c] += v;
            }
        }
        Self {
            s_cls,
            s_ins,
            s_dis: s_dis.to_vec(),
            s,
            bag,
        }
    }

    pub fn num_proposals(&self) -> usize {
        self.s.rows
    }

    /// Fused scores of one class column.
    pub fn class_scores(&self, class_id: usize) -> Vec<f64> {
        self.s.column(class_id)
    }
}

/// Scores an `M × D` feature matrix.
pub fn forward_features(params: &MilHeadParams, x: &Mat, s_dis: &[f64]) -> Result<ScoreTensor> {
    if x.cols != params.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs head input {}",
            x.cols,
            params.feature_dim()
        )));
    }
    if s_dis.len() != x.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} distance scores for {} proposals",
            s_dis.len(),
            x.rows
        )));
    }
    if x.rows == 0 {
        return Err(Error::EmptyBag);
    }
    let t = params.trunk(x);
    Ok(ScoreTensor::from_logits(
        &params.cls.forward(&t.a2),
        &params.ins.forward(&t.a2),
        s_dis,
    ))
}

pub fn forward_scores(params: &MilHeadParams, bag: &ProposalBag, s_dis: &[f64]) -> Result<ScoreTensor> {
    let rows: Vec<Vec<f64>> = bag.proposals.iter().map(|p| p.feature.clone()).collect();
    if rows.iter().any(|r| r.len() != params.feature_dim()) {
        return Err(Error::ShapeMismatch("ragged or mismatched features".into()));
    }
    forward_features(params, &Mat::from_rows(&rows), s_dis)
}

/// Classification-branch scores only (used for negatives).
pub fn classify(params: &MilHeadParams, x: &Mat) -> Mat {
    let t = params.trunk(x);
    softmax_rows(&params.cls.forward(&t.a2))
}
