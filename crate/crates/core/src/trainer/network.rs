//! Affine / batch-standardization / rectifier networks with hand-written
//! reverse-mode gradients.
//!
//! Tensors are `batch x features` matrices. Views enter as flattened
//! `side x side x 3` rasters scaled to `[0, 1]`; the backbone first
//! average-pools them onto a fixed grid so that global and local views of
//! different sizes share one set of backbone weights.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub type Tensor = Array2<f64>;

pub const BATCH_STD_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const RUNNING_MOMENTUM: f64 = 0.1;

/// Which of the three loss branches a predictor serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Global,
    Intra,
    Inter,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Global, Branch::Intra, Branch::Inter];

    pub fn index(self) -> usize {
        match self {
            Branch::Global => 0,
            Branch::Intra => 1,
            Branch::Inter => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Intra => "intra",
            Branch::Inter => "inter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Side of the pooling grid in front of the backbone.
    pub grid: usize,
    pub backbone_widths: Vec<usize>,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            grid: 16,
            backbone_widths: vec![128, 64],
            proj_hidden: 64,
            proj_out: 16,
            pred_hidden: 64,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grid >= 1
            && !self.backbone_widths.is_empty()
            && self.backbone_widths.iter().all(|&w| w >= 1)
            && self.proj_hidden >= 1
            && self.proj_out >= 1
            && self.pred_hidden >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("architecture {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init(inputs: usize, outputs: usize, rng: &mut Stream) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weight = Array2::from_shape_simple_fn((outputs, inputs), &mut draw);
        let bias = Array1::from_shape_simple_fn(outputs, draw);
        Self { weight, bias }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad`, returns `dL/dx`.
    fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Tensor {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

/// Per-feature standardization by batch mean and batch standard deviation
/// (plus `BATCH_STD_EPS`), followed by a learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStd {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchStdCache {
    centered: Tensor,
    mean: Array1<f64>,
    sigma: Array1<f64>,
    xhat: Tensor,
}

impl BatchStd {
    fn new(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_std: Array1::ones(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            scale: Array1::zeros(dim),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_std: Array1::zeros(dim),
        }
    }

    fn forward_train(&self, x: &Tensor) -> (Tensor, BatchStdCache) {
        let b = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / b;
        let centered = x - &mean;
        let sigma = (centered.mapv(|v| v * v).sum_axis(Axis(0)) / b).mapv(f64::sqrt);
        let denom = sigma.mapv(|s| s + BATCH_STD_EPS);
        let xhat = &centered / &denom;
        let y = &xhat * &self.scale + &self.shift;
        (
            y,
            BatchStdCache {
                centered,
                mean,
                sigma,
                xhat,
            },
        )
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let denom = self.running_std.mapv(|s| s + BATCH_STD_EPS);
        (x - &self.running_mean) / &denom * &self.scale + &self.shift
    }

    fn backward(&self, cache: &BatchStdCache, dy: &Tensor, grad: &mut BatchStd) -> Tensor {
        let b = dy.nrows() as f64;
        grad.scale += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.scale;
        let denom = cache.sigma.mapv(|s| s + BATCH_STD_EPS);
        // xhat = c / (sigma(c) + eps), sigma = sqrt(mean(c^2))
        let dsigma = -(&dxhat * &cache.centered).sum_axis(Axis(0)) / denom.mapv(|d| d * d);
        let sigma_coeff = ndarray::Zip::from(&dsigma)
            .and(&cache.sigma)
            .map_collect(|&ds, &s| if s > 0.0 { ds / (b * s) } else { 0.0 });
        let dc = &dxhat / &denom + &cache.centered * &sigma_coeff;
        let mean_dc = dc.sum_axis(Axis(0)) / b;
        dc - &mean_dc
    }

    fn update_running(&mut self, cache: &BatchStdCache) {
        let m = RUNNING_MOMENTUM;
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.mean * m;
        self.running_std = &self.running_std * (1.0 - m) + &cache.sigma * m;
    }
}

fn relu(x: &Tensor) -> Tensor {
    x.mapv(|v| v.max(0.0))
}

fn relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    ndarray::Zip::from(pre)
        .and(dy)
        .map_collect(|&p, &d| if p > 0.0 { d } else { 0.0 })
}

/// affine -> batch-standardization -> rectifier -> affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub norm: BatchStd,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Tensor,
    norm: BatchStdCache,
    pre_relu: Tensor,
    hidden: Tensor,
}

impl Mlp {
    fn init(inputs: usize, hidden: usize, outputs: usize, rng: &mut Stream) -> Self {
        Self {
            fc1: Linear::init(inputs, hidden, rng),
            norm: BatchStd::new(hidden),
            fc2: Linear::init(hidden, outputs, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            fc1: Linear::zeros(self.fc1.in_dim(), self.fc1.out_dim()),
            norm: BatchStd::zeros(self.fc1.out_dim()),
            fc2: Linear::zeros(self.fc2.in_dim(), self.fc2.out_dim()),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    fn forward_train(&self, x: &Tensor) -> (Tensor, MlpCache) {
        let h = self.fc1.forward(x);
        let (pre_relu, norm) = self.norm.forward_train(&h);
        let hidden = relu(&pre_relu);
        let y = self.fc2.forward(&hidden);
        (
            y,
            MlpCache {
                x: x.clone(),
                norm,
                pre_relu,
                hidden,
            },
        )
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let h = self.norm.forward_eval(&self.fc1.forward(x));
        self.fc2.forward(&relu(&h))
    }

    fn backward(&self, cache: &MlpCache, dy: &Tensor, grad: &mut Mlp) -> Tensor {
        let dhidden = self.fc2.backward(&cache.hidden, dy, &mut grad.fc2);
        let dpre = relu_backward(&cache.pre_relu, &dhidden);
        let dh = self.norm.backward(&cache.norm, &dpre, &mut grad.norm);
        self.fc1.backward(&cache.x, &dh, &mut grad.fc1)
    }
}

/// Average pooling of flattened `side x side x 3` rows onto `grid x grid x 3`.
pub fn pool_to_grid(x: &Tensor, grid: usize) -> Result<Tensor> {
    let side = ((x.ncols() / 3) as f64).sqrt().round() as usize;
    if side == 0 || side * side * 3 != x.ncols() {
        return Err(Error::Shape(format!("{} columns is not a square RGB view", x.ncols())));
    }
    if side == grid {
        return Ok(x.clone());
    }
    let span = |i: usize| (i * side / grid, ((i + 1) * side).div_ceil(grid));
    let mut out = Tensor::zeros((x.nrows(), grid * grid * 3));
    for (row, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        for gy in 0..grid {
            let (y0, y1) = span(gy);
            for gx in 0..grid {
                let (x0, x1) = span(gx);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += row[(y * side + xx) * 3 + c];
                        }
                    }
                    dst[(gy * grid + gx) * 3 + c] = acc / n;
                }
            }
        }
    }
    Ok(out)
}

/// Pooling grid followed by affine layers with rectifiers between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub grid: usize,
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Input of every layer (pooled view for the first).
    inputs: Vec<Tensor>,
    /// Pre-rectifier outputs of all but the last layer.
    pre: Vec<Tensor>,
}

impl Backbone {
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let mut h = pool_to_grid(x, self.grid)?;
        let mut cache = BackboneCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            cache.inputs.push(h);
            if i + 1 < self.layers.len() {
                h = relu(&z);
                cache.pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, cache))
    }

    fn backward(&self, cache: &BackboneCache, dy: &Tensor, grad: &mut Backbone) {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d = relu_backward(&cache.pre[i], &d);
            }
            let dx = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
            d = dx;
        }
    }
}

/// Backbone, projector and (online side only) one predictor per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub backbone: Backbone,
    pub projector: Mlp,
    /// Indexed by `Branch::index`; empty for a target network.
    pub predictors: Vec<Mlp>,
}

/// Cached activations of one online forward pass.
#[derive(Debug, Clone)]
pub struct OnlineCache {
    pub branch: Branch,
    backbone: BackboneCache,
    projector: MlpCache,
    predictor: MlpCache,
}

impl NetworkParams {
    pub fn init(arch: &Architecture, rng: &mut Stream) -> Result<Self> {
        arch.validate()?;
        let mut inputs = arch.grid * arch.grid * 3;
        let mut layers = Vec::new();
        for &w in &arch.backbone_widths {
            layers.push(Linear::init(inputs, w, rng));
            inputs = w;
        }
        let projector = Mlp::init(inputs, arch.proj_hidden, arch.proj_out, rng);
        let predictors = Branch::ALL
            .iter()
            .map(|_| Mlp::init(arch.proj_out, arch.pred_hidden, arch.proj_out, rng))
            .collect();
        Ok(Self {
            backbone: Backbone {
                grid: arch.grid,
                layers,
            },
            projector,
            predictors,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            grid: self.backbone.grid,
            backbone_widths: self.backbone.layers.iter().map(Linear::out_dim).collect(),
            proj_hidden: self.projector.fc1.out_dim(),
            proj_out: self.projector.output_dim(),
            pred_hidden: self.predictors.first().map_or(0, |p| p.fc1.out_dim()),
        }
    }

    /// The backbone and projector only.
    pub fn target_copy(&self) -> NetworkParams {
        NetworkParams {
            backbone: self.backbone.clone(),
            projector: self.projector.clone(),
            predictors: Vec::new(),
        }
    }

    pub fn zeros_like(&self) -> NetworkParams {
        NetworkParams {
            backbone: Backbone {
                grid: self.backbone.grid,
                layers: self
                    .backbone
                    .layers
                    .iter()
                    .map(|l| Linear::zeros(l.in_dim(), l.out_dim()))
                    .collect(),
            },
            projector: self.projector.zeros_like(),
            predictors: self.predictors.iter().map(Mlp::zeros_like).collect(),
        }
    }

    fn predictor(&self, branch: Branch) -> Result<&Mlp> {
        self.predictors
            .get(branch.index())
            .ok_or_else(|| Error::Shape("network has no predictors".into()))
    }

    /// Online path with batch statistics: backbone, projector, predictor.
    pub fn forward_online(&self, x: &Tensor, branch: Branch) -> Result<(Tensor, OnlineCache)> {
        let (feat, backbone) = self.backbone.forward(x)?;
        let (proj, projector) = self.projector.forward_train(&feat);
        let (out, predictor) = self.predictor(branch)?.forward_train(&proj);
        Ok((
            out,
            OnlineCache {
                branch,
                backbone,
                projector,
                predictor,
            },
        ))
    }

    /// Target path with batch statistics: backbone and projector.
    pub fn forward_target(&self, x: &Tensor) -> Result<Tensor> {
        let (feat, _) = self.backbone.forward(x)?;
        Ok(self.projector.forward_train(&feat).0)
    }

    /// Backpropagates `dy` (gradient w.r.t. the predictor output) and
    /// accumulates into `grad`.
    pub fn backward_online(&self, cache: &OnlineCache, dy: &Tensor, grad: &mut NetworkParams) -> Result<()> {
        let b = cache.branch.index();
        let dproj = self.predictors[b].backward(&cache.predictor, dy, &mut grad.predictors[b]);
        let dfeat = self.projector.backward(&cache.projector, &dproj, &mut grad.projector);
        self.backbone.backward(&cache.backbone, &dfeat, &mut grad.backbone);
        Ok(())
    }

    /// Folds the batch statistics of an online pass into the running
    /// statistics used for inference.
    pub fn update_running_stats(&mut self, cache: &OnlineCache) {
        self.projector.norm.update_running(&cache.projector.norm);
        self.predictors[cache.branch.index()]
            .norm
            .update_running(&cache.predictor.norm);
    }

    pub fn backbone_features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.backbone.forward(x)?.0)
    }

    /// Inference with running statistics: projector output, or predictor
    /// output of `branch` when `with_predictor` is set.
    pub fn infer(&self, x: &Tensor, branch: Branch, with_predictor: bool) -> Result<Tensor> {
        let proj = self.projector.forward_eval(&self.backbone_features(x)?);
        if with_predictor {
            Ok(self.predictor(branch)?.forward_eval(&proj))
        } else {
            Ok(proj)
        }
    }

    /// Trainable tensors in a fixed order: backbone, projector, then
    /// predictors. A target network yields a prefix of its online twin's list.
    pub fn trainable(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.walk(&mut |name, t, trainable| {
            if trainable {
                out.push((name, t));
            }
        });
        out.into_iter()
            .map(|(n, t)| (n, t.as_slice().expect("standard layout")))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.walk_mut(&mut |name, t, trainable| {
            if trainable {
                out.push((name, t));
            }
        });
        out
    }

    /// All tensors, including running statistics, with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        self.walk(&mut |name, t, _| out.push((name, t)));
        out.into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.as_slice().expect("standard layout")))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        let mut shapes = Vec::new();
        self.walk(&mut |_, t, _| shapes.push(t.shape().to_vec()));
        let mut out = Vec::new();
        self.walk_mut(&mut |name, t, _| out.push((name, t)));
        out.into_iter()
            .zip(shapes)
            .map(|((n, t), s)| (n, s, t))
            .collect()
    }

    fn walk<'a>(&'a self, f: &mut dyn FnMut(String, ArrayRef<'a>, bool)) {
        for (i, l) in self.backbone.layers.iter().enumerate() {
            f(format!("backbone.{i}.weight"), ArrayRef::Two(&l.weight), true);
            f(format!("backbone.{i}.bias"), ArrayRef::One(&l.bias), true);
        }
        walk_mlp("projector", &self.projector, f);
        for (p, b) in self.predictors.iter().zip(Branch::ALL) {
            walk_mlp(&format!("predictor.{}", b.name()), p, f);
        }
    }

    fn walk_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut [f64], bool)) {
        for (i, l) in self.backbone.layers.iter_mut().enumerate() {
            f(format!("backbone.{i}.weight"), s2(&mut l.weight), true);
            f(format!("backbone.{i}.bias"), s1(&mut l.bias), true);
        }
        walk_mlp_mut("projector", &mut self.projector, f);
        for (p, b) in self.predictors.iter_mut().zip(Branch::ALL) {
            walk_mlp_mut(&format!("predictor.{}", b.name()), p, f);
        }
    }
}

#[derive(Clone, Copy)]
enum ArrayRef<'a> {
    One(&'a Array1<f64>),
    Two(&'a Array2<f64>),
}

impl<'a> ArrayRef<'a> {
    fn shape(&self) -> &[usize] {
        match self {
            ArrayRef::One(a) => a.shape(),
            ArrayRef::Two(a) => a.shape(),
        }
    }

    fn as_slice(&self) -> Option<&'a [f64]> {
        match *self {
            ArrayRef::One(a) => a.as_slice(),
            ArrayRef::Two(a) => a.as_slice(),
        }
    }
}

fn s2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn s1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn walk_mlp<'a>(prefix: &str, m: &'a Mlp, f: &mut dyn FnMut(String, ArrayRef<'a>, bool)) {
    f(format!("{prefix}.fc1.weight"), ArrayRef::Two(&m.fc1.weight), true);
    f(format!("{prefix}.fc1.bias"), ArrayRef::One(&m.fc1.bias), true);
    f(format!("{prefix}.norm.scale"), ArrayRef::One(&m.norm.scale), true);
    f(format!("{prefix}.norm.shift"), ArrayRef::One(&m.norm.shift), true);
    f(format!("{prefix}.norm.running_mean"), ArrayRef::One(&m.norm.running_mean), false);
    f(format!("{prefix}.norm.running_std"), ArrayRef::One(&m.norm.running_std), false);
    f(format!("{prefix}.fc2.weight"), ArrayRef::Two(&m.fc2.weight), true);
    f(format!("{prefix}.fc2.bias"), ArrayRef::One(&m.fc2.bias), true);
}

fn walk_mlp_mut<'a>(prefix: &str, m: &'a mut Mlp, f: &mut dyn FnMut(String, &'a mut [f64], bool)) {
    f(format!("{prefix}.fc1.weight"), s2(&mut m.fc1.weight), true);
    f(format!("{prefix}.fc1.bias"), s1(&mut m.fc1.bias), true);
    f(format!("{prefix}.norm.scale"), s1(&mut m.norm.scale), true);
    f(format!("{prefix}.norm.shift"), s1(&mut m.norm.shift), true);
    f(format!("{prefix}.norm.running_mean"), s1(&mut m.norm.running_mean), false);
    f(format!("{prefix}.norm.running_std"), s1(&mut m.norm.running_std), false);
    f(format!("{prefix}.fc2.weight"), s2(&mut m.fc2.weight), true);
    f(format!("{prefix}.fc2.bias"), s1(&mut m.fc2.bias), true);
}
