//! Pairwise prediction loss, the weighted three-branch total and its
//! gradient.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::network::{Branch, NetworkParams, OnlineCache, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Global views only.
    Byol,
    /// Global, intra-RoI and inter-RoI views.
    #[default]
    Orl,
    /// Global views plus four small random crops.
    Multicrop,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Byol => "byol",
            Mode::Orl => "orl",
            Mode::Multicrop => "multicrop",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byol" => Ok(Mode::Byol),
            "orl" => Ok(Mode::Orl),
            "multicrop" => Ok(Mode::Multicrop),
            _ => Err(Error::Invalid(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn of(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Global => self.lambda1,
            Branch::Intra => self.lambda2,
            Branch::Inter => self.lambda3,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

/// One training batch of views, rows are samples.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub v: Tensor,
    pub v_prime: Tensor,
    /// `(p, p')`.
    pub intra: Option<(Tensor, Tensor)>,
    /// `(p1, p2)`.
    pub inter: Option<(Tensor, Tensor)>,
    /// Four small crops.
    pub crops: Option<[Tensor; 4]>,
}

impl ViewBatch {
    pub fn global_only(v: Tensor, v_prime: Tensor) -> Self {
        Self {
            v,
            v_prime,
            intra: None,
            inter: None,
            crops: None,
        }
    }
}

/// Loss components; each is the sum of both argument orders.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub image: f64,
    pub intra: f64,
    pub inter: f64,
}

impl LossBreakdown {
    fn add(&mut self, branch: Branch, value: f64) {
        match branch {
            Branch::Global => self.image += value,
            Branch::Intra => self.intra += value,
            Branch::Inter => self.inter += value,
        }
    }
}

/// One directed loss term: online path on `online`, target path on `target`.
#[derive(Debug, Clone, Copy)]
pub struct Term<'a> {
    pub branch: Branch,
    pub online: &'a Tensor,
    pub target: &'a Tensor,
}

/// The directed terms of the symmetric total for `mode`, in evaluation order.
pub fn loss_terms(batch: &ViewBatch, mode: Mode) -> Result<Vec<Term<'_>>> {
    let t = |branch, online, target| Term {
        branch,
        online,
        target,
    };
    let mut terms = vec![
        t(Branch::Global, &batch.v, &batch.v_prime),
        t(Branch::Global, &batch.v_prime, &batch.v),
    ];
    match mode {
        Mode::Byol => {}
        Mode::Orl => {
            let missing = || Error::Invalid("orl mode needs intra and inter views".into());
            let (p, pp) = batch.intra.as_ref().ok_or_else(missing)?;
            let (p1, p2) = batch.inter.as_ref().ok_or_else(missing)?;
            terms.extend([
                t(Branch::Intra, p, pp),
                t(Branch::Intra, pp, p),
                t(Branch::Inter, p1, p2),
                t(Branch::Inter, p2, p1),
            ]);
        }
        Mode::Multicrop => {
            let c = batch
                .crops
                .as_ref()
                .ok_or_else(|| Error::Invalid("multicrop mode needs four crops".into()))?;
            terms.extend([
                t(Branch::Intra, &c[0], &batch.v_prime),
                t(Branch::Intra, &c[1], &batch.v),
                t(Branch::Inter, &c[2], &batch.v_prime),
                t(Branch::Inter, &c[3], &batch.v),
            ]);
        }
    }
    Ok(terms)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Batch-mean squared distance between rows of `o` and `t`, and its
/// gradient w.r.t. `o`.
pub fn pair_loss_grad(o: &Tensor, t: &Tensor, normalize: bool) -> Result<(f64, Tensor)> {
    if o.shape() != t.shape() {
        return Err(Error::Shape(format!("online {:?} vs target {:?}", o.shape(), t.shape())));
    }
    check_finite(o, "online output")?;
    check_finite(t, "target output")?;
    let b = o.nrows() as f64;
    if !normalize {
        let diff = o - t;
        let loss = diff.mapv(|v| v * v).sum() / b;
        return Ok((loss, diff * (2.0 / b)));
    }
    let unit = |x: &Tensor| -> Result<(Tensor, Tensor)> {
        let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if norms.iter().any(|&n| n == 0.0) {
            return Err(Error::ZeroNorm);
        }
        let norms = norms.insert_axis(Axis(1));
        Ok((x / &norms, norms))
    };
    let (on, norms) = unit(o)?;
    let (tn, _) = unit(t)?;
    let diff = &on - &tn;
    let loss = diff.mapv(|v| v * v).sum() / b;
    let g = diff * (2.0 / b);
    let radial = (&g * &on).sum_axis(Axis(1)).insert_axis(Axis(1));
    Ok((loss, (g - &on * &radial) / &norms))
}

/// Loss of one directed pair through `branch`.
pub fn byol_pair_loss(
    online: &NetworkParams,
    target: &NetworkParams,
    branch: Branch,
    x1: &Tensor,
    x2: &Tensor,
    normalize: bool,
) -> Result<f64> {
    let (o, _) = online.forward_online(x1, branch)?;
    let t = target.forward_target(x2)?;
    Ok(pair_loss_grad(&o, &t, normalize)?.0)
}

/// Forward activations retained for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub losses: LossBreakdown,
    /// Caches and weighted output gradients of the terms with non-zero weight.
    cached: Option<Vec<(OnlineCache, Tensor)>>,
}

impl ForwardPass {
    /// Online caches of the weighted terms, in evaluation order.
    pub fn caches(&self) -> impl Iterator<Item = &OnlineCache> {
        self.cached.iter().flatten().map(|(c, _)| c)
    }
}

/// Evaluates the weighted symmetric total. Terms with zero weight are
/// evaluated for the breakdown only and take no part in `backward`.
pub fn forward(
    online: &NetworkParams,
    target: &NetworkParams,
    batch: &ViewBatch,
    mode: Mode,
    weights: &LossWeights,
    normalize: bool,
    keep_cache: bool,
) -> Result<ForwardPass> {
    let mut losses = LossBreakdown::default();
    let mut cached = keep_cache.then(Vec::new);
    for term in loss_terms(batch, mode)? {
        let (o, cache) = online.forward_online(term.online, term.branch)?;
        let t = target.forward_target(term.target)?;
        let (loss, grad) = pair_loss_grad(&o, &t, normalize)?;
        losses.add(term.branch, loss);
        let w = weights.of(term.branch);
        if w != 0.0 {
            if let Some(c) = cached.as_mut() {
                c.push((cache, grad * w));
            }
        }
    }
    losses.total = weights.lambda1 * losses.image + weights.lambda2 * losses.intra + weights.lambda3 * losses.inter;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", losses.total)));
    }
    Ok(ForwardPass { losses, cached })
}

/// Convenience: the breakdown without caches.
pub fn orl_total_loss(
    online: &NetworkParams,
    target: &NetworkParams,
    batch: &ViewBatch,
    mode: Mode,
    weights: &LossWeights,
    normalize: bool,
) -> Result<LossBreakdown> {
    Ok(forward(online, target, batch, mode, weights, normalize, false)?.losses)
}

/// Gradient of the total w.r.t. every online parameter. Running-statistic
/// slots of the result are zero.
pub fn backward(online: &NetworkParams, pass: &ForwardPass) -> Result<NetworkParams> {
    let cached = pass
        .cached
        .as_ref()
        .ok_or_else(|| Error::Invalid("backward needs a forward pass with cached activations".into()))?;
    let mut grad = online.zeros_like();
    for (cache, dout) in cached {
        online.backward_online(cache, dout, &mut grad)?;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn orthogonal_outputs_give_two() {
        let (l, g) = pair_loss_grad(&array![[1.0, 0.0]], &array![[0.0, 1.0]], false).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g, array![[2.0, -2.0]]);
    }

    #[test]
    fn normalized_loss_ignores_scale() {
        let (a, _) = pair_loss_grad(&array![[3.0, 4.0]], &array![[1.0, 0.0]], true).unwrap();
        let (b, _) = pair_loss_grad(&array![[0.6, 0.8]], &array![[5.0, 0.0]], true).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(pair_loss_grad(&array![[0.0, 0.0]], &array![[1.0, 0.0]], true).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        let r = pair_loss_grad(&array![[f64::NAN]], &array![[0.0]], false);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn missing_views_error() {
        let b = ViewBatch::global_only(Tensor::zeros((1, 3)), Tensor::zeros((1, 3)));
        assert!(loss_terms(&b, Mode::Orl).is_err());
        assert!(loss_terms(&b, Mode::Multicrop).is_err());
        assert_eq!(loss_terms(&b, Mode::Byol).unwrap().len(), 2);
    }
}
