//! Feed-forward classifier with pluggable normalization layers and an
//! analytic backward pass.
//!
//! The network is a plain stack of [`Layer`]s. Only the scale and shift of
//! normalization layers are adaptable at test time; everything else stays
//! exactly as pretrained.

mod checkpoint;
mod norm;
mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use norm::{
    ForwardMode, NormKind, NormLayer, RenormFactors, DEFAULT_D_MAX, DEFAULT_EPS, DEFAULT_MOMENTUM,
    DEFAULT_R_MAX,
};
pub use pretrain::{accuracy, pretrain, PretrainConfig};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{rng_for, streams, Batch, Logits, Matrix, ProbMatrix};
use norm::NormCache;

/// Shape of the desk-scale classifier:
/// `input → [affine(h) → norm → ReLU] × hidden.len() → affine(K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub norm: NormKind,
    /// Group count for group normalization.
    pub groups: usize,
}

impl ArchSpec {
    pub fn desk(input_dim: usize, num_classes: usize, norm: NormKind) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            num_classes,
            norm,
            groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `(in × out)` weight matrix.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Linear(Linear),
    Norm(NormLayer),
    Relu,
}

/// A classifier and all of its parameters and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: ArchSpec,
    pub layers: Vec<Layer>,
}

/// Which half of a normalization layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineParam {
    Gamma,
    Beta,
}

/// Address of one adaptable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub layer: usize,
    pub param: AffineParam,
    pub index: usize,
}

/// Gradient for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    None,
    Linear { weight: Matrix, bias: Vec<f64> },
    Norm { gamma: Vec<f64>, beta: Vec<f64> },
}

/// Gradients aligned with [`ModelState::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> f64 {
        match &self.layers[id.layer] {
            LayerGrad::Norm { gamma, beta } => match id.param {
                AffineParam::Gamma => gamma[id.index],
                AffineParam::Beta => beta[id.index],
            },
            _ => 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|g| match g {
            LayerGrad::None => true,
            LayerGrad::Linear { weight, bias } => {
                weight.as_slice().iter().chain(bias).all(|&v| v == 0.0)
            }
            LayerGrad::Norm { gamma, beta } => gamma.iter().chain(beta).all(|&v| v == 0.0),
        })
    }
}

/// Which parameters a backward pass produces gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Normalization scale and shift only.
    Adaptable,
    All,
}

#[derive(Debug)]
enum LayerCache {
    Linear { input: Matrix },
    Norm(NormCache),
    Relu { input: Matrix },
}

/// Activations of one forward pass. Consumed by a single backward call.
#[derive(Debug)]
pub struct ForwardCache {
    signature: Vec<(u8, usize)>,
    layers: Vec<LayerCache>,
    logits: Logits,
}

impl ForwardCache {
    pub fn logits(&self) -> &Logits {
        &self.logits
    }

    /// The BReN correction factors realized in this pass, one entry per
    /// normalization layer (`None` for layers without them).
    pub fn renorm_factors(&self) -> Vec<Option<RenormFactors>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerCache::Norm(c) => Some(match &c.stats {
                    norm::StatsCache::Batch { r, d, .. } => Some(RenormFactors {
                        r: r.clone(),
                        d: d.clone(),
                    }),
                    _ => None,
                }),
                _ => None,
            })
            .collect()
    }
}

impl ModelState {
    /// Builds a randomly initialized network (He-normal weights, zero
    /// biases, unit scale and zero shift in every normalization layer).
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.num_classes < 2 {
            return invalid("model needs input_dim >= 1 and at least 2 classes");
        }
        let mut rng = rng_for(seed, streams::INIT);
        let mut layers = Vec::new();
        let mut width = arch.input_dim;
        let linear = |fan_in: usize, fan_out: usize, rng: &mut crate::numerics::Rng| {
            let scale = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect();
            Layer::Linear(Linear {
                weight: Matrix::new(fan_in, fan_out, data).expect("shape"),
                bias: vec![0.0; fan_out],
            })
        };
        for &h in &arch.hidden {
            layers.push(linear(width, h, &mut rng));
            layers.push(Layer::Norm(NormLayer::new(arch.norm, h, arch.groups)?));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(linear(width, arch.num_classes, &mut rng));
        Ok(Self { arch, layers })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn norm_kind(&self) -> NormKind {
        self.arch.norm
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    /// Switches every normalization layer to `kind`, keeping parameters and
    /// running statistics. Used to turn a BN backbone into a BReN one.
    pub fn with_norm_kind(mut self, kind: NormKind) -> Result<Self> {
        if kind.uses_batch_stats() != self.arch.norm.uses_batch_stats() {
            return invalid(format!(
                "cannot convert a {} backbone to {kind}",
                self.arch.norm
            ));
        }
        self.arch.norm = kind;
        for l in self.norm_layers_mut() {
            l.kind = kind;
        }
        Ok(self)
    }

    /// Every adaptable scalar: the scale and shift of each normalization
    /// layer, in layer order.
    pub fn adaptable_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            if let Layer::Norm(n) = l {
                for param in [AffineParam::Gamma, AffineParam::Beta] {
                    for index in 0..n.features() {
                        ids.push(ParamId {
                            layer,
                            param,
                            index,
                        });
                    }
                }
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> f64 {
        match &self.layers[id.layer] {
            Layer::Norm(n) => match id.param {
                AffineParam::Gamma => n.gamma[id.index],
                AffineParam::Beta => n.beta[id.index],
            },
            _ => panic!("parameter id does not address a normalization layer"),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut f64 {
        match &mut self.layers[id.layer] {
            Layer::Norm(n) => match id.param {
                AffineParam::Gamma => &mut n.gamma[id.index],
                AffineParam::Beta => &mut n.beta[id.index],
            },
            _ => panic!("parameter id does not address a normalization layer"),
        }
    }

    /// Adaptable parameters flattened in [`ModelState::adaptable_params`] order.
    pub fn adaptable_vector(&self) -> Vec<f64> {
        self.norm_layers()
            .flat_map(|n| n.gamma.iter().chain(&n.beta).copied())
            .collect()
    }

    fn signature(&self) -> Vec<(u8, usize)> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Linear(lin) => (0, lin.bias.len()),
                Layer::Norm(n) => (1 + n.kind as u8, n.features()),
                Layer::Relu => (9, 0),
            })
            .collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let mut width = self.arch.input_dim;
        for l in &self.layers {
            match l {
                Layer::Linear(lin) => {
                    if lin.weight.rows() != width || lin.bias.len() != lin.weight.cols() {
                        return invalid("linear layer shape mismatch");
                    }
                    width = lin.weight.cols();
                }
                Layer::Norm(n) => {
                    n.validate()?;
                    if n.features() != width {
                        return invalid("normalization width mismatch");
                    }
                }
                Layer::Relu => {}
            }
        }
        if width != self.arch.num_classes {
            return invalid("output width differs from class count");
        }
        Ok(())
    }

    /// Runs the network. BReN layers in [`ForwardMode::Adapt`] update their
    /// running statistics, hence `&mut self`.
    pub fn forward(&mut self, x: &Batch, mode: ForwardMode) -> Result<(Logits, ForwardCache)> {
        self.forward_with_renorm(x, mode, None)
    }

    /// Like [`ModelState::forward`], but BReN layers use the supplied
    /// correction factors (one entry per normalization layer) instead of
    /// computing them.
    pub fn forward_with_renorm(
        &mut self,
        x: &Batch,
        mode: ForwardMode,
        renorm: Option<&[Option<RenormFactors>]>,
    ) -> Result<(Logits, ForwardCache)> {
        if x.cols() != self.arch.input_dim {
            return invalid(format!(
                "model expects {} input features, got {}",
                self.arch.input_dim,
                x.cols()
            ));
        }
        if x.rows() == 0 {
            return invalid("empty batch");
        }
        let signature = self.signature();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let mut norm_idx = 0;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Linear(lin) => {
                    let y = lin.forward(&h)?;
                    caches.push(LayerCache::Linear { input: h });
                    y
                }
                Layer::Norm(n) => {
                    let f = renorm.and_then(|r| r.get(norm_idx)).and_then(Option::as_ref);
                    norm_idx += 1;
                    let (y, c) = n.normalize(&h, mode, f)?;
                    caches.push(LayerCache::Norm(c));
                    y
                }
                Layer::Relu => {
                    let mut y = h.clone();
                    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                    caches.push(LayerCache::Relu { input: h });
                    y
                }
            };
        }
        let logits = Logits::new(h)?;
        Ok((
            logits.clone(),
            ForwardCache {
                signature,
                layers: caches,
                logits,
            },
        ))
    }

    /// Evaluation-mode predictions.
    pub fn predict(&self, x: &Batch) -> Result<Vec<usize>> {
        let mut m = self.clone();
        Ok(m.forward(x, ForwardMode::Eval)?.0.predictions())
    }

    /// Backpropagates `dlogits` (the loss gradient w.r.t. the logits).
    pub fn backward(
        &self,
        cache: ForwardCache,
        dlogits: &Matrix,
        scope: GradScope,
    ) -> Result<Gradients> {
        if cache.signature != self.signature() {
            return Err(Error::InvalidState(
                "forward cache was produced by a different model".into(),
            ));
        }
        let out = cache.logits.matrix();
        if dlogits.rows() != out.rows() || dlogits.cols() != out.cols() {
            return Err(Error::InvalidState("gradient shape differs from logits".into()));
        }
        let n = self.layers.len();
        // Nothing below the first normalization layer needs a gradient
        // unless every parameter is requested.
        let lowest = match scope {
            GradScope::All => 0,
            GradScope::Adaptable => self
                .layers
                .iter()
                .position(|l| matches!(l, Layer::Norm(_)))
                .unwrap_or(n),
        };
        let mut grads = vec![LayerGrad::None; n];
        let mut dy = dlogits.clone();
        for (idx, (layer, lc)) in self.layers.iter().zip(cache.layers).enumerate().rev() {
            if idx < lowest {
                break;
            }
            let need_dx = idx > lowest;
            match (layer, lc) {
                (Layer::Linear(lin), LayerCache::Linear { input }) => {
                    if scope == GradScope::All {
                        let weight = input.t_matmul(&dy)?;
                        let mut bias = vec![0.0; lin.bias.len()];
                        for row in dy.row_iter() {
                            for (b, v) in bias.iter_mut().zip(row) {
                                *b += v;
                            }
                        }
                        grads[idx] = LayerGrad::Linear { weight, bias };
                    }
                    if need_dx {
                        dy = dy.matmul_t(&lin.weight)?;
                    }
                }
                (Layer::Norm(nl), LayerCache::Norm(c)) => {
                    let (dx, gamma, beta) = nl.backward(&c, &dy, need_dx);
                    grads[idx] = LayerGrad::Norm { gamma, beta };
                    if let Some(dx) = dx {
                        dy = dx;
                    }
                }
                (Layer::Relu, LayerCache::Relu { input }) => {
                    for (g, x) in dy.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if *x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                _ => return Err(Error::InvalidState("layer/cache kind mismatch".into())),
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// Gradients of `(1/|S|) Σ_{i∈S} w_i H(softmax(z_i/τ))` with respect to
    /// the adaptable parameters. Unselected samples contribute nothing; an
    /// empty selection yields all-zero gradients.
    pub fn backward_entropy(
        &self,
        cache: ForwardCache,
        probs: &ProbMatrix,
        tau: f64,
        weights: &[f64],
        selected: &[bool],
    ) -> Result<Gradients> {
        let dlogits = entropy_logit_grad(probs, tau, weights, selected)?;
        self.backward(cache, &dlogits, GradScope::Adaptable)
    }

    /// Plain SGD on the adaptable parameters; every other entry of `grads`
    /// is ignored.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let (Layer::Norm(n), LayerGrad::Norm { gamma, beta }) = (layer, g) {
                for (p, d) in n.gamma.iter_mut().zip(gamma) {
                    *p -= lr * d;
                }
                for (p, d) in n.beta.iter_mut().zip(beta) {
                    *p -= lr * d;
                }
            }
        }
    }
}

/// Weighted, selected mean entropy of temperature-scaled probabilities.
pub fn weighted_entropy_loss(
    probs: &ProbMatrix,
    weights: &[f64],
    selected: &[bool],
) -> Result<f64> {
    check_lengths(probs, weights, selected)?;
    let count = selected.iter().filter(|&&s| s).count();
    if count == 0 {
        return Ok(0.0);
    }
    let sum: f64 = (0..probs.rows())
        .filter(|&i| selected[i])
        .map(|i| weights[i] * crate::numerics::row_entropy(probs.row(i)))
        .sum();
    Ok(sum / count as f64)
}

fn check_lengths(probs: &ProbMatrix, weights: &[f64], selected: &[bool]) -> Result<()> {
    let b = probs.rows();
    if weights.len() != b || selected.len() != b {
        return invalid(format!(
            "weights ({}) and selection ({}) must have one entry per sample ({b})",
            weights.len(),
            selected.len()
        ));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return invalid("sample weights must be finite and non-negative");
    }
    Ok(())
}

/// dL/dz for the weighted selected entropy loss. With `p = softmax(z/τ)`,
/// `∂H/∂z_j = -p_j (ln p_j + H) / τ`.
fn entropy_logit_grad(
    probs: &ProbMatrix,
    tau: f64,
    weights: &[f64],
    selected: &[bool],
) -> Result<Matrix> {
    check_lengths(probs, weights, selected)?;
    if !(tau > 0.0) {
        return invalid("temperature must be positive");
    }
    let b = probs.rows();
    let k = probs.num_classes();
    let mut out = Matrix::zeros(b, k);
    let count = selected.iter().filter(|&&s| s).count();
    if count == 0 {
        return Ok(out);
    }
    let scale = 1.0 / (count as f64 * tau);
    for i in (0..b).filter(|&i| selected[i]) {
        let p = probs.row(i);
        let h = crate::numerics::row_entropy(p);
        let w = weights[i] * scale;
        for (o, &pj) in out.row_mut(i).iter_mut().zip(p) {
            if pj > 0.0 {
                *o = -w * pj * (pj.ln() + h);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_with_temperature;

    fn tiny(norm: NormKind, seed: u64) -> ModelState {
        let arch = ArchSpec {
            input_dim: 3,
            hidden: vec![4, 4],
            num_classes: 5,
            norm,
            groups: 2,
        };
        ModelState::init(arch, seed).unwrap()
    }

    fn batch(rows: usize, seed: u64) -> Matrix {
        use rand::Rng;
        let mut rng = rng_for(seed, 77);
        Matrix::batch(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = tiny(NormKind::Ln, 1);
        if let Some(Layer::Linear(head)) = m.layers.last_mut() {
            head.weight.as_mut_slice().fill(0.0);
        }
        let (z, _) = m.forward(&batch(3, 1), ForwardMode::Adapt).unwrap();
        assert!(z.matrix().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_identical_logits_under_ln() {
        let mut m = tiny(NormKind::Ln, 2);
        let x = batch(1, 2);
        let xx = Matrix::vstack(&[x.clone(), x]).unwrap();
        let (z, _) = m.forward(&xx, ForwardMode::Adapt).unwrap();
        assert_eq!(z.matrix().row(0), z.matrix().row(1));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut m = tiny(NormKind::Bn, 3);
        let x = batch(4, 3);
        let (a, _) = m.forward(&x, ForwardMode::Adapt).unwrap();
        let (b, _) = m.forward(&x, ForwardMode::Adapt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut m = tiny(NormKind::Gn, 0);
        let x = Matrix::batch(2, 4, vec![0.0; 8]).unwrap();
        assert!(matches!(
            m.forward(&x, ForwardMode::Adapt),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn uniform_logits_give_zero_gradient() {
        let mut m = tiny(NormKind::Ln, 4);
        if let Some(Layer::Linear(head)) = m.layers.last_mut() {
            head.weight.as_mut_slice().fill(0.0);
        }
        let x = batch(4, 4);
        let (z, cache) = m.forward(&x, ForwardMode::Adapt).unwrap();
        let p = softmax_with_temperature(&z, 1.0).unwrap();
        let g = m.backward_entropy(cache, &p, 1.0, &[1.0; 4], &[true; 4]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn empty_selection_gives_zero_gradient() {
        let mut m = tiny(NormKind::Bn, 5);
        let (z, cache) = m.forward(&batch(4, 5), ForwardMode::Adapt).unwrap();
        let p = softmax_with_temperature(&z, 1.2).unwrap();
        let g = m.backward_entropy(cache, &p, 1.2, &[1.0; 4], &[false; 4]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn foreign_cache_is_invalid_state() {
        let mut a = tiny(NormKind::Bn, 6);
        let b = tiny(NormKind::Ln, 6);
        let (z, cache) = a.forward(&batch(2, 6), ForwardMode::Adapt).unwrap();
        let p = softmax_with_temperature(&z, 1.0).unwrap();
        let err = b.backward_entropy(cache, &p, 1.0, &[1.0; 2], &[true; 2]);
        assert!(matches!(err, Err(Error::InvalidState(_))));
    }

    #[test]
    fn sgd_step_cases() {
        let m0 = tiny(NormKind::Gn, 7);
        let mut m = m0.clone();
        let mut m1 = m0.clone();
        let (z, cache) = m1.forward(&batch(4, 7), ForwardMode::Adapt).unwrap();
        let p = softmax_with_temperature(&z, 1.0).unwrap();
        let g = m.backward_entropy(cache, &p, 1.0, &[1.0; 4], &[true; 4]).unwrap();
        m.sgd_step(&g, 0.0);
        assert_eq!(m, m0);

        let zero = Gradients {
            layers: g
                .layers
                .iter()
                .map(|l| match l {
                    LayerGrad::Norm { gamma, beta } => LayerGrad::Norm {
                        gamma: vec![0.0; gamma.len()],
                        beta: vec![0.0; beta.len()],
                    },
                    other => other.clone(),
                })
                .collect(),
        };
        m.sgd_step(&zero, 0.5);
        assert_eq!(m, m0);

        let id = m.adaptable_params()[0];
        let mut unit = zero.clone();
        if let LayerGrad::Norm { gamma, .. } = &mut unit.layers[id.layer] {
            gamma[id.index] = 1.0;
        }
        m.sgd_step(&unit, 0.1);
        assert_eq!(m.param(id), m0.param(id) - 0.1);
    }

    #[test]
    fn sgd_leaves_non_adaptable_parameters_alone() {
        let m0 = tiny(NormKind::Bn, 8);
        let mut m = m0.clone();
        let (z, cache) = m.forward(&batch(4, 8), ForwardMode::Adapt).unwrap();
        let full = {
            let dl = Matrix::new(4, 5, vec![0.3; 20]).unwrap();
            m.backward(cache, &dl, GradScope::All).unwrap()
        };
        let _ = z;
        m.sgd_step(&full, 1.0);
        for (a, b) in m.layers.iter().zip(&m0.layers) {
            if let (Layer::Linear(x), Layer::Linear(y)) = (a, b) {
                assert_eq!(x, y);
            }
        }
    }
}
