//! The two-stream network: one backbone per color space, a fusion stage and
//! the softmax head, with a hand-written backward pass through all of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{scatter_locations, BackboneCache, BackboneConfig, BackboneWeights, FeatureMap};
use crate::colorspace::{ColorSpace, ImageTensor};
use crate::error::{Error, Result};
use crate::fbc::{fbc_backward, fbc_forward, normalize, normalize_backward, FbcCache, FbcParams, Normalization};
use crate::loss::{focal_loss, loss_backward, softmax, ClassifierHead, FocalParams};
use crate::metrics::Label;
use crate::tensor::{Real, Tensor3};

/// How the two streams are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionScheme {
    /// Factorized bilinear coding over location pairs, max-aggregated.
    #[default]
    Fbc,
    /// Globally average-pooled features of both streams, concatenated.
    Concatenation,
    /// One head per stream; bona fide probabilities averaged.
    MeanScoreFusion,
    /// One head per stream; larger bona fide probability wins.
    MaxScoreFusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbcConfig {
    pub k: usize,
    #[serde(default = "default_rank")]
    pub r: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub normalization: Normalization,
}

fn default_rank() -> usize {
    1
}

fn default_color_spaces() -> [ColorSpace; 2] {
    [ColorSpace::Rgb, ColorSpace::YCbCr]
}

fn default_lambda() -> f64 {
    0.001
}

impl Default for FbcConfig {
    fn default() -> Self {
        Self {
            k: 32,
            r: 1,
            lambda: 0.001,
            normalization: Normalization::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_color_spaces")]
    pub color_spaces: [ColorSpace; 2],
    #[serde(default)]
    pub fusion: FusionScheme,
    #[serde(default)]
    pub fbc: FbcConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Run both streams through one set of backbone weights.
    #[serde(default)]
    pub shared_backbone: bool,
    #[serde(default)]
    pub focal: FocalParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            color_spaces: default_color_spaces(),
            fusion: FusionScheme::Fbc,
            fbc: FbcConfig::default(),
            backbone: BackboneConfig::default(),
            shared_backbone: false,
            focal: FocalParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.focal.validate()?;
        if self.fusion == FusionScheme::Fbc {
            if self.fbc.k == 0 || self.fbc.r == 0 {
                return Err(Error::Config("fbc.k and fbc.r must be >= 1".into()));
            }
            if !(self.fbc.lambda >= 0.0) || !self.fbc.lambda.is_finite() {
                return Err(Error::Config("fbc.lambda must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// Width of the vector fed to the (first) classifier head.
    fn head_inputs(&self) -> usize {
        let p = self.backbone.out_channels();
        match self.fusion {
            FusionScheme::Fbc => self.fbc.k,
            FusionScheme::Concatenation => 2 * p,
            FusionScheme::MeanScoreFusion | FusionScheme::MaxScoreFusion => p,
        }
    }

    fn score_fusion(&self) -> bool {
        matches!(self.fusion, FusionScheme::MeanScoreFusion | FusionScheme::MaxScoreFusion)
    }
}

/// All learnable tensors. Also used as the gradient and momentum container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub stream_a: BackboneWeights<F>,
    /// `None` when the backbone is shared.
    pub stream_b: Option<BackboneWeights<F>>,
    pub fbc: Option<FbcParams<F>>,
    pub head: ClassifierHead<F>,
    /// Second head for score-level fusion.
    pub head_b: Option<ClassifierHead<F>>,
}

/// One named parameter tensor, borrowed.
pub struct ParamRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
    /// Biases are excluded from weight decay.
    pub decay: bool,
}

impl<F: Real> Weights<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let p = config.backbone.out_channels();
        Self {
            stream_a: BackboneWeights::zeros(&config.backbone),
            stream_b: (!config.shared_backbone).then(|| BackboneWeights::zeros(&config.backbone)),
            fbc: (config.fusion == FusionScheme::Fbc)
                .then(|| FbcParams::zeros(p, p, config.fbc.k, config.fbc.r, F::of(config.fbc.lambda))),
            head: ClassifierHead::zeros(config.head_inputs()),
            head_b: config.score_fusion().then(|| ClassifierHead::zeros(config.head_inputs())),
        }
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.backbone.out_channels();
        let stream_a = BackboneWeights::init(&config.backbone, &mut rng);
        let stream_b = (!config.shared_backbone).then(|| BackboneWeights::init(&config.backbone, &mut rng));
        let fbc = (config.fusion == FusionScheme::Fbc)
            .then(|| FbcParams::init(p, p, config.fbc.k, config.fbc.r, F::of(config.fbc.lambda), &mut rng));
        let head = ClassifierHead::init(config.head_inputs(), &mut rng);
        let head_b = config
            .score_fusion()
            .then(|| ClassifierHead::init(config.head_inputs(), &mut rng));
        Self {
            stream_a,
            stream_b,
            fbc,
            head,
            head_b,
        }
    }

    pub fn params(&self) -> Vec<ParamRef<'_, F>> {
        let mut out = Vec::new();
        push_backbone(&mut out, "stream_a", &self.stream_a);
        if let Some(b) = &self.stream_b {
            push_backbone(&mut out, "stream_b", b);
        }
        if let Some(f) = &self.fbc {
            out.push(ParamRef {
                name: "fbc.u".into(),
                shape: vec![f.u.rows, f.u.cols],
                data: &f.u.data,
                decay: true,
            });
            out.push(ParamRef {
                name: "fbc.v".into(),
                shape: vec![f.v.rows, f.v.cols],
                data: &f.v.data,
                decay: true,
            });
        }
        push_head(&mut out, "head", &self.head);
        if let Some(h) = &self.head_b {
            push_head(&mut out, "head_b", h);
        }
        out
    }

    /// Mutable views in the same order as [`Weights::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for l in &mut self.stream_a.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(b) = &mut self.stream_b {
            for l in &mut b.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        if let Some(f) = &mut self.fbc {
            out.push(&mut f.u.data);
            out.push(&mut f.v.data);
        }
        out.push(&mut self.head.w.data);
        out.push(&mut self.head.b);
        if let Some(h) = &mut self.head_b {
            out.push(&mut h.w.data);
            out.push(&mut h.b);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Weights<F>) {
        let src: Vec<Vec<F>> = other.params().iter().map(|p| p.data.to_vec()).collect();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d = *d + v;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.params_mut() {
            t.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> Weights<G> {
        Weights {
            stream_a: self.stream_a.cast(),
            stream_b: self.stream_b.as_ref().map(|b| b.cast()),
            fbc: self.fbc.as_ref().map(|f| f.cast()),
            head: self.head.cast(),
            head_b: self.head_b.as_ref().map(|h| h.cast()),
        }
    }
}

fn push_backbone<'a, F: Real>(out: &mut Vec<ParamRef<'a, F>>, prefix: &str, b: &'a BackboneWeights<F>) {
    for (i, l) in b.layers.iter().enumerate() {
        out.push(ParamRef {
            name: format!("{prefix}.conv{i}.weight"),
            shape: vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
            data: &l.weight,
            decay: true,
        });
        out.push(ParamRef {
            name: format!("{prefix}.conv{i}.bias"),
            shape: vec![l.out_channels],
            data: &l.bias,
            decay: false,
        });
    }
}

fn push_head<'a, F: Real>(out: &mut Vec<ParamRef<'a, F>>, prefix: &str, h: &'a ClassifierHead<F>) {
    out.push(ParamRef {
        name: format!("{prefix}.weight"),
        shape: vec![h.w.rows, h.w.cols],
        data: &h.w.data,
        decay: true,
    });
    out.push(ParamRef {
        name: format!("{prefix}.bias"),
        shape: vec![2],
        data: &h.b,
        decay: false,
    });
}

/// Network input: the same face in the two configured color spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs<F> {
    pub a: Tensor3<F>,
    pub b: Tensor3<F>,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub weights: Weights<F>,
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward<F> {
    /// Class probabilities of each head (one head unless score fusion).
    pub probs: Vec<[F; 2]>,
    /// Bona fide score after any score-level fusion.
    pub score: F,
    cache: Option<ForwardCache<F>>,
}

#[derive(Debug, Clone)]
struct ForwardCache<F> {
    backbone_a: BackboneCache<F>,
    backbone_b: BackboneCache<F>,
    features: [FeatureMap<F>; 2],
    fbc: Option<FbcCache<F>>,
    /// Vector fed to each head.
    head_inputs: Vec<Vec<F>>,
}

impl<F: Real> Forward<F> {
    /// Discrete activation pattern (ReLU masks, pool and max routing,
    /// soft-threshold regions).
    pub fn pattern(&self, lambda: F) -> Result<Vec<u64>> {
        let c = self.cache.as_ref().ok_or(Error::MissingCache("forward ran without cache"))?;
        let mut sig = c.backbone_a.pattern();
        sig.extend(c.backbone_b.pattern());
        if let Some(f) = &c.fbc {
            sig.extend(f.pattern(lambda));
        }
        Ok(sig)
    }

    /// Smallest distance of any pre-threshold FBC coordinate to `±λ/2`.
    pub fn kink_margin(&self, lambda: F) -> f64 {
        self.cache
            .as_ref()
            .and_then(|c| c.fbc.as_ref())
            .map(|f| f.kink_margin(lambda))
            .unwrap_or(f64::INFINITY)
    }

    pub fn global_representation(&self) -> Option<&[F]> {
        self.cache.as_ref()?.fbc.as_ref().map(|f| f.global.z.as_slice())
    }
}

fn global_avg_pool<F: Real>(t: &Tensor3<F>) -> Vec<F> {
    let plane = t.height * t.width;
    let n = F::of(plane as f64);
    t.data.chunks_exact(plane).map(|c| c.iter().copied().sum::<F>() / n).collect()
}

fn global_avg_pool_backward<F: Real>(g: &[F], shape: [usize; 3]) -> Tensor3<F> {
    let [c, h, w] = shape;
    let n = F::of((h * w) as f64);
    Tensor3::from_vec(c, h, w, g.iter().flat_map(|&v| std::iter::repeat(v / n).take(h * w)).collect())
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, seed);
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights<F>) -> Result<Self> {
        config.validate()?;
        let expected = Weights::<F>::zeros(&config);
        let shapes = |w: &Weights<F>| w.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect::<Vec<_>>();
        if shapes(&expected) != shapes(&weights) {
            return Err(Error::ShapeMismatch("weights do not match model config".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Converts an RGB image into the two stream inputs.
    pub fn prepare(&self, image: &ImageTensor) -> Result<ModelInputs<F>> {
        prepare_inputs(&self.config, image)
    }

    fn backbone_b(&self) -> &BackboneWeights<F> {
        self.weights.stream_b.as_ref().unwrap_or(&self.weights.stream_a)
    }

    pub fn forward(&self, inputs: &ModelInputs<F>, keep_cache: bool) -> Result<Forward<F>> {
        let [sa, sb] = self.config.color_spaces;
        let (fa, ca) = self.weights.stream_a.forward(&inputs.a, sa)?;
        let (fb, cb) = self.backbone_b().forward(&inputs.b, sb)?;
        let (head_inputs, fbc_cache) = match self.config.fusion {
            FusionScheme::Fbc => {
                let params = self.weights.fbc.as_ref().ok_or(Error::Config("missing FBC parameters".into()))?;
                let cache = fbc_forward(&fa, &fb, params)?;
                let z = normalize(&cache.global.z, self.config.fbc.normalization);
                (vec![z], Some(cache))
            }
            FusionScheme::Concatenation => {
                let mut v = global_avg_pool(&fa.tensor);
                v.extend(global_avg_pool(&fb.tensor));
                (vec![v], None)
            }
            FusionScheme::MeanScoreFusion | FusionScheme::MaxScoreFusion => {
                (vec![global_avg_pool(&fa.tensor), global_avg_pool(&fb.tensor)], None)
            }
        };
        let heads: Vec<&ClassifierHead<F>> = std::iter::once(&self.weights.head)
            .chain(self.weights.head_b.as_ref())
            .collect();
        let probs = heads
            .iter()
            .zip(&head_inputs)
            .map(|(h, z)| Ok(softmax(h.logits(z)?)))
            .collect::<Result<Vec<_>>>()?;
        let bona = Label::Bonafide.class_index();
        let score = match self.config.fusion {
            FusionScheme::MeanScoreFusion => (probs[0][bona] + probs[1][bona]) / F::of(2.0),
            FusionScheme::MaxScoreFusion => probs[0][bona].max(probs[1][bona]),
            _ => probs[0][bona],
        };
        let cache = keep_cache.then(|| ForwardCache {
            backbone_a: ca,
            backbone_b: cb,
            features: [fa, fb],
            fbc: fbc_cache,
            head_inputs,
        });
        Ok(Forward { probs, score, cache })
    }

    /// Training objective: the focal loss, summed over heads under score fusion.
    pub fn loss_of(&self, forward: &Forward<F>, label: Label) -> (F, bool) {
        forward.probs.iter().fold((F::zero(), false), |(acc, clamped), p| {
            let v = focal_loss(*p, label, &self.config.focal);
            (acc + v.loss, clamped || v.clamped)
        })
    }

    pub fn loss(&self, inputs: &ModelInputs<F>, label: Label) -> Result<F> {
        let fwd = self.forward(inputs, false)?;
        Ok(self.loss_of(&fwd, label).0)
    }

    /// Gradient of [`Model::loss_of`] for a forward pass that kept its cache.
    pub fn backward(&self, forward: &Forward<F>, label: Label) -> Result<Weights<F>> {
        let cache = forward
            .cache
            .as_ref()
            .ok_or(Error::MissingCache("forward ran without cache"))?;
        let mut grad = Weights::zeros(&self.config);
        let heads: Vec<&ClassifierHead<F>> = std::iter::once(&self.weights.head)
            .chain(self.weights.head_b.as_ref())
            .collect();
        let mut d_head_inputs = Vec::with_capacity(heads.len());
        for (i, (head, probs)) in heads.iter().zip(&forward.probs).enumerate() {
            let d_logits = loss_backward(*probs, label, &self.config.focal);
            let g = if i == 0 {
                &mut grad.head
            } else {
                grad.head_b.as_mut().expect("second head gradient")
            };
            d_head_inputs.push(head.backward(&cache.head_inputs[i], d_logits, g));
        }

        let [fa, fb] = &cache.features;
        let (d_fa, d_fb) = match self.config.fusion {
            FusionScheme::Fbc => {
                let params = self.weights.fbc.as_ref().ok_or(Error::Config("missing FBC parameters".into()))?;
                let fc = cache.fbc.as_ref().ok_or(Error::MissingCache("fbc"))?;
                let d_z = normalize_backward(&fc.global.z, &d_head_inputs[0], self.config.fbc.normalization);
                let g = fbc_backward(&d_z, fc, params)?;
                let gf = grad.fbc.as_mut().expect("fbc gradient");
                gf.u = g.d_u;
                gf.v = g.d_v;
                (
                    scatter_locations(&g.d_x, fa.tensor.channels, fc.pairs.grid),
                    scatter_locations(&g.d_y, fb.tensor.channels, fc.pairs.grid),
                )
            }
            FusionScheme::Concatenation => {
                let p = fa.tensor.channels;
                let d = &d_head_inputs[0];
                (
                    global_avg_pool_backward(&d[..p], fa.tensor.shape()),
                    global_avg_pool_backward(&d[p..], fb.tensor.shape()),
                )
            }
            FusionScheme::MeanScoreFusion | FusionScheme::MaxScoreFusion => (
                global_avg_pool_backward(&d_head_inputs[0], fa.tensor.shape()),
                global_avg_pool_backward(&d_head_inputs[1], fb.tensor.shape()),
            ),
        };
        self.weights.stream_a.backward(&cache.backbone_a, &d_fa, &mut grad.stream_a);
        match grad.stream_b.as_mut() {
            Some(gb) => {
                self.backbone_b().backward(&cache.backbone_b, &d_fb, gb);
            }
            None => {
                self.weights.stream_a.backward(&cache.backbone_b, &d_fb, &mut grad.stream_a);
            }
        }
        Ok(grad)
    }

    /// Loss, gradient, correctness at 0.5 and whether the probability floor engaged.
    pub fn loss_and_grad(&self, inputs: &ModelInputs<F>, label: Label) -> Result<SampleGrad<F>> {
        let fwd = self.forward(inputs, true)?;
        let (loss, clamped) = self.loss_of(&fwd, label);
        let grad = self.backward(&fwd, label)?;
        let predicted = if fwd.score >= F::of(0.5) {
            Label::Bonafide
        } else {
            Label::Attack
        };
        Ok(SampleGrad {
            loss,
            grad,
            correct: predicted == label,
            clamped,
        })
    }

    pub fn score(&self, inputs: &ModelInputs<F>) -> Result<F> {
        Ok(self.forward(inputs, false)?.score)
    }
}

pub struct SampleGrad<F> {
    pub loss: F,
    pub grad: Weights<F>,
    pub correct: bool,
    pub clamped: bool,
}

/// Subtracted from every channel value before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

/// Converts to both stream color spaces and centers values around zero.
pub fn prepare_inputs<F: Real>(config: &ModelConfig, image: &ImageTensor) -> Result<ModelInputs<F>> {
    let size = config.backbone.input_size;
    if image.height() != size || image.width() != size {
        return Err(Error::ShapeMismatch(format!(
            "model expects {size}x{size} images, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let [sa, sb] = config.color_spaces;
    let centered = |space: ColorSpace| -> Result<Tensor3<F>> {
        let mut t = image.convert(space)?.tensor().cast::<F>();
        t.data.iter_mut().for_each(|v| *v = *v - F::of(INPUT_CENTER));
        Ok(t)
    };
    Ok(ModelInputs {
        a: centered(sa)?,
        b: centered(sb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(fusion: FusionScheme, shared: bool) -> ModelConfig {
        ModelConfig {
            color_spaces: [ColorSpace::Rgb, ColorSpace::YCbCr],
            fusion,
            fbc: FbcConfig { k: 6, r: 2, lambda: 0.001, normalization: Normalization::None },
            backbone: BackboneConfig { channels: vec![3, 4], kernel: 3, input_size: 8 },
            shared_backbone: shared,
            focal: FocalParams::default(),
        }
    }

    fn image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(ColorSpace::Rgb, 8, 8, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
    }

    fn check_grad(config: ModelConfig, seed: u64) {
        let model = Model::<f64>::new(config, seed).unwrap();
        let inputs = model.prepare(&image(seed + 100)).unwrap();
        for label in [Label::Bonafide, Label::Attack] {
            let fwd = model.forward(&inputs, true).unwrap();
            let base = fwd.pattern(1e-3).unwrap();
            let grad = model.backward(&fwd, label).unwrap();
            let h = 1e-6;
            let names: Vec<String> = model.weights.params().iter().map(|p| p.name.clone()).collect();
            let analytic: Vec<Vec<f64>> = grad.params().iter().map(|p| p.data.to_vec()).collect();
            let mut checked = 0;
            for (t, name) in names.iter().enumerate() {
                for i in 0..analytic[t].len() {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        m.weights.params_mut()[t][i] += delta;
                        let f = m.forward(&inputs, true).unwrap();
                        (m.loss_of(&f, label).0, f.pattern(1e-3).unwrap())
                    };
                    let ((lp, pp), (lm, pm)) = (eval(h), eval(-h));
                    if pp != base || pm != base {
                        continue;
                    }
                    let num = (lp - lm) / (2.0 * h);
                    let a = analytic[t][i];
                    let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{name}[{i}]: analytic {a} numeric {num}");
                    checked += 1;
                }
            }
            assert!(checked > model.weights.num_params() / 2);
        }
    }

    #[test]
    fn gradients_for_every_fusion_scheme() {
        for fusion in [
            FusionScheme::Fbc,
            FusionScheme::Concatenation,
            FusionScheme::MeanScoreFusion,
            FusionScheme::MaxScoreFusion,
        ] {
            check_grad(tiny(fusion, false), 3);
        }
        check_grad(tiny(FusionScheme::Fbc, true), 4);
        let mut normalized = tiny(FusionScheme::Fbc, false);
        normalized.fbc.normalization = Normalization::L2;
        check_grad(normalized, 5);
    }

    #[test]
    fn param_views_align() {
        let cfg = tiny(FusionScheme::MeanScoreFusion, false);
        let mut w = Weights::<f32>::init(&cfg, 1);
        let lens: Vec<usize> = w.params().iter().map(|p| p.data.len()).collect();
        let mut_lens: Vec<usize> = w.params_mut().iter().map(|p| p.len()).collect();
        assert_eq!(lens, mut_lens);
        let shared = Weights::<f32>::init(&tiny(FusionScheme::Fbc, true), 1);
        assert!(shared.stream_b.is_none());
        assert!(shared.params().iter().any(|p| p.name == "fbc.u"));
    }

    #[test]
    fn backward_without_cache_fails() {
        let model = Model::<f64>::new(tiny(FusionScheme::Fbc, false), 1).unwrap();
        let inputs = model.prepare(&image(1)).unwrap();
        let fwd = model.forward(&inputs, false).unwrap();
        assert!(matches!(model.backward(&fwd, Label::Attack), Err(Error::MissingCache(_))));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let model = Model::<f32>::new(tiny(FusionScheme::Fbc, false), 1).unwrap();
        let big = ImageTensor::from_fn(ColorSpace::Rgb, 16, 16, |_, _| [0.0; 3]).unwrap();
        assert!(model.prepare(&big).is_err());
    }
}
