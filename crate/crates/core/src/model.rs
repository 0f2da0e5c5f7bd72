//! The full classifier: convolution stem, optional gate-shift-fuse block,
//! semantic tokenizer, transformer encoder and a linear softmax head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::gsf::{gsf_forward, GsfParams};
use crate::tensor::{Scalar, Tensor};

/// Where the gate-shift-fuse block sits in the stem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GsfPosition {
    /// On the 3-D convolution output `[C3, b-2, s-2, s-2]`.
    #[default]
    Post3d,
    /// On the 2-D convolution output `[z, H, W]` viewed as
    /// `[C3, z / C3, H, W]`.
    Post2dReshaped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub pca_bands: usize,
    pub conv3d_out: usize,
    pub conv2d_out: usize,
    pub tokens: usize,
    pub heads: usize,
    pub te_depth: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub conv3d_enabled: bool,
    pub conv2d_enabled: bool,
    pub gsf_enabled: bool,
    pub te_enabled: bool,
    pub gsf_position: GsfPosition,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// 13x13 patches of 30 principal components, 8 cube kernels, 64 plane
    /// kernels, 4 tokens and 4 heads.
    pub fn standard(num_classes: usize) -> Self {
        Self {
            patch_size: 13,
            pca_bands: 30,
            conv3d_out: 8,
            conv2d_out: 64,
            tokens: 4,
            heads: 4,
            te_depth: 1,
            mlp_hidden: 256,
            num_classes,
            conv3d_enabled: true,
            conv2d_enabled: true,
            gsf_enabled: true,
            te_enabled: true,
            gsf_position: GsfPosition::Post3d,
            ln_eps: 1e-5,
        }
    }

    /// Desk-scale configuration for tests and gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            patch_size: 7,
            pca_bands: 5,
            conv3d_out: 2,
            conv2d_out: 4,
            tokens: 2,
            heads: 2,
            te_depth: 1,
            mlp_hidden: 8,
            ..Self::standard(num_classes)
        }
    }

    /// Shapes of the stem stages implied by this configuration.
    pub fn stem_layout(&self) -> Result<StemLayout> {
        let (s, b) = (self.patch_size, self.pca_bands);
        if s < 3 || s % 2 == 0 {
            return Err(Error::Config(format!(
                "patch size must be odd and >= 3, got {s}"
            )));
        }
        if b == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "band and class counts must be positive".into(),
            ));
        }
        let mut spatial = s;
        let mut conv3d_shape = None;
        let mut merged = [b, s, s];
        if self.conv3d_enabled {
            if b < 3 {
                return Err(Error::Config(format!(
                    "3-D convolution needs at least 3 bands, got {b}"
                )));
            }
            if self.conv3d_out == 0 {
                return Err(Error::Config("conv3d_out must be positive".into()));
            }
            spatial -= 2;
            conv3d_shape = Some([self.conv3d_out, b - 2, spatial, spatial]);
            merged = [self.conv3d_out * (b - 2), spatial, spatial];
        }
        let mut conv2d_shape = None;
        let mut width = merged[0];
        if self.conv2d_enabled {
            if spatial < 3 {
                return Err(Error::Config(format!(
                    "2-D convolution needs a spatial extent of at least 3, got {spatial}"
                )));
            }
            if self.conv2d_out == 0 {
                return Err(Error::Config("conv2d_out must be positive".into()));
            }
            spatial -= 2;
            conv2d_shape = Some([self.conv2d_out, spatial, spatial]);
            width = self.conv2d_out;
        }
        let gsf_input = if !self.gsf_enabled {
            None
        } else if self.conv3d_enabled
            && (self.gsf_position == GsfPosition::Post3d || !self.conv2d_enabled)
        {
            conv3d_shape
        } else if self.conv2d_enabled {
            let groups = self.conv3d_out;
            if groups == 0 || !self.conv2d_out.is_multiple_of(groups) {
                return Err(Error::Config(format!(
                    "GSF after the 2-D convolution views {} channels as {groups} groups; they must divide evenly",
                    self.conv2d_out
                )));
            }
            Some([groups, self.conv2d_out / groups, spatial, spatial])
        } else {
            return Err(Error::Config(
                "component required: the GSF block needs at least one convolution layer".into(),
            ));
        };
        if let Some(g) = gsf_input {
            if g[0] % 2 != 0 {
                return Err(Error::Config(format!(
                    "GSF needs an even channel count, got {}",
                    g[0]
                )));
            }
        }
        Ok(StemLayout {
            conv3d: conv3d_shape,
            merged,
            conv2d: conv2d_shape,
            gsf_input,
            rows: spatial * spatial,
            width,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let stem = self.stem_layout()?;
        if self.te_enabled {
            if self.tokens == 0 {
                return Err(Error::Config("token count must be >= 1".into()));
            }
            head_blocks(stem.width, self.heads)?;
            if self.mlp_hidden == 0 {
                return Err(Error::Config("mlp_hidden must be positive".into()));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Stage shapes of the stem for one patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StemLayout {
    pub conv3d: Option<[usize; 4]>,
    /// Input to the 2-D stage, `[channels, H, W]`.
    pub merged: [usize; 3],
    pub conv2d: Option<[usize; 3]>,
    pub gsf_input: Option<[usize; 4]>,
    /// Rows of the feature matrix X (spatial positions).
    pub rows: usize,
    /// Columns of X (feature width z).
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub kernel: P,
    pub bias: P,
}

impl<P> Conv<P> {
    pub(crate) fn try_map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> Result<Q>,
    ) -> Result<Conv<Q>> {
        Ok(Conv {
            kernel: f(&format!("{prefix}.kernel"), &self.kernel)?,
            bias: f(&format!("{prefix}.bias"), &self.bias)?,
        })
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.kernel"), &mut self.kernel);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]` and `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> Linear<P> {
    fn try_map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> Result<Q>,
    ) -> Result<Linear<Q>> {
        Ok(Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight)?,
            bias: f(&format!("{prefix}.bias"), &self.bias)?,
        })
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<P> {
    pub gain: P,
    pub shift: P,
}

impl<P> LayerNorm<P> {
    fn try_map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> Result<Q>,
    ) -> Result<LayerNorm<Q>> {
        Ok(LayerNorm {
            gain: f(&format!("{prefix}.gain"), &self.gain)?,
            shift: f(&format!("{prefix}.shift"), &self.shift)?,
        })
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.shift"), &mut self.shift);
    }
}

/// One pre-norm encoder layer. Query, key, value and output projections
/// are `[z, z]`; heads take contiguous column blocks of width `z / h`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<P> {
    pub ln1: LayerNorm<P>,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub ln2: LayerNorm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

impl<P> EncoderLayer<P> {
    fn try_map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> Result<Q>,
    ) -> Result<EncoderLayer<Q>> {
        Ok(EncoderLayer {
            ln1: self.ln1.try_map(&format!("{prefix}.ln1"), f)?,
            wq: f(&format!("{prefix}.attn.wq"), &self.wq)?,
            wk: f(&format!("{prefix}.attn.wk"), &self.wk)?,
            wv: f(&format!("{prefix}.attn.wv"), &self.wv)?,
            wo: f(&format!("{prefix}.attn.wo"), &self.wo)?,
            ln2: self.ln2.try_map(&format!("{prefix}.ln2"), f)?,
            fc1: self.fc1.try_map(&format!("{prefix}.mlp.fc1"), f)?,
            fc2: self.fc2.try_map(&format!("{prefix}.mlp.fc2"), f)?,
        })
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        f(&format!("{prefix}.attn.wq"), &mut self.wq);
        f(&format!("{prefix}.attn.wk"), &mut self.wk);
        f(&format!("{prefix}.attn.wv"), &mut self.wv);
        f(&format!("{prefix}.attn.wo"), &mut self.wo);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.fc1.visit_mut(&format!("{prefix}.mlp.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.mlp.fc2"), f);
    }
}

/// Tokenizer matrix plus the transformer encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    /// `[z, w]` semantic grouping weights.
    pub tokenizer: P,
    /// `[1, z]` learnable classification token.
    pub cls: P,
    /// `[w + 1, z]` position embedding.
    pub pos: P,
    pub layers: Vec<EncoderLayer<P>>,
}

/// Every learnable tensor of the model. Absent components are `None`.
///
/// The type is generic over the leaf so the same structure holds stored
/// tensors (`Tensor<T>`), recorded tape handles (`Var`), or shape specs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub conv3d: Option<Conv<P>>,
    pub gsf: Option<GsfParams<P>>,
    pub conv2d: Option<Conv<P>>,
    pub encoder: Option<EncoderParams<P>>,
    pub head: Linear<P>,
}

impl<P> ModelParams<P> {
    /// Maps every leaf in canonical order, passing its checkpoint name.
    pub fn try_map<'a, Q>(
        &'a self,
        mut f: impl FnMut(&str, &'a P) -> Result<Q>,
    ) -> Result<ModelParams<Q>> {
        let f = &mut f;
        let conv3d = self
            .conv3d
            .as_ref()
            .map(|c| c.try_map("conv3d", f))
            .transpose()?;
        let gsf = self.gsf.as_ref().map(|g| g.try_map("gsf", f)).transpose()?;
        let conv2d = self
            .conv2d
            .as_ref()
            .map(|c| c.try_map("conv2d", f))
            .transpose()?;
        let encoder = match &self.encoder {
            None => None,
            Some(e) => Some(EncoderParams {
                tokenizer: f("tokenizer.wa", &e.tokenizer)?,
                cls: f("encoder.cls", &e.cls)?,
                pos: f("encoder.pos", &e.pos)?,
                layers: e
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| l.try_map(&format!("encoder.layers.{i}"), f))
                    .collect::<Result<_>>()?,
            }),
        };
        let head = self.head.try_map("head", f)?;
        Ok(ModelParams {
            conv3d,
            gsf,
            conv2d,
            encoder,
            head,
        })
    }

    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> ModelParams<Q> {
        self.try_map(|n, p| Ok(f(n, p))).expect("infallible")
    }

    /// Visits every leaf mutably, in the same canonical order as `try_map`.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        let f = &mut f;
        if let Some(c) = &mut self.conv3d {
            c.visit_mut("conv3d", f);
        }
        if let Some(g) = &mut self.gsf {
            g.visit_mut("gsf", f);
        }
        if let Some(c) = &mut self.conv2d {
            c.visit_mut("conv2d", f);
        }
        if let Some(e) = &mut self.encoder {
            f("tokenizer.wa", &mut e.tokenizer);
            f("encoder.cls", &mut e.cls);
            f("encoder.pos", &mut e.pos);
            for (i, l) in e.layers.iter_mut().enumerate() {
                l.visit_mut(&format!("encoder.layers.{i}"), f);
            }
        }
        self.head.visit_mut("head", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(|n, _| out.push(n.to_string()));
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.map(|_, p| out.push(p));
        out
    }
}

/// How a parameter tensor is initialised.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Xavier (Glorot) normal: std = sqrt(2 / (fan_in + fan_out)).
    XavierNormal {
        fan_in: usize,
        fan_out: usize,
    },
    Normal {
        std: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_spec(kernel: Vec<usize>) -> Conv<ParamSpec> {
    let receptive: usize = kernel[2..].iter().product();
    Conv {
        bias: ParamSpec {
            shape: vec![kernel[0]],
            init: Init::Zeros,
        },
        kernel: ParamSpec {
            init: Init::XavierNormal {
                fan_in: kernel[1] * receptive,
                fan_out: kernel[0] * receptive,
            },
            shape: kernel,
        },
    }
}

fn linear_spec(fan_in: usize, fan_out: usize) -> Linear<ParamSpec> {
    Linear {
        weight: ParamSpec {
            shape: vec![fan_in, fan_out],
            init: Init::XavierNormal { fan_in, fan_out },
        },
        bias: ParamSpec {
            shape: vec![fan_out],
            init: Init::Zeros,
        },
    }
}

fn square_spec(z: usize) -> ParamSpec {
    ParamSpec {
        shape: vec![z, z],
        init: Init::XavierNormal {
            fan_in: z,
            fan_out: z,
        },
    }
}

fn ln_spec(z: usize) -> LayerNorm<ParamSpec> {
    LayerNorm {
        gain: ParamSpec {
            shape: vec![z],
            init: Init::Ones,
        },
        shift: ParamSpec {
            shape: vec![z],
            init: Init::Zeros,
        },
    }
}

/// Shapes and initialisers of every parameter for `config`.
pub fn param_layout(config: &ModelConfig) -> Result<ModelParams<ParamSpec>> {
    config.validate()?;
    let stem = config.stem_layout()?;
    let z = stem.width;
    let conv3d = config
        .conv3d_enabled
        .then(|| conv_spec(vec![config.conv3d_out, 1, 3, 3, 3]));
    let gsf = stem.gsf_input.map(|g| {
        let half = g[0] / 2;
        let gate = || conv_spec(vec![1, half, 3, 3, 3]);
        let fuse = || conv_spec(vec![1, 2, 3, 3]);
        GsfParams {
            gate: [gate(), gate()],
            fuse: [fuse(), fuse()],
        }
    });
    let conv2d = config
        .conv2d_enabled
        .then(|| conv_spec(vec![config.conv2d_out, stem.merged[0], 3, 3]));
    let encoder = config.te_enabled.then(|| EncoderParams {
        tokenizer: ParamSpec {
            shape: vec![z, config.tokens],
            init: Init::XavierNormal {
                fan_in: z,
                fan_out: config.tokens,
            },
        },
        cls: ParamSpec {
            shape: vec![1, z],
            init: Init::Zeros,
        },
        pos: ParamSpec {
            shape: vec![config.tokens + 1, z],
            init: Init::Normal { std: 0.02 },
        },
        layers: (0..config.te_depth)
            .map(|_| EncoderLayer {
                ln1: ln_spec(z),
                wq: square_spec(z),
                wk: square_spec(z),
                wv: square_spec(z),
                wo: square_spec(z),
                ln2: ln_spec(z),
                fc1: linear_spec(z, config.mlp_hidden),
                fc2: linear_spec(config.mlp_hidden, z),
            })
            .collect(),
    });
    Ok(ModelParams {
        conv3d,
        gsf,
        conv2d,
        encoder,
        head: linear_spec(z, config.num_classes),
    })
}

/// Draws initial parameters; identical seeds give bitwise-identical
/// results.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor<T>>> {
    let layout = param_layout(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout.try_map(|name, spec| {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::XavierNormal { fan_in, fan_out } => {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                sample_normal(&mut rng, std, n, name)?
            }
            Init::Normal { std } => sample_normal(&mut rng, std, n, name)?,
        };
        Tensor::new(spec.shape.clone(), data)
    })
}

fn sample_normal<T: Scalar>(
    rng: &mut ChaCha8Rng,
    std: f64,
    n: usize,
    name: &str,
) -> Result<Vec<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{name}: {e}")))?;
    Ok((0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect())
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Records every parameter on `tape`, as differentiable leaves when
    /// `trainable` is set.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ModelParams<Var<'t, T>> {
        self.map(|_, t| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut(|_, t| t.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(|_, t| t.zero_grad());
    }
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<'t, T: Scalar> {
    pub conv3d: Option<Var<'t, T>>,
    pub gsf: Option<Var<'t, T>>,
    pub merged: Var<'t, T>,
    pub conv2d: Option<Var<'t, T>>,
    /// Pixel feature matrix X, `[N, z]`.
    pub features: Var<'t, T>,
    /// Semantic grouping A, `[N, w]`.
    pub grouping: Option<Var<'t, T>>,
    /// Semantic tokens T, `[w, z]`.
    pub tokens: Option<Var<'t, T>>,
    /// Encoder input with the class token and positions, `[w + 1, z]`.
    pub encoder_in: Option<Var<'t, T>>,
    pub encoder_out: Option<Var<'t, T>>,
    /// Per layer, per head attention weights `[w + 1, w + 1]`.
    pub attention: Vec<Vec<Var<'t, T>>>,
    /// Classifier input, `[1, z]`.
    pub pooled: Var<'t, T>,
    pub logits: Var<'t, T>,
    pub probabilities: Var<'t, T>,
}

/// Conv stem: `[b, s, s]` patch to the `[N, z]` feature matrix, returning
/// intermediate stages as well.
pub fn stem_forward<'t, T: Scalar>(
    patch: Var<'t, T>,
    params: &ModelParams<Var<'t, T>>,
    config: &ModelConfig,
) -> Result<StemTrace<'t, T>> {
    let layout = config.stem_layout()?;
    let (s, b) = (config.patch_size, config.pca_bands);
    if patch.shape() != [b, s, s] {
        return Err(Error::shape(
            "stem",
            format!(
                "patch {:?} does not match configured [{b}, {s}, {s}]",
                patch.shape()
            ),
        ));
    }
    let missing = |what: &str| Error::Config(format!("parameters lack the {what} component"));
    let mut conv3d_out = None;
    let mut gsf_out = None;
    let mut merged = patch;
    if let Some(shape) = layout.conv3d {
        let conv = params.conv3d.as_ref().ok_or_else(|| missing("conv3d"))?;
        let mut y = patch
            .reshape(vec![1, b, s, s])?
            .conv3d(conv.kernel, conv.bias, [0, 0, 0])?
            .relu()?;
        conv3d_out = Some(y);
        if layout.gsf_input == Some(shape) {
            let g = params.gsf.as_ref().ok_or_else(|| missing("gsf"))?;
            y = gsf_forward(y, g)?;
            gsf_out = Some(y);
        }
        merged = y.reshape(layout.merged.to_vec())?;
    }
    let mut conv2d_out = None;
    let mut fmap = merged;
    if let Some(shape) = layout.conv2d {
        let conv = params.conv2d.as_ref().ok_or_else(|| missing("conv2d"))?;
        let mut y = merged.conv2d(conv.kernel, conv.bias, [0, 0])?.relu()?;
        conv2d_out = Some(y);
        if let (Some(g_shape), None) = (layout.gsf_input, gsf_out) {
            let g = params.gsf.as_ref().ok_or_else(|| missing("gsf"))?;
            let z = gsf_forward(y.reshape(g_shape.to_vec())?, g)?;
            gsf_out = Some(z);
            y = z.reshape(shape.to_vec())?;
        }
        fmap = y;
    }
    let features = fmap.reshape(vec![layout.width, layout.rows])?.transpose()?;
    Ok(StemTrace {
        conv3d: conv3d_out,
        gsf: gsf_out,
        merged,
        conv2d: conv2d_out,
        features,
    })
}

#[derive(Clone, Debug)]
pub struct StemTrace<'t, T: Scalar> {
    pub conv3d: Option<Var<'t, T>>,
    pub gsf: Option<Var<'t, T>>,
    pub merged: Var<'t, T>,
    pub conv2d: Option<Var<'t, T>>,
    pub features: Var<'t, T>,
}

/// Semantic tokenizer: `A = softmax_N(X Wa)` normalised over the spatial
/// rows, `T = A^T X`. Returns `(A, T)`.
pub fn tokenize<'t, T: Scalar>(
    features: Var<'t, T>,
    wa: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let grouping = features.matmul(wa)?.softmax(0)?;
    let tokens = grouping.transpose()?.matmul(features)?;
    Ok((grouping, tokens))
}

fn linear<'t, T: Scalar>(x: Var<'t, T>, layer: &Linear<Var<'t, T>>) -> Result<Var<'t, T>> {
    let out = layer.bias.numel();
    x.matmul(layer.weight)?
        .add(layer.bias.reshape(vec![1, out])?)
}

/// Column block `(start, width)` of each head. Widths are `z / heads`,
/// with the first `z % heads` heads one column wider when the split is
/// uneven.
pub fn head_blocks(z: usize, heads: usize) -> Result<Vec<(usize, usize)>> {
    if heads == 0 || heads > z {
        return Err(Error::Config(format!(
            "{heads} heads cannot split feature width {z}"
        )));
    }
    let (base, extra) = (z / heads, z % heads);
    let mut start = 0;
    Ok((0..heads)
        .map(|h| {
            let w = base + usize::from(h < extra);
            start += w;
            (start - w, w)
        })
        .collect())
}

/// Multi-head self-attention over `[L, z]`; returns the projected output
/// and the per-head attention weights.
pub fn multi_head_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    layer: &EncoderLayer<Var<'t, T>>,
    heads: usize,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let z = x.shape()[1];
    let blocks = head_blocks(z, heads)?;
    let q = x.matmul(layer.wq)?;
    let k = x.matmul(layer.wk)?;
    let v = x.matmul(layer.wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for (start, dk) in blocks {
        let scale = T::one() / T::from_usize(dk).unwrap_or_else(T::one).sqrt();
        let qh = q.narrow(1, start, dk)?;
        let kh = k.narrow(1, start, dk)?;
        let vh = v.narrow(1, start, dk)?;
        let weights = qh.matmul(kh.transpose()?)?.scale(scale)?.softmax(1)?;
        outs.push(weights.matmul(vh)?);
        maps.push(weights);
    }
    Ok((concat(&outs, 1)?.matmul(layer.wo)?, maps))
}

/// Prepends the class token, adds position embeddings and applies the
/// pre-norm encoder layers. Output shape equals input shape `[w + 1, z]`.
pub fn transformer_encode<'t, T: Scalar>(
    tokens: Var<'t, T>,
    encoder: &EncoderParams<Var<'t, T>>,
    config: &ModelConfig,
) -> Result<EncoderTrace<'t, T>> {
    let shape = tokens.shape();
    let expected_pos = encoder.pos.shape();
    if shape.len() != 2 || expected_pos != [shape[0] + 1, shape[1]] {
        return Err(Error::shape(
            "transformer_encode",
            format!("tokens {shape:?} do not match position embedding {expected_pos:?}"),
        ));
    }
    let eps = T::from_f64_lossy(config.ln_eps);
    let input = concat(&[encoder.cls, tokens], 0)?.add(encoder.pos)?;
    let mut x = input;
    let mut attention = Vec::with_capacity(encoder.layers.len());
    for layer in &encoder.layers {
        let h = x.layer_norm(layer.ln1.gain, layer.ln1.shift, eps)?;
        let (msa, maps) = multi_head_attention(h, layer, config.heads)?;
        x = x.add(msa)?;
        let h = x.layer_norm(layer.ln2.gain, layer.ln2.shift, eps)?;
        let m = linear(linear(h, &layer.fc1)?.gelu()?, &layer.fc2)?;
        x = x.add(m)?;
        attention.push(maps);
    }
    Ok(EncoderTrace {
        input,
        output: x,
        attention,
    })
}

#[derive(Clone, Debug)]
pub struct EncoderTrace<'t, T: Scalar> {
    pub input: Var<'t, T>,
    pub output: Var<'t, T>,
    pub attention: Vec<Vec<Var<'t, T>>>,
}

/// Logits of the linear head for a `[1, z]` input.
pub fn head_logits<'t, T: Scalar>(
    pooled: Var<'t, T>,
    head: &Linear<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    linear(pooled, head)
}

/// Linear map followed by softmax; `[1, z]` to `[1, C]` probabilities.
pub fn classify_head<'t, T: Scalar>(
    pooled: Var<'t, T>,
    head: &Linear<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    head_logits(pooled, head)?.softmax(1)
}

/// Full forward pass of one `[b, s, s]` patch.
pub fn forward<'t, T: Scalar>(
    patch: Var<'t, T>,
    params: &ModelParams<Var<'t, T>>,
    config: &ModelConfig,
) -> Result<ForwardTrace<'t, T>> {
    let stem = stem_forward(patch, params, config)?;
    let features = stem.features;
    let (grouping, tokens, encoder_in, encoder_out, attention, pooled) = if config.te_enabled {
        let enc = params
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config("parameters lack the encoder component".into()))?;
        let (a, t) = tokenize(features, enc.tokenizer)?;
        let trace = transformer_encode(t, enc, config)?;
        let cls_out = trace.output.narrow(0, 0, 1)?;
        (
            Some(a),
            Some(t),
            Some(trace.input),
            Some(trace.output),
            trace.attention,
            cls_out,
        )
    } else {
        // convolution-only path: global average of the pixel features
        let z = features.shape()[1];
        let pooled = features
            .transpose()?
            .mean_last_axis()?
            .reshape(vec![1, z])?;
        (None, None, None, None, Vec::new(), pooled)
    };
    let logits = head_logits(pooled, &params.head)?;
    let probabilities = logits.softmax(1)?;
    Ok(ForwardTrace {
        conv3d: stem.conv3d,
        gsf: stem.gsf,
        merged: stem.merged,
        conv2d: stem.conv2d,
        features,
        grouping,
        tokens,
        encoder_in,
        encoder_out,
        attention,
        pooled,
        logits,
        probabilities,
    })
}

/// Class probabilities `[B, C]` (row-major) for a batch of patches; each
/// patch is evaluated independently.
pub fn model_forward<T: Scalar>(
    patches: &[Tensor<T>],
    params: &ModelParams<Tensor<T>>,
    config: &ModelConfig,
) -> Result<Vec<Vec<T>>> {
    patches
        .par_iter()
        .map(|p| {
            let tape = Tape::new();
            let bound = params.bind(&tape, false);
            let x = tape.constant(p);
            Ok(forward(x, &bound, config)?.probabilities.value().to_vec())
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
