//! Finite-difference verification of every layer and of the composed
//! model, at 64-bit.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{io_err, ConfigPreset, GradcheckArgs};
use crate::autodiff::{grad_check_inputs, GradCheckOptions, Tape, Var};
use crate::error::Result;
use crate::gsf::{gsf_forward, GsfParams};
use crate::model::{
    forward, init_params, multi_head_attention, stem_forward, tokenize, Conv, EncoderLayer,
    LayerNorm, Linear, ModelConfig, ModelParams,
};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
/// Minimum distance of any ReLU input from zero at the test point.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `(section, tensor, max relative error)`. The `model` section lists
    /// every parameter name once, plus `input`.
    pub rows: Vec<(String, String, f64)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.2 < TOLERANCE)
    }

    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.2).fold(0.0, f64::max)
    }

    pub fn model_rows(&self) -> impl Iterator<Item = &(String, String, f64)> {
        self.rows.iter().filter(|r| r.0 == "model")
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .expect("positive extents")
}

/// Scalar `sum(out * r)` for a fixed random `r`, so every output element
/// contributes a distinct weight.
fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = randn(&mut rng, &out.shape());
    out.mul(out.tape().constant(&r))?.sum()
}

struct Checker<'a> {
    opts: GradCheckOptions,
    rows: Vec<(String, String, f64)>,
    out: &'a mut dyn Write,
}

impl Checker<'_> {
    fn check<F>(
        &mut self,
        section: &str,
        names: &[String],
        inputs: &[Tensor<f64>],
        f: F,
    ) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let errs = grad_check_inputs(f, inputs, &self.opts)?;
        for (name, e) in names.iter().zip(errs) {
            let verdict = if e < TOLERANCE { "ok" } else { "FAIL" };
            writeln!(self.out, "{section:<10} {name:<36} {e:.3e}  {verdict}").map_err(io_err)?;
            self.rows.push((section.to_string(), name.clone(), e));
        }
        Ok(())
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Rebuilds a parameter tree from vars listed in canonical order.
fn rebind<'t, P>(shape: &ModelParams<P>, vars: &[Var<'t, f64>]) -> ModelParams<Var<'t, f64>> {
    let mut i = 0;
    shape.map(|_, _| {
        i += 1;
        vars[i - 1]
    })
}

/// Smallest magnitude among the ReLU inputs of the stem.
pub fn relu_margin(
    params: &ModelParams<Tensor<f64>>,
    config: &ModelConfig,
    patch: &Tensor<f64>,
) -> Result<f64> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let stem = stem_forward(tape.constant(patch), &p, config)?;
    let mut pre = Vec::new();
    if let Some(conv) = &p.conv3d {
        let shape = patch.shape();
        let x = tape
            .constant(patch)
            .reshape(vec![1, shape[0], shape[1], shape[2]])?;
        pre.push(x.conv3d(conv.kernel, conv.bias, [0, 0, 0])?);
    }
    if let Some(conv) = &p.conv2d {
        pre.push(stem.merged.conv2d(conv.kernel, conv.bias, [0, 0])?);
    }
    Ok(pre
        .iter()
        .flat_map(|v| v.value().iter().map(|u| u.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min))
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<GradcheckReport> {
    let config = match args.config {
        ConfigPreset::Tiny => ModelConfig::tiny(3),
        ConfigPreset::Default => ModelConfig::standard(9),
    };
    let max_coords = args.max_coords.or(match args.config {
        ConfigPreset::Tiny => None,
        ConfigPreset::Default => Some(6),
    });
    let opts = GradCheckOptions {
        step: 1e-5,
        max_coords,
        seed: args.seed,
        corrupt_backward: args.corrupt_backward,
    };
    writeln!(
        out,
        "gradient check: {:?} config, seed {}, tolerance {TOLERANCE:e}",
        args.config, args.seed
    )
    .map_err(io_err)?;
    let mut c = Checker {
        opts,
        rows: Vec::new(),
        out,
    };
    let seed = args.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params::<f64>(&config, seed)?;
    let layout = config.stem_layout()?;
    let (b, s) = (config.pca_bands, config.patch_size);
    // keep ReLU inputs clear of zero so central differences do not
    // straddle a kink; large stems may only get the best of the draws
    let mut patch = randn(&mut rng, &[b, s, s]);
    let mut margin = relu_margin(&params, &config, &patch)?;
    for _ in 1..100 {
        if margin >= KINK_MARGIN {
            break;
        }
        let candidate = randn(&mut rng, &[b, s, s]);
        let m = relu_margin(&params, &config, &candidate)?;
        if m > margin {
            (patch, margin) = (candidate, m);
        }
    }
    writeln!(c.out, "smallest ReLU input at the test point: {margin:.2e}").map_err(io_err)?;

    if let (Some(conv), Some(_)) = (&params.conv3d, layout.conv3d) {
        let inputs = [
            patch.clone().reshape(vec![1, b, s, s])?,
            conv.kernel.clone(),
            conv.bias.clone(),
        ];
        c.check(
            "conv3d",
            &names(&["input", "kernel", "bias"]),
            &inputs,
            |_, v| project(v[0].conv3d(v[1], v[2], [0, 0, 0])?, seed),
        )?;
    }
    if let (Some(g), Some(shape)) = (&params.gsf, layout.gsf_input) {
        let mut inputs = vec![randn(&mut rng, &shape)];
        let mut labels = vec!["input".to_string()];
        for (kind, convs) in [("gate", &g.gate), ("fuse", &g.fuse)] {
            for (i, conv) in convs.iter().enumerate() {
                for (part, t) in [("kernel", &conv.kernel), ("bias", &conv.bias)] {
                    labels.push(format!("gsf.{kind}.{i}.{part}"));
                    inputs.push(t.clone());
                }
            }
        }
        c.check("gsf", &labels, &inputs, |_, v| {
            let conv = |i: usize| Conv {
                kernel: v[i],
                bias: v[i + 1],
            };
            let bound = GsfParams {
                gate: [conv(1), conv(3)],
                fuse: [conv(5), conv(7)],
            };
            project(gsf_forward(v[0], &bound)?, seed)
        })?;
    }
    if let (Some(conv), Some(_)) = (&params.conv2d, layout.conv2d) {
        let inputs = [
            randn(&mut rng, &layout.merged),
            conv.kernel.clone(),
            conv.bias.clone(),
        ];
        c.check(
            "conv2d",
            &names(&["input", "kernel", "bias"]),
            &inputs,
            |_, v| project(v[0].conv2d(v[1], v[2], [0, 0])?, seed),
        )?;
    }
    if let Some(enc) = &params.encoder {
        let z = layout.width;
        let x = randn(&mut rng, &[layout.rows, z]);
        c.check(
            "tokenizer",
            &names(&["features", "wa"]),
            &[x, enc.tokenizer.clone()],
            |_, v| project(tokenize(v[0], v[1])?.1, seed),
        )?;
        let heads = config.heads;
        for (li, layer) in enc.layers.iter().enumerate() {
            let section = format!("encoder.{li}");
            let x = randn(&mut rng, &[config.tokens + 1, z]);
            let inputs = [
                x.clone(),
                layer.wq.clone(),
                layer.wk.clone(),
                layer.wv.clone(),
                layer.wo.clone(),
            ];
            c.check(
                &section,
                &names(&["msa.input", "msa.wq", "msa.wk", "msa.wv", "msa.wo"]),
                &inputs,
                move |_, v| {
                    // layer norms and the MLP are not used by attention
                    let ln = LayerNorm {
                        gain: v[0],
                        shift: v[0],
                    };
                    let lin = Linear {
                        weight: v[0],
                        bias: v[0],
                    };
                    let l = EncoderLayer {
                        ln1: ln.clone(),
                        wq: v[1],
                        wk: v[2],
                        wv: v[3],
                        wo: v[4],
                        ln2: ln,
                        fc1: lin.clone(),
                        fc2: lin,
                    };
                    project(multi_head_attention(v[0], &l, heads)?.0, seed)
                },
            )?;
            let eps = config.ln_eps;
            let gain = randn(&mut rng, &[z]);
            let shift = randn(&mut rng, &[z]);
            c.check(
                &section,
                &names(&["ln.input", "ln.gain", "ln.shift"]),
                &[x.clone(), gain, shift],
                move |_, v| project(v[0].layer_norm(v[1], v[2], eps)?, seed),
            )?;
            let inputs = [
                x,
                layer.fc1.weight.clone(),
                layer.fc1.bias.clone(),
                layer.fc2.weight.clone(),
                layer.fc2.bias.clone(),
            ];
            c.check(
                &section,
                &names(&[
                    "mlp.input",
                    "mlp.fc1.weight",
                    "mlp.fc1.bias",
                    "mlp.fc2.weight",
                    "mlp.fc2.bias",
                ]),
                &inputs,
                |_, v| {
                    let h = v[0]
                        .matmul(v[1])?
                        .add(v[2].reshape(vec![1, v[2].numel()])?)?
                        .gelu()?;
                    project(
                        h.matmul(v[3])?.add(v[4].reshape(vec![1, v[4].numel()])?)?,
                        seed,
                    )
                },
            )?;
        }
    }
    let classes = config.num_classes;
    let target = (seed as usize) % classes;
    let pooled = randn(&mut rng, &[1, layout.width]);
    c.check(
        "head",
        &names(&["input", "weight", "bias"]),
        &[pooled, params.head.weight.clone(), params.head.bias.clone()],
        move |_, v| {
            v[0].matmul(v[1])?
                .add(v[2].reshape(vec![1, classes])?)?
                .cross_entropy(&[target])
        },
    )?;

    let mut inputs = vec![patch];
    let mut labels = vec!["input".to_string()];
    for (name, t) in params.names().into_iter().zip(params.leaves()) {
        labels.push(name);
        inputs.push(t.clone());
    }
    let model_config = config.clone();
    c.check("model", &labels, &inputs, move |_, v| {
        let bound = rebind(&params, &v[1..]);
        forward(v[0], &bound, &model_config)?
            .logits
            .cross_entropy(&[target])
    })?;

    let report = GradcheckReport { rows: c.rows };
    writeln!(
        c.out,
        "max relative error {:.3e}: {}",
        report.max_error(),
        if report.passed() { "PASS" } else { "FAIL" }
    )
    .map_err(io_err)?;
    Ok(report)
}
