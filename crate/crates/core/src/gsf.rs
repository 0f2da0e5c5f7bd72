//! Gate-shift-fuse block over a `[C, T, H, W]` feature volume.
//!
//! The channels are split into two groups. Each group is gated by a
//! tanh-calibrated 3-D convolution map, the gated part is shifted one step
//! along the spectral axis (forward for the first group, backward for the
//! second) while the residual stays aligned, and the two streams are mixed
//! by a sigmoid-calibrated `(C/2) x T` weight map computed from their
//! spatially pooled profiles.

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::model::Conv;
use crate::tensor::{Scalar, Tensor};

/// Gate kernels are `[1, C/2, 3, 3, 3]`, fusion kernels `[1, 2, 3, 3]`,
/// each with a single bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GsfParams<P> {
    pub gate: [Conv<P>; 2],
    pub fuse: [Conv<P>; 2],
}

impl<P> GsfParams<P> {
    pub(crate) fn try_map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> Result<Q>,
    ) -> Result<GsfParams<Q>> {
        let g0 = self.gate[0].try_map(&format!("{prefix}.gate.0"), f)?;
        let g1 = self.gate[1].try_map(&format!("{prefix}.gate.1"), f)?;
        let f0 = self.fuse[0].try_map(&format!("{prefix}.fuse.0"), f)?;
        let f1 = self.fuse[1].try_map(&format!("{prefix}.fuse.1"), f)?;
        Ok(GsfParams {
            gate: [g0, g1],
            fuse: [f0, f1],
        })
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        let [g0, g1] = &mut self.gate;
        g0.visit_mut(&format!("{prefix}.gate.0"), f);
        g1.visit_mut(&format!("{prefix}.gate.1"), f);
        let [f0, f1] = &mut self.fuse;
        f0.visit_mut(&format!("{prefix}.fuse.0"), f);
        f1.visit_mut(&format!("{prefix}.fuse.1"), f);
    }
}

impl<T: Scalar> GsfParams<Tensor<T>> {
    /// All-zero parameters for `channels` input channels.
    pub fn zeros(channels: usize) -> Self {
        let conv = |k: Vec<usize>| Conv {
            kernel: Tensor::zeros(k),
            bias: Tensor::zeros(vec![1]),
        };
        let half = channels / 2;
        GsfParams {
            gate: [conv(vec![1, half, 3, 3, 3]), conv(vec![1, half, 3, 3, 3])],
            fuse: [conv(vec![1, 2, 3, 3]), conv(vec![1, 2, 3, 3])],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    /// `out[:, t] = x[:, t - 1]`, zero at `t = 0`.
    Forward,
    /// `out[:, t] = x[:, t + 1]`, zero at `t = T - 1`.
    Backward,
}

/// Shifts a `[C, T, H, W]` volume by one slice along the spectral axis.
pub fn spectral_shift<'t, T: Scalar>(
    x: Var<'t, T>,
    direction: ShiftDirection,
) -> Result<Var<'t, T>> {
    if x.shape().len() != 4 {
        return Err(Error::shape(
            "spectral_shift",
            format!("expected [C, T, H, W], got {:?}", x.shape()),
        ));
    }
    match direction {
        ShiftDirection::Forward => x.shift(1, 1),
        ShiftDirection::Backward => x.shift(1, -1),
    }
}

/// Test hooks that pin the gate (`G`) or fusion weight (`W`) maps to a
/// constant instead of computing them.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GsfOverrides {
    pub gate: Option<f64>,
    pub fuse: Option<f64>,
}

pub fn gsf_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &GsfParams<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    gsf_forward_with(x, params, GsfOverrides::default())
}

pub fn gsf_forward_with<'t, T: Scalar>(
    x: Var<'t, T>,
    params: &GsfParams<Var<'t, T>>,
    overrides: GsfOverrides,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [c, t, h, w] = shape[..] else {
        return Err(Error::shape(
            "gsf",
            format!("expected [C, T, H, W], got {shape:?}"),
        ));
    };
    if c % 2 != 0 {
        return Err(Error::shape(
            "gsf",
            format!("channel count {c} must be even"),
        ));
    }
    let half = c / 2;
    let tape = x.tape();
    let constant =
        |shape: Vec<usize>, v: f64| tape.constant(&Tensor::full(shape, T::from_f64_lossy(v)));

    let mut groups = Vec::with_capacity(2);
    for g in 0..2 {
        let xg = x.narrow(0, g * half, half)?;
        let gate = match overrides.gate {
            Some(v) => constant(vec![1, t, h, w], v),
            None => xg
                .conv3d(params.gate[g].kernel, params.gate[g].bias, [1, 1, 1])?
                .tanh()?,
        };
        let gated = gate.mul(xg)?;
        let residual = xg.sub(gated)?;
        let direction = if g == 0 {
            ShiftDirection::Forward
        } else {
            ShiftDirection::Backward
        };
        let shifted = spectral_shift(gated, direction)?;
        let weight = match overrides.fuse {
            Some(v) => constant(vec![half, t, 1, 1], v),
            None => {
                let pool = |v: Var<'t, T>| v.reshape(vec![1, half, t, h * w])?.mean_last_axis();
                let stacked = concat(&[pool(shifted)?, pool(residual)?], 0)?;
                stacked
                    .conv2d(params.fuse[g].kernel, params.fuse[g].bias, [1, 1])?
                    .sigmoid()?
                    .reshape(vec![half, t, 1, 1])?
            }
        };
        // W * S + (1 - W) * R
        groups.push(residual.add(weight.mul(shifted.sub(residual)?)?)?);
    }
    concat(&groups, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn bind<'t>(tape: &'t Tape<f64>, p: &GsfParams<Tensor<f64>>) -> GsfParams<Var<'t, f64>> {
        p.try_map("gsf", &mut |_, t| Ok(tape.leaf(t))).unwrap()
    }

    #[test]
    fn shift_definitions() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::new(vec![1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let f = spectral_shift(x, ShiftDirection::Forward).unwrap();
        assert_eq!(&*f.value(), &[0.0, 1.0, 2.0]);
        let fb = spectral_shift(f, ShiftDirection::Backward).unwrap();
        assert_eq!(&*fb.value(), &[1.0, 2.0, 0.0]);
        let single = tape.constant(&Tensor::full(vec![2, 1, 2, 2], 5.0));
        for d in [ShiftDirection::Forward, ShiftDirection::Backward] {
            assert!(spectral_shift(single, d)
                .unwrap()
                .value()
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_params_halve_the_input() {
        let tape = Tape::<f64>::new();
        let data = Tensor::from_fn(vec![4, 5, 3, 3], |i| ((i * 7919) % 23) as f64 - 11.0);
        let x = tape.constant(&data);
        let p = bind(&tape, &GsfParams::zeros(4));
        let y = gsf_forward(x, &p).unwrap();
        assert_eq!(y.shape(), vec![4, 5, 3, 3]);
        for (a, b) in y.value().iter().zip(data.data()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn stem_shape_is_preserved() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::from_fn(vec![8, 28, 11, 11], |i| {
            (i as f32 * 0.01).sin()
        }));
        let p = GsfParams::<Tensor<f32>>::zeros(8)
            .try_map("gsf", &mut |_, t| Ok(tape.constant(t)))
            .unwrap();
        assert_eq!(gsf_forward(x, &p).unwrap().shape(), vec![8, 28, 11, 11]);
    }

    #[test]
    fn saturated_gates_reduce_to_group_shift() {
        let tape = Tape::<f64>::new();
        let data = Tensor::from_fn(vec![4, 6, 2, 2], |i| i as f64 + 1.0);
        let x = tape.constant(&data);
        let p = bind(&tape, &GsfParams::zeros(4));
        let y = gsf_forward_with(
            x,
            &p,
            GsfOverrides {
                gate: Some(1.0),
                fuse: Some(1.0),
            },
        )
        .unwrap()
        .to_tensor();
        for c in 0..4 {
            for t in 1..5 {
                for hw in 0..4 {
                    let (h, w) = (hw / 2, hw % 2);
                    let src = if c < 2 { t - 1 } else { t + 1 };
                    assert_eq!(y.at(&[c, t, h, w]), data.at(&[c, src, h, w]));
                }
            }
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(vec![3, 2, 2, 2]));
        let p = bind(&tape, &GsfParams::zeros(2));
        assert!(gsf_forward(x, &p).is_err());
    }
}
