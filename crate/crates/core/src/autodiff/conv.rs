//! Stride-1 cross-correlation ("convolution" in the deep-learning sense)
//! with symmetric zero padding.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn new(
        op: &'static str,
        x: &[usize],
        k: &[usize],
        bias: &[usize],
        pad: [usize; 3],
    ) -> Result<Self> {
        if x.len() != 4 || k.len() != 5 {
            return Err(Error::shape(
                op,
                format!(
                    "input {x:?} must be [Cin, D, H, W] and kernels {k:?} [Cout, Cin, kD, kH, kW]"
                ),
            ));
        }
        if k[1] != x[0] {
            return Err(Error::shape(
                op,
                format!("kernels expect {} input channels, input has {}", k[1], x[0]),
            ));
        }
        if bias != [k[0]] {
            return Err(Error::shape(
                op,
                format!("bias {bias:?} must be [{}]", k[0]),
            ));
        }
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = x[d + 1] + 2 * pad[d];
            if k[d + 2] > padded {
                return Err(Error::shape(
                    op,
                    format!(
                        "kernel extent {} exceeds padded input extent {padded} on spatial axis {d}",
                        k[d + 2]
                    ),
                ));
            }
            out[d] = padded - k[d + 2] + 1;
        }
        Ok(Self {
            cin: x[0],
            cout: k[0],
            input: [x[1], x[2], x[3]],
            kernel: [k[2], k[3], k[4]],
            pad,
            out,
        })
    }

    /// Output positions `o` along axis `d` for which `o + k - pad` lands
    /// inside the input, as a half-open range.
    fn valid(&self, d: usize, k: usize) -> (usize, usize) {
        let lo = self.pad[d].saturating_sub(k);
        let hi = (self.input[d] + self.pad[d])
            .saturating_sub(k)
            .min(self.out[d]);
        (lo, hi.max(lo))
    }

    fn in_index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.input[0] + z) * self.input[1] + y) * self.input[2] + x
    }

    fn out_index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.out[0] + z) * self.out[1] + y) * self.out[2] + x
    }

    fn kernel_index(&self, co: usize, ci: usize, a: usize, b: usize, c: usize) -> usize {
        (((co * self.cin + ci) * self.kernel[0] + a) * self.kernel[1] + b) * self.kernel[2] + c
    }

    fn out_len(&self) -> usize {
        self.cout * self.out.iter().product::<usize>()
    }

    /// Visits every (output row, input row, weight) triple contributing to
    /// the result. Rows are contiguous runs along the last axis.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let g = self;
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for a in 0..g.kernel[0] {
                    let (z0, z1) = g.valid(0, a);
                    for b in 0..g.kernel[1] {
                        let (y0, y1) = g.valid(1, b);
                        for c in 0..g.kernel[2] {
                            let (x0, x1) = g.valid(2, c);
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = g.kernel_index(co, ci, a, b, c);
                            for oz in z0..z1 {
                                let iz = oz + a - g.pad[0];
                                for oy in y0..y1 {
                                    let iy = oy + b - g.pad[1];
                                    let ix = x0 + c - g.pad[2];
                                    f(
                                        g.out_index(co, oz, oy, x0),
                                        g.in_index(ci, iz, iy, ix),
                                        x1 - x0,
                                        widx,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 3-D cross-correlation of `[Cin, D, H, W]` with `[Cout, Cin, kD, kH, kW]`
    /// kernels, plus a per-output-channel bias.
    pub fn conv3d(
        self,
        kernels: Var<'t, T>,
        bias: Var<'t, T>,
        padding: [usize; 3],
    ) -> Result<Var<'t, T>> {
        let geo = Geometry::new(
            "conv3d",
            &self.shape(),
            &kernels.shape(),
            &bias.shape(),
            padding,
        )?;
        let (x, k, bv) = (self.value(), kernels.value(), bias.value());
        let plane = geo.out.iter().product::<usize>();
        let mut value = vec![T::zero(); geo.out_len()];
        for (co, chunk) in value.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bv[co]);
        }
        geo.for_each_row(|o, i, n, w| {
            let wv = k[w];
            value[o..o + n]
                .iter_mut()
                .zip(&x[i..i + n])
                .for_each(|(out, &inp)| *out = *out + wv * inp);
        });
        let (ix, ik, ib) = (self.id, kernels.id, bias.id);
        let shape = vec![geo.cout, geo.out[0], geo.out[1], geo.out[2]];
        self.tape.push(
            "conv3d",
            &[self, kernels, bias],
            shape,
            value,
            move |g, buf| {
                if let Some(gb) = buf.slot(ib) {
                    for (co, chunk) in g.chunks(plane).enumerate() {
                        gb[co] = gb[co] + chunk.iter().copied().sum();
                    }
                }
                if let Some(gk) = buf.slot(ik) {
                    geo.for_each_row(|o, i, n, w| {
                        let dot: T = g[o..o + n]
                            .iter()
                            .zip(&x[i..i + n])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        gk[w] = gk[w] + dot;
                    });
                }
                if let Some(gx) = buf.slot(ix) {
                    geo.for_each_row(|o, i, n, w| {
                        let wv = k[w];
                        gx[i..i + n]
                            .iter_mut()
                            .zip(&g[o..o + n])
                            .for_each(|(d, &go)| *d = *d + wv * go);
                    });
                }
            },
        )
    }

    /// 2-D cross-correlation of `[Cin, H, W]` with `[Cout, Cin, kH, kW]`
    /// kernels, plus bias.
    pub fn conv2d(
        self,
        kernels: Var<'t, T>,
        bias: Var<'t, T>,
        padding: [usize; 2],
    ) -> Result<Var<'t, T>> {
        let (xs, ks) = (self.shape(), kernels.shape());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} must be [Cin, H, W] and kernels {ks:?} [Cout, Cin, kH, kW]"),
            ));
        }
        let x3 = self.reshape(vec![xs[0], 1, xs[1], xs[2]])?;
        let k3 = kernels.reshape(vec![ks[0], ks[1], 1, ks[2], ks[3]])?;
        let y = x3.conv3d(k3, bias, [0, padding[0], padding[1]])?;
        let ys = y.shape();
        y.reshape(vec![ys[0], ys[2], ys[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn stem_shapes() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::zeros(vec![1, 30, 13, 13]));
        let k = tape.constant(&Tensor::full(vec![8, 1, 3, 3, 3], 0.1));
        let b = tape.constant(&Tensor::zeros(vec![8]));
        let y = x.conv3d(k, b, [0, 0, 0]).unwrap();
        assert_eq!(y.shape(), vec![8, 28, 11, 11]);
        assert!(y.value().iter().all(|&v| v == 0.0));

        let x = tape.constant(&Tensor::zeros(vec![224, 11, 11]));
        let k = tape.constant(&Tensor::zeros(vec![64, 224, 3, 3]));
        let b = tape.constant(&Tensor::zeros(vec![64]));
        assert_eq!(x.conv2d(k, b, [0, 0]).unwrap().shape(), vec![64, 9, 9]);
    }

    #[test]
    fn one_by_one_identity() {
        let tape = Tape::<f64>::new();
        let data = Tensor::from_fn(vec![1, 4, 5], |i| (i as f64).sin());
        let x = tape.constant(&data);
        let k = tape.constant(&Tensor::full(vec![1, 1, 1, 1], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![1]));
        let y = x.conv2d(k, b, [0, 0]).unwrap();
        assert_eq!(y.to_tensor(), data);
    }

    #[test]
    fn padding_keeps_extent() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::full(vec![1, 2, 3, 3], 1.0));
        let k = tape.constant(&Tensor::full(vec![1, 1, 3, 3, 3], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![1]));
        let y = x.conv3d(k, b, [1, 1, 1]).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 3, 3]);
        // centre voxel sees 2 slices of the full 3x3 window
        assert_eq!(y.to_tensor().at(&[0, 0, 1, 1]), 18.0);
        // corner voxel sees 2 slices of a 2x2 window
        assert_eq!(y.to_tensor().at(&[0, 1, 0, 0]), 8.0);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::zeros(vec![2, 4, 4]));
        let k = tape.constant(&Tensor::zeros(vec![1, 3, 3, 3]));
        let b = tape.constant(&Tensor::zeros(vec![1]));
        assert!(x.conv2d(k, b, [0, 0]).is_err());
        let k = tape.constant(&Tensor::zeros(vec![1, 2, 5, 5]));
        assert!(x.conv2d(k, b, [0, 0]).is_err());
        let k = tape.constant(&Tensor::zeros(vec![1, 2, 5, 5]));
        assert!(x.conv2d(k, b, [1, 1]).is_ok());
    }
}
