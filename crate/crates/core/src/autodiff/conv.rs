//! Direct 3D cross-correlation kernels.
//!
//! Loops run over (out channel, in channel, kernel tap, z, y) with the X
//! axis innermost, so for stride 1 every inner loop is a contiguous axpy.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

const AXES: [&str; 3] = ["X", "Y", "Z"];

fn geometry(input: &Tensor, kernel: &Tensor, stride: [usize; 3], padding: [usize; 3]) -> Result<Geometry> {
    let [cin, ix, iy, iz] = input.dims4()?;
    let &[cout, kcin, kx, ky, kz] = kernel.shape.as_slice() else {
        return Err(Error::Dimension(format!(
            "conv3d kernel must be [C_out,C_in,kx,ky,kz], got {:?}",
            kernel.shape
        )));
    };
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "conv3d channel axis: input has {cin} channels, kernel expects {kcin}"
        )));
    }
    let inp = [ix, iy, iz];
    let ker = [kx, ky, kz];
    let mut out = [0; 3];
    for a in 0..3 {
        if stride[a] == 0 {
            return Err(Error::Parameter(format!("conv3d stride on axis {} must be >= 1", AXES[a])));
        }
        let padded = inp[a] + 2 * padding[a];
        if ker[a] == 0 || ker[a] > padded {
            return Err(Error::Dimension(format!(
                "conv3d axis {}: kernel extent {} exceeds padded input extent {}",
                AXES[a], ker[a], padded
            )));
        }
        out[a] = (padded - ker[a]) / stride[a] + 1;
    }
    Ok(Geometry {
        cin,
        cout,
        input: inp,
        kernel: ker,
        output: out,
        stride,
        padding,
    })
}

/// Output positions `o` with `0 <= o*s + k - p < n`.
#[inline]
fn valid(out_len: usize, in_len: usize, s: usize, k: usize, p: usize) -> Range<usize> {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if in_len + p > k {
        ((in_len - 1 + p - k) / s + 1).min(out_len)
    } else {
        0
    };
    lo..hi.max(lo)
}

#[inline]
fn axis_ranges(g: &Geometry, dx: usize, dy: usize, dz: usize) -> [Range<usize>; 3] {
    [
        valid(g.output[0], g.input[0], g.stride[0], dx, g.padding[0]),
        valid(g.output[1], g.input[1], g.stride[1], dy, g.padding[1]),
        valid(g.output[2], g.input[2], g.stride[2], dz, g.padding[2]),
    ]
}

/// Visits every (out row, in row, weight index, x range, first input x).
#[inline]
fn for_each_row(g: &Geometry, mut f: impl FnMut(usize, usize, usize, Range<usize>, usize)) {
    let [ox, oy, oz] = g.output;
    let [ix, iy, iz] = g.input;
    let [kx, ky, kz] = g.kernel;
    let ovol = ox * oy * oz;
    let ivol = ix * iy * iz;
    for o in 0..g.cout {
        for i in 0..g.cin {
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let widx = (((o * g.cin + i) * kz + dz) * ky + dy) * kx + dx;
                        let [rx, ry, rz] = axis_ranges(g, dx, dy, dz);
                        if rx.is_empty() {
                            continue;
                        }
                        for z in rz.clone() {
                            let zi = z * g.stride[2] + dz - g.padding[2];
                            for y in ry.clone() {
                                let yi = y * g.stride[1] + dy - g.padding[1];
                                let orow = o * ovol + (z * oy + y) * ox;
                                let irow = i * ivol + (zi * iy + yi) * ix;
                                let x0 = rx.start * g.stride[0] + dx - g.padding[0];
                                f(orow, irow, widx, rx.clone(), x0);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward(input: &Tensor, kernel: &Tensor, stride: [usize; 3], padding: [usize; 3]) -> Result<Tensor> {
    let g = geometry(input, kernel, stride, padding)?;
    let mut out = Tensor::zeros(&[g.cout, g.output[0], g.output[1], g.output[2]]);
    let (x, w) = (&input.data, &kernel.data);
    let sx = g.stride[0];
    for_each_row(&g, |orow, irow, widx, rx, x0| {
        let wv = w[widx];
        let n = rx.len();
        let dst = &mut out.data[orow + rx.start..orow + rx.end];
        if sx == 1 {
            let src = &x[irow + x0..irow + x0 + n];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += wv * x[irow + x0 + j * sx];
            }
        }
    });
    Ok(out)
}

pub fn conv3d_grad_input(grad_out: &[f64], input: &Tensor, kernel: &Tensor, stride: [usize; 3], padding: [usize; 3]) -> Vec<f64> {
    let g = geometry(input, kernel, stride, padding).expect("validated in forward");
    let mut gin = vec![0.0; input.numel()];
    let w = &kernel.data;
    let sx = g.stride[0];
    for_each_row(&g, |orow, irow, widx, rx, x0| {
        let wv = w[widx];
        let go = &grad_out[orow + rx.start..orow + rx.end];
        if sx == 1 {
            let dst = &mut gin[irow + x0..irow + x0 + go.len()];
            dst.iter_mut().zip(go).for_each(|(d, s)| *d += wv * s);
        } else {
            for (j, s) in go.iter().enumerate() {
                gin[irow + x0 + j * sx] += wv * s;
            }
        }
    });
    gin
}

pub fn conv3d_grad_kernel(grad_out: &[f64], input: &Tensor, kernel: &Tensor, stride: [usize; 3], padding: [usize; 3]) -> Vec<f64> {
    let g = geometry(input, kernel, stride, padding).expect("validated in forward");
    let mut gw = vec![0.0; kernel.numel()];
    let x = &input.data;
    let sx = g.stride[0];
    for_each_row(&g, |orow, irow, widx, rx, x0| {
        let go = &grad_out[orow + rx.start..orow + rx.end];
        let acc: f64 = if sx == 1 {
            go.iter().zip(&x[irow + x0..irow + x0 + go.len()]).map(|(a, b)| a * b).sum()
        } else {
            go.iter().enumerate().map(|(j, a)| a * x[irow + x0 + j * sx]).sum()
        };
        gw[widx] += acc;
    });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        // in_len 4, pad 1, k 0: o=0 maps to -1 (invalid)
        assert_eq!(valid(4, 4, 1, 0, 1), 1..4);
        assert_eq!(valid(4, 4, 1, 2, 1), 0..3);
        assert_eq!(valid(2, 4, 2, 1, 1), 0..2);
        assert_eq!(valid(2, 4, 2, 0, 1), 1..2);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(vec![1, 3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv3d_forward(&x, &k, [1; 3], [0; 3]).unwrap();
        assert_eq!(y.data, x.data);
        assert_eq!(y.shape, x.shape);
    }

    #[test]
    fn summation_kernel() {
        let x = Tensor::full(&[1, 2, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = conv3d_forward(&x, &k, [1; 3], [0; 3]).unwrap();
        assert_eq!(y.shape, vec![1, 1, 1, 1]);
        assert_eq!(y.data, vec![8.0]);
    }

    #[test]
    fn output_dims_formula() {
        let x = Tensor::zeros(&[2, 9, 8, 5]);
        let k = Tensor::zeros(&[3, 2, 3, 3, 2]);
        let y = conv3d_forward(&x, &k, [2, 3, 1], [1, 0, 1]).unwrap();
        // floor((X + 2p - k)/s) + 1
        assert_eq!(y.shape, vec![3, (9 + 2 - 3) / 2 + 1, (8 - 3) / 3 + 1, (5 + 2 - 2) + 1]);
    }

    #[test]
    fn errors_name_the_axis() {
        let x = Tensor::zeros(&[1, 4, 4, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3, 3]);
        let err = conv3d_forward(&x, &k, [1; 3], [0; 3]).unwrap_err().to_string();
        assert!(err.contains("axis Z"), "{err}");

        let k = Tensor::zeros(&[1, 2, 1, 1, 1]);
        let err = conv3d_forward(&x, &k, [1; 3], [0; 3]).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");

        let k = Tensor::zeros(&[1, 1, 1, 1, 1]);
        assert!(matches!(
            conv3d_forward(&x, &k, [1, 0, 1], [0; 3]),
            Err(Error::Parameter(_))
        ));
    }
}
