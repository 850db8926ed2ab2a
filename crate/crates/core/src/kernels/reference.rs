//! Straightforward double-precision kernels used as oracles.
//!
//! Every MAC-bearing kernel counts its inner loop trips, including taps that
//! land in the zero padding, so MAC counts from the cost analyzer can be
//! checked against executed work.

use super::{conv_out_dims, ConvGeometry, KernelError};

#[derive(Debug, Clone, PartialEq)]
pub struct RefOutput {
    pub values: Vec<f64>,
    pub shape: [usize; 3],
    pub loop_trips: u64,
}

/// Grouped 2-D convolution, HWC input and HWIO weights, zero padding.
pub fn float_conv2d(
    x: &[f64],
    in_shape: [usize; 3],
    w: &[f64],
    w_shape: [usize; 4],
    geom: ConvGeometry,
) -> Result<RefOutput, KernelError> {
    let [h, wd, cin] = in_shape;
    let [kh, kw, cig, cout] = w_shape;
    let g = geom.groups;
    if x.len() != h * wd * cin || w.len() != kh * kw * cig * cout {
        return Err(KernelError::Shape(format!(
            "{} inputs for {in_shape:?}, {} weights for {w_shape:?}",
            x.len(),
            w.len()
        )));
    }
    if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cig {
        return Err(KernelError::Shape(format!(
            "groups={g} inconsistent with in={cin}, out={cout}, weight in={cig}"
        )));
    }
    let (ho, wo, [pt, pl]) = conv_out_dims([h, wd], [kh, kw], geom)?;
    let cog = cout / g;
    let mut out = vec![0f64; ho * wo * cout];
    let mut trips = 0u64;
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..cout {
                let grp = o / cog;
                let mut acc = 0f64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        trips += cig as u64;
                        let iy = (oy * geom.stride + ky) as isize - pt as isize;
                        let ix = (ox * geom.stride + kx) as isize - pl as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        let base = (iy as usize * wd + ix as usize) * cin + grp * cig;
                        for ci in 0..cig {
                            acc += x[base + ci] * w[((ky * kw + kx) * cig + ci) * cout + o];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + o] = acc;
            }
        }
    }
    Ok(RefOutput {
        values: out,
        shape: [ho, wo, cout],
        loop_trips: trips,
    })
}

/// `y = x W` with `W` stored `[in, out]`.
pub fn float_dense(x: &[f64], w: &[f64], out: usize) -> Result<RefOutput, KernelError> {
    if out == 0 || w.len() != x.len() * out {
        return Err(KernelError::Shape(format!("{} weights for {}x{out}", w.len(), x.len())));
    }
    let mut y = vec![0f64; out];
    let mut trips = 0u64;
    for (i, &xi) in x.iter().enumerate() {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += xi * w[i * out + o];
            trips += 1;
        }
    }
    Ok(RefOutput {
        values: y,
        shape: [1, 1, out],
        loop_trips: trips,
    })
}

/// Average pool that always divides by `k*k`, even where the window overlaps padding.
pub fn avg_pool_ref(x: &[f64], in_shape: [usize; 3], k: usize, geom: ConvGeometry) -> Result<RefOutput, KernelError> {
    let [h, w, c] = in_shape;
    if x.len() != h * w * c {
        return Err(KernelError::Shape(format!("{} inputs for {in_shape:?}", x.len())));
    }
    let (ho, wo, [pt, pl]) = conv_out_dims([h, w], [k, k], geom)?;
    let div = (k * k) as f64;
    let mut out = vec![0f64; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - pt as isize;
                    let ix = (ox * geom.stride + kx) as isize - pl as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (oy * wo + ox) * c;
                    for ch in 0..c {
                        out[dst + ch] += x[src + ch];
                    }
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= div);
    Ok(RefOutput {
        values: out,
        shape: [ho, wo, c],
        loop_trips: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphir::Padding;

    #[test]
    fn identity_kernel() {
        let x: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64 - 3.5).collect();
        // 1x1 identity: W[c_in, c_out] = I.
        let w = [1.0, 0.0, 0.0, 1.0];
        let out = float_conv2d(&x, [2, 3, 2], &w, [1, 1, 2, 2], ConvGeometry::new(1, Padding::Same)).unwrap();
        assert_eq!(out.values, x);
        assert_eq!(out.loop_trips, 2 * 3 * 2 * 2);
    }

    #[test]
    fn avg_pool_corner_uses_fixed_divisor() {
        let x = vec![1.0; 4 * 4];
        let out = avg_pool_ref(&x, [4, 4, 1], 3, ConvGeometry::new(1, Padding::Same)).unwrap();
        assert!((out.values[0] - 4.0 / 9.0).abs() < 1e-15);
        assert!((out.values[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conv_is_linear() {
        let x: Vec<f64> = (0..5 * 5 * 3).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 3 * 3 * 2).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let geom = ConvGeometry::new(2, Padding::Same);
        let a = float_conv2d(&x, [5, 5, 3], &w, [3, 3, 3, 2], geom).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let b = float_conv2d(&x2, [5, 5, 3], &w, [3, 3, 3, 2], geom).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((2.5 * u - v).abs() < 1e-12);
        }
        assert_eq!(a.shape, [3, 3, 2]);
    }

    #[test]
    fn depthwise_multiplier_two() {
        // in=2, out=4, groups=2: output channels 0,1 read input 0; 2,3 read input 1.
        let x = [1.0, 10.0];
        let w = [1.0, 2.0, 3.0, 4.0];
        let out = float_conv2d(&x, [1, 1, 2], &w, [1, 1, 1, 4], ConvGeometry::new(1, Padding::Same).grouped(2)).unwrap();
        assert_eq!(out.values, vec![1.0, 2.0, 30.0, 40.0]);
    }

    #[test]
    fn dense_counts_trips() {
        let out = float_dense(&[1.0, 2.0], &[3.0, 0.0, 4.0, 1.0], 2).unwrap();
        assert_eq!(out.values, vec![11.0, 2.0]);
        assert_eq!(out.loop_trips, 4);
        assert!(float_dense(&[1.0], &[1.0, 2.0, 3.0], 2).is_err());
    }
}
