//! Raw forward/backward kernels on flat f64 buffers.
//!
//! The tape ops and the no-tape inference paths both call into these
//! functions, so a value computed during encoding is bit-identical to the
//! same value computed inside a training graph. All loops run in a fixed
//! index order; no reordering, no threading.

use alloc::vec;
use alloc::vec::Vec;

/// Spatial output size of a cross-correlation: floor((h + 2*pad - k)/stride) + 1.
pub fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Spatial output size of a transposed convolution:
/// (h - 1)*stride - 2*pad + k + out_pad.
pub fn tconv_out_dim(h: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    let grown = (h - 1) * stride + k + out_pad;
    if grown <= 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Cross-correlation. `input` is [B,Cin,H,W], `kernel` [Cout,Cin,k,k],
/// `bias` [Cout]; output [B,Cout,H',W'].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, k, stride, pad).expect("validated by caller");
    let ow = conv_out_dim(w, k, stride, pad).expect("validated by caller");
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let kbase = co * cin * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        let ibase = (bi * cin + ci) * h * w;
                        let kcbase = kbase + ci * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input[ibase + iy as usize * w + ix as usize]
                                    * kernel[kcbase + ky * k + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d_forward` with respect to input, kernel and bias.
/// Buffers that are `None` are skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    kernel: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let oh = conv_out_dim(h, k, stride, pad).expect("validated by caller");
    let ow = conv_out_dim(w, k, stride, pad).expect("validated by caller");
    for bi in 0..b {
        for co in 0..cout {
            let kbase = co * cin * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[((bi * cout + co) * oh + oy) * ow + ox];
                    if let Some(gb) = grad_bias.as_deref_mut() {
                        gb[co] += g;
                    }
                    for ci in 0..cin {
                        let ibase = (bi * cin + ci) * h * w;
                        let kcbase = kbase + ci * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ii = ibase + iy as usize * w + ix as usize;
                                let ki = kcbase + ky * k + kx;
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    gi[ii] += g * kernel[ki];
                                }
                                if let Some(gk) = grad_kernel.as_deref_mut() {
                                    gk[ki] += g * input[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution (scatter form). `input` is [B,Cin,H,W], `kernel`
/// [Cin,Cout,k,k], `bias` [Cout]; output [B,Cout,H',W'] with
/// H' = (H-1)*stride - 2*pad + k + out_pad. For matching geometry this is the
/// adjoint of `conv2d_forward` with the same stride and pad.
#[allow(clippy::too_many_arguments)]
pub fn tconv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Vec<f64> {
    let oh = tconv_out_dim(h, k, stride, pad, out_pad).expect("validated by caller");
    let ow = tconv_out_dim(w, k, stride, pad, out_pad).expect("validated by caller");
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let obase = (bi * cout + co) * oh * ow;
            for i in 0..oh * ow {
                out[obase + i] = bias[co];
            }
        }
        for ci in 0..cin {
            let ibase = (bi * cin + ci) * h * w;
            for iy in 0..h {
                for ix in 0..w {
                    let v = input[ibase + iy * w + ix];
                    for co in 0..cout {
                        let kcbase = (ci * cout + co) * k * k;
                        let obase = (bi * cout + co) * oh * ow;
                        for ky in 0..k {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[obase + oy as usize * ow + ox as usize] +=
                                    v * kernel[kcbase + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `tconv2d_forward`.
#[allow(clippy::too_many_arguments)]
pub fn tconv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    kernel: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let oh = tconv_out_dim(h, k, stride, pad, out_pad).expect("validated by caller");
    let ow = tconv_out_dim(w, k, stride, pad, out_pad).expect("validated by caller");
    if let Some(gb) = grad_bias.as_deref_mut() {
        for bi in 0..b {
            for co in 0..cout {
                let obase = (bi * cout + co) * oh * ow;
                for i in 0..oh * ow {
                    gb[co] += grad_out[obase + i];
                }
            }
        }
    }
    for bi in 0..b {
        for ci in 0..cin {
            let ibase = (bi * cin + ci) * h * w;
            for iy in 0..h {
                for ix in 0..w {
                    let v = input[ibase + iy * w + ix];
                    let mut acc = 0.0;
                    for co in 0..cout {
                        let kcbase = (ci * cout + co) * k * k;
                        let obase = (bi * cout + co) * oh * ow;
                        for ky in 0..k {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let g = grad_out[obase + oy as usize * ow + ox as usize];
                                acc += g * kernel[kcbase + ky * k + kx];
                                if let Some(gk) = grad_kernel.as_deref_mut() {
                                    gk[kcbase + ky * k + kx] += g * v;
                                }
                            }
                        }
                    }
                    if let Some(gi) = grad_input.as_deref_mut() {
                        gi[ibase + iy * w + ix] += acc;
                    }
                }
            }
        }
    }
}

/// Affine map out = input @ weight^T + bias. `input` [B,n], `weight` [m,n],
/// `bias` [m]; output [B,m].
pub fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64], b: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * m];
    for bi in 0..b {
        for j in 0..m {
            let mut acc = bias[j];
            for i in 0..n {
                acc += input[bi * n + i] * weight[j * n + i];
            }
            out[bi * m + j] = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    b: usize,
    n: usize,
    m: usize,
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    for bi in 0..b {
        for j in 0..m {
            let g = grad_out[bi * m + j];
            if let Some(gb) = grad_bias.as_deref_mut() {
                gb[j] += g;
            }
            for i in 0..n {
                if let Some(gi) = grad_input.as_deref_mut() {
                    gi[bi * n + i] += g * weight[j * n + i];
                }
                if let Some(gw) = grad_weight.as_deref_mut() {
                    gw[j * n + i] += g * input[bi * n + i];
                }
            }
        }
    }
}
