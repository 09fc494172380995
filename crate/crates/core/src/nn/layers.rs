//! Forward and backward kernels. Inputs are batch-major; products are
//! accumulated in `f64` and rounded once on store.

use super::LayerKind;
use crate::tensor::Tensor;

/// Returns the layer output and, for max-pooling, the flat input index
/// chosen for every output element.
pub(super) fn forward(kind: &LayerKind, params: &[Tensor], x: &Tensor) -> (Tensor, Option<Vec<u32>>) {
    match *kind {
        LayerKind::Dense { inputs, outputs } => {
            (dense_forward(x, &params[0], &params[1], inputs, outputs), None)
        }
        LayerKind::Relu => {
            let data = x.data().iter().map(|&v| v.max(0.0)).collect();
            (Tensor::from_parts(x.shape().to_vec(), data), None)
        }
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
        } => (
            conv_forward(x, &params[0], &params[1], in_channels, out_channels),
            None,
        ),
        LayerKind::MaxPool2x2 => {
            let (y, idx) = pool_forward(x);
            (y, Some(idx))
        }
        LayerKind::Flatten => {
            let b = x.batch();
            (Tensor::from_parts(vec![b, x.row_len()], x.data().to_vec()), None)
        }
    }
}

/// Returns (gradient w.r.t. the layer input, gradients w.r.t. parameters).
/// The input gradient is skipped when `need_input_grad` is false.
pub(super) fn backward(
    kind: &LayerKind,
    params: &[Tensor],
    x: &Tensor,
    pool_argmax: Option<&[u32]>,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Vec<Tensor>) {
    match *kind {
        LayerKind::Dense { inputs, outputs } => {
            dense_backward(x, &params[0], grad_out, inputs, outputs, need_input_grad)
        }
        LayerKind::Relu => {
            let data = x
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            (Some(Tensor::from_parts(x.shape().to_vec(), data)), Vec::new())
        }
        LayerKind::Conv3x3 {
            in_channels,
            out_channels,
        } => conv_backward(x, &params[0], grad_out, in_channels, out_channels, need_input_grad),
        LayerKind::MaxPool2x2 => {
            let idx = pool_argmax.expect("pooling layer records argmax");
            let mut data = vec![0.0f32; x.len()];
            for (&i, &g) in idx.iter().zip(grad_out.data()) {
                data[i as usize] += g;
            }
            (Some(Tensor::from_parts(x.shape().to_vec(), data)), Vec::new())
        }
        LayerKind::Flatten => (
            Some(Tensor::from_parts(x.shape().to_vec(), grad_out.data().to_vec())),
            Vec::new(),
        ),
    }
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, inputs: usize, outputs: usize) -> Tensor {
    let batch = x.batch();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(batch * outputs);
    for r in 0..batch {
        let row = &xd[r * inputs..(r + 1) * inputs];
        for o in 0..outputs {
            let wrow = &wd[o * inputs..(o + 1) * inputs];
            let acc = row
                .iter()
                .zip(wrow)
                .fold(bd[o] as f64, |acc, (&a, &c)| acc + a as f64 * c as f64);
            out.push(acc as f32);
        }
    }
    Tensor::from_parts(vec![batch, outputs], out)
}

fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    inputs: usize,
    outputs: usize,
    need_input_grad: bool,
) -> (Option<Tensor>, Vec<Tensor>) {
    let batch = x.batch();
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dw = vec![0.0f64; outputs * inputs];
    let mut db = vec![0.0f64; outputs];
    for r in 0..batch {
        let row = &xd[r * inputs..(r + 1) * inputs];
        for o in 0..outputs {
            let go = gd[r * outputs + o] as f64;
            if go == 0.0 {
                continue;
            }
            db[o] += go;
            let acc = &mut dw[o * inputs..(o + 1) * inputs];
            for (a, &xi) in acc.iter_mut().zip(row) {
                *a += go * xi as f64;
            }
        }
    }
    let dx = need_input_grad.then(|| {
        let mut dx = vec![0.0f32; batch * inputs];
        let mut acc = vec![0.0f64; inputs];
        for r in 0..batch {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for o in 0..outputs {
                let go = gd[r * outputs + o] as f64;
                if go == 0.0 {
                    continue;
                }
                let wrow = &wd[o * inputs..(o + 1) * inputs];
                for (a, &wi) in acc.iter_mut().zip(wrow) {
                    *a += go * wi as f64;
                }
            }
            for (d, &a) in dx[r * inputs..(r + 1) * inputs].iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
        Tensor::from_parts(vec![batch, inputs], dx)
    });
    (
        dx,
        vec![
            Tensor::from_parts(vec![outputs, inputs], to_f32(dw)),
            Tensor::from_parts(vec![outputs], to_f32(db)),
        ],
    )
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|a| a as f32).collect()
}

fn spatial(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, cin: usize, cout: usize) -> Tensor {
    let (batch, _, h, wd) = spatial(x);
    let (xd, kd, bd) = (x.data(), w.data(), b.data());
    let plane = h * wd;
    let mut out = vec![0.0f32; batch * cout * plane];
    let mut acc = vec![0.0f64; plane];
    for n in 0..batch {
        for o in 0..cout {
            acc.iter_mut().for_each(|a| *a = bd[o] as f64);
            for c in 0..cin {
                let src = &xd[(n * cin + c) * plane..(n * cin + c + 1) * plane];
                let k = &kd[(o * cin + c) * 9..(o * cin + c + 1) * 9];
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = 0.0f64;
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                s += k[ky * 3 + kx] as f64 * src[sy as usize * wd + sx as usize] as f64;
                            }
                        }
                        acc[y * wd + xx] += s;
                    }
                }
            }
            let dst = &mut out[(n * cout + o) * plane..(n * cout + o + 1) * plane];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    Tensor::from_parts(vec![batch, cout, h, wd], out)
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    cin: usize,
    cout: usize,
    need_input_grad: bool,
) -> (Option<Tensor>, Vec<Tensor>) {
    let (batch, _, h, wd) = spatial(x);
    let (xd, kd, gd) = (x.data(), w.data(), g.data());
    let plane = h * wd;
    let mut dk = vec![0.0f64; cout * cin * 9];
    let mut db = vec![0.0f64; cout];
    let mut dx = if need_input_grad {
        vec![0.0f64; batch * cin * plane]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        for o in 0..cout {
            let go = &gd[(n * cout + o) * plane..(n * cout + o + 1) * plane];
            db[o] += go.iter().map(|&v| v as f64).sum::<f64>();
            for c in 0..cin {
                let src = &xd[(n * cin + c) * plane..(n * cin + c + 1) * plane];
                let kbase = (o * cin + c) * 9;
                let xbase = (n * cin + c) * plane;
                for y in 0..h {
                    for xx in 0..wd {
                        let gv = go[y * wd + xx] as f64;
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                let si = sy as usize * wd + sx as usize;
                                dk[kbase + ky * 3 + kx] += gv * src[si] as f64;
                                if need_input_grad {
                                    dx[xbase + si] += gv * kd[kbase + ky * 3 + kx] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = need_input_grad.then(|| Tensor::from_parts(x.shape().to_vec(), to_f32(dx)));
    (
        dx,
        vec![
            Tensor::from_parts(vec![cout, cin, 3, 3], to_f32(dk)),
            Tensor::from_parts(vec![cout], to_f32(db)),
        ],
    )
}

fn pool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (batch, c, h, w) = spatial(x);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut idx = Vec::with_capacity(batch * c * oh * ow);
    for nc in 0..batch * c {
        let base = nc * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                idx.push(best as u32);
            }
        }
    }
    (Tensor::from_parts(vec![batch, c, oh, ow], out), idx)
}
