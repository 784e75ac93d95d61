//! Single-sample layer kernels with a backprop tape.
//!
//! Activations are stored channel-major (`C x H x W`) in flat `f32` buffers.
//! Convolutions use im2col followed by a single `sgemm`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Serializable description of one layer of a feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpSpec {
    /// Stride-1 convolution with "same" zero padding. `kernel` must be odd.
    Conv {
        out: usize,
        kernel: usize,
    },
    Relu,
    Tanh,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Flatten,
    /// Fully connected layer on a flattened input.
    Dense {
        out: usize,
    },
    /// `y = x + body(x)`; the body must preserve shape.
    Residual(Vec<OpSpec>),
    /// `y = concat_channels(x, body(x))`; the body must preserve spatial size.
    Concat(Vec<OpSpec>),
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        h: usize,
        w: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu,
    Tanh,
    MaxPool2 {
        shape: Shape3,
    },
    AvgPool2 {
        shape: Shape3,
    },
    GlobalAvg {
        shape: Shape3,
    },
    Flatten,
    Dense {
        din: usize,
        dout: usize,
        w_off: usize,
        b_off: usize,
    },
    Residual(Vec<Op>),
    Concat {
        cin: usize,
        plane: usize,
        body: Vec<Op>,
    },
}

/// Parameter initialization request recorded during compilation.
pub(crate) struct ParamBlock {
    pub offset: usize,
    pub len: usize,
    /// He-normal standard deviation, or zero for biases.
    pub std: f32,
}

pub(crate) struct Compiled {
    pub ops: Vec<Op>,
    pub out_shape: Shape3,
    pub param_len: usize,
    pub blocks: Vec<ParamBlock>,
}

pub(crate) fn compile(specs: &[OpSpec], input: Shape3, offset: usize) -> Result<Compiled, String> {
    let mut shape = input;
    let mut off = offset;
    let mut ops = Vec::with_capacity(specs.len());
    let mut blocks = Vec::new();
    for spec in specs {
        match spec {
            OpSpec::Conv { out, kernel } => {
                if kernel % 2 == 0 || *kernel == 0 {
                    return Err(format!("conv kernel must be odd, got {kernel}"));
                }
                if shape.h == 1 && shape.w == 1 && *kernel > 1 && shape.c == 0 {
                    return Err("conv on empty input".into());
                }
                let fan_in = shape.c * kernel * kernel;
                let wl = out * fan_in;
                blocks.push(ParamBlock {
                    offset: off,
                    len: wl,
                    std: (2.0 / fan_in as f32).sqrt(),
                });
                blocks.push(ParamBlock {
                    offset: off + wl,
                    len: *out,
                    std: 0.0,
                });
                ops.push(Op::Conv {
                    cin: shape.c,
                    cout: *out,
                    k: *kernel,
                    h: shape.h,
                    w: shape.w,
                    w_off: off,
                    b_off: off + wl,
                });
                off += wl + out;
                shape = Shape3::new(*out, shape.h, shape.w);
            }
            OpSpec::Relu => ops.push(Op::Relu),
            OpSpec::Tanh => ops.push(Op::Tanh),
            OpSpec::MaxPool2 | OpSpec::AvgPool2 => {
                if shape.h < 2 || shape.w < 2 {
                    return Err(format!("cannot pool a {shape} activation"));
                }
                ops.push(if matches!(spec, OpSpec::MaxPool2) {
                    Op::MaxPool2 { shape }
                } else {
                    Op::AvgPool2 { shape }
                });
                shape = Shape3::new(shape.c, shape.h / 2, shape.w / 2);
            }
            OpSpec::GlobalAvgPool => {
                ops.push(Op::GlobalAvg { shape });
                shape = Shape3::new(shape.c, 1, 1);
            }
            OpSpec::Flatten => {
                ops.push(Op::Flatten);
                shape = Shape3::new(shape.len(), 1, 1);
            }
            OpSpec::Dense { out } => {
                let din = shape.len();
                let wl = out * din;
                blocks.push(ParamBlock {
                    offset: off,
                    len: wl,
                    std: (2.0 / din as f32).sqrt(),
                });
                blocks.push(ParamBlock {
                    offset: off + wl,
                    len: *out,
                    std: 0.0,
                });
                ops.push(Op::Dense {
                    din,
                    dout: *out,
                    w_off: off,
                    b_off: off + wl,
                });
                off += wl + out;
                shape = Shape3::new(*out, 1, 1);
            }
            OpSpec::Residual(body) => {
                let inner = compile(body, shape, off)?;
                if inner.out_shape != shape {
                    return Err(format!(
                        "residual body maps {shape} to {}, shapes must match",
                        inner.out_shape
                    ));
                }
                off = inner.param_len;
                let mut inner_blocks = inner.blocks;
                // Start each residual branch close to the identity.
                if let Some(last) = inner_blocks.iter_mut().rev().find(|b| b.std > 0.0) {
                    last.std *= 0.1;
                }
                blocks.extend(inner_blocks);
                ops.push(Op::Residual(inner.ops));
            }
            OpSpec::Concat(body) => {
                let inner = compile(body, shape, off)?;
                if inner.out_shape.h != shape.h || inner.out_shape.w != shape.w {
                    return Err(format!(
                        "concat body maps {shape} to {}, spatial size must match",
                        inner.out_shape
                    ));
                }
                off = inner.param_len;
                blocks.extend(inner.blocks);
                ops.push(Op::Concat {
                    cin: shape.c,
                    plane: shape.plane(),
                    body: inner.ops,
                });
                shape = Shape3::new(shape.c + inner.out_shape.c, shape.h, shape.w);
            }
        }
    }
    Ok(Compiled {
        ops,
        out_shape: shape,
        param_len: off,
        blocks,
    })
}

/// Saved activations for one op.
pub(crate) enum Saved {
    Conv { col: Vec<f32> },
    Relu { out: Vec<f32> },
    Tanh { out: Vec<f32> },
    MaxPool { argmax: Vec<u32> },
    AvgPool,
    GlobalAvg,
    Flatten,
    Dense { input: Vec<f32> },
    Residual(Vec<Saved>),
    Concat(Vec<Saved>),
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes row/column strides that stay inside `a`, `b`
    // and `c` for the given m, k, n; checked by the debug assertions at call sites.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f32], cin: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let pad = k / 2;
    let plane = h * w;
    let mut col = vec![0.0f32; cin * k * k * plane];
    for ci in 0..cin {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for x in x_lo..x_hi {
                        drow[x] = srow[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], cin: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let pad = k / 2;
    let plane = h * w;
    let mut out = vec![0.0f32; cin * plane];
    for ci in 0..cin {
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for x in x_lo..x_hi {
                        drow[(x as isize + dx) as usize] += srow[x];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn forward(
    ops: &[Op],
    params: &[f32],
    mut x: Vec<f32>,
    tape: Option<&mut Vec<Saved>>,
) -> Vec<f32> {
    let mut tape = tape;
    for op in ops {
        let (y, saved) = forward_op(op, params, x, tape.is_some());
        if let (Some(t), Some(s)) = (tape.as_deref_mut(), saved) {
            t.push(s);
        }
        x = y;
    }
    x
}

fn forward_op(op: &Op, params: &[f32], x: Vec<f32>, keep: bool) -> (Vec<f32>, Option<Saved>) {
    match op {
        Op::Conv {
            cin,
            cout,
            k,
            h,
            w,
            w_off,
            b_off,
        } => {
            let plane = h * w;
            let kk = cin * k * k;
            let col = if *k == 1 {
                x
            } else {
                im2col(&x, *cin, *h, *w, *k)
            };
            let mut out = vec![0.0f32; cout * plane];
            for (co, row) in out.chunks_exact_mut(plane).enumerate() {
                row.fill(params[b_off + co]);
            }
            let wm = &params[*w_off..w_off + cout * kk];
            gemm(
                *cout,
                kk,
                plane,
                wm,
                kk as isize,
                1,
                &col,
                plane as isize,
                1,
                1.0,
                &mut out,
            );
            (out, keep.then_some(Saved::Conv { col }))
        }
        Op::Relu => {
            let mut y = x;
            for v in y.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let s = keep.then(|| Saved::Relu { out: y.clone() });
            (y, s)
        }
        Op::Tanh => {
            let mut y = x;
            for v in y.iter_mut() {
                *v = v.tanh();
            }
            let s = keep.then(|| Saved::Tanh { out: y.clone() });
            (y, s)
        }
        Op::MaxPool2 { shape } => {
            let (oh, ow) = (shape.h / 2, shape.w / 2);
            let mut y = vec![0.0f32; shape.c * oh * ow];
            let mut arg = if keep {
                vec![0u32; y.len()]
            } else {
                Vec::new()
            };
            for c in 0..shape.c {
                let base = c * shape.plane();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i0 = base + 2 * oy * shape.w + 2 * ox;
                        let cand = [i0, i0 + 1, i0 + shape.w, i0 + shape.w + 1];
                        let mut best = cand[0];
                        for &i in &cand[1..] {
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                        let o = (c * oh + oy) * ow + ox;
                        y[o] = x[best];
                        if keep {
                            arg[o] = best as u32;
                        }
                    }
                }
            }
            (y, keep.then_some(Saved::MaxPool { argmax: arg }))
        }
        Op::AvgPool2 { shape } => {
            let (oh, ow) = (shape.h / 2, shape.w / 2);
            let mut y = vec![0.0f32; shape.c * oh * ow];
            for c in 0..shape.c {
                let base = c * shape.plane();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i0 = base + 2 * oy * shape.w + 2 * ox;
                        y[(c * oh + oy) * ow + ox] =
                            0.25 * (x[i0] + x[i0 + 1] + x[i0 + shape.w] + x[i0 + shape.w + 1]);
                    }
                }
            }
            (y, keep.then_some(Saved::AvgPool))
        }
        Op::GlobalAvg { shape } => {
            let plane = shape.plane();
            let inv = 1.0 / plane as f32;
            let y = x
                .chunks_exact(plane)
                .map(|p| p.iter().sum::<f32>() * inv)
                .collect();
            (y, keep.then_some(Saved::GlobalAvg))
        }
        Op::Flatten => (x, keep.then_some(Saved::Flatten)),
        Op::Dense {
            din,
            dout,
            w_off,
            b_off,
        } => {
            let mut y = params[*b_off..b_off + dout].to_vec();
            let wm = &params[*w_off..w_off + dout * din];
            gemm(*dout, *din, 1, wm, *din as isize, 1, &x, 1, 1, 1.0, &mut y);
            (y, keep.then_some(Saved::Dense { input: x }))
        }
        Op::Residual(body) => {
            let mut inner = Vec::new();
            let mut y = forward(body, params, x.clone(), keep.then_some(&mut inner));
            for (a, b) in y.iter_mut().zip(&x) {
                *a += *b;
            }
            (y, keep.then_some(Saved::Residual(inner)))
        }
        Op::Concat { body, .. } => {
            let mut inner = Vec::new();
            let branch = forward(body, params, x.clone(), keep.then_some(&mut inner));
            let mut y = x;
            y.extend_from_slice(&branch);
            (y, keep.then_some(Saved::Concat(inner)))
        }
    }
}

/// Backpropagates `dy` through `ops`. Parameter gradients are accumulated into
/// `grads` when given. Returns the input gradient when `need_input` is set
/// (otherwise an empty vector; the first op may then skip its input gradient).
pub(crate) fn backward(
    ops: &[Op],
    params: &[f32],
    tape: &[Saved],
    mut dy: Vec<f32>,
    mut grads: Option<&mut [f32]>,
    need_input: bool,
) -> Vec<f32> {
    debug_assert_eq!(ops.len(), tape.len());
    for (i, (op, saved)) in ops.iter().zip(tape).enumerate().rev() {
        let need = need_input || i > 0;
        dy = backward_op(op, params, saved, dy, grads.as_deref_mut(), need);
    }
    dy
}

fn backward_op(
    op: &Op,
    params: &[f32],
    saved: &Saved,
    dy: Vec<f32>,
    grads: Option<&mut [f32]>,
    need_input: bool,
) -> Vec<f32> {
    match (op, saved) {
        (
            Op::Conv {
                cin,
                cout,
                k,
                h,
                w,
                w_off,
                b_off,
            },
            Saved::Conv { col },
        ) => {
            let plane = h * w;
            let kk = cin * k * k;
            if let Some(g) = grads {
                for (co, row) in dy.chunks_exact(plane).enumerate() {
                    g[b_off + co] += row.iter().sum::<f32>();
                }
                // dW[cout, kk] += dy[cout, plane] * col^T[plane, kk]
                let gw = &mut g[*w_off..w_off + cout * kk];
                gemm(
                    *cout,
                    plane,
                    kk,
                    &dy,
                    plane as isize,
                    1,
                    col,
                    1,
                    plane as isize,
                    1.0,
                    gw,
                );
            }
            if !need_input {
                return Vec::new();
            }
            let wm = &params[*w_off..w_off + cout * kk];
            // dcol[kk, plane] = W^T[kk, cout] * dy[cout, plane]
            let mut dcol = vec![0.0f32; kk * plane];
            gemm(
                kk,
                *cout,
                plane,
                wm,
                1,
                kk as isize,
                &dy,
                plane as isize,
                1,
                0.0,
                &mut dcol,
            );
            if *k == 1 {
                dcol
            } else {
                col2im(&dcol, *cin, *h, *w, *k)
            }
        }
        (Op::Relu, Saved::Relu { out }) => {
            let mut dx = dy;
            for (d, &o) in dx.iter_mut().zip(out) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            dx
        }
        (Op::Tanh, Saved::Tanh { out }) => {
            let mut dx = dy;
            for (d, &o) in dx.iter_mut().zip(out) {
                *d *= 1.0 - o * o;
            }
            dx
        }
        (Op::MaxPool2 { shape }, Saved::MaxPool { argmax }) => {
            let mut dx = vec![0.0f32; shape.len()];
            for (d, &a) in dy.iter().zip(argmax) {
                dx[a as usize] += *d;
            }
            dx
        }
        (Op::AvgPool2 { shape }, Saved::AvgPool) => {
            let (oh, ow) = (shape.h / 2, shape.w / 2);
            let mut dx = vec![0.0f32; shape.len()];
            for c in 0..shape.c {
                let base = c * shape.plane();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = 0.25 * dy[(c * oh + oy) * ow + ox];
                        let i0 = base + 2 * oy * shape.w + 2 * ox;
                        dx[i0] += g;
                        dx[i0 + 1] += g;
                        dx[i0 + shape.w] += g;
                        dx[i0 + shape.w + 1] += g;
                    }
                }
            }
            dx
        }
        (Op::GlobalAvg { shape }, Saved::GlobalAvg) => {
            let plane = shape.plane();
            let inv = 1.0 / plane as f32;
            let mut dx = Vec::with_capacity(shape.len());
            for &g in &dy {
                dx.extend(std::iter::repeat_n(g * inv, plane));
            }
            dx
        }
        (Op::Flatten, Saved::Flatten) => dy,
        (
            Op::Dense {
                din,
                dout,
                w_off,
                b_off,
            },
            Saved::Dense { input },
        ) => {
            if let Some(g) = grads {
                for (o, d) in dy.iter().enumerate() {
                    g[b_off + o] += *d;
                    let row = &mut g[w_off + o * din..w_off + (o + 1) * din];
                    for (r, x) in row.iter_mut().zip(input) {
                        *r += d * x;
                    }
                }
            }
            if !need_input {
                return Vec::new();
            }
            let wm = &params[*w_off..w_off + dout * din];
            let mut dx = vec![0.0f32; *din];
            gemm(
                *din,
                *dout,
                1,
                wm,
                1,
                *din as isize,
                &dy,
                1,
                1,
                0.0,
                &mut dx,
            );
            dx
        }
        (Op::Residual(body), Saved::Residual(inner)) => {
            let mut dx = backward(body, params, inner, dy.clone(), grads, true);
            for (a, b) in dx.iter_mut().zip(&dy) {
                *a += *b;
            }
            dx
        }
        (Op::Concat { cin, plane, body }, Saved::Concat(inner)) => {
            let split = cin * plane;
            let mut dx = dy[..split].to_vec();
            let db = backward(body, params, inner, dy[split..].to_vec(), grads, true);
            for (a, b) in dx.iter_mut().zip(&db) {
                *a += *b;
            }
            dx
        }
        _ => unreachable!("tape entry does not match op"),
    }
}
