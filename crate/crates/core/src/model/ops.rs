//! HWC convolution, pooling and their adjoints.
//!
//! Convolution weights are stored `[cout][3][3][cin]`; the kernels work on
//! the transposed `[3][3][cin][cout]` layout so the innermost loop runs over
//! output channels.

pub(crate) fn transpose_weights(w: &[f32], cout: usize, cin: usize) -> Vec<f32> {
    let mut t = vec![0.0; w.len()];
    for co in 0..cout {
        for k in 0..9 {
            for ci in 0..cin {
                t[(k * cin + ci) * cout + co] = w[(co * 9 + k) * cin + ci];
            }
        }
    }
    t
}

pub(crate) fn untranspose_weights(t: &[f32], cout: usize, cin: usize) -> Vec<f32> {
    let mut w = vec![0.0; t.len()];
    for co in 0..cout {
        for k in 0..9 {
            for ci in 0..cin {
                w[(co * 9 + k) * cin + ci] = t[(k * cin + ci) * cout + co];
            }
        }
    }
    w
}

/// 3x3 convolution, stride 1, zero padding 1.
pub(crate) fn conv3x3(
    input: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    wt: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let cout = bias.len();
    let mut out = vec![0.0f32; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias);
            for dy in 0..3 {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let xx = x as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let base = (yy as usize * w + xx as usize) * cin;
                    let px = &input[base..base + cin];
                    let wk = &wt[(dy * 3 + dx) * cin * cout..(dy * 3 + dx + 1) * cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &wk[ci * cout..(ci + 1) * cout];
                        for (acc, &wv) in o.iter_mut().zip(row) {
                            *acc += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of a 3x3 convolution and, when
/// `grad_input` is given, the gradient with respect to its input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    wt: &[f32],
    grad_out: &[f32],
    cout: usize,
    grad_wt: Option<(&mut [f32], &mut [f32])>,
    mut grad_input: Option<&mut [f32]>,
) {
    let mut grads = grad_wt;
    for y in 0..h {
        for x in 0..w {
            let g = &grad_out[(y * w + x) * cout..(y * w + x + 1) * cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            if let Some((_, gb)) = grads.as_mut() {
                for (b, &v) in gb.iter_mut().zip(g) {
                    *b += v;
                }
            }
            for dy in 0..3 {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let xx = x as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let base = (yy as usize * w + xx as usize) * cin;
                    let k = (dy * 3 + dx) * cin * cout;
                    if let Some((gw, _)) = grads.as_mut() {
                        let px = &input[base..base + cin];
                        for (ci, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let row = &mut gw[k + ci * cout..k + (ci + 1) * cout];
                            for (acc, &gv) in row.iter_mut().zip(g) {
                                *acc += v * gv;
                            }
                        }
                    }
                    if let Some(gi) = grad_input.as_mut() {
                        for ci in 0..cin {
                            let row = &wt[k + ci * cout..k + (ci + 1) * cout];
                            let s: f32 = row.iter().zip(g).map(|(&a, &b)| a * b).sum();
                            gi[base + ci] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn relu_inplace(v: &mut [f32]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2. Returns pooled values and, per output, the
/// flat input index of the first maximum in (dy, dx) scan order.
pub(crate) fn maxpool2(input: &[f32], h: usize, w: usize, c: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0u32; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best_i = ((2 * y) * w + 2 * x) * c + ch;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                let o = (y * ow + x) * c + ch;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(grad_out: &[f32], arg: &[u32], input_len: usize) -> Vec<f32> {
    let mut g = vec![0.0; input_len];
    for (&go, &i) in grad_out.iter().zip(arg) {
        g[i as usize] += go;
    }
    g
}
