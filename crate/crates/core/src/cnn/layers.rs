//! Layer kernels on position-major, channel-minor activations.
//!
//! Convolutions scatter from non-zero input values, which makes the first
//! layer on binary images cheap.

/// Range of kernel taps `t` for which input coordinate `q` lands on a valid
/// output coordinate `q - t + pad`.
#[inline]
fn taps(q: usize, pad: usize, kernel: usize, side: usize) -> std::ops::Range<usize> {
    let lo = (q + pad).saturating_sub(side - 1);
    let hi = (q + pad).min(kernel - 1);
    lo..hi + 1
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Same-padded stride-1 cross-correlation. Weights are `[kz][ky][kx][in][out]`.
pub fn conv_forward(
    x: &[f64],
    side: usize,
    cin: usize,
    w: &[f64],
    bias: &[f64],
    kernel: usize,
    cout: usize,
) -> Vec<f64> {
    match (cin, cout) {
        (1, 8) if is_binary(x) => conv_forward_runs::<8>(x, side, w, bias, kernel),
        (1, 8) => conv_forward_fixed::<1, 8>(x, side, w, bias, kernel),
        (8, 8) => conv_forward_fixed::<8, 8>(x, side, w, bias, kernel),
        _ => conv_forward_dyn(x, side, cin, w, bias, kernel, cout),
    }
}

/// Accumulates weight and bias gradients from the output gradient `dz` and
/// returns the input gradient (empty when `want_dx` is false).
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f64],
    side: usize,
    cin: usize,
    w: &[f64],
    kernel: usize,
    cout: usize,
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    match (cin, cout) {
        (1, 8) if !want_dx && is_binary(x) => {
            conv_backward_runs::<8>(x, side, kernel, dz, dw, db);
            Vec::new()
        }
        (1, 8) => conv_backward_fixed::<1, 8>(x, side, w, kernel, dz, dw, db, want_dx),
        (8, 8) => conv_backward_fixed::<8, 8>(x, side, w, kernel, dz, dw, db, want_dx),
        _ => conv_backward_dyn(x, side, cin, w, kernel, cout, dz, dw, db, want_dx),
    }
}

fn is_binary(x: &[f64]) -> bool {
    x.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Maximal runs of ones along x as `(row, first, last)`, where
/// `row = z·side + y`.
fn runs(x: &[f64], side: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (row, line) in x.chunks_exact(side).enumerate() {
        let mut i = 0;
        while i < side {
            if line[i] == 1.0 {
                let start = i;
                while i < side && line[i] == 1.0 {
                    i += 1;
                }
                out.push((row, start, i - 1));
            } else {
                i += 1;
            }
        }
    }
    out
}

/// Taps `kx` for which an input run `[a, b]` reaches output column `px`.
#[inline]
fn run_taps(a: usize, b: usize, px: usize, pad: usize, kernel: usize) -> Option<(usize, usize)> {
    let lo = (a + pad).saturating_sub(px);
    let hi = (b + pad).checked_sub(px)?.min(kernel - 1);
    (lo <= hi).then_some((lo, hi))
}

// Single-channel 0/1 input: along x the input is a union of runs of ones, so
// each run contributes a contiguous slice of kernel taps to every output
// column. Prefix sums over kx turn that slice into one subtraction.

fn conv_forward_runs<const CO: usize>(x: &[f64], side: usize, w: &[f64], bias: &[f64], kernel: usize) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let (ws, _) = w.as_chunks::<CO>();
    // prefix[(kz·k + ky)·(k+1) + j] = sum of taps kx < j.
    let mut prefix = vec![[0.0; CO]; kernel * kernel * (kernel + 1)];
    for row in 0..kernel * kernel {
        for kx in 0..kernel {
            let mut acc = prefix[row * (kernel + 1) + kx];
            for c in 0..CO {
                acc[c] += ws[row * kernel + kx][c];
            }
            prefix[row * (kernel + 1) + kx + 1] = acc;
        }
    }
    let b: [f64; CO] = bias.try_into().expect("bias length");
    let mut out = vec![b; side * side * side];
    for (row, a, bb) in runs(x, side) {
        let (qz, qy) = (row / side, row % side);
        for kz in taps(qz, pad, kernel, side) {
            let pz = qz + pad - kz;
            for ky in taps(qy, pad, kernel, side) {
                let py = qy + pad - ky;
                let base = (pz * side + py) * side;
                let pre = &prefix[(kz * kernel + ky) * (kernel + 1)..][..kernel + 1];
                for px in 0..side {
                    if let Some((lo, hi)) = run_taps(a, bb, px, pad, kernel) {
                        let o = &mut out[base + px];
                        for c in 0..CO {
                            o[c] += pre[hi + 1][c] - pre[lo][c];
                        }
                    }
                }
            }
        }
    }
    out.into_flattened()
}

fn conv_backward_runs<const CO: usize>(
    x: &[f64],
    side: usize,
    kernel: usize,
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let pad = (kernel - 1) / 2;
    let (gs, _) = dz.as_chunks::<CO>();
    for g in gs {
        for c in 0..CO {
            db[c] += g[c];
        }
    }
    // Difference array over kx; its prefix sums are the weight gradients.
    let mut diff = vec![[0.0; CO]; kernel * kernel * (kernel + 1)];
    for (row, a, bb) in runs(x, side) {
        let (qz, qy) = (row / side, row % side);
        for kz in taps(qz, pad, kernel, side) {
            let pz = qz + pad - kz;
            for ky in taps(qy, pad, kernel, side) {
                let py = qy + pad - ky;
                let base = (pz * side + py) * side;
                let d = &mut diff[(kz * kernel + ky) * (kernel + 1)..][..kernel + 1];
                for px in 0..side {
                    if let Some((lo, hi)) = run_taps(a, bb, px, pad, kernel) {
                        let g = &gs[base + px];
                        for c in 0..CO {
                            d[lo][c] += g[c];
                            d[hi + 1][c] -= g[c];
                        }
                    }
                }
            }
        }
    }
    let (dws, _) = dw.as_chunks_mut::<CO>();
    for row in 0..kernel * kernel {
        let mut acc = [0.0; CO];
        for kx in 0..kernel {
            let d = &diff[row * (kernel + 1) + kx];
            for c in 0..CO {
                acc[c] += d[c];
                dws[row * kernel + kx][c] += acc[c];
            }
        }
    }
}

// Fixed channel counts let the channel loops unroll and vectorize.

fn conv_forward_fixed<const CI: usize, const CO: usize>(
    x: &[f64],
    side: usize,
    w: &[f64],
    bias: &[f64],
    kernel: usize,
) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let (xs, _) = x.as_chunks::<CI>();
    let (ws, _) = w.as_chunks::<CO>();
    let b: [f64; CO] = bias.try_into().expect("bias length");
    let mut out = vec![b; side * side * side];
    for qz in 0..side {
        for qy in 0..side {
            for qx in 0..side {
                let xin = &xs[(qz * side + qy) * side + qx];
                if xin.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for kz in taps(qz, pad, kernel, side) {
                    let pz = qz + pad - kz;
                    for ky in taps(qy, pad, kernel, side) {
                        let row = (pz * side + qy + pad - ky) * side + qx + pad;
                        let tap_row = (kz * kernel + ky) * kernel;
                        for kx in taps(qx, pad, kernel, side) {
                            let o = &mut out[row - kx];
                            let tap = (tap_row + kx) * CI;
                            for (i, &v) in xin.iter().enumerate() {
                                if v != 0.0 {
                                    let wr = &ws[tap + i];
                                    for c in 0..CO {
                                        o[c] += v * wr[c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out.into_flattened()
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_fixed<const CI: usize, const CO: usize>(
    x: &[f64],
    side: usize,
    w: &[f64],
    kernel: usize,
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let n = side * side * side;
    let (xs, _) = x.as_chunks::<CI>();
    let (ws, _) = w.as_chunks::<CO>();
    let (gs, _) = dz.as_chunks::<CO>();
    let (dws, _) = dw.as_chunks_mut::<CO>();
    let live: Vec<bool> = gs.iter().map(|r| r.iter().any(|&v| v != 0.0)).collect();
    for g in gs {
        for c in 0..CO {
            db[c] += g[c];
        }
    }
    let mut dx = if want_dx { vec![[0.0; CI]; n] } else { Vec::new() };
    for qz in 0..side {
        for qy in 0..side {
            for qx in 0..side {
                let q = (qz * side + qy) * side + qx;
                let xin = &xs[q];
                let active = xin.iter().any(|&v| v != 0.0);
                if !want_dx && !active {
                    continue;
                }
                let mut acc = [0.0; CI];
                for kz in taps(qz, pad, kernel, side) {
                    let pz = qz + pad - kz;
                    for ky in taps(qy, pad, kernel, side) {
                        let row = (pz * side + qy + pad - ky) * side + qx + pad;
                        let tap_row = (kz * kernel + ky) * kernel;
                        for kx in taps(qx, pad, kernel, side) {
                            let p = row - kx;
                            if !live[p] {
                                continue;
                            }
                            let g = &gs[p];
                            let tap = (tap_row + kx) * CI;
                            for i in 0..CI {
                                let v = xin[i];
                                if v != 0.0 {
                                    let d = &mut dws[tap + i];
                                    for c in 0..CO {
                                        d[c] += v * g[c];
                                    }
                                }
                                if want_dx {
                                    let wr = &ws[tap + i];
                                    let mut s = 0.0;
                                    for c in 0..CO {
                                        s += wr[c] * g[c];
                                    }
                                    acc[i] += s;
                                }
                            }
                        }
                    }
                }
                if want_dx {
                    dx[q] = acc;
                }
            }
        }
    }
    dx.into_flattened()
}

fn conv_forward_dyn(
    x: &[f64],
    side: usize,
    cin: usize,
    w: &[f64],
    bias: &[f64],
    kernel: usize,
    cout: usize,
) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let n = side * side * side;
    let mut out = Vec::with_capacity(n * cout);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    for qz in 0..side {
        for qy in 0..side {
            for qx in 0..side {
                let q = (qz * side + qy) * side + qx;
                let xin = &x[q * cin..(q + 1) * cin];
                if xin.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for kz in taps(qz, pad, kernel, side) {
                    let pz = qz + pad - kz;
                    for ky in taps(qy, pad, kernel, side) {
                        let py = qy + pad - ky;
                        for kx in taps(qx, pad, kernel, side) {
                            let px = qx + pad - kx;
                            let p = (pz * side + py) * side + px;
                            let tap = ((kz * kernel + ky) * kernel + kx) * cin;
                            let o = &mut out[p * cout..(p + 1) * cout];
                            for (i, &v) in xin.iter().enumerate() {
                                if v != 0.0 {
                                    axpy(o, v, &w[(tap + i) * cout..(tap + i + 1) * cout]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_dyn(
    x: &[f64],
    side: usize,
    cin: usize,
    w: &[f64],
    kernel: usize,
    cout: usize,
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let n = side * side * side;
    let live: Vec<bool> = dz.chunks_exact(cout).map(|r| r.iter().any(|&v| v != 0.0)).collect();
    for row in dz.chunks_exact(cout) {
        axpy(db, 1.0, row);
    }
    let mut dx = if want_dx { vec![0.0; n * cin] } else { Vec::new() };
    for qz in 0..side {
        for qy in 0..side {
            for qx in 0..side {
                let q = (qz * side + qy) * side + qx;
                let xin = &x[q * cin..(q + 1) * cin];
                if !want_dx && xin.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for kz in taps(qz, pad, kernel, side) {
                    let pz = qz + pad - kz;
                    for ky in taps(qy, pad, kernel, side) {
                        let py = qy + pad - ky;
                        for kx in taps(qx, pad, kernel, side) {
                            let px = qx + pad - kx;
                            let p = (pz * side + py) * side + px;
                            if !live[p] {
                                continue;
                            }
                            let g = &dz[p * cout..(p + 1) * cout];
                            let tap = ((kz * kernel + ky) * kernel + kx) * cin;
                            for (i, &v) in xin.iter().enumerate() {
                                let r = (tap + i) * cout..(tap + i + 1) * cout;
                                if v != 0.0 {
                                    axpy(&mut dw[r.clone()], v, g);
                                }
                                if want_dx {
                                    dx[q * cin + i] += dot(&w[r], g);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2×2×2 average pooling with stride 2; `side` is the input side.
pub fn pool_forward(x: &[f64], side: usize, c: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; half * half * half * c];
    for z in 0..side {
        for y in 0..side {
            for xx in 0..side {
                let q = (z * side + y) * side + xx;
                let p = ((z / 2) * half + y / 2) * half + xx / 2;
                axpy(&mut out[p * c..(p + 1) * c], 0.125, &x[q * c..(q + 1) * c]);
            }
        }
    }
    out
}

pub fn pool_backward(dout: &[f64], side: usize, c: usize) -> Vec<f64> {
    let half = side / 2;
    let mut dx = vec![0.0; side * side * side * c];
    for z in 0..side {
        for y in 0..side {
            for xx in 0..side {
                let q = (z * side + y) * side + xx;
                let p = ((z / 2) * half + y / 2) * half + xx / 2;
                axpy(&mut dx[q * c..(q + 1) * c], 0.125, &dout[p * c..(p + 1) * c]);
            }
        }
    }
    dx
}

/// `w` is `[class][feature]`.
pub fn dense_forward(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(j, &bj)| bj + dot(&w[j * x.len()..(j + 1) * x.len()], x))
        .collect()
}

pub fn dense_backward(x: &[f64], w: &[f64], dout: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let f = x.len();
    let mut dx = vec![0.0; f];
    for (j, &g) in dout.iter().enumerate() {
        db[j] += g;
        axpy(&mut dw[j * f..(j + 1) * f], g, x);
        axpy(&mut dx, g, &w[j * f..(j + 1) * f]);
    }
    dx
}
