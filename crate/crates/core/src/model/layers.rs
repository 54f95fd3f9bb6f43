//! Conv3x3 (same padding) -> ReLU -> 2x2 average pool blocks on HWC
//! buffers, with the traces needed for backpropagation.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Column layout of the unfolded input: `(ky * 3 + kx) * c_in + ci`.
fn im2col(input: &[f64], h: usize, w: usize, c: usize, cols: &mut [f64]) {
    let row_len = 9 * c;
    cols.fill(0.0);
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
    let row_len = 9 * c;
    out.fill(0.0);
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    for (o, v) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer length matches shape")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer length matches shape")
}

/// Saved activations of one block.
#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    h: usize,
    w: usize,
    cols: Vec<f64>,
    pre: Vec<f64>,
}

/// Block geometry.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub c_in: usize,
    pub c_out: usize,
}

impl Block {
    /// Returns the pooled output (`h/2 x w/2 x c_out`) and, if requested, the
    /// trace for [`Block::backward`].
    pub fn forward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        weight: &[f64],
        bias: &[f64],
        keep: bool,
    ) -> (Vec<f64>, Option<BlockTrace>) {
        let k = 9 * self.c_in;
        let mut cols = vec![0.0; h * w * k];
        im2col(input, h, w, self.c_in, &mut cols);
        let mut pre = vec![0.0; h * w * self.c_out];
        for row in pre.chunks_exact_mut(self.c_out) {
            row.copy_from_slice(bias);
        }
        general_mat_mul(
            1.0,
            &view(&cols, h * w, k),
            &view(weight, self.c_out, k).t(),
            1.0,
            &mut view_mut(&mut pre, h * w, self.c_out),
        );
        let (h2, w2) = (h / 2, w / 2);
        let c = self.c_out;
        let mut out = vec![0.0; h2 * w2 * c];
        for y in 0..h2 {
            for x in 0..w2 {
                let o = &mut out[(y * w2 + x) * c..(y * w2 + x + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((2 * y + dy) * w + 2 * x + dx) * c;
                    for (ov, &pv) in o.iter_mut().zip(&pre[src..src + c]) {
                        *ov += 0.25 * pv.max(0.0);
                    }
                }
            }
        }
        let trace = keep.then_some(BlockTrace { h, w, cols, pre });
        (out, trace)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input` is set.
    pub fn backward(
        &self,
        trace: &BlockTrace,
        d_out: &[f64],
        weight: &[f64],
        d_weight: &mut [f64],
        d_bias: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let (h, w, c) = (trace.h, trace.w, self.c_out);
        let (h2, w2) = (h / 2, w / 2);
        let k = 9 * self.c_in;
        let mut d_pre = vec![0.0; h * w * c];
        for y in 0..h2 {
            for x in 0..w2 {
                let g = &d_out[(y * w2 + x) * c..(y * w2 + x + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let at = ((2 * y + dy) * w + 2 * x + dx) * c;
                    for ch in 0..c {
                        if trace.pre[at + ch] > 0.0 {
                            d_pre[at + ch] = 0.25 * g[ch];
                        }
                    }
                }
            }
        }
        for row in d_pre.chunks_exact(c) {
            for (b, g) in d_bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let d_pre_v = view(&d_pre, h * w, c);
        general_mat_mul(1.0, &d_pre_v.t(), &view(&trace.cols, h * w, k), 1.0, &mut view_mut(d_weight, c, k));
        if !need_input {
            return None;
        }
        let mut d_cols = vec![0.0; h * w * k];
        general_mat_mul(1.0, &d_pre_v, &view(weight, c, k), 0.0, &mut view_mut(&mut d_cols, h * w, k));
        let mut d_in = vec![0.0; h * w * self.c_in];
        col2im(&d_cols, h, w, self.c_in, &mut d_in);
        Some(d_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution oracle.
    fn conv_direct(input: &[f64], h: usize, w: usize, ci: usize, co: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; h * w * co];
        for y in 0..h {
            for x in 0..w {
                for o in 0..co {
                    let mut s = bias[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                s += weight[o * 9 * ci + (ky * 3 + kx) * ci + c]
                                    * input[(sy as usize * w + sx as usize) * ci + c];
                            }
                        }
                    }
                    out[(y * w + x) * co + o] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let (h, w, ci, co) = (6, 4, 2, 3);
        let input: Vec<f64> = (0..h * w * ci).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let weight: Vec<f64> = (0..co * 9 * ci).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let bias = vec![0.1, -0.2, 0.05];
        let block = Block { c_in: ci, c_out: co };
        let (out, trace) = block.forward(&input, h, w, &weight, &bias, true);
        let direct = conv_direct(&input, h, w, ci, co, &weight, &bias);
        let trace = trace.unwrap();
        for (a, b) in trace.pre.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for o in 0..co {
                    let want: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| direct[((2 * y + dy) * w + 2 * x + dx) * co + o].max(0.0))
                        .sum::<f64>()
                        / 4.0;
                    assert!((out[(y * (w / 2) + x) * co + o] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (h, w, c) = (5, 3, 2);
        let x: Vec<f64> = (0..h * w * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..h * w * 9 * c).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, h, w, c, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, h, w, c, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
