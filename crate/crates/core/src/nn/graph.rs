//! Reverse-mode differentiation over a recorded tape of NHWC ops.
//!
//! A [`Graph`] borrows an immutable [`ParamSet`], records every op it
//! evaluates, and [`Graph::backward`] walks the tape in reverse to produce a
//! fresh [`Gradients`] value. Parameters are never mutated here, so several
//! graphs may share one parameter snapshot.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::tensor::{Shape, Tensor};
use super::NnError;
use crate::real::{Layout, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<T>,
}

/// Flat list of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: String, dims: Vec<usize>, value: Vec<T>) -> ParamId {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.params.push(Param { name, dims, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// A convolution (or transposed convolution) bound to its parameters.
///
/// Weight layouts: convolution `[k, k, in, out]`, transposed convolution
/// `[in, k, k, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Conv { input: Var, conv: Conv },
    ConvTranspose { input: Var, conv: Conv },
    LeakyRelu { input: Var, slope: T },
    Add(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Window geometry shared by `im2col` and `col2im`. `h`, `w`, `c` describe
/// the spatially larger side, `oh`, `ow` the side with one row per site.
#[derive(Debug, Clone, Copy)]
struct Window {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn row_len(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Source coordinate for output position `o` and kernel tap `t`.
    #[inline]
    fn source(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let x = (o * self.s + t) as isize - self.p as isize;
        (x >= 0 && (x as usize) < limit).then_some(x as usize)
    }
}

/// Target element count of one block of im2col columns. Unit tests use a
/// tiny value so that every op runs over several blocks.
const BLOCK_ELEMS: usize = if cfg!(test) { 64 } else { 1 << 16 };

/// Scratch rows per block.
fn block_rows(row_len: usize) -> usize {
    (BLOCK_ELEMS / row_len.max(1)).max(1)
}

fn blocks(rows: usize, row_len: usize) -> impl Iterator<Item = Range<usize>> {
    let step = block_rows(row_len);
    (0..rows).step_by(step).map(move |s| s..(s + step).min(rows))
}

impl Window {
    /// Batch index and output coordinates of row `r`.
    #[inline]
    fn site(&self, r: usize) -> (usize, usize, usize) {
        let per_image = self.oh * self.ow;
        (r / per_image, (r % per_image) / self.ow, r % self.ow)
    }
}

/// Gathers the receptive fields of `rows` into `dst`, one row per site.
fn im2col<T: Real>(src: &[T], g: &Window, rows: Range<usize>, dst: &mut [T]) {
    let row_len = g.row_len();
    for (r, row) in rows.zip(dst.chunks_exact_mut(row_len)) {
        let (b, oy, ox) = g.site(r);
        for ky in 0..g.k {
            let Some(iy) = g.source(oy, ky, g.h) else {
                row[ky * g.k * g.c..(ky + 1) * g.k * g.c].fill(T::zero());
                continue;
            };
            for kx in 0..g.k {
                let to = (ky * g.k + kx) * g.c;
                match g.source(ox, kx, g.w) {
                    Some(ix) => {
                        let from = ((b * g.h + iy) * g.w + ix) * g.c;
                        row[to..to + g.c].copy_from_slice(&src[from..from + g.c]);
                    }
                    None => row[to..to + g.c].fill(T::zero()),
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds every row back to its source sites.
fn col2im<T: Real>(cols: &[T], g: &Window, rows: Range<usize>, dst: &mut [T]) {
    let row_len = g.row_len();
    for (r, row) in rows.zip(cols.chunks_exact(row_len)) {
        let (b, oy, ox) = g.site(r);
        for ky in 0..g.k {
            let Some(iy) = g.source(oy, ky, g.h) else { continue };
            for kx in 0..g.k {
                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                let to = ((b * g.h + iy) * g.w + ix) * g.c;
                let from = (ky * g.k + kx) * g.c;
                for (d, &s) in dst[to..to + g.c].iter_mut().zip(&row[from..from + g.c]) {
                    *d = *d + s;
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

fn accumulate_bias_grad<T: Real>(grad_out: &[T], dbias: &mut [T]) {
    for row in grad_out.chunks_exact(dbias.len()) {
        for (d, &g) in dbias.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
}

fn conv_window(conv: &Conv, input: Shape) -> Result<Window, NnError> {
    if input.c != conv.in_channels {
        return Err(NnError::ChannelMismatch {
            expected: conv.in_channels,
            actual: input.c,
        });
    }
    let span = |x: usize| x + 2 * conv.padding;
    if span(input.h) < conv.kernel || span(input.w) < conv.kernel {
        return Err(NnError::InputTooSmall {
            shape: input,
            kernel: conv.kernel,
        });
    }
    Ok(Window {
        n: input.n,
        h: input.h,
        w: input.w,
        c: conv.in_channels,
        k: conv.kernel,
        s: conv.stride,
        p: conv.padding,
        oh: (span(input.h) - conv.kernel) / conv.stride + 1,
        ow: (span(input.w) - conv.kernel) / conv.stride + 1,
    })
}

fn transpose_window(conv: &Conv, input: Shape) -> Result<Window, NnError> {
    if input.c != conv.in_channels {
        return Err(NnError::ChannelMismatch {
            expected: conv.in_channels,
            actual: input.c,
        });
    }
    let grow = |x: usize| ((x.max(1) - 1) * conv.stride + conv.kernel).checked_sub(2 * conv.padding);
    match (grow(input.h), grow(input.w)) {
        (Some(h), Some(w)) if h > 0 && w > 0 && input.h > 0 && input.w > 0 => Ok(Window {
            n: input.n,
            h,
            w,
            c: conv.out_channels,
            k: conv.kernel,
            s: conv.stride,
            p: conv.padding,
            oh: input.h,
            ow: input.w,
        }),
        _ => Err(NnError::InputTooSmall {
            shape: input,
            kernel: conv.kernel,
        }),
    }
}

/// Recorded forward computation.
pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    pub fn conv2d(&mut self, x: Var, conv: &Conv) -> Result<Var, NnError> {
        let input = self.value(x);
        let g = conv_window(conv, input.shape())?;
        let weight = &self.params.get(conv.weight).value;
        let rows = g.rows();
        let (row_len, cout) = (g.row_len(), conv.out_channels);
        let mut out = vec![T::zero(); rows * cout];
        if conv.pointwise() {
            T::gemm(rows, row_len, cout, input.data(), Layout::Normal, weight, Layout::Normal, &mut out, false);
        } else {
            let mut cols = vec![T::zero(); block_rows(row_len).min(rows) * row_len];
            for blk in blocks(rows, row_len) {
                let (start, len) = (blk.start, blk.len());
                im2col(input.data(), &g, blk, &mut cols);
                T::gemm(
                    len,
                    row_len,
                    cout,
                    &cols,
                    Layout::Normal,
                    weight,
                    Layout::Normal,
                    &mut out[start * cout..],
                    false,
                );
            }
        }
        if let Some(b) = conv.bias {
            add_bias(&mut out, &self.params.get(b).value);
        }
        let shape = Shape::new(g.n, g.oh, g.ow, conv.out_channels);
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::Conv { input: x, conv: *conv }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, conv: &Conv) -> Result<Var, NnError> {
        let input = self.value(x);
        let g = transpose_window(conv, input.shape())?;
        let weight = &self.params.get(conv.weight).value;
        let rows = g.rows();
        let (row_len, cin) = (g.row_len(), conv.in_channels);
        let shape = Shape::new(g.n, g.h, g.w, conv.out_channels);
        let mut out = vec![T::zero(); shape.numel()];
        let mut cols = vec![T::zero(); block_rows(row_len).min(rows) * row_len];
        for blk in blocks(rows, row_len) {
            let (start, len) = (blk.start, blk.len());
            T::gemm(
                len,
                cin,
                row_len,
                &input.data()[start * cin..],
                Layout::Normal,
                weight,
                Layout::Normal,
                &mut cols,
                false,
            );
            col2im(&cols, &g, blk, &mut out);
        }
        if let Some(b) = conv.bias {
            add_bias(&mut out, &self.params.get(b).value);
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::ConvTranspose { input: x, conv: *conv }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let input = self.value(x);
        let data = input
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let value = Tensor::from_vec(input.shape(), data).expect("shape preserved");
        self.push(value, Op::LeakyRelu { input: x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NnError::ShapeMismatch {
                expected: va.shape().numel(),
                actual: vb.shape().numel(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Back-propagates `seed` (the gradient of some scalar with respect to
    /// `root`) through the tape.
    pub fn backward(&self, root: Var, seed: &Tensor<T>) -> Result<Gradients<T>, NnError> {
        if seed.shape() != self.value(root).shape() {
            return Err(NnError::ShapeMismatch {
                expected: self.value(root).shape().numel(),
                actual: seed.shape().numel(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed.data().to_vec());
        let mut params: Vec<Vec<T>> = self
            .params
            .iter()
            .map(|p| vec![T::zero(); p.value.len()])
            .collect();
        let mut inputs = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => inputs.push((Var(idx), Tensor::from_vec(node.value.shape(), g)?)),
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input).data();
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { g * *slope })
                        .collect();
                    accumulate(&mut grads[input.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Conv { input, conv } => {
                    let x = self.value(*input);
                    let win = conv_window(conv, x.shape())?;
                    let (rows, row_len) = (win.rows(), win.row_len());
                    let cout = conv.out_channels;
                    let weight = &self.params.get(conv.weight).value;
                    if let Some(b) = conv.bias {
                        accumulate_bias_grad(&g, &mut params[b.0]);
                    }
                    let dx = if conv.pointwise() {
                        T::gemm(
                            row_len,
                            rows,
                            cout,
                            x.data(),
                            Layout::Transposed,
                            &g,
                            Layout::Normal,
                            &mut params[conv.weight.0],
                            true,
                        );
                        let mut dx = vec![T::zero(); rows * row_len];
                        T::gemm(rows, cout, row_len, &g, Layout::Normal, weight, Layout::Transposed, &mut dx, false);
                        dx
                    } else {
                        let mut dx = vec![T::zero(); x.shape().numel()];
                        let scratch = block_rows(row_len).min(rows) * row_len;
                        let (mut cols, mut dcols) = (vec![T::zero(); scratch], vec![T::zero(); scratch]);
                        for blk in blocks(rows, row_len) {
                            let (start, len) = (blk.start, blk.len());
                            let g_blk = &g[start * cout..(start + len) * cout];
                            im2col(x.data(), &win, blk.clone(), &mut cols);
                            T::gemm(
                                row_len,
                                len,
                                cout,
                                &cols,
                                Layout::Transposed,
                                g_blk,
                                Layout::Normal,
                                &mut params[conv.weight.0],
                                true,
                            );
                            T::gemm(len, cout, row_len, g_blk, Layout::Normal, weight, Layout::Transposed, &mut dcols, false);
                            col2im(&dcols, &win, blk, &mut dx);
                        }
                        dx
                    };
                    accumulate(&mut grads[input.0], dx);
                }
                Op::ConvTranspose { input, conv } => {
                    let x = self.value(*input);
                    let win = transpose_window(conv, x.shape())?;
                    let (rows, row_len) = (win.rows(), win.row_len());
                    let cin = conv.in_channels;
                    if let Some(b) = conv.bias {
                        accumulate_bias_grad(&g, &mut params[b.0]);
                    }
                    let weight = &self.params.get(conv.weight).value;
                    let mut dx = vec![T::zero(); x.shape().numel()];
                    let mut gcols = vec![T::zero(); block_rows(row_len).min(rows) * row_len];
                    for blk in blocks(rows, row_len) {
                        let (start, len) = (blk.start, blk.len());
                        im2col(&g, &win, blk, &mut gcols);
                        T::gemm(
                            cin,
                            len,
                            row_len,
                            &x.data()[start * cin..(start + len) * cin],
                            Layout::Transposed,
                            &gcols,
                            Layout::Normal,
                            &mut params[conv.weight.0],
                            true,
                        );
                        T::gemm(
                            len,
                            row_len,
                            cin,
                            &gcols,
                            Layout::Normal,
                            weight,
                            Layout::Transposed,
                            &mut dx[start * cin..],
                            false,
                        );
                    }
                    accumulate(&mut grads[input.0], dx);
                }
            }
        }
        Ok(Gradients { inputs, params })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    inputs: Vec<(Var, Tensor<T>)>,
    params: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a graph input, if the root depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(var, _)| *var == v).map(|(_, t)| t)
    }

    pub fn take_wrt(&mut self, v: Var) -> Option<Tensor<T>> {
        let pos = self.inputs.iter().position(|(var, _)| *var == v)?;
        Some(self.inputs.swap_remove(pos).1)
    }

    /// Parameter gradients, indexed like the graph's [`ParamSet`].
    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &[T] {
        &self.params[id.0]
    }

    /// Adds another gradient set over the same parameters into this one.
    pub fn merge_params(&mut self, other: &Gradients<T>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn conv_params(k: usize, cin: usize, cout: usize, transpose: bool) -> (ParamSet<f64>, Conv) {
        let mut ps = ParamSet::new();
        let n = k * k * cin * cout;
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let dims = if transpose {
            vec![cin, k, k, cout]
        } else {
            vec![k, k, cin, cout]
        };
        let weight = ps.push("w".to_string(), dims, w);
        let bias = ps.push("b".to_string(), vec![cout], (0..cout).map(|i| i as f64 * 0.3).collect());
        (
            ps,
            Conv {
                weight,
                bias: Some(bias),
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: 2,
                padding: 1,
            },
        )
    }

    /// Direct nested-loop convolution, NHWC.
    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], c: &Conv) -> Tensor<f64> {
        let s = x.shape();
        let oh = (s.h + 2 * c.padding - c.kernel) / c.stride + 1;
        let ow = (s.w + 2 * c.padding - c.kernel) / c.stride + 1;
        let mut out = Tensor::zeros(Shape::new(s.n, oh, ow, c.out_channels));
        for n in 0..s.n {
            for y in 0..oh {
                for xx in 0..ow {
                    for co in 0..c.out_channels {
                        let mut acc = b[co];
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let iy = (y * c.stride + ky) as isize - c.padding as isize;
                                let ix = (xx * c.stride + kx) as isize - c.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                for ci in 0..c.in_channels {
                                    let xv = x.data()[((n * s.h + iy as usize) * s.w + ix as usize) * s.c + ci];
                                    let wv = w[((ky * c.kernel + kx) * c.in_channels + ci) * c.out_channels + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * oh + y) * ow + xx) * c.out_channels + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: Shape) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|i| ((i * 13 % 17) as f64 - 8.0) * 0.05).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let (ps, conv) = conv_params(4, 3, 2, false);
        let x = ramp(Shape::new(2, 6, 6, 3));
        let mut g = Graph::new(&ps);
        let v = g.input(x.clone());
        let y = g.conv2d(v, &conv).unwrap();
        let want = naive_conv(&x, &ps.get(conv.weight).value, &ps.get(conv.bias.unwrap()).value, &conv);
        assert_eq!(g.value(y).shape(), Shape::new(2, 3, 3, 2));
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for shared weights and no bias.
        let (mut ps, mut conv) = conv_params(4, 3, 2, false);
        conv.bias = None;
        let w = ps.get(conv.weight).value.clone();
        // convT maps 2 -> 3 channels with weight [in=2, k, k, out=3]
        let mut wt = vec![0.0; w.len()];
        for ky in 0..4 {
            for kx in 0..4 {
                for ci in 0..3 {
                    for co in 0..2 {
                        wt[((co * 4 + ky) * 4 + kx) * 3 + ci] = w[((ky * 4 + kx) * 3 + ci) * 2 + co];
                    }
                }
            }
        }
        let wt_id = ps.push("wt".to_string(), vec![2, 4, 4, 3], wt);
        let tconv = Conv {
            weight: wt_id,
            bias: None,
            in_channels: 2,
            out_channels: 3,
            ..conv
        };
        let x = ramp(Shape::new(1, 6, 6, 3));
        let y = ramp(Shape::new(1, 3, 3, 2));
        let mut g = Graph::new(&ps);
        let vx = g.input(x.clone());
        let vy = g.input(y.clone());
        let cx = g.conv2d(vx, &conv).unwrap();
        let ty = g.conv_transpose2d(vy, &tconv).unwrap();
        assert_eq!(g.value(ty).shape(), Shape::new(1, 6, 6, 3));
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (ps, conv) = conv_params(4, 2, 3, false);
        let (ps_t, tconv) = conv_params(4, 3, 2, true);
        let x = ramp(Shape::new(1, 4, 4, 2));
        // loss = sum(w_i * y_i) so the seed is a fixed weight tensor
        let forward = |ps: &ParamSet<f64>, ps_t: &ParamSet<f64>, x: &Tensor<f64>| -> f64 {
            let mut g = Graph::new(ps);
            let v = g.input(x.clone());
            let h = g.conv2d(v, &conv).unwrap();
            let h = g.leaky_relu(h, 0.1);
            let h2 = g.relu(h);
            let h = g.add(h, h2).unwrap();
            let t = g.value(h).clone();
            let mut g2 = Graph::new(ps_t);
            let v2 = g2.input(t);
            let y = g2.conv_transpose2d(v2, &tconv).unwrap();
            g2.value(y).data().iter().enumerate().map(|(i, v)| v * (i as f64 * 0.01 - 0.2)).sum()
        };

        let mut g = Graph::new(&ps);
        let v = g.input(x.clone());
        let h = g.conv2d(v, &conv).unwrap();
        let h = g.leaky_relu(h, 0.1);
        let h2 = g.relu(h);
        let h = g.add(h, h2).unwrap();
        let mut g2 = Graph::new(&ps_t);
        let v2 = g2.input(g.value(h).clone());
        let y = g2.conv_transpose2d(v2, &tconv).unwrap();
        let seed_data = (0..g2.value(y).shape().numel()).map(|i| i as f64 * 0.01 - 0.2).collect();
        let seed = Tensor::from_vec(g2.value(y).shape(), seed_data).unwrap();
        let grads2 = g2.backward(y, &seed).unwrap();
        let grads = g.backward(h, grads2.wrt(v2).unwrap()).unwrap();

        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * eps);
            assert!((analytic - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{analytic} vs {fd}");
        };
        for i in 0..x.data().len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            check(grads.wrt(v).unwrap().data()[i], forward(&ps, &ps_t, &xp), forward(&ps, &ps_t, &xm));
        }
        for id in [conv.weight, conv.bias.unwrap()] {
            for i in 0..ps.get(id).value.len() {
                let (mut pp, mut pm) = (ps.clone(), ps.clone());
                pp.get_mut(id).value[i] += eps;
                pm.get_mut(id).value[i] -= eps;
                check(grads.param(id)[i], forward(&pp, &ps_t, &x), forward(&pm, &ps_t, &x));
            }
        }
        for id in [tconv.weight, tconv.bias.unwrap()] {
            for i in 0..ps_t.get(id).value.len() {
                let (mut pp, mut pm) = (ps_t.clone(), ps_t.clone());
                pp.get_mut(id).value[i] += eps;
                pm.get_mut(id).value[i] -= eps;
                check(grads2.param(id)[i], forward(&ps, &pp, &x), forward(&ps, &pm, &x));
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (ps, conv) = conv_params(3, 2, 2, false);
        let mut g = Graph::new(&ps);
        let v = g.input(Tensor::zeros(Shape::new(1, 4, 4, 3)));
        assert!(matches!(g.conv2d(v, &conv), Err(NnError::ChannelMismatch { .. })));
    }
}
