//! Spatial operations on `B×C×H×W` inputs: same-padded stride-1 convolution
//! (via im2col), 2×2 max pooling and global average pooling.

use super::array::Array;
use super::graph::{Backward, GradAcc, Graph, Var};
use super::ops::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one sample (`C×H×W`) into a `(C·k·k) × (H·W)` patch matrix.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let pad = (g.k / 2) as isize;
    let plane = g.plane();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for i in 0..g.h {
                    let si = i as isize + ki as isize - pad;
                    for j in 0..g.w {
                        let sj = j as isize + kj as isize - pad;
                        dst[i * g.w + j] = if si >= 0
                            && sj >= 0
                            && (si as usize) < g.h
                            && (sj as usize) < g.w
                        {
                            x[(c * g.h + si as usize) * g.w + sj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the image.
fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let pad = (g.k / 2) as isize;
    let plane = g.plane();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for i in 0..g.h {
                    let si = i as isize + ki as isize - pad;
                    if si < 0 || si as usize >= g.h {
                        continue;
                    }
                    for j in 0..g.w {
                        let sj = j as isize + kj as isize - pad;
                        if sj < 0 || sj as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + si as usize) * g.w + sj as usize] += src[i * g.w + j];
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    geo: Geometry,
    cols: Vec<f64>,
}

impl Backward for Conv2dOp {
    fn backward(&self, grad: &[f64], values: &[Array], acc: &mut GradAcc<'_>) {
        let g = self.geo;
        let (patch, plane) = (g.patch(), g.plane());
        let out_len = g.c_out * plane;
        if let Some(dw) = acc.slot(self.w) {
            for s in 0..g.batch {
                let dy = &grad[s * out_len..(s + 1) * out_len];
                let cols = &self.cols[s * patch * plane..(s + 1) * patch * plane];
                // dW[oc][p] += Σ_pix dy[oc][pix] · cols[p][pix]
                matmul_a_bt_acc(dy, cols, g.c_out, plane, patch, dw);
            }
        }
        if let Some(bias) = self.b {
            if let Some(db) = acc.slot(bias) {
                for s in 0..g.batch {
                    for (oc, d) in db.iter_mut().enumerate() {
                        let start = s * out_len + oc * plane;
                        *d += grad[start..start + plane].iter().sum::<f64>();
                    }
                }
            }
        }
        if let Some(dx) = acc.slot(self.x) {
            let w = values[self.w.0].data();
            let in_len = g.c_in * plane;
            let mut dcols = vec![0.0; patch * plane];
            for s in 0..g.batch {
                dcols.fill(0.0);
                let dy = &grad[s * out_len..(s + 1) * out_len];
                // dcols = Wᵀ · dy with W stored as c_out × patch.
                matmul_at_b_acc(w, dy, g.c_out, patch, plane, &mut dcols);
                col2im(&dcols, &g, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
    }
}

struct MaxPoolOp {
    x: Var,
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        if let Some(dx) = acc.slot(self.x) {
            for (g, &src) in grad.iter().zip(&self.argmax) {
                dx[src] += g;
            }
        }
    }
}

struct AvgPoolOp {
    x: Var,
    plane: usize,
}

impl Backward for AvgPoolOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        let scale = 1.0 / self.plane as f64;
        if let Some(dx) = acc.slot(self.x) {
            for (chunk, g) in dx.chunks_mut(self.plane).zip(grad) {
                chunk.iter_mut().for_each(|d| *d += g * scale);
            }
        }
    }
}

fn image_dims(op: &'static str, a: &Array) -> Result<[usize; 4]> {
    match *a.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::dim(op, format!("expected B×C×H×W, got {:?}", a.shape()))),
    }
}

impl Graph {
    /// Stride-1 convolution with zero padding `k/2`, so odd kernels keep the
    /// spatial size. `w` has shape `C_out×C_in×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, c_in, h, wd] = image_dims("conv2d", self.value(x))?;
        let [c_out, wc_in, k, k2] = image_dims("conv2d", self.value(w))?;
        if wc_in != c_in || k != k2 || k % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input {:?} incompatible with kernel {:?}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {c_out} output channels", self.shape(b)),
                ));
            }
        }
        let geo = Geometry {
            batch,
            c_in,
            c_out,
            h,
            w: wd,
            k,
        };
        let (patch, plane) = (geo.patch(), geo.plane());
        let mut cols = vec![0.0; batch * patch * plane];
        let mut out = vec![0.0; batch * c_out * plane];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            for s in 0..batch {
                let col = &mut cols[s * patch * plane..(s + 1) * patch * plane];
                im2col(&xs[s * c_in * plane..(s + 1) * c_in * plane], &geo, col);
                let o = &mut out[s * c_out * plane..(s + 1) * c_out * plane];
                if let Some(bias) = bias {
                    for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                        chunk.fill(bias[oc]);
                    }
                }
                matmul_acc(ws, col, c_out, patch, plane, o);
            }
        }
        let value = Array::new(vec![batch, c_out, h, wd], out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(value, &inputs, Conv2dOp { x, w, b, geo, cols }))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties resolve to the first element in row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [batch, c, h, w] = image_dims("max_pool2", self.value(x))?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dim(
                "max_pool2",
                format!("spatial size {h}×{w} too small to pool"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..batch * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Array::new(vec![batch, c, oh, ow], out)?;
        Ok(self.push(value, &[x], MaxPoolOp { x, argmax }))
    }

    /// Mean over the spatial axes: `B×C×H×W → B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [batch, c, h, w] = image_dims("global_avg_pool", self.value(x))?;
        let plane = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Array::new(vec![batch, c], out)?;
        Ok(self.push(value, &[x], AvgPoolOp { x, plane }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop reference convolution.
    fn naive_conv(x: &Array, w: &Array, b: &[f64]) -> Vec<f64> {
        let [bs, ci, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let [co, _, k, _] = <[usize; 4]>::try_from(w.shape()).unwrap();
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; bs * co * h * wd];
        for s in 0..bs {
            for o in 0..co {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let si = i as isize + ki as isize - pad;
                                    let sj = j as isize + kj as isize - pad;
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ci + c) * k + ki) * k + kj]
                                        * x.data()[((s * ci + c) * h + si as usize) * wd + sj as usize];
                                }
                            }
                        }
                        out[((s * co + o) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], step: f64) -> Array {
        let n: usize = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) * step).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = ramp(&[2, 2, 4, 5], 0.3);
        let w = ramp(&[3, 2, 3, 3], 0.1);
        let b = vec![0.1, -0.2, 0.3];
        let expected = naive_conv(&x, &w, &b);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let bv = g.constant(Array::vector(b));
        let y = g.conv2d(xv, wv, Some(bv)).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 4, 5]);
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let x = ramp(&[1, 1, 3, 3], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(Array::filled(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(xv, wv, None).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn max_pool_picks_window_maximum_and_routes_gradient() {
        let x = Array::new(
            vec![1, 1, 2, 4],
            vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = g.max_pool2(xv).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(
            g.grad(xv).unwrap(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn global_average_of_constant_plane() {
        let mut g = Graph::new();
        let xv = g.input(Array::filled(&[2, 3, 4, 4], 0.75));
        let y = g.global_avg_pool(xv).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn rejects_mismatched_channels() {
        let mut g = Graph::new();
        let xv = g.constant(Array::zeros(&[1, 2, 4, 4]));
        let wv = g.constant(Array::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(xv, wv, None), Err(Error::Dimension { .. })));
    }
}
