//! Dense linear algebra, elementwise maps, reshaping, softmax and the
//! class-weighted cross-entropy.

use super::array::Array;
use super::graph::{Backward, GradAcc, Graph, Var};
use crate::error::{Error, Result};

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` with `a` stored as `k×m` and `b` as `k×n`.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` with `a` stored as `m×k` and `b` as `n×k`.
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn matrix_dims(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    match *a.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got shape {:?}", a.shape()))),
    }
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    n_in: usize,
    n_out: usize,
    fault: bool,
}

impl Backward for LinearOp {
    fn backward(&self, grad: &[f64], values: &[Array], acc: &mut GradAcc<'_>) {
        let (b, n, m) = (self.rows, self.n_in, self.n_out);
        if let Some(dx) = acc.slot(self.x) {
            matmul_a_bt_acc(grad, values[self.w.0].data(), b, m, n, dx);
        }
        if let Some(dw) = acc.slot(self.w) {
            let scale = if self.fault { 2.0 } else { 1.0 };
            if scale == 1.0 {
                matmul_at_b_acc(values[self.x.0].data(), grad, b, n, m, dw);
            } else {
                let mut tmp = vec![0.0; n * m];
                matmul_at_b_acc(values[self.x.0].data(), grad, b, n, m, &mut tmp);
                dw.iter_mut().zip(tmp).for_each(|(d, t)| *d += scale * t);
            }
        }
        if let Some(bias) = self.b {
            if let Some(db) = acc.slot(bias) {
                for row in grad.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
    }
}

struct AddOp(Var, Var);

impl Backward for AddOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        for v in [self.0, self.1] {
            if let Some(d) = acc.slot(v) {
                d.iter_mut().zip(grad).for_each(|(d, g)| *d += g);
            }
        }
    }
}

struct MulOp(Var, Var);

impl Backward for MulOp {
    fn backward(&self, grad: &[f64], values: &[Array], acc: &mut GradAcc<'_>) {
        let (a, b) = (values[self.0 .0].data(), values[self.1 .0].data());
        if let Some(d) = acc.slot(self.0) {
            for ((d, g), bv) in d.iter_mut().zip(grad).zip(b) {
                *d += g * bv;
            }
        }
        if let Some(d) = acc.slot(self.1) {
            for ((d, g), av) in d.iter_mut().zip(grad).zip(a) {
                *d += g * av;
            }
        }
    }
}

struct ScaleOp(Var, f64);

impl Backward for ScaleOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        if let Some(d) = acc.slot(self.0) {
            d.iter_mut().zip(grad).for_each(|(d, g)| *d += self.1 * g);
        }
    }
}

struct ReluOp(Var);

impl Backward for ReluOp {
    fn backward(&self, grad: &[f64], values: &[Array], acc: &mut GradAcc<'_>) {
        let x = values[self.0 .0].data();
        if let Some(d) = acc.slot(self.0) {
            for ((d, g), xv) in d.iter_mut().zip(grad).zip(x) {
                if *xv > 0.0 {
                    *d += g;
                }
            }
        }
    }
}

struct SumOp(Var, f64);

impl Backward for SumOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        let g = grad[0] * self.1;
        if let Some(d) = acc.slot(self.0) {
            d.iter_mut().for_each(|d| *d += g);
        }
    }
}

struct ReshapeOp(Var);

impl Backward for ReshapeOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        if let Some(d) = acc.slot(self.0) {
            d.iter_mut().zip(grad).for_each(|(d, g)| *d += g);
        }
    }
}

struct ConcatOp {
    a: Var,
    b: Var,
    p: usize,
    q: usize,
}

impl Backward for ConcatOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        let w = self.p + self.q;
        if let Some(da) = acc.slot(self.a) {
            for (row, d) in grad.chunks(w).zip(da.chunks_mut(self.p.max(1))) {
                d.iter_mut().zip(&row[..self.p]).for_each(|(d, g)| *d += g);
            }
        }
        if let Some(db) = acc.slot(self.b) {
            for (row, d) in grad.chunks(w).zip(db.chunks_mut(self.q.max(1))) {
                d.iter_mut().zip(&row[self.p..]).for_each(|(d, g)| *d += g);
            }
        }
    }
}

struct SliceOp {
    x: Var,
    width: usize,
    start: usize,
    end: usize,
}

impl Backward for SliceOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        let part = self.end - self.start;
        if let Some(dx) = acc.slot(self.x) {
            for (row, g) in dx.chunks_mut(self.width).zip(grad.chunks(part)) {
                row[self.start..self.end]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g);
            }
        }
    }
}

struct SoftmaxOp {
    x: Var,
    out: Vec<f64>,
    width: usize,
}

impl Backward for SoftmaxOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        if let Some(dx) = acc.slot(self.x) {
            for ((d, g), y) in dx
                .chunks_mut(self.width)
                .zip(grad.chunks(self.width))
                .zip(self.out.chunks(self.width))
            {
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                for j in 0..self.width {
                    d[j] += y[j] * (g[j] - dot);
                }
            }
        }
    }
}

struct WeightedCeOp {
    logits: Var,
    probs: Vec<f64>,
    labels: Vec<usize>,
    weights: Vec<f64>,
    classes: usize,
}

impl Backward for WeightedCeOp {
    fn backward(&self, grad: &[f64], _: &[Array], acc: &mut GradAcc<'_>) {
        let n = self.labels.len() as f64;
        let upstream = grad[0];
        if let Some(d) = acc.slot(self.logits) {
            for (b, &y) in self.labels.iter().enumerate() {
                let w = self.weights[y] * upstream / n;
                let p = &self.probs[b * self.classes..(b + 1) * self.classes];
                let row = &mut d[b * self.classes..(b + 1) * self.classes];
                for j in 0..self.classes {
                    let target = if j == y { 1.0 } else { 0.0 };
                    row[j] += w * (p[j] - target);
                }
            }
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::dim("softmax", "empty input"));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `x · w + b` for `x: B×n`, `w: n×m`, `b: m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, n_in) = matrix_dims("linear", self.value(x))?;
        let (w_rows, n_out) = matrix_dims("linear", self.value(w))?;
        if w_rows != n_in {
            return Err(Error::dim(
                "linear",
                format!(
                    "input {:?} does not match weight {:?}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        let mut out = vec![0.0; rows * n_out];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != n_out {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} does not match weight {:?}", bias.shape(), self.shape(w)),
                ));
            }
            for row in out.chunks_mut(n_out) {
                row.copy_from_slice(bias.data());
            }
        }
        matmul_acc(
            self.value(x).data(),
            self.value(w).data(),
            rows,
            n_in,
            n_out,
            &mut out,
        );
        let value = Array::new(vec![rows, n_out], out)?;
        let fault = self.fault;
        Ok(self.push(
            value,
            &[x, w].into_iter().chain(b).collect::<Vec<_>>(),
            LinearOp {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
                fault,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, &[a, b], AddOp(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, &[a, b], MulOp(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * factor).collect();
        let value = Array::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, &[a], ScaleOp(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Array::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, &[a], ReluOp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Array::scalar(total), &[a], SumOp(a, 1.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a).data();
        let n = src.len().max(1) as f64;
        let total: f64 = src.iter().sum();
        self.push(Array::scalar(total / n), &[a], SumOp(a, 1.0 / n))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, &[a], ReshapeOp(a)))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let lead_a = &sa[..sa.len().saturating_sub(1)];
        let lead_b = &sb[..sb.len().saturating_sub(1)];
        if lead_a != lead_b || sa.is_empty() || sb.is_empty() {
            return Err(Error::dim("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows: usize = lead_a.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&da[r * p..(r + 1) * p]);
            data.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        let mut shape = lead_a.to_vec();
        shape.push(p + q);
        let value = Array::new(shape, data)?;
        Ok(self.push(value, &[a, b], ConcatOp { a, b, p, q }))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::dim("slice", "cannot slice a scalar"))?;
        if start > end || end > width {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} outside width {width}"),
            ));
        }
        let part = end - start;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(width.max(1))
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = part;
        let value = Array::new(out_shape, data)?;
        Ok(self.push(
            value,
            &[x],
            SliceOp {
                x,
                width,
                start,
                end,
            },
        ))
    }

    /// Splits the last axis into three equal contiguous parts, returned in
    /// (query, key, value) order.
    pub fn split_thirds(&mut self, x: Var) -> Result<(Var, Var, Var)> {
        let width = self.value(x).last_dim();
        if self.shape(x).is_empty() || width % 3 != 0 {
            return Err(Error::dim(
                "split_thirds",
                format!("last axis of {:?} is not divisible by 3", self.shape(x)),
            ));
        }
        let d = width / 3;
        Ok((
            self.slice_last(x, 0, d)?,
            self.slice_last(x, d, 2 * d)?,
            self.slice_last(x, 2 * d, 3 * d)?,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.shape().is_empty() || src.last_dim() == 0 {
            return Err(Error::dim("softmax", format!("shape {:?}", src.shape())));
        }
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let width = src.last_dim();
        let mut out = vec![0.0; src.len()];
        for (row, o) in src.data().chunks(width).zip(out.chunks_mut(width)) {
            softmax_into(row, o);
        }
        let value = Array::new(src.shape().to_vec(), out.clone())?;
        Ok(self.push(value, &[x], SoftmaxOp { x, out, width }))
    }

    /// `-(1/B) Σ_b w[y_b] · log softmax(logits_b)[y_b]`, evaluated with
    /// log-sum-exp.
    pub fn weighted_ce(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (rows, classes) = matrix_dims("weighted_ce", self.value(logits))?;
        if rows != labels.len() || rows == 0 {
            return Err(Error::dim(
                "weighted_ce",
                format!("{rows} logit rows for {} labels", labels.len()),
            ));
        }
        if weights.len() != classes {
            return Err(Error::dim(
                "weighted_ce",
                format!("{} class weights for {classes} classes", weights.len()),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "class weights must be strictly positive, got {w}"
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} outside 0..{classes}")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &src[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss -= weights[y] * (row[y] - lse);
            for j in 0..classes {
                probs[b * classes + j] = (row[j] - lse).exp();
            }
        }
        let loss = loss / rows as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("cross-entropy evaluated to {loss}")));
        }
        Ok(self.push(
            Array::scalar(loss),
            &[logits],
            WeightedCeOp {
                logits,
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                classes,
            },
        ))
    }
}
