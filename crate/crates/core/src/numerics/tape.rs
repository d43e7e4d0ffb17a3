use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Test hook: perturbs one backward rule so gradient checks can be shown to fail.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Scales the left-operand gradient of every matmul.
    ScaleMatmulLhs(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    SumRows(Var),
    SumAll(Var),
    ScalarMul(Var, f64),
    AddRowBroadcast(Var, Var),
    ScaleRows(Var, Var),
    SoftmaxRows(Var),
    GroupedSoftmax(Var, Vec<Option<usize>>),
    RowNormalize(Var),
    PassThrough(Var),
    Select(Var, Vec<usize>, Vec<usize>),
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations on dense `f64` matrices.
///
/// Every operation's inputs are recorded before it, so reverse index order is a
/// valid topological order for [`Tape::backward`]. Vectors are `n × 1` or `1 × n`
/// matrices and scalars are `1 × 1`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, like: (usize, usize)) -> Array2<f64> {
        self.get(var).cloned().unwrap_or_else(|| Array2::zeros(like))
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape(a: &Array2<f64>) -> [usize; 2] {
    [a.nrows(), a.ncols()]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a tape holding
    /// shared leaves can be reused for independent computations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::dim("matmul", &shape(va), &shape(vb)));
        }
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::dim(op, &shape(va), &shape(vb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Entrywise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Hadamard(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of zero tensors".into()))?;
        let rows = self.value(first).nrows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.nrows() != rows {
                return Err(Error::dim("concat_cols", &shape(self.value(first)), &shape(v)));
            }
            cols += v.ncols();
        }
        let mut out = Array2::zeros((rows, cols));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            out.slice_mut(s![.., offset..offset + v.ncols()]).assign(v);
            offset += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Column-wise sum over rows: `n × c` to `1 × c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), rg)
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let rg = self.rg(a);
        self.push(out, Op::ScalarMul(a, k), rg)
    }

    /// `x + 1·b` for a `1 × c` row `b`.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(Error::dim("add_row_broadcast", &shape(vx), &shape(vb)));
        }
        let out = vx + vb;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRowBroadcast(x, b), rg))
    }

    /// `diag(w) · x` for an `n × 1` column `w`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.ncols() != 1 || vw.nrows() != vx.nrows() {
            return Err(Error::dim("scale_rows", &shape(vx), &shape(vw)));
        }
        let out = vx * vw;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::ScaleRows(x, w), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Softmax over arbitrary groups of entries (row-major order).
    ///
    /// `groups[k]` is the group of entry `k`; `None` entries are excluded from
    /// every group, produce 0 and receive no gradient.
    pub fn grouped_softmax(&mut self, a: Var, groups: Vec<Option<usize>>) -> Result<Var> {
        let va = self.value(a);
        if groups.len() != va.len() {
            return Err(Error::dim("grouped_softmax", &shape(va), &[groups.len()]));
        }
        let values: Vec<f64> = va.iter().copied().collect();
        let out = super::softmax::grouped_softmax_values(&values, &groups);
        let out = Array2::from_shape_vec(va.dim(), out).expect("shape preserved");
        let rg = self.rg(a);
        Ok(self.push(out, Op::GroupedSoftmax(a, groups), rg))
    }

    /// Row normalization `T(i,·) / max(1, Σ_j T(i,j))`.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let out = super::row_normalize_guarded(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::RowNormalize(a), rg)
    }

    /// Records `value` as the forward output while routing gradients to `input`
    /// unchanged (straight-through estimator).
    pub fn pass_through(&mut self, input: Var, value: Array2<f64>) -> Result<Var> {
        let vi = self.value(input);
        if vi.dim() != value.dim() {
            return Err(Error::dim("pass_through", &shape(vi), &shape(&value)));
        }
        let rg = self.rg(input);
        Ok(self.push(value, Op::PassThrough(input), rg))
    }

    /// Sub-matrix at the given row and column indices.
    pub fn select(&mut self, a: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if rows.iter().any(|&r| r >= va.nrows()) || cols.iter().any(|&c| c >= va.ncols()) {
            return Err(Error::dim("select", &shape(va), &[rows.len(), cols.len()]));
        }
        let out = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| va[[rows[i], cols[j]]]);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Select(a, rows.to_vec(), cols.to_vec()), rg))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let cols: Vec<usize> = (0..self.value(a).ncols()).collect();
        self.select(a, rows, &cols)
    }

    /// Mean softmax cross-entropy of `B × C` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if labels.len() != v.nrows() {
            return Err(Error::dim("softmax_cross_entropy", &shape(v), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v.ncols()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                v.ncols()
            )));
        }
        let mut total = 0.0;
        for (row, &label) in v.rows().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let out = Array2::from_elem((1, 1), total / labels.len().max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::SoftmaxCrossEntropy(logits, labels.to_vec()), rg))
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                shape(lv)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, delta: Array2<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped"),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut ga = g.dot(&vb.t());
                        if let Some(BackwardFault::ScaleMatmulLhs(k)) = self.fault {
                            ga *= k;
                        }
                        acc(*a, ga);
                    }
                    if self.rg(*b) {
                        acc(*b, va.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Hadamard(a, b) => {
                    if self.rg(*a) {
                        acc(*a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(*b, &g * self.value(*a));
                    }
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., offset..offset + c]).to_owned());
                        offset += c;
                    }
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    acc(*a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d *= slope });
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::SumRows(a) => {
                    let rows = self.value(*a).nrows();
                    let d = g
                        .broadcast((rows, g.ncols()))
                        .expect("1 × c broadcasts")
                        .to_owned();
                    acc(*a, d);
                }
                Op::SumAll(a) => {
                    acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]]));
                }
                Op::ScalarMul(a, k) => acc(*a, g * *k),
                Op::AddRowBroadcast(x, b) => {
                    if self.rg(*b) {
                        acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*x, g);
                }
                Op::ScaleRows(x, w) => {
                    if self.rg(*w) {
                        let gw = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(*w, gw);
                    }
                    if self.rg(*x) {
                        acc(*x, &g * self.value(*w));
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&g - &dot));
                }
                Op::GroupedSoftmax(a, groups) => {
                    let y: Vec<f64> = node.value.iter().copied().collect();
                    let gv: Vec<f64> = g.iter().copied().collect();
                    let n_groups = groups.iter().flatten().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_groups];
                    for (k, grp) in groups.iter().enumerate() {
                        if let Some(p) = grp {
                            dot[*p] += y[k] * gv[k];
                        }
                    }
                    let d: Vec<f64> = groups
                        .iter()
                        .enumerate()
                        .map(|(k, grp)| grp.map_or(0.0, |p| y[k] * (gv[k] - dot[p])))
                        .collect();
                    acc(*a, Array2::from_shape_vec(g.dim(), d).expect("shape preserved"));
                }
                Op::RowNormalize(a) => {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    for (r, (xr, gr)) in x.rows().into_iter().zip(g.rows()).enumerate() {
                        let total: f64 = xr.sum();
                        if total > 1.0 {
                            let inner: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum();
                            let k = inner / (total * total);
                            d.row_mut(r).zip_mut_with(&gr, |d, &g| *d = g / total - k);
                        }
                    }
                    acc(*a, d);
                }
                Op::PassThrough(a) => acc(*a, g),
                Op::Select(a, rows, cols) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (i, &r) in rows.iter().enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            d[[r, c]] += g[[i, j]];
                        }
                    }
                    acc(*a, d);
                }
                Op::SoftmaxCrossEntropy(logits, labels) => {
                    let v = self.value(*logits);
                    let scale = g[[0, 0]] / labels.len().max(1) as f64;
                    let mut d = v.clone();
                    for (mut row, &label) in d.rows_mut().into_iter().zip(labels) {
                        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                        row.mapv_inplace(|x| (x - max).exp());
                        let total = row.sum();
                        row.mapv_inplace(|x| x / total);
                        row[label] -= 1.0;
                        row *= scale;
                    }
                    acc(*logits, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
