//! Dense row-major `f64` arrays and the raw kernels the tape builds on.

use super::TensorError;

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Square identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Numpy-style broadcast of two shapes, aligned from the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps each flat index of a broadcast output back to the flat index of an
/// operand with shape `src`.
pub(crate) enum IndexMap {
    Identity,
    /// Operand shape is a trailing suffix of the output: index modulo length.
    Cyclic(usize),
    /// Operand equals the output with the last axis collapsed to 1.
    Repeat(usize),
    Explicit(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        let src_len: usize = src.iter().product();
        if src == out {
            return IndexMap::Identity;
        }
        let offset = out.len() - src.len();
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if src_len == 1 || out[out.len() - trimmed.len()..] == trimmed[..] {
            return IndexMap::Cyclic(src_len.max(1));
        }
        if let (Some((&1, head)), Some((&last, out_head))) = (src.split_last(), out.split_last()) {
            if head == out_head {
                return IndexMap::Repeat(last);
            }
        }
        // General case: strides of the source with zero stride on broadcast axes.
        let mut strides = vec![0usize; out.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            if src[i] != 1 {
                strides[offset + i] = acc;
            }
            acc *= src[i];
        }
        let total: usize = out.iter().product();
        let mut idx = vec![0usize; total];
        let mut counter = vec![0usize; out.len()];
        for slot in idx.iter_mut() {
            *slot = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
            for ax in (0..out.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        IndexMap::Explicit(idx)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Cyclic(n) => i % n,
            IndexMap::Repeat(k) => i / k,
            IndexMap::Explicit(v) => v[i],
        }
    }
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let total: usize = shape.iter().product();
    let data = if a.shape == b.shape {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let ma = IndexMap::new(&a.shape, &shape);
        let mb = IndexMap::new(&b.shape, &shape);
        let mut data = Vec::with_capacity(total);
        match (&ma, &mb) {
            (IndexMap::Identity, IndexMap::Cyclic(len)) => {
                for chunk in a.data.chunks(*len) {
                    data.extend(chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
                }
            }
            (IndexMap::Cyclic(len), IndexMap::Identity) => {
                for chunk in b.data.chunks(*len) {
                    data.extend(a.data.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
            }
            (IndexMap::Identity, IndexMap::Repeat(k)) => {
                for (chunk, &y) in a.data.chunks(*k).zip(&b.data) {
                    data.extend(chunk.iter().map(|&x| f(x, y)));
                }
            }
            _ => data.extend((0..total).map(|i| f(a.data[ma.at(i)], b.data[mb.at(i)]))),
        }
        data
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Sums a broadcast-shaped gradient back down to `target` shape.
pub(crate) fn reduce_to(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let map = IndexMap::new(target, &grad.shape);
    let mut out = Tensor::zeros(target);
    match map {
        IndexMap::Cyclic(len) => {
            for chunk in grad.data.chunks(len) {
                out.data.iter_mut().zip(chunk).for_each(|(o, g)| *o += g);
            }
        }
        IndexMap::Repeat(k) => {
            for (o, chunk) in out.data.iter_mut().zip(grad.data.chunks(k)) {
                *o += chunk.iter().sum::<f64>();
            }
        }
        _ => {
            for (i, g) in grad.data.iter().enumerate() {
                out.data[map.at(i)] += g;
            }
        }
    }
    out
}

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n×k] += a[n×m] · b[k×m]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + j] += dot;
        }
    }
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// How the two operands of a matrix product line up across batch axes.
#[derive(Clone, Copy, Debug)]
pub(crate) enum MatMulLayout {
    /// Both operands carry the same batch axes.
    Batched { batch: usize },
    /// Right operand is a single matrix shared by every left batch slice.
    SharedRhs { batch: usize },
    /// Left operand is a single matrix shared by every right batch slice.
    SharedLhs { batch: usize },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MatMulPlan {
    pub layout: MatMulLayout,
    pub n: usize,
    pub k: usize,
    pub m: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<(MatMulPlan, Vec<usize>), TensorError> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, m) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let layout = if a_batch == b_batch {
        MatMulLayout::Batched {
            batch: a_batch.iter().product(),
        }
    } else if b_batch.is_empty() {
        MatMulLayout::SharedRhs {
            batch: a_batch.iter().product(),
        }
    } else if a_batch.is_empty() {
        MatMulLayout::SharedLhs {
            batch: b_batch.iter().product(),
        }
    } else {
        return Err(err());
    };
    let mut shape = if a_batch.len() >= b_batch.len() {
        a_batch.to_vec()
    } else {
        b_batch.to_vec()
    };
    shape.push(n);
    shape.push(m);
    Ok((MatMulPlan { layout, n, k, m }, shape))
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor, plan: MatMulPlan, shape: Vec<usize>) -> Tensor {
    let MatMulPlan { layout, n, k, m } = plan;
    let mut out = vec![0.0; shape.iter().product()];
    match layout {
        MatMulLayout::SharedRhs { batch } => gemm_nn(&a.data, &b.data, &mut out, batch * n, k, m),
        MatMulLayout::Batched { batch } => {
            for s in 0..batch {
                gemm_nn(
                    &a.data[s * n * k..(s + 1) * n * k],
                    &b.data[s * k * m..(s + 1) * k * m],
                    &mut out[s * n * m..(s + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        MatMulLayout::SharedLhs { batch } => {
            for s in 0..batch {
                gemm_nn(
                    &a.data,
                    &b.data[s * k * m..(s + 1) * k * m],
                    &mut out[s * n * m..(s + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
    }
    Tensor::from_parts(shape, out)
}

/// Gradients of `a·b` with respect to each operand given the output gradient.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, plan: MatMulPlan) -> (Tensor, Tensor) {
    let MatMulPlan { layout, n, k, m } = plan;
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    match layout {
        MatMulLayout::SharedRhs { batch } => {
            gemm_nt(&g.data, &b.data, &mut ga, batch * n, m, k);
            gemm_tn(&a.data, &g.data, &mut gb, batch * n, k, m);
        }
        MatMulLayout::Batched { batch } => {
            for s in 0..batch {
                let gs = &g.data[s * n * m..(s + 1) * n * m];
                gemm_nt(gs, &b.data[s * k * m..(s + 1) * k * m], &mut ga[s * n * k..(s + 1) * n * k], n, m, k);
                gemm_tn(&a.data[s * n * k..(s + 1) * n * k], gs, &mut gb[s * k * m..(s + 1) * k * m], n, k, m);
            }
        }
        MatMulLayout::SharedLhs { batch } => {
            for s in 0..batch {
                let gs = &g.data[s * n * m..(s + 1) * n * m];
                gemm_nt(gs, &b.data[s * k * m..(s + 1) * k * m], &mut ga, n, m, k);
                gemm_tn(&a.data, gs, &mut gb[s * k * m..(s + 1) * k * m], n, k, m);
            }
        }
    }
    (
        Tensor::from_parts(a.shape.clone(), ga),
        Tensor::from_parts(b.shape.clone(), gb),
    )
}

/// Swaps the last two axes.
pub(crate) fn transpose_last(t: &Tensor) -> Tensor {
    let r = t.rank();
    let (rows, cols) = (t.shape[r - 2], t.shape[r - 1]);
    let batch = t.len() / (rows * cols).max(1);
    let mut data = vec![0.0; t.len()];
    for s in 0..batch {
        let base = s * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                data[base + j * rows + i] = t.data[base + i * cols + j];
            }
        }
    }
    let mut shape = t.shape.clone();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, data)
}

pub(crate) fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let ra = a.rank();
    if ra == 0 || ra != b.rank() || a.shape[..ra - 1] != b.shape[..ra - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (ca, cb) = (a.shape[ra - 1], b.shape[ra - 1]);
    let rows = (a.len() + b.len()).checked_div(ca + cb).unwrap_or(0);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
    }
    let mut shape = a.shape.clone();
    shape[ra - 1] = ca + cb;
    Ok(Tensor::from_parts(shape, data))
}

/// Splits the last axis of `g` at `left` columns; inverse of [`concat_last`].
pub(crate) fn split_last(g: &Tensor, left: usize) -> (Tensor, Tensor) {
    let r = g.rank();
    let total = g.shape[r - 1];
    let right = total - left;
    let rows = g.len().checked_div(total).unwrap_or(0);
    let mut a = Vec::with_capacity(rows * left);
    let mut b = Vec::with_capacity(rows * right);
    for row in g.data.chunks(total.max(1)).take(rows) {
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    let mut sa = g.shape.clone();
    sa[r - 1] = left;
    let mut sb = g.shape.clone();
    sb[r - 1] = right;
    (Tensor::from_parts(sa, a), Tensor::from_parts(sb, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
    }

    #[test]
    fn explicit_index_map_matches_manual_strides() {
        // (2,1,3) broadcast to (2,4,3): source index ignores the middle axis.
        let map = IndexMap::new(&[2, 1, 3], &[2, 4, 3]);
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..3 {
                    assert_eq!(map.at(b * 12 + i * 3 + j), b * 3 + j);
                }
            }
        }
    }

    #[test]
    fn reduce_sums_over_broadcast_axes() {
        let g = Tensor::ones(&[2, 3, 4]);
        let r = reduce_to(&g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn transpose_and_concat_shapes() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let tt = transpose_last(&t);
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = concat_last(&Tensor::zeros(&[2, 3]), &Tensor::ones(&[2, 5])).unwrap();
        assert_eq!(c.shape(), &[2, 8]);
        let (a, b) = split_last(&c, 3);
        assert_eq!(a, Tensor::zeros(&[2, 3]));
        assert_eq!(b, Tensor::ones(&[2, 5]));
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
