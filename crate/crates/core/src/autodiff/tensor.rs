//! Dense row-major `f64` arrays.

use super::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[offset(&self.shape, index)]
    }

    /// Row `i` of a tensor viewed as `[len / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy with axes reordered so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Self {
        let rank = self.shape.len();
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Self {
            shape: out_shape,
            data: out,
        }
    }

    /// Sum over axes so the result has `shape`, reversing a numpy-style broadcast.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        let out_len = n.max(1);
        // suffix broadcast: target is the trailing block
        if shape.len() <= self.shape.len()
            && self.shape[self.shape.len() - shape.len()..] == *shape
        {
            for chunk in self.data.chunks(out_len) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            return Self {
                shape: shape.to_vec(),
                data: out,
            };
        }
        let rank = self.shape.len();
        let pad = rank - shape.len();
        let tgt_strides = strides(shape);
        let mut map_strides = vec![0usize; rank];
        for ax in 0..rank {
            if ax >= pad && shape[ax - pad] != 1 {
                map_strides[ax] = tgt_strides[ax - pad];
            }
        }
        let mut idx = vec![0usize; rank];
        let mut dst = 0usize;
        for &v in &self.data {
            out[dst] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                dst += map_strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                dst -= map_strides[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data: out,
        }
    }

    /// Numpy-style broadcast of `self` up to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let target = broadcast_shape(&self.shape, shape).filter(|s| s == shape);
        let Some(target) = target else {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        };
        Ok(Self {
            data: expand(&self.data, &self.shape, &target),
            shape: target,
        })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn offset(shape: &[usize], index: &[usize]) -> usize {
    let st = strides(shape);
    index.iter().zip(&st).map(|(i, s)| i * s).sum()
}

/// Result shape of broadcasting `a` against `b`, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Materialize `data` (of `shape`) broadcast to `target`.
pub(crate) fn expand(data: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    let n: usize = target.iter().product();
    if shape == target {
        return data.to_vec();
    }
    if shape.len() <= target.len() && target[target.len() - shape.len()..] == *shape {
        let m = data.len().max(1);
        return (0..n).map(|i| data[i % m]).collect();
    }
    let rank = target.len();
    let pad = rank - shape.len();
    let src_st = strides(shape);
    let mut map_strides = vec![0usize; rank];
    for ax in pad..rank {
        if shape[ax - pad] != 1 {
            map_strides[ax] = src_st[ax - pad];
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += map_strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            src -= map_strides[ax] * target[ax];
            idx[ax] = 0;
        }
    }
    out
}
