//! Strided (batched) matrix products on top of `matrixmultiply`.

/// Row/column/batch strides for one operand.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
    pub bs: isize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
            bs: (rows * cols) as isize,
        }
    }

    pub fn transposed(rows: usize, cols: usize) -> Self {
        // Logical [cols x rows] view of a row-major [rows x cols] block.
        Self {
            rs: 1,
            cs: cols as isize,
            bs: (rows * cols) as isize,
        }
    }

    pub fn shared(self) -> Self {
        Self { bs: 0, ..self }
    }
}

/// `c[b] = beta * c[b] + a[b] · bmat[b]` for every batch index, with `a: m×k`, `bmat: k×n`,
/// `c: m×n` row-major and contiguous per batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= batch * m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..batch * m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let max_a = extent(batch, m, k, la);
    let max_b = extent(batch, k, n, lb);
    assert!(max_a <= a.len() && max_b <= b.len(), "gemm operand out of bounds");
    for bi in 0..batch {
        let ao = bi as isize * la.bs;
        let bo = bi as isize * lb.bs;
        let co = bi * m * n;
        // SAFETY: the extents checked above bound every index touched for this batch.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr().offset(ao),
                la.rs,
                la.cs,
                b.as_ptr().offset(bo),
                lb.rs,
                lb.cs,
                beta,
                c.as_mut_ptr().add(co),
                n as isize,
                1,
            );
        }
    }
}

fn extent(batch: usize, rows: usize, cols: usize, l: Layout) -> usize {
    let last = (batch as isize - 1) * l.bs + (rows as isize - 1) * l.rs + (cols as isize - 1) * l.cs;
    last as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(1, m, k, n, &a, Layout::row_major(m, k), &b, Layout::row_major(k, n), &mut c, 0.0);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a^T with a stored as [k x m]
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(1, m, k, n, &at, Layout::transposed(k, m), &b, Layout::row_major(k, n), &mut c2, 0.0);
        assert_eq!(c, c2);
    }
}
