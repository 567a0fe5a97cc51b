/// Dense row-major tensor of 64-bit floats.
///
/// `grad` is populated by [`crate::numerics::Tape::write_grad`] after a
/// backward pass; it always matches `data` in length when present.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            shape.iter().all(|&e| e > 0),
            "tensor shape extents must be positive, got {:?}",
            shape
        );
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} implies {} elements, data has {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Row-wise softmax of a matrix, computed with max-shift.
    pub fn softmax_rows(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "softmax_rows on {:?}", self.shape);
        let cols = self.cols();
        let mut out = vec![0.0; self.data.len()];
        for (orow, irow) in out.chunks_mut(cols).zip(self.data.chunks(cols)) {
            softmax_into(irow, orow);
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// log Σ exp(vᵢ) with max-shift; returns −∞ for all-(−∞) input.
///
/// Panics on empty input: the sum over an empty index set has no
/// log-domain representation.
pub fn logsumexp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "logsumexp: domain error, empty input");
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Two-argument log-add, the inner loop of every CTC recursion.
#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.at2(1, 2), 6.0);
    }

    #[test]
    #[should_panic(expected = "implies 6 elements")]
    fn shape_mismatch_panics() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    #[should_panic(expected = "must be positive")]
    fn zero_extent_panics() {
        Tensor::new(vec![0, 3], vec![]);
    }

    #[test]
    fn logsumexp_normalization() {
        let v = logsumexp(&[0.5f64.ln(), 0.5f64.ln()]);
        assert!((v - 0.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_absorbs_neg_infinity() {
        let x = -1.37;
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, x]), x);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn logsumexp_hand_value() {
        let v = logsumexp(&[0.0, 0.0, 0.0]);
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "domain error")]
    fn logsumexp_empty_is_domain_error() {
        logsumexp(&[]);
    }

    #[test]
    fn logaddexp_matches_logsumexp() {
        let pairs = [(-1.0, -2.0), (0.0, -30.0), (-700.0, -701.0)];
        for (a, b) in pairs {
            assert!((logaddexp(a, b) - logsumexp(&[a, b])).abs() < 1e-12);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn logsumexp_permutation_invariant(
                mut v in proptest::collection::vec(-50.0f64..50.0, 1..12),
                rot in 0usize..12,
            ) {
                let before = logsumexp(&v);
                let r = rot % v.len();
                v.rotate_left(r);
                prop_assert!((logsumexp(&v) - before).abs() < 1e-9);
            }

            #[test]
            fn logsumexp_shift_equivariant(
                v in proptest::collection::vec(-50.0f64..50.0, 1..12),
                c in -20.0f64..20.0,
            ) {
                let base = logsumexp(&v);
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                prop_assert!((logsumexp(&shifted) - (base + c)).abs() < 1e-9);
            }

            #[test]
            fn softmax_rows_are_distributions(
                rows in 1usize..4,
                cols in 1usize..6,
                seed in 0u64..1000,
            ) {
                let data: Vec<f64> = (0..rows * cols)
                    .map(|i| ((i as f64 + seed as f64) * 0.7919).sin() * 10.0)
                    .collect();
                let m = Tensor::new(vec![rows, cols], data).softmax_rows();
                for r in 0..rows {
                    let s: f64 = m.row_slice(r).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                    prop_assert!(m.row_slice(r).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }
}
