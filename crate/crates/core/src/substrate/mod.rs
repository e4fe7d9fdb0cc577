//! Minimal differentiable layer: parameters, embedding lookup, affine maps,
//! softmax and a GRU cell, each with a hand-chained backward rule.
//!
//! Every forward op has a matching `*_backward` that takes the upstream
//! gradient and accumulates into [`Parameter::grad`]. All arithmetic is `f64`.

mod gru;

pub use gru::{GruCell, GruSequence};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// A learnable tensor together with its gradient accumulator.
///
/// Vectors are stored as `1 × n` matrices so every parameter shares one
/// storage type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Parameter {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::from_value(name, Array2::zeros((rows, cols)))
    }

    pub fn from_value(name: impl Into<String>, value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        Self::from_value(name, value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Row 0 viewed as a vector; meaningful for `1 × n` parameters.
    pub fn as_vector(&self) -> ArrayView1<'_, f64> {
        self.value.row(0)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn squared_norm(&self) -> f64 {
        self.value.iter().map(|v| v * v).sum()
    }

    pub fn grad_is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Parameter,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(name: &str, vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        // A lookup has fan-in one, so entries start in [-1, 1].
        Self {
            rows: Parameter::uniform(name, vocab_size, dim, 1, rng),
        }
    }

    pub fn from_rows(rows: Parameter) -> Self {
        Self { rows }
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.value.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.value.ncols()
    }
}

/// Gathers one table row per id.
pub fn embed(table: &EmbeddingTable, ids: &[usize]) -> Result<Array2<f64>> {
    let vocab = table.vocab_size();
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Index {
            what: "embedding table",
            index: bad,
            size: vocab,
        });
    }
    Ok(table.rows.value.select(Axis(0), ids))
}

/// Scatter-adds `d_out` rows into the table gradient.
pub fn embed_backward(table: &mut EmbeddingTable, ids: &[usize], d_out: ArrayView2<'_, f64>) {
    for (row, &id) in d_out.outer_iter().zip(ids) {
        let mut g = table.rows.grad.row_mut(id);
        g += &row;
    }
}

/// `W x + b`.
pub fn linear(w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let (rows, cols) = w.dim();
    if x.len() != cols || b.len() != rows {
        return Err(Error::shape(
            "linear",
            format!("W {rows}x{cols}, x {cols}, b {rows}"),
            format!("x {}, b {}", x.len(), b.len()),
        ));
    }
    Ok(w.dot(&x) + b)
}

/// Accumulates `dL/dW` and `dL/db` for `y = W x + b` and returns `dL/dx`.
pub fn linear_backward(
    w: &mut Parameter,
    b: &mut Parameter,
    x: ArrayView1<'_, f64>,
    d_out: ArrayView1<'_, f64>,
) -> Array1<f64> {
    outer_accumulate(&mut w.grad, d_out, x);
    let mut db = b.grad.row_mut(0);
    db += &d_out;
    w.value.t().dot(&d_out)
}

/// `acc += a ⊗ b`.
pub(crate) fn outer_accumulate(acc: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for (mut row, &ai) in acc.outer_iter_mut().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "softmax input contains non-finite entries".into(),
        ));
    }
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out = v.mapv(|x| (x - max).exp());
    let total = out.sum();
    out /= total;
    Ok(out)
}

/// Vector-Jacobian product of softmax: `a ⊙ (g − ⟨a, g⟩)`.
pub fn softmax_backward(a: ArrayView1<'_, f64>, d_a: ArrayView1<'_, f64>) -> Array1<f64> {
    let inner = a.dot(&d_a);
    let mut out = d_a.to_owned();
    out -= inner;
    out *= &a;
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} != {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn central_difference(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>) -> Array1<f64> {
        let h = 1e-5;
        Array1::from_shape_fn(x.len(), |i| {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
    }

    #[test]
    fn embed_repeated_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::new("emb", 4, 3, &mut rng);
        let out = embed(&table, &[0, 0]).unwrap();
        assert_eq!(out.row(0), out.row(1));
        let empty = embed(&table, &[]).unwrap();
        assert_eq!(empty.dim(), (0, 3));
    }

    #[test]
    fn embed_identity_table() {
        let table = EmbeddingTable::from_rows(Parameter::from_value("id", Array2::eye(4)));
        let out = embed(&table, &[2]).unwrap();
        assert_eq!(out.row(0), array![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn embed_out_of_range() {
        let table = EmbeddingTable::from_rows(Parameter::zeros("t", 3, 2));
        assert!(matches!(embed(&table, &[3]), Err(Error::Index { index: 3, .. })));
    }

    #[test]
    fn embed_backward_scatters() {
        let mut table = EmbeddingTable::from_rows(Parameter::zeros("t", 3, 2));
        embed_backward(
            &mut table,
            &[1, 1, 0],
            array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].view(),
        );
        assert_eq!(table.rows.grad, array![[5.0, 6.0], [4.0, 6.0], [0.0, 0.0]]);
    }

    #[test]
    fn linear_examples() {
        let x = array![1.0, 1.0];
        let eye = Array2::<f64>::eye(2);
        let zero = Array1::<f64>::zeros(2);
        assert_eq!(linear(eye.view(), zero.view(), x.view()).unwrap(), x);
        let b = array![0.3, -0.7];
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(linear(w.view(), b.view(), zero.view()).unwrap(), b);
        assert_eq!(linear(w.view(), zero.view(), x.view()).unwrap(), array![3.0, 7.0]);
        assert!(linear(w.view(), zero.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = Parameter::uniform("w", 3, 4, 4, &mut rng);
        let mut b = Parameter::uniform("b", 1, 3, 4, &mut rng);
        let x = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
        // loss = sum(tanh(Wx + b))
        let y = linear(w.value.view(), b.as_vector(), x.view()).unwrap();
        let d_out = y.mapv(|v| 1.0 - v.tanh().powi(2));
        let dx = linear_backward(&mut w, &mut b, x.view(), d_out.view());
        let (wv, bv) = (w.value.clone(), b.value.clone());
        let fd_x = central_difference(
            |x| linear(wv.view(), bv.row(0), x.view()).unwrap().mapv(f64::tanh).sum(),
            &x,
        );
        for (a, f) in dx.iter().zip(fd_x.iter()) {
            assert_close!(*a, *f, 1e-8);
        }
        let flat_w = Array1::from_iter(wv.iter().copied());
        let fd_w = central_difference(
            |flat| {
                let wm = flat.clone().into_shape_with_order((3, 4)).unwrap();
                linear(wm.view(), bv.row(0), x.view()).unwrap().mapv(f64::tanh).sum()
            },
            &flat_w,
        );
        for (a, f) in w.grad.iter().zip(fd_w.iter()) {
            assert_close!(*a, *f, 1e-8);
        }
        for (a, f) in b.grad.iter().zip(d_out.iter()) {
            assert_close!(*a, *f, 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let c = softmax(array![2.5, 2.5, 2.5].view()).unwrap();
        for v in c.iter() {
            assert_close!(*v, 1.0 / 3.0, 1e-15);
        }
        let s = softmax(array![0.0, 3f64.ln()].view()).unwrap();
        assert_close!(s[0], 0.25, 1e-15);
        assert_close!(s[1], 0.75, 1e-15);
        let big = softmax(array![1000.0, 1000.0 + 2f64.ln()].view()).unwrap();
        assert_close!(big[0], 1.0 / 3.0, 1e-12);
        assert_close!(big[1], 2.0 / 3.0, 1e-12);
        assert!(softmax(Array1::<f64>::zeros(0).view()).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        // loss = ||x||^2 has gradient 2x.
        let x = array![1.0, 2.0];
        let g = x.mapv(|v| 2.0 * v);
        assert_eq!(g, array![2.0, 4.0]);
        let fd = central_difference(|x| x.dot(x), &x);
        assert_close!(fd[0], 2.0, 1e-8);
        assert_close!(fd[1], 4.0, 1e-8);
    }

    #[test]
    fn softmax_first_entry_gradient() {
        let v = array![0.0, 0.0];
        let a = softmax(v.view()).unwrap();
        let g = softmax_backward(a.view(), array![1.0, 0.0].view());
        assert_close!(g[0], 0.25, 1e-15);
        assert_close!(g[1], -0.25, 1e-15);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let v = Array1::from_shape_simple_fn(5, || rng.random_range(-3.0..3.0));
            let w = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
            let a = softmax(v.view()).unwrap();
            let g = softmax_backward(a.view(), w.view());
            let fd = central_difference(|v| softmax(v.view()).unwrap().dot(&w), &v);
            for (x, y) in g.iter().zip(fd.iter()) {
                assert_close!(*x, *y, 1e-9);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_permutation_equivariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..v.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let base = softmax(Array1::from(v.clone()).view()).unwrap();
            let permuted: Array1<f64> = perm.iter().map(|&i| v[i]).collect();
            let out = softmax(permuted.view()).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                proptest::prop_assert!((out[k] - base[i]).abs() < 1e-12);
            }
            proptest::prop_assert!((base.sum() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(base.iter().all(|&p| p > 0.0));
        }
    }
}
