//! Dense linear algebra, activations, initialization and the SGD update rule.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Dense column vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DenseVector<T> {
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("DenseMatrix::from_vec", rows * cols, data.len()));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dims("DenseMatrix::from_rows", cols, bad.len()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> DenseVector<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &DenseVector<T>) -> Result<DenseVector<T>> {
        if v.len() != self.cols {
            return Err(Error::dims("matvec", self.cols, v.len()));
        }
        let mut out = vec![T::zero(); self.rows];
        self.gemv(v.as_slice(), &mut out);
        Ok(DenseVector::from(out))
    }

    /// `out = self · x` without shape checks beyond debug assertions.
    pub(crate) fn gemv(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot_slices(row, x);
        }
    }

    /// `out += selfᵀ · y`.
    pub(crate) fn gemv_t_acc(&self, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if yi != T::zero() {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += scale · a bᵀ`.
    pub(crate) fn add_outer(&mut self, scale: T, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (i, &ai) in a.iter().enumerate() {
            if ai != T::zero() {
                axpy(scale * ai, b, &mut self.data[i * cols..(i + 1) * cols]);
            }
        }
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.to_f64())).collect(),
        }
    }
}

impl<T: Scalar> DenseVector<T> {
    pub fn zeros(len: usize) -> Self {
        DenseVector {
            data: vec![T::zero(); len],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.len() != other.len() {
            return Err(Error::dims("dot", self.len(), other.len()));
        }
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::dims("add", self.len(), other.len()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect())
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> From<Vec<T>> for DenseVector<T> {
    fn from(data: Vec<T>) -> Self {
        DenseVector { data }
    }
}

impl<T> FromIterator<T> for DenseVector<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        DenseVector {
            data: iter.into_iter().collect(),
        }
    }
}

impl<T> std::ops::Index<usize> for DenseVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

#[inline]
pub(crate) fn dot_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha · x`.
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu<T: Scalar>(v: &DenseVector<T>) -> DenseVector<T> {
    v.as_slice().iter().map(|&x| x.max(T::zero())).collect()
}

pub(crate) fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(v: &DenseVector<T>) -> Result<DenseVector<T>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    Ok(DenseVector::from(softmax_slice(v.as_slice())))
}

pub(crate) fn softmax_slice<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut out: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}

/// `log Σ exp(v)` computed stably.
pub(crate) fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let total: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

/// Anything that can be updated by [`sgd_step`].
pub trait Parameter<T> {
    fn shape(&self) -> (usize, usize);
    fn values(&self) -> &[T];
    fn values_mut(&mut self) -> &mut [T];
}

impl<T: Scalar> Parameter<T> for DenseMatrix<T> {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    fn values(&self) -> &[T] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Scalar> Parameter<T> for DenseVector<T> {
    fn shape(&self) -> (usize, usize) {
        (self.data.len(), 1)
    }
    fn values(&self) -> &[T] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// `θ ← θ − lr·(grad + l2·θ)`.
pub fn sgd_step<T: Scalar, P: Parameter<T>>(params: &mut P, grad: &P, lr: T, l2: T) -> Result<()> {
    if params.shape() != grad.shape() {
        return Err(Error::dims(
            "sgd_step",
            format!("{:?}", params.shape()),
            format!("{:?}", grad.shape()),
        ));
    }
    if lr < T::zero() || l2 < T::zero() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step requires lr >= 0 and l2 >= 0 (lr={lr}, l2={l2})"
        )));
    }
    sgd_slice(params.values_mut(), grad.values(), lr, l2);
    Ok(())
}

#[inline]
pub(crate) fn sgd_slice<T: Scalar>(params: &mut [T], grad: &[T], lr: T, l2: T) {
    for (p, &g) in params.iter_mut().zip(grad) {
        *p -= lr * (g + l2 * *p);
    }
}

/// Pure L2 decay, the update for parameters whose gradient is zero.
#[inline]
pub(crate) fn decay_slice<T: Scalar>(params: &mut [T], lr: T, l2: T) {
    if l2 == T::zero() {
        return;
    }
    let factor = T::one() - lr * l2;
    for p in params {
        *p *= factor;
    }
}

/// Glorot/Xavier uniform initialization in `±sqrt(6/(rows+cols))`.
pub fn xavier_init<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = DenseMatrix::zeros(rows, cols);
    xavier_fill(m.as_mut_slice(), bound, rng);
    m
}

pub(crate) fn xavier_fill<T: Scalar>(out: &mut [T], bound: f64, rng: &mut Rng) {
    let dist = Uniform::new_inclusive(-bound, bound);
    for x in out {
        *x = T::of(dist.sample(rng));
    }
}

/// Seedable deterministic random source (ChaCha8).
///
/// Every stochastic operation takes one of these explicitly. Independent
/// streams are obtained with [`Rng::derive`], so parallel work can draw from
/// per-item generators without depending on scheduling order.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator for the sub-stream identified by `stream`, independent of
    /// how many values have been drawn from `self`.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform real in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Walker alias table for O(1) sampling from a fixed discrete distribution.
#[derive(Clone, Debug)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    /// `weights` must be non-negative with a positive sum.
    pub fn new(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || !(total > 0.0) || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument("alias table needs non-negative weights with positive sum".into()));
        }
        let n = weights.len();
        let mut scaled: Vec<f64> = weights.iter().map(|&w| w * n as f64 / total).collect();
        let mut alias = vec![0; n];
        let mut prob = vec![0.0; n];
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        Ok(AliasTable { prob, alias })
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let i = rng.below(self.prob.len());
        if rng.unit() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::math::Rng;
    use rand::RngCore;

    fn v(xs: &[f64]) -> DenseVector<f64> {
        DenseVector::from(xs.to_vec())
    }

    #[test]
    fn matvec_examples() {
        let i3 = DenseMatrix::<f64>::identity(3);
        assert_eq!(i3.matvec(&v(&[1., 2., 3.])).unwrap(), v(&[1., 2., 3.]));

        let m = DenseMatrix::from_rows(&[vec![1., 1.], vec![0., 2.]]).unwrap();
        assert_eq!(m.matvec(&v(&[3., 4.])).unwrap(), v(&[7., 8.]));

        let mut rng = Rng::new(3);
        let m: DenseMatrix<f64> = xavier_init(5, 4, &mut rng);
        for j in 0..4 {
            let mut e = vec![0.0; 4];
            e[j] = 1.0;
            assert_eq!(m.matvec(&v(&e)).unwrap(), m.column(j));
        }
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let m = DenseMatrix::<f64>::zeros(2, 3);
        assert!(matches!(m.matvec(&v(&[1., 2.])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&v(&[-2., 0., 3.])), v(&[0., 0., 3.]));
        assert_eq!(relu(&v(&[-1., -5.])), v(&[0., 0.]));
        assert_eq!(relu(&v(&[1., 5.])), v(&[1., 5.]));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&v(&[0., 0.])).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
        let s = softmax(&v(&[1000., 1000.])).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
        let s = softmax(&v(&[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (i, want) in [1. / 6., 2. / 6., 3. / 6.].iter().enumerate() {
            assert!((s[i] - want).abs() < 1e-12);
        }
        assert!(softmax::<f64>(&v(&[])).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = v(&[1.0]);
        sgd_step(&mut p, &v(&[0.0]), 0.1, 0.0).unwrap();
        assert_eq!(p[0], 1.0);

        let mut p = v(&[1.0]);
        sgd_step(&mut p, &v(&[0.5]), 0.1, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);

        let mut p = v(&[2.0]);
        sgd_step(&mut p, &v(&[0.0]), 0.1, 0.5).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);

        let mut m = DenseMatrix::<f64>::zeros(2, 2);
        assert!(sgd_step(&mut m, &DenseMatrix::zeros(2, 3), 0.1, 0.0).is_err());
    }

    #[test]
    fn xavier_properties() {
        let a: DenseMatrix<f64> = xavier_init(7, 9, &mut Rng::new(11));
        let b: DenseMatrix<f64> = xavier_init(7, 9, &mut Rng::new(11));
        assert_eq!(a, b);

        let m: DenseMatrix<f64> = xavier_init(100, 100, &mut Rng::new(5));
        let bound = (6.0f64 / 200.0).sqrt();
        assert!(m.as_slice().iter().all(|x| x.abs() <= bound));
        // 10^4 draws of U(-b, b): sd of the mean is b/sqrt(3e4) ~ 1e-3.
        let mean = m.as_slice().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn derived_streams_are_stable() {
        let root = Rng::new(1);
        let mut a = root.derive(7);
        let mut consumed = root.clone();
        consumed.unit();
        let mut b = consumed.derive(7);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(root.derive(1).next_u64(), root.derive(2).next_u64());
    }

    #[test]
    fn alias_table_matches_weights() {
        let table = AliasTable::new(&[1.0, 2.0, 7.0]).unwrap();
        let mut rng = Rng::new(9);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[table.sample(&mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip([0.1, 0.2, 0.7]) {
            assert!((*c as f64 / 1e5 - p).abs() < 0.01);
        }
        assert!(AliasTable::new(&[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn alias_table_implied_distribution_is_exact(ws in prop::collection::vec(0.0f64..10.0, 1..40)) {
            prop_assume!(ws.iter().sum::<f64>() > 1e-6);
            let table = AliasTable::new(&ws).unwrap();
            let n = ws.len() as f64;
            let mut implied = vec![0.0; ws.len()];
            for i in 0..ws.len() {
                implied[i] += table.prob[i] / n;
                implied[table.alias[i]] += (1.0 - table.prob[i]) / n;
            }
            let total: f64 = ws.iter().sum();
            for (q, w) in implied.iter().zip(&ws) {
                prop_assert!((q - w / total).abs() < 1e-9, "{q} vs {}", w / total);
            }
        }

        #[test]
        fn matvec_distributes(seed in 0u64..1000, rows in 1usize..8, cols in 1usize..8) {
            let mut rng = Rng::new(seed);
            let m: DenseMatrix<f64> = xavier_init(rows, cols, &mut rng);
            let a: DenseVector<f64> = (0..cols).map(|_| rng.unit() * 4.0 - 2.0).collect();
            let b: DenseVector<f64> = (0..cols).map(|_| rng.unit() * 4.0 - 2.0).collect();
            let lhs = m.matvec(&a.add(&b).unwrap()).unwrap();
            let rhs = m.matvec(&a).unwrap().add(&m.matvec(&b).unwrap()).unwrap();
            for i in 0..rows {
                prop_assert!((lhs[i] - rhs[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let a = softmax(&v(&xs)).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = softmax(&v(&shifted)).unwrap();
            let total: f64 = a.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for i in 0..xs.len() {
                prop_assert!(a[i] > 0.0);
                prop_assert!((a[i] - b[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn sgd_zero_lr_is_identity(xs in prop::collection::vec(-5.0f64..5.0, 1..10), l2 in 0.0f64..2.0) {
            let mut p = v(&xs);
            let g: DenseVector<f64> = xs.iter().map(|x| x * 0.3 + 1.0).collect();
            sgd_step(&mut p, &g, 0.0, l2).unwrap();
            prop_assert_eq!(p, v(&xs));
        }
    }
}
