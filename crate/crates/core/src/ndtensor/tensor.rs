use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major `f64` array.
///
/// `grad` is only populated for tensors living inside a [`Graph`](super::Graph)
/// after a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive and rank at least 1".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// Entries drawn from N(0, std²).
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        for x in &mut t.data {
            *x = std * rng.normal();
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Product of all leading extents.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &e) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < e);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_slot(&mut self) -> &mut Option<Vec<f64>> {
        &mut self.grad
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Matrix view check used by the 2-D operations.
    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }
}

/// Dense kernels shared by the graph and by the plain-tensor API.
pub mod kernels {
    use crate::error::{Error, Result};

    pub const GELU_C: f64 = 0.044_715;
    pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

    /// Output columns computed together; their partial sums stay in registers.
    const LANES: usize = 8;

    /// `a[m×k] · b[k×p]`, each output accumulated in ascending inner index.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        if p == 0 || k == 0 {
            return vec![0.0; m * p];
        }
        let b = &b[..k * p];
        let mut c = Vec::with_capacity(m * p);
        for arow in a[..m * k].chunks_exact(k) {
            dot_block(arow.iter().copied(), b, p, &mut c);
        }
        c
    }

    /// `a[m×k] · b[p×k]ᵀ`, with the same accumulation order as [`matmul`].
    pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let b = &b[..p * k];
        let mut bt = Vec::with_capacity(k * p);
        for t in 0..k {
            for j in 0..p {
                bt.push(b[j * k + t]);
            }
        }
        matmul(a, &bt, m, k, p)
    }

    /// `a[k×m]ᵀ · b[k×p]`, same accumulation order as [`matmul`].
    pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, p: usize) -> Vec<f64> {
        if p == 0 || k == 0 {
            return vec![0.0; m * p];
        }
        let (a, b) = (&a[..k * m], &b[..k * p]);
        let mut c = Vec::with_capacity(m * p);
        for i in 0..m {
            dot_block(a.iter().skip(i).step_by(m).copied(), b, p, &mut c);
        }
        c
    }

    /// Appends `Σ_t coef[t] · b[t][j]` for each column `j` of `b[k×p]`,
    /// summed in ascending `t` from zero.
    fn dot_block<I: Iterator<Item = f64> + Clone>(coef: I, b: &[f64], p: usize, out: &mut Vec<f64>) {
        let mut j = 0;
        while j + LANES <= p {
            let mut acc = [0.0; LANES];
            for (av, brow) in coef.clone().zip(b.chunks_exact(p)) {
                let bs: &[f64; LANES] = brow[j..j + LANES].try_into().unwrap();
                for (x, y) in acc.iter_mut().zip(bs) {
                    *x += av * y;
                }
            }
            out.extend_from_slice(&acc);
            j += LANES;
        }
        for jj in j..p {
            let mut s = 0.0;
            for (av, brow) in coef.clone().zip(b.chunks_exact(p)) {
                s += av * brow[jj];
            }
            out.push(s);
        }
    }

    /// Numerically stable softmax over rows of width `cols`.
    ///
    /// `-inf` entries map to exactly zero; a row without any finite entry
    /// is an error.
    pub fn row_softmax(x: &[f64], cols: usize, op: &'static str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        for (r, (row, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::DegenerateRow { op, row: r });
            }
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        Ok(out)
    }

    /// The tanh term shared by [`gelu`] and [`gelu_grad`].
    pub fn gelu_tanh(x: f64) -> f64 {
        (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()
    }

    pub fn gelu_with(x: f64, t: f64) -> f64 {
        0.5 * x * (1.0 + t)
    }

    pub fn gelu_grad_with(x: f64, t: f64) -> f64 {
        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    pub fn gelu(x: f64) -> f64 {
        gelu_with(x, gelu_tanh(x))
    }

    pub fn gelu_grad(x: f64) -> f64 {
        gelu_grad_with(x, gelu_tanh(x))
    }
}
