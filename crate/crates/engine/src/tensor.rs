use crate::error::{EngineError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Two-dimensional `[rows, cols]` is the common
/// case; gains are `[d]` and losses are scalars with an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(EngineError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// One-hot rows: `ids.len() x width`.
    pub fn one_hot(ids: &[usize], width: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![ids.len(), width]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= width {
                return Err(EngineError::Invalid(format!(
                    "one-hot index {id} out of range for width {width}"
                )));
            }
            t.data[r * width + id] = T::one();
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Leading dimension of a 2-D tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Trailing dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> T {
        norm(&self.data)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same("dot", other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same("add", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same("sub", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(EngineError::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64())).collect(),
        }
    }

    pub(crate) fn check_same(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(EngineError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Row-major matrix view, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T: Scalar> MatView<'a, T> {
    pub fn of(t: &'a Tensor<T>, trans: bool) -> Self {
        Self {
            data: t.data(),
            rows: t.rows(),
            cols: t.cols(),
            trans,
        }
    }

    pub fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out` for logical (possibly transposed) views.
pub(crate) fn gemm<T: Scalar>(a: MatView<T>, b: MatView<T>, out: &mut [T], beta: T) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!(out.len(), m * n, "output size");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and strides are checked against the slice lengths
    // above, and `out` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut out = vec![0.0; 4];
        gemm(
            MatView::of(&a, false),
            MatView::of(&b, false),
            &mut out,
            0.0,
        );
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
        gemm(MatView::of(&a, false), MatView::of(&b, true), &mut out, 0.0);
        assert_eq!(out, vec![17.0, 23.0, 39.0, 53.0]);
        gemm(MatView::of(&a, true), MatView::of(&b, false), &mut out, 0.0);
        assert_eq!(out, vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(Tensor::<f32>::one_hot(&[0, 3], 3).is_err());
        let t = Tensor::<f32>::one_hot(&[2, 0], 3).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
