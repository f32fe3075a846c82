//! Dense 4-D tensors in row-major `(n, c, h, w)` order.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type. Training runs in `f32`; gradient checking uses `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Inverse of [`Shape::index`].
    pub fn unravel(&self, flat: usize) -> (usize, usize, usize, usize) {
        let w = flat % self.w;
        let rest = flat / self.w;
        let h = rest % self.h;
        let rest = rest / self.h;
        (rest / self.c, rest % self.c, h, w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(s: [usize; 4]) -> Self {
        Shape::new(s[0], s[1], s[2], s[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match shape {shape} ({} elements)",
                    data.len(),
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(
        shape: impl Into<Shape>,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Per-channel vector stored as `(1, c, 1, 1)`.
    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            shape: Shape::new(1, values.len(), 1, 1),
            data: values,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Reinterprets the flat buffer under a new shape with the same element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fails with [`Error::NonFinite`] naming `what` if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len().max(1) as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        check_same("add_assign", self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }
}

pub(crate) fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b}")));
    }
    Ok(())
}

/// Elementwise sum or product of two equally shaped tensors.
pub fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, kind: Elementwise) -> Result<Tensor<T>> {
    check_same("elementwise", a.shape, b.shape)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match kind {
            Elementwise::Add => x + y,
            Elementwise::Mul => x * y,
        })
        .collect();
    let out = Tensor {
        shape: a.shape,
        data,
    };
    out.ensure_finite("elementwise")?;
    Ok(out)
}
