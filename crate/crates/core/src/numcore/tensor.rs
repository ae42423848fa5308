use super::{NumError, Result, Scalar};

/// Dimensions of a rank-4 tensor in (batch, channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat row-major offset of element (n, c, y, x).
    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    /// Scalar dims (1, 1, 1, 1).
    pub fn scalar() -> Self {
        Dims::new(1, 1, 1, 1)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 float tensor with an optional gradient buffer of the same
/// shape. The gradient is only present on tensors that participate in
/// differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    dims: Dims,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from dims and a row-major data buffer.
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(NumError::Shape {
                op: "Tensor::new",
                detail: format!("dims {} expect {} values, got {}", dims, dims.len(), data.len()),
            });
        }
        Ok(Tensor { dims, data, grad: None })
    }

    pub fn zeros(dims: Dims) -> Self {
        Tensor { dims, data: vec![T::zero(); dims.len()], grad: None }
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor { dims, data: vec![value; dims.len()], grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { dims: Dims::scalar(), data: vec![value], grad: None }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { dims, data, grad: None }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Ensure the gradient buffer exists (zero-filled) and return it.
    pub fn grad_or_init(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.dims.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    /// Simultaneous view of the data and the (lazily created) gradient.
    pub fn data_and_grad_mut(&mut self) -> (&[T], &mut [T]) {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.dims.len()]);
        }
        (&self.data, self.grad.as_deref_mut().unwrap())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.dims.at(n, c, y, x)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.dims.at(n, c, y, x);
        &mut self.data[i]
    }

    /// Value of a scalar (1x1x1x1) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.dims.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumError::NonFinite { context: context.to_string() })
        }
    }

    /// Convert element type (f32 -> f64 for shadow-mode checks and back).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            grad: None,
        }
    }

    /// Concatenate single-sample tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| NumError::Shape {
            op: "stack",
            detail: "empty tensor list".into(),
        })?;
        let d = first.dims();
        let mut data = Vec::with_capacity(parts.len() * d.len());
        for part in parts {
            if part.dims().c != d.c || part.dims().h != d.h || part.dims().w != d.w {
                return Err(NumError::Shape {
                    op: "stack",
                    detail: format!("mixed dims {} vs {}", part.dims(), d),
                });
            }
            data.extend_from_slice(part.data());
        }
        let n: usize = parts.iter().map(|p| p.dims().n).sum();
        Tensor::new(Dims::new(n, d.c, d.h, d.w), data)
    }
}

/// Per-pixel integer class labels for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    h: usize,
    w: usize,
    data: Vec<u16>,
}

impl ClassMask {
    pub fn new(h: usize, w: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != h * w {
            return Err(NumError::Shape {
                op: "ClassMask::new",
                detail: format!("{}x{} expects {} labels, got {}", h, w, h * w, data.len()),
            });
        }
        Ok(ClassMask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ClassMask { h, w, data: vec![0; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline(always)]
    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.w + x]
    }

    #[inline(always)]
    pub fn set(&mut self, y: usize, x: usize, class: u16) {
        self.data[y * self.w + x] = class;
    }

    pub fn max_class(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}
