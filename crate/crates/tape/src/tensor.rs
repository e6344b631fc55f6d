use crate::Element;

/// Dense row-major array. Images and feature maps use NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "tensor data length {} does not match shape {:?}", data.len(), shape);
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: E) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| E::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Shape as `[n, c, h, w]`; panics unless the tensor is rank 4.
    pub fn dims4(&self) -> [usize; 4] {
        match self.shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    /// Shape as `[rows, cols]`; panics unless the tensor is rank 2.
    pub fn dims2(&self) -> [usize; 2] {
        match self.shape[..] {
            [r, c] => [r, c],
            _ => panic!("expected a rank-2 tensor, got shape {:?}", self.shape),
        }
    }

    /// The single value of a tensor with one element.
    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape to {shape:?}");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| F::of(v.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> E {
        self.sum() / E::of(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Element `(n, c, y, x)` of a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        let [_, cc, h, w] = self.dims4();
        self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "stack_batch of zero tensors");
        let [_, c, h, w] = items[0].dims4();
        let mut data = Vec::with_capacity(items.iter().map(Tensor::numel).sum());
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.dims4();
            assert_eq!((tc, th, tw), (c, h, w), "stack_batch shape mismatch");
            data.extend_from_slice(&t.data);
            n += tn;
        }
        Self::new(vec![n, c, h, w], data)
    }

    /// Item `i` of a rank-4 batch, kept as a batch of one.
    pub fn batch_item(&self, i: usize) -> Self {
        let [n, c, h, w] = self.dims4();
        assert!(i < n, "batch index {i} out of range for batch of {n}");
        let len = c * h * w;
        Self::new(vec![1, c, h, w], self.data[i * len..(i + 1) * len].to_vec())
    }
}
