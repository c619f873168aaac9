use std::fmt;

/// Dense 5-D tensor laid out as `[batch, channel, d0, d1, d2]`, last axis fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 5], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    /// A `[n, c, 1, 1, 1]` tensor, the layout used for per-sample vectors.
    pub fn vector(n: usize, c: usize, data: Vec<f32>) -> Self {
        Self::from_vec([n, c, 1, 1, 1], data)
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Number of voxels in one channel plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`, contiguous.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape[1] * self.plane_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.shape[1] * self.plane_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies sample `n` into a new single-sample tensor.
    pub fn select(&self, n: usize) -> Tensor {
        let [_, c, a, b, d] = self.shape;
        Tensor::from_vec([1, c, a, b, d], self.sample(n).to_vec())
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let [_, c, a, b, d] = items[0].shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            assert_eq!(&t.shape[1..], &[c, a, b, d], "stack shape mismatch");
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([n, c, a, b, d], data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Concatenates two tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, d0, d1, d2] = a.shape;
    let [nb, cb, e0, e1, e2] = b.shape;
    assert_eq!((n, d0, d1, d2), (nb, e0, e1, e2), "concat shape mismatch");
    let mut out = Tensor::zeros([n, ca + cb, d0, d1, d2]);
    let la = ca * a.plane_len();
    let lb = cb * b.plane_len();
    for i in 0..n {
        let dst = out.sample_mut(i);
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..la + lb].copy_from_slice(b.sample(i));
    }
    out
}

/// Inverse of [`concat_channels`]: splits the first `first` channels off.
pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let [n, c, d0, d1, d2] = t.shape;
    assert!(first <= c);
    let p = t.plane_len();
    let mut a = Tensor::zeros([n, first, d0, d1, d2]);
    let mut b = Tensor::zeros([n, c - first, d0, d1, d2]);
    for i in 0..n {
        let src = t.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..first * p]);
        b.sample_mut(i).copy_from_slice(&src[first * p..]);
    }
    (a, b)
}
