use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with a flat row-major buffer (last dim fastest-varying).
/// Volumes are rank 5 (B, C, D, H, W); sequence views are rank 3 (B, L, C).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("all dims must be >= 1, got {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::shape(format!(
                "buffer length {} does not match dims {:?} (expect {})",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        assert!(!dims.is_empty() && n > 0, "zero-sized tensor: {dims:?}");
        Tensor { dims, data: vec![T::zero(); n] }
    }

    pub fn full(dims: Vec<usize>, v: T) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn scalar(v: T) -> Self {
        Tensor { dims: vec![1], data: vec![v] }
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Panicking accessor for kernels that have already validated rank.
    pub fn d5(&self) -> [usize; 5] {
        assert_eq!(self.dims.len(), 5, "expected rank-5 tensor, got {:?}", self.dims);
        [self.dims[0], self.dims[1], self.dims[2], self.dims[3], self.dims[4]]
    }

    pub fn d3(&self) -> [usize; 3] {
        assert_eq!(self.dims.len(), 3, "expected rank-3 tensor, got {:?}", self.dims);
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn d2(&self) -> [usize; 2] {
        assert_eq!(self.dims.len(), 2, "expected rank-2 tensor, got {:?}", self.dims);
        [self.dims[0], self.dims[1]]
    }

    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.dims.len() != 5 {
            return Err(Error::shape(format!("expected rank-5 tensor, got {:?}", self.dims)));
        }
        Ok(self.d5())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|x| U::of(x.dbl())).collect() }
    }
}

/// Flatten (B, C, D, H, W) to (B, L, C) with L = D*H*W.
/// Raster order is D-major, W-fastest: k = d*H*W + h*W + w.
pub fn vol_to_seq<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let [b, c, d, h, w] = v.d5();
    let l = d * h * w;
    let mut out = vec![T::zero(); b * l * c];
    let src = v.data();
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            for (k, &x) in plane.iter().enumerate() {
                out[(bi * l + k) * c + ci] = x;
            }
        }
    }
    Tensor { dims: vec![b, l, c], data: out }
}

/// Inverse of `vol_to_seq`; fails when L != D*H*W.
pub fn seq_to_vol<T: Scalar>(s: &Tensor<T>, spatial: [usize; 3]) -> Result<Tensor<T>> {
    let [b, l, c] = s.d3();
    let [d, h, w] = spatial;
    if l != d * h * w {
        return Err(Error::shape(format!(
            "sequence length {l} does not match spatial dims {d}x{h}x{w}"
        )));
    }
    let mut out = vec![T::zero(); b * c * l];
    let src = s.data();
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * l..(bi * c + ci + 1) * l];
            for (k, slot) in dst.iter_mut().enumerate() {
                *slot = src[(bi * l + k) * c + ci];
            }
        }
    }
    Tensor::new(vec![b, c, d, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn line_volume_flattens_in_order() {
        let v = Tensor::new(vec![1, 1, 1, 1, 2], vec![3.0f32, 7.0]).unwrap();
        let s = vol_to_seq(&v);
        assert_eq!(s.dims(), &[1, 2, 1]);
        assert_eq!(s.data(), &[3.0, 7.0]);
    }

    #[test]
    fn two_channel_line_interleaves_channels_per_position() {
        // channel 0 = [1,2], channel 1 = [10,20]; rows become [[1,10],[2,20]]
        let v = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0f32, 2.0, 10.0, 20.0]).unwrap();
        let s = vol_to_seq(&v);
        assert_eq!(s.dims(), &[1, 2, 2]);
        assert_eq!(s.data(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn raster_index_map_matches_hand_enumeration() {
        // 1x1x2x2x3 volume: k = d*6 + h*3 + w must walk the buffer in order.
        let n = 12usize;
        let v = Tensor::new(vec![1, 1, 2, 2, 3], (0..n).map(|i| i as f32).collect()).unwrap();
        let s = vol_to_seq(&v);
        for d in 0..2 {
            for h in 0..2 {
                for w in 0..3 {
                    let k = d * 6 + h * 3 + w;
                    assert_eq!(s.data()[k], (d * 6 + h * 3 + w) as f32);
                }
            }
        }
    }

    #[test]
    fn round_trip_is_identity_on_fixed_shape() {
        let dims = vec![2usize, 3, 4, 5, 6];
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        let v = Tensor::new(dims, data).unwrap();
        let back = seq_to_vol(&vol_to_seq(&v), [4, 5, 6]).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn mismatched_spatial_dims_error() {
        let s = Tensor::<f32>::zeros(vec![1, 8, 3]);
        assert!(seq_to_vol(&s, [2, 2, 3]).is_err());
    }

    #[test]
    fn bad_buffer_length_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            b in 1usize..3, c in 1usize..4, d in 1usize..4, h in 1usize..4, w in 1usize..4,
            seed in 0u64..1000,
        ) {
            let n = b * c * d * h * w;
            let data: Vec<f32> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 500.0 - 1.0).collect();
            let v = Tensor::new(vec![b, c, d, h, w], data).unwrap();
            let back = seq_to_vol(&vol_to_seq(&v), [d, h, w]).unwrap();
            prop_assert_eq!(v, back);
        }
    }
}
