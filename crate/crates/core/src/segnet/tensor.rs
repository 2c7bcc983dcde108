use crate::real::Real;

/// Channel-major feature map `[channels, d, h, w]`; 2-D maps have `d == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>());
        Self {
            channels,
            dims,
            data,
        }
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }
}
