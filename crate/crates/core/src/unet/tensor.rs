use crate::grid::{invert_permutation, permute_buffer, Grid3, GridError, Spacing3, Volume3};
use crate::windowing::MultiChannelVolume;

use super::UNetError;

/// Channel-major feature map with an implicit batch of one. Each channel is
/// stored like a [`Grid3`]: x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    channels: usize,
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Tensor5 {
    pub fn new(channels: usize, shape: [usize; 3], data: Vec<f32>) -> Result<Self, UNetError> {
        let expected = channels * shape.iter().product::<usize>();
        if channels == 0 || shape.contains(&0) || data.len() != expected {
            return Err(UNetError::ShapeMismatch(format!(
                "{} values for {channels} channels of {shape:?}",
                data.len()
            )));
        }
        Ok(Self { channels, shape, data })
    }

    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        Self { channels, shape, data: vec![0.0; channels * shape.iter().product::<usize>()] }
    }

    /// Stacks equally shaped volumes as channels.
    pub fn from_volumes(volumes: &[Volume3]) -> Result<Self, UNetError> {
        let first = volumes.first().ok_or_else(|| UNetError::ShapeMismatch("no channels".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(volumes.len() * first.len());
        for v in volumes {
            if v.shape() != shape {
                return Err(UNetError::ShapeMismatch(format!("channel {:?} vs {shape:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        Ok(Self { channels: volumes.len(), shape, data })
    }

    pub fn from_multichannel(mc: &MultiChannelVolume) -> Self {
        Self::from_volumes(mc.channels()).expect("channels of a MultiChannelVolume share one shape")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spatial_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * self.spatial_len() + x + self.shape[0] * (y + self.shape[1] * z)]
    }

    pub fn to_volume(&self, c: usize, spacing: Spacing3) -> Result<Volume3, GridError> {
        Grid3::from_vec(self.shape, spacing, self.channel(c).to_vec())
    }

    /// Permutes spatial axes of every channel; output axis `k` is input axis `perm[k]`.
    pub fn permute_axes(&self, perm: [usize; 3]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        let mut shape = self.shape;
        for c in 0..self.channels {
            let (s, buf) = permute_buffer(self.channel(c), self.shape, perm);
            shape = s;
            data.extend(buf);
        }
        Self { channels: self.channels, shape, data }
    }

    pub fn inverse_permute_axes(&self, perm: [usize; 3]) -> Self {
        self.permute_axes(invert_permutation(perm))
    }
}
