use super::{Tensor5, UNetError};

/// Anything that maps a multi-channel patch to one channel of logits with
/// the same spatial shape. Implementations must be deterministic and free of
/// shared mutable state so tiles can run concurrently.
pub trait Backend: Send + Sync {
    fn infer(&self, patch: &Tensor5) -> Result<Tensor5, UNetError>;

    /// Every spatial axis handed to [`Backend::infer`] must be a multiple of this.
    fn spatial_multiple(&self) -> usize {
        1
    }

    fn name(&self) -> &str;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn infer(&self, patch: &Tensor5) -> Result<Tensor5, UNetError> {
        (**self).infer(patch)
    }

    fn spatial_multiple(&self) -> usize {
        (**self).spatial_multiple()
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Voxelwise linear test double: `logit = w0 * ch0 + w1 * ch1 - t`.
///
/// Being strictly voxelwise, it commutes with any axis permutation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticBackend {
    pub w0: f64,
    pub w1: f64,
    pub t: f64,
}

impl Default for AnalyticBackend {
    fn default() -> Self {
        Self { w0: 1.0, w1: 1.0, t: 0.75 }
    }
}

impl AnalyticBackend {
    pub fn new(w0: f64, w1: f64, t: f64) -> Self {
        Self { w0, w1, t }
    }
}

impl Backend for AnalyticBackend {
    fn infer(&self, patch: &Tensor5) -> Result<Tensor5, UNetError> {
        if patch.channels() != 2 {
            return Err(UNetError::ShapeMismatch(format!(
                "analytic backend takes 2 channels, got {}",
                patch.channels()
            )));
        }
        let logits = patch
            .channel(0)
            .iter()
            .zip(patch.channel(1))
            .map(|(&a, &b)| (self.w0 * a as f64 + self.w1 * b as f64 - self.t) as f32)
            .collect();
        Tensor5::new(1, patch.shape(), logits)
    }

    fn name(&self) -> &str {
        "analytic"
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ViewAxis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_channel(c0: f32, c1: f32) -> Tensor5 {
        let mut data = vec![c0; 8];
        data.extend(vec![c1; 8]);
        Tensor5::new(2, [2, 2, 2], data).unwrap()
    }

    #[test]
    fn analytic_values() {
        let b = AnalyticBackend::default();
        assert!(b.infer(&two_channel(0.0, 0.0)).unwrap().data().iter().all(|&v| v == -0.75));
        assert!(b.infer(&two_channel(0.0, 0.75)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(b.infer(&Tensor5::zeros(3, [2, 2, 2])).is_err());
    }

    #[test]
    fn analytic_commutes_with_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..2 * 60).map(|_| rng.random_range(-2.0..2.0)).collect();
        let patch = Tensor5::new(2, [3, 4, 5], data).unwrap();
        let b = AnalyticBackend::default();
        for view in ViewAxis::ALL {
            let p = view.permutation();
            let lhs = b.infer(&patch).unwrap().permute_axes(p);
            let rhs = b.infer(&patch.permute_axes(p)).unwrap();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn sigmoid_midpoint() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) > 0.999_999);
    }
}
