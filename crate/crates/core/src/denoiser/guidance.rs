//! Guidance signals fed to the denoiser and condition dropout.
//!
//! A signal always carries an image-level label vector of length `K + 1`
//! where slot `K` is the learned null ("unconditional") token. Box and
//! segmentation guidance additionally carry a spatial mask that is
//! concatenated to the noisy image along channels; the null form of a
//! spatial mask is all zeros.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// Which guidance pathway a denoiser was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum GuidanceKind {
    /// No guidance; the label vector is the single null slot.
    None,
    /// Image-level one-hot or multi-hot label.
    Label,
    /// Binary box mask plus label.
    Box,
    /// K-channel segmentation mask plus pooled multi-hot label.
    Segmentation,
}

impl GuidanceKind {
    /// Extra input channels concatenated to the image for this kind.
    pub fn extra_channels(self, num_clusters: usize) -> usize {
        match self {
            GuidanceKind::None | GuidanceKind::Label => 0,
            GuidanceKind::Box => 1,
            GuidanceKind::Segmentation => num_clusters,
        }
    }
}

/// Spatial part of a guidance signal, stored channel-major (`C × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialGuidance {
    /// Binary box mask, `1` inside the box.
    Box { height: usize, width: usize, mask: Vec<f32> },
    /// Per-pixel one-hot over `channels` segment clusters.
    Segmentation { channels: usize, height: usize, width: usize, mask: Vec<f32> },
}

impl SpatialGuidance {
    pub fn channels(&self) -> usize {
        match self {
            SpatialGuidance::Box { .. } => 1,
            SpatialGuidance::Segmentation { channels, .. } => *channels,
        }
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        match self {
            SpatialGuidance::Box { height, width, .. } | SpatialGuidance::Segmentation { height, width, .. } => (*height, *width),
        }
    }

    pub fn mask(&self) -> &[f32] {
        match self {
            SpatialGuidance::Box { mask, .. } | SpatialGuidance::Segmentation { mask, .. } => mask,
        }
    }

    fn kind(&self) -> GuidanceKind {
        match self {
            SpatialGuidance::Box { .. } => GuidanceKind::Box,
            SpatialGuidance::Segmentation { .. } => GuidanceKind::Segmentation,
        }
    }

    fn zeroed(&self) -> Self {
        match self {
            SpatialGuidance::Box { height, width, mask } => SpatialGuidance::Box { height: *height, width: *width, mask: vec![0.0; mask.len()] },
            SpatialGuidance::Segmentation { channels, height, width, mask } => {
                SpatialGuidance::Segmentation { channels: *channels, height: *height, width: *width, mask: vec![0.0; mask.len()] }
            }
        }
    }

    fn is_zero(&self) -> bool {
        self.mask().iter().all(|&v| v == 0.0)
    }
}

/// Guidance for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSignal {
    label: Vec<f32>,
    spatial: Option<SpatialGuidance>,
}

impl GuidanceSignal {
    /// The unconditional signal of an unguided model (label dimension 1).
    pub fn none() -> Self {
        Self { label: vec![1.0], spatial: None }
    }

    /// The null label of a model with `num_clusters` real slots.
    pub fn null_label(num_clusters: usize) -> Self {
        let mut label = vec![0.0; num_clusters + 1];
        label[num_clusters] = 1.0;
        Self { label, spatial: None }
    }

    /// One-hot label for cluster `cluster` out of `num_clusters`.
    pub fn one_hot(cluster: usize, num_clusters: usize) -> Result<Self> {
        if cluster >= num_clusters {
            return Err(Error::InvalidGuidance(format!("cluster {cluster} >= {num_clusters}")));
        }
        let mut label = vec![0.0; num_clusters + 1];
        label[cluster] = 1.0;
        Ok(Self { label, spatial: None })
    }

    /// Label from a `{0,1}` vector of length `K + 1`.
    pub fn from_label(label: Vec<f32>) -> Result<Self> {
        if label.is_empty() {
            return Err(Error::InvalidGuidance("empty label vector".into()));
        }
        if label.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidGuidance("label entries must be 0 or 1".into()));
        }
        Ok(Self { label, spatial: None })
    }

    /// Multi-hot label over `num_clusters` real slots.
    pub fn multi_hot(active: &[usize], num_clusters: usize) -> Result<Self> {
        let mut label = vec![0.0; num_clusters + 1];
        for &a in active {
            if a >= num_clusters {
                return Err(Error::InvalidGuidance(format!("cluster {a} >= {num_clusters}")));
            }
            label[a] = 1.0;
        }
        Ok(Self { label, spatial: None })
    }

    /// Attaches a binary box mask (`height × width`, entries in `{0,1}`).
    pub fn with_box(mut self, height: usize, width: usize, mask: Vec<f32>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::InvalidGuidance(format!("box mask has {} entries, expected {}", mask.len(), height * width)));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidGuidance("box mask entries must be 0 or 1".into()));
        }
        self.spatial = Some(SpatialGuidance::Box { height, width, mask });
        Ok(self)
    }

    /// Attaches a segmentation mask (`channels × height × width`, one-hot per pixel).
    pub fn with_segmentation(mut self, channels: usize, height: usize, width: usize, mask: Vec<f32>) -> Result<Self> {
        let hw = height * width;
        if mask.len() != channels * hw {
            return Err(Error::InvalidGuidance(format!("segmentation mask has {} entries, expected {}", mask.len(), channels * hw)));
        }
        let zero = mask.iter().all(|&v| v == 0.0);
        if !zero {
            for p in 0..hw {
                let mut sum = 0.0;
                for c in 0..channels {
                    let v = mask[c * hw + p];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::InvalidGuidance("segmentation entries must be 0 or 1".into()));
                    }
                    sum += v;
                }
                if sum != 1.0 {
                    return Err(Error::InvalidGuidance(format!("pixel {p} is not one-hot across channels")));
                }
            }
        }
        self.spatial = Some(SpatialGuidance::Segmentation { channels, height, width, mask });
        Ok(self)
    }

    pub fn label(&self) -> &[f32] {
        &self.label
    }

    pub fn spatial(&self) -> Option<&SpatialGuidance> {
        self.spatial.as_ref()
    }

    /// The guidance pathway this signal belongs to.
    pub fn kind(&self) -> GuidanceKind {
        match &self.spatial {
            Some(s) => s.kind(),
            None if self.label.len() == 1 => GuidanceKind::None,
            None => GuidanceKind::Label,
        }
    }

    /// True for the null label and (if present) an all-zero mask.
    pub fn is_null(&self) -> bool {
        let k = self.label.len() - 1;
        let label_null = self.label[k] == 1.0 && self.label[..k].iter().all(|&v| v == 0.0);
        label_null && self.spatial.as_ref().is_none_or(SpatialGuidance::is_zero)
    }

    /// The null signal of the same kind and shape.
    pub fn null(&self) -> Self {
        let k = self.label.len() - 1;
        let mut label = vec![0.0; k + 1];
        label[k] = 1.0;
        Self { label, spatial: self.spatial.as_ref().map(SpatialGuidance::zeroed) }
    }
}

/// Replaces `guidance` by its null form with probability `p_uncond`.
pub fn drop_condition<R: Rng + ?Sized>(guidance: &GuidanceSignal, p_uncond: f64, rng: &mut R) -> Result<GuidanceSignal> {
    if !(0.0..=1.0).contains(&p_uncond) {
        return Err(Error::InvalidConfig(format!("p_uncond {p_uncond} outside [0, 1]")));
    }
    // Always consume one draw so the RNG stream does not depend on p.
    let u: f64 = rng.random();
    Ok(if u < p_uncond { guidance.null() } else { guidance.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn boxed() -> GuidanceSignal {
        GuidanceSignal::one_hot(1, 3).unwrap().with_box(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn p_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = boxed();
        for _ in 0..100 {
            assert_eq!(drop_condition(&g, 0.0, &mut rng).unwrap(), g);
        }
    }

    #[test]
    fn p_one_is_always_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = boxed();
        for _ in 0..100 {
            let d = drop_condition(&g, 1.0, &mut rng).unwrap();
            assert!(d.is_null());
            assert_eq!(d.label(), &[0.0, 0.0, 0.0, 1.0]);
            assert_eq!(d.spatial().unwrap().mask(), &[0.0; 4]);
            assert_eq!(d.kind(), GuidanceKind::Box);
        }
    }

    #[test]
    fn drop_fraction_matches_binomial_band() {
        // Binomial(1e5, 0.1): sd of the fraction is sqrt(0.09 / 1e5) ~ 9.5e-4,
        // so +-0.005 is more than 5 sd.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GuidanceSignal::one_hot(0, 4).unwrap();
        let n = 100_000;
        let nulls = (0..n).filter(|_| drop_condition(&g, 0.1, &mut rng).unwrap().is_null()).count();
        let frac = nulls as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.005, "null fraction {frac}");
    }

    #[test]
    fn rejects_invalid_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(drop_condition(&GuidanceSignal::none(), 1.5, &mut rng).is_err());
    }

    #[test]
    fn segmentation_must_be_one_hot() {
        let base = GuidanceSignal::multi_hot(&[0, 1], 2).unwrap();
        assert!(base.clone().with_segmentation(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).is_ok());
        assert!(base.clone().with_segmentation(2, 1, 2, vec![1.0, 1.0, 0.0, 1.0]).is_err());
        assert!(base.with_segmentation(2, 1, 2, vec![0.5, 0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn none_signal_is_its_own_null() {
        let g = GuidanceSignal::none();
        assert_eq!(g.kind(), GuidanceKind::None);
        assert!(g.is_null());
        assert_eq!(g.null(), g);
    }
}
