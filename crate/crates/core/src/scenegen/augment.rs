use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, SceneError, SceneSpec, GRID};
use crate::model::Image;

/// Largest per-channel jitter offset.
pub const JITTER: f32 = 10.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentPolicy {
    Identity,
    Hflip,
    Jitter,
}

impl FromStr for AugmentPolicy {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "hflip" => Ok(Self::Hflip),
            "jitter" => Ok(Self::Jitter),
            other => Err(SceneError::UnknownPolicy(other.to_string())),
        }
    }
}

/// Produces a modified copy of an (image, spec) pair.
///
/// `Hflip` mirrors both the pixels and the spec's columns, so labels
/// regenerated from the new spec stay correct. `Jitter` shifts each color
/// channel by one offset drawn uniformly from `±10/255` and clamps to
/// `[0, 1]`; the spec is unchanged.
pub fn augment(image: &Image, scene: &SceneSpec, policy: AugmentPolicy, seed: u64) -> (Image, SceneSpec) {
    match policy {
        AugmentPolicy::Identity => (image.clone(), scene.clone()),
        AugmentPolicy::Hflip => {
            let mut out = image.clone();
            for r in 0..image.height {
                for c in 0..image.width {
                    out.set_pixel(r, image.width - 1 - c, image.pixel(r, c));
                }
            }
            let mut spec = scene.clone();
            for o in &mut spec.objects {
                o.col = GRID - 1 - o.col;
            }
            spec.normalize();
            (out, spec)
        }
        AugmentPolicy::Jitter => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let offsets: [f32; 3] = std::array::from_fn(|_| rng.random_range(-JITTER..=JITTER));
            let mut out = image.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                *v = (*v + offsets[i % 3]).clamp(0.0, 1.0);
            }
            (out, scene.clone())
        }
    }
}
