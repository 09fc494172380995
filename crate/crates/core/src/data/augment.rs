use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadCrop {
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HFlip {
    pub p: f64,
}

/// Zero-padded random crops and horizontal flips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    #[serde(default)]
    pub pad_crop: Option<PadCrop>,
    #[serde(default)]
    pub hflip: Option<HFlip>,
    #[serde(default)]
    pub seed: u64,
}

/// Random choices for one image: crop origin in the padded image and flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy::default()
    }

    pub fn is_identity(&self) -> bool {
        self.pad_crop.is_none_or(|c| c.pad == 0) && self.hflip.is_none_or(|f| f.p == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.hflip {
            if !(0.0..=1.0).contains(&f.p) {
                return Err(Error::InvalidArgument(format!("flip probability {} outside [0, 1]", f.p)));
            }
        }
        Ok(())
    }

    /// Draws for `count` images of batch `batch_index` in `epoch`.
    pub fn draws(&self, epoch: u64, batch_index: u64, count: usize) -> Vec<ImageDraw> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((epoch << 32) ^ batch_index);
        let pad = self.pad_crop.map_or(0, |c| c.pad);
        let p = self.hflip.map_or(0.0, |f| f.p);
        (0..count)
            .map(|_| {
                let (dy, dx) = if pad > 0 {
                    (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
                } else {
                    (0, 0)
                };
                let flip = p > 0.0 && rng.random_bool(p);
                ImageDraw { dy, dx, flip }
            })
            .collect()
    }
}

/// Applies `policy` to an `(n, c, h, w)` batch. Deterministic in
/// `(policy.seed, epoch, batch_index)`.
pub fn augment(batch: &Tensor, policy: &AugmentPolicy, epoch: u64, batch_index: u64) -> Result<Tensor> {
    policy.validate()?;
    if policy.is_identity() {
        return Ok(batch.clone());
    }
    if batch.rank() != 4 {
        return Err(Error::Shape(format!("augmentation needs (n, c, h, w), got {:?}", batch.shape())));
    }
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = policy.pad_crop.map_or(0, |p| p.pad);
    if pad > h || pad > w {
        return Err(Error::InvalidArgument(format!("pad {pad} exceeds image extent {h}x{w}")));
    }
    let draws = policy.draws(epoch, batch_index, n);
    let src = batch.data();
    let mut out = vec![0.0f32; src.len()];
    for (i, d) in draws.iter().enumerate() {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + d.dy as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + d.dx as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ox = if d.flip { w - 1 - x } else { x };
                    out[base + y * w + ox] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Ok(Tensor::from_parts(s.to_vec(), out))
}
