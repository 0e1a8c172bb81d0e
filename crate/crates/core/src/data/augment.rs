//! Online augmentation. Geometric transforms move a patch and its mask
//! together (mask resampled nearest-neighbour); intensity transforms touch
//! the patch only. Z is treated as the anisotropic axis, so rotations and
//! flips stay in the X/Y plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{offset, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Chance that any augmentation is applied to a sample.
    pub probability: f64,
    pub contrast_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub translation_vox: f64,
    pub flip_axes: Vec<usize>,
    pub rot90: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.8,
            contrast_range: [0.8, 1.25],
            noise_sigma_range: [0.0, 0.05],
            rotation_deg: 10.0,
            scale_range: [0.9, 1.1],
            translation_vox: 2.0,
            flip_axes: vec![0, 1],
            rot90: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "augment probability must be in [0,1], got {}",
                self.probability
            )));
        }
        for (name, r) in [
            ("contrast_range", self.contrast_range),
            ("noise_sigma_range", self.noise_sigma_range),
            ("scale_range", self.scale_range),
        ] {
            if !(r[0] <= r[1]) || r[0] < 0.0 {
                return Err(Error::Config(format!("{name} must be an ordered nonnegative range, got {r:?}")));
            }
        }
        if self.flip_axes.iter().any(|&a| a > 2) {
            return Err(Error::Config(format!("flip axes must be 0..=2, got {:?}", self.flip_axes)));
        }
        if self.rotation_deg < 0.0 || self.translation_vox < 0.0 {
            return Err(Error::Config("rotation and translation ranges must be >= 0".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Reverses the volume along spatial `axis` (0 = X, 1 = Y, 2 = Z).
pub fn flip(t: &Tensor, axis: usize) -> Result<Tensor> {
    let [c, x, y, z] = t.dims4()?;
    let d = [x, y, z];
    let mut out = t.clone();
    for ch in 0..c {
        for k in 0..z {
            for j in 0..y {
                for i in 0..x {
                    let mut src = [i, j, k];
                    src[axis] = d[axis] - 1 - src[axis];
                    out.data[offset(d, ch, i, j, k)] = t.data[offset(d, ch, src[0], src[1], src[2])];
                }
            }
        }
    }
    Ok(out)
}

/// Rotates `quarter_turns` × 90° in the X/Y plane. Odd turns need X == Y.
pub fn rot90_xy(t: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let [c, x, y, z] = t.dims4()?;
    let turns = quarter_turns % 4;
    if turns % 2 == 1 && x != y {
        return Err(Error::Dimension(format!(
            "odd 90° rotation needs a square X/Y plane, got {x}x{y}"
        )));
    }
    let d = [x, y, z];
    let mut out = t.clone();
    for ch in 0..c {
        for k in 0..z {
            for j in 0..y {
                for i in 0..x {
                    let (si, sj) = match turns {
                        0 => (i, j),
                        1 => (j, x - 1 - i),
                        2 => (x - 1 - i, y - 1 - j),
                        _ => (y - 1 - j, i),
                    };
                    out.data[offset(d, ch, i, j, k)] = t.data[offset(d, ch, si, sj, k)];
                }
            }
        }
    }
    Ok(out)
}

/// In-plane similarity warp about the patch centre. Image is bilinear,
/// mask nearest-neighbour; samples outside the patch read as zero.
fn affine_xy(patch: &Tensor, mask: &Tensor, angle: f64, scale: f64, shift: [f64; 2]) -> Result<(Tensor, Tensor)> {
    let [_, x, y, z] = patch.dims4()?;
    let d = [x, y, z];
    let (cx, cy) = ((x as f64 - 1.0) / 2.0, (y as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let mut out_p = Tensor::zeros(&patch.shape);
    let mut out_m = Tensor::zeros(&mask.shape);
    let at = |t: &Tensor, i: i64, j: i64, k: usize| -> f64 {
        if i < 0 || j < 0 || i >= x as i64 || j >= y as i64 {
            0.0
        } else {
            t.data[offset(d, 0, i as usize, j as usize, k)]
        }
    };
    for k in 0..z {
        for j in 0..y {
            for i in 0..x {
                // inverse map: output -> source
                let (u, v) = (i as f64 - cx - shift[0], j as f64 - cy - shift[1]);
                let sx = (c * u + s * v) / scale + cx;
                let sy = (-s * u + c * v) / scale + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let val = at(patch, x0, y0, k) * (1.0 - fx) * (1.0 - fy)
                    + at(patch, x0 + 1, y0, k) * fx * (1.0 - fy)
                    + at(patch, x0, y0 + 1, k) * (1.0 - fx) * fy
                    + at(patch, x0 + 1, y0 + 1, k) * fx * fy;
                let o = offset(d, 0, i, j, k);
                out_p.data[o] = val;
                out_m.data[o] = at(mask, sx.round() as i64, sy.round() as i64, k);
            }
        }
    }
    Ok((out_p, out_m))
}

/// Applies a seed-determined random subset of transforms with probability
/// `config.probability`; otherwise returns the inputs unchanged.
pub fn augment(patch: &Tensor, mask: &Tensor, config: &AugmentConfig, seed: u64) -> Result<(Tensor, Tensor)> {
    if patch.shape != mask.shape {
        return Err(Error::Dimension(format!(
            "augment: patch {:?} vs mask {:?}",
            patch.shape, mask.shape
        )));
    }
    let [c, x, y, _] = patch.dims4()?;
    if c != 1 {
        return Err(Error::Dimension(format!("augment expects one channel, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !rng.random_bool(config.probability) {
        return Ok((patch.clone(), mask.clone()));
    }
    let (mut p, mut m) = (patch.clone(), mask.clone());

    if config.rot90 && rng.random_bool(0.5) {
        let turns = if x == y { rng.random_range(1..4) } else { 2 };
        p = rot90_xy(&p, turns)?;
        m = rot90_xy(&m, turns)?;
    }
    for &axis in &config.flip_axes {
        if rng.random_bool(0.5) {
            p = flip(&p, axis)?;
            m = flip(&m, axis)?;
        }
    }
    if rng.random_bool(0.5) {
        let angle = rng.random_range(-1.0..=1.0) * config.rotation_deg.to_radians();
        let scale = uniform(&mut rng, config.scale_range);
        let t = config.translation_vox;
        let shift = [rng.random_range(-t..=t), rng.random_range(-t..=t)];
        (p, m) = affine_xy(&p, &m, angle, scale, shift)?;
    }
    if rng.random_bool(0.5) {
        let factor = uniform(&mut rng, config.contrast_range);
        let mean = p.data.iter().sum::<f64>() / p.numel() as f64;
        p.data.iter_mut().for_each(|v| *v = (*v - mean) * factor + mean);
    }
    if rng.random_bool(0.5) {
        let sigma = uniform(&mut rng, config.noise_sigma_range);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).unwrap();
            p.data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }
    p.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((p, m))
}
