//! Synthetic nodule phantoms.
//!
//! Benign: a smooth ellipsoid with a soft Gaussian rim. Malignant: the same
//! kind of ellipsoid with a rough boundary and 4–10 tapering radial
//! spicules. Both sit on a low-amplitude smoothed-noise background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::case::{Case, Label};
use crate::tensor::offset;

const BACKGROUND_MEAN: f64 = 0.15;
const BACKGROUND_STD: f64 = 0.04;
const RIM_SIGMA: f64 = 0.7;

struct Spicule {
    dir: [f64; 3],
    /// Distance from centre where the spicule ends.
    reach: f64,
    width: f64,
}

fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|c| c / n);
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn smooth_noise(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    for _ in 0..2 {
        for axis in 0..3 {
            let mut out = vec![0.0; n];
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let p = [x, y, z];
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for delta in [-1i64, 0, 1] {
                            let q = p[axis] as i64 + delta;
                            if q >= 0 && q < dims[axis] as i64 {
                                let mut r = p;
                                r[axis] = q as usize;
                                acc += v[offset(dims, 0, r[0], r[1], r[2])];
                                cnt += 1.0;
                            }
                        }
                        out[offset(dims, 0, x, y, z)] = acc / cnt;
                    }
                }
            }
            v = out;
        }
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    v.iter().map(|a| (a - mean) / std).collect()
}

/// Deterministic phantom for `(label, seed)` in a volume of `dims`.
pub fn synth_case(label: Label, dims: [usize; 3], seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(label.as_u8() as u64));
    let malignant = label == Label::Malignant;

    let centre: [f64; 3] = std::array::from_fn(|a| {
        let mid = (dims[a] as f64 - 1.0) / 2.0;
        let jitter = if a == 2 { 1.0 } else { 2.0 };
        mid + rng.random_range(-jitter..=jitter)
    });
    let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(2.0..=4.0));

    // Boundary roughness: sum of a few directional cosines.
    let harmonics: Vec<([f64; 3], f64, f64, f64)> = if malignant {
        let amp = rng.random_range(0.2..0.3);
        (0..5)
            .map(|_| {
                (
                    unit(&mut rng),
                    rng.random_range(2.0..4.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    amp / 5.0_f64.sqrt(),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let spicules: Vec<Spicule> = if malignant {
        let count = rng.random_range(4..=10);
        (0..count)
            .map(|_| {
                let dir = unit(&mut rng);
                let surface = 1.0 / dot(dir.map(|v| v * v), radii.map(|r| 1.0 / (r * r))).sqrt();
                Spicule {
                    dir,
                    reach: surface + rng.random_range(3.0..6.0),
                    width: rng.random_range(1.2..1.6),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let contrast = rng.random_range(0.55..0.7);
    let texture = smooth_noise(&mut rng, dims);
    let n: usize = dims.iter().product();
    let mut image = vec![0f32; n];
    let mut mask = vec![0u8; n];

    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let rel = [x as f64 - centre[0], y as f64 - centre[1], z as f64 - centre[2]];
                let dist = dot(rel, rel).sqrt();
                let dir = if dist > 0.0 { rel.map(|v| v / dist) } else { [1.0, 0.0, 0.0] };
                let rough = 1.0
                    + harmonics
                        .iter()
                        .map(|(v, freq, phase, a)| a * (freq * dot(dir, *v) + phase).cos())
                        .sum::<f64>();
                // ellipsoidal radius along this direction
                let r_dir = rough / dot(dir.map(|v| v * v), radii.map(|r| 1.0 / (r * r))).sqrt();
                let mut inside = dist <= r_dir;
                let mut fg = if inside {
                    1.0
                } else {
                    let out = dist - r_dir;
                    (-out * out / (2.0 * RIM_SIGMA * RIM_SIGMA)).exp()
                };
                for s in &spicules {
                    let t = dot(rel, s.dir);
                    if t <= 0.0 || t > s.reach {
                        continue;
                    }
                    let perp = (dist * dist - t * t).max(0.0).sqrt();
                    let w = s.width * (1.0 - 0.5 * t / s.reach);
                    if perp <= w {
                        inside = true;
                    }
                    let soft = (-(perp * perp) / (2.0 * w * w)).exp();
                    fg = fg.max(soft);
                }
                let i = offset(dims, 0, x, y, z);
                let bg = BACKGROUND_MEAN + BACKGROUND_STD * texture[i];
                image[i] = (bg + contrast * fg).clamp(0.0, 1.0) as f32;
                mask[i] = inside as u8;
            }
        }
    }
    // The centre voxel always lies inside the ellipsoid (radii >= 2).
    let c = centre.map(|v| v.round() as usize);
    mask[offset(dims, 0, c[0], c[1], c[2])] = 1;

    let score = if malignant {
        rng.random_range(4..=5)
    } else {
        rng.random_range(1..=3)
    };
    Case {
        id: format!("{}-{seed}", label.name()),
        dims,
        image,
        mask,
        label,
        score: Some(score),
    }
}

/// Boundary faces of the mask divided by its voxel count.
pub fn surface_to_volume(mask: &[u8], dims: [usize; 3]) -> f64 {
    let mut faces = 0usize;
    let mut volume = 0usize;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask[offset(dims, 0, x, y, z)] == 0 {
                    continue;
                }
                volume += 1;
                let p = [x as i64, y as i64, z as i64];
                for axis in 0..3 {
                    for delta in [-1i64, 1] {
                        let mut q = p;
                        q[axis] += delta;
                        let outside = q[axis] < 0 || q[axis] >= dims[axis] as i64;
                        if outside || mask[offset(dims, 0, q[0] as usize, q[1] as usize, q[2] as usize)] == 0 {
                            faces += 1;
                        }
                    }
                }
            }
        }
    }
    faces as f64 / volume.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: [usize; 3] = [24, 24, 12];

    #[test]
    fn deterministic_and_valid() {
        for label in [Label::Benign, Label::Malignant] {
            for seed in 0..20 {
                let a = synth_case(label, DIMS, seed);
                assert_eq!(a, synth_case(label, DIMS, seed));
                a.validate().unwrap();
                assert!(a.mask.contains(&1));
                assert_eq!(a.label, label);
                assert_eq!(Label::from_score(a.score.unwrap()), label);
            }
        }
    }

    #[test]
    fn malignant_masks_have_more_surface() {
        let mean = |label| {
            (0..100)
                .map(|s| surface_to_volume(&synth_case(label, DIMS, s).mask, DIMS))
                .sum::<f64>()
                / 100.0
        };
        let (b, m) = (mean(Label::Benign), mean(Label::Malignant));
        assert!(m > b, "malignant {m} vs benign {b}");
    }

    #[test]
    fn surface_of_single_voxel() {
        let mut mask = vec![0u8; 27];
        mask[13] = 1;
        assert_eq!(surface_to_volume(&mask, [3, 3, 3]), 6.0);
    }
}
