//! Iso-contours on a slice and PNG overlays.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{normalize, select_best_slice};
use crate::error::{Error, Result};
use crate::tensor::{offset, Tensor};

/// Line segment in voxel coordinates (voxel centres at integers).
pub type Segment = [[f64; 2]; 2];

const CONTOUR_RGB: [u8; 3] = [255, 220, 0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceRule {
    /// Slice with maximal summed attention.
    Best,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlaySpec {
    /// Level on the max-normalized map, in (0, 1].
    pub threshold: f64,
    pub slice: SliceRule,
    /// Nearest-neighbour upscale factor of the output image.
    pub scale: u32,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec {
            threshold: 0.5,
            slice: SliceRule::Best,
            scale: 8,
        }
    }
}

/// Marching squares over an `nx × ny` X-fastest grid at `level`; a corner
/// counts as inside when its value is `>= level`. Saddles are split by the
/// cell-centre average.
pub fn marching_squares(values: &[f64], nx: usize, ny: usize, level: f64) -> Vec<Segment> {
    let at = |i: usize, j: usize| values[j * nx + i];
    let mut segs = Vec::new();
    if nx < 2 || ny < 2 {
        return segs;
    }
    let lerp = |p: [f64; 2], q: [f64; 2], vp: f64, vq: f64| -> [f64; 2] {
        let t = if vq == vp { 0.5 } else { ((level - vp) / (vq - vp)).clamp(0.0, 1.0) };
        [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
    };
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            // corners counter-clockwise from (i, j)
            let pos = [
                [i as f64, j as f64],
                [i as f64 + 1.0, j as f64],
                [i as f64 + 1.0, j as f64 + 1.0],
                [i as f64, j as f64 + 1.0],
            ];
            let v = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
            let inside = v.map(|x| x >= level);
            let case = inside.iter().enumerate().fold(0, |acc, (k, &b)| acc | ((b as usize) << k));
            if case == 0 || case == 15 {
                continue;
            }
            let edge = |e: usize| lerp(pos[e], pos[(e + 1) % 4], v[e], v[(e + 1) % 4]);
            // edges: 0 bottom, 1 right, 2 top, 3 left
            let crossing: Vec<usize> = (0..4).filter(|&e| inside[e] != inside[(e + 1) % 4]).collect();
            if crossing.len() == 2 {
                segs.push([edge(crossing[0]), edge(crossing[1])]);
            } else {
                let centre_in = v.iter().sum::<f64>() / 4.0 >= level;
                // Pair each crossing edge with its neighbour so that the
                // corner cut off is the minority one relative to the centre.
                let pairs = if inside[0] == centre_in { [(0, 1), (2, 3)] } else { [(3, 0), (1, 2)] };
                for (a, b) in pairs {
                    segs.push([edge(a), edge(b)]);
                }
            }
        }
    }
    segs
}

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1) * 2;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
        let (px, py) = (x.round() as i64, y.round() as i64);
        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
            img.put_pixel(px as u32, py as u32, Rgb(CONTOUR_RGB));
        }
    }
}

/// Renders one slice of `patch` (`[1,X,Y,Z]`, intensities in [0,1]) in
/// grayscale with the attention contour in yellow and writes a PNG. Returns
/// the slice index used.
pub fn render_overlay(patch: &Tensor, map: &Tensor, spec: &OverlaySpec, path: &Path) -> Result<usize> {
    let [_, x, y, z] = patch.dims4()?;
    if map.shape != patch.shape {
        return Err(Error::Dimension(format!(
            "attention map {:?} must match patch {:?}",
            map.shape, patch.shape
        )));
    }
    if !(spec.threshold > 0.0 && spec.threshold <= 1.0) || spec.scale == 0 {
        return Err(Error::Parameter(format!(
            "overlay threshold must be in (0,1] and scale >= 1, got {} and {}",
            spec.threshold, spec.scale
        )));
    }
    let k = match spec.slice {
        SliceRule::Best => select_best_slice(map)?,
        SliceRule::Fixed(k) if k < z => k,
        SliceRule::Fixed(k) => return Err(Error::Parameter(format!("slice {k} outside 0..{z}"))),
    };
    let d = [x, y, z];
    let s = spec.scale;
    let mut img = RgbImage::new(x as u32 * s, y as u32 * s);
    for j in 0..y {
        for i in 0..x {
            let g = (patch.data[offset(d, 0, i, j, k)].clamp(0.0, 1.0) * 255.0).round() as u8;
            for dy in 0..s {
                for dx in 0..s {
                    img.put_pixel(i as u32 * s + dx, j as u32 * s + dy, Rgb([g, g, g]));
                }
            }
        }
    }
    let norm = normalize(map);
    if norm.max() > 0.0 {
        let start = offset(d, 0, 0, 0, k);
        let slice = &norm.data[start..start + x * y];
        let half = (s as f64 - 1.0) / 2.0;
        for [a, b] in marching_squares(slice, x, y, spec.threshold) {
            let px = |p: [f64; 2]| [p[0] * s as f64 + half, p[1] * s as f64 + half];
            draw_line(&mut img, px(a), px(b));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(nx: usize, ny: usize) -> Vec<f64> {
        let mut v = vec![0.0; nx * ny];
        for (i, j) in [(2, 2), (3, 2), (4, 2), (2, 3), (3, 3), (3, 4)] {
            v[j * nx + i] = 1.0;
        }
        v
    }

    #[test]
    fn indicator_contour_runs_between_inside_and_outside_voxels() {
        let (nx, ny) = (7, 7);
        let v = blob(nx, ny);
        let segs = marching_squares(&v, nx, ny, 0.5);
        assert!(!segs.is_empty());
        for p in segs.iter().flatten() {
            // every vertex is the midpoint of a grid edge joining an inside
            // and an outside voxel
            let (fx, fy) = (p[0].fract(), p[1].fract());
            let (a, b) = if fx == 0.5 {
                ((p[0].floor() as usize, p[1] as usize), (p[0].ceil() as usize, p[1] as usize))
            } else {
                assert_eq!(fy, 0.5, "{p:?}");
                ((p[0] as usize, p[1].floor() as usize), (p[0] as usize, p[1].ceil() as usize))
            };
            assert_ne!(v[a.1 * nx + a.0], v[b.1 * nx + b.0], "{p:?}");
        }
        // every in/out boundary edge is crossed
        let mut crossings = 0;
        for j in 0..ny {
            for i in 0..nx {
                if i + 1 < nx && v[j * nx + i] != v[j * nx + i + 1] {
                    crossings += 1;
                }
                if j + 1 < ny && v[j * nx + i] != v[(j + 1) * nx + i] {
                    crossings += 1;
                }
            }
        }
        let mut pts: Vec<(i64, i64)> = segs
            .iter()
            .flatten()
            .map(|p| ((p[0] * 2.0) as i64, (p[1] * 2.0) as i64))
            .collect();
        pts.sort();
        pts.dedup();
        assert_eq!(pts.len(), crossings);
    }

    #[test]
    fn threshold_one_isolates_the_maximum() {
        let (nx, ny) = (5, 5);
        let mut v = vec![0.2; 25];
        v[12] = 1.0;
        v[13] = 0.9;
        for p in marching_squares(&v, nx, ny, 1.0).iter().flatten() {
            assert!((p[0] - 2.0).abs() <= 1.0 && (p[1] - 2.0).abs() <= 1.0);
            // the contour touches only the argmax voxel itself
            assert!((p[0] - 2.0).abs() < 1e-12 && (p[1] - 2.0).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn zero_map_renders_gray_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.png");
        let patch = Tensor::new(vec![1, 4, 3, 2], (0..24).map(|i| i as f64 / 24.0).collect()).unwrap();
        let k = render_overlay(&patch, &Tensor::zeros(&[1, 4, 3, 2]), &OverlaySpec::default(), &path).unwrap();
        assert_eq!(k, 0);
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (32, 24));
        assert!(img.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn contour_is_drawn_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let patch = Tensor::full(&[1, 7, 7, 1], 0.3);
        let map = Tensor::new(vec![1, 7, 7, 1], blob(7, 7)).unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_overlay(&patch, &map, &OverlaySpec::default(), &a).unwrap();
        render_overlay(&patch, &map, &OverlaySpec::default(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let img = image::open(&a).unwrap().to_rgb8();
        assert!(img.pixels().any(|p| p.0 == CONTOUR_RGB));
    }
}
