//! Procedural clear textures and depth maps.

use rand::{Rng, RngExt};

use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    Ramp,
    Radial,
    Noise,
}

impl DepthKind {
    pub const ALL: [DepthKind; 3] = [DepthKind::Ramp, DepthKind::Radial, DepthKind::Noise];
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0, 1]`, summed over octaves.
pub fn value_noise<R: Rng + ?Sized>(h: usize, w: usize, cells: usize, octaves: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut cells = cells.max(1);
    for _ in 0..octaves.max(1) {
        let g = cells + 1;
        let lattice: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let fy = y as f64 / h as f64 * cells as f64;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / w as f64 * cells as f64;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let l = |yy: usize, xx: usize| lattice[yy * g + xx];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                out[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        amp *= 0.5;
        cells *= 2;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 1e-12 { (*v - lo) / span } else { 0.5 };
    }
}

/// A depth map normalized to span `[0, 1]`.
pub fn depth_map<R: Rng + ?Sized>(kind: DepthKind, h: usize, w: usize, rng: &mut R) -> Image {
    let mut d = match kind {
        DepthKind::Ramp => {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let (dy, dx) = theta.sin_cos();
            (0..h * w)
                .map(|i| (i / w) as f64 * dy + (i % w) as f64 * dx)
                .collect::<Vec<_>>()
        }
        DepthKind::Radial => {
            let cy = rng.random::<f64>() * h as f64;
            let cx = rng.random::<f64>() * w as f64;
            let inverted = rng.random::<bool>();
            (0..h * w)
                .map(|i| {
                    let r = ((i / w) as f64 - cy).hypot((i % w) as f64 - cx);
                    if inverted {
                        -r
                    } else {
                        r
                    }
                })
                .collect()
        }
        DepthKind::Noise => value_noise(h, w, 2, 2, rng),
    };
    normalize(&mut d);
    Image::new(h, w, 1, d).expect("sized by construction")
}

fn hsv<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let h = rng.random::<f64>() * 6.0;
    let s = rng.random_range(0.5..1.0);
    let v = rng.random_range(0.25..1.0);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// A colorful clear scene: saturated colors blended by noise, flat shapes
/// for edges, and a shading field, so that dark pixels appear in every
/// neighborhood as in natural outdoor images.
pub fn texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Image {
    let base = [hsv(rng), hsv(rng)];
    let mix = value_noise(h, w, 3, 3, rng);
    let mut img = Image::from_fn(h, w, 3, |y, x, c| {
        let m = mix[y * w + x];
        base[0][c] * (1.0 - m) + base[1][c] * m
    });
    let shapes = rng.random_range(2..6);
    for _ in 0..shapes {
        let color = hsv(rng);
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        let ry = rng.random_range(2.0..(h as f64 / 3.0).max(3.0));
        let rx = rng.random_range(2.0..(w as f64 / 3.0).max(3.0));
        let disc = rng.random::<bool>();
        for y in 0..h {
            for x in 0..w {
                let (ny, nx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc {
                    ny * ny + nx * nx <= 1.0
                } else {
                    ny.abs() <= 1.0 && nx.abs() <= 1.0
                };
                if inside {
                    for (c, col) in color.iter().enumerate() {
                        img.set(y, x, c, *col);
                    }
                }
            }
        }
    }
    let shade = value_noise(h, w, 6, 2, rng);
    for y in 0..h {
        for x in 0..w {
            let f = 0.25 + 0.75 * shade[y * w + x];
            for c in 0..3 {
                img.set(y, x, c, img.get(y, x, c) * f);
            }
        }
    }
    img.clamped()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_maps_span_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in DepthKind::ALL {
            let d = depth_map(kind, 16, 20, &mut rng);
            let lo = d.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = d.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn texture_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = texture(24, 24, &mut rng);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
