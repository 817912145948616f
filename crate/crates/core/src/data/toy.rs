use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugp_nn::Array;

use crate::data::{save_image, ImageTensor};
use crate::error::{invalid, Result};

struct Face {
    bg_top: [f32; 3],
    bg_bottom: [f32; 3],
    skin: [f32; 3],
    hair: [f32; 3],
    iris: [f32; 3],
    lips: [f32; 3],
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    eye_dy: f32,
    eye_dx: f32,
    eye_r: f32,
    mouth_dy: f32,
    mouth_w: f32,
    smile: f32,
    hair_drop: f32,
    light: f32,
}

fn color(rng: &mut ChaCha8Rng, base: [f32; 3], spread: f32) -> [f32; 3] {
    base.map(|c| (c + rng.random_range(-spread..spread)).clamp(0.0, 1.0))
}

impl Face {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.random_range(0.0f32..1.0);
        let skin = [0.95 - 0.5 * tone, 0.78 - 0.45 * tone, 0.66 - 0.42 * tone];
        Self {
            bg_top: color(rng, [0.5, 0.55, 0.6], 0.35),
            bg_bottom: color(rng, [0.4, 0.4, 0.45], 0.35),
            skin: color(rng, skin, 0.04),
            hair: color(rng, [0.25, 0.18, 0.12], 0.2),
            iris: color(rng, [0.3, 0.35, 0.3], 0.25),
            lips: color(rng, [0.7, 0.35, 0.35], 0.1),
            cx: rng.random_range(0.46..0.54),
            cy: rng.random_range(0.5..0.56),
            rx: rng.random_range(0.27..0.33),
            ry: rng.random_range(0.34..0.4),
            eye_dy: rng.random_range(-0.1..-0.05),
            eye_dx: rng.random_range(0.1..0.14),
            eye_r: rng.random_range(0.035..0.05),
            mouth_dy: rng.random_range(0.14..0.2),
            mouth_w: rng.random_range(0.08..0.13),
            smile: rng.random_range(-0.02..0.05),
            hair_drop: rng.random_range(0.0..0.12),
            light: rng.random_range(-0.5..0.5),
        }
    }

    /// Color at normalized coordinates `(u, v)` in `[0, 1]^2`.
    fn shade(&self, u: f32, v: f32) -> [f32; 3] {
        let mix = |a: [f32; 3], b: [f32; 3], t: f32| [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t);
        let soft = |d: f32, width: f32| (0.5 - d / width).clamp(0.0, 1.0);
        let mut px = mix(self.bg_top, self.bg_bottom, v);

        // hair cap behind and above the face
        let hd = ((u - self.cx) / (self.rx * 1.15)).powi(2)
            + ((v - self.cy + 0.06) / (self.ry * 1.1)).powi(2);
        let hair =
            soft((hd.sqrt() - 1.0) * self.rx, 0.02) * (v < self.cy + self.hair_drop) as u8 as f32;
        px = mix(px, self.hair, hair);

        let fd = ((u - self.cx) / self.rx).powi(2) + ((v - self.cy) / self.ry).powi(2);
        let face = soft((fd.sqrt() - 1.0) * self.rx, 0.02);
        let lit = 1.0 + 0.25 * self.light * (u - self.cx) / self.rx
            - 0.15 * ((v - self.cy) / self.ry).max(0.0);
        let skin = self.skin.map(|c| (c * lit).clamp(0.0, 1.0));
        px = mix(px, skin, face);

        // fringe over the forehead
        let fringe_edge = self.cy - self.ry * 0.55 + 0.03 * ((u - self.cx) * 25.0).sin();
        px = mix(px, self.hair, face * soft(v - fringe_edge, 0.02));

        for side in [-1.0f32, 1.0] {
            let (ex, ey) = (self.cx + side * self.eye_dx, self.cy + self.eye_dy);
            let d = (((u - ex) / 1.6).powi(2) + (v - ey).powi(2)).sqrt();
            px = mix(px, [0.95, 0.95, 0.93], face * soft(d - self.eye_r, 0.01));
            let di = ((u - ex).powi(2) + (v - ey).powi(2)).sqrt();
            px = mix(px, self.iris, face * soft(di - self.eye_r * 0.65, 0.01));
            px = mix(
                px,
                [0.05, 0.05, 0.05],
                face * soft(di - self.eye_r * 0.3, 0.01),
            );
            let brow = (v - (ey - self.eye_r * 1.9)).abs()
                + 0.5 * ((u - ex).abs() - self.eye_r * 1.6).max(0.0) * 4.0;
            px = mix(px, self.hair, face * soft(brow - 0.008, 0.01));
        }

        let nose = ((u - self.cx).abs() * 3.0 + (v - self.cy - 0.04).abs() * 0.8).max(0.0);
        px = mix(
            px,
            skin.map(|c| c * 0.85),
            face * soft(nose - 0.04, 0.02) * 0.6,
        );

        let mu = (u - self.cx) / self.mouth_w;
        let curve = self.cy + self.mouth_dy - self.smile * (1.0 - mu * mu);
        let mouth = if mu.abs() < 1.0 {
            soft((v - curve).abs() - 0.012, 0.01)
        } else {
            0.0
        };
        px = mix(px, self.lips, face * mouth);
        px
    }
}

/// Renders one procedural face at `size x size` with 2x2 supersampling.
pub fn toy_face(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let face = Face::random(&mut rng);
    let mut data = vec![0f32; 3 * size * size];
    let s = size as f32;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0f32; 3];
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let c = face.shade((x as f32 + ox) / s, (y as f32 + oy) / s);
                (0..3).for_each(|i| acc[i] += 0.25 * c[i]);
            }
            for c in 0..3 {
                data[(c * size + y) * size + x] = acc[c].clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(Array::from_vec([3, size, size], data)).expect("shaded values are clipped")
}

/// Writes `face_0000.png ...` into `dir`.
pub fn generate_toy_faces(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if n == 0 || size == 0 {
        return Err(invalid!("need a positive count and size"));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let path = dir.join(format!("face_{i:04}.png"));
            save_image(&toy_face(size, rng.random()), &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_vary_and_are_deterministic() {
        let a = toy_face(32, 1);
        assert_eq!(a, toy_face(32, 1));
        let b = toy_face(32, 2);
        let diff: f32 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f32>()
            / a.data().len() as f32;
        assert!(diff > 0.01);
    }
}
