//! Point-splat rasterizer with a z-buffer, plus the procedural per-vertex
//! texture driven by identity coefficients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::morphable::{instantiate_shape, project_weak_perspective, FaceParams, MorphableModel, Projection, MASK_HALF_HEIGHT, MASK_HALF_WIDTH};

/// Reference spread of identity coefficients; the texture gain is tuned so
/// coefficients of this size give pre-activations of order one.
pub const ID_COEFF_STD: f64 = 6.0;
const TEXTURE_GAIN: f64 = 1.0;
const TEXTURE_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    /// Row-major, values in `[0, 1]`.
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn black(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn mirrored(&self) -> Self {
        let n = self.size;
        let mut pixels = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                pixels[r * n + c] = self.pixels[r * n + (n - 1 - c)];
            }
        }
        Self { size: n, pixels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub intensity: Vec<f64>,
}

/// Seeded constants `G` (N x D_id, row-major) and `b` (N) of the texture map
/// `0.55 + 0.45 tanh(G alpha + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureBasis {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub id_dims: usize,
}

impl TextureBasis {
    /// Smooth, mirror-symmetric fields over the mask: every column of `G`
    /// and the bias are low-frequency cosine mixtures of `(|u|, v)`.
    pub fn new(model: &MorphableModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_u64);
        let n = model.num_vertices;
        let d = model.id_dims;
        let coords: Vec<(f64, f64)> = (0..n)
            .map(|v| {
                let p = model.mean_vertex(v);
                ((p[0] / MASK_HALF_WIDTH).abs(), p[1] / MASK_HALF_HEIGHT)
            })
            .collect();
        let scale = TEXTURE_GAIN / (ID_COEFF_STD * (d.max(1) as f64 * TEXTURE_FEATURES as f64 * 0.5).sqrt());

        let mut gain = vec![0.0; n * d];
        for k in 0..d {
            let field = random_field(&mut rng, TEXTURE_FEATURES, 3.0);
            for (v, &(u, w)) in coords.iter().enumerate() {
                gain[v * d + k] = scale * eval_field(&field, u, w);
            }
        }
        let tint = random_field(&mut rng, TEXTURE_FEATURES, 2.0);
        let bias = coords.iter().map(|&(u, w)| base_shading(u, w) + 0.2 * eval_field(&tint, u, w)).collect();
        Self { gain, bias, id_dims: d }
    }

    pub fn texture(&self, alpha_id: &[f64]) -> Texture {
        let d = self.id_dims;
        let intensity = self
            .bias
            .iter()
            .enumerate()
            .map(|(v, &b)| {
                let row = &self.gain[v * d..(v + 1) * d];
                let pre: f64 = row.iter().zip(alpha_id).map(|(g, a)| g * a).sum::<f64>() + b;
                0.55 + 0.45 * pre.tanh()
            })
            .collect();
        Texture { intensity }
    }
}

type Field = Vec<(f64, f64, f64, f64)>;

fn random_field(rng: &mut ChaCha8Rng, features: usize, freq: f64) -> Field {
    (0..features)
        .map(|_| {
            let wu: f64 = freq * rng.sample::<f64, _>(StandardNormal);
            let wv: f64 = freq * rng.sample::<f64, _>(StandardNormal);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.sample(StandardNormal);
            (wu, wv, phase, amp)
        })
        .collect()
}

fn eval_field(field: &Field, u: f64, v: f64) -> f64 {
    field.iter().map(|&(wu, wv, ph, a)| a * (wu * u + wv * v + ph).cos()).sum()
}

/// Darker eyes, brows and mouth on a mid-grey skin; `u` is already `|u|`.
fn base_shading(u: f64, v: f64) -> f64 {
    let g = |du: f64, dv: f64, su: f64, sv: f64| (-(du * du / su + dv * dv / sv)).exp();
    0.3 - 1.6 * g(u - 0.38, v - 0.25, 0.010, 0.005) - 1.0 * g(u - 0.36, v - 0.45, 0.03, 0.003) - 1.2 * g(u, v + 0.5, 0.05, 0.003)
}

pub fn texture_from_identity(alpha_id: &[f64], model: &MorphableModel, seed: u64) -> Result<Texture> {
    if alpha_id.len() != model.id_dims {
        return Err(invalid("alpha_id length does not match the identity basis"));
    }
    Ok(TextureBasis::new(model, seed).texture(alpha_id))
}

/// Splat every vertex as a 2x2 footprint whose lower-right pixel is the
/// rounded projection. A pixel keeps the contributor with the largest depth;
/// equal depths keep the brighter one, so the result ignores vertex order.
pub fn render(points2d: &[[f64; 2]], depth: &[f64], texture: &Texture, image_size: usize) -> Result<Image> {
    if points2d.len() != depth.len() || depth.len() != texture.intensity.len() {
        return Err(invalid("render inputs differ in length"));
    }
    let n = image_size as i64;
    let mut zbuf = vec![f64::NEG_INFINITY; image_size * image_size];
    let mut shade = vec![0.0f64; image_size * image_size];
    for ((&[x, y], &z), &tex) in points2d.iter().zip(depth).zip(&texture.intensity) {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            continue;
        }
        let (c, r) = (x.round() as i64, y.round() as i64);
        for pr in r - 1..=r {
            for pc in c - 1..=c {
                if pr < 0 || pc < 0 || pr >= n || pc >= n {
                    continue;
                }
                let i = (pr * n + pc) as usize;
                if z > zbuf[i] || (z == zbuf[i] && tex > shade[i]) {
                    zbuf[i] = z;
                    shade[i] = tex;
                }
            }
        }
    }
    Ok(Image {
        size: image_size,
        pixels: shade.into_iter().map(|s| s as f32).collect(),
    })
}

/// Shape, projection, texture and rasterization for one parameter set.
pub fn render_sample(model: &MorphableModel, params: &FaceParams, image_size: usize, texture_seed: u64) -> Result<Image> {
    SampleRenderer::new(model, image_size, texture_seed)?.render(params).map(|(img, _)| img)
}

/// Caches the texture basis across many renders of the same model.
pub struct SampleRenderer<'m> {
    model: &'m MorphableModel,
    image_size: usize,
    basis: TextureBasis,
}

impl<'m> SampleRenderer<'m> {
    pub fn new(model: &'m MorphableModel, image_size: usize, texture_seed: u64) -> Result<Self> {
        if image_size < 8 {
            return Err(invalid("image size must be at least 8"));
        }
        Ok(Self {
            model,
            image_size,
            basis: TextureBasis::new(model, texture_seed),
        })
    }

    pub fn basis(&self) -> &TextureBasis {
        &self.basis
    }

    pub fn render(&self, params: &FaceParams) -> Result<(Image, Projection)> {
        let shape = instantiate_shape(self.model, params)?;
        let proj = project_weak_perspective(&shape, self.image_size);
        let tex = self.basis.texture(&params.alpha_id);
        let img = render(&proj.points2d, &proj.depth, &tex, self.image_size)?;
        Ok((img, proj))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable::ModelConfig;

    fn tex(v: &[f64]) -> Texture {
        Texture { intensity: v.to_vec() }
    }

    #[test]
    fn single_vertex_paints_its_footprint() {
        let img = render(&[[32.0, 32.0]], &[0.0], &tex(&[0.8]), 64).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let want = if (31..=32).contains(&r) && (31..=32).contains(&c) { 0.8 } else { 0.0 };
                assert_eq!(img.get(r, c), want, "({r},{c})");
            }
        }
    }

    #[test]
    fn nearer_vertex_wins() {
        let pts = [[8.0, 8.0], [8.0, 8.0]];
        let a = render(&pts, &[1.0, 2.0], &tex(&[0.3, 0.9]), 16).unwrap();
        let b = render(&pts, &[2.0, 1.0], &tex(&[0.9, 0.3]), 16).unwrap();
        assert_eq!(a.get(8, 8), 0.9);
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_frame_vertices_are_dropped() {
        let img = render(&[[-10.0, 4.0], [100.0, 100.0]], &[0.0, 0.0], &tex(&[1.0, 1.0]), 16).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));
        // A vertex on the top-left corner keeps only its in-frame pixel.
        let img = render(&[[0.0, 0.0]], &[0.0], &tex(&[0.5]), 16).unwrap();
        assert_eq!(img.pixels.iter().filter(|&&p| p > 0.0).count(), 1);
        assert!(render(&[[0.0, 0.0]], &[0.0, 1.0], &tex(&[0.5]), 16).is_err());
    }

    #[test]
    fn zero_coefficients_and_bias_give_flat_texture() {
        let model = MorphableModel::generate(&ModelConfig {
            vertices: 200,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut basis = TextureBasis::new(&model, 1);
        basis.bias.iter_mut().for_each(|b| *b = 0.0);
        let t = basis.texture(&vec![0.0; model.id_dims]);
        assert!(t.intensity.iter().all(|&v| v == 0.55));
    }

    #[test]
    fn pgm_header_and_payload() {
        let mut img = Image::black(8);
        img.pixels[0] = 1.0;
        let pgm = img.to_pgm();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), 11 + 64);
        assert_eq!(pgm[11], 255);
    }
}
