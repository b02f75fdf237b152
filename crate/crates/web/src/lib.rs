//! Browser demo: render synthetic faces from the morphable model.
//!
//! Images are returned as RGBA bytes, row-major, ready for `ImageData`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use disent::morphable::{instantiate_shape, pose_sweep, project_weak_perspective, FaceParams, ModelConfig, MorphableModel};
use disent::render::{render, Image, Texture, TextureBasis, ID_COEFF_STD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

const TEXTURE_SEED: u64 = 11;

fn js_err(e: disent::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct FaceStudio {
    model: MorphableModel,
    basis: TextureBasis,
    image_size: usize,
}

#[wasm_bindgen]
impl FaceStudio {
    /// Builds the default model; `image_size` is the side of every output.
    #[wasm_bindgen(constructor)]
    pub fn new(image_size: usize) -> Result<FaceStudio, JsError> {
        if !(8..=256).contains(&image_size) {
            return Err(JsError::new("image size must be between 8 and 256"));
        }
        let model = MorphableModel::generate(&ModelConfig::default()).map_err(js_err)?;
        let basis = TextureBasis::new(&model, TEXTURE_SEED);
        Ok(FaceStudio { model, basis, image_size })
    }

    #[wasm_bindgen(getter)]
    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// One face at `yaw_deg`; `expression` scales a seeded expression draw.
    pub fn face(&self, identity_seed: u64, yaw_deg: f64, expression: f64) -> Result<Vec<u8>, JsError> {
        let p = self.params(identity_seed, yaw_deg, expression);
        let img = self.shade(&p, false).map_err(js_err)?;
        Ok(rgba(&img))
    }

    /// Depth buffer of the same face, nearer is brighter.
    pub fn depth(&self, identity_seed: u64, yaw_deg: f64, expression: f64) -> Result<Vec<u8>, JsError> {
        let p = self.params(identity_seed, yaw_deg, expression);
        let img = self.shade(&p, true).map_err(js_err)?;
        Ok(rgba(&img))
    }

    /// Yaw sweep from -90 to 90 degrees laid out left to right in one strip
    /// of height `image_size`.
    pub fn sweep(&self, identity_seed: u64, step_deg: f64) -> Result<Vec<u8>, JsError> {
        let views = self.sweep_views(identity_seed, step_deg)?;
        let imgs = views.iter().map(|v| self.shade(v, false)).collect::<disent::Result<Vec<_>>>().map_err(js_err)?;
        Ok(strip(&imgs, self.image_size))
    }

    /// Number of views `sweep` produces for `step_deg`.
    pub fn sweep_len(&self, identity_seed: u64, step_deg: f64) -> Result<usize, JsError> {
        Ok(self.sweep_views(identity_seed, step_deg)?.len())
    }
}

impl FaceStudio {
    fn params(&self, identity_seed: u64, yaw_deg: f64, expression: f64) -> FaceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
        let id = Normal::new(0.0, ID_COEFF_STD).expect("finite spread");
        let exp = Normal::new(0.0, 1.0).expect("finite spread");
        let mut p = FaceParams::neutral(&self.model);
        p.scale = self.image_size as f64 / 32.0;
        p.yaw = yaw_deg.clamp(-90.0, 90.0).to_radians();
        p.alpha_id = (0..self.model.id_dims).map(|_| id.sample(&mut rng)).collect();
        p.alpha_exp = (0..self.model.exp_dims).map(|_| expression * exp.sample(&mut rng)).collect();
        p
    }

    fn sweep_views(&self, identity_seed: u64, step_deg: f64) -> Result<Vec<FaceParams>, JsError> {
        if !(step_deg >= 1.0) {
            return Err(JsError::new("step must be at least 1 degree"));
        }
        let base = self.params(identity_seed, 0.0, 0.0);
        pose_sweep(&base, (-90f64).to_radians(), 90f64.to_radians(), step_deg.to_radians()).map_err(js_err)
    }

    fn shade(&self, p: &FaceParams, depth_view: bool) -> disent::Result<Image> {
        let proj = project_weak_perspective(&instantiate_shape(&self.model, p)?, self.image_size);
        let tex = if depth_view {
            let lo = proj.depth.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = proj.depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            Texture {
                intensity: proj.depth.iter().map(|d| 0.15 + 0.85 * (d - lo) / span).collect(),
            }
        } else {
            self.basis.texture(&p.alpha_id)
        };
        render(&proj.points2d, &proj.depth, &tex, self.image_size)
    }
}

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgba(img: &Image) -> Vec<u8> {
    img.pixels.iter().flat_map(|&v| [gray(v), gray(v), gray(v), 255]).collect()
}

fn strip(imgs: &[Image], size: usize) -> Vec<u8> {
    let width = size * imgs.len();
    let mut out = vec![0u8; width * size * 4];
    for (k, img) in imgs.iter().enumerate() {
        for r in 0..size {
            for c in 0..size {
                let g = gray(img.get(r, c));
                let o = (r * width + k * size + c) * 4;
                out[o..o + 4].copy_from_slice(&[g, g, g, 255]);
            }
        }
    }
    out
}
