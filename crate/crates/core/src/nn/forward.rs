//! Batched forward and backward passes. Activations are row-major with one
//! row per sample; conv feature maps are stored pixel-major (`H*W x C`).

use super::linalg::{gemm, T};
use super::params::{conv_out, Gradients, Group, ModelParams};
use crate::error::{invalid, Result};
use crate::render::Image;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!("matrix data has {} values, expected {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    fn hcat(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows, a.cols + b.cols);
        for i in 0..a.rows {
            let r = out.row_mut(i);
            r[..a.cols].copy_from_slice(a.row(i));
            r[a.cols..].copy_from_slice(b.row(i));
        }
        out
    }
}

/// Stack images into a `B x (H*W)` matrix.
pub fn images_to_mat<'a>(images: impl IntoIterator<Item = &'a Image>) -> Mat {
    let mut rows = 0;
    let mut cols = 0;
    let mut data = Vec::new();
    for img in images {
        cols = img.size * img.size;
        data.extend(img.pixels.iter().map(|&p| p as f64));
        rows += 1;
    }
    Mat { rows, cols, data }
}

fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let out = b.len();
    let mut y = Mat::zeros(x.rows, out);
    gemm(x.rows, x.cols, out, &x.data, T::N, w, T::Y, 0.0, &mut y.data);
    for i in 0..y.rows {
        y.row_mut(i).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    y
}

/// Accumulate `dW += dYᵀ X`, `db += colsum(dY)` and return `dX = dY W` when asked.
fn linear_back(x: &Mat, dy: &Mat, w: &[f64], grads: Option<(&mut [f64], &mut [f64])>, want_dx: bool) -> Option<Mat> {
    if let Some((dw, db)) = grads {
        gemm(dy.cols, dy.rows, x.cols, &dy.data, T::Y, &x.data, T::N, 1.0, dw);
        for i in 0..dy.rows {
            db.iter_mut().zip(dy.row(i)).for_each(|(a, g)| *a += g);
        }
    }
    want_dx.then(|| {
        let mut dx = Mat::zeros(dy.rows, x.cols);
        gemm(dy.rows, dy.cols, x.cols, &dy.data, T::N, w, T::N, 0.0, &mut dx.data);
        dx
    })
}

fn relu(mut m: Mat) -> Mat {
    m.data.iter_mut().for_each(|v| *v = v.max(0.0));
    m
}

/// Zero the gradient wherever the ReLU output was zero.
fn relu_back(out: &Mat, mut d: Mat) -> Mat {
    d.data.iter_mut().zip(&out.data).for_each(|(g, &y)| {
        if y <= 0.0 {
            *g = 0.0
        }
    });
    d
}

fn add_into(acc: &mut Mat, other: &Mat) {
    acc.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
}

fn layer_grads<'a>(grads: &'a mut Option<&mut Gradients>, params: &ModelParams, g: Group, i: usize) -> Option<(&'a mut [f64], &'a mut [f64])> {
    if params.is_frozen(g) {
        return None;
    }
    grads.as_deref_mut().map(|gr| {
        let [w, b] = gr.groups[g.index()].get_many_mut_pair(i);
        (w, b)
    })
}

trait PairMut {
    fn get_many_mut_pair(&mut self, i: usize) -> [&mut [f64]; 2];
}

impl PairMut for Vec<Vec<f64>> {
    fn get_many_mut_pair(&mut self, i: usize) -> [&mut [f64]; 2] {
        let (a, b) = self.split_at_mut(i + 1);
        [&mut a[i], &mut b[0]]
    }
}

/// `(B * Hout * Wout) x (Cin * 9)` patches of a pixel-major batch, with
/// columns ordered `(ci, ky, kx)` to match the conv weight layout.
fn im2col(x: &[f64], batch: usize, side: usize, cin: usize) -> (Vec<f64>, usize) {
    let so = conv_out(side);
    let k = cin * 9;
    let mut cols = vec![0.0; batch * so * so * k];
    for b in 0..batch {
        let img = &x[b * side * side * cin..(b + 1) * side * side * cin];
        for oy in 0..so {
            for ox in 0..so {
                let row = &mut cols[((b * so + oy) * so + ox) * k..][..k];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= side as isize {
                            continue;
                        }
                        let px = &img[(iy as usize * side + ix as usize) * cin..][..cin];
                        for (ci, &v) in px.iter().enumerate() {
                            row[ci * 9 + ky * 3 + kx] = v;
                        }
                    }
                }
            }
        }
    }
    (cols, so)
}

fn col2im(dcols: &[f64], batch: usize, side: usize, cin: usize) -> Vec<f64> {
    let so = conv_out(side);
    let k = cin * 9;
    let mut dx = vec![0.0; batch * side * side * cin];
    for b in 0..batch {
        let img = &mut dx[b * side * side * cin..(b + 1) * side * side * cin];
        for oy in 0..so {
            for ox in 0..so {
                let row = &dcols[((b * so + oy) * so + ox) * k..][..k];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= side as isize {
                            continue;
                        }
                        let px = &mut img[(iy as usize * side + ix as usize) * cin..][..cin];
                        for (ci, v) in px.iter_mut().enumerate() {
                            *v += row[ci * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Intermediate values kept for the backbone backward pass.
#[derive(Debug, Clone)]
pub struct RichCache {
    batch: usize,
    /// Input side of each conv stage.
    sides: Vec<usize>,
    cols: Vec<Mat>,
    outs: Vec<Mat>,
    pooled: Mat,
    pub rich: Mat,
}

pub fn forward_rich(params: &ModelParams, images: &Mat) -> Result<Mat> {
    Ok(forward_rich_cached(params, images)?.rich)
}

pub fn forward_rich_cached(params: &ModelParams, images: &Mat) -> Result<RichCache> {
    let arch = &params.arch;
    if images.cols != arch.image_size * arch.image_size {
        return Err(invalid(format!(
            "images have {} pixels, architecture expects {}x{}",
            images.cols, arch.image_size, arch.image_size
        )));
    }
    let batch = images.rows;
    let mut side = arch.image_size;
    let mut cin = 1;
    let mut x = images.data.clone();
    let mut sides = Vec::new();
    let mut cols_all = Vec::new();
    let mut outs = Vec::new();
    for (i, &cout) in arch.conv_channels.iter().enumerate() {
        let (cols, so) = im2col(&x, batch, side, cin);
        let cols = Mat {
            rows: batch * so * so,
            cols: cin * 9,
            data: cols,
        };
        let out = relu(linear(&cols, params.t(Group::Backbone, 2 * i), params.t(Group::Backbone, 2 * i + 1)));
        debug_assert_eq!(out.cols, cout);
        sides.push(side);
        x = out.data.clone();
        cols_all.push(cols);
        outs.push(out);
        side = so;
        cin = cout;
    }
    let spatial = side * side;
    let mut pooled = Mat::zeros(batch, cin);
    for b in 0..batch {
        let p = pooled.row_mut(b);
        for s in 0..spatial {
            let px = &x[(b * spatial + s) * cin..][..cin];
            p.iter_mut().zip(px).for_each(|(a, v)| *a += v);
        }
        p.iter_mut().for_each(|a| *a /= spatial as f64);
    }
    let n = arch.conv_channels.len();
    let rich = relu(linear(&pooled, params.t(Group::Backbone, 2 * n), params.t(Group::Backbone, 2 * n + 1)));
    Ok(RichCache {
        batch,
        sides,
        cols: cols_all,
        outs,
        pooled,
        rich,
    })
}

/// Accumulate backbone gradients for an upstream `dL/de_r`.
pub fn backward_rich(params: &ModelParams, cache: &RichCache, d_rich: &Mat, grads: &mut Gradients) {
    if params.is_frozen(Group::Backbone) {
        return;
    }
    let mut grads = Some(grads);
    let n = params.arch.conv_channels.len();
    let d_pre = relu_back(&cache.rich, d_rich.clone());
    let gw = layer_grads(&mut grads, params, Group::Backbone, 2 * n);
    let d_pooled = linear_back(&cache.pooled, &d_pre, params.t(Group::Backbone, 2 * n), gw, true).unwrap();

    let last = &cache.outs[n - 1];
    let c = last.cols;
    let spatial = last.rows / cache.batch;
    let mut d = Mat::zeros(last.rows, c);
    for b in 0..cache.batch {
        let g = d_pooled.row(b);
        for s in 0..spatial {
            d.row_mut(b * spatial + s).iter_mut().zip(g).for_each(|(a, v)| *a = v / spatial as f64);
        }
    }
    for i in (0..n).rev() {
        let d_pre = relu_back(&cache.outs[i], d);
        let gw = layer_grads(&mut grads, params, Group::Backbone, 2 * i);
        let dcols = linear_back(&cache.cols[i], &d_pre, params.t(Group::Backbone, 2 * i), gw, i > 0);
        if let Some(dcols) = dcols {
            let cin = cache.cols[i].cols / 9;
            let side = cache.sides[i];
            d = Mat {
                rows: cache.batch * side * side,
                cols: cin,
                data: col2im(&dcols.data, cache.batch, side, cin),
            };
        } else {
            break;
        }
    }
}

/// Branch and head outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub e_r: Mat,
    pub e_i: Mat,
    pub e_n: Mat,
    pub logits: Mat,
    pub e_p: Mat,
    pub e_l: Mat,
}

pub fn forward_branches(params: &ModelParams, e_r: &Mat) -> Result<EmbeddingBundle> {
    if e_r.cols != params.arch.rich_dim {
        return Err(invalid(format!("rich embedding has {} columns, expected {}", e_r.cols, params.arch.rich_dim)));
    }
    let e_i = relu(linear(e_r, params.t(Group::Identity, 0), params.t(Group::Identity, 1)));
    let e_n = relu(linear(e_r, params.t(Group::NonIdentity, 0), params.t(Group::NonIdentity, 1)));
    let logits = linear(&e_i, params.t(Group::IdClassifier, 0), params.t(Group::IdClassifier, 1));
    let e_p = linear(&e_n, params.t(Group::PoseHead, 0), params.t(Group::PoseHead, 1));
    let e_l = linear(&e_n, params.t(Group::LandmarkHead, 0), params.t(Group::LandmarkHead, 1));
    Ok(EmbeddingBundle {
        e_r: e_r.clone(),
        e_i,
        e_n,
        logits,
        e_p,
        e_l,
    })
}

/// Upstream gradients into a bundle; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct BundleGrad {
    pub e_i: Option<Mat>,
    pub e_n: Option<Mat>,
    pub logits: Option<Mat>,
    pub e_p: Option<Mat>,
    pub e_l: Option<Mat>,
}

/// Accumulate branch and head gradients; returns `dL/de_r` when `want_rich`.
pub fn backward_branches(params: &ModelParams, bundle: &EmbeddingBundle, up: &BundleGrad, grads: &mut Gradients, want_rich: bool) -> Option<Mat> {
    let mut grads = Some(grads);
    let mut d_ei = up.e_i.clone().unwrap_or_else(|| Mat::zeros(bundle.e_i.rows, bundle.e_i.cols));
    let mut d_en = up.e_n.clone().unwrap_or_else(|| Mat::zeros(bundle.e_n.rows, bundle.e_n.cols));
    if let Some(dl) = &up.logits {
        let gw = layer_grads(&mut grads, params, Group::IdClassifier, 0);
        add_into(&mut d_ei, &linear_back(&bundle.e_i, dl, params.t(Group::IdClassifier, 0), gw, true).unwrap());
    }
    for (g, d) in [(Group::PoseHead, &up.e_p), (Group::LandmarkHead, &up.e_l)] {
        if let Some(d) = d {
            let gw = layer_grads(&mut grads, params, g, 0);
            add_into(&mut d_en, &linear_back(&bundle.e_n, d, params.t(g, 0), gw, true).unwrap());
        }
    }
    let mut d_er = want_rich.then(|| Mat::zeros(bundle.e_r.rows, bundle.e_r.cols));
    for (g, out, d) in [(Group::Identity, &bundle.e_i, d_ei), (Group::NonIdentity, &bundle.e_n, d_en)] {
        let d_pre = relu_back(out, d);
        let gw = layer_grads(&mut grads, params, g, 0);
        if let Some(dx) = linear_back(&bundle.e_r, &d_pre, params.t(g, 0), gw, want_rich) {
            add_into(d_er.as_mut().unwrap(), &dx);
        }
    }
    d_er
}

/// Values kept for the reconstructor backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    input: Mat,
    hidden: Mat,
    pub output: Mat,
}

/// `g(e_i, e_n)`: concatenation, affine + ReLU, affine.
pub fn forward_reconstruct(params: &ModelParams, e_i: &Mat, e_n: &Mat) -> Result<Reconstruction> {
    let arch = &params.arch;
    if e_i.cols != arch.identity_dim || e_n.cols != arch.nonidentity_dim || e_i.rows != e_n.rows {
        return Err(invalid("reconstructor inputs do not match the architecture"));
    }
    let input = Mat::hcat(e_i, e_n);
    let hidden = relu(linear(&input, params.t(Group::Reconstructor, 0), params.t(Group::Reconstructor, 1)));
    let output = linear(&hidden, params.t(Group::Reconstructor, 2), params.t(Group::Reconstructor, 3));
    Ok(Reconstruction { input, hidden, output })
}

/// Accumulate reconstructor gradients; returns `(dL/de_i, dL/de_n)`.
pub fn backward_reconstruct(params: &ModelParams, rec: &Reconstruction, d_out: &Mat, grads: &mut Gradients) -> (Mat, Mat) {
    let mut grads = Some(grads);
    let gw = layer_grads(&mut grads, params, Group::Reconstructor, 2);
    let d_hidden = linear_back(&rec.hidden, d_out, params.t(Group::Reconstructor, 2), gw, true).unwrap();
    let d_pre = relu_back(&rec.hidden, d_hidden);
    let gw = layer_grads(&mut grads, params, Group::Reconstructor, 0);
    let d_in = linear_back(&rec.input, &d_pre, params.t(Group::Reconstructor, 0), gw, true).unwrap();
    let di = params.arch.identity_dim;
    let mut d_ei = Mat::zeros(d_in.rows, di);
    let mut d_en = Mat::zeros(d_in.rows, d_in.cols - di);
    for r in 0..d_in.rows {
        d_ei.row_mut(r).copy_from_slice(&d_in.row(r)[..di]);
        d_en.row_mut(r).copy_from_slice(&d_in.row(r)[di..]);
    }
    (d_ei, d_en)
}

/// Both bundles of a pair batch plus the self and cross reconstructions of
/// the reference's rich embedding.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub first: EmbeddingBundle,
    pub second: EmbeddingBundle,
    /// `g(e_i of x1, e_n of x1)`.
    pub self_rec: Reconstruction,
    /// `g(e_i of x2, e_n of x1)`.
    pub cross_rec: Reconstruction,
}

pub fn forward_pair(params: &ModelParams, x1: &Mat, x2: &Mat) -> Result<PairForward> {
    let r1 = forward_rich(params, x1)?;
    let r2 = forward_rich(params, x2)?;
    forward_pair_from_rich(params, &r1, &r2)
}

pub fn forward_pair_from_rich(params: &ModelParams, e_r1: &Mat, e_r2: &Mat) -> Result<PairForward> {
    if e_r1.rows != e_r2.rows {
        return Err(invalid("pair batches differ in size"));
    }
    let first = forward_branches(params, e_r1)?;
    let second = forward_branches(params, e_r2)?;
    let self_rec = forward_reconstruct(params, &first.e_i, &first.e_n)?;
    let cross_rec = forward_reconstruct(params, &second.e_i, &first.e_n)?;
    Ok(PairForward {
        first,
        second,
        self_rec,
        cross_rec,
    })
}

/// Full forward from images to every embedding.
pub fn embed(params: &ModelParams, images: &Mat) -> Result<EmbeddingBundle> {
    forward_branches(params, &forward_rich(params, images)?)
}

/// Embed a long list of images in fixed-size chunks.
pub fn embed_images(params: &ModelParams, images: &[&Image], chunk: usize) -> Result<EmbeddingBundle> {
    let chunk = chunk.max(1);
    let parts: Vec<EmbeddingBundle> = images
        .chunks(chunk)
        .map(|c| embed(params, &images_to_mat(c.iter().copied())))
        .collect::<Result<_>>()?;
    let cat = |f: fn(&EmbeddingBundle) -> &Mat, cols: usize| {
        let mut data = Vec::new();
        for p in &parts {
            data.extend_from_slice(&f(p).data);
        }
        Mat {
            rows: images.len(),
            cols,
            data,
        }
    };
    let a = &params.arch;
    Ok(EmbeddingBundle {
        e_r: cat(|b| &b.e_r, a.rich_dim),
        e_i: cat(|b| &b.e_i, a.identity_dim),
        e_n: cat(|b| &b.e_n, a.nonidentity_dim),
        logits: cat(|b| &b.logits, a.num_classes),
        e_p: cat(|b| &b.e_p, a.pose_dim),
        e_l: cat(|b| &b.e_l, a.landmark_dim),
    })
}
