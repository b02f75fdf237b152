//! Gallery/probe identification, pose-binned rank-1 accuracy, the linear
//! pose-leakage probe and embedding export.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedArray};
use crate::dataset::{pose_bin, split_gallery_probe, Corpus, PoseBin, Protocol, Split};
use crate::error::{invalid, Result};
use crate::nn::{embed_images, EmbeddingBundle, Mat, ModelParams};
use crate::par::map_indexed;

pub const EMBEDDINGS_FORMAT: &str = "pdisent-embeddings/1";
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

/// Rank-1 accuracy per pose bin (`None` for a bin without probes) over one
/// or more gallery draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    /// Mean over trials, bins 15° to 90°.
    pub bins: Vec<Option<f64>>,
    /// Unweighted mean of the populated bins.
    pub average: f64,
    pub trial_bins: Vec<Vec<Option<f64>>>,
    pub trial_averages: Vec<f64>,
    /// Population standard deviation over trials.
    pub std_bins: Vec<Option<f64>>,
    pub std_average: f64,
}

impl ProtocolResult {
    pub fn from_trials(trial_bins: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if trial_bins.is_empty() {
            return Err(invalid("no trials"));
        }
        let trial_averages: Vec<f64> = trial_bins.iter().map(|b| bin_average(b)).collect();
        let column = |k: usize| -> Option<Vec<f64>> { trial_bins.iter().map(|t| t[k]).collect() };
        let bins = (0..PoseBin::COUNT).map(|k| column(k).map(|v| mean(&v))).collect();
        let std_bins = (0..PoseBin::COUNT).map(|k| column(k).map(|v| pop_std(&v))).collect();
        Ok(Self {
            average: mean(&trial_averages),
            std_average: pop_std(&trial_averages),
            bins,
            std_bins,
            trial_bins,
            trial_averages,
        })
    }

    pub fn bin(&self, end_degrees: u32) -> Option<f64> {
        PoseBin::all().position(|b| b.end_degrees() == end_degrees).and_then(|k| self.bins[k])
    }

    /// One row: model, bin_15..bin_90, avg, std_15..std_90, std_avg.
    pub fn write_csv(&self, model: &str, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["model".to_string()];
        header.extend(PoseBin::all().map(|b| format!("bin_{}", b.end_degrees())));
        header.push("avg".into());
        header.extend(PoseBin::all().map(|b| format!("std_{}", b.end_degrees())));
        header.push("std_avg".into());
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut rec = vec![model.to_string()];
        rec.extend(self.bins.iter().map(opt));
        rec.push(self.average.to_string());
        rec.extend(self.std_bins.iter().map(opt));
        rec.push(self.std_average.to_string());
        w.write_record(&rec).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn bin_average(bins: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = bins.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        mean(&v)
    }
}

/// Shifted by the first value, so identical inputs give that value exactly.
fn mean(v: &[f64]) -> f64 {
    v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / v.len() as f64
}

/// Shifted two-pass form; exactly zero for identical inputs.
fn pop_std(v: &[f64]) -> f64 {
    let d: Vec<f64> = v.iter().map(|x| x - v[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
}

/// Embeddings prepared for matching; cosine rows are unit-normalized.
struct Prepared {
    rows: Vec<Vec<f64>>,
    metric: Metric,
}

impl Prepared {
    fn new(m: &Mat, idx: impl Iterator<Item = usize>, metric: Metric) -> Self {
        let rows = idx
            .map(|i| {
                let r = m.row(i);
                match metric {
                    Metric::Cosine => {
                        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > 0.0 {
                            r.iter().map(|v| v / n).collect()
                        } else {
                            r.to_vec()
                        }
                    }
                    Metric::Euclidean => r.to_vec(),
                }
            })
            .collect();
        Self { rows, metric }
    }

    /// Index of the best gallery row; ties keep the lowest index.
    fn nearest(&self, probe: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, g) in self.rows.iter().enumerate() {
            let score = match self.metric {
                Metric::Cosine => g.iter().zip(probe).map(|(a, b)| a * b).sum::<f64>(),
                Metric::Euclidean => -g.iter().zip(probe).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            };
            if score > best_score {
                best_score = score;
                best = j;
            }
        }
        best
    }
}

/// Per-bin accuracies for one gallery/probe assignment over row indices of `emb`.
fn match_bins(emb: &Mat, labels: &[u32], yaws: &[f64], gallery: &[usize], probe: &[usize], metric: Metric) -> Result<Vec<Option<f64>>> {
    if gallery.is_empty() {
        return Err(invalid("empty gallery"));
    }
    let g = Prepared::new(emb, gallery.iter().copied(), metric);
    let p = Prepared::new(emb, probe.iter().copied(), metric);
    let hits = map_indexed(probe.len(), |k| labels[gallery[g.nearest(&p.rows[k])]] == labels[probe[k]]);
    let mut correct = [0usize; PoseBin::COUNT];
    let mut total = [0usize; PoseBin::COUNT];
    for (k, &i) in probe.iter().enumerate() {
        let b = pose_bin(yaws[i])?.0;
        total[b] += 1;
        correct[b] += hits[k] as usize;
    }
    Ok((0..PoseBin::COUNT)
        .map(|b| (total[b] > 0).then(|| correct[b] as f64 / total[b] as f64))
        .collect())
}

/// Match every probe to its nearest gallery embedding and bin the hits by
/// probe yaw, merging symmetric yaws.
pub fn rank1(gallery: &Mat, gallery_labels: &[u32], probe: &Mat, probe_labels: &[u32], probe_yaws: &[f64], metric: Metric) -> Result<ProtocolResult> {
    if gallery.rows == 0 {
        return Err(invalid("empty gallery"));
    }
    if gallery.cols != probe.cols || gallery_labels.len() != gallery.rows || probe_labels.len() != probe.rows || probe_yaws.len() != probe.rows {
        return Err(invalid("gallery and probe inputs are inconsistent"));
    }
    let mut data = gallery.data.clone();
    data.extend_from_slice(&probe.data);
    let all = Mat::from_vec(gallery.rows + probe.rows, gallery.cols, data)?;
    let mut labels = gallery_labels.to_vec();
    labels.extend_from_slice(probe_labels);
    let mut yaws = vec![0.0; gallery.rows];
    yaws.extend_from_slice(probe_yaws);
    let g: Vec<usize> = (0..gallery.rows).collect();
    let p: Vec<usize> = (gallery.rows..all.rows).collect();
    ProtocolResult::from_trials(vec![match_bins(&all, &labels, &yaws, &g, &p, metric)?])
}

/// P1 on precomputed identity embeddings (one row per corpus sample).
pub fn protocol_p1_on_embeddings<R: Rng>(e_i: &Mat, corpus: &Corpus, trials: usize, rng: &mut R, metric: Metric) -> Result<ProtocolResult> {
    if trials == 0 {
        return Err(invalid("P1 needs at least one trial"));
    }
    let (labels, yaws) = labels_and_yaws(corpus);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let Split { gallery, probe } = split_gallery_probe(corpus, Protocol::P1, rng)?;
        out.push(match_bins(e_i, &labels, &yaws, &gallery, &probe, metric)?);
    }
    ProtocolResult::from_trials(out)
}

pub fn protocol_p2_on_embeddings(e_i: &Mat, corpus: &Corpus, metric: Metric) -> Result<ProtocolResult> {
    let (labels, yaws) = labels_and_yaws(corpus);
    // P2 draws nothing at random.
    let Split { gallery, probe } = split_gallery_probe(corpus, Protocol::P2, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    ProtocolResult::from_trials(vec![match_bins(e_i, &labels, &yaws, &gallery, &probe, metric)?])
}

fn labels_and_yaws(corpus: &Corpus) -> (Vec<u32>, Vec<f64>) {
    corpus.samples.iter().map(|s| (s.identity, s.yaw())).unzip()
}

pub fn embed_corpus(params: &ModelParams, corpus: &Corpus) -> Result<EmbeddingBundle> {
    let images: Vec<_> = corpus.samples.iter().map(|s| &s.image).collect();
    embed_images(params, &images, EMBED_CHUNK)
}

pub fn run_protocol_p1<R: Rng>(corpus: &Corpus, params: &ModelParams, trials: usize, rng: &mut R, metric: Metric) -> Result<ProtocolResult> {
    protocol_p1_on_embeddings(&embed_corpus(params, corpus)?.e_i, corpus, trials, rng, metric)
}

pub fn run_protocol_p2(corpus: &Corpus, params: &ModelParams, metric: Metric) -> Result<ProtocolResult> {
    protocol_p2_on_embeddings(&embed_corpus(params, corpus)?.e_i, corpus, metric)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageResult {
    pub mse_id: f64,
    pub mse_nonid: f64,
    /// `mse_id / mse_nonid`.
    pub ratio: f64,
}

pub const MIN_PROBE_SAMPLES: usize = 50;

/// Ridge regression `yaw <- features` fitted on even-indexed samples and
/// scored on odd-indexed ones. Features and target are centred with
/// training-half means, so the intercept is unpenalized. The penalty is
/// `lambda` times the mean diagonal of `XᵀX`, which makes it invariant to a
/// common rescaling of the features.
pub fn ridge_heldout_mse(x: &Mat, y: &[f64], lambda: f64) -> Result<f64> {
    if x.rows != y.len() {
        return Err(invalid("feature and target counts differ"));
    }
    let train: Vec<usize> = (0..y.len()).step_by(2).collect();
    let test: Vec<usize> = (1..y.len()).step_by(2).collect();
    let d = x.cols;
    let n = train.len() as f64;
    let mut mu = vec![0.0; d];
    for &i in &train {
        mu.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n);
    }
    let ymean = train.iter().map(|&i| y[i]).sum::<f64>() / n;
    let design = |idx: &[usize]| DMatrix::from_fn(idx.len(), d, |r, c| x.row(idx[r])[c] - mu[c]);
    let xt = design(&train);
    let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i] - ymean));
    let energy = xt.iter().map(|v| v * v).sum::<f64>() / d.max(1) as f64;
    let w = ridge_solve(&xt, &yt, lambda * energy.max(f64::MIN_POSITIVE))?;
    let pred = design(&test) * w;
    Ok(test.iter().zip(pred.iter()).map(|(&i, p)| (y[i] - ymean - p).powi(2)).sum::<f64>() / test.len() as f64)
}

/// `(XᵀX + λI)⁻¹ Xᵀy` by Cholesky.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let gram = x.transpose() * x + DMatrix::identity(x.ncols(), x.ncols()) * lambda;
    let chol = gram
        .cholesky()
        .ok_or_else(|| invalid("ridge system is not positive definite; use a positive lambda"))?;
    Ok(chol.solve(&(x.transpose() * y)))
}

/// How well yaw can be linearly decoded from identity versus non-identity
/// features; a large ratio means pose lives mostly in the non-identity branch.
pub fn pose_leakage_probe(e_i: &Mat, e_n: &Mat, yaw: &[f64], lambda: f64) -> Result<LeakageResult> {
    if yaw.len() < MIN_PROBE_SAMPLES {
        return Err(invalid(format!("leakage probe needs at least {MIN_PROBE_SAMPLES} samples")));
    }
    if e_i.rows != yaw.len() || e_n.rows != yaw.len() {
        return Err(invalid("embedding and yaw counts differ"));
    }
    let first = yaw[0];
    if yaw.iter().all(|&v| v == first) {
        return Err(invalid("yaw is constant; the probe is degenerate"));
    }
    let mse_id = ridge_heldout_mse(e_i, yaw, lambda)?;
    let mse_nonid = ridge_heldout_mse(e_n, yaw, lambda)?;
    Ok(LeakageResult {
        mse_id,
        mse_nonid,
        ratio: mse_id / mse_nonid,
    })
}

/// Write `e_i`, `e_n`, identity and yaw per sample to a container at `path`
/// and a CSV mirror next to it (same stem, `.csv`). Returns the CSV path.
pub fn export_embeddings(params: &ModelParams, corpus: &Corpus, path: &Path) -> Result<std::path::PathBuf> {
    let b = embed_corpus(params, corpus)?;
    let s = corpus.len();
    let to32 = |m: &Mat| m.data.iter().map(|&v| v as f32).collect::<Vec<f32>>();
    let ei = to32(&b.e_i);
    let en = to32(&b.e_n);
    let mut manifest = serde_json::Map::new();
    manifest.insert("format".into(), EMBEDDINGS_FORMAT.into());
    manifest.insert("num_samples".into(), s.into());
    let mut c = Container::new(manifest);
    c.push(NamedArray::f32("e_i", vec![s, b.e_i.cols], ei.clone()));
    c.push(NamedArray::f32("e_n", vec![s, b.e_n.cols], en.clone()));
    c.push(NamedArray::i32("identity", vec![s], corpus.samples.iter().map(|x| x.identity as i32).collect()));
    c.push(NamedArray::f32("yaw", vec![s], corpus.samples.iter().map(|x| x.yaw() as f32).collect()));
    c.save(path)?;

    let csv_path = path.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    let mut header = vec!["identity".to_string(), "yaw".to_string()];
    header.extend((0..b.e_i.cols).map(|k| format!("e_i_{k}")));
    header.extend((0..b.e_n.cols).map(|k| format!("e_n_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, smp) in corpus.samples.iter().enumerate() {
        let mut rec = vec![smp.identity.to_string(), (smp.yaw() as f32).to_string()];
        rec.extend(ei[i * b.e_i.cols..(i + 1) * b.e_i.cols].iter().map(|v| v.to_string()));
        rec.extend(en[i * b.e_n.cols..(i + 1) * b.e_n.cols].iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(csv_path)
}

pub(crate) fn csv_err(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => invalid(format!("csv: {other:?}")),
    }
}
