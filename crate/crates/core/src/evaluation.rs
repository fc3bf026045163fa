//! Fréchet distance between embedded image sets, the perturbation
//! condition table, and the blinded real/fake study kit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::PairedSample;
use crate::error::{config_err, input_err, Error, Result};
use crate::image::ImageTensor;
use crate::perturb::{apply_perturbation, PerturbationSpec};
use crate::resample::resize;
use crate::trainer::TrainingState;

/// Sample mean and unbiased covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl EmbeddingStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Stats from raw embedding vectors. The vectors are sorted before
    /// reduction, so the result does not depend on their order.
    pub fn from_embeddings(mut rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(input_err!("need at least 2 embeddings, got {}", rows.len()));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(input_err!("embeddings must share one non-zero dimension"));
        }
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = rows.len();
        let mut mean = DVector::zeros(d);
        for r in &rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        // exact symmetry
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(EmbeddingStats {
            mean,
            covariance: cov,
            count: n,
        })
    }
}

/// Maps an image to a fixed-length feature vector.
pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Mean of every pixel value (d = 1).
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanPixel;

impl Embedder for MeanPixel {
    fn name(&self) -> &str {
        "mean-pixel"
    }

    fn dim(&self) -> usize {
        1
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let n = image.data().len();
        if n == 0 {
            return Err(input_err!("empty image"));
        }
        Ok(vec![image.data().sum() / n as f64])
    }
}

/// Grey image resized to `side×side`, projected by a fixed Gaussian matrix.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    side: usize,
    matrix: DMatrix<f64>,
}

impl RandomProjection {
    pub const DEFAULT_SIDE: usize = 64;
    pub const DEFAULT_DIM: usize = 64;
    pub const DEFAULT_SEED: u64 = 0x0f1d;

    pub fn new(side: usize, dim: usize, seed: u64) -> Self {
        let inputs = side * side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("positive scale");
        let matrix = DMatrix::from_fn(dim, inputs, |_, _| dist.sample(&mut rng));
        RandomProjection { side, matrix }
    }
}

impl Default for RandomProjection {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SIDE, Self::DEFAULT_DIM, Self::DEFAULT_SEED)
    }
}

impl Embedder for RandomProjection {
    fn name(&self) -> &str {
        "random-projection"
    }

    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let small = resize(&image.to_gray(), self.side, self.side)?;
        let v = DVector::from_iterator(self.side * self.side, small.data().iter().copied());
        Ok((&self.matrix * v).iter().copied().collect())
    }
}

/// Builds an embedder by name (`random-projection` or `mean-pixel`).
pub fn embedder_by_name(name: &str) -> Result<Box<dyn Embedder>> {
    match name {
        "random-projection" | "default" => Ok(Box::new(RandomProjection::default())),
        "mean-pixel" => Ok(Box::new(MeanPixel)),
        other => Err(config_err!("unknown embedder '{other}'")),
    }
}

pub fn embed_set(images: &[ImageTensor], embedder: &dyn Embedder) -> Result<EmbeddingStats> {
    if images.len() < 2 {
        return Err(input_err!("need at least 2 images, got {}", images.len()));
    }
    let rows = images
        .iter()
        .map(|i| embedder.embed(i))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingStats::from_embeddings(rows)
}

fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

/// Principal square root of a symmetric PSD matrix, clamping negative
/// eigenvalues to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = symmetric_eigen(m);
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigen(m).eigenvalues.min()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, with the trace of the root taken
/// from the eigenvalues of the symmetric matrix `Σa^½ Σb Σa^½`.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(input_err!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        ));
    }
    let d = a.dim();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let (mut sa, mut sb) = (a.covariance.clone(), b.covariance.clone());
    let tol = |m: &DMatrix<f64>| -1e-10 * m.trace().abs().max(1.0);
    if min_eigenvalue(&sa) < tol(&sa) || min_eigenvalue(&sb) < tol(&sb) {
        let ridge = 1e-6 * (sa.trace() + sb.trace()) / (2.0 * d as f64);
        log::warn!("covariance is not positive semidefinite; adding ridge {ridge:e}");
        sa += DMatrix::identity(d, d) * ridge;
        sb += DMatrix::identity(d, d) * ridge;
    }
    let root_a = psd_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let cross: f64 = symmetric_eigen(&inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(value.max(0.0))
}

/// One column of the condition table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionScore {
    pub condition: String,
    pub spec: PerturbationSpec,
    pub score: Option<f64>,
    /// Score minus the unperturbed score.
    pub delta: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub embedder: String,
    pub samples: usize,
    pub conditions: Vec<ConditionScore>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["condition", "kind", "amount", "score", "delta", "error"])
            .expect("in-memory write");
        for c in &self.conditions {
            w.write_record([
                c.condition.clone(),
                c.spec.kind.to_string(),
                c.spec.amount.to_string(),
                fmt(c.score),
                fmt(c.delta),
                c.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 text")
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))
    }
}

/// Condition label as in the comparison table header.
pub fn condition_label(spec: &PerturbationSpec) -> String {
    use crate::perturb::PerturbationKind::*;
    match spec.kind {
        None => "orig".into(),
        Sharpen => "sharp".into(),
        k => k.to_string(),
    }
}

/// The six standard conditions at their default magnitudes.
pub fn standard_conditions(seed: u64) -> Vec<PerturbationSpec> {
    crate::perturb::PerturbationKind::ALL
        .iter()
        .map(|&k| PerturbationSpec {
            seed,
            ..PerturbationSpec::new(k)
        })
        .collect()
}

/// Scores generated sets against the real set. A failed condition keeps
/// its error and the others continue.
pub fn score_conditions(
    real: &EmbeddingStats,
    generated: Vec<(PerturbationSpec, Result<EmbeddingStats>)>,
    embedder: &str,
    samples: usize,
) -> EvaluationReport {
    let mut conditions: Vec<ConditionScore> = generated
        .into_iter()
        .map(|(spec, stats)| {
            let score = stats.and_then(|s| frechet_distance(&s, real));
            ConditionScore {
                condition: condition_label(&spec),
                spec,
                score: score.as_ref().ok().copied(),
                delta: None,
                error: score.err().map(|e| e.to_string()),
            }
        })
        .collect();
    let base = conditions
        .iter()
        .find(|c| c.spec.kind == crate::perturb::PerturbationKind::None)
        .and_then(|c| c.score);
    for c in &mut conditions {
        c.delta = c.score.zip(base).map(|(s, b)| s - b);
    }
    EvaluationReport {
        embedder: embedder.to_string(),
        samples,
        conditions,
    }
}

/// Perturbs each evaluation fundus crop, translates it, and scores the
/// generated angiograms against the real ones.
pub fn evaluate_conditions(
    state: &mut TrainingState,
    samples: &[PairedSample],
    specs: &[PerturbationSpec],
    embedder: &dyn Embedder,
) -> Result<EvaluationReport> {
    let real: Vec<ImageTensor> = samples.iter().map(|s| s.angio_crop()).collect();
    let real_stats = embed_set(&real, embedder)?;
    let mut generated = Vec::new();
    for spec in specs {
        let stats = (|| {
            let fakes = samples
                .iter()
                .map(|s| {
                    let perturbed = apply_perturbation(&s.fundus_crop(), spec)?;
                    state.infer(&perturbed)
                })
                .collect::<Result<Vec<_>>>()?;
            embed_set(&fakes, embedder)
        })();
        if let Err(e) = &stats {
            log::warn!("condition {} failed: {e}", condition_label(spec));
        }
        generated.push((*spec, stats));
    }
    Ok(score_conditions(&real_stats, generated, embedder.name(), samples.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(input_err!("label must be 'real' or 'fake', got '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyItem {
    pub item_id: String,
    pub image: ImageTensor,
    pub label: Label,
}

/// Items in presentation order plus the separate answer key.
#[derive(Debug, Clone)]
pub struct StudyKit {
    pub items: Vec<StudyItem>,
    pub key: BTreeMap<String, Label>,
}

pub const KEY_FILE: &str = "key.json";
pub const ITEMS_DIR: &str = "items";

pub fn item_id(index: usize) -> String {
    format!("item_{:03}", index + 1)
}

/// `n/2` real and `n/2` generated angiograms, chosen and ordered by a
/// seeded shuffle and renamed with sequential ids.
pub fn build_study_kit(real: &[ImageTensor], fake: &[ImageTensor], n: usize, seed: u64) -> Result<StudyKit> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(input_err!("study size must be a positive even number, got {n}"));
    }
    let half = n / 2;
    if real.len() < half || fake.len() < half {
        return Err(input_err!(
            "need {half} images of each class, have {} real and {} fake",
            real.len(),
            fake.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |pool: &[ImageTensor], label: Label| {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(half);
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| (pool[i].clone(), label))
            .collect::<Vec<_>>()
    };
    let mut chosen = pick(real, Label::Real);
    chosen.extend(pick(fake, Label::Fake));
    chosen.shuffle(&mut rng);
    let items: Vec<StudyItem> = chosen
        .into_iter()
        .enumerate()
        .map(|(i, (image, label))| StudyItem {
            item_id: item_id(i),
            image,
            label,
        })
        .collect();
    let key = items.iter().map(|i| (i.item_id.clone(), i.label)).collect();
    Ok(StudyKit { items, key })
}

impl StudyKit {
    /// Writes `dir/items/<id>.png` and `dir/key.json`. Item files carry
    /// only their id; the key never sits in the item directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let items = dir.join(ITEMS_DIR);
        fs::create_dir_all(&items).map_err(|e| Error::io(&items, e))?;
        for item in &self.items {
            item.image.save(&items.join(format!("{}.png", item.item_id)))?;
        }
        let key_path = dir.join(KEY_FILE);
        let text = serde_json::to_string_pretty(&self.key).map_err(|e| Error::json(&key_path, e))?;
        fs::write(&key_path, text).map_err(|e| Error::io(&key_path, e))
    }
}

pub fn load_key(path: &Path) -> Result<BTreeMap<String, Label>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Reads `item_id,label` rows (with a header line).
pub fn read_responses(path: &Path) -> Result<BTreeMap<String, Label>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let (Some(id), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(input_err!("{}: rows need item_id and label", path.display()));
        };
        if out.insert(id.trim().to_string(), label.parse()?).is_some() {
            return Err(input_err!("{}: duplicate response for {id}", path.display()));
        }
    }
    Ok(out)
}

/// Percentages for one rater.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub fake_correct_rate: f64,
    pub real_correct_rate: f64,
    pub missed: f64,
    pub found: f64,
    pub confusion: f64,
}

impl StudyReport {
    /// Values rounded to whole percent for display.
    pub fn rounded(&self) -> [(&'static str, f64); 5] {
        [
            ("fake_correct", self.fake_correct_rate.round()),
            ("real_correct", self.real_correct_rate.round()),
            ("missed", self.missed.round()),
            ("found", self.found.round()),
            ("confusion", self.confusion.round()),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

pub fn score_study(responses: &BTreeMap<String, Label>, key: &BTreeMap<String, Label>) -> Result<StudyReport> {
    let key_ids: BTreeSet<&String> = key.keys().collect();
    let resp_ids: BTreeSet<&String> = responses.keys().collect();
    let missing: Vec<_> = key_ids.difference(&resp_ids).collect();
    let unknown: Vec<_> = resp_ids.difference(&key_ids).collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(input_err!(
            "responses do not match the key; missing {missing:?}, unknown {unknown:?}"
        ));
    }
    let count = |label: Label| -> (u64, u64) {
        let ids: Vec<_> = key.iter().filter(|(_, &l)| l == label).collect();
        let correct = ids.iter().filter(|(id, &l)| responses[*id] == l).count();
        (correct as u64, ids.len() as u64)
    };
    let (fc, nf) = count(Label::Fake);
    let (rc, nr) = count(Label::Real);
    if nf == 0 || nr == 0 {
        return Err(input_err!("the key must contain both real and fake items"));
    }
    let rate = |c: u64, n: u64| 100.0 * c as f64 / n as f64;
    // mean misclassification rate from integer counts, one rounding step
    let wrong = (nf - fc) * nr + (nr - rc) * nf;
    let missed = 100.0 * wrong as f64 / (2 * nf * nr) as f64;
    Ok(StudyReport {
        fake_correct_rate: rate(fc, nf),
        real_correct_rate: rate(rc, nr),
        missed,
        found: 100.0 - missed,
        confusion: missed,
    })
}
