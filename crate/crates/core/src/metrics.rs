//! Accuracy, SSIM and feature-space diversity, CMMD, and completion word
//! frequencies.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StyleLabel;
use crate::embed::EmbeddingMatrix;
use crate::promptkit::{CompletedCaption, PromptStrategy};
use crate::synth::SyntheticSample;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(u32, u32, u32, u32),
    #[error("image {w}x{h} is smaller than the {win}x{win} window")]
    TooSmall { w: u32, h: u32, win: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("style {0} missing from {1} embeddings")]
    MissingStyle(StyleLabel, &'static str),
    #[error("cannot decode image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

/// Sum by recursive halving; the result depends only on input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

pub fn accuracy<T: PartialEq>(preds: &[T], truth: &[T]) -> Result<f64, MetricsError> {
    if preds.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), truth.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty("predictions"));
    }
    let correct = preds.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Single-channel image with values on a 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        Self { width, height, data }
    }

    /// BT.601 luma of packed RGB8.
    pub fn from_rgb8(width: u32, height: u32, rgb: &[u8]) -> Self {
        let data = rgb
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        Self::new(width, height, data)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let img = image::open(path).map_err(|e| MetricsError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Ok(Self::from_rgb8(rgb.width(), rgb.height(), rgb.as_raw()))
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width as usize + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub win_size: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            win_size: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: 255.0,
        }
    }
}

/// `win x win` window sums at every fully contained position.
fn box_sums(src: &[f64], w: usize, h: usize, win: usize) -> Vec<f64> {
    let ow = w - win + 1;
    let oh = h - win + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = row[x..x + win].iter().sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..win).map(|k| horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over all fully contained windows, with uniform weights and
/// sample (n - 1) covariance normalisation.
pub fn ssim(a: &GrayImage, b: &GrayImage, params: &SsimParams) -> Result<f64, MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::SizeMismatch(a.width, a.height, b.width, b.height));
    }
    let (w, h, win) = (a.width as usize, a.height as usize, params.win_size);
    if w < win || h < win {
        return Err(MetricsError::TooSmall {
            w: a.width,
            h: a.height,
            win,
        });
    }
    let np = (win * win) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let ux = box_sums(&a.data, w, h, win);
    let uy = box_sums(&b.data, w, h, win);
    let uxx = box_sums(&prod(&a.data, &a.data), w, h, win);
    let uyy = box_sums(&prod(&b.data, &b.data), w, h, win);
    let uxy = box_sums(&prod(&a.data, &b.data), w, h, win);
    let s: Vec<f64> = (0..ux.len())
        .map(|i| {
            let (mx, my) = (ux[i] / np, uy[i] / np);
            let vx = cov_norm * (uxx[i] / np - mx * mx);
            let vy = cov_norm * (uyy[i] / np - my * my);
            let vxy = cov_norm * (uxy[i] / np - mx * my);
            ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect();
    Ok(mean(&s))
}

/// `1 - cos(a, b)`.
pub fn feature_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMetric {
    Ssim,
    FeatureDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub key: String,
    pub size: usize,
    pub pairs: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub metric: DiversityMetric,
    pub groups: Vec<GroupScore>,
    pub skipped: Vec<String>,
    pub pair_count: usize,
    /// Mean over group means; `None` when no group has two members.
    pub global_mean: Option<f64>,
}

impl DiversityReport {
    /// Merges reports computed group by group.
    pub fn combine(metric: DiversityMetric, parts: Vec<DiversityReport>) -> Self {
        let mut groups = Vec::new();
        let mut skipped = Vec::new();
        for p in parts {
            groups.extend(p.groups);
            skipped.extend(p.skipped);
        }
        let means: Vec<f64> = groups.iter().map(|g| g.mean).collect();
        DiversityReport {
            metric,
            pair_count: groups.iter().map(|g| g.pairs).sum(),
            global_mean: (!means.is_empty()).then(|| mean(&means)),
            groups,
            skipped,
        }
    }
}

/// Averages `f` over all unordered pairs within each group, then over groups.
/// Groups with fewer than two members are skipped.
pub fn pairwise_diversity<T: Sync>(
    groups: &[(String, Vec<T>)],
    metric: DiversityMetric,
    f: impl Fn(&T, &T) -> f64 + Sync,
) -> DiversityReport {
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (key, items) in groups {
        let m = items.len();
        if m < 2 {
            log::warn!("diversity group {key} has {m} member(s); skipped");
            skipped.push(key.clone());
            continue;
        }
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
        let vals: Vec<f64> = pairs.par_iter().map(|&(i, j)| f(&items[i], &items[j])).collect();
        scores.push(GroupScore {
            key: key.clone(),
            size: m,
            pairs: vals.len(),
            mean: mean(&vals),
        });
    }
    let means: Vec<f64> = scores.iter().map(|g| g.mean).collect();
    DiversityReport {
        metric,
        pair_count: scores.iter().map(|g| g.pairs).sum(),
        global_mean: (!means.is_empty()).then(|| mean(&means)),
        groups: scores,
        skipped,
    }
}

/// Groups synthetic samples for the diversity protocol.
///
/// Reference-driven strategies group by reference image. The class strategy
/// has no reference, so each style's samples (in plan order) are cut into
/// consecutive blocks of `group_size` and the remainder is dropped.
pub fn diversity_groups<'a>(
    samples: &'a [SyntheticSample],
    strategy: PromptStrategy,
    group_size: usize,
) -> Vec<(String, Vec<&'a SyntheticSample>)> {
    if strategy == PromptStrategy::Class {
        let mut by_style: BTreeMap<StyleLabel, Vec<&SyntheticSample>> = BTreeMap::new();
        for s in samples {
            by_style.entry(s.label).or_default().push(s);
        }
        let mut out = Vec::new();
        for (style, mut items) in by_style {
            items.sort_by(|a, b| a.id.cmp(&b.id));
            for (g, block) in items.chunks_exact(group_size.max(1)).enumerate() {
                out.push((format!("{style}/{g:03}"), block.to_vec()));
            }
        }
        out
    } else {
        let mut by_ref: BTreeMap<String, Vec<&SyntheticSample>> = BTreeMap::new();
        for s in samples {
            let key = s.reference_id.clone().unwrap_or_else(|| s.id.clone());
            by_ref.entry(key).or_default().push(s);
        }
        by_ref.into_iter().collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn mean_kernel(x: &EmbeddingMatrix, y: &EmbeddingMatrix, gamma: f64) -> f64 {
    let vals: Vec<f64> = x
        .rows()
        .flat_map(|a| y.rows().map(move |b| (-gamma * sq_dist(a, b)).exp()))
        .collect();
    mean(&vals)
}

/// Biased RBF-kernel MMD², multiplied by `scale`.
pub fn mmd_rbf(x: &EmbeddingMatrix, y: &EmbeddingMatrix, sigma: f64, scale: f64) -> Result<f64, MetricsError> {
    if x.d != y.d {
        return Err(MetricsError::DimMismatch(x.d, y.d));
    }
    if x.n == 0 || y.n == 0 {
        return Err(MetricsError::Empty("mmd input set"));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let kxx = mean_kernel(x, x, gamma);
    let kyy = mean_kernel(y, y, gamma);
    let kxy = mean_kernel(x, y, gamma);
    Ok(scale * (kxx + kyy - 2.0 * kxy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmmdReport {
    pub sigma: f64,
    pub scale: f64,
    pub per_style: BTreeMap<StyleLabel, f64>,
    pub mean: f64,
}

/// Per-style MMD between synthetic and real embeddings, then the unweighted
/// mean over `styles`.
pub fn cmmd_report(
    syn: &EmbeddingMatrix,
    real: &EmbeddingMatrix,
    styles: &[StyleLabel],
    sigma: f64,
    scale: f64,
) -> Result<CmmdReport, MetricsError> {
    if styles.is_empty() {
        return Err(MetricsError::Empty("style list"));
    }
    let mut per_style = BTreeMap::new();
    for &style in styles {
        let s = syn.with_label(style);
        let r = real.with_label(style);
        if s.n == 0 {
            return Err(MetricsError::MissingStyle(style, "synthetic"));
        }
        if r.n == 0 {
            return Err(MetricsError::MissingStyle(style, "real"));
        }
        per_style.insert(style, mmd_rbf(&s, &r, sigma, scale)?);
    }
    let vals: Vec<f64> = styles.iter().map(|s| per_style[s]).collect();
    Ok(CmmdReport {
        sigma,
        scale,
        mean: mean(&vals),
        per_style,
    })
}

/// Function words dropped from frequency tables.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "of", "with", "in", "on", "at", "to", "for", "by", "from", "her", "his", "its",
    "their", "is", "are", "as", "that", "this", "style", "fashion",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub entries: Vec<(String, usize)>,
}

impl FrequencyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("word,count\n");
        for (w, c) in &self.entries {
            out.push_str(&format!("{w},{c}\n"));
        }
        out
    }
}

/// Counts the words the model filled into masks, sorted by descending count
/// and then alphabetically.
pub fn word_frequencies<'a>(completions: impl IntoIterator<Item = &'a CompletedCaption>) -> FrequencyTable {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for cc in completions {
        for span in &cc.filled_spans {
            for raw in span.text.split_whitespace() {
                let w = raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
                if w.is_empty() || STOPWORDS.contains(&w.as_str()) {
                    continue;
                }
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    FrequencyTable { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{Origin, RowMeta};
    use crate::lingua::{analyze, mask_caption, LexiconTagger};
    use crate::promptkit::{FilledSpan, Validation};
    use crate::rng::SplitRng;

    fn random_image(rng: &mut SplitRng, w: u32, h: u32) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|_| rng.below(256) as f64).collect())
    }

    /// Direct per-window evaluation of the SSIM formula.
    fn ssim_brute(a: &GrayImage, b: &GrayImage, p: &SsimParams) -> f64 {
        let (w, h, win) = (a.width as usize, a.height as usize, p.win_size);
        let np = (win * win) as f64;
        let c1 = (p.k1 * p.data_range).powi(2);
        let c2 = (p.k2 * p.data_range).powi(2);
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        xs.push(a.at(x, y));
                        ys.push(b.at(x, y));
                    }
                }
                let mx = xs.iter().sum::<f64>() / np;
                let my = ys.iter().sum::<f64>() / np;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (np - 1.0);
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (np - 1.0);
                let cxy = xs.iter().zip(&ys).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / (np - 1.0);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let p = SsimParams::default();
        let mut rng = SplitRng::new(5);
        for _ in 0..5 {
            let a = random_image(&mut rng, 32, 32);
            let b = random_image(&mut rng, 32, 32);
            assert_eq!(ssim(&a, &a, &p).unwrap(), 1.0);
            let ab = ssim(&a, &b, &p).unwrap();
            assert!((ab - ssim(&b, &a, &p).unwrap()).abs() < 1e-9);
            assert!((ab - ssim_brute(&a, &b, &p)).abs() < 1e-7);
        }
    }

    #[test]
    fn ssim_constant_images() {
        let p = SsimParams::default();
        let a = GrayImage::new(8, 8, vec![0.0; 64]);
        let b = GrayImage::new(8, 8, vec![255.0; 64]);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expected = c1 / (255.0f64.powi(2) + c1);
        assert!((ssim(&a, &b, &p).unwrap() - expected).abs() < 1e-15);
        assert!(ssim(&a, &GrayImage::new(8, 7, vec![0.0; 56]), &p).is_err());
        assert!(ssim(&GrayImage::new(4, 4, vec![0.0; 16]), &GrayImage::new(4, 4, vec![0.0; 16]), &p).is_err());
    }

    #[test]
    fn luma_weights() {
        let g = GrayImage::from_rgb8(1, 1, &[255, 0, 0]);
        assert!((g.data[0] - 0.299 * 255.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_counts_pairs() {
        let groups = vec![
            ("a".to_string(), vec![1.0f64, 2.0, 4.0]),
            ("b".to_string(), vec![7.0]),
            ("c".to_string(), vec![5.0, 5.0]),
        ];
        let r = pairwise_diversity(&groups, DiversityMetric::FeatureDistance, |x, y| (x - y).abs());
        assert_eq!(r.groups.len(), 2);
        assert_eq!(r.groups[0].pairs, 3);
        assert!((r.groups[0].mean - 2.0).abs() < 1e-12);
        assert_eq!(r.skipped, vec!["b".to_string()]);
        assert_eq!(r.global_mean, Some(1.0));
    }

    fn matrix(rows: &[&[f32]], label: StyleLabel) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            rows[0].len(),
            rows.iter().map(|r| r.to_vec()).collect(),
            (0..rows.len())
                .map(|i| RowMeta {
                    id: i.to_string(),
                    label,
                    origin: Origin::Real,
                })
                .collect(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn mmd_closed_forms() {
        let sigma = 10.0;
        let x = matrix(&[&[0.0, 0.0]], StyleLabel::Gal);
        let y = matrix(&[&[10.0, 10.0]], StyleLabel::Gal);
        let v = mmd_rbf(&x, &y, sigma, 1000.0).unwrap();
        assert!((v - 1000.0 * (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-9);
        let xx = matrix(&[&[1.0, 2.0], &[3.0, -1.0]], StyleLabel::Gal);
        assert!(mmd_rbf(&xx, &xx, sigma, 1000.0).unwrap().abs() < 1e-9 * 1000.0);
        assert!(mmd_rbf(&xx, &matrix(&[&[1.0]], StyleLabel::Gal), sigma, 1.0).is_err());
    }

    #[test]
    fn cmmd_means_styles() {
        let mut syn = matrix(&[&[0.0, 0.0]], StyleLabel::Gal);
        let mut real = matrix(&[&[3.0, 4.0]], StyleLabel::Gal);
        syn.manifest.push(RowMeta {
            id: "r".into(),
            label: StyleLabel::Rock,
            origin: Origin::Synthetic,
        });
        syn.data.extend([1.0, 1.0]);
        syn.n += 1;
        real.manifest.push(RowMeta {
            id: "r".into(),
            label: StyleLabel::Rock,
            origin: Origin::Real,
        });
        real.data.extend([1.0, 1.0]);
        real.n += 1;
        let r = cmmd_report(&syn, &real, &[StyleLabel::Gal, StyleLabel::Rock], 1.0, 1.0).unwrap();
        let gal = 2.0 - 2.0 * (-25.0f64 / 2.0).exp();
        assert!((r.per_style[&StyleLabel::Gal] - gal).abs() < 1e-12);
        assert_eq!(r.per_style[&StyleLabel::Rock], 0.0);
        assert!((r.mean - gal / 2.0).abs() < 1e-12);
        let err = cmmd_report(&syn, &real, &[StyleLabel::Mode], 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("mode"));
    }

    #[test]
    fn frequencies_from_filled_spans() {
        let tc = analyze("a red dress with a blue top", &LexiconTagger::builtin()).unwrap();
        let mc = mask_caption(&tc, 0.5, 0).unwrap();
        let mk = |words: &[&str]| CompletedCaption {
            masked: mc.clone(),
            raw_response: String::new(),
            completed_text: String::new(),
            filled_spans: words
                .iter()
                .enumerate()
                .map(|(i, w)| FilledSpan {
                    mask_index: i,
                    text: w.to_string(),
                })
                .collect(),
            validation: Validation::Accepted,
        };
        let a = mk(&["Cute", "pastel", "cute."]);
        let b = mk(&["the"]);
        let t = word_frequencies([&a, &b]);
        assert_eq!(t.entries, vec![("cute".to_string(), 2), ("pastel".to_string(), 1)]);
        assert_eq!(t.to_csv(), "word,count\ncute,2\npastel,1\n");
        assert!(word_frequencies([]).entries.is_empty());
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[2, 1]).unwrap(), 0.0);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(accuracy::<u8>(&[], &[]).is_err());
    }
}
