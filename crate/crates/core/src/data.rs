//! Synthetic face corpus, PGM/DFBP ingestion and the labels CSV.
//!
//! Pixels live in `[-1, 1]`: 8-bit value `v` with max value `m` maps to
//! `2·v/m − 1`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::read_tensor;
use crate::error::{Error, Result};
use crate::rng::DiffusionRng;
use crate::tensor::Tensor;

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;

/// Generator parameters of one synthetic face.
///
/// | field             | range        |
/// |-------------------|--------------|
/// | `eye_spacing`     | [0.25, 0.45] |
/// | `aspect`          | [0.7, 1.0]   |
/// | `mouth_curvature` | [-1, 1]      |
/// | `asymmetry`       | [0, 1]       |
/// | `texture_noise`   | [0, 1]       |
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceParams {
    pub eye_spacing: f64,
    pub aspect: f64,
    pub mouth_curvature: f64,
    pub asymmetry: f64,
    pub texture_noise: f64,
}

impl SyntheticFaceParams {
    pub const EYE_SPACING: (f64, f64) = (0.25, 0.45);
    pub const ASPECT: (f64, f64) = (0.7, 1.0);
    pub const MOUTH_CURVATURE: (f64, f64) = (-1.0, 1.0);
    pub const ASYMMETRY: (f64, f64) = (0.0, 1.0);
    pub const TEXTURE_NOISE: (f64, f64) = (0.0, 1.0);

    pub fn sample(rng: &mut DiffusionRng) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| rng.uniform_range(lo, hi);
        SyntheticFaceParams {
            eye_spacing: draw(Self::EYE_SPACING),
            aspect: draw(Self::ASPECT),
            mouth_curvature: draw(Self::MOUTH_CURVATURE),
            asymmetry: draw(Self::ASYMMETRY),
            texture_noise: draw(Self::TEXTURE_NOISE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("eye_spacing", self.eye_spacing, Self::EYE_SPACING),
            ("aspect", self.aspect, Self::ASPECT),
            ("mouth_curvature", self.mouth_curvature, Self::MOUTH_CURVATURE),
            ("asymmetry", self.asymmetry, Self::ASYMMETRY),
            ("texture_noise", self.texture_noise, Self::TEXTURE_NOISE),
        ];
        for (name, v, (lo, hi)) in fields {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Contract(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Noiseless ground-truth score in `[1, 5]`:
    ///
    /// `q = 0.55·(1 − asymmetry) + 0.30·(1 − texture_noise) + 0.15·(mouth_curvature + 1)/2`,
    /// `score = 1 + 4q`.
    ///
    /// A symmetric, noise-free face with a full smile scores 5.
    pub fn score(&self) -> f64 {
        let q = 0.55 * (1.0 - self.asymmetry)
            + 0.30 * (1.0 - self.texture_noise)
            + 0.15 * (self.mouth_curvature + 1.0) / 2.0;
        MIN_SCORE + (MAX_SCORE - MIN_SCORE) * q
    }
}

const BACKGROUND: f64 = -0.8;
const SKIN: f64 = 0.4;
const FEATURE: f64 = -0.6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Renders a `size × size × 1` face. `rng` only feeds the texture noise.
pub fn render_face(params: &SyntheticFaceParams, size: usize, rng: &mut DiffusionRng) -> Result<Tensor<f32>> {
    if size < 4 {
        return Err(Error::Contract(format!("image size {size} is too small (minimum 4)")));
    }
    params.validate()?;
    let (rx, ry) = (0.75 * params.aspect, 0.85);
    let eye_sigma = 0.09;
    let left_eye = (-params.eye_spacing, -0.25);
    let right_eye = (
        params.eye_spacing + 0.15 * params.asymmetry,
        -0.25 + 0.2 * params.asymmetry,
    );
    let mouth_half = 0.35;
    let mut data = Vec::with_capacity(size * size);
    for row in 0..size {
        let v = (2.0 * row as f64 + 1.0) / size as f64 - 1.0;
        for col in 0..size {
            let u = (2.0 * col as f64 + 1.0) / size as f64 - 1.0;
            let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
            let mut px = BACKGROUND + (SKIN - BACKGROUND) * sigmoid((1.0 - r) / 0.05);

            let blob = |(cx, cy): (f64, f64)| (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * eye_sigma * eye_sigma)).exp();
            let eyes = blob(left_eye).max(blob(right_eye));
            px += (FEATURE - px) * eyes;

            let along = (u / mouth_half).clamp(-1.0, 1.0);
            let curve = 0.4 + 0.12 * params.mouth_curvature * (1.0 - along * along);
            let across = (-(v - curve).powi(2) / (2.0 * 0.05 * 0.05)).exp();
            let span = sigmoid((mouth_half - u.abs()) / 0.04);
            px += (FEATURE - px) * across * span;

            px += params.texture_noise * 0.5 * rng.normal();
            data.push(px.clamp(-1.0, 1.0) as f32);
        }
    }
    Tensor::new([size, size, 1], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub params: SyntheticFaceParams,
    pub image: Tensor<f32>,
    /// Present for labeled corpora.
    pub score: Option<f64>,
}

impl SyntheticSample {
    pub fn unlabeled(&self) -> UnlabeledSample {
        UnlabeledSample {
            id: self.id.clone(),
            image: self.image.clone(),
        }
    }

    pub fn labeled(&self) -> Option<LabeledSample> {
        self.score.map(|score| LabeledSample {
            id: self.id.clone(),
            image: self.image.clone(),
            score,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub labeled: bool,
    /// Std of Gaussian rating noise added to the score before clamping.
    pub rating_noise: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n: 8,
            size: 16,
            seed: 0,
            labeled: true,
            rating_noise: 0.0,
        }
    }
}

/// Sample `i` uses its own stream derived from `(seed, i)`, so a corpus of
/// `n` images is a prefix of the corpus of `n + 1`.
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<SyntheticSample>> {
    if spec.n == 0 {
        return Err(Error::Contract("corpus size must be at least 1".into()));
    }
    if !(spec.rating_noise >= 0.0 && spec.rating_noise.is_finite()) {
        return Err(Error::Contract(format!("invalid rating noise {}", spec.rating_noise)));
    }
    let width = (spec.n - 1).to_string().len().max(4);
    (0..spec.n)
        .map(|i| {
            let mut rng = DiffusionRng::derive(spec.seed, i as u64);
            let params = SyntheticFaceParams::sample(&mut rng);
            let image = render_face(&params, spec.size, &mut rng)?;
            let score = spec.labeled.then(|| {
                let noise = if spec.rating_noise > 0.0 {
                    spec.rating_noise * rng.normal()
                } else {
                    0.0
                };
                (params.score() + noise).clamp(MIN_SCORE, MAX_SCORE)
            });
            Ok(SyntheticSample {
                id: format!("face_{i:0width$}"),
                params,
                image,
                score,
            })
        })
        .collect()
}

// ---- PGM ----

fn pixel_to_byte(v: f32) -> u8 {
    (((v as f64 + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Encodes an `H×W×1` image as binary PGM with max value 255.
pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w, 1] => (*h, *w),
        s => return Err(Error::Shape(format!("PGM needs an H×W×1 image, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| pixel_to_byte(v)));
    Ok(out)
}

/// Decodes 8-bit binary PGM into an `H×W×1` image scaled to `[-1, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("PGM header field {} is missing", k + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format("PGM header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("PGM header must end with one whitespace byte".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("PGM has empty size {w}x{h}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::Format(format!("PGM max value {maxval} unsupported (8-bit only)")));
    }
    let n = w.checked_mul(h).ok_or_else(|| Error::Format("PGM size overflow".into()))?;
    let pixels = &bytes[pos..];
    if pixels.len() < n {
        return Err(Error::Truncated(format!("PGM needs {n} pixel bytes, has {}", pixels.len())));
    }
    if pixels.len() > n {
        return Err(Error::Format(format!("{} trailing bytes after PGM pixels", pixels.len() - n)));
    }
    let m = maxval as f64;
    let data = pixels
        .iter()
        .map(|&b| (2.0 * (b.min(maxval as u8) as f64) / m - 1.0) as f32)
        .collect();
    Tensor::new([h, w, 1], data)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format(m) | Error::Truncated(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a `.pgm` or single-tensor `.dfbp` image. Rank-2 tensors gain a
/// trailing channel axis.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        Some("dfbp") => {
            let t = read_tensor(path)?;
            match t.shape().len() {
                3 => Ok(t),
                2 => {
                    let (h, w) = (t.shape()[0], t.shape()[1]);
                    t.reshape([h, w, 1])
                }
                _ => Err(Error::Shape(format!(
                    "{}: image tensor must be H×W or H×W×C, got {:?}",
                    path.display(),
                    t.shape()
                ))),
            }
        }
        _ => Err(Error::Format(format!(
            "{}: unsupported image type (expected .pgm or .dfbp)",
            path.display()
        ))),
    }
}

/// Every entry of `dir`, sorted by file name, must be a `.pgm` or `.dfbp`
/// image; anything else is an error.
pub fn read_image_dir(dir: impl AsRef<Path>) -> Result<Vec<UnlabeledSample>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Contract(format!("{} contains no images", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            if p.is_dir() {
                return Err(Error::Format(format!("{}: unexpected subdirectory", p.display())));
            }
            let id = sample_id(p);
            Ok(UnlabeledSample { id, image: read_image(p)? })
        })
        .collect()
}

// ---- labels CSV ----

/// Parses a `path,score` CSV with header. Rows keep file order.
pub fn parse_labels_csv(text: &str, origin: &Path) -> Result<Vec<(String, f64)>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.display().to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["path", "score"] {
        return Err(parse_err(1, format!("header must be `path,score`, got `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(parse_err(line, format!("expected 2 fields, found {}", record.len())));
        }
        let path = record[0].to_string();
        if path.is_empty() {
            return Err(parse_err(line, "empty path".into()));
        }
        let score: f64 = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("score {:?} is not a number", &record[1])))?;
        if !(MIN_SCORE..=MAX_SCORE).contains(&score) {
            return Err(Error::ScoreRange { id: path, score });
        }
        rows.push((path, score));
    }
    Ok(rows)
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels_csv(&text, path)
}

/// A sample's id is its file name without the extension.
pub fn sample_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads the labels CSV and loads each image; relative paths resolve
/// against the CSV's directory. Sample ids must be unique.
pub fn load_labeled(labels_csv: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    let labels_csv = labels_csv.as_ref();
    let base = labels_csv.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    read_labels_csv(labels_csv)?
        .into_iter()
        .map(|(rel, score)| {
            let path = base.join(&rel);
            let id = sample_id(&path);
            if !seen.insert(id.clone()) {
                return Err(Error::Format(format!(
                    "{}: sample id {id:?} appears twice",
                    labels_csv.display()
                )));
            }
            let image = read_image(&path)?;
            Ok(LabeledSample { id, image, score })
        })
        .collect()
}

pub fn write_labels_csv(path: impl AsRef<Path>, rows: &[(String, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("path,score\n");
    for (p, s) in rows {
        text.push_str(&format!("{p},{s}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---- corpus on disk ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub seed_stream: u64,
    pub params: SyntheticFaceParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub generator: String,
    pub spec: CorpusSpec,
    pub score_function: String,
    pub samples: Vec<ManifestEntry>,
}

pub const IMAGE_SUBDIR: &str = "images";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `images/<id>.pgm`, `manifest.json` and, when labeled,
/// `labels.csv` under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, spec: &CorpusSpec, samples: &[SyntheticSample]) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    let images = dir.join(IMAGE_SUBDIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut labels = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("{IMAGE_SUBDIR}/{}.pgm", s.id);
        write_pgm(dir.join(&rel), &s.image)?;
        if let Some(score) = s.score {
            labels.push((rel.clone(), score));
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            path: rel,
            seed_stream: i as u64,
            params: s.params,
            score: s.score,
        });
    }
    if spec.labeled {
        write_labels_csv(dir.join(LABELS_FILE), &labels)?;
    }
    let manifest = CorpusManifest {
        generator: "synthetic-faces/1".into(),
        spec: *spec,
        score_function: "1 + 4*(0.55*(1-asymmetry) + 0.30*(1-texture_noise) + 0.15*(mouth_curvature+1)/2)".into(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: usize, labeled: bool) -> CorpusSpec {
        CorpusSpec {
            n,
            labeled,
            ..Default::default()
        }
    }

    #[test]
    fn scores_are_in_range_and_recomputable() {
        let corpus = generate_synthetic_corpus(&spec(50, true)).unwrap();
        for s in &corpus {
            let y = s.score.unwrap();
            assert!((1.0..=5.0).contains(&y));
            assert_eq!(y, s.params.score());
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(generate_synthetic_corpus(&spec(5, false)).unwrap().iter().all(|s| s.score.is_none()));
    }

    #[test]
    fn best_face_scores_five() {
        let p = SyntheticFaceParams {
            eye_spacing: 0.3,
            aspect: 0.8,
            mouth_curvature: 1.0,
            asymmetry: 0.0,
            texture_noise: 0.0,
        };
        assert_eq!(p.score(), 5.0);
        let worst = SyntheticFaceParams {
            mouth_curvature: -1.0,
            asymmetry: 1.0,
            texture_noise: 1.0,
            ..p
        };
        assert_eq!(worst.score(), 1.0);
    }

    #[test]
    fn corpus_is_deterministic_per_seed() {
        let a = generate_synthetic_corpus(&spec(6, true)).unwrap();
        let b = generate_synthetic_corpus(&spec(6, true)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&CorpusSpec { seed: 1, ..spec(6, true) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rating_noise_stays_in_range() {
        let s = CorpusSpec {
            rating_noise: 2.0,
            ..spec(40, true)
        };
        let corpus = generate_synthetic_corpus(&s).unwrap();
        assert!(corpus.iter().all(|x| (1.0..=5.0).contains(&x.score.unwrap())));
        assert!(corpus.iter().any(|x| x.score.unwrap() != x.params.score()));
    }

    #[test]
    fn invalid_requests() {
        assert!(generate_synthetic_corpus(&spec(0, true)).is_err());
        assert!(generate_synthetic_corpus(&CorpusSpec { size: 2, ..spec(1, true) }).is_err());
    }

    #[test]
    fn pgm_endpoints_and_roundtrip() {
        let t = decode_pgm(b"P5\n# comment\n3 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(t.shape(), &[1, 3, 1]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[2], 1.0);
        let again = decode_pgm(&encode_pgm(&t).unwrap()).unwrap();
        assert_eq!(again, t);
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x00"), Err(Error::Truncated(_))));
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn labels_csv_rows_and_errors() {
        let origin = Path::new("labels.csv");
        let rows = parse_labels_csv("path,score\nimg1.pgm,3.5\n", origin).unwrap();
        assert_eq!(rows, vec![("img1.pgm".to_string(), 3.5)]);
        assert!(matches!(
            parse_labels_csv("path,score\nimg2.pgm,7.0\n", origin),
            Err(Error::ScoreRange { score, .. }) if score == 7.0
        ));
        match parse_labels_csv("path,score\na.pgm,2\nb.pgm,x\n", origin) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_labels_csv("path,score\na.pgm,2,9\n", origin) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_labels_csv("file,y\n", origin), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn corpus_on_disk_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(5, true);
        let corpus = generate_synthetic_corpus(&s).unwrap();
        let manifest = write_corpus(dir.path(), &s, &corpus).unwrap();
        assert_eq!(manifest.samples.len(), 5);

        let images = read_image_dir(dir.path().join(IMAGE_SUBDIR)).unwrap();
        assert_eq!(images.len(), 5);
        assert_eq!(images[0].id, corpus[0].id);
        let labeled = load_labeled(dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(labeled.len(), 5);
        assert_eq!(labeled[2].id, corpus[2].id);
        for (l, c) in labeled.iter().zip(&corpus) {
            assert_eq!(l.score, c.score.unwrap());
            let err = l.image.data().iter().zip(c.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err <= 1.0 / 255.0 + 1e-6);
        }
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let back: CorpusManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn ingestion_never_skips() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(dir.path().join("a.pgm"), &Tensor::zeros([2, 2, 1])).unwrap();
        crate::container::write_tensor(dir.path().join("b.dfbp"), &Tensor::zeros([2, 2])).unwrap();
        let got = read_image_dir(dir.path()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].image.shape(), &[2, 2, 1]);
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert!(read_image_dir(dir.path()).is_err());

        let labels = dir.path().join("labels.csv");
        fs::write(&labels, "path,score\nmissing.pgm,2\n").unwrap();
        assert!(matches!(load_labeled(&labels), Err(Error::Io { .. })));

        fs::create_dir_all(dir.path().join("sub")).unwrap();
        write_pgm(dir.path().join("sub/a.pgm"), &Tensor::zeros([2, 2, 1])).unwrap();
        fs::write(&labels, "path,score
a.pgm,2
sub/a.pgm,3
").unwrap();
        assert!(matches!(load_labeled(&labels), Err(Error::Format(_))));
        fs::write(&labels, "path,score
sub/a.pgm,3
").unwrap();
        assert_eq!(load_labeled(&labels).unwrap()[0].id, "a");
    }

    proptest! {
        #[test]
        fn score_is_lipschitz(a in prop::array::uniform5(0.0f64..1.0), b in prop::array::uniform5(0.0f64..1.0)) {
            let mk = |u: [f64; 5]| SyntheticFaceParams {
                eye_spacing: 0.25 + 0.2 * u[0],
                aspect: 0.7 + 0.3 * u[1],
                mouth_curvature: -1.0 + 2.0 * u[2],
                asymmetry: u[3],
                texture_noise: u[4],
            };
            let (p, q) = (mk(a), mk(b));
            let dist = (p.mouth_curvature - q.mouth_curvature).abs()
                + (p.asymmetry - q.asymmetry).abs()
                + (p.texture_noise - q.texture_noise).abs();
            // largest coefficient is 4·0.55
            prop_assert!((p.score() - q.score()).abs() <= 2.2 * dist + 1e-12);
        }
    }
}
