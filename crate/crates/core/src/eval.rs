//! k-fold cross-validation, reports and the pre-training ablation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::LabeledSample;
use crate::dit::DiTModel;
use crate::downstream::{fit_head, FeatureSource, HeadConfig};
use crate::error::{Error, Result};
use crate::metrics::{mae, pcc};
use crate::rng::DiffusionRng;
use crate::tensor::Tensor;

/// Fold index of every sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    k: usize,
    assignments: Vec<usize>,
}

const FOLD_STREAM: u64 = 0x464f_4c44;

impl FoldSplit {
    /// Checks that every fold in `0..k` is used.
    pub fn new(k: usize, assignments: Vec<usize>) -> Result<Self> {
        if k < 2 {
            return Err(Error::Contract(format!("need k >= 2 folds, got {k}")));
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            *sizes
                .get_mut(a)
                .ok_or_else(|| Error::Contract(format!("fold {a} outside 0..{k}")))? += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Contract(format!("fold {empty} is empty")));
        }
        Ok(FoldSplit { k, assignments })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.iter().for_each(|&a| sizes[a] += 1);
        sizes
    }

    /// Held-out indices of `fold`, ascending.
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

/// Seeded shuffle, then contiguous chunks; the first `n % k` folds get one
/// extra sample.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Contract(format!("need k >= 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Contract(format!("cannot split {n} samples into {k} folds")));
    }
    let perm = DiffusionRng::derive(seed, FOLD_STREAM).permutation(n);
    let (base, extra) = (n / k, n % k);
    let mut assignments = vec![0; n];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &i in &perm[pos..pos + size] {
            assignments[i] = fold;
        }
        pos += size;
    }
    FoldSplit::new(k, assignments)
}

/// Parses a `sample_id,fold` CSV and orders it by `ids`. Every id must
/// appear exactly once.
pub fn parse_folds_csv(text: &str, origin: &Path, ids: &[&str]) -> Result<FoldSplit> {
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
    if header.iter().collect::<Vec<_>>() != ["sample_id", "fold"] {
        return Err(parse_err(1, "header must be `sample_id,fold`".into()));
    }
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(parse_err(line, format!("expected 2 fields, found {}", record.len())));
        }
        let fold: usize = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("fold {:?} is not a non-negative integer", &record[1])))?;
        if by_id.insert(record[0].to_string(), fold).is_some() {
            return Err(parse_err(line, format!("duplicate sample id {:?}", &record[0])));
        }
    }
    let assignments = ids
        .iter()
        .map(|id| {
            by_id
                .remove(*id)
                .ok_or_else(|| Error::Contract(format!("sample {id:?} has no fold assignment")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::Contract(format!("fold file names unknown sample {extra:?}")));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    FoldSplit::new(k, assignments)
}

pub fn read_folds_csv(path: impl AsRef<Path>, ids: &[&str]) -> Result<FoldSplit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_folds_csv(&text, path, ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub pcc: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub folds: Vec<FoldResult>,
    pub mean_pcc: f64,
    pub mean_mae: f64,
    /// SHA-256 over the feature source and head settings.
    pub fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldResult>, fingerprint: String, seed: u64) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Contract("report needs at least one fold".into()));
        }
        let n = folds.len() as f64;
        let mean_pcc = folds.iter().map(|f| f.pcc).sum::<f64>() / n;
        let mean_mae = folds.iter().map(|f| f.mae).sum::<f64>() / n;
        Ok(EvalReport {
            folds,
            mean_pcc,
            mean_mae,
            fingerprint,
            seed,
        })
    }

    /// `fold,pcc,mae`, one row per fold, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,pcc,mae\n");
        for f in &self.folds {
            let _ = writeln!(out, "{},{},{}", f.fold, f.pcc, f.mae);
        }
        let _ = writeln!(out, "mean,{},{}", self.mean_pcc, self.mean_mae);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("seed {}  fingerprint {}\n", self.seed, &self.fingerprint[..16.min(self.fingerprint.len())]);
        let _ = writeln!(out, "{:<6} {:>8} {:>8}", "fold", "PCC↑", "MAE↓");
        for f in &self.folds {
            let _ = writeln!(out, "{:<6} {:>8.4} {:>8.4}", f.fold, f.pcc, f.mae);
        }
        let _ = writeln!(out, "{:<6} {:>8.4} {:>8.4}", "mean", self.mean_pcc, self.mean_mae);
        out
    }
}

/// One row of a method comparison; `None` renders as `--`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub pcc: Option<f64>,
    pub mae: Option<f64>,
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.method.chars().count()).max().unwrap_or(0).max(6);
    let cell = |v: Option<f64>| v.map_or("--".to_string(), |v| format!("{v:.4}"));
    let mut out = format!("{:<width$}  {:>8}  {:>8}\n", "Method", "PCC↑", "MAE↓");
    for r in rows {
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", r.method, cell(r.pcc), cell(r.mae));
    }
    out
}

fn fingerprint(source: &FeatureSource<'_>, head: &HeadConfig) -> String {
    let mut h = Sha256::new();
    match source {
        FeatureSource::Encoder { model, t_feat } => {
            h.update(b"encoder");
            h.update(serde_json::to_string(model.config()).unwrap_or_default());
            h.update(model.params().checksum());
            h.update((*t_feat as u64).to_le_bytes());
        }
        FeatureSource::Pixels => h.update(b"pixels"),
    }
    h.update(serde_json::to_string(head).unwrap_or_default());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn rows(features: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let d = features.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
    }
    Tensor::new([idx.len(), d], data)
}

/// Fits a head on `k − 1` folds and scores the held-out fold, for every
/// fold. Fold `f` seeds its head from `(seed, f)`.
pub fn cross_validate(
    source: FeatureSource<'_>,
    data: &[LabeledSample],
    folds: &FoldSplit,
    head: &HeadConfig,
    seed: u64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("no labeled samples to evaluate".into()));
    }
    if folds.len() != data.len() {
        return Err(Error::Contract(format!(
            "fold split covers {} samples, data has {}",
            folds.len(),
            data.len()
        )));
    }
    if let FeatureSource::Encoder { model, .. } = source {
        if !model.is_frozen() {
            return Err(Error::Contract("evaluation requires a frozen encoder".into()));
        }
    }
    let features = source.extract_all(data.iter().map(|s| &s.image))?;
    let targets: Vec<f64> = data.iter().map(|s| s.score).collect();
    let mut results = Vec::with_capacity(folds.k());
    for fold in 0..folds.k() {
        let train = folds.train_indices(fold);
        let test = folds.test_indices(fold);
        let y_train: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let y_test: Vec<f64> = test.iter().map(|&i| targets[i]).collect();
        let fold_seed = DiffusionRng::derive(seed, fold as u64).next_u64();
        let fitted = fit_head(&rows(&features, &train)?, &y_train, head, fold_seed)?;
        let pred = fitted.predict_batch(&rows(&features, &test)?)?;
        results.push(FoldResult {
            fold,
            pcc: pcc(&y_test, &pred)?,
            mae: mae(&y_test, &pred)?,
        });
    }
    EvalReport::from_folds(results, fingerprint(&source, head), seed)
}

/// Pre-training strategies compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    /// Randomly initialized encoder, frozen; only the head is trained.
    ScratchFrozenEncoder,
    /// No encoder: the head is trained directly on pixels.
    ScratchEndToEndHeadOnly,
    /// Diffusion-pretrained encoder, frozen.
    GenerativePretrained,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [
        AblationVariant::ScratchFrozenEncoder,
        AblationVariant::ScratchEndToEndHeadOnly,
        AblationVariant::GenerativePretrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::ScratchFrozenEncoder => "scratch-frozen-encoder",
            AblationVariant::ScratchEndToEndHeadOnly => "scratch-end-to-end-head-only",
            AblationVariant::GenerativePretrained => "generative-pretrained",
        }
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<AblationVariant>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

pub struct AblationSetup<'a> {
    pub pretrained: &'a DiTModel<f32>,
    pub t_feat: usize,
    pub head: HeadConfig,
    /// Init seed of the random encoder.
    pub scratch_seed: u64,
}

/// Runs every variant on the same folds and seed.
pub fn run_ablation(
    data: &[LabeledSample],
    folds: &FoldSplit,
    seed: u64,
    variants: &[AblationVariant],
    setup: &AblationSetup<'_>,
) -> Result<Vec<(AblationVariant, EvalReport)>> {
    let mut scratch = None;
    variants
        .iter()
        .map(|&v| {
            let source = match v {
                AblationVariant::GenerativePretrained => FeatureSource::Encoder {
                    model: setup.pretrained,
                    t_feat: setup.t_feat,
                },
                AblationVariant::ScratchFrozenEncoder => {
                    if scratch.is_none() {
                        let mut m = DiTModel::new_dense_random(setup.pretrained.config().clone(), setup.scratch_seed)?;
                        m.freeze();
                        scratch = Some(m);
                    }
                    FeatureSource::Encoder {
                        model: scratch.as_ref().expect("just built"),
                        t_feat: setup.t_feat,
                    }
                }
                AblationVariant::ScratchEndToEndHeadOnly => FeatureSource::Pixels,
            };
            Ok((v, cross_validate(source, data, folds, &setup.head, seed)?))
        })
        .collect()
}

pub fn ablation_table(results: &[(AblationVariant, EvalReport)]) -> String {
    let rows: Vec<ComparisonRow> = results
        .iter()
        .map(|(v, r)| ComparisonRow {
            method: v.name().to_string(),
            pcc: Some(r.mean_pcc),
            mae: Some(r.mean_mae),
        })
        .collect();
    render_comparison(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusSpec};
    use proptest::prelude::*;

    #[test]
    fn ten_into_five() {
        let s = kfold_split(10, 5, 0).unwrap();
        assert_eq!(s.fold_sizes(), vec![2; 5]);
        assert_eq!(s, kfold_split(10, 5, 0).unwrap());
        let mut all: Vec<usize> = (0..5).flat_map(|f| s.test_indices(f)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn remainder_goes_to_first_folds() {
        assert_eq!(kfold_split(11, 5, 3).unwrap().fold_sizes(), vec![3, 2, 2, 2, 2]);
        assert!(kfold_split(3, 5, 0).is_err());
        assert!(kfold_split(3, 1, 0).is_err());
    }

    #[test]
    fn external_folds() {
        let origin = Path::new("folds.csv");
        let s = parse_folds_csv("sample_id,fold\nb,1\na,0\n", origin, &["a", "b"]).unwrap();
        assert_eq!(s.assignments(), &[0, 1]);
        assert!(parse_folds_csv("sample_id,fold\na,0\n", origin, &["a", "b"]).is_err());
        assert!(parse_folds_csv("sample_id,fold\na,0\nb,1\nc,1\n", origin, &["a", "b"]).is_err());
        assert!(matches!(
            parse_folds_csv("sample_id,fold\na,0\nb,x\n", origin, &["a", "b"]),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn report_shapes() {
        let folds = vec![
            FoldResult { fold: 0, pcc: 0.5, mae: 0.25 },
            FoldResult { fold: 1, pcc: 0.75, mae: 0.5 },
        ];
        let r = EvalReport::from_folds(folds, "ab".repeat(32), 1).unwrap();
        assert_eq!(r.mean_pcc, 0.625);
        assert_eq!(r.to_csv(), "fold,pcc,mae\n0,0.5,0.25\n1,0.75,0.5\nmean,0.625,0.375\n");
        assert!(r.to_table().contains("PCC↑"));
    }

    #[test]
    fn comparison_renders_missing_cells() {
        let t = render_comparison(&[
            ComparisonRow { method: "CNN + LDL".into(), pcc: Some(0.9), mae: None },
            ComparisonRow { method: "ours".into(), pcc: Some(0.92), mae: Some(0.21) },
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("PCC↑") && lines[0].contains("MAE↓"));
        assert!(lines[1].trim_end().ends_with("--"));
        assert!(lines[2].ends_with("0.2100"));
    }

    #[test]
    fn variant_names() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!(matches!(parse_variants("generative-pretrained,nope"), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn cross_validation_on_pixels() {
        let data: Vec<_> = generate_synthetic_corpus(&CorpusSpec { n: 20, ..Default::default() })
            .unwrap()
            .iter()
            .map(|s| s.labeled().unwrap())
            .collect();
        let folds = kfold_split(20, 4, 0).unwrap();
        let cfg = HeadConfig { steps: 50, ..Default::default() };
        let r = cross_validate(FeatureSource::Pixels, &data, &folds, &cfg, 0).unwrap();
        assert_eq!(r.folds.len(), 4);
        assert_eq!(r.to_csv().lines().count(), 6);
        assert_eq!(r, cross_validate(FeatureSource::Pixels, &data, &folds, &cfg, 0).unwrap());
        assert!(cross_validate(FeatureSource::Pixels, &data[..10], &folds, &cfg, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let s = kfold_split(n, k, seed).unwrap();
            let sizes = s.fold_sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
