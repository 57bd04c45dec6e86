use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dfbp_core::config::RunConfig;
use dfbp_core::data::{generate_synthetic_corpus, load_labeled, read_image_dir, write_corpus, write_pgm, LabeledSample};
use dfbp_core::diffusion::ancestral_sample;
use dfbp_core::downstream::{finetune_head, FeatureSource};
use dfbp_core::eval::{
    ablation_table, cross_validate, kfold_split, parse_variants, read_folds_csv, run_ablation, AblationSetup,
    AblationVariant, FoldSplit,
};
use dfbp_core::gradcheck::run_suite;
use dfbp_core::train::{load_checkpoint, save_checkpoint, write_loss_csv, Checkpoint, Trainer};
use dfbp_core::{DiTModel, DiffusionRng, Error, Tensor};

use crate::Common;

/// A failed command: exit code plus the single stderr line.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "config".into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source: e,
        }
        .into()
    }

    pub fn report(&self) -> ! {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        eprintln!("error code={} kind={}: {}", self.code, self.kind, flat.join(" "));
        std::process::exit(self.code.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownVariant(_) => 1,
            Error::Config(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

impl Common {
    pub fn load(&self) -> Result<RunConfig, Failure> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

/// `<out>.loss.csv` next to a checkpoint.
pub fn loss_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    out.with_file_name(name)
}

/// Loads an encoder and checks the run config against it.
fn load_encoder(cfg: &RunConfig, ckpt: &Path) -> Result<DiTModel<f32>, Failure> {
    let Checkpoint { mut model, .. } = load_checkpoint(ckpt)?;
    let trained = model.config();
    if let Some(p) = cfg.feature.pooling {
        if p != trained.feature_pooling {
            return Err(Failure::config(format!(
                "feature.pooling {p:?} does not match the checkpoint's {:?}",
                trained.feature_pooling
            )));
        }
    }
    if cfg.feature.t_feat > trained.timesteps {
        return Err(Failure::config(format!(
            "feature.t_feat = {} exceeds the checkpoint's T = {}",
            cfg.feature.t_feat, trained.timesteps
        )));
    }
    model.freeze();
    Ok(model)
}

fn folds_for(cfg: &RunConfig, data: &[LabeledSample]) -> Result<FoldSplit, Failure> {
    Ok(match &cfg.eval.folds_csv {
        Some(path) => {
            let ids: Vec<&str> = data.iter().map(|s| s.id.as_str()).collect();
            read_folds_csv(path, &ids)?
        }
        None => kfold_split(data.len(), cfg.eval.k, cfg.eval.seed)?,
    })
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let samples = generate_synthetic_corpus(&cfg.synth)?;
    let manifest = write_corpus(out, &cfg.synth, &samples)?;
    println!("wrote {} images to {}", manifest.samples.len(), out.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let corpus: Vec<Tensor<f32>> = read_image_dir(data)?.into_iter().map(|s| s.image).collect();
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(load_checkpoint(path)?)?,
        None => Trainer::new(cfg.model.clone(), cfg.schedule, cfg.optim, cfg.train.clone())?,
    };
    let remaining = cfg.train.steps.saturating_sub(trainer.step());
    let trace = trainer.run(&corpus, remaining)?;
    save_checkpoint(&trainer.checkpoint(), out)?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &trace).map_err(|e| Failure::io(out, e))?;
    let loss_csv = loss_path(out);
    write_file(&loss_csv, &csv)?;
    match trace.last() {
        Some(r) => println!("step {} loss {:.6} -> {}", r.step, r.loss, out.display()),
        None => println!("already at step {} -> {}", trainer.step(), out.display()),
    }
    Ok(())
}

pub fn finetune(cfg: &RunConfig, ckpt: &Path, labels: &Path, out: &Path) -> Result<(), Failure> {
    let model = load_encoder(cfg, ckpt)?;
    let data = load_labeled(labels)?;
    let source = FeatureSource::Encoder {
        model: &model,
        t_feat: cfg.feature.t_feat,
    };
    let head = finetune_head(source, &data, &cfg.head, cfg.train.seed)?;
    head.save(out)?;
    println!("head ({} -> {} -> 1) on {} samples -> {}", head.input_dim(), head.hidden(), data.len(), out.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, ckpt: &Path, labels: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let model = load_encoder(cfg, ckpt)?;
    let data = load_labeled(labels)?;
    let folds = folds_for(cfg, &data)?;
    let source = FeatureSource::Encoder {
        model: &model,
        t_feat: cfg.feature.t_feat,
    };
    let report = cross_validate(source, &data, &folds, &cfg.head, cfg.eval.seed)?;
    match out {
        Some(path) => {
            write_file(path, report.to_csv().as_bytes())?;
            print!("{}", report.to_table());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

pub fn ablation(
    cfg: &RunConfig,
    labels: &Path,
    variants: Option<&str>,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let variants = match variants {
        Some(list) => parse_variants(list)?,
        None => AblationVariant::ALL.to_vec(),
    };
    let model = match (ckpt, data) {
        (Some(path), _) => load_encoder(cfg, path)?,
        (None, Some(dir)) => {
            let corpus: Vec<Tensor<f32>> = read_image_dir(dir)?.into_iter().map(|s| s.image).collect();
            let mut trainer = Trainer::new(cfg.model.clone(), cfg.schedule, cfg.optim, cfg.train.clone())?;
            trainer.run(&corpus, cfg.train.steps)?;
            let mut model = trainer.into_checkpoint().model;
            model.freeze();
            model
        }
        (None, None) => return Err(Failure::usage("ablation needs --ckpt or --data")),
    };
    let labeled = load_labeled(labels)?;
    let folds = folds_for(cfg, &labeled)?;
    let setup = AblationSetup {
        pretrained: &model,
        t_feat: cfg.feature.t_feat,
        head: cfg.head,
        scratch_seed: cfg.train.seed,
    };
    let results = run_ablation(&labeled, &folds, cfg.eval.seed, &variants, &setup)?;
    print!("{}", ablation_table(&results));
    if let Some(path) = out {
        let mut csv = String::from("method,pcc,mae\n");
        for (v, r) in &results {
            csv.push_str(&format!("{},{},{}\n", v.name(), r.mean_pcc, r.mean_mae));
        }
        write_file(path, csv.as_bytes())?;
    }
    Ok(())
}

pub fn sample(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(ckpt)?;
    let schedule = ck.schedule.build()?;
    let steps = cfg.sample.steps.unwrap_or(schedule.timesteps());
    if steps > schedule.timesteps() {
        return Err(Failure::config(format!(
            "sample.steps = {steps} exceeds the checkpoint's T = {}",
            schedule.timesteps()
        )));
    }
    let mut rng = DiffusionRng::new(cfg.sample.seed);
    let image = ancestral_sample(&ck.model, &schedule, &mut rng, steps)?;
    write_pgm(out, &image)?;
    println!("{steps} reverse steps -> {}", out.display());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), Failure> {
    let schedule = cfg.schedule.build()?;
    let results = run_suite(&cfg.model, &schedule, cfg.train.seed)?;
    let mut stdout = std::io::stdout().lock();
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            stdout,
            "{status:4} {:28} n={:<6} max_err={:.3e} rel_err={:.3e}",
            r.name, r.elements, r.max_error, r.relative_error
        )
        .map_err(|e| Failure::io(Path::new("<stdout>"), e))?;
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            kind: "gradcheck".into(),
            message: format!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", ")),
        })
    }
}
