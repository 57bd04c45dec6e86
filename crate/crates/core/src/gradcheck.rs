//! Finite-difference checks of every operator, every transformer parameter
//! group and the regression head, all in `f64`.

use crate::autodiff::{grad_check_report, GradCheckReport, Graph, Var};
use crate::diffusion::{denoise_loss_with_noise, gaussian_like, NoiseSchedule};
use crate::dit::{param_group, DiTConfig, DiTModel};
use crate::downstream::RegressionHead;
use crate::error::Result;
use crate::rng::DiffusionRng;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub elements: usize,
    /// `max_i |a_i − n_i| / max(1, |a_i|)`.
    pub max_error: f64,
    /// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`.
    pub relative_error: f64,
}

impl CheckResult {
    fn from_report(name: impl Into<String>, r: &GradCheckReport) -> Self {
        CheckResult {
            name: name.into(),
            elements: r.analytic.len(),
            max_error: r.max_error(),
            relative_error: r.relative_error(),
        }
    }

    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE && self.relative_error < TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut DiffusionRng) -> Tensor<f64> {
    gaussian_like(rng, shape)
}

/// `Σ w ⊙ v` with fixed random `w`, so every output element matters.
fn project(g: &mut Graph<f64>, v: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = DiffusionRng::new(rng_seed);
    let w = g.constant(random(g.shape(v), &mut rng));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<usize>, fn(&mut Graph<f64>, Var, &[Tensor<f64>]) -> Result<Var>);

/// One case per graph operator.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = DiffusionRng::derive(seed, 0x4f50);
    let aux: Vec<Tensor<f64>> = vec![
        random(&[3, 4], &mut rng),
        random(&[4, 2], &mut rng),
        random(&[4], &mut rng),
        random(&[5, 4], &mut rng),
    ];
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![3, 4], |g, x, a| {
            let b = g.constant(a[1].clone());
            g.matmul(x, b)
        }),
        ("matmul_nt", vec![3, 4], |g, x, a| {
            let b = g.constant(a[3].clone());
            g.matmul_nt(x, b)
        }),
        ("add", vec![3, 4], |g, x, a| {
            let b = g.constant(a[0].clone());
            g.add(x, b)
        }),
        ("sub", vec![3, 4], |g, x, a| {
            let b = g.constant(a[0].clone());
            g.sub(b, x)
        }),
        ("mul", vec![3, 4], |g, x, _| g.mul(x, x)),
        ("add_row", vec![4], |g, x, a| {
            let m = g.constant(a[0].clone());
            g.add_row(m, x)
        }),
        ("mul_row", vec![4], |g, x, a| {
            let m = g.constant(a[0].clone());
            g.mul_row(m, x)
        }),
        ("scale", vec![3, 4], |g, x, _| Ok(g.scale(x, -1.7))),
        ("add_scalar", vec![3, 4], |g, x, _| {
            let y = g.add_scalar(x, 0.3);
            g.mul(y, y)
        }),
        ("sum", vec![3, 4], |g, x, _| {
            let s = g.sum(x);
            g.mul(s, s)
        }),
        ("mean", vec![3, 4], |g, x, _| {
            let s = g.mean(x);
            g.mul(s, s)
        }),
        ("mean_rows", vec![3, 4], |g, x, _| g.mean_rows(x)),
        ("layer_norm", vec![3, 4], |g, x, _| Ok(g.layer_norm(x, 1e-6))),
        ("softmax", vec![3, 4], |g, x, _| Ok(g.softmax(x))),
        ("gelu", vec![3, 4], |g, x, _| Ok(g.gelu(x))),
        ("relu", vec![3, 4], |g, x, _| Ok(g.relu(x))),
        ("slice_cols", vec![3, 4], |g, x, _| g.slice_cols(x, 1, 2)),
        ("concat_cols", vec![3, 4], |g, x, a| {
            let b = g.constant(a[0].clone());
            g.concat_cols(&[x, b, x])
        }),
        ("slice_rows", vec![3, 4], |g, x, _| g.slice_rows(x, 1, 2)),
        ("concat_rows", vec![3, 4], |g, x, a| {
            let b = g.constant(a[3].clone());
            g.concat_rows(&[b, x, x])
        }),
        ("gather", vec![3, 4], |g, x, _| g.gather(x, vec![11, 0, 5, 5, 2, 7], &[2, 3])),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, op))| {
            let mut x = random(&shape, &mut rng);
            if name == "relu" {
                // keep inputs away from the kink
                x.data_mut().iter_mut().for_each(|v| *v += 0.1f64.copysign(*v));
            }
            let aux = &aux;
            let r = grad_check_report(
                |g, v| {
                    let y = op(g, v, aux)?;
                    project(g, y, 1000 + i as u64)
                },
                &x,
                STEP,
            )?;
            Ok(CheckResult::from_report(format!("op/{name}"), &r))
        })
        .collect()
}

fn merge(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    let mut out = GradCheckReport {
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    for r in reports {
        out.analytic.extend(r.analytic);
        out.numeric.extend(r.numeric);
    }
    out
}

/// Denoising loss through the whole transformer, one result per parameter
/// group. Every weight is first moved off its initial value (std
/// `perturb`) so the zero-initialized layers carry gradient too.
pub fn check_dit(config: &DiTConfig, schedule: &NoiseSchedule, perturb: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut model = DiTModel::<f64>::new(config.clone(), seed)?;
    let mut rng = DiffusionRng::derive(seed, 0x4454);
    for t in model.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += perturb * rng.normal());
    }
    model.freeze();
    let x0 = random(&config.image_shape(), &mut rng);
    let eps = random(&config.image_shape(), &mut rng);
    let t = (schedule.timesteps() / 2).max(1);

    let mut groups: Vec<(&'static str, Vec<GradCheckReport>)> = Vec::new();
    for id in model.params().ids() {
        let group = param_group(model.params().name(id));
        let value = model.params().get(id).clone();
        let model = &model;
        let r = grad_check_report(
            |g, v| {
                let b = model.params().bind(g).with(id, v);
                denoise_loss_with_noise(g, model, &b, &x0, t, &eps, schedule)
            },
            &value,
            STEP,
        )?;
        match groups.iter_mut().find(|(n, _)| *n == group) {
            Some((_, list)) => list.push(r),
            None => groups.push((group, vec![r])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(name, rs)| CheckResult::from_report(format!("dit/{name}"), &merge(rs)))
        .collect())
}

/// MSE of the regression head against random targets, per parameter.
pub fn check_head(input_dim: usize, hidden: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = DiffusionRng::derive(seed, 0x4844);
    let n = 6;
    let features = random(&[n, input_dim], &mut rng);
    let mut head = RegressionHead::<f64>::new(input_dim, hidden, 3.0, seed)?;
    head.fit_standardization(&features)?;
    for t in head.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
    }
    let targets = Tensor::new([n, 1], (0..n).map(|_| rng.uniform_range(1.0, 5.0)).collect())?;
    let head = &head;
    head.params()
        .ids()
        .map(|id| {
            let value = head.params().get(id).clone();
            let r = grad_check_report(
                |g, v| {
                    let b = head.params().bind(g).with(id, v);
                    let y = head.forward(g, &b, &features)?;
                    let target = g.constant(targets.clone());
                    let d = g.sub(y, target)?;
                    let sq = g.mul(d, d)?;
                    Ok(g.mean(sq))
                },
                &value,
                STEP,
            )?;
            Ok(CheckResult::from_report(format!("head/{}", head.params().name(id)), &r))
        })
        .collect()
}

/// Operators, the transformer described by `config`, and a head sized for
/// its features.
pub fn run_suite(config: &DiTConfig, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = check_ops(seed)?;
    out.extend(check_dit(config, schedule, 0.2, seed)?);
    out.extend(check_head(config.hidden_dim, config.hidden_dim.div_ceil(2), seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::dit::Pooling;

    #[test]
    fn every_op_passes() {
        for r in check_ops(0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn tiny_transformer_and_head_pass() {
        let cfg = DiTConfig {
            image_h: 4,
            image_w: 4,
            patch_size: 2,
            hidden_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            timesteps: 100,
            feature_pooling: Pooling::ClsToken,
            ..DiTConfig::default()
        };
        let sched = ScheduleConfig::desk().build().unwrap();
        let results = check_dit(&cfg, &sched, 0.2, 1).unwrap();
        let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
        for g in ["embed", "pos", "cls", "timestep-mlp", "adaln-modulation", "attention", "ffn", "final-projection"] {
            assert!(names.contains(&format!("dit/{g}").as_str()), "{names:?}");
        }
        for r in results.iter().chain(&check_head(5, 3, 2).unwrap()) {
            assert!(r.passed(), "{r:?}");
            assert!(r.elements > 0);
        }
    }
}
