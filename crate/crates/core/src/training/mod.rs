//! Desk-scale training: Adam with linearly decaying step size, the
//! two-branch network and seeded synthetic scenes.

pub mod net;
pub mod scene;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::kitti::GroundTruth;
use crate::metrics::{evaluate, evaluate_in_bev, MetricsReport, ScoredMask};
use crate::tensor::{FocalSpec, Graph, ParamStore, Tensor};
use crate::warp::warp_plane;

pub use net::{FusionMode, MicroBiFNet, NetConfig, Sample};
pub use scene::{generate_scene, Corruption, SceneConfig, SyntheticScene};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr: f64,
    /// Adam first-moment coefficient.
    pub momentum: f64,
    /// L2 weight decay added to the gradient.
    pub weight_decay: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 30_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
            || self.iterations == 0
        {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    /// `lr * (1 - iteration / iterations)` for a zero-based iteration.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        self.lr * (1.0 - iteration as f64 / self.iterations as f64)
    }
}

pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments per parameter, in store order.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: i32,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update at zero-based `iteration`. `grads` holds
    /// one named gradient per stored parameter, in any order.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[(String, Tensor)],
        cfg: &TrainConfig,
        iteration: usize,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let b1 = cfg.momentum;
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
        let lr = cfg.learning_rate(iteration);
        let by_name: HashMap<&str, &Tensor> = grads.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (k, (name, theta)) in params.iter_mut().enumerate() {
            let grad = by_name
                .get(name)
                .filter(|g| g.dims() == theta.dims())
                .ok_or_else(|| Error::Shape(format!("no matching gradient for `{name}`")))?;
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, th) in theta.data_mut().iter_mut().enumerate() {
                let gi = grad.data()[i] + cfg.weight_decay * *th;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                *th -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss_img: f64,
    pub loss_bev: f64,
    pub total: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iteration,loss_img,loss_bev,total\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.iteration, r.loss_img, r.loss_bev, r.total));
    }
    s
}

/// Forward and backward on one sample: `(log row, gradients)`.
pub fn loss_and_grads(
    net: &MicroBiFNet,
    sample: &Sample,
    loss: &LossConfig,
    iteration: usize,
) -> Result<(LogRow, Vec<(String, Tensor)>)> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, sample)?;
    let spec = FocalSpec {
        alpha: loss.alpha,
        gamma: loss.gamma,
    };
    let li = g.focal_loss(out.img, sample.img_target.clone(), sample.img_mask.clone(), spec)?;
    let li_w = g.scale(li, loss.beta)?;
    let (total, lb) = match out.bev {
        Some(b) => {
            let lb = g.focal_loss(b, sample.bev_target.clone(), sample.bev_mask.clone(), spec)?;
            (g.add(li_w, lb)?, Some(lb))
        }
        None => (li_w, None),
    };
    let row = LogRow {
        iteration,
        loss_img: g.value(li).data()[0],
        loss_bev: lb.map_or(0.0, |v| g.value(v).data()[0]),
        total: g.value(total).data()[0],
    };
    let grads = g.backward(total)?.params(&g);
    Ok((row, grads))
}

/// Trains `net` in place for `cfg.iterations` single-sample steps, visiting
/// the samples in a fresh seeded order each epoch. `progress` sees every
/// log row as it is produced.
pub fn train_toy(
    samples: &[Sample],
    net: &mut MicroBiFNet,
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut progress: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    loss.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it % samples.len() == 0 {
            order.shuffle(&mut rng);
        }
        let sample = &samples[order[it % samples.len()]];
        let (row, grads) = loss_and_grads(net, sample, loss, it).map_err(|e| match e {
            Error::NonFinite(detail) => Error::Diverged { iteration: it, detail },
            other => other,
        })?;
        if !row.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss {}", row.total),
            });
        }
        adam.step(&mut net.params, &grads, cfg, it)?;
        if net.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: "non-finite parameter after update".into(),
            });
        }
        progress(&row);
        log.push(row);
    }
    Ok(log)
}

/// BEV-space metrics of the image-branch output under the benchmark
/// protocol: scores and the sample's image ground truth are both carried
/// into BEV through the full-resolution camera-to-BEV table.
pub fn evaluate_sample(net: &MicroBiFNet, sample: &Sample) -> Result<MetricsReport> {
    let (img, _) = net.predict(sample)?;
    let gt = GroundTruth {
        width: sample.image.width(),
        height: sample.image.height(),
        road: sample.img_target.iter().map(|&t| t > 0.5).collect(),
        valid: sample.img_mask.to_vec(),
    };
    evaluate_in_bev(&img, &gt, &sample.to_bev)
}

/// Like [`evaluate_sample`], but scored against the sample's own BEV labels
/// on every reached cell.
pub fn evaluate_sample_exact(net: &MicroBiFNet, sample: &Sample) -> Result<MetricsReport> {
    let (img, _) = net.predict(sample)?;
    let scores = warp_plane(&sample.to_bev, &img, 0.0)?;
    let gt = sample.bev_target.iter().map(|&t| t > 0.5).collect();
    let valid = sample
        .to_bev
        .valid
        .iter()
        .zip(sample.bev_mask.iter())
        .map(|(&a, &b)| a && b)
        .collect();
    evaluate(&ScoredMask::new(scores, gt, valid)?)
}

/// Same-seeded scenes as samples, in seed order.
pub fn scene_samples(
    cfg: &SceneConfig,
    seeds: impl IntoIterator<Item = (u64, Corruption)>,
) -> Result<Vec<Sample>> {
    let geom = crate::dst::GeometryConfig {
        bev: cfg.bev,
        ..Default::default()
    };
    seeds
        .into_iter()
        .map(|(seed, c)| {
            let s = generate_scene(cfg, seed, c)?;
            Sample::new(&s.frame, Some(&s.bev_gt), &geom)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_decay() {
        let cfg = TrainConfig {
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate(0), 0.01);
        assert!((cfg.learning_rate(99) - 0.01 / 100.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full([1, 1, 1, 3], 0.7));
        let before = p.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            iterations: 10,
            ..TrainConfig::default()
        };
        let grads = vec![("w".to_string(), Tensor::zeros([1, 1, 1, 3]))];
        let mut adam = Adam::new();
        adam.step(&mut p, &grads, &cfg, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_by_hand() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.0));
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
            iterations: 4,
            seed: 0,
        };
        let mut adam = Adam::new();
        adam.step(&mut p, &[("w".into(), Tensor::scalar(2.0))], &cfg, 1).unwrap();
        // g = 2 + 0.5 * 1 = 2.5; m_hat = 2.5, v_hat = 6.25; lr = 0.1 * 0.75
        let expected = 1.0 - 0.075 * 2.5 / (2.5 + ADAM_EPS);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.0));
        let mut adam = Adam::new();
        let cfg = TrainConfig::default();
        assert!(adam.step(&mut p, &[("v".into(), Tensor::scalar(1.0))], &cfg, 0).is_err());
        assert!(adam.step(&mut p, &[], &cfg, 0).is_err());
    }

    #[test]
    fn short_runs_are_deterministic() {
        let samples = scene_samples(&SceneConfig::toy(), [(1, Corruption::None), (2, Corruption::None)]).unwrap();
        let cfg = TrainConfig {
            iterations: 3,
            lr: 0.005,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = MicroBiFNet::new(NetConfig::default(), 4).unwrap();
            let log = train_toy(&samples, &mut net, &cfg, &LossConfig::default(), |_| {}).unwrap();
            (log_csv(&log), net.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.lines().count(), 4);
    }
}
