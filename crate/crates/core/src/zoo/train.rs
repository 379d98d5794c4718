//! Mini-batch SGD with momentum, optionally with FGSM examples in the batch.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{self, Objective, Params, Scope};
use super::ZooModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} = {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::InvalidConfig("momentum must be below 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig { seed, ..self.clone() }
    }
}

/// What the network is fit to.
pub enum Supervision {
    Hard(Vec<usize>),
    /// Teacher probabilities at `temperature` plus hard labels for the CE term.
    Soft {
        probs_t: Array2<f64>,
        labels: Vec<usize>,
        alpha: f64,
        temperature: f64,
    },
}

impl Supervision {
    fn labels(&self) -> &[usize] {
        match self {
            Supervision::Hard(l) => l,
            Supervision::Soft { labels, .. } => labels,
        }
    }

    fn batch(&self, idx: &[usize]) -> (Vec<usize>, Option<Array2<f64>>) {
        let labels = idx.iter().map(|&i| self.labels()[i]).collect();
        let soft = match self {
            Supervision::Hard(_) => None,
            Supervision::Soft { probs_t, .. } => Some(net::rows(probs_t, idx)),
        };
        (labels, soft)
    }

    fn objective<'a>(&self, labels: &'a [usize], soft: Option<&'a Array2<f64>>) -> Objective<'a> {
        match (self, soft) {
            (
                Supervision::Soft {
                    alpha, temperature, ..
                },
                Some(s),
            ) => Objective::Kd {
                soft: s.view(),
                labels,
                alpha: *alpha,
                temperature: *temperature,
            },
            _ => Objective::Ce { labels },
        }
    }
}

/// FGSM examples in the training batch (crafted against the hard labels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Adversary {
    None,
    /// Loss is the mean of the clean and the adversarial loss.
    Mixed { epsilon: f64 },
    /// Loss on adversarial examples only.
    Only { epsilon: f64 },
}

pub struct FitOptions {
    pub scope: Scope,
    pub adversary: Adversary,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            scope: Scope::All,
            adversary: Adversary::None,
        }
    }
}

fn batch_grad(
    model: &ZooModel,
    xb: ArrayView2<f64>,
    objective: &Objective<'_>,
    labels: &[usize],
    opts: &FitOptions,
) -> (f64, Params) {
    let (arch, params) = (&model.arch, &model.params);
    let adv_batch = |eps: f64| {
        let (_, gx) = net::input_gradient(arch, params, xb, &Objective::Ce { labels });
        net::fgsm(xb, &gx, eps)
    };
    match opts.adversary {
        Adversary::None => net::loss_and_grad(arch, params, xb, objective, opts.scope),
        Adversary::Only { epsilon } => {
            let xa = adv_batch(epsilon);
            net::loss_and_grad(arch, params, xa.view(), objective, opts.scope)
        }
        Adversary::Mixed { epsilon } => {
            let xa = adv_batch(epsilon);
            let (lc, mut gc) = net::loss_and_grad(arch, params, xb, objective, opts.scope);
            let (la, ga) = net::loss_and_grad(arch, params, xa.view(), objective, opts.scope);
            for (c, a) in gc.dense_mut().zip(ga.dense()) {
                c.w.zip_mut_with(&a.w, |c, &a| *c = 0.5 * (*c + a));
                c.b.zip_mut_with(&a.b, |c, &a| *c = 0.5 * (*c + a));
            }
            (0.5 * (lc + la), gc)
        }
    }
}

/// Train `model` in place; returns the mean training loss of every epoch.
pub fn fit(
    model: &mut ZooModel,
    x: &Array2<f64>,
    supervision: &Supervision,
    config: &TrainConfig,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    config.validate()?;
    let n = x.nrows();
    if n == 0 || supervision.labels().len() != n {
        return Err(Error::InvalidConfig(format!(
            "{} inputs but {} labels",
            n,
            supervision.labels().len()
        )));
    }
    if let Some(&bad) = supervision.labels().iter().find(|&&l| l >= model.arch.classes) {
        return Err(Error::InvalidConfig(format!("label {bad} for a {}-way head", model.arch.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = model.params.zeros_like();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let head = model.params.layers.len() - 1 + usize::from(model.params.stem.is_some());
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xb = net::rows(x, chunk);
            let (labels, soft) = supervision.batch(chunk);
            let objective = supervision.objective(&labels, soft.as_ref());
            let (loss, mut grad) = batch_grad(model, xb.view(), &objective, &labels, opts);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss * chunk.len() as f64;
            if config.weight_decay > 0.0 {
                for (g, p) in grad.dense_mut().zip(model.params.dense()) {
                    g.w.scaled_add(config.weight_decay, &p.w);
                }
            }
            for (k, ((v, g), p)) in velocity
                .dense_mut()
                .zip(grad.dense())
                .zip(model.params.dense_mut())
                .enumerate()
            {
                if opts.scope == Scope::Last && k != head {
                    continue;
                }
                v.w.zip_mut_with(&g.w, |v, &g| *v = config.momentum * *v + g);
                v.b.zip_mut_with(&g.b, |v, &g| *v = config.momentum * *v + g);
                p.w.scaled_add(-config.learning_rate, &v.w);
                p.b.scaled_add(-config.learning_rate, &v.b);
            }
            model.reapply_pruning();
        }
        let mean = total / n as f64;
        if !mean.is_finite() || !model.params.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok(history)
}

/// Mean cross-entropy of `model` on `(x, labels)`.
pub fn mean_loss(model: &ZooModel, x: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for start in (0..x.nrows()).step_by(256) {
        let end = (start + 256).min(x.nrows());
        let z = net::logits(&model.arch, &model.params, net::row_range(x, start, end));
        let (l, _) = net::loss_and_dlogits(&z, &Objective::Ce { labels: &labels[start..end] });
        total += l * (end - start) as f64;
    }
    total / x.nrows() as f64
}

