//! Source/irrelevant training and the stealing attacks.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{self, Arch, Scope};
use super::train::{fit, Adversary, FitOptions, Supervision, TrainConfig};
use super::{derive_seed, Lineage, ZooDataset, ZooModel};
use crate::error::{Error, Result};
use crate::probekit::RawImage;

/// Train a fresh network on labeled data.
pub fn train(data: &ZooDataset, arch: Arch, lineage: Lineage, config: &TrainConfig) -> Result<ZooModel> {
    if arch.classes != data.classes {
        return Err(Error::InvalidConfig(format!(
            "{}-way architecture for {} classes",
            arch.classes, data.classes
        )));
    }
    let mut model = ZooModel::init(arch, lineage, config.seed)?;
    let x = model.inputs(&data.image_refs())?;
    fit(&mut model, &x, &Supervision::Hard(data.labels.clone()), config, &FitOptions::default())?;
    Ok(model)
}

/// Continue training on the attacker's labeled data.
pub fn finetune(model: &ZooModel, data: &ZooDataset, scope: Scope, config: &TrainConfig) -> Result<ZooModel> {
    let lineage = match scope {
        Scope::All => Lineage::FinetuneAll,
        Scope::Last => Lineage::FinetuneLast,
    };
    let mut out = model.derive(lineage, config.seed);
    let x = out.inputs(&data.image_refs())?;
    let opts = FitOptions {
        scope,
        adversary: Adversary::None,
    };
    fit(&mut out, &x, &Supervision::Hard(data.labels.clone()), config, &opts)?;
    Ok(out)
}

/// Activation-based pruning of the last hidden layer: the `floor(p * width)`
/// units with the smallest mean absolute activation on `holdout` lose their
/// incoming weights, bias and outgoing weights. Ties break by unit index.
pub fn prune(model: &ZooModel, holdout: &[RawImage], p: f64) -> Result<ZooModel> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidFraction(p));
    }
    if model.arch.hidden.is_empty() {
        return Err(Error::InvalidConfig("model has no hidden layer to prune".into()));
    }
    let refs: Vec<&RawImage> = holdout.iter().collect();
    let act = model.embeddings(&refs)?;
    let width = act.ncols();
    let mean: Vec<f64> = (0..width)
        .map(|j| act.column(j).iter().map(|v| v.abs()).sum::<f64>() / act.nrows().max(1) as f64)
        .collect();
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| mean[a].total_cmp(&mean[b]).then(a.cmp(&b)));
    let count = (p * width as f64).floor() as usize;
    let mut out = model.derive(Lineage::Pruned { p }, model.train_seed);
    let mut pruned: Vec<usize> = out.pruned.iter().copied().chain(order[..count].iter().copied()).collect();
    pruned.sort_unstable();
    pruned.dedup();
    out.pruned = pruned;
    out.reapply_pruning();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ExtractMode {
    /// Cross-entropy on the source's argmax labels.
    Label,
    /// `alpha * KD(T) + (1 - alpha) * CE` on the source's probabilities.
    Prob { alpha: f64, temperature: f64 },
    /// Label extraction followed by `epochs` of FGSM fine-tuning against the
    /// source labels at `learning_rate`.
    Adv { epsilon: f64, epochs: usize, learning_rate: f64 },
}

/// Train a student from the source's answers on unlabeled attacker images.
pub fn extract(
    source: &ZooModel,
    attacker_images: &[RawImage],
    mode: ExtractMode,
    student_arch: Arch,
    config: &TrainConfig,
) -> Result<ZooModel> {
    if student_arch.classes != source.arch.classes {
        return Err(Error::InvalidConfig("student and source label spaces differ".into()));
    }
    let refs: Vec<&RawImage> = attacker_images.iter().collect();
    let xs = source.inputs(&refs)?;
    let source_logits = source.logits_x(&xs);
    let labels = super::argmax_rows(&source_logits);
    let lineage = match mode {
        ExtractMode::Label => Lineage::ExtractLabel,
        ExtractMode::Prob { alpha, temperature } => Lineage::ExtractProb { alpha, temperature },
        ExtractMode::Adv { epsilon, .. } => Lineage::ExtractAdv { epsilon },
    };
    let mut student = ZooModel::init(student_arch, lineage, config.seed)?;
    student.parent = Some(source.digest());
    let x = student.inputs(&refs)?;
    let supervision = match mode {
        ExtractMode::Prob { alpha, temperature } => {
            check_kd(alpha, temperature)?;
            Supervision::Soft {
                probs_t: net::softmax_t(&source_logits, temperature),
                labels: labels.clone(),
                alpha,
                temperature,
            }
        }
        _ => Supervision::Hard(labels.clone()),
    };
    fit(&mut student, &x, &supervision, config, &FitOptions::default())?;
    if let ExtractMode::Adv {
        epsilon,
        epochs,
        learning_rate,
    } = mode
    {
        check_epsilon(epsilon)?;
        let cfg = TrainConfig {
            epochs,
            learning_rate,
            seed: derive_seed(config.seed, "adv"),
            ..config.clone()
        };
        let opts = FitOptions {
            scope: Scope::All,
            adversary: Adversary::Only { epsilon },
        };
        fit(&mut student, &x, &Supervision::Hard(labels), &cfg, &opts)?;
    }
    Ok(student)
}

fn check_kd(alpha: f64, temperature: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!("KD alpha {alpha} / temperature {temperature}")));
    }
    Ok(())
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon {eps}")));
    }
    Ok(())
}

/// Fine-tune on an even mix of clean and FGSM examples against the true labels.
pub fn adv_train(model: &ZooModel, data: &ZooDataset, epsilon: f64, config: &TrainConfig) -> Result<ZooModel> {
    check_epsilon(epsilon)?;
    let mut out = model.derive(Lineage::AdvTrained { epsilon }, config.seed);
    let x = out.inputs(&data.image_refs())?;
    let opts = FitOptions {
        scope: Scope::All,
        adversary: Adversary::Mixed { epsilon },
    };
    fit(&mut out, &x, &Supervision::Hard(data.labels.clone()), config, &opts)?;
    Ok(out)
}

/// White-box distillation: the student fits the teacher's temperature-scaled
/// probabilities (and its argmax labels) on `data`.
pub fn distill(
    teacher: &ZooModel,
    student_arch: Arch,
    data: &ZooDataset,
    alpha: f64,
    temperature: f64,
    config: &TrainConfig,
) -> Result<ZooModel> {
    check_kd(alpha, temperature)?;
    let refs = data.image_refs();
    let teacher_logits = teacher.logits(&refs)?;
    let mut student = ZooModel::init(student_arch, Lineage::Distilled, config.seed)?;
    student.parent = Some(teacher.digest());
    let x = student.inputs(&refs)?;
    let supervision = Supervision::Soft {
        probs_t: net::softmax_t(&teacher_logits, temperature),
        labels: super::argmax_rows(&teacher_logits),
        alpha,
        temperature,
    };
    fit(&mut student, &x, &supervision, config, &FitOptions::default())?;
    Ok(student)
}

/// Swap in a fresh head for the label space of `data` (original labels mapped
/// through `label_map`) and fine-tune per `scope`.
pub fn transfer(
    model: &ZooModel,
    data: &ZooDataset,
    label_map: &[usize],
    scope: Scope,
    config: &TrainConfig,
) -> Result<ZooModel> {
    let relabeled = data.relabel(label_map)?;
    let mut out = model.derive(
        Lineage::Transferred {
            label_map: label_map.to_vec(),
        },
        config.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "head"));
    net::replace_head(&mut out.arch, &mut out.params, relabeled.classes, &mut rng);
    out.reapply_pruning();
    let x: Array2<f64> = out.inputs(&relabeled.image_refs())?;
    let opts = FitOptions {
        scope,
        adversary: Adversary::None,
    };
    fit(&mut out, &x, &Supervision::Hard(relabeled.labels), config, &opts)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::dataset::{gen_synthetic, SyntheticSpec, ZooSplits};
    use crate::zoo::net::PatchStem;

    fn small_data() -> ZooSplits {
        gen_synthetic(&SyntheticSpec {
            seed: 5,
            classes: 4,
            per_class: 40,
            test_per_class: 10,
            size: 8,
            max_frequency: 2,
            max_shift: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn small_arch(classes: usize) -> Arch {
        Arch {
            width: 8,
            height: 8,
            channels: 3,
            stem: None,
            hidden: vec![16, 8],
            classes,
        }
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = small_data();
        let a = train(&d.defender, small_arch(4), Lineage::Source, &cfg(1)).unwrap();
        let b = train(&d.defender, small_arch(4), Lineage::Source, &cfg(1)).unwrap();
        assert_eq!(a.params, b.params);
        let c = train(&d.defender, small_arch(4), Lineage::Source, &cfg(2)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let d = small_data();
        let src = train(&d.defender, small_arch(4), Lineage::Source, &cfg(1)).unwrap();
        let still = TrainConfig {
            learning_rate: 0.0,
            ..cfg(3)
        };
        let out = finetune(&src, &d.attacker, Scope::All, &still).unwrap();
        assert_eq!(out.params, src.params);
        assert_eq!(out.parent, Some(src.digest()));
    }

    #[test]
    fn adv_train_without_budget_matches_finetune() {
        let d = small_data();
        let src = train(&d.defender, small_arch(4), Lineage::Source, &cfg(1)).unwrap();
        let adv = adv_train(&src, &d.attacker, 0.0, &cfg(4)).unwrap();
        let ft = finetune(&src, &d.attacker, Scope::All, &cfg(4)).unwrap();
        assert_eq!(adv.params, ft.params);
    }

    #[test]
    fn loss_drops_after_first_epoch() {
        let d = small_data();
        let mut m = ZooModel::init(small_arch(4), Lineage::Source, 7).unwrap();
        let x = m.inputs(&d.defender.image_refs()).unwrap();
        let before = super::super::train::mean_loss(&m, &x, &d.defender.labels);
        let one = TrainConfig { epochs: 1, ..cfg(7) };
        fit(&mut m, &x, &Supervision::Hard(d.defender.labels.clone()), &one, &FitOptions::default()).unwrap();
        assert!(super::super::train::mean_loss(&m, &x, &d.defender.labels) < before);
    }

    #[test]
    fn last_layer_finetune_freezes_the_body() {
        let d = small_data();
        let src = train(&d.defender, small_arch(4), Lineage::Source, &cfg(1)).unwrap();
        let out = finetune(&src, &d.attacker, Scope::Last, &cfg(2)).unwrap();
        let n = src.params.layers.len();
        assert_eq!(out.params.layers[..n - 1], src.params.layers[..n - 1]);
        assert_ne!(out.params.head(), src.params.head());
    }

    #[test]
    fn prune_counts_and_idempotence() {
        let d = small_data();
        let src = train(&d.defender, small_arch(4), Lineage::Source, &cfg(1)).unwrap();
        let once = prune(&src, &d.defender.images, 0.25).unwrap();
        assert_eq!(once.pruned.len(), 2);
        // dead units rank lowest, so a second pass selects them again
        let twice = prune(&once, &d.defender.images, 0.25).unwrap();
        assert_eq!(twice.pruned, once.pruned);
        assert_eq!(twice.params, once.params);
        // floor(0.1 * 8) = 0 units
        let none = prune(&src, &d.defender.images, 0.1).unwrap();
        assert!(none.pruned.is_empty());
        assert_eq!(none.params, src.params);
        assert!(matches!(prune(&src, &d.defender.images, 1.0), Err(Error::InvalidFraction(_))));
        let tuned = finetune(&once, &d.attacker, Scope::All, &cfg(2)).unwrap();
        for row in tuned.embeddings(&d.test.image_refs()).unwrap().rows() {
            for &u in &once.pruned {
                assert_eq!(row[u], 0.0);
            }
        }
    }

    #[test]
    fn transfer_changes_the_head_only() {
        let d = small_data();
        let src = train(&d.defender, small_arch(4), Lineage::Source, &cfg(1)).unwrap();
        let out = transfer(&src, &d.attacker, &[0, 1, 0, 1], Scope::Last, &cfg(2)).unwrap();
        assert_eq!(out.arch.classes, 2);
        assert_eq!(out.params.head().w.dim(), (8, 2));
        assert_eq!(out.logits(&d.test.image_refs()).unwrap().ncols(), 2);
        assert!(transfer(&src, &d.attacker, &[0, 1], Scope::Last, &cfg(2)).is_err());
    }

    #[test]
    fn extraction_modes_produce_students() {
        let d = small_data();
        let src = train(&d.defender, small_arch(4), Lineage::Source, &cfg(1)).unwrap();
        let conv = Arch {
            stem: Some(PatchStem { size: 4, channels: 4 }),
            ..small_arch(4)
        };
        let modes = [
            ExtractMode::Label,
            ExtractMode::Prob {
                alpha: 0.9,
                temperature: 20.0,
            },
            ExtractMode::Adv {
                epsilon: 8.0 / 255.0,
                epochs: 1,
                learning_rate: 0.01,
            },
        ];
        for mode in modes {
            let s = extract(&src, &d.attacker.images, mode, conv.clone(), &cfg(9)).unwrap();
            assert_eq!(s.parent, Some(src.digest()));
            assert!(s.lineage.is_stolen());
            assert!(s.params.is_finite());
        }
        let bad = ExtractMode::Prob {
            alpha: 1.5,
            temperature: 20.0,
        };
        assert!(extract(&src, &d.attacker.images, bad, small_arch(4), &cfg(9)).is_err());
        assert!(extract(&src, &d.attacker.images, ExtractMode::Label, small_arch(3), &cfg(9)).is_err());
    }
}
