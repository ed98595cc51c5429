//! Splits, contrastive pretraining, supervised finetuning and evaluation.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{grid_fraction, TrainConfig};
use crate::dataset::{Crop, InsertionRef};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, MetricsReport};
use crate::model::{stack_batch, EncoderConfig, HeadConfig, ModalityMode, TissueModel};
use crate::nn::{Adam, Exec, Module};
use crate::objectives::{cross_entropy_with_grad, softmax, ContrastiveConfig};
use crate::seed;
use crate::tissue::{TissueClass, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    /// Insertion-level disjointness of the three partitions.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<&String> = self.train.iter().collect();
        let val: BTreeSet<&String> = self.val.iter().collect();
        for id in &self.test {
            if train.contains(id) || val.contains(id) {
                return Err(Error::Leakage(format!("fold {}: test insertion {id} also in train/val", self.index)));
            }
        }
        if let Some(id) = train.intersection(&val).next() {
            return Err(Error::Leakage(format!("fold {}: insertion {id} in both train and val", self.index)));
        }
        Ok(())
    }

    /// Every crop used for fitting or model selection must come from the
    /// train or validation insertions.
    pub fn check_leakage<'a>(&self, used: impl IntoIterator<Item = &'a Crop>) -> Result<()> {
        self.check_disjoint()?;
        let test: BTreeSet<&str> = self.test.iter().map(String::as_str).collect();
        for c in used {
            if test.contains(c.insertion_id.as_str()) {
                return Err(Error::Leakage(format!(
                    "fold {}: crop {} from test insertion {} reached training",
                    self.index, c.id, c.insertion_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Held-out count per partition: a tenth of the class, at least one.
pub fn holdout_count(n: usize) -> usize {
    ((n as f64 * 0.1).round() as usize).max(1)
}

/// Stratified 80:10:10 insertion splits.
///
/// Each meat class is shuffled once; fold `f` takes the test block starting at
/// `f * n_test` (cyclically), the validation block right after it, and the
/// remainder for training. Test sets are disjoint across folds whenever the
/// class has at least `n_folds * n_test` insertions.
pub fn make_splits(insertions: &[InsertionRef], n_folds: usize, seed: u64) -> Result<SplitPlan> {
    if n_folds == 0 {
        return Err(Error::InvalidConfig("need at least one fold".into()));
    }
    let mut by_class: BTreeMap<TissueClass, Vec<&str>> = BTreeMap::new();
    for ins in insertions {
        by_class.entry(ins.meat_class).or_default().push(&ins.id);
    }
    if by_class.is_empty() {
        return Err(Error::InsufficientData("no insertions to split".into()));
    }
    let mut folds: Vec<Fold> = (0..n_folds)
        .map(|index| Fold {
            index,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for (class, mut ids) in by_class {
        let n = ids.len();
        let h = holdout_count(n);
        if n < n_folds || n < 2 * h + 1 {
            return Err(Error::InsufficientData(format!(
                "{class}: {n} insertions cannot form {n_folds} stratified folds"
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut seed::derived_rng(seed, "split", class.index() as u64));
        for fold in &mut folds {
            let start = fold.index * h;
            let at = |j: usize| ids[(start + j) % n].to_string();
            fold.test.extend((0..h).map(at));
            fold.val.extend((h..2 * h).map(at));
            fold.train.extend((2 * h..n).map(at));
        }
    }
    for fold in &mut folds {
        fold.train.sort();
        fold.val.sort();
        fold.test.sort();
        fold.check_disjoint()?;
    }
    Ok(SplitPlan { seed, folds })
}

/// Crops whose insertion is in `ids`, in input order.
pub fn crops_of<'a>(crops: &'a [Crop], ids: &[String]) -> Vec<&'a Crop> {
    let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    crops.iter().filter(|c| set.contains(c.insertion_id.as_str())).collect()
}

pub fn labeled<'a>(crops: &[&'a Crop]) -> Vec<&'a Crop> {
    crops.iter().copied().filter(|c| c.label.is_some()).collect()
}

/// Class-stratified labeled subset: `round(fraction * count)` crops per class.
///
/// Each class is shuffled once with `seed`, and the subset is a prefix of that
/// order, so subsets for growing fractions are nested.
pub fn subsample_train<'a>(labeled: &[&'a Crop], fraction: f64, seed: u64) -> Result<Vec<&'a Crop>> {
    let fraction = grid_fraction(fraction)?;
    let mut by_class: BTreeMap<TissueClass, Vec<&'a Crop>> = BTreeMap::new();
    for c in labeled {
        let l = c.label.ok_or_else(|| Error::InvalidConfig(format!("crop {} is unlabeled", c.id)))?;
        by_class.entry(l).or_default().push(c);
    }
    let mut out = Vec::new();
    for (class, mut crops) in by_class {
        let take = (fraction * crops.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::InsufficientData(format!(
                "class {class} rounds to 0 labeled crops at fraction {fraction} ({} available)",
                crops.len()
            )));
        }
        crops.sort_by(|a, b| a.id.cmp(&b.id));
        crops.shuffle(&mut seed::derived_rng(seed, "subsample", class.index() as u64));
        out.extend(crops.into_iter().take(take));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn batch_inputs(crops: &[&Crop], mode: ModalityMode) -> Result<(Option<Array4<f32>>, Option<Array4<f32>>)> {
    let int = if mode.uses_intensity() {
        Some(stack_batch(&crops.iter().map(|c| &c.intensity).collect::<Vec<_>>())?)
    } else {
        None
    };
    let phs = if mode.uses_phase() {
        Some(stack_batch(&crops.iter().map(|c| &c.phase).collect::<Vec<_>>())?)
    } else {
        None
    };
    Ok((int, phs))
}

fn shuffled(n: usize, seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::derived_rng(seed, tag, epoch as u64));
    order
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Both encoders trained; the head is untouched.
    pub model: TissueModel,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Contrastive pretraining of both encoders on unlabeled crop pairs.
///
/// A trailing batch of one pair is skipped: the loss has no negatives there.
pub fn pretrain(pool: &[&Crop], encoder: EncoderConfig, objective: &ContrastiveConfig, cfg: &TrainConfig, seed: u64) -> Result<PretrainOutcome> {
    if pool.len() < 2 {
        return Err(Error::InsufficientData(format!("pretraining pool has {} crops", pool.len())));
    }
    let exec = Exec {
        deterministic: cfg.deterministic,
    };
    let mut model = TissueModel::scratch(encoder, HeadConfig::new(ModalityMode::Dual), seed::derive(seed, "init", 0))?;
    let mut adam = Adam::new(cfg.learning_rate as f32);
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    let mut steps = 0;
    for epoch in 0..cfg.pretrain_epochs {
        let order = shuffled(pool.len(), seed, "pretrain.epoch", epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let crops: Vec<&Crop> = chunk.iter().map(|&i| pool[i]).collect();
            let (xi, xp) = batch_inputs(&crops, ModalityMode::Dual)?;
            model.f.zero_grad();
            model.g.zero_grad();
            let zi = model.f.forward(&xi.unwrap(), true);
            let zp = model.g.forward(&xp.unwrap(), true);
            let lg = objective.loss_and_grad(to_f64(&zi).view(), to_f64(&zp).view())?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "contrastive loss {} at epoch {epoch}, step {steps}, batch {:?}",
                    lg.loss,
                    crops.iter().map(|c| c.id.as_str()).collect::<Vec<_>>()
                )));
            }
            model.f.backward(&to_f32(&lg.d_int), exec);
            model.g.backward(&to_f32(&lg.d_phs), exec);
            adam.step(|f| {
                model.f.visit("f", f);
                model.g.visit("g", f);
            });
            sum += lg.loss;
            count += 1;
            steps += 1;
        }
        losses.push(if count > 0 { sum / count as f64 } else { f64::NAN });
    }
    Ok(PretrainOutcome { model, losses, steps })
}

/// Mean contrastive loss over `pool` in inference mode.
pub fn contrastive_eval_loss(model: &mut TissueModel, pool: &[&Crop], objective: &ContrastiveConfig, batch: usize) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in pool.chunks(batch).filter(|c| c.len() >= 2) {
        let (xi, xp) = batch_inputs(chunk, ModalityMode::Dual)?;
        let zi = model.f.forward(&xi.unwrap(), false);
        let zp = model.g.forward(&xp.unwrap(), false);
        sum += objective.loss_and_grad(to_f64(&zi).view(), to_f64(&zp).view())?.loss;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters from the epoch with the best validation weighted F1.
    pub model: TissueModel,
    /// 1-based; 0 when no validation crops were available and the last epoch was kept.
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
    pub val_f1: Vec<f64>,
}

fn label_indices(crops: &[&Crop]) -> Vec<usize> {
    crops.iter().map(|c| c.label.expect("labeled crop").index()).collect()
}

/// One optimizer step on one batch; returns the batch loss before the step.
pub fn finetune_step(model: &mut TissueModel, adam: &mut Adam, crops: &[&Crop], class_weights: Option<&[f64]>, exec: Exec) -> Result<f64> {
    let mode = model.mode();
    let (xi, xp) = batch_inputs(crops, mode)?;
    model.visit_active(&mut |_, p| p.zero_grad());
    let logits = model.forward(xi.as_ref(), xp.as_ref(), true)?;
    let (loss, grad) = cross_entropy_with_grad(to_f64(&logits).view(), &label_indices(crops), class_weights)?;
    model.backward(&to_f32(&grad), exec);
    adam.step(|f| model.visit_active(f));
    Ok(loss)
}

/// Supervised training of head and active encoders with cross-entropy.
pub fn finetune(mut model: TissueModel, train: &[&Crop], val: &[&Crop], cfg: &TrainConfig, seed: u64) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty labeled training subset".into()));
    }
    let classes: BTreeSet<usize> = label_indices(train).into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "labeled training subset covers only {} class(es)",
            classes.len()
        )));
    }
    let exec = Exec {
        deterministic: cfg.deterministic,
    };
    let val = labeled(val);
    let mut adam = Adam::new(cfg.finetune_lr() as f32);
    let mut best: Option<(f64, usize, TissueModel)> = None;
    let mut train_losses = Vec::with_capacity(cfg.finetune_epochs);
    let mut val_f1 = Vec::new();
    for epoch in 0..cfg.finetune_epochs {
        let order = shuffled(train.len(), seed, "finetune.epoch", epoch);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let crops: Vec<&Crop> = chunk.iter().map(|&i| train[i]).collect();
            sum += finetune_step(&mut model, &mut adam, &crops, cfg.class_weights.as_ref().map(|w| &w[..]), exec)?;
            batches += 1;
        }
        train_losses.push(sum / batches as f64);
        if !val.is_empty() {
            let f1 = evaluate(&mut model, &val, cfg.batch_size)?.weighted_f1;
            val_f1.push(f1);
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch + 1, model.clone()));
            }
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(FinetuneOutcome {
        model,
        best_epoch,
        train_losses,
        val_f1,
    })
}

/// Softmax class probabilities, inference mode.
pub fn predict(model: &mut TissueModel, crops: &[&Crop], batch: usize) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let mode = model.mode();
    let mut out = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(batch.max(1)) {
        let (xi, xp) = batch_inputs(chunk, mode)?;
        let logits = model.forward(xi.as_ref(), xp.as_ref(), false)?;
        for row in softmax(to_f64(&logits).view()).rows() {
            let mut r = [0.0; NUM_CLASSES];
            r.iter_mut().zip(row.iter()).for_each(|(a, b)| *a = *b);
            out.push(r);
        }
    }
    Ok(out)
}

/// Weighted AP / F1 over labeled crops.
pub fn evaluate(model: &mut TissueModel, crops: &[&Crop], batch: usize) -> Result<MetricsReport> {
    let crops = labeled(crops);
    if crops.is_empty() {
        return Err(Error::InsufficientData("no labeled crops to evaluate".into()));
    }
    let scores = predict(model, &crops, batch)?;
    let labels: Vec<TissueClass> = crops.iter().map(|c| c.label.unwrap()).collect();
    evaluate_scores(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, HeadConfig};
    use proptest::prelude::*;

    fn refs(counts: &[(TissueClass, usize)]) -> Vec<InsertionRef> {
        counts
            .iter()
            .flat_map(|&(c, n)| {
                (0..n).map(move |k| InsertionRef {
                    id: format!("{}-{k:03}", c.name()),
                    meat_class: c,
                })
            })
            .collect()
    }

    fn crop(id: &str, ins: &str, label: Option<TissueClass>, salt: f32) -> Crop {
        let level = label.map_or(0.5, |l| l.index() as f32 * 0.3);
        Crop {
            id: id.into(),
            insertion_id: ins.into(),
            meat_class: TissueClass::Beef,
            time_window_index: 0,
            label,
            intensity: Array2::from_shape_fn((250, 256), |(i, j)| level + ((i * 7 + j * 13) % 11) as f32 * 0.01 + salt),
            phase: Array2::from_shape_fn((250, 256), |(i, j)| level * 0.5 + ((i + j * 3) % 5) as f32 * 0.02 - salt),
        }
    }

    #[test]
    fn paper_counts_split_per_class() {
        let ins = refs(&[(TissueClass::Beef, 34), (TissueClass::Pork, 14), (TissueClass::Turkey, 18)]);
        let plan = make_splits(&ins, 3, 11).unwrap();
        assert_eq!(plan, make_splits(&ins, 3, 11).unwrap());
        let mut tests = BTreeSet::new();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (54, 6, 6));
            for id in &f.test {
                assert!(tests.insert(id.clone()), "test sets overlap on {id}");
            }
        }
    }

    #[test]
    fn minimal_split_is_valid() {
        let ins = refs(&[(TissueClass::Beef, 3), (TissueClass::Pork, 3), (TissueClass::Turkey, 3)]);
        let plan = make_splits(&ins, 3, 0).unwrap();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (3, 3, 3));
        }
        let too_few = refs(&[(TissueClass::Beef, 2)]);
        assert!(matches!(make_splits(&too_few, 3, 0), Err(Error::InsufficientData(_))));
    }

    proptest! {
        #[test]
        fn splits_are_stratified_and_disjoint(b in 3usize..60, p in 3usize..60, t in 3usize..60, seed in 0u64..1000) {
            let counts = [(TissueClass::Beef, b), (TissueClass::Pork, p), (TissueClass::Turkey, t)];
            let ins = refs(&counts);
            let plan = make_splits(&ins, 3, seed).unwrap();
            for f in &plan.folds {
                f.check_disjoint().unwrap();
                let all: BTreeSet<&String> = f.train.iter().chain(&f.val).chain(&f.test).collect();
                prop_assert_eq!(all.len(), ins.len());
                for &(class, n) in &counts {
                    let count = |ids: &Vec<String>| ids.iter().filter(|i| i.starts_with(class.name())).count() as f64;
                    let nf = n as f64;
                    if n >= 10 {
                        prop_assert!((count(&f.train) - 0.8 * nf).abs() <= 1.0);
                        prop_assert!((count(&f.val) - 0.1 * nf).abs() <= 1.0);
                        prop_assert!((count(&f.test) - 0.1 * nf).abs() <= 1.0);
                    }
                    prop_assert!(count(&f.train) >= 1.0 && count(&f.test) >= 1.0);
                }
            }
        }
    }

    #[test]
    fn subsample_rounds_per_class_and_nests() {
        let crops: Vec<Crop> = (0..100)
            .map(|i| crop(&format!("a/{i:04}"), "a", Some(TissueClass::Pork), 0.0))
            .chain((0..25).map(|i| crop(&format!("b/{i:04}"), "b", Some(TissueClass::Gelatin), 0.0)))
            .collect();
        let all: Vec<&Crop> = crops.iter().collect();
        let pick = |f| subsample_train(&all, f, 4).unwrap();
        let tenth = pick(0.1);
        let count = |s: &[&Crop], c| s.iter().filter(|x| x.label == Some(c)).count();
        assert_eq!(count(&tenth, TissueClass::Pork), 10);
        assert_eq!(count(&tenth, TissueClass::Gelatin), 3);
        assert_eq!(pick(1.0).len(), all.len());
        let mut prev: BTreeSet<String> = BTreeSet::new();
        for f in crate::config::FRACTION_GRID {
            let cur: BTreeSet<String> = pick(f).iter().map(|c| c.id.clone()).collect();
            assert!(prev.is_subset(&cur));
            prev = cur;
        }
        assert!(subsample_train(&all, 0.5, 4).is_err());
        let few: Vec<&Crop> = all[..4].to_vec();
        let err = subsample_train(&few, 0.1, 4).unwrap_err();
        assert!(err.to_string().contains("pork"), "{err}");
    }

    #[test]
    fn leakage_is_detected() {
        let fold = Fold {
            index: 0,
            train: vec!["a".into()],
            val: vec!["b".into()],
            test: vec!["c".into()],
        };
        let ok = crop("a/0000", "a", None, 0.0);
        let bad = crop("c/0000", "c", None, 0.0);
        fold.check_leakage([&ok]).unwrap();
        assert!(matches!(fold.check_leakage([&ok, &bad]), Err(Error::Leakage(_))));
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            pretrain_epochs: epochs,
            finetune_epochs: epochs,
            learning_rate: 1e-3,
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pretrain_step_arithmetic_and_reload() {
        let crops: Vec<Crop> = (0..9).map(|i| crop(&format!("a/{i:04}"), "a", None, i as f32 * 0.05)).collect();
        let pool: Vec<&Crop> = crops.iter().collect();
        let obj = ContrastiveConfig::default();
        // 9 crops at batch 4: two full batches and a trailing single pair that is skipped.
        let out = pretrain(&pool, EncoderConfig::tiny(8), &obj, &tiny_cfg(2), 1).unwrap();
        assert_eq!(out.steps, 4);
        assert_eq!(out.losses.len(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        crate::checkpoint::save(&crate::checkpoint::Checkpoint::from_encoders(&out.model, 1), &path).unwrap();
        let mut reloaded = TissueModel::init_weights(
            crate::model::InitMode::ContrastiveCheckpoint,
            EncoderConfig::tiny(8),
            HeadConfig::new(ModalityMode::Dual),
            5,
            Some(&path),
        )
        .unwrap();
        let mut original = out.model.clone();
        let a = contrastive_eval_loss(&mut original, &pool, &obj, 4).unwrap();
        let b = contrastive_eval_loss(&mut reloaded, &pool, &obj, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_batch_step_reduces_loss() {
        let crops: Vec<Crop> = (0..8)
            .map(|i| crop(&format!("a/{i:04}"), "a", TissueClass::from_index(i % 4), 0.0))
            .collect();
        let batch: Vec<&Crop> = crops.iter().collect();
        let mut model = TissueModel::scratch(EncoderConfig::tiny(8), HeadConfig::new(ModalityMode::Dual), 3).unwrap();
        let mut adam = Adam::new(1e-4);
        let before = finetune_step(&mut model, &mut adam, &batch, None, Exec::default()).unwrap();
        let mut probe = Adam::new(0.0);
        let after = finetune_step(&mut model, &mut probe, &batch, None, Exec::default()).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn intensity_only_leaves_phase_encoder_untouched() {
        let crops: Vec<Crop> = (0..8)
            .map(|i| crop(&format!("a/{i:04}"), "a", TissueClass::from_index(i % 2), 0.0))
            .collect();
        let train: Vec<&Crop> = crops.iter().collect();
        let model = TissueModel::scratch(EncoderConfig::tiny(8), HeadConfig::new(ModalityMode::IntensityOnly), 3).unwrap();
        let (g0, f0) = (model.g.param_hash(), model.f.param_hash());
        let out = finetune(model, &train, &[], &tiny_cfg(2), 0).unwrap();
        assert_eq!(out.model.g.param_hash(), g0);
        assert_ne!(out.model.f.param_hash(), f0);
        assert_eq!(out.best_epoch, 0);

        let dual = TissueModel::scratch(EncoderConfig::tiny(8), HeadConfig::new(ModalityMode::Dual), 3).unwrap();
        let g0 = dual.g.param_hash();
        let out = finetune(dual, &train, &train, &tiny_cfg(2), 0).unwrap();
        assert_ne!(out.model.g.param_hash(), g0);
        assert!(out.best_epoch >= 1);
    }

    #[test]
    fn single_class_subset_is_refused() {
        let crops: Vec<Crop> = (0..4).map(|i| crop(&format!("a/{i:04}"), "a", Some(TissueClass::Beef), 0.0)).collect();
        let train: Vec<&Crop> = crops.iter().collect();
        let model = TissueModel::scratch(EncoderConfig::tiny(4), HeadConfig::new(ModalityMode::Dual), 0).unwrap();
        assert!(matches!(finetune(model, &train, &[], &tiny_cfg(1), 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn finetune_is_seed_deterministic() {
        let crops: Vec<Crop> = (0..12)
            .map(|i| crop(&format!("a/{i:04}"), "a", TissueClass::from_index(i % 4), i as f32 * 0.01))
            .collect();
        let train: Vec<&Crop> = crops.iter().collect();
        let run = || {
            let m = TissueModel::scratch(EncoderConfig::tiny(8), HeadConfig::new(ModalityMode::Dual), 7).unwrap();
            let mut out = finetune(m, &train, &train, &tiny_cfg(3), 7).unwrap();
            evaluate(&mut out.model, &train, 4).unwrap()
        };
        assert_eq!(run(), run());
    }
}
