//! The training loop.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{ConfigFile, ModelConfig, Tokenization, TrainConfig};
use super::data::{Batch, Dataset};
use super::model::Model;
use super::optim::{clip_global_norm, Adam};
use super::vocab::Vocab;
use super::HarnessError;
use crate::attention::head_average;
use crate::syntax::{parse_treebank, pointer_loss_batch};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lm_loss: f64,
    /// Unweighted pointer loss summed over layers; 0 when hints are off.
    pub pointer_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    /// Writes `checkpoint.bin`, `loss_curve.csv` and `config.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        self.checkpoint.save(&dir.join("checkpoint.bin"))?;
        let curve_path = dir.join("loss_curve.csv");
        let mut w = csv::Writer::from_path(&curve_path)?;
        if self.curve.is_empty() {
            w.write_record(["step", "lm_loss", "pointer_loss", "total_loss"])?;
        }
        for p in &self.curve {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| HarnessError::io(&curve_path, e))?;
        let doc = ConfigFile::from_resolved(&self.checkpoint.model.config, &self.checkpoint.train_config);
        let cfg_path = dir.join("config.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&doc)? + "\n").map_err(|e| HarnessError::io(&cfg_path, e))
    }
}

/// Builds the vocabulary and dataset, initialises the model from `seed` and
/// runs `total_steps` Adam updates.
///
/// `model_config.vocab_size` caps the vocabulary when non-zero; the resolved
/// size is stored in the returned checkpoint.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &str,
    treebank: Option<&str>,
) -> Result<TrainOutcome, HarnessError> {
    model_config.validate()?;
    train_config.validate()?;
    let mut config = model_config.clone();

    let wants_hints = config.variant.uses_hints() && config.lambda_p > 0.0;
    if wants_hints && config.tokenization == Tokenization::Char {
        log::warn!("syntax hints need a word-level corpus; pointer loss disabled");
    }
    if config.effective_lambda_p() > 0.0 && treebank.is_none() {
        return Err(HarnessError::Config(format!(
            "variant {:?} with lambda_p {} needs a treebank",
            config.variant, config.lambda_p
        )));
    }
    let lambda = config.effective_lambda_p();
    let treebank = match treebank {
        Some(_) if lambda == 0.0 => {
            log::warn!("treebank ignored: pointer loss is not active for this configuration");
            None
        }
        Some(text) => Some(parse_treebank(text)?),
        None => None,
    };

    let cap = (config.vocab_size > 0).then_some(config.vocab_size);
    let vocab = Vocab::build(corpus, config.tokenization, 1, cap)?;
    config.vocab_size = vocab.len();
    let dataset = Dataset::load(corpus, &vocab, treebank.as_deref())?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut model = Model::init(&config, &mut rng)?;
    let mut adam = {
        let params: Vec<&Tensor> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        Adam::new(
            &params,
            train_config.learning_rate,
            train_config.adam_beta1,
            train_config.adam_beta2,
            train_config.adam_eps,
        )
    };

    let mut curve = Vec::with_capacity(train_config.total_steps);
    for step in 1..=train_config.total_steps {
        let batch = dataset.sample_batch(&mut rng, train_config.batch_size, config.max_seq_len)?;
        let mut tape = Tape::new();
        let (point, loss, params) = step_loss(&model, &mut tape, &batch, lambda, step)?;
        if !point.total_loss.is_finite() {
            return Err(HarnessError::Divergence {
                step,
                loss: point.total_loss,
            });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Tensor> = params
            .iter()
            .map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect();
        let norm = clip_global_norm(&mut grads, train_config.gradient_clip_norm);
        if !norm.is_finite() {
            return Err(HarnessError::Divergence {
                step,
                loss: point.total_loss,
            });
        }
        adam.update(model.tensors_mut(), &grads);
        if train_config.eval_interval > 0 && step % train_config.eval_interval == 0 {
            log::info!(
                "step {step}: lm {:.4} pointer {:.4} total {:.4}",
                point.lm_loss,
                point.pointer_loss,
                point.total_loss
            );
        }
        curve.push(point);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            optimizer: adam,
            vocab,
            train_config: train_config.clone(),
        },
        curve,
    })
}

fn step_loss(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    lambda: f64,
    step: usize,
) -> Result<(CurvePoint, Var, Vec<Var>), HarnessError> {
    let inputs: Vec<&[usize]> = batch.inputs.iter().map(Vec::as_slice).collect();
    let fwd = model.forward(tape, &inputs, true)?;
    let targets: Vec<usize> = batch.targets.concat();
    let lm = tape.cross_entropy(fwd.logits, &targets)?;
    let lm_value = tape.value(lm).item();

    let (total, pointer_value) = match (&batch.hints, lambda > 0.0) {
        (Some(hints), true) => {
            let mut sum: Option<Var> = None;
            for layer in &fwd.traces {
                let mut averaged = Vec::with_capacity(layer.len());
                for heads in layer {
                    let weights: Vec<Var> = heads.iter().map(|t| t.final_weights()).collect();
                    averaged.push(head_average(tape, &weights)?);
                }
                let p = pointer_loss_batch(tape, &averaged, hints)?;
                sum = Some(match sum {
                    None => p.loss,
                    Some(acc) => tape.add(acc, p.loss)?,
                });
            }
            let sum = sum.expect("model has at least one layer");
            let pv = tape.value(sum).item();
            let weighted = tape.scale(sum, lambda);
            (tape.add(lm, weighted)?, pv)
        }
        _ => (lm, 0.0),
    };
    let point = CurvePoint {
        step,
        lm_loss: lm_value,
        pointer_loss: pointer_value,
        total_loss: tape.value(total).item(),
    };
    Ok((point, total, fwd.vars.vars()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Variant;

    fn tiny() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 8,
            ..Default::default()
        };
        let t = TrainConfig {
            batch_size: 2,
            total_steps: 5,
            ..Default::default()
        };
        (m, t)
    }

    #[test]
    fn zero_steps_saves_initialisation() {
        let (m, mut t) = tiny();
        t.total_steps = 0;
        let out = train(&m, &t, "abcabcabd", None).unwrap();
        assert!(out.curve.is_empty());
        let mut cfg = m.clone();
        cfg.vocab_size = out.checkpoint.vocab.len();
        let init = Model::init(&cfg, &mut ChaCha8Rng::seed_from_u64(t.seed)).unwrap();
        assert_eq!(out.checkpoint.model, init);
        assert_eq!(out.checkpoint.optimizer.step, 0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (m, t) = tiny();
        let a = train(&m, &t, "hello world, hello again", None).unwrap();
        let b = train(&m, &t, "hello world, hello again", None).unwrap();
        assert_eq!(a.checkpoint.model, b.checkpoint.model);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 5);
    }

    #[test]
    fn hint_variant_without_treebank_is_rejected() {
        let (mut m, t) = tiny();
        m.variant = Variant::BetSg;
        m.tokenization = Tokenization::Word;
        let err = train(&m, &t, "a b c\n", None).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn pointer_loss_enters_the_total() {
        let (mut m, t) = tiny();
        m.variant = Variant::BetSg;
        m.tokenization = Tokenization::Word;
        let corpus = "the cat sat\nthe dog ran\n";
        let tb = "1\tthe\t2\n2\tcat\t3\n3\tsat\t0\n\n1\tthe\t2\n2\tdog\t3\n3\tran\t0\n";
        let out = train(&m, &t, corpus, Some(tb)).unwrap();
        for p in &out.curve {
            assert!(p.pointer_loss > 0.0);
            assert!((p.total_loss - (p.lm_loss + 0.5 * p.pointer_loss)).abs() < 1e-12);
        }
    }
}
