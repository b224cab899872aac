//! Mini-batch CTC training and greedy-decoding evaluation.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;

use crate::ctc::{ctc_loss_grad, greedy_decode, Alphabet, LabelSeq};
use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::model::{Adam, LipNet};
use crate::params::Parameters;
use crate::rng;
use crate::synthdata::{read_manifest, Sample};
use crate::tensor::{read_vid5, Real, Tensor5};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// One clip, `(1, c, t, h, w)`.
    pub video: Tensor5<f32>,
    pub label: LabelSeq,
}

pub fn load_examples(dir: &Path, samples: &[Sample], alphabet: &Alphabet) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            let file = std::fs::File::open(dir.join(&s.video))?;
            let video = read_vid5(std::io::BufReader::new(file))?;
            Ok(Example { video, label: alphabet.encode(&s.sentence)? })
        })
        .collect()
}

pub fn load_split(dir: &Path, manifest: &str, alphabet: &Alphabet) -> Result<Vec<Example>> {
    load_examples(dir, &read_manifest(&dir.join(manifest))?, alphabet)
}

/// Seeds for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochSeeds {
    pub shuffle: u64,
    pub dropout: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchResult<T> {
    pub losses: Vec<f64>,
    pub grads: LipNet<T>,
}

fn stack<T: Real>(batch: &[&Example]) -> Result<Tensor5<T>> {
    let items: Vec<Tensor5<T>> = batch.iter().map(|e| e.video.cast()).collect();
    Tensor5::stack_batch(&items)
}

/// Forward, CTC and backward over one batch. Gradients are summed, not
/// averaged.
pub fn batch_loss_grad<T: Real>(model: &mut LipNet<T>, batch: &[&Example], mode: Mode) -> Result<BatchResult<T>> {
    let video = stack::<T>(batch)?;
    let (log_probs, cache) = model.forward(&video, mode)?;
    let classes = model.config.num_classes;
    let mut losses = Vec::with_capacity(batch.len());
    let mut grad_logits = Vec::with_capacity(batch.len());
    for (lp, ex) in log_probs.iter().zip(batch) {
        let out = ctc_loss_grad(lp, classes, &ex.label)?;
        losses.push(out.loss.to_f64_lossy());
        grad_logits.push(out.grad);
    }
    let (_, grads) = model.backward(&cache, &grad_logits)?;
    Ok(BatchResult { losses, grads })
}

/// One pass over `data` in seeded random order. Returns the mean CTC loss
/// of the batches as they were seen (before each update).
pub fn train_epoch<T: Real>(
    model: &mut LipNet<T>,
    opt: &mut Adam<T>,
    data: &[Example],
    batch_size: usize,
    seeds: EpochSeeds,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::argument("training set is empty"));
    }
    if batch_size == 0 {
        return Err(Error::argument("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::seeded_rng(seeds.shuffle));
    let mut total = 0.0;
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
        let mode = Mode::train(rng::mix(seeds.dropout, b as u64));
        let step = batch_loss_grad(model, &batch, mode).and_then(|mut r| {
            r.grads.scale_params(T::lit(1.0 / batch.len() as f64));
            opt.update(model, &r.grads)?;
            Ok(r.losses)
        });
        let losses = step.map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("batch {b}: {msg}")),
            Error::Infeasible(msg) => Error::Infeasible(format!("batch {b}: {msg}")),
            other => other,
        })?;
        let batch_loss: f64 = losses.iter().sum();
        if !batch_loss.is_finite() {
            return Err(Error::Numeric(format!("batch {b}: loss is {batch_loss}")));
        }
        debug!("batch {b}: mean loss {:.4}", batch_loss / losses.len() as f64);
        total += batch_loss;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    pub hypotheses: Vec<String>,
}

/// Eval-mode loss and greedy transcripts, in data order.
pub fn evaluate<T: Real>(model: &mut LipNet<T>, data: &[Example], batch_size: usize, alphabet: &Alphabet) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::argument("evaluation set is empty"));
    }
    if alphabet.num_classes() != model.config.num_classes {
        return Err(Error::argument(format!(
            "alphabet has {} classes, model has {}",
            alphabet.num_classes(),
            model.config.num_classes
        )));
    }
    let mut loss = 0.0;
    let mut hypotheses = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let video = stack::<T>(&batch)?;
        let (log_probs, _) = model.forward(&video, Mode::Eval)?;
        for (lp, ex) in log_probs.iter().zip(&batch) {
            loss += ctc_loss_grad(lp, model.config.num_classes, &ex.label)?.loss.to_f64_lossy();
            hypotheses.push(greedy_decode(lp, alphabet));
        }
    }
    Ok(Evaluation { mean_loss: loss / data.len() as f64, hypotheses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcase::tiny_config;
    use crate::model::AdamConfig;
    use crate::tensor::Fill;

    fn toy_data(n: usize, config: &crate::model::LipNetConfig) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                video: Tensor5::new(config.input_shape(1).unwrap(), Fill::Uniform { lo: 0.0, hi: 1.0, seed: i as u64 }).unwrap(),
                label: LabelSeq::new(vec![i % 4, (i + 1) % 4], "").unwrap(),
            })
            .collect()
    }

    #[test]
    fn epochs_are_reproducible() {
        let cfg = tiny_config(&[]);
        let data = toy_data(5, &cfg);
        let seeds = EpochSeeds { shuffle: 1, dropout: 2 };
        let run = || {
            let mut m = LipNet::<f32>::build(cfg.clone(), 9).unwrap();
            let mut opt = Adam::new(AdamConfig::default(), &m);
            let loss = train_epoch(&mut m, &mut opt, &data, 2, seeds).unwrap();
            (m, loss)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let cfg = tiny_config(&[]);
        let data = toy_data(4, &cfg);
        let mut m = LipNet::<f32>::build(cfg, 9).unwrap();
        let before: Vec<Vec<f32>> = m.param_list().iter().map(|p| p.data.to_vec()).collect();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &m);
        train_epoch(&mut m, &mut opt, &data, 2, EpochSeeds { shuffle: 0, dropout: 0 }).unwrap();
        let after: Vec<Vec<f32>> = m.param_list().iter().map(|p| p.data.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let cfg = crate::model::LipNetConfig { dropout: None, ..tiny_config(&[]) };
        let data = toy_data(4, &cfg);
        let mut m = LipNet::<f64>::build(cfg, 1).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() }, &m);
        let seeds = EpochSeeds { shuffle: 0, dropout: 0 };
        let first = train_epoch(&mut m, &mut opt, &data, 4, seeds).unwrap();
        let mut last = first;
        for _ in 0..100 {
            last = train_epoch(&mut m, &mut opt, &data, 4, seeds).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn empty_inputs_rejected() {
        let cfg = tiny_config(&[]);
        let mut m = LipNet::<f32>::build(cfg, 0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &m);
        assert!(train_epoch(&mut m, &mut opt, &[], 2, EpochSeeds { shuffle: 0, dropout: 0 }).is_err());
        assert!(evaluate(&mut m, &[], 2, &Alphabet::new("abcd").unwrap()).is_err());
    }

    #[test]
    fn infeasible_label_names_batch() {
        let cfg = tiny_config(&[]);
        let mut data = toy_data(2, &cfg);
        data[1].label = LabelSeq::new(vec![0, 0, 0, 0], "").unwrap();
        let mut m = LipNet::<f32>::build(cfg, 0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &m);
        let err = train_epoch(&mut m, &mut opt, &data, 1, EpochSeeds { shuffle: 0, dropout: 0 }).unwrap_err();
        assert!(err.to_string().contains("batch"), "{err}");
    }
}
