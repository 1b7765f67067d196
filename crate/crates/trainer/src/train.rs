//! Training loop: forward, loss, optional loss scaling, backward, non-finite filtering,
//! optimizer step, telemetry.

use std::io::Write;

use lowbit_core::error::Error;
use lowbit_core::numerics::Matrix;
use lowbit_core::optim::{FilteredGrads, LossScaler, StableAdamW, StepReport};
use lowbit_core::stability::{TraceRecord, TrainTrace};

use crate::config::Config;
use crate::error::{TrainerError, TrainerResult};
use crate::model::{loss_and_grad, Model, ModelShape};
use crate::task::SyntheticTask;
use crate::trace::record_to_json;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub steps: Vec<StepReport>,
    pub names: Vec<String>,
    pub params: Vec<Matrix>,
    pub loss_scale: Option<f32>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.records.iter().map(|r| r.loss.unwrap_or(f64::NAN)).collect()
    }

    /// Mean of the last `n` recorded losses.
    pub fn final_loss_mean(&self, n: usize) -> f64 {
        let l = self.losses();
        let tail = &l[l.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Runs training and writes the trace to `train.trace_path` when set.
pub fn train(cfg: &Config) -> TrainerResult<TrainOutcome> {
    train_with_hook(cfg, &mut |_, _| {})
}

/// Like [`train`], calling `hook(iter, grads)` on the raw (still loss-scaled) gradients
/// before non-finite filtering.
pub fn train_with_hook(cfg: &Config, hook: &mut dyn FnMut(u64, &mut [Matrix])) -> TrainerResult<TrainOutcome> {
    let shape = ModelShape::from_config(cfg)?;
    let tc = &cfg.train;
    let task = SyntheticTask::new(tc.task, &tc.data, tc.seed);
    let mut model = Model::new(shape, tc.seed);
    let mut opt = StableAdamW::new(cfg.hyperparams(), model.params())?;
    let scaler = tc.loss_scale.map(LossScaler::new).transpose()?;
    let names = model.names().to_vec();

    let mut sink = match &tc.trace_path {
        Some(path) => Some((
            path.clone(),
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| TrainerError::io(path, e))?),
        )),
        None => None,
    };

    let mut trace = TrainTrace::default();
    let mut steps = Vec::with_capacity(tc.iterations as usize);
    for t in 1..=tc.iterations {
        let batch = task.batch(tc.batch_size, t);
        let mut feats = vec![f64::NAN; shape.depth];
        let mut loss = f64::NAN;
        let mut grads = None;
        match model.forward(&batch.inputs, batch.batch_size, batch.tokens) {
            Ok(fwd) => {
                feats.clone_from(&fwd.feat_absmean);
                let (l, mut d) = loss_and_grad(&fwd.output, &batch.targets)?;
                loss = l;
                if loss.is_finite() {
                    if let Some(s) = &scaler {
                        d = d.scale(s.scale());
                    }
                    grads = match model.backward(fwd.cache, &d) {
                        Ok(g) => Some(g),
                        Err(Error::NonFinite(_)) => None,
                        Err(e) => return Err(e.into()),
                    };
                }
            }
            Err(Error::NonFinite(_)) => {}
            Err(e) => return Err(e.into()),
        }
        if !loss.is_finite() && scaler.is_none() {
            return Err(TrainerError::NonFiniteLoss { iter: t });
        }

        let filtered = match grads {
            Some(mut g) => {
                hook(t, &mut g);
                match &scaler {
                    Some(s) => s.filter_nonfinite(g),
                    None => {
                        if let Some(i) = g.iter().position(|m| !m.is_finite()) {
                            return Err(TrainerError::NonFiniteGradient {
                                iter: t,
                                tensor: names[i].clone(),
                            });
                        }
                        FilteredGrads {
                            grads: g.into_iter().map(Some).collect(),
                            skipped: Vec::new(),
                        }
                    }
                }
            }
            // Overflow inside the scaled backward pass: nothing usable this iteration.
            None => FilteredGrads {
                grads: vec![None; names.len()],
                skipped: (0..names.len()).collect(),
            },
        };

        let grad_absmax: Vec<(String, f64)> = names
            .iter()
            .zip(&filtered.grads)
            .map(|(n, g)| (n.clone(), g.as_ref().map_or(f64::NAN, |g| g.absmax() as f64)))
            .collect();
        let report = opt.step(model.params_mut(), &filtered.grads)?;
        let rms = names
            .iter()
            .zip(&report.tensors)
            .map(|(n, r)| (n.clone(), r.map_or(f64::NAN, |r| r.rms)))
            .collect();
        let record = TraceRecord {
            iter: t,
            loss: loss.is_finite().then_some(loss),
            rms,
            grad_absmax,
            feat_absmean: feats.into_iter().enumerate().collect(),
            skipped_tensors: filtered.skipped.iter().map(|&i| names[i].clone()).collect(),
        };
        if let Some((path, w)) = &mut sink {
            writeln!(w, "{}", record_to_json(&record)).map_err(|e| TrainerError::io(path.clone(), e))?;
        }
        trace.records.push(record);
        steps.push(report);
    }
    if let Some((path, mut w)) = sink {
        w.flush().map_err(|e| TrainerError::io(path, e))?;
    }
    Ok(TrainOutcome {
        trace,
        steps,
        names,
        params: model.params().to_vec(),
        loss_scale: scaler.map(|s| s.scale()),
    })
}
