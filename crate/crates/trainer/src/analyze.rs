//! Spike analysis of a recorded trace: the embedding tensor's RMS against the loss, plus
//! a mid-depth tensor as the negative control.

use lowbit_core::stability::{analyze_trace, negative_control, SpikeRecord, SpikeReport, SpikeThresholds, TrainTrace};
use serde::Serialize;

use crate::error::{TrainerError, TrainerResult};

pub const EMBED_TENSOR: &str = "embed.weight";

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    pub thresholds: SpikeThresholds,
    /// Tensor whose RMS is tested; defaults to the embedding.
    pub tensor: Option<String>,
    /// Negative-control tensor; defaults to the middle block's input projection.
    pub control: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub primary: SpikeReport,
    pub control: Option<SpikeReport>,
    /// Structured output, one JSON object per line.
    pub lines: Vec<String>,
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    tensor: &'a str,
    #[serde(flatten)]
    record: &'a SpikeRecord,
}

#[derive(Serialize)]
struct Summary<'a> {
    kind: &'static str,
    tensor: &'a str,
    rms_spikes: usize,
    loss_spikes: usize,
    matched: usize,
    unmatched: usize,
    chance_probability: f64,
}

fn mid_tensor(trace: &TrainTrace) -> Option<String> {
    let depth = trace.records.first()?.feat_absmean.len();
    let name = format!("blocks.{}.attn.in_proj.weight", depth / 2);
    trace.tensor_names().contains(&name).then_some(name)
}

pub fn analyze(trace: &TrainTrace, opts: &AnalyzeOptions) -> TrainerResult<Analysis> {
    let names = trace.tensor_names();
    let tensor = match &opts.tensor {
        Some(t) => t.clone(),
        None if names.iter().any(|n| n == EMBED_TENSOR) => EMBED_TENSOR.to_string(),
        None => names
            .first()
            .cloned()
            .ok_or_else(|| TrainerError::Trace {
                line: 1,
                msg: "trace has no rms.* series".into(),
            })?,
    };
    let th = &opts.thresholds;
    let primary = analyze_trace(trace, &tensor, th)?;
    let control_name = opts.control.clone().or_else(|| mid_tensor(trace));
    let control = match &control_name {
        Some(name) => Some(negative_control(trace, name, th)?),
        None => None,
    };

    let loss = trace.loss_series();
    let mut lines = Vec::new();
    for report in std::iter::once(&primary).chain(control.as_ref()) {
        let rms = trace.rms_series(&report.tensor)?;
        for record in report.records(&rms, &loss) {
            lines.push(
                serde_json::to_string(&TaggedRecord {
                    tensor: &report.tensor,
                    record: &record,
                })
                .expect("record serializes"),
            );
        }
        lines.push(
            serde_json::to_string(&Summary {
                kind: "summary",
                tensor: &report.tensor,
                rms_spikes: report.rms_spike_iters.len(),
                loss_spikes: report.loss_spike_iters.len(),
                matched: report.matched_pairs.len(),
                unmatched: report.unmatched_loss_spikes.len(),
                chance_probability: report.chance_probability,
            })
            .expect("summary serializes"),
        );
    }
    Ok(Analysis { primary, control, lines })
}
