//! Synthetic data. Each sample is `tokens` rows of `input_dim` features; a batch stacks
//! samples so sample `s` occupies rows `s·tokens .. (s+1)·tokens`.

use lowbit_core::numerics::{gaussian_matrix, Matrix, Rng, Seed};

use crate::config::{DataConfig, TaskKind};

const CENTER_STREAM: u64 = 0xC0FF;
const TEACHER_STREAM: u64 = 0x7EAC;
const BATCH_STREAM: u64 = 0xBA7C;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    /// `batch × outputs`.
    Values(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(batch · tokens) × input_dim`.
    pub inputs: Matrix,
    pub targets: Targets,
    pub batch_size: usize,
    pub tokens: usize,
}

/// Frozen generator for one task: fixed class centers or a fixed teacher network, plus
/// per-iteration sampling.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    kind: TaskKind,
    data: DataConfig,
    seed: Seed,
    centers: Matrix,
    teacher: Option<(Matrix, Matrix)>,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, data: &DataConfig, seed: u64) -> Self {
        let seed = Seed(seed);
        let (centers, teacher) = match kind {
            TaskKind::SyntheticClassify => (
                gaussian_matrix(data.classes, data.input_dim, 0.0, data.center_scale, seed.derive(CENTER_STREAM)),
                None,
            ),
            TaskKind::SyntheticRegress => {
                let s = seed.derive(TEACHER_STREAM);
                let w1 = gaussian_matrix(
                    data.teacher_hidden,
                    data.input_dim,
                    0.0,
                    data.teacher_scale / (data.input_dim as f64).sqrt(),
                    s.derive(1),
                );
                let w2 = gaussian_matrix(
                    data.outputs,
                    data.teacher_hidden,
                    0.0,
                    data.teacher_scale / (data.teacher_hidden as f64).sqrt(),
                    s.derive(2),
                );
                (Matrix::zeros(0, data.input_dim), Some((w1, w2)))
            }
        };
        Self {
            kind,
            data: data.clone(),
            seed,
            centers,
            teacher,
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn data(&self) -> &DataConfig {
        &self.data
    }

    /// Batch for a 1-based iteration. Identical for identical `(seed, iter)`.
    pub fn batch(&self, batch_size: usize, iter: u64) -> Batch {
        let mut rng = Rng::new(self.seed.derive(BATCH_STREAM).derive(iter));
        let d = &self.data;
        let mut inputs = Matrix::zeros(batch_size * d.tokens, d.input_dim);
        let input_scale = if iter <= d.starve_iterations { d.starve_scale } else { 1.0 };
        let targets = match self.kind {
            TaskKind::SyntheticClassify => {
                let mut labels = Vec::with_capacity(batch_size);
                for s in 0..batch_size {
                    let label = rng.below(d.classes as u64) as usize;
                    labels.push(label);
                    let center = self.centers.row(label);
                    for t in 0..d.tokens {
                        let row = inputs.row_mut(s * d.tokens + t);
                        for (x, &c) in row.iter_mut().zip(center) {
                            *x = ((c as f64 + d.noise * rng.normal()) * input_scale) as f32;
                        }
                    }
                }
                Targets::Labels(labels)
            }
            TaskKind::SyntheticRegress => {
                for x in inputs.data_mut() {
                    *x = (rng.normal() * input_scale) as f32;
                }
                Targets::Values(self.teacher_outputs(&inputs, batch_size))
            }
        };
        Batch {
            inputs,
            targets,
            batch_size,
            tokens: d.tokens,
        }
    }

    /// `W2 · tanh(W1 · mean_tokens(x))` per sample.
    fn teacher_outputs(&self, inputs: &Matrix, batch_size: usize) -> Matrix {
        let (w1, w2) = self.teacher.as_ref().expect("regression task has a teacher");
        let d = &self.data;
        let mut out = Matrix::zeros(batch_size, d.outputs);
        for s in 0..batch_size {
            let mut pooled = vec![0f64; d.input_dim];
            for t in 0..d.tokens {
                for (p, &x) in pooled.iter_mut().zip(inputs.row(s * d.tokens + t)) {
                    *p += x as f64;
                }
            }
            pooled.iter_mut().for_each(|p| *p /= d.tokens as f64);
            let hidden: Vec<f64> = (0..d.teacher_hidden)
                .map(|h| {
                    let z: f64 = w1.row(h).iter().zip(&pooled).map(|(&w, &p)| w as f64 * p).sum();
                    z.tanh()
                })
                .collect();
            for o in 0..d.outputs {
                let y: f64 = w2.row(o).iter().zip(&hidden).map(|(&w, &h)| w as f64 * h).sum();
                out.set(s, o, y as f32);
            }
        }
        out
    }
}
