//! Oracles shared by the integration tests: central finite differences,
//! brute-force k-means partitions and a list-backed FIFO.

#![allow(dead_code)]

use std::collections::VecDeque;

use hexa_core::{Result, Tape, Tensor, Var};

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely.
pub fn rel_err(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Builds a scalar on a fresh tape from `inputs` registered as parameters.
pub fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Largest relative error between reverse-mode gradients of `f` and central
/// differences with step `h`, over every element of every input.
pub fn gradient_error<F>(inputs: &[Tensor], h: f32, f: F) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut worst = 0.0f32;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] = input.data()[j] + h;
            let plus = eval_scalar(&shifted, &f)? as f64;
            shifted[i].data_mut()[j] = input.data()[j] - h;
            let minus = eval_scalar(&shifted, &f)? as f64;
            let numeric = ((plus - minus) / (2.0 * h as f64)) as f32;
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// `Σ out ⊙ w` for a fixed random weight tensor, turning any op output into
/// a scalar with a non-uniform upstream gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

/// Best spherical k-means objective `Σ_j ‖Σ_{i∈j} z_i‖` over every split of
/// the rows into two non-empty clusters.
pub fn best_two_partition(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        best = best.max(partition_objective(rows, &labels, 2));
    }
    best
}

pub fn partition_objective(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let d = rows[0].len();
    let mut sums = vec![vec![0.0f64; d]; k];
    for (r, &l) in rows.iter().zip(labels) {
        sums[l].iter_mut().zip(r).for_each(|(s, v)| *s += v);
    }
    sums.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt()).sum()
}

/// Reference FIFO with the same eviction rule as the negative queue.
#[derive(Debug, Default)]
pub struct ListQueue {
    pub capacity: usize,
    pub rows: VecDeque<Vec<f32>>,
}

impl ListQueue {
    pub fn new(capacity: usize) -> Self {
        ListQueue {
            capacity,
            rows: VecDeque::new(),
        }
    }

    pub fn push_batch(&mut self, batch: &[Vec<f32>]) {
        for r in batch {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(r.clone());
        }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.rows.iter().flatten().copied().collect()
    }
}
