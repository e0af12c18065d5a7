//! Pseudo-label losses: InfoNCE, prototype cross-entropy, the cut-mix
//! mixture and the weighted combination of the three view streams.
//!
//! Every loss is a per-batch mean built on a [`Tape`], so gradients with
//! respect to the latents come for free.

use crate::augment::MixedPseudoLabel;
use crate::error::{HexaError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Temperature used when none is configured.
pub const DEFAULT_TEMPERATURE: f32 = 0.2;

/// Where the negative keys of a contrastive loss come from.
#[derive(Clone, Copy, Debug)]
pub enum Negatives {
    /// Only the positive key; the loss is identically zero.
    None,
    /// A detached `N×d` snapshot of the negative queue.
    Queue(Var),
    /// The other rows' positive keys of the current batch.
    InBatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HexaWeights {
    pub alpha1: f32,
    pub alpha2: f32,
}

impl Default for HexaWeights {
    fn default() -> Self {
        HexaWeights {
            alpha1: 1.0,
            alpha2: 1.0,
        }
    }
}

impl HexaWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 >= 0.0 && self.alpha2 >= 0.0 {
            Ok(())
        } else {
            Err(HexaError::config(format!(
                "loss weights must be nonnegative, got alpha1={} alpha2={}",
                self.alpha1, self.alpha2
            )))
        }
    }
}

fn check_tau(tau: f32) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(HexaError::config(format!("temperature must be positive, got {tau}")))
    }
}

fn dot_t(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let bt = tape.transpose(b)?;
    tape.matmul(a, bt)
}

/// Similarity logits `/tau` and the column holding each row's positive.
///
/// With a queue the columns are `[k+, queue...]`, so the positive is column
/// 0; in-batch mode uses `q·Kᵀ` and the positive sits on the diagonal.
pub fn contrastive_logits(
    tape: &mut Tape,
    q: Var,
    k_pos: Var,
    negatives: Negatives,
    tau: f32,
) -> Result<(Var, Vec<usize>)> {
    check_tau(tau)?;
    let (qs, ks) = (tape.value(q).shape().to_vec(), tape.value(k_pos).shape().to_vec());
    if qs.len() != 2 || qs != ks {
        return Err(HexaError::Shape {
            op: "contrastive_logits",
            lhs: qs,
            rhs: ks,
        });
    }
    let b = qs[0];
    let logits = match negatives {
        Negatives::InBatch => {
            let s = dot_t(tape, q, k_pos)?;
            let l = tape.scale(s, 1.0 / tau);
            return Ok((l, (0..b).collect()));
        }
        Negatives::None => row_dots(tape, q, k_pos)?,
        Negatives::Queue(queue) => {
            let pos = row_dots(tape, q, k_pos)?;
            let qd = tape.value(queue).shape().to_vec();
            if qd.len() != 2 || qd[1] != qs[1] {
                return Err(HexaError::Shape {
                    op: "contrastive_logits(queue)",
                    lhs: qs,
                    rhs: qd,
                });
            }
            if qd[0] == 0 {
                pos
            } else {
                let neg = dot_t(tape, q, queue)?;
                tape.concat_cols(&[pos, neg])?
            }
        }
    };
    Ok((tape.scale(logits, 1.0 / tau), vec![0; b]))
}

/// `B×1` matrix of row-wise dot products.
fn row_dots(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    let s = tape.sum_last(p)?;
    let rows = tape.value(s).numel();
    tape.reshape(s, &[rows, 1])
}

/// Per-row cross-entropy `-log_softmax(logits)[r, idx[r]]`, as a vector.
pub fn cross_entropy_rows(tape: &mut Tape, logits: Var, idx: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, idx)?;
    Ok(tape.neg(picked))
}

/// Mean cross-entropy against soft targets `y` (same shape as `logits`).
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, y: &Tensor) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if y.shape() != shape.as_slice() || shape.len() != 2 {
        return Err(HexaError::Shape {
            op: "soft_cross_entropy",
            lhs: shape,
            rhs: y.shape().to_vec(),
        });
    }
    let ls = tape.log_softmax(logits)?;
    let yv = tape.constant(y.clone());
    let prod = tape.mul(ls, yv)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / shape[0] as f32))
}

/// InfoNCE in its reduced form: only the positive's log-probability remains.
pub fn info_nce_reduced(tape: &mut Tape, q: Var, k_pos: Var, negatives: Negatives, tau: f32) -> Result<Var> {
    let rows = info_nce_rows(tape, q, k_pos, negatives, tau)?;
    tape.mean(rows)
}

/// Per-query InfoNCE values.
pub fn info_nce_rows(tape: &mut Tape, q: Var, k_pos: Var, negatives: Negatives, tau: f32) -> Result<Var> {
    let (logits, pos) = contrastive_logits(tape, q, k_pos, negatives, tau)?;
    cross_entropy_rows(tape, logits, &pos)
}

/// InfoNCE in its pseudo-label form `-Σ_k y_k log p_k`, with `y` a one-hot
/// matrix over the key columns of [`contrastive_logits`].
pub fn info_nce_full(
    tape: &mut Tape,
    q: Var,
    k_pos: Var,
    negatives: Negatives,
    y: &Tensor,
    tau: f32,
) -> Result<Var> {
    let (logits, _) = contrastive_logits(tape, q, k_pos, negatives, tau)?;
    soft_cross_entropy(tape, logits, y)
}

/// One-hot pseudo-labels matching [`contrastive_logits`]'s column layout.
pub fn contrastive_targets(batch: usize, negatives_len: usize, in_batch: bool) -> Tensor {
    let cols = if in_batch { batch } else { 1 + negatives_len };
    let mut y = Tensor::zeros(&[batch, cols]);
    for r in 0..batch {
        let c = if in_batch { r } else { 0 };
        y.row_mut(r)[c] = 1.0;
    }
    y
}

/// `z·Cᵀ / tau` for latents `z` (`B×d`) and prototypes `C` (`K×d`).
pub fn prototype_logits(tape: &mut Tape, z: Var, prototypes: Var, tau: f32) -> Result<Var> {
    check_tau(tau)?;
    let c = tape.value(prototypes).shape().to_vec();
    if c.len() != 2 || c[0] == 0 {
        return Err(HexaError::contract(format!(
            "prototype bank must be a non-empty K×d matrix, got {c:?}"
        )));
    }
    let s = dot_t(tape, z, prototypes)?;
    Ok(tape.scale(s, 1.0 / tau))
}

/// Per-row prototype cross-entropy against cluster indices.
pub fn prototype_rows(
    tape: &mut Tape,
    z: Var,
    prototypes: Var,
    assignments: &[usize],
    tau: f32,
) -> Result<Var> {
    let logits = prototype_logits(tape, z, prototypes, tau)?;
    cross_entropy_rows(tape, logits, assignments)
}

/// Prototype loss in its reduced form.
pub fn prototype_loss(tape: &mut Tape, z: Var, prototypes: Var, assignments: &[usize], tau: f32) -> Result<Var> {
    let rows = prototype_rows(tape, z, prototypes, assignments, tau)?;
    tape.mean(rows)
}

/// Prototype loss in its pseudo-label form against a `B×K` target matrix.
pub fn prototype_loss_full(tape: &mut Tape, z: Var, prototypes: Var, y: &Tensor, tau: f32) -> Result<Var> {
    let logits = prototype_logits(tape, z, prototypes, tau)?;
    soft_cross_entropy(tape, logits, y)
}

/// `mean_r(λ_r L(r, y_a) + (1 - λ_r) L(r, y_b))`, where `per_row` evaluates the
/// standard loss of every row of the mixed batch against the given targets
/// and returns a `B`-vector.
pub fn mixed_loss<F>(tape: &mut Tape, labels: &[MixedPseudoLabel], mut per_row: F) -> Result<Var>
where
    F: FnMut(&mut Tape, &[usize]) -> Result<Var>,
{
    if labels.is_empty() {
        return Err(HexaError::contract("mixed_loss on an empty batch"));
    }
    if let Some(l) = labels.iter().find(|l| !(0.0..=1.0).contains(&l.lambda)) {
        return Err(HexaError::contract(format!("mixing weight {} outside [0, 1]", l.lambda)));
    }
    let ya: Vec<usize> = labels.iter().map(|l| l.label_a).collect();
    let yb: Vec<usize> = labels.iter().map(|l| l.label_b).collect();
    let la = per_row(tape, &ya)?;
    let lb = per_row(tape, &yb)?;
    let wa = tape.constant(Tensor::from_vec(labels.iter().map(|l| l.lambda).collect()));
    let wb = tape.constant(Tensor::from_vec(labels.iter().map(|l| 1.0 - l.lambda).collect()));
    let a = tape.mul(la, wa)?;
    let b = tape.mul(lb, wb)?;
    let ma = tape.mean(a)?;
    let mb = tape.mean(b)?;
    tape.add(ma, mb)
}

/// Scalar form of the mixture for already evaluated losses.
pub fn mix_values(loss_a: f32, loss_b: f32, lambda: f32) -> f32 {
    lambda * loss_a + (1.0 - lambda) * loss_b
}

/// Contrastive loss of cut-mixed queries. Row `r` mixes images `r` and
/// `perm[r]`, so its two targets are those images' positive keys.
///
/// With a queue, each row sees the key set `[k_a, k_b, queue]`; with
/// `exclude_other_positive` the `b`-term drops `k_a` and vice versa. In-batch
/// mode scores against all batch keys.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_cutmix_loss(
    tape: &mut Tape,
    q_mix: Var,
    keys: Var,
    perm: &[usize],
    lambdas: &[f32],
    negatives: Negatives,
    tau: f32,
    exclude_other_positive: bool,
) -> Result<Var> {
    check_tau(tau)?;
    let b = tape.value(q_mix).shape()[0];
    if perm.len() != b || lambdas.len() != b {
        return Err(HexaError::contract("cutmix loss: permutation/lambda length differs from batch"));
    }
    let labels: Vec<MixedPseudoLabel> = (0..b)
        .map(|r| MixedPseudoLabel {
            label_a: r,
            label_b: perm[r],
            lambda: lambdas[r],
        })
        .collect();
    match negatives {
        Negatives::InBatch => {
            let s = dot_t(tape, q_mix, keys)?;
            let logits = tape.scale(s, 1.0 / tau);
            mixed_loss(tape, &labels, |tape, idx| cross_entropy_rows(tape, logits, idx))
        }
        Negatives::None | Negatives::Queue(_) => {
            let kb = tape.gather_rows(keys, perm)?;
            let pa = row_dots(tape, q_mix, keys)?;
            let pb = row_dots(tape, q_mix, kb)?;
            let neg = match negatives {
                Negatives::Queue(queue) if tape.value(queue).shape()[0] > 0 => Some(dot_t(tape, q_mix, queue)?),
                _ => None,
            };
            let build = |tape: &mut Tape, cols: &[Var]| -> Result<Var> {
                let mut parts = cols.to_vec();
                parts.extend(neg);
                let l = tape.concat_cols(&parts)?;
                Ok(tape.scale(l, 1.0 / tau))
            };
            if exclude_other_positive {
                let la_logits = build(tape, &[pa])?;
                let lb_logits = build(tape, &[pb])?;
                let zeros = vec![0; b];
                let mut stream = [la_logits, lb_logits].into_iter();
                mixed_loss(tape, &labels, |tape, _| {
                    let logits = stream.next().expect("mixed_loss evaluates two targets");
                    cross_entropy_rows(tape, logits, &zeros)
                })
            } else {
                let logits = build(tape, &[pa, pb])?;
                mixed_loss(tape, &labels, |tape, idx| {
                    let cols: Vec<usize> = idx
                        .iter()
                        .enumerate()
                        .map(|(r, &i)| if i == r { 0 } else { 1 })
                        .collect();
                    cross_entropy_rows(tape, logits, &cols)
                })
            }
        }
    }
}

/// `std + α1·adv + α2·cmx`. A term whose weight is zero, or which was not
/// computed, is not added at all, so zero weights reproduce `std` exactly.
pub fn hexa_combine(tape: &mut Tape, std: Var, adv: Option<Var>, cmx: Option<Var>, w: &HexaWeights) -> Result<Var> {
    w.validate()?;
    let mut total = std;
    for (name, term, alpha) in [("std", Some(std), 1.0), ("adv", adv, w.alpha1), ("cmx", cmx, w.alpha2)] {
        let Some(term) = term else { continue };
        let v = tape.value(term).item()?;
        if !v.is_finite() {
            return Err(HexaError::numeric(format!("{name} loss"), format!("non-finite value {v}")));
        }
        if name == "std" || alpha == 0.0 {
            continue;
        }
        let scaled = if alpha == 1.0 { term } else { tape.scale(term, alpha) };
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Scalar form of [`hexa_combine`].
pub fn hexa_combine_values(std: f32, adv: Option<f32>, cmx: Option<f32>, w: &HexaWeights) -> Result<f32> {
    w.validate()?;
    let mut total = std;
    for (name, term, alpha) in [("std", Some(std), 1.0), ("adv", adv, w.alpha1), ("cmx", cmx, w.alpha2)] {
        let Some(v) = term else { continue };
        if !v.is_finite() {
            return Err(HexaError::numeric(format!("{name} loss"), format!("non-finite value {v}")));
        }
        if name != "std" && alpha != 0.0 {
            total += alpha * v;
        }
    }
    Ok(total)
}
