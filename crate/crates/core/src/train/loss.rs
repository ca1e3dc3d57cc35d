//! Consistency-training and exact-score consistency-matching objectives.

use crate::consistency::ConsistencyModel;
use crate::error::{invalid, Error, Result};
use crate::metrics::Metric;
use crate::net::{DropoutState, Mode};
use crate::scalar::Scalar;
use crate::schedules::{NoiseGrid, WeightingFn};
use crate::synthetic::ScoreSource;

/// One minibatch: data points, the shared normal draws, and lower indices
/// `i` (1-based; the pair is `(sigma_i, sigma_{i+1})`).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T> {
    pub grid: &'a NoiseGrid<T>,
    pub x: &'a [Vec<T>],
    pub z: &'a [Vec<T>],
    pub i: &'a [usize],
    /// Dropout identity for this step; element `b` uses `drop.for_element(b)`
    /// in both the student and the teacher pass. `None` evaluates in eval mode.
    pub drop: Option<DropoutState>,
}

/// Loss ingredients that stay fixed over a run.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<T> {
    pub metric: Metric<T>,
    pub weighting: WeightingFn,
}

/// Per-element record of what the two passes saw.
#[derive(Debug, Clone)]
pub struct PairTrace<T> {
    pub student_input: Vec<T>,
    pub teacher_input: Vec<T>,
    pub sigma_student: T,
    pub sigma_teacher: T,
    pub student_masks: Vec<Vec<T>>,
    pub teacher_masks: Vec<Vec<T>>,
}

enum Target<'a, T> {
    Ct,
    Cm(&'a dyn ScoreSource<T>),
}

fn check_batch<T: Scalar>(model: &ConsistencyModel<T>, batch: &Batch<'_, T>) -> Result<()> {
    let b = batch.x.len();
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    for (name, len) in [("z", batch.z.len()), ("i", batch.i.len())] {
        if len != b {
            return Err(invalid(format!("batch {name} has {len} rows, x has {b}")));
        }
    }
    let d = model.network().data_dim();
    for row in batch.x.iter().chain(batch.z) {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
    }
    let n = batch.grid.len();
    for &i in batch.i {
        if i < 1 || i >= n {
            return Err(Error::IndexOutOfRange {
                index: i,
                lo: 1,
                hi: n - 1,
            });
        }
    }
    Ok(())
}

fn pair_loss<T: Scalar>(
    model: &ConsistencyModel<T>,
    teacher: &[T],
    spec: &LossSpec<T>,
    batch: &Batch<'_, T>,
    target: Target<'_, T>,
    mut trace: Option<&mut Vec<PairTrace<T>>>,
) -> Result<(T, Vec<T>)> {
    check_batch(model, batch)?;
    let nb = T::from_usize_exact(batch.x.len());
    let mode = if batch.drop.is_some() { Mode::Train } else { Mode::Eval };
    let mut grad = vec![T::zero(); model.network().param_count()];
    let mut total = T::zero();
    for (b, ((x, z), &i)) in batch.x.iter().zip(batch.z).zip(batch.i).enumerate() {
        let s_lo = batch.grid.sigma(i);
        let s_hi = batch.grid.sigma(i + 1);
        let x_hi: Vec<T> = x.iter().zip(z).map(|(&a, &e)| a + s_hi * e).collect();
        let x_lo: Vec<T> = match target {
            Target::Ct => x.iter().zip(z).map(|(&a, &e)| a + s_lo * e).collect(),
            Target::Cm(score) => {
                let g = score.score(&x_hi, s_hi)?;
                let step = (s_lo - s_hi) * s_hi;
                x_hi.iter().zip(&g).map(|(&a, &s)| a - step * s).collect()
            }
        };
        let drop = batch.drop.map(|d| d.for_element(b as u64));
        let (student, tape) = model.forward(&x_hi, s_hi, mode, drop.as_ref())?;
        let teacher_out = match trace.as_deref_mut() {
            Some(rows) => {
                let (out, t_tape) = model.traced_with(teacher, &x_lo, s_lo, mode, drop.as_ref())?;
                rows.push(PairTrace {
                    student_input: x_hi.clone(),
                    teacher_input: x_lo.clone(),
                    sigma_student: s_hi,
                    sigma_teacher: s_lo,
                    student_masks: tape.network_tape().masks().to_vec(),
                    teacher_masks: t_tape.masks().to_vec(),
                });
                out
            }
            None => model.output_with(teacher, &x_lo, s_lo, mode, drop.as_ref())?,
        };
        let (d, g) = spec.metric.value_grad(&student, &teacher_out)?;
        let lambda = spec.weighting.weight(batch.grid, i)?;
        total += lambda * d;
        let scale = lambda / nb;
        let up: Vec<T> = g.into_iter().map(|v| v * scale).collect();
        model.backward_accumulate(&tape, &up, &mut grad)?;
    }
    Ok((total / nb, grad))
}

/// Mean over the batch of `lambda(sigma_i) d(f(x + sigma_{i+1} z, sigma_{i+1}),
/// f_teacher(x + sigma_i z, sigma_i))`, and its gradient with respect to the
/// student parameters only.
pub fn ct_loss_and_grad<T: Scalar>(
    model: &ConsistencyModel<T>,
    teacher: &[T],
    spec: &LossSpec<T>,
    batch: &Batch<'_, T>,
) -> Result<(T, Vec<T>)> {
    pair_loss(model, teacher, spec, batch, Target::Ct, None)
}

/// [`ct_loss_and_grad`] plus a per-element trace of both passes.
pub fn ct_loss_traced<T: Scalar>(
    model: &ConsistencyModel<T>,
    teacher: &[T],
    spec: &LossSpec<T>,
    batch: &Batch<'_, T>,
) -> Result<(T, Vec<T>, Vec<PairTrace<T>>)> {
    let mut rows = Vec::with_capacity(batch.x.len());
    let (l, g) = pair_loss(model, teacher, spec, batch, Target::Ct, Some(&mut rows))?;
    Ok((l, g, rows))
}

/// Consistency matching against one reverse Euler step of the probability-flow
/// ODE taken with an exact score.
pub fn cm_loss_exact_and_grad<T: Scalar>(
    model: &ConsistencyModel<T>,
    teacher: &[T],
    spec: &LossSpec<T>,
    score: &dyn ScoreSource<T>,
    batch: &Batch<'_, T>,
) -> Result<(T, Vec<T>)> {
    if score.dim() != model.network().data_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.network().data_dim(),
            got: score.dim(),
        });
    }
    pair_loss(model, teacher, spec, batch, Target::Cm(score), None)
}
