//! Minibatch gradient plumbing shared by every training stage.

use crate::nn::Params;
use crate::parallel::{self, ExecMode};
use crate::tensor::{Optimizer, Tape, TensorError, Var};

/// Mean loss and mean gradient of a minibatch, one slot per parameter in
/// [`Params::visit`] order. Frozen or unused parameters have `None`.
#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub loss: f64,
    pub weight: f64,
    pub grads: Vec<Option<Vec<f64>>>,
}

struct Acc {
    loss: f64,
    weight: f64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Acc {
    fn add_scaled(&mut self, i: usize, g: &[f64], w: f64) {
        let slot = self.grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in slot.iter_mut().zip(g) {
            *a += w * b;
        }
    }

    fn merge(mut self, other: Acc) -> Acc {
        self.loss += other.loss;
        self.weight += other.weight;
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.add_scaled(i, &g, 1.0);
            }
        }
        self
    }
}

/// Builds one tape per item; `f` returns the item's loss node and weight,
/// or `None` to skip the item. The result is the weight-averaged loss and
/// gradient, or `None` when every item was skipped.
pub fn batch_gradients<M, T, F>(model: &M, items: &[T], mode: ExecMode, f: F) -> Result<Option<BatchGrad>, TensorError>
where
    M: Params + Sync,
    T: Sync,
    F: for<'m> Fn(&mut Tape<'m>, &'m M, &T) -> Result<Option<(Var, f64)>, TensorError> + Sync + Send,
{
    let n_params = model.named_params().len();
    let init = || {
        Ok(Acc {
            loss: 0.0,
            weight: 0.0,
            grads: vec![None; n_params],
        })
    };
    let acc = parallel::chunked_reduce(
        mode,
        items,
        init,
        |acc: Result<Acc, TensorError>, _, item| {
            let mut acc = acc?;
            let mut tape = Tape::new();
            let Some((loss, w)) = f(&mut tape, model, item)? else {
                return Ok(acc);
            };
            let grads = tape.backward(loss)?;
            acc.loss += w * tape.value(loss)[0];
            acc.weight += w;
            for (i, (_, t)) in model.named_params().into_iter().enumerate() {
                if let Some(g) = grads.get(t) {
                    acc.add_scaled(i, g, w);
                }
            }
            Ok(acc)
        },
        |a, b| Ok(a?.merge(b?)),
    )?;
    if acc.weight == 0.0 {
        return Ok(None);
    }
    let inv = 1.0 / acc.weight;
    let grads = acc
        .grads
        .into_iter()
        .map(|g| g.map(|v| v.into_iter().map(|x| x * inv).collect()))
        .collect();
    Ok(Some(BatchGrad {
        loss: acc.loss * inv,
        weight: acc.weight,
        grads,
    }))
}

/// Loads the batch gradient into every trainable parameter (zeros where
/// none was produced) and takes one optimizer step over exactly those.
pub fn apply_step<M: Params>(model: &mut M, batch: BatchGrad, opt: &mut Optimizer) -> Result<(), TensorError> {
    let mut trainable = Vec::new();
    for (p, g) in model.params_mut().into_iter().zip(batch.grads) {
        if !p.requires_grad() {
            continue;
        }
        match g {
            Some(g) => p.accumulate_grad(&g)?,
            None => p.ensure_grad(),
        }
        trainable.push(p);
    }
    opt.step(&mut trainable)
}

/// Freezes everything, then unfreezes the parameters whose names start with
/// one of `prefixes`.
pub fn select_trainable<M: Params>(model: &mut M, prefixes: &[&str]) {
    model.visit_mut("", &mut |name, t| {
        let on = prefixes.iter().any(|p| name == *p || name.starts_with(&format!("{p}.")));
        t.set_requires_grad(on);
    });
}
