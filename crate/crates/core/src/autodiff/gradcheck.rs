//! Central finite-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Result, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    /// Entries skipped because a ReLU or pooling branch switched within `±h`.
    pub kinked: usize,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over the checked entries.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    /// Max-pool windows whose two largest values were within `2h`.
    pub tie_windows: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn kinked(&self) -> usize {
        self.entries.iter().map(|e| e.kinked).sum()
    }

    pub fn has_tie_warning(&self) -> bool {
        self.tie_windows > 0
    }
}

/// Compares tape gradients against central differences.
///
/// Non-scalar graph outputs are reduced to `sum(output ⊙ R)` with a fixed
/// random `R`, so every output element contributes. All parameters in
/// `params` and all `inputs` are checked.
pub fn grad_check<G: Graph<f64> + ?Sized>(
    graph: &G,
    params: &ParamStore<f64>,
    inputs: &[(String, Tensor<f64>)],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;

    let mut projection: Option<Tensor<f64>> = None;
    let mut evaluate = |params: &ParamStore<f64>,
                        inputs: &[(String, Tensor<f64>)],
                        with_ties: bool|
     -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        if with_ties {
            tape = tape.with_tie_tolerance(2.0 * h);
        }
        let out = tape.forward_with_input_grads(graph, params, inputs.iter().cloned())?;
        let value = tape.value(out);
        if value.len() == 1 {
            return Ok((tape, out));
        }
        let r = projection
            .get_or_insert_with(|| {
                let mut prng = ChaCha8Rng::seed_from_u64(0x5eed);
                Tensor::from_fn(value.shape(), |_| prng.gen_range(-1.0..1.0))
            })
            .clone();
        let r = tape.constant(r)?;
        let p = tape.mul(out, r)?;
        let loss = tape.sum(p)?;
        Ok((tape, loss))
    };

    let (tape, loss) = evaluate(params, inputs, true)?;
    let tie_windows = tape.tie_warnings().iter().map(|w| w.windows).sum();
    let base = tape.switch_pattern();
    let analytic = tape.backward(loss)?;
    drop(tape);

    // Central difference, or `None` when a branch switches inside the stencil.
    let mut scalar =
        |params: &ParamStore<f64>, inputs: &[(String, Tensor<f64>)]| -> Result<Option<f64>> {
            let (tape, loss) = evaluate(params, inputs, false)?;
            Ok((tape.switch_pattern() == base).then(|| tape.value(loss).data()[0]))
        };

    let mut entries = Vec::new();
    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.max_entries {
            Some(m) if m < len => {
                let mut v = sample(rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let grad = analytic.params[&name].clone();
        let idx = pick(grad.len(), &mut rng);
        let mut work = params.clone();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = scalar(&work, inputs)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = scalar(&work, inputs)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            numeric.push(up.zip(down).map(|(u, d)| (u - d) / (2.0 * h)));
        }
        entries.push(compare(&name, &grad, &idx, &numeric));
    }

    for (k, (name, _)) in inputs.iter().enumerate() {
        let Some(grad) = analytic.inputs.get(name).cloned() else {
            continue;
        };
        let idx = pick(grad.len(), &mut rng);
        let mut work = inputs.to_vec();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work[k].1.data()[i];
            work[k].1.data_mut()[i] = orig + h;
            let up = scalar(params, &work)?;
            work[k].1.data_mut()[i] = orig - h;
            let down = scalar(params, &work)?;
            work[k].1.data_mut()[i] = orig;
            numeric.push(up.zip(down).map(|(u, d)| (u - d) / (2.0 * h)));
        }
        entries.push(compare(&format!("input:{name}"), &grad, &idx, &numeric));
    }

    Ok(GradCheckReport {
        entries,
        tolerance: opts.tolerance,
        tie_windows,
    })
}

fn compare(
    name: &str,
    analytic: &Tensor<f64>,
    idx: &[usize],
    numeric: &[Option<f64>],
) -> GradCheckEntry {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut kinked = 0;
    for (&i, n) in idx.iter().zip(numeric) {
        let Some(&n) = n.as_ref() else {
            kinked += 1;
            continue;
        };
        let a = analytic.data()[i];
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    let max_rel_error = if scale < 1e-12 { diff } else { diff / scale };
    GradCheckEntry {
        name: name.to_string(),
        checked: idx.len() - kinked,
        kinked,
        max_rel_error,
    }
}
