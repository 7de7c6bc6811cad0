use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::tape::{OpKind, Tape, Var};
use crate::error::Result;

/// Loss, rounding magnitude and branch pattern of one evaluation.
type Eval = (f64, f64, Vec<bool>);

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Relative-error floor in the denominator.
const REL_FLOOR: f64 = 1e-8;

/// Multiple of machine epsilon that bounds rounding in one loss evaluation.
const ROUNDING_ULPS: f64 = 64.0;

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Corrupts one backward rule; used to prove the checker catches it.
    pub fault: Option<OpKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<EntryError>,
    /// Entries sitting on a non-differentiable point, as `(input, index)`.
    pub skipped: Vec<(usize, usize)>,
    /// Entries whose analytic and numeric gradients are both below what a
    /// central difference can resolve (structurally zero gradients, such as
    /// a key bias under softmax).
    pub below_resolution: usize,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares reverse-mode gradients of `graph` against central finite
/// differences.
///
/// The graph output is reduced to a scalar as `Σ w ∘ out`, with weights
/// drawn uniformly from `[0.5, 1.5)` using `seed`; a plain sum would make
/// some graphs (a layer norm without affine, a softmax) identically
/// constant.
pub fn gradient_check<G>(graph: G, inputs: &[Matrix], seed: u64) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_with(
        graph,
        inputs,
        &GradCheckOptions {
            seed,
            ..Default::default()
        },
    )
}

pub fn gradient_check_with<G>(
    graph: G,
    inputs: &[Matrix],
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // The scalar loss is `Σ w ∘ out`; backward is seeded with `w` directly so
    // the reduction never passes through a (possibly corrupted) primitive.
    // Returns the loss, `Σ |w ∘ out|` (the magnitude its rounding scales
    // with) and the branch pattern.
    let run = |values: &[Matrix]| -> Result<(Tape, Vec<Var>, Var, Matrix, Eval)> {
        let mut tape = Tape::new();
        if let Some(kind) = options.fault {
            tape.corrupt_backward(kind);
        }
        let vars: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        let (r, c) = crate::numerics::Graph::shape(&tape, &out);
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let weights = Matrix::from_fn(r, c, |_, _| rng.random_range(0.5..1.5));
        let value = crate::numerics::Graph::value(&tape, &out);
        let terms = value.data().iter().zip(weights.data()).map(|(x, w)| x * w);
        let loss = terms.clone().sum();
        let magnitude = terms.map(f64::abs).sum();
        let pattern = tape.branch_pattern();
        Ok((tape, vars, out, weights, (loss, magnitude, pattern)))
    };
    let loss_at = |values: &[Matrix]| -> Result<Eval> { Ok(run(values)?.4) };

    let (tape, vars, out, weights, (_, _, base_pattern)) = run(inputs)?;
    let grads = tape.backward_from(out, weights)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].shape());
        for e in 0..inputs[i].data().len() {
            let x0 = inputs[i].data()[e];
            work[i].data_mut()[e] = x0 + FD_STEP;
            let (plus, plus_mag, plus_pattern) = loss_at(&work)?;
            work[i].data_mut()[e] = x0 - FD_STEP;
            let (minus, minus_mag, minus_pattern) = loss_at(&work)?;
            work[i].data_mut()[e] = x0;

            // The stencil straddles a kink: the difference is meaningless.
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                report.skipped.push((i, e));
                continue;
            }

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let resolution = ROUNDING_ULPS * f64::EPSILON * (plus_mag + minus_mag) / (2.0 * FD_STEP);
            if a.abs() < resolution && numeric.abs() < resolution {
                report.below_resolution += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some(EntryError {
                    input: i,
                    index: e,
                    analytic: a,
                    numeric,
                    relative_error: rel,
                });
            }
        }
    }
    Ok(report)
}
