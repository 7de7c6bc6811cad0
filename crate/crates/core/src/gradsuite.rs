//! Finite-difference checks over every tape primitive, the attention layers
//! and the end-to-end masked sequence loss of every design.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    directional_mask, feed_forward_block, multi_head_attention, transformer_decoder_unit, DecoderUnitParams,
};
use crate::error::{Error, Result};
use crate::model::{Design, ModelConfig, ModelParams, Region, Site};
use crate::numerics::{
    gradient_check_with, GradCheckOptions, GradCheckReport, Graph, Matrix, OpKind, Tape, Var,
};
use crate::params::{Initializer, ParamSource, ParamStore};

pub const TOLERANCE: f64 = 1e-4;

/// Random seeds per primitive.
pub const PRIMITIVE_SEEDS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteSize {
    Mini,
    Small,
}

impl SuiteSize {
    pub fn name(self) -> &'static str {
        match self {
            SuiteSize::Mini => "mini",
            SuiteSize::Small => "small",
        }
    }

    /// Rows, width, heads and feed-forward width of the layer checks.
    fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            SuiteSize::Mini => (3, 8, 2, 16),
            SuiteSize::Small => (5, 16, 4, 32),
        }
    }

    pub fn model(self, design: Design) -> ModelConfig {
        match self {
            SuiteSize::Mini => ModelConfig {
                feature_dim: 8,
                short_len: 4,
                long_len: 8,
                stage1_tokens: 2,
                stage2_tokens: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                heads: 2,
                classes: 3,
                ff_width: 16,
                design,
            },
            SuiteSize::Small => ModelConfig {
                feature_dim: 16,
                short_len: 6,
                long_len: 12,
                stage1_tokens: 4,
                stage2_tokens: 4,
                encoder_layers: 2,
                decoder_layers: 2,
                heads: 4,
                classes: 4,
                ff_width: 32,
                design,
            },
        }
    }
}

impl FromStr for SuiteSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(SuiteSize::Mini),
            "small" => Ok(SuiteSize::Small),
            other => Err(Error::Config(format!(
                "unknown size `{other}`, expected mini or small"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckGroup {
    Primitive,
    Layer,
    Loss,
}

impl fmt::Display for CheckGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckGroup::Primitive => "primitive",
            CheckGroup::Layer => "layer",
            CheckGroup::Loss => "loss",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub group: CheckGroup,
    pub name: String,
    pub seeds: usize,
    pub report: GradCheckReport,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.report.passes(TOLERANCE) && self.report.entries_checked > 0
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub size: SuiteSize,
    pub checks: Vec<SuiteCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(SuiteCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteCheck> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn worst(&self) -> Option<&SuiteCheck> {
        self.checks.iter().max_by(|a, b| {
            a.report
                .max_relative_error
                .total_cmp(&b.report.max_relative_error)
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<28} {:>12} {:>8} {:>6} {:>6}  status",
            "group", "check", "max_rel_err", "entries", "kinks", "tiny"
        );
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<10} {:<28} {:>12.3e} {:>8} {:>6} {:>6}  {}",
                c.group.to_string(),
                c.name,
                c.report.max_relative_error,
                c.report.entries_checked,
                c.report.skipped.len(),
                c.report.below_resolution,
                if c.passed() { "pass" } else { "FAIL" }
            );
        }
        if let Some(w) = self.worst() {
            let _ = write!(
                out,
                "worst: {} {} {:.3e}",
                w.group, w.name, w.report.max_relative_error
            );
            if let Some(e) = &w.report.worst {
                let _ = write!(
                    out,
                    " at input {} entry {} (analytic {:.6e}, numeric {:.6e})",
                    e.input, e.index, e.analytic, e.numeric
                );
            }
            out.push('\n');
        }
        let failed: Vec<&str> = self.failures().map(|c| c.name.as_str()).collect();
        if failed.is_empty() {
            let _ = writeln!(
                out,
                "result: pass, {} checks below {TOLERANCE:e}",
                self.checks.len()
            );
        } else {
            let _ = writeln!(out, "result: FAIL in {}", failed.join(", "));
        }
        out
    }
}

/// Folds several reports into one: the largest error wins.
fn merge(into: &mut GradCheckReport, other: GradCheckReport) {
    if other.max_relative_error > into.max_relative_error || into.worst.is_none() {
        into.max_relative_error = into.max_relative_error.max(other.max_relative_error);
        into.worst = other.worst;
    }
    into.skipped.extend(other.skipped);
    into.below_resolution += other.below_resolution;
    into.entries_checked += other.entries_checked;
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn check<G>(graph: G, inputs: &[Matrix], seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_with(graph, inputs, &GradCheckOptions { seed, fault })
}

/// A graph that records exactly one instance of `kind` besides its leaves.
pub fn check_primitive(
    kind: OpKind,
    size: SuiteSize,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let (r, w, _, _) = size.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut m = |rows, cols| random(&mut rng, rows, cols, -1.0, 1.0);
    match kind {
        OpKind::MatMul => check(
            |t, v| t.matmul(&v[0], &v[1]),
            &[m(r, r + 1), m(r + 1, w)],
            seed,
            fault,
        ),
        OpKind::MatMulNt => check(
            |t, v| t.matmul_nt(&v[0], &v[1]),
            &[m(r, w), m(r + 1, w)],
            seed,
            fault,
        ),
        OpKind::Add => check(|t, v| t.add(&v[0], &v[1]), &[m(r, w), m(r, w)], seed, fault),
        OpKind::AddRow => check(|t, v| t.add_row(&v[0], &v[1]), &[m(r, w), m(1, w)], seed, fault),
        OpKind::Scale => check(|t, v| Ok(t.scale(&v[0], -1.7)), &[m(r, w)], seed, fault),
        OpKind::Relu => check(|t, v| Ok(t.relu(&v[0])), &[m(r, w)], seed, fault),
        OpKind::Softmax => {
            let mask = directional_mask(r)?;
            let scores = m(r, r).scale(3.0);
            check(|t, v| t.softmax_rows(&v[0], Some(&mask)), &[scores], seed, fault)
        }
        OpKind::LayerNorm => {
            let gain = m(1, w).map(|x| x + 1.0);
            check(
                |t, v| t.layer_norm(&v[0], &v[1], &v[2], 1e-5),
                &[m(r, w), gain, m(1, w)],
                seed,
                fault,
            )
        }
        OpKind::SliceCols => check(|t, v| t.slice_cols(&v[0], 1, w - 2), &[m(r, w)], seed, fault),
        OpKind::SliceRows => check(|t, v| t.slice_rows(&v[0], 1, r), &[m(r + 2, w)], seed, fault),
        OpKind::ConcatCols => check(
            |t, v| t.concat_cols(&[v[0], v[1]]),
            &[m(r, w), m(r, 2)],
            seed,
            fault,
        ),
        OpKind::ConcatRows => check(
            |t, v| t.concat_rows(&[v[0], v[1]]),
            &[m(r, w), m(2, w)],
            seed,
            fault,
        ),
        OpKind::MeanRows => check(|t, v| Ok(t.mean_rows(&v[0])), &[m(r, w)], seed, fault),
        OpKind::Nll => {
            // Positive inputs well above the probability floor.
            let probs = m(r, w).map(|x| 0.55 + 0.45 * x);
            let labels: Vec<usize> = (0..r).map(|i| (3 * i + 1) % w).collect();
            check(|t, v| t.nll(&v[0], &labels), &[probs], seed, fault)
        }
        OpKind::Sum => check(|t, v| Ok(t.sum(v[0])), &[m(r, w)], seed, fault),
        OpKind::WeightedSum => {
            let weights = m(r, w);
            check(
                |t, v| t.weighted_sum(v[0], weights.clone()),
                &[m(r, w)],
                seed,
                fault,
            )
        }
    }
}

/// Unit weights with every bias and norm parameter perturbed, so no weight
/// sits at a special value.
fn unit_params(
    width: usize,
    heads: usize,
    ff: usize,
    cross: bool,
    seed: u64,
) -> Result<(DecoderUnitParams, ParamStore)> {
    let mut src = Box::new(Initializer::new(seed));
    let unit = DecoderUnitParams::build(src.as_mut(), "unit", width, heads, ff, cross)?;
    let mut store = src.into_store()?;
    jitter(&mut store, seed);
    Ok((unit, store))
}

fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for m in store.values_mut().filter(|m| m.rows() == 1) {
        for v in m.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

const LAYERS: [&str; 5] = [
    "attention.self_masked",
    "attention.cross",
    "feed_forward",
    "decoder_unit",
    "encoder_unit",
];

fn check_layer(name: &str, size: SuiteSize, seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let (r, w, h, ff) = size.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e);
    let x = random(&mut rng, r, w, -1.0, 1.0);
    let memory = random(&mut rng, r + 2, w, -1.0, 1.0);
    let cross = name != "encoder_unit";
    let (unit, store) = unit_params(w, h, ff, cross, seed)?;
    let mask = directional_mask(r)?;
    let mut inputs = vec![x, memory];
    inputs.extend(store.iter().map(|(_, m)| m.clone()));
    let site = Site::self_attn(Region::Other);
    let graph = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        t.set_param_vars(v[2..].to_vec());
        match name {
            "attention.self_masked" => {
                multi_head_attention(t, &v[0], &v[0], &v[0], Some(&mask), &unit.self_attn, h, site)
            }
            "attention.cross" => {
                let c = unit.cross.as_ref().expect("cross block");
                multi_head_attention(
                    t,
                    &v[0],
                    &v[1],
                    &v[1],
                    None,
                    &c.attn,
                    h,
                    Site::cross(Region::Other),
                )
            }
            "feed_forward" => feed_forward_block(t, &v[0], &unit),
            "decoder_unit" => {
                transformer_decoder_unit(t, &v[0], Some(&v[1]), Some(&mask), &unit, Region::Other)
            }
            "encoder_unit" => transformer_decoder_unit(t, &v[0], None, Some(&mask), &unit, Region::Other),
            other => Err(Error::Config(format!("unknown layer {other}"))),
        }
    };
    check(graph, &inputs, seed, fault)
}

/// The masked sequence loss of one design, differentiated with respect to
/// every parameter and both memory views.
pub fn check_sequence_loss(
    design: Design,
    size: SuiteSize,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let config = size.model(design);
    let mut params = ModelParams::init(&config, seed)?;
    jitter(params.store_mut(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7055);
    let long = random(&mut rng, config.long_len, config.feature_dim, -1.0, 1.0);
    let short = random(&mut rng, config.short_len, config.feature_dim, -1.0, 1.0);
    let labels: Vec<usize> = (0..config.short_len)
        .map(|_| rng.random_range(0..=config.classes))
        .collect();
    let mut inputs = vec![long, short];
    inputs.extend(params.store().iter().map(|(_, m)| m.clone()));
    check(
        |t, v| {
            t.set_param_vars(v[2..].to_vec());
            let probs = params.layout().forward(t, &v[0], &v[1], true)?;
            let rows = t.shape(&probs).0;
            t.nll(&probs, crate::training::target_labels(rows, &labels))
        },
        &inputs,
        seed,
        fault,
    )
}

/// Runs every check. `fault` corrupts one backward rule everywhere.
pub fn run_gradient_suite(size: SuiteSize, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for kind in OpKind::ALL {
        let mut report = GradCheckReport::default();
        for seed in 0..PRIMITIVE_SEEDS {
            merge(&mut report, check_primitive(kind, size, seed, fault)?);
        }
        checks.push(SuiteCheck {
            group: CheckGroup::Primitive,
            name: kind.name().to_string(),
            seeds: PRIMITIVE_SEEDS as usize,
            report,
        });
    }
    for name in LAYERS {
        let mut report = GradCheckReport::default();
        for seed in 0..2 {
            merge(&mut report, check_layer(name, size, seed, fault)?);
        }
        checks.push(SuiteCheck {
            group: CheckGroup::Layer,
            name: name.to_string(),
            seeds: 2,
            report,
        });
    }
    for design in Design::ALL {
        checks.push(SuiteCheck {
            group: CheckGroup::Loss,
            name: format!("sequence_loss.{}", design.name()),
            seeds: 1,
            report: check_sequence_loss(design, size, 1, fault)?,
        });
    }
    Ok(SuiteReport { size, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_records_only_itself() {
        for kind in OpKind::ALL {
            let report = check_primitive(kind, SuiteSize::Mini, 0, None).unwrap();
            assert!(report.passes(TOLERANCE), "{}: {report:?}", kind.name());
            assert!(report.entries_checked > 0, "{}", kind.name());
            // Corrupting any other rule leaves the check clean.
            let other = OpKind::ALL.into_iter().find(|&k| k != kind).unwrap();
            let clean = check_primitive(kind, SuiteSize::Mini, 0, Some(other)).unwrap();
            assert_eq!(
                clean.max_relative_error,
                report.max_relative_error,
                "{}",
                kind.name()
            );
        }
    }

    #[test]
    fn primitives_pass_over_ten_seeds() {
        for kind in OpKind::ALL {
            for seed in 0..PRIMITIVE_SEEDS {
                let report = check_primitive(kind, SuiteSize::Mini, seed, None).unwrap();
                assert!(
                    report.passes(TOLERANCE),
                    "{} seed {seed}: {report:?}",
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn each_corrupted_primitive_is_caught_by_its_own_check() {
        for kind in OpKind::ALL {
            let bad = check_primitive(kind, SuiteSize::Mini, 3, Some(kind)).unwrap();
            assert!(!bad.passes(TOLERANCE), "{} fault went unnoticed", kind.name());
        }
    }

    #[test]
    fn layers_pass() {
        for name in LAYERS {
            let report = check_layer(name, SuiteSize::Mini, 0, None).unwrap();
            assert!(report.passes(TOLERANCE), "{name}: {report:?}");
        }
    }

    #[test]
    fn merge_keeps_the_worst() {
        let mut a = GradCheckReport::default();
        let mut b = GradCheckReport {
            max_relative_error: 0.5,
            entries_checked: 3,
            below_resolution: 1,
            ..Default::default()
        };
        merge(&mut a, b.clone());
        b.max_relative_error = 0.1;
        merge(&mut a, b);
        assert_eq!(a.max_relative_error, 0.5);
        assert_eq!(a.entries_checked, 6);
        assert_eq!(a.below_resolution, 2);
    }

    #[test]
    fn sizes_parse() {
        assert_eq!("mini".parse::<SuiteSize>().unwrap(), SuiteSize::Mini);
        assert_eq!("small".parse::<SuiteSize>().unwrap(), SuiteSize::Small);
        assert!("huge".parse::<SuiteSize>().is_err());
        for size in [SuiteSize::Mini, SuiteSize::Small] {
            for d in Design::ALL {
                size.model(d).validate().unwrap();
            }
        }
    }
}
