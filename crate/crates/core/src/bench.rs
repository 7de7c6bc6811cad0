//! Design comparison: parameter counts, instrumented attention MACs per step
//! and, optionally, accuracy on the synthetic long-dependency task.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{count_macs, Design, MacCounters, MacMode, ModelConfig, ModelParams};
use crate::numerics::Matrix;
use crate::streaming::StreamingEngine;
use crate::training::{fit, newest_frame_accuracy, LabeledSequence, TrainConfig};

/// Long-memory lengths of the assembly sweep.
pub const SWEEP_LONG_LENS: [usize; 3] = [128, 512, 2048];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchDesign {
    Model(Design),
    /// Two-stage weights run through the cached streaming engine.
    CachedStreaming,
}

impl BenchDesign {
    pub const ALL: [BenchDesign; 6] = [
        BenchDesign::Model(Design::EncoderOnly),
        BenchDesign::Model(Design::DecoderOnly),
        BenchDesign::Model(Design::OneStage),
        BenchDesign::Model(Design::TwoStage),
        BenchDesign::Model(Design::NoDecoder),
        BenchDesign::CachedStreaming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchDesign::Model(d) => d.name(),
            BenchDesign::CachedStreaming => "cached-streaming",
        }
    }

    /// Design whose weights this row uses.
    pub fn design(self) -> Design {
        match self {
            BenchDesign::Model(d) => d,
            BenchDesign::CachedStreaming => Design::TwoStage,
        }
    }

    /// Closed form matching the implemented design, if any.
    pub fn closed_form(self) -> Option<MacMode> {
        match self {
            BenchDesign::Model(Design::OneStage) => Some(MacMode::StackedDecoder),
            BenchDesign::Model(Design::TwoStage) => Some(MacMode::TwoStage),
            BenchDesign::CachedStreaming => Some(MacMode::StreamingAmortized),
            BenchDesign::Model(_) => None,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::name).join(", ")
    }
}

impl FromStr for BenchDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown design `{s}`; valid: {}", Self::valid_names())))
    }
}

/// Comma-separated design names, or `all`.
pub fn parse_designs(list: &str) -> Result<Vec<BenchDesign>> {
    if list.trim() == "all" {
        return Ok(BenchDesign::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let d: BenchDesign = name.parse()?;
        if !out.contains(&d) {
            out.push(d);
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no designs given; valid: {}",
            BenchDesign::valid_names()
        )));
    }
    Ok(out)
}

/// Data and schedule for the optional accuracy column.
#[derive(Clone, Debug)]
pub struct BenchTraining {
    pub train: TrainConfig,
    pub train_set: Vec<LabeledSequence>,
    pub test_set: Vec<LabeledSequence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub design: BenchDesign,
    pub params: usize,
    pub counters: MacCounters,
    /// Newest-frame accuracy on held-out action frames.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepRow {
    pub long_len: usize,
    /// Stage-1 weight multiplies of one cached step.
    pub cached_mults: u64,
    pub cached_adds: u64,
    /// Stage-1 weight multiplies of one full recomputation.
    pub reference_mults: u64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub config: ModelConfig,
    pub rows: Vec<BenchRow>,
}

pub const TSV_HEADER: &str = "design\tparams\tscore_macs\tencoder_score_macs\tweighted_macs\tstage1_weight_mults\tassembly_adds\tclosed_form\tclosed_form_macs\taccuracy";

impl BenchReport {
    /// One header line and one row per design.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let c = &r.counters;
            let (form, macs) = match r.design.closed_form() {
                Some(m) => (
                    m.name().to_string(),
                    count_macs(&self.config_for(r.design), m).to_string(),
                ),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.design.name(),
                r.params,
                c.total_scores(),
                c.encoder_scores(),
                c.total_weighted(),
                c.stage1_weight_mults(),
                c.assembly_adds,
                form,
                macs,
                r.accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            );
        }
        out
    }

    fn config_for(&self, d: BenchDesign) -> ModelConfig {
        ModelConfig {
            design: d.design(),
            ..self.config.clone()
        }
    }
}

fn random_frames(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Counters of one full-window forward pass (memories full).
pub fn measure_window(params: &ModelParams, seed: u64) -> Result<MacCounters> {
    let c = params.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let long = random_frames(&mut rng, c.long_len, c.feature_dim);
    let short = random_frames(&mut rng, c.short_len, c.feature_dim);
    let (_, counters) = params.inference::<f64>().predict_counted(&long, &short, true)?;
    Ok(counters)
}

/// Counters of one cached step once both memories are full: the frame
/// update plus the prediction.
pub fn measure_cached_step(params: &ModelParams, seed: u64) -> Result<MacCounters> {
    let c = params.config();
    let mut engine = StreamingEngine::<f64>::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..c.short_len + c.long_len {
        engine.push(random_frames(&mut rng, 1, c.feature_dim).data())?;
    }
    engine.step(random_frames(&mut rng, 1, c.feature_dim).data())?;
    Ok(engine.last_counters().clone())
}

/// Stage-1 weight work per step for each long-memory length, cached
/// versus full recomputation.
pub fn assembly_sweep(config: &ModelConfig, long_lens: &[usize], seed: u64) -> Result<Vec<SweepRow>> {
    long_lens
        .iter()
        .map(|&long_len| {
            let config = ModelConfig {
                long_len,
                design: Design::TwoStage,
                ..config.clone()
            };
            let params = ModelParams::init(&config, seed)?;
            let mut engine = StreamingEngine::<f64>::new(&params)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..config.short_len + long_len {
                engine.push(random_frames(&mut rng, 1, config.feature_dim).data())?;
            }
            engine.push(random_frames(&mut rng, 1, config.feature_dim).data())?;
            let mut cached = engine.last_counters().clone();
            let (_, predict) = engine.cached_prediction()?;
            cached.merge(&predict);
            let (_, reference) = engine.reference_prediction()?;
            Ok(SweepRow {
                long_len,
                cached_mults: cached.stage1_weight_mults(),
                cached_adds: cached.assembly_adds,
                reference_mults: reference.stage1_weight_mults(),
            })
        })
        .collect()
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("long_len\tcached_stage1_mults\tcached_assembly_adds\treference_stage1_mults\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.long_len, r.cached_mults, r.cached_adds, r.reference_mults
        );
    }
    out
}

/// Newest-frame accuracy of the cached engine, streaming each sequence
/// from its first frame and scoring action frames.
pub fn streaming_accuracy(params: &ModelParams, data: &[LabeledSequence]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for seq in data {
        let mut engine = StreamingEngine::<f64>::new(params)?;
        for t in 0..seq.len() {
            if seq.labels[t] == 0 {
                engine.push(seq.features.row(t))?;
                continue;
            }
            let pred = engine.step(seq.features.row(t))?;
            hit += (pred.newest_class() == seq.labels[t]) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoPositives);
    }
    Ok(hit as f64 / total as f64)
}

/// Measures every requested design, training each first when `training`
/// is given. Designs run in parallel, each with private state.
pub fn run_bench(
    config: &ModelConfig,
    designs: &[BenchDesign],
    training: Option<&BenchTraining>,
    seed: u64,
) -> Result<BenchReport> {
    config.validate()?;
    let build = |design: Design| -> Result<ModelParams> {
        let config = ModelConfig {
            design,
            ..config.clone()
        };
        match training {
            Some(t) => Ok(fit(&t.train_set, &t.train, &config)?.0),
            None => ModelParams::init(&config, seed),
        }
    };
    // Cached streaming reuses the two-stage weights.
    let mut needed: Vec<Design> = designs.iter().map(|d| d.design()).collect();
    needed.sort_by_key(|d| d.code());
    needed.dedup();
    let built: Vec<(Design, ModelParams)> = crate::training::thread_pool()?.install(|| {
        needed
            .par_iter()
            .map(|&d| Ok((d, build(d)?)))
            .collect::<Result<Vec<_>>>()
    })?;
    let params_of = |d: Design| &built.iter().find(|(k, _)| *k == d).expect("built").1;
    let rows = crate::training::thread_pool()?.install(|| {
        designs
            .par_iter()
            .map(|&design| {
                let params = params_of(design.design());
                let counters = match design {
                    BenchDesign::Model(_) => measure_window(params, seed)?,
                    BenchDesign::CachedStreaming => measure_cached_step(params, seed)?,
                };
                let accuracy = match (training, design) {
                    (None, _) => None,
                    (Some(t), BenchDesign::CachedStreaming) => Some(streaming_accuracy(params, &t.test_set)?),
                    (Some(t), BenchDesign::Model(_)) => {
                        Some(newest_frame_accuracy(params, &t.test_set, 1, |y| y != 0)?)
                    }
                };
                Ok(BenchRow {
                    design,
                    params: params.param_count(),
                    counters,
                    accuracy,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(BenchReport {
        config: config.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Region;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 16,
            short_len: 4,
            long_len: 24,
            stage1_tokens: 4,
            stage2_tokens: 6,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 4,
            classes: 3,
            ff_width: 32,
            design: Design::TwoStage,
        }
    }

    #[test]
    fn names_parse_and_unknown_lists_valid() {
        assert_eq!(parse_designs("all").unwrap().len(), 6);
        assert_eq!(
            parse_designs("two-stage, cached-streaming,two-stage").unwrap(),
            vec![BenchDesign::Model(Design::TwoStage), BenchDesign::CachedStreaming]
        );
        let err = parse_designs("two-stage,three-stage").unwrap_err().to_string();
        assert!(err.contains("three-stage") && err.contains("no-decoder"), "{err}");
        assert!(parse_designs(" , ").is_err());
    }

    #[test]
    fn two_stage_window_matches_closed_form() {
        let c = small();
        let params = ModelParams::init(&c, 1).unwrap();
        let counters = measure_window(&params, 2).unwrap();
        assert_eq!(counters.encoder_scores(), count_macs(&c, MacMode::TwoStage));
        let one = ModelParams::init(
            &ModelConfig {
                design: Design::OneStage,
                ..c.clone()
            },
            1,
        )
        .unwrap();
        let counters = measure_window(&one, 2).unwrap();
        assert_eq!(counters.encoder_scores(), count_macs(&c, MacMode::StackedDecoder));
    }

    #[test]
    fn cached_step_spends_n0_c_on_the_weights() {
        let c = small();
        let params = ModelParams::init(&c, 1).unwrap();
        let counters = measure_cached_step(&params, 3).unwrap();
        let (n0, ch, h, ml) = (
            c.stage1_tokens as u64,
            c.feature_dim as u64,
            c.heads as u64,
            c.long_len as u64,
        );
        assert_eq!(counters.assembly_mults, n0 * ch);
        assert_eq!(counters.scores(Region::Stage1), 0);
        assert_eq!(counters.stage1_weight_mults(), n0 * ch);
        assert_eq!(counters.assembly_adds, h * n0 * ml);
    }

    #[test]
    fn sweep_is_flat_for_the_cache_and_linear_for_the_reference() {
        let c = ModelConfig {
            long_len: 0,
            ..small()
        };
        let rows = assembly_sweep(&c, &[8, 32, 64], 4).unwrap();
        let n0c = (c.stage1_tokens * c.feature_dim) as u64;
        for r in &rows {
            assert_eq!(r.cached_mults, n0c);
            assert_eq!(r.reference_mults, n0c * r.long_len as u64);
        }
        let tsv = sweep_tsv(&rows);
        assert_eq!(tsv.lines().count(), 4);
    }

    #[test]
    fn report_is_one_tsv_row_per_design() {
        let c = small();
        let report = run_bench(&c, &BenchDesign::ALL, None, 5).unwrap();
        let tsv = report.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 7);
        let width = lines[0].split('\t').count();
        assert!(lines.iter().all(|l| l.split('\t').count() == width));
        for (line, d) in lines[1..].iter().zip(BenchDesign::ALL) {
            assert!(line.starts_with(&format!("{}\t", d.name())), "{line}");
        }
        let two = &report.rows[3];
        let cached = &report.rows[5];
        assert_eq!(two.params, cached.params);
        assert!(cached.counters.stage1_weight_mults() < two.counters.stage1_weight_mults());
        assert!(cached.counters.total_scores() < two.counters.total_scores());
    }

    #[test]
    fn streaming_accuracy_scores_only_action_frames() {
        let c = ModelConfig {
            feature_dim: 8,
            heads: 2,
            ..small()
        };
        let params = ModelParams::init(&c, 6).unwrap();
        let seq = LabeledSequence::new(Matrix::filled(10, 8, 0.1), vec![0; 10]).unwrap();
        assert!(streaming_accuracy(&params, std::slice::from_ref(&seq)).is_err());
        let mut labels = vec![0; 10];
        labels[7] = 1;
        labels[8] = 1;
        let seq = LabeledSequence::new(Matrix::filled(10, 8, 0.1), labels).unwrap();
        let acc = streaming_accuracy(&params, &[seq]).unwrap();
        assert!(acc == 0.0 || acc == 0.5 || acc == 1.0);
    }
}
