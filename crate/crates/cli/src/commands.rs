use std::fmt;
use std::path::{Path, PathBuf};

use attnreuse_core::accounting::{calibrate_frontend, count_macs, CostReport};
use attnreuse_core::autodiff::BackwardFault;
use attnreuse_core::checkpoint;
use attnreuse_core::distill::{
    loss_grad_check, pretrain_teacher, step_plans, total_loss, train, DistillConfig, LossVariant, StepMetrics, Student,
    TrainOutcome,
};
use attnreuse_core::encoder::{Encoder, Leaves};
use attnreuse_core::masking::RatioSchedule;
use attnreuse_core::metrics::{loss_svg, smoothed_ends, to_csv, to_jsonl};
use attnreuse_core::reuse::{parse_pattern, split_up_suffix, widen_to_match};
use attnreuse_core::synth::FrameSource;
use attnreuse_core::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Largest student accepted by [`gradcheck`].
pub const MAX_GRADCHECK_PARAMS: usize = 50_000;
/// Pass threshold of [`gradcheck`].
pub const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_EPS: f64 = 1e-6;
/// Steps averaged at each end of a loss curve.
pub const SMOOTHING_WINDOW: usize = 10;

const TEACHER_STREAM: u64 = 0;
const STUDENT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
/// Data batch index reserved for evaluation.
const EVAL_BATCH: u64 = 1 << 40;

fn write_snapshot(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn write_log(dir: &Path, stem: &str, log: &[StepMetrics], layers: usize, plot: bool) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.jsonl")), to_jsonl(log))?;
    std::fs::write(dir.join(format!("{stem}.csv")), to_csv(log, layers))?;
    if plot {
        std::fs::write(dir.join(format!("{stem}.svg")), loss_svg(log))?;
    }
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeRow {
    pub pattern: String,
    /// 1-based layers that compute maps.
    pub sources: Vec<usize>,
    pub reusing_layers: Vec<usize>,
    pub ffn_width: usize,
    pub params: u64,
    pub macs: u64,
    pub param_delta: i64,
    pub mac_delta: i64,
    pub param_reduction_pct: f64,
    pub mac_reduction_pct: f64,
    pub cost: CostReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub n: u64,
    pub frontend_params: u64,
    pub frontend_macs_per_frame: u64,
    pub per_layer_mhsa_macs: u64,
    pub per_layer_omitted_macs: u64,
    /// Baseline first.
    pub rows: Vec<AnalyzeRow>,
}

impl AnalyzeReport {
    pub fn row(&self, pattern: &str) -> Option<&AnalyzeRow> {
        self.rows.iter().find(|r| r.pattern == pattern)
    }

    pub fn to_json(&self) -> String {
        json(self)
    }
}

/// Parameter and MAC comparison of `patterns` against no reuse. `-up`
/// variants widen the FFN until they match the reference pattern's size.
pub fn analyze(cfg: &RunConfig, patterns: &[String]) -> Result<AnalyzeReport, CliError> {
    let a = &cfg.analysis;
    let mut base = a.encoder_config();
    base.validate()?;
    if a.n == 0 {
        return Err(CliError::Config("analysis.n must be at least 1".into()));
    }
    let none = parse_pattern("none", a.layers)?;
    match (a.target_params, a.target_macs) {
        (Some(p), Some(m)) => base = calibrate_frontend(&base, a.n, p, m)?,
        (None, None) => {}
        _ => {
            return Err(CliError::Config(
                "analysis.target_params and analysis.target_macs must be set together".into(),
            ))
        }
    }
    let baseline = count_macs(&base, &none, a.n)?;

    let mut names = vec!["none".to_string()];
    names.extend(patterns.iter().filter(|p| p.trim() != "none").cloned());
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let (stem, up) = split_up_suffix(&name);
        let pattern = parse_pattern(stem, a.layers)?;
        attnreuse_core::reuse::validate(&pattern, a.layers)
            .map_err(|v| CliError::Validation(format!("{name}: {}", describe(&v))))?;
        let config = if up {
            let reference = parse_pattern(&a.up_reference, a.layers)?;
            widen_to_match(&base, &pattern, &reference, a.granularity)?.0
        } else {
            base.clone()
        };
        let cost = count_macs(&config, &pattern, a.n)?;
        let param_delta = baseline.params_total as i64 - cost.params_total as i64;
        let mac_delta = baseline.macs_total as i64 - cost.macs_total as i64;
        rows.push(AnalyzeRow {
            pattern: name.trim().to_string(),
            sources: pattern.sources(),
            reusing_layers: pattern.reusing_layers(),
            ffn_width: config.ffn_width,
            params: cost.params_total,
            macs: cost.macs_total,
            param_delta,
            mac_delta,
            param_reduction_pct: 100.0 * param_delta as f64 / baseline.params_total as f64,
            mac_reduction_pct: 100.0 * mac_delta as f64 / baseline.macs_total as f64,
            cost,
        });
    }

    let report = AnalyzeReport {
        n: a.n,
        frontend_params: base.frontend_params,
        frontend_macs_per_frame: base.frontend_macs_per_frame,
        per_layer_mhsa_macs: baseline.per_layer_mhsa_macs,
        per_layer_omitted_macs: baseline.per_layer_omitted_macs,
        rows,
    };
    write_snapshot(cfg)?;
    std::fs::write(cfg.out_dir.join("analysis.json"), report.to_json())?;
    let mut csv = String::from("pattern,sources,ffn_width,params,macs,param_delta,mac_delta\n");
    for r in &report.rows {
        let src: Vec<String> = r.sources.iter().map(|s| s.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.pattern,
            src.join(" "),
            r.ffn_width,
            r.params,
            r.macs,
            r.param_delta,
            r.mac_delta
        ));
    }
    std::fs::write(cfg.out_dir.join("analysis.csv"), csv)?;
    Ok(report)
}

fn describe(v: &[attnreuse_core::reuse::Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl fmt::Display for AnalyzeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "n = {}  frontend = {} params, {} MACs/frame  MHSA/layer = {:.3}G  omitted/reusing layer = {:.3}G",
            self.n,
            self.frontend_params,
            self.frontend_macs_per_frame,
            self.per_layer_mhsa_macs as f64 / 1e9,
            self.per_layer_omitted_macs as f64 / 1e9
        )?;
        writeln!(
            f,
            "{:<12} {:<28} {:>6} {:>10} {:>10} {:>9} {:>9} {:>8} {:>8}",
            "pattern", "computing layers", "ffn", "params(M)", "MACs(G)", "dP(M)", "dMAC(G)", "dP%", "dMAC%"
        )?;
        for r in &self.rows {
            let src: Vec<String> = r.sources.iter().map(|s| s.to_string()).collect();
            writeln!(
                f,
                "{:<12} {:<28} {:>6} {:>10.3} {:>10.2} {:>9.3} {:>9.2} {:>8.2} {:>8.2}",
                r.pattern,
                format!("{{{}}}", src.join(",")),
                r.ffn_width,
                r.params as f64 / 1e6,
                r.macs as f64 / 1e9,
                r.param_delta as f64 / 1e6,
                r.mac_delta as f64 / 1e9,
                r.param_reduction_pct,
                r.mac_reduction_pct
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- models

/// Teacher from `teacher.checkpoint`, or freshly pretrained on the run's data.
/// Pretraining losses are empty for a loaded teacher.
pub fn build_teacher(cfg: &RunConfig) -> Result<(Encoder, Vec<f64>), CliError> {
    let tcfg = cfg.teacher_config();
    let pattern = cfg.teacher.pattern.resolve(tcfg.num_layers)?;
    if let Some(path) = &cfg.teacher.checkpoint {
        let (enc, _) = checkpoint::load(path)?;
        if enc.config.input_width != tcfg.input_width || enc.config.max_positions < cfg.data.n {
            return Err(CliError::Config(format!(
                "teacher checkpoint {} does not fit the data (d_in {}, max_positions {})",
                path.display(),
                enc.config.input_width,
                enc.config.max_positions
            )));
        }
        return Ok((enc, Vec::new()));
    }
    let mut source = cfg.data_source()?;
    let mut rng = Rng::with_stream(cfg.seed, TEACHER_STREAM);
    if cfg.teacher.pretrain.steps == 0 {
        return Ok((Encoder::init(&tcfg, &pattern, &mut rng)?, Vec::new()));
    }
    Ok(pretrain_teacher(
        &tcfg,
        &pattern,
        &cfg.pretrain_config(),
        &mut source,
        &mut rng,
    )?)
}

fn check_shapes(cfg: &RunConfig, teacher: &Encoder) -> Result<(), CliError> {
    if cfg.student.layers != teacher.config.num_layers {
        return Err(CliError::Config(format!(
            "student has {} layers, teacher {}; layer-to-layer distillation pairs them one to one",
            cfg.student.layers, teacher.config.num_layers
        )));
    }
    Ok(())
}

fn run_training(cfg: &RunConfig, teacher: &Encoder, dcfg: &DistillConfig) -> Result<TrainOutcome, CliError> {
    check_shapes(cfg, teacher)?;
    let scfg = cfg.student_config();
    let pattern = cfg.student.pattern.resolve(scfg.num_layers)?;
    let mut source = cfg.data_source()?;
    let mut rng = Rng::with_stream(cfg.seed, STUDENT_STREAM);
    Ok(train(teacher, &scfg, &pattern, dcfg, &mut source, &mut rng)?)
}

/// Full-variant loss of `student` on a held-out batch with fixed masks.
fn evaluate(cfg: &RunConfig, teacher: &Encoder, student: &Student) -> Result<f64, CliError> {
    let mut dcfg = cfg.distill_config();
    dcfg.variant = LossVariant::Full;
    let mut source = cfg.data_source()?;
    let xs = source.batch(EVAL_BATCH, dcfg.batch)?;
    let mut plan_cfg = dcfg.clone();
    plan_cfg.seed = cfg.seed ^ (EVAL_STREAM << 56);
    plan_cfg.schedule = RatioSchedule::Constant { ratio: cfg.mask.ratio };
    let (_, plans) = step_plans(&plan_cfg, 0, xs[0].rows(), xs.len())?;
    let mut sum = 0.0;
    for (x, plan) in xs.iter().zip(&plans) {
        sum += total_loss(x, teacher, student, &dcfg, plan)?.total;
    }
    Ok(sum / xs.len() as f64)
}

// ---------------------------------------------------------------- distill

#[derive(Debug, Clone, Serialize)]
pub struct DistillReport {
    pub teacher_pretrain_losses: Vec<f64>,
    pub log: Vec<StepMetrics>,
    /// Mean total over the first and last [`SMOOTHING_WINDOW`] steps.
    pub smoothed: Option<(f64, f64)>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn distill(cfg: &RunConfig, plot: bool) -> Result<DistillReport, CliError> {
    let dcfg = cfg.distill_config();
    dcfg.validate(cfg.student.layers)?;
    write_snapshot(cfg)?;
    let (teacher, pre) = build_teacher(cfg)?;
    let out = run_training(cfg, &teacher, &dcfg)?;
    let dir = &cfg.out_dir;
    write_log(dir, "metrics", &out.log, cfg.student.layers, plot)?;
    checkpoint::save(&dir.join("teacher.ckpt"), &teacher, None)?;
    let ckpt = dir.join("student.ckpt");
    checkpoint::save_student(&ckpt, &out.student)?;
    Ok(DistillReport {
        teacher_pretrain_losses: pre,
        smoothed: smoothed_ends(&out.log, SMOOTHING_WINDOW),
        log: out.log,
        checkpoint: ckpt,
        metrics: dir.join("metrics.jsonl"),
    })
}

impl fmt::Display for DistillReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let (Some(a), Some(b)) = (
            self.teacher_pretrain_losses.first(),
            self.teacher_pretrain_losses.last(),
        ) {
            writeln!(f, "teacher pretraining: reconstruction loss {a:.4} -> {b:.4}")?;
        }
        writeln!(f, "steps: {}", self.log.len())?;
        if let Some(last) = self.log.last() {
            writeln!(f, "final total: {:.6}", last.total)?;
            writeln!(f, "{:>5} {:>12} {:>12}", "layer", "masked", "unmasked")?;
            for (l, (m, u)) in last.masked.iter().zip(&last.unmasked).enumerate() {
                writeln!(f, "{:>5} {:>12.6} {:>12.6}", l + 1, m, u)?;
            }
        }
        if let Some((a, b)) = self.smoothed {
            writeln!(f, "smoothed total: first {a:.6}, last {b:.6} (ratio {:.3})", b / a)?;
        }
        writeln!(f, "checkpoint: {}", self.checkpoint.display())?;
        write!(f, "metrics: {}", self.metrics.display())
    }
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub variant: LossVariant,
    pub final_total: f64,
    pub final_masked: Vec<f64>,
    pub final_unmasked: Vec<f64>,
    /// Full-variant loss on a held-out batch.
    pub eval_full: f64,
    pub log: Vec<StepMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateReport {
    pub rows: Vec<AblateRow>,
    /// Every variant saw the same mask plans at every step.
    pub masks_identical: bool,
}

impl AblateReport {
    pub fn row(&self, v: LossVariant) -> Option<&AblateRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Trains one student per loss variant from the same initialization, data
/// and masks.
pub fn ablate(cfg: &RunConfig, plot: bool) -> Result<AblateReport, CliError> {
    let base = cfg.distill_config();
    base.validate(cfg.student.layers)?;
    write_snapshot(cfg)?;
    let (teacher, _) = build_teacher(cfg)?;
    let mut rows = Vec::with_capacity(LossVariant::ALL.len());
    for variant in LossVariant::ALL {
        let mut dcfg = base.clone();
        dcfg.variant = variant;
        let out = run_training(cfg, &teacher, &dcfg)?;
        write_log(
            &cfg.out_dir,
            &format!("metrics_{}", variant.name()),
            &out.log,
            cfg.student.layers,
            plot,
        )?;
        let eval_full = evaluate(cfg, &teacher, &out.student)?;
        let last = out.log.last();
        rows.push(AblateRow {
            variant,
            final_total: last.map_or(0.0, |r| r.total),
            final_masked: last.map_or_else(Vec::new, |r| r.masked.clone()),
            final_unmasked: last.map_or_else(Vec::new, |r| r.unmasked.clone()),
            eval_full,
            log: out.log,
        });
    }
    let digests = |r: &AblateRow| r.log.iter().map(|m| m.mask_digest.clone()).collect::<Vec<_>>();
    let masks_identical = rows.windows(2).all(|w| digests(&w[0]) == digests(&w[1]));
    let report = AblateReport { rows, masks_identical };

    let layers = cfg.student.layers;
    let mut csv = String::from("variant,final_total,eval_full");
    for l in 1..=layers {
        csv.push_str(&format!(",lm_{l}"));
    }
    for l in 1..=layers {
        csv.push_str(&format!(",lu_{l}"));
    }
    csv.push('\n');
    for r in &report.rows {
        csv.push_str(&format!("{},{},{}", r.variant.name(), r.final_total, r.eval_full));
        for v in r.final_masked.iter().chain(&r.final_unmasked) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    std::fs::write(cfg.out_dir.join("ablate.csv"), csv)?;
    Ok(report)
}

impl fmt::Display for AblateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<26} {:>12} {:>12} {:>12} {:>12}",
            "variant", "final total", "sum L_m", "sum L_u", "eval (full)"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<26} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                r.variant.name(),
                r.final_total,
                r.final_masked.iter().sum::<f64>(),
                r.final_unmasked.iter().sum::<f64>(),
                r.eval_full
            )?;
            let per: Vec<String> = r
                .final_masked
                .iter()
                .zip(&r.final_unmasked)
                .enumerate()
                .map(|(l, (m, u))| format!("l{}: {m:.4}/{u:.4}", l + 1))
                .collect();
            writeln!(f, "    {}", per.join("  "))?;
        }
        write!(f, "identical mask plans across variants: {}", self.masks_identical)
    }
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub schedule: RatioSchedule,
    pub ratios: Vec<f64>,
    pub final_total: Option<f64>,
    pub smoothed_final: Option<f64>,
    pub eval_full: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn failed(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.error.is_some())
    }
}

/// One distillation run per constant ratio, plus the linear schedule from
/// `mask.ratio` to `mask.ratio_end` when `with_schedule` is set. Settings run
/// in parallel when `parallel` is set; rows keep the input order.
pub fn sweep_ratio(
    cfg: &RunConfig,
    ratios: &[f64],
    with_schedule: bool,
    parallel: bool,
    plot: bool,
) -> Result<SweepReport, CliError> {
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(CliError::Config(format!("ratio {r} outside (0, 1)")));
    }
    write_snapshot(cfg)?;
    let (teacher, _) = build_teacher(cfg)?;
    let mut settings: Vec<(String, RatioSchedule)> = ratios
        .iter()
        .map(|&r| (format!("ratio_{r}"), RatioSchedule::Constant { ratio: r }))
        .collect();
    if with_schedule {
        settings.push((
            "schedule".into(),
            RatioSchedule::Linear {
                start: cfg.mask.ratio,
                end: cfg.mask.ratio_end,
            },
        ));
    }
    let run = |(label, schedule): &(String, RatioSchedule)| -> Result<SweepRow, CliError> {
        let mut dcfg = cfg.distill_config();
        dcfg.schedule = *schedule;
        let outcome = dcfg
            .validate(cfg.student.layers)
            .map_err(CliError::from)
            .and_then(|_| run_training(cfg, &teacher, &dcfg));
        match outcome {
            Ok(out) => {
                write_log(&cfg.out_dir.join(label), "metrics", &out.log, cfg.student.layers, plot)?;
                Ok(SweepRow {
                    label: label.clone(),
                    schedule: *schedule,
                    ratios: out.log.iter().map(|m| m.ratio).collect(),
                    final_total: out.log.last().map(|m| m.total),
                    smoothed_final: smoothed_ends(&out.log, SMOOTHING_WINDOW).map(|(_, b)| b),
                    eval_full: Some(evaluate(cfg, &teacher, &out.student)?),
                    error: None,
                })
            }
            Err(e) if e.exit_code() == 2 => Ok(SweepRow {
                label: label.clone(),
                schedule: *schedule,
                ratios: Vec::new(),
                final_total: None,
                smoothed_final: None,
                eval_full: None,
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    };
    let rows: Vec<SweepRow> = if parallel {
        settings.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        settings.iter().map(run).collect::<Result<_, _>>()?
    };
    let report = SweepReport { rows };
    let mut csv = String::from("setting,final_total,smoothed_final,eval_full,error\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label,
            opt(r.final_total),
            opt(r.smoothed_final),
            opt(r.eval_full),
            r.error.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    std::fs::write(cfg.out_dir.join("sweep.csv"), csv)?;
    Ok(report)
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>12} {:>14} {:>12}",
            "setting", "final total", "smoothed last", "eval (full)"
        )?;
        for r in &self.rows {
            match &r.error {
                Some(e) => writeln!(f, "{:<16} error: {e}", r.label)?,
                None => writeln!(
                    f,
                    "{:<16} {:>12.6} {:>14.6} {:>12.6}",
                    r.label,
                    r.final_total.unwrap_or(f64::NAN),
                    r.smoothed_final.unwrap_or(f64::NAN),
                    r.eval_full.unwrap_or(f64::NAN)
                )?,
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_leaf: String,
    pub worst_coordinate: usize,
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn check_param_bound(params: usize) -> Result<(), CliError> {
    if params > MAX_GRADCHECK_PARAMS {
        return Err(CliError::Config(format!(
            "student has {params} parameters; gradient checks are limited to {MAX_GRADCHECK_PARAMS}"
        )));
    }
    Ok(())
}

/// Central-difference check of the full distillation loss with respect to
/// every student parameter, on one utterance of the run's data.
pub fn gradcheck(cfg: &RunConfig, corrupt_backward: bool) -> Result<GradcheckReport, CliError> {
    let dcfg = cfg.distill_config();
    dcfg.validate(cfg.student.layers)?;
    let scfg = cfg.student_config();
    let pattern = cfg.student.pattern.resolve(scfg.num_layers)?;
    let student = Student::init(&scfg, &pattern, &mut Rng::with_stream(cfg.seed, STUDENT_STREAM))?;
    check_param_bound(student.num_params())?;
    write_snapshot(cfg)?;

    let tcfg = cfg.teacher_config();
    let teacher = Encoder::init(
        &tcfg,
        &cfg.teacher.pattern.resolve(tcfg.num_layers)?,
        &mut Rng::with_stream(cfg.seed, TEACHER_STREAM),
    )?;
    check_shapes(cfg, &teacher)?;
    let mut source = cfg.data_source()?;
    let xs = source.batch(0, 1)?;
    let (_, plans) = step_plans(&dcfg, 0, xs[0].rows(), 1)?;
    let batch = vec![(xs[0].clone(), plans[0].clone())];
    let fault = if corrupt_backward {
        BackwardFault::MatMulRhs
    } else {
        BackwardFault::None
    };
    let r = loss_grad_check(&batch, &teacher, &student, &dcfg, GRADCHECK_EPS, fault)?;
    let mut names = Vec::new();
    student.params.visit("", &mut |n, _| names.push(n));
    let report = GradcheckReport {
        params: student.num_params(),
        max_rel_error: r.max_rel_error,
        worst_leaf: names.get(r.worst.0).cloned().unwrap_or_default(),
        worst_coordinate: r.worst.1,
        coordinates: r.coordinates,
        tolerance: GRADCHECK_TOL,
        passed: r.max_rel_error <= GRADCHECK_TOL,
    };
    std::fs::write(cfg.out_dir.join("gradcheck.json"), json(&report))?;
    Ok(report)
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} parameters, {} coordinates checked\nmax relative error {:.3e} at {}[{}] (tolerance {:.0e}): {}",
            self.params,
            self.coordinates,
            self.max_rel_error,
            self.worst_leaf,
            self.worst_coordinate,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}
