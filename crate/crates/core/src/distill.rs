//! Masked and unmasked layer-to-layer distillation.
//!
//! For every distilled layer `ℓ` the student hidden state is projected to the
//! teacher width and compared frame by frame with the Euclidean norm:
//!
//! * masked term `L_m,ℓ`: mean over masked frames of `‖t_i(x) − s_i(μ(x))‖`,
//!   teacher on the clean input;
//! * unmasked term `L_u,ℓ`: mean over unmasked frames of
//!   `‖t_i(μ(x)) − s_i(μ(x))‖`, teacher on the same masked input as the student.
//!
//! The loss is `Σ_ℓ α_ℓ (L_m,ℓ + L_u,ℓ)`. Two ablations are provided: dropping
//! the unmasked term, and taking the unmasked target from the clean input.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BackwardFault, Tape, Var};
use crate::encoder::{encoder_forward, linear, Encoder, EncoderConfig, EncoderWeights, Leaves, Linear};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::masking::{ratio_at, sample_mask, MaskPlan, RatioSchedule, DEFAULT_SPAN};
use crate::reuse::ReusePattern;
use crate::synth::FrameSource;
use crate::tensor::{Rng, Tensor};

/// Version tag written into every metrics record.
pub const METRICS_VERSION: u32 = 1;

/// Maximum allowed gap between the logged total and `Σ α (L_m + L_u)`.
pub const DECOMPOSITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    #[default]
    Full,
    /// Unmasked terms are identically zero.
    MaskedOnly,
    /// Unmasked target is the teacher on the clean input.
    UnmaskedFromCleanInput,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [
        LossVariant::Full,
        LossVariant::MaskedOnly,
        LossVariant::UnmaskedFromCleanInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Full => "full",
            LossVariant::MaskedOnly => "masked-only",
            LossVariant::UnmaskedFromCleanInput => "unmasked-from-clean-input",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant `{s}`")))
    }
}

/// Adam with linear warmup then linear decay to zero at the final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let remaining = total_steps.saturating_sub(step) as f64;
        let span = total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        self.lr * remaining / span
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Layerwise coefficients, one per layer.
    pub alphas: Vec<f64>,
    pub variant: LossVariant,
    pub schedule: RatioSchedule,
    pub span: usize,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// Seeds mask sampling and data batches.
    pub seed: u64,
}

impl DistillConfig {
    /// 0.1 everywhere except 1.0 on the last layer.
    pub fn default_alphas(layers: usize) -> Vec<f64> {
        let mut a = vec![0.1; layers];
        if let Some(last) = a.last_mut() {
            *last = 1.0;
        }
        a
    }

    pub fn new(layers: usize) -> Self {
        Self {
            alphas: Self::default_alphas(layers),
            variant: LossVariant::Full,
            schedule: RatioSchedule::Constant { ratio: 0.4 },
            span: DEFAULT_SPAN,
            steps: 300,
            batch: 4,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.alphas.len() != layers {
            return Err(Error::Config(format!(
                "{} layerwise coefficients for {layers} layers",
                self.alphas.len()
            )));
        }
        if self.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config(
                "layerwise coefficients must be finite and non-negative".into(),
            ));
        }
        if !self.alphas.iter().any(|&a| a > 0.0) {
            return Err(Error::Config(
                "at least one layerwise coefficient must be positive".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub masked: Vec<f64>,
    pub unmasked: Vec<f64>,
    pub alphas: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `Σ α_ℓ (L_m,ℓ + L_u,ℓ)` recomputed from the parts.
    pub fn recombined(&self) -> f64 {
        self.alphas
            .iter()
            .zip(self.masked.iter().zip(&self.unmasked))
            .map(|(a, (m, u))| a * (m + u))
            .sum()
    }

    pub fn decomposition_gap(&self) -> f64 {
        (self.total - self.recombined()).abs()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.masked.iter().chain(&self.unmasked).all(|v| v.is_finite())
    }
}

/// One linear map per distilled layer from the student to the teacher width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead<T = Tensor> {
    pub layers: Vec<Linear<T>>,
}

impl ProjectionHead {
    pub fn init(layers: usize, width: usize, teacher_width: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        Self {
            layers: (0..layers)
                .map(|_| Linear {
                    weight: Tensor::randn(&[width, teacher_width], std, rng),
                    bias: Some(Tensor::zeros(&[teacher_width])),
                })
                .collect(),
        }
    }

    pub fn identity(layers: usize, width: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| Linear {
                    weight: Tensor::eye(width),
                    bias: Some(Tensor::zeros(&[width])),
                })
                .collect(),
        }
    }

    /// Projects a student frame block (`n × d`) to the teacher width.
    pub fn project(&self, layer: usize, states: &Tensor) -> Result<Tensor> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no projection for layer {layer}")))?;
        let mut out = crate::tensor::matmul(states, &l.weight)?;
        if let Some(b) = &l.bias {
            let p = b.len();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % p];
            }
        }
        Ok(out)
    }
}

impl<T> ProjectionHead<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ProjectionHead<U> {
        ProjectionHead {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }
}

impl<T> Leaves<T> for ProjectionHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams<T = Tensor> {
    pub encoder: EncoderWeights<T>,
    pub projection: ProjectionHead<T>,
}

impl<T> StudentParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> StudentParams<U> {
        StudentParams {
            encoder: self.encoder.map(f),
            projection: self.projection.map(f),
        }
    }
}

impl<T> Leaves<T> for StudentParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit(prefix, f);
        self.projection.visit(&join(prefix, "projection"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.encoder.visit_mut(prefix, f);
        self.projection.visit_mut(&join(prefix, "projection"), f);
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    pub config: EncoderConfig,
    pub pattern: ReusePattern,
    pub params: StudentParams,
}

impl Student {
    pub fn init(config: &EncoderConfig, pattern: &ReusePattern, rng: &mut Rng) -> Result<Self> {
        let encoder = Encoder::init(config, pattern, rng)?;
        let projection = ProjectionHead::init(config.num_layers, config.model_width, config.teacher_width, rng);
        Ok(Self {
            config: config.clone(),
            pattern: pattern.clone(),
            params: StudentParams {
                encoder: encoder.weights,
                projection,
            },
        })
    }

    /// Copy of `teacher` with identity projections.
    pub fn from_teacher(teacher: &Encoder) -> Self {
        let mut config = teacher.config.clone();
        config.teacher_width = config.model_width;
        Self::from_parts(
            config,
            teacher.pattern.clone(),
            teacher.weights.clone(),
            ProjectionHead::identity(teacher.config.num_layers, teacher.config.model_width),
        )
    }

    pub fn from_parts(
        config: EncoderConfig,
        pattern: ReusePattern,
        encoder: EncoderWeights,
        projection: ProjectionHead,
    ) -> Self {
        Self {
            config,
            pattern,
            params: StudentParams { encoder, projection },
        }
    }

    pub fn encoder(&self) -> Encoder {
        Encoder {
            config: self.config.clone(),
            pattern: self.pattern.clone(),
            weights: self.params.encoder.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        crate::encoder::count_leaves(&self.params)
    }
}

/// `(1/|M|) Σ_{i∈M} ‖t_i − P(s_i)‖₂` for one layer, teacher on the clean input.
pub fn masked_loss(
    teacher_states_clean: &[Tensor],
    student_states: &[Tensor],
    proj: &ProjectionHead,
    plan: &MaskPlan,
    layer: usize,
) -> Result<f64> {
    if plan.is_empty() {
        return Err(Error::Degenerate("masked loss needs at least one masked frame".into()));
    }
    frame_distance_mean(teacher_states_clean, student_states, proj, &plan.masked, layer)
}

/// `(1/(n−|M|)) Σ_{i∉M} ‖t_i − P(s_i)‖₂` for one layer, teacher on the masked input.
pub fn unmasked_loss(
    teacher_states_masked: &[Tensor],
    student_states: &[Tensor],
    proj: &ProjectionHead,
    plan: &MaskPlan,
    layer: usize,
) -> Result<f64> {
    let rows = plan.unmasked();
    if rows.is_empty() {
        return Err(Error::Degenerate(
            "unmasked loss needs at least one unmasked frame".into(),
        ));
    }
    frame_distance_mean(teacher_states_masked, student_states, proj, &rows, layer)
}

fn frame_distance_mean(
    teacher: &[Tensor],
    student: &[Tensor],
    proj: &ProjectionHead,
    rows: &[usize],
    layer: usize,
) -> Result<f64> {
    let t = teacher
        .get(layer)
        .ok_or_else(|| Error::Config(format!("teacher has no layer {layer}")))?;
    let s = student
        .get(layer)
        .ok_or_else(|| Error::Config(format!("student has no layer {layer}")))?;
    let p = proj.project(layer, s)?;
    if p.shape() != t.shape() {
        return Err(Error::shape("distance", t.shape(), p.shape()));
    }
    let mut sum = 0.0;
    for &i in rows {
        if i >= t.rows() {
            return Err(Error::shape("distance", t.shape(), &[i]));
        }
        sum += crate::autodiff::l2(&t.row(i).iter().zip(p.row(i)).map(|(a, b)| a - b).collect::<Vec<_>>());
    }
    Ok(sum / rows.len() as f64)
}

/// Loss nodes for a batch on a tape.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    /// `[item][layer]`.
    pub masked: Vec<Vec<Var>>,
    /// `[item][layer]`; `None` for the masked-only variant.
    pub unmasked: Vec<Vec<Option<Var>>>,
}

impl LossGraph {
    /// Batch-mean breakdown read back from the tape.
    pub fn breakdown(&self, tape: &Tape, alphas: &[f64]) -> LossBreakdown {
        let items = self.masked.len() as f64;
        let layers = alphas.len();
        let mut masked = vec![0.0; layers];
        let mut unmasked = vec![0.0; layers];
        for (m_item, u_item) in self.masked.iter().zip(&self.unmasked) {
            for l in 0..layers {
                masked[l] += tape.scalar(m_item[l]) / items;
                unmasked[l] += u_item[l].map_or(0.0, |v| tape.scalar(v)) / items;
            }
        }
        LossBreakdown {
            masked,
            unmasked,
            alphas: alphas.to_vec(),
            total: tape.scalar(self.total),
        }
    }
}

/// Builds the distillation loss for a batch of `(x, plan)` pairs.
///
/// The teacher runs on the clean input for the masked term and, for the full
/// variant, a second time on the masked input for the unmasked term. The two
/// passes share nothing but weights.
pub fn build_loss(
    tape: &mut Tape,
    batch: &[(Tensor, MaskPlan)],
    teacher: &Encoder,
    teacher_w: &EncoderWeights<Var>,
    student: &Student,
    student_w: &StudentParams<Var>,
    cfg: &DistillConfig,
) -> Result<LossGraph> {
    let layers = student.config.num_layers;
    if teacher.config.num_layers != layers {
        return Err(Error::Config(format!(
            "teacher has {} layers, student {layers}",
            teacher.config.num_layers
        )));
    }
    if student.config.teacher_width != teacher.config.model_width {
        return Err(Error::Config(format!(
            "student projects to width {}, teacher width is {}",
            student.config.teacher_width, teacher.config.model_width
        )));
    }
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    cfg.validate(layers)?;

    let mut item_totals = Vec::with_capacity(batch.len());
    let mut masked = Vec::with_capacity(batch.len());
    let mut unmasked = Vec::with_capacity(batch.len());
    for (x, plan) in batch {
        if plan.is_empty() {
            return Err(Error::Degenerate("mask plan has no masked frame".into()));
        }
        let kept = plan.unmasked();
        if kept.is_empty() && cfg.variant != LossVariant::MaskedOnly {
            return Err(Error::Degenerate("mask plan leaves no unmasked frame".into()));
        }
        let xc = tape.constant(x);
        let teacher_clean = encoder_forward(tape, xc, &teacher.config, &teacher.pattern, teacher_w)?;

        let student_in = tape.replace_rows(xc, &plan.masked, student_w.encoder.mask_embedding)?;
        let student_out = encoder_forward(tape, student_in, &student.config, &student.pattern, &student_w.encoder)?;

        let teacher_unmasked_target = match cfg.variant {
            LossVariant::Full => {
                let teacher_in = tape.replace_rows(xc, &plan.masked, teacher_w.mask_embedding)?;
                Some(encoder_forward(
                    tape,
                    teacher_in,
                    &teacher.config,
                    &teacher.pattern,
                    teacher_w,
                )?)
            }
            LossVariant::UnmaskedFromCleanInput => Some(teacher_clean.clone()),
            LossVariant::MaskedOnly => None,
        };

        let mut m_terms = Vec::with_capacity(layers);
        let mut u_terms = Vec::with_capacity(layers);
        let mut weighted = Vec::with_capacity(2 * layers);
        for l in 0..layers {
            let projected = linear(tape, student_out[l].hidden, &student_w.projection.layers[l])?;
            let diff = tape.sub(teacher_clean[l].hidden, projected)?;
            let m = tape.row_norm_mean(diff, &plan.masked)?;
            weighted.push((m, cfg.alphas[l]));
            m_terms.push(m);
            let u = match &teacher_unmasked_target {
                Some(target) => {
                    let diff = tape.sub(target[l].hidden, projected)?;
                    let u = tape.row_norm_mean(diff, &kept)?;
                    weighted.push((u, cfg.alphas[l]));
                    Some(u)
                }
                None => None,
            };
            u_terms.push(u);
        }
        item_totals.push(tape.weighted_sum(&weighted)?);
        masked.push(m_terms);
        unmasked.push(u_terms);
    }
    let w = 1.0 / batch.len() as f64;
    let terms: Vec<(Var, f64)> = item_totals.iter().map(|&v| (v, w)).collect();
    let total = tape.weighted_sum(&terms)?;
    Ok(LossGraph {
        total,
        masked,
        unmasked,
    })
}

/// Loss breakdown for one utterance.
pub fn total_loss(
    x: &Tensor,
    teacher: &Encoder,
    student: &Student,
    cfg: &DistillConfig,
    plan: &MaskPlan,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let tw = teacher.bind(&mut tape, false);
    let sw = student.params.map(&mut |t| tape.constant(t));
    let graph = build_loss(&mut tape, &[(x.clone(), plan.clone())], teacher, &tw, student, &sw, cfg)?;
    tape.check_finite()?;
    Ok(graph.breakdown(&tape, &cfg.alphas))
}

/// Loss breakdown plus the gradient of the total with respect to every
/// student parameter.
pub fn loss_and_grads(
    batch: &[(Tensor, MaskPlan)],
    teacher: &Encoder,
    student: &Student,
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, StudentParams)> {
    let mut tape = Tape::new();
    let tw = teacher.bind(&mut tape, false);
    let sw = student.params.map(&mut |t| tape.param(t));
    let graph = build_loss(&mut tape, batch, teacher, &tw, student, &sw, cfg)?;
    let breakdown = graph.breakdown(&tape, &cfg.alphas);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("loss breakdown {breakdown:?}")));
    }
    tape.backward(graph.total)?;
    let grads = sw.map(&mut |&v| {
        let shape = tape.value(v).shape().to_vec();
        match tape.grad(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("grad matches value"),
            None => Tensor::zeros(&shape),
        }
    });
    Ok((breakdown, grads))
}

/// Finite-difference check of the full distillation loss over every student
/// parameter.
pub fn loss_grad_check(
    batch: &[(Tensor, MaskPlan)],
    teacher: &Encoder,
    student: &Student,
    cfg: &DistillConfig,
    epsilon: f64,
    fault: BackwardFault,
) -> Result<GradCheckReport> {
    let mut points = Vec::new();
    student.params.map(&mut |t| points.push(t.clone()));
    grad_check_many(
        |tape, vars| {
            let mut it = vars.iter().copied();
            let sw = student.params.map(&mut |_| it.next().expect("one var per leaf"));
            let tw = teacher.bind(tape, false);
            Ok(build_loss(tape, batch, teacher, &tw, student, &sw, cfg)?.total)
        },
        &points,
        epsilon,
        fault,
    )
}

/// Adam state, one moment pair per leaf in visiting order.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<T: Leaves<Tensor>>(cfg: &OptimizerConfig, params: &T) -> Self {
        let mut first = Vec::new();
        params.visit("", &mut |_, t| first.push(vec![0.0; t.len()]));
        let second = first.clone();
        Self {
            cfg: cfg.clone(),
            first,
            second,
            t: 0,
        }
    }

    pub fn step<T: Leaves<Tensor>>(&mut self, params: &mut T, grads: &T, lr: f64) {
        let mut gs: Vec<&Tensor> = Vec::new();
        grads.visit("", &mut |_, g| gs.push(g));
        self.t += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut("", &mut |_, p| {
            let g = gs[idx].data();
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

/// One metrics record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub version: u32,
    pub step: usize,
    pub ratio: f64,
    pub lr: f64,
    pub total: f64,
    pub masked: Vec<f64>,
    pub unmasked: Vec<f64>,
    /// Digest of every mask plan used in the step.
    pub mask_digest: String,
}

pub fn batch_digest(plans: &[&MaskPlan]) -> String {
    let mut h = Sha256::new();
    for p in plans {
        h.update(p.digest().as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Mask plans of step `step`: one stream per step so every loss variant
/// and every rerun sees the same plans.
pub fn step_plans(cfg: &DistillConfig, step: usize, n: usize, count: usize) -> Result<(f64, Vec<MaskPlan>)> {
    let final_step = cfg.steps.saturating_sub(1);
    let ratio = if final_step == 0 {
        ratio_at(&cfg.schedule, 0, 1)?
    } else {
        ratio_at(&cfg.schedule, step, final_step)?
    };
    let mut rng = Rng::with_stream(cfg.seed, step as u64);
    let plans = (0..count)
        .map(|_| sample_mask(n, ratio, cfg.span, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((ratio, plans))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: Student,
    pub log: Vec<StepMetrics>,
}

/// Initializes a student and distills `teacher` into it.
pub fn train(
    teacher: &Encoder,
    student_config: &EncoderConfig,
    student_pattern: &ReusePattern,
    cfg: &DistillConfig,
    source: &mut dyn FrameSource,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    let student = Student::init(student_config, student_pattern, rng)?;
    train_student(teacher, student, cfg, source)
}

/// Runs `cfg.steps` optimizer steps on an existing student.
pub fn train_student(
    teacher: &Encoder,
    mut student: Student,
    cfg: &DistillConfig,
    source: &mut dyn FrameSource,
) -> Result<TrainOutcome> {
    cfg.validate(student.config.num_layers)?;
    if source.frame_width() != student.config.input_width || source.frame_width() != teacher.config.input_width {
        return Err(Error::Config(format!(
            "frames are {} wide; student expects {}, teacher {}",
            source.frame_width(),
            student.config.input_width,
            teacher.config.input_width
        )));
    }
    let mut adam = Adam::new(&cfg.optimizer, &student.params);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let xs = source.batch(step as u64, cfg.batch)?;
        let n = xs[0].rows();
        let (ratio, plans) = step_plans(cfg, step, n, xs.len())?;
        let digest = batch_digest(&plans.iter().collect::<Vec<_>>());
        let batch: Vec<(Tensor, MaskPlan)> = xs.into_iter().zip(plans).collect();

        let (breakdown, grads) = loss_and_grads(&batch, teacher, &student, cfg).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
            other => other,
        })?;
        if breakdown.decomposition_gap() > DECOMPOSITION_TOL {
            return Err(Error::NonFinite(format!(
                "step {step}: total {} differs from recombined terms {}",
                breakdown.total,
                breakdown.recombined()
            )));
        }
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        adam.step(&mut student.params, &grads, lr);
        log.push(StepMetrics {
            version: METRICS_VERSION,
            step,
            ratio,
            lr,
            total: breakdown.total,
            masked: breakdown.masked,
            unmasked: breakdown.unmasked,
            mask_digest: digest,
        });
    }
    Ok(TrainOutcome { student, log })
}

/// Settings for briefly training a teacher on masked frame reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub ratio: f64,
    pub span: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 150,
            batch: 4,
            ratio: 0.4,
            span: DEFAULT_SPAN,
            optimizer: OptimizerConfig::default(),
            seed: 1,
        }
    }
}

/// Trains a fresh encoder to reconstruct masked input frames from its last
/// layer through a linear head, then drops the head. The mean per-frame
/// reconstruction distance of every step is returned alongside.
pub fn pretrain_teacher(
    config: &EncoderConfig,
    pattern: &ReusePattern,
    pre: &PretrainConfig,
    source: &mut dyn FrameSource,
    rng: &mut Rng,
) -> Result<(Encoder, Vec<f64>)> {
    let mut encoder = Encoder::init(config, pattern, rng)?;
    let mut head = ProjectionHead::init(1, config.model_width, config.input_width, rng);
    let mut losses = Vec::with_capacity(pre.steps);
    let mut adam_enc = Adam::new(&pre.optimizer, &encoder.weights);
    let mut adam_head = Adam::new(&pre.optimizer, &head);
    let last = config.num_layers - 1;
    for step in 0..pre.steps {
        let xs = source.batch(step as u64, pre.batch)?;
        let mut mrng = Rng::with_stream(pre.seed, step as u64);
        let mut tape = Tape::new();
        let ew = encoder.bind(&mut tape, true);
        let hw = head.map(&mut |t| tape.param(t));
        let mut items = Vec::with_capacity(xs.len());
        for x in &xs {
            let plan = sample_mask(x.rows(), pre.ratio, pre.span, &mut mrng)?;
            let xc = tape.constant(x);
            let input = tape.replace_rows(xc, &plan.masked, ew.mask_embedding)?;
            let traces = encoder_forward(&mut tape, input, config, pattern, &ew)?;
            let pred = linear(&mut tape, traces[last].hidden, &hw.layers[0])?;
            let diff = tape.sub(xc, pred)?;
            items.push((tape.row_norm_mean(diff, &plan.masked)?, 1.0 / xs.len() as f64));
        }
        let total = tape.weighted_sum(&items)?;
        tape.backward(total)
            .map_err(|e| Error::NonFinite(format!("teacher pretraining step {step}: {e}")))?;
        losses.push(tape.scalar(total));
        let grab = |v: &Var| {
            let shape = tape.value(*v).shape().to_vec();
            tape.grad(*v).map_or_else(
                || Tensor::zeros(&shape),
                |g| Tensor::new(&shape, g.to_vec()).expect("grad shape"),
            )
        };
        let eg = ew.map(&mut |v| grab(v));
        let hg = hw.map(&mut |v| grab(v));
        let lr = pre.optimizer.lr_at(step, pre.steps);
        adam_enc.step(&mut encoder.weights, &eg, lr);
        adam_head.step(&mut head, &hg, lr);
    }
    Ok((encoder, losses))
}
