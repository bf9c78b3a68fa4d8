//! Attention-map reuse patterns and parameter reinvestment.
//!
//! A pattern assigns each encoder layer either [`Directive::Compute`] (the
//! layer owns key/query weights and produces its own maps) or
//! [`Directive::Reuse`] (the layer consumes the maps of an earlier computing
//! layer and has no key/query weights at all). Layer indices in this module
//! are 1-based, matching how patterns are written in configs.
//!
//! Named patterns `NbyM` split the stack into `M` groups of `N` consecutive
//! layers; the first layer of each group computes and the other `N - 1`
//! reuse it. `2by6` on 12 layers is the alternating pattern whose sources are
//! `{1, 3, 5, 7, 9, 11}`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Directive {
    Compute,
    /// Reuse the maps of the given 1-based layer.
    Reuse {
        source: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReusePattern {
    directives: Vec<Directive>,
}

impl ReusePattern {
    /// Every layer computes its own maps.
    pub fn none(layers: usize) -> Self {
        Self {
            directives: vec![Directive::Compute; layers],
        }
    }

    /// Unvalidated; run [`validate`] before use.
    pub fn from_directives(directives: Vec<Directive>) -> Self {
        Self { directives }
    }

    /// Config-file codes: `0` computes, any other value is a 1-based source layer.
    pub fn from_codes(codes: &[usize]) -> Self {
        Self {
            directives: codes
                .iter()
                .map(|&c| match c {
                    0 => Directive::Compute,
                    source => Directive::Reuse { source },
                })
                .collect(),
        }
    }

    pub fn codes(&self) -> Vec<usize> {
        self.directives
            .iter()
            .map(|d| match d {
                Directive::Compute => 0,
                Directive::Reuse { source } => *source,
            })
            .collect()
    }

    pub fn directives(&self) -> &[Directive] {
        &self.directives
    }

    pub fn len(&self) -> usize {
        self.directives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    /// Directive of the 0-based layer `index`.
    pub fn directive(&self, index: usize) -> Directive {
        self.directives[index]
    }

    /// 1-based indices of the layers that compute their own maps.
    pub fn sources(&self) -> Vec<usize> {
        self.directives
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d, Directive::Compute))
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// 1-based indices of the layers that reuse maps.
    pub fn reusing_layers(&self) -> Vec<usize> {
        self.directives
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d, Directive::Reuse { .. }))
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn num_reusing(&self) -> usize {
        self.reusing_layers().len()
    }

    pub fn is_compute(&self, index: usize) -> bool {
        matches!(self.directives[index], Directive::Compute)
    }
}

impl fmt::Display for ReusePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: Vec<String> = self.codes().iter().map(usize::to_string).collect();
        write!(f, "[{}]", codes.join(", "))
    }
}

/// Pattern as written in a config file: a name or a list of codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PatternSpec {
    Name(String),
    Codes(Vec<usize>),
}

impl Default for PatternSpec {
    fn default() -> Self {
        PatternSpec::Name("none".into())
    }
}

impl PatternSpec {
    pub fn resolve(&self, layers: usize) -> Result<ReusePattern> {
        let pattern = match self {
            PatternSpec::Name(name) => parse_pattern(name, layers)?,
            PatternSpec::Codes(codes) => ReusePattern::from_codes(codes),
        };
        validate(&pattern, layers).map_err(Error::InvalidPattern)?;
        Ok(pattern)
    }
}

/// Parses `none`, `NbyM`, or an explicit code list such as `[0, 1, 0, 3]`.
pub fn parse_pattern(name: &str, layers: usize) -> Result<ReusePattern> {
    let trimmed = name.trim();
    if trimmed.eq_ignore_ascii_case("none") {
        return Ok(ReusePattern::none(layers));
    }
    if let Some((group, groups)) = split_nbym(trimmed)? {
        if group * groups != layers {
            return Err(Error::PatternArity {
                name: trimmed.to_string(),
                group,
                groups,
                layers,
            });
        }
        let directives = (0..layers)
            .map(|i| {
                let first = i - i % group;
                if i == first {
                    Directive::Compute
                } else {
                    Directive::Reuse { source: first + 1 }
                }
            })
            .collect();
        return Ok(ReusePattern { directives });
    }
    parse_code_list(trimmed)
}

fn split_nbym(s: &str) -> Result<Option<(usize, usize)>> {
    let Some((a, b)) = s.split_once("by") else {
        return Ok(None);
    };
    if a.is_empty() || !a.bytes().all(|c| c.is_ascii_digit()) {
        return Ok(None);
    }
    let group: usize = a.parse().map_err(|_| Error::PatternParse {
        position: 0,
        message: format!("bad group size `{a}`"),
    })?;
    let groups: usize = b.parse().map_err(|_| Error::PatternParse {
        position: a.len() + 2,
        message: format!("bad group count `{b}`"),
    })?;
    if group == 0 || groups == 0 {
        return Err(Error::PatternParse {
            position: 0,
            message: "group size and count must be positive".into(),
        });
    }
    Ok(Some((group, groups)))
}

fn parse_code_list(s: &str) -> Result<ReusePattern> {
    let inner = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).unwrap_or(s);
    if inner.trim().is_empty() {
        return Err(Error::PatternParse {
            position: 0,
            message: format!("unknown pattern `{s}`"),
        });
    }
    let codes = inner
        .split(',')
        .enumerate()
        .map(|(i, tok)| {
            tok.trim().parse::<usize>().map_err(|_| Error::PatternParse {
                position: i,
                message: format!("`{}` is not a layer code", tok.trim()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReusePattern::from_codes(&codes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    LengthMismatch { expected: usize, actual: usize },
    FirstLayerReuses,
    SourceAfterConsumer { layer: usize, source: usize },
    ChainedReuse { layer: usize, source: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { expected, actual } => {
                write!(f, "pattern has {actual} layers, encoder has {expected}")
            }
            Violation::FirstLayerReuses => write!(f, "layer 1 must compute its own maps"),
            Violation::SourceAfterConsumer { layer, source } => {
                write!(f, "source after consumer: layer {layer} reuses layer {source}")
            }
            Violation::ChainedReuse { layer, source } => {
                write!(
                    f,
                    "chained reuse: layer {layer} reuses layer {source}, which itself reuses"
                )
            }
        }
    }
}

/// Checks every pattern invariant and reports all violations.
pub fn validate(pattern: &ReusePattern, layers: usize) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if pattern.len() != layers {
        out.push(Violation::LengthMismatch {
            expected: layers,
            actual: pattern.len(),
        });
    }
    for (i, d) in pattern.directives.iter().enumerate() {
        let layer = i + 1;
        let Directive::Reuse { source } = *d else { continue };
        if layer == 1 {
            out.push(Violation::FirstLayerReuses);
        } else if source >= layer || source == 0 {
            out.push(Violation::SourceAfterConsumer { layer, source });
        } else if !matches!(pattern.directives[source - 1], Directive::Compute) {
            out.push(Violation::ChainedReuse { layer, source });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinvestmentPlan {
    pub saved_params: u64,
    pub new_ffn_width: usize,
    /// Parameters after reuse and reinvestment minus the no-reuse baseline.
    pub net_param_change: i64,
}

/// Widens every FFN as far as the key/query savings of `pattern` allow,
/// in steps of `width_granularity`.
pub fn solve_reinvestment(
    config: &EncoderConfig,
    pattern: &ReusePattern,
    width_granularity: usize,
) -> Result<ReinvestmentPlan> {
    let saved = accounting::kq_params_per_layer(config) * pattern.num_reusing() as u64;
    solve_reinvestment_within(config, pattern, width_granularity, saved)
}

/// Like [`solve_reinvestment`] but spends at most `budget` parameters. The
/// `-up` pattern variants use this to land on the `2by6` parameter total.
pub fn solve_reinvestment_within(
    config: &EncoderConfig,
    pattern: &ReusePattern,
    width_granularity: usize,
    budget: u64,
) -> Result<ReinvestmentPlan> {
    if width_granularity == 0 {
        return Err(Error::Config("width granularity must be at least 1".into()));
    }
    validate(pattern, config.num_layers).map_err(Error::InvalidPattern)?;
    let saved = accounting::kq_params_per_layer(config) * pattern.num_reusing() as u64;
    let budget = budget.min(saved);

    let base = accounting::ffn_params_per_layer(config, config.ffn_width);
    let layers = config.num_layers as u64;
    let growth = |w: usize| layers * (accounting::ffn_params_per_layer(config, w) - base);
    let mut width = config.ffn_width;
    while growth(width + width_granularity) <= budget {
        width += width_granularity;
    }
    Ok(ReinvestmentPlan {
        saved_params: saved,
        new_ffn_width: width,
        net_param_change: growth(width) as i64 - saved as i64,
    })
}

/// Suffix marking a pattern whose FFN absorbs part of its savings.
pub const UP_SUFFIX: &str = "-up";

/// Splits a trailing [`UP_SUFFIX`] off a pattern name.
pub fn split_up_suffix(name: &str) -> (&str, bool) {
    match name.trim().strip_suffix(UP_SUFFIX) {
        Some(base) => (base, true),
        None => (name.trim(), false),
    }
}

/// Widens the FFN of `config` by the savings `pattern` has beyond
/// `reference`, so both patterns end up with about the same parameter total.
pub fn widen_to_match(
    config: &EncoderConfig,
    pattern: &ReusePattern,
    reference: &ReusePattern,
    width_granularity: usize,
) -> Result<(EncoderConfig, ReinvestmentPlan)> {
    let per_layer = accounting::kq_params_per_layer(config);
    let budget = (per_layer * pattern.num_reusing() as u64).saturating_sub(per_layer * reference.num_reusing() as u64);
    let plan = solve_reinvestment_within(config, pattern, width_granularity, budget)?;
    let mut widened = config.clone();
    widened.ffn_width = plan.new_ffn_width;
    Ok((widened, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> Vec<usize> {
        v.to_vec()
    }

    #[test]
    fn up_variants_land_on_the_reference_total() {
        let cfg = EncoderConfig::speech_student(432, 816);
        let reference = parse_pattern("2by6", 12).unwrap();
        let target = accounting::count_params(&cfg, &reference).params_total;
        for name in ["6by2-up", "3by4-up"] {
            let (base, up) = split_up_suffix(name);
            assert!(up);
            let p = parse_pattern(base, 12).unwrap();
            let (wide, plan) = widen_to_match(&cfg, &p, &reference, 16).unwrap();
            assert!(plan.new_ffn_width > 816);
            let total = accounting::count_params(&wide, &p).params_total;
            assert!(
                total <= target && target - total < 12 * 16 * 2 * 433,
                "{name}: {total} vs {target}"
            );
        }
        assert_eq!(split_up_suffix("2by6"), ("2by6", false));
    }

    #[test]
    fn named_patterns_on_twelve_layers() {
        assert_eq!(parse_pattern("2by6", 12).unwrap().sources(), set(&[1, 3, 5, 7, 9, 11]));
        assert_eq!(parse_pattern("3by4", 12).unwrap().sources(), set(&[1, 4, 7, 10]));
        let p = parse_pattern("6by2", 12).unwrap();
        assert_eq!(p.sources(), set(&[1, 7]));
        assert_eq!(p.directive(5), Directive::Reuse { source: 1 });
        assert_eq!(p.directive(11), Directive::Reuse { source: 7 });
        assert_eq!(parse_pattern("none", 12).unwrap(), ReusePattern::none(12));
    }

    #[test]
    fn alternating_pattern_reuses_previous_layer() {
        let p = parse_pattern("2by6", 12).unwrap();
        for layer in (2..=12).step_by(2) {
            assert_eq!(p.directive(layer - 1), Directive::Reuse { source: layer - 1 });
        }
    }

    #[test]
    fn arity_and_parse_errors() {
        assert!(matches!(parse_pattern("5by3", 12), Err(Error::PatternArity { .. })));
        match parse_pattern("[0, 1, x, 3]", 4) {
            Err(Error::PatternParse { position, .. }) => assert_eq!(position, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_pattern("banana", 4).is_err());
        assert!(parse_pattern("0by4", 4).is_err());
    }

    #[test]
    fn explicit_code_list() {
        let p = parse_pattern("[0, 1, 0, 3]", 4).unwrap();
        assert_eq!(p, parse_pattern("2by2", 4).unwrap());
        assert_eq!(p.to_string(), "[0, 1, 0, 3]");
    }

    #[test]
    fn validate_reports_every_violation() {
        assert!(validate(&ReusePattern::none(5), 5).is_ok());

        let forward = ReusePattern::from_codes(&[0, 0, 5, 0, 0]);
        let v = validate(&forward, 5).unwrap_err();
        assert!(v[0].to_string().contains("source after consumer"));

        let chained = ReusePattern::from_codes(&[0, 1, 0, 2]);
        let v = validate(&chained, 4).unwrap_err();
        assert_eq!(v, vec![Violation::ChainedReuse { layer: 4, source: 2 }]);
        assert!(v[0].to_string().contains("chained reuse"));

        let many = ReusePattern::from_codes(&[1, 3, 2]);
        let v = validate(&many, 4).unwrap_err();
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn no_reuse_means_no_reinvestment() {
        let cfg = EncoderConfig::speech_student(432, 816);
        let plan = solve_reinvestment(&cfg, &ReusePattern::none(12), 16).unwrap();
        assert_eq!(
            plan,
            ReinvestmentPlan {
                saved_params: 0,
                new_ffn_width: 816,
                net_param_change: 0
            }
        );
    }

    #[test]
    fn savings_at_432_without_biases() {
        let mut cfg = EncoderConfig::speech_student(432, 816);
        cfg.include_biases = false;
        let plan = solve_reinvestment(&cfg, &parse_pattern("2by6", 12).unwrap(), 1).unwrap();
        assert_eq!(plan.saved_params, 6 * 2 * 432 * 432);
        assert!(plan.net_param_change <= 0);
    }
}
