use attnreuse_core::accounting::{count_macs, count_params};
use attnreuse_core::encoder::EncoderConfig;
use attnreuse_core::masking::{ratio_at, sample_mask, RatioSchedule};
use attnreuse_core::reuse::{parse_pattern, solve_reinvestment, validate};
use attnreuse_core::Rng;
use proptest::prelude::*;

proptest! {
    #[test]
    fn omitted_macs_are_half_of_mhsa(n in 1u64..4000, heads in 1usize..17, per_head in 1usize..97) {
        let mut cfg = EncoderConfig::speech_student(heads * per_head, 1);
        cfg.num_heads = heads;
        let r = count_macs(&cfg, &parse_pattern("2by6", 12).unwrap(), n).unwrap();
        prop_assert_eq!(2 * r.per_layer_omitted_macs, r.per_layer_mhsa_macs);
    }

    #[test]
    fn group_patterns_are_valid(n in 1usize..7, m in 1usize..7) {
        let p = parse_pattern(&format!("{n}by{m}"), n * m).unwrap();
        prop_assert!(validate(&p, n * m).is_ok());
        let expected: Vec<usize> = (0..m).map(|g| g * n + 1).collect();
        prop_assert_eq!(p.sources(), expected);
        prop_assert_eq!(p.num_reusing(), (n - 1) * m);
    }

    #[test]
    fn mismatched_group_arity_is_rejected(n in 1usize..7, m in 1usize..7, layers in 1usize..40) {
        prop_assume!(n * m != layers);
        let name = format!("{n}by{m}");
        prop_assert!(parse_pattern(&name, layers).is_err());
    }

    #[test]
    fn reuse_never_adds_parameters(n in 1usize..5, m in 1usize..5, per_head in 1usize..9, ffn in 1usize..64) {
        let cfg = EncoderConfig::toy(n * m, 2 * per_head, 2, ffn, 3);
        let base = count_params(&cfg, &parse_pattern("none", n * m).unwrap()).params_total;
        let reused = count_params(&cfg, &parse_pattern(&format!("{n}by{m}"), n * m).unwrap()).params_total;
        prop_assert!(reused <= base);
        let plan = solve_reinvestment(&cfg, &parse_pattern(&format!("{n}by{m}"), n * m).unwrap(), 1).unwrap();
        prop_assert!(plan.net_param_change <= 0);
        prop_assert!(plan.new_ffn_width >= ffn);
    }

    #[test]
    fn mask_counts_stay_in_bounds(seed in any::<u64>(), n in 20usize..400, ratio in 0.05f64..0.9, span in 1usize..12) {
        let target = (ratio * n as f64).round() as usize;
        prop_assume!(target >= 1 && target < n && span <= n);
        let plan = sample_mask(n, ratio, span, &mut Rng::new(seed)).unwrap();
        prop_assert!(plan.len() >= target && plan.len() < target + span);
        prop_assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(plan.len() + plan.unmasked().len(), n);
    }

    #[test]
    fn linear_schedule_is_monotone(total in 1usize..500) {
        let s = RatioSchedule::Linear { start: 0.4, end: 0.8 };
        let r: Vec<f64> = (0..=total).map(|t| ratio_at(&s, t, total).unwrap()).collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[0], 0.4);
        prop_assert_eq!(r[total], 0.8);
    }
}

#[test]
fn empirical_mask_ratio_tracks_target() {
    for ratio in [0.4, 0.6, 0.8] {
        let mean = (0..100)
            .map(|seed| sample_mask(1000, ratio, 10, &mut Rng::new(seed)).unwrap().ratio())
            .sum::<f64>()
            / 100.0;
        assert!((mean - ratio).abs() < 0.02, "{ratio}: {mean}");
    }
}
