//! Metrics log writers: JSON lines and CSV.
//!
//! Each JSON line is one [`StepMetrics`] record. The CSV header is
//! `version,step,ratio,lr,total,mask_digest,lm_1..lm_L,lu_1..lu_L`.

use std::fmt::Write as _;

use crate::distill::StepMetrics;

pub fn to_jsonl(log: &[StepMetrics]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn csv_header(layers: usize) -> String {
    let mut h = String::from("version,step,ratio,lr,total,mask_digest");
    for l in 1..=layers {
        let _ = write!(h, ",lm_{l}");
    }
    for l in 1..=layers {
        let _ = write!(h, ",lu_{l}");
    }
    h
}

pub fn to_csv(log: &[StepMetrics], layers: usize) -> String {
    let mut out = csv_header(layers);
    out.push('\n');
    for r in log {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.version, r.step, r.ratio, r.lr, r.total, r.mask_digest
        );
        for v in r.masked.iter().chain(&r.unmasked) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Mean total over the first and last `window` records.
pub fn smoothed_ends(log: &[StepMetrics], window: usize) -> Option<(f64, f64)> {
    if window == 0 || log.len() < window {
        return None;
    }
    let mean = |rs: &[StepMetrics]| rs.iter().map(|r| r.total).sum::<f64>() / rs.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}

/// Minimal SVG line chart of the total loss per step.
pub fn loss_svg(log: &[StepMetrics]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let max = log.iter().map(|r| r.total).fold(f64::MIN_POSITIVE, f64::max);
    let steps = log.len().max(2) as f64 - 1.0;
    let points: Vec<String> = log
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let x = pad + (w - 2.0 * pad) * i as f64 / steps;
            let y = h - pad - (h - 2.0 * pad) * r.total / max;
            format!("{x:.2},{y:.2}")
        })
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<text x=\"{p}\" y=\"{t}\" font-size=\"12\">total loss (max {max:.4})</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        p = pad,
        b = h - pad,
        r = w - pad,
        t = pad - 10.0,
        max = max,
        pts = points.join(" ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::METRICS_VERSION;

    fn rec(step: usize, total: f64) -> StepMetrics {
        StepMetrics {
            version: METRICS_VERSION,
            step,
            ratio: 0.4,
            lr: 1e-3,
            total,
            masked: vec![1.0, 2.0],
            unmasked: vec![0.5, 0.25],
            mask_digest: "abcd".into(),
        }
    }

    #[test]
    fn csv_and_jsonl_shapes() {
        let log = vec![rec(0, 3.0), rec(1, 2.0)];
        let csv = to_csv(&log, 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "version,step,ratio,lr,total,mask_digest,lm_1,lm_2,lu_1,lu_2");
        assert_eq!(lines[2], "1,1,0.4,0.001,2,abcd,1,2,0.5,0.25");
        let json = to_jsonl(&log);
        assert_eq!(json.lines().count(), 2);
        let back: StepMetrics = serde_json::from_str(json.lines().next().unwrap()).unwrap();
        assert_eq!(back, log[0]);
        assert_eq!(to_csv(&[], 2).lines().count(), 1);
    }

    #[test]
    fn smoothing_windows() {
        let log: Vec<_> = (0..20).map(|i| rec(i, 20.0 - i as f64)).collect();
        let (a, b) = smoothed_ends(&log, 10).unwrap();
        assert_eq!((a, b), (15.5, 5.5));
        assert!(smoothed_ends(&log[..5], 10).is_none());
        assert!(loss_svg(&log).contains("<polyline"));
    }
}
