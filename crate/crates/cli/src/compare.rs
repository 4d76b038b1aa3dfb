//! Report comparison: per-metric deltas between two runs.

use fleetsim::MetricsReport;
use serde::Serialize;

/// Whether a bigger value is better for a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricDelta {
    pub metric: &'static str,
    pub direction: Direction,
    pub a: f64,
    pub b: f64,
    /// (b - a) / a, percent.
    pub change_pct: Option<f64>,
    /// Direction-aware improvement percent, benchmark-table style:
    /// gain for higher-better metrics, reduction for lower-better ones.
    pub improvement_pct: Option<f64>,
    /// ln(b / a); antisymmetric under swapping the reports.
    pub log_ratio: Option<f64>,
}

fn delta(metric: &'static str, direction: Direction, a: f64, b: f64) -> MetricDelta {
    let change_pct = (a != 0.0).then(|| (b - a) / a * 100.0);
    let improvement_pct = change_pct.map(|c| match direction {
        Direction::HigherBetter => c,
        Direction::LowerBetter => -c,
    });
    let log_ratio = (a > 0.0 && b > 0.0).then(|| (b / a).ln());
    MetricDelta {
        metric,
        direction,
        a,
        b,
        change_pct,
        improvement_pct,
        log_ratio,
    }
}

/// Metric-by-metric comparison of two reports (B relative to A).
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Vec<MetricDelta> {
    use Direction::*;
    vec![
        delta("total_throughput_tps", HigherBetter, a.total_throughput_tps, b.total_throughput_tps),
        delta(
            "decode_throughput_tps",
            HigherBetter,
            a.decode_throughput_tps,
            b.decode_throughput_tps,
        ),
        delta("ttft_avg_ms", LowerBetter, a.ttft_avg_ms, b.ttft_avg_ms),
        delta("ttft_p99_ms", LowerBetter, a.ttft_p99_ms, b.ttft_p99_ms),
        delta("itl_avg_ms", LowerBetter, a.itl_avg_ms, b.itl_avg_ms),
        delta("itl_p99_ms", LowerBetter, a.itl_p99_ms, b.itl_p99_ms),
        delta("e2e_avg_ms", LowerBetter, a.e2e_avg_ms, b.e2e_avg_ms),
        delta("e2e_p99_ms", LowerBetter, a.e2e_p99_ms, b.e2e_p99_ms),
        delta("completion_time_s", LowerBetter, a.completion_time_s, b.completion_time_s),
        delta("local_hit_ratio", HigherBetter, a.local_hit_ratio, b.local_hit_ratio),
        delta("cost", LowerBetter, a.cost, b.cost),
    ]
}

pub fn render(deltas: &[MetricDelta]) -> String {
    let fmt_opt = |v: Option<f64>, suffix: &str| match v {
        Some(x) => format!("{x:+.2}{suffix}"),
        None => "n/a".to_string(),
    };
    let mut s = format!(
        "{:<24} {:>14} {:>14} {:>12} {:>13}\n",
        "Metric", "A", "B", "Change", "Improvement"
    );
    for d in deltas {
        s.push_str(&format!(
            "{:<24} {:>14.2} {:>14.2} {:>12} {:>13}\n",
            d.metric,
            d.a,
            d.b,
            fmt_opt(d.change_pct, "%"),
            fmt_opt(d.improvement_pct, "%"),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(throughput: f64, ttft_avg: f64) -> MetricsReport {
        MetricsReport {
            total_throughput_tps: throughput,
            ttft_avg_ms: ttft_avg,
            ..Default::default()
        }
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let a = report_with(100.0, 50.0);
        for d in compare(&a, &a) {
            if let Some(c) = d.change_pct {
                assert_eq!(c, 0.0, "{}", d.metric);
            }
            if let Some(l) = d.log_ratio {
                assert_eq!(l, 0.0, "{}", d.metric);
            }
        }
    }

    #[test]
    fn throughput_improvement_matches_reference_row() {
        // 1802.30 -> 4133.45 is a +129.34% gain
        let a = report_with(1802.30, 0.0);
        let b = report_with(4133.45, 0.0);
        let d = &compare(&a, &b)[0];
        assert!(
            (d.improvement_pct.unwrap() - 129.34).abs() < 0.005,
            "got {:?}",
            d.improvement_pct
        );
    }

    #[test]
    fn latency_improvement_is_reduction() {
        // 3067.07 -> 825.77 TTFT is a +73.08% improvement
        let a = report_with(0.0, 3067.07);
        let b = report_with(0.0, 825.77);
        let d = compare(&a, &b)
            .into_iter()
            .find(|d| d.metric == "ttft_avg_ms")
            .unwrap();
        assert!((d.improvement_pct.unwrap() - 73.08).abs() < 0.005);
    }

    #[test]
    fn log_ratio_is_antisymmetric_under_swap() {
        let a = report_with(1802.30, 3067.07);
        let b = report_with(4133.45, 825.77);
        let fwd = compare(&a, &b);
        let back = compare(&b, &a);
        for (f, r) in fwd.iter().zip(&back) {
            if let (Some(x), Some(y)) = (f.log_ratio, r.log_ratio) {
                assert!((x + y).abs() < 1e-12, "{} not antisymmetric", f.metric);
            }
        }
    }
}
