//! Aligned plain-text renderings of the JSON reports.

use std::fmt::Write as _;

use humanlike_core::arena::{RetentionReport, SelectionReport};
use humanlike_core::data::{DatasetStats, LengthStats};

pub fn stats_text(stats: &DatasetStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "records  {}", stats.records);
    let _ = writeln!(out, "topics   {}", stats.topic_count);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>6} {:>6} {:>6} {:>6}",
        "chars", "min", "p10", "p50", "p90", "max"
    );
    let row = |out: &mut String, name: &str, l: &LengthStats| {
        let _ = writeln!(
            out,
            "{name:<10} {:>6} {:>6} {:>6} {:>6} {:>6}",
            l.min, l.p10, l.p50, l.p90, l.max
        );
    };
    row(&mut out, "prompt", &stats.prompt_chars);
    row(&mut out, "chosen", &stats.chosen_chars);
    row(&mut out, "rejected", &stats.rejected_chars);
    if !stats.topics.is_empty() {
        let width = stats
            .topics
            .keys()
            .map(|k| k.chars().count())
            .max()
            .unwrap_or(0)
            .max("topic".len());
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<width$} {:>7}", "topic", "records");
        for (topic, n) in &stats.topics {
            let _ = writeln!(out, "{topic:<width$} {n:>7}");
        }
    }
    out
}

pub fn selection_text(report: &SelectionReport) -> String {
    let mut out = String::new();
    if report.pairs.is_empty() {
        let _ = writeln!(out, "no votes yet");
        return out;
    }
    let width = report
        .pairs
        .iter()
        .flat_map(|p| p.models.iter().map(|m| m.model.chars().count()))
        .max()
        .unwrap_or(0)
        .max("model".len());
    let _ = writeln!(
        out,
        "{:<width$} {:>6} {:>7} {:>17}",
        "model", "votes", "rate %", "wilson 95% %"
    );
    for pair in &report.pairs {
        for m in &pair.models {
            let ci = format!("[{:.1}, {:.1}]", m.wilson_low, m.wilson_high);
            let _ = writeln!(
                out,
                "{:<width$} {:>6} {:>7.1} {:>17}",
                m.model, m.votes, m.selection_rate, ci
            );
        }
        let _ = writeln!(out, "{:<width$} {:>6}", "  pair total", pair.total);
    }
    let _ = writeln!(out, "total votes {}", report.total_votes);
    out
}

pub fn retention_text(r: &RetentionReport) -> String {
    format!(
        "base perplexity   {:.4}\ntuned perplexity  {:.4}\nratio             {:.4}\n",
        r.base_ppl, r.tuned_ppl, r.ratio
    )
}
