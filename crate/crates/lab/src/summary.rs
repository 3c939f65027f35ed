//! Human-readable summary of a sweep: one row per (scheme, depth) with
//! median diagnostics, flagging scheme groups whose squared-Jacobian medians
//! spread wider than the flatness band across the depth axis.

use std::collections::BTreeMap;

use dtfixup_core::diagnostics::{median, DiagnosticsReport};
use dtfixup_core::init::InitKind;

use crate::LabError;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheme: InitKind,
    pub relational: bool,
    pub n_blocks: usize,
    pub cells: usize,
    pub median_jacobian: f64,
    pub median_cond_times_n: f64,
    pub median_drift: f64,
    pub median_update: f64,
    /// Whether this scheme's jacobian medians spread beyond the band across
    /// the swept depths.
    pub band_violated: bool,
}

fn scheme_order(kind: InitKind) -> u8 {
    match kind {
        InitKind::StandardLn => 0,
        InitKind::TFixup => 1,
        InitKind::DtFixup => 2,
        InitKind::Xavier => 3,
    }
}

/// Aggregates reports into per-(scheme, depth) medians. Errors on empty
/// input.
pub fn summarize(reports: &[DiagnosticsReport], band: f64) -> Result<Vec<SummaryRow>, LabError> {
    if reports.is_empty() {
        return Err(LabError::Usage("no reports to summarize".into()));
    }
    let mut groups: BTreeMap<(u8, bool, usize), Vec<&DiagnosticsReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((scheme_order(r.scheme), r.relational, r.n_blocks))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .values()
        .map(|members| {
            let jac: Vec<f64> = members.iter().map(|r| r.jacobian_norm_sq).collect();
            let cond: Vec<f64> = members.iter().map(|r| r.cond_times_n_median()).collect();
            let drift: Vec<f64> = members.iter().map(|r| r.hidden_drift).collect();
            let update: Vec<f64> = members.iter().map(|r| r.update_ratio).collect();
            SummaryRow {
                scheme: members[0].scheme,
                relational: members[0].relational,
                n_blocks: members[0].n_blocks,
                cells: members.len(),
                median_jacobian: median(&jac),
                median_cond_times_n: median(&cond),
                median_drift: median(&drift),
                median_update: median(&update),
                band_violated: false,
            }
        })
        .collect();

    // Flatness is a property of a scheme across depths: flag the whole group
    // when its max/min median jacobian exceeds the band.
    let mut spreads: BTreeMap<(u8, bool), (f64, f64)> = BTreeMap::new();
    for row in &rows {
        let entry = spreads
            .entry((scheme_order(row.scheme), row.relational))
            .or_insert((f64::INFINITY, 0.0));
        entry.0 = entry.0.min(row.median_jacobian);
        entry.1 = entry.1.max(row.median_jacobian);
    }
    for row in &mut rows {
        let (lo, hi) = spreads[&(scheme_order(row.scheme), row.relational)];
        row.band_violated = lo > 0.0 && hi / lo > band;
    }
    Ok(rows)
}

/// Fixed-width table over the summary rows.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:<4} {:>3} {:>6} {:>14} {:>14} {:>10} {:>12}  {}\n",
        "scheme", "rel", "N", "cells", "jacobian_sq", "cond*N", "drift", "update", "theta"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<4} {:>3} {:>6} {:>14.6e} {:>14.6e} {:>10.4} {:>12.6e}  {}\n",
            r.scheme.name(),
            if r.relational { "yes" } else { "no" },
            r.n_blocks,
            r.cells,
            r.median_jacobian,
            r.median_cond_times_n,
            r.median_drift,
            r.median_update,
            if r.band_violated { "✗" } else { "ok" },
        ));
    }
    out
}
