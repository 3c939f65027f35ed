//! Acceptance suite: every stability property the library promises, checked
//! end to end at its stated tolerance, one pass/fail line per criterion.
//!
//! Run with `cargo test -p dtfixup-lab --test acceptance -- --nocapture` to
//! see the per-criterion lines and timings.

use std::collections::BTreeMap;
use std::time::Instant;

use dtfixup_core::checks::{
    check_encoder_gradients, check_oracle_autodiff_equivalence, check_oracle_self_consistency,
    check_primitive_gradients, check_relational_reduction,
};
use dtfixup_core::diagnostics::{median, DiagnosticsReport};
use dtfixup_core::init::InitKind;
use dtfixup_lab::config::{parse_config, ExperimentConfig};
use dtfixup_lab::csv_io::diagnostics_csv;
use dtfixup_lab::harness::{
    run_depth_sweep, run_sweep_cell, run_training, smoothed_eval, sweep_cells,
};

const SEED: u64 = 2024;
const FLATNESS_BAND: f64 = 4.0;
const CONDITION_BAND: (f64, f64) = (0.25, 4.0);
const DRIFT_BAND: (f64, f64) = (0.9, 1.1);
const UNSCALED_DRIFT_MIN: f64 = 1.5;
const CONTRAST_GROWTH_MIN: f64 = 2.0;
const ETA_STABILITY_TOL: f64 = 0.05;
const TRAINING_TARGET: f64 = 0.5;
const BASELINE_STALL: f64 = 0.9;
const SMOOTHING_WINDOW: usize = 100;

/// The frozen sweep shape: the near-scalar projection regime the theory's
/// constants are stated in (width-1 heads and MLP at model width 64).
fn sweep_config(relational: bool) -> ExperimentConfig {
    let relational_keys = if relational {
        "relational = true\nn_relations = 8\n"
    } else {
        "relational = false\n"
    };
    parse_config(&format!(
        "schemes = [dtfixup, xavier]\n\
         depths = [2, 4, 8, 16, 32]\n\
         mu_targets = [5, 10, 20]\n\
         seq_len = 8\n\
         d_x = 64\n\
         d_z = 1\n\
         n_heads = 1\n\
         mlp_hidden = 1\n\
         {relational_keys}\
         seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19]\n"
    ))
    .expect("frozen sweep config parses")
}

/// The frozen training fixture: thresholds calibrated on the reference seed.
fn training_config() -> ExperimentConfig {
    parse_config(
        "schemes = [dtfixup, xavier]\n\
         depths = [16]\n\
         mu_targets = [10]\n\
         seq_len = 8\n\
         d_x = 32\n\
         d_z = 8\n\
         n_heads = 4\n\
         mlp_hidden = 64\n\
         relational = false\n\
         seeds = [0]\n\
         train_task_size = 128\n\
         train_eval_size = 32\n\
         train_steps = 2000\n\
         train_batch_size = 8\n\
         train_base_eta = 0.01\n",
    )
    .expect("frozen training config parses")
}

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn new() -> Self {
        Self {
            failures: Vec::new(),
        }
    }

    fn criterion(&mut self, number: usize, name: &str, outcome: Result<(), String>) {
        match outcome {
            Ok(()) => println!("PASS criterion {number}: {name}"),
            Err(reason) => {
                println!("FAIL criterion {number}: {name}: {reason}");
                self.failures.push(format!("criterion {number}: {reason}"));
            }
        }
    }
}

fn group_medians<K: Ord>(
    reports: &[DiagnosticsReport],
    key: impl Fn(&DiagnosticsReport) -> Option<K>,
    value: impl Fn(&DiagnosticsReport) -> f64,
) -> BTreeMap<K, f64> {
    let mut groups: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for r in reports {
        if let Some(k) = key(r) {
            groups.entry(k).or_default().push(value(r));
        }
    }
    groups
        .into_iter()
        .map(|(k, vs)| (k, median(&vs)))
        .collect()
}

/// Per-(mu, depth) medians of a per-report value, restricted to one scheme.
fn medians_by_mu_depth(
    reports: &[DiagnosticsReport],
    scheme: InitKind,
    value: impl Fn(&DiagnosticsReport) -> f64,
) -> BTreeMap<(u64, usize), f64> {
    group_medians(
        reports,
        |r| (r.scheme == scheme).then_some((r.mu_target.to_bits(), r.n_blocks)),
        value,
    )
}

fn flatness(reports: &[DiagnosticsReport], label: &str) -> Result<(), String> {
    let medians = medians_by_mu_depth(reports, InitKind::DtFixup, |r| r.jacobian_norm_sq);
    let mut by_mu: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for ((mu, _n), v) in &medians {
        by_mu.entry(*mu).or_default().push(*v);
    }
    for (mu, vs) in by_mu {
        let lo = vs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vs.iter().cloned().fold(0.0f64, f64::max);
        if hi / lo >= FLATNESS_BAND {
            return Err(format!(
                "{label}: jacobian medians spread {:.2}x at mu={} (band {FLATNESS_BAND}x)",
                hi / lo,
                f64::from_bits(mu)
            ));
        }
    }
    Ok(())
}

fn contrast_growth(reports: &[DiagnosticsReport], label: &str) -> Result<(), String> {
    let medians = medians_by_mu_depth(reports, InitKind::Xavier, |r| r.jacobian_norm_sq);
    let mut by_mu: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
    for ((mu, n), v) in &medians {
        by_mu.entry(*mu).or_default().push((*n, *v));
    }
    for (mu, mut series) in by_mu {
        series.sort_by_key(|(n, _)| *n);
        let mu = f64::from_bits(mu);
        for pair in series.windows(2) {
            if pair[1].1 <= pair[0].1 {
                return Err(format!(
                    "{label}: unscaled jacobian not monotone at mu={mu} (N={} -> N={})",
                    pair[0].0, pair[1].0
                ));
            }
        }
        let growth = series.last().unwrap().1 / series.first().unwrap().1;
        if growth < CONTRAST_GROWTH_MIN {
            return Err(format!(
                "{label}: unscaled jacobian grew only {growth:.2}x at mu={mu}"
            ));
        }
    }
    Ok(())
}

fn condition_band(reports: &[DiagnosticsReport], label: &str) -> Result<(), String> {
    // Median over seeds of condition * N, separately for every layer of
    // every (mu, depth) cell.
    let mut groups: BTreeMap<(u64, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in reports {
        if r.scheme != InitKind::DtFixup {
            continue;
        }
        for (layer, &c) in r.layer_conditions.iter().enumerate() {
            groups
                .entry((r.mu_target.to_bits(), r.n_blocks, layer))
                .or_default()
                .push(c * r.n_blocks as f64);
        }
    }
    for ((mu, n, layer), vs) in groups {
        let m = median(&vs);
        if !(CONDITION_BAND.0..=CONDITION_BAND.1).contains(&m) {
            return Err(format!(
                "{label}: condition*N median {m:.4} outside {CONDITION_BAND:?} \
                 at mu={}, N={n}, layer {layer}",
                f64::from_bits(mu)
            ));
        }
    }
    Ok(())
}

fn drift_bands(reports: &[DiagnosticsReport], label: &str) -> Result<(), String> {
    for ((mu, n), drift) in medians_by_mu_depth(reports, InitKind::DtFixup, |r| r.hidden_drift) {
        if !(DRIFT_BAND.0..=DRIFT_BAND.1).contains(&drift) {
            return Err(format!(
                "{label}: scaled drift median {drift:.4} outside {DRIFT_BAND:?} at mu={}, N={n}",
                f64::from_bits(mu)
            ));
        }
    }
    // The contrast hypothesis is stated at pretrained-encoder scale, mu ~ 10.
    let unscaled = medians_by_mu_depth(reports, InitKind::Xavier, |r| r.hidden_drift);
    let at_reference = unscaled
        .get(&(10.0f64.to_bits(), 16))
        .ok_or_else(|| format!("{label}: no unscaled N=16 mu=10 cells"))?;
    if *at_reference < UNSCALED_DRIFT_MIN {
        return Err(format!(
            "{label}: unscaled N=16 drift median {at_reference:.4} < {UNSCALED_DRIFT_MIN}"
        ));
    }
    Ok(())
}

fn update_flatness(reports: &[DiagnosticsReport], label: &str) -> Result<(), String> {
    let medians = medians_by_mu_depth(reports, InitKind::DtFixup, |r| r.update_ratio);
    let mut by_mu: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for ((mu, _n), v) in &medians {
        by_mu.entry(*mu).or_default().push(*v);
    }
    for (mu, vs) in by_mu {
        let lo = vs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vs.iter().cloned().fold(0.0f64, f64::max);
        if hi / lo >= FLATNESS_BAND {
            return Err(format!(
                "{label}: update ratios spread {:.2}x at mu={} (band {FLATNESS_BAND}x)",
                hi / lo,
                f64::from_bits(mu)
            ));
        }
    }
    Ok(())
}

fn eta_stability(config: &ExperimentConfig, label: &str) -> Result<(), String> {
    let mut coarse = config.clone();
    coarse.probe_eta = 1e-4;
    let mut fine = config.clone();
    fine.probe_eta = 1e-5;
    let cells: Vec<_> = sweep_cells(config)
        .into_iter()
        .filter(|c| {
            c.scheme == InitKind::DtFixup
                && c.n_blocks == 16
                && c.mu_target == 10.0
                && c.seed < 5
        })
        .collect();
    if cells.is_empty() {
        return Err(format!("{label}: no reference cells for the eta check"));
    }
    for cell in cells {
        let at_coarse = run_sweep_cell(&coarse, &cell)
            .map_err(|e| e.to_string())?
            .update_ratio;
        let at_fine = run_sweep_cell(&fine, &cell)
            .map_err(|e| e.to_string())?
            .update_ratio;
        let rel = (at_coarse - at_fine).abs() / at_fine.abs().max(1e-12);
        if rel > ETA_STABILITY_TOL {
            return Err(format!(
                "{label}: seed {}: ratio {at_coarse:.5} at 1e-4 vs {at_fine:.5} at 1e-5 \
                 differ by {:.2}%",
                cell.seed,
                rel * 100.0
            ));
        }
    }
    Ok(())
}

#[test]
fn acceptance() {
    let mut gate = Gate::new();
    let started = Instant::now();

    // 1. Tape gradients match central finite differences for every primitive
    //    op and for full encoder forward passes.
    let t = Instant::now();
    let outcome = check_primitive_gradients(100, SEED)
        .and_then(|()| check_encoder_gradients(100, SEED + 1));
    gate.criterion(
        1,
        &format!(
            "autodiff matches finite differences (100 instances per op and per encoder) \
             [{:.1?}]",
            t.elapsed()
        ),
        outcome,
    );

    // 2. The scalar closed forms are self-consistent, then the tape matches
    //    them to 1e-10 including the query-token branch.
    let t = Instant::now();
    let outcome = check_oracle_self_consistency(100, SEED + 2)
        .and_then(|()| check_oracle_autodiff_equivalence(100, SEED + 3));
    gate.criterion(
        2,
        &format!(
            "closed-form oracle equivalence (100 cases, abs 1e-10) [{:.1?}]",
            t.elapsed()
        ),
        outcome,
    );

    // Shared sweeps for criteria 3-6 and 9.
    let t = Instant::now();
    let vanilla = run_depth_sweep(&sweep_config(false)).expect("vanilla sweep runs");
    let relational = run_depth_sweep(&sweep_config(true)).expect("relational sweep runs");
    println!(
        "ran both depth sweeps ({} cells) in {:.1?}",
        sweep_cells(&sweep_config(false)).len() + sweep_cells(&sweep_config(true)).len(),
        t.elapsed()
    );

    // 3. Squared-Jacobian flatness under the data-dependent scheme, with
    //    monotone growth for the unscaled contrast.
    let t = Instant::now();
    let outcome = flatness(&vanilla, "vanilla")
        .and_then(|()| flatness(&relational, "relational"))
        .and_then(|()| contrast_growth(&vanilla, "vanilla"))
        .and_then(|()| contrast_growth(&relational, "relational"));
    gate.criterion(
        3,
        &format!(
            "jacobian-norm flatness (<{FLATNESS_BAND}x) with >={CONTRAST_GROWTH_MIN}x \
             monotone unscaled growth [{:.1?}]",
            t.elapsed()
        ),
        outcome,
    );

    // 4. Per-layer condition values times N inside the fixed band.
    let t = Instant::now();
    let outcome = condition_band(&vanilla, "vanilla")
        .and_then(|()| condition_band(&relational, "relational"));
    gate.criterion(
        4,
        &format!(
            "per-layer condition * N inside {CONDITION_BAND:?} for every layer [{:.1?}]",
            t.elapsed()
        ),
        outcome,
    );

    // 5. Hidden-norm drift stays inside the band under scaling; the unscaled
    //    baseline drifts past 1.5 at N=16.
    let t = Instant::now();
    let outcome =
        drift_bands(&vanilla, "vanilla").and_then(|()| drift_bands(&relational, "relational"));
    gate.criterion(
        5,
        &format!(
            "hidden-norm drift in {DRIFT_BAND:?} scaled, >={UNSCALED_DRIFT_MIN} unscaled \
             [{:.1?}]",
            t.elapsed()
        ),
        outcome,
    );

    // 6. Update magnitude per unit learning rate: flat across depth and
    //    stable across learning rates.
    let t = Instant::now();
    let outcome = update_flatness(&vanilla, "vanilla")
        .and_then(|()| update_flatness(&relational, "relational"))
        .and_then(|()| eta_stability(&sweep_config(false), "vanilla"))
        .and_then(|()| eta_stability(&sweep_config(true), "relational"));
    gate.criterion(
        6,
        &format!(
            "update magnitude flat (<{FLATNESS_BAND}x) and eta-stable \
             (<={:.0}% between 1e-4 and 1e-5) [{:.1?}]",
            ETA_STABILITY_TOL * 100.0,
            t.elapsed()
        ),
        outcome,
    );

    // 7. Zero relation tables reduce relational attention to vanilla
    //    attention bit for bit.
    let t = Instant::now();
    let outcome = check_relational_reduction(SEED + 4);
    gate.criterion(
        7,
        &format!("relational-to-vanilla bitwise reduction [{:.1?}]", t.elapsed()),
        outcome,
    );

    // 8. Training smoke on the synthetic task: the scaled N=16 stack halves
    //    the eval loss without warmup or layer norm; the unscaled baseline
    //    diverges or stalls.
    let t = Instant::now();
    let curves = run_training(&training_config()).expect("training fixture runs");
    let outcome = (|| {
        let scaled = curves
            .iter()
            .find(|c| c.scheme == InitKind::DtFixup)
            .ok_or("missing scaled curve")?;
        let baseline = curves
            .iter()
            .find(|c| c.scheme == InitKind::Xavier)
            .ok_or("missing baseline curve")?;
        let initial = scaled.points[0].eval_loss;
        if scaled.diverged {
            return Err("scaled run diverged".to_string());
        }
        let smoothed = smoothed_eval(scaled, SMOOTHING_WINDOW);
        if smoothed >= TRAINING_TARGET * initial {
            return Err(format!(
                "scaled run reached only {:.3}x initial (target <{TRAINING_TARGET}x)",
                smoothed / initial
            ));
        }
        let baseline_initial = baseline.points[0].eval_loss;
        let baseline_ok = baseline.diverged
            || smoothed_eval(baseline, SMOOTHING_WINDOW) >= BASELINE_STALL * baseline_initial;
        if !baseline_ok {
            return Err("unscaled baseline neither diverged nor stalled".to_string());
        }
        println!(
            "  scaled N=16: initial {initial:.4}, smoothed final {smoothed:.4} \
             ({:.3}x); baseline diverged: {}",
            smoothed / initial,
            baseline.diverged
        );
        Ok(())
    })();
    gate.criterion(
        8,
        &format!(
            "warmup-free training halves eval loss within 2000 steps while the \
             unscaled baseline fails [{:.1?}]",
            t.elapsed()
        ),
        outcome,
    );

    // 9. Rerunning the sweep reproduces the CSV byte for byte.
    let t = Instant::now();
    let first = diagnostics_csv(&vanilla);
    let second = diagnostics_csv(&run_depth_sweep(&sweep_config(false)).expect("rerun"));
    let outcome = if first == second {
        Ok(())
    } else {
        Err("diagnostics.csv bytes differ between consecutive runs".to_string())
    };
    gate.criterion(
        9,
        &format!("byte-identical diagnostics.csv across reruns [{:.1?}]", t.elapsed()),
        outcome,
    );

    println!("acceptance suite finished in {:.1?}", started.elapsed());
    assert!(
        gate.failures.is_empty(),
        "acceptance failures:\n{}",
        gate.failures.join("\n")
    );
}
