//! Sweep and training orchestration.
//!
//! Every sweep cell and every training run derives its own RNG stream by
//! hashing the user seed with the cell coordinates, so runs never share
//! state, execution order cannot matter, and a (config, seeds) pair fully
//! determines every emitted byte.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use dtfixup_core::diagnostics::{
    probe_hidden_recursion, probe_jacobian_norm, probe_layer_conditions, probe_update_magnitude,
    sphere_tokens, unit_readout, DiagnosticsReport,
};
use dtfixup_core::init::{apply_scheme, estimate_mu, InitKind, InitScheme};
use dtfixup_core::tensor::RelationLabels;
use dtfixup_core::transformer::{apply_sgd_step, Encoder, EncoderConfig};
use dtfixup_core::{Tape, Tensor};

use crate::config::ExperimentConfig;
use crate::LabError;

const SWEEP_SALT: u64 = 0x5357_4545_5000_0001;
const TRAIN_SALT: u64 = 0x5452_4149_4e00_0001;
const TASK_SALT: u64 = 0x5441_534b_0000_0001;

/// Training runs whose loss passes this threshold (or stops being finite)
/// are terminated and marked diverged; divergence is recorded data, not an
/// error.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed combinator (not tied to any std hasher, so the derived
/// streams cannot change out from under recorded CSVs).
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0xD1F0_5EED_0000_0001, |acc, &p| splitmix64(acc ^ p))
}

fn kind_tag(kind: InitKind) -> u64 {
    match kind {
        InitKind::StandardLn => 1,
        InitKind::TFixup => 2,
        InitKind::DtFixup => 3,
        InitKind::Xavier => 4,
    }
}

/// Distance-bucket relation labels: the label of (i, j) is |i - j| clipped
/// to the vocabulary, a relative-position encoding.
pub fn distance_labels(n: usize, n_relations: usize) -> Arc<RelationLabels> {
    let labels = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            i.abs_diff(j).min(n_relations - 1)
        })
        .collect();
    Arc::new(RelationLabels::new(n, labels).expect("grid sized n*n"))
}

/// One sweep coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub scheme: InitKind,
    pub n_blocks: usize,
    pub mu_target: f64,
    pub seed: u64,
}

/// Cartesian sweep grid in canonical order (scheme, depth, radius, seed).
pub fn sweep_cells(config: &ExperimentConfig) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &scheme in &config.schemes {
        for &n_blocks in &config.depths {
            for &mu_target in &config.mu_targets {
                for &seed in &config.seeds {
                    cells.push(SweepCell {
                        scheme,
                        n_blocks,
                        mu_target,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

/// RNG seed for one sweep cell.
pub fn cell_seed(config: &ExperimentConfig, cell: &SweepCell) -> u64 {
    mix_seed(&[
        cell.seed,
        kind_tag(cell.scheme),
        cell.n_blocks as u64,
        cell.mu_target.to_bits(),
        config.relational as u64,
        SWEEP_SALT,
    ])
}

fn encoder_config(config: &ExperimentConfig, n_blocks: usize, kind: InitKind) -> EncoderConfig {
    EncoderConfig {
        n_blocks,
        d_x: config.d_x,
        d_z: config.d_z,
        n_heads: config.n_heads,
        mlp_hidden: config.mlp_hidden,
        relational: config.relational,
        use_layer_norm: kind.uses_layer_norm(),
        n_relations: if config.relational {
            config.n_relations
        } else {
            0
        },
    }
}

fn build_scheme(kind: InitKind, n_blocks: usize, mu: f64, relational: bool) -> Result<InitScheme, LabError> {
    Ok(match kind {
        InitKind::StandardLn => InitScheme::standard_ln(relational),
        InitKind::Xavier => InitScheme::xavier(relational),
        InitKind::TFixup => InitScheme::tfixup(n_blocks, relational)?,
        InitKind::DtFixup => InitScheme::dtfixup(n_blocks, mu, relational)?,
    })
}

/// Builds, initializes and probes the model for one cell.
pub fn run_sweep_cell(
    config: &ExperimentConfig,
    cell: &SweepCell,
) -> Result<DiagnosticsReport, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(config, cell));
    let x = sphere_tokens(config.seq_len, config.d_x, cell.mu_target, &mut rng);
    let readout = unit_readout(config.d_x, &mut rng);
    let targets: Vec<f64> = (0..config.seq_len)
        .map(|_| rng.sample(StandardNormal))
        .collect();

    // The data-dependent pass: the scale is computed from the measured max
    // per-token norm of the probe inputs, not from the configured radius.
    let mu_hat = estimate_mu([&x])?;
    let scheme = build_scheme(cell.scheme, cell.n_blocks, mu_hat, config.relational)?;

    let enc_cfg = encoder_config(config, cell.n_blocks, cell.scheme);
    let labels = config
        .relational
        .then(|| distance_labels(config.seq_len, config.n_relations));
    let mut encoder = Encoder::xavier(enc_cfg, labels, &mut rng)?;
    apply_scheme(&mut encoder, &scheme)?;

    let jacobian_norm_sq = probe_jacobian_norm(&encoder, &x, &readout)?;
    let layer_conditions = probe_layer_conditions(&encoder, &x)?;
    let recursion = probe_hidden_recursion(&encoder, &x, scheme.xi_or_zero())?;
    let update_ratio =
        probe_update_magnitude(&encoder, &x, &readout, &targets, config.probe_eta)?;

    Ok(DiagnosticsReport {
        scheme: cell.scheme,
        relational: config.relational,
        n_blocks: cell.n_blocks,
        mu_target: cell.mu_target,
        seed: cell.seed,
        jacobian_norm_sq,
        layer_conditions,
        hidden_norm_trace: recursion.norms.clone(),
        hidden_drift: recursion.final_drift,
        update_ratio,
    })
}

/// Canonical report order: scheme, depth, radius, seed.
pub fn sort_reports(reports: &mut [DiagnosticsReport]) {
    reports.sort_by(|a, b| {
        (kind_tag(a.scheme), a.n_blocks, a.mu_target.to_bits(), a.seed).cmp(&(
            kind_tag(b.scheme),
            b.n_blocks,
            b.mu_target.to_bits(),
            b.seed,
        ))
    });
}

/// Runs every cell of the sweep grid (in a work pool; cells share nothing)
/// and returns the reports in canonical order.
pub fn run_depth_sweep(config: &ExperimentConfig) -> Result<Vec<DiagnosticsReport>, LabError> {
    let cells = sweep_cells(config);
    log::info!("running depth sweep: {} cells", cells.len());
    let mut reports = cells
        .par_iter()
        .map(|cell| run_sweep_cell(config, cell))
        .collect::<Result<Vec<_>, _>>()?;
    sort_reports(&mut reports);
    Ok(reports)
}

/// A regression task whose targets are a hidden linear readout of the
/// *shifted* token sequence: predicting token i requires the content of
/// token i+1, so per-token maps alone cannot fit it and the attention layers
/// must learn the routing. Tokens combine per-example random content with
/// fixed per-position components (the stand-in for a position-aware upstream
/// embedder) and are normalized to the exact per-token radius.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: Vec<(Tensor, Vec<f64>)>,
    pub eval: Vec<(Tensor, Vec<f64>)>,
    pub mu: f64,
}

/// Relative weight of the fixed positional component inside each token.
/// Positions carry most of the token direction so the position-readable part
/// of the target trains quickly; the remaining share is routed content that
/// only attention can reach.
const POSITION_WEIGHT: f64 = 1.5;

impl SyntheticTask {
    pub fn generate(config: &ExperimentConfig, seed: u64) -> Result<Self, LabError> {
        let n = config.seq_len;
        let d = config.d_x;
        let mu = config.mu_targets[0];
        let t = &config.training;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TASK_SALT]));

        let positions: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut p: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                p.iter_mut().for_each(|v| *v *= POSITION_WEIGHT / norm);
                p
            })
            .collect();
        let mut hidden_map: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let map_norm = hidden_map.iter().map(|v| v * v).sum::<f64>().sqrt();
        hidden_map.iter_mut().for_each(|v| *v /= map_norm);

        let sample = |rng: &mut ChaCha8Rng| -> Result<(Tensor, Vec<f64>), LabError> {
            let mut data = Vec::with_capacity(n * d);
            for pos in &positions {
                let mut token: Vec<f64> = (0..d)
                    .map(|c| {
                        let content: f64 = rng.sample(StandardNormal);
                        content / (d as f64).sqrt() + pos[c]
                    })
                    .collect();
                let norm = token.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                token.iter_mut().for_each(|v| *v *= mu / norm);
                data.extend(token);
            }
            let tokens = Tensor::matrix(n, d, data)?;
            // Target for token i reads the *next* token (cyclically).
            let targets: Vec<f64> = (0..n)
                .map(|i| {
                    let src = (i + 1) % n;
                    (0..d)
                        .map(|c| tokens.at2(src, c) * hidden_map[c])
                        .sum::<f64>()
                })
                .collect();
            Ok((tokens, targets))
        };

        let train = (0..t.task_size)
            .map(|_| sample(&mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let eval = (0..t.eval_size)
            .map(|_| sample(&mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { train, eval, mu })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCurve {
    pub scheme: InitKind,
    pub n_blocks: usize,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
    pub diverged: bool,
}

/// Mean eval loss over the trailing `window` points (for divergence-free
/// comparison against the initial loss).
pub fn smoothed_eval(curve: &TrainingCurve, window: usize) -> f64 {
    let len = curve.points.len();
    let take = window.min(len).max(1);
    let tail = &curve.points[len - take..];
    tail.iter().map(|p| p.eval_loss).sum::<f64>() / take as f64
}

struct TrainState {
    encoder: Encoder,
    readout: Tensor,
}

fn example_loss(
    tape: &mut Tape,
    bound: &Encoder,
    readout: &Tensor,
    tokens: &Tensor,
    targets: &[f64],
) -> Result<Tensor, LabError> {
    let (y, _) = bound.forward(tape, tokens)?;
    let preds = tape.matmul(&y, readout)?;
    let target = Tensor::matrix(targets.len(), 1, targets.to_vec())?;
    let err = tape.sub(&preds, &target)?;
    let sq = tape.mul(&err, &err)?;
    let sum = tape.sum_all(&sq)?;
    Ok(tape.scale(&sum, 1.0 / targets.len() as f64)?)
}

fn dataset_loss(state: &TrainState, data: &[(Tensor, Vec<f64>)]) -> Result<f64, LabError> {
    let mut total = 0.0;
    for (tokens, targets) in data {
        let mut tape = Tape::new();
        let bound = state.encoder.bind(&mut tape);
        let readout = tape.leaf(&state.readout);
        let loss = example_loss(&mut tape, &bound, &readout, tokens, targets)?;
        total += loss.data()[0];
    }
    Ok(total / data.len() as f64)
}

fn train_one(
    config: &ExperimentConfig,
    task: &SyntheticTask,
    kind: InitKind,
    n_blocks: usize,
    seed: u64,
) -> Result<TrainingCurve, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        seed,
        kind_tag(kind),
        n_blocks as u64,
        config.relational as u64,
        TRAIN_SALT,
    ]));

    let mu_hat = estimate_mu(task.train.iter().map(|(tokens, _)| tokens))?;
    let scheme = build_scheme(kind, n_blocks, mu_hat, config.relational)?;
    let enc_cfg = encoder_config(config, n_blocks, kind);
    let labels = config
        .relational
        .then(|| distance_labels(config.seq_len, config.n_relations));
    let mut encoder = Encoder::xavier(enc_cfg, labels, &mut rng)?;
    apply_scheme(&mut encoder, &scheme)?;
    // Zero-initialized readout: the initial loss is exactly the target
    // variance, so any improvement has to come from fitting the task.
    let readout = Tensor::zeros(vec![config.d_x, 1])?;
    let mut state = TrainState { encoder, readout };

    let schedule = scheme.lr_schedule();
    let t = &config.training;
    let mut points = Vec::with_capacity(t.steps + 1);
    let mut diverged = false;

    let initial_train = dataset_loss(&state, &task.train)?;
    let initial_eval = dataset_loss(&state, &task.eval)?;
    points.push(CurvePoint {
        step: 0,
        train_loss: initial_train,
        eval_loss: initial_eval,
    });
    if !initial_train.is_finite() || initial_train > DIVERGENCE_THRESHOLD {
        return Ok(TrainingCurve {
            scheme: kind,
            n_blocks,
            seed,
            points,
            diverged: true,
        });
    }

    for step in 1..=t.steps {
        let mut tape = Tape::new();
        let bound = state.encoder.bind(&mut tape);
        let readout_leaf = tape.leaf(&state.readout);
        let mut batch_loss: Option<Tensor> = None;
        for _ in 0..t.batch_size {
            let pick = rng.random_range(0..task.train.len());
            let (tokens, targets) = &task.train[pick];
            let loss = example_loss(&mut tape, &bound, &readout_leaf, tokens, targets)?;
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(acc) => tape.add(&acc, &loss)?,
            });
        }
        let total = batch_loss.expect("batch_size >= 1");
        let loss = tape.scale(&total, 1.0 / t.batch_size as f64)?;
        let train_loss = loss.data()[0];

        if !train_loss.is_finite() || train_loss > DIVERGENCE_THRESHOLD {
            points.push(CurvePoint {
                step,
                train_loss,
                eval_loss: f64::INFINITY,
            });
            diverged = true;
            break;
        }

        let grads = tape.backward(&loss)?;
        let eta = schedule.lr_at(t.base_eta, step - 1);
        apply_sgd_step(&mut state.encoder, &bound, &grads, eta)?;
        let readout_grad = grads
            .get(&readout_leaf)
            .ok_or_else(|| LabError::Usage("readout gradient missing".into()))?;
        let updated: Vec<f64> = state
            .readout
            .data()
            .iter()
            .zip(readout_grad)
            .map(|(&v, &g)| v - eta * g)
            .collect();
        state.readout = Tensor::matrix(config.d_x, 1, updated)?;

        let eval_loss = dataset_loss(&state, &task.eval)?;
        points.push(CurvePoint {
            step,
            train_loss,
            eval_loss,
        });
    }

    Ok(TrainingCurve {
        scheme: kind,
        n_blocks,
        seed,
        points,
        diverged,
    })
}

/// Trains every (scheme, depth, seed) combination on one shared synthetic
/// task (generated from the first seed) and returns the loss curves.
pub fn run_training(config: &ExperimentConfig) -> Result<Vec<TrainingCurve>, LabError> {
    let task = SyntheticTask::generate(config, config.seeds[0])?;
    let mut runs = Vec::new();
    for &kind in &config.schemes {
        for &n_blocks in &config.depths {
            for &seed in &config.seeds {
                runs.push((kind, n_blocks, seed));
            }
        }
    }
    log::info!("running training: {} curves", runs.len());
    runs.par_iter()
        .map(|&(kind, n_blocks, seed)| train_one(config, &task, kind, n_blocks, seed))
        .collect()
}
