//! Experiment pipelines: generate or load data, identify a model, run the
//! receding-horizon loop, and write the trace, model, and summary files.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use serde_json::json;

use dmpc::deepc::{check_pe_for_deepc, DeepcConfig, DeepcController};
use dmpc::hankel::partition_past_future;
use dmpc::mpc::{
    run_receding_horizon, BoxConstraints, ClosedLoopTrace, LmpcController, MpcWeights,
    NmpcController, NmpcFlavor, NmpcRefFn, NmpcStateSource, StateTarget, StepStatus,
};
use dmpc::neural::{
    rnn_steady_state, ssnn_steady_state, ssnno_truncate, train_rnn, train_ssnn, train_ssnno,
    Activation, RnnModel, SsnnModel, SsnnoConfig, TrainOptions,
};
use dmpc::numerics::{Matrix, Vector};
use dmpc::pem::{pem_identify, pem_rollout, pem_steady_state, PemOptions};
use dmpc::plants::{
    cstr_simulate, prms, CstrConfig, CstrPlant, LinearModel, LtiPlant, Plant, PrmsConfig,
    ReferenceSchedule,
};
use dmpc::realization::{ho_kalman_kung, markov_reconstruction_error, RealizationConfig};
use dmpc::spc::{identify_spc, SpcController};

use crate::config::{ConfigFile, ExperimentKind};
use crate::model_io::{self, Metadata};
use crate::trace::{write_rollout, write_trace};

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Solver(dmpc::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(msg) => write!(f, "config error: {msg}"),
            RunError::Solver(e) => write!(f, "solver error: {e}"),
            RunError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl From<dmpc::Error> for RunError {
    fn from(e: dmpc::Error) -> Self {
        match e {
            dmpc::Error::InvalidConfig(msg) => RunError::Config(msg),
            other => RunError::Solver(other),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Run,
    Ident,
    Simulate,
}

enum PlantSpec {
    Lti(LinearModel),
    Cstr(CstrConfig),
}

struct Setup {
    plant: PlantSpec,
    /// Closed-loop initial plant state.
    x0: Vector,
    seed: u64,
    steps: usize,
}

fn setup(cfg: &ConfigFile, seed: u64) -> Result<Setup, RunError> {
    let plant = match cfg.plant.kind.as_str() {
        "lti" => {
            let to_matrix = |rows: &Vec<Vec<f64>>| {
                let r = rows.len();
                let c = rows[0].len();
                Matrix::from_fn(r, c, |i, j| rows[i][j])
            };
            let a = to_matrix(cfg.plant.a.as_ref().unwrap());
            let b = to_matrix(cfg.plant.b.as_ref().unwrap());
            let c = to_matrix(cfg.plant.c.as_ref().unwrap());
            PlantSpec::Lti(LinearModel::new(a, b, c)?)
        }
        _ => PlantSpec::Cstr(CstrConfig {
            b_const: cfg.plant.b_const.unwrap_or(22.0),
            da: cfg.plant.da.unwrap_or(0.082),
            db: cfg.plant.db.unwrap_or(3.0),
            t: cfg.plant.sampling.unwrap_or(1.0),
            noise_std: cfg.plant.noise_std.unwrap_or(0.0),
        }),
    };
    let state_dim = match &plant {
        PlantSpec::Lti(m) => m.order(),
        PlantSpec::Cstr(_) => 2,
    };
    let x0 = match &cfg.plant.x0 {
        Some(v) => Vector::from_row_slice(v),
        None => Vector::zeros(state_dim),
    };
    Ok(Setup {
        plant,
        x0,
        seed,
        steps: cfg.experiment.steps.unwrap_or(200),
    })
}

/// Training data: PRMS excitation applied to the plant at rest.
fn training_record(cfg: &ConfigFile, s: &Setup) -> Result<(Matrix, Matrix), RunError> {
    let d = cfg.data.samples;
    let prms_cfg = PrmsConfig::spanning(
        cfg.data.u_min.unwrap_or(-1.0),
        cfg.data.u_max.unwrap_or(1.0),
        cfg.data.levels.unwrap_or(11),
        cfg.data.dwell.unwrap_or(5),
        s.seed,
    );
    let u = prms(&prms_cfg, d);
    let y = match &s.plant {
        PlantSpec::Lti(model) => {
            if model.n_inputs() != 1 {
                return Err(RunError::Config(
                    "prms excitation generates a single input channel".into(),
                ));
            }
            model.simulate(&Vector::zeros(model.order()), &u)?.0
        }
        PlantSpec::Cstr(c) => cstr_simulate(c, &Vector::zeros(2), &u, s.seed)?.0,
    };
    Ok((u, y))
}

fn weights_from(cfg: &ConfigFile, horizon: usize) -> Result<MpcWeights, RunError> {
    let w = cfg.weights.as_ref().expect("validated");
    let q = Matrix::from_diagonal(&Vector::from_row_slice(&w.q));
    let r = Matrix::from_diagonal(&Vector::from_row_slice(&w.r));
    Ok(MpcWeights::new(q, r, horizon)?)
}

fn bounds_from(cfg: &ConfigFile) -> BoxConstraints {
    let b = cfg.bounds.clone().unwrap_or_default();
    let conv = |v: Option<Vec<f64>>| v.map(|x| Vector::from_row_slice(&x));
    BoxConstraints {
        u_min: conv(b.u_min),
        u_max: conv(b.u_max),
        x_min: conv(b.x_min),
        x_max: conv(b.x_max),
        y_min: conv(b.y_min),
        y_max: conv(b.y_max),
    }
}

fn schedule_from(cfg: &ConfigFile, fallback_dim: usize) -> Result<ReferenceSchedule, RunError> {
    match &cfg.reference {
        None => Ok(ReferenceSchedule::constant(Vector::zeros(fallback_dim))),
        Some(r) => {
            if let (Some(values), Some(quadrant)) = (&r.values, r.quadrant) {
                Ok(ReferenceSchedule::quadrants(values, quadrant))
            } else {
                let bps = r
                    .breakpoints
                    .as_ref()
                    .expect("validated")
                    .iter()
                    .map(|b| (b.at, Vector::from_row_slice(&b.value)))
                    .collect();
                Ok(ReferenceSchedule::new(bps)?)
            }
        }
    }
}

fn trace_stats(trace: &ClosedLoopTrace, cfg: &ConfigFile) -> serde_json::Value {
    let fallbacks = trace
        .steps
        .iter()
        .filter(|s| s.status == StepStatus::Fallback)
        .count();
    let warmups = trace
        .steps
        .iter()
        .filter(|s| s.status == StepStatus::Warmup)
        .count();
    let final_error = trace
        .steps
        .last()
        .map(|s| (&s.y - &s.reference).amax())
        .unwrap_or(f64::NAN);
    let mut value = json!({
        "instants": trace.len(),
        "fallback_instants": fallbacks,
        "warmup_instants": warmups,
        "final_tracking_error": final_error,
    });
    if let Some(r) = &cfg.reference {
        if let (Some(values), Some(quadrant)) = (&r.values, r.quadrant) {
            let tail = quadrant.min(10);
            let quadrants = (trace.len() / quadrant).min(values.len());
            let errors: Vec<f64> = (0..quadrants)
                .map(|q| trace.max_tracking_error((q + 1) * quadrant - tail, (q + 1) * quadrant))
                .collect();
            value["quadrant_terminal_errors"] = json!(errors);
        }
    }
    value
}

pub fn execute(
    cfg: &ConfigFile,
    kind: ExperimentKind,
    out_dir: &Path,
    seed: u64,
    mode: Mode,
) -> Result<serde_json::Value, RunError> {
    let started = Instant::now();
    let s = setup(cfg, seed)?;
    let mut summary = match kind {
        ExperimentKind::HoKalman => run_hokalman(cfg, &s, out_dir, mode)?,
        ExperimentKind::Spc => run_spc(cfg, &s, out_dir, mode)?,
        ExperimentKind::Deepc => run_deepc(cfg, &s, out_dir, mode)?,
        ExperimentKind::Pem => run_pem(cfg, &s, out_dir, mode)?,
        ExperimentKind::Rnn => run_rnn(cfg, &s, out_dir, mode)?,
        ExperimentKind::Ssnn => run_ssnn(cfg, &s, out_dir, mode)?,
        ExperimentKind::Ssnno => run_ssnno(cfg, &s, out_dir, mode)?,
    };
    summary["kind"] = json!(kind.as_str());
    summary["seed"] = json!(seed);
    summary["runtime_seconds"] = json!(started.elapsed().as_secs_f64());
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out_dir.join("summary.json"), text)?;
    Ok(summary)
}

fn require_lti<'a>(s: &'a Setup, what: &str) -> Result<&'a LinearModel, RunError> {
    match &s.plant {
        PlantSpec::Lti(m) => Ok(m),
        PlantSpec::Cstr(_) => Err(RunError::Config(format!("{what} requires an lti plant"))),
    }
}

fn run_hokalman(
    cfg: &ConfigFile,
    s: &Setup,
    out: &Path,
    mode: Mode,
) -> Result<serde_json::Value, RunError> {
    let truth = require_lti(s, "hokalman")?;
    let ident = cfg.ident.clone().unwrap_or_default();
    let d = cfg.data.samples;
    let impulse = truth.impulse_response(d);
    let rc = RealizationConfig::new(
        ident.block_rows.unwrap(),
        ident.block_cols.unwrap(),
        ident.epsilon.unwrap_or(1e-6),
    );
    let realized = ho_kalman_kung(&impulse, &rc)?;
    let markov_error = markov_reconstruction_error(&realized, &impulse);

    let model_json = model_io::linear_model_json(
        &realized.model,
        None,
        Some(&realized.singular_values),
        Metadata {
            seed: s.seed,
            loss: Some(markov_error),
            validation_error: None,
        },
    );
    model_io::write_model(&out.join("model.json"), &model_json)?;

    let mut summary = json!({
        "identified_order": realized.order,
        "markov_reconstruction_error": markov_error,
        "singular_values": realized.singular_values.iter().copied().collect::<Vec<f64>>(),
    });

    if mode == Mode::Simulate || mode == Mode::Run {
        // open-loop check: Markov parameters vs the impulse data
        let mut pulse = Matrix::zeros(1, d);
        pulse[(0, 0)] = 1.0;
        let y_data = Matrix::from_fn(1, d, |_, k| impulse[k][(0, 0)]);
        let reconstructed = realized.model.impulse_response(d);
        let yhat = Matrix::from_fn(1, d, |_, k| reconstructed[k][(0, 0)]);
        write_rollout(&out.join("rollout.csv"), &pulse, &y_data, &yhat)?;
    }
    if mode != Mode::Run {
        return Ok(summary);
    }

    let horizon = cfg.horizons.as_ref().expect("validated").prediction;
    let weights = weights_from(cfg, horizon)?;
    let bounds = bounds_from(cfg);
    let target = match &cfg.reference {
        None => StateTarget::Fixed {
            x_ref: Vector::zeros(realized.order),
            u_ref: Vector::zeros(truth.n_inputs()),
        },
        Some(_) => {
            let model = realized.model.clone();
            StateTarget::FromOutput(Box::new(move |y_r: &Vector| pem_steady_state(&model, y_r)))
        }
    };
    // The observer copies the plant's initial state when the realized order
    // matches; otherwise it starts at rest.
    let x0_hat = if realized.order == truth.order() {
        s.x0.clone()
    } else {
        Vector::zeros(realized.order)
    };
    let mut controller =
        LmpcController::state_tracking(realized.model.clone(), weights, bounds, x0_hat, target)?;
    let mut plant = LtiPlant::new(truth.clone(), s.x0.clone());
    let schedule = schedule_from(cfg, truth.n_outputs())?;
    let trace = run_receding_horizon(&mut plant, &mut controller, &schedule, s.steps)
        .map_err(RunError::Solver)?;
    write_trace(&out.join("trace.csv"), &trace)?;

    summary["closed_loop"] = trace_stats(&trace, cfg);
    if trace.len() > 20 && s.x0.amax() > 0.0 {
        summary["state_norm_ratio_at_20"] = json!(trace.steps[20].x.amax() / s.x0.amax());
    }
    summary["qp_iterations_total"] = json!(controller.iterations_total);
    Ok(summary)
}

fn run_spc(
    cfg: &ConfigFile,
    s: &Setup,
    out: &Path,
    mode: Mode,
) -> Result<serde_json::Value, RunError> {
    if mode == Mode::Simulate {
        return Err(RunError::Config(
            "simulate is not defined for the subspace predictor; use run or ident".into(),
        ));
    }
    let truth = require_lti(s, "spc")?.clone();
    let h = cfg.horizons.as_ref().expect("validated");
    let (n_f, m_p, cols) = (h.prediction, h.past.unwrap(), h.training.unwrap());
    let (u, y) = training_record(cfg, s)?;
    let pred = identify_spc(&u, &y, n_f, m_p, cols)?;

    model_io::write_model(
        &out.join("model.json"),
        &model_io::spc_json(
            &pred,
            cols,
            Metadata {
                seed: s.seed,
                loss: Some(pred.residual),
                validation_error: None,
            },
        ),
    )?;
    let mut summary = json!({
        "identification_residual": pred.residual,
        "data_rank": pred.data_rank,
        "rank_warning": pred.rank_warning,
    });
    if mode == Mode::Ident {
        return Ok(summary);
    }

    let weights = weights_from(cfg, n_f)?;
    let bounds = bounds_from(cfg);
    let warmup: Vec<Vector> = (0..m_p).map(|k| Vector::from(u.column(k))).collect();
    let mut controller = SpcController::new(pred, weights, bounds, warmup)?;
    let mut plant = LtiPlant::new(truth.clone(), s.x0.clone());
    let schedule = schedule_from(cfg, truth.n_outputs())?;
    let trace = run_receding_horizon(&mut plant, &mut controller, &schedule, s.steps)
        .map_err(RunError::Solver)?;
    write_trace(&out.join("trace.csv"), &trace)?;
    summary["closed_loop"] = trace_stats(&trace, cfg);
    Ok(summary)
}

fn run_deepc(
    cfg: &ConfigFile,
    s: &Setup,
    out: &Path,
    mode: Mode,
) -> Result<serde_json::Value, RunError> {
    if mode == Mode::Simulate {
        return Err(RunError::Config(
            "simulate is not defined for the model-free scheme; use run or ident".into(),
        ));
    }
    let truth = require_lti(s, "deepc")?.clone();
    let h = cfg.horizons.as_ref().expect("validated");
    let (n_f, m_p, cols) = (h.prediction, h.past.unwrap(), h.training.unwrap());
    let ident = cfg.ident.clone().unwrap_or_default();
    let alpha = ident.alpha.unwrap();
    let (u, y) = training_record(cfg, s)?;

    let n_est = ident.order.unwrap_or(0);
    let (pe_ok, pe_rank) = check_pe_for_deepc(&u, n_f, m_p, n_est)?;
    let blocks = partition_past_future(&u, &y, n_f, m_p, cols)?;

    model_io::write_model(
        &out.join("model.json"),
        &model_io::deepc_json(
            &blocks,
            alpha,
            1,
            1,
            Metadata {
                seed: s.seed,
                loss: None,
                validation_error: None,
            },
        ),
    )?;
    let mut summary = json!({
        "persistently_exciting": pe_ok,
        "excitation_rank": pe_rank,
        "excitation_order_checked": n_f + m_p + n_est,
        "alpha": alpha,
    });
    if mode == Mode::Ident {
        return Ok(summary);
    }

    let weights = weights_from(cfg, n_f)?;
    let bounds = bounds_from(cfg);
    let deepc_cfg = DeepcConfig::new(blocks, alpha, weights, bounds, 1, 1)?;
    let warmup: Vec<Vector> = (0..m_p).map(|k| Vector::from(u.column(k))).collect();
    let mut controller = DeepcController::new(deepc_cfg, warmup)?;
    let mut plant = LtiPlant::new(truth.clone(), s.x0.clone());
    let schedule = schedule_from(cfg, truth.n_outputs())?;
    let trace = run_receding_horizon(&mut plant, &mut controller, &schedule, s.steps)
        .map_err(RunError::Solver)?;
    write_trace(&out.join("trace.csv"), &trace)?;
    summary["closed_loop"] = trace_stats(&trace, cfg);
    Ok(summary)
}

fn run_pem(
    cfg: &ConfigFile,
    s: &Setup,
    out: &Path,
    mode: Mode,
) -> Result<serde_json::Value, RunError> {
    let truth = require_lti(s, "pem")?.clone();
    let ident = cfg.ident.clone().unwrap_or_default();
    let order = ident.order.unwrap();
    let (u, y) = training_record(cfg, s)?;
    let mut opts = PemOptions::default();
    if let Some(st) = ident.starts {
        opts.starts = st;
    }
    if let Some(it) = ident.max_iters {
        opts.max_iters_per_start = it;
    }
    if let Some(fr) = ident.train_fraction {
        opts.train_fraction = fr;
    }
    let (params, report) = pem_identify(&u, &y, order, s.seed, &opts)?;

    model_io::write_model(
        &out.join("model.json"),
        &model_io::pem_json(
            &params,
            Metadata {
                seed: s.seed,
                loss: Some(report.train_loss),
                validation_error: Some(report.validation_rmse),
            },
        ),
    )?;
    let mut summary = json!({
        "train_loss": report.train_loss,
        "validation_rmse": report.validation_rmse,
        "output_range": report.output_range,
        "validation_rmse_fraction_of_range": report.validation_rmse / report.output_range,
        "optimizer_iterations": report.iterations,
    });

    if mode == Mode::Simulate || mode == Mode::Run {
        let yhat = pem_rollout(&params, &u)?;
        write_rollout(&out.join("rollout.csv"), &u, &y, &yhat)?;
    }
    if mode != Mode::Run {
        return Ok(summary);
    }

    let horizon = cfg.horizons.as_ref().expect("validated").prediction;
    let weights = weights_from(cfg, horizon)?;
    let bounds = bounds_from(cfg);
    let refs_model = params.model.clone();
    let mut controller = LmpcController::state_tracking(
        params.model.clone(),
        weights,
        bounds,
        Vector::zeros(order),
        StateTarget::FromOutput(Box::new(move |y_r: &Vector| {
            pem_steady_state(&refs_model, y_r)
        })),
    )?;
    let mut plant = LtiPlant::new(truth.clone(), s.x0.clone());
    let schedule = schedule_from(cfg, truth.n_outputs())?;
    let trace = run_receding_horizon(&mut plant, &mut controller, &schedule, s.steps)
        .map_err(RunError::Solver)?;
    write_trace(&out.join("trace.csv"), &trace)?;
    summary["closed_loop"] = trace_stats(&trace, cfg);
    summary["qp_iterations_total"] = json!(controller.iterations_total);
    Ok(summary)
}

fn train_options(cfg: &ConfigFile) -> TrainOptions {
    let ident = cfg.ident.clone().unwrap_or_default();
    let mut opts = TrainOptions::default();
    if let Some(st) = ident.starts {
        opts.starts = st;
    }
    if let Some(it) = ident.max_iters {
        opts.max_iters_per_start = it;
    }
    if let Some(fr) = ident.train_fraction {
        opts.train_fraction = fr;
    }
    opts
}

fn closed_loop_plant(s: &Setup) -> Box<dyn Plant> {
    match &s.plant {
        PlantSpec::Lti(m) => Box::new(LtiPlant::new(m.clone(), s.x0.clone())),
        PlantSpec::Cstr(c) => Box::new(CstrPlant::new(
            c.clone(),
            s.x0.clone(),
            s.seed.wrapping_add(1000),
        )),
    }
}

fn run_rnn(
    cfg: &ConfigFile,
    s: &Setup,
    out: &Path,
    mode: Mode,
) -> Result<serde_json::Value, RunError> {
    let ident = cfg.ident.clone().unwrap_or_default();
    let hidden = ident.hidden.clone().unwrap();
    let (u, y) = training_record(cfg, s)?;
    let template = RnnModel::seeded(u.nrows(), y.nrows(), &hidden, Activation::Tanh, 0);
    let opts = train_options(cfg);
    let (model, report) = train_rnn(&template, &u, &y, s.seed, &opts)?;

    model_io::write_model(
        &out.join("model.json"),
        &model_io::rnn_json(
            &model,
            Metadata {
                seed: s.seed,
                loss: Some(report.train_loss),
                validation_error: Some(report.validation_rmse),
            },
        ),
    )?;
    let mut summary = json!({
        "train_loss": report.train_loss,
        "validation_rmse": report.validation_rmse,
        "output_range": report.output_range,
        "validation_rmse_fraction_of_range": report.validation_rmse / report.output_range,
    });

    if mode == Mode::Simulate || mode == Mode::Run {
        let anchor = Vector::from(y.column(0));
        let pred = model
            .rollout(&anchor, &u.columns(1, u.ncols() - 1).clone_owned())
            .map_err(RunError::Solver)?;
        write_rollout(&out.join("rollout.csv"), &u, &y, &pred)?;
    }
    if mode != Mode::Run {
        return Ok(summary);
    }

    let horizon = cfg.horizons.as_ref().expect("validated").prediction;
    let weights = weights_from(cfg, horizon)?;
    let bounds = bounds_from(cfg);
    let refs_model = model.clone();
    let references: NmpcRefFn = Box::new(move |y_r: &Vector| {
        let u_r = rnn_steady_state(&refs_model, y_r)?;
        Ok((y_r.clone(), u_r))
    });
    let mut controller = NmpcController::new(
        Rc::new(model),
        weights,
        bounds,
        NmpcFlavor::OutputTracking,
        references,
        NmpcStateSource::Measurement,
    );
    let mut plant = closed_loop_plant(s);
    let schedule = schedule_from(cfg, y.nrows())?;
    let trace = run_receding_horizon(plant.as_mut(), &mut controller, &schedule, s.steps)
        .map_err(RunError::Solver)?;
    write_trace(&out.join("trace.csv"), &trace)?;
    summary["closed_loop"] = trace_stats(&trace, cfg);
    summary["nlp_iterations_total"] = json!(controller.iterations_total);
    Ok(summary)
}

fn run_ssnn(
    cfg: &ConfigFile,
    s: &Setup,
    out: &Path,
    mode: Mode,
) -> Result<serde_json::Value, RunError> {
    let ident = cfg.ident.clone().unwrap_or_default();
    let latent = ident.order.unwrap();
    let hidden = ident.hidden.clone().unwrap();
    let h_hidden = ident.h_hidden.clone().unwrap_or_else(|| hidden.clone());
    let (u, y) = training_record(cfg, s)?;
    let template = SsnnModel::seeded(
        latent,
        u.nrows(),
        y.nrows(),
        &hidden,
        &h_hidden,
        Activation::Tanh,
        0,
    );
    let opts = train_options(cfg);
    let (model, report) = train_ssnn(&template, &u, &y, s.seed, &opts)?;

    model_io::write_model(
        &out.join("model.json"),
        &model_io::ssnn_json(
            &model,
            None,
            None,
            Metadata {
                seed: s.seed,
                loss: Some(report.train_loss),
                validation_error: Some(report.validation_rmse),
            },
        ),
    )?;
    let mut summary = json!({
        "train_loss": report.train_loss,
        "validation_rmse": report.validation_rmse,
        "output_range": report.output_range,
        "validation_rmse_fraction_of_range": report.validation_rmse / report.output_range,
    });

    if mode == Mode::Simulate || mode == Mode::Run {
        let (_, pred) = model.rollout(&model.x0, &u).map_err(RunError::Solver)?;
        write_rollout(&out.join("rollout.csv"), &u, &y, &pred)?;
    }
    if mode != Mode::Run {
        return Ok(summary);
    }

    let horizon = cfg.horizons.as_ref().expect("validated").prediction;
    let weights = weights_from(cfg, horizon)?;
    let bounds = bounds_from(cfg);
    let refs_model = model.clone();
    let references: NmpcRefFn = Box::new(move |y_r: &Vector| {
        let (x_r, u_r) = ssnn_steady_state(&refs_model, y_r)?;
        Ok((x_r, u_r))
    });
    let x0_obs = model.x0.clone();
    let mut controller = NmpcController::new(
        Rc::new(model),
        weights,
        bounds,
        NmpcFlavor::StateTracking,
        references,
        NmpcStateSource::Observer {
            x: x0_obs,
            correction_steps: 2,
            damping: 1.0,
        },
    );
    let mut plant = closed_loop_plant(s);
    let schedule = schedule_from(cfg, y.nrows())?;
    let trace = run_receding_horizon(plant.as_mut(), &mut controller, &schedule, s.steps)
        .map_err(RunError::Solver)?;
    write_trace(&out.join("trace.csv"), &trace)?;
    summary["closed_loop"] = trace_stats(&trace, cfg);
    summary["nlp_iterations_total"] = json!(controller.iterations_total);
    Ok(summary)
}

fn run_ssnno(
    cfg: &ConfigFile,
    s: &Setup,
    out: &Path,
    _mode: Mode,
) -> Result<serde_json::Value, RunError> {
    let ident = cfg.ident.clone().unwrap_or_default();
    let latent = ident.order.unwrap();
    let hidden = ident.hidden.clone().unwrap();
    let h_hidden = ident.h_hidden.clone().unwrap_or_else(|| hidden.clone());
    let delta = ident.delta.unwrap();
    let (u, y) = training_record(cfg, s)?;
    let template = SsnnModel::seeded(
        latent,
        u.nrows(),
        y.nrows(),
        &hidden,
        &h_hidden,
        Activation::Tanh,
        0,
    );
    let opts = train_options(cfg);
    let ssnno_cfg = SsnnoConfig {
        alpha1: ident.alpha1.unwrap_or(1.0),
        alpha2: ident.alpha2.unwrap_or(0.05),
        alpha3: ident.alpha3.unwrap_or(1e-5),
        alpha4: ident.alpha4.unwrap_or(1e-5),
        state_weights: Vector::from_fn(latent, |i, _| (i + 1) as f64),
        delta,
    };
    let (model, report, parts) = train_ssnno(&template, &u, &y, &ssnno_cfg, s.seed, &opts)?;
    let truncation = ssnno_truncate(&model, &u, delta)?;

    model_io::write_model(
        &out.join("model.json"),
        &model_io::ssnn_json(
            &model,
            Some(&truncation.variances),
            Some(truncation.retained),
            Metadata {
                seed: s.seed,
                loss: Some(report.train_loss),
                validation_error: Some(report.validation_rmse),
            },
        ),
    )?;
    if let Some(reduced) = &truncation.reduced {
        model_io::write_model(
            &out.join("model_reduced.json"),
            &model_io::ssnn_json(
                reduced,
                None,
                Some(truncation.retained),
                Metadata {
                    seed: s.seed,
                    loss: None,
                    validation_error: None,
                },
            ),
        )?;
    }
    let (_, pred) = model.rollout(&model.x0, &u).map_err(RunError::Solver)?;
    write_rollout(&out.join("rollout.csv"), &u, &y, &pred)?;

    Ok(json!({
        "train_loss": report.train_loss,
        "validation_rmse": report.validation_rmse,
        "output_range": report.output_range,
        "validation_rmse_fraction_of_range": report.validation_rmse / report.output_range,
        "state_variances": truncation.variances.iter().copied().collect::<Vec<f64>>(),
        "variance_threshold": delta,
        "retained_order": truncation.retained,
        "output_error_term": parts.output_error,
        "variance_term": parts.variance_term,
        "regularization_term": parts.regularization,
        "reduced_model_written": truncation.reduced.is_some(),
    }))
}
