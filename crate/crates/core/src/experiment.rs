//! Experiment commands behind the `sgkit` binary: condition solving,
//! training, sweeps, initialization probes and dataset encoding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::bptt::grad_probe;
use crate::cells::{Activation, CellConfig, CellKind, Layer, Network, Readout, WeightSet};
use crate::conditions::{solve_all, ConditionMask, LayerStats, SolveOptions, SolvedLayer};
use crate::config::{ExperimentConfig, InitMode, SweepAxis, TaskSource};
use crate::data::{load_sl_mnist, read_events_file, write_events_file, Dataset, DatasetStats, SynthTask};
use crate::error::{Error, Result};
use crate::init::{sample_weights, InitScheme, VarianceRule, WeightDist};
use crate::numkit::{self, Dist, Matrix, Rng};
use crate::surrogate::{Shape, SurrogateSpec};
use crate::train::{fit, History};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Usage(_)
        | Error::Parameter(_)
        | Error::Domain(_)
        | Error::Shape(_)
        | Error::Format(_) => EXIT_CONFIG,
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::Numeric(_) | Error::Quadrature { .. } | Error::State(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_IO,
    }
}

/// Training and validation data with the number of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub val: Dataset,
    pub classes: usize,
}

pub fn load_task(cfg: &ExperimentConfig) -> Result<Task> {
    let rng = Rng::new(cfg.seed).substream("task");
    let (n_train, n_val) = (cfg.task.n_train, cfg.task.n_val);
    match &cfg.task.source {
        TaskSource::Synth(spec) => {
            let task = SynthTask::generate(spec, &mut rng.substream("templates"))?;
            Ok(Task {
                train: task.dataset(n_train, &mut rng.substream("train"))?,
                val: task.dataset(n_val, &mut rng.substream("val"))?,
                classes: spec.classes,
            })
        }
        TaskSource::SlMnist { images, labels, latency } => {
            let all = load_sl_mnist(images, labels, Some(n_train + n_val), latency, &mut rng.substream("slmnist"))?;
            split_task(all, n_train)
        }
        TaskSource::EventFile(path) => {
            let mut all = read_events_file(path)?;
            all.samples.truncate(n_train + n_val);
            split_task(all, n_train)
        }
    }
}

fn split_task(all: Dataset, n_train: usize) -> Result<Task> {
    if all.len() <= n_train {
        return Err(Error::Config(format!("dataset has {} samples, need more than {n_train}", all.len())));
    }
    let classes = all.n_classes().max(2);
    let (train, val) = all.split_at(n_train);
    Ok(Task { train, val, classes })
}

/// Per-layer statistics the conditions are solved from: the first layer sees
/// the data statistics, higher layers a spiking layer firing half of the time.
pub fn layer_stats(cfg: &ExperimentConfig, n_in: usize, data: DatasetStats) -> Vec<LayerStats> {
    let m = &cfg.model;
    (0..m.layers)
        .map(|l| {
            if l == 0 {
                LayerStats::data(n_in, m.n_rec, m.alpha, m.thr, data.mean_z, data.var_z)
            } else {
                LayerStats::stacked(m.n_rec, m.n_rec, m.alpha, m.thr)
            }
        })
        .collect()
}

pub fn solve_options(cfg: &ExperimentConfig) -> SolveOptions {
    SolveOptions {
        reset: cfg.model.reset,
        bounds: cfg.init.bounds,
        w_in_rule: cfg.init.rule,
        w_in_dist: cfg.init.dist,
        w_rec_dist: cfg.init.dist,
        on_infeasible: cfg.init.on_infeasible,
        ..SolveOptions::new(cfg.init.mask, cfg.surrogate.shape)
    }
}

fn cell_config(cfg: &ExperimentConfig, n_in: usize, surrogate: SurrogateSpec) -> CellConfig {
    let m = &cfg.model;
    let mut c = CellConfig::new(m.cell, n_in, m.n_rec, m.alpha, m.thr, surrogate);
    c.reset = m.reset;
    c.rho = m.rho;
    c.beta = m.beta;
    c
}

fn readout(rng: &Rng, n_top: usize, n_out: usize) -> Result<Readout> {
    let scheme = InitScheme::new(VarianceRule::Glorot, WeightDist::Uniform, n_top, n_out);
    Ok(Readout {
        w: sample_weights(&scheme, &mut rng.substream("readout"), n_top, n_out, false)?,
        bias: vec![0.0; n_out],
    })
}

/// Build a network as configured. For a conditioned init the solved layers
/// are returned too. Quantities outside the condition mask keep the
/// configured surrogate's dampening and sharpness.
pub fn build_network(
    cfg: &ExperimentConfig,
    n_in: usize,
    n_out: usize,
    data: DatasetStats,
) -> Result<(Network, Option<Vec<SolvedLayer>>)> {
    let rng = Rng::new(cfg.seed).substream("init");
    let m = &cfg.model;
    match cfg.init.mode {
        InitMode::Scheme => {
            let mut layers = Vec::with_capacity(m.layers);
            for l in 0..m.layers {
                let fan = if l == 0 { n_in } else { m.n_rec };
                let cell = cell_config(cfg, fan, cfg.surrogate);
                let width = cell.width();
                let s_in = InitScheme::new(cfg.init.rule, cfg.init.dist, fan, width);
                let s_rec = InitScheme::new(cfg.init.rule, cfg.init.dist, m.n_rec, width);
                let mut w = WeightSet {
                    w_in: sample_weights(&s_in, &mut rng.substream(&format!("w_in/{l}")), fan, width, false)?,
                    w_rec: sample_weights(&s_rec, &mut rng.substream(&format!("w_rec/{l}")), m.n_rec, width, true)?,
                    bias: vec![0.0; width],
                };
                w.mask_recurrent_diagonal(m.n_rec);
                layers.push(Layer { cfg: cell, w });
            }
            let net = Network { layers, readout: readout(&rng, m.n_rec, n_out)? };
            net.validate()?;
            Ok((net, None))
        }
        InitMode::Conditioned => {
            if m.cell == CellKind::Slstm {
                return Err(Error::Config("conditioned init applies to spiking cells (lif, alif)".into()));
            }
            let stats = layer_stats(cfg, n_in, data);
            let solved = solve_all(&stats, &solve_options(cfg), &rng)?;
            let mask = cfg.init.mask;
            let mut layers = Vec::with_capacity(m.layers);
            for (l, s) in solved.iter().enumerate() {
                let gamma = if mask.c3 { s.init.gamma } else { cfg.surrogate.gamma };
                let sharpness = if mask.c4 { s.init.sharpness } else { cfg.surrogate.sharpness };
                let spec = SurrogateSpec::new(cfg.surrogate.shape, gamma, sharpness)?;
                let fan = if l == 0 { n_in } else { m.n_rec };
                let cell = cell_config(cfg, fan, spec);
                let w = WeightSet { w_in: s.w_in.clone(), w_rec: s.w_rec.clone(), bias: vec![0.0; m.n_rec] };
                layers.push(Layer { cfg: cell, w });
            }
            let net = Network { layers, readout: readout(&rng, m.n_rec, n_out)? };
            net.validate()?;
            Ok((net, Some(solved)))
        }
    }
}

fn output_file(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io(format!("{}: {e}", cfg.output_dir.display())))?;
    Ok(cfg.output_dir.join(name))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Human-readable per-layer report of a conditioned init.
pub fn init_report(solved: &[SolvedLayer], mask: ConditionMask) -> String {
    let mut out = format!("conditions: {mask}\n");
    out.push_str("layer,mean_w_rec,var_w_rec,gamma,sharpness,target_e_sg2,attained_e_sg2,y_min,y_max,feasible,reason\n");
    for (l, s) in solved.iter().enumerate() {
        let i = &s.init;
        let target = i.target_second_moment.map_or("none".to_string(), |t| format!("{t:.6e}"));
        out.push_str(&format!(
            "{l},{:.6e},{:.6e},{:.6e},{:.6e},{target},{:.6e},{:.6e},{:.6e},{},{}\n",
            i.mean_w_rec,
            i.var_w_rec,
            i.gamma,
            i.sharpness,
            i.attained_second_moment,
            i.y_min,
            i.y_max,
            i.feasible,
            i.reason.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    out
}

/// Solve the conditions for the configured task and network. Prints the
/// report to `out` and to `init_solve.txt`; any infeasible layer is an error
/// after the report is written.
pub fn cmd_init_solve(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<Vec<SolvedLayer>> {
    cfg.validate()?;
    let task = load_task(cfg)?;
    let stats = layer_stats(cfg, task.train.channels, task.train.stats()?);
    let solved = solve_all(&stats, &solve_options(cfg), &Rng::new(cfg.seed).substream("init"))?;
    let report = init_report(&solved, cfg.init.mask);
    out.write_all(report.as_bytes())?;
    write_file(&output_file(cfg, "init_solve.txt")?, report.as_bytes())?;
    if let Some((layer, s)) = solved.iter().enumerate().find(|(_, s)| !s.init.feasible) {
        return Err(Error::Infeasible { layer, reason: s.init.reason.clone().unwrap_or_default() });
    }
    Ok(solved)
}

/// Build, train and evaluate one configured run without writing files.
pub fn run_training(cfg: &ExperimentConfig) -> Result<(Network, History)> {
    cfg.validate()?;
    let task = load_task(cfg)?;
    let (mut net, _) = build_network(cfg, task.train.channels, task.classes, task.train.stats()?)?;
    let history = fit(&mut net, &task.train, &task.val, &cfg.train_config())?;
    Ok((net, history))
}

/// Train and write `history.csv`, `weights.txt` and `config.txt` (the echoed
/// configuration) into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<History> {
    let echo = output_file(cfg, "config.txt")?;
    write_file(&echo, cfg.to_text().as_bytes())?;
    let (net, history) = run_training(cfg)?;
    let mut csv = Vec::new();
    history.write_csv(&mut csv)?;
    write_file(&output_file(cfg, "history.csv")?, &csv)?;
    let mut weights = Vec::new();
    write_weights(&net, &mut weights)?;
    write_file(&output_file(cfg, "weights.txt")?, &weights)?;
    Ok(history)
}

/// Plain-text dump of every parameter block.
pub fn write_weights<W: Write>(net: &Network, mut out: W) -> Result<()> {
    writeln!(out, "sgkit-weights layers={}", net.layers.len())?;
    let mut block = |name: String, rows: usize, cols: usize, vals: &[f64]| -> Result<()> {
        writeln!(out, "{name} {rows} {cols}")?;
        for r in 0..rows {
            let line: Vec<String> = vals[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    };
    for (l, layer) in net.layers.iter().enumerate() {
        let s = layer.cfg.surrogate;
        block(
            format!("layer{l}.surrogate[{} gamma={} sharpness={}]", s.shape, s.gamma, s.sharpness),
            0,
            0,
            &[],
        )?;
        let w = &layer.w;
        block(format!("layer{l}.w_in"), w.w_in.rows(), w.w_in.cols(), w.w_in.as_slice())?;
        block(format!("layer{l}.w_rec"), w.w_rec.rows(), w.w_rec.cols(), w.w_rec.as_slice())?;
        block(format!("layer{l}.bias"), 1, w.bias.len(), &w.bias)?;
    }
    let r = &net.readout;
    block("readout.w".into(), r.w.rows(), r.w.cols(), r.w.as_slice())?;
    block("readout.bias".into(), 1, r.bias.len(), &r.bias)?;
    Ok(())
}

/// One sweep cell outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub seed: u64,
    pub final_val_acc: f64,
    pub final_val_loss: f64,
    pub status: String,
}

/// Apply a sweep value to a copy of the configuration.
pub fn sweep_cell_config(base: &ExperimentConfig, axis: SweepAxis, value: &str, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    match axis {
        SweepAxis::Dampening => {
            cfg.set("surrogate.gamma", value)?;
            cfg.init.mask.c3 = false;
            cfg.init.mask.c4 = false;
        }
        SweepAxis::Sharpness => {
            cfg.set("surrogate.sharpness", value)?;
            cfg.init.mask.c4 = false;
        }
        SweepAxis::TailQ => {
            let q: f64 = value.parse().map_err(|_| Error::Config(format!("tail_q value '{value}' is not a number")))?;
            cfg.surrogate.shape = Shape::QPseudoSpike { q };
        }
        SweepAxis::Shape => cfg.set("surrogate.shape", value)?,
        SweepAxis::InitScheme => match value {
            "conditioned" => {
                cfg.init.mode = InitMode::Conditioned;
                cfg.init.mask = ConditionMask::ALL;
            }
            "naive" => {
                cfg.init.mode = InitMode::Conditioned;
                cfg.init.mask = ConditionMask::NONE;
            }
            other => {
                let (rule, dist) = other
                    .split_once('-')
                    .ok_or_else(|| Error::Config(format!("init_scheme value '{other}' is not rule-dist")))?;
                cfg.init.mode = InitMode::Scheme;
                cfg.set("init.rule", rule)?;
                cfg.set("init.dist", dist)?;
            }
        },
    }
    Ok(cfg)
}

fn threads() -> usize {
    std::env::var("SGKIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// One full training run per value and seed (seeds `seed .. seed + seeds`).
/// Failed cells are recorded with `status=failed` and the sweep continues.
/// Rows are ordered by value, then seed, whatever the thread count.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let axis = cfg.sweep.axis;
    let cells: Vec<(String, u64)> = cfg
        .sweep
        .values
        .iter()
        .flat_map(|v| (0..cfg.sweep.seeds as u64).map(move |s| (v.clone(), cfg.seed + s)))
        .collect();
    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((value, seed)) = cells.get(i) else { break };
        let outcome = sweep_cell_config(cfg, axis, value, *seed).and_then(|c| run_training(&c));
        let row = match outcome {
            Ok((_, h)) => {
                let last = h.last().copied();
                SweepRow {
                    axis,
                    value: value.clone(),
                    seed: *seed,
                    final_val_acc: last.map_or(f64::NAN, |r| r.val_mode_acc),
                    final_val_loss: last.map_or(f64::NAN, |r| r.val_loss),
                    status: "ok".into(),
                }
            }
            Err(e) => {
                log::warn!("sweep cell {axis}={value} seed {seed} failed: {e}");
                SweepRow {
                    axis,
                    value: value.clone(),
                    seed: *seed,
                    final_val_acc: f64::NAN,
                    final_val_loss: f64::NAN,
                    status: "failed".into(),
                }
            }
        };
        results.lock().expect("sweep results lock")[i] = Some(row);
    };
    let n_threads = threads().min(cells.len()).max(1);
    std::thread::scope(|s| {
        for _ in 1..n_threads {
            s.spawn(work);
        }
        work();
    });
    Ok(results.into_inner().expect("sweep results lock").into_iter().flatten().collect())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "axis,value,seed,final_val_acc,final_val_loss,status")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.16e},{:.16e},{}",
            r.axis, r.value, r.seed, r.final_val_acc, r.final_val_loss, r.status
        )?;
    }
    Ok(())
}

/// Run the sweep and write `sweep_<axis>.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(cfg)?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv)?;
    write_file(&output_file(cfg, &format!("sweep_{}.csv", cfg.sweep.axis))?, &csv)?;
    Ok(rows)
}

/// Network statistics at one `(t, layer)`, pooled over neurons and probe
/// sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub t: usize,
    pub layer: usize,
    pub firing_rate: f64,
    pub mean_v: f64,
    pub median_v: f64,
    pub var_v: f64,
    pub recurrent_term_var: f64,
    pub input_term_var: f64,
    /// Mean over sequences of `Var` over neurons of `∂L/∂y`.
    pub grad_var: f64,
    /// Largest `∂L/∂y` entry over neurons and sequences.
    pub grad_max: f64,
}

/// Bernoulli input sequences whose rate matches `rate`.
pub fn matched_inputs(rng: &mut Rng, n: usize, steps: usize, channels: usize, rate: f64) -> Vec<Matrix> {
    (0..n)
        .map(|_| {
            let mut m = Matrix::zeros(steps, channels);
            for v in m.as_mut_slice() {
                *v = if rng.bernoulli(rate) { 1.0 } else { 0.0 };
            }
            m
        })
        .collect()
}

/// Forward every input and back-propagate a random loss injected at the last
/// step, then summarise per `(t, layer)`.
pub fn probe_network(net: &Network, inputs: &[Matrix], rng: &mut Rng) -> Result<Vec<ProbeRow>> {
    let first = inputs.first().ok_or_else(|| Error::Domain("probe needs at least one sequence".into()))?;
    let steps = first.rows();
    let n_layers = net.layers.len();
    let cells = steps * n_layers;
    let mut pooled: Vec<[Vec<f64>; 4]> = (0..cells).map(|_| Default::default()).collect();
    let mut fire = vec![0.0; cells];
    let mut gvar = vec![0.0; cells];
    let mut gmax = vec![f64::NEG_INFINITY; cells];
    for x in inputs {
        if x.rows() != steps {
            return Err(Error::Shape("probe sequences differ in length".into()));
        }
        let tape = net.forward(x, Activation::Hard)?;
        let mut lg = Matrix::zeros(steps, net.n_out());
        let noise = rng.sample(Dist::Normal { mean: 0.0, var: 1.0 }, net.n_out())?;
        lg.row_mut(steps - 1).copy_from_slice(&noise);
        let (_, points) = grad_probe(&tape, &lg, net)?;
        for p in points {
            let k = p.t * n_layers + p.layer;
            gvar[k] += p.var / inputs.len() as f64;
            gmax[k] = gmax[k].max(p.max);
        }
        for (l, recs) in tape.records.iter().enumerate() {
            for (t, r) in recs.iter().enumerate() {
                let k = t * n_layers + l;
                let n = net.layers[l].cfg.n_rec;
                fire[k] += r.x.iter().sum::<f64>();
                pooled[k][0].extend_from_slice(&r.v);
                pooled[k][1].extend_from_slice(&r.recurrent_current[..n]);
                pooled[k][2].extend_from_slice(&r.input_current[..n]);
            }
        }
    }
    let mut rows = Vec::with_capacity(cells);
    for t in 0..steps {
        for l in 0..n_layers {
            let k = t * n_layers + l;
            let [v, rec, inp, _] = &pooled[k];
            rows.push(ProbeRow {
                t,
                layer: l,
                firing_rate: fire[k] / v.len() as f64,
                mean_v: numkit::mean(v),
                median_v: numkit::median(v),
                var_v: numkit::variance(v),
                recurrent_term_var: numkit::variance(rec),
                input_term_var: numkit::variance(inp),
                grad_var: gvar[k],
                grad_max: gmax[k],
            });
        }
    }
    Ok(rows)
}

pub const PROBE_HEADER: &str =
    "t,layer,firing_rate,mean_v,median_v,var_v,recurrent_term_var,input_term_var,grad_var,grad_max";

pub fn write_probe_csv<W: Write>(rows: &[ProbeRow], mut out: W) -> Result<()> {
    writeln!(out, "{PROBE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t,
            r.layer,
            r.firing_rate,
            r.mean_v,
            r.median_v,
            r.var_v,
            r.recurrent_term_var,
            r.input_term_var,
            r.grad_var,
            r.grad_max
        )?;
    }
    Ok(())
}

/// Probe the configured initial network with inputs matched to the task's
/// firing rate, writing `probe.csv`.
pub fn cmd_probe(cfg: &ExperimentConfig) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    let task = load_task(cfg)?;
    let stats = task.train.stats()?;
    let (net, _) = build_network(cfg, task.train.channels, task.classes, stats)?;
    let rng = Rng::new(cfg.seed).substream("probe");
    let inputs = matched_inputs(
        &mut rng.substream("inputs"),
        cfg.probe.samples,
        cfg.probe.steps,
        task.train.channels,
        stats.mean_z,
    );
    let rows = probe_network(&net, &inputs, &mut rng.substream("loss"))?;
    let mut csv = Vec::new();
    write_probe_csv(&rows, &mut csv)?;
    write_file(&output_file(cfg, "probe.csv")?, &csv)?;
    Ok(rows)
}

/// Write the configured task's training and validation samples as one
/// event file, `events.txt`.
pub fn cmd_encode(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let task = load_task(cfg)?;
    let mut all = task.train;
    all.samples.extend(task.val.samples);
    let path = output_file(cfg, "events.txt")?;
    write_events_file(&all, &path)?;
    Ok(path)
}
