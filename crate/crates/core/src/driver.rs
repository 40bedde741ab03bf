//! Time loop, snapshot output, BIC/AIC analysis and the sensor cost harness.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cases::{build_discretization, initial_state};
use crate::clustering::{fit_from_scratch, model_selection_metrics};
use crate::config::{CaseConfig, StabilizationKind};
use crate::error::{Error, Result};
use crate::gas::{artificial_coefficients, pressure, State};
use crate::sensors::{sensor_gradients, FeatureChoice, SensorField, SensorKind, SensorOrchestrator};
use crate::snapshot::{SnapshotMeta, SnapshotRecord, NCOLS};
use crate::spatial::{
    alpha_from_nodal_sensor, assemble_rhs_into, assemble_rhs_prepared, prepare_rhs, ArtificialCoefficients,
    BlendCoefficients, ConservativeField, Discretization, GradientField, Stabilization,
};
use crate::time::{cfl_report, limit_field, limit_states, ssprk33_step, CflReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct WallTimes {
    pub total: f64,
    pub rhs: f64,
    pub sensor: f64,
    pub limiter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensorSample {
    pub step: usize,
    pub time: f64,
    /// Fraction of nodes with `s > 0.5`.
    pub flagged: f64,
    /// Fraction of nodes with `s > 0`.
    pub active: f64,
}

/// Stateful solver for one configured case.
pub struct Solver {
    cfg: CaseConfig,
    disc: Discretization,
    field: ConservativeField,
    t: f64,
    step: usize,
    orch: SensorOrchestrator,
    sensor: SensorField,
    sensor_version: usize,
    blend: Option<BlendCoefficients>,
    coeffs: Vec<ArtificialCoefficients>,
    scratch: ConservativeField,
    rhs_out: ConservativeField,
    wall: [Duration; 3],
    step_wall: Duration,
    limited: usize,
    min_rho: f64,
    min_p: f64,
    history: Vec<SensorSample>,
}

impl Solver {
    pub fn new(cfg: CaseConfig) -> Result<Self> {
        cfg.validate()?;
        let disc = build_discretization(&cfg)?;
        let field = initial_state(cfg.case, &disc);
        Self::assemble(cfg, disc, field, 0.0, 0)
    }

    /// Resumes from a stored state, e.g. a snapshot of a developed flow.
    pub fn from_state(cfg: CaseConfig, field: ConservativeField, t: f64, step: usize) -> Result<Self> {
        cfg.validate()?;
        let disc = build_discretization(&cfg)?;
        disc.check_layout(&field)?;
        Self::assemble(cfg, disc, field, t, step)
    }

    fn assemble(cfg: CaseConfig, disc: Discretization, mut field: ConservativeField, t: f64, step: usize) -> Result<Self> {
        limit_field(&disc, &mut field, &cfg.limiter, t)?;
        let orch = SensorOrchestrator::new(cfg.sensor.clone(), cfg.seed)?;
        let ne = disc.mesh().num_elements();
        let npe = disc.nodes_per_element();
        let (min_rho, min_p) = admissibility_minima(&field, &disc);
        Ok(Solver {
            sensor: SensorField::zeros(ne, npe),
            sensor_version: 0,
            blend: None,
            coeffs: vec![ArtificialCoefficients::default(); ne],
            scratch: field.clone(),
            rhs_out: field.clone(),
            cfg,
            disc,
            field,
            t,
            step,
            orch,
            wall: [Duration::ZERO; 3],
            step_wall: Duration::ZERO,
            limited: 0,
            min_rho,
            min_p,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &CaseConfig {
        &self.cfg
    }
    pub fn discretization(&self) -> &Discretization {
        &self.disc
    }
    pub fn field(&self) -> &ConservativeField {
        &self.field
    }
    pub fn time(&self) -> f64 {
        self.t
    }
    pub fn step_index(&self) -> usize {
        self.step
    }
    pub fn sensor(&self) -> &SensorField {
        &self.sensor
    }
    pub fn orchestrator(&self) -> &SensorOrchestrator {
        &self.orch
    }
    pub fn sensor_history(&self) -> &[SensorSample] {
        &self.history
    }
    /// Smallest nodal density and pressure seen after any completed step.
    pub fn minima(&self) -> (f64, f64) {
        (self.min_rho, self.min_p)
    }
    pub fn limited_elements(&self) -> usize {
        self.limited
    }

    pub fn wall_times(&self) -> WallTimes {
        WallTimes {
            total: self.step_wall.as_secs_f64(),
            rhs: self.wall[0].as_secs_f64(),
            sensor: self.orch.total_time().as_secs_f64(),
            limiter: self.wall[2].as_secs_f64(),
        }
    }

    /// Clears accumulated timings, keeping the flow and sensor state.
    pub fn reset_timings(&mut self) {
        self.wall = [Duration::ZERO; 3];
        self.step_wall = Duration::ZERO;
        self.orch.reset_timings();
    }

    pub fn totals(&self) -> State {
        self.disc.integrate(&self.field)
    }

    /// Nodal blend coefficient (max over adjacent sub-cell interfaces) or `alpha_a`.
    pub fn nodal_alpha(&self) -> Vec<f64> {
        let npe = self.disc.nodes_per_element();
        match self.cfg.stabilization.kind {
            StabilizationKind::Blending => match &self.blend {
                Some(b) => b.nodal_max(),
                None => vec![0.0; self.disc.num_nodes()],
            },
            StabilizationKind::Viscosity => self
                .coeffs
                .iter()
                .flat_map(|c| std::iter::repeat_n(c.alpha, npe))
                .collect(),
            StabilizationKind::None => vec![0.0; self.disc.num_nodes()],
        }
    }

    fn refresh_stabilization(&mut self, shared: Option<&GradientField>) -> Result<()> {
        self.orch.update_with(self.step, &self.disc, &self.field, self.t, shared)?;
        if self.orch.evaluations == self.sensor_version {
            return Ok(());
        }
        self.sensor_version = self.orch.evaluations;
        self.sensor = self.orch.cached().expect("sensor evaluated").clone();
        self.history.push(SensorSample {
            step: self.step,
            time: self.t,
            flagged: self.sensor.fraction_above(0.5),
            active: self.sensor.fraction_above(0.0),
        });
        let st = &self.cfg.stabilization;
        match st.kind {
            StabilizationKind::Blending => {
                self.blend = Some(alpha_from_nodal_sensor(&self.disc, &self.sensor.nodal, st.alpha_max)?);
            }
            StabilizationKind::Viscosity => {
                let v = self.disc.mesh().volume();
                let order = self.disc.ops().order();
                for (c, &s) in self.coeffs.iter_mut().zip(&self.sensor.element) {
                    let (alpha, mu) = artificial_coefficients(s, st.mu0, v, 2, order);
                    *c = ArtificialCoefficients { alpha, mu };
                }
            }
            StabilizationKind::None => {}
        }
        Ok(())
    }

    /// Advances one step of length `dt`.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        let start = Instant::now();
        // With physical viscosity the first stage lifts entropy gradients anyway;
        // do it up front so the sensor can share them.
        let mut prepared = if self.disc.viscosity() > 0.0 {
            let s = Instant::now();
            let p = prepare_rhs(&self.disc, &self.field, self.t, true)?;
            self.wall[0] += s.elapsed();
            Some(p)
        } else {
            None
        };
        self.refresh_stabilization(prepared.as_ref().and_then(|p| p.gradients()))?;
        let stab = match self.cfg.stabilization.kind {
            StabilizationKind::Blending => match &self.blend {
                Some(b) => Stabilization::Blending(b),
                None => Stabilization::None,
            },
            StabilizationKind::Viscosity => Stabilization::Viscosity(&self.coeffs),
            StabilizationKind::None => Stabilization::None,
        };
        let disc = &self.disc;
        let limiter = self.cfg.limiter;
        let scratch = &mut self.scratch;
        let rhs_out = &mut self.rhs_out;
        let [rhs_wall, _, lim_wall] = &mut self.wall;
        let limited = &mut self.limited;
        ssprk33_step(
            self.field.as_flat_mut(),
            self.t,
            dt,
            |u, t, k| {
                let s = Instant::now();
                scratch.as_flat_mut().copy_from_slice(u);
                // The first stage evaluates the state the inputs were prepared for.
                match prepared.take() {
                    Some(inputs) => assemble_rhs_prepared(disc, scratch, t, stab, &inputs, rhs_out)?,
                    None => assemble_rhs_into(disc, scratch, t, stab, rhs_out)?,
                }
                k.copy_from_slice(rhs_out.as_flat());
                *rhs_wall += s.elapsed();
                Ok(())
            },
            |u, t| {
                let s = Instant::now();
                let (states, _) = u.as_chunks_mut::<4>();
                *limited += limit_states(disc, states, &limiter, t)?;
                *lim_wall += s.elapsed();
                Ok(())
            },
        )?;
        self.t += dt;
        self.step += 1;
        let (rho, p) = admissibility_minima(&self.field, &self.disc);
        self.min_rho = self.min_rho.min(rho);
        self.min_p = self.min_p.min(p);
        self.step_wall += start.elapsed();
        if !(rho > 0.0 && p > 0.0) {
            return Err(Error::Numerical {
                element: first_bad_element(&self.field, &self.disc),
                time: self.t,
                reason: format!("non-admissible state after limiting (min density {rho:e}, min pressure {p:e})"),
            });
        }
        Ok(())
    }

    pub fn cfl(&self) -> Result<CflReport> {
        let mu: Vec<f64> = match self.cfg.stabilization.kind {
            StabilizationKind::Viscosity => self.coeffs.iter().map(|c| c.mu.max(c.alpha)).collect(),
            _ => Vec::new(),
        };
        cfl_report(&self.disc, &self.field, self.cfg.dt, &mu)
    }

    pub fn snapshot(&self) -> Result<SnapshotRecord> {
        let mesh = self.disc.mesh();
        let grads = sensor_gradients(&self.disc, &self.field, self.t)?;
        let alpha = self.nodal_alpha();
        let gas = self.disc.gas();
        let ([x0, x1], [y0, y1]) = mesh.bounds();
        let rows: Vec<[f64; NCOLS]> = self
            .field
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let [x, y] = self.disc.coordinates()[i];
                let g = &grads[i];
                [
                    x,
                    y,
                    q[0],
                    q[1],
                    q[2],
                    q[3],
                    pressure(q, gas),
                    self.sensor.nodal[i],
                    alpha[i],
                    g.p[0],
                    g.p[1],
                    g.div_v,
                ]
            })
            .collect();
        Ok(SnapshotRecord {
            meta: SnapshotMeta {
                case: self.cfg.case.name().into(),
                time: self.t,
                step: self.step,
                order: self.cfg.order,
                nx: mesh.nx(),
                ny: mesh.ny(),
                bounds: [x0, x1, y0, y1],
                gamma: gas.gamma,
                seed: self.cfg.seed,
                config_hash: self.cfg.hash(),
            },
            rows,
        })
    }
}

fn admissibility_minima(field: &ConservativeField, disc: &Discretization) -> (f64, f64) {
    let gas = disc.gas();
    field
        .nodes()
        .par_iter()
        .map(|q| (q[0], pressure(q, gas)))
        .reduce(|| (f64::INFINITY, f64::INFINITY), |a, b| (a.0.min(b.0), a.1.min(b.1)))
}

fn first_bad_element(field: &ConservativeField, disc: &Discretization) -> usize {
    let gas = disc.gas();
    let npe = disc.nodes_per_element();
    field
        .nodes()
        .iter()
        .position(|q| !(q[0] > 0.0 && pressure(q, gas) > 0.0))
        .map_or(0, |i| i / npe)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub case: String,
    pub config_sha256: String,
    pub steps: usize,
    pub time: f64,
    pub min_density: f64,
    pub min_pressure: f64,
    pub initial_totals: State,
    pub final_totals: State,
    pub limited_elements: usize,
    pub sensor_evaluations: usize,
    pub cold_starts: usize,
    pub initial_cfl: CflReport,
    pub wall: WallTimes,
    pub sensor_history: Vec<SensorSample>,
    pub snapshots: Vec<PathBuf>,
}

fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("snapshot_{step:06}.csv"))
}

/// Runs a case to completion, writing snapshots and `report.json` when `out_dir` is given.
pub fn run_case(cfg: &CaseConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    let mut solver = Solver::new(cfg.clone())?;
    run_solver(&mut solver, out_dir)
}

pub fn run_solver(solver: &mut Solver, out_dir: Option<&Path>) -> Result<RunReport> {
    let cfg = solver.config().clone();
    let (steps, last_dt) = cfg.schedule();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut snapshots = Vec::new();
    let write = |solver: &Solver, snaps: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = snapshot_path(dir, solver.step_index());
            solver.snapshot()?.write(&path)?;
            snaps.push(path);
        }
        Ok(())
    };
    let initial_totals = solver.totals();
    let initial_cfl = solver.cfl()?;
    write(solver, &mut snapshots)?;
    for n in 0..steps {
        let dt = if n + 1 == steps { last_dt } else { cfg.dt };
        if let Err(err) = solver.step(dt) {
            log::error!("run stopped at step {}: {err}", solver.step_index());
            return Err(err);
        }
        let k = solver.step_index();
        if k < steps && cfg.output.interval > 0 && k % cfg.output.interval == 0 {
            write(solver, &mut snapshots)?;
        }
        if k % 100 == 0 {
            log::info!("step {k}/{steps} t = {:.6}", solver.time());
        }
    }
    if steps > 0 {
        write(solver, &mut snapshots)?;
    }
    let (min_rho, min_p) = solver.minima();
    let report = RunReport {
        case: cfg.case.name().into(),
        config_sha256: cfg.hash(),
        steps,
        time: solver.time(),
        min_density: min_rho,
        min_pressure: min_p,
        initial_totals,
        final_totals: solver.totals(),
        limited_elements: solver.limited_elements(),
        sensor_evaluations: solver.orchestrator().evaluations,
        cold_starts: solver.orchestrator().cold_starts,
        initial_cfl,
        wall: solver.wall_times(),
        sensor_history: solver.sensor_history().to_vec(),
        snapshots,
    };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("report.json"), json)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BicRow {
    pub k: usize,
    /// Components left after overlap deletion.
    pub k_fitted: usize,
    pub log_likelihood: f64,
    pub free_parameters: usize,
    pub aic: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    pub features: FeatureChoice,
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            features: FeatureChoice::GradpDivv,
            k_min: 1,
            k_max: 6,
            seed: 1,
            max_iters: 500,
            epsilon: 1e-8,
            delta: 1e-6,
        }
    }
}

/// Fresh k-means + EM fit for every `K` in range on the snapshot's features.
pub fn analyze_record(record: &SnapshotRecord, opts: &AnalyzeOptions) -> Result<Vec<BicRow>> {
    if opts.k_min == 0 || opts.k_min > opts.k_max {
        return Err(Error::Config(format!("bad K range {}..{}", opts.k_min, opts.k_max)));
    }
    let points = record.features(opts.features)?;
    (opts.k_min..=opts.k_max)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let (mix, _) = fit_from_scratch(&points, k, opts.max_iters, opts.epsilon, opts.delta, &mut rng)?;
            let m = model_selection_metrics(&points, &mix)?;
            Ok(BicRow {
                k,
                k_fitted: mix.len(),
                log_likelihood: m.log_likelihood,
                free_parameters: m.free_parameters,
                aic: m.aic,
                bic: m.bic,
            })
        })
        .collect()
}

pub fn analyze_snapshot(path: &Path, opts: &AnalyzeOptions) -> Result<Vec<BicRow>> {
    let record = SnapshotRecord::read(path)?;
    analyze_record(&record, opts)
}

pub fn bic_table_csv(rows: &[BicRow]) -> String {
    let mut out = String::from("K,logL,N_p,AIC,BIC,K_fitted\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{},{:e},{:e},{}\n",
            r.k, r.log_likelihood, r.free_parameters, r.aic, r.bic, r.k_fitted
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEntry {
    pub sensor: String,
    pub cadence: usize,
    pub evaluations: usize,
    pub sensor_seconds: f64,
    pub total_seconds: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub case: String,
    pub steps: usize,
    pub warmup_steps: usize,
    pub threads: usize,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn entry(&self, sensor: SensorKind, cadence: usize) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.sensor == sensor.name() && e.cadence == cadence)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }
}

/// Sensor wall time over total step time for every sensor kind at cadence 1
/// and 10. Each run first takes `warmup` untimed steps so the cold start is
/// excluded.
pub fn measure_sensor_cost(
    cfg: &CaseConfig,
    start: Option<&SnapshotRecord>,
    steps: usize,
    warmup: usize,
) -> Result<CostReport> {
    let initial = match start {
        Some(rec) => Some((rec.field()?, rec.meta.time, rec.meta.step)),
        None => None,
    };
    let mut entries = Vec::new();
    for kind in [SensorKind::None, SensorKind::Gmm, SensorKind::Modal, SensorKind::Integral] {
        for cadence in [1usize, 10] {
            let mut c = cfg.clone();
            c.sensor.kind = kind;
            c.sensor.interval = cadence;
            let mut solver = match &initial {
                Some((field, t, step)) => Solver::from_state(c, field.clone(), *t, *step)?,
                None => Solver::new(c)?,
            };
            for _ in 0..warmup {
                solver.step(cfg.dt)?;
            }
            solver.reset_timings();
            let before = solver.orchestrator().evaluations;
            for _ in 0..steps {
                solver.step(cfg.dt)?;
            }
            let w = solver.wall_times();
            let evaluations = solver.orchestrator().evaluations - before;
            let fraction = match kind {
                SensorKind::None => 0.0,
                _ if w.total > 0.0 => w.sensor / w.total,
                _ => 0.0,
            };
            entries.push(CostEntry {
                sensor: kind.name().into(),
                cadence,
                evaluations,
                sensor_seconds: w.sensor,
                total_seconds: w.total,
                fraction,
            });
        }
    }
    Ok(CostReport {
        case: cfg.case.name().into(),
        steps,
        warmup_steps: warmup,
        threads: rayon::current_num_threads(),
        entries,
    })
}

/// Writes `(x, rho, u, p)` of the exact Sod solution at time `t` on `n` points.
pub fn write_sod_reference(path: &Path, t: f64, gamma: f64, n: usize) -> Result<()> {
    let exact = crate::exact::sod_problem(gamma)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,rho,u,p")?;
    for i in 0..n {
        let x = (i as f64 + 0.5) / n as f64;
        let s = if t > 0.0 {
            exact.at(x, crate::cases::SOD_INTERFACE, t)
        } else {
            let w = crate::cases::sod_primitive(x);
            crate::exact::Riemann1d { rho: w.rho, u: w.u, p: w.p }
        };
        writeln!(f, "{x:e},{:e},{:e},{:e}", s.rho, s.u, s.p)?;
    }
    Ok(())
}
