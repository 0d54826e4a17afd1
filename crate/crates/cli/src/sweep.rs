//! Method × load sweeps, run in parallel and written in a fixed row order.

use std::io::Write;

use anyhow::Result;
use dualscale_core::allocators::{self, AllocatorOptions, Method};
use dualscale_core::sim::{self, SimOptions};
use dualscale_core::{Error, Scenario};
use rayon::prelude::*;
use serde::Serialize;

pub struct SweepSpec {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub loads: Vec<f64>,
    pub seeds: Vec<u64>,
    /// 0 skips simulation.
    pub packets: u64,
    pub opts: AllocatorOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub method: &'static str,
    pub load_mult: f64,
    pub analytic_delay_s: Option<f64>,
    pub sim_delay_s: Option<f64>,
    pub sim_ci_s: Option<f64>,
    pub max_rho: Option<f64>,
    pub outer_iters: Option<usize>,
    pub status: &'static str,
}

fn status_of(err: &Error) -> &'static str {
    match err {
        Error::Infeasible(_) => "infeasible",
        Error::UnstableQueue { .. } => "unstable",
        Error::Saturated { .. } => "saturated",
        Error::NoConvergence { .. }
        | Error::NumericalStall(_)
        | Error::ZeroServiceRate { .. }
        | Error::NonContractiveStart { .. }
        | Error::DegenerateUtilization { .. } => "numerical",
        _ => "error",
    }
}

fn point(spec: &SweepSpec, method: Method, load_mult: f64) -> Row {
    let mut row = Row {
        method: method.name(),
        load_mult,
        analytic_delay_s: None,
        sim_delay_s: None,
        sim_ci_s: None,
        max_rho: None,
        outer_iters: None,
        status: "ok",
    };
    let scenario = spec.scenario.scaled_load(load_mult);
    let sol = match allocators::solve(method, &scenario, &spec.opts) {
        Ok(sol) => sol,
        Err(e) => {
            log::info!("{} at x{load_mult}: {e}", method.name());
            row.status = status_of(&e);
            return row;
        }
    };
    row.analytic_delay_s = Some(sol.report.network_mean_s);
    row.max_rho = Some(sol.max_util());
    row.outer_iters = Some(sol.trace.outer_iterations());
    if !sol.trace.converged {
        row.status = "not-converged";
    }
    if spec.packets == 0 {
        return row;
    }
    let mut means = Vec::with_capacity(spec.seeds.len());
    let mut single_ci = None;
    for &seed in &spec.seeds {
        let opts = SimOptions { n_packets: spec.packets, seed, ..Default::default() };
        match sim::simulate(&scenario, &sol.allocation, &opts) {
            Ok(r) => {
                means.push(r.report.network_mean_s);
                single_ci = r.report.network_ci_s;
            }
            Err(e) => {
                log::info!("{} at x{load_mult}, seed {seed}: {e}", method.name());
                row.status = status_of(&e);
                return row;
            }
        }
    }
    row.sim_delay_s = Some(means.iter().sum::<f64>() / means.len() as f64);
    // One seed: batch-means interval. Several: spread of the per-seed means.
    row.sim_ci_s = if means.len() == 1 { single_ci } else { sim::half_width(&means) };
    row
}

/// One row per (method, load), methods outermost, in the order given.
pub fn run(spec: &SweepSpec) -> Vec<Row> {
    let points: Vec<(Method, f64)> =
        spec.methods.iter().flat_map(|&m| spec.loads.iter().map(move |&l| (m, l))).collect();
    points.par_iter().map(|&(m, l)| point(spec, m, l)).collect()
}

pub fn write_csv<W: Write>(rows: &[Row], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
