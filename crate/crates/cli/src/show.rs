//! Plain-text rendering of solutions and delay reports.

use std::io::{self, Write};

use dualscale_core::report::DelaySource;
use dualscale_core::{DelayReport, Pattern, Scenario, Solution};

/// Patterns below this share are not printed.
const SHOWN: f64 = 1e-6;

fn shares(out: &mut impl Write, label: &str, v: &[f64]) -> io::Result<()> {
    for (idx, &share) in v.iter().enumerate() {
        if share > SHOWN {
            let p = Pattern::from_bits(idx as u32);
            writeln!(out, "  {label}[{p}] = {share:.6}  (mask {})", p.bits())?;
        }
    }
    Ok(())
}

pub fn solution(out: &mut impl Write, scenario: &Scenario, sol: &Solution, load_mult: f64) -> io::Result<()> {
    let trace = &sol.trace;
    let kind = if trace.converged { "stationary allocation" } else { "allocation (outer loop did not converge)" };
    writeln!(
        out,
        "{} {kind}: {} APs, {} UE groups, load x{load_mult}",
        sol.method,
        scenario.n_aps(),
        scenario.n_groups()
    )?;
    writeln!(out, "spectrum shares:")?;
    shares(out, "y", &sol.allocation.y)?;
    writeln!(out, "time shares:")?;
    shares(out, "z", &sol.allocation.z)?;
    let rho: Vec<String> = sol.state.rho.iter().map(|r| format!("{r:.4}")).collect();
    writeln!(out, "AP utilizations: {}", rho.join(" "))?;
    if let Some(sigma) = &sol.state.sigma {
        let s: Vec<String> = sigma.iter().map(|r| format!("{r:.4}")).collect();
        writeln!(out, "group utilizations: {}", s.join(" "))?;
    }
    report(out, scenario, &sol.report)?;
    write!(out, "outer iterations: {}", trace.outer_iterations())?;
    if let Some(start) = trace.start {
        write!(out, ", start {start:?}")?;
    }
    writeln!(out)?;
    for d in &trace.dropped_starts {
        writeln!(out, "dropped start: {d}")?;
    }
    for a in &trace.anomalies {
        writeln!(out, "anomaly: {a}")?;
    }
    Ok(())
}

pub fn report(out: &mut impl Write, scenario: &Scenario, r: &DelayReport) -> io::Result<()> {
    let unit = if scenario.association.is_fixed() { "AP" } else { "group" };
    let source = match r.source {
        DelaySource::Analytic => "analytic",
        DelaySource::Simulated => "simulated",
    };
    writeln!(out, "{source} delays:")?;
    for q in &r.queues {
        write!(out, "  {unit} {}: lambda {:.4} pkt/s, delay {:.6} s", q.queue + 1, q.lambda, q.mean_s)?;
        if let Some(ci) = q.ci_half_width_s {
            write!(out, " +/- {ci:.6}")?;
        }
        writeln!(out)?;
    }
    write!(out, "network mean delay: {:.6} s", r.network_mean_s)?;
    if let Some(ci) = r.network_ci_s {
        write!(out, " +/- {ci:.6} (95%)")?;
    }
    writeln!(out)?;
    if r.source == DelaySource::Simulated {
        writeln!(out, "packets measured: {}, warm-up discarded: {}", r.packets_served, r.warmup_discarded)?;
    }
    Ok(())
}
