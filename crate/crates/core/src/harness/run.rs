//! Run orchestration: scenario, filter, summary and output files.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::csv;
use crate::error::{Error, Result};
use crate::hybrid::{run_filter, Divergence, Mode, RunHistory};
use crate::par;
use crate::pgm1::Pgm1Diagnostics;
use crate::pgm2::Pgm2Diagnostics;
use crate::scenario::{build_scenario, ScenarioData};

/// State component labels in table order.
pub const COMPONENT_LABELS: [&str; 6] = ["x (km)", "y (km)", "z (km)", "vx (km/s)", "vy (km/s)", "vz (km/s)"];

/// Machine-readable result of one run. Contains nothing that varies between
/// identical runs; wall-clock time is reported separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub pass_length: usize,
    pub steps_processed: usize,
    /// Standard deviations of the initial box, km and km/s.
    pub initial_std: [f64; 6],
    /// Standard deviations after the last processed step.
    pub final_std: Option<[f64; 6]>,
    pub entropy_nats: Vec<f64>,
    pub consistent: Vec<bool>,
    pub first_inconsistent_step: Option<usize>,
    pub divergence: Option<Divergence>,
    pub custody_held: bool,
}

impl RunSummary {
    pub fn from_history(cfg: &RunConfig, pass_length: usize, h: &RunHistory) -> Self {
        Self {
            mode: h.mode,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            pass_length,
            steps_processed: h.records.len(),
            initial_std: h.initial_std_km.into(),
            final_std: h.records.last().map(|r| r.std_km.into()),
            entropy_nats: h.records.iter().map(|r| r.entropy).collect(),
            consistent: h.records.iter().map(|r| r.consistent).collect(),
            first_inconsistent_step: h.first_inconsistent_step(),
            divergence: h.divergence.clone(),
            custody_held: h.custody_held() && h.records.len() == pass_length,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("summary: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Everything a run produces, held in memory.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub scenario: ScenarioData,
    pub history: RunHistory,
    pub elapsed_s: f64,
}

/// Builds the scenario and runs the configured filter. Measurement synthesis
/// and the filter draw from one generator seeded by `cfg.seed`.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    let resolved = cfg.resolve()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (scenario, history) = par::with_threads(cfg.threads, || -> Result<_> {
        let scenario = build_scenario(&resolved.scenario, &resolved.system, &mut rng)?;
        let history = run_filter(
            cfg.mode,
            &scenario.measurements,
            &scenario.truth,
            &resolved.filter,
            &resolved.system,
            &mut rng,
        )?;
        Ok((scenario, history))
    })?;
    let summary = RunSummary::from_history(cfg, scenario.len(), &history);
    Ok(RunOutput {
        summary,
        scenario,
        history,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Builds only the scenario.
pub fn scenario_only(cfg: &RunConfig) -> Result<ScenarioData> {
    let resolved = cfg.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    build_scenario(&resolved.scenario, &resolved.system, &mut rng)
}

pub fn entropy_csv(h: &RunHistory) -> String {
    let mut out = String::from("step,epoch_nondim,entropy_nats\n");
    for r in &h.records {
        out.push_str(&format!("{},{},{}\n", r.step, csv::num(r.epoch.0), csv::num(r.entropy)));
    }
    out
}

fn pgm1_csv(d: &[Pgm1Diagnostics]) -> String {
    let mut out = format!("{}\n", Pgm1Diagnostics::CSV_HEADER);
    for row in d {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    out
}

fn pgm2_csv(d: &[Pgm2Diagnostics]) -> String {
    let mut out = format!("{}\n", Pgm2Diagnostics::CSV_HEADER);
    for row in d {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    out
}

/// Output file names and contents, in write order.
pub fn artifact_files(cfg: &RunConfig, out: &RunOutput) -> Vec<(String, String)> {
    let mut files = vec![
        ("config.toml".to_string(), cfg.to_toml()),
        ("truth.csv".to_string(), out.scenario.truth_csv()),
        ("measurements.csv".to_string(), out.scenario.measurements_csv()),
        ("track.csv".to_string(), out.history.track_csv()),
        ("entropy.csv".to_string(), entropy_csv(&out.history)),
        ("pgm1_diagnostics.csv".to_string(), pgm1_csv(&out.history.pgm1_diagnostics)),
        ("pgm2_diagnostics.csv".to_string(), pgm2_csv(&out.history.pgm2_diagnostics)),
        ("summary.json".to_string(), out.summary.to_json()),
    ];
    if let Some(last) = out.history.records.last() {
        files.push(("posterior_final.csv".to_string(), last.posterior.to_csv()));
    }
    if cfg.output.svg {
        files.push(("entropy.svg".to_string(), entropy_svg(&out.history)));
    }
    files
}

/// Writes every artifact plus `timing.json` into `dir`.
pub fn write_artifacts(cfg: &RunConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in artifact_files(cfg, out) {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let timing = serde_json::json!({ "elapsed_s": out.elapsed_s, "threads": cfg.threads });
    let path = dir.join("timing.json");
    std::fs::write(&path, format!("{timing:#}\n")).map_err(|e| Error::io(&path, e))
}

/// Entropy against step as a standalone SVG line chart.
pub fn entropy_svg(h: &RunHistory) -> String {
    let (w, ht, pad) = (640.0, 400.0, 50.0);
    let pts: Vec<(f64, f64)> = h.records.iter().map(|r| (r.step as f64, r.entropy)).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{ht}\" viewBox=\"0 0 {w} {ht}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (x0, x1) = (1.0, pts.len().max(2) as f64);
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| ht - pad - (y - lo) / (hi - lo) * (ht - 2.0 * pad);
    svg.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"14\">step</text>\n\
         <text x=\"15\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 15 {cy})\">entropy (nats)</text>\n\
         <text x=\"{lx}\" y=\"{yhi}\" text-anchor=\"end\" font-size=\"11\">{hi:.1}</text>\n\
         <text x=\"{lx}\" y=\"{ylo}\" text-anchor=\"end\" font-size=\"11\">{lo:.1}</text>\n",
        b = ht - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = ht - 12.0,
        cy = ht / 2.0,
        lx = pad - 4.0,
        yhi = sy(hi) + 4.0,
        ylo = sy(lo) + 4.0,
    ));
    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
        path.join(" ")
    ));
    for &(x, y) in &pts {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>\n",
            sx(x),
            sy(y)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Side-by-side comparison of two runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    /// Per step: entropy of `a` minus entropy of `b`.
    pub entropy_delta: Vec<f64>,
    /// Per component in [`COMPONENT_LABELS`] order: initial over final
    /// standard deviation for `a` and for `b`.
    pub shrink_a: [f64; 6],
    pub shrink_b: [f64; 6],
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub component: String,
    pub a_start: f64,
    pub a_end: f64,
    pub b_start: f64,
    pub b_end: f64,
}

/// Compares two summaries. Unequal step counts are an error unless
/// `truncate` is set, in which case the common prefix is compared.
pub fn compare(a: &RunSummary, b: &RunSummary, truncate: bool) -> Result<Comparison> {
    let (na, nb) = (a.entropy_nats.len(), b.entropy_nats.len());
    if na != nb && !truncate {
        return Err(Error::LengthMismatch { left: na, right: nb });
    }
    let n = na.min(nb);
    let entropy_delta = (0..n).map(|i| a.entropy_nats[i] - b.entropy_nats[i]).collect();
    let end = |s: &RunSummary| s.final_std.unwrap_or([f64::NAN; 6]);
    let (ea, eb) = (end(a), end(b));
    let shrink = |s: &RunSummary, e: &[f64; 6]| std::array::from_fn(|i| s.initial_std[i] / e[i]);
    let rows = COMPONENT_LABELS
        .iter()
        .enumerate()
        .map(|(i, label)| ComparisonRow {
            component: label.to_string(),
            a_start: a.initial_std[i],
            a_end: ea[i],
            b_start: b.initial_std[i],
            b_end: eb[i],
        })
        .collect();
    Ok(Comparison {
        entropy_delta,
        shrink_a: shrink(a, &ea),
        shrink_b: shrink(b, &eb),
        rows,
    })
}

impl Comparison {
    /// Fixed-width text table of standard deviations and per-step entropy
    /// deltas.
    pub fn to_table(&self, label_a: &str, label_b: &str) -> String {
        let mut out = format!(
            "{:<10} {:>14} {:>14} {:>14} {:>14}\n",
            "component",
            format!("{label_a} start"),
            format!("{label_a} end"),
            format!("{label_b} start"),
            format!("{label_b} end")
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}\n",
                r.component, r.a_start, r.a_end, r.b_start, r.b_end
            ));
        }
        out.push_str("\nstep  entropy delta (nats)\n");
        for (i, d) in self.entropy_delta.iter().enumerate() {
            out.push_str(&format!("{:>4}  {:+.6}\n", i + 1, d));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,a_start,a_end,b_start,b_end\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.component, csv::row([r.a_start, r.a_end, r.b_start, r.b_end])));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_config(seed: u64, mode: Mode) -> RunConfig {
        let mut cfg = RunConfig {
            seed,
            mode,
            ..RunConfig::default()
        };
        cfg.scenario.max_steps = 3;
        cfg.filter.n_particles = 1500;
        cfg.filter.pgm1_clusters = 6;
        cfg.mcmc.n_chains = 6;
        cfg.mcmc.chain_length = 3000;
        cfg.mcmc.burn_in = 1000;
        cfg.mcmc.thin = 100;
        cfg.mcmc.pilot_draws = 32;
        cfg
    }

    fn summary(entropy: Vec<f64>, end: [f64; 6]) -> RunSummary {
        RunSummary {
            mode: Mode::Hybrid,
            seed: 1,
            config_hash: String::new(),
            pass_length: entropy.len(),
            steps_processed: entropy.len(),
            initial_std: [100.0, 200.0, 300.0, 1.0, 2.0, 3.0],
            final_std: Some(end),
            consistent: vec![true; entropy.len()],
            entropy_nats: entropy,
            first_inconsistent_step: None,
            divergence: None,
            custody_held: true,
        }
    }

    #[test]
    fn compare_with_self_has_zero_deltas() {
        let s = summary(vec![3.0, 1.0, -2.0], [1.0, 2.0, 3.0, 0.1, 0.2, 0.3]);
        let c = compare(&s, &s, false).unwrap();
        assert!(c.entropy_delta.iter().all(|d| *d == 0.0));
        assert_eq!(c.shrink_a, c.shrink_b);
        assert_eq!(c.shrink_a, [100.0, 100.0, 100.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn compare_rows_follow_component_order() {
        let s = summary(vec![0.0], [1.0; 6]);
        let c = compare(&s, &s, false).unwrap();
        let names: Vec<&str> = c.rows.iter().map(|r| r.component.as_str()).collect();
        assert_eq!(names, COMPONENT_LABELS);
        let csv = c.to_csv();
        let first: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(first, COMPONENT_LABELS);
    }

    #[test]
    fn compare_length_mismatch_needs_truncation() {
        let a = summary(vec![1.0, 2.0, 3.0], [1.0; 6]);
        let b = summary(vec![1.0, 5.0], [1.0; 6]);
        assert!(matches!(compare(&a, &b, false), Err(Error::LengthMismatch { left: 3, right: 2 })));
        let c = compare(&a, &b, true).unwrap();
        assert_eq!(c.entropy_delta, vec![0.0, -3.0]);
    }

    #[test]
    fn summary_json_round_trips() {
        let s = summary(vec![1.5, -0.25], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(RunSummary::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn identical_runs_produce_identical_files() {
        let cfg = fast_config(4, Mode::Hybrid);
        let a = artifact_files(&cfg, &execute(&cfg).unwrap());
        let b = artifact_files(&cfg, &execute(&cfg).unwrap());
        assert_eq!(a, b);
        let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
        for expected in ["truth.csv", "measurements.csv", "track.csv", "entropy.csv", "summary.json"] {
            assert!(names.contains(&expected), "missing {expected}");
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut one = fast_config(6, Mode::Hybrid);
        one.threads = 1;
        let mut many = one.clone();
        many.threads = 4;
        let a = execute(&one).unwrap();
        let b = execute(&many).unwrap();
        assert_eq!(a.history.track_csv(), b.history.track_csv());
    }

    #[test]
    fn summary_series_match_pass_length() {
        let cfg = fast_config(2, Mode::Pgm1Only);
        let out = execute(&cfg).unwrap();
        let s = &out.summary;
        assert_eq!(s.pass_length, 3);
        if s.divergence.is_none() {
            assert_eq!(s.entropy_nats.len(), s.pass_length);
            assert_eq!(s.consistent.len(), s.pass_length);
        }
        assert!(s.initial_std.iter().all(|v| *v > 0.0));
        assert!(s.final_std.unwrap().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn svg_has_one_marker_per_step() {
        let cfg = fast_config(3, Mode::Hybrid);
        let out = execute(&cfg).unwrap();
        let svg = entropy_svg(&out.history);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), out.history.records.len());
    }

    #[test]
    fn artifacts_are_written_to_disk() {
        let mut cfg = fast_config(5, Mode::Hybrid);
        cfg.output.svg = true;
        let out = execute(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_artifacts(&cfg, &out, dir.path()).unwrap();
        for name in ["track.csv", "summary.json", "timing.json", "entropy.svg", "config.toml"] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        let back = RunSummary::load(&dir.path().join("summary.json")).unwrap();
        assert_eq!(back, out.summary);
        let cfg_back = RunConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(cfg_back, cfg);
    }
}
