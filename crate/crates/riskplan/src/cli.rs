//! Command-line front end: scenario loading, planning, tracking, Monte-Carlo
//! campaigns, and static SVG plot emission.
//!
//! Exit codes: 0 success, 2 invalid input, 3 missing/mismatched artifacts,
//! 4 no plan found.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::planner::{plan, TreeDump};
use crate::risk::RiskMode;
use crate::scenario::{load_scenario, Scenario};
use crate::simulation::{monte_carlo, track, McSummary, Reference};
use crate::Result;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_ARTIFACT: i32 = 3;
pub const EXIT_NO_PLAN: i32 = 4;

#[derive(Parser)]
#[command(name = "riskplan", about = "Risk-bounded motion planning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dr,
    Gaussian,
}

impl From<ModeArg> for RiskMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dr => RiskMode::Dr,
            ModeArg::Gaussian => RiskMode::Gaussian,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Grow a planning tree and emit a reference trajectory.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        iters: usize,
        #[arg(long)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        /// Override both noise covariances with scale·I.
        #[arg(long)]
        noise_scale: Option<f64>,
        /// Stop once this many goal-region nodes exist (0 = use every iteration).
        #[arg(long, default_value_t = 1)]
        goal_nodes: usize,
    },
    /// Run a single closed-loop tracking trial of a planned reference.
    Track {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise_scale: Option<f64>,
    },
    /// Monte-Carlo tracking campaign.
    Mc {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise_scale: Option<f64>,
    },
    /// Aggregate campaign summaries below a directory into one table.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    command: String,
    scenario: String,
    seed: u64,
    mode: String,
    iters: Option<usize>,
    trials: Option<usize>,
    noise_scale: Option<f64>,
    status: String,
    artifacts: BTreeMap<String, String>,
}

impl Manifest {
    fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(dir.join("manifest.json"), text)
    }

    fn finalize(&mut self, dir: &Path, files: &[&str]) -> std::io::Result<()> {
        for f in files {
            let bytes = std::fs::read(dir.join(f))?;
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            self.artifacts
                .insert((*f).to_string(), format!("{:x}", hasher.finalize()));
        }
        self.status = "complete".into();
        self.write(dir)
    }
}

/// One row per step: t, robot state, applied input (last row zero-padded).
pub fn write_reference_csv(path: &Path, reference: &Reference) -> std::io::Result<()> {
    let n = reference.states.first().map_or(0, |s| s.len());
    let m = reference.inputs.first().map_or(2, |u| u.len());
    let mut out = String::from("t");
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    for i in 0..m {
        out.push_str(&format!(",u{i}"));
    }
    out.push('\n');
    for (t, state) in reference.states.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in state.iter() {
            out.push_str(&format!(",{v}"));
        }
        let zero = DVector::zeros(m);
        let u = reference.inputs.get(t).unwrap_or(&zero);
        for v in u.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn read_reference_csv(path: &Path, state_dim: usize) -> Result<Reference> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| crate::Error::invalid("empty reference file"))?;
    let cols = header.split(',').count();
    if cols <= state_dim + 1 {
        return Err(crate::Error::invalid(format!(
            "reference has {cols} columns but the scenario robot needs {state_dim} states"
        )));
    }
    let m = cols - state_dim - 1;
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| crate::Error::invalid(format!("reference row {i}: {e}")))?;
        if vals.len() != state_dim + m {
            return Err(crate::Error::invalid(format!(
                "reference row {i} has {} values, expected {}",
                vals.len(),
                state_dim + m
            )));
        }
        states.push(DVector::from_row_slice(&vals[..state_dim]));
        inputs.push(DVector::from_row_slice(&vals[state_dim..]));
    }
    if states.is_empty() {
        return Err(crate::Error::invalid("reference file has no rows"));
    }
    Ok(Reference { states, inputs })
}

// ---------------------------------------------------------------------------
// SVG plotting (overhead view)

struct Canvas {
    svg: String,
    scale: f64,
    xmin: f64,
    ymax: f64,
}

impl Canvas {
    fn new(bounds: (f64, f64, f64, f64)) -> Self {
        let (xmin, xmax, ymin, ymax) = bounds;
        let scale = 640.0 / (xmax - xmin).max(ymax - ymin);
        let w = (xmax - xmin) * scale;
        let h = (ymax - ymin) * scale;
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" \
             viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\" \
             stroke=\"black\"/>\n",
            w + 20.0,
            h + 20.0,
            w + 20.0,
            h + 20.0
        ));
        Self {
            svg,
            scale,
            xmin,
            ymax,
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            10.0 + (x - self.xmin) * self.scale,
            10.0 + (self.ymax - y) * self.scale,
        )
    }

    fn rect(&mut self, cx: f64, cy: f64, hw: f64, hh: f64, fill: &str) {
        let (px, py) = self.map(cx - hw, cy + hh);
        self.svg.push_str(&format!(
            "<rect x=\"{px:.2}\" y=\"{py:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\" \
             stroke=\"black\" stroke-width=\"0.5\"/>\n",
            2.0 * hw * self.scale,
            2.0 * hh * self.scale
        ));
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = self.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        self.svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>\n",
            coords.join(" ")
        ));
    }

    fn ellipse(&mut self, cx: f64, cy: f64, cov: &DMatrix<f64>, stroke: &str) {
        let sym = nalgebra::SymmetricEigen::new(cov.clone());
        let (l0, l1) = (sym.eigenvalues[0].max(0.0), sym.eigenvalues[1].max(0.0));
        let angle = sym.eigenvectors[(1, 0)].atan2(sym.eigenvectors[(0, 0)]);
        let (px, py) = self.map(cx, cy);
        self.svg.push_str(&format!(
            "<ellipse cx=\"{px:.2}\" cy=\"{py:.2}\" rx=\"{:.3}\" ry=\"{:.3}\" \
             transform=\"rotate({:.2} {px:.2} {py:.2})\" fill=\"none\" stroke=\"{stroke}\" \
             stroke-width=\"0.6\"/>\n",
            2.0 * l0.sqrt() * self.scale,
            2.0 * l1.sqrt() * self.scale,
            -angle.to_degrees()
        ));
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn scenario_backdrop(scenario: &Scenario) -> Canvas {
    let mut canvas = Canvas::new(scenario.sample_bounds);
    for obstacle in &scenario.env.obstacles {
        // Axis-aligned rectangles: recover extents from the facet offsets.
        // centered rect rows are [x, -x, y, -y], so b = [hw, hw, hh, hh]
        let b = &obstacle.shape.b;
        let (cx, cy) = (obstacle.centroid_state[0], obstacle.centroid_state[1]);
        canvas.rect(cx, cy, b[0], b[2], "#b0b0b0");
    }
    let g = &scenario.goal.b;
    // goal rows: x ≤ b0, −x ≤ b1, y ≤ b2, −y ≤ b3
    canvas.rect(
        (g[0] - g[1]) / 2.0,
        (g[2] - g[3]) / 2.0,
        (g[0] + g[1]) / 2.0,
        (g[2] + g[3]) / 2.0,
        "#c8e6c9",
    );
    canvas
}

pub fn plot_plan(
    scenario: &Scenario,
    tree: &TreeDump,
    reference_means: &[DVector<f64>],
    reference_covs: &[DMatrix<f64>],
) -> String {
    let mut canvas = scenario_backdrop(scenario);
    for node in &tree.nodes {
        let pts: Vec<(f64, f64)> = node.segment_means.iter().map(|s| (s[0], s[1])).collect();
        canvas.polyline(&pts, "#90caf9", 0.6);
    }
    let refline: Vec<(f64, f64)> = reference_means.iter().map(|s| (s[0], s[1])).collect();
    canvas.polyline(&refline, "#d32f2f", 1.6);
    for (mean, cov) in reference_means.iter().zip(reference_covs.iter()).step_by(3) {
        let pos_cov = cov.view((0, 0), (2, 2)).into_owned();
        canvas.ellipse(mean[0], mean[1], &pos_cov, "#7b1fa2");
    }
    canvas.finish()
}

pub fn plot_paths(scenario: &Scenario, summary: &McSummary, reference: &Reference) -> String {
    let mut canvas = scenario_backdrop(scenario);
    for trial in &summary.trials {
        let pts: Vec<(f64, f64)> = trial.path.iter().map(|s| (s[0], s[1])).collect();
        let color = if trial.collided { "#ef9a9a" } else { "#a5d6a7" };
        canvas.polyline(&pts, color, 0.5);
    }
    let refline: Vec<(f64, f64)> = reference.states.iter().map(|s| (s[0], s[1])).collect();
    canvas.polyline(&refline, "#1565c0", 1.4);
    canvas.finish()
}

// ---------------------------------------------------------------------------
// Commands

fn load(
    path: &Path,
    mode: Option<ModeArg>,
    noise_scale: Option<f64>,
) -> std::result::Result<Scenario, String> {
    let (_, mut scenario) =
        load_scenario(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(m) = mode {
        scenario = scenario.with_mode(m.into());
    }
    if let Some(s) = noise_scale {
        if s <= 0.0 {
            return Err("--noise-scale must be positive".into());
        }
        scenario = scenario
            .with_noise_scale(s)
            .map_err(|e| format!("noise scale: {e}"))?;
    }
    Ok(scenario)
}

fn mode_name(scenario: &Scenario) -> String {
    match scenario.mode {
        RiskMode::Dr => "dr".into(),
        RiskMode::Gaussian => "gaussian".into(),
    }
}

fn reference_from_plan(
    scenario: &Scenario,
    means: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Reference {
    let n = scenario.env.robot.state_dim();
    let states = means.iter().map(|z| z.rows(0, n).into_owned()).collect();
    let mut inputs: Vec<DVector<f64>> = inputs.to_vec();
    inputs.push(DVector::zeros(2));
    Reference { states, inputs }
}

fn cmd_plan(
    scenario_path: &Path,
    seed: u64,
    iters: usize,
    mode: Option<ModeArg>,
    out: &Path,
    noise_scale: Option<f64>,
    goal_nodes: usize,
) -> i32 {
    let scenario = match load(scenario_path, mode, noise_scale) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return EXIT_ARTIFACT;
    }
    let mut manifest = Manifest {
        command: "plan".into(),
        scenario: scenario_path.display().to_string(),
        seed,
        mode: mode_name(&scenario),
        iters: Some(iters),
        trials: None,
        noise_scale,
        status: "in-progress".into(),
        artifacts: BTreeMap::new(),
    };
    if manifest.write(out).is_err() {
        return EXIT_ARTIFACT;
    }

    let result = (|| -> Result<_> {
        let allocation = scenario.allocation()?;
        let ctx = scenario.planner_context(&allocation);
        plan(&ctx, scenario.root_belief(), seed, iters, goal_nodes)
    })();
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: planning failed: {e}");
            return EXIT_INVALID;
        }
    };
    if !result.found() {
        manifest.status = "no-plan".into();
        let _ = manifest.write(out);
        eprintln!(
            "no plan found after {} iterations ({} tree nodes)",
            result.iterations_used,
            result.tree.nodes.len()
        );
        return EXIT_NO_PLAN;
    }

    let reference = reference_from_plan(&scenario, &result.reference_means, &result.reference_inputs);
    let dump = result.tree.dump();
    let write = (|| -> std::io::Result<()> {
        write_reference_csv(&out.join("reference.csv"), &reference)?;
        std::fs::write(
            out.join("tree.json"),
            serde_json::to_string_pretty(&dump).expect("tree serialization"),
        )?;
        std::fs::write(
            out.join("plan.svg"),
            plot_plan(
                &scenario,
                &dump,
                &result.reference_means,
                &result.reference_covs,
            ),
        )?;
        Ok(())
    })();
    if let Err(e) = write {
        eprintln!("error: writing artifacts: {e}");
        return EXIT_ARTIFACT;
    }
    if manifest
        .finalize(out, &["reference.csv", "tree.json", "plan.svg"])
        .is_err()
    {
        return EXIT_ARTIFACT;
    }
    println!(
        "plan: {} states, cost {:.3}, {} tree nodes, {} iterations",
        reference.len(),
        result.tree.nodes[result.goal_node.unwrap()].cost,
        result.tree.nodes.len(),
        result.iterations_used
    );
    EXIT_OK
}

fn load_reference(path: &Path, scenario: &Scenario) -> std::result::Result<Reference, i32> {
    if !path.exists() {
        eprintln!("error: reference file {} not found", path.display());
        return Err(EXIT_ARTIFACT);
    }
    read_reference_csv(path, scenario.env.robot.state_dim()).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_ARTIFACT
    })
}

fn cmd_track(
    scenario_path: &Path,
    reference_path: &Path,
    seed: u64,
    mode: Option<ModeArg>,
    out: &Path,
    noise_scale: Option<f64>,
) -> i32 {
    let scenario = match load(scenario_path, mode, noise_scale) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let reference = match load_reference(reference_path, &scenario) {
        Ok(r) => r,
        Err(code) => return code,
    };
    if std::fs::create_dir_all(out).is_err() {
        return EXIT_ARTIFACT;
    }
    let mut manifest = Manifest {
        command: "track".into(),
        scenario: scenario_path.display().to_string(),
        seed,
        mode: mode_name(&scenario),
        iters: None,
        trials: Some(1),
        noise_scale,
        status: "in-progress".into(),
        artifacts: BTreeMap::new(),
    };
    if manifest.write(out).is_err() {
        return EXIT_ARTIFACT;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trial = track(&reference, &scenario, &mut rng);
    let ok = std::fs::write(
        out.join("trial.json"),
        serde_json::to_string_pretty(&trial).expect("trial serialization"),
    )
    .is_ok();
    if !ok || manifest.finalize(out, &["trial.json"]).is_err() {
        return EXIT_ARTIFACT;
    }
    println!(
        "track: collided={} reached_goal={} steps={}",
        trial.collided, trial.reached_goal, trial.steps
    );
    EXIT_OK
}

#[derive(Serialize, Deserialize)]
struct CampaignSummary {
    scenario: String,
    mode: String,
    noise_level: f64,
    n_trials: usize,
    base_seed: u64,
    collisions: usize,
    goal_reached: usize,
    environment_violations: usize,
}

fn cmd_mc(
    scenario_path: &Path,
    reference_path: &Path,
    trials: usize,
    seed: u64,
    mode: Option<ModeArg>,
    out: &Path,
    noise_scale: Option<f64>,
) -> i32 {
    if trials == 0 {
        eprintln!("error: --trials must be >= 1");
        return EXIT_INVALID;
    }
    let scenario = match load(scenario_path, mode, noise_scale) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let reference = match load_reference(reference_path, &scenario) {
        Ok(r) => r,
        Err(code) => return code,
    };
    if std::fs::create_dir_all(out).is_err() {
        return EXIT_ARTIFACT;
    }
    let mut manifest = Manifest {
        command: "mc".into(),
        scenario: scenario_path.display().to_string(),
        seed,
        mode: mode_name(&scenario),
        iters: None,
        trials: Some(trials),
        noise_scale,
        status: "in-progress".into(),
        artifacts: BTreeMap::new(),
    };
    if manifest.write(out).is_err() {
        return EXIT_ARTIFACT;
    }
    let summary = match monte_carlo(&scenario, &reference, trials, seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let noise_level = noise_scale.unwrap_or_else(|| {
        scenario
            .noise
            .process_cov
            .diagonal()
            .iter()
            .fold(0.0f64, |a, &b| a.max(b))
    });
    let campaign = CampaignSummary {
        scenario: scenario_path.display().to_string(),
        mode: mode_name(&scenario),
        noise_level,
        n_trials: summary.n_trials,
        base_seed: summary.base_seed,
        collisions: summary.collisions,
        goal_reached: summary.goal_reached,
        environment_violations: summary.environment_violations,
    };
    let mut rows = String::from("trial,collided,reached_goal,left_environment,steps\n");
    for (i, t) in summary.trials.iter().enumerate() {
        rows.push_str(&format!(
            "{i},{},{},{},{}\n",
            t.collided, t.reached_goal, t.left_environment, t.steps
        ));
    }
    let write = (|| -> std::io::Result<()> {
        std::fs::write(
            out.join("summary.json"),
            serde_json::to_string_pretty(&campaign).expect("summary serialization"),
        )?;
        std::fs::write(out.join("trials.csv"), rows)?;
        std::fs::write(out.join("paths.svg"), plot_paths(&scenario, &summary, &reference))?;
        Ok(())
    })();
    if write.is_err()
        || manifest
            .finalize(out, &["summary.json", "trials.csv", "paths.svg"])
            .is_err()
    {
        return EXIT_ARTIFACT;
    }
    println!(
        "mc: {}/{} collisions, {}/{} reached goal, mean runtime {:.3}s",
        summary.collisions, trials, summary.goal_reached, trials, summary.mean_runtime_seconds
    );
    EXIT_OK
}

fn cmd_report(out: &Path) -> i32 {
    let mut campaigns: Vec<CampaignSummary> = Vec::new();
    let entries = match std::fs::read_dir(out) {
        Ok(e) => e,
        Err(_) => {
            eprintln!("error: {} is not a readable directory", out.display());
            return EXIT_ARTIFACT;
        }
    };
    for entry in entries.flatten() {
        let summary_path = entry.path().join("summary.json");
        if summary_path.exists() {
            match std::fs::read_to_string(&summary_path)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
            {
                Ok(c) => campaigns.push(c),
                Err(e) => {
                    eprintln!("error: {}: {e}", summary_path.display());
                    return EXIT_ARTIFACT;
                }
            }
        }
    }
    if campaigns.is_empty() {
        eprintln!("error: no completed campaigns below {}", out.display());
        return EXIT_ARTIFACT;
    }
    campaigns.sort_by(|a, b| a.noise_level.total_cmp(&b.noise_level));
    let mut table = String::from("noise_level | trials | collisions | reached_goal\n");
    for c in &campaigns {
        table.push_str(&format!(
            "{:11.1e} | {:6} | {:10} | {:12}\n",
            c.noise_level, c.n_trials, c.collisions, c.goal_reached
        ));
    }
    print!("{table}");
    if std::fs::write(out.join("report.txt"), table).is_err() {
        return EXIT_ARTIFACT;
    }
    EXIT_OK
}

/// Parse the process arguments and run; returns the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Plan {
            scenario,
            seed,
            iters,
            mode,
            out,
            noise_scale,
            goal_nodes,
        } => cmd_plan(&scenario, seed, iters, mode, &out, noise_scale, goal_nodes),
        Cmd::Track {
            scenario,
            reference,
            seed,
            mode,
            out,
            noise_scale,
        } => cmd_track(&scenario, &reference, seed, mode, &out, noise_scale),
        Cmd::Mc {
            scenario,
            reference,
            trials,
            seed,
            mode,
            out,
            noise_scale,
        } => cmd_mc(&scenario, &reference, trials, seed, mode, &out, noise_scale),
        Cmd::Report { out } => cmd_report(&out),
    }
}
