use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use fdmn::io::{self, Checkpoint, Stamp};
use fdmn::layered::{clm_effective_singular_core, ClmSpec, Strictness};
use fdmn::mandel::{subspace_pinv, DevTensor, KinematicClass, MaterialTensor, Vec5};
use fdmn::materials::{load_battery, sobol_specs, CrossFluid, LoadCase, OrientationState};
use fdmn::network::{build_normals, clm_certificates, weights_to_clm_coefficients, Topology};
use fdmn::online::{assemble_operator, online_error, solve_battery, ErrorRow, ErrorTable, SolverOptions};
use fdmn::oracle::{nonlinear_teacher_stress, TeacherSpec};
use fdmn::training::{lr_sweep, train, TrainConfig};
use fdmn::FdmnError;

#[derive(Parser)]
#[command(name = "fdmn", version, about = "Flexible deep material networks for fiber suspensions")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Global {
    /// TOML file with defaults for any option below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Treat numerically singular blocks as errors.
    #[arg(long, global = true)]
    strict: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    teacher_depth: Option<usize>,
    #[arg(long, global = true)]
    teacher_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a teacher dataset, or validate and re-emit an external one.
    Sample {
        #[arg(long)]
        out: PathBuf,
        /// External dataset to validate instead of generating teacher samples.
        #[arg(long)]
        import: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train networks on a dataset and keep the best one.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Evaluate a checkpoint on the load battery.
    Eval {
        /// Reference stresses (load,rate,s1..s5); the teacher is used when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Prefix for the error table and summary CSV files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Certificate report for every CLM of a checkpoint.
    Check,
    /// Learning-rate range test.
    Sweep {
        #[arg(long, default_value_t = 1e-4)]
        lo: f64,
        #[arg(long, default_value_t = 1.0)]
        hi: f64,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the Newton solver with the fixed-point oracle on the teacher.
    OracleCompare {
        /// Write the teacher reference stresses here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    depth: usize,
    rank: usize,
    strict: bool,
    threads: Option<usize>,
    teacher_depth: usize,
    teacher_seed: u64,
    samples: usize,
    orientation: [f64; 2],
    epochs: usize,
    restarts: usize,
    batch_size: usize,
    lr_angles: f64,
    lr_weights: f64,
    penalty: f64,
    decay_factor: f64,
    decay_every: usize,
    train_fraction: f64,
    warm_start: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            depth: 5,
            rank: 3,
            strict: false,
            threads: None,
            teacher_depth: 5,
            teacher_seed: 42,
            samples: 32,
            orientation: [1.0 / 3.0, 1.0 / 3.0],
            epochs: t.epochs,
            restarts: t.restarts,
            batch_size: t.batch_size,
            lr_angles: t.lr_angles,
            lr_weights: t.lr_weights,
            penalty: t.penalty,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            train_fraction: t.train_fraction,
            warm_start: false,
        }
    }
}

impl RunConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_angles: self.lr_angles,
            lr_weights: self.lr_weights,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
            penalty: self.penalty,
            train_fraction: self.train_fraction,
            restarts: self.restarts,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    fn stamp(&self, command: &str) -> Stamp {
        Stamp::new(self.seed, &format!("{command} {self:?}"))
    }

    fn orientation(&self) -> Result<OrientationState, Failure> {
        OrientationState::new(self.orientation[0], self.orientation[1]).map_err(Failure::validation)
    }
}

/// Error with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
    fn validation(e: impl std::fmt::Display) -> Self {
        Failure::new(2, e.to_string())
    }
}

impl From<FdmnError> for Failure {
    fn from(e: FdmnError) -> Self {
        let code = match e {
            FdmnError::Parse { .. } | FdmnError::InvalidTensor(_) | FdmnError::SingularOnSubspace { .. } => 2,
            FdmnError::NoConvergence { .. } | FdmnError::LineSearchFailed { .. } | FdmnError::SingularSystem { .. } => 4,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::new(1, format!("--{flag} is required")))
}

fn merge(g: &Global) -> Result<RunConfig, Failure> {
    let mut c = match &g.config {
        Some(p) => toml::from_str(&read(p)?).map_err(|e| Failure::new(1, format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(v) = g.seed {
        c.seed = v;
    }
    if let Some(v) = g.depth {
        c.depth = v;
    }
    if let Some(v) = g.rank {
        c.rank = v;
    }
    if let Some(v) = g.threads {
        c.threads = Some(v);
    }
    if let Some(v) = g.teacher_depth {
        c.teacher_depth = v;
    }
    if let Some(v) = g.teacher_seed {
        c.teacher_seed = v;
    }
    c.strict |= g.strict;
    Ok(c)
}

fn teacher(c: &RunConfig) -> Result<TeacherSpec, Failure> {
    Ok(TeacherSpec::new(c.teacher_seed, c.teacher_depth)?)
}

fn cmd_sample(c: &RunConfig, out: &Path, import: Option<&Path>) -> Outcome {
    let stamp = c.stamp("sample");
    let records = match import {
        Some(p) => {
            let (_, r) = io::read_dataset(&read(p)?).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?;
            r
        }
        None => teacher(c)?.dataset(&sobol_specs(c.samples, c.seed)?, c.orientation()?)?,
    };
    for (i, r) in records.iter().enumerate() {
        let ev = r.effective.subspace_eigenvalues();
        log::info!("record {i}: effective eigenvalues {:.4e}..{:.4e}", ev[0], ev[4]);
    }
    write(out, &io::write_dataset(&records, &stamp))?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn load_dataset(g: &Global) -> Result<Vec<fdmn::materials::SampleRecord>, Failure> {
    let p = required(&g.dataset, "dataset")?;
    let (_, r) = io::read_dataset(&read(p)?).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?;
    Ok(r)
}

fn cmd_train(c: &RunConfig, g: &Global, out: &Path) -> Outcome {
    let data = load_dataset(g)?;
    let topo = Topology::new(c.depth, c.rank)?;
    let cfg = c.train_config();
    let stamp = c.stamp("train");
    let report = match train(&topo, &data, &cfg) {
        Ok(r) => r,
        Err(e @ FdmnError::SingularEffective { .. }) => return Err(Failure::new(3, e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let ckpt = Checkpoint::from_report(topo, &report, stamp.clone())?;
    write(out, &ckpt.to_text())?;
    write(&with_suffix(out, ".log.csv"), &io::training_log_csv(&report, &stamp))?;
    write(&with_suffix(out, ".restarts.csv"), &io::restart_log_csv(&report.restarts, &stamp))?;
    let (t, v) = report.best().final_errors().unwrap_or((f64::NAN, f64::NAN));
    println!(
        "best restart {} of {} ({} aborted): train {:.4}% validation {:.4}%",
        report.best_restart,
        report.restarts.len(),
        report.aborted(),
        100.0 * t,
        100.0 * v
    );
    Ok(())
}

fn load_checkpoint(g: &Global) -> Result<Checkpoint, Failure> {
    let p = required(&g.checkpoint, "checkpoint")?;
    Checkpoint::parse(&read(p)?).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))
}

/// Reference stresses as `load,rate,s1,..,s5` lines.
fn read_reference(text: &str) -> Result<Vec<(LoadCase, DevTensor)>, Failure> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("load") {
            continue;
        }
        let bad = |m: &str| Failure::validation(format!("reference line {}: {m}", i + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(bad("expected 7 columns"));
        }
        let load: usize = f[0].parse().map_err(|_| bad("bad load index"))?;
        let nums: Vec<f64> = f[1..].iter().map(|x| x.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad("bad number"))?;
        let dirs = fdmn::materials::load_directions();
        let direction = *dirs.get(load).ok_or_else(|| bad("load index out of range"))?;
        let stress = DevTensor::from_coords(&Vec5::from_column_slice(&nums[1..]));
        out.push((LoadCase { load, direction, rate: nums[0] }, stress));
    }
    Ok(out)
}

fn reference_csv(reference: &[(LoadCase, DevTensor)], stamp: &Stamp) -> String {
    let mut s = format!("# tool {} seed {} digest {}\nload,rate,s1,s2,s3,s4,s5\n", stamp.tool, stamp.seed, stamp.digest);
    for (c, t) in reference {
        let x = t.coords();
        s.push_str(&format!("{},{:e},{:e},{:e},{:e},{:e},{:e}\n", c.load, c.rate, x[0], x[1], x[2], x[3], x[4]));
    }
    s
}

fn teacher_reference(c: &RunConfig, cases: &[LoadCase]) -> Result<Vec<(LoadCase, DevTensor)>, Failure> {
    let t = teacher(c)?;
    Ok(fdmn::oracle::teacher_reference(&t, &CrossFluid::polyamide6(), cases)?)
}

fn cmd_eval(c: &RunConfig, g: &Global, reference: Option<&Path>, out: &Path) -> Outcome {
    let ckpt = load_checkpoint(g)?;
    let cases = load_battery();
    let reference = match reference {
        Some(p) => read_reference(&read(p)?)?,
        None => teacher_reference(c, &cases)?,
    };
    let op = assemble_operator(&ckpt.topology, &ckpt.params)?;
    let opts = SolverOptions { warm_start: c.warm_start, ..SolverOptions::default() };
    let fluid = CrossFluid::polyamide6();
    let t0 = std::time::Instant::now();
    let sols = solve_battery(&op, &fluid, &cases, &opts);
    let seconds = t0.elapsed().as_secs_f64();
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (case, s) in cases.iter().zip(sols) {
        match s {
            Ok(s) => {
                let r = reference
                    .iter()
                    .find(|(rc, _)| rc.load == case.load && (rc.rate - case.rate).abs() <= 1e-12 * case.rate)
                    .map(|(_, t)| *t)
                    .ok_or(FdmnError::ReferenceMismatch { load: case.load, rate: case.rate })?;
                rows.push(ErrorRow {
                    load: case.load,
                    rate: case.rate,
                    error: online_error(&s.stress, &r),
                    stress: s.stress,
                    reference: r,
                    iterations: s.state.iterations,
                });
            }
            Err(e) => failed.push(format!("load {} rate {:e}: {e}", case.load, case.rate)),
        }
    }
    if !failed.is_empty() {
        return Err(Failure::new(4, format!("solver failed on {} cases:\n  {}", failed.len(), failed.join("\n  "))));
    }
    let max = rows.iter().map(|r| r.error).fold(0.0, f64::max);
    let mean = rows.iter().map(|r| r.error).sum::<f64>() / rows.len() as f64;
    let table = ErrorTable { rows, max, mean, seconds };
    let stamp = c.stamp("eval");
    let orient = c.orientation()?;
    write(&with_suffix(out, ".errors.csv"), &io::error_table_csv(&table, &orient, &stamp))?;
    write(&with_suffix(out, ".summary.csv"), &io::error_summary_csv(&table, &orient, &stamp))?;
    println!("e_on max {:.4}% mean {:.4}% battery {:.3} s", 100.0 * max, 100.0 * mean, seconds);
    Ok(())
}

fn cmd_check(c: &RunConfig, g: &Global) -> Outcome {
    let ckpt = load_checkpoint(g)?;
    let t = &ckpt.topology;
    let certs = clm_certificates(t, &ckpt.params)?;
    let normals = build_normals(t, &ckpt.params.angles)?;
    let w = ckpt.params.normalized_weights();
    let probe = subspace_pinv(&MaterialTensor::isotropic_viscosity(1.0))?;
    let mode = if c.strict { Strictness::Strict } else { Strictness::Permissive };
    println!("clm,certificate,min_relative_eigenvalue");
    let mut failures = 0;
    for (j, cert) in certs.iter().enumerate() {
        let block = &w[4 * j..4 * j + 4];
        let eig = match weights_to_clm_coefficients(block) {
            Ok(coef) if block[0] > 0.0 && coef.coating_fraction > 0.0 => {
                let spec = ClmSpec::new(
                    normals.clm[j].to_vec(),
                    coef.coefficients,
                    coef.coating_fraction,
                    MaterialTensor::rigid(KinematicClass::Incompressible),
                    probe.clone(),
                )?;
                format!("{:e}", clm_effective_singular_core(&spec, mode)?.relative_min_eigenvalue)
            }
            _ => "n/a".to_string(),
        };
        let status = match cert {
            fdmn::layered::Certificate::Pass => "pass".to_string(),
            fdmn::layered::Certificate::Fail(f) => {
                failures += 1;
                format!("fail ({f})")
            }
        };
        println!("{j},{status},{eig}");
    }
    log::info!("{failures} of {} blocks fail their certificate", certs.len());
    Ok(())
}

fn cmd_sweep(c: &RunConfig, g: &Global, lo: f64, hi: f64, steps: usize, out: Option<&Path>) -> Outcome {
    let data = load_dataset(g)?;
    let topo = Topology::new(c.depth, c.rank)?;
    let table = lr_sweep(&topo, &data, &c.train_config(), lo, hi, steps)?;
    let stamp = c.stamp("sweep");
    let mut s = format!("# tool {} seed {} digest {}\nlr,loss\n", stamp.tool, stamp.seed, stamp.digest);
    for (lr, loss) in table {
        s.push_str(&format!("{lr:e},{loss:e}\n"));
    }
    match out {
        Some(p) => write(p, &s),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}

fn cmd_oracle_compare(c: &RunConfig, out: Option<&Path>) -> Outcome {
    let t = teacher(c)?;
    let fluid = CrossFluid::polyamide6();
    let cases = load_battery();
    let op = assemble_operator(&t.topology, &t.params)?;
    let sols = solve_battery(&op, &fluid, &cases, &SolverOptions::default());
    let mut reference = Vec::new();
    let mut worst: f64 = 0.0;
    for (case, s) in cases.iter().zip(sols) {
        let newton = s?;
        let picard = nonlinear_teacher_stress(&t, &fluid, &case.strain_rate())?;
        worst = worst.max(online_error(&newton.stress, &picard.stress));
        reference.push((*case, picard.stress));
    }
    println!("teacher K={} seed {}: max relative Newton/fixed-point deviation {worst:e}", t.depth(), t.seed);
    if let Some(p) = out {
        write(p, &reference_csv(&reference, &c.stamp("oracle-compare")))?;
    }
    if worst > 1e-6 {
        return Err(Failure::new(4, format!("solvers disagree by {worst:e}")));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let c = merge(&cli.global)?;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(1, e.to_string()))?;
    }
    log::debug!("configuration {c:?}");
    let g = &cli.global;
    match &cli.command {
        Command::Sample { out, import, count } => {
            let mut c = c.clone();
            if let Some(n) = count {
                c.samples = *n;
            }
            cmd_sample(&c, out, import.as_deref())
        }
        Command::Train { out, epochs, restarts } => {
            let mut c = c.clone();
            if let Some(e) = epochs {
                c.epochs = *e;
            }
            if let Some(r) = restarts {
                c.restarts = *r;
            }
            cmd_train(&c, g, out)
        }
        Command::Eval { reference, out } => cmd_eval(&c, g, reference.as_deref(), out),
        Command::Check => cmd_check(&c, g),
        Command::Sweep { lo, hi, steps, out } => cmd_sweep(&c, g, *lo, *hi, *steps, out.as_deref()),
        Command::OracleCompare { out } => cmd_oracle_compare(&c, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FDMN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
