//! Command-line front end: clustering, allocators, simulation and the
//! figure-style sweep experiments, all driven by a TOML system
//! configuration with flag overrides.
//!
//! Output is delimiter-separated (tab) with a `#`-prefixed metadata header
//! so any plotting tool can consume it. Exit codes: 0 success, 2
//! configuration error, 3 numerical degeneracy, 4 infeasible system.
//! Thread count follows `RAYON_NUM_THREADS`.

use clap::{Args, Parser, Subcommand, ValueEnum};
use noma_lf::allocation::{
    bits_asymptotic, bits_equal, bits_optimize, bits_reference, joint_optimize, power_equal,
    power_fixed_point, AllocError, BitAllocation, PowerAllocation,
};
use noma_lf::analysis::{coeffs_for_user, rate_lb1, rate_loss_ub};
use noma_lf::channel::ChannelError;
use noma_lf::montecarlo::{clustering_experiment, simulate, simulate_oma, SimError, SimOptions, SimResult};
use noma_lf::system::{ClusteredScenario, ConfigError, QuantizationModel, SystemConfig};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "noma-lf", version, about = "Multi-antenna NOMA with limited feedback: allocators, bounds and simulation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// System configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override: total transmit power in dBm.
    #[arg(long, global = true)]
    power_dbm: Option<f64>,
    /// Override: total feedback budget in bits.
    #[arg(long, global = true)]
    feedback_bits: Option<f64>,
    /// Override: Monte Carlo trials.
    #[arg(long, global = true)]
    trials: Option<u64>,
    /// Override: RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override: quantization realization model.
    #[arg(long, global = true, value_enum)]
    quantization: Option<QuantArg>,
    /// Write output to a file instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantArg {
    ExactRvq,
    CellModel,
    Perfect,
}

impl From<QuantArg> for QuantizationModel {
    fn from(q: QuantArg) -> Self {
        match q {
            QuantArg::ExactRvq => QuantizationModel::ExactRvq,
            QuantArg::CellModel => QuantizationModel::CellModel,
            QuantArg::Perfect => QuantizationModel::Perfect,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Show the user clustering (CNR-ordered, column-major fill).
    Cluster,
    /// Feedback-bit allocation under the configured power split.
    AllocateBits {
        /// Use the power fixed point instead of equal cluster power.
        #[arg(long)]
        joint_power: bool,
        /// Also print the reference allocator and asymptotic forms.
        #[arg(long)]
        compare: bool,
    },
    /// Cluster power fractions from the scalar fixed point.
    AllocatePower,
    /// Joint power + bit optimization.
    Joint,
    /// Monte Carlo simulation of one scheme.
    Simulate {
        #[arg(long, value_enum, default_value_t = Scheme::Joint)]
        scheme: Scheme,
        /// Constant-sin²θ comparison CSI model.
        #[arg(long)]
        alt_csi: bool,
    },
    /// Parameter sweeps reproducing the paper-style figures.
    Experiment {
        /// Sweep specification `power:<from_dbm>:<to_dbm>:<step>` or
        /// `bits:<from>:<to>:<step>`.
        #[arg(long, default_value = "power:10:35:5")]
        sweep: String,
        /// Comma-separated schemes to run.
        #[arg(long, default_value = "joint,bits-equal-power,equal,reference,oma,alt-csi")]
        schemes: String,
        /// Run the clustering-permutation experiment instead of a sweep.
        #[arg(long)]
        clustering: bool,
    },
    /// Self-check the special-function layer on reference grids.
    ValidateSpecfun,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scheme {
    /// Joint power and bit optimization.
    Joint,
    /// Optimized bits, equal cluster power.
    BitsEqualPower,
    /// Equal bits and equal power.
    Equal,
    /// Reference bit allocator, equal power.
    Reference,
    /// OMA time sharing.
    Oma,
}

impl Scheme {
    fn parse_list(s: &str) -> Result<Vec<(Scheme, bool)>, String> {
        s.split(',')
            .map(|t| match t.trim() {
                "joint" => Ok((Scheme::Joint, false)),
                "bits-equal-power" => Ok((Scheme::BitsEqualPower, false)),
                "equal" => Ok((Scheme::Equal, false)),
                "reference" => Ok((Scheme::Reference, false)),
                "oma" => Ok((Scheme::Oma, false)),
                "alt-csi" => Ok((Scheme::Equal, true)),
                other => Err(format!("unknown scheme `{other}`")),
            })
            .collect()
    }
    fn name(self, alt: bool) -> &'static str {
        if alt {
            return "alt-csi";
        }
        match self {
            Scheme::Joint => "joint",
            Scheme::BitsEqualPower => "bits-equal-power",
            Scheme::Equal => "equal",
            Scheme::Reference => "reference",
            Scheme::Oma => "oma",
        }
    }
}

/// Application error carrying its process exit code.
struct AppError {
    code: u8,
    msg: String,
}

impl AppError {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        AppError { code, msg: msg.into() }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::new(2, e.to_string())
    }
}
impl From<AllocError> for AppError {
    fn from(e: AllocError) -> Self {
        let code = match e {
            AllocError::Infeasible(_) => 4,
            AllocError::Numerics(_) => 3,
        };
        AppError::new(code, e.to_string())
    }
}
impl From<SimError> for AppError {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::TooFewTrials(_) => 2,
            SimError::Channel(ChannelError::CodebookTooLarge(_)) => 2,
            SimError::Channel(ChannelError::RankDeficient) => 3,
            SimError::Alloc(AllocError::Infeasible(_)) => 4,
            SimError::Alloc(AllocError::Numerics(_)) => 3,
        };
        AppError::new(code, e.to_string())
    }
}
impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::new(2, e.to_string())
    }
}

fn load_config(common: &Common) -> Result<SystemConfig, AppError> {
    let mut cfg = match &common.config {
        Some(path) => SystemConfig::from_path(path)
            .map_err(|e| AppError::new(2, format!("{}: {e}", path.display())))?,
        None => default_config(),
    };
    if let Some(p) = common.power_dbm {
        cfg.power_dbm = p;
    }
    if let Some(b) = common.feedback_bits {
        cfg.feedback_bits = b;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(q) = common.quantization {
        cfg.quantization = q.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The primary evaluation setup: M = 6 antennas, 3 clusters of 2 users,
/// 4th-power path loss, -50 dBm noise.
fn default_config() -> SystemConfig {
    SystemConfig {
        antennas: 6,
        clusters: 3,
        users_per_cluster: 2,
        power_dbm: 20.0,
        feedback_bits: 42.0,
        path_loss_exponent: 4.0,
        distances_m: vec![vec![25.0, 35.0], vec![27.0, 37.0], vec![29.0, 39.0]],
        noise_dbm: vec![vec![-50.0; 2]; 3],
        trials: 200_000,
        seed: 0,
        quantization: QuantizationModel::CellModel,
    }
}

fn meta_header(cfg: &SystemConfig) -> String {
    let digest = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(toml::to_string(cfg).unwrap_or_default());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    format!(
        "# tool=noma-lf v{}\n# config_sha256={digest}\n# seed={}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.seed
    )
}

fn emit(common: &Common, text: &str) -> Result<(), AppError> {
    match &common.output {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| AppError::new(2, format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn grid_cell(v: &[Vec<f64>]) -> String {
    v.iter()
        .flat_map(|r| r.iter())
        .map(|x| format!("{x:.6}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn bits_grid(b: &BitAllocation) -> Vec<Vec<f64>> {
    b.bits
        .iter()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect()
}

fn sim_opts(cfg: &SystemConfig, alt_csi: bool) -> SimOptions {
    SimOptions {
        trials: cfg.trials,
        seed: cfg.seed,
        quantization: cfg.quantization,
        alt_csi,
    }
}

/// Run one scheme at the configured operating point.
fn run_scheme(
    cfg: &SystemConfig,
    scen: &ClusteredScenario,
    scheme: Scheme,
    alt_csi: bool,
) -> Result<(SimResult, ClusteredScenario, PowerAllocation, BitAllocation), AppError> {
    let opts = sim_opts(cfg, alt_csi);
    match scheme {
        Scheme::Joint => {
            let j = joint_optimize(scen)?;
            let res = simulate(&j.scenario, &j.power.per_user_mw, &bits_grid(&j.bits), &opts)?;
            Ok((res, j.scenario, j.power, j.bits))
        }
        Scheme::BitsEqualPower => {
            let power = power_equal(scen);
            let bits = bits_optimize(scen, &power.per_user_mw);
            let res = simulate(scen, &power.per_user_mw, &bits_grid(&bits), &opts)?;
            Ok((res, scen.clone(), power, bits))
        }
        Scheme::Equal => {
            let power = power_equal(scen);
            let bits = bits_equal(scen);
            let res = simulate(scen, &power.per_user_mw, &bits_grid(&bits), &opts)?;
            Ok((res, scen.clone(), power, bits))
        }
        Scheme::Reference => {
            let power = power_equal(scen);
            let bits = bits_reference(scen, &power.per_user_mw);
            let res = simulate(scen, &power.per_user_mw, &bits_grid(&bits), &opts)?;
            Ok((res, scen.clone(), power, bits))
        }
        Scheme::Oma => {
            let power = power_equal(scen);
            let bits = bits_equal(scen);
            let res = simulate_oma(scen, &bits_grid(&bits), &opts)?;
            Ok((res, scen.clone(), power, bits))
        }
    }
}

/// Analytical LB1 sum and loss-bound sum for a scheme's allocation.
fn analytic_sums(
    scen: &ClusteredScenario,
    power: &PowerAllocation,
    bits: &BitAllocation,
) -> Result<(f64, f64), AppError> {
    let mut lb1 = 0.0;
    let mut ub = 0.0;
    for n in 0..scen.n {
        for k in 0..scen.k {
            let c = coeffs_for_user(scen, &power.per_user_mw, bits.bits[n][k] as f64, n, k);
            lb1 += rate_lb1(&c, scen.m, k)
                .map_err(|e| AppError::new(3, e.to_string()))?
                .value;
            ub += rate_loss_ub(&c, scen.m).value;
        }
    }
    Ok((lb1, ub))
}

fn cmd_cluster(cfg: &SystemConfig) -> Result<String, AppError> {
    let scen = cfg.scenario()?;
    let mut out = String::new();
    out.push_str("cluster\tposition\tuser_id\tdistance_m\tcnr_per_mw\n");
    for n in 0..scen.n {
        for k in 0..scen.k {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6e}",
                n + 1,
                k + 1,
                scen.user_ids[n][k],
                scen.users[n][k].distance_m,
                scen.cnr[n][k]
            )
            .unwrap();
        }
    }
    Ok(out)
}

fn bits_table(scen: &ClusteredScenario, label: &str, alloc: &BitAllocation, out: &mut String) {
    for n in 0..scen.n {
        for k in 0..scen.k {
            writeln!(
                out,
                "{label}\t{}\t{}\t{:.4}\t{}",
                n + 1,
                k + 1,
                alloc.relaxed[n][k],
                alloc.bits[n][k]
            )
            .unwrap();
        }
    }
}

fn cmd_allocate_bits(cfg: &SystemConfig, joint_power: bool, compare: bool) -> Result<String, AppError> {
    let scen = cfg.scenario()?;
    let (power, scen) = if joint_power {
        power_fixed_point(&scen)?
    } else {
        (power_equal(&scen), scen)
    };
    let mut out = String::from("scheme\tcluster\tposition\trelaxed\tbits\n");
    let alloc = bits_optimize(&scen, &power.per_user_mw);
    bits_table(&scen, "proposed", &alloc, &mut out);
    if compare {
        let r = bits_reference(&scen, &power.per_user_mw);
        bits_table(&scen, "reference", &r, &mut out);
        let asy = bits_asymptotic(&scen, scen.p_total_mw);
        for n in 0..scen.n {
            for k in 0..scen.k {
                writeln!(out, "asymptotic\t{}\t{}\t{:.4}\t-", n + 1, k + 1, asy.tilde[n][k]).unwrap();
            }
        }
    }
    Ok(out)
}

fn cmd_allocate_power(cfg: &SystemConfig) -> Result<String, AppError> {
    let scen = cfg.scenario()?;
    let (power, reduced) = power_fixed_point(&scen)?;
    let mut out = String::new();
    writeln!(out, "# c_star={:.9e}", power.c_star).unwrap();
    writeln!(out, "# active_clusters={}", power.n_active_clusters).unwrap();
    out.push_str("cluster\tphi\tper_user_mw\n");
    for n in 0..reduced.n {
        writeln!(out, "{}\t{:.9}\t{:.6}", n + 1, power.phi[n], power.per_user_mw[n][0]).unwrap();
    }
    Ok(out)
}

fn cmd_joint(cfg: &SystemConfig) -> Result<String, AppError> {
    let scen = cfg.scenario()?;
    let j = joint_optimize(&scen)?;
    let mut out = String::new();
    writeln!(out, "# c_star={:.9e}", j.power.c_star).unwrap();
    writeln!(out, "# active_clusters={}", j.power.n_active_clusters).unwrap();
    out.push_str("cluster\tposition\tphi\tpower_mw\tbits\n");
    for n in 0..j.scenario.n {
        for k in 0..j.scenario.k {
            writeln!(
                out,
                "{}\t{}\t{:.9}\t{:.6}\t{}",
                n + 1,
                k + 1,
                j.power.phi[n],
                j.power.per_user_mw[n][k],
                j.bits.bits[n][k]
            )
            .unwrap();
        }
    }
    Ok(out)
}

const SWEEP_HEADER: &str = "sweep_param\tsweep_value\tscheme\tesr\tesr_se\tlb1_sum\tloss_ub_sum\tper_user_rate\tper_user_bits\tper_user_power_mw\n";

fn sweep_row(
    param: &str,
    value: f64,
    name: &str,
    res: &SimResult,
    lb1: f64,
    ub: f64,
    bits: &BitAllocation,
    power: &PowerAllocation,
) -> String {
    format!(
        "{param}\t{value}\t{name}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
        res.esr,
        res.esr_se,
        lb1,
        ub,
        grid_cell(&res.per_user_rate),
        grid_cell(&bits_grid(bits)),
        grid_cell(&power.per_user_mw),
    )
}

fn cmd_simulate(cfg: &SystemConfig, scheme: Scheme, alt_csi: bool) -> Result<String, AppError> {
    let scen = cfg.scenario()?;
    let (res, scen, power, bits) = run_scheme(cfg, &scen, scheme, alt_csi)?;
    let (lb1, ub) = analytic_sums(&scen, &power, &bits)?;
    let mut out = String::from(SWEEP_HEADER);
    out.push_str(&sweep_row(
        "power_dbm",
        cfg.power_dbm,
        scheme.name(alt_csi),
        &res,
        lb1,
        ub,
        &bits,
        &power,
    ));
    Ok(out)
}

fn parse_sweep(s: &str) -> Result<(String, Vec<f64>), AppError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 || !matches!(parts[0], "power" | "bits") {
        return Err(AppError::new(
            2,
            format!("bad sweep `{s}`; expected power:<from>:<to>:<step> or bits:<from>:<to>:<step>"),
        ));
    }
    let nums: Result<Vec<f64>, _> = parts[1..].iter().map(|p| p.parse::<f64>()).collect();
    let nums = nums.map_err(|e| AppError::new(2, format!("bad sweep `{s}`: {e}")))?;
    let (from, to, step) = (nums[0], nums[1], nums[2]);
    if step <= 0.0 || to < from {
        return Err(AppError::new(2, format!("bad sweep range `{s}`")));
    }
    let mut vals = Vec::new();
    let mut v = from;
    while v <= to + 1e-9 {
        vals.push(v);
        v += step;
    }
    Ok((parts[0].to_string(), vals))
}

fn cmd_experiment(cfg: &SystemConfig, sweep: &str, schemes: &str, clustering: bool) -> Result<String, AppError> {
    if clustering {
        let scen = cfg.scenario()?;
        let perms: Vec<Vec<usize>> = vec![
            vec![0, 1, 2],
            vec![1, 0, 2],
            vec![0, 2, 1],
            vec![2, 0, 1],
            vec![1, 2, 0],
            vec![2, 1, 0],
        ];
        let results = clustering_experiment(&scen, &perms, &sim_opts(cfg, false))?;
        let base = results[0].1.esr;
        let mut out = String::from("permutation\tesr\tesr_se\tloss_vs_identity\n");
        for (perm, res) in &results {
            let tag: String = perm.iter().map(|p| (p + 1).to_string()).collect();
            writeln!(out, "{tag}\t{:.6}\t{:.6}\t{:.6}", res.esr, res.esr_se, base - res.esr).unwrap();
        }
        return Ok(out);
    }
    let schemes = Scheme::parse_list(schemes).map_err(|m| AppError::new(2, m))?;
    let (param, values) = parse_sweep(sweep)?;
    let mut out = String::from(SWEEP_HEADER);
    for &v in &values {
        let mut point = cfg.clone();
        if param == "power" {
            point.power_dbm = v;
        } else {
            point.feedback_bits = v;
        }
        let scen = point.scenario()?;
        for &(scheme, alt) in &schemes {
            let (res, scen, power, bits) = run_scheme(&point, &scen, scheme, alt)?;
            let (lb1, ub) = analytic_sums(&scen, &power, &bits)?;
            out.push_str(&sweep_row(&param, v, scheme.name(alt), &res, lb1, ub, &bits, &power));
        }
    }
    Ok(out)
}

fn cmd_validate_specfun() -> Result<String, AppError> {
    use noma_lf::specfun::{exp_int_ei, exp_int_en, psi_integral, theta, theta_quad};
    let mut out = String::from("check\tstatus\tmax_err\n");
    let mut fail = false;

    // Ei against high-precision anchors.
    let anchors = [
        (0.5f64, 0.454_219_904_863_173_6),
        (1.0, 1.895_117_816_355_936_8),
        (-1.0, -0.219_383_934_395_520_3),
        (5.0, 40.185_275_355_803_177),
        (-6.0, -3.600_824_521_626_587e-4),
    ];
    let mut err: f64 = 0.0;
    for &(x, want) in &anchors {
        let got = exp_int_ei(x).map_err(|e| AppError::new(3, e.to_string()))?;
        err = err.max(((got - want) / want).abs());
    }
    writeln!(out, "exp_int_ei\t{}\t{err:.2e}", if err < 1e-12 { "ok" } else { "FAIL" }).unwrap();
    fail |= err >= 1e-12;

    // E_q bracket 1/(x+q) ≤ e^x E_q(x) ≤ 1/(x+q-1).
    let mut ok = true;
    for q in 1..=8usize {
        for &x in &[0.05f64, 0.7, 3.0, 25.0, 300.0] {
            let v = exp_int_en(q, x).map_err(|e| AppError::new(3, e.to_string()))? * x.exp();
            ok &= v >= 1.0 / (x + q as f64) - 1e-12 && v <= 1.0 / (x + q as f64 - 1.0) + 1e-12;
        }
    }
    writeln!(out, "exp_int_en_bracket\t{}\t-", if ok { "ok" } else { "FAIL" }).unwrap();
    fail |= !ok;

    // Ψ degenerate width and Θ series vs quadrature on benign cells.
    let mut ok = true;
    for n in -4i32..=3 {
        let v = psi_integral(n, 0.7f64, 0.7).map_err(|e| AppError::new(3, e.to_string()))?;
        ok &= v.value.abs() < 1e-12;
    }
    writeln!(out, "psi_zero_width\t{}\t-", if ok { "ok" } else { "FAIL" }).unwrap();
    fail |= !ok;

    let mut err: f64 = 0.0;
    for &(a, b, m) in &[(0.5f64, 0.5f64, 4usize), (2.0, 1.0, 4), (1.0, 0.3, 6)] {
        let s = theta(a, b, m).map_err(|e| AppError::new(3, e.to_string()))?.value;
        let q = theta_quad(a, b, m).map_err(|e| AppError::new(3, e.to_string()))?;
        err = err.max(((s - q) / q).abs());
    }
    writeln!(out, "theta_series_vs_quad\t{}\t{err:.2e}", if err < 1e-7 { "ok" } else { "FAIL" }).unwrap();
    fail |= err >= 1e-7;

    if fail {
        Err(AppError::new(3, format!("special-function validation failed:\n{out}")))
    } else {
        Ok(out)
    }
}

fn run(cli: &Cli) -> Result<(), AppError> {
    let cfg = load_config(&cli.common)?;
    let body = match &cli.cmd {
        Cmd::Cluster => cmd_cluster(&cfg)?,
        Cmd::AllocateBits { joint_power, compare } => cmd_allocate_bits(&cfg, *joint_power, *compare)?,
        Cmd::AllocatePower => cmd_allocate_power(&cfg)?,
        Cmd::Joint => cmd_joint(&cfg)?,
        Cmd::Simulate { scheme, alt_csi } => cmd_simulate(&cfg, *scheme, *alt_csi)?,
        Cmd::Experiment { sweep, schemes, clustering } => {
            cmd_experiment(&cfg, sweep, schemes, *clustering)?
        }
        Cmd::ValidateSpecfun => cmd_validate_specfun()?,
    };
    emit(&cli.common, &format!("{}{body}", meta_header(&cfg)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
