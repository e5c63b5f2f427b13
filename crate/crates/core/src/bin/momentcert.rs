use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use momentcert::extract::{
    certify, certify_matrix, Certificate, CertificateStatus, CertifyOptions, ExtractOptions, Tolerances,
};
use momentcert::gns::{commutator_ranks, GnsModel};
use momentcert::hierarchy::{run_hierarchy, RunConfig, RunReport};
use momentcert::io::{read_moment_matrix, read_problem};
use momentcert::sdp::{assemble_relaxation, solve_sdp, SdpOptions, SdpStatus};

#[derive(Parser)]
#[command(
    name = "momentcert",
    version,
    about = "Moment relaxations with Hankel optimality certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Seed for the random combination used in simultaneous diagonalization
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Relative eigenvalue cutoff for numerical ranks
    #[arg(long, global = true, default_value_t = Tolerances::default().rank)]
    tol_rank: f64,
    /// Relative tolerance of the Hankel and commutator tests
    #[arg(long, global = true, default_value_t = Tolerances::default().hankel)]
    tol_hankel: f64,
    /// Relative constraint violation accepted at a node
    #[arg(long, global = true, default_value_t = Tolerances::default().feas)]
    tol_feas: f64,
    /// Relative duality gap accepted from the SDP solver
    #[arg(long, global = true, default_value_t = 1e-8)]
    gap_tol: f64,
    /// Skip the least-squares polish of extracted nodes
    #[arg(long, global = true)]
    no_refine: bool,
    /// Print a JSON report instead of text
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run relaxations of increasing order until one is certified
    Solve {
        problem: PathBuf,
        /// First relaxation order (default: the problem degree)
        #[arg(long)]
        min_order: Option<u32>,
        /// Last relaxation order (default: first + 6)
        #[arg(long)]
        max_order: Option<u32>,
    },
    /// Solve one relaxation and print the moments
    Relax {
        problem: PathBuf,
        #[arg(long)]
        order: u32,
    },
    /// Truncated GNS construction, extraction and certificate for a given moment matrix
    Extract {
        matrix: PathBuf,
        /// Problem file; its objective and constraints turn the result into an optimality certificate
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// Relaxation order the matrix came from (default: twice the matrix order)
        #[arg(long)]
        order: Option<u32>,
        /// Known upper bound on the number of minimizers
        #[arg(long)]
        max_minimizers: Option<usize>,
    },
    /// Lower bound on the node count of any quadrature rule, from commutator ranks
    Bound { matrix: PathBuf },
}

impl Common {
    fn tolerances(&self) -> Tolerances {
        Tolerances {
            rank: self.tol_rank,
            hankel: self.tol_hankel,
            feas: self.tol_feas,
            ..Tolerances::default()
        }
    }

    fn certify_options(&self, node_cap: Option<usize>) -> CertifyOptions {
        CertifyOptions {
            extract: ExtractOptions {
                seed: self.seed,
                tol: self.tolerances(),
                refine: !self.no_refine,
            },
            node_cap,
        }
    }
}

#[derive(Serialize)]
struct MomentJson {
    exponents: Vec<u32>,
    value: f64,
}

#[derive(Serialize)]
struct RelaxReport {
    k: u32,
    status: SdpStatus,
    value: f64,
    duality_gap: f64,
    iterations: usize,
    moments: Vec<MomentJson>,
}

#[derive(Serialize)]
struct BoundReport {
    #[serde(rename = "dim_T")]
    dim_t: usize,
    rank_m: usize,
    max_commutator_rank: usize,
    moller_bound: usize,
    commutator_ranks: Vec<(usize, usize, usize)>,
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    let c = &cli.common;
    match &cli.command {
        Command::Solve {
            problem,
            min_order,
            max_order,
        } => {
            let prob = read_problem(problem)?;
            let cfg = RunConfig {
                k_start: *min_order,
                k_max: *max_order,
                tol: c.tolerances(),
                gap_tol: c.gap_tol,
                seed: c.seed,
                refine: !c.no_refine,
                sdp: SdpOptions::default(),
            };
            let report = run_hierarchy(&prob, &cfg)?;
            if c.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print_run(&report);
            }
            Ok(exit_for(report.status == CertificateStatus::OptimalCertified))
        }
        Command::Relax { problem, order } => {
            let prob = read_problem(problem)?;
            let sdp = assemble_relaxation(&prob, *order)?;
            let opts = SdpOptions {
                gap_tol: c.gap_tol,
                ..SdpOptions::default()
            };
            let sol = solve_sdp(&sdp, &opts);
            let report = RelaxReport {
                k: *order,
                status: sol.status,
                value: sol.objective_value,
                duality_gap: sol.duality_gap,
                iterations: sol.iterations,
                moments: sol
                    .y
                    .basis()
                    .monomials()
                    .iter()
                    .zip(sol.y.values().iter())
                    .map(|(m, v)| MomentJson {
                        exponents: m.exponents().to_vec(),
                        value: *v,
                    })
                    .collect(),
            };
            if c.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "relaxation k = {}: {:?} after {} iterations",
                    report.k, report.status, report.iterations
                );
                println!("value {:.8}  (duality gap {:.2e})", report.value, report.duality_gap);
                for m in &report.moments {
                    println!("  y{:?} = {:.8}", m.exponents, m.value);
                }
            }
            Ok(exit_for(sol.status == SdpStatus::Optimal))
        }
        Command::Extract {
            matrix,
            constraints,
            order,
            max_minimizers,
        } => {
            let m = read_moment_matrix(matrix)?;
            let opts = c.certify_options(*max_minimizers);
            let cert = match constraints {
                Some(path) => {
                    let prob = read_problem(path)?;
                    let value = m.apply(prob.objective())?;
                    let k = order.unwrap_or(2 * m.order());
                    certify(&prob, &m, k, value, &opts)?
                }
                None => certify_matrix(&m, None, &opts)?,
            };
            if c.json {
                println!("{}", serde_json::to_string_pretty(&cert)?);
            } else {
                print_certificate(&cert);
            }
            Ok(exit_for(matches!(
                cert.status,
                CertificateStatus::OptimalCertified | CertificateStatus::Flat | CertificateStatus::GaussianRuleFound
            )))
        }
        Command::Bound { matrix } => {
            let m = read_moment_matrix(matrix)?;
            let model = GnsModel::new(&m, c.tol_rank)?;
            let ranks = commutator_ranks(&model.op_matrices, c.tol_rank);
            let max_rank = ranks.iter().map(|r| r.2).max().unwrap_or(0);
            let report = BoundReport {
                dim_t: model.dim(),
                rank_m: model.rank_m,
                max_commutator_rank: max_rank,
                moller_bound: model.dim() + max_rank.div_ceil(2),
                commutator_ranks: ranks,
            };
            if c.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("dim T_L = {}, rank M = {}", report.dim_t, report.rank_m);
                for (i, j, r) in &report.commutator_ranks {
                    println!("  rank [M_{}, M_{}] = {r}", i + 1, j + 1);
                }
                println!("any quadrature rule needs at least {} nodes", report.moller_bound);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_for(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn fmt_point(a: &[f64]) -> String {
    let parts: Vec<String> = a.iter().map(|v| format!("{v:.6}")).collect();
    format!("({})", parts.join(", "))
}

fn print_certificate(cert: &Certificate) {
    println!("status: {}", cert.status.as_str());
    if cert.relaxation_value.is_finite() {
        println!("relaxation value: {:.8}", cert.relaxation_value);
    }
    if let Some(h) = cert.hankel_status {
        println!("modified moment matrix: {}", h.as_str());
    }
    println!(
        "dim T_L = {}, rank M = {}, max commutator rank = {}",
        cert.dim_t, cert.rank_m, cert.max_commutator_rank
    );
    if let Some(b) = cert.moller_lower_bound {
        println!("node lower bound: {b}");
    }
    if let Some(rule) = &cert.rule {
        println!("nodes (weight):");
        for (a, w) in rule.nodes.iter().zip(&rule.weights) {
            println!("  {}  {w:.6}", fmt_point(a));
        }
    }
    if let Some(q) = &cert.quadrature {
        println!(
            "quadrature error: {:.2e} (degree <= 2D-1), {:.2e} (all degrees), reconstruction {:.2e}",
            q.low_degree, q.full_degree, q.reconstruction
        );
    }
    println!("first moments: {}", fmt_point(&cert.first_moments));
    for d in &cert.diagnostics {
        println!("note: {d}");
    }
}

fn print_run(report: &RunReport) {
    for l in &report.levels {
        println!(
            "k = {}: value {:.8} ({:?}, {} iterations) -> {}",
            l.k,
            l.relaxation_value,
            l.sdp_status,
            l.iterations,
            l.status().as_str()
        );
        for d in l
            .diagnostics
            .iter()
            .chain(l.certificate.iter().flat_map(|c| &c.diagnostics))
        {
            println!("    note: {d}");
        }
    }
    println!("status: {}", report.status.as_str());
    if let Some(v) = report.value {
        let what = if report.status == CertificateStatus::OptimalCertified {
            "optimal value"
        } else {
            "best lower bound"
        };
        println!("{what}: {v:.8}");
    }
    if let Some(rule) = &report.rule {
        println!("minimizers:");
        for a in &rule.nodes {
            println!("  {}", fmt_point(a));
        }
    }
    if let Some(fm) = &report.first_moments {
        let label = if report.first_moments_certified {
            ""
        } else {
            " (heuristic)"
        };
        println!("first moments{label}: {}", fmt_point(fm));
    }
}
