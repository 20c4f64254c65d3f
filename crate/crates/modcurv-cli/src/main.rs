use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modcurv::curvature::{f_value, heisenberg_curvature_density, modular_curvature_in, PrefactorConvention};
use modcurv::error::{Error, Result};
use modcurv::gns::{GnsTruncation, HeatFitConfig};
use modcurv::heisenberg::HeisenbergGrid;
use modcurv::lab::{self, Check, ExperimentConfig, Report, SuiteName};
use modcurv::modfunc::calc::{CalcMethod, ModularCalcContext};
use modcurv::modfunc::kernels::KernelKind;
use modcurv::nctorus::{AlgebraParams, TorusElement};
use modcurv::psymbol::{conformal_laplacian_multiplier, conformal_p, parametrix_a2};
use num_complex::Complex64 as C64;
use serde_json::json;

#[derive(Parser)]
#[command(name = "modcurv", version, about = "Modular curvature laboratory for the noncommutative two-torus")]
struct Cli {
    /// Experiment configuration (JSON). Defaults are echoed into every report.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for the JSON report and CSV tables.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a curvature kernel on a grid (CSV on stdout).
    Kernels {
        #[arg(long)]
        which: String,
        /// a:b:step
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
    },
    /// Curvature density of a dilaton.
    Curvature {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trunc: Option<usize>,
        #[arg(long, default_value = "cm2014")]
        convention: String,
        /// Slope μ for the lm2015 density.
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
    },
    /// Heat-trace fit of the conformal Laplacian.
    HeatFit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trunc: Option<usize>,
        /// tmin:tmax:points
        #[arg(long)]
        tgrid: Option<String>,
        /// Probe element files; the unit is used when absent.
        #[arg(long)]
        probe: Vec<PathBuf>,
    },
    /// Heat coefficient a2 from the resolvent parametrix.
    ParametrixA2 {
        #[arg(long)]
        input: PathBuf,
        /// e1,e2 weights of the first-order part; exact conformal Laplacian when absent.
        #[arg(long)]
        eps: Option<String>,
        /// Zeroth-order part (element file) used with --eps.
        #[arg(long)]
        a0: Option<PathBuf>,
        #[arg(long)]
        trunc: Option<usize>,
        #[arg(long)]
        angles: Option<usize>,
        #[arg(long)]
        probe: Vec<PathBuf>,
    },
    /// Spectrum of the module Laplacian on a Heisenberg module.
    HeisenbergSpectrum {
        /// a,b,c,d
        #[arg(long, allow_hyphen_values = true)]
        g: String,
        #[arg(long)]
        theta: Option<f64>,
        /// re,im
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<String>,
        /// L,G
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        dilaton: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        count: usize,
    },
    /// Gradient of the scale-invariant functional against finite differences.
    GradientCheck {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        trunc: Option<usize>,
        #[arg(long, default_value_t = 10)]
        directions: usize,
    },
    /// Calibrate and write the convention file.
    Calibrate {
        #[arg(long, default_value = "conventions.json")]
        write: PathBuf,
    },
    /// Run an acceptance bundle (or all of them).
    Suite { name: String },
}

fn load_element(path: &Path) -> Result<TorusElement> {
    let s = std::fs::read_to_string(path)?;
    TorusElement::from_json_str(&s).map_err(|e| match e {
        Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
        other => other,
    })
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize, what: &str) -> Result<Vec<T>> {
    let v: std::result::Result<Vec<T>, _> = s.split(',').map(|x| x.trim().parse::<T>()).collect();
    match v {
        Ok(v) if v.len() == n => Ok(v),
        _ => Err(Error::Config(format!("{what}: expected {n} comma-separated values, got {s:?}"))),
    }
}

fn probes(files: &[PathBuf], p: AlgebraParams) -> Result<Vec<(String, TorusElement)>> {
    if files.is_empty() {
        return Ok(vec![("1".into(), TorusElement::one(p))]);
    }
    files
        .iter()
        .map(|f| {
            let a = load_element(f)?;
            if a.params() != &p {
                return Err(Error::ParamsMismatch);
            }
            Ok((f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), a))
        })
        .collect()
}

fn finish(report: &Report, out: Option<&Path>, stem: &str) -> Result<i32> {
    if let Some(dir) = out {
        lab::emit_report(report, dir, stem)?;
    }
    println!("{}", report.to_json()?);
    for c in &report.checks {
        eprintln!("{} {} value={:.3e} tol={:.3e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    Ok(report.exit_code())
}

fn run(cli: Cli) -> Result<i32> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    let out = cli.out.as_deref();
    match cli.cmd {
        Cmd::Kernels { which, grid } => {
            let kind = KernelKind::parse(&which).ok_or_else(|| Error::Config(format!("unknown kernel {which:?}")))?;
            let (a, b, step) = lab::parse_triple(&grid)?;
            if kind == KernelKind::Kplus {
                eprintln!("note: K+ reads the undefined symbol v in its display as v = s");
            }
            let t = lab::kernel_table(kind, a, b, step)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                t.write_csv(&dir.join(format!("kernel_{}.csv", t.name)))?;
            }
            print!("{}", t.to_csv_string()?);
            Ok(lab::EXIT_OK)
        }
        Cmd::Curvature { input, trunc, convention, mu } => {
            let h = load_element(&input)?;
            let n = trunc.unwrap_or(cfg.trunc);
            let tr = GnsTruncation::new(n)?;
            let conv = cfg.conventions()?;
            let pc = PrefactorConvention::parse(&convention).ok_or_else(|| Error::Config(format!("unknown convention {convention:?}")))?;
            let rep = match pc {
                PrefactorConvention::Cm2014 => modular_curvature_in(&ModularCalcContext::new(&h, tr, CalcMethod::Auto)?, &conv)?,
                PrefactorConvention::Lm2015 => heisenberg_curvature_density(&h, mu, tr)?,
            };
            let mut r = Report::new(
                "curvature",
                json!({"input": input, "trunc": n, "convention": convention, "mu": mu, "conventions": conv}),
                cfg.seed,
            );
            r.check(Check::below("gauss_bonnet_residual", rep.gauss_bonnet_residual, cfg.tolerances.gauss_bonnet));
            r.set("density", serde_json::to_value(rep.density.to_json(true))?);
            r.set("gauss_bonnet_residual", json!(rep.gauss_bonnet_residual));
            r.set("truncation_residual", json!(rep.truncation_residual));
            r.set("F_value", json!(f_value(&h, tr)?));
            finish(&r, out, "curvature")
        }
        Cmd::HeatFit { input, trunc, tgrid, probe } => {
            let h = load_element(&input)?;
            let n = trunc.unwrap_or(cfg.fit_trunc);
            let mut fit: HeatFitConfig = cfg.heat.clone();
            if let Some(g) = tgrid {
                let (a, b, pts) = lab::parse_triple(&g)?;
                if pts < 2.0 || pts.fract() != 0.0 {
                    return Err(Error::Config(format!("points must be an integer ≥ 2, got {pts}")));
                }
                fit.t_min = a;
                fit.t_max = b;
                fit.points = pts as usize;
                fit.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
            let pr = probes(&probe, *h.params())?;
            let (fits, table) = lab::heat_fit(&h, &pr, n, &fit)?;
            let mut r = Report::new("heat-fit", json!({"input": input, "trunc": n, "fit": fit, "probes": probe}), cfg.seed);
            for f in &fits {
                r.check(Check::below(format!("{}_kernel_term_two_routes", f.probe), (f.kernel_term_algebra - f.kernel_term_eigen).abs(), cfg.tolerances.kernel_term));
            }
            r.set("fits", serde_json::to_value(&fits)?);
            r.tables.push(table);
            finish(&r, out, "heat_fit")
        }
        Cmd::ParametrixA2 { input, eps, a0, trunc, angles, probe } => {
            let h = load_element(&input)?;
            let p = *h.params();
            let n = trunc.unwrap_or(cfg.symbol_trunc);
            let tr = GnsTruncation::new(n)?;
            let mut quad = cfg.quadrature.clone();
            if let Some(k) = angles {
                quad.angles = k;
            }
            let lap = conformal_laplacian_multiplier(&h, tr)?;
            let pm = match &eps {
                None => lap,
                Some(e) => {
                    let v: Vec<f64> = parse_list(e, 2, "--eps")?;
                    let a0 = match &a0 {
                        Some(f) => load_element(f)?,
                        None => TorusElement::zero(p),
                    };
                    conformal_p(&lap.k2, v[0], v[1], &a0)?
                }
            };
            let mut pr = probes(&probe, p)?;
            if probe.is_empty() {
                pr.push(("U1+U1*".into(), TorusElement::hermitian_from(p, [((1, 0), C64::new(1.0, 0.0))])));
            }
            let elems: Vec<TorusElement> = pr.iter().map(|(_, a)| a.clone()).collect();
            let conv = cfg.conventions()?;
            let res = parametrix_a2(&pm, &elems, tr, &quad, conv.parametrix_sign, conv.measure_factor)?;
            let mut r = Report::new(
                "parametrix-a2",
                json!({"input": input, "eps": eps, "a0": a0, "trunc": n, "quadrature": quad}),
                cfg.seed,
            );
            for c in &res.homogeneity {
                r.check(Check::below(format!("homogeneity_{}", c.name), c.residual, 1e-9));
            }
            let vals: Vec<_> = pr.iter().zip(&res.integral.values).map(|((s, _), v)| json!({"probe": s, "a2": v})).collect();
            r.set("a2_value", json!(vals));
            r.set("quadrature_error", json!(res.integral.quadrature_error));
            r.set("truncation_residual", json!(res.integral.truncation_residual));
            r.set("homogeneity_report", serde_json::to_value(&res.homogeneity)?);
            r.set("frozen_conventions", serde_json::to_value(&conv)?);
            finish(&r, out, "parametrix_a2")
        }
        Cmd::HeisenbergSpectrum { g, theta, tau, grid, dilaton, count } => {
            let gv: Vec<i64> = parse_list(&g, 4, "--g")?;
            let tau = match tau {
                Some(s) => {
                    let v: Vec<f64> = parse_list(&s, 2, "--tau")?;
                    C64::new(v[0], v[1])
                }
                None => C64::new(cfg.tau[0], cfg.tau[1]),
            };
            let params = AlgebraParams::new(theta.unwrap_or(cfg.theta), tau).map_err(|e| Error::Config(e.to_string()))?;
            let grid = match grid {
                Some(s) => {
                    let v: Vec<f64> = parse_list(&s, 2, "--grid")?;
                    if v[1].fract() != 0.0 || v[1] < 16.0 {
                        return Err(Error::Config(format!("grid points must be an integer ≥ 16, got {}", v[1])));
                    }
                    HeisenbergGrid::new(v[0], v[1] as usize).map_err(|e| Error::Config(e.to_string()))?
                }
                None => HeisenbergGrid::new(cfg.heisenberg.half_width, cfg.heisenberg.points)?,
            };
            let h = match &dilaton {
                Some(f) => {
                    let h = load_element(f)?;
                    if h.params() != &params {
                        return Err(Error::ParamsMismatch);
                    }
                    Some(h)
                }
                None => None,
            };
            let r = lab::heisenberg_spectrum([gv[0], gv[1], gv[2], gv[3]], params, grid, h.as_ref(), count, &cfg)?;
            finish(&r, out, "heisenberg_spectrum")
        }
        Cmd::GradientCheck { input, trunc, directions } => {
            let h = match &input {
                Some(f) => load_element(f)?,
                None => lab::reference_dilaton(cfg.params()?),
            };
            let n = trunc.unwrap_or(cfg.trunc);
            let gc = lab::gradient_check(&h, n, directions, cfg.seed)?;
            let mut r = Report::new("gradient-check", json!({"input": input, "trunc": n, "directions": directions}), cfg.seed);
            r.check(Check::below("gradient_vs_fd", gc.max_relative, cfg.tolerances.gradient));
            let mut t = lab::Table::new("directions", &["fd", "analytic"]);
            for (a, b) in &gc.directions {
                t.push(vec![*a, *b]);
            }
            r.tables.push(t);
            finish(&r, out, "gradient_check")
        }
        Cmd::Calibrate { write } => {
            let (cal, r) = lab::calibrate_conventions(&cfg)?;
            cal.conventions.save(&write)?;
            eprintln!("wrote {}", write.display());
            finish(&r, out, "calibrate")
        }
        Cmd::Suite { name } => {
            let names: Vec<SuiteName> = if name == "all" {
                SuiteName::ALL.to_vec()
            } else {
                vec![SuiteName::parse(&name).ok_or_else(|| Error::Config(format!("unknown suite {name:?}")))?]
            };
            let mut code = lab::EXIT_OK;
            for s in names {
                let r = lab::run_suite(s, &cfg)?;
                code = code.max(finish(&r, out, &format!("suite_{}", s.as_str()))?);
            }
            Ok(code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(c) => ExitCode::from(c as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(lab::exit_code(&e) as u8)
        }
    }
}
