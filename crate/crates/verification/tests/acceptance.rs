//! Acceptance suite, one line per criterion.
//!
//! Runs at desk scale by default. `PCRLB_ACCEPTANCE_SCALE=paper` switches the
//! design and validation criteria to N=100, M=M_u=2000, 500 runs, where the
//! reference values and bands apply. `PCRLB_ACCEPTANCE_ONLY=1,4,9` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use pcrlb_design::designer::{evaluate_objective_detailed, input_path, optimize, DesignConfig, DesignResult};
use pcrlb_design::noise::NoiseKey;
use pcrlb_design::oracles::{fd_h_block_samples, kalman_extended, SequenceTable};
use pcrlb_design::pcrlb::{bound_trajectory, estimate_h_blocks, sample_prior_keyed, BoundCriterion, HBlocks};
use pcrlb_design::policy::{
    build_input_space, policy_from_template, sample_sequence, sequence_log_prob, MarkovInputPolicy, PolicyTemplate,
};
use pcrlb_design::smc::mse_experiment;
use pcrlb_design::ssm::{make_benchmark_model, make_bias_model, simulate_paths, InputSequence, SampleEnsemble};
use pcrlb_design_cli::app::design_config;
use pcrlb_design_cli::{parse_config_str, Overrides, RunConfig};

#[derive(Clone, Copy, PartialEq)]
enum Scale {
    Desk,
    Paper,
}

enum Status {
    Pass,
    Fail,
    /// Reference values only apply at paper scale.
    NotJudged,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn judged(ok: bool, detail: String) -> Outcome {
    Outcome { status: if ok { Status::Pass } else { Status::Fail }, detail }
}

const REFERENCE_PSI: [f64; 4] = [0.42, 0.37, 0.36, 0.51];
const REFERENCE_MSE: [f64; 4] = [1.66, 1.27, 1.25, 2.02];

/// `v[3] > v[0] > v[1] >= v[2]` (Case4 worst, Case3 best).
fn table_ordering(v: &[f64]) -> bool {
    v[3] > v[0] && v[0] > v[1] && v[1] >= v[2]
}

fn fmt(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", cells.join(", "))
}

fn run_config(scale: Scale) -> RunConfig {
    let preset = match scale {
        Scale::Desk => "desk",
        Scale::Paper => "paper",
    };
    let text = format!("model = \"benchmark\"\npreset = \"{preset}\"\nseed = 1\n");
    parse_config_str(&text, &Overrides::default()).expect("built-in config")
}

struct Designs {
    cfg: RunConfig,
    results: Vec<DesignResult>,
}

fn designs(scale: Scale) -> Designs {
    let cfg = run_config(scale);
    let results = PolicyTemplate::CASES
        .iter()
        .map(|&t| {
            let r = optimize(&design_config(&cfg, t)).expect("design run");
            println!(
                "  {t}: phi={} objective={:.4} se={:.4} evaluations={} time={:.0}s",
                fmt(&r.phi),
                r.objective,
                r.standard_error,
                r.evaluations,
                r.wall_time.as_secs_f64()
            );
            r
        })
        .collect();
    Designs { cfg, results }
}

fn criterion_1(scale: Scale, d: &Designs) -> Outcome {
    let psi: Vec<f64> = d.results.iter().map(|r| r.objective).collect();
    let ordered = table_ordering(&psi);
    let slowest = d.results.iter().map(|r| r.wall_time.as_secs_f64()).fold(0.0, f64::max);
    match scale {
        Scale::Desk => judged(ordered, format!("psi={} ordering={ordered} slowest case {slowest:.0}s", fmt(&psi))),
        Scale::Paper => {
            let bands = psi.iter().zip(REFERENCE_PSI).all(|(v, r)| (v - r).abs() <= 0.08);
            judged(ordered && bands, format!("psi={} vs {} +-0.08 bands={bands} ordering={ordered}", fmt(&psi), fmt(&REFERENCE_PSI)))
        }
    }
}

fn criterion_2(scale: Scale, d: &Designs) -> Outcome {
    let refs: [(&[f64], f64); 3] = [(&[0.62], 0.15), (&[0.63, 0.92], 0.15), (&[0.34, 0.61, 0.72], 0.2)];
    let mut ok = true;
    let mut detail = Vec::new();
    for (r, (target, tol)) in d.results.iter().zip(refs) {
        let inside = r.phi.iter().zip(target).all(|(p, t)| (p - t).abs() <= tol);
        ok &= inside;
        detail.push(format!("{}={} vs {}", r.template, fmt(&r.phi), fmt(target)));
    }
    let detail = detail.join("; ");
    match scale {
        Scale::Desk => Outcome { status: Status::NotJudged, detail: format!("{detail} (reference optimum is for N=100, M=M_u=2000)") },
        Scale::Paper => judged(ok, detail),
    }
}

fn criterion_3(scale: Scale, d: &Designs) -> Outcome {
    let cfg = &d.cfg;
    let model = cfg.build_model();
    let mut sums = Vec::new();
    let mut dominance = Vec::new();
    for r in &d.results {
        let rep = mse_experiment(&model, &cfg.truth_theta, &r.policy, cfg.runs, cfg.horizon, &cfg.smc_config(), &r.mean_trace)
            .expect("validation run");
        sums.push(rep.sum_trace_mse);
        dominance.push(rep.dominance_fraction());
    }
    let dominated = dominance.iter().all(|f| *f >= 0.95);
    let detail = format!("runs={} dominance={} sum_tr_mse={}", cfg.runs, fmt(&dominance), fmt(&sums));
    match scale {
        Scale::Desk => judged(dominated, format!("{detail} (MSE bands and ordering judged at paper scale)")),
        Scale::Paper => {
            let bands = sums.iter().zip(REFERENCE_MSE).all(|(v, r)| (v - r).abs() <= 0.25 * r);
            let ordered = table_ordering(&sums);
            judged(dominated && bands && ordered, format!("{detail} vs {} bands={bands} ordering={ordered}", fmt(&REFERENCE_MSE)))
        }
    }
}

fn prbs() -> MarkovInputPolicy {
    let space = build_input_space(&[-0.8], &[0.8], 2, 0).unwrap();
    policy_from_template(PolicyTemplate::Case4, &space, &[]).unwrap()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let model = make_bias_model();
    let u = input_path(&prbs(), 100, 4, 0);
    let kalman = kalman_extended(&model, &u).unwrap();
    let bound = bound_trajectory(&model, &u, 2, BoundCriterion::Trace, NoiseKey::new(4, 0)).unwrap();
    let mut worst: f64 = 0.0;
    for (p, s) in kalman.iter().zip(&bound.steps) {
        let inv = s.pim.assemble().try_inverse().expect("invertible information matrix");
        worst = worst.max((inv - p).amax() / p.amax());
    }
    let l1 = bound.steps[0].l_theta[(0, 0)];
    let ok = worst < 1e-8 && (l1 - 0.50495).abs() < 5e-6 && kalman.len() == 100;
    judged(ok, format!("max rel err {worst:.2e} over t=1..100, L1={l1:.6}, {:.2}s", start.elapsed().as_secs_f64()))
}

fn flatten(h: &HBlocks) -> Vec<f64> {
    [&h.h11, &h.h12, &h.h13, &h.h22, &h.h23, &h.h33].iter().flat_map(|m| m.iter().copied()).collect()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let model = make_benchmark_model();
    let m = 10_000;
    let u = input_path(&prbs(), 20, 5, 0);
    let key = NoiseKey::new(5, 0);
    let ens = simulate_paths(&model, &u, &sample_prior_keyed(&model, m, key), key).unwrap();
    let mut z_max: f64 = 0.0;
    for t in [0, 9, 19] {
        let fd: Vec<Vec<f64>> = fd_h_block_samples(&model, &ens, t, 1e-4).unwrap().iter().map(flatten).collect();
        let analytic: Vec<Vec<f64>> = ens
            .paths
            .iter()
            .map(|p| {
                let one = SampleEnsemble { inputs: ens.inputs.clone(), paths: vec![p.clone()] };
                flatten(&estimate_h_blocks(&model, &one, t).unwrap())
            })
            .collect();
        let pooled = flatten(&estimate_h_blocks(&model, &ens, t).unwrap());
        let diffs: Vec<Vec<f64>> =
            fd.iter().zip(&analytic).map(|(f, a)| f.iter().zip(a).map(|(x, y)| x - y).collect()).collect();
        let n = m as f64;
        for k in 0..pooled.len() {
            let fd_mean = fd.iter().map(|h| h[k]).sum::<f64>() / n;
            let mean = diffs.iter().map(|d| d[k]).sum::<f64>() / n;
            let sd = (diffs.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let se = sd / n.sqrt() + 1e-6;
            z_max = z_max.max((fd_mean - pooled[k]).abs() / se);
        }
    }
    judged(z_max <= 5.0, format!("max |z|={z_max:.2} over 3 times x 81 entries at M=1e4, {:.0}s", start.elapsed().as_secs_f64()))
}

fn criterion_6() -> Outcome {
    use rand::Rng;
    let start = Instant::now();
    let space = build_input_space(&[-0.8], &[0.8], 2, 0).unwrap();
    let base = DesignConfig {
        model: make_benchmark_model(),
        space,
        template: PolicyTemplate::Case3,
        horizon: 2,
        samples: 50,
        input_paths: 100_000,
        criterion: BoundCriterion::Trace,
        seed: 6,
        optimizer: Default::default(),
        threads: None,
    };
    let table = SequenceTable::build(&base).unwrap();
    let mut rng = NoiseKey::new(6, 0).stream(pcrlb_design::noise::StreamKind::InputPath, 1);
    let mut z_max: f64 = 0.0;
    for _ in 0..5 {
        let phi: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
        let mc = evaluate_objective_detailed(&base, &phi).unwrap();
        let exact = table.objective(&policy_from_template(PolicyTemplate::Case3, &base.space, &phi).unwrap());
        z_max = z_max.max((mc.value - exact).abs() / mc.standard_error());
    }
    judged(z_max <= 5.0, format!("max |z|={z_max:.2} over 5 random phi, M_u=1e5, {:.0}s", start.elapsed().as_secs_f64()))
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn log_log_slope(xs: &[usize], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| (*x as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let model = make_benchmark_model();
    let horizon = 50;

    // M sweep: one frozen input path, seeds vary the sample tables only.
    let u = input_path(&prbs(), horizon, 7, 0);
    let ms = [25, 100, 400, 1600, 6400];
    let sd_m: Vec<f64> = ms
        .iter()
        .map(|&m| {
            let v: Vec<f64> = (0..100u64)
                .map(|s| bound_trajectory(&model, &u, m, BoundCriterion::Trace, NoiseKey::new(1000 + s, 0)).unwrap().phi_sum())
                .collect();
            std_dev(&v)
        })
        .collect();
    let slope_m = log_log_slope(&ms, &sd_m);

    // M_u sweep: PRBS objective at fixed M, seeds vary inputs and tables.
    let mus = [4, 16, 64, 256, 1024];
    let sd_mu: Vec<f64> = mus
        .iter()
        .map(|&mu| {
            let v: Vec<f64> = (0..60u64)
                .map(|s| {
                    let c = DesignConfig {
                        model: model.clone(),
                        space: build_input_space(&[-0.8], &[0.8], 2, 0).unwrap(),
                        template: PolicyTemplate::Case4,
                        horizon,
                        samples: 50,
                        input_paths: mu,
                        criterion: BoundCriterion::Trace,
                        seed: 2000 + s,
                        optimizer: Default::default(),
                        threads: None,
                    };
                    evaluate_objective_detailed(&c, &[]).unwrap().value
                })
                .collect();
            std_dev(&v)
        })
        .collect();
    let slope_mu = log_log_slope(&mus, &sd_mu);
    let ok = (slope_m + 0.5).abs() <= 0.15 && (slope_mu + 0.5).abs() <= 0.15;
    judged(
        ok,
        format!(
            "slope vs M {slope_m:.3} (sd {}), slope vs M_u {slope_mu:.3} (sd {}), {:.0}s",
            fmt(&sd_m),
            fmt(&sd_mu),
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Within 5 binomial standard deviations; impossible events must not occur.
fn count_ok(count: u64, n: u64, p: f64) -> bool {
    if p == 0.0 {
        return count == 0;
    }
    let expect = n as f64 * p;
    (count as f64 - expect).abs() <= 5.0 * (expect * (1.0 - p)).sqrt()
}

fn chain_states(policy: &MarkovInputPolicy, u: &InputSequence) -> Vec<usize> {
    let sp = policy.space();
    let idx: Vec<usize> = u.iter().map(|v| sp.encode(v).unwrap()).collect();
    idx.windows(sp.memory() + 1).map(|w| sp.state_of(w)).collect()
}

fn check_chain(policy: &MarkovInputPolicy, seed: u64) -> Result<(), String> {
    let sp = policy.space();
    let s = sp.chain_states();
    let k = sp.memory();
    let steps: u64 = 1_000_000;
    let mut rng = NoiseKey::new(seed, 0).stream(pcrlb_design::noise::StreamKind::InputPath, 9);

    let mut first = vec![0u64; s];
    for _ in 0..steps {
        let u = sample_sequence(policy, k + 1, &mut rng).unwrap();
        first[chain_states(policy, &u)[0]] += 1;
    }
    for (i, c) in first.iter().enumerate() {
        if !count_ok(*c, steps, policy.gamma()[i]) {
            return Err(format!("initial state {i}: {c} of {steps} vs p={}", policy.gamma()[i]));
        }
    }

    let u = sample_sequence(policy, steps as usize + k + 1, &mut rng).unwrap();
    let states = chain_states(policy, &u);
    let mut counts = vec![vec![0u64; s]; s];
    for w in states.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    for (i, row) in counts.iter().enumerate() {
        let n: u64 = row.iter().sum();
        for (j, c) in row.iter().enumerate() {
            if !count_ok(*c, n, policy.pi()[i][j]) {
                return Err(format!("transition {i}->{j}: {c} of {n} vs p={}", policy.pi()[i][j]));
            }
        }
    }
    Ok(())
}

fn normalization_gap(policy: &MarkovInputPolicy) -> f64 {
    let sp = policy.space();
    let r = sp.grid_size();
    let mut worst: f64 = 0.0;
    for n in sp.memory() + 1..=8 {
        let mut idx = vec![0usize; n];
        let mut total = 0.0;
        loop {
            let values = idx.iter().flat_map(|&g| sp.point(g)).collect();
            let u = InputSequence::new(sp.dim(), values).unwrap();
            total += sequence_log_prob(policy, &u).unwrap().exp();
            let Some(pos) = idx.iter().rposition(|&g| g + 1 < r) else { break };
            idx[pos] += 1;
            idx[pos + 1..].iter_mut().for_each(|g| *g = 0);
        }
        worst = worst.max((total - 1.0).abs());
    }
    worst
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let binary = build_input_space(&[-0.8], &[0.8], 2, 0).unwrap();
    let mut policies: Vec<(String, MarkovInputPolicy)> = [
        (PolicyTemplate::Case1, vec![0.62]),
        (PolicyTemplate::Case2, vec![0.63, 0.92]),
        (PolicyTemplate::Case3, vec![0.34, 0.61, 0.72]),
        (PolicyTemplate::Case4, vec![]),
    ]
    .into_iter()
    .map(|(t, phi)| (t.to_string(), policy_from_template(t, &binary, &phi).unwrap()))
    .collect();
    let ternary = build_input_space(&[-1.0], &[1.0], 3, 1).unwrap();
    let rows = (0..ternary.chain_states())
        .map(|i| {
            let w = [1.0 + i as f64, 2.0, 0.5 + (i % 3) as f64];
            let total: f64 = w.iter().sum();
            w.iter().map(|v| v / total).collect()
        })
        .collect();
    let gamma = (1..=ternary.chain_states()).map(|i| i as f64 / 45.0).collect();
    policies.push(("memory1".into(), MarkovInputPolicy::from_next_input_rows(ternary, gamma, rows).unwrap()));

    let mut failures = Vec::new();
    let mut worst_norm: f64 = 0.0;
    for (seed, (name, p)) in policies.iter().enumerate() {
        if let Err(e) = check_chain(p, 80 + seed as u64) {
            failures.push(format!("{name}: {e}"));
        }
        worst_norm = worst_norm.max(normalization_gap(p));
    }
    if worst_norm > 1e-10 {
        failures.push(format!("normalization gap {worst_norm:.1e}"));
    }
    let detail = if failures.is_empty() {
        format!("5 policies, 1e6 steps each, normalization gap {worst_norm:.1e} for N<=8, {:.0}s", start.elapsed().as_secs_f64())
    } else {
        failures.join("; ")
    };
    judged(failures.is_empty(), detail)
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

/// The `pcrlb-design` binary built by the same cargo invocation, two levels
/// above this test executable (`target/<profile>/deps/`).
fn cli_binary() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let path = exe.parent()?.parent()?.join(format!("pcrlb-design{}", std::env::consts::EXE_SUFFIX));
    path.is_file().then_some(path)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let Some(binary) = cli_binary() else {
        return judged(false, "pcrlb-design binary not found next to the test executable; run through `cargo test --workspace`".into());
    };
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(
        &config,
        "model = \"benchmark\"\ncase = [\"Case1\", \"Case4\"]\nN = 8\nM = 30\nM_u = 6\nruns = 4\nseed = 9\n\
         [optimizer]\nmax_iterations = 4\nrestarts = [0.5]\n[smc]\nparticles = 200\n[params]\nCase1 = [0.62]\n",
    )
    .unwrap();
    let mut problems = Vec::new();
    let mut files = 0;
    for sub in ["design", "bound", "validate", "oracle"] {
        let mut outputs = Vec::new();
        for (run, threads) in ["1", "2", "2"].iter().enumerate() {
            let out = tmp.path().join(format!("{sub}-{run}"));
            let status = std::process::Command::new(&binary)
                .args([sub, "--config"])
                .arg(&config)
                .arg("--output-dir")
                .arg(&out)
                .args(["--threads", threads])
                .env("RUST_LOG", "error")
                .stdout(std::process::Stdio::null())
                .status()
                .unwrap();
            if !status.success() {
                problems.push(format!("{sub} exited with {status}"));
            }
            outputs.push(csv_files(&out));
        }
        if outputs[0].is_empty() {
            problems.push(format!("{sub} wrote no CSV files"));
        }
        files += outputs[0].len();
        if outputs.iter().any(|o| o != &outputs[0]) {
            problems.push(format!("{sub} outputs differ between reruns or thread counts"));
        }
    }
    let detail = if problems.is_empty() {
        format!("{files} CSV files identical across 3 runs (threads 1, 2, 2), {:.0}s", start.elapsed().as_secs_f64())
    } else {
        problems.join("; ")
    };
    judged(problems.is_empty(), detail)
}

fn main() -> ExitCode {
    let scale = match std::env::var("PCRLB_ACCEPTANCE_SCALE").as_deref() {
        Ok("paper") => Scale::Paper,
        _ => Scale::Desk,
    };
    let only: Option<Vec<usize>> = std::env::var("PCRLB_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().map_or(true, |o| o.contains(&c));
    println!("acceptance suite, {} scale", if scale == Scale::Paper { "paper" } else { "desk" });

    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    if (1..=3).any(wanted) {
        let d = designs(scale);
        if wanted(1) {
            outcomes.push((1, "objective values and case ordering", criterion_1(scale, &d)));
        }
        if wanted(2) {
            outcomes.push((2, "optimal policy parameters", criterion_2(scale, &d)));
        }
        if wanted(3) {
            outcomes.push((3, "bound-MSE dominance", criterion_3(scale, &d)));
        }
    }
    let rest: [(usize, &str, fn() -> Outcome); 6] = [
        (4, "linear model vs Kalman filter", criterion_4),
        (5, "H-blocks vs finite-difference Hessians", criterion_5),
        (6, "objective vs exact enumeration", criterion_6),
        (7, "Monte-Carlo convergence rate", criterion_7),
        (8, "chain statistics and normalization", criterion_8),
        (9, "byte-identical outputs", criterion_9),
    ];
    for (c, name, f) in rest {
        if wanted(c) {
            let o = f();
            println!("  criterion {c} done: {}", o.detail);
            outcomes.push((c, name, o));
        }
    }

    let mut failed = 0;
    for (c, name, o) in &outcomes {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::NotJudged => "NOT JUDGED AT DESK SCALE",
        };
        println!("criterion {c} ({name}): {tag}: {}", o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
