// Acceptance runs, one verdict line per criterion.
//
// Every criterion is driven through the spec runner so the outputs land in
// hashed directories; the determinism criterion reruns reduced versions of
// all of them at two thread counts and compares bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nelson_core::io::{parse_spec_with, read_columnar, run_experiment, verify_trace, RunOutput};
use serde_json::Value;

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Pass,
    Fail,
    /// An open claim measured and reported rather than asserted.
    Finding,
}

impl Outcome {
    fn label(self) -> &'static str {
        match self {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Finding => "FINDING",
        }
    }
}

struct Line {
    n: usize,
    title: &'static str,
    outcome: Outcome,
    detail: String,
}

fn pass_if(ok: bool) -> Outcome {
    if ok {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

fn finding_unless(ok: bool) -> Outcome {
    if ok {
        Outcome::Pass
    } else {
        Outcome::Finding
    }
}

struct Ctx {
    root: PathBuf,
    threads: Option<usize>,
}

impl Ctx {
    fn run(&self, kind: &str, sets: &[&str]) -> RunOutput {
        let mut all: Vec<String> = vec![format!("output_dir={:?}", self.root.display().to_string())];
        if let Some(t) = self.threads {
            all.push(format!("threads={t}"));
        }
        all.extend(sets.iter().map(|s| s.to_string()));
        let spec = parse_spec_with(&format!("kind = \"{kind}\"\n"), &all)
            .unwrap_or_else(|e| panic!("{kind} spec {sets:?}: {e}"));
        let t = Instant::now();
        let out = run_experiment(&spec).unwrap_or_else(|e| panic!("{kind} run {sets:?}: {e}"));
        eprintln!("  [{kind} {sets:?}: {:.0} s]", t.elapsed().as_secs_f64());
        out
    }
}

fn f(v: &Value, path: &str) -> f64 {
    let mut cur = v;
    for p in path.split('.') {
        cur = match p.parse::<usize>() {
            Ok(i) => &cur[i],
            Err(_) => &cur[p],
        };
    }
    // infinities and NaN serialize as null
    cur.as_f64().unwrap_or(f64::NAN)
}

fn b(v: &Value, path: &str) -> bool {
    let mut cur = v;
    for p in path.split('.') {
        cur = &cur[p];
    }
    cur.as_bool().unwrap_or_else(|| panic!("missing boolean {path}"))
}

fn ou_law(c: &Ctx) -> Line {
    let r = c.run("ou", &["betas=[5.0, 20.0, 100.0]"]);
    let res = &r.summary["result"];
    let mut ok = true;
    let mut parts = Vec::new();
    for rep in res["reports"].as_array().unwrap() {
        let (beta, var, rate, neff) = (f(rep, "beta"), f(rep, "variance"), f(rep, "decay_rate"), f(rep, "effective_samples"));
        let ve = var / (beta / 2.0) - 1.0;
        let re = rate / beta - 1.0;
        ok &= ve.abs() <= 0.05 && re.abs() <= 0.10 && neff >= 1e6;
        parts.push(format!("beta={beta}: var {var:.4} ({:+.2}%), rate {rate:.3} ({:+.2}%), n_eff {neff:.2e}", 100.0 * ve, 100.0 * re));
    }
    let note = res["note"].as_str().unwrap_or("");
    ok &= note.contains("beta/2") && !note.is_empty();
    Line {
        n: 1,
        title: "OU stationary law",
        outcome: pass_if(ok),
        detail: format!("{}; summary note: {note}", parts.join("; ")),
    }
}

struct White {
    ground: Value,
    out: Line,
}

fn first_law(c: &Ctx) -> White {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut ground = Value::Null;
    for state in ["ho_ground", "ho_coherent", "free_gaussian"] {
        let r = c.run("simulate", &[&format!("state=\"{state}\""), "n_traj=100000", "checkpoints=5"]);
        let rep = r.summary["result"]["report"].clone();
        let cps = rep["checkpoints"].as_array().unwrap();
        ok &= cps.len() == 5;
        let max_l1 = cps.iter().map(|k| f(k, "distance_l1")).fold(0.0, f64::max);
        ok &= max_l1 < 0.03;
        parts.push(format!("{state} max L1 {max_l1:.4}"));
        if state == "free_gaussian" {
            // sigma0 = 1, m = hbar = 1
            let mut worst: f64 = 0.0;
            for k in cps {
                let t = f(k, "t");
                let want = 1.0 + (t / 2.0).powi(2);
                worst = worst.max((f(k, "variance") / want - 1.0).abs());
            }
            ok &= worst <= 0.03;
            parts.push(format!("free variance worst rel. error {:.2}%", 100.0 * worst));
        }
        if state == "ho_ground" {
            ground = rep;
        }
    }
    White {
        ground,
        out: Line {
            n: 2,
            title: "Nelson first law vs oracle marginals",
            outcome: pass_if(ok),
            detail: parts.join("; "),
        },
    }
}

fn newton_nelson(white: &Value) -> Line {
    let a = &white["analysis"];
    let (r, se) = (f(a, "residual_norm"), f(a, "residual_pooled_se"));
    Line {
        n: 3,
        title: "Newton-Nelson law, white noise, ho_ground",
        outcome: pass_if(r < 3.0 * se),
        detail: format!("residual norm {r:.4}, 3 x pooled se = {:.4}", 3.0 * se),
    }
}

fn violation(c: &Ctx, white: &Value) -> (Line, Value) {
    let r = c.run("simulate", &["state=\"ho_ground\"", "process=\"colored_smoothing\"", "betas=[100.0]", "n_traj=100000"]);
    let col = r.summary["result"]["report"]["analysis"].clone();
    let (cs, cse) = (f(&col, "acceleration_slope"), f(&col, "acceleration_slope_se"));
    let (ws, wse) = (f(&white["analysis"], "acceleration_slope"), f(&white["analysis"], "acceleration_slope_se"));
    let colored_ok = (cs - 1.0).abs() <= 0.15;
    let white_ok = (ws + 1.0).abs() <= 0.15;
    let (rn, qf) = (f(&col, "residual_norm"), f(&col, "quantum_force_norm"));
    let line = Line {
        n: 4,
        title: "colored-smoothing violation of the second law",
        outcome: pass_if(colored_ok && white_ok),
        detail: format!(
            "colored beta=100 slope {cs:.3} +- {cse:.3} (target +1 +- 15%: {}); white slope {ws:.3} +- {wse:.3} (target -1 +- 15%: {}); colored residual norm {rn:.3} vs quantum force norm {qf:.3} (ratio {:.2})",
            if colored_ok { "ok" } else { "no" },
            if white_ok { "ok" } else { "no" },
            rn / qf
        ),
    };
    (line, col)
}

fn phase_space_trend(c: &Ctx, colored: &Value) -> Line {
    let r = c.run("beta_sweep", &["state=\"ho_ground\"", "process=\"phase_space\"", "betas=[10.0, 30.0, 100.0]", "n_traj=100000"]);
    let res = &r.summary["result"];
    let rows = res["report"]["rows"].as_array().unwrap();
    let dist = b(res, "distance_non_increasing");
    let mism = b(res, "drift_mismatch_non_increasing");
    let last = rows.last().unwrap();
    let ps = f(last, "residual_norm");
    let cr = f(colored, "residual_norm");
    let ratio = cr / ps;
    let cols: Vec<String> = rows
        .iter()
        .map(|w| {
            format!(
                "beta={}: L1 {:.4}+-{:.4}, mismatch {:.4}+-{:.4}, residual {:.3}",
                f(w, "beta"),
                f(w, "distance_l1"),
                f(w, "distance_l1_se"),
                f(w, "drift_mismatch"),
                f(w, "drift_mismatch_se"),
                f(w, "residual_norm")
            )
        })
        .collect();
    Line {
        n: 5,
        title: "phase-space beta trend",
        outcome: finding_unless(dist && mism && ratio >= 5.0),
        detail: format!(
            "{}; distance non-increasing: {dist}; mismatch non-increasing: {mism}; colored/phase residual at beta=100 = {cr:.3}/{ps:.3} = {ratio:.2} (needs >= 5)",
            cols.join("; ")
        ),
    }
}

fn velocity_profiles(c: &Ctx) -> Line {
    let r = c.run("velocity_profiles", &["state=\"ho_ground\"", "betas=[100.0]", "velocity.spread=0.5", "n_traj=100000"]);
    let res = &r.summary["result"];
    let cmp = &res["comparisons"][0];
    let within = b(res, "within_error");
    Line {
        n: 6,
        title: "initial-velocity profile insensitivity",
        outcome: finding_unless(within),
        detail: format!(
            "means {:.4}+-{:.4} vs {:.4}+-{:.4}; variances {:.4}+-{:.4} vs {:.4}+-{:.4}; KS p {:.3}; within 2x combined error: {within}",
            f(cmp, "mean.0"),
            f(cmp, "mean_se.0"),
            f(cmp, "mean.1"),
            f(cmp, "mean_se.1"),
            f(cmp, "variance.0"),
            f(cmp, "variance_se.0"),
            f(cmp, "variance.1"),
            f(cmp, "variance_se.1"),
            f(cmp, "ks_p"),
        ),
    }
}

fn two_time(c: &Ctx) -> Line {
    let t = Instant::now();
    let r = c.run("two_time", &["measurement.t1=0.5", "measurement.t2=2.0", "measurement.collapse=true"]);
    let secs = t.elapsed().as_secs_f64();
    let rep = &r.summary["result"]["report"];
    let (on, off) = (f(rep, "on_sigmas"), f(rep, "off_sigmas"));
    let eq = b(rep, "equal_time_agree");
    let lin = b(rep, "linear_control_agree");
    let ok = on <= 3.0 && off >= 5.0 && eq && lin && secs <= 900.0;
    Line {
        n: 7,
        title: "two-time measurement with collapse",
        outcome: pass_if(ok),
        detail: format!(
            "oracle {:.4}; ON {:.4}+-{:.4} ({on:.2} se); OFF {:.4}+-{:.4} ({off:.1} se); equal-time agree {eq}; linear ON~OFF {lin}; {secs:.0} s",
            f(rep, "quantum"),
            f(rep, "collapse_on.value"),
            f(rep, "collapse_on.stderr"),
            f(rep, "collapse_off.value"),
            f(rep, "collapse_off.stderr"),
        ),
    }
}

fn field(c: &Ctx) -> Line {
    let r = c.run("field", &["field.mode_counts=[8, 16, 32]"]);
    let rep = &r.summary["result"]["report"];
    let eq = b(rep, "equivalence_bit_exact");
    let dec = b(rep, "noise_ratio_decreasing");
    let var = b(rep, "variances_within_5pct");
    let ratios: Vec<String> = rep["noise"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| format!("N={}: {:.4}+-{:.4}", f(n, "n_modes"), f(n, "ratio"), f(n, "ratio_se")))
        .collect();
    let worst = rep["variances"].as_array().unwrap().iter().map(|v| f(v, "rel_error").abs()).fold(0.0, f64::max);
    Line {
        n: 8,
        title: "field mode checks",
        outcome: pass_if(eq && dec && var),
        detail: format!(
            "N=1 bit-exact {eq}; L/2 ratio {} decreasing {dec}; worst mode variance error {:.2}%",
            ratios.join(", "),
            100.0 * worst
        ),
    }
}

fn spectrum(c: &Ctx) -> Line {
    let r = c.run("spectrum", &["spectrum.k=[2.0]", "spectrum.t=1.0", "spectrum.grid_n=1024"]);
    let res = &r.summary["result"];
    let p = f(res, "spectrum.0.P");
    let err = f(res, "poisson.max_rel_error");
    let csv = read_columnar(&r.dir.join("spectrum.csv")).unwrap();
    let from_file = csv.column("P").unwrap()[0];
    let ok = (p - 16.0).abs() < 1e-12 && from_file == p && err <= 0.05;
    Line {
        n: 9,
        title: "spectrum calculators",
        outcome: pass_if(ok),
        detail: format!("P(k=2, t=1) = {p}; Poisson round trip worst band error {:.2}%", 100.0 * err),
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn determinism(root: &Path) -> Line {
    // reduced sizes of every criterion above
    let runs: [(&str, &[&str]); 10] = [
        ("ou", &["betas=[5.0, 100.0]", "ou.n_paths=40", "ou.path_steps=4000"]),
        ("simulate", &["state=\"ho_ground\"", "n_traj=4000"]),
        ("simulate", &["state=\"free_gaussian\"", "n_traj=4000"]),
        ("simulate", &["process=\"colored_smoothing\"", "betas=[100.0]", "n_traj=4000"]),
        ("beta_sweep", &["betas=[10.0, 100.0]", "n_traj=4000"]),
        ("velocity_profiles", &["n_traj=4000"]),
        ("two_time", &["n_traj=2560", "measurement.grid_n=128", "measurement.quantum_dt=1e-2"]),
        ("field", &["field.mode_counts=[4, 8]", "field.noise_traj=2000", "field.variance_traj=2000", "field.equivalence_traj=50"]),
        ("spectrum", &["spectrum.realizations=200"]),
        ("node_crossing", &["n_traj=500", "horizon=1.0"]),
    ];
    let mut same = 0;
    let mut diffs = Vec::new();
    for (kind, sets) in runs {
        let mut dirs = Vec::new();
        for th in [1usize, 4] {
            let c = Ctx {
                root: root.join(format!("threads-{th}")),
                threads: Some(th),
            };
            dirs.push(c.run(kind, sets).dir);
        }
        let (a, b) = (files(&dirs[0]), files(&dirs[1]));
        if a == b && !a.is_empty() {
            same += 1;
        } else {
            diffs.push(kind);
        }
    }
    let traced = verify_trace(root).map(|r| r.files_checked).map_err(|e| e.to_string());
    Line {
        n: 10,
        title: "determinism across thread counts",
        outcome: pass_if(diffs.is_empty() && traced.is_ok()),
        detail: format!(
            "{same}/{} runs byte-identical at 1 vs 4 threads{}; tracer: {:?}",
            runs.len(),
            if diffs.is_empty() { String::new() } else { format!(" (differ: {diffs:?})") },
            traced
        ),
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let c = Ctx {
        root: tmp.path().join("full"),
        threads: None,
    };
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut emit = |l: Line| {
        println!("criterion {:>2} [{}] {}: {}", l.n, l.outcome.label(), l.title, l.detail);
        lines.push(l.outcome);
    };
    emit(ou_law(&c));
    let white = first_law(&c);
    emit(white.out);
    emit(newton_nelson(&white.ground));
    let (l4, colored) = violation(&c, &white.ground);
    emit(l4);
    emit(phase_space_trend(&c, &colored));
    emit(velocity_profiles(&c));
    emit(two_time(&c));
    emit(field(&c));
    emit(spectrum(&c));
    emit(determinism(&tmp.path().join("determinism")));
    let fails = lines.iter().filter(|o| **o == Outcome::Fail).count();
    let findings = lines.iter().filter(|o| **o == Outcome::Finding).count();
    println!(
        "acceptance: {} pass, {findings} finding, {fails} fail ({:.0} s)",
        lines.len() - fails - findings,
        start.elapsed().as_secs_f64()
    );
    if fails == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
