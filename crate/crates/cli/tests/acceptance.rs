//! Runs every acceptance criterion in sequence and prints one PASS/FAIL
//! line per criterion. Timed criteria run alone, so this is a single test.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackcore::losses::{total_loss_value, LossConfig, MemoryBank};
use trackcore::moteval::read_mot_file;
use trackcore::msfl::{collect_crop_stack, StackKind};
use trackcore::train::CropTable;
use trackcore::verify::{bank_checks, gradient_checks, hungarian_check, metric_checks, CheckResult};
use trackcore::{clearmot, idf1, Config, SsflConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let mark = if o.passed { "PASS" } else { "FAIL" };
    let line = format!("criterion {n} {mark} {name}: {}\n", o.detail);
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn failures(checks: &[CheckResult]) -> Vec<String> {
    checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect()
}

fn trackcli(args: &[&str]) -> (bool, String, Duration) {
    let t0 = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_trackcli")).args(args).output().unwrap();
    if !o.status.success() {
        eprintln!("trackcli {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
    (o.status.success(), String::from_utf8_lossy(&o.stdout).into_owned(), t0.elapsed())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let checks = gradient_checks();
    let secs = t0.elapsed().as_secs_f64();
    let bad = failures(&checks);
    outcome(
        checks.len() >= 30 && bad.is_empty() && secs < 60.0,
        format!("{} checks, {} failed {:?}, {secs:.1} s", checks.len(), bad.len(), bad),
    )
}

fn assignment_oracle() -> Outcome {
    let t0 = Instant::now();
    let c = hungarian_check(500, 0);
    let secs = t0.elapsed().as_secs_f64();
    outcome(c.passed && secs < 10.0, format!("{}, {secs:.2} s", c.detail))
}

fn metric_oracle() -> Outcome {
    let checks = metric_checks();
    let bad = failures(&checks);
    outcome(bad.is_empty(), format!("{} hand-worked and identity checks, failures {bad:?}", checks.len()))
}

fn bank_lifecycle() -> Outcome {
    let checks = bank_checks();
    let bad = failures(&checks);
    outcome(bad.is_empty(), format!("{} scripted sequences, failures {bad:?}", checks.len()))
}

fn oracle_end_to_end(work: &Path) -> Outcome {
    let scene = work.join("default");
    let (ok, _, _) = trackcli(&["simulate", "--out", p(&scene), "--seed", "0"]);
    if !ok {
        return outcome(false, "simulate failed");
    }
    let gt = read_mot_file(scene.join("gt.txt")).unwrap();
    let mut runs = BTreeMap::new();
    for (name, extra) in [("with", None), ("without", Some("--disable-msfl"))] {
        let out = work.join(format!("track_{name}"));
        let mut args = vec!["track", "--scenario", p(&scene), "--out", p(&out), "--oracle-embeddings"];
        args.extend(extra);
        let (ok, _, secs) = trackcli(&args);
        if !ok {
            return outcome(false, format!("track {name} MSFL failed"));
        }
        let res = read_mot_file(out.join("results.txt")).unwrap();
        runs.insert(name, (clearmot(&gt, &res, 0.5), idf1(&gt, &res, 0.5), secs.as_secs_f64()));
    }
    let (with, id_with, secs) = &runs["with"];
    let (without, _, _) = &runs["without"];
    let reduction = if without.idsw == 0 {
        0.0
    } else {
        1.0 - with.idsw as f64 / without.idsw as f64
    };
    outcome(
        with.mota >= 0.90 && *id_with >= 0.85 && without.idsw > 0 && reduction >= 0.5 && *secs < 60.0,
        format!(
            "MOTA {:.4}, IDF1 {:.4}, IDSW {} with MSFL vs {} without ({:.0}% fewer), run {secs:.1} s",
            with.mota,
            id_with,
            with.idsw,
            without.idsw,
            reduction * 100.0
        ),
    )
}

fn training_efficacy(work: &Path) -> Outcome {
    let preset = work.join("preset");
    if !trackcli(&["--preset", "training", "simulate", "--out", p(&preset)]).0 {
        return outcome(false, "simulate failed");
    }
    let t0 = Instant::now();
    let ssfl_out = work.join("ssfl");
    let msfl_out = work.join("msfl");
    let ssfl_ok = trackcli(&["train", "ssfl", "--scenario", p(&preset), "--out", p(&ssfl_out)]).0;
    // MSFL trains on fresh scenes drawn from the default scenario config.
    let msfl_ok = trackcli(&["train", "msfl", "--scenario", p(&work.join("default")), "--out", p(&msfl_out)]).0;
    let secs = t0.elapsed().as_secs_f64();
    if !(ssfl_ok && msfl_ok) {
        return outcome(false, "training failed");
    }
    let s = json(ssfl_out.join("summary.json"));
    let m = json(msfl_out.join("summary.json"));
    let ratio = s["inter_ratio"].as_f64().unwrap_or(f64::INFINITY);
    let ssfl_acc = s["heldout_accuracy"].as_f64().unwrap();
    let msfl_acc = m["heldout_accuracy"].as_f64().unwrap();
    outcome(
        s["iterations"] == 500 && m["iterations"] == 500 && ratio <= 0.2 && ssfl_acc >= 0.95 && msfl_acc >= 0.9 && secs < 600.0,
        format!(
            "SSFL L_inter {:.4} -> {:.4} ({:.1}%), held-out argmax accuracy {ssfl_acc:.4}; \
             MSFL held-out pair accuracy {msfl_acc:.4} on {} pairs; {secs:.0} s",
            s["initial_inter"].as_f64().unwrap_or(f64::NAN),
            s["final_inter"].as_f64().unwrap_or(f64::NAN),
            ratio * 100.0,
            m["heldout_pairs"]
        ),
    )
}

fn analytical_constants() -> Outcome {
    let total = total_loss_value(1.0, 2.0, 3.0, &LossConfig::default());
    let dim = SsflConfig::default().feature_dim();
    let cfg = Config::default();
    let tau = cfg.msfl.tau;
    let mut table = CropTable::for_seed(&cfg.scenario, 0, tau).unwrap();
    let split_lens = table
        .split(0, 40, 10)
        .unwrap()
        .map(|(front, rear)| (front.len(), rear.len(), front.crops.shape()[0], rear.crops.shape()[0]));
    let sparse = collect_crop_stack(&[(9, autograd::Tensor::zeros(&[2, 4, 4]))], (6, 9), StackKind::Lost).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut alpha_range = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let k = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let mut bank = MemoryBank::new();
        for id in 0..k {
            let f: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            bank.update(&f, id);
        }
        let feat: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = bank.ratio(&feat, rng.random_range(0..k)).unwrap();
        alpha_range = (alpha_range.0.min(a), alpha_range.1.max(a));
    }
    let alpha_ok = alpha_range.0 > 0.0 && alpha_range.1 <= 1.0;
    outcome(
        total == 4.4 && dim == 2048 && tau == 4 && split_lens == Some((4, 4, 4, 4)) && sparse.len() == 4 && alpha_ok,
        format!(
            "total_loss(1,2,3) = {total}, feature length {dim}, stacks {split_lens:?} and {} entries, \
             alpha over 1e4 states in [{:.3e}, {}]",
            sparse.len(),
            alpha_range.0,
            alpha_range.1
        ),
    )
}

/// Every file of `a` and `b` must match byte for byte; manifests are
/// compared without their wall-clock field.
fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let names = |d: &Path| {
        let mut v: Vec<String> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    let files = names(a);
    if files != names(b) {
        return Err(format!("file sets differ: {files:?} vs {:?}", names(b)));
    }
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        let equal = if f == "manifest.json" {
            let strip = |bytes: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
                v.as_object_mut().unwrap().remove("wall_clock_seconds");
                v
            };
            strip(&x) == strip(&y)
        } else {
            x == y
        };
        if !equal {
            return Err(format!("{f} differs"));
        }
    }
    Ok(files.len())
}

fn determinism(work: &Path) -> Outcome {
    let root = work.join("determinism");
    let scene = root.join("scene");
    let preset = root.join("preset");
    let run = |k: usize, name: &str| root.join(format!("{name}_{k}"));
    let mut compared = Vec::new();
    let mut problems = Vec::new();
    let commands: Vec<(&str, Box<dyn Fn(&Path) -> Vec<String>>)> = vec![
        ("simulate", Box::new(|o: &Path| vec!["simulate".into(), "--out".into(), p(o).into()])),
        (
            "simulate-preset",
            Box::new(|o: &Path| vec!["--preset".into(), "training".into(), "simulate".into(), "--out".into(), p(o).into()]),
        ),
        (
            "train-ssfl",
            Box::new(|o: &Path| {
                let s = p(&preset).to_string();
                vec!["train".into(), "ssfl".into(), "--scenario".into(), s, "--out".into(), p(o).into(), "--iterations".into(), "5".into()]
            }),
        ),
        (
            "train-msfl",
            Box::new(|o: &Path| {
                let s = p(&preset).to_string();
                vec!["train".into(), "msfl".into(), "--scenario".into(), s, "--out".into(), p(o).into(), "--iterations".into(), "5".into()]
            }),
        ),
        (
            "track-oracle",
            Box::new(|o: &Path| {
                vec!["track".into(), "--scenario".into(), p(&scene).into(), "--out".into(), p(o).into(), "--oracle-embeddings".into()]
            }),
        ),
        (
            "track-oracle-msfl",
            Box::new(|o: &Path| {
                let ckpt = root.join("train-msfl_0/msfl.ckpt");
                vec![
                    "track".into(), "--scenario".into(), p(&preset).into(), "--out".into(), p(o).into(),
                    "--oracle-embeddings".into(), "--msfl-checkpoint".into(), p(&ckpt).into(),
                ]
            }),
        ),
        (
            "track-learned",
            Box::new(|o: &Path| {
                let ckpt = root.join("train-ssfl_0/ssfl.ckpt");
                vec!["track".into(), "--scenario".into(), p(&preset).into(), "--out".into(), p(o).into(), "--checkpoint".into(), p(&ckpt).into()]
            }),
        ),
        (
            "eval",
            Box::new(|o: &Path| {
                let gt = scene.join("gt.txt");
                let res = root.join("track-oracle_0/results.txt");
                vec!["eval".into(), "--gt".into(), p(&gt).into(), "--res".into(), p(&res).into(), "--out".into(), p(o).into()]
            }),
        ),
        ("verify", Box::new(|o: &Path| vec!["verify".into(), "--out".into(), p(o).into()])),
    ];
    // The shared inputs come from the first simulate runs.
    let copy = |from: &Path, to: &Path| {
        std::fs::create_dir_all(to).unwrap();
        for e in std::fs::read_dir(from).unwrap() {
            let e = e.unwrap();
            std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    };
    for (name, args) in &commands {
        let mut stdouts = Vec::new();
        for k in 0..2 {
            let argv = args(&run(k, name));
            let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
            let (ok, stdout, _) = trackcli(&argv);
            if !ok {
                problems.push(format!("{name} run {k} failed"));
            }
            stdouts.push(stdout);
        }
        if *name == "simulate" {
            copy(&run(0, name), &scene);
        }
        if *name == "simulate-preset" {
            copy(&run(0, name), &preset);
        }
        // Stdout names the output directory for these commands.
        let stdout_comparable = matches!(*name, "eval" | "verify");
        if stdout_comparable && stdouts[0] != stdouts[1] {
            problems.push(format!("{name}: stdout differs"));
        }
        match same_outputs(&run(0, name), &run(1, name)) {
            Ok(n) => compared.push(format!("{name} ({n} files)")),
            Err(e) => problems.push(format!("{name}: {e}")),
        }
    }
    outcome(
        problems.is_empty(),
        format!("identical across two runs: {}; problems {problems:?}", compared.join(", ")),
    )
}

#[test]
fn acceptance_criteria() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient integrity", Box::new(gradient_integrity)),
        ("assignment oracle", Box::new(assignment_oracle)),
        ("metric oracle", Box::new(metric_oracle)),
        ("bank lifecycle", Box::new(bank_lifecycle)),
        ("oracle-embedding end-to-end", Box::new(|| oracle_end_to_end(w))),
        ("toy training efficacy", Box::new(|| training_efficacy(w))),
        ("analytical constants", Box::new(analytical_constants)),
        ("determinism", Box::new(|| determinism(w))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        report(i + 1, name, &o);
        if !o.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
