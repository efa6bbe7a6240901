//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Contract criteria (1–5, 10) reuse the check functions of the core test
//! files and make the run fail. The trend experiments (6–9) train real
//! models; their verdicts are reported but only fail the run when
//! `ACCEPTANCE_STRICT` is set, since they measure the method rather than the
//! code. Without CIFAR-10 they run on the synthetic two-tone stand-in; point
//! `FR_CIFAR_DIR` at the binary batches to run the full-size recipe instead.

#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/gradients.rs"]
mod gradients;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/spectral.rs"]
mod spectral;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/attacks.rs"]
mod attacks;
#[allow(dead_code, unused_imports)]
#[path = "../../core/tests/training.rs"]
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use frat_core::analysis::{self, SweepMode};
use frat_core::attacks::AttackConfig;
use frat_core::data::{self, CifarSplit, Dataset, SynthConfig};
use frat_core::training::{self as fit, TrainConfig};
use frat_core::{checkpoint, Architecture, ModelParams};

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    contract: bool,
}

fn run_check(
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    f: impl FnOnce() -> String,
) -> Verdict {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let took = started.elapsed();
    let (mut pass, mut detail) = match outcome {
        Ok(d) => (true, d),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, msg)
        }
    };
    if let Some(b) = budget {
        if took > b {
            pass = false;
            detail = format!("{detail}; over the {}s budget", b.as_secs());
        }
    }
    let detail = format!("{detail} ({:.1}s)", took.as_secs_f64());
    Verdict { id, name, pass, detail, contract: true }
}

fn report(v: &Verdict) {
    println!(
        "criterion {:>2} {} {}: {}",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.name,
        v.detail
    );
}

// ---- trend experiments ----

const PROXY_LABEL: &str = "synthetic two-tone stand-in, 270 train / 30 val / 100 test";
const CIFAR_LABEL: &str = "CIFAR-10, 4500 train / 500 val / 1000 test";

struct Recipe {
    train: Dataset,
    val: Dataset,
    test: Dataset,
    epochs: usize,
    batch_size: usize,
    lr0: f64,
}

fn proxy_recipe(seed: u64) -> Recipe {
    let cfg = SynthConfig::two_tone();
    let pool = data::synth_dataset_with(30, 10, seed, &cfg).unwrap();
    let (train, val) = data::split(&pool, 0.9, seed).unwrap();
    let test = data::synth_dataset_with(10, 10, seed ^ 0x7e57_0000, &cfg).unwrap();
    Recipe {
        train,
        val,
        test,
        epochs: 20,
        batch_size: 16,
        lr0: 0.005,
    }
}

fn cifar_recipe(dir: &Path, seed: u64) -> Recipe {
    let all = data::load_cifar10(dir, CifarSplit::Train).unwrap();
    let pool = data::take_subset(&all, 500, seed).unwrap();
    let (train, val) = data::split(&pool, 0.9, seed).unwrap();
    let test_all = data::load_cifar10(dir, CifarSplit::Test).unwrap();
    let test = data::take_subset(&test_all, 100, seed).unwrap();
    Recipe {
        train,
        val,
        test,
        epochs: 20,
        batch_size: 128,
        lr0: 0.1,
    }
}

struct Trained {
    params: ModelParams,
    seconds: f64,
}

fn train(r: &Recipe, seed: u64, adversarial: bool, lambda: f64, workers: usize) -> Trained {
    let cfg = TrainConfig {
        arch: Architecture::CIFAR,
        batch_size: r.batch_size,
        lr0: r.lr0,
        lambda,
        train_attack: adversarial.then(|| AttackConfig::pgd(5)),
        eval_attack: AttackConfig::pgd(5),
        seed,
        workers,
        ..TrainConfig::with_epochs(r.epochs)
    };
    let started = Instant::now();
    let out = fit::train(&cfg, &r.train, &r.val).unwrap();
    Trained {
        params: out.params,
        seconds: started.elapsed().as_secs_f64(),
    }
}

struct SeedResult {
    seed: u64,
    at_clean: f64,
    at_rob: f64,
    fr_clean: f64,
    fr_rob: f64,
    nat_sweep: Vec<f64>,
    at_sweep: Vec<f64>,
    nat_tv: f64,
    at_tv: f64,
    low_fraction: f64,
    max_run_seconds: f64,
}

const BANDS: [usize; 4] = [32, 24, 16, 8];

fn experiment(r: &Recipe, seed: u64, workers: usize) -> SeedResult {
    let nat = train(r, seed, false, 0.0, workers);
    let at = train(r, seed, true, 0.0, workers);
    let fr = train(r, seed, true, 0.1, workers);
    let pgd20 = AttackConfig::pgd(20);
    let acc = |p: &ModelParams, a: Option<&AttackConfig>| {
        fit::evaluate(p, &r.test, a, seed, workers).unwrap().accuracy
    };
    let sweep = |p: &ModelParams| -> Vec<f64> {
        analysis::lpf_sweep(p, &r.test, &BANDS, &pgd20, seed, SweepMode::AttackThenFilter, workers)
            .unwrap()
            .iter()
            .map(|row| row.clean_acc)
            .collect()
    };
    let tv = |p: &ModelParams| {
        analysis::smoothness_report(p)
            .unwrap()
            .layer("conv1")
            .unwrap()
            .mean
    };
    let n = r.test.len().min(100);
    let mut low = 0.0;
    for k in 0..n {
        let i = k * r.test.len() / n;
        let adv = fit::attacked_input(&at.params, &r.test, i, Some(&pgd20), seed).unwrap();
        let map = analysis::spectrum_diff(&r.test.images[i], &adv).unwrap();
        low += analysis::low_frequency_energy_fraction(&map).unwrap();
    }
    SeedResult {
        seed,
        at_clean: acc(&at.params, None),
        at_rob: acc(&at.params, Some(&pgd20)),
        fr_clean: acc(&fr.params, None),
        fr_rob: acc(&fr.params, Some(&pgd20)),
        nat_sweep: sweep(&nat.params),
        at_sweep: sweep(&at.params),
        nat_tv: tv(&nat.params),
        at_tv: tv(&at.params),
        low_fraction: low / n as f64,
        max_run_seconds: nat.seconds.max(at.seconds).max(fr.seconds),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn trend_verdicts(results: &[SeedResult], label: &str) -> Vec<Verdict> {
    let majority = |ok: usize| 2 * ok > results.len();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    let slowest = results.iter().map(|s| s.max_run_seconds).fold(0.0, f64::max);

    let at_rob = median(results.iter().map(|s| s.at_rob).collect());
    let fr_rob = median(results.iter().map(|s| s.fr_rob).collect());
    let at_gap = median(results.iter().map(|s| s.at_clean - s.at_rob).collect());
    let fr_gap = median(results.iter().map(|s| s.fr_clean - s.fr_rob).collect());
    let per_seed: Vec<String> = results
        .iter()
        .map(|s| {
            format!(
                "seed {}: AT {:.2}/{:.2}, AT-FR {:.2}/{:.2}",
                s.seed, s.at_clean, s.at_rob, s.fr_clean, s.fr_rob
            )
        })
        .collect();
    let v6 = Verdict {
        id: 6,
        name: "FR efficacy",
        pass: fr_rob >= at_rob && fr_gap < at_gap && slowest < 1800.0,
        detail: format!(
            "{label}; median PGD-20 acc lambda=0.1 {fr_rob:.3} vs lambda=0 {at_rob:.3}, \
             median clean-robust gap {fr_gap:.3} vs {at_gap:.3}; clean/robust {}; slowest run {slowest:.0}s",
            per_seed.join(", ")
        ),
        contract: false,
    };

    let mut ok7 = 0;
    let mut d7 = Vec::new();
    for s in results {
        let monotone = s.nat_sweep.windows(2).all(|w| w[1] < w[0]);
        let nat_drop = s.nat_sweep[0] - s.nat_sweep[2];
        let at_drop = s.at_sweep[0] - s.at_sweep[2];
        let ok = monotone && at_drop < nat_drop;
        ok7 += ok as usize;
        d7.push(format!(
            "seed {} natural {} robust {} {}",
            s.seed,
            fmt(&s.nat_sweep),
            fmt(&s.at_sweep),
            if ok { "ok" } else { "no" }
        ));
    }
    let v7 = Verdict {
        id: 7,
        name: "LPF sweep trend",
        pass: majority(ok7),
        detail: format!("{ok7}/{} seeds; clean acc at bands 32/24/16/8: {}", results.len(), d7.join("; ")),
        contract: false,
    };

    let ok8 = results.iter().filter(|s| s.at_tv <= s.nat_tv).count();
    let v8 = Verdict {
        id: 8,
        name: "kernel smoothness",
        pass: majority(ok8),
        detail: format!(
            "{ok8}/{} seeds; conv1 mean TV robust vs natural: {}",
            results.len(),
            results
                .iter()
                .map(|s| format!("{:.4} vs {:.4}", s.at_tv, s.nat_tv))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        contract: false,
    };

    let first = &results[0];
    let v9 = Verdict {
        id: 9,
        name: "perturbation spectrum",
        pass: first.low_fraction > 0.25,
        detail: format!(
            "low-frequency energy fraction {:.3} over 100 pairs of seed {} (other seeds {}); uniform baseline 0.25",
            first.low_fraction,
            first.seed,
            results[1..]
                .iter()
                .map(|s| format!("{:.3}", s.low_fraction))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        contract: false,
    };
    vec![v6, v7, v8, v9]
}

// ---- end-to-end determinism ----

fn frat(args: &[&str], out: &Path) {
    let o = Command::new(env!("CARGO_BIN_EXE_frat"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("FR_OUT_DIR")
        .output()
        .expect("spawning frat");
    assert!(
        o.status.success(),
        "frat {args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn cli_determinism() -> String {
    let data = ["--synth", "--train-per-class", "4", "--test-per-class", "3"];
    let train: Vec<&str> = ["train", "--epochs", "2", "--batch-size", "8", "--train-steps", "2", "--eval-steps", "2", "--seed", "7"]
        .into_iter()
        .chain(data)
        .collect();
    let first = tempfile::tempdir().unwrap();
    frat(&train, first.path());
    let ckpt = first.path().join("final.ckpt");
    let ck = ckpt.to_str().unwrap();
    let commands: Vec<Vec<&str>> = vec![
        train.clone(),
        ["eval", "--ckpt", ck, "--attack", "cw", "--steps", "3", "--seed", "7"].into_iter().chain(data).collect(),
        ["lpf-sweep", "--ckpt", ck, "--steps", "3", "--seed", "7"].into_iter().chain(data).collect(),
        ["spectra", "--ckpt", ck, "--steps", "3", "--count", "6", "--seed", "7"].into_iter().chain(data).collect(),
        ["kernels", "--ckpt", ck, "--seed", "7"].to_vec(),
    ];
    let mut compared = 0;
    for args in &commands {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut args = args.clone();
        let csv_a = a.path().join("eval.csv");
        let csv_b = b.path().join("eval.csv");
        let (sa, sb) = (csv_a.to_string_lossy().into_owned(), csv_b.to_string_lossy().into_owned());
        let is_eval = args[0] == "eval";
        let mut args_b = args.clone();
        if is_eval {
            args.extend(["--csv", &sa]);
            args_b.extend(["--csv", &sb]);
        }
        frat(&args, a.path());
        frat(&args_b, b.path());
        let (fa, fb) = (files(a.path()), files(b.path()));
        assert!(!fa.is_empty(), "{} wrote nothing", args[0]);
        assert_eq!(fa.len(), fb.len(), "{}: file lists differ", args[0]);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.strip_prefix(a.path()).unwrap(), y.strip_prefix(b.path()).unwrap());
            assert!(
                std::fs::read(x).unwrap() == std::fs::read(y).unwrap(),
                "{}: {} differs between runs",
                args[0],
                x.display()
            );
            compared += 1;
        }
    }
    // A checkpoint written by the run must also load back unchanged.
    let reloaded = checkpoint::load(&ckpt).unwrap();
    assert_eq!(checkpoint::to_bytes(&reloaded), std::fs::read(&ckpt).unwrap());
    format!("5 subcommands run twice, {compared} output files byte-identical")
}

fn main() {
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let secs = Duration::from_secs;
    let mut verdicts = Vec::new();

    let v = run_check(1, "gradient integrity", Some(secs(60)), || {
        gradients::conv2d_input_and_params_check();
        gradients::relu_away_from_zero_check();
        gradients::maxpool_away_from_ties_check();
        gradients::dense_input_and_params_check();
        gradients::cross_entropy_logits_check();
        gradients::dft_adjoint_composition_check();
        gradients::fr_loss_both_arguments_check();
        gradients::full_model_parameters_and_image_check();
        gradients::frequency_regularized_objective_with_fixed_adversary_check();
        "conv, relu, maxpool, dense, CE, DFT adjoint, FR loss, full model and FR objective \
         within 1e-4 of central differences (h = 1e-5) over 5 seeds"
            .into()
    });
    report(&v);
    verdicts.push(v);

    let v = run_check(2, "spectral oracle", Some(secs(60)), || {
        spectral::dft1d_matches_oracle_for_every_size_up_to_64_check();
        spectral::fft2d_matches_oracle_for_every_size_up_to_64_check();
        spectral::full_bandwidth_is_identity_check();
        spectral::transform_identities_check(200);
        "dft1d and fft2d within 1e-9 of naive DFTs for n = 1..=64; Parseval, linearity, \
         full-band identity and idempotence on 200 random inputs"
            .into()
    });
    report(&v);
    verdicts.push(v);

    let v = run_check(3, "attack contracts", Some(secs(120)), || {
        attacks::thousand_random_trials_stay_in_ball_and_box_check();
        attacks::fgsm_equals_one_step_pgd_bitwise_check();
        attacks::zero_epsilon_is_identity_check();
        "1000 random FGSM/PGD/CW trials inside ball (eps + 1e-12) and box; FGSM = 1-step PGD bitwise; eps = 0 is identity"
            .into()
    });
    report(&v);
    verdicts.push(v);

    let v = run_check(4, "SWA exactness", None, || {
        training::swa_is_the_arithmetic_mean_of_any_absorb_sequence_check();
        "running average equals sum-then-divide to 1e-12 for every length 1..=50".into()
    });
    report(&v);
    verdicts.push(v);

    let v = run_check(5, "lambda = 0 reduction", None, || {
        training::zero_lambda_training_is_plain_adversarial_training_check();
        "2-epoch synthetic run bit-identical to a hand-written plain AT loop".into()
    });
    report(&v);
    verdicts.push(v);

    let cifar = std::env::var_os("FR_CIFAR_DIR").map(PathBuf::from);
    let started = Instant::now();
    let trend = catch_unwind(AssertUnwindSafe(|| {
        let results: Vec<SeedResult> = (0..3u64)
            .map(|seed| {
                let r = match &cifar {
                    Some(dir) => cifar_recipe(dir, seed),
                    None => proxy_recipe(seed),
                };
                let res = experiment(&r, seed, workers);
                eprintln!("  trend seed {seed} done after {:.0}s", started.elapsed().as_secs_f64());
                res
            })
            .collect();
        let label = if cifar.is_some() { CIFAR_LABEL } else { PROXY_LABEL };
        trend_verdicts(&results, label)
    }));
    match trend {
        Ok(vs) => {
            for v in vs {
                report(&v);
                verdicts.push(v);
            }
        }
        Err(_) => {
            for (id, name) in [(6, "FR efficacy"), (7, "LPF sweep trend"), (8, "kernel smoothness"), (9, "perturbation spectrum")] {
                let v = Verdict { id, name, pass: false, detail: "experiment panicked".into(), contract: false };
                report(&v);
                verdicts.push(v);
            }
        }
    }

    let v = run_check(10, "end-to-end determinism", None, cli_determinism);
    report(&v);
    verdicts.push(v);

    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
    let blocking: Vec<u32> = verdicts
        .iter()
        .filter(|v| !v.pass && (v.contract || strict))
        .map(|v| v.id)
        .collect();
    if !blocking.is_empty() {
        eprintln!("blocking failures: {blocking:?}");
        std::process::exit(1);
    }
}
