use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use frat_core::analysis::{self, SweepMode};
use frat_core::attacks::{AttackConfig, LossKind};
use frat_core::checkpoint::{self, write_atomic};
use frat_core::training::{self, FrTarget, TrainConfig};
use frat_core::{Architecture, Tensor};

use crate::inputs::{load_model, out_dir, test_set, train_val};
use crate::{AttackArgs, AttackKind, EvalArgs, FrTargetArg, KernelArgs, SpectraArgs, SweepArgs, TrainArgs};

/// The library attack a flag set describes; `None` for `--attack none`.
pub fn attack_config(a: &AttackArgs) -> Option<AttackConfig> {
    let loss_kind = match a.attack {
        AttackKind::None => return None,
        AttackKind::Cw => LossKind::CwMargin,
        AttackKind::Fgsm => return Some(AttackConfig::fgsm(a.eps)),
        AttackKind::Pgd => LossKind::CrossEntropy,
    };
    Some(AttackConfig {
        epsilon: a.eps,
        alpha: a.alpha,
        steps: a.steps,
        random_start: a.random_start,
        loss_kind,
    })
}

fn attack_name(a: &AttackArgs) -> &'static str {
    match a.attack {
        AttackKind::None => "none",
        AttackKind::Fgsm => "fgsm",
        AttackKind::Pgd => "pgd",
        AttackKind::Cw => "cw",
    }
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig::with_epochs(a.epochs);
    let attack = |steps| AttackConfig {
        epsilon: a.eps,
        alpha: a.alpha,
        ..AttackConfig::pgd(steps)
    };
    cfg.arch = Architecture::CIFAR;
    cfg.batch_size = a.batch_size;
    cfg.lr0 = a.lr;
    cfg.momentum = a.momentum;
    cfg.weight_decay = a.weight_decay;
    cfg.lambda = a.lambda;
    cfg.fr_target = match a.fr_target {
        FrTargetArg::Logits => FrTarget::Logits,
        FrTargetArg::Probabilities => FrTarget::Probabilities,
    };
    cfg.train_attack = a.adversarial.then(|| attack(a.train_steps));
    cfg.eval_attack = attack(a.eval_steps);
    cfg.swa_enabled = a.swa;
    cfg.augment_flip = a.flip;
    cfg.seed = a.run.seed;
    cfg.workers = a.run.workers;
    cfg
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a);
    cfg.validate()?;
    let out = out_dir(&a.run)?;
    let (train_set, val_set) = train_val(&a.data)?;
    println!(
        "training on {} images, validating on {} (seed {}, lambda {})",
        train_set.len(),
        val_set.len(),
        cfg.seed,
        cfg.lambda
    );
    let outcome = training::train_with(&cfg, &train_set, &val_set, |r| {
        println!(
            "epoch {:>3}/{} lr {:.0e} loss {:.4} std {:.4} rob {:.4} ({:.1}s)",
            r.epoch + 1,
            cfg.epochs,
            r.learning_rate,
            r.train_loss,
            r.standard_acc,
            r.robust_acc,
            r.wall_seconds
        );
    })?;
    write_atomic(
        &out.join("metrics.csv"),
        training::metrics_csv(&outcome.metrics, cfg.seed).as_bytes(),
    )?;
    checkpoint::save(&outcome.params, &out.join("final.ckpt"))?;
    if let Some(swa) = &outcome.swa_params {
        checkpoint::save(swa, &out.join("swa.ckpt"))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub const EVAL_HEADER: &str = "seed,attack,steps,epsilon,alpha,accuracy,mean_loss";

pub fn eval(a: &EvalArgs) -> Result<()> {
    let params = load_model(a.ckpt.as_deref())?;
    let test = test_set(&a.data)?;
    let attack = attack_config(&a.attack);
    if let Some(c) = &attack {
        c.validate()?;
    }
    let r = training::evaluate(&params, &test, attack.as_ref(), a.run.seed, a.run.workers)?;
    println!(
        "attack {} accuracy {:.6} mean_loss {:.6} ({} images)",
        attack_name(&a.attack),
        r.accuracy,
        r.mean_loss,
        test.len()
    );
    if let Some(path) = &a.csv {
        let row = format!(
            "{},{},{},{:e},{:e},{},{}\n",
            a.run.seed,
            attack_name(&a.attack),
            attack.map_or(0, |c| c.steps),
            attack.map_or(0.0, |c| c.epsilon),
            attack.map_or(0.0, |c| c.alpha),
            r.accuracy,
            r.mean_loss
        );
        append_row(path, EVAL_HEADER, &row)?;
    }
    Ok(())
}

/// Appends `row`, writing the header first when the file is new or empty.
fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    text.push_str(row);
    f.write_all(text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

pub fn lpf_sweep(a: &SweepArgs) -> Result<()> {
    let params = load_model(a.ckpt.as_deref())?;
    let test = test_set(&a.data)?;
    let attack = attack_config(&a.attack)
        .context("lpf-sweep needs an attack for its robust column; --attack none is not supported")?;
    let mode = if a.adaptive {
        SweepMode::AttackThroughFilter
    } else {
        SweepMode::AttackThenFilter
    };
    let rows = analysis::lpf_sweep(&params, &test, &a.bands, &attack, a.run.seed, mode, a.run.workers)?;
    for r in &rows {
        println!(
            "band {:>2} clean {:.4} robust {:.4}",
            r.bandwidth, r.clean_acc, r.robust_acc
        );
    }
    let out = out_dir(&a.run)?;
    write_atomic(
        &out.join("sweep.csv"),
        analysis::sweep_csv(&rows, a.run.seed).as_bytes(),
    )?;
    Ok(())
}

pub const SPECTRA_HEADER: &str = "seed,index,label,low_freq_fraction";

pub fn spectra(a: &SpectraArgs) -> Result<()> {
    let params = load_model(a.ckpt.as_deref())?;
    let test = test_set(&a.data)?;
    let attack = attack_config(&a.attack);
    let n = a.count.min(test.len());
    let dir = out_dir(&a.run)?.join("spectra");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut csv = format!("{SPECTRA_HEADER}\n");
    let mut total = 0.0;
    for k in 0..n {
        // Evenly spaced picks, so class-major test sets contribute every class.
        let i = k * test.len() / n;
        let adv = training::attacked_input(&params, &test, i, attack.as_ref(), a.run.seed)?;
        let map = analysis::spectrum_diff(&test.images[i], &adv)?;
        let frac = analysis::low_frequency_energy_fraction(&map)?;
        total += frac;
        let comment = format!("seed={} index={i} label={}", a.run.seed, test.labels[i]);
        analysis::export_pgm(&map, &dir.join(format!("diff_{i:04}.pgm")), Some(&comment))?;
        csv.push_str(&format!("{},{i},{},{frac:.6}\n", a.run.seed, test.labels[i]));
    }
    write_atomic(&dir.join("spectra.csv"), csv.as_bytes())?;
    println!(
        "{n} maps in {}; mean low-frequency energy fraction {:.4}",
        dir.display(),
        if n == 0 { 0.0 } else { total / n as f64 }
    );
    Ok(())
}

/// conv1 kernels as one image: a row per input channel, a column per filter,
/// each 3×3 kernel min–max scaled and magnified 4× with a 1-pixel gap.
fn kernel_grid(k: &Tensor) -> Tensor {
    let s = k.shape();
    let (out_ch, in_ch, ks) = (s[0], s[1], s[2]);
    const ZOOM: usize = 4;
    let cell = ks * ZOOM + 1;
    let (h, w) = (in_ch * cell + 1, out_ch * cell + 1);
    let mut grid = Tensor::zeros(&[h, w]);
    for o in 0..out_ch {
        for c in 0..in_ch {
            let base = (o * in_ch + c) * ks * ks;
            let vals = &k.data()[base..base + ks * ks];
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for y in 0..ks * ZOOM {
                for x in 0..ks * ZOOM {
                    let v = vals[(y / ZOOM) * ks + x / ZOOM];
                    let scaled = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    let (gy, gx) = (c * cell + 1 + y, o * cell + 1 + x);
                    grid.data_mut()[gy * w + gx] = scaled;
                }
            }
        }
    }
    grid
}

pub fn kernels(a: &KernelArgs) -> Result<()> {
    let params = load_model(a.ckpt.as_deref())?;
    let report = analysis::smoothness_report(&params)?;
    for l in &report.layers {
        println!("{} mean tv {:.6} std {:.6}", l.layer, l.mean, l.std);
    }
    let out = out_dir(&a.run)?;
    write_atomic(
        &out.join("smoothness.csv"),
        analysis::smoothness_csv(&report, a.run.seed).as_bytes(),
    )?;
    analysis::export_pgm(
        &kernel_grid(&params.conv1.kernels),
        &out.join("conv1.pgm"),
        Some(&format!("seed={}", a.run.seed)),
    )?;
    Ok(())
}
