mod common;

use common::{rng, uniform};
use frat_core::analysis::{self, SweepMode};
use frat_core::attacks::AttackConfig;
use frat_core::data::{self, SynthConfig};
use frat_core::model::{Architecture, ModelParams};
use frat_core::rng::{self as streams, Stream};
use frat_core::spectral::LpfBandwidth;
use frat_core::training;
use frat_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Straightforward TV: collect every adjacent pair, then average.
fn tv_oracle(k: &[f64], h: usize, w: usize) -> f64 {
    let mut diffs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                diffs.push((k[y * w + x] - k[y * w + x + 1]).abs());
            }
            if y + 1 < h {
                diffs.push((k[y * w + x] - k[(y + 1) * w + x]).abs());
            }
        }
    }
    if diffs.is_empty() {
        0.0
    } else {
        diffs.iter().sum::<f64>() / diffs.len() as f64
    }
}

proptest! {
    #[test]
    fn kernel_tv_matches_oracle_and_invariances(
        v in prop::collection::vec(-2.0f64..2.0, 9),
        shift in -5.0f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let k = Tensor::new(vec![3, 3], v.clone()).unwrap();
        let tv = analysis::kernel_tv(&k).unwrap();
        prop_assert!((tv - tv_oracle(&v, 3, 3)).abs() < 1e-12);
        let shifted = Tensor::new(vec![3, 3], v.iter().map(|x| x + shift).collect()).unwrap();
        prop_assert!((analysis::kernel_tv(&shifted).unwrap() - tv).abs() < 1e-9);
        let scaled = Tensor::new(vec![3, 3], v.iter().map(|x| x * scale).collect()).unwrap();
        prop_assert!((analysis::kernel_tv(&scaled).unwrap() - scale * tv).abs() < 1e-9 * scale.max(1.0));
    }

    #[test]
    fn spectrum_diff_is_symmetric_and_normalized(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
        let b = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
        let ab = analysis::spectrum_diff(&a, &b).unwrap();
        let ba = analysis::spectrum_diff(&b, &a).unwrap();
        prop_assert!(ab.data().iter().zip(ba.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        prop_assert!(ab.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((ab.max_abs() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn smoothness_report_counts_and_statistics() {
    let p = ModelParams::init(Architecture::CIFAR, 3).unwrap();
    let rep = analysis::smoothness_report(&p).unwrap();
    let conv1: Vec<f64> = rep.scores.iter().filter(|s| s.layer == "conv1").map(|s| s.tv).collect();
    assert_eq!(conv1.len(), 48);
    let k = p.conv1.kernels.data();
    for (j, tv) in conv1.iter().enumerate() {
        assert!((tv - tv_oracle(&k[j * 9..j * 9 + 9], 3, 3)).abs() < 1e-15);
    }
    let mean = conv1.iter().sum::<f64>() / 48.0;
    assert!((rep.layer("conv1").unwrap().mean - mean).abs() < 1e-15);
    let csv = analysis::smoothness_csv(&rep, 3);
    assert!(csv.starts_with("seed,layer,out_ch,in_ch,tv\n3,conv1,0,0,"));
}

/// Minimal P5 reader used as an independent decoder.
fn read_pgm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        if bytes[i] == b'#' {
            while bytes[i] != b'\n' {
                i += 1;
            }
        } else if bytes[i].is_ascii_whitespace() {
            i += 1;
        } else {
            let start = i;
            while !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
        }
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    (fields[1].parse().unwrap(), fields[2].parse().unwrap(), bytes[i + 1..].to_vec())
}

#[test]
fn pgm_export_decodes_to_quantized_grid() {
    let mut r = rng(5);
    let grid = Tensor::from_fn(&[5, 7], |_| r.random_range(0.0..=1.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.pgm");
    analysis::export_pgm(&grid, &path, Some("seed=5 image=0")).unwrap();
    let (w, h, px) = read_pgm(&std::fs::read(&path).unwrap());
    assert_eq!((w, h), (7, 5));
    let want: Vec<u8> = grid.data().iter().map(|v| (v * 255.0 + 0.5).floor() as u8).collect();
    assert_eq!(px, want);
}

#[test]
fn zero_perturbation_gives_a_black_map() {
    let x = data::synth_dataset(1, 2, 0).unwrap().images[0].clone();
    let m = analysis::spectrum_diff(&x, &x).unwrap();
    let bytes = analysis::pgm_bytes(&m, None).unwrap();
    let (_, _, px) = read_pgm(&bytes);
    assert!(px.iter().all(|&p| p == 0));
    assert_eq!(analysis::low_frequency_energy_fraction(&m).unwrap(), 0.0);
}

#[test]
fn energy_fraction_oracle() {
    let mut r = rng(6);
    let m = uniform(&mut r, &[8, 8], 0.0, 1.0);
    let mut inside = 0.0;
    let mut total = 0.0;
    for row in 0..8 {
        for col in 0..8 {
            let e = m.data()[row * 8 + col].powi(2);
            total += e;
            if (2..6).contains(&row) && (2..6).contains(&col) {
                inside += e;
            }
        }
    }
    assert!((analysis::low_frequency_energy_fraction(&m).unwrap() - inside / total).abs() < 1e-15);
}

#[test]
fn full_band_sweep_row_reproduces_evaluation() {
    let cfg = SynthConfig {
        low_amplitude: 0.2,
        ..SynthConfig::default()
    };
    let ds = data::synth_dataset_with(2, 10, 1, &cfg).unwrap();
    let p = ModelParams::init(Architecture::CIFAR, 2).unwrap();
    let attack = AttackConfig::pgd(2);
    let rows = analysis::lpf_sweep(&p, &ds, &[32, 24, 16, 8], &attack, 4, SweepMode::AttackThenFilter, 1)
        .unwrap();
    assert_eq!(rows.iter().map(|r| r.bandwidth).collect::<Vec<_>>(), vec![32, 24, 16, 8]);
    let clean = training::evaluate(&p, &ds, None, 4, 1).unwrap().accuracy;
    let robust = training::evaluate(&p, &ds, Some(&attack), 4, 1).unwrap().accuracy;
    assert_eq!(rows[0].clean_acc, clean);
    assert_eq!(rows[0].robust_acc, robust);
    let adaptive = analysis::lpf_sweep(&p, &ds, &[32, 16], &attack, 4, SweepMode::AttackThroughFilter, 1)
        .unwrap();
    assert_eq!(adaptive[0], rows[0]);
    assert!(analysis::lpf_sweep(&p, &ds, &[16, 32], &attack, 4, SweepMode::AttackThenFilter, 1).is_err());
}

#[test]
fn adaptive_attack_respects_ball_and_box() {
    let mut r = rng(9);
    let p = ModelParams::init(Architecture::CIFAR, 5).unwrap();
    for trial in 0..10u64 {
        let x = uniform(&mut r, &[3, 32, 32], 0.0, 1.0);
        let band = LpfBandwidth::new([8, 16, 24][trial as usize % 3], 32).unwrap();
        let mut ar = streams::stream(trial, Stream::Attack);
        let adv = analysis::pgd_through_lpf(&p, &x, 1, &AttackConfig::pgd(3), band, &mut ar).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 8.0 / 255.0 + 1e-12 && (0.0..=1.0).contains(a));
        }
    }
}
