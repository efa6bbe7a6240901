use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use frat_core::data::{self, CifarSplit, Dataset, SynthConfig};
use frat_core::rng::splitmix64;
use frat_core::{checkpoint, Architecture, ModelParams};

use crate::{DataArgs, RunArgs};

pub const OUT_DIR_ENV: &str = "FR_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "frat-out";

/// `--out-dir`, else `$FR_OUT_DIR`, else `./frat-out`; created if missing.
pub fn out_dir(run: &RunArgs) -> Result<PathBuf> {
    let dir = match &run.out_dir {
        Some(d) => d.clone(),
        None => std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cifar_dir(args: &DataArgs) -> Result<&Path> {
    match &args.data_dir {
        Some(d) => Ok(d),
        None => bail!("no data: pass --data-dir with the CIFAR-10 binary batches, or --synth"),
    }
}

/// Training and validation sets.
pub fn train_val(args: &DataArgs) -> Result<(Dataset, Dataset)> {
    let pool = if args.synth {
        data::synth_dataset_with(args.train_per_class, 10, args.data_seed, &SynthConfig::two_tone())?
    } else {
        let all = data::load_cifar10(cifar_dir(args)?, CifarSplit::Train)?;
        data::take_subset(&all, args.train_per_class, args.data_seed)?
    };
    Ok(data::split(&pool, args.split, args.data_seed)?)
}

pub fn test_set(args: &DataArgs) -> Result<Dataset> {
    if args.synth {
        // Test images come from a generator stream disjoint from the pool's.
        let seed = splitmix64(args.data_seed ^ 0x7e57);
        return Ok(data::synth_dataset_with(
            args.test_per_class,
            10,
            seed,
            &SynthConfig::two_tone(),
        )?);
    }
    let all = data::load_cifar10(cifar_dir(args)?, CifarSplit::Test)?;
    Ok(data::take_subset(&all, args.test_per_class, args.data_seed)?)
}

pub fn load_model(ckpt: Option<&Path>) -> Result<ModelParams> {
    let Some(path) = ckpt else {
        bail!("--ckpt is required");
    };
    let params = checkpoint::load(path)?;
    if params.arch != Architecture::CIFAR {
        bail!(
            "{}: expected the {} architecture, found {}",
            path.display(),
            Architecture::CIFAR.tag(),
            params.arch.tag()
        );
    }
    Ok(params)
}
