//! A generated benchmark on disk: one container per split and role plus a
//! `truth.json` sidecar with the configuration and generator.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::{Container, Role};
use crate::io::write_json;
use crate::synthgen::{Generator, GeneratorConfig, GroundTruth, SequenceSet};

pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: GeneratorConfig,
    pub generator: Generator,
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Latent => "latent",
        Role::Observed => "observed",
        Role::Regime => "regime",
    }
}

/// `dir/{split}_{role}.bin`.
pub fn split_path(dir: &Path, split: &str, role: Role) -> PathBuf {
    dir.join(format!("{split}_{}.bin", role_name(role)))
}

pub fn save_ground_truth(dir: &Path, gt: &GroundTruth) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tag = format!("setting-{}", gt.config.setting);
    let seed = gt.config.seed;
    for (split, set) in [("train", &gt.train), ("eval", &gt.eval)] {
        Container::from_trajectories(&set.latents, Role::Latent, seed, &tag)?.save(&split_path(dir, split, Role::Latent))?;
        Container::from_trajectories(&set.observations, Role::Observed, seed, &tag)?
            .save(&split_path(dir, split, Role::Observed))?;
        Container::from_regimes(&set.regimes, seed, &tag)?.save(&split_path(dir, split, Role::Regime))?;
    }
    write_json(&dir.join(TRUTH_FILE), &Truth { config: gt.config.clone(), generator: gt.generator.clone() })
}

fn load_role(dir: &Path, split: &str, role: Role) -> Result<Option<Container>> {
    let p = split_path(dir, split, role);
    if !p.exists() {
        return Ok(None);
    }
    let c = Container::load(&p)?;
    if c.header.role != role {
        return Err(Error::Format(format!("{} holds {:?} data", p.display(), c.header.role)));
    }
    Ok(Some(c))
}

/// Missing role files load as empty lists; at least one must exist.
pub fn load_split(dir: &Path, split: &str) -> Result<SequenceSet> {
    let lat = load_role(dir, split, Role::Latent)?;
    let obs = load_role(dir, split, Role::Observed)?;
    let reg = load_role(dir, split, Role::Regime)?;
    if lat.is_none() && obs.is_none() && reg.is_none() {
        return Err(Error::Config(format!("no {split} data in {}", dir.display())));
    }
    Ok(SequenceSet {
        latents: lat.map(|c| c.trajectories()).transpose()?.unwrap_or_default(),
        observations: obs.map(|c| c.trajectories()).transpose()?.unwrap_or_default(),
        regimes: reg.map(|c| c.regimes()).transpose()?.unwrap_or_default(),
    })
}

pub fn load_truth(dir: &Path) -> Result<Option<Truth>> {
    let p = dir.join(TRUTH_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let t: Truth = serde_json::from_str(&std::fs::read_to_string(p)?)?;
    t.generator.prior.validate()?;
    Ok(Some(t))
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let truth = load_truth(dir)?.ok_or_else(|| Error::Config(format!("no {TRUTH_FILE} in {}", dir.display())))?;
    Ok(GroundTruth {
        config: truth.config,
        generator: truth.generator,
        train: load_split(dir, "train")?,
        eval: load_split(dir, "eval")?,
    })
}
