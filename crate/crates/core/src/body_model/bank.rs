use std::path::Path;

use super::{generate_toy_model, BodyModel, Gender, ToyModelConfig};
use crate::error::{Error, Result};

/// Female and male models with a shared mesh topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBank {
    pub female: BodyModel,
    pub male: BodyModel,
}

impl ModelBank {
    pub fn new(female: BodyModel, male: BodyModel) -> Result<Self> {
        if female.faces != male.faces || female.num_joints() != male.num_joints() || female.n_betas != male.n_betas {
            return Err(Error::ConfigInvalid("female and male models must share topology".into()));
        }
        Ok(ModelBank { female, male })
    }

    pub fn toy(n_v: usize, seed: u64) -> Result<Self> {
        let make = |gender| generate_toy_model(&ToyModelConfig { n_v, seed, gender });
        ModelBank::new(make(Gender::Female)?, make(Gender::Male)?)
    }

    pub fn get(&self, gender: Gender) -> Result<&BodyModel> {
        match gender {
            Gender::Female => Ok(&self.female),
            Gender::Male => Ok(&self.male),
            Gender::Neutral => Err(Error::ConfigInvalid("no neutral model in the bank".into())),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.female.num_vertices()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.female.save(dir.join("female"))?;
        self.male.save(dir.join("male"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        ModelBank::new(BodyModel::load(dir.join("female"))?, BodyModel::load(dir.join("male"))?)
    }
}
