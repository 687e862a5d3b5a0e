//! Latent-factor world standing in for real person images.
//!
//! Every raw sample is `A·e(identity) + B·c(identity, clothing) + noise`,
//! with `A`, `B` fixed random linear maps. Because the maps and latents are
//! known, the clothing-swap generator can replace the clothing component
//! exactly, which gives "same person, different clothes" by construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use thiserror::Error;

use crate::numerics::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("template bank is empty")]
    EmptyTemplateBank,
    #[error("refusing to augment a synthetic sample")]
    SyntheticInput,
    #[error("sample identity {identity} / clothing {clothing} is outside the world")]
    UnknownSample { identity: u32, clothing: u32 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// How test identities are divided between query and gallery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSetting {
    /// Each test (identity, clothing) group goes wholly to query or gallery,
    /// so every true match differs in clothing.
    ClothingChange,
    /// Each test group's samples are halved between query and gallery.
    SameClothing,
}

impl SplitSetting {
    pub fn code(self) -> u8 {
        match self {
            SplitSetting::ClothingChange => 0,
            SplitSetting::SameClothing => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SplitSetting::ClothingChange),
            1 => Some(SplitSetting::SameClothing),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub num_identities: u32,
    pub clothes_per_identity: u32,
    pub samples_per_identity_clothing: u32,
    pub num_cameras: u32,
    /// Raw sample dimension D.
    pub embedding_dim: u32,
    pub identity_dim: u32,
    pub clothing_dim: u32,
    pub identity_scale: f64,
    pub clothing_scale: f64,
    pub noise_scale: f64,
    /// Identities `0..train_identities` are training data; the rest are test.
    pub train_identities: u32,
    pub split: SplitSetting,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_identities: 50,
            clothes_per_identity: 4,
            samples_per_identity_clothing: 6,
            num_cameras: 4,
            embedding_dim: 32,
            identity_dim: 16,
            clothing_dim: 16,
            identity_scale: 1.0,
            clothing_scale: 0.9,
            noise_scale: 0.1,
            train_identities: 25,
            split: SplitSetting::ClothingChange,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let counts = [
            ("num_identities", self.num_identities),
            ("clothes_per_identity", self.clothes_per_identity),
            ("samples_per_identity_clothing", self.samples_per_identity_clothing),
            ("num_cameras", self.num_cameras),
            ("embedding_dim", self.embedding_dim),
            ("identity_dim", self.identity_dim),
            ("clothing_dim", self.clothing_dim),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(WorldError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        for (name, value) in [
            ("identity_scale", self.identity_scale),
            ("clothing_scale", self.clothing_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(WorldError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.identity_dim + self.clothing_dim > self.embedding_dim {
            return Err(WorldError::InvalidConfig("identity_dim + clothing_dim exceeds embedding_dim".into()));
        }
        if self.train_identities > self.num_identities {
            return Err(WorldError::InvalidConfig("train_identities exceeds num_identities".into()));
        }
        let has_test = self.train_identities < self.num_identities;
        match self.split {
            SplitSetting::ClothingChange if has_test && self.clothes_per_identity < 2 => {
                return Err(WorldError::InvalidConfig(
                    "clothing-change split needs at least 2 clothes per identity".into(),
                ))
            }
            SplitSetting::SameClothing if has_test && self.samples_per_identity_clothing < 2 => {
                return Err(WorldError::InvalidConfig(
                    "same-clothing split needs at least 2 samples per group".into(),
                ))
            }
            _ => {}
        }
        if !(self.identity_scale > self.clothing_scale && self.clothing_scale >= self.noise_scale) {
            log::warn!(
                "identity_scale > clothing_scale >= noise_scale does not hold; the world may not be learnable"
            );
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_identities as usize
            * self.clothes_per_identity as usize
            * self.samples_per_identity_clothing as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub raw: Vector,
    pub identity_id: u32,
    /// For synthetic samples this is `clothes_per_identity + template_id`.
    pub clothing_id: u32,
    pub camera_id: u32,
    pub is_synthetic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Query,
    Gallery,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Train => 0,
            Role::Query => 1,
            Role::Gallery => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Role::Train),
            1 => Some(Role::Query),
            2 => Some(Role::Gallery),
            _ => None,
        }
    }
}

/// Samples plus the split role of each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub samples: Vec<Sample>,
    pub roles: Vec<Role>,
}

impl Dataset {
    pub fn indices(&self, role: Role) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| **r == role).map(|(i, _)| i).collect()
    }

    pub fn with_role(&self, role: Role) -> Vec<&Sample> {
        self.indices(role).into_iter().map(|i| &self.samples[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleTemplate {
    pub style_vector: Vector,
    pub template_id: u32,
}

/// The hidden generative structure of a world.
#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
    identity_map: Matrix,
    clothing_map: Matrix,
    identity_latents: Vec<Vec<f64>>,
    clothing_latents: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `n` orthonormal vectors of length `d` (Gram-Schmidt on Gaussian draws).
fn orthonormal_columns(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = gaussian_vec(rng, d);
        for c in &cols {
            let p = crate::numerics::dot(&v, c);
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        }
        let norm = crate::numerics::norm(&v);
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    cols
}

fn apply(map: &Matrix, latent: &[f64]) -> Vec<f64> {
    map.iter_rows().map(|row| crate::numerics::dot(row, latent)).collect()
}

/// Builds the world and its samples. Deterministic in `config.seed`.
pub fn generate_world(config: &WorldConfig) -> Result<(World, Dataset), WorldError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.embedding_dim as usize;
    let (di, dc) = (config.identity_dim as usize, config.clothing_dim as usize);

    // orthonormal columns, identity block then clothing block, so the two
    // subspaces are orthogonal; gains make each raw coordinate's RMS equal the scale
    let basis = orthonormal_columns(&mut rng, d, di + dc);
    let block = |offset: usize, width: usize, scale: f64| {
        let gain = scale * (d as f64 / width as f64).sqrt();
        let mut m = Matrix::zeros(d, width);
        for r in 0..d {
            for c in 0..width {
                m.set(r, c, basis[offset + c][r] * gain);
            }
        }
        m
    };
    let identity_map = block(0, di, config.identity_scale);
    let clothing_map = block(di, dc, config.clothing_scale);

    let n_id = config.num_identities as usize;
    let n_cl = config.clothes_per_identity as usize;
    let identity_latents: Vec<Vec<f64>> = (0..n_id).map(|_| gaussian_vec(&mut rng, di)).collect();
    let clothing_latents: Vec<Vec<f64>> = (0..n_id * n_cl).map(|_| gaussian_vec(&mut rng, dc)).collect();

    let world = World { config: config.clone(), identity_map, clothing_map, identity_latents, clothing_latents };

    let mut samples = Vec::with_capacity(config.num_samples());
    let mut roles = Vec::with_capacity(config.num_samples());
    for id in 0..config.num_identities {
        let is_train = id < config.train_identities;
        let mut clothes: Vec<u32> = (0..config.clothes_per_identity).collect();
        if !is_train {
            clothes.shuffle(&mut rng);
        }
        let query_clothes = (config.clothes_per_identity / 2).max(1);
        let id_part = apply(&world.identity_map, &world.identity_latents[id as usize]);
        for cl in 0..config.clothes_per_identity {
            let cl_part = apply(&world.clothing_map, world.clothing_latent(id, cl).expect("in range"));
            let rank = clothes.iter().position(|&c| c == cl).expect("permutation") as u32;
            for s in 0..config.samples_per_identity_clothing {
                let noise = gaussian_vec(&mut rng, d);
                let raw: Vec<f64> = (0..d).map(|j| id_part[j] + cl_part[j] + config.noise_scale * noise[j]).collect();
                samples.push(Sample {
                    raw: Vector::new(raw).map_err(|e| WorldError::InvalidConfig(e.to_string()))?,
                    identity_id: id,
                    clothing_id: cl,
                    camera_id: cl % config.num_cameras,
                    is_synthetic: false,
                });
                let role = if is_train {
                    Role::Train
                } else {
                    match config.split {
                        SplitSetting::ClothingChange if rank < query_clothes => Role::Query,
                        SplitSetting::ClothingChange => Role::Gallery,
                        SplitSetting::SameClothing if s < config.samples_per_identity_clothing / 2 => Role::Query,
                        SplitSetting::SameClothing => Role::Gallery,
                    }
                };
                roles.push(role);
            }
        }
    }
    Ok((world, Dataset { config: config.clone(), samples, roles }))
}

impl World {
    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn identity_map(&self) -> &Matrix {
        &self.identity_map
    }

    pub fn clothing_map(&self) -> &Matrix {
        &self.clothing_map
    }

    pub fn identity_latent(&self, identity: u32) -> Option<&[f64]> {
        self.identity_latents.get(identity as usize).map(Vec::as_slice)
    }

    pub fn clothing_latent(&self, identity: u32, clothing: u32) -> Option<&[f64]> {
        if identity >= self.config.num_identities || clothing >= self.config.clothes_per_identity {
            return None;
        }
        let idx = (identity * self.config.clothes_per_identity + clothing) as usize;
        Some(&self.clothing_latents[idx])
    }

    /// `count` fresh clothing styles drawn from the clothing latent prior,
    /// independent of the latents used by the dataset.
    pub fn template_bank(&self, count: usize, seed: u64) -> Vec<StyleTemplate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e3a_91c5_d2b4_0f68);
        (0..count)
            .map(|i| StyleTemplate {
                style_vector: Vector::new(gaussian_vec(&mut rng, self.config.clothing_dim as usize))
                    .expect("finite gaussian"),
                template_id: i as u32,
            })
            .collect()
    }
}

/// Re-dresses a person in a template's clothing.
pub trait ClothingSwap {
    fn swap(&self, x: &Sample, template: &StyleTemplate) -> Result<Sample, WorldError>;
}

impl ClothingSwap for World {
    /// `raw - B·c(x) + B·style`: identity component, noise and camera kept.
    fn swap(&self, x: &Sample, template: &StyleTemplate) -> Result<Sample, WorldError> {
        if x.is_synthetic {
            return Err(WorldError::SyntheticInput);
        }
        let d = self.config.embedding_dim as usize;
        if x.raw.dim() != d {
            return Err(WorldError::DimensionMismatch { expected: d, found: x.raw.dim() });
        }
        if template.style_vector.dim() != self.config.clothing_dim as usize {
            return Err(WorldError::DimensionMismatch {
                expected: self.config.clothing_dim as usize,
                found: template.style_vector.dim(),
            });
        }
        let own = self
            .clothing_latent(x.identity_id, x.clothing_id)
            .ok_or(WorldError::UnknownSample { identity: x.identity_id, clothing: x.clothing_id })?;
        let delta: Vec<f64> =
            template.style_vector.as_slice().iter().zip(own).map(|(t, c)| t - c).collect();
        let shift = apply(&self.clothing_map, &delta);
        let raw: Vec<f64> = x.raw.as_slice().iter().zip(&shift).map(|(r, s)| r + s).collect();
        Ok(Sample {
            raw: Vector::new(raw).map_err(|e| WorldError::InvalidConfig(e.to_string()))?,
            identity_id: x.identity_id,
            clothing_id: self.config.clothes_per_identity + template.template_id,
            camera_id: x.camera_id,
            is_synthetic: true,
        })
    }
}

/// One synthetic variant of `x` per template.
pub fn generate_sync<G: ClothingSwap + ?Sized>(
    generator: &G,
    x: &Sample,
    templates: &[&StyleTemplate],
) -> Result<Vec<Sample>, WorldError> {
    if templates.is_empty() {
        return Err(WorldError::EmptyTemplateBank);
    }
    if x.is_synthetic {
        return Err(WorldError::SyntheticInput);
    }
    templates.iter().map(|t| generator.swap(x, t)).collect()
}
