use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_scene, sample_params, Cover, PoseCategory, SamplingConfig, SceneGeometry, SceneSample};
use crate::body_model::{BodyParams, Gender, ModelBank, PosedMesh, Vec3};
use crate::error::{Error, Result};
use crate::nn::train::{ImageData, LabeledData};
use crate::pmt::{PmtData, PmtTensor};
use crate::projection::{DepthImage, PressureImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub category: PoseCategory,
    pub cover: Cover,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_v: usize,
    pub model_seed: u64,
    pub groups: Vec<GroupSpec>,
    pub geometry: SceneGeometry,
    pub mass_range_kg: [f64; 2],
    pub sampling: SamplingConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::balanced(18, 0)
    }
}

/// Attempts per sample before giving up on keeping the contact area on the
/// mat.
const MAX_ATTEMPTS: usize = 50;

impl SynthConfig {
    /// `total` samples spread as evenly as possible over every pose and
    /// cover combination.
    pub fn balanced(total: usize, seed: u64) -> Self {
        SynthConfig::for_categories(total, seed, &PoseCategory::ALL)
    }

    pub fn for_categories(total: usize, seed: u64, categories: &[PoseCategory]) -> Self {
        let combos: Vec<(PoseCategory, Cover)> =
            categories.iter().flat_map(|&c| Cover::ALL.map(|v| (c, v))).collect();
        let k = combos.len().max(1);
        let groups = combos
            .iter()
            .enumerate()
            .map(|(i, &(category, cover))| GroupSpec {
                category,
                cover,
                count: total / k + usize::from(i < total % k),
            })
            .filter(|g| g.count > 0)
            .collect();
        SynthConfig {
            seed,
            n_v: 690,
            model_seed: 7,
            groups,
            geometry: SceneGeometry::default(),
            mass_range_kg: [50.0, 95.0],
            sampling: SamplingConfig::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.geometry.pressure.validate()?;
        self.geometry.depth.validate()?;
        let [lo, hi] = self.mass_range_kg;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::ConfigInvalid(format!("mass range [{lo}, {hi}]")));
        }
        if !(self.geometry.camera_height_m > 0.0 && self.geometry.z_eps >= 0.0) {
            return Err(Error::ConfigInvalid("camera height must be positive and z_eps nonnegative".into()));
        }
        if self.total() == 0 {
            return Err(Error::ConfigInvalid("dataset config requests no samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub gender: Gender,
    pub pose_category: PoseCategory,
    pub cover: Cover,
    pub body_mass_kg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: SynthConfig,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_FORMAT: &str = "pressmap-dataset/1";

/// Generated scenes with their models. Reads of ground-truth vertex
/// pressure through [`LabeledData`] are counted.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub models: ModelBank,
    pub samples: Vec<SceneSample>,
    gt_pressure_reads: AtomicUsize,
}

fn make_sample(cfg: &SynthConfig, models: &ModelBank, index: usize, spec: &GroupSpec) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let geo = &cfg.geometry;
    for _ in 0..MAX_ATTEMPTS {
        let gender = if rng.random_bool(0.5) { Gender::Female } else { Gender::Male };
        let model = models.get(gender)?;
        let params = sample_params(&mut rng, spec.category, &cfg.sampling, model)?;
        let [lo, hi] = cfg.mass_range_kg;
        let mass = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let s = render_scene(model, params, spec.category, spec.cover, mass, geo)?;
        let on_mat = s
            .gt_mesh
            .vertices
            .iter()
            .filter(|v| v[2] <= geo.z_eps)
            .all(|v| geo.pressure.cell_of(v[0], v[1]).is_some());
        if on_mat {
            return Ok(s);
        }
    }
    Err(Error::ConfigInvalid(format!(
        "sample {index}: body does not fit on the pressure mat after {MAX_ATTEMPTS} attempts"
    )))
}

/// Builds every sample in memory. Each sample draws from its own random
/// stream, so a sample depends only on the seed and its index.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let models = ModelBank::toy(cfg.n_v, cfg.model_seed)?;
    let mut samples = Vec::with_capacity(cfg.total());
    let mut entries = Vec::with_capacity(cfg.total());
    for spec in &cfg.groups {
        for _ in 0..spec.count {
            let index = samples.len();
            let s = make_sample(cfg, &models, index, spec)?;
            entries.push(ManifestEntry {
                id: format!("s{index:05}"),
                gender: s.gt_params.gender,
                pose_category: s.pose_category,
                cover: s.cover,
                body_mass_kg: s.body_mass_kg,
            });
            samples.push(s);
        }
    }
    Ok(Dataset {
        manifest: Manifest {
            format: MANIFEST_FORMAT.into(),
            config: cfg.clone(),
            entries,
        },
        models,
        samples,
        gt_pressure_reads: AtomicUsize::new(0),
    })
}

/// Generates the dataset described by `cfg` and writes it under `dir`.
pub fn make_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let data = generate(cfg)?;
    data.save(dir)?;
    Ok(data.manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn flat_points(p: &[Vec3]) -> Vec<f64> {
    p.iter().flatten().copied().collect()
}

fn unflat_points(t: &PmtTensor, what: &str) -> Result<Vec<Vec3>> {
    let shape = t.shape();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::Format(format!("{what} must be [n, 3], got {shape:?}")));
    }
    Ok(t.to_f64().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// How many times ground-truth vertex pressure has been read.
    pub fn gt_pressure_reads(&self) -> usize {
        self.gt_pressure_reads.load(Ordering::SeqCst)
    }

    pub fn view(&self) -> DatasetView<'_> {
        DatasetView {
            data: self,
            indices: (0..self.len()).collect(),
        }
    }

    /// Samples whose category and cover pass the optional filters.
    pub fn filter(&self, categories: Option<&[PoseCategory]>, covers: Option<&[Cover]>) -> DatasetView<'_> {
        let indices = self
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| categories.is_none_or(|c| c.contains(&s.pose_category)))
            .filter(|(_, s)| covers.is_none_or(|c| c.contains(&s.cover)))
            .map(|(i, _)| i)
            .collect();
        DatasetView { data: self, indices }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let sdir = dir.join("samples");
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        self.models.save(dir.join("models"))?;
        for (e, s) in self.manifest.entries.iter().zip(&self.samples) {
            let base = |suffix: &str| sdir.join(format!("{}_{suffix}", e.id));
            s.depth.save(base("depth.pmt"))?;
            s.pressure.save(base("pressure.pmt"))?;
            write_json(&base("params.json"), &s.gt_params)?;
            let nv = s.gt_mesh.num_vertices();
            PmtTensor::f64(&[nv, 3], flat_points(&s.gt_mesh.vertices))?.save(base("mesh.pmt"))?;
            let nj = s.gt_mesh.joints.len();
            PmtTensor::f64(&[nj, 3], flat_points(&s.gt_mesh.joints))?.save(base("joints.pmt"))?;
            PmtTensor::f64(&[nv], s.gt_vpm.clone())?.save(base("vpm.pmt"))?;
            PmtTensor::u8(&[nv], s.gt_contact.clone())?.save(base("contact.pmt"))?;
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("unknown dataset format `{}`", manifest.format)));
        }
        let models = ModelBank::load(dir.join("models"))?;
        let faces = models.female.faces.clone();
        let sdir = dir.join("samples");
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let base = |suffix: &str| sdir.join(format!("{}_{suffix}", e.id));
            let params: BodyParams = read_json(&base("params.json"))?;
            let vertices = unflat_points(&PmtTensor::load(base("mesh.pmt"))?, "mesh")?;
            let joints = unflat_points(&PmtTensor::load(base("joints.pmt"))?, "joints")?;
            let gt_vpm = PmtTensor::load(base("vpm.pmt"))?.to_f64();
            let gt_contact = match PmtTensor::load(base("contact.pmt"))?.data {
                PmtData::U8(data) => data,
                _ => return Err(Error::Format(format!("{}: contact labels must be u8", e.id))),
            };
            if vertices.len() != models.num_vertices() || gt_vpm.len() != vertices.len() {
                return Err(Error::Format(format!("{}: vertex count does not match the models", e.id)));
            }
            samples.push(SceneSample {
                depth: DepthImage::load(base("depth.pmt"))?,
                pressure: PressureImage::load(base("pressure.pmt"))?,
                gt_params: params,
                gt_mesh: PosedMesh::new(vertices, joints, Arc::clone(&faces)),
                gt_vpm,
                gt_contact,
                pose_category: e.pose_category,
                cover: e.cover,
                body_mass_kg: e.body_mass_kg,
            });
        }
        Ok(Dataset {
            manifest,
            models,
            samples,
            gt_pressure_reads: AtomicUsize::new(0),
        })
    }
}

/// A subset of a [`Dataset`] in a fixed order.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub data: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn entry(&self, i: usize) -> &'a ManifestEntry {
        &self.data.manifest.entries[self.indices[i]]
    }

    pub fn pose_category(&self, i: usize) -> PoseCategory {
        self.data.samples[self.indices[i]].pose_category
    }

    pub fn cover(&self, i: usize) -> Cover {
        self.data.samples[self.indices[i]].cover
    }

    /// Keeps the positions listed in `keep`, in that order.
    pub fn select(&self, keep: impl IntoIterator<Item = usize>) -> DatasetView<'a> {
        DatasetView {
            data: self.data,
            indices: keep.into_iter().map(|k| self.indices[k]).collect(),
        }
    }

    /// First `n_train` samples and the rest.
    pub fn split_at(&self, n_train: usize) -> (DatasetView<'a>, DatasetView<'a>) {
        let n = n_train.min(self.indices.len());
        (self.select(0..n), self.select(n..self.indices.len()))
    }
}

impl ImageData for DatasetView<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn depth(&self, i: usize) -> &DepthImage {
        &self.data.samples[self.indices[i]].depth
    }

    fn pressure_image(&self, i: usize) -> &PressureImage {
        &self.data.samples[self.indices[i]].pressure
    }

    fn gender(&self, i: usize) -> Gender {
        self.data.samples[self.indices[i]].gt_params.gender
    }
}

impl LabeledData for DatasetView<'_> {
    fn gt_params(&self, i: usize) -> &BodyParams {
        &self.data.samples[self.indices[i]].gt_params
    }

    fn gt_mesh(&self, i: usize) -> &PosedMesh {
        &self.data.samples[self.indices[i]].gt_mesh
    }

    fn gt_pressure(&self, i: usize) -> &[f64] {
        self.data.gt_pressure_reads.fetch_add(1, Ordering::SeqCst);
        &self.data.samples[self.indices[i]].gt_vpm
    }

    fn gt_contact(&self, i: usize) -> &[u8] {
        &self.data.samples[self.indices[i]].gt_contact
    }
}
