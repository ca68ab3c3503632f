//! The image-to-mesh-and-pressure network and its weakly supervised variant.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lbs::{pose_on_tape, LbsConstants};
use super::params::{Conv, Dense, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::body_model::{BodyModel, BodyParams, Gender, PosedMesh, Vec3, NUM_BETAS, NUM_THETA};
use crate::error::{Error, Result};
use crate::fim::{self, FimToggles};
use crate::pmt::PmtTensor;
use crate::projection::{DepthImage, GridGeometry, PressureImage};

pub const PSI_LEN: usize = NUM_BETAS + NUM_THETA + 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    pub enc_channels: Vec<usize>,
    pub enc_strides: Vec<usize>,
    pub mesh_hidden: usize,
    pub vertex_hidden: usize,
    pub fim: FimToggles,
    /// Height of the overhead camera above the mattress.
    pub camera_height_m: f64,
    /// Divides body height above the mattress in the depth input channel.
    pub height_scale_m: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_rows: 64,
            input_cols: 27,
            enc_channels: vec![8, 16, 16, 16],
            enc_strides: vec![2, 2, 2, 1],
            mesh_hidden: 64,
            vertex_hidden: 16,
            fim: FimToggles::default(),
            camera_height_m: 2.0,
            height_scale_m: 0.25,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() || self.enc_channels.len() != self.enc_strides.len() {
            return Err(Error::ConfigInvalid("encoder channels and strides must be nonempty and match".into()));
        }
        if self.enc_channels.contains(&0) || self.enc_strides.contains(&0) {
            return Err(Error::ConfigInvalid("encoder widths and strides must be positive".into()));
        }
        if self.input_rows == 0 || self.input_cols == 0 || self.mesh_hidden == 0 || self.vertex_hidden == 0 {
            return Err(Error::ConfigInvalid("network sizes must be positive".into()));
        }
        if !(self.camera_height_m > 0.0 && self.height_scale_m > 0.0) {
            return Err(Error::ConfigInvalid("camera height and height scale must be positive".into()));
        }
        if !self.fim.any() {
            return Err(Error::NoFeaturesEnabled);
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        *self.enc_channels.last().unwrap_or(&0)
    }

    /// Spatial size of the final encoder map.
    pub fn latent_dims(&self) -> (usize, usize) {
        self.enc_strides.iter().fold((self.input_rows, self.input_cols), |(h, w), &s| {
            ((h + 2 - 3) / s + 1, (w + 2 - 3) / s + 1)
        })
    }

    pub fn total_stride(&self) -> usize {
        self.enc_strides.iter().product()
    }
}

/// Dataset-level scales that map network outputs to physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub pressure_scale_kpa: f64,
    pub psi_mean: Vec<f64>,
    pub psi_std: Vec<f64>,
}

impl Normalization {
    pub fn identity() -> Self {
        let mut psi_mean = vec![0.0; PSI_LEN];
        psi_mean[PSI_LEN - 6] = 1.0;
        psi_mean[PSI_LEN - 2] = 1.0;
        Normalization {
            pressure_scale_kpa: 1.0,
            psi_mean,
            psi_std: vec![1.0; PSI_LEN],
        }
    }

    /// Per-component mean and standard deviation (floored at 1e-3) of the
    /// ground-truth parameter vectors; pressure scale is the standard
    /// deviation of the supplied vertex pressures.
    pub fn from_targets<'a>(
        params: impl IntoIterator<Item = &'a BodyParams>,
        pressure_sigma: f64,
    ) -> Result<Self> {
        let vecs: Vec<Vec<f64>> = params.into_iter().map(BodyParams::to_vector).collect();
        if vecs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = vecs.len() as f64;
        let mut mean = vec![0.0; PSI_LEN];
        for v in &vecs {
            crate::error::check_len("parameter vector", PSI_LEN, v.len())?;
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        let mut std = vec![0.0; PSI_LEN];
        for v in &vecs {
            for k in 0..PSI_LEN {
                std[k] += (v[k] - mean[k]).powi(2) / n;
            }
        }
        Ok(Normalization {
            pressure_scale_kpa: pressure_sigma.max(1e-3),
            psi_mean: mean,
            psi_std: std.into_iter().map(|s| s.sqrt().max(1e-3)).collect(),
        })
    }
}

/// Network input on the configured grid: channels are body height above
/// the mattress, pressure, and normalized x / y coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub geometry: GridGeometry,
    pub channels: Tensor,
    pub gender: Gender,
}

pub const INPUT_CHANNELS: usize = 4;
/// Leading input channels sampled by the image feature source.
pub const IMAGE_FEATURE_CHANNELS: usize = 2;

/// Box-filters `src` onto `dst`: each destination cell averages the source
/// pixels whose centres fall inside it, falling back to the nearest source
/// pixel when none do.
pub fn resample(src: &[f64], sg: &GridGeometry, dg: &GridGeometry) -> Vec<f64> {
    let mut sum = vec![0.0; dg.num_cells()];
    let mut cnt = vec![0usize; dg.num_cells()];
    for r in 0..sg.rows {
        for c in 0..sg.cols {
            let p = sg.cell_center(r, c);
            if let Some((dr, dc)) = dg.cell_of(p[0], p[1]) {
                sum[dr * dg.cols + dc] += src[r * sg.cols + c];
                cnt[dr * dg.cols + dc] += 1;
            }
        }
    }
    for r in 0..dg.rows {
        for c in 0..dg.cols {
            let k = r * dg.cols + c;
            if cnt[k] > 0 {
                sum[k] /= cnt[k] as f64;
            } else {
                let p = dg.cell_center(r, c);
                let (sr, sc) = sg.cell_clamped(p[0], p[1]);
                sum[k] = src[sr * sg.cols + sc];
            }
        }
    }
    sum
}

pub fn prepare_input(
    cfg: &NetConfig,
    norm: &Normalization,
    depth: &DepthImage,
    pressure: &PressureImage,
    gender: Gender,
) -> Result<NetInput> {
    let g = pressure.geometry;
    if g.rows != cfg.input_rows || g.cols != cfg.input_cols {
        return Err(Error::GeometryMismatch(format!(
            "pressure image is {}x{}, network expects {}x{}",
            g.rows, g.cols, cfg.input_rows, cfg.input_cols
        )));
    }
    let n = g.num_cells();
    // Missing depth returns carry no height information.
    let heights: Vec<f64> = depth
        .values
        .iter()
        .map(|d| if *d < 0.0 { 0.0 } else { (cfg.camera_height_m - d).max(0.0) })
        .collect();
    let h = resample(&heights, &depth.geometry, &g);
    let mut data = Vec::with_capacity(INPUT_CHANNELS * n);
    data.extend(h.iter().map(|x| x / cfg.height_scale_m));
    data.extend(pressure.values.iter().map(|p| p / norm.pressure_scale_kpa));
    for r in 0..g.rows {
        for _ in 0..g.cols {
            data.push(2.0 * (r as f64 + 0.5) / g.rows as f64 - 1.0);
        }
    }
    for _ in 0..g.rows {
        for c in 0..g.cols {
            data.push(2.0 * (c as f64 + 0.5) / g.cols as f64 - 1.0);
        }
    }
    Ok(NetInput {
        geometry: g,
        channels: Tensor::new(&[INPUT_CHANNELS, g.rows, g.cols], data)?,
        gender,
    })
}

/// Pixel registrations of the mesh on the input grid and on the final
/// encoder map.
#[derive(Debug, Clone)]
pub struct Registration {
    pub input_pixels: Arc<Vec<usize>>,
    pub latent_pixels: Arc<Vec<usize>>,
}

pub fn register_mesh(cfg: &NetConfig, geometry: &GridGeometry, vertices: &[Vec3]) -> Registration {
    let mesh = PosedMesh::new(vertices.to_vec(), vec![], Arc::new(vec![]));
    let pix = fim::register(&mesh, geometry);
    let s = cfg.total_stride();
    let (lh, lw) = cfg.latent_dims();
    let latent = pix.iter().map(|p| (p[0] / s).min(lh - 1) * lw + (p[1] / s).min(lw - 1)).collect();
    Registration {
        input_pixels: Arc::new(fim::flat_pixels(&pix, geometry)),
        latent_pixels: Arc::new(latent),
    }
}

/// Shared per-vertex MLP, max-pooled global descriptor and decoder.
#[derive(Debug, Clone, PartialEq)]
struct VertexHead {
    toggles: FimToggles,
    enc1: Option<Dense>,
    enc2: Option<Dense>,
    dec_point: Option<usize>,
    dec_pool: Option<usize>,
    dec_global: Option<usize>,
    dec_bias: usize,
    out: Dense,
}

/// Inputs of the per-vertex head for one sample.
pub struct HeadInputs {
    pub vertices: Var,
    pub image: Var,
    pub latent: Var,
    pub pooled: Var,
    pub registration: Registration,
}

impl VertexHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetConfig, prefix: &str, out_width: usize) -> Self {
        let t = cfg.fim;
        let h = cfg.vertex_hidden;
        let d = 3 * usize::from(t.use_xyz)
            + IMAGE_FEATURE_CHANNELS * usize::from(t.use_image)
            + cfg.latent_channels() * usize::from(t.use_latent);
        let (enc1, enc2, dec_point, dec_pool) = if d > 0 {
            let e1 = Dense::new(store, rng, &format!("{prefix}.enc1"), d, h, false);
            let e2 = Dense::new(store, rng, &format!("{prefix}.enc2"), h, h, false);
            let dp = store.add(
                format!("{prefix}.dec.point"),
                super::params::he_uniform(rng, &[h, h], 2 * h),
            );
            let dm = store.add(format!("{prefix}.dec.pool"), super::params::he_uniform(rng, &[h, h], 2 * h));
            (Some(e1), Some(e2), Some(dp), Some(dm))
        } else {
            (None, None, None, None)
        };
        let dec_global = t.use_global.then(|| {
            let c = cfg.latent_channels();
            store.add(format!("{prefix}.dec.global"), super::params::he_uniform(rng, &[c, h], c))
        });
        let dec_bias = store.add(format!("{prefix}.dec.b"), Tensor::zeros(&[h]));
        let out = Dense::new(store, rng, &format!("{prefix}.out"), h, out_width, true);
        VertexHead {
            toggles: t,
            enc1,
            enc2,
            dec_point,
            dec_pool,
            dec_global,
            dec_bias,
            out,
        }
    }

    /// Per-vertex outputs `[N_v, out_width]`.
    fn forward(&self, tape: &mut Tape, p: &[Var], x: &HeadInputs) -> Result<Var> {
        let t = self.toggles;
        let nv = tape.shape(x.vertices)[0];
        let mut groups = Vec::new();
        if t.use_xyz {
            groups.push(x.vertices);
        }
        if t.use_image {
            groups.push(tape.gather_pixels(x.image, x.registration.input_pixels.clone())?);
        }
        if t.use_latent {
            groups.push(tape.gather_pixels(x.latent, x.registration.latent_pixels.clone())?);
        }
        let mut row = p[self.dec_bias];
        if let Some(g) = self.dec_global {
            let gp = tape.matmul(x.pooled, p[g])?;
            row = tape.add_row(gp, row)?;
        }
        let pre = match (self.enc1, self.enc2, self.dec_point, self.dec_pool) {
            (Some(e1), Some(e2), Some(dp), Some(dm)) => {
                let feats = if groups.len() == 1 { groups[0] } else { tape.concat_cols(&groups)? };
                let h = e1.apply(tape, p, feats)?;
                let h = tape.relu(h);
                let h = e2.apply(tape, p, h)?;
                let f = tape.relu(h);
                let pooled = tape.max_rows(f)?;
                let pm = tape.matmul(pooled, p[dm])?;
                let row = tape.add_row(pm, row)?;
                let z = tape.matmul(f, p[dp])?;
                tape.add_row(z, row)?
            }
            _ => {
                let r = tape.reshape(row, &[1, tape.value(row).numel()])?;
                tape.repeat_rows(r, nv)?
            }
        };
        let h = tape.relu(pre);
        self.out.apply(tape, p, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    convs: Vec<Conv>,
    mesh1: Dense,
    mesh2: Dense,
    head: VertexHead,
}

fn build_layout(cfg: &NetConfig, store: &mut ParamStore) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cin = INPUT_CHANNELS;
    let mut convs = Vec::new();
    for (i, (&c, &s)) in cfg.enc_channels.iter().zip(&cfg.enc_strides).enumerate() {
        convs.push(Conv::new(store, &mut rng, &format!("enc{i}"), cin, c, 3, s, 1));
        cin = c;
    }
    let mesh1 = Dense::new(store, &mut rng, "mesh.fc1", cin + 2, cfg.mesh_hidden, false);
    let mesh2 = Dense::new(store, &mut rng, "mesh.fc2", cfg.mesh_hidden, PSI_LEN, true);
    let head = VertexHead::new(store, &mut rng, cfg, "vertex", 2);
    Layout {
        convs,
        mesh1,
        mesh2,
        head,
    }
}

/// Everything one forward pass records on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutputs {
    pub psi: Var,
    pub vertices: Var,
    pub joints: Var,
    pub pressure: Var,
    pub contact_logit: Var,
    pub contact_prob: Var,
    pub latent: Var,
    pub pooled: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMapNet {
    pub config: NetConfig,
    pub norm: Normalization,
    pub params: ParamStore,
    layout: Layout,
}

/// Result of a forward pass in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMapOutput {
    pub params: BodyParams,
    pub mesh: PosedMesh,
    pub pressure: Vec<f64>,
    pub contact_prob: Vec<f64>,
    pub inference_map: Vec<f64>,
}

/// Mesh-side features a frozen network hands to the weakly supervised head.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatures {
    pub vertices: Vec<Vec3>,
    pub latent: Tensor,
    pub pooled: Tensor,
    pub image: Tensor,
    pub geometry: GridGeometry,
}

/// Zero pressure wherever the contact probability is below one half.
pub fn gate(pressure: &[f64], contact_prob: &[f64]) -> Vec<f64> {
    pressure
        .iter()
        .zip(contact_prob)
        .map(|(p, c)| if *c >= 0.5 { *p } else { 0.0 })
        .collect()
}

impl BodyMapNet {
    pub fn new(config: NetConfig, norm: Normalization) -> Result<Self> {
        config.validate()?;
        crate::error::check_len("parameter mean", PSI_LEN, norm.psi_mean.len())?;
        crate::error::check_len("parameter std", PSI_LEN, norm.psi_std.len())?;
        let mut params = ParamStore::default();
        let layout = build_layout(&config, &mut params);
        Ok(BodyMapNet {
            config,
            norm,
            params,
            layout,
        })
    }

    pub fn prepare(&self, depth: &DepthImage, pressure: &PressureImage, gender: Gender) -> Result<NetInput> {
        prepare_input(&self.config, &self.norm, depth, pressure, gender)
    }

    fn encode(&self, tape: &mut Tape, p: &[Var], input: &NetInput) -> Result<(Var, Var)> {
        let mut x = tape.constant(input.channels.clone());
        for conv in &self.layout.convs {
            let y = conv.apply(tape, p, x)?;
            x = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(x)?;
        Ok((x, pooled))
    }

    fn image_channels(input: &NetInput) -> Tensor {
        let g = input.geometry;
        let n = IMAGE_FEATURE_CHANNELS * g.num_cells();
        Tensor {
            shape: vec![IMAGE_FEATURE_CHANNELS, g.rows, g.cols],
            data: input.channels.data[..n].to_vec(),
        }
    }

    /// Records the full forward pass. `p` are the bound parameters.
    pub fn forward_tape(&self, tape: &mut Tape, p: &[Var], input: &NetInput, lbs: &LbsConstants) -> Result<TapeOutputs> {
        self.forward_tape_with(tape, p, input, lbs, None)
    }

    /// As [`forward_tape`](Self::forward_tape), optionally reusing a fixed
    /// pixel registration instead of binning the predicted vertices.
    pub fn forward_tape_with(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &NetInput,
        lbs: &LbsConstants,
        registration: Option<&Registration>,
    ) -> Result<TapeOutputs> {
        if lbs.psi_len() != PSI_LEN {
            return Err(Error::ConfigInvalid(format!(
                "body model takes {} parameters, network predicts {PSI_LEN}",
                lbs.psi_len()
            )));
        }
        let (latent, pooled) = self.encode(tape, p, input)?;
        let gender = tape.constant(Tensor::new(&[1, 2], input.gender.one_hot().to_vec())?);
        let m = tape.concat_cols(&[pooled, gender])?;
        let m = self.layout.mesh1.apply(tape, p, m)?;
        let m = tape.relu(m);
        let raw = self.layout.mesh2.apply(tape, p, m)?;
        let raw = tape.reshape(raw, &[PSI_LEN])?;
        let std = tape.constant(Tensor::vector(self.norm.psi_std.clone()));
        let mean = tape.constant(Tensor::vector(self.norm.psi_mean.clone()));
        let psi = tape.mul(raw, std)?;
        let psi = tape.add(psi, mean)?;
        let (vertices, joints) = pose_on_tape(tape, lbs, psi)?;

        let reg = match registration {
            Some(r) => r.clone(),
            None => register_mesh(&self.config, &input.geometry, &points(tape.value(vertices))),
        };
        let image = tape.constant(Self::image_channels(input));
        let out = self.layout.head.forward(
            tape,
            p,
            &HeadInputs {
                vertices,
                image,
                latent,
                pooled,
                registration: reg,
            },
        )?;
        let nv = tape.shape(out)[0];
        let cols = tape.transpose(out)?;
        let pressure = tape.slice(cols, 0, &[nv])?;
        let pressure = tape.scale(pressure, self.norm.pressure_scale_kpa);
        let contact_logit = tape.slice(cols, nv, &[nv])?;
        let contact_prob = tape.sigmoid(contact_logit);
        Ok(TapeOutputs {
            psi,
            vertices,
            joints,
            pressure,
            contact_logit,
            contact_prob,
            latent,
            pooled,
        })
    }

    pub fn infer(&self, input: &NetInput, model: &BodyModel, lbs: &LbsConstants) -> Result<BodyMapOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let o = self.forward_tape(&mut tape, &p, input, lbs)?;
        let pressure = tape.value(o.pressure).data.clone();
        let contact_prob = tape.value(o.contact_prob).data.clone();
        let inference_map = gate(&pressure, &contact_prob);
        Ok(BodyMapOutput {
            params: BodyParams::from_vector(&tape.value(o.psi).data, NUM_BETAS, NUM_THETA, input.gender)?,
            mesh: PosedMesh::new(
                points(tape.value(o.vertices)),
                points(tape.value(o.joints)),
                model.faces.clone(),
            ),
            pressure,
            contact_prob,
            inference_map,
        })
    }

    /// Mesh, encoder features and image channels for the weakly supervised
    /// head; nothing here is trained further.
    pub fn frozen_features(&self, input: &NetInput, lbs: &LbsConstants) -> Result<FrozenFeatures> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let o = self.forward_tape(&mut tape, &p, input, lbs)?;
        Ok(FrozenFeatures {
            vertices: points(tape.value(o.vertices)),
            latent: tape.value(o.latent).clone(),
            pooled: tape.value(o.pooled).clone(),
            image: Self::image_channels(input),
            geometry: input.geometry,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(dir.as_ref(), "bodymap", &self.config, &self.norm, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (kind, config, norm, flat) = load_checkpoint(dir.as_ref())?;
        if kind != "bodymap" {
            return Err(Error::Format(format!("checkpoint holds a `{kind}` network")));
        }
        let mut net = BodyMapNet::new(config, norm)?;
        net.params.set_flat(&flat)?;
        Ok(net)
    }
}

/// Per-vertex pressure head trained from images alone on top of a frozen
/// [`BodyMapNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct WsNet {
    pub config: NetConfig,
    pub norm: Normalization,
    pub params: ParamStore,
    head: VertexHead,
}

impl WsNet {
    pub fn new(config: NetConfig, norm: Normalization) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x77);
        let head = VertexHead::new(&mut params, &mut rng, &config, "ws", 1);
        Ok(WsNet {
            config,
            norm,
            params,
            head,
        })
    }

    /// Per-vertex pressure `[N_v]` in kPa.
    pub fn forward_tape(&self, tape: &mut Tape, p: &[Var], f: &FrozenFeatures) -> Result<Var> {
        let vertices = tape.constant(Tensor::from_rows(&f.vertices));
        let inputs = HeadInputs {
            vertices,
            image: tape.constant(f.image.clone()),
            latent: tape.constant(f.latent.clone()),
            pooled: tape.constant(f.pooled.clone()),
            registration: register_mesh(&self.config, &f.geometry, &f.vertices),
        };
        let out = self.head.forward(tape, p, &inputs)?;
        let nv = f.vertices.len();
        let out = tape.reshape(out, &[nv])?;
        Ok(tape.scale(out, self.norm.pressure_scale_kpa))
    }

    pub fn infer(&self, f: &FrozenFeatures) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward_tape(&mut tape, &p, f)?;
        Ok(tape.value(out).data.clone())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(dir.as_ref(), "ws", &self.config, &self.norm, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (kind, config, norm, flat) = load_checkpoint(dir.as_ref())?;
        if kind != "ws" {
            return Err(Error::Format(format!("checkpoint holds a `{kind}` network")));
        }
        let mut net = WsNet::new(config, norm)?;
        net.params.set_flat(&flat)?;
        Ok(net)
    }
}

pub fn points(t: &Tensor) -> Vec<Vec3> {
    t.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Architecture {
    format: String,
    kind: String,
    config: NetConfig,
    norm: Normalization,
    param_names: Vec<String>,
    param_shapes: Vec<Vec<usize>>,
}

const CHECKPOINT_FORMAT: &str = "pressmap-net/1";

fn save_checkpoint(dir: &Path, kind: &str, config: &NetConfig, norm: &Normalization, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arch = Architecture {
        format: CHECKPOINT_FORMAT.into(),
        kind: kind.into(),
        config: config.clone(),
        norm: norm.clone(),
        param_names: params.names.clone(),
        param_shapes: params.shapes(),
    };
    let path = dir.join("arch.json");
    let text = serde_json::to_string_pretty(&arch).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    PmtTensor::f64(&[params.numel()], params.flat())?.save(dir.join("params.pmt"))
}

fn load_checkpoint(dir: &Path) -> Result<(String, NetConfig, Normalization, Vec<f64>)> {
    let path = dir.join("arch.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let arch: Architecture = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if arch.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format `{}`", arch.format)));
    }
    let flat = PmtTensor::load(dir.join("params.pmt"))?.to_f64();
    let expected: usize = arch.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if flat.len() != expected {
        return Err(Error::Format(format!("{} parameters stored, architecture needs {expected}", flat.len())));
    }
    Ok((arch.kind, arch.config, arch.norm, flat))
}
