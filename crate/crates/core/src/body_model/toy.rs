//! Procedural capsule-limb humanoid with the SMPL kinematic tree.
//!
//! Every body segment is a closed tube of vertex rings swept along a short
//! polyline of stations. Station cross-sections are superellipses; rings at
//! stations tagged with joints feed the joint regressor, and rings at three
//! torso stations double as chest, waist and hip measurement loops. Shape
//! directions are central differences of the procedural geometry with
//! respect to ten proportion knobs.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    BodyModel, Gender, JointLimits, NamedIndices, Vec3, NUM_BETAS, NUM_JOINTS, PART_NAMES,
    SMPL_PARENTS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub n_v: usize,
    pub seed: u64,
    pub gender: Gender,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            n_v: 690,
            seed: 7,
            gender: Gender::Neutral,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Torso,
    Head,
    UpperArm,
    Forearm,
    Thigh,
    Shin,
    Foot,
}

/// Axial interval of a bone along its segment, as station indices.
#[derive(Debug, Clone, Copy)]
enum Span {
    Before(usize),
    Between(usize, usize),
    After(usize),
}

struct SegmentDef {
    kind: Kind,
    side: Side,
    u_ref: Vector3<f64>,
    w_ref: Vector3<f64>,
    exponent: f64,
    station_joints: Vec<Vec<usize>>,
    bones: Vec<(usize, Span)>,
}

#[derive(Debug, Clone, Copy)]
struct Station {
    pos: Vector3<f64>,
    a: f64,
    b: f64,
}

struct SegmentGeom {
    stations: Vec<Station>,
    caps: (f64, f64),
}

/// Fewest vertices per ring; with one ring per station this puts the
/// smallest supported model at exactly 200 vertices.
const MIN_RING: usize = 4;

#[derive(Debug, Clone, Copy)]
struct RingDef {
    station: usize,
    frac: f64,
    count: usize,
}

struct Layout {
    rings: Vec<Vec<RingDef>>,
}

/// Proportion adjustments shared by gender presets, seed jitter and the ten
/// shape knobs.
#[derive(Debug, Clone, Copy)]
struct Proportions {
    stature: f64,
    girth: f64,
    torso_len: f64,
    leg_len: f64,
    arm_len: f64,
    shoulder: f64,
    hip: f64,
    belly: f64,
    head: f64,
    limb: f64,
}

impl Proportions {
    fn for_gender(gender: Gender) -> Self {
        let base = Proportions {
            stature: 1.0,
            girth: 1.0,
            torso_len: 0.0,
            leg_len: 0.0,
            arm_len: 0.0,
            shoulder: 0.0,
            hip: 0.0,
            belly: 0.0,
            head: 0.0,
            limb: 1.0,
        };
        match gender {
            Gender::Neutral => base,
            Gender::Female => Proportions {
                stature: 0.96,
                girth: 0.97,
                shoulder: -0.015,
                hip: 0.012,
                ..base
            },
            Gender::Male => Proportions {
                stature: 1.03,
                girth: 1.03,
                shoulder: 0.012,
                hip: -0.005,
                ..base
            },
        }
    }

    fn with_knobs(mut self, k: &[f64; NUM_BETAS]) -> Self {
        self.stature *= 1.0 + 0.04 * k[0];
        self.girth *= 1.0 + 0.10 * k[1];
        self.torso_len += 0.05 * k[2];
        self.leg_len += 0.05 * k[3];
        self.arm_len += 0.06 * k[4];
        self.shoulder += 0.012 * k[5];
        self.hip += 0.012 * k[6];
        self.belly += 0.015 * k[7];
        self.head += 0.008 * k[8];
        self.limb *= 1.0 + 0.10 * k[9];
        self
    }
}

fn v3(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

fn st(x: f64, y: f64, z: f64, a: f64, b: f64) -> Station {
    Station {
        pos: v3(x, y, z),
        a,
        b,
    }
}

fn segment_defs() -> Vec<SegmentDef> {
    let x = v3(1.0, 0.0, 0.0);
    let y = v3(0.0, 1.0, 0.0);
    let z = v3(0.0, 0.0, 1.0);
    let mut defs = vec![
        SegmentDef {
            kind: Kind::Torso,
            side: Side::Center,
            u_ref: x,
            w_ref: z,
            exponent: 3.0,
            station_joints: vec![vec![], vec![0], vec![3], vec![6], vec![9], vec![13, 14], vec![12]],
            bones: vec![
                (0, Span::Before(2)),
                (3, Span::Between(2, 3)),
                (6, Span::Between(3, 4)),
                (9, Span::Between(4, 6)),
                (12, Span::After(6)),
            ],
        },
        SegmentDef {
            kind: Kind::Head,
            side: Side::Center,
            u_ref: x,
            w_ref: z,
            exponent: 2.0,
            station_joints: vec![vec![], vec![15], vec![], vec![], vec![]],
            bones: vec![(12, Span::Before(1)), (15, Span::After(1))],
        },
    ];
    for side in [Side::Left, Side::Right] {
        let l = side == Side::Left;
        let (collar, shoulder, elbow, wrist, hand) = if l { (13, 16, 18, 20, 22) } else { (14, 17, 19, 21, 23) };
        let (hip, knee, ankle, foot) = if l { (1, 4, 7, 10) } else { (2, 5, 8, 11) };
        defs.push(SegmentDef {
            kind: Kind::UpperArm,
            side,
            u_ref: x,
            w_ref: z,
            exponent: 2.0,
            station_joints: vec![vec![shoulder, collar], vec![elbow]],
            bones: vec![
                (collar, Span::Before(0)),
                (shoulder, Span::Between(0, 1)),
                (elbow, Span::After(1)),
            ],
        });
        defs.push(SegmentDef {
            kind: Kind::Forearm,
            side,
            u_ref: x,
            w_ref: z,
            exponent: 2.0,
            station_joints: vec![vec![elbow], vec![wrist], vec![hand], vec![]],
            bones: vec![
                (shoulder, Span::Before(0)),
                (elbow, Span::Between(0, 1)),
                (wrist, Span::Between(1, 2)),
                (hand, Span::After(2)),
            ],
        });
        defs.push(SegmentDef {
            kind: Kind::Thigh,
            side,
            u_ref: x,
            w_ref: z,
            exponent: 2.0,
            station_joints: vec![vec![hip], vec![], vec![knee]],
            bones: vec![(0, Span::Before(0)), (hip, Span::Between(0, 2)), (knee, Span::After(2))],
        });
        defs.push(SegmentDef {
            kind: Kind::Shin,
            side,
            u_ref: x,
            w_ref: z,
            exponent: 2.0,
            station_joints: vec![vec![knee], vec![], vec![ankle]],
            bones: vec![(hip, Span::Before(0)), (knee, Span::Between(0, 2)), (ankle, Span::After(2))],
        });
        defs.push(SegmentDef {
            kind: Kind::Foot,
            side,
            u_ref: x,
            w_ref: y,
            exponent: 2.0,
            station_joints: vec![vec![], vec![], vec![foot], vec![]],
            bones: vec![(ankle, Span::Before(2)), (foot, Span::After(2))],
        });
    }
    defs
}

/// Station geometry for the given proportions, in segment_defs order.
fn build_geometry(p: &Proportions) -> Vec<SegmentGeom> {
    let g = p.girth;
    let lg = p.girth * p.limb;
    let hip_y = 0.87;
    let leg = 1.0 + p.leg_len;
    // Everything above the hips is lifted by the leg-length change.
    let lift = hip_y * p.leg_len;
    let torso = |y: f64| 0.93 + (y - 0.93) * (1.0 + p.torso_len) + lift;
    let top_shift = torso(1.40) - 1.40;

    let mut segs = Vec::new();
    segs.push(SegmentGeom {
        stations: vec![
            st(0.0, 0.80 + lift, 0.0, (0.13 + 0.01 * p.hip / 0.012) * g, 0.09 * g),
            st(0.0, 0.93 + lift, 0.0, (0.16 + 0.015 * p.hip / 0.012) * g, 0.105 * g),
            st(0.0, torso(1.03), 0.0, 0.14 * g, (0.095 + p.belly) * g),
            st(0.0, torso(1.15), 0.0, 0.145 * g, (0.10 + p.belly) * g),
            st(0.0, torso(1.28), 0.0, (0.16 + 0.8 * p.shoulder) * g, 0.105 * g),
            st(0.0, torso(1.40), 0.0, (0.15 + 0.8 * p.shoulder) * g, 0.09 * g),
            st(0.0, torso(1.45), 0.0, 0.06 * g, 0.055 * g),
        ],
        caps: (0.03, 0.012),
    });
    let head_r = 0.10 + p.head;
    let head_c = torso(1.45) + 0.05 + head_r;
    let head_ys: [f64; 5] = [-0.85, -0.5, 0.0, 0.5, 0.85];
    segs.push(SegmentGeom {
        stations: head_ys
            .iter()
            .map(|&f| {
                let r = head_r * (1.0 - f * f).sqrt();
                st(0.0, head_c + f * head_r, 0.01, r, r * 1.05)
            })
            .collect(),
        caps: (0.15 * head_r, 0.15 * head_r),
    });
    for sign in [1.0, -1.0] {
        let sh_x = 0.19 + p.shoulder;
        let sh_y = 1.40 + top_shift;
        let arm = 1.0 + p.arm_len;
        let along = |dx: f64, dy: f64| (sign * (sh_x + dx * arm + 0.3 * p.shoulder), sh_y + dy * arm);
        let (ex, ey) = along(0.03, -0.27);
        let (wx, wy) = along(0.05, -0.51);
        let (hx, hy) = along(0.055, -0.58);
        let (tx, ty) = along(0.06, -0.66);
        segs.push(SegmentGeom {
            stations: vec![
                st(sign * sh_x, sh_y, 0.0, 0.045 * lg, 0.045 * lg),
                st(ex, ey, 0.0, 0.038 * lg, 0.038 * lg),
            ],
            caps: (0.02, 0.01),
        });
        segs.push(SegmentGeom {
            stations: vec![
                st(ex, ey, 0.0, 0.037 * lg, 0.037 * lg),
                st(wx, wy, 0.0, 0.03 * lg, 0.028 * lg),
                st(hx, hy, 0.0, 0.036 * lg, 0.02 * lg),
                st(tx, ty, 0.0, 0.03 * lg, 0.015 * lg),
            ],
            caps: (0.01, 0.015),
        });
        let hx = sign * (0.09 + p.hip);
        let ky = 0.48 * leg;
        let ay = 0.09 * leg;
        segs.push(SegmentGeom {
            stations: vec![
                st(hx, hip_y * leg, 0.0, 0.075 * lg, 0.075 * lg),
                st(hx, 0.68 * leg, 0.0, 0.065 * lg, 0.065 * lg),
                st(hx, ky, 0.0, 0.05 * lg, 0.05 * lg),
            ],
            caps: (0.03, 0.01),
        });
        segs.push(SegmentGeom {
            stations: vec![
                st(hx, ky, 0.0, 0.05 * lg, 0.05 * lg),
                st(hx, 0.30 * leg, -0.005, 0.045 * lg, 0.047 * lg),
                st(hx, ay, 0.0, 0.033 * lg, 0.033 * lg),
            ],
            caps: (0.01, 0.02),
        });
        segs.push(SegmentGeom {
            stations: vec![
                st(hx, 0.045, -0.04, 0.035 * lg, 0.035),
                st(hx, 0.042, 0.06, 0.04 * lg, 0.033),
                st(hx, 0.036, 0.12, 0.04 * lg, 0.026),
                st(hx, 0.032, 0.17, 0.035 * lg, 0.02),
            ],
            caps: (0.025, 0.015),
        });
    }
    // Uniform stature scaling about the floor origin.
    for seg in &mut segs {
        for s in &mut seg.stations {
            s.pos *= p.stature;
            s.a *= p.stature;
            s.b *= p.stature;
        }
        seg.caps = (seg.caps.0 * p.stature, seg.caps.1 * p.stature);
    }
    segs
}

fn lerp_station(seg: &SegmentGeom, ring: &RingDef) -> (Station, Vector3<f64>) {
    let s = &seg.stations;
    let i = ring.station;
    let n = s.len();
    if i + 1 >= n || ring.frac == 0.0 {
        let dir_in = if i > 0 { (s[i].pos - s[i - 1].pos).normalize() } else { Vector3::zeros() };
        let dir_out = if i + 1 < n { (s[i + 1].pos - s[i].pos).normalize() } else { Vector3::zeros() };
        return (s[i], (dir_in + dir_out).normalize());
    }
    let (a, b, f) = (&s[i], &s[i + 1], ring.frac);
    (
        Station {
            pos: a.pos * (1.0 - f) + b.pos * f,
            a: a.a * (1.0 - f) + b.a * f,
            b: a.b * (1.0 - f) + b.b * f,
        },
        (b.pos - a.pos).normalize(),
    )
}

fn cross_section(t: f64, exponent: f64) -> (f64, f64) {
    let e = 2.0 / exponent;
    let (c, s) = (t.cos(), t.sin());
    (c.signum() * c.abs().powf(e), s.signum() * s.abs().powf(e))
}

/// Vertex positions for a fixed layout; vertex order is, per segment: start
/// cap, rings, end cap.
fn place_vertices(defs: &[SegmentDef], geom: &[SegmentGeom], layout: &Layout) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for ((def, seg), rings) in defs.iter().zip(geom).zip(&layout.rings) {
        let placed: Vec<(Station, Vector3<f64>)> = rings.iter().map(|r| lerp_station(seg, r)).collect();
        let (first, d_first) = placed[0];
        out.push(first.pos - d_first * seg.caps.0);
        for ((station, d), ring) in placed.iter().zip(rings) {
            let u = (def.u_ref - d * d.dot(&def.u_ref)).normalize();
            let w0 = def.w_ref - d * d.dot(&def.w_ref) - u * u.dot(&def.w_ref);
            let w = w0.normalize();
            for i in 0..ring.count {
                let t = -PI / 2.0 + 2.0 * PI * i as f64 / ring.count as f64;
                let (cx, cz) = cross_section(t, def.exponent);
                out.push(station.pos + u * (station.a * cx) + w * (station.b * cz));
            }
        }
        let (last, d_last) = *placed.last().unwrap();
        out.push(last.pos + d_last * seg.caps.1);
    }
    out
}

fn segment_area(seg: &SegmentGeom) -> (f64, f64) {
    let s = &seg.stations;
    let perim = |st: &Station| PI * (3.0 * (st.a + st.b) - ((3.0 * st.a + st.b) * (st.a + 3.0 * st.b)).sqrt());
    let mut area = 0.0;
    let mut perims = 0.0;
    for i in 0..s.len() - 1 {
        let len = (s[i + 1].pos - s[i].pos).norm();
        area += len * 0.5 * (perim(&s[i]) + perim(&s[i + 1]));
    }
    for st in s {
        perims += perim(st);
    }
    (area, perims / s.len() as f64)
}

fn make_layout(geom: &[SegmentGeom], n_v: usize) -> Result<Layout> {
    let total_area: f64 = geom.iter().map(|g| segment_area(g).0).sum();
    let mut h = (total_area / n_v as f64).sqrt();
    let build = |h: f64| -> Vec<Vec<RingDef>> {
        geom.iter()
            .map(|seg| {
                let (_, mean_perim) = segment_area(seg);
                let count = ((mean_perim / h).round() as usize)
                    .max(MIN_RING);
                let mut rings = Vec::new();
                for i in 0..seg.stations.len() {
                    rings.push(RingDef { station: i, frac: 0.0, count });
                    if i + 1 < seg.stations.len() {
                        let len = (seg.stations[i + 1].pos - seg.stations[i].pos).norm();
                        let m = ((len / h).round() as usize).max(1);
                        for k in 1..m {
                            rings.push(RingDef {
                                station: i,
                                frac: k as f64 / m as f64,
                                count,
                            });
                        }
                    }
                }
                rings
            })
            .collect()
    };
    let count = |rings: &Vec<Vec<RingDef>>| -> usize {
        rings.iter().map(|r| 2 + r.iter().map(|x| x.count).sum::<usize>()).sum()
    };
    let mut rings = build(h);
    while count(&rings) > n_v {
        if h > 10.0 {
            return Err(Error::ConfigInvalid(format!("cannot fit the toy topology into {n_v} vertices")));
        }
        h *= 1.03;
        rings = build(h);
    }
    // Hand out the remainder one vertex per ring, round-robin over all rings.
    let mut remainder = n_v - count(&rings);
    let n_rings: usize = rings.iter().map(|r| r.len()).sum();
    let mut cursor = 0;
    while remainder > 0 {
        let mut idx = cursor % n_rings;
        for seg in rings.iter_mut() {
            if idx < seg.len() {
                seg[idx].count += 1;
                break;
            }
            idx -= seg.len();
        }
        cursor += 1;
        remainder -= 1;
    }
    Ok(Layout { rings })
}

/// Zipper triangulation between two rings of possibly different sizes.
fn zip_rings(a0: usize, na: usize, b0: usize, nb: usize, faces: &mut Vec<[usize; 3]>) {
    let (mut i, mut j) = (0usize, 0usize);
    while i < na || j < nb {
        let adv_a = if i == na {
            false
        } else if j == nb {
            true
        } else {
            ((i + 1) as f64 / na as f64) <= ((j + 1) as f64 / nb as f64)
        };
        if adv_a {
            faces.push([a0 + i % na, a0 + (i + 1) % na, b0 + j % nb]);
            i += 1;
        } else {
            faces.push([a0 + i % na, b0 + (j + 1) % nb, b0 + j % nb]);
            j += 1;
        }
    }
}

struct Topology {
    faces: Vec<[usize; 3]>,
    /// (segment, ring index within segment) -> first vertex, count
    ring_ranges: Vec<Vec<(usize, usize)>>,
    /// (segment) -> (start cap, end cap)
    caps: Vec<(usize, usize)>,
    /// Segment owning each vertex.
    owner: Vec<usize>,
}

fn build_topology(layout: &Layout) -> Topology {
    let mut faces = Vec::new();
    let mut ring_ranges = Vec::new();
    let mut caps = Vec::new();
    let mut owner = Vec::new();
    let mut next = 0usize;
    for (s, rings) in layout.rings.iter().enumerate() {
        let start_cap = next;
        next += 1;
        let mut ranges = Vec::new();
        for r in rings {
            ranges.push((next, r.count));
            next += r.count;
        }
        let end_cap = next;
        next += 1;
        owner.resize(next, s);
        let (f0, n0) = ranges[0];
        for i in 0..n0 {
            faces.push([start_cap, f0 + (i + 1) % n0, f0 + i]);
        }
        for w in ranges.windows(2) {
            zip_rings(w[0].0, w[0].1, w[1].0, w[1].1, &mut faces);
        }
        let (fl, nl) = *ranges.last().unwrap();
        for i in 0..nl {
            faces.push([end_cap, fl + i, fl + (i + 1) % nl]);
        }
        ring_ranges.push(ranges);
        caps.push((start_cap, end_cap));
    }
    Topology {
        faces,
        ring_ranges,
        caps,
        owner,
    }
}

fn joint_limits() -> Vec<JointLimits> {
    let z = [0.0, 0.0];
    let spine = [[-0.1, 0.15], [-0.1, 0.1], [-0.08, 0.08]];
    let mut limits = vec![[z, z, z]; NUM_JOINTS];
    limits[3] = spine;
    limits[6] = spine;
    limits[9] = spine;
    limits[12] = [[-0.2, 0.2], [-0.3, 0.3], [-0.1, 0.1]];
    limits[15] = [[-0.2, 0.2], [-0.3, 0.3], [-0.1, 0.1]];
    for (l, sign) in [(true, 1.0), (false, -1.0)] {
        let pick = |a: usize, b: usize| if l { a } else { b };
        let out = |lo: f64, hi: f64| if sign > 0.0 { [lo, hi] } else { [-hi, -lo] };
        limits[pick(1, 2)] = [[-0.6, 0.05], [-0.2, 0.2], out(-0.05, 0.25)];
        limits[pick(4, 5)] = [[0.0, 0.9], [-0.05, 0.05], [-0.05, 0.05]];
        limits[pick(7, 8)] = [[-0.3, 0.3], [-0.1, 0.1], [-0.1, 0.1]];
        limits[pick(13, 14)] = [[-0.1, 0.1], [-0.1, 0.1], [-0.1, 0.1]];
        limits[pick(16, 17)] = [[-0.5, 0.3], [-0.3, 0.3], out(-0.05, 0.25)];
        limits[pick(18, 19)] = [[-1.2, 0.0], [-0.2, 0.2], [-0.05, 0.05]];
        limits[pick(20, 21)] = [[-0.2, 0.2], [-0.2, 0.2], [-0.2, 0.2]];
    }
    limits
}

fn point_on_span(s: f64, span: Span, station_s: &[f64]) -> f64 {
    let (lo, hi) = match span {
        Span::Before(i) => (f64::NEG_INFINITY, station_s[i]),
        Span::Between(i, j) => (station_s[i], station_s[j]),
        Span::After(i) => (station_s[i], f64::INFINITY),
    };
    if s < lo {
        lo - s
    } else if s > hi {
        s - hi
    } else {
        0.0
    }
}

/// Generates a deterministic toy body model.
pub fn generate_toy_model(config: &ToyModelConfig) -> Result<BodyModel> {
    if config.n_v < 200 {
        return Err(Error::ConfigInvalid(format!(
            "toy model needs at least 200 vertices, got {}",
            config.n_v
        )));
    }
    if config.n_v > 200_000 {
        return Err(Error::ConfigInvalid(format!("n_v = {} is too large", config.n_v)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut base = Proportions::for_gender(config.gender);
    base.stature *= 1.0 + rng.random_range(-0.01..0.01);
    base.girth *= 1.0 + rng.random_range(-0.02..0.02);
    base.limb *= 1.0 + rng.random_range(-0.02..0.02);

    let defs = segment_defs();
    let geom0 = build_geometry(&base);
    // Topology depends only on n_v, so every gender and seed shares faces.
    let layout = make_layout(&build_geometry(&Proportions::for_gender(Gender::Neutral)), config.n_v)?;
    let topo = build_topology(&layout);
    let template = place_vertices(&defs, &geom0, &layout);
    let nv = template.len();
    debug_assert_eq!(nv, config.n_v);

    // Shape directions: central differences of the procedural geometry.
    let nb = NUM_BETAS;
    let mut shape_basis = vec![0.0; nv * 3 * nb];
    for k in 0..nb {
        let mut plus = [0.0; NUM_BETAS];
        let mut minus = [0.0; NUM_BETAS];
        plus[k] = 0.5;
        minus[k] = -0.5;
        let vp = place_vertices(&defs, &build_geometry(&base.with_knobs(&plus)), &layout);
        let vm = place_vertices(&defs, &build_geometry(&base.with_knobs(&minus)), &layout);
        for v in 0..nv {
            for a in 0..3 {
                shape_basis[(v * 3 + a) * nb + k] = vp[v][a] - vm[v][a];
            }
        }
    }

    // Joint regressor: uniform average over the rings tagged with each joint.
    let mut joint_regressor = vec![0.0; NUM_JOINTS * nv];
    let mut tagged: Vec<Vec<(usize, usize)>> = vec![Vec::new(); NUM_JOINTS];
    for (s, def) in defs.iter().enumerate() {
        for (r, ring) in layout.rings[s].iter().enumerate() {
            if ring.frac == 0.0 {
                for &j in &def.station_joints[ring.station] {
                    tagged[j].push(topo.ring_ranges[s][r]);
                }
            }
        }
    }
    for (j, rings) in tagged.iter().enumerate() {
        assert!(!rings.is_empty(), "joint {j} has no regressor ring");
        let ring_w = 1.0 / rings.len() as f64;
        for &(start, count) in rings {
            for v in start..start + count {
                joint_regressor[j * nv + v] += ring_w / count as f64;
            }
        }
    }

    // Skinning: Gaussian falloff of the axial distance to each bone's span.
    let sigma = 0.04 * base.stature;
    let mut skin_weights = vec![0.0; nv * NUM_JOINTS];
    for (s, def) in defs.iter().enumerate() {
        let stations = &geom0[s].stations;
        let mut station_s = vec![0.0];
        for w in stations.windows(2) {
            station_s.push(station_s.last().unwrap() + (w[1].pos - w[0].pos).norm());
        }
        let ring_s = |r: &RingDef| {
            if r.station + 1 < station_s.len() {
                station_s[r.station] * (1.0 - r.frac) + station_s[r.station + 1] * r.frac
            } else {
                station_s[r.station]
            }
        };
        let mut axial: Vec<(usize, f64)> = Vec::new();
        axial.push((topo.caps[s].0, -geom0[s].caps.0));
        for (r, ring) in layout.rings[s].iter().enumerate() {
            let (start, count) = topo.ring_ranges[s][r];
            for v in start..start + count {
                axial.push((v, ring_s(ring)));
            }
        }
        axial.push((topo.caps[s].1, station_s.last().unwrap() + geom0[s].caps.1));
        for (v, sv) in axial {
            let raw: Vec<(usize, f64)> = def
                .bones
                .iter()
                .map(|&(j, span)| {
                    let d = point_on_span(sv, span, &station_s);
                    (j, (-(d / sigma).powi(2)).exp())
                })
                .collect();
            let max = raw.iter().map(|r| r.1).fold(0.0, f64::max);
            let kept: Vec<(usize, f64)> = raw.into_iter().filter(|r| r.1 >= 1e-3 * max).collect();
            let total: f64 = kept.iter().map(|r| r.1).sum();
            for (j, w) in kept {
                skin_weights[v * NUM_JOINTS + j] += w / total;
            }
        }
    }

    let template_vertices: Vec<Vec3> = template.iter().map(|p| [p.x, p.y, p.z]).collect();
    let part_masks = assign_parts(&defs, &geom0, &topo, &template_vertices);
    let ring_at = |station: usize| {
        let r = layout.rings[0]
            .iter()
            .position(|r| r.station == station && r.frac == 0.0)
            .expect("torso station ring");
        let (start, count) = topo.ring_ranges[0][r];
        (start..start + count).collect::<Vec<_>>()
    };
    let measurement_rings = vec![
        NamedIndices {
            name: "chest".into(),
            indices: ring_at(4),
        },
        NamedIndices {
            name: "waist".into(),
            indices: ring_at(2),
        },
        NamedIndices {
            name: "hips".into(),
            indices: ring_at(1),
        },
    ];

    let model = BodyModel {
        template_vertices,
        faces: Arc::new(topo.faces),
        shape_basis,
        n_betas: nb,
        joint_regressor,
        skin_weights,
        kinematic_parents: SMPL_PARENTS.to_vec(),
        part_masks,
        measurement_rings,
        joint_limits: joint_limits(),
        gender: config.gender,
    };
    model.validate()?;
    Ok(model)
}

fn assign_parts(defs: &[SegmentDef], geom: &[SegmentGeom], topo: &Topology, verts: &[Vec3]) -> Vec<NamedIndices> {
    let torso = &geom[0].stations;
    let (y_hip, y_j3, y_j13) = (torso[1].pos.y, torso[2].pos.y, torso[5].pos.y);
    let y_j9 = torso[4].pos.y;
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); PART_NAMES.len()];
    let idx = |name: &str| PART_NAMES.iter().position(|n| *n == name).unwrap();
    for (v, p) in verts.iter().enumerate() {
        let s = topo.owner[v];
        let def = &defs[s];
        let stations = &geom[s].stations;
        let left = def.side == Side::Left;
        let lr = |l: &str, r: &str| if left { idx(l) } else { idx(r) };
        let pos = Vector3::from(*p);
        let part = match def.kind {
            Kind::Head => Some(idx("head")),
            Kind::Foot => {
                let heel_end = stations[0].pos.z + 0.35 * (stations[3].pos.z - stations[0].pos.z);
                let toe_start = stations[0].pos.z + 0.65 * (stations[3].pos.z - stations[0].pos.z);
                if p[2] <= heel_end {
                    Some(lr("left_heel", "right_heel"))
                } else if p[2] >= toe_start {
                    Some(lr("left_toes", "right_toes"))
                } else {
                    None
                }
            }
            Kind::UpperArm | Kind::Forearm => {
                let elbow = if def.kind == Kind::UpperArm { stations[1].pos } else { stations[0].pos };
                let shoulder_dist = if def.kind == Kind::UpperArm {
                    (pos - stations[0].pos).norm()
                } else {
                    f64::INFINITY
                };
                if (pos - elbow).norm() <= 0.07 {
                    Some(lr("left_elbow", "right_elbow"))
                } else if shoulder_dist <= 0.08 {
                    Some(lr("left_shoulder", "right_shoulder"))
                } else {
                    None
                }
            }
            Kind::Thigh => {
                if (pos - stations[0].pos).norm() <= 0.12 {
                    Some(lr("left_hip", "right_hip"))
                } else {
                    None
                }
            }
            Kind::Shin => None,
            Kind::Torso => {
                let back = p[2] < 0.0;
                let central = p[0].abs() <= 0.09;
                let side = |l: &str, r: &str| if p[0] > 0.0 { idx(l) } else { idx(r) };
                if p[1] > y_j9 + 0.5 * (y_j13 - y_j9) && p[0].abs() > 0.09 {
                    Some(side("left_shoulder", "right_shoulder"))
                } else if p[1] < y_hip + 0.02 && p[0].abs() > 0.10 {
                    Some(side("left_hip", "right_hip"))
                } else if back && central && p[1] < y_hip - 0.05 {
                    Some(idx("ischium"))
                } else if back && central && p[1] <= y_j3 {
                    Some(idx("sacrum"))
                } else if back && central && p[1] <= y_j13 + 1e-9 {
                    Some(idx("spine"))
                } else {
                    None
                }
            }
        };
        if let Some(k) = part {
            parts[k].push(v);
        }
    }
    PART_NAMES
        .iter()
        .zip(parts)
        .map(|(name, indices)| NamedIndices {
            name: name.to_string(),
            indices,
        })
        .collect()
}
