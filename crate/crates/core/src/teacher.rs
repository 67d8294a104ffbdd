//! Frozen geometry teacher.
//!
//! Features are computed from scene geometry alone (cells, depths, glyph
//! footprints), never from colors, and nothing in here has a gradient.

use std::path::Path;

use crate::error::{GladError, Result};
use crate::task::{render, Scene, CELL_PIXELS, GRID, TABLE_DEPTH};
use crate::tensor::{Rng, Tensor};

pub const MAGIC: &[u8; 4] = b"GTEA";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Raw descriptor width: depth, unit point (3), distance to the nearest
/// object centre, depth gradient (2).
pub const DESCRIPTOR_DIM: usize = 7;
/// Extra depth per frame of history.
const FRAME_STEP: f64 = 0.05;

/// `frames × tokens × dim` teacher features.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryFeatureMap {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl GeometryFeatureMap {
    pub fn new(frames: usize, tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * tokens * dim {
            return Err(GladError::dim(
                "GeometryFeatureMap",
                &[frames, tokens, dim],
                &[data.len()],
            ));
        }
        Ok(GeometryFeatureMap {
            frames,
            tokens,
            dim,
            data,
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.tokens * self.dim;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Teacher settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeacherConfig {
    pub frames: usize,
    /// Token count per frame; must be `16·s²` for a sub-grid of `s×s` per
    /// cell with `s` dividing the cell width.
    pub tokens: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            frames: 1,
            tokens: 64,
            dim: 32,
            seed: 0,
        }
    }
}

fn sub_grid(tokens: usize) -> Result<usize> {
    let cells = GRID * GRID;
    let s = (1..=CELL_PIXELS)
        .find(|&s| cells * s * s == tokens && CELL_PIXELS % s == 0)
        .ok_or_else(|| {
            GladError::Config(format!(
                "teacher token count {tokens} is not 16·s² for s dividing {CELL_PIXELS}"
            ))
        })?;
    Ok(s)
}

/// Raw 7-d descriptor of every token in cell-major order (all sub-tokens of
/// cell 0, then cell 1, ...), with every depth pushed back by `offset`.
pub fn descriptors(scene: &Scene, tokens: usize, offset: f64) -> Result<Vec<[f64; DESCRIPTOR_DIM]>> {
    if scene.objects.is_empty() {
        return Err(GladError::Contract("scene carries no object geometry".into()));
    }
    let s = sub_grid(tokens)?;
    let g = GRID * s;
    let px = CELL_PIXELS / s;

    // raster depth map on the token grid
    let mut depth = vec![0.0; g * g];
    for ty in 0..g {
        for tx in 0..g {
            let cell = (tx / s, ty / s);
            // nearest visible surface in the token footprint
            let hit = scene.object_at(cell).filter(|o| {
                (ty * px..(ty + 1) * px)
                    .any(|y| (tx * px..(tx + 1) * px).any(|x| render::covers(o, x as f64 + 0.5, y as f64 + 0.5)))
            });
            let d = hit.map_or(TABLE_DEPTH, |o| o.depth);
            depth[ty * g + tx] = d + offset;
        }
    }

    let centres: Vec<[f64; 3]> = scene
        .objects
        .iter()
        .map(|o| {
            let u = (o.cell.0 as f64 + 0.5) / GRID as f64 * 2.0 - 1.0;
            let v = (o.cell.1 as f64 + 0.5) / GRID as f64 * 2.0 - 1.0;
            let z = o.depth + offset;
            [u * z, v * z, z]
        })
        .collect();

    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, g as isize - 1) as usize;
        let cy = y.clamp(0, g as isize - 1) as usize;
        depth[cy * g + cx]
    };

    let mut out = vec![[0.0; DESCRIPTOR_DIM]; tokens];
    for ty in 0..g {
        for tx in 0..g {
            let z = depth[ty * g + tx];
            let u = (tx as f64 + 0.5) / g as f64 * 2.0 - 1.0;
            let v = (ty as f64 + 0.5) / g as f64 * 2.0 - 1.0;
            let p = [u * z, v * z, z];
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let dist = centres
                .iter()
                .map(|c| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let (x, y) = (tx as isize, ty as isize);
            let gx = (at(x + 1, y) - at(x - 1, y)) * 0.5 * s as f64;
            let gy = (at(x, y + 1) - at(x, y - 1)) * 0.5 * s as f64;
            let cell = (ty / s) * GRID + tx / s;
            let idx = cell * s * s + (ty % s) * s + tx % s;
            out[idx] = [z, p[0] / norm, p[1] / norm, p[2] / norm, dist, gx, gy];
        }
    }
    Ok(out)
}

/// Fixed random lift `dim × DESCRIPTOR_DIM` and bias drawn from `seed`.
fn lift(seed: u64, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = Rng::named(seed, "teacher.lift");
    let scale = 2.0 / (DESCRIPTOR_DIM as f64).sqrt();
    let w = (0..dim * DESCRIPTOR_DIM).map(|_| rng.normal() * scale).collect();
    let b = (0..dim).map(|_| rng.normal() * 0.5).collect();
    (w, b)
}

// rough centring so the lift starts near tanh's linear range
const CENTRE: [f64; DESCRIPTOR_DIM] = [0.9, 0.0, 0.0, 0.9, 0.5, 0.0, 0.0];

/// The frozen teacher: a fixed lift of geometric descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryTeacher {
    pub cfg: TeacherConfig,
    /// `dim × DESCRIPTOR_DIM`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GeometryTeacher {
    pub fn new(cfg: TeacherConfig) -> Result<Self> {
        if cfg.frames == 0 || cfg.dim == 0 {
            return Err(GladError::Config(
                "teacher needs at least one frame and one dimension".into(),
            ));
        }
        sub_grid(cfg.tokens)?;
        let (weight, bias) = lift(cfg.seed, cfg.dim);
        Ok(GeometryTeacher { cfg, weight, bias })
    }

    /// Features for `frames` frames of `tokens` tokens each. Frame `T-1` is
    /// the current view; earlier frames see the scene from further away.
    pub fn features(&self, scene: &Scene) -> Result<GeometryFeatureMap> {
        let cfg = &self.cfg;
        let (w, b) = (&self.weight, &self.bias);
        let mut data = Vec::with_capacity(cfg.frames * cfg.tokens * cfg.dim);
        for t in 0..cfg.frames {
            let offset = FRAME_STEP * (cfg.frames - 1 - t) as f64;
            let desc = descriptors(scene, cfg.tokens, offset)?;
            let mut f = vec![0.0f64; cfg.tokens * cfg.dim];
            for (i, d) in desc.iter().enumerate() {
                for k in 0..cfg.dim {
                    let mut a = b[k];
                    for j in 0..DESCRIPTOR_DIM {
                        a += w[k * DESCRIPTOR_DIM + j] * (d[j] - CENTRE[j]);
                    }
                    f[i * cfg.dim + k] = a.tanh();
                }
            }
            for k in 0..cfg.dim {
                let mut ss = 0.0;
                for i in 0..cfg.tokens {
                    ss += f[i * cfg.dim + k] * f[i * cfg.dim + k];
                }
                let rms = (ss / cfg.tokens as f64).sqrt();
                let inv = if rms > 1e-12 { 1.0 / rms } else { 1.0 };
                for i in 0..cfg.tokens {
                    f[i * cfg.dim + k] *= inv;
                }
            }
            data.extend(f.iter().map(|&x| x as f32));
        }
        GeometryFeatureMap::new(cfg.frames, cfg.tokens, cfg.dim, data)
    }

    /// Pooled last-frame features `[n_patches, dim]`.
    pub fn single_frame(&self, scene: &Scene, n_patches: usize) -> Result<Tensor<f32>> {
        last_frame(&adaptive_pool(&self.features(scene)?, n_patches)?)
    }
}

/// Teacher features for one scene under `cfg`.
pub fn teacher_features(scene: &Scene, cfg: &TeacherConfig) -> Result<GeometryFeatureMap> {
    GeometryTeacher::new(*cfg)?.features(scene)
}

/// Token `j` of the output averages input tokens
/// `[floor(j·L/n), ceil((j+1)·L/n))`, frame by frame.
pub fn adaptive_pool(fmap: &GeometryFeatureMap, n: usize) -> Result<GeometryFeatureMap> {
    let l = fmap.tokens;
    if l == 0 || n == 0 {
        return Err(GladError::Contract(format!("adaptive_pool from {l} to {n} tokens")));
    }
    let d = fmap.dim;
    let mut data = Vec::with_capacity(fmap.frames * n * d);
    let mut acc = vec![0.0f64; d];
    for t in 0..fmap.frames {
        let frame = fmap.frame(t);
        for j in 0..n {
            let start = j * l / n;
            let end = ((j + 1) * l).div_ceil(n);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for i in start..end {
                for (a, &x) in acc.iter_mut().zip(&frame[i * d..(i + 1) * d]) {
                    *a += x as f64;
                }
            }
            let count = (end - start) as f64;
            data.extend(acc.iter().map(|&a| (a / count) as f32));
        }
    }
    GeometryFeatureMap::new(fmap.frames, n, d, data)
}

/// Features of the most recent frame as a `tokens × dim` tensor.
pub fn last_frame(fmap: &GeometryFeatureMap) -> Result<Tensor<f32>> {
    if fmap.frames == 0 {
        return Err(GladError::Contract("feature map has no frames".into()));
    }
    Tensor::new(&[fmap.tokens, fmap.dim], fmap.frame(fmap.frames - 1).to_vec())
}

/// Pooled single-frame features `n_patches × dim` for one scene.
pub fn single_frame(scene: &Scene, cfg: &TeacherConfig, n_patches: usize) -> Result<Tensor<f32>> {
    GeometryTeacher::new(*cfg)?.single_frame(scene, n_patches)
}

pub fn encode_teacher_file(fmap: &GeometryFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + fmap.data.len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, fmap.frames as u32, fmap.tokens as u32, fmap.dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in &fmap.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_teacher_file(bytes: &[u8]) -> Result<GeometryFeatureMap> {
    let fmt = |offset: usize, msg: String| GladError::Format { offset, msg };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt(0, "bad magic, expected GTEA".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), "truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != FORMAT_VERSION {
        return Err(fmt(4, format!("unsupported version {}", word(0))));
    }
    let (t, l, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = t
        .checked_mul(l)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| fmt(8, "feature count overflows".into()))?;
    let want = HEADER_LEN + n * 4;
    if bytes.len() < want {
        return Err(fmt(bytes.len(), format!("truncated payload, expected {want} bytes")));
    }
    if bytes.len() > want {
        return Err(fmt(want, "trailing bytes after payload".into()));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    GeometryFeatureMap::new(t, l, d, data)
}

pub fn save_teacher_file(fmap: &GeometryFeatureMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_teacher_file(fmap)).map_err(|e| GladError::io(path, e))
}

pub fn load_teacher_file(path: &Path) -> Result<GeometryFeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| GladError::io(path, e))?;
    decode_teacher_file(&bytes)
}
