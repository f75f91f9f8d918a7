//! File formats and the on-disk dataset layout.
//!
//! - images: PNG, written as 8-bit RGB, read from any 8/16-bit PNG
//! - masks: 8-bit grayscale PNG, `> 127` is true
//! - depth: PFM (`Pf`, little endian) plus a `.mask.png` validity mask
//! - flow: `FLO2` binary plus a `.mask.png` validity mask
//! - voxel flow: `VXF1` binary
//! - Gaussians and point clouds: binary little-endian PLY

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Intrinsics, Pose, ReadoutSchedule, ScanDirection};
use crate::depthfuse::PointCloud;
use crate::flowfuse::{VoxelFlowField, VoxelGridSpec};
use crate::gaussians::{DynamicGaussian, GaussianScene, StaticGaussian, DYNAMIC_PARAMS, STATIC_PARAMS};
use crate::raster::{DepthMap, FlowMap, Image, Mask, Raster, ScalarMap};
use crate::sync::LedLayout;
use crate::synth::{SynthBundle, SynthSpec};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing input: {0}")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::Missing(path.to_path_buf())
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let ptr = e.path().to_string();
        IoError::format(path, format!("at {ptr}: {}", e.into_inner()))
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

// ---------------------------------------------------------------- PNG

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_bytes(path)?;
    if !bytes.starts_with(PNG_MAGIC) {
        return Err(IoError::format(path, "not a PNG file"));
    }
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| IoError::format(path, e.to_string()))
}

fn encode_png(path: &Path, img: image::DynamicImage) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| IoError::format(path, e.to_string()))?;
    write_bytes(path, &buf.into_inner())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = decode_png(path)?.to_rgb16();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|v| v as f64 / 65535.0))
        .collect();
    Ok(Raster::from_vec(w as usize, h as usize, data).expect("sized"))
}

/// 8-bit RGB: each channel is clamped to `[0, 1]`, scaled by 255 and rounded
/// half away from zero.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let raw: Vec<u8> = image.as_slice().iter().flat_map(|p| p.map(to_u8)).collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, raw).expect("sized");
    encode_png(path, image::DynamicImage::ImageRgb8(buf))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = decode_png(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] > 127).collect();
    Ok(Raster::from_vec(w as usize, h as usize, data).expect("sized"))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw: Vec<u8> = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("sized");
    encode_png(path, image::DynamicImage::ImageLuma8(buf))
}

// ---------------------------------------------------------------- PFM

/// Sibling validity mask of a depth or flow file: `d.pfm` -> `d.mask.png`.
pub fn validity_mask_path(path: &Path) -> PathBuf {
    path.with_extension("mask.png")
}

fn read_validity(path: &Path, w: usize, h: usize) -> Result<Option<Mask>> {
    let mp = validity_mask_path(path);
    if !mp.exists() {
        return Ok(None);
    }
    let m = read_mask(&mp)?;
    if m.shape() != (w, h) {
        return Err(IoError::format(&mp, format!("mask is {:?}, data is {w}x{h}", m.shape())));
    }
    Ok(Some(m))
}

/// Reads a header line of ASCII tokens.
fn header_line(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| IoError::io(path, e))?;
    if line.is_empty() {
        return Err(IoError::format(path, "truncated header"));
    }
    Ok(line.trim().to_string())
}

fn read_f32s(r: &mut impl Read, n: usize, little: bool, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)
        .map_err(|_| IoError::format(path, format!("expected {n} floats of payload")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| IoError::io(path, e))?;
    if !rest.is_empty() {
        return Err(IoError::format(path, "trailing bytes after payload"));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect())
}

/// Grayscale PFM plus the sibling validity mask. Without a mask, values that
/// are not finite and positive count as invalid.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let mut r = BufReader::new(bytes.as_slice());
    if header_line(&mut r, path)? != "Pf" {
        return Err(IoError::format(path, "not a grayscale PFM (expected 'Pf')"));
    }
    let dims = header_line(&mut r, path)?;
    let d: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| IoError::format(path, format!("bad size '{dims}'"))))
        .collect::<Result<_>>()?;
    let [w, h] = d[..] else {
        return Err(IoError::format(path, format!("bad size '{dims}'")));
    };
    let scale: f64 = header_line(&mut r, path)?
        .parse()
        .map_err(|_| IoError::format(path, "bad scale"))?;
    if scale == 0.0 || w == 0 || h == 0 {
        return Err(IoError::format(path, "zero scale or size"));
    }
    let px = read_f32s(&mut r, w * h, scale < 0.0, path)?;
    // rows are stored bottom to top
    let values = Raster::from_fn(w, h, |x, y| px[(h - 1 - y) * w + x] as f64);
    let valid = match read_validity(path, w, h)? {
        Some(m) => Raster::from_fn(w, h, |x, y| *m.get(x, y) && values.get(x, y).is_finite()),
        None => values.map(|&v| v.is_finite() && v > 0.0),
    };
    let values = Raster::from_fn(w, h, |x, y| if *valid.get(x, y) { *values.get(x, y) } else { 0.0 });
    Ok(DepthMap::with_mask(values, valid).expect("same shape"))
}

/// A bare scalar PFM with no validity mask (used for alpha).
pub fn write_pfm(path: &Path, values: &ScalarMap) -> Result<()> {
    let (w, h) = values.shape();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*values.get(x, y) as f32).to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

/// Little-endian PFM (scale -1.0); invalid pixels hold 0 and are flagged in
/// the sibling mask.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = depth.shape();
    write_pfm(path, &Raster::from_fn(w, h, |x, y| depth.at(x, y).unwrap_or(0.0)))?;
    let valid = Raster::from_fn(w, h, |x, y| depth.at(x, y).is_some());
    write_mask(&validity_mask_path(path), &valid)
}

// ---------------------------------------------------------------- FLO2

const FLO_MAGIC: &[u8; 4] = b"FLO2";

/// `FLO2`, u32 width and height, then row-major f32 `(u, v)` pairs, plus the
/// sibling validity mask. Without a mask, finite vectors count as valid.
pub fn read_flow(path: &Path) -> Result<FlowMap> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 12 || &bytes[0..4] != FLO_MAGIC {
        return Err(IoError::format(path, "not a FLO2 flow file"));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if w == 0 || h == 0 {
        return Err(IoError::format(path, format!("bad size {w}x{h}")));
    }
    let mut r = &bytes[12..];
    let px = read_f32s(&mut r, 2 * w * h, true, path)?;
    let flow = Raster::from_fn(w, h, |x, y| {
        let i = 2 * (y * w + x);
        [px[i] as f64, px[i + 1] as f64]
    });
    let finite = flow.map(|f| f[0].is_finite() && f[1].is_finite());
    let valid = match read_validity(path, w, h)? {
        Some(m) => Raster::from_fn(w, h, |x, y| *m.get(x, y) && *finite.get(x, y)),
        None => finite,
    };
    let flow = Raster::from_fn(w, h, |x, y| if *valid.get(x, y) { *flow.get(x, y) } else { [0.0; 2] });
    Ok(FlowMap::new(flow, valid).expect("same shape"))
}

pub fn write_flow(path: &Path, flow: &FlowMap) -> Result<()> {
    let (w, h) = flow.shape();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let [u, v] = if *flow.valid.get(x, y) {
                flow.flow.get(x, y).map(|c| c as f32)
            } else {
                [0.0; 2]
            };
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)?;
    write_mask(&validity_mask_path(path), &flow.valid)
}

// ---------------------------------------------------------------- VXF1

const VXF_MAGIC: &[u8; 4] = b"VXF1";
const VXF_HEADER: usize = 4 + 32 + 12;
const VXF_VOXEL: usize = 1 + 16;

struct Cursor<'a> {
    data: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() < n {
            return Err(IoError::format(self.path, "unexpected end of file"));
        }
        let (a, b) = self.data.split_at(n);
        self.data = b;
        Ok(a)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn finish(&self) -> Result<()> {
        if self.data.is_empty() {
            Ok(())
        } else {
            Err(IoError::format(self.path, "trailing bytes after payload"))
        }
    }
}

/// Header: magic, origin (f64 x3), voxel size (f64), dims (u32 x3). Then per
/// voxel in x-fastest order: occupied (u8), flow (f32 x3), confidence (f32).
pub fn write_voxel_flow(path: &Path, field: &VoxelFlowField) -> Result<()> {
    let g = &field.grid;
    let mut out = Vec::with_capacity(VXF_HEADER + VXF_VOXEL * g.len());
    out.extend_from_slice(VXF_MAGIC);
    for v in [g.origin.x, g.origin.y, g.origin.z, g.voxel_size] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in g.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for i in 0..g.len() {
        out.push(field.occupied[i] as u8);
        let f = field.flow[i];
        for v in [f.x, f.y, f.z, field.confidence[i]] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_voxel_flow(path: &Path) -> Result<VoxelFlowField> {
    let bytes = read_bytes(path)?;
    let mut c = Cursor {
        data: &bytes,
        path,
    };
    if c.take(4)? != VXF_MAGIC {
        return Err(IoError::format(path, "not a VXF1 voxel flow file"));
    }
    let origin = Vector3::new(c.f64()?, c.f64()?, c.f64()?);
    let size = c.f64()?;
    let dims = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let grid = VoxelGridSpec::new(origin, size, dims).map_err(|e| IoError::format(path, e.to_string()))?;
    let n = grid.len();
    if bytes.len() != VXF_HEADER + n * VXF_VOXEL {
        return Err(IoError::format(path, format!("size does not match a {dims:?} grid")));
    }
    let mut field = VoxelFlowField::empty(grid);
    for i in 0..n {
        field.occupied[i] = match c.u8()? {
            0 => false,
            1 => true,
            b => return Err(IoError::format(path, format!("bad occupancy byte {b}"))),
        };
        field.flow[i] = Vector3::new(c.f32()?, c.f32()?, c.f32()?);
        field.confidence[i] = c.f32()?;
    }
    c.finish()?;
    Ok(field)
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    Double,
    Float,
    Uchar,
}

impl PlyType {
    fn name(self) -> &'static str {
        match self {
            PlyType::Double => "double",
            PlyType::Float => "float",
            PlyType::Uchar => "uchar",
        }
    }

    fn size(self) -> usize {
        match self {
            PlyType::Double => 8,
            PlyType::Float => 4,
            PlyType::Uchar => 1,
        }
    }
}

use PlyType::{Double as D, Float as F, Uchar as U};

const SCENE_FIELDS: [(PlyType, &str); 20] = [
    (D, "x"),
    (D, "y"),
    (D, "z"),
    (D, "sx"),
    (D, "sy"),
    (D, "sz"),
    (D, "qw"),
    (D, "qx"),
    (D, "qy"),
    (D, "qz"),
    (D, "r"),
    (D, "g"),
    (D, "b"),
    (D, "opacity"),
    (D, "t_mu"),
    (D, "t_sigma"),
    (D, "vx"),
    (D, "vy"),
    (D, "vz"),
    (U, "is_dynamic"),
];
const CLOUD_FIELDS: [(PlyType, &str); 6] = [(F, "x"), (F, "y"), (F, "z"), (U, "red"), (U, "green"), (U, "blue")];

fn row_size(fields: &[(PlyType, &str)]) -> usize {
    fields.iter().map(|f| f.0.size()).sum()
}

fn ply_header(kind: &str, comments: &[String], count: usize, fields: &[(PlyType, &str)]) -> Vec<u8> {
    let mut h = format!("ply\nformat binary_little_endian 1.0\ncomment {kind}\n");
    for c in comments {
        h.push_str(&format!("comment {c}\n"));
    }
    h.push_str(&format!("element vertex {count}\n"));
    for (t, f) in fields {
        h.push_str(&format!("property {} {f}\n", t.name()));
    }
    h.push_str("end_header\n");
    h.into_bytes()
}

struct PlyBody<'a> {
    comments: Vec<String>,
    count: usize,
    body: &'a [u8],
}

fn parse_ply<'a>(bytes: &'a [u8], path: &Path, kind: &str, fields: &[(PlyType, &str)]) -> Result<PlyBody<'a>> {
    let end = b"end_header\n";
    let pos = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| IoError::format(path, "not a PLY file (no end_header)"))?;
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| IoError::format(path, "non-ASCII PLY header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(IoError::format(path, "not a PLY file"));
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err(IoError::format(path, "only binary_little_endian PLY is supported"));
    }
    let mut comments = Vec::new();
    let mut count = None;
    let mut props = Vec::new();
    for l in lines {
        if let Some(c) = l.strip_prefix("comment ") {
            comments.push(c.to_string());
        } else if let Some(n) = l.strip_prefix("element vertex ") {
            count = Some(n.parse::<usize>().map_err(|_| IoError::format(path, "bad vertex count"))?);
        } else if let Some(p) = l.strip_prefix("property ") {
            props.push(p.to_string());
        } else {
            return Err(IoError::format(path, format!("unexpected header line '{l}'")));
        }
    }
    if comments.first().map(String::as_str) != Some(kind) {
        return Err(IoError::format(path, format!("not a {kind} PLY")));
    }
    comments.remove(0);
    let expected: Vec<String> = fields.iter().map(|(t, f)| format!("{} {f}", t.name())).collect();
    if props != expected {
        return Err(IoError::format(path, format!("expected properties {expected:?}")));
    }
    let count = count.ok_or_else(|| IoError::format(path, "missing vertex element"))?;
    let body = &bytes[pos + end.len()..];
    if body.len() != count * row_size(fields) {
        return Err(IoError::format(path, "payload size does not match header"));
    }
    Ok(PlyBody {
        comments,
        count,
        body,
    })
}

const SCENE_NOTE: &str = "sx sy sz hold log scales and opacity a logit";

/// Statics first, then dynamics. Values are stored exactly as optimized:
/// scales in log space, opacity as a logit; statics have zero temporal fields
/// except `t_sigma = 1`.
pub fn write_scene(path: &Path, scene: &GaussianScene) -> Result<()> {
    let [r, g, b] = scene.background;
    let comments = vec![SCENE_NOTE.to_string(), format!("background {r:?} {g:?} {b:?}")];
    let mut out = ply_header("flamesplat-scene", &comments, scene.len(), &SCENE_FIELDS);
    let mut push = |p: &[f64; 19], dynamic: bool| {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(dynamic as u8);
    };
    for s in &scene.statics {
        let mut row = [0.0; 19];
        row[..STATIC_PARAMS].copy_from_slice(&s.to_params());
        row[15] = 1.0;
        push(&row, false);
    }
    for d in &scene.dynamics {
        let mut row = [0.0; 19];
        row[..DYNAMIC_PARAMS].copy_from_slice(&d.to_params());
        push(&row, true);
    }
    write_bytes(path, &out)
}

pub fn read_scene(path: &Path) -> Result<GaussianScene> {
    let bytes = read_bytes(path)?;
    let ply = parse_ply(&bytes, path, "flamesplat-scene", &SCENE_FIELDS)?;
    let mut background = [0.0; 3];
    for c in &ply.comments {
        if let Some(rest) = c.strip_prefix("background ") {
            let v: Vec<f64> = rest.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            let [r, g, b] = v[..] else {
                return Err(IoError::format(path, "bad background comment"));
            };
            background = [r, g, b];
        }
    }
    let mut scene = GaussianScene::new(Vec::new(), Vec::new(), background);
    for rec in ply.body.chunks_exact(row_size(&SCENE_FIELDS)).take(ply.count) {
        let row: Vec<f64> = rec[..19 * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        match rec[19 * 8] {
            0 => {
                if !scene.dynamics.is_empty() {
                    return Err(IoError::format(path, "static Gaussian after dynamic ones"));
                }
                scene.statics.push(StaticGaussian::from_params(&row[..STATIC_PARAMS]));
            }
            1 => scene.dynamics.push(DynamicGaussian::from_params(&row[..DYNAMIC_PARAMS])),
            f => return Err(IoError::format(path, format!("bad is_dynamic flag {f}"))),
        }
    }
    scene.validate().map_err(|e| IoError::format(path, e))?;
    Ok(scene)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Positions as float32, colors as 8-bit.
pub fn write_pointcloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = ply_header("flamesplat-pointcloud", &[], cloud.len(), &CLOUD_FIELDS);
    for p in &cloud.points {
        for v in [p.position.x, p.position.y, p.position.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend(p.color.map(to_u8));
    }
    write_bytes(path, &out)
}

/// Positions and colors only; per-point origins are not stored.
pub fn read_pointcloud(path: &Path) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    let ply = parse_ply(&bytes, path, "flamesplat-pointcloud", &CLOUD_FIELDS)?;
    let mut cloud = PointCloud::default();
    for r in ply.body.chunks_exact(row_size(&CLOUD_FIELDS)) {
        let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        cloud.points.push(crate::depthfuse::CloudPoint {
            position: Vector3::new(f(0), f(1), f(2)),
            color: [r[12], r[13], r[14]].map(|c| c as f64 / 255.0),
        });
    }
    Ok(cloud)
}

// ---------------------------------------------------------------- cameras

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanDirectionJson {
    TopToBottom,
    BottomToTop,
}

/// JSON form of a [`Camera`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    #[serde(default)]
    pub line_time_s: f64,
    #[serde(default)]
    pub first_line_offset_s: f64,
    #[serde(default = "top_to_bottom")]
    pub scan_direction: ScanDirectionJson,
}

fn top_to_bottom() -> ScanDirectionJson {
    ScanDirectionJson::TopToBottom
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let k = &c.intrinsics;
        let r = c.pose.rotation();
        let t = c.pose.translation();
        Self {
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            r: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            t: [t.x, t.y, t.z],
            line_time_s: c.readout.line_time,
            first_line_offset_s: c.readout.first_line_offset,
            scan_direction: match c.readout.scan_direction {
                ScanDirection::TopToBottom => ScanDirectionJson::TopToBottom,
                ScanDirection::BottomToTop => ScanDirectionJson::BottomToTop,
            },
        }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> std::result::Result<Camera, String> {
        let k = Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| e.to_string())?;
        let r = Matrix3::from_fn(|i, j| self.r[3 * i + j]);
        let pose = Pose::new(r, Vector3::from(self.t)).map_err(|e| e.to_string())?;
        let dir = match self.scan_direction {
            ScanDirectionJson::TopToBottom => ScanDirection::TopToBottom,
            ScanDirectionJson::BottomToTop => ScanDirection::BottomToTop,
        };
        let readout =
            ReadoutSchedule::new(self.line_time_s, self.first_line_offset_s, dir).map_err(|e| e.to_string())?;
        Ok(Camera::new(k, pose, readout))
    }
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let j: CameraJson = read_json(path)?;
    j.to_camera().map_err(|e| IoError::format(path, e))
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let js: Vec<CameraJson> = read_json(path)?;
    js.iter()
        .enumerate()
        .map(|(i, j)| j.to_camera().map_err(|e| IoError::format(path, format!("camera {i}: {e}"))))
        .collect()
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let js: Vec<CameraJson> = cameras.iter().map(CameraJson::from).collect();
    write_json(path, &js)
}

// ---------------------------------------------------------------- dataset

pub const DATASET_FORMAT: &str = "flamesplat-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedManifest {
    pub layout: LedLayout,
    pub frame_period: f64,
    pub base_counter: u32,
    /// Displayed counter per camera and frame.
    pub indices: Vec<Vec<u32>>,
    /// Frame-start offset of each camera within the strip cycle, seconds.
    pub offsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub camera_count: usize,
    pub frame_count: usize,
    pub frame_rate_hz: f64,
    pub width: usize,
    pub height: usize,
    /// Frame-start time per camera and frame, seconds.
    pub frame_times: Vec<Vec<f64>>,
    #[serde(default)]
    pub led: Option<LedManifest>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

impl Manifest {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.format != DATASET_FORMAT || self.version != 1 {
            return Err(format!("unsupported dataset {} v{}", self.format, self.version));
        }
        if self.frame_times.len() != self.camera_count
            || self.frame_times.iter().any(|t| t.len() != self.frame_count)
        {
            return Err("frame_times must be camera_count x frame_count".into());
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err("frame_rate_hz must be positive".into());
        }
        Ok(())
    }
}

/// Paths of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn per_frame(&self, dir: &str, c: usize, f: usize, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("cam{c:02}")).join(format!("{f:04}.{ext}"))
    }

    fn per_camera(&self, dir: &str, c: usize, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("cam{c:02}.{ext}"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn cameras(&self) -> PathBuf {
        self.root.join("cameras.json")
    }
    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.ply")
    }
    pub fn sync_mask(&self) -> PathBuf {
        self.root.join("sync_mask.png")
    }
    pub fn frame(&self, c: usize, f: usize) -> PathBuf {
        self.per_frame("frames", c, f, "png")
    }
    pub fn depth(&self, c: usize, f: usize) -> PathBuf {
        self.per_frame("depths", c, f, "pfm")
    }
    pub fn flame_depth(&self, c: usize, f: usize) -> PathBuf {
        self.per_frame("flame_depths", c, f, "pfm")
    }
    pub fn mask(&self, c: usize, f: usize) -> PathBuf {
        self.per_frame("masks", c, f, "png")
    }
    pub fn flow(&self, c: usize, f: usize) -> PathBuf {
        self.per_frame("flows", c, f, "flo")
    }
    pub fn mono_frame(&self, c: usize, f: usize) -> PathBuf {
        self.per_frame("mono_frames", c, f, "pfm")
    }
    pub fn stereo(&self, c: usize) -> PathBuf {
        self.per_camera("stereo", c, "pfm")
    }
    pub fn mono(&self, c: usize) -> PathBuf {
        self.per_camera("mono", c, "pfm")
    }

    pub fn read_manifest(&self) -> Result<Manifest> {
        let path = self.manifest();
        let m: Manifest = read_json(&path)?;
        m.validate().map_err(|e| IoError::format(&path, e))?;
        Ok(m)
    }
}

pub fn write_bundle(dir: &Path, b: &SynthBundle) -> Result<()> {
    let d = DatasetLayout::new(dir);
    let s = &b.spec;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        camera_count: s.camera_count,
        frame_count: s.frame_count,
        frame_rate_hz: s.frame_rate,
        width: s.width,
        height: s.height,
        frame_times: b.frame_times.clone(),
        led: b.led.as_ref().map(|l| LedManifest {
            layout: l.layout.clone(),
            frame_period: l.clock.frame_period,
            base_counter: l.base_counter,
            indices: l.indices.clone(),
            offsets: l.offsets.clone(),
        }),
        synth: Some(s.clone()),
    };
    write_json(&d.manifest(), &manifest)?;
    write_cameras(&d.cameras(), &b.cameras)?;
    write_scene(&d.ground_truth(), &b.scene)?;
    if let Some(m) = &b.sync_mask {
        write_mask(&d.sync_mask(), m)?;
    }
    for c in 0..s.camera_count {
        write_depth(&d.stereo(c), &b.stereo[c])?;
        write_depth(&d.mono(c), &b.mono[c])?;
        for f in 0..s.frame_count {
            write_image(&d.frame(c, f), &b.frames[c][f])?;
            write_depth(&d.depth(c, f), &b.depths[c][f])?;
            write_depth(&d.flame_depth(c, f), &b.flame_depths[c][f])?;
            write_depth(&d.mono_frame(c, f), &b.mono_frames[c][f])?;
            write_mask(&d.mask(c, f), &b.masks[c][f])?;
        }
        for (f, flow) in b.flows[c].iter().enumerate() {
            write_flow(&d.flow(c, f), flow)?;
        }
    }
    Ok(())
}
