//! Persistence: dataset directories, raw arrays, checkpoints and PNG output.
//!
//! Array files (`.arr`) are little-endian:
//!
//! | bytes | content                       |
//! |-------|-------------------------------|
//! | 8     | magic `NSFARR01`              |
//! | 4     | dtype tag `f64\0`             |
//! | 8     | rows (`u64`)                  |
//! | 8     | cols (`u64`)                  |
//! | 8·n   | row-major `f64` values        |
//!
//! Checkpoints (`.ckpt`) hold magic `NSFCKPT1`, a `u64` header length, a
//! TOML header, then a count-prefixed list of named arrays, each stored as
//! `u32` name length, UTF-8 name, `u64` rows, `u64` cols and `f64` values.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::dataset::{Dataset, EvalView, Frame, FrameTruth};
use crate::error::{Error, Result};
use crate::fields::{DynamicFieldParams, FieldArch, ParamSet, StaticFieldParams};
use crate::geometry::{Camera, Pose, Vec3};
use crate::losses::LossReport;
use crate::trainer::{Adam, Stage, TrainState};

const ARRAY_MAGIC: &[u8; 8] = b"NSFARR01";
const ARRAY_DTYPE: &[u8; 4] = b"f64\0";
const CHECKPOINT_MAGIC: &[u8; 8] = b"NSFCKPT1";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(self.path, "array shape overflows"))?;
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Matrix::from_vec(rows, cols, data))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_array(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 8 * m.len());
    out.extend_from_slice(ARRAY_MAGIC);
    out.extend_from_slice(ARRAY_DTYPE);
    put_matrix(&mut out, m);
    out
}

pub fn decode_array(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let mut c = Cursor::new(path, bytes);
    if c.take(8)? != ARRAY_MAGIC {
        return Err(Error::format(path, "bad array magic"));
    }
    if c.take(4)? != ARRAY_DTYPE {
        return Err(Error::format(path, "unsupported dtype"));
    }
    let m = c.matrix()?;
    c.finish()?;
    Ok(m)
}

pub fn write_array(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_array(m))
}

pub fn read_array(path: &Path) -> Result<Matrix> {
    decode_array(path, &read_file(path)?)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        w.write_image_data(data)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(out)
}

fn check_pixels(m: &Matrix, width: usize, height: usize, cols: usize) -> Result<()> {
    if m.shape() != (width * height, cols) {
        return Err(Error::domain(format!(
            "image shape {:?} does not match {width}×{height}×{cols}",
            m.shape()
        )));
    }
    Ok(())
}

/// Writes `[H·W, 3]` colors in `[0, 1]` as 8-bit RGB.
pub fn write_rgb_png(path: &Path, rgb: &Matrix, width: usize, height: usize) -> Result<()> {
    check_pixels(rgb, width, height, 3)?;
    let data: Vec<u8> = rgb.data().iter().map(|v| to_byte(*v)).collect();
    write_atomic(path, &encode_png(path, width, height, png::ColorType::Rgb, &data)?)
}

/// Writes `[H·W, 1]` values in `[0, 1]` as 8-bit grayscale.
pub fn write_gray_png(path: &Path, gray: &Matrix, width: usize, height: usize) -> Result<()> {
    check_pixels(gray, width, height, 1)?;
    let data: Vec<u8> = gray.data().iter().map(|v| to_byte(*v)).collect();
    write_atomic(path, &encode_png(path, width, height, png::ColorType::Grayscale, &data)?)
}

/// Reads an 8-bit PNG as `([H·W, channels], width, height)` in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<(Matrix, usize, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit images are supported"));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h * channels].iter().map(|b| *b as f64 / 255.0).collect();
    Ok((Matrix::from_vec(w * h, channels, data), w, h))
}

/// Depth mapped linearly from `[near, far]` to `[0, 1]`.
pub fn depth_to_gray(depth: &Matrix, near: f64, far: f64) -> Matrix {
    depth.map(|d| ((d - near) / (far - near)).clamp(0.0, 1.0))
}

/// File name recording the depth normalization range.
pub fn depth_file_name(near: f64, far: f64) -> String {
    format!("depth_{near:.2}-{far:.2}.png")
}

/// Color wheel of the standard optical-flow visualization, as RGB bytes.
/// Each segment holds one channel saturated while ramping another.
fn flow_wheel() -> Vec<[f64; 3]> {
    // (length, saturated channel, ramped channel, ramps up)
    const SEGMENTS: [(usize, usize, usize, bool); 6] = [
        (15, 0, 1, true),
        (6, 1, 0, false),
        (4, 1, 2, true),
        (11, 2, 1, false),
        (13, 2, 0, true),
        (6, 0, 2, false),
    ];
    let mut wheel = Vec::new();
    for (n, full, ramp, up) in SEGMENTS {
        for i in 0..n {
            let mut c = [0.0; 3];
            c[full] = 255.0;
            let f = 255.0 * i as f64 / n as f64;
            c[ramp] = if up { f } else { 255.0 - f };
            wheel.push(c);
        }
    }
    wheel
}

/// Colors 2D flow `[H·W, 2]` with the flow wheel, normalized by the largest
/// magnitude among pixels where `mask` is set. Unmasked pixels are black;
/// zero flow maps to white.
pub fn flow_to_rgb(flow: &Matrix, mask: &Matrix) -> Matrix {
    let wheel = flow_wheel();
    let ncols = wheel.len() as f64;
    let inside = |i: usize| mask.get(i, 0) > 0.5;
    let max_rad = (0..flow.rows())
        .filter(|&i| inside(i))
        .map(|i| flow.get(i, 0).hypot(flow.get(i, 1)))
        .fold(0.0, f64::max);
    Matrix::from_fn(flow.rows(), 3, |i, c| {
        if !inside(i) {
            return 0.0;
        }
        let (u, v) = if max_rad > 0.0 {
            (flow.get(i, 0) / max_rad, flow.get(i, 1) / max_rad)
        } else {
            (0.0, 0.0)
        };
        let rad = u.hypot(v).min(1.0);
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1.0);
        let k0 = fk.floor() as usize % wheel.len();
        let k1 = (k0 + 1) % wheel.len();
        let f = fk - fk.floor();
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        1.0 - rad * (1.0 - col)
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFrame {
    index: usize,
    time: f64,
    pose: Vec<f64>,
    image: String,
    mask: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEval {
    frame: usize,
    time: f64,
    pose: Vec<f64>,
    image: String,
    mask: String,
    depth: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    camera: Camera,
    near: f64,
    far: f64,
    scene_center: [f64; 3],
    scene_scale: f64,
    frames: Vec<ManifestFrame>,
    #[serde(default)]
    eval: Vec<ManifestEval>,
    #[serde(default)]
    has_truth: bool,
}

const TRUTH_FIELDS: [&str; 5] = ["depth", "surface", "hit", "flow_fwd", "flow_bwd"];

fn truth_path(dir: &Path, n: usize, field: &str) -> PathBuf {
    dir.join("gt").join(format!("{n:03}_{field}.arr"))
}

/// Writes frames, masks, manifest and ground-truth arrays under `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let cam = &dataset.camera;
    let (w, h) = (cam.width, cam.height);
    let mut frames = Vec::new();
    for f in &dataset.frames {
        let image = format!("frames/{:03}.png", f.index);
        let mask = format!("masks/{:03}.png", f.index);
        write_rgb_png(&dir.join(&image), &f.image, w, h)?;
        write_gray_png(&dir.join(&mask), &f.mask, w, h)?;
        frames.push(ManifestFrame {
            index: f.index,
            time: f.time,
            pose: f.pose.to_row12().to_vec(),
            image,
            mask,
        });
    }
    for (n, t) in dataset.truth.iter().enumerate() {
        for (field, m) in TRUTH_FIELDS.iter().zip([&t.depth, &t.surface, &t.hit, &t.flow_fwd, &t.flow_bwd]) {
            write_array(&truth_path(dir, n, field), m)?;
        }
    }
    let mut eval = Vec::new();
    for (i, e) in dataset.eval.iter().enumerate() {
        let image = format!("eval/{i:03}.png");
        let mask = format!("eval/{i:03}_mask.png");
        let depth = format!("eval/{i:03}_depth.arr");
        write_rgb_png(&dir.join(&image), &e.image, w, h)?;
        write_gray_png(&dir.join(&mask), &e.mask, w, h)?;
        write_array(&dir.join(&depth), &e.depth)?;
        eval.push(ManifestEval {
            frame: e.frame,
            time: e.time,
            pose: e.pose.to_row12().to_vec(),
            image,
            mask,
            depth,
        });
    }
    let manifest = Manifest {
        camera: *cam,
        near: dataset.near,
        far: dataset.far,
        scene_center: dataset.scene_center.into(),
        scene_scale: dataset.scene_scale,
        frames,
        eval,
        has_truth: !dataset.truth.is_empty(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format(dir, e.to_string()))?;
    write_atomic(&dir.join("manifest.toml"), text.as_bytes())
}

fn read_image(dir: &Path, rel: &str, camera: &Camera, channels: usize) -> Result<Matrix> {
    let path = dir.join(rel);
    let (m, w, h) = read_png(&path)?;
    if w != camera.width || h != camera.height || m.cols() != channels {
        return Err(Error::format(&path, "image size or channel count does not match the manifest"));
    }
    Ok(m)
}

/// Loads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.toml");
    let text = String::from_utf8(read_file(&manifest_path)?)
        .map_err(|_| Error::format(&manifest_path, "manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let cam = manifest.camera;
    cam.validate()?;
    let frames = manifest
        .frames
        .iter()
        .map(|f| {
            Ok(Frame {
                index: f.index,
                time: f.time,
                pose: Pose::from_row12(&f.pose)?,
                image: read_image(dir, &f.image, &cam, 3)?,
                mask: read_image(dir, &f.mask, &cam, 1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = if manifest.has_truth {
        (0..frames.len())
            .map(|n| {
                let mut arrays = TRUTH_FIELDS
                    .iter()
                    .map(|field| read_array(&truth_path(dir, n, field)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter();
                let mut next = || arrays.next().expect("five arrays");
                Ok(FrameTruth {
                    depth: next(),
                    surface: next(),
                    hit: next(),
                    flow_fwd: next(),
                    flow_bwd: next(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let eval = manifest
        .eval
        .iter()
        .map(|e| {
            Ok(EvalView {
                frame: e.frame,
                time: e.time,
                pose: Pose::from_row12(&e.pose)?,
                image: read_image(dir, &e.image, &cam, 3)?,
                mask: read_image(dir, &e.mask, &cam, 1)?,
                depth: read_array(&dir.join(&e.depth))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        camera: cam,
        near: manifest.near,
        far: manifest.far,
        frames,
        truth,
        eval,
        scene_center: Vec3::from(manifest.scene_center),
        scene_scale: manifest.scene_scale,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    stage: Stage,
    iteration: usize,
    adam_steps: u64,
    interval_steps: usize,
    log_lines: usize,
    static_arch: FieldArch,
    dynamic_arch: FieldArch,
}

/// Training state plus the number of log lines written when it was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub log_lines: usize,
}

fn put_named(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    put_matrix(out, m);
}

fn report_matrix(r: &LossReport) -> Matrix {
    Matrix::from_vec(1, 11, r.values().to_vec())
}

fn report_from(m: &Matrix) -> LossReport {
    let v = m.data();
    LossReport {
        static_photo: v[0],
        dynamic_photo: v[1],
        full_photo: v[2],
        slow: v[3],
        cycle: v[4],
        entropy: v[5],
        mask: v[6],
        surface: v[7],
        patch: v[8],
        depth_consistency: v[9],
        total: v[10],
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ckpt.state;
    let header = CheckpointHeader {
        stage: s.stage,
        iteration: s.iteration,
        adam_steps: s.optimizer.steps,
        interval_steps: s.interval_steps,
        log_lines: ckpt.log_lines,
        static_arch: s.static_field.arch.clone(),
        dynamic_arch: s.dynamic_field.arch.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut named: Vec<(String, &Matrix)> = Vec::new();
    for (name, m) in s.static_field.params.iter() {
        named.push((format!("static/{name}"), m));
    }
    for (name, m) in s.dynamic_field.params.iter() {
        named.push((format!("dynamic/{name}"), m));
    }
    for (i, m) in s.optimizer.m.iter().enumerate() {
        named.push((format!("adam.m/{i}"), m));
    }
    for (i, m) in s.optimizer.v.iter().enumerate() {
        named.push((format!("adam.v/{i}"), m));
    }
    let interval = report_matrix(&s.interval);
    named.push(("interval".into(), &interval));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, m) in named {
        put_named(&mut out, &name, m);
    }
    Ok(out)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(path, bytes);
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let len = c.u64()? as usize;
    let text = std::str::from_utf8(c.take(len)?).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let header: CheckpointHeader = toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    let count = c.u64()?;
    let mut static_params = ParamSet::new();
    let mut dynamic_params = ParamSet::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    let mut interval = None;
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::format(path, "array name is not UTF-8"))?
            .to_string();
        let m = c.matrix()?;
        if let Some(p) = name.strip_prefix("static/") {
            static_params.push(p, m);
        } else if let Some(p) = name.strip_prefix("dynamic/") {
            dynamic_params.push(p, m);
        } else if name.starts_with("adam.m/") {
            adam_m.push(m);
        } else if name.starts_with("adam.v/") {
            adam_v.push(m);
        } else if name == "interval" && m.shape() == (1, 11) {
            interval = Some(report_from(&m));
        } else {
            return Err(Error::format(path, format!("unexpected array {name}")));
        }
    }
    c.finish()?;
    let static_field = StaticFieldParams::from_parts(header.static_arch, static_params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let dynamic_field = DynamicFieldParams::from_parts(header.dynamic_arch, dynamic_params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let stage_params = match header.stage {
        Stage::Static => &static_field.params,
        _ => &dynamic_field.params,
    };
    let moments_match = |ms: &[Matrix]| {
        ms.len() == stage_params.len() && ms.iter().zip(stage_params.values()).all(|(a, b)| a.shape() == b.shape())
    };
    if !moments_match(&adam_m) || !moments_match(&adam_v) {
        return Err(Error::format(path, "optimizer moments do not match the parameters"));
    }
    let interval = interval.ok_or_else(|| Error::format(path, "missing interval statistics"))?;
    Ok(Checkpoint {
        state: TrainState {
            stage: header.stage,
            iteration: header.iteration,
            static_field,
            dynamic_field,
            optimizer: Adam {
                steps: header.adam_steps,
                m: adam_m,
                v: adam_v,
            },
            interval,
            interval_steps: header.interval_steps,
        },
        log_lines: header.log_lines,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read_file(path)?)
}

/// Reads a text file, e.g. a config or log.
pub fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;
    use crate::synthscene::{make_dataset, ScenePreset, SyntheticScene, TrajectoryConfig};
    use crate::trainer::{ModelConfig, TrainConfig};

    fn small_dataset() -> Dataset {
        let traj = TrajectoryConfig {
            frames: 3,
            width: 16,
            height: 16,
            focal: 16.0,
            ..TrajectoryConfig::default()
        };
        make_dataset(&SyntheticScene::preset(ScenePreset::Rigid), &traj).unwrap()
    }

    #[test]
    fn array_round_trip_and_rejection() {
        let m = Matrix::from_fn(3, 4, |r, c| r as f64 - 0.25 * c as f64 + 1e-300);
        let bytes = encode_array(&m);
        assert_eq!(decode_array(Path::new("x"), &bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_array(Path::new("x"), &bad).is_err());
        assert!(decode_array(Path::new("x"), &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Matrix::from_fn(20, 3, |r, c| ((r * 7 + c * 3) % 17) as f64 / 16.0);
        let path = dir.path().join("a.png");
        write_rgb_png(&path, &img, 5, 4).unwrap();
        let (back, w, h) = read_png(&path).unwrap();
        assert_eq!((w, h), (5, 4));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        // images are already quantized, so they survive exactly
        assert_eq!(back, ds);
        let manifest = read_text(&dir.path().join("manifest.toml")).unwrap();
        assert_eq!(manifest.matches("[[frames]]").count(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            model: ModelConfig {
                width: 8,
                depth: 2,
                skip: None,
                ..ModelConfig::fast()
            },
            static_iters: 1,
            dynamic_iters: 2,
            batch_rays: 16,
            samples: 4,
            patch_size: 3,
            ..TrainConfig::fast()
        };
        let mut state = TrainState::new(&ds, &cfg).unwrap();
        state.step(&ds, &cfg, &LossWeights::default()).unwrap();
        state.step(&ds, &cfg, &LossWeights::default()).unwrap();
        let ckpt = Checkpoint { state, log_lines: 7 };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(Path::new("c"), &bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn zero_flow_is_wheel_center() {
        let flow = Matrix::zeros(4, 2);
        let mask = Matrix::column(&[1.0, 1.0, 0.0, 1.0]);
        let rgb = flow_to_rgb(&flow, &mask);
        for i in [0, 1, 3] {
            assert_eq!(rgb.row(i), &[1.0, 1.0, 1.0]);
        }
        assert_eq!(rgb.row(2), &[0.0, 0.0, 0.0]);
        // a unit rightward flow is saturated red
        let right = Matrix::from_rows(&[[1.0, 0.0]]);
        let c = flow_to_rgb(&right, &Matrix::column(&[1.0]));
        assert!((c.get(0, 0) - 1.0).abs() < 1e-12 && c.get(0, 1) < 0.05 && c.get(0, 2) < 0.05);
    }

    #[test]
    fn depth_normalization() {
        let d = Matrix::column(&[1.0, 3.25, 5.5, 9.0]);
        assert_eq!(depth_to_gray(&d, 1.0, 5.5).data(), &[0.0, 0.5, 1.0, 1.0]);
        assert_eq!(depth_file_name(1.0, 5.5), "depth_1.00-5.50.png");
    }
}
