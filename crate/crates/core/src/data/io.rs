//! File formats: PNG/PPM images, PFM depth, Middlebury `.flo` flow, text
//! pose/intrinsics files and the TOML dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, FrameBundle, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::grid::Grid;

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";
pub const MANIFEST_FILE: &str = "manifest.toml";
const MANIFEST_FORMAT: &str = "rstab-dataset";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- PFM

/// Encodes a 1-channel (`Pf`) or 3-channel (`PF`) grid as little-endian PFM,
/// rows stored bottom-to-top.
pub fn encode_pfm(grid: &Grid) -> Result<Vec<u8>> {
    let tag = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Contract(format!("PFM stores 1 or 3 channels, not {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", grid.width(), grid.height()).into_bytes();
    for row in grid.rows().rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Grid> {
    let bad = |reason: &str| Error::format(path, reason);
    // Header: four whitespace-separated tokens, then one whitespace byte.
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PFM header"))?);
    }
    pos += 1;
    let channels = match tokens[0] {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("bad PFM magic (expected Pf or PF)")),
    };
    let width: usize = tokens[1].parse().map_err(|_| bad("bad PFM width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad PFM scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let count = width * height * channels;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if width == 0 || height == 0 || payload.len() != count * 4 {
        return Err(bad(&format!(
            "PFM payload has {} bytes, header implies {}",
            payload.len(),
            count * 4
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row = width * channels;
    let mut data = Vec::with_capacity(count);
    for r in (0..height).rev() {
        data.extend_from_slice(&values[r * row..(r + 1) * row]);
    }
    Grid::from_vec(width, height, channels, data)
}

pub fn write_pfm(path: &Path, grid: &Grid) -> Result<()> {
    write_bytes(path, &encode_pfm(grid)?)
}

pub fn read_pfm(path: &Path) -> Result<Grid> {
    decode_pfm(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------- .flo

pub fn encode_flo(flow: &Grid) -> Result<Vec<u8>> {
    if flow.channels() != 2 {
        return Err(Error::Contract(format!(
            ".flo stores 2 channels, not {}",
            flow.channels()
        )));
    }
    let mut out = Vec::with_capacity(12 + flow.data().len() * 4);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<Grid> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated .flo header"));
    }
    if &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(path, "bad .flo magic (expected \"PIEH\")"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(Error::format(path, format!("implausible .flo size {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let payload = &bytes[12..];
    if payload.len() != w * h * 8 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, {w}x{h} flow needs {}", payload.len(), w * h * 8),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Grid::from_vec(w, h, 2, data)
}

pub fn write_flo(path: &Path, flow: &Grid) -> Result<()> {
    write_bytes(path, &encode_flo(flow)?)
}

pub fn read_flo(path: &Path) -> Result<Grid> {
    decode_flo(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------- images

/// Loads an 8-bit PNG or binary PPM (P6) as RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Grid> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Grid::from_vec(w, h, 3, data)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel grid as RGB PNG or a 1-channel grid as grayscale PNG.
pub fn write_png(path: &Path, grid: &Grid) -> Result<()> {
    let bytes: Vec<u8> = grid.data().iter().map(|v| to_byte(*v)).collect();
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let color = match grid.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Contract(format!("PNG output needs 1 or 3 channels, not {c}"))),
    };
    image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
}

/// Loads a grayscale PNG mask as a 1-channel grid in `[0, 1]`.
pub fn read_mask(path: &Path) -> Result<Grid> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Grid::from_vec(w, h, 1, data)
}

// ---------------------------------------------------------------- poses & intrinsics

/// One line per frame: `t qw qx qy qz tx ty tz` (camera-to-world).
pub fn format_poses(poses: &[(usize, Pose)]) -> String {
    let mut out = String::from("# t qw qx qy qz tx ty tz (camera-to-world)\n");
    for (t, p) in poses {
        let q = p.wxyz();
        let tr = p.translation;
        out.push_str(&format!(
            "{t} {} {} {} {} {} {} {}\n",
            q[0], q[1], q[2], q[3], tr.x, tr.y, tr.z
        ));
    }
    out
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<(usize, Pose)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::format(path, format!("line {}: {why}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(bad("expected 8 fields: t qw qx qy qz tx ty tz"));
        }
        let t: usize = fields[0].parse().map_err(|_| bad("bad frame index"))?;
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad number"))?;
        let q = nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(bad("quaternion is not unit length"));
        }
        // Stored quaternions are already unit; keep the components bit-exact.
        let rotation = nalgebra::UnitQuaternion::new_unchecked(q);
        out.push((t, Pose::new(rotation, nalgebra::Vector3::new(v[4], v[5], v[6]))));
    }
    Ok(out)
}

pub fn write_poses(path: &Path, poses: &[(usize, Pose)]) -> Result<()> {
    write_bytes(path, format_poses(poses).as_bytes())
}

pub fn read_poses(path: &Path) -> Result<Vec<(usize, Pose)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, path)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    write_bytes(path, text.as_bytes())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::format(path, "expected `fx fy cx cy width height`");
    if f.len() != 6 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
    Intrinsics::new(
        num(f[0])?,
        num(f[1])?,
        num(f[2])?,
        num(f[3])?,
        int(f[4])?,
        int(f[5])?,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub image: String,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_next: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_prev: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_next: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub moving_objects: usize,
    pub intrinsics: String,
    pub poses: String,
    pub frame: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format(&path, format!("unknown dataset format {:?}", m.format)));
        }
        if m.frame.len() != m.frames {
            return Err(Error::format(
                &path,
                format!("manifest lists {} frames but declares {}", m.frame.len(), m.frames),
            ));
        }
        Ok(m)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a dataset directory. Returns the manifest that was written.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    for sub in ["images", "depth", "flow", "visibility"] {
        create_dir(&dir.join(sub))?;
    }
    let k = &dataset.intrinsics;
    write_intrinsics(&dir.join("intrinsics.txt"), k)?;
    let poses: Vec<(usize, Pose)> = dataset.frames.iter().map(|f| (f.timestamp, f.pose)).collect();
    write_poses(&dir.join("poses.txt"), &poses)?;

    let mut entries = Vec::with_capacity(dataset.len());
    for f in &dataset.frames {
        let t = f.timestamp;
        let entry = FrameEntry {
            index: t,
            image: format!("images/frame_{t:04}.png"),
            depth: format!("depth/depth_{t:04}.pfm"),
            flow_next: f.flow_to_next.as_ref().map(|_| format!("flow/fwd_{t:04}.flo")),
            flow_prev: f.flow_to_prev.as_ref().map(|_| format!("flow/bwd_{t:04}.flo")),
            visible_next: f.visible_next.as_ref().map(|_| format!("visibility/fwd_{t:04}.png")),
        };
        write_png(&dir.join(&entry.image), &f.image)?;
        write_pfm(&dir.join(&entry.depth), &f.depth)?;
        if let (Some(p), Some(g)) = (&entry.flow_next, &f.flow_to_next) {
            write_flo(&dir.join(p), g)?;
        }
        if let (Some(p), Some(g)) = (&entry.flow_prev, &f.flow_to_prev) {
            write_flo(&dir.join(p), g)?;
        }
        if let (Some(p), Some(g)) = (&entry.visible_next, &f.visible_next) {
            write_png(&dir.join(p), g)?;
        }
        entries.push(entry);
    }

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        frames: dataset.len(),
        width: k.width,
        height: k.height,
        seed: dataset.scene.as_ref().map(|s| s.seed),
        moving_objects: dataset.scene.as_ref().map_or(0, |s| s.moving_objects()),
        intrinsics: "intrinsics.txt".into(),
        poses: "poses.txt".into(),
        frame: entries,
        scene: dataset.scene.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Contract(e.to_string()))?;
    write_bytes(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

fn expect_size(path: &Path, g: &Grid, k: &Intrinsics) -> Result<()> {
    if g.width() != k.width || g.height() != k.height {
        return Err(Error::format(
            path,
            format!(
                "size {}x{} does not match the dataset's {}x{}",
                g.width(),
                g.height(),
                k.width,
                k.height
            ),
        ));
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    let kpath = dir.join(&manifest.intrinsics);
    let k = read_intrinsics(&kpath)?;
    if k.width != manifest.width || k.height != manifest.height {
        return Err(Error::format(&kpath, "intrinsics size disagrees with the manifest"));
    }
    let ppath = dir.join(&manifest.poses);
    let poses = read_poses(&ppath)?;
    let pose_of = |t: usize| {
        poses
            .iter()
            .find(|(i, _)| *i == t)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::format(&ppath, format!("no pose for frame {t}")))
    };

    let load = |rel: &Option<String>, f: fn(&Path) -> Result<Grid>| -> Result<Option<Grid>> {
        rel.as_ref()
            .map(|r| {
                let p: PathBuf = dir.join(r);
                let g = f(&p)?;
                expect_size(&p, &g, &k)?;
                Ok(g)
            })
            .transpose()
    };

    let frames = manifest
        .frame
        .iter()
        .map(|e| {
            let image = load(&Some(e.image.clone()), read_image)?.unwrap();
            let depth = load(&Some(e.depth.clone()), read_pfm)?.unwrap();
            Ok(FrameBundle {
                timestamp: e.index,
                image,
                depth,
                flow_to_next: load(&e.flow_next, read_flo)?,
                flow_to_prev: load(&e.flow_prev, read_flo)?,
                visible_next: load(&e.visible_next, read_mask)?,
                pose: pose_of(e.index)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset {
        intrinsics: k,
        frames,
        scene: manifest.scene,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2x2 depth map `[[1, 2], [3, 4]]` (top row first) encoded by hand.
    fn pfm_fixture() -> Vec<u8> {
        let mut b = b"Pf\n2 2\n-1.0\n".to_vec();
        // bottom row first: 3, 4 then 1, 2
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn pfm_hand_fixture() {
        let g = decode_pfm(&pfm_fixture(), Path::new("fixture.pfm")).unwrap();
        assert_eq!((g.width(), g.height(), g.channels()), (2, 2, 1));
        assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(encode_pfm(&g).unwrap(), pfm_fixture());
    }

    #[test]
    fn pfm_big_endian_is_read() {
        let mut b = b"Pf\n1 2\n1.0\n".to_vec();
        for v in [5.0f32, 6.0] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        let g = decode_pfm(&b, Path::new("be.pfm")).unwrap();
        assert_eq!(g.data(), &[6.0, 5.0]);
    }

    #[test]
    fn pfm_errors() {
        let p = Path::new("x.pfm");
        assert!(decode_pfm(b"P6\n2 2\n-1.0\n", p).is_err());
        let mut short = pfm_fixture();
        short.pop();
        let err = decode_pfm(&short, p).unwrap_err().to_string();
        assert!(err.contains("x.pfm"), "{err}");
    }

    #[test]
    fn flo_hand_fixture() {
        let mut b = b"PIEH".to_vec();
        b.extend_from_slice(&2i32.to_le_bytes());
        b.extend_from_slice(&2i32.to_le_bytes());
        let vals = [0.5f32, -1.0, 2.0, 0.0, -0.25, 3.5, 1e-3, -7.0];
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let g = decode_flo(&b, Path::new("f.flo")).unwrap();
        assert_eq!(g.pixel(1, 0), &[2.0, 0.0]);
        assert_eq!(g.pixel(0, 1), &[-0.25, 3.5]);
        assert_eq!(encode_flo(&g).unwrap(), b);
    }

    #[test]
    fn flo_wrong_magic_names_the_file() {
        let mut b = b"PIEX".to_vec();
        b.extend_from_slice(&[0u8; 8 + 16]);
        let err = decode_flo(&b, Path::new("/data/broken.flo")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("broken.flo"));
    }

    #[test]
    fn pose_text_round_trip_is_exact() {
        let p = Pose::from_wxyz([0.9, 0.1, -0.3, 0.2], [1.0 / 3.0, -2e-9, 12345.678]).unwrap();
        let text = format_poses(&[(4, p)]);
        let back = parse_poses(&text, Path::new("poses.txt")).unwrap();
        assert_eq!(back, vec![(4, p)]);
        assert!(parse_poses("1 1 0 0 0 0 0\n", Path::new("p")).is_err());
    }
}
