//! File formats: 8-bit RGB and 16-bit depth PNG, ASCII PLY clouds, JSON documents.

use std::fs::File;
use std::io::{BufRead, BufWriter, Cursor, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::ImageRgb;
use crate::linalg::Point3;
use crate::localization::{CameraIntrinsics, DepthFrame};
use crate::registration::PointCloud;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: byte {offset}: {msg}")]
    Png { path: PathBuf, offset: u64, msg: String },
    #[error("{path}: line {line}: {msg}")]
    Ply { path: PathBuf, line: usize, msg: String },
    #[error("{path}: line {line}, column {column}: {msg}")]
    Json { path: PathBuf, line: usize, column: usize, msg: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn invalid(path: &Path, msg: impl ToString) -> IoError {
    IoError::Invalid { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Decoded PNG samples: `(width, height, color, bit depth, bytes)`.
type RawPng = (usize, usize, png::ColorType, png::BitDepth, Vec<u8>);

/// Feeds the decoder one byte at a time so a failure can be located exactly.
struct ByteFeed<'a>(Cursor<&'a [u8]>);

impl Read for ByteFeed<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = buf.len().min(1);
        self.0.read(&mut buf[..n])
    }
}

impl BufRead for ByteFeed<'_> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        let pos = self.0.position() as usize;
        let data = *self.0.get_ref();
        Ok(&data[pos.min(data.len())..(pos + 1).min(data.len())])
    }

    fn consume(&mut self, amt: usize) {
        self.0.consume(amt);
    }
}

impl Seek for ByteFeed<'_> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.0.seek(pos)
    }
}

fn decode_with<R: BufRead + Seek>(src: R) -> Result<Option<RawPng>, png::DecodingError> {
    let mut reader = png::Decoder::new(src).read_info()?;
    let Some(size) = reader.output_buffer_size() else { return Ok(None) };
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok(Some((info.width as usize, info.height as usize, info.color_type, info.bit_depth, buf)))
}

/// Byte offset at which decoding fails, found by re-decoding byte by byte.
fn failure_offset(bytes: &[u8]) -> u64 {
    let mut feed = ByteFeed(Cursor::new(bytes));
    let _ = decode_with(&mut feed);
    feed.0.position()
}

fn decode_png(path: &Path) -> Result<RawPng, IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    match decode_with(Cursor::new(bytes.as_slice())) {
        Ok(Some(raw)) => Ok(raw),
        Ok(None) => Err(invalid(path, "image too large")),
        Err(e) => Err(IoError::Png { path: path.to_path_buf(), offset: failure_offset(&bytes), msg: e.to_string() }),
    }
}

fn encode_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let png_err = |e: png::EncodingError| invalid(path, e);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Loads an 8-bit RGB, RGBA or grayscale PNG as RGB (alpha dropped, gray replicated).
pub fn load_rgb_png(path: &Path) -> Result<ImageRgb, IoError> {
    let (w, h, color, depth, buf) = decode_png(path)?;
    if depth != png::BitDepth::Eight {
        return Err(invalid(path, format!("expected 8-bit samples, found {depth:?}")));
    }
    let px: Vec<[u8; 3]> = match color {
        png::ColorType::Rgb => buf.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Rgba => buf.chunks_exact(4).map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).map(|c| [c[0], c[0], c[0]]).collect(),
        png::ColorType::Indexed => return Err(invalid(path, "indexed PNG is not supported")),
    };
    ImageRgb::new(w, h, px).map_err(|e| invalid(path, e))
}

pub fn save_rgb_png(path: &Path, img: &ImageRgb) -> Result<(), IoError> {
    let data: Vec<u8> = img.data().iter().flatten().copied().collect();
    encode_png(path, img.width(), img.height(), png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

/// Loads a 16-bit single-channel PNG; raw values are kept, `depth_scale` gives meters per unit.
pub fn load_depth_png<T: Real>(path: &Path, depth_scale: T) -> Result<DepthFrame<T>, IoError> {
    let (w, h, color, depth, buf) = decode_png(path)?;
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(invalid(path, format!("expected 16-bit grayscale depth, found {color:?} {depth:?}")));
    }
    let data = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    DepthFrame::new(w, h, data, depth_scale).map_err(|e| invalid(path, e))
}

pub fn save_depth_png<T: Real>(path: &Path, frame: &DepthFrame<T>) -> Result<(), IoError> {
    let data: Vec<u8> = frame.data().iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_png(path, frame.width(), frame.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

/// Parse failure in PLY text, 1-based line number.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct PlyParseError {
    pub line: usize,
    pub msg: String,
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// Parses ASCII PLY. Only the `vertex` element is read; `x y z` are required and
/// `nx ny nz` are loaded when all three are present. Other properties are ignored.
pub fn parse_ply<T: Real>(text: &str) -> Result<PointCloud<T>, PlyParseError> {
    let err = |line: usize, msg: &str| PlyParseError { line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(err(n, "missing 'ply' magic")),
        None => return Err(err(1, "empty file")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut last = 1;
    loop {
        let Some((n, l)) = lines.next() else { return Err(err(last + 1, "unterminated header")) };
        last = n;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(err(n, &format!("unsupported format '{other}', only ascii"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(n, "bad element count"))?;
                elements.push(PlyElement { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", _, _, name] | ["property", _, name] => {
                let e = elements.last_mut().ok_or_else(|| err(n, "property before element"))?;
                e.props.push(name.to_string());
            }
            _ => return Err(err(n, &format!("unrecognized header line '{l}'"))),
        }
    }
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for e in &elements {
        if e.name != "vertex" {
            for _ in 0..e.count {
                let (n, _) = lines.next().ok_or_else(|| err(last + 1, &format!("truncated '{}' element", e.name)))?;
                last = n;
            }
            continue;
        }
        let pos = |p: &str| e.props.iter().position(|q| q == p);
        let (Some(ix), Some(iy), Some(iz)) = (pos("x"), pos("y"), pos("z")) else {
            return Err(err(last, "vertex element lacks x, y or z"));
        };
        let nidx = match (pos("nx"), pos("ny"), pos("nz")) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        for _ in 0..e.count {
            let (n, l) = lines.next().ok_or_else(|| err(last + 1, "fewer vertices than declared"))?;
            last = n;
            let vals: Vec<&str> = l.split_whitespace().collect();
            if vals.len() < e.props.len() {
                return Err(err(n, &format!("expected {} values, found {}", e.props.len(), vals.len())));
            }
            let num = |k: usize| -> Result<T, PlyParseError> {
                let v: f64 = vals[k].parse().map_err(|_| err(n, &format!("bad number '{}'", vals[k])))?;
                if !v.is_finite() {
                    return Err(err(n, "non-finite coordinate"));
                }
                Ok(T::lit(v))
            };
            points.push(Point3::new(num(ix)?, num(iy)?, num(iz)?));
            if let Some([a, b, c]) = nidx {
                normals.push(Point3::new(num(a)?, num(b)?, num(c)?));
            }
        }
        let cloud = if nidx.is_some() {
            PointCloud::with_normals(points, normals).map_err(|e| err(last, &e.to_string()))?
        } else {
            PointCloud::new(points)
        };
        return Ok(cloud);
    }
    Err(err(last, "no vertex element"))
}

/// ASCII PLY text; coordinates use shortest round-trip formatting, so parsing restores them exactly.
pub fn format_ply<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    s += &format!("element vertex {}\nproperty double x\nproperty double y\nproperty double z\n", cloud.len());
    if cloud.normals().is_some() {
        s += "property double nx\nproperty double ny\nproperty double nz\n";
    }
    s += "end_header\n";
    for (i, p) in cloud.points().iter().enumerate() {
        s += &format!("{} {} {}", p.x.as_f64(), p.y.as_f64(), p.z.as_f64());
        if let Some(n) = cloud.normals() {
            s += &format!(" {} {} {}", n[i].x.as_f64(), n[i].y.as_f64(), n[i].z.as_f64());
        }
        s.push('\n');
    }
    s
}

pub fn load_ply<T: Real>(path: &Path) -> Result<PointCloud<T>, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_ply(&text).map_err(|e| IoError::Ply { path: path.to_path_buf(), line: e.line, msg: e.msg })
}

pub fn save_ply<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<(), IoError> {
    std::fs::write(path, format_ply(cloud)).map_err(io_err(path))
}

pub fn load_json<V: DeserializeOwned>(path: &Path) -> Result<V, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn save_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid(path, e))?;
    text.push('\n');
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

/// Intrinsics document: camera parameters plus the depth unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct IntrinsicsFile<T: Real> {
    #[serde(flatten)]
    pub camera: CameraIntrinsics<T>,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: T,
}

fn default_depth_scale<T: Real>() -> T {
    T::lit(DepthFrame::<f64>::DEFAULT_SCALE)
}

pub fn load_intrinsics<T: Real + DeserializeOwned>(path: &Path) -> Result<IntrinsicsFile<T>, IoError> {
    let f: IntrinsicsFile<T> = load_json(path)?;
    f.camera.validate().map_err(|e| invalid(path, e))?;
    if !(f.depth_scale > T::zero()) {
        return Err(invalid(path, "depth_scale must be positive"));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_three_vertices_exact() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1.5 -2 3\n0.1 0.2 0.3\n";
        let c = parse_ply::<f64>(text).unwrap();
        assert_eq!(c.points(), &[Point3::new(0.0, 0.0, 0.0), Point3::new(1.5, -2.0, 3.0), Point3::new(0.1, 0.2, 0.3)]);
        assert!(c.normals().is_none());
    }

    #[test]
    fn ply_skips_leading_elements_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\nelement camera 1\nproperty float k\nelement vertex 2\nproperty float x\nproperty uchar red\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9\n1 255 2 3\n4 0 5 6\n3 0 1 2\n";
        let c = parse_ply::<f64>(text).unwrap();
        assert_eq!(c.points(), &[Point3::new(1.0, 2.0, 3.0), Point3::new(4.0, 5.0, 6.0)]);
    }

    #[test]
    fn ply_errors_name_the_line() {
        let head = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        let e = parse_ply::<f64>(&format!("{head}1 2 3\n1 x 3\n")).unwrap_err();
        assert_eq!(e.line, 9);
        let e = parse_ply::<f64>(&format!("{head}1 2 3\n")).unwrap_err();
        assert_eq!(e.line, 9);
        let e = parse_ply::<f64>(&format!("{head}1 2\n")).unwrap_err();
        assert_eq!(e.line, 8);
        let e = parse_ply::<f64>("ply\nformat binary_little_endian 1.0\nend_header\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert_eq!(parse_ply::<f64>("plx\n").unwrap_err().line, 1);
    }

    #[test]
    fn ply_round_trip_with_normals() {
        let pts = vec![Point3::new(0.1, 1.0 / 3.0, -2e-7), Point3::new(1e10, -0.0, std::f64::consts::PI)];
        let ns = vec![Point3::new(0.0, 0.0, 1.0), Point3::new(0.6, 0.8, 0.0)];
        let c = PointCloud::with_normals(pts, ns).unwrap();
        let back = parse_ply::<f64>(&format_ply(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let frame = DepthFrame::new(3, 2, vec![0, 1, 65535, 400, 256, 255], 0.001).unwrap();
        let p = dir.path().join("d.png");
        save_depth_png(&p, &frame).unwrap();
        assert_eq!(load_depth_png(&p, 0.001).unwrap(), frame);
        let img = ImageRgb::new(2, 2, vec![[1, 2, 3], [255, 0, 7], [9, 9, 9], [0, 0, 0]]).unwrap();
        let p = dir.path().join("c.png");
        save_rgb_png(&p, &img).unwrap();
        assert_eq!(load_rgb_png(&p).unwrap(), img);
        assert!(matches!(load_depth_png::<f64>(&p, 0.001), Err(IoError::Invalid { .. })));
    }

    #[test]
    fn malformed_png_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nnot a chunk").unwrap();
        match load_rgb_png(&p) {
            Err(IoError::Png { offset, msg, .. }) => assert!((8..=20).contains(&offset), "{offset} {msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_errors_carry_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.json");
        std::fs::write(&p, "{\n  \"width\": 640,\n  \"height\": oops\n}").unwrap();
        match load_intrinsics::<f64>(&p) {
            Err(IoError::Json { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, r#"{"width":640,"height":480,"fx":600,"fy":600,"cx":320,"cy":240}"#).unwrap();
        let k = load_intrinsics::<f64>(&p).unwrap();
        assert_eq!(k.depth_scale, 0.001);
        assert_eq!(k.camera, CameraIntrinsics::default());
    }
}
