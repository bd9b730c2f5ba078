//! File formats: binary containers, XYZ / ASCII PLY clouds, index files, PNG.
//!
//! Binary payloads are little-endian; each container starts with a 4-byte
//! ASCII magic and (except DVSC) a u32 version that must equal 1.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::deformation::TransformSet;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geodesics::GeodesicMatrix;
use crate::geometry::{Point3, PointCloud};
use crate::matching::{DenseMap, SoftCorrespondence};
use crate::projection::{ColorImage, FeatureImage};

pub const FORMAT_VERSION: u32 = 1;

struct Encoder(Vec<u8>);

impl Encoder {
    fn new(magic: &[u8; 4], version: Option<u32>) -> Self {
        let mut e = Encoder(magic.to_vec());
        if let Some(v) = version {
            e.u32(v);
        }
        e
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn count(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::Format(format!("count {n} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4], versioned: bool, what: &'static str) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic (expected {:?})",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut d = Decoder { buf, pos: 4, what };
        if versioned {
            let v = d.u32()?;
            if v != FORMAT_VERSION {
                return Err(Error::Format(format!("{what}: unsupported version {v}")));
            }
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Checks up front that `count` items of `size` bytes remain, so a corrupt
    /// header cannot trigger a huge allocation.
    fn expect(&self, count: usize, size: usize) -> Result<()> {
        let need = count.checked_mul(size).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?;
        if self.buf.len() - self.pos < need {
            return Err(Error::Format(format!(
                "{}: payload needs {need} bytes, {} available",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        self.expect(count, 4)?;
        (0..count).map(|_| self.f32()).collect()
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// A type with a binary container encoding.
pub trait BinaryFormat: Sized {
    fn encode(&self) -> Result<Vec<u8>>;
    fn decode(bytes: &[u8]) -> Result<Self>;
}

pub fn read_binary<T: BinaryFormat>(path: &Path) -> Result<T> {
    T::decode(&fs::read(path)?)
}

pub fn write_binary<T: BinaryFormat>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &value.encode()?)
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

impl BinaryFormat for PointCloud {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(b"DVPC", Some(FORMAT_VERSION));
        e.count(self.len())?;
        for p in self.points() {
            for c in p.iter() {
                e.f32(*c as f32);
            }
        }
        Ok(e.0)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, b"DVPC", true, "DVPC")?;
        let n = d.usize()?;
        d.expect(n, 12)?;
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, y, z) = (d.f32()?, d.f32()?, d.f32()?);
            pts.push(Point3::new(x.into(), y.into(), z.into()));
        }
        d.finish()?;
        PointCloud::new(pts)
    }
}

impl BinaryFormat for FeatureImage {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(b"DVFM", Some(FORMAT_VERSION));
        e.count(self.height)?;
        e.count(self.width)?;
        e.count(self.channels)?;
        for &v in &self.data {
            e.f32(v);
        }
        Ok(e.0)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, b"DVFM", true, "DVFM")?;
        let (h, w, c) = (d.usize()?, d.usize()?, d.usize()?);
        let len = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(c))
            .ok_or_else(|| Error::Format("DVFM: size overflow".into()))?;
        let data = d.f32s(len)?;
        d.finish()?;
        FeatureImage::new(h, w, c, data)
    }
}

/// Pixel coordinates `(u, v)` of every point in one projected view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelIndex(pub Vec<(u32, u32)>);

impl BinaryFormat for PixelIndex {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(b"DVPR", Some(FORMAT_VERSION));
        e.count(self.0.len())?;
        for &(u, v) in &self.0 {
            e.u32(u);
            e.u32(v);
        }
        Ok(e.0)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, b"DVPR", true, "DVPR")?;
        let n = d.usize()?;
        d.expect(n, 8)?;
        let pixels = (0..n).map(|_| Ok((d.u32()?, d.u32()?))).collect::<Result<_>>()?;
        d.finish()?;
        Ok(PixelIndex(pixels))
    }
}

impl BinaryFormat for GeodesicMatrix {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(b"DVGM", Some(FORMAT_VERSION));
        e.count(self.len())?;
        for &v in self.data() {
            e.f32(v as f32);
        }
        Ok(e.0)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, b"DVGM", true, "DVGM")?;
        let n = d.usize()?;
        let len = n.checked_mul(n).ok_or_else(|| Error::Format("DVGM: size overflow".into()))?;
        let data = d.f32s(len)?;
        d.finish()?;
        GeodesicMatrix::new(n, data.into_iter().map(f64::from).collect())
    }
}

impl BinaryFormat for TransformSet {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(b"DVTX", Some(FORMAT_VERSION));
        e.count(self.len())?;
        for t in &self.theta {
            for &v in t {
                e.f32(v as f32);
            }
        }
        for d in &self.delta {
            for &v in d.iter() {
                e.f32(v as f32);
            }
        }
        Ok(e.0)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, b"DVTX", true, "DVTX")?;
        let m = d.usize()?;
        d.expect(m, 36)?;
        let flat: Vec<f64> = d.f32s(m * 9)?.into_iter().map(f64::from).collect();
        d.finish()?;
        TransformSet::from_flat(m, &flat)
    }
}

impl BinaryFormat for SoftCorrespondence {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(b"DVSC", None);
        e.count(self.rows())?;
        e.count(self.cols())?;
        e.count(self.top_n())?;
        for row in self.entries() {
            e.count(row.len())?;
            for &(j, w) in row {
                e.count(j)?;
                e.f32(w as f32);
            }
        }
        Ok(e.0)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, b"DVSC", false, "DVSC")?;
        let (n, m, top_n) = (d.usize()?, d.usize()?, d.usize()?);
        d.expect(n, 4)?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let count = d.usize()?;
            if count > top_n {
                return Err(Error::Format(format!("DVSC: row has {count} entries, limit {top_n}")));
            }
            let row = (0..count)
                .map(|_| Ok((d.usize()?, f64::from(d.f32()?))))
                .collect::<Result<Vec<_>>>()?;
            entries.push(row);
        }
        d.finish()?;
        SoftCorrespondence::with_tolerance(m, top_n, entries, 1e-5)
    }
}

fn format_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}:{}: {msg}", path.display(), line + 1))
}

fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, ln, e))?;
        if vals.len() != 3 {
            return Err(format_err(path, ln, format!("expected 3 coordinates, found {}", vals.len())));
        }
        pts.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    PointCloud::new(pts)
}

/// Reads the vertex positions of an ASCII PLY file; faces and other elements are skipped.
fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(format_err(path, 0, "missing 'ply' header"));
    }
    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut body_start = None;
    for (ln, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", ..] => {}
            ["format", other, ..] => return Err(format_err(path, ln, format!("unsupported PLY format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|e| format_err(path, ln, e))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| format_err(path, ln, "property before element"))?;
                el.2.push(String::from("<list>"));
            }
            ["property", _, name] => {
                let el = elements.last_mut().ok_or_else(|| format_err(path, ln, "property before element"))?;
                el.2.push(name.to_string());
            }
            ["end_header"] => {
                body_start = Some(ln + 1);
                break;
            }
            _ => return Err(format_err(path, ln, format!("unrecognised header line '{line}'"))),
        }
    }
    if body_start.is_none() {
        return Err(format_err(path, 0, "missing end_header"));
    }
    let mut pts = None;
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                lines.next().ok_or_else(|| format_err(path, 0, format!("truncated {name} block")))?;
            }
            continue;
        }
        let idx = |axis: &str| {
            props
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| format_err(path, 0, format!("vertex has no '{axis}' property")))
        };
        let (ix, iy, iz) = (idx("x")?, idx("y")?, idx("z")?);
        let mut v = Vec::with_capacity(*count);
        for _ in 0..*count {
            let (ln, line) = lines.next().ok_or_else(|| format_err(path, 0, "truncated vertex block"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            let get = |i: usize| -> Result<f64> {
                vals.get(i)
                    .ok_or_else(|| format_err(path, ln, "too few vertex fields"))?
                    .parse()
                    .map_err(|e| format_err(path, ln, e))
            };
            v.push(Point3::new(get(ix)?, get(iy)?, get(iz)?));
        }
        pts = Some(v);
        break;
    }
    PointCloud::new(pts.ok_or_else(|| format_err(path, 0, "no vertex element"))?)
}

/// Reads a cloud, choosing the format by extension (`.dvpc`, `.ply`, otherwise XYZ).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("dvpc") => read_binary(path),
        Some("ply") => parse_ply(&fs::read_to_string(path)?, path),
        _ => parse_xyz(&fs::read_to_string(path)?, path),
    }
}

/// Writes a cloud as DVPC when the extension is `.dvpc`, otherwise as XYZ.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("dvpc")) {
        return write_binary(path, cloud);
    }
    let mut s = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        // `{:?}` prints the shortest representation that parses back exactly
        s.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    write_atomic(path, s.as_bytes())
}

fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|e| format_err(path, ln, e))?);
    }
    Ok(out)
}

fn write_indices(path: &Path, idx: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(idx.len() * 6);
    for i in idx {
        s.push_str(&i.to_string());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_dense_map(path: &Path, target_size: usize) -> Result<DenseMap> {
    DenseMap::new(read_indices(path)?, target_size)
}

pub fn write_dense_map(path: &Path, map: &DenseMap) -> Result<()> {
    write_indices(path, map.targets())
}

pub fn read_ground_truth(path: &Path, target_size: usize) -> Result<GroundTruth> {
    GroundTruth::new(read_indices(path)?, target_size)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_indices(path, gt.targets())
}

pub fn write_png(path: &Path, image: &ColorImage) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let w = u32::try_from(image.width).map_err(|_| Error::Format("image too wide".into()))?;
        let h = u32::try_from(image.height).map_err(|_| Error::Format("image too tall".into()))?;
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), w, h);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&image.to_rgb8())
            .map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::IDENTITY_6D;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn roundtrip<T: BinaryFormat + PartialEq + std::fmt::Debug>(v: &T) -> T {
        let bytes = v.encode().unwrap();
        let back = T::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        back
    }

    #[test]
    fn dvpc_layout() {
        let c = PointCloud::from_slice(&[[1.0, -2.0, 0.5]]).unwrap();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..4], b"DVPC");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
        assert_eq!(roundtrip(&c), c);
    }

    #[test]
    fn version_and_magic_are_checked() {
        let c = PointCloud::from_slice(&[[1.0, 2.0, 3.0]]).unwrap();
        let mut bytes = c.encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(PointCloud::decode(&bytes), Err(Error::Format(m)) if m.contains("version 2")));
        bytes[4] = 1;
        bytes[0] = b'X';
        assert!(PointCloud::decode(&bytes).is_err());
        bytes[0] = b'D';
        bytes.push(0);
        assert!(PointCloud::decode(&bytes).is_err());
        bytes.truncate(bytes.len() - 2);
        assert!(PointCloud::decode(&bytes).is_err());
        assert!(GeodesicMatrix::decode(b"DVGM\x01\x00\x00\x00\xff\xff\xff\xff").is_err());
    }

    #[test]
    fn dvfm_indexing() {
        // F(u, v, :) = (u, v)
        let (h, w) = (3, 4);
        let mut data = Vec::new();
        for u in 0..h {
            for v in 0..w {
                data.extend([u as f32, v as f32]);
            }
        }
        let img = FeatureImage::new(h, w, 2, data).unwrap();
        let bytes = img.encode().unwrap();
        let off = 20 + ((2 * w + 3) * 2) * 4;
        assert_eq!(&bytes[off..off + 8], [2.0f32.to_le_bytes(), 3.0f32.to_le_bytes()].concat());
        assert_eq!(roundtrip(&img), img);
    }

    #[test]
    fn small_containers_roundtrip() {
        let px = PixelIndex(vec![(0, 0), (223, 5), (7, 223)]);
        assert_eq!(roundtrip(&px), px);
        let g = GeodesicMatrix::new(2, vec![0.0, 0.25, 0.25, 0.0]).unwrap();
        assert_eq!(roundtrip(&g), g);
        let mut x = TransformSet::identity(2);
        x.delta[1] = Vector3::new(0.5, -1.0, 2.0);
        x.theta[0] = [0.5, 0.25, 0.0, -1.0, 1.0, 0.0];
        assert_eq!(roundtrip(&x), x);
        assert_eq!(x.theta[1], IDENTITY_6D);
        let pi = SoftCorrespondence::new(4, 3, vec![vec![(1, 0.75), (3, 0.25)], vec![(0, 1.0)]]).unwrap();
        let bytes = pi.encode().unwrap();
        assert_eq!(&bytes[..16], [&b"DVSC"[..], &2u32.to_le_bytes(), &4u32.to_le_bytes(), &3u32.to_le_bytes()].concat());
        assert_eq!(roundtrip(&pi), pi);
    }

    #[test]
    fn text_formats() {
        let dir = tempfile::tempdir().unwrap();
        let xyz = dir.path().join("a.xyz");
        fs::write(&xyz, "# header\n0 1 2\n\n  3.5 -4 5e-1 # trailing\n").unwrap();
        let c = read_cloud(&xyz).unwrap();
        assert_eq!(c.points(), &[Point3::new(0.0, 1.0, 2.0), Point3::new(3.5, -4.0, 0.5)]);
        fs::write(&xyz, "0 1\n").unwrap();
        assert!(matches!(read_cloud(&xyz), Err(Error::Format(m)) if m.contains(":1:")));

        let ply = dir.path().join("m.ply");
        fs::write(
            &ply,
            "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float y\nproperty float x\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n1 2 3\n4 5 6\n3 0 1 1\n",
        )
        .unwrap();
        let c = read_cloud(&ply).unwrap();
        assert_eq!(c.points(), &[Point3::new(2.0, 1.0, 3.0), Point3::new(5.0, 4.0, 6.0)]);

        let out = dir.path().join("b.xyz");
        let c = PointCloud::from_slice(&[[0.1, 1.0 / 3.0, -7e-12]]).unwrap();
        write_cloud(&out, &c).unwrap();
        assert_eq!(read_cloud(&out).unwrap(), c);

        let m = dir.path().join("map.txt");
        let map = DenseMap::new(vec![2, 0, 1], 3).unwrap();
        write_dense_map(&m, &map).unwrap();
        assert_eq!(fs::read_to_string(&m).unwrap(), "2\n0\n1\n");
        assert_eq!(read_dense_map(&m, 3).unwrap(), map);
        assert!(read_dense_map(&m, 2).is_err());
        assert_eq!(read_ground_truth(&m, 3).unwrap().targets(), map.targets());
    }

    #[test]
    fn png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.png");
        let img = ColorImage { height: 2, width: 3, rgb: vec![[0.0, 0.5, 1.0]; 6] };
        write_png(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert!(!dir.path().join("v.png.partial").exists());
    }

    proptest! {
        #[test]
        fn f32_payloads_roundtrip_bitwise(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let n = vals.len();
            let img = FeatureImage::new(1, n, 1, vals.clone()).unwrap();
            let back = roundtrip(&img);
            prop_assert!(back.data.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
            let pts: Vec<[f64; 3]> = vals.iter().map(|&v| [v.into(), (-v).into(), 0.0]).collect();
            let c = PointCloud::from_slice(&pts).unwrap();
            prop_assert_eq!(roundtrip(&c), c);
        }
    }
}
