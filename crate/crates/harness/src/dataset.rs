//! `DIVK` dataset files: scenes with their rendered clips.
//!
//! Layout (little-endian): magic, `u32` version, `u32` record count, then
//! per record the scene followed by `u32` dims `[V, T, H, W, C]` and the clip
//! as `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use dive_core::conditions::{CameraSpec, InstanceSpec, RoadSketch, SceneSpec, ViewBox};
use dive_core::{GridDims, LatentGrid};

pub const MAGIC: &[u8; 4] = b"DIVK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("bad magic: expected DIVK")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated dataset file")]
    Truncated,
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::Truncated
        } else {
            DatasetError::Io(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub scene: SceneSpec,
    pub dims: GridDims,
    pub video: Vec<f32>,
}

impl Record {
    pub fn new(scene: SceneSpec, video: &LatentGrid) -> Self {
        Self {
            scene,
            dims: video.dims(),
            video: video.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn latent(&self) -> LatentGrid {
        LatentGrid::from_vec(self.dims, self.video.iter().map(|&v| f64::from(v)).collect()).expect("record dims")
    }
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn u32(&mut self, v: usize) -> std::io::Result<()> {
        self.0.write_all(&(v as u32).to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        vs.iter().try_for_each(|&v| self.f64(v))
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn u32(&mut self) -> Result<usize, DatasetError> {
        let mut b = [0; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }
    fn f64(&mut self) -> Result<f64, DatasetError> {
        let mut b = [0; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn array<const N: usize>(&mut self) -> Result<[f64; N], DatasetError> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f64()?;
        }
        Ok(out)
    }
    /// Length prefix, bounded to reject garbage before allocating.
    fn len(&mut self, max: usize) -> Result<usize, DatasetError> {
        let n = self.u32()?;
        if n > max {
            return Err(DatasetError::Malformed(format!("length {n} exceeds {max}")));
        }
        Ok(n)
    }
}

fn write_scene<W: Write>(o: &mut Out<W>, s: &SceneSpec) -> std::io::Result<()> {
    o.u32(s.label)?;
    o.u32(s.cameras.len())?;
    for c in &s.cameras {
        o.f64s(c.k.as_flattened())?;
        o.f64s(c.rot.as_flattened())?;
        o.f64s(&c.t)?;
    }
    o.u32(s.instances.len())?;
    for inst in &s.instances {
        o.f64(inst.angle)?;
        o.u32(inst.caption)?;
        o.u32(inst.boxes.len())?;
        for b in &inst.boxes {
            match b {
                Some(b) => {
                    o.u32(1)?;
                    o.f64s(&b.rect)?;
                    o.f64s(&b.motion)?;
                }
                None => o.u32(0)?,
            }
        }
    }
    o.u32(s.road.views.len())?;
    for lines in &s.road.views {
        o.u32(lines.len())?;
        for line in lines {
            o.u32(line.len())?;
            for p in line {
                o.f64s(p)?;
            }
        }
    }
    Ok(())
}

fn mat3(flat: [f64; 9]) -> [[f64; 3]; 3] {
    [[flat[0], flat[1], flat[2]], [flat[3], flat[4], flat[5]], [flat[6], flat[7], flat[8]]]
}

const MAX_LEN: usize = 1 << 16;

fn read_scene<R: Read>(i: &mut In<R>) -> Result<SceneSpec, DatasetError> {
    let label = i.u32()?;
    let cameras = (0..i.len(64)?)
        .map(|_| {
            Ok(CameraSpec {
                k: mat3(i.array()?),
                rot: mat3(i.array()?),
                t: i.array()?,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let instances = (0..i.len(64)?)
        .map(|_| {
            let angle = i.f64()?;
            let caption = i.u32()?;
            let boxes = (0..i.len(64)?)
                .map(|_| match i.u32()? {
                    0 => Ok(None),
                    1 => Ok(Some(ViewBox {
                        rect: i.array()?,
                        motion: i.array()?,
                    })),
                    f => Err(DatasetError::Malformed(format!("box flag {f}"))),
                })
                .collect::<Result<Vec<_>, DatasetError>>()?;
            Ok(InstanceSpec { boxes, angle, caption })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let views = (0..i.len(64)?)
        .map(|_| {
            (0..i.len(MAX_LEN)?)
                .map(|_| (0..i.len(MAX_LEN)?).map(|_| i.array::<2>()).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(SceneSpec {
        label,
        instances,
        cameras,
        road: RoadSketch { views },
    })
}

pub fn write_records<W: Write>(w: W, records: &[Record]) -> Result<(), DatasetError> {
    let mut o = Out(w);
    o.0.write_all(MAGIC)?;
    o.u32(VERSION as usize)?;
    o.u32(records.len())?;
    for r in records {
        write_scene(&mut o, &r.scene)?;
        for d in r.dims.shape() {
            o.u32(d)?;
        }
        for v in &r.video {
            o.0.write_all(&v.to_le_bytes())?;
        }
    }
    o.0.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<Record>, DatasetError> {
    let mut i = In(r);
    let mut magic = [0; 4];
    i.0.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = i.u32()? as u32;
    if version != VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    let n = i.u32()?;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let scene = read_scene(&mut i)?;
        let s: Vec<usize> = (0..5).map(|_| i.len(4096)).collect::<Result<_, _>>()?;
        let dims = GridDims::new(s[0], s[1], s[2], s[3], s[4]);
        let mut bytes = vec![0u8; dims.len() * 4];
        i.0.read_exact(&mut bytes)?;
        let video = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(Record { scene, dims, video });
    }
    Ok(out)
}

pub fn dataset_write(path: &Path, records: &[Record]) -> Result<(), DatasetError> {
    write_records(BufWriter::new(File::create(path)?), records)
}

pub fn dataset_read(path: &Path) -> Result<Vec<Record>, DatasetError> {
    read_records(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{render_oracle, scene_for};

    fn records(n: u64) -> Vec<Record> {
        (0..n)
            .map(|i| {
                let s = scene_for(1, i);
                let v = render_oracle(&s, 2, 8, 14);
                Record::new(s, &v)
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let recs = records(10);
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert_eq!(read_records(&buf[..]).unwrap(), recs);
        assert_eq!(&buf[..4], b"DIVK");
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut buf = Vec::new();
        write_records(&mut buf, &records(2)).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_records(&bad[..]), Err(DatasetError::BadMagic)));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_records(&bad[..]), Err(DatasetError::BadVersion(9))));
        for cut in [2, 10, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(read_records(&buf[..cut]), Err(DatasetError::Truncated)), "cut {cut}");
        }
    }
}
