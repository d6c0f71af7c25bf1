//! Binary PPM frames, one file per view and frame.
//!
//! Channels 0..3 become RGB. Values map affinely from the latent's overall
//! range onto 0..=255; a flat latent maps to mid grey.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dive_core::LatentGrid;

pub fn frame_name(view: usize, frame: usize) -> String {
    format!("view{view}_frame{frame}.ppm")
}

fn byte(x: f64, lo: f64, span: f64) -> u8 {
    if span <= 0.0 {
        return 128;
    }
    (255.0 * (x - lo) / span).round().clamp(0.0, 255.0) as u8
}

pub fn encode_ppm(latent: &LatentGrid, view: usize, frame: usize, range: (f64, f64)) -> Result<Vec<u8>> {
    let d = latent.dims();
    ensure!(d.channels >= 3, "{} channels cannot be shown as RGB", d.channels);
    let (lo, hi) = range;
    let mut out = format!("P6\n{} {}\n255\n", d.width, d.height).into_bytes();
    for px in latent.image(view, frame).chunks(d.channels) {
        out.extend(px[..3].iter().map(|&x| byte(x, lo, hi - lo)));
    }
    Ok(out)
}

/// Writes every frame of `latent` into `dir` and returns the paths in view
/// then frame order.
pub fn export_frames(latent: &LatentGrid, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let lo = latent.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = latent.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d = latent.dims();
    let mut paths = Vec::with_capacity(d.views * d.frames);
    for v in 0..d.views {
        for t in 0..d.frames {
            let path = dir.join(frame_name(v, t));
            fs::write(&path, encode_ppm(latent, v, t, (lo, hi))?).with_context(|| format!("writing {}", path.display()))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PpmHeader {
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
    /// Offset of the first pixel byte.
    pub offset: usize,
}

pub fn parse_ppm_header(bytes: &[u8]) -> Result<PpmHeader> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            bail!("PPM header ends early");
        }
        fields.push(std::str::from_utf8(&bytes[start..i])?);
    }
    ensure!(fields[0] == "P6", "not a binary PPM: {}", fields[0]);
    ensure!(i < bytes.len(), "PPM header ends early");
    let header = PpmHeader {
        width: fields[1].parse()?,
        height: fields[2].parse()?,
        maxval: fields[3].parse()?,
        offset: i + 1,
    };
    ensure!(
        bytes.len() - header.offset == 3 * header.width * header.height,
        "PPM payload has {} bytes for {}x{}",
        bytes.len() - header.offset,
        header.width,
        header.height
    );
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dive_core::GridDims;

    #[test]
    fn twelve_named_files() {
        let dims = GridDims::new(3, 4, 8, 14, 4);
        let data = (0..dims.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let latent = LatentGrid::from_vec(dims, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_frames(&latent, dir.path()).unwrap();
        assert_eq!(paths.len(), 12);
        assert_eq!(paths[5].file_name().unwrap(), "view1_frame1.ppm");
        for p in &paths {
            let bytes = fs::read(p).unwrap();
            let h = parse_ppm_header(&bytes).unwrap();
            assert_eq!((h.width, h.height, h.maxval), (14, 8, 255));
        }
    }

    #[test]
    fn constant_latent_is_constant_colour() {
        let dims = GridDims::new(1, 1, 4, 5, 3);
        let latent = LatentGrid::from_vec(dims, vec![0.3; dims.len()]).unwrap();
        let bytes = encode_ppm(&latent, 0, 0, (0.3, 0.3)).unwrap();
        let h = parse_ppm_header(&bytes).unwrap();
        assert!(bytes[h.offset..].iter().all(|&b| b == 128));
    }

    #[test]
    fn range_maps_to_extremes() {
        let dims = GridDims::new(1, 1, 1, 2, 3);
        let latent = LatentGrid::from_vec(dims, vec![-1.0, -1.0, -1.0, 3.0, 1.0, 3.0]).unwrap();
        let bytes = encode_ppm(&latent, 0, 0, (-1.0, 3.0)).unwrap();
        let h = parse_ppm_header(&bytes).unwrap();
        assert_eq!(&bytes[h.offset..], &[0, 0, 0, 255, 128, 255]);
    }

    #[test]
    fn malformed_headers() {
        assert!(parse_ppm_header(b"P3\n1 1\n255\n\0\0\0").is_err());
        assert!(parse_ppm_header(b"P6\n2 1\n255\n\0\0\0").is_err());
        assert!(parse_ppm_header(b"P6\n# note\n1 1\n255\n\0\0\0").is_ok());
    }
}
