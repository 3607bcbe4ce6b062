//! Netpbm rasters (PGM/PPM, ascii and binary) and the pixel affinity graph.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    pub maxval: u16,
    /// Row-major, channel-interleaved samples.
    pub data: Vec<u16>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u16>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("{channels} channels unsupported")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        let maxval = data.iter().copied().max().unwrap_or(0).max(255);
        Ok(Raster {
            width,
            height,
            channels,
            maxval,
            data,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u16] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next_token(&mut self) -> Option<&'a str> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            None
        } else {
            std::str::from_utf8(&self.bytes[start..self.pos]).ok()
        }
    }

    fn next_number(&mut self, what: &str) -> Result<usize> {
        let tok = self
            .next_token()
            .ok_or_else(|| Error::parse("netpbm", format!("missing {what}")))?;
        tok.parse::<usize>()
            .map_err(|e| Error::parse("netpbm", format!("{what} {tok:?}: {e}")))
    }
}

pub fn read_netpbm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_netpbm(&bytes).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn parse_netpbm(bytes: &[u8]) -> Result<Raster> {
    let mut t = Tokens { bytes, pos: 0 };
    let magic = t
        .next_token()
        .ok_or_else(|| Error::parse("netpbm", "empty file"))?;
    let (channels, binary) = match magic {
        "P2" => (1, false),
        "P5" => (1, true),
        "P3" => (3, false),
        "P6" => (3, true),
        other => {
            return Err(Error::parse(
                "netpbm",
                format!("unsupported magic {other:?} (only P2/P3/P5/P6)"),
            ))
        }
    };
    let width = t.next_number("width")?;
    let height = t.next_number("height")?;
    let maxval = t.next_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("zero-size image".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse("netpbm", format!("maxval {maxval} out of range")));
    }
    let count = width * height * channels;
    let mut data = Vec::with_capacity(count);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = t.pos + 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        if bytes.len() < start + need {
            return Err(Error::parse("netpbm", "truncated raster"));
        }
        let body = &bytes[start..start + need];
        if wide {
            data.extend(body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])));
        } else {
            data.extend(body.iter().map(|&b| b as u16));
        }
    } else {
        for _ in 0..count {
            let v = t.next_number("sample")?;
            if v > maxval {
                return Err(Error::parse("netpbm", format!("sample {v} exceeds maxval")));
            }
            data.push(v as u16);
        }
    }
    Ok(Raster {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data,
    })
}

/// Binary PGM (P5) or PPM (P6) encoding with maxval 255 when possible.
pub fn encode_netpbm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let maxval = r.maxval.max(1);
    let mut out = format!("{magic}\n{} {}\n{}\n", r.width, r.height, maxval).into_bytes();
    if maxval > 255 {
        for &v in &r.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(r.data.iter().map(|&v| v as u8));
    }
    out
}

/// Indexed label image: each pixel stores its community id.
pub fn label_image(width: usize, height: usize, labels: &[usize]) -> Result<Raster> {
    if labels.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} labels for a {width}x{height} image",
            labels.len()
        )));
    }
    let data: Vec<u16> = labels
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} too large"))))
        .collect::<Result<_>>()?;
    let maxval = data.iter().copied().max().unwrap_or(0).max(1);
    Ok(Raster {
        width,
        height,
        channels: 1,
        maxval,
        data,
    })
}

fn spatial_neighbors(img: &Raster, r: f64) -> Vec<(usize, usize)> {
    let w = img.width as isize;
    let h = img.height as isize;
    let reach = r.floor() as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if j <= i {
                        continue;
                    }
                    if ((dx * dx + dy * dy) as f64).sqrt() <= r {
                        out.push((i, j));
                    }
                }
            }
        }
    }
    out
}

fn pixel_features(img: &Raster) -> Array2<f64> {
    Array2::from_shape_fn((img.n_pixels(), img.channels), |(p, c)| {
        img.data[p * img.channels + c] as f64
    })
}

/// One node per pixel, features are raw channel values; pixels `i`, `j` are
/// joined when their grid distance is at most `r` and their feature distance
/// is strictly below `alpha`.
pub fn image_to_graph(img: &Raster, r: f64, alpha: f64) -> Result<Graph> {
    if img.n_pixels() == 0 {
        return Err(Error::InvalidArgument("zero-size image".into()));
    }
    if !(r > 0.0) || !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius and alpha must be positive (r={r}, alpha={alpha})"
        )));
    }
    let feats = pixel_features(img);
    let edges: Vec<(usize, usize)> = spatial_neighbors(img, r)
        .into_iter()
        .filter(|&(i, j)| {
            let d2: f64 = feats
                .row(i)
                .iter()
                .zip(feats.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d2.sqrt() < alpha
        })
        .collect();
    Graph::from_edges(img.n_pixels(), &edges, feats)
}

/// The spatial lattice of radius `r`, ignoring colors. Scopes for pixel
/// attacks are measured on this graph.
pub fn spatial_graph(img: &Raster, r: f64) -> Result<Graph> {
    if img.n_pixels() == 0 {
        return Err(Error::InvalidArgument("zero-size image".into()));
    }
    Graph::from_edges(img.n_pixels(), &spatial_neighbors(img, r), pixel_features(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel() {
        let img = Raster::new(1, 1, 1, vec![7]).unwrap();
        let g = image_to_graph(&img, 1.0, 20.0).unwrap();
        assert_eq!(g.n_nodes(), 1);
        assert_eq!(g.n_edges(), 0);
    }

    #[test]
    fn contrasting_pair_is_disconnected() {
        let img = Raster::new(2, 1, 3, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let g = image_to_graph(&img, 1.0, 20.0).unwrap();
        assert_eq!(g.n_edges(), 0);
        let d = (3.0f64 * 255.0 * 255.0).sqrt();
        assert!((d - 441.67).abs() < 0.01);
    }

    #[test]
    fn identical_pair_is_connected() {
        let img = Raster::new(2, 1, 3, vec![9, 9, 9, 9, 9, 9]).unwrap();
        let g = image_to_graph(&img, 1.0, 20.0).unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn radius_one_is_four_connected() {
        let img = Raster::new(3, 3, 1, vec![0; 9]).unwrap();
        let g = image_to_graph(&img, 1.0, 20.0).unwrap();
        assert_eq!(g.n_edges(), 12);
        let g = image_to_graph(&img, 1.5, 20.0).unwrap();
        assert_eq!(g.n_edges(), 20);
    }

    #[test]
    fn rejects_bad_args() {
        let img = Raster::new(1, 1, 1, vec![0]).unwrap();
        assert!(image_to_graph(&img, 0.0, 20.0).is_err());
        assert!(image_to_graph(&img, 1.0, -1.0).is_err());
        assert!(parse_netpbm(b"P2\n0 3\n255\n").is_err());
    }

    #[test]
    fn netpbm_ascii_and_binary() {
        let ascii = b"P2\n# comment\n3 2\n255\n0 10 20\n30 40 255\n";
        let r = parse_netpbm(ascii).unwrap();
        assert_eq!((r.width, r.height, r.channels), (3, 2, 1));
        assert_eq!(r.data, vec![0, 10, 20, 30, 40, 255]);
        let enc = encode_netpbm(&r);
        assert_eq!(parse_netpbm(&enc).unwrap(), r);

        let ppm = b"P3 1 1 255 1 2 3";
        let r = parse_netpbm(ppm).unwrap();
        assert_eq!(r.pixel(0, 0), &[1, 2, 3]);
        assert_eq!(parse_netpbm(&encode_netpbm(&r)).unwrap(), r);
        assert!(parse_netpbm(b"P1 1 1 1").is_err());
    }
}
