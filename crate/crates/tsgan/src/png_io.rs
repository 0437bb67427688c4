//! 8-bit grey and RGB PNG files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{CliError, Result};

/// Decoded pixels in row-major, channel-interleaved order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    /// Planar copy (`[c][h][w]`), the layout the core image type expects.
    pub fn planar(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0; self.data.len()];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }

    pub fn from_planar(channels: usize, height: usize, width: usize, planar: &[u8]) -> Self {
        let plane = height * width;
        let mut data = vec![0; planar.len()];
        for i in 0..plane {
            for c in 0..channels {
                data[i * channels + c] = planar[c * plane + i];
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }
}

pub fn read_png(path: &Path) -> Result<RawImage> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let bad = |what: String| CliError::Data(format!("{}: {what}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit samples, found {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(bad(format!("expected grey or RGB, found {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok(RawImage {
        channels,
        height: info.height as usize,
        width: info.width as usize,
        data: buf,
    })
}

pub fn write_png(path: &Path, image: &RawImage) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(CliError::Data(format!("cannot write a {c}-channel PNG"))),
    };
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Data(format!("{}: {other}", path.display())),
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&image.data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
