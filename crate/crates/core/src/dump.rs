//! Planar float grid dumps for debugging and golden tests.
//!
//! One text line `h w channels\n` followed by `channels * h * w`
//! little-endian f32 values, channel-planar, row-major within a channel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::projection::RangeImage;
use crate::residual::ResidualStack;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<Vec<f32>>,
}

pub fn write_grid(path: &Path, height: usize, width: usize, channels: &[&[f32]]) -> Result<()> {
    let mut buf = format!("{height} {width} {}\n", channels.len()).into_bytes();
    for ch in channels {
        if ch.len() != height * width {
            return Err(Error::Precondition(format!(
                "channel of {} values does not fit a {height}x{width} grid",
                ch.len()
            )));
        }
        for v in *ch {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "header", "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::format(path, "header", "header is not utf-8"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, "header", "expected `h w channels`"))?;
    let [height, width, count] = dims[..] else {
        return Err(Error::format(path, "header", "expected `h w channels`"));
    };
    let payload = &bytes[nl + 1..];
    let plane = height * width;
    if payload.len() != plane * count * 4 {
        return Err(Error::format(
            path,
            format!("byte offset {}", nl + 1),
            format!("payload of {} bytes, expected {}", payload.len(), plane * count * 4),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Grid {
        height,
        width,
        channels: values.chunks(plane.max(1)).take(count).map(<[f32]>::to_vec).collect(),
    })
}

/// Dumps range, x, y, z and remission.
pub fn write_range_image(path: &Path, image: &RangeImage) -> Result<()> {
    write_grid(
        path,
        image.height(),
        image.width(),
        &[&image.range, &image.x, &image.y, &image.z, &image.remission],
    )
}

pub fn write_residual_stack(path: &Path, stack: &ResidualStack) -> Result<()> {
    let channels: Vec<&[f32]> = stack.channels.iter().map(Vec::as_slice).collect();
    write_grid(path, stack.height, stack.width, &channels)
}
