//! Binary model files.
//!
//! ```text
//! magic "MOSMODEL" | version u32 | window u32 | residual channels u32
//! | hidden count u32 | hidden sizes u32... | seed u64
//! | normalization: channels u32, means f64..., scales f64...
//! | per layer: weights f64... then biases f64...
//! ```
//! All integers and floats little endian.

use std::fs;
use std::path::Path;

use super::{Layer, Mlp, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::residual::NormalizationSpec;

pub const MODEL_MAGIC: [u8; 8] = *b"MOSMODEL";
pub const MODEL_VERSION: u32 = 1;

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let spec = &params.spec;
    let mut buf = Vec::with_capacity(64 + params.mlp.parameter_count() * 8);
    buf.extend_from_slice(&MODEL_MAGIC);
    let put_u32 = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    put_u32(&mut buf, MODEL_VERSION as usize);
    put_u32(&mut buf, spec.window);
    put_u32(&mut buf, spec.residual_channels);
    put_u32(&mut buf, spec.hidden.len());
    for &h in &spec.hidden {
        put_u32(&mut buf, h);
    }
    buf.extend_from_slice(&spec.seed.to_le_bytes());
    put_u32(&mut buf, params.norm.channels());
    for v in params.norm.mean.iter().chain(&params.norm.scale) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in params.mlp.parameters() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("byte offset {}", self.pos),
                format!("file ends while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8, "magic")? != MODEL_MAGIC {
        return Err(Error::format(path, "byte offset 0", "not a model file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION as usize {
        return Err(Error::format(
            path,
            "byte offset 8",
            format!("unsupported model version {version}"),
        ));
    }
    let window = r.u32("window")?;
    let residual_channels = r.u32("residual channel count")?;
    let layers = r.u32("hidden layer count")?;
    if layers > 64 {
        return Err(Error::format(path, "header", format!("implausible layer count {layers}")));
    }
    let hidden = (0..layers)
        .map(|_| r.u32("hidden size"))
        .collect::<Result<Vec<_>>>()?;
    let seed = r.u64("seed")?;
    let spec = ModelSpec {
        window,
        residual_channels,
        hidden,
        seed,
    };
    spec.validate()
        .map_err(|e| Error::format(path, "header", e.to_string()))?;

    let channels = r.u32("normalization channels")?;
    if channels != spec.channels() {
        return Err(Error::format(
            path,
            "normalization",
            format!("{channels} channels, spec implies {}", spec.channels()),
        ));
    }
    let norm = NormalizationSpec {
        mean: r.f64s(channels, "normalization means")?,
        scale: r.f64s(channels, "normalization scales")?,
    };
    norm.validate()
        .map_err(|e| Error::format(path, "normalization", e.to_string()))?;

    let mut sizes = vec![spec.input_len()];
    sizes.extend_from_slice(&spec.hidden);
    sizes.push(1);
    let mut mlp_layers = Vec::with_capacity(sizes.len() - 1);
    for pair in sizes.windows(2) {
        let (inputs, outputs) = (pair[0], pair[1]);
        let weights = r.f64s(inputs * outputs, "weights")?;
        let bias = r.f64s(outputs, "biases")?;
        mlp_layers.push(Layer {
            inputs,
            outputs,
            weights,
            bias,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("byte offset {}", r.pos),
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    let mlp = Mlp { layers: mlp_layers };
    if !mlp.is_finite() {
        return Err(Error::format(path, "parameters", "non-finite parameter"));
    }
    Ok(ModelParams { spec, mlp, norm })
}
