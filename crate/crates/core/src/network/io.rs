//! On-disk formats.
//!
//! `.net.json`: a JSON header describing the architecture plus a base64
//! payload of little-endian f64 values in parameter order (per layer the
//! `[out][in][tap]` weights then the biases, then every general skip's
//! `[to][from][tap]` weights). `.mask.json`: the same parameter order as
//! packed bits, least significant bit first. Both embed the producing
//! run's configuration. CSV outputs carry it as a leading `# config:`
//! comment line.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Layer, LayerMask, LayerSpec, Mask, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{SkipKind, SkipOperator};

pub const NET_FORMAT: &str = "conv-tickets/net";
pub const MASK_FORMAT: &str = "conv-tickets/mask";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SkipHeaderKind {
    Identity { map: Vec<Option<usize>> },
    General { kernel: Vec<usize> },
}

#[derive(Debug, Serialize, Deserialize)]
struct SkipHeader {
    from: usize,
    to: usize,
    #[serde(flatten)]
    kind: SkipHeaderKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetFile {
    format: String,
    version: u32,
    endianness: String,
    spatial_layout: String,
    input_channels: usize,
    layers: Vec<LayerSpec>,
    skips: Vec<SkipHeader>,
    output_scale: Vec<f64>,
    parameter_count: usize,
    payload: String,
    #[serde(default)]
    config: Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskFile {
    format: String,
    version: u32,
    bit_order: String,
    parameter_count: usize,
    /// `(weights, biases)` per layer.
    layers: Vec<(usize, usize)>,
    skips: Vec<usize>,
    bits: String,
    #[serde(default)]
    config: Value,
}

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Format(format!("expected format `{expected}`, found `{format}`")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// CSV writer whose first line is `# config: <json>` unless `config` is null.
pub fn csv_writer(path: &Path, config: &Value) -> Result<csv::Writer<File>> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    if !config.is_null() {
        writeln!(file, "# config: {config}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(file))
}

/// CSV reader that skips `#` comment lines.
pub fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

pub fn save_network(net: &NetworkSpec, path: &Path, config: &Value) -> Result<()> {
    let mut bytes = Vec::with_capacity(net.parameter_count() * 8);
    let mut push = |vals: &[f64]| vals.iter().for_each(|v| bytes.extend(v.to_le_bytes()));
    for l in net.layers() {
        push(&l.weights);
        push(&l.biases);
    }
    let mut skips = Vec::with_capacity(net.skips().len());
    for s in net.skips() {
        let kind = match &s.kind {
            SkipKind::Identity { map } => SkipHeaderKind::Identity { map: map.clone() },
            SkipKind::General { kernel, weights } => {
                push(weights);
                SkipHeaderKind::General {
                    kernel: kernel.clone(),
                }
            }
        };
        skips.push(SkipHeader {
            from: s.from,
            to: s.to,
            kind,
        });
    }
    let file = NetFile {
        format: NET_FORMAT.into(),
        version: FORMAT_VERSION,
        endianness: "little".into(),
        spatial_layout: "row-major".into(),
        input_channels: net.input_channels(),
        layers: net.layers().iter().map(|l| l.spec.clone()).collect(),
        skips,
        output_scale: net.output_scale().to_vec(),
        parameter_count: net.parameter_count(),
        payload: STANDARD.encode(&bytes),
        config: config.clone(),
    };
    write_json(path, &file)
}

/// Loads a network and returns it with its embedded configuration.
pub fn load_network(path: &Path) -> Result<(NetworkSpec, Value)> {
    let file: NetFile = read_json(path)?;
    check_header(&file.format, file.version, NET_FORMAT)?;
    if file.endianness != "little" || file.spatial_layout != "row-major" {
        return Err(Error::Format("only little-endian row-major payloads are supported".into()));
    }
    let bytes = STANDARD
        .decode(file.payload.as_bytes())
        .map_err(|e| Error::Format(format!("payload: {e}")))?;
    if bytes.len() != file.parameter_count * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header declares {} parameters",
            bytes.len(),
            file.parameter_count
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(Error::Format("payload shorter than the declared architecture".into()))
        }
    };
    let mut layers = Vec::with_capacity(file.layers.len());
    for spec in file.layers {
        let weights = take(spec.weight_len())?;
        let biases = take(spec.out_channels)?;
        layers.push(Layer {
            spec,
            weights,
            biases,
        });
    }
    let channels = |l: usize| {
        if l == 0 {
            file.input_channels
        } else {
            layers.get(l - 1).map_or(0, |x: &Layer| x.spec.out_channels)
        }
    };
    let mut skips = Vec::with_capacity(file.skips.len());
    for h in file.skips {
        let kind = match h.kind {
            SkipHeaderKind::Identity { map } => SkipKind::Identity { map },
            SkipHeaderKind::General { kernel } => {
                let n = channels(h.to) * channels(h.from) * kernel.iter().product::<usize>();
                SkipKind::General {
                    weights: take(n)?,
                    kernel,
                }
            }
        };
        skips.push(SkipOperator {
            from: h.from,
            to: h.to,
            kind,
        });
    }
    let net = NetworkSpec::with_output_scale(file.input_channels, layers, skips, file.output_scale)?;
    if net.parameter_count() != file.parameter_count {
        return Err(Error::Format("parameter count does not match the architecture".into()));
    }
    Ok((net, file.config))
}

/// Loads a target network, rejecting parameters outside `[-1, 1]`.
pub fn load_target(path: &Path) -> Result<(NetworkSpec, Value)> {
    let (net, config) = load_network(path)?;
    net.check_unit_range()?;
    Ok((net, config))
}

pub fn save_mask(mask: &Mask, path: &Path, config: &Value) -> Result<()> {
    let bits = mask.to_bits();
    let mut packed = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    let file = MaskFile {
        format: MASK_FORMAT.into(),
        version: FORMAT_VERSION,
        bit_order: "lsb-first".into(),
        parameter_count: bits.len(),
        layers: mask
            .layers
            .iter()
            .map(|l| (l.weights.len(), l.biases.len()))
            .collect(),
        skips: mask.skips.iter().map(Vec::len).collect(),
        bits: STANDARD.encode(&packed),
        config: config.clone(),
    };
    write_json(path, &file)
}

pub fn load_mask(path: &Path) -> Result<(Mask, Value)> {
    let file: MaskFile = read_json(path)?;
    check_header(&file.format, file.version, MASK_FORMAT)?;
    if file.bit_order != "lsb-first" {
        return Err(Error::Format(format!("unknown bit order `{}`", file.bit_order)));
    }
    let packed = STANDARD
        .decode(file.bits.as_bytes())
        .map_err(|e| Error::Format(format!("bits: {e}")))?;
    let declared = file.layers.iter().map(|(w, b)| w + b).sum::<usize>()
        + file.skips.iter().sum::<usize>();
    if declared != file.parameter_count || packed.len() != declared.div_ceil(8) {
        return Err(Error::Format("mask bit count does not match its layout".into()));
    }
    let mut pos = 0usize;
    let mut take = |n: usize| {
        let v: Vec<bool> = (pos..pos + n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        pos += n;
        v
    };
    let layers = file
        .layers
        .iter()
        .map(|&(w, b)| LayerMask {
            weights: take(w),
            biases: take(b),
        })
        .collect();
    let skips = file.skips.iter().map(|&n| take(n)).collect();
    Ok((Mask { layers, skips }, file.config))
}
