//! Weight files: a flat tensor payload plus a plain-text `.manifest` sidecar that records
//! the format version, architecture, layer chain and fingerprint.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::micronet::network::{Architecture, Network, FORMAT_VERSION};
use crate::tensor::{read_tensor, write_tensor};

const HEADER: &str = "psforge-micronet weights";

pub fn manifest_path(weights: &Path) -> PathBuf {
    let mut name = weights.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

fn manifest(arch: &Architecture) -> String {
    let mut out = format!("{HEADER}\nformat_version {FORMAT_VERSION}\nfingerprint {}\n", arch.fingerprint());
    out += &format!("arch input_width {}\n", arch.input_width);
    out += &format!("arch stem_filters {}\n", arch.stem_filters);
    out += &format!("arch growth {}\n", arch.growth);
    out += &format!("arch block_layers {}\n", arch.block_layers);
    out += &format!("arch transition_channels {}\n", arch.transition_channels);
    out += &format!("arch hidden_units {}\n", arch.hidden_units);
    out += &format!("arch dropout {}\n", arch.dropout);
    for spec in arch.layer_specs() {
        out += &format!("layer {spec}\n");
    }
    for (name, shape) in arch.param_shapes() {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        out += &format!("param {name} {}\n", dims.join("x"));
    }
    out
}

pub fn save_weights(path: impl AsRef<Path>, net: &Network<f32>) -> Result<()> {
    let path = path.as_ref();
    let flat: Vec<f32> = net.params().iter().flatten().copied().collect();
    write_tensor(path, &[flat.len()], &flat)?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest(net.architecture())).map_err(|e| Error::io(mpath, e))
}

fn parse_manifest(text: &str, origin: &Path) -> Result<(Architecture, String)> {
    let fail = |reason: String| Error::format(origin, reason);
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(fail("missing weights manifest header".into()));
    }
    let mut arch = Architecture::default();
    let mut version = None;
    let mut fingerprint = None;
    for line in lines {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some("format_version"), Some(v), None) => {
                version = Some(v.parse::<u32>().map_err(|_| fail(format!("bad format version {v:?}")))?)
            }
            (Some("fingerprint"), Some(f), None) => fingerprint = Some(f.to_string()),
            (Some("arch"), Some(key), Some(value)) => {
                let int = || value.parse::<usize>().map_err(|_| fail(format!("bad value for {key}: {value:?}")));
                match key {
                    "input_width" => arch.input_width = int()?,
                    "stem_filters" => arch.stem_filters = int()?,
                    "growth" => arch.growth = int()?,
                    "block_layers" => arch.block_layers = int()?,
                    "transition_channels" => arch.transition_channels = int()?,
                    "hidden_units" => arch.hidden_units = int()?,
                    "dropout" => {
                        arch.dropout = value.parse().map_err(|_| fail(format!("bad dropout {value:?}")))?
                    }
                    other => return Err(fail(format!("unknown architecture key {other:?}"))),
                }
            }
            (Some("layer" | "param"), _, _) | (None, _, _) => {}
            _ => return Err(fail(format!("unrecognized manifest line {line:?}"))),
        }
    }
    match version {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(fail(format!("format version {v}, expected {FORMAT_VERSION}"))),
        None => return Err(fail("manifest lacks format_version".into())),
    }
    let fingerprint = fingerprint.ok_or_else(|| fail("manifest lacks fingerprint".into()))?;
    arch.validate().map_err(|e| fail(e.to_string()))?;
    Ok((arch, fingerprint))
}

/// Loads weights, refusing files whose fingerprint does not match the recorded architecture
/// or, when given, the architecture the caller expects.
pub fn load_weights(path: impl AsRef<Path>, expected: Option<&Architecture>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let (arch, stored) = parse_manifest(&text, &mpath)?;
    let computed = arch.fingerprint();
    if stored != computed {
        return Err(Error::Fingerprint { expected: computed, found: stored });
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != stored {
            return Err(Error::Fingerprint { expected: exp.fingerprint(), found: stored });
        }
    }
    let tensor = read_tensor(path)?;
    let shapes = arch.param_shapes();
    let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if tensor.dims != [total] {
        return Err(Error::format(path, format!("payload dims {:?}, architecture needs [{total}]", tensor.dims)));
    }
    let mut rest = tensor.data.as_slice();
    let params = shapes
        .iter()
        .map(|(_, s)| {
            let (head, tail) = rest.split_at(s.iter().product());
            rest = tail;
            head.to_vec()
        })
        .collect();
    Network::from_params(arch, params)
}
