//! Model file format: a versioned text header with the config as key=value
//! lines, then the raw little-endian f64 parameter tensors in layout order.
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Activation, ModelConfig, NetError, PotentialModel};

const MODEL_MAGIC: &str = "npfield-model v1";

pub fn write_model(w: &mut impl Write, model: &PotentialModel) -> Result<(), NetError> {
    let c = model.config();
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(w, "map_side={}", c.map_side)?;
    writeln!(w, "embed_map={}", c.embed_map)?;
    writeln!(w, "embed_fp={}", c.embed_fp)?;
    writeln!(w, "embed_pose={}", c.embed_pose)?;
    writeln!(w, "attention={}", c.attention)?;
    writeln!(w, "attention_heads={}", c.attention_heads)?;
    writeln!(
        w,
        "enc_channels={},{},{},{}",
        c.enc_channels[0], c.enc_channels[1], c.enc_channels[2], c.enc_channels[3]
    )?;
    let widths: Vec<String> = c.head_widths.iter().map(|v| v.to_string()).collect();
    writeln!(w, "head_widths={}", widths.join(","))?;
    writeln!(w, "activation={}", c.activation.name())?;
    writeln!(w, "seed={}", c.seed)?;
    writeln!(w, "potential_scale={}", c.potential_scale)?;
    writeln!(w, "epochs_trained={}", c.epochs_trained)?;
    writeln!(w, "params={}", model.params().len())?;
    writeln!(w, "end")?;
    for v in model.params() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl BufRead) -> Result<PotentialModel, NetError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MODEL_MAGIC {
        return Err(NetError::BadModelFile(format!("bad magic: {:?}", line.trim_end())));
    }

    let mut config = ModelConfig::default();
    let mut declared_params: Option<usize> = None;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(NetError::BadModelFile("header ended before `end`".into()));
        }
        let line = line.trim_end();
        if line == "end" {
            break;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| NetError::BadModelFile(format!("bad header line {line:?}")))?;
        let parse_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| NetError::BadModelFile(format!("bad value for {key}: {v:?}")))
        };
        match key {
            "map_side" => config.map_side = parse_usize(value)?,
            "embed_map" => config.embed_map = parse_usize(value)?,
            "embed_fp" => config.embed_fp = parse_usize(value)?,
            "embed_pose" => config.embed_pose = parse_usize(value)?,
            "attention" => {
                config.attention = value
                    .parse()
                    .map_err(|_| NetError::BadModelFile(format!("bad bool {value:?}")))?
            }
            "attention_heads" => config.attention_heads = parse_usize(value)?,
            "enc_channels" => {
                let parts: Vec<usize> = value.split(',').filter_map(|v| v.parse().ok()).collect();
                if parts.len() != 4 {
                    return Err(NetError::BadModelFile("enc_channels must have 4 entries".into()));
                }
                config.enc_channels = [parts[0], parts[1], parts[2], parts[3]];
            }
            "head_widths" => {
                config.head_widths = value.split(',').filter_map(|v| v.parse().ok()).collect();
                if config.head_widths.is_empty() {
                    return Err(NetError::BadModelFile("empty head_widths".into()));
                }
            }
            "activation" => {
                config.activation = Activation::from_name(value)
                    .ok_or_else(|| NetError::BadModelFile(format!("unknown activation {value:?}")))?
            }
            "seed" => {
                config.seed = value
                    .parse()
                    .map_err(|_| NetError::BadModelFile(format!("bad seed {value:?}")))?
            }
            "potential_scale" => {
                config.potential_scale = value
                    .parse()
                    .map_err(|_| NetError::BadModelFile(format!("bad scale {value:?}")))?
            }
            "epochs_trained" => {
                config.epochs_trained = value
                    .parse()
                    .map_err(|_| NetError::BadModelFile(format!("bad epochs {value:?}")))?
            }
            "params" => declared_params = Some(parse_usize(value)?),
            other => return Err(NetError::BadModelFile(format!("unknown header key {other:?}"))),
        }
    }
    let declared = declared_params.ok_or_else(|| NetError::BadModelFile("missing params count".into()))?;

    let mut params = vec![0.0f64; declared];
    let mut buf = [0u8; 8];
    for (i, p) in params.iter_mut().enumerate() {
        r.read_exact(&mut buf)
            .map_err(|_| NetError::BadModelFile(format!("weights truncated at {i} of {declared}")))?;
        *p = f64::from_le_bytes(buf);
    }
    PotentialModel::from_parts(config, params)
}

pub fn save_model(path: impl AsRef<Path>, model: &PotentialModel) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PotentialModel, NetError> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}
