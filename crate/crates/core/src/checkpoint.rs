//! Versioned text container for trained checkpoints.
//!
//! ```text
//! METRICLAB-CKPT 1
//! epoch <n>
//! dev_eer <x>
//! train_loss <x | none>
//! config <line count>
//! <TrainConfig as TOML>
//! tensor <name> <dim>...
//! <row-major values, one matrix row per line>
//! ...
//! end
//! ```
//!
//! Tensors: `encoder.w1`, `encoder.b1`, `encoder.w2`, `encoder.b2`, and when
//! present `head.centers`, `head.bias`, `head.gamma`. Values use shortest
//! round-trip formatting, so a write/read cycle is lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::{CenterLossParams, ClassifierParams, LossParams};
use crate::scoring::formats::{read_text, write_text};
use crate::trainer::{Checkpoint, TrainConfig};

pub const MAGIC: &str = "METRICLAB-CKPT";
pub const VERSION: u32 = 1;

fn push_tensor(out: &mut String, name: &str, shape: &[usize], values: impl Iterator<Item = f64>) {
    let _ = write!(out, "tensor {name}");
    for d in shape {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    let values: Vec<String> = values.map(|v| v.to_string()).collect();
    for row in values.chunks(shape.last().copied().unwrap_or(1).max(1)) {
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

pub fn render_checkpoint(checkpoint: &Checkpoint, config: &TrainConfig) -> Result<String> {
    let config_toml = toml::to_string(config).map_err(|e| Error::format("checkpoint config", e.to_string()))?;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "epoch {}", checkpoint.epoch);
    let _ = writeln!(out, "dev_eer {}", checkpoint.dev_eer);
    match checkpoint.train_loss {
        Some(l) => {
            let _ = writeln!(out, "train_loss {l}");
        }
        None => out.push_str("train_loss none\n"),
    }
    let _ = writeln!(out, "config {}", config_toml.lines().count());
    out.push_str(&config_toml);
    if !config_toml.ends_with('\n') {
        out.push('\n');
    }
    let enc = &checkpoint.encoder;
    let matrix = |out: &mut String, name: &str, m: &Array2<f64>| push_tensor(out, name, &[m.nrows(), m.ncols()], m.iter().copied());
    let vector = |out: &mut String, name: &str, v: &Array1<f64>| push_tensor(out, name, &[v.len()], v.iter().copied());
    matrix(&mut out, "encoder.w1", &enc.w1);
    vector(&mut out, "encoder.b1", &enc.b1);
    matrix(&mut out, "encoder.w2", &enc.w2);
    vector(&mut out, "encoder.b2", &enc.b2);
    if let Some(c) = &checkpoint.heads.classifier {
        matrix(&mut out, "head.centers", &c.centers);
        if let Some(b) = &c.bias {
            vector(&mut out, "head.bias", b);
        }
    }
    if let Some(c) = &checkpoint.heads.center {
        matrix(&mut out, "head.gamma", &c.gamma);
    }
    out.push_str("end\n");
    Ok(out)
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint, config: &TrainConfig) -> Result<()> {
    write_text(path, &render_checkpoint(checkpoint, config)?)
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let (i, l) = self
            .iter
            .next()
            .ok_or_else(|| Error::format("checkpoint", "unexpected end of file"))?;
        self.line = i + 1;
        Ok(l)
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::format("checkpoint", format!("line {}: {msg}", self.line))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&self, s: &str, what: &str) -> Result<T> {
        s.trim().parse().map_err(|_| self.err(format!("bad {what} '{s}'")))
    }
}

pub fn parse_checkpoint(text: &str) -> Result<(Checkpoint, TrainConfig)> {
    let mut lines = Lines {
        iter: text.lines().enumerate(),
        line: 0,
    };
    let header = lines.next()?;
    let version = header
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().parse::<u32>().ok())
        .ok_or_else(|| lines.err("missing checkpoint magic"))?;
    if version != VERSION {
        return Err(lines.err(format!("unsupported checkpoint version {version}")));
    }
    let epoch: usize = {
        let v = lines.field("epoch")?;
        lines.parse(v, "epoch")?
    };
    let dev_eer: f64 = {
        let v = lines.field("dev_eer")?;
        lines.parse(v, "dev_eer")?
    };
    let train_loss = match lines.field("train_loss")? {
        "none" => None,
        v => Some(lines.parse::<f64>(v, "train_loss")?),
    };
    let n_config: usize = {
        let v = lines.field("config")?;
        lines.parse(v, "config line count")?
    };
    let mut config_toml = String::new();
    for _ in 0..n_config {
        config_toml.push_str(lines.next()?);
        config_toml.push('\n');
    }
    let config: TrainConfig =
        toml::from_str(&config_toml).map_err(|e| Error::format("checkpoint config", e.to_string()))?;

    let mut tensors: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    loop {
        let line = lines.next()?;
        if line == "end" {
            break;
        }
        let mut head = line.split_whitespace();
        if head.next() != Some("tensor") {
            return Err(lines.err("expected 'tensor' or 'end'"));
        }
        let name = head.next().ok_or_else(|| lines.err("tensor without a name"))?.to_string();
        let shape = head
            .map(|d| lines.parse::<usize>(d, "tensor dimension"))
            .collect::<Result<Vec<_>>>()?;
        if shape.is_empty() || shape.len() > 2 {
            return Err(lines.err(format!("tensor {name} must be 1-D or 2-D")));
        }
        let rows = if shape.len() == 2 { shape[0] } else { 1 };
        let row_len = *shape.last().expect("non-empty shape");
        let mut values = Vec::with_capacity(rows * row_len);
        for _ in 0..rows {
            let row = lines
                .next()?
                .split_whitespace()
                .map(|v| lines.parse::<f64>(v, "tensor value"))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != row_len {
                return Err(lines.err(format!("tensor {name}: expected {row_len} values, got {}", row.len())));
            }
            values.extend(row);
        }
        let array = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("shape checked");
        if tensors.insert(name.clone(), array).is_some() {
            return Err(lines.err(format!("duplicate tensor {name}")));
        }
    }

    let mut take = |name: &str| tensors.remove(name);
    let matrix = |a: Option<ArrayD<f64>>, name: &str| -> Result<Option<Array2<f64>>> {
        a.map(|a| a.into_dimensionality().map_err(|_| Error::format("checkpoint", format!("{name} must be 2-D"))))
            .transpose()
    };
    let vector = |a: Option<ArrayD<f64>>, name: &str| -> Result<Option<Array1<f64>>> {
        a.map(|a| a.into_dimensionality().map_err(|_| Error::format("checkpoint", format!("{name} must be 1-D"))))
            .transpose()
    };
    let required = |name: &str| Error::format("checkpoint", format!("missing tensor {name}"));
    let w1 = matrix(take("encoder.w1"), "encoder.w1")?.ok_or_else(|| required("encoder.w1"))?;
    let b1 = vector(take("encoder.b1"), "encoder.b1")?.ok_or_else(|| required("encoder.b1"))?;
    let w2 = matrix(take("encoder.w2"), "encoder.w2")?.ok_or_else(|| required("encoder.w2"))?;
    let b2 = vector(take("encoder.b2"), "encoder.b2")?.ok_or_else(|| required("encoder.b2"))?;
    let encoder = EncoderParams::from_weights(w1, b1, w2, b2, config.encoder.activation)?;
    let centers = matrix(take("head.centers"), "head.centers")?;
    let bias = vector(take("head.bias"), "head.bias")?;
    let gamma = matrix(take("head.gamma"), "head.gamma")?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::format("checkpoint", format!("unknown tensor {extra}")));
    }
    let classifier = match (centers, bias) {
        (Some(centers), bias) => Some(ClassifierParams { centers, bias }),
        (None, None) => None,
        (None, Some(_)) => return Err(Error::format("checkpoint", "head.bias without head.centers")),
    };
    let heads = LossParams {
        classifier,
        center: gamma.map(|gamma| CenterLossParams {
            gamma,
            lambda: config.loss.lambda,
            penalty: config.loss.center_penalty,
        }),
    };
    Ok((
        Checkpoint {
            epoch,
            encoder,
            heads,
            dev_eer,
            train_loss,
        },
        config,
    ))
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, TrainConfig)> {
    parse_checkpoint(&read_text(path)?).map_err(|e| e.context(path.display().to_string()))
}
