//! Binary parameter table.
//!
//! Layout:
//!
//! ```text
//! u8                    format version (1)
//! "instate-checkpoint\n"
//! "config <k=v> ...\n"  flat model configuration, space separated
//! "param <name> <rows> <cols>\n"   one line per parameter, in store order
//! "end\n"
//! f64 little-endian     every parameter's values, row-major, in header order
//! ```

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT_VERSION: u8 = 1;
const MAGIC: &str = "instate-checkpoint";

/// Decoded checkpoint: configuration pairs plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: Vec<(String, String)>) -> Self {
        Self {
            config,
            params: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Writes values into a store that already has the same layout.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&[FORMAT_VERSION])?;
        writeln!(w, "{MAGIC}")?;
        let cfg: Vec<String> = self.config.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(w, "config {}", cfg.join(" "))?;
        for (name, t) in &self.params {
            writeln!(w, "param {name} {} {}", t.rows(), t.cols())?;
        }
        writeln!(w, "end")?;
        for (_, t) in &self.params {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                version[0]
            )));
        }
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(Error::Format("missing checkpoint magic".into()));
        }
        let cfg_line = next_line(&mut r)?;
        let cfg_body = cfg_line
            .strip_prefix("config")
            .ok_or_else(|| Error::Format("missing config line".into()))?;
        let mut config = Vec::new();
        for pair in cfg_body.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config entry {pair}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let mut shapes = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let parts: Vec<&str> = l.split(' ').collect();
            match parts.as_slice() {
                ["param", name, rows, cols] => {
                    let rows: usize = rows
                        .parse()
                        .map_err(|_| Error::Format(format!("bad row count in {l}")))?;
                    let cols: usize = cols
                        .parse()
                        .map_err(|_| Error::Format(format!("bad column count in {l}")))?;
                    shapes.push((name.to_string(), rows, cols));
                }
                _ => return Err(Error::Format(format!("bad header line {l}"))),
            }
        }
        let mut params = Vec::with_capacity(shapes.len());
        let mut bytes = [0u8; 8];
        for (name, rows, cols) in shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut bytes)
                    .map_err(|_| Error::Format(format!("truncated data for {name}")))?;
                data.push(f64::from_le_bytes(bytes));
            }
            params.push((name, Tensor::new(rows, cols, data)?));
        }
        Ok(Self { config, params })
    }
}
