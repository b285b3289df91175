//! Parameter checkpoint files.
//!
//! ```text
//! DPCKPT 1
//! meta <key> <value to end of line>
//! param <name> f64 <d0>x<d1>x...
//! end
//! <raw little-endian payloads, manifest order>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "DPCKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}").unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {}", v.replace('\n', " ")).unwrap();
        }
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            writeln!(out, "param {} f64 {}", e.name, dims.join("x")).unwrap();
        }
        writeln!(out, "end").unwrap();
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(path: &Path, reader: impl Read) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            let n = r.read_line(line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::format(path, "unexpected end of manifest"));
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let mut ckpt = Checkpoint::default();
        let mut shapes = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = l.strip_prefix("param ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 || parts[1] != "f64" {
                    return Err(Error::format(path, format!("bad param line `{l}`")));
                }
                let shape = parts[2]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::format(path, format!("bad shape in `{l}`")))?;
                shapes.push((parts[0].to_string(), shape));
            } else {
                return Err(Error::format(path, format!("unknown manifest line `{l}`")));
            }
        }
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(path, format!("truncated payload for {name}")))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.entries.push(CheckpointEntry { name, shape, data });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_reader(path, f)
}
