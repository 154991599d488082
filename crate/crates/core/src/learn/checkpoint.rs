//! Checkpoint layout: a text header
//!
//! ```text
//! smoothlearn-checkpoint 1
//! <slice name> <dim0>x<dim1>...
//! ...
//! end
//! ```
//!
//! followed by every parameter as a little-endian `f64`, in slice order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::LearnError;
use crate::graph::ParameterStore;

pub const CHECKPOINT_MAGIC: &str = "smoothlearn-checkpoint 1";

pub fn write_checkpoint(store: &ParameterStore, path: &Path) -> Result<(), LearnError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = Vec::new();
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    for s in store.slices() {
        let shape: Vec<String> = s.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "{} {}", s.name, shape.join("x"))?;
    }
    writeln!(out, "end")?;
    for v in store.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterStore, LearnError> {
    let bad = |m: String| LearnError::Checkpoint(format!("{}: {m}", path.display()));
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(bad(format!("unexpected header {:?}", line.trim_end())));
    }
    let mut slices = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("missing end of header".into()));
        }
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        let (name, shape) = l
            .rsplit_once(' ')
            .ok_or_else(|| bad(format!("malformed slice line {l:?}")))?;
        let shape = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("shape of {name}: {e}")))?;
        slices.push((name.to_string(), shape));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let total: usize = slices
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if bytes.len() != 8 * total {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            8 * total,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut store = ParameterStore::new();
    let mut off = 0;
    for (name, shape) in slices {
        let n: usize = shape.iter().product();
        store.register(&name, &shape, &values[off..off + n])?;
        off += n;
    }
    Ok(store)
}
