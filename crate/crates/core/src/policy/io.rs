//! Plain-text checkpoint format.
//!
//! ```text
//! overlay-rl-policy 1
//! config {"variant":"convolutional",...}
//! shape <strategies> <asset_lags> <context_rows> <context_lags>
//! layer <name> <offset> <len>      (one line per slot)
//! values <n>
//! <value>                          (one per line, shortest round-trip form)
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{InputShape, LayerSlot, NetworkConfig, Policy, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &str = "overlay-rl-policy";
const VERSION: u32 = 1;

pub fn save_policy(path: impl AsRef<Path>, policy: &Policy, params: &PolicyParams) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_policy(&mut w, policy, params)?;
    w.flush()?;
    Ok(())
}

pub fn write_policy<W: Write>(w: &mut W, policy: &Policy, params: &PolicyParams) -> Result<()> {
    if params.layout() != policy.layout() {
        return Err(Error::Validation("parameters do not match the policy layout".into()));
    }
    writeln!(w, "{MAGIC} {VERSION}")?;
    let cfg = serde_json::to_string(policy.config()).expect("config serializes");
    writeln!(w, "config {cfg}")?;
    let s = policy.shape();
    writeln!(
        w,
        "shape {} {} {} {}",
        s.strategies, s.asset_lags, s.context_rows, s.context_lags
    )?;
    for slot in policy.layout().slots() {
        writeln!(w, "layer {} {} {}", slot.name, slot.offset, slot.len)?;
    }
    writeln!(w, "values {}", params.values.len())?;
    for v in &params.values {
        writeln!(w, "{v:e}")?;
    }
    Ok(())
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<(Policy, PolicyParams)> {
    read_policy(std::fs::File::open(path)?)
}

pub fn read_policy<R: Read>(r: R) -> Result<(Policy, PolicyParams)> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            }),
            None => Err(Error::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {what}"),
            }),
        }
    };
    let bad = |line: usize, msg: String| Error::Parse { line, msg };

    let (ln, header) = next("header")?;
    if header != format!("{MAGIC} {VERSION}") {
        return Err(bad(ln, format!("unsupported header `{header}`")));
    }
    let (ln, cfg_line) = next("config")?;
    let cfg: NetworkConfig = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| bad(ln, "expected `config`".into()))
        .and_then(|j| serde_json::from_str(j).map_err(|e| bad(ln, e.to_string())))?;
    let (ln, shape_line) = next("shape")?;
    let dims: Vec<usize> = shape_line
        .strip_prefix("shape ")
        .ok_or_else(|| bad(ln, "expected `shape`".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(ln, format!("bad dimension `{t}`"))))
        .collect::<Result<_>>()?;
    if dims.len() != 4 {
        return Err(bad(ln, "shape needs four dimensions".into()));
    }
    let shape = InputShape {
        strategies: dims[0],
        asset_lags: dims[1],
        context_rows: dims[2],
        context_lags: dims[3],
    };
    let policy = Policy::new(cfg, shape)?;

    let mut slots = Vec::new();
    let (mut ln, mut line) = next("layer or values")?;
    while let Some(rest) = line.strip_prefix("layer ") {
        let parts: Vec<&str> = rest.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad(ln, "layer needs name, offset, len".into()));
        }
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad(ln, format!("bad integer `{t}`")));
        slots.push(LayerSlot {
            name: parts[0].to_string(),
            offset: num(parts[1])?,
            len: num(parts[2])?,
        });
        (ln, line) = next("layer or values")?;
    }
    if slots.as_slice() != policy.layout().slots() {
        return Err(bad(ln, "layer table does not match the network built from config".into()));
    }
    let n: usize = line
        .strip_prefix("values ")
        .and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| bad(ln, "expected `values <n>`".into()))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, v) = next("value")?;
        values.push(
            v.trim()
                .parse::<f64>()
                .map_err(|_| bad(ln, format!("bad value `{v}`")))?,
        );
    }
    let params = PolicyParams::new(values, policy.layout().clone())?;
    Ok((policy, params))
}
