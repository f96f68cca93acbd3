//! File formats.
//!
//! * Configuration files (datasets, samples, likelihood queries): a header
//!   line `# n=<n> c=<c>` followed by one configuration per line as
//!   space-separated base-10 labels.
//! * Joint files: the same header followed by `c^n` whitespace-separated
//!   probabilities in row-major configuration order.
//! * Checkpoints: a little-endian binary header and the flat parameter vector.
//! * Run configs: flat `key = value` lines, `#` starts a comment.
//! * Reports: comma-separated text with a header row.
//!
//! Every writer goes through a temporary file in the destination directory
//! that is renamed into place once complete.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::{FieldKind, FieldParams, FieldSpec};
use crate::geometry::Dims;
use crate::integrate::{IntegratorConfig, Scheme};
use crate::likelihood::IsEstimate;
use crate::meta_simplex::{dense_size, Configuration, JointDistribution};

/// Writes `path` through a sibling temporary file and an atomic rename.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses `# n=<n> c=<c>`.
pub fn parse_header(line: &str) -> Option<Dims> {
    let rest = line.trim().strip_prefix('#')?;
    let mut n = None;
    let mut c = None;
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=')?;
        let v: usize = v.parse().ok()?;
        match k {
            "n" => n = Some(v),
            "c" => c = Some(v),
            _ => return None,
        }
    }
    Dims::new(n?, c?).ok()
}

pub fn format_header(dims: Dims) -> String {
    format!("# n={} c={}", dims.n, dims.c)
}

/// Space-separated labels.
pub fn format_labels(beta: &Configuration) -> String {
    beta.to_string()
}

/// Configurations with their declared dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub configurations: Vec<Configuration>,
}

fn parse_configuration(path: &Path, lineno: usize, line: &str, dims: Dims) -> Result<Configuration> {
    let labels = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| parse_err(path, lineno, format!("bad label '{tok}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let beta = Configuration::new(labels);
    beta.check(dims).map_err(|e| parse_err(path, lineno, e.to_string()))?;
    Ok(beta)
}

fn parse_configurations(path: &Path, text: &str, expected: Option<Dims>) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let dims = loop {
        match lines.next() {
            None => {
                return match expected {
                    Some(dims) => Ok(Dataset {
                        dims,
                        configurations: Vec::new(),
                    }),
                    None => Err(parse_err(path, 1, "missing header '# n=<n> c=<c>'")),
                }
            }
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => {
                break parse_header(l)
                    .ok_or_else(|| parse_err(path, i + 1, format!("expected header '# n=<n> c=<c>', got '{l}'")))?
            }
        }
    };
    if let Some(want) = expected {
        if want != dims {
            return Err(Error::Dims(format!(
                "{} declares {dims}, expected {want}",
                path.display()
            )));
        }
    }
    let mut configurations = Vec::new();
    for (i, line) in lines {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        configurations.push(parse_configuration(path, i + 1, t, dims)?);
    }
    Ok(Dataset { dims, configurations })
}

/// Reads a configuration file; the header is mandatory.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_configurations(path, &read_text(path)?, None)
}

/// Reads a configuration file whose dimensions are already known. A file
/// without any content is an empty list; a header must match `dims`.
pub fn read_configurations(path: &Path, dims: Dims) -> Result<Vec<Configuration>> {
    Ok(parse_configurations(path, &read_text(path)?, Some(dims))?.configurations)
}

pub fn write_dataset(path: &Path, dims: Dims, configurations: &[Configuration]) -> Result<()> {
    for beta in configurations {
        beta.check(dims)?;
    }
    write_atomic(path, |w| {
        writeln!(w, "{}", format_header(dims))?;
        for beta in configurations {
            writeln!(w, "{beta}")?;
        }
        Ok(())
    })
}

pub fn read_joint(path: &Path) -> Result<JointDistribution> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().skip_while(|(_, l)| l.trim().is_empty());
    let (hi, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header '# n=<n> c=<c>'"))?;
    let dims = parse_header(header)
        .ok_or_else(|| parse_err(path, hi + 1, format!("expected header, got '{header}'")))?;
    let size = dense_size(dims)?;
    let mut probs = Vec::with_capacity(size);
    for (i, line) in lines {
        let t = line.trim();
        if t.starts_with('#') {
            continue;
        }
        for tok in t.split_whitespace() {
            let p: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("bad probability '{tok}'")))?;
            probs.push(p);
            if probs.len() > size {
                return Err(parse_err(path, i + 1, format!("more than {size} probabilities")));
            }
        }
    }
    if probs.len() != size {
        return Err(Error::Shape(format!(
            "{}: {} probabilities for {dims} (need {size})",
            path.display(),
            probs.len()
        )));
    }
    JointDistribution::new(dims, probs)
}

pub fn write_joint(path: &Path, p: &JointDistribution) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{}", format_header(p.dims()))?;
        for x in p.probs() {
            writeln!(w, "{x}")?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Checkpoints.

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"EGFLOWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained field together with the settings needed to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams,
    pub eps: f64,
    pub integrator: IntegratorConfig,
}

/// Byte layout (all little-endian):
///
/// ```text
/// magic    8 bytes "EGFLOWCK"
/// version  u32
/// variant  u8     0 linear, 1 mlp
/// bias     u8     linear only, 1 if a bias block follows each weight block
/// n, c     u32, u32
/// layers   u32    number of layer widths L, then L x u32 widths
/// eps      f64
/// scheme   u8     0 rk4, 1 euler
/// steps    u32
/// count    u64    number of parameters, then count x f64
/// ```
///
/// Parameters are stored layer by layer: the `out x in` weight in row-major
/// order followed by the bias, if any.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let spec = ck.params.spec();
    let mut out = Vec::with_capacity(64 + 8 * ck.params.num_params());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let (variant, bias) = match spec.kind {
        FieldKind::Linear { bias } => (0u8, bias as u8),
        FieldKind::Mlp { .. } => (1u8, 1u8),
    };
    out.push(variant);
    out.push(bias);
    out.extend_from_slice(&(spec.dims.n as u32).to_le_bytes());
    out.extend_from_slice(&(spec.dims.c as u32).to_le_bytes());
    let sizes = spec.layer_sizes();
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in &sizes {
        out.extend_from_slice(&(*s as u32).to_le_bytes());
    }
    out.extend_from_slice(&ck.eps.to_le_bytes());
    out.push(match ck.integrator.scheme {
        Scheme::Rk4 => 0,
        Scheme::Euler => 1,
    });
    out.extend_from_slice(&(ck.integrator.steps as u32).to_le_bytes());
    out.extend_from_slice(&(ck.params.num_params() as u64).to_le_bytes());
    for v in ck.params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(k)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let variant = cur.u8()?;
    let bias = cur.u8()?;
    let n = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let dims = Dims::new(n, c)?;
    let num_layers = cur.u32()? as usize;
    if !(2..=1 << 16).contains(&num_layers) {
        return Err(Error::Checkpoint(format!("implausible layer count {num_layers}")));
    }
    let sizes = (0..num_layers)
        .map(|_| cur.u32().map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let kind = match (variant, bias) {
        (0, b @ (0 | 1)) => FieldKind::Linear { bias: b == 1 },
        (1, 1) => FieldKind::Mlp {
            hidden: sizes[1..sizes.len() - 1].to_vec(),
        },
        _ => return Err(Error::Checkpoint(format!("unknown variant {variant}/{bias}"))),
    };
    let spec = FieldSpec { dims, kind };
    if spec.layer_sizes() != sizes {
        return Err(Error::Checkpoint(format!(
            "layer sizes {sizes:?} inconsistent with {dims}"
        )));
    }
    let eps = cur.f64()?;
    let scheme = match cur.u8()? {
        0 => Scheme::Rk4,
        1 => Scheme::Euler,
        s => return Err(Error::Checkpoint(format!("unknown integration scheme {s}"))),
    };
    let steps = cur.u32()? as usize;
    let count = cur.u64()?;
    let remaining = (bytes.len() - cur.pos) as u64;
    if count.checked_mul(8) != Some(remaining) {
        return Err(Error::Checkpoint(format!(
            "{count} parameters declared, {remaining} bytes present"
        )));
    }
    let values = (0..count).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    let params = FieldParams::from_values(spec, values)?;
    let integrator = IntegratorConfig { scheme, steps };
    integrator.validate()?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Checkpoint(format!("eps {eps} outside (0, 1)")));
    }
    Ok(Checkpoint {
        params,
        eps,
        integrator,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

// ---------------------------------------------------------------------------
// Run configs.

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_key_values(path: &Path, text: &str) -> Result<Vec<KeyValue>> {
    let mut out: Vec<KeyValue> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, i + 1, format!("expected key = value, got '{line}'")))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(parse_err(path, i + 1, "empty key"));
        }
        if out.iter().any(|kv| kv.key == key) {
            return Err(parse_err(path, i + 1, format!("duplicate key '{key}'")));
        }
        out.push(KeyValue {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<KeyValue>> {
    parse_key_values(path, &read_text(path)?)
}

// ---------------------------------------------------------------------------
// Reports.

pub fn write_loss_trace(path: &Path, losses: &[f64]) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "step,loss")?;
        for (k, l) in losses.iter().enumerate() {
            writeln!(w, "{k},{l}")?;
        }
        Ok(())
    })
}

/// Counts per configuration for every configuration of the dense joint.
pub fn write_histogram(path: &Path, dims: Dims, samples: &[Configuration]) -> Result<()> {
    let size = dense_size(dims)?;
    let mut counts = vec![0u64; size];
    for beta in samples {
        beta.check(dims)?;
        counts[beta.to_index(dims.c)] += 1;
    }
    let total = samples.len().max(1) as f64;
    write_atomic(path, |w| {
        writeln!(w, "index,configuration,count,frequency")?;
        for (idx, &k) in counts.iter().enumerate() {
            let beta = Configuration::from_index(idx, dims);
            writeln!(w, "{idx},{beta},{k},{}", k as f64 / total)?;
        }
        Ok(())
    })
}

/// One row per configuration; the standard error column is empty when it is
/// undefined.
pub fn write_likelihood_report(path: &Path, rows: &[(Configuration, IsEstimate)]) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "configuration,bound_nats,bound_bits_per_dim,n_samples,std_error")?;
        for (beta, est) in rows {
            let se = est.std_error.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{beta},{},{},{},{se}",
                est.bound, est.bits_per_dim, est.n_samples
            )?;
        }
        Ok(())
    })
}
