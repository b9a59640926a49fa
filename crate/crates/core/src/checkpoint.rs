//! Versioned checkpoint container: a short text header followed by named
//! little-endian `f64` matrices.
//!
//! ```text
//! VGCLCKPT
//! version=1
//! dim=64
//! users=943
//! items=1682
//! layers=2
//! layer0=false
//! variant=vgcl
//! matrix embeddings 2625 64
//! matrix weight 64 64
//! matrix bias 1 64
//! data
//! <raw values, in the order listed>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

const MAGIC: &str = "VGCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub n_users: usize,
    pub n_items: usize,
    pub layers: usize,
    /// Whether the readout averages in the raw embeddings.
    pub include_layer0: bool,
    pub variant: Option<String>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn write(&self, out: &mut impl Write) -> std::io::Result<()> {
        let p = &self.params;
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "version={VERSION}")?;
        writeln!(out, "dim={}", p.dim())?;
        writeln!(out, "users={}", self.n_users)?;
        writeln!(out, "items={}", self.n_items)?;
        writeln!(out, "layers={}", self.layers)?;
        writeln!(out, "layer0={}", self.include_layer0)?;
        if let Some(v) = &self.variant {
            writeln!(out, "variant={v}")?;
        }
        let bias = DenseMatrix::new(1, p.bias.len(), p.bias.clone()).expect("bias is a row");
        let matrices = [("embeddings", &p.embeddings), ("weight", &p.weight), ("bias", &bias)];
        for (name, m) in matrices {
            writeln!(out, "matrix {name} {} {}", m.rows(), m.cols())?;
        }
        writeln!(out, "data")?;
        for (_, m) in matrices {
            let mut buf = Vec::with_capacity(m.as_slice().len() * 8);
            for v in m.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut header = Vec::new();
        loop {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
            if n == 0 {
                return Err(Error::Checkpoint("missing data marker".into()));
            }
            let line = line.trim_end().to_string();
            if line == "data" {
                break;
            }
            header.push(line);
        }
        if header.first().map(String::as_str) != Some(MAGIC) {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let field = |key: &str| -> Result<usize> {
            let prefix = format!("{key}=");
            header
                .iter()
                .find_map(|l| l.strip_prefix(&prefix))
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad {key}")))
        };
        let version = field("version")?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let (dim, n_users, n_items, layers) = (field("dim")?, field("users")?, field("items")?, field("layers")?);
        let text = |key: &str| header.iter().find_map(|l| l.strip_prefix(key)?.strip_prefix('='));
        let include_layer0 = match text("layer0") {
            None | Some("false") => false,
            Some("true") => true,
            Some(other) => return Err(Error::Checkpoint(format!("bad layer0 `{other}`"))),
        };
        let variant = text("variant").map(str::to_string);

        let mut matrices = Vec::new();
        for line in header.iter().filter(|l| l.starts_with("matrix ")) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [_, name, rows, cols] = parts[..] else {
                return Err(Error::Checkpoint(format!("bad matrix line `{line}`")));
            };
            let rows: usize = rows.parse().map_err(|_| Error::Checkpoint(format!("bad rows in `{line}`")))?;
            let cols: usize = cols.parse().map_err(|_| Error::Checkpoint(format!("bad cols in `{line}`")))?;
            let mut bytes = vec![0u8; rows * cols * 8];
            reader
                .read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            matrices.push((name.to_string(), DenseMatrix::new(rows, cols, values)?));
        }
        let mut take = |name: &str| -> Result<DenseMatrix> {
            let k = matrices
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing matrix {name}")))?;
            Ok(matrices.swap_remove(k).1)
        };
        let embeddings = take("embeddings")?;
        let weight = take("weight")?;
        let bias = take("bias")?;
        if embeddings.shape() != (n_users + n_items, dim) {
            return Err(Error::Checkpoint("embeddings do not match header".into()));
        }
        let params = ModelParams::new(embeddings, weight, bias.into_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            n_users,
            n_items,
            layers,
            include_layer0,
            variant,
            params,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }
}
