//! Float raster container: one UTF-8 header line followed by a row-major
//! little-endian `f32` payload.
//!
//! ```text
//! MSDC-RASTER kind=heatmap rows=32 cols=32 [key=value ...]\n
//! <rows * cols * 4 bytes>
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};

const TAG: &str = "MSDC-RASTER";

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub kind: String,
    /// Extra header fields, in order.
    pub meta: Vec<(String, String)>,
    pub data: Array2<f32>,
}

impl Raster {
    pub fn new(kind: &str, data: Array2<f32>) -> Self {
        Raster {
            kind: kind.to_string(),
            meta: Vec::new(),
            data,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = self.data.dim();
        let mut header = format!("{TAG} kind={} rows={rows} cols={cols}", self.kind);
        for (k, v) in &self.meta {
            header.push_str(&format!(" {k}={v}"));
        }
        header.push('\n');
        let mut out = header.into_bytes();
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("raster", "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format("raster", "header is not UTF-8"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(TAG) {
            return Err(Error::format("raster", "bad tag"));
        }
        let (mut kind, mut rows, mut cols) = (None, None, None);
        let mut meta = Vec::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::format("raster", format!("bad field {f}")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "rows" => rows = v.parse::<usize>().ok(),
                "cols" => cols = v.parse::<usize>().ok(),
                _ => meta.push((k.to_string(), v.to_string())),
            }
        }
        let (kind, rows, cols) = match (kind, rows, cols) {
            (Some(k), Some(r), Some(c)) => (k, r, c),
            _ => return Err(Error::format("raster", "header needs kind, rows and cols")),
        };
        let payload = &bytes[nl + 1..];
        if payload.len() != rows * cols * 4 {
            return Err(Error::format(
                "raster",
                format!("payload is {} bytes, expected {}", payload.len(), rows * cols * 4),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Raster {
            kind,
            meta,
            data: Array2::from_shape_vec((rows, cols), data).expect("length checked"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
