use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::fewshot::Sample;
use crate::tensor::Tensor;

/// First token of a dataset file.
pub const FORMAT_TAG: &str = "M2ADX1";

/// Write the header line and `N·L` rows of `D` floats. Floats use the
/// shortest representation that parses back to the same bits.
pub fn write_dataset(ds: &Dataset, mut out: impl Write) -> Result<()> {
    let meta = &ds.meta;
    let labels: Vec<String> = ds.samples.iter().map(|s| s.label.to_string()).collect();
    let dims: Vec<String> = meta.modalities.iter().map(|(n, d)| format!("{n}:{d}")).collect();
    let io_err = |e| Error::io("<dataset>", e);
    writeln!(
        out,
        "{FORMAT_TAG} N={} L={} D={} labels={} dims={}",
        ds.samples.len(),
        meta.seq_len,
        meta.feature_dim(),
        labels.join(","),
        dims.join(",")
    )
    .map_err(io_err)?;
    let mut line = String::new();
    for s in &ds.samples {
        for t in 0..meta.seq_len {
            line.clear();
            for m in &s.modalities {
                for v in m.row(t) {
                    if !line.is_empty() {
                        line.push(' ');
                    }
                    line.push_str(&v.to_string());
                }
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Header {
    n: usize,
    seq_len: usize,
    d: usize,
    labels: Vec<u8>,
    dims: Vec<(String, usize)>,
}

fn parse_header(line: &str) -> Result<Header> {
    let mut tokens = line.split_whitespace();
    match tokens.next() {
        Some(FORMAT_TAG) => {}
        other => {
            return Err(Error::Format(format!(
                "expected format tag {FORMAT_TAG}, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let (mut n, mut seq_len, mut d, mut labels, mut dims) = (None, None, None, None, None);
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header field {tok:?}")))?;
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("header field {key} is not an integer: {v:?}")))
        };
        match key {
            "N" => n = Some(int(value)?),
            "L" => seq_len = Some(int(value)?),
            "D" => d = Some(int(value)?),
            "labels" => {
                let parsed = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|l| match l {
                            "0" => Ok(0u8),
                            "1" => Ok(1u8),
                            other => Err(Error::Format(format!("label {other:?} is not 0 or 1"))),
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                labels = Some(parsed);
            }
            "dims" => {
                let parsed = value
                    .split(',')
                    .map(|part| {
                        let (name, w) = part
                            .rsplit_once(':')
                            .ok_or_else(|| Error::Format(format!("malformed modality {part:?}")))?;
                        if name.is_empty() {
                            return Err(Error::Format(format!("malformed modality {part:?}")));
                        }
                        Ok((name.to_string(), int(w)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                dims = Some(parsed);
            }
            other => return Err(Error::Format(format!("unknown header field {other:?}"))),
        }
    }
    let missing = |f: &str| Error::Format(format!("header is missing {f}"));
    let header = Header {
        n: n.ok_or_else(|| missing("N"))?,
        seq_len: seq_len.ok_or_else(|| missing("L"))?,
        d: d.ok_or_else(|| missing("D"))?,
        labels: labels.ok_or_else(|| missing("labels"))?,
        dims: dims.ok_or_else(|| missing("dims"))?,
    };
    if header.labels.len() != header.n {
        return Err(Error::Format(format!(
            "header N={} but {} labels",
            header.n,
            header.labels.len()
        )));
    }
    let sum: usize = header.dims.iter().map(|(_, w)| w).sum();
    if sum != header.d {
        return Err(Error::Format(format!(
            "header D={} but modality dims sum to {sum}",
            header.d
        )));
    }
    if header.seq_len == 0 {
        return Err(Error::Format("header L must be positive".into()));
    }
    Ok(header)
}

/// Parse a dataset. When `expected` is given, the header's modality layout
/// must match it exactly.
pub fn read_dataset(input: impl Read, expected: Option<&[(String, usize)]>) -> Result<Dataset> {
    let mut lines = BufReader::new(input).lines();
    let io_err = |e| Error::io("<dataset>", e);
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))?
        .map_err(io_err)?;
    let header = parse_header(&first)?;
    if let Some(exp) = expected {
        let exp_d: usize = exp.iter().map(|(_, w)| w).sum();
        if exp_d != header.d {
            return Err(Error::Format(format!(
                "header D={} but configured modality dims sum to {exp_d}",
                header.d
            )));
        }
        if exp != header.dims.as_slice() {
            return Err(Error::Format(format!(
                "header modalities {:?} differ from configured {:?}",
                header.dims, exp
            )));
        }
    }

    let mut samples = Vec::with_capacity(header.n);
    let mut row = Vec::with_capacity(header.d);
    for (i, &label) in header.labels.iter().enumerate() {
        let mut cols: Vec<Vec<f64>> = header.dims.iter().map(|(_, w)| Vec::with_capacity(w * header.seq_len)).collect();
        for t in 0..header.seq_len {
            let line_no = 2 + i * header.seq_len + t;
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("file ends at line {line_no}, expected {} data rows", header.n * header.seq_len)))?
                .map_err(io_err)?;
            row.clear();
            for (c, tok) in line.split_whitespace().enumerate() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("line {line_no} column {c}: cannot parse {tok:?}")))?;
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "non-finite value at sample {i} timestep {t} (line {line_no}) column {c}"
                    )));
                }
                row.push(v);
            }
            if row.len() != header.d {
                return Err(Error::Format(format!(
                    "line {line_no} has {} values, expected D={}",
                    row.len(),
                    header.d
                )));
            }
            let mut offset = 0;
            for (dst, (_, w)) in cols.iter_mut().zip(&header.dims) {
                dst.extend_from_slice(&row[offset..offset + w]);
                offset += w;
            }
        }
        let modalities = cols
            .into_iter()
            .zip(&header.dims)
            .map(|(data, (_, w))| Tensor::matrix(header.seq_len, *w, data))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample { id: i, label, modalities });
    }
    if let Some(extra) = lines.next() {
        let extra = extra.map_err(io_err)?;
        if !extra.trim().is_empty() {
            return Err(Error::Format(format!(
                "unexpected data after {} rows",
                header.n * header.seq_len
            )));
        }
    }
    Dataset::new(header.dims, header.seq_len, samples)
}

pub fn load_dataset(path: &Path, expected: Option<&[(String, usize)]>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, expected)
}
