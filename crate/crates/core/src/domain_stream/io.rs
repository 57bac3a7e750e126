//! Text format for domain sequences.
//!
//! ```text
//! # sync-edg domain sequence v1
//! name=circle
//! feature_dim=2
//! num_classes=2
//! domains=30
//! t,label,x0,x1
//! 1,0,0.9012,0.1173
//! ...
//! ```
//!
//! Lines starting with `#` after the header are ignored. Records are grouped
//! by domain in timestamp order. Floats are written in shortest round-trip
//! form, so save/load is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Domain, DomainSequence, Sample};
use crate::error::{Error, Result};

const MAGIC: &str = "# sync-edg domain sequence v1";

pub fn write_sequence<W: Write>(seq: &DomainSequence, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "name={}", seq.name)?;
    writeln!(w, "feature_dim={}", seq.feature_dim)?;
    writeln!(w, "num_classes={}", seq.num_classes)?;
    writeln!(w, "domains={}", seq.len())?;
    let cols: Vec<String> = (0..seq.feature_dim).map(|j| format!("x{j}")).collect();
    writeln!(w, "t,label,{}", cols.join(","))?;
    for dom in &seq.domains {
        for s in &dom.samples {
            write!(w, "{},{}", dom.t, s.label)?;
            for v in &s.features {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_sequence(seq: &DomainSequence, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_sequence(seq, BufWriter::new(f))
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<DomainSequence> {
    read_sequence(File::open(path)?)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_sequence<R: Read>(r: R) -> Result<DomainSequence> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

    let mut next_line = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, l)) => Ok((n, l?)),
            None => Err(parse_err(0, format!("unexpected end of file, expected {what}"))),
        }
    };

    let (n, magic) = next_line("header")?;
    if magic.trim() != MAGIC {
        return Err(parse_err(n, format!("expected `{MAGIC}`")));
    }
    let mut header = |key: &str| -> Result<(usize, String)> {
        let (n, l) = next_line(key)?;
        match l.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok((n, v.trim().to_string())),
            _ => Err(parse_err(n, format!("expected `{key}=...`"))),
        }
    };
    let (_, name) = header("name")?;
    let number = |(n, v): (usize, String)| -> Result<usize> {
        v.parse().map_err(|_| parse_err(n, format!("`{v}` is not a non-negative integer")))
    };
    let feature_dim = number(header("feature_dim")?)?;
    let num_classes = number(header("num_classes")?)?;
    let (dn, dv) = header("domains")?;
    let n_domains = number((dn, dv))?;
    let (cn, columns) = next_line("column header")?;
    let expected_cols = 2 + feature_dim;
    if columns.split(',').count() != expected_cols {
        return Err(parse_err(cn, format!("column header must list {expected_cols} columns")));
    }

    let mut domains: Vec<Domain> = Vec::new();
    for (n, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != expected_cols {
            return Err(parse_err(
                n,
                format!("record has {} fields, expected {expected_cols}", fields.len()),
            ));
        }
        let t: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(n, format!("bad timestamp `{}`", fields[0])))?;
        let label: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(n, format!("bad label `{}`", fields[1])))?;
        if label >= num_classes {
            return Err(parse_err(n, format!("label {label} >= num_classes {num_classes}")));
        }
        let features = fields[2..]
            .iter()
            .map(|f| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(n, format!("bad feature value `{f}`")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(n, format!("non-finite feature value `{f}`")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        match domains.last_mut() {
            Some(d) if d.t == t => {}
            Some(d) if t == d.t + 1 => domains.push(Domain { t, samples: vec![] }),
            Some(d) => {
                return Err(parse_err(
                    n,
                    format!("timestamp {t} does not follow domain {} consecutively", d.t),
                ))
            }
            None if t >= 1 => domains.push(Domain { t, samples: vec![] }),
            None => return Err(parse_err(n, "timestamps start at 1")),
        }
        domains.last_mut().unwrap().samples.push(Sample {
            features,
            label,
            domain_index: t,
        });
    }
    if domains.len() != n_domains {
        return Err(parse_err(
            dn,
            format!("header declares {n_domains} domains, file has {}", domains.len()),
        ));
    }
    DomainSequence::new(name, feature_dim, num_classes, domains)
}
