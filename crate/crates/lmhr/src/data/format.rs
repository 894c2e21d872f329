//! On-disk dataset formats: the canonical binary container and a CSV
//! fallback for hand-made fixtures.
//!
//! Binary layout: 8-byte magic `LMHRDAT1`, u32-LE length of a UTF-8 JSON
//! header `{"T":..,"N":..,"C":..,"sample_rate_min":..,"channels":[..]}`,
//! then T*N*C little-endian f32 values in T-major, N-major, C order.

use crate::data::{ChannelRole, MtsTensor};
use crate::error::{LmhrError, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 8] = b"LMHRDAT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "C")]
    c: usize,
    sample_rate_min: u32,
    channels: Vec<ChannelRole>,
}

pub fn write_binary(x: &MtsTensor, path: &Path) -> Result<()> {
    let header = Header {
        t: x.t_len(),
        n: x.n_nodes(),
        c: x.n_channels(),
        sample_rate_min: x.sample_rate_minutes,
        channels: x.channels.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(DATASET_MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    let mut buf = Vec::with_capacity(x.values().len() * 4);
    for v in x.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

fn read_binary(bytes: &[u8]) -> Result<MtsTensor> {
    if bytes.len() < 12 {
        return Err(LmhrError::format(format!(
            "file truncated at byte offset {} (needs magic + header length)",
            bytes.len()
        )));
    }
    if &bytes[0..8] != DATASET_MAGIC {
        return Err(LmhrError::format("bad magic, not an LMHRDAT1 file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + hlen;
    if bytes.len() < header_end {
        return Err(LmhrError::format(format!(
            "header truncated at byte offset {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
    let expect = header
        .t
        .checked_mul(header.n)
        .and_then(|x| x.checked_mul(header.c))
        .ok_or_else(|| LmhrError::format("header dimensions overflow"))?;
    let payload = &bytes[header_end..];
    if payload.len() != expect * 4 {
        return Err(LmhrError::format(format!(
            "payload is {} bytes at offset {header_end}, expected {} for {}x{}x{} f32",
            payload.len(),
            expect * 4,
            header.t,
            header.n,
            header.c
        )));
    }
    let mut values = Vec::with_capacity(expect);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(LmhrError::format(format!(
                "non-finite value at byte offset {}",
                header_end + i * 4
            )));
        }
        values.push(v);
    }
    MtsTensor::new(
        values,
        header.t,
        header.n,
        header.c,
        header.sample_rate_min,
        header.channels,
    )
}

fn role_label(role: ChannelRole) -> &'static str {
    match role {
        ChannelRole::Value => "value",
        ChannelRole::TimeOfDay => "time_of_day",
        ChannelRole::DayOfWeek => "day_of_week",
    }
}

fn parse_role(s: &str) -> Result<ChannelRole> {
    match s {
        "value" => Ok(ChannelRole::Value),
        "time_of_day" => Ok(ChannelRole::TimeOfDay),
        "day_of_week" => Ok(ChannelRole::DayOfWeek),
        other => Err(LmhrError::format(format!("unknown channel role {other}"))),
    }
}

/// CSV fallback: one row per timestep, N*C columns, header `n{i}.{role}`.
pub fn write_csv(x: &MtsTensor, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let mut header = Vec::new();
    for n in 0..x.n_nodes() {
        for c in 0..x.n_channels() {
            header.push(format!("n{n}.{}", role_label(x.channels[c])));
        }
    }
    writeln!(f, "{}", header.join(","))?;
    for t in 0..x.t_len() {
        let row: Vec<String> = (0..x.n_nodes())
            .flat_map(|n| (0..x.n_channels()).map(move |c| (n, c)))
            .map(|(n, c)| format!("{}", x.at(t, n, c)))
            .collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn read_csv(text: &str, sample_rate_minutes: u32) -> Result<MtsTensor> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LmhrError::format("empty csv"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.is_empty() {
        return Err(LmhrError::format("csv header has no columns"));
    }
    // infer channel roles from the first node's columns
    let mut channels = Vec::new();
    for col in &cols {
        let (node, role) = col
            .split_once('.')
            .ok_or_else(|| LmhrError::format(format!("bad csv column name {col}")))?;
        if node == "n0" {
            channels.push(parse_role(role)?);
        }
    }
    let c = channels.len();
    if c == 0 || cols.len() % c != 0 {
        return Err(LmhrError::format(format!(
            "csv column count {} not divisible by {c} channels",
            cols.len()
        )));
    }
    let n = cols.len() / c;
    let mut values = Vec::new();
    let mut t = 0;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(LmhrError::format(format!(
                "csv row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        for field in fields {
            let v: f32 = field.trim().parse().map_err(|_| {
                LmhrError::format(format!("csv row {}: bad number {field}", lineno + 2))
            })?;
            values.push(v);
        }
        t += 1;
    }
    MtsTensor::new(values, t, n, c, sample_rate_minutes, channels)
}

/// Load a dataset from the binary container (by magic) or the CSV fallback
/// (by `.csv` extension). A single-value-channel dataset is augmented with
/// time-of-day and day-of-week channels.
pub fn load_dataset(path: &Path) -> Result<MtsTensor> {
    load_dataset_with_rate(path, 5)
}

pub fn load_dataset_with_rate(path: &Path, csv_sample_rate_min: u32) -> Result<MtsTensor> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let raw = if bytes.len() >= 8 && &bytes[0..8] == DATASET_MAGIC {
        read_binary(&bytes)?
    } else if path.extension().map(|e| e == "csv").unwrap_or(false) {
        let text = String::from_utf8(bytes)
            .map_err(|_| LmhrError::format("csv file is not valid UTF-8"))?;
        read_csv(&text, csv_sample_rate_min)?
    } else {
        return Err(LmhrError::format(
            "unrecognized dataset file (expected LMHRDAT1 magic or .csv)",
        ));
    };
    if raw.n_channels() == 1 {
        raw.augment_time_channels()
    } else {
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ChannelRole;

    fn sample(t: usize, n: usize) -> MtsTensor {
        let values: Vec<f32> = (0..t * n).map(|i| (i as f32 * 0.37).sin()).collect();
        MtsTensor::new(values, t, n, 1, 5, vec![ChannelRole::Value]).unwrap()
    }

    #[test]
    fn binary_roundtrip_with_augmentation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.lmhr");
        let x = sample(100, 3);
        write_binary(&x, &path).unwrap();
        let y = load_dataset(&path).unwrap();
        assert_eq!((y.t_len(), y.n_nodes(), y.n_channels()), (100, 3, 3));
        for t in 0..100 {
            for n in 0..3 {
                assert_eq!(y.at(t, n, 0), x.at(t, n, 0));
            }
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.lmhr");
        let x = sample(10, 2);
        write_binary(&x, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("offset"), "{err}");
    }

    #[test]
    fn pems04_shaped_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pems04_shape.lmhr");
        let values = vec![0.5f32; 16992 * 307];
        let x = MtsTensor::new(values, 16992, 307, 1, 5, vec![ChannelRole::Value]).unwrap();
        write_binary(&x, &path).unwrap();
        let y = load_dataset(&path).unwrap();
        assert_eq!((y.t_len(), y.n_nodes()), (16992, 307));
        assert_eq!(y.sample_rate_minutes, 5);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let x = sample(40, 2);
        write_csv(&x, &path).unwrap();
        let y = load_dataset(&path).unwrap();
        assert_eq!((y.t_len(), y.n_nodes(), y.n_channels()), (40, 2, 3));
        for t in 0..40 {
            assert!((y.at(t, 1, 0) - x.at(t, 1, 0)).abs() < 1e-6);
        }
    }
}
