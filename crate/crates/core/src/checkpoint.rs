//! Parameter checkpoints.
//!
//! Layout: magic "TFAW", format version (u32 LE), header byte length
//! (u32 LE), a UTF-8 header with one `name dims offset` line per parameter in
//! store order (dims like `4x3`, offsets into the payload, contiguous), then
//! every value as a little-endian f64. Round trips are byte-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParameterStore;
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"TFAW";
const VERSION: u32 = 1;
const PAYLOAD_HEADER_AT: u64 = 12;

pub fn to_bytes<T: Real>(store: &ParameterStore<T>) -> Vec<u8> {
    let mut header = String::new();
    let mut offset = 0u64;
    for p in store.iter() {
        let dims = if p.value.rank() == 0 {
            "scalar".to_string()
        } else {
            p.value
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        header.push_str(&format!("{} {} {}\n", p.name, dims, offset));
        offset += 8 * p.value.numel() as u64;
    }
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

fn bad(offset: u64, reason: impl Into<String>) -> Error {
    Error::CheckpointFormat {
        offset,
        reason: reason.into(),
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<ParameterStore<T>> {
    if bytes.len() < 12 {
        return Err(bad(0, format!("file is {} bytes, header needs 12", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(0, format!("bad magic {:02x?}, expected \"TFAW\"", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_at = 12 + header_len;
    if payload_at > bytes.len() {
        return Err(bad(
            8,
            format!(
                "header length {header_len} exceeds the {} remaining bytes",
                bytes.len() - 12
            ),
        ));
    }
    let header = std::str::from_utf8(&bytes[12..payload_at])
        .map_err(|e| bad(PAYLOAD_HEADER_AT + e.valid_up_to() as u64, "header is not UTF-8"))?;
    let payload = &bytes[payload_at..];

    let mut store = ParameterStore::new();
    let mut expected_offset = 0u64;
    let mut line_at = PAYLOAD_HEADER_AT;
    for line in header.lines() {
        let this_line_at = line_at;
        line_at += line.len() as u64 + 1;
        let fields: Vec<&str> = line.split(' ').collect();
        let &[name, dims, offset] = &fields[..] else {
            return Err(bad(this_line_at, format!("malformed header line `{line}`")));
        };
        let shape: Vec<usize> = if dims == "scalar" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| bad(this_line_at, format!("bad dims `{dims}`")))
                })
                .collect::<Result<_>>()?
        };
        let offset: u64 = offset
            .parse()
            .map_err(|_| bad(this_line_at, format!("bad offset in `{line}`")))?;
        if offset != expected_offset {
            return Err(bad(
                this_line_at,
                format!("offset {offset} for `{name}`, expected {expected_offset}"),
            ));
        }
        let numel: usize = shape.iter().product();
        let end = offset as usize + 8 * numel;
        if end > payload.len() {
            return Err(bad(
                payload_at as u64 + offset,
                format!(
                    "payload for `{name}` ends at byte {end} but only {} are present",
                    payload.len()
                ),
            ));
        }
        let data: Vec<T> = payload[offset as usize..end]
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store
            .register(name, shape, data)
            .map_err(|e| bad(this_line_at, e.to_string()))?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(bad(
            payload_at as u64 + expected_offset,
            format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset as usize
            ),
        ));
    }
    Ok(store)
}

pub fn save<T: Real>(store: &ParameterStore<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<ParameterStore<T>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn sample_store() -> ParameterStore<f64> {
        let mut store = ParameterStore::new();
        let mut rng = SplitMix64::new(77);
        store
            .register("a.weight", vec![3, 2], (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        store.register("a.bias", vec![3], vec![0.25, -0.5, 1.0 / 3.0]).unwrap();
        store
            .register("b", vec![2, 2, 2], (0..8).map(|_| rng.uniform(-9.0, 9.0)).collect())
            .unwrap();
        store
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let store = sample_store();
        let bytes = to_bytes(&store);
        let back = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(back.len(), store.len());
        for p in store.iter() {
            let q = back.get(&p.name).unwrap();
            assert_eq!(q.shape(), p.value.shape());
            for (x, y) in p.value.data().iter().zip(q.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("tfaw-checkpoint-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.tfaw");
        let store = sample_store();
        save(&store, &path).unwrap();
        let back = load::<f64>(&path).unwrap();
        assert_eq!(to_bytes(&back), to_bytes(&store));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_tampering_with_offsets() {
        let good = to_bytes(&sample_store());

        let mut magic = good.clone();
        magic[1] = b'X';
        match from_bytes::<f64>(&magic) {
            Err(Error::CheckpointFormat { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }

        let mut version = good.clone();
        version[4] = 9;
        match from_bytes::<f64>(&version) {
            Err(Error::CheckpointFormat { offset: 4, .. }) => {}
            other => panic!("{other:?}"),
        }

        let mut header_len = good.clone();
        header_len[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        match from_bytes::<f64>(&header_len) {
            Err(Error::CheckpointFormat { offset: 8, .. }) => {}
            other => panic!("{other:?}"),
        }

        let truncated = &good[..good.len() - 4];
        assert!(matches!(
            from_bytes::<f64>(truncated),
            Err(Error::CheckpointFormat { .. })
        ));

        let mut extended = good.clone();
        extended.extend_from_slice(&[0; 8]);
        assert!(matches!(
            from_bytes::<f64>(&extended),
            Err(Error::CheckpointFormat { .. })
        ));

        assert!(matches!(
            from_bytes::<f64>(b"TF"),
            Err(Error::CheckpointFormat { offset: 0, .. })
        ));
    }

    #[test]
    fn rejects_malformed_header_lines() {
        let store = sample_store();
        let bytes = to_bytes(&store);
        let header_len =
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();

        // corrupt the second line's dims and rebuild the file
        let mangled: String = header
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 1 {
                    let mut f: Vec<&str> = l.split(' ').collect();
                    f[1] = "3y3";
                    f.join(" ") + "\n"
                } else {
                    l.to_string() + "\n"
                }
            })
            .collect();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(mangled.len() as u32).to_le_bytes());
        out.extend_from_slice(mangled.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        let second_line_at = 12 + header.lines().next().unwrap().len() as u64 + 1;
        match from_bytes::<f64>(&out) {
            Err(Error::CheckpointFormat { offset, .. }) => assert_eq!(offset, second_line_at),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preserves_store_order() {
        let store = sample_store();
        let back = from_bytes::<f64>(&to_bytes(&store)).unwrap();
        let names: Vec<&str> = back.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, vec!["a.weight", "a.bias", "b"]);
    }
}
