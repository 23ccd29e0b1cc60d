//! Named parameter collections and the FDNM1 checkpoint container.
//!
//! A checkpoint file is `"FDNM1\n"`, then one `name dim0 dim1 ...\n` header
//! line per entry, a blank line, and the little-endian 32-bit float payloads
//! in header order. The same container carries learnable parameters,
//! normalization statistics, optimizer velocity, and scalar metadata — anything
//! with a name, a shape and numbers.

use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"FDNM1\n";

/// One named array inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Round to the nearest 32-bit float, the precision a checkpoint stores.
pub fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for r in records {
        debug_assert!(
            !r.name.contains([' ', '\n']),
            "record names must not contain spaces or newlines"
        );
        buf.extend_from_slice(r.name.as_bytes());
        for d in &r.shape {
            buf.extend_from_slice(format!(" {d}").as_bytes());
        }
        buf.push(b'\n');
    }
    buf.push(b'\n');
    for r in records {
        for v in &r.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if !bytes.starts_with(MAGIC) {
        return Err(Error::Checkpoint(format!(
            "{}: missing FDNM1 magic",
            path.display()
        )));
    }
    let mut pos = MAGIC.len();
    let mut headers: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .map(|o| pos + o)
            .ok_or_else(|| Error::Checkpoint(format!("{}: unterminated header", path.display())))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 header", path.display())))?;
        pos = end + 1;
        if line.is_empty() {
            break;
        }
        let mut fields = line.split(' ');
        let name = fields.next().unwrap().to_string();
        let mut shape = Vec::new();
        for f in fields {
            let d: usize = f
                .parse()
                .map_err(|_| Error::Checkpoint(format!("{}: bad extent {f:?}", path.display())))?;
            if d == 0 {
                return Err(Error::Checkpoint(format!(
                    "{}: zero extent in {name}",
                    path.display()
                )));
            }
            shape.push(d);
        }
        headers.push((name, shape));
    }
    let mut records = Vec::with_capacity(headers.len());
    for (name, shape) in headers {
        let count: usize = shape.iter().product();
        let need = count * 4;
        if pos + need > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated payload for {name}",
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for k in 0..count {
            let off = pos + k * 4;
            let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
            data.push(v as f64);
        }
        pos += need;
        records.push(Record { name, shape, data });
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok(records)
}

/// Ordered collection of learnable tensors. Iteration follows insertion
/// order, which fixes checkpoint layout and update order.
#[derive(Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        assert!(t.requires_grad(), "parameters must require gradients");
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replace an existing entry, keeping its position.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                *slot = t;
                Ok(())
            }
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.entries.values() {
            t.zero_grad();
        }
    }

    /// Round every value to checkpoint precision. Training state is snapped
    /// whenever a checkpoint is written so that resuming from the file
    /// continues from exactly the in-memory values.
    pub fn snap_to_f32(&mut self) {
        let names = self.names();
        for name in names {
            let t = &self.entries[&name];
            let data: Vec<f64> = t.data().iter().map(|v| snap_f32(*v)).collect();
            let snapped = Tensor::param(t.shape().to_vec(), data);
            self.entries.insert(name, snapped);
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.entries
            .iter()
            .map(|(name, t)| Record {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Load values into matching entries; shapes must agree and every store
    /// entry must be present in `records`.
    pub fn load_records(&mut self, records: &IndexMap<String, Record>) -> Result<()> {
        let names = self.names();
        for name in names {
            let current = &self.entries[&name];
            let r = records
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
            if r.shape != current.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    r.shape,
                    current.shape()
                )));
            }
            self.entries
                .insert(name, Tensor::param(r.shape.clone(), r.data.clone()));
        }
        Ok(())
    }
}

pub fn records_by_name(records: Vec<Record>) -> IndexMap<String, Record> {
    records.into_iter().map(|r| (r.name.clone(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn insertion_order_is_stable() {
        let mut s = ParamStore::new();
        for name in ["zeta", "alpha", "mid"] {
            s.insert(name, Tensor::param(vec![1], vec![0.0])).unwrap();
        }
        assert_eq!(s.names(), vec!["zeta", "alpha", "mid"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::param(vec![1], vec![0.0])).unwrap();
        assert!(s.insert("w", Tensor::param(vec![1], vec![0.0])).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.fdnm");
        let mut r = rng::stream(3, "store-test", 0, 0);
        let mut store = ParamStore::new();
        for (i, shape) in [vec![2, 3], vec![4], vec![1, 2, 2]].into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
            store
                .insert(&format!("p{i}.w"), Tensor::param(shape, data))
                .unwrap();
        }
        store.snap_to_f32();
        write_records(&path, &store.to_records()).unwrap();
        let loaded = read_records(&path).unwrap();
        let expected = store.to_records();
        assert_eq!(loaded.len(), expected.len());
        for (a, b) in loaded.iter().zip(&expected) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn magic_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.fdnm");
        let rec = Record {
            name: "a.b".into(),
            shape: vec![2],
            data: vec![1.0, -1.0],
        };
        write_records(&path, &[rec]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"FDNM1\na.b 2\n\n"));
        assert_eq!(bytes.len(), "FDNM1\na.b 2\n\n".len() + 8);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fdnm");
        std::fs::write(&path, b"FDNM1\nw 4\n\n\x00\x00").unwrap();
        assert!(read_records(&path).is_err());
    }
}
