//! Checkpoint files: `manifest.txt` + `params.bin` (little-endian f32), plus
//! the config snapshot and run state written next to them.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use curl_core::autodiff::{Adam, ParamSet};

pub const MANIFEST: &str = "manifest.txt";
pub const PARAMS: &str = "params.bin";
pub const CONFIG: &str = "config.txt";
pub const STATE: &str = "state.txt";
pub const REPLAY: &str = "replay.bin";
pub const METRICS: &str = "metrics.csv";
const MANIFEST_HEADER: &str = "# name\tshape\tdtype\toffset";

/// One named flat tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes `manifest.txt` and `params.bin` into `dir`.
pub fn write_entries(dir: &Path, entries: &[Entry]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut blob = Vec::new();
    for e in entries {
        ensure!(!e.name.contains(['\t', '\n']), "tensor name `{}` contains a tab or newline", e.name);
        ensure!(e.shape.iter().product::<usize>() == e.data.len(), "tensor `{}` shape/data mismatch", e.name);
        manifest.push_str(&format!("{}\t{}\tf32\t{}\n", e.name, shape_str(&e.shape), blob.len()));
        for x in &e.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(PARAMS), blob)?;
    Ok(())
}

pub fn read_entries(dir: &Path) -> Result<Vec<Entry>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST)).with_context(|| format!("reading {}/{MANIFEST}", dir.display()))?;
    let blob = fs::read(dir.join(PARAMS)).with_context(|| format!("reading {}/{PARAMS}", dir.display()))?;
    let mut out = Vec::new();
    for line in manifest.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        ensure!(f.len() == 4, "bad manifest line `{line}`");
        ensure!(f[2] == "f32", "unsupported scalar type `{}`", f[2]);
        let shape: Vec<usize> = if f[1].is_empty() { vec![] } else { f[1].split('x').map(str::parse).collect::<Result<_, _>>()? };
        let offset: usize = f[3].parse()?;
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        ensure!(end <= blob.len(), "tensor `{}` runs past the end of {PARAMS}", f[0]);
        let data = blob[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(Entry { name: f[0].to_string(), shape, data });
    }
    Ok(out)
}

/// Flattens named parameter sets and optimizer moments into entries.
pub fn collect_entries(sets: &[(&str, &ParamSet<f32>)], opts: &[(&str, &Adam<f32>)]) -> Vec<Entry> {
    let mut out = Vec::new();
    for (set_name, set) in sets {
        for (_, name, t) in set.iter() {
            out.push(Entry { name: format!("{set_name}/{name}"), shape: t.shape().to_vec(), data: t.values().to_vec() });
        }
    }
    for (opt_name, opt) in opts {
        let set = sets.iter().find(|(n, _)| n == opt_name).map(|(_, s)| *s);
        let (first, second) = opt.moments();
        for (i, (m, v)) in first.iter().zip(second).enumerate() {
            let pname = set.map_or_else(|| i.to_string(), |s| s.iter().nth(i).map(|(_, n, _)| n.to_string()).unwrap_or_default());
            let shape = set.and_then(|s| s.tensors().get(i)).map_or_else(|| vec![m.len()], |t| t.shape().to_vec());
            out.push(Entry { name: format!("adam.{opt_name}.m/{pname}"), shape: shape.clone(), data: m.clone() });
            out.push(Entry { name: format!("adam.{opt_name}.v/{pname}"), shape, data: v.clone() });
        }
    }
    out
}

fn take<'a>(entries: &'a [Entry], name: &str, len: usize) -> Result<&'a [f32]> {
    let e = entries.iter().find(|e| e.name == name).with_context(|| format!("checkpoint lacks tensor `{name}`"))?;
    ensure!(e.data.len() == len, "tensor `{name}` has {} values, expected {len}", e.data.len());
    Ok(&e.data)
}

/// Loads values into parameter sets (and moments into optimizers, when the
/// entries carry them). Step counts are restored from `adam_steps`.
pub fn apply_entries(
    entries: &[Entry],
    sets: &mut [(&str, &mut ParamSet<f32>)],
    opts: &mut [(&str, &mut Adam<f32>)],
    adam_steps: Option<&[(String, u64)]>,
) -> Result<()> {
    for (set_name, set) in sets.iter_mut() {
        let names: Vec<String> = set.iter().map(|(_, n, _)| n.to_string()).collect();
        for (t, name) in set.tensors_mut().iter_mut().zip(&names) {
            let data = take(entries, &format!("{set_name}/{name}"), t.len())?;
            t.values_mut().copy_from_slice(data);
        }
    }
    let Some(steps) = adam_steps else {
        return Ok(());
    };
    for (opt_name, opt) in opts.iter_mut() {
        let set = sets.iter().find(|(n, _)| n == opt_name).map(|(_, s)| &**s);
        let (first, _) = opt.moments();
        let lens: Vec<usize> = first.iter().map(Vec::len).collect();
        let mut m = Vec::with_capacity(lens.len());
        let mut v = Vec::with_capacity(lens.len());
        for (i, &len) in lens.iter().enumerate() {
            let pname = set.map_or_else(|| i.to_string(), |s| s.iter().nth(i).map(|(_, n, _)| n.to_string()).unwrap_or_default());
            m.push(take(entries, &format!("adam.{opt_name}.m/{pname}"), len)?.to_vec());
            v.push(take(entries, &format!("adam.{opt_name}.v/{pname}"), len)?.to_vec());
        }
        let step = steps.iter().find(|(n, _)| n == opt_name).map(|(_, s)| *s).with_context(|| format!("no step count for optimizer `{opt_name}`"))?;
        opt.restore(step, m, v).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    Ok(())
}

// ---- small binary helpers -------------------------------------------------------

pub struct Writer<W: Write>(pub W);

impl<W: Write> Writer<W> {
    pub fn u8(&mut self, x: u8) -> Result<()> {
        Ok(self.0.write_all(&[x])?)
    }
    pub fn u32(&mut self, x: u32) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    pub fn u64(&mut self, x: u64) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    pub fn f32(&mut self, x: f32) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        Ok(self.0.write_all(b)?)
    }
}

pub struct Reader<R: Read>(pub R);

impl<R: Read> Reader<R> {
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).context("truncated binary file")?;
        Ok(b)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.arr::<1>()?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.arr()?))
    }
    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        if n > 1 << 34 {
            bail!("implausible blob length {n}");
        }
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b).context("truncated binary file")?;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            Entry { name: "a/w".into(), shape: vec![2, 3], data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0] },
            Entry { name: "b".into(), shape: vec![1], data: vec![7.0] },
        ];
        write_entries(dir.path(), &entries).unwrap();
        let back = read_entries(dir.path()).unwrap();
        assert_eq!(back, entries);
        let d2 = tempfile::tempdir().unwrap();
        write_entries(d2.path(), &back).unwrap();
        assert_eq!(fs::read(dir.path().join(PARAMS)).unwrap(), fs::read(d2.path().join(PARAMS)).unwrap());
        assert_eq!(fs::read(dir.path().join(MANIFEST)).unwrap(), fs::read(d2.path().join(MANIFEST)).unwrap());
    }

    #[test]
    fn manifest_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            Entry { name: "x".into(), shape: vec![3], data: vec![0.0; 3] },
            Entry { name: "y".into(), shape: vec![2, 2], data: vec![0.0; 4] },
        ];
        write_entries(dir.path(), &entries).unwrap();
        let m = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(m, "# name\tshape\tdtype\toffset\nx\t3\tf32\t0\ny\t2x2\tf32\t12\n");
    }
}
