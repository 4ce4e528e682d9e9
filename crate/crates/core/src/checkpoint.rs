//! Binary checkpoints for experts and routers, plus the JSON bank manifest.
//!
//! Every file is `magic (8 bytes) | version u8 | precision u8 | body | sha256`,
//! with all integers and floats little-endian. The precision byte is the
//! float width in bits; loading into a runtime of another width is refused
//! rather than cast.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Delta, ExpertAdapter, Head, LayerAdapter, LoraFactors};
use crate::router::{ExpertBank, RouterParams, TrainedRouter};
use crate::tensor::{DenseTensor, Scalar};
use crate::tt::{TtCores, TtShape};

pub const FORMAT_VERSION: u8 = 1;
pub const EXPERT_MAGIC: &[u8; 8] = b"TTMOEEXP";
pub const ROUTER_MAGIC: &[u8; 8] = b"TTMOERTR";
pub const BANK_SCHEMA_VERSION: u32 = 1;

const KIND_TT: u8 = 0;
const KIND_LORA: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len());
        for &d in dims {
            self.u32(d);
        }
    }

    fn floats<T: Scalar>(&mut self, values: &[T]) {
        for &v in values {
            v.write_le(&mut self.buf);
        }
    }

    fn tensor<T: Scalar>(&mut self, t: &DenseTensor<T>) {
        self.dims(t.shape());
        self.floats(t.data());
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn dims(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.u32(what)?;
        if n > 16 {
            return Err(Error::Format(format!("{what}: implausible rank {n}")));
        }
        (0..n).map(|_| self.u32(what)).collect()
    }

    fn floats<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let width = usize::from(T::BITS / 8);
        let bytes = self.take(n.checked_mul(width).unwrap_or(usize::MAX), what)?;
        Ok(bytes.chunks_exact(width).map(T::read_le).collect())
    }

    fn tensor<T: Scalar>(&mut self, what: &str) -> Result<DenseTensor<T>> {
        let shape = self.dims(what)?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("{what}: shape overflows")))?;
        let data = self.floats(n, what)?;
        DenseTensor::new(shape, data)
    }
}

/// Checks magic, version, precision and checksum; returns a reader over the body.
fn open<'a, T: Scalar>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Reader<'a>> {
    if bytes.len() < magic.len() + 2 + DIGEST_LEN {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes[8] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (this build reads {FORMAT_VERSION})",
            bytes[8]
        )));
    }
    if bytes[9] != T::BITS {
        return Err(Error::Precision {
            file: bytes[9],
            runtime: T::BITS,
        });
    }
    let (payload, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Format("checksum mismatch: file is truncated or corrupted".into()));
    }
    Ok(Reader {
        buf: payload,
        pos: 10,
    })
}

fn header<T: Scalar>(magic: &[u8; 8]) -> Writer {
    let mut w = Writer::default();
    w.buf.extend_from_slice(magic);
    w.u8(FORMAT_VERSION);
    w.u8(T::BITS);
    w
}

fn write_tt_fragment<T: Scalar>(w: &mut Writer, cores: &TtCores<T>) {
    let s = cores.shape();
    w.u32(s.d_in());
    w.u32(s.d_out());
    w.dims(&s.input_factors);
    w.dims(&s.output_factors);
    w.u32(s.rank);
    w.f64(cores.alpha().to_f64());
    w.u8(T::BITS);
    for core in cores.cores() {
        w.floats(core.data());
    }
}

fn read_tt_fragment<T: Scalar>(r: &mut Reader) -> Result<TtCores<T>> {
    let d_in = r.u32("tt d_in")?;
    let d_out = r.u32("tt d_out")?;
    let shape = TtShape::new(r.dims("input factors")?, r.dims("output factors")?, r.u32("tt rank")?);
    let alpha = T::lit(r.f64("tt alpha")?);
    let precision = r.u8("tt precision")?;
    if precision != T::BITS {
        return Err(Error::Precision {
            file: precision,
            runtime: T::BITS,
        });
    }
    shape.validate(d_in, d_out)?;
    let cores = (0..shape.num_cores())
        .map(|k| {
            let dims = shape.core_shape(k);
            let data = r.floats(dims.iter().product(), "tt core")?;
            DenseTensor::new(dims.to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    TtCores::from_cores(shape, cores, alpha)
}

fn write_delta<T: Scalar>(w: &mut Writer, delta: &Delta<T>) {
    match delta {
        Delta::Tt(c) => {
            w.u8(KIND_TT);
            write_tt_fragment(w, c);
        }
        Delta::Lora(l) => {
            w.u8(KIND_LORA);
            w.f64(l.alpha.to_f64());
            w.tensor(&l.a);
            w.tensor(&l.b);
        }
    }
}

fn read_delta<T: Scalar>(r: &mut Reader) -> Result<Delta<T>> {
    match r.u8("delta kind")? {
        KIND_TT => Ok(Delta::Tt(read_tt_fragment(r)?)),
        KIND_LORA => {
            let alpha = T::lit(r.f64("lora alpha")?);
            let a: DenseTensor<T> = r.tensor("lora A")?;
            let b: DenseTensor<T> = r.tensor("lora B")?;
            if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
                return Err(Error::Format("lora factors do not chain".into()));
            }
            Ok(Delta::Lora(LoraFactors { a, b, alpha }))
        }
        k => Err(Error::Format(format!("unknown delta kind {k}"))),
    }
}

/// Serializes an expert: manifest, per-layer Q/V fragments, then the head.
pub fn encode_expert<T: Scalar>(adapter: &ExpertAdapter<T>) -> Vec<u8> {
    let mut w = header::<T>(EXPERT_MAGIC);
    w.u32(adapter.expert_id as usize);
    w.str(&adapter.task_name);
    w.u32(adapter.num_classes());
    w.u32(adapter.layers().len());
    w.u64(adapter.config_hash);
    for layer in adapter.layers() {
        write_delta(&mut w, &layer.q);
        write_delta(&mut w, &layer.v);
    }
    let head = adapter.head();
    w.tensor(&head.weight);
    w.floats(&head.bias);
    w.finish()
}

/// Inverse of [`encode_expert`]. With `expected_config` set, an expert
/// built for a different base model is refused.
pub fn decode_expert<T: Scalar>(bytes: &[u8], expected_config: Option<u64>) -> Result<ExpertAdapter<T>> {
    let mut r = open::<T>(bytes, EXPERT_MAGIC)?;
    let expert_id = r.u32("expert id")? as u32;
    let task_name = r.str("task name")?;
    let classes = r.u32("class count")?;
    let n_layers = r.u32("layer count")?;
    let config_hash = r.u64("config hash")?;
    if let Some(expected) = expected_config {
        if expected != config_hash {
            return Err(Error::ConfigHash {
                expected,
                found: config_hash,
            });
        }
    }
    let layers = (0..n_layers)
        .map(|_| {
            Ok(LayerAdapter {
                q: read_delta(&mut r)?,
                v: read_delta(&mut r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weight: DenseTensor<T> = r.tensor("head weight")?;
    if weight.ndim() != 2 || weight.cols() != classes {
        return Err(Error::Format(format!(
            "head weight {:?} does not match {classes} classes",
            weight.shape()
        )));
    }
    let bias = r.floats(classes, "head bias")?;
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(ExpertAdapter::from_parts(
        expert_id,
        task_name,
        config_hash,
        layers,
        Head { weight, bias },
    ))
}

pub fn encode_router<T: Scalar>(router: &TrainedRouter<T>) -> Vec<u8> {
    let p = &router.params;
    let mut w = header::<T>(ROUTER_MAGIC);
    w.u32(p.hidden_dim());
    w.u32(p.num_experts());
    w.f64(router.lambda);
    for (id, name) in &router.experts {
        w.u32(*id as usize);
        w.str(name);
    }
    w.floats(p.w_gate.data());
    w.floats(p.b_gate.data());
    w.floats(p.w_noise.data());
    w.finish()
}

pub fn decode_router<T: Scalar>(bytes: &[u8]) -> Result<TrainedRouter<T>> {
    let mut r = open::<T>(bytes, ROUTER_MAGIC)?;
    let d = r.u32("hidden dim")?;
    let n = r.u32("expert count")?;
    let lambda = r.f64("lambda")?;
    let experts = (0..n)
        .map(|_| Ok((r.u32("expert id")? as u32, r.str("expert name")?)))
        .collect::<Result<Vec<_>>>()?;
    let w_gate = DenseTensor::new(vec![d, n], r.floats(d * n, "w_gate")?)?;
    let b_gate = DenseTensor::new(vec![n], r.floats(n, "gate bias")?)?;
    let w_noise = DenseTensor::new(vec![d, n], r.floats(d * n, "w_noise")?)?;
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(TrainedRouter {
        params: RouterParams::from_parts(w_gate, b_gate, w_noise)?,
        lambda,
        experts,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_expert<T: Scalar>(path: impl AsRef<Path>, adapter: &ExpertAdapter<T>) -> Result<()> {
    write_file(path.as_ref(), &encode_expert(adapter))
}

pub fn load_expert<T: Scalar>(path: impl AsRef<Path>, expected_config: Option<u64>) -> Result<ExpertAdapter<T>> {
    decode_expert(&read_file(path.as_ref())?, expected_config)
}

pub fn save_router<T: Scalar>(path: impl AsRef<Path>, router: &TrainedRouter<T>) -> Result<()> {
    write_file(path.as_ref(), &encode_router(router))
}

pub fn load_router<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainedRouter<T>> {
    decode_router(&read_file(path.as_ref())?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEntry {
    pub expert_id: u32,
    pub task_name: String,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
    pub sha256: String,
}

/// `bank.json`: the expert files of a bank in gate order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankManifest {
    pub schema_version: u32,
    pub config_hash: u64,
    pub precision: u8,
    pub experts: Vec<BankEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `expert-<id>.ttx` files and `bank.json` into `dir`.
pub fn save_bank<T: Scalar>(dir: impl AsRef<Path>, bank: &ExpertBank<T>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut experts = Vec::with_capacity(bank.len());
    for e in bank.experts() {
        let file = PathBuf::from(format!("expert-{}.ttx", e.expert_id));
        let bytes = encode_expert(e);
        write_file(&dir.join(&file), &bytes)?;
        experts.push(BankEntry {
            expert_id: e.expert_id,
            task_name: e.task_name.clone(),
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = BankManifest {
        schema_version: BANK_SCHEMA_VERSION,
        config_hash: bank.config_hash(),
        precision: T::BITS,
        experts,
    };
    let path = dir.join("bank.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    write_file(&path, json.as_bytes())?;
    Ok(path)
}

/// Loads every expert listed in a manifest, checking file digests and the
/// base-model config hash.
pub fn load_bank<T: Scalar>(manifest_path: impl AsRef<Path>, expected_config: u64) -> Result<ExpertBank<T>> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: BankManifest =
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != BANK_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "bank manifest schema {} unsupported",
            manifest.schema_version
        )));
    }
    if manifest.config_hash != expected_config {
        return Err(Error::ConfigHash {
            expected: expected_config,
            found: manifest.config_hash,
        });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let experts = manifest
        .experts
        .iter()
        .map(|entry| {
            let file = dir.join(&entry.file);
            let bytes = read_file(&file)?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::Format(format!("{}: digest differs from manifest", file.display())));
            }
            decode_expert(&bytes, Some(expected_config))
        })
        .collect::<Result<Vec<_>>>()?;
    ExpertBank::new(experts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterSpec, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_like<T: Scalar>(spec: &AdapterSpec, seed: u64) -> ExpertAdapter<T> {
        let mut a = ExpertAdapter::<T>::new(&ModelConfig::default(), spec, 7, "band0", 3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in a.params_mut() {
            *p = DenseTensor::randn(p.shape(), T::one(), &mut rng);
        }
        a
    }

    #[test]
    fn expert_round_trip_is_bit_exact() {
        for spec in [AdapterSpec::toy_tt(), AdapterSpec::Lora { rank: 4, alpha: 2.0 }] {
            let a = trained_like::<f32>(&spec, 1);
            let back: ExpertAdapter<f32> = decode_expert(&encode_expert(&a), Some(a.config_hash)).unwrap();
            assert_eq!(back, a);
            assert_eq!(back.trainable_hash(), a.trainable_hash());
            let b = trained_like::<f64>(&spec, 2);
            assert_eq!(decode_expert::<f64>(&encode_expert(&b), None).unwrap(), b);
        }
    }

    #[test]
    fn precision_mismatch_is_refused() {
        let a = trained_like::<f64>(&AdapterSpec::toy_tt(), 3);
        let err = decode_expert::<f32>(&encode_expert(&a), None).unwrap_err();
        assert!(matches!(err, Error::Precision { file: 64, runtime: 32 }));
    }

    #[test]
    fn config_hash_mismatch_is_refused() {
        let a = trained_like::<f32>(&AdapterSpec::toy_tt(), 4);
        let err = decode_expert::<f32>(&encode_expert(&a), Some(a.config_hash ^ 1)).unwrap_err();
        assert!(matches!(err, Error::ConfigHash { .. }));
    }

    #[test]
    fn truncated_or_tampered_file_is_a_format_error() {
        let a = trained_like::<f32>(&AdapterSpec::toy_tt(), 5);
        let bytes = encode_expert(&a);
        for cut in [0, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_expert::<f32>(&bytes[..cut], None), Err(Error::Format(_))), "cut {cut}");
        }
        let mut tampered = bytes.clone();
        tampered[30] ^= 0xff;
        assert!(matches!(decode_expert::<f32>(&tampered, None), Err(Error::Format(_))));
        let mut bad_version = bytes;
        bad_version[8] = 9;
        assert!(matches!(decode_expert::<f32>(&bad_version, None), Err(Error::Format(_))));
    }

    #[test]
    fn router_round_trip() {
        let router = TrainedRouter {
            params: RouterParams::<f32>::init(64, 3, 9),
            lambda: 0.5,
            experts: vec![(0, "a".into()), (4, "b".into()), (9, "c".into())],
        };
        let back = decode_router::<f32>(&encode_router(&router)).unwrap();
        assert_eq!(back, router);
        assert!(matches!(
            decode_router::<f64>(&encode_router(&router)),
            Err(Error::Precision { .. })
        ));
        assert!(matches!(
            decode_router::<f32>(&encode_expert(&trained_like::<f32>(&AdapterSpec::toy_tt(), 1))),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bank_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let experts = (0..3)
            .map(|i| {
                let mut a = trained_like::<f32>(&AdapterSpec::toy_tt(), i);
                a.expert_id = i as u32;
                a
            })
            .collect();
        let bank = ExpertBank::new(experts).unwrap();
        let manifest = save_bank(dir.path(), &bank).unwrap();
        let back = load_bank::<f32>(&manifest, bank.config_hash()).unwrap();
        assert_eq!(back.experts(), bank.experts());
        assert!(matches!(
            load_bank::<f32>(&manifest, bank.config_hash() ^ 1),
            Err(Error::ConfigHash { .. })
        ));
        fs::write(dir.path().join("expert-1.ttx"), b"junk").unwrap();
        assert!(matches!(load_bank::<f32>(&manifest, bank.config_hash()), Err(Error::Format(_))));
    }
}
