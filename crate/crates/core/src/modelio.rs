//! Model files, training checkpoints and size accounting.
//!
//! Both file kinds share one container: 4 magic bytes, a `u32` format version,
//! the `u64` total file length, a body, and a trailing 64-bit FNV-1a checksum
//! of everything before it. All integers and floats are little-endian. The
//! field-by-field layout is documented in `docs/format.md`.

use std::fmt;
use std::path::Path;

use crate::bintensor::{words_for, BitTensor};
use crate::error::{Error, Result};
use crate::fsutil::write_file_atomic;
use crate::netgraph::{BlockKind, BlockSpec, NetConfig, Network};
use crate::nnlayers::{BNParams, BinConvLayer, RealConvLayer};
use crate::trainer::{AdaMaxState, TrainState};

pub const MODEL_MAGIC: [u8; 4] = *b"BCED";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BCEL";
pub const FORMAT_VERSION: u32 = 1;

const TAG_REAL_CONV: u8 = 1;
const TAG_BINARY_CONV: u8 = 2;
const NO_SOURCE: u32 = u32::MAX;
/// Magic, version and length.
const HEADER_LEN: usize = 16;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u64.to_le_bytes());
        Self { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&u32::try_from(v).expect("dimension fits u32").to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }

    fn finish(mut self) -> Vec<u8> {
        let total = (self.buf.len() + 8) as u64;
        self.buf[8..16].copy_from_slice(&total.to_le_bytes());
        let sum = fnv1a64(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Malformed(format!("record overruns the body at byte {}", self.pos)))?;
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

    fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// `n` floats, refusing counts larger than the remaining body.
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::Malformed(format!("{n} floats declared past the end of the body")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} unread bytes after the last record",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Validates the container and returns the body between header and checksum.
fn open(bytes: &[u8], magic: [u8; 4]) -> Result<&[u8]> {
    let mut found = [0u8; 4];
    let n = bytes.len().min(4);
    found[..n].copy_from_slice(&bytes[..n]);
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            declared: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let actual = bytes.len() as u64;
    if actual < declared {
        return Err(Error::Truncated { declared, actual });
    }
    if actual > declared || declared < (HEADER_LEN + 8) as u64 {
        return Err(Error::Malformed(format!(
            "header declares {declared} bytes, file holds {actual}"
        )));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(&bytes[HEADER_LEN..body_end])
}

fn put_config(w: &mut Writer, c: &NetConfig) {
    w.u32(c.input_h);
    w.u32(c.input_w);
    w.u32(c.num_classes);
    w.u32(c.blocks.len());
    for b in &c.blocks {
        w.u8(b.kind.tag());
        w.u32(b.kernel_h);
        w.u32(b.kernel_w);
        w.u32(b.out_channels);
        w.u8(u8::from(b.pool));
        w.u32(b.unpool_source.unwrap_or(NO_SOURCE as usize));
    }
}

fn get_config(r: &mut Reader) -> Result<NetConfig> {
    let (input_h, input_w, num_classes) = (r.dim()?, r.dim()?, r.dim()?);
    let count = r.dim()?;
    if count > r.bytes.len() {
        return Err(Error::Malformed(format!("{count} blocks declared")));
    }
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = r.u8()?;
        let kind = BlockKind::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown block kind tag {tag}")))?;
        let (kernel_h, kernel_w, out_channels) = (r.dim()?, r.dim()?, r.dim()?);
        let pool = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Malformed(format!("pool flag {other}"))),
        };
        let src = r.u32()?;
        blocks.push(BlockSpec {
            kind,
            kernel_h,
            kernel_w,
            out_channels,
            pool,
            unpool_source: (src != NO_SOURCE).then_some(src as usize),
        });
    }
    let config = NetConfig {
        input_h,
        input_w,
        num_classes,
        blocks,
    };
    config.validate().map_err(|e| Error::Malformed(format!("stored config: {e}")))?;
    Ok(config)
}

fn put_bn(w: &mut Writer, bn: &BNParams) {
    w.u32(bn.channels());
    w.f64(bn.epsilon);
    for v in [&bn.gamma, &bn.beta, &bn.mean, &bn.var] {
        w.f64s(v);
    }
}

fn get_bn(r: &mut Reader) -> Result<BNParams> {
    let c = r.dim()?;
    let eps = r.f64()?;
    let (g, b, m, v) = (r.f64s(c)?, r.f64s(c)?, r.f64s(c)?, r.f64s(c)?);
    BNParams::new(g, b, m, v, eps).map_err(|e| Error::Malformed(format!("batch norm: {e}")))
}

/// Serializes a network. Identical networks give identical bytes.
pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC);
    put_config(&mut w, net.config());
    let a = net.adapter();
    w.u8(TAG_REAL_CONV);
    for d in [a.kernel_h, a.kernel_w, a.in_channels, a.out_channels] {
        w.u32(d);
    }
    w.f64s(&a.weights);
    put_bn(&mut w, &a.bn);
    for layer in net.binary_layers() {
        w.u8(TAG_BINARY_CONV);
        for d in [layer.kernel_h(), layer.kernel_w(), layer.in_channels(), layer.out_channels()] {
            w.u32(d);
        }
        for filter in layer.weights() {
            filter.words().iter().for_each(|&x| w.u64(x));
        }
        put_bn(&mut w, layer.bn());
    }
    w.finish()
}

/// Parses a network and refolds its thresholds.
pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader {
        bytes: open(bytes, MODEL_MAGIC)?,
        pos: 0,
    };
    let config = get_config(&mut r)?;
    let tag = r.u8()?;
    if tag != TAG_REAL_CONV {
        return Err(Error::Malformed(format!("block 0 has layer tag {tag}")));
    }
    let (kh, kw, cin, cout) = (r.dim()?, r.dim()?, r.dim()?, r.dim()?);
    let weights = r.f64s(kh.saturating_mul(kw).saturating_mul(cin).saturating_mul(cout))?;
    let bn = get_bn(&mut r)?;
    let adapter = RealConvLayer::new(kh, kw, cin, cout, weights, bn).map_err(|e| Error::Malformed(format!("block 0: {e}")))?;
    let mut blocks = Vec::with_capacity(config.blocks.len() - 1);
    for id in 1..config.blocks.len() {
        let tag = r.u8()?;
        if tag != TAG_BINARY_CONV {
            return Err(Error::Malformed(format!("block {id} has layer tag {tag}")));
        }
        let (kh, kw, cin, cout) = (r.dim()?, r.dim()?, r.dim()?, r.dim()?);
        let per_filter = kh.saturating_mul(kw).saturating_mul(words_for(cin));
        if per_filter.saturating_mul(cout) > r.bytes.len() / 8 {
            return Err(Error::Malformed(format!("block {id} declares more words than the file holds")));
        }
        let mut filters = Vec::with_capacity(cout);
        for _ in 0..cout {
            let words = (0..per_filter).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            filters.push(BitTensor::from_words(kh, kw, cin, words).map_err(|e| Error::Malformed(format!("block {id}: {e}")))?);
        }
        let bn = get_bn(&mut r)?;
        blocks.push(BinConvLayer::new(filters, bn).map_err(|e| Error::Malformed(format!("block {id}: {e}")))?);
    }
    r.expect_end()?;
    Network::from_parts(config, adapter, blocks).map_err(|e| Error::Malformed(e.to_string()))
}

/// Writes the model atomically; returns the byte count.
pub fn save(net: &Network, path: &Path) -> Result<usize> {
    let bytes = to_bytes(net);
    write_file_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn checkpoint_to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    put_config(&mut w, &state.config);
    w.u64(state.epoch as u64);
    w.f64(state.learning_rate);
    w.f64(state.epsilon);
    let arrays = state.params.arrays();
    w.u32(arrays.len());
    for (values, opt) in arrays.iter().zip(&state.optimizer) {
        w.u64(values.len() as u64);
        w.f64s(values);
        w.f64s(&opt.m);
        w.f64s(&opt.u);
        w.u64(opt.t);
        w.f64(opt.beta1);
        w.f64(opt.beta2);
    }
    w.u32(state.running_mean.len());
    for (m, v) in state.running_mean.iter().zip(&state.running_var) {
        w.u32(m.len());
        w.f64s(m);
        w.f64s(v);
    }
    w.finish()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader {
        bytes: open(bytes, CHECKPOINT_MAGIC)?,
        pos: 0,
    };
    let config = get_config(&mut r)?;
    let epoch = r.u64()? as usize;
    let learning_rate = r.f64()?;
    let epsilon = r.f64()?;
    let mut state = TrainState::new(config, 0, &Default::default()).map_err(|e| Error::Malformed(e.to_string()))?;
    state.epoch = epoch;
    state.learning_rate = learning_rate;
    state.epsilon = epsilon;
    let count = r.dim()?;
    if count != state.optimizer.len() {
        return Err(Error::Malformed(format!("{count} parameter arrays, config needs {}", state.optimizer.len())));
    }
    let mut optimizer = Vec::with_capacity(count);
    for (i, target) in state.params.arrays_mut().into_iter().enumerate() {
        let len = r.u64()? as usize;
        if len != target.len() {
            return Err(Error::Malformed(format!("array {i} holds {len} values, config needs {}", target.len())));
        }
        target.copy_from_slice(&r.f64s(len)?);
        optimizer.push(AdaMaxState {
            m: r.f64s(len)?,
            u: r.f64s(len)?,
            t: r.u64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
        });
    }
    state.optimizer = optimizer;
    let blocks = r.dim()?;
    if blocks != state.running_mean.len() {
        return Err(Error::Malformed(format!("{blocks} running-statistic records")));
    }
    for b in 0..blocks {
        let c = r.dim()?;
        if c != state.running_mean[b].len() {
            return Err(Error::Malformed(format!("block {b} running statistics have {c} channels")));
        }
        state.running_mean[b] = r.f64s(c)?;
        state.running_var[b] = r.f64s(c)?;
    }
    r.expect_end()?;
    state.validate()?;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<usize> {
    let bytes = checkpoint_to_bytes(state);
    write_file_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Parameter memory accounting. Real-valued parameters are counted at 4 bytes
/// each, as a deployed network would hold them; files store them at 8.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    pub binary_param_count: u64,
    /// Bytes of packed filter words.
    pub binary_packed_bytes: u64,
    /// Block-0 weights.
    pub real_param_count: u64,
    pub real_bytes: u64,
    /// γ, β, mean and variance of every batch-norm channel.
    pub bn_param_bytes: u64,
    pub total_bytes: u64,
    /// Every parameter, binary ones included, at 4 bytes.
    pub hypothetical_fp32_bytes: u64,
    pub reduction_ratio: f64,
}

pub fn size_report(net: &Network) -> SizeReport {
    let binary_param_count = net.binary_param_count() as u64;
    let binary_packed_bytes = net
        .binary_layers()
        .iter()
        .map(|l| (l.packed_words() * 8) as u64)
        .sum();
    let real_param_count = net.real_weight_count() as u64;
    let bn_params = 4 * net.bn_channel_count() as u64;
    let real_bytes = 4 * real_param_count;
    let bn_param_bytes = 4 * bn_params;
    let total_bytes = binary_packed_bytes + real_bytes + bn_param_bytes;
    let hypothetical_fp32_bytes = 4 * (binary_param_count + real_param_count + bn_params);
    SizeReport {
        binary_param_count,
        binary_packed_bytes,
        real_param_count,
        real_bytes,
        bn_param_bytes,
        total_bytes,
        hypothetical_fp32_bytes,
        reduction_ratio: 1.0 - total_bytes as f64 / hypothetical_fp32_bytes as f64,
    }
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mb = |b: u64| b as f64 / 1e6;
        writeln!(f, "binary parameters      {:>12}", self.binary_param_count)?;
        writeln!(f, "binary payload bytes   {:>12}  ({:.3} MB)", self.binary_packed_bytes, mb(self.binary_packed_bytes))?;
        writeln!(f, "real parameters        {:>12}", self.real_param_count)?;
        writeln!(f, "real bytes             {:>12}", self.real_bytes)?;
        writeln!(f, "batch-norm bytes       {:>12}", self.bn_param_bytes)?;
        writeln!(f, "total bytes            {:>12}  ({:.3} MB)", self.total_bytes, mb(self.total_bytes))?;
        writeln!(f, "all-fp32 bytes         {:>12}  ({:.2} MB)", self.hypothetical_fp32_bytes, mb(self.hypothetical_fp32_bytes))?;
        writeln!(f, "reduction              {:>11.2}%", 100.0 * self.reduction_ratio)?;
        writeln!(f, "reference figures: 2.14 MB binary network, 66.12 MB full precision, over 96% reduction")
    }
}
