//! The versioned model container.
//!
//! Two magics share one layout. `CTN1` stores voting tables as
//! little-endian `f32`; `CTq1` stores them as `i8` with a per-table
//! (scale, offset) pair, quantizing `v` to
//! `round((v - offset) / scale) - 128` and dequantizing back to
//! `offset + (q + 128) * scale`, so the worst-case per-entry error is
//! `scale / 2`. Bit-function parameters stay `f32` in both variants:
//! coarse offsets would move the sample points themselves.
//!
//! Layout after the magic: input extents, class count, layer count, one
//! spec record per layer (tag byte plus fields), then the parameter
//! blocks of each CT layer in order — per table, the bit records
//! (`dx1, dy1, dx2, dy2, threshold` as `f32`, channel as `u32`)
//! followed by the table rows, row-major.

use convtab_core::fern::{BitFunctionParams, WordCalculator};
use convtab_core::layer::{ConvTable, CtLayerConfig, VotingTable};
use convtab_core::network::{Layer, LayerSpec, Network, NetworkSpec};
use convtab_core::tensor::{PadMode, PadSpec};

use crate::{IoError, Result};

const MAGIC_F32: &[u8; 4] = b"CTN1";
const MAGIC_I8: &[u8; 4] = b"CTq1";

const TAG_CT: u8 = 0;
const TAG_AVG_POOL: u8 = 1;
const TAG_SOFTMAX: u8 = 2;

const PAD_VALID: u8 = 0;
const PAD_SAME: u8 = 1;

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { bytes: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn i8(&mut self, v: i8) {
        self.bytes.push(v as u8);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(IoError::Parse {
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {what} at offset {}", self.offset),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f64> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }

    fn done(&self) -> bool {
        self.offset == self.bytes.len()
    }
}

fn write_header(w: &mut Writer, net: &Network, magic: &[u8; 4]) {
    w.bytes.extend_from_slice(magic);
    let spec = net.spec();
    w.u32(spec.input.0 as u32);
    w.u32(spec.input.1 as u32);
    w.u32(spec.input.2 as u32);
    w.u32(spec.classes as u32);
    w.u32(spec.layers.len() as u32);
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Ct { l, k, m, d_out, stride, pad } => {
                w.u8(TAG_CT);
                w.u32(l as u32);
                w.u32(k as u32);
                w.u32(m as u32);
                w.u32(d_out as u32);
                w.u32(stride as u32);
                w.u8(match pad.mode {
                    PadMode::Valid => PAD_VALID,
                    PadMode::Same => PAD_SAME,
                });
                w.f32(pad.fill);
            }
            LayerSpec::AvgPool { l, stride } => {
                w.u8(TAG_AVG_POOL);
                w.u32(l as u32);
                w.u32(stride as u32);
            }
            LayerSpec::Softmax => w.u8(TAG_SOFTMAX),
        }
    }
}

fn write_bits(w: &mut Writer, ct: &CtLayerConfig, m: usize) {
    for bit in ct.tables()[m].calculator.bits() {
        w.f32(bit.dx1);
        w.f32(bit.dy1);
        w.f32(bit.dx2);
        w.f32(bit.dy2);
        w.f32(bit.threshold);
        w.u32(bit.channel as u32);
    }
}

/// Serializes at full 32-bit precision (`CTN1`).
pub fn save_model(net: &Network) -> Vec<u8> {
    let mut w = Writer::new();
    write_header(&mut w, net, MAGIC_F32);
    for layer in net.layers() {
        let Layer::Ct(ct) = layer else { continue };
        for m in 0..ct.m() {
            write_bits(&mut w, ct, m);
            for v in ct.tables()[m].table.data() {
                w.f32(*v);
            }
        }
    }
    w.bytes
}

/// Serializes with 8-bit tables (`CTq1`): per table, scale and offset
/// as `f32`, then the quantized rows.
pub fn save_model_i8(net: &Network) -> Vec<u8> {
    let mut w = Writer::new();
    write_header(&mut w, net, MAGIC_I8);
    for layer in net.layers() {
        let Layer::Ct(ct) = layer else { continue };
        for m in 0..ct.m() {
            write_bits(&mut w, ct, m);
            let data = ct.tables()[m].table.data();
            let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // store scale/offset at f32 so quantization uses exactly what
            // the file carries
            let scale = (((max - min) / 255.0).max(f64::MIN_POSITIVE) as f32) as f64;
            let offset = (min as f32) as f64;
            w.f32(scale);
            w.f32(offset);
            for &v in data {
                let q = ((v - offset) / scale).round() - 128.0;
                w.i8(q.clamp(-128.0, 127.0) as i8);
            }
        }
    }
    w.bytes
}

fn read_spec(r: &mut Reader) -> Result<NetworkSpec> {
    let input = (r.u32("input height")? as usize, r.u32("input width")? as usize, r.u32("input depth")? as usize);
    let classes = r.u32("class count")? as usize;
    let layer_count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let tag = r.u8("layer tag")?;
        let layer = match tag {
            TAG_CT => {
                let l = r.u32("l")? as usize;
                let k = r.u32("k")? as usize;
                let m = r.u32("m")? as usize;
                let d_out = r.u32("d_out")? as usize;
                let stride = r.u32("stride")? as usize;
                let mode = match r.u8("pad mode")? {
                    PAD_VALID => PadMode::Valid,
                    PAD_SAME => PadMode::Same,
                    other => {
                        return Err(IoError::Parse {
                            offset: r.offset as u64 - 1,
                            reason: format!("unknown pad mode {other}"),
                        })
                    }
                };
                let fill = r.f32("pad fill")?;
                LayerSpec::Ct { l, k, m, d_out, stride, pad: PadSpec { mode, fill } }
            }
            TAG_AVG_POOL => {
                LayerSpec::AvgPool { l: r.u32("pool l")? as usize, stride: r.u32("pool stride")? as usize }
            }
            TAG_SOFTMAX => LayerSpec::Softmax,
            other => {
                return Err(IoError::Parse {
                    offset: r.offset as u64 - 1,
                    reason: format!("unknown layer tag {other} in layer {i}"),
                })
            }
        };
        layers.push(layer);
    }
    Ok(NetworkSpec { input, layers, classes })
}

fn read_bits(r: &mut Reader, k: usize, depth: usize) -> Result<Vec<BitFunctionParams>> {
    (0..k)
        .map(|_| {
            let dx1 = r.f32("dx1")?;
            let dy1 = r.f32("dy1")?;
            let dx2 = r.f32("dx2")?;
            let dy2 = r.f32("dy2")?;
            let threshold = r.f32("threshold")?;
            let channel = r.u32("channel")? as usize;
            if channel >= depth {
                return Err(IoError::Parse {
                    offset: r.offset as u64 - 4,
                    reason: format!("bit channel {channel} out of range for depth {depth}"),
                });
            }
            Ok(BitFunctionParams { dx1, dy1, dx2, dy2, threshold, channel })
        })
        .collect()
}

/// Reconstructs a network from either container variant.
pub fn load_model(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    let quantized = match magic {
        m if m == MAGIC_F32 => false,
        m if m == MAGIC_I8 => true,
        other => {
            return Err(IoError::Parse {
                offset: 0,
                reason: format!("unknown magic {:?}", String::from_utf8_lossy(other)),
            })
        }
    };
    let spec = read_spec(&mut r)?;
    let shapes = spec.shapes()?;

    // build with placeholder parameters, then overwrite from the stream
    let mut net = Network::build(&spec, 0)?;
    let mut in_depth = spec.input.2;
    let mut shape_iter = shapes.iter();
    for layer in net.layers_mut() {
        let out_shape = *shape_iter.next().expect("shapes align with layers");
        let Layer::Ct(ct) = layer else {
            in_depth = out_shape.2;
            continue;
        };
        let (m, k, d_out, l, stride, pad) =
            (ct.m(), ct.k(), ct.d_out(), ct.patch_size(), ct.stride(), ct.pad());
        let rows = 1usize << k;
        let mut tables = Vec::with_capacity(m);
        for _ in 0..m {
            let bits = read_bits(&mut r, k, in_depth)?;
            let calc = WordCalculator::new(bits, l)?;
            let data = if quantized {
                let scale = r.f32("table scale")?;
                let offset = r.f32("table offset")?;
                r.take(rows * d_out, "quantized table")?
                    .iter()
                    .map(|&b| offset + (b as i8 as f64 + 128.0) * scale)
                    .collect()
            } else {
                let mut data = Vec::with_capacity(rows * d_out);
                for _ in 0..rows * d_out {
                    data.push(r.f32("table entry")?);
                }
                data
            };
            tables.push(ConvTable::new(calc, VotingTable::from_rows(k, d_out, data)?)?);
        }
        *ct = CtLayerConfig::new(tables, stride, pad, d_out)?;
        in_depth = out_shape.2;
    }
    if !r.done() {
        return Err(IoError::Parse {
            offset: r.offset as u64,
            reason: format!("{} trailing bytes after the last parameter block", bytes.len() - r.offset),
        });
    }
    Ok(net)
}

/// Per-CT-layer, per-table quantization scales of a `CTq1` stream.
/// The worst-case dequantization error of one table entry is half its
/// scale.
pub fn read_quantization_scales(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC_I8 {
        return Err(IoError::Parse { offset: 0, reason: "not a CTq1 stream".into() });
    }
    let spec = read_spec(&mut r)?;
    let mut scales = Vec::new();
    for layer in &spec.layers {
        let LayerSpec::Ct { k, m, d_out, .. } = *layer else { continue };
        let rows = 1usize << k;
        let mut layer_scales = Vec::with_capacity(m);
        for _ in 0..m {
            r.take(k * 24, "bit records")?;
            let scale = r.f32("table scale")?;
            r.f32("table offset")?;
            r.take(rows * d_out, "quantized table")?;
            layer_scales.push(scale);
        }
        scales.push(layer_scales);
    }
    Ok(scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use convtab_core::network::ForwardMode;
    use convtab_core::tensor::Tensor3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            input: (10, 10, 2),
            layers: vec![
                LayerSpec::ct(3, 4, 2, 6),
                LayerSpec::AvgPool { l: 2, stride: 2 },
                LayerSpec::ct(3, 3, 2, 5),
                LayerSpec::avg_pool(2),
                LayerSpec::Softmax,
            ],
            classes: 5,
        }
    }

    fn random_image(spec: &NetworkSpec, seed: u64) -> Tensor3 {
        let (h, w, d) = spec.input;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor3::from_data(h, w, d, data).unwrap()
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let spec = small_spec();
        for seed in 0..5 {
            let net = Network::build(&spec, seed).unwrap();
            let restored = load_model(&save_model(&net)).unwrap();
            assert_eq!(net, restored);
            for img_seed in 0..3 {
                let img = random_image(&spec, img_seed);
                let a = net.forward(&img, ForwardMode::Hard).unwrap();
                let b = restored.forward(&img, ForwardMode::Hard).unwrap();
                assert_eq!(a, b, "logits diverged after round-trip");
            }
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let net = Network::build(&small_spec(), 1).unwrap();
        let mut bytes = save_model(&net);
        bytes[0] = b'X';
        assert!(matches!(load_model(&bytes), Err(IoError::Parse { offset: 0, .. })));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let net = Network::build(&small_spec(), 2).unwrap();
        let bytes = save_model(&net);
        assert!(matches!(load_model(&bytes[..bytes.len() - 3]), Err(IoError::Parse { .. })));
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(load_model(&extended), Err(IoError::Parse { .. })));
    }

    #[test]
    fn i8_round_trip_error_stays_within_the_scale_bound() {
        let spec = NetworkSpec {
            input: (8, 8, 1),
            layers: vec![LayerSpec::ct(3, 4, 3, 4), LayerSpec::avg_pool(6), LayerSpec::Softmax],
            classes: 4,
        };
        for seed in 0..5 {
            let net = Network::build(&spec, seed).unwrap();
            let bytes = save_model_i8(&net);
            let restored = load_model(&bytes).unwrap();
            let scales = read_quantization_scales(&bytes).unwrap();
            assert_eq!(scales.len(), 1);
            assert_eq!(scales[0].len(), 3);
            // single CT layer + mean pool: each logit is a mean of M-row
            // sums, so the worst error is the sum of half-scales
            let bound: f64 = scales[0].iter().map(|s| s / 2.0).sum::<f64>() + 1e-9;
            for img_seed in 0..3 {
                let img = random_image(&spec, 100 + img_seed);
                let a = net.forward(&img, ForwardMode::Hard).unwrap();
                let b = restored.forward(&img, ForwardMode::Hard).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= bound, "error {} above bound {bound}", (x - y).abs());
                }
            }
        }
    }

    #[test]
    fn quantized_tables_dequantize_from_stored_scales() {
        let spec = NetworkSpec {
            input: (6, 6, 1),
            layers: vec![LayerSpec::ct(3, 2, 1, 2), LayerSpec::avg_pool(4), LayerSpec::Softmax],
            classes: 2,
        };
        let net = Network::build(&spec, 9).unwrap();
        let restored = load_model(&save_model_i8(&net)).unwrap();
        let (Layer::Ct(orig), Layer::Ct(quant)) = (&net.layers()[0], &restored.layers()[0]) else {
            unreachable!()
        };
        let scale = read_quantization_scales(&save_model_i8(&net)).unwrap()[0][0];
        for (a, b) in orig.tables()[0].table.data().iter().zip(quant.tables()[0].table.data()) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-12);
        }
    }
}
