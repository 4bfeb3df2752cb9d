//! Binary encoding of model states and partial updates.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header   16 B   "FFRZ" | u16 version | u16 kind | u32 record count | u32 reserved (0)
//! record   10 B   u16 layer index | u64 byte length
//!          n B    raw f32 parameters, tensors of the layer back to back
//! trailer   4 B   CRC-32 of every preceding byte
//! ```
//!
//! Only layers that own parameters get a record. A partial update is a
//! 32-byte metadata block (`u32 round | u32 client | u64 samples | f64 loss |
//! f64 accuracy`) followed by a container of kind [`ContainerKind::Partial`]
//! holding the trained layers only.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::client::PartialUpdate;
use crate::{Architecture, Error, FreezeMask, Model, Result, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"FFRZ";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_HEADER_LEN: usize = 10;
pub const TRAILER_LEN: usize = 4;
pub const UPDATE_META_LEN: usize = 32;
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ContainerKind {
    Full = 0,
    Partial = 1,
}

/// Raw tensor bytes for `params` parameters.
pub fn tensor_bytes(params: u64) -> u64 {
    params * BYTES_PER_PARAM
}

/// Encoded size of a container holding `records` layers and `params`
/// parameters in total.
pub fn container_len(records: usize, params: u64) -> u64 {
    (HEADER_LEN + TRAILER_LEN + records * RECORD_HEADER_LEN) as u64 + tensor_bytes(params)
}

pub fn serialize_model<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let layers: Vec<usize> = (0..model.params().len()).filter(|&i| !model.layer_params(i).is_empty()).collect();
    encode_container(ContainerKind::Full, layers.iter().map(|&i| (i, model.layer_params(i))))
}

pub fn deserialize_model<S: Scalar>(arch: &Architecture, bytes: &[u8]) -> Result<Model<S>> {
    let (kind, records) = decode_container(bytes)?;
    if kind != ContainerKind::Full {
        return Err(Error::Malformed("expected a full model container".into()));
    }
    let shapes = arch.shapes()?;
    let mut params: Vec<Vec<Tensor<S>>> = Vec::with_capacity(arch.layers.len());
    let mut records = records.into_iter().peekable();
    for (i, layer) in arch.layers.iter().enumerate() {
        let pshapes = layer.param_shapes(&shapes[i]);
        if pshapes.is_empty() {
            params.push(Vec::new());
            continue;
        }
        match records.next() {
            Some((index, data)) if index == i => params.push(split_tensors(i, &pshapes, data)?),
            Some((index, _)) => {
                return Err(Error::Malformed(format!("expected record for layer {}, found {}", i, index)))
            }
            None => return Err(Error::Malformed(format!("missing record for layer {}", i))),
        }
    }
    if let Some((index, _)) = records.next() {
        return Err(Error::Malformed(format!("unexpected record for layer {}", index)));
    }
    Model::from_params(arch.clone(), params)
}

pub fn encode_partial_update<S: Scalar>(update: &PartialUpdate<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(UPDATE_META_LEN);
    out.extend_from_slice(&update.round.to_le_bytes());
    out.extend_from_slice(&update.client_id.to_le_bytes());
    out.extend_from_slice(&update.sample_count.to_le_bytes());
    out.extend_from_slice(&update.loss.to_le_bytes());
    out.extend_from_slice(&update.accuracy.to_le_bytes());
    out.extend(encode_container(
        ContainerKind::Partial,
        update.layers.iter().map(|(&i, group)| (i, group.as_slice())),
    ));
    out
}

/// Decodes an update against `template`, which supplies parameter shapes and
/// the unit structure. Records must cover whole units.
pub fn decode_partial_update<S: Scalar>(template: &Model<S>, bytes: &[u8]) -> Result<PartialUpdate<S>> {
    let mut r = Reader::new(bytes);
    let round = r.u32()?;
    let client_id = r.u32()?;
    let sample_count = r.u64()?;
    let loss = f64::from_bits(r.u64()?);
    let accuracy = f64::from_bits(r.u64()?);
    let (kind, records) = decode_container(r.rest())?;
    if kind != ContainerKind::Partial {
        return Err(Error::Malformed("expected a partial update container".into()));
    }
    let shapes = template.arch().shapes()?;
    let mut layers = BTreeMap::new();
    for (index, data) in records {
        let spec = template
            .arch()
            .layers
            .get(index)
            .ok_or_else(|| Error::Malformed(format!("record for unknown layer {}", index)))?;
        let pshapes = spec.param_shapes(&shapes[index]);
        if pshapes.is_empty() {
            return Err(Error::Malformed(format!("record for parameterless layer {}", index)));
        }
        if layers.insert(index, split_tensors(index, &pshapes, data)?).is_some() {
            return Err(Error::Malformed(format!("duplicate record for layer {}", index)));
        }
    }
    let trained = FreezeMask::from_units(layers.keys().filter_map(|&l| template.unit_of_layer(l)));
    if template.masked_layers(&trained) != layers.keys().copied().collect::<Vec<_>>() {
        return Err(Error::Malformed("update records do not cover whole units".into()));
    }
    Ok(PartialUpdate { round, client_id, trained, layers, sample_count, loss, accuracy })
}

/// Tensor bytes held by a full-model container, or by a partial update when
/// `partial` is set. Verifies framing and checksum but decodes no values.
pub fn payload_tensor_bytes(bytes: &[u8], partial: bool) -> Result<u64> {
    let body = if partial {
        bytes.get(UPDATE_META_LEN..).ok_or(Error::Truncated { needed: UPDATE_META_LEN, available: bytes.len() })?
    } else {
        bytes
    };
    let (_, records) = decode_container(body)?;
    Ok(records.iter().map(|(_, data)| data.len() as u64).sum())
}

fn encode_container<'a, S: Scalar + 'a>(
    kind: ContainerKind,
    records: impl Iterator<Item = (usize, &'a [Tensor<S>])> + Clone,
) -> Vec<u8> {
    let count = records.clone().count();
    let params: usize = records.clone().map(|(_, g)| g.iter().map(Tensor::len).sum::<usize>()).sum();
    let mut out = Vec::with_capacity(container_len(count, params as u64) as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u16).to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for (index, group) in records {
        let len: usize = group.iter().map(Tensor::len).sum();
        out.extend_from_slice(&(index as u16).to_le_bytes());
        out.extend_from_slice(&tensor_bytes(len as u64).to_le_bytes());
        for t in group {
            for v in t.data() {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode_container(bytes: &[u8]) -> Result<(ContainerKind, Vec<(usize, &[u8])>)> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(Error::Truncated { needed: HEADER_LEN + TRAILER_LEN, available: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let mut r = Reader::new(&body[4..]);
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let kind = match r.u16()? {
        0 => ContainerKind::Full,
        1 => ContainerKind::Partial,
        k => return Err(Error::Malformed(format!("unknown container kind {}", k))),
    };
    let count = r.u32()? as usize;
    let _reserved = r.u32()?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let index = r.u16()? as usize;
        let len = r.u64()?;
        let len = usize::try_from(len).map_err(|_| Error::Malformed("record too large".into()))?;
        records.push((index, r.take(len)?));
    }
    if !r.rest().is_empty() {
        return Err(Error::Malformed(format!("{} trailing bytes after records", r.rest().len())));
    }
    Ok((kind, records))
}

fn split_tensors<S: Scalar>(layer: usize, shapes: &[Vec<usize>], data: &[u8]) -> Result<Vec<Tensor<S>>> {
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if data.len() != expected * BYTES_PER_PARAM as usize {
        return Err(Error::Malformed(format!(
            "layer {} record holds {} bytes, expected {}",
            layer,
            data.len(),
            expected * BYTES_PER_PARAM as usize
        )));
    }
    let mut values = data
        .chunks_exact(4)
        .map(|c| S::from_f32(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))));
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::from_vec(s, values.by_ref().take(n).collect())
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { needed: n, available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;
    use crate::seed::{stream_rng, Stream};
    use alloc::vec;

    fn small() -> Model<f32> {
        let arch = Architecture::new(
            "small",
            vec![3],
            vec![LayerSpec::Dense { units: 4 }, LayerSpec::Relu, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
        );
        Model::new(arch, &mut stream_rng(1, Stream::ModelInit, 0, 0)).unwrap()
    }

    #[test]
    fn one_is_encoded_as_ieee754_little_endian() {
        let arch = Architecture::new("one", vec![1], vec![LayerSpec::Dense { units: 1 }]);
        let model = Model::<f32>::from_params(
            arch,
            vec![vec![Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(), Tensor::zeros(&[1])]],
        )
        .unwrap();
        let bytes = serialize_model(&model);
        let data = HEADER_LEN + RECORD_HEADER_LEN;
        assert_eq!(&bytes[data..data + 4], &[0x00, 0x00, 0x80, 0x3F]);
        assert_eq!(bytes.len() as u64, container_len(1, 2));
    }

    #[test]
    fn truncated_input_is_rejected() {
        let bytes = serialize_model(&small());
        let err = deserialize_model::<f32>(small().arch(), &bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
        // Cut inside the records, with a trailer that no longer matches.
        let err = deserialize_model::<f32>(small().arch(), &bytes[..bytes.len() - 9]).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }));
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = serialize_model(&small());
        bytes[HEADER_LEN + RECORD_HEADER_LEN + 2] ^= 0x40;
        assert!(matches!(deserialize_model::<f32>(small().arch(), &bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn wrong_version_and_magic_are_rejected() {
        let mut bytes = serialize_model(&small());
        bytes[4] = 9;
        assert_eq!(deserialize_model::<f32>(small().arch(), &bytes).unwrap_err(), Error::Version(9));
        bytes[0] = b'X';
        assert_eq!(deserialize_model::<f32>(small().arch(), &bytes).unwrap_err(), Error::BadMagic);
    }

    #[test]
    fn partial_update_records_must_cover_units() {
        let model = small();
        let mut layers = BTreeMap::new();
        layers.insert(2, model.layer_params(2).to_vec());
        let update = PartialUpdate {
            round: 3,
            client_id: 5,
            trained: FreezeMask::from_units([1]),
            layers,
            sample_count: 17,
            loss: 0.25,
            accuracy: 90.0,
        };
        let bytes = encode_partial_update(&update);
        assert_eq!(decode_partial_update(&model, &bytes).unwrap(), update);
        assert_eq!(
            bytes.len() as u64,
            UPDATE_META_LEN as u64 + container_len(1, model.units()[1].param_count)
        );
        assert_eq!(payload_tensor_bytes(&bytes, true).unwrap(), update.tensor_bytes());
        assert_eq!(payload_tensor_bytes(&serialize_model(&model), false).unwrap(), 4 * model.param_count());
    }
}
