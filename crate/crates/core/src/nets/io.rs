use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{parse_pairs, ArchSpec};
use super::models::Network;
use crate::error::{Error, Result};
use crate::tensor::{snapshot, Tensor};

pub const HEADER_RECORD: &str = "#header";

/// Decoded model header: kind, architecture and extra metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHeader {
    pub kind: String,
    pub spec: ArchSpec,
    pub entries: Vec<(String, String)>,
}

impl ModelHeader {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Which trainer produced the model (e.g. `fader`, `vanilla`), if recorded.
    pub fn provenance(&self) -> Option<&str> {
        self.get("provenance")
    }
}

fn header_text<M: Network>(model: &M, provenance: Option<&str>) -> String {
    let mut text = format!("kind={}\n", M::KIND);
    if let Some(p) = provenance {
        text.push_str(&format!("provenance={p}\n"));
    }
    for (k, v) in model.header_entries() {
        text.push_str(&format!("{k}={v}\n"));
    }
    text + &model.spec().to_text()
}

fn stat_names(i: usize) -> [String; 2] {
    [format!("bn_state.{i}.running_mean"), format!("bn_state.{i}.running_var")]
}

/// Serializes a model: the header record, every parameter, then the
/// batchnorm running statistics.
pub fn encode_model<M: Network>(model: &M, provenance: Option<&str>) -> Vec<u8> {
    let text = header_text(model, provenance);
    let header = Tensor::new(vec![text.len()], text.bytes().map(f32::from).collect())
        .expect("header length matches");
    let mut owned: Vec<(String, Tensor)> = vec![(HEADER_RECORD.into(), header)];
    for (i, s) in model.bn_states().iter().enumerate() {
        let [m, v] = stat_names(i);
        owned.push((m, Tensor::new(vec![s.running_mean.len()], s.running_mean.clone()).unwrap()));
        owned.push((v, Tensor::new(vec![s.running_var.len()], s.running_var.clone()).unwrap()));
    }
    let mut records: Vec<(String, &Tensor)> = vec![(owned[0].0.clone(), &owned[0].1)];
    records.extend(model.parameters());
    records.extend(owned[1..].iter().map(|(n, t)| (n.clone(), t)));
    snapshot::encode(&records)
}

fn format_error(message: impl Into<String>) -> Error {
    Error::Format {
        offset: 0,
        message: message.into(),
    }
}

pub fn decode_header(record: &Tensor) -> Result<ModelHeader> {
    let bytes = record
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(format_error("header record holds a non-byte value"))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    let text = String::from_utf8(bytes).map_err(|_| format_error("header is not UTF-8"))?;
    let mut entries = parse_pairs(&text)?;
    let spec = ArchSpec::from_text(&text)?;
    let spec_keys = parse_pairs(&spec.to_text())?;
    entries.retain(|(k, _)| !spec_keys.iter().any(|(s, _)| s == k));
    let kind = entries
        .iter()
        .position(|(k, _)| k == "kind")
        .map(|i| entries.remove(i).1)
        .ok_or_else(|| format_error("header lacks kind"))?;
    Ok(ModelHeader { kind, spec, entries })
}

/// Inverse of [`encode_model`]. Every record must be consumed and match the
/// architecture's shapes; otherwise nothing is returned.
pub fn decode_model<M: Network>(bytes: &[u8]) -> Result<(M, ModelHeader)> {
    let records = snapshot::decode(bytes)?;
    let mut it = records.into_iter();
    let (name, head) = it.next().ok_or_else(|| format_error("empty model file"))?;
    if name != HEADER_RECORD {
        return Err(format_error(format!("first record is {name:?}, expected {HEADER_RECORD:?}")));
    }
    let header = decode_header(&head)?;
    if header.kind != M::KIND {
        return Err(format_error(format!("file holds a {}, expected a {}", header.kind, M::KIND)));
    }
    let mut model = M::from_header(&header.spec, &header.entries, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    for (expected, slot) in names.iter().zip(model.parameters_mut()) {
        let (name, t) = it.next().ok_or_else(|| format_error(format!("missing record {expected:?}")))?;
        if &name != expected || t.shape() != slot.shape() {
            return Err(format_error(format!(
                "record {name:?} {:?} does not match expected {expected:?} {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    for (i, state) in model.bn_states_mut().iter_mut().enumerate() {
        for (expected, slot) in stat_names(i).iter().zip([&mut state.running_mean, &mut state.running_var]) {
            let (name, t) = it.next().ok_or_else(|| format_error(format!("missing record {expected:?}")))?;
            if &name != expected || t.shape() != [slot.len()] {
                return Err(format_error(format!("record {name:?} does not match expected {expected:?}")));
            }
            slot.copy_from_slice(t.data());
        }
    }
    if let Some((name, _)) = it.next() {
        return Err(format_error(format!("unexpected trailing record {name:?}")));
    }
    Ok((model, header))
}

pub fn save_model<M: Network>(model: &M, path: impl AsRef<Path>, provenance: Option<&str>) -> Result<()> {
    std::fs::write(path, encode_model(model, provenance))?;
    Ok(())
}

pub fn load_model<M: Network>(path: impl AsRef<Path>) -> Result<(M, ModelHeader)> {
    decode_model(&std::fs::read(path)?)
}

/// Reads only the header of a model file.
pub fn read_header(path: impl AsRef<Path>) -> Result<ModelHeader> {
    let records = snapshot::decode(&std::fs::read(path)?)?;
    match records.first() {
        Some((name, t)) if name == HEADER_RECORD => decode_header(t),
        _ => Err(format_error("model file lacks a header record")),
    }
}
