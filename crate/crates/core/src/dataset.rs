//! Offline transition data, state normalization, and the `PAOD` binary format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "PAOD" | version: u32 = 1 | json_len: u32 | metadata JSON (json_len bytes)
//!        | f32 arrays in metadata.field_order
//! ```
//!
//! The default field order is states (n x d_s), actions (n x d_a), rewards (n),
//! next_states (n x d_s), terminals (n, stored as 0.0 / 1.0).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PAOD";
pub const VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub terminal: bool,
}

/// Column names accepted in `field_order`.
pub const DEFAULT_FIELD_ORDER: [&str; 5] = ["states", "actions", "rewards", "next_states", "terminals"];

/// Columnar transition store plus the metadata needed to evaluate policies on it.
///
/// Stored states are always expressed relative to `state_mean` / `state_std`; a
/// dataset that was never normalized carries mean 0 and std 1.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub env_id: String,
    d_s: usize,
    d_a: usize,
    pub action_low: Vec<f32>,
    pub action_high: Vec<f32>,
    pub state_mean: Vec<f32>,
    pub state_std: Vec<f32>,
    pub ref_random_score: f64,
    pub ref_expert_score: f64,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    terminals: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    env_id: String,
    d_s: usize,
    d_a: usize,
    n: usize,
    action_low: Vec<f32>,
    action_high: Vec<f32>,
    state_mean: Vec<f32>,
    state_std: Vec<f32>,
    ref_random_score: f64,
    ref_expert_score: f64,
    field_order: Vec<String>,
}

/// Everything except the transitions.
#[derive(Debug, Clone)]
pub struct DatasetInfo {
    pub env_id: String,
    pub d_s: usize,
    pub d_a: usize,
    pub action_low: Vec<f32>,
    pub action_high: Vec<f32>,
    pub ref_random_score: f64,
    pub ref_expert_score: f64,
}

impl OfflineDataset {
    /// Builds a raw (unnormalized) dataset and checks every invariant.
    pub fn from_transitions(info: DatasetInfo, transitions: &[Transition]) -> Result<Self> {
        let n = transitions.len();
        let mut ds = OfflineDataset {
            env_id: info.env_id,
            d_s: info.d_s,
            d_a: info.d_a,
            action_low: info.action_low,
            action_high: info.action_high,
            state_mean: vec![0.0; info.d_s],
            state_std: vec![1.0; info.d_s],
            ref_random_score: info.ref_random_score,
            ref_expert_score: info.ref_expert_score,
            states: Vec::with_capacity(n * info.d_s),
            actions: Vec::with_capacity(n * info.d_a),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * info.d_s),
            terminals: Vec::with_capacity(n),
        };
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != ds.d_s || t.next_state.len() != ds.d_s || t.action.len() != ds.d_a {
                return Err(Error::InvalidInput(format!("transition {i} has inconsistent dimensions")));
            }
            ds.states.extend_from_slice(&t.state);
            ds.actions.extend_from_slice(&t.action);
            ds.rewards.push(t.reward);
            ds.next_states.extend_from_slice(&t.next_state);
            ds.terminals.push(if t.terminal { 1.0 } else { 0.0 });
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        if self.d_s == 0 || self.d_a == 0 {
            return Err(Error::InvalidInput("d_s and d_a must be positive".into()));
        }
        if self.action_low.len() != self.d_a || self.action_high.len() != self.d_a {
            return Err(Error::InvalidInput("action bounds must have length d_a".into()));
        }
        if self.state_mean.len() != self.d_s || self.state_std.len() != self.d_s {
            return Err(Error::InvalidInput("state statistics must have length d_s".into()));
        }
        if self.state_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("state_std must be strictly positive".into()));
        }
        if !(self.ref_expert_score > self.ref_random_score) {
            return Err(Error::InvalidInput(format!(
                "ref_expert_score ({}) must exceed ref_random_score ({})",
                self.ref_expert_score, self.ref_random_score
            )));
        }
        let sizes = [
            (self.states.len(), n * self.d_s),
            (self.actions.len(), n * self.d_a),
            (self.next_states.len(), n * self.d_s),
            (self.terminals.len(), n),
        ];
        if sizes.iter().any(|(a, b)| a != b) {
            return Err(Error::InvalidInput("column lengths disagree".into()));
        }
        for (i, a) in self.actions.chunks(self.d_a).enumerate() {
            for j in 0..self.d_a {
                if !(a[j] >= self.action_low[j] && a[j] <= self.action_high[j]) {
                    return Err(Error::InvalidInput(format!(
                        "action {i} component {j} = {} outside [{}, {}]",
                        a[j], self.action_low[j], self.action_high[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.d_s..(i + 1) * self.d_s]
    }

    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.next_states[i * self.d_s..(i + 1) * self.d_s]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * self.d_a..(i + 1) * self.d_a]
    }

    pub fn reward(&self, i: usize) -> f32 {
        self.rewards[i]
    }

    pub fn terminal(&self, i: usize) -> bool {
        self.terminals[i] != 0.0
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.state(i).to_vec(),
            action: self.action(i).to_vec(),
            reward: self.reward(i),
            next_state: self.next_state(i).to_vec(),
            terminal: self.terminal(i),
        }
    }

    pub fn states(&self) -> &[f32] {
        &self.states
    }

    pub fn actions(&self) -> &[f32] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f32] {
        &self.rewards
    }

    /// Maps a raw environment observation into the stored state space.
    pub fn normalize_obs(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(&x, (&m, &s))| (x - m as f64) / s as f64)
            .collect()
    }

    /// Inverse of [`OfflineDataset::normalize_obs`].
    pub fn denormalize_obs(&self, stored: &[f64]) -> Vec<f64> {
        stored
            .iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(&x, (&m, &s))| x * s as f64 + m as f64)
            .collect()
    }

    /// States (and next states) in raw environment units.
    pub fn raw_states(&self) -> Vec<f32> {
        let d = self.d_s;
        self.states
            .iter()
            .enumerate()
            .map(|(i, &x)| (x as f64 * self.state_std[i % d] as f64 + self.state_mean[i % d] as f64) as f32)
            .collect()
    }
}

/// Z-scores states and next states with statistics computed over the dataset's
/// states in raw units. Dimensions with std below [`STD_FLOOR`] are floored and
/// logged. Idempotent up to rounding.
pub fn normalize_states(mut ds: OfflineDataset) -> OfflineDataset {
    let d = ds.d_s;
    let n = ds.len();
    let raw = ds.raw_states();
    let raw_next: Vec<f32> = ds
        .next_states
        .iter()
        .enumerate()
        .map(|(i, &x)| (x as f64 * ds.state_std[i % d] as f64 + ds.state_mean[i % d] as f64) as f32)
        .collect();

    let mut mean = vec![0.0f64; d];
    for row in raw.chunks(d) {
        for j in 0..d {
            mean[j] += row[j] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; d];
    for row in raw.chunks(d) {
        for j in 0..d {
            let c = row[j] as f64 - mean[j];
            var[j] += c * c;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (v / n as f64).sqrt();
            if s < STD_FLOOR {
                log::warn!("state dimension {j} has std {s:.3e}; flooring at {STD_FLOOR}");
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();

    let apply = |src: &[f32]| -> Vec<f32> {
        src.iter()
            .enumerate()
            .map(|(i, &x)| ((x as f64 - mean[i % d]) / std[i % d]) as f32)
            .collect()
    };
    ds.states = apply(&raw);
    ds.next_states = apply(&raw_next);
    ds.state_mean = mean.iter().map(|&m| m as f32).collect();
    ds.state_std = std.iter().map(|&s| s as f32).collect();
    ds
}

fn push_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    buf.reserve(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a dataset to bytes in the `PAOD` layout.
pub fn encode(ds: &OfflineDataset) -> Result<Vec<u8>> {
    let meta = Metadata {
        env_id: ds.env_id.clone(),
        d_s: ds.d_s,
        d_a: ds.d_a,
        n: ds.len(),
        action_low: ds.action_low.clone(),
        action_high: ds.action_high.clone(),
        state_mean: ds.state_mean.clone(),
        state_std: ds.state_std.clone(),
        ref_random_score: ds.ref_random_score,
        ref_expert_score: ds.ref_expert_score,
        field_order: DEFAULT_FIELD_ORDER.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(12 + json.len() + ds.payload_floats() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    push_f32s(&mut buf, &ds.states);
    push_f32s(&mut buf, &ds.actions);
    push_f32s(&mut buf, &ds.rewards);
    push_f32s(&mut buf, &ds.next_states);
    push_f32s(&mut buf, &ds.terminals);
    Ok(buf)
}

impl OfflineDataset {
    /// Number of f32 values in the payload.
    pub fn payload_floats(&self) -> usize {
        self.len() * (2 * self.d_s + self.d_a + 2)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(Error::Truncated {
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

/// Parses the fixed header and metadata of a container with the given magic.
/// Returns the metadata bytes and the payload offset.
pub(crate) fn parse_header<'a>(bytes: &'a [u8], magic: [u8; 4], version: u32) -> Result<(&'a [u8], usize)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let v = read_u32(bytes, 4)?;
    if v != version {
        return Err(Error::VersionMismatch {
            expected: version,
            found: v,
        });
    }
    let json_len = read_u32(bytes, 8)? as usize;
    let end = 12 + json_len;
    if bytes.len() < end {
        return Err(Error::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok((&bytes[12..end], end))
}

pub(crate) fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<OfflineDataset> {
    let (json, offset) = parse_header(bytes, MAGIC, VERSION)?;
    let meta: Metadata = serde_json::from_slice(json)?;
    let mut sorted = meta.field_order.clone();
    sorted.sort();
    let mut expected_fields: Vec<String> = DEFAULT_FIELD_ORDER.iter().map(|s| s.to_string()).collect();
    expected_fields.sort();
    if sorted != expected_fields {
        return Err(Error::Metadata(format!("field_order {:?} is not a permutation of the five columns", meta.field_order)));
    }
    let n = meta.n;
    let width = |name: &str| match name {
        "states" | "next_states" => meta.d_s,
        "actions" => meta.d_a,
        _ => 1,
    };
    let total: usize = meta.field_order.iter().map(|f| n * width(f)).sum();
    let expected = offset + total * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Metadata(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let mut columns = std::collections::HashMap::new();
    let mut at = offset;
    for f in &meta.field_order {
        let len = n * width(f) * 4;
        columns.insert(f.as_str(), f32s_from_le(&bytes[at..at + len]));
        at += len;
    }
    let ds = OfflineDataset {
        env_id: meta.env_id.clone(),
        d_s: meta.d_s,
        d_a: meta.d_a,
        action_low: meta.action_low.clone(),
        action_high: meta.action_high.clone(),
        state_mean: meta.state_mean.clone(),
        state_std: meta.state_std.clone(),
        ref_random_score: meta.ref_random_score,
        ref_expert_score: meta.ref_expert_score,
        states: columns.remove("states").unwrap(),
        actions: columns.remove("actions").unwrap(),
        rewards: columns.remove("rewards").unwrap(),
        next_states: columns.remove("next_states").unwrap(),
        terminals: columns.remove("terminals").unwrap(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ds)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(d_s: usize, d_a: usize) -> DatasetInfo {
        DatasetInfo {
            env_id: "test".into(),
            d_s,
            d_a,
            action_low: vec![-1.0; d_a],
            action_high: vec![1.0; d_a],
            ref_random_score: 0.0,
            ref_expert_score: 1.0,
        }
    }

    fn tr(s: &[f32], a: &[f32]) -> Transition {
        Transition {
            state: s.to_vec(),
            action: a.to_vec(),
            reward: 0.5,
            next_state: s.iter().map(|x| x + 1.0).collect(),
            terminal: false,
        }
    }

    #[test]
    fn constant_states_normalize_to_zero() {
        let ts: Vec<_> = (0..5).map(|_| tr(&[3.0, -2.0], &[0.0])).collect();
        let ds = normalize_states(OfflineDataset::from_transitions(info(2, 1), &ts).unwrap());
        assert!(ds.states().iter().all(|&x| x == 0.0));
        assert_eq!(ds.state_std, vec![STD_FLOOR as f32; 2]);
    }

    #[test]
    fn symmetric_pair_is_unchanged() {
        let ts = vec![tr(&[-1.0], &[0.0]), tr(&[1.0], &[0.0])];
        let ds = normalize_states(OfflineDataset::from_transitions(info(1, 1), &ts).unwrap());
        assert_eq!(ds.states(), &[-1.0, 1.0]);
        assert_eq!(ds.state_mean, vec![0.0]);
        assert_eq!(ds.state_std, vec![1.0]);
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(OfflineDataset::from_transitions(info(1, 1), &[]).is_err());
        assert!(OfflineDataset::from_transitions(info(1, 1), &[tr(&[0.0], &[1.5])]).is_err());
        assert!(OfflineDataset::from_transitions(info(1, 1), &[tr(&[0.0, 1.0], &[0.0])]).is_err());
        let mut bad = info(1, 1);
        bad.ref_expert_score = bad.ref_random_score;
        assert!(OfflineDataset::from_transitions(bad, &[tr(&[0.0], &[0.0])]).is_err());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let ds = OfflineDataset::from_transitions(info(1, 1), &[tr(&[0.0], &[0.0])]).unwrap();
        let bytes = encode(&ds).unwrap();

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::BadMagic { .. })));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(decode(&version), Err(Error::VersionMismatch { found: 2, .. })));

        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(short), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&bytes[..2]), Err(Error::Truncated { .. })));
    }
}
