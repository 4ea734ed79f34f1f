//! Binary checkpoints, experience files and task manifests.
//!
//! Checkpoint layout, all little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic, `COMPSPOL` or `COMPSVAL` |
//! | 4 | `u32` number of layer dims |
//! | 8 each | `u64` layer dims, input first |
//! | 8 | `u64` parameter count |
//! | 8 each | `f64` parameters |
//!
//! A policy's parameters are the mean network's followed by the log standard
//! deviations. Experience files (`COMPSEXP`) hold a length-prefixed text
//! header and then every finalized task's skilled and off-policy sets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use comps_core::buffer::ExperienceStore;
use comps_core::env::{Family, SequenceMode, Step, TaskSpec, Trajectory, DEFAULT_DISCOUNT};
use comps_core::nn::{Activation, GaussianPolicy, Mlp, MlpSpec, ParamVector};

use crate::error::{Error, Result};

pub const POLICY_MAGIC: &[u8; 8] = b"COMPSPOL";
pub const VALUE_MAGIC: &[u8; 8] = b"COMPSVAL";
pub const EXPERIENCE_MAGIC: &[u8; 8] = b"COMPSEXP";

// Guards allocations when reading a corrupt length.
const MAX_LEN: u64 = 1 << 28;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(format!("io: {e}"))
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_len<W: Write>(w: &mut W, v: usize) -> Result<()> {
    put_u64(w, v as u64)
}

fn put_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
    Ok(buf)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let v = u64::from_le_bytes(get(r)?);
    if v > MAX_LEN {
        return Err(Error::Format(format!("{what} of {v} is implausibly large")));
    }
    Ok(v as usize)
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(get(r)?))).collect()
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let found: [u8; 8] = get(r)?;
    if &found != magic {
        return Err(Error::Format(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        )));
    }
    Ok(())
}

fn write_params<W: Write>(w: &mut W, magic: &[u8; 8], spec: &MlpSpec, params: &[f64]) -> Result<()> {
    if spec.activation != Activation::Tanh {
        return Err(Error::Format("only tanh networks can be checkpointed".into()));
    }
    w.write_all(magic).map_err(io_err)?;
    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.hidden_dims);
    dims.push(spec.output_dim);
    put_u32(w, dims.len() as u32)?;
    for d in dims {
        put_len(w, d)?;
    }
    put_len(w, params.len())?;
    put_f64s(w, params)
}

fn read_params<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<(MlpSpec, Vec<f64>)> {
    expect_magic(r, magic)?;
    let ndims = get_u32(r)? as usize;
    if !(2..=64).contains(&ndims) {
        return Err(Error::Format(format!("{ndims} layer dims")));
    }
    let dims = (0..ndims)
        .map(|_| get_len(r, "layer width"))
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(dims[0], &dims[1..ndims - 1], dims[ndims - 1])?;
    let len = get_len(r, "parameter count")?;
    let params = get_f64s(r, len)?;
    Ok((spec, params))
}

pub fn write_value<W: Write>(mut w: W, value: &Mlp) -> Result<()> {
    write_params(&mut w, VALUE_MAGIC, value.spec(), value.params())
}

pub fn read_value<R: Read>(mut r: R) -> Result<Mlp> {
    let (spec, params) = read_params(&mut r, VALUE_MAGIC)?;
    Ok(Mlp::new(spec, ParamVector::from_vec(params)?)?)
}

pub fn write_policy<W: Write>(mut w: W, policy: &GaussianPolicy) -> Result<()> {
    write_params(&mut w, POLICY_MAGIC, policy.mean_net().spec(), &policy.flat())
}

pub fn read_policy<R: Read>(mut r: R) -> Result<GaussianPolicy> {
    let (spec, params) = read_params(&mut r, POLICY_MAGIC)?;
    let split = spec.param_count();
    if params.len() != split + spec.output_dim {
        return Err(Error::Format(format!(
            "policy needs {} parameters, file has {}",
            split + spec.output_dim,
            params.len()
        )));
    }
    let mean = Mlp::new(spec, ParamVector::from_vec(params[..split].to_vec())?)?;
    Ok(GaussianPolicy::new(mean, params[split..].to_vec())?)
}

pub fn save_policy(path: &Path, policy: &GaussianPolicy) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_policy(&mut w, policy)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<GaussianPolicy> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_policy(BufReader::new(file))
}

pub fn save_value(path: &Path, value: &Mlp) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_value(&mut w, value)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_value(path: &Path) -> Result<Mlp> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_value(BufReader::new(file))
}

fn write_trajectory<W: Write>(w: &mut W, t: &Trajectory) -> Result<()> {
    let (sd, ad) = t
        .steps
        .first()
        .map(|s| (s.state.len(), s.action.len()))
        .unwrap_or((0, 0));
    put_len(w, t.task_id)?;
    put_len(w, t.steps.len())?;
    put_len(w, sd)?;
    put_len(w, ad)?;
    for s in &t.steps {
        if s.state.len() != sd || s.action.len() != ad {
            return Err(Error::Format("ragged trajectory".into()));
        }
        put_f64s(w, &s.state)?;
        put_f64s(w, &s.action)?;
        put_f64s(w, &[s.reward, s.behavior_log_prob])?;
        w.write_all(&[s.done as u8]).map_err(io_err)?;
    }
    Ok(())
}

fn read_trajectory<R: Read>(r: &mut R) -> Result<Trajectory> {
    let task_id = get_len(r, "task id")?;
    let n = get_len(r, "trajectory length")?;
    let sd = get_len(r, "state dim")?;
    let ad = get_len(r, "action dim")?;
    let mut steps = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let state = get_f64s(r, sd)?;
        let action = get_f64s(r, ad)?;
        let tail = get_f64s(r, 2)?;
        let [done] = get::<1, R>(r)?;
        if done > 1 {
            return Err(Error::Format(format!("bad done flag {done}")));
        }
        steps.push(Step {
            state,
            action,
            reward: tail[0],
            behavior_log_prob: tail[1],
            done: done == 1,
        });
    }
    Ok(Trajectory::new(task_id, steps))
}

/// Writes every finalized task of `store`. `header` is free text, e.g. the
/// manifest it belongs to and the seed.
pub fn write_experience<W: Write>(mut w: W, header: &str, store: &ExperienceStore) -> Result<()> {
    w.write_all(EXPERIENCE_MAGIC).map_err(io_err)?;
    put_len(&mut w, header.len())?;
    w.write_all(header.as_bytes()).map_err(io_err)?;
    let tasks: Vec<usize> = store.finalized_tasks().collect();
    put_len(&mut w, tasks.len())?;
    for task in tasks {
        put_len(&mut w, task)?;
        put_len(&mut w, store.episode_count(task))?;
        let skilled = store.skilled(task);
        put_len(&mut w, skilled.len())?;
        for t in skilled {
            write_trajectory(&mut w, t)?;
        }
        let off = store.offpolicy(task);
        put_len(&mut w, off.len())?;
        for t in off {
            write_trajectory(&mut w, t)?;
        }
    }
    Ok(())
}

pub fn read_experience<R: Read>(mut r: R) -> Result<(String, ExperienceStore)> {
    expect_magic(&mut r, EXPERIENCE_MAGIC)?;
    let hlen = get_len(&mut r, "header length")?;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    let header = String::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let n = get_len(&mut r, "task count")?;
    let mut tasks = Vec::new();
    for _ in 0..n {
        let task = get_len(&mut r, "task id")?;
        let episodes = get_len(&mut r, "episode count")?;
        let ns = get_len(&mut r, "skilled count")?;
        let skilled = (0..ns).map(|_| read_trajectory(&mut r)).collect::<Result<Vec<_>>>()?;
        let no = get_len(&mut r, "off-policy count")?;
        let off = (0..no).map(|_| read_trajectory(&mut r)).collect::<Result<Vec<_>>>()?;
        tasks.push((task, episodes, skilled, off));
    }
    Ok((header, ExperienceStore::from_finalized(tasks)?))
}

pub fn save_experience(path: &Path, header: &str, store: &ExperienceStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_experience(&mut w, header, store)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_experience(path: &Path) -> Result<(String, ExperienceStore)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_experience(BufReader::new(file))
}

pub const MANIFEST_HEADER: [&str; 6] = ["family", "mode", "index", "param", "threshold", "horizon"];

/// One row per task, in sequence order.
pub fn write_manifest<W: Write>(out: W, mode: SequenceMode, tasks: &[TaskSpec]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(MANIFEST_HEADER)?;
    for (i, t) in tasks.iter().enumerate() {
        w.write_record([
            t.family.name().to_string(),
            mode.name().to_string(),
            i.to_string(),
            t.param.to_string(),
            t.success_threshold.to_string(),
            t.horizon.to_string(),
        ])?;
    }
    w.flush().map_err(io_err)
}

pub fn read_manifest<R: Read>(input: R) -> Result<(SequenceMode, Vec<TaskSpec>)> {
    let mut rdr = csv::Reader::from_reader(input);
    if rdr.headers()?.iter().ne(MANIFEST_HEADER) {
        return Err(Error::Format("not a task manifest".into()));
    }
    let mut mode = None;
    let mut tasks = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |j: usize| row.get(j).unwrap_or("");
        let bad = |j: usize| Error::Format(format!("row {}: bad {} `{}`", i + 1, MANIFEST_HEADER[j], field(j)));
        let family: Family = field(0).parse().map_err(|_| bad(0))?;
        let m: SequenceMode = field(1).parse().map_err(|_| bad(1))?;
        if *mode.get_or_insert(m) != m {
            return Err(bad(1));
        }
        if field(2).parse::<usize>().ok() != Some(i) {
            return Err(bad(2));
        }
        let param = field(3).parse().map_err(|_| bad(3))?;
        let threshold = field(4).parse().map_err(|_| bad(4))?;
        let horizon = field(5).parse().map_err(|_| bad(5))?;
        tasks.push(TaskSpec::new(family, param, horizon, threshold, DEFAULT_DISCOUNT)?);
    }
    let mode = mode.ok_or_else(|| Error::Format("manifest has no tasks".into()))?;
    Ok((mode, tasks))
}
