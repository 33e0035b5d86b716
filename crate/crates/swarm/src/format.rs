//! Text encodings of everything written to disk or sent between processes.
//!
//! Every record is one line of space-separated `key=value` fields in a fixed
//! order, introduced by a tag word and terminated by `\n`. Reals are written
//! as the 16 lowercase hex digits of their IEEE-754 bits so that parsing is
//! exact; lists are comma-separated; digests and keys are lowercase hex.

use std::fmt::Write as _;

use swarm_core::crypto::{hex_decode, hex_encode, Address, Digest};
use swarm_core::ledger::{EventKind, LedgerEvent};
use swarm_core::rollout::{FileHeader, RolloutFile, RolloutRecord};
use swarm_core::shardcast::Manifest;
use swarm_core::tasks::Task;
use swarm_core::trainer::TrainMetrics;
use swarm_core::validate::{FailedCheck, Verdict};
use swarm_core::TokenId;

use crate::error::{parse_err, Result};

pub fn f64_hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

pub fn parse_f64_hex(s: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(parse_err(format!("real {s:?} is not 16 hex digits")));
    }
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| parse_err(format!("bad real {s:?}")))
}

fn join<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(",")
}

fn split_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(f).collect()
}

fn parse_u64(s: &str) -> Result<u64> {
    s.parse().map_err(|_| parse_err(format!("bad integer {s:?}")))
}

fn parse_token(s: &str) -> Result<TokenId> {
    s.parse().map_err(|_| parse_err(format!("bad token {s:?}")))
}

fn parse_digest(s: &str) -> Result<Digest> {
    hex_decode::<32>(s).map_err(|_| parse_err(format!("bad digest {s:?}")))
}

fn parse_address(s: &str) -> Result<Address> {
    Address::from_hex(s).map_err(|_| parse_err(format!("bad address {s:?}")))
}

/// Splits `tag k1=v1 k2=v2 ...` and checks tag and key order. The last key
/// may be `*`-suffixed to take the rest of the line verbatim.
pub fn fields<'a>(line: &'a str, tag: &str, keys: &[&str]) -> Result<Vec<&'a str>> {
    let rest = line.strip_prefix(tag).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| parse_err(format!("expected {tag:?} record")))?;
    let mut out = Vec::with_capacity(keys.len());
    let mut rest = rest;
    for (i, key) in keys.iter().enumerate() {
        let (key, greedy) = match key.strip_suffix('*') {
            Some(k) => (k, true),
            None => (*key, false),
        };
        let body = rest
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| parse_err(format!("{tag}: expected field {key:?}")))?;
        let last = i + 1 == keys.len();
        let (value, next) = if greedy {
            (body, "")
        } else if last {
            if body.contains(' ') {
                return Err(parse_err(format!("{tag}: trailing data after {key:?}")));
            }
            (body, "")
        } else {
            body.split_once(' ').ok_or_else(|| parse_err(format!("{tag}: record ends after {key:?}")))?
        };
        out.push(value);
        rest = next;
    }
    Ok(out)
}

/// Lines of `text`, each of which must be `\n`-terminated.
pub fn lines(text: &str) -> Result<Vec<&str>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').ok_or_else(|| parse_err("last line is not terminated"))?;
    Ok(body.split('\n').collect())
}

// Dataset.

pub fn task_line(t: &Task) -> String {
    format!(
        "task id={} prompt={} answer={} l_target={}\n",
        t.task_id,
        join(&t.prompt_tokens, u32::to_string),
        join(&t.target_answer, u32::to_string),
        t.l_target
    )
}

pub fn parse_task(line: &str) -> Result<Task> {
    let f = fields(line, "task", &["id", "prompt", "answer", "l_target"])?;
    Ok(Task {
        task_id: parse_u64(f[0])?,
        prompt_tokens: split_list(f[1], parse_token)?,
        target_answer: split_list(f[2], parse_token)?,
        l_target: f[3].parse().map_err(|_| parse_err("bad l_target"))?,
    })
}

pub fn encode_dataset(tasks: &[Task]) -> String {
    tasks.iter().map(task_line).collect()
}

pub fn parse_dataset(text: &str) -> Result<Vec<Task>> {
    lines(text)?.into_iter().map(parse_task).collect()
}

// Rollout files.

const HEADER_KEYS: [&str; 6] = ["schema", "node", "step", "submission", "records", "signature"];
const RECORD_KEYS: [&str; 12] =
    ["task", "version", "node", "step", "submission", "tokens", "probs", "commitments", "eos", "r_task", "r_total", "advantage"];

pub fn encode_rollout_file(file: &RolloutFile) -> String {
    let h = &file.header;
    let mut out = format!(
        "rollout schema={} node={} step={} submission={} records={} signature={}\n",
        h.schema_version,
        h.node_address.to_hex(),
        h.step,
        h.submission_index,
        file.records.len(),
        hex_encode(&h.signature)
    );
    for r in &file.records {
        let _ = writeln!(
            out,
            "record task={} version={} node={} step={} submission={} tokens={} probs={} commitments={} eos={} r_task={} r_total={} advantage={}",
            r.task_id,
            r.checkpoint_version,
            r.node_address.to_hex(),
            r.step,
            r.submission_index,
            join(&r.output_tokens, u32::to_string),
            join(&r.chosen_probs, |p| f64_hex(*p)),
            join(&r.commitments, |d| hex_encode(d)),
            r.eos_prob_at_end.map_or_else(|| "none".into(), f64_hex),
            f64_hex(r.r_task),
            f64_hex(r.r_total),
            f64_hex(r.advantage),
        );
    }
    out
}

fn parse_record(line: &str) -> Result<RolloutRecord> {
    let f = fields(line, "record", &RECORD_KEYS)?;
    Ok(RolloutRecord {
        task_id: parse_u64(f[0])?,
        checkpoint_version: parse_u64(f[1])?,
        node_address: parse_address(f[2])?,
        step: parse_u64(f[3])?,
        submission_index: parse_u64(f[4])?,
        output_tokens: split_list(f[5], parse_token)?,
        chosen_probs: split_list(f[6], parse_f64_hex)?,
        commitments: split_list(f[7], parse_digest)?,
        eos_prob_at_end: if f[8] == "none" { None } else { Some(parse_f64_hex(f[8])?) },
        r_task: parse_f64_hex(f[9])?,
        r_total: parse_f64_hex(f[10])?,
        advantage: parse_f64_hex(f[11])?,
    })
}

/// Parses a rollout file. Any failure here is a schema violation.
pub fn parse_rollout_file(text: &str) -> Result<RolloutFile> {
    let ls = lines(text)?;
    let (head, body) = ls.split_first().ok_or_else(|| parse_err("empty rollout file"))?;
    let f = fields(head, "rollout", &HEADER_KEYS)?;
    let count = parse_u64(f[4])? as usize;
    if count != body.len() {
        return Err(parse_err(format!("header announces {count} records, found {}", body.len())));
    }
    let header = FileHeader {
        schema_version: f[0].parse().map_err(|_| parse_err("bad schema version"))?,
        node_address: parse_address(f[1])?,
        step: parse_u64(f[2])?,
        submission_index: parse_u64(f[3])?,
        signature: hex_decode::<64>(f[5]).map_err(|_| parse_err("bad signature"))?,
    };
    let records = body.iter().map(|l| parse_record(l)).collect::<Result<_>>()?;
    Ok(RolloutFile { header, records })
}

// Verdicts.

pub fn verdict_line(v: &Verdict) -> String {
    let details: String = v.details.chars().map(|c| if c == '\n' { ' ' } else { c }).collect();
    format!(
        "verdict file={} result={} failed_check={} details={}\n",
        v.file_id,
        if v.is_accept() { "accept" } else { "reject" },
        v.failed_check.map_or("none", FailedCheck::as_str),
        details
    )
}

pub fn parse_verdict(line: &str) -> Result<Verdict> {
    let f = fields(line, "verdict", &["file", "result", "failed_check", "details*"])?;
    let failed_check = match f[2] {
        "none" => None,
        s => Some(FailedCheck::parse(s).ok_or_else(|| parse_err(format!("unknown check {s:?}")))?),
    };
    match (f[1], failed_check) {
        ("accept", None) | ("reject", Some(_)) => {}
        _ => return Err(parse_err("result and failed_check disagree")),
    }
    Ok(Verdict { file_id: f[0].into(), failed_check, details: f[3].into() })
}

// Manifests.

pub fn encode_manifest(m: &Manifest) -> String {
    format!(
        "manifest version={} total_len={} shard_size={} shards={} assembled={} signature={}\n",
        m.version,
        m.total_len,
        m.shard_size,
        join(&m.shard_digests, |d| hex_encode(d)),
        hex_encode(&m.assembled_digest),
        hex_encode(&m.signature)
    )
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let ls = lines(text)?;
    let [line] = ls.as_slice() else {
        return Err(parse_err("manifest must be one line"));
    };
    let f = fields(line, "manifest", &["version", "total_len", "shard_size", "shards", "assembled", "signature"])?;
    Ok(Manifest {
        version: parse_u64(f[0])?,
        total_len: parse_u64(f[1])?,
        shard_size: parse_u64(f[2])?,
        shard_digests: split_list(f[3], parse_digest)?,
        assembled_digest: parse_digest(f[4])?,
        signature: hex_decode::<64>(f[5]).map_err(|_| parse_err("bad signature"))?,
    })
}

// Ledger.

pub fn ledger_line(e: &LedgerEvent) -> String {
    format!(
        "event seq={} kind={} signer={} prev={} hash={} signature={} payload={}\n",
        e.seq,
        e.kind,
        e.signer.to_hex(),
        hex_encode(&e.prev_hash),
        hex_encode(&e.this_hash),
        hex_encode(&e.signature),
        e.payload
    )
}

pub fn parse_ledger_event(line: &str) -> Result<LedgerEvent> {
    let f = fields(line, "event", &["seq", "kind", "signer", "prev", "hash", "signature", "payload*"])?;
    Ok(LedgerEvent {
        seq: parse_u64(f[0])?,
        kind: EventKind::parse(f[1]).ok_or_else(|| parse_err(format!("unknown event kind {:?}", f[1])))?,
        signer: parse_address(f[2])?,
        prev_hash: parse_digest(f[3])?,
        this_hash: parse_digest(f[4])?,
        signature: hex_decode::<64>(f[5]).map_err(|_| parse_err("bad signature"))?,
        payload: f[6].into(),
    })
}

pub fn parse_ledger(text: &str) -> Result<Vec<LedgerEvent>> {
    lines(text)?.into_iter().map(parse_ledger_event).collect()
}

// Metrics CSV.

pub const METRICS_HEADER: &str = "step,micro_step,loss,grad_norm,clip_fraction,entropy,kl,mean_task_reward,mean_length_penalty,lr\n";

pub fn metrics_row(m: &TrainMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        m.step, m.micro_step, m.loss, m.grad_norm, m.clip_fraction, m.entropy, m.kl, m.mean_task_reward, m.mean_length_penalty, m.lr
    )
}

pub fn parse_metrics_row(line: &str) -> Result<TrainMetrics> {
    let c: Vec<&str> = line.split(',').collect();
    if c.len() != 10 {
        return Err(parse_err("metrics row must have 10 columns"));
    }
    let r = |i: usize| c[i].parse::<f64>().map_err(|_| parse_err(format!("bad number {:?}", c[i])));
    Ok(TrainMetrics {
        step: parse_u64(c[0])?,
        micro_step: parse_u64(c[1])? as usize,
        loss: r(2)?,
        grad_norm: r(3)?,
        clip_fraction: r(4)?,
        entropy: r(5)?,
        kl: r(6)?,
        mean_task_reward: r(7)?,
        mean_length_penalty: r(8)?,
        lr: r(9)?,
    })
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<TrainMetrics>> {
    let ls = lines(text)?;
    match ls.split_first() {
        Some((h, rows)) if format!("{h}\n") == METRICS_HEADER => rows.iter().map(|l| parse_metrics_row(l)).collect(),
        _ => Err(parse_err("missing metrics header")),
    }
}
