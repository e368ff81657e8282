//! Browser bindings. Every entry point takes plain values and returns a
//! JSON string; failures come back as `{"error": "..."}`.

use reder::ctc;
use reder::data::{gen_corpus, TaskKind, TaskSpec};
use reder::model::{DuplexModel, ModelConfig};
use reder::ops::Layout;
use reder::{RederError, Result, Tensor};
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

fn respond(r: Result<Value>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e.to_string() })).to_string()
}

fn bad(m: impl Into<String>) -> RederError {
    RederError::Config(m.into())
}

/// Maps a token sequence through a freshly initialised stack one way and
/// back the other, in both orders, and reports the largest drift from the
/// starting hidden state.
pub fn round_trip(layers: usize, d_model: usize, seed: u64, tokens: &str) -> Result<Value> {
    let config = ModelConfig {
        layers,
        d_model,
        d_ff: 2 * d_model,
        heads: if d_model % 4 == 0 { 4 } else { 1 },
        ..ModelConfig::default()
    };
    let model = DuplexModel::init(config, seed)?;
    let ids: Vec<usize> = tokens
        .split_whitespace()
        .map(|t| t.parse::<usize>().ok().filter(|&i| i < model.config.vocab_size - 2).map(|i| i + 2))
        .collect::<Option<_>>()
        .ok_or_else(|| bad(format!("tokens must be integers below {}", model.config.vocab_size - 2)))?;
    if ids.is_empty() {
        return Err(bad("enter at least one token"));
    }
    let frames = ctc::upsample(&ids, model.config.upsample_factor);
    let layout = Layout::single(frames.len());
    let h0 = model.embed_duplicate(&frames)?;
    let fwd = model.forward_map(&h0, &layout)?;
    let back = model.reverse_map(fwd.last().unwrap_or(&h0), &layout)?;
    let rev = model.reverse_map(&h0, &layout)?;
    let again = model.forward_map(rev.last().unwrap_or(&h0), &layout)?;
    let drift = |h: Option<&reder::layer::HiddenPair>| h.map_or(Ok(0.0), |h| h.max_abs_diff(&h0));
    Ok(json!({
        "frames": frames.len(),
        "parameters": model.parameter_count(),
        "forward_then_reverse": drift(back.last())?,
        "reverse_then_forward": drift(again.last())?,
        "forward_trace": model.op_trace(reder::model::Direction::Forward)?,
    }))
}

/// A few source/target pairs of a synthetic task.
pub fn sample_pairs(task: &str, count: usize, seed: u64) -> Result<Value> {
    let kind = TaskKind::parse(task).ok_or_else(|| bad(format!("unknown task {task}")))?;
    let spec = TaskSpec {
        kind,
        pairs: count.clamp(1, 50),
        dev_pairs: 0,
        test_pairs: 0,
        noise_rate: if kind == TaskKind::CopyNoise { 0.1 } else { 0.0 },
        seed,
        ..TaskSpec::default()
    };
    let corpus = gen_corpus(&spec)?;
    Ok(corpus.train.iter().map(|p| json!({ "src": p.src.join(" "), "tgt": p.tgt.join(" ") })).collect())
}

/// Greedy and prefix-beam decoding of a frame-by-label probability table.
/// Column 0 is the blank; each row is renormalised.
pub fn decode_table(table: &str, beam: usize) -> Result<Value> {
    let rows: Vec<Vec<f64>> = table
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|v| v.parse::<f64>().map_err(|_| bad(format!("not a number: {v}")))).collect())
        .collect::<Result<_>>()?;
    let width = rows.first().map_or(0, Vec::len);
    if width < 2 || rows.iter().any(|r| r.len() != width) {
        return Err(bad("rows need the same number of columns, at least two"));
    }
    let mut logs = Vec::with_capacity(rows.len() * width);
    for r in &rows {
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&v| v < 0.0 || !v.is_finite()) || sum <= 0.0 {
            return Err(bad("probabilities must be non-negative with a positive row sum"));
        }
        logs.extend(r.iter().map(|v| (v / sum).ln()));
    }
    let lp = Tensor::new(vec![rows.len(), width], logs)?;
    let label = |t: &[usize]| t.iter().map(|&i| char::from(b'a' + (i as u8 - 1) % 26)).collect::<String>();
    let (path, path_score) = ctc::greedy_path(&lp);
    let greedy = ctc::collapse(&path, 0);
    let hyps = ctc::prefix_beam_search(&lp, beam, 0)?;
    Ok(json!({
        "greedy": {
            "output": label(&greedy),
            "path_probability": path_score.exp(),
            "output_probability": ctc::ctc_log_likelihood(&lp, &greedy, 0)?.exp(),
        },
        "beam": hyps.iter().map(|h| json!({ "output": label(&h.tokens), "probability": h.log_prob.exp() })).collect::<Vec<_>>(),
    }))
}

#[wasm_bindgen(js_name = roundTrip)]
pub fn round_trip_js(layers: usize, d_model: usize, seed: u32, tokens: &str) -> String {
    respond(round_trip(layers, d_model, seed.into(), tokens))
}

#[wasm_bindgen(js_name = samplePairs)]
pub fn sample_pairs_js(task: &str, count: usize, seed: u32) -> String {
    respond(sample_pairs(task, count, seed.into()))
}

#[wasm_bindgen(js_name = decodeTable)]
pub fn decode_table_js(table: &str, beam: usize) -> String {
    respond(decode_table(table, beam))
}
