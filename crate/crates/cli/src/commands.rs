use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reder::checkpoint::Checkpoint;
use reder::ctc::{self, upsample};
use reder::data::{atomic_write, encode_pairs, gen_corpus, symbol_name, Corpus, TaskKind};
use reder::eval::{batch_log_probs, evaluate, round_trip_eval, DecodeMode, ModelTranslator};
use reder::model::{Direction, DuplexModel};
use reder::ops::Layout;
use reder::training::trainer::{BEST_CHECKPOINT, LAST_CHECKPOINT};
use reder::training::Trainer;
use reder::vocab::{Vocab, BLANK};
use serde_json::json;

use crate::config::{RunConfig, EFFECTIVE_CONFIG};
use crate::{CliError, DecodeArgs, EvalArgs, GenArgs, InspectArgs, TrainArgs, TranslateArgs};

type Result<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}

fn direction(s: &str) -> Result<Direction> {
    Direction::parse(s).ok_or_else(|| CliError::Usage(format!("unknown direction {s:?} (expected x2y or y2x)")))
}

/// Refuses to replace a non-empty directory unless allowed.
fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !overwrite {
            return usage(format!("{} exists; pass --overwrite to replace it", dir.display()));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn prepare_file(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return usage(format!("{} exists; pass --overwrite to replace it", path.display()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// `<file>.config.toml` beside a single-file output.
fn config_beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(EFFECTIVE_CONFIG);
    PathBuf::from(s)
}

fn apply_decode(cfg: &mut RunConfig, a: &DecodeArgs) {
    if let Some(m) = a.decode {
        cfg.decode.mode = m;
    }
    if let Some(b) = a.beam {
        cfg.decode.beam = b;
    }
    if let Some(r) = a.rerank {
        cfg.decode.rerank = r;
    }
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.task;
    if let Some(k) = &a.task {
        t.kind = TaskKind::parse(k).ok_or_else(|| CliError::Usage(format!("unknown task {k:?}")))?;
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { t.$field = v; } )* };
    }
    set!(pairs, dev_pairs, test_pairs, vocab_size, min_len, max_len, noise_rate, doubling_rate, seed);
    cfg.task.validate()?;
    prepare_dir(&a.out, a.overwrite)?;

    let factor = cfg.model.upsample_factor;
    let raw = gen_corpus(&cfg.task)?;
    let corpus = raw.filter_lengths(factor).filter_alignable(factor);
    let vocab = corpus.build_vocab(cfg.task.vocab_size)?;
    cfg.model.vocab_size = vocab.len();
    corpus.write_dir(&a.out, &vocab)?;
    cfg.write(&a.out.join(EFFECTIVE_CONFIG))?;
    let dropped = raw.train.len() + raw.dev.len() + raw.test.len()
        - (corpus.train.len() + corpus.dev.len() + corpus.test.len());
    println!(
        "{}",
        json!({
            "out": a.out,
            "train": corpus.train.len(),
            "dev": corpus.dev.len(),
            "test": corpus.test.len(),
            "vocab_size": vocab.len(),
            "dropped_by_filter": dropped,
        })
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    if a.no_revnet_symmetric {
        return usage(
            "--no-revnet-symmetric is not a coherent ablation: both directions share one reversible stack, \
             so there is no non-symmetric variant to train",
        );
    }
    let stored = a.out.join(EFFECTIVE_CONFIG);
    let base = match (&a.config, a.resume && stored.exists()) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => Some(stored.clone()),
        (None, false) => a.data.join(EFFECTIVE_CONFIG).exists().then(|| a.data.join(EFFECTIVE_CONFIG)),
    };
    let mut cfg = RunConfig::load(base.as_deref())?;
    {
        let t = &mut cfg.train;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => { $( if let Some(v) = a.$flag { t.$field = v; } )* };
        }
        set!(threads => threads, epochs => epochs, batch_size => batch_size, seed => seed, lr => peak_lr,
             warmup => warmup_steps, stage1_fraction => stage1_fraction, lambda_fba => lambda_fba,
             lambda_cc => lambda_cc, label_smoothing => label_smoothing, eval_every => eval_every);
        if a.total_updates.is_some() {
            t.total_updates = a.total_updates;
        }
        if a.dev_limit.is_some() {
            t.dev_limit = a.dev_limit;
        }
        if a.no_fba {
            t.lambda_fba = 0.0;
        }
        if a.no_cc {
            t.lambda_cc = 0.0;
        }
        if let Some(d) = &a.unidirectional {
            t.unidirectional = Some(direction(d)?);
        }
        if a.recompute {
            t.recompute_activations = true;
        }
        let m = &mut cfg.model;
        macro_rules! set_model {
            ($($field:ident),*) => { $( if let Some(v) = a.$field { m.$field = v; } )* };
        }
        set_model!(layers, d_model, d_ff, heads, rel_clip, dropout);
    }

    let (corpus, vocab) = Corpus::read_dir(&a.data)?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate()?;
    cfg.train.validate()?;
    let train = encode_pairs(&corpus.train, &vocab)?;
    let dev = encode_pairs(&corpus.dev, &vocab)?;

    if a.resume {
        if !a.out.join(LAST_CHECKPOINT).exists() {
            return usage(format!("nothing to resume in {}", a.out.display()));
        }
    } else {
        prepare_dir(&a.out, a.overwrite)?;
        for f in [LAST_CHECKPOINT, BEST_CHECKPOINT] {
            let p = a.out.join(f);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
    }
    cfg.write(&stored)?;

    let model = DuplexModel::init(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, vocab, &train, &dev, cfg.train.clone(), Some(&a.out))?;
    if a.resume {
        trainer.resume(&Checkpoint::read(&a.out.join(LAST_CHECKPOINT))?)?;
    }
    trainer.stop_at = a.stop_after;
    trainer.verbose = !a.quiet;
    let outcome = trainer.run()?;
    println!(
        "{}",
        json!({
            "out": a.out,
            "steps": outcome.steps,
            "best_dev": outcome.best_dev,
            "last_dev": outcome.last_dev,
        })
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(DuplexModel, Vocab)> {
    let ck = Checkpoint::read(path)?;
    Ok((ck.model(None)?, ck.vocab.clone()))
}

pub fn translate(a: TranslateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_decode(&mut cfg, &a.decode);
    let mode = cfg.decode.mode()?;
    let dir = direction(&a.direction)?;
    let text = fs::read_to_string(&a.input)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", a.input.display())))?;
    prepare_file(&a.output, a.overwrite)?;
    let (model, vocab) = load_checkpoint(&a.checkpoint)?;
    cfg.model = model.config.clone();

    let inputs = text.lines().map(|l| vocab.encode(l)).collect::<reder::Result<Vec<_>>>()?;
    let outputs = reder::eval::decode_batch(&model, &inputs, dir, mode)?;
    if mode == DecodeMode::Greedy {
        report_greedy_mismatches(&model, &inputs, dir)?;
    }
    let mut out = String::new();
    for y in &outputs {
        out.push_str(&vocab.decode(y));
        out.push('\n');
    }
    atomic_write(&a.output, out.as_bytes())?;
    cfg.write(&config_beside(&a.output))?;
    Ok(())
}

/// Logs lines where greedy decoding and a width-1 beam disagree.
fn report_greedy_mismatches(model: &DuplexModel, inputs: &[Vec<usize>], dir: Direction) -> Result<()> {
    for (i, lp) in batch_log_probs(model, inputs, dir)?.iter().enumerate() {
        let greedy = ctc::greedy_decode(lp, BLANK);
        let beam = ctc::prefix_beam_search(lp, 1, BLANK)?.remove(0);
        if beam.tokens != greedy {
            let greedy_score = ctc::ctc_log_likelihood(lp, &greedy, BLANK)?;
            eprintln!(
                "line {}: greedy {:?} (log p {:.4}) differs from beam=1 {:?} (log p {:.4})",
                i + 1,
                greedy,
                greedy_score,
                beam.tokens,
                beam.log_prob
            );
        }
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let dir = direction(&a.direction)?;
    if let Some(l) = a.layers {
        cfg.model.layers = l;
    }
    if let Some(d) = a.d_model {
        cfg.model.d_model = d;
    }
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let (model, vocab) = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let vocab = Vocab::from_symbols((0..cfg.model.vocab_size.saturating_sub(2)).map(symbol_name))?;
            let m = if a.zero_layers {
                DuplexModel::zero_layers(cfg.model.clone(), seed)?
            } else {
                DuplexModel::init(cfg.model.clone(), seed)?
            };
            (m, vocab)
        }
    };
    cfg.model = model.config.clone();
    if let Some(out) = &a.out {
        prepare_file(out, a.overwrite)?;
    }

    let samples: Vec<Vec<usize>> = match &a.samples {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| vocab.encode(l))
                .collect::<reder::Result<_>>()?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..a.random_samples)
                .map(|_| {
                    let len = rng.gen_range(4..=12);
                    (0..len).map(|_| rng.gen_range(2..vocab.len().max(3))).collect()
                })
                .collect()
        }
    };
    if samples.is_empty() {
        return usage("no samples to inspect");
    }

    let mut worst: f64 = 0.0;
    let mut total = 0.0;
    for x in &samples {
        let ids = upsample(x, model.config.upsample_factor);
        let layout = Layout::single(ids.len());
        let h0 = model.embed_duplicate(&ids)?;
        let mut r = 0.0f64;
        for first in [Direction::Forward, Direction::Reverse] {
            let there = model.map(&h0, first, &layout)?.pop().unwrap_or_else(|| h0.clone());
            let back = model.map(&there, first.opposite(), &layout)?.pop().unwrap_or_else(|| there.clone());
            r = r.max(back.max_abs_diff(&h0)?);
        }
        worst = worst.max(r);
        total += r;
    }
    let rt = round_trip_eval(
        &ModelTranslator {
            model: &model,
            mode: DecodeMode::Greedy,
        },
        &samples,
        dir,
    )?;
    let report = json!({
        "kind": "reversibility",
        "sentences": samples.len(),
        "layers": model.config.layers,
        "continuous_residual_max": worst,
        "continuous_residual_mean": total / samples.len() as f64,
        "round_trip_direction": dir.name(),
        "discrete_round_trip_em": rt.exact_match,
        "discrete_round_trip_bleu": rt.bleu,
        "empty_decodes": rt.empty_decodes,
    });
    println!("{report}");
    if let Some(out) = &a.out {
        atomic_write(out, format!("{report}\n").as_bytes())?;
        cfg.write(&config_beside(out))?;
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_decode(&mut cfg, &a.decode);
    let mode = cfg.decode.mode()?;
    let dirs = match a.direction.as_str() {
        "both" => vec![Direction::Forward, Direction::Reverse],
        d => vec![direction(d)?],
    };
    if let Some(out) = &a.out {
        prepare_file(out, a.overwrite)?;
    }
    let (model, vocab) = load_checkpoint(&a.checkpoint)?;
    cfg.model = model.config.clone();
    let (corpus, _) = Corpus::read_dir(&a.data)?;
    let split = corpus
        .split(&a.split)
        .ok_or_else(|| CliError::Usage(format!("unknown split {:?}", a.split)))?;
    let pairs = encode_pairs(split, &vocab)?;
    if pairs.is_empty() {
        return usage(format!("split {} is empty", a.split));
    }
    let mut lines = String::new();
    for d in dirs {
        let report = evaluate(&model, &pairs, d, mode)?;
        let mut v = serde_json::to_value(&report)?;
        v["kind"] = json!("eval");
        v["split"] = json!(a.split);
        let line = serde_json::to_string(&v)?;
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    if let Some(out) = &a.out {
        atomic_write(out, lines.as_bytes())?;
        cfg.write(&config_beside(out))?;
    }
    Ok(())
}
