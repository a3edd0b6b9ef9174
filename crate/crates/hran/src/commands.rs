//! One function per subcommand. Human-readable progress goes to `out`;
//! artifacts go to the paths given.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use hran_core::corpus::{
    build_vocab, encode_example, filter_conversations, split_dataset, EncodedExample, FilterRules, Side, Vocab,
};
use hran_core::decoding::{beam_search, default_banned, greedy_decode, HranDecoder};
use hran_core::evaluation::{perplexity, run_ablation_suite, EvalReport, Normalization};
use hran_core::model::{ContextInput, Hran};
use hran_core::numerics::Rng;
use hran_core::training::{fit, make_batches, EpochRecord, FitState, StopReason};
use serde::Serialize;

use crate::chat::ChatSession;
use crate::checkpoint::{Checkpoint, Role};
use crate::config::{DecodeOptions, RunConfig};
use crate::error::{CliError, CliResult};
use crate::export::{export_attention, to_json, to_svg};
use crate::io::{
    load_raw, read_contexts, read_examples, read_text, read_vocab, tokenize, write_atomic, write_examples, write_vocab,
};

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult<()> {
    let text = serde_json::to_string(value).expect("output serializes");
    writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> CliResult<()> {
    writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn prep(input: &Path, output: &Path, rules: &FilterRules, out: &mut dyn Write) -> CliResult<()> {
    let convs = load_raw(input)?;
    let (examples, tally) = filter_conversations(&convs, rules);
    write_examples(output, &examples)?;
    emit(out, &tally)
}

pub fn split(input: &Path, outputs: [&Path; 3], fractions: [f64; 3], seed: u64, out: &mut dyn Write) -> CliResult<()> {
    let examples = read_examples(input)?;
    let (train, valid, test) = split_dataset(examples, &mut Rng::new(seed), fractions)?;
    for (path, part) in outputs.iter().zip([&train, &valid, &test]) {
        write_examples(path, part)?;
    }
    say(
        out,
        format_args!("train {} valid {} test {}", train.len(), valid.len(), test.len()),
    )
}

#[derive(Serialize)]
struct VocabSummary {
    side: Side,
    size: usize,
    coverage: f64,
    total_occurrences: usize,
}

pub fn vocab(input: &Path, output: &Path, side: Side, size: usize, out: &mut dyn Write) -> CliResult<()> {
    let examples = read_examples(input)?;
    let built = build_vocab(&examples, side, size).map_err(|e| CliError::in_file(input, e))?;
    write_vocab(output, &built.vocab)?;
    emit(
        out,
        &VocabSummary {
            side,
            size: built.vocab.len(),
            coverage: built.coverage,
            total_occurrences: built.total_occurrences,
        },
    )
}

fn encode_all(examples: &[hran_core::corpus::Example], cv: &Vocab, rv: &Vocab) -> Vec<EncodedExample> {
    examples.iter().map(|e| encode_example(e, cv, rv)).collect()
}

#[derive(Serialize)]
struct ReportLine<'a> {
    fingerprint: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Serialize)]
struct StopLine<'a> {
    fingerprint: &'a str,
    stop: StopReason,
    epochs: usize,
    best_epoch: Option<usize>,
    best_ppl: Option<f64>,
}

fn report_text(fingerprint: &str, state: &FitState, stop: Option<StopReason>) -> String {
    let mut text = String::new();
    for record in &state.records {
        text.push_str(&serde_json::to_string(&ReportLine { fingerprint, record }).expect("record serializes"));
        text.push('\n');
    }
    if let Some(stop) = stop {
        let line = StopLine {
            fingerprint,
            stop,
            epochs: state.epoch,
            best_epoch: state.best.as_ref().map(|b| b.epoch),
            best_ppl: state.best.as_ref().map(|b| b.perplexity),
        };
        text.push_str(&serde_json::to_string(&line).expect("stop line serializes"));
        text.push('\n');
    }
    text
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const REPORT: &str = "report.jsonl";

/// Trains from scratch or continues from a last-epoch checkpoint. Writes
/// `last.ckpt` and the report after every epoch and `best.ckpt` whenever
/// validation perplexity improves.
pub fn train(config_path: &Path, resume: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let mut run = RunConfig::load(config_path)?;
    let cv = read_vocab(&run.paths.context_vocab)?;
    let rv = read_vocab(&run.paths.response_vocab)?;
    run.model.context_vocab_size = cv.len();
    run.model.response_vocab_size = rv.len();
    let train_set = read_examples(&run.paths.train)?;
    let valid_set = read_examples(&run.paths.validation)?;
    let batches = make_batches(&train_set, run.schedule.batch_size, &cv, &rv)?;
    let valid = encode_all(&valid_set, &cv, &rv);

    let (mut model, state) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_resumable(&run, &cv, &rv)?;
            let state = ckpt.fit.expect("checked resumable");
            (ckpt.model, state)
        }
        None => {
            let model = Hran::new(run.model.clone())?;
            let state = FitState::new(&model, &run.schedule)?;
            (model, state)
        }
    };
    let dir = run.paths.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let fingerprint = run.fingerprint();
    say(
        out,
        format_args!(
            "run {fingerprint}: {} parameters, {} training examples, {} validation examples",
            model.parameter_count(),
            train_set.len(),
            valid.len()
        ),
    )?;

    let mut failure: Option<CliError> = None;
    let outcome = {
        let mut hook = |model: &Hran, state: &FitState, record: &EpochRecord| -> hran_core::Result<()> {
            let result = (|| -> CliResult<()> {
                let last = Checkpoint {
                    role: Role::Last,
                    run: run.clone(),
                    epoch: state.epoch,
                    valid_ppl: Some(record.valid_ppl),
                    context_vocab: cv.clone(),
                    response_vocab: rv.clone(),
                    model: model.clone(),
                    fit: Some(state.clone()),
                };
                last.save(&dir.join(LAST_CHECKPOINT))?;
                if record.new_best {
                    let best = state.best.as_ref().expect("new best recorded");
                    let snapshot = Checkpoint {
                        role: Role::Best,
                        epoch: best.epoch,
                        valid_ppl: Some(best.perplexity),
                        model: Hran::from_params(model.config.clone(), best.params.clone())?,
                        fit: None,
                        ..last
                    };
                    snapshot.save(&dir.join(BEST_CHECKPOINT))?;
                }
                write_atomic(&dir.join(REPORT), report_text(&fingerprint, state, None).as_bytes())?;
                say(
                    out,
                    format_args!(
                        "epoch {} loss {:.6} ppl {:.6} lr {} stalls {}{}",
                        record.epoch,
                        record.train_loss,
                        record.valid_ppl,
                        record.lr,
                        record.stalls,
                        if record.new_best { " best" } else { "" }
                    ),
                )
            })();
            result.map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                hran_core::Error::Contract(msg)
            })
        };
        fit(&mut model, &batches, &valid, &run.schedule, state, &mut hook)
    };
    let outcome = match (outcome, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    let state = &outcome.state;
    write_atomic(
        &dir.join(REPORT),
        report_text(&fingerprint, state, Some(outcome.stop_reason)).as_bytes(),
    )?;
    let best = state.best.as_ref();
    say(
        out,
        format_args!(
            "stopped ({:?}) after {} epochs; best ppl {:.6} at epoch {}",
            outcome.stop_reason,
            state.epoch,
            best.map_or(f64::NAN, |b| b.perplexity),
            best.map_or(0, |b| b.epoch)
        ),
    )
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    run_fingerprint: String,
    checkpoint_epoch: usize,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(
    ckpt_path: &Path,
    data: &Path,
    normalization: Option<Normalization>,
    output: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let examples = read_examples(data)?;
    let encoded = encode_all(&examples, &ckpt.context_vocab, &ckpt.response_vocab);
    let norm = normalization.unwrap_or(ckpt.run.schedule.normalization);
    let report = perplexity(&ckpt.model, &encoded, norm).map_err(|e| CliError::in_file(data, e))?;
    let body = EvalOutput {
        run_fingerprint: ckpt.fingerprint(),
        checkpoint_epoch: ckpt.epoch,
        report: &report,
    };
    match output {
        Some(path) => {
            let mut text = serde_json::to_string_pretty(&body).expect("report serializes");
            text.push('\n');
            write_atomic(path, text.as_bytes())?;
            say(out, format_args!("perplexity {}", report.perplexity))
        }
        None => emit(out, &body),
    }
}

#[derive(Serialize)]
struct Response {
    text: String,
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

#[derive(Serialize)]
struct GenerateLine<'a> {
    fingerprint: &'a str,
    index: usize,
    context: &'a [Vec<String>],
    responses: Vec<Response>,
}

/// Decodes every context of `contexts`, writing one JSON line per context.
pub fn generate(
    ckpt_path: &Path,
    contexts: &Path,
    decode: &DecodeOptions,
    greedy: bool,
    output: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    decode.check()?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let fingerprint = ckpt.fingerprint();
    let lines = read_contexts(contexts)?;
    let mut text = String::new();
    for (index, context) in lines.iter().enumerate() {
        let input = ContextInput::new(context.iter().map(|u| ckpt.context_vocab.encode(u)).collect());
        let wrap = |e: hran_core::Error| CliError::in_file(contexts, e.in_example(index));
        let decoder = HranDecoder::new(&ckpt.model, &input, default_banned(decode.allow_unk))
            .map_err(wrap)?
            .with_max_len(decode.max_len);
        let hyps: Vec<(Vec<usize>, f64, bool)> = if greedy {
            let d = greedy_decode(&decoder).map_err(wrap)?;
            vec![(d.tokens, d.log_prob, d.finished)]
        } else {
            beam_search(&decoder, &decode.beam_options())
                .map_err(wrap)?
                .into_iter()
                .map(|h| (h.tokens, h.log_prob, h.finished))
                .collect()
        };
        let responses = hyps
            .into_iter()
            .map(|(tokens, log_prob, finished)| {
                Ok(Response {
                    text: ckpt.response_vocab.decode(&tokens)?.join(" "),
                    tokens,
                    log_prob,
                    finished,
                })
            })
            .collect::<hran_core::Result<Vec<_>>>()
            .map_err(wrap)?;
        let line = GenerateLine {
            fingerprint: &fingerprint,
            index,
            context,
            responses,
        };
        text.push_str(&serde_json::to_string(&line).expect("line serializes"));
        text.push('\n');
    }
    match output {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

pub fn chat(
    ckpt_path: &Path,
    decode: &DecodeOptions,
    opening: &str,
    trace: bool,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> CliResult<()> {
    decode.check()?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut session = ChatSession::new(&ckpt, decode.clone(), opening);
    session.trace = trace;
    session
        .run(input, out)
        .map_err(|e| CliError::io(Path::new("<stdin>"), e))
}

/// Reads one utterance per nonblank line.
fn read_utterances(path: &Path) -> CliResult<Vec<Vec<String>>> {
    Ok(read_text(path)?
        .lines()
        .map(tokenize)
        .filter(|u| !u.is_empty())
        .collect())
}

pub struct ExportPaths<'a> {
    pub context: &'a Path,
    pub response: Option<&'a Path>,
    pub json: &'a Path,
    pub svg: &'a Path,
}

pub fn attn_export(ckpt_path: &Path, paths: &ExportPaths<'_>, decode: &DecodeOptions) -> CliResult<()> {
    decode.check()?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let context = read_utterances(paths.context)?;
    if context.len() < 2 {
        return Err(CliError::in_file(
            paths.context,
            hran_core::Error::ContextTooShort { found: context.len() },
        ));
    }
    let response = match paths.response {
        Some(p) => {
            let words: Vec<String> = read_utterances(p)?.into_iter().flatten().collect();
            Some(words)
        }
        None => None,
    };
    let export = export_attention(&ckpt, &context, response.as_deref(), decode)?;
    write_atomic(paths.json, to_json(&export).as_bytes())?;
    write_atomic(paths.svg, to_svg(&export).as_bytes())
}

#[derive(Serialize)]
struct AblationLine<'a> {
    fingerprint: &'a str,
    #[serde(flatten)]
    row: &'a hran_core::evaluation::AblationRow,
}

/// Trains all four attention variants of the config and prints one JSON
/// line per variant.
pub fn ablate(config_path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let mut run = RunConfig::load(config_path)?;
    let cv = read_vocab(&run.paths.context_vocab)?;
    let rv = read_vocab(&run.paths.response_vocab)?;
    run.model.context_vocab_size = cv.len();
    run.model.response_vocab_size = rv.len();
    let batches = make_batches(&read_examples(&run.paths.train)?, run.schedule.batch_size, &cv, &rv)?;
    let valid = encode_all(&read_examples(&run.paths.validation)?, &cv, &rv);
    let fingerprint = run.fingerprint();
    for row in run_ablation_suite(&run.model, &batches, &valid, &run.schedule) {
        emit(
            out,
            &AblationLine {
                fingerprint: &fingerprint,
                row: &row,
            },
        )?;
    }
    Ok(())
}
