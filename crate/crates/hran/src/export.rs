//! Attention traces averaged over a whole response, as JSON and as an SVG
//! heatmap with one row per utterance.

use std::fmt::Write as _;

use hran_core::corpus::EOS;
use hran_core::decoding::{default_banned, greedy_decode, HranDecoder};
use hran_core::model::{AttentionTrace, ContextInput, StepTrace};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::DecodeOptions;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceMode {
    /// Scored against a given response.
    TeacherForced,
    /// Response produced by greedy decoding.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Token emitted (or fed) at this step; `<eos>` for the final one.
    pub token: String,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub fingerprint: String,
    pub mode: TraceMode,
    pub context: Vec<Vec<String>>,
    pub response: Vec<String>,
    pub steps: Vec<TraceStep>,
    /// Mean over steps of each word weight.
    pub word_importance: Vec<Vec<f64>>,
    /// Mean over steps of each utterance weight.
    pub utterance_importance: Vec<f64>,
}

/// Arithmetic means over steps, accumulated in step order. No
/// renormalization: the means of simplex points are simplex points.
pub fn average_trace(trace: &AttentionTrace) -> (Vec<Vec<f64>>, Vec<f64>) {
    let Some(first) = trace.steps.first() else {
        return (Vec::new(), Vec::new());
    };
    let mut alpha: Vec<Vec<f64>> = first.alpha.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut beta = vec![0.0; first.beta.len()];
    for step in &trace.steps {
        for (acc, row) in alpha.iter_mut().zip(&step.alpha) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for (a, v) in beta.iter_mut().zip(&step.beta) {
            *a += v;
        }
    }
    let n = trace.steps.len() as f64;
    alpha.iter_mut().flatten().for_each(|a| *a /= n);
    beta.iter_mut().for_each(|b| *b /= n);
    (alpha, beta)
}

/// Traces `context` against `response` if given, else against the greedy
/// decode of the model.
pub fn export_attention(
    ckpt: &Checkpoint,
    context: &[Vec<String>],
    response: Option<&[String]>,
    decode: &DecodeOptions,
) -> CliResult<AttentionExport> {
    let (model, context_vocab, response_vocab) = (&ckpt.model, &ckpt.context_vocab, &ckpt.response_vocab);
    let input = ContextInput::new(context.iter().map(|u| context_vocab.encode(u)).collect());
    let (mode, ids, trace) = match response {
        Some(words) => {
            let mut target = response_vocab.encode(words);
            target.push(EOS);
            let (_, trace) = model.forward_nll_traced(&input, &target)?;
            (TraceMode::TeacherForced, target, trace)
        }
        None => {
            let decoder =
                HranDecoder::new(model, &input, default_banned(decode.allow_unk))?.with_max_len(decode.max_len);
            let out = greedy_decode(&decoder)?;
            let mut ids = out.tokens;
            if out.finished {
                ids.push(EOS);
            }
            (TraceMode::Greedy, ids, out.trace)
        }
    };
    if trace.steps.is_empty() {
        return Err(CliError::Usage("max-len must be positive".into()));
    }
    let (word_importance, utterance_importance) = average_trace(&trace);
    let token = |id: usize| response_vocab.token(id).map(str::to_string);
    let steps = ids
        .iter()
        .zip(&trace.steps)
        .map(|(&id, StepTrace { alpha, beta })| {
            Ok(TraceStep {
                token: token(id)?,
                alpha: alpha.clone(),
                beta: beta.clone(),
            })
        })
        .collect::<hran_core::Result<Vec<_>>>()?;
    let response = match response {
        Some(words) => words.to_vec(),
        None => ids
            .iter()
            .filter(|&&id| id != EOS)
            .map(|&id| token(id))
            .collect::<hran_core::Result<_>>()?,
    };
    Ok(AttentionExport {
        fingerprint: ckpt.fingerprint(),
        mode,
        context: context.to_vec(),
        response,
        steps,
        word_importance,
        utterance_importance,
    })
}

pub fn to_json(export: &AttentionExport) -> String {
    let mut s = serde_json::to_string_pretty(export).expect("export serializes");
    s.push('\n');
    s
}

const CELL_H: usize = 28;
const UTT_W: usize = 56;
const GAP: usize = 4;
const MARGIN: usize = 8;

fn word_width(word: &str) -> usize {
    // wide glyphs take roughly twice the advance of narrow ones
    let units: usize = word.chars().map(|c| if (c as u32) < 0x1100 { 1 } else { 2 }).sum();
    (units * 8 + 12).max(36)
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Heatmap: one row per utterance, the leftmost cell shaded by utterance
/// importance, then one cell per word shaded by word importance. Opacity is
/// the weight itself.
pub fn to_svg(export: &AttentionExport) -> String {
    let rows = export.context.len();
    let row_width =
        |i: usize| -> usize { UTT_W + export.context[i].iter().map(|w| GAP + word_width(w)).sum::<usize>() };
    let width = 2 * MARGIN + (0..rows).map(row_width).max().unwrap_or(UTT_W);
    let height = 2 * MARGIN + rows * CELL_H + rows.saturating_sub(1) * GAP;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"13\" \
         data-fingerprint=\"{}\">",
        escape(&export.fingerprint)
    );
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>");
    for (i, words) in export.context.iter().enumerate() {
        let y = MARGIN + i * (CELL_H + GAP);
        let beta = export.utterance_importance[i];
        let _ = writeln!(s, "<g class=\"utterance\" data-index=\"{i}\">");
        let _ = writeln!(
            s,
            "<rect x=\"{MARGIN}\" y=\"{y}\" width=\"{UTT_W}\" height=\"{CELL_H}\" fill=\"#b2182b\" \
             fill-opacity=\"{beta:.4}\" stroke=\"#888888\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">u{}</text>",
            MARGIN + UTT_W / 2,
            y + CELL_H / 2 + 5,
            i + 1
        );
        let mut x = MARGIN + UTT_W;
        for (j, word) in words.iter().enumerate() {
            x += GAP;
            let w = word_width(word);
            let alpha = export.word_importance[i][j];
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{CELL_H}\" fill=\"#2166ac\" \
                 fill-opacity=\"{alpha:.4}\" stroke=\"#888888\"/>"
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                x + w / 2,
                y + CELL_H / 2 + 5,
                escape(word)
            );
            x += w;
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
