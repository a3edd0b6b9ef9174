//! Interactive chat over a rolling context.

use std::io::{self, BufRead, Write};

use hran_core::corpus::EOS;
use hran_core::decoding::{beam_search, default_banned, HranDecoder};
use hran_core::model::ContextInput;

use crate::checkpoint::Checkpoint;
use crate::config::DecodeOptions;
use crate::export::average_trace;
use crate::io::tokenize;

pub const DEFAULT_OPENING: &str = "你好";

pub struct ChatSession<'a> {
    ckpt: &'a Checkpoint,
    decode: DecodeOptions,
    opening: Vec<String>,
    /// Every turn so far, oldest first; starts with the opening utterance.
    pub history: Vec<Vec<String>>,
    pub trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Quit,
}

impl<'a> ChatSession<'a> {
    /// An empty `opening` falls back to the default greeting, since the
    /// model needs two turns of context before it can answer.
    pub fn new(ckpt: &'a Checkpoint, decode: DecodeOptions, opening: &str) -> Self {
        let mut opening = tokenize(opening);
        if opening.is_empty() {
            opening = tokenize(DEFAULT_OPENING);
        }
        Self {
            ckpt,
            decode,
            history: vec![opening.clone()],
            opening,
            trace: false,
        }
    }

    pub fn greet<W: Write + ?Sized>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "bot: {}", self.opening.join(" "))
    }

    /// Handles one input line: a command or a user turn.
    pub fn handle_line<W: Write + ?Sized>(&mut self, line: &str, out: &mut W) -> io::Result<Flow> {
        let trimmed = line.trim();
        if let Some(cmd) = trimmed.strip_prefix('/') {
            let mut parts = cmd.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("quit"), None) => return Ok(Flow::Quit),
                (Some("reset"), None) => {
                    self.history = vec![self.opening.clone()];
                    writeln!(out, "(context cleared)")?;
                    self.greet(out)?;
                }
                (Some("trace"), Some("on")) => {
                    self.trace = true;
                    writeln!(out, "(trace on)")?;
                }
                (Some("trace"), Some("off")) => {
                    self.trace = false;
                    writeln!(out, "(trace off)")?;
                }
                _ => writeln!(out, "(commands: /reset, /trace on|off, /quit)")?,
            }
            return Ok(Flow::Continue);
        }
        let turn = tokenize(line);
        if turn.is_empty() {
            return Ok(Flow::Continue);
        }
        self.history.push(turn);
        match self.respond() {
            Ok((reply, beta)) => {
                writeln!(out, "bot: {}", reply.join(" "))?;
                if let Some(beta) = beta.filter(|_| self.trace) {
                    let cells: Vec<String> = beta.iter().map(|b| format!("{b:.4}")).collect();
                    writeln!(out, "beta: {}", cells.join(" "))?;
                }
                // an empty reply would leave an empty utterance in the context
                if !reply.is_empty() {
                    self.history.push(reply);
                }
            }
            Err(e) => writeln!(out, "(error: {e})")?,
        }
        Ok(Flow::Continue)
    }

    /// Best beam response and its step-averaged utterance weights.
    fn respond(&self) -> hran_core::Result<(Vec<String>, Option<Vec<f64>>)> {
        let ck = self.ckpt;
        let input = ContextInput::new(self.history.iter().map(|u| ck.context_vocab.encode(u)).collect());
        let decoder = HranDecoder::new(&ck.model, &input, default_banned(self.decode.allow_unk))?
            .with_max_len(self.decode.max_len);
        let opts = hran_core::decoding::BeamOptions {
            n_best: 1,
            ..self.decode.beam_options()
        };
        let best = beam_search(&decoder, &opts)?.remove(0);
        let words = ck.response_vocab.decode(&best.tokens)?;
        let mut target = best.tokens.clone();
        if best.finished {
            target.push(EOS);
        }
        let beta = if target.is_empty() {
            None
        } else {
            let (_, trace) = ck.model.forward_nll_traced(&input, &target)?;
            Some(average_trace(&trace).1)
        };
        Ok((words, beta))
    }

    /// Reads lines until `/quit` or end of input.
    pub fn run<R: BufRead, W: Write + ?Sized>(&mut self, input: R, out: &mut W) -> io::Result<()> {
        self.greet(out)?;
        for line in input.lines() {
            let line = match line {
                Ok(l) => l,
                Err(e) if e.kind() == io::ErrorKind::InvalidData => String::new(),
                Err(e) => return Err(e),
            };
            if self.handle_line(&line, out)? == Flow::Quit {
                break;
            }
            out.flush()?;
        }
        Ok(())
    }
}
