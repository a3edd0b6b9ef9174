//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

// `ensure!` negates comparisons on floats on purpose: NaN must fail them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hran::checkpoint::Checkpoint;
use hran::export::{export_attention, to_json, to_svg, AttentionExport};
use hran_core::corpus::{build_vocab, encode_example, EncodedExample, Example, Side, BOS, EOS, PAD, UNK};
use hran_core::decoding::{
    beam_search, default_banned, greedy_decode, BeamOptions, HranDecoder, PrefixTableModel, StepModel,
};
use hran_core::evaluation::{perplexity, Normalization, UnigramBaseline};
use hran_core::model::{Ablation, ContextInput, Forward, Hran, InitSpread, ModelConfig, ModelVars};
use hran_core::numerics::{grad_check, Graph, Rng, Tensor, Var};
use hran_core::training::{
    fit, make_batches, train_epoch, AdaDelta, FitState, ScheduleTracker, StopRule, TrainSchedule,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
/// Utterance states and word weights of one attention sweep.
type Sweep = (Vec<Vec<f64>>, Vec<Vec<f64>>);
/// Name, perplexities, schedule, expected halving epochs, stop epoch, final rate.
type ScheduleCase<'a> = (&'a str, &'a [f64], &'a TrainSchedule, &'a [usize], Option<usize>, f64);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn small_config(rng: &mut Rng, ablation: Ablation, seed: u64) -> ModelConfig {
    ModelConfig {
        word_hidden: 2 + rng.below(4),
        utt_hidden: 2 + rng.below(4),
        decoder_hidden: 2 + rng.below(4),
        embed_dim: 2 + rng.below(3),
        attn_dim: 2 + rng.below(4),
        ablation,
        init_scale: 0.3 + rng.uniform(),
        init_spread: InitSpread::StdDev,
        seed,
        ..ModelConfig::desk(6 + rng.below(10), 6 + rng.below(6))
    }
}

/// Random context of `m` utterances of 1..=`max_len` real words, with up to
/// two trailing pads per utterance when `pad` is set.
fn random_context(rng: &mut Rng, vocab: usize, m: usize, max_len: usize, pad: bool) -> ContextInput {
    let mut ctx = ContextInput::new(
        (0..m)
            .map(|_| (0..1 + rng.below(max_len)).map(|_| 4 + rng.below(vocab - 4)).collect())
            .collect(),
    );
    if pad {
        for (u, mask) in ctx.utterances.iter_mut().zip(&mut ctx.masks) {
            for _ in 0..rng.below(3) {
                u.push(PAD);
                mask.push(false);
            }
        }
    }
    ctx
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    // a wide init and the desk init, on three instances each
    for (scale, spread) in [(0.5, InitSpread::StdDev), (0.01, InitSpread::Variance)] {
        for seed in [2024u64, 1, 2] {
            let cfg = ModelConfig {
                word_hidden: 8,
                utt_hidden: 8,
                decoder_hidden: 8,
                embed_dim: 6,
                attn_dim: 8,
                init_scale: scale,
                init_spread: spread,
                seed,
                ..ModelConfig::desk(20, 20)
            };
            let model = Hran::new(cfg.clone()).map_err(err)?;
            let mut rng = Rng::new(seed);
            let ctx = random_context(&mut rng, 20, 3, 4, false);
            let target = [5, 9, 17, EOS];
            let params: Vec<Tensor> = model.params.tensors().into_iter().cloned().collect();
            let word_args = cfg.word_scorer_args().len();
            let f = |g: &mut Graph, leaves: &[Var]| {
                let vars = ModelVars::from_slice(word_args, leaves);
                Forward::new(&cfg, g, &vars)
                    .nll(&ctx, &target, false)
                    .map(|(loss, _)| loss)
            };
            // many gradients sit near the 1e-8 floor against a loss near 12;
            // a 1e-2 step keeps cancellation noise well below it
            let report = grad_check(f, &params, 1e-2, 1e-4).map_err(err)?;
            ensure!(
                report.passed(),
                "init {scale} seed {seed}: max relative error {:e} at {:?}",
                report.max_relative_error,
                report.worst
            );
            worst = worst.max(report.max_relative_error);
            coordinates = report.coordinates;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "6 instances of {coordinates} coordinates, max relative error {worst:.2e}"
    ))
}

fn attention_simplex() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst = 0.0f64;
    for draw in 0..1000u64 {
        let cfg = small_config(&mut rng, Ablation::ALL[draw as usize % 4], draw);
        let model = Hran::new(cfg.clone()).map_err(err)?;
        let m = 2 + rng.below(4);
        let ctx = random_context(&mut rng, cfg.context_vocab_size, m, 5, true);
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        let mut fwd = Forward::new(&cfg, &mut g, &vars);
        let enc = fwd.encode_words(&ctx).map_err(err)?;
        let s: Vec<f64> = (0..cfg.decoder_hidden).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let s = fwd.g.leaf(Tensor::vector(s));
        let out = fwd.attend_step(&enc, s).map_err(err)?;

        let beta = &out.trace.beta;
        ensure!(beta.iter().all(|&b| b >= 0.0), "draw {draw}: negative beta {beta:?}");
        let sum: f64 = beta.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        ensure!((sum - 1.0).abs() <= 1e-6, "draw {draw}: beta sums to {sum}");
        for (i, alpha) in out.trace.alpha.iter().enumerate() {
            let mask = &ctx.masks[i];
            ensure!(alpha.iter().all(|&a| a >= 0.0), "draw {draw}: negative alpha");
            ensure!(
                alpha.iter().zip(mask).all(|(&a, &real)| real || a == 0.0),
                "draw {draw}: weight on padding"
            );
            let sum: f64 = alpha.iter().zip(mask).filter(|(_, &real)| real).map(|(a, _)| a).sum();
            worst = worst.max((sum - 1.0).abs());
            ensure!((sum - 1.0).abs() <= 1e-6, "draw {draw}: alpha sums to {sum}");

            let r = g.value(out.pooled[i]).data();
            for (k, &rk) in r.iter().enumerate() {
                let (lo, hi) = enc.hidden[i]
                    .iter()
                    .zip(mask)
                    .filter(|(_, &real)| real)
                    .map(|(h, _)| g.value(*h).data()[k])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                ensure!(rk >= lo - 1e-12 && rk <= hi + 1e-12, "draw {draw}: r outside the hull");
            }
        }
    }
    Ok(format!("1000 draws, worst sum deviation {worst:.1e}"))
}

fn backward_causality() -> Outcome {
    let mut rng = Rng::new(3);
    for trial in 0..100u64 {
        let cfg = small_config(&mut rng, Ablation::Full, 500 + trial);
        let model = Hran::new(cfg.clone()).map_err(err)?;
        let m = 2 + rng.below(3);
        let ctx = random_context(&mut rng, cfg.context_vocab_size, m, 4, true);
        let mut other = ctx.clone();
        let real: Vec<usize> = ctx.utterances[0].iter().copied().filter(|&w| w != PAD).collect();
        // new words, and sometimes a new length, for the first utterance only
        loop {
            let len = 1 + rng.below(5);
            other.utterances[0] = (0..len).map(|_| 4 + rng.below(cfg.context_vocab_size - 4)).collect();
            other.masks[0] = vec![true; len];
            if other.utterances[0] != real {
                break;
            }
        }
        let s: Vec<f64> = (0..cfg.decoder_hidden).map(|_| rng.uniform_range(-1.0, 1.0)).collect();

        let run = |ctx: &ContextInput| -> Result<Sweep, String> {
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g);
            let mut fwd = Forward::new(&cfg, &mut g, &vars);
            let enc = fwd.encode_words(ctx).map_err(err)?;
            let s = fwd.g.leaf(Tensor::vector(s.clone()));
            let out = fwd.attend_step(&enc, s).map_err(err)?;
            let ls = out.l_states.iter().map(|l| g.value(*l).data().to_vec()).collect();
            Ok((ls, out.trace.alpha))
        };
        let (l_a, alpha_a) = run(&ctx)?;
        let (l_b, alpha_b) = run(&other)?;
        ensure!(l_a[0] != l_b[0], "trial {trial}: the perturbation did not reach l_1");
        for i in 1..m {
            ensure!(l_a[i] == l_b[i], "trial {trial}: l_{} changed", i + 1);
            ensure!(alpha_a[i] == alpha_b[i], "trial {trial}: alpha_{} changed", i + 1);
        }
    }
    Ok("100 trials, later states and weights bitwise equal".into())
}

fn uniform_oracle() -> Outcome {
    let mut rng = Rng::new(4);
    let mut cfg = small_config(&mut rng, Ablation::Full, 4);
    cfg.response_vocab_size = 20;
    let mut model = Hran::new(cfg.clone()).map_err(err)?;
    model.params.output_projection.fill(0.0);
    let v = cfg.response_vocab_size as f64;
    let examples: Vec<_> = (0..40)
        .map(|_| {
            let m = 2 + rng.below(3);
            let context = random_context(&mut rng, cfg.context_vocab_size, m, 5, true);
            let mut target: Vec<usize> = (0..rng.below(6)).map(|_| 4 + rng.below(16)).collect();
            target.push(EOS);
            EncodedExample { context, target }
        })
        .collect();
    for (i, ex) in examples.iter().enumerate() {
        let nll = model.forward_nll(&ex.context, &ex.target).map_err(err)?;
        let expected = ex.target.len() as f64 * v.ln();
        ensure!((nll - expected).abs() <= 1e-9, "example {i}: nll {nll} vs {expected}");
    }
    let report = perplexity(&model, &examples, Normalization::Tokens).map_err(err)?;
    let worst = (report.perplexity - v).abs();
    ensure!(worst <= 1e-9, "perplexity {} vs {v}", report.perplexity);
    Ok(format!("40 examples, |PPL - V| = {worst:.1e}"))
}

/// Best complete output by exhaustive search, ranked like the beam: higher
/// log-probability, then lexicographically smaller ids.
fn enumerate_best<M: StepModel>(m: &M) -> Result<(Vec<usize>, f64, bool), String> {
    fn walk<M: StepModel>(
        m: &M,
        state: &M::State,
        prev: usize,
        tokens: &mut Vec<usize>,
        lp: f64,
        best: &mut Option<(Vec<usize>, f64, bool)>,
    ) -> Result<(), String> {
        let step = m.step(state, prev).map_err(err)?;
        for (tok, &l) in step.log_probs.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let total = lp + l;
            let mut offer = |cand: (Vec<usize>, f64, bool)| {
                let better = match best {
                    None => true,
                    Some((bt, bl, _)) => cand.1 > *bl || (cand.1 == *bl && cand.0 < *bt),
                };
                if better {
                    *best = Some(cand);
                }
            };
            if tok == EOS {
                offer((tokens.clone(), total, true));
                continue;
            }
            tokens.push(tok);
            if tokens.len() == m.max_len() {
                offer((tokens.clone(), total, false));
            } else {
                walk(m, &step.state, tok, tokens, total, best)?;
            }
            tokens.pop();
        }
        Ok(())
    }
    let mut best = None;
    walk(m, &m.start().map_err(err)?, BOS, &mut Vec::new(), 0.0, &mut best)?;
    best.ok_or_else(|| "no complete output".to_string())
}

fn decoding_optimality() -> Outcome {
    let mut rng = Rng::new(5);
    for trial in 0..100u64 {
        // ids 0..=2 are banned, leaving EOS and one or two words
        let allowed = 2 + rng.below(2);
        let max_len = 1 + rng.below(3);
        let toy = PrefixTableModel::new(4 + allowed - 1, max_len, 9000 + trial, vec![PAD, UNK, BOS]);
        let width = allowed.pow(max_len as u32);
        let hyps = beam_search(
            &toy,
            &BeamOptions {
                width,
                n_best: 1,
                length_normalize: false,
            },
        )
        .map_err(err)?;
        let (tokens, lp, finished) = enumerate_best(&toy)?;
        ensure!(
            hyps[0].tokens == tokens && hyps[0].finished == finished && (hyps[0].log_prob - lp).abs() <= 1e-12,
            "trial {trial}: beam {:?} vs enumeration {tokens:?}",
            hyps[0]
        );
    }
    for trial in 0..50u64 {
        let cfg = small_config(&mut rng, Ablation::ALL[trial as usize % 4], 7000 + trial);
        let model = Hran::new(cfg.clone()).map_err(err)?;
        let m = 2 + rng.below(3);
        let ctx = random_context(&mut rng, cfg.context_vocab_size, m, 4, false);
        let dec = HranDecoder::new(&model, &ctx, default_banned(false))
            .map_err(err)?
            .with_max_len(6);
        let greedy = greedy_decode(&dec).map_err(err)?;
        let beam = beam_search(
            &dec,
            &BeamOptions {
                width: 1,
                n_best: 1,
                length_normalize: false,
            },
        )
        .map_err(err)?;
        ensure!(
            beam[0].tokens == greedy.tokens
                && beam[0].finished == greedy.finished
                && (beam[0].log_prob - greedy.log_prob).abs() <= 1e-12,
            "context {trial}: beam {:?} vs greedy {:?}",
            beam[0].tokens,
            greedy.tokens
        );
    }
    Ok("100/100 toy argmax matches, width 1 equals greedy on 50 contexts".into())
}

fn memorization() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(6);
    let word = |rng: &mut Rng, prefix: &str, n: usize| format!("{prefix}{}", rng.below(n));
    let examples: Vec<Example> = (0..10)
        .map(|i| {
            let m = 2 + rng.below(2);
            let context = (0..m)
                .map(|_| (0..1 + rng.below(4)).map(|_| word(&mut rng, "w", 12)).collect())
                .collect();
            let mut response: Vec<String> = (0..1 + rng.below(3)).map(|_| word(&mut rng, "v", 8)).collect();
            response.insert(0, format!("t{i}"));
            Example { context, response }
        })
        .collect();
    let cv = build_vocab(&examples, Side::Context, 100).map_err(err)?.vocab;
    let rv = build_vocab(&examples, Side::Response, 100).map_err(err)?.vocab;
    let cfg = ModelConfig {
        seed: 6,
        ..ModelConfig::desk(cv.len(), rv.len())
    };
    let mut model = Hran::new(cfg).map_err(err)?;
    let batches = make_batches(&examples, 2, &cv, &rv).map_err(err)?;
    let encoded: Vec<_> = examples.iter().map(|e| encode_example(e, &cv, &rv)).collect();
    let schedule = TrainSchedule::default();
    let mut opt = AdaDelta::new(&model.params, schedule.rho, schedule.epsilon, schedule.initial_lr).map_err(err)?;
    let mut reached = None;
    let mut loss = f64::INFINITY;
    for epoch in 1..=500u64 {
        train_epoch(
            &mut model,
            &mut opt,
            &batches,
            &mut Rng::stream(6, epoch),
            schedule.clip_norm,
        )
        .map_err(err)?;
        loss = perplexity(&model, &encoded, Normalization::Tokens)
            .map_err(err)?
            .perplexity
            .ln();
        if loss < 0.1 {
            reached = Some(epoch);
            break;
        }
    }
    let Some(epoch) = reached else {
        return Err(format!("per-token loss still {loss:.4} after 500 epochs"));
    };
    for (i, ex) in encoded.iter().enumerate() {
        let dec = HranDecoder::new(&model, &ex.context, default_banned(false)).map_err(err)?;
        let out = greedy_decode(&dec).map_err(err)?;
        ensure!(
            out.finished && out.tokens[..] == ex.target[..ex.target.len() - 1],
            "example {i}: decoded {:?}, wanted {:?}",
            out.tokens,
            ex.target
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "loss {loss:.4} at epoch {epoch}, 10/10 reproduced, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn learning_signal() -> Outcome {
    let data = common::keyed_examples(600, 7);
    let (train, valid) = data.split_at(500);
    let cv = build_vocab(train, Side::Context, 1000).map_err(err)?.vocab;
    let rv = build_vocab(train, Side::Response, 1000).map_err(err)?.vocab;
    let schedule = TrainSchedule {
        batch_size: 16,
        max_epochs: 8,
        seed: 7,
        ..TrainSchedule::default()
    };
    let mut model = Hran::new(ModelConfig {
        seed: 7,
        ..ModelConfig::desk(cv.len(), rv.len())
    })
    .map_err(err)?;
    let batches = make_batches(train, schedule.batch_size, &cv, &rv).map_err(err)?;
    let train_enc: Vec<_> = train.iter().map(|e| encode_example(e, &cv, &rv)).collect();
    let valid_enc: Vec<_> = valid.iter().map(|e| encode_example(e, &cv, &rv)).collect();
    let state = FitState::new(&model, &schedule).map_err(err)?;
    let outcome = fit(
        &mut model,
        &batches,
        &valid_enc,
        &schedule,
        state,
        &mut |_, _, _| Ok(()),
    )
    .map_err(err)?;
    let best = outcome.state.best.ok_or("no best epoch")?;
    model.params = best.params;
    let full = perplexity(&model, &valid_enc, Normalization::Tokens)
        .map_err(err)?
        .perplexity;
    let unigram = UnigramBaseline::fit(&train_enc, rv.len()).map_err(err)?;
    let base = perplexity(&unigram, &valid_enc, Normalization::Tokens)
        .map_err(err)?
        .perplexity;
    ensure!(full < base, "full model {full:.4} is not below unigram {base:.4}");
    Ok(format!(
        "validation PPL {full:.4} (epoch {}) vs unigram {base:.4}",
        best.epoch
    ))
}

struct Trace {
    halved: Vec<usize>,
    stop: Option<usize>,
    lr: f64,
}

fn replay(ppls: &[f64], schedule: &TrainSchedule) -> Result<Trace, String> {
    let mut tracker = ScheduleTracker::new(schedule.initial_lr);
    let mut out = Trace {
        halved: Vec::new(),
        stop: None,
        lr: 0.0,
    };
    for (i, &p) in ppls.iter().enumerate() {
        let obs = tracker.observe(p, schedule).map_err(err)?;
        if obs.halved {
            out.halved.push(i + 1);
        }
        if obs.stop {
            out.stop = Some(i + 1);
            break;
        }
    }
    out.lr = tracker.lr;
    Ok(out)
}

fn schedule_conformance() -> Outcome {
    let best = TrainSchedule::default();
    let consecutive = TrainSchedule {
        stop_rule: StopRule::Consecutive,
        ..TrainSchedule::default()
    };
    let cases: [ScheduleCase; 5] = [
        (
            "halving",
            &[100.0, 90.0, 95.0, 80.0, 85.0, 84.0, 60.0],
            &best,
            &[3, 5],
            None,
            0.25,
        ),
        (
            "five small gains",
            &[50.0, 40.0, 39.0, 38.5, 38.2, 38.1, 38.05, 10.0],
            &best,
            &[],
            Some(7),
            1.0,
        ),
        (
            "gain resets",
            &[50.0, 49.0, 48.0, 47.0, 46.0, 40.0, 39.5, 39.0, 38.6, 38.3, 38.1],
            &best,
            &[],
            Some(11),
            1.0,
        ),
        (
            "halving while stalling",
            &[50.0, 48.0, 49.0, 47.5, 47.0, 46.9, 47.2],
            &best,
            &[3, 7],
            Some(7),
            0.25,
        ),
        // measured against the previous epoch, a rebound counts as progress
        (
            "consecutive rule",
            &[50.0, 60.0, 57.0, 54.0, 51.0, 50.5, 50.0, 49.9, 49.8, 49.7],
            &consecutive,
            &[2],
            Some(10),
            0.5,
        ),
    ];
    for (name, ppls, schedule, halved, stop, lr) in cases {
        let t = replay(ppls, schedule)?;
        ensure!(
            t.halved == halved,
            "{name}: halved at {:?}, wanted {halved:?}",
            t.halved
        );
        ensure!(t.stop == stop, "{name}: stopped at {:?}, wanted {stop:?}", t.stop);
        ensure!(t.lr == lr, "{name}: lr {}, wanted {lr}", t.lr);
    }
    Ok("5 injected sequences, halving and stop epochs exact".into())
}

fn preprocessing_exactness() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/raw200.txt");
    let path = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let prep = common::run_cli(
        &["prep", "--in", fixture.to_str().unwrap(), "--out", &path("kept.jsonl")],
        "",
    );
    ensure!(prep.code == 0, "prep failed: {}", prep.stderr);
    let tally: serde_json::Value = serde_json::from_str(&prep.stdout).map_err(err)?;
    let expected = serde_json::json!({
        "input": 200, "kept": 110, "rejected": 90,
        "too_few_turns": 24, "utterance_too_long": 19, "frequent_response": 51
    });
    ensure!(tally == expected, "tally {tally}");

    let kept = hran::io::read_examples(Path::new(&path("kept.jsonl"))).map_err(err)?;
    let mut seen = [false; 110];
    for ex in &kept {
        let n: usize = match ex.response.as_slice() {
            [a, b] if a == "是" => b.strip_prefix('r').and_then(|d| d.parse().ok()).ok_or("odd response")?,
            other => return Err(format!("unexpected survivor with response {other:?}")),
        };
        let mut first = format!("你好 呀 c{}", n % 5);
        if n.is_multiple_of(25) {
            first.push_str(&" 长".repeat(47));
        }
        let want: Vec<Vec<String>> = [first.as_str(), "在 吗"]
            .iter()
            .map(|u| u.split(' ').map(String::from).collect())
            .collect();
        ensure!(ex.context == want, "survivor r{n} has context {:?}", ex.context);
        ensure!(!std::mem::replace(&mut seen[n], true), "r{n} kept twice");
    }
    ensure!(seen.iter().all(|&s| s), "missing survivors");

    // responses are 是 x110 plus r0..r109 once each: 220 tokens
    for (size, covered) in [(1usize, 110.0), (11, 120.0), (200, 220.0)] {
        let out = common::run_cli(
            &[
                "vocab",
                "--in",
                &path("kept.jsonl"),
                "--out",
                &path("v.txt"),
                "--side",
                "response",
                "--size",
                &size.to_string(),
            ],
            "",
        );
        ensure!(out.code == 0, "vocab failed: {}", out.stderr);
        let v: serde_json::Value = serde_json::from_str(&out.stdout).map_err(err)?;
        let coverage = v["coverage"].as_f64().ok_or("no coverage")?;
        ensure!(
            (coverage - covered / 220.0).abs() <= 1e-12,
            "size {size}: coverage {coverage}"
        );
        ensure!(v["total_occurrences"] == 220, "total {}", v["total_occurrences"]);
    }
    // five words 110 times each plus 47 长 on five boundary lines: 785 tokens
    let out = common::run_cli(
        &[
            "vocab",
            "--in",
            &path("kept.jsonl"),
            "--out",
            &path("c.txt"),
            "--side",
            "context",
            "--size",
            "5",
        ],
        "",
    );
    let v: serde_json::Value = serde_json::from_str(&out.stdout).map_err(err)?;
    let coverage = v["coverage"].as_f64().ok_or("no coverage")?;
    ensure!((coverage - 675.0 / 785.0).abs() <= 1e-12, "context coverage {coverage}");
    let words = hran::io::read_vocab(Path::new(&path("c.txt"))).map_err(err)?;
    ensure!(
        words.tokens()[4..] == ["长", "你好", "吗", "呀", "在"],
        "context vocab {:?}",
        words.tokens()
    );
    Ok("tally, survivors and coverage exact".into())
}

fn bin(dir: &Path, args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hran"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("hran {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

const ARTIFACTS: [&str; 7] = [
    "run/last.ckpt",
    "run/best.ckpt",
    "run/report.jsonl",
    "eval.json",
    "gen.jsonl",
    "attn.json",
    "attn.svg",
];

fn full_pipeline(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    for a in ARTIFACTS {
        let _ = fs::remove_file(dir.join(a));
    }
    bin(dir, &["train", "--config", "config.json"])?;
    bin(
        dir,
        &[
            "eval",
            "--ckpt",
            "run/best.ckpt",
            "--data",
            "valid.jsonl",
            "--out",
            "eval.json",
        ],
    )?;
    bin(
        dir,
        &[
            "generate",
            "--ckpt",
            "run/best.ckpt",
            "--contexts",
            "contexts.txt",
            "--nbest",
            "2",
            "--out",
            "gen.jsonl",
        ],
    )?;
    bin(
        dir,
        &[
            "attn-export",
            "--ckpt",
            "run/best.ckpt",
            "--context",
            "ctx.txt",
            "--json",
            "attn.json",
            "--svg",
            "attn.svg",
        ],
    )?;
    ARTIFACTS
        .iter()
        .map(|a| fs::read(dir.join(a)).map_err(|e| format!("{a}: {e}")))
        .collect()
}

fn reproducibility() -> Outcome {
    let toy = common::Toy::new(80, 10);
    let dir = toy.dir.path();
    fs::write(dir.join("contexts.txt"), "k1 f2\tf3\tf4 f4\nf0 k5\tf1\n").map_err(err)?;
    fs::write(dir.join("ctx.txt"), "f2 k3 f1\nf5\nf6 f7\n").map_err(err)?;
    let first = full_pipeline(dir)?;
    let second = full_pipeline(dir)?;
    for (name, (a, b)) in ARTIFACTS.iter().zip(first.iter().zip(&second)) {
        ensure!(a == b, "{name} differs between invocations");
    }

    for name in ["run/last.ckpt", "run/best.ckpt"] {
        let bytes = fs::read(dir.join(name)).map_err(err)?;
        let ckpt = Checkpoint::from_bytes(&bytes, Path::new(name)).map_err(err)?;
        ensure!(ckpt.to_bytes() == bytes, "{name} does not round-trip");
    }

    // one epoch, then resume to the configured three
    fs::remove_dir_all(dir.join("run")).map_err(err)?;
    toy.write_config("short.json", 1, 16);
    bin(dir, &["train", "--config", "short.json"])?;
    bin(dir, &["train", "--config", "config.json", "--resume", "run/last.ckpt"])?;
    for (i, name) in ARTIFACTS[..3].iter().enumerate() {
        ensure!(
            fs::read(dir.join(name)).map_err(err)? == first[i],
            "{name} differs after a split run"
        );
    }
    Ok("train/eval/generate/attn-export bitwise stable, round-trip and resume exact".into())
}

fn check_export(export: &AttentionExport) -> Result<(), String> {
    let n = export.steps.len() as f64;
    for (i, row) in export.word_importance.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let mean = export.steps.iter().map(|s| s.alpha[i][j]).sum::<f64>() / n;
            ensure!((w - mean).abs() <= 1e-9, "word ({i},{j}): {w} vs mean {mean}");
        }
    }
    for (i, &b) in export.utterance_importance.iter().enumerate() {
        let mean = export.steps.iter().map(|s| s.beta[i]).sum::<f64>() / n;
        ensure!((b - mean).abs() <= 1e-9, "utterance {i}: {b} vs mean {mean}");
    }
    Ok(())
}

fn attention_export_check() -> Outcome {
    let ckpt = common::pinned_checkpoint();
    let context: Vec<Vec<String>> = ["f1 k4 f2", "f3 你好", "f0 f6 在吗"]
        .iter()
        .map(|u| u.split(' ').map(String::from).collect())
        .collect();
    let response = ["r4".to_string(), "好的".to_string()];
    let mut steps = 0;
    for (tag, resp) in [("teacher", Some(&response[..])), ("greedy", None)] {
        let export = export_attention(&ckpt, &context, resp, &ckpt.run.decode).map_err(err)?;
        check_export(&export)?;
        steps += export.steps.len();
        let again = export_attention(&ckpt, &context, resp, &ckpt.run.decode).map_err(err)?;
        let (json, svg) = (to_json(&export), to_svg(&export));
        ensure!(
            json == to_json(&again) && svg == to_svg(&again),
            "{tag}: export not stable"
        );
        common::check_golden(&format!("attn_{tag}.json"), &json)?;
        common::check_golden(&format!("attn_{tag}.svg"), &svg)?;
    }
    Ok(format!("averages match {steps} steps, golden JSON/SVG byte-identical"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("attention simplex", attention_simplex),
        ("backward-sweep causality", backward_causality),
        ("uniform-model oracle", uniform_oracle),
        ("decoding optimality", decoding_optimality),
        ("memorization", memorization),
        ("learning signal", learning_signal),
        ("schedule conformance", schedule_conformance),
        ("preprocessing exactness", preprocessing_exactness),
        ("reproducibility", reproducibility),
        ("attention export", attention_export_check),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
