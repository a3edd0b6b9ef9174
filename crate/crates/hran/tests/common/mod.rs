#![allow(dead_code)]

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use hran_core::corpus::Example;
use hran_core::numerics::Rng;
use tempfile::TempDir;

pub const KEYS: usize = 8;
pub const FILLERS: usize = 8;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Context-dependent toy data: the first utterance hides one key word among
/// fillers, later utterances are fillers only, and the response names the
/// key. A model has to look back two or more turns to do better than the
/// unigram rate.
pub fn keyed_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let key = rng.below(KEYS);
            let m = 2 + rng.below(2);
            let mut context = Vec::with_capacity(m);
            for i in 0..m {
                let len = 1 + rng.below(3);
                let mut u: Vec<String> = (0..len).map(|_| format!("f{}", rng.below(FILLERS))).collect();
                if i == 0 {
                    let at = rng.below(len + 1);
                    u.insert(at, format!("k{key}"));
                }
                context.push(u);
            }
            Example {
                context,
                response: words(&format!("r{key}")),
            }
        })
        .collect()
}

pub fn raw_text(examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        let turns: Vec<String> = ex
            .context
            .iter()
            .chain(std::iter::once(&ex.response))
            .map(|t| t.join(" "))
            .collect();
        out.push_str(&turns.join("\t"));
        out.push('\n');
    }
    out
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the CLI in-process.
pub fn run_cli(args: &[&str], stdin: &str) -> Output {
    let mut input = Cursor::new(stdin.as_bytes().to_vec());
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["hran"];
    full.extend_from_slice(args);
    let code = hran::cli::run(full, &mut input, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

/// A scratch directory holding a small prepared corpus and a run config.
pub struct Toy {
    pub dir: TempDir,
}

pub const TOY_MODEL: &str = r#"{
    "word_hidden": 6, "utt_hidden": 6, "decoder_hidden": 6,
    "embed_dim": 5, "attn_dim": 6, "max_decode_length": 6,
    "init_scale": 0.1, "init_spread": "std-dev"
}"#;

impl Toy {
    /// Writes raw.txt and runs prep, split and both vocab builds.
    pub fn new(n: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let toy = Toy { dir };
        fs::write(toy.path("raw.txt"), raw_text(&keyed_examples(n, seed))).unwrap();
        for args in [
            vec!["prep", "--in", "raw.txt", "--out", "all.jsonl"],
            vec![
                "split",
                "--in",
                "all.jsonl",
                "--train",
                "train.jsonl",
                "--valid",
                "valid.jsonl",
                "--test",
                "test.jsonl",
                "--fractions",
                "0.7,0.2,0.1",
                "--seed",
                "1",
            ],
            vec![
                "vocab",
                "--in",
                "train.jsonl",
                "--out",
                "cvocab.txt",
                "--side",
                "context",
                "--size",
                "100",
            ],
            vec![
                "vocab",
                "--in",
                "train.jsonl",
                "--out",
                "rvocab.txt",
                "--side",
                "response",
                "--size",
                "100",
            ],
        ] {
            let out = toy.run(&args);
            assert_eq!(out.code, 0, "{args:?}: {}", out.stderr);
        }
        toy.write_config("config.json", 3, 16);
        toy
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    pub fn write_config(&self, name: &str, max_epochs: usize, batch_size: usize) {
        let config = format!(
            r#"{{
  "paths": {{
    "train": "train.jsonl", "validation": "valid.jsonl",
    "context_vocab": "cvocab.txt", "response_vocab": "rvocab.txt",
    "output_dir": "run"
  }},
  "model": {TOY_MODEL},
  "schedule": {{ "batch_size": {batch_size}, "max_epochs": {max_epochs} }},
  "decode": {{ "beam": 3, "max_len": 6 }},
  "seed": 7
}}"#
        );
        fs::write(self.path(name), config).unwrap();
    }

    /// Runs the CLI with every relative path argument taken inside the
    /// scratch directory.
    pub fn run(&self, args: &[&str]) -> Output {
        let owned: Vec<String> = args
            .iter()
            .map(|a| {
                let looks_like_file = a.contains('.') && !a.starts_with('-') && !a.contains(',');
                if looks_like_file || a.starts_with("run/") {
                    self.arg(a)
                } else {
                    a.to_string()
                }
            })
            .collect();
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        run_cli(&refs, "")
    }

    pub fn read(&self, name: &str) -> Vec<u8> {
        fs::read(self.path(name)).unwrap()
    }
}

pub fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` with a stored golden file. Set `HRAN_UPDATE_GOLDEN=1`
/// to rewrite the files instead.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_path(name);
    if std::env::var_os("HRAN_UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{} differs from the generated output", path.display()))
    }
}

/// Small seed-pinned checkpoint trained for a few epochs on keyed data, with
/// a couple of wide-glyph words in both vocabularies.
pub fn pinned_checkpoint() -> hran::Checkpoint {
    use hran_core::corpus::{encode_example, Vocab};
    use hran_core::model::{Hran, ModelConfig};
    use hran_core::training::{fit, make_batches, FitState, TrainSchedule};

    let mut context_words: Vec<String> = (0..KEYS).map(|k| format!("k{k}")).collect();
    context_words.extend((0..FILLERS).map(|f| format!("f{f}")));
    context_words.extend(["你好", "在吗"].map(String::from));
    let mut response_words: Vec<String> = (0..KEYS).map(|k| format!("r{k}")).collect();
    response_words.push("好的".into());
    let cv = Vocab::with_words(context_words).unwrap();
    let rv = Vocab::with_words(response_words).unwrap();
    let mut run = hran::RunConfig {
        model: serde_json::from_str(TOY_MODEL).unwrap(),
        schedule: TrainSchedule {
            batch_size: 8,
            max_epochs: 4,
            ..TrainSchedule::default()
        },
        seed: 11,
        ..hran::RunConfig::default()
    };
    run.model = ModelConfig {
        context_vocab_size: cv.len(),
        response_vocab_size: rv.len(),
        ..run.model
    };
    run.decode.beam = 3;
    run.decode.max_len = 6;
    run.apply_seed();
    let data = keyed_examples(48, 3);
    let batches = make_batches(&data[..40], 8, &cv, &rv).unwrap();
    let valid: Vec<_> = data[40..].iter().map(|e| encode_example(e, &cv, &rv)).collect();
    let mut model = Hran::new(run.model.clone()).unwrap();
    let state = FitState::new(&model, &run.schedule).unwrap();
    let out = fit(
        &mut model,
        &batches,
        &valid,
        &run.schedule,
        state,
        &mut |_, _, _| Ok(()),
    )
    .unwrap();
    hran::Checkpoint {
        role: hran::checkpoint::Role::Last,
        run,
        epoch: out.state.epoch,
        valid_ppl: out.state.records.last().map(|r| r.valid_ppl),
        context_vocab: cv,
        response_vocab: rv,
        model,
        fit: Some(out.state),
    }
}
