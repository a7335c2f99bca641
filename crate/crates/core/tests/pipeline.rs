use std::fs;
use std::path::Path;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use signjoint::checkpoint::ModelCheckpoint;
use signjoint::config::{parse_value, RunConfig};
use signjoint::ctc::GlossSequence;
use signjoint::data::{generate_corpus, split_path, FeatureSequence, BOS, EOS, FIRST_WORD};
use signjoint::experiment::{evaluate, evaluation_losses, load_examples, train, write_report};
use signjoint::model::{Example, JointModel};
use signjoint::params::Forward;
use signjoint::translate::{beam_search, length_penalty, DecodeConfig};
use signjoint::{Scalar, Tensor64};

fn tiny_config() -> RunConfig {
    let overrides = [
        ("corpus.glosses", "5"),
        ("corpus.train_size", "12"),
        ("corpus.dev_size", "4"),
        ("corpus.test_size", "4"),
        ("corpus.glosses_per_sentence", "[2, 3]"),
        ("corpus.frames_per_gloss", "[4, 6]"),
        ("corpus.input_dim", "6"),
        ("model.d_model", "16"),
        ("model.encoder_layers", "1"),
        ("model.decoder_layers", "1"),
        ("model.ff_width", "32"),
        ("attention.heads", "2"),
        ("gathering.l", "4"),
        ("train.steps", "6"),
        ("train.batch_size", "4"),
        ("train.lr_peak", "1e-3"),
        ("train.warmup", "3"),
        ("train.checkpoint_every", "2"),
        ("train.average_last", "2"),
        ("train.log_every", "1"),
        ("decode.beam_width", "3"),
        ("decode.max_words", "8"),
    ];
    let parsed: Vec<_> = overrides.iter().map(|(k, v)| (k.to_string(), parse_value(v))).collect();
    RunConfig::default().with_overrides(&parsed).unwrap()
}

fn corpus(cfg: &RunConfig, dir: &Path) {
    generate_corpus(&cfg.corpus, cfg.architecture().min_frames(), dir).unwrap();
}

#[test]
fn checkpoint_roundtrip_preserves_losses_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    corpus(&cfg, tmp.path());
    for_precision::<f64>(&cfg, tmp.path());
    for_precision::<f32>(&cfg, tmp.path());

    fn for_precision<T: Scalar>(cfg: &RunConfig, dir: &Path) {
        let dev = load_examples::<T>(cfg, dir, "dev").unwrap();
        let model = JointModel::<T>::new(cfg.architecture(), 17).unwrap();
        let before = evaluation_losses(&model, &dev).unwrap();
        let path = dir.join("model.ckpt");
        ModelCheckpoint::capture(cfg, &model, 3, None).save(&path).unwrap();
        let restored = ModelCheckpoint::<T>::load(&path).unwrap().restore().unwrap();
        let after = evaluation_losses(&restored, &dev).unwrap();
        assert_eq!(before.0.to_bits(), after.0.to_bits());
        assert_eq!(before.1.to_bits(), after.1.to_bits());
    }
}

#[test]
fn exact_gradient_descent_overfits_one_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    corpus(&cfg, tmp.path());
    let train_set = load_examples::<f64>(&cfg, tmp.path(), "train").unwrap();
    let batch: Vec<&Example<f64>> = train_set.iter().take(2).collect();
    let mut model = JointModel::<f64>::new(cfg.architecture(), 5).unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut f = Forward::exact(&model.store);
        let loss = model.joint_loss(&mut f, &batch).unwrap().total;
        losses.push(f.g.value(loss).item());
        let grads = f.param_grads(loss).unwrap();
        drop(f);
        for (id, g) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&grads) {
            for (p, d) in model.store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= 2e-3 * d;
            }
        }
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss rose: {losses:?}");
    }
    assert!(losses[49] < 0.9 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn corpus_training_and_reports_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    corpus(&cfg, &a);
    corpus(&cfg, &b);
    for split in ["train", "dev", "test"] {
        assert_eq!(fs::read(split_path(&a, split)).unwrap(), fs::read(split_path(&b, split)).unwrap());
    }
    let run = |root: &Path| {
        let train_set = load_examples::<f32>(&cfg, root, "train").unwrap();
        let dev_set = load_examples::<f32>(&cfg, root, "dev").unwrap();
        let out = root.join("run");
        let outcome = train(&cfg, &train_set, &out, |_| {}).unwrap();
        let model = ModelCheckpoint::<f32>::load(&outcome.averaged).unwrap().restore().unwrap();
        let (report, _) = evaluate(&model, &dev_set, "dev", &cfg.decode).unwrap();
        write_report(&cfg, &report, &out.join("report.jsonl")).unwrap();
        (outcome, out)
    };
    let (oa, ra) = run(&a);
    let (ob, rb) = run(&b);
    assert_eq!(oa.records, ob.records);
    assert_eq!(oa.checkpoints.len(), 2);
    for name in ["metrics.jsonl", "report.jsonl", "last.ckpt", "averaged.ckpt", "step_0000006.ckpt"] {
        assert_eq!(fs::read(ra.join(name)).unwrap(), fs::read(rb.join(name)).unwrap(), "{name}");
    }
    assert!(!ra.join("step_0000002.ckpt").exists());
    let first = fs::read_to_string(ra.join("metrics.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(record["kind"], "run_config");
    assert_eq!(record["config"]["train"]["steps"], 6);
}

/// Every word sequence up to `max_words - 1` words followed by EOS.
fn exhaustive_best(model: &JointModel<f64>, features: &FeatureSequence<f64>, cfg: &DecodeConfig) -> (Vec<usize>, f64) {
    let mut f = Forward::eval(&model.store);
    let enc = model.encode(&mut f, features).unwrap();
    let vocab = model.arch.word_vocab;
    let log_softmax = |f: &mut Forward<f64>, prefix: &[usize]| -> Vec<f64> {
        let logits = model.decode(f, enc.states, prefix).unwrap();
        let row = f.g.value(logits).row(prefix.len() - 1).to_vec();
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        row.iter().map(|v| v - lse).collect()
    };
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(vec![BOS], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let next = log_softmax(&mut f, &prefix);
        let ended = lp + next[EOS];
        let score = ended / length_penalty(prefix.len(), cfg.length_penalty);
        if score > best.1 {
            best = (prefix[1..].to_vec(), score);
        }
        if prefix.len() < cfg.max_words {
            for w in FIRST_WORD..vocab {
                let mut p = prefix.clone();
                p.push(w);
                stack.push((p, lp + next[w]));
            }
        }
    }
    best
}

#[test]
fn wide_beam_finds_exhaustive_optimum() {
    let cfg = tiny_config();
    let mut arch = cfg.architecture();
    arch.word_vocab = 6;
    let model = JointModel::<f64>::new(arch, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for alpha in [0.0, 1.0] {
        let dc = DecodeConfig { beam_width: 500, length_penalty: alpha, max_words: 4, ctc_beam_width: 1 };
        for _ in 0..3 {
            let features = FeatureSequence::new(Tensor64::randn(&[12, 6], 1.0, &mut rng));
            let (words, score) = exhaustive_best(&model, &features, &dc);
            let mut f = Forward::eval(&model.store);
            let enc = model.encode(&mut f, &features).unwrap();
            let t = beam_search(&model, &mut f, enc.states, &dc).unwrap();
            assert!((t.score - score).abs() < 1e-9, "beam {} vs exhaustive {}", t.score, score);
            assert_eq!(t.words, words);
        }
    }
}

#[test]
fn infeasible_sample_is_excluded_not_fatal() {
    let cfg = tiny_config();
    let model = JointModel::<f64>::new(cfg.architecture(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ok = Example {
        features: FeatureSequence::new(Tensor64::randn(&[10, 6], 1.0, &mut rng)),
        glosses: GlossSequence::new(vec![1, 2]).unwrap(),
        words: vec![FIRST_WORD, FIRST_WORD + 1],
    };
    let bad = Example { glosses: GlossSequence::new(vec![1; 10]).unwrap(), ..ok.clone() };
    let mut f = Forward::exact(&model.store);
    let both = model.joint_loss(&mut f, &[&ok, &bad]).unwrap();
    assert_eq!(both.infeasible.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![1]);
    let mut g = Forward::exact(&model.store);
    let alone = model.joint_loss(&mut g, &[&ok]).unwrap();
    assert_eq!(both.ctc.as_f64(), alone.ctc.as_f64());
    assert!(f.g.value(both.total).item().is_finite());
}

fn signjoint(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_signjoint")).args(args).current_dir(cwd).env_remove("SIGNJOINT_DATA").output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = tiny_config();
    fs::write(dir.join("run.toml"), cfg.to_toml()).unwrap();

    let help = signjoint(&["--help"], dir);
    assert_eq!(help.status.code(), Some(0));

    let gen = signjoint(&["--config", "run.toml", "generate-data", "--out", "data"], dir);
    assert_eq!(gen.status.code(), Some(0), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(dir.join("data/train.sgj").exists());

    let unknown = signjoint(&["--config", "run.toml", "--model.nonsense", "3", "generate-data"], dir);
    assert_eq!(unknown.status.code(), Some(1));

    let missing = signjoint(&["--config", "run.toml", "train", "--data", "nowhere"], dir);
    assert_eq!(missing.status.code(), Some(1));

    let mismatch = signjoint(&["--config", "run.toml", "--corpus.seed", "99", "train", "--data", "data"], dir);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("corpus"));

    let bad_flag = signjoint(&["frobnicate"], dir);
    assert_eq!(bad_flag.status.code(), Some(1));

    let trained = signjoint(&["--config", "run.toml", "--train.steps", "2", "train", "--data", "data", "--out", "run"], dir);
    assert_eq!(trained.status.code(), Some(0), "{}", String::from_utf8_lossy(&trained.stderr));

    let eval = signjoint(&["--config", "run.toml", "evaluate", "--checkpoint", "run/averaged.ckpt", "--data", "data", "--split", "dev"], dir);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["samples"], 4);

    let arch_change = signjoint(&["evaluate", "--checkpoint", "run/averaged.ckpt", "--data", "data", "--model.d_model", "32"], dir);
    assert_eq!(arch_change.status.code(), Some(1));

    fs::write(dir.join("broken.ckpt"), b"SGJCKPT\0garbage").unwrap();
    let broken = signjoint(&["evaluate", "--checkpoint", "broken.ckpt", "--data", "data"], dir);
    assert_eq!(broken.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("offset"));
}
