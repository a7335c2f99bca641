//! Training loop, evaluation, decoding, gradient suite and ablation grids.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{rel_pos_table, AttnMask, MultiHeadAttention, RelPos, Terms};
use crate::checkpoint::{average_checkpoints, ModelCheckpoint};
use crate::config::RunConfig;
use crate::cptcn::{aggregate_features, Cptcn, CptcnConfig};
use crate::ctc::{ctc_loss_var, GlossSequence};
use crate::data::{load_dataset, split_path};
use crate::error::{Error, Result};
use crate::gathering::{GatherConfig, GatherVariant};
use crate::gradcheck::{finite_difference_check, GradReport};
use crate::graph::{Graph, Var};
use crate::metrics::{edit_counts, sentence_bleu, BleuStats, EditCounts};
use crate::model::{Example, JointModel};
use crate::optim::{clip_grad_norm, AdamState};
use crate::params::{Forward, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::translate::{predict, DecodeConfig};

/// Loads one split and checks it was generated with `cfg.corpus`.
pub fn load_examples<T: Scalar>(cfg: &RunConfig, data_dir: &Path, split: &str) -> Result<Vec<Example<T>>> {
    let path = split_path(data_dir, split);
    if !path.exists() {
        return Err(Error::Invalid(format!("missing dataset file {} (run generate-data first)", path.display())));
    }
    let ds = load_dataset(&path)?;
    if ds.config != cfg.corpus {
        return Err(Error::Config(format!("{} was generated with a different corpus config", path.display())));
    }
    ds.samples.iter().map(Example::from_sample).collect()
}

fn derive(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rand::Rng::random(&mut rng)
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub ctc_loss: f64,
    pub ce_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub infeasible: usize,
}

/// Forward, backward and one Adam update; the step is rejected on a non-finite loss.
pub fn train_step<T: Scalar>(
    model: &mut JointModel<T>,
    adam: &mut AdamState<T>,
    batch: &[&Example<T>],
    lr: f64,
    cfg: &RunConfig,
    dropout_rng: ChaCha8Rng,
) -> Result<StepRecord> {
    let mut f = Forward::train(&model.store, cfg.model.dropout, dropout_rng);
    let parts = model.joint_loss(&mut f, batch)?;
    let total = f.g.value(parts.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite { context: format!("loss at step {} (step rejected)", adam.step + 1), index: 0 });
    }
    let mut grads = f.param_grads(parts.total)?;
    drop(f);
    let grad_norm = clip_grad_norm(&mut grads, cfg.train.grad_clip);
    adam.update(&mut model.store, &grads, lr, &cfg.train.adam)?;
    Ok(StepRecord {
        step: adam.step,
        lr,
        ctc_loss: parts.ctc.as_f64(),
        ce_loss: parts.ce.as_f64(),
        total: total.as_f64(),
        grad_norm,
        infeasible: parts.infeasible.len(),
    })
}

/// Deterministic epoch-shuffled batch order.
pub struct BatchSampler {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut s = BatchSampler { seed, n, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.seed, 1000 + self.epoch));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.n) {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn json_line<W: Write, S: Serialize>(w: &mut W, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Invalid(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct ConfigRecord<'a> {
    kind: &'static str,
    digest: String,
    config: &'a RunConfig,
}

fn config_record(cfg: &RunConfig) -> ConfigRecord<'_> {
    ConfigRecord { kind: "run_config", digest: cfg.digest(), config: cfg }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub last: PathBuf,
    pub averaged: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:07}.ckpt")
}

/// Full training run writing `metrics.jsonl`, periodic checkpoints,
/// `last.ckpt` (with optimizer moments) and `averaged.ckpt`.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    examples: &[Example<T>],
    out_dir: &Path,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let tc = &cfg.train;
    let mut model = JointModel::<T>::new(cfg.architecture(), derive(tc.seed, 1))?;
    let mut adam = AdamState::new(&model.store);
    let mut sampler = BatchSampler::new(derive(tc.seed, 2), examples.len());
    let schedule = tc.schedule();
    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    json_line(&mut metrics, &config_record(cfg))?;
    let mut records = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    for step in 1..=tc.steps {
        let batch: Vec<&Example<T>> = sampler.next_batch(tc.batch_size).into_iter().map(|i| &examples[i]).collect();
        let rng = ChaCha8Rng::seed_from_u64(derive(tc.seed, 1_000_000 + step));
        let rec = train_step(&mut model, &mut adam, &batch, schedule.at(step), cfg, rng)?;
        if step % tc.log_every == 0 || step == tc.steps {
            json_line(&mut metrics, &rec)?;
            on_step(&rec);
        }
        records.push(rec);
        if step % tc.checkpoint_every == 0 || step == tc.steps {
            let path = out_dir.join(checkpoint_name(step));
            ModelCheckpoint::capture(cfg, &model, step, None).save(&path)?;
            checkpoints.push(path);
            while checkpoints.len() > tc.average_last {
                fs::remove_file(checkpoints.remove(0))?;
            }
        }
    }
    metrics.flush()?;
    let last = out_dir.join("last.ckpt");
    ModelCheckpoint::capture(cfg, &model, tc.steps, Some(&adam)).save(&last)?;
    let averaged = out_dir.join("averaged.ckpt");
    average_files::<T>(&checkpoints)?.save(&averaged)?;
    Ok(TrainOutcome { steps: tc.steps, records, checkpoints, last, averaged })
}

pub fn average_files<T: Scalar>(paths: &[PathBuf]) -> Result<ModelCheckpoint<T>> {
    let ckpts = paths.iter().map(|p| ModelCheckpoint::<T>::load(p)).collect::<Result<Vec<_>>>()?;
    average_checkpoints(&ckpts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TranslationMetrics {
    pub wer: f64,
    pub edits: EditCounts,
    pub bleu: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub kind: &'static str,
    pub split: String,
    pub samples: usize,
    pub ctc_loss: f64,
    pub ce_loss: f64,
    /// Gloss recognition WER.
    pub wer: f64,
    pub edits: EditCounts,
    pub translation: Option<TranslationMetrics>,
}

/// Per-sample decoding output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    pub index: usize,
    pub glosses: Vec<usize>,
    pub reference_glosses: Vec<usize>,
    pub words: Option<Vec<usize>>,
    pub reference_words: Vec<usize>,
    pub score: Option<f64>,
    pub log_prob: Option<f64>,
    pub sentence_bleu: Option<f64>,
}

pub fn decode_all<T: Scalar>(model: &JointModel<T>, examples: &[Example<T>], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    examples
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let p = predict(model, &ex.features, cfg)?;
            let t = p.translation.as_ref();
            Ok(Hypothesis {
                index,
                glosses: p.glosses.0.clone(),
                reference_glosses: ex.glosses.0.clone(),
                words: t.map(|t| t.words.clone()),
                reference_words: ex.words.clone(),
                score: t.map(|t| t.score),
                log_prob: t.map(|t| t.log_prob),
                sentence_bleu: t.map(|t| sentence_bleu(&ex.words, &t.words)),
            })
        })
        .collect()
}

/// Mean evaluation losses: CTC over feasible samples, cross-entropy over tokens.
pub fn evaluation_losses<T: Scalar>(model: &JointModel<T>, examples: &[Example<T>]) -> Result<(f64, f64)> {
    let (mut ctc, mut n_ctc, mut ce, mut n_tok) = (0.0, 0usize, 0.0, 0usize);
    for ex in examples {
        let mut f = Forward::eval(&model.store);
        let parts = model.joint_loss(&mut f, &[ex])?;
        if parts.infeasible.is_empty() && model.arch.model.lambda_r > 0.0 {
            ctc += parts.ctc.as_f64();
            n_ctc += 1;
        }
        if model.arch.model.lambda_t > 0.0 {
            let tokens = ex.words.len() + 1;
            ce += parts.ce.as_f64() * tokens as f64;
            n_tok += tokens;
        }
    }
    Ok((if n_ctc > 0 { ctc / n_ctc as f64 } else { 0.0 }, if n_tok > 0 { ce / n_tok as f64 } else { 0.0 }))
}

pub fn evaluate<T: Scalar>(model: &JointModel<T>, examples: &[Example<T>], split: &str, cfg: &DecodeConfig) -> Result<(EvalReport, Vec<Hypothesis>)> {
    let hyps = decode_all(model, examples, cfg)?;
    let (ctc_loss, ce_loss) = evaluation_losses(model, examples)?;
    let mut edits = EditCounts::default();
    let mut word_edits = EditCounts::default();
    let mut bleu = BleuStats::default();
    for h in &hyps {
        edits.merge(&edit_counts(&h.reference_glosses, &h.glosses));
        if let Some(words) = &h.words {
            word_edits.merge(&edit_counts(&h.reference_words, words));
            bleu.add(&h.reference_words, words);
        }
    }
    let translation = model.has_decoder().then(|| TranslationMetrics {
        wer: word_edits.rate(),
        edits: word_edits,
        bleu: [1, 2, 3, 4].map(|n| bleu.score(n, false)),
    });
    let report = EvalReport { kind: "evaluation", split: split.into(), samples: examples.len(), ctc_loss, ce_loss, wer: edits.rate(), edits, translation };
    Ok((report, hyps))
}

/// Writes the run config and the report as two JSON lines.
pub fn write_report(cfg: &RunConfig, report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    json_line(&mut w, &config_record(cfg))?;
    json_line(&mut w, report)?;
    w.flush()?;
    Ok(())
}

pub fn write_hypotheses(cfg: &RunConfig, hyps: &[Hypothesis], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    json_line(&mut w, &config_record(cfg))?;
    for h in hyps {
        json_line(&mut w, h)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient suite

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: std::result::Result<GradReport, String>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.passed())
    }
}

/// `sum(x * R)` for a fixed random `R`, so every output element carries weight.
fn project<T: Scalar>(g: &mut Graph<T>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(Tensor::randn(g.shape(x), 1.0, &mut rng));
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn check<F>(name: &str, params: Vec<Tensor<f64>>, f: F) -> SuiteEntry
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    SuiteEntry { name: name.into(), report: finite_difference_check(f, &params, GRAD_EPS, GRAD_TOL).map_err(|e| e.to_string()) }
}

fn check_store<F>(name: &str, store: &ParamStore<f64>, build: F) -> SuiteEntry
where
    F: Fn(&mut Forward<f64>) -> Result<Var>,
{
    check(name, store.tensors().to_vec(), |g, vars| {
        let mut f = Forward::from_graph(std::mem::take(g), vars.to_vec());
        let out = build(&mut f);
        *g = f.g;
        out
    })
}

/// Finite-difference checks for every primitive, the clip aggregator,
/// relative-position attention, CTC and a toy joint model.
pub fn gradient_suite(seed: u64) -> Vec<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = vec![
        check("matmul", vec![rand_t(&[3, 4], r), rand_t(&[4, 2], r)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        }),
        check("matmul_transposed", vec![rand_t(&[4, 3], r), rand_t(&[2, 4], r)], |g, v| {
            let y = g.matmul_t(v[0], v[1], true, true)?;
            project(g, y, 2)
        }),
        check("transpose", vec![rand_t(&[3, 2], r)], |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, 3)
        }),
        check("add_mul_scale", vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)], |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            let s = g.scale(m, 0.7);
            project(g, s, 4)
        }),
        check("add_row", vec![rand_t(&[3, 4], r), rand_t(&[4], r)], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, 5)
        }),
        check("relu", vec![rand_t(&[4, 5], r)], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 6)
        }),
        check("softmax", vec![rand_t(&[3, 5], r)], |g, v| {
            let y = g.softmax(v[0]);
            project(g, y, 7)
        }),
        check("log_softmax", vec![rand_t(&[3, 5], r)], |g, v| {
            let y = g.log_softmax(v[0]);
            project(g, y, 8)
        }),
        check("layer_norm", vec![rand_t(&[2, 3, 6], r), rand_t(&[6], r), rand_t(&[6], r)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, 9)
        }),
        check("conv1d", vec![rand_t(&[2, 6, 3], r), rand_t(&[3, 3, 4], r), rand_t(&[4], r)], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2])?;
            project(g, y, 10)
        }),
        check("max_time", vec![rand_t(&[3, 5, 4], r)], |g, v| {
            let y = g.max_time(v[0])?;
            project(g, y, 11)
        }),
        check("gather_rows", vec![rand_t(&[4, 3], r)], |g, v| {
            let y = g.gather_rows(v[0], &[3, 0, 0, 2, 3])?;
            project(g, y, 12)
        }),
        check("gather_flat", vec![rand_t(&[3, 4], r)], |g, v| {
            let y = g.gather_flat(v[0], vec![0, 5, 5, 11, 2, 7], &[2, 3])?;
            project(g, y, 13)
        }),
        check("masked_fill_softmax", vec![rand_t(&[3, 3], r)], |g, v| {
            let m = g.masked_fill(v[0], &[false, true, true, false, false, true, false, false, false])?;
            let y = g.softmax(m);
            project(g, y, 14)
        }),
        check("cross_entropy", vec![rand_t(&[4, 5], r)], |g, v| g.cross_entropy(v[0], &[1, 0, 4, 2], Some(0))),
        check("concat_slice_reshape", vec![rand_t(&[2, 3], r), rand_t(&[2, 2], r)], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let s = g.slice_cols(c, 1, 3)?;
            let rr = g.concat_rows(&[s, s])?;
            let y = g.reshape(rr, &[3, 4])?;
            project(g, y, 15)
        }),
    ];

    let ctc_target = GlossSequence::new(vec![1, 2, 2]).expect("non-blank target");
    out.push(check("ctc_loss", vec![rand_t(&[7, 4], r)], move |g, v| {
        let lp = g.log_softmax(v[0]);
        Ok(ctc_loss_var(g, lp, &ctc_target)?.0)
    }));

    let (d, m) = (4, 12);
    let gather = GatherConfig { variant: GatherVariant::ContentAware, l: 4, gamma: 1.0 };
    let mut store = ParamStore::new();
    let block = Cptcn::new(&mut store, "cptcn", d, &gather, r);
    let feats = store.add("features", rand_t(&[m, d], r));
    let cfg = CptcnConfig::default();
    out.push(check_store("cptcn_pipeline", &store, |f| {
        let x = f.p(feats);
        let y = aggregate_features(f, x, &block, &gather, &cfg)?;
        project(&mut f.g, y, 16)
    }));

    let (dm, heads, l) = (8, 2, 3);
    let mut store = ParamStore::new();
    let table = rel_pos_table(&mut store, "rel", l, dm, r);
    let mha = MultiHeadAttention::new(&mut store, "attn", dm, heads, true, r);
    let q = store.add("q", rand_t(&[5, dm], r));
    let kv = store.add("kv", rand_t(&[6, dm], r));
    let rel = RelPos { table, terms: Terms::ALL, max_distance: l };
    out.push(check_store("drpe_attention", &store, |f| {
        let (qv, kvv) = (f.p(q), f.p(kv));
        let y = mha.forward(f, qv, kvv, kvv, Some(&rel), &AttnMask::causal())?.out;
        project(&mut f.g, y, 17)
    }));

    out.push(joint_model_check(r));
    out
}

fn joint_model_check(rng: &mut ChaCha8Rng) -> SuiteEntry {
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 16;
    cfg.model.encoder_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.ff_width = 32;
    cfg.model.dropout = 0.0;
    cfg.attention.heads = 2;
    cfg.attention.max_distance = 8;
    cfg.gathering = GatherConfig { variant: GatherVariant::ContentAware, l: 4, gamma: 1.0 };
    cfg.corpus.input_dim = 6;
    cfg.corpus.glosses = 4;
    cfg.corpus.glosses_per_sentence = [2, 3];
    let model = match JointModel::<f64>::new(cfg.architecture(), 11) {
        Ok(m) => m,
        Err(e) => return SuiteEntry { name: "joint_model".into(), report: Err(e.to_string()) },
    };
    let ex = Example {
        features: crate::data::FeatureSequence::new(Tensor::randn(&[20, 6], 1.0, rng)),
        glosses: GlossSequence::new(vec![1, 3, 2]).expect("non-blank"),
        words: vec![4, 6, 3],
    };
    check_store("joint_model", &model.store, |f| Ok(model.joint_loss(f, &[&ex])?.total))
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub grid: String,
    pub settings: Vec<(String, toml::Value)>,
    pub config: RunConfig,
}

impl AblationCell {
    pub fn dir_name(&self) -> String {
        self.config.digest()[..16].to_string()
    }

    pub fn label(&self) -> String {
        self.settings.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

/// Expands the configured grids (optionally only `only`) into cells.
pub fn ablation_cells(cfg: &RunConfig, only: Option<&str>) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    let grids: Vec<_> = cfg.ablation.grids.iter().filter(|g| only.is_none_or(|o| o == g.name)).collect();
    if grids.is_empty() {
        return Err(Error::Config(format!("no ablation grid named {:?}", only.unwrap_or(""))));
    }
    for grid in grids {
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for axis in &grid.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((axis.key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        for settings in combos {
            let mut ov = settings.clone();
            ov.push(("train.steps".into(), toml::Value::Integer(cfg.ablation.steps as i64)));
            let config = cfg.with_overrides(&ov)?;
            cells.push(AblationCell { grid: grid.name.clone(), settings, config });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, Serialize)]
pub struct CellSummary {
    pub grid: String,
    pub settings: String,
    pub dir: String,
    pub final_loss: f64,
    pub dev: EvalReport,
}

/// Trains and evaluates every cell; each gets `out_dir/<grid>/<digest>/`.
pub fn run_ablation<T: Scalar>(
    cells: &[AblationCell],
    data_dir: &Path,
    out_dir: &Path,
    mut progress: impl FnMut(&CellSummary),
) -> Result<Vec<CellSummary>> {
    fs::create_dir_all(out_dir)?;
    let mut summaries = Vec::new();
    let mut index = BufWriter::new(File::create(out_dir.join("ablation.jsonl"))?);
    for cell in cells {
        let dir = out_dir.join(&cell.grid).join(cell.dir_name());
        let train_set = load_examples::<T>(&cell.config, data_dir, "train")?;
        let dev_set = load_examples::<T>(&cell.config, data_dir, "dev")?;
        let outcome = train(&cell.config, &train_set, &dir, |_| {})?;
        let model = ModelCheckpoint::<T>::load(&outcome.averaged)?.restore()?;
        let (report, _) = evaluate(&model, &dev_set, "dev", &cell.config.decode)?;
        write_report(&cell.config, &report, &dir.join("report.jsonl"))?;
        let summary = CellSummary {
            grid: cell.grid.clone(),
            settings: cell.label(),
            dir: dir.strip_prefix(out_dir).unwrap_or(&dir).display().to_string(),
            final_loss: outcome.records.last().map_or(f64::NAN, |r| r.total),
            dev: report,
        };
        json_line(&mut index, &summary)?;
        progress(&summary);
        summaries.push(summary);
    }
    index.flush()?;
    Ok(summaries)
}
