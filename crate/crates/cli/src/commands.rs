//! The six CLI commands: pretrain, finetune, evaluate, corrupt, metrics,
//! dwt. Every run writes a resolved-config snapshot next to its outputs;
//! on error all partial outputs of the run are removed.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use rf_core::corrupt::{
    apply_corruption, make_perturbation_sequence, CorruptionKind, CorruptionSpec,
    PerturbationSequenceSpec, ALL_KINDS,
};
use rf_core::io::{read_rftn, write_rftn, Checkpoint};
use rf_core::metrics::{
    corruption_error, flip_probability, mean_corruption_error, mean_flip_probability,
    robustness_by_category, robustness_for_kind, BaselineErrorTable, Condition, PredRecord,
    PredictionLog, SEVERITIES,
};
use rf_core::model::Model;
use rf_core::optim::AdamW;
use rf_core::rng::stream_id;
use rf_core::tensor::Tensor;
use rf_core::wavelet::{dwt, idwt, Boundary, WaveletFilter};
use rf_core::{Error, Result};

use crate::config::RunConfig;
use crate::datasets::{load_set, SetRole};
use crate::plot::{line_chart, Series};
use crate::trainer::{self, model_config, TrainSettings};

/// Tracks files and directories a run creates so they can be removed if the
/// run fails partway.
struct OutDir {
    dir: PathBuf,
    created: Vec<PathBuf>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            created: Vec::new(),
        })
    }

    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.created.push(p.clone());
        p
    }

    fn subdir(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        std::fs::create_dir_all(&p)?;
        self.created.push(p.clone());
        Ok(p)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        std::fs::write(p, text)?;
        Ok(())
    }

    fn discard(&self) {
        for p in self.created.iter().rev() {
            if p.is_dir() {
                let _ = std::fs::remove_dir_all(p);
            } else {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

fn with_cleanup<F: FnOnce(&mut OutDir) -> Result<()>>(dir: &Path, f: F) -> Result<()> {
    let mut out = OutDir::create(dir)?;
    match f(&mut out) {
        Ok(()) => Ok(()),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn save_model_checkpoint(
    path: &Path,
    model: &Model<f32>,
    opt: &AdamW<f32>,
    seed: u64,
    config_text: &str,
) -> Result<()> {
    Checkpoint {
        names: model.params.names().to_vec(),
        tensors: model.params.tensors().to_vec(),
        opt_m: opt.m.clone(),
        opt_v: opt.v.clone(),
        step: opt.step,
        seed,
        config_text: config_text.to_string(),
    }
    .save(path)
}

/// Re-parses a config with the checkpoint's model.* keys as the base layer,
/// so finetune/evaluate runs inherit the trained architecture unless
/// explicitly overridden.
fn layered_config(
    ckpt: &Checkpoint<f32>,
    file_text: &str,
    source: &str,
    sets: &[String],
    skip: &[&str],
) -> Result<RunConfig> {
    let mut base = String::new();
    for line in ckpt.config_text.lines() {
        if let Some((key, _)) = line.split_once('=') {
            let key = key.trim();
            if key.starts_with("model.") && !skip.contains(&key) {
                base.push_str(line);
                base.push('\n');
            }
        }
    }
    let mut cfg = RunConfig::from_text(&base, "checkpoint")?;
    cfg.merge_text(file_text, source)?;
    cfg.apply_overrides(sets)?;
    Ok(cfg)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.get_u64("run.seed", 42)?;
    let out_path = cfg.get_path("run.out")?;
    with_cleanup(&out_path, |out| {
        let train = load_set(cfg, SetRole::Train)?;
        let mcfg = model_config(cfg, &train)?;
        let settings = TrainSettings::from_config(cfg, 1.5e-4, train.is_video())?;
        cfg.reject_unknown()?;
        let mut model = Model::<f32>::new(mcfg, seed)?;
        let (log, opt) = trainer::pretrain(&mut model, &train, &settings, seed)?;
        let mut text = String::from("step\tlr\tloss\n");
        for (step, lr, loss) in &log {
            text.push_str(&format!("{step}\t{lr}\t{loss}\n"));
        }
        out.write_text("pretrain_loss.tsv", &text)?;
        let snapshot = cfg.snapshot();
        save_model_checkpoint(&out.file("pretrain.rfck"), &model, &opt, seed, &snapshot)?;
        out.write_text("resolved.config", &snapshot)?;
        Ok(())
    })
}

pub fn cmd_finetune(cfg0: &RunConfig, file_text: &str, source: &str, sets: &[String]) -> Result<()> {
    let from = cfg0.get_path("finetune.from")?;
    let ckpt = Checkpoint::<f32>::load(&from)?;
    // classes follow the finetune dataset, not the pretrain run
    let cfg = layered_config(&ckpt, file_text, source, sets, &["model.classes"])?;
    let _ = cfg.get_path("finetune.from")?;
    let seed = cfg.get_u64("run.seed", 42)?;
    let out_path = cfg.get_path("run.out")?;
    with_cleanup(&out_path, |out| {
        let train = load_set(&cfg, SetRole::Train)?;
        let test = load_set(&cfg, SetRole::Test)?;
        let mcfg = model_config(&cfg, &train)?;
        let settings = TrainSettings::from_config(&cfg, 1e-3, train.is_video())?;
        cfg.reject_unknown()?;
        let mut model = Model::<f32>::new(mcfg, seed)?;
        let adopted = model.adopt_matching_params(&ckpt.names, &ckpt.tensors);
        if adopted == 0 {
            return Err(Error::data(format!(
                "checkpoint {} shares no parameters with this model",
                from.display()
            )));
        }
        let (log, opt) = trainer::finetune(&mut model, &train, &test, &settings, seed)?;
        let mut text = String::from("epoch\tloss\ttest_accuracy\n");
        for (epoch, loss, acc) in &log {
            text.push_str(&format!("{epoch}\t{loss}\t{acc}\n"));
        }
        out.write_text("finetune_log.tsv", &text)?;
        let snapshot = cfg.snapshot();
        save_model_checkpoint(&out.file("finetune.rfck"), &model, &opt, seed, &snapshot)?;
        out.write_text("resolved.config", &snapshot)?;
        Ok(())
    })
}

fn parse_kinds(list: &[String], video: bool) -> Result<Vec<CorruptionKind>> {
    if list.len() == 1 && list[0] == "all" {
        return Ok(ALL_KINDS
            .into_iter()
            .filter(|k| video || !k.requires_video())
            .collect());
    }
    list.iter().map(|s| CorruptionKind::parse(s)).collect()
}

fn parse_severities(cfg: &RunConfig, key: &str) -> Result<Vec<u8>> {
    cfg.get_list(key, "1,2,3,4,5")
        .iter()
        .map(|s| {
            s.parse::<u8>()
                .map_err(|_| Error::config(format!("bad severity `{s}` in {key}")))
        })
        .collect()
}

/// Derives the per-cell corruption seed from the run seed and cell identity.
fn cell_seed(seed: u64, kind: CorruptionKind, severity: u8, sample: u64) -> u64 {
    seed ^ stream_id(&format!("cell/{}/s{severity}/i{sample}", kind.name()))
}

pub fn cmd_evaluate(cfg0: &RunConfig, file_text: &str, source: &str, sets: &[String]) -> Result<()> {
    let ckpt_path = cfg0.get_path("eval.checkpoint")?;
    let ckpt = Checkpoint::<f32>::load(&ckpt_path)?;
    let cfg = layered_config(&ckpt, file_text, source, sets, &[])?;
    let _ = cfg.get_path("eval.checkpoint")?;
    let seed = cfg.get_u64("run.seed", 42)?;
    let out_path = cfg.get_path("run.out")?;
    with_cleanup(&out_path, |out| {
        let test = load_set(&cfg, SetRole::Test)?;
        let video = test.is_video();
        let mcfg = model_config(&cfg, &test)?;
        let kinds = parse_kinds(&cfg.get_list("eval.corruptions", "all"), video)?;
        let severities = parse_severities(&cfg, "eval.severities")?;
        let seq_kinds = parse_kinds(&cfg.get_list("eval.sequences", "none"), video)?;
        let seq_len = cfg.get_usize("eval.sequence_length", 11)?;
        let seq_count = cfg.get_usize("eval.sequence_count", 16)?.min(test.len());
        let seq_severity = cfg.get_u64("eval.sequence_severity", 3)? as u8;
        cfg.reject_unknown()?;
        let mut model = Model::<f32>::new(mcfg, ckpt.seed)?;
        let adopted = model.adopt_matching_params(&ckpt.names, &ckpt.tensors);
        if adopted < ckpt.names.len().min(model.params.len()) / 2 {
            return Err(Error::data(format!(
                "checkpoint {} does not match the configured model (adopted {adopted} tensors)",
                ckpt_path.display()
            )));
        }
        let mut records: Vec<PredRecord> = Vec::new();
        // clean predictions (also feeding the top-1/top-5 summary)
        let clean: Vec<(u32, bool)> = test
            .samples
            .par_iter()
            .map(|(x, label)| {
                let (pred, logits) = model.predict(x)?;
                let mut better = 0;
                for &v in logits.data() {
                    if v > logits.data()[*label as usize] {
                        better += 1;
                    }
                }
                Ok(((pred as u32), better < 5))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, ((pred, _), (_, label))) in clean.iter().zip(&test.samples).enumerate() {
            records.push(PredRecord {
                sample_id: i as u64,
                condition: Condition::Clean,
                predicted: *pred,
                truth: *label,
            });
        }
        let top1 = 100.0
            * clean
                .iter()
                .zip(&test.samples)
                .filter(|((p, _), (_, l))| p == l)
                .count() as f64
            / test.len() as f64;
        let top5 =
            100.0 * clean.iter().filter(|(_, in5)| *in5).count() as f64 / test.len() as f64;
        // corruption grid, parallel over cells, merged in sorted order
        let cells: Vec<(CorruptionKind, u8)> = kinds
            .iter()
            .flat_map(|&k| severities.iter().map(move |&s| (k, s)))
            .collect();
        let cell_records: Vec<Result<Vec<PredRecord>>> = cells
            .par_iter()
            .map(|&(kind, severity)| {
                let mut recs = Vec::with_capacity(test.len());
                for (i, (x, label)) in test.samples.iter().enumerate() {
                    let spec =
                        CorruptionSpec::new(kind, severity, cell_seed(seed, kind, severity, i as u64))?;
                    let corrupted = apply_corruption(x, &spec)?;
                    let (pred, _) = model.predict(&corrupted)?;
                    recs.push(PredRecord {
                        sample_id: i as u64,
                        condition: Condition::Corrupted {
                            kind: kind.name().to_string(),
                            severity,
                        },
                        predicted: pred as u32,
                        truth: *label,
                    });
                }
                Ok(recs)
            })
            .collect();
        for r in cell_records {
            records.extend(r?);
        }
        // perturbation sequences
        let seq_cells: Vec<(CorruptionKind, u64)> = seq_kinds
            .iter()
            .flat_map(|&k| (0..seq_count as u64).map(move |i| (k, i)))
            .collect();
        let seq_records: Vec<Result<Vec<PredRecord>>> = seq_cells
            .par_iter()
            .map(|&(kind, i)| {
                let (x, label) = &test.samples[i as usize];
                let spec = PerturbationSequenceSpec::new(
                    kind,
                    seq_len,
                    seq_severity,
                    cell_seed(seed, kind, 0, i),
                )?;
                let frames = make_perturbation_sequence(x, &spec)?;
                let mut recs = Vec::with_capacity(frames.len());
                for (j, frame) in frames.iter().enumerate() {
                    let (pred, _) = model.predict(frame)?;
                    recs.push(PredRecord {
                        sample_id: i,
                        condition: Condition::Sequence {
                            kind: kind.name().to_string(),
                            position: (j + 1) as u32,
                        },
                        predicted: pred as u32,
                        truth: *label,
                    });
                }
                Ok(recs)
            })
            .collect();
        for r in seq_records {
            records.extend(r?);
        }
        records.sort_by(|a, b| {
            (&a.condition, a.sample_id).cmp(&(&b.condition, b.sample_id))
        });
        let mut log = PredictionLog::new();
        for r in records {
            log.push(r);
        }
        log.validate()?;
        log.save(&out.file("predictions.tsv"))?;
        out.write_text(
            "summary.tsv",
            &format!("clean_top1\t{top1}\nclean_top5\t{top5}\n"),
        )?;
        out.write_text("resolved.config", &cfg.snapshot())?;
        Ok(())
    })
}

pub fn cmd_corrupt(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.get_u64("run.seed", 42)?;
    let out_path = cfg.get_path("run.out")?;
    with_cleanup(&out_path, |out| {
        let role = match cfg.get_str("corrupt.split", "test").as_str() {
            "train" => SetRole::Train,
            "test" => SetRole::Test,
            other => return Err(Error::config(format!("bad corrupt.split `{other}`"))),
        };
        let set = load_set(cfg, role)?;
        let video = set.is_video();
        let kinds = parse_kinds(&cfg.get_list("corrupt.kinds", "all"), video)?;
        let severities = parse_severities(cfg, "corrupt.severities")?;
        cfg.reject_unknown()?;
        let cells: Vec<(CorruptionKind, u8)> = kinds
            .iter()
            .flat_map(|&k| severities.iter().map(move |&s| (k, s)))
            .collect();
        let mut manifest: Vec<String> = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for &(kind, severity) in &cells {
            let sub = format!("{}_s{}", kind.name(), severity);
            let dir = out.subdir(&sub)?;
            let outputs: Vec<Result<(String, u64, u32, Tensor<f32>)>> = set
                .samples
                .par_iter()
                .enumerate()
                .map(|(i, (x, label))| {
                    let sseed = cell_seed(seed, kind, severity, i as u64);
                    let spec = CorruptionSpec::new(kind, severity, sseed)?;
                    let corrupted = apply_corruption(x, &spec)?;
                    Ok((format!("{sub}/sample_{i:05}.rftn"), sseed, *label, corrupted))
                })
                .collect();
            for o in outputs {
                let (rel, sseed, label, corrupted) = o?;
                write_rftn(&dir.join(Path::new(&rel).file_name().unwrap()), &corrupted)?;
                manifest.push(format!("{rel}\t{}\t{severity}\t{sseed}", kind.name()));
                labels.push(format!("{rel}\t{label}"));
            }
        }
        manifest.sort();
        labels.sort();
        out.write_text("manifest.tsv", &(manifest.join("\n") + "\n"))?;
        out.write_text("labels.tsv", &(labels.join("\n") + "\n"))?;
        out.write_text("resolved.config", &cfg.snapshot())?;
        Ok(())
    })
}

pub fn cmd_metrics(cfg: &RunConfig) -> Result<()> {
    let out_path = cfg.get_path("run.out")?;
    with_cleanup(&out_path, |out| {
        let log = PredictionLog::load(&cfg.get_path("metrics.log")?)?;
        log.validate()?;
        let clamp = cfg.get_bool("metrics.clamp_gamma", false)?;
        let baseline = cfg.get_opt_path("metrics.baseline");
        let baseline_out = cfg.get_opt_path("metrics.baseline_out");
        cfg.reject_unknown()?;
        let kinds = log.corruption_kinds();
        // accuracy table + severity plot
        let mut acc_text = String::from("condition\tseverity\taccuracy\n");
        let clean_acc = log.clean_accuracy()?;
        acc_text.push_str(&format!("clean\t0\t{clean_acc}\n"));
        let mut series = Vec::new();
        for kind in &kinds {
            let mut pts = Vec::new();
            for s in SEVERITIES {
                let a = log.corrupted_accuracy(kind, s)?;
                acc_text.push_str(&format!("{kind}\t{s}\t{a}\n"));
                pts.push((s as f64, a));
            }
            series.push(Series {
                label: kind.clone(),
                points: pts,
            });
        }
        out.write_text("accuracy.tsv", &acc_text)?;
        if !series.is_empty() {
            out.write_text(
                "accuracy_severity.svg",
                &line_chart("top-1 accuracy vs severity", "severity", "accuracy %", &series),
            )?;
        }
        // corruption error against a supplied baseline
        if let Some(bpath) = baseline {
            let table = BaselineErrorTable::load(&bpath)?;
            let mut text = String::from("corruption\tce\tce_x100\n");
            for kind in &kinds {
                let ce = corruption_error(&log, &table, kind)?;
                text.push_str(&format!("{kind}\t{ce}\t{}\n", ce * 100.0));
            }
            if !kinds.is_empty() {
                let mce = mean_corruption_error(&log, &table)?;
                text.push_str(&format!("mCE\t{mce}\t{}\n", mce * 100.0));
            }
            out.write_text("ce.tsv", &text)?;
        }
        // flip probability over sequences
        let seq_kinds = log.sequence_kinds();
        if !seq_kinds.is_empty() {
            let mut text = String::from("perturbation\tfp\n");
            for kindds in &seq_kinds {
                text.push_str(&format!("{kindds}\t{}\n", flip_probability(&log, kindds)?));
            }
            text.push_str(&format!("mFP\t{}\n", mean_flip_probability(&log)?));
            out.write_text("fp.tsv", &text)?;
        }
        // robustness scores per kind and per category
        if !kinds.is_empty() {
            let mut text = String::from("scope\tname\tgamma_a\tgamma_r\n");
            for kind in &kinds {
                let (ga, gr) = robustness_for_kind(&log, kind, clamp)?;
                text.push_str(&format!("kind\t{kind}\t{ga}\t{gr}\n"));
            }
            let categories = robustness_by_category(
                &log,
                |kind| {
                    CorruptionKind::parse(kind)
                        .map(|k| k.category().to_string())
                        .unwrap_or_else(|_| "other".to_string())
                },
                clamp,
            )?;
            for (cat, (ga, gr)) in categories {
                text.push_str(&format!("category\t{cat}\t{ga}\t{gr}\n"));
            }
            out.write_text("gamma.tsv", &text)?;
        }
        // optionally export this log's own errors as a baseline table
        if let Some(bout) = baseline_out {
            let mut table = BaselineErrorTable::new();
            for kind in &kinds {
                for s in SEVERITIES {
                    let e = log.corrupted_error(kind, s)?;
                    // the table forbids zero entries (division guard)
                    table.insert(kind, s, e.max(1e-9))?;
                }
            }
            table.save(&bout)?;
        }
        out.write_text("resolved.config", &cfg.snapshot())?;
        Ok(())
    })
}

pub fn cmd_dwt(cfg: &RunConfig) -> Result<()> {
    let out_path = cfg.get_path("run.out")?;
    with_cleanup(&out_path, |out| {
        let input = cfg.get_path("dwt.input")?;
        let axes: Vec<usize> = cfg
            .get_list("dwt.axes", "0,1")
            .iter()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::config(format!("bad axis `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let filter = WaveletFilter::<f64>::by_name(&cfg.get_str("dwt.filter", "haar"))?;
        let boundary = Boundary::parse(&cfg.get_str("dwt.boundary", "zero"))?;
        let op = cfg.get_str("dwt.op", "forward");
        cfg.reject_unknown()?;
        let x = read_rftn(&input)?.into_f64();
        let set = dwt(&x, &axes, &filter, boundary)?;
        match op.as_str() {
            "forward" => {
                for (i, band) in set.bands.iter().enumerate() {
                    write_rftn(&out.file(&format!("band_{}.rftn", set.name_of(i))), band)?;
                }
            }
            "roundtrip" => {
                let back = idwt(&set, &filter, boundary)?;
                let err = back.sub(&x)?.max_abs();
                write_rftn(&out.file("reconstruction.rftn"), &back)?;
                out.write_text("roundtrip_error.txt", &format!("{err}\n"))?;
                println!("roundtrip max abs error: {err}");
            }
            other => return Err(Error::config(format!("unknown dwt.op `{other}`"))),
        }
        out.write_text("resolved.config", &cfg.snapshot())?;
        Ok(())
    })
}

/// Entry point shared by the binary and the tests.
pub fn run_command(command: &str, file_text: &str, source: &str, sets: &[String]) -> Result<()> {
    let mut cfg = RunConfig::from_text(file_text, source)?;
    cfg.apply_overrides(sets)?;
    match command {
        "pretrain" => cmd_pretrain(&cfg),
        "finetune" => cmd_finetune(&cfg, file_text, source, sets),
        "evaluate" => cmd_evaluate(&cfg, file_text, source, sets),
        "corrupt" => cmd_corrupt(&cfg),
        "metrics" => cmd_metrics(&cfg),
        "dwt" => cmd_dwt(&cfg),
        other => Err(Error::config(format!("unknown command `{other}`"))),
    }
}
