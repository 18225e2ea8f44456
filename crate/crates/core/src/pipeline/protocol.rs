//! End-to-end recipes and the run directory they write.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::checkpoint::Checkpoint;
use super::config::{FinalEval, Protocol, RunConfig};
use super::metrics::Metrics;
use super::train::{
    evaluate, finetune, fresh_encoder, generate_pseudo_labels, linear_evaluate, model_dims, pretrain_tstcc,
    pseudo_label_checkpoint, train_catcc, train_supervised, StepRecord,
};
use crate::data::{split_labeled_subset, Dataset, LabeledSplit, MinMaxStats, UNLABELED};
use crate::error::{Error, Result};
use crate::nn::ModelDims;
use crate::rng::SeedStream;

/// Normalized data and the labeled/unlabeled partition a run trains on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub split: LabeledSplit,
    pub norm: Option<MinMaxStats>,
    pub dims: ModelDims,
    /// True labels of `split.unlabeled`, when the source had them.
    pub unlabeled_truth: Option<Vec<i64>>,
}

/// Validate the config against the data, normalize, and split. Nothing is
/// trained.
pub fn prepare(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Prepared> {
    cfg.validate()?;
    if (train.channels(), train.length(), train.num_classes()) != (test.channels(), test.length(), test.num_classes()) {
        return Err(Error::shape(format!(
            "train is ({}, {}, {} classes) but test is ({}, {}, {} classes)",
            train.channels(),
            train.length(),
            train.num_classes(),
            test.channels(),
            test.length(),
            test.num_classes()
        )));
    }
    if test.is_empty() || !test.is_fully_labeled() {
        return Err(Error::data("test set must be nonempty and fully labeled"));
    }
    let t = &cfg.train;
    let dims = model_dims(t, train.channels(), train.length(), train.num_classes())?;
    t.augment.validate(Some(train.length()))?;
    let (train, test, norm) = if t.normalize {
        let stats = MinMaxStats::fit(train)?;
        (stats.apply(train)?, stats.apply(test)?, Some(stats))
    } else {
        (train.clone(), test.clone(), None)
    };
    let seed = SeedStream::new(t.seed).named("split").key();
    let fraction = cfg.data.labels_fraction;
    let (split, unlabeled_truth) = if train.is_fully_labeled() {
        let split = split_labeled_subset(&train, fraction, seed)?;
        let truth = split.unlabeled_indices.iter().map(|&i| train.labels()[i]).collect();
        (split, Some(truth))
    } else if fraction == 1.0 {
        // partially labeled input: keep its own partition
        let (labeled, unlabeled): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| train.labels()[i] != UNLABELED);
        if labeled.is_empty() {
            return Err(Error::data("training set has no labeled samples"));
        }
        let split = LabeledSplit {
            labeled: train.subset(&labeled),
            unlabeled: train.subset(&unlabeled),
            fraction,
            seed,
            labeled_indices: labeled,
            unlabeled_indices: unlabeled,
        };
        (split, None)
    } else {
        return Err(Error::data(
            "labels_fraction below 1 needs a fully labeled training set",
        ));
    };
    Ok(Prepared {
        train,
        test,
        split,
        norm,
        dims,
        unlabeled_truth,
    })
}

/// Outcome of one protocol run.
#[derive(Debug, Clone)]
pub struct Report {
    pub protocol: Protocol,
    pub seed: u64,
    pub labels_fraction: f64,
    pub metrics: Metrics,
    /// `(file name, checkpoint id)` in phase order.
    pub checkpoints: Vec<(String, String)>,
    pub records: Vec<StepRecord>,
    /// Agreement of pseudo labels with the withheld truth.
    pub pseudo_agreement: Option<f64>,
}

struct RunDir {
    dir: Option<PathBuf>,
    checkpoints: Vec<(String, String)>,
}

impl RunDir {
    fn save(&mut self, ck: &Checkpoint, file: &str) -> Result<()> {
        let id = match &self.dir {
            Some(d) => ck.save(d.join(file))?,
            None => ck.id()?,
        };
        info!("{file}: checkpoint {id}");
        self.checkpoints.push((file.to_string(), id));
        Ok(())
    }
}

/// Run `cfg.run.protocol` end to end. With `out_dir` set, checkpoints,
/// the config snapshot and CSV logs are written there.
pub fn run_protocol(cfg: &RunConfig, train: &Dataset, test: &Dataset, out_dir: Option<&Path>) -> Result<Report> {
    let prep = prepare(cfg, train, test)?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("config.snapshot"), cfg.to_toml())?;
    }
    let mut dir = RunDir {
        dir: out_dir.map(Path::to_path_buf),
        checkpoints: Vec::new(),
    };
    let t = &cfg.train;
    let labeled = &prep.split.labeled;
    let mut records = Vec::new();
    let mut pseudo_agreement = None;
    let with_norm = |mut ck: Checkpoint| {
        ck.norm = prep.norm.clone();
        ck
    };

    let metrics = match cfg.run.protocol {
        Protocol::Tstcc => {
            let p1 = pretrain_tstcc(&prep.train, t)?;
            let pre = with_norm(p1.checkpoint);
            dir.save(&pre, "phase1.ckpt")?;
            records.extend(p1.records);
            match t.final_eval {
                FinalEval::Finetune => {
                    let p2 = finetune(&pre, labeled, t)?;
                    dir.save(&p2.checkpoint, "phase2.ckpt")?;
                    records.extend(p2.records);
                    evaluate(&p2.checkpoint, &prep.test)?
                }
                FinalEval::Linear => linear_evaluate(&pre, labeled, &prep.test, t)?,
            }
        }
        Protocol::Catcc => {
            let p1 = pretrain_tstcc(&prep.train, t)?;
            let pre = with_norm(p1.checkpoint);
            dir.save(&pre, "phase1.ckpt")?;
            records.extend(p1.records);

            let p2 = finetune(&pre, labeled, t)?;
            dir.save(&p2.checkpoint, "phase2.ckpt")?;
            records.extend(p2.records);

            let pseudo = generate_pseudo_labels(&p2.checkpoint, &prep.split.unlabeled, prep.unlabeled_truth.as_deref())?;
            pseudo_agreement = pseudo.agreement;
            if let Some(a) = pseudo.agreement {
                info!("pseudo labels: {} kept, agreement {:.4}", pseudo.kept.len(), a);
            }
            let p3 = pseudo_label_checkpoint(&p2.checkpoint, &pseudo);
            dir.save(&p3, "phase3.ckpt")?;

            let combined = labeled.concat(&pseudo.dataset)?;
            let p4 = train_catcc(&p3, &combined, t)?;
            dir.save(&p4.checkpoint, "phase4.ckpt")?;
            records.extend(p4.records);

            match t.final_eval {
                FinalEval::Finetune => {
                    let fin = finetune(&p4.checkpoint, labeled, t)?;
                    records.extend(fin.records);
                    evaluate(&fin.checkpoint, &prep.test)?
                }
                FinalEval::Linear => linear_evaluate(&p4.checkpoint, labeled, &prep.test, t)?,
            }
        }
        Protocol::Supervised => {
            let sup = train_supervised(labeled, t)?;
            let ck = with_norm(sup.checkpoint);
            dir.save(&ck, "phase2.ckpt")?;
            records.extend(sup.records);
            evaluate(&ck, &prep.test)?
        }
        Protocol::RandomInit => {
            let ck = with_norm(fresh_encoder(t, train.channels(), train.length(), train.num_classes())?);
            dir.save(&ck, "phase1.ckpt")?;
            linear_evaluate(&ck, labeled, &prep.test, t)?
        }
    };

    let report = Report {
        protocol: cfg.run.protocol,
        seed: t.seed,
        labels_fraction: cfg.data.labels_fraction,
        metrics,
        checkpoints: dir.checkpoints,
        records,
        pseudo_agreement,
    };
    if let Some(d) = out_dir {
        write_metrics_csv(&d.join("metrics.csv"), &report.records)?;
        write_report_csv(&d.join("report.csv"), &report)?;
    }
    Ok(report)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("{other:?}")),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
    w.write_record(["phase", "epoch", "step", "total", "tc_strong", "tc_weak", "contextual", "cross_entropy"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.phase.to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.total.to_string(),
            opt(r.tc_strong),
            opt(r.tc_weak),
            opt(r.contextual),
            opt(r.cross_entropy),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub const REPORT_COLUMNS: [&str; 5] = ["protocol", "seed", "labels_fraction", "accuracy", "mf1"];

pub fn write_report_csv(path: &Path, r: &Report) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = REPORT_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..r.metrics.f1.len()).map(|k| format!("f1_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut row = vec![
        r.protocol.to_string(),
        r.seed.to_string(),
        r.labels_fraction.to_string(),
        r.metrics.accuracy.to_string(),
        r.metrics.mf1.to_string(),
    ];
    row.extend(r.metrics.f1.iter().map(|v| v.to_string()));
    w.write_record(&row).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}
