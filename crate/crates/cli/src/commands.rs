//! One function per subcommand. Each reads its inputs from the resolved
//! config, writes artifacts under `out_dir`, and returns its metrics.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use contramatch::blocking::{self, recall_cssr, Candidate, CandidateSet};
use contramatch::checkpoint::{load_encoder, save_encoder};
use contramatch::corpus::{EmDataset, LabeledPair};
use contramatch::encoder::EmbeddingModel;
use contramatch::matcher::{
    evaluate, finetune, read_predictions, write_finetune_log, write_predictions, MatcherModel, PairExample,
};
use contramatch::pretrain::write_training_log;
use contramatch::pseudolabel::{
    assign_pseudo, build_training_set, initial_theta, pseudo_quality, read_training_pairs, thresholds_for,
    write_training_pairs, Provenance, TrainingPair,
};
use contramatch::rng;
use contramatch::tasks::cleaning::{
    clean_table, correction_f1, read_candidates as read_cell_candidates, read_corrections, read_dirty_table,
    sample_rows, write_corrections, CleaningInstance,
};
use contramatch::tasks::columns::{
    annotate_majority, cluster_purity, clusters_from_candidates, column_candidates, column_examples, column_index,
    label_sampled_pairs, read_clusters, read_column_types, read_columns, split_2_1_1, write_clusters, ColumnItem,
};
use contramatch::tasks::em::{
    block, end_to_end_f1, predict_candidates, pretrain_on_sequences, pretrain_on_tables, run_em, ItemLookup,
};

use crate::config::{ConfigError, RunConfig};
use crate::metrics::Metrics;

pub const COMMANDS: [&str; 9] = [
    "pretrain",
    "block",
    "pseudolabel",
    "finetune",
    "predict",
    "em",
    "clean",
    "colmatch",
    "eval",
];

#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    Stage { stage: String, error: contramatch::Error },
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "{e}"),
            Failure::Stage { stage, error } => write!(f, "stage `{stage}` failed: {error}"),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

/// Attach a stage name to a library error, preferring the stage the library
/// reported.
fn at<T>(stage: &str, r: contramatch::Result<T>) -> Outcome<T> {
    r.map_err(|error| Failure::Stage {
        stage: error.stage().unwrap_or(stage).to_owned(),
        error,
    })
}

fn io<T>(stage: &str, r: std::io::Result<T>) -> Outcome<T> {
    at(stage, r.map_err(contramatch::Error::from))
}

pub fn run_command(name: &str, cfg: &RunConfig) -> Outcome<Metrics> {
    io(name, std::fs::create_dir_all(cfg.out_dir()))?;
    match name {
        "pretrain" => pretrain(cfg),
        "block" => block_cmd(cfg),
        "pseudolabel" => pseudolabel(cfg),
        "finetune" => finetune_cmd(cfg),
        "predict" => predict(cfg),
        "em" => em(cfg),
        "clean" => clean(cfg),
        "colmatch" => colmatch(cfg),
        "eval" => eval(cfg),
        other => unreachable!("unregistered command `{other}`"),
    }
}

fn dataset(cfg: &RunConfig) -> Outcome<EmDataset> {
    let dir = cfg.existing_path("data_dir")?;
    EmDataset::load(&dir).map_err(|e| ConfigError::invalid("data_dir", cfg.get("data_dir"), e.to_string()).into())
}

fn create(stage: &str, path: &Path) -> Outcome<BufWriter<File>> {
    Ok(BufWriter::new(io(stage, File::create(path))?))
}

fn open(stage: &str, path: &Path) -> Outcome<BufReader<File>> {
    Ok(BufReader::new(io(stage, File::open(path))?))
}

/// An artifact path that must exist; missing ones are blamed on `key`.
fn input_artifact(cfg: &RunConfig, key: &str, file: &str) -> Outcome<PathBuf> {
    let p = cfg.artifact(key, file);
    if !p.exists() {
        return Err(ConfigError::invalid(key, &p.display().to_string(), "no such file").into());
    }
    Ok(p)
}

fn load_model(cfg: &RunConfig) -> Outcome<(EmbeddingModel, Option<contramatch::encoder::Projector>)> {
    let p = input_artifact(cfg, "encoder_ckpt", "encoder.ckpt")?;
    at("load", load_encoder(&p))
}

fn pretrain(cfg: &RunConfig) -> Outcome<Metrics> {
    let em_cfg = cfg.em()?;
    let data = dataset(cfg)?;
    let (model, projector, log) = at("pretrain", pretrain_on_tables(&data.table_a, &data.table_b, &em_cfg))?;
    at(
        "pretrain",
        save_encoder(&cfg.artifact("encoder_ckpt", "encoder.ckpt"), &model, Some(&projector)),
    )?;
    at(
        "pretrain",
        write_training_log(&mut create("pretrain", &cfg.out_dir().join("training_log.csv"))?, &log),
    )?;
    let mut m = Metrics::new();
    m.count("pretrain_steps", log.len());
    if let Some(last) = log.last() {
        m.real("final_loss", last.loss_total);
    }
    Ok(m)
}

fn blocking_metrics(m: &mut Metrics, data: &EmDataset, cands: &CandidateSet) -> Outcome<()> {
    m.count("candidates", cands.len());
    let truth = data.known_matches();
    if !truth.is_empty() {
        let q = at(
            "block",
            recall_cssr(cands, &truth, data.table_a.len(), data.table_b.len()),
        )?;
        m.real("recall", q.recall);
        m.real("cssr", q.cssr);
    }
    Ok(())
}

fn block_cmd(cfg: &RunConfig) -> Outcome<Metrics> {
    let em_cfg = cfg.em()?;
    let data = dataset(cfg)?;
    let (model, projector) = load_model(cfg)?;
    let proj = if em_cfg.index_projector {
        Some(projector.as_ref().ok_or_else(|| {
            ConfigError::invalid("index_projector", "true", "the encoder checkpoint holds no projector")
        })?)
    } else {
        None
    };
    let cands = at(
        "block",
        block(&data.table_a, &data.table_b, &model, proj, em_cfg.k, em_cfg.symmetric),
    )?;
    at(
        "block",
        blocking::write_candidates(create("block", &cfg.artifact("candidates", "candidates.csv"))?, &cands),
    )?;
    let mut m = Metrics::new();
    m.count("k", em_cfg.k);
    blocking_metrics(&mut m, &data, &cands)?;
    Ok(m)
}

fn read_cands(cfg: &RunConfig) -> Outcome<CandidateSet> {
    let p = input_artifact(cfg, "candidates", "candidates.csv")?;
    at("load", blocking::read_candidates(open("load", &p)?))
}

fn pseudolabel(cfg: &RunConfig) -> Outcome<Metrics> {
    let em_cfg = cfg.em()?;
    let rho = em_cfg.rho.ok_or_else(|| ConfigError::Missing {
        key: "rho".into(),
        reason: "pseudo labeling needs the positive ratio".into(),
    })?;
    let data = dataset(cfg)?;
    let cands = read_cands(cfg)?;
    let theta = match cfg.opt_f64("theta_pos") {
        Some(t) => t,
        None => at("pseudolabel", initial_theta(&cands, rho))?,
    };
    let thresholds = at("pseudolabel", thresholds_for(&cands, rho, theta, em_cfg.multiplier))?;
    let pseudo = at("pseudolabel", assign_pseudo(&cands, thresholds))?;
    let training = at(
        "pseudolabel",
        build_training_set(&data.train, &pseudo, em_cfg.multiplier, em_cfg.seed),
    )?;
    at(
        "pseudolabel",
        write_training_pairs(
            create("pseudolabel", &cfg.artifact("training_pairs", "training_pairs.csv"))?,
            &training,
        ),
    )?;
    let mut m = Metrics::new();
    m.real("theta_pos", thresholds.pos);
    m.real("theta_neg", thresholds.neg);
    m.count("pseudo_positives", pseudo.positives());
    m.count("pseudo_negatives", pseudo.negatives());
    m.real("achieved_ratio", pseudo.achieved_ratio());
    m.count("training_pairs", training.len());
    let truth = data.known_matches();
    if !truth.is_empty() {
        let (tpr, tnr) = pseudo_quality(&pseudo, &truth);
        m.opt_real("pseudo_tpr", tpr);
        m.opt_real("pseudo_tnr", tnr);
    }
    Ok(m)
}

fn finetune_cmd(cfg: &RunConfig) -> Outcome<Metrics> {
    let ft = cfg.finetune()?;
    let data = dataset(cfg)?;
    let (model, _) = load_model(cfg)?;
    let lookup = ItemLookup::new(&data.table_a, &data.table_b);
    let pairs_path = cfg.artifact("training_pairs", "training_pairs.csv");
    let training: Vec<TrainingPair> = if pairs_path.exists() {
        at("load", read_training_pairs(open("load", &pairs_path)?))?
    } else if cfg.opt_path("training_pairs").is_some() {
        return Err(ConfigError::invalid("training_pairs", cfg.get("training_pairs"), "no such file").into());
    } else {
        data.train
            .iter()
            .map(|p| TrainingPair {
                pair: p.clone(),
                provenance: Provenance::Manual,
                score: None,
            })
            .collect()
    };
    let train: Vec<PairExample> = at(
        "finetune",
        training
            .iter()
            .map(|p| lookup.example(&p.pair.left, &p.pair.right, p.pair.label))
            .collect(),
    )?;
    let valid = at("finetune", lookup.examples(&data.valid))?;
    let mut ft = ft;
    ft.seed = rng::derive_seed(cfg.seed(), "finetune");
    let out = at(
        "finetune",
        finetune(&train, (!valid.is_empty()).then_some(valid.as_slice()), model, &ft),
    )?;
    at(
        "finetune",
        out.matcher.save(&cfg.artifact("matcher_ckpt", "matcher.ckpt")),
    )?;
    at(
        "finetune",
        write_finetune_log(
            create("finetune", &cfg.out_dir().join("finetune_log.csv"))?,
            &out.history,
        ),
    )?;
    let mut m = Metrics::new();
    m.count("training_pairs", train.len());
    m.text("best_epoch", out.best_epoch.map_or("init".into(), |e| e.to_string()));
    m.opt_real("valid_f1", out.best_valid_f1);
    if !data.test.is_empty() {
        let test = at("finetune", lookup.examples(&data.test))?;
        m.f1("test", at("finetune", evaluate(&out.matcher, &test))?);
    }
    Ok(m)
}

fn predict(cfg: &RunConfig) -> Outcome<Metrics> {
    let data = dataset(cfg)?;
    let matcher = at(
        "load",
        MatcherModel::load(&input_artifact(cfg, "matcher_ckpt", "matcher.ckpt")?),
    )?;
    let cands = read_cands(cfg)?;
    let lookup = ItemLookup::new(&data.table_a, &data.table_b);
    let preds = at("predict", predict_candidates(&matcher, &lookup, &cands))?;
    at(
        "predict",
        write_predictions(create("predict", &cfg.out_dir().join("predictions.csv"))?, &preds),
    )?;
    let mut m = Metrics::new();
    m.count("predicted_matches", preds.iter().filter(|p| p.decision == 1).count());
    let truth = data.known_matches();
    if !truth.is_empty() {
        m.f1("end_to_end", end_to_end_f1(&preds, &truth));
    }
    Ok(m)
}

fn em(cfg: &RunConfig) -> Outcome<Metrics> {
    let em_cfg = cfg.em()?;
    let data = dataset(cfg)?;
    let art = at("em", run_em(&data, &em_cfg))?;
    let out = cfg.out_dir();
    at(
        "em",
        save_encoder(
            &cfg.artifact("encoder_ckpt", "encoder.ckpt"),
            &art.encoder,
            Some(&art.projector),
        ),
    )?;
    at(
        "em",
        write_training_log(&mut create("em", &out.join("training_log.csv"))?, &art.pretrain_log),
    )?;
    at(
        "em",
        blocking::write_candidates(
            create("em", &cfg.artifact("candidates", "candidates.csv"))?,
            &art.candidates,
        ),
    )?;
    at(
        "em",
        write_training_pairs(
            create("em", &cfg.artifact("training_pairs", "training_pairs.csv"))?,
            &art.training_set,
        ),
    )?;
    at("em", art.matcher.save(&cfg.artifact("matcher_ckpt", "matcher.ckpt")))?;
    at(
        "em",
        write_predictions(create("em", &out.join("predictions.csv"))?, &art.predictions),
    )?;

    let r = &art.report;
    let mut m = Metrics::new();
    m.count("pretrain_steps", r.pretrain_steps);
    m.count("candidates", r.candidates);
    if let Some(b) = r.blocking {
        m.real("recall", b.recall);
        m.real("cssr", b.cssr);
    }
    if let Some(p) = &r.pseudo {
        m.real("theta_pos", p.theta_pos);
        m.real("theta_neg", p.theta_neg);
        m.count("pseudo_positives", p.positives);
        m.count("pseudo_negatives", p.negatives);
        m.real("achieved_ratio", p.achieved_ratio);
        m.opt_real("pseudo_tpr", p.tpr);
        m.opt_real("pseudo_tnr", p.tnr);
    }
    m.count("training_pairs", r.training_pairs);
    m.opt_real("valid_f1", r.valid_f1);
    if let Some(t) = r.test {
        m.f1("test", t);
    }
    if let Some(e) = r.end_to_end {
        m.f1("end_to_end", e);
    }
    m.count(
        "predicted_matches",
        art.predictions.iter().filter(|p| p.decision == 1).count(),
    );
    Ok(m)
}

fn cleaning_instance(cfg: &RunConfig, need_truth: bool) -> Outcome<CleaningInstance> {
    let table = cfg.existing_path("dirty_table")?;
    let cands = cfg.existing_path("cleaning_candidates")?;
    let rows = read_dirty_table(&table)
        .map_err(|e| ConfigError::invalid("dirty_table", cfg.get("dirty_table"), e.to_string()))?;
    let cells = read_cell_candidates(open("load", &cands)?)
        .map_err(|e| ConfigError::invalid("cleaning_candidates", cfg.get("cleaning_candidates"), e.to_string()))?;
    let truth = if need_truth || cfg.opt_path("cleaning_truth").is_some() {
        let p = cfg.existing_path("cleaning_truth")?;
        Some(
            read_corrections(open("load", &p)?)
                .map_err(|e| ConfigError::invalid("cleaning_truth", cfg.get("cleaning_truth"), e.to_string()))?,
        )
    } else {
        None
    };
    let inst = CleaningInstance { rows, cells, truth };
    inst.validate()
        .map_err(|e| ConfigError::invalid("cleaning_candidates", cfg.get("cleaning_candidates"), e.to_string()))?;
    Ok(inst)
}

fn clean(cfg: &RunConfig) -> Outcome<Metrics> {
    let em_cfg = cfg.em()?;
    let scheme = cfg.scheme();
    let inst = cleaning_instance(cfg, true)?;
    let (labeled, rest) = sample_rows(
        inst.rows.len(),
        cfg.usize("labeled_rows"),
        rng::derive_seed(cfg.seed(), "rows"),
    );

    let corpus = at("pretrain", inst.pretraining_corpus(scheme))?;
    let (model, projector, log) = at("pretrain", pretrain_on_sequences(&corpus, &em_cfg))?;
    at(
        "pretrain",
        save_encoder(&cfg.artifact("encoder_ckpt", "encoder.ckpt"), &model, Some(&projector)),
    )?;
    at(
        "pretrain",
        write_training_log(&mut create("pretrain", &cfg.out_dir().join("training_log.csv"))?, &log),
    )?;

    let train = at("finetune", inst.training_pairs(&labeled, scheme))?;
    let mut ft = em_cfg.finetune.clone();
    ft.seed = rng::derive_seed(cfg.seed(), "finetune");
    let out = at("finetune", finetune(&train, None, model, &ft))?;
    at(
        "finetune",
        out.matcher.save(&cfg.artifact("matcher_ckpt", "matcher.ckpt")),
    )?;

    let eval_inst = inst.subset(&rest);
    let corrections = at("clean", clean_table(&eval_inst, &out.matcher, scheme))?;
    at(
        "clean",
        write_corrections(create("clean", &cfg.out_dir().join("corrections.csv"))?, &corrections),
    )?;
    let mut m = Metrics::new();
    m.count("pretrain_steps", log.len());
    m.count("labeled_rows", labeled.len());
    m.count("training_pairs", train.len());
    m.count("corrections", corrections.len());
    if let Some(truth) = &eval_inst.truth {
        m.f1("correction", correction_f1(&corrections, truth));
    }
    Ok(m)
}

fn column_inputs(cfg: &RunConfig) -> Outcome<(Vec<ColumnItem>, HashMap<String, String>)> {
    let cols_path = cfg.existing_path("columns")?;
    let types_path = cfg.existing_path("column_types")?;
    let columns = read_columns(open("load", &cols_path)?)
        .map_err(|e| ConfigError::invalid("columns", cfg.get("columns"), e.to_string()))?;
    let types = read_column_types(open("load", &types_path)?)
        .map_err(|e| ConfigError::invalid("column_types", cfg.get("column_types"), e.to_string()))?;
    if let Some(c) = columns.iter().find(|c| !types.contains_key(&c.id)) {
        return Err(ConfigError::invalid(
            "column_types",
            cfg.get("column_types"),
            format!("no type for `{}`", c.id),
        )
        .into());
    }
    Ok((columns, types))
}

fn colmatch(cfg: &RunConfig) -> Outcome<Metrics> {
    let em_cfg = cfg.em()?;
    let (columns, types) = column_inputs(cfg)?;
    let seqs: Vec<_> = columns.iter().map(ColumnItem::serialize).collect();
    let (model, projector, log) = at("pretrain", pretrain_on_sequences(&seqs, &em_cfg))?;
    at(
        "pretrain",
        save_encoder(&cfg.artifact("encoder_ckpt", "encoder.ckpt"), &model, Some(&projector)),
    )?;
    at(
        "pretrain",
        write_training_log(&mut create("pretrain", &cfg.out_dir().join("training_log.csv"))?, &log),
    )?;

    let index = at("block", column_index(&columns, &model))?;
    let cands = at("block", column_candidates(&index, cfg.usize("column_k")))?;
    let labeled = at(
        "label",
        label_sampled_pairs(
            &columns,
            &cands,
            &types,
            cfg.usize("labeled_pairs"),
            rng::derive_seed(cfg.seed(), "pairs"),
        ),
    )?;
    let (train_idx, valid_idx, test_idx) = split_2_1_1(&labeled);
    let mut train = column_examples(&columns, &train_idx);
    let valid = column_examples(&columns, &valid_idx);
    let test = column_examples(&columns, &test_idx);

    if cfg.bool("column_pseudo") {
        let rho = em_cfg.rho.ok_or_else(|| ConfigError::Missing {
            key: "rho".into(),
            reason: "column_pseudo needs the positive ratio".into(),
        })?;
        let set = CandidateSet {
            k: cfg.usize("column_k"),
            pairs: cands
                .iter()
                .map(|&(i, j, score)| Candidate {
                    id_a: columns[i].id.clone(),
                    id_b: columns[j].id.clone(),
                    score,
                })
                .collect(),
        };
        let theta = at("pseudolabel", initial_theta(&set, rho))?;
        let thresholds = at("pseudolabel", thresholds_for(&set, rho, theta, em_cfg.multiplier))?;
        let pseudo = at("pseudolabel", assign_pseudo(&set, thresholds))?;
        let manual: Vec<LabeledPair> = train_idx
            .iter()
            .map(|&(i, j, l)| LabeledPair::new(columns[i].id.clone(), columns[j].id.clone(), l))
            .collect();
        let merged = at(
            "pseudolabel",
            build_training_set(&manual, &pseudo, em_cfg.multiplier, em_cfg.seed),
        )?;
        let pos: HashMap<&str, usize> = columns.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
        let extra: Vec<(usize, usize, u8)> = merged
            .iter()
            .filter(|p| p.provenance == Provenance::Pseudo)
            .map(|p| (pos[p.pair.left.as_str()], pos[p.pair.right.as_str()], p.pair.label))
            .collect();
        train.extend(column_examples(&columns, &extra));
    }

    let mut ft = em_cfg.finetune.clone();
    ft.seed = rng::derive_seed(cfg.seed(), "finetune");
    let out = at(
        "finetune",
        finetune(&train, (!valid.is_empty()).then_some(valid.as_slice()), model, &ft),
    )?;
    at(
        "finetune",
        out.matcher.save(&cfg.artifact("matcher_ckpt", "matcher.ckpt")),
    )?;

    let (mut clusters, edges) = at("cluster", clusters_from_candidates(&columns, &cands, &out.matcher))?;
    at("cluster", annotate_majority(&mut clusters, &types))?;
    at(
        "cluster",
        write_clusters(create("cluster", &cfg.out_dir().join("clusters.csv"))?, &clusters),
    )?;
    let mut m = Metrics::new();
    m.count("pretrain_steps", log.len());
    m.count("column_candidates", cands.len());
    m.count("training_pairs", train.len());
    m.count("matched_edges", edges.len());
    m.count("clusters", clusters.len());
    m.real("purity", at("cluster", cluster_purity(&clusters, &types))?);
    if !test.is_empty() {
        m.f1("pair_test", at("finetune", evaluate(&out.matcher, &test))?);
    }
    Ok(m)
}

/// Score whatever artifacts exist in `out_dir` against the available truth.
fn eval(cfg: &RunConfig) -> Outcome<Metrics> {
    let out = cfg.out_dir();
    let mut m = Metrics::new();
    if cfg.opt_path("data_dir").is_some() {
        let data = dataset(cfg)?;
        let truth = data.known_matches();
        let cands_path = cfg.artifact("candidates", "candidates.csv");
        if cands_path.exists() && !truth.is_empty() {
            let cands = at("eval", blocking::read_candidates(open("eval", &cands_path)?))?;
            blocking_metrics(&mut m, &data, &cands)?;
        }
        let preds_path = out.join("predictions.csv");
        if preds_path.exists() && !truth.is_empty() {
            let preds = at("eval", read_predictions(open("eval", &preds_path)?))?;
            m.f1("end_to_end", end_to_end_f1(&preds, &truth));
        }
    }
    let corr_path = out.join("corrections.csv");
    if corr_path.exists() && cfg.opt_path("cleaning_truth").is_some() {
        let truth_path = cfg.existing_path("cleaning_truth")?;
        let truth = at("eval", read_corrections(open("eval", &truth_path)?))?;
        let emitted = at("eval", read_corrections(open("eval", &corr_path)?))?;
        let truth = match cfg.opt_path("dirty_table") {
            Some(_) => {
                let rows = cleaning_instance(cfg, true)?.rows.len();
                let (_, rest) = sample_rows(rows, cfg.usize("labeled_rows"), rng::derive_seed(cfg.seed(), "rows"));
                let rest: HashSet<usize> = rest.into_iter().collect();
                truth.into_iter().filter(|t| rest.contains(&t.row)).collect()
            }
            None => truth,
        };
        m.f1("correction", correction_f1(&emitted, &truth));
    }
    let clusters_path = out.join("clusters.csv");
    if clusters_path.exists() && cfg.opt_path("column_types").is_some() {
        let types_path = cfg.existing_path("column_types")?;
        let types = at("eval", read_column_types(open("eval", &types_path)?))?;
        let clusters = at("eval", read_clusters(open("eval", &clusters_path)?))?;
        m.count("clusters", clusters.len());
        m.real("purity", at("eval", cluster_purity(&clusters, &types))?);
    }
    if m.is_empty() {
        return Err(ConfigError::Missing {
            key: "data_dir".into(),
            reason: "nothing to evaluate: set data_dir, cleaning_truth or column_types next to existing outputs".into(),
        }
        .into());
    }
    Ok(m)
}
