//! The three pipeline commands behind the CLI: train, analyze, report.
//! All file outputs are deterministic for a fixed config and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{extract_clusters, EntropyReport, ParseDictionary, K_SWEEP};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, KChoice};
use crate::data::{DataSource, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::CapsNet;
use crate::pgm::write_pgm;
use crate::trainer::{choose_k_slot, dictionary_from_eval, EpochLog, Trainer};

pub const TRAIN_LOG: &str = "train.log.csv";
pub const CONFIG_RESOLVED: &str = "config.resolved.txt";
pub const CHECKPOINT_BEST: &str = "checkpoint.best.rckp";
pub const CHECKPOINT_FINAL: &str = "checkpoint.final.rckp";
pub const ANALYSIS_JSON: &str = "analysis.json";
pub const ANALYSIS_CSV: &str = "analysis.csv";
pub const DICTIONARY_JSON: &str = "dictionary.json";
pub const AGGREGATES_CSV: &str = "aggregates.csv";

const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_accuracy,sparsity,val_entropy_bits,newly_masked\n";

/// Honor the REMCAPS_THREADS cap on the global worker pool. Call once at
/// process start; later calls are ignored.
pub fn init_threads() {
    if let Ok(v) = std::env::var("REMCAPS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn format_log_row(log: &EpochLog) -> String {
    let entropy = log
        .val_entropy_bits
        .map(|h| format!("{h:.6}"))
        .unwrap_or_default();
    format!(
        "{},{:.6},{:.6},{:.6},{},{}\n",
        log.epoch, log.train_loss, log.val_accuracy, log.sparsity, entropy, log.newly_masked
    )
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub logs: Vec<EpochLog>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

/// Train per the config, writing the resolved config, the per-epoch log,
/// and best/final checkpoints under `run_dir`.
pub fn run_train(cfg: &ExperimentConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join(CONFIG_RESOLVED), cfg.render())?;

    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log_text = String::from(TRAIN_LOG_HEADER);
    let mut logs = Vec::new();
    for _ in 0..cfg.optimizer.epochs {
        let log = trainer.run_epoch()?;
        log_text.push_str(&format_log_row(&log));
        logs.push(log);
    }
    std::fs::write(run_dir.join(TRAIN_LOG), &log_text)?;

    let final_path = run_dir.join(CHECKPOINT_FINAL);
    Checkpoint::from_params(cfg.render(), &trainer.net.params, Some(&trainer.prune.masks))
        .save(&final_path)?;

    let best_path = trainer.best().map(|best| {
        let path = run_dir.join(CHECKPOINT_BEST);
        (path, best)
    });
    let best_checkpoint = match best_path {
        Some((path, best)) => {
            Checkpoint::from_params(cfg.render(), &best.params, Some(&best.masks)).save(&path)?;
            Some(path)
        }
        None => None,
    };

    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        logs,
        final_checkpoint: final_path,
        best_checkpoint,
    })
}

#[derive(Debug)]
pub struct AnalyzeOutcome {
    pub report: EntropyReport,
    pub chosen_k: usize,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct DictionaryEntryOut<'a> {
    key: &'a str,
    count: usize,
    members: &'a [usize],
}

#[derive(Serialize)]
struct DictionaryOut<'a> {
    version: u32,
    k: usize,
    per_class: BTreeMap<String, Vec<DictionaryEntryOut<'a>>>,
}

fn dictionary_json(dict: &ParseDictionary) -> Result<Vec<u8>> {
    let per_class = dict
        .per_class
        .iter()
        .map(|(class, keys)| {
            let entries = keys
                .iter()
                .map(|(key, e)| DictionaryEntryOut {
                    key,
                    count: e.count,
                    members: &e.members,
                })
                .collect();
            (class.to_string(), entries)
        })
        .collect();
    let out = DictionaryOut {
        version: 1,
        k: dict.k,
        per_class,
    };
    let mut bytes = serde_json::to_vec_pretty(&out)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Load a checkpoint, evaluate a split, pick K, build the dictionary and
/// entropy report, and write every artifact under `out_dir`.
pub fn run_analyze(
    checkpoint_path: &Path,
    source: &DataSource,
    k_choice: KChoice,
    split: SplitTag,
    top_n: usize,
    out_dir: &Path,
) -> Result<AnalyzeOutcome> {
    let checkpoint_bytes =
        std::fs::read(checkpoint_path).map_err(|e| Error::data(checkpoint_path, e.to_string()))?;
    let checkpoint = Checkpoint::from_bytes(&checkpoint_bytes)?;
    let cfg = ExperimentConfig::parse(&checkpoint.config_text)?;
    let dims = cfg.model.derived()?;
    checkpoint.validate_shapes(&dims)?;
    let net = CapsNet::from_parts(cfg.model.clone(), checkpoint.to_params()?)?;

    let ds = source.load(split)?;
    let (c, h, w) = ds.image_dims();
    if (c, h, w) != cfg.model.input_shape {
        return Err(Error::Config(format!(
            "dataset images are {c}x{h}x{w} but the checkpoint expects {:?}",
            cfg.model.input_shape
        )));
    }

    let candidates = match k_choice {
        KChoice::Fixed(k) => vec![k],
        KChoice::Auto => K_SWEEP.to_vec(),
    };
    let result = evaluate(
        &net,
        &ds,
        &EvalOptions {
            k_candidates: candidates.clone(),
            collect_keys: true,
            aggregate_couplings: true,
        },
    )?;
    let slot = choose_k_slot(&k_choice, &result);
    let chosen_k = candidates[slot];
    let dict = dictionary_from_eval(&result, slot, chosen_k, dims.num_primary, cfg.model.num_classes)?;

    let mut hasher = Sha256::new();
    hasher.update(&checkpoint_bytes);
    let model_id = hex_prefix(&hasher.finalize(), 16);

    let report = EntropyReport::from_dictionary(
        &dict,
        model_id,
        result.quant_accuracy[slot].1,
        result.accuracy,
        result.quant_accuracy.clone(),
    )?;

    std::fs::create_dir_all(out_dir)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    std::fs::write(out_dir.join(ANALYSIS_JSON), json)?;
    std::fs::write(out_dir.join(ANALYSIS_CSV), report.to_csv())?;
    std::fs::write(out_dir.join(DICTIONARY_JSON), dictionary_json(&dict)?)?;

    // mean couplings per true class, long-form CSV
    if let Some((means, counts)) = &result.coupling_means {
        let ni = dims.num_primary;
        let nj = cfg.model.num_classes;
        let mut csv = String::from("true_class,primary_index,output_class,mean_coupling\n");
        for label in 0..nj {
            if counts[label] == 0 {
                continue;
            }
            for i in 0..ni {
                for j in 0..nj {
                    let v = means[label * ni * nj + i * nj + j];
                    writeln!(csv, "{label},{i},{j},{v:.12}").expect("string write");
                }
            }
        }
        std::fs::write(out_dir.join(AGGREGATES_CSV), csv)?;
    }

    // top-n cluster overlays per predicted class
    let clusters_dir = out_dir.join("clusters");
    std::fs::create_dir_all(&clusters_dir)?;
    for (&class, _) in dict.per_class.iter() {
        let clusters = extract_clusters(&dict, |id| ds.image(id), class, top_n)?;
        for (rank, cluster) in clusters.iter().enumerate() {
            let name = format!("cluster_c{class}_r{rank}_n{}.pgm", cluster.count);
            write_pgm(&cluster.overlay, &clusters_dir.join(name))?;
        }
    }

    Ok(AnalyzeOutcome {
        report,
        chosen_k,
        out_dir: out_dir.to_path_buf(),
    })
}

fn hex_prefix(digest: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in digest {
        write!(s, "{b:02x}").expect("string write");
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

#[derive(Debug)]
pub struct ReportOutcome {
    pub csv: String,
    pub rows: usize,
    pub warnings: Vec<String>,
}

/// Comparison CSV over run directories, one row per run in argument
/// order. Runs with missing artifacts are skipped with a warning.
pub fn run_report(run_dirs: &[PathBuf]) -> Result<ReportOutcome> {
    struct Row {
        name: String,
        accuracy: f64,
        sparsity: f64,
        entropy: f64,
        total_keys: usize,
        per_class_keys: BTreeMap<usize, usize>,
    }

    let mut warnings = Vec::new();
    let mut rows: Vec<Row> = Vec::new();
    for dir in run_dirs {
        let read = || -> Result<Row> {
            let report: EntropyReport =
                serde_json::from_slice(&std::fs::read(dir.join(ANALYSIS_JSON)).map_err(|e| {
                    Error::data(dir.join(ANALYSIS_JSON), e.to_string())
                })?)?;
            let log = std::fs::read_to_string(dir.join(TRAIN_LOG))
                .map_err(|e| Error::data(dir.join(TRAIN_LOG), e.to_string()))?;
            let sparsity = log
                .lines()
                .skip(1)
                .filter(|l| !l.trim().is_empty())
                .last()
                .and_then(|l| l.split(',').nth(3))
                .and_then(|v| v.parse::<f64>().ok())
                .unwrap_or(0.0);
            Ok(Row {
                name: dir.display().to_string(),
                accuracy: report.accuracy,
                sparsity,
                entropy: report.network_entropy_bits,
                total_keys: report.per_class.iter().map(|c| c.num_keys).sum(),
                per_class_keys: report
                    .per_class
                    .iter()
                    .map(|c| (c.class, c.num_keys))
                    .collect(),
            })
        };
        match read() {
            Ok(row) => rows.push(row),
            Err(e) => warnings.push(format!("skipping {}: {e}", dir.display())),
        }
    }

    if rows.is_empty() {
        return Ok(ReportOutcome {
            csv: String::new(),
            rows: 0,
            warnings,
        });
    }

    let num_classes = rows
        .iter()
        .flat_map(|r| r.per_class_keys.keys().copied())
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);

    let mut csv = String::from("run,accuracy,sparsity,network_entropy_bits,total_keys");
    for j in 0..num_classes {
        write!(csv, ",keys_c{j}").expect("string write");
    }
    csv.push('\n');
    for row in &rows {
        write!(
            csv,
            "{},{:.6},{:.6},{:.6},{}",
            row.name, row.accuracy, row.sparsity, row.entropy, row.total_keys
        )
        .expect("string write");
        for j in 0..num_classes {
            write!(csv, ",{}", row.per_class_keys.get(&j).copied().unwrap_or(0)).expect("string write");
        }
        csv.push('\n');
    }
    Ok(ReportOutcome {
        rows: rows.len(),
        csv,
        warnings,
    })
}
