use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use clv::checkpoint;
use clv::config::Config;
use clv::corpus::{load_corpus, load_generation_inputs, CorpusFormat, DialogueExample};
use clv::decider::pseudo_label_from_losses;
use clv::evaluation::nli::{BowNli, NliClassifier, NliError, RemoteNli, RuleBasedNli, ENDPOINT_ENV};
use clv::evaluation::{self, load_records, write_records, MetricReport};
use clv::generator::GenerationConfig;
use clv::model::ClvModel;
use clv::training::{self, RunFiles};

use crate::{CliError, Common};

type CmdResult = Result<ExitCode, CliError>;

fn existing<'a>(path: &'a Path, what: &str) -> Result<&'a Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn load_config_with(common: &Common, extra: &[String], required: bool) -> Result<Config, CliError> {
    let overrides: Vec<String> = common.overrides.iter().chain(extra).cloned().collect();
    let mut config = match &common.config {
        Some(path) => Config::load(existing(path, "config file")?, &overrides)?,
        None if required => return Err(CliError::Usage("--config is required".into())),
        None => Config::from_toml_str("", &overrides)?,
    };
    config.ablation.extend(common.ablation.iter().copied());
    config.validate()?;
    Ok(config)
}

fn load_config(common: &Common, required: bool) -> Result<Config, CliError> {
    load_config_with(common, &[], required)
}

fn generation_config(common: &Common, greedy: bool) -> Result<GenerationConfig, CliError> {
    if !common.ablation.is_empty() {
        log::warn!("--ablation only affects training; the checkpoint fixes the model");
    }
    let mut gen = load_config(common, false)?.generation();
    gen.greedy = greedy;
    gen.validate()?;
    Ok(gen)
}

fn load_model(path: &Path) -> Result<ClvModel, CliError> {
    Ok(checkpoint::load(existing(path, "checkpoint")?)?.0)
}

fn corpus(path: &Path, what: &str) -> Result<Vec<DialogueExample>, CliError> {
    Ok(load_corpus(existing(path, what)?, CorpusFormat::Jsonl)?)
}

fn output_dir(common: &Common) -> Result<&Path, CliError> {
    common
        .output_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("--output-dir is required".into()))
}

/// `--output`, else `default_name` inside `--output-dir`, else stdout.
fn sink(common: &Common, output: Option<&Path>, default_name: &str) -> Result<Box<dyn Write>, CliError> {
    let path = match (output, &common.output_dir) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(dir)) => {
            fs::create_dir_all(dir)?;
            Some(dir.join(default_name))
        }
        (None, None) => None,
    };
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn train(common: &Common) -> CmdResult {
    let config = load_config(common, true)?;
    let train_path = config
        .train_corpus
        .clone()
        .ok_or_else(|| CliError::Usage("config does not set `train_corpus`".into()))?;
    let train_set = corpus(&train_path, "training corpus")?;
    let valid_set = match &config.valid_corpus {
        Some(p) => Some(corpus(p, "validation corpus")?),
        None => None,
    };
    let dir = output_dir(common)?;
    let out = training::train(&config, &train_set, valid_set.as_deref(), Some(dir))?;
    println!(
        "trained {} epochs ({} logged steps); best epoch {} with validation loss {:.4}; artifacts in {}",
        config.epochs,
        out.log.len(),
        out.best_epoch,
        out.best_valid_loss,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn generate(
    common: &Common,
    checkpoint: &Path,
    input: &Path,
    output: Option<&Path>,
    samples: usize,
    recognition: bool,
    greedy: bool,
) -> CmdResult {
    let gen = generation_config(common, greedy)?;
    let inputs = load_generation_inputs(existing(input, "input file")?)?;
    if recognition {
        if let Some(i) = inputs.iter().position(|x| x.persona.is_none() || x.response.is_none()) {
            return Err(CliError::Usage(format!(
                "line {}: the recognition path needs both `persona` and `response`",
                i + 1
            )));
        }
    }
    let model = load_model(checkpoint)?;
    let mut records = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        // the prior path never sees persona or response, so nothing of them
        // is echoed either
        let (pair, persona) = if recognition {
            (
                Some((x.persona.as_deref().unwrap(), x.response.as_deref().unwrap())),
                x.persona.clone(),
            )
        } else {
            (None, None)
        };
        records.push(model.generate_record(&x.query, pair, persona, samples, &gen, i as u64)?);
    }
    write_records(sink(common, output, "generations.jsonl")?, &records)?;
    Ok(ExitCode::SUCCESS)
}

fn make_nli(spec: &str) -> Result<Option<Box<dyn NliClassifier>>, CliError> {
    let usage = |e: NliError| CliError::Usage(e.to_string());
    Ok(match spec {
        "none" => {
            log::info!("NLI scoring disabled");
            None
        }
        "rule" => Some(Box::new(RuleBasedNli)),
        "remote" => Some(Box::new(RemoteNli::from_env().map_err(usage)?)),
        "auto" => match RemoteNli::from_env() {
            Ok(nli) => Some(Box::new(nli)),
            Err(e) => {
                log::warn!("{e}; Con.Score and Coh-Con.Score are omitted (set {ENDPOINT_ENV} or pass --nli)");
                None
            }
        },
        other => match other.strip_prefix("bow:") {
            Some(path) => Some(Box::new(BowNli::load(path).map_err(usage)?)),
            None => {
                return Err(CliError::Usage(format!(
                    "unknown NLI backend `{other}` (auto, none, rule, remote or bow:PATH)"
                )))
            }
        },
    })
}

fn write_report(dir: Option<&Path>, report: &MetricReport) -> Result<(), CliError> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(report).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(dir.join("report.json"), json + "\n")?;
        fs::write(dir.join("report.txt"), report.table() + "\n")?;
    }
    Ok(())
}

pub fn evaluate(
    common: &Common,
    generations: Option<&Path>,
    checkpoint: Option<&Path>,
    references: &Path,
    nli: &str,
    json: bool,
) -> CmdResult {
    let refs = corpus(references, "reference corpus")?;
    let nli = make_nli(nli)?;
    let report = match (generations, checkpoint) {
        (Some(g), _) => {
            let records = load_records(existing(g, "generations file")?)?;
            evaluation::evaluate_records(&records, &refs, nli.as_deref())?
        }
        (None, Some(c)) => {
            let gen = generation_config(common, false)?;
            let model = load_model(c)?;
            let (report, records) = evaluation::evaluate(&model, &refs, &gen, nli.as_deref())?;
            if let Some(dir) = &common.output_dir {
                fs::create_dir_all(dir)?;
                write_records(BufWriter::new(fs::File::create(dir.join("generations.jsonl"))?), &records)?;
            }
            report
        }
        (None, None) => return Err(CliError::Usage("pass --generations or --checkpoint".into())),
    };
    write_report(common.output_dir.as_deref(), &report)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("{}", report.table());
    }
    Ok(ExitCode::SUCCESS)
}

struct SweepRow {
    n: usize,
    outcome: Result<MetricReport, String>,
}

fn sweep_leg(
    common: &Common,
    n: usize,
    train_set: &[DialogueExample],
    valid_set: Option<&[DialogueExample]>,
    nli: Option<&dyn NliClassifier>,
    dir: &Path,
) -> Result<MetricReport, CliError> {
    let config = load_config_with(common, &[format!("n_groups={n}")], true)?;
    training::train(&config, train_set, valid_set, Some(dir))?;
    let (model, _) = checkpoint::load(RunFiles { dir: dir.to_path_buf() }.best())?;
    let eval_set = valid_set.unwrap_or(train_set);
    let (report, _) = evaluation::evaluate(&model, eval_set, &config.generation(), nli)?;
    write_report(Some(dir), &report)?;
    Ok(report)
}

pub fn sweep(common: &Common, values: &[usize], nli: &str) -> CmdResult {
    let base = load_config(common, true)?;
    let dir = output_dir(common)?;
    let train_path = base
        .train_corpus
        .clone()
        .ok_or_else(|| CliError::Usage("config does not set `train_corpus`".into()))?;
    let train_set = corpus(&train_path, "training corpus")?;
    let valid_set = match &base.valid_corpus {
        Some(p) => Some(corpus(p, "validation corpus")?),
        None => None,
    };
    let nli = make_nli(nli)?;
    let mut values = values.to_vec();
    values.sort_unstable();
    values.dedup();
    fs::create_dir_all(dir)?;

    let mut rows = Vec::new();
    for n in values {
        log::info!("sweep leg N={n}");
        let leg_dir = dir.join(format!("n{n}"));
        let outcome = sweep_leg(common, n, &train_set, valid_set.as_deref(), nli.as_deref(), &leg_dir)
            .map_err(|e| match e {
                CliError::Usage(m) | CliError::Runtime(m) => m,
            });
        if let Err(e) = &outcome {
            log::error!("sweep leg N={n} failed: {e}");
        }
        rows.push(SweepRow { n, outcome });
    }

    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(["n", "status", "bleu_1", "coh_con_score", "s_dist_1", "s_dist_2", "rouge_l", "c_dist_1", "c_dist_2", "con_score"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut failures = 0;
    for row in &rows {
        let mut rec = vec![row.n.to_string()];
        match &row.outcome {
            Ok(r) => {
                rec.push("ok".into());
                rec.extend([
                    r.bleu_1.to_string(),
                    opt(r.coh_con_score),
                    opt(r.s_dist_1),
                    opt(r.s_dist_2),
                    r.rouge_l.to_string(),
                    r.c_dist_1.to_string(),
                    r.c_dist_2.to_string(),
                    opt(r.con_score),
                ]);
            }
            Err(e) => {
                failures += 1;
                rec.push(format!("failed: {e}"));
                rec.extend(std::iter::repeat_n(String::new(), 8));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    println!("wrote {} ({} legs, {failures} failed)", path.display(), rows.len());
    Ok(if failures > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

pub fn inspect_decider(common: &Common, checkpoint: &Path, input: &Path, output: Option<&Path>) -> CmdResult {
    let gen = generation_config(common, false)?;
    let examples = corpus(input, "input corpus")?;
    let model = load_model(checkpoint)?;
    let mut out = sink(common, output, "decider.jsonl")?;
    for (i, e) in examples.iter().enumerate() {
        let ex = model.encode_example(&e.persona_text, &e.query, &e.response);
        let mut rng = gen.rng_for(i as u64);
        let (q, latents) = model.recognition_latents(&ex, false, &mut rng)?;
        let grouped = latents
            .persona
            .as_ref()
            .ok_or_else(|| CliError::Usage("this model was trained without the persona path".into()))?;
        let (_, weights) = model.compose(&q, &latents)?;
        let losses = model.candidate_losses(grouped, &latents.response, &ex)?;
        let label = pseudo_label_from_losses(&losses);
        let line = serde_json::json!({
            "index": i,
            "query": e.query,
            "weights": weights.map(|w| w.as_slice().to_vec()).unwrap_or_default(),
            "pseudo_label": label.0,
            "losses": losses,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

pub fn chat(common: &Common, checkpoint: &Path) -> CmdResult {
    let gen = generation_config(common, false)?;
    let model = load_model(checkpoint)?;
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    let mut turn = 0u64;
    let mut lines = stdin.lock().lines();
    loop {
        write!(stdout, "> ")?;
        stdout.flush()?;
        let Some(line) = lines.next() else { break };
        let line = line?;
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        if query == "/quit" {
            break;
        }
        match model.generate_record(query, None, None, 1, &gen, turn) {
            Ok(r) => {
                let w: Vec<String> = r.decider_weights.iter().map(|v| format!("{v:.4}")).collect();
                writeln!(stdout, "{}", r.samples[0])?;
                writeln!(stdout, "decider weights: [{}]", w.join(", "))?;
            }
            Err(e) => writeln!(stdout, "could not respond: {e}")?,
        }
        turn += 1;
    }
    writeln!(stdout)?;
    Ok(ExitCode::SUCCESS)
}
