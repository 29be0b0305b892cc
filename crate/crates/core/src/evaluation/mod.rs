//! Diversity, overlap and consistency scores for generated responses.

pub mod metrics;
pub mod nli;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DialogueExample;
use crate::error::{ClvError, Result};
use crate::generator::GenerationConfig;
use crate::model::{ClvModel, GenerationRecord};
use metrics::SAMPLES_PER_EXAMPLE;
use nli::{NliClassifier, Triple};

/// Scores in `[0, 1]`. [`MetricReport::table`] shows them ×100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub c_dist_1: f64,
    pub c_dist_2: f64,
    /// Present only when every example carries five samples.
    pub s_dist_1: Option<f64>,
    pub s_dist_2: Option<f64>,
    pub bleu_1: f64,
    pub rouge_l: f64,
    /// Present only when a classifier was available.
    pub con_score: Option<f64>,
    pub coh_con_score: Option<f64>,
    pub count: usize,
}

impl MetricReport {
    fn rows(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("C-Dist-1", Some(self.c_dist_1)),
            ("C-Dist-2", Some(self.c_dist_2)),
            ("S-Dist-1", self.s_dist_1),
            ("S-Dist-2", self.s_dist_2),
            ("BLEU-1", Some(self.bleu_1)),
            ("ROUGE-L", Some(self.rouge_l)),
            ("Con.Score", self.con_score),
            ("Coh-Con.Score", self.coh_con_score),
        ]
    }

    /// `(name, value × 100)` for every score that was computed.
    pub fn scaled(&self) -> Vec<(&'static str, f64)> {
        self.rows()
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k, v * 100.0)))
            .collect()
    }

    pub fn table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>8}", "metric", "x100")?;
        for (name, v) in self.rows() {
            match v {
                Some(v) => writeln!(f, "{name:<14} {:>8.2}", v * 100.0)?,
                None => writeln!(f, "{name:<14} {:>8}", "-")?,
            }
        }
        write!(f, "{:<14} {:>8}", "examples", self.count)
    }
}

/// Distinct-n where a text set without any n-gram shows no diversity.
fn dist_or_zero(r: Result<f64>, what: &str) -> Result<f64> {
    match r {
        Ok(v) => Ok(v),
        Err(ClvError::InvalidArgument(msg)) if msg.starts_with("no ") => {
            log::warn!("{what}: {msg}; reporting 0");
            Ok(0.0)
        }
        Err(e) => Err(e),
    }
}

fn normalized(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Scores generation records against the references they were produced
/// from. Records and references pair up line by line and must agree on the
/// query text.
pub fn evaluate_records(
    records: &[GenerationRecord],
    references: &[DialogueExample],
    nli: Option<&dyn NliClassifier>,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(ClvError::EmptyCorpus);
    }
    if records.len() != references.len() {
        let line = records.len().min(references.len()) + 1;
        return Err(ClvError::Misaligned {
            line,
            message: format!("{} generations but {} references", records.len(), references.len()),
        });
    }
    for (i, (rec, r)) in records.iter().zip(references).enumerate() {
        if rec.samples.is_empty() {
            return Err(ClvError::Misaligned {
                line: i + 1,
                message: "generation has no samples".into(),
            });
        }
        if normalized(&rec.query) != normalized(&r.query) {
            return Err(ClvError::Misaligned {
                line: i + 1,
                message: format!("query `{}` does not match reference query `{}`", rec.query, r.query),
            });
        }
    }

    let hyps: Vec<&str> = records.iter().map(|r| r.samples[0].as_str()).collect();
    let refs: Vec<&str> = references.iter().map(|r| r.response.as_str()).collect();

    let (s_dist_1, s_dist_2) = if records.iter().all(|r| r.samples.len() == SAMPLES_PER_EXAMPLE) {
        let sets: Vec<Vec<&str>> = records
            .iter()
            .map(|r| r.samples.iter().map(String::as_str).collect())
            .collect();
        (
            Some(dist_or_zero(metrics::sentence_dist(&sets, 1), "S-Dist-1")?),
            Some(dist_or_zero(metrics::sentence_dist(&sets, 2), "S-Dist-2")?),
        )
    } else if records.iter().all(|r| r.samples.len() == 1) {
        log::warn!("one sample per example; S-Dist needs {SAMPLES_PER_EXAMPLE} and is omitted");
        (None, None)
    } else {
        let (i, r) = records
            .iter()
            .enumerate()
            .find(|(_, r)| r.samples.len() != SAMPLES_PER_EXAMPLE)
            .unwrap();
        return Err(ClvError::Misaligned {
            line: i + 1,
            message: format!(
                "S-Dist needs exactly {SAMPLES_PER_EXAMPLE} samples per example, found {}",
                r.samples.len()
            ),
        });
    };

    let (con_score, coh_con_score) = match nli {
        Some(nli) => {
            let triples: Vec<Triple> = references
                .iter()
                .zip(&hyps)
                .map(|(r, h)| Triple {
                    persona: &r.persona_text,
                    query: &r.query,
                    response: h,
                })
                .collect();
            let labels = nli.classify_all(&triples)?;
            (Some(nli::con_score(&labels)), Some(nli::coh_con_score(&labels)))
        }
        None => (None, None),
    };

    Ok(MetricReport {
        c_dist_1: dist_or_zero(metrics::corpus_dist(&hyps, 1), "C-Dist-1")?,
        c_dist_2: dist_or_zero(metrics::corpus_dist(&hyps, 2), "C-Dist-2")?,
        s_dist_1,
        s_dist_2,
        bleu_1: metrics::bleu_1(&hyps, &refs)?,
        rouge_l: metrics::corpus_rouge_l(&hyps, &refs)?,
        con_score,
        coh_con_score,
        count: records.len(),
    })
}

/// Generates five prior-path samples per example (the first one feeds the
/// corpus-level scores) and scores them.
pub fn evaluate(
    model: &ClvModel,
    corpus: &[DialogueExample],
    config: &GenerationConfig,
    nli: Option<&dyn NliClassifier>,
) -> Result<(MetricReport, Vec<GenerationRecord>)> {
    if corpus.is_empty() {
        return Err(ClvError::EmptyCorpus);
    }
    let records = generate_all(model, corpus, config, SAMPLES_PER_EXAMPLE)?;
    let report = evaluate_records(&records, corpus, nli)?;
    Ok((report, records))
}

/// Prior-path generation for every example, `n_samples` each.
pub fn generate_all(
    model: &ClvModel,
    corpus: &[DialogueExample],
    config: &GenerationConfig,
    n_samples: usize,
) -> Result<Vec<GenerationRecord>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, ex)| model.generate_record(&ex.query, None, None, n_samples, config, i as u64))
        .collect()
}

pub fn write_records<W: Write>(mut w: W, records: &[GenerationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `source` only labels error messages.
pub fn read_records<R: BufRead>(r: R, source: &Path) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ClvError::CorpusLine {
            path: source.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(f), path)
}
