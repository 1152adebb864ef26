use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvalResult;
use crate::mixers::MixerKind;
use crate::tensor::Precision;
use crate::{Error, Result};

/// Position of a model in the pipeline; reports list rows in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Pretrained,
    Pkt,
    Jkt,
    Finetune,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Pretrained => "pretrained",
            Role::Pkt => "pkt",
            Role::Jkt => "jkt",
            Role::Finetune => "finetune",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Role::Teacher => "Attention teacher",
            Role::Pretrained => "Pre-trained",
            Role::Pkt => "MSE (PKT)",
            Role::Jkt => "MSE (JKT)",
            Role::Finetune => "CE fine-tune",
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Role::Teacher,
            Role::Pretrained,
            Role::Pkt,
            Role::Jkt,
            Role::Finetune,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| Error::Data(format!("unknown report role {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub role: Role,
    pub seed: Option<u64>,
    pub budget_tokens: Option<u64>,
    pub result: EvalResult,
}

impl ReportRow {
    pub fn new(role: Role, result: EvalResult) -> Self {
        ReportRow {
            role,
            seed: None,
            budget_tokens: None,
            result,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_budget(mut self, tokens: u64) -> Self {
        self.budget_tokens = Some(tokens);
        self
    }
}

const HEADER: [&str; 11] = [
    "role",
    "mixer",
    "seed",
    "budget_tokens",
    "precision",
    "context_len",
    "eval_tokens",
    "mean_ce",
    "perplexity",
    "model_digest",
    "dataset_digest",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn cells(r: &ReportRow) -> [String; 11] {
    let e = &r.result;
    [
        r.role.as_str().to_string(),
        e.mixer.to_string(),
        opt(r.seed),
        opt(r.budget_tokens),
        e.precision.to_string(),
        e.context_len.to_string(),
        e.tokens.to_string(),
        e.mean_ce.to_string(),
        e.perplexity.to_string(),
        e.model_digest.clone(),
        e.dataset_digest.clone(),
    ]
}

/// Rows sorted teacher first, then by pipeline stage, then by seed.
pub fn compare_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.role, r.seed));
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(HEADER).expect("in-memory write");
            for r in sorted {
                w.write_record(cells(r)).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
        }
        ReportFormat::Markdown => {
            let mut s = String::from(
                "| model | mixer | seed | budget (tokens) | precision | context | perplexity |\n",
            );
            s.push_str("|---|---|---:|---:|---|---:|---:|\n");
            for r in sorted {
                let e = &r.result;
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {:.3} |",
                    r.role.title(),
                    e.mixer,
                    opt(r.seed),
                    opt(r.budget_tokens),
                    e.precision,
                    e.context_len,
                    e.perplexity
                );
            }
            s
        }
    }
}

fn parse<T: FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Data(format!("bad {what} field {field:?} in report")))
}

fn parse_opt<T: FromStr>(field: &str, what: &str) -> Result<Option<T>> {
    if field == "-" {
        Ok(None)
    } else {
        parse(field, what).map(Some)
    }
}

/// Inverse of the CSV form of [`compare_report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Data(e.to_string()))?;
    if header.iter().ne(HEADER) {
        return Err(Error::Data(format!("unexpected report header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            let mixer = match f(1) {
                "attention" => MixerKind::Attention,
                "hyena" => MixerKind::Hyena,
                other => return Err(Error::Data(format!("unknown mixer {other:?} in report"))),
            };
            Ok(ReportRow {
                role: f(0).parse()?,
                seed: parse_opt(f(2), "seed")?,
                budget_tokens: parse_opt(f(3), "budget")?,
                result: EvalResult {
                    mixer,
                    precision: f(4).parse::<Precision>()?,
                    context_len: parse(f(5), "context_len")?,
                    tokens: parse(f(6), "eval_tokens")?,
                    mean_ce: parse(f(7), "mean_ce")?,
                    perplexity: parse(f(8), "perplexity")?,
                    model_digest: f(9).to_string(),
                    dataset_digest: f(10).to_string(),
                },
            })
        })
        .collect()
}
