//! Metric rows and their CSV/JSON encodings.

use serde::Serialize;

use crate::config::OutputFormat;
use crate::error::CliError;

/// One result row. Fields a stage does not produce are left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsRow {
    pub command: String,
    pub stage: String,
    pub seed: Option<u64>,
    pub sweep_parameter: Option<String>,
    pub sweep_value: Option<String>,
    pub status: String,
    pub total_steps: Option<usize>,
    pub full_eval_count: Option<usize>,
    pub token_evals: Option<u64>,
    pub flops_proxy: Option<f64>,
    pub oracle_flops: Option<f64>,
    pub flops_ratio: Option<f64>,
    pub fallback_steps: Option<usize>,
    pub per_step_error: Option<Vec<f64>>,
    pub final_error: Option<f64>,
    pub layout_drift: Option<f64>,
    pub hfer_2d: Option<f64>,
    pub hfer_3d: Option<f64>,
    pub joint: Option<f64>,
    pub factor: Option<f64>,
    pub tokens_in: Option<usize>,
    pub tokens_out: Option<usize>,
    pub timestamp: Option<u64>,
}

pub const HEADER: [&str; 23] = [
    "command",
    "stage",
    "seed",
    "sweep_parameter",
    "sweep_value",
    "status",
    "total_steps",
    "full_eval_count",
    "token_evals",
    "flops_proxy",
    "oracle_flops",
    "flops_ratio",
    "fallback_steps",
    "per_step_error",
    "final_error",
    "layout_drift",
    "hfer_2d",
    "hfer_3d",
    "joint",
    "factor",
    "tokens_in",
    "tokens_out",
    "timestamp",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl MetricsRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn record(&self) -> [String; 23] {
        [
            self.command.clone(),
            self.stage.clone(),
            opt(&self.seed),
            opt(&self.sweep_parameter),
            opt(&self.sweep_value),
            self.status.clone(),
            opt(&self.total_steps),
            opt(&self.full_eval_count),
            opt(&self.token_evals),
            opt(&self.flops_proxy),
            opt(&self.oracle_flops),
            opt(&self.flops_ratio),
            opt(&self.fallback_steps),
            self.per_step_error
                .as_ref()
                .map(|v| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";"))
                .unwrap_or_default(),
            opt(&self.final_error),
            opt(&self.layout_drift),
            opt(&self.hfer_2d),
            opt(&self.hfer_3d),
            opt(&self.joint),
            opt(&self.factor),
            opt(&self.tokens_in),
            opt(&self.tokens_out),
            opt(&self.timestamp),
        ]
    }
}

/// CSV with [`HEADER`]; `per_step_error` is `;`-separated.
pub fn to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(HEADER).map_err(fail)?;
    for row in rows {
        w.write_record(row.record()).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Serialize)]
struct JsonDoc<'a> {
    rows: &'a [MetricsRow],
}

pub fn to_json(rows: &[MetricsRow]) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(&JsonDoc { rows })
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn encode(rows: &[MetricsRow], format: OutputFormat) -> Result<Vec<u8>, CliError> {
    match format {
        OutputFormat::Csv => to_csv(rows),
        OutputFormat::Json => to_json(rows),
    }
}
