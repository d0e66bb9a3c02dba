//! `simulate`: Monte Carlo summary in the layout of the simulation tables.

use elmeta::inference::ParamId;
use elmeta::simulate::{mc_study, Method, SimConfig, SimSummary, SUMMARY_PARAMS};
use serde_json::{json, Value};

use crate::output::{Cell, Format, Table};
use crate::CliResult;

/// Entries are reported in percent of the parameter scale.
pub const SCALE: f64 = 100.0;

pub fn summary_table(s: &SimSummary) -> Table {
    let mut t = Table::new(&[
        "param", "cl_bias", "cl_sd", "cl_rmse", "cl_cp", "fl_bias", "fl_sd", "fl_rmse", "fl_cp", "cl_used", "fl_used",
    ]);
    for p in SUMMARY_PARAMS {
        let mut row: Vec<Cell> = vec![p.name().into()];
        for m in [Method::CL, Method::FL] {
            match s.row(m, p) {
                Some(r) => row.extend([
                    (SCALE * r.bias).into(),
                    r.sd.map(|v| SCALE * v).into(),
                    (SCALE * r.rmse).into(),
                    r.cp.map(|v| SCALE * v).into(),
                ]),
                None => row.extend([Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty]),
            }
        }
        for m in [Method::CL, Method::FL] {
            row.push(s.row(m, p).map_or(Cell::Empty, |r| Cell::Int(r.n_estimates as i64)));
        }
        t.push(row);
    }
    t
}

pub fn render_summary(cfg: &SimConfig, s: &SimSummary, format: Format) -> String {
    let table = summary_table(s);
    match format {
        Format::Csv => table.to_csv(),
        Format::Json => {
            let v: Value = json!({
                "replicates": s.replicates,
                "n_total0": cfg.n_total0,
                "alpha0": crate::output::round10(cfg.alpha0()),
                "seed": cfg.seed,
                "level": cfg.level,
                "failed_cl": s.failed_cl,
                "failed_fl": s.failed_fl,
                "interval_failed_cl": s.interval_failed_cl,
                "interval_failed_fl": s.interval_failed_fl,
                "redraws": s.redraws,
                "rows": table.to_json(),
            });
            crate::output::pretty(&v)
        }
    }
}

pub fn run_simulate(cfg: &SimConfig, format: Format) -> CliResult<(SimSummary, String)> {
    let s = mc_study(cfg)?;
    let text = render_summary(cfg, &s, format);
    Ok((s, text))
}

/// Row lookup by parameter in the scaled table.
pub fn scaled(s: &SimSummary, m: Method, p: ParamId) -> Option<[f64; 4]> {
    let r = s.row(m, p)?;
    Some([SCALE * r.bias, SCALE * r.sd?, SCALE * r.rmse, SCALE * r.cp?])
}
