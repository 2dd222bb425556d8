use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEET_TO_METERS: f64 = 0.3048;
pub const HORIZONS_S: [u32; 5] = [1, 2, 3, 4, 5];

/// Euclidean error (feet) of one forecast at each horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WindowErrors {
    pub ego_id: u64,
    pub t: i64,
    pub errors_ft: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub variant: String,
    pub horizons_s: Vec<u32>,
    pub rmse_m: Vec<f64>,
    pub rmse_ft: Vec<f64>,
    /// Mean per-window mixture NLL (absent for baselines).
    pub nll: Option<f64>,
    pub maneuver_accuracy: Option<f64>,
    pub samples: usize,
    pub config_hash: String,
    /// Identifies the windows and split the report was computed on.
    pub data_hash: String,
    /// Filled in by the command-line front end; library reports leave it
    /// empty so that they compare bit-for-bit across runs.
    pub wall_time_s: Option<f64>,
}

/// `sqrt(mean over windows of error²)` at each horizon, in feet.
pub fn rmse_ft(per_window: &[WindowErrors]) -> Result<Vec<f64>> {
    let Some(first) = per_window.first() else {
        return Err(Error::Evaluation("no windows to score".into()));
    };
    let h = first.errors_ft.len();
    let mut acc = vec![0.0; h];
    for w in per_window {
        if w.errors_ft.len() != h {
            return Err(Error::Evaluation("windows scored at different horizons".into()));
        }
        for (a, e) in acc.iter_mut().zip(&w.errors_ft) {
            *a += e * e;
        }
    }
    Ok(acc.iter().map(|s| (s / per_window.len() as f64).sqrt()).collect())
}

/// Errors of `forecast` against `truth` at the given future-frame indices.
pub fn horizon_errors(forecast: &[[f64; 2]], truth: &[[f64; 2]], horizons: &[usize]) -> Result<Vec<f64>> {
    horizons
        .iter()
        .map(|&k| {
            let (p, t) = forecast.get(k).zip(truth.get(k)).ok_or_else(|| {
                Error::Evaluation(format!("horizon frame {k} beyond forecast of {}", forecast.len()))
            })?;
            Ok((p[0] - t[0]).hypot(p[1] - t[1]))
        })
        .collect()
}

impl MetricsReport {
    pub fn from_errors(
        variant: &str,
        per_window: &[WindowErrors],
        nll: Option<f64>,
        maneuver_accuracy: Option<f64>,
        config_hash: &str,
        data_hash: &str,
    ) -> Result<Self> {
        let ft = rmse_ft(per_window)?;
        Ok(MetricsReport {
            variant: variant.to_string(),
            horizons_s: HORIZONS_S[..ft.len().min(5)].to_vec(),
            rmse_m: ft.iter().map(|v| v * FEET_TO_METERS).collect(),
            rmse_ft: ft,
            nll,
            maneuver_accuracy,
            samples: per_window.len(),
            config_hash: config_hash.to_string(),
            data_hash: data_hash.to_string(),
            wall_time_s: None,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,rmse_m\n");
        for (h, r) in self.horizons_s.iter().zip(&self.rmse_m) {
            let _ = writeln!(s, "{h},{r}");
        }
        s
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        std::fs::write(json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Comparison table with one row per report: variant then RMSE per horizon.
pub fn comparison_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from("variant");
    for h in HORIZONS_S {
        let _ = write!(s, ",rmse_{h}s_m");
    }
    s.push('\n');
    for r in reports {
        s.push_str(&r.variant);
        for v in &r.rmse_m {
            let _ = write!(s, ",{v:.4}");
        }
        s.push('\n');
    }
    s
}

/// RMSE-versus-horizon curves as a standalone SVG document.
pub fn rmse_svg(reports: &[MetricsReport]) -> String {
    const W: f64 = 560.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let ymax = reports
        .iter()
        .flat_map(|r| r.rmse_m.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let x = |h: f64| M + (h - 1.0) / 4.0 * (W - 2.0 * M);
    let y = |v: f64| H - M - v / ymax * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>",
        H - M,
        W - M,
        H - M,
        H - M
    );
    for h in HORIZONS_S {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{h} s</text>", x(h as f64), H - M + 18.0);
    }
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>", M - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">RMSE (m)</text>", H / 2.0, H / 2.0);
    for (i, r) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = r
            .horizons_s
            .iter()
            .zip(&r.rmse_m)
            .map(|(&h, &v)| format!("{:.1},{:.1}", x(h as f64), y(v)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            M + 10.0,
            M + 16.0 * i as f64,
            r.variant
        );
    }
    s.push_str("</svg>\n");
    s
}
