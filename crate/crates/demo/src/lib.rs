//! Browser bindings. Each export takes and returns plain strings so the page
//! needs no generated TypeScript types; errors surface as thrown JS errors.

use wasm_bindgen::prelude::*;

use ivpretest::analysis::{analyze, AnalysisConfig};
use ivpretest::io::{ingest_reader, ColumnMap};
use ivpretest::pretest::{default_randomization_scale, run_pretest, RandomizationLaw};
use ivpretest::sim::{generate, DGPConfig};
use ivpretest::Moments;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// A simulated dataset as CSV with columns `y, d, z1..zp`.
pub fn simulate_csv(n: usize, p: usize, r: f64, sigma12: f64, seed: u32) -> Result<String, String> {
    let data = generate(&DGPConfig::equal_strength(n, p, 1.0, r, sigma12, seed as u64)).map_err(|e| e.to_string())?;
    let mut out = String::from("y,d");
    for j in 1..=p {
        out.push_str(&format!(",z{j}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("{},{}", data.y[i], data.d[i]));
        for j in 0..p {
            out.push_str(&format!(",{}", data.z[(i, j)]));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Randomized pre-test of a CSV whose non-`y`, non-`d` columns are instruments.
pub fn pretest_json(csv: &str, c0: f64, seed: u32) -> Result<String, String> {
    let data = ingest_reader(csv.as_bytes(), &ColumnMap::default()).map_err(|e| e.to_string())?;
    let m = Moments::from_data(&data).map_err(|e| e.to_string())?;
    let law = RandomizationLaw::new(default_randomization_scale(&m), seed as u64).map_err(|e| e.to_string())?;
    let pre = run_pretest(&m, c0, Some(&law)).map_err(|e| e.to_string())?;
    serde_json::to_string_pretty(&pre).map_err(|e| e.to_string())
}

/// Full analysis; `config` is a JSON object with any `AnalysisConfig` keys.
pub fn analyze_json(csv: &str, config: &str) -> Result<String, String> {
    let cfg: AnalysisConfig = if config.trim().is_empty() {
        AnalysisConfig::default()
    } else {
        serde_json::from_str(config).map_err(|e| format!("config: {e}"))?
    };
    let data = ingest_reader(csv.as_bytes(), &cfg.columns).map_err(|e| e.to_string())?;
    analyze(&data, &cfg).and_then(|r| r.to_json()).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn simulate(n: usize, p: usize, r: f64, sigma12: f64, seed: u32) -> Result<String, JsError> {
    simulate_csv(n, p, r, sigma12, seed).map_err(js)
}

#[wasm_bindgen]
pub fn pretest(csv: &str, c0: f64, seed: u32) -> Result<String, JsError> {
    pretest_json(csv, c0, seed).map_err(js)
}

#[wasm_bindgen(js_name = analyze)]
pub fn analyze_js(csv: &str, config: &str) -> Result<String, JsError> {
    analyze_json(csv, config).map_err(js)
}
