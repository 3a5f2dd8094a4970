//! Output plumbing: atomic file writes, CSV and JSON emission with a
//! provenance header (seed, config content hash, tool version), and the
//! plot-data extraction per task kind.

use crate::tasks::TaskResult;
use sdg_core::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct Meta {
    pub seed: u64,
    pub seed_source: &'static str,
    pub config_sha: String,
}

pub fn config_hash(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..12].to_string()
}

impl Meta {
    pub fn csv_header(&self) -> String {
        format!(
            "# seed={} seed_source={} config_sha={} version={}\n",
            self.seed,
            self.seed_source,
            self.config_sha,
            env!("CARGO_PKG_VERSION")
        )
    }

    pub fn json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "seed_source": self.seed_source,
            "config_sha": self.config_sha,
            "version": env!("CARGO_PKG_VERSION"),
        })
    }
}

/// Write via a temporary sibling then rename, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp: PathBuf = path.with_extension(format!(
        "{}.tmp-{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// JSON with sorted keys and an embedded `_meta` block.
pub fn write_json(path: &Path, mut value: serde_json::Value, meta: &Meta) -> Result<()> {
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("_meta".into(), meta.json_value());
    }
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::Io(format!("json encode: {e}")))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn write_csv(path: &Path, body: &str, meta: &Meta) -> Result<()> {
    write_atomic(path, format!("{}{}", meta.csv_header(), body).as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    ValueVsX,
    EnvelopeVsN,
    PdeSurface,
    DppBracket,
}

/// Headered CSV with a stable column order; deterministic bytes for fixed
/// inputs.
pub fn emit_plotdata(result: &TaskResult, kind: PlotKind) -> Result<String> {
    match (result, kind) {
        (TaskResult::Value { rows, seed }, PlotKind::ValueVsX) => {
            let mut out = String::from(
                "t0,x,value_w1,value_w2,std_err,argmin,argmax,n_strategies,n_controls,seed\n",
            );
            for (w1, w2) in rows {
                let x_join = w1
                    .x
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(";");
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    w1.t0,
                    x_join,
                    w1.value,
                    w2.value,
                    w1.std_err.max(w2.std_err),
                    w1.argmin_strategy,
                    w1.argmax_control,
                    w1.class_sizes.0,
                    w1.class_sizes.1,
                    seed
                ));
            }
            Ok(out)
        }
        (TaskResult::Hamiltonian { result, which }, PlotKind::EnvelopeVsN) => {
            let mut out = String::from("n,value,which\n");
            for (i, v) in result.per_level.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", i + 1, v, which));
            }
            Ok(out)
        }
        (TaskResult::Pde { grid }, PlotKind::PdeSurface) => {
            let mut out = String::from("t,x,w\n");
            for layer in 0..=grid.n_t {
                let t = grid.t_node(layer);
                for j in 0..grid.n_x {
                    out.push_str(&format!("{},{},{}\n", t, grid.x_node(j), grid.value(layer, j)));
                }
            }
            Ok(out)
        }
        (TaskResult::Dpp { reports }, PlotKind::DppBracket) => {
            let mut out = String::from("which,lower,w_hat,upper,epsilon,delta,tol_mc,pass\n");
            for (which, rep) in reports {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    which,
                    rep.lower,
                    rep.w_hat,
                    rep.upper,
                    rep.epsilon,
                    rep.delta,
                    rep.tol_mc,
                    rep.pass
                ));
            }
            Ok(out)
        }
        _ => Err(Error::KindMismatch),
    }
}
