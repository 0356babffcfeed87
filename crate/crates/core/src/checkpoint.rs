//! Model checkpoints as JSON. Positive quantities (`σ₀`, `Λ`, `a`, `σ`)
//! are stored on their natural scale and re-logged on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_json;
use crate::error::{Error, Result};
use crate::rff::{ForcingNet, ModelParams, RffParams};
use crate::types::DynamicsClass;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Layer {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForcingFile {
    /// `[1, hidden, d]`
    widths: Vec<usize>,
    activation: String,
    weights: Vec<Layer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    class: DynamicsClass,
    d: usize,
    #[serde(rename = "M")]
    m: usize,
    sigma0: f64,
    b: Vec<[f64; 2]>,
    #[serde(rename = "sqrtC")]
    sqrt_c: Vec<[[f64; 2]; 2]>,
    #[serde(rename = "Lambda_diag")]
    lambda_diag: Vec<f64>,
    a: f64,
    sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forcing: Option<ForcingFile>,
    omega_eps: Vec<Vec<f64>>,
}

fn to_file(p: &ModelParams) -> CheckpointFile {
    let dim = p.rff.dim;
    CheckpointFile {
        class: p.class,
        d: p.d,
        m: p.rff.num_bases(),
        sigma0: p.rff.sigma0(),
        b: p.rff.b.clone(),
        sqrt_c: p.rff.sqrt_c.iter().map(|l| [[l[0], 0.0], [l[1], l[2]]]).collect(),
        lambda_diag: p.rff.lambda_diag(),
        a: p.a(),
        sigma: p.sigma(),
        eta: p.eta.clone(),
        forcing: p.forcing.as_ref().map(|f| {
            let h = f.hidden();
            let d = f.out_dim();
            ForcingFile {
                widths: vec![1, h, d],
                activation: "tanh".into(),
                weights: vec![
                    Layer {
                        w: f.w1.iter().map(|v| vec![*v]).collect(),
                        b: f.b1.clone(),
                    },
                    Layer {
                        w: f.w2.chunks_exact(h).map(|r| r.to_vec()).collect(),
                        b: f.b2.clone(),
                    },
                ],
            }
        }),
        omega_eps: p.rff.omega_eps.chunks_exact(dim).map(|r| r.to_vec()).collect(),
    }
}

fn positive(v: f64, name: &str) -> std::result::Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v.ln())
    } else {
        Err(format!("`{name}` must be positive and finite, got {v}"))
    }
}

fn from_file(f: CheckpointFile) -> std::result::Result<ModelParams, String> {
    let dim = 2 * f.d;
    if f.d == 0 || f.m == 0 {
        return Err("`d` and `M` must be at least 1".into());
    }
    if f.b.len() != f.m || f.sqrt_c.len() != f.m || f.omega_eps.len() != f.m {
        return Err(format!("`b`, `sqrtC` and `omega_eps` must have M = {} rows", f.m));
    }
    if f.lambda_diag.len() != dim || f.omega_eps.iter().any(|r| r.len() != dim) {
        return Err(format!("`Lambda_diag` and `omega_eps` rows must have length 2d = {dim}"));
    }
    if f.sqrt_c.iter().any(|l| l[0][1] != 0.0) {
        return Err("`sqrtC` blocks must be lower triangular".into());
    }
    let log_lambda = f
        .lambda_diag
        .iter()
        .map(|v| positive(*v, "Lambda_diag"))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let forcing = match f.forcing {
        None => None,
        Some(ff) => {
            if ff.activation != "tanh" {
                return Err(format!("unsupported forcing activation `{}`", ff.activation));
            }
            let [one, h, d] = ff.widths[..] else {
                return Err("forcing `widths` must be [1, hidden, d]".into());
            };
            let [l1, l2] = &ff.weights[..] else {
                return Err("forcing net must have exactly two layers".into());
            };
            let shapes_ok = one == 1
                && d == f.d
                && l1.w.len() == h
                && l1.w.iter().all(|r| r.len() == 1)
                && l1.b.len() == h
                && l2.w.len() == d
                && l2.w.iter().all(|r| r.len() == h)
                && l2.b.len() == d;
            if !shapes_ok {
                return Err("forcing weights do not match `widths`".into());
            }
            Some(ForcingNet {
                w1: l1.w.iter().map(|r| r[0]).collect(),
                b1: l1.b.clone(),
                w2: l2.w.concat(),
                b2: l2.b.clone(),
            })
        }
    };
    let params = ModelParams {
        class: f.class,
        d: f.d,
        rff: RffParams {
            dim,
            b: f.b,
            sqrt_c: f.sqrt_c.iter().map(|l| [l[0][0], l[1][0], l[1][1]]).collect(),
            log_sigma0: positive(f.sigma0, "sigma0")?,
            log_lambda,
            omega_eps: f.omega_eps.concat(),
        },
        log_a: positive(f.a, "a")?,
        log_sigma: positive(f.sigma, "sigma")?,
        eta: f.eta,
        forcing,
    };
    params.validate().map_err(|e| e.to_string())?;
    Ok(params)
}

pub fn checkpoint_to_writer<W: Write>(params: &ModelParams, writer: W) -> Result<()> {
    params.validate()?;
    write_json(&to_file(params), writer)
}

pub fn checkpoint_from_reader<R: Read>(reader: R, origin: &Path) -> Result<ModelParams> {
    let format_err = |message: String| Error::Format {
        path: origin.to_path_buf(),
        message,
    };
    let file: CheckpointFile = serde_json::from_reader(reader).map_err(|e| format_err(e.to_string()))?;
    from_file(file).map_err(format_err)
}

pub fn checkpoint_write(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    checkpoint_to_writer(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn checkpoint_read(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    checkpoint_from_reader(BufReader::new(File::open(path)?), path)
}
