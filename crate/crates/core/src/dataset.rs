//! Dataset files: JSON for storage, CSV for plotting.
//!
//! Floats are written with 17 significant digits, which together with
//! correctly rounded parsing makes the JSON round trip bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DynamicsClass, ObservedDataset, PhaseState};

/// JSON formatter that prints every `f64` as `d.dddddddddddddddde±x`.
pub(crate) struct Digits17;

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub(crate) fn write_json<T: Serialize, W: Write>(value: &T, writer: W) -> Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(writer, Digits17);
    value.serialize(&mut ser)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    system: String,
    class: DynamicsClass,
    d: usize,
    noise_sigma: f64,
    seed: u64,
    times: Vec<f64>,
    trajectories: Vec<Vec<Vec<f64>>>,
}

fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains a non-finite value")));
    }
    Ok(())
}

pub fn dataset_to_writer<W: Write>(ds: &ObservedDataset, writer: W) -> Result<()> {
    ds.validate()?;
    check_finite(ds.times.iter().copied(), "times")?;
    let file = DatasetFile {
        system: ds.system.clone(),
        class: ds.class,
        d: ds.d,
        noise_sigma: ds.noise_sigma,
        seed: ds.seed,
        times: ds.times.clone(),
        trajectories: ds
            .observations
            .iter()
            .map(|t| t.iter().map(|s| s.as_slice().to_vec()).collect())
            .collect(),
    };
    write_json(&file, writer)
}

/// Parses and validates a dataset. `origin` names the source in errors.
pub fn dataset_from_reader<R: Read>(reader: R, origin: &Path) -> Result<ObservedDataset> {
    let format_err = |message: String| Error::Format {
        path: origin.to_path_buf(),
        message,
    };
    let file: DatasetFile = serde_json::from_reader(reader).map_err(|e| format_err(e.to_string()))?;
    if file.d == 0 {
        return Err(format_err("field `d` must be at least 1".into()));
    }
    let mut observations = Vec::with_capacity(file.trajectories.len());
    for (i, traj) in file.trajectories.into_iter().enumerate() {
        if traj.len() != file.times.len() {
            return Err(Error::dim(
                format!("{}: trajectories[{i}] length", origin.display()),
                file.times.len(),
                traj.len(),
            ));
        }
        let mut states = Vec::with_capacity(traj.len());
        for (j, x) in traj.into_iter().enumerate() {
            if x.len() != 2 * file.d {
                return Err(Error::dim(
                    format!("{}: trajectories[{i}][{j}] state length", origin.display()),
                    2 * file.d,
                    x.len(),
                ));
            }
            states.push(PhaseState::from_flat(x).map_err(|e| format_err(format!("trajectories[{i}][{j}]: {e}")))?);
        }
        observations.push(states);
    }
    let ds = ObservedDataset {
        system: file.system,
        class: file.class,
        d: file.d,
        noise_sigma: file.noise_sigma,
        seed: file.seed,
        times: file.times,
        observations,
    };
    ds.validate().map_err(|e| match e {
        Error::Invalid(m) => format_err(m),
        other => other,
    })?;
    Ok(ds)
}

pub fn dataset_write(path: impl AsRef<Path>, ds: &ObservedDataset) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    dataset_to_writer(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn dataset_read(path: impl AsRef<Path>) -> Result<ObservedDataset> {
    let path = path.as_ref();
    dataset_from_reader(BufReader::new(File::open(path)?), path)
}

/// One row per `(trajectory, time)`: `traj_id, t, q_1..q_d, p_1..p_d`.
pub fn dataset_to_csv<W: Write>(ds: &ObservedDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend((1..=ds.d).map(|i| format!("q_{i}")));
    header.extend((1..=ds.d).map(|i| format!("p_{i}")));
    w.write_record(&header)?;
    for (i, traj) in ds.observations.iter().enumerate() {
        for (t, s) in ds.times.iter().zip(traj) {
            let mut row = vec![i.to_string(), format!("{t:.16e}")];
            row.extend(s.as_slice().iter().map(|v| format!("{v:.16e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{generate_dataset, GenConfig, SystemName, SystemSpec};
    use proptest::prelude::*;

    fn roundtrip(ds: &ObservedDataset) -> ObservedDataset {
        let mut buf = Vec::new();
        dataset_to_writer(ds, &mut buf).unwrap();
        dataset_from_reader(buf.as_slice(), Path::new("mem")).unwrap()
    }

    fn empty() -> ObservedDataset {
        ObservedDataset {
            system: "S".into(),
            class: DynamicsClass::Conservative,
            d: 1,
            noise_sigma: 0.0,
            seed: 3,
            times: vec![0.0, 1.0],
            observations: vec![],
        }
    }

    #[test]
    fn empty_dataset_roundtrips() {
        assert_eq!(roundtrip(&empty()), empty());
    }

    #[test]
    fn damped_pendulum_roundtrips_exactly() {
        let ds = generate_dataset(&SystemSpec::preset(SystemName::DP), &GenConfig::preset(SystemName::DP)).unwrap();
        let back = roundtrip(&ds);
        for (a, b) in ds.observations.iter().flatten().zip(back.observations.iter().flatten()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(ds, back);
    }

    #[test]
    fn files_on_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ds.json");
        let ds = generate_dataset(
            &SystemSpec::preset(SystemName::HH),
            &GenConfig { trajectories: 4, steps: 10, ..GenConfig::preset(SystemName::HH) },
        )
        .unwrap();
        dataset_write(&path, &ds).unwrap();
        assert_eq!(dataset_read(&path).unwrap(), ds);
    }

    #[test]
    fn non_increasing_times_are_rejected() {
        let json = r#"{"system":"S","class":"Conservative","d":1,"noise_sigma":0.0,"seed":0,
            "times":[0.0,0.5,0.5],"trajectories":[[[0,0],[0,0],[0,0]]]}"#;
        let err = dataset_from_reader(json.as_bytes(), Path::new("bad.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.json") && msg.contains("strictly increasing"), "{msg}");
    }

    #[test]
    fn dimension_mismatch_names_expected_and_found() {
        let json = r#"{"system":"S","class":"Conservative","d":1,"noise_sigma":0.0,"seed":0,
            "times":[0.0,0.5],"trajectories":[[[0,0],[0,0,1]]]}"#;
        match dataset_from_reader(json.as_bytes(), Path::new("m.json")).unwrap_err() {
            Error::Dimension { expected, found, context } => {
                assert_eq!((expected, found), (2, 3));
                assert!(context.contains("trajectories[0][1]"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_json_reports_position() {
        let json = "{\"system\": \"S\",\n \"class\": 12}";
        let msg = dataset_from_reader(json.as_bytes(), Path::new("x.json")).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let ds = generate_dataset(
            &SystemSpec::preset(SystemName::S),
            &GenConfig { trajectories: 3, steps: 7, ..GenConfig::default() },
        )
        .unwrap();
        let mut buf = Vec::new();
        dataset_to_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "traj_id,t,q_1,p_1");
        assert_eq!(lines.len(), 1 + 3 * 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_datasets_roundtrip(
            d in 1usize..3,
            n_traj in 0usize..4,
            n_t in 1usize..6,
            seed in any::<u64>(),
            raw in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 48),
        ) {
            let times: Vec<f64> = (0..n_t).map(|j| j as f64 * 0.37).collect();
            let mut k = 0;
            let observations = (0..n_traj).map(|_| (0..n_t).map(|_| {
                let x: Vec<f64> = (0..2 * d).map(|_| { k += 1; raw[k % raw.len()] }).collect();
                PhaseState::from_flat(x).unwrap()
            }).collect()).collect();
            let ds = ObservedDataset {
                system: "DP".into(), class: DynamicsClass::Dissipative, d, noise_sigma: 0.1, seed, times, observations,
            };
            let back = roundtrip(&ds);
            prop_assert_eq!(back, ds);
        }
    }
}
