//! Plain-text model checkpoints.
//!
//! ```text
//! gatecast-checkpoint 1
//! kind lstm
//! units 4
//! input_dim 1
//! steps 1
//! window 60
//! peepholes true
//! output_peephole current
//! epochs 200
//! batch_size 32
//! learning_rate 1e-3
//! seed 42
//! gradient_clip none
//! final_loss 1.2e-3
//! tensor W_i 4 1
//! <row-major values, one matrix row per line>
//! ...
//! end
//! ```
//!
//! Floats use the shortest representation that parses back to the same
//! bits, so a write/read cycle is exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::cells::{
    CellKind, CellParams, DenseParams, GruParams, LstmConfig, LstmParams, Network, OutputPeephole,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::training::{TrainConfig, TrainedModel};

const MAGIC: &str = "gatecast-checkpoint 1";

pub fn to_string(model: &TrainedModel) -> String {
    let net = &model.network;
    let cfg = &model.config;
    let lstm = match &net.cell {
        CellParams::Lstm(p) => p.config,
        CellParams::Gru(_) => cfg.lstm,
    };
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "kind {}", net.kind());
    let _ = writeln!(out, "units {}", net.units());
    let _ = writeln!(out, "input_dim {}", net.cell.input_dim());
    let _ = writeln!(out, "steps {}", net.steps());
    let _ = writeln!(out, "window {}", model.window);
    let _ = writeln!(out, "peepholes {}", lstm.peepholes);
    let _ = writeln!(
        out,
        "output_peephole {}",
        match lstm.output_peephole {
            OutputPeephole::Current => "current",
            OutputPeephole::Previous => "previous",
        }
    );
    let _ = writeln!(out, "epochs {}", cfg.epochs);
    let _ = writeln!(out, "batch_size {}", cfg.batch_size);
    let _ = writeln!(out, "learning_rate {:e}", cfg.learning_rate);
    let _ = writeln!(out, "seed {}", cfg.seed);
    match cfg.gradient_clip {
        Some(c) => {
            let _ = writeln!(out, "gradient_clip {c:e}");
        }
        None => {
            let _ = writeln!(out, "gradient_clip none");
        }
    }
    let _ = writeln!(out, "final_loss {:e}", model.final_loss);
    for (name, m) in net.tensors() {
        let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
        for row in m.row_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }
    let _ = writeln!(out, "end");
    out
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::ingest(path, msg),
        other => other,
    })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(format!("malformed checkpoint: {}", msg.into()))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(format!("cannot parse `{key}` value `{value}`")))
}

pub fn from_str(text: &str) -> Result<TrainedModel> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(bad("missing header line"));
    }
    let mut header: HashMap<String, String> = HashMap::new();
    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    let mut ended = false;
    while let Some(line) = lines.next() {
        let line = line.trim();
        if line == "end" {
            ended = true;
            break;
        }
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("line `{line}`")))?;
        if key == "tensor" {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(bad(format!("tensor line `{line}`")));
            };
            let rows: usize = parse("rows", rows)?;
            let cols: usize = parse("cols", cols)?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row = lines.next().ok_or_else(|| bad(format!("tensor {name} truncated")))?;
                for tok in row.split_whitespace() {
                    data.push(parse::<f64>(name, tok)?);
                }
            }
            let m = Matrix::new(rows, cols, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            tensors.insert(name.to_string(), m);
        } else {
            header.insert(key.to_string(), rest.trim().to_string());
        }
    }
    if !ended {
        return Err(bad("missing `end`"));
    }

    let get = |key: &str| -> Result<&str> {
        header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing `{key}`")))
    };
    let kind: CellKind = get("kind")?.parse().map_err(|_| bad("unknown kind"))?;
    let units: usize = parse("units", get("units")?)?;
    let input_dim: usize = parse("input_dim", get("input_dim")?)?;
    let steps: usize = parse("steps", get("steps")?)?;
    let lstm = LstmConfig {
        peepholes: parse("peepholes", get("peepholes")?)?,
        output_peephole: match get("output_peephole")? {
            "current" => OutputPeephole::Current,
            "previous" => OutputPeephole::Previous,
            other => return Err(bad(format!("output_peephole `{other}`"))),
        },
    };
    let config = TrainConfig {
        epochs: parse("epochs", get("epochs")?)?,
        batch_size: parse("batch_size", get("batch_size")?)?,
        learning_rate: parse("learning_rate", get("learning_rate")?)?,
        seed: parse("seed", get("seed")?)?,
        units,
        gradient_clip: match get("gradient_clip")? {
            "none" => None,
            v => Some(parse("gradient_clip", v)?),
        },
        lstm,
    };

    let mut network = Network {
        cell: match kind {
            CellKind::Lstm => CellParams::Lstm(LstmParams::zeros(units, input_dim, lstm)),
            CellKind::Gru => CellParams::Gru(GruParams::zeros(units, input_dim)),
        },
        dense: DenseParams::zeros(steps, units),
    };
    for (name, slot) in network.tensors_mut() {
        let m = tensors
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if m.shape() != slot.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    network.validate()?;
    Ok(TrainedModel {
        network,
        config,
        window: parse("window", get("window")?)?,
        final_loss: parse("final_loss", get("final_loss")?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn model(kind: CellKind, seed: u64, lstm: LstmConfig) -> TrainedModel {
        let mut rng = Rng::new(seed);
        let network = Network::init(kind, 3, 2, lstm, &mut rng).unwrap();
        TrainedModel {
            network,
            config: TrainConfig {
                units: 3,
                seed,
                gradient_clip: Some(1.5),
                lstm,
                ..TrainConfig::default()
            },
            window: 7,
            final_loss: 0.1 + seed as f64 * 1e-9,
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(seed in 0u64..10_000, lstm_kind in any::<bool>(), previous in any::<bool>()) {
            let kind = if lstm_kind { CellKind::Lstm } else { CellKind::Gru };
            let lstm = LstmConfig {
                peepholes: true,
                output_peephole: if previous { OutputPeephole::Previous } else { OutputPeephole::Current },
            };
            let m = model(kind, seed, lstm);
            prop_assert_eq!(from_str(&to_string(&m)).unwrap(), m);
        }
    }

    #[test]
    fn rejects_damaged_files() {
        let text = to_string(&model(CellKind::Gru, 1, LstmConfig::default()));
        assert!(from_str("nonsense").is_err());
        assert!(from_str(&text.replace("end", "")).is_err());
        assert!(from_str(&text.replace("tensor U_h 3 3", "tensor U_h 3 2")).is_err());
        assert!(from_str(&text.replace("kind gru", "kind rnn")).is_err());
    }
}
