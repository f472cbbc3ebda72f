//! On-disk formats: datasets with their sidecar, model checkpoints, CSV
//! exports.
//!
//! Binary files start with one line of JSON (the header) followed by
//! little-endian records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{AutoEncoder, EncoderModel, Hyper, ModelKind, PcaModel};
use crate::nn::{Activation, Mlp, NnError};
use crate::synthgen::{DataTuple, Dataset, NuisanceFactors, RenderConfig, RenderParams, SidecarEntry, SynthError};
use crate::worlds::{WorldKind, WorldSpec, WorldState};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("file format: {0}")]
    Format(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    world: WorldKind,
    dim: usize,
    viewpoints: usize,
    distractors: usize,
    seed: u64,
    n_tuples: usize,
    n_action: usize,
    n_augmented: usize,
    render: RenderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SidecarHeader {
    format: String,
    n_tuples: usize,
    slots: usize,
}

const DATASET_FORMAT: &str = "lsr-dataset-v1";
const SIDECAR_FORMAT: &str = "lsr-sidecar-v1";
const CHECKPOINT_FORMAT: &str = "lsr-checkpoint-v1";

fn write_header<W: Write, T: Serialize>(w: &mut W, header: &T) -> Result<(), IoError> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn read_header<R: BufRead, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<T, IoError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    Ok(serde_json::from_str(line.trim_end())?)
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn get_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u8<R: Read>(r: &mut R) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn expect_eof<R: Read>(r: &mut R) -> Result<(), IoError> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(IoError::Format("trailing bytes".into())),
    }
}

/// Writes the observation file and the sidecar file.
pub fn save_dataset(ds: &Dataset, data_path: &Path, sidecar_path: &Path) -> Result<(), IoError> {
    let cfg = &ds.params.config;
    let mut w = BufWriter::new(File::create(data_path)?);
    write_header(
        &mut w,
        &DatasetHeader {
            format: DATASET_FORMAT.into(),
            world: ds.spec.kind,
            dim: cfg.dim,
            viewpoints: cfg.viewpoints,
            distractors: cfg.distractors,
            seed: cfg.seed,
            n_tuples: ds.len(),
            n_action: ds.n_action_pairs(),
            n_augmented: ds.n_augmented(),
            render: cfg.clone(),
        },
    )?;
    for t in &ds.tuples {
        put_f64s(&mut w, &t.o_i)?;
        put_f64s(&mut w, &t.o_j)?;
        w.write_all(&[t.s, t.augmented as u8])?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(sidecar_path)?);
    write_header(
        &mut w,
        &SidecarHeader {
            format: SIDECAR_FORMAT.into(),
            n_tuples: ds.len(),
            slots: ds.spec.slots,
        },
    )?;
    for s in &ds.sidecar {
        w.write_all(&s.state_i.0.to_le_bytes())?;
        w.write_all(&s.state_j.0.to_le_bytes())?;
        for f in [&s.factors_i, &s.factors_j] {
            w.write_all(&(f.viewpoint as u32).to_le_bytes())?;
            w.write_all(&f.distractors.to_le_bytes())?;
            put_f64s(&mut w, &[f.lighting])?;
            put_f64s(&mut w, &f.jitter)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Mixing matrices are
/// re-derived from the stored render configuration.
pub fn load_dataset(data_path: &Path, sidecar_path: &Path) -> Result<Dataset, IoError> {
    let mut r = BufReader::new(File::open(data_path)?);
    let h: DatasetHeader = read_header(&mut r)?;
    if h.format != DATASET_FORMAT {
        return Err(IoError::Format(format!("unexpected format `{}`", h.format)));
    }
    let spec = WorldSpec::new(h.world);
    let params = RenderParams::new(&spec, h.render.clone())?;
    let mut tuples = Vec::with_capacity(h.n_tuples);
    for _ in 0..h.n_tuples {
        let o_i = get_f64s(&mut r, h.dim)?;
        let o_j = get_f64s(&mut r, h.dim)?;
        let s = get_u8(&mut r)?;
        let augmented = get_u8(&mut r)? != 0;
        if s > 1 {
            return Err(IoError::Format(format!("similarity flag {s}")));
        }
        tuples.push(DataTuple { o_i, o_j, s, augmented });
    }
    expect_eof(&mut r)?;

    let mut r = BufReader::new(File::open(sidecar_path)?);
    let sh: SidecarHeader = read_header(&mut r)?;
    if sh.format != SIDECAR_FORMAT || sh.n_tuples != h.n_tuples || sh.slots != spec.slots {
        return Err(IoError::Format("sidecar does not match dataset".into()));
    }
    let mut sidecar = Vec::with_capacity(h.n_tuples);
    for _ in 0..h.n_tuples {
        let state_i = WorldState(get_u32(&mut r)?);
        let state_j = WorldState(get_u32(&mut r)?);
        let mut factors = Vec::with_capacity(2);
        for _ in 0..2 {
            let viewpoint = get_u32(&mut r)? as usize;
            let distractors = get_u32(&mut r)?;
            let lighting = get_f64s(&mut r, 1)?[0];
            let jitter = get_f64s(&mut r, spec.slots)?;
            factors.push(NuisanceFactors {
                viewpoint,
                distractors,
                lighting,
                jitter,
            });
        }
        let factors_j = factors.pop().expect("two entries");
        let factors_i = factors.pop().expect("two entries");
        sidecar.push(SidecarEntry {
            state_i,
            state_j,
            factors_i,
            factors_j,
        });
    }
    expect_eof(&mut r)?;
    Ok(Dataset {
        spec,
        params,
        tuples,
        sidecar,
    })
}

/// One row per tuple: `index,s,augmented,state_i,state_j,o_i_*,o_j_*`.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    let d = ds.params.config.dim;
    write!(w, "index,s,augmented,state_i,state_j")?;
    for side in ["o_i", "o_j"] {
        for k in 0..d {
            write!(w, ",{side}_{k}")?;
        }
    }
    writeln!(w)?;
    for (k, (t, s)) in ds.tuples.iter().zip(&ds.sidecar).enumerate() {
        write!(w, "{k},{},{},{},{}", t.s, t.augmented as u8, s.state_i.0, s.state_j.0)?;
        for v in t.o_i.iter().chain(&t.o_j) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetHeader {
    dims: Vec<usize>,
    activations: Vec<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    kind: ModelKind,
    hyper: Hyper,
    /// Raw: observation dimension. PCA: observation dimension.
    dim: usize,
    z_dim: usize,
    nets: Vec<NetHeader>,
    degenerate: bool,
}

/// Writes a model checkpoint: header, then parameter arrays (network
/// parameters in encoder-then-decoder order, or PCA mean, components and
/// eigenvalues).
pub fn save_checkpoint(model: &EncoderModel, hyper: &Hyper, path: &Path) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, hyper, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &EncoderModel, hyper: &Hyper, w: &mut W) -> Result<(), IoError> {
    let nets = model
        .nets()
        .iter()
        .map(|n| NetHeader {
            dims: n.dims().to_vec(),
            activations: n.activations().to_vec(),
        })
        .collect();
    let degenerate = matches!(model, EncoderModel::Pca(p) if p.degenerate);
    write_header(
        w,
        &CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            kind: model.kind(),
            hyper: hyper.clone(),
            dim: model.input_dim(),
            z_dim: model.latent_dim(),
            nets,
            degenerate,
        },
    )?;
    match model {
        EncoderModel::Pca(p) => {
            put_f64s(w, &p.mean)?;
            put_f64s(w, &p.components)?;
            put_f64s(w, &p.eigenvalues)?;
        }
        _ => {
            for n in model.nets() {
                put_f64s(w, n.params())?;
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, Hyper), IoError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<(EncoderModel, Hyper), IoError> {
    let h: CheckpointHeader = read_header(r)?;
    if h.format != CHECKPOINT_FORMAT {
        return Err(IoError::Format(format!("unexpected format `{}`", h.format)));
    }
    let mut nets = Vec::with_capacity(h.nets.len());
    for nh in &h.nets {
        let shell = Mlp::zeros(&nh.dims, &nh.activations)?;
        let params = get_f64s(r, shell.n_params())?;
        nets.push(Mlp::from_params(&nh.dims, &nh.activations, params)?);
    }
    let expect_nets = |k: usize| -> Result<(), IoError> {
        if nets.len() == k {
            Ok(())
        } else {
            Err(IoError::Format(format!("{} expects {k} networks, found {}", h.kind, nets.len())))
        }
    };
    let model = match h.kind {
        ModelKind::Raw => {
            expect_nets(0)?;
            EncoderModel::Raw { dim: h.dim }
        }
        ModelKind::Pca => {
            expect_nets(0)?;
            let mean = get_f64s(r, h.dim)?;
            let components = get_f64s(r, h.dim * h.z_dim)?;
            let eigenvalues = get_f64s(r, h.z_dim)?;
            EncoderModel::Pca(PcaModel {
                mean,
                components,
                eigenvalues,
                z_dim: h.z_dim,
                degenerate: h.degenerate,
            })
        }
        ModelKind::PcSiamese | ModelKind::CeSiamese => {
            expect_nets(1)?;
            let net = nets.pop().expect("one network");
            if h.kind == ModelKind::PcSiamese {
                EncoderModel::PcSiamese(net)
            } else {
                EncoderModel::CeSiamese(net)
            }
        }
        kind => {
            expect_nets(2)?;
            let dec = nets.pop().expect("decoder");
            let enc = nets.pop().expect("encoder");
            let ae = AutoEncoder { enc, dec };
            match kind {
                ModelKind::Ae => EncoderModel::Ae(ae),
                ModelKind::BetaVae => EncoderModel::BetaVae(ae),
                ModelKind::PcAe => EncoderModel::PcAe(ae),
                _ => EncoderModel::PcVae(ae),
            }
        }
    };
    expect_eof(r)?;
    Ok((model, h.hyper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::fit_pca;
    use crate::synthgen::{augment, generate_dataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dataset() -> Dataset {
        let spec = WorldSpec::new(WorldKind::ShelfArrangement);
        let cfg = RenderConfig {
            dim: 10,
            distractors: 2,
            seed: 4,
            ..RenderConfig::default()
        };
        let params = RenderParams::new(&spec, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = generate_dataset(&spec, &params, 30, 0.5, &mut rng).unwrap();
        augment(&ds, 1, &mut rng).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("d.bin"), dir.path().join("d.sidecar"));
        save_dataset(&ds, &a, &b).unwrap();
        let back = load_dataset(&a, &b).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_dataset_is_rejected() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("d.bin"), dir.path().join("d.sidecar"));
        save_dataset(&ds, &a, &b).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        std::fs::write(&a, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_dataset(&a, &b).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hyper = Hyper {
            z_dim: 3,
            hidden: vec![5],
            ..Hyper::default()
        };
        for kind in ModelKind::SEVEN.iter().copied().chain([ModelKind::Raw]) {
            let model = if kind == ModelKind::Pca {
                let obs: Vec<Vec<f64>> = (0..10).map(|i| (0..6).map(|k| ((i * k) % 7) as f64).collect()).collect();
                EncoderModel::Pca(fit_pca(&obs, 3).unwrap())
            } else {
                EncoderModel::init(kind, 6, &hyper, &mut rng).unwrap()
            };
            let mut buf = Vec::new();
            write_checkpoint(&model, &hyper, &mut buf).unwrap();
            let (back, h) = read_checkpoint(&mut &buf[..]).unwrap();
            assert_eq!(back, model, "{kind}");
            assert_eq!(h, hyper);
        }
    }

    #[test]
    fn dataset_csv_shape() {
        let ds = small_dataset();
        let mut buf = Vec::new();
        write_dataset_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), ds.len() + 1);
        assert_eq!(lines[0].split(',').count(), 5 + 20);
        assert_eq!(lines[1].split(',').count(), 5 + 20);
    }
}
