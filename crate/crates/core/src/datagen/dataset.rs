use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::signal::{
    add_noise_at_snr, double_talk_regions, make_echo, mix_at_ser, power, region_power,
    single_talk_regions, to_db, NonlinearitySpec, RirSpec,
};
use super::source::SourceSpec;
use super::wav::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::parallel::Executor;
use crate::SAMPLE_RATE;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Everything needed to rebuild one mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub id: String,
    pub far: SourceSpec,
    pub near: SourceSpec,
    pub rir: RirSpec,
    pub nonlinearity: NonlinearitySpec,
    pub ser_db: f64,
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Noise seed.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureItem {
    pub id: String,
    pub far: Vec<f64>,
    pub near: Vec<f64>,
    /// Echo after SER scaling.
    pub echo: Vec<f64>,
    pub noise: Vec<f64>,
    pub mixture: Vec<f64>,
    pub single_talk: Vec<Range<usize>>,
    /// `None` when the near end is silent throughout.
    pub realized_ser_db: Option<f64>,
    pub realized_snr_db: Option<f64>,
}

impl MixtureItem {
    pub fn double_talk(&self) -> Vec<Range<usize>> {
        double_talk_regions(&self.single_talk, self.near.len())
    }
}

// Every stored component is snapped to this grid so that summing them is
// exact and `mixture − echo − noise` recovers `near` bit for bit.
const GRID: f64 = (1u64 << 40) as f64;

fn snap(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = (*v * GRID).round() / GRID);
}

/// Synthesizes one item: echo through the RIR and loudspeaker model, SER
/// scaling over double-talk, optional white noise, then a power-of-two gain
/// keeping every component below full scale.
pub fn build_mixture(spec: &MixtureSpec) -> Result<MixtureItem> {
    let mut far = spec.far.realize()?;
    let mut near = spec.near.realize()?;
    let len = far.len().min(near.len());
    if len == 0 {
        return Err(Error::Contract("empty source".into()));
    }
    far.truncate(len);
    near.truncate(len);
    let g = spec.rir.realize()?;
    let (_, echo) = make_echo(&far, &g, &spec.nonlinearity)?;

    snap(&mut near);
    let single_talk = single_talk_regions(&near);
    let double_talk = double_talk_regions(&single_talk, len);
    let mut echo = if double_talk.is_empty() {
        echo
    } else {
        mix_at_ser(&near, &echo, spec.ser_db, &double_talk)?.1
    };
    snap(&mut echo);
    let clean_mix: Vec<f64> = near.iter().zip(&echo).map(|(a, b)| a + b).collect();
    let (_, mut noise) = add_noise_at_snr(&clean_mix, spec.snr_db, spec.seed)?;
    snap(&mut noise);

    let peak = near
        .iter()
        .chain(&echo)
        .chain(&noise)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mixture_peak = clean_mix
        .iter()
        .zip(&noise)
        .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    let mut gain = 1.0;
    while peak.max(mixture_peak) * gain > 0.99 {
        gain *= 0.5;
    }
    for x in [&mut near, &mut echo, &mut noise] {
        x.iter_mut().for_each(|v| *v *= gain);
    }
    let mixture: Vec<f64> = near
        .iter()
        .zip(&echo)
        .zip(&noise)
        .map(|((a, b), c)| a + b + c)
        .collect();

    let realized_ser_db = (!double_talk.is_empty())
        .then(|| to_db(region_power(&near, &double_talk) / region_power(&echo, &double_talk)));
    let realized_snr_db = spec.snr_db.map(|_| {
        let signal: Vec<f64> = near.iter().zip(&echo).map(|(a, b)| a + b).collect();
        to_db(power(&signal) / power(&noise))
    });
    Ok(MixtureItem {
        id: spec.id.clone(),
        far,
        near,
        echo,
        noise,
        mixture,
        single_talk,
        realized_ser_db,
        realized_snr_db,
    })
}

/// WAV locations relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemPaths {
    pub far: PathBuf,
    pub mixture: PathBuf,
    pub near: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub paths: ItemPaths,
    pub samples: usize,
    pub realized_ser_db: Option<f64>,
    pub realized_snr_db: Option<f64>,
    /// Sample ranges where the near end is silent.
    pub single_talk: Vec<Range<usize>>,
    pub spec: MixtureSpec,
}

impl ManifestRecord {
    /// Reads `(far, mixture, near)` with paths resolved against `base`.
    pub fn read_signals(&self, base: &Path) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let read = |p: &Path| -> Result<Vec<f64>> {
            let path = base.join(p);
            let (x, rate) = read_wav(&path)?;
            if rate != SAMPLE_RATE {
                return Err(Error::format(
                    path,
                    format!("{rate} Hz, expected {SAMPLE_RATE}"),
                ));
            }
            Ok(x)
        };
        let far = read(&self.paths.far)?;
        let mixture = read(&self.paths.mixture)?;
        let near = read(&self.paths.near)?;
        if far.len() != mixture.len() || near.len() != mixture.len() {
            return Err(Error::dim(
                "read_signals",
                format!(
                    "far {}, mixture {}, near {} samples",
                    far.len(),
                    mixture.len(),
                    near.len()
                ),
            ));
        }
        Ok((far, mixture, near))
    }

    pub fn double_talk(&self) -> Vec<Range<usize>> {
        double_talk_regions(&self.single_talk, self.samples)
    }
}

fn write_item(spec: &MixtureSpec, out_dir: &Path) -> Result<ManifestRecord> {
    let item = build_mixture(spec)?;
    let paths = ItemPaths {
        far: PathBuf::from("wav").join(format!("{}_far.wav", spec.id)),
        mixture: PathBuf::from("wav").join(format!("{}_mix.wav", spec.id)),
        near: PathBuf::from("wav").join(format!("{}_near.wav", spec.id)),
    };
    write_wav(&out_dir.join(&paths.far), &item.far, SAMPLE_RATE)?;
    write_wav(&out_dir.join(&paths.mixture), &item.mixture, SAMPLE_RATE)?;
    write_wav(&out_dir.join(&paths.near), &item.near, SAMPLE_RATE)?;
    Ok(ManifestRecord {
        id: spec.id.clone(),
        paths,
        samples: item.mixture.len(),
        realized_ser_db: item.realized_ser_db,
        realized_snr_db: item.realized_snr_db,
        single_talk: item.single_talk,
        spec: spec.clone(),
    })
}

/// Writes `wav/<id>_{far,mix,near}.wav` and `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(
    specs: &[MixtureSpec],
    out_dir: &Path,
    exec: &Executor,
) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    if let Some(dup) = specs.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(Error::Contract(format!("duplicate item id `{}`", dup.id)));
    }
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let records = exec
        .map(specs, |spec| {
            write_item(spec, out_dir).map_err(|e| e.for_item(&spec.id))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// Rebuilds every item listed in `manifest` into `out_dir`.
pub fn regenerate(manifest: &Path, out_dir: &Path, exec: &Executor) -> Result<Vec<ManifestRecord>> {
    let specs: Vec<MixtureSpec> = read_manifest(manifest)?
        .into_iter()
        .map(|r| r.spec)
        .collect();
    generate_dataset(&specs, out_dir, exec)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        records.push(record);
    }
    Ok(records)
}
