//! Manifest-driven datasets.
//!
//! A manifest is a tab-separated file with the header columns `clean`, `noise`, `snr_db` and
//! `seed`, one mixture per row. Relative paths resolve against the manifest's directory; lines
//! starting with `#` are ignored.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mixture::{crop, fit_noise, synthesize_mixture};
use crate::error::{Error, Result};
use crate::frontend::wav::read_wav;
use crate::frontend::{Waveform, SAMPLE_RATE};

pub const DEFAULT_SEGMENT_SECONDS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub snr_db: f64,
    pub segment_seconds: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * SAMPLE_RATE as f64).round() as usize
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    clean: PathBuf,
    noise: PathBuf,
    snr_db: f64,
    seed: u64,
}

/// One synthesized training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub mixture: Waveform,
    pub clean: Waveform,
    pub noise: Waveform,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    specs: Vec<MixtureSpec>,
}

impl Dataset {
    pub fn new(specs: Vec<MixtureSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in &specs {
            if !s.snr_db.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite snr_db for {}", s.clean_path.display())));
            }
            if !(s.segment_seconds > 0.0 && s.segment_seconds.is_finite()) {
                return Err(Error::InvalidArgument(format!("segment_seconds must be positive, got {}", s.segment_seconds)));
            }
        }
        Ok(Self { specs })
    }

    /// Reads and checks a manifest. Every referenced file must exist.
    pub fn load_manifest(path: impl AsRef<Path>, segment_seconds: f64) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => manifest_err(path, 0, format!("{other:?}")),
            })?;
        let headers = reader
            .headers()
            .map_err(|e| manifest_err(path, 1, e.to_string()))?
            .clone();
        let mut specs = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                manifest_err(path, line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let row: Row = record
                .deserialize(Some(&headers))
                .map_err(|e| manifest_err(path, line, e.to_string()))?;
            if !row.snr_db.is_finite() {
                return Err(manifest_err(path, line, "snr_db must be finite".into()));
            }
            let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
            let (clean, noise) = (resolve(row.clean), resolve(row.noise));
            for f in [&clean, &noise] {
                if !f.is_file() {
                    return Err(manifest_err(path, line, format!("missing file {}", f.display())));
                }
            }
            specs.push(MixtureSpec {
                clean_path: clean,
                noise_path: noise,
                snr_db: row.snr_db,
                segment_seconds,
                seed: row.seed,
            });
        }
        Self::new(specs)
    }

    /// Writes `specs` back as a manifest with paths relative to `dir` where possible.
    pub fn write_manifest(specs: &[MixtureSpec], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => manifest_err(path, 0, format!("{other:?}")),
            })?;
        for s in specs {
            let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
            w.serialize(Row {
                clean: rel(&s.clean_path),
                noise: rel(&s.noise_path),
                snr_db: s.snr_db,
                seed: s.seed,
            })
            .map_err(|e| manifest_err(path, 0, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[MixtureSpec] {
        &self.specs
    }

    /// Visiting order for `epoch`: a seeded permutation, fresh every epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.specs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Synthesizes item `index`. The result depends on the item's own seed only.
    pub fn example(&self, index: usize) -> Result<Example> {
        let spec = self
            .specs
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("item {index} out of range for {} items", self.len())))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let clean = crop(&read_wav(&spec.clean_path)?, spec.segment_samples(), &mut rng)?;
        let noise = fit_noise(&read_wav(&spec.noise_path)?, clean.len(), &mut rng)?;
        let m = synthesize_mixture(&clean, &noise, spec.snr_db)?;
        let stem = spec.clean_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Example {
            id: format!("{index:04}_{stem}"),
            mixture: m.mixture,
            clean: m.clean,
            noise: m.noise,
        })
    }
}

fn manifest_err(path: &Path, row: usize, reason: String) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        row,
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::wav::{write_wav, WavEncoding};
    use std::fs;

    fn corpus(dir: &Path) {
        let tone = |f: f32| Waveform::new((0..4000).map(|i| (i as f32 * f * 0.001).sin() * 0.3).collect()).unwrap();
        write_wav(dir.join("a.wav"), &tone(3.0), WavEncoding::Float32).unwrap();
        write_wav(dir.join("b.wav"), &tone(7.0), WavEncoding::Float32).unwrap();
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "clean\tnoise\tsnr_db\tseed\n").unwrap();
        let err = Dataset::load_manifest(&p, 1.0).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn rows_load_in_order_and_duplicates_stay_distinct() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path());
        let p = dir.path().join("m.tsv");
        fs::write(&p, "clean\tnoise\tsnr_db\tseed\n# comment\na.wav\tb.wav\t0\t1\na.wav\tb.wav\t-5\t2\nb.wav\ta.wav\t-2\t3\n")
            .unwrap();
        let ds = Dataset::load_manifest(&p, 1.0).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.specs()[0].snr_db, 0.0);
        assert_eq!(ds.specs()[1].snr_db, -5.0);
        assert_eq!(ds.epoch_order(0, 0), Dataset::load_manifest(&p, 1.0).unwrap().epoch_order(0, 0));
        let a = ds.example(0).unwrap();
        let b = ds.example(1).unwrap();
        assert_ne!(a.mixture, b.mixture);
    }

    #[test]
    fn missing_file_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path());
        let p = dir.path().join("m.tsv");
        fs::write(&p, "clean\tnoise\tsnr_db\tseed\n# first\na.wav\tb.wav\t0\t1\na.wav\tnope.wav\t0\t1\n").unwrap();
        match Dataset::load_manifest(&p, 1.0).unwrap_err() {
            Error::Manifest { row, reason, .. } => {
                assert_eq!(row, 4);
                assert!(reason.contains("nope.wav"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_row_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path());
        let p = dir.path().join("m.tsv");
        fs::write(&p, "clean\tnoise\tsnr_db\tseed\na.wav\tb.wav\tloud\t1\n").unwrap();
        assert!(matches!(Dataset::load_manifest(&p, 1.0), Err(Error::Manifest { row: 2, .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path());
        let specs = vec![MixtureSpec {
            clean_path: dir.path().join("a.wav"),
            noise_path: dir.path().join("b.wav"),
            snr_db: -1.0,
            segment_seconds: 1.0,
            seed: 9,
        }];
        let p = dir.path().join("out.tsv");
        Dataset::write_manifest(&specs, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("a.wav\tb.wav\t-1.0\t9"));
        assert_eq!(Dataset::load_manifest(&p, 1.0).unwrap().specs(), &specs[..]);
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let specs: Vec<MixtureSpec> = (0..16)
            .map(|i| MixtureSpec {
                clean_path: PathBuf::from(format!("{i}.wav")),
                noise_path: PathBuf::from("n.wav"),
                snr_db: 0.0,
                segment_seconds: 1.0,
                seed: i,
            })
            .collect();
        let ds = Dataset::new(specs).unwrap();
        assert_eq!(ds.epoch_order(5, 1), ds.epoch_order(5, 1));
        assert_ne!(ds.epoch_order(5, 0), ds.epoch_order(5, 1));
        let mut o = ds.epoch_order(5, 2);
        o.sort();
        assert_eq!(o, (0..16).collect::<Vec<_>>());
    }
}
