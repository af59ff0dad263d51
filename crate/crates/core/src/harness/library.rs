//! Synthetic hex/shelf/volume library with a single anomalous volume.

use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lines per generated volume.
pub const LINES_PER_VOLUME: usize = 8;

/// Location of one volume in the hierarchy, all indices zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeAddress {
    pub hex: usize,
    pub shelf: usize,
    pub volume: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub hex_count: usize,
    pub shelf_count: usize,
    pub volume_count: usize,
    /// Where the needle goes; drawn from `seed` when absent.
    pub needle: Option<VolumeAddress>,
    pub seed: u64,
}

impl LibrarySpec {
    pub fn new(hex_count: usize, shelf_count: usize, volume_count: usize, seed: u64) -> Self {
        LibrarySpec {
            hex_count,
            shelf_count,
            volume_count,
            needle: None,
            seed,
        }
    }

    pub fn total_volumes(&self) -> usize {
        self.hex_count * self.shelf_count * self.volume_count
    }

    fn validate(&self) -> Result<()> {
        if self.hex_count == 0 || self.shelf_count == 0 || self.volume_count == 0 {
            return Err(Error::Usage("library dimensions must be positive".into()));
        }
        if let Some(n) = self.needle {
            if n.hex >= self.hex_count || n.shelf >= self.shelf_count || n.volume >= self.volume_count {
                return Err(Error::Usage(format!("needle {n:?} lies outside the library")));
            }
        }
        Ok(())
    }
}

pub fn hex_name(hex: usize) -> String {
    format!("hex_{hex:02x}")
}

pub fn shelf_name(shelf: usize) -> String {
    format!("shelf_{shelf:02}")
}

pub fn volume_name(volume: usize) -> String {
    format!("volume_{volume:03}.txt")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub root: PathBuf,
    pub hexes: Vec<PathBuf>,
    /// Every volume, in generation order (hex, shelf, volume).
    pub volumes: Vec<PathBuf>,
    pub needle: VolumeAddress,
    pub needle_path: PathBuf,
}

impl LibraryManifest {
    pub fn shelf_dir(&self, hex: usize, shelf: usize) -> PathBuf {
        self.hexes[hex].join(shelf_name(shelf))
    }
}

fn random_identifier(rng: &mut StdRng) -> String {
    const HEX: &[u8] = b"0123456789abcdef";
    let mut s = String::with_capacity(36);
    for (i, width) in [8, 4, 4, 4, 12].into_iter().enumerate() {
        if i > 0 {
            s.push('-');
        }
        for _ in 0..width {
            s.push(HEX[rng.random_range(0..16)] as char);
        }
    }
    s
}

fn needle_text(addr: VolumeAddress, seed: u64) -> String {
    format!(
        "Here the catalogue breaks its pattern.\n\
         This volume was written by hand: hex {}, shelf {}, volume {}.\n\
         Seed {seed} placed it where the searchers would least expect.\n",
        addr.hex, addr.shelf, addr.volume
    )
}

/// Writes the library under `root`. The same spec always yields the same
/// bytes at the same paths.
pub fn generate_library(spec: &LibrarySpec, root: &Path) -> Result<LibraryManifest> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let needle = spec.needle.unwrap_or_else(|| VolumeAddress {
        hex: rng.random_range(0..spec.hex_count),
        shelf: rng.random_range(0..spec.shelf_count),
        volume: rng.random_range(0..spec.volume_count),
    });
    let mut manifest = LibraryManifest {
        root: root.to_path_buf(),
        hexes: Vec::with_capacity(spec.hex_count),
        volumes: Vec::with_capacity(spec.total_volumes()),
        needle,
        needle_path: PathBuf::new(),
    };
    for hex in 0..spec.hex_count {
        let hex_dir = root.join(hex_name(hex));
        manifest.hexes.push(hex_dir.clone());
        for shelf in 0..spec.shelf_count {
            let shelf_dir = hex_dir.join(shelf_name(shelf));
            fs::create_dir_all(&shelf_dir)?;
            for volume in 0..spec.volume_count {
                let path = shelf_dir.join(volume_name(volume));
                let addr = VolumeAddress { hex, shelf, volume };
                // Random lines are drawn even for the needle so that moving
                // the needle leaves every other volume unchanged.
                let mut body = String::new();
                for _ in 0..LINES_PER_VOLUME {
                    body.push_str(&random_identifier(&mut rng));
                    body.push('\n');
                }
                if addr == needle {
                    body = needle_text(addr, spec.seed);
                    manifest.needle_path = path.clone();
                }
                fs::write(&path, body)?;
                manifest.volumes.push(path);
            }
        }
    }
    Ok(manifest)
}
