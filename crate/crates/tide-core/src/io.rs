//! On-disk formats shared by every artifact directory: a JSON manifest
//! that records shapes and offsets, plus little-endian float blobs.
//!
//! Checkpoints and datasets store arrays as float32. Exact-resume state
//! (parameters, optimizer moments) is written as a separate float64 blob
//! so a resumed run continues bit-for-bit from where it stopped.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde::de::DeserializeOwned;

use crate::error::{Result, TideError};
use crate::nn::ParamStore;
use crate::synthworld::{Dataset, GenePerturbSample, Sample, SynthConfig, World};

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Provenance hash of a config: FNV-1a of its canonical JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

/// One named array inside a blob file. `offset` and `count` are in
/// elements, not bytes; `count` must equal the product of `shape`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub count: u64,
}

fn check_entries(entries: &[BlobEntry], total: u64, path: &Path) -> Result<()> {
    let mut expect = 0u64;
    for e in entries {
        let n: usize = e.shape.iter().product();
        if n as u64 != e.count {
            return Err(TideError::data(format!(
                "blob entry {} claims {} elements but shape {:?} has {}",
                e.name, e.count, e.shape, n
            )));
        }
        if e.offset != expect {
            return Err(TideError::data(format!(
                "blob entry {} at offset {} but {} expected",
                e.name, e.offset, expect
            )));
        }
        expect += e.count;
    }
    if expect != total {
        return Err(TideError::data(format!(
            "blob file {} holds {} elements but manifest lists {}",
            path.display(),
            total,
            expect
        )));
    }
    Ok(())
}

fn write_blob(
    path: &Path,
    parts: &[(&str, Vec<usize>, &[f64])],
    width: usize,
) -> Result<Vec<BlobEntry>> {
    let mut file = fs::File::create(path)?;
    let mut entries = Vec::with_capacity(parts.len());
    let mut offset = 0u64;
    let mut buf = Vec::new();
    for (name, shape, data) in parts {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape/data mismatch for {name}");
        buf.clear();
        buf.reserve(n * width);
        for &x in *data {
            if width == 4 {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        file.write_all(&buf)?;
        entries.push(BlobEntry {
            name: name.to_string(),
            shape: shape.clone(),
            offset,
            count: n as u64,
        });
        offset += n as u64;
    }
    file.flush()?;
    Ok(entries)
}

fn read_blob(path: &Path, entries: &[BlobEntry], width: usize) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % width != 0 {
        return Err(TideError::data(format!(
            "blob file {} is not a whole number of {width}-byte floats",
            path.display()
        )));
    }
    check_entries(entries, (bytes.len() / width) as u64, path)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let start = e.offset as usize * width;
        let end = start + e.count as usize * width;
        let data = bytes[start..end]
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    f32::from_le_bytes(c.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(c.try_into().unwrap())
                }
            })
            .collect();
        out.push(data);
    }
    Ok(out)
}

/// Write named arrays as one concatenated little-endian float32 file.
pub fn write_f32_blob(path: &Path, parts: &[(&str, Vec<usize>, &[f64])]) -> Result<Vec<BlobEntry>> {
    write_blob(path, parts, 4)
}

/// Read every entry of a float32 blob, widened to f64.
pub fn read_f32_blob(path: &Path, entries: &[BlobEntry]) -> Result<Vec<Vec<f64>>> {
    read_blob(path, entries, 4)
}

/// Write named arrays as one concatenated little-endian float64 file.
pub fn write_f64_blob(path: &Path, parts: &[(&str, Vec<usize>, &[f64])]) -> Result<Vec<BlobEntry>> {
    write_blob(path, parts, 8)
}

/// Read every entry of a float64 blob, exactly.
pub fn read_f64_blob(path: &Path, entries: &[BlobEntry]) -> Result<Vec<Vec<f64>>> {
    read_blob(path, entries, 8)
}

fn store_parts(store: &ParamStore) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    store
        .ids()
        .map(|id| {
            let v = store.get(id);
            (
                store.name(id).to_string(),
                vec![v.nrows(), v.ncols()],
                v.iter().copied().collect::<Vec<f64>>(),
            )
        })
        .collect()
}

/// Snapshot every parameter of a store into a float blob at `path`.
/// Entry names are the parameter names, so a reload can bind by name.
pub fn save_store(path: &Path, store: &ParamStore, f64_exact: bool) -> Result<Vec<BlobEntry>> {
    let owned = store_parts(store);
    let parts: Vec<(&str, Vec<usize>, &[f64])> = owned
        .iter()
        .map(|(n, s, d)| (n.as_str(), s.clone(), d.as_slice()))
        .collect();
    if f64_exact {
        write_f64_blob(path, &parts)
    } else {
        write_f32_blob(path, &parts)
    }
}

/// Load parameter values back into a store built with identical names
/// and shapes. Trainable flags are left as the caller constructed them.
pub fn load_store(
    path: &Path,
    entries: &[BlobEntry],
    store: &mut ParamStore,
    f64_exact: bool,
) -> Result<()> {
    if entries.len() != store.len() {
        return Err(TideError::data(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    let data = if f64_exact {
        read_f64_blob(path, entries)?
    } else {
        read_f32_blob(path, entries)?
    };
    for (e, values) in entries.iter().zip(data) {
        let id = store.lookup(&e.name)?;
        let cur = store.get(id);
        if e.shape != [cur.nrows(), cur.ncols()] {
            return Err(TideError::data(format!(
                "parameter {} has shape {:?} on disk but {:?} in model",
                e.name,
                e.shape,
                [cur.nrows(), cur.ncols()]
            )));
        }
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), values)
            .expect("entry count was validated against shape");
        store.set(id, arr);
    }
    Ok(())
}

/// Refuse to write into a directory that already holds a manifest,
/// unless `force` is set. Creates the directory if needed.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.join("manifest.json").exists() && !force {
        return Err(TideError::usage(format!(
            "{} already contains a manifest; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Serialize any manifest as pretty JSON with a trailing newline.
pub fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Read and parse `manifest.json` from a directory.
pub fn read_manifest<T: DeserializeOwned>(dir: &Path) -> Result<T> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(TideError::usage(format!(
            "no manifest.json under {}",
            dir.display()
        )));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn dose_to_string(d: f64) -> String {
    format!("{d}")
}

fn dose_from_string(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| TideError::data(format!("bad dose string {s:?}")))
}

/// Per-sample metadata; arrays live in the blob file. Doses are decimal
/// micromolar strings and round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub cell_id: String,
    pub drug_id: Option<String>,
    pub dose_image: Option<String>,
    pub dose_rna: Option<String>,
    pub batch_id: String,
    pub well_id: String,
    pub is_control: bool,
    pub is_paired: bool,
    /// Row into the `rna` blob when the sample carries a transcriptome.
    pub rna_row: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneSampleMeta {
    pub sample_id: String,
    pub gene: usize,
    pub cell_id: String,
    pub batch_id: String,
    pub well_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: SynthConfig,
    pub config_hash: String,
    pub samples: Vec<SampleMeta>,
    pub gene_samples: Vec<GeneSampleMeta>,
    pub splits: crate::synthworld::SplitManifest,
    pub truth: crate::synthworld::GroundTruthAssoc,
    pub blobs: Vec<BlobEntry>,
}

const DATASET_VERSION: u32 = 1;
const DATASET_BLOB: &str = "arrays.f32";

/// Write a dataset directory: `manifest.json` plus one float32 blob
/// holding images, transcriptomes, and gene-perturbation images.
pub fn save_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    prepare_dir(dir, force)?;
    let (c, h, w) = ds.config.image_shape;
    let g = ds.config.n_genes;

    let mut images = Vec::with_capacity(ds.samples.len() * c * h * w);
    let mut rna = Vec::new();
    let mut samples = Vec::with_capacity(ds.samples.len());
    let mut rna_rows = 0usize;
    for s in &ds.samples {
        images.extend(s.image.iter().copied());
        let rna_row = s.rna.as_ref().map(|r| {
            rna.extend(r.iter().copied());
            rna_rows += 1;
            rna_rows - 1
        });
        samples.push(SampleMeta {
            sample_id: s.sample_id.clone(),
            cell_id: s.cell_id.clone(),
            drug_id: s.drug_id.clone(),
            dose_image: s.dose_image.map(dose_to_string),
            dose_rna: s.dose_rna.map(dose_to_string),
            batch_id: s.batch_id.clone(),
            well_id: s.well_id.clone(),
            is_control: s.is_control,
            is_paired: s.is_paired,
            rna_row,
        });
    }
    let mut gene_images = Vec::with_capacity(ds.gene_samples.len() * c * h * w);
    let mut gene_samples = Vec::with_capacity(ds.gene_samples.len());
    for s in &ds.gene_samples {
        gene_images.extend(s.image.iter().copied());
        gene_samples.push(GeneSampleMeta {
            sample_id: s.sample_id.clone(),
            gene: s.gene,
            cell_id: s.cell_id.clone(),
            batch_id: s.batch_id.clone(),
            well_id: s.well_id.clone(),
        });
    }

    let blobs = write_f32_blob(
        &dir.join(DATASET_BLOB),
        &[
            ("images", vec![ds.samples.len(), c, h, w], &images),
            ("rna", vec![rna_rows, g], &rna),
            ("gene_images", vec![ds.gene_samples.len(), c, h, w], &gene_images),
        ],
    )?;
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        config: ds.config.clone(),
        config_hash: config_hash(&ds.config)?,
        samples,
        gene_samples,
        splits: ds.splits.clone(),
        truth: ds.truth.clone(),
        blobs,
    };
    write_manifest(dir, &manifest)
}

/// Load a dataset directory. The causal world is re-derived from the
/// config echo, so a loaded dataset supports the same queries as a
/// freshly generated one.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_manifest(dir)?;
    if manifest.format_version != DATASET_VERSION {
        return Err(TideError::data(format!(
            "dataset format v{} not supported (expected v{DATASET_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.config_hash != config_hash(&manifest.config)? {
        return Err(TideError::data(
            "dataset manifest config hash does not match its config echo",
        ));
    }
    let world = World::generate(&manifest.config)?;
    let (c, h, w) = manifest.config.image_shape;
    let g = manifest.config.n_genes;

    let mut arrays = read_f32_blob(&dir.join(DATASET_BLOB), &manifest.blobs)?;
    let by_name = |name: &str| -> Result<usize> {
        manifest
            .blobs
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| TideError::data(format!("dataset blob missing entry {name}")))
    };
    let gi = by_name("gene_images")?;
    let ri = by_name("rna")?;
    let ii = by_name("images")?;
    for (idx, rows, cols) in [
        (ii, manifest.samples.len(), c * h * w),
        (ri, usize::MAX, g),
        (gi, manifest.gene_samples.len(), c * h * w),
    ] {
        let e = &manifest.blobs[idx];
        if e.shape.len() < 2 || (rows != usize::MAX && e.shape[0] != rows) {
            return Err(TideError::data(format!(
                "dataset blob {} has unexpected shape {:?}",
                e.name, e.shape
            )));
        }
        let per: usize = e.shape[1..].iter().product();
        if per != cols {
            return Err(TideError::data(format!(
                "dataset blob {} rows carry {} values, config implies {}",
                e.name, per, cols
            )));
        }
    }

    let gene_images = std::mem::take(&mut arrays[gi]);
    let rna = std::mem::take(&mut arrays[ri]);
    let images = std::mem::take(&mut arrays[ii]);
    let n_rna = manifest.blobs[ri].shape[0];

    let pix = c * h * w;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, m) in manifest.samples.iter().enumerate() {
        let image = Array3::from_shape_vec((c, h, w), images[i * pix..(i + 1) * pix].to_vec())
            .expect("image slice matches shape");
        let rna_vec = match m.rna_row {
            Some(row) if row < n_rna => Some(ndarray::Array1::from_vec(
                rna[row * g..(row + 1) * g].to_vec(),
            )),
            Some(row) => {
                return Err(TideError::data(format!(
                    "sample {} points at rna row {row}, blob has {n_rna}",
                    m.sample_id
                )))
            }
            None => None,
        };
        samples.push(Sample {
            sample_id: m.sample_id.clone(),
            image,
            rna: rna_vec,
            cell_id: m.cell_id.clone(),
            drug_id: m.drug_id.clone(),
            dose_image: m.dose_image.as_deref().map(dose_from_string).transpose()?,
            dose_rna: m.dose_rna.as_deref().map(dose_from_string).transpose()?,
            batch_id: m.batch_id.clone(),
            well_id: m.well_id.clone(),
            is_control: m.is_control,
            is_paired: m.is_paired,
        });
    }
    let mut gene_samples = Vec::with_capacity(manifest.gene_samples.len());
    for (i, m) in manifest.gene_samples.iter().enumerate() {
        let image =
            Array3::from_shape_vec((c, h, w), gene_images[i * pix..(i + 1) * pix].to_vec())
                .expect("image slice matches shape");
        if m.gene >= g {
            return Err(TideError::data(format!(
                "gene sample {} targets gene {}, config has {g}",
                m.sample_id, m.gene
            )));
        }
        gene_samples.push(GenePerturbSample {
            sample_id: m.sample_id.clone(),
            image,
            gene: m.gene,
            cell_id: m.cell_id.clone(),
            batch_id: m.batch_id.clone(),
            well_id: m.well_id.clone(),
        });
    }
    Ok(Dataset {
        config: manifest.config,
        world,
        samples,
        gene_samples,
        truth: manifest.truth,
        splits: manifest.splits,
    })
}
