//! On-disk dataset layout.
//!
//! ```text
//! dataset.json        manifest: schema, file list, class names, format version
//! samples.csv         patient_id,visit_id,label  (one row per visit)
//! tabular.csv         radiomics features
//! gm_embeddings.csv   patient_id,visit_id,e0..e{d-1}
//! genes.csv, meta.csv
//! gm_volumes/         <patient>__<visit>.obv, when volumes replace embeddings
//! ```
//!
//! Modality files carry key columns then one column per feature. An empty
//! cell is a missing entry; a missing row means the modality is absent for
//! that visit. Lines starting with `#` are provenance comments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSchema, Label, ModalityBlock, ModalityKind, Sample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::volume::Volume3D;

pub const FORMAT_VERSION: u32 = 1;

/// Run identity embedded in every emitted artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment_line(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub schema: DatasetSchema,
    /// Modality name (`radiomics`, `gm`, `genes`, `meta`, `samples`, `gm_volumes`) to relative path.
    pub files: BTreeMap<String, String>,
    /// Distinct patients per class.
    pub patient_counts: BTreeMap<String, usize>,
    pub num_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn file_name(kind: ModalityKind) -> &'static str {
    match kind {
        ModalityKind::Radiomics => "tabular.csv",
        ModalityKind::GmEmbedding => "gm_embeddings.csv",
        ModalityKind::Genes => "genes.csv",
        ModalityKind::Meta => "meta.csv",
    }
}

fn volume_file(sample: &Sample) -> String {
    format!("{}__{}.obv", sample.patient_id, sample.visit_id)
}

fn fmt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn save_dataset(data: &Dataset, dir: &Path, provenance: Option<&Provenance>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let header = provenance.map(Provenance::comment_line).unwrap_or_default();
    let mut files = BTreeMap::new();
    let has_volumes = data.samples.iter().any(|s| s.gm_volume.is_some());

    let mut out = String::from(&header);
    out.push_str("patient_id,visit_id,label\n");
    for s in &data.samples {
        out.push_str(&format!("{},{},{}\n", s.patient_id, s.visit_id, s.label.map(Label::name).unwrap_or("")));
    }
    fs::write(dir.join("samples.csv"), out)?;
    files.insert("samples".to_string(), "samples.csv".to_string());

    for kind in ModalityKind::ALL {
        if kind == ModalityKind::GmEmbedding && has_volumes {
            continue;
        }
        let ms = data.schema.modality(kind);
        let with_label = kind != ModalityKind::GmEmbedding;
        let mut out = String::from(&header);
        let mut cols: Vec<&str> = vec!["patient_id", "visit_id"];
        if with_label {
            cols.push("label");
        }
        cols.extend(ms.numeric.iter().map(String::as_str));
        cols.extend(ms.categorical.iter().map(|c| c.name.as_str()));
        out.push_str(&cols.join(","));
        out.push('\n');
        for s in data.samples.iter().filter(|s| s.is_present(kind)) {
            let b = s.block(kind);
            let mut row = vec![s.patient_id.clone(), s.visit_id.clone()];
            if with_label {
                row.push(s.label.map(Label::name).unwrap_or("").to_string());
            }
            row.extend(b.numeric.iter().map(|&v| fmt_f64(v)));
            row.extend(b.categorical.iter().map(|v| v.map(|c| c.to_string()).unwrap_or_default()));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(dir.join(file_name(kind)), out)?;
        files.insert(kind.name().to_string(), file_name(kind).to_string());
    }

    if has_volumes {
        let vdir = dir.join("gm_volumes");
        fs::create_dir_all(&vdir)?;
        for s in data.samples.iter().filter(|s| s.is_present(ModalityKind::GmEmbedding)) {
            let vol = s.gm_volume.as_ref().ok_or_else(|| {
                Error::Schema(format!("sample {}/{} has grey matter but no volume", s.patient_id, s.visit_id))
            })?;
            vol.save(&vdir.join(volume_file(s)))?;
        }
        files.insert("gm_volumes".to_string(), "gm_volumes".to_string());
    }

    let counts = data.patient_label_counts();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        class_names: Label::ALL.iter().map(|l| l.name().to_string()).collect(),
        schema: data.schema.clone(),
        files,
        patient_counts: Label::ALL.iter().map(|l| (l.name().to_string(), counts[l.index()])).collect(),
        num_samples: data.len(),
        provenance: provenance.cloned(),
    };
    let mut f = fs::File::create(dir.join("dataset.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?)
}

fn parse_opt<T: std::str::FromStr>(cell: &str, what: &str) -> Result<Option<T>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse().map(Some).map_err(|_| Error::Schema(format!("cannot parse `{cell}` in {what}")))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format version {}", manifest.format_version)));
    }
    if manifest.class_names != Label::ALL.iter().map(|l| l.name()).collect::<Vec<_>>() || manifest.class_names.len() != NUM_CLASSES {
        return Err(Error::Schema(format!("class names {:?} differ from CTL, MCI, AD", manifest.class_names)));
    }
    let schema = manifest.schema.clone();

    let samples_file = manifest.files.get("samples").ok_or_else(|| Error::Schema("manifest lists no samples file".into()))?;
    let mut order: Vec<(String, String, Option<Label>)> = Vec::new();
    for rec in reader(&dir.join(samples_file))?.records() {
        let rec = rec?;
        let label = match rec.get(2).unwrap_or("") {
            "" => None,
            l => Some(l.parse()?),
        };
        order.push((rec[0].to_string(), rec[1].to_string(), label));
    }

    let mut blocks: BTreeMap<(String, String), Vec<ModalityBlock>> = BTreeMap::new();
    for kind in ModalityKind::ALL {
        let Some(rel) = manifest.files.get(kind.name()) else { continue };
        let ms = schema.modality(kind);
        let mut rdr = reader(&dir.join(rel))?;
        let headers = rdr.headers()?.clone();
        let key_cols = if headers.get(2) == Some("label") { 3 } else { 2 };
        let expected = key_cols + ms.width();
        if headers.len() != expected {
            return Err(Error::Schema(format!("{rel}: {} columns, schema expects {expected}", headers.len())));
        }
        for (j, name) in ms.numeric.iter().chain(ms.categorical.iter().map(|c| &c.name)).enumerate() {
            if &headers[key_cols + j] != name {
                return Err(Error::Schema(format!("{rel}: column {} is `{}`, schema expects `{name}`", key_cols + j, &headers[key_cols + j])));
            }
        }
        for rec in rdr.records() {
            let rec = rec?;
            let what = format!("{rel} row {}/{}", &rec[0], &rec[1]);
            let numeric = (0..ms.numeric.len()).map(|j| parse_opt::<f64>(&rec[key_cols + j], &what)).collect::<Result<Vec<_>>>()?;
            let off = key_cols + ms.numeric.len();
            let categorical =
                (0..ms.categorical.len()).map(|j| parse_opt::<u32>(&rec[off + j], &what)).collect::<Result<Vec<_>>>()?;
            blocks
                .entry((rec[0].to_string(), rec[1].to_string()))
                .or_default()
                .push(ModalityBlock::present(kind, numeric, categorical));
        }
    }

    let volume_dir = manifest.files.get("gm_volumes").map(|r| dir.join(r));
    let mut samples = Vec::with_capacity(order.len());
    for (pid, vid, label) in order {
        let mut modalities = ModalityKind::ALL.map(|k| ModalityBlock::absent(k, schema.modality(k)));
        if let Some(found) = blocks.remove(&(pid.clone(), vid.clone())) {
            for b in found {
                let i = b.kind.index();
                if modalities[i].present {
                    return Err(Error::Schema(format!("duplicate {} row for {pid}/{vid}", b.kind)));
                }
                modalities[i] = b;
            }
        }
        let mut sample = Sample { patient_id: pid, visit_id: vid, label, modalities, gm_volume: None };
        if let Some(vdir) = &volume_dir {
            let path = vdir.join(volume_file(&sample));
            if path.exists() {
                sample.gm_volume = Some(Arc::new(Volume3D::load(&path)?));
                // embedding values come from the image encoder at run time
                *sample.block_mut(ModalityKind::GmEmbedding) = ModalityBlock::present(
                    ModalityKind::GmEmbedding,
                    vec![Some(0.0); schema.gm_dim()],
                    vec![],
                );
            }
        }
        samples.push(sample);
    }
    if let Some(((pid, vid), _)) = blocks.into_iter().next() {
        return Err(Error::Schema(format!("modality row for {pid}/{vid} has no entry in samples.csv")));
    }
    Dataset::new(schema, samples)
}

#[cfg(test)]
mod tests {
    use super::super::{synth_generate, GmVolumeConfig, SynthConfig};
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { class_counts: [4, 3, 5], ..Default::default() };
        let d = synth_generate(&cfg, 8).unwrap();
        let m = save_dataset(&d, dir.path(), None).unwrap();
        assert_eq!(m.patient_counts["AD"], 5);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn export_is_byte_identical_for_same_seed() {
        let cfg = SynthConfig { class_counts: [6, 6, 6], ..Default::default() };
        let prov = Provenance { config_hash: "abc".into(), seed: 7 };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(&synth_generate(&cfg, 7).unwrap(), a.path(), Some(&prov)).unwrap();
        save_dataset(&synth_generate(&cfg, 7).unwrap(), b.path(), Some(&prov)).unwrap();
        for f in ["dataset.json", "samples.csv", "tabular.csv", "gm_embeddings.csv", "genes.csv", "meta.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn volumes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            class_counts: [2, 2, 2],
            gm_dim: 8,
            gm_volume: Some(GmVolumeConfig { side: 4, grid: 2, voxel_noise: 0.1 }),
            ..Default::default()
        };
        let d = synth_generate(&cfg, 1).unwrap();
        save_dataset(&d, dir.path(), None).unwrap();
        assert!(!dir.path().join("gm_embeddings.csv").exists());
        let back = load_dataset(dir.path()).unwrap();
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.gm_volume, b.gm_volume);
        }
    }

    #[test]
    fn header_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_generate(&SynthConfig { class_counts: [2, 2, 2], ..Default::default() }, 1).unwrap();
        save_dataset(&d, dir.path(), None).unwrap();
        let p = dir.path().join("genes.csv");
        let text = fs::read_to_string(&p).unwrap().replacen("GENE000", "GENE999", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Schema(_))));
    }
}
