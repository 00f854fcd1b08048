//! Dataset directories.
//!
//! ```text
//! manifest.csv            id,role,image_path,mask_path
//! provenance.txt          generator and split settings (generated sets only)
//! images/NNNN.tcsm        one [1, H, W] tensor per image
//! masks/NNNN.tcsm         one [H, W] tensor per labeled or validation image
//! diagnostic/NNNN.tcsm    masks of unlabeled images, never read by training
//! ```
//!
//! Paths in the manifest are relative to the directory. An unlabeled row has
//! an empty `mask_path`.

use std::fs;
use std::path::Path;

use tcsm_core::data::{split, GenSpec, LabeledSample, Provenance, SemiDataset, UnlabeledSample};

use crate::checkpoint::{load_tensor, save_tensor};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const PROVENANCE: &str = "provenance.txt";
const DIAGNOSTIC_DIR: &str = "diagnostic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Labeled,
    Unlabeled,
    Validation,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::Validation => "validation",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Role::Labeled, Role::Unlabeled, Role::Validation]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: u32,
    pub role: Role,
    pub image_path: String,
    pub mask_path: String,
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(CliError::io(path))
}

fn provenance_text(p: &Provenance) -> String {
    let g = &p.gen;
    format!(
        "num_images = {}\nimage_size = {}\nmin_shapes = {}\nmax_shapes = {}\nfg_mean = {}\nfg_std = {}\n\
         bg_mean = {}\nbg_std = {}\ntexture_sigma = {}\ndistractors = {}\ndata_seed = {}\n\
         labeled_fraction = {}\nval_fraction = {}\nsplit_seed = {}\n",
        g.num_images,
        g.image_size,
        g.min_shapes,
        g.max_shapes,
        g.fg_mean,
        g.fg_std,
        g.bg_mean,
        g.bg_std,
        g.noise_sigma,
        g.distractors,
        g.seed,
        p.labeled_fraction,
        p.val_fraction,
        p.split_seed,
    )
}

fn parse_provenance(text: &str) -> Option<Provenance> {
    let mut p = Provenance {
        gen: GenSpec::default(),
        split_seed: 0,
        labeled_fraction: 0.0,
        val_fraction: 0.0,
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=')?;
        let v = v.trim();
        let g = &mut p.gen;
        match k.trim() {
            "num_images" => g.num_images = v.parse().ok()?,
            "image_size" => g.image_size = v.parse().ok()?,
            "min_shapes" => g.min_shapes = v.parse().ok()?,
            "max_shapes" => g.max_shapes = v.parse().ok()?,
            "fg_mean" => g.fg_mean = v.parse().ok()?,
            "fg_std" => g.fg_std = v.parse().ok()?,
            "bg_mean" => g.bg_mean = v.parse().ok()?,
            "bg_std" => g.bg_std = v.parse().ok()?,
            "texture_sigma" => g.noise_sigma = v.parse().ok()?,
            "distractors" => g.distractors = v.parse().ok()?,
            "data_seed" => g.seed = v.parse().ok()?,
            "labeled_fraction" => p.labeled_fraction = v.parse().ok()?,
            "val_fraction" => p.val_fraction = v.parse().ok()?,
            "split_seed" => p.split_seed = v.parse().ok()?,
            _ => return None,
        }
    }
    Some(p)
}

/// Writes `ds` under `dir`, creating it if needed. Rows are ordered by id,
/// so equal datasets give byte-identical directories.
pub fn write_dataset(dir: &Path, ds: &SemiDataset) -> Result<Vec<ManifestRow>> {
    for sub in ["images", "masks", DIAGNOSTIC_DIR] {
        mkdir(&dir.join(sub))?;
    }
    let mut rows = Vec::with_capacity(ds.len());
    let mut put = |id: u32, role: Role, image: &tcsm_core::Tensor, mask: Option<&tcsm_core::Tensor>| -> Result<()> {
        let image_path = format!("images/{id:04}.tcsm");
        save_tensor(&dir.join(&image_path), image)?;
        let mask_path = match mask {
            Some(m) => {
                let p = format!("masks/{id:04}.tcsm");
                save_tensor(&dir.join(&p), m)?;
                p
            }
            None => String::new(),
        };
        rows.push(ManifestRow {
            id,
            role,
            image_path,
            mask_path,
        });
        Ok(())
    };
    for s in &ds.labeled {
        put(s.id, Role::Labeled, &s.image, Some(&s.mask))?;
    }
    for s in &ds.unlabeled {
        put(s.id, Role::Unlabeled, &s.image, None)?;
    }
    for s in &ds.validation {
        put(s.id, Role::Validation, &s.image, Some(&s.mask))?;
    }
    for (id, m) in ds.diagnostic_masks() {
        save_tensor(&dir.join(format!("{DIAGNOSTIC_DIR}/{id:04}.tcsm")), m)?;
    }
    rows.sort_by_key(|r| r.id);

    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(CliError::csv(&path))?;
    w.write_record(["id", "role", "image_path", "mask_path"])
        .map_err(CliError::csv(&path))?;
    for r in &rows {
        w.write_record([r.id.to_string().as_str(), r.role.name(), &r.image_path, &r.mask_path])
            .map_err(CliError::csv(&path))?;
    }
    w.flush().map_err(CliError::io(&path))?;

    if let Some(p) = &ds.provenance {
        let path = dir.join(PROVENANCE);
        fs::write(&path, provenance_text(p)).map_err(CliError::io(&path))?;
    }
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path).map_err(CliError::csv(&path))?;
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let headers = r.headers().map_err(CliError::csv(&path))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "role", "image_path", "mask_path"] {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(CliError::csv(&path))?;
        let id = rec[0].parse().map_err(|_| bad(format!("bad id {:?}", &rec[0])))?;
        let role = Role::parse(&rec[1]).ok_or_else(|| bad(format!("bad role {:?}", &rec[1])))?;
        if role != Role::Unlabeled && rec[3].is_empty() {
            return Err(bad(format!("{} image {id} has no mask", role.name())));
        }
        rows.push(ManifestRow {
            id,
            role,
            image_path: rec[2].to_string(),
            mask_path: rec[3].to_string(),
        });
    }
    Ok(rows)
}

/// Loads a dataset directory as stored.
pub fn read_dataset(dir: &Path) -> Result<SemiDataset> {
    let rows = read_manifest(dir)?;
    let (mut labeled, mut unlabeled, mut validation, mut diag) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in rows {
        let image = load_tensor(&dir.join(&r.image_path))?;
        match r.role {
            Role::Unlabeled => {
                let d = dir.join(format!("{DIAGNOSTIC_DIR}/{:04}.tcsm", r.id));
                if d.exists() {
                    diag.push((r.id, load_tensor(&d)?));
                }
                unlabeled.push(UnlabeledSample { id: r.id, image });
            }
            role => {
                let mask = load_tensor(&dir.join(&r.mask_path))?;
                let s = LabeledSample { id: r.id, image, mask };
                if role == Role::Labeled {
                    labeled.push(s)
                } else {
                    validation.push(s)
                }
            }
        }
    }
    let prov_path = dir.join(PROVENANCE);
    let provenance = if prov_path.exists() {
        let text = fs::read_to_string(&prov_path).map_err(CliError::io(&prov_path))?;
        Some(
            parse_provenance(&text)
                .ok_or_else(|| CliError::Config(format!("{}: malformed provenance", prov_path.display())))?,
        )
    } else {
        None
    };
    let complete = diag.len() == unlabeled.len();
    let ds = SemiDataset::new(labeled, unlabeled, validation, provenance, if complete { diag } else { Vec::new() })?;
    Ok(ds)
}

/// Loads a dataset directory and, when every unlabeled image still has its
/// diagnostic mask, re-splits it with the requested fractions and seed.
/// Without diagnostic masks the stored roles are used unchanged.
pub fn load_split(dir: &Path, labeled_fraction: f64, val_fraction: f64, split_seed: u64) -> Result<SemiDataset> {
    let ds = read_dataset(dir)?;
    if ds.diagnostic_masks().len() != ds.unlabeled.len() {
        return Ok(ds);
    }
    let provenance = ds.provenance.map(|p| Provenance {
        labeled_fraction,
        val_fraction,
        split_seed,
        ..p
    });
    let mut out = split(ds.all_pairs()?, labeled_fraction, val_fraction, split_seed)?;
    out.provenance = provenance;
    Ok(out)
}
